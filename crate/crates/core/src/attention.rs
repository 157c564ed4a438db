//! Additive soft attention: the visual temporal attention over encoder states
//! and the textual attention over the embeddings of every word emitted so far.
//!
//! Both score item `i` as `vᵀ tanh(K item_i + Q query + b)`, normalise the
//! scores with a softmax and return the weighted sum of the items.

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::AttentionVars;

#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    /// Weighted sum of the attended items (`d`-vector).
    pub context: Var,
    /// Softmax weights, one per item.
    pub weights: Var,
    /// Pre-softmax scores.
    pub scores: Var,
}

/// Attention over the rows of `items` conditioned on `query`.
pub fn additive_attention(
    graph: &mut Graph,
    att: &AttentionVars,
    items: Var,
    query: Var,
) -> Result<AttentionResult> {
    let keys = graph.matmul_nt(items, att.key)?;
    let q = graph.matvec(att.query, query)?;
    let q = graph.add(q, att.bias)?;
    let pre = graph.add_row_broadcast(keys, q)?;
    let act = graph.tanh(pre);
    let scores = graph.matvec(act, att.score)?;
    let weights = graph.softmax(scores)?;
    let context = graph.matvec_t(items, weights)?;
    Ok(AttentionResult {
        context,
        weights,
        scores,
    })
}

/// Visual context `a_t` from the encoder states (blank slot included) and the
/// previous top-layer decoder hidden state.
pub fn visual_attend(
    graph: &mut Graph,
    att: &AttentionVars,
    encoder: &EncoderOutput,
    decoder_hidden_prev: Var,
) -> Result<AttentionResult> {
    additive_attention(graph, att, encoder.states, decoder_hidden_prev)
}

/// Attended word history `w̄_t` over `w_0..w_{t-1}`, scored against the
/// visual context.
pub fn text_attend(
    graph: &mut Graph,
    att: &AttentionVars,
    history: &[Var],
    visual_context: Var,
) -> Result<AttentionResult> {
    if history.is_empty() {
        return Err(Error::EmptyInput("word history"));
    }
    let items = graph.stack_rows(history)?;
    additive_attention(graph, att, items, visual_context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_att(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> AttentionVars {
        AttentionVars {
            key: g.leaf(Tensor::uniform(d, d, 1.0, rng)),
            query: g.leaf(Tensor::uniform(d, d, 1.0, rng)),
            bias: g.leaf(Tensor::uniform(d, 1, 1.0, rng)),
            score: g.leaf(Tensor::uniform(d, 1, 1.0, rng)),
        }
    }

    fn zero_att(g: &mut Graph, d: usize) -> AttentionVars {
        AttentionVars {
            key: g.constant(Tensor::zeros(d, d)),
            query: g.constant(Tensor::zeros(d, d)),
            bias: g.constant(Tensor::zeros(d, 1)),
            score: g.constant(Tensor::zeros(d, 1)),
        }
    }

    #[test]
    fn single_frame_equal_scores_halves_state() {
        let mut g = Graph::new();
        let att = zero_att(&mut g, 3);
        let states = g.constant(Tensor::from_rows(&[[2.0, -4.0, 1.0], [0.0, 0.0, 0.0]]));
        let enc = EncoderOutput {
            states,
            num_frames: 1,
        };
        let h = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let r = visual_attend(&mut g, &att, &enc, h).unwrap();
        assert_eq!(g.value(r.context).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_scoring_gives_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let att = zero_att(&mut g, 4);
        let m = Tensor::uniform(5, 4, 1.0, &mut rng);
        let items = g.constant(m.clone());
        let q = g.constant(Tensor::uniform(4, 1, 1.0, &mut rng));
        let r = additive_attention(&mut g, &att, items, q).unwrap();
        for &w in g.value(r.weights).data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        for c in 0..4 {
            let mean: f64 = (0..5).map(|i| m.get(i, c)).sum::<f64>() / 5.0;
            assert!((g.value(r.context).data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_history_entry_is_returned_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let att = random_att(&mut g, 3, &mut rng);
        let w0 = g.constant(Tensor::vector(vec![0.3, -0.7, 1.9]));
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let r = text_attend(&mut g, &att, &[w0], a).unwrap();
        assert_eq!(g.value(r.weights).data(), &[1.0]);
        assert_eq!(g.value(r.context).data(), g.value(w0).data());
    }

    #[test]
    fn identical_history_returns_that_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let att = random_att(&mut g, 3, &mut rng);
        let w = g.constant(Tensor::vector(vec![0.25, -0.5, 0.125]));
        let hist = vec![w; 4];
        let a = g.constant(Tensor::uniform(3, 1, 1.0, &mut rng));
        let r = text_attend(&mut g, &att, &hist, a).unwrap();
        for (x, y) in g.value(r.context).data().iter().zip(g.value(w).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_history_rejected() {
        let mut g = Graph::new();
        let att = zero_att(&mut g, 2);
        let a = g.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            text_attend(&mut g, &att, &[], a),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn shift_invariance_of_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut g = Graph::new();
            let scores: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-20.0..20.0);
            let a = g.constant(Tensor::vector(scores.clone()));
            let b = g.constant(Tensor::vector(scores.iter().map(|s| s + c).collect()));
            let sa = g.softmax(a).unwrap();
            let sb = g.softmax(b).unwrap();
            for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
