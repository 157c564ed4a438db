mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcap_core::attention::text_attend;
use vidcap_core::model::AttentionVars;
use vidcap_core::{Graph, Tensor};

fn random_vars(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> AttentionVars {
    AttentionVars {
        key: g.constant(Tensor::uniform(d, d, 1.0, rng)),
        query: g.constant(Tensor::uniform(d, d, 1.0, rng)),
        bias: g.constant(Tensor::uniform(d, 1, 1.0, rng)),
        score: g.constant(Tensor::uniform(d, 1, 1.0, rng)),
    }
}

/// Perturbing the visual context moves the word-history weights.
#[test]
fn history_weights_respond_to_visual_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut moved = 0;
    for _ in 0..100 {
        let d = rng.random_range(2..8);
        let len = rng.random_range(2..7);
        let mut g = Graph::new();
        let att = random_vars(&mut g, d, &mut rng);
        let history: Vec<_> = (0..len).map(|_| g.constant(Tensor::uniform(d, 1, 1.0, &mut rng))).collect();
        let a = Tensor::uniform(d, 1, 1.0, &mut rng);
        let mut b = a.clone();
        for x in b.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
        let qa = g.constant(a);
        let qb = g.constant(b);
        let wa = text_attend(&mut g, &att, &history, qa).unwrap().weights;
        let wb = text_attend(&mut g, &att, &history, qb).unwrap().weights;
        let diff = g
            .value(wa)
            .data()
            .iter()
            .zip(g.value(wb).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if diff > 1e-9 {
            moved += 1;
        }
    }
    assert!(moved >= 99, "{moved}/100");
}

/// The attended history equals the weighted sum computed term by term.
#[test]
fn context_is_weighted_sum_of_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let d = rng.random_range(1..6);
        let len = rng.random_range(1..6);
        let mut g = Graph::new();
        let att = random_vars(&mut g, d, &mut rng);
        let items: Vec<Tensor> = (0..len).map(|_| Tensor::uniform(d, 1, 2.0, &mut rng)).collect();
        let history: Vec<_> = items.iter().map(|t| g.constant(t.clone())).collect();
        let q = g.constant(Tensor::uniform(d, 1, 1.0, &mut rng));
        let out = text_attend(&mut g, &att, &history, q).unwrap();
        let w = g.value(out.weights).data().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..d {
            let direct: f64 = w.iter().zip(&items).map(|(wi, it)| wi * it.data()[k]).sum();
            assert!((g.value(out.context).data()[k] - direct).abs() < 1e-12);
        }
    }
}
