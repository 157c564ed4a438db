//! One step of the three-LSTM decoder.
//!
//! LSTM1 reads the last word, LSTM2 reads the attended word history, both
//! alongside the visual context. A sigmoid gate mixes their outputs into the
//! input of LSTM3, whose hidden state is projected to vocabulary logits.

use serde::{Deserialize, Serialize};

use crate::attention::{text_attend, visual_attend};
use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::{lstm_step, AttentionLink, Dropout, GateKind, ModelConfig, ParamVars};
use crate::tensor::Tensor;

/// Recurrent state of the three decoder LSTMs plus the embeddings of every
/// word fed so far, starting with the BOS embedding.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub lstm1: (Var, Var),
    pub lstm2: (Var, Var),
    pub lstm3: (Var, Var),
    pub history: Vec<Var>,
}

/// Per-step values exported for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Mixing coefficient; averaged over dimensions for the per-dimension gate.
    pub gate: f64,
    pub logits: Vec<f64>,
}

/// Graph handles produced by one step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gate: Var,
    /// LSTM1 hidden state `s_t`.
    pub last_word_out: Var,
    /// LSTM2 hidden state `d_t`.
    pub history_out: Var,
    /// LSTM3 input `q_t`.
    pub mixed: Var,
}

impl StepOutput {
    pub fn trace(&self, graph: &Graph) -> StepTrace {
        let gate = graph.value(self.gate).data();
        StepTrace {
            alpha: graph.value(self.alpha).data().to_vec(),
            beta: graph.value(self.beta).data().to_vec(),
            gate: gate.iter().sum::<f64>() / gate.len() as f64,
            logits: graph.value(self.logits).data().to_vec(),
        }
    }
}

/// Zero LSTM states and a history holding only the BOS embedding.
pub fn init_decoder_state(graph: &mut Graph, hidden: usize, bos_embedding: Var) -> DecoderState {
    let zero = graph.constant(Tensor::zeros(hidden, 1));
    DecoderState {
        lstm1: (zero, zero),
        lstm2: (zero, zero),
        lstm3: (zero, zero),
        history: vec![bos_embedding],
    }
}

/// Embedding of `token` on the graph.
pub fn embed(graph: &mut Graph, vars: &ParamVars, token: usize) -> Result<Var> {
    graph.row(vars.embed, token)
}

pub fn decoder_step(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    state: &DecoderState,
    last_word_emb: Var,
    encoder: &EncoderOutput,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(DecoderState, StepOutput)> {
    let &newest = state.history.last().ok_or(Error::EmptyInput("word history"))?;
    if newest != last_word_emb && graph.value(newest) != graph.value(last_word_emb) {
        return Err(Error::InvalidArgument(
            "last word embedding must be the newest history entry".into(),
        ));
    }
    let d = config.hidden;
    if graph.shape(last_word_emb) != (d, 1) {
        return Err(Error::ShapeMismatch {
            op: "decoder_step",
            lhs: graph.shape(last_word_emb),
            rhs: (d, 1),
        });
    }

    let vis = visual_attend(graph, &vars.vis, encoder, state.lstm3.0)?;
    let a_t = vis.context;

    let (attended_words, beta) = match config.link {
        AttentionLink::TextDisabled => {
            let mut w = vec![0.0; state.history.len()];
            w[0] = 1.0;
            (state.history[0], graph.constant(Tensor::vector(w)))
        }
        link => {
            let query = if link == AttentionLink::Linked {
                a_t
            } else {
                graph.constant(Tensor::zeros(d, 1))
            };
            let txt = text_attend(graph, &vars.txt, &state.history, query)?;
            (txt.context, txt.weights)
        }
    };

    let in1 = graph.concat(&[last_word_emb, a_t])?;
    let (s, c1) = lstm_step(graph, &vars.lstm1, in1, state.lstm1.0, state.lstm1.1)?;
    let in2 = graph.concat(&[attended_words, a_t])?;
    let (dv, c2) = lstm_step(graph, &vars.lstm2, in2, state.lstm2.0, state.lstm2.1)?;

    let gate_pre = graph.matvec(vars.gate_w, s)?;
    let gate = graph.sigmoid(gate_pre);
    let keep = graph.one_minus(gate);
    let mixed = match config.gate {
        GateKind::Scalar => {
            let a = graph.scale_by(s, gate)?;
            let b = graph.scale_by(dv, keep)?;
            graph.add(a, b)?
        }
        GateKind::PerDimension => {
            let a = graph.mul(gate, s)?;
            let b = graph.mul(keep, dv)?;
            graph.add(a, b)?
        }
    };

    let (h3, c3) = lstm_step(graph, &vars.lstm3, mixed, state.lstm3.0, state.lstm3.1)?;
    let top = match dropout {
        Some(dr) => dr.apply(graph, h3)?,
        None => h3,
    };
    let proj = graph.matvec(vars.out_w, top)?;
    let logits = graph.add(proj, vars.out_b)?;

    let next = DecoderState {
        lstm1: (s, c1),
        lstm2: (dv, c2),
        lstm3: (h3, c3),
        history: state.history.clone(),
    };
    Ok((
        next,
        StepOutput {
            logits,
            alpha: vis.weights,
            beta,
            gate,
            last_word_out: s,
            history_out: dv,
            mixed,
        },
    ))
}

/// Runs the decoder over a fixed token sequence. Step `t` is fed `BOS` for
/// `t = 0` and `tokens[t - 1]` afterwards, so output `t` scores `tokens[t]`.
pub fn teacher_forced(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    encoder: &EncoderOutput,
    tokens: &[usize],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Vec<StepOutput>> {
    let bos = embed(graph, vars, config.bos)?;
    let mut state = init_decoder_state(graph, config.hidden, bos);
    let mut last = bos;
    let mut outputs = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let (next, out) =
            decoder_step(graph, vars, config, &state, last, encoder, dropout.as_deref_mut())?;
        outputs.push(out);
        state = next;
        if t + 1 < tokens.len() {
            last = embed(graph, vars, tok)?;
            state.history.push(last);
        }
    }
    Ok(outputs)
}
