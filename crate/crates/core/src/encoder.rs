//! Bidirectional LSTM video encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{lstm_step, Dropout, Model, ParamVars};
use crate::tensor::Tensor;

/// Per-frame features, one row per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::EmptyInput("feature sequence"));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { frames })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::InvalidArgument(format!(
                "frame {bad} has width {} but frame 0 has width {width}",
                rows[bad].len()
            )));
        }
        Self::new(Tensor::from_rows(&rows))
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }
}

impl TryFrom<Vec<Vec<f64>>> for FeatureSequence {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<FeatureSequence> for Vec<Vec<f64>> {
    fn from(f: FeatureSequence) -> Self {
        (0..f.num_frames()).map(|i| f.frame(i).to_vec()).collect()
    }
}

/// Encoder states on a graph: `N + 1` rows, the last one the all-zero blank slot.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub num_frames: usize,
}

/// Runs the forward and backward LSTMs over the frames, projects each
/// concatenated pair of hidden states to the decoder size and appends the
/// blank row.
pub fn encode_video(
    graph: &mut Graph,
    vars: &ParamVars,
    features: &FeatureSequence,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<EncoderOutput> {
    let (enc_h, fdim) = {
        let (rows, cols) = graph.shape(vars.enc_fwd.w);
        (rows / 4, cols)
    };
    if features.feature_dim() != fdim {
        return Err(Error::ShapeMismatch {
            op: "encode_video",
            lhs: features.frames().shape(),
            rhs: (features.num_frames(), fdim),
        });
    }
    let d = graph.shape(vars.enc_proj_w).0;
    let n = features.num_frames();
    let frames: Vec<Var> = (0..n)
        .map(|i| graph.constant(Tensor::vector(features.frame(i).to_vec())))
        .collect();

    let zero = graph.constant(Tensor::zeros(enc_h, 1));
    let (mut h, mut c) = (zero, zero);
    let mut fwd = Vec::with_capacity(n);
    for &x in &frames {
        (h, c) = lstm_step(graph, &vars.enc_fwd, x, h, c)?;
        fwd.push(h);
    }
    let (mut h, mut c) = (zero, zero);
    let mut bwd = vec![zero; n];
    for i in (0..n).rev() {
        (h, c) = lstm_step(graph, &vars.enc_bwd, frames[i], h, c)?;
        bwd[i] = h;
    }

    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..n {
        let both = graph.concat(&[fwd[i], bwd[i]])?;
        let proj = graph.matvec(vars.enc_proj_w, both)?;
        let mut state = graph.add(proj, vars.enc_proj_b)?;
        if let Some(dr) = dropout.as_deref_mut() {
            state = dr.apply(graph, state)?;
        }
        rows.push(state);
    }
    rows.push(graph.constant(Tensor::zeros(d, 1)));
    let states = graph.stack_rows(&rows)?;
    Ok(EncoderOutput {
        states,
        num_frames: n,
    })
}

impl Model {
    /// Evaluation-mode encoder states as a plain `(N + 1) x d` matrix.
    pub fn encode(&self, features: &FeatureSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, &self.params, false);
        let out = encode_video(&mut g, &vars, features, None)?;
        Ok(g.value(out.states).clone())
    }
}
