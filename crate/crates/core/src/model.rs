//! Model hyperparameters, the learned parameter store and its binding onto a
//! [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the visual context reaches the textual attention scorer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLink {
    /// The visual context conditions the word-history attention.
    #[default]
    Linked,
    /// The visual context is replaced by zeros inside the textual scorer.
    Unlinked,
    /// Textual attention is removed; the attended history is always `w_0`.
    TextDisabled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// One mixing coefficient per step.
    #[default]
    Scalar,
    /// One coefficient per hidden dimension.
    PerDimension,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Decoder hidden size, word embedding size and attended-state size.
    pub hidden: usize,
    /// Hidden size of each direction of the video encoder.
    pub encoder_hidden: usize,
    pub vocab_size: usize,
    pub bos: usize,
    pub eos: usize,
    #[serde(default)]
    pub link: AttentionLink,
    #[serde(default)]
    pub gate: GateKind,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, hidden: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            hidden,
            encoder_hidden: hidden,
            vocab_size,
            bos: crate::data::BOS,
            eos: crate::data::EOS,
            link: AttentionLink::Linked,
            gate: GateKind::Scalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.encoder_hidden == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.bos >= self.vocab_size || self.eos >= self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "BOS/EOS ids ({}, {}) outside vocabulary of size {}",
                self.bos, self.eos, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Names and shapes of every learned tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, h, f, v) = (self.hidden, self.encoder_hidden, self.feature_dim, self.vocab_size);
        let gate_rows = match self.gate {
            GateKind::Scalar => 1,
            GateKind::PerDimension => d,
        };
        let mut out: Vec<(String, (usize, usize))> = vec![("embed".into(), (v, d))];
        let mut lstm = |prefix: &str, input: usize, hid: usize| {
            out.push((format!("{prefix}.w"), (4 * hid, input)));
            out.push((format!("{prefix}.u"), (4 * hid, hid)));
            out.push((format!("{prefix}.b"), (4 * hid, 1)));
        };
        lstm("enc.fwd", f, h);
        lstm("enc.bwd", f, h);
        lstm("lstm1", 2 * d, d);
        lstm("lstm2", 2 * d, d);
        lstm("lstm3", d, d);
        out.push(("enc.proj.w".into(), (d, 2 * h)));
        out.push(("enc.proj.b".into(), (d, 1)));
        for prefix in ["vatt", "tatt"] {
            out.push((format!("{prefix}.key"), (d, d)));
            out.push((format!("{prefix}.query"), (d, d)));
            out.push((format!("{prefix}.bias"), (d, 1)));
            out.push((format!("{prefix}.score"), (d, 1)));
        }
        out.push(("gate.w".into(), (gate_rows, d)));
        out.push(("out.w".into(), (v, d)));
        out.push(("out.b".into(), (v, 1)));
        out
    }
}

/// Named learned tensors. Also used to hold gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (names, tensors) = config
            .param_shapes()
            .into_iter()
            .map(|(n, (r, c))| (n, Tensor::zeros(r, c)))
            .unzip();
        Self { names, tensors }
    }

    /// Uniform initialisation scaled by fan-in; LSTM forget-gate biases start at one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            let (rows, cols) = t.shape();
            if name.ends_with(".b") {
                if !name.starts_with("enc.proj") && !name.starts_with("out") {
                    let hid = rows / 4;
                    for x in &mut t.data_mut()[hid..2 * hid] {
                        *x = 1.0;
                    }
                }
            } else if name.ends_with(".bias") {
                // zero
            } else {
                let scale = if name == "embed" { 0.5 } else { 1.0 / (cols as f64).sqrt() };
                *t = Tensor::uniform(rows, cols, scale, rng);
            }
        }
        p
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Self {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(alpha);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// Projection of the attended items.
    pub key: Var,
    /// Projection of the conditioning query.
    pub query: Var,
    pub bias: Var,
    /// Scoring vector applied after the tanh.
    pub score: Var,
}

/// Every learned tensor placed on a graph, either as differentiable leaves or
/// as constants.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embed: Var,
    pub enc_fwd: LstmVars,
    pub enc_bwd: LstmVars,
    pub lstm1: LstmVars,
    pub lstm2: LstmVars,
    pub lstm3: LstmVars,
    pub enc_proj_w: Var,
    pub enc_proj_b: Var,
    pub vis: AttentionVars,
    pub txt: AttentionVars,
    pub gate_w: Var,
    pub out_w: Var,
    pub out_b: Var,
    all: Vec<Var>,
}

impl ParamVars {
    pub fn bind(graph: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let all: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        let embed = next();
        let mut lstm = || LstmVars {
            w: next(),
            u: next(),
            b: next(),
        };
        let enc_fwd = lstm();
        let enc_bwd = lstm();
        let lstm1 = lstm();
        let lstm2 = lstm();
        let lstm3 = lstm();
        let enc_proj_w = next();
        let enc_proj_b = next();
        let mut att = || AttentionVars {
            key: next(),
            query: next(),
            bias: next(),
            score: next(),
        };
        let vis = att();
        let txt = att();
        let gate_w = next();
        let out_w = next();
        let out_b = next();
        Self {
            embed,
            enc_fwd,
            enc_bwd,
            lstm1,
            lstm2,
            lstm3,
            enc_proj_w,
            enc_proj_b,
            vis,
            txt,
            gate_w,
            out_w,
            out_b,
            all,
        }
    }

    /// Collects per-parameter gradients, zero where a parameter was unused.
    pub fn gradients(&self, grads: &mut Gradients, like: &ModelParams) -> ModelParams {
        let tensors = self
            .all
            .iter()
            .zip(&like.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        ModelParams {
            names: like.names.clone(),
            tensors,
        }
    }
}

/// Inverted-dropout state used when running in training mode.
#[derive(Debug)]
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, graph: &mut Graph, x: Var) -> Result<Var> {
        graph.dropout(x, self.rate, self.rng)
    }
}

/// One LSTM step with gate order input, forget, cell, output.
pub fn lstm_step(graph: &mut Graph, p: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hid = graph.shape(h).0;
    let wx = graph.matvec(p.w, x)?;
    let uh = graph.matvec(p.u, h)?;
    let z = graph.add_n(&[wx, uh, p.b])?;
    let i = graph.slice(z, 0, hid)?;
    let i = graph.sigmoid(i);
    let f = graph.slice(z, hid, hid)?;
    let f = graph.sigmoid(f);
    let g = graph.slice(z, 2 * hid, hid)?;
    let g = graph.tanh(g);
    let o = graph.slice(z, 3 * hid, hid)?;
    let o = graph.sigmoid(o);
    let fc = graph.mul(f, c)?;
    let ig = graph.mul(i, g)?;
    let c_new = graph.add(fc, ig)?;
    let tc = graph.tanh(c_new);
    let h_new = graph.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::seeded(&config, seed);
        Ok(Self { config, params })
    }

    pub fn with_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in expected.iter().zip(params.iter()) {
            if name != pname || *shape != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }
}
