//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionLink, GateKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the cross-entropy term in the fine-tuning loss.
    pub lambda: f64,
    /// Samples scoring at least this much are skipped during fine-tuning.
    pub gate_threshold: f64,
    pub max_len: usize,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without validation BLEU-4 improvement before stopping.
    pub patience: usize,
    /// Re-evaluate the skip gate every fine-tuning epoch instead of once.
    pub regate_every_epoch: bool,
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub link: AttentionLink,
    pub gate: GateKind,
    pub beam_width: usize,
    pub length_normalize: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 64,
            lambda: 0.3,
            gate_threshold: 1.9,
            max_len: 20,
            dropout: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
            max_epochs: 50,
            patience: 5,
            regate_every_epoch: true,
            hidden: 512,
            encoder_hidden: 512,
            link: AttentionLink::Linked,
            gate: GateKind::Scalar,
            beam_width: 5,
            length_normalize: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(0.0..=2.0).contains(&self.gate_threshold) {
            return bad("gate_threshold must be in [0, 2]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_len == 0 || self.beam_width == 0 {
            return bad("batch_size, max_len and beam_width must be positive");
        }
        if self.hidden == 0 || self.encoder_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive or `none`");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    /// Like [`parse`](Self::parse), with unset keys taken from `base`.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut c = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "lr" => c.lr = parse_num(key, v)?,
                "batch_size" => c.batch_size = parse_num(key, v)?,
                "lambda" => c.lambda = parse_num(key, v)?,
                "gate_threshold" => c.gate_threshold = parse_num(key, v)?,
                "max_len" => c.max_len = parse_num(key, v)?,
                "dropout" => c.dropout = parse_num(key, v)?,
                "adam_beta1" => c.adam_beta1 = parse_num(key, v)?,
                "adam_beta2" => c.adam_beta2 = parse_num(key, v)?,
                "adam_eps" => c.adam_eps = parse_num(key, v)?,
                "clip_norm" => {
                    c.clip_norm = match v {
                        "none" | "off" => None,
                        _ => Some(parse_num(key, v)?),
                    }
                }
                "seed" => c.seed = parse_num(key, v)?,
                "max_epochs" => c.max_epochs = parse_num(key, v)?,
                "patience" => c.patience = parse_num(key, v)?,
                "regate_every_epoch" => c.regate_every_epoch = parse_bool(key, v)?,
                "hidden" => c.hidden = parse_num(key, v)?,
                "encoder_hidden" => c.encoder_hidden = parse_num(key, v)?,
                "link" => {
                    c.link = match v {
                        "linked" => AttentionLink::Linked,
                        "unlinked" => AttentionLink::Unlinked,
                        "text_disabled" => AttentionLink::TextDisabled,
                        _ => return Err(Error::Config(format!("unknown link mode `{v}`"))),
                    }
                }
                "gate" => {
                    c.gate = match v {
                        "scalar" => GateKind::Scalar,
                        "per_dimension" => GateKind::PerDimension,
                        _ => return Err(Error::Config(format!("unknown gate kind `{v}`"))),
                    }
                }
                "beam_width" => c.beam_width = parse_num(key, v)?,
                "length_normalize" => c.length_normalize = parse_bool(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let link = match self.link {
            AttentionLink::Linked => "linked",
            AttentionLink::Unlinked => "unlinked",
            AttentionLink::TextDisabled => "text_disabled",
        };
        let gate = match self.gate {
            GateKind::Scalar => "scalar",
            GateKind::PerDimension => "per_dimension",
        };
        let clip = self.clip_norm.map_or("none".to_owned(), |c| format!("{c:?}"));
        let mut s = String::new();
        let _ = write!(
            s,
            "lr = {:?}\nbatch_size = {}\nlambda = {:?}\ngate_threshold = {:?}\nmax_len = {}\n\
             dropout = {:?}\nadam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\nclip_norm = {clip}\n\
             seed = {}\nmax_epochs = {}\npatience = {}\nregate_every_epoch = {}\nhidden = {}\n\
             encoder_hidden = {}\nlink = {link}\ngate = {gate}\nbeam_width = {}\nlength_normalize = {}\n",
            self.lr,
            self.batch_size,
            self.lambda,
            self.gate_threshold,
            self.max_len,
            self.dropout,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.seed,
            self.max_epochs,
            self.patience,
            self.regate_every_epoch,
            self.hidden,
            self.encoder_hidden,
            self.beam_width,
            self.length_normalize,
        );
        s
    }
}
