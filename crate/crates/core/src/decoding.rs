//! Greedy, beam and sampled decoding. All run in evaluation mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::decoder::{decoder_step, embed, init_decoder_state, teacher_forced, DecoderState, StepTrace};
use crate::encoder::{encode_video, EncoderOutput, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVars};

/// Default caption length limit.
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Emitted words, EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every chosen token, EOS included.
    pub log_prob: f64,
    /// Whether decoding stopped on EOS rather than on the length limit.
    pub terminated: bool,
    pub traces: Vec<StepTrace>,
}

impl DecodeResult {
    /// Token chosen at each step, with the EOS when one was emitted.
    pub fn steps(&self, eos: usize) -> Vec<usize> {
        let mut out = self.tokens.clone();
        if self.terminated {
            out.push(eos);
        }
        out
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_nonzero
}

/// Evaluation-mode graph with the video already encoded.
struct Session<'m> {
    model: &'m Model,
    graph: Graph,
    vars: ParamVars,
    encoder: EncoderOutput,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, features: &FeatureSequence) -> Result<Self> {
        let mut graph = Graph::new();
        let vars = ParamVars::bind(&mut graph, &model.params, false);
        let encoder = encode_video(&mut graph, &vars, features, None)?;
        Ok(Self {
            model,
            graph,
            vars,
            encoder,
        })
    }

    fn start(&mut self) -> Result<DecoderState> {
        let bos = embed(&mut self.graph, &self.vars, self.model.config.bos)?;
        Ok(init_decoder_state(&mut self.graph, self.model.config.hidden, bos))
    }

    /// Steps `state` and returns the next state, the log-probabilities and the trace.
    fn step(&mut self, state: &DecoderState) -> Result<(DecoderState, Vec<f64>, StepTrace)> {
        let last = *state.history.last().ok_or(Error::EmptyInput("word history"))?;
        let (next, out) = decoder_step(
            &mut self.graph,
            &self.vars,
            &self.model.config,
            state,
            last,
            &self.encoder,
            None,
        )?;
        let trace = out.trace(&self.graph);
        let logp = log_softmax(&trace.logits);
        Ok((next, logp, trace))
    }

    fn feed(&mut self, state: &mut DecoderState, token: usize) -> Result<()> {
        let e = embed(&mut self.graph, &self.vars, token)?;
        state.history.push(e);
        Ok(())
    }
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(())
}

fn decode_with<F>(model: &Model, features: &FeatureSequence, max_len: usize, mut choose: F) -> Result<DecodeResult>
where
    F: FnMut(&[f64]) -> usize,
{
    check_len(max_len)?;
    let eos = model.config.eos;
    let mut s = Session::new(model, features)?;
    let mut state = s.start()?;
    let mut result = DecodeResult {
        tokens: Vec::new(),
        log_prob: 0.0,
        terminated: false,
        traces: Vec::new(),
    };
    for _ in 0..max_len {
        let (mut next, logp, trace) = s.step(&state)?;
        let tok = choose(&logp);
        result.log_prob += logp[tok];
        result.traces.push(trace);
        if tok == eos {
            result.terminated = true;
            break;
        }
        result.tokens.push(tok);
        s.feed(&mut next, tok)?;
        state = next;
    }
    Ok(result)
}

/// Picks the most probable word at every step.
pub fn greedy_decode(model: &Model, features: &FeatureSequence, max_len: usize) -> Result<DecodeResult> {
    decode_with(model, features, max_len, argmax)
}

/// Draws every word from the model distribution.
pub fn sample_decode<R: Rng + ?Sized>(
    model: &Model,
    features: &FeatureSequence,
    max_len: usize,
    rng: &mut R,
) -> Result<DecodeResult> {
    decode_with(model, features, max_len, |logp| {
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        sample_index(&probs, rng)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by mean per-step log-probability.
    pub length_normalize: bool,
}

impl BeamOptions {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            length_normalize: false,
        }
    }
}

#[derive(Clone)]
struct Hypothesis {
    state: DecoderState,
    tokens: Vec<usize>,
    log_prob: f64,
    traces: Vec<StepTrace>,
}

impl Hypothesis {
    fn finish(self, terminated: bool) -> DecodeResult {
        DecodeResult {
            tokens: self.tokens,
            log_prob: self.log_prob,
            terminated,
            traces: self.traces,
        }
    }
}

pub fn beam_decode(
    model: &Model,
    features: &FeatureSequence,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    beam_decode_with(model, features, BeamOptions::new(beam_width, max_len))
}

/// Beam search over summed log-probabilities. Hypotheses ending in EOS are
/// retired to a finished pool; hypotheses alive at the length limit are
/// finished as they stand.
pub fn beam_decode_with(model: &Model, features: &FeatureSequence, opts: BeamOptions) -> Result<DecodeResult> {
    if opts.width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    check_len(opts.max_len)?;
    let eos = model.config.eos;
    let mut s = Session::new(model, features)?;
    let mut live = vec![Hypothesis {
        state: s.start()?,
        tokens: Vec::new(),
        log_prob: 0.0,
        traces: Vec::new(),
    }];
    let mut finished: Vec<DecodeResult> = Vec::new();

    for step in 0..opts.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let (next, logp, trace) = s.step(&hyp.state)?;
            for (tok, lp) in logp.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, h, tok));
            }
            expanded.push((next, trace));
        }
        // Stable order: score descending, then parent, then token.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(opts.width);

        let mut next_live = Vec::with_capacity(opts.width);
        for (score, h, tok) in candidates {
            let parent = &live[h];
            let (state, trace) = &expanded[h];
            let mut traces = parent.traces.clone();
            traces.push(trace.clone());
            if tok == eos {
                finished.push(DecodeResult {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    terminated: true,
                    traces,
                });
            } else {
                let mut state = state.clone();
                s.feed(&mut state, tok)?;
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next_live.push(Hypothesis {
                    state,
                    tokens,
                    log_prob: score,
                    traces,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if step + 1 == opts.max_len {
            finished.extend(live.drain(..).map(|h| h.finish(false)));
            break;
        }
        if !opts.length_normalize {
            let best_done = finished.iter().map(|r| r.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            // Extensions only lower a hypothesis' score.
            if best_done >= best_live {
                break;
            }
        }
    }

    let rank = |r: &DecodeResult| {
        if opts.length_normalize {
            r.log_prob / r.traces.len().max(1) as f64
        } else {
            r.log_prob
        }
    };
    let mut best: Option<DecodeResult> = None;
    for r in finished {
        if best.as_ref().is_none_or(|b| rank(&r) > rank(b)) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Log-probability the model assigns to a fixed sequence of step choices
/// (EOS included when present).
pub fn sequence_log_prob(model: &Model, features: &FeatureSequence, steps: &[usize]) -> Result<f64> {
    let mut graph = Graph::new();
    let vars = ParamVars::bind(&mut graph, &model.params, false);
    let enc = encode_video(&mut graph, &vars, features, None)?;
    let outs = teacher_forced(&mut graph, &vars, &model.config, &enc, steps, None)?;
    Ok(outs
        .iter()
        .zip(steps)
        .map(|(o, &tok)| log_softmax(graph.value(o.logits).data())[tok])
        .sum())
}
