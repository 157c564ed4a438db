//! Cross-entropy training, self-critical policy gradients with a greedy
//! baseline, and the score-gated fine-tuning stage that mixes the two.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::TrainingConfig;
use crate::data::EncodedRecord;
use crate::decoder::teacher_forced;
use crate::decoding::{greedy_decode, log_softmax, sample_decode};
use crate::encoder::{encode_video, FeatureSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluated_score, summarize, MetricSummary, ScoreReport};
use crate::model::{Dropout, Model, ModelConfig, ModelParams, ParamVars};
use crate::tensor::Tensor;

/// Summed negative log-likelihood of `targets` over the unmasked steps.
pub fn xe_loss(graph: &mut Graph, logits: &[Var], targets: &[usize], mask: &[bool]) -> Result<Var> {
    if logits.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "xe_loss: {} logit steps, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for ((&l, &t), &keep) in logits.iter().zip(targets).zip(mask) {
        if !keep {
            continue;
        }
        let lp = graph.log_softmax(l)?;
        terms.push(graph.pick(lp, t)?);
    }
    if terms.is_empty() {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    let total = graph.add_n(&terms)?;
    Ok(graph.neg(total))
}

/// Sentence cross-entropy averaged over the record's references.
fn record_xe(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    record: &EncodedRecord,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    if record.references.is_empty() {
        return Err(Error::EmptyInput("reference list"));
    }
    let enc = encode_video(graph, vars, &record.features, dropout.as_deref_mut())?;
    let mut losses = Vec::with_capacity(record.references.len());
    for i in 0..record.references.len() {
        let targets = record.targets(i, config.eos);
        let outs = teacher_forced(graph, vars, config, &enc, &targets, dropout.as_deref_mut())?;
        let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
        losses.push(xe_loss(graph, &logits, &targets, &vec![true; targets.len()])?);
    }
    let sum = graph.add_n(&losses)?;
    Ok(graph.scale(sum, 1.0 / losses.len() as f64))
}

/// Surrogate whose gradient with respect to step `t`'s logits is
/// `advantage * (softmax(logits_t) - onehot(steps[t]))`.
fn policy_surrogate(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    features: &FeatureSequence,
    steps: &[usize],
    advantage: f64,
) -> Result<Var> {
    let enc = encode_video(graph, vars, features, None)?;
    let outs = teacher_forced(graph, vars, config, &enc, steps, None)?;
    let mut terms = Vec::with_capacity(steps.len());
    for (o, &tok) in outs.iter().zip(steps) {
        let mut coef: Vec<f64> = log_softmax(graph.value(o.logits).data())
            .into_iter()
            .map(|l| advantage * l.exp())
            .collect();
        coef[tok] -= advantage;
        terms.push(graph.dot_const(o.logits, coef)?);
    }
    if terms.is_empty() {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    graph.add_n(&terms)
}

/// Policy-gradient contribution of one sampled step sequence (EOS included
/// when it was emitted), evaluated with dropout off.
pub fn scst_gradient_for_sample(
    model: &Model,
    features: &FeatureSequence,
    steps: &[usize],
    advantage: f64,
) -> Result<ModelParams> {
    if advantage == 0.0 || steps.is_empty() {
        return Ok(model.params.zeros_like());
    }
    let mut graph = Graph::new();
    let vars = ParamVars::bind(&mut graph, &model.params, true);
    let root = policy_surrogate(&mut graph, &vars, &model.config, features, steps, advantage)?;
    let mut grads = graph.backward(root)?;
    Ok(vars.gradients(&mut grads, &model.params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstDiagnostics {
    pub r_sample: f64,
    pub r_greedy: f64,
    /// Model log-probability of the sampled sequence.
    pub sample_log_prob: f64,
    /// Sampled step choices, EOS included when emitted.
    pub sample_steps: Vec<usize>,
}

impl ScstDiagnostics {
    pub fn advantage(&self) -> f64 {
        self.r_sample - self.r_greedy
    }

    /// Value of the policy loss `-(r(w^s) - r(w^b)) log p(w^s)`.
    pub fn loss(&self) -> f64 {
        -self.advantage() * self.sample_log_prob
    }
}

/// Samples a caption, scores it and the greedy caption against the
/// references, and returns the corresponding policy-gradient diagnostics.
pub fn scst_rollout<R: Rng + ?Sized>(
    model: &Model,
    features: &FeatureSequence,
    references: &[Vec<usize>],
    max_len: usize,
    rng: &mut R,
) -> Result<ScstDiagnostics> {
    let sample = sample_decode(model, features, max_len, rng)?;
    let greedy = greedy_decode(model, features, max_len)?;
    Ok(ScstDiagnostics {
        r_sample: evaluated_score(&sample.tokens, references)?.score,
        r_greedy: evaluated_score(&greedy.tokens, references)?.score,
        sample_log_prob: sample.log_prob,
        sample_steps: sample.steps(model.config.eos),
    })
}

/// Self-critical gradient for one video.
pub fn scst_gradient<R: Rng + ?Sized>(
    model: &Model,
    features: &FeatureSequence,
    references: &[Vec<usize>],
    max_len: usize,
    rng: &mut R,
) -> Result<(ModelParams, ScstDiagnostics)> {
    let diag = scst_rollout(model, features, references, max_len, rng)?;
    let grads = scst_gradient_for_sample(model, features, &diag.sample_steps, diag.advantage())?;
    Ok((grads, diag))
}

/// Batch gradient of `lambda * XE + (1 - lambda) * RL`, averaged over the batch.
#[derive(Clone, Debug)]
pub struct MixedGradient {
    pub grads: ModelParams,
    /// Mean sentence cross-entropy, `None` when the XE branch had zero weight.
    pub xe_loss: Option<f64>,
    /// One entry per record when the RL branch had non-zero weight.
    pub rollouts: Vec<ScstDiagnostics>,
}

impl MixedGradient {
    pub fn mean_rl_loss(&self) -> Option<f64> {
        if self.rollouts.is_empty() {
            return None;
        }
        Some(self.rollouts.iter().map(ScstDiagnostics::loss).sum::<f64>() / self.rollouts.len() as f64)
    }
}

/// Both branches are built on one graph per record. A branch whose weight is
/// zero is skipped entirely and consumes no randomness.
#[allow(clippy::too_many_arguments)]
pub fn mixed_gradient(
    model: &Model,
    batch: &[&EncodedRecord],
    lambda: f64,
    max_len: usize,
    dropout_rate: f64,
    dropout_rng: &mut ChaCha8Rng,
    sample_rng: &mut ChaCha8Rng,
) -> Result<MixedGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = model.params.zeros_like();
    let mut xe_sum = 0.0;
    let mut rollouts = Vec::new();
    for record in batch {
        let mut graph = Graph::new();
        let vars = ParamVars::bind(&mut graph, &model.params, true);
        let mut terms = Vec::with_capacity(2);
        if lambda > 0.0 {
            let mut dropout = Dropout {
                rate: dropout_rate,
                rng: &mut *dropout_rng,
            };
            let dr = (dropout_rate > 0.0).then_some(&mut dropout);
            let xe = record_xe(&mut graph, &vars, &model.config, record, dr)?;
            xe_sum += graph.scalar(xe);
            terms.push(graph.scale(xe, lambda * scale));
        }
        if lambda < 1.0 {
            let diag = scst_rollout(model, &record.features, &record.references, max_len, sample_rng)?;
            if diag.advantage() != 0.0 {
                let s = policy_surrogate(
                    &mut graph,
                    &vars,
                    &model.config,
                    &record.features,
                    &diag.sample_steps,
                    diag.advantage(),
                )?;
                terms.push(graph.scale(s, (1.0 - lambda) * scale));
            }
            rollouts.push(diag);
        }
        if terms.is_empty() {
            continue;
        }
        let root = graph.add_n(&terms)?;
        let mut grads = graph.backward(root)?;
        total.axpy(1.0, &vars.gradients(&mut grads, &model.params));
    }
    Ok(MixedGradient {
        grads: total,
        xe_loss: (lambda > 0.0).then_some(xe_sum * scale),
        rollouts,
    })
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(config: &TrainingConfig, like: &ModelParams) -> Self {
        Self {
            lr: config.lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let cells = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in cells {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Elementwise `(q - min q) / min q`, used to compare scores across runs.
pub fn normalize_scores(values: &[f64]) -> Result<Vec<f64>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        return Err(Error::EmptyInput("score list"));
    }
    if min <= 0.0 || !min.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scores must have a positive minimum, got {min}"
        )));
    }
    Ok(values.iter().map(|q| (q - min) / min).collect())
}

/// Greedy captions of `records` scored against their references.
pub fn evaluate(model: &Model, records: &[EncodedRecord], max_len: usize) -> Result<MetricSummary> {
    let pairs = records
        .iter()
        .map(|r| Ok((greedy_decode(model, &r.features, max_len)?.tokens, r.references.clone())))
        .collect::<Result<Vec<_>>>()?;
    summarize(&pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub report: ScoreReport,
    pub skipped: bool,
}

/// Scores the greedy caption of `record`; samples at or above `threshold`
/// need no further training.
pub fn gate_decision(model: &Model, record: &EncodedRecord, threshold: f64, max_len: usize) -> Result<GateDecision> {
    let caption = greedy_decode(model, &record.features, max_len)?;
    let report = evaluated_score(&caption.tokens, &record.references)?;
    Ok(GateDecision {
        report,
        skipped: report.score >= threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Training stage, 1 or 2.
    pub step: u8,
    pub epoch: usize,
    pub mean_xe: f64,
    /// Mean policy loss over trained samples (0 in step 1).
    pub mean_rl: f64,
    pub skipped: usize,
    pub trained: usize,
    /// Optimizer updates made so far in this stage.
    pub updates: u64,
    pub eval_scores: Option<MetricSummary>,
    /// Dataset indices updated this epoch, in visiting order.
    #[serde(skip)]
    pub trained_indices: Vec<usize>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Owns a model, its optimizer and independent random streams for dropout,
/// caption sampling and data shuffling.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    optimizer: Adam,
    dropout_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&config, &model.params);
        Ok(Self {
            optimizer,
            dropout_rng: stream_rng(config.seed, 1),
            sample_rng: stream_rng(config.seed, 2),
            shuffle_rng: stream_rng(config.seed, 3),
            model,
            config,
        })
    }

    /// Optimizer updates since the last reset.
    pub fn updates(&self) -> u64 {
        self.optimizer.steps() as u64
    }

    /// Fresh first and second moment estimates.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = Adam::new(&self.config, &self.model.params);
    }

    pub fn mixed_gradient(&mut self, batch: &[&EncodedRecord], lambda: f64) -> Result<MixedGradient> {
        mixed_gradient(
            &self.model,
            batch,
            lambda,
            self.config.max_len,
            self.config.dropout,
            &mut self.dropout_rng,
            &mut self.sample_rng,
        )
    }

    /// Clips and applies one optimizer update.
    pub fn apply(&mut self, mut grads: ModelParams) {
        if let Some(max) = self.config.clip_norm {
            clip_gradients(&mut grads, max);
        }
        self.optimizer.step(&mut self.model.params, &grads);
    }

    /// One cross-entropy update. Returns the mean sentence loss.
    pub fn xe_step(&mut self, batch: &[&EncodedRecord]) -> Result<f64> {
        let g = self.mixed_gradient(batch, 1.0)?;
        self.apply(g.grads);
        Ok(g.xe_loss.unwrap_or(0.0))
    }

    /// One update on the configured mix of cross-entropy and policy loss.
    pub fn mixed_step(&mut self, batch: &[&EncodedRecord]) -> Result<MixedGradient> {
        let g = self.mixed_gradient(batch, self.config.lambda)?;
        self.apply(g.grads.clone());
        Ok(g)
    }

    pub fn gate(&self, record: &EncodedRecord) -> Result<GateDecision> {
        gate_decision(&self.model, record, self.config.gate_threshold, self.config.max_len)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        order
    }

    /// One shuffled pass of mini-batch cross-entropy updates.
    pub fn step1_epoch(&mut self, train: &[EncodedRecord], epoch: usize) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let order = self.shuffled(train.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&EncodedRecord> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += self.xe_step(&batch)? * batch.len() as f64;
        }
        Ok(EpochReport {
            step: 1,
            epoch,
            mean_xe: loss_sum / train.len() as f64,
            mean_rl: 0.0,
            skipped: 0,
            trained: train.len(),
            updates: self.updates(),
            eval_scores: None,
            trained_indices: order,
        })
    }

    /// One pass over `train` in shuffled order. Each sample is gated on its
    /// greedy score and, unless skipped, gets its own mixed-loss update.
    /// `fixed` supplies precomputed skip decisions instead of re-gating.
    pub fn step2_epoch(&mut self, train: &[EncodedRecord], epoch: usize, fixed: Option<&[bool]>) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let order = self.shuffled(train.len());
        let (mut xe_sum, mut rl_sum, mut skipped) = (0.0, 0.0, 0);
        let mut trained_indices = Vec::new();
        for &i in &order {
            let skip = match fixed {
                Some(f) => f[i],
                None => self.gate(&train[i])?.skipped,
            };
            if skip {
                skipped += 1;
                continue;
            }
            let g = self.mixed_step(&[&train[i]])?;
            xe_sum += g.xe_loss.unwrap_or(0.0);
            rl_sum += g.mean_rl_loss().unwrap_or(0.0);
            trained_indices.push(i);
        }
        let trained = trained_indices.len();
        let denom = trained.max(1) as f64;
        Ok(EpochReport {
            step: 2,
            epoch,
            mean_xe: xe_sum / denom,
            mean_rl: rl_sum / denom,
            skipped,
            trained,
            updates: self.updates(),
            eval_scores: None,
            trained_indices,
        })
    }

    /// Runs epochs until validation BLEU-4 has not improved for `patience`
    /// epochs or `max_epochs` is reached, then restores the best parameters.
    fn run_epochs<F, G>(&mut self, val: &[EncodedRecord], mut epoch_fn: G, mut on_epoch: F) -> Result<Vec<EpochReport>>
    where
        G: FnMut(&mut Self, usize) -> Result<EpochReport>,
        F: FnMut(&EpochReport),
    {
        let mut reports = Vec::new();
        let mut best: Option<(f64, ModelParams)> = None;
        let mut stale = 0;
        for epoch in 1..=self.config.max_epochs {
            let mut report = epoch_fn(self, epoch)?;
            if !val.is_empty() {
                let scores = evaluate(&self.model, val, self.config.max_len)?;
                let bleu4 = scores.bleu4();
                report.eval_scores = Some(scores);
                if best.as_ref().is_none_or(|(b, _)| bleu4 > *b) {
                    best = Some((bleu4, self.model.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            log::info!(
                "step {} epoch {}: xe {:.4} rl {:.4} skipped {} trained {}",
                report.step,
                epoch,
                report.mean_xe,
                report.mean_rl,
                report.skipped,
                report.trained
            );
            on_epoch(&report);
            reports.push(report);
            if stale >= self.config.patience {
                break;
            }
        }
        if let Some((_, params)) = best {
            self.model.params = params;
        }
        Ok(reports)
    }

    /// Cross-entropy training on every sample.
    pub fn train_step1<F: FnMut(&EpochReport)>(
        &mut self,
        train: &[EncodedRecord],
        val: &[EncodedRecord],
        on_epoch: F,
    ) -> Result<Vec<EpochReport>> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        self.run_epochs(val, |t, e| t.step1_epoch(train, e), on_epoch)
    }

    /// Score-gated mixed-loss fine-tuning with a fresh optimizer state. The
    /// gate is re-evaluated every epoch unless `regate_every_epoch` is off,
    /// in which case the first epoch's decisions are kept.
    pub fn train_step2<F: FnMut(&EpochReport)>(
        &mut self,
        train: &[EncodedRecord],
        val: &[EncodedRecord],
        on_epoch: F,
    ) -> Result<Vec<EpochReport>> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        self.reset_optimizer();
        let mut fixed: Option<Vec<bool>> = None;
        self.run_epochs(
            val,
            |t, e| {
                if !t.config.regate_every_epoch && fixed.is_none() {
                    fixed = Some(
                        train
                            .iter()
                            .map(|r| t.gate(r).map(|d| d.skipped))
                            .collect::<Result<_>>()?,
                    );
                }
                t.step2_epoch(train, e, fixed.as_deref())
            },
            on_epoch,
        )
    }
}

/// Validation scores of one fine-tuning run per mixing weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaResult {
    pub lambda: f64,
    pub scores: MetricSummary,
    pub epochs: usize,
    pub updates: u64,
}

/// Fine-tunes a copy of `model` once for each value in `lambdas`, all from
/// the same starting parameters and seed.
pub fn sweep_lambda(
    model: &Model,
    config: &TrainingConfig,
    train: &[EncodedRecord],
    val: &[EncodedRecord],
    lambdas: &[f64],
) -> Result<Vec<LambdaResult>> {
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainingConfig {
                lambda,
                ..config.clone()
            };
            let mut trainer = Trainer::new(model.clone(), cfg)?;
            let reports = trainer.train_step2(train, val, |_| {})?;
            Ok(LambdaResult {
                lambda,
                scores: evaluate(&trainer.model, val, config.max_len)?,
                epochs: reports.len(),
                updates: trainer.updates(),
            })
        })
        .collect()
}
