//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcap_core::decoding::sequence_log_prob;
use vidcap_core::encoder::encode_video;
use vidcap_core::model::ParamVars;
use vidcap_core::{decoder, xe_loss, FeatureSequence, Graph, Model, ModelConfig, ModelParams, Tensor};

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Counts occurrences of `gram` in `tokens` by direct scanning.
fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

/// BLEU by listing every candidate n-gram and scanning the references.
pub fn brute_bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let total = candidate.len().saturating_sub(n - 1);
        let mut seen: Vec<&[String]> = Vec::new();
        let mut clipped = 0;
        if candidate.len() >= n {
            for i in 0..=candidate.len() - n {
                let gram = &candidate[i..i + n];
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let in_ref = references.iter().map(|r| occurrences(r, gram)).max().unwrap_or(0);
                clipped += occurrences(candidate, gram).min(in_ref);
            }
        }
        let p = if clipped == 0 {
            1e-9 / total.max(1) as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let mut best = references[0].len();
    for r in references {
        let (d, bd) = (r.len().abs_diff(c), best.abs_diff(c));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = (1.0 - best as f64 / c as f64).exp().min(1.0);
    bp * (log_sum / max_n as f64).exp()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|t| t == *s))
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "exponential oracle");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn brute_rouge(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in references {
        let l = brute_lcs(candidate, r);
        let f = if l == 0 {
            0.0
        } else {
            let p = l as f64 / candidate.len() as f64;
            let rc = l as f64 / r.len() as f64;
            let b2 = 1.2 * 1.2;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        };
        best = best.max(f);
    }
    best
}

/// Fixed metric corpus: worked examples, edge cases and seeded random cases.
pub fn golden_corpus() -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut cases = vec![
        (words("a a a a"), vec![words("a b c d")]),
        (words("a b c"), vec![words("a c d")]),
        (words("the man is riding a horse"), vec![words("the man is riding a horse")]),
        (words("x y z w"), vec![words("a b c d")]),
        (words(""), vec![words("a b")]),
        (words("a b c d e"), vec![words("a b c"), words("a b c d e f g")]),
        (words("a b a b a b"), vec![words("b a b a"), words("a a b b")]),
        (words("the cat"), vec![words("the cat sat on the mat")]),
    ];
    let vocab = ["a", "b", "c", "d", "e", "the"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sent = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let n = rng.random_range(min..=9);
        (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_owned()).collect()
    };
    while cases.len() < 50 {
        let cand = sent(&mut rng, 0);
        let refs = (0..rng.random_range(1..=3)).map(|_| sent(&mut rng, 1)).collect();
        cases.push((cand, refs));
    }
    cases
}

/// Every complete step sequence of the decode tree (EOS terminal, length
/// capped at `max_len`) with its model log-probability.
pub fn enumerate_sequences(model: &Model, features: &FeatureSequence, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let v = model.config.vocab_size;
    let eos = model.config.eos;
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        for tok in 0..v {
            let mut seq: Vec<usize> = prefix.clone();
            seq.push(tok);
            if tok == eos || seq.len() == max_len {
                let lp = sequence_log_prob(model, features, &seq).unwrap();
                out.push((seq, lp));
            } else {
                stack.push(seq);
            }
        }
    }
    out
}

/// Teacher-forced summed cross-entropy of one target sequence, evaluation mode.
pub fn sequence_xe(model: &Model, features: &FeatureSequence, targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, &model.params, false);
    let enc = encode_video(&mut g, &vars, features, None).unwrap();
    let outs = decoder::teacher_forced(&mut g, &vars, &model.config, &enc, targets, None).unwrap();
    let logits: Vec<_> = outs.iter().map(|o| o.logits).collect();
    let l = xe_loss(&mut g, &logits, targets, &vec![true; targets.len()]).unwrap();
    g.scalar(l)
}

/// Analytic gradient of [`sequence_xe`] through the tape.
pub fn sequence_xe_grad(model: &Model, features: &FeatureSequence, targets: &[usize]) -> ModelParams {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, &model.params, true);
    let enc = encode_video(&mut g, &vars, features, None).unwrap();
    let outs = decoder::teacher_forced(&mut g, &vars, &model.config, &enc, targets, None).unwrap();
    let logits: Vec<_> = outs.iter().map(|o| o.logits).collect();
    let l = xe_loss(&mut g, &logits, targets, &vec![true; targets.len()]).unwrap();
    let mut grads = g.backward(l).unwrap();
    vars.gradients(&mut grads, &model.params)
}

/// Fourth-order central-difference gradient of `f` with respect to every
/// parameter entry.
pub fn finite_difference<F: Fn(&Model) -> f64>(model: &Model, h: f64, f: F) -> ModelParams {
    let mut probe = model.clone();
    let mut out = model.params.zeros_like();
    for k in 0..model.params.len() {
        for j in 0..model.params.tensors()[k].len() {
            let orig = model.params.tensors()[k].data()[j];
            let mut at = |x: f64| {
                probe.params.tensors_mut()[k].data_mut()[j] = x;
                f(&probe)
            };
            let (p1, m1, p2, m2) = (at(orig + h), at(orig - h), at(orig + 2.0 * h), at(orig - 2.0 * h));
            probe.params.tensors_mut()[k].data_mut()[j] = orig;
            out.tensors_mut()[k].data_mut()[j] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
    }
    out
}

/// Worst elementwise relative error per parameter group, with `floor`
/// guarding the denominator of entries whose gradient is essentially zero.
pub fn group_errors(analytic: &ModelParams, numeric: &ModelParams, floor: f64) -> Vec<(String, f64)> {
    analytic
        .iter()
        .zip(numeric.tensors())
        .map(|((name, a), n)| {
            let worst = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
                .fold(0.0, f64::max);
            (name.to_owned(), worst)
        })
        .collect()
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureSequence::new(Tensor::uniform(frames, dim, 1.0, &mut rng)).unwrap()
}

/// Seeded model whose parameters are drawn with a larger spread than the
/// default initialisation so decoding choices are not near-uniform.
pub fn toy_model(feature_dim: usize, hidden: usize, vocab: usize, seed: u64, scale: f64) -> Model {
    let cfg = ModelConfig::new(feature_dim, hidden, vocab);
    let mut params = ModelParams::seeded(&cfg, seed);
    params.scale(scale);
    Model::with_params(cfg, params).unwrap()
}
