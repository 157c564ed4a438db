//! Vocabulary, dataset records, the JSONL dataset format and the synthetic
//! video/caption generator.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

const RESERVED: [&str; 3] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN];

/// Bijective token/index map. Indices 0, 1 and 2 are PAD, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the full token list, reserved entries first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                match self.id(w) {
                    Some(id) if id > EOS => Ok(id),
                    _ => Err(Error::UnknownToken(w.to_owned())),
                }
            })
            .collect()
    }

    /// Maps ids back to words. Unknown ids render as `<unk:ID>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).map_or_else(|| format!("<unk:{i}>"), str::to_owned))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// One video with its reference captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub video_id: String,
    pub features: FeatureSequence,
    pub references: Vec<Vec<String>>,
    /// Latent class of synthetic videos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl DatasetRecord {
    fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::InvalidArgument("record has no references".into()));
        }
        if self.references.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty reference caption".into()));
        }
        if let Some(t) = self.references.iter().flatten().find(|t| RESERVED.contains(&t.as_str())) {
            return Err(Error::InvalidArgument(format!("reserved token `{t}` in caption")));
        }
        Ok(())
    }
}

/// A record with its references mapped to vocabulary ids (EOS not appended).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRecord {
    pub features: FeatureSequence,
    pub references: Vec<Vec<usize>>,
}

impl EncodedRecord {
    /// Teacher-forcing targets for reference `i`: its ids followed by EOS.
    pub fn targets(&self, i: usize, eos: usize) -> Vec<usize> {
        let mut t = self.references[i].clone();
        t.push(eos);
        t
    }
}

impl Vocabulary {
    pub fn encode_record(&self, record: &DatasetRecord) -> Result<EncodedRecord> {
        Ok(EncodedRecord {
            features: record.features.clone(),
            references: record
                .references
                .iter()
                .map(|r| self.encode(r))
                .collect::<Result<_>>()?,
        })
    }

    pub fn encode_records(&self, records: &[DatasetRecord]) -> Result<Vec<EncodedRecord>> {
        records.iter().map(|r| self.encode_record(r)).collect()
    }
}

/// Vocabulary over every reference token, ordered by descending frequency and
/// then lexicographically.
pub fn build_vocab(records: &[DatasetRecord]) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in records.iter().flat_map(|r| r.references.iter().flatten()) {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().map(|(w, _)| w.to_owned()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Reads one record per non-blank line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Dataset {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(|e| err(e.to_string()))?;
        let w = rec.features.feature_dim();
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(err(format!("feature width {w}, expected {expected}")));
            }
            _ => {}
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

const SUBJECTS: [&str; 8] = ["man", "woman", "boy", "girl", "dog", "cat", "chef", "player"];
const VERBS: [&str; 8] = [
    "riding", "cutting", "playing", "slicing", "holding", "throwing", "eating", "washing",
];
const OBJECTS: [&str; 8] = ["horse", "bike", "guitar", "ball", "onion", "bread", "car", "piano"];
/// Objects reserved for the rare classes.
const RARE_OBJECTS: [&str; 8] = [
    "stadium", "kitchen", "violin", "tortoise", "kayak", "lantern", "trombone", "meteor",
];

/// Subject/verb/object slots of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTemplate {
    pub subject: String,
    pub verb: String,
    pub object: String,
}

impl CaptionTemplate {
    /// Number of surface forms a reference can take.
    pub const FORMS: usize = 3;

    pub fn render(&self, form: usize) -> Vec<String> {
        let (det1, det2) = match form % Self::FORMS {
            0 => ("a", "a"),
            1 => ("the", "the"),
            _ => ("a", "the"),
        };
        [det1, &self.subject, "is", &self.verb, det2, &self.object]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub n_classes: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub refs_per_video: usize,
    /// Standard deviation of the per-video feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_videos: usize, n_classes: usize, frames_per_video: usize, feature_dim: usize, refs_per_video: usize, seed: u64) -> Self {
        Self {
            n_videos,
            n_classes,
            frames_per_video,
            feature_dim,
            refs_per_video,
            noise: 0.1,
            seed,
        }
    }

    /// Number of trailing classes whose captions use a word no other class uses.
    pub fn rare_classes(&self) -> usize {
        self.n_classes / 5
    }
}

/// Class templates: distinct subject/verb/object triples, with the last
/// [`SyntheticSpec::rare_classes`] classes given a class-exclusive object.
pub fn class_templates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<CaptionTemplate> {
    let mut combos: Vec<(usize, usize, usize)> = (0..SUBJECTS.len())
        .flat_map(|s| (0..VERBS.len()).flat_map(move |v| (0..OBJECTS.len()).map(move |o| (s, v, o))))
        .collect();
    combos.shuffle(rng);
    let first_rare = spec.n_classes - spec.rare_classes();
    (0..spec.n_classes)
        .map(|c| {
            let (s, v, o) = combos[c % combos.len()];
            let object = if c >= first_rare {
                let k = c - first_rare;
                let base = RARE_OBJECTS[k % RARE_OBJECTS.len()];
                match k / RARE_OBJECTS.len() {
                    0 => base.to_owned(),
                    n => format!("{base}{n}"),
                }
            } else {
                OBJECTS[o].to_owned()
            };
            CaptionTemplate {
                subject: SUBJECTS[s].to_owned(),
                verb: VERBS[v].to_owned(),
                object,
            }
        })
        .collect()
}

/// Videos whose features are a class-specific pattern plus Gaussian noise and
/// whose references are drawn from the class template. Video `i` belongs to
/// class `i % n_classes`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<DatasetRecord>> {
    if spec.n_videos == 0
        || spec.n_classes == 0
        || spec.frames_per_video == 0
        || spec.feature_dim == 0
        || spec.refs_per_video == 0
    {
        return Err(Error::InvalidArgument("synthetic dataset counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let means: Vec<Tensor> = (0..spec.n_classes)
        .map(|_| {
            let data = (0..spec.frames_per_video * spec.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::from_vec(spec.frames_per_video, spec.feature_dim, data)
        })
        .collect();

    (0..spec.n_videos)
        .map(|i| {
            let class = i % spec.n_classes;
            let mut frames = means[class].clone();
            for x in frames.data_mut() {
                *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
            let references = (0..spec.refs_per_video)
                .map(|_| templates[class].render(rng.random_range(0..CaptionTemplate::FORMS)))
                .collect();
            Ok(DatasetRecord {
                video_id: format!("video{i:05}"),
                features: FeatureSequence::new(frames)?,
                references,
                label: Some(class),
            })
        })
        .collect()
}
