//! Meme record ingestion, demonstration pools, and synthetic corpora.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PenError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Hateful,
    NonHateful,
}

impl Label {
    /// Score-tuple index: 0 = hateful, 1 = non-hateful.
    pub fn index(self) -> usize {
        match self {
            Label::Hateful => 0,
            Label::NonHateful => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Hateful),
            1 => Ok(Label::NonHateful),
            _ => Err(PenError::Invalid(format!("label index {i} out of range"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Hateful => write!(f, "hateful"),
            Label::NonHateful => write!(f, "non-hateful"),
        }
    }
}

/// One meme as text fields plus its binary label. The image appears only
/// as its precomputed caption.
#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub text: String,
    pub caption: String,
    pub knowledge: Vec<String>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub hate: usize,
    pub nonhate: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.hate + self.nonhate
    }

    pub fn tally(records: &[MemeRecord]) -> Self {
        let hate = records.iter().filter(|r| r.label == Label::Hateful).count();
        LabelCounts { hate, nonhate: records.len() - hate }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub train_hate: usize,
    pub train_nonhate: usize,
    pub test_hate: usize,
    pub test_nonhate: usize,
}

impl SplitStats {
    pub fn from_counts(train: LabelCounts, test: LabelCounts) -> Self {
        SplitStats {
            train_hate: train.hate,
            train_nonhate: train.nonhate,
            test_hate: test.hate,
            test_nonhate: test.nonhate,
        }
    }
}

/// Field-name map for line-delimited corpora, so exports from prior
/// pipelines ingest without conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSchema {
    pub id_field: String,
    pub text_field: String,
    pub caption_field: String,
    pub knowledge_field: String,
    pub label_field: String,
    /// String label values mapped to Hateful (numeric 1 always is).
    pub hateful_values: Vec<String>,
    /// String label values mapped to NonHateful (numeric 0 always is).
    pub non_hateful_values: Vec<String>,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        CorpusSchema {
            id_field: "id".into(),
            text_field: "text".into(),
            caption_field: "caption".into(),
            knowledge_field: "knowledge".into(),
            label_field: "label".into(),
            hateful_values: vec!["1".into(), "hateful".into(), "harmful".into()],
            non_hateful_values: vec!["0".into(), "non-hateful".into(), "not-harmful".into()],
        }
    }
}

fn parse_label(v: &serde_json::Value, schema: &CorpusSchema, line: usize) -> Result<Label> {
    match v {
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(1) => Ok(Label::Hateful),
            Some(0) => Ok(Label::NonHateful),
            _ => Err(PenError::Corpus { line, msg: format!("numeric label {n} is not 0 or 1") }),
        },
        serde_json::Value::String(s) => {
            let s = s.trim().to_lowercase();
            if schema.hateful_values.iter().any(|h| h.to_lowercase() == s) {
                Ok(Label::Hateful)
            } else if schema.non_hateful_values.iter().any(|h| h.to_lowercase() == s) {
                Ok(Label::NonHateful)
            } else {
                Err(PenError::Corpus { line, msg: format!("unrecognized label value {s:?}") })
            }
        }
        other => Err(PenError::Corpus { line, msg: format!("label has unsupported type: {other}") }),
    }
}

/// Load a line-delimited corpus. Returns records in file order plus the
/// label tally. Unknown fields are ignored.
pub fn load_corpus(path: &Path, schema: &CorpusSchema) -> Result<(Vec<MemeRecord>, LabelCounts)> {
    let f = std::fs::File::open(path).map_err(|e| PenError::io(path, e))?;
    let reader = std::io::BufReader::new(f);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| PenError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| PenError::Corpus { line: lineno, msg: format!("malformed record: {e}") })?;
        let obj = value
            .as_object()
            .ok_or_else(|| PenError::Corpus { line: lineno, msg: "record is not an object".into() })?;
        let text = obj
            .get(&schema.text_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| PenError::Corpus {
                line: lineno,
                msg: format!("missing text field {:?}", schema.text_field),
            })?
            .to_string();
        if text.trim().is_empty() {
            return Err(PenError::Corpus { line: lineno, msg: "text is empty after trimming".into() });
        }
        let label_value = obj.get(&schema.label_field).ok_or_else(|| PenError::Corpus {
            line: lineno,
            msg: format!("missing label field {:?}", schema.label_field),
        })?;
        let label = parse_label(label_value, schema, lineno)?;
        let id = obj
            .get(&schema.id_field)
            .and_then(|v| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .unwrap_or_else(|| format!("line-{lineno}"));
        let caption = obj
            .get(&schema.caption_field)
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        let knowledge = obj
            .get(&schema.knowledge_field)
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        records.push(MemeRecord { id, text, caption, knowledge, label });
    }
    let counts = LabelCounts::tally(&records);
    Ok((records, counts))
}

/// Write records back out in the schema's field names, one JSON object per
/// line. Loading the result recovers (text, caption, knowledge, label).
pub fn write_corpus(path: &Path, records: &[MemeRecord], schema: &CorpusSchema) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| PenError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        let mut obj = serde_json::Map::new();
        obj.insert(schema.id_field.clone(), serde_json::Value::String(r.id.clone()));
        obj.insert(schema.text_field.clone(), serde_json::Value::String(r.text.clone()));
        obj.insert(schema.caption_field.clone(), serde_json::Value::String(r.caption.clone()));
        obj.insert(
            schema.knowledge_field.clone(),
            serde_json::Value::Array(
                r.knowledge.iter().map(|k| serde_json::Value::String(k.clone())).collect(),
            ),
        );
        let label = if r.label == Label::Hateful { 1 } else { 0 };
        obj.insert(schema.label_field.clone(), serde_json::Value::Number(label.into()));
        serde_json::to_writer(&mut w, &serde_json::Value::Object(obj))
            .map_err(|e| PenError::Invalid(format!("serialize record {}: {e}", r.id)))?;
        writeln!(w).map_err(|e| PenError::io(path, e))?;
    }
    Ok(())
}

/// Demonstration candidates, one list per class. Members must come from
/// the training split only.
#[derive(Debug, Clone)]
pub struct DemonstrationPool {
    pub hateful: Vec<MemeRecord>,
    pub non_hateful: Vec<MemeRecord>,
}

impl DemonstrationPool {
    pub fn from_records(records: &[MemeRecord]) -> Result<Self> {
        let hateful: Vec<_> = records.iter().filter(|r| r.label == Label::Hateful).cloned().collect();
        let non_hateful: Vec<_> =
            records.iter().filter(|r| r.label == Label::NonHateful).cloned().collect();
        let pool = DemonstrationPool { hateful, non_hateful };
        pool.check()?;
        Ok(pool)
    }

    /// Restrict both lists to a fixed random subset of at most `limit` per
    /// class.
    pub fn restricted(mut self, limit: usize, rng: &mut impl Rng) -> Result<Self> {
        for list in [&mut self.hateful, &mut self.non_hateful] {
            shuffle(list, rng);
            list.truncate(limit.max(1));
        }
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.hateful.is_empty() || self.non_hateful.is_empty() {
            return Err(PenError::Invalid("demonstration pool has an empty class list".into()));
        }
        Ok(())
    }

    /// One record from each class, uniformly at random. Deterministic for
    /// a fixed seed and pool order.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(&MemeRecord, &MemeRecord)> {
        self.check()?;
        let h = &self.hateful[rng.gen_range(0..self.hateful.len())];
        let n = &self.non_hateful[rng.gen_range(0..self.non_hateful.len())];
        Ok((h, n))
    }

    /// Like [`sample`](Self::sample) but never returns a record whose id
    /// equals `exclude_id`; used so an instance is not its own
    /// demonstration.
    pub fn sample_excluding(&self, rng: &mut impl Rng, exclude_id: &str) -> Result<(&MemeRecord, &MemeRecord)> {
        let pick = |list: &[MemeRecord], rng: &mut dyn rand::RngCore| -> Result<usize> {
            let candidates: Vec<usize> =
                (0..list.len()).filter(|&i| list[i].id != exclude_id).collect();
            if candidates.is_empty() {
                return Err(PenError::Invalid(
                    "demonstration pool has no candidate other than the instance itself".into(),
                ));
            }
            Ok(candidates[rng.gen_range(0..candidates.len())])
        };
        let hi = pick(&self.hateful, rng)?;
        let ni = pick(&self.non_hateful, rng)?;
        Ok((&self.hateful[hi], &self.non_hateful[ni]))
    }
}

/// Fisher-Yates, driven by the caller's seeded source.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Synthetic corpus with a controllable hate signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub signal_token: String,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 400,
            n_test: 100,
            vocab_size: 50,
            signal_token: "sig".into(),
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

/// Generate train and test corpora. Hateful records contain the signal
/// token with probability `1 - noise_rate`, non-hateful with probability
/// `noise_rate`. Reproducible per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<MemeRecord>, Vec<MemeRecord>)> {
    if spec.vocab_size < 8 {
        return Err(PenError::Invalid(format!("vocab_size {} < 8", spec.vocab_size)));
    }
    if !(0.0..0.5).contains(&spec.noise_rate) {
        return Err(PenError::Invalid(format!("noise_rate {} outside [0, 0.5)", spec.noise_rate)));
    }
    if spec.n_train < 4 || spec.n_test < 2 {
        return Err(PenError::Invalid("synthetic corpus needs n_train >= 4 and n_test >= 2".into()));
    }
    if spec.signal_token.trim().is_empty() {
        return Err(PenError::Invalid("signal_token is empty".into()));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, "train", spec.n_train, &mut rng);
    let test = generate_split(spec, "test", spec.n_test, &mut rng);
    Ok((train, test))
}

fn generate_split(
    spec: &SyntheticSpec,
    split: &str,
    n: usize,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Vec<MemeRecord> {
    let filler = |rng: &mut rand_chacha::ChaCha20Rng, len: usize| -> Vec<String> {
        (0..len).map(|_| format!("w{}", rng.gen_range(0..spec.vocab_size))).collect()
    };
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i < n / 2 { Label::Hateful } else { Label::NonHateful };
        let text_len = rng.gen_range(4..8);
        let mut words = filler(rng, text_len);
        let p: f64 = rng.gen();
        let has_signal = match label {
            Label::Hateful => p >= spec.noise_rate,
            Label::NonHateful => p < spec.noise_rate,
        };
        if has_signal {
            let pos = rng.gen_range(0..=words.len());
            words.insert(pos, spec.signal_token.clone());
        }
        let caption = filler(rng, 3).join(" ");
        records.push(MemeRecord {
            id: format!("syn-{split}-{i:04}"),
            text: words.join(" "),
            caption,
            knowledge: Vec::new(),
            label,
        });
    }
    shuffle(&mut records, rng);
    records
}

/// Presence-of-signal rule classifier; used to verify separability of
/// noise-free synthetic corpora.
pub fn signal_rule_accuracy(records: &[MemeRecord], signal_token: &str) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| {
            let has = r.text.split_whitespace().any(|w| w == signal_token);
            (has && r.label == Label::Hateful) || (!has && r.label == Label::NonHateful)
        })
        .count();
    correct as f64 / records.len() as f64
}

/// Distinct ids in a record list; handy for exclusion checks.
pub fn id_set(records: &[MemeRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.id.clone()).collect()
}
