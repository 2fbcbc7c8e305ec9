//! Run configuration: TOML file plus dotted-key command-line overrides,
//! resolved against defaults and validated before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembler::RegionLayout;
use crate::corpus::{CorpusSchema, SyntheticSpec};
use crate::error::{PenError, Result};
use crate::model::HeadConfig;
use crate::pcl::LossConfig;
use crate::pmp::ViewSet;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub schema: CorpusSchema,
    /// Tokens rarer than this in the training set map to the unknown id.
    pub min_freq: usize,
    /// Generate a synthetic corpus instead of reading files.
    pub synthetic: Option<SyntheticSpec>,
    /// Cap the demonstration pool per class (0 = use everything).
    pub demo_pool_limit: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            train_path: None,
            test_path: None,
            schema: CorpusSchema::default(),
            min_freq: 1,
            synthetic: None,
            demo_pool_limit: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Tiny,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub dim: usize,
    pub context_mixing: bool,
    /// Embedding archive path, required for `kind = "file"`.
    pub archive_path: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { kind: EncoderKind::Tiny, dim: 64, context_mixing: true, archive_path: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSection {
    pub views: Vec<String>,
    pub tied_region_lstm: bool,
    pub per_view_heads: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            views: ["s1", "s2", "s3", "s4"].map(String::from).to_vec(),
            tied_region_lstm: true,
            per_view_heads: false,
        }
    }
}

impl HeadSection {
    pub fn to_head_config(&self) -> Result<HeadConfig> {
        let views = ViewSet::from_names(&self.views)?;
        if views.is_empty() {
            return Err(PenError::Config("head.views must enable at least one view".into()));
        }
        Ok(HeadConfig {
            views,
            tied_region_lstm: self.tied_region_lstm,
            per_view_heads: self.per_view_heads,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub precision: Precision,
    /// Seed for test-time demonstration sampling.
    pub eval_seed: u64,
    pub corpus: CorpusSection,
    pub layout: RegionLayout,
    pub encoder: EncoderSection,
    pub head: HeadSection,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            eval_seed: 7,
            corpus: CorpusSection::default(),
            layout: RegionLayout::default(),
            encoder: EncoderSection::default(),
            head: HeadSection::default(),
            loss: LossConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.loss.validate()?;
        self.trainer.validate()?;
        self.head.to_head_config()?;
        if self.encoder.dim == 0 {
            return Err(PenError::Config("encoder.dim must be positive".into()));
        }
        if self.encoder.kind == EncoderKind::File && self.encoder.archive_path.is_none() {
            return Err(PenError::Config(
                "encoder.kind = \"file\" requires encoder.archive_path".into(),
            ));
        }
        if self.corpus.synthetic.is_none() && self.corpus.train_path.is_none() {
            return Err(PenError::Config(
                "corpus needs either train_path or a [corpus.synthetic] section".into(),
            ));
        }
        Ok(())
    }

    /// The resolved configuration as TOML, for run snapshots.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| PenError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parse a `key.path=value` override. The value is interpreted as a TOML
/// literal when it parses as one, otherwise as a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| PenError::Config(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.trim().is_empty()) {
        return Err(PenError::Config(format!("override {raw:?} has an empty key segment")));
    }
    let path: Vec<String> = key.split('.').map(|p| p.trim().to_string()).collect();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            PenError::Config(format!("override path {:?} crosses a non-table value", path.join(".")))
        })?;
        if i == path.len() - 1 {
            table.insert(seg.clone(), value);
            return Ok(());
        }
        cur = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("empty override path is rejected earlier")
}

/// Load the configuration: file contents (or defaults when absent) with
/// `--set` overrides applied on top, then validated.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PenError::io(p, e))?;
            text.parse::<toml::Value>()
                .map_err(|e| PenError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    for raw in overrides {
        let (key_path, v) = parse_override(raw)?;
        set_path(&mut value, &key_path, v)?;
    }
    let config: RunConfig = value
        .try_into()
        .map_err(|e| PenError::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_toml() -> &'static str {
        "[corpus.synthetic]\nn_train = 40\nn_test = 10\n"
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, synthetic_toml()).unwrap();
        let cfg = load_config(Some(&p), &[]).unwrap();
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.encoder.dim, 64);
        assert_eq!(cfg.layout.len_prompt, 3);
        assert_eq!(cfg.trainer.epochs, 10);
        assert!((cfg.loss.alpha - 0.1).abs() < 1e-12);
        assert_eq!(cfg.corpus.synthetic.unwrap().n_train, 40);
    }

    #[test]
    fn overrides_take_effect_with_types() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, synthetic_toml()).unwrap();
        let cfg = load_config(
            Some(&p),
            &[
                "encoder.dim=16".into(),
                "loss.alpha=0.25".into(),
                "trainer.demo_sampling=\"fixed_per_sample\"".into(),
                "head.views=[\"s1\",\"s4\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.encoder.dim, 16);
        assert!((cfg.loss.alpha - 0.25).abs() < 1e-12);
        let head = cfg.head.to_head_config().unwrap();
        assert!(head.views.s1 && !head.views.s2 && !head.views.s3 && head.views.s4);
    }

    #[test]
    fn bare_string_override_does_not_need_quotes() {
        let (_, v) = parse_override("corpus.train_path=data/train.jsonl").unwrap();
        assert_eq!(v.as_str(), Some("data/train.jsonl"));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        assert!(matches!(parse_override("no_equals"), Err(PenError::Config(_))));
        assert!(matches!(parse_override("a..b=1"), Err(PenError::Config(_))));
    }

    #[test]
    fn missing_corpus_source_is_rejected() {
        let err = load_config(None, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn file_encoder_requires_archive() {
        let err =
            load_config(None, &["encoder.kind=\"file\"".into(), "corpus.synthetic.n_train=8".into()])
                .unwrap_err();
        assert!(err.to_string().contains("archive_path"));
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, synthetic_toml()).unwrap();
        let cfg = load_config(Some(&p), &["trainer.seed=42".into()]).unwrap();
        let snap = cfg.snapshot().unwrap();
        let p2 = dir.path().join("snap.toml");
        std::fs::write(&p2, &snap).unwrap();
        let cfg2 = load_config(Some(&p2), &[]).unwrap();
        assert_eq!(cfg2.trainer.seed, 42);
        assert_eq!(cfg2.encoder.dim, cfg.encoder.dim);
    }

    #[test]
    fn invalid_view_name_is_config_error() {
        let err = load_config(
            None,
            &["head.views=[\"s9\"]".into(), "corpus.synthetic.n_train=8".into()],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
