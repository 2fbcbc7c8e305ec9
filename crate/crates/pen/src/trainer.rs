//! Training loop: Adam over the parameter store, per-epoch demonstration
//! sampling, the three-term loss, and the ablation grid.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{AssembledSequence, RegionLayout, Vocabulary};
use crate::corpus::{shuffle, DemonstrationPool, MemeRecord};
use crate::error::{PenError, Result};
use crate::eval::{assemble_with_demos, evaluate, MetricsReport};
use crate::model::{HeadConfig, PenModel};
use crate::pcl::{
    cross_entropy, l1_category_contrastive, l2_prompt_contrastive, total_loss, LossConfig,
    LossReport,
};
use crate::pmp::predict;
use crate::tensor::checkpoint::save_checkpoint_file;
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSampling {
    /// Resample each sample's demonstration pair at every epoch (default).
    PerEpoch,
    /// Sample once before training and keep the pairing fixed.
    FixedPerSample,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub demo_sampling: DemoSampling,
    pub shuffle: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            demo_sampling: DemoSampling::PerEpoch,
            shuffle: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(PenError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(PenError::Config(
                "batch_size must be at least 2 so the category-contrastive loss is defined".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(PenError::Config("learning_rate must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Adam with the standard defaults, in f64 regardless of model precision.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update. `grads` must align with the store's entry order.
    pub fn step<F: Scalar>(&mut self, store: &mut crate::params::ParamStore<F>, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (e, (gs, (ms, vs))) in
            store.entries_mut().iter_mut().zip(grads.iter().zip(self.m.iter_mut().zip(&mut self.v)))
        {
            for (i, &g) in gs.iter().enumerate() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g * g;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                e.data[i] = F::from_f64c(e.data[i].to_f64c() - delta);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub train_acc: f64,
}

pub struct RunArtifacts {
    pub epochs: Vec<EpochLog>,
}

/// Chunk indices into batches, folding a trailing singleton into the
/// previous batch so every batch keeps at least two samples.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() >= 2 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        let prev = out.pop().unwrap();
        out.push(prev.start..last.end);
    }
    out
}

fn run_batch<F: Scalar>(
    model: &mut PenModel<F>,
    batch: &[AssembledSequence],
    loss_cfg: &LossConfig,
    adam: &mut Adam,
) -> Result<(LossReport, usize)> {
    let mut g: Graph<F> = Graph::new();
    let fp = model.forward(&mut g, batch)?;
    let golds = fp.gold_labels()?;
    let s_alls = fp.s_alls();
    let ce = cross_entropy(&mut g, &s_alls, &golds)?;
    let l1 = l1_category_contrastive(
        &mut g,
        &fp.masks(),
        &golds,
        loss_cfg.tau1,
        loss_cfg.formulation,
    )?;
    let l2 = l2_prompt_contrastive(
        &mut g,
        &fp.masks(),
        &fp.neg_specials(),
        &fp.pos_specials(),
        &golds,
        loss_cfg.tau2,
        loss_cfg.formulation,
        loss_cfg.stop_demo_grad,
    )?;
    let (total, report) = total_loss(&mut g, ce, l1, l2, loss_cfg)?;
    if let Some(term) = report.non_finite_term() {
        return Err(PenError::NonFinite { term: term.into() });
    }
    let mut correct = 0usize;
    for (bundle, &gold) in fp.bundles.iter().zip(&golds) {
        if predict(&PenModel::s_all_values(&g, bundle))? == gold {
            correct += 1;
        }
    }
    g.backward(total)?;
    let grads: Vec<Vec<f64>> = model
        .store
        .entries()
        .iter()
        .map(|e| g.grad(fp.bindings.get(&e.name)).iter().map(|v| v.to_f64c()).collect())
        .collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PenError::NonFinite { term: "gradient".into() });
    }
    adam.step(&mut model.store, &grads);
    Ok((report, correct))
}

/// Train in place. Demonstrations are sampled from `pool`; the records
/// themselves are never their own demonstrations. Writes one log line per
/// epoch to `log_out` when given.
pub fn train<F: Scalar>(
    model: &mut PenModel<F>,
    records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
    loss_cfg: &LossConfig,
    tcfg: &TrainerConfig,
    mut log_out: Option<&mut dyn Write>,
) -> Result<RunArtifacts> {
    tcfg.validate()?;
    loss_cfg.validate()?;
    if records.len() < 2 {
        return Err(PenError::Invalid(format!(
            "training needs at least 2 records, got {}",
            records.len()
        )));
    }
    let sizes: Vec<usize> = model.store.entries().iter().map(|e| e.data.len()).collect();
    let mut adam = Adam::new(tcfg.learning_rate, &sizes);
    let mut rng = ChaCha20Rng::seed_from_u64(tcfg.seed);
    let fixed = match tcfg.demo_sampling {
        DemoSampling::FixedPerSample => {
            Some(assemble_with_demos(records, pool, layout, vocab, &mut rng)?)
        }
        DemoSampling::PerEpoch => None,
    };
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut assembled = match &fixed {
            Some(seqs) => seqs.clone(),
            None => assemble_with_demos(records, pool, layout, vocab, &mut rng)?,
        };
        if tcfg.shuffle {
            shuffle(&mut assembled, &mut rng);
        }
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut weight = 0usize;
        let mut correct = 0usize;
        for range in batch_ranges(assembled.len(), tcfg.batch_size) {
            let batch = &assembled[range];
            let (report, batch_correct) = run_batch(model, batch, loss_cfg, &mut adam)?;
            let m = batch.len() as f64;
            sums.0 += report.ce * m;
            sums.1 += report.l1 * m;
            sums.2 += report.l2 * m;
            sums.3 += report.total * m;
            weight += batch.len();
            correct += batch_correct;
        }
        let w = weight as f64;
        let log = EpochLog {
            epoch,
            ce: sums.0 / w,
            l1: sums.1 / w,
            l2: sums.2 / w,
            total: sums.3 / w,
            train_acc: correct as f64 / w,
        };
        if let Some(out) = log_out.as_deref_mut() {
            writeln!(
                out,
                "epoch {:>3}  ce {:.6}  l1 {:.6}  l2 {:.6}  total {:.6}  train_acc {:.4}",
                log.epoch, log.ce, log.l1, log.l2, log.total, log.train_acc
            )
            .map_err(|e| PenError::Invalid(format!("log write failed: {e}")))?;
        }
        epochs.push(log);
    }
    Ok(RunArtifacts { epochs })
}

pub fn save_model<F: Scalar>(model: &PenModel<F>, path: &Path) -> Result<()> {
    save_checkpoint_file(path, &model.store.to_named_tensors())
}

// ── Ablation grid ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    WoPmp,
    WoL1,
    WoL2,
    WoPcl,
    WoS4,
    WoS2S3,
    WoS2S3S4,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::WoPmp,
        AblationVariant::WoL1,
        AblationVariant::WoL2,
        AblationVariant::WoPcl,
        AblationVariant::WoS4,
        AblationVariant::WoS2S3,
        AblationVariant::WoS2S3S4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WoPmp => "wo_pmp",
            AblationVariant::WoL1 => "wo_l1",
            AblationVariant::WoL2 => "wo_l2",
            AblationVariant::WoPcl => "wo_pcl",
            AblationVariant::WoS4 => "wo_s4",
            AblationVariant::WoS2S3 => "wo_s2s3",
            AblationVariant::WoS2S3S4 => "wo_s2s3s4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PenError::Config(format!("unknown ablation variant {s:?}")))
    }

    /// Derive the head and loss configuration for this variant from the
    /// full model's configuration.
    pub fn apply(self, head: HeadConfig, loss: LossConfig) -> (HeadConfig, LossConfig) {
        let mut head = head;
        let mut loss = loss;
        match self {
            AblationVariant::Full => {}
            AblationVariant::WoPmp | AblationVariant::WoS2S3S4 => {
                head.views.s2 = false;
                head.views.s3 = false;
                head.views.s4 = false;
            }
            AblationVariant::WoS4 => head.views.s4 = false,
            AblationVariant::WoS2S3 => {
                head.views.s2 = false;
                head.views.s3 = false;
            }
            AblationVariant::WoL1 => loss.alpha = 0.0,
            AblationVariant::WoL2 => loss.beta = 0.0,
            AblationVariant::WoPcl => {
                loss.alpha = 0.0;
                loss.beta = 0.0;
            }
        }
        (head, loss)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

/// Train and evaluate each requested variant across the given seeds.
/// `make_model` builds a fresh model for a head configuration and seed.
#[allow(clippy::too_many_arguments)]
pub fn ablate<F: Scalar>(
    variants: &[AblationVariant],
    seeds: &[u64],
    make_model: &dyn Fn(HeadConfig, u64) -> Result<PenModel<F>>,
    base_head: HeadConfig,
    base_loss: LossConfig,
    tcfg: &TrainerConfig,
    train_records: &[MemeRecord],
    test_records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
    mut log_out: Option<&mut dyn Write>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(PenError::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (head, loss) = variant.apply(base_head, base_loss);
        let mut accs = Vec::with_capacity(seeds.len());
        let mut f1s = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut model = make_model(head, seed)?;
            let run_cfg = TrainerConfig { seed, ..*tcfg };
            train(&mut model, train_records, pool, layout, vocab, &loss, &run_cfg, None)?;
            let (metrics, _) = evaluate(&model, test_records, pool, layout, vocab, seed)?;
            accs.push(metrics.accuracy);
            f1s.push(metrics.macro_f1);
        }
        let (mean_acc, _) = crate::eval::mean_std(&accs);
        let (mean_f1, std_f1) = crate::eval::mean_std(&f1s);
        let row = AblationRow {
            variant: variant.name(),
            seeds: seeds.len(),
            mean_accuracy: mean_acc,
            mean_macro_f1: mean_f1,
            std_macro_f1: std_f1,
        };
        if let Some(out) = log_out.as_deref_mut() {
            writeln!(
                out,
                "{:<10}  acc {:.4}  macro_f1 {:.4} ± {:.4}  ({} seeds)",
                row.variant, row.mean_accuracy, row.mean_macro_f1, row.std_macro_f1, row.seeds
            )
            .map_err(|e| PenError::Invalid(format!("log write failed: {e}")))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Metrics of a model trained across several seeds (used by reporting).
pub fn multi_seed_metrics<F: Scalar>(
    seeds: &[u64],
    make_model: &dyn Fn(u64) -> Result<PenModel<F>>,
    loss: &LossConfig,
    tcfg: &TrainerConfig,
    train_records: &[MemeRecord],
    test_records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut model = make_model(seed)?;
        let run_cfg = TrainerConfig { seed, ..*tcfg };
        train(&mut model, train_records, pool, layout, vocab, loss, &run_cfg, None)?;
        let (metrics, _) = evaluate(&model, test_records, pool, layout, vocab, seed)?;
        out.push(metrics);
    }
    Ok(out)
}
