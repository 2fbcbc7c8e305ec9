//! Evaluation: confusion-matrix metrics with the hateful class as
//! positive, batched inference with sampled demonstrations, and feature
//! export for offline inspection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::assembler::{assemble, AssembledSequence, RegionLayout, Vocabulary};
use crate::corpus::{DemonstrationPool, Label, MemeRecord};
use crate::error::{PenError, Result};
use crate::model::PenModel;
use crate::pmp::predict;
use crate::tensor::{Graph, Scalar};

/// Counts and derived metrics. `Hateful` is the positive class for the
/// binary precision/recall/F1; `macro_f1` averages both classes' F1.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    safe_div(2.0 * precision * recall, precision + recall)
}

pub fn compute_metrics(pairs: &[(Label, Label)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(PenError::Invalid("cannot compute metrics on an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for &(gold, pred) in pairs {
        match (gold, pred) {
            (Label::Hateful, Label::Hateful) => tp += 1,
            (Label::NonHateful, Label::Hateful) => fp += 1,
            (Label::Hateful, Label::NonHateful) => fn_ += 1,
            (Label::NonHateful, Label::NonHateful) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / pairs.len() as f64;
    let precision = safe_div(tp as f64, (tp + fp) as f64);
    let recall = safe_div(tp as f64, (tp + fn_) as f64);
    let f1 = f1_of(precision, recall);
    // Same construction with the classes swapped.
    let precision_n = safe_div(tn as f64, (tn + fn_) as f64);
    let recall_n = safe_div(tn as f64, (tn + fp) as f64);
    let f1_n = f1_of(precision_n, recall_n);
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        accuracy,
        precision,
        recall,
        f1,
        macro_f1: 0.5 * (f1 + f1_n),
    })
}

/// Assemble each record with demonstrations drawn from `pool`, never
/// using a record as its own demonstration.
pub fn assemble_with_demos(
    records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<AssembledSequence>> {
    records
        .iter()
        .map(|r| {
            let (neg, pos) = pool.sample_excluding(rng, &r.id)?;
            assemble(r, neg, pos, layout, vocab)
        })
        .collect()
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub id: String,
    pub gold: Label,
    pub pred: Label,
    pub s_all: [f64; 2],
}

/// Run inference over `records` in small chunks (each chunk gets a fresh
/// graph), with demonstrations sampled deterministically from `eval_seed`.
pub fn evaluate<F: Scalar>(
    model: &PenModel<F>,
    records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
    eval_seed: u64,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(eval_seed);
    let assembled = assemble_with_demos(records, pool, layout, vocab, &mut rng)?;
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in assembled.chunks(16) {
        let mut g: Graph<F> = Graph::new();
        let fp = model.forward(&mut g, chunk)?;
        for (i, bundle) in fp.bundles.iter().enumerate() {
            let s = PenModel::s_all_values(&g, bundle);
            let pred = predict(&s)?;
            let gold = fp.labels[i].ok_or_else(|| {
                PenError::Invalid(format!("sample {:?} has no gold label", fp.ids[i]))
            })?;
            predictions.push(Prediction {
                id: fp.ids[i].clone(),
                gold,
                pred,
                s_all: [s[0], s[1]],
            });
        }
    }
    let pairs: Vec<(Label, Label)> = predictions.iter().map(|p| (p.gold, p.pred)).collect();
    Ok((compute_metrics(&pairs)?, predictions))
}

/// Accuracy of always predicting the majority class of `records`.
pub fn majority_baseline_accuracy(records: &[MemeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(PenError::Invalid("empty record set".into()));
    }
    let hateful = records.iter().filter(|r| r.label == Label::Hateful).count();
    let majority = hateful.max(records.len() - hateful);
    Ok(majority as f64 / records.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Write one tab-separated line per record: id, gold label, the mask
/// vector, and the two `S_all` scores. Empty input yields the header only.
pub fn export_features<F: Scalar, W: Write>(
    model: &PenModel<F>,
    records: &[MemeRecord],
    pool: &DemonstrationPool,
    layout: &RegionLayout,
    vocab: &Vocabulary,
    eval_seed: u64,
    mut out: W,
) -> Result<()> {
    let bad = |e: std::io::Error| PenError::Invalid(format!("feature export write failed: {e}"));
    let d = model.dim();
    let mut header = String::from("id\tlabel");
    for k in 0..d {
        header.push_str(&format!("\tmask_{k}"));
    }
    header.push_str("\ts_hateful\ts_non_hateful");
    writeln!(out, "{header}").map_err(bad)?;
    if records.is_empty() {
        return Ok(());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(eval_seed);
    let assembled = assemble_with_demos(records, pool, layout, vocab, &mut rng)?;
    for chunk in assembled.chunks(16) {
        let mut g: Graph<F> = Graph::new();
        let fp = model.forward(&mut g, chunk)?;
        for (i, bundle) in fp.bundles.iter().enumerate() {
            let mut line = format!(
                "{}\t{}",
                fp.ids[i],
                fp.labels[i].map(|l| l.to_string()).unwrap_or_else(|| "-".into())
            );
            for v in g.value(bundle.t_special_infer) {
                line.push_str(&format!("\t{:.8e}", v.to_f64c()));
            }
            let s = PenModel::s_all_values(&g, bundle);
            line.push_str(&format!("\t{:.8e}\t{:.8e}", s[0], s[1]));
            writeln!(out, "{line}").map_err(bad)?;
        }
    }
    Ok(())
}
