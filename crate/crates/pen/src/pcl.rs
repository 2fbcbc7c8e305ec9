//! Training losses: cross-entropy on the score tuple, category-oriented
//! contrastive loss over batch mask vectors, prompt-oriented contrastive
//! loss against each sample's own demonstration label-word vectors, and
//! their weighted total.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{PenError, Result};
use crate::tensor::{Graph, Scalar, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `exp(sim/tau)` numerators and denominators (default).
    InfoNce,
    /// Ratio of similarity sums as typeset, with similarities mapped to
    /// `(1+sim)/2` so the log argument stays positive.
    LiteralRatio,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub formulation: Formulation,
    /// Stop gradients from the prompt-oriented loss into the demonstration
    /// label-word vectors.
    pub stop_demo_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            beta: 0.1,
            tau1: 0.3,
            tau2: 0.3,
            formulation: Formulation::InfoNce,
            stop_demo_grad: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) || !(self.tau2 > 0.0) {
            return Err(PenError::Config("temperatures must be strictly positive".into()));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(PenError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Loss values for logging; `total = ce + alpha*l1 + beta*l2` exactly.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub ce: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Mean over the batch of `-log softmax(S_all)[gold]`. Tuple order is
/// `(score_hateful, score_non_hateful)`, so gold index 0 is hateful.
pub fn cross_entropy<F: Scalar>(
    g: &mut Graph<F>,
    s_alls: &[TensorRef],
    labels: &[Label],
) -> Result<TensorRef> {
    if s_alls.is_empty() || s_alls.len() != labels.len() {
        return Err(PenError::Invalid(format!(
            "cross_entropy: {} scores vs {} labels",
            s_alls.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(s_alls.len());
    for (&z, &y) in s_alls.iter().zip(labels) {
        let e = g.exp(z);
        let se = g.sum(e);
        let lse = g.log(se);
        let gold = g.slice(z, 0, y.index(), 1)?;
        let gold = g.sum(gold);
        terms.push(g.sub(lse, gold)?);
    }
    let total = g.add_many(&terms)?;
    Ok(g.scale(total, F::from_f64c(1.0 / s_alls.len() as f64)))
}

/// Category-oriented contrastive loss over the batch's mask vectors.
/// Self-pairs are included in both sums, exactly as the index ranges run.
pub fn l1_category_contrastive<F: Scalar>(
    g: &mut Graph<F>,
    masks: &[TensorRef],
    labels: &[Label],
    tau1: f64,
    formulation: Formulation,
) -> Result<TensorRef> {
    let m = masks.len();
    if m < 2 {
        return Err(PenError::Invalid(format!("l1 needs a batch of at least 2, got {m}")));
    }
    if labels.len() != m {
        return Err(PenError::Invalid("l1: label count mismatch".into()));
    }
    // Cosine is symmetric; compute each unordered pair once.
    let mut sims = vec![vec![TensorRef(0); m]; m];
    for i in 0..m {
        for j in i..m {
            let s = g.cosine_similarity(masks[i], masks[j])?;
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    let inv_tau = F::from_f64c(1.0 / tau1);
    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        let weights: Vec<TensorRef> = (0..m)
            .map(|j| match formulation {
                Formulation::InfoNce => {
                    let s = g.scale(sims[i][j], inv_tau);
                    g.exp(s)
                }
                Formulation::LiteralRatio => {
                    let half = F::from_f64c(0.5);
                    g.affine(sims[i][j], half, half)
                }
            })
            .collect();
        let same: Vec<TensorRef> =
            (0..m).filter(|&j| labels[j] == labels[i]).map(|j| weights[j]).collect();
        let num = g.add_many(&same)?;
        let den = g.add_many(&weights)?;
        let ln = g.log(num);
        let ld = g.log(den);
        terms.push(g.sub(ld, ln)?);
    }
    let total = g.add_many(&terms)?;
    Ok(g.scale(total, F::from_f64c(1.0 / m as f64)))
}

/// Prompt-oriented contrastive loss: each sample's mask vector against its
/// own sequence's two demonstration label-word vectors; the positive is
/// the one whose demo label matches the sample's label.
#[allow(clippy::too_many_arguments)]
pub fn l2_prompt_contrastive<F: Scalar>(
    g: &mut Graph<F>,
    masks: &[TensorRef],
    neg_specials: &[TensorRef],
    pos_specials: &[TensorRef],
    labels: &[Label],
    tau2: f64,
    formulation: Formulation,
    stop_demo_grad: bool,
) -> Result<TensorRef> {
    let m = masks.len();
    if m == 0 {
        return Err(PenError::Invalid("l2 needs a non-empty batch".into()));
    }
    if neg_specials.len() != m || pos_specials.len() != m || labels.len() != m {
        return Err(PenError::Invalid("l2: input length mismatch".into()));
    }
    let inv_tau = F::from_f64c(1.0 / tau2);
    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        let mut cn = neg_specials[i];
        let mut cp = pos_specials[i];
        if stop_demo_grad {
            cn = g.detach(cn);
            cp = g.detach(cp);
        }
        let sim_n = g.cosine_similarity(masks[i], cn)?;
        let sim_p = g.cosine_similarity(masks[i], cp)?;
        let (wn, wp) = match formulation {
            Formulation::InfoNce => {
                let a = g.scale(sim_n, inv_tau);
                let b = g.scale(sim_p, inv_tau);
                (g.exp(a), g.exp(b))
            }
            Formulation::LiteralRatio => {
                let half = F::from_f64c(0.5);
                (g.affine(sim_n, half, half), g.affine(sim_p, half, half))
            }
        };
        let positive = match labels[i] {
            Label::Hateful => wn,
            Label::NonHateful => wp,
        };
        let den = g.add(wn, wp)?;
        let ld = g.log(den);
        let ln = g.log(positive);
        terms.push(g.sub(ld, ln)?);
    }
    let total = g.add_many(&terms)?;
    Ok(g.scale(total, F::from_f64c(1.0 / m as f64)))
}

/// `total = ce + alpha*l1 + beta*l2`, as one graph node plus the report.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    ce: TensorRef,
    l1: TensorRef,
    l2: TensorRef,
    config: &LossConfig,
) -> Result<(TensorRef, LossReport)> {
    let wl1 = g.scale(l1, F::from_f64c(config.alpha));
    let wl2 = g.scale(l2, F::from_f64c(config.beta));
    let partial = g.add(ce, wl1)?;
    let total = g.add(partial, wl2)?;
    let report = LossReport {
        ce: g.scalar_value(ce).to_f64c(),
        l1: g.scalar_value(l1).to_f64c(),
        l2: g.scalar_value(l2).to_f64c(),
        total: g.scalar_value(total).to_f64c(),
    };
    Ok((total, report))
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.ce.is_finite() {
            Some("cross_entropy")
        } else if !self.l1.is_finite() {
            Some("l1_category_contrastive")
        } else if !self.l2.is_finite() {
            Some("l2_prompt_contrastive")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of<F: Scalar>(g: &Graph<F>, t: TensorRef) -> f64 {
        g.scalar_value(t).to_f64c()
    }

    #[test]
    fn ce_of_zero_scores_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(&[2], vec![0.0, 0.0]);
        let ce = cross_entropy(&mut g, &[z], &[Label::Hateful]).unwrap();
        assert!((scalar_of(&g, ce) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_of_confident_correct_score_is_tiny() {
        // softmax(10, -10)[0]: -ln p = ln(1 + e^-20) ~ 2.0612e-9.
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(&[2], vec![10.0, -10.0]);
        let ce = cross_entropy(&mut g, &[z], &[Label::Hateful]).unwrap();
        let v = scalar_of(&g, ce);
        assert!((v - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn ce_mean_is_permutation_invariant() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(&[2], vec![1.0, -0.5]);
        let b = g.constant(&[2], vec![-2.0, 0.25]);
        let c = g.constant(&[2], vec![0.1, 0.2]);
        let l = [Label::Hateful, Label::NonHateful, Label::Hateful];
        let x = cross_entropy(&mut g, &[a, b, c], &l).unwrap();
        let y = cross_entropy(&mut g, &[c, a, b], &[l[2], l[0], l[1]]).unwrap();
        assert!((scalar_of(&g, x) - scalar_of(&g, y)).abs() < 1e-12);
    }

    #[test]
    fn l1_single_label_batch_is_exactly_zero() {
        let mut g: Graph<f64> = Graph::new();
        let masks = [
            g.constant(&[3], vec![1.0, 2.0, 3.0]),
            g.constant(&[3], vec![-1.0, 0.5, 0.25]),
            g.constant(&[3], vec![0.0, 1.0, 0.0]),
        ];
        let labels = [Label::Hateful; 3];
        let l1 = l1_category_contrastive(&mut g, &masks, &labels, 0.3, Formulation::InfoNce).unwrap();
        assert_eq!(scalar_of(&g, l1), 0.0);
    }

    #[test]
    fn l1_two_orthogonal_unit_vectors() {
        // Per sample: -log(e / (e + 1)) = ln(1 + 1/e) ~ 0.3133.
        let mut g: Graph<f64> = Graph::new();
        let masks = [g.constant(&[2], vec![1.0, 0.0]), g.constant(&[2], vec![0.0, 1.0])];
        let labels = [Label::Hateful, Label::NonHateful];
        let l1 = l1_category_contrastive(&mut g, &masks, &labels, 1.0, Formulation::InfoNce).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((scalar_of(&g, l1) - expect).abs() < 1e-12);
        assert!((scalar_of(&g, l1) - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn l1_rejects_singleton_batch() {
        let mut g: Graph<f64> = Graph::new();
        let m = g.constant(&[2], vec![1.0, 0.0]);
        assert!(l1_category_contrastive(&mut g, &[m], &[Label::Hateful], 1.0, Formulation::InfoNce)
            .is_err());
    }

    #[test]
    fn l2_mask_matching_neg_vector() {
        let mut g: Graph<f64> = Graph::new();
        let mask = g.constant(&[2], vec![1.0, 0.0]);
        let neg = g.constant(&[2], vec![1.0, 0.0]);
        let pos = g.constant(&[2], vec![0.0, 1.0]);
        let l2 = l2_prompt_contrastive(
            &mut g,
            &[mask],
            &[neg],
            &[pos],
            &[Label::Hateful],
            1.0,
            Formulation::InfoNce,
            false,
        )
        .unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((scalar_of(&g, l2) - expect).abs() < 1e-12);
    }

    #[test]
    fn l2_identical_candidates_give_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let mask = g.constant(&[3], vec![0.3, -0.7, 0.1]);
        let c = g.constant(&[3], vec![1.0, 2.0, 3.0]);
        for label in [Label::Hateful, Label::NonHateful] {
            let l2 = l2_prompt_contrastive(
                &mut g,
                &[mask],
                &[c],
                &[c],
                &[label],
                0.5,
                Formulation::InfoNce,
                false,
            )
            .unwrap();
            assert!((scalar_of(&g, l2) - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let mut g: Graph<f64> = Graph::new();
        let ce = g.constant(&[], vec![1.0]);
        let l1 = g.constant(&[], vec![2.0]);
        let l2 = g.constant(&[], vec![3.0]);
        let cfg = LossConfig { alpha: 0.1, beta: 0.2, ..Default::default() };
        let (_, report) = total_loss(&mut g, ce, l1, l2, &cfg).unwrap();
        assert!((report.total - 1.8).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_total_to_ce() {
        let mut g: Graph<f64> = Graph::new();
        let ce = g.constant(&[], vec![0.7]);
        let l1 = g.constant(&[], vec![5.0]);
        let l2 = g.constant(&[], vec![9.0]);
        let cfg = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let (_, report) = total_loss(&mut g, ce, l1, l2, &cfg).unwrap();
        assert_eq!(report.total, 0.7);
    }

    #[test]
    fn stop_demo_grad_blocks_flow_into_demo_vectors() {
        let mut g: Graph<f64> = Graph::new();
        let mask = g.leaf(&[2], vec![0.8, 0.6], true);
        let neg = g.leaf(&[2], vec![1.0, 0.2], true);
        let pos = g.leaf(&[2], vec![-0.3, 0.9], true);
        let l2 = l2_prompt_contrastive(
            &mut g,
            &[mask],
            &[neg],
            &[pos],
            &[Label::Hateful],
            0.5,
            Formulation::InfoNce,
            true,
        )
        .unwrap();
        g.backward(l2).unwrap();
        assert_eq!(g.grad(neg), &[0.0, 0.0]);
        assert_eq!(g.grad(pos), &[0.0, 0.0]);
        assert!(g.grad(mask).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = LossConfig { tau1: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = LossConfig { alpha: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
