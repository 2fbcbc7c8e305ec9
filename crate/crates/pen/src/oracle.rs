//! Independent reference implementations, written as plain scalar loops
//! with no graph machinery, used to cross-check the fast paths.

use crate::corpus::Label;
use crate::error::{PenError, Result};
use crate::params::ParamStore;
use crate::pcl::Formulation;
use crate::tensor::{Scalar, COSINE_EPS};

/// Plain cosine similarity with the same epsilon guard as the graph op.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(COSINE_EPS)).clamp(-1.0, 1.0)
}

fn pair_weight(sim: f64, tau: f64, formulation: Formulation) -> f64 {
    match formulation {
        Formulation::InfoNce => (sim / tau).exp(),
        Formulation::LiteralRatio => 0.5 * (1.0 + sim),
    }
}

/// Category-oriented contrastive loss as a literal double loop, including
/// self-pairs in both sums.
pub fn naive_l1(
    masks: &[Vec<f64>],
    labels: &[Label],
    tau1: f64,
    formulation: Formulation,
) -> Result<f64> {
    let m = masks.len();
    if m < 2 || labels.len() != m {
        return Err(PenError::Invalid("naive_l1: need a labeled batch of at least 2".into()));
    }
    let mut total = 0.0;
    for i in 0..m {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..m {
            let w = pair_weight(cosine(&masks[i], &masks[j]), tau1, formulation);
            den += w;
            if labels[j] == labels[i] {
                num += w;
            }
        }
        total += den.ln() - num.ln();
    }
    Ok(total / m as f64)
}

/// Prompt-oriented contrastive loss as a literal loop over samples.
pub fn naive_l2(
    masks: &[Vec<f64>],
    neg_specials: &[Vec<f64>],
    pos_specials: &[Vec<f64>],
    labels: &[Label],
    tau2: f64,
    formulation: Formulation,
) -> Result<f64> {
    let m = masks.len();
    if m == 0 || neg_specials.len() != m || pos_specials.len() != m || labels.len() != m {
        return Err(PenError::Invalid("naive_l2: input length mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..m {
        let wn = pair_weight(cosine(&masks[i], &neg_specials[i]), tau2, formulation);
        let wp = pair_weight(cosine(&masks[i], &pos_specials[i]), tau2, formulation);
        let positive = match labels[i] {
            Label::Hateful => wn,
            Label::NonHateful => wp,
        };
        total += (wn + wp).ln() - positive.ln();
    }
    Ok(total / m as f64)
}

/// Mean `-log softmax(scores)[gold]` over the batch, as plain loops.
pub fn naive_cross_entropy(scores: &[[f64; 2]], labels: &[Label]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(PenError::Invalid("naive_cross_entropy: length mismatch".into()));
    }
    let mut total = 0.0;
    for (z, &y) in scores.iter().zip(labels) {
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        total += lse - z[y.index()];
    }
    Ok(total / scores.len() as f64)
}

/// Single-layer LSTM over `xs` (each of length `d_in`) as scalar loops,
/// with gate order `[input | forget | cell | output]` in the packed
/// matrices, matching the graph implementation. Returns the hidden state
/// after `real_length` steps (zeros when `real_length == 0`).
pub fn naive_lstm(
    xs: &[Vec<f64>],
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    d_in: usize,
    hidden: usize,
    real_length: usize,
) -> Result<Vec<f64>> {
    if real_length > xs.len() {
        return Err(PenError::Invalid(format!(
            "naive_lstm: real_length {} exceeds {} steps",
            real_length,
            xs.len()
        )));
    }
    if wx.len() != d_in * 4 * hidden || wh.len() != hidden * 4 * hidden || b.len() != 4 * hidden {
        return Err(PenError::Invalid("naive_lstm: weight size mismatch".into()));
    }
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for x in &xs[..real_length] {
        if x.len() != d_in {
            return Err(PenError::Invalid("naive_lstm: input width mismatch".into()));
        }
        let mut z = b.to_vec();
        for (k, zk) in z.iter_mut().enumerate() {
            for (r, &xv) in x.iter().enumerate() {
                *zk += xv * wx[r * 4 * hidden + k];
            }
            for (r, &hv) in h.iter().enumerate() {
                *zk += hv * wh[r * 4 * hidden + k];
            }
        }
        let mut nh = vec![0.0; hidden];
        let mut nc = vec![0.0; hidden];
        for u in 0..hidden {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hidden + u]);
            let gc = z[2 * hidden + u].tanh();
            let o = sigmoid(z[3 * hidden + u]);
            nc[u] = f * c[u] + i * gc;
            nh[u] = o * nc[u].tanh();
        }
        h = nh;
        c = nc;
    }
    Ok(h)
}

/// Symbolic position roles in an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Start,
    InferContent,
    InferPrompt,
    Mask,
    Sep,
    NegContent,
    NegPrompt,
    NegLabel,
    PosContent,
    PosPrompt,
    PosLabel,
}

/// Walk the layout as a literal role list and read positions off it —
/// an independent check of the arithmetic offset formulas.
pub fn role_walk(len_infer: usize, len_demo: usize, len_prompt: usize) -> Vec<Role> {
    let mut roles = vec![Role::Start];
    roles.extend(std::iter::repeat_n(Role::InferContent, len_infer));
    roles.extend(std::iter::repeat_n(Role::InferPrompt, len_prompt - 1));
    roles.push(Role::Mask);
    roles.push(Role::Sep);
    roles.extend(std::iter::repeat_n(Role::NegContent, len_demo));
    roles.extend(std::iter::repeat_n(Role::NegPrompt, len_prompt - 1));
    roles.push(Role::NegLabel);
    roles.push(Role::Sep);
    roles.extend(std::iter::repeat_n(Role::PosContent, len_demo));
    roles.extend(std::iter::repeat_n(Role::PosPrompt, len_prompt - 1));
    roles.push(Role::PosLabel);
    roles.push(Role::Sep);
    roles
}

pub fn position_of(roles: &[Role], role: Role) -> Option<usize> {
    roles.iter().position(|&r| r == role)
}

/// Central-difference gradient of `eval` with respect to every entry of
/// `store`, flattened in entry order. `eval` must be a pure function of
/// the store values.
pub fn finite_difference<F, E>(
    store: &mut ParamStore<F>,
    eps: f64,
    mut eval: E,
) -> Result<Vec<f64>>
where
    F: Scalar,
    E: FnMut(&ParamStore<F>) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(store.total_len());
    let n_entries = store.entries().len();
    for e_idx in 0..n_entries {
        for v_idx in 0..store.entries()[e_idx].data.len() {
            let original = store.entries()[e_idx].data[v_idx];
            store.entries_mut()[e_idx].data[v_idx] = original + F::from_f64c(eps);
            let plus = eval(store)?;
            store.entries_mut()[e_idx].data[v_idx] = original - F::from_f64c(eps);
            let minus = eval(store)?;
            store.entries_mut()[e_idx].data[v_idx] = original;
            grads.push((plus - minus) / (2.0 * eps));
        }
    }
    Ok(grads)
}

/// Max relative error between analytic and finite-difference gradients,
/// with an absolute floor so near-zero entries compare sanely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
