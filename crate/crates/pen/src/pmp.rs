//! Prompt-enhanced multi-view perception.
//!
//! Regional global extraction via a shared LSTM, hateful / non-hateful
//! perception networks over fused global + special-token features, soft
//! gated fusion, and four additive scoring views.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::encoder::RegionSlices;
use crate::error::{PenError, Result};
use crate::tensor::lstm::{lstm_forward, LstmRefs};
use crate::tensor::{Graph, Scalar, TensorRef};

/// Which of the four additive views contribute to `S_all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
    pub s4: bool,
}

impl Default for ViewSet {
    fn default() -> Self {
        ViewSet::all()
    }
}

impl ViewSet {
    pub fn all() -> Self {
        ViewSet { s1: true, s2: true, s3: true, s4: true }
    }

    pub fn only_s1() -> Self {
        ViewSet { s1: true, s2: false, s3: false, s4: false }
    }

    pub fn is_empty(&self) -> bool {
        !(self.s1 || self.s2 || self.s3 || self.s4)
    }

    /// Whether any view depends on the perception networks.
    pub fn uses_pmp(&self) -> bool {
        self.s2 || self.s3 || self.s4
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let mut v = ViewSet { s1: false, s2: false, s3: false, s4: false };
        for n in names {
            match n.trim() {
                "s1" => v.s1 = true,
                "s2" => v.s2 = true,
                "s3" => v.s3 = true,
                "s4" => v.s4 = true,
                other => return Err(PenError::Config(format!("unknown view {other:?}"))),
            }
        }
        Ok(v)
    }
}

/// Two affine layers with tanh between: `2d -> d -> d`.
#[derive(Debug, Clone, Copy)]
pub struct MlpRefs {
    pub w1: TensorRef,
    pub b1: TensorRef,
    pub w2: TensorRef,
    pub b2: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct GateRefs {
    pub w: TensorRef,
    pub b: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct LmHeadRefs {
    pub w: TensorRef,
    pub b: TensorRef,
}

/// All intermediate head features for one sample.
pub struct PerceptionBundle {
    pub t_infer: TensorRef,
    pub t_neg: TensorRef,
    pub t_pos: TensorRef,
    pub t_special_infer: TensorRef,
    pub t_special_neg: TensorRef,
    pub t_special_pos: TensorRef,
    pub i0: Option<TensorRef>,
    pub i1: Option<TensorRef>,
    pub i_hat: Option<TensorRef>,
    pub scores: [Option<TensorRef>; 4],
    pub s_all: TensorRef,
}

/// Run the shared LSTM over each region's content span (prompt span
/// excluded) up to its real length.
pub fn extract_globals<F: Scalar>(
    g: &mut Graph<F>,
    slices: &RegionSlices<'_>,
    lstm_infer: &LstmRefs,
    lstm_neg: &LstmRefs,
    lstm_pos: &LstmRefs,
) -> Result<(TensorRef, TensorRef, TensorRef)> {
    let t_infer = lstm_forward(g, slices.infer, lstm_infer, slices.real_lengths.infer)?;
    let t_neg = lstm_forward(g, slices.neg, lstm_neg, slices.real_lengths.neg)?;
    let t_pos = lstm_forward(g, slices.pos, lstm_pos, slices.real_lengths.pos)?;
    Ok((t_infer, t_neg, t_pos))
}

fn mlp<F: Scalar>(g: &mut Graph<F>, x: TensorRef, p: &MlpRefs) -> Result<TensorRef> {
    let z1 = g.matmul(x, p.w1)?;
    let z1 = g.add(z1, p.b1)?;
    let h = g.tanh(z1);
    let z2 = g.matmul(h, p.w2)?;
    g.add(z2, p.b2)
}

/// Perception networks: `I0 = HPN((t_infer + mask) ⊕ (t_neg + neg))`,
/// `I1 = NHPN((t_infer + mask) ⊕ (t_pos + pos))`.
pub fn perceive<F: Scalar>(
    g: &mut Graph<F>,
    globals: (TensorRef, TensorRef, TensorRef),
    specials: (TensorRef, TensorRef, TensorRef),
    hpn: &MlpRefs,
    nhpn: &MlpRefs,
) -> Result<(TensorRef, TensorRef)> {
    let (t_infer, t_neg, t_pos) = globals;
    let (sp_infer, sp_neg, sp_pos) = specials;
    let a = g.add(t_infer, sp_infer)?;
    let bn = g.add(t_neg, sp_neg)?;
    let bp = g.add(t_pos, sp_pos)?;
    let neg_pair = g.concat(&[a, bn], 0)?;
    let pos_pair = g.concat(&[a, bp], 0)?;
    let i0 = mlp(g, neg_pair, hpn)?;
    let i1 = mlp(g, pos_pair, nhpn)?;
    Ok((i0, i1))
}

/// Soft gate: `ghat = sigmoid(Wg·[I0 ⊕ I1] + bg)`,
/// `I_hat = ghat ⊙ I0 + (1 - ghat) ⊙ I1`.
pub fn gate_fuse<F: Scalar>(
    g: &mut Graph<F>,
    i0: TensorRef,
    i1: TensorRef,
    gate: &GateRefs,
) -> Result<TensorRef> {
    let cat = g.concat(&[i0, i1], 0)?;
    let z = g.matmul(cat, gate.w)?;
    let z = g.add(z, gate.b)?;
    let gv = g.sigmoid(z);
    let left = g.mul(gv, i0)?;
    let inv = g.affine(gv, -F::one(), F::one());
    let right = g.mul(inv, i1)?;
    g.add(left, right)
}

fn lmhead<F: Scalar>(g: &mut Graph<F>, x: TensorRef, h: &LmHeadRefs) -> Result<TensorRef> {
    let z = g.matmul(x, h.w)?;
    g.add(z, h.b)
}

/// Four-view scoring. Each view is `LMhead(feature + t_special_infer)`;
/// disabled views contribute a zero tuple. `heads` supplies the classifier
/// per view (identical handles when shared).
pub fn multi_view_score<F: Scalar>(
    g: &mut Graph<F>,
    t_infer: TensorRef,
    t_special_infer: TensorRef,
    i0: Option<TensorRef>,
    i1: Option<TensorRef>,
    i_hat: Option<TensorRef>,
    views: ViewSet,
    heads: &[LmHeadRefs; 4],
) -> Result<([Option<TensorRef>; 4], TensorRef)> {
    if views.is_empty() {
        return Err(PenError::Invalid("no enabled views: no signal path to the classifier".into()));
    }
    let need = |x: Option<TensorRef>, name: &str| -> Result<TensorRef> {
        x.ok_or_else(|| PenError::Invalid(format!("view requires {name} but it was not computed")))
    };
    let mut scores: [Option<TensorRef>; 4] = [None; 4];
    if views.s1 {
        let f = g.add(t_infer, t_special_infer)?;
        scores[0] = Some(lmhead(g, f, &heads[0])?);
    }
    if views.s2 {
        let f = g.add(need(i0, "I0")?, t_special_infer)?;
        scores[1] = Some(lmhead(g, f, &heads[1])?);
    }
    if views.s3 {
        let f = g.add(need(i1, "I1")?, t_special_infer)?;
        scores[2] = Some(lmhead(g, f, &heads[2])?);
    }
    if views.s4 {
        let f = g.add(need(i_hat, "I_hat")?, t_special_infer)?;
        scores[3] = Some(lmhead(g, f, &heads[3])?);
    }
    let enabled: Vec<TensorRef> = scores.iter().flatten().copied().collect();
    let s_all = g.add_many(&enabled)?;
    Ok((scores, s_all))
}

/// Highest score wins; an exact tie is called non-hateful.
pub fn predict(s_all: &[f64]) -> Result<Label> {
    if s_all.len() != 2 {
        return Err(PenError::Invalid(format!("score tuple has {} entries", s_all.len())));
    }
    if !s_all.iter().all(|v| v.is_finite()) {
        return Err(PenError::NonFinite { term: "S_all".into() });
    }
    if s_all[0] > s_all[1] {
        Ok(Label::Hateful)
    } else {
        Ok(Label::NonHateful)
    }
}
