//! The full model: encoder plus multi-view perception head, with one
//! named parameter store and a per-step forward pass over a fresh graph.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::AssembledSequence;
use crate::corpus::Label;
use crate::encoder::{slice_regions, SequenceEncoder};
use crate::error::{PenError, Result};
use crate::params::{xavier, Bindings, ParamStore};
use crate::pmp::{
    extract_globals, gate_fuse, multi_view_score, perceive, GateRefs, LmHeadRefs, MlpRefs,
    PerceptionBundle, ViewSet,
};
use crate::tensor::lstm::LstmRefs;
use crate::tensor::{Graph, Scalar, TensorRef};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Enabled scoring views; disabling all of `s2..s4` removes the
    /// perception networks from the graph entirely.
    pub views: ViewSet,
    /// Share one regional LSTM across the three regions (default) or use
    /// an independent set of weights per region.
    pub tied_region_lstm: bool,
    /// Share one classifier across the four views (default) or train one
    /// per view.
    pub per_view_heads: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { views: ViewSet::all(), tied_region_lstm: true, per_view_heads: false }
    }
}

/// One forward pass: parameter handles plus per-sample head features.
pub struct ForwardPass {
    pub bindings: Bindings,
    pub bundles: Vec<PerceptionBundle>,
    pub labels: Vec<Option<Label>>,
    pub ids: Vec<String>,
}

impl ForwardPass {
    pub fn s_alls(&self) -> Vec<TensorRef> {
        self.bundles.iter().map(|b| b.s_all).collect()
    }

    pub fn masks(&self) -> Vec<TensorRef> {
        self.bundles.iter().map(|b| b.t_special_infer).collect()
    }

    pub fn neg_specials(&self) -> Vec<TensorRef> {
        self.bundles.iter().map(|b| b.t_special_neg).collect()
    }

    pub fn pos_specials(&self) -> Vec<TensorRef> {
        self.bundles.iter().map(|b| b.t_special_pos).collect()
    }

    /// Gold labels for loss computation; errors if any sample is unlabeled.
    pub fn gold_labels(&self) -> Result<Vec<Label>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    PenError::Invalid(format!("sample {:?} has no label", self.ids[i]))
                })
            })
            .collect()
    }
}

pub struct PenModel<F: Scalar> {
    pub encoder: Box<dyn SequenceEncoder<F>>,
    pub head: HeadConfig,
    pub store: ParamStore<F>,
    d: usize,
}

impl<F: Scalar> PenModel<F> {
    /// Build the model and initialize every parameter deterministically
    /// from `seed`. All head parameters are registered regardless of the
    /// enabled views, so checkpoints keep one stable schema; disabled
    /// paths simply never enter the graph.
    pub fn new(encoder: Box<dyn SequenceEncoder<F>>, head: HeadConfig, seed: u64) -> Result<Self> {
        if head.views.is_empty() {
            return Err(PenError::Config("at least one scoring view must be enabled".into()));
        }
        let d = encoder.dim();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        encoder.init_params(&mut store, &mut rng);

        let lstm = |store: &mut ParamStore<F>, rng: &mut ChaCha20Rng, prefix: &str| {
            store.insert(&format!("{prefix}.wx"), vec![d, 4 * d], xavier(rng, d, 4 * d));
            store.insert(&format!("{prefix}.wh"), vec![d, 4 * d], xavier(rng, d, 4 * d));
            store.insert(&format!("{prefix}.b"), vec![4 * d], vec![F::zero(); 4 * d]);
        };
        if head.tied_region_lstm {
            lstm(&mut store, &mut rng, "pmp.lstm");
        } else {
            for region in ["infer", "neg", "pos"] {
                lstm(&mut store, &mut rng, &format!("pmp.lstm.{region}"));
            }
        }
        for net in ["hpn", "nhpn"] {
            store.insert(&format!("pmp.{net}.w1"), vec![2 * d, d], xavier(&mut rng, 2 * d, d));
            store.insert(&format!("pmp.{net}.b1"), vec![d], vec![F::zero(); d]);
            store.insert(&format!("pmp.{net}.w2"), vec![d, d], xavier(&mut rng, d, d));
            store.insert(&format!("pmp.{net}.b2"), vec![d], vec![F::zero(); d]);
        }
        store.insert("pmp.gate.w", vec![2 * d, d], xavier(&mut rng, 2 * d, d));
        store.insert("pmp.gate.b", vec![d], vec![F::zero(); d]);
        if head.per_view_heads {
            for k in 1..=4 {
                store.insert(&format!("pmp.head.s{k}.w"), vec![d, 2], xavier(&mut rng, d, 2));
                store.insert(&format!("pmp.head.s{k}.b"), vec![2], vec![F::zero(); 2]);
            }
        } else {
            store.insert("pmp.head.w", vec![d, 2], xavier(&mut rng, d, 2));
            store.insert("pmp.head.b", vec![2], vec![F::zero(); 2]);
        }
        Ok(PenModel { encoder, head, store, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn lstm_refs(&self, b: &Bindings) -> (LstmRefs, LstmRefs, LstmRefs) {
        let mk = |prefix: &str| LstmRefs {
            wx: b.get(&format!("{prefix}.wx")),
            wh: b.get(&format!("{prefix}.wh")),
            b: b.get(&format!("{prefix}.b")),
            hidden: self.d,
        };
        if self.head.tied_region_lstm {
            let shared = mk("pmp.lstm");
            (shared, shared, shared)
        } else {
            (mk("pmp.lstm.infer"), mk("pmp.lstm.neg"), mk("pmp.lstm.pos"))
        }
    }

    fn heads(&self, b: &Bindings) -> [LmHeadRefs; 4] {
        if self.head.per_view_heads {
            [1, 2, 3, 4].map(|k| LmHeadRefs {
                w: b.get(&format!("pmp.head.s{k}.w")),
                b: b.get(&format!("pmp.head.s{k}.b")),
            })
        } else {
            [LmHeadRefs { w: b.get("pmp.head.w"), b: b.get("pmp.head.b") }; 4]
        }
    }

    fn mlp_refs(&self, b: &Bindings, net: &str) -> MlpRefs {
        MlpRefs {
            w1: b.get(&format!("pmp.{net}.w1")),
            b1: b.get(&format!("pmp.{net}.b1")),
            w2: b.get(&format!("pmp.{net}.w2")),
            b2: b.get(&format!("pmp.{net}.b2")),
        }
    }

    /// Forward the batch through a fresh graph.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        batch: &[AssembledSequence],
    ) -> Result<ForwardPass> {
        let bindings = self.store.bind(g);
        let encoded = self.encoder.encode(g, &bindings, batch)?;
        if encoded.d != self.d {
            return Err(PenError::Shape {
                op: "forward",
                detail: format!("encoder emitted d={}, head expects d={}", encoded.d, self.d),
            });
        }
        let (l_infer, l_neg, l_pos) = self.lstm_refs(&bindings);
        let heads = self.heads(&bindings);
        let uses_pmp = self.head.views.uses_pmp();
        let hpn = self.mlp_refs(&bindings, "hpn");
        let nhpn = self.mlp_refs(&bindings, "nhpn");
        let gate = GateRefs { w: bindings.get("pmp.gate.w"), b: bindings.get("pmp.gate.b") };

        let mut bundles = Vec::with_capacity(encoded.len());
        for i in 0..encoded.len() {
            let slices = slice_regions(&encoded, i);
            let globals = extract_globals(g, &slices, &l_infer, &l_neg, &l_pos)?;
            let specials = (slices.mask, slices.neg_label, slices.pos_label);
            let (i0, i1, i_hat) = if uses_pmp {
                let (i0, i1) = perceive(g, globals, specials, &hpn, &nhpn)?;
                let i_hat = gate_fuse(g, i0, i1, &gate)?;
                (Some(i0), Some(i1), Some(i_hat))
            } else {
                (None, None, None)
            };
            let (scores, s_all) = multi_view_score(
                g,
                globals.0,
                specials.0,
                i0,
                i1,
                i_hat,
                self.head.views,
                &heads,
            )?;
            bundles.push(PerceptionBundle {
                t_infer: globals.0,
                t_neg: globals.1,
                t_pos: globals.2,
                t_special_infer: specials.0,
                t_special_neg: specials.1,
                t_special_pos: specials.2,
                i0,
                i1,
                i_hat,
                scores,
                s_all,
            });
        }
        Ok(ForwardPass {
            bindings,
            bundles,
            labels: encoded.labels,
            ids: encoded.ids,
        })
    }

    /// `S_all` of one bundle as plain values.
    pub fn s_all_values(g: &Graph<F>, bundle: &PerceptionBundle) -> Vec<f64> {
        g.value(bundle.s_all).iter().map(|v| v.to_f64c()).collect()
    }
}
