//! End-to-end acceptance gate. Each test prints one pass/fail line for
//! its criterion (run with `--nocapture` to see the lines for passing
//! criteria too).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use pen::assembler::{assemble, build_vocab, DemoOrder, RegionLayout};
use pen::corpus::{generate_synthetic, DemonstrationPool, Label, MemeRecord, SyntheticSpec};
use pen::encoder::TinyEncoder;
use pen::eval::{
    assemble_with_demos, compute_metrics, evaluate, majority_baseline_accuracy,
};
use pen::model::{HeadConfig, PenModel};
use pen::oracle;
use pen::pcl::{
    cross_entropy, l1_category_contrastive, l2_prompt_contrastive, total_loss, Formulation,
    LossConfig,
};
use pen::pmp::{gate_fuse, GateRefs, ViewSet};
use pen::tensor::{Graph, Scalar};
use pen::trainer::{ablate, save_model, train, AblationVariant, DemoSampling, TrainerConfig};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} - {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rec(id: &str, text: &str, label: Label) -> MemeRecord {
    MemeRecord { id: id.into(), text: text.into(), caption: String::new(), knowledge: Vec::new(), label }
}

struct Bundle {
    train: Vec<MemeRecord>,
    test: Vec<MemeRecord>,
    vocab: pen::assembler::Vocabulary,
    layout: RegionLayout,
    pool: DemonstrationPool,
}

fn synthetic_bundle(spec: &SyntheticSpec, layout: RegionLayout) -> Bundle {
    let (train, test) = generate_synthetic(spec).unwrap();
    let vocab = build_vocab(&train, 1);
    let pool = DemonstrationPool::from_records(&train).unwrap();
    Bundle { train, test, vocab, layout, pool }
}

fn small_layout() -> RegionLayout {
    RegionLayout { len_infer: 8, len_demo: 4, len_prompt: 3, demo_order: DemoOrder::NegFirst }
}

fn tiny_model<F: Scalar>(
    b: &Bundle,
    dim: usize,
    mixing: bool,
    head: HeadConfig,
    seed: u64,
) -> PenModel<F> {
    let enc = TinyEncoder::new(b.vocab.len(), dim, b.layout.total_len(), mixing);
    PenModel::new(Box::new(enc), head, seed).unwrap()
}

/// The full three-term training loss of one batch, as a scalar.
fn full_loss<F: Scalar>(
    g: &mut Graph<F>,
    model: &PenModel<F>,
    batch: &[pen::assembler::AssembledSequence],
    cfg: &LossConfig,
) -> (pen::model::ForwardPass, pen::tensor::TensorRef) {
    let fp = model.forward(g, batch).unwrap();
    let golds = fp.gold_labels().unwrap();
    let ce = cross_entropy(g, &fp.s_alls(), &golds).unwrap();
    let l1 = l1_category_contrastive(g, &fp.masks(), &golds, cfg.tau1, cfg.formulation).unwrap();
    let l2 = l2_prompt_contrastive(
        g,
        &fp.masks(),
        &fp.neg_specials(),
        &fp.pos_specials(),
        &golds,
        cfg.tau2,
        cfg.formulation,
        cfg.stop_demo_grad,
    )
    .unwrap();
    let (total, _) = total_loss(g, ce, l1, l2, cfg).unwrap();
    (fp, total)
}

#[test]
fn criterion_1_gradient_fidelity() {
    let layout =
        RegionLayout { len_infer: 5, len_demo: 3, len_prompt: 3, demo_order: DemoOrder::NegFirst };
    let spec = SyntheticSpec { n_train: 8, n_test: 2, vocab_size: 12, ..Default::default() };
    let b = synthetic_bundle(&spec, layout);
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let batch = assemble_with_demos(&b.train[..2], &b.pool, &b.layout, &b.vocab, &mut rng).unwrap();
    let loss_cfg = LossConfig::default();
    let head = HeadConfig::default();
    let model: PenModel<f64> = tiny_model(&b, 5, true, head, 17);
    let n_params = model.store.total_len();

    let mut g: Graph<f64> = Graph::new();
    let (fp, total) = full_loss(&mut g, &model, &batch, &loss_cfg);
    g.backward(total).unwrap();
    let analytic: Vec<f64> = model
        .store
        .entries()
        .iter()
        .flat_map(|e| g.grad(fp.bindings.get(&e.name)).to_vec())
        .collect();

    let mut store = model.store.clone();
    let numeric = oracle::finite_difference(&mut store, 1e-5, |s| {
        let mut m: PenModel<f64> = tiny_model(&b, 5, true, head, 17);
        m.store = s.clone();
        let mut g: Graph<f64> = Graph::new();
        let (_, total) = full_loss(&mut g, &m, &batch, &loss_cfg);
        Ok(g.scalar_value(total))
    })
    .unwrap();
    let err = oracle::max_relative_error(&analytic, &numeric, 1e-4);
    report(
        1,
        "gradient fidelity",
        n_params >= 1000 && err < 1e-4,
        &format!("max relative error {err:.3e} over {n_params} parameters"),
    );
}

#[test]
fn criterion_2_loss_oracle_equivalence() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let m = rng.gen_range(2..=32usize);
        let d = rng.gen_range(2..=64usize);
        let tau = rng.gen_range(0.1..1.0);
        let formulation =
            if trial % 2 == 0 { Formulation::InfoNce } else { Formulation::LiteralRatio };
        let masks: Vec<Vec<f64>> =
            (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let negs: Vec<Vec<f64>> =
            (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let poss: Vec<Vec<f64>> =
            (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<Label> = (0..m)
            .map(|_| if rng.gen_bool(0.5) { Label::Hateful } else { Label::NonHateful })
            .collect();

        let mut g: Graph<f64> = Graph::new();
        let gm: Vec<_> = masks.iter().map(|v| g.constant(&[d], v.clone())).collect();
        let gn: Vec<_> = negs.iter().map(|v| g.constant(&[d], v.clone())).collect();
        let gp: Vec<_> = poss.iter().map(|v| g.constant(&[d], v.clone())).collect();
        let l1 = l1_category_contrastive(&mut g, &gm, &labels, tau, formulation).unwrap();
        let l2 =
            l2_prompt_contrastive(&mut g, &gm, &gn, &gp, &labels, tau, formulation, false).unwrap();
        let e1 = (g.scalar_value(l1) - oracle::naive_l1(&masks, &labels, tau, formulation).unwrap()).abs();
        let e2 = (g.scalar_value(l2)
            - oracle::naive_l2(&masks, &negs, &poss, &labels, tau, formulation).unwrap())
        .abs();
        worst = worst.max(e1).max(e2);
    }
    report(
        2,
        "loss oracle equivalence",
        worst < 1e-6,
        &format!("worst |graph - naive| = {worst:.3e} over 100 batches"),
    );
}

#[test]
fn criterion_3_analytic_loss_values() {
    let mut g: Graph<f64> = Graph::new();
    // Single-label batch: the category loss vanishes exactly.
    let masks = [
        g.constant(&[3], vec![0.4, -1.0, 2.0]),
        g.constant(&[3], vec![1.0, 0.0, 0.5]),
        g.constant(&[3], vec![-0.2, 0.3, 0.9]),
    ];
    let l1_same = l1_category_contrastive(
        &mut g,
        &masks,
        &[Label::NonHateful; 3],
        0.3,
        Formulation::InfoNce,
    )
    .unwrap();
    let v_same = g.scalar_value(l1_same);

    // Two orthogonal unit vectors, different labels, tau = 1.
    let pair = [g.constant(&[2], vec![1.0, 0.0]), g.constant(&[2], vec![0.0, 1.0])];
    let l1_orth = l1_category_contrastive(
        &mut g,
        &pair,
        &[Label::Hateful, Label::NonHateful],
        1.0,
        Formulation::InfoNce,
    )
    .unwrap();
    let v_orth = g.scalar_value(l1_orth);

    // Equal scores give cross-entropy ln 2.
    let z = g.constant(&[2], vec![0.0, 0.0]);
    let ce = cross_entropy(&mut g, &[z], &[Label::Hateful]).unwrap();
    let v_ce = g.scalar_value(ce);

    let ok = v_same == 0.0
        && (v_orth - 0.3133).abs() < 1e-4
        && (v_ce - std::f64::consts::LN_2).abs() < 1e-9;
    report(
        3,
        "analytic loss values",
        ok,
        &format!("single-label L1 = {v_same}, orthogonal-pair L1 = {v_orth:.6}, flat CE = {v_ce:.12}"),
    );
}

#[test]
fn criterion_4_structural_invariants() {
    // (a) Fixed offsets across 1000 random records.
    let layout = small_layout();
    let expected = layout.offsets().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let pieces = ["alpha", "beta", "gamma", "x", "punch", "!", "?", "me", "you", "sig"];
    let mut records = Vec::with_capacity(1000);
    for i in 0..1000 {
        let len = rng.gen_range(1..30);
        let text: Vec<&str> = (0..len).map(|_| pieces[rng.gen_range(0..pieces.len())]).collect();
        let label = if rng.gen_bool(0.5) { Label::Hateful } else { Label::NonHateful };
        records.push(rec(&format!("r{i}"), &text.join(" "), label));
    }
    let vocab = build_vocab(&records, 1);
    let demo_neg = rec("dn", "alpha beta", Label::Hateful);
    let demo_pos = rec("dp", "gamma x", Label::NonHateful);
    let mut offsets_ok = true;
    for r in &records {
        let seq = assemble(r, &demo_neg, &demo_pos, &layout, &vocab).unwrap();
        offsets_ok &= seq.offsets == expected
            && seq.token_ids[expected.start_pos] == vocab.start_id
            && seq.token_ids[expected.mask_pos] == vocab.mask_id
            && seq.token_ids[expected.neg_label_pos] == vocab.neg_label_id
            && seq.token_ids[expected.pos_label_pos] == vocab.pos_label_id
            && expected.sep_positions.iter().all(|&p| seq.token_ids[p] == vocab.sep_id);
    }

    // (b) S_all additivity over all 15 non-empty view subsets.
    let spec = SyntheticSpec { n_train: 8, n_test: 2, vocab_size: 12, ..Default::default() };
    let b = synthetic_bundle(&spec, layout);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let batch = assemble_with_demos(&b.train[..1], &b.pool, &b.layout, &b.vocab, &mut rng).unwrap();
    let full: PenModel<f64> = tiny_model(&b, 6, false, HeadConfig::default(), 5);
    let mut g = Graph::new();
    let fp = full.forward(&mut g, &batch).unwrap();
    let per_view: Vec<[f64; 2]> = fp.bundles[0]
        .scores
        .iter()
        .map(|s| {
            let v = g.value(s.unwrap());
            [v[0], v[1]]
        })
        .collect();
    let mut additivity_ok = true;
    for bits in 1u32..16 {
        let views = ViewSet {
            s1: bits & 1 != 0,
            s2: bits & 2 != 0,
            s3: bits & 4 != 0,
            s4: bits & 8 != 0,
        };
        let head = HeadConfig { views, ..Default::default() };
        let sub: PenModel<f64> = tiny_model(&b, 6, false, head, 5);
        let mut g2 = Graph::new();
        let fp2 = sub.forward(&mut g2, &batch).unwrap();
        let got = PenModel::s_all_values(&g2, &fp2.bundles[0]);
        let mut want = [0.0f64; 2];
        for (k, enabled) in [views.s1, views.s2, views.s3, views.s4].into_iter().enumerate() {
            if enabled {
                want[0] += per_view[k][0];
                want[1] += per_view[k][1];
            }
        }
        additivity_ok &= (got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6;
    }

    // (c) Gate output is an elementwise convex combination, 1000 draws.
    let mut gate_ok = true;
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let d = 4;
        let mut g: Graph<f64> = Graph::new();
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let i0 = g.constant(&[d], a.clone());
        let i1 = g.constant(&[d], c.clone());
        let gate = GateRefs {
            w: g.constant(&[2 * d, d], (0..2 * d * d).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            b: g.constant(&[d], (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()),
        };
        let fused = gate_fuse(&mut g, i0, i1, &gate).unwrap();
        for (k, v) in g.value(fused).iter().enumerate() {
            let lo = a[k].min(c[k]) - 1e-9;
            let hi = a[k].max(c[k]) + 1e-9;
            gate_ok &= (lo..=hi).contains(v);
        }
    }

    // (d) With only the first view enabled, the perception networks get
    // no gradient at all.
    let s1_only = HeadConfig { views: ViewSet::only_s1(), ..Default::default() };
    let m: PenModel<f64> = tiny_model(&b, 6, false, s1_only, 5);
    let batch2 =
        assemble_with_demos(&b.train[..2], &b.pool, &b.layout, &b.vocab, &mut rng).unwrap();
    let mut g = Graph::new();
    let (fp, total) = full_loss(&mut g, &m, &batch2, &LossConfig::default());
    g.backward(total).unwrap();
    let mut isolation_ok = true;
    for e in m.store.entries() {
        let grad_zero = g.grad(fp.bindings.get(&e.name)).iter().all(|&v| v == 0.0);
        if e.name.starts_with("pmp.hpn")
            || e.name.starts_with("pmp.nhpn")
            || e.name.starts_with("pmp.gate")
        {
            isolation_ok &= grad_zero;
        }
    }

    report(
        4,
        "structural invariants",
        offsets_ok && additivity_ok && gate_ok && isolation_ok,
        &format!(
            "offsets {offsets_ok}, additivity over 15 subsets {additivity_ok}, gate convexity {gate_ok}, perception isolation {isolation_ok}"
        ),
    );
}

fn separability_setup() -> Bundle {
    let spec = SyntheticSpec { n_train: 400, n_test: 100, noise_rate: 0.0, seed: 0, ..Default::default() };
    synthetic_bundle(&spec, small_layout())
}

fn separability_trainer(seed: u64) -> TrainerConfig {
    TrainerConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 0.01,
        seed,
        demo_sampling: DemoSampling::PerEpoch,
        shuffle: true,
    }
}

#[test]
fn criterion_5_synthetic_separability() {
    let b = separability_setup();
    let mut model: PenModel<f32> = tiny_model(&b, 32, true, HeadConfig::default(), 0);
    train(
        &mut model,
        &b.train,
        &b.pool,
        &b.layout,
        &b.vocab,
        &LossConfig::default(),
        &separability_trainer(0),
        None,
    )
    .unwrap();
    let (metrics, _) = evaluate(&model, &b.test, &b.pool, &b.layout, &b.vocab, 0).unwrap();
    report(
        5,
        "synthetic separability",
        metrics.accuracy >= 0.95 && metrics.macro_f1 >= 0.95,
        &format!("accuracy {:.4}, macro-F1 {:.4} after 20 epochs", metrics.accuracy, metrics.macro_f1),
    );
}

#[test]
fn criterion_6_ablation_ordering() {
    let spec = SyntheticSpec { n_train: 400, n_test: 100, noise_rate: 0.15, seed: 0, ..Default::default() };
    let b = synthetic_bundle(&spec, small_layout());
    let tcfg = TrainerConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.005,
        seed: 0,
        demo_sampling: DemoSampling::PerEpoch,
        shuffle: true,
    };
    let make = |head: HeadConfig, seed: u64| -> pen::Result<PenModel<f32>> {
        Ok(tiny_model(&b, 16, true, head, seed))
    };
    let rows = ablate(
        &[AblationVariant::Full, AblationVariant::WoS2S3S4],
        &[0, 1, 2, 3, 4],
        &make,
        HeadConfig::default(),
        LossConfig::default(),
        &tcfg,
        &b.train,
        &b.test,
        &b.pool,
        &b.layout,
        &b.vocab,
        None,
    )
    .unwrap();
    let full = rows[0].mean_macro_f1;
    let wo = rows[1].mean_macro_f1;
    report(
        6,
        "ablation ordering",
        full >= wo,
        &format!("mean macro-F1 over 5 seeds: full {full:.4} vs wo_s2s3s4 {wo:.4} (gap {:+.4})", full - wo),
    );
}

fn clustering_gap(model: &PenModel<f32>, b: &Bundle) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let assembled =
        assemble_with_demos(&b.test, &b.pool, &b.layout, &b.vocab, &mut rng).unwrap();
    let mut vecs: Vec<(Vec<f64>, Label)> = Vec::new();
    for chunk in assembled.chunks(16) {
        let mut g: Graph<f32> = Graph::new();
        let fp = model.forward(&mut g, chunk).unwrap();
        for (i, bundle) in fp.bundles.iter().enumerate() {
            let v: Vec<f64> =
                g.value(bundle.t_special_infer).iter().map(|x| *x as f64).collect();
            vecs.push((v, fp.labels[i].unwrap()));
        }
    }
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let c = oracle::cosine(&vecs[i].0, &vecs[j].0);
            if vecs[i].1 == vecs[j].1 {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64
}

#[test]
fn criterion_7_contrastive_clustering() {
    let b = separability_setup();
    let mut gaps = [0.0f64; 2];
    for (k, alpha_beta) in [0.1, 0.0].into_iter().enumerate() {
        let mut model: PenModel<f32> = tiny_model(&b, 32, true, HeadConfig::default(), 0);
        let loss = LossConfig { alpha: alpha_beta, beta: alpha_beta, ..Default::default() };
        train(
            &mut model,
            &b.train,
            &b.pool,
            &b.layout,
            &b.vocab,
            &loss,
            &separability_trainer(0),
            None,
        )
        .unwrap();
        gaps[k] = clustering_gap(&model, &b);
    }
    report(
        7,
        "contrastive clustering",
        gaps[0] >= 0.1 && gaps[1] < gaps[0],
        &format!("intra-inter cosine gap {:.4} with the contrastive terms, {:.4} without", gaps[0], gaps[1]),
    );
}

#[test]
fn criterion_8_determinism() {
    let spec = SyntheticSpec { n_train: 60, n_test: 20, vocab_size: 20, seed: 3, ..Default::default() };
    let b = synthetic_bundle(&spec, small_layout());
    let tcfg = TrainerConfig { epochs: 5, batch_size: 8, learning_rate: 0.01, seed: 9, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts: Vec<(Vec<u8>, String)> = Vec::new();
    for run in 0..2 {
        let mut model: PenModel<f32> = tiny_model(&b, 12, true, HeadConfig::default(), 9);
        train(&mut model, &b.train, &b.pool, &b.layout, &b.vocab, &LossConfig::default(), &tcfg, None)
            .unwrap();
        let path = dir.path().join(format!("run{run}.penw"));
        save_model(&model, &path).unwrap();
        let (metrics, _) = evaluate(&model, &b.test, &b.pool, &b.layout, &b.vocab, 9).unwrap();
        artifacts.push((std::fs::read(&path).unwrap(), serde_json::to_string(&metrics).unwrap()));
    }
    let bytes_equal = artifacts[0].0 == artifacts[1].0;
    let metrics_equal = artifacts[0].1 == artifacts[1].1;
    report(
        8,
        "determinism",
        bytes_equal && metrics_equal,
        &format!(
            "checkpoints byte-identical: {bytes_equal} ({} bytes), metrics identical: {metrics_equal}",
            artifacts[0].0.len()
        ),
    );
}

#[test]
fn criterion_9_metric_correctness() {
    // Hand-built confusion case: tp=4, fp=2, fn=1, tn=3.
    let mut pairs = Vec::new();
    pairs.extend(std::iter::repeat_n((Label::Hateful, Label::Hateful), 4));
    pairs.extend(std::iter::repeat_n((Label::NonHateful, Label::Hateful), 2));
    pairs.extend(std::iter::repeat_n((Label::Hateful, Label::NonHateful), 1));
    pairs.extend(std::iter::repeat_n((Label::NonHateful, Label::NonHateful), 3));
    let m = compute_metrics(&pairs).unwrap();
    let hand_ok = (m.accuracy - 0.7).abs() < 1e-12
        && (m.f1 - 8.0 / 11.0).abs() < 1e-12
        && (m.macro_f1 - 0.5 * (8.0 / 11.0 + 2.0 / 3.0)).abs() < 1e-12;

    // Majority baseline on a 124-hateful / 230-non-hateful test split.
    let mut records = Vec::new();
    for i in 0..354 {
        let label = if i < 124 { Label::Hateful } else { Label::NonHateful };
        records.push(rec(&format!("h{i}"), "text", label));
    }
    let acc = majority_baseline_accuracy(&records).unwrap();
    let majority_ok = (acc - 0.6497).abs() < 1e-4;
    report(
        9,
        "metric correctness",
        hand_ok && majority_ok,
        &format!("hand confusion ok: {hand_ok}, majority baseline {acc:.4}"),
    );
}
