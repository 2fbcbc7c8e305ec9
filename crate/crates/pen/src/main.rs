use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use pen::assembler::{build_vocab, RegionLayout, Vocabulary};
use pen::config::{load_config, EncoderKind, Precision, RunConfig};
use pen::corpus::{
    generate_synthetic, load_corpus, DemonstrationPool, Label, MemeRecord,
};
use pen::encoder::{FileEncoder, SequenceEncoder, TinyEncoder};
use pen::error::{PenError, Result};
use pen::eval::{assemble_with_demos, evaluate, export_features};
use pen::model::{HeadConfig, PenModel};
use pen::oracle;
use pen::params::ParamStore;
use pen::pcl::{
    cross_entropy, l1_category_contrastive, l2_prompt_contrastive, total_loss, Formulation,
    LossConfig,
};
use pen::tensor::checkpoint::load_checkpoint_file;
use pen::tensor::lstm::{lstm_forward_matrix, LstmRefs};
use pen::tensor::{Graph, Scalar};
use pen::trainer::{ablate, save_model, train, AblationVariant};

#[derive(Parser)]
#[command(name = "pen", version, about = "Prompt-based hateful meme classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set trainer.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the training and evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble prompt sequences and print one line per sample.
    Assemble {
        #[command(flatten)]
        common: CommonArgs,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and optionally write a run directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Run directory for the checkpoint and config snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate on the test split and print metrics as JSON.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model weights to load; fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate the ablation grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated variants (default: every variant).
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated training seeds (default: 0,1,2,3,4).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write per-sample head features as tab-separated values.
    ExportFeatures {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check the fast paths against reference implementations.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::OracleCheck { seed } = cli.cmd { return oracle_check(seed) }
    let common = match &cli.cmd {
        Command::Assemble { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Ablate { common, .. }
        | Command::ExportFeatures { common, .. } => common,
        Command::OracleCheck { .. } => unreachable!(),
    };
    let mut cfg = load_config(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
        cfg.eval_seed = seed;
    }
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cli.cmd, &cfg),
        Precision::F64 => dispatch::<f64>(&cli.cmd, &cfg),
    }
}

struct DataBundle {
    train: Vec<MemeRecord>,
    test: Vec<MemeRecord>,
    vocab: Vocabulary,
    layout: RegionLayout,
    pool: DemonstrationPool,
}

fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let (train, test) = if let Some(spec) = &cfg.corpus.synthetic {
        generate_synthetic(spec)?
    } else {
        let train_path = cfg.corpus.train_path.as_ref().expect("validated");
        let (train, _) = load_corpus(train_path, &cfg.corpus.schema)?;
        let test = match &cfg.corpus.test_path {
            Some(p) => load_corpus(p, &cfg.corpus.schema)?.0,
            None => Vec::new(),
        };
        (train, test)
    };
    if train.is_empty() {
        return Err(PenError::Invalid("training corpus is empty".into()));
    }
    let vocab = build_vocab(&train, cfg.corpus.min_freq);
    let layout = cfg.layout;
    layout.validate()?;
    let mut pool = DemonstrationPool::from_records(&train)?;
    if cfg.corpus.demo_pool_limit > 0 {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.trainer.seed);
        pool = pool.restricted(cfg.corpus.demo_pool_limit, &mut rng)?;
    }
    Ok(DataBundle { train, test, vocab, layout, pool })
}

fn make_encoder<F: Scalar>(
    cfg: &RunConfig,
    vocab_len: usize,
    n: usize,
) -> Result<Box<dyn SequenceEncoder<F>>> {
    match cfg.encoder.kind {
        EncoderKind::Tiny => Ok(Box::new(TinyEncoder::new(
            vocab_len,
            cfg.encoder.dim,
            n,
            cfg.encoder.context_mixing,
        ))),
        EncoderKind::File => {
            let path = cfg.encoder.archive_path.as_ref().expect("validated");
            Ok(Box::new(FileEncoder::open(path)?))
        }
    }
}

fn build_model<F: Scalar>(
    cfg: &RunConfig,
    data: &DataBundle,
    head: HeadConfig,
    seed: u64,
) -> Result<PenModel<F>> {
    let enc = make_encoder::<F>(cfg, data.vocab.len(), data.layout.total_len())?;
    PenModel::new(enc, head, seed)
}

fn maybe_load<F: Scalar>(model: &mut PenModel<F>, checkpoint: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = checkpoint {
        model.store.load_named_tensors(&load_checkpoint_file(path)?)?;
    }
    Ok(())
}

fn truncated(records: &[MemeRecord], limit: Option<usize>) -> &[MemeRecord] {
    match limit {
        Some(n) => &records[..n.min(records.len())],
        None => records,
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => Ok(Box::new(std::fs::File::create(p).map_err(|e| PenError::io(p, e))?)),
        None => Ok(Box::new(std::io::stdout())),
    }
}

fn parse_seeds(raw: &Option<String>) -> Result<Vec<u64>> {
    match raw {
        None => Ok(vec![0, 1, 2, 3, 4]),
        Some(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|_| PenError::Config(format!("bad seed {p:?}")))
            })
            .collect(),
    }
}

fn parse_grid(raw: &Option<String>) -> Result<Vec<AblationVariant>> {
    match raw {
        None => Ok(AblationVariant::ALL.to_vec()),
        Some(s) => s.split(',').map(|p| AblationVariant::parse(p.trim())).collect(),
    }
}

fn dispatch<F: Scalar>(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let head = cfg.head.to_head_config()?;
    match cmd {
        Command::Assemble { limit, out, .. } => {
            let data = load_data(cfg)?;
            let records = truncated(&data.train, *limit);
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.trainer.seed);
            let assembled =
                assemble_with_demos(records, &data.pool, &data.layout, &data.vocab, &mut rng)?;
            let mut out = open_out(out)?;
            for seq in &assembled {
                writeln!(out, "{}", seq.dump_line())
                    .map_err(|e| PenError::Invalid(format!("write failed: {e}")))?;
            }
            Ok(())
        }
        Command::Train { out, .. } => {
            let data = load_data(cfg)?;
            let mut model = build_model::<F>(cfg, &data, head, cfg.trainer.seed)?;
            let stdout = std::io::stdout();
            train(
                &mut model,
                &data.train,
                &data.pool,
                &data.layout,
                &data.vocab,
                &cfg.loss,
                &cfg.trainer,
                Some(&mut stdout.lock()),
            )?;
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).map_err(|e| PenError::io(dir, e))?;
                save_model(&model, &dir.join("model.penw"))?;
                std::fs::write(dir.join("config.toml"), cfg.snapshot()?)
                    .map_err(|e| PenError::io(dir.join("config.toml"), e))?;
            }
            if !data.test.is_empty() {
                let (metrics, _) = evaluate(
                    &model,
                    &data.test,
                    &data.pool,
                    &data.layout,
                    &data.vocab,
                    cfg.eval_seed,
                )?;
                println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
            }
            Ok(())
        }
        Command::Eval { checkpoint, limit, .. } => {
            let data = load_data(cfg)?;
            let test = truncated(&data.test, *limit);
            if test.is_empty() {
                return Err(PenError::Invalid("no test records to evaluate".into()));
            }
            let mut model = build_model::<F>(cfg, &data, head, cfg.trainer.seed)?;
            maybe_load(&mut model, checkpoint)?;
            let (metrics, _) =
                evaluate(&model, test, &data.pool, &data.layout, &data.vocab, cfg.eval_seed)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            Ok(())
        }
        Command::Ablate { grid, seeds, .. } => {
            let data = load_data(cfg)?;
            if data.test.is_empty() {
                return Err(PenError::Invalid("ablation needs a test split".into()));
            }
            let variants = parse_grid(grid)?;
            let seeds = parse_seeds(seeds)?;
            let make = |head: HeadConfig, seed: u64| build_model::<F>(cfg, &data, head, seed);
            let stdout = std::io::stdout();
            let rows = ablate(
                &variants,
                &seeds,
                &make,
                head,
                cfg.loss,
                &cfg.trainer,
                &data.train,
                &data.test,
                &data.pool,
                &data.layout,
                &data.vocab,
                Some(&mut stdout.lock()),
            )?;
            println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
            Ok(())
        }
        Command::ExportFeatures { checkpoint, limit, out, .. } => {
            let data = load_data(cfg)?;
            let records = truncated(&data.train, *limit);
            let mut model = build_model::<F>(cfg, &data, head, cfg.trainer.seed)?;
            maybe_load(&mut model, checkpoint)?;
            let out = open_out(out)?;
            export_features(
                &model,
                records,
                &data.pool,
                &data.layout,
                &data.vocab,
                cfg.eval_seed,
                out,
            )
        }
        Command::OracleCheck { .. } => unreachable!("handled before precision dispatch"),
    }
}

// ── oracle-check ────────────────────────────────────────────────────────

fn check(name: &str, ok: bool, detail: String) -> Result<()> {
    if ok {
        println!("ok: {name}");
        Ok(())
    } else {
        Err(PenError::Invalid(format!("oracle check {name} failed: {detail}")))
    }
}

fn oracle_check(seed: u64) -> Result<()> {
    check_offsets()?;
    check_contrastive_losses(seed)?;
    check_lstm(seed)?;
    check_gradients(seed)?;
    println!("all oracle checks passed");
    Ok(())
}

fn check_offsets() -> Result<()> {
    use pen::assembler::DemoOrder;
    for (li, ld) in [(12usize, 6usize), (6, 4), (192, 64)] {
        let layout =
            RegionLayout { len_infer: li, len_demo: ld, len_prompt: 3, demo_order: DemoOrder::NegFirst };
        let offsets = layout.offsets()?;
        let roles = oracle::role_walk(li, ld, 3);
        let ok = offsets.total_len == roles.len()
            && oracle::position_of(&roles, oracle::Role::Mask) == Some(offsets.mask_pos)
            && oracle::position_of(&roles, oracle::Role::NegLabel) == Some(offsets.neg_label_pos)
            && oracle::position_of(&roles, oracle::Role::PosLabel) == Some(offsets.pos_label_pos);
        check(
            &format!("layout offsets ({li}/{ld})"),
            ok,
            format!("arithmetic {offsets:?} disagrees with the role walk"),
        )?;
    }
    Ok(())
}

fn random_vecs(rng: &mut ChaCha20Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn check_contrastive_losses(seed: u64) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    for formulation in [Formulation::InfoNce, Formulation::LiteralRatio] {
        for trial in 0..10 {
            let m = rng.gen_range(2..7);
            let d = rng.gen_range(2..9);
            let masks = random_vecs(&mut rng, m, d);
            let negs = random_vecs(&mut rng, m, d);
            let poss = random_vecs(&mut rng, m, d);
            let labels: Vec<Label> = (0..m)
                .map(|_| if rng.gen_bool(0.5) { Label::Hateful } else { Label::NonHateful })
                .collect();
            let tau = rng.gen_range(0.1..1.0);

            let mut g: Graph<f64> = Graph::new();
            let mk = |g: &mut Graph<f64>, vs: &[Vec<f64>]| -> Vec<_> {
                vs.iter().map(|v| g.constant(&[v.len()], v.clone())).collect()
            };
            let gm = mk(&mut g, &masks);
            let gn = mk(&mut g, &negs);
            let gp = mk(&mut g, &poss);
            let l1 = l1_category_contrastive(&mut g, &gm, &labels, tau, formulation)?;
            let l2 =
                l2_prompt_contrastive(&mut g, &gm, &gn, &gp, &labels, tau, formulation, false)?;
            let l1v = g.scalar_value(l1);
            let l2v = g.scalar_value(l2);
            let n1 = oracle::naive_l1(&masks, &labels, tau, formulation)?;
            let n2 = oracle::naive_l2(&masks, &negs, &poss, &labels, tau, formulation)?;
            check(
                &format!("contrastive losses ({formulation:?} trial {trial})"),
                (l1v - n1).abs() < 1e-9 && (l2v - n2).abs() < 1e-9,
                format!("graph ({l1v}, {l2v}) vs naive ({n1}, {n2})"),
            )?;
        }
    }
    Ok(())
}

fn check_lstm(seed: u64) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(2));
    for trial in 0..5 {
        let d_in = rng.gen_range(2..5);
        let hidden = rng.gen_range(2..5);
        let t = rng.gen_range(1..6);
        let real = rng.gen_range(0..=t);
        let xs = random_vecs(&mut rng, t, d_in);
        let wx: Vec<f64> = (0..d_in * 4 * hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wh: Vec<f64> = (0..hidden * 4 * hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..4 * hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let mut g: Graph<f64> = Graph::new();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let x = g.constant(&[t, d_in], flat);
        let refs = LstmRefs {
            wx: g.constant(&[d_in, 4 * hidden], wx.clone()),
            wh: g.constant(&[hidden, 4 * hidden], wh.clone()),
            b: g.constant(&[4 * hidden], b.clone()),
            hidden,
        };
        let h = lstm_forward_matrix(&mut g, x, &refs, real)?;
        let got = g.value(h).to_vec();
        let want = oracle::naive_lstm(&xs, &wx, &wh, &b, d_in, hidden, real)?;
        let ok = got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9);
        check(
            &format!("regional lstm (trial {trial})"),
            ok,
            format!("graph {got:?} vs scalar loop {want:?}"),
        )?;
    }
    Ok(())
}

/// Full-model gradient fidelity on a small instance, in f64.
fn check_gradients(seed: u64) -> Result<()> {
    use pen::assembler::DemoOrder;
    use pen::corpus::SyntheticSpec;

    let spec = SyntheticSpec {
        n_train: 8,
        n_test: 2,
        vocab_size: 12,
        noise_rate: 0.0,
        seed,
        ..Default::default()
    };
    let (train, _) = generate_synthetic(&spec)?;
    let vocab = build_vocab(&train, 1);
    let layout =
        RegionLayout { len_infer: 4, len_demo: 3, len_prompt: 3, demo_order: DemoOrder::NegFirst };
    let pool = DemonstrationPool::from_records(&train)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(3));
    let batch = assemble_with_demos(&train[..2], &pool, &layout, &vocab, &mut rng)?;

    let head = HeadConfig::default();
    let n = layout.total_len();
    let d = 4;
    let mk = || -> Result<PenModel<f64>> {
        PenModel::new(Box::new(TinyEncoder::new(vocab.len(), d, n, false)), head, seed)
    };
    let model = mk()?;
    let loss_cfg = LossConfig::default();

    let loss_of = |store: &ParamStore<f64>| -> Result<f64> {
        let mut m = mk()?;
        m.store = store.clone();
        let mut g: Graph<f64> = Graph::new();
        let fp = m.forward(&mut g, &batch)?;
        let golds = fp.gold_labels()?;
        let ce = cross_entropy(&mut g, &fp.s_alls(), &golds)?;
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
        let (total, _) = total_loss(&mut g, ce, l1, l2, &loss_cfg)?;
        Ok(g.scalar_value(total))
    };

    // Analytic gradients.
    let mut g: Graph<f64> = Graph::new();
    let fp = model.forward(&mut g, &batch)?;
    let golds = fp.gold_labels()?;
    let ce = cross_entropy(&mut g, &fp.s_alls(), &golds)?;
    let l1 =
        l1_category_contrastive(&mut g, &fp.masks(), &golds, loss_cfg.tau1, loss_cfg.formulation)?;
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
    let (total, _) = total_loss(&mut g, ce, l1, l2, &loss_cfg)?;
    g.backward(total)?;
    let analytic: Vec<f64> = model
        .store
        .entries()
        .iter()
        .flat_map(|e| g.grad(fp.bindings.get(&e.name)).to_vec())
        .collect();

    let mut store = model.store.clone();
    let numeric = oracle::finite_difference(&mut store, 1e-5, loss_of)?;
    let err = oracle::max_relative_error(&analytic, &numeric, 1e-4);
    check(
        &format!("gradient fidelity ({} params)", analytic.len()),
        err < 1e-4,
        format!("max relative error {err}"),
    )
}
