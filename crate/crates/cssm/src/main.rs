//! Command-line entry point: dataset synthesis, training, evaluation,
//! ablations, robustness sweeps, scan benchmarking, accounting, saliency.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use cssm::checkpoint::{self, Checkpoint, TensorEntry};
use cssm::data::{
    degrade, sample_seed, Dataset, DatasetSpec, DegradeKind, DegradeSpec, Difficulty, LoadedSample,
};
use cssm::imageio::{self, Image};
use cssm::metrics::{metrics_csv_rows, METRICS_CSV_HEADER};
use cssm::network::{count_flops, count_params, Model, ModelConfig, Variant};
use cssm::ssm::GateMetric;
use cssm::optim::Adam;
use cssm::rng::CounterRng;
use cssm::ssm::{linear_scan_parallel, linear_scan_sequential, ScanImpl};
use cssm::train::{self, TrainConfig, TrainError, TrainState, TRAIN_LOG_HEADER};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "cssm", version, about = "Bi-temporal change detection with a dual-input selective state-space model")]
struct Cli {
    /// Global seed; overrides the model seed from --config.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Dataset root directory (written by `dataset`, read by the rest).
    #[arg(long, global = true, default_value = "data")]
    data_root: PathBuf,
    /// Artifact directory; every command writes `config.resolved` here.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Flat `key=value` file overriding ModelConfig defaults (# comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus under --data-root.
    Dataset(DatasetArgs),
    /// Train a model; writes train_log.csv and ckpt/{best,last}.cssm.
    Train(HyperArgs),
    /// Evaluate a checkpoint over a split; appends to metrics.csv.
    Eval(EvalArgs),
    /// Train ablation arms under identical config; appends to ablation.csv.
    Ablate(AblateArgs),
    /// Time the scan implementations across sequence lengths.
    Bench(BenchArgs),
    /// Exact parameter and FLOP accounting for the resolved config.
    Count(CountArgs),
    /// Export a gradient×activation saliency heatmap for one sample.
    Saliency(SaliencyArgs),
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 128)]
    val: usize,
    #[arg(long, default_value_t = 128)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// easy | hard
    #[arg(long, default_value = "easy")]
    difficulty: String,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// StepLR decay factor.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Epochs between StepLR decays.
    #[arg(long, default_value_t = 10)]
    step_every: usize,
    /// sequential | parallel
    #[arg(long, default_value = "sequential")]
    scan: String,
    /// Resume from this checkpoint (train only).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to <out-dir>/ckpt/best.cssm.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// kind:level, e.g. gaussian_blur:1.5 or gaussian_noise:0.05.
    #[arg(long)]
    degrade: Option<String>,
    /// Evaluate the full degradation grid (all kinds × all levels).
    #[arg(long)]
    sweep: bool,
    /// Write colored change maps to <out-dir>/maps/.
    #[arg(long)]
    emit_maps: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// L:<0..8> | conv_substitute | metric:<L1|L2|Chebyshev|Cosine>; repeatable.
    #[arg(long, required = true)]
    arm: Vec<String>,
    /// Seeds per arm (rows report each seed).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "256,1024,4096,16384,65536")]
    t_grid: String,
    /// sequential | parallel | both
    #[arg(long = "impl", default_value = "both")]
    impl_name: String,
    /// Recurrence lanes (C·N product) per step.
    #[arg(long, default_value_t = 64)]
    lanes: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    index: usize,
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_model_cfg(cli)?;
    match &cli.cmd {
        Cmd::Dataset(a) => cmd_dataset(cli, &cfg, a),
        Cmd::Train(a) => cmd_train(cli, &cfg, a),
        Cmd::Eval(a) => cmd_eval(cli, &cfg, a),
        Cmd::Ablate(a) => cmd_ablate(cli, &cfg, a),
        Cmd::Bench(a) => cmd_bench(cli, &cfg, a),
        Cmd::Count(a) => cmd_count(cli, &cfg, a),
        Cmd::Saliency(a) => cmd_saliency(cli, &cfg, a),
    }
}

/// ModelConfig defaults ← --config overrides ← --seed.
fn resolve_model_cfg(cli: &Cli) -> Result<ModelConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ModelConfig::from_kv(&text).map_err(CliError::Config)?
        }
        None => ModelConfig::default(),
    };
    cfg.seed = cli.seed;
    Ok(cfg)
}

fn parse_scan(s: &str) -> Result<ScanImpl, CliError> {
    match s {
        "sequential" => Ok(ScanImpl::Sequential),
        "parallel" => Ok(ScanImpl::Parallel { block: 64 }),
        _ => Err(CliError::Config(format!("unknown scan impl: {s}"))),
    }
}

/// Write `config.resolved`: the model kv block plus command-scoped `run.*`
/// keys. Re-running the same command overwrites it identically.
fn write_config_resolved(
    cli: &Cli,
    cfg: &ModelConfig,
    command: &str,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out_dir).map_err(data_err)?;
    let mut text = cfg.to_kv();
    text.push_str(&format!("run.command={command}\n"));
    text.push_str(&format!("run.data_root={}\n", cli.data_root.display()));
    text.push_str(&format!("run.out_dir={}\n", cli.out_dir.display()));
    for (k, v) in extra {
        text.push_str(&format!("run.{k}={v}\n"));
    }
    fs::write(cli.out_dir.join("config.resolved"), text).map_err(data_err)
}

fn hyper_kv(h: &HyperArgs) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", h.epochs.to_string()),
        ("batch_size", h.batch_size.to_string()),
        ("lr", format!("{:e}", h.lr)),
        ("gamma", h.gamma.to_string()),
        ("step_every", h.step_every.to_string()),
        ("scan", h.scan.clone()),
    ]
}

/// Append rows to a CSV, creating it with `header` if absent; an existing
/// file must carry the same header (schema stability).
fn append_csv(path: &Path, header: &str, rows: &str) -> Result<(), CliError> {
    let mut text = match fs::read_to_string(path) {
        Ok(t) => {
            if t.lines().next() != Some(header) {
                return Err(CliError::Data(format!(
                    "{}: header mismatch (expected `{header}`)",
                    path.display()
                )));
            }
            t
        }
        Err(_) => format!("{header}\n"),
    };
    text.push_str(rows);
    fs::write(path, text).map_err(data_err)
}

fn load_split(cli: &Cli, split: &str) -> Result<(Vec<LoadedSample>, usize, usize), CliError> {
    let ds = Dataset::open(&cli.data_root, split)
        .map_err(|e| CliError::Data(format!("split `{split}`: {e}")))?;
    let mut set = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        set.push(ds.load(i).map_err(data_err)?);
    }
    Ok((set, ds.height, ds.width))
}

fn load_checkpoint_model(path: &Path) -> Result<(Model<f32>, Checkpoint), CliError> {
    let ckpt = checkpoint::load(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let cfg = ModelConfig::from_kv(&ckpt.config).map_err(CliError::Config)?;
    let mut model = Model::init(cfg);
    checkpoint::apply_to_model(&mut model, &ckpt.tensors).map_err(config_err)?;
    Ok((model, ckpt))
}

fn ckpt_path(cli: &Cli, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| cli.out_dir.join("ckpt").join("best.cssm"))
}

fn cmd_dataset(cli: &Cli, cfg: &ModelConfig, a: &DatasetArgs) -> Result<(), CliError> {
    let difficulty = Difficulty::parse(&a.difficulty)
        .ok_or_else(|| CliError::Config(format!("unknown difficulty: {}", a.difficulty)))?;
    write_config_resolved(
        cli,
        cfg,
        "dataset",
        &[
            ("counts", format!("{},{},{}", a.train, a.val, a.test)),
            ("extent", format!("{}x{}", a.height, a.width)),
            ("difficulty", difficulty.name().into()),
        ],
    )?;
    let spec = DatasetSpec {
        root: cli.data_root.clone(),
        seed: cli.seed,
        height: a.height,
        width: a.width,
        counts: [a.train, a.val, a.test],
        difficulty,
    };
    cssm::data::write_dataset(&spec).map_err(data_err)?;
    println!(
        "wrote {}+{}+{} samples at {}x{} ({}) under {}",
        a.train,
        a.val,
        a.test,
        a.height,
        a.width,
        difficulty.name(),
        cli.data_root.display()
    );
    Ok(())
}

/// The epoch counter rides in the optimizer table so `--resume` needs only
/// the checkpoint file.
const EPOCH_KEY: &str = "epoch";

fn opt_entries(adam: &Adam<f32>, next_epoch: usize) -> Vec<TensorEntry> {
    let mut entries = adam.to_entries();
    entries.push(TensorEntry {
        name: EPOCH_KEY.into(),
        shape: vec![1],
        data: vec![next_epoch as f32],
    });
    entries
}

fn split_opt_entries(entries: &[TensorEntry]) -> (Vec<TensorEntry>, usize) {
    let mut rest = Vec::new();
    let mut epoch = 0;
    for e in entries {
        if e.name == EPOCH_KEY {
            epoch = e.data.first().copied().unwrap_or(0.0) as usize;
        } else {
            rest.push(e.clone());
        }
    }
    (rest, epoch)
}

fn train_error(e: TrainError) -> CliError {
    CliError::Numeric(e.to_string())
}

fn cmd_train(cli: &Cli, cfg: &ModelConfig, a: &HyperArgs) -> Result<(), CliError> {
    let scan = parse_scan(&a.scan)?;
    write_config_resolved(cli, cfg, "train", &hyper_kv(a))?;
    let (train_set, h, w) = load_split(cli, "train")?;
    let (val_set, vh, vw) = load_split(cli, "val")?;
    if (vh, vw) != (h, w) {
        return Err(CliError::Data("train/val extent mismatch".into()));
    }

    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        gamma: a.gamma,
        step_every: a.step_every,
        seed: cli.seed,
        scan,
    };
    let ckpt_dir = cli.out_dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(data_err)?;
    let log_path = cli.out_dir.join("train_log.csv");

    let (mut model, state) = match &a.resume {
        Some(path) => {
            let (model, ckpt) = load_checkpoint_model(path)?;
            if model.cfg.to_kv() != cfg.to_kv() {
                return Err(CliError::Config(format!(
                    "checkpoint config in {} differs from the resolved config",
                    path.display()
                )));
            }
            let (entries, start_epoch) = split_opt_entries(&ckpt.opt);
            let adam = Adam::from_entries(Default::default(), &entries).map_err(CliError::Config)?;
            (model, Some(TrainState { adam, start_epoch }))
        }
        None => {
            fs::write(&log_path, format!("{TRAIN_LOG_HEADER}\n")).map_err(data_err)?;
            (Model::init(cfg.clone()), None)
        }
    };

    let rng = CounterRng::with_stream(cli.seed, 0);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut io_err: Option<CliError> = None;
    let res = train::train(
        &mut model,
        &train_set,
        &val_set,
        h,
        w,
        &tc,
        state,
        &mut |log, model, adam| {
            println!(
                "epoch {:3}  lr {:.2e}  loss {:.4} (ce {:.4} + lovasz {:.4})  val F1 {:.2}",
                log.epoch, log.lr, log.loss, log.ce, log.lovasz, log.val.f1
            );
            let step = || -> Result<(), CliError> {
                append_csv(&log_path, TRAIN_LOG_HEADER, &format!("{}\n", log.csv_row()))?;
                checkpoint::save(
                    &ckpt_dir.join("last.cssm"),
                    &Checkpoint {
                        config: model.cfg.to_kv(),
                        tensors: checkpoint::model_tensors(model),
                        opt: opt_entries(adam, log.epoch + 1),
                        rng: rng.state(),
                    },
                )
                .map_err(data_err)
            };
            if io_err.is_none() {
                io_err = step().err();
            }
            best_f1 = best_f1.max(log.val.f1);
        },
    )
    .map_err(train_error)?;
    if let Some(e) = io_err {
        return Err(e);
    }

    checkpoint::save(
        &ckpt_dir.join("best.cssm"),
        &Checkpoint {
            config: model.cfg.to_kv(),
            tensors: res.best_tensors.clone(),
            opt: opt_entries(&res.adam, res.best_epoch + 1),
            rng: rng.state(),
        },
    )
    .map_err(data_err)?;
    println!(
        "best val F1 {:.2} at epoch {}; checkpoints in {}",
        res.best_f1,
        res.best_epoch,
        ckpt_dir.display()
    );
    Ok(())
}

fn parse_degrade(s: &str) -> Result<DegradeSpec, CliError> {
    let (kind, level) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("--degrade wants kind:level, got `{s}`")))?;
    let kind = match kind {
        "gaussian_blur" => DegradeKind::GaussianBlur,
        "gaussian_noise" => DegradeKind::GaussianNoise,
        _ => return Err(CliError::Config(format!("unknown degrade kind: {kind}"))),
    };
    let level: f64 = level
        .parse()
        .map_err(|_| CliError::Config(format!("bad degrade level: {level}")))?;
    if !(0.0..=4.0).contains(&level) {
        return Err(CliError::Config(format!("degrade level out of range: {level}")));
    }
    Ok(DegradeSpec { kind, level })
}

/// Apply a degradation to both epochs of a sample, seeded per image so the
/// noise draw is reproducible. Level 0 is a bitwise no-op.
fn degrade_sample(s: &LoadedSample, spec: DegradeSpec, seed: u64, index: u64, h: usize, w: usize) -> LoadedSample {
    let apply = |img: &[f32], stream: u64| -> Vec<f32> {
        let mut buf: Vec<f64> = img.iter().map(|&v| v as f64).collect();
        degrade(&mut buf, 3, h, w, spec, sample_seed(seed, index * 2 + stream));
        buf.iter().map(|&v| v as f32).collect()
    };
    LoadedSample {
        pre: apply(&s.pre, 0),
        post: apply(&s.post, 1),
        mask: s.mask.clone(),
    }
}

fn eval_counts(
    model: &Model<f32>,
    set: &[LoadedSample],
    h: usize,
    w: usize,
    spec: Option<DegradeSpec>,
    seed: u64,
) -> cssm::metrics::Metrics {
    let mut counts = cssm::metrics::ConfusionCounts::default();
    for (i, s) in set.iter().enumerate() {
        let s = match spec {
            Some(d) => degrade_sample(s, d, seed, i as u64, h, w),
            None => LoadedSample {
                pre: s.pre.clone(),
                post: s.post.clone(),
                mask: s.mask.clone(),
            },
        };
        let pred = train::predict(model, ScanImpl::Sequential, &s, h, w);
        cssm::metrics::accumulate(&mut counts, &pred, &s.mask);
    }
    cssm::metrics::metrics(&counts)
}

fn cmd_eval(cli: &Cli, _cfg: &ModelConfig, a: &EvalArgs) -> Result<(), CliError> {
    if a.sweep && a.degrade.is_some() {
        return Err(CliError::Config("--sweep and --degrade are exclusive".into()));
    }
    let path = ckpt_path(cli, &a.checkpoint);
    let (model, _) = load_checkpoint_model(&path)?;
    let mcfg = model.cfg.clone();
    write_config_resolved(
        cli,
        &mcfg,
        "eval",
        &[
            ("checkpoint", path.display().to_string()),
            ("split", a.split.clone()),
            ("degrade", a.degrade.clone().unwrap_or_else(|| "none".into())),
            ("sweep", a.sweep.to_string()),
        ],
    )?;
    let (set, h, w) = load_split(cli, &a.split)?;
    let metrics_path = cli.out_dir.join("metrics.csv");
    let (variant, l) = (mcfg.variant.name(), mcfg.num_blocks);

    if a.sweep {
        // Fig.-3-style grid: one F1 row per (kind, level).
        let mut rows = String::new();
        for kind in [DegradeKind::GaussianBlur, DegradeKind::GaussianNoise] {
            for &level in kind.levels() {
                let spec = DegradeSpec { kind, level };
                let m = eval_counts(&model, &set, h, w, Some(spec), cli.seed);
                println!("{}:{level}  F1 {:.2}", kind.name(), m.f1);
                rows.push_str(&format!(
                    "sweep,{}+{}:{level},{variant},{l},f1,{:.6}\n",
                    a.split,
                    kind.name(),
                    m.f1
                ));
            }
        }
        append_csv(&metrics_path, METRICS_CSV_HEADER, &rows)?;
        return Ok(());
    }

    let spec = a.degrade.as_deref().map(parse_degrade).transpose()?;
    let m = eval_counts(&model, &set, h, w, spec, cli.seed);
    let dataset = match spec {
        Some(d) => format!("{}+{}:{}", a.split, d.kind.name(), d.level),
        None => a.split.clone(),
    };
    println!(
        "{dataset}: OA {:.2}  Pre {:.2}  Rec {:.2}  F1 {:.2}  IoU {:.2}",
        m.oa, m.precision, m.recall, m.f1, m.iou
    );
    append_csv(
        &metrics_path,
        METRICS_CSV_HEADER,
        &metrics_csv_rows("eval", &dataset, variant, l, &m),
    )?;

    if a.emit_maps {
        let maps_dir = cli.out_dir.join("maps");
        fs::create_dir_all(&maps_dir).map_err(data_err)?;
        for (i, s) in set.iter().enumerate() {
            let s = match spec {
                Some(d) => degrade_sample(s, d, cli.seed, i as u64, h, w),
                None => LoadedSample {
                    pre: s.pre.clone(),
                    post: s.post.clone(),
                    mask: s.mask.clone(),
                },
            };
            let pred = train::predict(&model, ScanImpl::Sequential, &s, h, w);
            let img = imageio::change_map(&pred, &s.mask, w, h);
            imageio::write(&maps_dir.join(format!("{i:06}.ppm")), &img).map_err(data_err)?;
        }
        println!("wrote {} change maps to {}", set.len(), maps_dir.display());
    }
    Ok(())
}

pub const ABLATION_CSV_HEADER: &str = "arm,seed,params,recall,precision,oa,f1,iou";

fn apply_arm(base: &ModelConfig, arm: &str) -> Result<ModelConfig, CliError> {
    let mut cfg = base.clone();
    cfg.variant = Variant::Cssm;
    if let Some(l) = arm.strip_prefix("L:") {
        cfg.num_blocks = l
            .parse::<usize>()
            .ok()
            .filter(|&l| l <= 8)
            .ok_or_else(|| CliError::Config(format!("bad block count in arm `{arm}`")))?;
    } else if arm == "conv_substitute" {
        cfg.variant = Variant::ConvSubstitute;
    } else if let Some(m) = arm.strip_prefix("metric:") {
        cfg.block.metric = GateMetric::parse(m)
            .ok_or_else(|| CliError::Config(format!("unknown metric in arm `{arm}`")))?;
    } else {
        return Err(CliError::Config(format!("unknown arm: {arm}")));
    }
    Ok(cfg)
}

fn cmd_ablate(cli: &Cli, cfg: &ModelConfig, a: &AblateArgs) -> Result<(), CliError> {
    let scan = parse_scan(&a.hyper.scan)?;
    let mut extra = hyper_kv(&a.hyper);
    extra.push(("arms", a.arm.join(" ")));
    extra.push(("seeds", a.seeds.to_string()));
    write_config_resolved(cli, cfg, "ablate", &extra)?;
    let (train_set, h, w) = load_split(cli, "train")?;
    let (val_set, _, _) = load_split(cli, "val")?;
    let (test_set, _, _) = load_split(cli, "test")?;
    let csv_path = cli.out_dir.join("ablation.csv");

    for arm in &a.arm {
        let arm_cfg = apply_arm(cfg, arm)?;
        for s in 0..a.seeds {
            let seed = cli.seed + s;
            let mut run_cfg = arm_cfg.clone();
            run_cfg.seed = seed;
            let mut model: Model<f32> = Model::init(run_cfg);
            let tc = TrainConfig {
                epochs: a.hyper.epochs,
                batch_size: a.hyper.batch_size,
                lr: a.hyper.lr,
                gamma: a.hyper.gamma,
                step_every: a.hyper.step_every,
                seed,
                scan,
            };
            let res = train::train(&mut model, &train_set, &val_set, h, w, &tc, None, &mut |_, _, _| {})
                .map_err(train_error)?;
            checkpoint::apply_to_model(&mut model, &res.best_tensors).map_err(config_err)?;
            let m = eval_counts(&model, &test_set, h, w, None, seed);
            let params = count_params(&model.cfg);
            println!(
                "{arm} seed {seed}: params {params}  Rec {:.2}  Pre {:.2}  OA {:.2}  F1 {:.2}  IoU {:.2}",
                m.recall, m.precision, m.oa, m.f1, m.iou
            );
            append_csv(
                &csv_path,
                ABLATION_CSV_HEADER,
                &format!(
                    "{arm},{seed},{params},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    m.recall, m.precision, m.oa, m.f1, m.iou
                ),
            )?;
        }
    }
    Ok(())
}

pub const BENCH_CSV_HEADER: &str = "impl,t,lanes,repeats,micros,max_abs_diff";

fn cmd_bench(cli: &Cli, cfg: &ModelConfig, a: &BenchArgs) -> Result<(), CliError> {
    let ts: Vec<usize> = a
        .t_grid
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("bad --t-grid: {}", a.t_grid)))?;
    let which = match a.impl_name.as_str() {
        "sequential" => vec!["sequential"],
        "parallel" => vec!["parallel"],
        "both" => vec!["sequential", "parallel"],
        other => return Err(CliError::Config(format!("unknown impl: {other}"))),
    };
    write_config_resolved(
        cli,
        cfg,
        "bench",
        &[
            ("t_grid", a.t_grid.clone()),
            ("impl", a.impl_name.clone()),
            ("lanes", a.lanes.to_string()),
            ("repeats", a.repeats.to_string()),
        ],
    )?;

    let mut rows = String::new();
    for &t in &ts {
        let mut rng = CounterRng::with_stream(cli.seed, t as u64);
        let a_coef: Vec<f32> = (0..t * a.lanes).map(|_| rng.uniform(0.1, 0.99) as f32).collect();
        let u: Vec<f32> = (0..t * a.lanes).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let reference = linear_scan_sequential(&a_coef, &u, t, a.lanes);
        for name in &which {
            let mut best = f64::INFINITY;
            let mut diff = 0.0f64;
            for _ in 0..a.repeats.max(1) {
                let t0 = Instant::now();
                let h = match *name {
                    "sequential" => linear_scan_sequential(&a_coef, &u, t, a.lanes),
                    _ => linear_scan_parallel(&a_coef, &u, t, a.lanes, 64),
                };
                best = best.min(t0.elapsed().as_secs_f64() * 1e6);
                diff = reference
                    .iter()
                    .zip(&h)
                    .map(|(&x, &y)| (x as f64 - y as f64).abs())
                    .fold(diff, f64::max);
            }
            println!("{name:10} T {t:6}  {best:10.1} us  max diff {diff:.3e}");
            rows.push_str(&format!(
                "{name},{t},{},{},{best:.1},{diff:.3e}\n",
                a.lanes, a.repeats
            ));
        }
    }
    append_csv(&cli.out_dir.join("bench.csv"), BENCH_CSV_HEADER, &rows)
}

fn cmd_count(cli: &Cli, cfg: &ModelConfig, a: &CountArgs) -> Result<(), CliError> {
    write_config_resolved(
        cli,
        cfg,
        "count",
        &[("extent", format!("{}x{}", a.height, a.width))],
    )?;
    let params = count_params(cfg);
    let flops = count_flops(cfg, a.height, a.width);
    println!("variant {}  L {}", cfg.variant.name(), cfg.num_blocks);
    println!("params {params}");
    println!(
        "flops {flops} ({:.3} GFLOPs at {}x{})",
        flops as f64 / 1e9,
        a.height,
        a.width
    );
    Ok(())
}

fn cmd_saliency(cli: &Cli, _cfg: &ModelConfig, a: &SaliencyArgs) -> Result<(), CliError> {
    let path = ckpt_path(cli, &a.checkpoint);
    let (model, _) = load_checkpoint_model(&path)?;
    write_config_resolved(
        cli,
        &model.cfg.clone(),
        "saliency",
        &[
            ("checkpoint", path.display().to_string()),
            ("split", a.split.clone()),
            ("index", a.index.to_string()),
        ],
    )?;
    let ds = Dataset::open(&cli.data_root, &a.split)
        .map_err(|e| CliError::Data(format!("split `{}`: {e}", a.split)))?;
    if a.index >= ds.len() {
        return Err(CliError::Data(format!(
            "index {} out of range (split `{}` has {} samples)",
            a.index,
            a.split,
            ds.len()
        )));
    }
    let sample = ds.load(a.index).map_err(data_err)?;
    let map = train::saliency(&model, ScanImpl::Sequential, &sample, ds.height, ds.width);
    let dir = cli.out_dir.join("saliency");
    fs::create_dir_all(&dir).map_err(data_err)?;
    let mut img = Image::new(ds.width, ds.height, 1);
    for (dst, &v) in img.data.iter_mut().zip(&map) {
        *dst = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    let out = dir.join(format!("{:06}.pgm", a.index));
    imageio::write(&out, &img).map_err(data_err)?;
    println!("wrote {}", out.display());
    Ok(())
}
