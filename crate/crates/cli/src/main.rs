//! `trajrep` — command-line driver for the trajectory-representation
//! pipeline: synthetic data generation, pretraining, fine-tuning,
//! embedding export, retrieval evaluation, and the classical similarity
//! baselines.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 I/O error. Every
//! command echoes its resolved configuration as `key = value` lines before
//! doing any work, so runs are self-documenting and scripts can assert on
//! parsed values instead of log phrasing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use trajrep::checkpoint::{load_checkpoint, save_checkpoint, write_matrix, CheckpointMeta};
use trajrep::embedding::UserMode;
use trajrep::error::{Error, Result};
use trajrep::evaluation::{embed_dataset, mean_rank, rank_by_inner_product, RetrievalSetup};
use trajrep::roadnet::{load_network, save_network, RoadNetwork};
use trajrep::seq2seq::Model;
use trajrep::simbaselines::{traj_to_pointseq, Measure, PointSeq};
use trajrep::trajdata::{
    generate_synthetic, load_trajectories, save_trajectories, split_dataset, GeneratorConfig,
    LoadStats, PathTrajectory, UserVocab,
};
use trajrep::training::{
    finetune_classification, finetune_tte, pretrain, EpochLog, FineTuneConfig, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "trajrep",
    version,
    about = "Road-network trajectory representation learning pipeline"
)]
struct Cli {
    /// Seed for every random choice the command makes (deterministic
    /// commands accept and echo it).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker-thread parallelism (default: one worker per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic road network and trajectory set
    Generate(GenerateArgs),
    /// Pretrain a representation model on masked trajectories
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint for trajectory classification (user labels)
    FinetuneCls(FinetuneClsArgs),
    /// Fine-tune a checkpoint for travel-time estimation
    FinetuneTte(FinetuneTteArgs),
    /// Embed trajectories into a binary matrix with a trained model
    Embed(EmbedArgs),
    /// Retrieval evaluation: rank downsampled twins in a database
    Evaluate(EvaluateArgs),
    /// Score query/candidate pairs with a classical similarity measure
    Simbench(SimbenchArgs),
    /// Print the resolved training configuration
    Config(ConfigArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid size as WIDTHxHEIGHT, e.g. 8x8
    #[arg(long, default_value = "8x8")]
    grid: String,
    /// Number of trajectories
    #[arg(long, default_value_t = 2000)]
    traj: usize,
    /// Number of users
    #[arg(long, default_value_t = 10)]
    users: usize,
    /// Output directory (created if missing); writes network.csv and
    /// trajectories.jsonl
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Road-network CSV
    #[arg(long)]
    net: PathBuf,
    /// Trajectory file (one JSON record per line)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out: PathBuf,
    /// Training config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of the data held out for validation
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// The `TrainConfig` fields worth reaching from the command line. Anything
/// set here wins over the config file, which wins over the defaults.
#[derive(Args)]
struct TrainOverrides {
    /// Embedding width
    #[arg(long)]
    l: Option<usize>,
    /// Attention heads per layer
    #[arg(long)]
    n_heads: Option<usize>,
    /// Encoder layer count
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Decoder layer count
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Embedding dropout rate
    #[arg(long)]
    dropout: Option<f64>,
    /// Next-segment loss weight in the dual objective
    #[arg(long)]
    lambda1: Option<f64>,
    /// Distance share of the attention-bias mix
    #[arg(long)]
    lambda2: Option<f64>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig, seed: Option<u64>) -> Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.apply(stringify!($field), &v.to_string())?;
                }
            };
        }
        set!(l);
        set!(n_heads);
        set!(encoder_layers);
        set!(decoder_layers);
        set!(dropout);
        set!(lambda1);
        set!(lambda2);
        set!(lr);
        set!(batch_size);
        set!(epochs);
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct FinetuneClsArgs {
    #[arg(long)]
    net: PathBuf,
    /// Labeled data: the class of each trajectory is its user id
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint to start from
    #[arg(long)]
    ckpt: PathBuf,
    /// Fraction of the data used for fine-tuning (the rest is the test set)
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[command(flatten)]
    tune: TuneOverrides,
}

#[derive(Args)]
struct FinetuneTteArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint to start from
    #[arg(long)]
    ckpt: PathBuf,
    /// Fraction of the data used for fine-tuning (the rest is the test set)
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[command(flatten)]
    tune: TuneOverrides,
}

#[derive(Args)]
struct TuneOverrides {
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fine-tuning epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Train only the task head, keeping encoder weights fixed
    #[arg(long)]
    freeze_encoder: bool,
}

impl TuneOverrides {
    fn build(&self, seed: Option<u64>) -> FineTuneConfig {
        let mut cfg = FineTuneConfig::default();
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.freeze_encoder = self.freeze_encoder;
        cfg
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output matrix file; the id index goes to OUT.ids
    #[arg(long)]
    out: PathBuf,
    /// Distance share of the attention-bias mix (default: the checkpoint's
    /// training value, else 0.5)
    #[arg(long)]
    lambda2: Option<f64>,
    /// User encoding: enabled, disabled, or zero-if-unknown
    #[arg(long, default_value = "zero-if-unknown")]
    user_mode: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of leading trajectories used as queries; the rest fill the
    /// database
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Interior-step removal rate for the planted twins (0 = exact copies)
    #[arg(long, default_value_t = 0.1)]
    downsample: f64,
    /// Distance share of the attention-bias mix (default: the checkpoint's
    /// training value, else 0.5)
    #[arg(long)]
    lambda2: Option<f64>,
    /// User encoding: enabled, disabled, or zero-if-unknown
    #[arg(long, default_value = "zero-if-unknown")]
    user_mode: String,
}

#[derive(Args)]
struct SimbenchArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Measure: dtw, frechet, hausdorff, lcss, edr, erp, or sspd
    #[arg(long, default_value = "dtw")]
    measure: String,
    /// Number of leading trajectories used as queries
    #[arg(long, default_value_t = 10)]
    queries: usize,
    /// Matching tolerance in meters (lcss/edr)
    #[arg(long, default_value_t = 100.0)]
    eps_m: f64,
    /// Gap reference point as X,Y in meters (erp)
    #[arg(long, default_value = "0,0")]
    gap: String,
    /// Output CSV: query_id,candidate_id,score
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the built-in defaults
    #[arg(long)]
    dump: bool,
    /// Load this config file first
    #[arg(long)]
    file: Option<PathBuf>,
    /// Override single keys, e.g. --set lr=0.001 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout and exit 0; everything else is
            // a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
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
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.cmd {
        Command::Generate(a) => cmd_generate(a, cli.seed),
        Command::Pretrain(a) => cmd_pretrain(a, cli.seed),
        Command::FinetuneCls(a) => cmd_finetune_cls(a, cli.seed),
        Command::FinetuneTte(a) => cmd_finetune_tte(a, cli.seed),
        Command::Embed(a) => cmd_embed(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a, cli.seed),
        Command::Simbench(a) => cmd_simbench(a, cli.seed),
        Command::Config(a) => cmd_config(a, cli.seed),
    }
}

fn echo(key: &str, value: impl std::fmt::Display) {
    println!("{key} = {value}");
}

fn echo_stats(stats: &LoadStats) {
    echo("records_read", stats.read);
    echo("records_loaded", stats.loaded);
    let skipped = stats.read - stats.loaded;
    if skipped > 0 {
        echo("records_skipped", skipped);
    }
    if stats.truncated > 0 {
        echo("records_truncated", stats.truncated);
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::validation(format!("grid must look like 8x8, got {s:?}")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::validation(format!("grid must look like 8x8, got {s:?}")))
    };
    Ok((parse(w)?, parse(h)?))
}

fn parse_user_mode(s: &str) -> Result<UserMode> {
    match s {
        "enabled" => Ok(UserMode::Enabled),
        "disabled" => Ok(UserMode::Disabled),
        "zero-if-unknown" => Ok(UserMode::ZeroIfUnknown),
        _ => Err(Error::validation(format!(
            "user mode must be enabled, disabled, or zero-if-unknown, got {s:?}"
        ))),
    }
}

fn load_world(net: &Path, data: &Path) -> Result<(RoadNetwork, Vec<PathTrajectory>, UserVocab)> {
    let network = load_network(net)?;
    let (trajs, vocab, stats) = load_trajectories(data, &network)?;
    echo_stats(&stats);
    if trajs.is_empty() {
        return Err(Error::validation(format!(
            "no usable trajectories in {}",
            data.display()
        )));
    }
    Ok((network, trajs, vocab))
}

/// Recodes file-local dense user ids into the checkpoint's id space. Users
/// the checkpoint never saw get the one-past-the-table sentinel, which the
/// zero-if-unknown mode maps to a zero row.
fn remap_users(
    trajs: &mut [PathTrajectory],
    file_vocab: &UserVocab,
    ckpt_vocab: &UserVocab,
) -> usize {
    let sentinel = ckpt_vocab.len();
    let mut unknown = 0;
    for t in trajs {
        let raw = file_vocab
            .original(t.user)
            .expect("loader hands out only vocab-backed ids");
        t.user = ckpt_vocab.dense(raw).unwrap_or_else(|| {
            unknown += 1;
            sentinel
        });
    }
    unknown
}

fn subset(trajs: &[PathTrajectory], idx: &[usize]) -> Vec<PathTrajectory> {
    idx.iter().map(|&i| trajs[i].clone()).collect()
}

fn resolve_lambda2(flag: Option<f64>, meta: &CheckpointMeta) -> f64 {
    flag.or_else(|| meta.train_config.as_ref().map(|c| c.lambda2))
        .unwrap_or(0.5)
}

fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    echo("checkpoint_l", meta.shape.l);
    echo("checkpoint_users", meta.users.len());
    Ok((model, meta))
}

fn cmd_generate(a: GenerateArgs, seed: Option<u64>) -> Result<()> {
    let (grid_width, grid_height) = parse_grid(&a.grid)?;
    let cfg = GeneratorConfig {
        grid_width,
        grid_height,
        n_trajectories: a.traj,
        n_users: a.users,
        seed: seed.unwrap_or(GeneratorConfig::default().seed),
    };
    echo("command", "generate");
    echo("grid", format!("{grid_width}x{grid_height}"));
    echo("trajectories", cfg.n_trajectories);
    echo("users", cfg.n_users);
    echo("seed", cfg.seed);

    let (net, trajs) = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.clone(), e))?;
    let net_path = a.out.join("network.csv");
    let traj_path = a.out.join("trajectories.jsonl");
    save_network(&net, &net_path)?;
    let vocab = UserVocab::from_original((0..cfg.n_users as i64).collect());
    save_trajectories(&trajs, &vocab, &traj_path)?;

    echo("segments", net.n_segments());
    echo("network_file", net_path.display());
    echo("trajectory_file", traj_path.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut cfg, seed)?;
    if !(0.0 < a.val_frac && a.val_frac < 1.0) {
        return Err(Error::validation(format!(
            "--val-frac must lie strictly between 0 and 1, got {}",
            a.val_frac
        )));
    }

    echo("command", "pretrain");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("out", a.out.display());
    echo("val_frac", a.val_frac);
    print!("{}", cfg.dump());

    let (net, trajs, vocab) = load_world(&a.net, &a.data)?;
    let (train_idx, val_idx, _) =
        split_dataset(trajs.len(), [1.0 - a.val_frac, a.val_frac, 0.0], cfg.seed)?;
    let train = subset(&trajs, &train_idx);
    let val = subset(&trajs, &val_idx);
    echo("train_size", train.len());
    echo("val_size", val.len());

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.clone(), e))?;
    let mut log_text = String::new();
    let out_dir = a.out.clone();
    let vocab_ref = &vocab;
    let cfg_ref = &cfg;
    let (model, _logs) = pretrain(&net, &train, &val, &cfg, |m, log| {
        let line = epoch_line(log);
        println!("{line}");
        let _ = writeln!(log_text, "{line}");
        save_checkpoint(
            out_dir.join(format!("epoch{:03}.ckpt", log.epoch)),
            m,
            vocab_ref,
            Some(cfg_ref),
        )
    })?;

    let final_path = a.out.join("model.ckpt");
    save_checkpoint(&final_path, &model, &vocab, Some(&cfg))?;
    let log_path = a.out.join("log.txt");
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(log_path.clone(), e))?;
    echo("checkpoint", final_path.display());
    echo("log", log_path.display());
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    let mut s = format!("epoch={}", log.epoch);
    if let Some(t) = &log.train {
        let _ = write!(
            s,
            " train_nsp={:.6} train_tr={:.6} train_total={:.6}",
            t.nsp, t.tr, t.total
        );
    }
    let _ = write!(
        s,
        " val_nsp={:.6} val_tr={:.6} val_total={:.6}",
        log.val.nsp, log.val.tr, log.val.total
    );
    s
}

fn cmd_finetune_cls(a: FinetuneClsArgs, seed: Option<u64>) -> Result<()> {
    let cfg = a.tune.build(seed);
    echo("command", "finetune-cls");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("ckpt", a.ckpt.display());
    echo("train_frac", a.train_frac);
    echo_tune(&cfg);

    let (net, trajs, vocab) = load_world(&a.net, &a.data)?;
    let (mut model, _meta) = load_model(&a.ckpt)?;
    // Labels ARE the file's dense user ids; the user encoding is disabled
    // during the forward pass so the table cannot leak them.
    let n_classes = vocab.len();
    let (train_idx, _, test_idx) =
        split_dataset(trajs.len(), [a.train_frac, 0.0, 1.0 - a.train_frac], cfg.seed)?;
    let train = subset(&trajs, &train_idx);
    let test = subset(&trajs, &test_idx);
    let train_labels: Vec<usize> = train.iter().map(|t| t.user).collect();
    let test_labels: Vec<usize> = test.iter().map(|t| t.user).collect();
    echo("train_size", train.len());
    echo("test_size", test.len());
    echo("classes", n_classes);

    let out = finetune_classification(
        &mut model,
        &net,
        &train,
        &train_labels,
        &test,
        &test_labels,
        n_classes,
        UserMode::Disabled,
        &cfg,
    )?;
    for (i, loss) in out.train_loss.iter().enumerate() {
        println!("epoch={} train_ce={loss:.6}", i + 1);
    }
    echo("accuracy", out.metrics.accuracy);
    echo("micro_f1", out.metrics.micro_f1);
    echo("macro_f1", out.metrics.macro_f1);
    echo("recall_at_5", out.metrics.recall_at_5);
    Ok(())
}

fn cmd_finetune_tte(a: FinetuneTteArgs, seed: Option<u64>) -> Result<()> {
    let cfg = a.tune.build(seed);
    echo("command", "finetune-tte");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("ckpt", a.ckpt.display());
    echo("train_frac", a.train_frac);
    echo_tune(&cfg);

    let (net, mut trajs, vocab) = load_world(&a.net, &a.data)?;
    let (mut model, meta) = load_model(&a.ckpt)?;
    let unknown = remap_users(&mut trajs, &vocab, &meta.users);
    if unknown > 0 {
        echo("unknown_users", unknown);
    }
    let (train_idx, _, test_idx) =
        split_dataset(trajs.len(), [a.train_frac, 0.0, 1.0 - a.train_frac], cfg.seed)?;
    let train = subset(&trajs, &train_idx);
    let test = subset(&trajs, &test_idx);
    echo("train_size", train.len());
    echo("test_size", test.len());

    let out = finetune_tte(&mut model, &net, &train, &test, UserMode::ZeroIfUnknown, &cfg)?;
    for (i, loss) in out.train_loss.iter().enumerate() {
        println!("epoch={} train_mse={loss:.6}", i + 1);
    }
    echo("mae_min", out.metrics.mae);
    echo("rmse_min", out.metrics.rmse);
    echo("mape_pct", out.metrics.mape);
    echo("mape_excluded", out.metrics.mape_excluded);
    Ok(())
}

fn echo_tune(cfg: &FineTuneConfig) {
    echo("lr", cfg.lr);
    echo("batch_size", cfg.batch_size);
    echo("epochs", cfg.epochs);
    echo("seed", cfg.seed);
    echo("freeze_encoder", cfg.freeze_encoder);
}

fn cmd_embed(a: EmbedArgs, seed: Option<u64>) -> Result<()> {
    let mode = parse_user_mode(&a.user_mode)?;
    echo("command", "embed");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("ckpt", a.ckpt.display());
    echo("out", a.out.display());
    echo("user_mode", &a.user_mode);
    echo("seed", seed.unwrap_or(0));

    let (net, mut trajs, vocab) = load_world(&a.net, &a.data)?;
    let (model, meta) = load_model(&a.ckpt)?;
    let lambda2 = resolve_lambda2(a.lambda2, &meta);
    echo("lambda2", lambda2);
    let unknown = remap_users(&mut trajs, &vocab, &meta.users);
    if unknown > 0 {
        echo("unknown_users", unknown);
    }

    let embeds = embed_dataset(&model, &net, &trajs, lambda2, mode)?;
    write_matrix(&a.out, &embeds)?;

    // Row i of the matrix is the i-th loaded record of the input file; the
    // index file pins that correspondence down.
    let mut ids = String::new();
    for i in 0..embeds.rows() {
        let _ = writeln!(ids, "{i}");
    }
    let ids_path = ids_path_for(&a.out);
    std::fs::write(&ids_path, ids).map_err(|e| Error::io(ids_path.clone(), e))?;

    echo("rows", embeds.rows());
    echo("dim", embeds.cols());
    echo("index", ids_path.display());
    Ok(())
}

fn ids_path_for(matrix: &Path) -> PathBuf {
    let mut name = matrix.file_name().map(ToOwned::to_owned).unwrap_or_default();
    name.push(".ids");
    matrix.with_file_name(name)
}

fn cmd_evaluate(a: EvaluateArgs, seed: Option<u64>) -> Result<()> {
    let mode = parse_user_mode(&a.user_mode)?;
    let seed = seed.unwrap_or(7);
    echo("command", "evaluate");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("ckpt", a.ckpt.display());
    echo("queries", a.queries);
    echo("downsample", a.downsample);
    echo("user_mode", &a.user_mode);
    echo("seed", seed);

    let (net, mut trajs, vocab) = load_world(&a.net, &a.data)?;
    let (model, meta) = load_model(&a.ckpt)?;
    let lambda2 = resolve_lambda2(a.lambda2, &meta);
    echo("lambda2", lambda2);
    remap_users(&mut trajs, &vocab, &meta.users);

    if a.queries == 0 || a.queries >= trajs.len() {
        return Err(Error::validation(format!(
            "need 1 <= queries < {} trajectories, got {}",
            trajs.len(),
            a.queries
        )));
    }
    let queries = trajs[..a.queries].to_vec();
    let base = trajs[a.queries..].to_vec();
    let setup = RetrievalSetup::new(queries, base, a.downsample, seed)?;
    echo("database_size", setup.database.len());

    let query_matrix = embed_dataset(&model, &net, &setup.queries, lambda2, mode)?;
    let db_matrix = embed_dataset(&model, &net, &setup.database, lambda2, mode)?;
    let rankings: Vec<Vec<(usize, f64)>> = (0..query_matrix.rows())
        .map(|i| rank_by_inner_product(query_matrix.row_slice(i), &db_matrix))
        .collect();
    let targets: Vec<usize> = (0..setup.queries.len()).map(|i| setup.target_of(i)).collect();
    let summary = mean_rank(&targets, &rankings)?;

    match summary.mean {
        Some(mr) => echo("mean_rank", mr),
        None => echo("mean_rank", "none"),
    }
    echo("ranked", summary.ranked);
    echo("missing", summary.missing);
    Ok(())
}

fn cmd_simbench(a: SimbenchArgs, seed: Option<u64>) -> Result<()> {
    let measure = Measure::from_str(&a.measure)?;
    let gap = parse_gap(&a.gap)?;
    echo("command", "simbench");
    echo("net", a.net.display());
    echo("data", a.data.display());
    echo("measure", measure);
    echo("queries", a.queries);
    echo("eps_m", a.eps_m);
    echo("gap", format!("{},{}", gap.0, gap.1));
    echo("out", a.out.display());
    echo("seed", seed.unwrap_or(0));

    let (net, trajs, _vocab) = load_world(&a.net, &a.data)?;
    if a.queries == 0 || a.queries >= trajs.len() {
        return Err(Error::validation(format!(
            "need 1 <= queries < {} trajectories, got {}",
            trajs.len(),
            a.queries
        )));
    }
    let seqs: Vec<PointSeq> = trajs
        .iter()
        .map(|t| traj_to_pointseq(t, &net))
        .collect::<Result<_>>()?;

    let mut csv = String::from("query_id,candidate_id,score\n");
    for qi in 0..a.queries {
        for ci in a.queries..seqs.len() {
            let score = measure.score(&seqs[qi], &seqs[ci], a.eps_m, gap)?;
            let _ = writeln!(csv, "{qi},{ci},{score}");
        }
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(a.out.clone(), e))?;
    echo("pairs", a.queries * (seqs.len() - a.queries));
    Ok(())
}

fn parse_gap(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::validation(format!("gap must look like X,Y in meters, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    let x = x.trim().parse::<f64>().map_err(|_| bad())?;
    let y = y.trim().parse::<f64>().map_err(|_| bad())?;
    Ok((x, y))
}

fn cmd_config(a: ConfigArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.file {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for kv in &a.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("--set wants KEY=VALUE, got {kv:?}")))?;
        cfg.apply(key.trim(), value)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let _ = a.dump; // --dump with no file/overrides prints the defaults
    print!("{}", cfg.dump());
    Ok(())
}
