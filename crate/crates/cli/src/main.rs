use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use tdistill::benchlat::{bench_svg, fit_scaling, run_bench, write_bench_csv};
use tdistill::losses::{LambdaMode, Method};
use tdistill::metrics::{evaluate, write_metrics_csv, RunMeta, DEFAULT_K, DEFAULT_MISS_THRESHOLD};
use tdistill::models::{ModelConfig, ModelKind};
use tdistill::scenegen::{file_sha256, load_dataset, write_dataset, GenConfig, Scene};
use tdistill::train::{
    distill_student, load_checkpoint, predict_targets, save_checkpoint, seeded_init, train_student, train_teacher, TrainConfig,
    TrainOutcome, PARAMS_FILE,
};
use tdistill::Error;

const CONFIG_SCHEMA_VERSION: u64 = 1;
const RUN_MANIFEST_SCHEMA_VERSION: u32 = 1;
const RUN_FILE: &str = "run.json";
const LOG_FILE: &str = "train_log.jsonl";
const THREADS_ENV: &str = "TDISTILL_THREADS";

#[derive(Parser)]
#[command(name = "tdistill", version, about = "Trajectory forecasting with agent-centric to scene-centric distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic intersection dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's scene count.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a teacher or a student on groundtruth only.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Distill a student from a frozen teacher checkpoint.
    Distill {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        lambda_mode: Option<LambdaArg>,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Evaluate a checkpoint and write one metrics CSV row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_MISS_THRESHOLD)]
        miss_threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint directory name.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Time full-scene inference of both models against agent count.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64, 128])]
        agents: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Benchmark these checkpoints instead of freshly initialized
        /// default models.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Set,
    Sample,
    Distribution,
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaArg {
    Constant,
    Warmup25,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InputFile {
    role: String,
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    schema_version: u32,
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<InputFile>,
    artifacts: BTreeMap<String, PathBuf>,
    dataset_sha256: Option<String>,
    tool_version: String,
}

enum Failure {
    Usage(String),
    Io(String),
    Incompatible(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Incompatible(_) => 4,
            Failure::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Incompatible(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidInput(_) => Failure::Usage(msg),
            Error::Io(_) | Error::Malformed { .. } | Error::Corrupt(_) | Error::Json(_) => Failure::Io(msg),
            Error::Incompatible(_)
            | Error::Schema { .. }
            | Error::OutOfExtent { .. }
            | Error::UnknownAgent(_)
            | Error::EmptyHistory(_) => Failure::Incompatible(msg),
            _ => Failure::Internal(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let bench = matches!(cli.command, Command::Bench { .. });
    let result = configure_threads(bench).and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads(bench: bool) -> CliResult<()> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    let threads = if bench { 1 } else { requested.unwrap_or(0) };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Internal(e.to_string()))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen { config, out, seed, scenes } => cmd_gen(config.as_deref(), &out, seed, scenes),
        Command::Train { model, common } => {
            let kind = match model {
                ModelArg::Teacher => ModelKind::Teacher,
                ModelArg::Student => ModelKind::Student,
            };
            cmd_train(kind, None, &common)
        }
        Command::Distill {
            method,
            teacher,
            lambda_mode,
            common,
        } => {
            let method = match method {
                MethodArg::Set => Method::Set,
                MethodArg::Sample => Method::Sample,
                MethodArg::Distribution => Method::Distribution,
            };
            let lambda = lambda_mode.map(|l| match l {
                LambdaArg::Constant => LambdaMode::Constant,
                LambdaArg::Warmup25 => LambdaMode::Warmup25,
            });
            cmd_train(ModelKind::Student, Some((method, lambda, teacher.as_path())), &common)
        }
        Command::Eval {
            ckpt,
            data,
            k,
            miss_threshold,
            out,
            run_id,
        } => cmd_eval(&ckpt, &data, k, miss_threshold, &out, run_id),
        Command::Bench {
            agents,
            m,
            reps,
            out,
            svg,
            seed,
            teacher,
            student,
        } => cmd_bench(&agents, m, reps, &out, svg.as_deref(), seed, teacher.as_deref(), student.as_deref()),
    }
}

/// Parse a JSON config file: it must carry `schema_version`, every other
/// key must belong to `T`, and missing keys take their defaults.
fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let bad = |msg: String| Failure::Usage(format!("{}: {msg}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let obj = value.as_object_mut().ok_or_else(|| bad("config must be a JSON object".into()))?;
    match obj.remove("schema_version").map(|v| v.as_u64()) {
        Some(Some(CONFIG_SCHEMA_VERSION)) => {}
        Some(Some(v)) => return Err(bad(format!("unsupported config schema_version {v} (expected {CONFIG_SCHEMA_VERSION})"))),
        Some(None) => return Err(bad("schema_version must be an integer".into())),
        None => return Err(bad("missing schema_version".into())),
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Failure::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn manifest(command: &str, config: serde_json::Value, seed: u64) -> RunManifest {
    RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seed,
        inputs: Vec::new(),
        artifacts: BTreeMap::new(),
        dataset_sha256: None,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Sidecar manifest path for a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

fn input(role: &str, path: &Path) -> CliResult<InputFile> {
    Ok(InputFile {
        role: role.to_string(),
        path: path.to_path_buf(),
        sha256: file_sha256(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?,
    })
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>, scenes: Option<usize>) -> CliResult<()> {
    let mut cfg: GenConfig = match config {
        Some(p) => read_config(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = scenes {
        cfg.num_scenes = n;
    }
    cfg.validate()?;
    ensure_parent(out)?;
    let run_path = sidecar(out);
    let mut m = manifest("gen", to_json(&cfg)?, cfg.seed);
    if let Some(p) = config {
        m.inputs.push(input("config", p)?);
    }
    m.artifacts.insert("dataset".into(), out.to_path_buf());
    write_manifest(&run_path, &m)?;

    let summary = write_dataset(&cfg, out)?;
    m.dataset_sha256 = Some(summary.sha256.clone());
    write_manifest(&run_path, &m)?;
    println!("scenes: {}", summary.num_scenes);
    println!("prediction targets: {}", summary.num_targets);
    println!("multimodal targets: {:.1}%", 100.0 * summary.multimodal_fraction);
    println!("dataset sha256: {}", summary.sha256);
    Ok(())
}

fn read_scenes(path: &Path) -> CliResult<Vec<Scene>> {
    let (_, scenes) = load_dataset(path)?;
    Ok(scenes)
}

fn cmd_train(kind: ModelKind, distill: Option<(Method, Option<LambdaMode>, &Path)>, args: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.clip {
        cfg.clip_norm = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.method = Method::None;
    if let Some((method, lambda, _)) = distill {
        cfg.method = method;
        if let Some(l) = lambda {
            cfg.lambda_mode = l;
        }
    }
    cfg.validate()?;
    cfg.model = Some(cfg.model_config(kind)?);

    fs::create_dir_all(&args.out).map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    let command = if distill.is_some() { "distill" } else { "train" };
    let mut m = manifest(command, to_json(&cfg)?, cfg.seed);
    let data_in = input("data", &args.data)?;
    m.dataset_sha256 = Some(data_in.sha256.clone());
    m.inputs.push(data_in);
    if let Some(v) = &args.val {
        m.inputs.push(input("val", v)?);
    }
    if let Some(p) = &args.config {
        m.inputs.push(input("config", p)?);
    }
    if let Some((_, _, t)) = distill {
        m.inputs.push(input("teacher", &t.join(PARAMS_FILE))?);
    }
    m.artifacts.insert("checkpoint".into(), args.out.clone());
    m.artifacts.insert("train_log".into(), args.out.join(LOG_FILE));
    write_manifest(&args.out.join(RUN_FILE), &m)?;

    let data = read_scenes(&args.data)?;
    let val = args.val.as_deref().map(read_scenes).transpose()?;
    let outcome: TrainOutcome = match distill {
        None => match kind {
            ModelKind::Teacher => train_teacher(&data, val.as_deref(), &cfg)?,
            ModelKind::Student => train_student(&data, val.as_deref(), &cfg)?,
        },
        Some((_, _, teacher_dir)) => {
            let teacher = load_checkpoint(teacher_dir)?;
            if teacher.kind() != ModelKind::Teacher {
                return Err(Failure::Incompatible(format!("{} is not a teacher checkpoint", teacher_dir.display())));
            }
            distill_student(&data, val.as_deref(), &teacher, &cfg)?
        }
    };
    save_checkpoint(&outcome.params, &args.out)?;
    outcome.log.write_jsonl(&args.out.join(LOG_FILE))?;
    if let Some(last) = outcome.log.records.last() {
        println!("step {}: loss {:.4} (window {:.4})", last.step, last.loss.total, last.window_loss);
        if let Some(v) = &last.val {
            println!("validation minADE {:.4} minFDE {:.4} MR {:.4}", v.min_ade, v.min_fde, v.miss_rate);
        }
    }
    println!("checkpoint: {}", args.out.display());
    println!("params sha256: {}", file_sha256(&args.out.join(PARAMS_FILE))?);
    Ok(())
}

/// Method label of a checkpoint, read from the run manifest next to it.
fn checkpoint_method(ckpt: &Path) -> String {
    let run: Option<RunManifest> = fs::read_to_string(ckpt.join(RUN_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    match run {
        Some(r) if r.command == "distill" => r
            .config
            .get("method")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_string(),
        Some(_) => Method::None.as_str().to_string(),
        None => "unknown".to_string(),
    }
}

fn cmd_eval(ckpt: &Path, data: &Path, k: usize, threshold: f64, out: &Path, run_id: Option<String>) -> CliResult<()> {
    if k == 0 {
        return Err(Failure::Usage("k must be positive".into()));
    }
    ensure_parent(out)?;
    let mut m = manifest(
        "eval",
        serde_json::json!({ "k": k, "miss_threshold": threshold }),
        0,
    );
    let data_in = input("data", data)?;
    m.dataset_sha256 = Some(data_in.sha256.clone());
    m.inputs.push(data_in);
    m.inputs.push(input("checkpoint", &ckpt.join(PARAMS_FILE))?);
    m.artifacts.insert("metrics".into(), out.to_path_buf());
    write_manifest(&sidecar(out), &m)?;

    let params = load_checkpoint(ckpt)?;
    if k > params.config.modes() {
        return Err(Failure::Incompatible(format!("k={k} exceeds the model's {} modes", params.config.modes())));
    }
    let scenes = read_scenes(data)?;
    let (preds, gts) = predict_targets(&params, &scenes)?;
    let dir_name = |p: &Path| {
        p.canonicalize()
            .ok()
            .and_then(|c| c.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| p.display().to_string())
    };
    let meta = RunMeta {
        run_id: run_id.unwrap_or_else(|| dir_name(ckpt)),
        dataset: data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        model: params.kind().as_str().to_string(),
        method: checkpoint_method(ckpt),
        seed: params_seed(ckpt),
    };
    let report = evaluate(&preds, &gts, k, threshold, meta)?;
    let file = fs::File::create(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    write_metrics_csv(file, std::slice::from_ref(&report))?;
    print!("{}", fs::read_to_string(out)?);
    Ok(())
}

fn params_seed(ckpt: &Path) -> u64 {
    fs::read_to_string(ckpt.join(RUN_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .map(|r| r.seed)
        .unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    agents: &[usize],
    m: usize,
    reps: usize,
    out: &Path,
    svg: Option<&Path>,
    seed: u64,
    teacher: Option<&Path>,
    student: Option<&Path>,
) -> CliResult<()> {
    if agents.is_empty() || agents.contains(&0) {
        return Err(Failure::Usage("--agents needs positive counts".into()));
    }
    ensure_parent(out)?;
    let mut man = manifest(
        "bench",
        serde_json::json!({ "agents": agents, "m": m, "reps": reps, "threads": 1 }),
        seed,
    );
    for (role, p) in [("teacher", teacher), ("student", student)] {
        if let Some(p) = p {
            man.inputs.push(input(role, &p.join(PARAMS_FILE))?);
        }
    }
    man.artifacts.insert("bench_csv".into(), out.to_path_buf());
    if let Some(s) = svg {
        man.artifacts.insert("svg".into(), s.to_path_buf());
    }
    write_manifest(&sidecar(out), &man)?;

    let load = |p: Option<&Path>, kind: ModelKind| -> CliResult<_> {
        let params = match p {
            Some(p) => load_checkpoint(p)?,
            None => seeded_init(&ModelConfig::default_for(kind), seed)?,
        };
        if params.kind() != kind {
            return Err(Failure::Incompatible(format!("expected a {} checkpoint", kind.as_str())));
        }
        Ok(params)
    };
    let t = load(teacher, ModelKind::Teacher)?;
    let s = load(student, ModelKind::Student)?;
    let points = run_bench(agents, m, reps, &[&t, &s], seed)?;
    write_bench_csv(&points, out)?;
    if let Some(path) = svg {
        ensure_parent(path)?;
        fs::write(path, bench_svg(&points)).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    for p in &points {
        println!("{:<8} n={:<4} m={:<3} median {:.6}s flops {}", p.model.as_str(), p.n, p.m, p.median_s, p.flops);
    }
    if agents.len() >= 4 {
        for f in fit_scaling(&points)? {
            println!("{} time exponent {:.3} (R² {:.3}, {} points)", f.model.as_str(), f.exponent, f.r2, f.points);
        }
    }
    Ok(())
}
