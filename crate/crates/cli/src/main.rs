//! `promptseg` command line: data generation, training, evaluation, simulated
//! sessions, the HTTP session server and log replay.

mod server;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use promptseg::eval::{ablation_matrix, simulate_prompts, AblationGrid, BoxMode, EvalConfig, Segmenter};
use promptseg::interface::wire::{
    b64_decode, PromptRequest, SessionLog, SyntheticSource, ExportResponse, WIRE_VERSION,
};
use promptseg::interface::{replay, ManagerConfig, ModelRegistry, Session, SessionManager};
use promptseg::metrics::{dice_score, nsd_score};
use promptseg::model::{Checkpoint, Model};
use promptseg::seeding::derive_rng;
use promptseg::synth::{generate_case, write_dataset, CaseManifest, Split, SynthSpec};
use promptseg::training::{fit, model_variant, prepare_case, PreparedCase, TrainConfig, Trainer, VariantConfig};
use promptseg::vgrid::{decode, read_grid, write_grid, AnyGrid};
use promptseg::Error;

/// Checkpoint compiled into the binary so `simulate` and `serve` work out of the box.
const TINY_CHECKPOINT: &[u8] = include_bytes!("../assets/tiny.ckpt");
const BUILTIN: &str = "builtin:tiny";

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Promptable 3D lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (VGRID pairs plus manifest.json).
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Simulated-user evaluation over a split; prints an ablation report.
    Eval(EvalArgs),
    /// Run one simulated session on a synthetic case.
    Simulate(SimulateArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
    /// Replay a session log and write its mask.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Cubic grid edge, overriding the spec.
    #[arg(long)]
    grid: Option<usize>,
    /// JSON generator spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk (default) or full schedule.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Prompt-training variant (plain, plain-b, basic, ultra, ...).
    #[arg(long)]
    variant: Option<String>,
    /// Architecture variant (hybrid, vit, cnn, no-conl, no-corl).
    #[arg(long)]
    architecture: Option<String>,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PromptFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or `builtin:tiny`. Repeat to compare models.
    #[arg(long, required = true)]
    checkpoint: Vec<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON eval config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated points per iteration.
    #[arg(long, value_delimiter = ',')]
    points: Vec<usize>,
    /// Comma-separated box modes: none, tight, erode, dilate.
    #[arg(long = "box", value_delimiter = ',')]
    boxes: Vec<String>,
    /// Comma-separated scribble settings (on/off).
    #[arg(long, value_delimiter = ',', value_parser = on_off)]
    scribbles: Vec<bool>,
    /// Also evaluate the ground-truth oracle as a reference row.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: PromptFlags,
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = BUILTIN)]
    checkpoint: String,
    #[arg(long, default_value_t = 0)]
    case_seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long = "box")]
    box_mode: Option<String>,
    #[arg(long, value_parser = on_off)]
    scribbles: Option<bool>,
    /// Write the session export (log plus mask) here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: PromptFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ServeConfig {
    host: String,
    port: u16,
    checkpoint_dir: Option<PathBuf>,
    default_checkpoint: Option<String>,
    ttl_secs: u64,
    export_dir: Option<PathBuf>,
    seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_dir: None,
            default_checkpoint: None,
            ttl_secs: promptseg::interface::DEFAULT_TTL.as_secs(),
            export_dir: None,
            seed: 0,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    /// 0 picks a free port.
    #[arg(long, env = "PROMPTSEG_PORT")]
    port: Option<u16>,
    /// Directory of `*.ckpt` files; the bundled checkpoint is served when absent.
    #[arg(long, env = "PROMPTSEG_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    default_checkpoint: Option<String>,
    /// Idle seconds before a session is evicted.
    #[arg(long, env = "PROMPTSEG_SESSION_TTL")]
    ttl_secs: Option<u64>,
    #[arg(long)]
    export_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    /// Session log, or a full export body.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint file; defaults to the bundled one when the log names it.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Volume for sessions that were not synthetic.
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    label: Option<PathBuf>,
    /// Generator seed of synthetic sessions whose log carries no spec.
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit codes: 1 usage, 2 bad input data, 3 runtime failure.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Self { code: 1, message: m.into() }
    }
    fn data(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }
    fn runtime(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 1,
            Error::NonFiniteLoss { .. } | Error::Protocol(_) => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Export(a) => export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let body = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(spec: &str) -> CliResult<(String, Model)> {
    if spec == BUILTIN || spec == "tiny" {
        let ckpt = Checkpoint::read_from(TINY_CHECKPOINT)?;
        return Ok(("tiny".into(), Model::from_checkpoint(&ckpt)?));
    }
    let path = Path::new(spec);
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
    Ok((id, Model::load(path).map_err(|e| Failure::data(format!("{spec}: {e}")))?))
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Failure::usage(format!("unknown split {other:?}"))),
    }
}

fn load_split(data: &Path, split: Split, patch: usize, seed: u64) -> CliResult<Vec<PreparedCase>> {
    let manifest = CaseManifest::load(data.join("manifest.json"))
        .map_err(|e| Failure::data(format!("{}: {e}", data.join("manifest.json").display())))?;
    let mut rng = derive_rng(seed, &[4, split as u64]);
    manifest
        .split(split)
        .into_iter()
        .map(|entry| {
            let case = manifest.load_case(entry, data)?;
            Ok(prepare_case(&entry.id, &case, patch, &mut rng)?)
        })
        .collect()
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut spec: SynthSpec = read_config(a.config.as_deref())?;
    if let Some(g) = a.grid {
        spec.grid_size = [g; 3];
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let manifest = write_dataset(&spec, a.cases, &a.out, spec.seed)?;
    let [tr, va, te] = manifest.counts();
    println!("wrote {} cases to {} (train {tr}, val {va}, test {te})", a.cases, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = match (&a.config, a.preset.as_str()) {
        (Some(p), _) => read_config(Some(p))?,
        (None, "desk") => TrainConfig::desk(),
        (None, "full") => TrainConfig::full(),
        (None, other) => return Err(Failure::usage(format!("unknown preset {other:?}"))),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(v) = &a.variant {
        cfg.variant = VariantConfig::preset(v)?;
    }
    if let Some(arch) = &a.architecture {
        cfg.model = model_variant(arch, &cfg.model)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let patch = cfg.model.patch_size;
    let train = load_split(&a.data, Split::Train, patch, cfg.seed)?;
    let val = load_split(&a.data, Split::Val, patch, cfg.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?)?,
        None => Trainer::new(cfg)?,
    };
    eprintln!("training on {} cases, validating on {}", train.len(), val.len());
    let outcome = fit(trainer, &train, &val, Some(&a.out), |l| {
        let val = l.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train dice {:.4}  val dice {val}{}",
            l.epoch,
            l.lr,
            l.loss,
            l.train_dice,
            if l.best { "  *" } else { "" }
        );
    })
    .map_err(|e| match e {
        Error::NonFiniteLoss { .. } => Failure::runtime(e.to_string()),
        other => other.into(),
    })?;
    if val.is_empty() {
        outcome.best.save(a.out.join("best.ckpt"))?;
    }
    println!("{}", a.out.join("best.ckpt").display());
    Ok(())
}

fn apply_prompt_flags(cfg: &mut EvalConfig, f: &PromptFlags) {
    if let Some(n) = f.iterations {
        cfg.iterations = n;
    }
    if let Some(t) = f.tau {
        cfg.tau = t;
    }
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
}

fn eval(a: EvalArgs) -> CliResult {
    let mut base: EvalConfig = read_config(a.config.as_deref())?;
    apply_prompt_flags(&mut base, &a.common);
    base.validate()?;
    let models = a.checkpoint.iter().map(|c| load_checkpoint(c)).collect::<CliResult<Vec<_>>>()?;
    let patch = models[0].1.config().patch_size;
    if let Some((id, _)) = models.iter().find(|(_, m)| m.config().patch_size != patch) {
        return Err(Failure::usage(format!("checkpoint {id} has a different patch size")));
    }
    let cases: Vec<_> =
        load_split(&a.data, parse_split(&a.split)?, patch, base.seed)?.into_iter().map(|p| p.case).collect();
    let boxes = if a.boxes.is_empty() {
        vec![base.box_mode]
    } else {
        a.boxes.iter().map(|b| b.parse::<BoxMode>()).collect::<Result<_, _>>()?
    };
    let grid = AblationGrid {
        points: if a.points.is_empty() { vec![base.points] } else { a.points },
        boxes,
        scribbles: if a.scribbles.is_empty() { vec![base.scribbles] } else { a.scribbles },
    };
    let mut variants: Vec<(&str, Segmenter)> =
        models.iter().map(|(id, m)| (id.as_str(), Segmenter::Network(m))).collect();
    if a.oracle {
        variants.push(("oracle", Segmenter::GroundTruth));
    }
    let report = ablation_matrix(&variants, &cases, &grid, &base)?;
    for r in &report.rows {
        eprintln!(
            "{:<12} points {:>2}  box {:<6}  scribbles {:<5}  dice {:.4} ± {:.4}  nsd {:.4} ± {:.4}",
            r.variant,
            r.points,
            r.box_mode.name(),
            r.scribbles,
            r.dice,
            r.dice_ci,
            r.nsd,
            r.nsd_ci
        );
    }
    let body = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime(e.to_string()))?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut cfg: EvalConfig = read_config(a.config.as_deref())?;
    apply_prompt_flags(&mut cfg, &a.common);
    if let Some(p) = a.points {
        cfg.points = p;
    }
    if let Some(b) = &a.box_mode {
        cfg.box_mode = b.parse()?;
    }
    if let Some(s) = a.scribbles {
        cfg.scribbles = s;
    }
    cfg.validate()?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let p = model.config().patch_size;
    let spec = SynthSpec { seed: cfg.seed, ..SynthSpec::for_grid(p) };
    let case = generate_case(&spec, a.case_seed)?;
    let gt = case.label.clone();
    let source = SyntheticSource { spec: Some(spec), case_seed: a.case_seed };
    let mut session = Session::create("sim".into(), ckpt, Arc::new(model), case.image, Some(case.label), Some(source))?;
    let mut rng = derive_rng(cfg.seed, &[0]);
    let bbox = cfg.box_mode.box_for(&gt)?;
    let scribble_cfg = cfg.scribbles.then_some(&cfg.scribble);
    println!("iteration  selected  score    dice     nsd");
    for i in 1..=cfg.iterations {
        let (points, scribbles) = simulate_prompts(session.mask(), &gt, cfg.points, scribble_cfg, &mut rng)?;
        let req = PromptRequest { version: WIRE_VERSION, points, bbox: if i == 1 { bbox } else { None }, scribbles };
        let r = session.submit(&req)?;
        let dice = dice_score(session.mask(), &gt)?;
        let nsd = nsd_score(session.mask(), &gt, cfg.tau, gt.spacing())?;
        println!("{:>9}  {:>8}  {:.4}  {dice:.4}  {nsd:.4}", r.iteration, r.selected, r.selected_score);
    }
    if let Some(path) = &a.log {
        write_json(path, &session.export())?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut cfg: ServeConfig = read_config(a.config.as_deref())?;
    if let Some(h) = a.host {
        cfg.host = h;
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if a.checkpoint_dir.is_some() {
        cfg.checkpoint_dir = a.checkpoint_dir;
    }
    if a.default_checkpoint.is_some() {
        cfg.default_checkpoint = a.default_checkpoint;
    }
    if let Some(t) = a.ttl_secs {
        cfg.ttl_secs = t;
    }
    if a.export_dir.is_some() {
        cfg.export_dir = a.export_dir;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.ttl_secs == 0 {
        return Err(Failure::usage("ttl_secs must be positive"));
    }
    let registry = match &cfg.checkpoint_dir {
        Some(dir) => {
            let reg = ModelRegistry::from_dir(dir, cfg.default_checkpoint.as_deref())?;
            if reg.ids().is_empty() {
                return Err(Failure::data(format!("no *.ckpt files in {}", dir.display())));
            }
            reg
        }
        None => {
            let mut reg = ModelRegistry::new();
            reg.insert("tiny", load_checkpoint(BUILTIN)?.1);
            reg
        }
    };
    let ttl = Duration::from_secs(cfg.ttl_secs);
    let manager = SessionManager::new(registry, ManagerConfig { ttl, export_dir: cfg.export_dir.clone(), seed: cfg.seed });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    rt.block_on(server::run(&cfg.host, cfg.port, Arc::new(manager), ttl))
        .map_err(|e| Failure::runtime(e.to_string()))
}

fn export(a: ExportArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.log).map_err(|e| Failure::data(format!("{}: {e}", a.log.display())))?;
    let (log, recorded_mask) = match serde_json::from_str::<ExportResponse>(&text) {
        Ok(x) => (x.log, x.mask_vgrid),
        Err(_) => (
            serde_json::from_str::<SessionLog>(&text).map_err(|e| Failure::data(format!("{}: {e}", a.log.display())))?,
            None,
        ),
    };
    let spec = a.checkpoint.clone().unwrap_or_else(|| {
        if log.checkpoint == "tiny" { BUILTIN.to_string() } else { log.checkpoint.clone() }
    });
    let (_, model) = load_checkpoint(&spec)?;
    let (volume, label) = match (&a.volume, &log.synthetic) {
        (Some(v), _) => {
            let label = match &a.label {
                Some(l) => Some(read_grid(l)?.into_mask()?),
                None => None,
            };
            (read_grid(v)?.into_volume()?, label)
        }
        (None, Some(src)) => {
            // Hand-written logs may omit the spec.
            let spec = src.spec.clone().unwrap_or_else(|| SynthSpec {
                seed: a.seed.unwrap_or(0),
                ..SynthSpec::for_grid(model.config().patch_size)
            });
            let case = generate_case(&spec, src.case_seed)?;
            (case.image, Some(case.label))
        }
        (None, None) => return Err(Failure::usage("the log is not synthetic; pass --volume")),
    };
    let session = replay(Arc::new(model), volume, label, &log)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    let mask = session.mask().clone().with_spacing(log.spacing)?;
    write_grid(&AnyGrid::Mask(mask), a.out.join("mask.vgrid"))?;
    write_json(&a.out.join("session.json"), &session.export())?;
    if let Some(recorded) = recorded_mask {
        let before = decode(&b64_decode(&recorded)?)?.into_mask()?;
        if before.data() != session.mask().data() {
            return Err(Failure::runtime("replayed mask differs from the recorded one"));
        }
        println!("replay matches the recorded mask");
    }
    println!("{}", a.out.join("mask.vgrid").display());
    Ok(())
}
