//! `lidarloop` command line tool.
//!
//! Exit status: 0 on success, 1 when the work itself fails (unreadable
//! files, training errors, ...), 2 for usage errors including bad
//! configuration values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::{json, Value};

use lidarloop::descriptor::extract;
use lidarloop::detector::{
    all_pairs, build_training_set, evaluate, roc_points, select_best, train, train_candidates, tune_threshold, DetectorError, DetectorModel,
    Rates,
};
use lidarloop::harness::{
    build_dataset, classification_matrix, distance_matrix, matrix_rates, replay_dataset, synth_world, Dataset, DatasetManifest,
    HarnessConfig, ReplayError, SynthConfig,
};
use lidarloop::pointcloud::load_cloud;
use lidarloop::registration::register_pair;

#[derive(Parser)]
#[command(name = "lidarloop", version, about = "LiDAR loop closure detection, verification and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file: `key = value` lines, one section per module.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Parameter preset (campus, kitti or desk); wins over the file's preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one setting, e.g. `--set search.r_min=7.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Print a machine-readable JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Extract descriptors for a dataset (cached) or for one cloud.
    Features(FeaturesArgs),
    /// Train a loop detector on a dataset.
    Train(TrainArgs),
    /// Pick the detector threshold on a held-out dataset.
    Tune(TuneArgs),
    /// Detection and false-alarm rates on a dataset.
    Eval(EvalArgs),
    /// ROC curve of a detector on a dataset.
    Roc(RocArgs),
    /// Ground-truth and classification matrices as CSV and PGM.
    Matrices(MatricesArgs),
    /// Register two clouds and print the 4x4 transform and the verdict.
    Register(RegisterArgs),
    /// Run a dataset through the full loop closure pipeline.
    Replay(ReplayArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct FeaturesInput {
    /// Dataset manifest (JSON).
    #[arg(long, group = "input")]
    manifest: Option<PathBuf>,
    /// Single cloud (KITTI `.bin` or CSV).
    #[arg(long, group = "input")]
    cloud: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    input: FeaturesInput,
    /// Write the descriptor of `--cloud` here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Boosting rounds.
    #[arg(long = "T", value_name = "ROUNDS")]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Candidate detectors to train; needs `--heldout` to choose among them.
    #[arg(long)]
    candidates: Option<usize>,
    /// Held-out dataset used to tune and select the detector.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    fa_target: Option<f64>,
    #[arg(long)]
    loop_distance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out dataset manifest.
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    fa_target: Option<f64>,
    #[arg(long)]
    loop_distance: Option<f64>,
    /// Write the model with the tuned threshold here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Threshold; defaults to the one stored in the model.
    #[arg(long)]
    p_min: Option<f64>,
    #[arg(long)]
    loop_distance: Option<f64>,
}

#[derive(Args)]
struct RocArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    loop_distance: Option<f64>,
    /// CSV output (`threshold,false_alarm,detection`); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatricesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    p_min: Option<f64>,
    #[arg(long)]
    loop_distance: Option<f64>,
    /// Directory for `distance.{csv,pgm}` and `classification.{csv,pgm}`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    /// Cloud to move.
    #[arg(long)]
    source: PathBuf,
    /// Reference cloud.
    #[arg(long)]
    target: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Detector threshold; defaults to the one stored in the model.
    #[arg(long)]
    p_min: Option<f64>,
    #[arg(long)]
    loop_distance: Option<f64>,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump the optimized graph as `nodes.csv` and `edges.csv`.
    #[arg(long)]
    graph_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives scans, pose files and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square route with one closing lap instead of the default rectangle.
    #[arg(long)]
    square: bool,
    #[arg(long)]
    laps: Option<f64>,
    /// First node of every session, comma separated (e.g. `0,80`).
    #[arg(long, value_delimiter = ',')]
    sessions: Vec<usize>,
}

enum Failure {
    Usage(String),
    Operation(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operation(e)
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        Failure::Operation(e.into())
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        Failure::Operation(e.into())
    }
}

type Outcome = Result<Report, Failure>;

/// What a command prints: a text summary and the same content as JSON.
struct Report {
    text: String,
    json: Value,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = load_config(&cli.common).and_then(|cfg| run(cli.command, cfg));
    match result {
        Ok(report) => {
            if cli.common.json {
                println!("{}", serde_json::to_string_pretty(&report.json).expect("json value"));
            } else {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Operation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<HarnessConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Operation(anyhow!("cannot read {}: {e}", path.display())))?;
            HarnessConfig::from_ini_str_with_preset(&text, common.preset.as_deref()).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => HarnessConfig::preset(common.preset.as_deref().unwrap_or("campus")).map_err(|e| usage(e.to_string()))?,
    };
    for o in &common.overrides {
        cfg.set_dotted(o).map_err(|e| usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn validated(cfg: HarnessConfig) -> Result<HarnessConfig, Failure> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run(command: Command, mut cfg: HarnessConfig) -> Outcome {
    match command {
        Command::Features(a) => features(a, validated(cfg)?),
        Command::Train(a) => {
            if let Some(t) = a.rounds {
                cfg.training.rounds = t;
            }
            if let Some(s) = a.seed {
                cfg.training.seed = s;
            }
            if let Some(c) = a.candidates {
                cfg.training.candidates = c;
            }
            if let Some(f) = a.fa_target {
                cfg.training.fa_target = f;
            }
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            train_cmd(a, validated(cfg)?)
        }
        Command::Tune(a) => {
            if let Some(f) = a.fa_target {
                cfg.training.fa_target = f;
            }
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            tune_cmd(a, validated(cfg)?)
        }
        Command::Eval(a) => {
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            eval_cmd(a, validated(cfg)?)
        }
        Command::Roc(a) => {
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            roc_cmd(a, validated(cfg)?)
        }
        Command::Matrices(a) => {
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            matrices_cmd(a, validated(cfg)?)
        }
        Command::Register(a) => register_cmd(a, validated(cfg)?),
        Command::Replay(a) => {
            if a.loop_distance.is_some() {
                cfg.training.loop_distance = a.loop_distance;
            }
            replay_cmd(a, validated(cfg)?)
        }
        Command::Synth(a) => synth_cmd(a, validated(cfg)?),
    }
}

fn load_dataset(path: &Path, cfg: &HarnessConfig) -> anyhow::Result<Dataset> {
    let (manifest, base) = DatasetManifest::load(path).with_context(|| format!("manifest {}", path.display()))?;
    let mut ds = build_dataset(&manifest, base).with_context(|| format!("dataset {}", path.display()))?;
    if let Some(d) = cfg.training.loop_distance {
        ds.loop_distance = d;
    }
    log::info!("{}: {} nodes (cache {})", path.display(), ds.nodes.len(), if ds.cache_hit { "hit" } else { "miss" });
    Ok(ds)
}

fn load_model(path: &Path) -> anyhow::Result<DetectorModel> {
    DetectorModel::load(path).with_context(|| format!("model {}", path.display()))
}

fn load_pairs(ds: &Dataset, model: &DetectorModel) -> anyhow::Result<Vec<lidarloop::detector::LabeledPair>> {
    model.check_fingerprint(&ds.spec.fingerprint())?;
    Ok(all_pairs(&ds.positions(), &ds.descriptors(), ds.loop_distance)?)
}

fn pct(r: Option<f64>) -> String {
    r.map_or("n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn rates_text(r: &Rates) -> String {
    format!(
        "D {} FA {} (tp {} fn {} fp {} tn {})",
        pct(r.detection),
        pct(r.false_alarm),
        r.true_positives,
        r.false_negatives,
        r.false_positives,
        r.true_negatives
    )
}

fn features(a: FeaturesArgs, cfg: HarnessConfig) -> Outcome {
    if let Some(path) = a.input.manifest {
        if a.out.is_some() {
            return Err(usage("--out only applies to --cloud"));
        }
        let ds = load_dataset(&path, &cfg)?;
        let spec = &ds.spec;
        let text = format!(
            "nodes: {}\nsessions: {}\ncache: {}\nhistogram entries: {} {:?}\n",
            ds.nodes.len(),
            ds.sessions.len(),
            if ds.cache_hit { "hit" } else { "built" },
            spec.total_entries(),
            spec.dimensions()
        );
        let json = json!({
            "nodes": ds.nodes.len(),
            "sessions": ds.sessions,
            "cache_hit": ds.cache_hit,
            "histogram_entries": spec.total_entries(),
            "histogram_dimensions": spec.dimensions(),
            "spec_fingerprint": spec.fingerprint(),
        });
        return Ok(Report { text, json });
    }
    let path = a.input.cloud.expect("clap enforces one input");
    let cloud = load_cloud(&path).with_context(|| format!("cloud {}", path.display()))?;
    let d = extract(&cloud, &cfg.descriptor).with_context(|| format!("descriptor of {}", path.display()))?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string(&d).context("descriptor json")?).with_context(|| format!("write {}", out.display()))?;
    }
    let mut text = format!("points: {}\ntype-I:", cloud.len());
    for v in d.type1() {
        let _ = write!(text, " {v:.6}");
    }
    let _ = writeln!(text, "\nhistogram entries: {} {:?}", cfg.descriptor.total_entries(), cfg.descriptor.dimensions());
    Ok(Report {
        text,
        json: json!({ "points": cloud.len(), "descriptor": d, "histogram_entries": cfg.descriptor.total_entries() }),
    })
}

fn train_cmd(a: TrainArgs, cfg: HarnessConfig) -> Outcome {
    let t = &cfg.training;
    if a.heldout.is_none() && a.candidates.is_some_and(|c| c > 1) {
        return Err(usage("--candidates above 1 needs --heldout to choose among them"));
    }
    let ds = load_dataset(&a.manifest, &cfg)?;
    let positions = ds.positions();
    let descriptors = ds.descriptors();
    let fingerprint = ds.spec.fingerprint();

    let mut selected = None;
    let (model, extra) = match &a.heldout {
        None => {
            let pairs = build_training_set(&positions, &descriptors, ds.loop_distance, t.seed)?;
            let (model, report) = train(&pairs, t.rounds, &fingerprint)?;
            let final_error = report.training_errors.last().copied();
            (model, json!({ "training_pairs": pairs.len(), "training_error": final_error, "stopped_early": report.stopped_early }))
        }
        Some(h) => {
            let held = load_dataset(h, &cfg)?;
            let mut models = train_candidates(&positions, &descriptors, ds.loop_distance, t.rounds, t.candidates, t.seed)?;
            let pairs = load_pairs(&held, &models[0])?;
            for m in &mut models {
                m.p_min = tune_threshold(m, &pairs, t.fa_target)?.p_min;
            }
            let sel = select_best(&models, &pairs, t.fa_target)?;
            let model = models.swap_remove(sel.index);
            selected = Some((sel.index, sel.rates));
            let extra = json!({
                "candidates": t.candidates,
                "selected": sel.index,
                "target_met": !sel.warning,
                "heldout_rates": sel.rates,
            });
            (model, extra)
        }
    };
    model.save(&a.out).with_context(|| format!("write {}", a.out.display()))?;
    let mut text = format!(
        "model: {}\nrounds: {} ({} stumps)\np_min: {}\n",
        a.out.display(),
        model.rounds,
        model.stumps.len(),
        model.p_min
    );
    if let Some((index, rates)) = selected {
        let _ = writeln!(text, "selected candidate {index} of {}: {}", t.candidates, rates_text(&rates));
    }
    Ok(Report {
        text,
        json: json!({
            "model": a.out,
            "rounds": model.rounds,
            "stumps": model.stumps.len(),
            "p_min": model.p_min,
            "details": extra,
        }),
    })
}

fn tune_cmd(a: TuneArgs, cfg: HarnessConfig) -> Outcome {
    let mut model = load_model(&a.model)?;
    let held = load_dataset(&a.heldout, &cfg)?;
    let pairs = load_pairs(&held, &model)?;
    let out = tune_threshold(&model, &pairs, cfg.training.fa_target)?;
    if !out.achieved {
        log::warn!("false-alarm target {} not reachable; p_min set to 1", cfg.training.fa_target);
    }
    if let Some(path) = &a.out {
        model.p_min = out.p_min;
        model.save(path).with_context(|| format!("write {}", path.display()))?;
    }
    Ok(Report {
        text: format!(
            "p_min: {}\nD: {}\nFA: {}\ntarget met: {}\n",
            out.p_min,
            pct(out.rates.detection),
            pct(out.rates.false_alarm),
            out.achieved
        ),
        json: json!({ "p_min": out.p_min, "rates": out.rates, "achieved": out.achieved, "fa_target": cfg.training.fa_target }),
    })
}

fn eval_cmd(a: EvalArgs, cfg: HarnessConfig) -> Outcome {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    let pairs = load_pairs(&ds, &model)?;
    let p_min = a.p_min.unwrap_or(model.p_min);
    let rates = evaluate(&model, p_min, &pairs)?;
    Ok(Report {
        text: format!("p_min: {p_min}\npairs: {}\n{}\n", pairs.len(), rates_text(&rates)),
        json: json!({ "p_min": p_min, "pairs": pairs.len(), "rates": rates }),
    })
}

fn roc_cmd(a: RocArgs, cfg: HarnessConfig) -> Outcome {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    let pairs = load_pairs(&ds, &model)?;
    let points = roc_points(&model, &pairs)?;
    let mut csv = String::from("threshold,false_alarm,detection\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", p.threshold, p.false_alarm, p.detection);
    }
    let text = match &a.out {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("write {}", path.display()))?;
            format!("{} points written to {}\n", points.len(), path.display())
        }
        None => csv,
    };
    Ok(Report {
        text,
        json: json!({ "points": points }),
    })
}

fn matrices_cmd(a: MatricesArgs, cfg: HarnessConfig) -> Outcome {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    model.check_fingerprint(&ds.spec.fingerprint())?;
    let p_min = a.p_min.unwrap_or(model.p_min);
    let truth = distance_matrix(&ds.positions(), ds.loop_distance);
    let classified = classification_matrix(&ds.descriptors(), &model, p_min)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("create {}", a.out_dir.display()))?;
    truth.save(a.out_dir.join("distance")).context("write distance matrix")?;
    classified.save(a.out_dir.join("classification")).context("write classification matrix")?;
    let rates = matrix_rates(&classified, &truth);
    Ok(Report {
        text: format!(
            "nodes: {}\ndistance ones: {}\nclassification ones: {}\n{}\nwritten to {}\n",
            truth.n,
            truth.count_ones(),
            classified.count_ones(),
            rates_text(&rates),
            a.out_dir.display()
        ),
        json: json!({
            "nodes": truth.n,
            "p_min": p_min,
            "distance_ones": truth.count_ones(),
            "classification_ones": classified.count_ones(),
            "rates": rates,
            "out_dir": a.out_dir,
        }),
    })
}

fn register_cmd(a: RegisterArgs, cfg: HarnessConfig) -> Outcome {
    let source = load_cloud(&a.source).with_context(|| format!("cloud {}", a.source.display()))?;
    let target = load_cloud(&a.target).with_context(|| format!("cloud {}", a.target.display()))?;
    let result = register_pair(&source, &target, &cfg.replay.registration);
    let m = result.transform.to_homogeneous();
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| m[(i, j)]).collect()).collect();
    let mut text = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        let _ = writeln!(text, "{}", cells.join(" "));
    }
    let _ = writeln!(text, "verdict: {}", result.verdict);
    Ok(Report {
        text,
        json: json!({
            "matrix": rows.concat(),
            "verdict": result.verdict.to_string(),
            "result": result,
        }),
    })
}

fn replay_cmd(a: ReplayArgs, cfg: HarnessConfig) -> Outcome {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.manifest, &cfg)?;
    let mut rc = cfg.replay.clone();
    rc.search.p_min = a.p_min.unwrap_or(model.p_min);
    let report = replay_dataset(&ds, &model, &rc)?;
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&report).context("report json")?).with_context(|| format!("write {}", path.display()))?;
    }
    if let Some(dir) = &a.graph_dir {
        report.graph.dump(dir).with_context(|| format!("dump graph to {}", dir.display()))?;
    }
    let mut text = format!(
        "nodes: {}\nloops attempted {} verified {} registered {} accepted {} (undone as inconsistent {})\n",
        report.nodes, report.attempted, report.verified, report.registered, report.accepted, report.inconsistent
    );
    if let Some(r) = &report.rates {
        let _ = writeln!(text, "detector: {}", rates_text(r));
    }
    for (node, from, to) in &report.transitions {
        let _ = writeln!(text, "mode {from:?} -> {to:?} at node {node}");
    }
    if let Some(e) = &report.endpoint {
        let _ = writeln!(
            text,
            "endpoint (node {}): odometry error {:.3} m, optimized {:.3} m ({:.1}% reduction)",
            e.node,
            e.odometry,
            e.optimized,
            100.0 * e.reduction()
        );
    }
    if !report.failures.is_empty() {
        let _ = writeln!(text, "failures: {}", report.failures.len());
    }
    let t = &report.timing;
    let _ = writeln!(
        text,
        "time: search {:.2}s registration {:.2}s optimization {:.2}s total {:.2}s",
        t.search_s, t.registration_s, t.optimization_s, t.total_s
    );
    let json = serde_json::to_value(&report).context("report json")?;
    Ok(Report { text, json })
}

fn synth_cmd(a: SynthArgs, cfg: HarnessConfig) -> Outcome {
    let mut sc = if a.square { SynthConfig::square_loop(a.seed) } else { SynthConfig { seed: a.seed, ..SynthConfig::default() } };
    if let Some(l) = a.laps {
        if l.is_nan() || l <= 0.0 {
            return Err(usage("--laps must be positive"));
        }
        sc.laps = l;
    }
    if !a.sessions.is_empty() {
        if a.sessions[0] != 0 || a.sessions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage("--sessions must start at 0 and increase"));
        }
        sc.session_starts = a.sessions.clone();
    }
    let ds = synth_world(&sc);
    if sc.session_starts.last().is_some_and(|&s| s >= ds.len()) {
        return Err(usage(format!("--sessions: route has only {} nodes", ds.len())));
    }
    ds.write_to_dir(&a.out, &cfg.descriptor).with_context(|| format!("write {}", a.out.display()))?;
    let manifest = a.out.join("manifest.json");
    Ok(Report {
        text: format!("nodes: {}\nsessions: {:?}\nmanifest: {}\n", ds.len(), ds.sessions, manifest.display()),
        json: json!({ "nodes": ds.len(), "sessions": ds.sessions, "manifest": manifest, "config": sc }),
    })
}
