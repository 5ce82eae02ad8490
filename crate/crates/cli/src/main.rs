use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facedet::eval::{self, ellipse_to_box, EvalReport};
use facedet::experiment::{self, detect_all, load_dataset, loss_log_csv, synthetic_split, train_split_seed};
use facedet::geometry::{BBox, Detection};
use facedet::gradcheck;
use facedet::synthdata::{write_dataset, write_text};
use facedet::tinynet::{train, Checkpoint, Sample, TrainState};
use facedet::{Config, Error};

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "facedet", version, about = "Tiny two-stage face detector: data, training, detection and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines); flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Center-loss weight.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// Box-regression weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Hard-example mining for both heads: on or off.
    #[arg(long, global = true)]
    ohem: Option<String>,
    /// Comma-separated test scales, e.g. `0.5,1,2`.
    #[arg(long, global = true)]
    scales: Option<String>,
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: PGM images plus WIDER- and FDDB-style annotations.
    GenData {
        /// Which split to generate.
        #[arg(long, default_value = "test", value_parser = ["train", "test", "small"])]
        split: String,
        /// Number of images (default: the split size from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a detector; writes the config, a checkpoint and a loss log.
    Train {
        /// Dataset directory from `gen-data`; default is the in-memory training split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a trained detector over a dataset directory; writes FDDB-format detections.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Discrete/continuous ROC and PR from FDDB ellipse annotations.
    EvalFddb {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// False-positive count at which TPR is reported.
        #[arg(long)]
        fp_at: Option<usize>,
    },
    /// PR curve and AP from WIDER-style box annotations.
    EvalWider {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        fp_at: Option<usize>,
    },
    /// Finite-difference check of every loss, layer and the full network.
    Gradcheck,
    /// Paired trainings (center loss on/off, hard mining on/off) with a comparison report.
    Ablate,
}

enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let Cli { common, command } = cli;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match command {
        Command::GenData { split, count } => gen_data(&common, &split, count),
        Command::Train { data } => cmd_train(&common, data.as_deref()),
        Command::Detect { checkpoint, data } => cmd_detect(&common, &checkpoint, &data),
        Command::EvalFddb {
            annotations,
            detections,
            fp_at,
        } => eval_fddb(&common, &annotations, &detections, fp_at),
        Command::EvalWider {
            annotations,
            detections,
            fp_at,
        } => eval_wider(&common, &annotations, &detections, fp_at),
        Command::Gradcheck => cmd_gradcheck(&common),
        Command::Ablate => cmd_ablate(&common),
    }
}

impl Common {
    fn config(&self) -> CliResult<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::parse(&read_text(p)?)?,
            None => Config::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut Config) -> CliResult {
        let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(CliError::from);
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.steps {
            set("steps", v.to_string())?;
        }
        if let Some(v) = self.mu {
            set("mu", v.to_string())?;
        }
        if let Some(v) = self.lambda {
            set("lambda", v.to_string())?;
        }
        if let Some(v) = &self.ohem {
            set("ohem", v.clone())?;
            set("ohem_rpn", v.clone())?;
        }
        if let Some(v) = &self.scales {
            set("scales", v.clone())?;
        }
        if let Some(v) = self.score_threshold {
            set("score_threshold", v.to_string())?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{kv}`")))?;
            set(k.trim(), v.trim().to_string())?;
        }
        cfg.validate()?;
        Ok(())
    }

    fn out_dir(&self) -> CliResult<&Path> {
        let out = self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(out)
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    Ok(write_text(path, &text)?)
}

fn gen_data(common: &Common, split: &str, count: Option<usize>) -> CliResult {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    let (scene_cfg, seed, default_n) = match split {
        "train" => (cfg.clone(), train_split_seed(cfg.seed), cfg.train_images),
        "small" => (experiment::small_face_config(&cfg), experiment::test_split_seed(cfg.seed), cfg.test_images),
        _ => (cfg.clone(), experiment::test_split_seed(cfg.seed), cfg.test_images),
    };
    let manifest = write_dataset(&scene_cfg.scene_spec(seed), count.unwrap_or(default_n), out)?;
    println!(
        "wrote {} images with {} faces to {}",
        manifest.entries.len(),
        manifest.total_faces(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: Option<&Path>) -> CliResult {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    let samples: Vec<Sample> = match data {
        Some(dir) => load_dataset(dir)?.into_iter().map(|(_, s)| s).collect(),
        None => synthetic_split(&cfg, train_split_seed(cfg.seed), cfg.train_images)?,
    };
    let mut state = TrainState::new(&cfg)?;
    let mut log = String::from(facedet::tinynet::StepReport::CSV_HEADER);
    log.push('\n');
    let every = (cfg.steps / 20).max(1) as u64;
    train(&mut state, &cfg, &samples, |r| {
        log.push_str(&r.csv_row());
        log.push('\n');
        if r.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", r.step, r.total);
        }
    })?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    Checkpoint::from_state(cfg.digest(), state.step, &state.model, &state.centers).write(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join("loss.csv"), &log)?;
    println!("trained {} steps; checkpoint in {}", state.step, out.display());
    Ok(())
}

/// Config stored next to a checkpoint, verified against its digest, with
/// command-line overrides applied on top.
fn checkpoint_config(common: &Common, ck: &Checkpoint, ck_path: &Path) -> CliResult<Config> {
    let path = match &common.config {
        Some(p) => p.clone(),
        None => ck_path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let stored = Config::parse(&read_text(&path)?)?;
    if stored.digest() != ck.config_digest {
        return Err(CliError::Data(format!(
            "{} does not match the checkpoint's config digest",
            path.display()
        )));
    }
    let mut cfg = stored;
    common.apply(&mut cfg)?;
    if cfg.net_config() != Config::parse(&read_text(&path)?)?.net_config() {
        return Err(CliError::Usage("network settings cannot be overridden for a trained checkpoint".into()));
    }
    Ok(cfg)
}

fn cmd_detect(common: &Common, ck_path: &Path, data: &Path) -> CliResult {
    let ck = Checkpoint::read(ck_path)?;
    let cfg = checkpoint_config(common, &ck, ck_path)?;
    let (model, _) = ck.restore(cfg.net_config(), cfg.center_alpha)?;
    let out = common.out_dir()?;
    let images = load_dataset(data)?;
    let samples: Vec<Sample> = images.iter().map(|(_, s)| s.clone()).collect();
    let scales = cfg.scale_set()?;
    let dets = detect_all(&model, &cfg, &samples, Some(&scales), cfg.score_threshold)?;
    let named: Vec<(String, Vec<Detection>)> = images.into_iter().map(|(k, _)| k).zip(dets).collect();
    write_text(&out.join("detections.txt"), &eval::write_fddb_detections(&named))?;
    println!(
        "{} detections over {} images",
        named.iter().map(|(_, d)| d.len()).sum::<usize>(),
        named.len()
    );
    Ok(())
}

/// Aligns detections to annotated images; detections for unknown images are
/// an error, annotated images without detections get none.
fn align(
    gts: Vec<(String, Vec<BBox>)>,
    mut dets: std::collections::BTreeMap<String, Vec<Detection>>,
) -> CliResult<(Vec<Vec<Detection>>, Vec<Vec<BBox>>)> {
    let mut d = Vec::with_capacity(gts.len());
    let mut g = Vec::with_capacity(gts.len());
    for (key, boxes) in gts {
        d.push(dets.remove(&key).unwrap_or_default());
        g.push(boxes);
    }
    if let Some(extra) = dets.keys().next() {
        return Err(CliError::Data(format!("detections for unannotated image `{extra}`")));
    }
    Ok((d, g))
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult {
    write_text(&out.join("roc_discrete.csv"), &eval::roc_csv(&report.discrete))?;
    write_text(&out.join("roc_continuous.csv"), &eval::roc_csv(&report.continuous))?;
    write_text(&out.join("pr.csv"), &eval::pr_csv(&report.pr))?;
    write_json(&out.join("summary.json"), &report.summary)?;
    let s = &report.summary;
    println!(
        "AP {:.4}  discrete TPR@{}FP {:.4}  continuous TPR@{}FP {:.4}",
        s.average_precision, s.fp_at, s.discrete_tpr_at_fp, s.fp_at, s.continuous_tpr_at_fp
    );
    Ok(())
}

fn eval_fddb(common: &Common, annotations: &Path, detections: &Path, fp_at: Option<usize>) -> CliResult {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    let ann = eval::parse_fddb_annotations(&read_text(annotations)?)?;
    let gts: Vec<(String, Vec<BBox>)> = ann
        .into_iter()
        .map(|(k, es)| (k, es.iter().map(ellipse_to_box).collect()))
        .collect();
    let dets = eval::parse_fddb_detections(&read_text(detections)?)?;
    let (d, g) = align(gts, dets)?;
    let report = eval::evaluate(&d, &g, cfg.eval_iou, fp_at.unwrap_or(cfg.eval_fp_at))?;
    write_report(out, &report)
}

fn eval_wider(common: &Common, annotations: &Path, detections: &Path, fp_at: Option<usize>) -> CliResult {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    let mut gts = eval::parse_wider_annotations(&read_text(annotations)?)?;
    for (k, _) in gts.iter_mut() {
        *k = eval::image_key(k).to_string();
    }
    let dets = eval::parse_fddb_detections(&read_text(detections)?)?;
    let (d, g) = align(gts, dets)?;
    let report = eval::evaluate(&d, &g, cfg.eval_iou, fp_at.unwrap_or(cfg.eval_fp_at))?;
    write_report(out, &report)
}

fn cmd_gradcheck(common: &Common) -> CliResult {
    let cfg = common.config()?;
    let report = gradcheck::run(cfg.seed)?;
    for c in &report.checks {
        println!(
            "{:<18} cases {:>3}  max rel error {:.3e}  tol {:.0e}  {}",
            c.name,
            c.cases,
            c.max_relative_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check("gradient check exceeded tolerance".into()))
    }
}

fn cmd_ablate(common: &Common) -> CliResult {
    let cfg = common.config()?;
    let out = common.out_dir()?.to_path_buf();
    let mut write_err = None;
    let report = experiment::ablate(&cfg, |name, vcfg, log| {
        eprintln!("finished {name}");
        let r = write_text(&out.join(format!("{name}.loss.csv")), &loss_log_csv(log))
            .and_then(|_| write_text(&out.join(format!("{name}.config.txt")), &vcfg.to_text()));
        if let Err(e) = r {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    write_json(&out.join("ablation.json"), &report)?;
    for v in &report.variants {
        println!(
            "{:<16} AP {:.4} (multi-scale {:.4})  face trace {:.4}  background trace {:.4}",
            v.name, v.single_scale.average_precision, v.multi_scale.average_precision, v.trace_face, v.trace_background
        );
    }
    Ok(())
}
