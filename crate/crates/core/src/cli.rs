//! The `aod` command-line front end.
//!
//! Exit codes: 0 ok, 1 usage, 2 validation or I/O, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::extract_features;
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, save_dataset, AnnotatedImage, Dataset, SceneConfig};
use crate::diffcore::{op_grad_check, Checkpoint, OpKind};
use crate::error::{AodError, Result};
use crate::eval::{dataset_gts, detect_all, detect_image, evaluate, EvalResults};
use crate::reinforce::{BaselineKind, RewardKind};
use crate::trainer::{load_network, network_grad_check, train, TrainConfig, TrainOptions};
use crate::viz::{render_ppm, render_svg, rollout_overlays};

#[derive(Debug, Parser)]
#[command(name = "aod", version, about = "Attentional object detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic detection dataset.
    GenData(GenDataArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint (VOC average precision).
    Eval(EvalArgs),
    /// Detect objects in one dataset image.
    Detect(DetectArgs),
    /// Render proposals, glimpses and final boxes.
    Visualize(VisualizeArgs),
    /// Finite-difference check of every op and of the full network.
    GradCheck(GradCheckArgs),
    /// Run the one-factor ablation matrix over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub context_cue: bool,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Run config whose `SceneConfig` is the starting point.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Continuous,
    Discrete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    ReturnNorm,
    Ema,
}

/// Flags that override fields of the training config.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of glimpse steps `T` (1 is the no-glimpse baseline).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub reward: Option<RewardArg>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub include_background: bool,
    #[arg(long, value_parser = ["4", "2"])]
    pub glimpse_dof: Option<String>,
    #[arg(long)]
    pub no_stacked_rnn: bool,
    #[arg(long)]
    pub no_eltwise_max: bool,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, t: &mut TrainConfig) {
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(s) = self.steps {
            t.aod.steps = s;
        }
        if let Some(r) = self.reward {
            t.rl.reward_kind = match r {
                RewardArg::Continuous => RewardKind::Continuous,
                RewardArg::Discrete => RewardKind::Discrete,
            };
        }
        if let Some(b) = self.baseline {
            t.rl.baseline_kind = match b {
                BaselineArg::ReturnNorm => BaselineKind::ReturnNorm,
                BaselineArg::Ema => BaselineKind::MovingAverage,
            };
        }
        if let Some(n) = self.episodes {
            t.rl.n_episodes = n;
        }
        if self.include_background {
            t.rl.include_background = true;
        }
        if let Some(d) = &self.glimpse_dof {
            t.aod.glimpse_dof = if d == "2" { 2 } else { 4 };
        }
        if self.no_stacked_rnn {
            t.aod.stacked_rnn = false;
        }
        if self.no_eltwise_max {
            t.aod.eltwise_max = false;
        }
        if let Some(i) = self.iterations {
            t.iterations = i;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Print the resolved configuration (with provenance) and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Record wall-clock time per step in the metrics file.
    #[arg(long)]
    pub wall_time: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Progress line every N steps (0 silences it).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub iou: Option<f64>,
    /// `voc2007_11pt` or `all_point`.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Directory for `results.json` and `results.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run config for the detection thresholds; its network must match the
    /// checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected number of glimpse steps; checked against the checkpoint.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Row label in the CSV.
    #[arg(long, default_value = "AOD")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image index inside the dataset.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image indices, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub images: Vec<usize>,
    /// Proposals rendered per image (the first ones of the list).
    #[arg(long, default_value_t = 4)]
    pub proposals: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel magnification of the PPM (and display size of the SVG).
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Corrupt one backward pass (negative control).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Steps,
    Episodes,
    Architecture,
    Baseline,
    Reward,
    Background,
    GlimpseDof,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "episodes,architecture,baseline,reward,background,glimpse-dof")]
    pub axes: Vec<Axis>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Directory for `ablation.csv` and `ablation.md`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|r| {
            println!("mAP {:.4} ({}, IoU {})", r.map, r.protocol.name(), r.iou_thresh);
            0
        }),
        Command::Detect(a) => cmd_detect(&a).map(|_| 0),
        Command::Visualize(a) => cmd_visualize(&a).map(|files| {
            println!("wrote {} files", files.len());
            0
        }),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| 0),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Dataset> {
    let mut scene: SceneConfig = load_config(a.config.as_deref())?.scene;
    scene.seed = a.seed;
    if a.context_cue {
        scene.context_cue = true;
    }
    if let Some(s) = a.image_size {
        scene.image_size = s;
    }
    if let Some(k) = a.classes {
        scene.num_classes = k;
    }
    let ds = generate_dataset(&scene, a.images)?;
    save_dataset(&ds, &a.out)?;
    Ok(ds)
}

/// Resolves the run config of `aod train`: file, then flags, then the
/// dataset's class count when the file does not fix one.
pub fn resolve_train_config(a: &TrainArgs, data: Option<&Dataset>) -> Result<RunConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg.train);
    if let Some(ds) = data {
        if a.config.is_none() {
            cfg.train.aod.num_classes = ds.num_classes();
        }
        cfg.scene = ds.scene_config.clone();
    }
    if let Some(d) = &a.data {
        cfg.paths.data = Some(d.display().to_string());
    }
    if let Some(o) = &a.out {
        cfg.paths.out = Some(o.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_path(flag: Option<&PathBuf>, cfg: Option<&String>) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| cfg.map(PathBuf::from))
        .ok_or_else(|| AodError::config("paths.data", "no dataset given (--data)"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file_cfg = load_config(a.config.as_deref())?;
    if a.print_config {
        let ds = match data_path(a.data.as_ref(), file_cfg.paths.data.as_ref()) {
            Ok(p) => Some(load_dataset(&p)?),
            Err(_) => None,
        };
        print!("{}", resolve_train_config(a, ds.as_ref())?.to_envelope()?);
        return Ok(());
    }
    let path = data_path(a.data.as_ref(), file_cfg.paths.data.as_ref())?;
    let ds = load_dataset(&path)?;
    let cfg = resolve_train_config(a, Some(&ds))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.paths.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| AodError::config("paths.out", "no output directory given (--out)"))?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), cfg.to_envelope()?)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        wall_time: a.wall_time,
        resume,
        log_every: a.log_every,
    };
    train::<f32>(&ds.images, &cfg.train, &opts)?;
    eprintln!("wrote {}", out.join("final.json").display());
    Ok(())
}

fn check_network(ck_cfg: &crate::aodnet::AodConfig, k: usize, steps: Option<usize>) -> Result<()> {
    if ck_cfg.num_classes != k {
        return Err(AodError::CheckpointMismatch(format!(
            "checkpoint has K = {}, dataset has K = {k}",
            ck_cfg.num_classes
        )));
    }
    if let Some(t) = steps {
        if t != ck_cfg.steps {
            return Err(AodError::CheckpointMismatch(format!(
                "checkpoint has T = {}, expected T = {t}",
                ck_cfg.steps
            )));
        }
    }
    Ok(())
}

/// Detects on every image of `images` and scores the result.
pub fn evaluate_network(
    images: &[AnnotatedImage],
    aod: &crate::aodnet::AodConfig,
    params: &crate::aodnet::AodParams<f32>,
    run: &RunConfig,
) -> Result<EvalResults> {
    let dets = detect_all(images, params, aod, &run.eval.detect())?;
    let (_, results) = evaluate(
        &dets,
        &dataset_gts(images),
        aod.num_classes,
        run.eval.iou_thresh,
        run.eval.protocol,
    )?;
    Ok(results)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalResults> {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(i) = a.iou {
        run.eval.iou_thresh = i;
    }
    if let Some(p) = &a.protocol {
        run.eval.protocol = p.parse()?;
    }
    if !(0.0..=1.0).contains(&run.eval.iou_thresh) {
        return Err(AodError::config("EvalConfig.iou_thresh", "must be in [0, 1]"));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (aod, params) = load_network::<f32>(&ck)?;
    let ds = load_dataset(&a.data)?;
    let steps = a.steps.or(a.config.as_ref().map(|_| run.train.aod.steps));
    check_network(&aod, ds.num_classes(), steps)?;
    let results = evaluate_network(&ds.images, &aod, &params, &run)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        results.save_json(&out.join("results.json"))?;
        std::fs::write(out.join("results.csv"), results.to_csv(&a.method))?;
    }
    Ok(results)
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (aod, params) = load_network::<f32>(&ck)?;
    let ds = load_dataset(&a.data)?;
    check_network(&aod, ds.num_classes(), None)?;
    let img = ds
        .images
        .get(a.image)
        .ok_or_else(|| AodError::config("image", format!("dataset has {} images", ds.images.len())))?;
    let (fm, _) = extract_features(&img.image, &aod.backbone, &params.backbone)?;
    let dets = detect_image(&fm, img.size(), &img.proposals, &params, &aod, &run.eval.detect(), a.image)?;
    for d in dets {
        println!("{}", serde_json::to_string(&d)?);
    }
    Ok(())
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (aod, params) = load_network::<f32>(&ck)?;
    let ds = load_dataset(&a.data)?;
    check_network(&aod, ds.num_classes(), None)?;
    std::fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for &i in &a.images {
        let img = ds
            .images
            .get(i)
            .ok_or_else(|| AodError::config("images", format!("index {i} out of range")))?;
        let (fm, _) = extract_features(&img.image, &aod.backbone, &params.backbone)?;
        for (j, p) in img.proposals.iter().take(a.proposals).enumerate() {
            let r = crate::aodnet::forward_rollout(
                &fm,
                img.size(),
                p,
                &params,
                &aod,
                crate::aodnet::Actions::Mean,
                None,
            )?;
            let overlays = rollout_overlays(&r)?;
            let stem = a.out.join(format!("{}_p{j:03}", img.id));
            let ppm = stem.with_extension("ppm");
            let svg = stem.with_extension("svg");
            std::fs::write(&ppm, render_ppm(&img.image, &overlays, a.scale)?)?;
            std::fs::write(&svg, render_svg(&img.image, &overlays, a.scale)?)?;
            files.push(ppm);
            files.push(svg);
        }
    }
    Ok(files)
}

/// One report line per op and per parameter group.
pub fn grad_check_report(eps: f64, corrupt: bool) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::new();
    for k in OpKind::ALL {
        rows.push((format!("op/{}", k.name()), op_grad_check(k, eps)?));
    }
    for g in network_grad_check(eps, corrupt)? {
        rows.push((format!("network/{}", g.group.name()), g.max_rel_error));
    }
    Ok(rows)
}

pub fn cmd_grad_check(a: &GradCheckArgs) -> Result<i32> {
    let rows = grad_check_report(a.eps, a.corrupt)?;
    let mut failed = 0;
    for (name, err) in &rows {
        let ok = *err < a.threshold;
        if !ok {
            failed += 1;
        }
        println!("{:<24} {:>10.3e}  {}", name, err, if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        eprintln!("{failed} of {} checks exceed {:e}", rows.len(), a.threshold);
        return Ok(3);
    }
    Ok(0)
}

/// One cell of the ablation matrix.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub axis: &'static str,
    pub setting: String,
    /// mAP reported by the method's authors for the same setting, if any.
    pub reference: Option<f64>,
    pub config: TrainConfig,
}

/// One-factor variations of `base` along each axis (the base value is one
/// of the rows of every axis).
pub fn ablation_matrix(base: &TrainConfig, axes: &[Axis]) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let mut push = |axis: &'static str, setting: &str, reference: Option<f64>, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        cells.push(AblationCell {
            axis,
            setting: setting.to_string(),
            reference,
            config: c,
        });
    };
    for axis in axes {
        match axis {
            Axis::Steps => {
                for t in [1usize, 2, 3] {
                    let r = [57.1, 57.8, 58.1][t - 1];
                    push("steps", &format!("T={t}"), Some(r), &|c| c.aod.steps = t);
                }
            }
            Axis::Episodes => {
                for (n, r) in [(2usize, 57.4), (4, 57.5), (8, 58.1), (16, 57.8)] {
                    push("episodes", &n.to_string(), Some(r), &|c| c.rl.n_episodes = n);
                }
            }
            Axis::Architecture => {
                for (stacked, max, name, r) in [
                    (true, true, "stacked+max", 58.1),
                    (false, true, "plain+max", 57.4),
                    (true, false, "stacked", 57.0),
                    (false, false, "plain", 57.2),
                ] {
                    push("architecture", name, Some(r), &|c| {
                        c.aod.stacked_rnn = stacked;
                        c.aod.eltwise_max = max;
                    });
                }
            }
            Axis::Baseline => {
                push("baseline", "return-norm", Some(58.1), &|c| c.rl.baseline_kind = BaselineKind::ReturnNorm);
                push("baseline", "ema", Some(57.8), &|c| c.rl.baseline_kind = BaselineKind::MovingAverage);
            }
            Axis::Reward => {
                push("reward", "continuous", Some(58.1), &|c| c.rl.reward_kind = RewardKind::Continuous);
                push("reward", "discrete", Some(57.8), &|c| c.rl.reward_kind = RewardKind::Discrete);
            }
            Axis::Background => {
                push("background", "excluded", Some(58.1), &|c| c.rl.include_background = false);
                push("background", "included", Some(57.6), &|c| c.rl.include_background = true);
            }
            Axis::GlimpseDof => {
                push("glimpse_dof", "4", Some(58.1), &|c| c.aod.glimpse_dof = 4);
                push("glimpse_dof", "2", Some(57.3), &|c| c.aod.glimpse_dof = 2);
            }
        }
    }
    cells
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Trains on `train_images` and returns the test results.
pub fn train_and_evaluate(
    train_images: &[AnnotatedImage],
    test_images: &[AnnotatedImage],
    cfg: &TrainConfig,
    run: &RunConfig,
) -> Result<EvalResults> {
    let state = train::<f32>(train_images, cfg, &TrainOptions::default())?;
    evaluate_network(test_images, &cfg.aod, &state.params, run)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub maps: Vec<f64>,
    pub median: f64,
    pub reference: Option<f64>,
}

pub fn ablation_tables(rows: &[AblationRow]) -> (String, String) {
    let mut csv = String::from("axis,setting,median_mAP,seed_mAPs,reference_mAP\n");
    let mut md = String::from(
        "| axis | setting | median mAP | per-seed mAP | reference mAP |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        let seeds: Vec<String> = r.maps.iter().map(|m| format!("{:.2}", 100.0 * m)).collect();
        let reference = r.reference.map(|v| format!("{v:.1}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{:.2},{},{}",
            r.axis,
            r.setting,
            100.0 * r.median,
            seeds.join(";"),
            reference
        );
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {} | {} |",
            r.axis,
            r.setting,
            100.0 * r.median,
            seeds.join(", "),
            reference
        );
    }
    (csv, md)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut run = load_config(a.config.as_deref())?;
    let train_ds = load_dataset(&a.data)?;
    let test_ds = load_dataset(&a.test_data)?;
    if train_ds.num_classes() != test_ds.num_classes() {
        return Err(AodError::config("test_data", "train and test datasets differ in K"));
    }
    if a.config.is_none() {
        run.train.aod.num_classes = train_ds.num_classes();
    }
    if let Some(i) = a.iterations {
        run.train.iterations = i;
    }
    run.scene = train_ds.scene_config.clone();
    run.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for cell in ablation_matrix(&run.train, &a.axes) {
        let mut maps = Vec::new();
        for s in 0..a.seeds {
            let mut c = cell.config.clone();
            c.seed = run.train.seed + s;
            let r = train_and_evaluate(&train_ds.images, &test_ds.images, &c, &run)?;
            eprintln!("{} {} seed {}: mAP {:.4}", cell.axis, cell.setting, c.seed, r.map);
            maps.push(r.map);
        }
        rows.push(AblationRow {
            axis: cell.axis,
            setting: cell.setting,
            median: median(&maps),
            maps,
            reference: cell.reference,
        });
    }
    let (csv, md) = ablation_tables(&rows);
    std::fs::write(a.out.join("ablation.csv"), csv)?;
    std::fs::write(a.out.join("ablation.md"), md)?;
    Ok(rows)
}
