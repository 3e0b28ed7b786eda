//! `nvs` subcommands: dataset generation, training, rendering, benchmarking,
//! profiling, ablations and view-count sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nvs_core::data::{build_dataset, write_image, Dataset, DatasetSpec, Split};
use nvs_core::kvcache::KvSession;
use nvs_core::metrics::{analytic_flops, csv_row, fit_scaling, measure, psnr, ScalingVar, CSV_HEADER};
use nvs_core::model::forward_full;
use nvs_core::repa::{RepaConfig, RepaLoss, RepaStream};
use nvs_core::trainer::{checkpoint_load, checkpoint_save, eval_order, evaluate, DecayScope, EvalRow, TrainConfig, TrainState, Trainer};
use nvs_core::{Image, ModelConfig, ParamStore, Paradigm, PosedView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RepaMode {
    Off,
    Input,
    Target,
    Both,
}

impl RepaMode {
    fn stream(self) -> Option<RepaStream> {
        match self {
            RepaMode::Off => None,
            RepaMode::Input => Some(RepaStream::InputOnly),
            RepaMode::Target => Some(RepaStream::TargetOnly),
            RepaMode::Both => Some(RepaStream::Both),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RepaLossArg {
    #[value(name = "smooth_l1")]
    SmoothL1,
    L2,
    Cosine,
}

impl From<RepaLossArg> for RepaLoss {
    fn from(a: RepaLossArg) -> Self {
        match a {
            RepaLossArg::SmoothL1 => RepaLoss::SmoothL1,
            RepaLossArg::L2 => RepaLoss::L2,
            RepaLossArg::Cosine => RepaLoss::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_iters: u64,
    pub batch: usize,
    pub iters: u64,
    pub weight_decay: f64,
    pub decay_scope: DecayScope,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            warmup_iters: t.warmup_iters,
            batch: t.batch,
            iters: t.iters,
            weight_decay: t.weight_decay,
            decay_scope: t.decay_scope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub scenes: usize,
    pub cams_per_scene: usize,
    pub split_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            scenes: d.n_scenes,
            cams_per_scene: d.cams_per_scene,
            split_ratio: d.split_ratio,
        }
    }
}

/// Effective configuration of one invocation, echoed to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub command: String,
    pub seed: u64,
    pub paradigm: Paradigm,
    pub n_in: usize,
    pub n_tgt: usize,
    pub res: usize,
    pub d_model: usize,
    pub layers: usize,
    pub patch: usize,
    pub heads: Option<usize>,
    pub canonicalize: bool,
    pub repa: RepaMode,
    pub repa_loss: RepaLoss,
    pub repa_weight: f64,
    pub teacher_dim: usize,
    pub train: TrainSection,
    pub data: DataSection,
    /// Dataset manifest read by train, render, eval and ablate.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<String>,
    pub incremental: bool,
    /// Input-view counts swept by bench, profile and eval.
    pub n_list: Vec<usize>,
    /// Target-view counts swept by bench and profile.
    pub m_list: Vec<usize>,
    pub timed_runs: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(Paradigm::CoRefinement);
        Self {
            command: String::new(),
            seed: 0,
            paradigm: Paradigm::CoRefinement,
            n_in: 2,
            n_tgt: 3,
            res: 32,
            d_model: desk.d_model,
            layers: desk.enc_layers,
            patch: desk.patch,
            heads: None,
            canonicalize: false,
            repa: RepaMode::Off,
            repa_loss: RepaLoss::SmoothL1,
            repa_weight: 0.5,
            teacher_dim: 32,
            train: TrainSection::default(),
            data: DataSection::default(),
            dataset: None,
            checkpoint: None,
            scene: None,
            incremental: false,
            n_list: vec![2, 4, 8, 16],
            m_list: vec![1, 2, 4, 8],
            timed_runs: 5,
        }
    }
}

impl CliConfig {
    pub fn model(&self) -> Result<ModelConfig> {
        self.model_for(self.paradigm, self.repa)
    }

    pub fn model_for(&self, paradigm: Paradigm, repa: RepaMode) -> Result<ModelConfig> {
        let depth = if paradigm.is_dual_stream() { self.layers } else { 2 * self.layers };
        let cfg = ModelConfig {
            paradigm,
            enc_layers: self.layers,
            dec_layers: self.layers,
            d_model: self.d_model,
            n_heads: self.heads,
            patch: self.patch,
            ffn_mult: 4,
            canonicalize_poses: self.canonicalize,
            repa: repa.stream().map(|stream| RepaConfig {
                stream,
                loss_kind: self.repa_loss,
                weight: self.repa_weight,
                ..RepaConfig::for_depth(depth, self.teacher_dim)
            }),
        };
        cfg.validate()?;
        cfg.check_image(self.res, self.res)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            warmup_iters: self.train.warmup_iters,
            batch: self.train.batch,
            iters: self.train.iters,
            weight_decay: self.train.weight_decay,
            decay_scope: self.train.decay_scope,
            n_in: self.n_in,
            n_tgt: self.n_tgt,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_scenes: self.data.scenes,
            cams_per_scene: self.data.cams_per_scene,
            split_ratio: self.data.split_ratio,
            height: self.res,
            width: self.res,
            seed: self.seed,
        }
    }

    fn manifest(&self) -> Result<&Path> {
        self.dataset.as_deref().context("no dataset given (use --data or \"dataset\" in --config)")
    }
}

/// Parses `a..b` as the doubling sequence from `a` to `b`, or a comma list.
pub fn parse_counts(s: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = || format!("expected A..B or a comma list of positive integers, got {s:?}");
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || b < a {
            return Err(bad());
        }
        std::iter::successors(Some(a), |&x| Some(x * 2)).take_while(|&x| x <= b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

/// A parsed `--N`/`--M`/`--n-list` value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counts(pub Vec<usize>);

fn parse_count_arg(s: &str) -> std::result::Result<Counts, String> {
    parse_counts(s).map(Counts)
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_paradigm)]
    pub paradigm: Option<Paradigm>,
    #[arg(long = "n-in", global = true)]
    pub n_in: Option<usize>,
    #[arg(long = "n-tgt", global = true)]
    pub n_tgt: Option<usize>,
    /// Square image resolution.
    #[arg(long, global = true)]
    pub res: Option<usize>,
    #[arg(long = "d-model", global = true)]
    pub d_model: Option<usize>,
    /// Blocks per stream; the single-stack baselines use twice as many.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub repa: Option<RepaMode>,
    #[arg(long = "repa-loss", global = true, value_enum)]
    pub repa_loss: Option<RepaLossArg>,
    /// Run directory; defaults to `runs/<timestamp>-<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_paradigm(s: &str) -> std::result::Result<Paradigm, String> {
    s.parse().map_err(|e: nvs_core::Error| e.to_string())
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        cams: Option<usize>,
        #[arg(long)]
        split: Option<f64>,
    },
    /// Train a model and evaluate it on the validation split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render the target views of one scene.
    Render {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint; freshly initialised weights when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        /// Render through a KV-cached session.
        #[arg(long)]
        incremental: bool,
    },
    /// Time and count FLOPs over N and M grids; writes CSV.
    Bench {
        #[arg(long = "N", value_parser = parse_count_arg)]
        n: Option<Counts>,
        #[arg(long = "M", value_parser = parse_count_arg)]
        m: Option<Counts>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Closed-form FLOP table over N with a scaling fit.
    Profile {
        #[arg(long = "N", value_parser = parse_count_arg)]
        n: Option<Counts>,
    },
    /// Train every dual-stream paradigm with and without alignment.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Sweep the number of input views of a trained model.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "n-list", value_parser = parse_count_arg)]
        n_list: Option<Counts>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Render { .. } => "render",
            Command::Bench { .. } => "bench",
            Command::Profile { .. } => "profile",
            Command::Ablate { .. } => "ablate",
            Command::Eval { .. } => "eval",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "nvs", version, about = "Posed novel view synthesis at desk scale", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut c = match &cli.common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CliConfig::default(),
    };
    let o = &cli.common;
    c.command = cli.command.name().to_owned();
    macro_rules! set {
        ($($field:ident <- $v:expr),* $(,)?) => {$(if let Some(v) = $v { c.$field = v; })*};
    }
    set!(seed <- o.seed, paradigm <- o.paradigm, n_in <- o.n_in, n_tgt <- o.n_tgt, res <- o.res, d_model <- o.d_model, layers <- o.layers, repa <- o.repa);
    if let Some(l) = o.repa_loss {
        c.repa_loss = l.into();
    }
    match &cli.command {
        Command::GenData { scenes, cams, split } => {
            if let Some(v) = scenes {
                c.data.scenes = *v;
            }
            if let Some(v) = cams {
                c.data.cams_per_scene = *v;
            }
            if let Some(v) = split {
                c.data.split_ratio = *v;
            }
        }
        Command::Train { data, iters, lr, batch, resume } => {
            if data.data.is_some() {
                c.dataset = data.data.clone();
            }
            if let Some(v) = iters {
                c.train.iters = *v;
            }
            if let Some(v) = lr {
                c.train.lr = *v;
            }
            if let Some(v) = batch {
                c.train.batch = *v;
            }
            if let Some(r) = resume {
                c.checkpoint = Some(r.clone());
            }
        }
        Command::Render { data, checkpoint, scene, incremental } => {
            if data.data.is_some() {
                c.dataset = data.data.clone();
            }
            if checkpoint.is_some() {
                c.checkpoint = checkpoint.clone();
            }
            if scene.is_some() {
                c.scene = scene.clone();
            }
            c.incremental |= *incremental;
        }
        Command::Bench { n, m, runs } => {
            set!(n_list <- n.clone().map(|c| c.0), m_list <- m.clone().map(|c| c.0), timed_runs <- *runs);
        }
        Command::Profile { n } => {
            set!(n_list <- n.clone().map(|c| c.0));
        }
        Command::Ablate { data, iters } => {
            if data.data.is_some() {
                c.dataset = data.data.clone();
            }
            if let Some(v) = iters {
                c.train.iters = *v;
            }
        }
        Command::Eval { data, checkpoint, n_list } => {
            if data.data.is_some() {
                c.dataset = data.data.clone();
            }
            if checkpoint.is_some() {
                c.checkpoint = checkpoint.clone();
            }
            set!(n_list <- n_list.clone().map(|c| c.0));
        }
    }
    Ok(c)
}

fn run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("runs").join(format!("{}-{command}", chrono::Local::now().format("%Y%m%d-%H%M%S"))),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Binary PPM, for quick inspection.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height())?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(cli)?;
    let dir = run_dir(cli.common.out.as_deref(), &cfg.command)?;
    write_json(&dir.join("config.json"), &cfg)?;
    match cli.command {
        Command::GenData { .. } => gen_data(&cfg, &dir, out),
        Command::Train { .. } => train(&cfg, &dir, out),
        Command::Render { .. } => render(&cfg, &dir, out),
        Command::Bench { .. } => bench(&cfg, &dir, out),
        Command::Profile { .. } => profile(&cfg, &dir, out),
        Command::Ablate { .. } => ablate(&cfg, &dir, out),
        Command::Eval { .. } => eval(&cfg, &dir, out),
    }
}

fn gen_data(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let m = build_dataset(&cfg.dataset_spec(), dir)?;
    writeln!(
        out,
        "wrote {} scenes ({} train, {} val) to {}",
        m.scenes.len(),
        m.split(Split::Train).count(),
        m.split(Split::Val).count(),
        dir.join("manifest.json").display()
    )?;
    Ok(())
}

fn open_dataset(cfg: &CliConfig) -> Result<Dataset> {
    let p = cfg.manifest()?;
    Dataset::open(p).with_context(|| format!("opening dataset {}", p.display()))
}

/// Trains `model` from scratch (or from the configured checkpoint), logging
/// to `dir`, and returns the final state plus its validation row.
fn train_model(cfg: &CliConfig, model: &ModelConfig, ds: &Dataset, dir: &Path, resume: Option<&Path>) -> Result<(TrainState, EvalRow)> {
    let tc = cfg.train_config();
    let trainer = Trainer::new(model.clone(), tc.clone(), ds)?;
    let mut state = match resume {
        Some(p) => checkpoint_load(p, Some(model))?.state,
        None => TrainState::new(model, cfg.seed)?,
    };
    let mut log = BufWriter::new(File::create(dir.join("train.jsonl"))?);
    trainer.run(&mut state, tc.iters, Some(&mut log))?;
    log.flush()?;
    checkpoint_save(&dir.join("model.elvs"), &state, model, &tc)?;
    let val = ds.indices(Split::Val);
    let scenes = if val.is_empty() { ds.indices(Split::Train) } else { val };
    let row = evaluate(&state.params, model, ds, &scenes, &[cfg.n_in], cfg.n_tgt, cfg.seed)?.remove(0);
    write_json(&dir.join("eval.json"), &row)?;
    Ok((state, row))
}

fn train(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let model = cfg.model()?;
    let (state, row) = train_model(cfg, &model, &ds, dir, cfg.checkpoint.as_deref())?;
    writeln!(
        out,
        "step {} val psnr {:.3} ssim {:.4} (copy baseline {:.3}) -> {}",
        state.step,
        row.psnr,
        row.ssim,
        row.baseline_psnr,
        dir.join("model.elvs").display()
    )?;
    Ok(())
}

fn load_params(cfg: &CliConfig, model: &ModelConfig) -> Result<ParamStore<f32>> {
    match &cfg.checkpoint {
        Some(p) => Ok(checkpoint_load(p, Some(model))?.state.params),
        None => Ok(ParamStore::init(model, cfg.seed)?),
    }
}

fn render(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let model = cfg.model()?;
    let params = load_params(cfg, &model)?;
    let scene = match &cfg.scene {
        Some(id) => ds.find(id).with_context(|| format!("no scene {id} in dataset"))?,
        None => ds.indices(Split::Val).first().copied().unwrap_or(0),
    };
    let views = ds.views(scene);
    if cfg.n_in + cfg.n_tgt > views.len() {
        bail!("scene has {} views, {} needed", views.len(), cfg.n_in + cfg.n_tgt);
    }
    let order = eval_order(views.len(), cfg.seed, scene);
    let targets: Vec<&PosedView> = order[..cfg.n_tgt].iter().map(|&i| &views[i]).collect();
    let inputs: Vec<PosedView> = order[cfg.n_tgt..cfg.n_tgt + cfg.n_in].iter().map(|&i| views[i].clone()).collect();
    let cams: Vec<_> = targets.iter().map(|t| t.camera.clone()).collect();
    let (h, w) = (views[0].image.height(), views[0].image.width());
    let images = if cfg.incremental {
        let mut session = KvSession::create(Arc::new(params), model)?;
        for v in &inputs {
            session.add_input_view(v)?;
        }
        cams.iter().map(|c| session.render_target(c, h, w)).collect::<nvs_core::Result<Vec<_>>>()?
    } else {
        forward_full(&inputs, &cams, &params, &model)?
    };
    for (j, (img, t)) in images.iter().zip(&targets).enumerate() {
        write_image(&dir.join(format!("target_{j}.imgf")), img)?;
        write_ppm(&dir.join(format!("target_{j}.ppm")), img)?;
        writeln!(out, "target {j}: psnr {:.3}", psnr(img, &t.image)?)?;
    }
    Ok(())
}

fn bench(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let model = cfg.model()?;
    let params = ParamStore::<f32>::init(&model, cfg.seed)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    writeln!(out, "{CSV_HEADER}")?;
    let fixed_m = cfg.n_tgt;
    let fixed_n = cfg.n_in;
    let grid = cfg
        .n_list
        .iter()
        .map(|&n| (n, fixed_m))
        .chain(cfg.m_list.iter().map(|&m| (fixed_n, m)));
    for (n, m) in grid {
        let r = measure(&model, n, m, cfg.res, cfg.res, &params, cfg.timed_runs)?;
        let row = csv_row(&r);
        writeln!(out, "{row}")?;
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(dir.join("bench.csv"), csv)?;
    Ok(())
}

fn profile(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let model = cfg.model()?;
    let reports = cfg
        .n_list
        .iter()
        .map(|&n| analytic_flops(&model, n, cfg.n_tgt, cfg.res, cfg.res))
        .collect::<nvs_core::Result<Vec<_>>>()?;
    writeln!(out, "{} at {}x{}, M={}", model.paradigm, cfg.res, cfg.res, cfg.n_tgt)?;
    writeln!(out, "{:>4} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>16}", "N", "encoder", "decoder_self", "decoder_cross", "ffn", "projections", "io", "total")?;
    for r in &reports {
        let a = &r.analytic;
        writeln!(
            out,
            "{:>4} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>16}",
            r.n_in,
            a.encoder,
            a.decoder_self,
            a.decoder_cross,
            a.ffn,
            a.projections,
            a.io,
            a.total()
        )?;
    }
    let fit = fit_scaling(&reports, ScalingVar::N);
    match &fit {
        Ok(f) => writeln!(out, "fitted exponent over N: {:.3}", f.exponent)?,
        Err(e) => writeln!(out, "no exponent fit: {e}")?,
    }
    write_json(&dir.join("profile.json"), &serde_json::json!({ "reports": reports, "fit": fit.ok() }))?;
    Ok(())
}

/// The dual-stream paradigms compared by `ablate`.
pub const ABLATION_PARADIGMS: [Paradigm; 3] = [Paradigm::CoRefinement, Paradigm::SelfThenCrossLastlayer, Paradigm::CrossOnly];

fn ablate(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let on = if cfg.repa == RepaMode::Off { RepaMode::Both } else { cfg.repa };
    let mut csv = String::from("paradigm,repa,psnr,ssim,baseline_psnr\n");
    writeln!(out, "{:<28} {:>6} {:>9} {:>8} {:>9}", "paradigm", "repa", "psnr", "ssim", "copy")?;
    for p in ABLATION_PARADIGMS {
        for mode in [RepaMode::Off, on] {
            let model = cfg.model_for(p, mode)?;
            let sub = dir.join(format!("{p}-{}", serde_json::to_value(mode)?.as_str().unwrap()));
            std::fs::create_dir_all(&sub)?;
            let (_, row) = train_model(cfg, &model, &ds, &sub, None)?;
            let tag = serde_json::to_value(mode)?.as_str().unwrap().to_owned();
            writeln!(out, "{:<28} {:>6} {:>9.3} {:>8.4} {:>9.3}", p.name(), tag, row.psnr, row.ssim, row.baseline_psnr)?;
            csv.push_str(&format!("{p},{tag},{:.6},{:.6},{:.6}\n", row.psnr, row.ssim, row.baseline_psnr));
        }
    }
    std::fs::write(dir.join("ablate.csv"), csv)?;
    Ok(())
}

fn eval(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let model = match &cfg.checkpoint {
        Some(p) => checkpoint_load(p, None)?.meta.model,
        None => cfg.model()?,
    };
    let params = load_params(cfg, &model)?;
    let val = ds.indices(Split::Val);
    let scenes = if val.is_empty() { ds.indices(Split::Train) } else { val };
    let rows = evaluate(&params, &model, &ds, &scenes, &cfg.n_list, cfg.n_tgt, cfg.seed)?;
    writeln!(out, "{:>4} {:>9} {:>8} {:>9} {:>8}", "n_in", "psnr", "ssim", "copy", "copy_ssim")?;
    for r in &rows {
        writeln!(out, "{:>4} {:>9.3} {:>8.4} {:>9.3} {:>8.4}", r.n_in, r.psnr, r.ssim, r.baseline_psnr, r.baseline_ssim)?;
    }
    write_json(&dir.join("eval.json"), &rows)?;
    Ok(())
}
