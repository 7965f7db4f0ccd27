use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};

use bgptree::curve_tree::{IndexSet, PointIndex, Topology, TopologyFile};
use bgptree::eval_metrics::{evaluate, DEFAULT_RESAMPLE_MM, DEFAULT_THRESHOLD_MM};
use bgptree::gp_core::{space_time_points, train_hyperparams, TrainConfig};
use bgptree::io;
use bgptree::kernels::{gram_sym, BgpKernel, CompositePlantKernel, CurveKernel, Hyperparams};
use bgptree::par::{configure_threads, Execution};
use bgptree::scene::{sample_sequence, synth_scene, Preset};
use bgptree::sequence::{SequenceFile, TreeSequence};
use bgptree::topology_search::{fit_full, SearchConfig};

#[derive(Parser, Debug)]
#[command(name = "bgptree", version, about = "Branching Gaussian process tree reconstruction")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic turntable scene with its ground truth.
    Synth(SynthArgs),
    /// Fit kernel hyperparameters to 3-D tree sequences.
    Train(TrainArgs),
    /// Reconstruct a tree sequence from a scene directory.
    Fit(FitArgs),
    /// Score a reconstructed sequence against ground truth.
    Eval(EvalArgs),
    /// Print the Gram matrix of a kernel over a set of sites.
    KernelGram(GramArgs),
    /// Draw a tree sequence from the plant prior.
    SamplePrior(SampleArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// easy or hard.
    #[arg(long, default_value = "easy")]
    preset: String,
    /// Ground-truth topology, replacing the preset's.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    n_views: Option<usize>,
    /// Turntable step in degrees.
    #[arg(long)]
    yaw_step: Option<f64>,
    /// Camera jitter in pixels.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    noise_amplitude: Option<u8>,
    #[arg(long)]
    flip_rate: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    px_per_mm: Option<f64>,
    #[arg(long)]
    stem_diameter: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Hyperparameter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Sequence files.
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
    /// Starting hyperparameters.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_evals: usize,
    /// Parameters held at their initial value, by file key.
    #[arg(long, value_delimiter = ',')]
    fix: Vec<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    seed: u64,
    /// Scene directory with cameras.txt, scene.json and map_NNN.pgm.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// EP passes per stage.
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Importance samples per tilted distribution.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    /// Hold bootstrap and birth sites fixed on the first EP pass.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    freeze_first_view: bool,
    /// Site spacing in mm.
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    fg_threshold: Option<f64>,
    /// Sweep EP outward from the anchored views before the regular passes.
    #[arg(long)]
    view_sweep: bool,
    /// Record wall-clock milliseconds in the trace.
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Reconstructed sequence file.
    model: PathBuf,
    /// Ground-truth sequence file.
    truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_MM)]
    threshold: f64,
    /// Resampling step along curves in mm.
    #[arg(long, default_value_t = DEFAULT_RESAMPLE_MM)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GramArgs {
    #[arg(long)]
    topology: PathBuf,
    /// Sites as `curve:t` pairs; defaults to the sites in the topology file.
    #[arg(long, value_delimiter = ',')]
    points: Vec<String>,
    /// Curve kernel as JSON, e.g. `{"kind":"wiener"}`. Without it the plant
    /// kernel of --hyper is used.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Times for the plant kernel.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    times: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Site spacing when the topology file lists no sites.
    #[arg(long, default_value_t = 1.0)]
    stride: f64,
    #[arg(long, default_value_t = 1)]
    frames: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = configure_threads(n) {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let run = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::KernelGram(a) => kernel_gram(a),
        Command::SamplePrior(a) => sample_prior(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_hyper(path: &Option<PathBuf>) -> Result<Hyperparams> {
    match path {
        Some(p) => {
            let h: Hyperparams = io::read_json(p).with_context(|| format!("reading hyperparameters {}", p.display()))?;
            h.validate()?;
            Ok(h)
        }
        None => Ok(Hyperparams::default()),
    }
}

fn load_topology(path: &Path) -> Result<(Topology, Option<IndexSet>)> {
    let f: TopologyFile = io::read_json(path).with_context(|| format!("reading topology {}", path.display()))?;
    Ok(f.into_parts()?)
}

fn load_sequence(path: &Path) -> Result<TreeSequence> {
    let f: SequenceFile = io::read_json(path).with_context(|| format!("reading sequence {}", path.display()))?;
    f.into_sequence().with_context(|| format!("sequence {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let preset = Preset::parse(&a.preset).ok_or_else(|| anyhow!("unknown preset {:?}", a.preset))?;
    let mut cfg = preset.config();
    if let Some(v) = a.n_views {
        cfg.n_views = v;
    }
    if let Some(v) = a.yaw_step {
        cfg.yaw_step_deg = v;
    }
    if let Some(v) = a.jitter {
        cfg.camera_jitter_px = v;
    }
    if let Some(v) = a.noise_amplitude {
        cfg.noise_amplitude = v;
    }
    if let Some(v) = a.flip_rate {
        cfg.flip_rate = v;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = a.px_per_mm {
        cfg.px_per_mm = v;
    }
    if let Some(v) = a.stem_diameter {
        cfg.shape.stem_diameter = v;
    }
    let hyper = load_hyper(&a.hyper)?;
    let topo = match &a.topology {
        Some(p) => load_topology(p)?.0,
        None => preset.topology(),
    };
    let sites = IndexSet::uniform(&topo, 1.0)?;
    let syn = synth_scene(&hyper, &topo, &sites, &cfg, a.seed).context("synth")?;
    let log_fg = syn.maps.views[0].log_fg.clone();
    let log_bg = syn.maps.views[0].log_bg.clone();
    let maps: Vec<_> = syn.maps.views.iter().map(|v| v.d.clone()).collect();
    let meta = io::SceneMeta {
        times: syn.times.clone(),
        stem_diameter: syn.shape.stem_diameter,
        log_fg,
        log_bg,
    };
    io::write_scene_dir(&a.out, &syn.cameras, &maps, &meta).context("writing scene")?;
    io::write_cameras(&a.out.join("true_cameras.txt"), &syn.true_cameras)?;
    io::write_json(&a.out.join("truth.json"), &SequenceFile::from_sequence(&syn.truth))?;
    for (i, m) in syn.truth_masks.iter().enumerate() {
        io::write_pbm(&a.out.join(format!("truth_mask_{i:03}.pbm")), m)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let seqs = a
        .sequences
        .iter()
        .map(|p| load_sequence(p).map(|s| s.to_training()))
        .collect::<Result<Vec<_>>>()?;
    let init = load_hyper(&a.init)?;
    let mut free = [true; 6];
    for name in &a.fix {
        let k = Hyperparams::NAMES
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| anyhow!("unknown hyperparameter {name:?}"))?;
        free[k] = false;
    }
    let cfg = TrainConfig {
        n_restarts: a.restarts,
        seed: a.seed,
        max_evals: a.max_evals,
        free,
        ..TrainConfig::default()
    };
    let res = train_hyperparams(&seqs, &init, &cfg).context("train")?;
    io::write_json(&a.out, &res.hyper)?;
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let scene = io::read_scene_dir(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    let hyper = load_hyper(&a.hyper)?;
    let mut cfg = SearchConfig {
        seed: a.seed,
        view_sweep: a.view_sweep,
        freeze_first_pass: a.freeze_first_view,
        record_timing: a.record_timing,
        ..SearchConfig::default()
    };
    cfg.ep.seed = a.seed;
    cfg.ep.n_iterations = a.iterations;
    if let Some(v) = a.samples {
        cfg.ep.n_samples = v;
    }
    if let Some(v) = a.damping {
        cfg.ep.damping = v;
    }
    if let Some(v) = a.stride {
        cfg.stride_mm = v;
    }
    if let Some(v) = a.fg_threshold {
        cfg.fg_threshold = v;
    }
    let res = fit_full(&scene, &hyper, &cfg).context("fit")?;

    fs::create_dir_all(&a.out)?;
    let state = &res.state;
    io::write_json(&a.out.join("topology.json"), &TopologyFile::from_parts(&state.topology, Some(&state.sites)))?;
    io::write_json(
        &a.out.join("sequence.json"),
        &SequenceFile::from_sequence(&state.to_sequence(&scene.times)?),
    )?;
    let covs: Vec<Vec<_>> = (0..scene.n_views())
        .map(|i| (0..state.n_sites()).map(|j| state.posterior.point(i, j).1).collect())
        .collect();
    io::write_json(&a.out.join("covariances.json"), &io::CovarianceFile::from_blocks(&covs))?;
    fs::write(a.out.join("trace.csv"), io::format_trace(&res.trace))?;
    let stages = a.out.join("stages");
    for (k, st) in res.stages.iter().enumerate() {
        let dir = stages.join(format!("{k:02}_{}", st.name.replace('@', "_")));
        fs::create_dir_all(&dir)?;
        io::write_json(&dir.join("topology.json"), &TopologyFile::from_parts(&st.state.topology, Some(&st.state.sites)))?;
        io::write_json(
            &dir.join("sequence.json"),
            &SequenceFile::from_sequence(&st.state.to_sequence(&scene.times)?),
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_sequence(&a.model)?;
    let truth = load_sequence(&a.truth)?;
    let ev = evaluate(&model, &truth, a.threshold, a.step, Execution::Parallel).context("eval")?;
    let mut out = String::from("frame,rms_mm,iou,matched,n_model,n_gt\n");
    for f in &ev.frames {
        let rms = f.rms_mm.map(|r| r.to_string()).unwrap_or_else(|| "nan".into());
        let _ = writeln!(out, "{},{},{},{},{},{}", f.frame, rms, f.iou, f.matched, f.n_model, f.n_gt);
    }
    let pooled = ev.pooled_rms().map(|r| r.to_string()).unwrap_or_else(|| "nan".into());
    let _ = writeln!(out, "\nsummary,pooled_rms_mm,mean_iou\nall,{pooled},{}", ev.mean_iou());
    let t = &ev.tsc;
    let _ = writeln!(
        out,
        "\ntsc_variant,score,geometric,parent_child,identity,opportunities\nall,{},{},{},{},{}",
        t.score, t.geometric_inconsistencies, t.parent_child_inconsistencies, t.identity_switches, t.opportunities
    );
    emit(&a.out, &out)
}

fn emit(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_points(topo: &Topology, specs: &[String]) -> Result<IndexSet> {
    let entries = specs
        .iter()
        .map(|s| {
            let (c, t) = s.split_once(':').ok_or_else(|| anyhow!("point {s:?} is not curve:t"))?;
            Ok(PointIndex::new(c.trim().parse()?, t.trim().parse()?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IndexSet::new(topo, entries)?)
}

fn kernel_gram(a: GramArgs) -> Result<()> {
    let (topo, file_sites) = load_topology(&a.topology)?;
    let sites = if a.points.is_empty() {
        file_sites.ok_or_else(|| anyhow!("no --points and the topology file lists no sites"))?
    } else {
        parse_points(&topo, &a.points)?
    };
    let topo = Arc::new(topo);
    let k = match &a.kernel {
        Some(json) => {
            let ck: CurveKernel = serde_json::from_str(json).context("parsing --kernel")?;
            let bgp = BgpKernel::new(ck, topo)?;
            let pts: Vec<_> = sites.iter().map(|p| (*p, 0.0)).collect();
            gram_sym(&bgp, &pts, Execution::Parallel)?
        }
        None => {
            let kernel = CompositePlantKernel::plant(&load_hyper(&a.hyper)?, topo)?;
            gram_sym(&kernel, &space_time_points(sites.entries(), &a.times), Execution::Parallel)?
        }
    };
    let mut out = String::new();
    for r in 0..k.nrows() {
        let row: Vec<String> = (0..k.ncols()).map(|c| k[(r, c)].to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    emit(&a.out, &out)
}

fn sample_prior(a: SampleArgs) -> Result<()> {
    if a.frames == 0 {
        bail!("--frames must be at least 1");
    }
    let (topo, sites) = load_topology(&a.topology)?;
    let sites = match sites {
        Some(s) => s,
        None => IndexSet::uniform(&topo, a.stride)?,
    };
    let hyper = load_hyper(&a.hyper)?;
    let times: Vec<f64> = (0..a.frames).map(|i| i as f64).collect();
    let seq = sample_sequence(&hyper, &topo, &sites, &times, a.seed).context("sample-prior")?;
    io::write_json(&a.out, &SequenceFile::from_sequence(&seq))?;
    Ok(())
}
