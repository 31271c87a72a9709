//! Command-line front end over the correspondence library: dataset
//! generation, training, evaluation, prediction export, preset experiment
//! grids, and relation-graph inspection.
//!
//! Every failure exits nonzero and prints a single line to stderr of the
//! form `error[code]: message`, where `code` is one of `parse`, `invalid`,
//! `tensor`, `io`, or `cli`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use densecorr::config::Config;
use densecorr::eval::{predict_scenes, report_from_predictions, substitution_sweep, ScenePredictions};
use densecorr::experiments::{self, Preset};
use densecorr::metrics::{substitute, EvalReport, SubstituteFlags};
use densecorr::model::Model;
use densecorr::synth::{self, SceneAnnotation, SceneCfg};
use densecorr::train::{log_csv, train};
use densecorr::transfer::{matrix_csv, RelationGraph};

#[derive(Parser)]
#[command(
    name = "densecorr",
    version,
    about = "Dense 2D-3D surface correspondence: train, evaluate and ablate on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
    /// Experiment configuration file (`key = value`); defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the configured RNG seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for multi-run commands (a single training run stays
    /// single-threaded for determinism)
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub threads: usize,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a model; writes checkpoint.bin, train_log.csv and config.txt
    Train,
    /// Evaluate a checkpoint; writes report.json and report_categories.csv
    Eval(EvalArgs),
    /// Export per-scene correspondence maps and detection scores as CSV
    Predict(PredictArgs),
    /// Run a preset experiment grid over three seeds; writes comparison CSVs
    Ablate(AblateArgs),
    /// Write the relation-graph matrices (semantic, dependence, combined) as CSV
    ExportGraph,
    /// Generate a synthetic dataset file
    GenData(GenDataArgs),
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained parameters to load
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Substitute the true body mask into the predictions
    #[arg(long)]
    pub gt_body: bool,
    /// Substitute the true surface labels, projecting predicted chart points
    #[arg(long)]
    pub gt_surface: bool,
    /// Substitute true U where the predicted surface is already right
    #[arg(long)]
    pub gt_u: bool,
    /// Substitute true V where the predicted surface is already right
    #[arg(long)]
    pub gt_v: bool,
    /// All four substitutions at once (upper bound: AP becomes 1)
    #[arg(long)]
    pub gt_all: bool,
    /// Also sweep all 16 substitution combinations into substitution.csv
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained parameters to load
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Export at most this many scenes
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Grid to run: table1 (modules), table3 (dilation rates),
    /// table4 (relation-graph variants) or fig7 (long-tail strategies)
    #[arg(value_name = "PRESET")]
    pub preset: String,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Dataset file to write
    #[arg(value_name = "PATH")]
    pub path: PathBuf,
    /// Number of scenes
    #[arg(long, value_name = "N")]
    pub scenes: usize,
    /// Figures per scene
    #[arg(long, default_value_t = 2, value_name = "N")]
    pub instances: usize,
    /// Scene width in pixels
    #[arg(long, default_value_t = 64, value_name = "PX")]
    pub width: usize,
    /// Scene height in pixels
    #[arg(long, default_value_t = 64, value_name = "PX")]
    pub height: usize,
    /// Background clutter quads per scene
    #[arg(long, default_value_t = 3, value_name = "N")]
    pub distractors: usize,
    /// Figure overlap allowance in [0,1]
    #[arg(long, default_value_t = 0.3, value_name = "F")]
    pub occlusion: f64,
    /// Mean annotated points per figure
    #[arg(long, default_value_t = 100.0, value_name = "F")]
    pub point_mean: f64,
}

/// Parses the process arguments, runs the command, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        anyhow::bail!("--threads must be at least 1");
    }
    match &cli.cmd {
        Cmd::Train => cmd_train(cli),
        Cmd::Eval(a) => cmd_eval(cli, a),
        Cmd::Predict(a) => cmd_predict(cli, a),
        Cmd::Ablate(a) => cmd_ablate(cli, a),
        Cmd::ExportGraph => cmd_export_graph(cli),
        Cmd::GenData(a) => cmd_gen_data(cli, a),
    }
}

/// The single-line machine-parseable error format.
pub fn error_line(e: &anyhow::Error) -> String {
    let msg = format!("{e:#}").replace('\n', "; ");
    format!("error[{}]: {msg}", error_code(e))
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(de) = cause.downcast_ref::<densecorr::Error>() {
            return match de {
                densecorr::Error::Parse(_) => "parse",
                densecorr::Error::Invalid { .. } => "invalid",
                densecorr::Error::Tensor(_) => "tensor",
                densecorr::Error::Io(_) => "io",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "cli"
}

/// Config file (or defaults) with the global overrides applied.
fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    Ok(apply_overrides(cli, cfg))
}

fn apply_overrides(cli: &Cli, mut cfg: Config) -> Config {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg
}

fn read_scenes(path: &Path, what: &str) -> anyhow::Result<Vec<SceneAnnotation>> {
    synth::read_dataset(path)
        .with_context(|| format!("reading {what} dataset {}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn load_model(cfg: &Config, checkpoint: &Path) -> anyhow::Result<Model> {
    let mut model = Model::new(cfg)?;
    model
        .params
        .load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(model)
}

fn cmd_train(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let scenes = read_scenes(&cfg.train_data, "training")?;
    let model = Model::new(&cfg)?;
    let log = train(&model, &scenes, &cfg)?;
    write_file(&cfg.out_dir, "config.txt", &cfg.echo())?;
    write_file(&cfg.out_dir, "train_log.csv", &log_csv(&log))?;
    model.params.save(&cfg.out_dir.join("checkpoint.bin"))?;
    let last = log.last().expect("config validation requires iters >= 1");
    println!(
        "trained {} iterations on {} scenes; final total loss {:.6}; wrote {}",
        log.len(),
        scenes.len(),
        last.total,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Applies ground-truth substitutions to each prediction map, pairing map
/// `i` with instance `i` of its scene.
fn apply_flags(
    scenes: &[SceneAnnotation],
    preds: &[ScenePredictions],
    flags: SubstituteFlags,
) -> Vec<ScenePredictions> {
    if !(flags.use_gt_body || flags.use_gt_surface || flags.use_gt_u || flags.use_gt_v) {
        return preds.to_vec();
    }
    scenes
        .iter()
        .zip(preds)
        .map(|(scene, p)| ScenePredictions {
            maps: scene
                .instances
                .iter()
                .zip(&p.maps)
                .map(|(inst, m)| substitute(m, &inst.dense, flags))
                .collect(),
            scores: p.scores.clone(),
        })
        .collect()
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let scenes = read_scenes(&cfg.eval_data, "evaluation")?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let preds = predict_scenes(&model, &scenes, cfg.pipeline)?;
    let flags = SubstituteFlags {
        use_gt_body: args.gt_body || args.gt_all,
        use_gt_surface: args.gt_surface || args.gt_all,
        use_gt_u: args.gt_u || args.gt_all,
        use_gt_v: args.gt_v || args.gt_all,
    };
    let evaluated = apply_flags(&scenes, &preds, flags);
    let report = report_from_predictions(&scenes, &evaluated, cfg.kappa, cfg.size_boundary)?;
    write_file(&cfg.out_dir, "report.json", &report.to_json())?;
    write_file(&cfg.out_dir, "report_categories.csv", &report.category_csv())?;
    if args.sweep {
        let rows = substitution_sweep(&scenes, &preds, cfg.kappa, cfg.size_boundary)?;
        let mut csv = String::from("gt_body,gt_surface,gt_u,gt_v,ap\n");
        for (f, ap) in rows {
            csv.push_str(&format!(
                "{},{},{},{},{ap}\n",
                f.use_gt_body as u8, f.use_gt_surface as u8, f.use_gt_u as u8, f.use_gt_v as u8
            ));
        }
        write_file(&cfg.out_dir, "substitution.csv", &csv)?;
    }
    println!(
        "ap {:.4} ar {:.4} over {} scenes; wrote {}",
        report.ap,
        report.ar,
        scenes.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_predict(cli: &Cli, args: &PredictArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let scenes = read_scenes(&cfg.eval_data, "evaluation")?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let preds = predict_scenes(&model, &scenes, cfg.pipeline)?;
    let dir = cfg.out_dir.join("predictions");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let limit = args.limit.unwrap_or(scenes.len()).min(scenes.len());
    let mut scores = String::from("scene,instance,score\n");
    for (i, p) in preds.iter().take(limit).enumerate() {
        let mut csv = String::from("instance,y,x,surface,u,v\n");
        for (j, m) in p.maps.iter().enumerate() {
            for y in 0..m.h {
                for x in 0..m.w {
                    let (s, u, v) = m.at(x, y);
                    csv.push_str(&format!("{j},{y},{x},{s},{u},{v}\n"));
                }
            }
        }
        fs::write(dir.join(format!("scene{i:04}.csv")), csv)?;
        for (j, sc) in p.scores.iter().enumerate() {
            scores.push_str(&format!("{i},{j},{sc}\n"));
        }
    }
    fs::write(dir.join("scores.csv"), scores)?;
    println!("wrote {limit} scene maps to {}", dir.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> anyhow::Result<()> {
    let preset = Preset::parse(&args.preset)?;
    // An explicit config is taken as-is; otherwise the grid runs at the
    // desk-scale benchmark defaults rather than the plain config defaults.
    let base = match &cli.config {
        Some(_) => resolve_config(cli)?,
        None => apply_overrides(cli, experiments::benchmark_config()),
    };
    let train_scenes = read_scenes(&base.train_data, "training")?;
    let eval_scenes = read_scenes(&base.eval_data, "evaluation")?;
    let rows = experiments::preset_rows(preset, &base);
    let seeds = experiments::grid_seeds(base.seed, 3);
    let mut cache = HashMap::new();
    if cli.threads > 1 {
        prefill_cache(&rows, &seeds, &train_scenes, &eval_scenes, cli.threads, &mut cache)?;
    }
    let grid = experiments::run_grid(&rows, &seeds, &train_scenes, &eval_scenes, &mut cache)?;
    write_file(&base.out_dir, &format!("{}.csv", preset.name()), &experiments::grid_csv(&grid))?;
    write_file(
        &base.out_dir,
        &format!("{}_categories.csv", preset.name()),
        &experiments::category_csv(&grid),
    )?;
    for row in &grid {
        println!("{}: median ap {:.4} ar {:.4}", row.name, row.median_ap(), row.median_ar());
    }
    println!("wrote {} grid to {}", preset.name(), base.out_dir.display());
    Ok(())
}

/// Runs the grid's distinct configurations in a thread pool; every config
/// still trains single-threaded, so results match the sequential path
/// bitwise.
fn prefill_cache(
    rows: &[(String, Config)],
    seeds: &[u64],
    train_scenes: &[SceneAnnotation],
    eval_scenes: &[SceneAnnotation],
    threads: usize,
    cache: &mut HashMap<String, EvalReport>,
) -> anyhow::Result<()> {
    let mut jobs: Vec<(String, Config)> = Vec::new();
    for (_, cfg) in rows {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let key = cfg.echo();
            if !cache.contains_key(&key) && !jobs.iter().any(|(k, _)| *k == key) {
                jobs.push((key, cfg));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let results: Vec<(String, densecorr::Result<EvalReport>)> = pool.install(|| {
        jobs.par_iter()
            .map(|(key, cfg)| {
                let report =
                    experiments::run_config(cfg, train_scenes, eval_scenes).map(|o| o.report);
                (key.clone(), report)
            })
            .collect()
    });
    for (key, report) in results {
        cache.insert(key, report?);
    }
    Ok(())
}

fn cmd_export_graph(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let graph = RelationGraph::builtin(cfg.omega, cfg.tau)?;
    write_file(&cfg.out_dir, "m_s.csv", &matrix_csv(&graph.m_s, &graph.vocab))?;
    write_file(&cfg.out_dir, "m_d.csv", &matrix_csv(&graph.m_d, &graph.vocab))?;
    write_file(&cfg.out_dir, "m_g.csv", &matrix_csv(&graph.m_g, &graph.vocab))?;
    println!(
        "wrote semantic (m_s), dependence (m_d) and combined (m_g) matrices to {}",
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let scene_cfg = SceneCfg {
        width: args.width,
        height: args.height,
        n_instances: args.instances,
        occlusion_level: args.occlusion,
        point_mean: args.point_mean,
        distractors: args.distractors,
        ..SceneCfg::default()
    };
    let scenes = experiments::standard_scenes(args.scenes, seed, &scene_cfg)?;
    if let Some(parent) = args.path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    synth::write_dataset(&args.path, &scenes)?;
    println!(
        "wrote {} scenes ({}x{}, {} figures each, seed {seed}) to {}",
        scenes.len(),
        args.width,
        args.height,
        args.instances,
        args.path.display()
    );
    Ok(())
}
