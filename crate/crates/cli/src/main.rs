//! `lift3d`: corpus building, training, inference, refinement, evaluation,
//! ablations and gradient checks behind one config surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use lift3d::autodiff::gradcheck;
use lift3d::config::{AblationVariant, PathsConfig, RunConfig};
use lift3d::corpus::{build_corpus, Corpus, Split};
use lift3d::diffusion::{train_stage1, train_stage2, Stage, StageModel};
use lift3d::eval::{evaluate_run, shape_dir, PRED_MESH_FILE};
use lift3d::experiment::{condition_views, infer_sample, refine_saved, run_ablation, save_prediction, RefineReport, RunReportEntry};
use lift3d::rng::derive;
use lift3d::Error;

mod exit;

#[derive(Parser)]
#[command(name = "lift3d", version, about = "Multi-view conditioned two-stage volumetric diffusion")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, overriding the config; 1 is bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output root; every path is placed in its standard location below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate shapes and build training samples.
    Corpus {
        /// Number of shapes, overriding `corpus.n_samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one diffusion stage on the training split.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Generate meshes for the configured split.
    Infer,
    /// Refine the textures of the inferred meshes.
    Refine,
    /// Score a prediction directory against the corpus.
    Eval {
        /// Prediction directory; defaults to `paths.infer`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Mesh file name inside each shape directory.
        #[arg(long)]
        mesh: Option<String>,
    },
    /// Train and score one row of the diffusion ablation.
    Ablate {
        #[arg(long, value_parser = parse_variant)]
        variant: AblationVariant,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck,
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    AblationVariant::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> lift3d::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::Config {
            key: "--config".into(),
            message: format!("{} does not exist", p.display()),
        }),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(out) = &cli.out {
        cfg.paths = PathsConfig::under(out);
    }
    if let Command::Corpus { n: Some(n) } = cli.command {
        cfg.corpus.n_samples = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> lift3d::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn limited<T>(mut v: Vec<T>, limit: usize) -> Vec<T> {
    if limit > 0 {
        v.truncate(limit);
    }
    v
}

fn corpus(cfg: &RunConfig) -> lift3d::Result<()> {
    let dir = &cfg.paths.corpus;
    let m = build_corpus(&cfg.corpus, cfg.seed, dir)?;
    cfg.echo(dir)?;
    let val = m.ids(Split::Val).len();
    println!("corpus: {} samples ({} train, {val} val) in {}", m.n_samples, m.n_samples - val, dir.display());
    Ok(())
}

fn train(cfg: &RunConfig, stage: Stage) -> lift3d::Result<()> {
    let corpus = Corpus::open(&cfg.paths.corpus)?;
    let samples = corpus.load_split(Split::Train)?;
    let dir = &cfg.paths.models;
    cfg.echo(dir)?;
    let seed = derive(cfg.seed, &format!("train/stage{}", stage.number()));
    let stage_cfg = cfg.stage(stage);
    let (_, outcome) = match stage {
        Stage::Coarse => train_stage1(&samples, stage_cfg, seed, Some(dir))?,
        Stage::Fine => train_stage2(&samples, stage_cfg, seed, Some(dir))?,
    };
    println!(
        "stage {}: {} steps on {} samples, final mean loss {:.5}{}",
        stage.number(),
        outcome.losses.len(),
        samples.len(),
        outcome.running_mean().unwrap_or(f64::NAN),
        if outcome.stopped_early { " (target reached)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct InferSummary {
    shapes: Vec<RunReportEntry>,
    /// Shapes whose coarse sample had no occupied voxel.
    empty: Vec<String>,
}

fn infer(cfg: &RunConfig) -> lift3d::Result<()> {
    let corpus = Corpus::open(&cfg.paths.corpus)?;
    let s1 = StageModel::load(&cfg.paths.models, Stage::Coarse)?;
    let s2 = StageModel::load(&cfg.paths.models, Stage::Fine)?;
    let ids = limited(corpus.manifest.ids(cfg.infer.split), cfg.infer.limit);
    let run = &cfg.paths.infer;
    cfg.echo(run)?;
    let mut summary = InferSummary { shapes: Vec::new(), empty: Vec::new() };
    for id in ids {
        let sample = corpus.load(id)?;
        match infer_sample(&s1, &s2, &sample, &cfg.infer, cfg.seed) {
            Ok(out) => {
                save_prediction(run, id, &out)?;
                println!("{id}: {} coarse voxels, {} triangles", out.report.coarse_voxels, out.report.triangles);
                summary.shapes.push(RunReportEntry { shape_id: id.to_string(), report: out.report });
            }
            Err(Error::EmptyOccupancy) => {
                eprintln!("{id}: empty coarse occupancy, no mesh written");
                summary.empty.push(id.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    write_json(&run.join("infer.json"), &summary)?;
    if !summary.empty.is_empty() {
        return Err(Error::EmptyOccupancy);
    }
    Ok(())
}

#[derive(Serialize)]
struct RefineSummary {
    shapes: Vec<RefineReport>,
    /// Shapes without an inferred mesh.
    skipped: Vec<String>,
    mean_gain_db: f64,
}

fn refine(cfg: &RunConfig) -> lift3d::Result<()> {
    let corpus = Corpus::open(&cfg.paths.corpus)?;
    let ids = limited(corpus.manifest.ids(cfg.infer.split), cfg.infer.limit);
    let out = &cfg.paths.refine;
    cfg.echo(out)?;
    let mut shapes = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        if !shape_dir(&cfg.paths.infer, id).join(PRED_MESH_FILE).exists() {
            eprintln!("{id}: no inferred mesh, skipped");
            skipped.push(id.to_string());
            continue;
        }
        let sample = corpus.load(id)?;
        let views = condition_views(&sample, cfg.infer.view_degradation, cfg.seed)?;
        let r = refine_saved(&cfg.paths.infer, out, &sample, &views, &cfg.refine)?;
        println!(
            "{id}: {:.2} dB -> {:.2} dB ({} of {} steps kept, {:.1}s)",
            r.scores.before_db, r.scores.after_db, r.accepted, r.iterations, r.seconds
        );
        shapes.push(r);
    }
    if shapes.is_empty() {
        return Err(Error::MissingArtifact(format!("inferred meshes under {}", cfg.paths.infer.display())));
    }
    let mean_gain_db = shapes.iter().map(RefineReport::gain_db).sum::<f64>() / shapes.len() as f64;
    write_json(&out.join("refine.json"), &RefineSummary { shapes, skipped, mean_gain_db })
}

fn eval(cfg: &RunConfig, run: Option<&Path>, mesh: Option<&str>) -> lift3d::Result<()> {
    let corpus = Corpus::open(&cfg.paths.corpus)?;
    let run = run.unwrap_or(&cfg.paths.infer);
    if !run.is_dir() {
        return Err(Error::MissingArtifact(format!("prediction directory {}", run.display())));
    }
    let mut ecfg = cfg.eval.clone();
    if let Some(m) = mesh {
        ecfg.mesh_file = m.to_string();
    }
    let report = evaluate_run(run, &corpus, &ecfg)?;
    let dir = &cfg.paths.eval;
    report.write(dir)?;
    cfg.echo(dir)?;
    let a = &report.aggregate;
    println!(
        "{} shapes ({} missing): F-score {:.2}, shell IoU {}, PSNR {:.2} dB, mask IoU {:.4}",
        report.shapes.len(),
        report.missing.len(),
        a.f_score,
        a.shell_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
        a.psnr,
        a.mask_iou
    );
    if report.shapes.is_empty() {
        return Err(Error::MissingArtifact(format!("{} files under {}", ecfg.mesh_file, run.display())));
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, variant: AblationVariant) -> lift3d::Result<()> {
    let corpus = Corpus::open(&cfg.paths.corpus)?;
    let train = corpus.load_split(Split::Train)?;
    let val = corpus.load_split(Split::Val)?;
    let dir = cfg.paths.ablate.join(format!("variant_{}", variant.letter()));
    cfg.echo(&dir)?;
    let (_, _, result) = run_ablation(variant, cfg, &train, &val, Some(&dir))?;
    write_json(&dir.join("ablation.json"), &result)?;
    for l in &result.levels {
        println!(
            "variant {}: degradation {:.2} -> held-out shell IoU {:.4} over {} shapes",
            variant.letter(),
            l.degradation,
            l.mean_shell_iou,
            l.shell_iou.len()
        );
    }
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig) -> lift3d::Result<()> {
    let results = gradcheck::run_all(cfg.seed)?;
    println!("{:<28} {:>14} {:>8}  status", "operator", "max rel err", "entries");
    for r in &results {
        println!(
            "{:<28} {:>14.3e} {:>8}  {}",
            r.op,
            r.max_rel_error,
            r.entries,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check above {:e} for {}",
            gradcheck::FD_TOLERANCE,
            failed.join(", ")
        )))
    }
}

fn run(cli: &Cli) -> lift3d::Result<()> {
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config {
            key: "threads".into(),
            message: e.to_string(),
        })?;
    match &cli.command {
        Command::Corpus { .. } => corpus(&cfg),
        Command::Train { stage } => train(&cfg, if *stage == 1 { Stage::Coarse } else { Stage::Fine }),
        Command::Infer => infer(&cfg),
        Command::Refine => refine(&cfg),
        Command::Eval { run, mesh } => eval(&cfg, run.as_deref(), mesh.as_deref()),
        Command::Ablate { variant } => ablate(&cfg, *variant),
        Command::Gradcheck => gradcheck_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit::code(&e))
        }
    }
}
