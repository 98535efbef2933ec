mod manifest;
mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use raqg_core::data::{generate_dataset, load_dataset, render_scene, save_dataset, DatasetSpec, Scene};
use raqg_core::gradsuite;
use raqg_core::losses::{sgl1_gradient, RankingLoss};
use raqg_core::raqg::{QueryStrategy, StrategyKind};
use raqg_core::trainer::{ablate, compare_models, evaluate_detector, load_run, train, AblationAxis, TrainConfig};
use raqg_core::Error;

use manifest::{write_atomic, RunManifest};

#[derive(Parser)]
#[command(name = "raqg", version, about = "Adaptive query generation for DETR-style detectors on synthetic crowds")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset as JSON lines.
    GenData {
        /// DatasetSpec JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one detector and write its run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints metrics JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Evaluate several checkpoints side by side.
    Compare {
        /// Checkpoint manifests (`checkpoint.json`) or run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the whole model.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        cases: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Draw one scene with its query anchors and detections as SVG.
    PlotQueries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Scene id within the dataset.
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Train one model per grid cell and tabulate held-out metrics.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated cells: multipliers like `5` or `5r` (removal),
        /// loss names, or strategies like `lp:16`, `two-stage:32`, `raqg:5`.
        #[arg(long)]
        values: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Multiplier,
    Loss,
    Strategy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyName {
    Lp,
    TwoStage,
    Raqg,
}

#[derive(Args, Clone, Default)]
struct StrategyArgs {
    #[arg(long, value_enum)]
    strategy: Option<StrategyName>,
    /// Query count of the fixed strategies.
    #[arg(long)]
    fixed_queries: Option<usize>,
    /// Supplement multiplier of the adaptive strategy.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    removal: Option<bool>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TrainConfig JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_ranking_loss)]
    ranking_loss: Option<RankingLoss>,
    #[command(flatten)]
    strategy: StrategyArgs,
}

/// Failures that are the caller's fault exit with 2, everything else with 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reclassifies configuration problems from the core as usage errors.
fn config_err(e: Error) -> anyhow::Error {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn parse_ranking_loss(s: &str) -> Result<RankingLoss, String> {
    RankingLoss::ALL
        .into_iter()
        .find(|l| l.name() == s)
        .ok_or_else(|| format!("unknown ranking loss {s:?} (expected sgl1, l1, smooth_l1 or l2)"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> anyhow::Result<Vec<Scene>> {
    load_dataset(path).map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot read dataset {}: {io}", path.display())),
        Error::Parse { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

impl StrategyArgs {
    fn is_empty(&self) -> bool {
        self.strategy.is_none() && self.fixed_queries.is_none() && self.m.is_none() && self.removal.is_none()
    }

    /// Applies the overrides to `base`; unset fields keep their values.
    fn apply(&self, base: QueryStrategy, tokens: usize) -> anyhow::Result<QueryStrategy> {
        let name = self.strategy.unwrap_or(match base.kind {
            StrategyKind::LearnableParameters { .. } => StrategyName::Lp,
            StrategyKind::TwoStage { .. } => StrategyName::TwoStage,
            StrategyKind::Raqg { .. } => StrategyName::Raqg,
        });
        let base_k = match base.kind {
            StrategyKind::LearnableParameters { k } | StrategyKind::TwoStage { k } => Some(k),
            StrategyKind::Raqg { .. } => None,
        };
        let (base_m, base_removal) = match base.kind {
            StrategyKind::Raqg { m, removal } => (m, removal),
            _ => (5, true),
        };
        let kind = match name {
            StrategyName::Lp | StrategyName::TwoStage => {
                if self.m.is_some() || self.removal.is_some() {
                    return Err(usage("--m and --removal only apply to --strategy raqg"));
                }
                let k = self
                    .fixed_queries
                    .or(base_k)
                    .ok_or_else(|| usage("fixed-count strategies need --fixed-queries"))?;
                if name == StrategyName::Lp {
                    StrategyKind::LearnableParameters { k }
                } else {
                    StrategyKind::TwoStage { k }
                }
            }
            StrategyName::Raqg => {
                if self.fixed_queries.is_some() {
                    return Err(usage("--fixed-queries does not apply to --strategy raqg"));
                }
                StrategyKind::Raqg {
                    m: self.m.unwrap_or(base_m),
                    removal: self.removal.unwrap_or(base_removal),
                }
            }
        };
        let s = QueryStrategy { kind, ..base };
        s.validate(tokens).map_err(config_err)?;
        Ok(s)
    }
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(l) = self.ranking_loss {
            c.ranking_loss = l;
        }
        if !self.strategy.is_empty() {
            let s = self.strategy.apply(c.strategy, c.model.tokens())?;
            c = c.with_strategy(s);
        }
        c.validate().map_err(config_err)?;
        Ok(c)
    }
}

fn parse_strategy(spec: &str, tokens: usize) -> anyhow::Result<QueryStrategy> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |i: usize| -> anyhow::Result<usize> {
        parts
            .get(i)
            .ok_or_else(|| usage(format!("strategy {spec:?} needs a count")))?
            .parse()
            .map_err(|_| usage(format!("bad number in strategy {spec:?}")))
    };
    let s = match parts[0] {
        "lp" => QueryStrategy::learnable(num(1)?, tokens),
        "two-stage" => QueryStrategy::two_stage(num(1)?, tokens),
        "raqg" => {
            let m = if parts.len() > 1 { num(1)? } else { 5 };
            let removal = match parts.get(2) {
                None | Some(&"removal") => true,
                Some(&"supplement") => false,
                Some(other) => return Err(usage(format!("unknown raqg variant {other:?}"))),
            };
            QueryStrategy::raqg(m, removal, tokens)
        }
        other => return Err(usage(format!("unknown strategy {other:?}"))),
    };
    s.validate(tokens).map_err(config_err)?;
    Ok(s)
}

fn parse_axis(axis: Axis, values: Option<&str>, tokens: usize) -> anyhow::Result<AblationAxis> {
    let items: Option<Vec<&str>> = values.map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect());
    Ok(match axis {
        Axis::Multiplier => {
            let cells = match items {
                // The ablation layout: M = 0..5, the removal variant, then 6..8.
                None => (0..=5)
                    .map(|m| (m, false))
                    .chain([(5, true)])
                    .chain((6..=8).map(|m| (m, false)))
                    .collect(),
                Some(items) => items
                    .iter()
                    .map(|s| {
                        let (num, removal) = s.strip_suffix('r').map_or((*s, false), |n| (n, true));
                        num.parse()
                            .map(|m| (m, removal))
                            .map_err(|_| usage(format!("bad multiplier {s:?}")))
                    })
                    .collect::<anyhow::Result<_>>()?,
            };
            AblationAxis::Multiplier(cells)
        }
        Axis::Loss => AblationAxis::RankingLoss(match items {
            None => vec![RankingLoss::L1, RankingLoss::SmoothL1, RankingLoss::Sgl1, RankingLoss::L2],
            Some(items) => items
                .iter()
                .map(|s| parse_ranking_loss(s).map_err(usage))
                .collect::<anyhow::Result<_>>()?,
        }),
        Axis::Strategy => AblationAxis::Strategy(match items {
            None => vec![
                QueryStrategy::learnable(16, tokens),
                QueryStrategy::two_stage(32, tokens),
                QueryStrategy::raqg(5, true, tokens),
            ],
            Some(items) => items
                .iter()
                .map(|s| parse_strategy(s, tokens))
                .collect::<anyhow::Result<_>>()?,
        }),
    })
}

fn manifest_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join("checkpoint.json")
    } else {
        run.to_path_buf()
    }
}

fn load_checkpoint_run(path: &Path) -> anyhow::Result<(raqg_core::model::Detector, TrainConfig)> {
    let p = manifest_path(path);
    if !p.exists() {
        return Err(usage(format!("checkpoint {} not found", p.display())));
    }
    load_run(&p).with_context(|| format!("loading {}", p.display()))
}

#[derive(Serialize)]
struct DatasetSummary {
    n_images: usize,
    /// Object count -> number of scenes.
    count_histogram: BTreeMap<usize, usize>,
    /// Crowd-level bin (lower edge, width 0.1) -> number of scenes.
    crowd_histogram: BTreeMap<String, usize>,
}

fn summarize(scenes: &[Scene]) -> DatasetSummary {
    let mut count_histogram = BTreeMap::new();
    let mut crowd_histogram = BTreeMap::new();
    for s in scenes {
        *count_histogram.entry(s.boxes.len()).or_insert(0) += 1;
        let bin = (s.crowd_level * 10.0).floor() / 10.0;
        *crowd_histogram.entry(format!("{bin:.1}")).or_insert(0) += 1;
    }
    DatasetSummary {
        n_images: scenes.len(),
        count_histogram,
        crowd_histogram,
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec: DatasetSpec = match config {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(config_err)?;
    let manifest_file = sibling(out, ".manifest.json");
    let mut manifest = RunManifest::start("gen-data", config, Some(spec.seed));
    manifest.save(&manifest_file)?;
    let scenes = generate_dataset(&spec)?;
    save_dataset(out, &scenes)?;
    let summary = summarize(&scenes);
    let summary_file = sibling(out, ".summary.json");
    write_atomic(&summary_file, (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    println!("object counts: {:?}", summary.count_histogram);
    println!("crowd levels: {:?}", summary.crowd_histogram);
    manifest.finish(&manifest_file, vec![out.to_path_buf(), summary_file])?;
    Ok(())
}

fn cmd_train(run: &RunArgs, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let config = run.config()?;
    let scenes = read_dataset(dataset)?;
    let run_dir = config.run_dir(out);
    fs::create_dir_all(&run_dir)?;
    let manifest_file = run_dir.join("manifest.json");
    let mut manifest = RunManifest::start("train", run.config.as_deref(), Some(config.seed));
    manifest.save(&manifest_file)?;
    info!("training {} for {} epochs into {}", config.strategy.name(), config.epochs, run_dir.display());
    let report = train(&config, &scenes, Some(out))?;
    for e in &report.epochs {
        let rank = e.mean.rank.map_or(String::new(), |r| format!(" sgl1 {r:.4}"));
        let eval = e.eval.map_or(String::new(), |s| {
            format!(" | MR {:.3} AP {:.3} recall {:.3} queries {:.1}", s.mr, s.ap, s.recall, s.mean_query_count)
        });
        println!("epoch {:>3}: loss {:.4}{rank}{eval}", e.epoch, e.mean.total);
    }
    let outputs = ["checkpoint.json", "checkpoint.bin", "losses.csv", "eval.json", "config.json", "fppi.csv", "pr.csv"]
        .iter()
        .map(|f| run_dir.join(f))
        .filter(|p| p.exists())
        .collect();
    manifest.finish(&manifest_file, outputs)?;
    println!("run directory: {}", run_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalJson {
    mr: f64,
    ap: f64,
    recall: f64,
    mean_query_count: f64,
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, strategy: &StrategyArgs) -> anyhow::Result<()> {
    let (model, config) = load_checkpoint_run(checkpoint)?;
    let s = strategy.apply(config.strategy, model.tokens())?;
    let scenes = read_dataset(dataset)?;
    let e = evaluate_detector(&model, &scenes, &s).map_err(config_err)?;
    let out = EvalJson {
        mr: e.metrics.mr,
        ap: e.metrics.ap,
        recall: e.metrics.recall,
        mean_query_count: e.mean_query_count,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn cmd_compare(runs: &[PathBuf], dataset: &Path, out: &Path) -> anyhow::Result<()> {
    if runs.len() < 2 {
        return Err(usage("compare needs at least two runs"));
    }
    fs::create_dir_all(out)?;
    let manifest_file = out.join("manifest.json");
    let mut manifest = RunManifest::start("compare", None, None);
    manifest.save(&manifest_file)?;
    let scenes = read_dataset(dataset)?;
    let loaded: Vec<_> = runs.iter().map(|r| load_checkpoint_run(r)).collect::<anyhow::Result<_>>()?;
    let entries: Vec<_> = loaded.iter().map(|(m, c)| (c.strategy.name(), m, c.strategy)).collect();
    let report = compare_models(&entries, &scenes);
    let table = report.render();
    print!("{table}");
    let files = [
        (out.join("compare.md"), table),
        (out.join("compare.csv"), report.to_csv()),
        (out.join("compare.json"), serde_json::to_string_pretty(&report)? + "\n"),
    ];
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
    }
    manifest.finish(&manifest_file, files.into_iter().map(|f| f.0).collect())?;
    Ok(())
}

fn cmd_grad_check(cases: u64, inject_fault: bool) -> anyhow::Result<bool> {
    let checks = gradsuite::run(cases, inject_fault)?;
    println!("{:<40} {:>10} {:>10}  result", "check", "tolerance", "worst");
    for c in &checks {
        println!(
            "{:<40} {:>10.0e} {:>10.2e}  {}",
            c.name,
            c.tolerance,
            c.worst,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("sgl1 gradient at (y*=2, y=1): {:.7}", sgl1_gradient(2.0, 1.0));
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    if failed.is_empty() {
        println!("all {} checks passed ({cases} cases each)", checks.len());
        Ok(true)
    } else {
        for c in &failed {
            eprintln!("FAILED {}: max relative error {:.3e} > {:.0e}", c.name, c.worst, c.tolerance);
        }
        Ok(false)
    }
}

fn cmd_plot(checkpoint: &Path, dataset: &Path, scene_id: u64, out: &Path, strategy: &StrategyArgs) -> anyhow::Result<()> {
    let (model, config) = load_checkpoint_run(checkpoint)?;
    let s = strategy.apply(config.strategy, model.tokens())?;
    let scenes = read_dataset(dataset)?;
    let scene = scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| usage(format!("scene {scene_id} not in {}", dataset.display())))?;
    let inference = model
        .infer(&render_scene(scene, model.config().image_size), &s)
        .map_err(config_err)?;
    write_atomic(out, svg::render(scene, &inference).as_bytes())?;
    println!("scene {scene_id}: {} queries, {} objects -> {}", inference.query_count, scene.boxes.len(), out.display());
    Ok(())
}

fn cmd_ablate(run: &RunArgs, dataset: &Path, out: &Path, axis: Axis, values: Option<&str>) -> anyhow::Result<()> {
    let config = run.config()?;
    let axis = parse_axis(axis, values, config.model.tokens())?;
    let scenes = read_dataset(dataset)?;
    fs::create_dir_all(out)?;
    let manifest_file = out.join("manifest.json");
    let mut manifest = RunManifest::start("ablate", run.config.as_deref(), Some(config.seed));
    manifest.save(&manifest_file)?;
    let report = ablate(&config, &scenes, axis, Some(&out.join("runs")));
    let table = report.render();
    print!("{table}");
    let files = [
        (out.join("ablation.md"), table),
        (out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n"),
    ];
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
    }
    manifest.finish(&manifest_file, files.into_iter().map(|f| f.0).collect())?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Cmd::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed)?,
        Cmd::Train { run, dataset, out } => cmd_train(&run, &dataset, &out)?,
        Cmd::Eval {
            checkpoint,
            dataset,
            strategy,
        } => cmd_eval(&checkpoint, &dataset, &strategy)?,
        Cmd::Compare { runs, dataset, out } => cmd_compare(&runs, &dataset, &out)?,
        Cmd::GradCheck { cases, inject_fault } => return cmd_grad_check(cases, inject_fault),
        Cmd::PlotQueries {
            checkpoint,
            dataset,
            scene,
            out,
            strategy,
        } => cmd_plot(&checkpoint, &dataset, scene, &out, &strategy)?,
        Cmd::Ablate {
            run,
            dataset,
            out,
            axis,
            values,
        } => cmd_ablate(&run, &dataset, &out, axis, values.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

