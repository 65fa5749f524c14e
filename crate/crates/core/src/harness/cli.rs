//! `mtdgrid` command line. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::ExperimentConfig;
use super::experiments::{run_experiment, timings_csv};
use super::manifest::{write_file, RunManifest, TIMINGS_FILE};
use super::metrics::{MetricsReport, SetMetrics};
use super::pipeline::{calibrated_system, operating_reactances, replicate_seed, train_base, Detector, HarnessError, Screen};
use crate::adversarial::{adversarial_csv, attack_indices};
use crate::attack::{build_dataset, Dataset};
use crate::detector::{architecture_for, train, DetectorModel, TrainReport};
use crate::estimation::MeasurementSystem;
use crate::grid::GridTopology;
use crate::physics::adapt::{adapt_base_model, perturbed_system};
use crate::physics::perturb::{optimize_frontier, perturbation_report};
use crate::pool::{build_pool, load_pool, save_pool, transferability_from_labels, ModelPool};
use crate::seed;
use crate::textio::fmt_f64;

#[derive(Debug, Parser)]
#[command(name = "mtdgrid", version, about = "Adversarial FDIA detection with model-pool and reactance-perturbation moving target defenses")]
pub struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `run.output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled clean/FDIA dataset.
    GenData {
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        clean: Option<usize>,
        #[arg(long)]
        attacked: Option<usize>,
    },
    /// Train the base detector.
    TrainBase {
        /// Training data; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build a model pool from a base detector.
    BuildPool {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 0)]
        generation: u64,
    },
    /// Craft CW adversarial FDIAs against a detector.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nu: Option<f64>,
        /// Attack attempts (indices), successful or not.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Optimize reactance perturbations for SPA targets.
    MtdPerturb {
        #[arg(long = "target")]
        targets: Vec<f64>,
    },
    /// Retrain a base detector for perturbed reactances.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// `reactances.csv` written by `mtd-perturb`.
        #[arg(long)]
        reactances: PathBuf,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Score a detector or pool on a labeled dataset.
    Evaluate {
        #[arg(long, conflicts_with = "pool", required_unless_present = "pool")]
        model: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Also raise an alarm when the BDD does.
        #[arg(long)]
        bdd: bool,
        /// Screen under perturbed reactances (with `--target`).
        #[arg(long)]
        reactances: Option<PathBuf>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run a named experiment.
    Experiment {
        /// pool-vs-K, pool-vs-p, spa-sweep, cai-vs-nu, strategy-table or defense-comparison.
        name: String,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (mut cfg, source) = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => (c, path.display().to_string()),
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => (ExperimentConfig::default(), "<defaults>".to_string()),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.output = o.clone();
    }
    match execute(&cli.command, &cfg, &source) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn emit(&mut self, name: &str, contents: &str) -> Result<(), HarnessError> {
        write_file(&self.out.join(name), contents)?;
        self.manifest.outputs.artifacts.push(name.into());
        Ok(())
    }

    fn finish(mut self, timings: &[(String, f64)]) -> Result<(), HarnessError> {
        write_file(&self.out.join(TIMINGS_FILE), &timings_csv(timings))?;
        self.manifest.outputs.nondeterministic.push(TIMINGS_FILE.into());
        self.manifest.write(self.out)
    }
}

fn command_line(cmd: &Command) -> String {
    match cmd {
        Command::GenData { .. } => "gen-data".into(),
        Command::TrainBase { .. } => "train-base".into(),
        Command::BuildPool { .. } => "build-pool".into(),
        Command::Attack { .. } => "attack".into(),
        Command::MtdPerturb { .. } => "mtd-perturb".into(),
        Command::Adapt { .. } => "adapt".into(),
        Command::Evaluate { .. } => "evaluate".into(),
        Command::Experiment { name } => format!("experiment {name}"),
    }
}

/// The calibrated pre-perturbation system of replicate 0.
fn base_system(cfg: &ExperimentConfig, s: u64) -> Result<(GridTopology, Vec<f64>, MeasurementSystem), HarnessError> {
    let topo = cfg.topology()?;
    let x = operating_reactances(cfg, &topo)?;
    let system = calibrated_system(cfg, &topo, &x, s)?;
    Ok((topo, x, system))
}

fn train_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
    }
    out
}

fn summary_csv(pairs: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in pairs {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

fn load_model(path: &Path) -> Result<DetectorModel, HarnessError> {
    Ok(DetectorModel::load(path)?)
}

/// Reads the perturbed reactances for `target` from a `reactances.csv`.
fn read_reactances(path: &Path, target: Option<f64>) -> Result<(f64, Vec<f64>), HarnessError> {
    let bad = |msg: String| HarnessError::Io { path: path.display().to_string(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut rows: Vec<(f64, usize, f64)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", n + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("line {}: `{s}` is not a number", n + 1)));
        let branch = f[1].trim().parse::<usize>().map_err(|_| bad(format!("line {}: bad branch", n + 1)))?;
        rows.push((num(f[0])?, branch, num(f[3])?));
    }
    let mut targets: Vec<f64> = rows.iter().map(|r| r.0).collect();
    targets.dedup();
    let t = match (target, targets.as_slice()) {
        (Some(t), _) => t,
        (None, [only]) => *only,
        (None, _) => return Err(bad(format!("several targets present; pick one with --target ({targets:?})"))),
    };
    let mut x: Vec<(usize, f64)> = rows.iter().filter(|r| (r.0 - t).abs() <= 1e-12 * t.abs().max(1.0)).map(|r| (r.1, r.2)).collect();
    if x.is_empty() {
        return Err(bad(format!("no rows for target {t}")));
    }
    x.sort_by_key(|r| r.0);
    Ok((t, x.into_iter().map(|r| r.1).collect()))
}

fn execute(cmd: &Command, cfg: &ExperimentConfig, source: &str) -> Result<(), HarnessError> {
    let out = cfg.run.output.clone();
    let mut run = Run { out: &out, manifest: RunManifest::new(&command_line(cmd), source, cfg) };
    let s = replicate_seed(cfg.run.seed, 0);
    run.manifest.seeds.insert("replicate.0".into(), s);
    let t0 = std::time::Instant::now();
    let mut timings = Vec::new();
    match cmd {
        Command::GenData { nu, clean, attacked } => {
            let (topo, _, system) = base_system(cfg, s)?;
            let attack = crate::attack::AttackConfig::new(nu.unwrap_or(cfg.attack.train_nu), topo.bus_count())?;
            let n = cfg.attack.samples_per_class;
            let ds = seed::derive(s, "gen-data", 0);
            run.manifest.seeds.insert("dataset".into(), ds);
            let data = build_dataset(&system, &attack, clean.unwrap_or(n), attacked.unwrap_or(n), ds)?;
            run.emit("dataset.csv", &data.to_csv())?;
        }
        Command::TrainBase { data } => {
            let (_, _, system) = base_system(cfg, s)?;
            let (model, report) = match data {
                None => {
                    let (m, r, _) = train_base(cfg, &system, s)?;
                    (m, r)
                }
                Some(path) => {
                    let data = Dataset::read(path)?;
                    let mut m = DetectorModel::init(&architecture_for(data.dim()), seed::derive(s, "base-init", 0))?;
                    m.fit_standardizer(&data);
                    let r = train(&mut m, &data, &cfg.train_config(seed::derive(s, "base-train", 0)))?;
                    (m, r)
                }
            };
            run.emit("base.model", &model.to_text())?;
            run.emit("train_loss.csv", &train_csv(&report))?;
            run.emit(
                "train_summary.csv",
                &summary_csv(&[("train_accuracy", fmt_f64(report.train_accuracy)), ("validation_accuracy", fmt_f64(report.validation_accuracy))]),
            )?;
        }
        Command::BuildPool { model, k, p, generation } => {
            let (_, _, system) = base_system(cfg, s)?;
            let base = load_model(model)?;
            let mut pcfg = cfg.pool_config(seed::derive(s, "pool", 0));
            pcfg.k = k.unwrap_or(pcfg.k);
            pcfg.p = p.unwrap_or(pcfg.p);
            run.manifest.seeds.insert("pool".into(), pcfg.seed);
            let pool = build_pool(&base, &system, &pcfg, *generation)?;
            save_pool(&pool, &out.join("pool"))?;
            run.manifest.outputs.artifacts.push("pool/pool.manifest".into());
            for i in 0..pool.k() {
                run.manifest.outputs.artifacts.push(format!("pool/student_{i}.model"));
            }
        }
        Command::Attack { model, nu, count } => {
            let (topo, _, system) = base_system(cfg, s)?;
            let model = load_model(model)?;
            let attack = crate::attack::AttackConfig::new(nu.unwrap_or(cfg.attack.nu[0]), topo.bus_count())?;
            let a = seed::derive(s, "adversarial", 0);
            run.manifest.seeds.insert("adversarial".into(), a);
            let n = count.unwrap_or(cfg.attack.test_samples) as u64;
            let samples: Vec<_> = attack_indices(&system, &model, &attack, &cfg.adv_config(), a, "cli", 0..n)?.into_iter().flatten().collect();
            run.emit("adversarial.csv", &adversarial_csv(&samples))?;
        }
        Command::MtdPerturb { targets } => {
            let topo = cfg.topology()?;
            let x = operating_reactances(cfg, &topo)?;
            let targets = if targets.is_empty() { cfg.mtd.spa_targets.clone() } else { targets.clone() };
            let m = seed::derive(s, "mtd", 0);
            run.manifest.seeds.insert("mtd".into(), m);
            let frontier = optimize_frontier(&topo, &x, topo.base_loads_mw(), &targets, &cfg.perturb_config(m))?;
            run.emit("perturbation.csv", &perturbation_report(&topo, &frontier))?;
            let mut csv = String::from("target_spa,branch,x_base,x_new\n");
            for r in &frontier {
                for (l, (xb, xn)) in r.base_reactances.iter().zip(&r.reactances).enumerate() {
                    csv.push_str(&format!("{},{},{},{}\n", fmt_f64(r.target), l + 1, fmt_f64(*xb), fmt_f64(*xn)));
                }
            }
            run.emit("reactances.csv", &csv)?;
        }
        Command::Adapt { model, reactances, target } => {
            let (_, _, system) = base_system(cfg, s)?;
            let base = load_model(model)?;
            let (t, x) = read_reactances(reactances, *target)?;
            let tag = fmt_f64(t);
            let ps = seed::derive(s, &format!("mtd-system-{tag}"), 0);
            let ad = seed::derive(s, &format!("adapt-{tag}"), 0);
            run.manifest.seeds.insert("perturbed-system".into(), ps);
            run.manifest.seeds.insert("adapt".into(), ad);
            let sys2 = perturbed_system(&system, &x, cfg.estimator.fpr, cfg.estimator.calibration_samples, ps)?;
            let a = adapt_base_model(&base, &sys2, cfg.attack.train_nu, cfg.mtd.adapt_samples_per_class, &cfg.train_config(0), ad)?;
            run.emit("adapted.model", &a.model.to_text())?;
            run.emit("adapt_loss.csv", &train_csv(&a.report))?;
            run.emit(
                "adapt_summary.csv",
                &summary_csv(&[
                    ("target_spa", fmt_f64(t)),
                    ("train_accuracy", fmt_f64(a.report.train_accuracy)),
                    ("validation_accuracy", fmt_f64(a.report.validation_accuracy)),
                    ("threshold", fmt_f64(sys2.threshold())),
                ]),
            )?;
        }
        Command::Evaluate { model, pool, data, bdd, reactances, target } => {
            let data = Dataset::read(data)?;
            let labels = data.labels();
            let rows: Vec<Vec<f64>> = data.rows.iter().map(|r| r.z.clone()).collect();
            let needs_system = *bdd;
            let system = if needs_system || reactances.is_some() {
                let (_, _, sys) = base_system(cfg, s)?;
                match reactances {
                    Some(path) => {
                        let (t, x) = read_reactances(path, *target)?;
                        let ps = seed::derive(s, &format!("mtd-system-{}", fmt_f64(t)), 0);
                        run.manifest.seeds.insert("perturbed-system".into(), ps);
                        Some(perturbed_system(&sys, &x, cfg.estimator.fpr, cfg.estimator.calibration_samples, ps)?)
                    }
                    None => Some(sys),
                }
            } else {
                None
            };
            let loaded: (Option<DetectorModel>, Option<ModelPool>) = match (model, pool) {
                (Some(m), _) => (Some(load_model(m)?), None),
                (None, Some(p)) => (None, Some(load_pool(p)?)),
                (None, None) => unreachable!("clap requires one"),
            };
            let detector = match &loaded {
                (Some(m), _) => Detector::Model(m),
                (_, Some(p)) => Detector::Pool(p),
                _ => Detector::None,
            };
            let screen = Screen { bdd: *bdd, detector };
            let flags = match &system {
                Some(sys) => screen.flags(sys, &rows)?,
                None => {
                    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                    match detector {
                        Detector::Model(m) => m.predict_batch(&refs)?,
                        Detector::Pool(p) => p.vote_batch(&refs)?.0,
                        Detector::None => vec![0; rows.len()],
                    }
                }
            };
            let mut report = MetricsReport { sets: vec![SetMetrics::new("data", &flags, &labels)?], ..Default::default() };
            if let (_, Some(p)) = &loaded {
                let pos: Vec<&[f64]> = rows.iter().zip(&labels).filter(|(_, y)| **y == 1).map(|(r, _)| r.as_slice()).collect();
                let (_, per) = p.vote_batch(&pos)?;
                report.transferability = transferability_from_labels(&per).ok();
            }
            run.emit("metrics.csv", &report.sets_csv())?;
            run.emit("metrics.txt", &report.to_text())?;
        }
        Command::Experiment { name } => {
            let art = run_experiment(name, cfg)?;
            for (k, v) in &art.seeds {
                run.manifest.seeds.insert(k.clone(), *v);
            }
            for (file, contents) in &art.files {
                run.emit(file, contents)?;
            }
            timings.extend(art.timings);
        }
    }
    timings.push(("total".into(), t0.elapsed().as_secs_f64()));
    run.finish(&timings)
}
