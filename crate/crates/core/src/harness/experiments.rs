//! Named experiments. Each returns its CSV tables, the seeds it used and
//! wall-clock timings; the caller writes them next to a run manifest.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::metrics::{SetMetrics, Summary};
use super::pipeline::{adversarial_rows, detection_rate, legitimate_rows, replicate_seed, Detector, HarnessError, Screen, Setup, StudentBank};
use crate::adversarial::AdversarialSample;
use crate::pool::{spawn_students, transferability_from_labels, ModelPool, PoolError, Student, StudentProvenance};
use crate::seed;
use crate::textio::fmt_f64;

pub const EXPERIMENTS: [&str; 6] = ["pool-vs-K", "pool-vs-p", "spa-sweep", "cai-vs-nu", "strategy-table", "defense-comparison"];

/// Strategy labels of the physics-MTD sweep.
pub const STRATEGIES: [&str; 4] = ["bdd", "i", "ii", "iii"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    /// `(file name, contents)`; contents are a pure function of config and seed.
    pub files: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub timings: Vec<(String, f64)>,
}

impl Artifacts {
    fn merge(&mut self, other: Artifacts) {
        self.seeds.extend(other.seeds);
        self.timings.extend(other.timings);
    }

    fn time<T>(&mut self, label: String, f: impl FnOnce() -> Result<T, HarnessError>) -> Result<T, HarnessError> {
        let t0 = Instant::now();
        let out = f()?;
        self.timings.push((label, t0.elapsed().as_secs_f64()));
        Ok(out)
    }
}

pub fn run_experiment(name: &str, cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let run = match name.to_ascii_lowercase().as_str() {
        "pool-vs-k" => pool_vs_k,
        "pool-vs-p" => pool_vs_p,
        "spa-sweep" => spa_sweep,
        "cai-vs-nu" => cai_vs_nu,
        "strategy-table" => strategy_table,
        "defense-comparison" => defense_comparison,
        _ => {
            return Err(HarnessError::Config(super::config::ConfigError::Invalid(format!(
                "unknown experiment `{name}` (one of {})",
                EXPERIMENTS.join(", ")
            ))))
        }
    };
    run(cfg).map_err(|e| e.context(format!("experiment {name}")))
}

/// Runs `cell` for every replicate in parallel and concatenates the CSV
/// bodies in replicate order.
fn per_replicate(
    cfg: &ExperimentConfig,
    cell: impl Fn(usize, &Setup, &mut Artifacts) -> Result<Vec<String>, HarnessError> + Sync,
) -> Result<(Vec<Vec<String>>, Artifacts), HarnessError> {
    let results: Vec<(Vec<String>, Artifacts)> = (0..cfg.run.replicates)
        .into_par_iter()
        .map(|r| {
            let s = replicate_seed(cfg.run.seed, r);
            let mut art = Artifacts { seeds: vec![(format!("replicate.{r}"), s)], ..Default::default() };
            let setup = art.time(format!("replicate.{r}.setup"), || Setup::new(cfg, s))?;
            let rows = cell(r, &setup, &mut art).map_err(|e| e.context(format!("replicate {r}")))?;
            Ok((rows, art))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut all = Artifacts::default();
    let mut rows = Vec::new();
    for (r, a) in results {
        rows.push(r);
        all.merge(a);
    }
    Ok((rows, all))
}

fn table(header: &str, rows: Vec<Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows.into_iter().flatten() {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn eta_cells(per: &[Vec<u8>]) -> Result<(String, usize), HarnessError> {
    match transferability_from_labels(per) {
        Ok(t) => Ok((fmt_f64(t.eta_av), t.excluded.len())),
        Err(PoolError::NoEvasions) => Ok(("NA".into(), per.len())),
        Err(e) => Err(e.into()),
    }
}

fn z_rows(set: &[AdversarialSample]) -> Vec<&[f64]> {
    set.iter().map(|s| s.result.z_adv.as_slice()).collect()
}

fn test_sets(setup: &Setup, art: &mut Artifacts, r: usize) -> Result<Vec<(f64, Vec<AdversarialSample>)>, HarnessError> {
    setup
        .config
        .attack
        .nu
        .iter()
        .map(|&nu| Ok((nu, art.time(format!("replicate.{r}.test-set.{}", fmt_f64(nu)), || setup.test_set(nu))?)))
        .collect()
}

/// Recall and transferability against pools of growing size, `p = ⌊K/2⌋`.
fn pool_vs_k(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let kmax = *cfg.pool.k_grid.iter().max().expect("validated nonempty");
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let sets = test_sets(setup, art, r)?;
        let pcfg = setup.pool_config();
        art.seeds.push((format!("replicate.{r}.pool"), pcfg.seed));
        let bank = art.time(format!("replicate.{r}.students"), || StudentBank::build(&setup.base, &setup.system, &pcfg, 0, kmax, kmax / 2))?;
        let mut out = Vec::new();
        for &k in &cfg.pool.k_grid {
            let pool = bank.pool(k, k / 2)?;
            for (nu, set) in &sets {
                out.push(pool_row(&format!("{k},{}", k / 2), &pool, *nu, r, setup.seed, set)?);
            }
        }
        Ok(out)
    })?;
    art.files.push(("pool_vs_k.csv".into(), table("k,p,nu,replicate,seed,samples,recall,eta_av,excluded", rows)));
    Ok(art)
}

fn pool_row(prefix: &str, pool: &ModelPool, nu: f64, r: usize, seed: u64, set: &[AdversarialSample]) -> Result<String, HarnessError> {
    if set.is_empty() {
        return Ok(format!("{prefix},{},{r},{seed},0,NA,NA,NA", fmt_f64(nu)));
    }
    let (votes, per) = pool.vote_batch(&z_rows(set))?;
    let (eta, excluded) = eta_cells(&per)?;
    Ok(format!("{prefix},{},{r},{seed},{},{},{eta},{excluded}", fmt_f64(nu), set.len(), fmt_f64(detection_rate(&votes)?)))
}

/// Recall and transferability at fixed `K` over the number of hardened students.
fn pool_vs_p(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let k = cfg.pool.k;
    let pmax = *cfg.pool.p_grid.iter().max().expect("validated nonempty");
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let sets = test_sets(setup, art, r)?;
        let pcfg = setup.pool_config();
        art.seeds.push((format!("replicate.{r}.pool"), pcfg.seed));
        let bank = art.time(format!("replicate.{r}.students"), || StudentBank::build(&setup.base, &setup.system, &pcfg, 0, k, pmax))?;
        let mut out = Vec::new();
        for &p in &cfg.pool.p_grid {
            let pool = bank.pool(k, p)?;
            for (nu, set) in &sets {
                out.push(pool_row(&format!("{p},{k}"), &pool, *nu, r, setup.seed, set)?);
            }
        }
        Ok(out)
    })?;
    art.files.push(("pool_vs_p.csv".into(), table("p,k,nu,replicate,seed,samples,recall,eta_av,excluded", rows)));
    Ok(art)
}

/// Recall of strategy `name` at one physics-MTD stage on replayed rows.
fn strategy_recall(
    name: &str,
    setup: &Setup,
    stage: &super::pipeline::MtdStage,
    rows: &[Vec<f64>],
    bank: Option<&StudentBank>,
) -> Result<f64, HarnessError> {
    let k = setup.config.pool.k;
    let pool;
    let detector = match name {
        "bdd" => Detector::None,
        "i" => Detector::Model(&stage.adapted.model),
        "ii" | "iii" => {
            let bank = bank.expect("bank built for pool strategies");
            pool = bank.pool(k, usize::from(name == "iii"))?;
            Detector::Pool(&pool)
        }
        _ => unreachable!("validated strategy"),
    };
    detection_rate(&Screen { bdd: true, detector }.flags(&stage.system, rows)?)
}

fn stage_bank(setup: &Setup, stage: &super::pipeline::MtdStage, strategies: &[&str], art: &mut Artifacts, label: String) -> Result<Option<StudentBank>, HarnessError> {
    let hardened = usize::from(strategies.contains(&"iii"));
    if !strategies.iter().any(|s| *s == "ii" || *s == "iii") {
        return Ok(None);
    }
    let pcfg = setup.pool_config();
    art.time(label, || StudentBank::build(&stage.adapted.model, &stage.system, &pcfg, 0, setup.config.pool.k, hardened)).map(Some)
}

/// Strategies (bdd, i, ii, iii) over the SPA targets, tested on the first
/// attack size.
fn spa_sweep(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let strategies: Vec<&str> = cfg.mtd.strategies.iter().map(|s| s.as_str()).collect();
    let nu = cfg.attack.nu[0];
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let set = art.time(format!("replicate.{r}.test-set"), || setup.test_set(nu))?;
        let mut out = Vec::new();
        for &target in &cfg.mtd.spa_targets {
            let t = fmt_f64(target);
            let stage = art.time(format!("replicate.{r}.mtd.{t}"), || setup.mtd_stage(target))?;
            let rows = adversarial_rows(&set, Some(&stage.system))?;
            let bank = stage_bank(setup, &stage, &strategies, art, format!("replicate.{r}.students.{t}"))?;
            for s in &strategies {
                let recall = if rows.is_empty() { "NA".into() } else { fmt_f64(strategy_recall(s, setup, &stage, &rows, bank.as_ref())?) };
                out.push(format!(
                    "{t},{},{},{s},{r},{},{},{recall}",
                    fmt_f64(stage.perturbation.spa),
                    fmt_f64(stage.perturbation.relative_increase),
                    setup.seed,
                    rows.len()
                ));
            }
        }
        Ok(out)
    })?;
    art.files.push(("spa_sweep.csv".into(), table("target_spa,achieved_spa,cost_increase,strategy,replicate,seed,samples,recall", rows)));
    Ok(art)
}

/// CAI of successful attacks against the base model per attack size.
fn cai_vs_nu(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let mut out = Vec::new();
        for &nu in &cfg.attack.nu {
            let tag = format!("cai-{}", fmt_f64(nu));
            let (set, used) = art.time(format!("replicate.{r}.{tag}"), || setup.adversarial_set(&setup.base, nu, cfg.attack.test_samples, &tag))?;
            let cais: Vec<f64> = set.iter().map(|s| s.cai).collect();
            let summary = Summary::of(&cais);
            let cell = |f: fn(&Summary) -> f64| summary.as_ref().map_or("NA".into(), |s| fmt_f64(f(s)));
            out.push(format!(
                "S,{},{r},{},{},{used},{},{},{}",
                fmt_f64(nu),
                setup.seed,
                set.len(),
                cell(|s| s.mean),
                cell(|s| s.median),
                cell(|s| s.std)
            ));
            for s in &set {
                out.push(format!("C,{},{r},{},{}", fmt_f64(nu), s.index, fmt_f64(s.cai)));
            }
        }
        Ok(out)
    })?;
    let (summary, samples): (Vec<String>, Vec<String>) = rows.into_iter().flatten().partition(|l| l.starts_with('S'));
    let strip = |v: Vec<String>| vec![v.into_iter().map(|l| l[2..].to_string()).collect::<Vec<_>>()];
    art.files.push(("cai_vs_nu.csv".into(), table("nu,replicate,seed,samples,attempts,cai_mean,cai_median,cai_std", strip(summary))));
    art.files.push(("cai_samples.csv".into(), table("nu,replicate,index,cai", strip(samples))));
    Ok(art)
}

/// Pool alone, physics MTD on the BDD, and strategies (i)-(iii) at their
/// configured SPA targets.
fn strategy_table(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let nu = cfg.attack.nu[0];
    let [s1, s2, s3] = cfg.mtd.strategy_spa;
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let set = art.time(format!("replicate.{r}.test-set"), || setup.test_set(nu))?;
        let mut out = Vec::new();
        let (k, p) = (cfg.pool.k, cfg.pool.p);
        let pcfg = setup.pool_config();
        let bank = art.time(format!("replicate.{r}.strategy.mtd-dnn"), || StudentBank::build(&setup.base, &setup.system, &pcfg, 0, k, p))?;
        let pool = bank.pool(k, p)?;
        let recall = detection_rate(&Screen { bdd: false, detector: Detector::Pool(&pool) }.flags(&setup.system, &adversarial_rows(&set, None)?)?)?;
        out.push(format!("mtd-dnn,NA,NA,{r},{},{},{},{}", setup.seed, set.len(), fmt_f64(recall), fmt_f64(0.0)));
        for (name, target, strategy) in [("bdd-physics", s1, "bdd"), ("S(i)", s1, "i"), ("S(ii)", s2, "ii"), ("S(iii)", s3, "iii")] {
            let stage = art.time(format!("replicate.{r}.strategy.{name}.mtd"), || setup.mtd_stage(target))?;
            let rows = adversarial_rows(&set, Some(&stage.system))?;
            let bank = stage_bank(setup, &stage, &[strategy], art, format!("replicate.{r}.strategy.{name}.students"))?;
            let recall = strategy_recall(strategy, setup, &stage, &rows, bank.as_ref())?;
            out.push(format!(
                "{name},{},{},{r},{},{},{},{}",
                fmt_f64(target),
                fmt_f64(stage.perturbation.spa),
                setup.seed,
                rows.len(),
                fmt_f64(recall),
                fmt_f64(stage.perturbation.relative_increase)
            ));
        }
        Ok(out)
    })?;
    art.files.push(("strategy_table.csv".into(), table("strategy,spa_target,achieved_spa,replicate,seed,samples,recall,cost_increase", rows)));
    Ok(art)
}

/// Spawned copies of the base without retraining.
pub fn randomized_pool(setup: &Setup, k: usize) -> ModelPool {
    let pcfg = setup.pool_config();
    let students = spawn_students(&setup.base, k, pcfg.perturbation, pcfg.noise, seed::derive(pcfg.seed, "randomized", 0))
        .into_iter()
        .map(|model| Student {
            model,
            provenance: StudentProvenance { nu: 0.0, hardened: false, seed: pcfg.seed, accuracy: f64::NAN, adversarial_rows: 0, skipped: 0 },
        })
        .collect();
    ModelPool { students, generation: 0, config: pcfg }
}

/// Defenses side by side: recall on adversarial attacks and accuracy on
/// legitimate measurements with plain FDIAs.
fn defense_comparison(cfg: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let nu = cfg.attack.nu[0];
    let target = cfg.mtd.strategy_spa[2];
    let (rows, mut art) = per_replicate(cfg, |r, setup, art| {
        let set = art.time(format!("replicate.{r}.test-set"), || setup.test_set(nu))?;
        let (clean, fdia) = setup.legitimate_set(cfg.attack.test_samples)?;
        let (k, p) = (cfg.pool.k, cfg.pool.p);
        let pcfg = setup.pool_config();
        let bank = art.time(format!("replicate.{r}.students"), || StudentBank::build(&setup.base, &setup.system, &pcfg, 0, k, p))?;
        let randomized = randomized_pool(setup, k);
        let plain = bank.pool(k, 0)?;
        let strengthened = bank.pool(k, p)?;
        let stage = art.time(format!("replicate.{r}.mtd"), || setup.mtd_stage(target))?;
        let stage_bank = art.time(format!("replicate.{r}.stage-students"), || StudentBank::build(&stage.adapted.model, &stage.system, &pcfg, 0, k, 1))?;
        let combined = stage_bank.pool(k, 1)?;

        let adv_static = adversarial_rows(&set, None)?;
        let adv_mtd = adversarial_rows(&set, Some(&stage.system))?;
        let (legit_static, labels) = legitimate_rows(&clean, &fdia, None)?;
        let (legit_mtd, _) = legitimate_rows(&clean, &fdia, Some(&stage.system))?;
        let defenses: [(&str, Screen, bool); 6] = [
            ("static-model", Screen { bdd: false, detector: Detector::Model(&setup.base) }, false),
            ("randomization-only", Screen { bdd: false, detector: Detector::Pool(&randomized) }, false),
            ("ensemble-without-refresh", Screen { bdd: false, detector: Detector::Pool(&plain) }, false),
            ("mtd-strengthened-dnn", Screen { bdd: false, detector: Detector::Pool(&strengthened) }, false),
            ("physics-only", Screen { bdd: true, detector: Detector::None }, true),
            ("combined", Screen { bdd: true, detector: Detector::Pool(&combined) }, true),
        ];
        let mut out = Vec::new();
        for (name, screen, physics) in defenses {
            let (system, adv, legit) = if physics { (&stage.system, &adv_mtd, &legit_mtd) } else { (&setup.system, &adv_static, &legit_static) };
            let recall = if adv.is_empty() { "NA".into() } else { fmt_f64(detection_rate(&screen.flags(system, adv)?)?) };
            let m = SetMetrics::new(name, &screen.flags(system, legit)?, &labels)?;
            out.push(format!("{name},{r},{},{},{recall},{},{}", setup.seed, adv.len(), m.rows, fmt_f64(m.accuracy)));
        }
        Ok(out)
    })?;
    art.files.push((
        "defense_comparison.csv".into(),
        table("defense,replicate,seed,adversarial_samples,recall_adversarial,legitimate_rows,accuracy_legitimate", rows),
    ));
    Ok(art)
}

/// Timings as CSV; wall-clock values differ between runs.
pub fn timings_csv(timings: &[(String, f64)]) -> String {
    let mut out = String::from("stage,seconds\n");
    for (k, v) in timings {
        let _ = writeln!(out, "{k},{v:.3}");
    }
    out
}
