//! Command implementations behind the `balsam` binary: dataset simulation,
//! model fitting, coverage studies, and curve emission. Every run writes a
//! manifest echoing the resolved configuration and seed so it can be
//! reproduced byte-for-byte.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{CurvesConfig, FitConfig, SimulateConfig, StudyConfig};
use crate::diagnostics::{
    self, CoverageReport, PopulationEstimates, RiskFlag, SummaryRow,
};
use crate::io;
use crate::mcmc::{self, Algorithm, ChainRunStats, PosteriorSamples};
use crate::model::{population_names, population_values, Dataset, ModelKind, ModelSpec};
use crate::rng::{stream, StreamKind};
use crate::simulate::{generate_dataset, GeneratedDataset};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SimulateManifest {
    command: String,
    seed: u64,
    config: SimulateConfig,
    subjects: usize,
    events: usize,
    inversion_failures: usize,
    runtime_seconds: f64,
    outputs: Vec<String>,
}

/// Simulates one dataset and writes `longitudinal.csv`, `survival.csv`,
/// `truth.json`, and `manifest.json` into `out`.
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<GeneratedDataset> {
    let started = Instant::now();
    let generated = generate_dataset(&cfg.design)?;
    std::fs::create_dir_all(out)?;
    let covariate_names: Vec<String> = (1..=cfg.design.model.covariates)
        .map(|p| format!("x{p}"))
        .collect();
    io::write_longitudinal_csv(&out.join("longitudinal.csv"), &generated.records)?;
    io::write_survival_csv(&out.join("survival.csv"), &generated.records, &covariate_names)?;
    io::write_json(&out.join("truth.json"), &generated.truth)?;
    let manifest = SimulateManifest {
        command: "simulate".into(),
        seed: cfg.design.seed,
        config: cfg.clone(),
        subjects: generated.records.len(),
        events: generated
            .records
            .iter()
            .filter(|r| r.delta == 1)
            .count(),
        inversion_failures: generated.inversion_failures,
        runtime_seconds: started.elapsed().as_secs_f64(),
        outputs: vec![
            "longitudinal.csv".into(),
            "survival.csv".into(),
            "truth.json".into(),
        ],
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(generated)
}

/// Per-subject posterior summary stored for downstream curve emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectPosterior {
    pub id: String,
    pub t: f64,
    pub delta: u8,
    pub b_mean: Vec<f64>,
}

/// Machine-readable fit results consumed by `curves`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResults {
    pub model: ModelSpec,
    pub population_names: Vec<String>,
    pub population_means: Vec<f64>,
    pub subjects: Vec<SubjectPosterior>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitManifest {
    pub command: String,
    pub seed: u64,
    pub config: FitConfig,
    pub covariate_names: Vec<String>,
    pub dropped_missing_rows: usize,
    pub retained_per_chain: usize,
    pub chains: Vec<ChainRunStats>,
    pub dic: f64,
    pub p_d: f64,
    pub runtime_seconds: f64,
    pub outputs: Vec<String>,
}

fn summary_section(spec: &ModelSpec, name: &str) -> usize {
    if name == "lambda" || name.starts_with("beta[") {
        0
    } else if name == "alpha" {
        1
    } else {
        let _ = spec;
        2
    }
}

fn summary_label(spec: &ModelSpec, name: &str, covariates: &[String]) -> String {
    if name == "lambda" {
        return format!("Constant baseline hazard ({name})");
    }
    if let Some(rest) = name.strip_prefix("beta[") {
        let idx: usize = rest.trim_end_matches(']').parse().unwrap_or(1);
        let cov = covariates
            .get(idx - 1)
            .cloned()
            .unwrap_or_else(|| format!("x{idx}"));
        return format!("Coefficient of {cov} ({name})");
    }
    if name == "alpha" {
        return format!("Association coefficient ({name})");
    }
    if name == "gamma" {
        let cov = spec
            .longitudinal_covariate_index
            .and_then(|i| covariates.get(i).cloned())
            .unwrap_or_else(|| "covariate".into());
        return format!("Coefficient of {cov} ({name})");
    }
    if name == "sigma2" {
        return format!("Variance of random error ({name})");
    }
    if let Some(rest) = name.strip_prefix("mu[") {
        let idx: usize = rest.trim_end_matches(']').parse().unwrap_or(1);
        return match (spec.kind, idx) {
            (ModelKind::ModelII, _) => format!("Spline coefficient mean ({name})"),
            (_, 1) => format!("Overall mean ({name})"),
            (_, 2) => format!("Overall slope ({name})"),
            _ => format!("Trajectory mean ({name})"),
        };
    }
    if let Some(rest) = name.strip_prefix("Sigma[") {
        let parts: Vec<&str> = rest.trim_end_matches(']').split(',').collect();
        if parts.len() == 2 && parts[0] == parts[1] {
            return format!("Random-effect variance ({name})");
        }
        return format!("Random-effect covariance ({name})");
    }
    name.to_string()
}

/// Renders the summary rows in the three-section report layout.
pub fn render_summary_table(
    spec: &ModelSpec,
    rows: &[SummaryRow],
    covariates: &[String],
) -> String {
    let headers = ["Survival submodel", "Cumulative variation", "Longitudinal submodel"];
    let mut out = format!(
        "{:<55} {:>18} {:>9} {:>9} {:>7} {:>9}\n",
        "Parameter", "Mean (SD)", "2.5%", "97.5%", "Rhat", "ESS"
    );
    for section in 0..3 {
        out.push_str(headers[section]);
        out.push('\n');
        for row in rows.iter().filter(|r| summary_section(spec, &r.name) == section) {
            let mean_sd = format!("{:.3} ({:.3})", row.mean, row.sd);
            let rhat = row
                .rhat
                .map_or_else(|| "--".into(), |r| format!("{r:.3}"));
            let ess = row
                .ess
                .map_or_else(|| "--".into(), |e| format!("{e:.0}"));
            out.push_str(&format!(
                "  {:<53} {:>18} {:>9.3} {:>9.3} {:>7} {:>9}\n",
                summary_label(spec, &row.name, covariates),
                mean_sd,
                row.q025,
                row.q975,
                rhat,
                ess
            ));
        }
    }
    out
}

/// Fits the model to the two CSV files and writes `chains/*.csv`,
/// `summary.json`, `summary.txt`, `posterior_means.json`, and
/// `manifest.json` into `out`.
pub fn cmd_fit(
    cfg: &FitConfig,
    longitudinal: &Path,
    survival: &Path,
    out: &Path,
    threads: usize,
) -> Result<(Vec<SummaryRow>, PosteriorSamples)> {
    let started = Instant::now();
    let ingested = io::read_dataset(longitudinal, survival, cfg.transform)?;
    if ingested.covariate_names.len() != cfg.model.covariates {
        return Err(Error::Config(format!(
            "model expects {} covariates but the survival file provides {} ({:?})",
            cfg.model.covariates,
            ingested.covariate_names.len(),
            ingested.covariate_names
        )));
    }
    let data = Dataset::prepare(&cfg.model, ingested.records)?;
    let samples = mcmc::run(&cfg.model, &data, &cfg.sampler, threads)?;
    let rows = diagnostics::summarize(&samples);
    let (dic, p_d) = diagnostics::dic(&samples.pooled_deviance());

    std::fs::create_dir_all(out.join("chains"))?;
    let mut outputs = Vec::new();
    for chain in 0..samples.n_chains() {
        let name = format!("chains/chain_{:02}.csv", chain + 1);
        io::write_chain_csv(
            &out.join(&name),
            samples.param_names(),
            samples.chain_draws(chain),
            cfg.sampler.burn_in,
            cfg.sampler.thin,
        )?;
        outputs.push(name);
    }
    io::write_json(&out.join("summary.json"), &rows)?;
    outputs.push("summary.json".into());
    io::write_atomic(
        &out.join("summary.txt"),
        render_summary_table(&cfg.model, &rows, &ingested.covariate_names).as_bytes(),
    )?;
    outputs.push("summary.txt".into());

    let means: Vec<f64> = (0..samples.param_names().len())
        .map(|idx| samples.pooled_mean(idx))
        .collect();
    let results = FitResults {
        model: cfg.model.clone(),
        population_names: samples.param_names().to_vec(),
        population_means: means,
        subjects: (0..data.len())
            .map(|i| {
                let rec = &data.subject(i).record;
                SubjectPosterior {
                    id: rec.id.clone(),
                    t: rec.t,
                    delta: rec.delta,
                    b_mean: samples.b_means[i].clone(),
                }
            })
            .collect(),
    };
    io::write_json(&out.join("posterior_means.json"), &results)?;
    outputs.push("posterior_means.json".into());

    let manifest = FitManifest {
        command: "fit".into(),
        seed: cfg.sampler.seed,
        config: cfg.clone(),
        covariate_names: ingested.covariate_names,
        dropped_missing_rows: ingested.dropped_missing,
        retained_per_chain: samples.retained_per_chain(),
        chains: samples.stats.clone(),
        dic,
        p_d,
        runtime_seconds: started.elapsed().as_secs_f64(),
        outputs: outputs.clone(),
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok((rows, samples))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudyOutput {
    pub coverage: CoverageReport,
    pub truth: Vec<(String, f64)>,
    pub replicates_requested: usize,
    pub replicates_succeeded: usize,
    pub replicates_failed: usize,
    /// Post-burn-in divergent-transition fraction pooled over replicates
    /// (NUTS only).
    pub divergence_rate: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyManifest {
    command: String,
    seed: u64,
    config: StudyConfig,
    runtime_seconds: f64,
    outputs: Vec<String>,
}

enum ReplicateOutcome {
    Intervals(Vec<(f64, f64)>, usize, usize),
    Failed(String),
}

/// Runs the simulate -> fit -> score loop. Per-replicate seeds derive from
/// the design seed; failed replicates (rejected datasets, initialization
/// failures) are excluded and counted.
pub fn cmd_study(cfg: &StudyConfig, out: &Path, threads: usize) -> Result<StudyOutput> {
    if cfg.replicates == 0 {
        return Err(Error::Config("study needs replicates >= 1".into()));
    }
    cfg.design.validate()?;
    cfg.sampler.validate()?;
    let started = Instant::now();
    let master_seed = cfg.design.seed;

    let names = population_names(&cfg.design.model);
    let truth_state = cfg
        .design
        .truth
        .to_state(nalgebra::DMatrix::zeros(0, cfg.design.model.random_effect_dim()));
    let truth_values = population_values(&cfg.design.model, &truth_state);

    let replicate_ids: Vec<usize> = (0..cfg.replicates).collect();
    let mut outcomes: Vec<Option<ReplicateOutcome>> =
        (0..cfg.replicates).map(|_| None).collect();

    for batch in replicate_ids.chunks(threads.max(1)) {
        let results: Vec<(usize, ReplicateOutcome)> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&rep| {
                    (
                        rep,
                        scope.spawn(move || run_replicate(cfg, master_seed, rep)),
                    )
                })
                .collect();
            handles
                .into_iter()
                .map(|(rep, handle)| {
                    (
                        rep,
                        handle.join().unwrap_or_else(|_| {
                            ReplicateOutcome::Failed(format!("replicate {rep} panicked"))
                        }),
                    )
                })
                .collect()
        });
        for (rep, outcome) in results {
            outcomes[rep] = Some(outcome);
        }
    }

    let mut intervals = Vec::new();
    let mut failures = 0usize;
    let mut failure_messages = Vec::new();
    let mut divergences = 0usize;
    let mut transitions = 0usize;
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            ReplicateOutcome::Intervals(iv, div, trans) => {
                intervals.push(iv);
                divergences += div;
                transitions += trans;
            }
            ReplicateOutcome::Failed(msg) => {
                failures += 1;
                if failure_messages.len() < 5 {
                    failure_messages.push(msg);
                }
            }
        }
    }

    if failures as f64 > cfg.max_failure_fraction * cfg.replicates as f64 {
        return Err(Error::Study(format!(
            "{failures} of {} replicates failed (limit {:.0}%): {}",
            cfg.replicates,
            100.0 * cfg.max_failure_fraction,
            failure_messages.join("; ")
        )));
    }

    let coverage = diagnostics::score_coverage(&names, &intervals, &truth_values, failures);
    let output = StudyOutput {
        coverage,
        truth: names
            .iter()
            .cloned()
            .zip(truth_values.iter().copied())
            .collect(),
        replicates_requested: cfg.replicates,
        replicates_succeeded: intervals.len(),
        replicates_failed: failures,
        divergence_rate: (cfg.sampler.algorithm == Algorithm::Nuts && transitions > 0)
            .then(|| divergences as f64 / transitions as f64),
    };

    std::fs::create_dir_all(out)?;
    io::write_json(&out.join("coverage.json"), &output)?;
    let manifest = StudyManifest {
        command: "study".into(),
        seed: master_seed,
        config: cfg.clone(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        outputs: vec!["coverage.json".into()],
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(output)
}

fn run_replicate(cfg: &StudyConfig, master_seed: u64, rep: usize) -> ReplicateOutcome {
    use rand::Rng;
    let mut seed_rng = stream(master_seed, StreamKind::Replicate, rep as u64);
    let mut design = cfg.design.clone();
    design.seed = seed_rng.random();
    let mut sampler = cfg.sampler.clone();
    sampler.seed = seed_rng.random();

    let generated = match generate_dataset(&design) {
        Ok(g) => g,
        Err(e) => return ReplicateOutcome::Failed(format!("replicate {rep}: {e}")),
    };
    let data = match Dataset::prepare(&design.model, generated.records) {
        Ok(d) => d,
        Err(e) => return ReplicateOutcome::Failed(format!("replicate {rep}: {e}")),
    };
    // chains run serially inside a replicate; replicates parallelize
    let samples = match mcmc::run(&design.model, &data, &sampler, 1) {
        Ok(s) => s,
        Err(e) => return ReplicateOutcome::Failed(format!("replicate {rep}: {e}")),
    };
    let rows = diagnostics::summarize(&samples);
    let intervals = rows.iter().map(|r| (r.q025, r.q975)).collect();
    let divergences = samples.stats.iter().map(|s| s.divergences).sum();
    let transitions = samples.config.iterations.saturating_sub(samples.config.burn_in)
        * samples.n_chains();
    ReplicateOutcome::Intervals(intervals, divergences, transitions)
}

#[derive(Debug, Serialize, Deserialize)]
struct CurvesManifest {
    command: String,
    config: CurvesConfig,
    fit_dir: String,
    runtime_seconds: f64,
    outputs: Vec<String>,
}

/// Emits the fitted population curve table and the per-subject cumulative
/// variations with risk flags, from a completed fit directory.
pub fn cmd_curves(cfg: &CurvesConfig, fit_dir: &Path, out: &Path) -> Result<Vec<RiskFlag>> {
    let started = Instant::now();
    let results: FitResults = crate::config::load_config(&fit_dir.join("posterior_means.json"))?;
    let spec = &results.model;

    let lookup = |name: &str| -> Result<f64> {
        results
            .population_names
            .iter()
            .position(|n| n == name)
            .map(|i| results.population_means[i])
            .ok_or_else(|| Error::Input(format!("fit results missing parameter `{name}`")))
    };
    let estimates = PopulationEstimates {
        lambda: lookup("lambda")?,
        beta: (1..=spec.covariates)
            .map(|p| lookup(&format!("beta[{p}]")))
            .collect::<Result<Vec<f64>>>()?,
        alpha: lookup("alpha")?,
        mu: (1..=spec.random_effect_dim())
            .map(|j| lookup(&format!("mu[{j}]")))
            .collect::<Result<Vec<f64>>>()?,
    };

    let times = cfg.grid.times()?;
    let table = diagnostics::curve_table(spec, &estimates, &cfg.profile, &times, cfg.slope_index)?;

    // per-subject cumulative variation at the posterior-mean random effects
    let mut subjects = Vec::with_capacity(results.subjects.len());
    for s in &results.subjects {
        let g = match spec.kind {
            ModelKind::ModelI | ModelKind::ModelIa => {
                crate::model::arc_length_model1(s.b_mean[1], s.t)
            }
            ModelKind::ModelII => crate::model::arc_length_model2(
                &s.b_mean,
                spec.spline.as_ref().unwrap(),
                s.t,
                spec.quad_points,
            )?,
        };
        subjects.push((s.id.clone(), s.t, g));
    }
    let flags = diagnostics::flag_high_risk(&subjects, &cfg.risk);

    std::fs::create_dir_all(out)?;
    let mut curve_text = String::from("t,cumulative_variation,hazard,survival\n");
    for row in &table.rows {
        curve_text.push_str(&format!(
            "{},{},{},{}\n",
            row.t, row.cumulative_variation, row.hazard, row.survival
        ));
    }
    io::write_atomic(&out.join("curves.csv"), curve_text.as_bytes())?;

    let mut subject_text = String::from("id,t,cumulative_variation,flagged\n");
    for flag in &flags {
        subject_text.push_str(&format!(
            "{},{},{},{}\n",
            flag.id,
            flag.t,
            flag.cumulative_variation,
            u8::from(flag.flagged)
        ));
    }
    io::write_atomic(&out.join("subjects.csv"), subject_text.as_bytes())?;

    let manifest = CurvesManifest {
        command: "curves".into(),
        config: cfg.clone(),
        fit_dir: fit_dir.display().to_string(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        outputs: vec!["curves.csv".into(), "subjects.csv".into()],
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(flags)
}
