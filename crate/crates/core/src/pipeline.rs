//! Experiment harness: data generation, latent-model training,
//! reconstruction, estimation and reporting.
//!
//! Every artifact lives under the configured output directory and is a pure
//! function of the config and seed list. Paths recorded inside artifacts are
//! relative to that directory so two output directories of the same run
//! compare byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{build_problem, generate_dataset, BenchmarkProblem, EnvConfig, PolicyConfig};
use crate::error::{Error, Result};
use crate::estimators::variance::near_behavior_target;
use crate::estimators::{
    estimate_behavior_policy, run_estimator, variance_study, BehaviorModel, Diagnostics, EstimatorConfig,
    EstimatorKind, VarianceStudy, VarianceStudyConfig,
};
use crate::hmdp::OfflineDataset;
use crate::io::{load_json, save_dataset, save_json};
use crate::metrics::{mae, mean_se, rank_correlation, regret_at_1};
use crate::rilr::{
    fusion_reconstruct, oracle_reconstruct, rescale_reconstruct, train_rilr, ReconstructedDataset,
    ReconstructionMethod, RilrConfig,
};
use crate::seed::derive_seed;
use crate::vlmh::{predict_human_return, train_vlmh, LatentEncoding, VlmhConfig, VlmhModel};

/// Estimator tag of the latent-model ablation rows.
pub const ABLATION_ESTIMATOR: &str = "vlmh-ablation";
/// Method tag of the latent-model ablation rows.
pub const ABLATION_METHOD: &str = "vlmh";

/// Source of the behavior probabilities used by importance weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorMode {
    /// Probabilities logged in the dataset.
    Logged,
    /// The generating mixture, evaluated exactly.
    Known,
    /// Count-based estimate from the dataset.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceStudySection {
    /// Total-variation radius of the near-behavior target.
    #[serde(default = "default_tv")]
    pub max_tv: f64,
    #[serde(default)]
    pub study: VarianceStudyConfig,
}

fn default_tv() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    #[serde(default)]
    pub policies: PolicyConfig,
    pub trajectories: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorKind>,
    pub methods: Vec<ReconstructionMethod>,
    #[serde(default = "default_behavior")]
    pub behavior: BehaviorMode,
    /// Add-α smoothing of the estimated behavior policy.
    #[serde(default = "default_alpha")]
    pub behavior_smoothing: f64,
    /// Latent rollouts per target for the ablation; 0 disables it.
    #[serde(default)]
    pub ablation_rollouts: usize,
    #[serde(default)]
    pub vlmh: VlmhConfig,
    #[serde(default)]
    pub rilr: RilrConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub variance_study: Option<VarianceStudySection>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_behavior() -> BehaviorMode {
    BehaviorMode::Logged
}

fn default_alpha() -> f64 {
    1.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("at least one estimator and one method are required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.trajectories == 0 {
            return Err(Error::Config("trajectories must be positive".into()));
        }
        if !(self.behavior_smoothing >= 0.0) {
            return Err(Error::Config("behavior_smoothing must be ≥ 0".into()));
        }
        self.vlmh.validate()?;
        self.rilr.validate()?;
        Ok(())
    }

    fn needs_vlmh(&self) -> bool {
        self.ablation_rollouts > 0 || self.methods.contains(&ReconstructionMethod::Rilr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    /// Dataset path relative to the output directory.
    pub dataset: String,
    pub trajectories: usize,
    pub behavior_value: f64,
    pub targets: Vec<TargetTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub env: EnvConfig,
    pub seeds: Vec<SeedManifest>,
}

impl Manifest {
    fn truth(&self, seed: u64, policy_id: &str) -> Option<f64> {
        self.seeds
            .iter()
            .find(|s| s.seed == seed)?
            .targets
            .iter()
            .find(|t| t.id == policy_id)
            .map(|t| t.value)
    }
}

/// One line of `estimates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateLine {
    pub seed: u64,
    pub estimator: String,
    pub method: String,
    pub policy_id: String,
    pub estimate: f64,
    pub diagnostics: Diagnostics,
}

/// A failed cell; other cells of the run are unaffected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub seed: u64,
    pub stage: String,
    pub method: Option<String>,
    pub estimator: Option<String>,
    pub policy_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLine {
    pub seed: u64,
    pub method: String,
    pub median_normalized_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub method: String,
    pub policy_id: String,
    pub estimate: f64,
    pub truth: f64,
    pub seed: u64,
}

/// Per-seed metrics of one `(estimator, method)` pair and their mean ± SE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub estimator: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub mae: Vec<f64>,
    pub rank_correlation: Vec<f64>,
    pub regret_at_1: Vec<f64>,
    pub mae_mean: f64,
    pub mae_se: f64,
    pub rank_mean: f64,
    pub rank_se: f64,
    pub regret_mean: f64,
    pub regret_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub summaries: Vec<Summary>,
    pub residuals: Vec<ResidualLine>,
    pub errors: Vec<CellError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: Report,
    pub rows: Vec<ReportRow>,
}

impl RunOutcome {
    /// Number of failed cells.
    pub fn failures(&self) -> usize {
        self.report.errors.len()
    }
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn problem_for(cfg: &ExperimentConfig, seed: u64) -> Result<BenchmarkProblem> {
    build_problem(&cfg.env, &cfg.policies, derive_seed(seed, "env", 0), &cfg.name)
}

fn dataset_for(cfg: &ExperimentConfig, problem: &BenchmarkProblem, seed: u64) -> Result<OfflineDataset> {
    generate_dataset(
        &problem.env,
        &problem.behavior,
        cfg.trajectories,
        derive_seed(seed, "data", 0),
        &format!("{}/behavior", cfg.name),
    )
}

struct SeedData {
    seed: u64,
    problem: BenchmarkProblem,
    dataset: OfflineDataset,
}

fn generate_all(cfg: &ExperimentConfig) -> Result<(Manifest, Vec<SeedData>)> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut data = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let problem = problem_for(cfg, seed)?;
        let dataset = dataset_for(cfg, &problem, seed)?;
        let rel = format!("{}/dataset.jsonl", seed_dir(seed));
        std::fs::create_dir_all(out.join(seed_dir(seed)))?;
        save_dataset(&dataset, out.join(&rel))?;
        seeds.push(SeedManifest {
            seed,
            dataset: rel,
            trajectories: dataset.len(),
            behavior_value: problem.behavior_value,
            targets: problem
                .targets
                .iter()
                .map(|t| TargetTruth {
                    id: t.id.clone(),
                    value: t.value,
                })
                .collect(),
        });
        data.push(SeedData { seed, problem, dataset });
    }
    let manifest = Manifest {
        name: cfg.name.clone(),
        env: cfg.env.clone(),
        seeds,
    };
    save_json(&manifest, out.join("manifest.json"))?;
    Ok((manifest, data))
}

/// Writes one dataset per seed and `manifest.json` with exact target values.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    Ok(generate_all(cfg)?.0)
}

fn behavior_model(cfg: &ExperimentConfig, sd: &SeedData) -> Result<BehaviorModel> {
    Ok(match cfg.behavior {
        BehaviorMode::Logged => BehaviorModel::Logged,
        BehaviorMode::Known => BehaviorModel::Known(sd.problem.behavior.clone()),
        BehaviorMode::Estimated => {
            BehaviorModel::Estimated(estimate_behavior_policy(&sd.dataset, cfg.behavior_smoothing)?)
        }
    })
}

fn cell_error(seed: u64, stage: &str, method: Option<&str>, estimator: Option<&str>, policy: Option<&str>, e: &Error) -> CellError {
    CellError {
        seed,
        stage: stage.to_string(),
        method: method.map(str::to_string),
        estimator: estimator.map(str::to_string),
        policy_id: policy.map(str::to_string),
        error: e.to_string(),
    }
}

#[derive(Default)]
struct SeedResult {
    estimates: Vec<EstimateLine>,
    residuals: Vec<ResidualLine>,
    errors: Vec<CellError>,
}

fn run_seed(cfg: &ExperimentConfig, sd: &SeedData) -> SeedResult {
    let seed = sd.seed;
    let mut res = SeedResult::default();
    let dir = cfg.out_dir.join(seed_dir(seed));

    let vlmh = if cfg.needs_vlmh() {
        let trained = (|| {
            let mut m = VlmhModel::new(&sd.dataset, cfg.vlmh.clone(), derive_seed(seed, "vlmh-init", 0))?;
            train_vlmh(&mut m, &sd.dataset, derive_seed(seed, "vlmh-train", 0))?;
            m.save(dir.join("vlmh.json"))?;
            Ok::<_, Error>(m)
        })();
        match trained {
            Ok(m) => Some(m),
            Err(e) => {
                res.errors.push(cell_error(seed, "vlmh", None, None, None, &e));
                None
            }
        }
    } else {
        None
    };

    let mut recs: Vec<ReconstructedDataset> = Vec::new();
    for &method in &cfg.methods {
        let r = match method {
            ReconstructionMethod::Rescale => rescale_reconstruct(&sd.dataset),
            ReconstructionMethod::Fusion => fusion_reconstruct(&sd.dataset),
            ReconstructionMethod::OracleIhr => oracle_reconstruct(&sd.dataset),
            ReconstructionMethod::Rilr => match &vlmh {
                Some(m) => {
                    let rc = RilrConfig {
                        seed: derive_seed(seed, "rilr", 0),
                        ..cfg.rilr.clone()
                    };
                    train_rilr(&sd.dataset, m, &rc).map(|(_, rec, _)| rec)
                }
                None => Err(Error::Untrained),
            },
        };
        let r = r.and_then(|rec| {
            rec.write_sidecar(dir.join(format!("ihrs-{}.jsonl", method.name())))?;
            Ok(rec)
        });
        match r {
            Ok(rec) => {
                res.residuals.push(ResidualLine {
                    seed,
                    method: method.name().to_string(),
                    median_normalized_residual: rec.median_normalized_residual(),
                });
                recs.push(rec);
            }
            Err(e) => res
                .errors
                .push(cell_error(seed, "reconstruction", Some(method.name()), None, None, &e)),
        }
    }

    let behavior = match behavior_model(cfg, sd) {
        Ok(b) => Some(b),
        Err(e) => {
            res.errors.push(cell_error(seed, "behavior", None, None, None, &e));
            None
        }
    };
    if let Some(behavior) = &behavior {
        let cells: Vec<(usize, EstimatorKind, usize)> = (0..recs.len())
            .flat_map(|m| {
                cfg.estimators
                    .iter()
                    .flat_map(move |&k| (0..sd.problem.targets.len()).map(move |t| (m, k, t)))
            })
            .collect();
        let outcomes: Vec<std::result::Result<EstimateLine, CellError>> = cells
            .par_iter()
            .map(|&(m, kind, t)| {
                let rec = &recs[m];
                let target = &sd.problem.targets[t];
                let method = rec.method.name();
                run_estimator(kind, &sd.dataset, &rec.ihrs, &target.policy, &target.id, method, behavior, &cfg.estimator)
                    .map(|r| EstimateLine {
                        seed,
                        estimator: kind.name().to_string(),
                        method: method.to_string(),
                        policy_id: target.id.clone(),
                        estimate: r.estimate,
                        diagnostics: r.diagnostics,
                    })
                    .map_err(|e| cell_error(seed, "estimation", Some(method), Some(kind.name()), Some(&target.id), &e))
            })
            .collect();
        for o in outcomes {
            match o {
                Ok(l) => res.estimates.push(l),
                Err(e) => res.errors.push(e),
            }
        }
    }

    if cfg.ablation_rollouts > 0 {
        if let Some(m) = &vlmh {
            let outcomes: Vec<_> = sd
                .problem
                .targets
                .par_iter()
                .enumerate()
                .map(|(t, target)| {
                    predict_human_return(m, &target.policy, cfg.ablation_rollouts, derive_seed(seed, "ablation", t as u64))
                        .map(|v| EstimateLine {
                            seed,
                            estimator: ABLATION_ESTIMATOR.to_string(),
                            method: ABLATION_METHOD.to_string(),
                            policy_id: target.id.clone(),
                            estimate: v,
                            diagnostics: Diagnostics::default(),
                        })
                        .map_err(|e| {
                            cell_error(seed, "ablation", Some(ABLATION_METHOD), Some(ABLATION_ESTIMATOR), Some(&target.id), &e)
                        })
                })
                .collect();
            for o in outcomes {
                match o {
                    Ok(l) => res.estimates.push(l),
                    Err(e) => res.errors.push(e),
                }
            }
        }
    }
    res
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Load {
            line: i,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Full pipeline for every seed, followed by [`report`]. Seeds run in order;
/// cells within a seed run concurrently once the shared latent model is
/// trained.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (_, data) = generate_all(cfg)?;
    let mut estimates = Vec::new();
    let mut residuals = Vec::new();
    let mut errors = Vec::new();
    for sd in &data {
        log::info!("seed {}: {} trajectories", sd.seed, sd.dataset.len());
        let r = run_seed(cfg, sd);
        estimates.extend(r.estimates);
        residuals.extend(r.residuals);
        errors.extend(r.errors);
    }
    write_jsonl(&estimates, &cfg.out_dir.join("estimates.jsonl"))?;
    write_jsonl(&residuals, &cfg.out_dir.join("residuals.jsonl"))?;
    write_jsonl(&errors, &cfg.out_dir.join("errors.jsonl"))?;
    report(&cfg.out_dir)
}

fn summarize(group: &[&ReportRow], seeds: &[u64]) -> Option<Summary> {
    let first = group.first()?;
    let (mut used, mut maes, mut ranks, mut regrets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &s in seeds {
        let rows: Vec<&&ReportRow> = group.iter().filter(|r| r.seed == s).collect();
        if rows.is_empty() {
            continue;
        }
        let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
        let tru: Vec<f64> = rows.iter().map(|r| r.truth).collect();
        let (Ok(m), Ok(g)) = (mae(&est, &tru), regret_at_1(&est, &tru)) else {
            continue;
        };
        used.push(s);
        maes.push(m);
        // Constant estimates carry no ranking information.
        ranks.push(rank_correlation(&est, &tru).unwrap_or(0.0));
        regrets.push(g);
    }
    if used.is_empty() {
        return None;
    }
    let (mae_mean, mae_se) = mean_se(&maes);
    let (rank_mean, rank_se) = mean_se(&ranks);
    let (regret_mean, regret_se) = mean_se(&regrets);
    Some(Summary {
        estimator: first.estimator.clone(),
        method: first.method.clone(),
        seeds: used,
        mae: maes,
        rank_correlation: ranks,
        regret_at_1: regrets,
        mae_mean,
        mae_se,
        rank_mean,
        rank_se,
        regret_mean,
        regret_se,
    })
}

/// Aggregates `estimates.jsonl` against the manifest truths and writes
/// `report.csv` and `report.json`.
pub fn report(out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    let out = out_dir.as_ref();
    let manifest: Manifest = load_json(out.join("manifest.json"))?;
    let estimates: Vec<EstimateLine> = read_jsonl(&out.join("estimates.jsonl"))?;
    let residuals: Vec<ResidualLine> = read_jsonl(&out.join("residuals.jsonl"))?;
    let errors: Vec<CellError> = read_jsonl(&out.join("errors.jsonl"))?;
    let mut rows = Vec::with_capacity(estimates.len());
    for e in &estimates {
        let truth = manifest
            .truth(e.seed, &e.policy_id)
            .ok_or_else(|| Error::Missing(format!("truth for seed {} policy {}", e.seed, e.policy_id)))?;
        rows.push(ReportRow {
            estimator: e.estimator.clone(),
            method: e.method.clone(),
            policy_id: e.policy_id.clone(),
            estimate: e.estimate,
            truth,
            seed: e.seed,
        });
    }
    let seeds: Vec<u64> = manifest.seeds.iter().map(|s| s.seed).collect();
    let mut groups: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.estimator.clone(), r.method.clone())).or_default().push(r);
    }
    let summaries = groups.values().filter_map(|g| summarize(g, &seeds)).collect();
    let rep = Report {
        name: manifest.name.clone(),
        summaries,
        residuals,
        errors,
    };
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    save_json(&rep, out.join("report.json"))?;
    Ok(RunOutcome { report: rep, rows })
}

/// Writes `(trajectory_id, step, z_0 … z_{L−1}, human_return)` rows, one per
/// step `0..=T` of every trajectory. Returns the row count.
pub fn export_encodings(model: &VlmhModel, ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<usize> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    let enc = model.encode_dataset(ds)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trajectory_id".to_string(), "step".to_string()];
    header.extend((0..model.latent_dim()).map(|j| format!("z_{j}")));
    header.push("human_return".into());
    w.write_record(&header)?;
    for e in &enc {
        let mut rec = vec![e.trajectory.to_string(), e.step.to_string()];
        rec.extend(e.mean.iter().map(|v| v.to_string()));
        rec.push(e.human_return.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(enc.len())
}

/// Parses a file written by [`export_encodings`].
pub fn read_encodings(path: impl AsRef<Path>) -> Result<Vec<LatentEncoding>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 4 {
        return Err(Error::Load {
            line: 0,
            msg: "expected at least one latent column".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| Error::Load {
                line: i + 1,
                msg: format!("column {j} is not a number"),
            })
        };
        out.push(LatentEncoding {
            trajectory: num(0)? as usize,
            step: num(1)? as usize,
            mean: (2..width - 1).map(num).collect::<Result<_>>()?,
            human_return: num(width - 1)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudyRecord {
    pub seed: u64,
    pub max_tv: f64,
    pub study: VarianceStudy,
}

/// For every seed: the near-behavior target within the configured total
/// variation, then the PDIS-versus-IS variance study. Writes
/// `variance_study.json`.
pub fn run_variance_study(cfg: &ExperimentConfig) -> Result<Vec<VarianceStudyRecord>> {
    cfg.validate()?;
    let section = cfg
        .variance_study
        .clone()
        .ok_or_else(|| Error::Config("missing [variance_study] section".into()))?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let problem = problem_for(cfg, seed)?;
        let (target, tv) = near_behavior_target(&problem.env, &problem.behavior, section.max_tv)?;
        let study_cfg = VarianceStudyConfig {
            seed: derive_seed(seed, "variance-study", 0),
            ..section.study.clone()
        };
        let study = variance_study(&problem.env, &problem.behavior, &target, &study_cfg)?;
        out.push(VarianceStudyRecord { seed, max_tv: tv, study });
    }
    save_json(&out, cfg.out_dir.join("variance_study.json"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
trajectories = 60
seeds = [3]
estimators = ["pdis", "is"]
methods = ["rescale", "oracle-ihr"]

[env]
kind = "random-tabular"
num_states = 3
num_actions = 2
horizon = 4
discount = 0.9
"#;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(SMALL).unwrap();
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(c.behavior, BehaviorMode::Logged);
        assert_eq!(c.ablation_rollouts, 0);
        let bad = SMALL.replace(r#"estimators = ["pdis", "is"]"#, "estimators = []");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let typo = SMALL.replace("trajectories", "trajectorie");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
    }

    #[test]
    fn shipped_example_parses() {
        let c = ExperimentConfig::from_toml(include_str!("../../../docs/example.toml")).unwrap();
        assert_eq!(c.methods.len(), 4);
        assert!(c.variance_study.is_some());
    }

    #[test]
    fn encodings_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::vlmh::tests::tiny_dataset(10, 5);
        let cfg = VlmhConfig {
            latent_dim: 3,
            hidden_size: 4,
            head_sizes: vec![5],
            epochs: 1,
            ..Default::default()
        };
        let mut m = VlmhModel::new(&ds, cfg, 0).unwrap();
        let path = dir.path().join("enc.csv");
        assert!(matches!(export_encodings(&m, &ds, &path), Err(Error::Untrained)));
        train_vlmh(&mut m, &ds, 0).unwrap();
        assert_eq!(export_encodings(&m, &ds, &path).unwrap(), 60);
        assert_eq!(read_encodings(&path).unwrap(), m.encode_dataset(&ds).unwrap());
    }

    #[test]
    fn report_has_one_row_per_target_and_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.methods = vec![ReconstructionMethod::Rescale];
        cfg.estimators = vec![EstimatorKind::Pdis];
        let out = run(&cfg).unwrap();
        let n_targets = problem_for(&cfg, 3).unwrap().targets.len();
        assert_eq!(out.rows.len(), n_targets);
        assert_eq!(out.failures(), 0);
    }

    #[test]
    fn manifest_truths_match_a_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let m = gen_data(&cfg).unwrap();
        let p = problem_for(&cfg, 3).unwrap();
        for (t, truth) in p.targets.iter().zip(&m.seeds[0].targets) {
            let v = crate::envs::exact_policy_human_value(&p.env, &t.policy).unwrap();
            assert_eq!(truth.value, v);
        }
        let ds = crate::io::load_dataset(dir.path().join(&m.seeds[0].dataset)).unwrap();
        assert_eq!(ds.len(), 60);
    }

    #[test]
    fn failing_cells_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let text = SMALL.replace("horizon = 4", "horizon = 8").replace("discount = 0.9", "discount = 0.01");
        let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        // γ^{T−1} underflows, so rescale fails while the oracle cells run.
        let out = run(&cfg).unwrap();
        assert_eq!(out.failures(), 1);
        assert_eq!(out.report.errors[0].method.as_deref(), Some("rescale"));
        assert!(!out.rows.is_empty());
        assert!(out.rows.iter().all(|r| r.method == "oracle-ihr"));
    }
}
