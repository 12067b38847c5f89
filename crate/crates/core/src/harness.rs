//! Experiment orchestration: single runs, ablations, few-shot sweeps,
//! one-class evaluation and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::datasets::{
    gen_gaussian_mixture, gen_low_frequency_noise, gen_ring, gen_uniform_noise, load_csv,
    sample_few_shots, CsvData, DatasetKind, DatasetSpec,
};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::losses::{LabeledBatch, LossWeights, OutlierPool, PoolSource};
use crate::models::{Activation, MlpClassifier};
use crate::rng;
use crate::scoring::{evaluate_ood, MetricReport, RobustnessBudget};
use crate::training::{
    run_frob_pipeline, AblationMode, ModelConfig, PhaseTrace, PipelineConfig, PipelineData,
    PipelineOutput, TrainSchedule,
};

const TAG_FEW_SHOTS: u64 = 0x4645_5753;

/// AUROC at or below this level counts as chance for break-point detection.
pub const CHANCE_AUROC: f64 = 0.55;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRoles {
    pub normal: DatasetSpec,
    /// Seed and size of the held-out normal samples used at evaluation; size 0
    /// means the training size.
    pub in_test_seed: u64,
    pub in_test_size: usize,
    /// Held-out normal samples when `normal` is a CSV file.
    pub in_test_path: String,
    /// Auxiliary outlier dataset; size 0 disables it.
    pub outlier: DatasetSpec,
    pub few_shot_pool: DatasetSpec,
    pub tests: Vec<DatasetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Modes swept by the command line, each over every count.
    pub modes: Vec<AblationMode>,
    pub counts: Vec<usize>,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub modes: Vec<AblationMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: AblationMode,
    pub few_shots: usize,
    /// Default output directory; the command line may replace it.
    pub output: String,
    pub datasets: DatasetRoles,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub model: ModelConfig,
    pub budget: RobustnessBudget,
}

/// Three Gaussian classes in the plane, a ring of few-shot outliers around
/// them, and ring, uniform-noise and low-frequency-noise test sets.
pub fn reference_config() -> ExperimentConfig {
    let ring = |name: &str, seed, size| DatasetSpec {
        name: name.into(),
        kind: DatasetKind::Ring,
        r_inner: 0.8,
        r_outer: 1.1,
        size,
        seed,
        ..DatasetSpec::default()
    };
    ExperimentConfig {
        seed: 7,
        mode: AblationMode::Iii,
        few_shots: 64,
        output: "runs".into(),
        datasets: DatasetRoles {
            normal: DatasetSpec {
                name: "normal".into(),
                kind: DatasetKind::GaussianMixture,
                means: vec![vec![-0.45, -0.3], vec![0.45, -0.3], vec![0.0, 0.45]],
                scale: 0.08,
                size: 1500,
                seed: 1,
                ..DatasetSpec::default()
            },
            in_test_seed: 2,
            in_test_size: 600,
            in_test_path: String::new(),
            outlier: DatasetSpec {
                name: "outlier".into(),
                kind: DatasetKind::UniformNoise,
                low: -2.0,
                high: 2.0,
                size: 1000,
                seed: 3,
                ..DatasetSpec::default()
            },
            few_shot_pool: ring("few-shot-pool", 4, 512),
            tests: vec![
                ring("ring", 5, 600),
                DatasetSpec {
                    name: "uniform-noise".into(),
                    kind: DatasetKind::UniformNoise,
                    low: -1.0,
                    high: 1.0,
                    size: 600,
                    seed: 6,
                    ..DatasetSpec::default()
                },
                DatasetSpec {
                    name: "lfn".into(),
                    kind: DatasetKind::LowFrequencyNoise,
                    amplitude: 0.5,
                    window: 2,
                    size: 600,
                    seed: 8,
                    ..DatasetSpec::default()
                },
            ],
        },
        sweep: SweepConfig {
            modes: vec![AblationMode::Ii, AblationMode::Iii],
            counts: vec![256, 128, 64, 32, 8, 0],
            floor: CHANCE_AUROC,
        },
        ablation: AblationConfig {
            modes: AblationMode::ALL.to_vec(),
        },
        weights: LossWeights::default(),
        schedule: TrainSchedule {
            phase_a_epochs: 30,
            phase_b_epochs: 20,
            phase_c_epochs: 30,
            lr_a: 5e-3,
            lr_b: 5e-3,
            lr_c: 5e-3,
            boundary_pool_size: 512,
            ..TrainSchedule::default()
        },
        model: ModelConfig {
            classifier_hidden: vec![32, 32],
            generator_hidden: vec![32, 32],
            latent_dim: 4,
            activation: Activation::Relu,
            num_classes: 0,
        },
        budget: RobustnessBudget::default(),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        reference_config()
    }
}

impl Default for DatasetRoles {
    fn default() -> Self {
        reference_config().datasets
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        reference_config().sweep
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        reference_config().ablation
    }
}

fn is_csv(spec: &DatasetSpec) -> bool {
    spec.kind == DatasetKind::Csv
}

impl ExperimentConfig {
    /// Defaults, then the TOML `document`, then `key=value` overrides, then
    /// validation.
    pub fn load(document: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let config: ExperimentConfig = config::layered(&ExperimentConfig::default(), document, overrides)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load(Some(&text), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        config::to_toml(self)
    }

    pub fn validate(&self) -> Result<()> {
        let roles = &self.datasets;
        roles.normal.validate("datasets.normal")?;
        if !matches!(roles.normal.kind, DatasetKind::GaussianMixture | DatasetKind::Csv) {
            return Err(Error::config(
                "datasets.normal.kind",
                "normal data must be gaussian-mixture or csv",
            ));
        }
        if is_csv(&roles.normal) && roles.in_test_path.is_empty() {
            return Err(Error::config(
                "datasets.in_test_path",
                "csv normal data needs a held-out csv file",
            ));
        }
        roles.few_shot_pool.validate("datasets.few_shot_pool")?;
        if self.has_outlier_dataset() {
            roles.outlier.validate("datasets.outlier")?;
        }
        if roles.tests.is_empty() {
            return Err(Error::config("datasets.tests", "need at least one test set"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, t) in roles.tests.iter().enumerate() {
            t.validate(&format!("datasets.tests.{i}"))?;
            if t.name.is_empty() || !names.insert(t.name.as_str()) {
                return Err(Error::config(
                    format!("datasets.tests.{i}.name"),
                    "test sets need unique non-empty names",
                ));
            }
        }
        let needs_outliers = std::iter::once(&self.mode)
            .chain(&self.ablation.modes)
            .chain(&self.sweep.modes)
            .any(|m| m.uses_outlier_dataset());
        if needs_outliers && !self.has_outlier_dataset() {
            return Err(Error::config(
                "datasets.outlier.size",
                "modes i and iv need an outlier dataset",
            ));
        }
        if !is_csv(&roles.few_shot_pool) {
            let pool = roles.few_shot_pool.size;
            if self.few_shots > pool {
                return Err(Error::config(
                    "few_shots",
                    format!("exceeds the few-shot pool size {pool}"),
                ));
            }
            if let Some(&c) = self.sweep.counts.iter().find(|&&c| c > pool) {
                return Err(Error::config(
                    "sweep.counts",
                    format!("count {c} exceeds the few-shot pool size {pool}"),
                ));
            }
        }
        if self.sweep.counts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("sweep.counts", "counts must be strictly decreasing"));
        }
        if !(self.sweep.floor > 0.5 && self.sweep.floor < 1.0) {
            return Err(Error::config("sweep.floor", "must lie in (0.5, 1)"));
        }
        if self.sweep.modes.is_empty() {
            return Err(Error::config("sweep.modes", "need at least one mode"));
        }
        if self.ablation.modes.is_empty() {
            return Err(Error::config("ablation.modes", "need at least one mode"));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        self.model.validate()?;
        self.budget.validate()
    }

    pub fn has_outlier_dataset(&self) -> bool {
        is_csv(&self.datasets.outlier) || self.datasets.outlier.size > 0
    }

    /// Hex prefix of the SHA-256 of the canonical JSON form, ignoring the
    /// output directory.
    pub fn fingerprint(&self) -> String {
        let canonical = ExperimentConfig {
            output: String::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("configs serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// All samples an experiment needs, generated or loaded once.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub normals: LabeledBatch,
    pub in_test: LabeledBatch,
    pub few_shot_pool: OutlierPool,
    pub outlier: Option<OutlierPool>,
    pub tests: Vec<(String, Tensor)>,
}

fn labeled(spec: &DatasetSpec, key: &str) -> Result<LabeledBatch> {
    match spec.kind {
        DatasetKind::GaussianMixture => gen_gaussian_mixture(spec),
        DatasetKind::Csv => match load_csv(Path::new(&spec.path))? {
            CsvData::Labeled(b) => Ok(b),
            CsvData::Unlabeled(_) => Err(Error::config(key, "needs a `label` column")),
        },
        _ => Err(Error::config(key, "expected gaussian-mixture or csv")),
    }
}

fn unlabeled(spec: &DatasetSpec, normal: &DatasetSpec, fallback: &LabeledBatch) -> Result<OutlierPool> {
    match spec.kind {
        DatasetKind::Ring => gen_ring(spec),
        DatasetKind::UniformNoise => gen_uniform_noise(spec),
        DatasetKind::GaussianMixture => {
            let b = gen_gaussian_mixture(spec)?;
            OutlierPool::from_tensor(b.inputs(), PoolSource::OutlierDataset)
        }
        DatasetKind::LowFrequencyNoise => {
            let base = if normal.kind == DatasetKind::GaussianMixture {
                gen_gaussian_mixture(&DatasetSpec {
                    seed: spec.seed,
                    size: spec.size,
                    ..normal.clone()
                })?
            } else {
                fallback.clone()
            };
            gen_low_frequency_noise(spec, &base)
        }
        DatasetKind::Csv => match load_csv(Path::new(&spec.path))? {
            CsvData::Labeled(b) => OutlierPool::from_tensor(b.inputs(), PoolSource::OutlierDataset),
            CsvData::Unlabeled(p) => Ok(p),
        },
    }
}

fn check_dim(key: &str, actual: usize, expected: usize) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::config(key, format!("dimension {actual} differs from the normal data ({expected})")))
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let roles = &config.datasets;
    let normals = labeled(&roles.normal, "datasets.normal")?;
    let dim = normals.dim();
    let in_test = if is_csv(&roles.normal) {
        labeled(
            &DatasetSpec {
                kind: DatasetKind::Csv,
                path: roles.in_test_path.clone(),
                ..DatasetSpec::default()
            },
            "datasets.in_test_path",
        )?
    } else {
        gen_gaussian_mixture(&DatasetSpec {
            seed: roles.in_test_seed,
            size: if roles.in_test_size == 0 {
                roles.normal.size
            } else {
                roles.in_test_size
            },
            ..roles.normal.clone()
        })?
    };
    check_dim("datasets.in_test_path", in_test.dim(), dim)?;
    let few_shot_pool = unlabeled(&roles.few_shot_pool, &roles.normal, &in_test)?.with_source(PoolSource::FewShotOe);
    if !few_shot_pool.is_empty() {
        check_dim("datasets.few_shot_pool", few_shot_pool.dim(), dim)?;
    }
    let outlier = if config.has_outlier_dataset() {
        let pool = unlabeled(&roles.outlier, &roles.normal, &in_test)?;
        check_dim("datasets.outlier", pool.dim(), dim)?;
        Some(pool)
    } else {
        None
    };
    let mut tests = Vec::with_capacity(roles.tests.len());
    for (i, spec) in roles.tests.iter().enumerate() {
        let pool = unlabeled(spec, &roles.normal, &in_test)?;
        check_dim(&format!("datasets.tests.{i}"), pool.dim(), dim)?;
        let t = pool
            .to_tensor()
            .ok_or_else(|| Error::config(format!("datasets.tests.{i}"), "test set is empty"))?;
        tests.push((spec.name.clone(), t));
    }
    Ok(ExperimentData {
        normals,
        in_test,
        few_shot_pool,
        outlier,
        tests,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSetMetrics {
    pub test_set: String,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMeta {
    pub size: usize,
    pub source: PoolSource,
}

/// Outcome of one pipeline run and its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub mode: AblationMode,
    pub few_shots: usize,
    pub seed: u64,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub metrics: Vec<TestSetMetrics>,
    pub traces: Vec<PhaseTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_pool: Option<BoundaryMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunResult {
    pub fn metric(&self, test_set: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.test_set == test_set).map(|m| &m.metrics)
    }
}

/// What to run: everything a single pipeline invocation depends on besides
/// the shared config and data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSpec {
    pub run_id: String,
    pub mode: AblationMode,
    pub few_shots: usize,
    pub seed: u64,
    pub class: Option<usize>,
}

impl RunSpec {
    pub fn new(mode: AblationMode, few_shots: usize, seed: u64) -> Self {
        RunSpec {
            run_id: format!("{mode}-n{few_shots}-s{seed}"),
            mode,
            few_shots,
            seed,
            class: None,
        }
    }
}

fn pipeline_config(config: &ExperimentConfig, spec: &RunSpec) -> PipelineConfig {
    PipelineConfig {
        mode: spec.mode,
        weights: config.weights.clone(),
        schedule: TrainSchedule {
            seed: spec.seed,
            ..config.schedule.clone()
        },
        model: config.model.clone(),
    }
}

/// Draws the run's few-shots and trains the pipeline.
pub fn train_run(config: &ExperimentConfig, data: &ExperimentData, spec: &RunSpec) -> Result<PipelineOutput> {
    let few_shots = if spec.mode.uses_few_shots() {
        sample_few_shots(
            &data.few_shot_pool,
            spec.few_shots,
            rng::derive_seed(spec.seed, TAG_FEW_SHOTS, 0),
        )?
        .with_source(PoolSource::FewShotOe)
    } else {
        OutlierPool::empty(data.normals.dim(), PoolSource::FewShotOe)
    };
    let pipeline_data = PipelineData {
        normals: data.normals.clone(),
        few_shots,
        outlier_dataset: data.outlier.clone(),
    };
    run_frob_pipeline(&pipeline_config(config, spec), &pipeline_data)
}

/// Metrics of `classifier` on every test set against the held-out normals.
pub fn evaluate_tests(
    classifier: &MlpClassifier,
    in_set: &Tensor,
    tests: &[(String, Tensor)],
    budget: &RobustnessBudget,
    fingerprint: &str,
) -> Result<Vec<TestSetMetrics>> {
    tests
        .iter()
        .map(|(name, out)| {
            let mut report = evaluate_ood(classifier, in_set, out, budget)?.report;
            report.fingerprint = fingerprint.to_string();
            Ok(TestSetMetrics {
                test_set: name.clone(),
                metrics: report,
            })
        })
        .collect()
}

fn budget_for(config: &ExperimentConfig, seed: u64) -> RobustnessBudget {
    RobustnessBudget {
        seed,
        ..config.budget.clone()
    }
}

fn finish(spec: &RunSpec, fingerprint: String, outcome: Result<(Vec<TestSetMetrics>, PipelineOutput)>) -> RunResult {
    let mut result = RunResult {
        run_id: spec.run_id.clone(),
        mode: spec.mode,
        few_shots: spec.few_shots,
        seed: spec.seed,
        fingerprint,
        class: spec.class,
        metrics: Vec::new(),
        traces: Vec::new(),
        boundary_pool: None,
        error: None,
    };
    match outcome {
        Ok((metrics, output)) => {
            result.metrics = metrics;
            result.traces = output.traces;
            result.boundary_pool = output.boundary_pool.map(|p| BoundaryMeta {
                size: p.len(),
                source: p.source(),
            });
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// One pipeline run evaluated on every test set. Failures are recorded in the
/// result rather than returned.
pub fn execute_run(config: &ExperimentConfig, data: &ExperimentData, spec: &RunSpec) -> RunResult {
    execute_run_with_model(config, data, spec).0
}

/// As [`execute_run`], also handing back the trained pipeline.
pub fn execute_run_with_model(
    config: &ExperimentConfig,
    data: &ExperimentData,
    spec: &RunSpec,
) -> (RunResult, Option<PipelineOutput>) {
    let fingerprint = config.fingerprint();
    let outcome = train_run(config, data, spec).and_then(|output| {
        let metrics = evaluate_tests(
            &output.classifier,
            data.in_test.inputs(),
            &data.tests,
            &budget_for(config, spec.seed),
            &fingerprint,
        )?;
        Ok((metrics, output))
    });
    let kept = outcome.as_ref().ok().map(|(_, o)| o.clone());
    (finish(spec, fingerprint, outcome), kept)
}

pub fn plan_ablation(config: &ExperimentConfig) -> Vec<RunSpec> {
    config
        .ablation
        .modes
        .iter()
        .map(|&m| RunSpec::new(m, config.few_shots, config.seed))
        .collect()
}

/// Every requested mode with the same seed and few-shot count.
pub fn run_ablation(config: &ExperimentConfig, data: &ExperimentData) -> Vec<RunResult> {
    plan_ablation(config)
        .iter()
        .map(|spec| execute_run(config, data, spec))
        .collect()
}

/// One run per count, seeded with the master seed plus the count's index.
pub fn plan_sweep(config: &ExperimentConfig, mode: AblationMode, counts: &[usize]) -> Vec<RunSpec> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| RunSpec::new(mode, c, config.seed + i as u64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: AblationMode,
    pub counts: Vec<usize>,
    pub entries: Vec<RunResult>,
    pub break_points: BTreeMap<String, Option<usize>>,
    pub floor: f64,
    pub fingerprint: String,
}

impl SweepResult {
    pub fn assemble(config: &ExperimentConfig, mode: AblationMode, entries: Vec<RunResult>) -> Self {
        let mut sweep = SweepResult {
            mode,
            counts: entries.iter().map(|e| e.few_shots).collect(),
            entries,
            break_points: BTreeMap::new(),
            floor: config.sweep.floor,
            fingerprint: config.fingerprint(),
        };
        for (name, _) in config.datasets.tests.iter().map(|t| (t.name.clone(), ())) {
            let curve = sweep.curve(&name, |m| m.auroc);
            sweep.break_points.insert(name, detect_break_point(&curve, config.sweep.floor));
        }
        sweep
    }

    /// `(count, metric)` pairs of the successful entries, in sweep order.
    pub fn curve(&self, test_set: &str, metric: impl Fn(&MetricReport) -> f64) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.metric(test_set).map(|m| (e.few_shots, metric(m))))
            .collect()
    }

    /// Largest minus smallest AUROC across counts.
    pub fn spread(&self, test_set: &str) -> Option<f64> {
        let values: Vec<f64> = self.curve(test_set, |m| m.auroc).into_iter().map(|(_, v)| v).collect();
        let max = values.iter().copied().reduce(f64::max)?;
        let min = values.iter().copied().reduce(f64::min)?;
        Some(max - min)
    }
}

pub fn run_fewshot_sweep(
    config: &ExperimentConfig,
    data: &ExperimentData,
    mode: AblationMode,
    counts: &[usize],
) -> Result<SweepResult> {
    if counts.is_empty() || counts.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument("sweep counts must be non-empty and strictly decreasing".into()));
    }
    if let Some(&c) = counts.iter().find(|&&c| c > data.few_shot_pool.len()) {
        return Err(Error::InvalidArgument(format!(
            "count {c} exceeds the few-shot pool size {}",
            data.few_shot_pool.len()
        )));
    }
    let entries = plan_sweep(config, mode, counts)
        .iter()
        .map(|spec| execute_run(config, data, spec))
        .collect();
    Ok(SweepResult::assemble(config, mode, entries))
}

/// The largest count whose AUROC is below `floor`, provided the curve reaches
/// chance level ([`CHANCE_AUROC`]) at that count or a smaller one.
pub fn detect_break_point(curve: &[(usize, f64)], floor: f64) -> Option<usize> {
    let candidate = curve
        .iter()
        .filter(|(_, auroc)| *auroc < floor)
        .map(|&(count, _)| count)
        .max()?;
    curve
        .iter()
        .any(|&(count, auroc)| count <= candidate && auroc <= CHANCE_AUROC)
        .then_some(candidate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccResult {
    pub per_class: Vec<RunResult>,
    pub mean_auroc: f64,
    pub fingerprint: String,
}

pub const OCC_TEST_SET: &str = "other-classes";

pub fn plan_occ(config: &ExperimentConfig, data: &ExperimentData) -> Vec<RunSpec> {
    (0..data.normals.num_classes())
        .map(|c| RunSpec {
            run_id: format!("occ-c{c}"),
            mode: config.mode,
            few_shots: config.few_shots,
            seed: config.seed + c as u64,
            class: Some(c),
        })
        .collect()
}

fn split_class(batch: &LabeledBatch, class: usize) -> Result<(LabeledBatch, Option<Tensor>)> {
    let own: Vec<usize> = (0..batch.len()).filter(|&r| batch.labels()[r] == class).collect();
    let rest: Vec<usize> = (0..batch.len()).filter(|&r| batch.labels()[r] != class).collect();
    if own.is_empty() {
        return Err(Error::InvalidArgument(format!("class {class} has no samples")));
    }
    let inputs = batch.inputs().select_rows(&own)?;
    let others = if rest.is_empty() {
        None
    } else {
        Some(batch.inputs().select_rows(&rest)?)
    };
    Ok((LabeledBatch::new(inputs, vec![0; own.len()])?, others))
}

/// One-class run for `spec.class`: a two-output head trained on that class
/// alone (output 1 never labeled) and tested against the other classes.
pub fn execute_occ_run(config: &ExperimentConfig, data: &ExperimentData, spec: &RunSpec) -> RunResult {
    let fingerprint = config.fingerprint();
    let outcome = (|| {
        let class = spec
            .class
            .ok_or_else(|| Error::InvalidArgument("one-class runs need a class".into()))?;
        let (normals, _) = split_class(&data.normals, class)?;
        let (in_test, others) = split_class(&data.in_test, class)?;
        let others = others.ok_or_else(|| Error::InvalidArgument("no other classes to test against".into()))?;
        let class_data = ExperimentData {
            normals,
            in_test,
            tests: vec![(OCC_TEST_SET.to_string(), others)],
            ..data.clone()
        };
        let class_config = ExperimentConfig {
            model: ModelConfig {
                num_classes: 2,
                ..config.model.clone()
            },
            ..config.clone()
        };
        let output = train_run(&class_config, &class_data, spec)?;
        let metrics = evaluate_tests(
            &output.classifier,
            class_data.in_test.inputs(),
            &class_data.tests,
            &budget_for(config, spec.seed),
            &fingerprint,
        )?;
        Ok((metrics, output))
    })();
    finish(spec, fingerprint, outcome)
}

impl OccResult {
    pub fn assemble(config: &ExperimentConfig, per_class: Vec<RunResult>) -> Self {
        let aurocs: Vec<f64> = per_class
            .iter()
            .filter_map(|r| r.metric(OCC_TEST_SET).map(|m| m.auroc))
            .collect();
        let mean_auroc = if aurocs.is_empty() {
            f64::NAN
        } else {
            aurocs.iter().sum::<f64>() / aurocs.len() as f64
        };
        OccResult {
            per_class,
            mean_auroc,
            fingerprint: config.fingerprint(),
        }
    }
}

pub fn run_occ(config: &ExperimentConfig, data: &ExperimentData) -> Result<OccResult> {
    if data.normals.num_classes() < 2 {
        return Err(Error::config("datasets.normal", "one-class evaluation needs at least two classes"));
    }
    let runs = plan_occ(config, data)
        .iter()
        .map(|spec| execute_occ_run(config, data, spec))
        .collect();
    Ok(OccResult::assemble(config, runs))
}

/// Results of one command, as written to `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    Train { run: RunResult },
    Eval { run: RunResult },
    Ablation { runs: Vec<RunResult> },
    Sweep { sweeps: Vec<SweepResult> },
    Occ(OccResult),
}

impl Outcome {
    pub fn runs(&self) -> Vec<&RunResult> {
        match self {
            Outcome::Train { run } | Outcome::Eval { run } => vec![run],
            Outcome::Ablation { runs } => runs.iter().collect(),
            Outcome::Sweep { sweeps } => sweeps.iter().flat_map(|s| s.entries.iter()).collect(),
            Outcome::Occ(o) => o.per_class.iter().collect(),
        }
    }
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "run_id", "mode", "few_shots", "test_set", "auroc", "aauroc", "gauroc", "epsilon", "seed",
];

/// Summary rows of one run, one per test set.
pub fn summary_rows(run: &RunResult) -> Vec<[String; 9]> {
    run.metrics
        .iter()
        .map(|m| {
            [
                run.run_id.clone(),
                run.mode.to_string(),
                run.few_shots.to_string(),
                m.test_set.clone(),
                m.metrics.auroc.to_string(),
                m.metrics.aauroc.to_string(),
                m.metrics.gauroc.to_string(),
                m.metrics.epsilon.to_string(),
                run.seed.to_string(),
            ]
        })
        .collect()
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Checks the metric ordering required of every report with a positive budget.
pub fn check_ordering(run: &RunResult) -> Result<()> {
    for m in &run.metrics {
        if m.metrics.epsilon > 0.0 && !m.metrics.is_ordered() {
            return Err(Error::InvalidArgument(format!(
                "run {} on {}: gauroc {} ≤ aauroc {} ≤ auroc {} violated",
                run.run_id, m.test_set, m.metrics.gauroc, m.metrics.aauroc, m.metrics.auroc
            )));
        }
    }
    Ok(())
}

/// Writes `result.json`, `runs/<run_id>.json`, `summary.csv` and, for sweeps,
/// `plots/<mode>_<test_set>_<metric>.csv`. Every file depends only on the
/// outcome. Returns the written paths.
pub fn emit_report(outcome: &Outcome, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for run in outcome.runs() {
        check_ordering(run)?;
    }
    let path = out_dir.join("result.json");
    write(&path, &to_json(outcome)?)?;
    written.push(path);
    for run in outcome.runs() {
        let path = out_dir.join("runs").join(format!("{}.json", file_stem(&run.run_id)));
        write(&path, &to_json(run)?)?;
        written.push(path);
    }
    let mut csv = SUMMARY_COLUMNS.join(",");
    csv.push('\n');
    for run in outcome.runs() {
        for row in summary_rows(run) {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
    }
    let path = out_dir.join("summary.csv");
    write(&path, &csv)?;
    written.push(path);
    if let Outcome::Sweep { sweeps } = outcome {
        for sweep in sweeps {
            let names: Vec<String> = sweep
                .entries
                .iter()
                .flat_map(|e| e.metrics.iter().map(|m| m.test_set.clone()))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for name in names {
                let metrics: [(&str, fn(&MetricReport) -> f64); 3] =
                    [("auroc", |m| m.auroc), ("aauroc", |m| m.aauroc), ("gauroc", |m| m.gauroc)];
                for (metric, get) in metrics {
                    let mut body = format!("few_shots,{metric}\n");
                    for (count, value) in sweep.curve(&name, get) {
                        let _ = writeln!(body, "{count},{value}");
                    }
                    let path = out_dir
                        .join("plots")
                        .join(format!("{}_{}_{metric}.csv", sweep.mode, file_stem(&name)));
                    write(&path, &body)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

/// Wall-clock details kept apart from the deterministic result files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_unix: u64,
    pub finished_unix: u64,
    pub jobs: usize,
    pub version: String,
    pub seconds: BTreeMap<String, f64>,
}

pub fn write_meta(meta: &RunMeta, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("meta.json");
    write(&path, &to_json(meta)?)?;
    Ok(path)
}
