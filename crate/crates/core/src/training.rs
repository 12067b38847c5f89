//! Adam, mini-batch training of the classifier and the boundary generator, and
//! the three-phase pipeline.

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor};
use crate::losses::{
    classifier_loss, generator_loss, GeneratorBatch, LabeledBatch, LossWeights, OutlierPool,
    PoolSource,
};
use crate::models::{Activation, BoundaryGenerator, LatentBatch, MlpClassifier};
use crate::rng;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_NEGATIVES: u64 = 0x4e45_4741;
const TAG_LATENT: u64 = 0x4c41_5445;
const TAG_REFERENCE: u64 = 0x5245_4645;
const TAG_INIT: u64 = 0x494e_4954;
const TAG_POOL: u64 = 0x504f_4f4c;

/// Adam moments and hyper-parameters for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient entry is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::ShapeMismatch {
                primitive: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {i}"),
                batch: state.t as usize,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Standard-normal latent batch (ziggurat sampling on a seeded ChaCha8 stream).
pub fn sample_latent(seed: u64, n: usize, latent_dim: usize) -> Result<LatentBatch> {
    LatentBatch::sample(seed, n, latent_dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    pub phase_c_epochs: usize,
    /// Normal samples per classifier step (N).
    pub batch_normal: usize,
    /// Negative samples per classifier step (M).
    pub batch_negative: usize,
    /// Latent samples per generator step.
    pub latent_batch: usize,
    /// Normal reference rows for the proximity term (Q); 0 means `batch_normal`.
    pub proximity_reference: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_c: f64,
    /// Generated boundary samples kept for the last phase; 0 means the few-shot
    /// count, or `batch_negative` when there are no few-shots.
    pub boundary_pool_size: usize,
    /// Generator/classifier rounds after the initial classifier phase.
    pub alternations: usize,
    /// Set per run from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase_a_epochs: 30,
            phase_b_epochs: 30,
            phase_c_epochs: 30,
            batch_normal: 64,
            batch_negative: 64,
            latent_batch: 64,
            proximity_reference: 0,
            lr_a: 1e-3,
            lr_b: 1e-3,
            lr_c: 1e-3,
            boundary_pool_size: 0,
            alternations: 1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("schedule.{k}"), m));
        if self.batch_normal == 0 {
            return err("batch_normal", "must be ≥ 1");
        }
        if self.batch_negative == 0 {
            return err("batch_negative", "must be ≥ 1");
        }
        if self.phase_b_epochs > 0 && self.latent_batch < 2 {
            return err("latent_batch", "must be ≥ 2 when the generator is trained");
        }
        for (k, lr) in [("lr_a", self.lr_a), ("lr_b", self.lr_b), ("lr_c", self.lr_c)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(k, "must be a positive finite number");
            }
        }
        Ok(())
    }

    pub fn reference_rows(&self) -> usize {
        if self.proximity_reference == 0 {
            self.batch_normal
        } else {
            self.proximity_reference
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::A => "classifier",
            Phase::B => "generator",
            Phase::C => "boundary retraining",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Per-epoch mean loss of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub phase: Phase,
    pub round: usize,
    pub losses: Vec<f64>,
}

fn finite_or(value: f64, what: &str, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            batch,
        })
    }
}

/// `total` negatives drawn with replacement, split evenly over the non-empty
/// sources.
fn draw_negatives(sources: &[&OutlierPool], total: usize, dim: usize, rng: &mut rng::Rng) -> OutlierPool {
    let live: Vec<&&OutlierPool> = sources.iter().filter(|p| !p.is_empty()).collect();
    if live.is_empty() {
        return OutlierPool::empty(dim, PoolSource::FewShotOe);
    }
    let mut data = Vec::with_capacity(total * dim);
    for (s, pool) in live.iter().enumerate() {
        let share = total / live.len() + usize::from(s < total % live.len());
        for _ in 0..share {
            data.extend_from_slice(pool.row(rng.random_range(0..pool.len())));
        }
    }
    OutlierPool::new(dim, data, PoolSource::FewShotOe).expect("rows share the pool dimension")
}

fn gradients(g: &Graph, params: &[crate::grad::Var]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|&p| {
            g.grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(p).len()])
        })
        .collect()
}

/// Mini-batch Adam on the classifier loss. Negative batches mix all non-empty
/// `negatives` pools equally. Returns the per-epoch mean loss.
pub fn train_classifier(
    model: &mut MlpClassifier,
    normals: &LabeledBatch,
    negatives: &[&OutlierPool],
    w: &LossWeights,
    schedule: &TrainSchedule,
    phase: Phase,
) -> Result<Vec<f64>> {
    let (epochs, lr) = match phase {
        Phase::A => (schedule.phase_a_epochs, schedule.lr_a),
        Phase::C => (schedule.phase_c_epochs, schedule.lr_c),
        Phase::B => {
            return Err(Error::InvalidArgument(
                "the generator phase does not train the classifier".into(),
            ))
        }
    };
    if normals.is_empty() {
        return Err(Error::InvalidArgument("no normal samples".into()));
    }
    normals.validate_labels(model.num_classes())?;
    for pool in negatives {
        if !pool.is_empty() && pool.dim() != model.input_dim() {
            return Err(Error::Dimension {
                expected: model.input_dim(),
                actual: pool.dim(),
            });
        }
    }
    let dim = model.input_dim();
    let mut state = OptimizerState::new(model.net().params(), lr);
    let mut trace = Vec::with_capacity(epochs);
    let mut batch_index = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..normals.len()).collect();
        order.shuffle(&mut rng::derived(schedule.seed, TAG_SHUFFLE ^ phase.tag() << 32, epoch as u64));
        let mut neg_rng = rng::derived(schedule.seed, TAG_NEGATIVES ^ phase.tag() << 32, epoch as u64);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(schedule.batch_normal) {
            let batch = normals.select(chunk)?;
            let neg = if w.lambda == 0.0 {
                OutlierPool::empty(dim, PoolSource::FewShotOe)
            } else {
                draw_negatives(negatives, schedule.batch_negative, dim, &mut neg_rng)
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let loss = classifier_loss(&mut g, model, &bound, &batch, &neg, w)?;
            let value = g.value(loss).item();
            finite_or(value, "classifier loss", batch_index)?;
            g.backward(loss)?;
            let grads = gradients(&g, bound.params());
            adam_step(model.net_mut().params_mut(), &grads, &mut state).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    batch: batch_index,
                },
                other => other,
            })?;
            total += value;
            steps += 1;
            batch_index += 1;
        }
        trace.push(total / steps as f64);
    }
    Ok(trace)
}

/// Mini-batch Adam on the generator loss against a frozen classifier. Each
/// epoch takes `ceil(normals / batch_normal)` steps on fresh latents.
pub fn train_generator(
    generator: &mut BoundaryGenerator,
    classifier: &MlpClassifier,
    normals: &LabeledBatch,
    w: &LossWeights,
    schedule: &TrainSchedule,
) -> Result<Vec<f64>> {
    if schedule.latent_batch < 2 {
        return Err(Error::InvalidArgument("generator training needs at least two latents per batch".into()));
    }
    if normals.is_empty() {
        return Err(Error::InvalidArgument("no normal samples".into()));
    }
    if generator.data_dim() != classifier.input_dim() || normals.dim() != classifier.input_dim() {
        return Err(Error::Dimension {
            expected: classifier.input_dim(),
            actual: generator.data_dim(),
        });
    }
    let q = schedule.reference_rows().min(normals.len());
    let steps_per_epoch = normals.len().div_ceil(schedule.batch_normal);
    let mut state = OptimizerState::new(generator.net().params(), schedule.lr_b);
    let mut trace = Vec::with_capacity(schedule.phase_b_epochs);
    let mut batch_index = 0u64;
    for _ in 0..schedule.phase_b_epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let latents = sample_latent(
                rng::derive_seed(schedule.seed, TAG_LATENT, batch_index),
                schedule.latent_batch,
                generator.latent_dim(),
            )?;
            let mut ref_rng = rng::derived(schedule.seed, TAG_REFERENCE, batch_index);
            let rows = rand::seq::index::sample(&mut ref_rng, normals.len(), q).into_vec();
            let reference = normals.inputs().select_rows(&rows)?;
            let pairing: Vec<usize> = (0..latents.len()).map(|_| ref_rng.random_range(0..q)).collect();
            let batch = GeneratorBatch {
                latents: &latents,
                reference: &reference,
                pairing: &pairing,
            };
            let mut g = Graph::new();
            let bound = generator.bind(&mut g, true);
            let loss = generator_loss(&mut g, generator, &bound, classifier, &batch, w)?;
            let value = g.value(loss).item();
            finite_or(value, "generator loss", batch_index as usize)?;
            g.backward(loss)?;
            let grads = gradients(&g, bound.params());
            adam_step(generator.net_mut().params_mut(), &grads, &mut state).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    batch: batch_index as usize,
                },
                other => other,
            })?;
            total += value;
            batch_index += 1;
        }
        trace.push(total / steps_per_epoch as f64);
    }
    Ok(trace)
}

/// Which negative sources reach the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Outlier dataset only.
    I,
    /// Few-shot outliers only.
    Ii,
    /// Few-shot outliers and the generated boundary.
    Iii,
    /// Few-shot outliers, the generated boundary and the outlier dataset.
    Iv,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::I, AblationMode::Ii, AblationMode::Iii, AblationMode::Iv];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::I => "i",
            AblationMode::Ii => "ii",
            AblationMode::Iii => "iii",
            AblationMode::Iv => "iv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AblationMode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_few_shots(self) -> bool {
        self != AblationMode::I
    }

    pub fn uses_boundary(self) -> bool {
        matches!(self, AblationMode::Iii | AblationMode::Iv)
    }

    pub fn uses_outlier_dataset(self) -> bool {
        matches!(self, AblationMode::I | AblationMode::Iv)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub classifier_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    /// Number of classifier outputs; 0 means one per normal label.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classifier_hidden: vec![32, 32],
            generator_hidden: vec![32, 32],
            latent_dim: 4,
            activation: Activation::Relu,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be ≥ 1"));
        }
        if self.classifier_hidden.contains(&0) {
            return Err(Error::config("model.classifier_hidden", "layer widths must be ≥ 1"));
        }
        if self.generator_hidden.contains(&0) {
            return Err(Error::config("model.generator_hidden", "layer widths must be ≥ 1"));
        }
        if self.num_classes == 1 {
            return Err(Error::config("model.num_classes", "need at least two outputs"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: AblationMode,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineData {
    pub normals: LabeledBatch,
    pub few_shots: OutlierPool,
    pub outlier_dataset: Option<OutlierPool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub classifier: MlpClassifier,
    pub generator: Option<BoundaryGenerator>,
    pub boundary_pool: Option<OutlierPool>,
    pub traces: Vec<PhaseTrace>,
}

fn layers(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Phase A trains the classifier; for boundary modes each round then trains
/// the generator against the frozen classifier (phase B), samples a tagged
/// boundary pool from fresh latents and retrains the classifier with it
/// (phase C).
pub fn run_frob_pipeline(config: &PipelineConfig, data: &PipelineData) -> Result<PipelineOutput> {
    config.weights.validate()?;
    config.schedule.validate()?;
    config.model.validate()?;
    let mode = config.mode;
    let dim = data.normals.dim();
    let empty = OutlierPool::empty(dim, PoolSource::FewShotOe);
    let few_shots = if mode.uses_few_shots() { &data.few_shots } else { &empty };
    let outliers = if mode.uses_outlier_dataset() {
        match &data.outlier_dataset {
            Some(p) => p,
            None => {
                return Err(Error::config(
                    "datasets.outlier",
                    format!("mode {mode} needs an outlier dataset"),
                ))
            }
        }
    } else {
        &empty
    };
    let classes = match config.model.num_classes {
        0 => data.normals.num_classes().max(2),
        k => k,
    };
    let seed = config.schedule.seed;
    let mut classifier = MlpClassifier::init(
        rng::derive_seed(seed, TAG_INIT, 0),
        &layers(dim, &config.model.classifier_hidden, classes),
        config.model.activation,
    )?;
    let mut traces = Vec::new();
    let losses = train_classifier(
        &mut classifier,
        &data.normals,
        &[few_shots, outliers],
        &config.weights,
        &config.schedule,
        Phase::A,
    )
    .map_err(|e| e.in_phase(Phase::A.label()))?;
    traces.push(PhaseTrace {
        phase: Phase::A,
        round: 0,
        losses,
    });
    if !mode.uses_boundary() {
        return Ok(PipelineOutput {
            classifier,
            generator: None,
            boundary_pool: None,
            traces,
        });
    }

    let mut generator = BoundaryGenerator::init(
        rng::derive_seed(seed, TAG_INIT, 1),
        &layers(config.model.latent_dim, &config.model.generator_hidden, dim),
        config.model.activation,
    )?;
    let pool_size = match config.schedule.boundary_pool_size {
        0 if few_shots.is_empty() => config.schedule.batch_negative,
        0 => few_shots.len(),
        n => n,
    };
    let mut boundary = OutlierPool::empty(dim, PoolSource::GeneratedBoundary);
    for round in 0..config.schedule.alternations {
        let round_schedule = TrainSchedule {
            seed: rng::derive_seed(seed, Phase::B.tag(), round as u64),
            ..config.schedule.clone()
        };
        let losses = train_generator(&mut generator, &classifier, &data.normals, &config.weights, &round_schedule)
            .map_err(|e| e.in_phase(Phase::B.label()))?;
        traces.push(PhaseTrace {
            phase: Phase::B,
            round,
            losses,
        });

        let latents = sample_latent(rng::derive_seed(seed, TAG_POOL, round as u64), pool_size, config.model.latent_dim)
            .map_err(|e| e.in_phase(Phase::C.label()))?;
        let generated = generator.generate(&latents).map_err(|e| e.in_phase(Phase::C.label()))?;
        boundary = OutlierPool::from_tensor(&generated, PoolSource::GeneratedBoundary)?;
        if !boundary.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "generated boundary sample".into(),
                batch: 0,
            }
            .in_phase(Phase::C.label()));
        }

        let round_schedule = TrainSchedule {
            seed: rng::derive_seed(seed, Phase::C.tag(), round as u64),
            ..config.schedule.clone()
        };
        let losses = train_classifier(
            &mut classifier,
            &data.normals,
            &[few_shots, &boundary, outliers],
            &config.weights,
            &round_schedule,
            Phase::C,
        )
        .map_err(|e| e.in_phase(Phase::C.label()))?;
        traces.push(PhaseTrace {
            phase: Phase::C,
            round,
            losses,
        });
    }
    Ok(PipelineOutput {
        classifier,
        generator: Some(generator),
        boundary_pool: Some(boundary),
        traces,
    })
}
