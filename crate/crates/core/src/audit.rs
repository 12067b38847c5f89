//! Finite-difference audit of every loss term on random tiny instances.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::grad::{grad_check_many, Graph, GradCheckReport, Tensor, Var};
use crate::losses::{
    classifier_loss, confidence_dominance_term, cross_entropy_term, dispersion_term,
    generator_loss, negative_training_term, proximity_term, GeneratorBatch, LabeledBatch,
    LossWeights, OutlierPool, PoolSource,
};
use crate::models::{Activation, Bound, BoundaryGenerator, LatentBatch, MlpClassifier};
use crate::rng;

pub const COMPONENTS: [&str; 7] = [
    "cross_entropy_term",
    "negative_training_term",
    "classifier_loss",
    "dispersion_term",
    "confidence_dominance_term",
    "proximity_term",
    "generator_loss",
];

/// Worst outcome of one loss component over all instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentAudit {
    pub component: &'static str,
    pub instances: usize,
    pub passed: bool,
    pub max_abs_discrepancy: f64,
    pub max_rel_discrepancy: f64,
    pub failures: Vec<String>,
}

struct Instance {
    classifier: MlpClassifier,
    generator: BoundaryGenerator,
    normals: LabeledBatch,
    negatives: OutlierPool,
    latents: LatentBatch,
    reference: Tensor,
    pairing: Vec<usize>,
    weights: LossWeights,
}

fn matrix(rng: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

const MIN_SEPARATION: f64 = 1e-2;

fn min_row_distance(x: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = x.data().chunks(x.cols()).collect();
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Redraws every bias uniformly in `[-0.5, 0.5)`.
fn randomize_biases(rng: &mut rng::Rng, params: &mut [Tensor]) {
    for bias in params.iter_mut().skip(1).step_by(2) {
        bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
}

/// Random instance with `d ≤ 8`, `K ≤ 4` and hidden widths `≤ 16`, redrawn
/// until no two generated rows coincide.
fn instance(seed: u64) -> Result<Instance> {
    let mut r = rng::seeded(seed);
    let d = r.random_range(1..=8);
    let k = r.random_range(2..=4);
    let latent = r.random_range(1..=4);
    let activation = if r.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let hidden: Vec<usize> = (0..r.random_range(1..=2)).map(|_| r.random_range(1..=16)).collect();
    let mut sizes = vec![d];
    sizes.extend(&hidden);
    sizes.push(k);
    let mut classifier = MlpClassifier::init(r.random(), &sizes, activation)?;
    randomize_biases(&mut r, classifier.net_mut().params_mut());
    let mut gen_sizes = vec![latent];
    gen_sizes.extend(&hidden);
    gen_sizes.push(d);
    let (generator, latents) = loop {
        let mut generator = BoundaryGenerator::init(r.random(), &gen_sizes, activation)?;
        randomize_biases(&mut r, generator.net_mut().params_mut());
        let latents = LatentBatch::sample(r.random(), r.random_range(2..=5), latent)?;
        let out = generator.net().evaluate(latents.values())?;
        if min_row_distance(&out) > MIN_SEPARATION {
            break (generator, latents);
        }
    };
    let n = r.random_range(2..=5);
    let m = r.random_range(1..=5);
    let q = r.random_range(1..=5);
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    let normals = LabeledBatch::new(matrix(&mut r, n, d), labels)?;
    let negatives = OutlierPool::from_tensor(&matrix(&mut r, m, d), PoolSource::FewShotOe)?;
    let reference = matrix(&mut r, q, d);
    let pairing = (0..latents.len()).map(|_| r.random_range(0..q)).collect();
    let weights = LossWeights {
        lambda: r.random_range(0.1..2.0),
        mu: r.random_range(0.1..2.0),
        nu: r.random_range(0.1..2.0),
        ..LossWeights::default()
    };
    Ok(Instance {
        classifier,
        generator,
        normals,
        negatives,
        latents,
        reference,
        pairing,
        weights,
    })
}

fn check_component(component: &str, inst: &Instance, h: f64, rel_tol: f64) -> GradCheckReport {
    let clf = &inst.classifier;
    let gen = &inst.generator;
    let classifier_logits = |g: &mut Graph, vars: &[Var], x: &Tensor| -> Result<Var> {
        let bound = Bound::from_vars(vars.to_vec());
        let x = g.constant(x.clone());
        clf.forward_logits(g, &bound, x)
    };
    let generated = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(vars.to_vec());
        let z = g.constant(inst.latents.values().clone());
        gen.generate_on(g, &bound, z)
    };
    let negatives = inst.negatives.to_tensor().expect("non-empty");
    match component {
        "cross_entropy_term" => grad_check_many(
            |g, vars| {
                let logits = classifier_logits(g, vars, inst.normals.inputs())?;
                cross_entropy_term(g, logits, inst.normals.labels())
            },
            clf.net().params(),
            h,
            rel_tol,
        ),
        "negative_training_term" => grad_check_many(
            |g, vars| {
                let logits = classifier_logits(g, vars, &negatives)?;
                negative_training_term(g, logits)
            },
            clf.net().params(),
            h,
            rel_tol,
        ),
        "classifier_loss" => grad_check_many(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                classifier_loss(g, clf, &bound, &inst.normals, &inst.negatives, &inst.weights)
            },
            clf.net().params(),
            h,
            rel_tol,
        ),
        "dispersion_term" => grad_check_many(
            |g, vars| {
                let out = generated(g, vars)?;
                dispersion_term(g, inst.latents.values(), out, inst.weights.delta)
            },
            gen.net().params(),
            h,
            rel_tol,
        ),
        "confidence_dominance_term" => grad_check_many(
            |g, vars| {
                let out = generated(g, vars)?;
                let frozen = clf.bind(g, false);
                let gen_logits = clf.forward_logits(g, &frozen, out)?;
                let paired = g.constant(inst.reference.select_rows(&inst.pairing)?);
                let ref_logits = clf.forward_logits(g, &frozen, paired)?;
                confidence_dominance_term(g, gen_logits, ref_logits)
            },
            gen.net().params(),
            h,
            rel_tol,
        ),
        "proximity_term" => grad_check_many(
            |g, vars| {
                let out = generated(g, vars)?;
                let reference = g.constant(inst.reference.clone());
                proximity_term(g, out, reference)
            },
            gen.net().params(),
            h,
            rel_tol,
        ),
        "generator_loss" => grad_check_many(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let batch = GeneratorBatch {
                    latents: &inst.latents,
                    reference: &inst.reference,
                    pairing: &inst.pairing,
                };
                generator_loss(g, gen, &bound, clf, &batch, &inst.weights)
            },
            gen.net().params(),
            h,
            rel_tol,
        ),
        other => GradCheckReport {
            passed: false,
            max_abs_discrepancy: f64::NAN,
            max_rel_discrepancy: f64::NAN,
            worst: None,
            checked: 0,
            error: Some(format!("unknown component {other}")),
        },
    }
}

/// Gradient-checks every loss component, with respect to the trained
/// network's parameters, on `instances` random instances.
pub fn gradient_audit(seed: u64, instances: usize, h: f64, rel_tol: f64) -> Result<Vec<ComponentAudit>> {
    let mut audits: Vec<ComponentAudit> = COMPONENTS
        .iter()
        .map(|&component| ComponentAudit {
            component,
            instances: 0,
            passed: true,
            max_abs_discrepancy: 0.0,
            max_rel_discrepancy: 0.0,
            failures: Vec::new(),
        })
        .collect();
    for i in 0..instances {
        let inst = instance(rng::derive_seed(seed, 0x4155_4449, i as u64))?;
        for audit in &mut audits {
            let report = check_component(audit.component, &inst, h, rel_tol);
            audit.instances += 1;
            audit.max_abs_discrepancy = audit.max_abs_discrepancy.max(report.max_abs_discrepancy);
            audit.max_rel_discrepancy = audit.max_rel_discrepancy.max(report.max_rel_discrepancy);
            if !report.passed {
                audit.passed = false;
                audit.failures.push(match report.error {
                    Some(e) => format!("instance {i}: {e}"),
                    None => format!(
                        "instance {i}: relative discrepancy {:.3e} at {:?}",
                        report.max_rel_discrepancy, report.worst
                    ),
                });
            }
        }
    }
    Ok(audits)
}
