//! Training objectives.
//!
//! The classifier minimizes cross-entropy on labeled normals plus a weighted
//! negative-training term that pushes the max-softmax confidence of outlier
//! samples down. The generator minimizes a dispersion ratio (latent distance
//! over data distance, which penalizes mode collapse), a confidence-dominance
//! term against paired normals and a proximity term to the nearest normal.
//!
//! Every term is built on a [`Graph`] so it can be differentiated, and each is
//! exposed on its own for testing and ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::models::{Bound, BoundaryGenerator, LatentBatch, MlpClassifier};

/// Floor applied to `1 - p*` before taking its log.
pub const NEGATIVE_CONFIDENCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the negative-training term.
    pub lambda: f64,
    /// Weight of the confidence-dominance term.
    pub mu: f64,
    /// Weight of the proximity term.
    pub nu: f64,
    /// Guard added to data-space distances in the dispersion ratio.
    pub delta: f64,
    /// Weight of the dispersion term; 1 in the standard objective.
    pub dispersion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mu: 1.0,
            nu: 1.0,
            delta: 1e-6,
            dispersion: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("nu", self.nu),
            ("dispersion", self.dispersion),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("weights.{name}"),
                    format!("must be finite and ≥ 0, got {v}"),
                ));
            }
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return Err(Error::config(
                "weights.delta",
                format!("must be finite and > 0, got {}", self.delta),
            ));
        }
        Ok(())
    }
}

/// Normal samples with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::InvalidArgument("inputs must be a matrix".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }
}

/// Provenance of an outlier pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolSource {
    FewShotOe,
    GeneratedBoundary,
    OutlierDataset,
}

/// Unlabeled samples used as negatives or as test-time OoD data.
/// May be empty, which disables the negative-training term.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierPool {
    dim: usize,
    data: Vec<f64>,
    source: PoolSource,
}

impl OutlierPool {
    pub fn new(dim: usize, data: Vec<f64>, source: PoolSource) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool of {} values does not split into rows of {dim}",
                data.len()
            )));
        }
        Ok(OutlierPool { dim, data, source })
    }

    pub fn empty(dim: usize, source: PoolSource) -> Self {
        OutlierPool {
            dim,
            data: Vec::new(),
            source,
        }
    }

    pub fn from_tensor(t: &Tensor, source: PoolSource) -> Result<Self> {
        OutlierPool::new(t.cols(), t.data().to_vec(), source)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> PoolSource {
        self.source
    }

    pub fn with_source(mut self, source: PoolSource) -> Self {
        self.source = source;
        self
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The samples as an `M × d` matrix, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| {
            Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("consistent pool")
        })
    }

    pub fn select(&self, indices: &[usize]) -> OutlierPool {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        OutlierPool {
            dim: self.dim,
            data,
            source: self.source,
        }
    }
}

fn check_matrix(g: &Graph, v: Var, what: &'static str) -> Result<(usize, usize)> {
    let t = g.value(v);
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            primitive: what,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.rows(), t.cols()))
}

/// Mean negative log-likelihood of the labels under the softmax of `logits`.
pub fn cross_entropy_term(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = check_matrix(g, logits, "cross_entropy_term")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: labels.len(),
        });
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        onehot[i * k + y] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(n, k, onehot)?);
    let lse = g.log_sum_exp(logits, 1)?;
    let masked = g.mul(logits, onehot)?;
    let picked = g.sum_axis(masked, 1)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Per-row max-softmax probability, `[N]`.
pub fn max_softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    check_matrix(g, logits, "max_softmax")?;
    let m = g.max_axis(logits, 1)?;
    let lse = g.log_sum_exp(logits, 1)?;
    let log_p = g.sub(m, lse)?;
    g.exp(log_p)
}

/// `-(1/M) Σ log(1 - p*_m)` with `p*` the max-softmax probability of each row.
pub fn negative_training_term(g: &mut Graph, logits: Var) -> Result<Var> {
    let (m, _) = check_matrix(g, logits, "negative_training_term")?;
    let p = max_softmax(g, logits)?;
    let ones = g.constant(Tensor::filled(&[m], 1.0)?);
    let rest = g.sub(ones, p)?;
    let rest = g.clamp_min(rest, NEGATIVE_CONFIDENCE_FLOOR)?;
    let log_rest = g.log(rest)?;
    let mean = g.mean(log_rest)?;
    g.scale(mean, -1.0)
}

/// Cross-entropy on `normals` plus `lambda` times negative training on `negatives`.
pub fn classifier_loss(
    g: &mut Graph,
    model: &MlpClassifier,
    bound: &Bound,
    normals: &LabeledBatch,
    negatives: &OutlierPool,
    w: &LossWeights,
) -> Result<Var> {
    normals.validate_labels(model.num_classes())?;
    let x = g.constant(normals.inputs().clone());
    let logits = model.forward_logits(g, bound, x)?;
    let ce = cross_entropy_term(g, logits, normals.labels())?;
    let Some(neg) = negatives.to_tensor() else {
        return Ok(ce);
    };
    if w.lambda == 0.0 {
        return Ok(ce);
    }
    if neg.cols() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            actual: neg.cols(),
        });
    }
    let z = g.constant(neg);
    let neg_logits = model.forward_logits(g, bound, z)?;
    let nt = negative_training_term(g, neg_logits)?;
    let nt = g.scale(nt, w.lambda)?;
    g.add(ce, nt)
}

/// Mean over ordered pairs `i ≠ j` of `‖z_i − z_j‖ / (‖O(z_i) − O(z_j)‖ + delta)`.
///
/// Every latent row serves as the anchor in turn, so the value is the mean of
/// the per-anchor averages.
pub fn dispersion_term(g: &mut Graph, latents: &Tensor, outputs: Var, delta: f64) -> Result<Var> {
    let (n, _) = check_matrix(g, outputs, "dispersion_term")?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "dispersion needs at least two samples, got {n}"
        )));
    }
    if latents.rank() != 2 || latents.rows() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: latents.rows(),
        });
    }
    let latent_dist = {
        let z = g.constant(latents.clone());
        g.l2_norm_of_difference(z, z)?
    };
    let data_dist = g.l2_norm_of_difference(outputs, outputs)?;
    // Diagonal padded with 1.
    let mut guard = vec![delta; n * n];
    for i in 0..n {
        guard[i * n + i] = 1.0;
    }
    let guard = g.constant(Tensor::matrix(n, n, guard)?);
    let denom = g.add(data_dist, guard)?;
    let log_denom = g.log(denom)?;
    let neg_log = g.scale(log_denom, -1.0)?;
    let inv = g.exp(neg_log)?;
    let ratio = g.mul(latent_dist, inv)?;
    let total = g.sum(ratio)?;
    g.scale(total, 1.0 / (n * (n - 1)) as f64)
}

/// Mean over rows of `max_l softmax(f(O(z)) − f(x))_l`.
pub fn confidence_dominance_term(g: &mut Graph, generated_logits: Var, reference_logits: Var) -> Result<Var> {
    let a = check_matrix(g, generated_logits, "confidence_dominance_term")?;
    let b = check_matrix(g, reference_logits, "confidence_dominance_term")?;
    if a != b {
        return Err(Error::ShapeMismatch {
            primitive: "confidence_dominance_term",
            lhs: vec![a.0, a.1],
            rhs: vec![b.0, b.1],
        });
    }
    let diff = g.sub(generated_logits, reference_logits)?;
    let p = max_softmax(g, diff)?;
    g.mean(p)
}

/// Mean over generated rows of the distance to the nearest reference row.
pub fn proximity_term(g: &mut Graph, generated: Var, reference: Var) -> Result<Var> {
    check_matrix(g, generated, "proximity_term")?;
    check_matrix(g, reference, "proximity_term")?;
    let d = g.l2_norm_of_difference(generated, reference)?;
    let neg = g.scale(d, -1.0)?;
    let nearest = g.max_axis(neg, 1)?;
    let mean = g.mean(nearest)?;
    g.scale(mean, -1.0)
}

/// Inputs of the generator objective that are not parameters.
#[derive(Clone, Debug)]
pub struct GeneratorBatch<'a> {
    pub latents: &'a LatentBatch,
    /// `Q × d` normal samples used by the proximity term.
    pub reference: &'a Tensor,
    /// For each latent row, the reference row it is compared against in the
    /// dominance term.
    pub pairing: &'a [usize],
}

/// Dispersion plus `mu` dominance plus `nu` proximity. The classifier is bound
/// as constants, so no gradient ever reaches its parameters.
pub fn generator_loss(
    g: &mut Graph,
    generator: &BoundaryGenerator,
    gen_bound: &Bound,
    classifier: &MlpClassifier,
    batch: &GeneratorBatch<'_>,
    w: &LossWeights,
) -> Result<Var> {
    let n = batch.latents.len();
    if batch.pairing.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: batch.pairing.len(),
        });
    }
    if generator.data_dim() != classifier.input_dim() {
        return Err(Error::Dimension {
            expected: classifier.input_dim(),
            actual: generator.data_dim(),
        });
    }
    let z = g.constant(batch.latents.values().clone());
    let out = generator.generate_on(g, gen_bound, z)?;

    let mut terms = Vec::new();
    if w.dispersion != 0.0 {
        let d = dispersion_term(g, batch.latents.values(), out, w.delta)?;
        terms.push(if w.dispersion == 1.0 {
            d
        } else {
            g.scale(d, w.dispersion)?
        });
    }
    if w.mu != 0.0 {
        let frozen = classifier.bind(g, false);
        let gen_logits = classifier.forward_logits(g, &frozen, out)?;
        let paired = g.constant(batch.reference.select_rows(batch.pairing)?);
        let ref_logits = classifier.forward_logits(g, &frozen, paired)?;
        let dom = confidence_dominance_term(g, gen_logits, ref_logits)?;
        terms.push(g.scale(dom, w.mu)?);
    }
    if w.nu != 0.0 {
        let reference = g.constant(batch.reference.clone());
        let prox = proximity_term(g, out, reference)?;
        terms.push(g.scale(prox, w.nu)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = g.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Mlp};

    fn value_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn logits(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    // Direct evaluation in extended-precision-free form, kept apart from the
    // graph code path.
    fn naive_softmax(row: &[f64]) -> Vec<f64> {
        let s: f64 = row.iter().map(|x| x.exp()).sum();
        row.iter().map(|x| x.exp() / s).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = 2f64.ln();
        for label in 0..2 {
            let v = value_of(|g| {
                let l = logits(g, &[vec![0.0, 0.0]]);
                cross_entropy_term(g, l, &[label])
            });
            assert!((v - ln2).abs() < 1e-12);
        }
        let v = value_of(|g| {
            let l = logits(g, &[vec![1e9, 0.0]]);
            cross_entropy_term(g, l, &[0])
        });
        assert!(v.abs() < 1e-12);
        let expected = -naive_softmax(&[1.0, 2.0, 3.0])[2].ln();
        let v = value_of(|g| {
            let l = logits(g, &[vec![1.0, 2.0, 3.0]]);
            cross_entropy_term(g, l, &[2])
        });
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.0, 0.0]]);
        assert!(matches!(
            cross_entropy_term(&mut g, l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn negative_term_examples() {
        let v = value_of(|g| {
            let l = logits(g, &[vec![0.0, 0.0]]);
            negative_training_term(g, l)
        });
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = value_of(|g| {
            let l = logits(g, &[vec![0.3; 4]]);
            negative_training_term(g, l)
        });
        assert!((v + 0.75f64.ln()).abs() < 1e-12);
        assert!((v - 0.287682).abs() < 1e-6);
        let p = naive_softmax(&[10.0, 0.0])[0];
        let v = value_of(|g| {
            let l = logits(g, &[vec![10.0, 0.0]]);
            negative_training_term(g, l)
        });
        assert!((v + (1.0 - p).ln()).abs() < 1e-9);
        assert!((v - 10.000045).abs() < 1e-5);
    }

    #[test]
    fn negative_term_is_clamped() {
        let v = value_of(|g| {
            let l = logits(g, &[vec![1e4, 0.0]]);
            negative_training_term(g, l)
        });
        assert!((v + NEGATIVE_CONFIDENCE_FLOOR.ln()).abs() < 1e-9);
    }

    fn linear_identity(k: usize) -> MlpClassifier {
        MlpClassifier::new(
            Mlp::from_params(
                &[k, k],
                Activation::Relu,
                vec![Tensor::identity(k).unwrap(), Tensor::zeros(&[k]).unwrap()],
            )
            .unwrap(),
        )
    }

    #[test]
    fn classifier_loss_reductions() {
        let clf = MlpClassifier::init(4, &[2, 6, 3], Activation::Relu).unwrap();
        let normals = LabeledBatch::new(
            Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.9], vec![0.3, -0.3]]).unwrap(),
            vec![0, 2, 1],
        )
        .unwrap();
        let negatives = OutlierPool::new(2, vec![1.0, 1.0, -2.0, 0.5], PoolSource::FewShotOe).unwrap();
        let ce = value_of(|g| {
            let b = clf.bind(g, false);
            let x = g.constant(normals.inputs().clone());
            let l = clf.forward_logits(g, &b, x)?;
            cross_entropy_term(g, l, normals.labels())
        });
        let zero_lambda = LossWeights {
            lambda: 0.0,
            ..LossWeights::default()
        };
        let v = value_of(|g| {
            let b = clf.bind(g, true);
            classifier_loss(g, &clf, &b, &normals, &negatives, &zero_lambda)
        });
        assert_eq!(v, ce);
        let v = value_of(|g| {
            let b = clf.bind(g, true);
            classifier_loss(g, &clf, &b, &normals, &OutlierPool::empty(2, PoolSource::FewShotOe), &LossWeights::default())
        });
        assert_eq!(v, ce);
    }

    #[test]
    fn classifier_loss_uniform_case() {
        let clf = MlpClassifier::new(Mlp::zeros(&[2, 2], Activation::Relu).unwrap());
        let normals = LabeledBatch::new(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(), vec![1]).unwrap();
        let negatives = OutlierPool::new(2, vec![3.0, -1.0], PoolSource::FewShotOe).unwrap();
        let v = value_of(|g| {
            let b = clf.bind(g, true);
            classifier_loss(g, &clf, &b, &normals, &negatives, &LossWeights::default())
        });
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn dispersion_identity_is_one() {
        let z = LatentBatch::sample(12, 3, 2).unwrap();
        let gen = BoundaryGenerator::new(linear_identity(2).net().clone());
        let v = value_of(|g| {
            let b = gen.bind(g, true);
            let zv = g.constant(z.values().clone());
            let out = gen.generate_on(g, &b, zv)?;
            dispersion_term(g, z.values(), out, 0.0)
        });
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn dispersion_brute_force() {
        let z = LatentBatch::sample(5, 4, 3).unwrap();
        let out = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![0.5, 0.5],
            vec![-3.0, 0.25],
        ])
        .unwrap();
        let delta = 1e-3;
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut acc = 0.0;
        for i in 0..4 {
            let mut anchor = 0.0;
            for j in (0..4).filter(|&j| j != i) {
                anchor += dist(z.values().row(i), z.values().row(j)) / (dist(out.row(i), out.row(j)) + delta);
            }
            acc += anchor / 3.0;
        }
        let expected = acc / 4.0;
        let v = value_of(|g| {
            let o = g.constant(out.clone());
            dispersion_term(g, z.values(), o, delta)
        });
        assert!((v - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn dispersion_collapse_blows_up() {
        let z = LatentBatch::sample(6, 5, 2).unwrap();
        let out = Tensor::filled(&[5, 2], 0.3).unwrap();
        let mut mean_latent = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    let d: f64 = z.values().row(i).iter().zip(z.values().row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                    mean_latent += d.sqrt();
                }
            }
        }
        mean_latent /= 20.0;
        let v = value_of(|g| {
            let o = g.constant(out);
            dispersion_term(g, z.values(), o, 1e-6)
        });
        assert!((v / (mean_latent / 1e-6) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dispersion_needs_pairs() {
        let z = LatentBatch::sample(6, 1, 2).unwrap();
        let mut g = Graph::new();
        let o = g.constant(Tensor::zeros(&[1, 2]).unwrap());
        assert!(dispersion_term(&mut g, z.values(), o, 1e-6).is_err());
    }

    #[test]
    fn dominance_examples() {
        let v = value_of(|g| {
            let a = logits(g, &[vec![1.0, -2.0, 0.5]]);
            let b = logits(g, &[vec![1.0, -2.0, 0.5]]);
            confidence_dominance_term(g, a, b)
        });
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let v = value_of(|g| {
            let a = logits(g, &[vec![10.0, -10.0]]);
            let b = logits(g, &[vec![0.0, 0.0]]);
            confidence_dominance_term(g, a, b)
        });
        assert!((v - 1.0).abs() < 1e-8);
        let v = value_of(|g| {
            let a = logits(g, &[vec![1.0, 0.0, -1.0]]);
            let b = logits(g, &[vec![0.0, 0.0, 0.0]]);
            confidence_dominance_term(g, a, b)
        });
        assert!((v - naive_softmax(&[1.0, 0.0, -1.0])[0]).abs() < 1e-12);
        assert!((v - 0.665241).abs() < 1e-6);
    }

    #[test]
    fn dominance_shape_mismatch() {
        let mut g = Graph::new();
        let a = logits(&mut g, &[vec![1.0, 0.0]]);
        let b = logits(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(confidence_dominance_term(&mut g, a, b).is_err());
    }

    #[test]
    fn proximity_examples() {
        let v = value_of(|g| {
            let a = logits(g, &[vec![3.0, 4.0]]);
            let b = logits(g, &[vec![0.0, 0.0]]);
            proximity_term(g, a, b)
        });
        assert_eq!(v, 5.0);
        let v = value_of(|g| {
            let a = logits(g, &[vec![1.0, 2.0]]);
            let b = logits(g, &[vec![7.0, 7.0], vec![1.0, 2.0]]);
            proximity_term(g, a, b)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn proximity_brute_force() {
        let gen = LatentBatch::sample(1, 7, 3).unwrap().values().clone();
        let refs = LatentBatch::sample(2, 5, 3).unwrap().values().clone();
        let mut expected = 0.0;
        for i in 0..7 {
            let mut best = f64::INFINITY;
            for j in 0..5 {
                let d: f64 = gen.row(i).iter().zip(refs.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                best = best.min(d.sqrt());
            }
            expected += best;
        }
        expected /= 7.0;
        let v = value_of(|g| {
            let a = g.constant(gen.clone());
            let b = g.constant(refs.clone());
            proximity_term(g, a, b)
        });
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_reduces_to_dispersion() {
        let gen = BoundaryGenerator::init(3, &[2, 8, 2], Activation::Relu).unwrap();
        let clf = MlpClassifier::init(4, &[2, 8, 3], Activation::Relu).unwrap();
        let z = LatentBatch::sample(9, 6, 2).unwrap();
        let reference = LatentBatch::sample(10, 4, 2).unwrap().values().clone();
        let pairing = [0, 1, 2, 3, 0, 1];
        let batch = GeneratorBatch {
            latents: &z,
            reference: &reference,
            pairing: &pairing,
        };
        let w = LossWeights {
            mu: 0.0,
            nu: 0.0,
            ..LossWeights::default()
        };
        let full = value_of(|g| {
            let b = gen.bind(g, true);
            generator_loss(g, &gen, &b, &clf, &batch, &w)
        });
        let disp = value_of(|g| {
            let b = gen.bind(g, true);
            let zv = g.constant(z.values().clone());
            let out = gen.generate_on(g, &b, zv)?;
            dispersion_term(g, z.values(), out, w.delta)
        });
        assert_eq!(full, disp);
    }

    #[test]
    fn classifier_receives_no_gradient_in_generator_loss() {
        let gen = BoundaryGenerator::init(3, &[2, 8, 2], Activation::Relu).unwrap();
        let clf = MlpClassifier::init(4, &[2, 8, 3], Activation::Relu).unwrap();
        let z = LatentBatch::sample(9, 6, 2).unwrap();
        let reference = LatentBatch::sample(10, 4, 2).unwrap().values().clone();
        let pairing = [3, 1, 2, 3, 0, 1];
        let batch = GeneratorBatch {
            latents: &z,
            reference: &reference,
            pairing: &pairing,
        };
        let mut g = Graph::new();
        let b = gen.bind(&mut g, true);
        let loss = generator_loss(&mut g, &gen, &b, &clf, &batch, &LossWeights::default()).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.trainable_leaves(), b.params());
        assert!(b.params().iter().all(|&p| g.grad(p).is_some()));
    }
}
