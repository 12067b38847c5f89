//! Anomaly scoring, thresholding and the three evaluation metrics.
//!
//! The anomaly score is the max-softmax confidence of the classifier; low
//! scores flag out-of-distribution inputs. AUROC compares clean scores of
//! in- and out-samples. The adversarial variant replaces every out-sample's
//! score with the best confidence a sign-gradient attack finds inside an l∞
//! ball; the guaranteed variant replaces it with an upper bound certified by
//! interval bound propagation over the same ball. In-samples always keep
//! their clean score.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor};
use crate::losses::max_softmax;
use crate::models::{Activation, MlpClassifier};
use crate::rng;

/// l∞ threat model and decision threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessBudget {
    pub epsilon: f64,
    pub pgd_steps: usize,
    /// Attack step size; 0 selects `epsilon / 10`.
    pub pgd_step_size: f64,
    /// Extra attack runs from uniformly random starts inside the ball.
    pub restarts: usize,
    pub tau: f64,
    /// Optional `[low, high]` clamp applied to every input coordinate.
    pub input_box: Vec<f64>,
    /// Set per run from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RobustnessBudget {
    fn default() -> Self {
        RobustnessBudget {
            epsilon: 0.05,
            pgd_steps: 40,
            pgd_step_size: 0.0,
            restarts: 0,
            tau: 0.5,
            input_box: Vec::new(),
            seed: 0,
        }
    }
}

impl RobustnessBudget {
    pub fn with_epsilon(epsilon: f64) -> Self {
        RobustnessBudget {
            epsilon,
            ..RobustnessBudget::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        if self.pgd_step_size > 0.0 {
            self.pgd_step_size
        } else {
            self.epsilon / 10.0
        }
    }

    pub fn box_bounds(&self) -> Option<(f64, f64)> {
        match self.input_box.as_slice() {
            [lo, hi] => Some((*lo, *hi)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::config("budget.epsilon", "must be finite and ≥ 0"));
        }
        if self.pgd_steps == 0 {
            return Err(Error::config("budget.pgd_steps", "must be positive"));
        }
        if self.pgd_step_size < 0.0 || (self.epsilon > 0.0 && self.step_size() > self.epsilon) {
            return Err(Error::config(
                "budget.pgd_step_size",
                "must lie in (0, epsilon] (0 selects epsilon/10)",
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("budget.tau", "must lie in [0, 1]"));
        }
        match self.input_box.as_slice() {
            [] => {}
            [lo, hi] if lo < hi => {}
            _ => {
                return Err(Error::config(
                    "budget.input_box",
                    "must be empty or [low, high] with low < high",
                ))
            }
        }
        Ok(())
    }
}

/// Max-softmax probability of one logit vector: `1 / Σ_k exp(f_k − max f)`.
pub fn max_softmax_of_logits(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &f in logits {
        denom += (f - m).exp();
    }
    1.0 / denom
}

pub fn anomaly_score(model: &MlpClassifier, x: &[f64]) -> Result<f64> {
    if x.len() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    Ok(max_softmax_of_logits(&model.net().evaluate_row(x)))
}

pub fn anomaly_scores(model: &MlpClassifier, batch: &Tensor) -> Result<Vec<f64>> {
    (0..batch.rows())
        .map(|r| anomaly_score(model, batch.row(r)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    InDistribution,
    OutOfDistribution,
}

/// OoD iff `score < tau`; a tie counts as in-distribution.
pub fn classify_with_threshold(score: f64, tau: f64) -> Verdict {
    if score < tau {
        Verdict::OutOfDistribution
    } else {
        Verdict::InDistribution
    }
}

/// Largest `tau` such that at least `target_tpr` of `in_scores` are `≥ tau`.
pub fn calibrate_threshold(in_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if in_scores.is_empty() {
        return Err(Error::InvalidArgument("no in-distribution scores".into()));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target TPR must lie in (0, 1], got {target_tpr}"
        )));
    }
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let needed = ((target_tpr * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[needed - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Clean,
    Adversarial,
    CertifiedUpper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreSet {
    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.in_scores, &self.out_scores)
    }
}

/// Probability that a random in-score exceeds a random out-score, ties
/// counted one half, via the Mann–Whitney rank sum.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "AUROC needs non-empty in and out score sets".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are 1-based; tied blocks share the mean of their ranks.
    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        let in_count = all[i..=j].iter().filter(|(_, is_in)| *is_in).count();
        rank_sum_in += mean_rank * in_count as f64;
        i = j + 1;
    }
    let n = in_scores.len() as f64;
    let m = out_scores.len() as f64;
    let u = rank_sum_in - n * (n + 1.0) / 2.0;
    Ok(u / (n * m))
}

fn project(x: &mut [f64], center: &[f64], epsilon: f64, input_box: Option<(f64, f64)>) {
    for (v, &c) in x.iter_mut().zip(center) {
        *v = v.clamp(c - epsilon, c + epsilon);
        if let Some((lo, hi)) = input_box {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Worst-case confidence found by sign-gradient ascent for every row of
/// `points`. Each attack starts at the clean point (plus `restarts` random
/// starts), projects every iterate onto the ball (and input box), and
/// returns the maximum score over all iterates including the start.
pub fn pgd_max_confidence_batch(
    model: &MlpClassifier,
    points: &Tensor,
    budget: &RobustnessBudget,
) -> Result<Vec<f64>> {
    let clean = anomaly_scores(model, points)?;
    if budget.epsilon == 0.0 {
        return Ok(clean);
    }
    let (n, d) = (points.rows(), points.cols());
    let step = budget.step_size();
    let input_box = budget.box_bounds();
    let mut best = clean;
    let mut restart_rng = rng::seeded(budget.seed);

    for run in 0..=budget.restarts {
        let mut x = points.data().to_vec();
        if run > 0 {
            for v in x.iter_mut() {
                *v += restart_rng.random_range(-budget.epsilon..=budget.epsilon);
            }
        }
        for r in 0..n {
            project(&mut x[r * d..(r + 1) * d], points.row(r), budget.epsilon, input_box);
        }
        for it in 0..=budget.pgd_steps {
            for r in 0..n {
                let s = anomaly_score(model, &x[r * d..(r + 1) * d])?;
                if s > best[r] {
                    best[r] = s;
                }
            }
            if it == budget.pgd_steps {
                break;
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let xv = g.leaf(Tensor::matrix(n, d, x.clone())?);
            let logits = model.forward_logits(&mut g, &bound, xv)?;
            let p = max_softmax(&mut g, logits)?;
            let total = g.sum(p)?;
            g.backward(total)?;
            let grad = g.grad(xv).expect("input is a leaf").to_vec();
            for (v, gr) in x.iter_mut().zip(&grad) {
                if *gr > 0.0 {
                    *v += step;
                } else if *gr < 0.0 {
                    *v -= step;
                }
            }
            for r in 0..n {
                project(&mut x[r * d..(r + 1) * d], points.row(r), budget.epsilon, input_box);
            }
        }
    }
    Ok(best)
}

pub fn pgd_max_confidence(model: &MlpClassifier, x: &[f64], budget: &RobustnessBudget) -> Result<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(pgd_max_confidence_batch(model, &t, budget)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Sound per-logit bounds over the l∞ ball of radius `epsilon` around `x`
/// (intersected with `input_box`), by center–radius interval arithmetic.
///
/// For `epsilon > 0` each affine layer widens its radius by a bound on the
/// floating-point error of the center computation, so the intervals also
/// contain logits evaluated in floating point.
pub fn ibp_logit_bounds(
    model: &MlpClassifier,
    x: &[f64],
    epsilon: f64,
    input_box: Option<(f64, f64)>,
) -> Result<Vec<Interval>> {
    let net = model.net();
    if x.len() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            actual: x.len(),
        });
    }
    match net.activation() {
        Activation::Relu | Activation::Tanh => {}
    }
    let mut lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let mut hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();
    if let Some((blo, bhi)) = input_box {
        for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
            *l = l.clamp(blo, bhi);
            *h = h.clamp(blo, bhi);
        }
    }
    let pad_rounding = epsilon > 0.0;
    for layer in 0..net.num_layers() {
        let w = net.weight(layer);
        let b = net.bias(layer).data();
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (l + h) / 2.0).collect();
        let rad: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / 2.0).collect();
        let mut next_lo = Vec::with_capacity(out);
        let mut next_hi = Vec::with_capacity(out);
        for j in 0..out {
            let row = &w.data()[j * inp..(j + 1) * inp];
            let mut c = 0.0;
            let mut r = 0.0;
            let mut magnitude = 0.0;
            for t in 0..inp {
                c += mid[t] * row[t];
                r += row[t].abs() * rad[t];
                magnitude += row[t].abs() * (lo[t].abs().max(hi[t].abs()));
            }
            let c = c + b[j];
            if pad_rounding {
                r += (inp as f64 + 4.0) * f64::EPSILON * (magnitude + b[j].abs() + r);
            }
            next_lo.push(c - r);
            next_hi.push(c + r);
        }
        if layer + 1 < net.num_layers() {
            let act = net.activation();
            next_lo.iter_mut().for_each(|v| *v = act.apply(*v));
            next_hi.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        lo = next_lo;
        hi = next_hi;
    }
    Ok(lo
        .into_iter()
        .zip(hi)
        .map(|(lo, hi)| Interval { lo, hi })
        .collect())
}

/// Upper bound on the max-softmax probability for any logits within
/// `bounds`: each candidate class at its upper endpoint against all rivals
/// at their lower endpoints.
pub fn certified_max_confidence(bounds: &[Interval]) -> Result<f64> {
    if let Some(bad) = bounds.iter().find(|b| !(b.lo <= b.hi)) {
        return Err(Error::InvalidArgument(format!(
            "inverted interval [{}, {}]",
            bad.lo, bad.hi
        )));
    }
    let mut best = 0.0f64;
    for (l, cand) in bounds.iter().enumerate() {
        let mut denom = 0.0;
        for (k, rival) in bounds.iter().enumerate() {
            denom += if k == l {
                1.0
            } else {
                (rival.lo - cand.hi).exp()
            };
        }
        best = best.max(1.0 / denom);
    }
    Ok(best)
}

pub fn certified_scores(model: &MlpClassifier, points: &Tensor, budget: &RobustnessBudget) -> Result<Vec<f64>> {
    (0..points.rows())
        .map(|r| {
            let b = ibp_logit_bounds(model, points.row(r), budget.epsilon, budget.box_bounds())?;
            certified_max_confidence(&b)
        })
        .collect()
}

/// AUROC, adversarial AUROC and guaranteed AUROC of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub aauroc: f64,
    pub gauroc: f64,
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub fingerprint: String,
}

impl MetricReport {
    /// `gauroc ≤ aauroc ≤ auroc`, required whenever `epsilon > 0`.
    pub fn is_ordered(&self) -> bool {
        self.gauroc <= self.aauroc && self.aauroc <= self.auroc
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub clean: ScoreSet,
    pub adversarial: ScoreSet,
    pub certified: ScoreSet,
}

pub fn evaluate_ood(
    model: &MlpClassifier,
    in_set: &Tensor,
    out_set: &Tensor,
    budget: &RobustnessBudget,
) -> Result<Evaluation> {
    let in_scores = anomaly_scores(model, in_set)?;
    let out_clean = anomaly_scores(model, out_set)?;
    let out_adv = pgd_max_confidence_batch(model, out_set, budget)?;
    let out_cert = certified_scores(model, out_set, budget)?;
    let clean = ScoreSet {
        in_scores: in_scores.clone(),
        out_scores: out_clean,
        kind: ScoreKind::Clean,
    };
    let adversarial = ScoreSet {
        in_scores: in_scores.clone(),
        out_scores: out_adv,
        kind: ScoreKind::Adversarial,
    };
    let certified = ScoreSet {
        in_scores,
        out_scores: out_cert,
        kind: ScoreKind::CertifiedUpper,
    };
    let report = MetricReport {
        auroc: clean.auroc()?,
        aauroc: adversarial.auroc()?,
        gauroc: certified.auroc()?,
        epsilon: budget.epsilon,
        pgd_steps: budget.pgd_steps,
        pgd_step_size: budget.step_size(),
        n_in: in_set.rows(),
        n_out: out_set.rows(),
        fingerprint: String::new(),
    };
    Ok(Evaluation {
        report,
        clean,
        adversarial,
        certified,
    })
}

/// Writes `sample_id,set,clean_score,adv_score,cert_upper`, in-samples first.
pub fn write_score_dump(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut out = String::from("sample_id,set,clean_score,adv_score,cert_upper\n");
    let mut id = 0;
    for &s in &eval.clean.in_scores {
        out.push_str(&format!("{id},in,{s},{s},{s}\n"));
        id += 1;
    }
    for ((c, a), u) in eval
        .clean
        .out_scores
        .iter()
        .zip(&eval.adversarial.out_scores)
        .zip(&eval.certified.out_scores)
    {
        out.push_str(&format!("{id},out,{c},{a},{u}\n"));
        id += 1;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;
    use crate::models::{LatentBatch, Mlp};

    fn linear(w: Vec<f64>, b: Vec<f64>, d: usize) -> MlpClassifier {
        let k = b.len();
        MlpClassifier::new(
            Mlp::from_params(
                &[d, k],
                Activation::Relu,
                vec![Tensor::matrix(k, d, w).unwrap(), Tensor::vector(b).unwrap()],
            )
            .unwrap(),
        )
    }

    #[test]
    fn score_examples() {
        assert_eq!(max_softmax_of_logits(&[0.0, 0.0]), 0.5);
        assert!((max_softmax_of_logits(&[1e9, 0.0]) - 1.0).abs() < 1e-12);
        let e: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let v = max_softmax_of_logits(&[1.0, 2.0, 3.0]);
        assert!((v - 3f64.exp() / e).abs() < 1e-12);
        assert!((v - 0.665241).abs() < 1e-6);
    }

    #[test]
    fn score_dimension_mismatch() {
        let clf = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        assert!(anomaly_score(&clf, &[1.0]).is_err());
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(classify_with_threshold(0.3, 0.5), Verdict::OutOfDistribution);
        assert_eq!(classify_with_threshold(0.5, 0.5), Verdict::InDistribution);
        assert_eq!(classify_with_threshold(0.9, 0.5), Verdict::InDistribution);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.9; 7], 0.95).unwrap(), 0.9);
        let deciles: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        // Sorting oracle: the 5th largest of ten deciles.
        let mut sorted = deciles.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(calibrate_threshold(&deciles, 0.5).unwrap(), sorted[4]);
        assert_eq!(calibrate_threshold(&deciles, 0.5).unwrap(), 0.6);
        assert_eq!(calibrate_threshold(&[0.4, 0.2, 0.7], 1.0).unwrap(), 0.2);
        assert!(calibrate_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4], &[0.4]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8], &[0.85, 0.7]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    #[test]
    fn pgd_with_zero_epsilon_is_clean() {
        let clf = MlpClassifier::init(3, &[2, 8, 3], Activation::Relu).unwrap();
        let x = [0.3, -0.2];
        let budget = RobustnessBudget::with_epsilon(0.0);
        assert_eq!(pgd_max_confidence(&clf, &x, &budget).unwrap(), anomaly_score(&clf, &x).unwrap());
    }

    #[test]
    fn pgd_one_dimensional_closed_form() {
        // Logits [x, 0]: the score σ(x) for x > 0 is monotone increasing in x.
        let clf = linear(vec![1.0, 0.0], vec![0.0, 0.0], 1);
        let budget = RobustnessBudget::with_epsilon(0.1);
        let adv = pgd_max_confidence(&clf, &[0.5], &budget).unwrap();
        let expected = max_softmax_of_logits(&[0.6, 0.0]);
        assert!((adv - expected).abs() < 1e-12, "{adv} vs {expected}");
        let adv = pgd_max_confidence(&clf, &[-0.5], &budget).unwrap();
        let expected = max_softmax_of_logits(&[-0.6, 0.0]);
        assert!((adv - expected).abs() < 1e-12);
    }

    #[test]
    fn pgd_never_below_clean() {
        let clf = MlpClassifier::init(8, &[3, 10, 4], Activation::Tanh).unwrap();
        let pts = LatentBatch::sample(2, 20, 3).unwrap().values().clone();
        let budget = RobustnessBudget::with_epsilon(0.2);
        let adv = pgd_max_confidence_batch(&clf, &pts, &budget).unwrap();
        let clean = anomaly_scores(&clf, &pts).unwrap();
        assert!(adv.iter().zip(&clean).all(|(a, c)| a >= c));
    }

    #[test]
    fn pgd_respects_input_box() {
        let clf = linear(vec![1.0, 0.0], vec![0.0, 0.0], 1);
        let budget = RobustnessBudget {
            input_box: vec![-1.0, 0.55],
            ..RobustnessBudget::with_epsilon(0.1)
        };
        let adv = pgd_max_confidence(&clf, &[0.5], &budget).unwrap();
        assert!((adv - max_softmax_of_logits(&[0.55, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn ibp_examples() {
        let clf = linear(vec![1.0], vec![0.0], 1);
        let b = ibp_logit_bounds(&clf, &[0.5], 0.1, None).unwrap();
        assert!((b[0].lo - 0.4).abs() < 1e-12 && (b[0].hi - 0.6).abs() < 1e-12);

        let clf = MlpClassifier::init(1, &[2, 6, 3], Activation::Relu).unwrap();
        let x = [0.2, -0.7];
        let exact = clf.net().evaluate_row(&x);
        let b = ibp_logit_bounds(&clf, &x, 0.0, None).unwrap();
        for (iv, e) in b.iter().zip(&exact) {
            assert_eq!(iv.lo, *e);
            assert_eq!(iv.hi, *e);
        }
    }

    #[test]
    fn ibp_sound_on_random_points() {
        let mut r = rng::seeded(17);
        for act in [Activation::Relu, Activation::Tanh] {
            let clf = MlpClassifier::init(21, &[3, 8, 8, 4], act).unwrap();
            let x = [0.1, -0.4, 0.9];
            let eps = 0.1;
            let b = ibp_logit_bounds(&clf, &x, eps, None).unwrap();
            for _ in 0..1000 {
                let p: Vec<f64> = x.iter().map(|v| v + r.random_range(-eps..=eps)).collect();
                for (iv, l) in b.iter().zip(clf.net().evaluate_row(&p)) {
                    assert!(iv.lo <= l && l <= iv.hi);
                }
            }
        }
    }

    #[test]
    fn certified_examples() {
        let logits = [0.3, -1.2, 2.0];
        let degenerate: Vec<Interval> = logits.iter().map(|&v| Interval { lo: v, hi: v }).collect();
        assert_eq!(
            certified_max_confidence(&degenerate).unwrap(),
            max_softmax_of_logits(&logits)
        );
        let wide = [Interval { lo: -1.0, hi: 1.0 }, Interval { lo: -1.0, hi: 1.0 }];
        let v = certified_max_confidence(&wide).unwrap();
        let e1 = 1f64.exp();
        assert!((v - e1 / (e1 + (-1f64).exp())).abs() < 1e-12);
        assert!((v - 0.880797).abs() < 1e-6);
        assert!(certified_max_confidence(&[Interval { lo: 1.0, hi: 0.0 }]).is_err());
    }

    #[test]
    fn certified_dominates_attack() {
        let clf = MlpClassifier::init(9, &[2, 12, 3], Activation::Relu).unwrap();
        let pts = LatentBatch::sample(4, 30, 2).unwrap().values().clone();
        let budget = RobustnessBudget::with_epsilon(0.05);
        let adv = pgd_max_confidence_batch(&clf, &pts, &budget).unwrap();
        let cert = certified_scores(&clf, &pts, &budget).unwrap();
        assert!(adv.iter().zip(&cert).all(|(a, c)| a <= c));
    }

    #[test]
    fn zero_budget_metrics_coincide() {
        let clf = MlpClassifier::init(2, &[2, 8, 3], Activation::Relu).unwrap();
        let a = LatentBatch::sample(5, 20, 2).unwrap().values().clone();
        let b = LatentBatch::sample(6, 20, 2).unwrap().values().map(|v| 2.0 * v);
        let eval = evaluate_ood(&clf, &a, &b, &RobustnessBudget::with_epsilon(0.0)).unwrap();
        assert_eq!(eval.report.auroc, eval.report.aauroc);
        assert_eq!(eval.report.auroc, eval.report.gauroc);
        assert_eq!(eval.clean.out_scores, eval.certified.out_scores);
    }

    #[test]
    fn score_dump_columns() {
        let clf = MlpClassifier::init(2, &[2, 4, 2], Activation::Relu).unwrap();
        let a = LatentBatch::sample(5, 3, 2).unwrap().values().clone();
        let b = LatentBatch::sample(6, 2, 2).unwrap().values().clone();
        let eval = evaluate_ood(&clf, &a, &b, &RobustnessBudget::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        write_score_dump(&p, &eval).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,set,clean_score,adv_score,cert_upper");
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("3,out,"));
    }

    #[test]
    fn budget_validation() {
        assert!(RobustnessBudget::default().validate().is_ok());
        let bad = RobustnessBudget {
            pgd_step_size: 0.5,
            ..RobustnessBudget::with_epsilon(0.1)
        };
        assert!(bad.validate().is_err());
        let bad = RobustnessBudget {
            tau: 1.5,
            ..RobustnessBudget::default()
        };
        assert!(bad.validate().is_err());
    }
}
