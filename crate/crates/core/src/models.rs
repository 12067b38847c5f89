//! Dense networks: the K-class classifier and the boundary generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Multi-layer perceptron with a hidden activation and a linear output layer.
///
/// Parameters are stored as `[W0, b0, W1, b1, ...]` with `W_l` of shape
/// `out_l × in_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<Tensor>,
}

/// Parameters of an [`Mlp`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    params: Vec<Var>,
}

impl Bound {
    pub fn from_vars(params: Vec<Var>) -> Self {
        Bound { params }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// He-style uniform initialization: `W ~ U(-a, a)` with `a = sqrt(6 / fan_in)`,
    /// i.e. standard deviation `sqrt(2 / fan_in)`; biases are zero.
    pub fn init(seed: u64, layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(2 * (layer_sizes.len() - 1));
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::matrix(fan_out, fan_in, w)?);
            params.push(Tensor::zeros(&[fan_out])?);
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut params = Vec::new();
        for pair in layer_sizes.windows(2) {
            params.push(Tensor::zeros(&[pair[1], pair[0]])?);
            params.push(Tensor::zeros(&[pair[1]])?);
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let template = Mlp::zeros(layer_sizes, activation)?;
        if params.len() != template.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "mlp_params",
                    lhs: t.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            if !p.is_finite() {
                return Err(Error::InvalidArgument("non-finite parameter".into()));
            }
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Places the parameters on `g`, as trainable leaves or frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { params }
    }

    /// Differentiable forward pass of an `N × in` batch through bound parameters.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Var> {
        let cols = g.value(input).cols();
        if g.value(input).rank() != 2 || cols != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: cols,
            });
        }
        let mut h = input;
        for layer in 0..self.num_layers() {
            let wt = g.transpose(bound.params[2 * layer])?;
            let z = g.matmul(h, wt)?;
            let z = g.add(z, bound.params[2 * layer + 1])?;
            h = if layer + 1 < self.num_layers() {
                match self.activation {
                    Activation::Relu => g.relu(z)?,
                    Activation::Tanh => g.tanh(z)?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Graph-free forward pass of a single input vector.
    pub fn evaluate_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in 0..self.num_layers() {
            let w = self.weight(layer);
            let b = self.bias(layer).data();
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let last = layer + 1 == self.num_layers();
            h = (0..out)
                .map(|j| {
                    let mut acc = 0.0;
                    for t in 0..inp {
                        acc += h[t] * w.data()[j * inp + t];
                    }
                    let z = acc + b[j];
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
        }
        h
    }

    /// Graph-free forward pass of an `N × in` batch.
    pub fn evaluate(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.rank() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: batch.cols(),
            });
        }
        let mut data = Vec::with_capacity(batch.rows() * self.output_dim());
        for r in 0..batch.rows() {
            data.extend(self.evaluate_row(batch.row(r)));
        }
        Tensor::matrix(batch.rows(), self.output_dim(), data)
    }

    /// Textual checkpoint: activation, layer sizes, then one line per
    /// parameter tensor with 17 significant digits per value.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# frob mlp checkpoint v1\n");
        let _ = writeln!(s, "activation {}", self.activation.name());
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "layers {}", sizes.join(" "));
        for (i, p) in self.params.iter().enumerate() {
            let tag = if i % 2 == 0 { 'w' } else { 'b' };
            let _ = write!(s, "{tag}{}", i / 2);
            for v in p.data() {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "<checkpoint>".into(),
            line,
            message,
        };
        let mut activation = None;
        let mut sizes: Option<Vec<usize>> = None;
        let mut params = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap_or_default();
            match key {
                "activation" => {
                    let name = fields.next().unwrap_or_default();
                    activation = Some(
                        Activation::parse(name)
                            .ok_or_else(|| bad(lineno, format!("unknown activation `{name}`")))?,
                    );
                }
                "layers" => {
                    let parsed: std::result::Result<Vec<usize>, _> =
                        fields.map(str::parse).collect();
                    sizes = Some(parsed.map_err(|e| bad(lineno, e.to_string()))?);
                }
                _ if key.starts_with('w') || key.starts_with('b') => {
                    let sizes = sizes
                        .as_ref()
                        .ok_or_else(|| bad(lineno, "parameters before `layers`".into()))?;
                    let values: std::result::Result<Vec<f64>, _> =
                        fields.map(str::parse).collect();
                    let values = values.map_err(|e| bad(lineno, e.to_string()))?;
                    let layer = params.len() / 2;
                    if layer + 1 >= sizes.len() {
                        return Err(bad(lineno, "too many parameter lines".into()));
                    }
                    let shape = if params.len() % 2 == 0 {
                        vec![sizes[layer + 1], sizes[layer]]
                    } else {
                        vec![sizes[layer + 1]]
                    };
                    params.push(
                        Tensor::new(shape, values).map_err(|e| bad(lineno, e.to_string()))?,
                    );
                }
                other => return Err(bad(lineno, format!("unexpected record `{other}`"))),
            }
        }
        let activation = activation.ok_or_else(|| bad(0, "missing activation".into()))?;
        let sizes = sizes.ok_or_else(|| bad(0, "missing layers".into()))?;
        Mlp::from_params(&sizes, activation, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mlp::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

/// The discriminative model producing K logits per input.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    net: Mlp,
}

impl MlpClassifier {
    pub fn init(seed: u64, layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Ok(MlpClassifier {
            net: Mlp::init(seed, layer_sizes, activation)?,
        })
    }

    pub fn new(net: Mlp) -> Self {
        MlpClassifier { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.net.bind(g, trainable)
    }

    /// Differentiable logits, `N × K`.
    pub fn forward_logits(&self, g: &mut Graph, bound: &Bound, batch: Var) -> Result<Var> {
        self.net.forward(g, bound, batch)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.net.evaluate(batch)
    }
}

/// Standard-normal latent draws, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    values: Tensor,
    seed: u64,
}

impl LatentBatch {
    /// Draws `n × latent_dim` standard normals from a seeded ChaCha8 stream
    /// (ziggurat sampling via `rand_distr::StandardNormal`).
    pub fn sample(seed: u64, n: usize, latent_dim: usize) -> Result<Self> {
        if n == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent batch needs n ≥ 1 and dim ≥ 1, got {n}×{latent_dim}"
            )));
        }
        let mut rng = rng::seeded(seed);
        let data = (0..n * latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(LatentBatch {
            values: Tensor::matrix(n, latent_dim, data)?,
            seed,
        })
    }

    pub fn from_tensor(values: Tensor, seed: u64) -> Result<Self> {
        if values.rank() != 2 || !values.is_finite() {
            return Err(Error::InvalidArgument(
                "latents must be a finite matrix".into(),
            ));
        }
        Ok(LatentBatch { values, seed })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Generator mapping latents to data space.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGenerator {
    net: Mlp,
}

impl BoundaryGenerator {
    pub fn init(seed: u64, layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Ok(BoundaryGenerator {
            net: Mlp::init(seed, layer_sizes, activation)?,
        })
    }

    pub fn new(net: Mlp) -> Self {
        BoundaryGenerator { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.net.bind(g, trainable)
    }

    /// Differentiable generation of `N × d` samples from bound parameters.
    pub fn generate_on(&self, g: &mut Graph, bound: &Bound, latents: Var) -> Result<Var> {
        self.net.forward(g, bound, latents)
    }

    pub fn generate(&self, latents: &LatentBatch) -> Result<Tensor> {
        self.net.evaluate(latents.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check_many;

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(7, &[2, 16, 3], Activation::Relu).unwrap();
        let b = Mlp::init(7, &[2, 16, 3], Activation::Relu).unwrap();
        assert_eq!(a, b);
        let c = Mlp::init(8, &[2, 16, 3], Activation::Relu).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weight_shapes() {
        let m = Mlp::init(1, &[2, 16, 3], Activation::Relu).unwrap();
        assert_eq!(m.weight(0).shape(), &[16, 2]);
        assert_eq!(m.weight(1).shape(), &[3, 16]);
        assert_eq!(m.bias(1).data(), &[0.0; 3]);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(Mlp::init(1, &[], Activation::Relu).is_err());
        assert!(Mlp::init(1, &[3], Activation::Relu).is_err());
        assert!(Mlp::init(1, &[3, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn weight_mean_is_centered() {
        let fan_in = 100;
        let m = Mlp::init(3, &[fan_in, 100], Activation::Relu).unwrap();
        let w = m.weight(0).data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let scale = (2.0 / fan_in as f64).sqrt();
        assert!(mean.abs() < 0.05 * scale, "mean {mean}");
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() / scale - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let clf = MlpClassifier::new(Mlp::zeros(&[2, 8, 3], Activation::Relu).unwrap());
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(clf.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let net = Mlp::from_params(
            &[2, 2],
            Activation::Relu,
            vec![Tensor::identity(2).unwrap(), Tensor::zeros(&[2]).unwrap()],
        )
        .unwrap();
        let clf = MlpClassifier::new(net.clone());
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(clf.logits(&x).unwrap().data(), &[3.0, 4.0]);

        let gen = BoundaryGenerator::new(net);
        let z = LatentBatch::sample(4, 6, 2).unwrap();
        assert_eq!(gen.generate(&z).unwrap(), *z.values());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let gen = BoundaryGenerator::new(Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap());
        let z = LatentBatch::sample(1, 5, 3).unwrap();
        let out = gen.generate(&z).unwrap();
        assert_eq!(out.shape(), &[5, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        for act in [Activation::Relu, Activation::Tanh] {
            let clf = MlpClassifier::init(11, &[3, 7, 5, 4], act).unwrap();
            let x = LatentBatch::sample(2, 9, 3).unwrap();
            let mut g = Graph::new();
            let b = clf.bind(&mut g, false);
            let xv = g.constant(x.values().clone());
            let y = clf.forward_logits(&mut g, &b, xv).unwrap();
            assert_eq!(g.value(y), &clf.logits(x.values()).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let clf = MlpClassifier::init(1, &[3, 4, 2], Activation::Relu).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(clf.logits(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_gradients_check() {
        let clf = MlpClassifier::init(5, &[3, 6, 4], Activation::Tanh).unwrap();
        let x = LatentBatch::sample(6, 4, 3).unwrap().values().clone();
        let report = grad_check_many(
            |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let xv = g.constant(x.clone());
                let y = clf.forward_logits(g, &bound, xv)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            clf.net().params(),
            1e-5,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::init(99, &[2, 5, 3], Activation::Tanh).unwrap();
        let text = m.to_text();
        let back = Mlp::from_text(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.to_text(), text);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_wrong_counts() {
        let m = Mlp::init(1, &[2, 3], Activation::Relu).unwrap();
        let text = m.to_text().replace("layers 2 3", "layers 2 4");
        assert!(Mlp::from_text(&text).is_err());
    }

    #[test]
    fn latent_sampling_is_seeded() {
        let a = LatentBatch::sample(3, 10, 2).unwrap();
        let b = LatentBatch::sample(3, 10, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed(), 3);
    }
}
