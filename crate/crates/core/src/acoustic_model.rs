//! Small feed-forward acoustic model. The output layer is linear and its
//! values are used directly as pseudo log-likelihoods.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward_backward::LogLikes;
use crate::textio::{expect_arity, field, fmt_f64, records};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::Config(format!("unknown nonlinearity `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient (or velocity) buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NetGradients {
    pub fn zeros_like(net: &ToyNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &NetGradients, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(factor, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(factor, b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

impl ToyNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invariant("network", "no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "layer bias",
                    expected: l.weights.nrows(),
                    actual: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "layer input width",
                    expected: layers[i - 1].weights.nrows(),
                    actual: l.weights.ncols(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Tanh hidden layers and a linear output layer, weights and biases
    /// uniform in `+-1/sqrt(fan_in)`.
    pub fn random(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..bound)),
                    activation: if i + 2 == dims.len() { Activation::Linear } else { Activation::Tanh },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: self.input_dim(),
                actual: features.ncols(),
            });
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn activations(&self, features: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.clone());
        for l in &self.layers {
            let mut z = acts.last().expect("nonempty").dot(&l.weights.t());
            z += &l.bias;
            if l.activation == Activation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    /// `T x D` features to `T x J` pseudo log-likelihoods.
    pub fn forward(&self, features: &Array2<f64>) -> Result<LogLikes> {
        self.check_input(features)?;
        LogLikes::new(self.activations(features).pop().expect("nonempty"))
    }

    /// Gradient of `sum_{t,j} grad_out(t, j) * out(t, j)` with respect to every
    /// parameter.
    pub fn backward(&self, features: &Array2<f64>, grad_out: &Array2<f64>) -> Result<NetGradients> {
        self.check_input(features)?;
        if grad_out.dim() != (features.nrows(), self.output_dim()) {
            return Err(Error::DimensionMismatch {
                what: "output gradient",
                expected: features.nrows() * self.output_dim(),
                actual: grad_out.len(),
            });
        }
        let acts = self.activations(features);
        let mut grads = NetGradients::zeros_like(self);
        let mut upstream = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Tanh {
                Zip::from(&mut upstream).and(&acts[i + 1]).for_each(|g, &h| *g *= 1.0 - h * h);
            }
            grads.weights[i] = upstream.t().dot(&acts[i]);
            grads.biases[i] = upstream.sum_axis(Axis(0));
            if i > 0 {
                upstream = upstream.dot(&l.weights);
            }
        }
        Ok(grads)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("NET {} {} {}\n", self.input_dim(), self.output_dim(), self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "L {} {} {}", l.weights.nrows(), l.weights.ncols(), l.activation);
            for row in l.weights.rows() {
                let vals: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
            let vals: Vec<String> = l.bias.iter().map(|&x| fmt_f64(x)).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut recs = records(text);
        let (line, header) = recs.next().ok_or_else(|| Error::parse(1, "empty model file"))?;
        if header[0] != "NET" {
            return Err(Error::parse(line, "expected `NET <D> <J> <n_layers>` header"));
        }
        expect_arity(&header, 4, line)?;
        let input_dim: usize = field(&header, 1, line, "D")?;
        let output_dim: usize = field(&header, 2, line, "J")?;
        let n_layers: usize = field(&header, 3, line, "n_layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        let numbers = |line: usize, f: &[&str], n: usize| -> Result<Vec<f64>> {
            if f.len() != n {
                return Err(Error::parse(line, format!("expected {n} values, found {}", f.len())));
            }
            (0..n).map(|k| field(f, k, line, "value")).collect()
        };
        for _ in 0..n_layers {
            let (line, f) = recs.next().ok_or_else(|| Error::parse(0, "truncated model file"))?;
            if f[0] != "L" {
                return Err(Error::parse(line, "expected `L <rows> <cols> <nonlinearity>`"));
            }
            expect_arity(&f, 4, line)?;
            let rows: usize = field(&f, 1, line, "rows")?;
            let cols: usize = field(&f, 2, line, "cols")?;
            let activation: Activation = f[3].parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (line, f) = recs.next().ok_or_else(|| Error::parse(0, "truncated weight matrix"))?;
                w.extend(numbers(line, &f, cols)?);
            }
            let (line, f) = recs.next().ok_or_else(|| Error::parse(0, "missing bias line"))?;
            let bias = Array1::from(numbers(line, &f, rows)?);
            layers.push(Layer {
                weights: Array2::from_shape_vec((rows, cols), w).expect("sized above"),
                bias,
                activation,
            });
        }
        if let Some((line, _)) = recs.next() {
            return Err(Error::parse(line, "trailing data after last layer"));
        }
        let net = Self::new(layers)?;
        if net.input_dim() != input_dim || net.output_dim() != output_dim {
            return Err(Error::parse(1, "header dimensions disagree with layers"));
        }
        Ok(net)
    }
}

/// `lr(k) = initial * (final / initial)^(k / total)`, held at `final` past
/// the end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub total_updates: usize,
}

impl LrSchedule {
    pub fn lr(&self, update: usize) -> f64 {
        if self.total_updates == 0 || self.initial_lr == 0.0 || self.final_lr == 0.0 {
            return if update >= self.total_updates && self.total_updates > 0 { self.final_lr } else { self.initial_lr };
        }
        let frac = (update.min(self.total_updates)) as f64 / self.total_updates as f64;
        self.initial_lr * (self.final_lr / self.initial_lr).powf(frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// Momentum gradient ascent with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub max_grad_norm: f64,
    velocity: Option<NetGradients>,
}

impl Sgd {
    pub fn new(momentum: f64, max_grad_norm: f64) -> Self {
        Self {
            momentum,
            max_grad_norm,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut ToyNet, grads: &NetGradients, lr: f64) -> StepReport {
        let grad_norm = grads.norm();
        if !grads.is_finite() {
            warn!("non-finite gradient, skipping update");
            return StepReport {
                grad_norm,
                clipped: false,
                skipped: true,
            };
        }
        let mut g = grads.clone();
        let clipped = self.max_grad_norm > 0.0 && grad_norm > self.max_grad_norm;
        if clipped {
            g.scale(self.max_grad_norm / grad_norm);
        }
        let v = self.velocity.get_or_insert_with(|| NetGradients::zeros_like(net));
        v.scale(self.momentum);
        v.add_scaled(&g, 1.0);
        for (l, (dw, db)) in net.layers.iter_mut().zip(v.weights.iter().zip(&v.biases)) {
            l.weights.scaled_add(lr, dw);
            l.bias.scaled_add(lr, db);
        }
        StepReport {
            grad_norm,
            clipped,
            skipped: false,
        }
    }
}

/// One stateless step: ascent with momentum buffer `velocity` (updated in place).
pub fn sgd_step(
    net: &mut ToyNet,
    grads: &NetGradients,
    lr: f64,
    momentum: f64,
    max_grad_norm: f64,
    velocity: &mut Option<NetGradients>,
) -> StepReport {
    let mut opt = Sgd {
        momentum,
        max_grad_norm,
        velocity: velocity.take(),
    };
    let report = opt.step(net, grads, lr);
    *velocity = opt.velocity;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_net() -> ToyNet {
        ToyNet::random(3, &[5, 4], 4, 11)
    }

    fn features() -> Array2<f64> {
        Array2::from_shape_fn((5, 3), |(t, d)| ((t * 7 + d * 3) % 5) as f64 * 0.4 - 0.8)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut net = small_net();
        for l in net.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = net.forward(&features()).unwrap();
        assert!(out.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let net = ToyNet::new(vec![Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Linear,
        }])
        .unwrap();
        assert_eq!(net.forward(&features()).unwrap().values(), &features());
    }

    #[test]
    fn frame_permutation_equivariance() {
        let net = small_net();
        let x = features();
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select(Axis(0), &perm);
        let y = net.forward(&x).unwrap().into_inner();
        assert_eq!(net.forward(&xp).unwrap().into_inner(), y.select(Axis(0), &perm));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = small_net();
        let x = features();
        let g = Array2::from_shape_fn((5, 4), |(t, j)| ((t + 2 * j) % 3) as f64 - 1.0 + 0.1 * j as f64);
        let analytic = net.backward(&x, &g).unwrap().flatten();
        let loss = |n: &ToyNet| (n.forward(&x).unwrap().into_inner() * &g).sum();
        let h = 1e-5;
        let mut k = 0;
        for li in 0..net.layers().len() {
            let (rows, cols) = net.layers()[li].weights.dim();
            let mut probe = |edit: &dyn Fn(&mut ToyNet, f64)| {
                let mut plus = net.clone();
                edit(&mut plus, h);
                let mut minus = net.clone();
                edit(&mut minus, -h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(crate::relative_error(analytic[k], fd) < 1e-6, "param {k}: {} vs {fd}", analytic[k]);
                k += 1;
            };
            for r in 0..rows {
                for c in 0..cols {
                    probe(&|n, d| n.layers_mut()[li].weights[[r, c]] += d);
                }
            }
        }
        for li in 0..net.layers().len() {
            for r in 0..net.layers()[li].bias.len() {
                let mut plus = net.clone();
                plus.layers_mut()[li].bias[r] += h;
                let mut minus = net.clone();
                minus.layers_mut()[li].bias[r] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(crate::relative_error(analytic[k], fd) < 1e-6);
                k += 1;
            }
        }
        assert_eq!(k, net.num_params());
    }

    #[test]
    fn backward_is_linear_and_zero_preserving() {
        let net = small_net();
        let x = features();
        let g1 = Array2::from_shape_fn((5, 4), |(t, j)| (t as f64 - j as f64) * 0.3);
        let g2 = Array2::from_shape_fn((5, 4), |(t, j)| ((t * j) % 3) as f64 - 0.5);
        let zero = net.backward(&x, &Array2::zeros((5, 4))).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        let combo = net.backward(&x, &(&g1 * 2.0 - &g2 * 0.5)).unwrap().flatten();
        let a = net.backward(&x, &g1).unwrap().flatten();
        let b = net.backward(&x, &g2).unwrap().flatten();
        for (i, c) in combo.iter().enumerate() {
            assert!((c - (2.0 * a[i] - 0.5 * b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rules() {
        let mut net = ToyNet::new(vec![Layer {
            weights: array![[1.0]],
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let mut grads = NetGradients::zeros_like(&net);
        grads.weights[0][[0, 0]] = 2.0;
        let mut velocity = None;
        sgd_step(&mut net, &grads, 0.0, 0.9, 5.0, &mut velocity);
        assert_eq!(net.layers()[0].weights[[0, 0]], 1.0);
        let mut velocity = None;
        sgd_step(&mut net, &grads, 0.1, 0.0, 5.0, &mut velocity);
        assert!((net.layers()[0].weights[[0, 0]] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn clipping_halves_norm_ten() {
        let mut net = ToyNet::new(vec![Layer {
            weights: array![[0.0, 0.0]],
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let mut grads = NetGradients::zeros_like(&net);
        grads.weights[0] = array![[6.0, 8.0]];
        let report = Sgd::new(0.0, 5.0).step(&mut net, &grads, 1.0);
        assert!(report.clipped);
        assert_eq!(report.grad_norm, 10.0);
        assert_eq!(net.layers()[0].weights, array![[3.0, 4.0]]);
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut net = small_net();
        let before = net.clone();
        let mut grads = NetGradients::zeros_like(&net);
        grads.biases[0][0] = f64::NAN;
        let report = Sgd::new(0.9, 5.0).step(&mut net, &grads, 0.1);
        assert!(report.skipped);
        assert_eq!(net, before);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule {
            initial_lr: 1e-3,
            final_lr: 1e-4,
            total_updates: 100,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(100) - 1e-4).abs() < 1e-18);
        assert!((s.lr(50) - 1e-3 * 0.1f64.sqrt()).abs() < 1e-15);
        assert!((1..=100).all(|k| s.lr(k) < s.lr(k - 1)));
        assert_eq!(s.lr(500), s.lr(100));
    }

    #[test]
    fn model_file_roundtrip() {
        let net = small_net();
        assert_eq!(ToyNet::from_text(&net.to_text()).unwrap(), net);
        let err = ToyNet::from_text("NET 1 1 1\nL 1 1 relu\n0\n0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
