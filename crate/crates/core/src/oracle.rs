//! Brute-force references for tiny instances: explicit path enumeration (each
//! leak jump is its own path step), explicit-sum objectives with numerical
//! gradients, dense-matrix recursions, and seeded random instances.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::acoustic_model::ToyNet;
use crate::criteria::{compute_with_reference, AccuracyModel, CriterionConfig, CriterionKind};
use crate::error::{Error, Result};
use crate::forward_backward::{numerator_forward_backward, LogLikes, Posteriors};
use crate::graphs::{Arc, DenominatorGraph, SupArc, Supervision};
use crate::relative_error;

pub const DEFAULT_PATH_CAP: usize = 200_000;

/// Central-difference step used by the numerical gradients.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Graph arc index; consumes one frame.
    Arc(usize),
    /// Leak jump to the given state; consumes nothing.
    Leak(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Initial state followed by the destination of every step.
    pub states: Vec<usize>,
    pub steps: Vec<Step>,
    /// One pdf per frame.
    pub pdfs: Vec<usize>,
    /// Log of initial, transition, leak and final weights; no emissions.
    pub log_weight: f64,
}

impl Path {
    /// `log_weight + sum_t (ll(t, pdf_t) + offset(t, pdf_t))`.
    pub fn score(&self, ll: &Array2<f64>, offsets: Option<&Array2<f64>>) -> f64 {
        self.pdfs.iter().enumerate().fold(self.log_weight, |acc, (t, &j)| {
            acc + ll[[t, j]] + offsets.map_or(0.0, |o| o[[t, j]])
        })
    }

    /// `sum_t acc(t, pdf_t)`.
    pub fn accuracy(&self, acc: &Array2<f64>) -> f64 {
        self.pdfs.iter().enumerate().map(|(t, &j)| acc[[t, j]]).sum()
    }
}

#[derive(Clone, Debug)]
pub struct PathEnumeration {
    pub num_frames: usize,
    pub paths: Vec<Path>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl PathEnumeration {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn log_total(&self, ll: &Array2<f64>, offsets: Option<&Array2<f64>>) -> f64 {
        let scores: Vec<f64> = self.paths.iter().map(|p| p.score(ll, offsets)).collect();
        log_sum_exp(&scores)
    }

    /// Normalised path posteriors.
    pub fn path_posteriors(&self, ll: &Array2<f64>, offsets: Option<&Array2<f64>>) -> Vec<f64> {
        let scores: Vec<f64> = self.paths.iter().map(|p| p.score(ll, offsets)).collect();
        let z = log_sum_exp(&scores);
        scores.iter().map(|s| (s - z).exp()).collect()
    }

    pub fn occupancies(&self, ll: &Array2<f64>, offsets: Option<&Array2<f64>>) -> Array2<f64> {
        let mut gamma = Array2::zeros(ll.dim());
        for (p, w) in self.paths.iter().zip(self.path_posteriors(ll, offsets)) {
            for (t, &j) in p.pdfs.iter().enumerate() {
                gamma[[t, j]] += w;
            }
        }
        gamma
    }

    pub fn expected_accuracy(&self, ll: &Array2<f64>, acc: &Array2<f64>) -> f64 {
        self.paths
            .iter()
            .zip(self.path_posteriors(ll, None))
            .map(|(p, w)| w * p.accuracy(acc))
            .sum()
    }

    /// Expected path accuracy given pdf `j` at frame `t`; zero where no path
    /// has that pdf.
    pub fn conditional_accuracy(&self, ll: &Array2<f64>, acc: &Array2<f64>) -> Array2<f64> {
        let mut num = Array2::<f64>::zeros(ll.dim());
        let mut den = Array2::<f64>::zeros(ll.dim());
        for (p, w) in self.paths.iter().zip(self.path_posteriors(ll, None)) {
            let a = p.accuracy(acc);
            for (t, &j) in p.pdfs.iter().enumerate() {
                num[[t, j]] += w * a;
                den[[t, j]] += w;
            }
        }
        ndarray::Zip::from(&mut num).and(&den).for_each(|n, &d| *n = if d > 0.0 { *n / d } else { 0.0 });
        num
    }

    /// Highest-scoring path, first one on ties.
    pub fn best(&self, ll: &Array2<f64>) -> Option<(&Path, f64)> {
        let mut best: Option<(&Path, f64)> = None;
        for p in &self.paths {
            let s = p.score(ll, None);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        best
    }
}

struct DenWalker<'a> {
    graph: &'a DenominatorGraph,
    num_frames: usize,
    leak: f64,
    cap: usize,
    paths: Vec<Path>,
    cur: Path,
}

impl DenWalker<'_> {
    /// At a frame boundary: optionally take one leak jump, then continue.
    fn boundary(&mut self, t: usize, s: usize) -> Result<()> {
        self.advance(t, s)?;
        if self.leak > 0.0 {
            for b in 0..self.graph.num_states() {
                let p0 = self.graph.initial()[b];
                if p0 > 0.0 {
                    let w = (self.leak * p0).ln();
                    self.cur.steps.push(Step::Leak(b));
                    self.cur.states.push(b);
                    self.cur.log_weight += w;
                    let r = self.advance(t, b);
                    self.cur.log_weight -= w;
                    self.cur.states.pop();
                    self.cur.steps.pop();
                    r?;
                }
            }
        }
        Ok(())
    }

    fn advance(&mut self, t: usize, s: usize) -> Result<()> {
        if t == self.num_frames {
            let f = self.graph.finals()[s];
            if f > 0.0 {
                if self.paths.len() >= self.cap {
                    return Err(Error::CapExceeded { cap: self.cap });
                }
                let mut p = self.cur.clone();
                p.log_weight += f.ln();
                self.paths.push(p);
            }
            return Ok(());
        }
        for &a in self.graph.outgoing(s) {
            let arc = self.graph.arcs()[a];
            self.cur.steps.push(Step::Arc(a));
            self.cur.states.push(arc.dst);
            self.cur.pdfs.push(arc.pdf);
            self.cur.log_weight += arc.log_prob;
            let r = self.boundary(t + 1, arc.dst);
            self.cur.log_weight -= arc.log_prob;
            self.cur.pdfs.pop();
            self.cur.states.pop();
            self.cur.steps.pop();
            r?;
        }
        Ok(())
    }
}

/// Every complete path of exactly `num_frames` frames through `graph`, with
/// leak jumps of weight `leak * P0(b)` allowed at each of the `T + 1` frame
/// boundaries.
pub fn enumerate_paths(graph: &DenominatorGraph, num_frames: usize, leak: f64, cap: usize) -> Result<PathEnumeration> {
    let mut w = DenWalker {
        graph,
        num_frames,
        leak,
        cap,
        paths: Vec::new(),
        cur: Path {
            states: Vec::new(),
            steps: Vec::new(),
            pdfs: Vec::new(),
            log_weight: 0.0,
        },
    };
    for s in 0..graph.num_states() {
        let p0 = graph.initial()[s];
        if p0 > 0.0 {
            w.cur.states.push(s);
            w.cur.log_weight = p0.ln();
            w.boundary(0, s)?;
            w.cur.states.pop();
        }
    }
    Ok(PathEnumeration {
        num_frames,
        paths: w.paths,
    })
}

/// Every accepted arc sequence of a supervision; all weights are one.
pub fn enumerate_supervision(sup: &Supervision, cap: usize) -> Result<PathEnumeration> {
    let num_frames = sup.num_frames();
    let mut partial: Vec<Path> = sup
        .initial()
        .iter()
        .map(|&s| Path {
            states: vec![s],
            steps: Vec::new(),
            pdfs: Vec::new(),
            log_weight: 0.0,
        })
        .collect();
    for t in 0..num_frames {
        let mut next = Vec::new();
        for p in &partial {
            let s = *p.states.last().expect("nonempty");
            for (i, a) in sup.arcs(t).iter().enumerate().filter(|(_, a)| a.src == s) {
                if next.len() >= cap {
                    return Err(Error::CapExceeded { cap });
                }
                let mut q = p.clone();
                q.states.push(a.dst);
                q.steps.push(Step::Arc(i));
                q.pdfs.push(a.pdf);
                next.push(q);
            }
        }
        partial = next;
    }
    partial.retain(|p| sup.finals().contains(p.states.last().expect("nonempty")));
    Ok(PathEnumeration {
        num_frames,
        paths: partial,
    })
}

/// Objective and gradient computed from explicit path sums.
#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub objective: f64,
    /// Central finite differences of `objective`.
    pub grad: Array2<f64>,
    pub num_logprob: f64,
    pub den_logprob: f64,
    pub avg_accuracy: Option<f64>,
}

fn explicit_objective(
    den: &PathEnumeration,
    num: &PathEnumeration,
    ll: &Array2<f64>,
    cfg: &CriterionConfig,
    gamma_ref: &Posteriors,
) -> Result<(f64, f64, f64, Option<f64>)> {
    let num_lp = num.log_total(ll, None);
    let (value, den_lp, avg) = match cfg.kind {
        CriterionKind::Mmi | CriterionKind::Bmmi => {
            let offsets = (cfg.boost > 0.0).then(|| gamma_ref.values().mapv(|g| -cfg.boost * g));
            let den_lp = den.log_total(ll, offsets.as_ref());
            (num_lp - den_lp, den_lp, None)
        }
        CriterionKind::Smbr => {
            let acc = AccuracyModel::new(gamma_ref.clone(), &cfg.silence_pdfs, cfg.silence_scale)?.frame_accuracy();
            let avg = den.expected_accuracy(ll, &acc);
            (avg, den.log_total(ll, None), Some(avg))
        }
    };
    let mut xent = 0.0;
    if cfg.xent_smooth > 0.0 {
        for (t, row) in ll.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            for (j, &x) in row.iter().enumerate() {
                xent += cfg.xent_smooth * gamma_ref.get(t, j) * (x - lse);
            }
        }
    }
    Ok((value + xent, num_lp, den_lp, avg))
}

/// Criterion value by enumeration, gradient by central differences with the
/// numerator occupancies frozen at `ll`. The denominator is enumerated with
/// `cfg.leaky_coeff`.
pub fn oracle_criterion(
    den: &DenominatorGraph,
    sup: &Supervision,
    ll: &LogLikes,
    cfg: &CriterionConfig,
    cap: usize,
) -> Result<OracleOutput> {
    cfg.validate()?;
    let den_paths = enumerate_paths(den, ll.num_frames(), cfg.leaky_coeff, cap)?;
    let num_paths = enumerate_supervision(sup, cap)?;
    let x = ll.values();
    let gamma_ref = Posteriors::new(num_paths.occupancies(x, None))?;
    let (objective, num_logprob, den_logprob, avg_accuracy) =
        explicit_objective(&den_paths, &num_paths, x, cfg, &gamma_ref)?;
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for t in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = probe[[t, j]];
            probe[[t, j]] = orig + FD_STEP;
            let plus = explicit_objective(&den_paths, &num_paths, &probe, cfg, &gamma_ref)?.0;
            probe[[t, j]] = orig - FD_STEP;
            let minus = explicit_objective(&den_paths, &num_paths, &probe, cfg, &gamma_ref)?.0;
            probe[[t, j]] = orig;
            grad[[t, j]] = (plus - minus) / (2.0 * FD_STEP);
        }
    }
    Ok(OracleOutput {
        objective,
        grad,
        num_logprob,
        den_logprob,
        avg_accuracy,
    })
}

/// Unscaled forward-backward with dense `S x S` transition matrices and the
/// leak applied as an explicit dense matrix `I + lambda * P0 * 1^T`.
#[derive(Clone, Debug)]
pub struct DenseRecursions {
    /// `(T + 1) x S`.
    pub alpha: Array2<f64>,
    /// `(T + 1) x S`.
    pub beta: Array2<f64>,
    pub total: f64,
    /// `T x J`.
    pub gamma: Array2<f64>,
}

pub fn dense_forward_backward(
    graph: &DenominatorGraph,
    ll: &Array2<f64>,
    offsets: Option<&Array2<f64>>,
    leak: f64,
) -> DenseRecursions {
    let (num_frames, num_pdfs) = ll.dim();
    let n = graph.num_states();
    let p0 = Array1::from(graph.initial().to_vec());
    let finals = Array1::from(graph.finals().to_vec());
    let mut k = Array2::<f64>::eye(n);
    for b in 0..n {
        for s in 0..n {
            k[[b, s]] += leak * p0[b];
        }
    }
    let lik = |t: usize, j: usize| (ll[[t, j]] + offsets.map_or(0.0, |o| o[[t, j]])).exp();
    let trans: Vec<Array2<f64>> = (0..num_frames)
        .map(|t| {
            let mut m = Array2::<f64>::zeros((n, n));
            for (a, arc) in graph.arcs().iter().enumerate() {
                m[[arc.src, arc.dst]] += graph.arc_probs()[a] * lik(t, arc.pdf);
            }
            m
        })
        .collect();
    let mut alpha = Array2::zeros((num_frames + 1, n));
    alpha.row_mut(0).assign(&k.dot(&p0));
    for t in 1..=num_frames {
        let next = k.dot(&trans[t - 1].t().dot(&alpha.row(t - 1)));
        alpha.row_mut(t).assign(&next);
    }
    let mut beta = Array2::zeros((num_frames + 1, n));
    beta.row_mut(num_frames).assign(&finals);
    for t in (1..=num_frames).rev() {
        let prev = trans[t - 1].dot(&k.t().dot(&beta.row(t)));
        beta.row_mut(t - 1).assign(&prev);
    }
    let total = alpha.row(num_frames).dot(&finals);
    let mut gamma = Array2::zeros((num_frames, num_pdfs));
    for t in 1..=num_frames {
        let post = k.t().dot(&beta.row(t));
        for (a, arc) in graph.arcs().iter().enumerate() {
            gamma[[t - 1, arc.pdf]] +=
                alpha[[t - 1, arc.src]] * graph.arc_probs()[a] * lik(t - 1, arc.pdf) * post[arc.dst] / total;
        }
    }
    DenseRecursions {
        alpha,
        beta,
        total,
        gamma,
    }
}

/// Size limits for random instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceShape {
    pub states: (usize, usize),
    pub pdfs: (usize, usize),
    pub frames: (usize, usize),
    /// Most states with nonzero initial probability.
    pub max_initial: usize,
    /// Most outgoing arcs per state.
    pub max_out_degree: usize,
    pub max_layer_width: usize,
}

impl InstanceShape {
    /// Small enough that non-leaky enumeration stays in the low thousands.
    pub fn plain() -> Self {
        Self {
            states: (1, 6),
            pdfs: (2, 5),
            frames: (1, 6),
            max_initial: 2,
            max_out_degree: 3,
            max_layer_width: 2,
        }
    }

    /// Leak jumps multiply the path count per boundary, so fewer frames.
    pub fn leaky() -> Self {
        Self {
            states: (1, 4),
            pdfs: (2, 5),
            frames: (1, 4),
            max_initial: 2,
            max_out_degree: 3,
            max_layer_width: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleInstance {
    pub den: DenominatorGraph,
    pub sup: Supervision,
    pub ll: LogLikes,
    pub silence_pdfs: Vec<usize>,
}

fn random_graph(rng: &mut impl Rng, shape: &InstanceShape, num_pdfs: usize, leak: f64) -> DenominatorGraph {
    let n = rng.random_range(shape.states.0..=shape.states.1);
    let mut arcs = Vec::new();
    for s in 0..n {
        let degree = rng.random_range(1..=shape.max_out_degree);
        // A chain arc keeps every state reachable and co-reachable.
        let mut dsts = vec![if s + 1 < n { s + 1 } else { s }];
        while dsts.len() < degree {
            dsts.push(rng.random_range(0..n));
        }
        for dst in dsts {
            arcs.push(Arc {
                src: s,
                dst,
                pdf: rng.random_range(0..num_pdfs),
                log_prob: rng.random_range(0.2f64..1.0).ln(),
            });
        }
    }
    let k = rng.random_range(1..=shape.max_initial.min(n));
    let mut initial = vec![0.0; n];
    initial[0] = rng.random_range(0.2..1.0);
    for _ in 1..k {
        initial[rng.random_range(0..n)] += rng.random_range(0.2..1.0);
    }
    let total: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|p| *p /= total);
    let finals = (0..n)
        .map(|s| if s + 1 == n || rng.random_bool(0.4) { rng.random_range(0.2..1.0) } else { 0.0 })
        .collect();
    DenominatorGraph::new(n, num_pdfs, arcs, initial, finals, leak).expect("chain construction is connected")
}

fn random_supervision(rng: &mut impl Rng, shape: &InstanceShape, num_frames: usize, num_pdfs: usize) -> Supervision {
    let mut widths = vec![1];
    widths.extend((0..num_frames).map(|_| rng.random_range(1..=shape.max_layer_width)));
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let mut arcs: Vec<SupArc> = (0..widths[t + 1])
            .map(|dst| SupArc {
                src: rng.random_range(0..widths[t]),
                dst,
                pdf: rng.random_range(0..num_pdfs),
            })
            .collect();
        for src in 0..widths[t] {
            if !arcs.iter().any(|a| a.src == src) || rng.random_bool(0.3) {
                arcs.push(SupArc {
                    src,
                    dst: rng.random_range(0..widths[t + 1]),
                    pdf: rng.random_range(0..num_pdfs),
                });
            }
        }
        frames.push(arcs);
    }
    Supervision::new("rand", frames, vec![0], (0..widths[num_frames]).collect()).expect("every state has arcs both ways")
}

/// Random graph, supervision and log-likelihoods. Pdf 0 is silence. Retries
/// until the graph has a complete non-leaky path of the drawn length.
pub fn random_instance(rng: &mut impl Rng, shape: &InstanceShape, leak: f64) -> OracleInstance {
    let normal = Normal::new(0.0, 1.5).expect("valid sigma");
    loop {
        let num_pdfs = rng.random_range(shape.pdfs.0..=shape.pdfs.1);
        let num_frames = rng.random_range(shape.frames.0..=shape.frames.1);
        let den = random_graph(rng, shape, num_pdfs, leak);
        let ll = Array2::from_shape_simple_fn((num_frames, num_pdfs), || normal.sample(rng));
        if dense_forward_backward(&den, &ll, None, 0.0).total <= 0.0 {
            continue;
        }
        let sup = random_supervision(rng, shape, num_frames, num_pdfs);
        return OracleInstance {
            den,
            sup,
            ll: LogLikes::new(ll).expect("finite draws"),
            silence_pdfs: vec![0],
        };
    }
}

#[derive(Clone, Debug)]
pub struct OracleCheckConfig {
    pub seed: u64,
    /// Instances per criterion and leak setting.
    pub instances: usize,
    pub leaky_coeff: f64,
    pub boost: f64,
    pub silence_scale: f64,
    pub xent_smooth: f64,
    pub objective_tol: f64,
    pub grad_tol: f64,
    pub cap: usize,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            leaky_coeff: 0.1,
            boost: 0.2,
            silence_scale: 0.013,
            xent_smooth: 0.0,
            objective_tol: 1e-9,
            grad_tol: 1e-5,
            cap: DEFAULT_PATH_CAP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleCheckResult {
    pub kind: CriterionKind,
    pub leaky_coeff: f64,
    pub instances: usize,
    pub max_objective_err: f64,
    pub max_grad_err: f64,
    pub passed: bool,
}

/// Compares the recursive criteria with [`oracle_criterion`] on random
/// instances, once without leak and once with `cfg.leaky_coeff`.
pub fn oracle_check(cfg: &OracleCheckConfig) -> Result<Vec<OracleCheckResult>> {
    let mut results = Vec::new();
    for kind in [CriterionKind::Mmi, CriterionKind::Bmmi, CriterionKind::Smbr] {
        for leak in [0.0, cfg.leaky_coeff] {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((kind as u64) << 32) ^ u64::from(leak > 0.0));
            let shape = if leak > 0.0 { InstanceShape::leaky() } else { InstanceShape::plain() };
            let crit = CriterionConfig {
                kind,
                boost: if kind == CriterionKind::Bmmi { cfg.boost } else { 0.0 },
                silence_scale: if kind == CriterionKind::Smbr { cfg.silence_scale } else { 1.0 },
                leaky_coeff: leak,
                xent_smooth: cfg.xent_smooth,
                silence_pdfs: vec![0],
            };
            let mut max_obj: f64 = 0.0;
            let mut max_grad: f64 = 0.0;
            for _ in 0..cfg.instances {
                let inst = random_instance(&mut rng, &shape, leak);
                let got = compute_with_reference(&inst.den, &inst.sup, &inst.ll, &crit, None)?;
                let want = oracle_criterion(&inst.den, &inst.sup, &inst.ll, &crit, cfg.cap)?;
                max_obj = max_obj.max(relative_error(got.objective, want.objective));
                for (a, b) in got.grad.iter().zip(&want.grad) {
                    max_grad = max_grad.max(relative_error(*a, *b));
                }
            }
            results.push(OracleCheckResult {
                kind,
                leaky_coeff: leak,
                instances: cfg.instances,
                max_objective_err: max_obj,
                max_grad_err: max_grad,
                passed: max_obj <= cfg.objective_tol && max_grad <= cfg.grad_tol,
            });
        }
    }
    Ok(results)
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub kind: CriterionKind,
    pub instances: usize,
    pub params_checked: usize,
    pub max_rel_err: f64,
}

/// End-to-end check of network backprop composed with a criterion gradient:
/// every parameter of a small net (D=3, J=4, T=5) is perturbed by
/// `+-FD_STEP` with the numerator occupancies frozen.
pub fn net_gradient_check(cfg: &CriterionConfig, seed: u64, instances: usize) -> Result<GradCheckResult> {
    let shape = InstanceShape {
        states: (2, 6),
        pdfs: (4, 4),
        frames: (5, 5),
        max_initial: 2,
        max_out_degree: 3,
        max_layer_width: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut max_err: f64 = 0.0;
    let mut params_checked = 0;
    for i in 0..instances {
        let inst = random_instance(&mut rng, &shape, cfg.leaky_coeff);
        let net = ToyNet::random(3, &[6], 4, seed.wrapping_add(i as u64));
        let x = Array2::from_shape_simple_fn((5, 3), || normal.sample(&mut rng));
        let ll = net.forward(&x)?;
        let gamma_ref = numerator_forward_backward(&inst.sup, &ll)?.gamma;
        let out = compute_with_reference(&inst.den, &inst.sup, &ll, cfg, Some(&gamma_ref))?;
        let analytic = net.backward(&x, &out.grad)?.flatten();
        let objective = |n: &ToyNet| -> Result<f64> {
            Ok(compute_with_reference(&inst.den, &inst.sup, &n.forward(&x)?, cfg, Some(&gamma_ref))?.objective)
        };
        let mut k = 0;
        let mut check = |edit: &dyn Fn(&mut ToyNet, f64)| -> Result<()> {
            let mut plus = net.clone();
            edit(&mut plus, FD_STEP);
            let mut minus = net.clone();
            edit(&mut minus, -FD_STEP);
            let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic[k], fd));
            k += 1;
            Ok(())
        };
        let layers = net.layers().len();
        for li in 0..layers {
            let (rows, cols) = net.layers()[li].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    check(&|n, d| n.layers_mut()[li].weights[[r, c]] += d)?;
                }
            }
        }
        for li in 0..layers {
            for r in 0..net.layers()[li].bias.len() {
                check(&|n, d| n.layers_mut()[li].bias[r] += d)?;
            }
        }
        params_checked += k;
    }
    Ok(GradCheckResult {
        kind: cfg.kind,
        instances,
        params_checked,
        max_rel_err: max_err,
    })
}

/// Convenience for tests and the CLI: a seeded rng.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_state() -> DenominatorGraph {
        let arcs = vec![
            Arc { src: 0, dst: 0, pdf: 0, log_prob: 0.5f64.ln() },
            Arc { src: 0, dst: 1, pdf: 1, log_prob: 0.5f64.ln() },
            Arc { src: 1, dst: 0, pdf: 0, log_prob: 0.5f64.ln() },
            Arc { src: 1, dst: 1, pdf: 1, log_prob: 0.5f64.ln() },
        ];
        DenominatorGraph::new(2, 2, arcs, vec![1.0, 0.0], vec![1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn fully_connected_count() {
        let e = enumerate_paths(&two_state(), 3, 0.0, DEFAULT_PATH_CAP).unwrap();
        assert_eq!(e.len(), 8);
        let zero = Array2::zeros((3, 2));
        assert!((e.log_total(&zero, None) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn leak_adds_jump_paths() {
        // One initial state, so each of the T + 1 boundaries doubles the count.
        let e = enumerate_paths(&two_state(), 2, 0.1, DEFAULT_PATH_CAP).unwrap();
        assert_eq!(e.len(), 4 * 8);
        assert!(e.paths.iter().any(|p| p.steps.contains(&Step::Leak(0))));
        let zero = Array2::zeros((2, 2));
        // Every boundary multiplies the mass by 1 + lambda.
        assert!((e.log_total(&zero, None) - 3.0 * 1.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let err = enumerate_paths(&two_state(), 10, 0.0, 100).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { cap: 100 }));
    }

    #[test]
    fn dense_matches_enumeration() {
        let mut rng = seeded_rng(7);
        for leak in [0.0, 0.25] {
            for _ in 0..10 {
                let inst = random_instance(&mut rng, &InstanceShape::leaky(), leak);
                let x = inst.ll.values();
                let e = enumerate_paths(&inst.den, inst.ll.num_frames(), leak, DEFAULT_PATH_CAP).unwrap();
                let d = dense_forward_backward(&inst.den, x, None, leak);
                assert!(relative_error(d.total.ln(), e.log_total(x, None)) < 1e-12);
                for (a, b) in d.gamma.iter().zip(&e.occupancies(x, None)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn supervision_enumeration() {
        let sup = Supervision::new(
            "u",
            vec![
                vec![SupArc { src: 0, dst: 0, pdf: 0 }, SupArc { src: 0, dst: 1, pdf: 1 }],
                vec![SupArc { src: 0, dst: 0, pdf: 1 }, SupArc { src: 1, dst: 0, pdf: 1 }],
            ],
            vec![0],
            vec![0],
        )
        .unwrap();
        let e = enumerate_supervision(&sup, 10).unwrap();
        assert_eq!(e.len(), 2);
        let g = e.occupancies(&array![[0.0, 0.0], [0.0, 0.0]], None);
        assert_eq!(g, array![[0.5, 0.5], [0.0, 1.0]]);
    }
}
