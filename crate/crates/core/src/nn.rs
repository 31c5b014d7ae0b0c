//! The epsilon-prediction network and its reverse-mode gradients.
//!
//! The denoiser is a small MLP over `[x, time features, condition embedding]`.
//! Time features are `sin`/`cos` of `w_k * t / T` with `w_k = (pi / 2) * 2^k`;
//! the condition embedding is a learned table, one row per condition.
//!
//! All parameters live in one flat vector with a fixed layout:
//!
//! 1. condition embedding, `n_conditions x cond_dim`, row-major;
//! 2. for each linear layer in forward order: weight `out x in` row-major, then bias `out`.
//!
//! Gradients are computed with a [`Tape`]: every batched forward evaluation
//! that a loss depends on is recorded, the loss supplies `dL/d(output)` for
//! each recorded evaluation, and [`Tape::backward`] pulls those cotangents
//! back to the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, contract, domain, Result};
use crate::rng::SeededRng;
use crate::Point;

pub const DATA_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `z * sigmoid(z)`.
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Shape of a [`Denoiser`]. Stored in checkpoints and compared on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Number of training timesteps `T`; inputs need `t < T`.
    pub timesteps: usize,
    pub n_conditions: usize,
    pub time_frequencies: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(timesteps: usize, n_conditions: usize) -> Self {
        Self {
            timesteps,
            n_conditions,
            time_frequencies: 8,
            cond_dim: 8,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }

    pub fn input_dim(&self) -> usize {
        DATA_DIM + 2 * self.time_frequencies + self.cond_dim
    }

    /// `(fan_in, fan_out)` of every linear layer, in forward order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, DATA_DIM));
        dims
    }

    pub fn embedding_len(&self) -> usize {
        self.n_conditions * self.cond_dim
    }

    pub fn param_count(&self) -> usize {
        self.embedding_len()
            + self
                .layer_dims()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.n_conditions == 0 {
            return Err(domain("architecture needs timesteps > 0 and n_conditions > 0"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(domain("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerView {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

fn layer_views(arch: &Architecture) -> Vec<LayerView> {
    let mut off = arch.embedding_len();
    arch.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let v = LayerView {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            };
            off += fan_in * fan_out + fan_out;
            v
        })
        .collect()
}

/// One network query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub x: Point,
    pub t: usize,
    pub c: usize,
}

impl Query {
    pub fn new(x: Point, t: usize, c: usize) -> Self {
        Self { x, t, c }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: Vec<f64>,
    layers: Vec<LayerView>,
    freqs: Vec<f64>,
}

impl Denoiser {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        Self::from_params(arch, vec![0.0; n])
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases,
    /// standard-normal embeddings.
    pub fn init(arch: Architecture, rng: &mut SeededRng) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for p in &mut net.params[..net.arch.embedding_len()] {
            *p = rng.normal();
        }
        for l in net.layers.clone() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for p in &mut net.params[l.w..l.b + l.fan_out] {
                *p = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(contract(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        let layers = layer_views(&arch);
        let freqs = (0..arch.time_frequencies)
            .map(|k| std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64)
            .collect();
        Ok(Self {
            arch,
            params,
            layers,
            freqs,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Hex SHA-256 over the architecture and the exact parameter bits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("architecture serializes"));
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check(&self, q: &Query) -> Result<()> {
        if q.t >= self.arch.timesteps {
            return Err(domain(format!(
                "timestep {} outside [0, {})",
                q.t, self.arch.timesteps
            )));
        }
        if q.c >= self.arch.n_conditions {
            return Err(domain(format!(
                "condition {} outside [0, {})",
                q.c, self.arch.n_conditions
            )));
        }
        Ok(())
    }

    fn features(&self, queries: &[Query]) -> Result<Vec<f64>> {
        let dim = self.arch.input_dim();
        let cd = self.arch.cond_dim;
        let mut out = Vec::with_capacity(queries.len() * dim);
        for q in queries {
            self.check(q)?;
            out.extend_from_slice(&q.x);
            let s = q.t as f64 / self.arch.timesteps as f64;
            out.extend(self.freqs.iter().map(|w| (w * s).sin()));
            out.extend(self.freqs.iter().map(|w| (w * s).cos()));
            out.extend_from_slice(&self.params[q.c * cd..(q.c + 1) * cd]);
        }
        Ok(out)
    }

    fn run(&self, input: Vec<f64>, rows: usize, mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let act = self.arch.activation;
        let last = self.layers.len() - 1;
        let mut a = input;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; rows * l.fan_out];
            for r in 0..rows {
                z[r * l.fan_out..(r + 1) * l.fan_out]
                    .copy_from_slice(&self.params[l.b..l.b + l.fan_out]);
            }
            // z += a * W^T
            gemm(
                rows,
                l.fan_in,
                l.fan_out,
                &a,
                (l.fan_in as isize, 1),
                &self.params[l.w..l.b],
                (1, l.fan_in as isize),
                1.0,
                &mut z,
            );
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| act.apply(v)).collect()
            };
            if let Some(c) = cache.as_deref_mut() {
                c.push(std::mem::take(&mut a));
                if i != last {
                    c.push(z);
                }
            }
            a = next;
        }
        a
    }

    /// Epsilon prediction for a single query.
    pub fn forward(&self, x: Point, t: usize, c: usize) -> Result<Point> {
        Ok(self.forward_batch(&[Query::new(x, t, c)])?[0])
    }

    /// Epsilon predictions for a batch. Each row is computed independently of
    /// the others, so results do not depend on batch composition.
    pub fn forward_batch(&self, queries: &[Query]) -> Result<Vec<Point>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.features(queries)?;
        let out = self.run(input, queries.len(), None);
        Ok(out.chunks_exact(DATA_DIM).map(|r| [r[0], r[1]]).collect())
    }
}

/// `c = beta * c + a * b`, with `a: m x k`, `b: k x n`, `c: m x n` row-major.
/// Strides are `(row, col)` for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: every index reachable through the given strides lies within
    // `a`, `b` and `c`, whose lengths are checked by the callers' layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradient of a scalar loss with respect to every parameter of a [`Denoiser`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(loss: f64, n: usize) -> Self {
        Self {
            loss,
            grad: vec![0.0; n],
        }
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Handle to an evaluation recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    conds: Vec<usize>,
    /// Interleaved: layer input, pre-activation, layer input, ... , last layer input.
    cache: Vec<Vec<f64>>,
}

/// Record of forward evaluations a loss is built from.
pub struct Tape<'a> {
    net: &'a Denoiser,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(net: &'a Denoiser) -> Self {
        Self {
            net,
            nodes: Vec::new(),
        }
    }

    pub fn net(&self) -> &'a Denoiser {
        self.net
    }

    /// Evaluate a batch and keep what the backward pass needs.
    pub fn eval(&mut self, queries: &[Query]) -> Result<(NodeId, Vec<Point>)> {
        let input = self.net.features(queries)?;
        let mut cache = Vec::with_capacity(2 * self.net.layers.len());
        let out = if queries.is_empty() {
            Vec::new()
        } else {
            self.net.run(input, queries.len(), Some(&mut cache))
        };
        self.nodes.push(Node {
            conds: queries.iter().map(|q| q.c).collect(),
            cache,
        });
        let id = NodeId(self.nodes.len() - 1);
        Ok((id, out.chunks_exact(DATA_DIM).map(|r| [r[0], r[1]]).collect()))
    }

    /// Reverse-mode pass. `cotangents` pairs a recorded evaluation with
    /// `dL/d(output)` for each of its rows; evaluations without an entry do
    /// not influence the loss.
    pub fn backward(&self, loss: f64, cotangents: &[(NodeId, Vec<Point>)]) -> Result<ParamGradient> {
        check_finite("loss", loss)?;
        let net = self.net;
        let mut g = ParamGradient::zeros(loss, net.param_count());
        let act = net.arch.activation;
        let cd = net.arch.cond_dim;
        let emb_col = DATA_DIM + 2 * net.arch.time_frequencies;
        for (id, dout) in cotangents {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| contract(format!("unknown tape node {}", id.0)))?;
            let rows = node.conds.len();
            if dout.len() != rows {
                return Err(contract(format!(
                    "cotangent has {} rows, evaluation has {rows}",
                    dout.len()
                )));
            }
            if rows == 0 {
                continue;
            }
            let mut dz: Vec<f64> = dout.iter().flat_map(|p| p.iter().copied()).collect();
            for (i, l) in net.layers.iter().enumerate().rev() {
                let a_in = &node.cache[2 * i];
                // dW += dz^T a
                gemm(
                    l.fan_out,
                    rows,
                    l.fan_in,
                    &dz,
                    (1, l.fan_out as isize),
                    a_in,
                    (l.fan_in as isize, 1),
                    1.0,
                    &mut g.grad[l.w..l.b],
                );
                for r in 0..rows {
                    for (gb, d) in g.grad[l.b..l.b + l.fan_out]
                        .iter_mut()
                        .zip(&dz[r * l.fan_out..(r + 1) * l.fan_out])
                    {
                        *gb += d;
                    }
                }
                // da = dz W
                let mut da = vec![0.0; rows * l.fan_in];
                gemm(
                    rows,
                    l.fan_out,
                    l.fan_in,
                    &dz,
                    (l.fan_out as isize, 1),
                    &net.params[l.w..l.b],
                    (l.fan_in as isize, 1),
                    0.0,
                    &mut da,
                );
                if i > 0 {
                    let pre = &node.cache[2 * i - 1];
                    for (d, &z) in da.iter_mut().zip(pre) {
                        *d *= act.derivative(z);
                    }
                    dz = da;
                } else {
                    for (r, &c) in node.conds.iter().enumerate() {
                        let src = &da[r * l.fan_in + emb_col..r * l.fan_in + emb_col + cd];
                        for (ge, d) in g.grad[c * cd..(c + 1) * cd].iter_mut().zip(src) {
                            *ge += d;
                        }
                    }
                    break;
                }
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            timesteps: 100,
            n_conditions: 3,
            time_frequencies: 2,
            cond_dim: 3,
            hidden: vec![5, 4],
            activation: Activation::Silu,
        }
    }

    /// Plain-loop evaluation of the same network.
    fn reference_forward(net: &Denoiser, x: Point, t: usize, c: usize) -> Point {
        let arch = net.arch();
        let p = net.params();
        let s = t as f64 / arch.timesteps as f64;
        let mut a = vec![x[0], x[1]];
        for k in 0..arch.time_frequencies {
            a.push((std::f64::consts::FRAC_PI_2 * 2f64.powi(k as i32) * s).sin());
        }
        for k in 0..arch.time_frequencies {
            a.push((std::f64::consts::FRAC_PI_2 * 2f64.powi(k as i32) * s).cos());
        }
        for j in 0..arch.cond_dim {
            a.push(p[c * arch.cond_dim + j]);
        }
        let mut off = arch.embedding_len();
        let dims = arch.layer_dims();
        for (li, (fi, fo)) in dims.iter().copied().enumerate() {
            let mut z = vec![0.0; fo];
            for o in 0..fo {
                let mut acc = p[off + fi * fo + o];
                for i in 0..fi {
                    acc += p[off + o * fi + i] * a[i];
                }
                z[o] = acc;
            }
            off += fi * fo + fo;
            a = if li + 1 == dims.len() {
                z
            } else {
                z.iter().map(|v| v / (1.0 + (-v).exp())).collect()
            };
        }
        [a[0], a[1]]
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Denoiser::zeros(small_arch()).unwrap();
        assert_eq!(net.forward([3.0, -1.0], 42, 2).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let net = Denoiser::init(small_arch(), &mut SeededRng::new(1)).unwrap();
        let a = net.forward([0.3, 0.7], 10, 1).unwrap();
        let b = net.forward([0.3, 0.7], 10, 1).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn forward_matches_plain_loops() {
        let net = Denoiser::init(small_arch(), &mut SeededRng::new(11)).unwrap();
        let mut rng = SeededRng::new(12);
        for _ in 0..50 {
            let x = rng.normal_point();
            let t = rng.below(100);
            let c = rng.below(3);
            let got = net.forward(x, t, c).unwrap();
            let want = reference_forward(&net, x, t, c);
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_arch_matches_plain_loops_and_is_batch_invariant() {
        let net = Denoiser::init(Architecture::new(1000, 4), &mut SeededRng::new(5)).unwrap();
        let mut rng = SeededRng::new(6);
        let qs: Vec<Query> = (0..37)
            .map(|_| Query::new(rng.normal_point(), rng.below(1000), rng.below(4)))
            .collect();
        let batch = net.forward_batch(&qs).unwrap();
        for (q, b) in qs.iter().zip(&batch) {
            let single = net.forward(q.x, q.t, q.c).unwrap();
            assert_eq!(single[0].to_bits(), b[0].to_bits());
            assert_eq!(single[1].to_bits(), b[1].to_bits());
            let want = reference_forward(&net, q.x, q.t, q.c);
            assert!((want[0] - b[0]).abs() < 1e-12 && (want[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors() {
        let net = Denoiser::zeros(small_arch()).unwrap();
        assert!(net.forward([0.0, 0.0], 100, 0).is_err());
        assert!(net.forward([0.0, 0.0], 0, 3).is_err());
        assert!(Denoiser::from_params(small_arch(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Denoiser::init(small_arch(), &mut SeededRng::new(2)).unwrap();
        let mut tape = Tape::new(&net);
        tape.eval(&[Query::new([1.0, 2.0], 3, 0)]).unwrap();
        let g = tape.backward(4.0, &[]).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
        assert_eq!(g.loss, 4.0);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let net = Denoiser::zeros(small_arch()).unwrap();
        let tape = Tape::new(&net);
        match tape.backward(f64::NAN, &[]) {
            Err(crate::Error::NonFinite { value, .. }) => assert!(value.is_nan()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_linear_layer_least_squares_gradient() {
        // No hidden layers: eps = W f + b, L = 0.5 * ||W f + b - y||^2,
        // dL/dW = r f^T, dL/db = r with r = W f + b - y.
        let arch = Architecture {
            timesteps: 10,
            n_conditions: 1,
            time_frequencies: 1,
            cond_dim: 1,
            hidden: vec![],
            activation: Activation::Silu,
        };
        let net = Denoiser::init(arch, &mut SeededRng::new(9)).unwrap();
        let x = [0.4, -1.2];
        let y = [0.3, 0.1];
        let mut tape = Tape::new(&net);
        let (id, out) = tape.eval(&[Query::new(x, 4, 0)]).unwrap();
        let r = [out[0][0] - y[0], out[0][1] - y[1]];
        let loss = 0.5 * (r[0] * r[0] + r[1] * r[1]);
        let g = tape.backward(loss, &[(id, vec![r])]).unwrap();
        let s = 0.4f64;
        let emb = net.params()[0];
        let f = [
            x[0],
            x[1],
            (std::f64::consts::FRAC_PI_2 * s).sin(),
            (std::f64::consts::FRAC_PI_2 * s).cos(),
            emb,
        ];
        let w_off = 1;
        for o in 0..2 {
            for i in 0..5 {
                let want = r[o] * f[i];
                assert!((g.grad[w_off + o * 5 + i] - want).abs() < 1e-10);
            }
            assert!((g.grad[w_off + 10 + o] - r[o]).abs() < 1e-10);
        }
        let w = &net.params()[w_off..w_off + 10];
        let want_emb = r[0] * w[4] + r[1] * w[9];
        assert!((g.grad[0] - want_emb).abs() < 1e-10);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = small_arch();
        let net = Denoiser::init(arch.clone(), &mut SeededRng::new(21)).unwrap();
        let mut rng = SeededRng::new(22);
        let qs: Vec<Query> = (0..4)
            .map(|_| Query::new(rng.normal_point(), rng.below(100), rng.below(3)))
            .collect();
        let targets: Vec<Point> = (0..4).map(|_| rng.normal_point()).collect();
        let loss_of = |n: &Denoiser| -> f64 {
            n.forward_batch(&qs)
                .unwrap()
                .iter()
                .zip(&targets)
                .map(|(o, y)| (o[0] - y[0]).powi(2) + (o[1] - y[1]).powi(2))
                .sum()
        };
        let mut tape = Tape::new(&net);
        let (id, out) = tape.eval(&qs).unwrap();
        let dout: Vec<Point> = out
            .iter()
            .zip(&targets)
            .map(|(o, y)| [2.0 * (o[0] - y[0]), 2.0 * (o[1] - y[1])])
            .collect();
        let g = tape.backward(loss_of(&net), &[(id, dout)]).unwrap();
        let h = 1e-4;
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
            let err = (fd - g.grad[i]).abs() / fd.abs().max(g.grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", g.grad[i]);
        }
    }
}
