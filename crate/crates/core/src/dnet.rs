//! The D-Net edge estimator.
//!
//! Every layer maps `h` to
//! `ReLU(BN(conv3x3_dilated(h) + row_bcast(diag3x1(h)) + col_bcast(diag1x3(h)) + bias))`,
//! where the two diagonal convolutions are evaluated only at positions
//! `(i, i)` and their responses are added to every entry of row `i` and
//! column `j` respectively. A 1x1 convolution and a sigmoid produce the edge
//! map, which is symmetrized by averaging with its transpose.
//!
//! Activations are stored channel-major (`[c][b][i][j]`) so that a whole
//! batch is one GEMM per layer; the public [`Tensor4`] uses `[b][c][i][j]`.

use std::fmt::Debug;
use std::io::{self, Read, Write};
use std::ops::Range;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymmetricMatrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Output probabilities are clamped to `[OUT_EPS, 1 - OUT_EPS]`.
pub const OUT_EPS: f64 = 1e-7;
const MAGIC: &[u8; 4] = b"DGNN";
pub const MODEL_VERSION: u16 = 1;
/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 23;

#[derive(Debug, Error)]
pub enum DNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DNetError>;

/// Scalar type of a network: `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn check_view(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
        assert!(last < len, "gemm view out of bounds: {last} >= {len}");
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_view(a.0.len(), m, k, a.1, a.2);
                check_view(b.0.len(), k, n, b.1, b.2);
                check_view(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and `c` is exclusively borrowed.
                unsafe { $f(m, k, n, alpha, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2) }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[inline]
fn r<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

#[inline]
fn f<T: Real>(v: T) -> f64 {
    v.to_f64().expect("finite float")
}

/// Dense `[batch][channel][row][col]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    pub b: usize,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(b: usize, ch: usize, h: usize, w: usize) -> Self {
        Self { b, ch, h, w, data: vec![T::zero(); b * ch * h * w] }
    }

    pub fn new(b: usize, ch: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != b * ch * h * w {
            return Err(DNetError::ShapeMismatch(format!("{} values for {b}x{ch}x{h}x{w}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DNetError::ShapeMismatch("non-finite tensor value".into()));
        }
        Ok(Self { b, ch, h, w, data })
    }

    /// Stacks covariance matrices into a `b × 1 × p × p` batch.
    pub fn from_covariances(sigmas: &[&SymmetricMatrix]) -> Result<Self> {
        let p = sigmas.first().map(|s| s.dim()).unwrap_or(0);
        let mut data = Vec::with_capacity(sigmas.len() * p * p);
        for s in sigmas {
            if s.dim() != p {
                return Err(DNetError::ShapeMismatch(format!("mixed sizes {p} and {}", s.dim())));
            }
            data.extend(s.as_slice().iter().map(|&v| r::<T>(v)));
        }
        Self::new(sigmas.len(), 1, p, p, data)
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.ch + c) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: T) {
        let o = self.offset(b, c, i, j);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.b, self.ch, self.h, self.w]
    }

    /// One `h × w` slice as `f64`, row-major.
    pub fn slice_f64(&self, b: usize, c: usize) -> Vec<f64> {
        let o = self.offset(b, c, 0, 0);
        self.data[o..o + self.h * self.w].iter().map(|&v| f(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastAxis {
    /// `out(i, j) = h(i, i)`
    Row,
    /// `out(i, j) = h(j, j)`
    Column,
}

/// Spreads the diagonal of each square slice along rows or columns.
pub fn diag_broadcast<T: Real>(h: &Tensor4<T>, axis: BroadcastAxis) -> Result<Tensor4<T>> {
    if h.h != h.w {
        return Err(DNetError::ShapeMismatch(format!("{}x{} slice is not square", h.h, h.w)));
    }
    let mut out = Tensor4::zeros(h.b, h.ch, h.h, h.w);
    for b in 0..h.b {
        for c in 0..h.ch {
            for i in 0..h.h {
                for j in 0..h.w {
                    let k = if axis == BroadcastAxis::Row { i } else { j };
                    out.set(b, c, i, j, h.get(b, c, k, k));
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`diag_broadcast`]: row (or column) sums of `g` deposited on the diagonal.
pub fn diag_broadcast_backward<T: Real>(g: &Tensor4<T>, axis: BroadcastAxis) -> Result<Tensor4<T>> {
    if g.h != g.w {
        return Err(DNetError::ShapeMismatch(format!("{}x{} slice is not square", g.h, g.w)));
    }
    let mut out = Tensor4::zeros(g.b, g.ch, g.h, g.w);
    for b in 0..g.b {
        for c in 0..g.ch {
            for k in 0..g.h {
                let s = (0..g.h).fold(T::zero(), |acc, t| {
                    acc + if axis == BroadcastAxis::Row { g.get(b, c, k, t) } else { g.get(b, c, t, k) }
                });
                out.set(b, c, k, k, s);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DilationSchedule {
    /// `d_k = k + 1`
    Arithmetic,
    /// `d_k = 2^(k+1)`
    Geometric,
    /// `d_k = 2^(k-1)`
    Powers,
}

impl DilationSchedule {
    /// Dilation of layer `k`, counting from 1.
    pub fn dilation(self, k: usize) -> usize {
        match self {
            Self::Arithmetic => k + 1,
            Self::Geometric => 1 << (k + 1),
            Self::Powers => 1 << (k - 1),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Arithmetic => 0,
            Self::Geometric => 1,
            Self::Powers => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Self::Arithmetic, Self::Geometric, Self::Powers].into_iter().find(|s| s.tag() == t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Input size the network is trained for.
    pub p: usize,
    pub depth: usize,
    pub feature_maps: usize,
    pub dilation_schedule: DilationSchedule,
}

impl NetConfig {
    /// Six layers, 50 maps, `d_k = k + 1`.
    pub fn deepgraph_39() -> Self {
        Self { p: 39, depth: 6, feature_maps: 50, dilation_schedule: DilationSchedule::Arithmetic }
    }

    pub fn deepgraph_50() -> Self {
        Self { p: 50, ..Self::deepgraph_39() }
    }

    /// Eight layers, 50 maps, `d_k = 2^(k+1)`.
    pub fn deepgraph_500() -> Self {
        Self { p: 500, depth: 8, feature_maps: 50, dilation_schedule: DilationSchedule::Geometric }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (1..=self.depth).map(|k| self.dilation_schedule.dilation(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.depth < 1 || self.feature_maps < 1 {
            return Err(DNetError::InvalidConfig(format!(
                "p = {}, depth = {}, feature_maps = {} (need p >= 2 and at least one layer and map)",
                self.p, self.depth, self.feature_maps
            )));
        }
        if self.depth > 30 {
            return Err(DNetError::InvalidConfig(format!("depth {} is too large", self.depth)));
        }
        let rf = receptive_field(self);
        if rf < self.p {
            return Err(DNetError::InvalidConfig(format!("receptive field {rf} < p {}", self.p)));
        }
        Ok(())
    }
}

/// One-dimensional reach `1 + 2·Σ d_k` of the stacked dilated 3x3 kernels.
pub fn receptive_field(cfg: &NetConfig) -> usize {
    1 + 2 * cfg.dilations().iter().sum::<usize>()
}

/// Offsets of one layer's parameters in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
    /// `[cout][cin][3][3]`
    pub kernel: Range<usize>,
    /// `[cout][cin][3]`, taps at `(i + (t-1)d, i)`
    pub row_diag: Range<usize>,
    /// `[cout][cin][3]`, taps at `(j, j + (t-1)d)`
    pub col_diag: Range<usize>,
    pub bias: Range<usize>,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
    pub head_weight: Range<usize>,
    pub head_bias: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let fm = cfg.feature_maps;
        let layers = (0..cfg.depth)
            .map(|k| {
                let cin = if k == 0 { 1 } else { fm };
                LayerLayout {
                    cin,
                    cout: fm,
                    dilation: cfg.dilation_schedule.dilation(k + 1),
                    kernel: take(fm * cin * 9),
                    row_diag: take(fm * cin * 3),
                    col_diag: take(fm * cin * 3),
                    bias: take(fm),
                    gamma: take(fm),
                    beta: take(fm),
                }
            })
            .collect();
        let head_weight = take(fm);
        let head_bias = take(1).start;
        Self { layers, head_weight, head_bias, total: at }
    }

    /// Named parameter groups, in file order.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{k}.kernel"), l.kernel.clone()));
            out.push((format!("layer{k}.row_diag"), l.row_diag.clone()));
            out.push((format!("layer{k}.col_diag"), l.col_diag.clone()));
            out.push((format!("layer{k}.bias"), l.bias.clone()));
            out.push((format!("layer{k}.gamma"), l.gamma.clone()));
            out.push((format!("layer{k}.beta"), l.beta.clone()));
        }
        out.push(("head.weight".into(), self.head_weight.clone()));
        out.push(("head.bias".into(), self.head_bias..self.head_bias + 1));
        out
    }
}

/// Batch-norm running statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the cache supports [`DNetModel::backward`].
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct DNetModel<T: Real = f32> {
    config: NetConfig,
    layout: ParamLayout,
    params: Vec<T>,
    bn: Vec<BatchNormState>,
    /// Bumped on every parameter mutation; caches record the value they saw.
    epoch: u64,
}

struct LayerCache<T> {
    zhat: Vec<T>,
    inv_std: Vec<f64>,
}

/// Activations retained by a forward pass.
pub struct ForwardCache<T: Real> {
    mode: Mode,
    epoch: u64,
    batch: usize,
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`; all channel-major.
    acts: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    batch_mean: Vec<Vec<f64>>,
    batch_var: Vec<Vec<f64>>,
    /// Clamped sigmoid before symmetrization, `[b][i][j]`.
    sig: Vec<T>,
    clamped: Vec<bool>,
}

impl<T: Real> ForwardCache<T> {
    /// Normalized pre-affine activations of layer `k`, channel-major.
    pub fn normalized(&self, k: usize) -> &[T] {
        &self.layers[k].zhat
    }

    /// Pre-head activations (output of the last layer), channel-major.
    pub fn pre_head(&self) -> &[T] {
        self.acts.last().expect("at least the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> DNetModel<T> {
    /// He-normal kernels, zero biases, unit gamma, zero beta, running stats `(0, 1)`.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut fill = |range: &Range<usize>, fan_in: usize, rng: &mut R| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut params[range.clone()] {
                *v = r(dist.sample(rng));
            }
        };
        for l in &layout.layers {
            fill(&l.kernel, l.cin * 9, rng);
            fill(&l.row_diag, l.cin * 3, rng);
            fill(&l.col_diag, l.cin * 3, rng);
        }
        fill(&layout.head_weight, config.feature_maps, rng);
        for l in &layout.layers {
            params[l.gamma.clone()].iter_mut().for_each(|g| *g = T::one());
        }
        let fm = config.feature_maps;
        let bn = (0..config.depth)
            .map(|_| BatchNormState { running_mean: vec![0.0; fm], running_var: vec![1.0; fm] })
            .collect();
        Ok(Self { config, layout, params, bn, epoch: 0 })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn p_train(&self) -> usize {
        self.config.p
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.epoch += 1;
        &mut self.params
    }

    pub fn batch_norm(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> DNetModel<U> {
        DNetModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| r::<U>(f(v))).collect(),
            bn: self.bn.clone(),
            epoch: 0,
        }
    }

    /// Runs the network on `b × 1 × p × p` input. Does not touch running statistics.
    pub fn forward(&self, input: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.run(input, mode, true)
    }

    /// Eval-mode forward without retaining activations.
    pub fn predict(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.run(input, Mode::Eval, false)?.0)
    }

    /// Edge positions (row-major, `p × p`) whose pre-head features change
    /// when the symmetric input entry `(a, b)` of `base` is perturbed.
    ///
    /// The probe runs an f64 copy with every weight made positive, running
    /// means zeroed and the input made non-negative. All pre-activations are
    /// then positive and strictly increasing in every input entry, so the
    /// answer reflects connectivity rather than which ReLUs happen to be off
    /// or which contributions cancel for this particular input.
    pub fn influence_probe(&self, base: &Tensor4<T>, a: usize, b: usize) -> Result<Vec<bool>> {
        self.check_input(base)?;
        let p = self.config.p;
        if base.b != 1 || a >= p || b >= p {
            return Err(DNetError::ShapeMismatch(format!(
                "probe needs a single {p} x {p} input and an entry inside it, got {:?} and ({a}, {b})",
                base.shape()
            )));
        }
        let mut model = self.cast::<f64>();
        model.params.iter_mut().for_each(|v| *v = v.abs() + 1e-3);
        for bn in &mut model.bn {
            bn.running_mean.iter_mut().for_each(|m| *m = 0.0);
        }
        let x0 = Tensor4::new(1, 1, p, p, base.data.iter().map(|&v| f(v).abs()).collect())?;
        let mut x1 = x0.clone();
        x1.set(0, 0, a, b, x1.get(0, 0, a, b) + 0.5);
        if a != b {
            x1.set(0, 0, b, a, x1.get(0, 0, b, a) + 0.5);
        }
        let (_, c0) = model.run(&x0, Mode::Eval, true)?;
        let (_, c1) = model.run(&x1, Mode::Eval, true)?;
        let (h0, h1) = (c0.pre_head(), c1.pre_head());
        let plane = p * p;
        let maps = self.config.feature_maps;
        Ok((0..plane)
            .map(|pos| (0..maps).any(|c| h0[c * plane + pos] != h1[c * plane + pos]))
            .collect())
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let p = self.config.p;
        if input.ch != 1 || input.h != p || input.w != p || input.b == 0 {
            return Err(DNetError::ShapeMismatch(format!(
                "input {:?}, network expects b x 1 x {p} x {p} with b >= 1",
                input.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, input: &Tensor4<T>, mode: Mode, keep: bool) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let (bsz, p) = (input.b, self.config.p);
        let plane = p * p;
        let mut acts = vec![input.data.clone()];
        let mut layers = Vec::new();
        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        for (k, l) in self.layout.layers.iter().enumerate() {
            let x = acts.last().expect("nonempty");
            let mut z = vec![T::zero(); l.cout * bsz * plane];
            conv_forward(&self.params[l.kernel.clone()], x, &mut z, l.cin, l.cout, bsz, p, l.dilation);
            diag_forward(&self.params, l, x, &mut z, bsz, p);
            let n = bsz * plane;
            let mut zhat = vec![T::zero(); z.len()];
            let mut inv_stds = Vec::with_capacity(l.cout);
            let (mut means, mut vars) = (Vec::with_capacity(l.cout), Vec::with_capacity(l.cout));
            for co in 0..l.cout {
                let bias = self.params[l.bias.start + co];
                let zc = &mut z[co * n..(co + 1) * n];
                zc.iter_mut().for_each(|v| *v = *v + bias);
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = zc.iter().map(|&v| f(v)).sum::<f64>() / n as f64;
                        let var = zc.iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>() / n as f64;
                        (mean, var)
                    }
                    Mode::Eval => (self.bn[k].running_mean[co], self.bn[k].running_var[co]),
                };
                means.push(mean);
                vars.push(if n > 1 { var * n as f64 / (n - 1) as f64 } else { var });
                let inv_std = 1.0 / (var + BN_EPS).sqrt();
                inv_stds.push(inv_std);
                let gamma = self.params[l.gamma.start + co];
                let beta = self.params[l.beta.start + co];
                let (tm, ti) = (r::<T>(mean), r::<T>(inv_std));
                let zh = &mut zhat[co * n..(co + 1) * n];
                for (h, v) in zh.iter_mut().zip(zc.iter_mut()) {
                    *h = (*v - tm) * ti;
                    let y = gamma * *h + beta;
                    *v = if y > T::zero() { y } else { T::zero() };
                }
            }
            if keep {
                layers.push(LayerCache { zhat, inv_std: inv_stds });
                batch_mean.push(means);
                batch_var.push(vars);
                acts.push(z);
            } else {
                acts = vec![z];
            }
        }
        // head
        let h = acts.last().expect("nonempty");
        let n = bsz * plane;
        let fm = self.config.feature_maps;
        let hb = self.params[self.layout.head_bias];
        let mut logits = vec![hb; n];
        for c in 0..fm {
            let w = self.params[self.layout.head_weight.start + c];
            for (o, &v) in logits.iter_mut().zip(&h[c * n..(c + 1) * n]) {
                *o = *o + w * v;
            }
        }
        let (lo, hi) = (r::<T>(OUT_EPS), r::<T>(1.0 - OUT_EPS));
        let mut clamped = vec![false; n];
        let sig: Vec<T> = logits
            .iter()
            .zip(clamped.iter_mut())
            .map(|(&x, cl)| {
                let s = T::one() / (T::one() + (-x).exp());
                if s < lo || s > hi {
                    *cl = true;
                }
                s.max(lo).min(hi)
            })
            .collect();
        let mut out = Tensor4::zeros(bsz, 1, p, p);
        let half = r::<T>(0.5);
        for b in 0..bsz {
            let s = &sig[b * plane..(b + 1) * plane];
            let o = &mut out.data[b * plane..(b + 1) * plane];
            for i in 0..p {
                for j in 0..p {
                    o[i * p + j] = half * (s[i * p + j] + s[j * p + i]);
                }
            }
        }
        let cache = ForwardCache {
            mode,
            epoch: self.epoch,
            batch: bsz,
            acts,
            layers,
            batch_mean,
            batch_var,
            sig: if keep { sig } else { Vec::new() },
            clamped: if keep { clamped } else { Vec::new() },
        };
        Ok((out, cache))
    }

    /// Folds a train-mode pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.mode != Mode::Train || cache.batch_mean.len() != self.bn.len() {
            return Err(DNetError::StaleCache("running stats need a train-mode cache from this network".into()));
        }
        for (state, (mean, var)) in self.bn.iter_mut().zip(cache.batch_mean.iter().zip(&cache.batch_var)) {
            for c in 0..mean.len() {
                state.running_mean[c] = (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
                state.running_var[c] = (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
        Ok(())
    }

    /// Gradient of `Σ grad_out ⊙ output` with respect to every parameter,
    /// laid out like [`DNetModel::params`].
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor4<T>) -> Result<Vec<T>> {
        if cache.mode != Mode::Train {
            return Err(DNetError::StaleCache("backward needs a train-mode forward".into()));
        }
        if cache.epoch != self.epoch || cache.layers.len() != self.layout.layers.len() {
            return Err(DNetError::StaleCache("parameters changed since the forward pass".into()));
        }
        let (bsz, p) = (cache.batch, self.config.p);
        if grad_out.shape() != [bsz, 1, p, p] {
            return Err(DNetError::ShapeMismatch(format!(
                "upstream gradient {:?} for output {:?}",
                grad_out.shape(),
                [bsz, 1, p, p]
            )));
        }
        let plane = p * p;
        let n = bsz * plane;
        let mut grads = vec![T::zero(); self.layout.total];
        // symmetrization and clamped sigmoid
        let half = r::<T>(0.5);
        let mut dlogit = vec![T::zero(); n];
        for b in 0..bsz {
            let g = &grad_out.data[b * plane..(b + 1) * plane];
            for i in 0..p {
                for j in 0..p {
                    let idx = b * plane + i * p + j;
                    if cache.clamped[idx] {
                        continue;
                    }
                    let s = cache.sig[idx];
                    let gs = half * (g[i * p + j] + g[j * p + i]);
                    dlogit[idx] = gs * s * (T::one() - s);
                }
            }
        }
        let fm = self.config.feature_maps;
        let h = cache.acts.last().expect("nonempty");
        grads[self.layout.head_bias] = sum(&dlogit);
        let mut dh = vec![T::zero(); fm * n];
        for c in 0..fm {
            let hc = &h[c * n..(c + 1) * n];
            grads[self.layout.head_weight.start + c] = hc.iter().zip(&dlogit).fold(T::zero(), |a, (&x, &g)| a + x * g);
            let w = self.params[self.layout.head_weight.start + c];
            for (d, &g) in dh[c * n..(c + 1) * n].iter_mut().zip(&dlogit) {
                *d = w * g;
            }
        }
        for (k, l) in self.layout.layers.iter().enumerate().rev() {
            let out = &cache.acts[k + 1];
            let x = &cache.acts[k];
            let lc = &cache.layers[k];
            // ReLU, then batch norm
            let mut dz = dh;
            for co in 0..l.cout {
                let range = co * n..(co + 1) * n;
                let zh = &lc.zhat[range.clone()];
                let dzc = &mut dz[range.clone()];
                for (d, &o) in dzc.iter_mut().zip(&out[range]) {
                    if o <= T::zero() {
                        *d = T::zero();
                    }
                }
                let (mut sg, mut sgz) = (0.0f64, 0.0f64);
                for (&d, &z) in dzc.iter().zip(zh) {
                    sg += f(d);
                    sgz += f(d) * f(z);
                }
                grads[l.beta.start + co] = r(sg);
                grads[l.gamma.start + co] = r(sgz);
                let gamma = f(self.params[l.gamma.start + co]);
                // dz = γ·inv_std/N · (N·dy − Σdy − ẑ·Σ(dy·ẑ))
                let scale = gamma * lc.inv_std[co] / n as f64;
                let (a, m1, m2) = (r::<T>(scale * n as f64), r::<T>(scale * sg), r::<T>(scale * sgz));
                let mut sb = 0.0f64;
                for (d, &z) in dzc.iter_mut().zip(zh) {
                    *d = a * *d - m1 - m2 * z;
                    sb += f(*d);
                }
                grads[l.bias.start + co] = r(sb);
            }
            let need_dx = k > 0;
            let mut dx = if need_dx { vec![T::zero(); l.cin * n] } else { Vec::new() };
            diag_backward(&self.params, l, x, &dz, &mut grads, if need_dx { Some(&mut dx) } else { None }, bsz, p);
            conv_backward(
                &self.params[l.kernel.clone()],
                x,
                &dz,
                &mut grads[l.kernel.clone()],
                if need_dx { Some(&mut dx) } else { None },
                l.cin,
                l.cout,
                bsz,
                p,
                l.dilation,
            );
            dh = dx;
        }
        Ok(grads)
    }

    /// Writes the model file.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for v in [self.config.p, self.config.depth, self.config.feature_maps] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[self.config.dilation_schedule.tag()])?;
        let write_blob = |w: &mut W, vals: &mut dyn Iterator<Item = f64>, len: usize| -> io::Result<()> {
            w.write_all(&(len as u64).to_le_bytes())?;
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for (l, bn) in self.layout.layers.iter().zip(&self.bn) {
            for range in [&l.kernel, &l.row_diag, &l.col_diag, &l.bias, &l.gamma, &l.beta] {
                write_blob(&mut w, &mut self.params[range.clone()].iter().map(|&v| f(v)), range.len())?;
            }
            write_blob(&mut w, &mut bn.running_mean.iter().copied(), bn.running_mean.len())?;
            write_blob(&mut w, &mut bn.running_var.iter().copied(), bn.running_var.len())?;
        }
        let hw = &self.layout.head_weight;
        write_blob(&mut w, &mut self.params[hw.clone()].iter().map(|&v| f(v)), hw.len())?;
        write_blob(&mut w, &mut std::iter::once(f(self.params[self.layout.head_bias])), 1)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut rd: R) -> Result<Self> {
        let corrupt = |m: &str| DNetError::CorruptFile(m.to_string());
        let mut head = [0u8; 4 + 2 + 12 + 1];
        rd.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != MODEL_VERSION {
            return Err(DNetError::CorruptFile(format!(
                "unsupported version {version} (this build reads version {MODEL_VERSION})"
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes")) as usize;
        let schedule = DilationSchedule::from_tag(head[18]).ok_or_else(|| corrupt("unknown dilation schedule"))?;
        let config = NetConfig { p: u32_at(6), depth: u32_at(10), feature_maps: u32_at(14), dilation_schedule: schedule };
        config.validate().map_err(|e| DNetError::CorruptFile(e.to_string()))?;
        let layout = ParamLayout::new(&config);
        let mut read_blob = |expected: usize| -> Result<Vec<f64>> {
            let mut len = [0u8; 8];
            rd.read_exact(&mut len).map_err(|_| corrupt("truncated blob header"))?;
            let len = u64::from_le_bytes(len) as usize;
            if len != expected {
                return Err(DNetError::CorruptFile(format!("blob of length {len}, expected {expected}")));
            }
            let mut buf = vec![0u8; 8 * len];
            rd.read_exact(&mut buf).map_err(|_| corrupt("truncated blob"))?;
            let vals: Vec<f64> =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite parameter"));
            }
            Ok(vals)
        };
        let mut params = vec![T::zero(); layout.total];
        let mut bn = Vec::new();
        for l in &layout.layers {
            for range in [&l.kernel, &l.row_diag, &l.col_diag, &l.bias, &l.gamma, &l.beta] {
                for (dst, v) in params[range.clone()].iter_mut().zip(read_blob(range.len())?) {
                    *dst = r(v);
                }
            }
            let running_mean = read_blob(l.cout)?;
            let running_var = read_blob(l.cout)?;
            if running_var.iter().any(|&v| v < 0.0) {
                return Err(corrupt("negative running variance"));
            }
            bn.push(BatchNormState { running_mean, running_var });
        }
        for (dst, v) in params[layout.head_weight.clone()].iter_mut().zip(read_blob(layout.head_weight.len())?) {
            *dst = r(v);
        }
        params[layout.head_bias] = r(read_blob(1)?[0]);
        let mut extra = [0u8; 1];
        if rd.read(&mut extra)? != 0 {
            return Err(corrupt("trailing bytes after model"));
        }
        Ok(Self { config, layout, params, bn, epoch: 0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }
}

fn sum<T: Real>(v: &[T]) -> T {
    r(v.iter().map(|&x| f(x)).sum::<f64>())
}

/// Column ranges of valid output positions for a tap offset `off` in a line of length `p`.
#[inline]
fn valid_range(p: usize, off: isize) -> Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (p as isize - off.max(0)).max(0) as usize;
    lo.min(hi)..hi
}

/// Gathers dilated 3x3 patches of batch items `b0..b1` into `col`:
/// row `ci·9 + tap`, column `(b - b0)·p² + pos`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], col: &mut [T], cin: usize, bsz: usize, b0: usize, b1: usize, p: usize, d: usize) {
    let plane = p * p;
    let width = (b1 - b0) * plane;
    for ci in 0..cin {
        for tap in 0..9 {
            let (dy, dx) = ((tap / 3) as isize - 1, (tap % 3) as isize - 1);
            let (oy, ox) = (dy * d as isize, dx * d as isize);
            let row = &mut col[(ci * 9 + tap) * width..(ci * 9 + tap + 1) * width];
            row.iter_mut().for_each(|v| *v = T::zero());
            let ys = valid_range(p, oy);
            let xs = valid_range(p, ox);
            if ys.is_empty() || xs.is_empty() {
                continue;
            }
            for b in b0..b1 {
                let src = &x[(ci * bsz + b) * plane..(ci * bsz + b + 1) * plane];
                let dst = &mut row[(b - b0) * plane..(b - b0 + 1) * plane];
                for y in ys.clone() {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (xs.start as isize + ox) as usize;
                    dst[y * p + xs.start..y * p + xs.end].copy_from_slice(&src[sy * p + sx0..sy * p + sx0 + xs.len()]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], dx: &mut [T], cin: usize, bsz: usize, b0: usize, b1: usize, p: usize, d: usize) {
    let plane = p * p;
    let width = (b1 - b0) * plane;
    for ci in 0..cin {
        for tap in 0..9 {
            let (dy, ddx) = ((tap / 3) as isize - 1, (tap % 3) as isize - 1);
            let (oy, ox) = (dy * d as isize, ddx * d as isize);
            let row = &col[(ci * 9 + tap) * width..(ci * 9 + tap + 1) * width];
            let ys = valid_range(p, oy);
            let xs = valid_range(p, ox);
            if ys.is_empty() || xs.is_empty() {
                continue;
            }
            for b in b0..b1 {
                let dst = &mut dx[(ci * bsz + b) * plane..(ci * bsz + b + 1) * plane];
                let src = &row[(b - b0) * plane..(b - b0 + 1) * plane];
                for y in ys.clone() {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (xs.start as isize + ox) as usize;
                    for (t, &g) in dst[sy * p + sx0..sy * p + sx0 + xs.len()]
                        .iter_mut()
                        .zip(&src[y * p + xs.start..y * p + xs.end])
                    {
                        *t = *t + g;
                    }
                }
            }
        }
    }
}

fn chunk_size(cin: usize, bsz: usize, p: usize) -> usize {
    (COL_BUDGET / (cin * 9 * p * p).max(1)).clamp(1, bsz)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(kernel: &[T], x: &[T], z: &mut [T], cin: usize, cout: usize, bsz: usize, p: usize, d: usize) {
    let plane = p * p;
    let total = bsz * plane;
    let chunk = chunk_size(cin, bsz, p);
    let mut col = vec![T::zero(); cin * 9 * chunk * plane];
    let mut b0 = 0;
    while b0 < bsz {
        let b1 = (b0 + chunk).min(bsz);
        let width = (b1 - b0) * plane;
        im2col(x, &mut col, cin, bsz, b0, b1, p, d);
        T::gemm(
            cout,
            cin * 9,
            width,
            T::one(),
            (kernel, (cin * 9) as isize, 1),
            (&col[..cin * 9 * width], width as isize, 1),
            T::zero(),
            (&mut z[b0 * plane..], total as isize, 1),
        );
        b0 = b1;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    kernel: &[T],
    x: &[T],
    dz: &[T],
    dkernel: &mut [T],
    mut dx: Option<&mut Vec<T>>,
    cin: usize,
    cout: usize,
    bsz: usize,
    p: usize,
    d: usize,
) {
    let plane = p * p;
    let total = bsz * plane;
    let chunk = chunk_size(cin, bsz, p);
    let mut col = vec![T::zero(); cin * 9 * chunk * plane];
    let mut b0 = 0;
    while b0 < bsz {
        let b1 = (b0 + chunk).min(bsz);
        let width = (b1 - b0) * plane;
        im2col(x, &mut col, cin, bsz, b0, b1, p, d);
        // dK += dz_chunk · colᵀ
        T::gemm(
            cout,
            width,
            cin * 9,
            T::one(),
            (&dz[b0 * plane..], total as isize, 1),
            (&col[..cin * 9 * width], 1, width as isize),
            T::one(),
            (dkernel, (cin * 9) as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dcol = Kᵀ · dz_chunk
            T::gemm(
                cin * 9,
                cout,
                width,
                T::one(),
                (kernel, 1, (cin * 9) as isize),
                (&dz[b0 * plane..], total as isize, 1),
                T::zero(),
                (&mut col[..cin * 9 * width], width as isize, 1),
            );
            col2im(&col, dx, cin, bsz, b0, b1, p, d);
        }
        b0 = b1;
    }
}

/// Diagonal taps for every `(b, i)`: row `ci·3 + t`, column `b·p + i`.
fn diag_gather<T: Real>(x: &[T], cin: usize, bsz: usize, p: usize, d: usize, axis: BroadcastAxis) -> Vec<T> {
    let plane = p * p;
    let width = bsz * p;
    let mut g = vec![T::zero(); cin * 3 * width];
    for ci in 0..cin {
        for t in 0..3 {
            let off = (t as isize - 1) * d as isize;
            let row = &mut g[(ci * 3 + t) * width..(ci * 3 + t + 1) * width];
            for b in 0..bsz {
                let src = &x[(ci * bsz + b) * plane..(ci * bsz + b + 1) * plane];
                for i in valid_range(p, off) {
                    let s = (i as isize + off) as usize;
                    row[b * p + i] = match axis {
                        BroadcastAxis::Row => src[s * p + i],
                        BroadcastAxis::Column => src[i * p + s],
                    };
                }
            }
        }
    }
    g
}

fn diag_scatter<T: Real>(g: &[T], dx: &mut [T], cin: usize, bsz: usize, p: usize, d: usize, axis: BroadcastAxis) {
    let plane = p * p;
    let width = bsz * p;
    for ci in 0..cin {
        for t in 0..3 {
            let off = (t as isize - 1) * d as isize;
            let row = &g[(ci * 3 + t) * width..(ci * 3 + t + 1) * width];
            for b in 0..bsz {
                let dst = &mut dx[(ci * bsz + b) * plane..(ci * bsz + b + 1) * plane];
                for i in valid_range(p, off) {
                    let s = (i as isize + off) as usize;
                    let at = match axis {
                        BroadcastAxis::Row => s * p + i,
                        BroadcastAxis::Column => i * p + s,
                    };
                    dst[at] = dst[at] + row[b * p + i];
                }
            }
        }
    }
}

fn diag_forward<T: Real>(params: &[T], l: &LayerLayout, x: &[T], z: &mut [T], bsz: usize, p: usize) {
    let plane = p * p;
    let width = bsz * p;
    for (axis, range) in [(BroadcastAxis::Row, &l.row_diag), (BroadcastAxis::Column, &l.col_diag)] {
        let g = diag_gather(x, l.cin, bsz, p, l.dilation, axis);
        let mut resp = vec![T::zero(); l.cout * width];
        T::gemm(
            l.cout,
            l.cin * 3,
            width,
            T::one(),
            (&params[range.clone()], (l.cin * 3) as isize, 1),
            (&g, width as isize, 1),
            T::zero(),
            (&mut resp, width as isize, 1),
        );
        for co in 0..l.cout {
            for b in 0..bsz {
                let rv = &resp[co * width + b * p..co * width + (b + 1) * p];
                let zp = &mut z[(co * bsz + b) * plane..(co * bsz + b + 1) * plane];
                for i in 0..p {
                    let row = &mut zp[i * p..(i + 1) * p];
                    match axis {
                        BroadcastAxis::Row => row.iter_mut().for_each(|v| *v = *v + rv[i]),
                        BroadcastAxis::Column => row.iter_mut().zip(rv).for_each(|(v, &c)| *v = *v + c),
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn diag_backward<T: Real>(
    params: &[T],
    l: &LayerLayout,
    x: &[T],
    dz: &[T],
    grads: &mut [T],
    mut dx: Option<&mut Vec<T>>,
    bsz: usize,
    p: usize,
) {
    let plane = p * p;
    let width = bsz * p;
    for (axis, range) in [(BroadcastAxis::Row, &l.row_diag), (BroadcastAxis::Column, &l.col_diag)] {
        // upstream gradient of the diagonal responses: row or column sums of dz
        let mut dresp = vec![T::zero(); l.cout * width];
        for co in 0..l.cout {
            for b in 0..bsz {
                let zp = &dz[(co * bsz + b) * plane..(co * bsz + b + 1) * plane];
                let dst = &mut dresp[co * width + b * p..co * width + (b + 1) * p];
                for i in 0..p {
                    let row = &zp[i * p..(i + 1) * p];
                    match axis {
                        BroadcastAxis::Row => dst[i] = row.iter().fold(T::zero(), |a, &v| a + v),
                        BroadcastAxis::Column => dst.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v),
                    }
                }
            }
        }
        let g = diag_gather(x, l.cin, bsz, p, l.dilation, axis);
        T::gemm(
            l.cout,
            width,
            l.cin * 3,
            T::one(),
            (&dresp, width as isize, 1),
            (&g, 1, width as isize),
            T::zero(),
            (&mut grads[range.clone()], (l.cin * 3) as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let mut dg = vec![T::zero(); l.cin * 3 * width];
            T::gemm(
                l.cin * 3,
                l.cout,
                width,
                T::one(),
                (&params[range.clone()], 1, (l.cin * 3) as isize),
                (&dresp, width as isize, 1),
                T::zero(),
                (&mut dg, width as isize, 1),
            );
            diag_scatter(&dg, dx, l.cin, bsz, p, l.dilation, axis);
        }
    }
}
