//! Dense layers with hand-written backward passes.
//!
//! Sequences are stored ragged: the rows of one `(tokens, hidden)` matrix
//! are split into contiguous runs by [`Segments`]. Attention only mixes rows
//! inside a run, so padding never has to be materialised.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub trait Real: NdFloat + FromPrimitive + Default + Send + Sync + 'static {
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Five-point central difference estimate of `f'(0)` with step `h`.
pub fn derivative(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Run boundaries: run `i` covers rows `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Segments { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.len()).map(|i| self.range(i))
    }
}

/// Collects every parameter tensor as a flat slice, in a fixed order.
pub trait Params<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>);

    fn count(&self) -> usize {
        let mut v = Vec::new();
        self.params(&mut v);
        v.iter().map(|p| p.len()).sum()
    }
}

fn flat<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn flat_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

pub fn xavier<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    Array2::from_shape_simple_fn((rows, cols), || T::c(dist.sample(rng)))
}

pub fn normal<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::c(dist.sample(rng)))
}

/// Inputs with at most this many rows skip the packed GEMM kernel.
const STREAM_ROWS: usize = 8;

/// `x · w`. Few-row inputs stream `w` once, row by row, instead of packing
/// it; that is the single-query serving path. Larger inputs use ndarray.
pub fn matmul<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>) -> Array2<T> {
    let (m, k) = x.dim();
    let n = w.ncols();
    let Some(ws) = w.as_slice().filter(|_| m <= STREAM_ROWS && w.nrows() == k) else {
        return x.dot(&w);
    };
    let mut out = Array2::zeros((m, n));
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    for (kk, wr) in ws.chunks_exact(n).enumerate() {
        for i in 0..m {
            let a = x[[i, kk]];
            for (o, &b) in os[i * n..(i + 1) * n].iter_mut().zip(wr) {
                *o += a * b;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(in, out)`; forward is `x.dot(w) + b`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Linear { w: xavier(rng, d_in, d_out), b: Array1::zeros(d_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Linear { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.len()) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        matmul(x, self.w.view()) + &self.b
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, g: &mut Self) -> Array2<T> {
        self.accumulate(x, dy, g);
        dy.dot(&self.w.t())
    }

    pub fn accumulate(&self, x: ArrayView2<T>, dy: ArrayView2<T>, g: &mut Self) {
        g.w += &x.t().dot(&dy);
        g.b += &dy.sum_axis(Axis(0));
    }
}

impl<T> Params<T> for Linear<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        out.push(flat(&self.w));
        out.push(self.b.as_slice().unwrap());
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(flat_mut(&mut self.w));
        out.push(self.b.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm { gamma: Array1::zeros(self.gamma.len()), beta: Array1::zeros(self.beta.len()) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::c(x.ncols() as f64);
        let eps = T::c(LN_EPS);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) / d;
            *r = T::one() / (var + eps).sqrt();
            let k = *r;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, g: &mut Self) -> Array2<T> {
        g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let d = T::c(dy.ncols() as f64);
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let m1 = row.sum() / d;
            let m2 = row.iter().zip(xh).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b) / d;
            for (v, &h) in row.iter_mut().zip(xh) {
                *v = r * (*v - m1 - h * m2);
            }
        }
        dx
    }
}

impl<T> Params<T> for LayerNorm<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        out.push(self.gamma.as_slice().unwrap());
        out.push(self.beta.as_slice().unwrap());
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.gamma.as_slice_mut().unwrap());
        out.push(self.beta.as_slice_mut().unwrap());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `tanh(c (x + a x^3))` written through `exp`, which is several times
/// cheaper than the libm `tanh`. Saturates cleanly: `exp` overflow gives 1.
fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::c(2.0 * GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::one() - T::c(2.0) / (u.exp() + T::one())
}

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    T::c(0.5) * x * (T::one() + gelu_tanh(x))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let t = gelu_tanh(x);
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

pub struct AttentionCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Softmax weights per (segment, head).
    probs: Vec<Array2<T>>,
    mixed: Array2<T>,
}

impl<T: Real> SelfAttention<T> {
    pub fn new(rng: &mut impl Rng, hidden: usize, heads: usize) -> Self {
        SelfAttention {
            heads,
            q: Linear::new(rng, hidden, hidden),
            k: Linear::new(rng, hidden, hidden),
            v: Linear::new(rng, hidden, hidden),
            o: Linear::new(rng, hidden, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SelfAttention {
            heads: self.heads,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>, seg: &Segments) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let hidden = x.ncols();
        let dh = hidden / self.heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut mixed = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(seg.len() * self.heads);
        for r in seg.iter() {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = q.slice(s![r.clone(), cols.clone()]);
                let ks = k.slice(s![r.clone(), cols.clone()]);
                let vs = v.slice(s![r.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
                    row.mapv_inplace(|z| (z - m).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|z| z / sum);
                }
                mixed.slice_mut(s![r.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let y = self.o.forward(mixed.view());
        (y, AttentionCache { q, k, v, probs, mixed })
    }

    pub fn backward(
        &self,
        x: ArrayView2<T>,
        seg: &Segments,
        cache: &AttentionCache<T>,
        dy: ArrayView2<T>,
        g: &mut Self,
    ) -> Array2<T> {
        let dmixed = self.o.backward(cache.mixed.view(), dy, &mut g.o);
        let hidden = x.ncols();
        let dh = hidden / self.heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut dq = Array2::zeros(x.raw_dim());
        let mut dk = Array2::zeros(x.raw_dim());
        let mut dv = Array2::zeros(x.raw_dim());
        let mut pi = 0;
        for r in seg.iter() {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[pi];
                pi += 1;
                let qs = cache.q.slice(s![r.clone(), cols.clone()]);
                let ks = cache.k.slice(s![r.clone(), cols.clone()]);
                let vs = cache.v.slice(s![r.clone(), cols.clone()]);
                let dout = dmixed.slice(s![r.clone(), cols.clone()]);
                dv.slice_mut(s![r.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                let mut dz = dout.dot(&vs.t());
                for (mut drow, prow) in dz.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.iter().zip(prow).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - inner) * scale;
                    }
                }
                dq.slice_mut(s![r.clone(), cols.clone()]).assign(&dz.dot(&ks));
                dk.slice_mut(s![r.clone(), cols]).assign(&dz.t().dot(&qs));
            }
        }
        let mut dx = self.q.backward(x, dq.view(), &mut g.q);
        dx += &self.k.backward(x, dk.view(), &mut g.k);
        dx += &self.v.backward(x, dv.view(), &mut g.v);
        dx
    }
}

impl<T> Params<T> for SelfAttention<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        self.q.params(out);
        self.k.params(out);
        self.v.params(out);
        self.o.params(out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.q.params_mut(out);
        self.k.params_mut(out);
        self.v.params_mut(out);
        self.o.params_mut(out);
    }
}

/// Post-norm encoder layer: `y = LN2(x1 + FF(x1))`, `x1 = LN1(x + Attn(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn: SelfAttention<T>,
    pub ln1: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub ln2: LayerNorm<T>,
}

pub struct EncoderLayerCache<T> {
    x: Array2<T>,
    attn: AttentionCache<T>,
    ln1: LayerNormCache<T>,
    x1: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    ln2: LayerNormCache<T>,
}

impl<T: Real> EncoderLayer<T> {
    pub fn new(rng: &mut impl Rng, hidden: usize, heads: usize, ff: usize) -> Self {
        EncoderLayer {
            attn: SelfAttention::new(rng, hidden, heads),
            ln1: LayerNorm::new(hidden),
            ff1: Linear::new(rng, hidden, ff),
            ff2: Linear::new(rng, ff, hidden),
            ln2: LayerNorm::new(hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderLayer {
            attn: self.attn.zeros_like(),
            ln1: self.ln1.zeros_like(),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
            ln2: self.ln2.zeros_like(),
        }
    }

    pub fn forward(&self, x: Array2<T>, seg: &Segments) -> (Array2<T>, EncoderLayerCache<T>) {
        let (a, attn) = self.attn.forward(x.view(), seg);
        let (x1, ln1) = self.ln1.forward((&x + &a).view());
        let pre = self.ff1.forward(x1.view());
        let act = pre.mapv(gelu);
        let f = self.ff2.forward(act.view());
        let (y, ln2) = self.ln2.forward((&x1 + &f).view());
        (y, EncoderLayerCache { x, attn, ln1, x1, pre, act, ln2 })
    }

    pub fn backward(
        &self,
        seg: &Segments,
        c: &EncoderLayerCache<T>,
        dy: ArrayView2<T>,
        g: &mut Self,
    ) -> Array2<T> {
        let dsum2 = self.ln2.backward(&c.ln2, dy, &mut g.ln2);
        let dact = self.ff2.backward(c.act.view(), dsum2.view(), &mut g.ff2);
        let dpre = dact * &c.pre.mapv(gelu_grad);
        let mut dx1 = self.ff1.backward(c.x1.view(), dpre.view(), &mut g.ff1);
        dx1 += &dsum2;
        let dsum1 = self.ln1.backward(&c.ln1, dx1.view(), &mut g.ln1);
        let mut dx = self.attn.backward(c.x.view(), seg, &c.attn, dsum1.view(), &mut g.attn);
        dx += &dsum1;
        dx
    }
}

impl<T> Params<T> for EncoderLayer<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        self.attn.params(out);
        self.ln1.params(out);
        self.ff1.params(out);
        self.ff2.params(out);
        self.ln2.params(out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.attn.params_mut(out);
        self.ln1.params_mut(out);
        self.ff1.params_mut(out);
        self.ff2.params_mut(out);
        self.ln2.params_mut(out);
    }
}

/// Learned positions + a layer stack + per-segment mean pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoder<T> {
    /// `(max_len, hidden)`.
    pub positions: Array2<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

pub struct SequenceEncoderCache<T> {
    seg: Segments,
    layers: Vec<EncoderLayerCache<T>>,
}

impl<T: Real> SequenceEncoder<T> {
    pub fn new(rng: &mut impl Rng, max_len: usize, hidden: usize, heads: usize, ff: usize, depth: usize) -> Self {
        SequenceEncoder {
            positions: normal(rng, max_len, hidden, 0.02),
            layers: (0..depth).map(|_| EncoderLayer::new(rng, hidden, heads, ff)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SequenceEncoder {
            positions: Array2::zeros(self.positions.raw_dim()),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.nrows()
    }

    /// `x` holds the rows of every sequence back to back; returns one pooled
    /// row per segment.
    pub fn forward(&self, mut x: Array2<T>, seg: Segments) -> (Array2<T>, SequenceEncoderCache<T>) {
        for r in seg.iter() {
            let n = r.len();
            let mut rows = x.slice_mut(s![r, ..]);
            rows += &self.positions.slice(s![..n, ..]);
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(x, &seg);
            caches.push(c);
            x = y;
        }
        let mut pooled = Array2::zeros((seg.len(), x.ncols()));
        for (i, r) in seg.iter().enumerate() {
            let n = T::c(r.len() as f64);
            pooled.row_mut(i).assign(&(x.slice(s![r, ..]).sum_axis(Axis(0)) / n));
        }
        (pooled, SequenceEncoderCache { seg, layers: caches })
    }

    pub fn backward(&self, c: &SequenceEncoderCache<T>, dpooled: ArrayView2<T>, g: &mut Self) {
        let mut dx = Array2::zeros((c.seg.total(), dpooled.ncols()));
        for (i, r) in c.seg.iter().enumerate() {
            let n = T::c(r.len() as f64);
            let row = dpooled.row(i).mapv(|v| v / n);
            for mut out in dx.slice_mut(s![r, ..]).rows_mut() {
                out.assign(&row);
            }
        }
        for (layer, (lc, lg)) in self.layers.iter().zip(c.layers.iter().zip(g.layers.iter_mut())).rev() {
            dx = layer.backward(&c.seg, lc, dx.view(), lg);
        }
        for r in c.seg.iter() {
            let n = r.len();
            let mut gp = g.positions.slice_mut(s![..n, ..]);
            gp += &dx.slice(s![r, ..]);
        }
    }
}

impl<T> Params<T> for SequenceEncoder<T> {
    fn params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        out.push(flat(&self.positions));
        for l in &self.layers {
            l.params(out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(flat_mut(&mut self.positions));
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}
