//! Parameter storage and the building blocks of the transformer, each with a
//! hand-written backward pass.
//!
//! Activations are row-major `rows x dim` buffers. A batch is packed: the
//! token rows of all sequences are concatenated and [`Segments`] records
//! where each sequence starts, so no padding is ever materialized.

use rand::Rng;

use super::scalar::{gemm, matmul, Scalar, View};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All trainable tensors, addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn get(&self, id: usize) -> &[T] {
        &self.tensors[id].data
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            data: self
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Gradient buffers, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.data[id]
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.data {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Start offsets of the sequences in a packed batch; the last entry is the
/// total row count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            offsets.push(offsets.last().unwrap() + len);
        }
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.offsets[i + 1])
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), vec![inp, out], uniform(rng, inp * out, bound));
        let b = store.add(format!("{name}.bias"), vec![out], vec![T::zero(); out]);
        Linear { w, b, inp, out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let bias = p.get(self.b);
        let mut y = Vec::with_capacity(rows * self.out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        matmul(x, false, p.get(self.w), false, &mut y, rows, self.inp, self.out, true);
        y
    }

    /// Accumulates weight and bias gradients and returns `dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        self.backward_params(g, x, dy, rows);
        let mut dx = vec![T::zero(); rows * self.inp];
        matmul(dy, false, p.get(self.w), true, &mut dx, rows, self.out, self.inp, false);
        dx
    }

    pub fn backward_params<T: Scalar>(&self, g: &mut Grads<T>, x: &[T], dy: &[T], rows: usize) {
        matmul(x, true, dy, false, g.get_mut(self.w), self.inp, rows, self.out, true);
        let db = g.get_mut(self.b);
        for row in dy.chunks_exact(self.out) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), vec![dim], vec![T::one(); dim]);
        let bias = store.add(format!("{name}.bias"), vec![dim], vec![T::zero(); dim]);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let (gain, bias) = (p.get(self.gain), p.get(self.bias));
        let n = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gain[j] + bias[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        let gain = p.get(self.gain);
        {
            let dg = g.get_mut(self.gain);
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += dy[r * d + j] * cache.xhat[r * d + j];
                }
            }
        }
        {
            let db = g.get_mut(self.bias);
            for row in dy.chunks_exact(d) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let n = T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut sum = T::zero();
            let mut sum_xh = T::zero();
            for j in 0..d {
                let dxh = dy[r * d + j] * gain[j];
                sum += dxh;
                sum_xh += dxh * xh[j];
            }
            let (mean, mean_xh) = (sum / n, sum_xh / n);
            for j in 0..d {
                let dxh = dy[r * d + j] * gain[j];
                dx[r * d + j] = cache.inv_std[r] * (dxh - mean - xh[j] * mean_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        ff: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d, ff),
            down: Linear::new(store, rng, &format!("{name}.down"), ff, d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        rows: usize,
    ) -> (Vec<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(p, x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.down.forward(p, &act, rows);
        (out, FeedForwardCache { pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &[T],
        cache: &FeedForwardCache<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let mut dact = self.down.backward(p, g, &cache.act, dy, rows);
        for (d, &pre) in dact.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(pre);
        }
        self.up.backward(p, g, x, &dact, rows)
    }
}

/// Multi-head scaled dot-product attention over packed sequences.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Which keys a query may attend to.
#[derive(Clone, Copy)]
pub struct AttentionMask<'a> {
    /// Query `i` may only see keys `j <= i` of the same sequence.
    pub causal: bool,
    /// Per key row of the packed batch: `false` marks padding.
    pub key_valid: &'a [bool],
}

pub struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
    ctx: Vec<T>,
}

/// Softmax of one score row in place; masked entries become exactly zero.
/// A row with no visible key becomes all zeros.
fn masked_softmax<T: Scalar>(row: &mut [T], visible: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &s) in row.iter().enumerate() {
        if visible(j) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, s) in row.iter_mut().enumerate() {
        if visible(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = T::zero();
        }
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `xq` holds the query rows laid out by `q_seg`; `xkv` the key/value
    /// rows laid out by `k_seg`. Sequence `i` of one attends to sequence `i`
    /// of the other.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        xq: &[T],
        q_seg: &Segments,
        xkv: &[T],
        k_seg: &Segments,
        mask: AttentionMask<'_>,
    ) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(p, xq, q_seg.total());
        let k = self.k.forward(p, xkv, k_seg.total());
        let v = self.v.forward(p, xkv, k_seg.total());

        let mut prob_offsets = vec![0];
        for s in 0..q_seg.count() {
            let (q0, q1) = q_seg.range(s);
            let (k0, k1) = k_seg.range(s);
            let block = (q1 - q0) * (k1 - k0);
            for _ in 0..self.heads {
                prob_offsets.push(prob_offsets.last().unwrap() + block);
            }
        }
        let mut probs = vec![T::zero(); *prob_offsets.last().unwrap()];
        let mut ctx = vec![T::zero(); q_seg.total() * d];

        for s in 0..q_seg.count() {
            let (q0, q1) = q_seg.range(s);
            let (k0, k1) = k_seg.range(s);
            let (lq, lk) = (q1 - q0, k1 - k0);
            for h in 0..self.heads {
                let off = prob_offsets[s * self.heads + h];
                gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    View::at(&q, q0 * d + h * dh, d, 1),
                    View::at(&k, k0 * d + h * dh, 1, d),
                    T::zero(),
                    &mut probs,
                    off,
                    lk,
                );
                for i in 0..lq {
                    let row = &mut probs[off + i * lk..off + (i + 1) * lk];
                    masked_softmax(row, |j| mask.key_valid[k0 + j] && !(mask.causal && j > i));
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    View::at(&probs, off, lk, 1),
                    View::at(&v, k0 * d + h * dh, d, 1),
                    T::zero(),
                    &mut ctx,
                    q0 * d + h * dh,
                    d,
                );
            }
        }
        let out = self.o.forward(p, &ctx, q_seg.total());
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                prob_offsets,
                ctx,
            },
        )
    }

    /// Returns `(d_xq, d_xkv)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        xq: &[T],
        q_seg: &Segments,
        xkv: &[T],
        k_seg: &Segments,
        cache: &AttentionCache<T>,
        dout: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.o.backward(p, g, &cache.ctx, dout, q_seg.total());
        let mut dq = vec![T::zero(); q_seg.total() * d];
        let mut dk = vec![T::zero(); k_seg.total() * d];
        let mut dv = vec![T::zero(); k_seg.total() * d];
        let mut dscore: Vec<T> = Vec::new();

        for s in 0..q_seg.count() {
            let (q0, q1) = q_seg.range(s);
            let (k0, k1) = k_seg.range(s);
            let (lq, lk) = (q1 - q0, k1 - k0);
            if lq == 0 || lk == 0 {
                continue;
            }
            dscore.clear();
            dscore.resize(lq * lk, T::zero());
            for h in 0..self.heads {
                let off = cache.prob_offsets[s * self.heads + h];
                let probs = &cache.probs[off..off + lq * lk];
                // dP = dctx V^T
                gemm(
                    lq,
                    dh,
                    lk,
                    T::one(),
                    View::at(&dctx, q0 * d + h * dh, d, 1),
                    View::at(&cache.v, k0 * d + h * dh, 1, d),
                    T::zero(),
                    &mut dscore,
                    0,
                    lk,
                );
                // dV += P^T dctx
                gemm(
                    lk,
                    lq,
                    dh,
                    T::one(),
                    View::at(probs, 0, 1, lk),
                    View::at(&dctx, q0 * d + h * dh, d, 1),
                    T::one(),
                    &mut dv,
                    k0 * d + h * dh,
                    d,
                );
                for i in 0..lq {
                    let pr = &probs[i * lk..(i + 1) * lk];
                    let ds = &mut dscore[i * lk..(i + 1) * lk];
                    let dot = pr.iter().zip(ds.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (dsj, &pj) in ds.iter_mut().zip(pr) {
                        *dsj = pj * (*dsj - dot) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    View::at(&dscore, 0, lk, 1),
                    View::at(&cache.k, k0 * d + h * dh, d, 1),
                    T::one(),
                    &mut dq,
                    q0 * d + h * dh,
                    d,
                );
                gemm(
                    lk,
                    lq,
                    dh,
                    T::one(),
                    View::at(&dscore, 0, 1, lk),
                    View::at(&cache.q, q0 * d + h * dh, d, 1),
                    T::one(),
                    &mut dk,
                    k0 * d + h * dh,
                    d,
                );
            }
        }
        let dxq = self.q.backward(p, g, xq, &dq, q_seg.total());
        let mut dxkv = self.k.backward(p, g, xkv, &dk, k_seg.total());
        let dxv = self.v.backward(p, g, xkv, &dv, k_seg.total());
        for (a, b) in dxkv.iter_mut().zip(dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }

    /// One query row against cached keys and values (`len` rows each).
    /// Used by incremental decoding.
    pub fn attend_cached<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        q_row: &[T],
        keys: &[T],
        values: &[T],
        key_valid: Option<&[bool]>,
    ) -> Vec<T> {
        let d = self.dim;
        let dh = self.head_dim();
        let len = keys.len() / d;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut ctx = vec![T::zero(); d];
        let mut scores = vec![T::zero(); len];
        for h in 0..self.heads {
            gemm(
                1,
                dh,
                len,
                scale,
                View::at(q_row, h * dh, d, 1),
                View::at(keys, h * dh, 1, d),
                T::zero(),
                &mut scores,
                0,
                len,
            );
            masked_softmax(&mut scores, |j| key_valid.is_none_or(|m| m[j]));
            gemm(
                1,
                len,
                dh,
                T::one(),
                View::at(&scores, 0, len, 1),
                View::at(values, h * dh, d, 1),
                T::zero(),
                &mut ctx,
                h * dh,
                d,
            );
        }
        self.o.forward(p, &ctx, 1)
    }
}

/// Inverted dropout in place; returns the scaled keep-mask, or `None` when
/// nothing was dropped.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &mut [T],
    rate: f64,
    rng: Option<&mut R>,
) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub fn dropout_backward<T: Scalar>(dy: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        None => dy.to_vec(),
        Some(m) => dy.iter().zip(m).map(|(&a, &b)| a * b).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn masked_softmax_handles_fully_masked_rows() {
        let mut row = [1.0f64, 2.0, 3.0];
        masked_softmax(&mut row, |_| false);
        assert_eq!(row, [0.0; 3]);
        let mut row = [1.0f64, 2.0, 3.0];
        masked_softmax(&mut row, |j| j != 2);
        assert_eq!(row[2], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn segments_layout() {
        let s = Segments::from_lengths([2, 0, 3]);
        assert_eq!(s.offsets, [0, 2, 2, 5]);
        assert_eq!(s.count(), 3);
        assert_eq!(s.range(2), (2, 5));
    }
}
