//! Layers with explicit forward caches and backward passes.

use super::{gemm_into, matmul, Grads, Init, Mat, ParamId, ParamStore, Scalar, SpecBuilder};
use crate::error::{Error, Result};

fn shape_err<T>(what: &str, want: [usize; 2], got: [usize; 2]) -> Result<T> {
    Err(Error::contract(format!("{what}: expected shape {want:?}, got {got:?}")))
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(sb: &mut SpecBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: sb.add(format!("{name}.w"), d_in, d_out, Init::Kaiming),
            b: Some(sb.add(format!("{name}.b"), 1, d_out, Init::Zeros)),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(sb: &mut SpecBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: sb.add(format!("{name}.w"), d_in, d_out, Init::Kaiming),
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn n_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.d_in {
            return shape_err("linear input", [x.rows, self.d_in], x.shape());
        }
        let mut y = Mat::zeros(x.rows, self.d_out);
        if let Some(b) = self.b {
            let b = ps.get(b);
            for r in 0..x.rows {
                y.row_mut(r).copy_from_slice(&b.data);
            }
        }
        gemm_into(T::one(), x.view(), ps.get(self.w).view(), T::one(), &mut y, 0);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        self.backward_params(g, x, dy);
        matmul(dy.view(), ps.get(self.w).view().t())
    }

    /// Parameter gradients only, for layers fed by constant inputs.
    pub fn backward_params<T: Scalar>(&self, g: &mut Grads<T>, x: &Mat<T>, dy: &Mat<T>) {
        gemm_into(T::one(), x.view().t(), dy.view(), T::one(), g.get_mut(self.w), 0);
        let Some(b) = self.b else { return };
        let db = g.get_mut(b);
        for r in 0..dy.rows {
            for (a, b) in db.data.iter_mut().zip(dy.row(r)) {
                *a = *a + *b;
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| v.max(T::zero())).collect(),
    }
}

/// Backward of [`relu`] given its input.
pub fn relu_backward<T: Scalar>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(x, d)| if *x > T::zero() { *d } else { T::zero() })
            .collect(),
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mx = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        if mx == T::neg_infinity() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// Column-wise max over rows; returns the pooled row and the winning row
/// index per column (first on ties).
pub fn max_pool_rows<T: Scalar>(x: &Mat<T>) -> (Mat<T>, Vec<usize>) {
    let mut out = Mat::zeros(1, x.cols);
    let mut arg = vec![0usize; x.cols];
    for c in 0..x.cols {
        let mut best = x.at(0, c);
        for r in 1..x.rows {
            let v = x.at(r, c);
            if v > best {
                best = v;
                arg[c] = r;
            }
        }
        out.data[c] = best;
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(rows: usize, arg: &[usize], dy: &[T]) -> Mat<T> {
    let mut dx = Mat::zeros(rows, arg.len());
    for (c, (r, d)) in arg.iter().zip(dy).enumerate() {
        dx.data[r * arg.len() + c] = *d;
    }
    dx
}

/// Rows of an embedding table.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(sb: &mut SpecBuilder, name: &str, n: usize, d: usize) -> Self {
        Embedding {
            table: sb.add(name, n, d, Init::Embedding),
            n,
            d,
        }
    }

    pub fn lookup<T: Scalar>(&self, ps: &ParamStore<T>, ids: &[usize]) -> Result<Mat<T>> {
        let t = ps.get(self.table);
        let mut out = Mat::zeros(ids.len(), self.d);
        for (r, &i) in ids.iter().enumerate() {
            if i >= self.n {
                return Err(Error::contract(format!("embedding index {i} out of range {}", self.n)));
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(out)
    }

    pub fn backward<T: Scalar>(&self, g: &mut Grads<T>, ids: &[usize], dy: &Mat<T>) {
        let gt = g.get_mut(self.table);
        for (r, &i) in ids.iter().enumerate() {
            for (a, b) in gt.row_mut(i).iter_mut().zip(dy.row(r)) {
                *a = *a + *b;
            }
        }
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

pub struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(sb: &mut SpecBuilder, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: sb.add(format!("{name}.gamma"), 1, d, Init::Ones),
            beta: sb.add(format!("{name}.beta"), 1, d, Init::Zeros),
            d,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, LnCache<T>)> {
        if x.cols != self.d {
            return shape_err("layer norm input", [x.rows, self.d], x.shape());
        }
        let g = &ps.get(self.gamma).data;
        let b = &ps.get(self.beta).data;
        let n = T::of(self.d as f64);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..x.cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * x.cols + c] = h;
                y.data[r * x.cols + c] = h * g[c] + b[c];
            }
        }
        Ok((y, LnCache { xhat, rstd }))
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, c: &LnCache<T>, dy: &Mat<T>) -> Mat<T> {
        let gamma = &ps.get(self.gamma).data;
        let d = self.d;
        let n = T::of(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        {
            let dg = g.get_mut(self.gamma);
            for r in 0..dy.rows {
                for k in 0..d {
                    dg.data[k] = dg.data[k] + dy.at(r, k) * c.xhat.at(r, k);
                }
            }
        }
        {
            let db = g.get_mut(self.beta);
            for r in 0..dy.rows {
                for k in 0..d {
                    db.data[k] = db.data[k] + dy.at(r, k);
                }
            }
        }
        for r in 0..dy.rows {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for k in 0..d {
                let dh = dy.at(r, k) * gamma[k];
                m1 = m1 + dh;
                m2 = m2 + dh * c.xhat.at(r, k);
            }
            m1 = m1 / n;
            m2 = m2 / n;
            for k in 0..d {
                let dh = dy.at(r, k) * gamma[k];
                dx.data[r * d + k] = c.rstd[r] * (dh - m1 - c.xhat.at(r, k) * m2);
            }
        }
        dx
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct AttnCache<T> {
    xq: Mat<T>,
    xkv: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Post-softmax weights per head, `[Tq, Tk]`.
    pub weights: Vec<Mat<T>>,
    concat: Mat<T>,
}

impl MultiHeadAttention {
    pub fn new(sb: &mut SpecBuilder, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model must be divisible by n_heads");
        MultiHeadAttention {
            q: Linear::new(sb, &format!("{name}.q"), d, d),
            // a key bias only shifts every score of a row equally
            k: Linear::without_bias(sb, &format!("{name}.k"), d, d),
            v: Linear::new(sb, &format!("{name}.v"), d, d),
            o: Linear::new(sb, &format!("{name}.o"), d, d),
            heads,
            d,
        }
    }

    pub fn n_params(d: usize) -> usize {
        4 * Linear::n_params(d, d) - d
    }

    /// `key_mask[j] == false` hides key `j` from every query.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        xq: &Mat<T>,
        xkv: &Mat<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Mat<T>, AttnCache<T>)> {
        if let Some(m) = key_mask {
            if m.len() != xkv.rows {
                return Err(Error::contract(format!(
                    "attention mask has {} entries for {} keys",
                    m.len(),
                    xkv.rows
                )));
            }
        }
        let q = self.q.forward(ps, xq)?;
        let k = self.k.forward(ps, xkv)?;
        let v = self.v.forward(ps, xkv)?;
        let dh = self.d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut concat = Mat::zeros(xq.rows, self.d);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = Mat::zeros(xq.rows, xkv.rows);
            gemm_into(scale, q.cols_view(h * dh, dh), k.cols_view(h * dh, dh).t(), T::zero(), &mut s, 0);
            if let Some(m) = key_mask {
                for r in 0..s.rows {
                    for (c, keep) in m.iter().enumerate() {
                        if !keep {
                            s.data[r * s.cols + c] = T::neg_infinity();
                        }
                    }
                }
            }
            softmax_rows(&mut s);
            gemm_into(T::one(), s.view(), v.cols_view(h * dh, dh), T::zero(), &mut concat, h * dh);
            weights.push(s);
        }
        let out = self.o.forward(ps, &concat)?;
        Ok((
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Grads<T>,
        c: &AttnCache<T>,
        dy: &Mat<T>,
    ) -> (Mat<T>, Mat<T>) {
        let dconcat = self.o.backward(ps, g, &c.concat, dy);
        let dh = self.d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let tq = c.q.rows;
        let tk = c.k.rows;
        let mut dq = Mat::zeros(tq, self.d);
        let mut dk = Mat::zeros(tk, self.d);
        let mut dv = Mat::zeros(tk, self.d);
        for h in 0..self.heads {
            let a = &c.weights[h];
            // dA = dO_h V_h^T
            let mut da = Mat::zeros(tq, tk);
            gemm_into(T::one(), dconcat.cols_view(h * dh, dh), c.v.cols_view(h * dh, dh).t(), T::zero(), &mut da, 0);
            // dV_h = A^T dO_h
            gemm_into(T::one(), a.view().t(), dconcat.cols_view(h * dh, dh), T::zero(), &mut dv, h * dh);
            // softmax backward, folded with the score scale
            for (drow, arow) in da.data.chunks_exact_mut(tk).zip(a.data.chunks_exact(tk)) {
                let dot = drow.iter().zip(arow).fold(T::zero(), |s, (d, p)| s + *d * *p);
                for (d, p) in drow.iter_mut().zip(arow) {
                    *d = *p * (*d - dot) * scale;
                }
            }
            gemm_into(T::one(), da.view(), c.k.cols_view(h * dh, dh), T::zero(), &mut dq, h * dh);
            gemm_into(T::one(), da.view().t(), c.q.cols_view(h * dh, dh), T::zero(), &mut dk, h * dh);
        }
        let dxq = self.q.backward(ps, g, &c.xq, &dq);
        let mut dxkv = self.k.backward(ps, g, &c.xkv, &dk);
        dxkv.add_assign(&self.v.backward(ps, g, &c.xkv, &dv));
        (dxq, dxkv)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct MlpCache<T> {
    x: Mat<T>,
    h: Mat<T>,
    a: Mat<T>,
}

impl Mlp {
    pub fn new(sb: &mut SpecBuilder, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            l1: Linear::new(sb, &format!("{name}.0"), d_in, d_hidden),
            l2: Linear::new(sb, &format!("{name}.1"), d_hidden, d_out),
        }
    }

    pub fn n_params(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
        Linear::n_params(d_in, d_hidden) + Linear::n_params(d_hidden, d_out)
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, MlpCache<T>)> {
        let h = self.l1.forward(ps, x)?;
        let a = relu(&h);
        let y = self.l2.forward(ps, &a)?;
        Ok((y, MlpCache { x: x.clone(), h, a }))
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, c: &MlpCache<T>, dy: &Mat<T>) -> Mat<T> {
        let da = self.l2.backward(ps, g, &c.a, dy);
        let dh = relu_backward(&c.h, &da);
        self.l1.backward(ps, g, &c.x, &dh)
    }

    /// Like [`Mlp::backward`] but skips the input gradient.
    pub fn backward_params<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, c: &MlpCache<T>, dy: &Mat<T>) {
        let da = self.l2.backward(ps, g, &c.a, dy);
        let dh = relu_backward(&c.h, &da);
        self.l1.backward_params(g, &c.x, &dh);
    }
}

/// Pre-norm transformer block: self-attention and a `d -> 2d -> d`
/// feed-forward layer, each with a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

pub struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ff: MlpCache<T>,
}

impl TransformerBlock {
    pub fn new(sb: &mut SpecBuilder, name: &str, d: usize, heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(sb, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(sb, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(sb, &format!("{name}.ln2"), d),
            ff: Mlp::new(sb, &format!("{name}.ff"), d, 2 * d, d),
        }
    }

    pub fn n_params(d: usize) -> usize {
        2 * (2 * d) + MultiHeadAttention::n_params(d) + Mlp::n_params(d, 2 * d, d)
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Mat<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Mat<T>, BlockCache<T>)> {
        let (a, ln1) = self.ln1.forward(ps, x)?;
        let (att, attn) = self.attn.forward(ps, &a, &a, key_mask)?;
        let h = x.add(&att);
        let (b, ln2) = self.ln2.forward(ps, &h)?;
        let (f, ff) = self.ff.forward(ps, &b)?;
        Ok((h.add(&f), BlockCache { ln1, attn, ln2, ff }))
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, c: &BlockCache<T>, dy: &Mat<T>) -> Mat<T> {
        let db = self.ff.backward(ps, g, &c.ff, dy);
        let mut dh = self.ln2.backward(ps, g, &c.ln2, &db);
        dh.add_assign(dy);
        let (dq, dkv) = self.attn.backward(ps, g, &c.attn, &dh);
        let da = dq.add(&dkv);
        let mut dx = self.ln1.backward(ps, g, &c.ln1, &da);
        dx.add_assign(&dh);
        dx
    }
}

/// Residual cross-attention: queries from `x`, keys and values from `m`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

pub struct CrossCache<T> {
    ln_q: LnCache<T>,
    ln_kv: LnCache<T>,
    attn: AttnCache<T>,
}

impl CrossAttention {
    pub fn new(sb: &mut SpecBuilder, name: &str, d: usize, heads: usize) -> Self {
        CrossAttention {
            ln_q: LayerNorm::new(sb, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(sb, &format!("{name}.ln_kv"), d),
            attn: MultiHeadAttention::new(sb, &format!("{name}.attn"), d, heads),
        }
    }

    pub fn n_params(d: usize) -> usize {
        2 * (2 * d) + MultiHeadAttention::n_params(d)
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Mat<T>, m: &Mat<T>) -> Result<(Mat<T>, CrossCache<T>)> {
        let (q, ln_q) = self.ln_q.forward(ps, x)?;
        let (kv, ln_kv) = self.ln_kv.forward(ps, m)?;
        let (att, attn) = self.attn.forward(ps, &q, &kv, None)?;
        Ok((x.add(&att), CrossCache { ln_q, ln_kv, attn }))
    }

    /// Returns `(dL/dx, dL/dm)`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Grads<T>,
        c: &CrossCache<T>,
        dy: &Mat<T>,
    ) -> (Mat<T>, Mat<T>) {
        let (dq, dkv) = self.attn.backward(ps, g, &c.attn, dy);
        let mut dx = self.ln_q.backward(ps, g, &c.ln_q, &dq);
        dx.add_assign(dy);
        let dm = self.ln_kv.backward(ps, g, &c.ln_kv, &dkv);
        (dx, dm)
    }
}
