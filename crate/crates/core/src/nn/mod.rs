//! Small dense numeric core: row-major matrices, a named parameter store,
//! layers with hand-derived backward passes and a finite-difference checker.
//!
//! Every activation is a 2-D matrix (tokens x features). Layers borrow the
//! parameter store immutably in the forward pass and write gradients into a
//! separate [`Grads`] buffer, so one store can serve many concurrent
//! forward passes.

pub mod gradcheck;
pub mod layers;

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating-point element type: `f32` for training, `f64` for verification.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// sizes and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "buffer of {} values cannot have shape [{rows}, {cols}]",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn add(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..start + n` as a new matrix.
    pub fn slice_rows(&self, start: usize, n: usize) -> Mat<T> {
        Mat {
            rows: n,
            cols: self.cols,
            data: self.data[start * self.cols..(start + n) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack(parts: &[&Mat<T>]) -> Mat<T> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for p in parts {
            debug_assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Mat {
            rows: data.len() / cols.max(1),
            cols,
            data,
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Mat<T>]) -> Mat<T> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                out.data[r * cols + c0..r * cols + c0 + p.cols].copy_from_slice(p.row(r));
                c0 += p.cols;
            }
        }
        out
    }

    /// Splits columns into blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Vec<Mat<T>> {
        let mut out: Vec<Mat<T>> = widths.iter().map(|w| Mat::zeros(self.rows, *w)).collect();
        for r in 0..self.rows {
            let mut c0 = 0;
            for (o, w) in out.iter_mut().zip(widths) {
                o.row_mut(r).copy_from_slice(&self.row(r)[c0..c0 + w]);
                c0 += w;
            }
        }
        out
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef {
            data: &self.data,
            off: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// View of columns `c0..c0 + width`.
    pub fn cols_view(&self, c0: usize, width: usize) -> MatRef<'_, T> {
        assert!(c0 + width <= self.cols);
        MatRef {
            data: &self.data,
            off: c0,
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }
}

/// Strided read-only view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<T> MatRef<'_, T> {
    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.off;
        }
        self.off + (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c[c0..c0+n cols] = alpha * a b + beta * c[..]`, where the destination
/// is a column block of `c`.
pub fn gemm_into<T: Scalar>(alpha: T, a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut Mat<T>, c0: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert!(c0 + b.cols <= c.cols, "output columns out of range");
    assert!(a.last_index() < a.data.len().max(1) && b.last_index() < b.data.len().max(1));
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let rsc = c.cols as isize;
    // SAFETY: bounds checked above; `c` is a distinct owned buffer.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.off),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c0),
            rsc,
            1,
        )
    }
}

/// `a b` as a new matrix.
pub fn matmul<T: Scalar>(a: MatRef<T>, b: MatRef<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_into(T::one(), a, b, T::zero(), &mut c, 0);
    c
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with variance `1 / fan_in`; the first dimension is fan-in.
    Kaiming,
    Zeros,
    Ones,
    /// Normal with std 0.02, for embeddings and anchors.
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Handle to one parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Collects parameter declarations in canonical order.
#[derive(Clone, Debug, Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// Ordered named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Seeded initialization from declarations.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut r = crate::rng::rng(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut values = Vec::with_capacity(specs.len());
        for s in specs {
            let n = s.rows * s.cols;
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Kaiming => {
                    let bound = (3.0 / s.rows.max(1) as f64).sqrt();
                    (0..n).map(|_| T::of(r.random_range(-bound..bound))).collect()
                }
                Init::Embedding => (0..n).map(|_| T::of(normal.sample(&mut r))).collect(),
            };
            values.push(Mat::from_vec(s.rows, s.cols, data)?);
        }
        Self::from_parts(specs.iter().map(|s| s.name.clone()).collect(), values)
    }

    pub fn from_parts(names: Vec<String>, values: Vec<Mat<T>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate parameter name {n:?}")));
            }
        }
        if names.len() != values.len() {
            return Err(Error::contract("parameter names and values differ in count"));
        }
        Ok(ParamStore { names, values, index })
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.index.get(name).map(|i| &self.values[*i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads(self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient slots mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Mat<T>>);

impl<T: Scalar> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: T) {
        for m in &mut self.0 {
            m.data.iter_mut().for_each(|v| *v = *v * k);
        }
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(Mat::fill_zero);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Mat::is_finite)
    }
}
