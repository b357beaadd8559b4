//! Array-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles together
//! with its value. [`Tape::gradients`] walks the record backwards and returns
//! the derivative of a scalar loss with respect to every registered leaf.
//!
//! Model code is written once against the [`Ops`] trait and runs either on a
//! tape (training) or on plain arrays through [`Eager`] (inference).

use crate::array::{gemm, Array};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-block layout of a batch of directional Taylor jets.
///
/// Rows are grouped into `1 + kx + kt` blocks of `n` rows: the value block,
/// then the normalized x-direction coefficients of order `1..=kx`, then the
/// t-direction coefficients of order `1..=kt`. The two directions share the
/// value block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub n: usize,
    pub kx: usize,
    pub kt: usize,
}

impl JetLayout {
    pub fn blocks(&self) -> usize {
        1 + self.kx + self.kt
    }

    pub fn rows(&self) -> usize {
        self.n * self.blocks()
    }

    /// First row of the x-direction coefficient of order `k ≥ 1`.
    pub fn x_block(&self, k: usize) -> usize {
        assert!(k >= 1 && k <= self.kx);
        k * self.n
    }

    pub fn t_block(&self, k: usize) -> usize {
        assert!(k >= 1 && k <= self.kt);
        (1 + self.kx + k - 1) * self.n
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias { a: Var, bias: Var, rows: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize },
    Tanh(Var),
    Sigmoid(Var),
    JetTanh(Var, JetLayout),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanSquare(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
}

/// Gradients of one loss, one entry per registered leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: Vec<Var>,
    grads: Vec<Array>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> &Array {
        let i = self
            .leaves
            .iter()
            .position(|&l| l == leaf)
            .expect("not a leaf of this tape");
        &self.grads[i]
    }

    /// Gradients in leaf registration order.
    pub fn in_order(&self) -> &[Array] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Array> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a differentiable parameter.
    pub fn leaf(&mut self, value: Array) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.leaves.push(v);
        v
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul_bt(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scaled(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// Adds the row vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let rows = self.value(a).rows();
        self.add_bias_rows(a, bias, rows)
    }

    /// Adds `bias` to the first `rows` rows of `a` only (the value block of
    /// a jet batch; derivative blocks carry no bias).
    pub fn add_bias_rows(&mut self, a: Var, bias: Var, rows: usize) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        let cols = v.cols();
        assert_eq!(b.len(), cols, "bias length {} vs {} columns", b.len(), cols);
        for r in 0..rows {
            for (x, y) in v.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b.data())
            {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddBias { a, bias, rows }, ng)
    }

    /// `x · wᵀ` with the row vector `b` added to the first `rows` rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, rows: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = xv.dims2();
        let (n, k2) = wv.dims2();
        assert_eq!(k, k2, "linear: input width {k} vs weight {n}×{k2}");
        assert_eq!(bv.len(), n, "linear: bias length {} vs {n}", bv.len());
        assert!(rows <= m);
        let mut out = vec![0.0; m * n];
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), (k, 1), wv.data(), (1, k), &mut out, 1.0);
        let v = Array::from_vec(vec![m, n], out).expect("linear shape");
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Linear { x, w, b, rows }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Elementwise `tanh` of a jet batch laid out per `layout`.
    pub fn jet_tanh(&mut self, a: Var, layout: JetLayout) -> Var {
        let input = self.value(a);
        assert_eq!(input.rows(), layout.rows(), "jet layout mismatch");
        let v = jet_tanh_forward(input, layout);
        let ng = self.ng(a);
        self.push(v, Op::JetTanh(a, layout), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let arrays: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Array::concat_rows(&arrays).unwrap_or_else(|e| panic!("{e}"));
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `mean(a²)` as a 1×1 array.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array::scalar(x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanSquare(a), ng)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a.data()[0]
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let l = self.scalar(loss);
        if !l.is_finite() {
            return Err(Error::numeric("loss", l));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Const => {}
                &Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = av.dims2();
                    let n = bv.cols();
                    if self.ng(a) {
                        // dA = G · Bᵀ
                        let ga = accum_slot(&mut grads, a, av);
                        gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), ga, 1.0);
                    }
                    if self.ng(b) {
                        // dB = Aᵀ · G
                        let gb = accum_slot(&mut grads, b, bv);
                        gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), gb, 1.0);
                    }
                }
                &Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = av.dims2();
                    let n = bv.rows();
                    if self.ng(a) {
                        // dA = G · B
                        let ga = accum_slot(&mut grads, a, av);
                        gemm(m, n, k, g.data(), (n, 1), bv.data(), (k, 1), ga, 1.0);
                    }
                    if self.ng(b) {
                        // dB = Gᵀ · A
                        let gb = accum_slot(&mut grads, b, bv);
                        gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), gb, 1.0);
                    }
                }
                &Op::Add(a, b) => {
                    self.accum_with(&mut grads, a, &g, |g, _| g);
                    self.accum_with(&mut grads, b, &g, |g, _| g);
                }
                &Op::Sub(a, b) => {
                    self.accum_with(&mut grads, a, &g, |g, _| g);
                    self.accum_with(&mut grads, b, &g, |g, _| -g);
                }
                &Op::Mul(a, b) => {
                    if self.ng(a) {
                        let bv = self.value(b);
                        let slot = accum_slot(&mut grads, a, self.value(a));
                        for ((s, &gi), &bi) in slot.iter_mut().zip(g.data()).zip(bv.data()) {
                            *s += gi * bi;
                        }
                    }
                    if self.ng(b) {
                        let av = self.value(a);
                        let slot = accum_slot(&mut grads, b, self.value(b));
                        for ((s, &gi), &ai) in slot.iter_mut().zip(g.data()).zip(av.data()) {
                            *s += gi * ai;
                        }
                    }
                }
                &Op::Scale(a, c) => self.accum_with(&mut grads, a, &g, |g, _| g * c),
                &Op::AddScalar(a) => self.accum_with(&mut grads, a, &g, |g, _| g),
                &Op::AddBias { a, bias, rows } => {
                    self.accum_with(&mut grads, a, &g, |g, _| g);
                    if self.ng(bias) {
                        let cols = g.cols();
                        let slot = accum_slot(&mut grads, bias, self.value(bias));
                        for r in 0..rows {
                            for (s, gi) in slot.iter_mut().zip(g.row(r)) {
                                *s += gi;
                            }
                        }
                        debug_assert_eq!(slot.len(), cols);
                    }
                }
                &Op::Linear { x, w, b, rows } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (m, k) = xv.dims2();
                    let n = wv.rows();
                    if self.ng(x) {
                        let gx = accum_slot(&mut grads, x, xv);
                        gemm(m, n, k, g.data(), (n, 1), wv.data(), (k, 1), gx, 1.0);
                    }
                    if self.ng(w) {
                        let gw = accum_slot(&mut grads, w, wv);
                        gemm(n, m, k, g.data(), (1, n), xv.data(), (k, 1), gw, 1.0);
                    }
                    if self.ng(b) {
                        let slot = accum_slot(&mut grads, b, self.value(b));
                        for r in 0..rows {
                            for (s, gi) in slot.iter_mut().zip(g.row(r)) {
                                *s += gi;
                            }
                        }
                    }
                }
                &Op::Tanh(a) => {
                    let y = &node.value;
                    if self.ng(a) {
                        let slot = accum_slot(&mut grads, a, self.value(a));
                        for ((s, &gi), &yi) in slot.iter_mut().zip(g.data()).zip(y.data()) {
                            *s += gi * (1.0 - yi * yi);
                        }
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    if self.ng(a) {
                        let slot = accum_slot(&mut grads, a, self.value(a));
                        for ((s, &gi), &yi) in slot.iter_mut().zip(g.data()).zip(y.data()) {
                            *s += gi * yi * (1.0 - yi);
                        }
                    }
                }
                &Op::JetTanh(a, layout) => {
                    let input = self.value(a);
                    let slot = accum_slot(&mut grads, a, input);
                    jet_tanh_backward(input, &node.value, &g, layout, slot);
                }
                &Op::SliceRows { a, start } => {
                    if self.ng(a) {
                        let cols = g.cols();
                        let slot = accum_slot(&mut grads, a, self.value(a));
                        for (s, gi) in slot[start * cols..start * cols + g.len()]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *s += gi;
                        }
                    }
                }
                &Op::SliceCols { a, start } => {
                    if self.ng(a) {
                        let (r, len) = g.dims2();
                        let cols = self.value(a).cols();
                        let slot = accum_slot(&mut grads, a, self.value(a));
                        for i in 0..r {
                            for j in 0..len {
                                slot[i * cols + start + j] += g.data()[i * len + j];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.ng(p) {
                            let slot = accum_slot(&mut grads, p, self.value(p));
                            for (s, gi) in slot.iter_mut().zip(&g.data()[offset..offset + n]) {
                                *s += gi;
                            }
                        }
                        offset += n;
                    }
                }
                &Op::Sum(a) => {
                    let gv = g.data()[0];
                    self.accum_with(&mut grads, a, &g, |_, _| gv);
                }
                &Op::MeanSquare(a) => {
                    let gv = g.data()[0];
                    let x = self.value(a);
                    let c = 2.0 * gv / x.len() as f64;
                    if self.ng(a) {
                        let slot = accum_slot(&mut grads, a, x);
                        for (s, &xi) in slot.iter_mut().zip(x.data()) {
                            *s += c * xi;
                        }
                    }
                }
            }
        }

        let grads = self
            .leaves
            .iter()
            .map(|&l| {
                grads[l.0]
                    .take()
                    .unwrap_or_else(|| Array::zeros(self.value(l).shape()))
            })
            .collect();
        Ok(Gradients {
            leaves: self.leaves.clone(),
            grads,
        })
    }

    /// Accumulates `f(g_i, i)` into the gradient of `a`, elementwise over
    /// `a`'s shape (`g` is broadcast when it is 1×1).
    fn accum_with(
        &self,
        grads: &mut [Option<Array>],
        a: Var,
        g: &Array,
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.ng(a) {
            return;
        }
        let slot = accum_slot(grads, a, self.value(a));
        if g.len() == slot.len() {
            for (i, (s, &gi)) in slot.iter_mut().zip(g.data()).enumerate() {
                *s += f(gi, i);
            }
        } else {
            let gi = g.data()[0];
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(gi, i);
            }
        }
    }
}

fn accum_slot<'a>(grads: &'a mut [Option<Array>], v: Var, like: &Array) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Array::zeros(like.shape()))
        .data_mut()
}

/// Taylor coefficients of `g(z(h))` along one direction, given the
/// normalized derivatives `d[j] = g⁽ʲ⁾(z₀)/j!` and input coefficients
/// `z[1..=k]`. Writes `y[1..=k]`.
#[inline]
fn series_compose(d: &[f64; 6], z: &[f64; 5], k: usize, y: &mut [f64; 5]) {
    let (z1, z2, z3, z4) = (z[1], z[2], z[3], z[4]);
    if k >= 1 {
        y[1] = d[1] * z1;
    }
    if k >= 2 {
        y[2] = d[1] * z2 + d[2] * z1 * z1;
    }
    if k >= 3 {
        y[3] = d[1] * z3 + 2.0 * d[2] * z1 * z2 + d[3] * z1 * z1 * z1;
    }
    if k >= 4 {
        y[4] = d[1] * z4
            + d[2] * (z2 * z2 + 2.0 * z1 * z3)
            + 3.0 * d[3] * z1 * z1 * z2
            + d[4] * z1 * z1 * z1 * z1;
    }
}

/// Adjoint of [`series_compose`]: accumulates into `dz[0..=k]` given the
/// output adjoints `gy[1..=k]`.
#[inline]
fn series_compose_adjoint(d: &[f64; 6], z: &[f64; 5], k: usize, gy: &[f64; 5], dz: &mut [f64; 5]) {
    let (z1, z2, z3, z4) = (z[1], z[2], z[3], z[4]);
    // derivative of d[j] with respect to z0 is (j+1) d[j+1]
    let dd = [d[1], 2.0 * d[2], 3.0 * d[3], 4.0 * d[4], 5.0 * d[5]];
    if k >= 1 {
        let g = gy[1];
        dz[0] += g * dd[1] * z1;
        dz[1] += g * d[1];
    }
    if k >= 2 {
        let g = gy[2];
        dz[0] += g * (dd[1] * z2 + dd[2] * z1 * z1);
        dz[2] += g * d[1];
        dz[1] += g * 2.0 * d[2] * z1;
    }
    if k >= 3 {
        let g = gy[3];
        dz[0] += g * (dd[1] * z3 + 2.0 * dd[2] * z1 * z2 + dd[3] * z1 * z1 * z1);
        dz[3] += g * d[1];
        dz[2] += g * 2.0 * d[2] * z1;
        dz[1] += g * (2.0 * d[2] * z2 + 3.0 * d[3] * z1 * z1);
    }
    if k >= 4 {
        let g = gy[4];
        dz[0] += g
            * (dd[1] * z4
                + dd[2] * (z2 * z2 + 2.0 * z1 * z3)
                + 3.0 * dd[3] * z1 * z1 * z2
                + dd[4] * z1 * z1 * z1 * z1);
        dz[4] += g * d[1];
        dz[3] += g * 2.0 * d[2] * z1;
        dz[2] += g * (2.0 * d[2] * z2 + 3.0 * d[3] * z1 * z1);
        dz[1] += g * (2.0 * d[2] * z3 + 6.0 * d[3] * z1 * z2 + 4.0 * d[4] * z1 * z1 * z1);
    }
}

/// Normalized tanh derivatives from the value `g = tanh(z)`.
#[inline(always)]
fn tanh_series_from_value(g: f64) -> [f64; 6] {
    let g2 = g * g;
    let s = 1.0 - g2;
    [
        g,
        s,
        -g * s,
        s * (6.0 * g2 - 2.0) * (1.0 / 6.0),
        g * s * (16.0 - 24.0 * g2) * (1.0 / 24.0),
        (s * (s - 2.0 * g2) * (16.0 - 24.0 * g2) - 48.0 * g2 * s * s) * (1.0 / 120.0),
    ]
}

/// Splits a jet batch into its value block and the coefficient blocks of
/// each direction.
fn split_blocks(data: &[f64], block: usize, kx: usize, kt: usize) -> (&[f64], Vec<&[f64]>, Vec<&[f64]>) {
    let mut chunks = data.chunks_exact(block);
    let v = chunks.next().unwrap_or(&[]);
    let xs = (0..kx).map(|_| chunks.next().unwrap()).collect();
    let ts = (0..kt).map(|_| chunks.next().unwrap()).collect();
    (v, xs, ts)
}

fn split_blocks_mut(data: &mut [f64], block: usize, kx: usize, kt: usize) -> (&mut [f64], Vec<&mut [f64]>, Vec<&mut [f64]>) {
    let mut chunks = data.chunks_exact_mut(block);
    let v = chunks.next().unwrap_or(&mut []);
    let xs = (0..kx).map(|_| chunks.next().unwrap()).collect();
    let ts = (0..kt).map(|_| chunks.next().unwrap()).collect();
    (v, xs, ts)
}

#[inline(always)]
fn compose_dir<const K: usize>(d: &[f64; 6], z0: f64, zin: &[&[f64]], out: &mut [&mut [f64]], idx: usize) {
    if K == 0 {
        return;
    }
    let mut z = [z0, 0.0, 0.0, 0.0, 0.0];
    for j in 0..K {
        z[j + 1] = zin[j][idx];
    }
    let mut y = [0.0; 5];
    series_compose(d, &z, K, &mut y);
    for j in 0..K {
        out[j][idx] = y[j + 1];
    }
}

#[inline(always)]
fn adjoint_dir<const K: usize>(
    d: &[f64; 6],
    z0: f64,
    zin: &[&[f64]],
    gout: &[&[f64]],
    slot: &mut [&mut [f64]],
    idx: usize,
) -> f64 {
    if K == 0 {
        return 0.0;
    }
    let mut z = [z0, 0.0, 0.0, 0.0, 0.0];
    let mut gy = [0.0; 5];
    for j in 0..K {
        z[j + 1] = zin[j][idx];
        gy[j + 1] = gout[j][idx];
    }
    let mut dz = [0.0; 5];
    series_compose_adjoint(d, &z, K, &gy, &mut dz);
    for j in 0..K {
        slot[j][idx] += dz[j + 1];
    }
    dz[0]
}

fn jet_tanh_forward_k<const KX: usize, const KT: usize>(input: &[f64], out: &mut [f64], block: usize) {
    let (v, xs, ts) = split_blocks(input, block, KX, KT);
    let (ov, mut oxs, mut ots) = split_blocks_mut(out, block, KX, KT);
    for idx in 0..block {
        let z0 = v[idx];
        let d = tanh_series_from_value(z0.tanh());
        ov[idx] = d[0];
        compose_dir::<KX>(&d, z0, &xs, &mut oxs, idx);
        compose_dir::<KT>(&d, z0, &ts, &mut ots, idx);
    }
}

fn jet_tanh_backward_k<const KX: usize, const KT: usize>(
    input: &[f64],
    output: &[f64],
    g: &[f64],
    slot: &mut [f64],
    block: usize,
) {
    let (v, xs, ts) = split_blocks(input, block, KX, KT);
    let (gv, gxs, gts) = split_blocks(g, block, KX, KT);
    let (sv, mut sxs, mut sts) = split_blocks_mut(slot, block, KX, KT);
    for idx in 0..block {
        let z0 = v[idx];
        let d = tanh_series_from_value(output[idx]);
        let mut acc = gv[idx] * d[1];
        acc += adjoint_dir::<KX>(&d, z0, &xs, &gxs, &mut sxs, idx);
        acc += adjoint_dir::<KT>(&d, z0, &ts, &gts, &mut sts, idx);
        sv[idx] += acc;
    }
}

macro_rules! dispatch_orders {
    ($kx:expr, $kt:expr, $f:ident, $($arg:expr),*) => {
        match ($kx, $kt) {
            (0, 0) => $f::<0, 0>($($arg),*),
            (0, 1) => $f::<0, 1>($($arg),*),
            (0, 2) => $f::<0, 2>($($arg),*),
            (1, 0) => $f::<1, 0>($($arg),*),
            (1, 1) => $f::<1, 1>($($arg),*),
            (1, 2) => $f::<1, 2>($($arg),*),
            (2, 0) => $f::<2, 0>($($arg),*),
            (2, 1) => $f::<2, 1>($($arg),*),
            (2, 2) => $f::<2, 2>($($arg),*),
            (3, 0) => $f::<3, 0>($($arg),*),
            (3, 1) => $f::<3, 1>($($arg),*),
            (4, 0) => $f::<4, 0>($($arg),*),
            (4, 1) => $f::<4, 1>($($arg),*),
            (4, 2) => $f::<4, 2>($($arg),*),
            (0, 3) => $f::<0, 3>($($arg),*),
            (0, 4) => $f::<0, 4>($($arg),*),
            (kx, kt) => panic!("unsupported jet orders ({kx}, {kt})"),
        }
    };
}

fn jet_tanh_forward(input: &Array, layout: JetLayout) -> Array {
    let block = layout.n * input.cols();
    let mut out = vec![0.0; input.len()];
    dispatch_orders!(layout.kx, layout.kt, jet_tanh_forward_k, input.data(), &mut out, block);
    Array::from_vec(input.shape().to_vec(), out).expect("jet shape")
}

fn jet_tanh_backward(input: &Array, output: &Array, g: &Array, layout: JetLayout, slot: &mut [f64]) {
    let block = layout.n * input.cols();
    dispatch_orders!(
        layout.kx,
        layout.kt,
        jet_tanh_backward_k,
        input.data(),
        output.data(),
        g.data(),
        slot,
        block
    );
}

/// Operations shared by taped and eager evaluation.
pub trait Ops {
    type V: Clone;
    fn constant(&mut self, a: Array) -> Self::V;
    fn value_of<'a>(&'a self, v: &'a Self::V) -> &'a Array;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_bias(&mut self, a: &Self::V, bias: &Self::V) -> Self::V;
    fn matmul_bt(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    /// `x · wᵀ + b`, the bias broadcast over every row.
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Self::V;
    fn slice_rows(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V;
}

impl Ops for Tape {
    type V = Var;
    fn constant(&mut self, a: Array) -> Var {
        Tape::constant(self, a)
    }
    fn value_of<'a>(&'a self, v: &'a Var) -> &'a Array {
        self.value(*v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        Tape::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        Tape::mul(self, *a, *b)
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        Tape::scale(self, *a, c)
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        Tape::add_scalar(self, *a, c)
    }
    fn add_bias(&mut self, a: &Var, bias: &Var) -> Var {
        Tape::add_bias(self, *a, *bias)
    }
    fn matmul_bt(&mut self, a: &Var, b: &Var) -> Var {
        Tape::matmul_bt(self, *a, *b)
    }
    fn tanh(&mut self, a: &Var) -> Var {
        Tape::tanh(self, *a)
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        Tape::sigmoid(self, *a)
    }
    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        let rows = self.value(*x).rows();
        Tape::linear(self, *x, *w, *b, rows)
    }
    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Var {
        Tape::slice_rows(self, *a, start, len)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        Tape::concat_rows(self, parts)
    }
}

/// Plain array evaluation with the [`Ops`] interface.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Array;
    fn constant(&mut self, a: Array) -> Array {
        a
    }
    fn value_of<'a>(&'a self, v: &'a Array) -> &'a Array {
        v
    }
    fn add(&mut self, a: &Array, b: &Array) -> Array {
        a.zip_map(b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Array, b: &Array) -> Array {
        a.zip_map(b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Array, b: &Array) -> Array {
        a.zip_map(b, |x, y| x * y)
    }
    fn scale(&mut self, a: &Array, c: f64) -> Array {
        a.scaled(c)
    }
    fn add_scalar(&mut self, a: &Array, c: f64) -> Array {
        a.map(|x| x + c)
    }
    fn add_bias(&mut self, a: &Array, bias: &Array) -> Array {
        let mut out = a.clone();
        let cols = out.cols();
        assert_eq!(bias.len(), cols);
        for row in out.data_mut().chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        out
    }
    fn matmul_bt(&mut self, a: &Array, b: &Array) -> Array {
        a.matmul_bt(b).unwrap_or_else(|e| panic!("{e}"))
    }
    fn tanh(&mut self, a: &Array) -> Array {
        a.map(f64::tanh)
    }
    fn sigmoid(&mut self, a: &Array) -> Array {
        a.map(|x| 1.0 / (1.0 + (-x).exp()))
    }
    fn linear(&mut self, x: &Array, w: &Array, b: &Array) -> Array {
        let z = x.matmul_bt(w).unwrap_or_else(|e| panic!("{e}"));
        self.add_bias(&z, b)
    }
    fn slice_rows(&mut self, a: &Array, start: usize, len: usize) -> Array {
        a.slice_rows(start, len)
    }
    fn concat_rows(&mut self, parts: &[Array]) -> Array {
        let refs: Vec<&Array> = parts.iter().collect();
        Array::concat_rows(&refs).unwrap_or_else(|e| panic!("{e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{DiffScalar, Scalar};

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_gradient_closed_form() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::scalar(0.3));
        let y = tape.tanh(w);
        let loss = tape.sum(y);
        let g = tape.gradients(loss).unwrap().get(w).data()[0];
        // 1 - tanh²(0.3), evaluated independently
        assert!((g - 0.915_136_961_826_629_2).abs() < 1e-12);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::vector(vec![1.0, -1.0]));
        let unused = tape.leaf(Array::zeros(&[2, 3]));
        let loss = tape.mean_square(a);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(unused), &Array::zeros(&[2, 3]));
        assert_eq!(g.in_order().len(), 2);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::scalar(f64::NAN));
        let loss = tape.sum(a);
        match tape.gradients(loss) {
            Err(Error::Numeric { value, .. }) => assert!(value.is_nan()),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn jet_tanh_matches_diff_scalar() {
        // two points, one column, x-jet to order 4 and t-jet to order 2
        let layout = JetLayout { n: 2, kx: 4, kt: 2 };
        let z = |x: DiffScalar, t: DiffScalar| {
            (x.scale(0.7) + t.scale(-0.4)).offset(0.1) * x.offset(0.5)
        };
        let pts = [(0.3, 0.2), (-0.8, 0.9)];
        let mut rows = vec![0.0; layout.rows()];
        for (p, &(x, t)) in pts.iter().enumerate() {
            let zx = z(DiffScalar::var_x(x, 4), DiffScalar::constant_with_order(t, 4));
            let zt = z(DiffScalar::constant_with_order(x, 4), DiffScalar::var_t(t, 4));
            rows[p] = zx.value();
            for k in 1..=4 {
                rows[layout.x_block(k) + p] = zx.coeff(k, 0);
            }
            for k in 1..=2 {
                rows[layout.t_block(k) + p] = zt.coeff(0, k);
            }
        }
        let input = Array::from_vec(vec![layout.rows(), 1], rows).unwrap();
        let out = jet_tanh_forward(&input, layout);
        for (p, &(x, t)) in pts.iter().enumerate() {
            let yx = z(DiffScalar::var_x(x, 4), DiffScalar::constant_with_order(t, 4)).tanh();
            let yt = z(DiffScalar::constant_with_order(x, 4), DiffScalar::var_t(t, 4)).tanh();
            assert!((out.data()[p] - yx.value()).abs() < 1e-14);
            for k in 1..=4 {
                assert!((out.data()[layout.x_block(k) + p] - yx.coeff(k, 0)).abs() < 1e-13);
            }
            for k in 1..=2 {
                assert!((out.data()[layout.t_block(k) + p] - yt.coeff(0, k)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn jet_tanh_backward_matches_finite_differences() {
        let layout = JetLayout { n: 1, kx: 4, kt: 2 };
        let base = vec![0.4, 0.9, -0.3, 0.5, 0.2, -0.7, 0.6];
        let weights = [1.0, -0.5, 0.3, 0.8, -1.2, 0.4, 0.9];
        let f = |v: &[f64]| {
            let a = Array::from_vec(vec![7, 1], v.to_vec()).unwrap();
            jet_tanh_forward(&a, layout)
                .data()
                .iter()
                .zip(&weights)
                .map(|(y, w)| y * w)
                .sum::<f64>()
        };
        let input = Array::from_vec(vec![7, 1], base.clone()).unwrap();
        let g = Array::from_vec(vec![7, 1], weights.to_vec()).unwrap();
        let mut slot = vec![0.0; 7];
        let output = jet_tanh_forward(&input, layout);
        jet_tanh_backward(&input, &output, &g, layout, &mut slot);
        let h = 1e-6;
        for i in 0..7 {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - slot[i]).abs() < 1e-8, "entry {i}: {fd} vs {}", slot[i]);
        }
    }

    #[test]
    fn eager_and_tape_agree() {
        let a = Array::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]]);
        let b = Array::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 1.0]]);
        let bias = Array::vector(vec![0.1, 0.2, 0.3]);
        let mut tape = Tape::new();
        let (ta, tb, tbias) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(bias.clone()));
        let p = Ops::matmul_bt(&mut tape, &ta, &tb);
        let p = Ops::add_bias(&mut tape, &p, &tbias);
        let p = Ops::sigmoid(&mut tape, &p);
        let mut e = Eager;
        let q = e.matmul_bt(&a, &b);
        let q = e.add_bias(&q, &bias);
        let q = e.sigmoid(&q);
        assert_eq!(tape.value(p), &q);
    }
}
