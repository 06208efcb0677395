//! Reverse-mode automatic differentiation over dense real and complex tensors.
//!
//! Eager Wengert tape: every builder method computes its output immediately
//! and records the op for the backward sweep. Tensors live in an arena owned
//! by the tape and are immutable after creation; only grad buffers are
//! written, and only during `backward`.
//!
//! Complex gradient convention: for a real-valued loss L and a complex
//! tensor z = x + iy, the stored gradient g satisfies g.re = dL/dx and
//! g.im = dL/dy. Under this convention the finite-difference check can
//! perturb real and imaginary parts independently and compare components
//! directly, and gradient descent `z -= lr * g` descends a real loss.
//! For a holomorphic op w = f(z) the VJP is g_z = conj(f'(z)) * g_w.

use num_complex::Complex64;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Real64,
    Complex128,
}

/// Dense value storage for one tensor.
#[derive(Clone, Debug)]
pub enum Buf {
    F64(Vec<f64>),
    C128(Vec<Complex64>),
}

impl Buf {
    pub fn len(&self) -> usize {
        match self {
            Buf::F64(v) => v.len(),
            Buf::C128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Buf::F64(_) => DType::Real64,
            Buf::C128(_) => DType::Complex128,
        }
    }

    pub fn zeros(dtype: DType, len: usize) -> Buf {
        match dtype {
            DType::Real64 => Buf::F64(vec![0.0; len]),
            DType::Complex128 => Buf::C128(vec![Complex64::new(0.0, 0.0); len]),
        }
    }

    pub fn as_f64(&self) -> &[f64] {
        match self {
            Buf::F64(v) => v,
            Buf::C128(_) => panic!("expected real64 buffer, got complex128"),
        }
    }

    pub fn as_c128(&self) -> &[Complex64] {
        match self {
            Buf::C128(v) => v,
            Buf::F64(_) => panic!("expected complex128 buffer, got real64"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Buf::F64(v) => v.iter().all(|x| x.is_finite()),
            Buf::C128(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// Number of independent real coordinates (2 per complex entry).
    pub fn real_dim(&self) -> usize {
        match self {
            Buf::F64(v) => v.len(),
            Buf::C128(v) => 2 * v.len(),
        }
    }

    /// Read real coordinate k (complex entries interleave re, im).
    pub fn get_coord(&self, k: usize) -> f64 {
        match self {
            Buf::F64(v) => v[k],
            Buf::C128(v) => {
                let z = v[k / 2];
                if k % 2 == 0 {
                    z.re
                } else {
                    z.im
                }
            }
        }
    }

    /// Write real coordinate k.
    pub fn set_coord(&mut self, k: usize, val: f64) {
        match self {
            Buf::F64(v) => v[k] = val,
            Buf::C128(v) => {
                let z = &mut v[k / 2];
                if k % 2 == 0 {
                    z.re = val;
                } else {
                    z.im = val;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

struct Node {
    data: Buf,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Buf>,
    /// Key of the parameter this node snapshots, if any.
    param: Option<usize>,
}

#[allow(clippy::enum_variant_names)]
enum Op {
    /// Placeholder used while an op is temporarily moved out during backward.
    Nop,
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    AddScalar { a: TensorId, out: TensorId },
    Neg { a: TensorId, out: TensorId },
    Matmul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    MatmulTb { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    Sigmoid { a: TensorId, out: TensorId },
    Tanh { a: TensorId, out: TensorId },
    Silu { a: TensorId, out: TensorId },
    Log { a: TensorId, out: TensorId },
    Exp { a: TensorId, out: TensorId },
    RowSoftmax { a: TensorId, out: TensorId, rows: usize, cols: usize },
    RowSum { a: TensorId, out: TensorId, rows: usize, cols: usize },
    RepeatCols { a: TensorId, out: TensorId, rows: usize, cols: usize },
    RepeatRows { a: TensorId, out: TensorId, rows: usize, cols: usize },
    Sum { a: TensorId, out: TensorId },
    Mean { a: TensorId, out: TensorId },
    RealPart { a: TensorId, out: TensorId },
    ImagPart { a: TensorId, out: TensorId },
    ComplexFromParts { re: TensorId, im: TensorId, out: TensorId },
    GatherRows { a: TensorId, out: TensorId, idx: Vec<usize>, cols: usize },
    ScatterAddRows { a: TensorId, out: TensorId, idx: Vec<usize>, cols: usize },
    ConcatRows { inputs: Vec<TensorId>, out: TensorId, cols: usize },
    ConcatCols { inputs: Vec<TensorId>, out: TensorId, rows: usize },
    SliceRows { a: TensorId, out: TensorId, start: usize, len: usize, cols: usize },
    GivensRotate {
        h: TensorId,
        theta: TensorId,
        out: TensorId,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    CausalConv { x: TensorId, w: TensorId, b: TensorId, out: TensorId, t_len: usize, d: usize, k_c: usize },
    RmsNorm { x: TensorId, gain: TensorId, out: TensorId, rows: usize, cols: usize, inv: Vec<f64> },
    CrossEntropy {
        logits: TensorId,
        out: TensorId,
        targets: Vec<i64>,
        rows: usize,
        cols: usize,
        probs: Vec<f64>,
        n_used: usize,
    },
}

/// The tape. One per forward/backward round; not shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    checked: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), checked: false }
    }

    /// Checked mode: every created buffer is scanned for NaN/Inf and the
    /// offending op panics immediately. Meant for tests and debugging runs.
    pub fn new_checked() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), checked: true }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── Leaf creation ────────────────────────────────────────────────

    fn push_node(&mut self, data: Buf, shape: Vec<usize>, requires_grad: bool, param: Option<usize>) -> TensorId {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        if self.checked && !data.is_finite() {
            panic!("non-finite values in tensor with shape {:?}", shape);
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, requires_grad, grad: None, param });
        id
    }

    /// Constant: no gradient ever flows to it.
    pub fn constant(&mut self, data: Buf, shape: &[usize]) -> TensorId {
        self.push_node(data, shape.to_vec(), false, None)
    }

    pub fn constant_f64(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.constant(Buf::F64(data), shape)
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, data: Buf, shape: &[usize]) -> TensorId {
        self.push_node(data, shape.to_vec(), true, None)
    }

    pub fn input_f64(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.input(Buf::F64(data), shape)
    }

    /// Snapshot of a registered parameter; `key` identifies it to the caller.
    pub fn param(&mut self, key: usize, data: &[f64], shape: &[usize]) -> TensorId {
        self.push_node(Buf::F64(data.to_vec()), shape.to_vec(), true, Some(key))
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn dtype(&self, id: TensorId) -> DType {
        self.nodes[id.0].data.dtype()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> &Buf {
        &self.nodes[id.0].data
    }

    pub fn value_f64(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].data.as_f64()
    }

    pub fn value_c128(&self, id: TensorId) -> &[Complex64] {
        self.nodes[id.0].data.as_c128()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value_f64(id);
        assert_eq!(v.len(), 1, "expected scalar, got shape {:?}", self.shape(id));
        v[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&Buf> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn grad_f64(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_ref().map(|g| g.as_f64())
    }

    /// (param key, grad) for every parameter node that received gradient.
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param, n.grad.as_ref()) {
                (Some(key), Some(Buf::F64(g))) => Some((key, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── Op plumbing ──────────────────────────────────────────────────

    fn record(&mut self, any_requires: bool, op: Op) {
        // Outputs of all-constant inputs need no backward entry.
        if any_requires {
            self.ops.push(op);
        }
    }

    fn emit(&mut self, data: Buf, shape: Vec<usize>, inputs: &[TensorId]) -> (TensorId, bool) {
        let any = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let id = self.push_node(data, shape, any, None);
        (id, any)
    }

    fn assert_same_shape(&self, op: &str, a: TensorId, b: TensorId) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape("add", a, b);
        let data = match (&self.nodes[a.0].data, &self.nodes[b.0].data) {
            (Buf::F64(x), Buf::F64(y)) => Buf::F64(x.iter().zip(y).map(|(p, q)| p + q).collect()),
            (Buf::C128(x), Buf::C128(y)) => Buf::C128(x.iter().zip(y).map(|(p, q)| p + q).collect()),
            _ => panic!("add: dtype mismatch"),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a, b]);
        self.record(req, Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape("sub", a, b);
        let data = match (&self.nodes[a.0].data, &self.nodes[b.0].data) {
            (Buf::F64(x), Buf::F64(y)) => Buf::F64(x.iter().zip(y).map(|(p, q)| p - q).collect()),
            (Buf::C128(x), Buf::C128(y)) => Buf::C128(x.iter().zip(y).map(|(p, q)| p - q).collect()),
            _ => panic!("sub: dtype mismatch"),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a, b]);
        self.record(req, Op::Sub { a, b, out });
        out
    }

    /// Elementwise product. Handles real*real, complex*complex (the
    /// `complex-mul` primitive), and mixed real*complex.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape("mul", a, b);
        let data = match (&self.nodes[a.0].data, &self.nodes[b.0].data) {
            (Buf::F64(x), Buf::F64(y)) => Buf::F64(x.iter().zip(y).map(|(p, q)| p * q).collect()),
            (Buf::C128(x), Buf::C128(y)) => Buf::C128(x.iter().zip(y).map(|(p, q)| p * q).collect()),
            (Buf::F64(x), Buf::C128(y)) => Buf::C128(x.iter().zip(y).map(|(p, q)| q * *p).collect()),
            (Buf::C128(x), Buf::F64(y)) => Buf::C128(x.iter().zip(y).map(|(p, q)| p * *q).collect()),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a, b]);
        self.record(req, Op::Mul { a, b, out });
        out
    }

    /// Alias for elementwise product of two complex tensors.
    pub fn complex_mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.dtype(a), DType::Complex128, "complex_mul: lhs must be complex");
        assert_eq!(self.dtype(b), DType::Complex128, "complex_mul: rhs must be complex");
        self.mul(a, b)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = match &self.nodes[a.0].data {
            Buf::F64(x) => Buf::F64(x.iter().map(|p| p * c).collect()),
            Buf::C128(x) => Buf::C128(x.iter().map(|p| p * c).collect()),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a]);
        self.record(req, Op::Scale { a, c, out });
        out
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = match &self.nodes[a.0].data {
            Buf::F64(x) => Buf::F64(x.iter().map(|p| p + c).collect()),
            Buf::C128(x) => Buf::C128(x.iter().map(|p| p + c).collect()),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a]);
        self.record(req, Op::AddScalar { a, out });
        out
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data = match &self.nodes[a.0].data {
            Buf::F64(x) => Buf::F64(x.iter().map(|p| -p).collect()),
            Buf::C128(x) => Buf::C128(x.iter().map(|p| -p).collect()),
        };
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(data, shape, &[a]);
        self.record(req, Op::Neg { a, out });
        out
    }

    // ── Real activations ─────────────────────────────────────────────

    fn unary_real(&mut self, a: TensorId, op_name: &str, f: impl Fn(f64) -> f64) -> (TensorId, bool) {
        let x = match &self.nodes[a.0].data {
            Buf::F64(v) => v,
            Buf::C128(_) => panic!("{op_name}: complex input not supported"),
        };
        let data = Buf::F64(x.iter().map(|&p| f(p)).collect());
        let shape = self.shape(a).to_vec();
        self.emit(data, shape, &[a])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (out, req) = self.unary_real(a, "sigmoid", crate::kernels::sigmoid);
        self.record(req, Op::Sigmoid { a, out });
        out
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (out, req) = self.unary_real(a, "tanh", f64::tanh);
        self.record(req, Op::Tanh { a, out });
        out
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let (out, req) = self.unary_real(a, "silu", crate::kernels::silu);
        self.record(req, Op::Silu { a, out });
        out
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let (out, req) = self.unary_real(a, "log", f64::ln);
        self.record(req, Op::Log { a, out });
        out
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (out, req) = self.unary_real(a, "exp", f64::exp);
        self.record(req, Op::Exp { a, out });
        out
    }

    // ── Structured real ops ──────────────────────────────────────────

    fn rows_cols(&self, op: &str, a: TensorId) -> (usize, usize) {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "{op}: expected 2-d tensor, got shape {s:?}");
        (s[0], s[1])
    }

    pub fn row_softmax(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols("row_softmax", a);
        let x = self.value_f64(a);
        let mut y = x.to_vec();
        for r in 0..rows {
            crate::kernels::softmax_row(&mut y[r * cols..(r + 1) * cols]);
        }
        let (out, req) = self.emit(Buf::F64(y), vec![rows, cols], &[a]);
        self.record(req, Op::RowSoftmax { a, out, rows, cols });
        out
    }

    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols("row_sum", a);
        let x = self.value_f64(a);
        let y: Vec<f64> = (0..rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum()).collect();
        let (out, req) = self.emit(Buf::F64(y), vec![rows, 1], &[a]);
        self.record(req, Op::RowSum { a, out, rows, cols });
        out
    }

    /// [rows, 1] -> [rows, cols] by repetition (explicit expand).
    pub fn repeat_cols(&mut self, a: TensorId, cols: usize) -> TensorId {
        let s = self.shape(a);
        assert!(s.len() == 2 && s[1] == 1, "repeat_cols: expected [rows,1], got {s:?}");
        let rows = s[0];
        let x = self.value_f64(a);
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            y[r * cols..(r + 1) * cols].fill(x[r]);
        }
        let (out, req) = self.emit(Buf::F64(y), vec![rows, cols], &[a]);
        self.record(req, Op::RepeatCols { a, out, rows, cols });
        out
    }

    /// [1, cols] -> [rows, cols] by repetition (explicit expand).
    pub fn repeat_rows(&mut self, a: TensorId, rows: usize) -> TensorId {
        let s = self.shape(a);
        assert!(s.len() == 2 && s[0] == 1, "repeat_rows: expected [1,cols], got {s:?}");
        let cols = s[1];
        let x = self.value_f64(a).to_vec();
        let mut y = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            y.extend_from_slice(&x);
        }
        let (out, req) = self.emit(Buf::F64(y), vec![rows, cols], &[a]);
        self.record(req, Op::RepeatRows { a, out, rows, cols });
        out
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let data = match &self.nodes[a.0].data {
            Buf::F64(x) => Buf::F64(vec![x.iter().sum()]),
            Buf::C128(x) => Buf::C128(vec![x.iter().sum()]),
        };
        let (out, req) = self.emit(data, vec![1, 1], &[a]);
        self.record(req, Op::Sum { a, out });
        out
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let x = self.value_f64(a);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let (out, req) = self.emit(Buf::F64(vec![m]), vec![1, 1], &[a]);
        self.record(req, Op::Mean { a, out });
        out
    }

    // ── Matrix products (real) ───────────────────────────────────────

    /// out = a @ b, a: [m,k], b: [k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.rows_cols("matmul", a);
        let (kb, n) = self.rows_cols("matmul", b);
        assert_eq!(ka, kb, "matmul: inner dims differ, lhs {:?} rhs {:?}", self.shape(a), self.shape(b));
        let mut y = vec![0.0; m * n];
        crate::kernels::matmul(self.value_f64(a), self.value_f64(b), &mut y, m, ka, n);
        let (out, req) = self.emit(Buf::F64(y), vec![m, n], &[a, b]);
        self.record(req, Op::Matmul { a, b, out, m, k: ka, n });
        out
    }

    /// out = a @ b^T, a: [m,k], b: [n,k]. The natural shape for weight
    /// matrices stored [out_dim, in_dim].
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.rows_cols("matmul_tb", a);
        let (n, kb) = self.rows_cols("matmul_tb", b);
        assert_eq!(ka, kb, "matmul_tb: inner dims differ, lhs {:?} rhs {:?}", self.shape(a), self.shape(b));
        let mut y = vec![0.0; m * n];
        crate::kernels::matmul_tb(self.value_f64(a), self.value_f64(b), &mut y, m, ka, n);
        let (out, req) = self.emit(Buf::F64(y), vec![m, n], &[a, b]);
        self.record(req, Op::MatmulTb { a, b, out, m, k: ka, n });
        out
    }

    // ── Complex structure ────────────────────────────────────────────

    pub fn real_part(&mut self, a: TensorId) -> TensorId {
        let x = self.value_c128(a);
        let y: Vec<f64> = x.iter().map(|z| z.re).collect();
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(Buf::F64(y), shape, &[a]);
        self.record(req, Op::RealPart { a, out });
        out
    }

    pub fn imag_part(&mut self, a: TensorId) -> TensorId {
        let x = self.value_c128(a);
        let y: Vec<f64> = x.iter().map(|z| z.im).collect();
        let shape = self.shape(a).to_vec();
        let (out, req) = self.emit(Buf::F64(y), shape, &[a]);
        self.record(req, Op::ImagPart { a, out });
        out
    }

    pub fn complex_from_parts(&mut self, re: TensorId, im: TensorId) -> TensorId {
        self.assert_same_shape("complex_from_parts", re, im);
        let x = self.value_f64(re);
        let y = self.value_f64(im);
        let z: Vec<Complex64> = x.iter().zip(y).map(|(&r, &i)| Complex64::new(r, i)).collect();
        let shape = self.shape(re).to_vec();
        let (out, req) = self.emit(Buf::C128(z), shape, &[re, im]);
        self.record(req, Op::ComplexFromParts { re, im, out });
        out
    }

    // ── Gather / scatter / concat / slice ────────────────────────────

    /// Select rows of a real [r, c] tensor; repeated indices accumulate
    /// gradient additively (scatter-add backward).
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let (rows, cols) = self.rows_cols("gather_rows", a);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of range for {rows} rows");
        }
        let x = self.value_f64(a);
        let mut y = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            y.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let (out, req) = self.emit(Buf::F64(y), vec![idx.len(), cols], &[a]);
        self.record(req, Op::GatherRows { a, out, idx: idx.to_vec(), cols });
        out
    }

    /// out[idx[r]] += a[r] over a zero-initialized [out_rows, c] tensor.
    pub fn scatter_add_rows(&mut self, a: TensorId, idx: &[usize], out_rows: usize) -> TensorId {
        let (rows, cols) = self.rows_cols("scatter_add_rows", a);
        assert_eq!(rows, idx.len(), "scatter_add_rows: {rows} rows but {} indices", idx.len());
        for &i in idx {
            assert!(i < out_rows, "scatter_add_rows: index {i} out of range for {out_rows} rows");
        }
        let x = self.value_f64(a);
        let mut y = vec![0.0; out_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                y[i * cols + c] += x[r * cols + c];
            }
        }
        let (out, req) = self.emit(Buf::F64(y), vec![out_rows, cols], &[a]);
        self.record(req, Op::ScatterAddRows { a, out, idx: idx.to_vec(), cols });
        out
    }

    /// Concatenate along rows; inputs share dtype and column count.
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_rows: empty input list");
        let (_, cols) = self.rows_cols("concat_rows", inputs[0]);
        let dtype = self.dtype(inputs[0]);
        let mut total_rows = 0;
        for &t in inputs {
            let (r, c) = self.rows_cols("concat_rows", t);
            assert_eq!(c, cols, "concat_rows: column mismatch {c} vs {cols}");
            assert_eq!(self.dtype(t), dtype, "concat_rows: dtype mismatch");
            total_rows += r;
        }
        let data = match dtype {
            DType::Real64 => {
                let mut y = Vec::with_capacity(total_rows * cols);
                for &t in inputs {
                    y.extend_from_slice(self.value_f64(t));
                }
                Buf::F64(y)
            }
            DType::Complex128 => {
                let mut y = Vec::with_capacity(total_rows * cols);
                for &t in inputs {
                    y.extend_from_slice(self.value_c128(t));
                }
                Buf::C128(y)
            }
        };
        let (out, req) = self.emit(data, vec![total_rows, cols], inputs);
        self.record(req, Op::ConcatRows { inputs: inputs.to_vec(), out, cols });
        out
    }

    /// Concatenate real tensors along columns; inputs share row count.
    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_cols: empty input list");
        let (rows, _) = self.rows_cols("concat_cols", inputs[0]);
        let mut total_cols = 0;
        for &t in inputs {
            let (r, c) = self.rows_cols("concat_cols", t);
            assert_eq!(r, rows, "concat_cols: row mismatch {r} vs {rows}");
            total_cols += c;
        }
        let mut y = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &t in inputs {
            let (_, c) = self.rows_cols("concat_cols", t);
            let x = self.value_f64(t);
            for r in 0..rows {
                y[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(&x[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let (out, req) = self.emit(Buf::F64(y), vec![rows, total_cols], inputs);
        self.record(req, Op::ConcatCols { inputs: inputs.to_vec(), out, rows });
        out
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (rows, cols) = self.rows_cols("slice_rows", a);
        assert!(start + len <= rows, "slice_rows: [{start}, {}) out of range for {rows} rows", start + len);
        let data = match &self.nodes[a.0].data {
            Buf::F64(x) => Buf::F64(x[start * cols..(start + len) * cols].to_vec()),
            Buf::C128(x) => Buf::C128(x[start * cols..(start + len) * cols].to_vec()),
        };
        let (out, req) = self.emit(data, vec![len, cols], &[a]);
        self.record(req, Op::SliceRows { a, out, start, len, cols });
        out
    }

    // ── Model-specific structured ops ────────────────────────────────

    /// Apply disjoint Givens rotations row-wise: h is complex [r, d],
    /// theta real [r, n_pairs]. Norm-preserving for every theta.
    pub fn givens_rotate(&mut self, h: TensorId, theta: TensorId, pairs: &Arc<Vec<(usize, usize)>>) -> TensorId {
        let (rows, d) = self.rows_cols("givens_rotate", h);
        let (trows, n_pairs) = self.rows_cols("givens_rotate", theta);
        assert_eq!(rows, trows, "givens_rotate: {rows} state rows vs {trows} angle rows");
        assert_eq!(n_pairs, pairs.len(), "givens_rotate: {n_pairs} angles vs {} pairs", pairs.len());
        for &(i, j) in pairs.iter() {
            assert!(i < j && j < d, "givens_rotate: pair ({i},{j}) out of range for dim {d}");
        }
        let hv = self.value_c128(h);
        let tv = self.value_f64(theta);
        let mut y = vec![Complex64::new(0.0, 0.0); rows * d];
        for r in 0..rows {
            crate::kernels::givens_apply(
                &hv[r * d..(r + 1) * d],
                &tv[r * n_pairs..(r + 1) * n_pairs],
                pairs,
                &mut y[r * d..(r + 1) * d],
            );
        }
        let (out, req) = self.emit(Buf::C128(y), vec![rows, d], &[h, theta]);
        self.record(req, Op::GivensRotate { h, theta, out, pairs: Arc::clone(pairs) });
        out
    }

    /// Depthwise causal convolution over rows (time): x [t, d], w [k_c, d],
    /// b [1, d]. Output row t sees rows t-k_c+1..=t, zero-padded on the left.
    pub fn causal_conv(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (t_len, d) = self.rows_cols("causal_conv", x);
        let (k_c, dw) = self.rows_cols("causal_conv", w);
        assert_eq!(dw, d, "causal_conv: weight dim {dw} vs input dim {d}");
        let (_, db) = self.rows_cols("causal_conv", b);
        assert_eq!(db, d, "causal_conv: bias dim {db} vs input dim {d}");
        let xv = self.value_f64(x);
        let wv = self.value_f64(w);
        let bv = self.value_f64(b);
        let mut y = vec![0.0; t_len * d];
        let mut window: Vec<Option<&[f64]>> = vec![None; k_c];
        for t in 0..t_len {
            for (tap, slot) in window.iter_mut().enumerate() {
                let src = t as i64 - (k_c - 1 - tap) as i64;
                *slot = if src >= 0 { Some(&xv[src as usize * d..(src as usize + 1) * d]) } else { None };
            }
            crate::kernels::conv_tap(&window, wv, bv, &mut y[t * d..(t + 1) * d]);
        }
        let (out, req) = self.emit(Buf::F64(y), vec![t_len, d], &[x, w, b]);
        self.record(req, Op::CausalConv { x, w, b, out, t_len, d, k_c });
        out
    }

    /// RMS normalization per row with learned gain [1, d].
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols("rms_norm", x);
        let (_, gc) = self.rows_cols("rms_norm", gain);
        assert_eq!(gc, cols, "rms_norm: gain dim {gc} vs input dim {cols}");
        let xv = self.value_f64(x);
        let gv = self.value_f64(gain);
        let mut y = vec![0.0; rows * cols];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut ms = 0.0;
            for &v in row {
                ms += v * v;
            }
            ms = ms / cols as f64 + crate::kernels::RMSNORM_EPS;
            inv[r] = 1.0 / ms.sqrt();
            for c in 0..cols {
                y[r * cols + c] = row[c] * inv[r] * gv[c];
            }
        }
        let (out, req) = self.emit(Buf::F64(y), vec![rows, cols], &[x, gain]);
        self.record(req, Op::RmsNorm { x, gain, out, rows, cols, inv });
        out
    }

    /// Mean cross-entropy over rows with target != -1; stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[i64]) -> TensorId {
        let (rows, cols) = self.rows_cols("cross_entropy", logits);
        assert_eq!(rows, targets.len(), "cross_entropy: {rows} rows but {} targets", targets.len());
        let x = self.value_f64(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        let mut n_used = 0usize;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let p = &mut probs[r * cols..(r + 1) * cols];
            p.copy_from_slice(row);
            crate::kernels::softmax_row(p);
            let t = targets[r];
            if t >= 0 {
                assert!((t as usize) < cols, "cross_entropy: target {t} out of range for {cols} classes");
                // -log softmax recomputed stably from the logits
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                loss += lse - row[t as usize];
                n_used += 1;
            }
        }
        assert!(n_used > 0, "cross_entropy: no rows with a target");
        loss /= n_used as f64;
        let (out, req) = self.emit(Buf::F64(vec![loss]), vec![1, 1], &[logits]);
        self.record(
            req,
            Op::CrossEntropy { logits, out, targets: targets.to_vec(), rows, cols, probs, n_used },
        );
        out
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contrib: Buf) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(Buf::F64(g)) => {
                for (gi, ci) in g.iter_mut().zip(contrib.as_f64()) {
                    *gi += ci;
                }
            }
            Some(Buf::C128(g)) => {
                for (gi, ci) in g.iter_mut().zip(contrib.as_c128()) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn grad_of(&self, id: TensorId) -> Option<Buf> {
        self.nodes[id.0].grad.clone()
    }

    /// Reverse sweep from a real scalar loss. Grad buffers accumulate, so
    /// call `zero_grads` first when reusing a tape.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            numel(self.shape(loss)),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        assert_eq!(self.dtype(loss), DType::Real64, "backward: loss must be real-valued");
        self.accumulate(loss, Buf::F64(vec![1.0]));
        for op_idx in (0..self.ops.len()).rev() {
            // Move the op out so its saved buffers can be borrowed while
            // grad slots are mutated, then restore it (tapes are replayable).
            let op = std::mem::replace(&mut self.ops[op_idx], Op::Nop);
            self.backward_op(&op);
            self.ops[op_idx] = op;
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Nop => {}
            Op::Add { a, b, out } => {
                if let Some(g) = self.grad_of(*out) {
                    self.accumulate(*a, g.clone());
                    self.accumulate(*b, g);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(g) = self.grad_of(*out) {
                    self.accumulate(*a, g.clone());
                    let neg = match g {
                        Buf::F64(v) => Buf::F64(v.iter().map(|x| -x).collect()),
                        Buf::C128(v) => Buf::C128(v.iter().map(|x| -x).collect()),
                    };
                    self.accumulate(*b, neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(g) = self.grad_of(*out) {
                    let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    let (da, db) = mul_vjp(av, bv, &g);
                    self.accumulate(*a, da);
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { a, c, out } => {
                if let Some(g) = self.grad_of(*out) {
                    let scaled = match g {
                        Buf::F64(v) => Buf::F64(v.iter().map(|x| x * c).collect()),
                        Buf::C128(v) => Buf::C128(v.iter().map(|x| x * c).collect()),
                    };
                    self.accumulate(*a, scaled);
                }
            }
            Op::AddScalar { a, out } => {
                if let Some(g) = self.grad_of(*out) {
                    self.accumulate(*a, g);
                }
            }
            Op::Neg { a, out } => {
                if let Some(g) = self.grad_of(*out) {
                    let neg = match g {
                        Buf::F64(v) => Buf::F64(v.iter().map(|x| -x).collect()),
                        Buf::C128(v) => Buf::C128(v.iter().map(|x| -x).collect()),
                    };
                    self.accumulate(*a, neg);
                }
            }
            Op::Matmul { a, b, out, m, k, n } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[a.0].requires_grad {
                        let bv = self.nodes[b.0].data.as_f64();
                        let mut da = vec![0.0; m * k];
                        // d_a = g @ b^T
                        crate::kernels::matmul_tb(&g, bv, &mut da, m, n, k);
                        self.accumulate(*a, Buf::F64(da));
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = self.nodes[a.0].data.as_f64();
                        let mut db = vec![0.0; k * n];
                        // d_b = a^T @ g
                        crate::kernels::matmul_at_b(av, &g, &mut db, m, k, n);
                        self.accumulate(*b, Buf::F64(db));
                    }
                }
            }
            Op::MatmulTb { a, b, out, m, k, n } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[a.0].requires_grad {
                        let bv = self.nodes[b.0].data.as_f64();
                        let mut da = vec![0.0; m * k];
                        // d_a = g @ b
                        crate::kernels::matmul(&g, bv, &mut da, m, n, k);
                        self.accumulate(*a, Buf::F64(da));
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = self.nodes[a.0].data.as_f64();
                        let mut db = vec![0.0; n * k];
                        // d_b = g^T @ a
                        crate::kernels::matmul_at_b(&g, av, &mut db, m, n, k);
                        self.accumulate(*b, Buf::F64(db));
                    }
                }
            }
            Op::Sigmoid { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let y = self.nodes[out.0].data.as_f64();
                    let da: Vec<f64> = g.iter().zip(y).map(|(gi, &s)| gi * s * (1.0 - s)).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::Tanh { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let y = self.nodes[out.0].data.as_f64();
                    let da: Vec<f64> = g.iter().zip(y).map(|(gi, &t)| gi * (1.0 - t * t)).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::Silu { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let x = self.nodes[a.0].data.as_f64();
                    let da: Vec<f64> =
                        g.iter().zip(x).map(|(gi, &xi)| gi * crate::kernels::silu_grad(xi)).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::Log { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let x = self.nodes[a.0].data.as_f64();
                    let da: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi / xi).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::Exp { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let y = self.nodes[out.0].data.as_f64();
                    let da: Vec<f64> = g.iter().zip(y).map(|(gi, &yi)| gi * yi).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::RowSoftmax { a, out, rows, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let y = self.nodes[out.0].data.as_f64();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..*cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::RowSum { a, out, rows, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        da[r * cols..(r + 1) * cols].fill(g[r]);
                    }
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::RepeatCols { a, out, rows, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let da: Vec<f64> =
                        (0..*rows).map(|r| g[r * cols..(r + 1) * cols].iter().sum()).collect();
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::RepeatRows { a, out, rows, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let mut da = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::Sum { a, out } => {
                if let Some(g) = self.grad_of(*out) {
                    let n = self.nodes[a.0].data.len();
                    let da = match g {
                        Buf::F64(v) => Buf::F64(vec![v[0]; n]),
                        Buf::C128(v) => Buf::C128(vec![v[0]; n]),
                    };
                    self.accumulate(*a, da);
                }
            }
            Op::Mean { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let n = self.nodes[a.0].data.len();
                    self.accumulate(*a, Buf::F64(vec![g[0] / n as f64; n]));
                }
            }
            Op::RealPart { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let da: Vec<Complex64> = g.iter().map(|&gi| Complex64::new(gi, 0.0)).collect();
                    self.accumulate(*a, Buf::C128(da));
                }
            }
            Op::ImagPart { a, out } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let da: Vec<Complex64> = g.iter().map(|&gi| Complex64::new(0.0, gi)).collect();
                    self.accumulate(*a, Buf::C128(da));
                }
            }
            Op::ComplexFromParts { re, im, out } => {
                if let Some(Buf::C128(g)) = self.grad_of(*out) {
                    self.accumulate(*re, Buf::F64(g.iter().map(|z| z.re).collect()));
                    self.accumulate(*im, Buf::F64(g.iter().map(|z| z.im).collect()));
                }
            }
            Op::GatherRows { a, out, idx, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let rows = self.nodes[a.0].data.len() / cols;
                    let mut da = vec![0.0; rows * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..*cols {
                            da[i * cols + c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::ScatterAddRows { a, out, idx, cols } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let mut da = vec![0.0; idx.len() * cols];
                    for (r, &i) in idx.iter().enumerate() {
                        da[r * cols..(r + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    self.accumulate(*a, Buf::F64(da));
                }
            }
            Op::ConcatRows { inputs, out, cols } => {
                if let Some(g) = self.grad_of(*out) {
                    let mut row_off = 0;
                    for &t in inputs.iter() {
                        let r = self.nodes[t.0].data.len() / cols;
                        let piece = match &g {
                            Buf::F64(v) => Buf::F64(v[row_off * cols..(row_off + r) * cols].to_vec()),
                            Buf::C128(v) => Buf::C128(v[row_off * cols..(row_off + r) * cols].to_vec()),
                        };
                        self.accumulate(t, piece);
                        row_off += r;
                    }
                }
            }
            Op::ConcatCols { inputs, out, rows } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let total_cols = self.nodes[out.0].shape[1];
                    let mut col_off = 0;
                    for &t in inputs.iter() {
                        let c = self.nodes[t.0].shape[1];
                        let mut piece = vec![0.0; rows * c];
                        for r in 0..*rows {
                            piece[r * c..(r + 1) * c].copy_from_slice(
                                &g[r * total_cols + col_off..r * total_cols + col_off + c],
                            );
                        }
                        self.accumulate(t, Buf::F64(piece));
                        col_off += c;
                    }
                }
            }
            Op::SliceRows { a, out, start, len, cols } => {
                if let Some(g) = self.grad_of(*out) {
                    let total = self.nodes[a.0].data.len();
                    let da = match g {
                        Buf::F64(v) => {
                            let mut d = vec![0.0; total];
                            d[start * cols..(start + len) * cols].copy_from_slice(&v);
                            Buf::F64(d)
                        }
                        Buf::C128(v) => {
                            let mut d = vec![Complex64::new(0.0, 0.0); total];
                            d[start * cols..(start + len) * cols].copy_from_slice(&v);
                            Buf::C128(d)
                        }
                    };
                    self.accumulate(*a, da);
                }
            }
            Op::GivensRotate { h, theta, out, pairs } => {
                if let Some(Buf::C128(g)) = self.grad_of(*out) {
                    let d = self.nodes[h.0].shape[1];
                    let rows = self.nodes[h.0].shape[0];
                    let n_pairs = pairs.len();
                    let hv = self.nodes[h.0].data.as_c128();
                    let tv = self.nodes[theta.0].data.as_f64();
                    let mut dh = g.clone();
                    let mut dt = vec![0.0; rows * n_pairs];
                    for r in 0..rows {
                        let go = &g[r * d..(r + 1) * d];
                        let hr = &hv[r * d..(r + 1) * d];
                        for (k, &(i, j)) in pairs.iter().enumerate() {
                            let (c, s) = (tv[r * n_pairs + k].cos(), tv[r * n_pairs + k].sin());
                            // transpose rotation on the output grads
                            dh[r * d + i] = Complex64::new(
                                c * go[i].re + s * go[j].re,
                                c * go[i].im + s * go[j].im,
                            );
                            dh[r * d + j] = Complex64::new(
                                -s * go[i].re + c * go[j].re,
                                -s * go[i].im + c * go[j].im,
                            );
                            // d out_i/d theta = -s h_i - c h_j; d out_j/d theta = c h_i - s h_j
                            let di = Complex64::new(
                                -s * hr[i].re - c * hr[j].re,
                                -s * hr[i].im - c * hr[j].im,
                            );
                            let dj = Complex64::new(
                                c * hr[i].re - s * hr[j].re,
                                c * hr[i].im - s * hr[j].im,
                            );
                            dt[r * n_pairs + k] = go[i].re * di.re
                                + go[i].im * di.im
                                + go[j].re * dj.re
                                + go[j].im * dj.im;
                        }
                    }
                    self.accumulate(*h, Buf::C128(dh));
                    self.accumulate(*theta, Buf::F64(dt));
                }
            }
            Op::CausalConv { x, w, b, out, t_len, d, k_c } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let (t_len, d, k_c) = (*t_len, *d, *k_c);
                    let xv = self.nodes[x.0].data.as_f64();
                    let wv = self.nodes[w.0].data.as_f64();
                    let mut dx = vec![0.0; t_len * d];
                    let mut dw = vec![0.0; k_c * d];
                    let mut db = vec![0.0; d];
                    for t in 0..t_len {
                        let gr = &g[t * d..(t + 1) * d];
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                        for tap in 0..k_c {
                            let src = t as i64 - (k_c - 1 - tap) as i64;
                            if src < 0 {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..d {
                                dx[src * d + c] += gr[c] * wv[tap * d + c];
                                dw[tap * d + c] += gr[c] * xv[src * d + c];
                            }
                        }
                    }
                    self.accumulate(*x, Buf::F64(dx));
                    self.accumulate(*w, Buf::F64(dw));
                    self.accumulate(*b, Buf::F64(db));
                }
            }
            Op::RmsNorm { x, gain, out, rows, cols, inv } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let (rows, cols) = (*rows, *cols);
                    let xv = self.nodes[x.0].data.as_f64();
                    let gv = self.nodes[gain.0].data.as_f64();
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let i1 = inv[r];
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dgain[c] += gr[c] * xr[c] * i1;
                            dot += gr[c] * gv[c] * xr[c];
                        }
                        let coef = i1 * i1 * i1 * dot / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = gr[c] * gv[c] * i1 - coef * xr[c];
                        }
                    }
                    self.accumulate(*x, Buf::F64(dx));
                    self.accumulate(*gain, Buf::F64(dgain));
                }
            }
            Op::CrossEntropy { logits, out, targets, rows, cols, probs, n_used } => {
                if let Some(Buf::F64(g)) = self.grad_of(*out) {
                    let scale = g[0] / *n_used as f64;
                    let mut dl = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        let t = targets[r];
                        if t < 0 {
                            continue;
                        }
                        for c in 0..*cols {
                            let ind = if c as i64 == t { 1.0 } else { 0.0 };
                            dl[r * cols + c] = scale * (probs[r * cols + c] - ind);
                        }
                    }
                    self.accumulate(*logits, Buf::F64(dl));
                }
            }
        }
    }
}

/// VJP of the elementwise product for every dtype combination.
fn mul_vjp(a: &Buf, b: &Buf, g: &Buf) -> (Buf, Buf) {
    match (a, b, g) {
        (Buf::F64(av), Buf::F64(bv), Buf::F64(gv)) => (
            Buf::F64(gv.iter().zip(bv).map(|(g, b)| g * b).collect()),
            Buf::F64(gv.iter().zip(av).map(|(g, a)| g * a).collect()),
        ),
        // Holomorphic: g_a = conj(b) * g
        (Buf::C128(av), Buf::C128(bv), Buf::C128(gv)) => (
            Buf::C128(gv.iter().zip(bv).map(|(g, b)| b.conj() * g).collect()),
            Buf::C128(gv.iter().zip(av).map(|(g, a)| a.conj() * g).collect()),
        ),
        // Real r scaling complex z: d r = Re(conj(g) * z), d z = r * g
        (Buf::F64(av), Buf::C128(bv), Buf::C128(gv)) => (
            Buf::F64(gv.iter().zip(bv).map(|(g, z)| g.re * z.re + g.im * z.im).collect()),
            Buf::C128(gv.iter().zip(av).map(|(g, r)| g * *r).collect()),
        ),
        (Buf::C128(av), Buf::F64(bv), Buf::C128(gv)) => (
            Buf::C128(gv.iter().zip(bv).map(|(g, r)| g * *r).collect()),
            Buf::F64(gv.iter().zip(av).map(|(g, z)| g.re * z.re + g.im * z.im).collect()),
        ),
        _ => panic!("mul_vjp: inconsistent dtypes"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_mul_example() {
        let mut tape = Tape::new();
        let a = tape.input_f64(vec![2.0, 3.0], &[1, 2]);
        let b = tape.input_f64(vec![4.0, 5.0], &[1, 2]);
        let c = tape.mul(a, b);
        assert_eq!(tape.value_f64(c), &[8.0, 15.0]);
    }

    #[test]
    fn matmul_identity_example() {
        let mut tape = Tape::new();
        let eye = tape.constant_f64(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let v = tape.input_f64(vec![7.0, -2.0, 0.5], &[3, 1]);
        let out = tape.matmul(eye, v);
        assert_eq!(tape.value_f64(out), &[7.0, -2.0, 0.5]);
    }

    #[test]
    fn complex_mul_conjugate_product() {
        let mut tape = Tape::new();
        let a = tape.input(Buf::C128(vec![Complex64::new(1.0, 1.0)]), &[1, 1]);
        let b = tape.input(Buf::C128(vec![Complex64::new(1.0, -1.0)]), &[1, 1]);
        let c = tape.complex_mul(a, b);
        let v = tape.value_c128(c)[0];
        assert!((v.re - 2.0).abs() < 1e-15 && v.im.abs() < 1e-15);
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(w ⊙ w), w = [1, 2]  →  grad = [2, 4]
        let mut tape = Tape::new();
        let w = tape.input_f64(vec![1.0, 2.0], &[1, 2]);
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        tape.backward(loss);
        assert_eq!(tape.grad_f64(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_real_part_of_complex_sum() {
        // loss = Re(sum(h)) → grad(h) = all ones (re = 1, im = 0)
        let mut tape = Tape::new();
        let h = tape.input(
            Buf::C128(vec![Complex64::new(0.3, -0.7), Complex64::new(1.5, 2.5)]),
            &[1, 2],
        );
        let s = tape.sum(h);
        let loss = tape.real_part(s);
        tape.backward(loss);
        let g = tape.grad(h).unwrap().as_c128();
        for z in g {
            assert_eq!(z.re, 1.0);
            assert_eq!(z.im, 0.0);
        }
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // f(w) = sum(w) + sum(w) must produce grad 2, exactly the sum of
        // two single-use passes.
        let mut tape = Tape::new();
        let w = tape.input_f64(vec![3.0, -1.0], &[1, 2]);
        let s1 = tape.sum(w);
        let s2 = tape.sum(w);
        let tot = tape.add(s1, s2);
        tape.backward(tot);
        assert_eq!(tape.grad_f64(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut tape = Tape::new();
        let w = tape.input_f64(vec![0.3, 0.7, -0.2], &[1, 3]);
        let s = tape.sigmoid(w);
        let q = tape.mul(s, w);
        let loss = tape.sum(q);
        tape.backward(loss);
        let first: Vec<f64> = tape.grad_f64(w).unwrap().to_vec();
        tape.zero_grads();
        tape.backward(loss);
        let second: Vec<f64> = tape.grad_f64(w).unwrap().to_vec();
        for (a, b) in first.iter().zip(second.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.input_f64(vec![1.0, 2.0], &[1, 2]);
        let y = tape.mul(w, w);
        tape.backward(y);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input_f64(vec![1.0, 2.0], &[1, 2]);
        let b = tape.input_f64(vec![1.0, 2.0, 3.0], &[1, 3]);
        tape.add(a, b);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn checked_mode_rejects_nan() {
        let mut tape = Tape::new_checked();
        let a = tape.input_f64(vec![1.0, f64::NAN], &[1, 2]);
        let _ = tape.sigmoid(a);
    }

    #[test]
    fn constant_inputs_record_no_op() {
        let mut tape = Tape::new();
        let a = tape.constant_f64(vec![1.0], &[1, 1]);
        let b = tape.constant_f64(vec![2.0], &[1, 1]);
        let _ = tape.add(a, b);
        assert_eq!(tape.num_ops(), 0);
        let c = tape.input_f64(vec![3.0], &[1, 1]);
        let _ = tape.add(a, c);
        assert_eq!(tape.num_ops(), 1);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut tape = Tape::new();
        let logits = tape.input_f64(vec![0.0, 0.0, 10.0, 0.0], &[2, 2]);
        let loss = tape.cross_entropy(logits, &[0, -1]);
        // only row 0 counts: -log softmax([0,0])[0] = ln 2
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
        tape.backward(loss);
        let g = tape.grad_f64(logits).unwrap();
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn gather_then_scatter_roundtrip_grad() {
        let mut tape = Tape::new();
        let table = tape.input_f64(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let picked = tape.gather_rows(table, &[2, 0, 2]);
        let loss = tape.sum(picked);
        tape.backward(loss);
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(tape.grad_f64(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
