//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. Node indices are assigned in creation order,
//! so iterating indices downwards from the loss is a reverse topological
//! order and each node's gradient is final when it is visited.

use std::collections::{BTreeMap, HashMap};

use crate::error::{NumError, Result};
use crate::scalar::{gemm_into, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: F },
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Rotary { x: Var, cos: Vec<F>, sin: Vec<F> },
    GatherRows { table: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ShiftRows { a: Var, k: usize },
    Reshape(Var),
    GroupMeanRows { a: Var, group: usize },
    Sum(Var),
    Mean(Var),
    PoissonNll {
        eta: Var,
        counts: Vec<F>,
        mask: Vec<F>,
        denom: F,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
        mask: Vec<F>,
        denom: F,
    },
    CosineAlign { s: Var, t: Var, valid: Vec<bool> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<String>,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A tape is single-owner and lives for one optimisation step.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    by_param: BTreeMap<String, Tensor<F>>,
    by_var: HashMap<Var, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.by_param.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_var.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<F>> {
        self.by_param
    }

    /// Adds `other * weight` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<F>, weight: F) {
        for (name, g) in &other.by_param {
            match self.by_param.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b * weight;
                    }
                }
                None => {
                    self.by_param.insert(name.clone(), g.map(|x| x * weight));
                }
            }
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<F>) {
        self.by_param.insert(name.into(), g);
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; parameters become constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a trainable parameter. Re-registering a name returns the
    /// existing node, so a parameter shared by several sequences in a batch
    /// accumulates one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> Var {
        self.param_with(name, value, true)
    }

    /// Registers a named parameter that may be frozen (`trainable == false`).
    pub fn param_with(&mut self, name: &str, value: &Tensor<F>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        v
    }

    /// A leaf input whose gradient is tracked (for checking input gradients).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if bt {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            F::one(),
            av.data(),
            Layout::Normal,
            bv.data(),
            if bt { Layout::Transposed } else { Layout::Normal },
            F::zero(),
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: bt,
            },
            ng,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.len() != bv.len() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a bias vector (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        let c = av.cols();
        if bv.len() != c {
            return Err(shape_err("add_row", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a, bias]);
        Ok(self.push(out, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::from_f64_lossy(GELU_C);
        let k = F::from_f64_lossy(GELU_A);
        let half = F::from_f64_lossy(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let eps = F::from_f64_lossy(eps);
        let cf = F::from_usize(c).expect("cols");
        let rows = xv.rows();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Rotary position embedding: rotates consecutive column pairs of each
    /// row by `position[row] * base^(-2i/cols)`.
    pub fn rotary(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if c % 2 != 0 || positions.len() != rows {
            return Err(NumError::Invalid(format!(
                "rotary: need even width and one position per row (width {c}, rows {rows}, positions {})",
                positions.len()
            )));
        }
        let half = c / 2;
        let mut cos = vec![F::zero(); rows * half];
        let mut sin = vec![F::zero(); rows * half];
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = p * base.powf(-2.0 * i as f64 / c as f64);
                cos[r * half + i] = F::from_f64_lossy(theta.cos());
                sin[r * half + i] = F::from_f64_lossy(theta.sin());
            }
        }
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            for i in 0..half {
                let (co, si) = (cos[r * half + i], sin[r * half + i]);
                let x0 = xv.data()[r * c + 2 * i];
                let x1 = xv.data()[r * c + 2 * i + 1];
                out[r * c + 2 * i] = x0 * co - x1 * si;
                out[r * c + 2 * i + 1] = x0 * si + x1 * co;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Rotary { x, cos, sin }, ng))
    }

    // ---- indexing and layout -------------------------------------------

    /// `out[r] = table[idx[r]]` over rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let out = tv.select_rows(idx)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c;
        let out = Tensor::new(vec![rows, c], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = vec![F::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(v.row(r));
            }
            off += c;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if start + len > c || len == 0 {
            return Err(NumError::Invalid(format!(
                "slice_cols {start}..{} of width {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    /// Shifts rows down by `k`, filling the first `k` rows with zeros.
    pub fn shift_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let mut data = vec![F::zero(); rows * c];
        if k < rows {
            data[k * c..].copy_from_slice(&av.data()[..(rows - k) * c]);
        }
        let out = Tensor::new(vec![rows, c], data).expect("same size");
        let ng = self.ng(&[a]);
        self.push(out, Op::ShiftRows { a, k }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Means over consecutive groups of `group` rows: `[R x c] -> [R/group x c]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if group == 0 || rows % group != 0 {
            return Err(NumError::Invalid(format!(
                "group_mean_rows: {rows} rows not divisible into groups of {group}"
            )));
        }
        let g = rows / group;
        let inv = F::one() / F::from_usize(group).expect("group");
        let mut data = vec![F::zero(); g * c];
        for r in 0..rows {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (d, &x) in dst.iter_mut().zip(av.row(r)) {
                *d += x * inv;
            }
        }
        let out = Tensor::new(vec![g, c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::GroupMeanRows { a, group }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / F::from_usize(v.len()).expect("len"));
        let ng = self.ng(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    // ---- losses (registered from crate::loss) -------------------------

    pub(crate) fn push_loss(&mut self, value: F, op: Op<F>, inputs: &[Var]) -> Var {
        let ng = self.ng(inputs);
        self.push(Tensor::scalar(value), op, ng)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// trainable parameter and tracked input it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g).expect("grad shape");
                if let Some(name) = &node.param {
                    out.by_param.insert(name.clone(), t.clone());
                }
                out.by_var.insert(Var(i), t);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if self.requires_grad(*a) {
                    // dA = dC * op(B)^T
                    let lb = if *b_transposed { Layout::Normal } else { Layout::Transposed };
                    self.acc_with(grads, *a, |da| {
                        gemm_into(m, n, k, F::one(), g, Layout::Normal, bv.data(), lb, F::one(), da)
                    });
                }
                if self.requires_grad(*b) {
                    if *b_transposed {
                        // B is [n x k]: dB = dC^T * A
                        self.acc_with(grads, *b, |db| {
                            gemm_into(
                                n,
                                m,
                                k,
                                F::one(),
                                g,
                                Layout::Transposed,
                                av.data(),
                                Layout::Normal,
                                F::one(),
                                db,
                            )
                        });
                    } else {
                        // dB = A^T * dC
                        self.acc_with(grads, *b, |db| {
                            gemm_into(
                                k,
                                m,
                                n,
                                F::one(),
                                av.data(),
                                Layout::Transposed,
                                g,
                                Layout::Normal,
                                F::one(),
                                db,
                            )
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, g.iter().zip(bv).map(|(&d, &x)| d * x).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::AddRow { a, bias } => {
                self.acc(grads, *a, g.to_vec());
                let c = y.cols();
                self.acc_with(grads, *bias, |db| {
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Scale { a, c } => self.acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(y.data()).map(|(&d, &e)| d * e).collect()),
            Op::Gelu(a) => {
                let c = F::from_f64_lossy(GELU_C);
                let k = F::from_f64_lossy(GELU_A);
                let three = F::from_f64_lossy(3.0);
                let half = F::from_f64_lossy(0.5);
                let xs = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(&d, &x)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (F::one() + three * k * x * x);
                        d * (half * (F::one() + th) + half * x * (F::one() - th * th) * dudx)
                    })
                    .collect();
                self.acc(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut dx = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: F = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let cf = F::from_usize(c).expect("cols");
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![F::zero(); g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc_with(grads, *bias, |db| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                });
            }
            Op::Rotary { x, cos, sin } => {
                let c = y.cols();
                let half = c / 2;
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..y.rows() {
                    for i in 0..half {
                        let (co, si) = (cos[r * half + i], sin[r * half + i]);
                        let d0 = g[r * c + 2 * i];
                        let d1 = g[r * c + 2 * i + 1];
                        dx[r * c + 2 * i] = d0 * co + d1 * si;
                        dx[r * c + 2 * i + 1] = -d0 * si + d1 * co;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherRows { table, idx } => {
                let c = y.cols();
                self.acc_with(grads, *table, |dt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dt[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.acc(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let len = y.cols();
                let c = self.value(*a).cols();
                self.acc_with(grads, *a, |da| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            da[r * c + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ShiftRows { a, k } => {
                let (rows, c) = (y.rows(), y.cols());
                let mut da = vec![F::zero(); g.len()];
                if *k < rows {
                    da[..(rows - k) * c].copy_from_slice(&g[k * c..]);
                }
                self.acc(grads, *a, da);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::GroupMeanRows { a, group } => {
                let c = y.cols();
                let inv = F::one() / F::from_usize(*group).expect("group");
                let rows = self.value(*a).rows();
                let mut da = vec![F::zero(); rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        da[r * c + j] = g[(r / group) * c + j] * inv;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / F::from_usize(n).expect("len");
                self.acc(grads, *a, vec![v; n]);
            }
            Op::PoissonNll {
                eta,
                counts,
                mask,
                denom,
            } => {
                let ev = self.value(*eta).data();
                let s = g[0] / *denom;
                let d = ev
                    .iter()
                    .zip(counts)
                    .zip(mask)
                    .map(|((&e, &k), &m)| s * m * (e.exp() - k))
                    .collect();
                self.acc(grads, *eta, d);
            }
            Op::Mse {
                pred,
                target,
                mask,
                denom,
            } => {
                let pv = self.value(*pred).data();
                let two = F::from_f64_lossy(2.0);
                let s = g[0] * two / *denom;
                let d = pv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| s * m * (p - t))
                    .collect();
                self.acc(grads, *pred, d);
            }
            Op::CosineAlign { s, t, valid } => {
                let sv = self.value(*s);
                let tv = self.value(*t);
                let c = sv.cols();
                let rows = sv.rows();
                let scale = -g[0] / F::from_usize(rows).expect("rows");
                let mut ds = vec![F::zero(); sv.len()];
                let mut dt = vec![F::zero(); tv.len()];
                for r in 0..rows {
                    if !valid[r] {
                        continue;
                    }
                    let a = sv.row(r);
                    let b = tv.row(r);
                    let na = a.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let nb = b.iter().map(|&x| x * x).sum::<F>().sqrt();
                    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                    let cos = dot / (na * nb);
                    for j in 0..c {
                        ds[r * c + j] = scale * (b[j] / (na * nb) - cos * a[j] / (na * na));
                        dt[r * c + j] = scale * (a[j] / (na * nb) - cos * b[j] / (nb * nb));
                    }
                }
                self.acc(grads, *s, ds);
                self.acc(grads, *t, dt);
            }
        }
    }
}
