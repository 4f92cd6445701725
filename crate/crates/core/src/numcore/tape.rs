use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Intermediates kept by a fused GRU pass, stacked in processing order.
#[derive(Debug, Clone)]
struct GruSaved<S> {
    h_prev: Vec<S>,
    z: Vec<S>,
    r: Vec<S>,
    n: Vec<S>,
    gh_n: Vec<S>,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulConst { x: Var, factor: Vec<S> },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    MeanRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    LogSoftmax { x: Var, inv_t: S },
    Softmax { x: Var, inv_t: S },
    PairwiseDist { x: Var },
    AnchoredQuadratic { x: Var, anchor: Vec<S>, weight: Vec<S> },
    GruSeq {
        gx: Var,
        u: Var,
        steps: usize,
        batch: usize,
        hidden: usize,
        reverse: bool,
        saved: GruSaved<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<S>>,
}

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// exact reverse order. Leaf gradients accumulate across repeated
/// `backward` calls until [`Tape::zero_grads`].
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn dims_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

// One timestep of the gate algebra for a single batch row.
fn gru_cell<S: Scalar>(
    gx: &[S],
    gh: &[S],
    h: &mut [S],
    zs: &mut [S],
    rs: &mut [S],
    ns: &mut [S],
    ghs: &mut [S],
) {
    let hid = h.len();
    let (gx_z, rest) = gx.split_at(hid);
    let (gx_r, gx_n) = rest.split_at(hid);
    let (gh_z, rest) = gh.split_at(hid);
    let (gh_r, gh_n) = rest.split_at(hid);
    let one = S::one();
    let two = S::lit(2.0);
    for j in 0..hid {
        zs[j] = one / (one + (-(gx_z[j] + gh_z[j])).cell_exp());
        rs[j] = one / (one + (-(gx_r[j] + gh_r[j])).cell_exp());
    }
    for j in 0..hid {
        ghs[j] = gh_n[j];
        let a = gx_n[j] + rs[j] * gh_n[j];
        ns[j] = one - two / ((two * a).cell_exp() + one);
    }
    for j in 0..hid {
        h[j] = (S::one() - zs[j]) * ns[j] + zs[j] * h[j];
    }
}

// Reverse of `gru_cell` for one batch row: fills the pre-activation
// gradients and the direct part of `dh_prev`.
fn gru_cell_grad<S: Scalar>(
    [z, r, n]: [&[S]; 3],
    ghn: &[S],
    hp: &[S],
    dh: &[S],
    dh_prev: &mut [S],
    dgx: &mut [S],
    dgh: &mut [S],
) {
    let hid = dh.len();
    let one = S::one();
    let (dgx_z, rest) = dgx.split_at_mut(hid);
    let (dgx_r, dgx_n) = rest.split_at_mut(hid);
    let (dgh_z, rest) = dgh.split_at_mut(hid);
    let (dgh_r, dgh_n) = rest.split_at_mut(hid);
    for j in 0..hid {
        let dn = dh[j] * (one - z[j]);
        let dz = dh[j] * (hp[j] - n[j]);
        dh_prev[j] = dh[j] * z[j];
        let dan = dn * (one - n[j] * n[j]);
        let dar = dan * ghn[j] * r[j] * (one - r[j]);
        let daz = dz * z[j] * (one - z[j]);
        dgx_z[j] = daz;
        dgx_r[j] = dar;
        dgx_n[j] = dan;
        dgh_z[j] = daz;
        dgh_r[j] = dar;
        dgh_n[j] = dan * r[j];
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward operations -------------------------------------------------

    /// `a[m×k] · b[k×n]`, or `a[m×k] · b[n×k]ᵀ` with `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(dims_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            rsb,
            csb,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Adds a length-n bias to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[bias.0].value.len() != n {
            return Err(dims_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let xb = self.data(x);
        let bb = self.data(bias);
        let mut out = xb.to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bb) {
                *o += *b;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::from_parts_unchecked(shape, out), Op::AddBias { x, bias }, &[x, bias])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts_unchecked(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let out: Vec<S> = self.data(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, Tensor::from_parts_unchecked(shape, out), op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Elementwise product with a constant buffer (dropout masks, Fisher weights).
    pub fn mul_const(&mut self, x: Var, factor: Vec<S>) -> Result<Var> {
        if factor.len() != self.nodes[x.0].value.len() {
            return Err(dims_err("mul_const", self.shape(x), &[factor.len()]));
        }
        let out: Vec<S> = self.data(x).iter().zip(&factor).map(|(a, b)| *a * *b).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_const", Tensor::from_parts_unchecked(shape, out), Op::MulConst { x, factor }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Per-row sums of `x[m×n]`, shape `[m]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let d = self.data(x);
        let out: Vec<S> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        self.push("row_sum", Tensor::from_parts_unchecked(vec![m], out), Op::RowSum(x), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if ma != mb {
            return Err(dims_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&da[i * na..(i + 1) * na]);
            out.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        self.push(
            "concat_cols",
            Tensor::from_parts_unchecked(vec![ma, na + nb], out),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("stack_rows needs at least one row".into()))?;
        let n = self.nodes[first.0].value.len();
        let mut out = Vec::with_capacity(n * parts.len());
        for p in parts {
            if self.nodes[p.0].value.len() != n {
                return Err(dims_err("stack_rows", self.shape(*first), self.shape(*p)));
            }
            out.extend_from_slice(self.data(*p));
        }
        self.push(
            "stack_rows",
            Tensor::from_parts_unchecked(vec![parts.len(), n], out),
            Op::StackRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(dims_err("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts_unchecked(vec![len, n], out),
            Op::SliceRows { x, start, len },
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(dims_err("slice_cols", self.shape(x), &[start, len]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts_unchecked(vec![m, len], out),
            Op::SliceCols { x, start, len },
            &[x],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(dims_err("gather_rows", self.shape(x), rows));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts_unchecked(vec![rows.len(), n], out),
            Op::GatherRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    /// Mean of the listed rows, shape `[n]`.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(dims_err("mean_rows", self.shape(x), rows));
        }
        let d = self.data(x);
        let mut out = vec![S::zero(); n];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                *o += *v;
            }
        }
        let inv = S::one() / S::lit(rows.len() as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(
            "mean_rows",
            Tensor::from_parts_unchecked(vec![n], out),
            Op::MeanRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    /// One element per row: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.len() != m {
            return Err(dims_err("pick", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Parameter(format!("pick index {bad} out of range for {n} columns")));
        }
        let d = self.data(x);
        let out: Vec<S> = idx.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect();
        self.push(
            "pick",
            Tensor::from_parts_unchecked(vec![m], out),
            Op::Pick { x, idx: idx.to_vec() },
            &[x],
        )
    }

    fn check_temperature(temperature: S) -> Result<S> {
        if !(temperature > S::zero()) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature:?}"
            )));
        }
        Ok(S::one() / temperature)
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, x: Var, temperature: S) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let (m, n) = self.dims(x);
        let d = self.data(x);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|v| ((*v - mx) * inv_t).exp()).sum::<S>().ln();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (*v - mx) * inv_t - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "log_softmax",
            Tensor::from_parts_unchecked(shape, out),
            Op::LogSoftmax { x, inv_t },
            &[x],
        )
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax(&mut self, x: Var, temperature: S) -> Result<Var> {
        let inv_t = Self::check_temperature(temperature)?;
        let (m, n) = self.dims(x);
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            super::softmax_in_place(&mut out[i * n..(i + 1) * n], inv_t);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "softmax",
            Tensor::from_parts_unchecked(shape, out),
            Op::Softmax { x, inv_t },
            &[x],
        )
    }

    /// `Σ_i weight_i (x_i − anchor_i)²` over the first `anchor.len()`
    /// elements of `x`; later elements (a grown head) are free.
    pub fn anchored_quadratic(&mut self, x: Var, anchor: Vec<S>, weight: Vec<S>) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if anchor.len() != weight.len() || anchor.len() > n {
            return Err(dims_err("anchored_quadratic", self.shape(x), &[anchor.len(), weight.len()]));
        }
        let s: S = self
            .data(x)
            .iter()
            .zip(&anchor)
            .zip(&weight)
            .map(|((v, a), w)| *w * (*v - *a) * (*v - *a))
            .sum();
        self.push(
            "anchored_quadratic",
            Tensor::scalar(s),
            Op::AnchoredQuadratic { x, anchor, weight },
            &[x],
        )
    }

    /// Euclidean distances between all row pairs of `x[c×d]`, shape `[c×c]`.
    pub fn pairwise_dist(&mut self, x: Var) -> Result<Var> {
        let (c, d) = self.dims(x);
        let xs = self.data(x);
        let mut out = vec![S::zero(); c * c];
        for i in 0..c {
            for j in (i + 1)..c {
                let s: S = (0..d)
                    .map(|k| {
                        let e = xs[i * d + k] - xs[j * d + k];
                        e * e
                    })
                    .sum();
                let dist = s.sqrt();
                out[i * c + j] = dist;
                out[j * c + i] = dist;
            }
        }
        self.push(
            "pairwise_dist",
            Tensor::from_parts_unchecked(vec![c, c], out),
            Op::PairwiseDist { x },
            &[x],
        )
    }

    /// Runs a GRU over `steps` timesteps from a zero initial state and returns
    /// the state after the last processed step, shape `[batch×hidden]`.
    ///
    /// `gx` holds the input projections (bias included) time-major:
    /// rows `t*batch..(t+1)*batch` belong to timestep `t`, with the
    /// `[update | reset | candidate]` gate blocks side by side. `u` is the
    /// `hidden × 3·hidden` recurrent matrix. With `reverse` the steps are
    /// consumed from `t = steps-1` down to `0`.
    ///
    /// Gate algebra, single bias per gate, reset applied after the matmul:
    /// `z = σ(gx_z + h·U_z)`, `r = σ(gx_r + h·U_r)`,
    /// `n = tanh(gx_n + r ⊙ (h·U_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn gru_sequence(&mut self, gx: Var, u: Var, batch: usize, reverse: bool) -> Result<Var> {
        let (rows, g3) = self.dims(gx);
        let (hidden, ug) = self.dims(u);
        if g3 != 3 * hidden || ug != g3 || batch == 0 || rows % batch != 0 {
            return Err(dims_err("gru_sequence", self.shape(gx), self.shape(u)));
        }
        let steps = rows / batch;
        let h_sz = batch * hidden;
        let gxd = self.data(gx);
        let ud = self.data(u);
        let mut saved = GruSaved {
            h_prev: vec![S::zero(); steps * h_sz],
            z: vec![S::zero(); steps * h_sz],
            r: vec![S::zero(); steps * h_sz],
            n: vec![S::zero(); steps * h_sz],
            gh_n: vec![S::zero(); steps * h_sz],
        };
        let mut h = vec![S::zero(); h_sz];
        let mut gh = vec![S::zero(); batch * g3];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            S::gemm(
                batch,
                hidden,
                g3,
                S::one(),
                &h,
                hidden as isize,
                1,
                ud,
                g3 as isize,
                1,
                S::zero(),
                &mut gh,
                g3 as isize,
                1,
            );
            let span = k * h_sz..(k + 1) * h_sz;
            saved.h_prev[span.clone()].copy_from_slice(&h);
            let (zs, rs) = (&mut saved.z[span.clone()], &mut saved.r[span.clone()]);
            let (ns, ghs) = (&mut saved.n[span.clone()], &mut saved.gh_n[span]);
            for b in 0..batch {
                let gx_row = &gxd[(t * batch + b) * g3..(t * batch + b + 1) * g3];
                let gh_row = &gh[b * g3..(b + 1) * g3];
                let cell = b * hidden..(b + 1) * hidden;
                gru_cell(
                    gx_row,
                    gh_row,
                    &mut h[cell.clone()],
                    &mut zs[cell.clone()],
                    &mut rs[cell.clone()],
                    &mut ns[cell.clone()],
                    &mut ghs[cell],
                );
            }
        }
        self.push(
            "gru_sequence",
            Tensor::from_parts_unchecked(vec![batch, hidden], h),
            Op::GruSeq {
                gx,
                u,
                steps,
                batch,
                hidden,
                reverse,
                saved,
            },
            &[gx, u],
        )
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates `d loss / d ·` to every reachable leaf that requires a
    /// gradient, adding onto whatever those leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = out.matrix_dims().1;
                if wants(*a) {
                    // da = g · bᵀ   (or g · b when b was transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let da = grad_slot(grads, *a, m * k);
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, self.data(*b), rsb, csb, S::one(), da, k as isize, 1);
                }
                if wants(*b) {
                    let db = grad_slot(grads, *b, k * n);
                    if *trans_b {
                        // db[n×k] = gᵀ · a
                        S::gemm(n, m, k, S::one(), g, 1, n as isize, self.data(*a), k as isize, 1, S::one(), db, k as isize, 1);
                    } else {
                        // db[k×n] = aᵀ · g
                        S::gemm(k, m, n, S::one(), self.data(*a), 1, k as isize, g, n as isize, 1, S::one(), db, n as isize, 1);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let (m, n) = out.matrix_dims();
                if wants(*x) {
                    add_into(grad_slot(grads, *x, m * n), g);
                }
                if wants(*bias) {
                    let db = grad_slot(grads, *bias, n);
                    for r in 0..m {
                        add_into(db, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(grad_slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(grad_slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let db = grad_slot(grads, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= *gv);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.data(*b);
                    let da = grad_slot(grads, *a, g.len());
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += *gv * *y;
                    }
                }
                if wants(*b) {
                    let av = self.data(*a);
                    let db = grad_slot(grads, *b, g.len());
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += *gv * *x;
                    }
                }
            }
            Op::Scale(x, c) => {
                let dx = grad_slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += *gv * *c);
            }
            Op::MulConst { x, factor } => {
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gv), f) in dx.iter_mut().zip(g).zip(factor) {
                    *d += *gv * *f;
                }
            }
            Op::Sigmoid(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * *y * (S::one() - *y);
                }
            }
            Op::Tanh(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * (S::one() - *y * *y);
                }
            }
            Op::Exp(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * *y;
                }
            }
            Op::Square(x) => {
                let xv = self.data(*x);
                let dx = grad_slot(grads, *x, g.len());
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += S::lit(2.0) * *gv * *v;
                }
            }
            Op::AnchoredQuadratic { x, anchor, weight } => {
                let len = nodes[x.0].value.len();
                let xv = nodes[x.0].value.data();
                let two_g = g[0] + g[0];
                let dx = grad_slot(grads, *x, len);
                for (((d, v), a), w) in dx.iter_mut().zip(xv).zip(anchor).zip(weight) {
                    *d += two_g * *w * (*v - *a);
                }
            }
            Op::Sum(x) => {
                let len = nodes[x.0].value.len();
                let dx = grad_slot(grads, *x, len);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::RowSum(x) => {
                let (m, n) = self.dims(*x);
                let dx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    dx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.dims(*a);
                let nb = self.dims(*b).1;
                let w = na + nb;
                if wants(*a) {
                    let da = grad_slot(grads, *a, m * na);
                    for r in 0..m {
                        add_into(&mut da[r * na..(r + 1) * na], &g[r * w..r * w + na]);
                    }
                }
                if wants(*b) {
                    let db = grad_slot(grads, *b, m * nb);
                    for r in 0..m {
                        add_into(&mut db[r * nb..(r + 1) * nb], &g[r * w + na..(r + 1) * w]);
                    }
                }
            }
            Op::StackRows(parts) => {
                let n = out.matrix_dims().1;
                for (r, p) in parts.iter().enumerate() {
                    if wants(*p) {
                        add_into(grad_slot(grads, *p, n), &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let (m, n) = self.dims(*x);
                let dx = grad_slot(grads, *x, m * n);
                add_into(&mut dx[start * n..(start + len) * n], g);
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.dims(*x);
                let dx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    add_into(&mut dx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.dims(*x);
                let dx = grad_slot(grads, *x, m * n);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
            Op::MeanRows { x, rows } => {
                let (m, n) = self.dims(*x);
                let inv = S::one() / S::lit(rows.len() as f64);
                let dx = grad_slot(grads, *x, m * n);
                for &r in rows {
                    for (d, gv) in dx[r * n..(r + 1) * n].iter_mut().zip(g) {
                        *d += *gv * inv;
                    }
                }
            }
            Op::Pick { x, idx } => {
                let (m, n) = self.dims(*x);
                let dx = grad_slot(grads, *x, m * n);
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * n + j] += g[r];
                }
            }
            Op::LogSoftmax { x, inv_t } => {
                let (m, n) = out.matrix_dims();
                let y = out.data();
                let dx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    let gs: S = g[r * n..(r + 1) * n].iter().copied().sum();
                    for c in 0..n {
                        let p = y[r * n + c].exp();
                        dx[r * n + c] += *inv_t * (g[r * n + c] - p * gs);
                    }
                }
            }
            Op::Softmax { x, inv_t } => {
                let (m, n) = out.matrix_dims();
                let y = out.data();
                let dx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    let dot: S = (0..n).map(|c| g[r * n + c] * y[r * n + c]).sum();
                    for c in 0..n {
                        dx[r * n + c] += *inv_t * y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
            }
            Op::PairwiseDist { x } => {
                let (c, d) = self.dims(*x);
                let xs = self.data(*x);
                let dist = out.data();
                let dx = grad_slot(grads, *x, c * d);
                for i in 0..c {
                    for j in 0..c {
                        let dij = dist[i * c + j];
                        // the norm has no gradient at coincident points; use zero
                        if i == j || dij <= S::lit(1e-12) {
                            continue;
                        }
                        let w = g[i * c + j] / dij;
                        for k in 0..d {
                            let e = (xs[i * d + k] - xs[j * d + k]) * w;
                            dx[i * d + k] += e;
                            dx[j * d + k] -= e;
                        }
                    }
                }
            }
            Op::GruSeq {
                gx,
                u,
                steps,
                batch,
                hidden,
                reverse,
                saved,
            } => {
                let (steps, batch, hidden) = (*steps, *batch, *hidden);
                let g3 = 3 * hidden;
                let h_sz = batch * hidden;
                let ud = self.data(*u);
                let mut dgx = vec![S::zero(); steps * batch * g3];
                // recurrent-input gradients, processing order
                let mut dgh_all = vec![S::zero(); steps * batch * g3];
                let mut dh = g.to_vec();
                let mut dh_prev = vec![S::zero(); h_sz];
                for k in (0..steps).rev() {
                    let t = if *reverse { steps - 1 - k } else { k };
                    let base = k * h_sz;
                    let dgh = &mut dgh_all[k * batch * g3..(k + 1) * batch * g3];
                    for b in 0..batch {
                        let c = base + b * hidden..base + (b + 1) * hidden;
                        let row = (t * batch + b) * g3;
                        gru_cell_grad(
                            [&saved.z[c.clone()], &saved.r[c.clone()], &saved.n[c.clone()]],
                            &saved.gh_n[c.clone()],
                            &saved.h_prev[c],
                            &dh[b * hidden..(b + 1) * hidden],
                            &mut dh_prev[b * hidden..(b + 1) * hidden],
                            &mut dgx[row..row + g3],
                            &mut dgh[b * g3..(b + 1) * g3],
                        );
                    }
                    // dh_prev += dgh · Uᵀ
                    S::gemm(
                        batch,
                        g3,
                        hidden,
                        S::one(),
                        dgh,
                        g3 as isize,
                        1,
                        ud,
                        1,
                        g3 as isize,
                        S::one(),
                        &mut dh_prev,
                        hidden as isize,
                        1,
                    );
                    std::mem::swap(&mut dh, &mut dh_prev);
                }
                if wants(*u) {
                    // dU += H_prevᵀ · dGH over all steps in one product
                    let du = grad_slot(grads, *u, hidden * g3);
                    S::gemm(
                        hidden,
                        steps * batch,
                        g3,
                        S::one(),
                        &saved.h_prev,
                        1,
                        hidden as isize,
                        &dgh_all,
                        g3 as isize,
                        1,
                        S::one(),
                        du,
                        g3 as isize,
                        1,
                    );
                }
                if wants(*gx) {
                    add_into(grad_slot(grads, *gx, dgx.len()), &dgx);
                }
            }
        }
    }
}

fn grad_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
