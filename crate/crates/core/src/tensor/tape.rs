use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow {
        x: Var,
        row: Var,
    },
    Gelu(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis_len: usize,
        inner: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    SwapAxes01 {
        x: Var,
        dims: [usize; 3],
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Every operation appends a node holding its output and whatever the
/// backward rule needs. [`Tape::backward`] walks the nodes in reverse.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    no_grad: bool,
}

/// Query rows processed together by [`Tape::attention`].
const ATTN_BLOCK: usize = 128;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

fn tanh_fast<T: Element>(u: T) -> T {
    let two = T::one() + T::one();
    let e = (two * u).exp_fast();
    T::one() - two / (e + T::one())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: false,
        }
    }

    /// A tape that records values only. Nothing on it requires a gradient,
    /// so operations skip the state their backward rules would need.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are kept if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad() && !self.no_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Records a snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a leaf or parameter snapshot by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// read as its transpose when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dims("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dims("batch_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dims(op_name, sa, sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect()).expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Adds a length-`n` row to every row of a tensor whose last axis is `n`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().unwrap_or(&1);
        let row_len: usize = sr.iter().product();
        if sx.is_empty() || row_len != n {
            return Err(Error::dims("add_row", sx, sr));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&e| half * e * (T::one() + tanh_fast(c * (e + a * e * e * e))))
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * sigmoid(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Silu(x), &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let block = axis_len * inner;
        for (xs, ys) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            if inner == 1 {
                softmax_row(xs, ys);
            } else {
                let mut row = vec![T::zero(); axis_len];
                let mut res = vec![T::zero(); axis_len];
                for i in 0..inner {
                    for j in 0..axis_len {
                        row[j] = xs[j * inner + i];
                    }
                    softmax_row(&row, &mut res);
                    for j in 0..axis_len {
                        ys[j * inner + i] = res[j];
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis_len, inner }, &[x]))
    }

    /// Multi-head scaled dot-product attention. `q` is `[m, d]`, `k` and `v`
    /// are `[n, d]`; head `h` uses columns `h·d/heads..(h+1)·d/heads`. Every
    /// query attends to every key. Returns `[m, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::dims("attention", sq, sk));
        }
        let (m, n, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(
                "attention",
                format!("width {d} does not split into {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let keep = [q, k, v].iter().any(|x| self.nodes[x.0].needs_grad);
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        // without a backward pass only one block of probabilities is live
        let mut probs = vec![T::zero(); if keep { heads * m * n } else { ATTN_BLOCK.min(m) * n }];
        let mut out = vec![T::zero(); m * d];
        let rs = d as isize;
        for h in 0..heads {
            let off = h * dh;
            // query blocks keep the score rows cache-resident between the two products
            for r0 in (0..m).step_by(ATTN_BLOCK) {
                let rows = ATTN_BLOCK.min(m - r0);
                let pb = if keep {
                    &mut probs[(h * m + r0) * n..(h * m + r0 + rows) * n]
                } else {
                    &mut probs[..rows * n]
                };
                let qb = &dq[r0 * d + off..];
                T::gemm(
                    rows,
                    dh,
                    n,
                    qb,
                    (rs, 1),
                    &dk[off..],
                    (1, rs),
                    T::zero(),
                    pb,
                    (n as isize, 1),
                );
                for row in pb.chunks_exact_mut(n) {
                    softmax_in_place(row, scale);
                }
                let ob = &mut out[r0 * d + off..];
                T::gemm(
                    rows,
                    n,
                    dh,
                    pb,
                    (n as isize, 1),
                    &dv[off..],
                    (rs, 1),
                    T::zero(),
                    ob,
                    (rs, 1),
                );
            }
        }
        if !keep {
            probs = Vec::new();
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Normalizes the last axis to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm", "rank-0 input"))?;
        if self.value(gain).numel() != n {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        if self.value(bias).numel() != n {
            return Err(Error::dims("layer_norm", &shape, self.shape(bias)));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64_lossy(rs);
            for j in 0..n {
                let h = T::from_f64_lossy((row[j].as_f64() - mean) * rs);
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone();
        let mut value = value.reshaped(shape)?;
        value.zero_grad();
        value.set_requires_grad(false);
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::contract("swap_axes01", format!("expected rank 3, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2]];
        let [a, b, c] = dims;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for i in 0..a {
            for j in 0..b {
                let from = (i * b + j) * c;
                let to = (j * a + i) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        let value = Tensor::new(vec![b, a, c], out)?;
        Ok(self.push(value, Op::SwapAxes01 { x, dims }, &[x]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::contract(
                "slice_cols",
                format!("columns {start}..{} of {s:?}", start + len),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Entries `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::contract("slice_rows", format!("rows {start}..{end} of {s:?}")));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.data(x)[start * stride..end * stride].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dims("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::contract("embedding", format!("table shape {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(
                "embedding",
                format!("id {bad} outside vocabulary of {vocab}"),
            ));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding", "empty id list"));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let total = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Mean(x), &[x])
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != target.len() {
            return Err(Error::dims("mse", self.shape(pred), &[target.len()]));
        }
        let total = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(total)),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse pass from a scalar. Gradients of leaves and parameter
    /// snapshots accumulate on the tape across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`], but parameter gradients accumulate into
    /// `store` instead of the tape's snapshots.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_impl(loss, Some(store))
    }

    fn backward_impl(&mut self, loss: Var, mut store: Option<&mut ParamStore<T>>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let param = match self.nodes[i].op {
                Op::Leaf => None,
                Op::Param(id) => Some(id),
                _ => {
                    self.backprop_node(i, &g, &mut grads);
                    continue;
                }
            };
            match (param, store.as_deref_mut()) {
                (Some(id), Some(s)) => s.get_mut(id).accumulate_grad(&g),
                _ => self.nodes[i].value.accumulate_grad(&g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, *a, &mut |ga| {
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        db,
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    )
                });
                acc(grads, *b, &mut |gb| {
                    T::gemm(
                        k,
                        m,
                        n,
                        da,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    )
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let trans_b = *trans_b;
                acc(grads, *a, &mut |ga| {
                    // dA = G · op(B)^T
                    let bt = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for s in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            (n as isize, 1),
                            &db[s * k * n..(s + 1) * k * n],
                            bt,
                            T::one(),
                            &mut ga[s * m * k..(s + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for s in 0..batch {
                        let a_s = &da[s * m * k..(s + 1) * m * k];
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let gb_s = &mut gb[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // dB = G^T · A, stored [n, k]
                            T::gemm(
                                n,
                                m,
                                k,
                                g_s,
                                (1, n as isize),
                                a_s,
                                (k as isize, 1),
                                T::one(),
                                gb_s,
                                (k as isize, 1),
                            );
                        } else {
                            // dB = A^T · G, stored [k, n]
                            T::gemm(
                                k,
                                m,
                                n,
                                a_s,
                                (1, k as isize),
                                g_s,
                                (n as isize, 1),
                                T::one(),
                                gb_s,
                                (n as isize, 1),
                            );
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, *a, &mut |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x = *x + gy * bv;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(va) {
                        *x = *x + gy * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(grads, *x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * s)
                });
            }
            Op::AddRow { x, row } => {
                acc(grads, *x, &mut |gx| add_into(gx, g));
                acc(grads, *row, &mut |gr| {
                    let n = gr.len();
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let three_a = T::from_f64_lossy(3.0 * GELU_A);
                let half = T::from_f64_lossy(0.5);
                let xs = nodes[x.0].value.data();
                acc(grads, *x, &mut |gx| {
                    for ((dst, &gy), &e) in gx.iter_mut().zip(g).zip(xs) {
                        let t = tanh_fast(c * (e + a * e * e * e));
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * e * e);
                        let d = half * (T::one() + t) + half * e * dt;
                        *dst = *dst + gy * d;
                    }
                });
            }
            Op::Silu(x) => {
                let xs = nodes[x.0].value.data();
                acc(grads, *x, &mut |gx| {
                    for ((dst, &gy), &e) in gx.iter_mut().zip(g).zip(xs) {
                        let s = sigmoid(e);
                        *dst = *dst + gy * s * (T::one() + e * (T::one() - s));
                    }
                });
            }
            Op::Softmax { x, axis_len, inner } => {
                let (len, inner) = (*axis_len, *inner);
                let y = out.data();
                acc(grads, *x, &mut |gx| {
                    let block = len * inner;
                    for o in 0..y.len() / block {
                        for i in 0..inner {
                            let base = o * block + i;
                            if inner == 1 {
                                let (gr, yr) = (&g[base..base + len], &y[base..base + len]);
                                let dot = T::from_f64_lossy(lane_dot(gr, yr));
                                for j in 0..len {
                                    gx[base + j] = gx[base + j] + yr[j] * (gr[j] - dot);
                                }
                                continue;
                            }
                            let mut dot = 0.0f64;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx].as_f64() * y[idx].as_f64();
                            }
                            let dot = T::from_f64_lossy(dot);
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] = gx[idx] + y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (m, d) = (out.shape()[0], out.shape()[1]);
                let n = nodes[k.0].value.shape()[0];
                let dh = d / heads;
                let rs = d as isize;
                let (dq, dk, dv) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let want_qk = nodes[q.0].needs_grad || nodes[k.0].needs_grad;
                let mut gq = vec![T::zero(); if nodes[q.0].needs_grad { m * d } else { 0 }];
                let mut gk = vec![T::zero(); if nodes[k.0].needs_grad { n * d } else { 0 }];
                let mut gv = vec![T::zero(); if nodes[v.0].needs_grad { n * d } else { 0 }];
                let mut ds = vec![T::zero(); ATTN_BLOCK.min(m) * n];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * m * n..(h + 1) * m * n];
                    for r0 in (0..m).step_by(ATTN_BLOCK) {
                        let rows = ATTN_BLOCK.min(m - r0);
                        let pb = &p[r0 * n..(r0 + rows) * n];
                        let gb = &g[r0 * d + off..];
                        if !gv.is_empty() {
                            T::gemm(
                                n,
                                rows,
                                dh,
                                pb,
                                (1, n as isize),
                                gb,
                                (rs, 1),
                                T::one(),
                                &mut gv[off..],
                                (rs, 1),
                            );
                        }
                        if !want_qk {
                            continue;
                        }
                        // gradient with respect to the pre-softmax scores, scale included
                        let dsb = &mut ds[..rows * n];
                        T::gemm(
                            rows,
                            dh,
                            n,
                            gb,
                            (rs, 1),
                            &dv[off..],
                            (1, rs),
                            T::zero(),
                            dsb,
                            (n as isize, 1),
                        );
                        for (dr, pr) in dsb.chunks_exact_mut(n).zip(pb.chunks_exact(n)) {
                            let dot = T::from_f64_lossy(lane_dot(dr, pr));
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * *scale;
                            }
                        }
                        if !gq.is_empty() {
                            let gqb = &mut gq[r0 * d + off..];
                            T::gemm(
                                rows,
                                n,
                                dh,
                                dsb,
                                (n as isize, 1),
                                &dk[off..],
                                (rs, 1),
                                T::one(),
                                gqb,
                                (rs, 1),
                            );
                        }
                        if !gk.is_empty() {
                            let qb = &dq[r0 * d + off..];
                            T::gemm(
                                n,
                                rows,
                                dh,
                                dsb,
                                (1, n as isize),
                                qb,
                                (rs, 1),
                                T::one(),
                                &mut gk[off..],
                                (rs, 1),
                            );
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if !local.is_empty() {
                        acc(grads, var, &mut |dst| add_into(dst, &local));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                acc(grads, *gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..n {
                            let d = (gr[j] * gv[j]).as_f64();
                            m1 += d;
                            m2 += d * hr[j].as_f64();
                        }
                        let m1 = m1 / n as f64;
                        let m2 = m2 / n as f64;
                        let rs = rstd[r].as_f64();
                        for j in 0..n {
                            let d = (gr[j] * gv[j]).as_f64();
                            let v = rs * (d - m1 - hr[j].as_f64() * m2);
                            gx[r * n + j] = gx[r * n + j] + T::from_f64_lossy(v);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(grads, *x, &mut |gx| add_into(gx, g)),
            Op::SwapAxes01 { x, dims } => {
                let [a, b, c] = *dims;
                acc(grads, *x, &mut |gx| {
                    for i in 0..a {
                        for j in 0..b {
                            let src = (j * a + i) * c;
                            let dst = (i * b + j) * c;
                            add_into(&mut gx[dst..dst + c], &g[src..src + c]);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.shape()[1];
                let len = out.shape()[1];
                let start = *start;
                acc(grads, *x, &mut |gx| {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], gr);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let stride: usize = out.shape()[1..].iter().product();
                let off = start * stride;
                acc(grads, *x, &mut |gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(grads, *p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.shape()[1];
                acc(grads, *table, &mut |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|v| *v = *v + g0));
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let g0 = g[0] / T::from_f64_lossy(n as f64);
                acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|v| *v = *v + g0));
            }
            Op::Mse { pred, target } => {
                let p = nodes[pred.0].value.data();
                let scale = g[0] * T::from_f64_lossy(2.0 / p.len() as f64);
                acc(grads, *pred, &mut |gp| {
                    for ((dst, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                        *dst = *dst + scale * (pv - tv);
                    }
                });
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Softmax of one contiguous row.
fn softmax_row<T: Element>(x: &[T], y: &mut [T]) {
    y.copy_from_slice(x);
    softmax_in_place(y, T::one());
}

/// `row <- softmax(scale · row)` for `scale > 0`. The normalizer is summed in
/// eight `f64` lanes.
fn softmax_in_place<T: Element>(row: &mut [T], scale: T) {
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            lanes[i] = if c[i] > lanes[i] { c[i] } else { lanes[i] };
        }
    }
    let max = chunks
        .remainder()
        .iter()
        .chain(&lanes)
        .fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp_fast();
    }
    let mut acc = [0.0f64; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i].as_f64();
        }
    }
    let total = acc.iter().sum::<f64>() + chunks.remainder().iter().map(|v| v.as_f64()).sum::<f64>();
    let inv = T::from_f64_lossy(1.0 / total);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Dot product accumulated in eight `f64` lanes.
fn lane_dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i].as_f64() * y[i].as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.data(y), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6 && d[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| d[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-4);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-4);

        let g = tape.constant(t(&[3], &[1.0; 3]));
        let b = tape.constant(t(&[3], &[0.0; 3]));
        let x = tape.constant(t(&[1, 3], &[2.5; 3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // a second pass accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..64).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
            let x = tape.leaf(Tensor::new(vec![8, 8], data).unwrap().with_grad());
            let y = tape.matmul(x, x).unwrap();
            let z = tape.softmax(y, 1).unwrap();
            let w = tape.gelu(z);
            let s = tape.sum(w);
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
