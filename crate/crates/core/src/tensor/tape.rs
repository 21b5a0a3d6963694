use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, KSIZE};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// The differentiable operations a tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    AddRowBias,
    Conv2d,
    Upsample2x,
    Silu,
    ChannelAffine,
    SpatialMean,
    ConcatChannels,
    SliceCols,
    Gather,
    Mse,
    Mean,
    Sum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::AddRowBias,
        OpKind::Conv2d,
        OpKind::Upsample2x,
        OpKind::Silu,
        OpKind::ChannelAffine,
        OpKind::SpatialMean,
        OpKind::ConcatChannels,
        OpKind::SliceCols,
        OpKind::Gather,
        OpKind::Mse,
        OpKind::Mean,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Conv2d => "conv2d",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Silu => "silu",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::SpatialMean => "spatial_mean",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceCols => "slice_cols",
            OpKind::Gather => "gather",
            OpKind::Mse => "mse",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRowBias { x: usize, bias: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Upsample2x(usize),
    Silu(usize),
    ChannelAffine { x: usize, scale: usize, shift: usize },
    SpatialMean(usize),
    ConcatChannels(usize, usize),
    SliceCols { x: usize, start: usize },
    Gather { table: usize, indices: Vec<usize> },
    Mse(usize, usize),
    Mean(usize),
    Sum(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(..) => OpKind::Upsample2x,
            Op::Silu(..) => OpKind::Silu,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::SpatialMean(..) => OpKind::SpatialMean,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Gather { .. } => OpKind::Gather,
            Op::Mse(..) => OpKind::Mse,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-use per backward pass: calling [`Tape::backward`] twice
/// without [`Tape::reset_grads`] in between is an error.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Deliberately corrupts the backward rule of one op kind (input
    /// gradients are scaled by 1.25). Used as a negative control for
    /// gradient checking.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("tensor does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.nodes[self.idx(v)?].value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    pub fn grad(&self, v: Var) -> Result<Option<&Tensor<T>>> {
        Ok(self.nodes[self.idx(v)?].grad.as_ref())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.scale(T::of(s));
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Scale(ia, s), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        let v = Tensor::new(&[m, n], data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    /// `[n, d] + [d]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let d = sb[0];
        let bias_data = self.nodes[ib].value.data();
        let mut v = self.nodes[ix].value.clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bias_data) {
                *o += b;
            }
        }
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(v, Op::AddRowBias { x: ix, bias: ib }, rg))
    }

    /// 3×3 convolution with zero padding 1 over `[n, cin, h, w]`; weight
    /// `[cout, cin, 3, 3]`, bias `[cout]`, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (
            self.nodes[ix].value.shape(),
            self.nodes[iw].value.shape(),
            self.nodes[ib].value.shape(),
        );
        if !(stride == 1 || stride == 2) {
            return Err(Error::bad_shape("conv2d", format!("unsupported stride {stride}")));
        }
        if sx.len() != 4 || sw.len() != 4 || sw[2] != KSIZE || sw[3] != KSIZE || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::shape("conv2d", sw, sb));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            stride,
        };
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            self.nodes[ib].value.data(),
            &geom,
        );
        let v = Tensor::new(&[geom.n, geom.cout, ho, wo], data)?;
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(v, Op::Conv2d { x: ix, w: iw, b: ib, geom }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::bad_shape("upsample2x", format!("expected NCHW, got {s:?}")));
        }
        let data = kernels::upsample2x_forward(self.nodes[ix].value.data(), s[0] * s[1], s[2], s[3]);
        let v = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::Upsample2x(ix), rg))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a * kernels::sigmoid(a));
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::Silu(ix), rg))
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[n, c] + shift[n, c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (ix, isc, ish) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let sx = self.nodes[ix].value.shape();
        let ssc = self.nodes[isc].value.shape();
        let ssh = self.nodes[ish].value.shape();
        if sx.len() < 2 || ssc != [sx[0], sx[1]] {
            return Err(Error::shape("channel_affine", sx, ssc));
        }
        if ssc != ssh {
            return Err(Error::shape("channel_affine", ssc, ssh));
        }
        let rest: usize = sx[2..].iter().product();
        let sc = self.nodes[isc].value.data();
        let sh = self.nodes[ish].value.data();
        let mut v = self.nodes[ix].value.clone();
        for (p, plane) in v.data_mut().chunks_mut(rest).enumerate() {
            let (a, b) = (sc[p], sh[p]);
            for o in plane.iter_mut() {
                *o = *o * a + b;
            }
        }
        let rg = self.rg(&[ix, isc, ish]);
        Ok(self.push(v, Op::ChannelAffine { x: ix, scale: isc, shift: ish }, rg))
    }

    /// Mean over all axes after the first two: `[n, c, ..] -> [n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let sx = self.nodes[ix].value.shape();
        if sx.len() < 3 {
            return Err(Error::bad_shape("spatial_mean", format!("expected rank >= 3, got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let rest: usize = sx[2..].iter().product();
        let inv = T::of(1.0 / rest as f64);
        let data = self.nodes[ix]
            .value
            .data()
            .chunks(rest)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::SpatialMean(ix), rg))
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let n = sa[0];
        let (pa, pb) = (self.nodes[ia].value.numel() / n, self.nodes[ib].value.numel() / n);
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut data = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            data.extend_from_slice(&da[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&db[i * pb..(i + 1) * pb]);
        }
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::ConcatChannels(ia, ib), rg))
    }

    /// Columns `start..start + len` of an `[n, d]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let sx = self.nodes[ix].value.shape();
        if sx.len() != 2 || len == 0 || start + len > sx[1] {
            return Err(Error::bad_shape(
                "slice_cols",
                format!("columns {start}..{} of {sx:?}", start + len),
            ));
        }
        let d = sx[1];
        let data = self.nodes[ix]
            .value
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let v = Tensor::new(&[sx[0], len], data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::SliceCols { x: ix, start }, rg))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let st = self.nodes[it].value.shape();
        if st.len() != 2 || indices.is_empty() {
            return Err(Error::bad_shape("gather", format!("table {st:?}, {} indices", indices.len())));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::bad_shape("gather", format!("index {bad} out of range for {vocab} rows")));
        }
        let td = self.nodes[it].value.data();
        let data = indices
            .iter()
            .flat_map(|&i| td[i * d..(i + 1) * d].iter().copied())
            .collect();
        let v = Tensor::new(&[indices.len(), d], data)?;
        let rg = self.rg(&[it]);
        Ok(self.push(
            v,
            Op::Gather {
                table: it,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("mse", a, b)?;
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let s: T = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / T::of(da.len() as f64));
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Mse(ia, ib), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let d = self.nodes[ix].value.data();
        let v = Tensor::scalar(d.iter().copied().sum::<T>() / T::of(d.len() as f64));
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::Mean(ix), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.data().iter().copied().sum::<T>());
        let rg = self.rg(&[ix]);
        Ok(self.push(v, Op::Sum(ix), rg))
    }

    /// Reverse pass from a scalar. Populates `grad` on every node that
    /// requires it; leaves not reachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::Tape("backward already ran; call reset_grads first".into()));
        }
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.local_grads(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                let k = T::of(1.25);
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|x| *x *= k);
                }
            }
            for (j, c) in contribs {
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
        }
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() && matches!(n.op, Op::Leaf) {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its upstream gradient.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let needs = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| self.nodes[j].value.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.iter().map(|&x| -x).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            &Op::Scale(a, s) => {
                let s = T::of(s);
                out.push((a, g.iter().map(|&x| x * s).collect()));
            }
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    // g[m, n] * b^T[n, k]
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(b), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    out.push((a, ga));
                }
                if needs(b) {
                    // a^T[k, m] * g[m, n]
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), val(a), 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    out.push((b, gb));
                }
            }
            &Op::AddRowBias { x, bias } => {
                if needs(x) {
                    out.push((x, g.to_vec()));
                }
                if needs(bias) {
                    let d = self.nodes[bias].value.numel();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((bias, gb));
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let mut dx = needs(x).then(|| vec![T::zero(); self.nodes[x].value.numel()]);
                let mut dw = needs(w).then(|| vec![T::zero(); self.nodes[w].value.numel()]);
                let mut db = needs(b).then(|| vec![T::zero(); self.nodes[b].value.numel()]);
                kernels::conv2d_backward(
                    val(x),
                    val(w),
                    g,
                    &geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|d| (x, d)));
                out.extend(dw.map(|d| (w, d)));
                out.extend(db.map(|d| (b, d)));
            }
            &Op::Upsample2x(x) => {
                let s = self.nodes[x].value.shape();
                let mut dx = vec![T::zero(); self.nodes[x].value.numel()];
                kernels::upsample2x_backward(g, s[0] * s[1], s[2], s[3], &mut dx);
                out.push((x, dx));
            }
            &Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(&gi, &xi)| {
                        let s = kernels::sigmoid(xi);
                        gi * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect();
                out.push((x, dx));
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let planes = self.nodes[scale].value.numel();
                let rest = self.nodes[x].value.numel() / planes;
                let (xd, sd) = (val(x), val(scale));
                if needs(x) {
                    let mut dx = g.to_vec();
                    for (p, plane) in dx.chunks_mut(rest).enumerate() {
                        plane.iter_mut().for_each(|v| *v *= sd[p]);
                    }
                    out.push((x, dx));
                }
                if needs(scale) {
                    let ds = (0..planes)
                        .map(|p| {
                            let r = p * rest..(p + 1) * rest;
                            g[r.clone()].iter().zip(&xd[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    out.push((scale, ds));
                }
                if needs(shift) {
                    out.push((shift, g.chunks(rest).map(|c| c.iter().copied().sum()).collect()));
                }
            }
            &Op::SpatialMean(x) => {
                let n = self.nodes[x].value.numel();
                let rest = n / g.len();
                let inv = T::of(1.0 / rest as f64);
                let dx = (0..n).map(|j| g[j / rest] * inv).collect();
                out.push((x, dx));
            }
            &Op::ConcatChannels(a, b) => {
                let n = self.nodes[a].value.shape()[0];
                let (pa, pb) = (self.nodes[a].value.numel() / n, self.nodes[b].value.numel() / n);
                if needs(a) {
                    let da = (0..n).flat_map(|s| g[s * (pa + pb)..s * (pa + pb) + pa].iter().copied()).collect();
                    out.push((a, da));
                }
                if needs(b) {
                    let db = (0..n)
                        .flat_map(|s| g[s * (pa + pb) + pa..(s + 1) * (pa + pb)].iter().copied())
                        .collect();
                    out.push((b, db));
                }
            }
            &Op::SliceCols { x, start } => {
                let sx = self.nodes[x].value.shape();
                let d = sx[1];
                let len = g.len() / sx[0];
                let mut dx = vec![T::zero(); sx[0] * d];
                for (r, row) in g.chunks(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                out.push((x, dx));
            }
            Op::Gather { table, indices } => {
                let d = self.nodes[*table].value.shape()[1];
                let mut dt = vec![T::zero(); self.nodes[*table].value.numel()];
                for (r, &row) in indices.iter().enumerate() {
                    dt[row * d..(row + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*table, dt));
            }
            &Op::Mse(a, b) => {
                let n = val(a).len();
                let k = g[0] * T::of(2.0 / n as f64);
                let da: Vec<T> = val(a).iter().zip(val(b)).map(|(&x, &y)| k * (x - y)).collect();
                if needs(b) {
                    out.push((b, da.iter().map(|&x| -x).collect()));
                }
                if needs(a) {
                    out.push((a, da));
                }
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                out.push((x, vec![g[0] / T::of(n as f64); n]));
            }
            &Op::Sum(x) => {
                out.push((x, vec![g[0]; self.nodes[x].value.numel()]));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, 9.0]));
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 0.0);
    }

    #[test]
    fn silu_matches_definition() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[5], &xs));
        let y = tape.silu(x).unwrap();
        let got = tape.value(y).unwrap().data().to_vec();
        assert_eq!(got[2], 0.0);
        for (g, x) in got.iter().zip(xs) {
            assert!((g - x / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_kernel_conv_is_identity_on_5x5() {
        let xs: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &xs));
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), xs.as_slice());
    }

    #[test]
    fn conv_by_hand_on_5x5() {
        // all-ones kernel sums the zero-padded 3x3 neighbourhood
        let xs: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &xs));
        let w = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let y = tape.value(y).unwrap().data().to_vec();
        // corner (0,0): 0+1+5+6
        assert_eq!(y[0], 12.5);
        // centre (2,2): sum of 6,7,8,11,12,13,16,17,18
        assert_eq!(y[12], 108.5);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &xs));
        let w = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        let v = tape.value(y).unwrap();
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        // output (1,1) samples input (2,2) centre
        assert_eq!(v.data()[4], 108.0);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[4], &[1.0; 4]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.mean(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(t(&[2], &[4.0, 5.0]));
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Tape(_))));
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
        tape.reset_grads();
        tape.backward(l).unwrap();

        let mut other = Tape::<f64>::new();
        let z = other.param(t(&[1], &[1.0]));
        assert!(tape.backward(z).is_err());
        assert!(tape.add(w, z).is_err());
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let msg = tape.matmul(a, a).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn gather_rows_unused_get_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(Tensor::from_f64(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let rows = tape.gather(table, &[1, 3, 1]).unwrap();
        assert_eq!(tape.value(rows).unwrap().data(), &[3., 4., 7., 8., 3., 4.]);
        let l = tape.sum(rows).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(table).unwrap().unwrap().data(), &[0., 0., 2., 2., 0., 0., 1., 1.]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
