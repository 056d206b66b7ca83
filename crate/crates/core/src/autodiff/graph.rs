use crate::error::{Error, Result};
use crate::tensor::{col2im_acc, im2col, matmul_acc, transpose, ConvGeometry, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand is 1-D and repeats across every row of the left operand.
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// A single-use computation tape. Build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last `backward` root with respect to `v`;
    /// `None` for constants and for nodes the root does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Cross-correlation of `x` (`C×H×W` or `B×C×H×W`) with `kernel`
    /// (`C_out×C_in×kh×kw`), zero padding, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, geo, c_out) = conv_dims(self.value(x), self.value(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::Dimension(format!(
                    "conv bias shape {:?}, expected [{c_out}]",
                    self.value(b).shape()
                )));
            }
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = bias.map(|b| self.value(b).data());
        let positions = geo.out_positions();
        let img_len = geo.c_in * geo.h * geo.w;
        let mut out = vec![0.0; batch * c_out * positions];
        for s in 0..batch {
            let cols = im2col(&xv[s * img_len..(s + 1) * img_len], &geo);
            let dst = &mut out[s * c_out * positions..(s + 1) * c_out * positions];
            if let Some(bv) = bv {
                for (co, chunk) in dst.chunks_mut(positions).enumerate() {
                    chunk.fill(bv[co]);
                }
            }
            matmul_acc(kv, &cols, dst, c_out, geo.patch_len(), positions);
        }
        let shape = if self.value(x).ndim() == 3 {
            vec![c_out, geo.out_h(), geo.out_w()]
        } else {
            vec![batch, c_out, geo.out_h(), geo.out_w()]
        };
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let rg = self.needs(&parents);
        Ok(self.push(
            Op::Conv2d { x, kernel, bias, stride, padding },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.broadcast_pair(a, b)?;
        let out = apply_broadcast(self.value(a), self.value(b), bc, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b, bc), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.broadcast_pair(a, b)?;
        let out = apply_broadcast(self.value(a), self.value(b), bc, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b, bc), out, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Log(a), out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        if !out.is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Exp(a), out, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("tensors have at least one axis");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.needs(&[a]);
        self.push(Op::Softmax(a), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.needs(&[a]);
        self.push(Op::Mean(a), out, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.needs(&[a]);
        self.push(Op::Abs(a), out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    fn broadcast_pair(&self, a: Var, b: Var) -> Result<(Var, Var, Broadcast)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok((a, b, Broadcast::Same));
        }
        if self.value(b).is_scalar() {
            return Ok((a, b, Broadcast::Scalar));
        }
        if self.value(a).is_scalar() {
            return Ok((b, a, Broadcast::Scalar));
        }
        if sb.len() == 1 && sa.last() == sb.first() {
            return Ok((a, b, Broadcast::Row));
        }
        if sa.len() == 1 && sb.last() == sa.first() {
            return Ok((b, a, Broadcast::Row));
        }
        Err(Error::Dimension(format!("cannot broadcast {sa:?} with {sb:?}")))
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate into any
    /// gradients left by a previous call; use [`Graph::zero_grad`] between calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        accumulate(&mut self.nodes[root.0], seed);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            for (parent, contribution) in self.local_grads(idx, &op, &g)? {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut self.nodes[parent.0], contribution);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &self.nodes[idx].value;
        let grads = match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((a, g.matmul(&bv.transpose()?)?));
                }
                if self.nodes[b.0].requires_grad {
                    res.push((b, av.transpose()?.matmul(g)?));
                }
                res
            }
            Op::Conv2d { x, kernel, bias, stride, padding } => {
                self.conv_backward(x, kernel, bias, stride, padding, g)?
            }
            Op::Add(a, b, bc) => {
                vec![(a, g.clone()), (b, reduce_broadcast(g, self.value(b), bc))]
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(a), self.value(b));
                let ga = apply_broadcast(g, bv, bc, |x, y| x * y);
                let prod = g.zip_map(av, |x, y| x * y)?;
                vec![(a, ga), (b, reduce_broadcast(&prod, bv, bc))]
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                vec![(a, ga)]
            }
            Op::Log(a) => vec![(a, g.zip_map(self.value(a), |gv, x| gv / x)?)],
            Op::Exp(a) => vec![(a, g.zip_map(out, |gv, y| gv * y)?)],
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("non-empty shape");
                let mut ga = vec![0.0; out.len()];
                for ((dst, y), gr) in
                    ga.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(a, Tensor::from_parts(out.shape().to_vec(), ga))]
            }
            Op::Sum(a) => vec![(a, Tensor::full(self.value(a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let t = self.value(a);
                vec![(a, Tensor::full(t.shape(), g.data()[0] / t.len() as f64))]
            }
            Op::Abs(a) => {
                // d|x|/dx taken as 0 at x = 0
                let ga = g.zip_map(self.value(a), |gv, x| gv * x.signum() * (x != 0.0) as u8 as f64)?;
                vec![(a, ga)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(self.value(a).shape())?)],
        };
        Ok(grads)
    }

    fn conv_backward(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        g: &Tensor,
    ) -> Result<Vec<(Var, Tensor)>> {
        let (xt, kt) = (self.value(x), self.value(kernel));
        let (batch, geo, c_out) = conv_dims(xt, kt, stride, padding)?;
        let positions = geo.out_positions();
        let ckk = geo.patch_len();
        let img_len = geo.c_in * geo.h * geo.w;
        let want_x = self.nodes[x.0].requires_grad;
        let want_k = self.nodes[kernel.0].requires_grad;

        let kt_t = transpose(kt.data(), c_out, ckk);
        let mut dx = vec![0.0; if want_x { xt.len() } else { 0 }];
        let mut dk = vec![0.0; if want_k { kt.len() } else { 0 }];
        let mut db = vec![0.0; c_out];
        for s in 0..batch {
            let gs = &g.data()[s * c_out * positions..(s + 1) * c_out * positions];
            for (co, chunk) in gs.chunks(positions).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
            if want_k {
                let cols = im2col(&xt.data()[s * img_len..(s + 1) * img_len], &geo);
                let cols_t = transpose(&cols, ckk, positions);
                matmul_acc(gs, &cols_t, &mut dk, c_out, positions, ckk);
            }
            if want_x {
                let mut dcols = vec![0.0; ckk * positions];
                matmul_acc(&kt_t, gs, &mut dcols, ckk, c_out, positions);
                col2im_acc(&dcols, &geo, &mut dx[s * img_len..(s + 1) * img_len]);
            }
        }
        let mut res = Vec::with_capacity(3);
        if want_x {
            res.push((x, Tensor::from_parts(xt.shape().to_vec(), dx)));
        }
        if want_k {
            res.push((kernel, Tensor::from_parts(kt.shape().to_vec(), dk)));
        }
        if let Some(b) = bias {
            res.push((b, Tensor::from_parts(vec![c_out], db)));
        }
        Ok(res)
    }
}

fn accumulate(node: &mut Node, contribution: Tensor) {
    match node.grad.as_mut() {
        Some(g) => g.add_assign(&contribution),
        None => node.grad = Some(contribution),
    }
}

fn conv_dims(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, ConvGeometry, usize)> {
    let (batch, c_in, h, w) = match *x.shape() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(Error::Dimension(format!("conv2d input must be 3-D or 4-D, got {s:?}"))),
    };
    let &[c_out, kc, kh, kw] = k.shape() else {
        return Err(Error::Dimension(format!("conv2d kernel must be 4-D, got {:?}", k.shape())));
    };
    if kc != c_in {
        return Err(Error::Dimension(format!(
            "conv2d kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    let geo = ConvGeometry { c_in, h, w, kh, kw, stride, padding };
    geo.validate()?;
    Ok((batch, geo, c_out))
}

fn apply_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = match bc {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let s = b.data()[0];
            a.data().iter().map(|&x| f(x, s)).collect()
        }
        Broadcast::Row => {
            let n = b.len();
            a.data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        }
    };
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sums a full-shape gradient down to the (possibly broadcast) operand shape.
fn reduce_broadcast(g: &Tensor, operand: &Tensor, bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::full(operand.shape(), g.sum()),
        Broadcast::Row => {
            let n = operand.len();
            let mut acc = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::from_parts(operand.shape().to_vec(), acc)
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
