use super::kernels::{self, conv3d_backward, conv3d_forward, maxpool3d_forward, upsample3d_forward};
use super::tensor::{Shape5, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: [usize; 3] },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    /// Scalar with a precomputed gradient w.r.t. one input.
    ScalarLoss { p: Var, grad: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// "Same"-padded convolution; `w` is `[out, in, kd, kh, kw]`, `b` has `out` values.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xt.shape(), wt.shape());
        let out = conv3d_forward(xt.data(), xs, wt.data(), ws, bt.data())?;
        let t = Tensor::new([xs[0], ws[0], xs[2], xs[3], xs[4]], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv { x, w, b }, rg))
    }

    pub fn maxpool3d(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let xt = self.value(x);
        let (out, os, argmax) = maxpool3d_forward(xt.data(), xt.shape(), window)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(os, out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        if factor.iter().any(|&f| f == 0) {
            return Err(Error::shape("upsample factors must be >= 1"));
        }
        let xt = self.value(x);
        let (out, os) = upsample3d_forward(xt.data(), xt.shape(), factor);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(os, out)?, Op::Upsample { x, factor }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = xt.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let t = Tensor::new(xt.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = xt.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(xt.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (sa, sb) = (at.shape(), bt.shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let n = sa[2] * sa[3] * sa[4];
        let (ca, cb) = (sa[1] * n, sb[1] * n);
        let mut out = Vec::with_capacity(at.numel() + bt.numel());
        for bi in 0..sa[0] {
            out.extend_from_slice(&at.data()[bi * ca..(bi + 1) * ca]);
            out.extend_from_slice(&bt.data()[bi * cb..(bi + 1) * cb]);
        }
        let t = Tensor::new([sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Records a scalar `value` whose gradient w.r.t. `p` is `grad`.
    pub fn scalar_loss(&mut self, p: Var, value: f32, grad: Vec<f32>) -> Result<Var> {
        if grad.len() != self.value(p).numel() {
            return Err(Error::shape("loss gradient does not match its input"));
        }
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { p, grad }, rg))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward() needs a scalar root; use backward_with"));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Back-propagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("seed gradient does not match root"));
        }
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.nodes[root.0].value.set_grad(Some(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.take_grad() else {
                continue;
            };
            self.propagate(i, &gy);
            self.nodes[i].value.set_grad(Some(gy));
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, g: &[f32]) {
        if self.nodes[v.0].requires_grad {
            self.nodes[v.0].value.accumulate_grad(g);
        }
    }

    fn propagate(&mut self, i: usize, gy: &[f32]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv { x, w, b } => {
                let need_dx = self.rg(x);
                let (xt, wt) = (self.value(x), self.value(w));
                let (dx, dw, db) =
                    conv3d_backward(xt.data(), xt.shape(), wt.data(), wt.shape(), gy, need_dx);
                if let Some(dx) = dx {
                    self.add_grad(x, &dx);
                }
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0f32; self.value(*x).numel()];
                for (&a, &g) in argmax.iter().zip(gy) {
                    dx[a as usize] += g;
                }
                self.add_grad(*x, &dx);
            }
            &Op::Upsample { x, factor } => {
                let dx = kernels::upsample3d_backward(gy, self.value(x).shape(), factor);
                self.add_grad(x, &dx);
            }
            &Op::Relu { x } => {
                let dx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::Sigmoid { x } => {
                let dx: Vec<f32> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::Concat { a, b } => {
                let (sa, sb): (Shape5, Shape5) = (self.value(a).shape(), self.value(b).shape());
                let n = sa[2] * sa[3] * sa[4];
                let (ca, cb) = (sa[1] * n, sb[1] * n);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for bi in 0..sa[0] {
                    let base = bi * (ca + cb);
                    ga.extend_from_slice(&gy[base..base + ca]);
                    gb.extend_from_slice(&gy[base + ca..base + ca + cb]);
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::ScalarLoss { p, grad } => {
                let g0 = gy[0];
                let dp: Vec<f32> = grad.iter().map(|&g| g * g0).collect();
                self.add_grad(*p, &dp);
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
