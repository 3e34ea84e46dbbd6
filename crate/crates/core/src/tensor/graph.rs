use super::kernels::{self, ConvGeom};
use super::{invalid, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Vec<f64>>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool(Var),
    Upsample(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug, Default)]
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = Tensor {
            requires_grad,
            grad: None,
            ..value
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Inserts a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let [n, c, h, w] = x.dims4("conv2d")?;
        let [o, wc, kh, kw] = wt.dims4("conv2d")?;
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape.clone(),
                rhs: wt.shape.clone(),
            });
        }
        if stride == 0 {
            return invalid("conv2d", "stride must be positive");
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: wt.shape.clone(),
                    rhs: bs.to_vec(),
                });
            }
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < kh || pw < kw || n == 0 || o == 0 {
            return Err(TensorError::ZeroExtent {
                op: "conv2d",
                input: x.shape.clone(),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(
            &x.data,
            &wt.data,
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new([n, o, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data.iter().map(|v| v.max(0.0)).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4("max_pool2d")?;
        if kernel == 0 || stride == 0 {
            return invalid("max_pool2d", "kernel and stride must be positive");
        }
        if kernel > h || kernel > w {
            return Err(TensorError::ZeroExtent {
                op: "max_pool2d",
                input: x.shape.clone(),
            });
        }
        let (out, argmax, oh, ow) = kernels::max_pool_forward(&x.data, dims, kernel, stride);
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4("adaptive_avg_pool2d")?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return invalid(
                "adaptive_avg_pool2d",
                format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
            );
        }
        let out = kernels::adaptive_avg_forward(&x.data, dims, out_h, out_w);
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::AdaptiveAvgPool(input), rg))
    }

    /// Half-pixel-centred bilinear upsampling (align-corners = false).
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let dims @ [n, c, h, w] = x.dims4("bilinear_upsample")?;
        if out_h < h || out_w < w {
            return invalid(
                "bilinear_upsample",
                format!("downscaling {h}x{w} to {out_h}x{out_w} is not supported"),
            );
        }
        let out = kernels::bilinear_forward(&x.data, dims, out_h, out_w);
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Upsample(input), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.shape.len() || start + len > x.shape[axis] || len == 0 {
            return invalid(
                "narrow",
                format!("cannot take [{start}, {}) of axis {axis} in {:?}", start + len, x.shape),
            );
        }
        let (outer, ext, inner) = kernels::axis_blocks(&x.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * ext + start) * inner;
            data.extend_from_slice(&x.data[off..off + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Narrow { input, axis, start }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * k).collect(),
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over all elements of the Huber-style smooth-L1 penalty.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1_loss", pred, target)?;
        if !(beta > 0.0) {
            return invalid("smooth_l1_loss", format!("beta must be positive, got {beta}"));
        }
        if self.requires_grad(target) {
            return invalid("smooth_l1_loss", "target must not require grad");
        }
        let (p, t) = (self.value(pred), self.value(target));
        let total: f64 = p
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| smooth_l1(a - b, beta))
            .sum();
        let loss = total / p.data.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target, beta }, rg))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape.clone()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions from node `i` to each of its inputs.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let need_dx = self.requires_grad(*input);
                let grads =
                    kernels::conv2d_backward(g, self.value(*weight).data(), cols, geom, need_dx);
                let mut out = vec![(*weight, grads.dw)];
                if need_dx {
                    out.push((*input, grads.dx));
                }
                if let Some(b) = bias {
                    out.push((*b, grads.db));
                }
                out
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                vec![(*input, d)]
            }
            Op::AdaptiveAvgPool(x) => {
                let dims = self.value(*x).dims4("adaptive_avg_pool2d").expect("checked in forward");
                let s = &node.value.shape;
                vec![(*x, kernels::adaptive_avg_backward(g, dims, s[2], s[3]))]
            }
            Op::Upsample(x) => {
                let dims = self.value(*x).dims4("bilinear_upsample").expect("checked in forward");
                let s = &node.value.shape;
                vec![(*x, kernels::bilinear_backward(g, dims, s[2], s[3]))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, ext, inner) = kernels::axis_blocks(&node.value.shape, *axis);
                let mut out: Vec<(Var, Vec<f64>)> = inputs
                    .iter()
                    .map(|v| (*v, Vec::with_capacity(self.value(*v).len())))
                    .collect();
                for o in 0..outer {
                    let mut off = o * ext * inner;
                    for (v, buf) in out.iter_mut() {
                        let block = self.shape(*v)[*axis] * inner;
                        buf.extend_from_slice(&g[off..off + block]);
                        off += block;
                    }
                }
                out
            }
            Op::Narrow { input, axis, start } => {
                let xs = &self.value(*input).shape;
                let (outer, ext, inner) = kernels::axis_blocks(xs, *axis);
                let len = node.value.shape[*axis];
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let off = (o * ext + start) * inner;
                    d[off..off + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, k) => vec![(*a, g.iter().map(|x| x * k).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::SmoothL1 { pred, target, beta } => {
                let (p, t) = (&self.value(*pred).data, &self.value(*target).data);
                let scale = g[0] / p.len() as f64;
                let d = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| scale * smooth_l1_slope(a - b, *beta))
                    .collect();
                vec![(*pred, d)]
            }
        }
    }
}

pub(crate) fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}
