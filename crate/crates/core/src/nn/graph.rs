//! Tape of tensor operations with a reverse sweep producing parameter gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, Mat};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv { x: NodeId, w: ParamId, b: ParamId },
    Depthwise { x: NodeId, w: ParamId, b: ParamId },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Upsample { x: NodeId },
    Concat { parts: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// False for inputs and anything computed only from inputs.
    needs_grad: bool,
}

/// Forward tape over a borrowed parameter store.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Stride-1 "same" convolution; kernel size comes from the weight shape.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let xin = &self.nodes[x.0].value;
        let weight = self.params.get(w);
        let [cout, cin, k, _] = weight.shape();
        let [bs, c, h, wd] = xin.shape();
        if c != cin {
            bail!(Shape, "conv expects {} input channels, got {}", cin, c);
        }
        let hw = h * wd;
        let mut out = Tensor::zeros([bs, cout, h, wd]);
        let mut cols = if k > 1 { vec![0.0f32; cin * k * k * hw] } else { Vec::new() };
        let bias = self.params.get(b).data();
        for s in 0..bs {
            let xs = xin.sample(s);
            let os = out.sample_mut(s);
            if k == 1 {
                kernels::gemm(Mat::new(weight.data(), cout, cin), Mat::new(xs, cin, hw), 0.0, os);
            } else {
                kernels::im2col(xs, cin, h, wd, k, &mut cols);
                kernels::gemm(Mat::new(weight.data(), cout, cin * k * k), Mat::new(&cols, cin * k * k, hw), 0.0, os);
            }
            for (o, plane) in os.chunks_exact_mut(hw).enumerate() {
                let bv = bias[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(out, Op::Conv { x, w, b }, true))
    }

    /// 3x3 depthwise convolution; weight shape `(c, 1, 3, 3)`.
    pub fn depthwise(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let xin = &self.nodes[x.0].value;
        let weight = self.params.get(w);
        let [c, one, k, _] = weight.shape();
        if one != 1 || k != 3 || c != xin.channels() {
            bail!(Shape, "depthwise weight {:?} does not fit input {:?}", weight.shape(), xin.shape());
        }
        let [bs, _, h, wd] = xin.shape();
        let mut out = Tensor::zeros(xin.shape());
        let bias = self.params.get(b).data();
        for s in 0..bs {
            kernels::depthwise_forward(xin.sample(s), c, h, wd, weight.data(), bias, out.sample_mut(s));
        }
        let needs = true;
        Ok(self.push(out, Op::Depthwise { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        // NaN passes through, as in the usual frameworks
        out.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        let xin = &self.nodes[x.0].value;
        let [bs, c, h, w] = xin.shape();
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Shape, "max pool needs even spatial dims, got {}x{}", h, w);
        }
        let mut out = Tensor::zeros([bs, c, h / 2, w / 2]);
        let mut argmax = vec![0u32; out.data().len()];
        kernels::maxpool_forward(xin.data(), bs * c, h, w, out.data_mut(), &mut argmax);
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let xin = &self.nodes[x.0].value;
        let [bs, c, h, w] = xin.shape();
        let mut out = Tensor::zeros([bs, c, 2 * h, 2 * w]);
        kernels::upsample_forward(xin.data(), bs * c, h, w, out.data_mut());
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample { x }, needs)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.nodes[parts[0].0].value.shape();
        let mut channels = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                bail!(Shape, "cannot concatenate {:?} with {:?}", first, s);
            }
            channels += s[1];
        }
        let [bs, _, h, w] = first;
        let mut out = Tensor::zeros([bs, channels, h, w]);
        for s in 0..bs {
            let mut offset = 0;
            let dst = out.sample_mut(s);
            for p in parts {
                let src = self.nodes[p.0].value.sample(s);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, needs))
    }

    /// Back-propagates `grad` (shaped like the value at `root`) through the tape.
    pub fn backward(&self, root: NodeId, grad: Tensor) -> Result<Gradients> {
        if grad.shape() != self.nodes[root.0].value.shape() {
            bail!(Shape, "root gradient {:?} vs value {:?}", grad.shape(), self.nodes[root.0].value.shape());
        }
        let mut param_grads = self.params.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(grad);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b } => {
                    let dx = self.conv_backward(*x, *w, *b, &g, &mut param_grads);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Depthwise { x, w, b } => {
                    let xin = &self.nodes[x.0].value;
                    let [bs, c, h, wd] = xin.shape();
                    let weight = self.params.get(*w).data();
                    let mut dw = vec![0.0f32; weight.len()];
                    let mut db = vec![0.0f32; c];
                    let wants_dx = self.nodes[x.0].needs_grad;
                    let mut dx = if wants_dx { Some(Tensor::zeros(xin.shape())) } else { None };
                    for s in 0..bs {
                        let dxs = dx.as_mut().map(|t| t.sample_mut(s));
                        kernels::depthwise_backward(xin.sample(s), g.sample(s), c, h, wd, weight, &mut dw, &mut db, dxs);
                    }
                    add_into(param_grads.slot(*w).data_mut(), &dw);
                    add_into(param_grads.slot(*b).data_mut(), &db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                    let d = dx.data_mut();
                    for (gv, &a) in g.data().iter().zip(argmax) {
                        d[a as usize] += *gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x } => {
                    let shape = self.nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros(shape);
                    kernels::upsample_backward(g.data(), shape[0] * shape[1], shape[2], shape[3], dx.data_mut());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let bs = g.batch();
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape();
                        let len = shape[1] * shape[2] * shape[3];
                        if self.nodes[p.0].needs_grad {
                            let mut dp = Tensor::zeros(shape);
                            for s in 0..bs {
                                dp.sample_mut(s).copy_from_slice(&g.sample(s)[offset..offset + len]);
                            }
                            accumulate(&mut grads, *p, dp);
                        }
                        offset += len;
                    }
                }
            }
        }
        Ok(param_grads)
    }

    fn conv_backward(&self, x: NodeId, w: ParamId, b: ParamId, g: &Tensor, pg: &mut Gradients) -> Option<Tensor> {
        let xin = &self.nodes[x.0].value;
        let weight = self.params.get(w);
        let [cout, cin, k, _] = weight.shape();
        let [bs, _, h, wd] = xin.shape();
        let hw = h * wd;
        let ckk = cin * k * k;
        let wants_dx = self.nodes[x.0].needs_grad;
        let mut dx = if wants_dx { Some(Tensor::zeros(xin.shape())) } else { None };
        let mut dw = vec![0.0f32; cout * ckk];
        let mut db = vec![0.0f32; cout];
        let mut cols = if k > 1 { vec![0.0f32; ckk * hw] } else { Vec::new() };
        let mut dcols = if k > 1 && wants_dx { vec![0.0f32; ckk * hw] } else { Vec::new() };
        for s in 0..bs {
            let gs = g.sample(s);
            for (o, plane) in gs.chunks_exact(hw).enumerate() {
                db[o] += plane.iter().sum::<f32>();
            }
            let xs = xin.sample(s);
            if k == 1 {
                kernels::gemm(Mat::new(gs, cout, hw), Mat::t(xs, hw, cin), 1.0, &mut dw);
                if let Some(dx) = dx.as_mut() {
                    kernels::gemm(Mat::t(weight.data(), cin, cout), Mat::new(gs, cout, hw), 1.0, dx.sample_mut(s));
                }
            } else {
                kernels::im2col(xs, cin, h, wd, k, &mut cols);
                kernels::gemm(Mat::new(gs, cout, hw), Mat::t(&cols, hw, ckk), 1.0, &mut dw);
                if let Some(dx) = dx.as_mut() {
                    kernels::gemm(Mat::t(weight.data(), ckk, cout), Mat::new(gs, cout, hw), 0.0, &mut dcols);
                    kernels::col2im(&dcols, cin, h, wd, k, dx.sample_mut(s));
                }
            }
        }
        add_into(pg.slot(w).data_mut(), &dw);
        add_into(pg.slot(b).data_mut(), &db);
        dx
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Scalar objective sum(out * probe) for finite differences.
    fn objective(out: &Tensor, probe: &[f32]) -> f64 {
        out.data().iter().zip(probe).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    fn build<'a>(params: &'a ParamStore, ids: &[(ParamId, ParamId)], input: &Tensor) -> (Tensor, Graph<'a>, NodeId) {
        let mut g = Graph::new(params);
        let x = g.input(input.clone());
        let a = g.conv(x, ids[0].0, ids[0].1).unwrap();
        let a = g.relu(a);
        let p = g.maxpool(a).unwrap();
        let d = g.depthwise(p, ids[1].0, ids[1].1).unwrap();
        let u = g.upsample(d);
        let c = g.concat(&[a, u]).unwrap();
        let out = g.conv(c, ids[2].0, ids[2].1).unwrap();
        let o = g.conv(out, ids[3].0, ids[3].1).unwrap();
        (g.value(o).clone(), g, o)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(11, &[]);
        let mut params = ParamStore::new();
        let ids = [
            params.add_conv("c1", 3, 2, 3, 2.0, &mut r),
            params.add_conv("dw", 3, 1, 3, 2.0, &mut r),
            params.add_conv("c2", 2, 6, 3, 2.0, &mut r),
            params.add_conv("head", 2, 2, 1, 1.0, &mut r),
        ];
        // nonzero biases exercise the bias path
        for v in params.values_mut() {
            if v.shape()[0] == 1 {
                v.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f32 - 0.05);
            }
        }
        let input = Tensor::from_vec([2, 2, 4, 6], (0..96).map(|_| rng::normal(&mut r) as f32).collect()).unwrap();
        let (out, g, root) = build(&params, &ids, &input);
        let probe: Vec<f32> = (0..out.data().len()).map(|_| rng::normal(&mut r) as f32).collect();
        let grads = g.backward(root, Tensor::from_vec(out.shape(), probe.clone()).unwrap()).unwrap();
        let eps = 1e-3f32;
        for pi in 0..params.len() {
            for j in 0..params.values()[pi].data().len() {
                let mut plus = params.clone();
                plus.values_mut()[pi].data_mut()[j] += eps;
                let mut minus = params.clone();
                minus.values_mut()[pi].data_mut()[j] -= eps;
                let fp = objective(&build(&plus, &ids, &input).0, &probe);
                let fm = objective(&build(&minus, &ids, &input).0, &probe);
                let numeric = (fp - fm) / (2.0 * eps as f64);
                let analytic = grads.tensors()[pi].data()[j] as f64;
                let tol = 2e-2 * (1.0 + numeric.abs());
                assert!(
                    (numeric - analytic).abs() < tol,
                    "{} [{}]: numeric {} analytic {}",
                    params.names()[pi],
                    j,
                    numeric,
                    analytic
                );
            }
        }
    }
}
