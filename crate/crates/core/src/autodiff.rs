//! Tape-based reverse-mode differentiation over the op set the layers use:
//! contractions, reshapes, permutations, bias broadcast, ReLU, 2D
//! convolution, and the two losses. Contraction adjoints are themselves
//! contractions; the ReLU subgradient at 0 is 0.
//!
//! A tape records one forward computation; [`Tape::backward`] walks it in
//! reverse and returns a gradient per node. Parameters enter as leaves whose
//! ids are collected into a [`TapedForward`] so training code can map
//! gradients back to named layer parameters. A tape belongs to one training
//! job; nothing here is shared.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{add_row_bias, conv2d_forward, cross_entropy_value, Layer};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Contract {
        a: NodeId,
        b: NodeId,
        pairs: Vec<(usize, usize)>,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn contract(&mut self, a: NodeId, b: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let value = self.nodes[a].value.contract(&self.nodes[b].value, pairs)?;
        Ok(self.push(
            value,
            Op::Contract {
                a,
                b,
                pairs: pairs.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a].value.permute(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Broadcasts `bias` (length = last axis of `a`) over all leading axes.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = &self.nodes[bias].value;
        let av = &self.nodes[a].value;
        if b.rank() != 1 || av.rank() < 1 || av.shape()[av.rank() - 1] != b.len() {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} does not broadcast over {:?}",
                b.shape(),
                av.shape()
            )));
        }
        let mut value = av.clone();
        add_row_bias(&mut value, b);
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu { a })
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = conv2d_forward(
            &self.nodes[k].value,
            bias.map(|b| &self.nodes[b].value),
            &self.nodes[x].value,
            stride,
            padding,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Squared Frobenius distance divided by the number of data points in
    /// the batch (the first axis).
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = &self.nodes[pred].value;
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if p.rank() < 1 {
            return Err(Error::ShapeMismatch("mse needs a batched tensor".into()));
        }
        let batch = p.shape()[0] as f64;
        let value = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / batch;
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Softmax + negative log likelihood, mean over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let value = cross_entropy_value(&self.nodes[logits].value, labels)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep seeding the output with 1 (output must be scalar).
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.nodes[output].value.len() != 1 {
            return Err(Error::ShapeMismatch(
                "backward() needs a scalar output; use backward_with".into(),
            ));
        }
        let seed = Tensor::new(self.nodes[output].value.shape().to_vec(), vec![1.0])?;
        self.backward_with(output, seed)
    }

    /// Reverse sweep from `output` seeded with an explicit output gradient.
    pub fn backward_with(&self, output: NodeId, output_grad: Tensor) -> Result<Vec<Option<Tensor>>> {
        if output >= self.nodes.len() {
            return Err(Error::InvalidAxis(format!(
                "node {output} not on tape of length {}",
                self.nodes.len()
            )));
        }
        if output_grad.shape() != self.nodes[output].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output grad {:?} vs output {:?}",
                output_grad.shape(),
                self.nodes[output].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(output_grad);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Contract { a, b, pairs } => {
                let (ga, gb) =
                    contract_adjoints(g, &self.nodes[*a].value, &self.nodes[*b].value, pairs)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, g.reshape(self.nodes[*a].value.shape())?)?;
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inverse[ax] = k;
                }
                accumulate(grads, *a, g.permute(&inverse)?)?;
            }
            Op::AddBias { a, bias } => {
                accumulate(grads, *a, g.clone())?;
                let width = self.nodes[*bias].value.len();
                let mut gb = Tensor::zeros(&[width]);
                for (i, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[i % width] += v;
                }
                accumulate(grads, *bias, gb)?;
            }
            Op::Relu { a } => {
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                padding,
            } => {
                let (gx, gk, gb) = conv2d_adjoints(
                    g,
                    &self.nodes[*x].value,
                    &self.nodes[*k].value,
                    *stride,
                    *padding,
                );
                accumulate(grads, *x, gx)?;
                accumulate(grads, *k, gk)?;
                if let Some(b) = bias {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Mse { pred, target } => {
                let p = &self.nodes[*pred].value;
                let batch = p.shape()[0] as f64;
                let scale = 2.0 / batch * g.data()[0];
                let mut gp = p.sub(target)?;
                for v in gp.data_mut() {
                    *v *= scale;
                }
                accumulate(grads, *pred, gp)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let l = &self.nodes[*logits].value;
                let classes = l.shape()[1];
                let batch = labels.len() as f64;
                let scale = g.data()[0] / batch;
                let mut gl = Tensor::zeros(l.shape());
                for (i, &label) in labels.iter().enumerate() {
                    let row = &l.data()[i * classes..(i + 1) * classes];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for c in 0..classes {
                        let softmax = (row[c] - max).exp() / denom;
                        let indicator = if c == label { 1.0 } else { 0.0 };
                        gl.data_mut()[i * classes + c] = scale * (softmax - indicator);
                    }
                }
                accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Adjoints of `out = contract(a, b, pairs)` with respect to both inputs.
/// Each adjoint is itself a contraction of the output gradient with the
/// other operand, permuted back to the operand's axis order.
fn contract_adjoints(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    pairs: &[(usize, usize)],
) -> Result<(Tensor, Tensor)> {
    let in_pairs_a: Vec<bool> = {
        let mut v = vec![false; a.rank()];
        for &(ax, _) in pairs {
            v[ax] = true;
        }
        v
    };
    let in_pairs_b: Vec<bool> = {
        let mut v = vec![false; b.rank()];
        for &(_, bx) in pairs {
            v[bx] = true;
        }
        v
    };
    let free_a: Vec<usize> = (0..a.rank()).filter(|&ax| !in_pairs_a[ax]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&bx| !in_pairs_b[bx]).collect();

    // grad_a[free_a; contracted_a] = sum over free_b of g * b
    let ga = {
        let pairs_g: Vec<(usize, usize)> = free_b
            .iter()
            .enumerate()
            .map(|(t, &bx)| (free_a.len() + t, bx))
            .collect();
        let raw = g.contract(b, &pairs_g)?;
        // raw axes: free_a (ascending), then a's contracted axes ordered by
        // their partner's b-axis
        let mut by_b: Vec<(usize, usize)> = pairs.to_vec();
        by_b.sort_by_key(|&(_, bx)| bx);
        let mut meaning: Vec<usize> = free_a.clone();
        meaning.extend(by_b.iter().map(|&(ax, _)| ax));
        let mut perm = vec![0usize; a.rank()];
        for (pos, &ax) in meaning.iter().enumerate() {
            perm[ax] = pos;
        }
        raw.permute(&perm)?
    };

    // grad_b[contracted_b; free_b] = sum over free_a of g * a
    let gb = {
        let pairs_g: Vec<(usize, usize)> = free_a
            .iter()
            .enumerate()
            .map(|(t, &ax)| (t, ax))
            .collect();
        let raw = g.contract(a, &pairs_g)?;
        // raw axes: free_b (ascending), then b's contracted axes ordered by
        // their partner's a-axis
        let mut by_a: Vec<(usize, usize)> = pairs.to_vec();
        by_a.sort_by_key(|&(ax, _)| ax);
        let mut meaning: Vec<usize> = free_b.clone();
        meaning.extend(by_a.iter().map(|&(_, bx)| bx));
        let mut perm = vec![0usize; b.rank()];
        for (pos, &bx) in meaning.iter().enumerate() {
            perm[bx] = pos;
        }
        raw.permute(&perm)?
    };

    Ok((ga, gb))
}

/// Gradients of a conv2d output with respect to input, kernel, and bias.
fn conv2d_adjoints(
    g: &Tensor,
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros(&[o]);
    let gd = g.data();
    let xd = x.data();
    let kd = k.data();
    let gxd = gx.data_mut();
    let gkd = gk.data_mut();
    for bi in 0..batch {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gd[((bi * o + oc) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    gb.data_mut()[oc] += gv;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * c + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                gxd[xi] += gv * kd[ki];
                                gkd[ki] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Which parameters a training pass optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Every parameter in the given layers.
    All,
    /// Only MPO cores and Tucker cores/factors (and their biases); dense and
    /// conv layers stay frozen.
    TensorizedOnly,
}

/// Output node plus the named trainable parameter leaves of one forward.
pub struct TapedForward {
    pub output: NodeId,
    pub params: Vec<(String, NodeId)>,
}

/// Records the forward pass of a layer chain on the tape. `base_idx` offsets
/// layer indices so parameter names line up with positions in the full
/// network. Every parameter becomes a leaf; only those selected by `scope`
/// are reported for optimization.
pub fn taped_forward(
    tape: &mut Tape,
    layers: &[Layer],
    base_idx: usize,
    x: NodeId,
    scope: TrainScope,
) -> Result<TapedForward> {
    let mut params = Vec::new();
    let mut cur = x;
    for (offset, layer) in layers.iter().enumerate() {
        let idx = base_idx + offset;
        let trainable = match scope {
            TrainScope::All => true,
            TrainScope::TensorizedOnly => layer.is_tensorized(),
        };
        let name = |part: &str| format!("L{idx:03}.{part}");
        match layer {
            Layer::Dense { w, b } => {
                let w_id = tape.leaf(w.clone());
                if trainable {
                    params.push((name("w"), w_id));
                }
                cur = tape.contract(cur, w_id, &[(1, 1)])?;
                if let Some(b) = b {
                    let b_id = tape.leaf(b.clone());
                    if trainable {
                        params.push((name("b"), b_id));
                    }
                    cur = tape.add_bias(cur, b_id)?;
                }
            }
            Layer::MpoDense(m) => {
                let batch = tape.value(cur).shape()[0];
                let mut shape = vec![batch];
                shape.extend(&m.in_dims);
                cur = tape.reshape(cur, &shape)?;
                for (n, core) in m.cores.iter().enumerate() {
                    let core_id = tape.leaf(core.clone());
                    if trainable {
                        params.push((name(&format!("core{n}")), core_id));
                    }
                    let pairs: Vec<(usize, usize)> = if n == 0 {
                        vec![(1, 1)]
                    } else {
                        vec![(1, 1), (tape.value(cur).rank() - 1, 0)]
                    };
                    cur = tape.contract(cur, core_id, &pairs)?;
                }
                cur = tape.reshape(cur, &[batch, m.out_features()])?;
                if let Some(b) = &m.bias {
                    let b_id = tape.leaf(b.clone());
                    if trainable {
                        params.push((name("b"), b_id));
                    }
                    cur = tape.add_bias(cur, b_id)?;
                }
            }
            Layer::Conv2d {
                k,
                b,
                stride,
                padding,
            } => {
                let k_id = tape.leaf(k.clone());
                if trainable {
                    params.push((name("k"), k_id));
                }
                let b_id = match b {
                    Some(b) => {
                        let id = tape.leaf(b.clone());
                        if trainable {
                            params.push((name("b"), id));
                        }
                        Some(id)
                    }
                    None => None,
                };
                cur = tape.conv2d(cur, k_id, b_id, *stride, *padding)?;
            }
            Layer::TuckerConv2d {
                tucker,
                stride,
                padding,
            } => {
                // differentiate through the kernel reconstruction
                let core_id = tape.leaf(tucker.core.clone());
                let fo_id = tape.leaf(tucker.factor_out.clone());
                let fi_id = tape.leaf(tucker.factor_in.clone());
                if trainable {
                    params.push((name("core"), core_id));
                    params.push((name("factor_out"), fo_id));
                    params.push((name("factor_in"), fi_id));
                }
                // [s1, r2, s3, s4] <- factor_out x core over r1
                let k1 = tape.contract(fo_id, core_id, &[(1, 0)])?;
                // [s1, s3, s4, s2] <- contract r2 with factor_in
                let k2 = tape.contract(k1, fi_id, &[(1, 1)])?;
                let kernel = tape.permute(k2, &[0, 3, 1, 2])?;
                let b_id = match &tucker.bias {
                    Some(b) => {
                        let id = tape.leaf(b.clone());
                        if trainable {
                            params.push((name("b"), id));
                        }
                        Some(id)
                    }
                    None => None,
                };
                cur = tape.conv2d(cur, kernel, b_id, *stride, *padding)?;
            }
            Layer::Relu => {
                cur = tape.relu(cur);
            }
            Layer::Flatten => {
                let batch = tape.value(cur).shape()[0];
                let rest: usize = tape.value(cur).shape()[1..].iter().product();
                cur = tape.reshape(cur, &[batch, rest])?;
            }
        }
    }
    Ok(TapedForward {
        output: cur,
        params,
    })
}

/// Collects gradients for the named parameters of a taped forward.
pub fn collect_grads(
    tape: &Tape,
    grads: &[Option<Tensor>],
    params: &[(String, NodeId)],
) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .map(|(name, id)| {
            let g = grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape()));
            (name.clone(), g)
        })
        .collect()
}

/// Central finite differences on the named parameters of a layer chain,
/// used only as a test oracle on small instances. `loss` evaluates the
/// objective at the perturbed layers.
pub fn finite_diff_grad<F>(
    layers: &[Layer],
    names: &[String],
    mut loss: F,
    h: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&[Layer]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (offset, layer) in layers.iter().enumerate() {
        layer.visit_params(offset, &mut |name, t| {
            shapes.insert(name, t.shape().to_vec());
        });
    }
    let mut work = layers.to_vec();
    let mut out = BTreeMap::new();
    for name in names {
        let shape = shapes
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        let len: usize = shape.iter().product();
        let mut grad = Tensor::zeros(shape);
        for coord in 0..len {
            nudge(&mut work, name, coord, h);
            let plus = loss(&work)?;
            nudge(&mut work, name, coord, -2.0 * h);
            let minus = loss(&work)?;
            nudge(&mut work, name, coord, h);
            grad.data_mut()[coord] = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

fn nudge(layers: &mut [Layer], name: &str, coord: usize, delta: f64) {
    for (offset, layer) in layers.iter_mut().enumerate() {
        layer.visit_params_mut(offset, &mut |n, t| {
            if n == name {
                t.data_mut()[coord] += delta;
            }
        });
    }
}
