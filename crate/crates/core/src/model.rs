//! Sequential network representation: dense, convolutional, activation, and
//! tensorized layers with forward evaluation, slicing, slice replacement,
//! and model serialization.
//!
//! Networks are immutable after construction. Slice replacement produces a
//! new network that shares nothing mutable with the original, so concurrent
//! reads are safe. Shape propagation runs at construction time and rejects
//! exactly the layer chains whose forward would fail on a matching input.
//!
//! Model file layout (single container file):
//! `magic "TSNW" | version u32 | manifest_len u64 | manifest TOML |
//! tensor blobs` - one `TSLC` blob per parameter tensor, in layer order with
//! the per-layer parameter order documented on [`Layer::visit_params`].

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decompose::{
    balanced_factor, bond_dim_for_cr, mpo_decompose, tucker_decompose, tucker_ranks_for_cr,
    CompressionPlan, LayerPlan, MpoLayer, TuckerConv,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"TSNW";
pub const MODEL_VERSION: u32 = 1;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `w: [out, in]`; forward computes `x w^T + b`.
    Dense { w: Tensor, b: Option<Tensor> },
    /// `k: [out_ch, in_ch, kh, kw]`, NCHW cross-correlation, zero padding.
    Conv2d {
        k: Tensor,
        b: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    MpoDense(MpoLayer),
    TuckerConv2d {
        tucker: TuckerConv,
        stride: usize,
        padding: usize,
    },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::MpoDense(_) => "mpo_dense",
            Layer::TuckerConv2d { .. } => "tucker_conv2d",
        }
    }

    pub fn is_tensorized(&self) -> bool {
        matches!(self, Layer::MpoDense(_) | Layer::TuckerConv2d { .. })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { w, b } => w.len() + b.as_ref().map_or(0, |b| b.len()),
            Layer::Conv2d { k, b, .. } => k.len() + b.as_ref().map_or(0, |b| b.len()),
            Layer::Relu | Layer::Flatten => 0,
            Layer::MpoDense(m) => m.param_count(),
            Layer::TuckerConv2d { tucker, .. } => tucker.param_count(),
        }
    }

    /// Output shape (without the batch axis) for a given input shape, or an
    /// error if the layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { w, .. } => {
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                if input != [inp] {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expects [{inp}], got {input:?}"
                    )));
                }
                Ok(vec![out])
            }
            Layer::MpoDense(m) => {
                let inp = m.in_features();
                if input != [inp] {
                    return Err(Error::ShapeMismatch(format!(
                        "mpo dense expects [{inp}], got {input:?}"
                    )));
                }
                Ok(vec![m.out_features()])
            }
            Layer::Conv2d {
                k, stride, padding, ..
            } => conv_output_shape(
                [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]],
                input,
                *stride,
                *padding,
            ),
            Layer::TuckerConv2d {
                tucker,
                stride,
                padding,
            } => conv_output_shape(tucker.kernel_shape(), input, *stride, *padding),
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => {
                if input.is_empty() {
                    return Err(Error::ShapeMismatch("flatten needs at least one axis".into()));
                }
                Ok(vec![input.iter().product()])
            }
        }
    }

    /// Forward on a batch: `x: [batch, ...input shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { w, b } => {
                if x.rank() != 2 || x.shape()[1] != w.shape()[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "dense forward: input {:?} vs weight {:?}",
                        x.shape(),
                        w.shape()
                    )));
                }
                let mut y = x.contract(w, &[(1, 1)])?;
                if let Some(b) = b {
                    add_row_bias(&mut y, b);
                }
                Ok(y)
            }
            Layer::MpoDense(m) => m.forward(x),
            Layer::Conv2d {
                k, b, stride, padding,
            } => conv2d_forward(k, b.as_ref(), x, *stride, *padding),
            Layer::TuckerConv2d {
                tucker,
                stride,
                padding,
            } => conv2d_forward(
                &tucker.to_kernel()?,
                tucker.bias.as_ref(),
                x,
                *stride,
                *padding,
            ),
            Layer::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(y)
            }
            Layer::Flatten => {
                if x.rank() < 2 {
                    return Err(Error::ShapeMismatch(
                        "flatten forward needs a batched input".into(),
                    ));
                }
                let batch = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.reshape(&[batch, rest])
            }
        }
    }

    /// Visits `(name, tensor)` for every parameter, in the documented order:
    /// dense `w, b`; conv `k, b`; mpo `core0.., b`; tucker
    /// `core, factor_out, factor_in, b`. Names embed the zero-padded layer
    /// index so lexicographic order equals structural order.
    pub fn visit_params(&self, idx: usize, f: &mut impl FnMut(String, &Tensor)) {
        let name = |part: &str| format!("L{idx:03}.{part}");
        match self {
            Layer::Dense { w, b } => {
                f(name("w"), w);
                if let Some(b) = b {
                    f(name("b"), b);
                }
            }
            Layer::Conv2d { k, b, .. } => {
                f(name("k"), k);
                if let Some(b) = b {
                    f(name("b"), b);
                }
            }
            Layer::Relu | Layer::Flatten => {}
            Layer::MpoDense(m) => {
                for (n, core) in m.cores.iter().enumerate() {
                    f(name(&format!("core{n}")), core);
                }
                if let Some(b) = &m.bias {
                    f(name("b"), b);
                }
            }
            Layer::TuckerConv2d { tucker, .. } => {
                f(name("core"), &tucker.core);
                f(name("factor_out"), &tucker.factor_out);
                f(name("factor_in"), &tucker.factor_in);
                if let Some(b) = &tucker.bias {
                    f(name("b"), b);
                }
            }
        }
    }

    /// Mutable variant of [`Layer::visit_params`], same order.
    pub fn visit_params_mut(&mut self, idx: usize, f: &mut impl FnMut(String, &mut Tensor)) {
        let name = |part: &str| format!("L{idx:03}.{part}");
        match self {
            Layer::Dense { w, b } => {
                f(name("w"), w);
                if let Some(b) = b {
                    f(name("b"), b);
                }
            }
            Layer::Conv2d { k, b, .. } => {
                f(name("k"), k);
                if let Some(b) = b {
                    f(name("b"), b);
                }
            }
            Layer::Relu | Layer::Flatten => {}
            Layer::MpoDense(m) => {
                for (n, core) in m.cores.iter_mut().enumerate() {
                    f(name(&format!("core{n}")), core);
                }
                if let Some(b) = &mut m.bias {
                    f(name("b"), b);
                }
            }
            Layer::TuckerConv2d { tucker, .. } => {
                f(name("core"), &mut tucker.core);
                f(name("factor_out"), &mut tucker.factor_out);
                f(name("factor_in"), &mut tucker.factor_in);
                if let Some(b) = &mut tucker.bias {
                    f(name("b"), b);
                }
            }
        }
    }
}

fn conv_output_shape(
    kernel: [usize; 4],
    input: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>> {
    let [o, c, kh, kw] = kernel;
    if input.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv expects [channels, h, w], got {input:?}"
        )));
    }
    if input[0] != c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {c} input channels, got {}",
            input[0]
        )));
    }
    if stride < 1 {
        return Err(Error::InvalidConfig("conv stride must be >= 1".into()));
    }
    let (h, w) = (input[1], input[2]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(vec![o, oh, ow])
}

pub(crate) fn add_row_bias(y: &mut Tensor, bias: &Tensor) {
    let width = bias.len();
    let rows = y.len() / width;
    for r in 0..rows {
        for (c, &b) in bias.data().iter().enumerate() {
            y.data_mut()[r * width + c] += b;
        }
    }
}

/// Direct 2D cross-correlation, NCHW layout, zero padding.
/// `k: [o, c, kh, kw]`, `x: [batch, c, h, w]`.
pub fn conv2d_forward(
    k: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if k.rank() != 4 || x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects rank-4 kernel and input, got {} and {}",
            k.rank(),
            x.rank()
        )));
    }
    let kshape = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let out_sh = conv_output_shape(kshape, &x.shape()[1..], stride, padding)?;
    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    let (oh, ow) = (out_sh[1], out_sh[2]);
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "conv bias length {} != {o} output channels",
                b.len()
            )));
        }
    }

    let xd = x.data();
    let kd = k.data();
    let mut out = Tensor::zeros(&[batch, o, oh, ow]);
    let od = out.data_mut();
    for bi in 0..batch {
        for oc in 0..o {
            let base_b = bias.map_or(0.0, |b| b.data()[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base_b;
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
                                let xv = xd[((bi * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = kd[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    od[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Contiguous range of layer indices, `start` inclusive, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub start: usize,
    pub end: usize,
}

impl Slice {
    pub fn new(start: usize, end: usize) -> Self {
        Slice { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..self.end).contains(&layer)
    }
}

/// Ordered layer chain with a fixed input shape. Layer input/output shapes
/// are validated at construction by symbolic propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// Output shape after each layer (without the batch axis).
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (idx, layer) in layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::ShapeMismatch(format!("layer {idx}: {e}")))?;
            shapes.push(cur.clone());
        }
        Ok(Network {
            layers,
            input_shape,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, |s| s)
    }

    /// Input shape (without batch) expected at `layer` index.
    pub fn shape_at(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(Slice::new(0, self.layers.len()), x)
    }

    /// Applies layers `slice.start..slice.end`; the empty range is the
    /// identity. Shape errors carry the failing layer index.
    pub fn forward_range(&self, slice: Slice, x: &Tensor) -> Result<Tensor> {
        if slice.end > self.layers.len() || slice.start > slice.end {
            return Err(Error::InvalidAxis(format!(
                "slice {}..{} out of range for {} layers",
                slice.start,
                slice.end,
                self.layers.len()
            )));
        }
        let mut cur = x.clone();
        for idx in slice.start..slice.end {
            cur = self.layers[idx]
                .forward(&cur)
                .map_err(|e| Error::ShapeMismatch(format!("layer {idx}: {e}")))?;
        }
        Ok(cur)
    }

    /// Splits the layer chain at the given cut indices (strictly increasing,
    /// each in `(0, len)`), producing disjoint slices that cover `0..len`.
    pub fn partition(&self, boundaries: &[usize]) -> Result<Vec<Slice>> {
        let l = self.layers.len();
        let mut prev = 0usize;
        for &b in boundaries {
            if b <= prev || b >= l {
                return Err(Error::InvalidConfig(format!(
                    "cut indices must be strictly increasing within (0, {l}), got {boundaries:?}"
                )));
            }
            prev = b;
        }
        let mut slices = Vec::with_capacity(boundaries.len() + 1);
        let mut start = 0;
        for &b in boundaries {
            slices.push(Slice::new(start, b));
            start = b;
        }
        slices.push(Slice::new(start, l));
        Ok(slices)
    }

    /// Uniform partition into slices of `m` layers each; requires `len % m == 0`.
    pub fn partition_uniform(&self, m: usize) -> Result<Vec<Slice>> {
        let l = self.layers.len();
        if m == 0 || l % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot split {l} layers into slices of {m}"
            )));
        }
        let cuts: Vec<usize> = (1..l / m).map(|k| k * m).collect();
        self.partition(&cuts)
    }

    /// Returns a new network where the plan's entries that fall inside
    /// `slice` are applied: dense layers become MPO layers, conv layers
    /// become Tucker layers. Everything else (including plan entries outside
    /// the slice) is left untouched.
    pub fn tensorize_slice(&self, slice: Slice, plan: &CompressionPlan) -> Result<Network> {
        let mut layers = self.layers.clone();
        for (&idx, entry) in &plan.entries {
            if !slice.contains(idx) {
                continue;
            }
            if idx >= layers.len() {
                return Err(Error::PlanMismatch(format!(
                    "plan references layer {idx}, network has {}",
                    layers.len()
                )));
            }
            layers[idx] = tensorize_layer(&self.layers[idx], idx, entry)?;
        }
        Network::new(layers, self.input_shape.clone())
    }

    /// Splices `replacement` over the slice range and revalidates shapes.
    pub fn replace_slice(&self, slice: Slice, replacement: Vec<Layer>) -> Result<Network> {
        if slice.end > self.layers.len() || slice.start > slice.end {
            return Err(Error::InvalidAxis(format!(
                "slice {}..{} out of range",
                slice.start, slice.end
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len() - slice.len() + replacement.len());
        layers.extend_from_slice(&self.layers[..slice.start]);
        layers.extend(replacement);
        layers.extend_from_slice(&self.layers[slice.end..]);
        Network::new(layers, self.input_shape.clone())
    }

    pub fn slice_layers(&self, slice: Slice) -> &[Layer] {
        &self.layers[slice.start..slice.end]
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.visit_params(idx, f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(idx, f);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = ModelManifest {
            format_version: MODEL_VERSION,
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(LayerManifest::of).collect(),
        };
        let text = toml::to_string(&manifest)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let mut res: Result<()> = Ok(());
        self.visit_params(&mut |_, t| {
            if res.is_ok() {
                res = t.write_to(w);
            }
        });
        res
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Network> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "bad model magic {:02x?}, expected {:02x?}",
                magic, MODEL_MAGIC
            )));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != MODEL_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l)?;
        let len = u64::from_le_bytes(l) as usize;
        if len > 16 << 20 {
            return Err(Error::Format("implausible manifest size".into()));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let manifest: ModelManifest = toml::from_str(
            std::str::from_utf8(&text).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        if manifest.format_version != MODEL_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: MODEL_VERSION,
            });
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for lm in &manifest.layers {
            layers.push(lm.read_layer(r)?);
        }
        Network::new(layers, manifest.input_shape)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Network> {
        let mut f = std::fs::File::open(path)?;
        Network::read_from(&mut f)
    }

    /// Content hash of the serialized model; identifies the pretrained
    /// model a feature cache was captured from.
    pub fn checksum(&self) -> Result<u64> {
        Ok(fnv1a64(&self.to_bytes()?))
    }
}

fn tensorize_layer(layer: &Layer, idx: usize, entry: &LayerPlan) -> Result<Layer> {
    match (layer, entry) {
        (_, LayerPlan::Skip) => Ok(layer.clone()),
        (
            Layer::Dense { w, b },
            LayerPlan::Mpo {
                in_dims,
                out_dims,
                bond,
            },
        ) => {
            // dense stores [out, in]; the MPO factors the [in, out] map
            let mpo = mpo_decompose(&w.transpose()?, in_dims, out_dims, &[*bond])
                .map_err(|e| Error::PlanMismatch(format!("layer {idx}: {e}")))?
                .with_bias(b.clone());
            Ok(Layer::MpoDense(mpo))
        }
        (
            Layer::Conv2d {
                k,
                b,
                stride,
                padding,
            },
            LayerPlan::Tucker { r1, r2 },
        ) => {
            let tucker = tucker_decompose(k, *r1, *r2)
                .map_err(|e| Error::PlanMismatch(format!("layer {idx}: {e}")))?
                .with_bias(b.clone());
            Ok(Layer::TuckerConv2d {
                tucker,
                stride: *stride,
                padding: *padding,
            })
        }
        (other, plan) => Err(Error::PlanMismatch(format!(
            "layer {idx} ({}) cannot apply {plan:?}",
            other.kind_name()
        ))),
    }
}

/// MPO plans use two balanced sites per the two-site factorization scheme.
fn mpo_plan_for_dense(w: &Tensor, rate: f64) -> Result<LayerPlan> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (i1, i2) = balanced_factor(inp);
    let (j1, j2) = balanced_factor(out);
    let bond = bond_dim_for_cr(i1, j1, i2, j2, rate)?;
    Ok(LayerPlan::Mpo {
        in_dims: vec![i1, i2],
        out_dims: vec![j1, j2],
        bond,
    })
}

/// Builds a plan applying the same per-layer compression rate to every
/// tensorizable layer not excluded.
pub fn plan_uniform_per_layer(
    net: &Network,
    rate: f64,
    exclude: &BTreeSet<usize>,
) -> Result<CompressionPlan> {
    if !(0.0 < rate && rate < 1.0) {
        return Err(Error::InvalidRate(format!("per-layer rate {rate}")));
    }
    let mut plan = CompressionPlan::new(rate);
    for (idx, layer) in net.layers().iter().enumerate() {
        if exclude.contains(&idx) {
            continue;
        }
        match layer {
            Layer::Dense { w, .. } => plan.set(idx, mpo_plan_for_dense(w, rate)?),
            Layer::Conv2d { k, .. } => {
                let shape = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
                let (r1, r2) = tucker_ranks_for_cr(&shape, rate)?;
                plan.set(idx, LayerPlan::Tucker { r1, r2 });
            }
            _ => {}
        }
    }
    Ok(plan)
}

/// Builds a plan hitting a target compression rate over the whole model by
/// deriving the uniform per-layer weight rate that the included layers must
/// satisfy. Because per-layer ranks are floored, the achieved CR lands at or
/// just above the target.
pub fn plan_for_global_cr(
    net: &Network,
    target: f64,
    exclude: &BTreeSet<usize>,
) -> Result<CompressionPlan> {
    if !(0.0 < target && target < 1.0) {
        return Err(Error::InvalidRate(format!("target cr {target}")));
    }
    let total = net.param_count();
    let mut weight_total = 0usize;
    for (idx, layer) in net.layers().iter().enumerate() {
        if exclude.contains(&idx) {
            continue;
        }
        match layer {
            Layer::Dense { w, .. } => weight_total += w.len(),
            Layer::Conv2d { k, .. } => weight_total += k.len(),
            _ => {}
        }
    }
    if weight_total == 0 {
        return Err(Error::Infeasible(
            "no tensorizable layers available for compression".into(),
        ));
    }
    let rate = target * total as f64 / weight_total as f64;
    if rate >= 1.0 {
        return Err(Error::Infeasible(format!(
            "target cr {target} needs per-layer rate {rate:.3} >= 1 over {weight_total} weights"
        )));
    }
    let mut plan = plan_uniform_per_layer(net, rate, exclude)?;
    plan.target_cr = target;
    Ok(plan)
}

/// Whole-model compression rate `(P_orig - P_comp) / P_orig`, counting all
/// parameters including untouched layers.
pub fn compression_rate(original: &Network, compressed: &Network) -> f64 {
    crate::decompose::compression_rate(original.param_count(), compressed.param_count())
}

/// Labeled data: `inputs [n, ...]`, one integer class per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.rank() < 1 || inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs vs {} labels",
                inputs.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Gathers the rows at `indices` into a new dataset (used for seeded
    /// subsets and minibatches).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: gather_rows(&self.inputs, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

/// Rows of `t` (first axis) at `indices`, preserving the remaining axes.
pub fn gather_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(shape, data).expect("gather shape")
}

/// Log-sum-exp stabilized cross entropy, mean over the batch.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Present when the model emits at least 5 classes.
    pub top5: Option<f64>,
}

/// Top-1 accuracy (ties resolve to the lowest class index) and mean
/// cross-entropy over the dataset.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let chunk = 128usize;
    let mut correct = 0usize;
    let mut correct5 = 0usize;
    let mut loss_sum = 0.0;
    let mut classes = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = dataset.select(&indices);
        let logits = net.forward(&batch.inputs)?;
        if logits.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "evaluation expects [batch, classes] outputs, got {:?}",
                logits.shape()
            )));
        }
        classes = logits.shape()[1];
        loss_sum += cross_entropy_value(&logits, &batch.labels)? * batch.len() as f64;
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut arg = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = c;
                }
            }
            if arg == label {
                correct += 1;
            }
            if classes >= 5 {
                let mut better = 0usize;
                for &v in row.iter() {
                    if v > row[label] {
                        better += 1;
                    }
                }
                if better < 5 {
                    correct5 += 1;
                }
            }
        }
        start = end;
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
        top5: (classes >= 5).then(|| correct5 as f64 / n as f64),
    })
}

/// FNV-1a 64-bit content hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    input_shape: Vec<usize>,
    #[serde(default)]
    layers: Vec<LayerManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerManifest {
    Dense {
        bias: bool,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    Flatten,
    MpoDense {
        in_dims: Vec<usize>,
        out_dims: Vec<usize>,
        bias: bool,
    },
    TuckerConv2d {
        stride: usize,
        padding: usize,
        bias: bool,
    },
}

impl LayerManifest {
    fn of(layer: &Layer) -> Self {
        match layer {
            Layer::Dense { b, .. } => LayerManifest::Dense { bias: b.is_some() },
            Layer::Conv2d {
                b, stride, padding, ..
            } => LayerManifest::Conv2d {
                stride: *stride,
                padding: *padding,
                bias: b.is_some(),
            },
            Layer::Relu => LayerManifest::Relu,
            Layer::Flatten => LayerManifest::Flatten,
            Layer::MpoDense(m) => LayerManifest::MpoDense {
                in_dims: m.in_dims.clone(),
                out_dims: m.out_dims.clone(),
                bias: m.bias.is_some(),
            },
            Layer::TuckerConv2d {
                tucker,
                stride,
                padding,
            } => LayerManifest::TuckerConv2d {
                stride: *stride,
                padding: *padding,
                bias: tucker.bias.is_some(),
            },
        }
    }

    fn read_layer<R: Read>(&self, r: &mut R) -> Result<Layer> {
        let tensor = |r: &mut R| Tensor::read_from(r);
        match self {
            LayerManifest::Dense { bias } => {
                let w = tensor(r)?;
                let b = if *bias { Some(tensor(r)?) } else { None };
                Ok(Layer::Dense { w, b })
            }
            LayerManifest::Conv2d {
                stride,
                padding,
                bias,
            } => {
                let k = tensor(r)?;
                let b = if *bias { Some(tensor(r)?) } else { None };
                Ok(Layer::Conv2d {
                    k,
                    b,
                    stride: *stride,
                    padding: *padding,
                })
            }
            LayerManifest::Relu => Ok(Layer::Relu),
            LayerManifest::Flatten => Ok(Layer::Flatten),
            LayerManifest::MpoDense {
                in_dims,
                out_dims,
                bias,
            } => {
                let mut cores = Vec::with_capacity(in_dims.len());
                for _ in 0..in_dims.len() {
                    cores.push(tensor(r)?);
                }
                let b = if *bias { Some(tensor(r)?) } else { None };
                let mpo = MpoLayer {
                    cores,
                    in_dims: in_dims.clone(),
                    out_dims: out_dims.clone(),
                    bias: b,
                };
                mpo.validate()?;
                Ok(Layer::MpoDense(mpo))
            }
            LayerManifest::TuckerConv2d {
                stride,
                padding,
                bias,
            } => {
                let core = tensor(r)?;
                let factor_out = tensor(r)?;
                let factor_in = tensor(r)?;
                let b = if *bias { Some(tensor(r)?) } else { None };
                Ok(Layer::TuckerConv2d {
                    tucker: TuckerConv {
                        core,
                        factor_out,
                        factor_in,
                        bias: b,
                    },
                    stride: *stride,
                    padding: *padding,
                })
            }
        }
    }
}
