//! MPO (tensor-train) and Tucker factorizations of layer weights, plus the
//! compression-rate arithmetic that selects bond dimensions and ranks.
//!
//! Conventions:
//! - An MPO core `n` is shaped `[bond_{n-1}, i_n, j_n, bond_n]` with boundary
//!   bonds of 1. A matrix `w: [prod(i), prod(j)]` maps onto the chain by
//!   interleaving one `(i_n, j_n)` pair per core, i.e. row index `i` and
//!   column index `j` are split into mixed-radix digits and regrouped as
//!   `(i_1 j_1)(i_2 j_2)...` before the TT-SVD sweep.
//! - Tucker compression of a conv kernel `[s1, s2, s3, s4]` factors only the
//!   channel modes: ranks `[r1, r2, s3, s4]`, spatial modes untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::truncated_svd;
use crate::tensor::Tensor;

/// Matrix product operator replacement for a dense weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoLayer {
    /// Core `n` shaped `[bond_{n-1}, i_n, j_n, bond_n]`.
    pub cores: Vec<Tensor>,
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    /// Kept dense; biases are never tensorized.
    pub bias: Option<Tensor>,
}

impl MpoLayer {
    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn in_features(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_features(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Achieved bond dimensions, one per internal bond.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1]
            .iter()
            .map(|c| c.shape()[3])
            .collect()
    }

    pub fn with_bias(mut self, bias: Option<Tensor>) -> Self {
        self.bias = bias;
        self
    }

    pub fn param_count(&self) -> usize {
        let cores: usize = self.cores.iter().map(|c| c.len()).sum();
        cores + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Validates the chain structure invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.cores.len();
        if n == 0 || self.in_dims.len() != n || self.out_dims.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mpo with {n} cores, {} in dims, {} out dims",
                self.in_dims.len(),
                self.out_dims.len()
            )));
        }
        for (k, core) in self.cores.iter().enumerate() {
            let sh = core.shape();
            if sh.len() != 4 || sh[1] != self.in_dims[k] || sh[2] != self.out_dims[k] {
                return Err(Error::ShapeMismatch(format!(
                    "core {k} shape {sh:?} does not match dims ({}, {})",
                    self.in_dims[k], self.out_dims[k]
                )));
            }
            if k == 0 && sh[0] != 1 {
                return Err(Error::ShapeMismatch("left boundary bond must be 1".into()));
            }
            if k == n - 1 && sh[3] != 1 {
                return Err(Error::ShapeMismatch("right boundary bond must be 1".into()));
            }
            if k + 1 < n && sh[3] != self.cores[k + 1].shape()[0] {
                return Err(Error::ShapeMismatch(format!(
                    "bond mismatch between cores {k} and {}",
                    k + 1
                )));
            }
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_features()] {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} != output width {}",
                    b.len(),
                    self.out_features()
                )));
            }
        }
        Ok(())
    }

    /// Contracts all bonds and regroups the interleaved indices back into a
    /// `[prod(in_dims), prod(out_dims)]` matrix. Inverse of the reshape
    /// convention used by [`mpo_decompose`].
    pub fn to_matrix(&self) -> Result<Tensor> {
        let n = self.cores.len();
        // accumulate left to right as a [prod(s_1..s_k), bond_k] matrix
        let first = &self.cores[0];
        let s0 = first.shape()[1] * first.shape()[2];
        let mut acc = first.reshape(&[s0, first.shape()[3]])?;
        for core in &self.cores[1..] {
            let sh = core.shape();
            let (bond_in, s, bond_out) = (sh[0], sh[1] * sh[2], sh[3]);
            let rhs = core.reshape(&[bond_in, s * bond_out])?;
            let rows = acc.shape()[0];
            acc = acc.matmul(&rhs)?.reshape(&[rows * s, bond_out])?;
        }
        // acc: [prod_n (i_n * j_n), 1] in interleaved order
        let mut interleaved = Vec::with_capacity(2 * n);
        for k in 0..n {
            interleaved.push(self.in_dims[k]);
            interleaved.push(self.out_dims[k]);
        }
        let t = acc.reshape(&interleaved)?;
        // [i_1, j_1, ..., i_N, j_N] -> [i_1..i_N, j_1..j_N]
        let mut perm = Vec::with_capacity(2 * n);
        perm.extend((0..n).map(|k| 2 * k));
        perm.extend((0..n).map(|k| 2 * k + 1));
        t.permute(&perm)?
            .reshape(&[self.in_features(), self.out_features()])
    }

    /// Applies the operator to a batch without materializing the matrix:
    /// `x: [batch, prod(in_dims)] -> [batch, prod(out_dims)]`, sequential
    /// core contractions plus bias.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "mpo forward input {:?}, expected [batch, {}]",
                x.shape(),
                self.in_features()
            )));
        }
        let batch = x.shape()[0];
        let mut shape = vec![batch];
        shape.extend(&self.in_dims);
        let mut acc = x.reshape(&shape)?;
        for (n, core) in self.cores.iter().enumerate() {
            // acc axes: [batch, i_{n+1}.., 1, j_1..j_n, bond_n]; the next
            // input index is always axis 1 and the bond is the last axis.
            let pairs: Vec<(usize, usize)> = if n == 0 {
                vec![(1, 1)]
            } else {
                vec![(1, 1), (acc.rank() - 1, 0)]
            };
            acc = acc.contract(core, &pairs)?;
        }
        let mut out = acc.reshape(&[batch, self.out_features()])?;
        if let Some(b) = &self.bias {
            let width = b.len();
            for row in 0..batch {
                for (col, &bv) in b.data().iter().enumerate() {
                    out.data_mut()[row * width + col] += bv;
                }
            }
        }
        Ok(out)
    }
}

/// TT-SVD sweep over a weight matrix. `w: [prod(in_dims), prod(out_dims)]`,
/// one requested bond per internal link; each bond is clamped to the maximum
/// rank of its split. At full bonds the reconstruction is exact.
pub fn mpo_decompose(
    w: &Tensor,
    in_dims: &[usize],
    out_dims: &[usize],
    bonds: &[usize],
) -> Result<MpoLayer> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "mpo_decompose expects a matrix, got rank {}",
            w.rank()
        )));
    }
    let n = in_dims.len();
    if n == 0 || out_dims.len() != n {
        return Err(Error::DimFactorization(format!(
            "need matching nonempty factor lists, got {n} and {}",
            out_dims.len()
        )));
    }
    if bonds.len() != n - 1 {
        return Err(Error::DimFactorization(format!(
            "expected {} bond dims, got {}",
            n - 1,
            bonds.len()
        )));
    }
    if bonds.contains(&0) {
        return Err(Error::DimFactorization("bond dims must be >= 1".into()));
    }
    let in_total: usize = in_dims.iter().product();
    let out_total: usize = out_dims.iter().product();
    if in_total != w.shape()[0] || out_total != w.shape()[1] {
        return Err(Error::DimFactorization(format!(
            "dims {:?} x {:?} do not factor a {:?} matrix",
            in_dims,
            out_dims,
            w.shape()
        )));
    }

    // Interleave: [i_1..i_N, j_1..j_N] -> [(i_1 j_1), (i_2 j_2), ...]
    let mut split_shape: Vec<usize> = in_dims.to_vec();
    split_shape.extend(out_dims);
    let mut perm = Vec::with_capacity(2 * n);
    for k in 0..n {
        perm.push(k);
        perm.push(n + k);
    }
    let grouped: Vec<usize> = (0..n).map(|k| in_dims[k] * out_dims[k]).collect();
    let interleaved = w.reshape(&split_shape)?.permute(&perm)?;

    let total: usize = grouped.iter().product();
    let mut rest = total;
    let mut cores = Vec::with_capacity(n);
    let mut bond_prev = 1usize;
    let mut acc = interleaved.reshape(&[total])?;
    for k in 0..n - 1 {
        rest /= grouped[k];
        let rows = bond_prev * grouped[k];
        let m = acc.reshape(&[rows, rest])?;
        let bond = bonds[k].min(rows.min(rest));
        let svd = truncated_svd(&m, bond)?;
        cores.push(
            svd.u
                .reshape(&[bond_prev, in_dims[k], out_dims[k], bond])?,
        );
        // absorb sigma * vt rightward
        let mut carry = svd.vt.clone();
        for r in 0..bond {
            for c in 0..rest {
                carry.data_mut()[r * rest + c] *= svd.s[r];
            }
        }
        acc = carry.reshape(&[bond * rest])?;
        bond_prev = bond;
    }
    cores.push(acc.reshape(&[bond_prev, in_dims[n - 1], out_dims[n - 1], 1])?);

    let layer = MpoLayer {
        cores,
        in_dims: in_dims.to_vec(),
        out_dims: out_dims.to_vec(),
        bias: None,
    };
    layer.validate()?;
    Ok(layer)
}

/// Closed-form bond dimension for a 2-site MPO hitting a target compression
/// rate: `floor((1 - cr) * (i1 j1)(i2 j2) / (i1 j1 + i2 j2))`, clamped to
/// `[1, min(i1 j1, i2 j2)]`. The floor makes the achieved rate err on the
/// side of more compression.
pub fn bond_dim_for_cr(i1: usize, j1: usize, i2: usize, j2: usize, cr: f64) -> Result<usize> {
    if !(0.0 < cr && cr < 1.0) {
        return Err(Error::InvalidRate(format!("cr = {cr} not in (0, 1)")));
    }
    if i1 == 0 || j1 == 0 || i2 == 0 || j2 == 0 {
        return Err(Error::DimFactorization("extents must be >= 1".into()));
    }
    let s1 = (i1 * j1) as f64;
    let s2 = (i2 * j2) as f64;
    let raw = ((1.0 - cr) * s1 * s2 / (s1 + s2)).floor() as usize;
    Ok(raw.clamp(1, (i1 * j1).min(i2 * j2)))
}

/// Factor pair `(a, b)` with `a * b = n`, `a <= b` and `b - a` minimal.
pub fn balanced_factor(n: usize) -> (usize, usize) {
    assert!(n >= 1, "balanced_factor needs n >= 1");
    let mut a = (n as f64).sqrt() as usize;
    a = a.min(n).max(1);
    while a >= 1 {
        if n % a == 0 {
            return (a, n / a);
        }
        a -= 1;
    }
    (1, n)
}

/// Tucker replacement for a conv kernel, channel modes only.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerConv {
    /// `[r1, r2, s3, s4]`
    pub core: Tensor,
    /// `[s1, r1]`, orthonormal columns when freshly decomposed.
    pub factor_out: Tensor,
    /// `[s2, r2]`, orthonormal columns when freshly decomposed.
    pub factor_in: Tensor,
    pub bias: Option<Tensor>,
}

impl TuckerConv {
    pub fn ranks(&self) -> (usize, usize) {
        (self.core.shape()[0], self.core.shape()[1])
    }

    /// Kernel shape `[s1, s2, s3, s4]` this layer reconstructs to.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.factor_out.shape()[0],
            self.factor_in.shape()[0],
            self.core.shape()[2],
            self.core.shape()[3],
        ]
    }

    pub fn with_bias(mut self, bias: Option<Tensor>) -> Self {
        self.bias = bias;
        self
    }

    pub fn param_count(&self) -> usize {
        self.core.len()
            + self.factor_out.len()
            + self.factor_in.len()
            + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Contracts the core with both channel factors:
    /// `K[s1,s2,s3,s4] = sum core[r1,r2,..] * factor_out[s1,r1] * factor_in[s2,r2]`.
    pub fn to_kernel(&self) -> Result<Tensor> {
        let k = mode_product(&self.core, &self.factor_out, 0)?;
        mode_product(&k, &self.factor_in, 1)
    }
}

/// Mode-`mode` product with a matrix: unfold, multiply, fold back. The
/// matrix must have its second extent equal to the mode's extent
/// (`[new_d, d_mode]`); factors stored as `[d_mode, r]` are applied as-is
/// by matching the first extent instead.
pub fn mode_product(t: &Tensor, m: &Tensor, mode: usize) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::ShapeMismatch("mode product needs a matrix".into()));
    }
    let unfolded = t.unfold(mode)?;
    let prod = if m.shape()[1] == unfolded.shape()[0] {
        m.matmul(&unfolded)?
    } else if m.shape()[0] == unfolded.shape()[0] {
        m.transpose()?.matmul(&unfolded)?
    } else {
        return Err(Error::ShapeMismatch(format!(
            "mode product: matrix {:?} does not act on mode {mode} of {:?}",
            m.shape(),
            t.shape()
        )));
    };
    let mut shape = t.shape().to_vec();
    shape[mode] = prod.shape()[0];
    Tensor::fold(&prod, &shape, mode)
}

/// HOSVD with per-mode optional ranks; `None` leaves a mode untouched
/// (identity factor). Returns the projected core and the factors that were
/// computed, each `[d_mode, r_mode]` with orthonormal columns.
pub fn hosvd(t: &Tensor, mode_ranks: &[Option<usize>]) -> Result<(Tensor, Vec<Option<Tensor>>)> {
    if mode_ranks.len() != t.rank() {
        return Err(Error::ShapeMismatch(format!(
            "{} mode ranks for a rank-{} tensor",
            mode_ranks.len(),
            t.rank()
        )));
    }
    let mut factors: Vec<Option<Tensor>> = Vec::with_capacity(t.rank());
    for (mode, rank) in mode_ranks.iter().enumerate() {
        match rank {
            None => factors.push(None),
            Some(r) => {
                let d = t.shape()[mode];
                if *r == 0 || *r > d {
                    return Err(Error::RankOutOfRange(format!(
                        "rank {r} for mode {mode} with extent {d}"
                    )));
                }
                // the unfolding has at most min(d, len/d) nonzero singular
                // values; ranks beyond that add nothing and are clamped
                let unfolded = t.unfold(mode)?;
                let effective = (*r).min(unfolded.shape()[1]);
                let svd = truncated_svd(&unfolded, effective)?;
                factors.push(Some(svd.u));
            }
        }
    }
    let mut core = t.clone();
    for (mode, factor) in factors.iter().enumerate() {
        if let Some(f) = factor {
            // project onto the subspace: core = f^T x_mode core
            core = mode_product(&core, &f.transpose()?, mode)?;
        }
    }
    Ok((core, factors))
}

/// HOSVD of a conv kernel on the channel modes only, per the
/// `[r1, r2, s3, s4]` rank pattern.
pub fn tucker_decompose(kernel: &Tensor, r1: usize, r2: usize) -> Result<TuckerConv> {
    if kernel.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "tucker_decompose expects a rank-4 kernel, got rank {}",
            kernel.rank()
        )));
    }
    let (core, mut factors) = hosvd(kernel, &[Some(r1), Some(r2), None, None])?;
    let factor_out = factors[0].take().unwrap();
    let factor_in = factors[1].take().unwrap();
    Ok(TuckerConv {
        core,
        factor_out,
        factor_in,
        bias: None,
    })
}

/// Smallest-deviation channel ranks `(r1, r2)` whose Tucker parameter count
/// stays within `(1 - cr) * s1*s2*s3*s4`. Among feasible pairs the achieved
/// parameter count is maximized (closest to the target from the compressed
/// side), with ties broken toward proportional ranks `r1/s1 ~ r2/s2`, then
/// toward smaller `r1`. `cr <= 0` asks for no compression and returns full
/// ranks.
pub fn tucker_ranks_for_cr(shape: &[usize; 4], cr: f64) -> Result<(usize, usize)> {
    let [s1, s2, s3, s4] = *shape;
    if s1 == 0 || s2 == 0 || s3 == 0 || s4 == 0 {
        return Err(Error::DimFactorization("extents must be >= 1".into()));
    }
    if cr <= 0.0 {
        return Ok((s1, s2));
    }
    if cr >= 1.0 {
        return Err(Error::InvalidRate(format!("cr = {cr} not in [0, 1)")));
    }
    let dense = (s1 * s2 * s3 * s4) as f64;
    let budget = (1.0 - cr) * dense;

    let params = |r1: usize, r2: usize| (r1 * r2 * s3 * s4 + s1 * r1 + s2 * r2) as f64;
    let mut best: Option<(usize, usize, f64, f64)> = None; // r1, r2, params, deviation
    for r1 in 1..=s1 {
        // params is affine increasing in r2: r2 * (r1*s3*s4 + s2) + s1*r1
        let slope = (r1 * s3 * s4 + s2) as f64;
        let head = (s1 * r1) as f64;
        if head + slope > budget {
            continue; // even r2 = 1 is over budget
        }
        let r2 = (((budget - head) / slope).floor() as usize).clamp(1, s2);
        let p = params(r1, r2);
        debug_assert!(p <= budget);
        let dev = (r1 as f64 / s1 as f64 - r2 as f64 / s2 as f64).abs();
        let better = match best {
            None => true,
            Some((br1, _, bp, bdev)) => {
                p > bp || (p == bp && (dev < bdev || (dev == bdev && r1 < br1)))
            }
        };
        if better {
            best = Some((r1, r2, p, dev));
        }
    }
    match best {
        Some((r1, r2, _, _)) => Ok((r1, r2)),
        None => Err(Error::Infeasible(format!(
            "no Tucker ranks fit cr = {cr} for kernel {shape:?}"
        ))),
    }
}

/// `(p_orig - p_comp) / p_orig`.
pub fn compression_rate(p_orig: usize, p_comp: usize) -> f64 {
    if p_orig == 0 {
        return 0.0;
    }
    (p_orig as f64 - p_comp as f64) / p_orig as f64
}

/// Per-layer compression choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LayerPlan {
    Skip,
    Mpo {
        in_dims: Vec<usize>,
        out_dims: Vec<usize>,
        bond: usize,
    },
    Tucker {
        r1: usize,
        r2: usize,
    },
}

/// Which layers to tensorize and how. Serialized as a human-readable
/// key/value document consumed by the CLI.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressionPlan {
    pub target_cr: f64,
    pub entries: BTreeMap<usize, LayerPlan>,
}

#[derive(Serialize, Deserialize)]
struct PlanEntryDoc {
    layer: usize,
    #[serde(flatten)]
    method: LayerPlan,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    target_cr: f64,
    #[serde(default)]
    entry: Vec<PlanEntryDoc>,
}

impl CompressionPlan {
    pub fn new(target_cr: f64) -> Self {
        CompressionPlan {
            target_cr,
            entries: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, layer: usize, plan: LayerPlan) {
        self.entries.insert(layer, plan);
    }

    pub fn get(&self, layer: usize) -> Option<&LayerPlan> {
        self.entries.get(&layer)
    }

    pub fn to_toml(&self) -> Result<String> {
        let doc = PlanDoc {
            target_cr: self.target_cr,
            entry: self
                .entries
                .iter()
                .map(|(&layer, method)| PlanEntryDoc {
                    layer,
                    method: method.clone(),
                })
                .collect(),
        };
        Ok(toml::to_string_pretty(&doc)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: PlanDoc = toml::from_str(text)?;
        let mut plan = CompressionPlan::new(doc.target_cr);
        for e in doc.entry {
            plan.entries.insert(e.layer, e.method);
        }
        Ok(plan)
    }
}
