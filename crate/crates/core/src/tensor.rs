//! Dense multi-dimensional `f64` tensors.
//!
//! Data is stored flat in row-major order; the shape is a list of extents
//! with rank 0 permitted (scalar). All operations are pure: they take
//! references and return fresh tensors, so values can be shared freely
//! across threads.
//!
//! On-disk format (used by every module that persists tensors):
//! little-endian `magic "TSLC" | version u32 | rank u32 | extents u64[rank]`
//! followed by the raw `f64` payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TSLC";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {expect} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// n x n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fills a tensor by calling `f` for every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (ax, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            off = off * self.shape[ax] + i;
        }
        off
    }

    /// Same flat data, new shape. Row-major semantics on both sides.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let expect: usize = new_shape.iter().product();
        if new_shape.contains(&0) || expect != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                new_shape
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Axis permutation: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::InvalidPermutation(format!(
                "permutation {axes:?} has wrong length for rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::InvalidPermutation(format!(
                    "{axes:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        // stride in the input for each output axis
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Tensor::zeros(&out_shape);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for dst in 0..out.data.len() {
            out.data[dst] = self.data[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                src -= perm_strides[ax] * out_shape[ax];
            }
        }
        Ok(out)
    }

    /// Matrix transpose (rank-2 only).
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidAxis(format!(
                "transpose requires a matrix, got rank {}",
                self.rank()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Generalized tensordot: sums over `pairs` of axes (axis in self, axis
    /// in other). Remaining axes of self come first, in their original
    /// order, followed by the remaining axes of other.
    pub fn contract(&self, other: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let mut used_a = vec![false; self.rank()];
        let mut used_b = vec![false; other.rank()];
        for &(ax_a, ax_b) in pairs {
            if ax_a >= self.rank() || ax_b >= other.rank() {
                return Err(Error::InvalidAxis(format!(
                    "contraction pair ({ax_a}, {ax_b}) out of range for ranks {} and {}",
                    self.rank(),
                    other.rank()
                )));
            }
            if used_a[ax_a] || used_b[ax_b] {
                return Err(Error::InvalidAxis(format!(
                    "axis repeated in contraction pairs {pairs:?}"
                )));
            }
            used_a[ax_a] = true;
            used_b[ax_b] = true;
            if self.shape[ax_a] != other.shape[ax_b] {
                return Err(Error::ShapeMismatch(format!(
                    "contracted extents differ: {} (axis {ax_a}) vs {} (axis {ax_b})",
                    self.shape[ax_a], other.shape[ax_b]
                )));
            }
        }
        let free_a: Vec<usize> = (0..self.rank()).filter(|&a| !used_a[a]).collect();
        let free_b: Vec<usize> = (0..other.rank()).filter(|&b| !used_b[b]).collect();

        // Move contracted axes of self to the back, of other to the front
        // (both in `pairs` order), then multiply as matrices.
        let mut perm_a: Vec<usize> = free_a.clone();
        perm_a.extend(pairs.iter().map(|&(a, _)| a));
        let mut perm_b: Vec<usize> = pairs.iter().map(|&(_, b)| b).collect();
        perm_b.extend(free_b.iter().copied());

        let a = self.permute(&perm_a)?;
        let b = other.permute(&perm_b)?;

        let m: usize = free_a.iter().map(|&ax| self.shape[ax]).product();
        let k: usize = pairs.iter().map(|&(ax, _)| self.shape[ax]).product();
        let n: usize = free_b.iter().map(|&ax| other.shape[ax]).product();

        let mut out_shape: Vec<usize> = free_a.iter().map(|&ax| self.shape[ax]).collect();
        out_shape.extend(free_b.iter().map(|&ax| other.shape[ax]));

        let mut out = vec![0.0; m * n];
        matmul_into(&a.data, &b.data, m, k, n, &mut out);
        Tensor::new(out_shape, out)
    }

    /// Mode-n unfolding: a `[d_mode, prod(other extents)]` matrix. Columns
    /// run row-major over the remaining axes in ascending original order.
    pub fn unfold(&self, mode: usize) -> Result<Tensor> {
        if mode >= self.rank() {
            return Err(Error::InvalidAxis(format!(
                "unfold mode {mode} out of range for rank {}",
                self.rank()
            )));
        }
        let mut perm = vec![mode];
        perm.extend((0..self.rank()).filter(|&a| a != mode));
        let rows = self.shape[mode];
        let cols = self.data.len() / rows;
        self.permute(&perm)?.reshape(&[rows, cols])
    }

    /// Inverse of [`Tensor::unfold`]: rebuilds a tensor of `shape` from its
    /// mode-`mode` unfolding.
    pub fn fold(matrix: &Tensor, shape: &[usize], mode: usize) -> Result<Tensor> {
        if matrix.rank() != 2 {
            return Err(Error::ShapeMismatch(
                "fold expects a matrix input".to_string(),
            ));
        }
        if mode >= shape.len() {
            return Err(Error::InvalidAxis(format!(
                "fold mode {mode} out of range for rank {}",
                shape.len()
            )));
        }
        let mut permuted_shape = vec![shape[mode]];
        permuted_shape.extend(
            (0..shape.len())
                .filter(|&a| a != mode)
                .map(|a| shape[a]),
        );
        // inverse of the unfold permutation
        let mut perm = vec![mode];
        perm.extend((0..shape.len()).filter(|&a| a != mode));
        let mut inv = vec![0usize; shape.len()];
        for (k, &a) in perm.iter().enumerate() {
            inv[a] = k;
        }
        matrix.reshape(&permuted_shape)?.permute(&inv)
    }

    /// Standard matrix product (rank-2 x rank-2).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul requires matrices, got ranks {} and {}",
                self.rank(),
                other.rank()
            )));
        }
        if self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Writes the tensor in the `TSLC` binary format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a tensor in the `TSLC` binary format.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:02x?}, expected {:02x?}",
                magic, TENSOR_MAGIC
            )));
        }
        let version = read_u32(r)?;
        if version != TENSOR_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let rank = read_u32(r)? as usize;
        if rank > 64 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: u128 = 1;
        for _ in 0..rank {
            let d = read_u64(r)? as usize;
            if d == 0 {
                return Err(Error::Format("zero extent in stored tensor".to_string()));
            }
            total *= d as u128;
            if total > (1u128 << 32) {
                return Err(Error::Format("stored tensor too large".to_string()));
            }
            shape.push(d);
        }
        let n = total as usize;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape, data)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

/// `out += a (m x k) * b (k x n)`, ikj loop order.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Frobenius distance of `a` and `b` relative to the norm of `b`.
/// Falls back to the absolute distance when `b` is (numerically) zero.
pub fn frob_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
    }
    let denom = b.frob_norm();
    if denom > 0.0 {
        diff.sqrt() / denom
    } else {
        diff.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn reshape_row_major() {
        let v = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let m = v.reshape(&[2, 2]).unwrap();
        assert_eq!(m.get(&[0, 0]), 1.0);
        assert_eq!(m.get(&[0, 1]), 2.0);
        assert_eq!(m.get(&[1, 0]), 3.0);
        assert_eq!(m.get(&[1, 1]), 4.0);
        // inverse
        let back = m.reshape(&[6 - 2]).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn reshape_product_mismatch_is_error() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            m.reshape(&[3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn permute_transpose() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mt = m.permute(&[1, 0]).unwrap();
        assert_eq!(mt.data(), &[1.0, 3.0, 2.0, 4.0]);
        // identity permutation is bitwise equal
        let same = m.permute(&[0, 1]).unwrap();
        assert_eq!(same, m);
    }

    #[test]
    fn permute_rank3_matches_index_formula() {
        // triple-loop oracle for axes (2, 0, 1)
        let shape = [2usize, 3, 4];
        let x = Tensor::from_fn(&shape, |idx| (idx[0] * 100 + idx[1] * 10 + idx[2]) as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.get(&[k, i, j]), x.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(m.permute(&[0, 0]).is_err());
        assert!(m.permute(&[0]).is_err());
        assert!(m.permute(&[0, 2]).is_err());
    }

    #[test]
    fn contract_matches_matmul() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = a.contract(&b, &[(1, 0)]).unwrap();
        assert_eq!(c, a.matmul(&b).unwrap());
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn contract_three_tensor_chain_matches_loops() {
        // F[i1,i2,i3] = sum_{j1,j2} A[j1,i2] B[j1,i1,j2] C[i3,j2], extents 2.
        let chi = 2;
        let mut rng = crate::rng::Rng::new(42);
        let a = Tensor::from_fn(&[chi, 2], |_| rng.normal());
        let b = Tensor::from_fn(&[chi, 2, chi], |_| rng.normal());
        let c = Tensor::from_fn(&[2, chi], |_| rng.normal());

        // nested-loop oracle over all indices
        let mut expect = Tensor::zeros(&[2, 2, 2]);
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    let mut sum = 0.0;
                    for j1 in 0..chi {
                        for j2 in 0..chi {
                            sum += a.get(&[j1, i2]) * b.get(&[j1, i1, j2]) * c.get(&[i3, j2]);
                        }
                    }
                    expect.set(&[i1, i2, i3], sum);
                }
            }
        }

        // contract A with B over j1 -> [i2, i1, j2], then with C over j2
        let ab = a.contract(&b, &[(0, 0)]).unwrap(); // [i2, i1, j2]
        let abc = ab.contract(&c, &[(2, 1)]).unwrap(); // [i2, i1, i3]
        let f = abc.permute(&[1, 0, 2]).unwrap(); // [i1, i2, i3]
        assert!(frob_rel_err(&f, &expect) < 1e-14);
    }

    #[test]
    fn contract_with_zeros_is_zero() {
        let a = Tensor::zeros(&[3, 4]);
        let b = t(&[4, 2], &(0..8).map(|x| x as f64).collect::<Vec<_>>());
        let c = a.contract(&b, &[(1, 0)]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn contract_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(a.contract(&b, &[(1, 0)]).is_err()); // extent mismatch
        assert!(a.contract(&b, &[(0, 1), (0, 0)]).is_err()); // repeated axis
    }

    #[test]
    fn unfold_rank2() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.unfold(0).unwrap(), m);
        assert_eq!(m.unfold(1).unwrap(), m.transpose().unwrap());
    }

    #[test]
    fn unfold_mode1_matches_index_formula() {
        let shape = [2usize, 3, 4];
        let x = Tensor::from_fn(&shape, |idx| (idx[0] * 12 + idx[1] * 4 + idx[2]) as f64);
        let u = x.unfold(1).unwrap();
        assert_eq!(u.shape(), &[3, 8]);
        // columns run row-major over (axis0, axis2)
        for j in 0..3 {
            for a0 in 0..2 {
                for a2 in 0..4 {
                    assert_eq!(u.get(&[j, a0 * 4 + a2]), x.get(&[a0, j, a2]));
                }
            }
        }
    }

    #[test]
    fn unfold_fold_round_trip_bit_exact() {
        let mut rng = crate::rng::Rng::new(9);
        let x = Tensor::from_fn(&[3, 4, 2, 5], |_| rng.normal());
        for mode in 0..4 {
            let u = x.unfold(mode).unwrap();
            let back = Tensor::fold(&u, x.shape(), mode).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn unfold_invalid_mode() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(x.unfold(2).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = t(&[2, 2], &[3.0, -1.0, 2.0, 0.5]);
        let i = Tensor::identity(2);
        assert_eq!(i.matmul(&x).unwrap(), x);
        // hand loop: [[1,2],[3,4]] * [[5,6],[7,8]]
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mut expect = Tensor::zeros(&[2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                expect.set(&[i, j], s);
            }
        }
        assert_eq!(a.matmul(&b).unwrap(), expect);
        // mismatch
        assert!(a.matmul(&Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = crate::rng::Rng::new(77);
        let x = Tensor::from_fn(&[3, 1, 4], |_| rng.normal());
        let mut buf = Vec::new();
        x.write_to(&mut buf).unwrap();
        let y = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(x, y);
        // corrupt magic
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        // bad version
        let mut badv = buf.clone();
        badv[4] = 99;
        assert!(matches!(
            Tensor::read_from(&mut badv.as_slice()),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn scalar_tensor_round_trips() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(Tensor::read_from(&mut buf.as_slice()).unwrap(), s);
    }
}
