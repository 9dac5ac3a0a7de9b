//! Dense deformation-field math: identity grids, differentiable warping,
//! displacement regularizers, label warping, Jacobian diagnostics.
//!
//! Conventions: displacements are in voxel units, fields store the
//! displacement `u` of the map `v = Id + u`, and sampling uses multilinear
//! interpolation with border-clamped coordinates.

use thiserror::Error;

use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims must each be >= {required}, got {got:?}")]
    SpatialTooSmall { required: usize, got: Vec<usize> },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

/// An intensity grid of shape `C x S` (channels first, 2D or 3D spatial).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    data: Tensor<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Tensor<T>) -> Result<Self, FieldError> {
        if data.shape().len() < 3 {
            return Err(FieldError::InvalidShape(format!(
                "volume needs channel dim plus >= 2 spatial dims, got {:?}",
                data.shape()
            )));
        }
        let (c, spatial) = (data.shape()[0], &data.shape()[1..]);
        if c < 1 {
            return Err(FieldError::InvalidShape("channel count must be >= 1".into()));
        }
        if spatial.iter().any(|&s| s < 4) {
            return Err(FieldError::SpatialTooSmall { required: 4, got: spatial.to_vec() });
        }
        if !data.all_finite() {
            return Err(FieldError::NonFinite("volume"));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_tensor_unchecked(data: Tensor<T>) -> Self {
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Per-voxel displacement `u` of shape `D x S`, `D` = spatial rank.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    data: Tensor<T>,
}

impl<T: Scalar> DeformationField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self, FieldError> {
        let rank = data.shape().len();
        if rank < 3 {
            return Err(FieldError::InvalidShape(format!(
                "field needs component dim plus >= 2 spatial dims, got {:?}",
                data.shape()
            )));
        }
        let (d, spatial) = (data.shape()[0], &data.shape()[1..]);
        if d != spatial.len() {
            return Err(FieldError::InvalidShape(format!(
                "component count {} must equal spatial rank {}",
                d,
                spatial.len()
            )));
        }
        if !data.all_finite() {
            return Err(FieldError::NonFinite("deformation field"));
        }
        Ok(Self { data })
    }

    pub fn zeros(spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self { data: Tensor::zeros(&shape) }
    }

    pub fn rank(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Integer label grid with a region-name table; region 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    labels: Vec<u8>,
    spatial: Vec<usize>,
    region_names: Vec<String>,
}

impl LabelMap {
    pub fn new(labels: Vec<u8>, spatial: &[usize], region_names: Vec<String>) -> Result<Self, FieldError> {
        if spatial.iter().product::<usize>() != labels.len() {
            return Err(FieldError::InvalidShape(format!(
                "label count {} does not match spatial shape {:?}",
                labels.len(),
                spatial
            )));
        }
        let regions = region_names.len();
        if regions == 0 || regions > u8::MAX as usize {
            return Err(FieldError::InvalidShape(format!("bad region count {regions}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= regions) {
            return Err(FieldError::InvalidShape(format!(
                "label {bad} outside 0..{regions}"
            )));
        }
        Ok(Self { labels, spatial: spatial.to_vec(), region_names })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn region_count(&self) -> usize {
        self.region_names.len()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Voxel-coordinate grid of shape `D x S`: `grid[d][idx] = idx[d]`.
pub fn identity_grid<T: Scalar>(spatial: &[usize]) -> Result<Tensor<T>, FieldError> {
    if spatial.is_empty() || spatial.iter().any(|&s| s == 0) {
        return Err(FieldError::InvalidShape(format!("zero-sized spatial shape {spatial:?}")));
    }
    let d = spatial.len();
    let voxels: usize = spatial.iter().product();
    let strides = row_major_strides(spatial);
    let mut shape = vec![d];
    shape.extend_from_slice(spatial);
    let mut data = vec![T::zero(); d * voxels];
    for axis in 0..d {
        let out = &mut data[axis * voxels..(axis + 1) * voxels];
        for (lin, v) in out.iter_mut().enumerate() {
            *v = T::of_usize(lin / strides[axis] % spatial[axis]);
        }
    }
    Ok(Tensor::new(&shape, data))
}

/// Multilinear sampling of `img` (C channels) at `Id + disp`, border clamped.
/// One sample; shapes are `C x S` and `D x S` over the same `S`.
pub(crate) fn warp_forward_kernel<T: Scalar>(
    img: &[T],
    disp: &[T],
    out: &mut [T],
    channels: usize,
    spatial: &[usize],
) {
    let d = spatial.len();
    let voxels: usize = spatial.iter().product();
    let strides = row_major_strides(spatial);
    debug_assert_eq!(img.len(), channels * voxels);
    debug_assert_eq!(disp.len(), d * voxels);
    debug_assert_eq!(out.len(), channels * voxels);

    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let mut has_hi = [false; 3];
    for p in 0..voxels {
        for axis in 0..d {
            let idx = p / strides[axis] % spatial[axis];
            let n = spatial[axis];
            let q = T::of_usize(idx) + disp[axis * voxels + p];
            let hi = T::of_usize(n - 1);
            let qc = if q < T::zero() {
                T::zero()
            } else if q > hi {
                hi
            } else {
                q
            };
            let f = qc.floor();
            let fi = f.as_f64() as usize;
            base[axis] = fi.min(n - 1);
            frac[axis] = qc - f;
            has_hi[axis] = base[axis] + 1 < n;
        }
        // Accumulate the 2^d corner contributions.
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut off = 0usize;
            let mut skip = false;
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    if !has_hi[axis] {
                        // frac is 0 at a clamped-high coordinate, weight would be 0
                        if frac[axis] > T::zero() {
                            // unreachable: frac>0 implies base+1 < n after clamping
                        }
                        skip = true;
                        break;
                    }
                    w = w * frac[axis];
                    off += (base[axis] + 1) * strides[axis];
                } else {
                    w = w * (T::one() - frac[axis]);
                    off += base[axis] * strides[axis];
                }
            }
            if skip || w == T::zero() {
                continue;
            }
            for c in 0..channels {
                out[c * voxels + p] += w * img[c * voxels + off];
            }
        }
    }
}

/// Backward pass of [`warp_forward_kernel`]: accumulates into `grad_img`
/// and `grad_disp` given upstream `grad_out`.
pub(crate) fn warp_backward_kernel<T: Scalar>(
    img: &[T],
    disp: &[T],
    grad_out: &[T],
    grad_img: &mut [T],
    grad_disp: &mut [T],
    channels: usize,
    spatial: &[usize],
) {
    let d = spatial.len();
    let voxels: usize = spatial.iter().product();
    let strides = row_major_strides(spatial);

    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let mut has_hi = [false; 3];
    let mut interior = [false; 3];
    for p in 0..voxels {
        for axis in 0..d {
            let idx = p / strides[axis] % spatial[axis];
            let n = spatial[axis];
            let q = T::of_usize(idx) + disp[axis * voxels + p];
            let hi = T::of_usize(n - 1);
            // Gradient w.r.t. the displacement vanishes where the coordinate clamps.
            interior[axis] = q > T::zero() && q < hi;
            let qc = if q < T::zero() {
                T::zero()
            } else if q > hi {
                hi
            } else {
                q
            };
            let f = qc.floor();
            base[axis] = (f.as_f64() as usize).min(n - 1);
            frac[axis] = qc - f;
            has_hi[axis] = base[axis] + 1 < n;
        }
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut off = 0usize;
            let mut valid = true;
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    if !has_hi[axis] {
                        valid = false;
                        break;
                    }
                    w = w * frac[axis];
                    off += (base[axis] + 1) * strides[axis];
                } else {
                    w = w * (T::one() - frac[axis]);
                    off += base[axis] * strides[axis];
                }
            }
            if !valid {
                continue;
            }
            for c in 0..channels {
                grad_img[c * voxels + off] += grad_out[c * voxels + p] * w;
            }
        }
        // d out / d u_axis = sum over channels and corner pairs of the
        // difference along `axis` weighted by the other axes' weights.
        for axis in 0..d {
            if !interior[axis] || !has_hi[axis] {
                continue;
            }
            let mut acc = T::zero();
            for corner in 0..(1usize << d) {
                if corner >> axis & 1 == 1 {
                    continue; // pair (lo, hi) handled from the lo side
                }
                let mut w = T::one();
                let mut off_lo = 0usize;
                let mut valid = true;
                for ax2 in 0..d {
                    if ax2 == axis {
                        off_lo += base[ax2] * strides[ax2];
                        continue;
                    }
                    if corner >> ax2 & 1 == 1 {
                        if !has_hi[ax2] {
                            valid = false;
                            break;
                        }
                        w = w * frac[ax2];
                        off_lo += (base[ax2] + 1) * strides[ax2];
                    } else {
                        w = w * (T::one() - frac[ax2]);
                        off_lo += base[ax2] * strides[ax2];
                    }
                }
                if !valid || w == T::zero() {
                    continue;
                }
                let off_hi = off_lo + strides[axis];
                for c in 0..channels {
                    let diff = img[c * voxels + off_hi] - img[c * voxels + off_lo];
                    acc += grad_out[c * voxels + p] * w * diff;
                }
            }
            grad_disp[axis * voxels + p] += acc;
        }
    }
}

/// Warp an image by a displacement field (multilinear, border clamp).
pub fn apply_deformation<T: Scalar>(
    img: &Volume<T>,
    field: &DeformationField<T>,
) -> Result<Volume<T>, FieldError> {
    if img.spatial() != field.spatial() {
        return Err(FieldError::ShapeMismatch(format!(
            "image spatial {:?} vs field spatial {:?}",
            img.spatial(),
            field.spatial()
        )));
    }
    let mut out = Tensor::zeros(img.tensor().shape());
    warp_forward_kernel(
        img.tensor().data(),
        field.tensor().data(),
        out.data_mut(),
        img.channels(),
        img.spatial(),
    );
    Ok(Volume::from_tensor_unchecked(out))
}

/// Mean over voxels of the per-voxel Euclidean displacement norm.
pub fn displacement_magnitude<T: Scalar>(field: &DeformationField<T>) -> T {
    let d = field.rank();
    let voxels: usize = field.spatial().iter().product();
    let data = field.tensor().data();
    let mut acc = T::zero();
    for p in 0..voxels {
        let mut sq = T::zero();
        for axis in 0..d {
            let v = data[axis * voxels + p];
            sq += v * v;
        }
        acc += sq.sqrt();
    }
    acc / T::of_usize(voxels)
}

/// Mean over voxels of the Frobenius norm of forward-difference spatial
/// gradients; differences past the boundary contribute zero.
pub fn displacement_gradient_penalty<T: Scalar>(field: &DeformationField<T>) -> Result<T, FieldError> {
    if field.spatial().iter().any(|&s| s < 2) {
        return Err(FieldError::SpatialTooSmall { required: 2, got: field.spatial().to_vec() });
    }
    let d = field.rank();
    let spatial = field.spatial().to_vec();
    let voxels: usize = spatial.iter().product();
    let strides = row_major_strides(&spatial);
    let data = field.tensor().data();
    let mut acc = T::zero();
    for p in 0..voxels {
        let mut sq = T::zero();
        for comp in 0..d {
            let v = data[comp * voxels + p];
            for axis in 0..d {
                let idx = p / strides[axis] % spatial[axis];
                if idx + 1 < spatial[axis] {
                    let diff = data[comp * voxels + p + strides[axis]] - v;
                    sq += diff * diff;
                }
            }
        }
        acc += sq.sqrt();
    }
    Ok(acc / T::of_usize(voxels))
}

/// Per-voxel determinant of `d(Id + u)/dp`: central differences in the
/// interior, one-sided at the boundary. Reporting diagnostic only.
pub fn jacobian_determinant_map<T: Scalar>(field: &DeformationField<T>) -> Result<Tensor<T>, FieldError> {
    if field.spatial().iter().any(|&s| s < 2) {
        return Err(FieldError::SpatialTooSmall { required: 2, got: field.spatial().to_vec() });
    }
    let d = field.rank();
    let spatial = field.spatial().to_vec();
    let voxels: usize = spatial.iter().product();
    let strides = row_major_strides(&spatial);
    let data = field.tensor().data();
    let mut out = vec![T::zero(); voxels];
    let half = T::of_f64(0.5);
    // jac[comp][axis] = d u_comp / d p_axis (+ identity on the diagonal)
    let mut jac = [[T::zero(); 3]; 3];
    for p in 0..voxels {
        for comp in 0..d {
            for axis in 0..d {
                let idx = p / strides[axis] % spatial[axis];
                let n = spatial[axis];
                let du = if idx > 0 && idx + 1 < n {
                    (data[comp * voxels + p + strides[axis]] - data[comp * voxels + p - strides[axis]]) * half
                } else if idx + 1 < n {
                    data[comp * voxels + p + strides[axis]] - data[comp * voxels + p]
                } else {
                    data[comp * voxels + p] - data[comp * voxels + p - strides[axis]]
                };
                jac[comp][axis] = du + if comp == axis { T::one() } else { T::zero() };
            }
        }
        out[p] = match d {
            2 => jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0],
            3 => {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            }
            _ => unreachable!("rank checked at construction"),
        };
    }
    Ok(Tensor::new(&spatial, out))
}

/// Fraction of voxels with non-positive Jacobian determinant (folding).
pub fn negative_jacobian_fraction<T: Scalar>(field: &DeformationField<T>) -> Result<f64, FieldError> {
    let map = jacobian_determinant_map(field)?;
    let neg = map.data().iter().filter(|v| **v <= T::zero()).count();
    Ok(neg as f64 / map.numel() as f64)
}

/// Warp a label map: one-hot encode, warp each channel, per-voxel argmax.
/// Ties resolve to the lowest region index.
pub fn warp_labels<T: Scalar>(
    labels: &LabelMap,
    field: &DeformationField<T>,
) -> Result<LabelMap, FieldError> {
    if labels.spatial() != field.spatial() {
        return Err(FieldError::ShapeMismatch(format!(
            "labels spatial {:?} vs field spatial {:?}",
            labels.spatial(),
            field.spatial()
        )));
    }
    let regions = labels.region_count();
    let voxels: usize = labels.spatial().iter().product();
    let mut onehot = vec![T::zero(); regions * voxels];
    for (p, &l) in labels.labels().iter().enumerate() {
        onehot[l as usize * voxels + p] = T::one();
    }
    let mut warped = vec![T::zero(); regions * voxels];
    warp_forward_kernel(&onehot, field.tensor().data(), &mut warped, regions, labels.spatial());
    let mut out = vec![0u8; voxels];
    for p in 0..voxels {
        let mut best = 0usize;
        let mut best_w = warped[p];
        for r in 1..regions {
            let w = warped[r * voxels + p];
            if w > best_w {
                best_w = w;
                best = r;
            }
        }
        out[p] = best as u8;
    }
    LabelMap::new(out, labels.spatial(), labels.region_names().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_standard_normal, substream};

    fn volume(shape: &[usize], f: impl FnMut(usize) -> f64) -> Volume<f64> {
        Volume::new(Tensor::from_fn(shape, {
            let mut f = f;
            move |i| f(i)
        }))
        .unwrap()
    }

    fn field(spatial: &[usize], data: Vec<f64>) -> DeformationField<f64> {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        DeformationField::new(Tensor::new(&shape, data)).unwrap()
    }

    #[test]
    fn identity_grid_2x2() {
        let g = identity_grid::<f64>(&[2, 2]).unwrap();
        assert_eq!(g.shape(), &[2, 2, 2]);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_grid_rejects_zero_dim() {
        assert!(matches!(identity_grid::<f32>(&[0, 3]), Err(FieldError::InvalidShape(_))));
    }

    #[test]
    fn identity_grid_minus_itself_is_zero() {
        let g = identity_grid::<f64>(&[3, 4, 5]).unwrap();
        let diff = g.zip_map(&g, |a, b| a - b);
        assert!(diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_displacement_is_identity() {
        let mut rng = substream(1, "warp.id", 0);
        let mut data = vec![0.0f64; 2 * 5 * 6];
        fill_standard_normal(&mut rng, &mut data);
        let img = Volume::new(Tensor::new(&[2, 5, 6], data)).unwrap();
        let out = apply_deformation(&img, &DeformationField::zeros(&[5, 6])).unwrap();
        for (a, b) in out.tensor().data().iter().zip(img.tensor().data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn unit_shift_along_axis0_clamps_border() {
        // 1x4x4 ramp image, displacement +1 along axis 0: output row r samples
        // input row r+1, with the last row clamped.
        let img = volume(&[1, 4, 4], |i| i as f64);
        let n = 4 * 4;
        let mut disp = vec![0.0; 2 * n];
        disp[..n].iter_mut().for_each(|v| *v = 1.0);
        let out = apply_deformation(&img, &field(&[4, 4], disp)).unwrap();
        for r in 0..4usize {
            let src = (r + 1).min(3);
            for c in 0..4usize {
                assert!((out.tensor().data()[r * 4 + c] - (src * 4 + c) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_shift_on_ramp_interpolates() {
        // Ramp r(i) = i/(N-1) along axis 1; +0.5 displacement raises interior
        // values by 0.5/(N-1).
        let n = 8usize;
        let img = volume(&[1, 4, n], |i| (i % n) as f64 / (n - 1) as f64);
        let voxels = 4 * n;
        let mut disp = vec![0.0; 2 * voxels];
        disp[voxels..].iter_mut().for_each(|v| *v = 0.5);
        let out = apply_deformation(&img, &field(&[4, n], disp)).unwrap();
        for r in 0..4usize {
            for c in 0..n - 1 {
                let expect = c as f64 / (n - 1) as f64 + 0.5 / (n - 1) as f64;
                assert!((out.tensor().data()[r * n + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_is_linear_in_image() {
        let mut rng = substream(2, "warp.lin", 0);
        let mut xa = vec![0.0f64; 36];
        let mut xb = vec![0.0f64; 36];
        let mut d = vec![0.0f64; 72];
        fill_standard_normal(&mut rng, &mut xa);
        fill_standard_normal(&mut rng, &mut xb);
        fill_standard_normal(&mut rng, &mut d);
        d.iter_mut().for_each(|v| *v *= 0.7);
        let (a, b) = (1.7, -0.4);
        let va = Volume::new(Tensor::new(&[1, 6, 6], xa.clone())).unwrap();
        let vb = Volume::new(Tensor::new(&[1, 6, 6], xb.clone())).unwrap();
        let combo: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| a * p + b * q).collect();
        let vc = Volume::new(Tensor::new(&[1, 6, 6], combo)).unwrap();
        let f = field(&[6, 6], d);
        let wa = apply_deformation(&va, &f).unwrap();
        let wb = apply_deformation(&vb, &f).unwrap();
        let wc = apply_deformation(&vc, &f).unwrap();
        for i in 0..36 {
            let lhs = wc.tensor().data()[i];
            let rhs = a * wa.tensor().data()[i] + b * wb.tensor().data()[i];
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let img = volume(&[1, 4, 4], |i| i as f64);
        let f = DeformationField::zeros(&[5, 5]);
        assert!(matches!(apply_deformation(&img, &f), Err(FieldError::ShapeMismatch(_))));
    }

    #[test]
    fn magnitude_zero_and_analytic() {
        assert_eq!(displacement_magnitude(&DeformationField::<f64>::zeros(&[4, 4])), 0.0);
        let n = 16;
        let mut data = vec![3.0; n];
        data.extend(vec![4.0; n]);
        let f = field(&[4, 4], data);
        assert!((displacement_magnitude(&f) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn magnitude_matches_bruteforce() {
        let mut rng = substream(3, "mag", 0);
        let mut data = vec![0.0f64; 2 * 30];
        fill_standard_normal(&mut rng, &mut data);
        let f = field(&[5, 6], data.clone());
        let mut acc = 0.0;
        for p in 0..30 {
            acc += (data[p] * data[p] + data[30 + p] * data[30 + p]).sqrt();
        }
        assert!((displacement_magnitude(&f) - acc / 30.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_penalty_constant_is_zero() {
        let n = 20;
        let mut data = vec![1.25; n];
        data.extend(vec![-0.5; n]);
        let f = field(&[4, 5], data);
        assert_eq!(displacement_gradient_penalty(&f).unwrap(), 0.0);
    }

    #[test]
    fn gradient_penalty_linear_slope() {
        // u_0 = s * p_0, other entries zero: penalty = |s| * (n0-1)/n0.
        let (n0, n1, s) = (6usize, 5usize, -0.35f64);
        let voxels = n0 * n1;
        let mut data = vec![0.0; 2 * voxels];
        for p in 0..voxels {
            data[p] = s * (p / n1) as f64;
        }
        let f = field(&[n0, n1], data);
        let expect = s.abs() * (n0 - 1) as f64 / n0 as f64;
        assert!((displacement_gradient_penalty(&f).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_matches_bruteforce() {
        let mut rng = substream(4, "grad", 0);
        let spatial = [5usize, 7usize];
        let voxels = 35;
        let mut data = vec![0.0f64; 2 * voxels];
        fill_standard_normal(&mut rng, &mut data);
        let f = field(&spatial, data.clone());
        let mut acc = 0.0;
        for i0 in 0..spatial[0] {
            for i1 in 0..spatial[1] {
                let p = i0 * spatial[1] + i1;
                let mut sq = 0.0;
                for comp in 0..2 {
                    if i0 + 1 < spatial[0] {
                        let d = data[comp * voxels + p + spatial[1]] - data[comp * voxels + p];
                        sq += d * d;
                    }
                    if i1 + 1 < spatial[1] {
                        let d = data[comp * voxels + p + 1] - data[comp * voxels + p];
                        sq += d * d;
                    }
                }
                acc += sq.sqrt();
            }
        }
        let got = displacement_gradient_penalty(&f).unwrap();
        assert!((got - acc / voxels as f64).abs() < 1e-6);
    }

    #[test]
    fn gradient_penalty_translation_invariant() {
        let mut rng = substream(5, "grad.ti", 0);
        let mut data = vec![0.0f64; 2 * 36];
        fill_standard_normal(&mut rng, &mut data);
        let f = field(&[6, 6], data.clone());
        let shifted: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < 36 { v + 11.0 } else { v - 3.0 })
            .collect();
        let g = field(&[6, 6], shifted);
        let a = displacement_gradient_penalty(&f).unwrap();
        let b = displacement_gradient_penalty(&g).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn jacobian_identity_is_ones() {
        let map = jacobian_determinant_map(&DeformationField::<f64>::zeros(&[5, 5])).unwrap();
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_uniform_dilation() {
        // u(p) = 0.1 * p gives d(Id+u)/dp = 1.1 * I, det 1.21 everywhere
        // (central and one-sided differences are exact for linear fields).
        let spatial = [6usize, 6usize];
        let voxels = 36;
        let mut data = vec![0.0; 2 * voxels];
        for p in 0..voxels {
            data[p] = 0.1 * (p / 6) as f64;
            data[voxels + p] = 0.1 * (p % 6) as f64;
        }
        let map = jacobian_determinant_map(&field(&spatial, data)).unwrap();
        for i0 in 1..5usize {
            for i1 in 1..5usize {
                assert!((map.data()[i0 * 6 + i1] - 1.21).abs() < 1e-9);
            }
        }
        let frac = negative_jacobian_fraction(&field(&spatial, vec![0.0; 72])).unwrap();
        assert_eq!(frac, 0.0);
    }

    #[test]
    fn jacobian_3d_dilation() {
        let voxels = 64;
        let mut data = vec![0.0; 3 * voxels];
        for p in 0..voxels {
            data[p] = 0.1 * (p / 16) as f64;
            data[voxels + p] = 0.1 * (p / 4 % 4) as f64;
            data[2 * voxels + p] = 0.1 * (p % 4) as f64;
        }
        let f = DeformationField::new(Tensor::new(&[3, 4, 4, 4], data)).unwrap();
        let map = jacobian_determinant_map(&f).unwrap();
        let expect = 1.1f64.powi(3);
        assert!(map.data().iter().all(|&v| (v - expect).abs() < 1e-9));
    }

    fn demo_labels() -> LabelMap {
        // 8x8, region 1 block in the interior.
        let mut labels = vec![0u8; 64];
        for r in 3..6 {
            for c in 2..5 {
                labels[r * 8 + c] = 1;
            }
        }
        LabelMap::new(labels, &[8, 8], vec!["background".into(), "blob".into()]).unwrap()
    }

    #[test]
    fn warp_labels_identity_preserves_everything() {
        let labels = demo_labels();
        let warped = warp_labels(&labels, &DeformationField::<f64>::zeros(&[8, 8])).unwrap();
        assert_eq!(warped.labels(), labels.labels());
    }

    #[test]
    fn warp_labels_unit_shift_preserves_interior_counts() {
        let labels = demo_labels();
        let voxels = 64;
        let mut disp = vec![0.0f64; 2 * voxels];
        disp[..voxels].iter_mut().for_each(|v| *v = 1.0);
        let warped = warp_labels(&labels, &field(&[8, 8], disp)).unwrap();
        let count = |l: &LabelMap| l.labels().iter().filter(|&&v| v == 1).count();
        assert_eq!(count(&labels), count(&warped));
        // the block moved up by exactly one row
        assert_eq!(warped.labels()[2 * 8 + 2], 1);
        assert_eq!(warped.labels()[5 * 8 + 2], 0);
    }

    #[test]
    fn warp_labels_dilation_grows_region() {
        let labels = demo_labels();
        let voxels = 64;
        let mut disp = vec![0.0f64; 2 * voxels];
        // contraction towards the block center dilates the content
        let (c0, c1) = (4.0, 3.5);
        for p in 0..voxels {
            let (i0, i1) = ((p / 8) as f64, (p % 8) as f64);
            disp[p] = -0.25 * (i0 - c0);
            disp[voxels + p] = -0.25 * (i1 - c1);
        }
        let f = field(&[8, 8], disp.clone());
        let warped = warp_labels(&labels, &f).unwrap();
        let count = |l: &LabelMap| l.labels().iter().filter(|&&v| v == 1).count();
        assert!(count(&warped) > count(&labels), "{} vs {}", count(&warped), count(&labels));
        // Consistent with the determinant map: dets < 1 mean local growth.
        let map = jacobian_determinant_map(&f).unwrap();
        assert!(map.data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn warp_labels_tie_breaks_to_lowest_region() {
        // Two regions side by side; a +0.5 shift puts the boundary voxel at an
        // exact 0.5/0.5 tie, which must resolve to the lower index.
        let labels = LabelMap::new(
            vec![1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2],
            &[4, 4],
            vec!["bg".into(), "a".into(), "b".into()],
        )
        .unwrap();
        let voxels = 16;
        let mut disp = vec![0.0f64; 2 * voxels];
        disp[voxels..].iter_mut().for_each(|v| *v = 0.5);
        let warped = warp_labels(&labels, &field(&[4, 4], disp)).unwrap();
        // column 1 samples halfway between region 1 and region 2
        for r in 0..4 {
            assert_eq!(warped.labels()[r * 4 + 1], 1);
        }
    }
}
