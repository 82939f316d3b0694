//! Spatial-transformer warping: backward bilinear sampling through a field.
//!
//! `out(p) = Σ_{q ∈ Z(p')} in(q) · Π_d (1 - |p'_d - q_d|)` with `p' = p + u(p)`.
//! Samples that fall outside the source are clamped to its edge.

use crate::error::{Error, Result};
use crate::register::bspline::DeformationField;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, Image, SoftMask};

/// Cell corner and fractional offset along one axis after edge clamping.
/// `inside` is false when the coordinate was clamped.
#[inline]
pub(crate) fn axis<T: Scalar>(coord: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_usize_lossy(n - 1);
    let inside = coord >= T::zero() && coord <= hi;
    let c = coord.max(T::zero()).min(hi);
    // c >= 0, so truncation is floor
    let i0 = c.to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - T::from_usize_lossy(i0), inside)
}

/// Bilinear sample of a single-channel plane at `(x, y)`.
#[inline]
pub fn sample_bilinear<T: Scalar>(plane: &[T], height: usize, width: usize, x: T, y: T) -> T {
    let (x0, x1, fx, _) = axis(x, width);
    let (y0, y1, fy, _) = axis(y, height);
    let one = T::one();
    plane[y0 * width + x0] * (one - fx) * (one - fy)
        + plane[y0 * width + x1] * fx * (one - fy)
        + plane[y1 * width + x0] * (one - fx) * fy
        + plane[y1 * width + x1] * fx * fy
}

/// Value and partial derivatives of the bilinear interpolant. A derivative is
/// zero along an axis where the coordinate was clamped.
#[inline]
pub fn sample_bilinear_grad<T: Scalar>(
    plane: &[T],
    height: usize,
    width: usize,
    x: T,
    y: T,
) -> (T, T, T) {
    let (x0, x1, fx, in_x) = axis(x, width);
    let (y0, y1, fy, in_y) = axis(y, height);
    let one = T::one();
    let (a, b) = (plane[y0 * width + x0], plane[y0 * width + x1]);
    let (c, d) = (plane[y1 * width + x0], plane[y1 * width + x1]);
    let value = a * (one - fx) * (one - fy) + b * fx * (one - fy) + c * (one - fx) * fy + d * fx * fy;
    let dx = if in_x && x1 != x0 {
        (b - a) * (one - fy) + (d - c) * fy
    } else {
        T::zero()
    };
    let dy = if in_y && y1 != y0 {
        (c - a) * (one - fx) + (d - b) * fx
    } else {
        T::zero()
    };
    (value, dx, dy)
}

/// Warp a single-channel plane; the output takes the field's dimensions.
pub fn warp_plane<T: Scalar>(
    src: &[T],
    height: usize,
    width: usize,
    field: &DeformationField<T>,
) -> Vec<T> {
    let (fh, fw) = field.dims();
    let mut out = Vec::with_capacity(fh * fw);
    let u = field.data();
    for y in 0..fh {
        for x in 0..fw {
            let k = (y * fw + x) * 2;
            let px = T::from_usize_lossy(x) + u[k];
            let py = T::from_usize_lossy(y) + u[k + 1];
            out.push(sample_bilinear(src, height, width, px, py));
        }
    }
    out
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Warp every channel of an image.
pub fn warp_image<T: Scalar>(img: &Image<T>, field: &DeformationField<T>) -> Result<Image<T>> {
    let (h, w) = img.dims();
    let c = img.channels();
    let (fh, fw) = field.dims();
    let mut out = vec![T::zero(); fh * fw * c];
    for ch in 0..c {
        let plane: Vec<T> = img.data().iter().skip(ch).step_by(c).copied().collect();
        for (i, v) in warp_plane(&plane, h, w, field).into_iter().enumerate() {
            out[i * c + ch] = clamp_unit(v);
        }
    }
    Image::new(fh, fw, c, out)
}

pub fn warp_soft<T: Scalar>(mask: &SoftMask<T>, field: &DeformationField<T>) -> Result<SoftMask<T>> {
    let (h, w) = mask.dims();
    let (fh, fw) = field.dims();
    let data = warp_plane(mask.data(), h, w, field)
        .into_iter()
        .map(clamp_unit)
        .collect();
    SoftMask::new(fh, fw, data)
}

/// Carry a support mask onto the query grid. The hard coarse mask is the
/// `0.5` threshold of the result.
pub fn propagate_mask<T: Scalar>(
    support: &BinaryMask,
    field: &DeformationField<T>,
) -> Result<SoftMask<T>> {
    if support.dims() != field.dims() {
        return Err(Error::dims(field.dims(), support.dims()));
    }
    warp_soft(&support.to_soft::<T>(), field)
}
