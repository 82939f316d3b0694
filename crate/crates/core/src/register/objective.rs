//! Registration energy: mean squared intensity difference plus bending energy,
//! with its analytic gradient with respect to the control displacements.

use crate::error::{Error, Result};
use crate::register::bspline::{ControlGrid, Renderer};
use crate::register::warp::{sample_bilinear, sample_bilinear_grad};
use crate::scalar::Scalar;
use crate::tensor::Image;

#[derive(Debug, Clone)]
pub struct ObjectiveValue<T> {
    pub total: T,
    pub data_term: T,
    pub bending: T,
    /// Same layout as `ControlGrid::displacements`.
    pub gradient: Vec<T>,
}

/// Discrete bending energy of an interleaved field, normalized by pixel count:
/// squared second differences `u_xx² + 2·u_xy² + u_yy²` summed over both
/// components. When `grad` is given, `∂BE/∂u` is accumulated into it.
pub fn bending_energy<T: Scalar>(field: &[T], height: usize, width: usize, grad: Option<&mut [T]>) -> T {
    bending_energy_scaled(field, height, width, grad, T::one())
}

/// Same as [`bending_energy`] with the accumulated gradient multiplied by
/// `scale`.
pub(crate) fn bending_energy_scaled<T: Scalar>(
    field: &[T],
    height: usize,
    width: usize,
    mut grad: Option<&mut [T]>,
    scale: T,
) -> T {
    debug_assert_eq!(field.len(), height * width * 2);
    let n = T::from_usize_lossy(height * width);
    let stride = 2 * width;
    let mut scratch = Vec::with_capacity(field.len());
    let mut acc = T::zero();
    let mut run = |start: usize, len: usize, taps: &[(usize, f64)], weight: f64, grad: &mut Option<&mut [T]>| {
        acc += stencil(field, grad.as_deref_mut(), &mut scratch, start, len, taps, T::lit(weight), scale / n);
    };
    let xx = [(0, 1.0), (2, -2.0), (4, 1.0)];
    let yy = [(0, 1.0), (stride, -2.0), (2 * stride, 1.0)];
    let xy = [(0, 1.0), (2, -1.0), (stride, -1.0), (stride + 2, 1.0)];
    if width >= 3 {
        for y in 0..height {
            run(y * stride, stride - 4, &xx, 1.0, &mut grad);
        }
    }
    if height >= 3 {
        run(0, (height - 2) * stride, &yy, 1.0, &mut grad);
    }
    if width >= 2 {
        for y in 0..height.saturating_sub(1) {
            run(y * stride, stride - 2, &xy, 2.0, &mut grad);
        }
    }
    acc / n
}

/// `weight·Σ r²` for `r_i = Σ c·f[start + i + off]`, `i < len`; adds
/// `gscale·∂/∂f` into `grad`.
#[allow(clippy::too_many_arguments)]
fn stencil<T: Scalar>(
    f: &[T],
    grad: Option<&mut [T]>,
    r: &mut Vec<T>,
    start: usize,
    len: usize,
    taps: &[(usize, f64)],
    weight: T,
    gscale: T,
) -> T {
    r.clear();
    r.resize(len, T::zero());
    for &(off, c) in taps {
        let c = T::lit(c);
        for (ri, &v) in r.iter_mut().zip(&f[start + off..start + off + len]) {
            *ri += c * v;
        }
    }
    let sum = r.iter().fold(T::zero(), |a, &v| a + v * v);
    if let Some(g) = grad {
        for &(off, c) in taps {
            let k = T::lit(2.0) * weight * T::lit(c) * gscale;
            for (gi, &ri) in g[start + off..start + off + len].iter_mut().zip(r.iter()) {
                *gi += k * ri;
            }
        }
    }
    weight * sum
}

/// Fixed/moving pair at one resolution with reusable scratch buffers.
pub(crate) struct Problem<'a, T> {
    fixed: &'a [T],
    moving: &'a [T],
    height: usize,
    width: usize,
    lambda: T,
    renderer: Renderer<T>,
    field: Vec<T>,
    pixel_grad: Vec<T>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub(crate) fn new(
        fixed: &'a [T],
        moving: &'a [T],
        height: usize,
        width: usize,
        grid: &ControlGrid<T>,
        lambda: T,
    ) -> Result<Self> {
        debug_assert_eq!(fixed.len(), height * width);
        debug_assert_eq!(moving.len(), height * width);
        Ok(Self {
            fixed,
            moving,
            height,
            width,
            lambda,
            renderer: Renderer::new(grid, height, width)?,
            field: Vec::new(),
            pixel_grad: Vec::new(),
        })
    }

    fn data_value(&self) -> T {
        let (h, w) = (self.height, self.width);
        let mut acc = T::zero();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let px = T::from_usize_lossy(x) + self.field[2 * k];
                let py = T::from_usize_lossy(y) + self.field[2 * k + 1];
                let r = sample_bilinear(self.moving, h, w, px, py) - self.fixed[k];
                acc += r * r;
            }
        }
        acc / T::from_usize_lossy(h * w)
    }

    /// Energy only.
    pub(crate) fn value(&mut self, disp: &[T]) -> T {
        let mut field = std::mem::take(&mut self.field);
        self.renderer.render(disp, &mut field);
        self.field = field;
        let data = self.data_value();
        let be = if self.lambda > T::zero() {
            bending_energy(&self.field, self.height, self.width, None)
        } else {
            T::zero()
        };
        data + self.lambda * be
    }

    /// Energy and gradient.
    pub(crate) fn evaluate(&mut self, disp: &[T]) -> ObjectiveValue<T> {
        let (h, w) = (self.height, self.width);
        let mut field = std::mem::take(&mut self.field);
        self.renderer.render(disp, &mut field);
        self.field = field;

        let n = T::from_usize_lossy(h * w);
        let two = T::lit(2.0);
        self.pixel_grad.clear();
        self.pixel_grad.resize(h * w * 2, T::zero());
        let mut data = T::zero();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let px = T::from_usize_lossy(x) + self.field[2 * k];
                let py = T::from_usize_lossy(y) + self.field[2 * k + 1];
                let (m, dx, dy) = sample_bilinear_grad(self.moving, h, w, px, py);
                let r = m - self.fixed[k];
                data += r * r;
                let s = two * r / n;
                self.pixel_grad[2 * k] = s * dx;
                self.pixel_grad[2 * k + 1] = s * dy;
            }
        }
        let data = data / n;

        let bending = if self.lambda > T::zero() {
            bending_energy_scaled(&self.field, h, w, Some(&mut self.pixel_grad), self.lambda)
        } else {
            T::zero()
        };

        let mut gradient = vec![T::zero(); disp.len()];
        self.renderer.backproject(&self.pixel_grad, &mut gradient);
        ObjectiveValue {
            total: data + self.lambda * bending,
            data_term: data,
            bending,
            gradient,
        }
    }
}

fn gray_plane<T: Scalar>(img: &Image<T>, what: &str) -> Result<Vec<T>> {
    if img.channels() != 1 {
        return Err(Error::InvalidInput(format!(
            "{what} image must be grayscale, got {} channels",
            img.channels()
        )));
    }
    Ok(img.data().to_vec())
}

/// `E = mean_p (fixed(p) - moving(p + u(p)))² + λ·BE(u)` and `∂E/∂c`.
pub fn objective<T: Scalar>(
    fixed: &Image<T>,
    moving: &Image<T>,
    grid: &ControlGrid<T>,
    lambda_bend: T,
) -> Result<ObjectiveValue<T>> {
    if fixed.dims() != moving.dims() {
        return Err(Error::dims(fixed.dims(), moving.dims()));
    }
    let f = gray_plane(fixed, "fixed")?;
    let m = gray_plane(moving, "moving")?;
    let (h, w) = fixed.dims();
    let mut p = Problem::new(&f, &m, h, w, grid, lambda_bend)?;
    Ok(p.evaluate(grid.displacements()))
}
