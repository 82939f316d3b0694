//! Cubic B-spline free-form deformation.
//!
//! Control point `(i, j)` sits at pixel position `((i - 1) * spacing, (j - 1) * spacing)`,
//! so the grid carries one margin column/row before the image origin and enough
//! after it that every pixel has a full 4×4 support.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform cubic B-spline basis at `t ∈ [0, 1)`.
#[inline]
pub fn basis<T: Scalar>(t: T) -> [T; 4] {
    let one = T::one();
    let six = T::lit(6.0);
    let t2 = t * t;
    let t3 = t2 * t;
    let s = one - t;
    [
        s * s * s / six,
        (T::lit(3.0) * t3 - six * t2 + T::lit(4.0)) / six,
        (T::lit(-3.0) * t3 + T::lit(3.0) * t2 + T::lit(3.0) * t + one) / six,
        t3 / six,
    ]
}

/// Control-point displacements in pixel units, layout `[(j * nx + i) * 2 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<T = f64> {
    spacing: f64,
    nx: usize,
    ny: usize,
    disp: Vec<T>,
}

impl<T: Scalar> ControlGrid<T> {
    pub fn new(spacing: f64, nx: usize, ny: usize, disp: Vec<T>) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing {spacing} must be positive")));
        }
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidInput("control grid needs at least 4x4 points".into()));
        }
        if disp.len() != nx * ny * 2 {
            return Err(Error::InvalidInput(format!(
                "control grid expects {} displacement values, got {}",
                nx * ny * 2,
                disp.len()
            )));
        }
        if disp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control grid".into()));
        }
        Ok(Self {
            spacing,
            nx,
            ny,
            disp,
        })
    }

    /// Smallest zero grid whose cubic support covers a `height`×`width` image.
    pub fn zeros_covering(height: usize, width: usize, spacing: f64) -> Self {
        let count = |extent: usize| (extent as f64 / spacing).ceil().max(1.0) as usize + 3;
        let (nx, ny) = (count(width), count(height));
        Self {
            spacing,
            nx,
            ny,
            disp: vec![T::zero(); nx * ny * 2],
        }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn displacements(&self) -> &[T] {
        &self.disp
    }

    pub fn displacements_mut(&mut self) -> &mut [T] {
        &mut self.disp
    }

    /// Pixel position of control index `i` along either axis.
    pub fn position(&self, i: usize) -> f64 {
        (i as f64 - 1.0) * self.spacing
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [T; 2] {
        let k = (j * self.nx + i) * 2;
        [self.disp[k], self.disp[k + 1]]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: [T; 2]) {
        let k = (j * self.nx + i) * 2;
        self.disp[k] = v[0];
        self.disp[k + 1] = v[1];
    }

    pub fn covers(&self, height: usize, width: usize) -> bool {
        (self.nx - 3) as f64 * self.spacing >= width as f64
            && (self.ny - 3) as f64 * self.spacing >= height as f64
    }

    fn check_covers(&self, height: usize, width: usize) -> Result<()> {
        if self.covers(height, width) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "{}x{} control grid with spacing {} does not cover a {height}x{width} image",
                self.nx, self.ny, self.spacing
            )))
        }
    }

    /// Displacement at a continuous position. Beyond the covered region the
    /// boundary cells' polynomials are extrapolated.
    pub fn evaluate(&self, x: f64, y: f64) -> [T; 2] {
        let (ix, wx) = support(x, self.spacing, self.nx);
        let (iy, wy) = support(y, self.spacing, self.ny);
        let mut out = [T::zero(); 2];
        for (m, &by) in wy.iter().enumerate() {
            for (l, &bx) in wx.iter().enumerate() {
                let c = self.get(ix + l, iy + m);
                let w = T::lit(bx * by);
                out[0] += w * c[0];
                out[1] += w * c[1];
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ControlGrid<U> {
        ControlGrid {
            spacing: self.spacing,
            nx: self.nx,
            ny: self.ny,
            disp: self.disp.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// First control index and basis weights for coordinate `coord`. Outside the
/// covered span the nearest cell's cubic is extended.
fn support(coord: f64, spacing: f64, n: usize) -> (usize, [f64; 4]) {
    let max_cell = (n - 4) as f64;
    let s = coord / spacing;
    let cell = s.floor().clamp(0.0, max_cell);
    (cell as usize, basis(s - cell))
}

/// Per-axis lookup of control indices and weights for every pixel.
#[derive(Debug, Clone)]
pub(crate) struct WeightTable<T> {
    pub(crate) first: Vec<usize>,
    pub(crate) weights: Vec<[T; 4]>,
}

impl<T: Scalar> WeightTable<T> {
    pub(crate) fn new(extent: usize, spacing: f64, n: usize) -> Self {
        let (first, weights) = (0..extent)
            .map(|p| {
                let (i, w) = support(p as f64, spacing, n);
                (i, w.map(T::lit))
            })
            .unzip();
        Self { first, weights }
    }
}

/// Precomputed separable weights for rendering a grid onto a fixed image size.
#[derive(Debug, Clone)]
pub(crate) struct Renderer<T> {
    pub(crate) height: usize,
    pub(crate) width: usize,
    nx: usize,
    ny: usize,
    xs: WeightTable<T>,
    ys: WeightTable<T>,
}

impl<T: Scalar> Renderer<T> {
    pub(crate) fn new(grid: &ControlGrid<T>, height: usize, width: usize) -> Result<Self> {
        grid.check_covers(height, width)?;
        Ok(Self {
            height,
            width,
            nx: grid.nx,
            ny: grid.ny,
            xs: WeightTable::new(width, grid.spacing, grid.nx),
            ys: WeightTable::new(height, grid.spacing, grid.ny),
        })
    }

    /// Dense interleaved `(u_x, u_y)` field.
    pub(crate) fn render(&self, disp: &[T], out: &mut Vec<T>) {
        let (h, w, nx) = (self.height, self.width, self.nx);
        out.clear();
        out.resize(h * w * 2, T::zero());
        let mut row = vec![T::zero(); nx * 2];
        for y in 0..h {
            let (j0, wy) = (self.ys.first[y], self.ys.weights[y]);
            row.iter_mut().for_each(|v| *v = T::zero());
            for (m, &by) in wy.iter().enumerate() {
                let base = (j0 + m) * nx * 2;
                for (r, &c) in row.iter_mut().zip(&disp[base..base + nx * 2]) {
                    *r += by * c;
                }
            }
            let line = &mut out[y * w * 2..(y + 1) * w * 2];
            for x in 0..w {
                let (i0, wx) = (self.xs.first[x], self.xs.weights[x]);
                let (mut ux, mut uy) = (T::zero(), T::zero());
                for (l, &bx) in wx.iter().enumerate() {
                    ux += bx * row[(i0 + l) * 2];
                    uy += bx * row[(i0 + l) * 2 + 1];
                }
                line[x * 2] = ux;
                line[x * 2 + 1] = uy;
            }
        }
    }

    /// Adjoint of `render`: maps a per-pixel gradient onto control points.
    pub(crate) fn backproject(&self, pixel_grad: &[T], out: &mut [T]) {
        let (h, w, nx) = (self.height, self.width, self.nx);
        debug_assert_eq!(out.len(), nx * self.ny * 2);
        out.iter_mut().for_each(|v| *v = T::zero());
        let mut row = vec![T::zero(); nx * 2];
        for y in 0..h {
            row.iter_mut().for_each(|v| *v = T::zero());
            let line = &pixel_grad[y * w * 2..(y + 1) * w * 2];
            for x in 0..w {
                let (i0, wx) = (self.xs.first[x], self.xs.weights[x]);
                let (gx, gy) = (line[x * 2], line[x * 2 + 1]);
                for (l, &bx) in wx.iter().enumerate() {
                    row[(i0 + l) * 2] += bx * gx;
                    row[(i0 + l) * 2 + 1] += bx * gy;
                }
            }
            let (j0, wy) = (self.ys.first[y], self.ys.weights[y]);
            for (m, &by) in wy.iter().enumerate() {
                let base = (j0 + m) * nx * 2;
                for (o, &r) in out[base..base + nx * 2].iter_mut().zip(&row) {
                    *o += by * r;
                }
            }
        }
    }
}

/// Dense displacement field `u(p)` on a `height`×`width` grid, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> DeformationField<T> {
    /// `data` is interleaved `(u_x, u_y)` per pixel, row-major.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::InvalidInput(format!(
                "field data length {} != {height}x{width}x2",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deformation field".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, ux: T, uy: T) -> Self {
        let data = (0..height * width).flat_map(|_| [ux, uy]).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 2] {
        let k = (y * self.width + x) * 2;
        [self.data[k], self.data[k + 1]]
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.height * self.width).max(1) as f64;
        self.data
            .chunks_exact(2)
            .map(|u| u[0].as_f64().hypot(u[1].as_f64()))
            .sum::<f64>()
            / n
    }

    pub fn cast<U: Scalar>(&self) -> DeformationField<U> {
        DeformationField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Render the dense field of a control grid over a `height`×`width` image.
pub fn bspline_field<T: Scalar>(
    grid: &ControlGrid<T>,
    height: usize,
    width: usize,
) -> Result<DeformationField<T>> {
    let renderer = Renderer::new(grid, height, width)?;
    let mut data = Vec::new();
    renderer.render(grid.displacements(), &mut data);
    Ok(DeformationField {
        height,
        width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_sums_to_one() {
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let b = basis(t);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_grid_renders_zero_field() {
        let g = ControlGrid::<f64>::zeros_covering(40, 50, 16.0);
        let f = bspline_field(&g, 40, 50).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_grid_is_partition_of_unity() {
        let mut g = ControlGrid::<f32>::zeros_covering(33, 47, 8.0);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                g.set(i, j, [2.5, -1.25]);
            }
        }
        let f = bspline_field(&g, 33, 47).unwrap();
        for u in f.data().chunks_exact(2) {
            assert!((u[0] - 2.5).abs() <= 1e-5 && (u[1] + 1.25).abs() <= 1e-5);
        }
    }

    #[test]
    fn single_control_matches_direct_basis_products() {
        let spacing = 8.0;
        let mut g = ControlGrid::<f64>::zeros_covering(32, 32, spacing);
        let (ci, cj) = (3usize, 2usize);
        g.set(ci, cj, [1.0, 0.0]);
        let f = bspline_field(&g, 32, 32).unwrap();
        // Direct oracle: B_l(v)·B_m(w) with cell i = floor(x/S), l = ci - i.
        let direct = |p: usize| -> f64 {
            let s = p as f64 / spacing;
            let cell = s.floor() as i64;
            let t = s - cell as f64;
            let b = [
                (1.0 - t).powi(3) / 6.0,
                (3.0 * t.powi(3) - 6.0 * t * t + 4.0) / 6.0,
                (-3.0 * t.powi(3) + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
                t.powi(3) / 6.0,
            ];
            b
                .get(usize::try_from(ci as i64 - cell).unwrap_or(9))
                .copied()
                .unwrap_or(0.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (x, y) = (rng.random_range(0..32), rng.random_range(0..32));
            let expected = {
                let sy = y as f64 / spacing;
                let celly = sy.floor() as i64;
                let ty = sy - celly as f64;
                let by = [
                    (1.0 - ty).powi(3) / 6.0,
                    (3.0 * ty.powi(3) - 6.0 * ty * ty + 4.0) / 6.0,
                    (-3.0 * ty.powi(3) + 3.0 * ty * ty + 3.0 * ty + 1.0) / 6.0,
                    ty.powi(3) / 6.0,
                ];
                let wy = by
                    .get(usize::try_from(cj as i64 - celly).unwrap_or(9))
                    .copied()
                    .unwrap_or(0.0);
                direct(x) * wy
            };
            let u = f.get(x, y);
            assert!((u[0] - expected).abs() < 1e-12, "({x},{y})");
            assert_eq!(u[1], 0.0);
        }
    }

    #[test]
    fn insufficient_coverage_errors() {
        let g = ControlGrid::<f64>::new(8.0, 4, 4, vec![0.0; 32]).unwrap();
        assert!(bspline_field(&g, 8, 8).is_ok());
        assert!(bspline_field(&g, 9, 8).is_err());
        assert!(ControlGrid::<f64>::new(8.0, 4, 4, vec![f64::NAN; 32]).is_err());
    }

    #[test]
    fn backproject_is_adjoint_of_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = ControlGrid::<f64>::zeros_covering(20, 27, 6.0);
        g.displacements_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let r = Renderer::new(&g, 20, 27).unwrap();
        let mut field = Vec::new();
        r.render(g.displacements(), &mut field);
        let probe: Vec<f64> = (0..field.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut back = vec![0.0; g.displacements().len()];
        r.backproject(&probe, &mut back);
        let lhs: f64 = field.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.displacements().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn evaluate_agrees_with_render_on_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = ControlGrid::<f64>::zeros_covering(16, 16, 5.0);
        g.displacements_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-2.0..2.0));
        let f = bspline_field(&g, 16, 16).unwrap();
        for (x, y) in [(0, 0), (15, 15), (7, 3)] {
            let a = g.evaluate(x as f64, y as f64);
            let b = f.get(x, y);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}
