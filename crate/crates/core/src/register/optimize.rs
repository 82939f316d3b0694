//! Multi-resolution B-spline registration by deterministic gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::bspline::{bspline_field, ControlGrid, DeformationField};
use crate::register::objective::Problem;
use crate::scalar::Scalar;
use crate::tensor::Image;

/// Halvings of the step tried before a level is declared converged.
const MAX_BACKTRACK: usize = 8;
/// Window for the relative-decrease stopping rule.
const STALL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Control-point spacing in pixels of each level's own image. Since every
    /// coarser level halves the resolution, the spacing measured on the full
    /// image doubles per level.
    pub grid_spacing_finest: f64,
    pub lambda_bend: f64,
    pub iters_per_level: usize,
    /// Largest control-point move of the first iteration, in level pixels.
    /// Iteration `k` moves at most `step0 / (1 + k/50)`.
    pub step0: f64,
    pub tol_rel: f64,
    /// Gaussian smoothing of coarse pyramid levels, in level pixels. The
    /// coarsest level gets `pyramid_sigma * (levels - 1)`, decreasing by
    /// `pyramid_sigma` per level down to none at full resolution.
    pub pyramid_sigma: f64,
    /// Stretch each image to `[0, 1]` by its own minimum and maximum before
    /// registering, so pairs with different brightness or contrast still align.
    pub normalize_intensity: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            grid_spacing_finest: 32.0,
            lambda_bend: 0.1,
            iters_per_level: 200,
            step0: 1.0,
            tol_rel: 1e-6,
            pyramid_sigma: 3.0,
            normalize_intensity: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("registration.{name} must be positive")))
            }
        };
        if self.levels == 0 {
            return Err(Error::Config("registration.levels must be >= 1".into()));
        }
        if self.iters_per_level == 0 {
            return Err(Error::Config("registration.iters_per_level must be >= 1".into()));
        }
        positive(self.grid_spacing_finest, "grid_spacing_finest")?;
        positive(self.lambda_bend, "lambda_bend")?;
        positive(self.step0, "step0")?;
        positive(self.tol_rel, "tol_rel")?;
        if !(self.pyramid_sigma >= 0.0 && self.pyramid_sigma.is_finite()) {
            return Err(Error::Config("registration.pyramid_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimization record of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub level: usize,
    pub factor: usize,
    pub height: usize,
    pub width: usize,
    /// Objective of every accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
}

impl LevelTrace {
    pub fn initial(&self) -> f64 {
        self.history[0]
    }

    pub fn last(&self) -> f64 {
        *self.history.last().expect("history starts non-empty")
    }

    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct Registration<T> {
    pub field: DeformationField<T>,
    pub grid: ControlGrid<T>,
    pub levels: Vec<LevelTrace>,
}

/// 2× block-mean downsampling; odd trailing rows/columns average what exists.
fn downsample<T: Scalar>(src: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = T::zero();
            let mut n = 0usize;
            for yy in 2 * y..(2 * y + 2).min(h) {
                for xx in 2 * x..(2 * x + 2).min(w) {
                    acc += src[yy * w + xx];
                    n += 1;
                }
            }
            out.push(acc / T::from_usize_lossy(n));
        }
    }
    (out, oh, ow)
}

/// Affine rescale onto `[0, 1]`; constant input is returned unchanged.
fn min_max_stretch<T: Scalar>(src: &[T]) -> Vec<T> {
    let lo = src.iter().copied().fold(T::infinity(), T::min);
    let hi = src.iter().copied().fold(T::neg_infinity(), T::max);
    if hi <= lo {
        return src.to_vec();
    }
    src.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur<T: Scalar>(src: &[T], h: usize, w: usize, sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let kernel: Vec<T> = kernel.into_iter().map(T::lit).collect();

    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Initial grid at the next finer level reproducing `2·u_coarse((x - 0.5)/2)`
/// by cubic quasi-interpolation of the sampled target field.
fn refine_grid<T: Scalar>(coarse: &ControlGrid<T>, height: usize, width: usize, spacing: f64) -> ControlGrid<T> {
    let mut fine = ControlGrid::<T>::zeros_covering(height, width, spacing);
    let (nx, ny) = (fine.nx(), fine.ny());
    let two = T::lit(2.0);
    // Samples on a ring one control point wider than the grid, so the
    // stencil needs no boundary handling.
    let (ex, ey) = (nx + 2, ny + 2);
    let samples: Vec<[T; 2]> = (0..ey)
        .flat_map(|j| (0..ex).map(move |i| (i, j)))
        .map(|(i, j)| {
            let x = (i as f64 - 2.0) * spacing;
            let y = (j as f64 - 2.0) * spacing;
            let u = coarse.evaluate((x - 0.5) / 2.0, (y - 0.5) / 2.0);
            [two * u[0], two * u[1]]
        })
        .collect();
    let stencil = [T::lit(-1.0 / 6.0), T::lit(8.0 / 6.0), T::lit(-1.0 / 6.0)];
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = [T::zero(); 2];
            for (b, &sb) in stencil.iter().enumerate() {
                for (a, &sa) in stencil.iter().enumerate() {
                    let s = samples[(j + b) * ex + i + a];
                    acc[0] += sa * sb * s[0];
                    acc[1] += sa * sb * s[1];
                }
            }
            fine.set(i, j, acc);
        }
    }
    fine
}

/// Gradient descent on one level. Each step moves the control point with the
/// largest gradient by the current step length and the rest proportionally;
/// a step that does not lower the energy is halved up to `MAX_BACKTRACK`
/// times, after which the level stops.
fn descend<T: Scalar>(problem: &mut Problem<'_, T>, grid: &mut ControlGrid<T>, cfg: &RegistrationConfig) -> Vec<f64> {
    let mut current = problem.evaluate(grid.displacements());
    let mut history = vec![current.total.as_f64()];
    let mut trial = grid.displacements().to_vec();
    for k in 0..cfg.iters_per_level {
        let gmax = current
            .gradient
            .iter()
            .fold(T::zero(), |m, g| m.max(g.abs()));
        if gmax <= T::zero() || !gmax.is_finite() {
            break;
        }
        let mut step = cfg.step0 / (1.0 + k as f64 / 50.0);
        let mut accepted = false;
        for _ in 0..=MAX_BACKTRACK {
            let scale = T::lit(step) / gmax;
            for ((t, &c), &g) in trial.iter_mut().zip(grid.displacements()).zip(&current.gradient) {
                *t = c - scale * g;
            }
            let v = problem.value(&trial);
            if v.is_finite() && v < current.total {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        grid.displacements_mut().copy_from_slice(&trial);
        current = problem.evaluate(grid.displacements());
        history.push(current.total.as_f64());
        let n = history.len();
        if n > STALL_WINDOW {
            let old = history[n - 1 - STALL_WINDOW];
            let rel = (old - history[n - 1]) / old.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tol_rel {
                break;
            }
        }
    }
    history
}

/// Register `moving` onto `fixed`, returning the field on the fixed grid and
/// the per-level optimization traces.
pub fn register_detailed<T: Scalar>(
    moving: &Image<T>,
    fixed: &Image<T>,
    cfg: &RegistrationConfig,
) -> Result<Registration<T>> {
    cfg.validate()?;
    if moving.dims() != fixed.dims() {
        return Err(Error::dims(fixed.dims(), moving.dims()));
    }
    if moving.channels() != 1 || fixed.channels() != 1 {
        return Err(Error::InvalidInput("registration expects grayscale images".into()));
    }
    let (h, w) = fixed.dims();

    let prepare = |img: &Image<T>| {
        if cfg.normalize_intensity {
            min_max_stretch(img.data())
        } else {
            img.data().to_vec()
        }
    };

    // Pyramid, finest first.
    let mut pyramid = vec![(prepare(fixed), prepare(moving), h, w)];
    for _ in 1..cfg.levels {
        let (f, m, ph, pw) = pyramid.last().expect("non-empty");
        let (fd, nh, nw) = downsample(f, *ph, *pw);
        let (md, _, _) = downsample(m, *ph, *pw);
        pyramid.push((fd, md, nh, nw));
    }

    let lambda = T::lit(cfg.lambda_bend);
    let mut grid: Option<ControlGrid<T>> = None;
    let mut traces = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let depth = cfg.levels - 1 - level;
        let (f, m, lh, lw) = &pyramid[depth];
        let sigma = cfg.pyramid_sigma * depth as f64;
        let (f, m) = (gaussian_blur(f, *lh, *lw, sigma), gaussian_blur(m, *lh, *lw, sigma));
        let mut g = match grid.take() {
            None => ControlGrid::zeros_covering(*lh, *lw, cfg.grid_spacing_finest),
            Some(prev) => refine_grid(&prev, *lh, *lw, cfg.grid_spacing_finest),
        };
        let mut problem = Problem::new(&f, &m, *lh, *lw, &g, lambda)?;
        let history = descend(&mut problem, &mut g, cfg);
        log::debug!(
            "level {level} ({lw}x{lh}): {} iterations, energy {:.6e} -> {:.6e}",
            history.len() - 1,
            history[0],
            history[history.len() - 1]
        );
        traces.push(LevelTrace {
            level,
            factor: 1 << depth,
            height: *lh,
            width: *lw,
            history,
        });
        grid = Some(g);
    }
    let grid = grid.expect("levels >= 1");
    let field = bspline_field(&grid, h, w)?;
    Ok(Registration {
        field,
        grid,
        levels: traces,
    })
}

/// Field that pulls `moving` content onto the `fixed` grid: `moving(p + u(p)) ≈ fixed(p)`.
pub fn register<T: Scalar>(
    moving: &Image<T>,
    fixed: &Image<T>,
    cfg: &RegistrationConfig,
) -> Result<DeformationField<T>> {
    register_detailed(moving, fixed, cfg).map(|r| r.field)
}
