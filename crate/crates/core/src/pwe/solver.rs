use num_complex::Complex64;

use super::{PweError, SourceSpec, TunnelEnvironment};
use crate::field::FieldImage;

/// Default dynamic range of normalized field images.
pub const DEFAULT_FLOOR_DB: f64 = -60.0;
/// Default cap on `n_range * n_height`.
pub const DEFAULT_GRID_CAP: usize = 4_194_304;

const PIVOT_EPS: f64 = 1e-300;

/// Closure applied at the floor and ceiling of the slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WallClosure {
    /// Leontovich impedance wall, `du/dn + j k0 alpha u = 0`.
    #[default]
    Impedance,
    /// Perfectly reflecting wall `du/dn = 0`. Used for conservation checks.
    Neumann,
}

/// Complex envelope `u(z, x)` on an `n_range x n_height` grid, stored range-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFieldSlice {
    n_range: usize,
    n_height: usize,
    delta_range_m: f64,
    delta_height_m: f64,
    values: Vec<Complex64>,
}

impl ComplexFieldSlice {
    pub fn n_range(&self) -> usize {
        self.n_range
    }

    pub fn n_height(&self) -> usize {
        self.n_height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_range, self.n_height)
    }

    pub fn delta_range_m(&self) -> f64 {
        self.delta_range_m
    }

    pub fn delta_height_m(&self) -> f64 {
        self.delta_height_m
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn column(&self, iz: usize) -> &[Complex64] {
        &self.values[iz * self.n_height..(iz + 1) * self.n_height]
    }

    pub fn get(&self, iz: usize, ix: usize) -> Complex64 {
        self.values[iz * self.n_height + ix]
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Trapezoidal `sum |u|^2 dx` of one range column.
    pub fn column_energy(&self, iz: usize) -> f64 {
        column_energy(self.column(iz), self.delta_height_m)
    }
}

/// Trapezoidal quadrature of `|u|^2` over the height axis (end samples carry
/// half weight). This is the norm the marching scheme conserves under
/// reflecting walls and never increases under impedance walls.
pub fn column_energy(column: &[Complex64], dx: f64) -> f64 {
    let n = column.len();
    let inner: f64 = column.iter().map(|v| v.norm_sqr()).sum();
    (inner - 0.5 * (column[0].norm_sqr() + column[n - 1].norm_sqr())) * dx
}

/// Precomputed Crank–Nicolson stepper for one environment.
///
/// The wall condition is imposed through a ghost sample outside each wall,
/// `u_{-1} = u_1 - 2 dx (du/dx)_0`, which keeps the centred second-order
/// stencil on the end rows and the system tridiagonal.
#[derive(Debug, Clone)]
pub struct CrankNicolson {
    closure: WallClosure,
    d_sub: Vec<Complex64>,
    d_diag: Vec<Complex64>,
    d_sup: Vec<Complex64>,
    beta: Complex64,
    // Thomas factorization of (I - beta*D2).
    c_prime: Vec<Complex64>,
    inv_pivot: Vec<Complex64>,
}

impl CrankNicolson {
    pub fn new(env: &TunnelEnvironment, closure: WallClosure) -> Result<Self, PweError> {
        env.validate()?;
        let n = env.n_height();
        let dx = env.delta_height_m;
        let inv_dx2 = 1.0 / (dx * dx);
        let k0 = env.k0();
        let j = Complex64::i();
        let beta = env.delta_range_m / (4.0 * j * k0);
        let one = Complex64::new(1.0, 0.0);

        let alpha = match closure {
            WallClosure::Impedance => env.impedance_alpha(),
            WallClosure::Neumann => Complex64::default(),
        };
        let mut d_sub = vec![Complex64::new(inv_dx2, 0.0); n];
        let mut d_diag = vec![Complex64::new(-2.0 * inv_dx2, 0.0); n];
        let mut d_sup = vec![Complex64::new(inv_dx2, 0.0); n];
        // Outward derivative at either wall is -j k0 alpha u.
        let wall_diag = (-2.0 - 2.0 * dx * j * k0 * alpha) * inv_dx2;
        d_sub[0] = Complex64::default();
        d_sup[n - 1] = Complex64::default();
        d_diag[0] = wall_diag;
        d_diag[n - 1] = wall_diag;
        d_sup[0] = Complex64::new(2.0 * inv_dx2, 0.0);
        d_sub[n - 1] = Complex64::new(2.0 * inv_dx2, 0.0);

        let mut c_prime = vec![Complex64::default(); n];
        let mut inv_pivot = vec![Complex64::default(); n];
        for i in 0..n {
            let lower = -beta * d_sub[i];
            let diag = one - beta * d_diag[i];
            let upper = -beta * d_sup[i];
            let pivot = if i == 0 {
                diag
            } else {
                diag - lower * c_prime[i - 1]
            };
            if !(pivot.norm() > PIVOT_EPS) || !pivot.is_finite() {
                return Err(PweError::SingularSystem(i));
            }
            inv_pivot[i] = one / pivot;
            c_prime[i] = upper * inv_pivot[i];
        }

        Ok(Self {
            closure,
            d_sub,
            d_diag,
            d_sup,
            beta,
            c_prime,
            inv_pivot,
        })
    }

    pub fn n_height(&self) -> usize {
        self.d_diag.len()
    }

    pub fn closure(&self) -> WallClosure {
        self.closure
    }

    /// Advances `column` by one range step into `out`.
    pub fn step_into(&self, column: &[Complex64], out: &mut [Complex64]) -> Result<(), PweError> {
        let n = self.n_height();
        if column.len() != n || out.len() != n {
            return Err(PweError::ColumnLength {
                expected: n,
                got: column.len(),
            });
        }
        let u = column;
        let x = out;

        // Forward sweep on rhs = (I + beta*D2) u.
        for i in 0..n {
            let mut d2u = self.d_diag[i] * u[i];
            if i > 0 {
                d2u += self.d_sub[i] * u[i - 1];
            }
            if i + 1 < n {
                d2u += self.d_sup[i] * u[i + 1];
            }
            let rhs = u[i] + self.beta * d2u;
            let carried = if i == 0 {
                rhs
            } else {
                rhs + self.beta * self.d_sub[i] * x[i - 1]
            };
            x[i] = carried * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            let next = x[i + 1];
            x[i] -= self.c_prime[i] * next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PweError::SingularSystem(0));
        }
        Ok(())
    }

    pub fn step(&self, column: &[Complex64]) -> Result<Vec<Complex64>, PweError> {
        let mut out = vec![Complex64::default(); self.n_height()];
        self.step_into(column, &mut out)?;
        Ok(out)
    }
}

/// `u(0, x) = A exp(-(x - x0)^2 / (2 w^2))` sampled on the transverse grid.
pub fn init_gaussian_source(
    env: &TunnelEnvironment,
    src: &SourceSpec,
) -> Result<Vec<Complex64>, PweError> {
    src.validate(env)?;
    let w2 = src.beam_waist_m * src.beam_waist_m;
    Ok((0..env.n_height())
        .map(|i| {
            let d = env.height_at(i) - src.height_m;
            Complex64::new(src.amplitude * (-d * d / (2.0 * w2)).exp(), 0.0)
        })
        .collect())
}

/// One Crank–Nicolson step with the default impedance walls.
pub fn march_step(
    column: &[Complex64],
    env: &TunnelEnvironment,
) -> Result<Vec<Complex64>, PweError> {
    march_step_with(column, env, WallClosure::Impedance)
}

pub fn march_step_with(
    column: &[Complex64],
    env: &TunnelEnvironment,
    closure: WallClosure,
) -> Result<Vec<Complex64>, PweError> {
    CrankNicolson::new(env, closure)?.step(column)
}

/// Full-slice solver with a configurable wall closure and grid cap.
#[derive(Debug, Clone)]
pub struct Solver {
    pub closure: WallClosure,
    pub grid_cap: usize,
}

impl Default for Solver {
    fn default() -> Self {
        Self {
            closure: WallClosure::Impedance,
            grid_cap: DEFAULT_GRID_CAP,
        }
    }
}

impl Solver {
    pub fn solve(
        &self,
        env: &TunnelEnvironment,
        src: &SourceSpec,
    ) -> Result<ComplexFieldSlice, PweError> {
        env.validate()?;
        let (n_range, n_height) = (env.n_range(), env.n_height());
        let points = n_range.saturating_mul(n_height);
        if points > self.grid_cap {
            return Err(PweError::GridTooLarge {
                points,
                cap: self.grid_cap,
            });
        }
        let source = init_gaussian_source(env, src)?;
        self.march_from(env, source, n_range)
    }

    /// Marches an arbitrary initial column through `n_range - 1` steps.
    pub fn march_from(
        &self,
        env: &TunnelEnvironment,
        initial: Vec<Complex64>,
        n_range: usize,
    ) -> Result<ComplexFieldSlice, PweError> {
        let stepper = CrankNicolson::new(env, self.closure)?;
        let n_height = stepper.n_height();
        if initial.len() != n_height {
            return Err(PweError::ColumnLength {
                expected: n_height,
                got: initial.len(),
            });
        }
        let mut values = vec![Complex64::default(); n_range * n_height];
        values[..n_height].copy_from_slice(&initial);
        for iz in 1..n_range {
            let (done, rest) = values.split_at_mut(iz * n_height);
            stepper.step_into(&done[(iz - 1) * n_height..], &mut rest[..n_height])?;
        }
        Ok(ComplexFieldSlice {
            n_range,
            n_height,
            delta_range_m: env.delta_range_m,
            delta_height_m: env.delta_height_m,
            values,
        })
    }
}

pub fn solve(env: &TunnelEnvironment, src: &SourceSpec) -> Result<ComplexFieldSlice, PweError> {
    Solver::default().solve(env, src)
}

/// Maps |u| to [0, 1] through `20 log10(|u| / max|u|)` clamped to `[floor_db, 0]`.
/// The image has one row per transverse sample and one column per range step.
pub fn to_field_image(slice: &ComplexFieldSlice, floor_db: f64) -> Result<FieldImage, PweError> {
    if !(floor_db.is_finite() && floor_db < 0.0) {
        return Err(PweError::InvalidFloor(floor_db));
    }
    let peak = slice.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(PweError::ZeroField);
    }
    let (h, w) = (slice.n_height, slice.n_range);
    let mut pixels = vec![0.0; h * w];
    for iz in 0..w {
        for ix in 0..h {
            let mag = slice.get(iz, ix).norm();
            let db = if mag > 0.0 {
                (20.0 * (mag / peak).log10()).clamp(floor_db, 0.0)
            } else {
                floor_db
            };
            pixels[ix * w + iz] = 1.0 - db / floor_db;
        }
    }
    Ok(FieldImage::new(h, w, pixels).expect("normalized pixels are in [0, 1]"))
}

/// `20 log10 |u|` along the row nearest `height_m`, referenced to the peak of
/// the source column. Zero samples map to `floor_db`.
pub fn received_power_line(
    slice: &ComplexFieldSlice,
    height_m: f64,
    floor_db: f64,
) -> Result<Vec<f64>, PweError> {
    let max_height = (slice.n_height - 1) as f64 * slice.delta_height_m;
    if !(height_m.is_finite() && (0.0..=max_height + 1e-9).contains(&height_m)) {
        return Err(PweError::HeightOutOfDomain(height_m));
    }
    let row = ((height_m / slice.delta_height_m).round() as usize).min(slice.n_height - 1);
    let reference = slice.column(0).iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(reference > 0.0) {
        return Err(PweError::ZeroField);
    }
    Ok((0..slice.n_range)
        .map(|iz| {
            let mag = slice.get(iz, row).norm();
            if mag > 0.0 {
                20.0 * (mag / reference).log10()
            } else {
                floor_db
            }
        })
        .collect())
}
