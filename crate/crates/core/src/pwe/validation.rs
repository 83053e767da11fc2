//! Self-checks of the marching scheme: analytic free-space beam, Richardson
//! self-convergence, and energy conservation under reflecting walls.

use num_complex::Complex64;
use serde::Serialize;

use super::{PweError, Solver, SourceSpec, TunnelEnvironment, WallClosure};

/// Closed-form paraxial Gaussian beam in a 2-D slice:
/// `u = A sqrt(q0/q) exp(-j k0 (x - x0)^2 / (2 q))` with `q = j k0 w^2 + z`.
pub fn analytic_gaussian_beam(k0: f64, src: &SourceSpec, z: f64, x: f64) -> Complex64 {
    let j = Complex64::i();
    let q0 = j * k0 * src.beam_waist_m * src.beam_waist_m;
    let q = q0 + z;
    let d = x - src.height_m;
    src.amplitude * (q0 / q).sqrt() * (-j * k0 * d * d / (2.0 * q)).exp()
}

/// Lossless, wide free-space domain in which a 5 m beam launched at mid-height
/// never reaches the walls over 500 m.
pub fn free_space_case() -> (TunnelEnvironment, SourceSpec) {
    let env = TunnelEnvironment {
        length_m: 500.0,
        height_m: 100.0,
        delta_range_m: 0.5,
        delta_height_m: 0.25,
        frequency_hz: 900e6,
        eps_r: 1.0,
        sigma_s_per_m: 0.0,
        mu_r: 1.0,
        polarization: Default::default(),
    };
    let src = SourceSpec {
        height_m: 50.0,
        beam_waist_m: 5.0,
        amplitude: 1.0,
    };
    (env, src)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub case: String,
    pub metric: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
    pub details: Vec<(String, f64)>,
}

fn rel_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

/// Relative L2 error of the marched final column against the analytic beam.
pub fn free_space_beam_error(
    env: &TunnelEnvironment,
    src: &SourceSpec,
) -> Result<f64, PweError> {
    let slice = Solver::default().solve(env, src)?;
    let last = slice.n_range() - 1;
    let z = env.range_at(last);
    let exact: Vec<Complex64> = (0..env.n_height())
        .map(|i| analytic_gaussian_beam(env.k0(), src, z, env.height_at(i)))
        .collect();
    Ok(rel_l2(slice.column(last), &exact))
}

pub fn validate_free_space_beam() -> Result<ValidationReport, PweError> {
    let (env, src) = free_space_case();
    let err = free_space_beam_error(&env, &src)?;
    Ok(ValidationReport {
        case: "free-space-beam".into(),
        metric: "relative_l2_error".into(),
        value: err,
        threshold: "< 0.01".into(),
        passed: err < 0.01,
        details: vec![("range_m".into(), env.length_m)],
    })
}

fn final_column(env: &TunnelEnvironment, src: &SourceSpec) -> Result<Vec<Complex64>, PweError> {
    let slice = Solver::default().solve(env, src)?;
    Ok(slice.column(slice.n_range() - 1).to_vec())
}

/// Observed order `log2(|u_h - u_{h/2}| / |u_{h/2} - u_{h/4}|)` for the range step.
pub fn range_step_order(base: &TunnelEnvironment, src: &SourceSpec) -> Result<f64, PweError> {
    let cols: Vec<Vec<Complex64>> = [1.0, 0.5, 0.25]
        .iter()
        .map(|f| {
            let env = TunnelEnvironment {
                delta_range_m: base.delta_range_m * f,
                ..base.clone()
            };
            final_column(&env, src)
        })
        .collect::<Result<_, _>>()?;
    Ok(observed_order(&cols[0], &cols[1], &cols[2]))
}

/// Same study on the transverse step; finer grids are sampled on the coarse points.
pub fn height_step_order(base: &TunnelEnvironment, src: &SourceSpec) -> Result<f64, PweError> {
    let mut cols = Vec::new();
    for (k, f) in [1.0, 0.5, 0.25].iter().enumerate() {
        let env = TunnelEnvironment {
            delta_height_m: base.delta_height_m * f,
            ..base.clone()
        };
        let stride = 1 << k;
        cols.push(final_column(&env, src)?.into_iter().step_by(stride).collect::<Vec<_>>());
    }
    Ok(observed_order(&cols[0], &cols[1], &cols[2]))
}

fn observed_order(coarse: &[Complex64], mid: &[Complex64], fine: &[Complex64]) -> f64 {
    let diff = |a: &[Complex64], b: &[Complex64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
    };
    (diff(coarse, mid) / diff(mid, fine)).log2()
}

pub fn validate_convergence() -> Result<ValidationReport, PweError> {
    let (env, src) = free_space_case();
    let range_env = TunnelEnvironment {
        delta_range_m: 2.0,
        ..env.clone()
    };
    let height_env = TunnelEnvironment {
        delta_range_m: 0.25,
        delta_height_m: 0.5,
        ..env
    };
    let p_range = range_step_order(&range_env, &src)?;
    let p_height = height_step_order(&height_env, &src)?;
    let ok = |p: f64| (1.7..=2.3).contains(&p);
    Ok(ValidationReport {
        case: "convergence".into(),
        metric: "observed_order_min".into(),
        value: p_range.min(p_height),
        threshold: "[1.7, 2.3]".into(),
        passed: ok(p_range) && ok(p_height),
        details: vec![
            ("order_range_step".into(), p_range),
            ("order_height_step".into(), p_height),
        ],
    })
}

/// Largest relative change of the column energy over any single step with
/// lossless, reflecting walls.
pub fn max_energy_drift(env: &TunnelEnvironment, src: &SourceSpec) -> Result<f64, PweError> {
    let solver = Solver {
        closure: WallClosure::Neumann,
        ..Default::default()
    };
    let slice = solver.solve(env, src)?;
    let energy = |iz: usize| slice.column_energy(iz);
    let mut worst = 0.0f64;
    let mut prev = energy(0);
    for iz in 1..slice.n_range() {
        let e = energy(iz);
        worst = worst.max(((e - prev) / prev).abs());
        prev = e;
    }
    Ok(worst)
}

pub fn validate_energy() -> Result<ValidationReport, PweError> {
    let env = TunnelEnvironment {
        sigma_s_per_m: 0.0,
        ..TunnelEnvironment::default()
    };
    let src = SourceSpec {
        height_m: 10.0,
        beam_waist_m: 1.0,
        amplitude: 1.0,
    };
    let drift = max_energy_drift(&env, &src)?;
    Ok(ValidationReport {
        case: "energy".into(),
        metric: "max_relative_energy_change_per_step".into(),
        value: drift,
        threshold: "<= 1e-10".into(),
        passed: drift <= 1e-10,
        details: vec![],
    })
}
