use super::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-3)` over checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `analytic` against central differences of `f` at `x`, on at most
/// `max_coords` evenly strided coordinates.
pub fn finite_difference_check(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    max_coords: usize,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let n = x.numel();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for i in (0..n).step_by(stride) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    report
}

/// Checks the tape gradient of the scalar produced by `build` with respect to
/// its single input.
pub fn check_tape_fn(
    build: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>,
    x: &Tensor,
    max_coords: usize,
) -> Result<GradCheckReport, TensorError> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, input)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(input)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let input = tape.leaf(t.clone(), false);
        let out = build(&mut tape, input).expect("build succeeded once");
        tape.value(out).item()
    };
    Ok(finite_difference_check(eval, x, &analytic, max_coords))
}
