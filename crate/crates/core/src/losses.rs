//! Training objectives on tape variables holding `(N, C, H, W)` images.
//!
//! Physics terms penalize negative field values, wall (first/last row)
//! magnitude and first-difference roughness. Content terms are L1, MSE and
//! `1 - SSIM`. Adversarial terms use the least-squares form.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_l1: f64,
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    pub lambda_physics: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_l1: 100.0,
            lambda_mse: 10.0,
            lambda_ssim: 5.0,
            lambda_physics: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_adv: 0.0,
            lambda_l1: 0.0,
            lambda_mse: 0.0,
            lambda_ssim: 0.0,
            lambda_physics: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_l1", self.lambda_l1),
            ("lambda_mse", self.lambda_mse),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_physics", self.lambda_physics),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(format!("{name} must be finite and non-negative, got {v}")),
            None => Ok(()),
        }
    }
}

/// Per-term values of one generator objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub l1: f64,
    pub mse: f64,
    /// `1 - SSIM`.
    pub ssim: f64,
    pub nonneg: f64,
    pub boundary: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,step,adv,l1,mse,ssim,nonneg,boundary,smooth,total";

    pub fn physics(&self) -> f64 {
        self.nonneg + self.boundary + self.smooth
    }

    /// Weighted sum of the stored terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adv
            + w.lambda_l1 * self.l1
            + w.lambda_mse * self.mse
            + w.lambda_ssim * self.ssim
            + w.lambda_physics * self.physics()
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.adv, self.l1, self.mse, self.ssim, self.nonneg, self.boundary, self.smooth, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv,
            self.l1,
            self.mse,
            self.ssim,
            self.nonneg,
            self.boundary,
            self.smooth,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean of `relu(-e)`.
pub fn loss_nonneg(tape: &mut Tape, e: Var) -> Var {
    let neg = tape.scale(e, -1.0);
    let r = tape.relu(neg);
    tape.mean(r)
}

/// Mean over the first and last rows.
pub fn loss_boundary(tape: &mut Tape, e: Var) -> Result<Var, TensorError> {
    let (_, _, h, _) = tape.value(e).dims4("loss_boundary")?;
    let rows: &[usize] = if h == 1 { &[0] } else { &[0, h - 1] };
    let walls = tape.select_rows(e, rows)?;
    Ok(tape.mean(walls))
}

/// `mean|d/dcol| + mean|d/drow|`, forward differences; an axis of length one
/// contributes nothing.
pub fn loss_smooth(tape: &mut Tape, e: Var) -> Result<Var, TensorError> {
    let (_, _, h, w) = tape.value(e).dims4("loss_smooth")?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    if w > 1 {
        let d = tape.diff_cols(e)?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        total = tape.add(total, m)?;
    }
    if h > 1 {
        let d = tape.diff_rows(e)?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// Unweighted sum of the three physics terms, plus their individual values.
pub fn loss_physics(tape: &mut Tape, e: Var) -> Result<(Var, [f64; 3]), TensorError> {
    let n = loss_nonneg(tape, e);
    let b = loss_boundary(tape, e)?;
    let s = loss_smooth(tape, e)?;
    let values = [tape.value(n).item(), tape.value(b).item(), tape.value(s).item()];
    let nb = tape.add(n, b)?;
    Ok((tape.add(nb, s)?, values))
}

pub fn loss_l1(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn loss_mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    let d = tape.sub(pred, target)?;
    let s = tape.square(d);
    Ok(tape.mean(s))
}

/// Normalized 2-D Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean local SSIM over valid window positions of the 11x11 Gaussian window;
/// images smaller than the window use global statistics.
pub fn ssim(tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
    let (n, c, h, w) = tape.value(x).dims4("ssim")?;
    if tape.shape(y) != tape.shape(x) {
        return Err(TensorError::Shape {
            op: "ssim",
            detail: format!("{:?} vs {:?}", tape.shape(x), tape.shape(y)),
        });
    }
    let kernel = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        Tensor::new(
            vec![1, 1, SSIM_WINDOW, SSIM_WINDOW],
            gaussian_window(SSIM_WINDOW, SSIM_SIGMA),
        )?
    } else {
        Tensor::full(&[1, 1, h, w], 1.0 / (h * w) as f64)
    };
    let x = tape.reshape(x, &[n * c, 1, h, w])?;
    let y = tape.reshape(y, &[n * c, 1, h, w])?;
    let k = tape.constant(kernel);
    let filt = |tape: &mut Tape, v: Var| tape.conv2d(v, k, None, 1, (0, 0));
    let mu_x = filt(tape, x)?;
    let mu_y = filt(tape, y)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let e_xx = filt(tape, xx)?;
    let e_yy = filt(tape, yy)?;
    let e_xy = filt(tape, xy)?;
    let mu_x2 = tape.square(mu_x);
    let mu_y2 = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let s_xx = tape.sub(e_xx, mu_x2)?;
    let s_yy = tape.sub(e_yy, mu_y2)?;
    let s_xy = tape.sub(e_xy, mu_xy)?;

    let l_num = tape.scale(mu_xy, 2.0);
    let l_num = tape.add_scalar(l_num, SSIM_C1);
    let c_num = tape.scale(s_xy, 2.0);
    let c_num = tape.add_scalar(c_num, SSIM_C2);
    let l_den = tape.add(mu_x2, mu_y2)?;
    let l_den = tape.add_scalar(l_den, SSIM_C1);
    let c_den = tape.add(s_xx, s_yy)?;
    let c_den = tape.add_scalar(c_den, SSIM_C2);
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `1 - SSIM`.
pub fn loss_ssim(tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
    let s = ssim(tape, x, y)?;
    let neg = tape.scale(s, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `mean (D(fake) - 1)^2`.
pub fn adversarial_g(tape: &mut Tape, fake_scores: Var) -> Var {
    let d = tape.add_scalar(fake_scores, -1.0);
    let s = tape.square(d);
    tape.mean(s)
}

/// `0.5 mean (D(real) - 1)^2 + 0.5 mean D(fake)^2`.
pub fn adversarial_d(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var, TensorError> {
    let real = adversarial_g(tape, real_scores);
    let f = tape.square(fake_scores);
    let fake = tape.mean(f);
    let s = tape.add(real, fake)?;
    Ok(tape.scale(s, 0.5))
}

/// Inputs of the generator objective; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLossInputs {
    pub prediction: Var,
    pub target: Option<Var>,
    pub fake_scores: Option<Var>,
}

/// `adv*L_adv + l1*L_L1 + mse*L_MSE + ssim*L_SSIM + physics*L_physics`.
pub fn total_generator_loss(
    tape: &mut Tape,
    inputs: GeneratorLossInputs,
    weights: &LossWeights,
) -> Result<(Var, LossReport), TensorError> {
    let e = inputs.prediction;
    let mut report = LossReport::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    if let Some(scores) = inputs.fake_scores {
        let adv = adversarial_g(tape, scores);
        report.adv = tape.value(adv).item();
        terms.push((adv, weights.lambda_adv));
    }
    if let Some(t) = inputs.target {
        let l1 = loss_l1(tape, e, t)?;
        let mse = loss_mse(tape, e, t)?;
        let ss = loss_ssim(tape, e, t)?;
        report.l1 = tape.value(l1).item();
        report.mse = tape.value(mse).item();
        report.ssim = tape.value(ss).item();
        terms.push((l1, weights.lambda_l1));
        terms.push((mse, weights.lambda_mse));
        terms.push((ss, weights.lambda_ssim));
    }
    let (phys, [nonneg, boundary, smooth]) = loss_physics(tape, e)?;
    report.nonneg = nonneg;
    report.boundary = boundary;
    report.smooth = smooth;
    terms.push((phys, weights.lambda_physics));

    let mut total = tape.constant(Tensor::scalar(0.0));
    for (v, w) in terms {
        let s = tape.scale(v, w);
        total = tape.add(total, s)?;
    }
    report.total = tape.value(total).item();
    Ok((total, report))
}
