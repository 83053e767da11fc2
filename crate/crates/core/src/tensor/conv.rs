//! im2col + GEMM kernels behind `conv2d`.

use super::{shape_err, TensorError};

/// Cap on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self, TensorError> {
        let op = "conv2d";
        let (&[n, c, h, w], &[o, wc, kh, kw]) = (input, weight) else {
            return Err(shape_err(
                op,
                format!("input {input:?} and weight {weight:?} must both be 4-d"),
            ));
        };
        if wc != c {
            return Err(shape_err(
                op,
                format!("weight expects {wc} input channels, input has {c}"),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(shape_err(op, "stride and kernel sizes must be positive"));
        }
        let (ph, pw) = padding;
        let span_h = h + 2 * ph;
        let span_w = w + 2 * pw;
        if span_h < kh || span_w < kw {
            return Err(shape_err(
                op,
                format!("kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"),
            ));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(TensorError::NonIntegerOutput {
                op,
                detail: format!(
                    "({h}+2*{ph}-{kh})/{stride} or ({w}+2*{pw}-{kw})/{stride} is fractional"
                ),
            });
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            ph,
            pw,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    /// Output-row tiles `[r0, r1)` whose im2col buffer fits the budget.
    fn row_tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = (COLS_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho);
        let ho = self.ho;
        (0..ho).step_by(rows).map(move |r0| (r0, (r0 + rows).min(ho)))
    }
}

/// `c = a * b + beta * c` with explicit strides (row, column) for every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, cols: &mut [f64]) {
    let t = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * t..(row + 1) * t];
                let mut idx = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst[idx..idx + g.wo].fill(0.0);
                        idx += g.wo;
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        dst[idx] = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [f64]) {
    let t = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * t..(row + 1) * t];
                let mut idx = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        idx += g.wo;
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (hw_in, hw_out, k) = (g.c * g.h * g.w, g.ho * g.wo, g.k());
    let mut out = vec![0.0; g.n * g.o * hw_out];
    let mut cols = Vec::new();
    for b in 0..g.n {
        let xb = &x[b * hw_in..(b + 1) * hw_in];
        let ob = &mut out[b * g.o * hw_out..(b + 1) * g.o * hw_out];
        if g.is_pointwise() {
            gemm(g.o, k, hw_out, weight, (k, 1), xb, (hw_out, 1), 0.0, ob, (hw_out, 1));
        } else {
            for (r0, r1) in g.row_tiles() {
                let t = (r1 - r0) * g.wo;
                cols.resize(k * t, 0.0);
                im2col(xb, g, r0, r1, &mut cols);
                gemm(
                    g.o,
                    k,
                    t,
                    weight,
                    (k, 1),
                    &cols,
                    (t, 1),
                    0.0,
                    &mut ob[r0 * g.wo..],
                    (hw_out, 1),
                );
            }
        }
        if let Some(bias) = bias {
            for (plane, &bv) in ob.chunks_mut(hw_out).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_w, need_b) = need;
    let (hw_in, hw_out, k) = (g.c * g.h * g.w, g.ho * g.wo, g.k());
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; weight.len()]);
    let db = need_b.then(|| {
        let mut db = vec![0.0; g.o];
        for b in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * g.o + o) * hw_out;
                *acc += dout[start..start + hw_out].iter().sum::<f64>();
            }
        }
        db
    });
    if !need_x && !need_w {
        return ConvGrads {
            input: None,
            weight: None,
            bias: db,
        };
    }
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b in 0..g.n {
        let xb = &x[b * hw_in..(b + 1) * hw_in];
        let gb = &dout[b * g.o * hw_out..(b + 1) * g.o * hw_out];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(g.o, hw_out, k, gb, (hw_out, 1), xb, (1, hw_out), 1.0, dw, (k, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * hw_in..(b + 1) * hw_in];
                gemm(k, g.o, hw_out, weight, (1, k), gb, (hw_out, 1), 1.0, dxb, (hw_out, 1));
            }
            continue;
        }
        for (r0, r1) in g.row_tiles() {
            let t = (r1 - r0) * g.wo;
            let gt = &gb[r0 * g.wo..];
            if let Some(dw) = dw.as_mut() {
                cols.resize(k * t, 0.0);
                im2col(xb, g, r0, r1, &mut cols);
                gemm(g.o, t, k, gt, (hw_out, 1), &cols, (1, t), 1.0, dw, (k, 1));
            }
            if let Some(dx) = dx.as_mut() {
                dcols.resize(k * t, 0.0);
                gemm(k, g.o, t, weight, (1, k), gt, (hw_out, 1), 0.0, &mut dcols, (t, 1));
                col2im(&dcols, g, r0, r1, &mut dx[b * hw_in..(b + 1) * hw_in]);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
