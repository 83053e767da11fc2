use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunnelwave::tensor::{check_tape_fn, Tape, Tensor, TensorError, Var};

const TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `out` with a fixed random tensor to get a scalar with generic gradients.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let r = tape.constant(random(tape.shape(out), seed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn assert_grad(
    build: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>,
    x: &Tensor,
) {
    let report = check_tape_fn(build, x, 400).unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

/// Direct six-loop cross-correlation.
fn conv_reference(
    x: &Tensor,
    w: &Tensor,
    b: Option<&[f64]>,
    stride: usize,
    (ph, pw): (usize, usize),
) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (wd + 2 * pw - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - ph as isize;
                                let ix = (xo * stride + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

fn run_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: (usize, usize)) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_matches_reference_on_5x5_with_3x3() {
    let x = random(&[1, 1, 5, 5], 1);
    let w = random(&[1, 1, 3, 3], 2);
    let got = run_conv(&x, &w, None, 1, (1, 1));
    assert!(got.max_abs_diff(&conv_reference(&x, &w, None, 1, (1, 1))) <= 1e-12);
}

#[test]
fn conv_supports_inception_kernels() {
    let x = random(&[2, 3, 6, 9], 5);
    for (kh, kw) in [(1, 1), (1, 7), (7, 1), (3, 3)] {
        let w = random(&[4, 3, kh, kw], 6);
        let pad = ((kh - 1) / 2, (kw - 1) / 2);
        let got = run_conv(&x, &w, None, 1, pad);
        assert_eq!(got.shape(), &[2, 4, 6, 9]);
        assert!(got.max_abs_diff(&conv_reference(&x, &w, None, 1, pad)) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_nested_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 1usize..9, w in 1usize..9,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, ph in 0usize..2, pw in 0usize..2,
        bias in any::<bool>(), seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * ph >= kh && w + 2 * pw >= kw);
        prop_assume!((h + 2 * ph - kh) % stride == 0 && (w + 2 * pw - kw) % stride == 0);
        let x = random(&[n, c, h, w], seed);
        let wt = random(&[o, c, kh, kw], seed + 1);
        let b = random(&[o], seed + 2);
        let bb = bias.then_some(&b);
        let got = run_conv(&x, &wt, bb, stride, (ph, pw));
        let want = conv_reference(&x, &wt, bb.map(|t| t.data()), stride, (ph, pw));
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn same_leaf_twice_accumulates(seed in 0u64..500) {
        let x0 = random(&[3], seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let a = tape.square(x);
        let sa = tape.sum(a);
        let b = tape.sigmoid(x);
        let sb = tape.sum(b);
        let l = tape.add(sa, sb).unwrap();
        tape.backward(l).unwrap();
        let both = tape.grad(x).unwrap();

        let mut ta = Tape::new();
        let xa = ta.leaf(x0.clone(), true);
        let a = ta.square(xa);
        let sa = ta.sum(a);
        ta.backward(sa).unwrap();
        let mut tb = Tape::new();
        let xb = tb.leaf(x0, true);
        let b = tb.sigmoid(xb);
        let sb = tb.sum(b);
        tb.backward(sb).unwrap();
        let ga = ta.grad(xa).unwrap();
        let gb = tb.grad(xb).unwrap();
        for i in 0..3 {
            prop_assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn stride2_halves_and_picks_every_second_pixel() {
    let x = random(&[1, 1, 32, 32], 9);
    let mut w = Tensor::zeros(&[1, 1, 4, 4]);
    w.data_mut()[5] = 1.0; // tap (1,1): with padding 1 it reads pixel (2y, 2x)
    let y = run_conv(&x, &w, None, 2, (1, 1));
    assert_eq!(y.shape(), &[1, 1, 16, 16]);
    for r in 0..16 {
        for c in 0..16 {
            assert_eq!(y.data()[r * 16 + c], x.data()[(2 * r) * 32 + 2 * c]);
        }
    }
}

#[test]
fn odd_size_stride2_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 7, 8]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(
        tape.conv2d(x, w, None, 2, (1, 1)),
        Err(TensorError::NonIntegerOutput { .. })
    ));
}

#[test]
fn down_then_up_keeps_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 8, 8], 0.7));
    let w = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |_| 0.25));
    let d = tape.conv2d(x, w, None, 2, (0, 0)).unwrap();
    let u = tape.upsample_nearest2x(d).unwrap();
    assert_eq!(tape.shape(u), &[1, 1, 8, 8]);
    assert!(tape.value(u).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn conv_gradients() {
    let x = random(&[2, 2, 4, 4], 11);
    let w = random(&[3, 2, 3, 3], 12);
    let b = random(&[3], 13);
    for (stride, k, pad) in [(1, 3, 1), (2, 4, 1)] {
        let wk = random(&[3, 2, k, k], 14 + k as u64);
        let (wc, bc) = (wk.clone(), b.clone());
        assert_grad(
            move |t, v| {
                let w = t.constant(wc.clone());
                let b = t.constant(bc.clone());
                let y = t.conv2d(v, w, Some(b), stride, (pad, pad))?;
                project(t, y, 20)
            },
            &x,
        );
        let xc = x.clone();
        assert_grad(
            move |t, v| {
                let x = t.constant(xc.clone());
                let y = t.conv2d(x, v, None, stride, (pad, pad))?;
                project(t, y, 21)
            },
            &wk,
        );
    }
    let (xc, wc) = (x.clone(), w.clone());
    assert_grad(
        move |t, v| {
            let x = t.constant(xc.clone());
            let w = t.constant(wc.clone());
            let y = t.conv2d(x, w, Some(v), 1, (1, 1))?;
            project(t, y, 22)
        },
        &b,
    );
}

#[test]
fn conv_relu_chain_gradient() {
    let x = random(&[1, 2, 5, 5], 30);
    let w = random(&[2, 2, 3, 3], 31);
    assert_grad(
        move |t, v| {
            let w = t.constant(w.clone());
            let y = t.conv2d(v, w, None, 1, (1, 1))?;
            let r = t.relu(y);
            project(t, r, 32)
        },
        &x,
    );
}

#[test]
fn elementwise_gradients() {
    let x = random(&[2, 3, 2, 2], 40);
    let other = random(&[2, 3, 2, 2], 41).data().iter().map(|v| v + 2.5).collect::<Vec<_>>();
    let other = Tensor::new(vec![2, 3, 2, 2], other).unwrap();
    let o2 = other.clone();
    assert_grad(
        move |t, v| {
            let o = t.constant(o2.clone());
            let a = t.mul(v, o)?;
            let d = t.div(a, o)?;
            let shifted = t.add_scalar(v, 3.0);
            let e = t.div(o, shifted)?;
            let s = t.sub(d, e)?;
            let q = t.square(s);
            let l = t.leaky_relu(q, 0.2);
            let g = t.sigmoid(l);
            let sc = t.scale(g, -1.7);
            let ab = t.abs(v);
            let tot = t.add(sc, ab)?;
            let m = t.mean(tot);
            let p = project(t, tot, 42)?;
            t.add(m, p)
        },
        &x,
    );
}

#[test]
fn structural_gradients() {
    let x = random(&[2, 3, 4, 6], 50);
    assert_grad(
        |t, v| {
            let u = t.upsample_nearest2x(v)?;
            project(t, u, 51)
        },
        &x,
    );
    assert_grad(
        |t, v| {
            let g = t.global_avg_pool(v)?;
            project(t, g, 52)
        },
        &x,
    );
    assert_grad(
        |t, v| {
            let y = t.select_rows(v, &[0, 2, 2, 3])?;
            project(t, y, 53)
        },
        &x,
    );
    assert_grad(
        |t, v| {
            let a = t.diff_rows(v)?;
            let b = t.diff_cols(v)?;
            let pa = project(t, a, 54)?;
            let pb = project(t, b, 55)?;
            t.add(pa, pb)
        },
        &x,
    );
    assert_grad(
        |t, v| {
            let p = t.reflect_pad(v, 3, 5)?;
            let c = t.crop(p, 5, 7)?;
            project(t, c, 56)
        },
        &x,
    );
    assert_grad(
        |t, v| {
            let r = t.reshape(v, &[6, 24])?;
            project(t, r, 57)
        },
        &x,
    );
    let other = random(&[2, 2, 4, 6], 58);
    assert_grad(
        move |t, v| {
            let o = t.leaf(other.clone(), true);
            let c = t.concat_channels(&[o, v, o])?;
            project(t, c, 59)
        },
        &x,
    );
}

#[test]
fn dense_and_channel_scale_gradients() {
    let x = random(&[3, 5], 60);
    let w = random(&[4, 5], 61);
    let b = random(&[4], 62);
    let (wc, bc) = (w.clone(), b.clone());
    assert_grad(
        move |t, v| {
            let w = t.constant(wc.clone());
            let b = t.constant(bc.clone());
            let y = t.dense(v, w, Some(b))?;
            project(t, y, 63)
        },
        &x,
    );
    let xc = x.clone();
    assert_grad(
        move |t, v| {
            let x = t.constant(xc.clone());
            let y = t.dense(x, v, None)?;
            project(t, y, 64)
        },
        &w,
    );
    let f = random(&[2, 3, 3, 3], 65);
    let a = random(&[2, 3], 66);
    let ac = a.clone();
    assert_grad(
        move |t, v| {
            let a = t.constant(ac.clone());
            let y = t.channel_scale(v, a)?;
            project(t, y, 67)
        },
        &f,
    );
    assert_grad(
        move |t, v| {
            let f = t.constant(f.clone());
            let y = t.channel_scale(f, v)?;
            project(t, y, 68)
        },
        &a,
    );
}

#[test]
fn batch_norm_gradients() {
    let x = random(&[3, 2, 3, 3], 70);
    let g = random(&[2], 71);
    let b = random(&[2], 72);
    for running in [false, true] {
        let (gc, bc) = (g.clone(), b.clone());
        let build = move |t: &mut Tape, v: Var| {
            let g = t.constant(gc.clone());
            let b = t.constant(bc.clone());
            let stats = running.then_some((&[0.1, -0.2][..], &[0.5, 2.0][..]));
            let (y, _) = t.batch_norm(v, g, b, stats, 1e-5)?;
            project(t, y, 73)
        };
        assert_grad(build, &x);
        let (xc, bc) = (x.clone(), b.clone());
        assert_grad(
            move |t, v| {
                let x = t.constant(xc.clone());
                let b = t.constant(bc.clone());
                let (y, _) = t.batch_norm(x, v, b, None, 1e-5)?;
                project(t, y, 74)
            },
            &g,
        );
    }
}

#[test]
fn spectral_normalize_gradient() {
    let w = random(&[3, 2, 2, 2], 80);
    let u = [0.6, -0.48, 0.64];
    // v = W^T u / |W^T u| keeps u^T W v positive
    let mut v: Vec<f64> = (0..8)
        .map(|j| (0..3).map(|i| u[i] * w.data()[i * 8 + j]).sum())
        .collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= norm);
    assert_grad(
        move |t, x| {
            let (y, _) = t.spectral_normalize(x, &u, &v)?;
            project(t, y, 81)
        },
        &w,
    );
}

#[test]
fn forward_is_deterministic() {
    let x = random(&[2, 3, 8, 8], 90);
    let w = random(&[4, 3, 3, 3], 91);
    let a = run_conv(&x, &w, None, 1, (1, 1));
    let b = run_conv(&x, &w, None, 1, (1, 1));
    assert_eq!(a, b);
}
