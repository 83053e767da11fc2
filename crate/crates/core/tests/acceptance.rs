//! End-to-end acceptance checks. Each test prints one `ACCEPTANCE` line with
//! its verdict; run with `--nocapture` to see them. Tests hold a shared lock
//! so wall-clock budgets are measured without contention.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunnelwave::dataset::{
    encode_dataset, generate_dataset, inference_line_input, input_tensor, keyed_rng, progressive_rho, row_count,
    sample_rows, write_dataset, DatasetConfig, ProgressiveSchedule, SparseSample,
};
use tunnelwave::losses::{
    adversarial_d, adversarial_g, loss_boundary, loss_l1, loss_mse, loss_nonneg, loss_smooth, loss_ssim,
};
use tunnelwave::model::spectral::estimate_sigma;
use tunnelwave::model::{adaptive_depth, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode};
use tunnelwave::pwe::{self, validation, SourceSpec, TunnelEnvironment};
use tunnelwave::tensor::{check_tape_fn, Tape, Tensor, TensorError, Var};
use tunnelwave::trainer::{evaluate, gamma_csv, gamma_sweep, train, train_step, TrainConfig, TrainOutput, TrainState};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {id:>2} {status} {name}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn criterion_01_free_space_beam() {
    let _g = serial();
    let start = Instant::now();
    let report = validation::validate_free_space_beam().unwrap();
    let elapsed = start.elapsed();
    let pass = report.value < 0.01 && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "PWE analytic Gaussian beam over 500 m",
        pass,
        &format!("rel L2 error {:.3e} (< 1e-2), {:.2} s (< 30 s)", report.value, secs(elapsed)),
    );
    assert!(pass);
}

#[test]
fn criterion_02_convergence_and_energy() {
    let _g = serial();
    let start = Instant::now();
    let conv = validation::validate_convergence().unwrap();
    let energy = validation::validate_energy().unwrap();
    let elapsed = start.elapsed();
    let orders: Vec<f64> = conv.details.iter().map(|(_, v)| *v).collect();
    let in_band = orders.iter().all(|p| (1.7..=2.3).contains(p));
    let pass = in_band && energy.value <= 1e-10 && elapsed < Duration::from_secs(120);
    verdict(
        2,
        "PWE self-convergence order and lossless energy",
        pass,
        &format!(
            "orders {:?} in [1.7, 2.3], max energy drift/step {:.2e} (<= 1e-10), {:.2} s (< 120 s)",
            orders,
            energy.value,
            secs(elapsed)
        ),
    );
    assert!(pass);
}

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn project(t: &mut Tape, y: Var, r: &Tensor) -> Result<Var, TensorError> {
    let r = t.constant(r.clone());
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

/// One case per differentiable operation and loss term, on shapes drawn from `rng`.
fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Build)> {
    let n = rng.gen_range(1..3);
    let c = rng.gen_range(1..4);
    let h = 2 * rng.gen_range(2..4);
    let w = 2 * rng.gen_range(2..5);
    let shape = [n, c, h, w];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let pos = rand_tensor(rng, &shape, 0.5, 2.0);
    let r_same = rand_tensor(rng, &shape, -1.0, 1.0);
    let mut cases: Vec<(&'static str, Tensor, Build)> = Vec::new();

    macro_rules! unary {
        ($name:expr, $input:expr, |$t:ident, $v:ident| $body:expr) => {{
            let r = rand_tensor(rng, &[1], 0.0, 1.0);
            let _ = r;
            let rr = r_same.clone();
            cases.push((
                $name,
                $input.clone(),
                Box::new(move |$t: &mut Tape, $v: Var| {
                    let y = $body?;
                    if $t.shape(y) == rr.shape() {
                        project($t, y, &rr)
                    } else {
                        let s = $t.shape(y).to_vec();
                        let r = Tensor::from_fn(&s, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
                        project($t, y, &r)
                    }
                }),
            ));
        }};
    }

    let other = pos.clone();
    unary!("add", x, |t, v| {
        let o = t.constant(other.clone());
        t.add(v, o)
    });
    let other = pos.clone();
    unary!("sub", x, |t, v| {
        let o = t.constant(other.clone());
        t.sub(o, v)
    });
    let other = pos.clone();
    unary!("mul", x, |t, v| {
        let o = t.constant(other.clone());
        t.mul(v, o)
    });
    let other = pos.clone();
    unary!("div (numerator)", x, |t, v| {
        let o = t.constant(other.clone());
        t.div(v, o)
    });
    let other = x.clone();
    unary!("div (denominator)", pos, |t, v| {
        let o = t.constant(other.clone());
        t.div(o, v)
    });
    unary!("scale", x, |t, v| Ok::<Var, TensorError>(t.scale(v, -2.5)));
    unary!("add_scalar", x, |t, v| Ok::<Var, TensorError>(t.add_scalar(v, 0.7)));
    unary!("square", x, |t, v| Ok::<Var, TensorError>(t.square(v)));
    unary!("abs", x, |t, v| Ok::<Var, TensorError>(t.abs(v)));
    unary!("relu", x, |t, v| Ok::<Var, TensorError>(t.relu(v)));
    unary!("leaky_relu", x, |t, v| Ok::<Var, TensorError>(t.leaky_relu(v, 0.2)));
    unary!("sigmoid", x, |t, v| Ok::<Var, TensorError>(t.sigmoid(v)));
    unary!("mean", x, |t, v| Ok::<Var, TensorError>(t.mean(v)));
    unary!("sum", x, |t, v| Ok::<Var, TensorError>(t.sum(v)));
    unary!("reshape", x, |t, v| t.reshape(v, &[n * c, h * w]));
    let k = rand_tensor(rng, &[3, c, 3, 3], -1.0, 1.0);
    let b = rand_tensor(rng, &[3], -1.0, 1.0);
    let (kc, bc) = (k.clone(), b.clone());
    unary!("conv2d 3x3 (input)", x, |t, v| {
        let k = t.constant(kc.clone());
        let b = t.constant(bc.clone());
        t.conv2d(v, k, Some(b), 1, (1, 1))
    });
    let k17 = rand_tensor(rng, &[2, c, 1, 7], -1.0, 1.0);
    let xc = x.clone();
    unary!("conv2d 1x7 (weight)", k17, |t, v| {
        let x = t.constant(xc.clone());
        t.conv2d(x, v, None, 1, (0, 3))
    });
    let k4 = rand_tensor(rng, &[2, c, 4, 4], -1.0, 1.0);
    let k4c = k4.clone();
    unary!("conv2d 4x4 stride 2 (input)", x, |t, v| {
        let k = t.constant(k4c.clone());
        t.conv2d(v, k, None, 2, (1, 1))
    });
    let xc = x.clone();
    let kc = k.clone();
    unary!("conv2d (bias)", b, |t, v| {
        let x = t.constant(xc.clone());
        let k = t.constant(kc.clone());
        t.conv2d(x, k, Some(v), 1, (1, 1))
    });
    unary!("upsample_nearest2x", x, |t, v| t.upsample_nearest2x(v));
    unary!("global_avg_pool", x, |t, v| t.global_avg_pool(v));
    let feats = rand_tensor(rng, &[n, 2 * c], -1.0, 1.0);
    let dw = rand_tensor(rng, &[3, 2 * c], -1.0, 1.0);
    let db = rand_tensor(rng, &[3], -1.0, 1.0);
    let (dwc, dbc) = (dw.clone(), db.clone());
    unary!("dense (input)", feats, |t, v| {
        let w = t.constant(dwc.clone());
        let b = t.constant(dbc.clone());
        t.dense(v, w, Some(b))
    });
    let fc = feats.clone();
    unary!("dense (weight)", dw, |t, v| {
        let f = t.constant(fc.clone());
        t.dense(f, v, None)
    });
    let other = pos.clone();
    unary!("concat_channels", x, |t, v| {
        let o = t.constant(other.clone());
        t.concat_channels(&[o, v])
    });
    let gates = rand_tensor(rng, &[n, c], 0.0, 1.0);
    let gc = gates.clone();
    unary!("channel_scale (features)", x, |t, v| {
        let a = t.constant(gc.clone());
        t.channel_scale(v, a)
    });
    let xc = x.clone();
    unary!("channel_scale (gates)", gates, |t, v| {
        let f = t.constant(xc.clone());
        t.channel_scale(f, v)
    });
    let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
    let beta = rand_tensor(rng, &[c], -0.5, 0.5);
    let (gmc, btc) = (gamma.clone(), beta.clone());
    unary!("batch_norm (batch stats)", x, |t, v| {
        let g = t.constant(gmc.clone());
        let b = t.constant(btc.clone());
        Ok::<Var, TensorError>(t.batch_norm(v, g, b, None, 1e-5)?.0)
    });
    let (gmc, btc) = (gamma.clone(), beta.clone());
    let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
    unary!("batch_norm (running stats)", x, |t, v| {
        let g = t.constant(gmc.clone());
        let b = t.constant(btc.clone());
        Ok::<Var, TensorError>(t.batch_norm(v, g, b, Some((&mean, &var)), 1e-5)?.0)
    });
    let xc = x.clone();
    let btc = beta.clone();
    unary!("batch_norm (scale)", gamma, |t, v| {
        let x = t.constant(xc.clone());
        let b = t.constant(btc.clone());
        Ok::<Var, TensorError>(t.batch_norm(x, v, b, None, 1e-5)?.0)
    });
    unary!("select_rows", x, |t, v| t.select_rows(v, &[0, h - 1, 1]));
    unary!("diff_rows", x, |t, v| t.diff_rows(v));
    unary!("diff_cols", x, |t, v| t.diff_cols(v));
    unary!("reflect_pad", x, |t, v| t.reflect_pad(v, h - 1, w - 1));
    unary!("crop", x, |t, v| t.crop(v, h - 1, w - 2));
    let sw = rand_tensor(rng, &[3, c, 2, 2], -1.0, 1.0);
    let cols = c * 4;
    let u = [0.6, -0.48, 0.64];
    let mut vv: Vec<f64> = (0..cols).map(|j| (0..3).map(|i| u[i] * sw.data()[i * cols + j]).sum()).collect();
    let nv = vv.iter().map(|a| a * a).sum::<f64>().sqrt();
    vv.iter_mut().for_each(|a| *a /= nv);
    unary!("spectral_normalize", sw, |t, v| Ok::<Var, TensorError>(t.spectral_normalize(v, &u, &vv)?.0));

    let img_shape = [n, 1, 12, 13];
    let pred = rand_tensor(rng, &img_shape, 0.05, 0.95);
    let target = rand_tensor(rng, &img_shape, 0.0, 1.0);
    let signed = rand_tensor(rng, &img_shape, -1.0, 1.0);
    let scores = rand_tensor(rng, &[n, 1, 2, 3], -1.0, 2.0);
    let real_scores = rand_tensor(rng, &[n, 1, 2, 3], -1.0, 2.0);
    cases.push(("loss: nonneg", signed.clone(), Box::new(|t, v| Ok(loss_nonneg(t, v)))));
    cases.push(("loss: boundary", signed.clone(), Box::new(loss_boundary)));
    cases.push(("loss: smooth", signed, Box::new(loss_smooth)));
    for (name, f) in [
        ("loss: l1", loss_l1 as fn(&mut Tape, Var, Var) -> Result<Var, TensorError>),
        ("loss: mse", loss_mse),
        ("loss: ssim", loss_ssim),
    ] {
        let tc = target.clone();
        cases.push((
            name,
            pred.clone(),
            Box::new(move |t, v| {
                let y = t.constant(tc.clone());
                f(t, v, y)
            }),
        ));
    }
    cases.push(("loss: adversarial G", scores.clone(), Box::new(|t, v| Ok(adversarial_g(t, v)))));
    cases.push((
        "loss: adversarial D",
        scores,
        Box::new(move |t, v| {
            let r = t.constant(real_scores.clone());
            adversarial_d(t, r, v)
        }),
    ));
    cases
}

#[test]
fn criterion_03_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let mut total = 0;
    for round in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 + round);
        for (name, x, build) in gradient_cases(&mut rng) {
            let report = check_tape_fn(build, &x, 200).unwrap();
            total += 1;
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, name);
            }
            if !report.passes(1e-5) {
                failures.push(format!("{name} ({:.2e})", report.max_rel_error));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        3,
        "finite-difference gradient suite",
        pass,
        &format!(
            "{total} checks, worst rel error {:.2e} ({}), failures {:?}, {:.2} s (< 120 s)",
            worst.0,
            worst.1,
            failures,
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_architecture() {
    let _g = serial();
    let depths = [
        adaptive_depth(101, 1001).unwrap(),
        adaptive_depth(32, 32).unwrap(),
        adaptive_depth(4096, 4096).unwrap(),
    ];
    let g = GeneratorConfig::for_image(101, 1001).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
    let layout_ok = g.encoder_channels == [64, 128, 256]
        && g.bottleneck_channels == [256, 256]
        && g.decoder_channels == [256, 128, 64]
        && d.channel_progression()[1..] == [32, 64, 128, 1];

    let mut gen = Generator::build(GeneratorConfig::for_image(32, 32).unwrap(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut min_out = f64::INFINITY;
    let mut checked = 0;
    for chunk in 0..20 {
        let scale = [1.0, 10.0, 100.0, 0.01][chunk % 4];
        let input = Tensor::from_fn(&[50, 2, 32, 32], |_| scale * rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let mode = if chunk % 2 == 0 { Mode::Eval } else { Mode::Train };
        let y = gen.forward(&mut tape, x, mode, false).unwrap();
        min_out = tape.value(y).data().iter().copied().fold(min_out, f64::min);
        checked += 50;
    }
    let pass = depths == [4, 3, 5] && layout_ok && min_out >= 0.0 && checked == 1000;
    verdict(
        4,
        "architecture conformance",
        pass,
        &format!(
            "depths {depths:?} (want [4, 3, 5]), channel layout ok {layout_ok}, min output over {checked} inputs {min_out:.3e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_spectral_normalization() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut oracle_err = 0.0f64;
    for _ in 0..100 {
        let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = DMatrix::from_row_slice(8, 8, &w).singular_values().max();
        oracle_err = oracle_err.max((estimate_sigma(&w, 8, 8, 50) - exact).abs() / exact);
    }

    let ds = generate_dataset(&DatasetConfig {
        n_samples: 8,
        length_m: 20.0,
        height_m: 7.5,
        ..DatasetConfig::desk(8, 5)
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg.clone(), ds.height, ds.width, ds.floor_db).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut steps = 0;
    'outer: for epoch in 0.. {
        let rho = progressive_rho(epoch, &cfg.resolved_schedule());
        let samples: Vec<SparseSample> = ds
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let rows = sample_rows(rho, ds.height, e.source_row, &mut keyed_rng(1, &[epoch as u64, i as u64]));
                e.sparse(&rows).unwrap()
            })
            .collect();
        for chunk in samples.chunks(cfg.batch_size) {
            let batch: Vec<&SparseSample> = chunk.iter().collect();
            train_step(&mut state, &batch, true).unwrap();
            for s in state.discriminator.normalized_sigmas(50) {
                lo = lo.min(s);
                hi = hi.max(s);
            }
            steps += 1;
            if steps == 50 {
                break 'outer;
            }
        }
    }
    let pass = oracle_err < 1e-3 && lo >= 0.95 && hi <= 1.05;
    verdict(
        5,
        "spectral normalization",
        pass,
        &format!(
            "post-normalization sigma range [{lo:.4}, {hi:.4}] over {steps} steps (want [0.95, 1.05]); 8x8 SVD oracle max rel error {oracle_err:.2e} (< 1e-3)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_schedule() {
    let _g = serial();
    let sched = ProgressiveSchedule::default();
    let endpoints = progressive_rho(0, &sched) == sched.rho_init && progressive_rho(sched.t_prog, &sched) == sched.rho_final;
    let ds = generate_dataset(&DatasetConfig {
        length_m: 20.0,
        ..DatasetConfig::desk(6, 2)
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &ds, &TrainOutput::default()).unwrap();
    let mut mismatches = 0;
    let mut counts = Vec::new();
    for e in &out.epochs {
        let want = row_count(progressive_rho(e.epoch, &cfg.resolved_schedule()), ds.height);
        mismatches += e.row_counts.iter().filter(|&&k| k != want).count();
        counts.push(want);
    }
    let pass = endpoints && mismatches == 0;
    verdict(
        6,
        "schedule conformance",
        pass,
        &format!("endpoints exact {endpoints}; per-epoch row counts {counts:?}, {mismatches} mismatching masks"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_desk_scale_learning() {
    let _g = serial();
    let start = Instant::now();
    let ds = generate_dataset(&DatasetConfig::desk(8, 7)).unwrap();
    assert_eq!((ds.height, ds.width), (32, 128));
    let cfg = TrainConfig::default();
    let mut out = train(&cfg, &ds, &TrainOutput::default()).unwrap();
    let (report, _) = evaluate(&mut out.state.generator, &ds, &out.train_indices, 0, 0).unwrap();
    let elapsed = start.elapsed();
    let first = out.epochs.first().unwrap().mean_generator_loss;
    let last = out.epochs.last().unwrap().mean_generator_loss;
    let err = report.rel_error_percent.mean;
    let pass = err < 5.0 && last < 0.25 * first && elapsed < Duration::from_secs(1800);
    verdict(
        7,
        "desk-scale learning signal",
        pass,
        &format!(
            "train rel error {err:.3}% (< 5%), loss epoch 1 {first:.3} -> epoch {} {last:.3} (ratio {:.3} < 0.25), {:.0} s (< 1800 s)",
            out.epochs.len(),
            last / first,
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_gamma_sweep() {
    let _g = serial();
    let ds = generate_dataset(&DatasetConfig::desk(8, 7)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let rows = gamma_sweep(&cfg, &ds, &[1.0, 5.0, 10.0, 20.0]).unwrap();
    let csv = gamma_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let pass = lines.len() == 5 && lines[0] == "gamma,val_rel_error_percent" && rows.iter().all(|r| r.val_rel_error_percent.is_finite());
    verdict(8, "gamma sweep harness", pass, &format!("{} data rows: {}", lines.len() - 1, lines[1..].join(" | ")));
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_09_inference_speedup() {
    let _g = serial();
    let env = TunnelEnvironment::default();
    let src = SourceSpec {
        height_m: 25.0,
        beam_waist_m: 2.0,
        amplitude: 1.0,
    };
    let mut gen = Generator::build(GeneratorConfig::for_image(env.n_height(), env.n_range()).unwrap(), 0).unwrap();
    let target = pwe::to_field_image(&pwe::solve(&env, &src).unwrap(), -60.0).unwrap();
    let row = env.nearest_row(25.0).unwrap();
    let sample = inference_line_input(target.row(row), row, env.n_height(), env.n_range()).unwrap();
    let input = input_tensor(&[&sample]);
    let gen_times: Vec<f64> = (0..3)
        .map(|_| {
            let t = Instant::now();
            gen.infer(&input).unwrap();
            secs(t.elapsed())
        })
        .collect();
    let pwe_times: Vec<f64> = (0..9)
        .map(|_| {
            let t = Instant::now();
            pwe::solve(&env, &src).unwrap();
            secs(t.elapsed())
        })
        .collect();
    let (g, p) = (median(gen_times), median(pwe_times));
    let speedup = p / g;
    let pass = speedup >= 10.0;
    verdict(
        9,
        "generator vs solver speed at 101x1001",
        pass,
        &format!("generator {g:.4} s, solver {p:.6} s, speedup {speedup:.2e} (want >= 10)"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::desk(8, 7);
    let a = dir.path().join("a.twd");
    let b = dir.path().join("b.twd");
    write_dataset(&a, &generate_dataset(&cfg).unwrap()).unwrap();
    write_dataset(&b, &generate_dataset(&cfg).unwrap()).unwrap();
    let data_same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!(encode_dataset(&ds).unwrap(), std::fs::read(&a).unwrap());
    let train_cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    for name in ["r1", "r2"] {
        train(&train_cfg, &ds, &TrainOutput { dir: Some(dir.path().join(name)) }).unwrap();
    }
    let ckpt_same = std::fs::read(dir.path().join("r1/final.twc")).unwrap()
        == std::fs::read(dir.path().join("r2/final.twc")).unwrap();
    let pass = data_same && ckpt_same;
    verdict(
        10,
        "determinism",
        pass,
        &format!("dataset files identical {data_same}, checkpoints identical {ckpt_same}"),
    );
    assert!(pass);
}
