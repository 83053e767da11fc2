use proptest::prelude::*;
use tunnelwave::field::FieldImage;
use tunnelwave::metrics::{
    format_line_rmse, line_profile_compare, mae, offset_align, power_profile_db, rel_error_percent, rmse,
    EvalReport, SampleMetrics,
};
use tunnelwave::pwe::{self, SourceSpec, TunnelEnvironment};

#[test]
fn hand_summed_ten_element_example() {
    let p = [0.1, 0.4, 0.35, 0.8, 0.0, 0.9, 0.55, 0.2, 0.65, 0.3];
    let t = [0.2, 0.3, 0.35, 0.6, 0.1, 1.0, 0.5, 0.25, 0.6, 0.0];
    // |diffs| = .1 .1 0 .2 .1 .1 .05 .05 .05 .3 -> sum 1.05
    assert!((mae(&p, &t).unwrap() - 0.105).abs() < 1e-12);
    // squares sum = .01*4 + .04 + .0025*3 + .09 = 0.1775
    assert!((rmse(&p, &t).unwrap() - (0.1775f64 / 10.0).sqrt()).abs() < 1e-12);
    assert!((rmse(&[0.0, 0.0], &[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn relative_error_examples() {
    let y = [0.2, 0.5, 0.9];
    let twice: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    assert!((rel_error_percent(&twice, &y).unwrap() - 100.0).abs() < 1e-12);
    assert!((rel_error_percent(&[0.0; 3], &y).unwrap() - 100.0).abs() < 1e-12);
    assert_eq!(rel_error_percent(&y, &y).unwrap(), 0.0);
    assert!(rel_error_percent(&y, &[0.0; 3]).is_err());
    assert!(mae(&y, &[0.0; 2]).is_err());
}

#[test]
fn line_tables_and_caption() {
    let t = FieldImage::new(3, 4, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
    let p = FieldImage::new(3, 4, (0..12).map(|i| (i as f64 / 12.0 + 0.05).min(1.0)).collect()).unwrap();
    let same = line_profile_compare(&t, &t, &[0, 2]).unwrap();
    assert!(same.iter().all(|l| l.rmse == 0.0 && l.mae == 0.0));
    let one = line_profile_compare(&p, &t, &[1]).unwrap();
    assert_eq!(one[0].rmse, rmse(p.row(1), t.row(1)).unwrap());
    assert!(line_profile_compare(&p, &t, &[3]).is_err());
    assert_eq!(format_line_rmse("Inc-GAN", 0.007238), "Inc-GAN RMSE: 0.007238");
}

#[test]
fn report_schema() {
    let t = FieldImage::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let p = FieldImage::new(2, 2, vec![0.2, 0.5, 0.6, 0.7]).unwrap();
    let report = EvalReport::from_samples(vec![
        SampleMetrics::compute(0, &p, &t).unwrap(),
        SampleMetrics::compute(3, &t, &t).unwrap(),
    ]);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "index,mae,rmse,rel_error_percent");
    assert_eq!(lines.count(), 2);
    assert!((report.mae.mean - 0.025).abs() < 1e-12);
    assert!((report.mae.max - 0.05).abs() < 1e-12);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["samples"].as_array().unwrap().len(), 2);
}

#[test]
fn power_profile_inverts_normalization() {
    let env = TunnelEnvironment {
        length_m: 40.0,
        height_m: 10.0,
        ..TunnelEnvironment::default()
    };
    let src = SourceSpec {
        height_m: 5.0,
        beam_waist_m: 1.0,
        amplitude: 1.0,
    };
    let slice = pwe::solve(&env, &src).unwrap();
    let floor = -60.0;
    let img = pwe::to_field_image(&slice, floor).unwrap();
    let row = 10;
    let db = power_profile_db(&img, row, floor).unwrap();
    let reference = pwe::received_power_line(&slice, 5.0, floor).unwrap();
    let mut checked = 0;
    for (got, want) in db.iter().zip(&reference) {
        if *want > floor {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            checked += 1;
        }
    }
    assert!(checked > 0);
    let edge = FieldImage::new(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(power_profile_db(&edge, 0, floor).unwrap(), vec![0.0, floor]);
}

#[test]
fn offset_alignment_removes_constant_shift() {
    let reference = [-10.0, -12.5, -20.0, -15.0];
    let curve: Vec<f64> = reference.iter().map(|v| v - 7.0).collect();
    let (offset, residual) = offset_align(&curve, &reference).unwrap();
    assert!((offset - 7.0).abs() < 1e-12);
    assert!(residual < 1e-12);
}

fn arrays() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0f64..1.0, n),
            proptest::collection::vec(0.01f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn rmse_dominates_mae((p, t) in arrays()) {
        prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-15);
    }

    #[test]
    fn metrics_ignore_joint_permutations((p, t) in arrays(), rot in 0usize..64) {
        let k = rot % p.len();
        let mut pr = p.clone();
        let mut tr = t.clone();
        pr.rotate_left(k);
        tr.rotate_left(k);
        pr.reverse();
        tr.reverse();
        for f in [mae, rmse, rel_error_percent] {
            let (a, b) = (f(&p, &t).unwrap(), f(&pr, &tr).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn relative_error_is_scale_free((p, t) in arrays(), c in 0.01f64..100.0) {
        let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
        let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
        let (a, b) = (rel_error_percent(&p, &t).unwrap(), rel_error_percent(&ps, &ts).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a));
    }
}
