mod common;

use common::metric_oracle::*;
use common::{rng, uniform};
use ignet_core::metrics::{
    evaluate, metric_ag, metric_cc, metric_en, metric_qabf, metric_scd, metric_ssim, qabf_plateau, MetricReport,
    PairScores, Plane, CSV_HEADER, QABF_GAMMA_A, QABF_GAMMA_G, QABF_KAPPA_A, QABF_KAPPA_G, QABF_SIGMA_A,
    QABF_SIGMA_G,
};
use ignet_core::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn plane(t: &Tensor) -> Plane {
    Plane::from_tensor(t).unwrap()
}

fn images(seed: u64) -> [Tensor; 3] {
    let mut r = rng(seed);
    [0, 1, 2].map(|_| uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn metrics_match_brute_force(seed: u64) {
        let [ir, vis, f] = images(seed);
        let (a, b, c) = (plane(&ir), plane(&vis), plane(&f));
        let s = evaluate(&ir, &vis, &f).unwrap();
        prop_assert!((s.en - oracle_en(&c)).abs() < TOL);
        prop_assert!((s.ag - oracle_ag(&c)).abs() < TOL);
        prop_assert!((s.cc - oracle_cc(&a, &b, &c)).abs() < TOL);
        prop_assert!((s.scd - oracle_scd(&a, &b, &c)).abs() < TOL);
        prop_assert!((s.qabf - oracle_qabf(&a, &b, &c)).abs() < TOL);
        let ss = 0.5 * (oracle_ssim_pair(&c, &a) + oracle_ssim_pair(&c, &b));
        prop_assert!((s.ssim - ss).abs() < TOL);
    }

    #[test]
    fn scores_stay_in_range(seed: u64) {
        let [ir, vis, f] = images(seed);
        let s = evaluate(&ir, &vis, &f).unwrap();
        prop_assert!((0.0..=8.0).contains(&s.en));
        prop_assert!(s.ag >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&s.cc));
        prop_assert!((-2.0..=2.0).contains(&s.scd));
        prop_assert!((0.0..=1.0).contains(&s.qabf));
        prop_assert!((-1.0..=1.0).contains(&s.ssim));
    }

    #[test]
    fn entropy_ignores_pixel_order(seed: u64, shift in 1usize..63) {
        let [_, _, f] = images(seed);
        let mut data = f.data().to_vec();
        data.rotate_left(shift);
        let rolled = Tensor::new([1, 1, 8, 8], data).unwrap();
        prop_assert_eq!(metric_en(&plane(&f)), metric_en(&plane(&rolled)));
    }

    #[test]
    fn correlation_is_affine_invariant(seed: u64, gain in 0.1f64..3.0, offset in -1.0f64..1.0) {
        let [ir, vis, f] = images(seed);
        let (a, b, c) = (plane(&ir), plane(&vis), plane(&f));
        let scaled = Plane::from_fn(8, 8, |y, x| gain * c.data[y * 8 + x] + offset);
        let cc = metric_cc(&a, &b, &c).unwrap();
        prop_assert!((cc - metric_cc(&a, &b, &scaled).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn entropy_anchors() {
    let constant = Plane::from_fn(8, 8, |_, _| 0.37);
    assert_eq!(metric_en(&constant), 0.0);
    let halves = Plane::from_fn(8, 8, |y, _| if y < 4 { 0.0 } else { 1.0 });
    assert_eq!(metric_en(&halves), 1.0);
    let ramp = Plane::from_fn(16, 16, |y, x| (y * 16 + x) as f64 / 255.0);
    assert!((metric_en(&ramp) - 8.0).abs() < 1e-12);
}

#[test]
fn average_gradient_depends_on_order() {
    let ramp = Plane::from_fn(8, 8, |y, x| (y * 8 + x) as f64 / 64.0);
    let mut shuffled = ramp.data.clone();
    shuffled.reverse();
    shuffled.swap(3, 40);
    let other = Plane { data: shuffled, ..ramp.clone() };
    assert_ne!(metric_ag(&ramp), metric_ag(&other));
    assert_eq!(metric_en(&ramp), metric_en(&other));
}

#[test]
fn correlation_anchors() {
    let [ir, _, _] = images(3);
    let a = plane(&ir);
    assert!((metric_cc(&a, &a, &a).unwrap() - 1.0).abs() < 1e-12);

    // zero-mean sources whose sum is the fused image
    let mut r = rng(4);
    let raw: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut r, &[1, 1, 8, 8], -1.0, 1.0)).collect();
    let centred: Vec<Plane> = raw
        .iter()
        .map(|t| {
            let m = t.data().iter().sum::<f64>() / 64.0;
            Plane::from_fn(8, 8, |y, x| t.data()[y * 8 + x] - m)
        })
        .collect();
    let fused = Plane::from_fn(8, 8, |y, x| centred[0].data[y * 8 + x] + centred[1].data[y * 8 + x]);
    let scd = metric_scd(&centred[0], &centred[1], &fused).unwrap();
    assert!((scd - 2.0).abs() < TOL, "{scd}");
}

#[test]
fn qabf_plateau_closed_form() {
    let expected = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (1.0 - QABF_SIGMA_G)).exp()) * QABF_GAMMA_A
        / (1.0 + (QABF_KAPPA_A * (1.0 - QABF_SIGMA_A)).exp());
    assert!((qabf_plateau() - expected).abs() < TOL);
    let [ir, _, _] = images(5);
    let a = plane(&ir);
    let q = metric_qabf(&a, &a, &a).unwrap();
    assert!((q - expected).abs() < TOL, "{q} vs {expected}");
    assert!(metric_ssim(&a, &a, &a).unwrap() > 1.0 - 1e-12);
}

#[test]
fn flat_sources_score_zero_qabf() {
    let flat = Plane::from_fn(8, 8, |_, _| 0.5);
    let [_, _, f] = images(6);
    assert_eq!(metric_qabf(&flat, &flat, &plane(&f)).unwrap(), 0.0);
}

#[test]
fn mismatched_sizes_are_errors() {
    let a = Plane::from_fn(8, 8, |_, _| 0.0);
    let b = Plane::from_fn(8, 7, |_, _| 0.0);
    assert!(metric_cc(&a, &a, &b).is_err());
    assert!(metric_scd(&a, &b, &a).is_err());
    assert!(metric_qabf(&b, &a, &a).is_err());
    assert!(metric_ssim(&a, &a, &b).is_err());
    assert!(Plane::from_tensor(&Tensor::zeros([1, 3, 4, 4])).is_err());
}

#[test]
fn report_rows_and_mean() {
    let pairs: Vec<PairScores> = (0..3)
        .map(|k| {
            let [ir, vis, f] = images(10 + k);
            PairScores {
                pair_id: format!("p{k}"),
                scores: evaluate(&ir, &vis, &f).unwrap(),
            }
        })
        .collect();
    let report = MetricReport::new(pairs.clone());
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(CSV_HEADER, "pair_id,EN,AG,CC,SCD,Qabf,SSIM");
    assert_eq!(lines.len(), 5);
    let mean: Vec<f64> = lines[4].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(lines[4].starts_with("mean,"));
    for (i, m) in mean.iter().enumerate() {
        let avg = pairs.iter().map(|p| p.scores.as_array()[i]).sum::<f64>() / 3.0;
        assert!((m - avg).abs() < 1e-12);
    }
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["pairs"].as_array().unwrap().len(), 3);
    assert!(json["mean"]["Qabf"].is_number());
    assert_eq!(json["pairs"][1]["pair_id"], "p1");
}
