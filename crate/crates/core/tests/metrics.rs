mod common;

use common::lp::brute_force_transport;
use pianoflow::metrics::*;
use pianoflow::midi::MotionSequence;
use pianoflow::numcore::rng;
use pianoflow::numcore::Tensor;
use proptest::prelude::*;

fn simplex(r: &mut rng::Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn random_costs(r: &mut rng::Rng, k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..k).map(|_| r.random_range(0.0..5.0)).collect()).collect()
}

#[test]
fn transport_matches_vertex_enumeration() {
    let mut r = rng::seeded(1);
    for _ in 0..200 {
        let (a, b) = (simplex(&mut r, 3), simplex(&mut r, 3));
        let cost = random_costs(&mut r, 3);
        let (v, plan) = transport(&a, &b, &cost).unwrap();
        let want = brute_force_transport(&a, &b, &cost);
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
        for i in 0..3 {
            assert!((plan[i].iter().sum::<f64>() - a[i]).abs() < 1e-12);
            assert!(((0..3).map(|k| plan[k][i]).sum::<f64>() - b[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn fitted_mixture_distance_matches_vertex_enumeration() {
    let mut r = rng::seeded(2);
    let make = |r: &mut rng::Rng, shift: f64| {
        let mut x = rng::normal(r, &[90, 2]);
        for i in 0..90 {
            let c = (i % 3) as f64 * 4.0 + shift;
            x.set(i, 0, x.at(i, 0) + c);
        }
        x
    };
    let (ga, gb) = (GmmFit::fit(&make(&mut r, 0.0), 3, 3).unwrap(), GmmFit::fit(&make(&mut r, 1.0), 3, 3).unwrap());
    let cost: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| w2_diag(&ga.means[i], &ga.vars[i], &gb.means[j], &gb.vars[j])).collect())
        .collect();
    let want = brute_force_transport(&ga.weights, &gb.weights, &cost);
    assert!((gmm_distance(&ga, &gb).unwrap() - want).abs() < 1e-9);
}

fn random_plan(r: &mut rng::Rng, a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    // Convex mix of greedy vertex plans over random cell orders.
    let vertex = |r: &mut rng::Rng| {
        let mut cells: Vec<(usize, usize)> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, r.random_range(0..=i));
        }
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut p = vec![vec![0.0; b.len()]; a.len()];
        for (i, j) in cells {
            let q = ra[i].min(rb[j]);
            p[i][j] += q;
            ra[i] -= q;
            rb[j] -= q;
        }
        p
    };
    let lam: f64 = r.random();
    let (p, q) = (vertex(r), vertex(r));
    p.iter()
        .zip(&q)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| lam * u + (1.0 - lam) * v).collect())
        .collect()
}

#[test]
fn optimal_cost_is_below_random_feasible_plans() {
    let mut r = rng::seeded(3);
    let (a, b) = (simplex(&mut r, 3), simplex(&mut r, 4));
    let cost: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.random_range(0.0..5.0)).collect()).collect();
    let (v, _) = transport(&a, &b, &cost).unwrap();
    for _ in 0..1000 {
        let p = random_plan(&mut r, &a, &b);
        let c: f64 = (0..3).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| p[i][j] * cost[i][j]).sum();
        assert!(v <= c + 1e-12);
    }
}

#[test]
fn wgd_of_identical_sets_is_zero() {
    let x = rng::normal(&mut rng::seeded(4), &[120, 10]);
    assert!(wgd(&x, &x, 8, 3, 0).unwrap() <= 1e-6);
}

#[test]
fn wgd_single_component_is_squared_mean_gap() {
    let mut r = rng::seeded(5);
    let a = rng::normal(&mut r, &[600, 3]).map(|v| 0.1 * v);
    let mu = [0.6, -0.8, 1.0];
    let mut b = rng::normal(&mut r, &[600, 3]).map(|v| 0.1 * v);
    for i in 0..600 {
        for (j, m) in mu.iter().enumerate() {
            b.set(i, j, b.at(i, j) + m);
        }
    }
    let want: f64 = mu.iter().map(|m| m * m).sum();
    let got = wgd(&a, &b, 3, 1, 0).unwrap();
    assert!((got - want).abs() < 0.05 * want, "{got} vs {want}");
}

#[test]
fn wgd_needs_enough_samples() {
    let x = Tensor::zeros(&[20, 4]);
    assert!(wgd(&x, &x, 2, 3, 0).is_err());
}

#[test]
fn frechet_is_symmetric_on_fitted_samples() {
    let mut r = rng::seeded(6);
    let a = rng::normal(&mut r, &[200, 5]);
    let b = rng::normal(&mut r, &[150, 5]).map(|v| 2.0 * v + 0.5);
    let (ab, ba) = (frechet_samples(&a, &b).unwrap(), frechet_samples(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9);
    assert!(frechet_samples(&a, &a).unwrap() < 1e-8);
    assert!(ab > 0.0);
    let fit = GaussianFit::fit(&a).unwrap();
    assert!((&fit.cov - fit.cov.transpose()).abs().max() < 1e-9);
}

fn sine(n: usize, hz: f64) -> Tensor {
    Tensor::new(&[n, 1], (0..n).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 30.0).sin()).collect()).unwrap()
}

#[test]
fn fde_sine_fixture() {
    let s = sine(240, 8.0);
    let spec = amplitude_spectrum(&s);
    assert!((spec[0][64] - 1.0).abs() < 1e-9);
    let v = fde(&s, &Tensor::zeros(&[240, 1])).unwrap();
    assert!((v - 0.0125).abs() < 0.0125 * 0.02, "{v}");
    assert_eq!(fde(&s, &s).unwrap(), 0.0);
}

#[test]
fn fde_direct_dft_oracle() {
    let mut r = rng::seeded(7);
    let (a, b) = (rng::normal(&mut r, &[50, 2]), rng::normal(&mut r, &[50, 2]));
    let amp = |x: &Tensor, j: usize, k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for i in 0..50 {
            let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / 50.0;
            re += x.at(i, j) * ang.cos();
            im += x.at(i, j) * ang.sin();
        }
        2.0 * (re * re + im * im).sqrt() / 50.0
    };
    // 50 frames: bin k is at 0.6k Hz, so bins 9..=25 lie above 5 Hz.
    let mut total = 0.0;
    for j in 0..2 {
        for k in 9..=25 {
            total += (amp(&a, j, k) - amp(&b, j, k)).abs();
        }
    }
    assert!((fde(&a, &b).unwrap() - total / 34.0).abs() < 1e-12);
    assert!(fde(&Tensor::zeros(&[11, 1]), &Tensor::zeros(&[11, 1])).is_err());
}

proptest! {
    #[test]
    fn fde_ignores_low_frequencies(seed in any::<u64>()) {
        let x = rng::normal(&mut rng::seeded(seed), &[240, 1]);
        let low = sine(240, 2.0);
        let y = x.zip_map(&low, |a, b| a + b).unwrap();
        prop_assert!(fde(&y, &x).unwrap().abs() < 1e-9);
    }

    #[test]
    fn pd_and_smoothness_are_translation_invariant(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut r = rng::seeded(seed);
        let (p, g) = (rng::normal(&mut r, &[20, 3]), rng::normal(&mut r, &[20, 3]));
        let (ps, gs) = (p.map(|v| v + c), g.map(|v| v + c));
        prop_assert!((pd(&p, &g).unwrap() - pd(&ps, &gs).unwrap()).abs() < 1e-9);
        prop_assert!((smoothness(&p, &g).unwrap() - smoothness(&ps, &gs).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn pd_matches_direct_recomputation() {
    let mut r = rng::seeded(8);
    let (p, g) = (rng::normal(&mut r, &[30, 3]), rng::normal(&mut r, &[30, 3]));
    let mut s = 0.0;
    for n in 0..30 {
        let dx = p.at(n, 0) - g.at(n, 0);
        let dy = p.at(n, 1) - g.at(n, 1);
        let dz = p.at(n, 2) - g.at(n, 2);
        s += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    assert!((pd(&p, &g).unwrap() - s / 30.0).abs() < 1e-12);
}

#[test]
fn smoothness_closed_forms() {
    let d = 5;
    let gt = rng::normal(&mut rng::seeded(9), &[40, d]);
    assert_eq!(smoothness(&gt, &gt).unwrap(), 0.0);
    let ramp = Tensor::new(&[40, d], (0..40 * d).map(|i| gt.data()[i] + 0.3 * (i / d) as f64).collect()).unwrap();
    assert!(smoothness(&ramp, &gt).unwrap() < 1e-12);
    let quad = Tensor::new(
        &[40, d],
        (0..40 * d).map(|i| gt.data()[i] + ((i / d) as f64).powi(2) / 2.0).collect(),
    )
    .unwrap();
    assert!((smoothness(&quad, &gt).unwrap() - (d as f64).sqrt()).abs() < 1e-9);
    assert!(smoothness(&Tensor::zeros(&[2, 1]), &Tensor::zeros(&[2, 1])).is_err());
}

fn motion(r: &mut rng::Rng, n: usize) -> MotionSequence {
    MotionSequence::new(rng::normal(r, &[n, 6]), rng::normal(r, &[n, 96])).unwrap()
}

#[test]
fn identical_sequences_report_zero_errors() {
    let m = motion(&mut rng::seeded(10), 600);
    let rep = windowed_eval(&m, &m, &EvalOptions::default()).unwrap();
    assert_eq!(rep.windows, 4);
    assert!(!rep.fallback);
    assert_eq!((rep.pd_left, rep.pd_right, rep.smooth_left, rep.fde_right), (0.0, 0.0, 0.0, 0.0));
    assert!(rep.fgd_left < 1e-6 && rep.wgd_right < 1e-6 && rep.fid < 1e-6);
    let json = serde_json::to_value(&rep).unwrap();
    for key in ["fgd_left", "fgd_right", "wgd_left", "wgd_right", "pd_left", "pd_right", "smooth_left", "smooth_right", "fde_left", "fde_right", "fid", "rtf", "windows", "fallback"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn one_window_equals_direct_calls() {
    let mut r = rng::seeded(11);
    let (p, g) = (motion(&mut r, 240), motion(&mut r, 240));
    let rep = windowed_eval(&p, &g, &EvalOptions::default()).unwrap();
    assert_eq!(rep.windows, 1);
    assert_eq!(rep.pd_left, pd(&p.wrist(0), &g.wrist(0)).unwrap());
    assert_eq!(rep.fgd_right, frechet_samples(&p.gesture(1), &g.gesture(1)).unwrap());
    assert_eq!(rep.wgd_left, wgd(&p.gesture(0), &g.gesture(0), 8, 3, 0).unwrap());
    let short = windowed_eval(&p.slice(0, 100).unwrap(), &g.slice(0, 100).unwrap(), &EvalOptions::default()).unwrap();
    assert!(short.fallback);
    assert_eq!(short.windows, 1);
}

#[test]
fn windows_are_averaged_not_pooled() {
    let mut r = rng::seeded(12);
    let g = motion(&mut r, 360);
    let mut wrists = g.wrists.clone();
    for n in 0..120 {
        wrists.set(n, 0, wrists.at(n, 0) + 1.0);
    }
    let p = MotionSequence::new(wrists, g.gestures.clone()).unwrap();
    let rep = windowed_eval(&p, &g, &EvalOptions::default()).unwrap();
    assert_eq!(rep.windows, 2);
    // Window means 0.5 and 0; pooling all 360 frames would give 1/3.
    assert!((rep.pd_left - 0.25).abs() < 1e-12);
    assert_eq!(rep.pd_right, 0.0);
}
