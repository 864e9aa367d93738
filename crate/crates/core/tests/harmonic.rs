use pianoflow::harmonic::{HarmonicConfig, HarmonicPerceiver};
use pianoflow::midi::KEYS;
use pianoflow::numcore::nn::Linear;
use pianoflow::numcore::rng;
use pianoflow::numcore::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn build(cfg: HarmonicConfig, seed: u64) -> (ParamStore, HarmonicPerceiver) {
    let mut ps = ParamStore::new();
    let hp = HarmonicPerceiver::new(&mut ps, "hp", cfg, &mut rng::seeded(seed));
    (ps, hp)
}

fn tiny() -> HarmonicConfig {
    HarmonicConfig {
        channels: 4,
        d_p: 3,
        queries: 2,
        c_mid: 6,
        layers: 1,
        ..HarmonicConfig::default()
    }
}

fn set_identity(ps: &mut ParamStore, l: &Linear) {
    let w = ps.get_mut(l.w);
    let (r, c) = (w.rows(), w.cols());
    for i in 0..r {
        for j in 0..c {
            w.set(i, j, if i == j { 1.0 } else { 0.0 });
        }
    }
    if let Some(b) = l.b {
        ps.get_mut(b).data_mut().fill(0.0);
    }
}

fn pool(ps: &ParamStore, hp: &HarmonicPerceiver, s: &Tensor) -> Tensor {
    let mut g = Graph::with_params(ps);
    let v = g.constant(s);
    let e = hp.pitch_pool(&mut g, v).unwrap();
    g.tensor(e)
}

fn full_pool(ps: &ParamStore, hp: &HarmonicPerceiver, frames: &Tensor) -> Tensor {
    let mut g = Graph::with_params(ps);
    let v = g.constant(frames);
    let s = hp.pitch_structure(&mut g, v).unwrap();
    let e = hp.pitch_pool(&mut g, s).unwrap();
    g.tensor(e)
}

fn one_hot(key: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, KEYS]);
    t.set(0, key, 1.0);
    t
}

#[test]
fn single_query_two_row_types_match_softmax_oracle() {
    let cfg = HarmonicConfig {
        channels: 2,
        d_p: 2,
        queries: 1,
        c_mid: 2,
        layers: 1,
        ..HarmonicConfig::default()
    };
    let (mut ps, hp) = build(cfg, 1);
    for l in [&hp.wq, &hp.wk, &hp.wv, &hp.merge] {
        set_identity(&mut ps, l);
    }
    ps.get_mut(hp.queries).data_mut().copy_from_slice(&[1.0, 0.0]);
    let mut rows = vec![vec![0.0, 1.0]; KEYS];
    rows[17] = vec![1.0, 0.0];
    let e = pool(&ps, &hp, &Tensor::from_rows(&rows).unwrap());

    let a = (1.0f64 / 2f64.sqrt()).exp();
    let z = a + (KEYS - 1) as f64;
    let want = [a / z, (KEYS - 1) as f64 / z];
    for j in 0..2 {
        assert!((e.data()[j] - want[j]).abs() < 1e-6, "{:?} vs {want:?}", e.data());
    }
}

#[test]
fn key_bias_shift_leaves_pooling_unchanged() {
    let (mut ps, hp) = build(tiny(), 2);
    let s = rng::normal(&mut rng::seeded(9), &[KEYS, 4]);
    let before = pool(&ps, &hp, &s);
    for v in ps.get_mut(hp.wk.b.unwrap()).data_mut() {
        *v += 3.7;
    }
    let after = pool(&ps, &hp, &s);
    assert!(before.max_abs_diff(&after) < 1e-12);
}

#[test]
fn pooling_ignores_row_order() {
    let (ps, hp) = build(tiny(), 3);
    let s = rng::normal(&mut rng::seeded(4), &[KEYS, 4]);
    let mut rows: Vec<Vec<f64>> = (0..KEYS).map(|k| s.row(k).to_vec()).collect();
    rows.reverse();
    rows.swap(3, 70);
    let shuffled = Tensor::from_rows(&rows).unwrap();
    assert!(pool(&ps, &hp, &s).max_abs_diff(&pool(&ps, &hp, &shuffled)) < 1e-12);
}

#[test]
fn pitch_embedding_breaks_transposition_invariance() {
    let (ps, hp) = build(tiny(), 5);
    let d = full_pool(&ps, &hp, &one_hot(40)).max_abs_diff(&full_pool(&ps, &hp, &one_hot(52)));
    assert!(d > 1e-6, "transposed input should change the output, diff {d}");

    let cfg = HarmonicConfig {
        use_pitch_pos: false,
        ..tiny()
    };
    let (ps, hp) = build(cfg, 5);
    let d = full_pool(&ps, &hp, &one_hot(40)).max_abs_diff(&full_pool(&ps, &hp, &one_hot(52)));
    assert!(d < 1e-12, "without pitch positions a transposition is invisible, diff {d}");
}

#[test]
fn pitch_structure_is_affine() {
    let (ps, hp) = build(tiny(), 6);
    let mut r = rng::seeded(8);
    let mut frame = || {
        let v: Vec<f64> = (0..KEYS).map(|_| if r.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, KEYS], v).unwrap()
    };
    let (x, y) = (frame(), frame());
    let f = |t: &Tensor| {
        let mut g = Graph::with_params(&ps);
        let v = g.constant(t);
        let s = hp.pitch_structure(&mut g, v).unwrap();
        g.tensor(s)
    };
    let f0 = f(&Tensor::zeros(&[1, KEYS]));
    let xy = x.zip_map(&y, |a, b| a + b).unwrap();
    let lhs = f(&xy).zip_map(&f0, |a, b| a - b).unwrap();
    let rhs = f(&x)
        .zip_map(&f(&y), |a, b| a + b)
        .unwrap()
        .zip_map(&f0, |a, b| a - 2.0 * b)
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn single_token_encoder_is_the_value_path() {
    let (ps, hp) = build(tiny(), 7);
    let e = rng::normal(&mut rng::seeded(1), &[1, 6]);
    let mut g = Graph::with_params(&ps);
    let ev = g.constant(&e);
    let out = hp.temporal_encode(&mut g, ev).unwrap();
    let got = g.tensor(out);

    // attention over one token returns its value projection unchanged
    let b = &hp.blocks[0];
    let pos = g.constant(&pianoflow::numcore::nn::sinusoidal_positions(1, 6));
    let x = g.add(ev, pos).unwrap();
    let h = b.ln1.forward(&mut g, x).unwrap();
    let v = b.attn.wv.forward(&mut g, h).unwrap();
    let a = b.attn.wo.forward(&mut g, v).unwrap();
    let x = g.add(x, a).unwrap();
    let h = b.ln2.forward(&mut g, x).unwrap();
    let f = b.ff.forward(&mut g, h).unwrap();
    let want = g.add(x, f).unwrap();
    assert!(got.max_abs_diff(&g.tensor(want)) < 1e-12);
}

#[test]
fn encoder_without_positions_is_permutation_equivariant() {
    let cfg = HarmonicConfig {
        use_time_pos: false,
        ..tiny()
    };
    let (ps, hp) = build(cfg, 8);
    let e = rng::normal(&mut rng::seeded(2), &[5, 6]);
    let perm = [3, 0, 4, 1, 2];
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| e.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |t: &Tensor| {
        let mut g = Graph::with_params(&ps);
        let v = g.constant(t);
        let o = hp.temporal_encode(&mut g, v).unwrap();
        g.tensor(o)
    };
    let (a, b) = (run(&e), run(&permuted));
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..6 {
            assert!((b.at(dst, j) - a.at(src, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn full_length_clip_keeps_its_length() {
    let (ps, hp) = build(HarmonicConfig::default(), 9);
    let clip = &pianoflow::midi::make_toy_dataset(1, 8.0, 0).unwrap()[0];
    let mut g = Graph::with_params(&ps);
    let roll = g.constant(clip.roll.frames());
    let f = hp.forward(&mut g, roll).unwrap();
    assert_eq!(g.shape(f), (240, 64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn outputs_are_finite(seed in any::<u64>()) {
        let (ps, hp) = build(tiny(), seed);
        let mut r = rng::seeded(seed);
        let frames = rng::uniform(&mut r, &[3, KEYS], 0.0, 1.0);
        let mut g = Graph::with_params(&ps).check_finite(true);
        let v = g.constant(&frames);
        let f = hp.forward(&mut g, v).unwrap();
        prop_assert!(g.value(f).iter().all(|v| v.is_finite()));
    }
}
