use std::cell::Cell;

use pianoflow::flowgen::{heun_sample, heun_step, FlowConfig, VelocityField, VelocityNet};
use pianoflow::numcore::rng;
use pianoflow::numcore::Tensor;
use pianoflow::streaming::*;

struct Toy;

impl VelocityField for Toy {
    fn eval(&self, x: &Tensor, t: f64, _c: &Tensor) -> pianoflow::Result<Tensor> {
        Ok(x.map(|v| t - v))
    }
}

struct Counting<'a, F> {
    inner: F,
    calls: &'a Cell<usize>,
}

impl<F: VelocityField> VelocityField for Counting<'_, F> {
    fn eval(&self, x: &Tensor, t: f64, c: &Tensor) -> pianoflow::Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eval(x, t, c)
    }
}

fn small_net() -> (VelocityNet, usize) {
    let cfg = FlowConfig {
        spatial_width: 8,
        widths: vec![8, 16],
        cond_width: 8,
        time_dim: 8,
        d_k: 8,
        gate_hidden: 4,
        c_a: 4,
        enc_width: 4,
        ..FlowConfig::default()
    };
    let w = 2 * cfg.raw_cond_width();
    (VelocityNet::new(cfg, 21).unwrap(), w)
}

fn col(values: &[f64]) -> Tensor {
    Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
}

#[test]
fn zero_mask_is_plain_heun_step() {
    let mut r = rng::seeded(1);
    let x = rng::normal(&mut r, &[6, 3]);
    let past = rng::normal(&mut r, &[2, 3]);
    let eps = rng::normal(&mut r, &[2, 3]);
    let c = Tensor::zeros(&[6, 1]);
    let a = afc_step(&x, 0.2, 0.1, &Toy, &c, &past, &eps, &[0.0, 0.0]).unwrap();
    let b = heun_step(&Toy, &x, 0.2, 0.1, &c).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unit_mask_lands_on_the_past_at_t1() {
    let mut r = rng::seeded(2);
    let x = rng::normal(&mut r, &[5, 4]);
    let past = rng::normal(&mut r, &[3, 4]);
    let eps = rng::normal(&mut r, &[3, 4]);
    let c = Tensor::zeros(&[5, 1]);
    let out = afc_step(&x, 0.96, 0.04, &Toy, &c, &past, &eps, &[1.0; 3]).unwrap();
    assert!(out.slice_rows(0, 3).unwrap().max_abs_diff(&past) < 1e-6);
    let free = heun_step(&Toy, &x, 0.96, 0.04, &c).unwrap();
    assert_eq!(out.slice_rows(3, 2).unwrap(), free.slice_rows(3, 2).unwrap());
}

#[test]
fn mid_flow_step_matches_hand_arithmetic() {
    // v(x, t) = t − x, scalar frames; overlap of 2 with mask [1, 0.25].
    let (t, dt) = (0.4, 0.2);
    let x = col(&[0.5, -1.0, 2.0]);
    let past = col(&[0.3, 0.7]);
    let eps = col(&[-0.2, 1.1]);
    let mask = [1.0, 0.25];
    let out = afc_step(&x, t, dt, &Toy, &Tensor::zeros(&[3, 1]), &past, &eps, &mask).unwrap();
    for i in 0..3 {
        let x0 = x.at(i, 0);
        let k1 = t - x0;
        let k2 = (t + dt) - (x0 + dt * k1);
        let plain = x0 + dt * 0.5 * (k1 + k2);
        let want = if i < 2 {
            let known = (1.0 - (t + dt)) * eps.at(i, 0) + (t + dt) * past.at(i, 0);
            mask[i] * known + (1.0 - mask[i]) * plain
        } else {
            plain
        };
        assert!((out.at(i, 0) - want).abs() < 1e-9, "frame {i}");
    }
}

#[test]
fn afc_rejects_mismatched_overlap() {
    let x = Tensor::zeros(&[4, 2]);
    let c = Tensor::zeros(&[4, 1]);
    let bad = Tensor::zeros(&[2, 3]);
    assert!(afc_step(&x, 0.0, 0.1, &Toy, &c, &bad, &bad, &[1.0, 0.0]).is_err());
    let ok = Tensor::zeros(&[2, 2]);
    assert!(afc_step(&x, 0.0, 0.1, &Toy, &c, &ok, &ok, &[1.0, 0.0, 0.0]).is_err());
    assert!(afc_step(&x, 0.95, 0.1, &Toy, &c, &ok, &ok, &[1.0, 0.0]).is_err());
}

#[test]
fn single_chunk_stream_equals_heun_sample() {
    let (net, w) = small_net();
    let cond = rng::normal(&mut rng::seeded(3), &[240, w]);
    let plan = ChunkPlan::with_defaults(240).unwrap();
    let s = stream_generate(&net, &cond, plan, 9, 4, 96).unwrap();
    let h = heun_sample(&net, &cond, 240, 96, 4, &mut rng::stream(9, 0)).unwrap();
    assert_eq!(s, h);
    let short = ChunkPlan::with_defaults(50).unwrap();
    let s = stream_generate(&net, &cond.slice_rows(0, 50).unwrap(), short, 9, 4, 96).unwrap();
    assert_eq!(s, heun_sample(&net, &cond.slice_rows(0, 50).unwrap(), 50, 96, 4, &mut rng::stream(9, 0)).unwrap());
}

#[test]
fn long_stream_has_exact_length_and_is_deterministic() {
    let cond = rng::normal(&mut rng::seeded(4), &[500, 1]);
    let plan = ChunkPlan::with_defaults(500).unwrap();
    let a = stream_generate(&Toy, &cond, plan, 5, 6, 3).unwrap();
    assert_eq!(a.shape(), &[500, 3]);
    assert_eq!(a, stream_generate(&Toy, &cond, plan, 5, 6, 3).unwrap());
    assert_ne!(a, stream_generate(&Toy, &cond, plan, 6, 6, 3).unwrap());
    let s = swf_generate(&Toy, &cond, plan, 5, 6, 3).unwrap();
    assert_eq!(s.shape(), &[500, 3]);
}

#[test]
fn resuming_from_a_persisted_state_reproduces_the_stream() {
    let (net, w) = small_net();
    let cond = rng::normal(&mut rng::seeded(5), &[470, w]);
    let plan = ChunkPlan::with_defaults(470).unwrap();
    let whole = stream_generate(&net, &cond, plan, 11, 3, 96).unwrap();

    let mut first = AfcStreamer::new(plan, 11, 3, 96).unwrap();
    let part = first.next_frames(&net, &cond).unwrap().unwrap();
    let saved = serde_json::to_string(first.state()).unwrap();
    drop(first);
    let state: StreamState = serde_json::from_str(&saved).unwrap();
    let mut second = AfcStreamer::resume(plan, 11, 3, 96, state).unwrap();
    let mut parts = vec![part];
    while let Some(f) = second.next_frames(&net, &cond).unwrap() {
        parts.push(f);
    }
    assert!(second.is_done());
    assert_eq!(second.state().emitted, 470);
    let joined = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(joined, whole);
}

#[test]
fn inconsistent_state_is_rejected() {
    let plan = ChunkPlan::with_defaults(900).unwrap();
    let state = StreamState {
        next_chunk: 2,
        emitted: 420,
        tail_rows: 0,
        tail_cols: 0,
        tail_bits: vec![],
    };
    assert!(AfcStreamer::resume(plan, 1, 3, 2, state).is_err());
}

#[test]
fn afc_spends_the_same_evaluations_as_plain_sampling() {
    let cond = Tensor::zeros(&[900, 1]);
    let plan = ChunkPlan::with_defaults(900).unwrap();
    let calls = Cell::new(0);
    let field = Counting { inner: Toy, calls: &calls };
    let mut s = AfcStreamer::new(plan, 1, 25, 2).unwrap();
    for (k, &(start, len)) in plan.chunks().iter().enumerate() {
        calls.set(0);
        s.next_frames(&field, &cond).unwrap();
        let afc = calls.get();
        calls.set(0);
        heun_sample(&field, &cond.slice_rows(start, len).unwrap(), len, 2, 25, &mut rng::stream(1, k as u64)).unwrap();
        assert_eq!(afc, calls.get(), "chunk {k}");
        assert_eq!(afc, 50);
    }
}

#[test]
fn stationary_chunks_fuse_to_themselves() {
    let plan = ChunkPlan::new(10, 3, 24).unwrap();
    let row = [0.5, -1.0];
    let chunks: Vec<Tensor> = plan
        .chunks()
        .iter()
        .map(|&(_, len)| Tensor::from_rows(&vec![row.to_vec(); len]).unwrap())
        .collect();
    let fused = fuse_chunks(&chunks, plan).unwrap();
    assert_eq!(fused.shape(), &[24, 2]);
    assert!(fused.data().chunks(2).all(|r| r == row));
}

#[test]
fn two_constant_chunks_crossfade_linearly() {
    let plan = ChunkPlan::new(5, 3, 7).unwrap();
    let a = Tensor::full(&[5, 1], 2.0);
    let b = Tensor::full(&[5, 1], 6.0);
    let fused = fuse_chunks(&[a, b], plan).unwrap();
    assert_eq!(fused.data(), &[2.0, 2.0, 2.0, 4.0, 6.0, 6.0, 6.0]);
}

#[test]
fn seam_jumps_split_the_sequence() {
    let plan = ChunkPlan::with_defaults(900).unwrap();
    let x = Tensor::zeros(&[900, 1]);
    let (seams, within) = seam_jumps(&x, plan);
    assert_eq!(seams.len() + within.len(), 899);
    assert_eq!(seams.len(), 4 * 31);
}
