mod common;

use common::{rng, toy_pair, uniform};
use ignet_core::config::LrSchedule;
use ignet_core::dataset::ImagePair;
use ignet_core::network::{encode_checkpoint, load_checkpoint};
use ignet_core::train::{
    adam_step, assemble_batch, crop_origins, learning_rate, sample_crops, train, train_from, AdamState, StepRecord,
    TrainLog, TrainOptions,
};
use ignet_core::{Error, FusionConfig, NetworkParams, Tensor};
use indexmap::IndexMap;
use proptest::prelude::*;

fn tiny_config() -> FusionConfig {
    let mut c = FusionConfig {
        channels: 4,
        node_channels: 4,
        reduction: 2,
        ..FusionConfig::default()
    };
    c.optim.crop = 16;
    c.optim.stride = 8;
    c.optim.max_steps = Some(3);
    c
}

fn squared_grads(params: &NetworkParams) -> IndexMap<String, Tensor> {
    params.iter().map(|(n, t)| (n.to_string(), t.map(|v| 2.0 * v))).collect()
}

/// Textbook Adam with decoupled decay on `f(p) = p²`, in double precision.
fn scalar_adam(p0: f64, lr: f64, wd: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for t in 1..=steps as i32 {
        let g = 2.0 * p;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * wd * p;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    p
}

#[test]
fn adam_follows_the_scalar_recurrence() {
    let config = tiny_config();
    for (lr, wd) in [(0.05f32, 0.0f32), (1e-3, 2e-4)] {
        let mut params = NetworkParams::init(&config, 0).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(1.0);
        }
        let mut state = AdamState::new(&params, lr, wd);
        for _ in 0..100 {
            let g = squared_grads(&params);
            adam_step(&mut params, &g, &mut state).unwrap();
        }
        let want = scalar_adam(1.0, lr as f64, wd as f64, 100);
        for (name, t) in params.iter() {
            for &v in t.data() {
                assert!((v as f64 - want).abs() < 1e-4, "{name}: {v} vs {want}");
            }
        }
        if lr == 0.05 {
            assert!(want.abs() < 0.1);
        }
        assert_eq!(state.t, 100);
    }
}

#[test]
fn adam_zero_gradient_without_decay_is_a_no_op() {
    let config = tiny_config();
    let mut params = NetworkParams::init(&config, 3).unwrap();
    let before = params.clone();
    let zeros: IndexMap<String, Tensor> = params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect();
    let mut state = AdamState::new(&params, 1e-3, 0.0);
    for _ in 0..5 {
        adam_step(&mut params, &zeros, &mut state).unwrap();
    }
    assert_eq!(params, before);
    for (name, t) in params.iter() {
        assert_eq!(state.first_moment(name).unwrap().shape(), t.shape());
        assert_eq!(state.second_moment(name).unwrap().shape(), t.shape());
    }
}

#[test]
fn adam_names_a_missing_gradient() {
    let config = tiny_config();
    let mut params = NetworkParams::init(&config, 3).unwrap();
    let mut grads = squared_grads(&params);
    grads.shift_remove("head.conv2.bias");
    let mut state = AdamState::new(&params, 1e-3, 0.0);
    match adam_step(&mut params, &grads, &mut state) {
        Err(Error::Parameter { name, .. }) => assert_eq!(name, "head.conv2.bias"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn crop_grid_counts() {
    assert_eq!(crop_origins(64, 64, 64, 8).len(), 1);
    assert_eq!(crop_origins(72, 72, 64, 8), vec![(0, 0), (0, 8), (8, 0), (8, 8)]);
    assert_eq!(crop_origins(80, 64, 64, 8).len(), 3);
    assert!(crop_origins(63, 64, 64, 8).is_empty());
}

fn blank_pair(id: &str, h: usize, w: usize) -> ImagePair {
    ImagePair::new(id, Tensor::zeros([1, 1, h, w]), Tensor::zeros([1, 1, h, w]), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn crops_cover_each_window_once(seed: u64, h in 16usize..40, w in 16usize..40, batch in 1usize..5) {
        let pairs = vec![blank_pair("a", h, w), blank_pair("b", w, h), blank_pair("small", 8, 8)];
        let batches = sample_crops(&pairs, 16, 8, batch, seed);
        let mut seen: Vec<(usize, usize, usize)> = batches.iter().flatten().map(|c| (c.pair, c.top, c.left)).collect();
        for b in &batches[..batches.len().saturating_sub(1)] {
            prop_assert_eq!(b.len(), batch);
        }
        seen.sort_unstable();
        let mut expected: Vec<(usize, usize, usize)> = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            for (t, l) in crop_origins(p.height(), p.width(), 16, 8) {
                expected.push((i, t, l));
            }
        }
        prop_assert_eq!(seen, expected);
        prop_assert_eq!(&batches, &sample_crops(&pairs, 16, 8, batch, seed));
    }
}

#[test]
fn batches_hold_the_cropped_pixels() {
    let mut r = rng(1);
    let ir: Tensor = uniform(&mut r, &[1, 1, 24, 24], 0.0, 1.0);
    let vis: Tensor = uniform(&mut r, &[1, 1, 24, 24], 0.0, 1.0);
    let pairs = vec![ImagePair::new("p", ir.clone(), vis.clone(), None).unwrap()];
    let batches = sample_crops(&pairs, 16, 8, 4, 0);
    assert_eq!(batches.len(), 1);
    let (bi, bv) = assemble_batch(&pairs, &batches[0], 16).unwrap();
    assert_eq!(bi.shape(), &[4, 1, 16, 16]);
    for (k, win) in batches[0].iter().enumerate() {
        let want = ir.crop(win.top, win.left, 16, 16).unwrap();
        assert_eq!(bi.batch_item(k).unwrap(), want);
        assert_eq!(bv.batch_item(k).unwrap(), vis.crop(win.top, win.left, 16, 16).unwrap());
    }
}

#[test]
fn shuffles_depend_on_the_seed() {
    let pairs = vec![blank_pair("a", 64, 64)];
    let a = sample_crops(&pairs, 16, 8, 2, 1);
    let b = sample_crops(&pairs, 16, 8, 2, 2);
    assert_eq!(a.len(), 25);
    assert_ne!(a, b);
}

#[test]
fn schedules() {
    let mut c = FusionConfig::default();
    assert_eq!(learning_rate(&c, 0), 1e-3);
    assert_eq!(learning_rate(&c, 99), 1e-3);
    c.optim.lr_schedule = LrSchedule::Linear;
    c.optim.lr_decay = 0.25;
    assert_eq!(learning_rate(&c, 2), 0.5e-3);
    assert_eq!(learning_rate(&c, 9), 0.0);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let config = tiny_config();
    let pairs = vec![toy_pair("a", 24, 24, 0.0), toy_pair("b", 24, 24, 5.0)];
    let (p1, l1) = train(&pairs, &config).unwrap();
    let (p2, l2) = train(&pairs, &config).unwrap();
    assert_eq!(encode_checkpoint(&p1, &config).unwrap(), encode_checkpoint(&p2, &config).unwrap());
    assert_eq!(l1.records(), l2.records());
    assert_eq!(l1.records().len(), 3);
    let (p3, _) = train(&pairs, &FusionConfig { seed: 1, ..config.clone() }).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn outputs_are_written_every_epoch() {
    let mut config = tiny_config();
    config.optim.max_steps = None;
    config.optim.epochs = 2;
    config.optim.batch = 4;
    let pairs = vec![toy_pair("a", 24, 24, 0.0)];
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        checkpoint: Some(dir.path().join("net.ckpt")),
        log_csv: Some(dir.path().join("log.csv")),
        echo_stdout: false,
    };
    let init = NetworkParams::init(&config, 0).unwrap();
    let (params, log) = train_from(init, &pairs, &config, &options).unwrap();
    // four windows per epoch in one batch of four
    assert_eq!(log.records().len(), 2);
    assert!(log.records().iter().all(|r| r.total.is_finite() && r.lr == 1e-3));
    let (saved, _) = load_checkpoint(dir.path().join("net.ckpt")).unwrap();
    assert_eq!(saved, params);
    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,total,mse,edge,ssim,lr");
    assert_eq!(lines.len(), 3);
    assert_eq!(csv, log.to_csv());
}

#[test]
fn non_finite_loss_aborts() {
    let config = tiny_config();
    let mut ir = Tensor::full([1, 1, 16, 16], 0.5f32);
    ir.data_mut()[5] = f32::NAN;
    let pair = ImagePair::new("nan", ir, Tensor::full([1, 1, 16, 16], 0.5), None).unwrap();
    match train(&[pair], &config) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_inputs_are_refused() {
    let config = tiny_config();
    assert!(train(&[], &config).is_err());
    // every pair smaller than the crop leaves nothing to train on
    assert!(train(&[blank_pair("s", 8, 8)], &config).is_err());
    let mut log = TrainLog::default();
    let rec = |step| StepRecord { step, total: 1.0, mse: 0.0, edge: 0.0, ssim: 0.0, lr: 0.0 };
    log.push(rec(0)).unwrap();
    log.push(rec(1)).unwrap();
    assert!(log.push(rec(1)).is_err());
}
