mod common;

use common::{rng, uniform};
use ignet_core::backbone::{extract, ssm_forward};
use ignet_core::network::{
    check_gradients, decode_checkpoint, encode_checkpoint, expected_param_count, forward, fuse, load_checkpoint,
    load_checkpoint_into, save_checkpoint,
};
use ignet_core::params::param_specs;
use ignet_core::tensor::GradCheckOptions;
use ignet_core::{Error, FusionConfig, Modality, NetworkParams, Tape, Tensor};

fn small(nodes: usize, loops: usize) -> FusionConfig {
    FusionConfig {
        channels: 4,
        node_channels: 4,
        reduction: 2,
        nodes,
        loops,
        ..FusionConfig::default()
    }
}

#[test]
fn fused_image_is_a_probability_map_of_input_size() {
    let config = FusionConfig::default();
    let params = NetworkParams::init(&config, 0).unwrap();
    let mut r = rng(0);
    for (h, w) in [(16, 16), (13, 21)] {
        let ir: Tensor = uniform(&mut r, &[1, 1, h, w], 0.0, 1.0);
        let vis: Tensor = uniform(&mut r, &[1, 1, h, w], 0.0, 1.0);
        let f = fuse(&params, &config, &ir, &vis).unwrap();
        assert_eq!(f.shape(), &[1, 1, h, w]);
        assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let batch: Tensor = uniform(&mut r, &[2, 1, 12, 12], 0.0, 1.0);
    assert_eq!(fuse(&params, &config, &batch, &batch).unwrap().shape(), &[2, 1, 12, 12]);
}

#[test]
fn forward_rejects_bad_inputs() {
    let config = small(3, 3);
    let params = NetworkParams::init(&config, 0).unwrap();
    let a = Tensor::zeros([1, 1, 8, 8]);
    let b = Tensor::zeros([1, 1, 8, 9]);
    let rgb = Tensor::zeros([1, 3, 8, 8]);
    assert!(matches!(fuse(&params, &config, &a, &b), Err(Error::Shape { .. })));
    assert!(fuse(&params, &config, &rgb, &rgb).is_err());
    let flat = Tensor::zeros([1, 8, 8]);
    assert!(fuse(&params, &config, &flat, &flat).is_err());
}

#[test]
fn initial_kernels_have_he_variance() {
    let config = FusionConfig {
        channels: 48,
        node_channels: 48,
        ..FusionConfig::default()
    };
    let params = NetworkParams::init(&config, 1).unwrap();
    let kernel = params.get("ir.conv2.weight").unwrap();
    assert!(kernel.numel() >= 10_000);
    let n = kernel.numel() as f64;
    let mean = kernel.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = kernel.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let target = 2.0 / (48.0 * 9.0);
    assert!((var / target - 1.0).abs() < 0.1, "{var} vs {target}");
    assert!(mean.abs() < 0.1 * target.sqrt());
    for spec in param_specs(&config) {
        if spec.fan_in.is_none() {
            assert!(params.get(&spec.name).unwrap().data().iter().all(|&v| v == 0.0), "{}", spec.name);
        }
    }
}

#[test]
fn initialisation_is_a_function_of_the_seed() {
    let config = small(3, 3);
    let a = NetworkParams::init(&config, 5).unwrap();
    let b = NetworkParams::init(&config, 5).unwrap();
    let c = NetworkParams::init(&config, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.count(), expected_param_count(&config));
}

#[test]
fn checkpoints_round_trip_exactly() {
    let config = small(3, 3);
    let params = NetworkParams::init(&config, 2).unwrap();
    let bytes = encode_checkpoint(&params, &config).unwrap();
    let (back, cfg) = decode_checkpoint(&bytes).unwrap();
    // the stored config carries the seed the parameters were drawn with
    assert_eq!(cfg, FusionConfig { seed: 2, ..config.clone() });
    assert_eq!(back, params);
    assert_eq!(encode_checkpoint(&back, &cfg).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&params, &config, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let (loaded, _) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(load_checkpoint_into(&path, &config).unwrap(), params);
}

#[test]
fn checkpoint_for_another_node_count_is_refused() {
    let config = small(3, 3);
    let params = NetworkParams::init(&config, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n3.ckpt");
    save_checkpoint(&params, &config, &path).unwrap();
    let err = load_checkpoint_into(&path, &small(5, 3)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_) | Error::Parameter { .. }), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(decode_checkpoint(&bytes).is_err());
    assert!(decode_checkpoint(b"nope").is_err());
}

#[test]
fn salience_combines_pools_by_modality() {
    let config = FusionConfig {
        channels: 2,
        node_channels: 2,
        reduction: 1,
        ..FusionConfig::default()
    };
    let mut params = NetworkParams::init(&config, 0).unwrap();
    for m in ["ir", "vis"] {
        for name in ["ssm.conv.weight", "ssm.fc1.weight", "ssm.fc2.weight"] {
            params.get_mut(&format!("{m}.{name}")).unwrap().data_mut().fill(0.0);
        }
        params.get_mut(&format!("{m}.ssm.conv.bias")).unwrap().data_mut().fill(1.0);
        params.get_mut(&format!("{m}.ssm.fc2.bias")).unwrap().data_mut().copy_from_slice(&[0.5, -1.0]);
    }
    let mut tape = Tape::<f64>::default();
    let pv = params.bind(&mut tape, false);
    let x = tape.constant(uniform(&mut rng(1), &[1, 2, 5, 5], 0.0, 1.0));
    let ir = ssm_forward(&mut tape, x, &pv, Modality::Infrared).unwrap();
    let vis = ssm_forward(&mut tape, x, &pv, Modality::Visible).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for (i, (a, b)) in tape.value(ir).data().iter().zip(tape.value(vis).data()).enumerate() {
        let gate = if i < 25 { sig(0.5) } else { sig(-1.0) };
        assert!((a - gate).abs() < 1e-12);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }
}

#[test]
fn backbone_levels_keep_resolution() {
    let config = small(3, 3);
    let params = NetworkParams::init(&config, 3).unwrap();
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let img = tape.constant(uniform(&mut rng(2), &[2, 1, 7, 9], 0.0, 1.0));
    for m in Modality::BOTH {
        let f = extract(&mut tape, img, &pv, &config, m).unwrap();
        for v in [f.f1, f.f2, f.f3] {
            assert_eq!(tape.shape(v), &[2, 4, 7, 9]);
        }
        assert!(tape.value(f.f1).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn ablation_variants_route_features() {
    let mut r = rng(4);
    let ir: Tensor = uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let vis: Tensor = uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    for (ssm, gim) in [(false, true), (true, false), (true, true)] {
        let mut config = small(3, 3);
        config.modules.ssm = ssm;
        config.modules.gim = gim;
        let params = NetworkParams::init(&config, 0).unwrap();
        assert_eq!(params.names().any(|n| n.contains(".ssm.")), ssm);
        assert_eq!(params.names().any(|n| n.starts_with("gim.")), gim);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, false);
        let (a, b) = (tape.constant(ir.clone()), tape.constant(vis.clone()));
        let out = forward(&mut tape, a, b, &pv, &config).unwrap();
        assert_eq!(out.gim.is_some(), gim);
        if !ssm {
            assert_eq!(out.ir.f3, out.ir.f2);
        }
        if !gim {
            assert_eq!(out.g_ir, out.ir.f3);
            assert_eq!(out.g_vis, out.vis.f3);
        }
    }
}

#[test]
fn whole_network_gradients_on_a_small_graph() {
    let config = small(1, 1);
    let mut params = NetworkParams::init(&config, 11).unwrap();
    let mut r = rng(5);
    // zero biases put whole dead regions exactly on the relu kink
    let biases: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
    for name in biases {
        let t = params.get_mut(&name).unwrap();
        *t = uniform(&mut r, t.shape(), -0.2, 0.2);
    }
    let ir: Tensor = uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let vis: Tensor = uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let opts = GradCheckOptions {
        epsilon: 1e-6,
        ..GradCheckOptions::default()
    };
    let checks = check_gradients(&params, &config, &ir, &vis, opts).unwrap();
    assert_eq!(checks.len(), params.len());
    for (name, c) in &checks {
        assert!(c.relative_error < 1e-2, "{name}: {c:?}");
        assert_eq!(c.checked, params.get(name).unwrap().numel());
    }
}
