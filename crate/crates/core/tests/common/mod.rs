#![allow(dead_code)]

pub mod metric_oracle;

use std::path::Path;

use ignet_core::codec::write_pgm;
use ignet_core::dataset::ImagePair;
use ignet_core::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(lo..hi)))
}

/// Values spaced at least `gap` apart in a random order, so max-style kinks
/// stay out of reach of a finite-difference step.
pub fn distinct<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    // the quarter-gap shift keeps every value off zero
    let offset = -(n as f64) * gap / 2.0 + 0.25 * gap;
    Tensor::from_fn(shape.to_vec(), |i| T::of(offset + order[i] as f64 * gap))
}

fn gauss(x: f32, y: f32, cx: f32, cy: f32, s: f32) -> f32 {
    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
}

/// Smooth registered toy pair: one scene seen by both sensors with different
/// intensity mappings, plus a soft hot target only the infrared image shows.
/// `phase` shifts the scene so several distinct pairs can be made.
pub fn toy_pair(id: &str, h: usize, w: usize, phase: f32) -> ImagePair {
    let scene = |x: f32, y: f32| 0.5 + 0.2 * ((x + phase) / 12.0).sin() * ((y - phase) / 15.0).cos();
    let (cx, cy) = (0.62 * w as f32, 0.34 * h as f32);
    let ir = Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f32, (i % w) as f32);
        0.15 + 0.5 * scene(x, y) + 0.35 * gauss(x, y, cx, cy, 7.0)
    });
    let vis = Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f32, (i % w) as f32);
        0.1 + 0.8 * scene(x, y)
    });
    ImagePair::new(id, ir, vis, None).unwrap()
}

/// Writes `count` toy pairs as PGM files into `ir/` and `vis/` under `root`.
pub fn write_toy_dirs(root: &Path, count: usize, h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let ir = root.join("ir");
    let vis = root.join("vis");
    std::fs::create_dir_all(&ir).unwrap();
    std::fs::create_dir_all(&vis).unwrap();
    for k in 0..count {
        let p = toy_pair(&format!("pair{k}"), h, w, 9.0 * k as f32);
        write_pgm(&p.infrared, ir.join(format!("pair{k}.pgm"))).unwrap();
        write_pgm(&p.visible_luma, vis.join(format!("pair{k}.pgm"))).unwrap();
    }
    (ir, vis)
}
