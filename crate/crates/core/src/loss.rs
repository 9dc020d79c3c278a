//! Pixel, edge and structural training losses, all differentiable on a tape.
//!
//! Inputs are `N×1×H×W` tensors with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeNorm {
    /// Mean absolute difference.
    #[default]
    L1,
    /// Square of the mean absolute difference.
    L1Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Edge term weight.
    pub alpha: f32,
    /// SSIM term weight.
    pub beta: f32,
    pub edge_norm: EdgeNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.5,
            edge_norm: EdgeNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, mse: f32, edge: f32, ssim: f32) -> f32 {
        mse + self.alpha * edge + self.beta * ssim
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, vars: &[(&str, Var)]) -> Result<()> {
    let (first_name, first) = vars[0];
    let expected = tape.shape(first).to_vec();
    for &(name, v) in &vars[1..] {
        let actual = tape.shape(v);
        if actual != expected.as_slice() {
            let axis = expected
                .iter()
                .zip(actual)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.len().min(actual.len()));
            return Err(Error::shape(
                op,
                format!("{name} vs {first_name} axis {axis}"),
                expected.get(axis).copied().unwrap_or(0),
                actual.get(axis).copied().unwrap_or(0),
            ));
        }
    }
    Ok(())
}

fn single_channel<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = tape.value(x).dims4(op)?;
    if c != 1 {
        return Err(Error::shape(op, "channels", 1, c));
    }
    Ok((n, h, w))
}

/// `mean((fused − (ir + vis) / 2)²)`.
pub fn loss_mse<T: Scalar>(tape: &mut Tape<T>, ir: Var, vis: Var, fused: Var) -> Result<Var> {
    same_shape(tape, "loss_mse", &[("ir", ir), ("vis", vis), ("fused", fused)])?;
    let sum = tape.add(ir, vis)?;
    let target = tape.scale(sum, 0.5);
    let diff = tape.sub(fused, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn stencil<T: Scalar>(tape: &mut Tape<T>, taps: &[f64; 9]) -> (Var, Var) {
    let k = tape.constant(Tensor::from_fn([1, 1, 3, 3], |i| T::of(taps[i])));
    let b = tape.constant(Tensor::zeros([1]));
    (k, b)
}

/// Sobel magnitude `√(Gx² + Gy²)` with replicated borders, same size as `img`.
pub fn gradient_magnitude<T: Scalar>(tape: &mut Tape<T>, img: Var) -> Result<Var> {
    single_channel(tape, "gradient_magnitude", img)?;
    let padded = tape.pad_replicate(img, 1)?;
    let (kx, bx) = stencil(tape, &SOBEL_X);
    let (ky, by) = stencil(tape, &SOBEL_Y);
    let gx = tape.conv2d(padded, kx, bx, 1, 0)?;
    let gy = tape.conv2d(padded, ky, by, 1, 0)?;
    let gx2 = tape.square(gx);
    let gy2 = tape.square(gy);
    let sum = tape.add(gx2, gy2)?;
    tape.sqrt(sum)
}

/// `mean|∇fused − max(∇ir, ∇vis)|`, the target held constant.
pub fn loss_edge<T: Scalar>(tape: &mut Tape<T>, ir: Var, vis: Var, fused: Var, norm: EdgeNorm) -> Result<Var> {
    same_shape(tape, "loss_edge", &[("ir", ir), ("vis", vis), ("fused", fused)])?;
    let g_ir = gradient_magnitude(tape, ir)?;
    let g_vis = gradient_magnitude(tape, vis)?;
    let target = {
        let a = tape.value(g_ir);
        let b = tape.value(g_vis);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect();
        Tensor::new(a.shape().to_vec(), data)?
    };
    let target = tape.constant(target);
    let g_f = gradient_magnitude(tape, fused)?;
    let diff = tape.sub(g_f, target)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);
    Ok(match norm {
        EdgeNorm::L1 => l1,
        EdgeNorm::L1Squared => tape.square(l1),
    })
}

/// Normalised `window × window` Gaussian.
pub fn gaussian_window<T: Scalar>(window: usize, sigma: f64) -> Tensor<T> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn([1, 1, window, window], |idx| {
        let (r, q) = (idx / window, idx % window);
        T::of(g[r] * g[q] / (s * s))
    })
}

/// Largest odd window no bigger than [`SSIM_WINDOW`] that fits `h × w`.
pub fn fitted_window(height: usize, width: usize) -> usize {
    let m = height.min(width).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m.saturating_sub(1).max(1)
    } else {
        m.max(1)
    }
}

/// Mean of the Gaussian-windowed SSIM map over valid window positions.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, window: usize, sigma: f64) -> Result<Var> {
    same_shape(tape, "ssim", &[("x", x), ("y", y)])?;
    let (_, h, w) = single_channel(tape, "ssim", x)?;
    if window == 0 || !(sigma > 0.0) {
        return Err(Error::invalid("ssim", format!("window {window} and sigma {sigma} must be positive")));
    }
    if h < window || w < window {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} is smaller than the {window}x{window} window"),
        ));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = tape.constant(gaussian_window(window, sigma));
    let b = tape.constant(Tensor::zeros([1]));
    let blur = |tape: &mut Tape<T>, v: Var| tape.conv2d(v, k, b, 1, 0);

    let mu_x = blur(tape, x)?;
    let mu_y = blur(tape, y)?;
    let mu_x2 = tape.square(mu_x);
    let mu_y2 = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;

    // second moments are shift invariant; centring first limits cancellation
    let cx = tape.value(x).mean().as_f64();
    let cy = tape.value(y).mean().as_f64();
    let xc = tape.add_scalar(x, -cx);
    let yc = tape.add_scalar(y, -cy);
    let mu_xc = blur(tape, xc)?;
    let mu_yc = blur(tape, yc)?;
    let xx = tape.square(xc);
    let yy = tape.square(yc);
    let xy = tape.mul(xc, yc)?;
    let e_xx = blur(tape, xx)?;
    let e_yy = blur(tape, yy)?;
    let e_xy = blur(tape, xy)?;
    let mu_xc2 = tape.square(mu_xc);
    let mu_yc2 = tape.square(mu_yc);
    let mu_xyc = tape.mul(mu_xc, mu_yc)?;
    let var_x = tape.sub(e_xx, mu_xc2)?;
    let var_y = tape.sub(e_yy, mu_yc2)?;
    let cov = tape.sub(e_xy, mu_xyc)?;

    let lum_num = tape.scale(mu_xy, 2.0);
    let lum_num = tape.add_scalar(lum_num, c1);
    let cs_num = tape.scale(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, c2);
    let lum_den = tape.add(mu_x2, mu_y2)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2);

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `(1 − SSIM(fused, ir)) + (1 − SSIM(fused, vis))`, window fitted to the
/// image size.
pub fn loss_ssim<T: Scalar>(tape: &mut Tape<T>, ir: Var, vis: Var, fused: Var) -> Result<Var> {
    same_shape(tape, "loss_ssim", &[("ir", ir), ("vis", vis), ("fused", fused)])?;
    let (_, h, w) = single_channel(tape, "loss_ssim", fused)?;
    let window = fitted_window(h, w);
    let s_ir = ssim(tape, fused, ir, window, SSIM_SIGMA)?;
    let s_vis = ssim(tape, fused, vis, window, SSIM_SIGMA)?;
    let both = tape.add(s_ir, s_vis)?;
    let neg = tape.neg(both);
    Ok(tape.add_scalar(neg, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub edge: Var,
    pub ssim: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f32,
    pub mse: f32,
    pub edge: f32,
    pub ssim: f32,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let item = |v: Var| tape.value(v).data()[0].as_f64() as f32;
        LossValues {
            total: item(self.total),
            mse: item(self.mse),
            edge: item(self.edge),
            ssim: item(self.ssim),
        }
    }
}

/// `mse + α·edge + β·ssim`.
pub fn loss_total<T: Scalar>(tape: &mut Tape<T>, ir: Var, vis: Var, fused: Var, weights: &LossWeights) -> Result<LossParts> {
    let mse = loss_mse(tape, ir, vis, fused)?;
    let edge = loss_edge(tape, ir, vis, fused, weights.edge_norm)?;
    let ssim = loss_ssim(tape, ir, vis, fused)?;
    let weighted_edge = tape.scale(edge, weights.alpha as f64);
    let weighted_ssim = tape.scale(ssim, weights.beta as f64);
    let total = tape.add(mse, weighted_edge)?;
    let total = tape.add(total, weighted_ssim)?;
    Ok(LossParts { total, mse, edge, ssim })
}
