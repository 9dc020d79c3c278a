//! Reference-free fusion quality metrics, computed in double precision.
//!
//! Images are single-channel tensors whose last two axes are `H × W`, with
//! values nominally in `[0, 1]`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::quantize;
use crate::error::{Error, Result};
use crate::loss::{fitted_window, SSIM_K1, SSIM_K2, SSIM_SIGMA};
use crate::tensor::Tensor;

pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

pub const CSV_HEADER: &str = "pair_id,EN,AG,CC,SCD,Qabf,SSIM";

/// Row-major `f64` copy of a single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("metrics", format!("need at least 2 axes, got {shape:?}")));
        }
        let (height, width) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if height * width != t.numel() {
            return Err(Error::invalid("metrics", format!("expected one channel, got shape {shape:?}")));
        }
        Ok(Self {
            height,
            width,
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value with coordinates clamped to the border.
    fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(y, x)
    }
}

fn same_dims(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if a.height != b.height {
        return Err(Error::shape(op, "height", a.height, b.height));
    }
    if a.width != b.width {
        return Err(Error::shape(op, "width", a.width, b.width));
    }
    Ok(())
}

/// Shannon entropy in bits of the 256-bin histogram of the 8-bit image.
pub fn metric_en(img: &Plane) -> f64 {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[quantize(v as f32) as usize] += 1;
    }
    let n = img.data.len() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Mean of `√((dx² + dy²) / 2)` with forward differences.
pub fn metric_ag(img: &Plane) -> f64 {
    if img.height < 2 || img.width < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 0..img.height - 1 {
        for x in 0..img.width - 1 {
            let dx = img.at(y, x + 1) - img.at(y, x);
            let dy = img.at(y + 1, x) - img.at(y, x);
            sum += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    sum / ((img.height - 1) * (img.width - 1)) as f64
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

pub fn metric_cc(ir: &Plane, vis: &Plane, fused: &Plane) -> Result<f64> {
    same_dims("metric_cc", fused, ir)?;
    same_dims("metric_cc", fused, vis)?;
    Ok((pearson(&fused.data, &ir.data) + pearson(&fused.data, &vis.data)) / 2.0)
}

pub fn metric_scd(ir: &Plane, vis: &Plane, fused: &Plane) -> Result<f64> {
    same_dims("metric_scd", fused, ir)?;
    same_dims("metric_scd", fused, vis)?;
    let diff = |s: &Plane| -> Vec<f64> { fused.data.iter().zip(&s.data).map(|(f, v)| f - v).collect() };
    Ok(pearson(&diff(ir), &vis.data) + pearson(&diff(vis), &ir.data))
}

/// Sobel strength and orientation per pixel, borders replicated.
fn sobel_polar(img: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut strength = Vec::with_capacity(img.data.len());
    let mut angle = Vec::with_capacity(img.data.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let p = |dy: isize, dx: isize| img.clamped(y + dy, x + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            strength.push((gx * gx + gy * gy).sqrt());
            angle.push(if gx == 0.0 { FRAC_PI_2 } else { (gy / gx).atan() });
        }
    }
    (strength, angle)
}

/// Edge preservation of one source at one pixel.
pub fn qabf_preservation(g_src: f64, a_src: f64, g_f: f64, a_f: f64) -> f64 {
    let g = if g_src == 0.0 && g_f == 0.0 {
        0.0
    } else {
        g_src.min(g_f) / g_src.max(g_f)
    };
    let a = 1.0 - (a_src - a_f).abs() / FRAC_PI_2;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Preservation value when strength and orientation are both kept intact.
pub fn qabf_plateau() -> f64 {
    qabf_preservation(1.0, 0.0, 1.0, 0.0)
}

/// Strength-weighted edge preservation from both sources; 0 when neither
/// source has any edge.
pub fn metric_qabf(ir: &Plane, vis: &Plane, fused: &Plane) -> Result<f64> {
    same_dims("metric_qabf", fused, ir)?;
    same_dims("metric_qabf", fused, vis)?;
    let (g_a, a_a) = sobel_polar(ir);
    let (g_b, a_b) = sobel_polar(vis);
    let (g_f, a_f) = sobel_polar(fused);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..g_f.len() {
        num += qabf_preservation(g_a[i], a_a[i], g_f[i], a_f[i]) * g_a[i];
        num += qabf_preservation(g_b[i], a_b[i], g_f[i], a_f[i]) * g_b[i];
        den += g_a[i] + g_b[i];
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Gaussian-windowed SSIM over valid positions, the window fitted to the
/// image as in the training loss.
pub fn ssim_plane(x: &Plane, y: &Plane) -> Result<f64> {
    same_dims("ssim", x, y)?;
    let window = fitted_window(x.height, x.width);
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gs).collect();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (x.height - window + 1, x.width - window + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..window {
                for dx in 0..window {
                    let w = g[dy] * g[dx];
                    let (a, b) = (x.at(oy + dy, ox + dx), y.at(oy + dy, ox + dx));
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

pub fn metric_ssim(ir: &Plane, vis: &Plane, fused: &Plane) -> Result<f64> {
    Ok((ssim_plane(fused, ir)? + ssim_plane(fused, vis)?) / 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct MetricScores {
    pub en: f64,
    pub ag: f64,
    pub cc: f64,
    pub scd: f64,
    #[serde(rename = "Qabf")]
    pub qabf: f64,
    pub ssim: f64,
}

impl MetricScores {
    pub fn as_array(&self) -> [f64; 6] {
        [self.en, self.ag, self.cc, self.scd, self.qabf, self.ssim]
    }

    fn from_array(v: [f64; 6]) -> Self {
        Self {
            en: v[0],
            ag: v[1],
            cc: v[2],
            scd: v[3],
            qabf: v[4],
            ssim: v[5],
        }
    }
}

/// All six scores for one fused pair.
pub fn evaluate(ir: &Tensor, vis: &Tensor, fused: &Tensor) -> Result<MetricScores> {
    let (a, b, f) = (Plane::from_tensor(ir)?, Plane::from_tensor(vis)?, Plane::from_tensor(fused)?);
    Ok(MetricScores {
        en: metric_en(&f),
        ag: metric_ag(&f),
        cc: metric_cc(&a, &b, &f)?,
        scd: metric_scd(&a, &b, &f)?,
        qabf: metric_qabf(&a, &b, &f)?,
        ssim: metric_ssim(&a, &b, &f)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PairScores {
    pub pair_id: String,
    #[serde(flatten)]
    pub scores: MetricScores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub pairs: Vec<PairScores>,
    pub mean: MetricScores,
}

impl MetricReport {
    pub fn new(pairs: Vec<PairScores>) -> Self {
        let mut sum = [0.0; 6];
        for p in &pairs {
            for (s, v) in sum.iter_mut().zip(p.scores.as_array()) {
                *s += v;
            }
        }
        let n = pairs.len().max(1) as f64;
        let mean = MetricScores::from_array(sum.map(|s| s / n));
        Self { pairs, mean }
    }

    /// Header, one row per pair, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let mut row = |id: &str, s: &MetricScores| {
            let _ = write!(out, "{id}");
            for v in s.as_array() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for p in &self.pairs {
            row(&p.pair_id, &p.scores);
        }
        row("mean", &self.mean);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Plane {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Plane::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f64 / (1u64 << 24) as f64
        })
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(metric_en(&Plane::from_fn(4, 4, |_, _| 0.3)), 0.0);
        let half = Plane::from_fn(4, 4, |y, _| if y < 2 { 0.0 } else { 1.0 });
        assert_eq!(metric_en(&half), 1.0);
    }

    #[test]
    fn average_gradient_ramp() {
        let s = 0.05;
        let ramp = Plane::from_fn(6, 9, |_, x| s * x as f64);
        assert!((metric_ag(&ramp) - s / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(metric_ag(&Plane::from_fn(3, 3, |_, _| 0.5)), 0.0);
    }

    #[test]
    fn correlation_examples() {
        let x = noise(6, 6, 1);
        assert!((metric_cc(&x, &x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = Plane::from_fn(6, 6, |y, q| 2.0 - x.at(y, q));
        assert!((metric_cc(&x, &x, &inv).unwrap() + 1.0).abs() < 1e-12);
        let c = Plane::from_fn(6, 6, |_, _| 0.5);
        assert_eq!(metric_cc(&c, &c, &x).unwrap(), 0.0);
    }

    #[test]
    fn scd_sum_of_zero_mean_sources() {
        let a = noise(8, 8, 2);
        let b = noise(8, 8, 3);
        let ma = a.data.iter().sum::<f64>() / 64.0;
        let mb = b.data.iter().sum::<f64>() / 64.0;
        let a = Plane::from_fn(8, 8, |y, x| a.at(y, x) - ma);
        let b = Plane::from_fn(8, 8, |y, x| b.at(y, x) - mb);
        let f = Plane::from_fn(8, 8, |y, x| a.at(y, x) + b.at(y, x));
        assert!((metric_scd(&a, &b, &f).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn qabf_plateau_and_constant_fused() {
        let x = noise(8, 8, 4);
        let plateau = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (1.0 - QABF_SIGMA_G)).exp())
            * QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (1.0 - QABF_SIGMA_A)).exp());
        assert!((metric_qabf(&x, &x, &x).unwrap() - plateau).abs() < 1e-12);
        let c = Plane::from_fn(8, 8, |_, _| 0.5);
        assert!(metric_qabf(&x, &noise(8, 8, 5), &c).unwrap() < 1e-3);
        assert_eq!(metric_qabf(&c, &c, &x).unwrap(), 0.0);
    }

    #[test]
    fn ssim_of_identical_images() {
        let x = noise(12, 12, 6);
        assert!((ssim_plane(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_mean_row() {
        let s = |v: f64| MetricScores {
            en: v,
            ag: v,
            cc: v,
            scd: v,
            qabf: v,
            ssim: v,
        };
        let report = MetricReport::new(vec![
            PairScores {
                pair_id: "a".into(),
                scores: s(1.0),
            },
            PairScores {
                pair_id: "b".into(),
                scores: s(2.0),
            },
        ]);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[3], "mean,1.5,1.5,1.5,1.5,1.5,1.5");
        assert!(report.to_json().unwrap().contains("\"Qabf\""));
    }
}
