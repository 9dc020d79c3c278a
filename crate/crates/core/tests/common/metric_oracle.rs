//! Brute-force metric implementations written independently of the library.

use ignet_core::metrics::{Plane, QABF_GAMMA_A, QABF_GAMMA_G, QABF_KAPPA_A, QABF_KAPPA_G, QABF_SIGMA_A, QABF_SIGMA_G};

pub fn oracle_en(img: &Plane) -> f64 {
    let mut bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| ((v as f32).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    bytes.sort_unstable();
    let n = bytes.len() as f64;
    let mut weighted = 0.0;
    for run in bytes.chunk_by(|a, b| a == b) {
        let c = run.len() as f64;
        weighted += c * c.log2();
    }
    n.log2() - weighted / n
}

pub fn oracle_ag(img: &Plane) -> f64 {
    let (h, w) = (img.height, img.width);
    let at = |y: usize, x: usize| img.data[y * w + x];
    let mut terms = Vec::new();
    for y in 1..h {
        for x in 1..w {
            let dx = at(y - 1, x) - at(y - 1, x - 1);
            let dy = at(y, x - 1) - at(y - 1, x - 1);
            terms.push((0.5 * (dx * dx + dy * dy)).sqrt());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn oracle_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt()
}

pub fn oracle_cc(ir: &Plane, vis: &Plane, f: &Plane) -> f64 {
    0.5 * (oracle_corr(&f.data, &ir.data) + oracle_corr(&f.data, &vis.data))
}

pub fn oracle_scd(ir: &Plane, vis: &Plane, f: &Plane) -> f64 {
    let d1: Vec<f64> = f.data.iter().zip(&vis.data).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = f.data.iter().zip(&ir.data).map(|(a, b)| a - b).collect();
    oracle_corr(&d1, &ir.data) + oracle_corr(&d2, &vis.data)
}

pub fn sobel(img: &Plane) -> Vec<(f64, f64)> {
    let (h, w) = (img.height as isize, img.width as isize);
    let px = |y: isize, x: isize| img.data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let kx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for t in 0..9 {
                let v = px(y + t / 3 - 1, x + t % 3 - 1);
                gx += kx[t as usize] * v;
                gy += ky[t as usize] * v;
            }
            let angle = if gx == 0.0 { std::f64::consts::FRAC_PI_2 } else { (gy / gx).atan() };
            out.push((gx.hypot(gy), angle));
        }
    }
    out
}

pub fn preservation((ga, aa): (f64, f64), (gf, af): (f64, f64)) -> f64 {
    let g = if ga > gf { gf / ga } else if gf > 0.0 { ga / gf } else { 0.0 };
    let a = 1.0 - (aa - af).abs() * 2.0 / std::f64::consts::PI;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

pub fn oracle_qabf(ir: &Plane, vis: &Plane, f: &Plane) -> f64 {
    let (sa, sb, sf) = (sobel(ir), sobel(vis), sobel(f));
    let num: f64 = (0..sf.len())
        .map(|i| preservation(sa[i], sf[i]) * sa[i].0 + preservation(sb[i], sf[i]) * sb[i].0)
        .sum();
    let den: f64 = (0..sf.len()).map(|i| sa[i].0 + sb[i].0).sum();
    num / den
}

pub fn oracle_ssim_pair(x: &Plane, y: &Plane) -> f64 {
    // fitted window for an 8x8 image
    let win = 7;
    let c = 3.0;
    let mut g = vec![0.0; win * win];
    for i in 0..win * win {
        let (r, q) = ((i / win) as f64, (i % win) as f64);
        g[i] = (-((r - c).powi(2) + (q - c).powi(2)) / 4.5).exp();
    }
    let s: f64 = g.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let out = x.height - win + 1;
    for oy in 0..out {
        for ox in 0..out {
            let pick = |p: &Plane, i: usize| p.data[(oy + i / win) * x.width + ox + i % win];
            let mx: f64 = (0..win * win).map(|i| g[i] / s * pick(x, i)).sum();
            let my: f64 = (0..win * win).map(|i| g[i] / s * pick(y, i)).sum();
            let vx: f64 = (0..win * win).map(|i| g[i] / s * (pick(x, i) - mx).powi(2)).sum();
            let vy: f64 = (0..win * win).map(|i| g[i] / s * (pick(y, i) - my).powi(2)).sum();
            let cv: f64 = (0..win * win).map(|i| g[i] / s * (pick(x, i) - mx) * (pick(y, i) - my)).sum();
            total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (out * out) as f64
}
