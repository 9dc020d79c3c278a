//! Raw forward and backward kernels over flat NCHW buffers. The tape in
//! `tape.rs` owns shape checking; everything here assumes valid geometry.

use super::scalar::{count, Scalar};

/// `c = beta * c + a · b` where `a` is m×k and `b` is k×n. The `*_t` flags
/// mean the operand is stored transposed (k×m or n×k respectively).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], beta: T) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // extents of slices whose lengths are asserted to match.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane_out = g.oh * g.ow;
    for c in 0..g.cin {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let plane_out = g.oh * g.ow;
    for c in 0..g.cin {
        let dst = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane_out]
    };
    for b in 0..g.n {
        let x = &input[b * plane_in..(b + 1) * plane_in];
        let y = &mut out[b * g.cout * plane_out..(b + 1) * g.cout * plane_out];
        for (co, row) in y.chunks_exact_mut(plane_out).enumerate() {
            row.fill(bias[co]);
        }
        let patches: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(g.cout, g.patch_len(), plane_out, kernel, false, patches, false, y, T::one());
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.oh * g.ow;
    let q = g.patch_len();
    let mut grad_input = need[0].then(|| vec![T::zero(); input.len()]);
    let mut grad_kernel = need[1].then(|| vec![T::zero(); kernel.len()]);
    let mut grad_bias = need[2].then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); q * plane_out] };
    let mut dcols = if pointwise || !need[0] {
        Vec::new()
    } else {
        vec![T::zero(); q * plane_out]
    };
    for b in 0..g.n {
        let x = &input[b * plane_in..(b + 1) * plane_in];
        let dy = &grad_out[b * g.cout * plane_out..(b + 1) * g.cout * plane_out];
        if let Some(gb) = grad_bias.as_mut() {
            for (co, row) in dy.chunks_exact(plane_out).enumerate() {
                gb[co] += T::of(row.iter().map(|v| v.as_f64()).sum::<f64>());
            }
        }
        if let Some(gk) = grad_kernel.as_mut() {
            let patches: &[T] = if pointwise {
                x
            } else {
                im2col(x, g, &mut cols);
                &cols
            };
            gemm(g.cout, plane_out, q, dy, false, patches, true, gk, T::one());
        }
        if let Some(gi) = grad_input.as_mut() {
            let gi = &mut gi[b * plane_in..(b + 1) * plane_in];
            if pointwise {
                gemm(q, g.cout, plane_out, kernel, true, dy, false, gi, T::one());
            } else {
                gemm(q, g.cout, plane_out, kernel, true, dy, false, &mut dcols, T::zero());
                col2im(&dcols, g, gi);
            }
        }
    }
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    /// Valid input rows/cols covered by output cell `(oy, ox)`.
    fn window_bounds(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        let y1 = (y0 + self.window as isize).min(self.h as isize) as usize;
        let x1 = (x0 + self.window as isize).min(self.w as isize) as usize;
        (y0.max(0) as usize, y1, x0.max(0) as usize, x1)
    }
}

/// Max pooling; returns the output and, per output element, the flat input
/// index that won (first maximum in scan order).
pub(crate) fn maxpool_forward<T: Scalar>(input: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = Vec::with_capacity(g.planes * plane_out);
    let mut argmax = Vec::with_capacity(g.planes * plane_out);
    for p in 0..g.planes {
        let src = &input[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_bounds(oy, ox);
                let mut best = T::neg_infinity();
                let mut best_idx = y0 * g.w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = src[y * g.w + x];
                        if v > best {
                            best = v;
                            best_idx = y * g.w + x;
                        }
                    }
                }
                out.push(best);
                argmax.push((p * plane_in + best_idx) as u32);
            }
        }
    }
    (out, argmax)
}

/// Average pooling over the in-bounds part of each window; padded cells are
/// not counted, so a constant field stays constant at the borders.
pub(crate) fn avgpool_forward<T: Scalar>(input: &[T], g: &PoolGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    for p in 0..g.planes {
        let src = &input[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_bounds(oy, ox);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * g.w + x].as_f64();
                    }
                }
                out.push(T::of(acc / ((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(grad_out: &[T], g: &PoolGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut grad = vec![T::zero(); g.planes * plane_in];
    for p in 0..g.planes {
        let dst = &mut grad[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window_bounds(oy, ox);
                let share = grad_out[p * plane_out + oy * g.ow + ox] / count::<T>((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst[y * g.w + x] += share;
                    }
                }
            }
        }
    }
    grad
}

/// Bin `[start, end)` of output cell `i` when splitting `len` into `bins`.
pub(crate) fn adaptive_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub(crate) fn adaptive_avgpool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * w + x].as_f64();
                    }
                }
                out.push(T::of(acc / ((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avgpool_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let share = grad_out[p * oh * ow + oy * ow + ox] / count::<T>((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst[y * w + x] += share;
                    }
                }
            }
        }
    }
    grad
}

/// Corner-aligned source coordinate: the two lower/upper taps and the weight
/// of the upper one.
fn aligned_taps<T: Scalar>(i: usize, src_len: usize, dst_len: usize) -> (usize, usize, T) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0, T::zero());
    }
    let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, T::of(pos - lo as f64))
}

pub(crate) fn upsample_bilinear_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows: Vec<(usize, usize, T)> = (0..oh).map(|y| aligned_taps(y, h, oh)).collect();
    let cols: Vec<(usize, usize, T)> = (0..ow).map(|x| aligned_taps(x, w, ow)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let rows: Vec<(usize, usize, T)> = (0..oh).map(|y| aligned_taps(y, h, oh)).collect();
    let cols: Vec<(usize, usize, T)> = (0..ow).map(|x| aligned_taps(x, w, ow)).collect();
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w + x0] += g * fy * (T::one() - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    grad
}

/// Edge-replicating pad of every plane by `pad` on all four sides.
pub(crate) fn pad_replicate_forward<T: Scalar>(input: &[T], planes: usize, (h, w): (usize, usize), pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(pad).min(w - 1);
                out.push(src[sy * w + sx]);
            }
        }
    }
    out
}

pub(crate) fn pad_replicate_backward<T: Scalar>(grad_out: &[T], planes: usize, (h, w): (usize, usize), pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * ph * pw..(p + 1) * ph * pw];
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(pad).min(w - 1);
                dst[sy * w + sx] += src[y * pw + x];
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let a_t = [1.0, 3.0, 2.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let b_t = [5.0, 7.0, 6.0, 8.0];
        let expected = [19.0, 22.0, 43.0, 50.0];
        for (aa, at) in [(&a, false), (&a_t, true)] {
            for (bb, bt) in [(&b, false), (&b_t, true)] {
                let mut c = [0.0; 4];
                gemm(2, 2, 2, aa, at, bb, bt, &mut c, 0.0);
                assert_eq!(c, expected);
            }
        }
    }

    #[test]
    fn adaptive_bins_cover_the_axis() {
        for len in 1..12 {
            for bins in 1..=len {
                let mut covered = vec![false; len];
                for i in 0..bins {
                    let (s, e) = adaptive_bin(i, len, bins);
                    assert!(s < e && e <= len);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn replicate_pad_copies_edges() {
        let out = pad_replicate_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, (2, 2), 1);
        assert_eq!(
            out,
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }
}
