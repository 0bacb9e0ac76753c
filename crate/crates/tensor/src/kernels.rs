//! Dense numeric kernels: matrix multiply, im2col/col2im, bilinear resampling and pooling.
//!
//! All buffers are row-major `f64`. Tensors are laid out NCHW by the callers.

use rayon::prelude::*;

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 20;

#[derive(Clone, Copy)]
struct SendPtr(*const f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// `c (m×n) = a · b (+ c when accumulate)`.
///
/// `a` is stored `m×k` row-major, or `k×m` when `a_t`; likewise `b` is `k×n` or `n×k` when `b_t`.
/// Work is split over rows of `c` only, so each output element is reduced by a single
/// kernel call and the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if b_t { (1isize, k as isize) } else { (n as isize, 1isize) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());

    let run = |row0: usize, rows: usize, c_block: &mut [f64]| {
        let a_ptr = a_ptr;
        let b_ptr = b_ptr;
        // SAFETY: the offsets stay inside `a` (row `row0` of an m×k view) and the
        // strides describe the caller-provided layouts checked by the assert above.
        unsafe {
            let a_off = a_ptr.0.offset(row0 as isize * rsa);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_off,
                rsa,
                csa,
                b_ptr.0,
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    let threads = rayon::current_num_threads();
    if threads <= 1 || m * n * k < PAR_THRESHOLD || m < 2 {
        run(0, m, &mut c[..m * n]);
        return;
    }
    let rows_per = m.div_ceil(threads * 2).max(1);
    c[..m * n]
        .par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(i, block)| run(i * rows_per, block.len() / n, block));
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Window {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span_h = self.dilation.0 * (self.kernel.0 - 1) + 1;
        let span_w = self.dilation.1 * (self.kernel.1 - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span_h || pw < span_w {
            return None;
        }
        Some(((ph - span_h) / self.stride.0 + 1, (pw - span_w) / self.stride.1 + 1))
    }

    /// True when im2col would be the identity (1×1, unit stride, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Unfolds one `c×h×w` image into a `(c·kh·kw) × (oh·ow)` matrix.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize, col: &mut [f64]) {
    let (kh, kw) = win.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let dy = (ky * win.dilation.0) as isize - win.padding.0 as isize;
                let dx = (kx * win.dilation.1) as isize - win.padding.1 as isize;
                for oy in 0..oh {
                    let iy = (oy * win.stride.0) as isize + dy;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride.1) as isize + dx;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `c×h×w` image.
pub fn col2im(col: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize, x: &mut [f64]) {
    let (kh, kw) = win.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let dy = (ky * win.dilation.0) as isize - win.padding.0 as isize;
                let dx = (kx * win.dilation.1) as isize - win.padding.1 as isize;
                for oy in 0..oh {
                    let iy = (oy * win.stride.0) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride.1) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling plan with half-pixel centers (`align_corners = false`):
/// source coordinate `s = (d + 0.5)·in/out − 0.5`, clamped below at 0; the upper
/// neighbour is clamped to the last index.
#[derive(Clone, Debug)]
pub struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisPlan {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            frac.push(s - i0 as f64);
        }
        AxisPlan { lo, hi, frac }
    }
}

/// Bilinear resize of one `h×w` plane to `oh×ow`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, dst: &mut [f64]) {
    if h == oh && w == ow {
        dst[..h * w].copy_from_slice(&src[..h * w]);
        return;
    }
    let py = AxisPlan::new(h, oh);
    let px = AxisPlan::new(w, ow);
    for oy in 0..oh {
        let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for ox in 0..ow {
            let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

/// Adjoint of [`resize_plane`]: accumulates `grad_out` (oh×ow) into `grad_in` (h×w).
pub fn resize_plane_backward(grad_out: &[f64], h: usize, w: usize, oh: usize, ow: usize, grad_in: &mut [f64]) {
    if h == oh && w == ow {
        for (g, d) in grad_in[..h * w].iter_mut().zip(grad_out) {
            *g += d;
        }
        return;
    }
    let py = AxisPlan::new(h, oh);
    let px = AxisPlan::new(w, ow);
    for oy in 0..oh {
        let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
            let g = grad_out[oy * ow + ox];
            grad_in[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            grad_in[y0 * w + x1] += g * (1.0 - fy) * fx;
            grad_in[y1 * w + x0] += g * fy * (1.0 - fx);
            grad_in[y1 * w + x1] += g * fy * fx;
        }
    }
}

/// Max pooling over one plane; padded cells never win. Returns argmax indices into the plane.
pub fn max_pool_plane(src: &[f64], h: usize, w: usize, win: &Window, oh: usize, ow: usize, dst: &mut [f64], arg: &mut [u32]) {
    let (kh, kw) = win.kernel;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for ky in 0..kh {
                let iy = (oy * win.stride.0 + ky * win.dilation.0) as isize - win.padding.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * win.stride.1 + kx * win.dilation.1) as isize - win.padding.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let idx = iy as usize * w + ix as usize;
                    // strict comparison keeps the first maximum; NaN propagates
                    if src[idx] > best || src[idx].is_nan() {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
            }
            dst[oy * ow + ox] = best;
            arg[oy * ow + ox] = best_idx as u32;
        }
    }
}
