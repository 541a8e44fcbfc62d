//! NHWC `f32` building blocks with hand-written backward passes.

/// Activation batch in B×H×W×C layout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self { b, h, w, c, data: vec![0.0; b * h * w * c] }
    }

    pub fn rows(&self) -> usize {
        self.b * self.h * self.w
    }
}

/// `c = a·b + beta·c` on row-major buffers given by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Patch matrix for a 3×3 same-padded convolution: one row per pixel,
/// columns ordered (ky, kx, channel).
pub(crate) fn im2col3(x: &Act) -> Vec<f32> {
    let (h, w, c) = (x.h, x.w, x.c);
    let width = 9 * c;
    let mut cols = vec![0.0f32; x.rows() * width];
    for b in 0..x.b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im3(dcols: &[f32], b: usize, h: usize, w: usize, c: usize) -> Act {
    let width = 9 * c;
    let mut out = Act::zeros(b, h, w, c);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * width;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (o, &g) in out.data[dst..dst + c].iter_mut().zip(&dcols[src..src + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max pooling; also returns which of the four inputs won (row-major
/// within the window, first maximum on ties).
pub(crate) fn maxpool2(x: &Act) -> (Act, Vec<u8>) {
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = Act::zeros(x.b, oh, ow, c);
    let mut arg = vec![0u8; out.data.len()];
    for b in 0..x.b {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((b * oh + y) * ow + xx) * c;
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut which = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = x.data[((b * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * c + ch];
                        if v > best {
                            best = v;
                            which = i as u8;
                        }
                    }
                    out.data[o + ch] = best;
                    arg[o + ch] = which;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dout: &Act, arg: &[u8], h: usize, w: usize) -> Act {
    let c = dout.c;
    let mut dx = Act::zeros(dout.b, h, w, c);
    for b in 0..dout.b {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                let o = ((b * dout.h + y) * dout.w + xx) * c;
                for ch in 0..c {
                    let a = arg[o + ch] as usize;
                    let (dy, dxo) = (a / 2, a % 2);
                    dx.data[((b * h + 2 * y + dy) * w + 2 * xx + dxo) * c + ch] += dout.data[o + ch];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(x: &Act) -> Act {
    let (oh, ow, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Act::zeros(x.b, oh, ow, c);
    for b in 0..x.b {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * x.h + y / 2) * x.w + xx / 2) * c;
                let dst = ((b * oh + y) * ow + xx) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Act) -> Act {
    let (h, w, c) = (dout.h / 2, dout.w / 2, dout.c);
    let mut dx = Act::zeros(dout.b, h, w, c);
    for b in 0..dout.b {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                let src = ((b * dout.h + y) * dout.w + xx) * c;
                let dst = ((b * h + y / 2) * w + xx / 2) * c;
                for (o, &g) in dx.data[dst..dst + c].iter_mut().zip(&dout.data[src..src + c]) {
                    *o += g;
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]`.
pub(crate) fn concat(a: &Act, b: &Act) -> Act {
    let c = a.c + b.c;
    let mut out = Act::zeros(a.b, a.h, a.w, c);
    for ((o, x), y) in out.data.chunks_exact_mut(c).zip(a.data.chunks_exact(a.c)).zip(b.data.chunks_exact(b.c)) {
        o[..a.c].copy_from_slice(x);
        o[a.c..].copy_from_slice(y);
    }
    out
}

pub(crate) fn split(d: &Act, first: usize) -> (Act, Act) {
    let second = d.c - first;
    let mut a = Act::zeros(d.b, d.h, d.w, first);
    let mut b = Act::zeros(d.b, d.h, d.w, second);
    for ((g, x), y) in d.data.chunks_exact(d.c).zip(a.data.chunks_exact_mut(first)).zip(b.data.chunks_exact_mut(second)) {
        x.copy_from_slice(&g[..first]);
        y.copy_from_slice(&g[first..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, h: usize, w: usize, c: usize) -> Act {
        let mut a = Act::zeros(b, h, w, c);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 - 5.0;
        }
        a
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i % 5) as f32 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 3) as f32 + 0.5).collect();
        let mut c = vec![1.0f32; m * n];
        gemm(m, k, n, &a, k, 1, &b, n, 1, 1.0, &mut c, n);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f32>();
                assert_eq!(c[i * n + j], want);
            }
        }
    }

    // <im2col(x), y> == <x, col2im(y)> pins the backward pass to the forward one.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = ramp(2, 4, 6, 3);
        let cols = im2col3(&x);
        let y: Vec<f32> = (0..cols.len()).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
        let back = col2im3(&y, 2, 4, 6, 3);
        assert_eq!(dot(&cols, &y), dot(&x.data, &back.data));
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let x = ramp(2, 4, 4, 3);
        let (p, arg) = maxpool2(&x);
        let y = ramp(2, 2, 2, 3);
        let back = maxpool2_backward(&y, &arg, 4, 4);
        assert_eq!(dot(&p.data, &y.data), dot(&x.data, &back.data));

        let u = upsample2(&y);
        let d = ramp(2, 4, 4, 3);
        assert_eq!(dot(&u.data, &d.data), dot(&y.data, &upsample2_backward(&d).data));
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = Act { b: 1, h: 2, w: 2, c: 1, data: vec![1.0, 4.0, 3.0, 2.0] };
        let (p, arg) = maxpool2(&x);
        assert_eq!((p.data, arg), (vec![4.0], vec![1]));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = ramp(1, 3, 3, 2);
        let b = ramp(1, 3, 3, 5);
        let (a2, b2) = split(&concat(&a, &b), 2);
        assert_eq!((a2, b2), (a, b));
    }
}
