//! im2col convolution kernels shared by the tape's forward and backward passes.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

pub fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut cols = vec![F::zero(); g.patch_len() * plane];
    for c in 0..g.in_c {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_add<F: Real>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_c {
        let dst = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, cols)`; `cols` is kept for the backward pass.
pub fn forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: &ConvGeom) -> (Vec<F>, Vec<F>) {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let cols = im2col(x, g);
    let mut out = vec![F::zero(); g.out_c * plane];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    F::gemm(
        g.out_c,
        kk,
        plane,
        F::one(),
        w,
        kk as isize,
        1,
        &cols,
        plane as isize,
        1,
        beta,
        &mut out,
        plane as isize,
        1,
    );
    (out, cols)
}

pub fn backward_weight<F: Real>(gy: &[F], cols: &[F], g: &ConvGeom, dw: &mut [F]) {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    F::gemm(
        g.out_c,
        plane,
        kk,
        F::one(),
        gy,
        plane as isize,
        1,
        cols,
        1,
        plane as isize,
        F::one(),
        dw,
        kk as isize,
        1,
    );
}

pub fn backward_bias<F: Real>(gy: &[F], g: &ConvGeom, db: &mut [F]) {
    let plane = g.out_h() * g.out_w();
    for (o, chunk) in gy.chunks(plane).enumerate() {
        db[o] += chunk.iter().copied().sum();
    }
}

pub fn backward_input<F: Real>(gy: &[F], w: &[F], g: &ConvGeom, dx: &mut [F]) {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let mut dcols = vec![F::zero(); kk * plane];
    F::gemm(
        kk,
        g.out_c,
        plane,
        F::one(),
        w,
        1,
        kk as isize,
        gy,
        plane as isize,
        1,
        F::zero(),
        &mut dcols,
        plane as isize,
        1,
    );
    col2im_add(&dcols, g, dx);
}
