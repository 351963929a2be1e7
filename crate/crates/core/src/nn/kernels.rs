//! Forward/backward kernels over raw buffers.
//!
//! Convolution lowers to im2col + SGEMM. All reductions run in a fixed order,
//! so results are bit-stable between runs of the same build.

use super::tensor::Shape5;
use crate::error::{Error, Result};
use crate::par;

#[inline]
fn vox(s: &Shape5) -> usize {
    s[2] * s[3] * s[4]
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Builds the `[C·kd·kh·kw, D·H·W]` patch matrix for one sample with "same"
/// zero padding.
fn im2col(x: &[f32], c: usize, sp: [usize; 3], k: [usize; 3], cols: &mut [f32]) {
    let [d, h, w] = sp;
    let n = d * h * w;
    let taps = k[0] * k[1] * k[2];
    let pad = [(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2];
    par::for_each_chunk_mut(&mut cols[..c * taps * n], n, |row, dst| {
        let ch = row / taps;
        let t = row % taps;
        let (kz, ky, kx) = (t / (k[1] * k[2]), (t / k[2]) % k[1], t % k[2]);
        let src = &x[ch * n..(ch + 1) * n];
        let x_lo = pad[2].saturating_sub(kx);
        let x_hi = (w + pad[2]).saturating_sub(kx).min(w);
        for z in 0..d {
            let sz = z as isize + kz as isize - pad[0] as isize;
            for y in 0..h {
                let sy = y as isize + ky as isize - pad[1] as isize;
                let o = (z * h + y) * w;
                let out = &mut dst[o..o + w];
                if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x_lo >= x_hi {
                    out.fill(0.0);
                    continue;
                }
                let base = (sz as usize * h + sy as usize) * w;
                out[..x_lo].fill(0.0);
                out[x_hi..].fill(0.0);
                let sx0 = x_lo + kx - pad[2];
                out[x_lo..x_hi].copy_from_slice(&src[base + sx0..base + sx0 + (x_hi - x_lo)]);
            }
        }
    });
}

/// Scatters a patch matrix back onto the input grid (adjoint of [`im2col`]).
fn col2im(cols: &[f32], c: usize, sp: [usize; 3], k: [usize; 3], dx: &mut [f32]) {
    let [d, h, w] = sp;
    let n = d * h * w;
    let taps = k[0] * k[1] * k[2];
    let pad = [(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2];
    par::for_each_chunk_mut(&mut dx[..c * n], n, |ch, dst| {
        for t in 0..taps {
            let (kz, ky, kx) = (t / (k[1] * k[2]), (t / k[2]) % k[1], t % k[2]);
            let src = &cols[(ch * taps + t) * n..(ch * taps + t + 1) * n];
            let x_lo = pad[2].saturating_sub(kx);
            let x_hi = (w + pad[2]).saturating_sub(kx).min(w);
            if x_lo >= x_hi {
                continue;
            }
            for z in 0..d {
                let sz = z as isize + kz as isize - pad[0] as isize;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad[1] as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let o = (z * h + y) * w;
                    let base = (sz as usize * h + sy as usize) * w + x_lo + kx - pad[2];
                    for (a, &b) in dst[base..base + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[o + x_lo..o + x_hi])
                    {
                        *a += b;
                    }
                }
            }
        }
    });
}

pub(crate) fn check_conv(xs: &Shape5, ws: &Shape5, bias_len: usize) -> Result<()> {
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv input has {} channels, kernel expects {}",
            xs[1], ws[1]
        )));
    }
    if ws[2..].iter().any(|&k| k % 2 == 0) {
        return Err(Error::shape(format!("kernel dims {:?} must be odd", &ws[2..])));
    }
    if bias_len != ws[0] {
        return Err(Error::shape(format!(
            "bias length {bias_len} != out channels {}",
            ws[0]
        )));
    }
    Ok(())
}

/// "Same"-padded 3D convolution; output shape `[B, out_ch, D, H, W]`.
pub fn conv3d_forward(x: &[f32], xs: Shape5, w: &[f32], ws: Shape5, b: &[f32]) -> Result<Vec<f32>> {
    check_conv(&xs, &ws, b.len())?;
    let (oc, ic) = (ws[0], ws[1]);
    let k = [ws[2], ws[3], ws[4]];
    let taps = k[0] * k[1] * k[2];
    let kk = ic * taps;
    let sp = [xs[2], xs[3], xs[4]];
    let n = vox(&xs);
    let mut out = vec![0f32; xs[0] * oc * n];
    let mut cols = if taps == 1 { Vec::new() } else { vec![0f32; kk * n] };
    for bi in 0..xs[0] {
        let xb = &x[bi * ic * n..(bi + 1) * ic * n];
        let ob = &mut out[bi * oc * n..(bi + 1) * oc * n];
        for (o, &bv) in b.iter().enumerate() {
            ob[o * n..(o + 1) * n].fill(bv);
        }
        let colm: &[f32] = if taps == 1 {
            xb
        } else {
            im2col(xb, ic, sp, k, &mut cols);
            &cols
        };
        gemm(oc, kk, n, w, (kk as isize, 1), colm, (n as isize, 1), 1.0, ob);
    }
    Ok(out)
}

/// Gradients of a "same" convolution. Returns `(dx, dw, db)`; `dx` is only
/// computed when `need_dx`.
pub fn conv3d_backward(
    x: &[f32],
    xs: Shape5,
    w: &[f32],
    ws: Shape5,
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (oc, ic) = (ws[0], ws[1]);
    let k = [ws[2], ws[3], ws[4]];
    let taps = k[0] * k[1] * k[2];
    let kk = ic * taps;
    let sp = [xs[2], xs[3], xs[4]];
    let n = vox(&xs);
    let mut dw = vec![0f32; oc * kk];
    let mut db = vec![0f32; oc];
    let mut dx = need_dx.then(|| vec![0f32; x.len()]);
    let mut cols = if taps == 1 { Vec::new() } else { vec![0f32; kk * n] };
    let mut dcols = if need_dx { vec![0f32; kk * n] } else { Vec::new() };
    for bi in 0..xs[0] {
        let xb = &x[bi * ic * n..(bi + 1) * ic * n];
        let dyb = &dy[bi * oc * n..(bi + 1) * oc * n];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dyb[o * n..(o + 1) * n].iter().sum::<f32>();
        }
        let colm: &[f32] = if taps == 1 {
            xb
        } else {
            im2col(xb, ic, sp, k, &mut cols);
            &cols
        };
        // dW[oc, kk] += dY[oc, n] · colsᵀ[n, kk]
        gemm(oc, n, kk, dyb, (n as isize, 1), colm, (1, n as isize), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * ic * n..(bi + 1) * ic * n];
            if taps == 1 {
                // dX[ic, n] = Wᵀ[ic, oc] · dY[oc, n]
                gemm(ic, oc, n, w, (1, kk as isize), dyb, (n as isize, 1), 0.0, dxb);
            } else {
                gemm(kk, oc, n, w, (1, kk as isize), dyb, (n as isize, 1), 0.0, &mut dcols);
                col2im(&dcols, ic, sp, k, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling. Returns output and, per output element, the flat input index
/// of its maximum (first occurrence on ties).
pub fn maxpool3d_forward(x: &[f32], xs: Shape5, win: [usize; 3]) -> Result<(Vec<f32>, Shape5, Vec<u32>)> {
    if win.iter().any(|&p| p == 0) {
        return Err(Error::shape("pool window must be >= 1"));
    }
    for a in 0..3 {
        if xs[2 + a] % win[a] != 0 {
            return Err(Error::shape(format!(
                "spatial dims {:?} not divisible by pool window {win:?}",
                &xs[2..]
            )));
        }
    }
    let os = [xs[0], xs[1], xs[2] / win[0], xs[3] / win[1], xs[4] / win[2]];
    let (h, w) = (xs[3], xs[4]);
    let on = vox(&os);
    let n = vox(&xs);
    let planes = xs[0] * xs[1];
    let mut out = vec![0f32; planes * on];
    let mut arg = vec![0u32; planes * on];
    let results = par::map_range(planes, |p| {
        let src = &x[p * n..(p + 1) * n];
        let mut o = Vec::with_capacity(on);
        let mut a = Vec::with_capacity(on);
        for z in 0..os[2] {
            for y in 0..os[3] {
                for xo in 0..os[4] {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    for dz in 0..win[0] {
                        for dy in 0..win[1] {
                            let row = ((z * win[0] + dz) * h + y * win[1] + dy) * w + xo * win[2];
                            for dx in 0..win[2] {
                                let v = src[row + dx];
                                if bi == usize::MAX || v > best || (v.is_nan() && !best.is_nan()) {
                                    best = v;
                                    bi = row + dx;
                                }
                            }
                        }
                    }
                    o.push(best);
                    a.push((p * n + bi) as u32);
                }
            }
        }
        (o, a)
    });
    for (p, (o, a)) in results.into_iter().enumerate() {
        out[p * on..(p + 1) * on].copy_from_slice(&o);
        arg[p * on..(p + 1) * on].copy_from_slice(&a);
    }
    Ok((out, os, arg))
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample3d_forward(x: &[f32], xs: Shape5, f: [usize; 3]) -> (Vec<f32>, Shape5) {
    let os = [xs[0], xs[1], xs[2] * f[0], xs[3] * f[1], xs[4] * f[2]];
    let (n, on) = (vox(&xs), vox(&os));
    let mut out = vec![0f32; xs[0] * xs[1] * on];
    par::for_each_chunk_mut(&mut out, on, |p, dst| {
        let src = &x[p * n..(p + 1) * n];
        for z in 0..os[2] {
            for y in 0..os[3] {
                let srow = ((z / f[0]) * xs[3] + y / f[1]) * xs[4];
                let drow = (z * os[3] + y) * os[4];
                for xo in 0..os[4] {
                    dst[drow + xo] = src[srow + xo / f[2]];
                }
            }
        }
    });
    (out, os)
}

/// Adjoint of [`upsample3d_forward`]: sums each replicated block.
pub fn upsample3d_backward(dy: &[f32], xs: Shape5, f: [usize; 3]) -> Vec<f32> {
    let os = [xs[0], xs[1], xs[2] * f[0], xs[3] * f[1], xs[4] * f[2]];
    let (n, on) = (vox(&xs), vox(&os));
    let mut dx = vec![0f32; xs[0] * xs[1] * n];
    par::for_each_chunk_mut(&mut dx, n, |p, dst| {
        let src = &dy[p * on..(p + 1) * on];
        for z in 0..os[2] {
            for y in 0..os[3] {
                let drow = ((z / f[0]) * xs[3] + y / f[1]) * xs[4];
                let srow = (z * os[3] + y) * os[4];
                for xo in 0..os[4] {
                    dst[drow + xo / f[2]] += src[srow + xo];
                }
            }
        }
    });
    dx
}
