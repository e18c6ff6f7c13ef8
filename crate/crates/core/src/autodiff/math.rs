//! Dense kernels shared by the tape ops: row-major matmul and the
//! im2col/col2im pair that backs convolution.

/// `out += a · b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `a · b` into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out += g · bᵀ` with `g: [m,n]`, `b: [k,n]`, `out: [m,k]`.
/// This is the gradient of `a` in `c = a · b`.
pub fn matmul_abt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row.iter()) {
                acc += gv * bv;
            }
            out_row[p] += acc;
        }
    }
}

/// `out += aᵀ · g` with `a: [m,k]`, `g: [m,n]`, `out: [k,n]`.
/// This is the gradient of `b` in `c = a · b`.
pub fn matmul_atb_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row.iter()) {
                *o += a_ip * gv;
            }
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Unfold one `[c,h,w]` sample into a `[c*kh*kw, oh*ow]` patch matrix so that
/// cross-correlation becomes a single matmul against the flattened kernel.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut col = vec![0.0; c * kh * kw * oh * ow];
    for ci in 0..c {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst_row + ox] = x_plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold a `[c*kh*kw, oh*ow]` patch-gradient matrix back onto the input,
/// accumulating where patches overlap. Inverse scatter of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    for ci in 0..c {
        let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx_plane[dst_row + ix as usize] += col[src_row + ox];
                    }
                }
            }
        }
    }
}
