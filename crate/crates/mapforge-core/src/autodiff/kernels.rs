//! Raw numeric kernels behind the expression primitives.
//!
//! All loops are written with a unit-stride innermost axis so the compiler
//! can vectorize them; the convolution trio keeps the stored axis (output
//! channels or input channels) innermost for that reason.

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Cross-correlation of `x [n,h,w,ci]` with `k [kh,kw,ci,co]`, stride 1,
/// symmetric zero padding `pad`; output `[n,oh,ow,co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    k: &[f32],
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0f32; n * oh * ow * co];

    for img in 0..n {
        for orow in 0..oh {
            for krow in 0..kh {
                let irow = orow + krow;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let out_base = ((img * oh + orow) * ow + ocol) * co;
                    for kcol in 0..kw {
                        let icol = ocol + kcol;
                        if icol < pad || icol >= w + pad {
                            continue;
                        }
                        let icol = icol - pad;
                        let x_base = ((img * h + irow) * w + icol) * ci;
                        let k_base = (krow * kw + kcol) * ci * co;
                        let out_row = &mut out[out_base..out_base + co];
                        for c in 0..ci {
                            let xv = x[x_base + c];
                            let k_row = &k[k_base + c * co..k_base + (c + 1) * co];
                            for o in 0..co {
                                out_row[o] += xv * k_row[o];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to the image:
/// `dx[n,ih,iw,ci] = Σ_{kh,kw,co} up[n, ih−kh+pad, iw−kw+pad, co] · k[kh,kw,ci,co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    up: &[f32],
    k: &[f32],
    n: usize,
    oh: usize,
    ow: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ci: usize,
    pad: usize,
) -> Vec<f32> {
    let h = oh + kh - 1 - 2 * pad;
    let w = ow + kw - 1 - 2 * pad;
    let mut dx = vec![0.0f32; n * h * w * ci];

    // Transposed kernel [kh,kw,co,ci] keeps the scatter axis (ci) unit-stride.
    let mut kt = vec![0.0f32; k.len()];
    for krow in 0..kh {
        for kcol in 0..kw {
            let base = (krow * kw + kcol) * ci * co;
            for c in 0..ci {
                for o in 0..co {
                    kt[base + o * ci + c] = k[base + c * co + o];
                }
            }
        }
    }

    for img in 0..n {
        for orow in 0..oh {
            for krow in 0..kh {
                let irow = orow + krow;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let up_base = ((img * oh + orow) * ow + ocol) * co;
                    for kcol in 0..kw {
                        let icol = ocol + kcol;
                        if icol < pad || icol >= w + pad {
                            continue;
                        }
                        let icol = icol - pad;
                        let dx_base = ((img * h + irow) * w + icol) * ci;
                        let kt_base = (krow * kw + kcol) * ci * co;
                        let dx_row = &mut dx[dx_base..dx_base + ci];
                        for o in 0..co {
                            let uv = up[up_base + o];
                            let kt_row = &kt[kt_base + o * ci..kt_base + (o + 1) * ci];
                            for c in 0..ci {
                                dx_row[c] += uv * kt_row[c];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv2d`] with respect to the kernel:
/// `dk[kh,kw,ci,co] = Σ_{n,oh,ow} x[n, oh+kh−pad, ow+kw−pad, ci] · up[n,oh,ow,co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    x: &[f32],
    up: &[f32],
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    oh: usize,
    ow: usize,
    co: usize,
    pad: usize,
) -> Vec<f32> {
    let kh = h + 2 * pad + 1 - oh;
    let kw = w + 2 * pad + 1 - ow;
    let mut dk = vec![0.0f32; kh * kw * ci * co];

    for img in 0..n {
        for orow in 0..oh {
            for krow in 0..kh {
                let irow = orow + krow;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let up_base = ((img * oh + orow) * ow + ocol) * co;
                    for kcol in 0..kw {
                        let icol = ocol + kcol;
                        if icol < pad || icol >= w + pad {
                            continue;
                        }
                        let icol = icol - pad;
                        let x_base = ((img * h + irow) * w + icol) * ci;
                        let dk_base = (krow * kw + kcol) * ci * co;
                        for c in 0..ci {
                            let xv = x[x_base + c];
                            let dk_row = &mut dk[dk_base + c * co..dk_base + (c + 1) * co];
                            let up_row = &up[up_base..up_base + co];
                            for o in 0..co {
                                dk_row[o] += xv * up_row[o];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Sum over the last axes so that each contiguous `chunk` collapses to one value.
pub fn reduce_suffix(x: &[f32], chunk: usize) -> Vec<f32> {
    debug_assert_eq!(x.len() % chunk, 0);
    x.chunks_exact(chunk)
        .map(|c| c.iter().sum::<f32>())
        .collect()
}

pub fn broadcast_suffix(x: &[f32], chunk: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len() * chunk];
    for (i, &v) in x.iter().enumerate() {
        out[i * chunk..(i + 1) * chunk].fill(v);
    }
    out
}

/// Sum over the leading axes: `lead` repetitions of a `rest`-sized block.
pub fn reduce_prefix(x: &[f32], lead: usize, rest: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), lead * rest);
    let mut out = vec![0.0f32; rest];
    for l in 0..lead {
        let block = &x[l * rest..(l + 1) * rest];
        for (o, &v) in out.iter_mut().zip(block.iter()) {
            *o += v;
        }
    }
    out
}

pub fn broadcast_prefix(x: &[f32], lead: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len() * lead);
    for _ in 0..lead {
        out.extend_from_slice(x);
    }
    out
}

/// Numerically stable row-wise softmax of a `[n, k]` matrix.
pub fn softmax_rows(z: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * k];
    for row in 0..n {
        let zr = &z[row * k..(row + 1) * k];
        let or = &mut out[row * k..(row + 1) * k];
        let m = zr.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0f32;
        for (o, &v) in or.iter_mut().zip(zr.iter()) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        }
        let inv = 1.0 / denom;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Per-row `−log softmax(z)[label]` via the stable log-sum-exp form.
pub fn sce_loss(z: &[f32], labels: &[usize], n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for row in 0..n {
        let zr = &z[row * k..(row + 1) * k];
        let m = zr.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f32 = zr.iter().map(|&v| (v - m).exp()).sum();
        out[row] = m + sum.ln() - zr[labels[row]];
    }
    out
}

pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let out = matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(out, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn conv2d_hand_checked() {
        // 1x3x3x1 image, 2x2x1x1 kernel, no padding.
        let x = [1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let k = [1., 0., 0., 1.]; // picks top-left + bottom-right of each window
        let y = conv2d(&x, &k, 1, 3, 3, 1, 2, 2, 1, 0);
        assert_eq!(y, vec![1. + 5., 2. + 6., 4. + 8., 5. + 9.]);
    }

    #[test]
    fn conv2d_padding_adds_zero_border() {
        // 1x1x1x1 image with a 3x3 kernel and pad 1: each output position
        // sees the single pixel through a different kernel tap.
        let x = [2.0];
        let k: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let y = conv2d(&x, &k, 1, 1, 1, 1, 3, 3, 1, 1);
        // Output is 1x1: only the center tap (k[4] = 5) overlaps the pixel.
        assert_eq!(y, vec![10.0]);
    }

    #[test]
    fn conv_adjoints_match_inner_product_identities() {
        // <up, conv(x,k)> == <conv_input_grad(up,k), x> == <conv_kernel_grad(x,up), k>
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, h, w, ci, kh, kw, co, pad) = (2, 5, 4, 3, 3, 2, 2, 1);
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        let x: Vec<f32> = (0..n * h * w * ci).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..kh * kw * ci * co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f32> = (0..n * oh * ow * co).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let y = conv2d(&x, &k, n, h, w, ci, kh, kw, co, pad);
        let dx = conv2d_input_grad(&up, &k, n, oh, ow, co, kh, kw, ci, pad);
        let dk = conv2d_kernel_grad(&x, &up, n, h, w, ci, oh, ow, co, pad);

        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum()
        };
        let lhs = dot(&up, &y);
        assert!((lhs - dot(&dx, &x)).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - dot(&dk, &k)).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 2, 3);
        for row in s.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sce_loss_uniform_logits_is_log_k() {
        let loss = sce_loss(&[0.0, 0.0], &[0], 1, 2);
        assert!((loss[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sign(3.5), 1.0);
        assert_eq!(sign(-0.1), -1.0);
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
    }
}
