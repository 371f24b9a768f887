//! Raw array kernels behind the tape ops. All accumulations follow a fixed,
//! input-independent order, so results are bitwise reproducible across runs.

use crate::scalar::Scalar;

/// y[n,m] = sum_k a[n,k] * b[k,m], accumulation ascending in k.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, y: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(y.len(), n * m);
    for row in 0..n {
        let yrow = &mut y[row * m..(row + 1) * m];
        for v in yrow.iter_mut() {
            *v = T::zero();
        }
        for kk in 0..k {
            let av = a[row * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            for (yv, bv) in yrow.iter_mut().zip(brow) {
                *yv = *yv + av * *bv;
            }
        }
    }
}

/// y[n,m] = sum_k a[n,k] * b[m,k] (b used transposed).
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, y: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(y.len(), n * m);
    for row in 0..n {
        let arow = &a[row * k..(row + 1) * k];
        for col in 0..m {
            let brow = &b[col * k..(col + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            y[row * m + col] = acc;
        }
    }
}

/// y[k,m] = sum_n a[n,k] * b[n,m] (a used transposed), accumulation ascending in n.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, y: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(y.len(), k * m);
    for v in y.iter_mut() {
        *v = T::zero();
    }
    for row in 0..n {
        let brow = &b[row * m..(row + 1) * m];
        for kk in 0..k {
            let av = a[row * k + kk];
            let yrow = &mut y[kk * m..(kk + 1) * m];
            for (yv, bv) in yrow.iter_mut().zip(brow) {
                *yv = *yv + av * *bv;
            }
        }
    }
}

/// Copies each [h,w] plane of `src` into the interior of an [h+2,w+2] plane of
/// `pad`, leaving the one-pixel zero border intact.
fn fill_padded<T: Scalar>(src: &[T], planes: usize, h: usize, w: usize, pad: &mut [T]) {
    let (hp, wp) = (h + 2, w + 2);
    debug_assert_eq!(src.len(), planes * h * w);
    debug_assert_eq!(pad.len(), planes * hp * wp);
    for p in 0..planes {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut pad[p * hp * wp..(p + 1) * hp * wp];
        for row in 0..h {
            dp[(row + 1) * wp + 1..(row + 1) * wp + 1 + w]
                .copy_from_slice(&sp[row * w..(row + 1) * w]);
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1. x: [n,ci,h,w], wgt: [co,ci,3,3],
/// bias: [co], y: [n,co,h,w].
pub fn conv3x3<T: Scalar>(
    x: &[T],
    wgt: &[T],
    bias: &[T],
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    y: &mut [T],
) {
    debug_assert_eq!(x.len(), n * ci * h * w);
    debug_assert_eq!(wgt.len(), co * ci * 9);
    debug_assert_eq!(bias.len(), co);
    debug_assert_eq!(y.len(), n * co * h * w);
    let plane = h * w;
    let (hp, wp) = (h + 2, w + 2);
    let mut pad = vec![T::zero(); ci * hp * wp];
    for nn in 0..n {
        fill_padded(&x[nn * ci * plane..(nn + 1) * ci * plane], ci, h, w, &mut pad);
        let yout = &mut y[nn * co * plane..(nn + 1) * co * plane];
        for oc in 0..co {
            let ymap = &mut yout[oc * plane..(oc + 1) * plane];
            let b = bias[oc];
            for v in ymap.iter_mut() {
                *v = b;
            }
            for ich in 0..ci {
                let wk = &wgt[(oc * ci + ich) * 9..(oc * ci + ich) * 9 + 9];
                let (w00, w01, w02) = (wk[0], wk[1], wk[2]);
                let (w10, w11, w12) = (wk[3], wk[4], wk[5]);
                let (w20, w21, w22) = (wk[6], wk[7], wk[8]);
                for oh in 0..h {
                    let base = ich * hp * wp + oh * wp;
                    let r0 = &pad[base..base + wp];
                    let r1 = &pad[base + wp..base + 2 * wp];
                    let r2 = &pad[base + 2 * wp..base + 3 * wp];
                    let acc = &mut ymap[oh * w..(oh + 1) * w];
                    for ow in 0..w {
                        let s = w00 * r0[ow]
                            + w01 * r0[ow + 1]
                            + w02 * r0[ow + 2]
                            + w10 * r1[ow]
                            + w11 * r1[ow + 1]
                            + w12 * r1[ow + 2]
                            + w20 * r2[ow]
                            + w21 * r2[ow + 1]
                            + w22 * r2[ow + 2];
                        acc[ow] = acc[ow] + s;
                    }
                }
            }
        }
    }
}

/// Input gradient of conv3x3: dx[n,ci,h,w] from g[n,co,h,w].
///
/// dx is the correlation of zero-padded g with the 180-degree-rotated kernel,
/// channel roles swapped, so it reuses the padded-row layout of the forward.
pub fn conv3x3_dx<T: Scalar>(
    g: &[T],
    wgt: &[T],
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    debug_assert_eq!(g.len(), n * co * h * w);
    debug_assert_eq!(wgt.len(), co * ci * 9);
    debug_assert_eq!(dx.len(), n * ci * h * w);
    let plane = h * w;
    let (hp, wp) = (h + 2, w + 2);
    let mut pad = vec![T::zero(); co * hp * wp];
    for nn in 0..n {
        fill_padded(&g[nn * co * plane..(nn + 1) * co * plane], co, h, w, &mut pad);
        let dxo = &mut dx[nn * ci * plane..(nn + 1) * ci * plane];
        for ich in 0..ci {
            let dmap = &mut dxo[ich * plane..(ich + 1) * plane];
            for v in dmap.iter_mut() {
                *v = T::zero();
            }
            for oc in 0..co {
                let wk = &wgt[(oc * ci + ich) * 9..(oc * ci + ich) * 9 + 9];
                let (w00, w01, w02) = (wk[8], wk[7], wk[6]);
                let (w10, w11, w12) = (wk[5], wk[4], wk[3]);
                let (w20, w21, w22) = (wk[2], wk[1], wk[0]);
                for ih in 0..h {
                    let base = oc * hp * wp + ih * wp;
                    let r0 = &pad[base..base + wp];
                    let r1 = &pad[base + wp..base + 2 * wp];
                    let r2 = &pad[base + 2 * wp..base + 3 * wp];
                    let acc = &mut dmap[ih * w..(ih + 1) * w];
                    for iw in 0..w {
                        let s = w00 * r0[iw]
                            + w01 * r0[iw + 1]
                            + w02 * r0[iw + 2]
                            + w10 * r1[iw]
                            + w11 * r1[iw + 1]
                            + w12 * r1[iw + 2]
                            + w20 * r2[iw]
                            + w21 * r2[iw + 1]
                            + w22 * r2[iw + 2];
                        acc[iw] = acc[iw] + s;
                    }
                }
            }
        }
    }
}

/// Weight and bias gradients of conv3x3.
///
/// Each tap accumulates column partial sums across output rows (vector-friendly),
/// then folds them left to right, so the order stays input-independent.
pub fn conv3x3_dw<T: Scalar>(
    g: &[T],
    x: &[T],
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    debug_assert_eq!(g.len(), n * co * h * w);
    debug_assert_eq!(x.len(), n * ci * h * w);
    debug_assert_eq!(dw.len(), co * ci * 9);
    debug_assert_eq!(db.len(), co);
    let plane = h * w;
    let (hp, wp) = (h + 2, w + 2);
    for v in dw.iter_mut() {
        *v = T::zero();
    }
    for v in db.iter_mut() {
        *v = T::zero();
    }
    let mut pad = vec![T::zero(); ci * hp * wp];
    let mut colacc = vec![T::zero(); 9 * w];
    for nn in 0..n {
        fill_padded(&x[nn * ci * plane..(nn + 1) * ci * plane], ci, h, w, &mut pad);
        let gin = &g[nn * co * plane..(nn + 1) * co * plane];
        for oc in 0..co {
            let gmap = &gin[oc * plane..(oc + 1) * plane];
            let mut bacc = T::zero();
            for gv in gmap {
                bacc = bacc + *gv;
            }
            db[oc] = db[oc] + bacc;
            for ich in 0..ci {
                for v in colacc.iter_mut() {
                    *v = T::zero();
                }
                for oh in 0..h {
                    let grow = &gmap[oh * w..(oh + 1) * w];
                    let base = ich * hp * wp + oh * wp;
                    for ky in 0..3usize {
                        let xrow = &pad[base + ky * wp..base + ky * wp + wp];
                        let (c0, rest) = colacc[ky * 3 * w..(ky * 3 + 3) * w].split_at_mut(w);
                        let (c1, c2) = rest.split_at_mut(w);
                        for ow in 0..w {
                            let gv = grow[ow];
                            c0[ow] = c0[ow] + gv * xrow[ow];
                            c1[ow] = c1[ow] + gv * xrow[ow + 1];
                            c2[ow] = c2[ow] + gv * xrow[ow + 2];
                        }
                    }
                }
                let wbase = (oc * ci + ich) * 9;
                for tap in 0..9usize {
                    let mut s = T::zero();
                    for v in &colacc[tap * w..(tap + 1) * w] {
                        s = s + *v;
                    }
                    dw[wbase + tap] = dw[wbase + tap] + s;
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsample: [n,c,h,w] -> [n,c,2h,2w].
pub fn upsample2x<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, y: &mut [T]) {
    debug_assert_eq!(y.len(), n * c * 4 * h * w);
    let (h2, w2) = (2 * h, 2 * w);
    for map in 0..n * c {
        let src = &x[map * h * w..(map + 1) * h * w];
        let dst = &mut y[map * h2 * w2..(map + 1) * h2 * w2];
        for oh in 0..h2 {
            let srow = &src[(oh / 2) * w..(oh / 2 + 1) * w];
            let drow = &mut dst[oh * w2..(oh + 1) * w2];
            for ow in 0..w2 {
                drow[ow] = srow[ow / 2];
            }
        }
    }
}

/// Backward of upsample2x: each input cell collects its 2x2 output block.
pub fn upsample2x_back<T: Scalar>(g: &[T], n: usize, c: usize, h: usize, w: usize, dx: &mut [T]) {
    debug_assert_eq!(dx.len(), n * c * h * w);
    let (h2, w2) = (2 * h, 2 * w);
    for map in 0..n * c {
        let src = &g[map * h2 * w2..(map + 1) * h2 * w2];
        let dst = &mut dx[map * h * w..(map + 1) * h * w];
        for ih in 0..h {
            let drow = &mut dst[ih * w..(ih + 1) * w];
            let r0 = &src[(2 * ih) * w2..(2 * ih + 1) * w2];
            let r1 = &src[(2 * ih + 1) * w2..(2 * ih + 2) * w2];
            for iw in 0..w {
                drow[iw] = r0[2 * iw] + r0[2 * iw + 1] + r1[2 * iw] + r1[2 * iw + 1];
            }
        }
    }
}

/// 2x average pool: [n,c,h,w] -> [n,c,h/2,w/2]. h and w must be even.
pub fn avgpool2x<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, y: &mut [T]) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    debug_assert_eq!(y.len(), n * c * ho * wo);
    let quarter = T::of_f64(0.25);
    for map in 0..n * c {
        let src = &x[map * h * w..(map + 1) * h * w];
        let dst = &mut y[map * ho * wo..(map + 1) * ho * wo];
        for oh in 0..ho {
            let r0 = &src[(2 * oh) * w..(2 * oh + 1) * w];
            let r1 = &src[(2 * oh + 1) * w..(2 * oh + 2) * w];
            let drow = &mut dst[oh * wo..(oh + 1) * wo];
            for ow in 0..wo {
                drow[ow] =
                    (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]) * quarter;
            }
        }
    }
}

pub fn avgpool2x_back<T: Scalar>(g: &[T], n: usize, c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    debug_assert_eq!(dx.len(), n * c * h * w);
    let quarter = T::of_f64(0.25);
    for map in 0..n * c {
        let src = &g[map * ho * wo..(map + 1) * ho * wo];
        let dst = &mut dx[map * h * w..(map + 1) * h * w];
        for oh in 0..ho {
            let srow = &src[oh * wo..(oh + 1) * wo];
            for ow in 0..wo {
                let v = srow[ow] * quarter;
                dst[(2 * oh) * w + 2 * ow] = v;
                dst[(2 * oh) * w + 2 * ow + 1] = v;
                dst[(2 * oh + 1) * w + 2 * ow] = v;
                dst[(2 * oh + 1) * w + 2 * ow + 1] = v;
            }
        }
    }
}
