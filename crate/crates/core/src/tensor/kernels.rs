//! Raw forward/backward kernels behind the tape ops.
//!
//! Rayon tasks always own disjoint output slices and iterate in a fixed
//! order, so results are bitwise reproducible at any thread count.

use rayon::prelude::*;

/// Inclusive output range `[lo, hi]` for which `o*stride + k_off - pad`
/// stays inside `[0, in_extent)`. Empty when `lo > hi`.
#[inline]
fn out_range(in_extent: usize, k_off: usize, stride: usize, pad: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi_num = in_extent as isize - 1 + pad as isize - k_off as isize;
    if hi_num < 0 || out_extent == 0 {
        return (1, 0);
    }
    (lo, (hi_num as usize / stride).min(out_extent - 1))
}

pub fn conv3d_out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_fwd(
    x: &[f32],
    xs: &[usize; 5], // [N, C, D, H, W]
    w: &[f32],
    ws: &[usize; 5], // [K, C, kd, kh, kw]
    bias: &[f32],
    stride: usize,
    pad: usize,
    os: &[usize; 5], // [N, K, OD, OH, OW]
) -> Vec<f32> {
    let [n, c, d, h, wi] = *xs;
    let [k, _, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let isp = d * h * wi;
    let osp = od * oh * ow;
    let ksp = kd * kh * kw;
    let mut out = vec![0.0f32; n * k * osp];
    out.par_chunks_mut(osp).enumerate().for_each(|(nk, out_nk)| {
        let ni = nk / k;
        let ki = nk % k;
        out_nk.fill(bias[ki]);
        let xn = &x[ni * c * isp..][..c * isp];
        for ci in 0..c {
            let xc = &xn[ci * isp..][..isp];
            let wkc = &w[(ki * c + ci) * ksp..][..ksp];
            for kdi in 0..kd {
                let (dlo, dhi) = out_range(d, kdi, stride, pad, od);
                if dlo > dhi {
                    continue;
                }
                for khi in 0..kh {
                    let (hlo, hhi) = out_range(h, khi, stride, pad, oh);
                    if hlo > hhi {
                        continue;
                    }
                    for kwi in 0..kw {
                        let (wlo, whi) = out_range(wi, kwi, stride, pad, ow);
                        if wlo > whi {
                            continue;
                        }
                        let wv = wkc[(kdi * kh + khi) * kw + kwi];
                        for odi in dlo..=dhi {
                            let idd = odi * stride + kdi - pad;
                            for ohi in hlo..=hhi {
                                let ihh = ohi * stride + khi - pad;
                                let orow = &mut out_nk[(odi * oh + ohi) * ow..][..ow];
                                let xrow = &xc[(idd * h + ihh) * wi..][..wi];
                                if stride == 1 {
                                    let xoff = wlo + kwi - pad;
                                    let len = whi - wlo + 1;
                                    for (o, &xv) in
                                        orow[wlo..=whi].iter_mut().zip(&xrow[xoff..xoff + len])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for owi in wlo..=whi {
                                        orow[owi] += wv * xrow[owi * stride + kwi - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_bwd(
    x: &[f32],
    xs: &[usize; 5],
    w: &[f32],
    ws: &[usize; 5],
    go: &[f32],
    os: &[usize; 5],
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let [n, c, d, h, wi] = *xs;
    let [k, _, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let isp = d * h * wi;
    let osp = od * oh * ow;
    let ksp = kd * kh * kw;

    let gb: Vec<f32> = (0..k)
        .map(|ki| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                for v in &go[(ni * k + ki) * osp..][..osp] {
                    acc += *v as f64;
                }
            }
            acc as f32
        })
        .collect();

    let gw = if need_gw {
        let mut gw = vec![0.0f32; k * c * ksp];
        gw.par_chunks_mut(c * ksp).enumerate().for_each(|(ki, gwk)| {
            for ni in 0..n {
                let gonk = &go[(ni * k + ki) * osp..][..osp];
                for ci in 0..c {
                    let xc = &x[(ni * c + ci) * isp..][..isp];
                    for kdi in 0..kd {
                        let (dlo, dhi) = out_range(d, kdi, stride, pad, od);
                        if dlo > dhi {
                            continue;
                        }
                        for khi in 0..kh {
                            let (hlo, hhi) = out_range(h, khi, stride, pad, oh);
                            if hlo > hhi {
                                continue;
                            }
                            for kwi in 0..kw {
                                let (wlo, whi) = out_range(wi, kwi, stride, pad, ow);
                                if wlo > whi {
                                    continue;
                                }
                                let mut acc = 0.0f32;
                                for odi in dlo..=dhi {
                                    let idd = odi * stride + kdi - pad;
                                    for ohi in hlo..=hhi {
                                        let ihh = ohi * stride + khi - pad;
                                        let grow = &gonk[(odi * oh + ohi) * ow..][..ow];
                                        let xrow = &xc[(idd * h + ihh) * wi..][..wi];
                                        if stride == 1 {
                                            let xoff = wlo + kwi - pad;
                                            let len = whi - wlo + 1;
                                            for (&g, &xv) in
                                                grow[wlo..=whi].iter().zip(&xrow[xoff..xoff + len])
                                            {
                                                acc += g * xv;
                                            }
                                        } else {
                                            for owi in wlo..=whi {
                                                acc += grow[owi] * xrow[owi * stride + kwi - pad];
                                            }
                                        }
                                    }
                                }
                                gwk[(ci * kd + kdi) * kh * kw + khi * kw + kwi] += acc;
                            }
                        }
                    }
                }
            }
        });
        Some(gw)
    } else {
        None
    };

    let gx = if need_gx {
        let mut gx = vec![0.0f32; n * c * isp];
        gx.par_chunks_mut(isp).enumerate().for_each(|(nc, gxc)| {
            let ni = nc / c;
            let ci = nc % c;
            for ki in 0..k {
                let gonk = &go[(ni * k + ki) * osp..][..osp];
                let wkc = &w[(ki * c + ci) * ksp..][..ksp];
                for kdi in 0..kd {
                    let (dlo, dhi) = out_range(d, kdi, stride, pad, od);
                    if dlo > dhi {
                        continue;
                    }
                    for khi in 0..kh {
                        let (hlo, hhi) = out_range(h, khi, stride, pad, oh);
                        if hlo > hhi {
                            continue;
                        }
                        for kwi in 0..kw {
                            let (wlo, whi) = out_range(wi, kwi, stride, pad, ow);
                            if wlo > whi {
                                continue;
                            }
                            let wv = wkc[(kdi * kh + khi) * kw + kwi];
                            for odi in dlo..=dhi {
                                let idd = odi * stride + kdi - pad;
                                for ohi in hlo..=hhi {
                                    let ihh = ohi * stride + khi - pad;
                                    let grow = &gonk[(odi * oh + ohi) * ow..][..ow];
                                    let gxrow = &mut gxc[(idd * h + ihh) * wi..][..wi];
                                    if stride == 1 {
                                        let xoff = wlo + kwi - pad;
                                        let len = whi - wlo + 1;
                                        for (gxv, &g) in
                                            gxrow[xoff..xoff + len].iter_mut().zip(&grow[wlo..=whi])
                                        {
                                            *gxv += wv * g;
                                        }
                                    } else {
                                        for owi in wlo..=whi {
                                            gxrow[owi * stride + kwi - pad] += wv * grow[owi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(gx)
    } else {
        None
    };

    (gx, gw, gb)
}

pub fn convt3d_out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((in_extent - 1) * stride + k).checked_sub(2 * pad)
}

/// Transposed conv: weight layout [Cin, Cout, kd, kh, kw].
#[allow(clippy::too_many_arguments)]
pub fn convt3d_fwd(
    x: &[f32],
    xs: &[usize; 5],
    w: &[f32],
    ws: &[usize; 5],
    bias: &[f32],
    stride: usize,
    pad: usize,
    os: &[usize; 5],
) -> Vec<f32> {
    let [n, c_in, d, h, wi] = *xs;
    let [_, c_out, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let isp = d * h * wi;
    let osp = od * oh * ow;
    let ksp = kd * kh * kw;
    let mut out = vec![0.0f32; n * c_out * osp];
    out.par_chunks_mut(osp).enumerate().for_each(|(nco, out_nc)| {
        let ni = nco / c_out;
        let co = nco % c_out;
        out_nc.fill(bias[co]);
        for ci in 0..c_in {
            let xc = &x[(ni * c_in + ci) * isp..][..isp];
            let wk = &w[(ci * c_out + co) * ksp..][..ksp];
            for kdi in 0..kd {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = wk[(kdi * kh + khi) * kw + kwi];
                        for idi in 0..d {
                            let Some(odi) = (idi * stride + kdi).checked_sub(pad) else { continue };
                            if odi >= od {
                                continue;
                            }
                            for ihi in 0..h {
                                let Some(ohi) = (ihi * stride + khi).checked_sub(pad) else {
                                    continue;
                                };
                                if ohi >= oh {
                                    continue;
                                }
                                let xrow = &xc[(idi * h + ihi) * wi..][..wi];
                                let orow = &mut out_nc[(odi * oh + ohi) * ow..][..ow];
                                for (iwi, &xv) in xrow.iter().enumerate() {
                                    let Some(owi) = (iwi * stride + kwi).checked_sub(pad) else {
                                        continue;
                                    };
                                    if owi >= ow {
                                        continue;
                                    }
                                    orow[owi] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn convt3d_bwd(
    x: &[f32],
    xs: &[usize; 5],
    w: &[f32],
    ws: &[usize; 5],
    go: &[f32],
    os: &[usize; 5],
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let [n, c_in, d, h, wi] = *xs;
    let [_, c_out, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let isp = d * h * wi;
    let osp = od * oh * ow;
    let ksp = kd * kh * kw;

    let gb: Vec<f32> = (0..c_out)
        .map(|co| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                for v in &go[(ni * c_out + co) * osp..][..osp] {
                    acc += *v as f64;
                }
            }
            acc as f32
        })
        .collect();

    // grad wrt input: gather from go at o = i*stride + k - pad.
    let gx = if need_gx {
        let mut gx = vec![0.0f32; n * c_in * isp];
        gx.par_chunks_mut(isp).enumerate().for_each(|(nci, gxc)| {
            let ni = nci / c_in;
            let ci = nci % c_in;
            for co in 0..c_out {
                let gonc = &go[(ni * c_out + co) * osp..][..osp];
                let wk = &w[(ci * c_out + co) * ksp..][..ksp];
                for kdi in 0..kd {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wv = wk[(kdi * kh + khi) * kw + kwi];
                            for idi in 0..d {
                                let Some(odi) = (idi * stride + kdi).checked_sub(pad) else {
                                    continue;
                                };
                                if odi >= od {
                                    continue;
                                }
                                for ihi in 0..h {
                                    let Some(ohi) = (ihi * stride + khi).checked_sub(pad) else {
                                        continue;
                                    };
                                    if ohi >= oh {
                                        continue;
                                    }
                                    let gxrow = &mut gxc[(idi * h + ihi) * wi..][..wi];
                                    let gorow = &gonc[(odi * oh + ohi) * ow..][..ow];
                                    for (iwi, gxv) in gxrow.iter_mut().enumerate() {
                                        let Some(owi) = (iwi * stride + kwi).checked_sub(pad)
                                        else {
                                            continue;
                                        };
                                        if owi >= ow {
                                            continue;
                                        }
                                        *gxv += wv * gorow[owi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(gx)
    } else {
        None
    };

    let gw = if need_gw {
        let mut gw = vec![0.0f32; c_in * c_out * ksp];
        gw.par_chunks_mut(c_out * ksp).enumerate().for_each(|(ci, gwc)| {
            for ni in 0..n {
                let xc = &x[(ni * c_in + ci) * isp..][..isp];
                for co in 0..c_out {
                    let gonc = &go[(ni * c_out + co) * osp..][..osp];
                    for kdi in 0..kd {
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let mut acc = 0.0f32;
                                for idi in 0..d {
                                    let Some(odi) = (idi * stride + kdi).checked_sub(pad) else {
                                        continue;
                                    };
                                    if odi >= od {
                                        continue;
                                    }
                                    for ihi in 0..h {
                                        let Some(ohi) = (ihi * stride + khi).checked_sub(pad)
                                        else {
                                            continue;
                                        };
                                        if ohi >= oh {
                                            continue;
                                        }
                                        let xrow = &xc[(idi * h + ihi) * wi..][..wi];
                                        let gorow = &gonc[(odi * oh + ohi) * ow..][..ow];
                                        for (iwi, &xv) in xrow.iter().enumerate() {
                                            let Some(owi) = (iwi * stride + kwi).checked_sub(pad)
                                            else {
                                                continue;
                                            };
                                            if owi >= ow {
                                                continue;
                                            }
                                            acc += xv * gorow[owi];
                                        }
                                    }
                                }
                                gwc[co * ksp + (kdi * kh + khi) * kw + kwi] += acc;
                            }
                        }
                    }
                }
            }
        });
        Some(gw)
    } else {
        None
    };

    (gx, gw, gb)
}

/// y[b,o] = bias[o] + sum_i x[b,i] * w[o,i]
pub fn linear_fwd(x: &[f32], b_rows: usize, i_cols: usize, w: &[f32], o_cols: usize, bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; b_rows * o_cols];
    out.par_chunks_mut(o_cols).enumerate().for_each(|(bi, orow)| {
        let xrow = &x[bi * i_cols..][..i_cols];
        for (oi, o) in orow.iter_mut().enumerate() {
            let wrow = &w[oi * i_cols..][..i_cols];
            let mut acc = 0.0f32;
            for (&xv, &wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *o = bias[oi] + acc;
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &[f32],
    b_rows: usize,
    i_cols: usize,
    w: &[f32],
    o_cols: usize,
    go: &[f32],
    need_gx: bool,
    need_gw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let gb: Vec<f32> = (0..o_cols)
        .map(|oi| {
            let mut acc = 0.0f64;
            for bi in 0..b_rows {
                acc += go[bi * o_cols + oi] as f64;
            }
            acc as f32
        })
        .collect();
    let gx = need_gx.then(|| {
        let mut gx = vec![0.0f32; b_rows * i_cols];
        gx.par_chunks_mut(i_cols).enumerate().for_each(|(bi, gxrow)| {
            let gorow = &go[bi * o_cols..][..o_cols];
            for (oi, &g) in gorow.iter().enumerate() {
                let wrow = &w[oi * i_cols..][..i_cols];
                for (gxv, &wv) in gxrow.iter_mut().zip(wrow) {
                    *gxv += g * wv;
                }
            }
        });
        gx
    });
    let gw = need_gw.then(|| {
        let mut gw = vec![0.0f32; o_cols * i_cols];
        gw.par_chunks_mut(i_cols).enumerate().for_each(|(oi, gwrow)| {
            for bi in 0..b_rows {
                let g = go[bi * o_cols + oi];
                let xrow = &x[bi * i_cols..][..i_cols];
                for (gwv, &xv) in gwrow.iter_mut().zip(xrow) {
                    *gwv += g * xv;
                }
            }
        });
        gw
    });
    (gx, gw, gb)
}

/// Per-(sample, group) standardization followed by per-channel affine.
/// Returns (y, saved mean/invstd per (n, group)).
pub fn group_norm_fwd(
    x: &[f32],
    n: usize,
    c: usize,
    sp: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<(f32, f32)>) {
    let cg = c / groups;
    let m = cg * sp;
    let mut y = vec![0.0f32; x.len()];
    let mut stats = vec![(0.0f32, 0.0f32); n * groups];
    for ni in 0..n {
        for gi in 0..groups {
            let base = (ni * c + gi * cg) * sp;
            let xs = &x[base..base + m];
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for &v in xs {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
            let mean = sum / m as f64;
            let var = (sq / m as f64 - mean * mean).max(0.0);
            let istd = 1.0 / (var + eps as f64).sqrt();
            stats[ni * groups + gi] = (mean as f32, istd as f32);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let g = gamma[ch];
                let b = beta[ch];
                let xrow = &x[base + ci * sp..][..sp];
                let yrow = &mut y[base + ci * sp..][..sp];
                for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                    *yv = (xv - mean as f32) * istd as f32 * g + b;
                }
            }
        }
    }
    (y, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd(
    x: &[f32],
    n: usize,
    c: usize,
    sp: usize,
    groups: usize,
    gamma: &[f32],
    stats: &[(f32, f32)],
    go: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cg = c / groups;
    let m = cg * sp;
    let mut gx = vec![0.0f32; x.len()];
    let mut ggamma64 = vec![0.0f64; c];
    let mut gbeta64 = vec![0.0f64; c];
    for ni in 0..n {
        for gi in 0..groups {
            let (mean, istd) = stats[ni * groups + gi];
            let base = (ni * c + gi * cg) * sp;
            // h = go * gamma; need mean(h) and mean(h * xhat) over the group
            let mut sum_h = 0.0f64;
            let mut sum_hx = 0.0f64;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let g = gamma[ch] as f64;
                let xrow = &x[base + ci * sp..][..sp];
                let grow = &go[base + ci * sp..][..sp];
                for (&xv, &gv) in xrow.iter().zip(grow) {
                    let xhat = ((xv - mean) * istd) as f64;
                    let h = gv as f64 * g;
                    sum_h += h;
                    sum_hx += h * xhat;
                    ggamma64[ch] += gv as f64 * xhat;
                    gbeta64[ch] += gv as f64;
                }
            }
            let mh = (sum_h / m as f64) as f32;
            let mhx = (sum_hx / m as f64) as f32;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let g = gamma[ch];
                let xrow = &x[base + ci * sp..][..sp];
                let grow = &go[base + ci * sp..][..sp];
                let gxrow = &mut gx[base + ci * sp..][..sp];
                for ((gxv, &xv), &gv) in gxrow.iter_mut().zip(xrow).zip(grow) {
                    let xhat = (xv - mean) * istd;
                    *gxv = istd * (gv * g - mh - xhat * mhx);
                }
            }
        }
    }
    let ggamma = ggamma64.iter().map(|&v| v as f32).collect();
    let gbeta = gbeta64.iter().map(|&v| v as f32).collect();
    (gx, ggamma, gbeta)
}

// ---- naive f64 references -----------------------------------------------
//
// Deliberately simple triple loops, independent of the optimized kernels
// above. Tape::eval_f64 re-runs recorded graphs on these so the
// finite-difference oracle sees a 64-bit forward; unit tests also compare
// the fast kernels against them.

#[allow(clippy::too_many_arguments)]
pub fn conv3d_fwd_ref64(
    x: &[f64],
    xs: &[usize; 5],
    w: &[f64],
    ws: &[usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
    os: &[usize; 5],
) -> Vec<f64> {
    let [n, c, d, h, wi] = *xs;
    let [k, _, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let mut out = vec![0.0f64; n * k * od * oh * ow];
    let xat = |ni: usize, ci: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wi as isize {
            0.0
        } else {
            x[(((ni * c + ci) * d + z as usize) * h + y as usize) * wi + xx as usize]
        }
    };
    for ni in 0..n {
        for ki in 0..k {
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = bias[ki];
                        for ci in 0..c {
                            for kdi in 0..kd {
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let wv = w[(((ki * c + ci) * kd + kdi) * kh + khi) * kw + kwi];
                                        acc += wv
                                            * xat(
                                                ni,
                                                ci,
                                                (odi * stride + kdi) as isize - pad as isize,
                                                (ohi * stride + khi) as isize - pad as isize,
                                                (owi * stride + kwi) as isize - pad as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out[(((ni * k + ki) * od + odi) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn convt3d_fwd_ref64(
    x: &[f64],
    xs: &[usize; 5],
    w: &[f64],
    ws: &[usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
    os: &[usize; 5],
) -> Vec<f64> {
    let [n, c_in, d, h, wi] = *xs;
    let [_, c_out, kd, kh, kw] = *ws;
    let [_, _, od, oh, ow] = *os;
    let mut acc = vec![0.0f64; n * c_out * od * oh * ow];
    for ni in 0..n {
        for ci in 0..c_in {
            for co in 0..c_out {
                for idi in 0..d {
                    for ihi in 0..h {
                        for iwi in 0..wi {
                            let xv = x[(((ni * c_in + ci) * d + idi) * h + ihi) * wi + iwi];
                            for kdi in 0..kd {
                                let odi = (idi * stride + kdi) as isize - pad as isize;
                                if odi < 0 || odi >= od as isize {
                                    continue;
                                }
                                for khi in 0..kh {
                                    let ohi = (ihi * stride + khi) as isize - pad as isize;
                                    if ohi < 0 || ohi >= oh as isize {
                                        continue;
                                    }
                                    for kwi in 0..kw {
                                        let owi = (iwi * stride + kwi) as isize - pad as isize;
                                        if owi < 0 || owi >= ow as isize {
                                            continue;
                                        }
                                        let wv = w[(((ci * c_out + co) * kd + kdi) * kh + khi) * kw + kwi];
                                        acc[(((ni * c_out + co) * od + odi as usize) * oh + ohi as usize) * ow
                                            + owi as usize] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        let co = (i / (od * oh * ow)) % c_out;
        *v += bias[co];
    }
    acc
}

pub fn linear_fwd_ref64(x: &[f64], b_rows: usize, i_cols: usize, w: &[f64], o_cols: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; b_rows * o_cols];
    for bi in 0..b_rows {
        for oi in 0..o_cols {
            let mut acc = bias[oi];
            for ii in 0..i_cols {
                acc += x[bi * i_cols + ii] * w[oi * i_cols + ii];
            }
            out[bi * o_cols + oi] = acc;
        }
    }
    out
}

pub fn softmax_ce_fwd(logits: &[f32], b: usize, k: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0f64;
    for bi in 0..b {
        let row = &logits[bi * k..][..k];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &v in row {
            sum += ((v as f64) - mx).exp();
        }
        let lse = mx + sum.ln();
        total += lse - row[targets[bi]] as f64;
    }
    total / b as f64
}

pub fn softmax_ce_bwd(logits: &[f32], b: usize, k: usize, targets: &[usize], go: f32) -> Vec<f32> {
    let mut gl = vec![0.0f32; logits.len()];
    let scale = go / b as f32;
    for bi in 0..b {
        let row = &logits[bi * k..][..k];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &v in row {
            sum += ((v as f64) - mx).exp();
        }
        let grow = &mut gl[bi * k..][..k];
        for (j, (gv, &v)) in grow.iter_mut().zip(row).enumerate() {
            let p = (((v as f64) - mx).exp() / sum) as f32;
            let t = if j == targets[bi] { 1.0 } else { 0.0 };
            *gv = (p - t) * scale;
        }
    }
    gl
}
