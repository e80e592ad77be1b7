//! Raw numeric kernels on plain slices. No shape validation here — callers
//! in `ops` validate once; these functions trust their arguments.
//!
//! All loops run in a fixed order with fixed-shape reduction trees, so every
//! kernel is bit-deterministic for identical inputs regardless of how the
//! column tiling splits the work.

use super::Scalar;

/// Column-tile budget in elements (~16 MB of f32). Convolution materializes
/// im2col columns for at most this many elements at a time.
const COL_TILE_ELEMS: usize = 4 << 20;

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Output extent of a "same"-padded convolution: with p = (k-1)/2 and odd k,
/// this equals ceil(h / stride) for stride 1 and 2.
pub fn conv_out_extent(h: usize, k: usize, stride: usize) -> usize {
    (h + (k - 1) - k) / stride + 1
}

/// Fills `cols[kdim × (rows·wo)]` with im2col columns for output rows
/// `[oy0, oy0+rows)` of one image plane set. `x` is one batch item, `[ci,h,w]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    wo: usize,
    oy0: usize,
    rows: usize,
    cols: &mut [T],
) {
    let pad = (k - 1) / 2;
    let n = rows * wo;
    debug_assert_eq!(cols.len(), ci * k * k * n);
    let mut kk = 0usize;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[kk * n..(kk + 1) * n];
                for r in 0..rows {
                    let oy = oy0 + r;
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let dst = &mut row[r * wo..(r + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + j - pad; copy the in-bounds span, zero the rest.
                        let off = j as isize - pad as isize;
                        let lo = (-off).max(0) as usize; // first ox with ix >= 0
                        let hi = ((w as isize - off).max(0) as usize).min(wo); // first ox with ix >= w
                        dst[..lo.min(wo)].fill(T::zero());
                        if lo < hi {
                            dst[lo..hi]
                                .copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        }
                        dst[hi.max(lo.min(wo))..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                kk += 1;
            }
        }
    }
}

/// `out[m, 0..n] = sum_k a[m, k] * b[k, 0..n]` — saxpy over contiguous output
/// rows, unrolled 4-wide over k. `out` must be zeroed by the caller.
fn matmul_acc<T: Scalar>(a: &[T], m: usize, kdim: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * kdim);
    debug_assert_eq!(b.len(), kdim * n);
    debug_assert_eq!(out.len(), m * n);
    let kq = kdim & !3;
    for mi in 0..m {
        let arow = &a[mi * kdim..(mi + 1) * kdim];
        let crow = &mut out[mi * n..(mi + 1) * n];
        let mut kk = 0;
        while kk < kq {
            let a0 = arow[kk];
            let a1 = arow[kk + 1];
            let a2 = arow[kk + 2];
            let a3 = arow[kk + 3];
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for i in 0..n {
                crow[i] += (a0 * b0[i] + a1 * b1[i]) + (a2 * b2[i] + a3 * b3[i]);
            }
            kk += 4;
        }
        while kk < kdim {
            let a0 = arow[kk];
            let b0 = &b[kk * n..kk * n + n];
            for i in 0..n {
                crow[i] += a0 * b0[i];
            }
            kk += 1;
        }
    }
}

/// `cg[kk, 0..n] += sum_m w[m, kk] * dy_row(m)[0..n]` where `dy_row(m)` is
/// `dy[m*dy_stride .. m*dy_stride+n]`. This is Wᵀ·dy with dy rows strided.
fn matmul_wt_acc<T: Scalar>(
    w: &[T],
    m: usize,
    kdim: usize,
    dy: &[T],
    dy_stride: usize,
    n: usize,
    cg: &mut [T],
) {
    debug_assert_eq!(cg.len(), kdim * n);
    let mq = m & !3;
    for kk in 0..kdim {
        let dst = &mut cg[kk * n..(kk + 1) * n];
        let mut mi = 0;
        while mi < mq {
            let a0 = w[mi * kdim + kk];
            let a1 = w[(mi + 1) * kdim + kk];
            let a2 = w[(mi + 2) * kdim + kk];
            let a3 = w[(mi + 3) * kdim + kk];
            let s0 = &dy[mi * dy_stride..mi * dy_stride + n];
            let s1 = &dy[(mi + 1) * dy_stride..(mi + 1) * dy_stride + n];
            let s2 = &dy[(mi + 2) * dy_stride..(mi + 2) * dy_stride + n];
            let s3 = &dy[(mi + 3) * dy_stride..(mi + 3) * dy_stride + n];
            for i in 0..n {
                dst[i] += (a0 * s0[i] + a1 * s1[i]) + (a2 * s2[i] + a3 * s3[i]);
            }
            mi += 4;
        }
        while mi < m {
            let a0 = w[mi * kdim + kk];
            let s0 = &dy[mi * dy_stride..mi * dy_stride + n];
            for i in 0..n {
                dst[i] += a0 * s0[i];
            }
            mi += 1;
        }
    }
}

/// Dot product with eight independent accumulators — a fixed reduction tree
/// that vectorizes without reassociation and stays deterministic.
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let q = a.len() & !7;
    let mut acc = [T::zero(); 8];
    let mut i = 0;
    while i < q {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        acc[4] += a[i + 4] * b[i + 4];
        acc[5] += a[i + 5] * b[i + 5];
        acc[6] += a[i + 6] * b[i + 6];
        acc[7] += a[i + 7] * b[i + 7];
        i += 8;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    while i < a.len() {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

fn row_tile(kdim: usize, wo: usize) -> usize {
    (COL_TILE_ELEMS / (kdim * wo).max(1)).max(1)
}

/// Forward convolution, zero "same" padding. `x: [b,ci,h,w]`,
/// `wt: [co,ci,k,k]`, `y: [b,co,ho,wo]` (caller-allocated, any contents).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[T],
    bias: Option<&[T]>,
    co: usize,
    k: usize,
    stride: usize,
    y: &mut [T],
) {
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(w, k, stride);
    let kdim = ci * k * k;
    let tile = row_tile(kdim, wo);
    let mut cols = vec![T::zero(); kdim * tile * wo];
    let mut out = vec![T::zero(); co * tile * wo];
    for bi in 0..b {
        let xb = &x[bi * ci * h * w..(bi + 1) * ci * h * w];
        let mut oy0 = 0;
        while oy0 < ho {
            let rows = tile.min(ho - oy0);
            let n = rows * wo;
            im2col(xb, ci, h, w, k, stride, wo, oy0, rows, &mut cols[..kdim * n]);
            out[..co * n].fill(T::zero());
            matmul_acc(wt, co, kdim, &cols[..kdim * n], n, &mut out[..co * n]);
            for m in 0..co {
                let dst = &mut y[((bi * co + m) * ho + oy0) * wo..][..n];
                let src = &out[m * n..(m + 1) * n];
                match bias {
                    Some(bs) => {
                        let bv = bs[m];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *s + bv;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
            oy0 += rows;
        }
    }
}

/// Scatters column-space gradients back to image space (the adjoint of
/// `im2col`), adding into `dx` for one batch item.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cg: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    wo: usize,
    oy0: usize,
    rows: usize,
    dx: &mut [T],
) {
    let pad = (k - 1) / 2;
    let n = rows * wo;
    let mut kk = 0usize;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let row = &cg[kk * n..(kk + 1) * n];
                for r in 0..rows {
                    let oy = oy0 + r;
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[r * wo..(r + 1) * wo];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let off = j as isize - pad as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).max(0) as usize).min(wo);
                        if lo < hi {
                            let dsub = &mut drow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (d, s) in dsub.iter_mut().zip(&src[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += *s;
                            }
                        }
                    }
                }
                kk += 1;
            }
        }
    }
}

/// Gradient w.r.t. the convolution input; doubles as the forward pass of the
/// ×2 transposed convolution (then `dy` is that layer's input and `h`,`w` are
/// its doubled output extents). `dx` is caller-allocated and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    dy: &[T],
    b: usize,
    co: usize,
    ho: usize,
    wo: usize,
    wt: &[T],
    ci: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    debug_assert_eq!(conv_out_extent(h, k, stride), ho);
    debug_assert_eq!(conv_out_extent(w, k, stride), wo);
    let kdim = ci * k * k;
    let tile = row_tile(kdim, wo);
    let mut cg = vec![T::zero(); kdim * tile * wo];
    dx.fill(T::zero());
    for bi in 0..b {
        let dyb_base = bi * co * ho * wo;
        let dxb = &mut dx[bi * ci * h * w..(bi + 1) * ci * h * w];
        let mut oy0 = 0;
        while oy0 < ho {
            let rows = tile.min(ho - oy0);
            let n = rows * wo;
            cg[..kdim * n].fill(T::zero());
            matmul_wt_acc(
                wt,
                co,
                kdim,
                &dy[dyb_base + oy0 * wo..],
                ho * wo,
                n,
                &mut cg[..kdim * n],
            );
            col2im_add(&cg[..kdim * n], ci, h, w, k, stride, wo, oy0, rows, dxb);
            oy0 += rows;
        }
    }
}

/// Gradient w.r.t. the convolution weights: `dw[m,kk] = Σ_n dy[m,n]·cols[kk,n]`,
/// accumulated tile by tile. `dw` is overwritten; `dbias` too if present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Scalar>(
    x: &[T],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    dy: &[T],
    co: usize,
    k: usize,
    stride: usize,
    dw: &mut [T],
    mut dbias: Option<&mut [T]>,
) {
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(w, k, stride);
    let kdim = ci * k * k;
    let tile = row_tile(kdim, wo);
    let mut cols = vec![T::zero(); kdim * tile * wo];
    dw.fill(T::zero());
    if let Some(db) = dbias.as_deref_mut() {
        db.fill(T::zero());
    }
    for bi in 0..b {
        let xb = &x[bi * ci * h * w..(bi + 1) * ci * h * w];
        let mut oy0 = 0;
        while oy0 < ho {
            let rows = tile.min(ho - oy0);
            let n = rows * wo;
            im2col(xb, ci, h, w, k, stride, wo, oy0, rows, &mut cols[..kdim * n]);
            for m in 0..co {
                let dyrow = &dy[((bi * co + m) * ho + oy0) * wo..][..n];
                let dwrow = &mut dw[m * kdim..(m + 1) * kdim];
                for (kk, dwv) in dwrow.iter_mut().enumerate() {
                    *dwv += dot8(dyrow, &cols[kk * n..kk * n + n]);
                }
                if let Some(db) = dbias.as_deref_mut() {
                    let mut s = T::zero();
                    for v in dyrow {
                        s += *v;
                    }
                    db[m] += s;
                }
            }
            oy0 += rows;
        }
    }
}

/// 2×2 block average over one downsampling step. `y` is caller-allocated.
pub fn downsample2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    debug_assert_eq!(h % 2, 0);
    debug_assert_eq!(w % 2, 0);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for p in 0..bc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &src[(2 * oy) * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for ox in 0..wo {
                drow[ox] = ((r0[2 * ox] + r0[2 * ox + 1]) + (r1[2 * ox] + r1[2 * ox + 1])) * quarter;
            }
        }
    }
}

/// Adjoint of the block average: spreads `dy/(factor²)` uniformly over each
/// source block, adding into `dx`.
pub fn downsample_bwd<T: Scalar>(dy: &[T], bc: usize, ho: usize, wo: usize, factor: usize, dx: &mut [T]) {
    let (h, w) = (ho * factor, wo * factor);
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    for p in 0..bc {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * inv;
                for dy_ in 0..factor {
                    let drow = &mut dst[(oy * factor + dy_) * w + ox * factor..][..factor];
                    for d in drow {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial dims.
/// Returns `(mean, var)`, each of length `c`.
pub fn bn_stats<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let n = T::from_f64((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            for v in plane {
                s += *v;
            }
        }
        mean[ch] = s / n;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut s = T::zero();
        for bi in 0..b {
            let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            for v in plane {
                let d = *v - m;
                s += d * d;
            }
        }
        var[ch] = s / n;
    }
    (mean, var)
}

/// `y = γ·(x − mean)·inv_std + β` with per-channel constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_apply<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
) {
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let scale = g * is;
            let shift = bt - m * scale;
            for (yv, xv) in y[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *yv = *xv * scale + shift;
            }
        }
    }
}

/// Training-mode batch-norm backward.
/// dβ = Σdy, dγ = Σdy·x̂, dx = γ·inv_std·(dy − dβ/n − x̂·dγ/n), with
/// x̂ recomputed from the saved per-channel mean and inv_std.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_train<T: Scalar>(
    x: &[T],
    dy: &[T],
    b: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dx: Option<&mut Vec<T>>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let n = T::from_f64((b * hw) as f64);
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for (xv, dyv) in x[base..base + hw].iter().zip(&dy[base..base + hw]) {
                sum_dy += *dyv;
                sum_dy_xhat += *dyv * ((*xv - m) * is);
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
    }
    if let Some(dx) = dx {
        for ch in 0..c {
            let (m, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
            let k1 = dbeta[ch] / n;
            let k2 = dgamma[ch] / n;
            let gis = g * is;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for (dxv, (xv, dyv)) in dx[base..base + hw]
                    .iter_mut()
                    .zip(x[base..base + hw].iter().zip(&dy[base..base + hw]))
                {
                    let xhat = (*xv - m) * is;
                    *dxv = gis * ((*dyv - k1) - xhat * k2);
                }
            }
        }
    }
}

pub fn relu_fwd<T: Scalar>(x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = if *xv > T::zero() { *xv } else { T::zero() };
    }
}

/// Subgradient 0 at exactly 0: the mask is y > 0.
pub fn relu_bwd<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    for (dxv, (yv, dyv)) in dx.iter_mut().zip(y.iter().zip(dy)) {
        *dxv = if *yv > T::zero() { *dyv } else { T::zero() };
    }
}

/// Σ(a−b)² — plain left-to-right accumulation.
pub fn sq_err_sum<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (av, bv) in a.iter().zip(b) {
        let d = *av - *bv;
        s += d * d;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: direct six-nested loop, trusted by inspection.
    #[allow(clippy::too_many_arguments)]
    fn conv_ref(
        x: &[f64],
        b: usize,
        ci: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        bias: Option<&[f64]>,
        co: usize,
        k: usize,
        s: usize,
    ) -> Vec<f64> {
        let p = (k - 1) / 2;
        let ho = conv_out_extent(h, k, s);
        let wo = conv_out_extent(w, k, s);
        let mut y = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for m in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bs| bs[m]);
                        for c in 0..ci {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (oy * s + i) as isize - p as isize;
                                    let ix = (ox * s + j) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += wt[((m * ci + c) * k + i) * k + j]
                                            * x[((bi * ci + c) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y[((bi * co + m) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn arb(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random values in [-1, 1).
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).max(1);
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_fwd_matches_direct_loop_reference() {
        for &(b, ci, co, h, w, k, s) in &[
            (1usize, 1usize, 1usize, 5usize, 5usize, 3usize, 1usize),
            (2, 3, 4, 8, 10, 3, 1),
            (1, 2, 3, 9, 7, 5, 1),
            (2, 3, 2, 8, 8, 3, 2),
            (1, 2, 4, 11, 9, 5, 2),
            (1, 1, 2, 6, 6, 1, 1),
            (1, 2, 2, 12, 12, 7, 2),
            (1, 3, 2, 10, 10, 11, 1),
        ] {
            let x = arb(b * ci * h * w, 7 + (h * w) as u64);
            let wt = arb(co * ci * k * k, 13 + (k * s) as u64);
            let bias = arb(co, 29);
            let want = conv_ref(&x, b, ci, h, w, &wt, Some(&bias), co, k, s);
            let ho = conv_out_extent(h, k, s);
            let wo = conv_out_extent(w, k, s);
            let mut got = vec![0.0f64; b * co * ho * wo];
            conv2d_fwd(&x, b, ci, h, w, &wt, Some(&bias), co, k, s, &mut got);
            for (i, (g, wv)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (g - wv).abs() < 1e-12,
                    "conv mismatch at {i} for shape b{b} ci{ci} co{co} {h}x{w} k{k} s{s}: {g} vs {wv}"
                );
            }
        }
    }

    #[test]
    fn conv_bwd_input_is_adjoint_of_forward() {
        // <conv(x), y> must equal <x, conv_bwd_input(y)> for any x, y.
        for &(b, ci, co, h, w, k, s) in &[
            (1usize, 2usize, 3usize, 8, 9usize, 3usize, 1usize),
            (2, 3, 2, 7, 7, 5, 1),
            (1, 2, 2, 10, 8, 5, 2),
            (1, 1, 1, 9, 9, 3, 2),
        ] {
            let ho = conv_out_extent(h, k, s);
            let wo = conv_out_extent(w, k, s);
            let x = arb(b * ci * h * w, 3);
            let wt = arb(co * ci * k * k, 5);
            let yr = arb(b * co * ho * wo, 11);
            let mut cx = vec![0.0; b * co * ho * wo];
            conv2d_fwd(&x, b, ci, h, w, &wt, None, co, k, s, &mut cx);
            let mut aty = vec![0.0; b * ci * h * w];
            conv2d_bwd_input(&yr, b, co, ho, wo, &wt, ci, k, s, h, w, &mut aty);
            let lhs: f64 = cx.iter().zip(&yr).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                "adjoint identity violated: {lhs} vs {rhs} (b{b} ci{ci} co{co} {h}x{w} k{k} s{s})"
            );
        }
    }

    #[test]
    fn conv_bwd_weight_matches_finite_difference() {
        let (b, ci, co, h, w, k, s) = (1usize, 2usize, 2usize, 6usize, 6usize, 3usize, 1usize);
        let x = arb(b * ci * h * w, 17);
        let wt = arb(co * ci * k * k, 19);
        let ho = conv_out_extent(h, k, s);
        let wo = conv_out_extent(w, k, s);
        // Loss = <conv(x; wt), r> for fixed random r; dL/dw = bwd_weight with dy = r.
        let r = arb(b * co * ho * wo, 23);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; co];
        conv2d_bwd_weight(&x, b, ci, h, w, &r, co, k, s, &mut dw, Some(&mut db));
        let loss = |wt: &[f64]| -> f64 {
            let mut y = vec![0.0; b * co * ho * wo];
            conv2d_fwd(&x, b, ci, h, w, wt, None, co, k, s, &mut y);
            y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let hstep = 1e-6;
        for idx in [0usize, 3, 7, wt.len() - 1] {
            let mut wp = wt.clone();
            wp[idx] += hstep;
            let mut wm = wt.clone();
            wm[idx] -= hstep;
            let num = (loss(&wp) - loss(&wm)) / (2.0 * hstep);
            assert!(
                (num - dw[idx]).abs() < 1e-6 * num.abs().max(1.0),
                "dw[{idx}]: analytic {} vs numeric {num}",
                dw[idx]
            );
        }
        // Bias gradient is just the sum of r over spatial dims per channel.
        for m in 0..co {
            let want: f64 = r[m * ho * wo..(m + 1) * ho * wo].iter().sum();
            assert!((db[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample2_averages_blocks() {
        // One 2x4 plane: blocks {0,1,4,5} and {2,3,6,7}.
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut y = vec![0.0; 2];
        downsample2(&x, 1, 2, 4, &mut y);
        assert_eq!(y, vec![2.5, 4.5]);
    }

    #[test]
    fn downsample_bwd_spreads_uniformly() {
        let dy = vec![16.0f64];
        let mut dx = vec![0.0; 16];
        downsample_bwd(&dy, 1, 1, 1, 4, &mut dx);
        assert!(dx.iter().all(|&v| v == 1.0), "each of 16 source pixels gets dy/16");
    }

    #[test]
    fn bn_stats_are_exact_on_a_tiny_case() {
        // One channel, data {1,2,3,4}: mean 2.5, biased var 1.25.
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let (m, v) = bn_stats(&x, 1, 1, 4);
        assert!((m[0] - 2.5).abs() < 1e-15);
        assert!((v[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn relu_masks_negatives_and_zero() {
        let x = vec![-1.0f32, 0.0, 2.0];
        let mut y = vec![0.0; 3];
        relu_fwd(&x, &mut y);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
        let dy = vec![5.0f32, 5.0, 5.0];
        let mut dx = vec![0.0; 3];
        relu_bwd(&y, &dy, &mut dx);
        assert_eq!(dx, vec![0.0, 0.0, 5.0], "gradient at 0 is 0");
    }
}
