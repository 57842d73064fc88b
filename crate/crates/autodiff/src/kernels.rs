//! Dense f64 compute kernels shared by forward and backward passes.
//!
//! Every kernel has a portable scalar implementation whose inner loops
//! walk contiguous memory. On x86-64 the matrix products and the softmax
//! exponential dispatch at runtime to AVX2+FMA variants when the CPU
//! supports them; results differ from the scalar path only in rounding.

/// out(m,n) = a(m,k) * b(k,n)
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        unsafe { x86::matmul_acc(a, b, out, m, k, n) };
        return;
    }
    matmul_acc_scalar(a, b, out, m, k, n);
}

fn matmul_acc_scalar(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(k,n) += a(m,k)^T * b(m,n), accumulating into `out`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        unsafe { x86::matmul_at_b_acc(a, b, out, m, k, n) };
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m,n) += a(m,k) * b(n,k)^T, accumulating into `out`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        unsafe { x86::matmul_a_bt_acc(a, b, out, m, k, n) };
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out(cols,rows) = transpose of a(rows,cols)
pub fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Row-wise softmax with max subtraction: each row of `x` (rows x cols)
/// becomes a probability vector.
pub fn softmax_rows(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        #[cfg(target_arch = "x86_64")]
        if simd_enabled() {
            sum = unsafe { x86::exp_shifted(row, orow, mx) };
        } else {
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
}

/// Output spatial size of a strided convolution with symmetric padding.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output range [lo, hi) for which `ox*stride + kx - pad` stays
/// inside `[0, input)`.
fn valid_range(input: usize, kernel_off: usize, stride: usize, pad: usize, out_len: usize) -> (usize, usize) {
    let lo = if kernel_off >= pad {
        0
    } else {
        (pad - kernel_off).div_ceil(stride)
    };
    let max_in = input + pad - 1;
    let hi = if max_in < kernel_off {
        0
    } else {
        (((max_in - kernel_off) / stride) + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// 2-D convolution forward. x: (cin,h,w), w: (cout,cin,kh,kw), b: (cout),
/// out: (cout,oh,ow).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(out.len(), cout * oh * ow);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        unsafe { x86::conv2d(x, w, b, out, cin, h, wd, cout, kh, kw, stride, pad) };
        return;
    }
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(b[co]);
        for ci in 0..cin {
            let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
            let wbase = ((co * cin) + ci) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(wd, kx, stride, pad, ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xplane[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let xs = &xrow[ox_lo + kx - pad..ox_hi + kx - pad];
                            for (o, &xv) in orow.iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                let ix = (ox_lo + i) * stride + kx - pad;
                                *o += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv2d`]: accumulates into dx, dw, db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        unsafe {
            x86::conv2d_backward(x, w, gout, dx, dw, db, cin, h, wd, cout, kh, kw, stride, pad)
        };
        return;
    }
    for co in 0..cout {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        db[co] += gplane.iter().sum::<f64>();
        for ci in 0..cin {
            let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
            let dxplane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            let wbase = ((co * cin) + ci) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                for kx in 0..kw {
                    let wv = w[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(wd, kx, stride, pad, ow);
                    let mut wacc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xplane[iy * wd..(iy + 1) * wd];
                        let dxrow = &mut dxplane[iy * wd..(iy + 1) * wd];
                        let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let base = ox_lo + kx - pad;
                            let xs = &xrow[base..base + grow.len()];
                            let dxs = &mut dxrow[base..base + grow.len()];
                            for ((&g, &xv), dxv) in grow.iter().zip(xs).zip(dxs) {
                                wacc += g * xv;
                                *dxv += g * wv;
                            }
                        } else {
                            for (i, &g) in grow.iter().enumerate() {
                                let ix = (ox_lo + i) * stride + kx - pad;
                                wacc += g * xrow[ix];
                                dxrow[ix] += g * wv;
                            }
                        }
                    }
                    dw[wbase + ky * kw + kx] += wacc;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn simd_enabled() -> bool {
    use std::sync::OnceLock;
    static ENABLED: OnceLock<bool> = OnceLock::new();
    *ENABLED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    /// out += a * b, with four k-values folded per pass over the output
    /// row to cut load/store traffic.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let k4 = k / 4 * 4;
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            let mut l = 0;
            while l < k4 {
                let av0 = _mm256_set1_pd(arow[l]);
                let av1 = _mm256_set1_pd(arow[l + 1]);
                let av2 = _mm256_set1_pd(arow[l + 2]);
                let av3 = _mm256_set1_pd(arow[l + 3]);
                let b0 = b.as_ptr().add(l * n);
                let b1 = b.as_ptr().add((l + 1) * n);
                let b2 = b.as_ptr().add((l + 2) * n);
                let b3 = b.as_ptr().add((l + 3) * n);
                let chunks = n / 4;
                for c in 0..chunks {
                    let p = orow.as_mut_ptr().add(4 * c);
                    let mut o = _mm256_loadu_pd(p);
                    o = _mm256_fmadd_pd(av0, _mm256_loadu_pd(b0.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av1, _mm256_loadu_pd(b1.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av2, _mm256_loadu_pd(b2.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av3, _mm256_loadu_pd(b3.add(4 * c)), o);
                    _mm256_storeu_pd(p, o);
                }
                for j in 4 * chunks..n {
                    orow[j] += arow[l] * b[l * n + j]
                        + arow[l + 1] * b[(l + 1) * n + j]
                        + arow[l + 2] * b[(l + 2) * n + j]
                        + arow[l + 3] * b[(l + 3) * n + j];
                }
                l += 4;
            }
            while l < k {
                axpy(orow, &b[l * n..(l + 1) * n], arow[l]);
                l += 1;
            }
        }
    }

    /// out(k,n) += a(m,k)^T b(m,n), folding four m-values per pass.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_at_b_acc(
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
    ) {
        let m4 = m / 4 * 4;
        let mut i = 0;
        while i < m4 {
            for l in 0..k {
                let av0 = _mm256_set1_pd(a[i * k + l]);
                let av1 = _mm256_set1_pd(a[(i + 1) * k + l]);
                let av2 = _mm256_set1_pd(a[(i + 2) * k + l]);
                let av3 = _mm256_set1_pd(a[(i + 3) * k + l]);
                let b0 = b.as_ptr().add(i * n);
                let b1 = b.as_ptr().add((i + 1) * n);
                let b2 = b.as_ptr().add((i + 2) * n);
                let b3 = b.as_ptr().add((i + 3) * n);
                let orow = &mut out[l * n..(l + 1) * n];
                let chunks = n / 4;
                for c in 0..chunks {
                    let p = orow.as_mut_ptr().add(4 * c);
                    let mut o = _mm256_loadu_pd(p);
                    o = _mm256_fmadd_pd(av0, _mm256_loadu_pd(b0.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av1, _mm256_loadu_pd(b1.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av2, _mm256_loadu_pd(b2.add(4 * c)), o);
                    o = _mm256_fmadd_pd(av3, _mm256_loadu_pd(b3.add(4 * c)), o);
                    _mm256_storeu_pd(p, o);
                }
                for j in 4 * chunks..n {
                    orow[j] += a[i * k + l] * b[i * n + j]
                        + a[(i + 1) * k + l] * b[(i + 1) * n + j]
                        + a[(i + 2) * k + l] * b[(i + 2) * n + j]
                        + a[(i + 3) * k + l] * b[(i + 3) * n + j];
                }
            }
            i += 4;
        }
        while i < m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                axpy(&mut out[l * n..(l + 1) * n], brow, av);
            }
            i += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_a_bt_acc(
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
    ) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o += dot(arow, brow);
            }
        }
    }

    /// dst += alpha * src, element-wise.
    #[target_feature(enable = "avx2,fma")]
    unsafe fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
        let n = dst.len();
        let av = _mm256_set1_pd(alpha);
        let chunks = n / 4;
        for c in 0..chunks {
            let p_dst = dst.as_mut_ptr().add(4 * c);
            let p_src = src.as_ptr().add(4 * c);
            let d = _mm256_loadu_pd(p_dst);
            let s = _mm256_loadu_pd(p_src);
            _mm256_storeu_pd(p_dst, _mm256_fmadd_pd(av, s, d));
        }
        for j in 4 * chunks..n {
            dst[j] += alpha * src[j];
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let chunks = n / 4;
        let mut acc = _mm256_setzero_pd();
        for c in 0..chunks {
            let x = _mm256_loadu_pd(a.as_ptr().add(4 * c));
            let y = _mm256_loadu_pd(b.as_ptr().add(4 * c));
            acc = _mm256_fmadd_pd(x, y, acc);
        }
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
        let mut total = lanes[0] + lanes[1] + lanes[2] + lanes[3];
        for j in 4 * chunks..n {
            total += a[j] * b[j];
        }
        total
    }

    /// AVX mirror of the scalar conv2d, using axpy on stride-1 rows.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv2d(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        out: &mut [f64],
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) {
        let oh = super::conv_out_dim(h, kh, stride, pad);
        let ow = super::conv_out_dim(wd, kw, stride, pad);
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.fill(b[co]);
            for ci in 0..cin {
                let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
                let wbase = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = super::valid_range(h, ky, stride, pad, oh);
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = super::valid_range(wd, kx, stride, pad, ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xplane[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let base = ox_lo + kx - pad;
                                axpy(orow, &xrow[base..base + orow.len()], wv);
                            } else {
                                for (i, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox_lo + i) * stride + kx - pad;
                                    *o += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// AVX mirror of the scalar conv2d backward pass.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv2d_backward(
        x: &[f64],
        w: &[f64],
        gout: &[f64],
        dx: &mut [f64],
        dw: &mut [f64],
        db: &mut [f64],
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) {
        let oh = super::conv_out_dim(h, kh, stride, pad);
        let ow = super::conv_out_dim(wd, kw, stride, pad);
        for co in 0..cout {
            let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
            db[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
                let dxplane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                let wbase = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = super::valid_range(h, ky, stride, pad, oh);
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = super::valid_range(wd, kx, stride, pad, ow);
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xplane[iy * wd..(iy + 1) * wd];
                            let dxrow = &mut dxplane[iy * wd..(iy + 1) * wd];
                            let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let base = ox_lo + kx - pad;
                                wacc += dot(grow, &xrow[base..base + grow.len()]);
                                axpy(&mut dxrow[base..base + grow.len()], grow, wv);
                            } else {
                                for (i, &g) in grow.iter().enumerate() {
                                    let ix = (ox_lo + i) * stride + kx - pad;
                                    wacc += g * xrow[ix];
                                    dxrow[ix] += g * wv;
                                }
                            }
                        }
                        dw[wbase + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }

    /// out[i] = exp(row[i] - shift); returns the sum of the outputs.
    ///
    /// Cephes-style range reduction with a degree-10 Taylor polynomial;
    /// relative error stays below 1e-13 and exp(0) is exactly 1.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn exp_shifted(row: &[f64], out: &mut [f64], shift: f64) -> f64 {
        const LOG2E: f64 = std::f64::consts::LOG2_E;
        const LN2_HI: f64 = 6.931_471_803_691_238e-1;
        const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
        // 1/j! for j = 2..=10.
        const C: [f64; 9] = [
            0.5,
            1.0 / 6.0,
            1.0 / 24.0,
            1.0 / 120.0,
            1.0 / 720.0,
            1.0 / 5040.0,
            1.0 / 40320.0,
            1.0 / 362880.0,
            1.0 / 3628800.0,
        ];
        let n = row.len();
        let chunks = n / 4;
        let shift_v = _mm256_set1_pd(shift);
        let mut sum_v = _mm256_setzero_pd();
        for c in 0..chunks {
            let raw = _mm256_sub_pd(_mm256_loadu_pd(row.as_ptr().add(4 * c)), shift_v);
            // Below -708 the result underflows to zero: mask those lanes
            // out at the end and keep the scaling exponent in range.
            let alive = _mm256_cmp_pd::<_CMP_GE_OQ>(raw, _mm256_set1_pd(-708.0));
            let x = _mm256_max_pd(raw, _mm256_set1_pd(-708.0));
            let k = _mm256_round_pd::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
                _mm256_mul_pd(x, _mm256_set1_pd(LOG2E)),
            );
            let r = _mm256_fnmadd_pd(k, _mm256_set1_pd(LN2_HI), x);
            let r = _mm256_fnmadd_pd(k, _mm256_set1_pd(LN2_LO), r);
            // Horner evaluation of 1 + r + c2 r^2 + ... + c10 r^10.
            let mut p = _mm256_set1_pd(C[8]);
            for j in (0..8).rev() {
                p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(C[j]));
            }
            p = _mm256_fmadd_pd(p, _mm256_mul_pd(r, r), r);
            p = _mm256_add_pd(p, _mm256_set1_pd(1.0));
            // Scale by 2^k through the exponent bits.
            let ki = _mm256_cvtpd_epi32(k);
            let ki64 = _mm256_cvtepi32_epi64(ki);
            let biased = _mm256_add_epi64(ki64, _mm256_set1_epi64x(1023));
            let scale = _mm256_castsi256_pd(_mm256_slli_epi64::<52>(biased));
            let e = _mm256_and_pd(_mm256_mul_pd(p, scale), alive);
            _mm256_storeu_pd(out.as_mut_ptr().add(4 * c), e);
            sum_v = _mm256_add_pd(sum_v, e);
        }
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), sum_v);
        let mut sum = lanes[0] + lanes[1] + lanes[2] + lanes[3];
        for j in 4 * chunks..n {
            let e = (row[j] - shift).exp();
            out[j] = e;
            sum += e;
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a: Vec<f64> = (0..35).map(|v| (v as f64) * 0.3 - 4.0).collect(); // 5x7
        let b: Vec<f64> = (0..63).map(|v| (v as f64) * 0.5 - 10.0).collect(); // 7x9
        let mut expect = vec![0.0; 45];
        matmul(&a, &b, &mut expect, 5, 7, 9);

        let mut at = vec![0.0; 35];
        transpose(&a, &mut at, 5, 7); // (7,5)
        let mut got = vec![0.0; 45];
        matmul_at_b_acc(&at, &b, &mut got, 7, 5, 9);
        for (x, y) in got.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; 63];
        transpose(&b, &mut bt, 7, 9); // (9,7)
        let mut got2 = vec![0.0; 45];
        matmul_a_bt_acc(&a, &bt, &mut got2, 5, 7, 9);
        for (x, y) in got2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_std_exp() {
        let x: Vec<f64> = (0..23).map(|v| (v as f64) * 0.37 - 4.0).collect();
        let mut got = vec![0.0; 23];
        softmax_rows(&x, &mut got, 1, 23);
        let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / sum).abs() < 1e-12, "{g} vs {}", e / sum);
        }
        let total: f64 = got.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_extreme_rows() {
        let x = [0.0, -1000.0, 5.0, 5.0];
        let mut out = [0.0; 4];
        softmax_rows(&x, &mut out, 1, 4);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - out[3]).abs() < 1e-15);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input plane.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let w = [1.0];
        let b = [0.0];
        let mut out = vec![0.0; 9];
        conv2d(&x, &w, &b, &mut out, 1, 3, 3, 1, 1, 1, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Branch-free ranges must agree with the direct definition.
        let cin = 2;
        let (h, wd) = (7, 6);
        let (cout, kh, kw) = (3, 3, 3);
        let x: Vec<f64> = (0..cin * h * wd).map(|v| (v as f64) * 0.1 - 2.0).collect();
        let w: Vec<f64> = (0..cout * cin * kh * kw)
            .map(|v| (v as f64) * 0.01 - 0.2)
            .collect();
        let b = [0.5, -0.25, 0.0];
        for stride in [1usize, 2] {
            for pad in [0usize, 1] {
                if h + 2 * pad < kh {
                    continue;
                }
                let oh = conv_out_dim(h, kh, stride, pad);
                let ow = conv_out_dim(wd, kw, stride, pad);
                let mut got = vec![0.0; cout * oh * ow];
                conv2d(&x, &w, &b, &mut got, cin, h, wd, cout, kh, kw, stride, pad);
                let mut expect = vec![0.0; cout * oh * ow];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < wd as isize
                                        {
                                            acc += x[ci * h * wd
                                                + iy as usize * wd
                                                + ix as usize]
                                                * w[((co * cin + ci) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                            expect[co * oh * ow + oy * ow + ox] = acc;
                        }
                    }
                }
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-12, "stride {stride} pad {pad}");
                }
            }
        }
    }

    #[test]
    fn conv_strided_shape() {
        assert_eq!(conv_out_dim(64, 3, 2, 1), 32);
        assert_eq!(conv_out_dim(32, 3, 2, 1), 16);
        assert_eq!(conv_out_dim(16, 3, 1, 1), 16);
    }
}
