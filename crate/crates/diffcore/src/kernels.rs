//! Raw numeric kernels behind the tape ops. Convolutions go through
//! im2col + GEMM; everything is plain row-major f64.

/// C[m,n] (+)= alpha * A[m,k] @ B[k,n] with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Row-major C = A @ B, plain layout.
pub(crate) fn matmul2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

// ── linear: y[B, dout] = x[B, din] @ W[dout, din]^T (+ bias) ───────────

pub(crate) fn linear_fwd(
    batch: usize,
    din: usize,
    dout: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    y: &mut [f64],
) {
    gemm(batch, din, dout, 1.0, x, din as isize, 1, w, 1, din as isize, 0.0, y);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(dout) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

/// Accumulates dx += dy @ W.
pub(crate) fn linear_bwd_x(
    batch: usize,
    din: usize,
    dout: usize,
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
) {
    gemm(batch, dout, din, 1.0, dy, dout as isize, 1, w, din as isize, 1, 1.0, dx);
}

/// Accumulates dw += dy^T @ x and (optionally) db += column sums of dy.
pub(crate) fn linear_bwd_w(
    batch: usize,
    din: usize,
    dout: usize,
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    gemm(dout, batch, din, 1.0, dy, 1, dout as isize, x, din as isize, 1, 1.0, dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(dout) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

// ── conv2d ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// col[(c,kh,kw), (b,oh,ow)] built from x[B,C,H,W]; zero padding.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let ncols = g.b * g.oh * g.ow;
    debug_assert_eq!(col.len(), g.c_in * g.kh * g.kw * ncols);
    col.fill(0.0);
    for b in 0..g.b {
        for c in 0..g.c_in {
            let xoff = (b * g.c_in + c) * g.h * g.w;
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let row = ((c * g.kh + kh) * g.kw + kw) * ncols;
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        let cbase = row + b * g.oh * g.ow + oh * g.ow;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            col[cbase + ow] = x[xoff + ih * g.w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of col[(c,kh,kw), (b,oh,ow)] back into dx[B,C,H,W].
pub(crate) fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let ncols = g.b * g.oh * g.ow;
    for b in 0..g.b {
        for c in 0..g.c_in {
            let xoff = (b * g.c_in + c) * g.h * g.w;
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let row = ((c * g.kh + kh) * g.kw + kw) * ncols;
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        let cbase = row + b * g.oh * g.ow + oh * g.ow;
                        for ow in 0..g.ow {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            dx[xoff + ih * g.w + iw as usize] += col[cbase + ow];
                        }
                    }
                }
            }
        }
    }
}

/// y[B,O,OH,OW] = conv(x, w) + bias. `w` is [O, C, KH, KW].
pub(crate) fn conv2d_fwd(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64], y: &mut [f64]) {
    let ckk = g.c_in * g.kh * g.kw;
    let ncols = g.b * g.oh * g.ow;
    let mut col = vec![0.0; ckk * ncols];
    im2col(g, x, &mut col);
    // y_mat[o, (b,oh,ow)] = w[o, :] @ col
    let mut ymat = vec![0.0; g.c_out * ncols];
    matmul2(g.c_out, ckk, ncols, w, &col, &mut ymat);
    let plane = g.oh * g.ow;
    for b in 0..g.b {
        for o in 0..g.c_out {
            let src = o * ncols + b * plane;
            let dst = (b * g.c_out + o) * plane;
            let bo = bias[o];
            for p in 0..plane {
                y[dst + p] = ymat[src + p] + bo;
            }
        }
    }
}

/// Accumulates dx, dw, db for conv2d. `x` is the saved forward input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let ckk = g.c_in * g.kh * g.kw;
    let ncols = g.b * g.oh * g.ow;
    let plane = g.oh * g.ow;
    // dy_mat[o, (b,oh,ow)]
    let mut dymat = vec![0.0; g.c_out * ncols];
    for b in 0..g.b {
        for o in 0..g.c_out {
            let dst = o * ncols + b * plane;
            let src = (b * g.c_out + o) * plane;
            dymat[dst..dst + plane].copy_from_slice(&dy[src..src + plane]);
        }
    }
    if let Some(db) = db {
        for o in 0..g.c_out {
            db[o] += dymat[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        let mut col = vec![0.0; ckk * ncols];
        im2col(g, x, &mut col);
        // dw[o, r] += dy_mat[o, :] @ col[r, :]^T
        gemm(
            g.c_out, ncols, ckk, 1.0, &dymat, ncols as isize, 1, &col, 1, ncols as isize, 1.0, dw,
        );
    }
    if let Some(dx) = dx {
        // dcol[r, n] = w^T[r, o] @ dy_mat[o, n]
        let mut dcol = vec![0.0; ckk * ncols];
        gemm(
            ckk, g.c_out, ncols, 1.0, w, 1, ckk as isize, &dymat, ncols as isize, 1, 0.0, &mut dcol,
        );
        col2im_add(g, &dcol, dx);
    }
}

// ── deconv2d (transposed convolution) ──────────────────────────────────
//
// Input x[B,C,H,W], weight w[C,O,KH,KW], output y[B,O,OH,OW] with
// OH = (H-1)*stride + KH - 2*pad. This is exactly the data-gradient of a
// conv2d with geometry (input = y side, output = x side), so the kernels
// reuse im2col/col2im with a flipped geometry.

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeconvGeom {
    pub b: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl DeconvGeom {
    /// The geometry of the conv2d whose data-gradient this deconv is:
    /// conv maps [B, c_out, OH, OW] -> [B, c_in, H, W].
    fn as_conv(&self) -> ConvGeom {
        ConvGeom {
            b: self.b,
            c_in: self.c_out,
            h: self.oh,
            w: self.ow,
            c_out: self.c_in,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh: self.h,
            ow: self.w,
        }
    }
}

pub(crate) fn deconv2d_fwd(g: &DeconvGeom, x: &[f64], w: &[f64], bias: &[f64], y: &mut [f64]) {
    let cg = g.as_conv();
    let okk = g.c_out * g.kh * g.kw;
    let ncols = g.b * g.h * g.w;
    let plane_in = g.h * g.w;
    // x_mat[c, (b,h,w)]
    let mut xmat = vec![0.0; g.c_in * ncols];
    for b in 0..g.b {
        for c in 0..g.c_in {
            let dst = c * ncols + b * plane_in;
            let src = (b * g.c_in + c) * plane_in;
            xmat[dst..dst + plane_in].copy_from_slice(&x[src..src + plane_in]);
        }
    }
    // cols[(o,kh,kw), (b,h,w)] = w^T @ x_mat      (w is [C, O*KH*KW])
    let mut cols = vec![0.0; okk * ncols];
    gemm(
        okk, g.c_in, ncols, 1.0, w, 1, okk as isize, &xmat, ncols as isize, 1, 0.0, &mut cols,
    );
    y.fill(0.0);
    col2im_add(&cg, &cols, y);
    let plane_out = g.oh * g.ow;
    for b in 0..g.b {
        for o in 0..g.c_out {
            let dst = (b * g.c_out + o) * plane_out;
            let bo = bias[o];
            for v in &mut y[dst..dst + plane_out] {
                *v += bo;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2d_bwd(
    g: &DeconvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let cg = g.as_conv();
    let okk = g.c_out * g.kh * g.kw;
    let ncols = g.b * g.h * g.w;
    let plane_in = g.h * g.w;
    if let Some(db) = db {
        let plane_out = g.oh * g.ow;
        for b in 0..g.b {
            for o in 0..g.c_out {
                let src = (b * g.c_out + o) * plane_out;
                db[o] += dy[src..src + plane_out].iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    // dcols[(o,kh,kw), (b,h,w)] = im2col(dy) under the conv geometry.
    let mut dcols = vec![0.0; okk * ncols];
    im2col(&cg, dy, &mut dcols);
    if let Some(dx) = dx {
        // dx_mat[c, n] = w[c, :] @ dcols[:, n]
        let mut dxmat = vec![0.0; g.c_in * ncols];
        matmul2(g.c_in, okk, ncols, w, &dcols, &mut dxmat);
        for b in 0..g.b {
            for c in 0..g.c_in {
                let src = c * ncols + b * plane_in;
                let dst = (b * g.c_in + c) * plane_in;
                for p in 0..plane_in {
                    dx[dst + p] += dxmat[src + p];
                }
            }
        }
    }
    if let Some(dw) = dw {
        // dw[c, r] += x_mat[c, :] @ dcols[r, :]^T
        let mut xmat = vec![0.0; g.c_in * ncols];
        for b in 0..g.b {
            for c in 0..g.c_in {
                let dst = c * ncols + b * plane_in;
                let src = (b * g.c_in + c) * plane_in;
                xmat[dst..dst + plane_in].copy_from_slice(&x[src..src + plane_in]);
            }
        }
        gemm(
            g.c_in, ncols, okk, 1.0, &xmat, ncols as isize, 1, &dcols, 1, ncols as isize, 1.0, dw,
        );
    }
}

// ── batch norm (2d, stats over B,H,W per channel) ──────────────────────

pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn bn_train_fwd(
    b: usize,
    c: usize,
    plane: usize,
    eps: f64,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
) -> BnStats {
    let n = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            mean[ci] += x[off..off + plane].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let m = mean[ci];
            var[ci] += x[off..off + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (m, is, g, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for p in 0..plane {
                y[off + p] = (x[off + p] - m) * is * g + bt;
            }
        }
    }
    BnStats { mean, var, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_bwd(
    b: usize,
    c: usize,
    plane: usize,
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let n = (b * plane) as f64;
    // Per-channel sums of dy and dy * xhat.
    let mut s_dy = vec![0.0; c];
    let mut s_dyx = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (m, is) = (mean[ci], inv_std[ci]);
            for p in 0..plane {
                let xhat = (x[off + p] - m) * is;
                s_dy[ci] += dy[off + p];
                s_dyx[ci] += dy[off + p] * xhat;
            }
        }
    }
    if let Some(dgamma) = dgamma {
        for ci in 0..c {
            dgamma[ci] += s_dyx[ci];
        }
    }
    if let Some(dbeta) = dbeta {
        for ci in 0..c {
            dbeta[ci] += s_dy[ci];
        }
    }
    if let Some(dx) = dx {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let (m, is, g) = (mean[ci], inv_std[ci], gamma[ci]);
                let k = g * is / n;
                for p in 0..plane {
                    let xhat = (x[off + p] - m) * is;
                    dx[off + p] += k * (n * dy[off + p] - s_dy[ci] - xhat * s_dyx[ci]);
                }
            }
        }
    }
}

// ── softmax ────────────────────────────────────────────────────────────

/// Softmax over the last axis; `rows` x `d` layout.
pub(crate) fn softmax_fwd(rows: usize, d: usize, x: &[f64], y: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..d {
            let e = (row[i] - max).exp();
            y[r * d + i] = e;
            sum += e;
        }
        for i in 0..d {
            y[r * d + i] /= sum;
        }
    }
}

/// dx += y .* (dy - sum(dy .* y)) per row.
pub(crate) fn softmax_bwd(rows: usize, d: usize, y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let off = r * d;
        let dot: f64 = (0..d).map(|i| dy[off + i] * y[off + i]).sum();
        for i in 0..d {
            dx[off + i] += y[off + i] * (dy[off + i] - dot);
        }
    }
}

/// Causal softmax on [..., L, L]: row i is a softmax over columns 0..=i,
/// zero beyond. `mats` is the product of the leading dimensions.
pub(crate) fn softmax_causal_fwd(mats: usize, l: usize, x: &[f64], y: &mut [f64]) {
    for m in 0..mats {
        for i in 0..l {
            let off = (m * l + i) * l;
            let active = i + 1;
            let row = &x[off..off + active];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..active {
                let e = (row[j] - max).exp();
                y[off + j] = e;
                sum += e;
            }
            for j in 0..active {
                y[off + j] /= sum;
            }
            for j in active..l {
                y[off + j] = 0.0;
            }
        }
    }
}

pub(crate) fn softmax_causal_bwd(mats: usize, l: usize, y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for m in 0..mats {
        for i in 0..l {
            let off = (m * l + i) * l;
            let active = i + 1;
            let dot: f64 = (0..active).map(|j| dy[off + j] * y[off + j]).sum();
            for j in 0..active {
                dx[off + j] += y[off + j] * (dy[off + j] - dot);
            }
        }
    }
}
