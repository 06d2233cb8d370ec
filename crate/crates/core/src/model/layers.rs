//! Layer primitives on batched channel-first activations.
//!
//! Activations are laid out `[n][c][z][y][x]` with x fastest, matching the
//! volume storage order.

use super::scalar::{gemm, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Act {
            n,
            c,
            dims,
            data: vec![T::zero(); n * c * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.spatial()
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[b * l..(b + 1) * l]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[b * l..(b + 1) * l]
    }

    pub fn same_shape(&self) -> Self {
        Act::zeros(self.n, self.c, self.dims)
    }
}

pub fn out_dim(d: usize, k: usize, stride: usize, pad: usize) -> usize {
    (d + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k * self.k
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| out_dim(d, self.k, self.stride, self.pad))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range along one axis for kernel offset `kk`: the outputs
/// whose input coordinate `o*stride - pad + kk` lies inside `0..len`.
fn valid_range(out: usize, len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if len + pad > kk {
        ((len + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds output z-slices `z0..z1` of one sample `[cin][z][y][x]` into
/// columns `[cin*k³][(z1-z0)*oy*ox]`.
fn im2col<T: Scalar>(x: &[T], dims: [usize; 3], s: &ConvSpec, z0: usize, z1: usize, cols: &mut Vec<T>) {
    let od = s.out_dims(dims);
    let plane = od[1] * od[2];
    let ncols = (z1 - z0) * plane;
    let k = s.k;
    cols.clear();
    cols.resize(s.cin * k * k * k * ncols, T::zero());
    let [dz, dy, dx] = dims;
    let (st, pad) = (s.stride, s.pad);
    for c in 0..s.cin {
        let xc = &x[c * dz * dy * dx..(c + 1) * dz * dy * dx];
        for kz in 0..k {
            let (zl, zh) = valid_range(od[0], dz, kz, st, pad);
            for ky in 0..k {
                let (yl, yh) = valid_range(od[1], dy, ky, st, pad);
                for kx in 0..k {
                    let (xl, xh) = valid_range(od[2], dx, kx, st, pad);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oz in zl.max(z0)..zh.min(z1) {
                        let iz = oz * st + kz - pad;
                        for oy in yl..yh {
                            let iy = oy * st + ky - pad;
                            let src = &xc[(iz * dy + iy) * dx..];
                            let d = &mut dst[((oz - z0) * od[1] + oy) * od[2]..];
                            if st == 1 {
                                let off = kx as isize - pad as isize;
                                let a = (xl as isize + off) as usize;
                                d[xl..xh].copy_from_slice(&src[a..a + (xh - xl)]);
                            } else {
                                let n = xh - xl;
                                if n > 0 {
                                    let a = xl * st + kx - pad;
                                    let s2 = &src[a..a + st * (n - 1) + 1];
                                    let d2 = &mut d[xl..xh];
                                    for i in 0..n {
                                        d2[i] = s2[i * st];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], dims: [usize; 3], s: &ConvSpec, z0: usize, z1: usize, dxs: &mut [T]) {
    let od = s.out_dims(dims);
    let ncols = (z1 - z0) * od[1] * od[2];
    let k = s.k;
    let [dz, dy, dx] = dims;
    let (st, pad) = (s.stride, s.pad);
    for c in 0..s.cin {
        let xc = &mut dxs[c * dz * dy * dx..(c + 1) * dz * dy * dx];
        for kz in 0..k {
            let (zl, zh) = valid_range(od[0], dz, kz, st, pad);
            for ky in 0..k {
                let (yl, yh) = valid_range(od[1], dy, ky, st, pad);
                for kx in 0..k {
                    let (xl, xh) = valid_range(od[2], dx, kx, st, pad);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oz in zl.max(z0)..zh.min(z1) {
                        let iz = oz * st + kz - pad;
                        for oy in yl..yh {
                            let iy = oy * st + ky - pad;
                            let d = &mut xc[(iz * dy + iy) * dx..];
                            let sr = &src[((oz - z0) * od[1] + oy) * od[2]..];
                            for ox in xl..xh {
                                d[ox * st + kx - pad] += sr[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `rows×cols` to `cols×rows`, in cache blocks.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut Vec<T>) {
    const B: usize = 32;
    dst.clear();
    dst.resize(rows * cols, T::zero());
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Output z-slices per im2col slab, sized so a slab of columns stays near
/// 256K elements.
fn slab_depth(s: &ConvSpec, od: [usize; 3]) -> usize {
    let per_slice = s.cin * s.k.pow(3) * od[1] * od[2];
    (262_144 / per_slice.max(1)).clamp(1, od[0])
}

const LANES: usize = 8;

/// Zero-padded x-rows of a single-channel sample, split by stride phase:
/// for input row `(z, y)` and phase `φ`, entry `j` is `x_pad[φ + stride·j]`.
/// Each phase is at least `min_len` long so fixed-width reads stay in-row.
struct PhaseRows<T> {
    dy: usize,
    stride: usize,
    plen: usize,
    data: Vec<T>,
}

impl<T: Scalar> PhaseRows<T> {
    fn new(x: &[T], dims: [usize; 3], stride: usize, pad: usize, min_len: usize) -> Self {
        let [dz, dy, dx] = dims;
        let px = dx + 2 * pad;
        let plen = px.div_ceil(stride).max(min_len);
        let mut data = vec![T::zero(); dz * dy * stride * plen];
        for row in 0..dz * dy {
            let src = &x[row * dx..(row + 1) * dx];
            let dst = &mut data[row * stride * plen..(row + 1) * stride * plen];
            for (i, &v) in src.iter().enumerate() {
                let q = i + pad;
                dst[(q % stride) * plen + q / stride] = v;
            }
        }
        PhaseRows { dy, stride, plen, data }
    }

    #[inline]
    fn row(&self, z: usize, y: usize) -> &[T] {
        let l = self.stride * self.plen;
        let base = (z * self.dy + y) * l;
        &self.data[base..base + l]
    }

    /// Offset of `x_pad[stride·o + kx]` for `o = 0` within a row.
    #[inline]
    fn tap(&self, kx: usize) -> usize {
        (kx % self.stride) * self.plen + kx / self.stride
    }
}

/// Kernel offsets along one axis that land inside `0..len` for output `o`.
#[inline]
fn k_range(o: usize, len: usize, s: &ConvSpec) -> std::ops::Range<usize> {
    let at = o * s.stride;
    let lo = s.pad.saturating_sub(at);
    let hi = (len + s.pad).saturating_sub(at).min(s.k);
    lo..hi.max(lo)
}

#[inline]
fn lanes<T: Scalar>(row: &[T], at: usize) -> &[T; LANES] {
    row[at..at + LANES].try_into().unwrap()
}

/// One output row of `C` consecutive channels from `co0`. `wt` is `[k³][cout]`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn c1_row_block<T: Scalar, const C: usize>(
    rows: &PhaseRows<T>,
    taps: &[usize],
    wt: &[T],
    s: &ConvSpec,
    co0: usize,
    (oz, oy): (usize, usize),
    in_dims: [usize; 3],
    nxp: usize,
    acc: &mut [T],
) {
    let k = s.k;
    let kzr = k_range(oz, in_dims[0], s);
    let kyr = k_range(oy, in_dims[1], s);
    for ch in (0..nxp).step_by(LANES) {
        let mut a = [T::splat(T::zero()); C];
        for kz in kzr.clone() {
            let iz = oz * s.stride + kz - s.pad;
            for ky in kyr.clone() {
                let iy = oy * s.stride + ky - s.pad;
                let row = rows.row(iz, iy);
                let wrow = &wt[(kz * k + ky) * k * s.cout..];
                for (kx, &t) in taps.iter().enumerate() {
                    let v = T::load(lanes(row, t + ch));
                    let wk = &wrow[kx * s.cout + co0..kx * s.cout + co0 + C];
                    for c in 0..C {
                        a[c] = T::lanes_mul_add(T::splat(wk[c]), v, a[c]);
                    }
                }
            }
        }
        for (c, ac) in a.iter().enumerate() {
            let o = (co0 + c) * nxp + ch;
            acc[o..o + LANES].copy_from_slice(&T::store(*ac));
        }
    }
}

/// Direct convolution for one input channel.
fn conv_forward_c1<T: Scalar>(x: &Act<T>, w: &[T], s: &ConvSpec) -> Act<T> {
    const C: usize = 4;
    let od = s.out_dims(x.dims);
    let mut y = Act::zeros(x.n, s.cout, od);
    let osp = y.spatial();
    let k3 = s.k.pow(3);
    let nx = od[2];
    let nxp = nx.next_multiple_of(LANES);
    let min_len = (s.k - 1) / s.stride + nxp;
    let mut acc = vec![T::zero(); s.cout * nxp];
    let mut wt = Vec::new();
    transpose(w, s.cout, k3, &mut wt);
    for b in 0..x.n {
        let rows = PhaseRows::new(x.sample(b), x.dims, s.stride, s.pad, min_len);
        let taps: Vec<usize> = (0..s.k).map(|kx| rows.tap(kx)).collect();
        let yb = y.sample_mut(b);
        for oz in 0..od[0] {
            for oy in 0..od[1] {
                let mut co = 0;
                while co < s.cout {
                    if s.cout - co >= C {
                        c1_row_block::<T, C>(&rows, &taps, &wt, s, co, (oz, oy), x.dims, nxp, &mut acc);
                        co += C;
                    } else {
                        c1_row_block::<T, 1>(&rows, &taps, &wt, s, co, (oz, oy), x.dims, nxp, &mut acc);
                        co += 1;
                    }
                }
                let row_off = (oz * od[1] + oy) * nx;
                for co in 0..s.cout {
                    let o = co * osp + row_off;
                    yb[o..o + nx].copy_from_slice(&acc[co * nxp..co * nxp + nx]);
                }
            }
        }
    }
    y
}

/// Adds `Σ g[c]·x_pad[t..]` lane-wise into `part[c]` for `C` channels of
/// padded gradient rows `g`.
#[inline]
fn c1_grad_block<T: Scalar, const C: usize>(g: &[T], nxp: usize, row: &[T], t: usize, part: &mut [T::Lanes]) {
    let mut a: [T::Lanes; C] = part.try_into().unwrap();
    for ch in (0..nxp).step_by(LANES) {
        let v = T::load(lanes(row, t + ch));
        for c in 0..C {
            a[c] = T::lanes_mul_add(T::load(lanes(g, c * nxp + ch)), v, a[c]);
        }
    }
    part.copy_from_slice(&a);
}

/// Weight gradient of [`conv_forward_c1`].
fn conv_weight_grad_c1<T: Scalar>(x: &Act<T>, dy: &Act<T>, s: &ConvSpec, dw: &mut [T]) {
    let od = dy.dims;
    let osp = dy.spatial();
    let k = s.k;
    let k3 = k * k * k;
    let nx = od[2];
    let nxp = nx.next_multiple_of(LANES);
    let min_len = (k - 1) / s.stride + nxp;
    // Lane-wise partial sums, `[k³][cout]`.
    let mut part = vec![T::splat(T::zero()); k3 * s.cout];
    let mut g = vec![T::zero(); s.cout * nxp];
    for b in 0..x.n {
        let rows = PhaseRows::new(x.sample(b), x.dims, s.stride, s.pad, min_len);
        let taps: Vec<usize> = (0..k).map(|kx| rows.tap(kx)).collect();
        let gb = dy.sample(b);
        for oz in 0..od[0] {
            let kzr = k_range(oz, x.dims[0], s);
            for oy in 0..od[1] {
                let off = (oz * od[1] + oy) * nx;
                for co in 0..s.cout {
                    g[co * nxp..co * nxp + nx].copy_from_slice(&gb[co * osp + off..co * osp + off + nx]);
                }
                for kz in kzr.clone() {
                    let iz = oz * s.stride + kz - s.pad;
                    for ky in k_range(oy, x.dims[1], s) {
                        let iy = oy * s.stride + ky - s.pad;
                        let row = rows.row(iz, iy);
                        for (kx, &t) in taps.iter().enumerate() {
                            let widx = (kz * k + ky) * k + kx;
                            let pw = &mut part[widx * s.cout..(widx + 1) * s.cout];
                            let mut co = 0;
                            while co < s.cout {
                                if s.cout - co >= 4 {
                                    c1_grad_block::<T, 4>(&g[co * nxp..], nxp, row, t, &mut pw[co..co + 4]);
                                    co += 4;
                                } else {
                                    c1_grad_block::<T, 1>(&g[co * nxp..], nxp, row, t, &mut pw[co..co + 1]);
                                    co += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for widx in 0..k3 {
        for co in 0..s.cout {
            dw[co * k3 + widx] += T::store(part[widx * s.cout + co]).iter().copied().sum::<T>();
        }
    }
}

/// Bias-free 3D convolution. Weights are `[cout][cin][kz][ky][kx]`.
pub fn conv_forward<T: Scalar>(x: &Act<T>, w: &[T], s: &ConvSpec) -> Act<T> {
    assert_eq!(x.c, s.cin);
    let od = s.out_dims(x.dims);
    let mut y = Act::zeros(x.n, s.cout, od);
    let osp = y.spatial();
    let plane = od[1] * od[2];
    let kk = s.cin * s.k * s.k * s.k;
    if s.cin == 1 && s.k > 1 {
        return conv_forward_c1(x, w, s);
    }
    if s.is_pointwise() {
        for b in 0..x.n {
            gemm(s.cout, kk, osp, w, false, x.sample(b), false, T::zero(), y.sample_mut(b));
        }
        return y;
    }
    let depth = slab_depth(s, od);
    let mut cols = Vec::new();
    for b in 0..x.n {
        let mut z0 = 0;
        while z0 < od[0] {
            let z1 = (z0 + depth).min(od[0]);
            im2col(x.sample(b), x.dims, s, z0, z1, &mut cols);
            let nc = (z1 - z0) * plane;
            let yb = &mut y.sample_mut(b)[z0 * plane..];
            gemm_strided_out(s.cout, kk, nc, w, &cols, yb, osp);
            z0 = z1;
        }
    }
    y
}

/// `C = A·B` for row-major A (m×k) and B (k×n) into C with row stride `ldc`.
fn gemm_strided_out<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], ldc: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= (m - 1) * ldc + n);
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            T::zero(),
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Accumulates the weight gradient into `dw` and returns the input gradient
/// when requested.
pub fn conv_backward<T: Scalar>(
    x: &Act<T>,
    dy: &Act<T>,
    w: &[T],
    s: &ConvSpec,
    dw: &mut [T],
    need_dx: bool,
) -> Option<Act<T>> {
    let od = dy.dims;
    let osp = dy.spatial();
    let plane = od[1] * od[2];
    let kk = s.cin * s.k * s.k * s.k;
    let mut dx = if need_dx { Some(x.same_shape()) } else { None };
    if s.cin == 1 && s.k > 1 && !need_dx {
        conv_weight_grad_c1(x, dy, s, dw);
        return None;
    }
    if s.is_pointwise() {
        for b in 0..x.n {
            gemm(s.cout, osp, kk, dy.sample(b), false, x.sample(b), true, T::one(), dw);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, s.cout, osp, w, true, dy.sample(b), false, T::zero(), dx.sample_mut(b));
            }
        }
        return dx;
    }
    // Stride-1 input gradient is a forward convolution of dy with the
    // spatially flipped, channel-transposed kernel.
    let flipped = need_dx && s.stride == 1 && 2 * s.pad + 1 == s.k;
    if flipped {
        let k3 = s.k * s.k * s.k;
        let mut wf = vec![T::zero(); w.len()];
        for co in 0..s.cout {
            for ci in 0..s.cin {
                for t in 0..k3 {
                    wf[(ci * s.cout + co) * k3 + (k3 - 1 - t)] = w[(co * s.cin + ci) * k3 + t];
                }
            }
        }
        let fs = ConvSpec { cin: s.cout, cout: s.cin, ..*s };
        dx = Some(conv_forward(dy, &wf, &fs));
    }
    let depth = slab_depth(s, od);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut dyslab = Vec::new();
    let mut cols_t = Vec::new();
    for b in 0..x.n {
        let dyb = dy.sample(b);
        let mut z0 = 0;
        while z0 < od[0] {
            let z1 = (z0 + depth).min(od[0]);
            let nc = (z1 - z0) * plane;
            im2col(x.sample(b), x.dims, s, z0, z1, &mut cols);
            dyslab.clear();
            for co in 0..s.cout {
                dyslab.extend_from_slice(&dyb[co * osp + z0 * plane..co * osp + z0 * plane + nc]);
            }
            // dW += dY · colsᵀ, with colsᵀ materialised row-major so the
            // GEMM packs contiguous rows.
            transpose(&cols, kk, nc, &mut cols_t);
            gemm(s.cout, nc, kk, &dyslab, false, &cols_t, false, T::one(), dw);
            if let (false, Some(dx)) = (flipped, dx.as_mut()) {
                dcols.clear();
                dcols.resize(kk * nc, T::zero());
                gemm(kk, s.cout, nc, w, true, &dyslab, false, T::zero(), &mut dcols);
                col2im(&dcols, x.dims, s, z0, z1, dx.sample_mut(b));
            }
            z0 = z1;
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch normalisation over (batch, space) per channel.
/// Updates the running statistics in place.
pub fn bn_forward_train<T: Scalar>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> (Act<T>, BnCache<T>) {
    let sp = x.spatial();
    let m = (x.n * sp) as f64;
    let mut y = x.same_shape();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![T::zero(); x.c];
    let eps = T::from_f64(BN_EPS);
    let mom = T::from_f64(BN_MOMENTUM);
    let cl = x.sample_len();
    for c in 0..x.c {
        let mut sum = 0.0f64;
        for b in 0..x.n {
            let o = b * cl + c * sp;
            sum += x.data[o..o + sp].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m;
        let mut ss = 0.0f64;
        for b in 0..x.n {
            let o = b * cl + c * sp;
            ss += x.data[o..o + sp]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = ss / m;
        let mean_t = T::from_f64(mean);
        let is = T::one() / (T::from_f64(var) + eps).sqrt();
        inv_std[c] = is;
        for b in 0..x.n {
            let o = b * cl + c * sp;
            for i in o..o + sp {
                let h = (x.data[i] - mean_t) * is;
                xhat[i] = h;
                y.data[i] = gamma[c] * h + beta[c];
            }
        }
        let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
        running_mean[c] = (T::one() - mom) * running_mean[c] + mom * mean_t;
        running_var[c] = (T::one() - mom) * running_var[c] + mom * T::from_f64(unbiased);
    }
    (y, BnCache { xhat, inv_std })
}

pub fn bn_forward_eval<T: Scalar>(
    x: &Act<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Act<T> {
    let sp = x.spatial();
    let cl = x.sample_len();
    let eps = T::from_f64(BN_EPS);
    let mut y = x.same_shape();
    for c in 0..x.c {
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        for b in 0..x.n {
            let o = b * cl + c * sp;
            for i in o..o + sp {
                y.data[i] = x.data[i] * scale + shift;
            }
        }
    }
    y
}

/// Accumulates `dgamma`, `dbeta` and returns the input gradient.
pub fn bn_backward<T: Scalar>(
    dy: &Act<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Act<T> {
    let sp = dy.spatial();
    let cl = dy.sample_len();
    let m = T::from_f64((dy.n * sp) as f64);
    let mut dx = dy.same_shape();
    for c in 0..dy.c {
        let mut sg = T::zero();
        let mut sb = T::zero();
        for b in 0..dy.n {
            let o = b * cl + c * sp;
            for i in o..o + sp {
                sg += dy.data[i] * cache.xhat[i];
                sb += dy.data[i];
            }
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
        let k = gamma[c] * cache.inv_std[c] / m;
        for b in 0..dy.n {
            let o = b * cl + c * sp;
            for i in o..o + sp {
                dx.data[i] = k * (m * dy.data[i] - sb - cache.xhat[i] * sg);
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut Act<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positive support of the ReLU output `y`.
pub fn relu_backward_inplace<T: Scalar>(y: &Act<T>, dy: &mut Act<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub const POOL_K: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PAD: usize = 1;

/// 3³ max pooling, stride 2, padding 1. Returns the argmax (flat index within
/// the sample-channel plane) of every output for the backward pass.
pub fn maxpool_forward<T: Scalar>(x: &Act<T>) -> (Act<T>, Vec<u32>) {
    let od = x.dims.map(|d| out_dim(d, POOL_K, POOL_STRIDE, POOL_PAD));
    let mut y = Act::zeros(x.n, x.c, od);
    let mut arg = vec![0u32; y.data.len()];
    let [dz, dy, dx] = x.dims;
    let sp = x.spatial();
    let osp = y.spatial();
    let window = |o: usize, len: usize| {
        let lo = (o * POOL_STRIDE).saturating_sub(POOL_PAD);
        let hi = (o * POOL_STRIDE + POOL_K - POOL_PAD).min(len);
        lo..hi
    };
    let xw: Vec<_> = (0..od[2]).map(|ox| window(ox, dx)).collect();
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * sp..(plane + 1) * sp];
        let yp = &mut y.data[plane * osp..(plane + 1) * osp];
        let ap = &mut arg[plane * osp..(plane + 1) * osp];
        for oz in 0..od[0] {
            let zw = window(oz, dz);
            for oy in 0..od[1] {
                let yw = window(oy, dy);
                let o0 = (oz * od[1] + oy) * od[2];
                for (ox, xr) in xw.iter().enumerate() {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for iz in zw.clone() {
                        for iy in yw.clone() {
                            let r = (iz * dy + iy) * dx;
                            for (j, &v) in src[r + xr.start..r + xr.end].iter().enumerate() {
                                if v > best {
                                    best = v;
                                    bi = r + xr.start + j;
                                }
                            }
                        }
                    }
                    yp[o0 + ox] = best;
                    ap[o0 + ox] = bi as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &Act<T>, arg: &[u32], in_dims: [usize; 3]) -> Act<T> {
    let mut dx = Act::zeros(dy.n, dy.c, in_dims);
    let sp = dx.spatial();
    let osp = dy.spatial();
    for plane in 0..dy.n * dy.c {
        for o in 0..osp {
            let i = plane * osp + o;
            dx.data[plane * sp + arg[i] as usize] += dy.data[i];
        }
    }
    dx
}

/// Global average pooling to `[n][c]`.
pub fn gap_forward<T: Scalar>(x: &Act<T>) -> Vec<T> {
    let sp = x.spatial();
    let inv = T::one() / T::from_f64(sp as f64);
    x.data.chunks(sp).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

pub fn gap_backward<T: Scalar>(dg: &[T], n: usize, c: usize, dims: [usize; 3]) -> Act<T> {
    let mut dx = Act::zeros(n, c, dims);
    let sp = dx.spatial();
    let inv = T::one() / T::from_f64(sp as f64);
    for (p, &g) in dx.data.chunks_mut(sp).zip(dg) {
        p.fill(g * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Act<f64>, w: &[f64], s: &ConvSpec) -> Act<f64> {
        let od = s.out_dims(x.dims);
        let mut y = Act::zeros(x.n, s.cout, od);
        let [dz, dy, dx] = x.dims;
        for b in 0..x.n {
            for co in 0..s.cout {
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut acc = 0.0;
                            for ci in 0..s.cin {
                                for kz in 0..s.k {
                                    for ky in 0..s.k {
                                        for kx in 0..s.k {
                                            let iz = (oz * s.stride + kz) as isize - s.pad as isize;
                                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= dz as isize
                                                || iy >= dy as isize
                                                || ix >= dx as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((b * s.cin + ci) * dz + iz as usize) * dy
                                                + iy as usize)
                                                * dx
                                                + ix as usize;
                                            let wi = (((co * s.cin + ci) * s.k + kz) * s.k + ky) * s.k + kx;
                                            acc += x.data[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            let yi = (((b * s.cout + co) * od[0] + oz) * od[1] + oy) * od[2] + ox;
                            y.data[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.7531).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for s in [
            ConvSpec { cin: 2, cout: 3, k: 3, stride: 1, pad: 1 },
            ConvSpec { cin: 2, cout: 3, k: 3, stride: 2, pad: 1 },
            ConvSpec { cin: 1, cout: 2, k: 7, stride: 2, pad: 3 },
            ConvSpec { cin: 3, cout: 2, k: 1, stride: 2, pad: 0 },
            ConvSpec { cin: 3, cout: 2, k: 1, stride: 1, pad: 0 },
        ] {
            let dims = [5, 6, 7];
            let x = Act { n: 2, c: s.cin, dims, data: pseudo(2 * s.cin * 210, 1.0) };
            let w = pseudo(s.weight_len(), 2.0);
            let got = conv_forward(&x, &w, &s);
            let want = naive_conv(&x, &w, &s);
            assert_eq!(got.dims, want.dims);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10, "{s:?}");
            }
        }
    }

    #[test]
    fn conv_spanning_several_slabs_matches_direct_loops() {
        let s = ConvSpec { cin: 4, cout: 2, k: 3, stride: 1, pad: 1 };
        let dims = [20, 20, 20];
        assert!(slab_depth(&s, s.out_dims(dims)) < 20);
        let x = Act { n: 1, c: 4, dims, data: pseudo(4 * 8000, 0.5) };
        let w = pseudo(s.weight_len(), 3.0);
        let got = conv_forward(&x, &w, &s);
        let want = naive_conv(&x, &w, &s);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-10);
        }
        let g = Act { n: 1, c: 2, dims, data: pseudo(2 * 8000, 7.0) };
        let mut dw = vec![0.0; w.len()];
        let dx = conv_backward(&x, &g, &w, &s, &mut dw, true).unwrap();
        let lhs: f64 = got.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-8 * lhs.abs().max(1.0));
        assert!((lhs - rw).abs() < 1e-8 * lhs.abs().max(1.0));
    }

    #[test]
    fn single_channel_direct_path_matches_direct_loops() {
        for s in [
            ConvSpec { cin: 1, cout: 3, k: 7, stride: 2, pad: 3 },
            ConvSpec { cin: 1, cout: 2, k: 3, stride: 1, pad: 1 },
            ConvSpec { cin: 1, cout: 2, k: 5, stride: 3, pad: 2 },
        ] {
            let dims = [9, 8, 11];
            let x = Act { n: 2, c: 1, dims, data: pseudo(2 * 792, 0.9) };
            let w = pseudo(s.weight_len(), 1.3);
            let got = conv_forward(&x, &w, &s);
            let want = naive_conv(&x, &w, &s);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10, "{s:?}");
            }
            let g = Act { n: 2, c: s.cout, dims: got.dims, data: pseudo(got.data.len(), 5.5) };
            let mut dw = vec![0.0; w.len()];
            assert!(conv_backward(&x, &g, &w, &s, &mut dw, false).is_none());
            let lhs: f64 = got.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rw).abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv_backward_dx(g)> and = <w, dw(g)>
        let s = ConvSpec { cin: 2, cout: 3, k: 3, stride: 2, pad: 1 };
        let dims = [6, 5, 4];
        let x = Act { n: 2, c: 2, dims, data: pseudo(2 * 2 * 120, 0.3) };
        let w = pseudo(s.weight_len(), 1.7);
        let y = conv_forward(&x, &w, &s);
        let g = Act { n: y.n, c: y.c, dims: y.dims, data: pseudo(y.data.len(), 4.2) };
        let mut dw = vec![0.0; w.len()];
        let dx = conv_backward(&x, &g, &w, &s, &mut dw, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9);
        assert!((lhs - rw).abs() < 1e-9);
    }

    #[test]
    fn bn_train_output_is_standardised() {
        let x = Act { n: 3, c: 2, dims: [2, 2, 3], data: pseudo(72, 0.0) };
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let (y, _) = bn_forward_train(&x, &[1.0, 1.0], &[0.0, 0.0], &mut rm, &mut rv);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.sample(b)[c * 12..(c + 1) * 12].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(rm.iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = Act { n: 1, c: 1, dims: [4, 4, 4], data: (0..64).map(|v| v as f64).collect() };
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.dims, [2, 2, 2]);
        // Output (0,0,0) covers input indices 0..=1 on every axis.
        assert_eq!(y.data[0], (16 + 4 + 1) as f64);
        assert_eq!(y.data[7], 63.0);
        let dx = maxpool_backward(&Act { n: 1, c: 1, dims: [2, 2, 2], data: vec![1.0; 8] }, &arg, [4, 4, 4]);
        assert_eq!(dx.data.iter().sum::<f64>(), 8.0);
    }
}
