//! Per-sample 3D kernels over `(C, D, H, W)` buffers.
//!
//! Convolutions go through an im2col patch matrix, built in bounded z-slabs,
//! and GEMM.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn out_len(dim: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = dim + 2 * pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    #[cfg(test)]
    fn weight_index(&self, co: usize, ci: usize, kz: usize, kx: usize, ky: usize) -> usize {
        let k = self.kernel;
        (((co * self.in_ch + ci) * k + kz) * k + kx) * k + ky
    }

    /// Output index range `[lo, hi)` along one axis whose input tap
    /// `o * stride + k - pad` lands inside `[0, dim)`.
    fn valid_range(&self, k: usize, dim: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = ((p - k).max(0) + s - 1) / s;
        // largest o with o*s + k - p <= dim - 1
        let hi_num = dim as isize - 1 + p - k;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// `C = A·B + beta·C` for row/column-strided matrices of shape
/// `(m, k)`, `(k, n)`, `(m, n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64], sc: (usize, usize)) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cl: usize, s: (usize, usize)| (r - 1) * s.0 + (cl - 1) * s.1;
    if k > 0 {
        assert!(last(m, k, sa) < a.len() && last(k, n, sb) < b.len());
    }
    assert!(last(m, n, sc) < c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts
    // above; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(col_start, input_start, len)` for every run of in-bounds
    /// taps of the patch matrix restricted to output slices `oz ∈ [zlo, zhi)`,
    /// laid out as `(in_ch · k³) × ((zhi − zlo)·oh·ow)`; along a run the
    /// column index steps by 1 and the input index by `stride`.
    fn for_each_run(&self, zlo: usize, zhi: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let od = self.out_dims[0];
        let positions = (zhi - zlo) * oh * ow;
        let (s, p, k) = (self.stride, self.pad, self.kernel);
        for ci in 0..self.in_ch {
            let in_base = ci * d * h * w;
            for kz in 0..k {
                let (z0, z1) = self.valid_range(kz, d, od);
                let (z0, z1) = (z0.max(zlo), z1.min(zhi));
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, h, oh);
                    for ky in 0..k {
                        let (y0, y1) = self.valid_range(ky, w, ow);
                        if y0 >= y1 {
                            continue;
                        }
                        let row = ((ci * k + kz) * k + kx) * k + ky;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for ox in x0..x1 {
                                let ix = ox * s + kx - p;
                                f(
                                    row * positions + ((oz - zlo) * oh + ox) * ow + y0,
                                    in_base + (iz * h + ix) * w + y0 * s + ky - p,
                                    y1 - y0,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output z-slices per patch-matrix slab, keeping the slab near
    /// `SLAB_ELEMS` entries so it stays off the page-faulting mmap path.
    fn slab_depth(&self) -> usize {
        const SLAB_ELEMS: usize = 1 << 18;
        let kk = self.in_ch * self.kernel.pow(3);
        let plane = self.out_dims[1] * self.out_dims[2];
        (SLAB_ELEMS / (kk * plane).max(1)).clamp(1, self.out_dims[0].max(1))
    }

    /// Output z-slabs `[zlo, zhi)` covering the whole output.
    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let (od, step) = (self.out_dims[0], self.slab_depth());
        (0..od).step_by(step).map(move |z| (z, (z + step).min(od)))
    }

    /// Fills `col` with the patch matrix of one slab. Buffers reused across
    /// equal-size slabs keep their zero padding in x/y; only taps that fall
    /// outside the volume along z change between slabs and are re-zeroed.
    fn im2col(&self, input: &[f64], zlo: usize, zhi: usize, col: &mut Vec<f64>) {
        let k = self.kernel;
        let plane = self.out_dims[1] * self.out_dims[2];
        let positions = (zhi - zlo) * plane;
        let n = self.in_ch * k.pow(3) * positions;
        if col.len() != n {
            col.clear();
            col.resize(n, 0.0);
        } else {
            for kz in 0..k {
                let (z0, z1) = self.valid_range(kz, self.in_dims[0], self.out_dims[0]);
                for oz in (zlo..zhi).filter(|oz| !(z0..z1).contains(oz)) {
                    for ci in 0..self.in_ch {
                        for t in 0..k * k {
                            let row = (ci * k + kz) * k * k + t;
                            let at = row * positions + (oz - zlo) * plane;
                            col[at..at + plane].fill(0.0);
                        }
                    }
                }
            }
        }
        let s = self.stride;
        self.for_each_run(zlo, zhi, |c, i, n| {
            if s == 1 {
                col[c..c + n].copy_from_slice(&input[i..i + n]);
            } else {
                for j in 0..n {
                    col[c + j] = input[i + j * s];
                }
            }
        });
    }

    fn col2im_add(&self, gcol: &[f64], zlo: usize, zhi: usize, gin: &mut [f64]) {
        let s = self.stride;
        self.for_each_run(zlo, zhi, |c, i, n| {
            if s == 1 {
                for (dst, src) in gin[i..i + n].iter_mut().zip(&gcol[c..c + n]) {
                    *dst += src;
                }
            } else {
                for j in 0..n {
                    gin[i + j * s] += gcol[c + j];
                }
            }
        });
    }
}

/// Convolution as matrix products over slabs of the im2col patch matrix.
pub fn conv3d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let positions: usize = g.out_dims.iter().product();
    let kk = g.in_ch * g.kernel.pow(3);
    let mut out = vec![0.0; g.out_ch * positions];
    for (co, row) in out.chunks_mut(positions.max(1)).enumerate() {
        row.fill(bias[co]);
    }
    if g.is_pointwise() {
        gemm(g.out_ch, kk, positions, weight, (kk, 1), input, (positions, 1), 1.0, &mut out, (positions, 1));
        return out;
    }
    let plane = g.out_dims[1] * g.out_dims[2];
    let mut col = Vec::new();
    for (zlo, zhi) in g.slabs() {
        let n = (zhi - zlo) * plane;
        g.im2col(input, zlo, zhi, &mut col);
        gemm(g.out_ch, kk, n, weight, (kk, 1), &col, (n, 1), 1.0, &mut out[zlo * plane..], (positions, 1));
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv3d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let positions: usize = g.out_dims.iter().product();
    let kk = g.in_ch * g.kernel.pow(3);
    let gb: Vec<f64> = grad_out.chunks(positions.max(1)).map(|r| r.iter().sum()).collect();
    let mut gw = vec![0.0; weight.len()];

    if g.is_pointwise() {
        // dW = dY · Xᵀ, dX = Wᵀ · dY
        gemm(g.out_ch, positions, kk, grad_out, (positions, 1), input, (1, positions), 0.0, &mut gw, (kk, 1));
        let mut gin = vec![0.0; input.len()];
        gemm(kk, g.out_ch, positions, weight, (1, kk), grad_out, (positions, 1), 0.0, &mut gin, (positions, 1));
        return (gin, gw, gb);
    }
    let plane = g.out_dims[1] * g.out_dims[2];
    let (mut col, mut gcol) = (Vec::new(), Vec::new());
    let mut gin = vec![0.0; input.len()];
    for (zlo, zhi) in g.slabs() {
        let n = (zhi - zlo) * plane;
        let dy = &grad_out[zlo * plane..];
        g.im2col(input, zlo, zhi, &mut col);
        // dW += dY · colᵀ
        gemm(g.out_ch, n, kk, dy, (positions, 1), &col, (1, n), 1.0, &mut gw, (kk, 1));
        // dcol = Wᵀ · dY
        // beta = 0: stale contents are never read
        if gcol.len() != kk * n {
            gcol.clear();
            gcol.resize(kk * n, 0.0);
        }
        gemm(kk, g.out_ch, n, weight, (1, kk), dy, (positions, 1), 0.0, &mut gcol, (n, 1));
        g.col2im_add(&gcol, zlo, zhi, &mut gin);
    }
    (gin, gw, gb)
}

/// 2×2×2 average pooling; spatial dims must be even.
pub fn downsample2(input: &[f64], ch: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; ch * od * oh * ow];
    for c in 0..ch {
        let src = &input[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut out[c * od * oh * ow..(c + 1) * od * oh * ow];
        for z in 0..od {
            for x in 0..oh {
                for y in 0..ow {
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        for dx in 0..2 {
                            let row = ((2 * z + dz) * h + 2 * x + dx) * w + 2 * y;
                            acc += src[row] + src[row + 1];
                        }
                    }
                    dst[(z * oh + x) * ow + y] = acc * 0.125;
                }
            }
        }
    }
    out
}

pub fn downsample2_backward(grad_out: &[f64], ch: usize, in_dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = in_dims;
    let (oh, ow) = (h / 2, w / 2);
    let od = d / 2;
    let mut gin = vec![0.0; ch * d * h * w];
    for c in 0..ch {
        let go = &grad_out[c * od * oh * ow..(c + 1) * od * oh * ow];
        let gi = &mut gin[c * d * h * w..(c + 1) * d * h * w];
        for z in 0..d {
            for x in 0..h {
                let orow = &go[((z / 2) * oh + x / 2) * ow..((z / 2) * oh + x / 2 + 1) * ow];
                let irow = &mut gi[(z * h + x) * w..(z * h + x + 1) * w];
                for (y, v) in irow.iter_mut().enumerate() {
                    *v = orow[y / 2] * 0.125;
                }
            }
        }
    }
    gin
}

/// 2×2×2 nearest-neighbour upsampling.
pub fn upsample2(input: &[f64], ch: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; ch * od * oh * ow];
    for c in 0..ch {
        let src = &input[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut out[c * od * oh * ow..(c + 1) * od * oh * ow];
        for z in 0..od {
            for x in 0..oh {
                let irow = &src[((z / 2) * h + x / 2) * w..((z / 2) * h + x / 2 + 1) * w];
                let orow = &mut dst[(z * oh + x) * ow..(z * oh + x + 1) * ow];
                for (y, v) in orow.iter_mut().enumerate() {
                    *v = irow[y / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], ch: usize, in_dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = in_dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gin = vec![0.0; ch * d * h * w];
    for c in 0..ch {
        let go = &grad_out[c * od * oh * ow..(c + 1) * od * oh * ow];
        let gi = &mut gin[c * d * h * w..(c + 1) * d * h * w];
        for z in 0..od {
            for x in 0..oh {
                let orow = &go[(z * oh + x) * ow..(z * oh + x + 1) * ow];
                let irow = &mut gi[((z / 2) * h + x / 2) * w..((z / 2) * h + x / 2 + 1) * w];
                for (y, v) in orow.iter().enumerate() {
                    irow[y / 2] += v;
                }
            }
        }
    }
    gin
}
