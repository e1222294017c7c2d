//! Low-level dense kernels shared by the differentiable operations.

use crate::scalar::Scalar;

/// Read-only strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], off: usize, rows: usize, cols: usize) -> Self {
        Self { data, off, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < len, "matrix view out of bounds");
        }
    }
}

/// Destination of a GEMM: `rows×cols` at `off` with the given strides.
pub(crate) struct Out<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Out<'a, T> {
    pub fn row_major(data: &'a mut [T], off: usize, cols: usize) -> Self {
        Self { data, off, rs: cols, cs: 1 }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: Out<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check(a.data.len());
    b.check(b.data.len());
    let last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = c.off + i * c.rs + j * c.cs;
                c.data[o] = if beta == T::zero() { T::zero() } else { beta * c.data[o] };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above, and `c` is a unique borrow so
    // it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Geometry of a 3D cross-correlation from `in_dims` to `out_dims`.
///
/// A transposed convolution reuses the same geometry with the roles of the
/// two spaces swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

const COL_BUDGET: usize = 1 << 20;

impl ConvGeom {
    pub fn forward(channels: usize, in_dims: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = in_dims[a] + 2 * pad;
            if span < kernel || stride == 0 {
                return None;
            }
            out_dims[a] = (span - kernel) / stride + 1;
        }
        Some(Self { channels, in_dims, out_dims, kernel, stride, pad })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Output depth planes per im2col chunk.
    pub fn planes_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out_dims[0].max(1))
    }

    /// Valid output-column range `[lo, hi)` along the fastest axis for kernel tap `kw`.
    fn w_range(&self, kw: usize) -> (usize, usize) {
        let (s, p, iw, ow) = (self.stride as isize, self.pad as isize, self.in_dims[2] as isize, self.out_dims[2] as isize);
        let off = kw as isize - p;
        // ow*s + off in [0, iw)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if iw - off <= 0 { 0 } else { ((iw - off - 1) / s + 1).min(ow) };
        (lo.min(ow) as usize, hi.max(lo.min(ow)) as usize)
    }

    /// Fills `cols` (`rows × planes·plane`) for output planes `[d0, d1)`.
    pub fn im2col<T: Scalar>(&self, x: &[T], d0: usize, d1: usize, cols: &mut [T]) {
        let [id, ih, iw] = self.in_dims.map(|v| v as isize);
        let [_, oh, ow] = self.out_dims;
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let ncols = (d1 - d0) * oh * ow;
        let in_len = self.in_len();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * in_len..(c + 1) * in_len];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let (lo, hi) = self.w_range(kw);
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for od in d0..d1 {
                            let zd = od as isize * s + kd as isize - p;
                            for ohi in 0..oh {
                                let zh = ohi as isize * s + kh as isize - p;
                                let seg = &mut dst[j..j + ow];
                                j += ow;
                                if zd < 0 || zd >= id || zh < 0 || zh >= ih {
                                    seg.fill(T::zero());
                                    continue;
                                }
                                let base = ((zd * ih + zh) * iw) as usize;
                                seg[..lo].fill(T::zero());
                                seg[hi..].fill(T::zero());
                                let start = (base as isize + lo as isize * s + kw as isize - p) as usize;
                                if s == 1 {
                                    seg[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                                } else {
                                    for (t, v) in seg[lo..hi].iter_mut().enumerate() {
                                        *v = xc[start + t * s as usize];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` for output planes `[d0, d1)` back into `x`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], d0: usize, d1: usize, x: &mut [T]) {
        let [id, ih, iw] = self.in_dims.map(|v| v as isize);
        let [_, oh, ow] = self.out_dims;
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let ncols = (d1 - d0) * oh * ow;
        let in_len = self.in_len();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * in_len..(c + 1) * in_len];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let (lo, hi) = self.w_range(kw);
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for od in d0..d1 {
                            let zd = od as isize * s + kd as isize - p;
                            for ohi in 0..oh {
                                let zh = ohi as isize * s + kh as isize - p;
                                let seg = &src[j..j + ow];
                                j += ow;
                                if zd < 0 || zd >= id || zh < 0 || zh >= ih {
                                    continue;
                                }
                                let base = ((zd * ih + zh) * iw) as usize;
                                let start = (base as isize + lo as isize * s + kw as isize - p) as usize;
                                if s == 1 {
                                    for (d, v) in xc[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                        *d += *v;
                                    }
                                } else {
                                    for (t, v) in seg[lo..hi].iter().enumerate() {
                                        xc[start + t * s as usize] += *v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Per-axis taps for ×2 linear upsampling with half-pixel centers.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
