//! Scalar kernels behind the custom tensor ops: plain and deformable
//! column unfolding with their adjoints. Layouts are contiguous NCHW; the
//! column buffer is `N × (C·k·k) × (H_out·W_out)` with the tap index fastest
//! inside each channel block.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl UnfoldGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }
}

/// Where a column row of sample `n` starts in the column buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnLayout {
    /// `N × R × L`
    PerSample,
    /// `R × (N·L)`: one matrix for the whole batch.
    Folded,
}

impl ColumnLayout {
    #[inline]
    fn row_start(self, n: usize, r: usize, g: &UnfoldGeometry) -> usize {
        let l = g.col_len();
        match self {
            ColumnLayout::PerSample => (n * g.col_rows() + r) * l,
            ColumnLayout::Folded => (r * g.batch + n) * l,
        }
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − padding` is in range.
#[inline]
fn valid_cols(g: &UnfoldGeometry, kj: usize) -> (usize, usize) {
    let wo = g.out_width();
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.width + g.padding > kj {
        ((g.width + g.padding - kj - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn im2col<T: Float>(x: &[T], g: &UnfoldGeometry, layout: ColumnLayout) -> Vec<T> {
    let (ho, wo, k) = (g.out_height(), g.out_width(), g.kernel);
    let l = ho * wo;
    let mut cols = vec![T::zero(); g.batch * g.col_rows() * l];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let plane = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = layout.row_start(n, (c * k + ki) * k + kj, g);
                    let dst = &mut cols[row..row + l];
                    let (lo, hi) = valid_cols(g, kj);
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let src = &plane[iy as usize * g.width..][..g.width];
                        let out = &mut dst[oy * wo..][..wo];
                        let first = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (i, ox) in (lo..hi).enumerate() {
                                out[ox] = src[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Float>(cols: &[T], g: &UnfoldGeometry, layout: ColumnLayout) -> Vec<T> {
    let (ho, wo, k) = (g.out_height(), g.out_width(), g.kernel);
    let l = ho * wo;
    let mut x = vec![T::zero(); g.input_len()];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let plane = &mut x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = layout.row_start(n, (c * k + ki) * k + kj, g);
                    let src = &cols[row..row + l];
                    let (lo, hi) = valid_cols(g, kj);
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.width..][..g.width];
                        let first = lo * g.stride + kj - g.padding;
                        for (i, v) in src[oy * wo + lo..oy * wo + hi].iter().enumerate() {
                            let p = &mut dst[first + i * g.stride];
                            *p = *p + *v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear corner taps of a fractional position: `(flat index, weight,
/// ∂weight/∂y, ∂weight/∂x)` for each in-bounds corner.
#[inline]
fn bilinear_taps<T: Float>(py: T, px: T, h: usize, w: usize) -> ([(usize, T, T, T); 4], usize) {
    let mut taps = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let mut n = 0;
    // Positions at or beyond one pixel outside the map read zero everywhere.
    if py <= -T::one() || px <= -T::one() || py >= T::from(h).unwrap() || px >= T::from(w).unwrap() {
        return (taps, 0);
    }
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let y0i = y0.to_isize().unwrap();
    let x0i = x0.to_isize().unwrap();
    let corners = [
        (y0i, x0i, hy * hx, -hx, -hy),
        (y0i, x0i + 1, hy * lx, -lx, hy),
        (y0i + 1, x0i, ly * hx, hx, -ly),
        (y0i + 1, x0i + 1, ly * lx, lx, ly),
    ];
    for (yy, xx, wgt, dy, dx) in corners {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            taps[n] = (yy as usize * w + xx as usize, wgt, dy, dx);
            n += 1;
        }
    }
    (taps, n)
}

/// Geometry of a stride-1 deformable unfold with `k // 2` zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl DeformGeometry {
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn offset_len(&self) -> usize {
        self.batch * 2 * self.taps() * self.height * self.width
    }

    pub fn col_len(&self) -> usize {
        self.batch * self.channels * self.taps() * self.height * self.width
    }

    /// Sampling position of tap `j` at output `(y, x)` given its offsets.
    #[inline]
    fn position<T: Float>(&self, off: &[T], n: usize, j: usize, y: usize, x: usize) -> (T, T) {
        let hw = self.height * self.width;
        let base = (n * 2 * self.taps() + 2 * j) * hw + y * self.width + x;
        let half = (self.kernel / 2) as isize;
        let gy = (j / self.kernel) as isize - half;
        let gx = (j % self.kernel) as isize - half;
        (
            T::from(y as isize + gy).unwrap() + off[base],
            T::from(x as isize + gx).unwrap() + off[base + hw],
        )
    }
}

/// Columns of bilinearly sampled inputs at `p + g_j + δ_j(p)`.
/// Offset channel `2j` holds the row displacement of tap `j`, `2j + 1` the column one.
pub fn deform_im2col<T: Float>(x: &[T], off: &[T], g: &DeformGeometry) -> Vec<T> {
    let (h, w, kk) = (g.height, g.width, g.taps());
    let hw = h * w;
    let mut cols = vec![T::zero(); g.col_len()];
    for n in 0..g.batch {
        for j in 0..kk {
            for y in 0..h {
                for xo in 0..w {
                    let (py, px) = g.position(off, n, j, y, xo);
                    let (taps, nt) = bilinear_taps(py, px, h, w);
                    if nt == 0 {
                        continue;
                    }
                    for c in 0..g.channels {
                        let plane = &x[(n * g.channels + c) * hw..][..hw];
                        let mut v = T::zero();
                        for &(idx, wgt, _, _) in &taps[..nt] {
                            v = v + wgt * plane[idx];
                        }
                        cols[((n * g.channels + c) * kk + j) * hw + y * w + xo] = v;
                    }
                }
            }
        }
    }
    cols
}

/// Gradients of [`deform_im2col`] with respect to the input and offsets.
pub fn deform_im2col_backward<T: Float>(
    x: &[T],
    off: &[T],
    grad_cols: &[T],
    g: &DeformGeometry,
) -> (Vec<T>, Vec<T>) {
    let (h, w, kk) = (g.height, g.width, g.taps());
    let hw = h * w;
    let mut gx = vec![T::zero(); x.len()];
    let mut goff = vec![T::zero(); g.offset_len()];
    for n in 0..g.batch {
        for j in 0..kk {
            for y in 0..h {
                for xo in 0..w {
                    let (py, px) = g.position(off, n, j, y, xo);
                    let (taps, nt) = bilinear_taps(py, px, h, w);
                    if nt == 0 {
                        continue;
                    }
                    let mut dy_acc = T::zero();
                    let mut dx_acc = T::zero();
                    for c in 0..g.channels {
                        let gc = grad_cols[((n * g.channels + c) * kk + j) * hw + y * w + xo];
                        let base = (n * g.channels + c) * hw;
                        for &(idx, wgt, dwy, dwx) in &taps[..nt] {
                            gx[base + idx] = gx[base + idx] + wgt * gc;
                            dy_acc = dy_acc + dwy * x[base + idx] * gc;
                            dx_acc = dx_acc + dwx * x[base + idx] * gc;
                        }
                    }
                    let o = (n * 2 * kk + 2 * j) * hw + y * w + xo;
                    goff[o] = goff[o] + dy_acc;
                    goff[o + hw] = goff[o + hw] + dx_acc;
                }
            }
        }
    }
    (gx, goff)
}
