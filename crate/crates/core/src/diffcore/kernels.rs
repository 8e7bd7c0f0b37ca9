//! Slice-level numeric kernels behind the tape operations.
//!
//! Convolutions are lowered to `im2col` + GEMM. The transposed convolution
//! reuses the same lowering with the roles of the two spatial grids swapped,
//! which makes it the exact adjoint of `conv2d` for a shared kernel.

/// Storage order of a GEMM operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Logical `[rows, cols]` stored row-major.
    Normal,
    /// Logical `[rows, cols]` stored as its row-major transpose.
    Transposed,
}

/// `c = a·b + beta·c` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the corresponding slice, and `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Spatial geometry of a strided, zero-padded correlation from an
/// `in_h × in_w` grid to an `out_h × out_w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Input coordinate hit by output coordinate `o` and kernel tap `t`.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + t).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }
}

/// Unfold one `[C, H, W]` image into `[C·kh·kw, out_h·out_w]` columns.
pub(crate) fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match ConvGeometry::source(oy, i, g.stride, g.pad, g.in_h) {
                        Some(iy) => {
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match ConvGeometry::source(ox, j, g.stride, g.pad, g.in_w) {
                                    Some(ix) => src[ix],
                                    None => 0.0,
                                };
                            }
                        }
                        None => line.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, x: &mut [f32]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::source(oy, i, g.stride, g.pad, g.in_h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = ConvGeometry::source(ox, j, g.stride, g.pad, g.in_w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched correlation. `x: [N, C, H, W]`, `k: [F, C, kh, kw]`.
pub(crate) fn conv2d_forward(x: &[f32], n: usize, k: &[f32], filters: usize, g: &ConvGeometry) -> Vec<f32> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut out = vec![0.0; n * filters * ncols];
    let mut cols = vec![0.0; rows * ncols];
    for (xs, os) in x.chunks_exact(g.in_len()).zip(out.chunks_exact_mut(filters * ncols)) {
        im2col(xs, g, &mut cols);
        gemm(filters, rows, ncols, k, Layout::Normal, &cols, Layout::Normal, 0.0, os);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to the input and/or kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    k: &[f32],
    filters: usize,
    g: &ConvGeometry,
    dout: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dk: Option<&mut [f32]>,
) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut cols = vec![0.0; rows * ncols];
    for s in 0..n {
        let ds = &dout[s * filters * ncols..(s + 1) * filters * ncols];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[s * g.in_len()..(s + 1) * g.in_len()], g, &mut cols);
            gemm(
                filters,
                ncols,
                rows,
                ds,
                Layout::Normal,
                &cols,
                Layout::Transposed,
                1.0,
                dk,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                rows,
                filters,
                ncols,
                k,
                Layout::Transposed,
                ds,
                Layout::Normal,
                0.0,
                &mut cols,
            );
            col2im(&cols, g, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
        }
    }
}

/// Batched transposed convolution. `z: [N, C, H, W]`, `k: [C, F, kh, kw]`.
///
/// `g` describes the equivalent forward correlation: its input grid is the
/// transposed convolution's output (`F` channels) and its output grid is `z`'s.
pub(crate) fn conv_transpose2d_forward(
    z: &[f32],
    n: usize,
    k: &[f32],
    in_channels: usize,
    g: &ConvGeometry,
) -> Vec<f32> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut out = vec![0.0; n * g.in_len()];
    let mut cols = vec![0.0; rows * ncols];
    for (zs, os) in z
        .chunks_exact(in_channels * ncols)
        .zip(out.chunks_exact_mut(g.in_len()))
    {
        gemm(
            rows,
            in_channels,
            ncols,
            k,
            Layout::Transposed,
            zs,
            Layout::Normal,
            0.0,
            &mut cols,
        );
        col2im(&cols, g, os);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    z: &[f32],
    n: usize,
    k: &[f32],
    in_channels: usize,
    g: &ConvGeometry,
    dout: &[f32],
    mut dz: Option<&mut [f32]>,
    mut dk: Option<&mut [f32]>,
) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let zlen = in_channels * ncols;
    let mut cols = vec![0.0; rows * ncols];
    for s in 0..n {
        im2col(&dout[s * g.in_len()..(s + 1) * g.in_len()], g, &mut cols);
        if let Some(dz) = dz.as_deref_mut() {
            gemm(
                in_channels,
                rows,
                ncols,
                k,
                Layout::Normal,
                &cols,
                Layout::Normal,
                0.0,
                &mut dz[s * zlen..(s + 1) * zlen],
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(
                in_channels,
                ncols,
                rows,
                &z[s * zlen..(s + 1) * zlen],
                Layout::Normal,
                &cols,
                Layout::Transposed,
                1.0,
                dk,
            );
        }
    }
}
