//! im2col/col2im kernels for channels-last 3D convolution.
//!
//! A convolution from `[D,H,W,Cin]` to `[Do,Ho,Wo,Cout]` is lowered to one
//! GEMM per batch item: `cols[P, k³·Cin] · kernel[k³·Cin, Cout]`, where the
//! column index is `((kd·k + kh)·k + kw)·Cin + ci`, matching the flattened
//! `k×k×k×Cin×Cout` kernel layout. The transposed convolution reuses the
//! same geometry with the roles of the two grids swapped.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a dense 3D convolution from the `input` grid to the `output` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub output: [usize; 3],
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        input: [usize; 3],
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be positive"));
        }
        let mut output = [0; 3];
        for (o, &i) in output.iter_mut().zip(&input) {
            if i + 2 * pad < k {
                return Err(Error::invalid(
                    "conv3d",
                    format!("padded extent {} smaller than kernel {k}", i + 2 * pad),
                ));
            }
            *o = (i + 2 * pad - k) / stride + 1;
        }
        Ok(Self {
            batch,
            input,
            cin,
            output,
            cout,
            k,
            stride,
            pad,
        })
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Row length of the column matrix, `k³·Cin`.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Source coordinate along one axis, or `None` when it falls in the padding.
#[inline]
fn src(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + kk) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [od_n, oh_n, ow_n] = g.output;
    let (k, c, plen) = (g.k, g.cin, g.patch_len());
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let p = (od * oh_n + oh) * ow_n + ow;
                let row = &mut cols[p * plen..(p + 1) * plen];
                for kd in 0..k {
                    let id = src(od, kd, g.stride, g.pad, d);
                    for kh in 0..k {
                        let ih = src(oh, kh, g.stride, g.pad, h);
                        for kw in 0..k {
                            let iw = src(ow, kw, g.stride, g.pad, w);
                            let dst = &mut row[((kd * k + kh) * k + kw) * c..][..c];
                            match (id, ih, iw) {
                                (Some(id), Some(ih), Some(iw)) => {
                                    let s = ((id * h + ih) * w + iw) * c;
                                    dst.copy_from_slice(&x[s..s + c]);
                                }
                                _ => dst.fill(T::zero()),
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let [d, h, w] = g.input;
    let [od_n, oh_n, ow_n] = g.output;
    let (k, c, plen) = (g.k, g.cin, g.patch_len());
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let p = (od * oh_n + oh) * ow_n + ow;
                let row = &cols[p * plen..(p + 1) * plen];
                for kd in 0..k {
                    let Some(id) = src(od, kd, g.stride, g.pad, d) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(ih) = src(oh, kh, g.stride, g.pad, h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(iw) = src(ow, kw, g.stride, g.pad, w) else {
                                continue;
                            };
                            let s = ((id * h + ih) * w + iw) * c;
                            let from = &row[((kd * k + kh) * k + kw) * c..][..c];
                            for (dst, &v) in x[s..s + c].iter_mut().zip(from) {
                                *dst += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn sum_rows_into<T: Scalar>(g: &[T], acc: &mut [T]) {
    for row in g.chunks_exact(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Stride-1, padding-1 3³ correlation without an explicit column matrix.
///
/// On the zero-padded grid `[D+2, H+2, W+2, Cin]` an output voxel at flat
/// padded position `p` reads, for fixed `(kd, kh)`, the `3·Cin` contiguous
/// values starting at `p + kd·Hp·Wp + kh·Wp`. Those overlapping rows form a
/// strided matrix, so the whole convolution is nine GEMMs against the
/// `[3·Cin, Cout]` kernel slabs. Rows whose `h ≥ H` or `w ≥ W` are computed
/// on the padded grid and dropped.
struct Same3 {
    dims: [usize; 3],
    padded: [usize; 3],
    /// Number of padded-grid rows spanning every valid output.
    rows: usize,
}

impl Same3 {
    fn new(dims: [usize; 3]) -> Self {
        let padded = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
        let [d, h, w] = dims;
        let rows = (d - 1) * padded[1] * padded[2] + (h - 1) * padded[2] + w;
        Self { dims, padded, rows }
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    fn row_of(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.padded[1] + h) * self.padded[2] + w
    }

    fn tap_offset(&self, kd: usize, kh: usize) -> usize {
        (kd * self.padded[1] + kh) * self.padded[2]
    }

    /// Copies `x` (`[D,H,W,C]`) into the interior of a zeroed padded grid.
    fn pad_into<T: Scalar>(&self, x: &[T], c: usize, out: &mut [T]) {
        out.fill(T::zero());
        let [d, h, w] = self.dims;
        for id in 0..d {
            for ih in 0..h {
                let s = (id * h + ih) * w * c;
                let t = self.row_of(id + 1, ih + 1, 1) * c;
                out[t..t + w * c].copy_from_slice(&x[s..s + w * c]);
            }
        }
    }

    /// Places `g` (`[D,H,W,C]`) at the padded-grid rows of the outputs.
    fn spread_rows<T: Scalar>(&self, g: &[T], c: usize, out: &mut [T]) {
        out.fill(T::zero());
        let [d, h, w] = self.dims;
        for od in 0..d {
            for oh in 0..h {
                let s = (od * h + oh) * w * c;
                let t = self.row_of(od, oh, 0) * c;
                out[t..t + w * c].copy_from_slice(&g[s..s + w * c]);
            }
        }
    }

    fn gather_rows<T: Scalar>(&self, rows: &[T], c: usize, out: &mut [T]) {
        let [d, h, w] = self.dims;
        for od in 0..d {
            for oh in 0..h {
                let s = self.row_of(od, oh, 0) * c;
                let t = (od * h + oh) * w * c;
                out[t..t + w * c].copy_from_slice(&rows[s..s + w * c]);
            }
        }
    }

    /// `rows[M, Cout] = Σ_{kd,kh} shifted(xpad)[M, 3Cin] · kernel[kd,kh]`.
    fn correlate<T: Scalar>(&self, xpad: &[T], kernel: &[T], cin: usize, cout: usize, rows: &mut [T]) {
        let slab = 3 * cin;
        for kd in 0..3 {
            for kh in 0..3 {
                let first = kd == 0 && kh == 0;
                let off = self.tap_offset(kd, kh) * cin;
                let k = &kernel[(kd * 3 + kh) * slab * cout..][..slab * cout];
                T::gemm(
                    self.rows,
                    slab,
                    cout,
                    T::one(),
                    &xpad[off..],
                    cin,
                    1,
                    k,
                    cout,
                    1,
                    if first { T::zero() } else { T::one() },
                    rows,
                    cout,
                    1,
                );
            }
        }
    }

    /// `dk[kd,kh] += shifted(xpad)ᵀ · grows`.
    fn kernel_grad<T: Scalar>(&self, xpad: &[T], grows: &[T], cin: usize, cout: usize, dk: &mut [T]) {
        let slab = 3 * cin;
        for kd in 0..3 {
            for kh in 0..3 {
                let off = self.tap_offset(kd, kh) * cin;
                let dks = &mut dk[(kd * 3 + kh) * slab * cout..][..slab * cout];
                T::gemm(
                    slab,
                    self.rows,
                    cout,
                    T::one(),
                    &xpad[off..],
                    1,
                    cin,
                    grows,
                    cout,
                    1,
                    T::one(),
                    dks,
                    cout,
                    1,
                );
            }
        }
    }
}

/// Kernel for the input gradient: spatially flipped, channels transposed.
fn flip_kernel<T: Scalar>(kernel: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); kernel.len()];
    for tap in 0..27 {
        let src = 26 - tap;
        for ci in 0..cin {
            for co in 0..cout {
                out[(tap * cout + co) * cin + ci] = kernel[(src * cin + ci) * cout + co];
            }
        }
    }
    out
}

fn is_same3(g: &ConvGeom) -> bool {
    g.k == 3 && g.stride == 1 && g.pad == 1
}

fn same3_forward<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let s = Same3::new(g.input);
    let pin = g.in_positions();
    let mut out = vec![T::zero(); g.batch * pin * g.cout];
    let mut xpad = vec![T::zero(); s.padded_len() * g.cin];
    let mut rows = vec![T::zero(); s.rows * g.cout];
    for b in 0..g.batch {
        s.pad_into(&x[b * pin * g.cin..(b + 1) * pin * g.cin], g.cin, &mut xpad);
        s.correlate(&xpad, kernel, g.cin, g.cout, &mut rows);
        let ob = &mut out[b * pin * g.cout..(b + 1) * pin * g.cout];
        s.gather_rows(&rows, g.cout, ob);
        if let Some(bias) = bias {
            add_bias(ob, bias);
        }
    }
    out
}

fn same3_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let s = Same3::new(g.input);
    let pin = g.in_positions();
    let mut dk = vec![T::zero(); 27 * g.cin * g.cout];
    let mut db = vec![T::zero(); g.cout];
    let mut xpad = vec![T::zero(); s.padded_len() * g.cin];
    let mut grows = vec![T::zero(); s.padded_len() * g.cout];
    for b in 0..g.batch {
        let gb = &gout[b * pin * g.cout..(b + 1) * pin * g.cout];
        sum_rows_into(gb, &mut db);
        s.pad_into(&x[b * pin * g.cin..(b + 1) * pin * g.cin], g.cin, &mut xpad);
        s.spread_rows(gb, g.cout, &mut grows);
        s.kernel_grad(&xpad, &grows[..s.rows * g.cout], g.cin, g.cout, &mut dk);
    }
    let dx = need_input.then(|| {
        let flipped = flip_kernel(kernel, g.cin, g.cout);
        let tg = ConvGeom { cin: g.cout, cout: g.cin, ..*g };
        same3_forward(gout, &flipped, None, &tg)
    });
    (dx, dk, db)
}

/// Correlation `y = x ⋆ kernel + bias` over the geometry's input → output grids.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    if is_same3(g) {
        return same3_forward(x, kernel, bias, g);
    }
    let (pin, pout, plen) = (g.in_positions(), g.out_positions(), g.patch_len());
    let mut out = vec![T::zero(); g.batch * pout * g.cout];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); pout * plen]
    };
    for b in 0..g.batch {
        let xb = &x[b * pin * g.cin..(b + 1) * pin * g.cin];
        let ob = &mut out[b * pout * g.cout..(b + 1) * pout * g.cout];
        let a: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            pout,
            plen,
            g.cout,
            T::one(),
            a,
            plen,
            1,
            kernel,
            g.cout,
            1,
            T::zero(),
            ob,
            g.cout,
            1,
        );
        if let Some(bias) = bias {
            add_bias(ob, bias);
        }
    }
    out
}

/// Gradients of [`conv_forward`]: returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    if is_same3(g) {
        return same3_backward(x, kernel, gout, g, need_input);
    }
    let (pin, pout, plen) = (g.in_positions(), g.out_positions(), g.patch_len());
    let mut dk = vec![T::zero(); plen * g.cout];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * pin * g.cin]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); pout * plen]
    };
    let mut dcols = if pointwise || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); pout * plen]
    };
    for b in 0..g.batch {
        let xb = &x[b * pin * g.cin..(b + 1) * pin * g.cin];
        let gb = &gout[b * pout * g.cout..(b + 1) * pout * g.cout];
        sum_rows_into(gb, &mut db);
        let a: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        // dK += colsᵀ · g
        T::gemm(
            plen,
            pout,
            g.cout,
            T::one(),
            a,
            1,
            plen,
            gb,
            g.cout,
            1,
            T::one(),
            &mut dk,
            g.cout,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * pin * g.cin..(b + 1) * pin * g.cin];
            // dcols = g · Kᵀ
            let target: &mut [T] = if pointwise { dxb } else { &mut dcols };
            T::gemm(
                pout,
                g.cout,
                plen,
                T::one(),
                gb,
                g.cout,
                1,
                kernel,
                1,
                g.cout,
                T::zero(),
                target,
                plen,
                1,
            );
            if !pointwise {
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    (dx, dk, db)
}

/// Transposed convolution: the adjoint of [`conv_forward`] for geometry `g`,
/// mapping the output grid (`g.output`, `g.cout` channels) back onto the
/// input grid (`g.input`, `g.cin` channels), plus a bias over `g.cin`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (pin, pout, plen) = (g.in_positions(), g.out_positions(), g.patch_len());
    let mut out = vec![T::zero(); g.batch * pin * g.cin];
    let mut cols = vec![T::zero(); pout * plen];
    for b in 0..g.batch {
        let xb = &x[b * pout * g.cout..(b + 1) * pout * g.cout];
        let ob = &mut out[b * pin * g.cin..(b + 1) * pin * g.cin];
        T::gemm(
            pout,
            g.cout,
            plen,
            T::one(),
            xb,
            g.cout,
            1,
            kernel,
            1,
            g.cout,
            T::zero(),
            &mut cols,
            plen,
            1,
        );
        col2im_add(&cols, g, ob);
        if let Some(bias) = bias {
            add_bias(ob, bias);
        }
    }
    out
}

/// Gradients of [`conv_transpose_forward`]: `(d_input, d_kernel, d_bias)`.
///
/// The input gradient is exactly the forward correlation of `gout` with the
/// same kernel.
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (pin, pout, plen) = (g.in_positions(), g.out_positions(), g.patch_len());
    let mut dk = vec![T::zero(); plen * g.cout];
    let mut db = vec![T::zero(); g.cin];
    let mut cols = vec![T::zero(); pout * plen];
    for b in 0..g.batch {
        let gb = &gout[b * pin * g.cin..(b + 1) * pin * g.cin];
        let xb = &x[b * pout * g.cout..(b + 1) * pout * g.cout];
        sum_rows_into(gb, &mut db);
        im2col(gb, g, &mut cols);
        // dK += cols(g)ᵀ · x
        T::gemm(
            plen,
            pout,
            g.cout,
            T::one(),
            &cols,
            1,
            plen,
            xb,
            g.cout,
            1,
            T::one(),
            &mut dk,
            g.cout,
            1,
        );
    }
    let dx = need_input.then(|| conv_forward(gout, kernel, None, g));
    (dx, dk, db)
}
