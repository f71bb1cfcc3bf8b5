use ndarray::{Array2, ArrayView1};

use super::Mat;
use crate::scalar::Scalar;

/// Geometry of a 1-D (transposed) convolution over `n_seq` stacked sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub n_seq: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize) -> Self {
        Self {
            n_seq: 1,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn with_seqs(mut self, n_seq: usize) -> Self {
        self.n_seq = n_seq;
        self
    }

    pub fn out_len(&self, l_in: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = l_in + 2 * self.padding;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }

    pub fn transposed_out_len(&self, l_in: usize) -> usize {
        ((l_in - 1) * self.stride + self.dilation * (self.kernel - 1) + 1)
            .saturating_sub(2 * self.padding)
    }
}

fn seq_len(rows: usize, spec: &ConvSpec) -> usize {
    assert!(
        spec.n_seq > 0 && rows % spec.n_seq == 0,
        "conv: {rows} rows do not split into {} sequences",
        spec.n_seq
    );
    rows / spec.n_seq
}

pub(super) fn conv1d_forward<T: Scalar>(
    x: &Mat<T>,
    w: &Mat<T>,
    b: Option<&Mat<T>>,
    spec: &ConvSpec,
) -> (Mat<T>, Mat<T>) {
    let (rows, cin) = x.dim();
    assert_eq!(
        w.nrows(),
        spec.kernel * cin,
        "conv1d: weight rows must be kernel·c_in"
    );
    let l_in = seq_len(rows, spec);
    let l_out = spec.out_len(l_in);
    let mut cols = Array2::zeros((spec.n_seq * l_out, spec.kernel * cin));
    for s in 0..spec.n_seq {
        for t in 0..l_out {
            let mut row = cols.row_mut(s * l_out + t);
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j * spec.dilation) as isize - spec.padding as isize;
                if pos < 0 || pos as usize >= l_in {
                    continue;
                }
                let src = x.row(s * l_in + pos as usize);
                row.slice_mut(ndarray::s![j * cin..(j + 1) * cin])
                    .assign(&src);
            }
        }
    }
    let mut out = cols.dot(w);
    if let Some(b) = b {
        out += b;
    }
    (out, cols)
}

pub(super) fn col2im<T: Scalar>(dcols: &Mat<T>, rows: usize, cin: usize, spec: &ConvSpec) -> Mat<T> {
    let l_in = seq_len(rows, spec);
    let l_out = spec.out_len(l_in);
    let mut dx = Array2::zeros((rows, cin));
    for s in 0..spec.n_seq {
        for t in 0..l_out {
            let row = dcols.row(s * l_out + t);
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j * spec.dilation) as isize - spec.padding as isize;
                if pos < 0 || pos as usize >= l_in {
                    continue;
                }
                let mut dst = dx.row_mut(s * l_in + pos as usize);
                dst += &row.slice(ndarray::s![j * cin..(j + 1) * cin]);
            }
        }
    }
    dx
}

pub(super) fn conv_transpose1d_forward<T: Scalar>(
    x: &Mat<T>,
    w: &Mat<T>,
    b: Option<&Mat<T>>,
    spec: &ConvSpec,
) -> Mat<T> {
    let (rows, cin) = x.dim();
    assert_eq!(w.nrows(), cin, "conv_transpose1d: weight rows must be c_in");
    assert_eq!(
        w.ncols() % spec.kernel,
        0,
        "conv_transpose1d: weight cols must be kernel·c_out"
    );
    let cout = w.ncols() / spec.kernel;
    let l_in = seq_len(rows, spec);
    let l_out = spec.transposed_out_len(l_in);
    let y = x.dot(w);
    let mut out = Array2::zeros((spec.n_seq * l_out, cout));
    for s in 0..spec.n_seq {
        for t in 0..l_in {
            let yr = y.row(s * l_in + t);
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j * spec.dilation) as isize - spec.padding as isize;
                if pos < 0 || pos as usize >= l_out {
                    continue;
                }
                let mut dst = out.row_mut(s * l_out + pos as usize);
                let src: ArrayView1<T> = yr.slice(ndarray::s![j * cout..(j + 1) * cout]);
                dst += &src;
            }
        }
    }
    if let Some(b) = b {
        out += b;
    }
    out
}

/// Adjoint of the overlap-add in [`conv_transpose1d_forward`].
pub(super) fn transpose_gather<T: Scalar>(
    g: &Mat<T>,
    rows_in: usize,
    cout: usize,
    spec: &ConvSpec,
) -> Mat<T> {
    let l_in = seq_len(rows_in, spec);
    let l_out = spec.transposed_out_len(l_in);
    let mut dy = Array2::zeros((rows_in, spec.kernel * cout));
    for s in 0..spec.n_seq {
        for t in 0..l_in {
            let mut dr = dy.row_mut(s * l_in + t);
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j * spec.dilation) as isize - spec.padding as isize;
                if pos < 0 || pos as usize >= l_out {
                    continue;
                }
                dr.slice_mut(ndarray::s![j * cout..(j + 1) * cout])
                    .assign(&g.row(s * l_out + pos as usize));
            }
        }
    }
    dy
}
