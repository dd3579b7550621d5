//! Dense row-major `f64` tensors and the numeric kernels the layers are built from.
//!
//! Layout is fixed: the last dimension varies fastest. `im2col` orders the rows
//! of its output channel-major, then kernel row, then kernel column, and its
//! columns by output row then output column. Checkpoints depend on this order.

use crate::error::{FdnnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` with `shape`. Fails if the sizes disagree or any value is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FdnnError::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor data")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FdnnError::NonFinite(format!("{what} (shape {:?})", self.shape)))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FdnnError::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(FdnnError::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.ensure_finite("matmul output")?;
        Ok(t)
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(FdnnError::shape(format!("{what} must be rank 2, got {:?}", self.shape))),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FdnnError::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let t = self.map(|v| v * c);
        t.ensure_finite("scale")?;
        Ok(t)
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Σ xᵢ²
    pub fn sum_sq(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(FdnnError::domain("sum_sq of an empty tensor"));
        }
        Ok(self.data.iter().map(|v| v * v).sum())
    }

    pub fn reduce_mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(FdnnError::domain("reduce_mean of an empty tensor"));
        }
        Ok(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    /// Flat inner product ⟨self, other⟩.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(FdnnError::shape(format!(
                "dot: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// Kernel size, stride and zero padding of a 2-d sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kh: kernel.0,
            kw: kernel.1,
            stride,
            pad,
        }
    }

    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self::new((k, k), stride, pad)
    }

    /// Output size (Ho, Wo) of sliding this window over an H×W plane.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_dim(h, self.kh)?, self.out_dim(w, self.kw)?))
    }

    fn out_dim(&self, n: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || k == 0 {
            return Err(FdnnError::shape("kernel and stride must be positive"));
        }
        let span = n + 2 * self.pad;
        if span < k || !(span - k).is_multiple_of(self.stride) {
            return Err(FdnnError::shape(format!(
                "input extent {n} with pad {} is not tiled by kernel {k} at stride {}",
                self.pad, self.stride
            )));
        }
        Ok((span - k) / self.stride + 1)
    }

    /// Input extent that a transposed window maps an H×W plane to.
    pub fn transposed_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let up = |n: usize, k: usize| -> Result<usize> {
            let full = (n.max(1) - 1) * self.stride + k;
            if n == 0 || full < 2 * self.pad + 1 {
                return Err(FdnnError::shape(format!(
                    "transposed window over extent {n} collapses to nothing"
                )));
            }
            Ok(full - 2 * self.pad)
        };
        Ok((up(h, self.kh)?, up(w, self.kw)?))
    }
}

fn chw(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(FdnnError::shape(format!(
            "{what} expects a C×H×W tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Lowers a C×H×W plane to a (C·kh·kw)×(Ho·Wo) matrix of receptive fields.
pub fn im2col(x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (c, h, w) = chw(x, "im2col")?;
    let (ho, wo) = geom.output_size(h, w)?;
    let mut out = vec![0.0; c * geom.kh * geom.kw * ho * wo];
    im2col_into(x.data(), c, h, w, geom, ho, wo, &mut out);
    Ok(Tensor {
        shape: vec![c * geom.kh * geom.kw, ho * wo],
        data: out,
    })
}

/// Adjoint of [`im2col`]: scatters columns back into a C×H×W plane, summing overlaps.
pub fn col2im(cols: &Tensor, geom: ConvGeometry, out_shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = out_shape;
    let (ho, wo) = geom.output_size(h, w)?;
    let expected = [c * geom.kh * geom.kw, ho * wo];
    if cols.shape() != expected {
        return Err(FdnnError::shape(format!(
            "col2im: columns {:?} inconsistent with output {:?} (expected {:?})",
            cols.shape(),
            out_shape,
            expected
        )));
    }
    let mut out = vec![0.0; c * h * w];
    col2im_add(cols.data(), c, h, w, geom, ho, wo, &mut out);
    Ok(Tensor {
        shape: out_shape.to_vec(),
        data: out,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    cols_data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += aᵀ · b, with a stored as k×m and b as k×n.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a · bᵀ, with a stored as m×k and b as n×k.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot4(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four fixed accumulator lanes; the summation order is fixed.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
