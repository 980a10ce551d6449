//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! eager API and the gradient tape.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} must be non-empty with positive dims"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new([data.len()], data).expect("vector: empty data")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Interprets the tensor as a matrix: the last axis is columns, all
    /// leading axes are folded into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap();
        (self.data.len() / cols, cols)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self, rhs)?;
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Tensor::new([c, r], transpose(&self.data, r, c))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let lanes = Lanes::new(&self.shape, axis)?;
        let mut out = self.data.clone();
        lanes.for_each(|idx| softmax_lane(&self.data, &mut out, idx, None));
        Tensor::new(self.shape.clone(), out)
    }

    /// Softmax restricted to the kept entries of every slice along `axis`.
    /// Dropped entries come out as exactly zero.
    pub fn masked_softmax(&self, keep: &[bool], axis: usize) -> Result<Tensor> {
        if keep.len() != self.data.len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let lanes = Lanes::new(&self.shape, axis)?;
        check_mask(&lanes, keep)?;
        let mut out = self.data.clone();
        lanes.for_each(|idx| softmax_lane(&self.data, &mut out, idx, Some(keep)));
        Tensor::new(self.shape.clone(), out)
    }

    /// Cosine similarity of two equal-length vectors. Zero-norm input is an
    /// error; the training graph uses an epsilon-guarded variant instead.
    pub fn cosine_sim(&self, other: &Tensor) -> Result<f64> {
        if self.numel() != other.numel() {
            return Err(Error::Shape {
                op: "cosine_sim",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let nu = norm(&self.data);
        let nv = norm(&other.data);
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok((dot(&self.data, &other.data) / (nu * nv)).clamp(-1.0, 1.0))
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index iterator over the 1-D slices ("lanes") of a tensor along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    pub(crate) fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f` with the flat indices of each lane in turn.
    pub(crate) fn for_each(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0; self.len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                for (t, slot) in idx.iter_mut().enumerate() {
                    *slot = (o * self.len + t) * self.inner + i;
                }
                f(&idx);
            }
        }
    }
}

pub(crate) fn check_mask(lanes: &Lanes, keep: &[bool]) -> Result<()> {
    let mut lane = 0;
    let mut bad = None;
    lanes.for_each(|idx| {
        if bad.is_none() && !idx.iter().any(|&i| keep[i]) {
            bad = Some(lane);
        }
        lane += 1;
    });
    match bad {
        Some(slice) => Err(Error::InvalidMask { slice }),
        None => Ok(()),
    }
}

pub(crate) fn softmax_lane(x: &[f64], out: &mut [f64], idx: &[usize], keep: Option<&[bool]>) {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let max = idx
        .iter()
        .filter(|&&i| kept(i))
        .map(|&i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in idx {
        if kept(i) {
            let e = (x[i] - max).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    for &i in idx {
        if kept(i) {
            out[i] /= sum;
        }
    }
}

/// Backward of a (masked) softmax lane: `dx = y ⊙ (g − Σ g⊙y)`. Dropped
/// entries have `y = 0` and so receive exactly zero.
pub(crate) fn softmax_lane_backward(y: &[f64], g: &[f64], dx: &mut [f64], idx: &[usize]) {
    let s: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
    for &i in idx {
        dx[i] += y[i] * (g[i] - s);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::eye(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::vector(vec![1000.0, 0.0, 0.0]).softmax(0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let s = Tensor::vector(vec![0.0, 2f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn masked_softmax_examples() {
        let x = Tensor::vector(vec![5.0, 1.0, 1.0]);
        let all = x.masked_softmax(&[true; 3], 0).unwrap();
        assert_eq!(all, x.softmax(0).unwrap());
        let one = x.masked_softmax(&[true, false, false], 0).unwrap();
        assert_eq!(one.data(), &[1.0, 0.0, 0.0]);
        let x = Tensor::vector(vec![0.0, 0.0, 7.0]);
        let two = x.masked_softmax(&[true, true, false], 0).unwrap();
        assert_eq!(two.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn masked_softmax_rejects_empty_slice() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let err = x
            .masked_softmax(&[true, false, false, false], 1)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidMask { slice: 1 }));
    }

    #[test]
    fn cosine_examples() {
        let u = Tensor::vector(vec![1.0, 2.0, -0.5]);
        let neg = Tensor::vector(vec![-1.0, -2.0, 0.5]);
        let orth = Tensor::vector(vec![2.0, -1.0, 0.0]);
        assert!((u.cosine_sim(&u).unwrap() - 1.0).abs() < 1e-15);
        assert!(u.cosine_sim(&orth).unwrap().abs() < 1e-15);
        assert!((u.cosine_sim(&neg).unwrap() + 1.0).abs() < 1e-15);
        let zero = Tensor::vector(vec![0.0; 3]);
        assert!(matches!(u.cosine_sim(&zero), Err(Error::ZeroVector)));
    }

    #[test]
    fn gelu_fixed_point_and_derivative() {
        assert_eq!(gelu(0.0), 0.0);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let cd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((cd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
