use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Every dimension is positive and `data.len()` equals the product of the
/// shape. Scalars have shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must be non-empty with positive dims")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!("shape {shape:?} holds {numel} values but {} were given", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("positive shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a matrix; vectors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let cols = *self.shape.last().expect("non-empty shape");
        self.data[i * cols + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions disagree: {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, &mut out, r, c);
        Tensor::matrix(c, r, out)
    }
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    kernels::softmax_axis(x.data(), &mut out, outer, len, inner);
    Tensor::new(x.shape().to_vec(), out)
}

/// Cosine of the angle between two equally sized vectors.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.numel() != v.numel() {
        return Err(Error::dim(format!("cosine of {:?} and {:?}", u.shape(), v.shape())));
    }
    let nu = kernels::dot(u.data(), u.data()).sqrt();
    let nv = kernels::dot(v.data(), v.data()).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((kernels::dot(u.data(), v.data()) / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Raw slice kernels shared by the value API and the tape.
pub(crate) mod kernels {
    /// `c += a[m×k] · b[k×n]`
    pub fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let bp = &b[p * n..(p + 1) * n];
                for (cv, bv) in ci.iter_mut().zip(bp) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `c += a[m×k] · b[n×k]ᵀ`
    pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `c += a[k×m]ᵀ · b[k×n]`
    pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                if api == 0.0 {
                    continue;
                }
                let ci = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in ci.iter_mut().zip(bp) {
                    *cv += api * bv;
                }
            }
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // four lanes keep the reduction order fixed while letting the
        // compiler vectorise
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let o = c * 4;
            acc[0] += a[o] * b[o];
            acc[1] += a[o + 1] * b[o + 1];
            acc[2] += a[o + 2] * b[o + 2];
            acc[3] += a[o + 3] * b[o + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for o in chunks * 4..a.len() {
            s += a[o] * b[o];
        }
        s
    }

    pub fn transpose(a: &[f64], out: &mut [f64], r: usize, c: usize) {
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
    }

    pub fn softmax_axis(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (x[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
    }

    /// Row softmax where `keep[j] == false` columns get exactly zero mass.
    pub fn masked_softmax_rows(x: &[f64], out: &mut [f64], rows: usize, cols: usize, keep: &[bool]) {
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            let max = xr.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                if keep[j] {
                    let e = (xr[j] - max).exp();
                    or[j] = e;
                    sum += e;
                } else {
                    or[j] = 0.0;
                }
            }
            for v in or.iter_mut() {
                *v /= sum;
            }
        }
    }

    /// Numerically stable `log Σ exp(x)`.
    pub fn logsumexp(x: &[f64]) -> f64 {
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
        let z = Tensor::zeros(&[2, 2]).matmul(&b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[3, 1]);
        assert!(matches!(a.matmul(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            let s = softmax(&Tensor::vector(vec![c; 3]).unwrap(), 0).unwrap();
            for v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // e^k / (e + e^2 + e^3), evaluated directly
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, v) in s.data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        assert!((s.data()[0] - 0.0900).abs() < 1e-4);
        assert!((s.data()[1] - 0.2447).abs() < 1e-4);
        assert!((s.data()[2] - 0.6652).abs() < 1e-4);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.get2(0, 0) + s.get2(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(s.get2(0, 1), 0.5);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = Tensor::vector(vec![3.0, -1.0, 2.0]).unwrap();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let e0 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let e1 = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&e0, &e1).unwrap(), 0.0);
        let d = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert!((cosine_similarity(&e0, &d).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let zero = Tensor::zeros(&[2]);
        assert!(matches!(cosine_similarity(&zero, &d), Err(Error::Degenerate(_))));
    }
}
