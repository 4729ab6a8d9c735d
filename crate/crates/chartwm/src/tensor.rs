//! Dense row-major `f64` tensors.
//!
//! This is the one storage type shared by the simulator, the autodiff graph,
//! and the training loop. It stays deliberately small: shape bookkeeping,
//! elementwise arithmetic, and a cache-friendly matrix multiply. Operations
//! with derivatives live in [`crate::graph`]; matrix decompositions live in
//! [`crate::linalg`].
//!
//! Scalars are tensors with an empty shape (`numel() == 1`), which keeps
//! reductions and loss values inside the same type.

use rand_chacha::ChaCha8Rng;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Scalar tensor (empty shape, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build from an explicit shape and backing vector.
    ///
    /// Panics if the element count does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "shape {:?} needs {} elements, got {}", shape, n, data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a scalar tensor (any single-element tensor qualifies).
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.data.len() == 1
    }

    /// (rows, cols) of a 2-D tensor; panics otherwise.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// (n, c, h, w) of a 4-D tensor; panics otherwise.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4-D, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let (_, c) = self.dims2();
        self.data[i * c + j] = v;
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine; shapes must match exactly.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch {:?} vs {:?}", self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch {:?} vs {:?}", self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// Induced 1-norm of a 2-D tensor: max over columns of the absolute
    /// column sum. Used by the matrix-exponential scaling heuristic.
    pub fn one_norm(&self) -> f64 {
        let (r, c) = self.dims2();
        let mut best = 0.0_f64;
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += self.data[i * c + j].abs();
            }
            best = best.max(s);
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    ///
    /// The i-k-j loop order keeps both the right-hand row and the output row
    /// contiguous, which is what lets LLVM vectorize the inner update.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = rhs.dims2();
        assert_eq!(k, k2, "matmul inner dimensions {} vs {}", k, k2);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    /// Rows `[start, start+len)` of a 2-D tensor as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert!(start + len <= r, "slice_rows [{start}, {}) out of {r} rows", start + len);
        Tensor { shape: vec![len, c], data: self.data[start * c..(start + len) * c].to_vec() }
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = parts[0].dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2();
            assert_eq!(pc, c, "concat_rows column mismatch {} vs {}", pc, c);
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: vec![rows, c], data }
    }

    /// Fill with i.i.d. normal samples of the given standard deviation.
    ///
    /// Uses Box–Muller on ChaCha8 uniforms so results are bit-identical
    /// across platforms for a fixed seed.
    pub fn fill_normal(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        for x in self.data.iter_mut() {
            *x = std * standard_normal(rng);
        }
    }

    /// Fill with i.i.d. uniform samples from [lo, hi).
    pub fn fill_uniform(&mut self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
        use rand::Rng;
        for x in self.data.iter_mut() {
            *x = lo + (hi - lo) * rng.gen::<f64>();
        }
    }
}

/// One standard-normal sample via Box–Muller.
///
/// Deliberately not `rand_distr`: the polar/ziggurat implementations there are
/// version-dependent, and checkpoint byte-reproducibility pins every sampled
/// bit.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
