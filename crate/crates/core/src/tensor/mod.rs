//! Dense `f64` tensors, a reverse-mode tape, parameters and the optimizer.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;

pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckOptions, GradCheckReport};
pub use graph::{softmax, Gradients, Graph, Var};
pub use optim::{adam_step, cosine_lr, TrainConfig};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{ensure, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            !shape.is_empty(),
            "tensor shape must have at least one extent"
        );
        ensure!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure!(r.as_ref().len() == cols, "ragged rows in from_rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor::matrix(rows.len(), cols, data)
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

    /// Leading extent; the tensor is viewed as `rows × cols`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents (1 for vectors).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len() && shape.iter().all(|&e| e > 0),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Forward-only affine map `input · weight + bias` for `[B×F_in]`, `[F_in×F_out]`, `[F_out]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape.clone(),
        input.data.iter().map(|&x| x.max(0.0)).collect(),
    )
}

/// Column-wise maximum over the rows of an `[N×F]` tensor.
pub fn max_pool_set(per_point_features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(per_point_features.clone());
    let y = g.segment_max(x, 1)?;
    let f = g.value(y).cols();
    g.value(y).clone().reshape(vec![f])
}

/// Mean batch cross-entropy of `logits` against one-hot `targets`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_cross_entropy(l, targets)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_size_mismatch_and_zero_extents() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[[2.0, 3.0], [4.0, 5.0]]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_zero_weight_gives_bias_rows() {
        let x = Tensor::from_rows(&[[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]]).unwrap();
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::vector(vec![0.25, -4.0]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.row(0), &[0.25, -4.0]);
        assert_eq!(y.row(1), &[0.25, -4.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_contract_error() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            linear_forward(&x, &w, &b),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn relu_examples() {
        let y = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let y = relu(&Tensor::vector(vec![-1.0, -3.0]).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap();
        assert_eq!(max_pool_set(&x).unwrap().data(), &[3.0, 5.0]);
        let single = Tensor::from_rows(&[[4.0, -1.0, 0.5]]).unwrap();
        assert_eq!(max_pool_set(&single).unwrap().data(), single.data());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::from_rows(&[[0.7; 10]]).unwrap();
        let mut onehot = vec![0.0; 10];
        onehot[4] = 1.0;
        let t = Tensor::from_rows(&[onehot]).unwrap();
        let l = softmax_cross_entropy(&logits, &t).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);

        let logits = Tensor::from_rows(&[[10.0, -10.0]]).unwrap();
        let t = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = softmax_cross_entropy(&logits, &t).unwrap();
        // -ln(1 / (1 + e^-20)) = ln(1 + e^-20)
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-20);
        assert!((l - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let logits = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        for bad in [[0.5, 0.5], [0.0, 0.0], [1.0, 1.0], [2.0, 0.0]] {
            let t = Tensor::from_rows(&[bad]).unwrap();
            assert!(softmax_cross_entropy(&logits, &t).is_err());
        }
    }
}
