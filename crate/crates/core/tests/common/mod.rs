#![allow(dead_code)]

use conceptlens::nmf::{ConceptModel, NmfConfig};
use conceptlens::provider::ToyModel;
use conceptlens::DenseMatrix;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hand-set model with dyadic weights, so every output is exact in binary.
pub fn golden_model() -> ToyModel {
    ToyModel::from_parts(
        &["good", "bad"],
        &["negative", "positive"],
        array![[0.0, 0.0], [1.0, 0.5], [0.25, 1.0]],
        array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]],
        array![0.0, 0.0, 0.125],
        array![[1.0, -1.0], [-1.0, 1.0], [0.5, 0.5]],
        array![0.0, 0.25],
    )
    .unwrap()
}

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Provider whose activations are fed straight to a linear head.
pub fn linear_head(head: Array2<f64>, bias: Array1<f64>) -> ToyModel {
    let p = head.nrows();
    ToyModel::from_parts(
        &["x"],
        &["a", "b"],
        Array2::zeros((2, 1)),
        Array2::zeros((1, p)),
        Array1::zeros(p),
        head,
        bias,
    )
    .unwrap()
}

/// Concept model with explicit factors and zero presence thresholds.
pub fn manual_model(w: Array2<f64>, u: Array2<f64>) -> ConceptModel {
    let r = w.ncols();
    ConceptModel {
        w: DenseMatrix::from_array(w).unwrap(),
        u: DenseMatrix::from_array(u).unwrap(),
        class_id: 0,
        config: NmfConfig::default(),
        objective_trace: vec![],
        presence_threshold: vec![0.0; r],
    }
}
