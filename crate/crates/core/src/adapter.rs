//! Runtime algebra of an adapted linear layer.

use crate::error::{ensure, Result};
use crate::stm::AdaptedLayer;
use crate::Matrix;

/// Activations fed to a layer: one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInput(Matrix);

impl LinearInput {
    pub fn batch(x: Matrix) -> Result<Self> {
        ensure!(
            x.iter().all(|v| v.is_finite()),
            "input activations must be finite"
        );
        Ok(Self(x))
    }

    pub fn vector(x: &[f64]) -> Result<Self> {
        Self::batch(Matrix::from_column_slice(x.len(), 1, x))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// `W0·x + B·(A·x)`.
pub fn forward(layer: &AdaptedLayer, x: &LinearInput) -> Result<Matrix> {
    let x = x.as_matrix();
    ensure!(
        x.nrows() == layer.cols(),
        "input has {} rows, layer expects {}",
        x.nrows(),
        layer.cols()
    );
    Ok(layer.w0() * x + layer.b() * (layer.a() * x))
}

/// `W0 + B·A`
pub fn merge(layer: &AdaptedLayer) -> Matrix {
    layer.w0() + layer.b() * layer.a()
}

/// Recovers the frozen base from a merged weight: `merged − B·A`.
pub fn unmerge(merged: &Matrix, layer: &AdaptedLayer) -> Result<Matrix> {
    ensure!(
        merged.shape() == layer.w0().shape(),
        "merged weight {:?} does not match layer {:?}",
        merged.shape(),
        layer.w0().shape()
    );
    Ok(merged - layer.b() * layer.a())
}

/// `Σ (m·r + r·n)` over the layers.
pub fn trainable_param_count(layers: &[AdaptedLayer]) -> usize {
    layers
        .iter()
        .map(|l| l.b().len() + l.a().len())
        .sum()
}
