//! Plain-array domain types exchanged between the encoder and the adapters.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::Arr;

/// Encoder output for a batch: per-image patch tokens plus one class token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[B, N, D]`
    pub patch_tokens: Arr,
    /// `[B, D]`
    pub class_token: Arr,
    /// `(grid_h, grid_w)` with `grid_h * grid_w == N`.
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn new(patch_tokens: Arr, class_token: Arr, grid: (usize, usize)) -> Result<Self> {
        if patch_tokens.ndim() != 3 {
            return Err(Error::shape(format!(
                "patch_tokens expects [B,N,D], got {:?}",
                patch_tokens.shape()
            )));
        }
        if class_token.ndim() != 2 {
            return Err(Error::shape(format!(
                "class_token expects [B,D], got {:?}",
                class_token.shape()
            )));
        }
        let (b, n, d) = (
            patch_tokens.shape()[0],
            patch_tokens.shape()[1],
            patch_tokens.shape()[2],
        );
        if class_token.shape() != [b, d] {
            return Err(Error::shape("class_token batch/dim mismatch"));
        }
        if grid.0 * grid.1 != n {
            return Err(Error::shape(format!(
                "grid {:?} does not cover {} tokens",
                grid, n
            )));
        }
        Ok(TokenSequence {
            patch_tokens,
            class_token,
            grid,
        })
    }

    pub fn batch(&self) -> usize {
        self.patch_tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.patch_tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.patch_tokens.shape()[2]
    }

    /// Concatenate class + patch tokens into `[B, 1+N, D]`.
    pub fn stacked(&self) -> Arr {
        let b = self.batch();
        let d = self.dim();
        let cls = self
            .class_token
            .view()
            .into_shape_with_order(IxDyn(&[b, 1, d]))
            .unwrap();
        ndarray::concatenate(ndarray::Axis(1), &[cls, self.patch_tokens.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned()
            .into_dyn()
    }
}
