//! Inference: downsample, predict coefficients, then guide, slice and apply
//! at the input's own resolution.

use crate::bilateral::{apply_affine, luminance_guide, render, slice};
use crate::coeffnet::{predict_coeffs, reshape_to_grid, BilateralGrid, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::trainer::downsample_to_lowres;

/// Predicted grid for `image` (`[H, W, 3]`).
pub fn predict_grid<T: Real>(model: &ModelParams<T>, image: &Tensor<T>) -> Result<BilateralGrid<T>> {
    if image.rank() != 3 || image.channels() != 3 {
        return Err(Error::Shape(format!("enhance expects [H, W, 3], got {:?}", image.shape())));
    }
    let low = downsample_to_lowres(image, model.config.lowres_size)?;
    let a = predict_coeffs(model, &low)?;
    reshape_to_grid(&a, &model.config)
}

/// Renders `image` through an already predicted grid.
pub fn render_with<T: Real>(model: &ModelParams<T>, grid: &BilateralGrid<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    if model.config.ablation.luma_guide {
        let g = luminance_guide(image)?;
        apply_affine(&slice(&grid.0, &g)?, image)
    } else {
        render(&grid.0, &model.guide_params(), image)
    }
}

/// Full enhancement of one `[H, W, 3]` image. The output is not clamped.
pub fn enhance<T: Real>(model: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let grid = predict_grid(model, image)?;
    render_with(model, &grid, image)
}
