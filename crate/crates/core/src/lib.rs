//! Learned image enhancement with bilateral grids of affine color
//! transforms.
//!
//! A small network looks at a downsampled copy of the input and predicts a
//! 3D grid of affine coefficients. A learned per-pixel guide picks the depth
//! at which each full-resolution pixel reads the grid; the sliced 3×4
//! matrix is then applied to the pixel's color.
//!
//! ```
//! use bgnet::{enhance, ModelParams, NetConfig, Tensor};
//!
//! let cfg = NetConfig::tiny(4);
//! let model = ModelParams::<f32>::init(&cfg, 7).unwrap();
//! let image = Tensor::from_fn(&[40, 56, 3], |i| (i % 17) as f32 / 16.0);
//! let out = enhance(&model, &image).unwrap();
//! assert_eq!(out.shape(), image.shape());
//! // Freshly initialized models are the identity.
//! assert!(out.max_abs_diff(&image) < 1e-5);
//! ```

pub mod autodiff;
pub mod bench;
pub mod bilateral;
pub mod coeffnet;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use bilateral::{apply_affine, compute_guide, slice, GuideParams};
pub use coeffnet::{forward_lowres, reshape_to_grid, Ablation, BilateralGrid, CoeffMap, ModelParams, NetConfig, PredictionInit};
pub use error::{Error, Result};
pub use kernels::{batch_norm, conv2d, dense, relu, BatchNormState, Mode};
pub use optim::AdamState;
pub use params::{ParamStore, Parameter};
pub use pipeline::enhance;
pub use reference::{apply_operator, fit_grid, make_dataset, OperatorKind, OperatorSpec};
pub use tensor::{Real, Tensor};
pub use trainer::{downsample_to_lowres, psnr, train, SamplePair, TrainConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/grid.md")]
    struct Grid;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/references.md")]
    struct References;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
