//! Region-aware cross-attention control for layout-to-image diffusion.
//!
//! The crate provides the region/mask data model, a reference cross-attention
//! implementation, four attention control methods, a small deterministic
//! two-branch denoiser that exercises them, the SimpleScenes dataset
//! generator, localized-description metrics and the CATP wire protocol used
//! to embed the kernel in external pipelines.

pub mod attention;
pub mod config;
pub mod control;
pub mod eval;
pub mod image;
pub mod layout_file;
pub mod microdiff;
pub mod region;
pub mod rng;
pub mod shapes;
pub mod simplescenes;
pub mod wire;
