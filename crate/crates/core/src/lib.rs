//! Lesion segmentation for grayscale ultrasound images.
//!
//! The crate covers the whole pipeline: [`image`] loading and CLAHE
//! enhancement, [`dataset`] ingestion and synthetic corpora, a
//! reverse-mode [`tensor`] engine, the attention U-Net in [`unet`],
//! [`train`]ing with [`metrics`], and [`gradcam`] explanations.

pub mod config;
pub mod dataset;
pub mod gradcam;
pub mod image;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod unet;
