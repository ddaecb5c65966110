//! Multi-scale visual detail pipeline on a toy scale.
//!
//! A high-resolution canvas is tiled with token-aligned, 50%-overlapping
//! windows at several scales ([`planner`]). Each window is encoded by a
//! seeded stand-in encoder ([`backbone`]), the per-window token grids are
//! blended back onto the canvas with Hann-weighted overlap-add ([`stitch`]),
//! and every stitched canvas is split into phase-subsampled detail stacks
//! ([`stack`]). A router softmax fuses the stacks and a sigmoid gate injects
//! the result into the visual positions of selected layers of a small
//! decoder ([`fusion`], [`decoder`]). [`pipeline`] wires it all together.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel`
//! feature disabled every mode runs sequentially. Results are bit-identical
//! either way.

pub mod backbone;
pub mod decoder;
pub mod dump;
pub mod exec;
pub mod fusion;
pub mod image;
pub mod linalg;
pub mod pipeline;
pub mod planner;
pub mod stack;
pub mod stitch;

pub use backbone::{BackboneParams, PatchFeatureGrid};
pub use decoder::{DecoderParams, HiddenState, Trace};
pub use exec::Exec;
pub use fusion::{FusionParams, InjectionParams, ProjectedTokens, RouterOutput};
pub use image::Image;
pub use linalg::{Affine, LayerNorm, Matrix};

pub use planner::{AdmissibleSet, GridConfig, PlanError, ScalePlan, WindowRect};
pub use stack::{DetailStack, PhaseOffset, StackBank};
pub use stitch::FeatureCanvas;
pub use pipeline::{PipelineConfig, PipelineError, Profile, RunReport};
