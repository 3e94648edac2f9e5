//! Dental arch standardization and structured reporting pipeline.
//!
//! The pipeline takes raw intraoral-scan meshes (binary or ASCII STL),
//! estimates the dental arch with a rotational parabola search, straightens
//! the arch by arc-length parameterization, renders deterministic multi-view
//! images from canonical cameras, and drives schema-constrained structured
//! inference whose output is validated against a dental ontology. An
//! evaluation harness computes counting, partition, and report-quality
//! metrics and runs the render/flatten/knowledge ablation grid.
//!
//! Data-parallel stages (angle grid search, per-vertex flattening,
//! rasterization bands, batch case execution) run on rayon when the default
//! `parallel` feature is enabled and fall back to plain sequential loops
//! without it.

pub mod arch_fit;
pub mod config;
pub mod dkb;
pub mod eval;
pub mod exec;
pub mod flatten;
pub mod math;
pub mod mesh_io;
pub mod render;
pub mod spatial;
pub mod synth;
pub mod vlm;

pub use config::PipelineConfig;
