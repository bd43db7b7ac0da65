//! Paragraph-first question answering over long documents.
//!
//! Documents carry one atomic markup token per paragraph; a sparse-attention
//! encoder reads fixed-length windows, the markup rows feed a paragraph
//! classifier, and a span pointer picks the short answer inside the winning
//! paragraph. Span boundaries can be trained against a Gaussian soft target.
//!
//! The numeric core is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the precision.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod gradcheck;
pub mod heads;
pub mod inference;
pub mod jsonl;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod windowing;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type WindowOutput64 = model::WindowOutput<f64>;
pub type AdamState64 = optim::AdamState<f64>;
