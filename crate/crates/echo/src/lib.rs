//! Surrogate modeling of time-dependent PDE fields observed on arbitrary point sets.
//!
//! The pipeline has three stages: a continuous-convolution encoder maps scattered
//! point observations onto a regular latent grid, a causal spatio-temporal
//! compressor shrinks that grid into a short sequence of latent tokens, and a
//! transformer trained with flow matching generates the tokens that were not
//! observed. A mirrored decoder maps latent tokens back to field values at
//! arbitrary query points. One trained model serves forecasting, inverse
//! inference, interpolation, initial-value extrapolation, and unconditional
//! generation; the task only changes which tokens are marked observed.

pub mod compressor;
pub mod contconv;
pub mod flowmatch;
pub mod geometry;
pub mod model;
pub mod processor;
pub mod rng;
pub mod sampler;
pub mod tensor;
