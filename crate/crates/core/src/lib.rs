//! Differentially private fine-tuning micro-engine.
//!
//! A self-contained f64 deep-learning core built for one job: training small
//! networks under differential privacy, either end to end (per-sample
//! gradient clipping over all parameters, by instantiation or by the ghost
//! norm trick) or bias-only, where clipping needs no activation caches and
//! costs O(B * p) extra per layer. Alongside the engine sit an RDP privacy
//! accountant, an analytic per-layer cost model, and a benchmark harness
//! (see the companion CLI crate).
//!
//! With the default `parallel` feature, batch-independent kernels fan out
//! via rayon; reductions keep a fixed sequential order so results are
//! bitwise identical at any thread count. Disabling the feature leaves the
//! plain sequential fallback.

pub mod accountant;
pub mod analysis;
pub mod autograd;
pub mod error;
pub mod ledger;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ledger::AllocTag;
pub use rng::StreamRng;
pub use tensor::Tensor;
