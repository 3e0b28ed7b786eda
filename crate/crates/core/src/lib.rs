//! Dual-stream transformer for posed novel view synthesis, monolithic
//! self-attention baselines, a KV-cached incremental renderer, and the
//! tooling to train, evaluate and profile them at desk scale.

pub mod attention;
pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod geometry;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod repa;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Camera, Image, PosedView, TokenGrid, TokenKind};
pub use model::{ModelConfig, ParamStore, Paradigm};
