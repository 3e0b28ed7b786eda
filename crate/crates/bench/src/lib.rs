//! Shared fixtures for the benchmarks.

use nvs_core::metrics::synthetic_views;
use nvs_core::{Camera, ModelConfig, ParamStore, Paradigm, PosedView};

pub const RES: usize = 32;

pub struct Fixture {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub inputs: Vec<PosedView>,
    pub targets: Vec<Camera>,
}

pub fn fixture(paradigm: Paradigm, n: usize, m: usize) -> Fixture {
    let cfg = ModelConfig::desk(paradigm);
    let params = ParamStore::init(&cfg, 0).expect("desk config is valid");
    let mut views = synthetic_views(n + m, RES, RES, 1).expect("synthetic views");
    let targets = views.split_off(n).into_iter().map(|v| v.camera).collect();
    Fixture {
        cfg,
        params,
        inputs: views,
        targets,
    }
}
