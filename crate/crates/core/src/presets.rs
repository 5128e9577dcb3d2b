//! Published steering settings for real backbones.
//!
//! These are meant for analyzing traces captured from the named models; the
//! MA dimension and layer index refer to the real architecture.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub ma_dim: usize,
    pub layer: usize,
    pub alpha: f32,
    pub p: f64,
    pub steps: usize,
    pub cfg_scale: f32,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "wan2.1-1.3b",
        num_blocks: 30,
        hidden_size: 1536,
        ma_dim: 1188,
        layer: 9,
        alpha: 2.5,
        p: 8.0,
        steps: 20,
        cfg_scale: 5.0,
    },
    Preset {
        name: "wan2.2-5b",
        num_blocks: 30,
        hidden_size: 3072,
        ma_dim: 1938,
        layer: 9,
        alpha: 2.0,
        p: 12.0,
        steps: 20,
        cfg_scale: 5.0,
    },
    Preset {
        name: "cogvideox-5b",
        num_blocks: 42,
        hidden_size: 3072,
        ma_dim: 1982,
        layer: 8,
        alpha: 1.2,
        p: 8.0,
        steps: 20,
        cfg_scale: 6.0,
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name.eq_ignore_ascii_case(name))
}
