use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer kind in a schedule string: `L` for WKV, `S` for softmax attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "L")]
    Linear,
    #[serde(rename = "S")]
    Softmax,
}

impl LayerKind {
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'L' => Some(Self::Linear),
            'S' => Some(Self::Softmax),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Self::Linear => 'L',
            Self::Softmax => 'S',
        }
    }
}

/// 1-based `(stage, layer)` position.
pub type LayerRef = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsbRoute {
    pub src: LayerRef,
    pub dst: LayerRef,
}

impl fmt::Display for HsbRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{}) -> ({},{})",
            self.src.0, self.src.1, self.dst.0, self.dst.1
        )
    }
}

fn default_channel_mix_ratio() -> usize {
    4
}

fn default_pos_grid() -> usize {
    56
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default)]
    pub name: String,
    pub patch_size: usize,
    pub stem_dim: usize,
    pub stage_dims: Vec<usize>,
    pub patterns: Vec<String>,
    #[serde(default)]
    pub hsb_routes: Vec<HsbRoute>,
    pub mlp_ratio: usize,
    /// Softmax layers use `dim / head_divisor` heads.
    pub head_divisor: usize,
    /// Hidden width of the channel mix, as a multiple of the stage dim.
    #[serde(default = "default_channel_mix_ratio")]
    pub channel_mix_ratio: usize,
    /// Side length of the learned positional embedding table.
    #[serde(default = "default_pos_grid")]
    pub pos_grid: usize,
}

pub const PRESET_NAMES: [&str; 4] = ["sola_t", "sola_s", "sola_b", "micro"];

pub const IMAGE_CHANNELS: usize = 3;
pub const NUM_STAGES: usize = 4;

impl BackboneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name.trim_end_matches(".json") {
            "sola_t" => include_str!("../../presets/sola_t.json"),
            "sola_s" => include_str!("../../presets/sola_s.json"),
            "sola_b" => include_str!("../../presets/sola_b.json"),
            "micro" => include_str!("../../presets/micro.json"),
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`, expected one of {PRESET_NAMES:?}"),
                ))
            }
        };
        Self::from_json(text)
    }

    /// A preset name or a path to a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::from_path(path)
        } else {
            Self::preset(name_or_path)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size", "must be positive"));
        }
        if self.stage_dims.len() != NUM_STAGES {
            return Err(Error::config(
                "stage_dims",
                format!("expected {NUM_STAGES} stages, got {}", self.stage_dims.len()),
            ));
        }
        if self.patterns.len() != NUM_STAGES {
            return Err(Error::config(
                "patterns",
                format!("expected {NUM_STAGES} stages, got {}", self.patterns.len()),
            ));
        }
        if let Some(i) = self.stage_dims.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("stage_dims[{i}]"), "must be positive"));
        }
        for i in 1..NUM_STAGES {
            if self.stage_dims[i] < self.stage_dims[i - 1] {
                return Err(Error::config(
                    format!("stage_dims[{i}]"),
                    format!(
                        "{} is smaller than the previous stage's {}",
                        self.stage_dims[i],
                        self.stage_dims[i - 1]
                    ),
                ));
            }
        }
        if self.stem_dim != self.stage_dims[0] {
            return Err(Error::config(
                "stem_dim",
                format!("{} differs from stage_dims[0] = {}", self.stem_dim, self.stage_dims[0]),
            ));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::config(format!("patterns[{i}]"), "empty schedule"));
            }
            if let Some(c) = p.chars().find(|&c| LayerKind::from_char(c).is_none()) {
                return Err(Error::config(
                    format!("patterns[{i}]"),
                    format!("invalid layer kind `{c}`, expected L or S"),
                ));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        if self.channel_mix_ratio == 0 {
            return Err(Error::config("channel_mix_ratio", "must be positive"));
        }
        if self.pos_grid == 0 {
            return Err(Error::config("pos_grid", "must be positive"));
        }
        if self.head_divisor == 0 {
            return Err(Error::config("head_divisor", "must be positive"));
        }
        for (i, &d) in self.stage_dims.iter().enumerate() {
            if self.patterns[i].contains('S') && (d % self.head_divisor != 0 || d < self.head_divisor) {
                return Err(Error::config(
                    "head_divisor",
                    format!("stage {} dim {d} is not a positive multiple of {}", i + 1, self.head_divisor),
                ));
            }
        }
        for (i, route) in self.hsb_routes.iter().enumerate() {
            self.validate_route(route)
                .map_err(|reason| Error::config(format!("hsb_routes[{i}]"), format!("{route}: {reason}")))?;
        }
        Ok(())
    }

    fn validate_route(&self, route: &HsbRoute) -> std::result::Result<(), String> {
        let src = self.kind_at(route.src).ok_or("source layer out of range")?;
        let dst = self.kind_at(route.dst).ok_or("destination layer out of range")?;
        if src != LayerKind::Linear {
            return Err("source must be an L layer".into());
        }
        if dst != LayerKind::Softmax {
            return Err("destination must be an S layer".into());
        }
        if route.dst <= route.src {
            return Err("destination must come after the source".into());
        }
        Ok(())
    }

    /// Kind of the 1-based `(stage, layer)`.
    pub fn kind_at(&self, (stage, layer): LayerRef) -> Option<LayerKind> {
        if stage == 0 || layer == 0 {
            return None;
        }
        self.patterns
            .get(stage - 1)?
            .chars()
            .nth(layer - 1)
            .and_then(LayerKind::from_char)
    }

    pub fn stage_kinds(&self, stage: usize) -> Vec<LayerKind> {
        self.patterns[stage]
            .chars()
            .filter_map(LayerKind::from_char)
            .collect()
    }

    pub fn heads(&self, stage: usize) -> usize {
        self.stage_dims[stage] / self.head_divisor
    }

    pub fn num_layers(&self) -> usize {
        self.patterns.iter().map(|p| p.len()).sum()
    }

    pub fn is_route_source(&self, at: LayerRef) -> bool {
        self.hsb_routes.iter().any(|r| r.src == at)
    }

    /// Same dims with every layer replaced by `kind` and no bridges.
    pub fn uniform_variant(&self, kind: LayerKind) -> Self {
        let c = kind.as_char();
        let mut v = self.clone();
        v.patterns = self.patterns.iter().map(|p| c.to_string().repeat(p.len())).collect();
        v.hsb_routes.clear();
        v.name = format!("{}-all-{c}", self.name);
        v
    }

    pub fn without_routes(&self) -> Self {
        let mut v = self.clone();
        v.hsb_routes.clear();
        v
    }
}
