//! Flat JSON experiment files.
//!
//! Keys are the field names of the library configs with a section prefix:
//! `phantom_r_in`, `align_lr`, `register_alpha_fg`, plus a few top-level
//! switches (`do_align`, `do_upsample`, `es_only`, `upsample_factor`,
//! `strain_measure`, `misalign_shift`, `decimate`, `seed`).

use std::path::Path;

use cine_inr::align::AlignConfig;
use cine_inr::phantom::PhantomConfig;
use cine_inr::pipeline::PipelineConfig;
use cine_inr::registration::RegConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyConfig {
    pub phantom: PhantomConfig,
    pub pipeline: PipelineConfig,
    /// Largest injected slice shift, mm (0 disables).
    pub misalign_shift: f64,
    /// Keep every k-th short-axis slice (1 disables).
    pub decimate: usize,
    pub seed: Option<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            pipeline: PipelineConfig::default(),
            misalign_shift: 0.0,
            decimate: 1,
            seed: None,
        }
    }
}

const SECTIONS: [&str; 3] = ["phantom_", "align_", "register_"];

fn section<T: DeserializeOwned>(map: &Map<String, Value>, prefix: &str) -> Result<T, String> {
    let sub: Map<String, Value> = map
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect();
    serde_json::from_value(Value::Object(sub)).map_err(|e| format!("section `{}`: {e}", prefix.trim_end_matches('_')))
}

fn field<T: DeserializeOwned>(map: &Map<String, Value>, key: &str) -> Result<Option<T>, String> {
    map.get(key)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| format!("key `{key}`: {e}")))
        .transpose()
}

impl StudyConfig {
    pub fn from_value(value: Value) -> Result<Self, String> {
        let Value::Object(map) = value else {
            return Err("configuration must be a JSON object".into());
        };
        const TOP: [&str; 8] = [
            "do_align",
            "do_upsample",
            "es_only",
            "upsample_factor",
            "strain_measure",
            "misalign_shift",
            "decimate",
            "seed",
        ];
        for key in map.keys() {
            if !TOP.contains(&key.as_str()) && !SECTIONS.iter().any(|p| key.starts_with(p)) {
                return Err(format!("unknown configuration key `{key}`"));
            }
        }
        let mut out = StudyConfig {
            phantom: section(&map, "phantom_")?,
            misalign_shift: field(&map, "misalign_shift")?.unwrap_or(0.0),
            decimate: field(&map, "decimate")?.unwrap_or(1),
            seed: field(&map, "seed")?,
            ..Default::default()
        };
        let align: AlignConfig = section(&map, "align_")?;
        let register: RegConfig = section(&map, "register_")?;
        out.pipeline.align = align;
        out.pipeline.register = register;
        if let Some(v) = field(&map, "do_align")? {
            out.pipeline.do_align = v;
        }
        if let Some(v) = field(&map, "do_upsample")? {
            out.pipeline.do_upsample = v;
        }
        if let Some(v) = field(&map, "es_only")? {
            out.pipeline.es_only = v;
        }
        if let Some(v) = field(&map, "upsample_factor")? {
            out.pipeline.upsample.factor = v;
        }
        if let Some(v) = field(&map, "strain_measure")? {
            out.pipeline.strain_measure = v;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_value(value)
    }
}
