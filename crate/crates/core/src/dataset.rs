//! On-disk layout of a cine study:
//!
//! ```text
//! <dir>/series.json             phase count, ED/ES indices, views present
//! <dir>/<view>/frame_XX.mha     image per time point (view = sax, ch4, ch2)
//! <dir>/<view>/mask_XX.mha      labels per time point
//! <dir>/ground_truth.json       phantom parameters, when generated
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mha::{read_mask, read_volume, write_mask, write_volume};
use crate::phantom::GroundTruth;
use crate::volume::{CineSeries, Frame, ViewSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesInfo {
    pub phases: usize,
    pub ed_index: usize,
    pub es_index: usize,
    pub views: Vec<String>,
}

pub const SERIES_FILE: &str = "series.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

fn frame_path(dir: &Path, view: &str, kind: &str, t: usize) -> PathBuf {
    dir.join(view).join(format!("{kind}_{t:02}.mha"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_series(dir: &Path, view: &str, series: &CineSeries) -> Result<()> {
    let vdir = dir.join(view);
    std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    for (t, f) in series.frames().iter().enumerate() {
        write_volume(&f.image, frame_path(dir, view, "frame", t))?;
        write_mask(&f.mask, frame_path(dir, view, "mask", t))?;
    }
    Ok(())
}

pub fn read_series(dir: &Path, view: &str, info: &SeriesInfo) -> Result<CineSeries> {
    let frames = (0..info.phases)
        .map(|t| {
            Frame::new(
                read_volume(frame_path(dir, view, "frame", t))?,
                read_mask(frame_path(dir, view, "mask", t))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    CineSeries::new(frames, info.ed_index, info.es_index)
}

pub fn write_dataset(dir: impl AsRef<Path>, views: &ViewSet, gt: Option<&GroundTruth>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = vec!["sax".to_string(), "ch4".to_string()];
    write_series(dir, "sax", &views.sax)?;
    write_series(dir, "ch4", &views.ch4)?;
    if let Some(ch2) = &views.ch2 {
        write_series(dir, "ch2", ch2)?;
        names.push("ch2".into());
    }
    let info = SeriesInfo {
        phases: views.len(),
        ed_index: views.sax.ed_index(),
        es_index: views.sax.es_index(),
        views: names,
    };
    write_json(&dir.join(SERIES_FILE), &info)?;
    if let Some(gt) = gt {
        write_json(&dir.join(GROUND_TRUTH_FILE), gt)?;
    }
    Ok(())
}

/// Reads a study; the ground truth is returned when the file exists.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(ViewSet, Option<GroundTruth>)> {
    let dir = dir.as_ref();
    let info: SeriesInfo = read_json(&dir.join(SERIES_FILE))?;
    for required in ["sax", "ch4"] {
        if !info.views.iter().any(|v| v == required) {
            return Err(Error::Config(format!("{SERIES_FILE} does not list the {required} view")));
        }
    }
    let sax = read_series(dir, "sax", &info)?;
    let ch4 = read_series(dir, "ch4", &info)?;
    let ch2 = if info.views.iter().any(|v| v == "ch2") {
        Some(read_series(dir, "ch2", &info)?)
    } else {
        None
    };
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let gt = if gt_path.exists() { Some(read_json(&gt_path)?) } else { None };
    Ok((ViewSet::new(sax, ch4, ch2)?, gt))
}

pub fn write_ground_truth(dir: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    write_json(&dir.as_ref().join(GROUND_TRUTH_FILE), gt)
}
