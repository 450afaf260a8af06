//! End-to-end processing of one study: slice alignment, through-plane
//! upsampling, registration to end diastole, strain and evaluation.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{align_stack, apply_translations, apply_translations_mask, AlignConfig, SliceTranslations};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, evaluate_unregistered, MetricReport};
use crate::registration::{register_times, RegConfig, RegResult};
use crate::report::{loss_chart, strain_chart, write_loss_csv, write_text};
use crate::strain::{
    peak_strain, strain_curves, write_curves_csv, write_peaks_csv, Component, PeakStrain, StrainCurve, StrainMeasure,
    StrainSetup,
};
use crate::upsample::{upsample_series, UpsampleSpec};
use crate::volume::{CineSeries, Frame, ViewSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub do_align: bool,
    pub do_upsample: bool,
    /// Register only the end-systolic frame instead of the whole cycle.
    pub es_only: bool,
    pub align: AlignConfig,
    pub upsample: UpsampleSpec,
    pub register: RegConfig,
    pub strain_measure: StrainMeasure,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            do_align: true,
            do_upsample: true,
            es_only: false,
            align: AlignConfig::default(),
            upsample: UpsampleSpec::default(),
            register: RegConfig::default(),
            strain_measure: StrainMeasure::GreenLagrange,
        }
    }
}

impl PipelineConfig {
    /// Propagates one seed to every stochastic stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.align.seed = seed;
        self.register.seed = seed;
        self
    }
}

/// Wall time per stage, seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub align: f64,
    pub upsample: f64,
    pub register: f64,
    pub strain: f64,
    pub evaluate: f64,
}

#[derive(Clone, Debug)]
pub struct PairMetrics {
    pub moving_index: usize,
    pub registered: MetricReport,
    pub unregistered: MetricReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub translations: Option<SliceTranslations>,
    /// Views after alignment and upsampling.
    pub processed: ViewSet,
    pub results: Vec<RegResult>,
    pub curves: Vec<StrainCurve>,
    pub peaks: Vec<PeakStrain>,
    pub metrics: Vec<PairMetrics>,
    pub timings: StageTimings,
}

impl PipelineOutput {
    pub fn result_for(&self, t: usize) -> Option<&RegResult> {
        self.results.iter().find(|r| r.moving_index == t)
    }

    pub fn metrics_for(&self, t: usize) -> Option<&PairMetrics> {
        self.metrics.iter().find(|m| m.moving_index == t)
    }
}

pub fn apply_alignment(series: &CineSeries, trans: &SliceTranslations) -> Result<CineSeries> {
    series.try_map(|f| Frame::new(apply_translations(&f.image, trans)?, apply_translations_mask(&f.mask, trans)?))
}

/// Alignment and upsampling only.
pub fn preprocess(views: &ViewSet, cfg: &PipelineConfig, timings: &mut StageTimings) -> Result<(ViewSet, Option<SliceTranslations>)> {
    let start = Instant::now();
    let (sax, translations) = if cfg.do_align {
        let aligned = align_stack(views, &cfg.align)?;
        log::info!(
            "alignment: loss {:.5} -> {:.5}",
            aligned.loss_trace.first().copied().unwrap_or(f64::NAN),
            aligned.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
        (apply_alignment(&views.sax, &aligned.translations)?, Some(aligned.translations))
    } else {
        (views.sax.clone(), None)
    };
    timings.align = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let sax = if cfg.do_upsample && cfg.upsample.factor > 1 {
        upsample_series(&sax, &cfg.upsample)?
    } else {
        sax
    };
    timings.upsample = start.elapsed().as_secs_f64();
    Ok((ViewSet::new(sax, views.ch4.clone(), views.ch2.clone())?, translations))
}

/// Moving time points registered by the pipeline.
pub fn registration_times(views: &ViewSet, es_only: bool) -> Vec<usize> {
    let ed = views.sax.ed_index();
    if es_only {
        vec![views.sax.es_index()]
    } else {
        (0..views.len()).filter(|&t| t != ed).collect()
    }
}

pub fn run_pipeline(views: &ViewSet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut timings = StageTimings::default();
    let (processed, translations) = preprocess(views, cfg, &mut timings)?;
    let ed = processed.sax.ed_index();
    if processed.sax.es_index() == ed {
        return Err(Error::Config("end-systolic and end-diastolic frames coincide".into()));
    }

    let start = Instant::now();
    let times = registration_times(&processed, cfg.es_only);
    let results = register_times(&processed, &cfg.register, &times)?;
    timings.register = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let setup = StrainSetup::from_mask(&processed.sax.frame(ed).mask, cfg.strain_measure)?;
    let curves = strain_curves(&results, processed.len(), &setup)?;
    let peaks = curves.iter().map(peak_strain).collect::<Result<Vec<_>>>()?;
    timings.strain = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let fixed = processed.sax.frame(ed);
    let fixed_4ch = processed.ch4.frame(ed);
    let metrics = results
        .iter()
        .map(|r| {
            let t = r.moving_index;
            let moving = processed.sax.frame(t);
            let ch4 = Some((fixed_4ch, processed.ch4.frame(t)));
            Ok(PairMetrics {
                moving_index: t,
                registered: evaluate_pair(r, fixed, moving, ch4)?,
                unregistered: evaluate_unregistered(fixed, moving, ch4)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    timings.evaluate = start.elapsed().as_secs_f64();

    Ok(PipelineOutput {
        translations,
        processed,
        results,
        curves,
        peaks,
        metrics,
        timings,
    })
}

/// Writes every table, chart and trained network of a run into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, out: &PipelineOutput) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(t) = &out.translations {
        t.write_csv(dir.join("translations.csv"))?;
    }
    write_curves_csv(dir.join("strain_curves.csv"), &out.curves)?;
    write_peaks_csv(dir.join("strain_peaks.csv"), &out.peaks)?;
    write_loss_csv(dir.join("loss.csv"), &out.results)?;
    for m in &out.metrics {
        m.registered.write_csv(dir.join(format!("metrics_t{:02}.csv", m.moving_index)))?;
        m.unregistered.write_csv(dir.join(format!("baseline_t{:02}.csv", m.moving_index)))?;
    }
    let nets = dir.join("networks");
    std::fs::create_dir_all(&nets).map_err(|e| Error::io(&nets, e))?;
    for r in &out.results {
        r.save(&nets, &format!("pair_t{:02}", r.moving_index))?;
    }
    write_text(dir.join("strain_radial.svg"), &strain_chart(&out.curves, Component::Radial))?;
    write_text(dir.join("strain_circumferential.svg"), &strain_chart(&out.curves, Component::Circumferential))?;
    write_text(dir.join("loss.svg"), &loss_chart(&out.results))?;
    Ok(())
}
