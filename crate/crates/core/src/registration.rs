//! Pairwise registration with a sine network and the multi-view loss
//!
//! ```text
//! L = (1 − ncc_sax) + (1 − ncc_4ch)
//!   + α_fg J_fg_sax + α_bg J_bg_sax + α_fg J_fg_4ch + α_bg J_bg_4ch
//! J = mean |det(I + ∂u/∂x) − 1|   (millimetre units)
//! ```
//!
//! The fixed image is the end-diastolic frame; the network maps a fixed-frame
//! canonical coordinate to the displacement `u` with `φ(x) = x + u(x)`, and the
//! moving image is sampled at `φ(x)`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ncc;
use crate::siren::{adam_state_for, adam_step, load_params, save_params, Architecture, MlpParams, Network};
use crate::volume::{label, Frame, Geometry, LabelMask, Mat3, NormalizedFrame, Vec3, ViewSet, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacMode {
    /// Separate foreground and background weights.
    Weighted,
    /// One weight for both regions.
    Uniform,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub iterations: usize,
    /// Iterations for warm-started pairs after the first (defaults to `iterations`).
    pub warm_iterations: Option<usize>,
    pub lr: f64,
    pub batch_sax: usize,
    pub batch_4ch: usize,
    pub alpha_fg: f64,
    pub alpha_bg: f64,
    pub uniform_alpha: f64,
    pub use_4ch: bool,
    pub jac_mode: JacMode,
    pub warm_start: bool,
    pub seed: u64,
    pub omega0: f64,
    pub hidden: usize,
    pub depth: usize,
    /// Dilation of the myocardium bounding box used for sampling, voxels.
    pub roi_dilation: usize,
    /// Count the RV contour band as foreground.
    pub fg_rv_band: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            warm_iterations: None,
            lr: 1e-4,
            batch_sax: 10_000,
            batch_4ch: 10_000,
            alpha_fg: 0.05,
            alpha_bg: 1e-4,
            uniform_alpha: 0.05,
            use_4ch: true,
            jac_mode: JacMode::Weighted,
            warm_start: true,
            seed: 0,
            omega0: crate::siren::DEFAULT_OMEGA0,
            hidden: crate::siren::DEFAULT_HIDDEN,
            depth: crate::siren::DEFAULT_DEPTH,
            roi_dilation: 10,
            fg_rv_band: true,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.warm_iterations == Some(0) {
            return Err(Error::Config("registration needs at least one iteration".into()));
        }
        if self.batch_sax == 0 || (self.use_4ch && self.batch_4ch == 0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.alpha_fg >= 0.0 && self.alpha_bg >= 0.0 && self.uniform_alpha >= 0.0) {
            return Err(Error::Config("regularization weights must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.omega0 > 0.0) || self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config("lr, omega0, hidden and depth must be positive".into()));
        }
        Ok(())
    }

    /// Effective `(α_fg, α_bg)` for the configured mode.
    pub fn alphas(&self) -> (f64, f64) {
        match self.jac_mode {
            JacMode::Weighted => (self.alpha_fg, self.alpha_bg),
            JacMode::Uniform => (self.uniform_alpha, self.uniform_alpha),
            JacMode::Off => (0.0, 0.0),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            depth: self.depth,
            omega0: self.omega0,
        }
    }
}

/// Voxel-index box (inclusive, voxel centres) in which coordinates are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

/// One sampled coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordSample {
    pub world: Vec3,
    pub canonical: [f64; 3],
    pub fg: bool,
}

/// Voxels on the in-plane boundary of the RV blood pool.
pub fn rv_contour_band(mask: &LabelMask) -> Vec<bool> {
    let geom = mask.geometry();
    let [nx, ny, _] = geom.dims();
    let labels = mask.labels();
    (0..labels.len())
        .map(|n| {
            if labels[n] != label::RV_POOL {
                return false;
            }
            let [i, j, k] = geom.unravel(n);
            let neighbours = [
                (i as isize - 1, j as isize),
                (i as isize + 1, j as isize),
                (i as isize, j as isize - 1),
                (i as isize, j as isize + 1),
            ];
            neighbours.iter().any(|&(a, b)| {
                a < 0 || b < 0 || a >= nx as isize || b >= ny as isize
                    || mask.get(a as usize, b as usize, k) != label::RV_POOL
            })
        })
        .collect()
}

/// Draws coordinates uniformly in a dilated myocardium bounding box and flags
/// the ones that land in the foreground.
#[derive(Clone, Debug)]
pub struct Sampler {
    geom: Geometry,
    roi: RoiBox,
    fg: Vec<bool>,
    mask: LabelMask,
}

impl Sampler {
    pub fn new(mask: &LabelMask, dilation: usize, rv_band: bool) -> Result<Self> {
        let geom = mask.geometry().clone();
        let dims = geom.dims();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (n, &l) in mask.labels().iter().enumerate() {
            if l == label::MYO {
                any = true;
                let v = geom.unravel(n);
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a]);
                }
            }
        }
        if !any {
            return Err(Error::Config("myocardium mask is empty; cannot place samples".into()));
        }
        for a in 0..3 {
            lo[a] = lo[a].saturating_sub(dilation);
            hi[a] = (hi[a] + dilation).min(dims[a] - 1);
        }
        let mut fg: Vec<bool> = mask.labels().iter().map(|&l| l == label::MYO).collect();
        if rv_band {
            for (f, b) in fg.iter_mut().zip(rv_contour_band(mask)) {
                *f |= b;
            }
        }
        Ok(Self {
            geom,
            roi: RoiBox { lo, hi },
            fg,
            mask: mask.clone(),
        })
    }

    pub fn roi(&self) -> RoiBox {
        self.roi
    }

    pub fn is_fg(&self, world: &Vec3) -> bool {
        let idx = self.geom.world_to_voxel(world);
        self.mask.nearest_index(&idx).is_some_and(|n| self.fg[n])
    }

    pub fn sample(&self, frame: &NormalizedFrame, n: usize, rng: &mut impl Rng) -> Vec<CoordSample> {
        (0..n)
            .map(|_| {
                let mut idx = Vec3::zeros();
                for a in 0..3 {
                    let (lo, hi) = (self.roi.lo[a] as f64, self.roi.hi[a] as f64);
                    idx[a] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                }
                let world = self.geom.voxel_to_world(&idx);
                let q = frame.to_canonical(&world);
                CoordSample {
                    world,
                    canonical: [q.x, q.y, q.z],
                    fg: self.is_fg(&world),
                }
            })
            .collect()
    }
}

/// `n` coordinates uniform over the dilated (10 voxels) myocardium box; the
/// flag marks samples whose nearest voxel is myocardium.
pub fn sample_coords(mask: &LabelMask, frame: &NormalizedFrame, n: usize, rng: &mut impl Rng) -> Result<Vec<CoordSample>> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    Ok(Sampler::new(mask, 10, false)?.sample(frame, n, rng))
}

/// Registration loss terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ncc_sax: f64,
    pub ncc_4ch: f64,
    pub jfg_sax: f64,
    pub jbg_sax: f64,
    pub jfg_4ch: f64,
    pub jbg_4ch: f64,
}

impl LossTerms {
    pub fn total(&self, alpha_fg: f64, alpha_bg: f64) -> f64 {
        self.ncc_sax
            + self.ncc_4ch
            + alpha_fg * self.jfg_sax
            + alpha_bg * self.jbg_sax
            + alpha_fg * self.jfg_4ch
            + alpha_bg * self.jbg_4ch
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("ncc_sax", self.ncc_sax),
            ("ncc_4ch", self.ncc_4ch),
            ("jfg_sax", self.jfg_sax),
            ("jbg_sax", self.jbg_sax),
            ("jfg_4ch", self.jfg_4ch),
            ("jbg_4ch", self.jbg_4ch),
        ]
    }
}

/// Fixed and moving frames of one registration pair.
#[derive(Clone, Copy, Debug)]
pub struct PairImages<'a> {
    pub fixed_sax: &'a Frame,
    pub moving_sax: &'a Frame,
    pub fixed_4ch: Option<&'a Frame>,
    pub moving_4ch: Option<&'a Frame>,
}

impl<'a> PairImages<'a> {
    pub fn from_views(views: &'a ViewSet, fixed: usize, moving: usize) -> Self {
        Self {
            fixed_sax: views.sax.frame(fixed),
            moving_sax: views.sax.frame(moving),
            fixed_4ch: Some(views.ch4.frame(fixed)),
            moving_4ch: Some(views.ch4.frame(moving)),
        }
    }

    pub fn sax_only(fixed: &'a Frame, moving: &'a Frame) -> Self {
        Self {
            fixed_sax: fixed,
            moving_sax: moving,
            fixed_4ch: None,
            moving_4ch: None,
        }
    }
}

/// Loss value, its terms and the parameter gradient.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: f64,
    pub terms: LossTerms,
    pub grads: crate::siren::ParamGrads,
}

/// Everything about a pair that stays fixed during training.
pub struct RegProblem<'a> {
    pub pair: PairImages<'a>,
    pub frame: NormalizedFrame,
    sax_sampler: Sampler,
    ch4_sampler: Option<Sampler>,
}

impl<'a> RegProblem<'a> {
    pub fn new(pair: PairImages<'a>, cfg: &RegConfig) -> Result<Self> {
        let fg = pair.fixed_sax.image.geometry();
        if !pair.moving_sax.image.geometry().same_grid(fg) {
            return Err(Error::Geometry("fixed and moving SAX frames must share a grid".into()));
        }
        let frame = NormalizedFrame::from_geometry(fg);
        let sax_sampler = Sampler::new(&pair.fixed_sax.mask, cfg.roi_dilation, cfg.fg_rv_band)?;
        let ch4_sampler = match (cfg.use_4ch, pair.fixed_4ch, pair.moving_4ch) {
            (false, _, _) => None,
            (true, Some(f), Some(_)) => Some(Sampler::new(&f.mask, cfg.roi_dilation, cfg.fg_rv_band)?),
            (true, _, _) => {
                return Err(Error::Config("use_4ch is set but the pair has no 4CH frames".into()));
            }
        };
        Ok(Self {
            pair,
            frame,
            sax_sampler,
            ch4_sampler,
        })
    }

    pub fn sax_roi(&self) -> RoiBox {
        self.sax_sampler.roi()
    }

    /// Fresh SAX and 4CH batches for one iteration.
    pub fn draw(&self, cfg: &RegConfig, rng: &mut impl Rng) -> (Vec<CoordSample>, Vec<CoordSample>) {
        let sax = self.sax_sampler.sample(&self.frame, cfg.batch_sax, rng);
        let ch4 = match &self.ch4_sampler {
            Some(s) => s.sample(&self.frame, cfg.batch_4ch, rng),
            None => Vec::new(),
        };
        (sax, ch4)
    }

    /// Evaluates the loss and its gradient with respect to the parameters.
    pub fn loss(&self, params: &MlpParams, sax: &[CoordSample], ch4: &[CoordSample], cfg: &RegConfig) -> Result<LossEval> {
        if sax.is_empty() {
            return Err(Error::Config("empty SAX batch".into()));
        }
        let net = params.compile();
        let (alpha_fg, alpha_bg) = cfg.alphas();
        let coords: Vec<[f64; 3]> = sax.iter().chain(ch4).map(|s| s.canonical).collect();
        let tape = net.forward_tape(&coords, true);
        let u = tape.outputs();
        let jac = tape.jacobians();
        let mut gu = vec![[0.0; 3]; coords.len()];
        let mut gj = vec![Mat3::zeros(); coords.len()];
        let h = self.frame.half_extent;
        let mut terms = LossTerms::default();

        let mut views: Vec<(&[CoordSample], usize, &Frame, &Frame, &str)> =
            vec![(sax, 0, self.pair.fixed_sax, self.pair.moving_sax, "sax")];
        if let (Some(_), Some(f), Some(m)) = (&self.ch4_sampler, self.pair.fixed_4ch, self.pair.moving_4ch) {
            if !ch4.is_empty() {
                views.push((ch4, sax.len(), f, m, "4ch"));
            }
        }
        for (batch, offset, fixed, moving, name) in views {
            // Similarity term over samples whose warped point is in the moving image.
            let mut a = Vec::with_capacity(batch.len());
            let mut b = Vec::with_capacity(batch.len());
            let mut used = Vec::with_capacity(batch.len());
            for (i, s) in batch.iter().enumerate() {
                let d = self.frame.displacement_to_mm(&Vec3::from(u[offset + i]));
                let sample = moving.image.sample_with_grad(&(s.world + d));
                if !sample.inside {
                    continue;
                }
                let (fv, _) = fixed.image.sample_trilinear(&s.world);
                a.push(fv);
                b.push(sample.value);
                used.push((offset + i, sample.grad));
            }
            if used.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "all {name} samples map outside the moving image"
                )));
            }
            let c = ncc(&a, &b)?;
            for (n, &(row, g)) in used.iter().enumerate() {
                let dl = -c.grad_b[n];
                for r in 0..3 {
                    gu[row][r] += dl * g[r] * h[r];
                }
            }

            // Jacobian-determinant terms over foreground and background samples.
            let n_fg = batch.iter().filter(|s| s.fg).count();
            let n_bg = batch.len() - n_fg;
            let (mut j_fg, mut j_bg) = (0.0, 0.0);
            for (i, s) in batch.iter().enumerate() {
                let row = offset + i;
                let f = Mat3::identity() + self.frame.jacobian_to_mm(&jac[row]);
                let dev = f.determinant() - 1.0;
                let (weight, count) = if s.fg { (alpha_fg, n_fg) } else { (alpha_bg, n_bg) };
                if s.fg {
                    j_fg += dev.abs();
                } else {
                    j_bg += dev.abs();
                }
                if weight == 0.0 || dev == 0.0 {
                    continue;
                }
                let scale = weight * dev.signum() / count as f64;
                let cof = cofactor(&f);
                for r in 0..3 {
                    for col in 0..3 {
                        gj[row][(r, col)] += scale * cof[(r, col)] * h[r] / h[col];
                    }
                }
            }
            let j_fg = if n_fg > 0 { j_fg / n_fg as f64 } else { 0.0 };
            let j_bg = if n_bg > 0 { j_bg / n_bg as f64 } else { 0.0 };
            if name == "sax" {
                terms.ncc_sax = 1.0 - c.value;
                terms.jfg_sax = j_fg;
                terms.jbg_sax = j_bg;
            } else {
                terms.ncc_4ch = 1.0 - c.value;
                terms.jfg_4ch = j_fg;
                terms.jbg_4ch = j_bg;
            }
        }
        let grads = net.backward(&tape, &gu, Some(&gj));
        Ok(LossEval {
            total: terms.total(alpha_fg, alpha_bg),
            terms,
            grads,
        })
    }
}

/// Cofactor matrix: `∂ det(F) / ∂F`.
fn cofactor(f: &Mat3) -> Mat3 {
    Mat3::from_fn(|r, c| {
        let rows: Vec<usize> = (0..3).filter(|&x| x != r).collect();
        let cols: Vec<usize> = (0..3).filter(|&x| x != c).collect();
        let minor = f[(rows[0], cols[0])] * f[(rows[1], cols[1])] - f[(rows[0], cols[1])] * f[(rows[1], cols[0])];
        if (r + c) % 2 == 0 {
            minor
        } else {
            -minor
        }
    })
}

/// Loss of one pair on explicit batches (see [`RegProblem::loss`]).
pub fn registration_loss(
    params: &MlpParams,
    pair: PairImages<'_>,
    sax_batch: &[CoordSample],
    ch4_batch: &[CoordSample],
    cfg: &RegConfig,
) -> Result<LossEval> {
    RegProblem::new(pair, cfg)?.loss(params, sax_batch, ch4_batch, cfg)
}

/// Per-iteration values of the loss and each term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub total: Vec<f64>,
    pub terms: Vec<LossTerms>,
}

#[derive(Clone, Debug)]
pub struct RegResult {
    pub params: MlpParams,
    pub trace: LossTrace,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: RegConfig,
    pub frame: NormalizedFrame,
    pub roi: RoiBox,
    /// Time index of the moving frame.
    pub moving_index: usize,
    pub fixed_index: usize,
}

/// JSON companion of a saved parameter file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegSidecar {
    pub config: RegConfig,
    pub seed: u64,
    pub frame: NormalizedFrame,
    pub roi: RoiBox,
    pub fixed_index: usize,
    pub moving_index: usize,
    pub wall_time_s: f64,
    pub trace: LossTrace,
}

impl RegResult {
    pub fn final_loss(&self) -> f64 {
        self.trace.total.last().copied().unwrap_or(f64::NAN)
    }

    pub fn sidecar(&self) -> RegSidecar {
        RegSidecar {
            config: self.config.clone(),
            seed: self.seed,
            frame: self.frame,
            roi: self.roi,
            fixed_index: self.fixed_index,
            moving_index: self.moving_index,
            wall_time_s: self.wall_time_s,
            trace: self.trace.clone(),
        }
    }

    /// Reads a pair written by [`RegResult::save`].
    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let params = load_params(dir.join(format!("{stem}.params")))?;
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: RegSidecar = serde_json::from_str(&text)?;
        Ok(Self {
            params,
            trace: side.trace,
            wall_time_s: side.wall_time_s,
            seed: side.seed,
            config: side.config,
            frame: side.frame,
            roi: side.roi,
            moving_index: side.moving_index,
            fixed_index: side.fixed_index,
        })
    }

    /// Writes `<stem>.params` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_params(&self.params, dir.join(format!("{stem}.params")))?;
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Seeded stream for the batches of one iteration.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Trains one network on one pair.
pub fn register_pair(pair: PairImages<'_>, cfg: &RegConfig, init: Option<&MlpParams>) -> Result<RegResult> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = RegProblem::new(pair, cfg)?;
    let arch = cfg.architecture();
    let mut params = match init {
        Some(p) => {
            if p.sizes() != arch.sizes() {
                return Err(Error::Config(format!(
                    "initial parameters have layer sizes {:?}, config expects {:?}",
                    p.sizes(),
                    arch.sizes()
                )));
            }
            p.clone()
        }
        None => MlpParams::init(&arch, cfg.seed),
    };
    let (alpha_fg, alpha_bg) = cfg.alphas();
    let mut adam = adam_state_for(&params);
    let mut trace = LossTrace::default();
    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let (sax, ch4) = problem.draw(cfg, &mut rng);
        let eval = problem.loss(&params, &sax, &ch4, cfg).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Numerical {
                iteration: it,
                term: "sampling".into(),
                msg,
            },
            other => other,
        })?;
        if let Some((name, v)) = eval.terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                term: name.into(),
                msg: format!("value {v}"),
            });
        }
        debug_assert_eq!(eval.total, eval.terms.total(alpha_fg, alpha_bg));
        trace.total.push(eval.total);
        trace.terms.push(eval.terms);
        adam_step(&mut params, &eval.grads, &mut adam, cfg.lr).map_err(|e| Error::Numerical {
            iteration: it,
            term: "gradient".into(),
            msg: e.to_string(),
        })?;
        if it % 100 == 0 {
            log::debug!("iteration {it}: loss {:.6} {:?}", eval.total, eval.terms);
        }
    }
    Ok(RegResult {
        params,
        trace,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config: cfg.clone(),
        frame: problem.frame,
        roi: problem.sax_roi(),
        moving_index: usize::MAX,
        fixed_index: usize::MAX,
    })
}

/// Registers the moving frames `times` (in order) to the end-diastolic frame.
///
/// With `warm_start`, each pair after the first starts from the previous
/// pair's trained weights; otherwise pair `t` starts from a fresh network
/// seeded with `seed + t`. Each pair samples with seed `seed + t`.
pub fn register_times(views: &ViewSet, cfg: &RegConfig, times: &[usize]) -> Result<Vec<RegResult>> {
    cfg.validate()?;
    let fixed = views.sax.ed_index();
    let mut out: Vec<RegResult> = Vec::with_capacity(times.len());
    for &t in times {
        if t >= views.len() {
            return Err(Error::Config(format!("time index {t} out of range")));
        }
        let warm = cfg.warm_start && !out.is_empty();
        let mut pair_cfg = cfg.clone();
        pair_cfg.seed = cfg.seed.wrapping_add(t as u64);
        if warm {
            pair_cfg.iterations = cfg.warm_iterations.unwrap_or(cfg.iterations);
        }
        let mut pair = PairImages::from_views(views, fixed, t);
        if !cfg.use_4ch {
            pair.fixed_4ch = None;
            pair.moving_4ch = None;
        }
        let init = if warm { out.last().map(|r| &r.params) } else { None };
        let mut r = register_pair(pair, &pair_cfg, init)?;
        r.fixed_index = fixed;
        r.moving_index = t;
        log::info!(
            "pair ({t} -> {fixed}): loss {:.5} -> {:.5} in {:.1}s",
            r.trace.total[0],
            r.final_loss(),
            r.wall_time_s
        );
        out.push(r);
    }
    Ok(out)
}

/// Every non-ED frame, in time order.
pub fn register_sequence(views: &ViewSet, cfg: &RegConfig) -> Result<Vec<RegResult>> {
    let ed = views.sax.ed_index();
    let times: Vec<usize> = (0..views.len()).filter(|&t| t != ed).collect();
    register_times(views, cfg, &times)
}

/// Displacements in mm at world points.
pub fn displacements_mm(params: &MlpParams, frame: &NormalizedFrame, points: &[Vec3]) -> Vec<Vec3> {
    let net = params.compile();
    let q: Vec<[f64; 3]> = points.iter().map(|p| frame.to_canonical(p).into()).collect();
    net.forward(&q)
        .into_iter()
        .map(|u| frame.displacement_to_mm(&Vec3::from(u)))
        .collect()
}

/// `F = I + ∂u_mm/∂x_mm` at world points.
pub fn deformation_gradients(params: &MlpParams, frame: &NormalizedFrame, points: &[Vec3]) -> Vec<Mat3> {
    let net: Network = params.compile();
    let q: Vec<[f64; 3]> = points.iter().map(|p| frame.to_canonical(p).into()).collect();
    let (_, jac) = net.forward_jacobian(&q);
    jac.iter().map(|j| Mat3::identity() + frame.jacobian_to_mm(j)).collect()
}

/// `det(I + ∂u_mm/∂x_mm)` at world points.
pub fn jac_det_grid(params: &MlpParams, frame: &NormalizedFrame, points: &[Vec3]) -> Vec<f64> {
    deformation_gradients(params, frame, points)
        .iter()
        .map(|f| f.determinant())
        .collect()
}

/// Warped positions `φ(x)` for every voxel centre of `target`.
fn warped_points(params: &MlpParams, frame: &NormalizedFrame, target: &Geometry) -> Vec<Vec3> {
    let points: Vec<Vec3> = (0..target.len())
        .map(|n| {
            let [i, j, k] = target.unravel(n);
            target.center_of(i, j, k)
        })
        .collect();
    let d = displacements_mm(params, frame, &points);
    points.iter().zip(d).map(|(p, d)| p + d).collect()
}

/// Moving image pulled back onto `target`: value at `x` is `moving(φ(x))`.
pub fn warp_volume_onto(moving: &Volume3D, params: &MlpParams, frame: &NormalizedFrame, target: &Geometry) -> Result<Volume3D> {
    let data = warped_points(params, frame, target)
        .iter()
        .map(|y| moving.sample_trilinear(y).0 as f32)
        .collect();
    Volume3D::new(target.clone(), data)
}

pub fn warp_volume(moving: &Volume3D, params: &MlpParams, frame: &NormalizedFrame) -> Result<Volume3D> {
    warp_volume_onto(moving, params, frame, moving.geometry())
}

/// Nearest-neighbour counterpart of [`warp_volume_onto`].
pub fn warp_mask_onto(moving: &LabelMask, params: &MlpParams, frame: &NormalizedFrame, target: &Geometry) -> Result<LabelMask> {
    let labels = warped_points(params, frame, target)
        .iter()
        .map(|y| moving.sample_nearest(y))
        .collect();
    LabelMask::new(target.clone(), labels)
}

pub fn warp_mask(moving: &LabelMask, params: &MlpParams, frame: &NormalizedFrame) -> Result<LabelMask> {
    warp_mask_onto(moving, params, frame, moving.geometry())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::Activation;
    use crate::volume::Geometry;

    fn blob_frame(shift: f64) -> Frame {
        let g = Geometry::axis_aligned([20, 20, 6], [2.0, 2.0, 4.0], [-19.0, -19.0, -10.0]).unwrap();
        let f = |p: Vec3| {
            let r = ((p.x - shift).powi(2) + p.y.powi(2)).sqrt();
            ((-(r - 8.0).powi(2) / 20.0).exp() + 0.2 * (0.3 * p.y).sin() + 0.1 * (0.2 * p.z).cos()) as f32
        };
        let img = Volume3D::from_fn(g.clone(), f).unwrap();
        let mask = LabelMask::from_fn(g, |p| {
            let r = ((p.x - shift).powi(2) + p.y.powi(2)).sqrt();
            if r < 6.0 {
                label::LV_POOL
            } else if r < 10.0 {
                label::MYO
            } else {
                0
            }
        })
        .unwrap();
        Frame::new(img, mask).unwrap()
    }

    fn tiny_cfg() -> RegConfig {
        RegConfig {
            hidden: 16,
            depth: 2,
            batch_sax: 64,
            batch_4ch: 0,
            use_4ch: false,
            iterations: 5,
            fg_rv_band: false,
            ..Default::default()
        }
    }

    fn frame_of(f: &Frame) -> NormalizedFrame {
        NormalizedFrame::from_geometry(f.image.geometry())
    }

    #[test]
    fn identity_network_on_identical_images_has_zero_loss() {
        let f = blob_frame(0.0);
        let cfg = tiny_cfg();
        let mut p = MlpParams::init(&cfg.architecture(), 1);
        p.zero_output();
        let problem = RegProblem::new(PairImages::sax_only(&f, &f), &cfg).unwrap();
        let (sax, _) = problem.draw(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let l = problem.loss(&p, &sax, &[], &cfg).unwrap();
        assert!(l.terms.ncc_sax.abs() < 1e-12, "{:?}", l.terms);
        assert_eq!(l.terms.jfg_sax, 0.0);
        assert_eq!(l.terms.jbg_sax, 0.0);
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn equal_alphas_collapse_to_uniform_mode() {
        let fixed = blob_frame(0.0);
        let moving = blob_frame(1.5);
        let weighted = RegConfig {
            alpha_fg: 0.05,
            alpha_bg: 0.05,
            ..tiny_cfg()
        };
        let uniform = RegConfig {
            jac_mode: JacMode::Uniform,
            uniform_alpha: 0.05,
            ..tiny_cfg()
        };
        let p = MlpParams::init(&weighted.architecture(), 2);
        let pair = PairImages::sax_only(&fixed, &moving);
        let problem = RegProblem::new(pair, &weighted).unwrap();
        let (sax, _) = problem.draw(&weighted, &mut ChaCha8Rng::seed_from_u64(1));
        let a = problem.loss(&p, &sax, &[], &weighted).unwrap();
        let b = problem.loss(&p, &sax, &[], &uniform).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let fixed = blob_frame(0.0);
        let moving = blob_frame(1.5);
        let cfg = RegConfig {
            batch_sax: 16,
            alpha_fg: 0.5,
            alpha_bg: 0.2,
            ..tiny_cfg()
        };
        // A network with visible displacement so the Jacobian terms matter.
        let mut p = MlpParams::init(&cfg.architecture(), 5);
        let last = p.layers.len() - 1;
        p.layers[last].weights.iter_mut().for_each(|w| *w *= 300.0);
        let problem = RegProblem::new(PairImages::sax_only(&fixed, &moving), &cfg).unwrap();
        let (sax, _) = problem.draw(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let l = problem.loss(&p, &sax, &[], &cfg).unwrap();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (layer, idx) in [(0, 3), (0, 20), (1, 7), (1, 100), (2, 5), (2, 30), (1, 200), (0, 40)] {
            let h = 1e-3f32;
            let eval = |delta: f32| {
                let mut q = p.clone();
                q.layers[layer].weights[idx] += delta;
                let actual = q.layers[layer].weights[idx] - p.layers[layer].weights[idx];
                (problem.loss(&q, &sax, &[], &cfg).unwrap().total, actual as f64)
            };
            let (lp, dp) = eval(h);
            let (lm, dm) = eval(-h);
            let fd = (lp - lm) / (dp - dm);
            let an = l.grads.weights[layer][idx];
            if fd.abs().max(an.abs()) < 1e-7 {
                continue;
            }
            checked += 1;
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        }
        assert!(checked >= 4);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn sampler_flags_and_determinism() {
        let g = Geometry::axis_aligned([6, 6, 3], [1.0; 3], [0.0; 3]).unwrap();
        let all = LabelMask::new(g.clone(), vec![label::MYO; g.len()]).unwrap();
        let frame = NormalizedFrame::from_geometry(&g);
        let s = sample_coords(&all, &frame, 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.iter().all(|c| c.fg));
        let f = blob_frame(0.0);
        let frame = frame_of(&f);
        let a = sample_coords(&f.mask, &frame, 300, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_coords(&f.mask, &frame, 300, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let empty = LabelMask::new(g.clone(), vec![0; g.len()]).unwrap();
        assert!(sample_coords(&empty, &frame, 5, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn foreground_fraction_matches_box_fraction() {
        let f = blob_frame(0.0);
        let frame = frame_of(&f);
        let sampler = Sampler::new(&f.mask, 10, false).unwrap();
        // Oracle: dense sub-voxel lattice over the same continuous box.
        let roi = sampler.roi();
        let g = f.mask.geometry();
        let steps = 12;
        let (mut hits, mut total) = (0usize, 0usize);
        for a in 0..=steps * (roi.hi[0] - roi.lo[0]) {
            for b in 0..=steps * (roi.hi[1] - roi.lo[1]) {
                for c in 0..=steps * (roi.hi[2] - roi.lo[2]) {
                    let idx = Vec3::new(
                        roi.lo[0] as f64 + a as f64 / steps as f64,
                        roi.lo[1] as f64 + b as f64 / steps as f64,
                        roi.lo[2] as f64 + c as f64 / steps as f64,
                    );
                    total += 1;
                    hits += usize::from(f.mask.sample_nearest(&g.voxel_to_world(&idx)) == label::MYO);
                }
            }
        }
        let p = hits as f64 / total as f64;
        let n = 20_000;
        let s = sampler.sample(&frame, n, &mut ChaCha8Rng::seed_from_u64(4));
        let observed = s.iter().filter(|c| c.fg).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((observed - n as f64 * p).abs() < 3.0 * sd, "{observed} vs {}", n as f64 * p);
    }

    #[test]
    fn identity_and_scaling_determinants() {
        let g = Geometry::axis_aligned([10, 12, 8], [1.5, 2.0, 3.0], [-5.0, 4.0, 0.0]).unwrap();
        let frame = NormalizedFrame::from_geometry(&g);
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.3 - 2.0, 8.0 + 0.2 * i as f64, 4.0)).collect();
        let mut zero = MlpParams::init(&tiny_cfg().architecture(), 1);
        zero.zero_output();
        assert!(jac_det_grid(&zero, &frame, &pts).iter().all(|&d| d == 1.0));
        let s = 1.1;
        let p = MlpParams::affine(&Mat3::from_diagonal_element(s - 1.0), &Vec3::zeros());
        for d in jac_det_grid(&p, &frame, &pts) {
            assert!((d - s * s * s).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn determinant_matches_finite_differences() {
        let g = Geometry::axis_aligned([10, 12, 8], [1.5, 2.0, 3.0], [-5.0, 4.0, 0.0]).unwrap();
        let frame = NormalizedFrame::from_geometry(&g);
        let mut p = MlpParams::init(&tiny_cfg().architecture(), 3);
        let last = p.layers.len() - 1;
        p.layers[last].weights.iter_mut().for_each(|w| *w *= 200.0);
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 - 3.0, 10.0 + 0.7 * i as f64, 3.0 + 0.5 * i as f64)).collect();
        let dets = jac_det_grid(&p, &frame, &pts);
        let h = 1e-4;
        for (x, d) in pts.iter().zip(dets) {
            let mut f = Mat3::zeros();
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = h;
                let phi = |y: Vec3| y + displacements_mm(&p, &frame, &[y])[0];
                f.set_column(c, &((phi(x + e) - phi(x - e)) / (2.0 * h)));
            }
            assert!((f.determinant() - d).abs() / d.abs() < 1e-3);
        }
    }

    #[test]
    fn identity_warp_resamples_moving() {
        let f = blob_frame(1.0);
        let frame = frame_of(&f);
        let zero = MlpParams::zeros(&[3, 4, 3], 30.0, Activation::Sine);
        assert_eq!(warp_volume(&f.image, &zero, &frame).unwrap(), f.image);
        assert_eq!(warp_mask(&f.mask, &zero, &frame).unwrap(), f.mask);
        let p = MlpParams::affine(&Mat3::from_diagonal_element(0.05), &Vec3::new(0.02, 0.0, 0.0));
        let w = warp_mask(&f.mask, &p, &frame).unwrap();
        assert!(w.labels().iter().all(|l| [0, 1, 2].contains(l)));
    }

    #[test]
    fn warm_start_off_reproduces_cold_runs() {
        let cfg = crate::phantom::PhantomConfig {
            dims: [32, 32, 4],
            spacing: [4.0, 4.0, 24.0],
            phases: 4,
            ..Default::default()
        };
        let (views, _) = crate::phantom::make_phantom(&cfg).unwrap();
        let rc = RegConfig {
            warm_start: false,
            iterations: 3,
            batch_4ch: 32,
            use_4ch: true,
            ..tiny_cfg()
        };
        let seq = register_times(&views, &rc, &[0, 1]).unwrap();
        let mut single = rc.clone();
        single.seed = rc.seed + 1;
        let alone = register_pair(PairImages::from_views(&views, 3, 1), &single, None).unwrap();
        assert_eq!(seq[1].params, alone.params);
        assert_eq!(seq[1].trace, alone.trace);
        for r in &seq {
            for (t, terms) in r.trace.total.iter().zip(&r.trace.terms) {
                assert!((t - terms.total(0.05, 1e-4)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let f = blob_frame(0.0);
        let r = register_pair(PairImages::sax_only(&f, &f), &tiny_cfg(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "pair").unwrap();
        let back = RegResult::load(dir.path(), "pair").unwrap();
        assert_eq!(back.params, r.params);
        assert_eq!(back.trace, r.trace);
        let text = std::fs::read_to_string(dir.path().join("pair.json")).unwrap();
        let side: RegSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(side.trace.total.len(), 5);
    }
}
