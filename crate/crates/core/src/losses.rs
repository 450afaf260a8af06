//! Similarity and overlap measures with analytic gradients: global NCC,
//! Parzen-window NMI and soft Dice.
//!
//! Each function returns the *similarity* value; callers turn it into a loss
//! (`-ncc`, `-nmi`, `1 - dice`).

use crate::error::{Error, Result};

/// A similarity value with its gradients with respect to both sample sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub const DICE_EPS: f64 = 1e-7;
const LOG_FLOOR: f64 = 1e-12;
const ZERO_VAR_FLOOR: f64 = 1e-12;

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!(
            "sample sets differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min_len {
        return Err(Error::Degenerate(format!(
            "need at least {min_len} samples, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// Pearson correlation of `a` and `b` over the whole batch.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<LossValueGrad> {
    check_pair(a, b, 2)?;
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - mean_a, y - mean_b);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa == 0.0 && sbb == 0.0 {
        return Err(Error::Degenerate("both NCC inputs are constant".into()));
    }
    // A single constant input has zero correlation; floor its variance so the
    // gradient stays finite.
    let saa = if saa > 0.0 { saa } else { ZERO_VAR_FLOOR };
    let sbb = if sbb > 0.0 { sbb } else { ZERO_VAR_FLOOR };
    let denom = (saa * sbb).sqrt();
    let r = sab / denom;
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (y - mean_b) / denom - r * (x - mean_a) / saa)
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - mean_a) / denom - r * (y - mean_b) / sbb)
        .collect();
    Ok(LossValueGrad {
        value: r,
        grad_a,
        grad_b,
    })
}

/// Parzen window soft-binning of one rescaled sample.
struct Kernel {
    centers: Vec<f64>,
    inv_two_var: f64,
    inv_var: f64,
}

impl Kernel {
    fn new(bins: usize, sigma_bins: f64) -> Self {
        let width = 1.0 / (bins - 1) as f64;
        let sigma = sigma_bins * width;
        Self {
            centers: (0..bins).map(|j| j as f64 * width).collect(),
            inv_two_var: 1.0 / (2.0 * sigma * sigma),
            inv_var: 1.0 / (sigma * sigma),
        }
    }

    /// Normalized weights `w̃_j(x)` and their derivatives `dw̃_j/dx`.
    fn weights(&self, x: f64, w: &mut [f64], dw: &mut [f64]) {
        let mut sum = 0.0;
        let mut dsum = 0.0;
        for (j, &c) in self.centers.iter().enumerate() {
            let d = x - c;
            let k = (-d * d * self.inv_two_var).exp();
            w[j] = k;
            dw[j] = -d * self.inv_var * k;
            sum += k;
            dsum += dw[j];
        }
        for j in 0..w.len() {
            let wn = w[j] / sum;
            dw[j] = (dw[j] - wn * dsum) / sum;
            w[j] = wn;
        }
    }
}

/// `-p ln p` with the log argument floored, and its derivative.
#[inline]
fn entropy_term(p: f64) -> (f64, f64) {
    if p >= LOG_FLOOR {
        (-p * p.ln(), -(p.ln() + 1.0))
    } else {
        (-p * LOG_FLOOR.ln(), -LOG_FLOOR.ln())
    }
}

/// Normalized mutual information `(H(A) + H(B)) / H(A,B)` from a Gaussian
/// Parzen-window joint histogram. Inputs are rescaled to `[0, 1]` by their
/// joint min/max, which is held constant for the gradient.
pub fn nmi_parzen(a: &[f64], b: &[f64], bins: usize, sigma_bins: f64) -> Result<LossValueGrad> {
    check_pair(a, b, 2)?;
    if bins < 2 {
        return Err(Error::Config(format!("NMI needs at least 2 bins, got {bins}")));
    }
    if !(sigma_bins > 0.0) {
        return Err(Error::Config(format!("Parzen sigma must be positive, got {sigma_bins}")));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    nmi_parzen_in_range(a, b, bins, sigma_bins, (lo, hi))
}

/// [`nmi_parzen`] with a caller-supplied intensity range mapped to `[0, 1]`.
/// Useful when the range must not depend on the samples being optimized.
pub fn nmi_parzen_in_range(
    a: &[f64],
    b: &[f64],
    bins: usize,
    sigma_bins: f64,
    (lo, hi): (f64, f64),
) -> Result<LossValueGrad> {
    check_pair(a, b, 2)?;
    if bins < 2 {
        return Err(Error::Config(format!("NMI needs at least 2 bins, got {bins}")));
    }
    if !(sigma_bins > 0.0) {
        return Err(Error::Config(format!("Parzen sigma must be positive, got {sigma_bins}")));
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate("constant joint distribution in NMI".into()));
    }
    let n = a.len();
    let inv_n = 1.0 / n as f64;
    let kernel = Kernel::new(bins, sigma_bins);

    let mut wa = vec![0.0; n * bins];
    let mut dwa = vec![0.0; n * bins];
    let mut wb = vec![0.0; n * bins];
    let mut dwb = vec![0.0; n * bins];
    for i in 0..n {
        let r = i * bins..(i + 1) * bins;
        kernel.weights((a[i] - lo) / range, &mut wa[r.clone()], &mut dwa[r.clone()]);
        kernel.weights((b[i] - lo) / range, &mut wb[r.clone()], &mut dwb[r]);
    }

    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..n {
        let wai = &wa[i * bins..(i + 1) * bins];
        let wbi = &wb[i * bins..(i + 1) * bins];
        for j in 0..bins {
            pa[j] += wai[j] * inv_n;
            pb[j] += wbi[j] * inv_n;
            let s = wai[j] * inv_n;
            let row = &mut joint[j * bins..(j + 1) * bins];
            for (k, v) in row.iter_mut().enumerate() {
                *v += s * wbi[k];
            }
        }
    }

    let (mut ha, mut hb, mut hab) = (0.0, 0.0, 0.0);
    let mut dha = vec![0.0; bins];
    let mut dhb = vec![0.0; bins];
    let mut dhab = vec![0.0; bins * bins];
    for j in 0..bins {
        let (h, d) = entropy_term(pa[j]);
        ha += h;
        dha[j] = d;
        let (h, d) = entropy_term(pb[j]);
        hb += h;
        dhb[j] = d;
    }
    for (idx, &p) in joint.iter().enumerate() {
        let (h, d) = entropy_term(p);
        hab += h;
        dhab[idx] = d;
    }
    if !(hab > 0.0) {
        return Err(Error::Degenerate("zero joint entropy in NMI".into()));
    }
    let nmi = (ha + hb) / hab;

    // dNMI/dp for each histogram cell.
    let ga: Vec<f64> = dha.iter().map(|d| d / hab).collect();
    let gb: Vec<f64> = dhb.iter().map(|d| d / hab).collect();
    let gab: Vec<f64> = dhab.iter().map(|d| -nmi * d / hab).collect();

    let mut grad_a = vec![0.0; n];
    let mut grad_b = vec![0.0; n];
    let mut tmp_a = vec![0.0; bins];
    let mut tmp_b = vec![0.0; bins];
    for i in 0..n {
        let wai = &wa[i * bins..(i + 1) * bins];
        let wbi = &wb[i * bins..(i + 1) * bins];
        // tmp_a[j] = Σ_k gab[j,k] wb[k]; tmp_b[k] = Σ_j gab[j,k] wa[j]
        tmp_b.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..bins {
            let row = &gab[j * bins..(j + 1) * bins];
            let mut acc = 0.0;
            for k in 0..bins {
                acc += row[k] * wbi[k];
                tmp_b[k] += row[k] * wai[j];
            }
            tmp_a[j] = acc;
        }
        let (mut sa, mut sb) = (0.0, 0.0);
        for j in 0..bins {
            sa += dwa[i * bins + j] * (ga[j] + tmp_a[j]);
            sb += dwb[i * bins + j] * (gb[j] + tmp_b[j]);
        }
        grad_a[i] = sa * inv_n / range;
        grad_b[i] = sb * inv_n / range;
    }
    Ok(LossValueGrad {
        value: nmi,
        grad_a,
        grad_b,
    })
}

/// Soft Dice `2Σpq / (Σp + Σq + ε)`.
pub fn soft_dice(p: &[f64], q: &[f64]) -> Result<LossValueGrad> {
    check_pair(p, q, 1)?;
    let inter: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + q.iter().sum::<f64>() + DICE_EPS;
    let value = 2.0 * inter / denom;
    let grad_a = q.iter().map(|&b| 2.0 * b / denom - value / denom).collect();
    let grad_b = p.iter().map(|&a| 2.0 * a / denom - value / denom).collect();
    Ok(LossValueGrad {
        value,
        grad_a,
        grad_b,
    })
}
