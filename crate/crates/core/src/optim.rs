//! Adam with bias correction, shared by the network trainer and the slice
//! aligner.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Scalar types Adam can update in place.
pub trait AdamParam: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl AdamParam for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl AdamParam for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// First/second moment accumulators per tensor, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Updates every tensor in place. Nothing is modified if any gradient is
    /// non-finite; the error names the offending tensor.
    pub fn step<P: AdamParam>(
        &mut self,
        names: &[String],
        tensors: &mut [&mut [P]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Optimizer {
                layer: "<all>".into(),
                msg: format!(
                    "expected {} tensors, got {} parameters and {} gradients",
                    self.m.len(),
                    tensors.len(),
                    grads.len()
                ),
            });
        }
        for (idx, (t, g)) in tensors.iter().zip(grads).enumerate() {
            let name = names.get(idx).cloned().unwrap_or_else(|| format!("tensor {idx}"));
            if t.len() != g.len() || t.len() != self.m[idx].len() {
                return Err(Error::Optimizer {
                    layer: name,
                    msg: "shape mismatch".into(),
                });
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Optimizer {
                    layer: name,
                    msg: format!("non-finite gradient {bad}"),
                });
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (idx, (t, g)) in tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..t.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let p = t[i].to_f64() - lr * mhat / (vhat.sqrt() + EPSILON);
                t[i] = P::from_f64(p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(&[3]);
        let mut p = [1.0f32, -2.0, 0.5];
        let before = p;
        s.step(&["w".into()], &mut [&mut p[..]], &[&[0.0; 3]], 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut s = AdamState::new(&[1]);
        let mut w = [0.0f64];
        for _ in 0..500 {
            let g = [2.0 * (w[0] - 3.0)];
            s.step(&["w".into()], &mut [&mut w[..]], &[&g], 0.1).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut s = AdamState::new(&[1, 2]);
        let mut a = [0.0f32];
        let mut b = [0.0f32, 0.0];
        let err = s
            .step(
                &["layer 0 weights".into(), "layer 0 bias".into()],
                &mut [&mut a[..], &mut b[..]],
                &[&[1.0], &[0.0, f64::NAN]],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("layer 0 bias"));
        assert_eq!(s.t, 0);
        assert_eq!(b, [0.0, 0.0]);
    }
}
