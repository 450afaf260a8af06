//! Batched `f64` evaluation of a [`MlpParams`] network.
//!
//! Samples are processed in fixed-size chunks. Within a chunk, the value rows
//! and the three forward-mode tangent rows (`∂/∂x₀`, `∂/∂x₁`, `∂/∂x₂`) are
//! stacked into one matrix so every layer is a single GEMM:
//!
//! ```text
//! rows [0, B)    values
//! rows [B, 2B)   tangent along x₀
//! rows [2B, 3B)  tangent along x₁
//! rows [3B, 4B)  tangent along x₂
//! ```
//!
//! Parameter gradients are accumulated per chunk and summed in chunk order,
//! so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Activation, MlpParams, ParamGrads};
use crate::volume::Mat3;

/// Samples per chunk.
pub const CHUNK: usize = 256;

struct DenseF64 {
    n_in: usize,
    n_out: usize,
    /// `[n_out][n_in]`
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Compiled `f64` copy of a parameter set.
pub struct Network {
    layers: Vec<DenseF64>,
    omega0: f64,
    activation: Activation,
}

struct LayerTape {
    /// Layer input, `rows × n_in`.
    input: Vec<f64>,
    /// `cos(z)` for the value rows (sine layers only).
    cos: Vec<f64>,
    /// `sin(z)` for the value rows (sine layers only).
    sin: Vec<f64>,
    /// Tangent pre-activations `ż`, `3B × n_out` (sine layers with tangents only).
    zdot: Vec<f64>,
}

struct ChunkTape {
    n: usize,
    tangents: bool,
    layers: Vec<LayerTape>,
    /// Final stacked output, `rows × 3`.
    output: Vec<f64>,
}

/// Forward intermediates kept for [`Network::backward`].
pub struct Tape {
    chunks: Vec<ChunkTape>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for c in &self.chunks {
            for i in 0..c.n {
                out.push([c.output[3 * i], c.output[3 * i + 1], c.output[3 * i + 2]]);
            }
        }
        out
    }

    /// `J[r][c] = ∂u_r/∂x_c` per sample; empty if the tape has no tangents.
    pub fn jacobians(&self) -> Vec<Mat3> {
        let mut out = Vec::with_capacity(self.len());
        for c in &self.chunks {
            if !c.tangents {
                continue;
            }
            for i in 0..c.n {
                out.push(Mat3::from_fn(|r, col| c.output[3 * ((col + 1) * c.n + i) + r]));
            }
        }
        out
    }
}

/// `C = A · Bᵀ` with `A: m×k`, `B: n×k` (row-major), `C: m×n`.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = A · B` with `A: m×k`, `B: k×n`, `C: m×n`.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C += Aᵀ · B` with `A: m×k`, `B: m×n`, `C: k×n`.
fn gemm_atb_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if m == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Network {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseF64 {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    w: l.weights.iter().map(|&v| v as f64).collect(),
                    b: l.bias.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
            omega0: params.omega0,
            activation: params.activation,
        }
    }

    /// Displacements only.
    pub fn forward(&self, xs: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let outs: Vec<Vec<f64>> = xs
            .par_chunks(CHUNK)
            .map(|chunk| self.forward_chunk(chunk, false, false).output)
            .collect();
        outs.iter()
            .flat_map(|o| o.chunks_exact(3).map(|v| [v[0], v[1], v[2]]))
            .collect()
    }

    /// Displacements and canonical Jacobians `∂u/∂x`.
    pub fn forward_jacobian(&self, xs: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<Mat3>) {
        let tape = Tape {
            chunks: xs
                .par_chunks(CHUNK)
                .map(|chunk| self.forward_chunk(chunk, true, false))
                .collect(),
        };
        (tape.outputs(), tape.jacobians())
    }

    /// Forward pass that keeps the intermediates needed by [`Self::backward`].
    pub fn forward_tape(&self, xs: &[[f64; 3]], tangents: bool) -> Tape {
        Tape {
            chunks: xs
                .par_chunks(CHUNK)
                .map(|chunk| self.forward_chunk(chunk, tangents, true))
                .collect(),
        }
    }

    fn forward_chunk(&self, xs: &[[f64; 3]], tangents: bool, keep: bool) -> ChunkTape {
        let n = xs.len();
        let rows = if tangents { 4 * n } else { n };
        let mut act = vec![0.0; rows * 3];
        for (i, x) in xs.iter().enumerate() {
            act[3 * i..3 * i + 3].copy_from_slice(x);
            if tangents {
                for k in 0..3 {
                    act[3 * ((k + 1) * n + i) + k] = 1.0;
                }
            }
        }
        let last = self.layers.len() - 1;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; rows * layer.n_out];
            gemm_abt(rows, layer.n_in, layer.n_out, &act, &layer.w, &mut z);
            let mut tape = LayerTape {
                input: Vec::new(),
                cos: Vec::new(),
                sin: Vec::new(),
                zdot: Vec::new(),
            };
            let no = layer.n_out;
            if l == last {
                for i in 0..n {
                    for (o, b) in layer.b.iter().enumerate() {
                        z[i * no + o] += b;
                    }
                }
            } else {
                let w0 = self.omega0;
                match self.activation {
                    Activation::Sine => {
                        let mut cos = vec![0.0; n * no];
                        let mut sin = vec![0.0; n * no];
                        for i in 0..n {
                            for o in 0..no {
                                let zi = w0 * (z[i * no + o] + layer.b[o]);
                                let (s, c) = zi.sin_cos();
                                sin[i * no + o] = s;
                                cos[i * no + o] = c;
                                z[i * no + o] = s;
                            }
                        }
                        if tangents {
                            let (_, tang) = z.split_at_mut(n * no);
                            if keep {
                                tape.zdot = tang.iter().map(|v| w0 * v).collect();
                            }
                            for k in 0..3 {
                                let block = &mut tang[k * n * no..(k + 1) * n * no];
                                for (v, c) in block.iter_mut().zip(&cos) {
                                    *v *= w0 * c;
                                }
                            }
                        }
                        if keep {
                            tape.cos = cos;
                            tape.sin = sin;
                        }
                    }
                    Activation::Identity => {
                        for i in 0..n {
                            for o in 0..no {
                                z[i * no + o] = w0 * (z[i * no + o] + layer.b[o]);
                            }
                        }
                        z[n * no..].iter_mut().for_each(|v| *v *= w0);
                    }
                }
            }
            if keep {
                tape.input = std::mem::replace(&mut act, z);
            } else {
                act = z;
            }
            tapes.push(tape);
        }
        ChunkTape {
            n,
            tangents,
            layers: tapes,
            output: act,
        }
    }

    /// Reverse-mode parameter gradients of `Σ ⟨gu_i, u_i⟩ + Σ ⟨gj_i, J_i⟩`.
    ///
    /// `gj` requires a tape recorded with tangents.
    pub fn backward(&self, tape: &Tape, gu: &[[f64; 3]], gj: Option<&[Mat3]>) -> ParamGrads {
        assert_eq!(gu.len(), tape.len(), "upstream length must match the batch");
        if let Some(gj) = gj {
            assert_eq!(gj.len(), tape.len(), "Jacobian upstream length must match the batch");
        }
        let mut offsets = Vec::with_capacity(tape.chunks.len());
        let mut off = 0;
        for c in &tape.chunks {
            offsets.push(off);
            off += c.n;
        }
        let partials: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = tape
            .chunks
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(chunk, &o)| self.backward_chunk(chunk, &gu[o..o + chunk.n], gj.map(|g| &g[o..o + chunk.n])))
            .collect();
        let mut grads = ParamGrads {
            weights: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        };
        for (w, b) in partials {
            grads.add_assign(&ParamGrads { weights: w, bias: b });
        }
        grads
    }

    fn backward_chunk(&self, chunk: &ChunkTape, gu: &[[f64; 3]], gj: Option<&[Mat3]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = chunk.n;
        let rows = if chunk.tangents { 4 * n } else { n };
        let mut g = vec![0.0; rows * 3];
        for i in 0..n {
            g[3 * i..3 * i + 3].copy_from_slice(&gu[i]);
        }
        if let Some(gj) = gj {
            assert!(chunk.tangents, "Jacobian upstream needs a tape with tangents");
            for i in 0..n {
                for k in 0..3 {
                    for r in 0..3 {
                        g[3 * ((k + 1) * n + i) + r] = gj[i][(r, k)];
                    }
                }
            }
        }
        let nl = self.layers.len();
        let mut gw: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
        for l in (0..nl).rev() {
            let layer = &self.layers[l];
            let lt = &chunk.layers[l];
            let no = layer.n_out;
            let hidden = l < nl - 1;
            if hidden && self.activation == Activation::Sine {
                // a = sin z, ȧ = cos(z) ż:
                //   ∂L/∂z = cos(z) ∂L/∂a − sin(z) Σₖ żₖ ∂L/∂ȧₖ,   ∂L/∂żₖ = cos(z) ∂L/∂ȧₖ
                let (gv, gt) = g.split_at_mut(n * no);
                for idx in 0..n * no {
                    gv[idx] *= lt.cos[idx];
                }
                if chunk.tangents {
                    for k in 0..3 {
                        let gtk = &mut gt[k * n * no..(k + 1) * n * no];
                        let zdk = &lt.zdot[k * n * no..(k + 1) * n * no];
                        for idx in 0..n * no {
                            gv[idx] -= lt.sin[idx] * zdk[idx] * gtk[idx];
                            gtk[idx] *= lt.cos[idx];
                        }
                    }
                }
            }
            // z = s (W a + b) with s = ω₀ on hidden layers, 1 on the output layer.
            if hidden {
                let s = self.omega0;
                g.iter_mut().for_each(|v| *v *= s);
            }
            for i in 0..n {
                for o in 0..no {
                    gb[l][o] += g[i * no + o];
                }
            }
            gemm_atb_acc(rows, no, layer.n_in, &g, &lt.input, &mut gw[l]);
            if l > 0 {
                let mut ga = vec![0.0; rows * layer.n_in];
                gemm_ab(rows, no, layer.n_in, &g, &layer.w, &mut ga);
                g = ga;
            }
        }
        (gw, gb)
    }
}
