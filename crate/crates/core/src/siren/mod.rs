//! Sine-activated coordinate network mapping canonical coordinates to a
//! displacement. Parameters are stored as `f32`; all evaluation runs in `f64`.

mod io;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optim::AdamState;
use crate::volume::{Mat3, Vec3};

pub use io::{decode_params, encode_params, load_params, save_params, PARAMS_VERSION};
pub use net::{Network, Tape, CHUNK};

pub const DEFAULT_OMEGA0: f64 = 30.0;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_DEPTH: usize = 3;
/// Extra scale applied to the output layer at initialization so the initial
/// transformation is close to the identity.
pub const OUTPUT_INIT_SCALE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    /// Plain affine layers; only used to impose analytic maps in tests.
    Identity,
}

/// One dense layer, weights stored row-major as `[n_out][n_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }
}

/// Weights and biases of the network, plus its activation settings.
///
/// Hidden layers compute `sin(ω₀ (W h + b))`; the final layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub omega0: f64,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Architecture of the network: 3 inputs, `depth` hidden layers of `hidden`
/// units, 3 outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub depth: usize,
    pub omega0: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            depth: DEFAULT_DEPTH,
            omega0: DEFAULT_OMEGA0,
        }
    }
}

impl Architecture {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![3];
        s.extend(std::iter::repeat(self.hidden).take(self.depth));
        s.push(3);
        s
    }
}

impl MlpParams {
    /// Initialization for sine networks: first layer `U(-1/fan_in, 1/fan_in)`,
    /// later layers `U(-√(6/fan_in)/ω₀, √(6/fan_in)/ω₀)`, output layer
    /// additionally scaled by [`OUTPUT_INIT_SCALE`], zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let sizes = arch.sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let limit = if l == 0 {
                    1.0 / n_in as f64
                } else {
                    let base = (6.0 / n_in as f64).sqrt() / arch.omega0;
                    if l == n_layers - 1 {
                        base * OUTPUT_INIT_SCALE
                    } else {
                        base
                    }
                };
                let weights = (0..n_in * n_out)
                    .map(|_| rng.random_range(-limit..limit) as f32)
                    .collect();
                Layer {
                    n_in,
                    n_out,
                    weights,
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        Self {
            omega0: arch.omega0,
            activation: Activation::Sine,
            layers,
        }
    }

    /// All-zero parameters for the given layer sizes.
    pub fn zeros(sizes: &[usize], omega0: f64, activation: Activation) -> Self {
        Self {
            omega0,
            activation,
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// A network computing exactly `u(q) = M q + c` in canonical units.
    pub fn affine(m: &Mat3, c: &Vec3) -> Self {
        let mut p = Self::zeros(&[3, 3, 3], 1.0, Activation::Identity);
        for r in 0..3 {
            p.layers[0].weights[r * 3 + r] = 1.0;
            for col in 0..3 {
                p.layers[1].weights[r * 3 + col] = m[(r, col)] as f32;
            }
            p.layers[1].bias[r] = c[r] as f32;
        }
        p
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Zeroes the output layer: the transformation becomes the identity.
    pub fn zero_output(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega0.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn compile(&self) -> Network {
        Network::new(self)
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: p.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter()).flat_map(|v| v.iter())
    }
}

/// Fresh network with the default architecture and the given `ω₀`.
pub fn init_siren(seed: u64, omega0: f64) -> MlpParams {
    MlpParams::init(
        &Architecture {
            omega0,
            ..Architecture::default()
        },
        seed,
    )
}

/// Displacement at one canonical coordinate.
pub fn forward(params: &MlpParams, x: &Vec3) -> Vec3 {
    let out = params.compile().forward(&[[x.x, x.y, x.z]]);
    Vec3::from(out[0])
}

/// Displacements for a batch of canonical coordinates.
pub fn forward_batch(params: &MlpParams, xs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    params.compile().forward(xs)
}

/// Exact `∂u/∂x` (canonical units) at one coordinate, by forward-mode
/// differentiation through the sine layers.
pub fn spatial_jacobian(params: &MlpParams, x: &Vec3) -> Mat3 {
    let (_, j) = params.compile().forward_jacobian(&[[x.x, x.y, x.z]]);
    j[0]
}

/// Gradient of `Σ_batch ⟨upstream_i, forward(x_i)⟩` with respect to every
/// weight and bias.
pub fn backward_params(params: &MlpParams, batch: &[[f64; 3]], upstream: &[[f64; 3]]) -> ParamGrads {
    let net = params.compile();
    let tape = net.forward_tape(batch, false);
    net.backward(&tape, upstream, None)
}

/// One Adam update of the network parameters.
pub fn adam_step(params: &mut MlpParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    let names: Vec<String> = (0..params.layers.len())
        .flat_map(|l| [format!("layer {l} weights"), format!("layer {l} bias")])
        .collect();
    let mut tensors: Vec<&mut [f32]> = Vec::new();
    let mut g: Vec<&[f64]> = Vec::new();
    for (l, layer) in params.layers.iter_mut().enumerate() {
        tensors.push(&mut layer.weights);
        g.push(&grads.weights[l]);
        tensors.push(&mut layer.bias);
        g.push(&grads.bias[l]);
    }
    state.step(&names, &mut tensors, &g, lr)
}

/// Adam state shaped like `params`.
pub fn adam_state_for(params: &MlpParams) -> AdamState {
    let shapes: Vec<usize> = params
        .layers
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    AdamState::new(&shapes)
}

#[cfg(test)]
mod tests;
