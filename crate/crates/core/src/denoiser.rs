//! Toy noise-prediction network.
//!
//! A two-hidden-layer tanh perceptron. The input layer sees the flattened
//! noisy frame concatenated with a sinusoidal timestep encoding, an optional
//! frame-position encoding, and the two conditioning vectors `h` and `c`:
//!
//! ```text
//! in  = [x_t ; enc(t / T) ; enc(pos) ; h ; c]
//! a1  = tanh(W1 in + b1)
//! a2  = tanh(W2 a1 + b2)
//! out = W3 a2 + b3                      (same length as x_t)
//! ```
//!
//! Parameters live in one flat vector laid out as `W1, b1, W2, b2, W3, b3`
//! with every matrix row-major (`rows = fan_out`). Gradients share that
//! layout, which keeps SGD and checkpointing trivial.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{FrameShape, LatentFrame};

/// Architecture of a [`DenoiserModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub frame: FrameShape,
    pub hidden: usize,
    /// Length of the timestep encoding.
    pub time_dim: usize,
    /// Length of the frame-position encoding (0 disables it).
    pub pos_dim: usize,
    pub h_dim: usize,
    pub c_dim: usize,
    /// Number of diffusion steps `T` the timestep encoding is normalised by.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame.is_empty() {
            return Err(Error::invalid("frame", format!("empty frame shape {}", self.frame)));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.frame.len() + self.time_dim + self.pos_dim + self.h_dim + self.c_dim
    }

    pub fn output_dim(&self) -> usize {
        self.frame.len()
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        (i * h + h) + (h * h + h) + (h * o + o)
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        let w1 = 0;
        let b1 = w1 + i * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * o;
        Layout {
            input: i,
            hidden: h,
            output: o,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    input: usize,
    hidden: usize,
    output: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Text-prompt and condition surrogates fed to the network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conditioning {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl Conditioning {
    pub fn new(h: Vec<f64>, c: Vec<f64>) -> Self {
        Self { h, c }
    }

    pub fn zeros(h_dim: usize, c_dim: usize) -> Self {
        Self {
            h: vec![0.0; h_dim],
            c: vec![0.0; c_dim],
        }
    }
}

/// Position of a frame inside a clip of `len` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePosition {
    pub index: usize,
    pub len: usize,
}

/// Sinusoidal features of a scalar `u`: entry `j` is `sin(pi 2^(j/2) u)` for
/// even `j` and `cos(pi 2^(j/2) u)` for odd `j`.
pub fn sinusoidal_encoding(u: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = PI * f64::powi(2.0, (j / 2) as i32);
            if j % 2 == 0 {
                (freq * u).sin()
            } else {
                (freq * u).cos()
            }
        })
        .collect()
}

/// Encoding of timestep `t` out of `steps`, a function of `t / steps` only.
pub fn timestep_encoding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    sinusoidal_encoding(t as f64 / steps as f64, dim)
}

/// Encoding of a frame position; `None` (a standalone frame) encodes as zeros.
pub fn position_encoding(position: Option<FramePosition>, dim: usize) -> Vec<f64> {
    match position {
        Some(p) => sinusoidal_encoding(p.index as f64 / p.len.max(1) as f64, dim),
        None => vec![0.0; dim],
    }
}

/// Gradient of a loss with respect to every model parameter, in the model's
/// flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|g| *g *= a);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// One term of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub xt: &'a LatentFrame,
    pub t: usize,
    pub cond: &'a Conditioning,
    pub position: Option<FramePosition>,
    pub target: &'a LatentFrame,
    /// Elementwise weights on the squared residual; `None` means all ones.
    /// A binary mask `M` gives `||M (x) (target - pred)||^2`.
    pub weight: Option<&'a LatentFrame>,
}

/// Noise-prediction network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: Vec<f64>,
}

struct Activations {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl DenoiserModel {
    /// Seeded initialisation: weights `~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// drawn from ChaCha8 in layout order, biases zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; config.param_count()];
        for (start, len, fan_in) in [
            (l.w1, l.input * l.hidden, l.input),
            (l.w2, l.hidden * l.hidden, l.hidden),
            (l.w3, l.hidden * l.output, l.hidden),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[start..start + len] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::shape(
                format!("{} parameters", config.param_count()),
                params.len(),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("non-finite model parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, xt: &LatentFrame, t: usize, cond: &Conditioning) -> Result<()> {
        let cfg = &self.config;
        if xt.shape() != cfg.frame {
            return Err(Error::shape(cfg.frame, xt.shape()));
        }
        if t > cfg.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: cfg.steps,
            });
        }
        if cond.h.len() != cfg.h_dim {
            return Err(Error::shape(format!("h of length {}", cfg.h_dim), cond.h.len()));
        }
        if cond.c.len() != cfg.c_dim {
            return Err(Error::shape(format!("c of length {}", cfg.c_dim), cond.c.len()));
        }
        Ok(())
    }

    fn assemble_input(
        &self,
        xt: &LatentFrame,
        t: usize,
        cond: &Conditioning,
        position: Option<FramePosition>,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let mut input = Vec::with_capacity(cfg.input_dim());
        input.extend_from_slice(xt.values());
        input.extend(timestep_encoding(t, cfg.steps, cfg.time_dim));
        input.extend(position_encoding(position, cfg.pos_dim));
        input.extend_from_slice(&cond.h);
        input.extend_from_slice(&cond.c);
        input
    }

    fn forward(&self, input: Vec<f64>) -> Activations {
        let l = self.config.layout();
        let p = &self.params;
        let a1 = affine(&p[l.w1..l.b1], &p[l.b1..l.w2], &input, l.hidden)
            .into_iter()
            .map(f64::tanh)
            .collect::<Vec<_>>();
        let a2 = affine(&p[l.w2..l.b2], &p[l.b2..l.w3], &a1, l.hidden)
            .into_iter()
            .map(f64::tanh)
            .collect::<Vec<_>>();
        let out = affine(&p[l.w3..l.b3], &p[l.b3..], &a2, l.output);
        Activations { input, a1, a2, out }
    }

    /// Predicted noise for a standalone frame.
    pub fn predict_noise(&self, xt: &LatentFrame, t: usize, cond: &Conditioning) -> Result<LatentFrame> {
        self.predict_noise_at(xt, t, cond, None)
    }

    /// Predicted noise for a frame at `position` within a clip.
    pub fn predict_noise_at(
        &self,
        xt: &LatentFrame,
        t: usize,
        cond: &Conditioning,
        position: Option<FramePosition>,
    ) -> Result<LatentFrame> {
        self.check_inputs(xt, t, cond)?;
        let act = self.forward(self.assemble_input(xt, t, cond, position));
        let out = LatentFrame::from_vec(self.config.frame, act.out)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("denoiser produced a non-finite prediction".into()));
        }
        Ok(out)
    }

    /// Mean over the batch of the weighted squared residual
    /// `sum_p w_p (target_p - pred_p)^2`, with its exact gradient.
    pub fn loss_gradients(&self, batch: &[LossTerm<'_>]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let l = self.config.layout();
        let p = &self.params;
        let mut grads = Gradients::zeros(p.len());
        let mut total = 0.0;

        for term in batch {
            self.check_inputs(term.xt, term.t, term.cond)?;
            term.xt.ensure_same_shape(term.target)?;
            if let Some(w) = term.weight {
                term.xt.ensure_same_shape(w)?;
            }
            let act = self.forward(self.assemble_input(term.xt, term.t, term.cond, term.position));

            // d loss / d out
            let mut d_out = vec![0.0; l.output];
            for (k, d) in d_out.iter_mut().enumerate() {
                let w = term.weight.map_or(1.0, |m| m.values()[k]);
                let r = term.target.values()[k] - act.out[k];
                total += w * r * r;
                *d = -2.0 * w * r;
            }

            let g = &mut grads.values;
            // output layer
            outer_acc(&mut g[l.w3..l.b3], &d_out, &act.a2);
            acc(&mut g[l.b3..], &d_out);
            let d_a2 = transpose_mul(&p[l.w3..l.b3], &d_out, l.hidden);
            let d_z2: Vec<f64> = d_a2.iter().zip(&act.a2).map(|(d, a)| d * (1.0 - a * a)).collect();

            outer_acc(&mut g[l.w2..l.b2], &d_z2, &act.a1);
            acc(&mut g[l.b2..l.w3], &d_z2);
            let d_a1 = transpose_mul(&p[l.w2..l.b2], &d_z2, l.hidden);
            let d_z1: Vec<f64> = d_a1.iter().zip(&act.a1).map(|(d, a)| d * (1.0 - a * a)).collect();

            outer_acc(&mut g[l.w1..l.b1], &d_z1, &act.input);
            acc(&mut g[l.b1..l.w2], &d_z1);
        }

        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
        }
        Ok((loss, grads))
    }

    /// Plain gradient descent `theta <- theta - lr * grad`.
    pub fn apply_update(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.values.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} gradient entries", self.params.len()),
                grads.values.len(),
            ));
        }
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", format!("{learning_rate}")));
        }
        if grads.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("non-finite gradient".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.values) {
            *p -= learning_rate * g;
        }
        Ok(())
    }

    /// Encodes the model in the checkpoint layout (see [`CHECKPOINT_MAGIC`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [
            c.frame.height,
            c.frame.width,
            c.frame.channels,
            c.hidden,
            c.time_dim,
            c.pos_dim,
            c.h_dim,
            c.c_dim,
            c.steps,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("checkpoint", origin, reason);
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d: Vec<usize> = (0..9).map(|i| u32_at(12 + 4 * i) as usize).collect();
        let config = DenoiserConfig {
            frame: FrameShape::new(d[0], d[1], d[2]),
            hidden: d[3],
            time_dim: d[4],
            pos_dim: d[5],
            h_dim: d[6],
            c_dim: d[7],
            steps: d[8],
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let count = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
        if count != config.param_count() {
            return Err(bad(format!(
                "header declares {count} parameters, architecture needs {}",
                config.param_count()
            )));
        }
        let payload = &bytes[CHECKPOINT_HEADER_LEN..];
        if payload.len() != 8 * count {
            return Err(bad(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                8 * count
            )));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(config, params).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Checkpoint files start with these 8 bytes.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTDENOIS";
pub const CHECKPOINT_VERSION: u32 = 1;
/// magic(8) + version(4) + nine u32 dimensions(36) + u64 count(8)
pub const CHECKPOINT_HEADER_LEN: usize = 56;

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect()
}

/// `w^T d` for a row-major `w` with `cols` columns.
fn transpose_mul(w: &[f64], d: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, dr) in d.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * dr;
        }
    }
    out
}

fn outer_acc(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, dr) in d.iter().enumerate() {
        for (gi, xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gi += dr * xv;
        }
    }
}

fn acc(g: &mut [f64], d: &[f64]) {
    for (gi, di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}
