//! Per-frame residual MLP for `u(x, r, t | y)`.
//!
//! Each row is one STFT frame (`D = 2·bins` interleaved real/imaginary values).
//! The trunk sees `concat(x, y)`, the per-bin log magnitudes of `y`, and Gaussian
//! Fourier features of `t` and of the span `Δ = t − r`; the embedding is added after
//! the input layer and again inside every residual block. The zero-initialised head has three parts: a direct
//! projection of the trunk, a per-channel gain on `x` driven by the time
//! embedding, and a per-channel mask on `y` driven by the trunk.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DifferentiableField, FieldError, Result};
use crate::rng::{stream, Domain};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub width: usize,
    pub blocks: usize,
    /// Frequencies per time input; each embedding has `2 * fourier_features` values.
    pub fourier_features: usize,
    /// Standard deviation of the frozen embedding frequencies.
    pub fourier_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 4,
            fourier_features: 32,
            fourier_scale: 2.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.fourier_features == 0 {
            return Err(FieldError::Query(
                "width and fourier_features must be positive".into(),
            ));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return Err(FieldError::Query(format!(
                "bad fourier_scale {}",
                self.fourier_scale
            )));
        }
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        4 * self.fourier_features
    }

    /// `(name, shape, init)` for every trainable tensor, in slot order.
    fn layout(&self, dim: usize) -> Vec<(String, Vec<usize>, Init)> {
        let (w, e) = (self.width, self.embed_dim());
        let mut v = vec![
            ("in.w".to_string(), vec![2 * dim, w], Init::Uniform(1.0)),
            ("in.b".to_string(), vec![w], Init::Zero),
            ("embed.w".to_string(), vec![e, w], Init::Uniform(1.0)),
            ("embed.b".to_string(), vec![w], Init::Zero),
            (
                "in_mag.w".to_string(),
                vec![bins(dim), w],
                Init::Uniform(0.3),
            ),
        ];
        let res_gain = 1.0 / (self.blocks.max(1) as f64).sqrt();
        for k in 0..self.blocks {
            v.push((format!("block{k}.w1"), vec![w, w], Init::Uniform(1.0)));
            v.push((format!("block{k}.b1"), vec![w], Init::Zero));
            v.push((format!("block{k}.wt"), vec![e, w], Init::Uniform(1.0)));
            v.push((format!("block{k}.w2"), vec![w, w], Init::Uniform(res_gain)));
            v.push((format!("block{k}.b2"), vec![w], Init::Zero));
        }
        v.extend([
            ("head.w".to_string(), vec![w, dim], Init::Zero),
            ("head.b".to_string(), vec![dim], Init::Zero),
            ("head.gain_w".to_string(), vec![e, dim], Init::Zero),
            ("head.gain_b".to_string(), vec![dim], Init::Zero),
            ("head.mask_w".to_string(), vec![w, dim], Init::Zero),
            ("head.mask_b".to_string(), vec![dim], Init::Zero),
        ]);
        v
    }
}

/// Number of `(re, im)` pairs; an odd trailing value counts as a real-only bin.
fn bins(dim: usize) -> usize {
    dim.div_ceil(2)
}

/// Floor inside the log magnitude, in compressed units.
const MAG_FLOOR: f64 = 1e-3;

/// `ln(|y_k| + floor)` per bin. `y` is constant along the path, so this enters the
/// graph as a constant.
fn log_magnitudes(y: &Tensor) -> Tensor {
    let (rows, dim) = (y.rows(), y.cols());
    let nb = bins(dim);
    let mut out = Vec::with_capacity(rows * nb);
    for r in 0..rows {
        let row = y.row(r);
        for k in 0..nb {
            let re = row[2 * k];
            let im = row.get(2 * k + 1).copied().unwrap_or(0.0);
            out.push((re.hypot(im) + MAG_FLOOR).ln());
        }
    }
    Tensor::new(vec![rows, nb], out).expect("rows × bins")
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    /// `U(±g·√(3/fan_in))`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork {
    config: NetworkConfig,
    dim: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    freq_t: Tensor,
    freq_span: Tensor,
}

impl FieldNetwork {
    pub fn new(config: &NetworkConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(FieldError::Query("field dimension must be positive".into()));
        }
        let mut rng = stream(seed, Domain::Init, 0);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in config.layout(dim) {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Uniform(g) => {
                    let bound = g * (3.0 / shape[0] as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data)?
                }
            };
            names.push(name);
            params.push(t);
        }
        let mut frng = stream(seed, Domain::Init, 1);
        let normal = Normal::new(0.0, config.fourier_scale).expect("validated scale");
        let mut freqs = || {
            let data = (0..config.fourier_features)
                .map(|_| normal.sample(&mut frng))
                .collect();
            Tensor::new(vec![1, config.fourier_features], data).expect("row vector")
        };
        let freq_t = freqs();
        let freq_span = freqs();
        Ok(Self {
            config: config.clone(),
            dim,
            names,
            params,
            freq_t,
            freq_span,
        })
    }

    /// Reassembles a network from stored tensors.
    pub fn from_parts(
        config: &NetworkConfig,
        dim: usize,
        params: Vec<Tensor>,
        freq_t: Tensor,
        freq_span: Tensor,
    ) -> Result<Self> {
        let mut net = Self::new(config, dim, 0)?;
        net.set_params(&params)?;
        let shape = [1, config.fourier_features];
        if freq_t.shape() != shape || freq_span.shape() != shape {
            return Err(FieldError::Checkpoint(format!(
                "embedding frequencies {:?}/{:?}, expected {:?}",
                freq_t.shape(),
                freq_span.shape(),
                shape
            )));
        }
        net.freq_t = freq_t;
        net.freq_span = freq_span;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn freq_t(&self) -> &Tensor {
        &self.freq_t
    }

    pub fn freq_span(&self) -> &Tensor {
        &self.freq_span
    }

    /// Copy with different trainable tensors (e.g. EMA weights); frequencies are shared.
    pub fn with_params(&self, params: &[Tensor]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    fn embed<G: Graph>(
        &self,
        g: &mut G,
        s: &G::Value,
        freq: &Tensor,
    ) -> std::result::Result<[G::Value; 2], TensorError> {
        let f = g.constant(freq.clone());
        let phase = g.affine(s, &f, None)?;
        Ok([g.sin(&phase)?, g.cos(&phase)?])
    }
}

impl DifferentiableField for FieldNetwork {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn build<G: Graph>(
        &self,
        g: &mut G,
        x: &G::Value,
        y: &G::Value,
        r: &G::Value,
        t: &G::Value,
    ) -> std::result::Result<G::Value, TensorError> {
        let p = |g: &mut G, slot: usize| g.parameter(slot, &self.params[slot]);

        let span = g.sub(t, r)?;
        let [ts, tc] = self.embed(g, t, &self.freq_t)?;
        let [ss, sc] = self.embed(g, &span, &self.freq_span)?;
        let e = g.concat(&[&ts, &tc, &ss, &sc])?;

        let inp = g.concat(&[x, y])?;
        let (w, b) = (p(g, 0), p(g, 1));
        let mut h = g.affine(&inp, &w, Some(&b))?;
        let (w, b) = (p(g, 2), p(g, 3));
        let he = g.affine(&e, &w, Some(&b))?;
        h = g.add(&h, &he)?;
        let mag = g.constant(log_magnitudes(g.value(y)));
        let w = p(g, 4);
        let hm = g.affine(&mag, &w, None)?;
        h = g.add(&h, &hm)?;

        let mut slot = 5;
        for _ in 0..self.config.blocks {
            let (w1, b1, wt, w2, b2) = (
                p(g, slot),
                p(g, slot + 1),
                p(g, slot + 2),
                p(g, slot + 3),
                p(g, slot + 4),
            );
            slot += 5;
            let a = g.silu(&h)?;
            let a = g.affine(&a, &w1, Some(&b1))?;
            let te = g.affine(&e, &wt, None)?;
            let a = g.add(&a, &te)?;
            let a = g.silu(&a)?;
            let a = g.affine(&a, &w2, Some(&b2))?;
            h = g.add(&h, &a)?;
        }

        let feat = g.silu(&h)?;
        let (w, b) = (p(g, slot), p(g, slot + 1));
        let direct = g.affine(&feat, &w, Some(&b))?;
        let (w, b) = (p(g, slot + 2), p(g, slot + 3));
        let gain = g.affine(&e, &w, Some(&b))?;
        let gx = g.mul(&gain, x)?;
        let (w, b) = (p(g, slot + 4), p(g, slot + 5));
        let mask = g.affine(&feat, &w, Some(&b))?;
        let my = g.mul(&mask, y)?;
        let out = g.add(&direct, &gx)?;
        g.add(&out, &my)
    }
}
