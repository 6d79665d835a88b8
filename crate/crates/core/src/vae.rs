//! β-VAE over level parameters. The encoder is a stack of same-padded grid
//! convolutions over per-cell one-hots (tiles, start, goal) followed by two
//! dense layers and Gaussian heads; the decoder is an MLP with one categorical
//! head per cell for the layout and one categorical head over cells each for
//! the start and the goal.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{solvable, LevelParams, Tile};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{assign, read_archive, write_archive};
use crate::nn::{Adam, AdamConfig, Conv2d, ConvGeom, Graph, Linear, ParamStore, Scalar, Tensor, Var};
use crate::rng::{derive_seed, sample_categorical};

/// Category order of the layout head (and of the first four input channels).
pub const DECODER_TILES: [Tile; 4] = [Tile::Empty, Tile::Moss, Tile::Lava, Tile::Wall];
pub const LAYOUT_CLASSES: usize = 4;
/// Four tile channels, one start channel, one goal channel.
pub const INPUT_CHANNELS: usize = 6;
const START_CHANNEL: usize = 4;
const GOAL_CHANNEL: usize = 5;
const FILE_MAGIC: &[u8; 4] = b"IVAE";

fn tile_class(t: Tile) -> usize {
    DECODER_TILES.iter().position(|&d| d == t).expect("every tile has a class")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Convex combination of `(μ, σ)`.
    #[default]
    Linear,
    /// Spherical path for `μ`, linear for `σ`.
    Slerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VaeScale {
    Full,
    #[default]
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub height: usize,
    pub width: usize,
    pub beta: f64,
    pub layout_coeff: f64,
    pub start_goal_coeff: f64,
    pub latent: usize,
    pub lr: f64,
    pub conv_layers: usize,
    pub conv_dim: usize,
    pub dense: usize,
    pub bottleneck: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub interpolation: Interpolation,
    /// Level pairs per generative phase.
    pub pairs: usize,
    /// Interpolation points per pair.
    pub interpolation_steps: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig::full()
    }
}

impl VaeConfig {
    pub fn full() -> Self {
        VaeConfig {
            height: 15,
            width: 15,
            beta: 0.0448,
            layout_coeff: 0.04,
            start_goal_coeff: 0.013,
            latent: 1024,
            lr: 4e-4,
            conv_layers: 4,
            conv_dim: 12,
            dense: 2048,
            bottleneck: 256,
            decoder_layers: 3,
            decoder_dim: 256,
            epochs: 200,
            batch_size: 32,
            log_sigma_min: -6.0,
            log_sigma_max: 2.0,
            interpolation: Interpolation::Linear,
            pairs: 4,
            interpolation_steps: 2,
        }
    }

    /// Shrunk dimensions for 9x9 levels on a single core. With only 64
    /// training levels an epoch is two optimiser steps, so more epochs are
    /// needed to reach the same number of updates.
    pub fn desk() -> Self {
        VaeConfig {
            height: 9,
            width: 9,
            latent: 64,
            dense: 256,
            bottleneck: 64,
            epochs: 1500,
            ..VaeConfig::full()
        }
    }

    pub fn for_scale(scale: VaeScale) -> Self {
        match scale {
            VaeScale::Full => VaeConfig::full(),
            VaeScale::Desk => VaeConfig::desk(),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("height", self.height),
            ("width", self.width),
            ("latent", self.latent),
            ("conv_dim", self.conv_dim),
            ("dense", self.dense),
            ("bottleneck", self.bottleneck),
            ("decoder_dim", self.decoder_dim),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("vae {name} must be at least 1")));
            }
        }
        if self.cells() < 2 {
            return Err(Error::Config("vae levels need at least two cells".into()));
        }
        if self.beta < 0.0 || self.layout_coeff < 0.0 || self.start_goal_coeff < 0.0 {
            return Err(Error::Config("vae loss coefficients must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("vae lr must be positive".into()));
        }
        if !(self.log_sigma_min < self.log_sigma_max) {
            return Err(Error::Config("vae log_sigma_min must be below log_sigma_max".into()));
        }
        Ok(())
    }
}

/// Parameters of `q(z | x) = N(μ, diag σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Vec<f32>,
    pub log_sigma: Vec<f32>,
}

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(&m, &l)| {
                let e: f32 = rng.sample(StandardNormal);
                m + l.exp() * e
            })
            .collect()
    }

    /// `KL(q || N(0, I))`.
    pub fn kl(&self) -> f64 {
        kl_standard_normal(&self.mu, &self.log_sigma)
    }
}

/// Closed form `½ Σ (μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_standard_normal(mu: &[f32], log_sigma: &[f32]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(&m, &l)| {
            let (m, l) = (m as f64, l as f64);
            0.5 * (m * m + (2.0 * l).exp() - 1.0 - 2.0 * l)
        })
        .sum()
}

/// Point at weight `w` on the path from `a` (w = 0) to `b` (w = 1).
pub fn interpolate(a: &LatentGaussian, b: &LatentGaussian, w: f64, mode: Interpolation) -> LatentGaussian {
    let sa = a.sigma();
    let sb = b.sigma();
    let log_sigma = sa
        .iter()
        .zip(&sb)
        .map(|(&x, &y)| (((1.0 - w) * x as f64 + w * y as f64) as f32).ln())
        .collect();
    let linear = |a: &[f32], b: &[f32]| -> Vec<f32> {
        a.iter().zip(b).map(|(&x, &y)| ((1.0 - w) * x as f64 + w * y as f64) as f32).collect()
    };
    let mu = match mode {
        Interpolation::Linear => linear(&a.mu, &b.mu),
        Interpolation::Slerp => {
            let na = a.mu.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.mu.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = a.mu.iter().zip(&b.mu).map(|(&x, &y)| x as f64 * y as f64).sum();
            let cos = if na > 0.0 && nb > 0.0 { (dot / (na * nb)).clamp(-1.0, 1.0) } else { 1.0 };
            let omega = cos.acos();
            if omega.sin().abs() < 1e-6 {
                linear(&a.mu, &b.mu)
            } else {
                let ca = ((1.0 - w) * omega).sin() / omega.sin();
                let cb = (w * omega).sin() / omega.sin();
                a.mu.iter().zip(&b.mu).map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32).collect()
            }
        }
    };
    LatentGaussian { mu, log_sigma }
}

/// Normalised decoder outputs for one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDistributions {
    pub height: usize,
    pub width: usize,
    /// Per cell, probabilities over [`DECODER_TILES`].
    pub layout: Vec<[f64; LAYOUT_CLASSES]>,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl HeadDistributions {
    pub fn from_logits(height: usize, width: usize, layout: &[f32], start: &[f32], goal: &[f32]) -> Result<Self> {
        let cells = height * width;
        if layout.len() != cells * LAYOUT_CLASSES || start.len() != cells || goal.len() != cells {
            return Err(Error::Shape {
                op: "HeadDistributions::from_logits",
                lhs: vec![layout.len(), start.len(), goal.len()],
                rhs: vec![cells * LAYOUT_CLASSES, cells, cells],
            });
        }
        let layout = layout
            .chunks(LAYOUT_CLASSES)
            .map(|c| {
                let p = softmax(c);
                [p[0], p[1], p[2], p[3]]
            })
            .collect();
        Ok(HeadDistributions {
            height,
            width,
            layout,
            start: softmax(start),
            goal: softmax(goal),
        })
    }

    /// Most likely tile per cell.
    pub fn argmax_layout(&self) -> Vec<Tile> {
        self.layout
            .iter()
            .map(|p| {
                let k = (0..LAYOUT_CLASSES).fold(0, |best, k| if p[k] > p[best] { k } else { best });
                DECODER_TILES[k]
            })
            .collect()
    }
}

/// Draws from `probs` restricted to `allowed`; falls back to uniform over
/// `allowed` when the restricted mass underflows.
fn sample_masked<R: Rng + ?Sized>(probs: &[f64], allowed: &[bool], rng: &mut R) -> Option<usize> {
    let cand: Vec<usize> = (0..probs.len()).filter(|&i| allowed[i]).collect();
    if cand.is_empty() {
        return None;
    }
    let weights: Vec<f64> = cand.iter().map(|&i| probs[i].max(0.0)).collect();
    let mass: f64 = weights.iter().sum();
    let pick = if mass > 0.0 && mass.is_finite() {
        let norm: Vec<f64> = weights.iter().map(|w| w / mass).collect();
        sample_categorical(&norm, rng)
    } else {
        rng.gen_range(0..cand.len())
    };
    Some(cand[pick])
}

/// Samples a layout cell by cell, then a start among navigable cells, then a
/// goal among navigable cells other than the start. The result always
/// satisfies the level invariants but may be unsolvable.
pub fn sample_level(heads: &HeadDistributions, seed: u64) -> Result<LevelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<Tile> = heads
        .layout
        .iter()
        .map(|p| DECODER_TILES[sample_categorical(p, &mut rng)])
        .collect();
    place_markers(heads, grid, &mut rng)
}

fn place_markers<R: Rng + ?Sized>(heads: &HeadDistributions, grid: Vec<Tile>, rng: &mut R) -> Result<LevelParams> {
    let w = heads.width;
    let mut allowed: Vec<bool> = grid.iter().map(|t| t.navigable()).collect();
    let start = sample_masked(&heads.start, &allowed, rng)
        .ok_or_else(|| Error::Generation("decoded layout has no navigable cell".into()))?;
    allowed[start] = false;
    let goal = sample_masked(&heads.goal, &allowed, rng)
        .ok_or_else(|| Error::Generation("decoded layout has a single navigable cell".into()))?;
    let level = LevelParams {
        height: heads.height,
        width: w,
        grid,
        start: (start / w, start % w),
        goal: (goal / w, goal % w),
    };
    level.validate()?;
    Ok(level)
}

/// Encoder input: channel-major `[6, h, w]` one-hots.
pub fn encode_input(level: &LevelParams) -> Vec<f32> {
    let cells = level.height * level.width;
    let mut x = vec![0.0; INPUT_CHANNELS * cells];
    for (i, &t) in level.grid.iter().enumerate() {
        x[tile_class(t) * cells + i] = 1.0;
    }
    x[START_CHANNEL * cells + level.idx(level.start)] = 1.0;
    x[GOAL_CHANNEL * cells + level.idx(level.goal)] = 1.0;
    x
}

/// Layout reconstruction target: the tile one-hot, except that start and goal
/// cells are uniform over {empty, moss}.
pub fn layout_target(level: &LevelParams) -> Vec<f32> {
    let mut t = vec![0.0; level.grid.len() * LAYOUT_CLASSES];
    for (i, &tile) in level.grid.iter().enumerate() {
        t[i * LAYOUT_CLASSES + tile_class(tile)] = 1.0;
    }
    for cell in [level.start, level.goal] {
        let i = level.idx(cell);
        let row = &mut t[i * LAYOUT_CLASSES..(i + 1) * LAYOUT_CLASSES];
        row.fill(0.0);
        row[tile_class(Tile::Empty)] = 0.5;
        row[tile_class(Tile::Moss)] = 0.5;
    }
    t
}

/// Batch-mean components of the negative ELBO.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    /// Layout cross-entropy, summed over cells.
    pub layout: f64,
    pub start: f64,
    pub goal: f64,
    pub kl: f64,
    /// `layout_coeff·layout + start_goal_coeff·(start + goal) + β·kl`.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Vae<T: Scalar = f32> {
    pub cfg: VaeConfig,
    pub params: ParamStore<T>,
    convs: Vec<Conv2d>,
    dense: Linear,
    bottleneck: Linear,
    mu: Linear,
    log_sigma: Linear,
    decoder: Vec<Linear>,
    layout_head: Linear,
    start_head: Linear,
    goal_head: Linear,
}

struct EncoderOut {
    mu: Var,
    log_sigma: Var,
}

struct DecoderOut {
    layout: Var,
    start: Var,
    goal: Var,
}

impl<T: Scalar> Vae<T> {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7ae]));
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        let mut channels = INPUT_CHANNELS;
        for i in 0..cfg.conv_layers {
            let geom = ConvGeom {
                channels,
                height: cfg.height,
                width: cfg.width,
                out_channels: cfg.conv_dim,
                kernel: 3,
            };
            convs.push(Conv2d::new(&mut params, &format!("enc.conv{i}"), geom, &mut rng));
            channels = cfg.conv_dim;
        }
        let flat = channels * cfg.cells();
        let dense = Linear::new(&mut params, "enc.dense", flat, cfg.dense, &mut rng);
        let bottleneck = Linear::new(&mut params, "enc.bottleneck", cfg.dense, cfg.bottleneck, &mut rng);
        let mu = Linear::new(&mut params, "enc.mu", cfg.bottleneck, cfg.latent, &mut rng);
        let log_sigma = Linear::new(&mut params, "enc.log_sigma", cfg.bottleneck, cfg.latent, &mut rng);
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        let mut width = cfg.latent;
        for i in 0..cfg.decoder_layers {
            decoder.push(Linear::new(&mut params, &format!("dec.{i}"), width, cfg.decoder_dim, &mut rng));
            width = cfg.decoder_dim;
        }
        let layout_head = Linear::new(&mut params, "dec.layout", width, cfg.cells() * LAYOUT_CLASSES, &mut rng);
        let start_head = Linear::new(&mut params, "dec.start", width, cfg.cells(), &mut rng);
        let goal_head = Linear::new(&mut params, "dec.goal", width, cfg.cells(), &mut rng);
        Ok(Vae {
            cfg,
            params,
            convs,
            dense,
            bottleneck,
            mu,
            log_sigma,
            decoder,
            layout_head,
            start_head,
            goal_head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        Vae {
            cfg: self.cfg,
            params: self.params.cast(),
            convs: self.convs.clone(),
            dense: self.dense,
            bottleneck: self.bottleneck,
            mu: self.mu,
            log_sigma: self.log_sigma,
            decoder: self.decoder.clone(),
            layout_head: self.layout_head,
            start_head: self.start_head,
            goal_head: self.goal_head,
        }
    }

    fn check_level(&self, level: &LevelParams) -> Result<()> {
        if level.height != self.cfg.height || level.width != self.cfg.width {
            return Err(Error::Shape {
                op: "vae encode",
                lhs: vec![level.height, level.width],
                rhs: vec![self.cfg.height, self.cfg.width],
            });
        }
        Ok(())
    }

    fn input(&self, g: &mut Graph<'_, T>, levels: &[&LevelParams]) -> Result<Var> {
        let mut data = Vec::with_capacity(levels.len() * INPUT_CHANNELS * self.cfg.cells());
        for level in levels {
            self.check_level(level)?;
            data.extend(encode_input(level));
        }
        Ok(g.constant(Tensor::from_f32(&[levels.len(), INPUT_CHANNELS * self.cfg.cells()], &data)))
    }

    fn encoder(&self, g: &mut Graph<'_, T>, x: Var) -> Result<EncoderOut> {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, h)?;
            h = g.relu(y);
        }
        let y = self.dense.forward(g, h)?;
        let h = g.relu(y);
        let y = self.bottleneck.forward(g, h)?;
        let h = g.relu(y);
        let mu = self.mu.forward(g, h)?;
        let ls = self.log_sigma.forward(g, h)?;
        let log_sigma = g.clamp(ls, self.cfg.log_sigma_min, self.cfg.log_sigma_max);
        Ok(EncoderOut { mu, log_sigma })
    }

    fn decoder(&self, g: &mut Graph<'_, T>, z: Var) -> Result<DecoderOut> {
        let mut h = z;
        for layer in &self.decoder {
            let y = layer.forward(g, h)?;
            h = g.relu(y);
        }
        Ok(DecoderOut {
            layout: self.layout_head.forward(g, h)?,
            start: self.start_head.forward(g, h)?,
            goal: self.goal_head.forward(g, h)?,
        })
    }

    /// Negative ELBO averaged over `levels` with one reparameterised sample
    /// per level, `z = μ + σ ⊙ eps` (`eps`: `[n, latent]`).
    pub fn elbo_loss(&self, g: &mut Graph<'_, T>, levels: &[&LevelParams], eps: &[f32]) -> Result<(Var, ElboParts)> {
        let n = levels.len();
        let cells = self.cfg.cells();
        if n == 0 {
            return Err(Error::Contract("elbo over an empty batch".into()));
        }
        if eps.len() != n * self.cfg.latent {
            return Err(Error::Shape {
                op: "elbo eps",
                lhs: vec![eps.len()],
                rhs: vec![n, self.cfg.latent],
            });
        }
        let x = self.input(g, levels)?;
        let enc = self.encoder(g, x)?;
        let sigma = g.exp(enc.log_sigma);
        let e = g.constant(Tensor::from_f32(&[n, self.cfg.latent], eps));
        let noise = g.mul(sigma, e)?;
        let z = g.add(enc.mu, noise)?;
        let dec = self.decoder(g, z)?;

        let targets: Vec<f32> = levels.iter().flat_map(|l| layout_target(l)).collect();
        let logits = g.reshape(dec.layout, &[n * cells, LAYOUT_CLASSES])?;
        let lp = g.log_softmax(logits);
        let t = g.constant(Tensor::from_f32(&[n * cells, LAYOUT_CLASSES], &targets));
        let weighted = g.mul(lp, t)?;
        let s = g.sum(weighted);
        let layout = g.scale(s, -1.0 / n as f64);

        let marker_ce = |g: &mut Graph<'_, T>, logits: Var, idx: Vec<usize>| -> Result<Var> {
            let lp = g.log_softmax(logits);
            let picked = g.gather(lp, &idx)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / n as f64))
        };
        let start = marker_ce(g, dec.start, levels.iter().map(|l| l.idx(l.start)).collect())?;
        let goal = marker_ce(g, dec.goal, levels.iter().map(|l| l.idx(l.goal)).collect())?;

        let mu2 = g.mul(enc.mu, enc.mu)?;
        let sig2 = g.mul(sigma, sigma)?;
        let two_ls = g.scale(enc.log_sigma, 2.0);
        let a = g.add(mu2, sig2)?;
        let b = g.sub(a, two_ls)?;
        let c = g.add_scalar(b, -1.0);
        let s = g.sum(c);
        let kl = g.scale(s, 0.5 / n as f64);

        let lt = g.scale(layout, self.cfg.layout_coeff);
        let sg = g.add(start, goal)?;
        let sgt = g.scale(sg, self.cfg.start_goal_coeff);
        let klt = g.scale(kl, self.cfg.beta);
        let rec = g.add(lt, sgt)?;
        let total = g.add(rec, klt)?;

        let item = |g: &Graph<'_, T>, v: Var| g.value(v).item().as_f64();
        let parts = ElboParts {
            layout: item(g, layout),
            start: item(g, start),
            goal: item(g, goal),
            kl: item(g, kl),
            total: item(g, total),
        };
        Ok((total, parts))
    }
}

impl Vae<f32> {
    pub fn encode(&self, level: &LevelParams) -> Result<LatentGaussian> {
        Ok(self.encode_batch(&[level])?.remove(0))
    }

    pub fn encode_batch(&self, levels: &[&LevelParams]) -> Result<Vec<LatentGaussian>> {
        if levels.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let x = self.input(&mut g, levels)?;
        let enc = self.encoder(&mut g, x)?;
        let d = self.cfg.latent;
        let mu = &g.value(enc.mu).data;
        let ls = &g.value(enc.log_sigma).data;
        Ok((0..levels.len())
            .map(|i| LatentGaussian {
                mu: mu[i * d..(i + 1) * d].to_vec(),
                log_sigma: ls[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }

    pub fn decode(&self, z: &[f32]) -> Result<HeadDistributions> {
        Ok(self.decode_batch(&[z.to_vec()])?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[Vec<f32>]) -> Result<Vec<HeadDistributions>> {
        let d = self.cfg.latent;
        if let Some(bad) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::Shape {
                op: "vae decode",
                lhs: vec![bad.len()],
                rhs: vec![d],
            });
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let flat: Vec<f32> = zs.iter().flatten().copied().collect();
        let mut g = Graph::new(&self.params);
        let z = g.constant(Tensor::from_f32(&[zs.len(), d], &flat));
        let dec = self.decoder(&mut g, z)?;
        let cells = self.cfg.cells();
        let (l, s, gl) = (g.value(dec.layout), g.value(dec.start), g.value(dec.goal));
        (0..zs.len())
            .map(|i| {
                HeadDistributions::from_logits(
                    self.cfg.height,
                    self.cfg.width,
                    &l.data[i * cells * LAYOUT_CLASSES..(i + 1) * cells * LAYOUT_CLASSES],
                    &s.data[i * cells..(i + 1) * cells],
                    &gl.data[i * cells..(i + 1) * cells],
                )
            })
            .collect()
    }

    /// Share of cells whose most likely decoded tile (from `z = μ`) matches
    /// the level, counting start and goal cells as correct when navigable.
    pub fn reconstruction_accuracy(&self, levels: &[&LevelParams]) -> Result<f64> {
        let lats = self.encode_batch(levels)?;
        let heads = self.decode_batch(&lats.into_iter().map(|l| l.mu).collect::<Vec<_>>())?;
        let mut hit = 0usize;
        let mut total = 0usize;
        for (level, h) in levels.iter().zip(&heads) {
            for (i, (&want, got)) in level.grid.iter().zip(h.argmax_layout()).enumerate() {
                let marker = i == level.idx(level.start) || i == level.idx(level.goal);
                hit += usize::from(if marker { got.navigable() } else { got == want });
                total += 1;
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// `M` uniformly drawn ordered pairs of distinct levels (when possible),
    /// each contributing the `K` points at weights `k / (K + 1)`.
    pub fn interpolate_pairs(&self, levels: &[&LevelParams], pairs: usize, steps: usize, seed: u64) -> Result<Vec<LatentGaussian>> {
        if levels.is_empty() {
            return Err(Error::Contract("interpolation needs at least one level".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(pairs * 2);
        for _ in 0..pairs {
            let a = rng.gen_range(0..levels.len());
            let b = if levels.len() > 1 {
                let j = rng.gen_range(0..levels.len() - 1);
                if j >= a {
                    j + 1
                } else {
                    j
                }
            } else {
                a
            };
            chosen.push(levels[a]);
            chosen.push(levels[b]);
        }
        let lats = self.encode_batch(&chosen)?;
        let mut out = Vec::with_capacity(pairs * steps);
        for pair in lats.chunks(2) {
            for k in 1..=steps {
                let w = k as f64 / (steps + 1) as f64;
                out.push(interpolate(&pair[0], &pair[1], w, self.cfg.interpolation));
            }
        }
        Ok(out)
    }

    /// Samples `z ~ q`, decodes and samples a level for each latent.
    pub fn generate(&self, latents: &[LatentGaussian], seed: u64) -> Result<Vec<Result<LevelParams>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let zs: Vec<Vec<f32>> = latents.iter().map(|l| l.sample(&mut rng)).collect();
        let heads = self.decode_batch(&zs)?;
        Ok(heads
            .iter()
            .enumerate()
            .map(|(i, h)| sample_level(h, derive_seed(seed, &[2, i as u64])))
            .collect())
    }

    /// File layout: magic `IVAE`, u32 length and JSON of the config, then the
    /// parameter archive.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.cfg)?;
        w.write_all(FILE_MAGIC)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        write_archive(w, &self.params)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(Error::Checkpoint("not a vae file".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut cfg)?;
        let cfg: VaeConfig = serde_json::from_slice(&cfg)?;
        let mut vae = Vae::new(cfg, 0)?;
        assign(&mut vae.params, read_archive(r)?)?;
        Ok(vae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Vae::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainReport {
    pub config: VaeConfig,
    pub num_levels: usize,
    /// Mean total loss per epoch.
    pub loss_curve: Vec<f64>,
    pub final_parts: ElboParts,
    /// Share of levels decoded from `μ` (sampled layout) that are solvable.
    pub reconstruction_solvability: f64,
    pub reconstruction_accuracy: f64,
    /// Share of interpolated proposals that decode to solvable levels.
    pub interpolation_solvability: f64,
    pub interpolation_samples: usize,
    /// Smallest pairwise distance between the `μ` of distinct dataset levels.
    pub min_mu_distance: f64,
}

impl PretrainReport {
    /// Trailing moving average of the loss curve.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.loss_curve.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &self.loss_curve[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }
}

/// Proposals drawn for the interpolation solvability estimate.
pub const REPORT_INTERPOLATION_PAIRS: usize = 64;

/// Adam on the negative ELBO, shuffled minibatches, `cfg.epochs` passes.
pub fn pretrain(dataset: &[LevelParams], cfg: VaeConfig, seed: u64) -> Result<(Vae, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Contract("vae pretraining needs a nonempty dataset".into()));
    }
    let mut vae = Vae::<f32>::new(cfg, seed)?;
    let refs: Vec<&LevelParams> = dataset.iter().collect();
    for level in &refs {
        vae.check_level(level)?;
    }
    let mut opt = Adam::new(
        &vae.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e]));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut final_parts = ElboParts::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LevelParams> = chunk.iter().map(|&i| refs[i]).collect();
            let eps: Vec<f32> = (0..batch.len() * cfg.latent).map(|_| rng.sample(StandardNormal)).collect();
            let (grads, parts) = {
                let mut g = Graph::new(&vae.params);
                let (loss, parts) = vae.elbo_loss(&mut g, &batch, &eps)?;
                (g.backward(loss)?, parts)
            };
            if !parts.total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!("vae loss at epoch {epoch}: {parts:?}")));
            }
            opt.step(&mut vae.params, &grads);
            sum += parts.total * batch.len() as f64;
            count += batch.len();
            final_parts = parts;
        }
        loss_curve.push(sum / count as f64);
    }
    let report = evaluate_generator(&vae, dataset, seed, loss_curve, final_parts)?;
    Ok((vae, report))
}

/// Solvability and separation statistics of a trained generator.
pub fn evaluate_generator(
    vae: &Vae,
    dataset: &[LevelParams],
    seed: u64,
    loss_curve: Vec<f64>,
    final_parts: ElboParts,
) -> Result<PretrainReport> {
    let refs: Vec<&LevelParams> = dataset.iter().collect();
    let lats = vae.encode_batch(&refs)?;
    let heads = vae.decode_batch(&lats.iter().map(|l| l.mu.clone()).collect::<Vec<_>>())?;
    let solved_recon = heads
        .iter()
        .enumerate()
        .filter(|(i, h)| sample_level(h, derive_seed(seed, &[0xec, *i as u64])).is_ok_and(|l| solvable(&l)))
        .count();
    let interp = vae.interpolate_pairs(&refs, REPORT_INTERPOLATION_PAIRS, vae.cfg.interpolation_steps, derive_seed(seed, &[0x1e]))?;
    let generated = vae.generate(&interp, derive_seed(seed, &[0x9e]))?;
    let solved_interp = generated.iter().filter(|r| r.as_ref().is_ok_and(solvable)).count();
    let mut min_mu_distance = f64::INFINITY;
    for i in 0..lats.len() {
        for j in i + 1..lats.len() {
            if dataset[i] == dataset[j] {
                continue;
            }
            let d: f64 = lats[i]
                .mu
                .iter()
                .zip(&lats[j].mu)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            min_mu_distance = min_mu_distance.min(d);
        }
    }
    Ok(PretrainReport {
        config: vae.cfg,
        num_levels: dataset.len(),
        loss_curve,
        final_parts,
        reconstruction_solvability: solved_recon as f64 / dataset.len() as f64,
        reconstruction_accuracy: vae.reconstruction_accuracy(&refs)?,
        interpolation_solvability: solved_interp as f64 / generated.len().max(1) as f64,
        interpolation_samples: generated.len(),
        min_mu_distance,
    })
}
