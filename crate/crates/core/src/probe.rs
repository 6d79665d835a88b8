//! Linear level-identity probe over detached agent representations.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Linear, ParamStore, Tensor};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    /// Most recent representations kept for training.
    pub capacity: usize,
    pub batch_size: usize,
    /// Optimiser steps per training iteration.
    pub steps_per_update: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            capacity: 4096,
            batch_size: 256,
            steps_per_update: 1,
        }
    }
}

/// `p(i | h)` as a softmax over an affine map of `h`.
#[derive(Debug, Clone)]
pub struct Probe {
    pub num_levels: usize,
    pub dim: usize,
    pub cfg: ProbeConfig,
    params: ParamStore<f32>,
    layer: Linear,
    opt: Adam<f32>,
    data: VecDeque<(Vec<f32>, usize)>,
}

impl Probe {
    pub fn new(num_levels: usize, dim: usize, cfg: ProbeConfig, seed: u64) -> Result<Self> {
        if num_levels == 0 || dim == 0 {
            return Err(Error::Config("probe needs at least one level and one feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9b]));
        let mut params = ParamStore::new();
        let layer = Linear::new(&mut params, "probe", dim, num_levels, &mut rng);
        let opt = Adam::new(
            &params,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Probe {
            num_levels,
            dim,
            cfg,
            params,
            layer,
            opt,
            data: VecDeque::new(),
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn check(&self, reps: &[f32], labels: Option<&[usize]>) -> Result<usize> {
        if reps.len() % self.dim != 0 {
            return Err(Error::Shape {
                op: "probe input",
                lhs: vec![reps.len()],
                rhs: vec![self.dim],
            });
        }
        let n = reps.len() / self.dim;
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::Contract(format!("{} labels for {n} representations", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&i| i >= self.num_levels) {
                return Err(Error::Contract(format!("level index {bad} outside 0..{}", self.num_levels)));
            }
        }
        Ok(n)
    }

    /// Row-major `[n, num_levels]` log-probabilities.
    pub fn log_probs(&self, reps: &[f32]) -> Result<Vec<f64>> {
        let n = self.check(reps, None)?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(Tensor::new(vec![n, self.dim], reps.to_vec()));
        let y = self.layer.forward(&mut g, x)?;
        let lp = g.log_softmax(y);
        Ok(g.value(lp).data.iter().map(|&v| v as f64).collect())
    }

    /// One Adam step on the mean cross-entropy; returns the loss.
    pub fn train_step(&mut self, reps: &[f32], labels: &[usize]) -> Result<f64> {
        let n = self.check(reps, Some(labels))?;
        let (grads, loss) = {
            let mut g = Graph::new(&self.params);
            let x = g.constant(Tensor::new(vec![n, self.dim], reps.to_vec()));
            let y = self.layer.forward(&mut g, x)?;
            let lp = g.log_softmax(y);
            let picked = g.gather(lp, labels)?;
            let m = g.mean(picked);
            let loss = g.scale(m, -1.0);
            (g.backward(loss)?, g.value(loss).item() as f64)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("probe loss".into()));
        }
        self.opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// Appends representations, dropping the oldest beyond capacity.
    pub fn push(&mut self, reps: &[f32], labels: &[usize]) -> Result<()> {
        self.check(reps, Some(labels))?;
        for (row, &l) in reps.chunks(self.dim).zip(labels) {
            self.data.push_back((row.to_vec(), l));
            if self.data.len() > self.cfg.capacity {
                self.data.pop_front();
            }
        }
        Ok(())
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    /// `steps_per_update` steps on random minibatches of the stored data.
    pub fn train_from_buffer<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        if self.data.is_empty() {
            return Ok(None);
        }
        let mut last = None;
        for _ in 0..self.cfg.steps_per_update {
            let k = self.cfg.batch_size.min(self.data.len());
            let idx = sample(rng, self.data.len(), k);
            let mut reps = Vec::with_capacity(k * self.dim);
            let mut labels = Vec::with_capacity(k);
            for i in idx.iter() {
                reps.extend_from_slice(&self.data[i].0);
                labels.push(self.data[i].1);
            }
            last = Some(self.train_step(&reps, &labels)?);
        }
        Ok(last)
    }

    fn true_log_probs(&self, reps: &[f32], labels: &[usize]) -> Result<Vec<f64>> {
        self.check(reps, Some(labels))?;
        let lp = self.log_probs(reps)?;
        Ok(labels.iter().enumerate().map(|(r, &i)| lp[r * self.num_levels + i]).collect())
    }

    pub fn mi_estimate(&self, reps: &[f32], labels: &[usize]) -> Result<MiEstimate> {
        let raw = mi_from_log_probs(&self.true_log_probs(reps, labels)?, self.num_levels)?;
        Ok(MiEstimate {
            raw,
            clamped: raw.clamp(0.0, (self.num_levels as f64).ln()),
        })
    }

    /// `Σ_t log p(level | h_t)` over one trajectory; always `<= 0`.
    pub fn score_mi(&self, reps: &[f32], level: usize) -> Result<f64> {
        let n = self.check(reps, None)?;
        Ok(self.true_log_probs(reps, &vec![level; n])?.iter().sum())
    }

    pub fn accuracy(&self, reps: &[f32], labels: &[usize]) -> Result<f64> {
        let n = self.check(reps, Some(labels))?;
        if n == 0 {
            return Err(Error::Contract("accuracy of an empty batch".into()));
        }
        let lp = self.log_probs(reps)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(&lp[r * self.num_levels..(r + 1) * self.num_levels]) == i)
            .count();
        Ok(hits as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub raw: f64,
    /// Clipped to `[0, ln |L|]`.
    pub clamped: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `ln |L| + mean log p(i | h)` given the log-probability of each sample's
/// true level.
pub fn mi_from_log_probs(true_log_probs: &[f64], num_levels: usize) -> Result<f64> {
    if true_log_probs.is_empty() || num_levels == 0 {
        return Err(Error::Contract("MI estimate needs samples and levels".into()));
    }
    Ok((num_levels as f64).ln() + true_log_probs.iter().sum::<f64>() / true_log_probs.len() as f64)
}

/// Trains a fresh probe with full-batch steps and scores it on held-out
/// data: `(accuracy, mi_estimate)`.
pub fn fit_and_score(
    train: (&[f32], &[usize]),
    test: (&[f32], &[usize]),
    num_levels: usize,
    dim: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(f64, MiEstimate)> {
    let cfg = ProbeConfig {
        lr,
        ..ProbeConfig::default()
    };
    let mut probe = Probe::new(num_levels, dim, cfg, seed)?;
    for _ in 0..steps {
        probe.train_step(train.0, train.1)?;
    }
    Ok((probe.accuracy(test.0, test.1)?, probe.mi_estimate(test.0, test.1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, AgentModel, SeqInput};
    use crate::env::VIEW_LEN;

    fn separable(n: usize) -> (Vec<f32>, Vec<usize>) {
        let mut reps = Vec::new();
        let mut labels = Vec::new();
        for k in 0..n {
            let l = k % 2;
            reps.extend_from_slice(if l == 0 { &[1.0, 0.0, 0.5] } else { &[0.0, 1.0, 0.5] });
            labels.push(l);
        }
        (reps, labels)
    }

    #[test]
    fn separable_levels_reach_full_accuracy() {
        let (reps, labels) = separable(64);
        let mut probe = Probe::new(2, 3, ProbeConfig::default(), 1).unwrap();
        for _ in 0..500 {
            probe.train_step(&reps, &labels).unwrap();
        }
        assert_eq!(probe.accuracy(&reps, &labels).unwrap(), 1.0);
        let mi = probe.mi_estimate(&reps, &labels).unwrap();
        assert!(mi.raw > 0.0 && mi.raw <= 2f64.ln());
    }

    #[test]
    fn identical_representations_give_chance() {
        let levels = 4;
        let n = 400;
        let reps = vec![0.7f32; n * 2];
        let labels: Vec<usize> = (0..n).map(|k| k % levels).collect();
        let mut probe = Probe::new(levels, 2, ProbeConfig::default(), 2).unwrap();
        for _ in 0..300 {
            probe.train_step(&reps, &labels).unwrap();
        }
        let acc = probe.accuracy(&reps, &labels).unwrap();
        let chance = 1.0 / levels as f64;
        let ci = 3.0 * (chance * (1.0 - chance) / n as f64).sqrt();
        assert!((acc - chance).abs() <= ci, "{acc}");
    }

    #[test]
    fn mi_endpoints_and_hand_case() {
        let l = 5;
        assert!((mi_from_log_probs(&[0.0; 10], l).unwrap() - (l as f64).ln()).abs() < 1e-15);
        assert!(mi_from_log_probs(&[-(l as f64).ln(); 10], l).unwrap().abs() < 1e-15);
        let hand = mi_from_log_probs(&[0.8f64.ln(), 0.7f64.ln()], 2).unwrap();
        assert!((hand - (2f64.ln() + 0.5 * (0.8f64.ln() + 0.7f64.ln()))).abs() < 1e-15);
        assert!((hand - 0.4032).abs() < 1e-4);
    }

    #[test]
    fn score_mi_examples() {
        // Zero weights and biases give a uniform probe.
        let mut probe = Probe::new(4, 3, ProbeConfig::default(), 3).unwrap();
        probe.params.tensors_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x = 0.0));
        let reps = vec![0.3f32; 10 * 3];
        let s = probe.score_mi(&reps, 2).unwrap();
        assert!((s + 10.0 * 4f64.ln()).abs() < 1e-5);
        // A saturated bias on the true level gives log p = 0.
        probe.params.tensors_mut().nth(1).unwrap().data[2] = 1e4;
        assert!(probe.score_mi(&reps, 2).unwrap().abs() < 1e-6);
        assert!(probe.score_mi(&reps, 0).unwrap() <= 0.0);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut probe = Probe::new(2, 1, ProbeConfig::default(), 4).unwrap();
        assert!(probe.train_step(&[1.0], &[2]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn clamped_estimate_stays_in_range(
            reps in proptest::collection::vec(-3.0f32..3.0, 3 * 20),
            levels in 2usize..6,
            steps in 0usize..20,
        ) {
            let labels: Vec<usize> = (0..20).map(|k| k % levels).collect();
            let mut probe = Probe::new(levels, 3, ProbeConfig::default(), 9).unwrap();
            for _ in 0..steps {
                probe.train_step(&reps, &labels).unwrap();
            }
            let mi = probe.mi_estimate(&reps, &labels).unwrap();
            proptest::prop_assert!(mi.raw <= (levels as f64).ln() + 1e-12);
            proptest::prop_assert!((0.0..=(levels as f64).ln()).contains(&mi.clamped));
            let acc = probe.accuracy(&reps, &labels).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn estimate_invariant_to_relabeling() {
        let levels = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps: Vec<f32> = (0..60 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..60).map(|k| k % levels).collect();
        let mut probe = Probe::new(levels, 4, ProbeConfig::default(), 6).unwrap();
        for _ in 0..50 {
            probe.train_step(&reps, &labels).unwrap();
        }
        let perm = [2usize, 0, 1];
        let mut permuted = probe.clone();
        let (ow, ob) = (probe.params.get(probe.layer.w).clone(), probe.params.get(probe.layer.b).clone());
        for r in 0..4 {
            for c in 0..levels {
                permuted.params.get_mut(probe.layer.w).data[r * levels + perm[c]] = ow.data[r * levels + c];
            }
        }
        for c in 0..levels {
            permuted.params.get_mut(probe.layer.b).data[perm[c]] = ob.data[c];
        }
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let a = probe.mi_estimate(&reps, &labels).unwrap().raw;
        let b = permuted.mi_estimate(&reps, &relabeled).unwrap().raw;
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn probe_training_leaves_agent_untouched() {
        let model = AgentModel::<f32>::new(AgentConfig { hidden: 6, ..AgentConfig::desk() }, 1);
        let input = SeqInput {
            steps: 2,
            batch: 1,
            views: vec![0.0; 2 * VIEW_LEN],
            headings: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            resets: vec![true, false],
        };
        let run = || {
            let mut g = Graph::new(&model.params);
            let out = model.forward(&mut g, &input, None).unwrap();
            (g.value(out.reps).clone(), g.value(out.logits).clone())
        };
        let before_params = model.params.clone();
        let (reps, logits) = run();
        let mut probe = Probe::new(2, 6, ProbeConfig::default(), 2).unwrap();
        probe.push(&reps.data, &[0, 1]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            probe.train_from_buffer(&mut r).unwrap();
        }
        assert_eq!(before_params, model.params);
        assert_eq!(run(), (reps, logits));
    }

    #[test]
    fn buffer_keeps_most_recent() {
        let cfg = ProbeConfig {
            capacity: 3,
            ..ProbeConfig::default()
        };
        let mut probe = Probe::new(5, 1, cfg, 0).unwrap();
        probe.push(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(probe.stored(), 3);
        assert_eq!(probe.data.front().unwrap().1, 2);
    }
}
