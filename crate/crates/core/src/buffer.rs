//! Prioritised level buffer: scores, staleness and the mixed sampling
//! distribution over training-set and generated levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::LevelParams;
use crate::error::{Error, Result};
use crate::rng::sample_categorical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    TrainSet,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub level: LevelParams,
    pub score: f64,
    pub secondary_score: f64,
    /// Global sampling counter at the last draw of this entry.
    pub stamp: u64,
    pub origin: Origin,
    pub solved_once: bool,
    /// False until the entry has been scored at least once.
    pub seen: bool,
}

impl BufferEntry {
    pub fn train(level: LevelParams) -> Self {
        BufferEntry {
            level,
            score: 0.0,
            secondary_score: 0.0,
            stamp: 0,
            origin: Origin::TrainSet,
            solved_once: false,
            seen: false,
        }
    }

    pub fn generated(level: LevelParams, score: f64, secondary_score: f64, solved_once: bool) -> Self {
        BufferEntry {
            level,
            score,
            secondary_score,
            stamp: 0,
            origin: Origin::Generated,
            solved_once,
            seen: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMode {
    /// Generated levels get their own `generated_capacity` slots.
    #[default]
    Split,
    /// Generated levels share `generated_capacity` as a total with the
    /// training set, i.e. only `generated_capacity - |train|` slots remain.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub rho: f64,
    pub temperature: f64,
    pub secondary_temperature: f64,
    pub generated_capacity: usize,
    pub capacity_mode: CapacityMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rho: 0.3,
            temperature: 0.1,
            secondary_temperature: 1.0,
            generated_capacity: 512,
            capacity_mode: CapacityMode::Split,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.temperature <= 0.0 || self.secondary_temperature <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Mean absolute advantage.
pub fn score_value_loss(advantages: &[f64]) -> Result<f64> {
    if advantages.is_empty() {
        return Err(Error::Contract("cannot score an empty trajectory".into()));
    }
    Ok(advantages.iter().map(|a| a.abs()).sum::<f64>() / advantages.len() as f64)
}

/// Mean of `max(A_t, 0)`.
pub fn score_positive_value_loss(advantages: &[f64]) -> Result<f64> {
    if advantages.is_empty() {
        return Err(Error::Contract("cannot score an empty trajectory".into()));
    }
    Ok(advantages.iter().map(|a| a.max(0.0)).sum::<f64>() / advantages.len() as f64)
}

/// `P(i) ∝ rank(i)^(-1/temperature)` with rank 1 for the highest score.
/// Equal scores keep insertion order.
pub fn rank_prioritization(scores: &[f64], temperature: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; scores.len()];
    for (rank0, &i) in order.iter().enumerate() {
        w[i] = ((rank0 + 1) as f64).powf(-1.0 / temperature);
    }
    normalize(w)
}

/// `P_R(i) ∝ counter - stamp_i`, uniform when every age is zero.
pub fn staleness_distribution(stamps: &[u64], counter: u64) -> Vec<f64> {
    normalize(stamps.iter().map(|&s| counter.saturating_sub(s) as f64).collect())
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        let n = w.len() as f64;
        w.iter_mut().for_each(|x| *x = 1.0 / n);
    } else {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

/// Scatters a distribution over the positions in `support` into a vector of
/// length `n`.
fn embed(p: &[f64], support: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&i, &v) in support.iter().zip(p) {
        out[i] = v;
    }
    out
}

/// `(1 - rho) P_S + rho P_R`.
pub fn p_lambda(ps: &[f64], pr: &[f64], rho: f64) -> Result<Vec<f64>> {
    if ps.len() != pr.len() {
        return Err(Error::Contract(format!("P_S has {} entries, P_R has {}", ps.len(), pr.len())));
    }
    Ok(ps.iter().zip(pr).map(|(s, r)| (1.0 - rho) * s + rho * r).collect())
}

/// `(1 - rho)((1 - eta) P_S + eta P_S') + rho P_R` over the whole buffer.
/// `P_S` and `P_R` must put no mass on generated entries.
pub fn p_lambda_mixed(ps: &[f64], ps2: &[f64], pr: &[f64], rho: f64, eta: f64, origins: &[Origin]) -> Result<Vec<f64>> {
    let n = origins.len();
    if ps.len() != n || ps2.len() != n || pr.len() != n {
        return Err(Error::Contract("distribution lengths differ from buffer size".into()));
    }
    for (i, o) in origins.iter().enumerate() {
        if *o == Origin::Generated && (ps[i] != 0.0 || pr[i] != 0.0) {
            return Err(Error::Contract(format!("train-set distribution puts mass on generated entry {i}")));
        }
    }
    Ok((0..n)
        .map(|i| (1.0 - rho) * ((1.0 - eta) * ps[i] + eta * ps2[i]) + rho * pr[i])
        .collect())
}

pub fn eta_schedule(update_index: usize, total_updates: usize) -> f64 {
    if total_updates == 0 {
        return 1.0;
    }
    (update_index as f64 / total_updates as f64).clamp(0.0, 1.0)
}

/// Which distribution `sample` draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    Uniform,
    /// Score and staleness mixture over every entry.
    Prioritized,
    /// Train-set scores and staleness, generated levels only through the
    /// secondary term weighted by `eta`.
    Mixed { eta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Admitted { evicted: Option<BufferEntry> },
    Rejected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelBuffer {
    pub cfg: SamplingConfig,
    entries: Vec<BufferEntry>,
    counter: u64,
}

impl LevelBuffer {
    pub fn new(train: Vec<LevelParams>, cfg: SamplingConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("level buffer needs at least one training level".into()));
        }
        Ok(LevelBuffer {
            cfg,
            entries: train.into_iter().map(BufferEntry::train).collect(),
            counter: 0,
        })
    }

    /// Buffer without training levels, filled only by admissions.
    pub fn generated_only(cfg: SamplingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LevelBuffer {
            cfg,
            entries: Vec::new(),
            counter: 0,
        })
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &BufferEntry {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Origin::TrainSet)
    }

    pub fn generated_indices(&self) -> Vec<usize> {
        self.indices(Origin::Generated)
    }

    fn indices(&self, origin: Origin) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].origin == origin).collect()
    }

    pub fn generated_slots(&self) -> usize {
        match self.cfg.capacity_mode {
            CapacityMode::Split => self.cfg.generated_capacity,
            CapacityMode::Shared => self.cfg.generated_capacity.saturating_sub(self.train_indices().len()),
        }
    }

    /// Score-and-staleness mixture restricted to `support`; unseen entries
    /// in the support are drawn first, uniformly.
    fn plr_over(&self, support: &[usize], temperature: f64, primary: bool) -> (Vec<f64>, Vec<f64>) {
        let unseen: Vec<usize> = support.iter().copied().filter(|&i| !self.entries[i].seen).collect();
        if !unseen.is_empty() {
            let u: Vec<f64> = support
                .iter()
                .map(|i| if unseen.contains(i) { 1.0 / unseen.len() as f64 } else { 0.0 })
                .collect();
            return (u.clone(), u);
        }
        let scores: Vec<f64> = support
            .iter()
            .map(|&i| if primary { self.entries[i].score } else { self.entries[i].secondary_score })
            .collect();
        let stamps: Vec<u64> = support.iter().map(|&i| self.entries[i].stamp).collect();
        (rank_prioritization(&scores, temperature), staleness_distribution(&stamps, self.counter))
    }

    pub fn distribution(&self, mode: SamplingMode) -> Result<Vec<f64>> {
        let n = self.entries.len();
        if n == 0 {
            return Err(Error::Contract("cannot sample from an empty buffer".into()));
        }
        let rho = self.cfg.rho;
        match mode {
            SamplingMode::Uniform => {
                let train = self.train_indices();
                if train.is_empty() {
                    return Err(Error::Contract("uniform sampling needs training levels".into()));
                }
                Ok(embed(&vec![1.0 / train.len() as f64; train.len()], &train, n))
            }
            SamplingMode::Prioritized => {
                let all: Vec<usize> = (0..n).collect();
                let (ps, pr) = self.plr_over(&all, self.cfg.temperature, true);
                p_lambda(&ps, &pr, rho)
            }
            SamplingMode::Mixed { eta } => {
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Contract(format!("eta must lie in [0, 1], got {eta}")));
                }
                let train = self.train_indices();
                let (ps, pr) = self.plr_over(&train, self.cfg.temperature, true);
                let scores: Vec<f64> = self.entries.iter().map(|e| e.secondary_score).collect();
                let ps2 = rank_prioritization(&scores, self.cfg.secondary_temperature);
                let origins: Vec<Origin> = self.entries.iter().map(|e| e.origin).collect();
                p_lambda_mixed(&embed(&ps, &train, n), &ps2, &embed(&pr, &train, n), rho, eta, &origins)
            }
        }
    }

    /// Draws one entry and advances the staleness counter.
    pub fn sample<R: Rng + ?Sized>(&mut self, mode: SamplingMode, rng: &mut R) -> Result<usize> {
        let p = self.distribution(mode)?;
        let i = sample_categorical(&p, rng);
        self.mark_sampled(i);
        Ok(i)
    }

    pub fn mark_sampled(&mut self, i: usize) {
        self.counter += 1;
        self.entries[i].stamp = self.counter;
    }

    /// Overwrites the scores of a replayed entry.
    pub fn update_score(&mut self, i: usize, score: f64, secondary: f64, solved: bool) -> Result<()> {
        if !score.is_finite() || !secondary.is_finite() {
            return Err(Error::NonFinite(format!("score for buffer entry {i}")));
        }
        let e = &mut self.entries[i];
        e.score = score;
        e.secondary_score = secondary;
        e.seen = true;
        e.solved_once |= solved;
        Ok(())
    }

    /// Admits a generated level: free slot, or a score above the current
    /// minimum generated score (which is evicted). With `require_solved`,
    /// unsolved levels are never admitted.
    pub fn admit_generated(&mut self, mut entry: BufferEntry, require_solved: bool) -> Result<Admission> {
        if entry.origin != Origin::Generated {
            return Err(Error::Contract("only generated levels can be admitted".into()));
        }
        if !entry.score.is_finite() || !entry.secondary_score.is_finite() {
            return Err(Error::NonFinite("generated level score".into()));
        }
        if require_solved && !entry.solved_once {
            return Ok(Admission::Rejected);
        }
        let slots = self.generated_slots();
        if slots == 0 {
            return Ok(Admission::Rejected);
        }
        entry.stamp = self.counter;
        entry.seen = true;
        let generated = self.generated_indices();
        if generated.len() < slots {
            self.entries.push(entry);
            return Ok(Admission::Admitted { evicted: None });
        }
        let min = generated
            .iter()
            .copied()
            .min_by(|&a, &b| self.entries[a].score.total_cmp(&self.entries[b].score).then(a.cmp(&b)))
            .expect("generated entries");
        if entry.score > self.entries[min].score {
            let evicted = std::mem::replace(&mut self.entries[min], entry);
            Ok(Admission::Admitted { evicted: Some(evicted) })
        } else {
            Ok(Admission::Rejected)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
