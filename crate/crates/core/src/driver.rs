//! Training loop for every method: adaptive replay over a level buffer, the
//! UED baselines' generate-or-replay branching, and the alternation of
//! replay and generative phases for the in-context methods.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    collect_rollouts, evaluate, prepare_batch, score_episodes, AgentConfig, AgentModel, Learner, LevelEval, PpoConfig,
    RolloutBatch,
};
use crate::buffer::{
    eta_schedule, score_positive_value_loss, score_value_loss, Admission, BufferEntry, LevelBuffer, Origin,
    SamplingConfig, SamplingMode,
};
use crate::designers::{dr_generate, easy_levels, propose, Method, ProposalContext, ScoreKind, DR_MAX_TILES};
use crate::env::LevelParams;
use crate::error::{Error, Result};
use crate::metrics::{buffer_statistics, gen_gap, gen_gap_bound, jsd, pooled_histogram, shift_gap};
use crate::nn::{checkpoint, ParamStore};
use crate::probe::{Probe, ProbeConfig};
use crate::rng::derive_seed;
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SmiSign {
    /// `score = I_i`.
    #[default]
    #[serde(rename = "+")]
    Plus,
    /// `score = -I_i`.
    #[serde(rename = "-")]
    Minus,
}

impl SmiSign {
    pub fn factor(self) -> f64 {
        match self {
            SmiSign::Plus => 1.0,
            SmiSign::Minus => -1.0,
        }
    }
}

impl std::str::FromStr for SmiSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" => Ok(SmiSign::Plus),
            "-" => Ok(SmiSign::Minus),
            _ => Err(Error::Config(format!("smi sign must be + or -, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// PPO updates (replay iterations) to run.
    pub updates: usize,
    pub seed: u64,
    pub agent: AgentConfig,
    pub ppo: PpoConfig,
    pub sampling: SamplingConfig,
    /// Primary score; `None` takes the method's default.
    pub score: Option<ScoreKind>,
    pub smi_sign: SmiSign,
    /// `None` takes the method's default.
    pub replay_rate: Option<f64>,
    /// Generated-level capacity; `None` takes the method's default.
    pub buffer_size: Option<usize>,
    /// Replay iterations between generative phases.
    pub generative_every: usize,
    /// Evaluation episodes used to score each proposal.
    pub proposal_episodes: usize,
    pub pairs: usize,
    pub interpolations: usize,
    pub dr_max_tiles: usize,
    /// Fixes the mixing weight instead of the linear schedule.
    pub eta: Option<f64>,
    pub probe: ProbeConfig,
    /// Workers of the per-iteration uniform probe rollout.
    pub probe_workers: usize,
    /// Rollout length of probe data; `None` uses the PPO horizon.
    pub probe_horizon: Option<usize>,
    /// Levels in the held-out probe evaluation batch (one worker each).
    pub probe_eval_levels: usize,
    /// Minibatch steps of the fresh probe fitted on the final agent; 0 skips it.
    pub final_probe_steps: usize,
    /// Rollout length per training level for the final probe's fit and test data.
    pub final_probe_horizon: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub final_eval_episodes: usize,
    /// Buffer levels evaluated for the shift gap (exact below this count,
    /// sampled from the buffer distribution above it).
    pub shift_samples: usize,
    /// Trailing sampled levels used for the tile-distance JSD and buffer stats.
    pub jsd_window: usize,
    /// 0 disables buffer dumps.
    pub dump_buffer_every: usize,
    /// Return range `D` in the generalisation bound.
    pub bound_range: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(Method::Uniform)
    }
}

impl TrainConfig {
    pub fn desk(method: Method) -> Self {
        TrainConfig {
            method,
            updates: 1000,
            seed: 0,
            agent: AgentConfig::desk(),
            ppo: PpoConfig::desk(),
            sampling: SamplingConfig::default(),
            score: None,
            smi_sign: SmiSign::Plus,
            replay_rate: None,
            buffer_size: None,
            generative_every: 10,
            proposal_episodes: 3,
            pairs: 4,
            interpolations: 2,
            dr_max_tiles: DR_MAX_TILES,
            eta: None,
            probe: ProbeConfig::default(),
            probe_workers: 8,
            probe_horizon: None,
            probe_eval_levels: 64,
            final_probe_steps: 3000,
            final_probe_horizon: 128,
            eval_every: 50,
            eval_episodes: 2,
            final_eval_episodes: 5,
            shift_samples: 64,
            jsd_window: 1000,
            dump_buffer_every: 0,
            bound_range: 1.0,
        }
    }

    /// Reference-scale budget: full agent, 32 workers x 256 steps, 27k updates.
    pub fn full(method: Method) -> Self {
        TrainConfig {
            updates: 27_000,
            agent: AgentConfig::default(),
            ppo: PpoConfig::default(),
            eval_every: 500,
            ..TrainConfig::desk(method)
        }
    }

    pub fn score_kind(&self) -> ScoreKind {
        self.score.unwrap_or(self.method.default_score())
    }

    pub fn replay_probability(&self) -> f64 {
        self.replay_rate.unwrap_or(self.method.replay_rate())
    }

    pub fn generated_capacity(&self) -> usize {
        self.buffer_size.unwrap_or(self.method.buffer_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.sampling.validate()?;
        if let Some(p) = self.replay_rate {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("replay_rate must lie in [0, 1], got {p}")));
            }
        }
        if let Some(eta) = self.eta {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
            }
        }
        if self.score_kind() == ScoreKind::Mi && self.method.is_ued() {
            return Err(Error::Config(format!("score mi needs training levels; {} has none", self.method)));
        }
        if self.final_probe_steps > 0 && self.final_probe_horizon == 0 {
            return Err(Error::Config("final_probe_horizon must be positive".into()));
        }
        if self.method.is_iced() && self.generative_every == 0 {
            return Err(Error::Config("generative_every must be positive".into()));
        }
        let counts = [
            ("proposal_episodes", self.proposal_episodes),
            ("probe_workers", self.probe_workers),
            ("probe_eval_levels", self.probe_eval_levels),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("final_eval_episodes", self.final_eval_episodes),
            ("shift_samples", self.shift_samples),
            ("jsd_window", self.jsd_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn probe_rollout_len(&self) -> usize {
        self.probe_horizon.unwrap_or(self.ppo.horizon)
    }
}

/// JSON has no NaN; not-applicable metrics travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: usize,
    #[serde(with = "nan_as_null")]
    pub train_return: f64,
    #[serde(with = "nan_as_null")]
    pub test_return: f64,
    #[serde(with = "nan_as_null")]
    pub gen_gap: f64,
    #[serde(with = "nan_as_null")]
    pub shift_gap: f64,
    #[serde(with = "nan_as_null")]
    pub mi_estimate: f64,
    #[serde(with = "nan_as_null")]
    pub probe_acc: f64,
    #[serde(with = "nan_as_null")]
    pub bound: f64,
    #[serde(with = "nan_as_null")]
    pub jsd: f64,
    #[serde(with = "nan_as_null")]
    pub moss_density: f64,
    #[serde(with = "nan_as_null")]
    pub lava_density: f64,
    #[serde(with = "nan_as_null")]
    pub path_len: f64,
}

pub const METRICS_HEADER: &str =
    "update,train_return,test_return,gen_gap,shift_gap,mi_estimate,probe_acc,bound,jsd,moss_density,lava_density,path_len";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let r = self;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.update,
            r.train_return,
            r.test_return,
            r.gen_gap,
            r.shift_gap,
            r.mi_estimate,
            r.probe_acc,
            r.bound,
            r.jsd,
            r.moss_density,
            r.lava_density,
            r.path_len
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Outcome of one generative phase (or one UED generation step).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub update: usize,
    pub proposals: usize,
    pub invalid: usize,
    pub solved: usize,
    pub admitted: usize,
    pub evicted: usize,
    pub fingerprint_before: u64,
    pub fingerprint_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetResult {
    pub name: String,
    pub levels: usize,
    pub mean_return: f64,
    pub solved_rate: f64,
    pub per_level: Vec<LevelEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub updates: usize,
    pub iterations: usize,
    pub final_metrics: Option<MetricsRow>,
    pub eval_sets: Vec<EvalSetResult>,
    /// Share of rollout workers on generated levels, per update.
    pub generated_fraction: Vec<f64>,
    /// Mixing weight used at each update.
    pub eta: Vec<f64>,
    pub phases: Vec<PhaseReport>,
    pub admitted_total: usize,
    pub proposals_total: usize,
    /// No generative phase changed the agent's parameters.
    pub weights_unchanged: bool,
    pub chance_accuracy: f64,
    /// Held-out accuracy and MI of a probe fitted from scratch on the final agent.
    pub final_probe: Option<FinalProbe>,
    pub buffer_size: usize,
    pub generated_in_buffer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalProbe {
    pub accuracy: f64,
    pub mi_estimate: f64,
    pub fit_samples: usize,
    pub test_samples: usize,
}

/// Everything a run needs besides its config.
pub struct TrainInputs {
    pub train: Vec<LevelParams>,
    /// Named evaluation sets; the one called `test` (else the first) feeds
    /// the per-update test return.
    pub eval_sets: Vec<(String, Vec<LevelParams>)>,
    pub vae: Option<Vae>,
}

pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub report: RunReport,
    pub model: AgentModel<f32>,
    pub buffer: LevelBuffer,
}

/// FNV-1a over the bit patterns of all parameters.
pub fn param_fingerprint(params: &ParamStore<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, _, t) in params.iter() {
        for x in &t.data {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    inputs: &'a TrainInputs,
    learner: Learner,
    buffer: LevelBuffer,
    probe: Probe,
    rng: ChaCha8Rng,
    window: VecDeque<LevelParams>,
    reference_hist: Option<Vec<f64>>,
    updates: usize,
    iterations: usize,
    rows: Vec<MetricsRow>,
    report: RunReport,
    out: Option<PathBuf>,
}

/// Trains per `cfg`, writing run artifacts to `out_dir` when given.
pub fn train(cfg: &TrainConfig, inputs: &TrainInputs, out_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Config("training needs a nonempty level set".into()));
    }
    if cfg.method == Method::Iced && inputs.vae.is_none() {
        return Err(Error::Config("method iced needs a pretrained vae".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let mut run = Run::new(cfg, inputs, out_dir)?;
    match run.run() {
        Ok(()) => run.finish(),
        Err(e) => {
            run.write_diagnostics(&e);
            Err(e)
        }
    }
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig, inputs: &'a TrainInputs, out: Option<&Path>) -> Result<Self> {
        let learner = Learner::new(cfg.agent, cfg.ppo, derive_seed(cfg.seed, &[1]))?;
        let sampling = SamplingConfig {
            generated_capacity: cfg.generated_capacity(),
            ..cfg.sampling
        };
        let buffer = if cfg.method.is_ued() {
            LevelBuffer::generated_only(sampling)?
        } else {
            LevelBuffer::new(inputs.train.clone(), sampling)?
        };
        let probe = Probe::new(
            inputs.train.len(),
            learner.model.representation_dim(),
            cfg.probe,
            derive_seed(cfg.seed, &[2]),
        )?;
        let train_refs: Vec<&LevelParams> = inputs.train.iter().collect();
        let reference_hist = pooled_histogram(&train_refs, None).ok();
        let report = RunReport {
            method: cfg.method,
            seed: cfg.seed,
            updates: 0,
            iterations: 0,
            final_metrics: None,
            eval_sets: Vec::new(),
            generated_fraction: Vec::new(),
            eta: Vec::new(),
            phases: Vec::new(),
            admitted_total: 0,
            proposals_total: 0,
            weights_unchanged: true,
            chance_accuracy: 1.0 / inputs.train.len() as f64,
            final_probe: None,
            buffer_size: 0,
            generated_in_buffer: 0,
        };
        Ok(Run {
            cfg,
            inputs,
            learner,
            buffer,
            probe,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3])),
            window: VecDeque::new(),
            reference_hist,
            updates: 0,
            iterations: 0,
            rows: Vec::new(),
            report,
            out: out.map(Path::to_path_buf),
        })
    }

    fn eta(&self) -> f64 {
        self.cfg.eta.unwrap_or_else(|| eta_schedule(self.updates, self.cfg.updates))
    }

    fn replay_mode(&self) -> SamplingMode {
        match self.cfg.method {
            Method::Uniform => SamplingMode::Uniform,
            Method::Iced | Method::IcedEl => SamplingMode::Mixed { eta: self.eta() },
            _ => SamplingMode::Prioritized,
        }
    }

    fn iter_seed(&self, tag: u64) -> u64 {
        derive_seed(self.cfg.seed, &[0x17, self.iterations as u64, tag])
    }

    fn run(&mut self) -> Result<()> {
        while self.updates < self.cfg.updates {
            self.iterations += 1;
            let method = self.cfg.method;
            let replay = match method {
                Method::Dr => false,
                Method::Rplr | Method::Accel => {
                    !self.buffer.is_empty() && self.rng.gen_bool(self.cfg.replay_probability())
                }
                _ => true,
            };
            if method == Method::Dr {
                self.train_on_dr()?;
            } else if replay {
                self.replay_step()?;
            } else {
                let levels = self.dr_batch()?;
                let phase = self.score_and_admit(levels.into_iter().map(|l| (l, None)).collect(), false)?;
                self.report.phases.push(phase);
                continue;
            }
            if method.is_iced() && self.updates % self.cfg.generative_every == 0 {
                self.generative_phase()?;
            }
            self.probe_step()?;
            if self.updates % self.cfg.eval_every == 0 || self.updates == self.cfg.updates {
                let row = self.metrics_row()?;
                log::info!(
                    "{} seed {} update {}/{}: train {:.3} test {:.3} probe acc {:.3} buffer {}",
                    self.cfg.method,
                    self.cfg.seed,
                    row.update,
                    self.cfg.updates,
                    row.train_return,
                    row.test_return,
                    row.probe_acc,
                    self.buffer.len()
                );
                self.rows.push(row);
                self.write_metrics()?;
            }
            if self.cfg.dump_buffer_every > 0 && self.updates % self.cfg.dump_buffer_every == 0 {
                self.dump_buffer()?;
            }
        }
        Ok(())
    }

    fn dr_batch(&self) -> Result<Vec<LevelParams>> {
        let (h, w) = (self.inputs.train[0].height, self.inputs.train[0].width);
        (0..self.cfg.ppo.workers)
            .map(|b| dr_generate(h, w, self.cfg.dr_max_tiles, self.iter_seed(0x100 + b as u64)))
            .collect()
    }

    fn push_window(&mut self, level: &LevelParams) {
        self.window.push_back(level.clone());
        while self.window.len() > self.cfg.jsd_window {
            self.window.pop_front();
        }
    }

    fn ppo_update(&mut self, rollouts: &RolloutBatch) -> Result<()> {
        let (batch, _) = prepare_batch(rollouts, &self.cfg.ppo);
        self.learner.update(&batch, rollouts.workers)?;
        self.updates += 1;
        Ok(())
    }

    fn train_on_dr(&mut self) -> Result<()> {
        let levels = self.dr_batch()?;
        for l in &levels {
            self.push_window(l);
        }
        let assigned: Vec<(usize, &LevelParams)> = levels.iter().enumerate().collect();
        let rollouts = collect_rollouts(&self.learner.model, &assigned, self.cfg.ppo.horizon, self.cfg.ppo.max_steps, self.iter_seed(1))?;
        self.report.eta.push(self.eta());
        self.ppo_update(&rollouts)?;
        self.report.generated_fraction.push(1.0);
        Ok(())
    }

    fn replay_step(&mut self) -> Result<()> {
        let mode = self.replay_mode();
        let workers = self.cfg.ppo.workers;
        let mut picks = Vec::with_capacity(workers);
        for _ in 0..workers {
            picks.push(self.buffer.sample(mode, &mut self.rng)?);
        }
        let levels: Vec<LevelParams> = picks.iter().map(|&i| self.buffer.entry(i).level.clone()).collect();
        for l in &levels {
            self.push_window(l);
        }
        let generated = picks
            .iter()
            .filter(|&&i| self.buffer.entry(i).origin == Origin::Generated)
            .count();
        let assigned: Vec<(usize, &LevelParams)> = picks.iter().copied().zip(levels.iter()).collect();
        let rollouts = collect_rollouts(&self.learner.model, &assigned, self.cfg.ppo.horizon, self.cfg.ppo.max_steps, self.iter_seed(1))?;
        let scores = self.worker_scores(&rollouts)?;
        self.report.eta.push(self.eta());
        self.ppo_update(&rollouts)?;
        self.report.generated_fraction.push(generated as f64 / workers as f64);
        let solved = worker_solved(&rollouts);
        for (b, &i) in picks.iter().enumerate() {
            let (s, s2) = scores[b];
            self.buffer.update_score(i, s, s2, solved[b])?;
        }
        if self.cfg.method == Method::Accel {
            let primary: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let mut parents: Vec<usize> = easy_levels(&primary).into_iter().map(|b| picks[b]).collect();
            parents.sort_unstable();
            parents.dedup();
            let ctx = ProposalContext {
                parents: parents.iter().map(|&i| (i, &self.buffer.entry(i).level)).collect(),
                ..self.context()
            };
            let batch = propose(Method::Accel, &ctx, parents.len(), self.iter_seed(2))?;
            let invalid = batch.failures;
            let props = batch.proposals.into_iter().map(|p| (p.level, p.parent)).collect();
            let mut phase = self.score_and_admit(props, false)?;
            phase.invalid += invalid;
            self.report.phases.push(phase);
        }
        Ok(())
    }

    fn context(&self) -> ProposalContext<'_> {
        ProposalContext {
            height: self.inputs.train[0].height,
            width: self.inputs.train[0].width,
            dr_max_tiles: self.cfg.dr_max_tiles,
            parents: Vec::new(),
            vae: self.inputs.vae.as_ref(),
            train: self.inputs.train.iter().collect(),
            pairs: self.cfg.pairs,
            steps: self.cfg.interpolations,
        }
    }

    /// `(primary, secondary)` score of each worker's trajectory.
    fn worker_scores(&self, rollouts: &RolloutBatch) -> Result<Vec<(f64, f64)>> {
        let (raw_adv, _) = crate::agent::batch_gae(rollouts, self.cfg.ppo.gamma, self.cfg.ppo.gae_lambda);
        let w = rollouts.workers;
        let mut out = Vec::with_capacity(w);
        for b in 0..w {
            let adv: Vec<f64> = (0..rollouts.horizon).map(|t| raw_adv[t * w + b]).collect();
            let vl = score_value_loss(&adv)?;
            let level = rollouts.levels[b];
            let primary = match self.cfg.score_kind() {
                ScoreKind::ValueLoss => vl,
                ScoreKind::PositiveValueLoss => score_positive_value_loss(&adv)?,
                ScoreKind::Mi => {
                    if self.buffer.entry(level).origin == Origin::TrainSet {
                        let traj = rollouts.trajectory(b);
                        let reps: Vec<f32> = traj.reps.concat();
                        self.cfg.smi_sign.factor() * self.probe.score_mi(&reps, level)?
                    } else {
                        vl
                    }
                }
            };
            out.push((primary, vl));
        }
        Ok(out)
    }

    /// Scores proposals by evaluation-only episodes and offers them to the
    /// buffer. Checks that the agent's parameters are untouched.
    fn score_and_admit(&mut self, proposals: Vec<(LevelParams, Option<usize>)>, require_solved: bool) -> Result<PhaseReport> {
        let before = param_fingerprint(&self.learner.model.params);
        let levels: Vec<&LevelParams> = proposals.iter().map(|(l, _)| l).collect();
        let scores = if levels.is_empty() {
            Vec::new()
        } else {
            score_episodes(
                &self.learner.model,
                &levels,
                self.cfg.proposal_episodes,
                self.cfg.ppo.max_steps,
                self.cfg.ppo.gamma,
                self.cfg.ppo.gae_lambda,
                self.iter_seed(3),
            )?
        };
        let mut phase = PhaseReport {
            update: self.updates,
            proposals: proposals.len(),
            fingerprint_before: before,
            ..PhaseReport::default()
        };
        let kind = self.cfg.score_kind();
        for ((level, _), s) in proposals.into_iter().zip(scores) {
            let primary = match kind {
                ScoreKind::PositiveValueLoss => s.positive_value_loss,
                _ => s.value_loss,
            };
            phase.solved += usize::from(s.solved);
            let entry = BufferEntry::generated(level, primary, s.value_loss, s.solved);
            if let Admission::Admitted { evicted } = self.buffer.admit_generated(entry, require_solved)? {
                phase.admitted += 1;
                phase.evicted += usize::from(evicted.is_some());
            }
        }
        phase.fingerprint_after = param_fingerprint(&self.learner.model.params);
        if phase.fingerprint_after != phase.fingerprint_before {
            self.report.weights_unchanged = false;
            return Err(Error::Contract("agent parameters changed while scoring proposals".into()));
        }
        self.report.admitted_total += phase.admitted;
        self.report.proposals_total += phase.proposals;
        Ok(phase)
    }

    fn generative_phase(&mut self) -> Result<()> {
        let count = self.cfg.pairs * self.cfg.interpolations;
        let seed = self.iter_seed(4);
        let batch = match self.cfg.method {
            Method::Iced => propose(Method::Iced, &self.context(), count, seed)?,
            _ => {
                let n = self.buffer.len();
                let parents: Vec<usize> = (0..count).map(|_| self.rng.gen_range(0..n)).collect();
                let ctx = ProposalContext {
                    parents: parents.iter().map(|&i| (i, &self.buffer.entry(i).level)).collect(),
                    ..self.context()
                };
                propose(Method::IcedEl, &ctx, count, seed)?
            }
        };
        let invalid = batch.failures;
        let props = batch.proposals.into_iter().map(|p| (p.level, p.parent)).collect();
        let mut phase = self.score_and_admit(props, true)?;
        phase.invalid += invalid;
        self.report.phases.push(phase);
        Ok(())
    }

    /// Uniform rollouts over the training set feed the probe's data buffer.
    fn probe_step(&mut self) -> Result<()> {
        let n = self.inputs.train.len();
        let picks: Vec<usize> = (0..self.cfg.probe_workers).map(|_| self.rng.gen_range(0..n)).collect();
        let assigned: Vec<(usize, &LevelParams)> = picks.iter().map(|&i| (i, &self.inputs.train[i])).collect();
        let rollouts = collect_rollouts(&self.learner.model, &assigned, self.cfg.probe_rollout_len(), self.cfg.ppo.max_steps, self.iter_seed(5))?;
        let labels: Vec<usize> = (0..rollouts.len()).map(|r| rollouts.levels[r % rollouts.workers]).collect();
        self.probe.push(&rollouts.reps, &labels)?;
        self.probe.train_from_buffer(&mut self.rng)?;
        Ok(())
    }

    fn mean_return(evals: &[LevelEval]) -> f64 {
        evals.iter().map(|e| e.mean_return).sum::<f64>() / evals.len().max(1) as f64
    }

    fn test_set(&self) -> Option<&(String, Vec<LevelParams>)> {
        self.inputs
            .eval_sets
            .iter()
            .find(|(n, _)| n == "test")
            .or(self.inputs.eval_sets.first())
            .filter(|(_, l)| !l.is_empty())
    }

    fn metrics_row(&mut self) -> Result<MetricsRow> {
        let model = &self.learner.model;
        let max_steps = self.cfg.ppo.max_steps;
        let eval_seed = derive_seed(self.cfg.seed, &[0xe1, self.updates as u64]);
        let train_refs: Vec<&LevelParams> = self.inputs.train.iter().collect();
        let train_eval = evaluate(model, &train_refs, self.cfg.eval_episodes, max_steps, derive_seed(eval_seed, &[0]), false)?;
        let train_returns: Vec<f64> = train_eval.iter().map(|e| e.mean_return).collect();
        let train_return = Run::mean_return(&train_eval);
        let (test_return, gap) = match self.test_set() {
            Some((_, levels)) => {
                let refs: Vec<&LevelParams> = levels.iter().collect();
                let ev = evaluate(model, &refs, self.cfg.eval_episodes, max_steps, derive_seed(eval_seed, &[1]), false)?;
                let test_returns: Vec<f64> = ev.iter().map(|e| e.mean_return).collect();
                (Run::mean_return(&ev), gen_gap(&train_returns, &test_returns)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        let shift = self.shift_gap(&train_returns, derive_seed(eval_seed, &[2]))?;

        let (mi, acc) = self.probe_eval(derive_seed(eval_seed, &[3]))?;
        let bound = gen_gap_bound(mi, self.inputs.train.len(), self.cfg.bound_range)?;

        let window: Vec<&LevelParams> = self.window.iter().collect();
        let jsd_value = match (&self.reference_hist, pooled_histogram(&window, None)) {
            (Some(r), Ok(w)) => jsd(&w, r)?,
            _ => f64::NAN,
        };
        let stats = if window.is_empty() {
            None
        } else {
            Some(buffer_statistics(&window)?)
        };
        Ok(MetricsRow {
            update: self.updates,
            train_return,
            test_return,
            gen_gap: gap,
            shift_gap: shift,
            mi_estimate: mi,
            probe_acc: acc,
            bound,
            jsd: jsd_value,
            moss_density: stats.map_or(f64::NAN, |s| s.moss_density),
            lava_density: stats.map_or(f64::NAN, |s| s.lava_density),
            path_len: stats.map_or(f64::NAN, |s| s.path_len),
        })
    }

    /// Return under the current sampling distribution minus the uniform
    /// return over the training set.
    fn shift_gap(&mut self, train_returns: &[f64], seed: u64) -> Result<f64> {
        let model = &self.learner.model;
        let max_steps = self.cfg.ppo.max_steps;
        let episodes = self.cfg.eval_episodes;
        let (levels, p): (Vec<LevelParams>, Vec<f64>) = if self.cfg.method == Method::Dr || self.buffer.is_empty() {
            let (h, w) = (self.inputs.train[0].height, self.inputs.train[0].width);
            let levels = (0..self.cfg.shift_samples)
                .map(|i| dr_generate(h, w, self.cfg.dr_max_tiles, derive_seed(seed, &[i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let n = levels.len();
            (levels, vec![1.0 / n as f64; n])
        } else {
            let dist = self.buffer.distribution(self.replay_mode())?;
            let support: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
            if support.len() <= self.cfg.shift_samples {
                (
                    support.iter().map(|&i| self.buffer.entry(i).level.clone()).collect(),
                    support.iter().map(|&i| dist[i]).collect(),
                )
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = self.cfg.shift_samples;
                let picks: Vec<usize> = (0..n).map(|_| crate::rng::sample_categorical(&dist, &mut rng)).collect();
                (
                    picks.iter().map(|&i| self.buffer.entry(i).level.clone()).collect(),
                    vec![1.0 / n as f64; n],
                )
            }
        };
        let refs: Vec<&LevelParams> = levels.iter().collect();
        let ev = evaluate(model, &refs, episodes, max_steps, derive_seed(seed, &[0xf]), false)?;
        let returns: Vec<f64> = ev.iter().map(|e| e.mean_return).collect();
        shift_gap(&p, &returns, train_returns)
    }

    /// MI estimate and accuracy on a fresh balanced rollout batch.
    fn probe_eval(&self, seed: u64) -> Result<(f64, f64)> {
        let n = self.inputs.train.len();
        let levels: Vec<usize> = if n <= self.cfg.probe_eval_levels {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, self.cfg.probe_eval_levels).into_vec()
        };
        let assigned: Vec<(usize, &LevelParams)> = levels.iter().map(|&i| (i, &self.inputs.train[i])).collect();
        let rollouts = collect_rollouts(&self.learner.model, &assigned, self.cfg.probe_rollout_len(), self.cfg.ppo.max_steps, seed)?;
        let labels: Vec<usize> = (0..rollouts.len()).map(|r| rollouts.levels[r % rollouts.workers]).collect();
        let mi = self.probe.mi_estimate(&rollouts.reps, &labels)?;
        let acc = self.probe.accuracy(&rollouts.reps, &labels)?;
        Ok((mi.clamped, acc))
    }

    /// Fits a fresh probe to the final representation on uniform rollouts and
    /// scores it on held-out rollouts from other episodes.
    fn final_probe(&self) -> Result<FinalProbe> {
        let n = self.inputs.train.len();
        let assigned: Vec<(usize, &LevelParams)> = self.inputs.train.iter().enumerate().collect();
        let rollout = |tag: u64| {
            let seed = derive_seed(self.cfg.seed, &[0xf1, tag]);
            collect_rollouts(&self.learner.model, &assigned, self.cfg.final_probe_horizon, self.cfg.ppo.max_steps, seed)
        };
        let (fit, test) = (rollout(0)?, rollout(1)?);
        let labels = |r: &RolloutBatch| -> Vec<usize> { (0..r.len()).map(|i| r.levels[i % r.workers]).collect() };
        let cfg = ProbeConfig {
            capacity: fit.len(),
            steps_per_update: self.cfg.final_probe_steps,
            ..self.cfg.probe
        };
        let mut probe = Probe::new(n, fit.rep_dim, cfg, derive_seed(self.cfg.seed, &[0xf2]))?;
        probe.push(&fit.reps, &labels(&fit))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[0xf3]));
        probe.train_from_buffer(&mut rng)?;
        let test_labels = labels(&test);
        Ok(FinalProbe {
            accuracy: probe.accuracy(&test.reps, &test_labels)?,
            mi_estimate: probe.mi_estimate(&test.reps, &test_labels)?.clamped,
            fit_samples: fit.len(),
            test_samples: test.len(),
        })
    }

    fn write_metrics(&self) -> Result<()> {
        if let Some(dir) = &self.out {
            fs::write(dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        }
        Ok(())
    }

    fn dump_buffer(&self) -> Result<()> {
        if let Some(dir) = &self.out {
            fs::write(dir.join(format!("buffer_{:06}.json", self.updates)), self.buffer.to_json()?)?;
        }
        Ok(())
    }

    fn write_diagnostics(&self, err: &Error) {
        let Some(dir) = &self.out else { return };
        let _ = checkpoint::save(&dir.join("agent.ckpt"), &self.learner.model.params);
        let diag = serde_json::json!({
            "error": err.to_string(),
            "update": self.updates,
            "iteration": self.iterations,
            "buffer_size": self.buffer.len(),
        });
        if let Ok(mut f) = fs::File::create(dir.join("diagnostics.json")) {
            let _ = writeln!(f, "{diag:#}");
        }
    }

    fn finish(mut self) -> Result<RunResult> {
        let model = &self.learner.model;
        let mut sets = Vec::new();
        for (k, (name, levels)) in self.inputs.eval_sets.iter().enumerate() {
            let refs: Vec<&LevelParams> = levels.iter().collect();
            let per_level = if refs.is_empty() {
                Vec::new()
            } else {
                evaluate(
                    model,
                    &refs,
                    self.cfg.final_eval_episodes,
                    self.cfg.ppo.max_steps,
                    derive_seed(self.cfg.seed, &[0xfe, k as u64]),
                    false,
                )?
            };
            let n = per_level.len().max(1) as f64;
            sets.push(EvalSetResult {
                name: name.clone(),
                levels: levels.len(),
                mean_return: per_level.iter().map(|e| e.mean_return).sum::<f64>() / n,
                solved_rate: per_level.iter().map(|e| e.solved_rate).sum::<f64>() / n,
                per_level,
            });
        }
        self.report.eval_sets = sets;
        if self.cfg.final_probe_steps > 0 {
            self.report.final_probe = Some(self.final_probe()?);
        }
        self.report.updates = self.updates;
        self.report.iterations = self.iterations;
        self.report.final_metrics = self.rows.last().copied();
        self.report.buffer_size = self.buffer.len();
        self.report.generated_in_buffer = self.buffer.generated_indices().len();
        if let Some(dir) = &self.out {
            self.write_metrics()?;
            checkpoint::save(&dir.join("agent.ckpt"), &self.learner.model.params)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
            fs::write(dir.join("buffer_final.json"), self.buffer.to_json()?)?;
        }
        Ok(RunResult {
            rows: self.rows,
            report: self.report,
            model: self.learner.model,
            buffer: self.buffer,
        })
    }
}

/// Whether each worker reached the goal at least once in the batch.
fn worker_solved(rollouts: &RolloutBatch) -> Vec<bool> {
    let mut solved = vec![false; rollouts.workers];
    for (b, _, s) in rollouts.completed_episodes() {
        solved[b] |= s;
    }
    solved
}
