//! Actor-critic agent, rollout collection, advantage estimation and PPO.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GridEnv, LevelParams, Observation, DEFAULT_MAX_STEPS, NUM_ACTIONS, VIEW_CHANNELS, VIEW_LEN, VIEW_SIZE};
use crate::error::{Error, Result};
use crate::nn::{
    clip_global_norm, Adam, AdamConfig, CellKind, Conv2d, ConvGeom, Graph, Linear, ParamStore, RecurrentCell,
    RecurrentState, Scalar, Tensor, Var,
};
use crate::rng::{derive_seed, sample_categorical};

pub const HEADING_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    #[default]
    Lstm,
    Gru,
    /// No recurrence: a single affine layer with ReLU.
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub core: CoreKind,
    pub hidden: usize,
    pub conv_channels: usize,
    pub heading_dim: usize,
    pub head_hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            core: CoreKind::Lstm,
            hidden: 256,
            conv_channels: 16,
            heading_dim: 5,
            head_hidden: 32,
        }
    }
}

impl AgentConfig {
    pub fn desk() -> Self {
        AgentConfig {
            hidden: 32,
            ..AgentConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub horizon: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub workers: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub value_coeff: f64,
    pub value_clip: bool,
    pub entropy_coeff: f64,
    pub normalize_advantages: bool,
    pub max_steps: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.995,
            gae_lambda: 0.95,
            horizon: 256,
            epochs: 5,
            minibatches: 1,
            clip: 0.2,
            workers: 32,
            lr: 1e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            value_coeff: 0.5,
            value_clip: true,
            entropy_coeff: 0.01,
            normalize_advantages: true,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl PpoConfig {
    /// Fewer workers and a shorter horizon for single-core runs.
    pub fn desk() -> Self {
        PpoConfig {
            workers: 16,
            horizon: 64,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in (0, 1]".into()));
        }
        if self.clip <= 0.0 || self.max_grad_norm <= 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("clip, max_grad_norm and lr must be positive".into()));
        }
        if self.horizon == 0 || self.workers == 0 || self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("horizon, workers, epochs and minibatches must be positive".into()));
        }
        if self.minibatches > self.workers {
            return Err(Error::Config("minibatches cannot exceed workers".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Core {
    Recurrent(RecurrentCell),
    Feedforward(Linear),
}

/// Convolutional view encoder and affine heading encoder feeding a shared
/// core whose output `h_t` is read by both the policy and the value head.
#[derive(Debug, Clone)]
pub struct AgentModel<T: Scalar = f32> {
    pub cfg: AgentConfig,
    pub params: ParamStore<T>,
    conv: Conv2d,
    heading: Linear,
    core: Core,
    pi1: Linear,
    pi2: Linear,
    v1: Linear,
    v2: Linear,
}

/// Time-major inputs: row `t * batch + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub steps: usize,
    pub batch: usize,
    pub views: Vec<f32>,
    pub headings: Vec<f32>,
    /// Hidden state is zeroed before consuming row `t * batch + b`.
    pub resets: Vec<bool>,
}

pub struct SeqOutput {
    pub logits: Var,
    pub values: Var,
    pub reps: Var,
    pub state: Option<RecurrentState>,
}

/// Plain-tensor recurrent state carried between single-step forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Tensor<f32>,
    pub c: Tensor<f32>,
}

impl<T: Scalar> AgentModel<T> {
    pub fn new(cfg: AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xa9]));
        let mut params = ParamStore::new();
        let geom = ConvGeom {
            channels: VIEW_CHANNELS,
            height: VIEW_SIZE,
            width: VIEW_SIZE,
            out_channels: cfg.conv_channels,
            kernel: 3,
        };
        let conv = Conv2d::new(&mut params, "view_conv", geom, &mut rng);
        let heading = Linear::new(&mut params, "heading", HEADING_LEN, cfg.heading_dim, &mut rng);
        let feat = conv.output_len() + cfg.heading_dim;
        let core = match cfg.core {
            CoreKind::Lstm => Core::Recurrent(RecurrentCell::new(&mut params, "core", CellKind::Lstm, feat, cfg.hidden, &mut rng)),
            CoreKind::Gru => Core::Recurrent(RecurrentCell::new(&mut params, "core", CellKind::Gru, feat, cfg.hidden, &mut rng)),
            CoreKind::Feedforward => Core::Feedforward(Linear::new(&mut params, "core", feat, cfg.hidden, &mut rng)),
        };
        let pi1 = Linear::new(&mut params, "policy.0", cfg.hidden, cfg.head_hidden, &mut rng);
        let pi2 = Linear::new(&mut params, "policy.1", cfg.head_hidden, NUM_ACTIONS, &mut rng);
        let v1 = Linear::new(&mut params, "value.0", cfg.hidden, cfg.head_hidden, &mut rng);
        let v2 = Linear::new(&mut params, "value.1", cfg.head_hidden, 1, &mut rng);
        AgentModel {
            cfg,
            params,
            conv,
            heading,
            core,
            pi1,
            pi2,
            v1,
            v2,
        }
    }

    pub fn representation_dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.core, Core::Recurrent(_))
    }

    fn cell_width(&self) -> usize {
        match &self.core {
            Core::Recurrent(c) if c.kind == CellKind::Lstm => self.cfg.hidden,
            _ => 0,
        }
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> AgentModel<U> {
        AgentModel {
            cfg: self.cfg,
            params: self.params.cast(),
            conv: self.conv,
            heading: self.heading,
            core: self.core.clone(),
            pi1: self.pi1,
            pi2: self.pi2,
            v1: self.v1,
            v2: self.v2,
        }
    }

    /// Unrolls the network over `input`. `init` defaults to a zero state.
    pub fn forward(&self, g: &mut Graph<'_, T>, input: &SeqInput, init: Option<&HiddenState>) -> Result<SeqOutput> {
        let (steps, batch) = (input.steps, input.batch);
        let n = steps * batch;
        if input.views.len() != n * VIEW_LEN || input.headings.len() != n * HEADING_LEN || input.resets.len() != n {
            return Err(Error::Shape {
                op: "agent input",
                lhs: vec![input.views.len(), input.headings.len(), input.resets.len()],
                rhs: vec![n * VIEW_LEN, n * HEADING_LEN, n],
            });
        }
        let views = g.constant(Tensor::from_f32(&[n, VIEW_LEN], &input.views));
        let headings = g.constant(Tensor::from_f32(&[n, HEADING_LEN], &input.headings));
        let v = self.conv.forward(g, views)?;
        let v = g.relu(v);
        let hd = self.heading.forward(g, headings)?;
        let feat = g.concat_cols(v, hd)?;
        let (reps, state) = match &self.core {
            Core::Feedforward(lin) => {
                let h = lin.forward(g, feat)?;
                (g.relu(h), None)
            }
            Core::Recurrent(cell) => {
                let proj = cell.project(g, feat)?;
                let mut s = match init {
                    Some(hs) => RecurrentState {
                        h: g.constant(hs.h.cast()),
                        c: g.constant(hs.c.cast()),
                    },
                    None => cell.zero_state(g, batch),
                };
                let mut hs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let resets = &input.resets[t * batch..(t + 1) * batch];
                    if resets.iter().any(|&r| r) && (t > 0 || init.is_some()) {
                        let keep: Vec<f64> = resets.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect();
                        let mask_h = Tensor::from_f64(&[batch, self.cfg.hidden], &repeat_rows(&keep, self.cfg.hidden));
                        let mh = g.constant(mask_h);
                        s.h = g.mul(s.h, mh)?;
                        let cw = self.cell_width();
                        if cw > 0 {
                            let mc = g.constant(Tensor::from_f64(&[batch, cw], &repeat_rows(&keep, cw)));
                            s.c = g.mul(s.c, mc)?;
                        }
                    }
                    let xp = g.slice_rows(proj, t * batch, batch)?;
                    s = cell.step(g, xp, s)?;
                    hs.push(s.h);
                }
                let reps = if hs.len() == 1 { hs[0] } else { g.stack_rows(&hs)? };
                (reps, Some(s))
            }
        };
        let p = self.pi1.forward(g, reps)?;
        let p = g.relu(p);
        let logits = self.pi2.forward(g, p)?;
        let q = self.v1.forward(g, reps)?;
        let q = g.relu(q);
        let values = self.v2.forward(g, q)?;
        Ok(SeqOutput {
            logits,
            values,
            reps,
            state,
        })
    }
}

fn repeat_rows(keep: &[f64], width: usize) -> Vec<f64> {
    keep.iter().flat_map(|&k| std::iter::repeat(k).take(width)).collect()
}

impl AgentModel<f32> {
    pub fn zero_hidden(&self, batch: usize) -> HiddenState {
        HiddenState {
            h: Tensor::zeros(&[batch, self.cfg.hidden]),
            c: Tensor::zeros(&[batch, self.cell_width()]),
        }
    }

    /// One inference step for `obs.len()` independent streams.
    pub fn act_step(&self, obs: &[Observation], hidden: &HiddenState) -> Result<StepInference> {
        let batch = obs.len();
        let mut views = Vec::with_capacity(batch * VIEW_LEN);
        let mut headings = Vec::with_capacity(batch * HEADING_LEN);
        for o in obs {
            views.extend_from_slice(&o.view);
            headings.extend_from_slice(&o.heading);
        }
        let input = SeqInput {
            steps: 1,
            batch,
            views,
            headings,
            resets: vec![false; batch],
        };
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, &input, Some(hidden))?;
        let hidden = match out.state {
            Some(s) => HiddenState {
                h: g.value(s.h).clone(),
                c: g.value(s.c).clone(),
            },
            None => hidden.clone(),
        };
        let lp = g.log_softmax(out.logits);
        Ok(StepInference {
            log_probs: g.value(lp).data.clone(),
            values: g.value(out.values).data.clone(),
            reps: g.value(out.reps).data.clone(),
            hidden,
        })
    }
}

pub struct StepInference {
    /// `[batch, NUM_ACTIONS]`
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    /// `[batch, hidden]`
    pub reps: Vec<f32>,
    pub hidden: HiddenState,
}

/// Time-major transitions from `workers` streams over `horizon` steps; each
/// worker replays its assigned level, resetting on episode end.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub workers: usize,
    pub rep_dim: usize,
    /// Buffer index of each worker's level.
    pub levels: Vec<usize>,
    pub views: Vec<f32>,
    pub headings: Vec<f32>,
    pub resets: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Representation `h_t` at every step, `[horizon * workers, rep_dim]`.
    pub reps: Vec<f32>,
    /// Value of the state after the final step, per worker.
    pub bootstrap: Vec<f32>,
}

/// One worker's slice of a [`RolloutBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub level: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub reps: Vec<Vec<f32>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.horizon * self.workers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn column<X: Copy>(&self, data: &[X], b: usize) -> Vec<X> {
        (0..self.horizon).map(|t| data[t * self.workers + b]).collect()
    }

    pub fn trajectory(&self, b: usize) -> Trajectory {
        Trajectory {
            level: self.levels[b],
            actions: self.column(&self.actions, b),
            log_probs: self.column(&self.log_probs, b),
            values: self.column(&self.values, b),
            rewards: self.column(&self.rewards, b),
            dones: self.column(&self.dones, b),
            reps: (0..self.horizon)
                .map(|t| {
                    let row = t * self.workers + b;
                    self.reps[row * self.rep_dim..(row + 1) * self.rep_dim].to_vec()
                })
                .collect(),
        }
    }

    /// Episodes that finished inside the batch: `(worker, return, solved)`.
    pub fn completed_episodes(&self) -> Vec<(usize, f64, bool)> {
        let mut out = Vec::new();
        for b in 0..self.workers {
            for t in 0..self.horizon {
                let i = t * self.workers + b;
                if self.dones[i] {
                    let r = self.rewards[i] as f64;
                    out.push((b, r, r > 0.0));
                }
            }
        }
        out
    }

    pub fn seq_input(&self) -> SeqInput {
        SeqInput {
            steps: self.horizon,
            batch: self.workers,
            views: self.views.clone(),
            headings: self.headings.clone(),
            resets: self.resets.clone(),
        }
    }
}

fn sample_action(log_probs: &[f32], rng: &mut ChaCha8Rng) -> usize {
    let probs: Vec<f64> = log_probs.iter().map(|&l| (l as f64).exp()).collect();
    sample_categorical(&probs, rng)
}

fn greedy_action(log_probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in log_probs.iter().enumerate() {
        if l > log_probs[best] {
            best = i;
        }
    }
    best
}

/// Runs one worker per entry of `levels` (buffer index, level) for `horizon`
/// steps. Deterministic in `(model, levels, seed)`.
pub fn collect_rollouts(
    model: &AgentModel<f32>,
    levels: &[(usize, &LevelParams)],
    horizon: usize,
    max_steps: u32,
    seed: u64,
) -> Result<RolloutBatch> {
    let workers = levels.len();
    if workers == 0 || horizon == 0 {
        return Err(Error::Contract("rollouts need at least one worker and step".into()));
    }
    let envs = levels
        .iter()
        .map(|(_, l)| GridEnv::new((*l).clone(), max_steps))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x50]));
    let mut episode = vec![0u64; workers];
    let mut states = Vec::with_capacity(workers);
    let mut obs = Vec::with_capacity(workers);
    for (b, env) in envs.iter().enumerate() {
        let (s, o) = env.reset(derive_seed(seed, &[b as u64, 0]));
        states.push(s);
        obs.push(o);
    }
    let mut hidden = model.zero_hidden(workers);
    let n = horizon * workers;
    let rep_dim = model.representation_dim();
    let mut batch = RolloutBatch {
        horizon,
        workers,
        rep_dim,
        levels: levels.iter().map(|(i, _)| *i).collect(),
        views: Vec::with_capacity(n * VIEW_LEN),
        headings: Vec::with_capacity(n * HEADING_LEN),
        resets: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        reps: Vec::with_capacity(n * rep_dim),
        bootstrap: Vec::new(),
    };
    let mut reset_next = vec![true; workers];
    for _t in 0..horizon {
        for (b, o) in obs.iter().enumerate() {
            batch.views.extend_from_slice(&o.view);
            batch.headings.extend_from_slice(&o.heading);
            batch.resets.push(reset_next[b]);
            if reset_next[b] {
                zero_row(&mut hidden.h, b);
                zero_row(&mut hidden.c, b);
            }
        }
        let inf = model.act_step(&obs, &hidden)?;
        hidden = inf.hidden;
        batch.reps.extend_from_slice(&inf.reps);
        for b in 0..workers {
            let lp = &inf.log_probs[b * NUM_ACTIONS..(b + 1) * NUM_ACTIONS];
            let a = sample_action(lp, &mut rng);
            let out = envs[b].step(&states[b], a)?;
            batch.actions.push(a);
            batch.log_probs.push(lp[a]);
            batch.values.push(inf.values[b]);
            batch.rewards.push(out.reward);
            batch.dones.push(out.done);
            reset_next[b] = out.done;
            if out.done {
                episode[b] += 1;
                let (s, o) = envs[b].reset(derive_seed(seed, &[b as u64, episode[b]]));
                states[b] = s;
                obs[b] = o;
            } else {
                states[b] = out.state;
                obs[b] = out.obs;
            }
        }
    }
    for b in 0..workers {
        if reset_next[b] {
            zero_row(&mut hidden.h, b);
            zero_row(&mut hidden.c, b);
        }
    }
    batch.bootstrap = model.act_step(&obs, &hidden)?.values;
    Ok(batch)
}

fn zero_row(t: &mut Tensor<f32>, row: usize) {
    let (_, w) = t.dims2();
    if w > 0 {
        t.data[row * w..(row + 1) * w].iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Generalised advantage estimation over one sequence.
/// `dones[t]` marks that the episode ended after step `t`; `bootstrap` is
/// the value of the state following the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Advantages and value targets for the whole batch, time-major.
pub fn batch_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let (mut adv, mut targets) = (vec![0.0; n], vec![0.0; n]);
    for b in 0..batch.workers {
        let col = |d: &[f32]| -> Vec<f64> { (0..batch.horizon).map(|t| d[t * batch.workers + b] as f64).collect() };
        let dones: Vec<bool> = (0..batch.horizon).map(|t| batch.dones[t * batch.workers + b]).collect();
        let (a, r) = gae(&col(&batch.rewards), &col(&batch.values), &dones, batch.bootstrap[b] as f64, gamma, lambda);
        for t in 0..batch.horizon {
            adv[t * batch.workers + b] = a[t];
            targets[t * batch.workers + b] = r[t];
        }
    }
    (adv, targets)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Degenerate batches are only centred.
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = (*a - mean) * scale);
}

/// Everything the PPO loss needs for one minibatch of whole sequences.
#[derive(Debug, Clone)]
pub struct PpoBatch {
    pub input: SeqInput,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    /// Keeps the listed workers' columns.
    fn select(&self, workers: usize, keep: &[usize]) -> PpoBatch {
        let steps = self.input.steps;
        let rows: Vec<usize> = (0..steps).flat_map(|t| keep.iter().map(move |&b| t * workers + b)).collect();
        let pick = |d: &[f64]| rows.iter().map(|&r| d[r]).collect::<Vec<_>>();
        PpoBatch {
            input: SeqInput {
                steps,
                batch: keep.len(),
                views: rows.iter().flat_map(|&r| self.input.views[r * VIEW_LEN..(r + 1) * VIEW_LEN].iter().copied()).collect(),
                headings: rows
                    .iter()
                    .flat_map(|&r| self.input.headings[r * HEADING_LEN..(r + 1) * HEADING_LEN].iter().copied())
                    .collect(),
                resets: rows.iter().map(|&r| self.input.resets[r]).collect(),
            },
            actions: rows.iter().map(|&r| self.actions[r]).collect(),
            old_log_probs: pick(&self.old_log_probs),
            old_values: pick(&self.old_values),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate + `value_coeff` × clipped squared value error −
/// `entropy_coeff` × entropy. Returns the scalar loss node.
pub fn ppo_loss<T: Scalar>(model: &AgentModel<T>, g: &mut Graph<'_, T>, batch: &PpoBatch, cfg: &PpoConfig) -> Result<(Var, LossParts)> {
    let out = model.forward(g, &batch.input, None)?;
    let n = batch.actions.len();
    let c = |g: &mut Graph<'_, T>, d: &[f64]| g.constant(Tensor::from_f64(&[d.len()], d));
    let lp = g.log_softmax(out.logits);
    let new_lp = g.gather(lp, &batch.actions)?;
    let old_lp = c(g, &batch.old_log_probs);
    let diff = g.sub(new_lp, old_lp)?;
    let ratio = g.exp(diff);
    let adv = c(g, &batch.advantages);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.min(s1, s2)?;
    let surr = g.mean(surr);
    let policy_loss = g.scale(surr, -1.0);

    let values = g.reshape(out.values, &[n])?;
    let ret = c(g, &batch.returns);
    let err = g.sub(values, ret)?;
    let sq = g.mul(err, err)?;
    let vsq = if cfg.value_clip {
        let old_v = c(g, &batch.old_values);
        let dv = g.sub(values, old_v)?;
        let dv = g.clamp(dv, -cfg.clip, cfg.clip);
        let vc = g.add(old_v, dv)?;
        let errc = g.sub(vc, ret)?;
        let sqc = g.mul(errc, errc)?;
        g.max(sq, sqc)?
    } else {
        sq
    };
    let value_loss = g.mean(vsq);

    let p = g.exp(lp);
    let plogp = g.mul(p, lp)?;
    let neg_ent = g.sum_rows(plogp);
    let neg_ent = g.mean(neg_ent);
    let entropy = g.scale(neg_ent, -1.0);

    let vterm = g.scale(value_loss, cfg.value_coeff);
    let eterm = g.scale(neg_ent, cfg.entropy_coeff);
    let total = g.add(policy_loss, vterm)?;
    let total = g.add(total, eterm)?;

    let rv = g.value(ratio);
    let clip_fraction = rv.data.iter().filter(|r| (r.as_f64() - 1.0).abs() > cfg.clip).count() as f64 / n.max(1) as f64;
    let parts = LossParts {
        policy_loss: g.value(policy_loss).item().as_f64(),
        value_loss: g.value(value_loss).item().as_f64(),
        entropy: g.value(entropy).item().as_f64(),
        total: g.value(total).item().as_f64(),
        clip_fraction,
    };
    Ok((total, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
}

/// Builds the loss batch from rollouts: GAE, optional advantage
/// normalisation.
pub fn prepare_batch(batch: &RolloutBatch, cfg: &PpoConfig) -> (PpoBatch, Vec<f64>) {
    let (raw_adv, returns) = batch_gae(batch, cfg.gamma, cfg.gae_lambda);
    let mut adv = raw_adv.clone();
    if cfg.normalize_advantages {
        normalize_advantages(&mut adv);
    }
    (
        PpoBatch {
            input: batch.seq_input(),
            actions: batch.actions.clone(),
            old_log_probs: batch.log_probs.iter().map(|&x| x as f64).collect(),
            old_values: batch.values.iter().map(|&x| x as f64).collect(),
            advantages: adv,
            returns,
        },
        raw_adv,
    )
}

/// PPO trainer owning the model parameters and optimiser state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: AgentModel<f32>,
    pub opt: Adam<f32>,
    pub cfg: PpoConfig,
}

impl Learner {
    pub fn new(agent: AgentConfig, cfg: PpoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = AgentModel::new(agent, seed);
        let opt = Adam::new(&model.params, cfg.adam());
        Ok(Learner { model, opt, cfg })
    }

    /// `epochs` passes over the batch; each minibatch holds whole worker
    /// sequences, re-unrolled from a zero state.
    pub fn update(&mut self, batch: &PpoBatch, workers: usize) -> Result<UpdateStats> {
        let mut stats = UpdateStats::default();
        let mut count = 0.0;
        let groups: Vec<Vec<usize>> = (0..self.cfg.minibatches)
            .map(|m| (0..workers).filter(|b| b % self.cfg.minibatches == m).collect())
            .collect();
        let minis: Vec<PpoBatch> = if groups.len() == 1 {
            vec![batch.clone()]
        } else {
            groups.iter().map(|gr| batch.select(workers, gr)).collect()
        };
        for epoch in 0..self.cfg.epochs {
            for (m, mini) in minis.iter().enumerate() {
                let (mut grads, parts) = {
                    let mut g = Graph::new(&self.model.params);
                    let (loss, parts) = ppo_loss(&self.model, &mut g, mini, &self.cfg)?;
                    (g.backward(loss)?, parts)
                };
                if !parts.total.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "PPO loss at epoch {epoch}, minibatch {m}: {parts:?}, adam step {}",
                        self.opt.steps()
                    )));
                }
                let norm = clip_global_norm(&mut grads, self.cfg.max_grad_norm);
                self.opt.step(&mut self.model.params, &grads);
                stats.policy_loss += parts.policy_loss;
                stats.value_loss += parts.value_loss;
                stats.entropy += parts.entropy;
                stats.total_loss += parts.total;
                stats.clip_fraction += parts.clip_fraction;
                stats.grad_norm += norm;
                count += 1.0;
            }
        }
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.total_loss /= count;
        stats.clip_fraction /= count;
        stats.grad_norm /= count;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelEval {
    pub mean_return: f64,
    pub solved_rate: f64,
}

/// Anything that maps a batch of observations (plus per-stream memory) to
/// actions; used for evaluation.
pub trait Policy {
    type Memory;
    fn initial(&self, batch: usize) -> Self::Memory;
    fn reset_row(&self, memory: &mut Self::Memory, row: usize);
    fn act(&self, obs: &[Observation], memory: &mut Self::Memory, rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

/// The agent's policy, sampled or greedy.
pub struct AgentPolicy<'a> {
    pub model: &'a AgentModel<f32>,
    pub greedy: bool,
}

impl Policy for AgentPolicy<'_> {
    type Memory = HiddenState;

    fn initial(&self, batch: usize) -> HiddenState {
        self.model.zero_hidden(batch)
    }

    fn reset_row(&self, m: &mut HiddenState, row: usize) {
        zero_row(&mut m.h, row);
        zero_row(&mut m.c, row);
    }

    fn act(&self, obs: &[Observation], m: &mut HiddenState, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let inf = self.model.act_step(obs, m)?;
        *m = inf.hidden;
        Ok((0..obs.len())
            .map(|b| {
                let lp = &inf.log_probs[b * NUM_ACTIONS..(b + 1) * NUM_ACTIONS];
                if self.greedy {
                    greedy_action(lp)
                } else {
                    sample_action(lp, rng)
                }
            })
            .collect())
    }
}

/// Largest number of episodes stepped together during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Runs `episodes` full episodes per level and averages return and success.
pub fn evaluate_policy<P: Policy>(
    policy: &P,
    levels: &[&LevelParams],
    episodes: usize,
    max_steps: u32,
    seed: u64,
) -> Result<Vec<LevelEval>> {
    let envs = levels
        .iter()
        .map(|l| GridEnv::new((*l).clone(), max_steps))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..levels.len()).flat_map(|l| (0..episodes).map(move |e| (l, e))).collect();
    let mut returns = vec![0.0; levels.len()];
    let mut solved = vec![0.0; levels.len()];
    for (chunk_id, chunk) in jobs.chunks(EVAL_CHUNK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe7, chunk_id as u64]));
        let mut states = Vec::with_capacity(chunk.len());
        let mut obs = Vec::with_capacity(chunk.len());
        for &(l, e) in chunk {
            let (s, o) = envs[l].reset(derive_seed(seed, &[l as u64, e as u64]));
            states.push(s);
            obs.push(o);
        }
        let mut memory = policy.initial(chunk.len());
        let mut active: Vec<usize> = (0..chunk.len()).collect();
        while !active.is_empty() {
            let actions = policy.act(&obs, &mut memory, &mut rng)?;
            let mut still = Vec::with_capacity(active.len());
            for &k in &active {
                let l = chunk[k].0;
                let out = envs[l].step(&states[k], actions[k])?;
                states[k] = out.state;
                obs[k] = out.obs;
                if out.done {
                    returns[l] += out.reward as f64;
                    if out.reward > 0.0 {
                        solved[l] += 1.0;
                    }
                } else {
                    still.push(k);
                }
            }
            // Finished streams still pass through the policy; their actions
            // are ignored.
            active = still;
        }
    }
    let e = episodes.max(1) as f64;
    Ok(returns
        .iter()
        .zip(&solved)
        .map(|(r, s)| LevelEval {
            mean_return: r / e,
            solved_rate: s / e,
        })
        .collect())
}

pub fn evaluate(model: &AgentModel<f32>, levels: &[&LevelParams], episodes: usize, max_steps: u32, seed: u64, greedy: bool) -> Result<Vec<LevelEval>> {
    evaluate_policy(&AgentPolicy { model, greedy }, levels, episodes, max_steps, seed)
}

/// Evaluation-only scores of a level from full sampled episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    /// Mean `|A_t|` over all steps.
    pub value_loss: f64,
    /// Mean `max(A_t, 0)` over all steps.
    pub positive_value_loss: f64,
    pub mean_return: f64,
    /// At least one episode reached the goal.
    pub solved: bool,
}

/// Runs `episodes` sampled episodes per level with the agent and scores each
/// level by the GAE of those episodes. Never touches the weights.
pub fn score_episodes(
    model: &AgentModel<f32>,
    levels: &[&LevelParams],
    episodes: usize,
    max_steps: u32,
    gamma: f64,
    lambda: f64,
    seed: u64,
) -> Result<Vec<EpisodeScore>> {
    if episodes == 0 {
        return Err(Error::Contract("scoring needs at least one episode".into()));
    }
    let envs = levels
        .iter()
        .map(|l| GridEnv::new((*l).clone(), max_steps))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..levels.len()).flat_map(|l| (0..episodes).map(move |e| (l, e))).collect();
    let mut abs_sum = vec![0.0; levels.len()];
    let mut pos_sum = vec![0.0; levels.len()];
    let mut steps = vec![0usize; levels.len()];
    let mut returns = vec![0.0; levels.len()];
    let mut solved = vec![false; levels.len()];
    for (chunk_id, chunk) in jobs.chunks(EVAL_CHUNK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5c, chunk_id as u64]));
        let mut states = Vec::with_capacity(chunk.len());
        let mut obs = Vec::with_capacity(chunk.len());
        for &(l, e) in chunk {
            let (s, o) = envs[l].reset(derive_seed(seed, &[l as u64, e as u64]));
            states.push(s);
            obs.push(o);
        }
        let mut hidden = model.zero_hidden(chunk.len());
        let mut rewards = vec![Vec::new(); chunk.len()];
        let mut values = vec![Vec::new(); chunk.len()];
        let mut active: Vec<usize> = (0..chunk.len()).collect();
        while !active.is_empty() {
            let inf = model.act_step(&obs, &hidden)?;
            hidden = inf.hidden;
            let mut still = Vec::with_capacity(active.len());
            for &k in &active {
                let l = chunk[k].0;
                let lp = &inf.log_probs[k * NUM_ACTIONS..(k + 1) * NUM_ACTIONS];
                let a = sample_action(lp, &mut rng);
                let out = envs[l].step(&states[k], a)?;
                rewards[k].push(out.reward as f64);
                values[k].push(inf.values[k] as f64);
                states[k] = out.state;
                obs[k] = out.obs;
                if out.done {
                    returns[l] += out.reward as f64;
                    solved[l] |= out.reward > 0.0;
                } else {
                    still.push(k);
                }
            }
            active = still;
        }
        for (k, &(l, _)) in chunk.iter().enumerate() {
            let mut dones = vec![false; rewards[k].len()];
            *dones.last_mut().expect("episodes take at least one step") = true;
            let (adv, _) = gae(&rewards[k], &values[k], &dones, 0.0, gamma, lambda);
            abs_sum[l] += adv.iter().map(|a| a.abs()).sum::<f64>();
            pos_sum[l] += adv.iter().map(|a| a.max(0.0)).sum::<f64>();
            steps[l] += adv.len();
        }
    }
    Ok((0..levels.len())
        .map(|l| EpisodeScore {
            value_loss: abs_sum[l] / steps[l] as f64,
            positive_value_loss: pos_sum[l] / steps[l] as f64,
            mean_return: returns[l] / episodes as f64,
            solved: solved[l],
        })
        .collect())
}

/// Random actions over the three movement actions; a baseline for tests.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    type Memory = ();
    fn initial(&self, _batch: usize) {}
    fn reset_row(&self, _m: &mut (), _row: usize) {}
    fn act(&self, obs: &[Observation], _m: &mut (), rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(obs.iter().map(|_| rng.gen_range(0..3)).collect())
    }
}
