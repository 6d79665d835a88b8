//! Level proposal mechanisms: domain randomisation, random local edits and
//! VAE interpolation, plus the per-method defaults of every compared method.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Cell, LevelParams, Tile};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::vae::Vae;

/// Upper bound on the extra tiles a DR level receives.
pub const DR_MAX_TILES: usize = 60;
/// Cell retypes per edit.
pub const EDIT_RETYPES: usize = 3;
/// Attempts before an edit gives up on a parent.
pub const EDIT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Uniform,
    Plr,
    Dr,
    Rplr,
    Accel,
    Iced,
    IcedEl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Uniform,
        Method::Plr,
        Method::Dr,
        Method::Rplr,
        Method::Accel,
        Method::Iced,
        Method::IcedEl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::Plr => "plr",
            Method::Dr => "dr",
            Method::Rplr => "rplr",
            Method::Accel => "accel",
            Method::Iced => "iced",
            Method::IcedEl => "iced-el",
        }
    }

    /// Whether the method ever proposes levels outside the training set.
    pub fn generates(self) -> bool {
        !matches!(self, Method::Uniform | Method::Plr)
    }

    /// Mixed-support sampling with a generative phase.
    pub fn is_iced(self) -> bool {
        matches!(self, Method::Iced | Method::IcedEl)
    }

    /// Levels are trained on from a generator's stream rather than from
    /// `X_train` (the UED baselines).
    pub fn is_ued(self) -> bool {
        matches!(self, Method::Dr | Method::Rplr | Method::Accel)
    }

    /// Probability that an iteration replays buffer levels (with a gradient
    /// update) instead of evaluating fresh proposals.
    pub fn replay_rate(self) -> f64 {
        match self {
            Method::Rplr => 0.5,
            Method::Accel => 0.8,
            Method::Dr => 0.0,
            _ => 1.0,
        }
    }

    /// Capacity for generated levels.
    pub fn buffer_size(self) -> usize {
        match self {
            Method::Rplr | Method::Accel => 4000,
            _ => 512,
        }
    }

    pub fn default_score(self) -> ScoreKind {
        match self {
            Method::Rplr | Method::Accel => ScoreKind::PositiveValueLoss,
            _ => ScoreKind::ValueLoss,
        }
    }

    /// Proposals must have been solved during evaluation to be admitted.
    pub fn requires_solved(self) -> bool {
        self.is_iced()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}, expected one of {}", names.join("|")))
            })
    }
}

/// Level scoring function used for prioritisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Mean absolute GAE.
    ValueLoss,
    /// Mean of `max(A, 0)`.
    PositiveValueLoss,
    /// Summed probe log-probability of the level's identity.
    Mi,
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value-loss" => Ok(ScoreKind::ValueLoss),
            "positive-value-loss" => Ok(ScoreKind::PositiveValueLoss),
            "mi" => Ok(ScoreKind::Mi),
            _ => Err(Error::Config(format!(
                "unknown score {s:?}, expected value-loss|positive-value-loss|mi"
            ))),
        }
    }
}

/// Bordered empty grid with distinct start and goal and `n ~ U{0..=max_tiles}`
/// moss, wall or lava tiles on free interior cells (fewer when the interior
/// runs out of free cells).
pub fn dr_generate(height: usize, width: usize, max_tiles: usize, seed: u64) -> Result<LevelParams> {
    if height < 3 || width < 3 || (height - 2) * (width - 2) < 2 {
        return Err(Error::Config(format!("dr grid {height}x{width} has no room for start and goal")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior: Vec<Cell> = (1..height - 1).flat_map(|r| (1..width - 1).map(move |c| (r, c))).collect();
    let picks = sample(&mut rng, interior.len(), 2);
    let (start, goal) = (interior[picks.index(0)], interior[picks.index(1)]);
    let mut level = LevelParams::empty(height, width, start, goal);
    for r in 0..height {
        for c in 0..width {
            if r == 0 || c == 0 || r == height - 1 || c == width - 1 {
                level.set((r, c), Tile::Wall);
            }
        }
    }
    let free: Vec<Cell> = interior.into_iter().filter(|&c| c != start && c != goal).collect();
    let n = rng.gen_range(0..=max_tiles).min(free.len());
    for i in sample(&mut rng, free.len(), n) {
        let t = [Tile::Moss, Tile::Wall, Tile::Lava][rng.gen_range(0..3)];
        level.set(free[i], t);
    }
    level.validate()?;
    Ok(level)
}

/// Number of extra (non-border, non-empty) tiles of a DR level.
pub fn dr_tile_count(level: &LevelParams) -> usize {
    let (h, w) = (level.height, level.width);
    (1..h - 1)
        .flat_map(|r| (1..w - 1).map(move |c| (r, c)))
        .filter(|&c| level.tile(c) != Tile::Empty)
        .count()
}

/// Three random cell retypes (overwriting a start or goal cell removes that
/// marker), then the missing markers are re-placed uniformly on navigable
/// cells. Fails when no navigable cell is left for them.
pub fn accel_edit(level: &LevelParams, seed: u64) -> Result<LevelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = level.clone();
    let cells = level.height * level.width;
    let mut start = Some(level.start);
    let mut goal = Some(level.goal);
    for _ in 0..EDIT_RETYPES {
        let i = rng.gen_range(0..cells);
        let cell = (i / level.width, i % level.width);
        out.set(cell, Tile::ALL[rng.gen_range(0..Tile::ALL.len())]);
        if start == Some(cell) {
            start = None;
        }
        if goal == Some(cell) {
            goal = None;
        }
    }
    let navigable: Vec<Cell> = (0..cells)
        .map(|i| (i / level.width, i % level.width))
        .filter(|&c| out.tile(c).navigable())
        .collect();
    let place = |taken: Option<Cell>, rng: &mut ChaCha8Rng| -> Result<Cell> {
        let free: Vec<Cell> = navigable.iter().copied().filter(|&c| Some(c) != taken).collect();
        if free.is_empty() {
            return Err(Error::Generation("edit left no navigable cell for start and goal".into()));
        }
        Ok(free[rng.gen_range(0..free.len())])
    };
    let start = match start {
        Some(s) => s,
        None => place(goal, &mut rng)?,
    };
    let goal = match goal {
        Some(g) => g,
        None => place(Some(start), &mut rng)?,
    };
    out.start = start;
    out.goal = goal;
    out.validate()?;
    Ok(out)
}

/// `accel_edit` with fresh sub-seeds until one succeeds.
pub fn accel_edit_retry(level: &LevelParams, seed: u64) -> Result<LevelParams> {
    let mut last = None;
    for a in 0..EDIT_ATTEMPTS as u64 {
        match accel_edit(level, derive_seed(seed, &[a])) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Cells in which two same-sized levels differ (layout or markers).
pub fn cell_diff(a: &LevelParams, b: &LevelParams) -> usize {
    let mut n = a.grid.iter().zip(&b.grid).filter(|(x, y)| x != y).count();
    n += usize::from(a.start != b.start) + usize::from(a.goal != b.goal);
    n
}

/// Positions of the "easy" levels among `scores`: the bottom half by score
/// (at least one), ties broken by position.
pub fn easy_levels(scores: &[f64]) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(scores.len().div_ceil(2));
    order.sort_unstable();
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub level: LevelParams,
    /// Buffer index of the edited parent, for edit-based proposals.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
    /// Candidates dropped because they could not be made valid.
    pub failures: usize,
}

/// Inputs a designer may draw on.
pub struct ProposalContext<'a> {
    pub height: usize,
    pub width: usize,
    pub dr_max_tiles: usize,
    /// Candidate parents for edits, as `(buffer index, level)`.
    pub parents: Vec<(usize, &'a LevelParams)>,
    pub vae: Option<&'a Vae>,
    pub train: Vec<&'a LevelParams>,
    /// VAE interpolation pairs and points per pair.
    pub pairs: usize,
    pub steps: usize,
}

/// `count` proposals (edits and DR) or `pairs * steps` candidates (VAE).
pub fn propose(method: Method, ctx: &ProposalContext<'_>, count: usize, seed: u64) -> Result<ProposalBatch> {
    let mut batch = ProposalBatch::default();
    match method {
        Method::Dr | Method::Rplr => {
            for i in 0..count {
                let level = dr_generate(ctx.height, ctx.width, ctx.dr_max_tiles, derive_seed(seed, &[i as u64]))?;
                batch.proposals.push(Proposal { level, parent: None });
            }
        }
        Method::Accel | Method::IcedEl => {
            if ctx.parents.is_empty() {
                return Err(Error::Contract(format!("{method} edits need at least one parent level")));
            }
            for i in 0..count {
                let (idx, parent) = ctx.parents[i % ctx.parents.len()];
                match accel_edit_retry(parent, derive_seed(seed, &[i as u64])) {
                    Ok(level) => batch.proposals.push(Proposal { level, parent: Some(idx) }),
                    Err(Error::Generation(_)) => batch.failures += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        Method::Iced => {
            let vae = ctx
                .vae
                .ok_or_else(|| Error::Config("iced needs a pretrained vae".into()))?;
            let latents = vae.interpolate_pairs(&ctx.train, ctx.pairs, ctx.steps, derive_seed(seed, &[0]))?;
            for r in vae.generate(&latents, derive_seed(seed, &[1]))? {
                match r {
                    Ok(level) => batch.proposals.push(Proposal { level, parent: None }),
                    Err(Error::Generation(_)) => batch.failures += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        Method::Uniform | Method::Plr => {
            return Err(Error::Config(format!("{method} does not propose levels")));
        }
    }
    Ok(batch)
}
