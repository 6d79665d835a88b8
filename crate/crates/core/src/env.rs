//! Partially observable gridworld.
//!
//! A level is a grid of [`Tile`]s with one start and one goal cell. The agent
//! sees a 5x5 window (two cells to each side, four ahead, its own row
//! included) rotated into its own frame, plus a one-hot heading. Only
//! `left`, `right` and `forward` change the state; the remaining four actions
//! of the seven-action space are inert.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 7;
pub const VIEW_SIZE: usize = 5;
/// Tile one-hot channels plus one goal channel.
pub const VIEW_CHANNELS: usize = 5;
pub const VIEW_LEN: usize = VIEW_CHANNELS * VIEW_SIZE * VIEW_SIZE;
pub const GOAL_CHANNEL: usize = 4;
pub const DEFAULT_MAX_STEPS: u32 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tile {
    Empty = 0,
    Wall = 1,
    Moss = 2,
    Lava = 3,
}

impl Tile {
    pub const ALL: [Tile; 4] = [Tile::Empty, Tile::Wall, Tile::Moss, Tile::Lava];

    pub fn navigable(self) -> bool {
        matches!(self, Tile::Empty | Tile::Moss)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Tile> {
        Tile::ALL.get(code as usize).copied()
    }
}

pub type Cell = (usize, usize);

/// Context vector of one level: layout plus start and goal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LevelRecord", into = "LevelRecord")]
pub struct LevelParams {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub grid: Vec<Tile>,
    pub start: Cell,
    pub goal: Cell,
}

/// On-disk JSON shape: `{height, width, grid: [codes row-major], start: [r,c], goal: [r,c]}`.
#[derive(Serialize, Deserialize)]
struct LevelRecord {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    start: [usize; 2],
    goal: [usize; 2],
}

impl TryFrom<LevelRecord> for LevelParams {
    type Error = Error;

    fn try_from(rec: LevelRecord) -> Result<Self> {
        let grid = rec
            .grid
            .iter()
            .map(|&c| Tile::from_code(c).ok_or_else(|| Error::InvalidLevel(format!("unknown tile code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let level = LevelParams {
            height: rec.height,
            width: rec.width,
            grid,
            start: (rec.start[0], rec.start[1]),
            goal: (rec.goal[0], rec.goal[1]),
        };
        level.validate()?;
        Ok(level)
    }
}

impl From<LevelParams> for LevelRecord {
    fn from(l: LevelParams) -> Self {
        LevelRecord {
            height: l.height,
            width: l.width,
            grid: l.grid.iter().map(|t| t.code()).collect(),
            start: [l.start.0, l.start.1],
            goal: [l.goal.0, l.goal.1],
        }
    }
}

impl LevelParams {
    /// All-empty grid with the given markers; not validated.
    pub fn empty(height: usize, width: usize, start: Cell, goal: Cell) -> Self {
        LevelParams {
            height,
            width,
            grid: vec![Tile::Empty; height * width],
            start,
            goal,
        }
    }

    /// Parses an ASCII picture: `.` empty, `#` wall, `m` moss, `l` lava,
    /// `S` start and `G` goal (both on empty floor).
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let mut grid = Vec::with_capacity(height * width);
        let mut start = None;
        let mut goal = None;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidLevel(format!("row {r} has ragged width")));
            }
            for (c, ch) in row.chars().enumerate() {
                let tile = match ch {
                    '.' => Tile::Empty,
                    '#' => Tile::Wall,
                    'm' => Tile::Moss,
                    'l' => Tile::Lava,
                    'S' => {
                        start = Some((r, c));
                        Tile::Empty
                    }
                    'G' => {
                        goal = Some((r, c));
                        Tile::Empty
                    }
                    other => return Err(Error::InvalidLevel(format!("unknown glyph {other:?}"))),
                };
                grid.push(tile);
            }
        }
        let level = LevelParams {
            height,
            width,
            grid,
            start: start.ok_or_else(|| Error::InvalidLevel("no start marker".into()))?,
            goal: goal.ok_or_else(|| Error::InvalidLevel("no goal marker".into()))?,
        };
        level.validate()?;
        Ok(level)
    }

    #[inline]
    pub fn idx(&self, cell: Cell) -> usize {
        cell.0 * self.width + cell.1
    }

    #[inline]
    pub fn tile(&self, cell: Cell) -> Tile {
        self.grid[self.idx(cell)]
    }

    pub fn set(&mut self, cell: Cell, tile: Tile) {
        let i = self.idx(cell);
        self.grid[i] = tile;
    }

    pub fn in_bounds(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| (r, c)))
    }

    pub fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        Heading::ALL.iter().filter_map(move |h| {
            let (dr, dc) = h.delta();
            let (r, c) = (cell.0 as isize + dr, cell.1 as isize + dc);
            self.in_bounds(r, c).then(|| (r as usize, c as usize))
        })
    }

    pub fn count(&self, tile: Tile) -> usize {
        self.grid.iter().filter(|&&t| t == tile).count()
    }

    /// Checks the structural invariants. The error message names the first one violated.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidLevel("height and width must be positive".into()));
        }
        if self.grid.len() != self.height * self.width {
            return Err(Error::InvalidLevel(format!(
                "grid has {} cells, expected {}x{}",
                self.grid.len(),
                self.height,
                self.width
            )));
        }
        for (name, cell) in [("start", self.start), ("goal", self.goal)] {
            if cell.0 >= self.height || cell.1 >= self.width {
                return Err(Error::InvalidLevel(format!("{name} {cell:?} out of bounds")));
            }
            if !self.tile(cell).navigable() {
                return Err(Error::InvalidLevel(format!("{name} {cell:?} is not navigable")));
            }
        }
        if self.start == self.goal {
            return Err(Error::InvalidLevel("start equals goal".into()));
        }
        Ok(())
    }
}

impl fmt::Display for LevelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if (r, c) == self.start {
                    'S'
                } else if (r, c) == self.goal {
                    'G'
                } else {
                    match self.tile((r, c)) {
                        Tile::Empty => '.',
                        Tile::Wall => '#',
                        Tile::Moss => 'm',
                        Tile::Lava => 'l',
                    }
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// BFS distances over navigable cells from `from`; `None` for unreachable or
/// non-navigable cells.
pub fn bfs_distances(level: &LevelParams, from: Cell) -> Vec<Option<u32>> {
    let mut dist = vec![None; level.grid.len()];
    if !level.tile(from).navigable() {
        return dist;
    }
    dist[level.idx(from)] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(cell) = queue.pop_front() {
        let d = dist[level.idx(cell)].unwrap();
        for n in level.neighbors(cell) {
            let i = level.idx(n);
            if dist[i].is_none() && level.grid[i].navigable() {
                dist[i] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

pub fn shortest_path_len(level: &LevelParams) -> Option<u32> {
    bfs_distances(level, level.start)[level.idx(level.goal)]
}

/// True iff a navigable path joins start and goal.
pub fn solvable(level: &LevelParams) -> bool {
    shortest_path_len(level).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }

    pub fn left(self) -> Heading {
        Heading::ALL[(self as usize + 3) % 4]
    }

    pub fn right(self) -> Heading {
        Heading::ALL[(self as usize + 1) % 4]
    }

    pub fn one_hot(self) -> [f32; 4] {
        let mut v = [0.0; 4];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl Action {
    pub fn from_index(i: usize) -> Option<Action> {
        use Action::*;
        [Left, Right, Forward, Pickup, Drop, Toggle, Done].get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub pos: Cell,
    pub heading: Heading,
    pub t: u32,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Channel-major `[channel][row][col]`; row 0 is farthest ahead, the agent
    /// sits at row 4, column 2.
    pub view: [f32; VIEW_LEN],
    pub heading: [f32; 4],
}

impl Observation {
    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.view[channel * VIEW_SIZE * VIEW_SIZE + row * VIEW_SIZE + col]
    }

    /// Tile whose channel is hot at a window cell.
    pub fn tile_at(&self, row: usize, col: usize) -> Tile {
        Tile::ALL
            .into_iter()
            .find(|t| self.at(*t as usize, row, col) == 1.0)
            .expect("one-hot window cell")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub obs: Observation,
    pub reward: f32,
    pub done: bool,
}

/// Simulator for one level. Pure: `reset` and `step` never mutate `self`.
#[derive(Debug, Clone)]
pub struct GridEnv {
    level: LevelParams,
    max_steps: u32,
}

impl GridEnv {
    pub fn new(level: LevelParams, max_steps: u32) -> Result<Self> {
        level.validate()?;
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(GridEnv { level, max_steps })
    }

    pub fn level(&self) -> &LevelParams {
        &self.level
    }

    pub fn max_steps(&self) -> u32 {
        self.max_steps
    }

    /// Agent at the start cell facing a heading drawn from `seed`.
    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heading = Heading::ALL[rng.gen_range(0..4)];
        let state = EnvState {
            pos: self.level.start,
            heading,
            t: 0,
            terminal: false,
        };
        (state, render_observation(&state, &self.level))
    }

    pub fn goal_reward(&self, t: u32) -> f32 {
        1.0 - 0.9 * (t as f32 / self.max_steps as f32)
    }

    pub fn step(&self, state: &EnvState, action: usize) -> Result<StepOutcome> {
        if state.terminal {
            return Err(Error::Contract("step called on a terminal state".into()));
        }
        let action = Action::from_index(action)
            .ok_or_else(|| Error::Contract(format!("action {action} outside 0..{NUM_ACTIONS}")))?;
        let mut next = *state;
        next.t += 1;
        let mut reward = 0.0;
        let mut done = false;
        match action {
            Action::Left => next.heading = state.heading.left(),
            Action::Right => next.heading = state.heading.right(),
            Action::Forward => {
                let (dr, dc) = state.heading.delta();
                let (r, c) = (state.pos.0 as isize + dr, state.pos.1 as isize + dc);
                if self.level.in_bounds(r, c) {
                    let target = (r as usize, c as usize);
                    match self.level.tile(target) {
                        Tile::Lava => done = true,
                        t if t.navigable() => {
                            next.pos = target;
                            if target == self.level.goal {
                                done = true;
                                reward = self.goal_reward(next.t);
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
        if next.t >= self.max_steps {
            done = true;
        }
        next.terminal = done;
        Ok(StepOutcome {
            state: next,
            obs: render_observation(&next, &self.level),
            reward,
            done,
        })
    }
}

/// Agent-centric window; out-of-grid cells read as walls.
pub fn render_observation(state: &EnvState, level: &LevelParams) -> Observation {
    let mut view = [0.0f32; VIEW_LEN];
    let (fr, fc) = state.heading.delta();
    let (rr, rc) = state.heading.right().delta();
    let plane = VIEW_SIZE * VIEW_SIZE;
    for ahead in 0..VIEW_SIZE as isize {
        for lateral in -2isize..=2 {
            let r = state.pos.0 as isize + ahead * fr + lateral * rr;
            let c = state.pos.1 as isize + ahead * fc + lateral * rc;
            let row = VIEW_SIZE - 1 - ahead as usize;
            let col = (lateral + 2) as usize;
            let offset = row * VIEW_SIZE + col;
            if level.in_bounds(r, c) {
                let cell = (r as usize, c as usize);
                view[level.tile(cell) as usize * plane + offset] = 1.0;
                if cell == level.goal {
                    view[GOAL_CHANNEL * plane + offset] = 1.0;
                }
            } else {
                view[Tile::Wall as usize * plane + offset] = 1.0;
            }
        }
    }
    Observation {
        view,
        heading: state.heading.one_hot(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> LevelParams {
        LevelParams::from_ascii(&["#####", "#S.G#", "#####"]).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_starts_at_start() {
        let level = LevelParams::from_ascii(&["#####", "#S..#", "#..G#", "#####"]).unwrap();
        let env = GridEnv::new(level, 250).unwrap();
        let (a, oa) = env.reset(42);
        let (b, ob) = env.reset(42);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        assert_eq!(a.pos, (1, 1));
        assert_eq!(a.t, 0);
    }

    #[test]
    fn seeds_cover_all_headings() {
        let env = GridEnv::new(corridor(), 250).unwrap();
        let mut seen = std::collections::BTreeMap::new();
        for seed in 0..64u64 {
            let (s, o) = env.reset(seed);
            seen.entry(s.heading as usize).or_insert(o.heading);
            if seen.len() == 4 {
                break;
            }
        }
        assert_eq!(seen.len(), 4);
        let hots: std::collections::BTreeSet<_> =
            seen.values().map(|h| h.iter().position(|&x| x == 1.0).unwrap()).collect();
        assert_eq!(hots.len(), 4);
    }

    #[test]
    fn invalid_levels_are_rejected_by_name() {
        let mut level = corridor();
        level.goal = level.start;
        let err = GridEnv::new(level, 10).unwrap_err().to_string();
        assert!(err.contains("start equals goal"), "{err}");

        let mut level = corridor();
        level.set(level.goal, Tile::Wall);
        let err = level.validate().unwrap_err().to_string();
        assert!(err.contains("goal") && err.contains("not navigable"), "{err}");
    }

    fn facing(env: &GridEnv, heading: Heading) -> EnvState {
        EnvState {
            pos: env.level().start,
            heading,
            t: 0,
            terminal: false,
        }
    }

    #[test]
    fn forward_into_wall_is_blocked() {
        let env = GridEnv::new(corridor(), 250).unwrap();
        let s = facing(&env, Heading::North);
        let out = env.step(&s, Action::Forward as usize).unwrap();
        assert_eq!(out.state.pos, s.pos);
        assert_eq!(out.reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn lava_terminates_without_reward() {
        let level = LevelParams::from_ascii(&["#####", "#Sl.#", "#..G#", "#####"]).unwrap();
        let env = GridEnv::new(level, 250).unwrap();
        let out = env.step(&facing(&env, Heading::East), Action::Forward as usize).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn goal_reward_follows_step_count() {
        let env = GridEnv::new(corridor(), 250).unwrap();
        assert!((env.goal_reward(10) - 0.964).abs() < 1e-6);
        let mut s = facing(&env, Heading::East);
        s.t = 8;
        let s = env.step(&s, Action::Forward as usize).unwrap().state;
        let out = env.step(&s, Action::Forward as usize).unwrap();
        assert!(out.done);
        assert_eq!(out.state.t, 10);
        assert!((out.reward - 0.964).abs() < 1e-6);
    }

    #[test]
    fn inert_actions_and_terminal_contract() {
        let env = GridEnv::new(corridor(), 3).unwrap();
        let mut s = facing(&env, Heading::East);
        for a in 3..7 {
            let out = env.step(&s, a).unwrap();
            assert_eq!((out.state.pos, out.state.heading), (s.pos, s.heading));
            s.t = 0;
        }
        let mut s = facing(&env, Heading::North);
        for _ in 0..2 {
            s = env.step(&s, Action::Done as usize).unwrap().state;
        }
        let out = env.step(&s, Action::Done as usize).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
        assert!(matches!(env.step(&out.state, 0), Err(Error::Contract(_))));
        assert!(env.step(&facing(&env, Heading::North), 7).is_err());
    }

    #[test]
    fn window_in_open_room_pads_with_walls() {
        // 5x5 all-empty room, agent in the centre facing north: the two rows
        // farthest ahead lie outside the grid.
        let mut level = LevelParams::empty(5, 5, (2, 2), (0, 0));
        level.validate().unwrap();
        level.goal = (4, 4);
        let state = EnvState {
            pos: (2, 2),
            heading: Heading::North,
            t: 0,
            terminal: false,
        };
        let obs = render_observation(&state, &level);
        for row in 0..5 {
            for col in 0..5 {
                let expected = if row < 2 { Tile::Wall } else { Tile::Empty };
                assert_eq!(obs.tile_at(row, col), expected, "row {row} col {col}");
                assert_eq!(obs.at(GOAL_CHANNEL, row, col), 0.0);
            }
        }
    }

    #[test]
    fn goal_channel_marks_visible_goal() {
        let env = GridEnv::new(corridor(), 250).unwrap();
        let obs = render_observation(&facing(&env, Heading::East), env.level());
        assert_eq!(obs.at(GOAL_CHANNEL, 2, 2), 1.0);
        assert_eq!(obs.tile_at(3, 2), Tile::Empty);
        assert_eq!(obs.tile_at(4, 1), Tile::Wall);
    }

    #[test]
    fn rotational_symmetry_gives_same_view() {
        // Centre of a symmetric plus-shaped room.
        let level = LevelParams::from_ascii(&[
            "#########",
            "####.####",
            "####.####",
            "####.####",
            "#...S...#",
            "####.####",
            "####.####",
            "####G####",
            "#########",
        ])
        .unwrap();
        let base = EnvState {
            pos: (4, 4),
            heading: Heading::East,
            t: 0,
            terminal: false,
        };
        let rotated = EnvState {
            heading: Heading::North,
            ..base
        };
        let a = render_observation(&base, &level);
        let b = render_observation(&rotated, &level);
        assert_eq!(a.view, b.view);
        assert_ne!(a.heading, b.heading);
    }

    #[test]
    fn window_never_exceeds_reach() {
        // A far goal must stay invisible until within 4 ahead / 2 lateral.
        let level = LevelParams::from_ascii(&["S.....G"]).unwrap();
        let mut state = EnvState {
            pos: (0, 0),
            heading: Heading::East,
            t: 0,
            terminal: false,
        };
        let visible = |s: &EnvState| {
            let o = render_observation(s, &level);
            (0..25).any(|i| o.view[GOAL_CHANNEL * 25 + i] == 1.0)
        };
        assert!(!visible(&state));
        state.pos = (0, 1);
        assert!(!visible(&state));
        state.pos = (0, 2);
        assert!(visible(&state));
    }

    #[test]
    fn solvable_cases() {
        let walled = LevelParams::from_ascii(&["S.#.", "..#G"]).unwrap();
        assert!(!solvable(&walled));
        let adjacent = LevelParams::from_ascii(&["SG"]).unwrap();
        assert!(solvable(&adjacent));
    }

    #[test]
    fn json_roundtrip_and_rejection() {
        let level = LevelParams::from_ascii(&["#m#", "S.G", "#l#"]).unwrap();
        let json = serde_json::to_string(&level).unwrap();
        assert_eq!(
            json,
            r#"{"height":3,"width":3,"grid":[1,2,1,0,0,0,1,3,1],"start":[1,0],"goal":[1,2]}"#
        );
        let back: LevelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, level);
        let bad = r#"{"height":1,"width":2,"grid":[0,0],"start":[0,0],"goal":[0,0]}"#;
        assert!(serde_json::from_str::<LevelParams>(bad).is_err());
    }
}
