//! Structured level generation.
//!
//! Layouts come from a simple-tiled wave function collapse over a labelled
//! base pattern: every template character is a label with a fixed tile
//! (walls for `#` and uppercase letters, floor otherwise), and the adjacency
//! rules are exactly the label pairs that touch in the template. The layout is
//! then reduced to its largest navigable component, the goal is dropped
//! uniformly and the start placed at the median goal distance, and finally moss
//! and lava are sampled as functions of distance to the goal.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{bfs_distances, solvable, Cell, LevelParams, Tile};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Directions in rule tables: up, right, down, left.
const DIRS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
pub const MAX_LABELS: usize = 64;
pub const WFC_RESTARTS: usize = 100;

#[derive(Debug, Clone)]
pub struct BasePattern {
    pub name: String,
    /// Tile of each label.
    pub label_tiles: Vec<Tile>,
    /// Row-major label template.
    pub template: Vec<Vec<usize>>,
    /// `rules[dir][label]`: bitmask of labels allowed next to `label` in `dir`.
    rules: [Vec<u64>; 4],
    weights: Vec<f64>,
}

impl BasePattern {
    pub fn new(name: &str, label_tiles: Vec<Tile>, template: Vec<Vec<usize>>) -> Result<Self> {
        let n = label_tiles.len();
        if n == 0 || n > MAX_LABELS {
            return Err(Error::Config(format!("pattern {name}: {n} labels (1..={MAX_LABELS} allowed)")));
        }
        let h = template.len();
        let w = template.first().map_or(0, Vec::len);
        if h == 0 || w == 0 || template.iter().any(|r| r.len() != w) {
            return Err(Error::Config(format!("pattern {name}: template must be a non-empty rectangle")));
        }
        let mut rules: [Vec<u64>; 4] = std::array::from_fn(|_| vec![0u64; n]);
        let mut weights = vec![0.0; n];
        for r in 0..h {
            for c in 0..w {
                let a = template[r][c];
                if a >= n {
                    return Err(Error::Config(format!("pattern {name}: label {a} has no tile")));
                }
                weights[a] += 1.0;
                for (d, (dr, dc)) in DIRS.iter().enumerate() {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        rules[d][a] |= 1 << template[nr as usize][nc as usize];
                    }
                }
            }
        }
        if let Some(l) = (0..n).find(|&l| weights[l] == 0.0) {
            return Err(Error::Config(format!("pattern {name}: label {l} never appears")));
        }
        Ok(BasePattern {
            name: name.to_string(),
            label_tiles,
            template,
            rules,
            weights,
        })
    }

    /// Builds a pattern from ASCII; each distinct character is one label.
    pub fn from_ascii(name: &str, rows: &[&str]) -> Result<Self> {
        let mut chars: Vec<char> = Vec::new();
        let mut template = Vec::new();
        for row in rows {
            let mut out = Vec::new();
            for ch in row.chars() {
                let id = match chars.iter().position(|&c| c == ch) {
                    Some(i) => i,
                    None => {
                        chars.push(ch);
                        chars.len() - 1
                    }
                };
                out.push(id);
            }
            template.push(out);
        }
        let tiles = chars
            .iter()
            .map(|&c| if c == '#' || c.is_ascii_uppercase() { Tile::Wall } else { Tile::Empty })
            .collect();
        BasePattern::new(name, tiles, template)
    }

    /// Room lattice: `cell_h x cell_w` rooms separated by one-cell walls with
    /// pillars at the crossings. Each wall-segment position has an open and a
    /// closed label; the template samples them with `p_open` from a fixed seed.
    pub fn lattice(name: &str, cell_h: usize, cell_w: usize, p_open: f64, seed: u64) -> Result<Self> {
        let (ph, pw) = (cell_h + 1, cell_w + 1);
        let mut tiles = vec![Tile::Wall]; // pillar
        let label = |tile: Tile, tiles: &mut Vec<Tile>| {
            tiles.push(tile);
            tiles.len() - 1
        };
        // Horizontal segment position j: (open, closed).
        let hseg: Vec<(usize, usize)> = (0..cell_w)
            .map(|_| (label(Tile::Empty, &mut tiles), label(Tile::Wall, &mut tiles)))
            .collect();
        let vseg: Vec<(usize, usize)> = (0..cell_h)
            .map(|_| (label(Tile::Empty, &mut tiles), label(Tile::Wall, &mut tiles)))
            .collect();
        let interior: Vec<Vec<usize>> = (0..cell_h)
            .map(|_| (0..cell_w).map(|_| label(Tile::Empty, &mut tiles)).collect())
            .collect();
        let periods = 4;
        let (h, w) = (ph * periods + 1, pw * periods + 1);
        let mut rng = rng_for(seed, &[]);
        let mut template = vec![vec![0usize; w]; h];
        // Open/closed decision per segment position, so variants mix along a segment.
        for (r, row) in template.iter_mut().enumerate() {
            for (c, slot) in row.iter_mut().enumerate() {
                let (i, j) = (r % ph, c % pw);
                *slot = match (i, j) {
                    (0, 0) => 0,
                    (0, j) => pick(hseg[j - 1], rng.gen_bool(p_open)),
                    (i, 0) => pick(vseg[i - 1], rng.gen_bool(p_open)),
                    (i, j) => interior[i - 1][j - 1],
                };
            }
        }
        // Guarantee every open/closed variant occurs at least once.
        for (k, &(open, closed)) in hseg.iter().enumerate() {
            template[0][k + 1] = open;
            template[ph][k + 1] = closed;
        }
        for (k, &(open, closed)) in vseg.iter().enumerate() {
            template[k + 1][0] = open;
            template[k + 1][pw] = closed;
        }
        BasePattern::new(name, tiles, template)
    }

    pub fn num_labels(&self) -> usize {
        self.label_tiles.len()
    }

    pub fn template_size(&self) -> (usize, usize) {
        (self.template.len(), self.template[0].len())
    }

    /// Whether `b` may sit next to `a` in direction `dir` (0 up, 1 right, 2 down, 3 left).
    pub fn allows(&self, a: usize, dir: usize, b: usize) -> bool {
        self.rules[dir][a] >> b & 1 == 1
    }

    /// Checks every adjacent pair of a label grid against the rules.
    pub fn validate_layout(&self, labels: &WfcLayout) -> bool {
        let (h, w) = (labels.height, labels.width);
        (0..h).all(|r| {
            (0..w).all(|c| {
                let a = labels.labels[r * w + c];
                (c + 1 >= w || self.allows(a, 1, labels.labels[r * w + c + 1]))
                    && (r + 1 >= h || self.allows(a, 2, labels.labels[(r + 1) * w + c]))
            })
        })
    }
}

fn pick((open, closed): (usize, usize), is_open: bool) -> usize {
    if is_open {
        open
    } else {
        closed
    }
}

/// Four patterns used for training sets.
pub fn train_patterns() -> Vec<BasePattern> {
    vec![
        BasePattern::lattice("maze", 1, 1, 0.5, 11).unwrap(),
        BasePattern::lattice("rooms", 2, 2, 0.45, 12).unwrap(),
        BasePattern::lattice("halls", 1, 3, 0.5, 13).unwrap(),
        BasePattern::from_ascii(
            "caves",
            &[
                "##....##.",
                "#..bb..#.",
                "..bbbb...",
                "..bbb..##",
                "#......##",
                "##..#....",
                "...##..b.",
                "..##..bb.",
                "........#",
            ],
        )
        .unwrap(),
    ]
}

/// Fourteen patterns disjoint from [`train_patterns`], used for edge-case sets.
pub fn extra_patterns() -> Vec<BasePattern> {
    let lattices = [
        ("wide-rooms", 2, 3, 0.5, 21),
        ("tall-rooms", 3, 2, 0.5, 22),
        ("galleries", 3, 1, 0.5, 23),
        ("big-rooms", 3, 3, 0.4, 24),
        ("sparse-maze", 1, 1, 0.35, 25),
        ("open-maze", 1, 1, 0.7, 26),
        ("cells", 2, 1, 0.5, 27),
        ("bunkers", 1, 2, 0.4, 28),
    ];
    let mut out: Vec<BasePattern> = lattices
        .iter()
        .map(|&(n, ch, cw, p, s)| BasePattern::lattice(n, ch, cw, p, s).unwrap())
        .collect();
    let ascii: [(&str, &[&str]); 6] = [
        ("pillars", &["......", ".#..#.", "......", "......", ".#..#.", "......"]),
        ("stripes", &["......", "###.##", "......", "#.####", "......", "##.###"]),
        ("columns", &[".#.#.#", ".#...#", "...#.#", ".#.#..", ".#.#.#", "...#.#"]),
        ("crosses", &["...#...", "...#...", ".#####.", "...#...", "...#...", ".......", "......."]),
        ("rubble", &["..#...", "#...#.", "..#...", ".#..#.", "...#..", "#....#"]),
        (
            "burrows",
            &["AA.aa.AA", "A..aa..A", "..AAAA..", ".aA..Aa.", ".aA..Aa.", "..AAAA..", "A..aa..A", "AA.aa.AA"],
        ),
    ];
    out.extend(ascii.iter().map(|(n, rows)| BasePattern::from_ascii(n, rows).unwrap()));
    out
}

pub fn all_patterns() -> Vec<BasePattern> {
    let mut p = train_patterns();
    p.extend(extra_patterns());
    p
}

pub fn pattern_by_name(name: &str) -> Option<BasePattern> {
    all_patterns().into_iter().find(|p| p.name == name)
}

/// Collapsed label grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WfcLayout {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl WfcLayout {
    pub fn tiles(&self, pattern: &BasePattern) -> Vec<Tile> {
        self.labels.iter().map(|&l| pattern.label_tiles[l]).collect()
    }
}

struct Wave<'a> {
    pattern: &'a BasePattern,
    h: usize,
    w: usize,
    cells: Vec<u64>,
    entropy: Vec<f64>,
}

impl<'a> Wave<'a> {
    fn new(pattern: &'a BasePattern, h: usize, w: usize) -> Self {
        let full = if pattern.num_labels() == 64 { u64::MAX } else { (1u64 << pattern.num_labels()) - 1 };
        let mut wave = Wave {
            pattern,
            h,
            w,
            cells: vec![full; h * w],
            entropy: vec![0.0; h * w],
        };
        let e = wave.cell_entropy(full);
        wave.entropy.fill(e);
        wave
    }

    fn cell_entropy(&self, mask: u64) -> f64 {
        let (mut sum, mut sum_wlogw) = (0.0, 0.0);
        let mut m = mask;
        while m != 0 {
            let l = m.trailing_zeros() as usize;
            m &= m - 1;
            let w = self.pattern.weights[l];
            sum += w;
            sum_wlogw += w * w.ln();
        }
        sum.ln() - sum_wlogw / sum
    }

    /// Lowest-entropy undecided cell, ties broken by `noise`.
    fn pick_cell(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        let mut best = None;
        let mut best_e = f64::INFINITY;
        for (i, &mask) in self.cells.iter().enumerate() {
            if mask.count_ones() > 1 {
                let e = self.entropy[i] + rng.gen::<f64>() * 1e-6;
                if e < best_e {
                    best_e = e;
                    best = Some(i);
                }
            }
        }
        best
    }

    fn collapse(&mut self, i: usize, rng: &mut ChaCha8Rng) {
        let mask = self.cells[i];
        let total: f64 = bits(mask).map(|l| self.pattern.weights[l]).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = bits(mask).last().unwrap();
        for l in bits(mask) {
            u -= self.pattern.weights[l];
            if u < 0.0 {
                chosen = l;
                break;
            }
        }
        self.cells[i] = 1 << chosen;
        self.entropy[i] = 0.0;
    }

    /// Arc-consistency propagation from `start`. False on contradiction.
    fn propagate(&mut self, start: usize) -> bool {
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (r, c) = (i / self.w, i % self.w);
            let mask = self.cells[i];
            for (d, (dr, dc)) in DIRS.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= self.h || nc as usize >= self.w {
                    continue;
                }
                let j = nr as usize * self.w + nc as usize;
                let allowed = bits(mask).fold(0u64, |acc, l| acc | self.pattern.rules[d][l]);
                let next = self.cells[j] & allowed;
                if next == 0 {
                    return false;
                }
                if next != self.cells[j] {
                    self.cells[j] = next;
                    self.entropy[j] = if next.count_ones() > 1 { self.cell_entropy(next) } else { 0.0 };
                    stack.push(j);
                }
            }
        }
        true
    }
}

fn bits(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        (mask != 0).then(|| {
            let l = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            l
        })
    })
}

/// Collapses a `height x width` label grid honouring the pattern's rules.
/// Contradictions restart the collapse, at most [`WFC_RESTARTS`] times.
pub fn wfc_collapse(pattern: &BasePattern, height: usize, width: usize, seed: u64) -> Result<WfcLayout> {
    if height == 0 || width == 0 {
        return Err(Error::Generation("empty output size".into()));
    }
    let mut rng = rng_for(seed, &[0x3fc]);
    'attempt: for _ in 0..WFC_RESTARTS {
        let mut wave = Wave::new(pattern, height, width);
        while let Some(i) = wave.pick_cell(&mut rng) {
            wave.collapse(i, &mut rng);
            if !wave.propagate(i) {
                continue 'attempt;
            }
        }
        return Ok(WfcLayout {
            height,
            width,
            labels: wave.cells.iter().map(|m| m.trailing_zeros() as usize).collect(),
        });
    }
    Err(Error::Generation(format!(
        "pattern {} contradicted {WFC_RESTARTS} times at {height}x{width}",
        pattern.name
    )))
}

/// Connected components (4-neighbour) of navigable cells; returns one
/// component id per cell (`usize::MAX` for non-navigable) and component sizes.
pub fn navigable_components(tiles: &[Tile], height: usize, width: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; tiles.len()];
    let mut sizes = Vec::new();
    for s in 0..tiles.len() {
        if !tiles[s].navigable() || comp[s] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[s] = id;
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / width, i % width);
            for (dr, dc) in DIRS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= height || nc as usize >= width {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if tiles[j].navigable() && comp[j] == usize::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps the largest navigable component (first in row-major order on ties)
/// and walls off everything else.
pub fn finalize_layout(tiles: &[Tile], height: usize, width: usize) -> Result<Vec<Tile>> {
    let (comp, sizes) = navigable_components(tiles, height, width);
    let best = (0..sizes.len())
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Generation("layout has no navigable cell".into()))?;
    Ok(tiles
        .iter()
        .zip(&comp)
        .map(|(&t, &k)| if t.navigable() && k != best { Tile::Wall } else { t })
        .collect())
}

/// Goal uniform over navigable cells; start uniform among the non-goal cells
/// whose goal distance equals the lower median of all non-goal distances.
pub fn place_start_goal(tiles: &[Tile], height: usize, width: usize, seed: u64) -> Result<(Cell, Cell)> {
    let nav: Vec<Cell> = (0..tiles.len())
        .filter(|&i| tiles[i].navigable())
        .map(|i| (i / width, i % width))
        .collect();
    if nav.len() < 2 {
        return Err(Error::Generation("component has fewer than 2 cells".into()));
    }
    let mut rng = rng_for(seed, &[0x5a]);
    let goal = nav[rng.gen_range(0..nav.len())];
    let probe = LevelParams {
        height,
        width,
        grid: tiles.to_vec(),
        start: goal,
        goal,
    };
    let dist = bfs_distances(&probe, goal);
    let mut reach: Vec<(Cell, u32)> = nav
        .iter()
        .filter(|&&c| c != goal)
        .filter_map(|&c| dist[c.0 * width + c.1].map(|d| (c, d)))
        .collect();
    if reach.is_empty() {
        return Err(Error::Generation("goal is isolated".into()));
    }
    let mut ds: Vec<u32> = reach.iter().map(|&(_, d)| d).collect();
    ds.sort_unstable();
    let median = ds[(ds.len() - 1) / 2];
    reach.retain(|&(_, d)| d == median);
    let start = reach[rng.gen_range(0..reach.len())].0;
    Ok((start, goal))
}

/// Goal distance of every cell. Navigable cells use the shortest path; other
/// cells take the closest reachable navigable cell (Manhattan), preferring the
/// smallest goal distance on ties, plus the offset to it. `None` only when
/// no navigable cell can reach the goal.
pub fn goal_distances(level: &LevelParams) -> Vec<Option<u32>> {
    let nav = bfs_distances(level, level.goal);
    let (h, w) = (level.height, level.width);
    // Layered multi-source BFS over the full grid: layer = offset, key = goal distance.
    let mut best: Vec<Option<(u32, u32)>> = nav.iter().map(|d| d.map(|d| (0, d))).collect();
    let mut frontier: Vec<usize> = (0..best.len()).filter(|&i| best[i].is_some()).collect();
    let mut offset = 0;
    while !frontier.is_empty() {
        offset += 1;
        let mut next: Vec<usize> = Vec::new();
        for &i in &frontier {
            let gd = best[i].unwrap().1;
            let (r, c) = (i / w, i % w);
            for (dr, dc) in DIRS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                match best[j] {
                    None => {
                        best[j] = Some((offset, gd));
                        next.push(j);
                    }
                    Some((o, g)) if o == offset && gd < g => best[j] = Some((offset, gd)),
                    _ => {}
                }
            }
        }
        frontier = next;
    }
    best.iter().map(|b| b.map(|(o, g)| o + g)).collect()
}

/// Knobs for the moss/lava context distribution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    /// Moss probability on a navigable cell at mid distance.
    pub moss_density: f64,
    /// Lava probability on a wall cell at mid distance.
    pub lava_density: f64,
    /// Logistic slope over normalised goal distance.
    pub moss_slope: f64,
    pub lava_slope: f64,
    /// Moss is densest near the goal when true; otherwise densest far from it.
    pub moss_near_goal: bool,
    /// Lava is densest far from the goal when true.
    pub lava_far_from_goal: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            moss_density: 0.3,
            lava_density: 0.15,
            moss_slope: 6.0,
            lava_slope: 6.0,
            moss_near_goal: true,
            lava_far_from_goal: true,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Probability of placing a context tile at normalised distance `dnorm`.
/// Equals `density` at `dnorm = 0.5`; `increasing` flips the slope sign.
pub fn context_probability(density: f64, slope: f64, dnorm: f64, increasing: bool) -> f64 {
    let x = if increasing { dnorm - 0.5 } else { 0.5 - dnorm };
    (2.0 * density * logistic(slope * x)).clamp(0.0, 1.0)
}

/// Places moss over navigable cells (start and goal excluded) and lava over
/// non-navigable cells. Navigability is unchanged.
pub fn sample_context_tiles(
    tiles: &[Tile],
    height: usize,
    width: usize,
    start: Cell,
    goal: Cell,
    cfg: &ContextConfig,
    seed: u64,
) -> Result<LevelParams> {
    let mut level = LevelParams {
        height,
        width,
        grid: tiles.to_vec(),
        start,
        goal,
    };
    level.validate()?;
    let dist = goal_distances(&level);
    let dmax = dist.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut rng = rng_for(seed, &[0xc0]);
    for i in 0..level.grid.len() {
        let cell = (i / width, i % width);
        let Some(d) = dist[i] else { continue };
        let dnorm = d as f64 / dmax;
        let u: f64 = rng.gen();
        if level.grid[i].navigable() {
            if cell == start || cell == goal {
                continue;
            }
            if u < context_probability(cfg.moss_density, cfg.moss_slope, dnorm, !cfg.moss_near_goal) {
                level.grid[i] = Tile::Moss;
            }
        } else if u < context_probability(cfg.lava_density, cfg.lava_slope, dnorm, cfg.lava_far_from_goal) {
            level.grid[i] = Tile::Lava;
        }
    }
    Ok(level)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Pattern names; dataset levels are split evenly across them.
    pub patterns: Vec<String>,
    pub context: ContextConfig,
    /// Minimum share of grid cells in the kept component.
    pub min_component_fraction: f64,
    /// Abort when more than this fraction of draws fail (after 32 draws).
    pub max_failure_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 15,
            width: 15,
            patterns: train_patterns().into_iter().map(|p| p.name).collect(),
            context: ContextConfig::default(),
            min_component_fraction: 0.2,
            max_failure_rate: 0.9,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.context;
        for (k, v) in [("moss_density", c.moss_density), ("lava_density", c.lava_density)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} outside [0,1]")));
            }
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("patterns must not be empty".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config("grid must be at least 2x2".into()));
        }
        Ok(())
    }

    pub fn resolve_patterns(&self) -> Result<Vec<BasePattern>> {
        self.patterns
            .iter()
            .map(|n| pattern_by_name(n).ok_or_else(|| Error::Config(format!("unknown pattern {n:?}"))))
            .collect()
    }
}

/// A level with the WFC labels it came from.
#[derive(Debug, Clone)]
pub struct GeneratedLevel {
    pub pattern: String,
    pub layout: WfcLayout,
    pub level: LevelParams,
}

/// One full pipeline draw: collapse, finalize, place markers, add context.
pub fn generate_level(pattern: &BasePattern, cfg: &GenConfig, seed: u64) -> Result<GeneratedLevel> {
    let (h, w) = (cfg.height, cfg.width);
    let layout = wfc_collapse(pattern, h, w, seed)?;
    let tiles = finalize_layout(&layout.tiles(pattern), h, w)?;
    let nav = tiles.iter().filter(|t| t.navigable()).count();
    if (nav as f64) < cfg.min_component_fraction * (h * w) as f64 || nav < 2 {
        return Err(Error::Generation(format!("component of {nav} cells below threshold")));
    }
    let (start, goal) = place_start_goal(&tiles, h, w, derive_seed(seed, &[1]))?;
    let level = sample_context_tiles(&tiles, h, w, start, goal, &cfg.context, derive_seed(seed, &[2]))?;
    Ok(GeneratedLevel {
        pattern: pattern.name.clone(),
        layout,
        level,
    })
}

/// `n` valid solvable levels split evenly over the configured patterns.
pub fn generate_dataset_tagged(cfg: &GenConfig, n: usize) -> Result<Vec<GeneratedLevel>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let patterns = cfg.resolve_patterns()?;
    let mut out = Vec::with_capacity(n);
    let (mut draws, mut failures) = (0usize, 0usize);
    let mut last_err;
    for i in 0..n {
        let pattern = &patterns[i % patterns.len()];
        let mut attempt = 0u64;
        loop {
            draws += 1;
            let seed = derive_seed(cfg.seed, &[i as u64, attempt]);
            match generate_level(pattern, cfg, seed) {
                Ok(g) if solvable(&g.level) => {
                    out.push(g);
                    break;
                }
                Ok(_) => last_err = "unsolvable draw".into(),
                Err(e) => last_err = e.to_string(),
            }
            failures += 1;
            attempt += 1;
            if draws >= 32 && failures as f64 / draws as f64 > cfg.max_failure_rate {
                return Err(Error::Generation(format!(
                    "{failures}/{draws} draws failed (pattern {}, {}x{}); last: {last_err}",
                    pattern.name, cfg.height, cfg.width
                )));
            }
        }
    }
    Ok(out)
}

pub fn generate_dataset(cfg: &GenConfig, n: usize) -> Result<Vec<LevelParams>> {
    Ok(generate_dataset_tagged(cfg, n)?.into_iter().map(|g| g.level).collect())
}

/// Named dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    Train,
    /// Extra patterns, moss density divided by 3.
    EdgeLowMoss,
    /// Extra patterns, moss / 3 and lava x 3.
    EdgeLowMossHighLava,
}

impl DatasetPreset {
    pub fn config(self, base: &GenConfig) -> GenConfig {
        let mut cfg = base.clone();
        match self {
            DatasetPreset::Train => {}
            DatasetPreset::EdgeLowMoss | DatasetPreset::EdgeLowMossHighLava => {
                cfg.patterns = extra_patterns().into_iter().map(|p| p.name).collect();
                cfg.context.moss_density /= 3.0;
                if self == DatasetPreset::EdgeLowMossHighLava {
                    cfg.context.lava_density = (cfg.context.lava_density * 3.0).min(1.0);
                }
            }
        }
        cfg
    }
}

/// Same generation settings on a grid with `scale` times the area.
pub fn scale_area(cfg: &GenConfig, scale: usize) -> GenConfig {
    let side = (scale as f64).sqrt();
    let mut out = cfg.clone();
    out.height = (cfg.height as f64 * side).round() as usize;
    out.width = (cfg.width as f64 * side).round() as usize;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn to_tiles(rows: &[&str]) -> (Vec<Tile>, usize, usize) {
        let h = rows.len();
        let w = rows[0].len();
        let tiles = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| if c == '#' { Tile::Wall } else { Tile::Empty }))
            .collect();
        (tiles, h, w)
    }

    /// Adjacent label pairs found by scanning a template directly.
    fn template_pairs(p: &BasePattern) -> BTreeSet<(usize, usize, usize)> {
        let mut set = BTreeSet::new();
        let t = &p.template;
        for r in 0..t.len() {
            for c in 0..t[0].len() {
                if c + 1 < t[0].len() {
                    set.insert((t[r][c], 1, t[r][c + 1]));
                    set.insert((t[r][c + 1], 3, t[r][c]));
                }
                if r + 1 < t.len() {
                    set.insert((t[r][c], 2, t[r + 1][c]));
                    set.insert((t[r + 1][c], 0, t[r][c]));
                }
            }
        }
        set
    }

    fn oracle_valid(p: &BasePattern, layout: &WfcLayout) -> bool {
        let pairs = template_pairs(p);
        let (h, w) = (layout.height, layout.width);
        (0..h).all(|r| {
            (0..w).all(|c| {
                let a = layout.labels[r * w + c];
                (c + 1 >= w || pairs.contains(&(a, 1, layout.labels[r * w + c + 1])))
                    && (r + 1 >= h || pairs.contains(&(a, 2, layout.labels[(r + 1) * w + c])))
            })
        })
    }

    #[test]
    fn rules_are_exactly_template_adjacencies() {
        for p in all_patterns() {
            let pairs = template_pairs(&p);
            for a in 0..p.num_labels() {
                for d in 0..4 {
                    for b in 0..p.num_labels() {
                        assert_eq!(p.allows(a, d, b), pairs.contains(&(a, d, b)), "{} {a} {d} {b}", p.name);
                    }
                }
            }
        }
    }

    #[test]
    fn pattern_library_sizes() {
        assert_eq!(train_patterns().len(), 4);
        assert!(extra_patterns().len() >= 14);
        let names: BTreeSet<_> = all_patterns().into_iter().map(|p| p.name).collect();
        assert_eq!(names.len(), train_patterns().len() + extra_patterns().len());
    }

    #[test]
    fn checkerboard_collapses_to_a_checkerboard() {
        let p = BasePattern::from_ascii("checker", &["#.#.", ".#.#", "#.#.", ".#.#"]).unwrap();
        for seed in 0..5 {
            let out = wfc_collapse(&p, 7, 9, seed).unwrap();
            let first = out.labels[0];
            for r in 0..7 {
                for c in 0..9 {
                    let expect = if (r + c) % 2 == 0 { first } else { 1 - first };
                    assert_eq!(out.labels[r * 9 + c], expect);
                }
            }
        }
    }

    #[test]
    fn collapse_output_respects_rules_and_is_deterministic() {
        for p in all_patterns() {
            for seed in 0..3 {
                let a = wfc_collapse(&p, 13, 11, seed).unwrap();
                assert!(oracle_valid(&p, &a), "{}", p.name);
                assert!(p.validate_layout(&a));
                assert_eq!(a, wfc_collapse(&p, 13, 11, seed).unwrap());
            }
        }
    }

    #[test]
    fn unsatisfiable_pattern_reports_failure() {
        // 'a' must have 'b' to its right, 'b' must have 'a' to its right, but
        // only vertically stacked a/b pairs exist: no 2-wide tiling.
        let p = BasePattern::from_ascii("stack", &["a", "b"]).unwrap();
        assert!(matches!(wfc_collapse(&p, 2, 2, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn finalize_walls_off_small_components() {
        let (tiles, h, w) = to_tiles(&[".....#...", ".....#...", "#######..", "........."]);
        // components: 10-cell top-left, and the rest joined on the right/bottom.
        let (_, sizes) = navigable_components(&tiles, h, w);
        assert_eq!(sizes.len(), 2);
        let out = finalize_layout(&tiles, h, w).unwrap();
        assert_eq!(navigable_components(&out, h, w).1.len(), 1);
        assert!(out[0] == Tile::Wall);

        let (tiles, h, w) = to_tiles(&["..........", "#######...", "#######.##", "####....##"]);
        let out = finalize_layout(&tiles, h, w).unwrap();
        let (_, sizes) = navigable_components(&tiles, h, w);
        assert_eq!(sizes, vec![18]);
        assert_eq!(out, tiles);

        let (tiles, h, w) = to_tiles(&["...#.", "...#.", "...##", "#####", "##..."]);
        let out = finalize_layout(&tiles, h, w).unwrap();
        let kept: usize = out.iter().filter(|t| t.navigable()).count();
        assert_eq!(kept, 9);

        let (tiles, h, w) = to_tiles(&["##", "##"]);
        assert!(finalize_layout(&tiles, h, w).is_err());
    }

    #[test]
    fn median_start_in_corridor() {
        let (tiles, h, w) = to_tiles(&["....."]);
        // Search for a seed that puts the goal at an end cell.
        let mut checked = 0;
        for seed in 0..200 {
            let (start, goal) = place_start_goal(&tiles, h, w, seed).unwrap();
            assert_ne!(start, goal);
            if goal == (0, 0) {
                assert_eq!(start, (0, 2));
                checked += 1;
            }
            if goal == (0, 4) {
                assert_eq!(start, (0, 2));
                checked += 1;
            }
        }
        assert!(checked > 0);
        let (tiles, h, w) = to_tiles(&["##.", "##."]);
        let (start, goal) = place_start_goal(&tiles, h, w, 3).unwrap();
        assert_ne!(start, goal);
        assert!(tiles[start.0 * w + start.1].navigable());
    }

    /// Nearest-navigable rule evaluated by exhaustive scan.
    fn brute_goal_distance(level: &LevelParams, cell: Cell) -> Option<u32> {
        let nav = bfs_distances(level, level.goal);
        if let Some(d) = nav[level.idx(cell)] {
            return Some(d);
        }
        level
            .cells()
            .filter_map(|n| {
                nav[level.idx(n)].map(|gd| {
                    let off = (n.0 as i64 - cell.0 as i64).unsigned_abs() + (n.1 as i64 - cell.1 as i64).unsigned_abs();
                    (off as u32, gd)
                })
            })
            .min()
            .map(|(off, gd)| off + gd)
    }

    #[test]
    fn non_navigable_distance_uses_nearest_navigable_cell() {
        let level = LevelParams::from_ascii(&["G..#", "##.#", "S..#", "####"]).unwrap();
        let d = goal_distances(&level);
        // (0,3): nearest navigable is (0,2) at goal distance 2, offset 1.
        assert_eq!(d[level.idx((0, 3))], Some(3));
        // (1,0): neighbours (0,0) gd 0 and (2,0) gd 6 both at offset 1 -> prefer 0.
        assert_eq!(d[level.idx((1, 0))], Some(1));
        for cell in level.cells() {
            assert_eq!(d[level.idx(cell)], brute_goal_distance(&level, cell), "{cell:?}");
        }
        let cfg = GenConfig::default();
        for g in generate_dataset_tagged(&cfg, 8).unwrap() {
            let d = goal_distances(&g.level);
            for cell in g.level.cells() {
                assert_eq!(d[g.level.idx(cell)], brute_goal_distance(&g.level, cell));
            }
        }
    }

    #[test]
    fn zero_moss_density_places_no_moss() {
        let mut cfg = GenConfig::default();
        cfg.context.moss_density = 0.0;
        for g in generate_dataset_tagged(&cfg, 8).unwrap() {
            assert_eq!(g.level.count(Tile::Moss), 0);
        }
    }

    #[test]
    fn dataset_is_balanced_valid_and_reproducible() {
        let cfg = GenConfig {
            height: 9,
            width: 9,
            seed: 7,
            ..GenConfig::default()
        };
        let data = generate_dataset_tagged(&cfg, 512).unwrap();
        for p in train_patterns() {
            assert_eq!(data.iter().filter(|g| g.pattern == p.name).count(), 128);
        }
        for g in &data {
            g.level.validate().unwrap();
            assert!(solvable(&g.level));
        }
        let again = generate_dataset(&cfg, 512).unwrap();
        assert!(data.iter().zip(&again).all(|(a, b)| a.level == *b));
    }

    #[test]
    fn edge_presets_scale_densities() {
        let base = GenConfig::default();
        let a = DatasetPreset::EdgeLowMoss.config(&base);
        let b = DatasetPreset::EdgeLowMossHighLava.config(&base);
        assert!((a.context.moss_density - base.context.moss_density / 3.0).abs() < 1e-12);
        assert_eq!(a.context.lava_density, base.context.lava_density);
        assert!((b.context.lava_density - base.context.lava_density * 3.0).abs() < 1e-12);
        assert_eq!(a.patterns.len(), extra_patterns().len());
        assert!(a.patterns.iter().all(|p| !base.patterns.contains(p)));
        for preset in [a, b] {
            let cfg = GenConfig { height: 11, width: 11, ..preset };
            assert_eq!(generate_dataset(&cfg, 28).unwrap().len(), 28);
        }
        let big = scale_area(&base, 9);
        assert_eq!((big.height, big.width), (45, 45));
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut cfg = GenConfig::default();
        cfg.context.lava_density = 1.5;
        assert!(generate_dataset(&cfg, 1).is_err());
        let cfg = GenConfig {
            patterns: vec!["nope".into()],
            ..GenConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 1), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #[test]
        fn every_generated_level_is_valid(seed in proptest::prelude::any::<u64>(), k in 0usize..4, side in 5usize..12) {
            let p = &train_patterns()[k];
            let cfg = GenConfig { height: side, width: side, ..GenConfig::default() };
            if let Ok(g) = generate_level(p, &cfg, seed) {
                proptest::prop_assert!(oracle_valid(p, &g.layout));
                let l = &g.level;
                let (_, sizes) = navigable_components(&l.grid, side, side);
                proptest::prop_assert_eq!(sizes.len(), 1);
                proptest::prop_assert!(l.start != l.goal);
                proptest::prop_assert!(l.tile(l.start).navigable() && l.tile(l.goal).navigable());
                proptest::prop_assert!(solvable(l));
            }
        }
    }
}
