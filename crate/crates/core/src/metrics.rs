//! Generalisation diagnostics and level-distribution statistics.

use serde::{Deserialize, Serialize};

use crate::env::{shortest_path_len, LevelParams, Tile};
use crate::error::{Error, Result};
use crate::levelgen::goal_distances;

/// Unit-width distance bins `0..DISTANCE_BINS-1`; the last bin collects
/// every larger distance.
pub const DISTANCE_BINS: usize = 16;
pub const HISTOGRAM_LEN: usize = 4 * DISTANCE_BINS;

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Contract("mean of an empty set".into()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean training return minus mean test return.
pub fn gen_gap(train: &[f64], test: &[f64]) -> Result<f64> {
    Ok(mean(train)? - mean(test)?)
}

/// `sqrt(2 D^2 / |L| * mi)`.
pub fn gen_gap_bound(mi: f64, num_levels: usize, d: f64) -> Result<f64> {
    if num_levels == 0 || d <= 0.0 {
        return Err(Error::Contract("bound needs |L| >= 1 and D > 0".into()));
    }
    Ok((2.0 * d * d / num_levels as f64 * mi.max(0.0)).sqrt())
}

/// Return under `p_lambda` minus the uniform average over `uniform_returns`.
pub fn shift_gap(p_lambda: &[f64], buffer_returns: &[f64], uniform_returns: &[f64]) -> Result<f64> {
    if p_lambda.len() != buffer_returns.len() {
        return Err(Error::Contract(format!(
            "{} sampling weights for {} returns",
            p_lambda.len(),
            buffer_returns.len()
        )));
    }
    let weighted: f64 = p_lambda.iter().zip(buffer_returns).map(|(p, v)| p * v).sum();
    Ok(weighted - mean(uniform_returns)?)
}

fn tile_slot(t: Tile) -> usize {
    match t {
        Tile::Empty => 0,
        Tile::Wall => 1,
        Tile::Moss => 2,
        Tile::Lava => 3,
    }
}

/// Joint distribution over (tile type, goal-distance bin), row-major with
/// tiles in the order empty, wall, moss, lava.
pub fn tile_distance_histogram(level: &LevelParams) -> Result<Vec<f64>> {
    let dist = goal_distances(level);
    if dist[level.idx(level.start)].is_none() {
        return Err(Error::InvalidLevel("histogram needs a solvable level".into()));
    }
    let mut h = vec![0.0; HISTOGRAM_LEN];
    let total = level.grid.len() as f64;
    for (i, &t) in level.grid.iter().enumerate() {
        let bin = dist[i].map_or(DISTANCE_BINS - 1, |d| (d as usize).min(DISTANCE_BINS - 1));
        h[tile_slot(t) * DISTANCE_BINS + bin] += 1.0 / total;
    }
    Ok(h)
}

/// Weighted average of per-level histograms; unsolvable levels are skipped.
pub fn pooled_histogram(levels: &[&LevelParams], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; HISTOGRAM_LEN];
    let mut mass = 0.0;
    for (k, level) in levels.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[k]);
        if w == 0.0 {
            continue;
        }
        let Ok(h) = tile_distance_histogram(level) else { continue };
        for (a, v) in acc.iter_mut().zip(h) {
            *a += w * v;
        }
        mass += w;
    }
    if mass <= 0.0 {
        return Err(Error::Contract("no solvable level with positive weight".into()));
    }
    acc.iter_mut().for_each(|a| *a /= mass);
    Ok(acc)
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("JSD supports differ: {} vs {}", p.len(), q.len())));
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln())
            .sum()
    };
    Ok((0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub moss_density: f64,
    pub lava_density: f64,
    /// Mean shortest start-to-goal path over solvable levels in the window.
    pub path_len: f64,
}

/// Means over a window of sampled levels; repeated draws weigh more.
pub fn buffer_statistics(window: &[&LevelParams]) -> Result<BufferStats> {
    if window.is_empty() {
        return Err(Error::Contract("empty statistics window".into()));
    }
    let n = window.len() as f64;
    let density = |t: Tile| window.iter().map(|l| l.count(t) as f64 / l.grid.len() as f64).sum::<f64>() / n;
    let paths: Vec<f64> = window.iter().filter_map(|l| shortest_path_len(l)).map(f64::from).collect();
    Ok(BufferStats {
        moss_density: density(Tile::Moss),
        lava_density: density(Tile::Lava),
        path_len: if paths.is_empty() { 0.0 } else { paths.iter().sum::<f64>() / paths.len() as f64 },
    })
}
