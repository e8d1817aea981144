//! Server-side convergence detection for the block under training.
//!
//! Each round the aggregated block is snapshotted. The block perturbation is
//! the norm of the summed last `Q` updates over the sum of their norms; it is
//! smoothed with a window of `H`, a least-squares line is fitted to the last
//! `H` smoothed values, and the block freezes once the absolute slope stays
//! at or below `Λ` for `μ` consecutive rounds while the smoothed perturbation
//! sits below the plateau ceiling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaceConfig {
    /// Observation window `Q` (number of updates per perturbation value).
    pub window: usize,
    /// Smoothing window `H`; also the number of points in each slope fit.
    pub smooth_window: usize,
    /// Slope threshold `Λ`.
    pub slope_threshold: f64,
    /// Consecutive below-threshold rounds `μ` required to freeze.
    pub patience: usize,
    /// A plateau only counts when the smoothed perturbation is at or below this.
    pub plateau_ceiling: f64,
    /// Hard cap on rounds per stage.
    pub round_cap: usize,
}

impl Default for PaceConfig {
    fn default() -> Self {
        Self {
            window: 5,
            smooth_window: 5,
            slope_threshold: 1e-3,
            patience: 3,
            plateau_ceiling: 0.9,
            round_cap: 200,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Block perturbation over the last `q` updates implied by the last `q + 1`
/// snapshots. Returns 0 when every update is zero.
pub fn block_perturbation(snapshots: &[Vec<f64>], q: usize) -> Result<f64> {
    if q == 0 || snapshots.len() < q + 1 {
        return Err(Error::Contract(format!(
            "perturbation window {q} needs {} snapshots, got {}",
            q + 1,
            snapshots.len()
        )));
    }
    let recent = &snapshots[snapshots.len() - q - 1..];
    let dim = recent[0].len();
    if recent.iter().any(|s| s.len() != dim) {
        return Err(Error::Contract("snapshots differ in length".into()));
    }
    let mut summed = vec![0.0; dim];
    let mut norm_sum = 0.0;
    for pair in recent.windows(2) {
        let update: Vec<f64> = pair[1].iter().zip(&pair[0]).map(|(a, b)| a - b).collect();
        norm_sum += norm(&update);
        for (s, u) in summed.iter_mut().zip(&update) {
            *s += u;
        }
    }
    if norm_sum == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&summed) / norm_sum)
}

/// Windowed mean of `series[..r]`: the last `h` values once `r >= h`, all of them before.
pub fn smooth(series: &[f64], h: usize, r: usize) -> Result<f64> {
    if r == 0 || r > series.len() || h == 0 {
        return Err(Error::Contract(format!(
            "smoothing needs 1 <= r <= {} and h >= 1 (r = {r}, h = {h})",
            series.len()
        )));
    }
    let window = if r >= h { &series[r - h..r] } else { &series[..r] };
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Ordinary least-squares slope over `x = 0..K-1`.
pub fn fit_slope(points: &[f64]) -> Result<f64> {
    let k = points.len();
    if k < 2 {
        return Err(Error::Contract(format!("slope fit needs at least 2 points, got {k}")));
    }
    let x_mean = (k - 1) as f64 / 2.0;
    let y_mean = points.iter().sum::<f64>() / k as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in points.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Per-block history feeding freeze decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTrace {
    window: usize,
    smooth_window: usize,
    plateau_ceiling: f64,
    snapshots: VecDeque<Vec<f64>>,
    pub perturbations: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub slopes: Vec<f64>,
    pub below_count: usize,
}

impl PerturbationTrace {
    pub fn new(window: usize, smooth_window: usize, plateau_ceiling: f64) -> Self {
        Self {
            window,
            smooth_window,
            plateau_ceiling,
            snapshots: VecDeque::with_capacity(window + 1),
            perturbations: Vec::new(),
            smoothed: Vec::new(),
            slopes: Vec::new(),
            below_count: 0,
        }
    }

    /// Record a snapshot and extend the derived series where enough history exists.
    pub fn push_snapshot(&mut self, snapshot: Vec<f64>) -> Result<()> {
        if self.snapshots.len() == self.window + 1 {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
        if self.snapshots.len() < self.window + 1 {
            return Ok(());
        }
        let snaps: Vec<Vec<f64>> = self.snapshots.iter().cloned().collect();
        self.perturbations.push(block_perturbation(&snaps, self.window)?);
        let r = self.perturbations.len();
        self.smoothed.push(smooth(&self.perturbations, self.smooth_window, r)?);
        let k = self.smooth_window.max(2);
        if self.smoothed.len() >= k {
            self.slopes.push(fit_slope(&self.smoothed[self.smoothed.len() - k..])?);
        }
        Ok(())
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshots.len()
    }
}

/// Counting rule: a round counts when `|slope| <= threshold` and the smoothed
/// perturbation is at or below the trace's plateau ceiling; any other round
/// resets the count. Fires (and resets) once the count reaches `patience`.
pub fn freeze_decision(trace: &mut PerturbationTrace, threshold: f64, patience: usize) -> bool {
    let (Some(&slope), Some(&level)) = (trace.slopes.last(), trace.smoothed.last()) else {
        return false;
    };
    if slope.abs() <= threshold && level <= trace.plateau_ceiling {
        trace.below_count += 1;
    } else {
        trace.below_count = 0;
    }
    if trace.below_count >= patience {
        trace.below_count = 0;
        true
    } else {
        false
    }
}

/// What the controller saw after one round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PaceObservation {
    pub perturbation: Option<f64>,
    pub smoothed: Option<f64>,
    pub slope: Option<f64>,
    pub freeze: bool,
}

/// Source of freeze decisions for a stage.
pub trait FreezeSignal {
    /// Called once with the block's parameters at stage entry.
    fn begin(&mut self, block: &[f64]) -> Result<()>;
    /// Called after every aggregation with the updated block.
    fn observe(&mut self, block: &[f64]) -> Result<PaceObservation>;
}

#[derive(Debug, Clone)]
pub struct PaceController {
    pub config: PaceConfig,
    pub trace: PerturbationTrace,
}

impl PaceController {
    pub fn new(config: PaceConfig) -> Self {
        Self {
            trace: PerturbationTrace::new(config.window, config.smooth_window, config.plateau_ceiling),
            config,
        }
    }
}

impl FreezeSignal for PaceController {
    fn begin(&mut self, block: &[f64]) -> Result<()> {
        self.trace = PerturbationTrace::new(self.config.window, self.config.smooth_window, self.config.plateau_ceiling);
        self.trace.push_snapshot(block.to_vec())
    }

    fn observe(&mut self, block: &[f64]) -> Result<PaceObservation> {
        let before = (self.trace.perturbations.len(), self.trace.slopes.len());
        self.trace.push_snapshot(block.to_vec())?;
        let fresh_p = self.trace.perturbations.len() > before.0;
        let fresh_slope = self.trace.slopes.len() > before.1;
        let freeze = fresh_slope && freeze_decision(&mut self.trace, self.config.slope_threshold, self.config.patience);
        Ok(PaceObservation {
            perturbation: fresh_p.then(|| *self.trace.perturbations.last().expect("pushed")),
            smoothed: fresh_p.then(|| *self.trace.smoothed.last().expect("pushed")),
            slope: fresh_slope.then(|| *self.trace.slopes.last().expect("pushed")),
            freeze,
        })
    }
}
