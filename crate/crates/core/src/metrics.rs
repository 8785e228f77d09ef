//! Displacement errors, best-of-k selection and near-collision rate.
//!
//! Trajectory arguments are indexed `[pedestrian][step]`.

use thiserror::Error;

use crate::geometry::Point;

/// Distance below which two pedestrians are in near-collision (strict).
pub const NEAR_COLLISION_M: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no valid (pedestrian, step) pairs to average")]
    Empty,
    #[error("trajectory shapes disagree: {0}")]
    ShapeMismatch(String),
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<(), MetricError> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} predicted, {} true, {} masked pedestrians",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    for (p, ((a, b), m)) in pred.iter().zip(truth).zip(mask).enumerate() {
        if a.len() != b.len() || a.len() != m.len() {
            return Err(MetricError::ShapeMismatch(format!("pedestrian {p} has mismatched step counts")));
        }
    }
    Ok(())
}

/// Running sums of displacement errors, so several scenes can be pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DisplacementSums {
    pub step_error: f64,
    pub steps: usize,
    pub final_error: f64,
    pub peds: usize,
    /// Pedestrians whose last step was invalid, scored at their last
    /// valid step instead.
    pub fde_fallbacks: usize,
}

impl DisplacementSums {
    pub fn add(&mut self, pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<(), MetricError> {
        check(pred, truth, mask)?;
        for ((a, b), m) in pred.iter().zip(truth).zip(mask) {
            let mut last = None;
            for t in 0..a.len() {
                if m[t] {
                    self.step_error += dist(a[t], b[t]);
                    self.steps += 1;
                    last = Some(t);
                }
            }
            if let Some(t) = last {
                self.final_error += dist(a[t], b[t]);
                self.peds += 1;
                if t + 1 != a.len() {
                    self.fde_fallbacks += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DisplacementSums) {
        self.step_error += other.step_error;
        self.steps += other.steps;
        self.final_error += other.final_error;
        self.peds += other.peds;
        self.fde_fallbacks += other.fde_fallbacks;
    }

    pub fn ade(&self) -> Result<f64, MetricError> {
        if self.steps == 0 {
            Err(MetricError::Empty)
        } else {
            Ok(self.step_error / self.steps as f64)
        }
    }

    pub fn fde(&self) -> Result<f64, MetricError> {
        if self.peds == 0 {
            Err(MetricError::Empty)
        } else {
            Ok(self.final_error / self.peds as f64)
        }
    }
}

/// Mean Euclidean error over valid `(pedestrian, step)` pairs.
pub fn ade(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<f64, MetricError> {
    let mut s = DisplacementSums::default();
    s.add(pred, truth, mask)?;
    s.ade()
}

/// Mean error at each pedestrian's final step.
pub fn fde(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<f64, MetricError> {
    fde_detailed(pred, truth, mask).map(|(v, _)| v)
}

/// FDE plus the number of pedestrians scored at an earlier, last valid
/// step.
pub fn fde_detailed(pred: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<(f64, usize), MetricError> {
    let mut s = DisplacementSums::default();
    s.add(pred, truth, mask)?;
    Ok((s.fde()?, s.fde_fallbacks))
}

/// Index of the minimum-ADE sample; ties go to the earliest sample.
pub fn best_sample_index(samples: &[Vec<Vec<Point>>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<usize, MetricError> {
    let mut best = None;
    for (i, s) in samples.iter().enumerate() {
        let e = ade(s, truth, mask)?;
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    best.map(|(i, _)| i).ok_or(MetricError::Empty)
}

/// ADE and FDE of the minimum-ADE sample of one scene.
pub fn best_of_k(samples: &[Vec<Vec<Point>>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<(f64, f64), MetricError> {
    let i = best_sample_index(samples, truth, mask)?;
    Ok((ade(&samples[i], truth, mask)?, fde(&samples[i], truth, mask)?))
}

/// Per-frame near-collision percentages, pooled over frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollisionTally {
    pub pct_sum: f64,
    pub frames: usize,
}

impl CollisionTally {
    /// Adds every frame of one scene. `presence` defaults to all-present.
    pub fn add(&mut self, trajectories: &[Vec<Point>], presence: Option<&[Vec<bool>]>) {
        let steps = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
        let present = |p: usize, t: usize| t < trajectories[p].len() && presence.is_none_or(|m| m[p][t]);
        for t in 0..steps {
            let alive: Vec<usize> = (0..trajectories.len()).filter(|&p| present(p, t)).collect();
            self.frames += 1;
            if alive.len() < 2 {
                continue;
            }
            let colliding = alive
                .iter()
                .filter(|&&p| {
                    alive
                        .iter()
                        .any(|&q| q != p && dist(trajectories[p][t], trajectories[q][t]) < NEAR_COLLISION_M)
                })
                .count();
            self.pct_sum += 100.0 * colliding as f64 / alive.len() as f64;
        }
    }

    pub fn merge(&mut self, other: &CollisionTally) {
        self.pct_sum += other.pct_sum;
        self.frames += other.frames;
    }

    pub fn rate(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.pct_sum / self.frames as f64
        }
    }
}

/// Mean over frames of the percentage of present pedestrians closer than
/// [`NEAR_COLLISION_M`] to some other pedestrian.
pub fn near_collision_rate(trajectories: &[Vec<Point>], presence: Option<&[Vec<bool>]>) -> f64 {
    let mut tally = CollisionTally::default();
    tally.add(trajectories, presence);
    tally.rate()
}

/// Aggregated evaluation numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub best_of_k_ade: f64,
    pub best_of_k_fde: f64,
    pub near_collision_pct: f64,
    pub n_scenes: usize,
    pub n_peds: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "ade,fde,bok_ade,bok_fde,ncr_pct,n_scenes,n_peds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.ade, self.fde, self.best_of_k_ade, self.best_of_k_fde, self.near_collision_pct, self.n_scenes, self.n_peds
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}
