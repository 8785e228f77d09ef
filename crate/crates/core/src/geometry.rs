//! Pairwise encounter geometry and its discretisation into domain bins.
//!
//! Conventions: 0° is the world +x axis, angles grow counterclockwise, and
//! the relative bearing of a neighbour is measured in the observer's
//! heading-aligned frame. All angles live in `[0, 360)`.

use thiserror::Error;

pub type Point = [f64; 2];

/// Displacements shorter than this carry the previous heading.
pub const STATIONARY_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("bin width {0}° does not divide 360° exactly")]
    BadBinWidth(f64),
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    // rem_euclid of a tiny negative number rounds up to 360.0
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentKinematics {
    pub position: Point,
    /// Degrees in `[0, 360)`.
    pub heading: f64,
    /// False when no non-stationary displacement has been seen yet.
    pub heading_valid: bool,
}

impl AgentKinematics {
    pub fn new(position: Point, heading: f64) -> Self {
        AgentKinematics {
            position,
            heading: normalize_deg(heading),
            heading_valid: true,
        }
    }

    /// An agent with no known heading (0°, invalid).
    pub fn unknown(position: Point) -> Self {
        AgentKinematics {
            position,
            heading: 0.0,
            heading_valid: false,
        }
    }
}

/// Heading of the step `prev -> cur`, or the fallback's heading when the
/// agent did not move.
pub fn estimate_heading(prev: Point, cur: Point, fallback: &AgentKinematics) -> AgentKinematics {
    let dx = cur[0] - prev[0];
    let dy = cur[1] - prev[1];
    if dx.hypot(dy) > STATIONARY_EPS {
        AgentKinematics::new(cur, dy.atan2(dx).to_degrees())
    } else {
        AgentKinematics {
            position: cur,
            heading: fallback.heading,
            heading_valid: fallback.heading_valid,
        }
    }
}

/// Distance, relative bearing and relative heading of `other` seen from
/// `self`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncounterGeometry {
    pub d: f64,
    pub theta: f64,
    pub phi: f64,
}

pub fn compute_encounter(me: &AgentKinematics, other: &AgentKinematics) -> EncounterGeometry {
    let dx = other.position[0] - me.position[0];
    let dy = other.position[1] - me.position[1];
    let d = dx.hypot(dy);
    let theta = if d == 0.0 {
        0.0
    } else {
        normalize_deg(dy.atan2(dx).to_degrees() - me.heading)
    };
    let phi = normalize_deg(other.heading - me.heading);
    EncounterGeometry { d, theta, phi }
}

/// Discretisation of bearing × heading into an `m × n` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSpec {
    pub delta_theta: f64,
    pub delta_phi: f64,
    pub m: usize,
    pub n: usize,
}

fn bins_for(delta: f64) -> Result<usize, GeometryError> {
    if !(delta > 0.0 && delta <= 360.0) {
        return Err(GeometryError::BadBinWidth(delta));
    }
    let count = (360.0 / delta).round();
    if ((count * delta) - 360.0).abs() > 1e-9 {
        return Err(GeometryError::BadBinWidth(delta));
    }
    Ok(count as usize)
}

/// `floor(angle / delta)` corrected so that interval edges are the
/// products `k * delta` themselves, clamped to `count - 1`.
fn bin_of(angle: f64, delta: f64, count: usize) -> usize {
    let mut k = (angle / delta).floor().max(0.0) as usize;
    if k > 0 && (k as f64) * delta > angle {
        k -= 1;
    }
    if ((k + 1) as f64) * delta <= angle {
        k += 1;
    }
    k.min(count - 1)
}

impl BinSpec {
    pub fn new(delta_theta: f64, delta_phi: f64) -> Result<Self, GeometryError> {
        Ok(BinSpec {
            delta_theta,
            delta_phi,
            m: bins_for(delta_theta)?,
            n: bins_for(delta_phi)?,
        })
    }

    /// Equal bearing and heading widths.
    pub fn uniform(delta: f64) -> Result<Self, GeometryError> {
        Self::new(delta, delta)
    }

    /// Row-major offset of the 1-based bin `(i, j)`.
    pub fn flat(&self, (i, j): (usize, usize)) -> usize {
        (i - 1) * self.n + (j - 1)
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::uniform(30.0).expect("30 divides 360")
    }
}

/// 1-based bin `(i, j)` with `theta ∈ [(i-1)Δθ, iΔθ)` and
/// `phi ∈ [(j-1)Δφ, jΔφ)`.
pub fn bin_index(g: &EncounterGeometry, spec: &BinSpec) -> (usize, usize) {
    (
        bin_of(g.theta, spec.delta_theta, spec.m) + 1,
        bin_of(g.phi, spec.delta_phi, spec.n) + 1,
    )
}
