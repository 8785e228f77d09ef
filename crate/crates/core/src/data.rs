//! Trajectory ingestion: ETH/UCY-style text files, fixed-length scene
//! windows, leave-one-out splits and seeded synthetic scenarios.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::Point;
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: duplicate record for frame {frame}, pedestrian {ped} on lines {first_line} and {second_line}")]
    Duplicate {
        source_name: String,
        frame: i64,
        ped: u64,
        first_line: usize,
        second_line: usize,
    },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("unknown synthetic scenario `{0}`")]
    UnknownScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub frame_id: i64,
    pub ped_id: u64,
    pub x: f64,
    pub y: f64,
}

/// Records of one file, sorted by `(frame, ped)`, with frames re-indexed
/// to consecutive integers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<RawRecord>,
    /// Original frame id of re-indexed frame 0.
    pub frame_origin: i64,
    /// Original frame-id increment between consecutive frames.
    pub frame_step: i64,
    pub warnings: Vec<String>,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn parse_integral(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = field.parse().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Parses whitespace-delimited `frame_id ped_id x y` rows.
pub fn parse_dataset(text: &str, name: &str) -> Result<Dataset, DataError> {
    let err = |line: usize, message: String| DataError::Parse {
        source_name: name.to_string(),
        line,
        message,
    };
    let mut rows: Vec<(RawRecord, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let frame_id = parse_integral(fields[0]).ok_or_else(|| err(lineno, format!("bad frame id `{}`", fields[0])))?;
        let ped = parse_integral(fields[1])
            .filter(|&p| p >= 0)
            .ok_or_else(|| err(lineno, format!("bad pedestrian id `{}`", fields[1])))?;
        let coord = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad coordinate `{s}`")))
        };
        rows.push((
            RawRecord {
                frame_id,
                ped_id: ped as u64,
                x: coord(fields[2])?,
                y: coord(fields[3])?,
            },
            lineno,
        ));
    }
    let mut warnings = Vec::new();
    if rows.is_empty() {
        warnings.push(format!("{name}: no records"));
        return Ok(Dataset {
            name: name.to_string(),
            records: Vec::new(),
            frame_origin: 0,
            frame_step: 1,
            warnings,
        });
    }
    rows.sort_by_key(|(r, line)| (r.frame_id, r.ped_id, *line));
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.0.frame_id == b.0.frame_id && a.0.ped_id == b.0.ped_id {
            return Err(DataError::Duplicate {
                source_name: name.to_string(),
                frame: a.0.frame_id,
                ped: a.0.ped_id,
                first_line: a.1,
                second_line: b.1,
            });
        }
    }
    let origin = rows[0].0.frame_id;
    let step = rows
        .windows(2)
        .map(|w| w[1].0.frame_id - w[0].0.frame_id)
        .filter(|&d| d > 0)
        .fold(0, gcd)
        .max(1);
    let records = rows
        .into_iter()
        .map(|(mut r, _)| {
            r.frame_id = (r.frame_id - origin) / step;
            r
        })
        .collect();
    Ok(Dataset {
        name: name.to_string(),
        records,
        frame_origin: origin,
        frame_step: step,
        warnings,
    })
}

/// Reads a dataset file; the dataset is named after the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_dataset(&text, &name)
}

/// Renders records in the input format with 17 significant digits.
pub fn format_records(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{:.16e}\t{:.16e}", r.frame_id, r.ped_id, r.x, r.y);
    }
    out
}

/// One sample: `obs_len + pred_len` consecutive frames of `N` pedestrians.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindow {
    pub source: String,
    pub start_frame: i64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub ped_ids: Vec<u64>,
    /// `positions[frame][ped]`, meters.
    pub positions: Vec<Vec<Point>>,
    /// `presence[frame][ped]`.
    pub presence: Vec<Vec<bool>>,
}

impl SceneWindow {
    pub fn num_peds(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn is_empty(&self) -> bool {
        self.ped_ids.is_empty()
    }

    /// Ground-truth future of pedestrian `p`.
    pub fn future(&self, p: usize) -> Vec<Point> {
        (self.obs_len..self.len()).map(|t| self.positions[t][p]).collect()
    }

    /// Validity of each future step of pedestrian `p`.
    pub fn future_mask(&self, p: usize) -> Vec<bool> {
        (self.obs_len..self.len()).map(|t| self.presence[t][p]).collect()
    }

    pub fn futures(&self) -> Vec<Vec<Point>> {
        (0..self.num_peds()).map(|p| self.future(p)).collect()
    }

    pub fn future_masks(&self) -> Vec<Vec<bool>> {
        (0..self.num_peds()).map(|p| self.future_mask(p)).collect()
    }

    pub fn observed(&self, p: usize) -> Vec<Point> {
        (0..self.obs_len).map(|t| self.positions[t][p]).collect()
    }

    pub fn to_records(&self) -> Vec<RawRecord> {
        let mut out = Vec::new();
        for t in 0..self.len() {
            for (p, &id) in self.ped_ids.iter().enumerate() {
                if self.presence[t][p] {
                    let [x, y] = self.positions[t][p];
                    out.push(RawRecord {
                        frame_id: self.start_frame + t as i64,
                        ped_id: id,
                        x,
                        y,
                    });
                }
            }
        }
        out
    }

    /// Same scene with every position shifted by `offset`.
    pub fn translated(&self, offset: Point) -> SceneWindow {
        let mut s = self.clone();
        for frame in &mut s.positions {
            for p in frame.iter_mut() {
                p[0] += offset[0];
                p[1] += offset[1];
            }
        }
        s
    }

    /// Same scene with pedestrians reordered: new pedestrian `i` is old
    /// pedestrian `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SceneWindow {
        let mut s = self.clone();
        s.ped_ids = perm.iter().map(|&i| self.ped_ids[i]).collect();
        for t in 0..self.len() {
            s.positions[t] = perm.iter().map(|&i| self.positions[t][i]).collect();
            s.presence[t] = perm.iter().map(|&i| self.presence[t][i]).collect();
        }
        s
    }
}

/// Sliding windows of `obs_len + pred_len` consecutive frames.
///
/// A pedestrian is included when present in every observed frame; once it
/// is missing from a future frame it stays masked for the rest of the
/// window. Windows spanning a missing frame are skipped.
pub fn make_windows(records: &[RawRecord], obs_len: usize, pred_len: usize, stride: usize, source: &str) -> Vec<SceneWindow> {
    let len = obs_len + pred_len;
    let stride = stride.max(1);
    let mut frames: BTreeMap<i64, HashMap<u64, Point>> = BTreeMap::new();
    for r in records {
        frames.entry(r.frame_id).or_default().insert(r.ped_id, [r.x, r.y]);
    }
    let (Some(&first), Some(&last)) = (frames.keys().next(), frames.keys().next_back()) else {
        return Vec::new();
    };
    let mut windows = Vec::new();
    let mut start = first;
    while start + len as i64 - 1 <= last {
        let span: Option<Vec<&HashMap<u64, Point>>> = (0..len as i64).map(|t| frames.get(&(start + t))).collect();
        if let Some(span) = span {
            let mut ids: Vec<u64> = span[0]
                .keys()
                .copied()
                .filter(|id| span[..obs_len].iter().all(|f| f.contains_key(id)))
                .collect();
            ids.sort_unstable();
            if !ids.is_empty() {
                let mut positions = vec![vec![[0.0; 2]; ids.len()]; len];
                let mut presence = vec![vec![false; ids.len()]; len];
                for (p, id) in ids.iter().enumerate() {
                    for t in 0..len {
                        match span[t].get(id) {
                            Some(&pos) if t < obs_len || presence[t - 1][p] => {
                                positions[t][p] = pos;
                                presence[t][p] = true;
                            }
                            // absent: hold the last known position
                            _ => positions[t][p] = positions[t - 1][p],
                        }
                    }
                }
                windows.push(SceneWindow {
                    source: source.to_string(),
                    start_frame: start,
                    obs_len,
                    pred_len,
                    ped_ids: ids,
                    positions,
                    presence,
                });
            }
        }
        start += stride as i64;
    }
    windows
}

/// Held-out dataset name and the datasets trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub held_out: String,
    pub train: Vec<String>,
}

/// Leave-one-out split of whole datasets into training and test windows.
pub fn leave_one_out(
    datasets: &[Dataset],
    held_out: &str,
    obs_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<(SplitSpec, Vec<SceneWindow>, Vec<SceneWindow>), DataError> {
    if !datasets.iter().any(|d| d.name == held_out) {
        return Err(DataError::UnknownDataset(held_out.to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut names = Vec::new();
    for d in datasets {
        let w = make_windows(&d.records, obs_len, pred_len, stride, &d.name);
        if d.name == held_out {
            test.extend(w);
        } else {
            names.push(d.name.clone());
            train.extend(w);
        }
    }
    Ok((
        SplitSpec {
            held_out: held_out.to_string(),
            train: names,
        },
        train,
        test,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Straight,
    HeadOn,
    Crossing,
    Overtake,
    StaticMix,
}

impl SynthKind {
    pub const ALL: [SynthKind; 5] = [
        SynthKind::Straight,
        SynthKind::HeadOn,
        SynthKind::Crossing,
        SynthKind::Overtake,
        SynthKind::StaticMix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Straight => "straight",
            SynthKind::HeadOn => "head_on",
            SynthKind::Crossing => "crossing",
            SynthKind::Overtake => "overtake",
            SynthKind::StaticMix => "static_mix",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DataError::UnknownScenario(s.to_string()))
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_scenes: usize,
    pub seed: u64,
    /// Meters per frame.
    pub speed: f64,
    /// Standard deviation of the per-coordinate Gaussian jitter, meters.
    pub jitter: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    /// Frames by which the second crossing agent trails the first at the
    /// intersection; 0 puts both there at once.
    pub crossing_lag: f64,
    /// Lateral separation of the two head-on lanes, meters.
    pub lateral_offset: f64,
    /// Peak social-force push between agents, meters per frame; 0 keeps
    /// every agent on its constant-velocity path.
    pub repulsion: f64,
    /// Per-scene crossing lag drawn uniformly from `crossing_lag ± lag_spread`.
    pub lag_spread: f64,
    /// Per-scene speed factor drawn uniformly from `1 ± speed_spread`.
    pub speed_spread: f64,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n_scenes: usize, seed: u64) -> Self {
        SynthConfig {
            kind,
            n_scenes,
            seed,
            speed: 0.4,
            jitter: 0.02,
            obs_len: 8,
            pred_len: 12,
            crossing_lag: 0.0,
            lateral_offset: 0.0,
            repulsion: 0.0,
            lag_spread: 0.0,
            speed_spread: 0.0,
        }
    }
}

/// Range of the social force, meters.
const REPULSION_RANGE: f64 = 0.5;
/// Frames ahead at which separations are anticipated.
const REPULSION_LOOKAHEAD: f64 = 2.0;
/// Clockwise turn of the push away from the neighbour, radians; agents
/// veer right.
const REPULSION_TURN: f64 = 0.6;

/// Constant-velocity paths bent by an anticipatory, right-turning
/// exponential repulsion.
fn simulate(cfg: &SynthConfig, s: &SceneParams, len: usize) -> Vec<Vec<Point>> {
    let start = ideal_positions(cfg, s, 0.0);
    let next = ideal_positions(cfg, s, 1.0);
    let vel: Vec<Point> = start.iter().zip(&next).map(|(a, b)| [b[0] - a[0], b[1] - a[1]]).collect();
    let (sin, cos) = (-REPULSION_TURN).sin_cos();
    let mut pos = start;
    let mut out = vec![pos.clone()];
    for _ in 1..len {
        let ahead: Vec<Point> = pos
            .iter()
            .zip(&vel)
            .map(|(p, v)| [p[0] + REPULSION_LOOKAHEAD * v[0], p[1] + REPULSION_LOOKAHEAD * v[1]])
            .collect();
        pos = (0..pos.len())
            .map(|i| {
                let mut f = [0.0, 0.0];
                for j in (0..pos.len()).filter(|&j| j != i) {
                    let d = [ahead[i][0] - ahead[j][0], ahead[i][1] - ahead[j][1]];
                    let n = d[0].hypot(d[1]).max(1e-9);
                    let m = cfg.repulsion * (-n / REPULSION_RANGE).exp() / n;
                    f[0] += m * (cos * d[0] - sin * d[1]);
                    f[1] += m * (sin * d[0] + cos * d[1]);
                }
                [pos[i][0] + vel[i][0] + f[0], pos[i][1] + vel[i][1] + f[1]]
            })
            .collect();
        out.push(pos.clone());
    }
    out
}

/// Per-scene draws of the randomised scenario parameters.
struct SceneParams {
    speed: f64,
    lag: f64,
}

fn ideal_positions(cfg: &SynthConfig, s: &SceneParams, t: f64) -> Vec<Point> {
    let v = s.speed;
    let mid = (cfg.obs_len + cfg.pred_len) as f64 / 2.0;
    match cfg.kind {
        SynthKind::Straight => vec![[v * t, 0.0]],
        SynthKind::HeadOn => vec![[v * t, 0.0], [2.0 * v * mid - v * t, cfg.lateral_offset]],
        SynthKind::Crossing => vec![[v * (t - mid), 0.0], [0.0, v * (t - mid - s.lag)]],
        SynthKind::Overtake => vec![[0.5 * v * t, 0.0], [v * t - 0.5 * v * mid, 0.5]],
        SynthKind::StaticMix => vec![[2.0, 1.5], [4.0, -1.5], [v * t, 0.0]],
    }
}

/// Constant-velocity scenes with Gaussian jitter.
pub fn synth_with(cfg: &SynthConfig) -> Vec<SceneWindow> {
    let mut rng = rng::stream(cfg.seed, &format!("synth/{}", cfg.kind.as_str()));
    let noise = Normal::new(0.0, cfg.jitter.max(0.0)).expect("finite sigma");
    let len = cfg.obs_len + cfg.pred_len;
    (0..cfg.n_scenes)
        .map(|s| {
            let mut params = SceneParams {
                speed: cfg.speed,
                lag: cfg.crossing_lag,
            };
            if cfg.speed_spread > 0.0 {
                params.speed *= 1.0 + rng.random_range(-cfg.speed_spread..=cfg.speed_spread);
            }
            if cfg.lag_spread > 0.0 {
                params.lag += rng.random_range(-cfg.lag_spread..=cfg.lag_spread);
            }
            let paths: Vec<Vec<Point>> = if cfg.repulsion > 0.0 {
                simulate(cfg, &params, len)
            } else {
                (0..len).map(|t| ideal_positions(cfg, &params, t as f64)).collect()
            };
            let n = paths[0].len();
            let positions: Vec<Vec<Point>> = paths
                .into_iter()
                .map(|frame| {
                    frame
                        .into_iter()
                        .map(|[x, y]| {
                            if cfg.jitter > 0.0 {
                                [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
                            } else {
                                [x, y]
                            }
                        })
                        .collect()
                })
                .collect();
            SceneWindow {
                source: format!("synth:{}", cfg.kind.as_str()),
                start_frame: (s * len) as i64,
                obs_len: cfg.obs_len,
                pred_len: cfg.pred_len,
                ped_ids: (1..=n as u64).collect(),
                positions,
                presence: vec![vec![true; n]; len],
            }
        })
        .collect()
}

/// [`synth_with`] at default speed, jitter and horizons.
pub fn synth_scenarios(kind: SynthKind, n_scenes: usize, seed: u64) -> Vec<SceneWindow> {
    synth_with(&SynthConfig::new(kind, n_scenes, seed))
}
