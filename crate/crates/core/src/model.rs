//! The spatially attentive LSTM encoder-decoder.
//!
//! Every pedestrian of a scene is encoded and decoded in lockstep. At each
//! step the hidden state fed to the LSTM is the spatially weighted hidden
//! state produced by [`crate::spatial_attention`]; in the [`Variant::Scan`]
//! decoder it additionally passes through temporal attention over the
//! encoder's spatially weighted states.
//!
//! Internally all coordinates are relative to a scene anchor (the first
//! observed position of the lowest pedestrian id), the encoder consumes
//! per-step displacements and the decoder emits displacements that are
//! accumulated into positions. Neighbours are always visited in ascending
//! id order, so per-pedestrian outputs do not depend on input ordering.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Binding, ParamStore, Shape, Tape, Var};
use crate::data::SceneWindow;
use crate::geometry::{estimate_heading, AgentKinematics, BinSpec, Point};
use crate::layers::{register_linear, register_lstm, Linear, Lstm};
use crate::rng;
use crate::spatial_attention::{attend_scene, fuse_hidden, register_domain, AgentSlot, DomainGrid, Fused, ScoreNormalization};
use crate::temporal_attention::{attend, AttentionBank};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("scene does not fit the model: {0}")]
    Scene(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Spatial attention only.
    Vanilla,
    /// Spatial attention interleaved with temporal attention in the decoder.
    Scan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateMode {
    /// LSTM inputs are per-step displacements.
    Displacement,
    /// LSTM inputs are anchor-relative positions.
    Absolute,
}

/// Which encoder representation temporal attention compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalKey {
    /// The projected `H`-sized spatially weighted state.
    Projected,
    /// The `2H` concatenation of own hidden state and spatial context.
    Concat,
}

/// Where decoder-side encounter geometry comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderGeometry {
    /// The model's own predicted positions.
    Predicted,
    /// Frozen at the last observed frame.
    LastObserved,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some(Self::$v),)* _ => None }
            }
        }
    };
}

str_enum!(Variant { Vanilla => "vanilla", Scan => "scan" });
str_enum!(CoordinateMode { Displacement => "displacement", Absolute => "absolute" });
str_enum!(TemporalKey { Projected => "projected", Concat => "concat" });
str_enum!(DecoderGeometry { Predicted => "predicted", LastObserved => "last_observed" });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub bins: BinSpec,
    pub variant: Variant,
    pub coordinate_mode: CoordinateMode,
    pub normalization: ScoreNormalization,
    pub temporal_key: TemporalKey,
    pub decoder_geometry: DecoderGeometry,
    /// Length of the generator noise vector; 0 builds a deterministic model.
    pub noise_dim: usize,
    /// When false the spatial context is forced to zero everywhere.
    pub spatial_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            hidden_dim: 32,
            obs_len: 8,
            pred_len: 12,
            bins: BinSpec::default(),
            variant: Variant::Scan,
            coordinate_mode: CoordinateMode::Displacement,
            normalization: ScoreNormalization::Masked,
            temporal_key: TemporalKey::Projected,
            decoder_geometry: DecoderGeometry::Predicted,
            noise_dim: 0,
            spatial_context: true,
        }
    }
}

impl ModelConfig {
    pub fn is_generative(&self) -> bool {
        self.noise_dim > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len < 2 {
            return Err(ModelError::Config("obs_len must be at least 2".into()));
        }
        if self.pred_len < 1 || self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(ModelError::Config("pred_len, embed_dim and hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("embed_dim", self.embed_dim.to_string()),
            kv("hidden_dim", self.hidden_dim.to_string()),
            kv("obs_len", self.obs_len.to_string()),
            kv("pred_len", self.pred_len.to_string()),
            kv("delta_theta", self.bins.delta_theta.to_string()),
            kv("delta_phi", self.bins.delta_phi.to_string()),
            kv("variant", self.variant.as_str().into()),
            kv("coordinate_mode", self.coordinate_mode.as_str().into()),
            kv("normalization", self.normalization.as_str().into()),
            kv("temporal_key", self.temporal_key.as_str().into()),
            kv("decoder_geometry", self.decoder_geometry.as_str().into()),
            kv("noise_dim", self.noise_dim.to_string()),
            kv("spatial_context", self.spatial_context.to_string()),
        ]
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || ModelError::Config(format!("bad value `{value}` for `{key}`"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "embed_dim" => self.embed_dim = num(value)?,
            "hidden_dim" => self.hidden_dim = num(value)?,
            "obs_len" => self.obs_len = num(value)?,
            "pred_len" => self.pred_len = num(value)?,
            "delta_theta" => {
                self.bins = BinSpec::new(float(value)?, self.bins.delta_phi).map_err(|e| ModelError::Config(e.to_string()))?
            }
            "delta_phi" => {
                self.bins = BinSpec::new(self.bins.delta_theta, float(value)?).map_err(|e| ModelError::Config(e.to_string()))?
            }
            "delta" => self.bins = BinSpec::uniform(float(value)?).map_err(|e| ModelError::Config(e.to_string()))?,
            "variant" => self.variant = Variant::parse(value).ok_or_else(bad)?,
            "coordinate_mode" => self.coordinate_mode = CoordinateMode::parse(value).ok_or_else(bad)?,
            "normalization" => self.normalization = ScoreNormalization::parse(value).ok_or_else(bad)?,
            "temporal_key" => self.temporal_key = TemporalKey::parse(value).ok_or_else(bad)?,
            "decoder_geometry" => self.decoder_geometry = DecoderGeometry::parse(value).ok_or_else(bad)?,
            "noise_dim" => self.noise_dim = num(value)?,
            "spatial_context" => self.spatial_context = value.parse().map_err(|_| bad())?,
            _ => return Err(ModelError::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the temporal-attention keys.
    pub fn key_dim(&self) -> usize {
        match self.temporal_key {
            TemporalKey::Projected => self.hidden_dim,
            TemporalKey::Concat => 2 * self.hidden_dim,
        }
    }
}

/// Registers every generator parameter, initialised from the `init`
/// stream of `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    init_params_with(cfg, &mut rng)
}

pub fn init_params_with<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut s = ParamStore::new();
    register_linear(&mut s, rng, "enc.embed", 2, e, true)?;
    register_lstm(&mut s, rng, "enc.lstm", e, h)?;
    register_linear(&mut s, rng, "enc.fuse", 2 * h, h, true)?;
    register_domain(&mut s, rng, "domain", &cfg.bins)?;
    register_linear(&mut s, rng, "dec.embed", 2, e, true)?;
    register_lstm(&mut s, rng, "dec.lstm", e, h)?;
    register_linear(&mut s, rng, "dec.fuse", 2 * h, h, true)?;
    register_linear(&mut s, rng, "dec.out", h, 2, true)?;
    if cfg.variant == Variant::Scan {
        register_linear(&mut s, rng, "dec.temporal", 2 * cfg.key_dim(), h, false)?;
    }
    if cfg.noise_dim > 0 {
        register_linear(&mut s, rng, "gen.noise", h + cfg.noise_dim, h, true)?;
    }
    Ok(s)
}

/// Generator parameters bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub enc_embed: Linear,
    pub enc_lstm: Lstm,
    pub enc_fuse: Linear,
    pub grid: DomainGrid,
    pub dec_embed: Linear,
    pub dec_lstm: Lstm,
    pub dec_fuse: Linear,
    pub dec_out: Linear,
    pub temporal: Option<Var>,
    pub noise: Option<Linear>,
}

impl ModelVars {
    pub fn bind(cfg: &ModelConfig, b: &Binding) -> Result<Self> {
        let h = cfg.hidden_dim;
        Ok(ModelVars {
            enc_embed: Linear::bind(b, "enc.embed")?,
            enc_lstm: Lstm::bind(b, "enc.lstm", h)?,
            enc_fuse: Linear::bind(b, "enc.fuse")?,
            grid: DomainGrid {
                values: b.get("domain")?,
                spec: cfg.bins,
            },
            dec_embed: Linear::bind(b, "dec.embed")?,
            dec_lstm: Lstm::bind(b, "dec.lstm", h)?,
            dec_fuse: Linear::bind(b, "dec.fuse")?,
            dec_out: Linear::bind(b, "dec.out")?,
            temporal: match cfg.variant {
                Variant::Scan => Some(b.get("dec.temporal.w")?),
                Variant::Vanilla => None,
            },
            noise: if cfg.noise_dim > 0 {
                Some(Linear::bind(b, "gen.noise")?)
            } else {
                None
            },
        })
    }
}

/// Recurrent state of every pedestrian.
#[derive(Debug, Clone)]
pub struct HiddenBank {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
    /// Encoder spatially weighted states per pedestrian, used as
    /// temporal-attention keys.
    pub attended: Vec<AttentionBank>,
}

impl HiddenBank {
    pub fn zeros(tape: &mut Tape, n: usize, hidden_dim: usize) -> Self {
        HiddenBank {
            hidden: (0..n).map(|_| tape.zeros(hidden_dim)).collect(),
            cell: (0..n).map(|_| tape.zeros(hidden_dim)).collect(),
            attended: vec![AttentionBank::default(); n],
        }
    }
}

/// Positions and kinematics of every pedestrian at one step, in
/// anchor-relative coordinates.
#[derive(Debug, Clone)]
pub struct StepGeometry {
    pub positions: Vec<Var>,
    pub kinematics: Vec<AgentKinematics>,
    pub present: Vec<bool>,
}

/// Canonical neighbour order: indices sorted by pedestrian id.
pub fn id_order(ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (ids[i], i));
    order
}

/// Spatial attention for the whole scene, honouring the
/// `spatial_context` switch.
pub(crate) fn spatial_step(
    tape: &mut Tape,
    cfg: &ModelConfig,
    grid: &DomainGrid,
    fuse: &Linear,
    geom: &StepGeometry,
    hidden: &[Var],
    order: &[usize],
) -> Result<Vec<Fused>> {
    let h = cfg.hidden_dim;
    let attended = if cfg.spatial_context {
        let slots: Vec<AgentSlot> = (0..hidden.len())
            .map(|p| AgentSlot {
                position: geom.positions[p],
                kinematics: geom.kinematics[p],
                hidden: hidden[p],
                present: geom.present[p],
            })
            .collect();
        attend_scene(tape, grid, cfg.normalization, fuse, &slots, order, h)?
    } else {
        vec![None; hidden.len()]
    };
    let mut out = Vec::with_capacity(hidden.len());
    for (p, a) in attended.into_iter().enumerate() {
        out.push(match a {
            Some(a) => a.fused,
            None => {
                let zero = tape.zeros(h);
                fuse_hidden(tape, fuse, hidden[p], zero)?
            }
        });
    }
    Ok(out)
}

/// Scene inputs converted to anchor-relative coordinates.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub anchor: Point,
    pub order: Vec<usize>,
    /// `[frame][ped]`, anchor-relative.
    pub rel: Vec<Vec<Point>>,
    /// Kinematics of each observed frame.
    pub kinematics: Vec<Vec<AgentKinematics>>,
    pub presence: Vec<Vec<bool>>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Per-frame headings (degrees) from consecutive positions, carrying the
/// last valid heading through stationary steps. Frame 0 uses the heading
/// of its first movement.
pub fn observed_kinematics(track: &[Point]) -> Vec<AgentKinematics> {
    let mut out = Vec::with_capacity(track.len());
    for t in 0..track.len() {
        let k = if t == 0 {
            let first = track.get(1).map_or(AgentKinematics::unknown(track[0]), |&next| {
                estimate_heading(track[0], next, &AgentKinematics::unknown(track[0]))
            });
            AgentKinematics {
                position: track[0],
                ..first
            }
        } else {
            estimate_heading(track[t - 1], track[t], &out[t - 1])
        };
        out.push(k);
    }
    out
}

impl PreparedScene {
    pub fn new(cfg: &ModelConfig, scene: &SceneWindow) -> Result<Self> {
        if scene.obs_len != cfg.obs_len || scene.pred_len != cfg.pred_len {
            return Err(ModelError::Scene(format!(
                "window is {}+{} steps, model expects {}+{}",
                scene.obs_len, scene.pred_len, cfg.obs_len, cfg.pred_len
            )));
        }
        if scene.positions.len() != scene.len() || scene.presence.len() != scene.len() {
            return Err(ModelError::Scene("frame count disagrees with obs_len + pred_len".into()));
        }
        let n = scene.num_peds();
        let order = id_order(&scene.ped_ids);
        let anchor = order.first().map_or([0.0, 0.0], |&p| scene.positions[0][p]);
        let rel: Vec<Vec<Point>> = scene
            .positions
            .iter()
            .map(|frame| frame.iter().map(|&x| sub(x, anchor)).collect())
            .collect();
        let mut kinematics = vec![Vec::with_capacity(n); cfg.obs_len];
        for p in 0..n {
            let track: Vec<Point> = rel.iter().take(cfg.obs_len).map(|frame| frame[p]).collect();
            for (t, k) in observed_kinematics(&track).into_iter().enumerate() {
                kinematics[t].push(k);
            }
        }
        Ok(PreparedScene {
            anchor,
            order,
            rel,
            kinematics,
            presence: scene.presence.clone(),
        })
    }

    pub fn num_peds(&self) -> usize {
        self.order.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Encode,
    Decode,
}

/// Observer of the recurrent state: `(tape, phase, step, bank)`.
pub type StepHook<'a> = dyn FnMut(&mut Tape, Phase, usize, &mut HiddenBank) + 'a;

/// Differentiable output of one scene.
#[derive(Debug, Clone)]
pub struct SceneForward {
    pub anchor: Point,
    /// `[ped][step]` anchor-relative predicted positions, shape `(2,)`.
    pub positions: Vec<Vec<Var>>,
    /// `[ped][step]` predicted displacements, shape `(2,)`.
    pub displacements: Vec<Vec<Var>>,
    /// Encoder final hidden states.
    pub encoder_final: Vec<Var>,
}

/// Predicted future for every pedestrian of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrediction {
    /// `[ped][step]` absolute positions, meters.
    pub positions: Vec<Vec<Point>>,
    /// `[ped][step]` per-step displacements.
    pub displacements: Vec<Vec<Point>>,
}

impl JointPrediction {
    pub fn from_forward(tape: &Tape, fwd: &SceneForward) -> Self {
        let pt = |v: Var| {
            let x = tape.value(v);
            [x[0], x[1]]
        };
        JointPrediction {
            positions: fwd
                .positions
                .iter()
                .map(|steps| {
                    steps
                        .iter()
                        .map(|&v| {
                            let [x, y] = pt(v);
                            [x + fwd.anchor[0], y + fwd.anchor[1]]
                        })
                        .collect()
                })
                .collect(),
            displacements: fwd.displacements.iter().map(|s| s.iter().map(|&v| pt(v)).collect()).collect(),
        }
    }
}

/// The encoder-decoder bound to a configuration.
#[derive(Debug, Clone)]
pub struct ScanModel {
    pub cfg: ModelConfig,
}

impl ScanModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ScanModel { cfg })
    }

    fn input_vector(&self, rel: &[Vec<Point>], t: usize, p: usize) -> Point {
        match self.cfg.coordinate_mode {
            CoordinateMode::Displacement if t == 0 => [0.0, 0.0],
            CoordinateMode::Displacement => sub(rel[t][p], rel[t - 1][p]),
            CoordinateMode::Absolute => rel[t][p],
        }
    }

    /// Encoder step at observed frame `t`: spatial attention over the
    /// current hidden states, then an LSTM update per present pedestrian.
    pub fn encode_step(&self, tape: &mut Tape, vars: &ModelVars, scene: &PreparedScene, t: usize, bank: &mut HiddenBank) -> Result<()> {
        let n = scene.num_peds();
        let geom = StepGeometry {
            positions: (0..n).map(|p| tape.vector(&scene.rel[t][p])).collect(),
            kinematics: scene.kinematics[t].clone(),
            present: scene.presence[t].clone(),
        };
        let fused = spatial_step(tape, &self.cfg, &vars.grid, &vars.enc_fuse, &geom, &bank.hidden, &scene.order)?;
        for (p, f) in fused.iter().enumerate() {
            let key = match self.cfg.temporal_key {
                TemporalKey::Projected => f.hidden,
                TemporalKey::Concat => f.concat,
            };
            bank.attended[p].push(key, geom.present[p]);
            if !geom.present[p] {
                continue;
            }
            let x = tape.vector(&self.input_vector(&scene.rel, t, p));
            let x = vars.enc_embed.forward(tape, x)?;
            let (h, c) = vars.enc_lstm.step(tape, x, f.hidden, bank.cell[p])?;
            bank.hidden[p] = h;
            bank.cell[p] = c;
        }
        Ok(())
    }

    /// Decoder step: spatial attention at `geom`, optional temporal
    /// attention, LSTM update on the embedded last input, output
    /// displacement. Returns one displacement node per pedestrian.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        geom: &StepGeometry,
        inputs: &[Var],
        order: &[usize],
        bank: &mut HiddenBank,
    ) -> Result<Vec<Var>> {
        let fused = spatial_step(tape, &self.cfg, &vars.grid, &vars.dec_fuse, geom, &bank.hidden, order)?;
        let mut out = Vec::with_capacity(fused.len());
        for (p, f) in fused.iter().enumerate() {
            let state = match vars.temporal {
                Some(w) => {
                    let query = match self.cfg.temporal_key {
                        TemporalKey::Projected => f.hidden,
                        TemporalKey::Concat => f.concat,
                    };
                    attend(tape, w, query, &bank.attended[p])?.output
                }
                None => f.hidden,
            };
            let x = vars.dec_embed.forward(tape, inputs[p])?;
            let (h, c) = vars.dec_lstm.step(tape, x, state, bank.cell[p])?;
            bank.hidden[p] = h;
            bank.cell[p] = c;
            out.push(vars.dec_out.forward(tape, h)?);
        }
        Ok(out)
    }

    /// Runs the encoder over all observed frames.
    pub fn encode(&self, tape: &mut Tape, vars: &ModelVars, scene: &PreparedScene) -> Result<HiddenBank> {
        self.encode_with(tape, vars, scene, &mut |_, _, _, _| {})
    }

    fn encode_with(&self, tape: &mut Tape, vars: &ModelVars, scene: &PreparedScene, hook: &mut StepHook<'_>) -> Result<HiddenBank> {
        let mut bank = HiddenBank::zeros(tape, scene.num_peds(), self.cfg.hidden_dim);
        for t in 0..self.cfg.obs_len {
            hook(tape, Phase::Encode, t, &mut bank);
            self.encode_step(tape, vars, scene, t, &mut bank)?;
        }
        Ok(bank)
    }

    /// Full forward pass. `noise` is required exactly when the model is
    /// generative and is shared by every pedestrian of the scene.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, scene: &PreparedScene, noise: Option<&[f64]>) -> Result<SceneForward> {
        self.forward_with(tape, vars, scene, noise, &mut |_, _, _, _| {})
    }

    /// [`ScanModel::forward`] calling `hook` before every encoder and
    /// decoder step with the current recurrent state.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        scene: &PreparedScene,
        noise: Option<&[f64]>,
        hook: &mut StepHook<'_>,
    ) -> Result<SceneForward> {
        let cfg = &self.cfg;
        let n = scene.num_peds();
        let mut bank = self.encode_with(tape, vars, scene, hook)?;
        let encoder_final = bank.hidden.clone();

        match (vars.noise, noise) {
            (Some(proj), Some(z)) => {
                if z.len() != cfg.noise_dim {
                    return Err(ModelError::Config(format!("noise of length {}, expected {}", z.len(), cfg.noise_dim)));
                }
                for p in 0..n {
                    bank.hidden[p] = crate::generative::init_decoder_hidden(tape, &proj, bank.hidden[p], z)?;
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(ModelError::Config("generative model needs a noise vector".into())),
            (None, Some(_)) => return Err(ModelError::Config("deterministic model takes no noise".into())),
        }

        let last = cfg.obs_len - 1;
        let mut cur: Vec<Point> = (0..n).map(|p| scene.rel[last][p]).collect();
        let mut cur_nodes: Vec<Var> = cur.iter().map(|x| tape.vector(x)).collect();
        let mut kin: Vec<AgentKinematics> = scene.kinematics[last].clone();
        let frozen_nodes = cur_nodes.clone();
        let frozen_kin = kin.clone();
        let mut last_input: Vec<Var> = (0..n)
            .map(|p| {
                let v = self.input_vector(&scene.rel, last, p);
                tape.vector(&v)
            })
            .collect();

        let mut positions = vec![Vec::with_capacity(cfg.pred_len); n];
        let mut displacements = vec![Vec::with_capacity(cfg.pred_len); n];
        for k in 0..cfg.pred_len {
            let present = scene.presence[cfg.obs_len + k].clone();
            let geom = match cfg.decoder_geometry {
                DecoderGeometry::Predicted => StepGeometry {
                    positions: cur_nodes.clone(),
                    kinematics: kin.clone(),
                    present,
                },
                DecoderGeometry::LastObserved => StepGeometry {
                    positions: frozen_nodes.clone(),
                    kinematics: frozen_kin.clone(),
                    present,
                },
            };
            hook(tape, Phase::Decode, k, &mut bank);
            let disp = self.decode_step(tape, vars, &geom, &last_input, &scene.order, &mut bank)?;
            for p in 0..n {
                let next = tape.add(cur_nodes[p], disp[p])?;
                let nv = tape.value(next);
                let next_pt = [nv[0], nv[1]];
                kin[p] = estimate_heading(cur[p], next_pt, &kin[p]);
                cur[p] = next_pt;
                cur_nodes[p] = next;
                last_input[p] = match cfg.coordinate_mode {
                    CoordinateMode::Displacement => disp[p],
                    CoordinateMode::Absolute => next,
                };
                positions[p].push(next);
                displacements[p].push(disp[p]);
            }
        }
        Ok(SceneForward {
            anchor: scene.anchor,
            positions,
            displacements,
            encoder_final,
        })
    }
}

/// Mean squared position error over valid future `(ped, step)` pairs, or
/// `None` when nothing is valid.
pub fn l2_loss(tape: &mut Tape, fwd: &SceneForward, scene: &PreparedScene, obs_len: usize) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (p, steps) in fwd.positions.iter().enumerate() {
        for (k, &pos) in steps.iter().enumerate() {
            let t = obs_len + k;
            if !scene.presence[t][p] {
                continue;
            }
            let truth = tape.vector(&scene.rel[t][p]);
            let diff = tape.sub(pos, truth)?;
            let sq = tape.mul(diff, diff)?;
            terms.push(tape.sum(sq)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack(&terms)?;
    Ok(Some(tape.mean(stacked)?))
}

/// Deterministic prediction on a fresh tape.
pub fn predict(scene: &SceneWindow, cfg: &ModelConfig, params: &ParamStore) -> Result<JointPrediction> {
    predict_with_noise(scene, cfg, params, None)
}

/// Prediction for one noise draw (generative models) on a fresh tape.
pub fn predict_with_noise(scene: &SceneWindow, cfg: &ModelConfig, params: &ParamStore, noise: Option<&[f64]>) -> Result<JointPrediction> {
    if scene.num_peds() == 0 {
        return Ok(JointPrediction {
            positions: Vec::new(),
            displacements: Vec::new(),
        });
    }
    let model = ScanModel::new(cfg.clone())?;
    let prepared = PreparedScene::new(cfg, scene)?;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let vars = ModelVars::bind(cfg, &binding)?;
    let fwd = model.forward(&mut tape, &vars, &prepared, noise)?;
    Ok(JointPrediction::from_forward(&tape, &fwd))
}

/// Shape check used by checkpoint loading.
pub fn expected_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Shape)>> {
    let store = init_params(cfg, 0)?;
    Ok(store.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect())
}
