#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scan_core::autodiff::{Binding, ParamStore, Shape, Tape, Var};
use scan_core::data::SceneWindow;
use scan_core::geometry::Point;
use scan_core::model::{init_params, l2_loss, HiddenBank, JointPrediction, ModelConfig, ModelVars, Phase, PreparedScene, ScanModel, Variant};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small model for gradient checks: 3 observed and 2 predicted steps.
pub fn tiny_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        embed_dim: 3,
        hidden_dim: 4,
        obs_len: 3,
        pred_len: 2,
        ..ModelConfig::default()
    }
}

/// `n` walkers starting within a 2 m box, each on a jittered straight
/// line at roughly walking speed.
pub fn random_scene<R: Rng>(rng: &mut R, n: usize, obs_len: usize, pred_len: usize) -> SceneWindow {
    let len = obs_len + pred_len;
    let starts: Vec<Point> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let vels: Vec<Point> = (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s: f64 = rng.random_range(0.2..0.5);
            [s * a.cos(), s * a.sin()]
        })
        .collect();
    let positions = (0..len)
        .map(|t| {
            (0..n)
                .map(|p| {
                    [
                        starts[p][0] + vels[p][0] * t as f64 + rng.random_range(-0.02..0.02),
                        starts[p][1] + vels[p][1] * t as f64 + rng.random_range(-0.02..0.02),
                    ]
                })
                .collect()
        })
        .collect();
    SceneWindow {
        source: "test".into(),
        start_frame: 0,
        obs_len,
        pred_len,
        ped_ids: (0..n as u64).map(|i| 10 + 3 * i).collect(),
        positions,
        presence: vec![vec![true; n]; len],
    }
}

/// Every coordinate rounded to a multiple of 2^-20.
pub fn quantized(scene: &SceneWindow) -> SceneWindow {
    let q = |x: f64| (x * 1048576.0).round() / 1048576.0;
    let mut s = scene.clone();
    for frame in &mut s.positions {
        for p in frame.iter_mut() {
            *p = [q(p[0]), q(p[1])];
        }
    }
    s
}

/// Worst per-scalar relative error between tape gradients and central
/// differences of `loss` with respect to every entry of `store`.
pub fn fd_check_store<F>(store: &mut ParamStore, analytic: &[Vec<f64>], mut loss: F) -> (f64, String)
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = (0.0, String::new());
    for (name, grads) in names.iter().zip(analytic) {
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.get(name).unwrap().values[i];
            store.get_mut(name).unwrap().values[i] = orig + FD_STEP;
            let up = loss(store);
            store.get_mut(name).unwrap().values[i] = orig - FD_STEP;
            let down = loss(store);
            store.get_mut(name).unwrap().values[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {a} numeric {numeric}"));
            }
        }
    }
    worst
}

/// Gradients of every parameter of `store` under `binding`, in store
/// order.
pub fn store_grads(tape: &Tape, store: &ParamStore, binding: &Binding) -> Vec<Vec<f64>> {
    store.names().map(|n| tape.grad(binding.get(n).unwrap())).collect()
}

/// One random spatial-attention configuration.
#[derive(Debug, Clone)]
pub struct AttnCase {
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub present: Vec<bool>,
    pub hidden: Vec<Vec<f64>>,
    pub domain: Vec<f64>,
    pub delta: (f64, f64),
}

pub const ATTN_HIDDEN: usize = 5;

impl AttnCase {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(2..=4);
        let widths = [30.0, 45.0, 60.0, 90.0];
        let delta = (widths[rng.random_range(0..4)], widths[rng.random_range(0..4)]);
        let cells = (360.0 / delta.0) as usize * (360.0 / delta.1) as usize;
        AttnCase {
            positions: (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect(),
            headings: (0..n).map(|_| rng.random_range(0.0..360.0)).collect(),
            present: (0..n).map(|_| rng.random_bool(0.85)).collect(),
            hidden: (0..n).map(|_| (0..ATTN_HIDDEN).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            domain: (0..cells).map(|_| rng.random_range(0.5..5.0)).collect(),
            delta,
        }
    }

    /// Plain-loop reference: per present target, neighbour weights in
    /// index order and the context vector.
    pub fn brute_force(&self) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        let n = self.positions.len();
        let cols = (360.0 / self.delta.1) as usize;
        let wrap = |a: f64| {
            let mut a = a % 360.0;
            if a < 0.0 {
                a += 360.0;
            }
            if a >= 360.0 {
                a -= 360.0;
            }
            a
        };
        let mut out = Vec::new();
        for i in 0..n {
            if !self.present[i] {
                out.push(None);
                continue;
            }
            let mut scores = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                if !self.present[j] {
                    scores.push((j, 0.0, false));
                    continue;
                }
                let dx = self.positions[j][0] - self.positions[i][0];
                let dy = self.positions[j][1] - self.positions[i][1];
                let d = (dx * dx + dy * dy).sqrt();
                let theta = wrap(dy.atan2(dx) * 180.0 / std::f64::consts::PI - self.headings[i]);
                let phi = wrap(self.headings[j] - self.headings[i]);
                let bi = (theta / self.delta.0).floor() as usize;
                let bj = (phi / self.delta.1).floor() as usize;
                let s = (self.domain[bi * cols + bj] - d).max(0.0);
                scores.push((j, s, s > 0.0));
            }
            let z: f64 = scores.iter().filter(|s| s.2).map(|s| s.1.exp()).sum();
            let weights: Vec<f64> = scores.iter().map(|s| if s.2 { s.1.exp() / z } else { 0.0 }).collect();
            let mut context = vec![0.0; ATTN_HIDDEN];
            for (w, s) in weights.iter().zip(&scores) {
                for (c, h) in context.iter_mut().zip(&self.hidden[s.0]) {
                    *c += w * h;
                }
            }
            out.push(Some((weights, context)));
        }
        out
    }

    /// The same quantities from the attention module.
    pub fn module(&self) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        use scan_core::geometry::{AgentKinematics, BinSpec};
        use scan_core::layers::{register_linear, Linear};
        use scan_core::spatial_attention::{attend_scene, AgentSlot, DomainGrid, ScoreNormalization};
        let n = self.positions.len();
        let spec = BinSpec::new(self.delta.0, self.delta.1).unwrap();
        let mut store = ParamStore::new();
        register_linear(&mut store, &mut rng(0), "fuse", 2 * ATTN_HIDDEN, ATTN_HIDDEN, true).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let fuse = Linear::bind(&b, "fuse").unwrap();
        let values = tape
            .leaf(Shape::matrix(spec.m, spec.n), self.domain.clone())
            .unwrap();
        let grid = DomainGrid { values, spec };
        let slots: Vec<AgentSlot> = (0..n)
            .map(|p| AgentSlot {
                position: tape.vector(&self.positions[p]),
                kinematics: AgentKinematics::new(self.positions[p], self.headings[p]),
                hidden: tape.vector(&self.hidden[p]),
                present: self.present[p],
            })
            .collect();
        let order: Vec<usize> = (0..n).collect();
        let att = attend_scene(&mut tape, &grid, ScoreNormalization::Masked, &fuse, &slots, &order, ATTN_HIDDEN).unwrap();
        att.into_iter()
            .map(|a| {
                a.map(|a| {
                    let w = tape.value(a.weights.normalized).to_vec();
                    let c = tape.value(a.fused.concat)[ATTN_HIDDEN..].to_vec();
                    (w, c)
                })
            })
            .collect()
    }
}

/// Largest absolute disagreement between two attention outputs, or
/// `None` when their structure differs.
pub fn attention_gap(a: &[Option<(Vec<f64>, Vec<f64>)>], b: &[Option<(Vec<f64>, Vec<f64>)>]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut gap: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some((wa, ca)), Some((wb, cb))) => {
                if wa.len() != wb.len() || ca.len() != cb.len() {
                    return None;
                }
                for (p, q) in wa.iter().chain(ca).zip(wb.iter().chain(cb)) {
                    gap = gap.max((p - q).abs());
                }
            }
            _ => return None,
        }
    }
    Some(gap)
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Worst relative error of `d/dx sum(w * f(x))` over every input entry,
/// with `w` a fixed random weighting of the output.
pub fn op_error(inputs: &[(Shape, Vec<f64>)], build: &Build) -> f64 {
    let eval = |values: &[Vec<f64>]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((s, _), v)| tape.leaf(s.clone(), v.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &leaves);
        let n = tape.value(out).len();
        let mut r = rng(99);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = tape.leaf(tape.shape(out).clone(), w).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, leaves, loss)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (mut tape, leaves, loss) = eval(&base);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, &leaf) in leaves.iter().enumerate() {
        let g = tape.grad(leaf);
        for i in 0..base[li].len() {
            let mut up = base.clone();
            up[li][i] += FD_STEP;
            let mut down = base.clone();
            down[li][i] -= FD_STEP;
            let (t1, _, l1) = eval(&up);
            let (t2, _, l2) = eval(&down);
            let numeric = (t1.item(l1) - t2.item(l2)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    worst
}

pub fn values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values bounded away from 0 so ReLU kinks are out of reach.
pub fn off_zero(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.1..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn model_loss(cfg: &ModelConfig, params: &ParamStore, scene: &PreparedScene, z: Option<&[f64]>, tape: &mut Tape) -> (Var, Binding) {
    let model = ScanModel::new(cfg.clone()).unwrap();
    let b = params.bind(tape);
    let vars = ModelVars::bind(cfg, &b).unwrap();
    let fwd = model.forward(tape, &vars, scene, z).unwrap();
    (l2_loss(tape, &fwd, scene, cfg.obs_len).unwrap().unwrap(), b)
}

/// Whole-model check on one micro-scene; also asserts that the domain
/// grid received gradient when `expect_domain_grad`.
pub fn check_model(cfg: ModelConfig, peds: usize, seed: u64, expect_domain_grad: bool) {
    let variant = cfg.variant;
    let (worst, at) = model_fd_error(cfg, peds, seed, expect_domain_grad);
    assert!(worst < 1e-3, "{variant:?}: {worst} at {at}");
}

/// Worst relative gradient error of the L2 loss over every parameter.
pub fn model_fd_error(cfg: ModelConfig, peds: usize, seed: u64, expect_domain_grad: bool) -> (f64, String) {
    let scene = random_scene(&mut rng(seed), peds, cfg.obs_len, cfg.pred_len);
    let prepared = PreparedScene::new(&cfg, &scene).unwrap();
    let mut params = init_params(&cfg, seed).unwrap();
    let z: Option<Vec<f64>> = cfg.is_generative().then(|| values(seed + 7, cfg.noise_dim, -1.0, 1.0));
    let mut tape = Tape::new();
    let (loss, b) = model_loss(&cfg, &params, &prepared, z.as_deref(), &mut tape);
    tape.backward(loss).unwrap();
    let analytic = store_grads(&tape, &params, &b);
    if expect_domain_grad {
        let gi = params.names().position(|n| n == "domain").unwrap();
        assert!(analytic[gi].iter().any(|&g| g != 0.0), "domain grid got no gradient");
    }
    fd_check_store(&mut params, &analytic, |p| {
        let mut t = Tape::new();
        let (l, _) = model_loss(&cfg, p, &prepared, z.as_deref(), &mut t);
        t.item(l)
    })
}

/// Runs a scene of `n` nearby walkers plus one walker 60 m away, once
/// untouched and once with the far walker's hidden state replaced by
/// noise at a random encoder or decoder step.
pub fn far_neighbour_runs(cfg: &ModelConfig, params: &ParamStore, seed: u64, n: usize) -> (JointPrediction, JointPrediction) {
    let mut scene = random_scene(&mut rng(seed), n + 1, cfg.obs_len, cfg.pred_len);
    for frame in &mut scene.positions {
        frame[n][0] += 60.0;
    }
    let prepared = PreparedScene::new(cfg, &scene).unwrap();
    let model = ScanModel::new(cfg.clone()).unwrap();
    let mut r = rng(seed.wrapping_add(1));
    let phase = if r.random_bool(0.5) { Phase::Encode } else { Phase::Decode };
    let step = r.random_range(1..cfg.pred_len.min(cfg.obs_len));
    let noise: Vec<f64> = (0..cfg.hidden_dim).map(|_| r.random_range(-5.0..5.0)).collect();
    let run = |hooked: bool| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(cfg, &b).unwrap();
        let mut hook = |tape: &mut Tape, ph: Phase, t: usize, bank: &mut HiddenBank| {
            if hooked && ph == phase && t == step {
                bank.hidden[n] = tape.vector(&noise);
            }
        };
        let fwd = model.forward_with(&mut tape, &vars, &prepared, None, &mut hook).unwrap();
        JointPrediction::from_forward(&tape, &fwd)
    };
    let base = run(false);
    let perturbed = run(true);
    assert_ne!(base.positions[n], perturbed.positions[n], "perturbation must reach the far walker");
    (base, perturbed)
}

