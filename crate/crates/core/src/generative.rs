//! Noise-conditioned generator, spatially attentive discriminator and the
//! adversarial, variety and diversity losses.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AdamState, AutodiffError, Binding, ParamStore, Tape, Var};
use crate::geometry::{estimate_heading, AgentKinematics, Point};
use crate::layers::{register_linear, register_lstm, Linear, Lstm};
use crate::metrics;
use crate::model::{self, l2_loss, ModelConfig, ModelError, ModelVars, PreparedScene, ScanModel, SceneForward, StepGeometry};
use crate::rng;
use crate::spatial_attention::{register_domain, DomainGrid};

#[derive(Debug, Error)]
pub enum GanError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {term} loss ({value}); step aborted")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid GAN configuration: {0}")]
    Config(String),
}

impl From<AutodiffError> for GanError {
    fn from(e: AutodiffError) -> Self {
        GanError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { dim: 8 }
    }
}

impl NoiseSpec {
    /// One standard-normal draw of length `dim`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanConfig {
    /// Samples per scene for the variety loss.
    pub k: usize,
    /// Diversity-loss weight.
    pub lambda: f64,
    pub adversarial_weight: f64,
    pub variety_weight: f64,
    pub noise: NoiseSpec,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            k: 1,
            lambda: 0.0,
            adversarial_weight: 1.0,
            variety_weight: 1.0,
            noise: NoiseSpec::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if self.k < 1 {
            return Err(GanError::Config("k must be at least 1".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(GanError::Config("lambda must be non-negative".into()));
        }
        if self.noise.dim < 1 {
            return Err(GanError::Config("noise dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// `tanh(W [h; z] + b)`: the decoder's initial hidden state.
pub fn init_decoder_hidden(tape: &mut Tape, projection: &Linear, encoder_final: Var, z: &[f64]) -> crate::autodiff::Result<Var> {
    let z = tape.vector(z);
    let joined = tape.concat(&[encoder_final, z])?;
    let mixed = projection.forward(tape, joined)?;
    tape.tanh(mixed)
}

/// Registers the discriminator's parameters from the `disc-init` stream.
pub fn init_discriminator(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, GanError> {
    let mut rng = rng::stream(seed, "disc-init");
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut s = ParamStore::new();
    register_linear(&mut s, &mut rng, "disc.embed", 2, e, true)?;
    register_lstm(&mut s, &mut rng, "disc.lstm", e, h)?;
    register_linear(&mut s, &mut rng, "disc.fuse", 2 * h, h, true)?;
    register_domain(&mut s, &mut rng, "disc.domain", &cfg.bins)?;
    register_linear(&mut s, &mut rng, "disc.cls", h, 1, true)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorVars {
    pub embed: Linear,
    pub lstm: Lstm,
    pub fuse: Linear,
    pub grid: DomainGrid,
    pub cls: Linear,
}

impl DiscriminatorVars {
    pub fn bind(cfg: &ModelConfig, b: &Binding) -> crate::autodiff::Result<Self> {
        Ok(DiscriminatorVars {
            embed: Linear::bind(b, "disc.embed")?,
            lstm: Lstm::bind(b, "disc.lstm", cfg.hidden_dim)?,
            fuse: Linear::bind(b, "disc.fuse")?,
            grid: DomainGrid {
                values: b.get("disc.domain")?,
                spec: cfg.bins,
            },
            cls: Linear::bind(b, "disc.cls")?,
        })
    }
}

/// Full trajectory as tape nodes, `[frame][ped]`, with presence.
#[derive(Debug, Clone)]
pub struct TrajectoryNodes {
    pub positions: Vec<Vec<Var>>,
    pub presence: Vec<Vec<bool>>,
}

impl TrajectoryNodes {
    /// The ground-truth trajectory as constants.
    pub fn real(tape: &mut Tape, scene: &PreparedScene) -> Self {
        TrajectoryNodes {
            positions: scene.rel.iter().map(|f| f.iter().map(|p| tape.vector(p)).collect()).collect(),
            presence: scene.presence.clone(),
        }
    }

    /// Observed frames as constants followed by the generated ones. With
    /// `detach` the generated part is copied in as constants.
    pub fn generated(tape: &mut Tape, scene: &PreparedScene, fwd: &SceneForward, obs_len: usize, detach: bool) -> Self {
        let mut positions: Vec<Vec<Var>> = scene.rel[..obs_len].iter().map(|f| f.iter().map(|p| tape.vector(p)).collect()).collect();
        let steps = fwd.positions.first().map_or(0, |s| s.len());
        for k in 0..steps {
            let frame = fwd
                .positions
                .iter()
                .map(|s| {
                    if detach {
                        let v = tape.value(s[k]).to_vec();
                        tape.vector(&v)
                    } else {
                        s[k]
                    }
                })
                .collect();
            positions.push(frame);
        }
        TrajectoryNodes {
            positions,
            presence: scene.presence.clone(),
        }
    }
}

/// Per-pedestrian real/fake logits from a spatially attentive LSTM over
/// the whole trajectory.
pub fn discriminator_logits(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &DiscriminatorVars,
    traj: &TrajectoryNodes,
    order: &[usize],
) -> Result<Vec<Var>, GanError> {
    let n = order.len();
    let point = |tape: &Tape, v: Var| {
        let x = tape.value(v);
        [x[0], x[1]]
    };
    let mut hidden: Vec<Var> = (0..n).map(|_| tape.zeros(cfg.hidden_dim)).collect();
    let mut cell = hidden.clone();
    let mut kin: Vec<AgentKinematics> = Vec::with_capacity(n);
    for p in 0..n {
        let track: Vec<Point> = traj.positions.iter().take(2).map(|f| point(tape, f[p])).collect();
        kin.push(model::observed_kinematics(&track)[0]);
    }
    for t in 0..traj.positions.len() {
        if t > 0 {
            for (p, k) in kin.iter_mut().enumerate() {
                *k = estimate_heading(point(tape, traj.positions[t - 1][p]), point(tape, traj.positions[t][p]), k);
            }
        }
        let geom = StepGeometry {
            positions: traj.positions[t].clone(),
            kinematics: kin.clone(),
            present: traj.presence[t].clone(),
        };
        let fused = model::spatial_step(tape, cfg, &vars.grid, &vars.fuse, &geom, &hidden, order)?;
        for p in 0..n {
            if !geom.present[p] {
                continue;
            }
            let x = if t == 0 {
                tape.zeros(2)
            } else {
                tape.sub(traj.positions[t][p], traj.positions[t - 1][p])?
            };
            let x = vars.embed.forward(tape, x)?;
            let (h, c) = vars.lstm.step(tape, x, fused[p].hidden, cell[p])?;
            hidden[p] = h;
            cell[p] = c;
        }
    }
    let mut logits = Vec::with_capacity(n);
    for h in hidden {
        let l = vars.cls.forward(tape, h)?;
        logits.push(tape.index(l, 0)?);
    }
    Ok(logits)
}

/// Real-probabilities of every pedestrian of `scene` (ground truth when
/// `fake` is `None`).
pub fn discriminate(cfg: &ModelConfig, disc: &ParamStore, scene: &PreparedScene, fake: Option<&[Vec<Point>]>) -> Result<Vec<f64>, GanError> {
    let mut tape = Tape::new();
    let b = disc.bind(&mut tape);
    let vars = DiscriminatorVars::bind(cfg, &b)?;
    let mut traj = TrajectoryNodes::real(&mut tape, scene);
    if let Some(fake) = fake {
        for (p, steps) in fake.iter().enumerate() {
            for (k, pt) in steps.iter().enumerate() {
                traj.positions[cfg.obs_len + k][p] = tape.vector(&[pt[0] - scene.anchor[0], pt[1] - scene.anchor[1]]);
            }
        }
    }
    let logits = discriminator_logits(&mut tape, cfg, &vars, &traj, &scene.order)?;
    Ok(logits.iter().map(|&l| crate::autodiff::sigmoid(tape.item(l))).collect())
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> crate::autodiff::Result<Var> {
    let s = tape.stack(terms)?;
    tape.mean(s)
}

/// Mean over pedestrians of `softplus(-l_real) + softplus(l_fake)`.
pub fn discriminator_loss(tape: &mut Tape, real: &[Var], fake: &[Var]) -> crate::autodiff::Result<Var> {
    let mut terms = Vec::with_capacity(real.len() + fake.len());
    for &l in real {
        let n = tape.neg(l)?;
        terms.push(tape.softplus(n)?);
    }
    let r = mean_of(tape, &terms)?;
    terms.clear();
    for &l in fake {
        terms.push(tape.softplus(l)?);
    }
    let f = mean_of(tape, &terms)?;
    tape.add(r, f)
}

/// Non-saturating generator loss `mean softplus(-l_fake) = -log D(fake)`.
pub fn adversarial_loss(tape: &mut Tape, fake: &[Var]) -> crate::autodiff::Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for &l in fake {
        let n = tape.neg(l)?;
        terms.push(tape.softplus(n)?);
    }
    mean_of(tape, &terms)
}

fn sample_points(tape: &Tape, fwd: &SceneForward) -> Vec<Vec<Point>> {
    fwd.positions
        .iter()
        .map(|s| {
            s.iter()
                .map(|&v| {
                    let x = tape.value(v);
                    [x[0], x[1]]
                })
                .collect()
        })
        .collect()
}

/// L2 loss of the minimum-ADE sample and its index. Only the selected
/// sample's nodes enter the loss.
pub fn variety_loss(
    tape: &mut Tape,
    samples: &[SceneForward],
    scene: &PreparedScene,
    obs_len: usize,
) -> Result<Option<(Var, usize)>, GanError> {
    if samples.is_empty() {
        return Err(GanError::Config("variety loss needs at least one sample".into()));
    }
    let pred_len = samples[0].positions.first().map_or(0, |s| s.len());
    let n = scene.num_peds();
    let truth: Vec<Vec<Point>> = (0..n).map(|p| (0..pred_len).map(|k| scene.rel[obs_len + k][p]).collect()).collect();
    let mask: Vec<Vec<bool>> = (0..n).map(|p| (0..pred_len).map(|k| scene.presence[obs_len + k][p]).collect()).collect();
    let points: Vec<Vec<Vec<Point>>> = samples.iter().map(|s| sample_points(tape, s)).collect();
    let best = match metrics::best_sample_index(&points, &truth, &mask) {
        Ok(i) => i,
        Err(metrics::MetricError::Empty) => return Ok(None),
        Err(e) => return Err(GanError::Config(e.to_string())),
    };
    Ok(l2_loss(tape, &samples[best], scene, obs_len)?.map(|l| (l, best)))
}

/// `(1/N) Σ_p Σ_{i<j} exp(-d_ij)` where `d_ij` is the mean distance over
/// valid steps between samples `i` and `j` of pedestrian `p`. Samples are
/// `[sample][ped][step]`, `mask` is `[ped][step]`. Zero for fewer than two
/// samples.
pub fn diversity_loss(tape: &mut Tape, samples: &[Vec<Vec<Var>>], mask: &[Vec<bool>]) -> crate::autodiff::Result<Var> {
    let mut terms = Vec::new();
    let mut peds = 0usize;
    if samples.len() >= 2 {
        for (p, m) in mask.iter().enumerate() {
            let valid: Vec<usize> = (0..m.len()).filter(|&t| m[t]).collect();
            if valid.is_empty() {
                continue;
            }
            peds += 1;
            for i in 0..samples.len() {
                for j in i + 1..samples.len() {
                    let mut dists = Vec::with_capacity(valid.len());
                    for &t in &valid {
                        let diff = tape.sub(samples[i][p][t], samples[j][p][t])?;
                        dists.push(tape.norm(diff)?);
                    }
                    let d = mean_of(tape, &dists)?;
                    let nd = tape.neg(d)?;
                    terms.push(tape.exp(nd)?);
                }
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / peds as f64)
}

/// Mean over pedestrians and unordered sample pairs of the mean per-step
/// distance; the spread statistic used to compare diversity settings.
pub fn mean_pairwise_distance(samples: &[Vec<Vec<Point>>], mask: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, m) in mask.iter().enumerate() {
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let mut s = 0.0;
                let mut c = 0usize;
                for t in (0..m.len()).filter(|&t| m[t]) {
                    let (a, b) = (samples[i][p][t], samples[j][p][t]);
                    s += (a[0] - b[0]).hypot(a[1] - b[1]);
                    c += 1;
                }
                if c > 0 {
                    total += s / c as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Batch means of every loss term of one GAN step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub discriminator: f64,
    pub adversarial: f64,
    pub variety: f64,
    pub diversity: f64,
    pub generator: f64,
    /// Mean real-probability assigned to ground truth.
    pub real_score: f64,
    /// Mean real-probability assigned to generated trajectories.
    pub fake_score: f64,
    /// Generator forward passes of the generator step (`batch · k`).
    pub generator_forward_passes: usize,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("discriminator", self.discriminator),
            ("adversarial", self.adversarial),
            ("variety", self.variety),
            ("diversity", self.diversity),
            ("generator", self.generator),
            ("real_score", self.real_score),
            ("fake_score", self.fake_score),
        ]
    }
}

fn finite(term: &'static str, value: f64) -> Result<f64, GanError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GanError::NonFinite { term, value })
    }
}

/// Mutable state touched by one GAN step.
pub struct GanParts<'a, R: Rng> {
    pub generator: &'a mut ParamStore,
    pub discriminator: &'a mut ParamStore,
    pub generator_opt: &'a mut AdamState,
    pub discriminator_opt: &'a mut AdamState,
    pub noise_rng: &'a mut R,
}

/// One discriminator update on detached generated samples, then one
/// generator update on `weight_adv · adversarial + weight_var · variety +
/// λ · diversity`. Gradients are averaged over the scenes of `batch`.
pub fn gan_train_step<R: Rng>(model: &ScanModel, batch: &[PreparedScene], cfg: &GanConfig, parts: GanParts<'_, R>) -> Result<LossReport, GanError> {
    cfg.validate()?;
    let mcfg = &model.cfg;
    if mcfg.noise_dim != cfg.noise.dim {
        return Err(GanError::Config(format!(
            "generator noise dimension {} differs from GAN noise dimension {}",
            mcfg.noise_dim, cfg.noise.dim
        )));
    }
    let scenes: Vec<&PreparedScene> = batch.iter().filter(|s| s.num_peds() > 0).collect();
    let mut report = LossReport::default();
    if scenes.is_empty() {
        return Ok(report);
    }
    let scale = 1.0 / scenes.len() as f64;
    let GanParts {
        generator,
        discriminator,
        generator_opt,
        discriminator_opt,
        noise_rng,
    } = parts;

    generator.zero_grad();
    discriminator.zero_grad();
    let mut tape = Tape::new();
    for scene in &scenes {
        tape.reset();
        let gb = generator.bind(&mut tape);
        let gvars = ModelVars::bind(mcfg, &gb)?;
        let z = cfg.noise.sample(noise_rng);
        let fwd = model.forward(&mut tape, &gvars, scene, Some(&z))?;
        let db = discriminator.bind(&mut tape);
        let dvars = DiscriminatorVars::bind(mcfg, &db)?;
        let real = TrajectoryNodes::real(&mut tape, scene);
        let fake = TrajectoryNodes::generated(&mut tape, scene, &fwd, mcfg.obs_len, true);
        let lr = discriminator_logits(&mut tape, mcfg, &dvars, &real, &scene.order)?;
        let lf = discriminator_logits(&mut tape, mcfg, &dvars, &fake, &scene.order)?;
        let loss = discriminator_loss(&mut tape, &lr, &lf)?;
        report.discriminator += finite("discriminator", tape.item(loss))? * scale;
        let mean_prob = |tape: &Tape, ls: &[Var]| ls.iter().map(|&l| crate::autodiff::sigmoid(tape.item(l))).sum::<f64>() / ls.len() as f64;
        report.real_score += mean_prob(&tape, &lr) * scale;
        report.fake_score += mean_prob(&tape, &lf) * scale;
        tape.backward(loss)?;
        discriminator.accumulate_grads(&tape, &db, scale);
    }
    discriminator_opt.step(discriminator);

    for scene in &scenes {
        tape.reset();
        let gb = generator.bind(&mut tape);
        let gvars = ModelVars::bind(mcfg, &gb)?;
        let db = discriminator.bind(&mut tape);
        let dvars = DiscriminatorVars::bind(mcfg, &db)?;
        let mut samples = Vec::with_capacity(cfg.k);
        let mut adv_terms = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let z = cfg.noise.sample(noise_rng);
            let fwd = model.forward(&mut tape, &gvars, scene, Some(&z))?;
            report.generator_forward_passes += 1;
            let fake = TrajectoryNodes::generated(&mut tape, scene, &fwd, mcfg.obs_len, false);
            let lf = discriminator_logits(&mut tape, mcfg, &dvars, &fake, &scene.order)?;
            adv_terms.push(adversarial_loss(&mut tape, &lf)?);
            samples.push(fwd);
        }
        let adv = mean_of(&mut tape, &adv_terms)?;
        let variety = variety_loss(&mut tape, &samples, scene, mcfg.obs_len)?.map(|(v, _)| v);
        let nodes: Vec<Vec<Vec<Var>>> = samples.iter().map(|s| s.positions.clone()).collect();
        let mask: Vec<Vec<bool>> = (0..scene.num_peds())
            .map(|p| (0..mcfg.pred_len).map(|k| scene.presence[mcfg.obs_len + k][p]).collect())
            .collect();
        let div = diversity_loss(&mut tape, &nodes, &mask)?;

        let adv_v = finite("adversarial", tape.item(adv))?;
        let var_v = finite("variety", variety.map_or(0.0, |v| tape.item(v)))?;
        let div_v = finite("diversity", tape.item(div))?;
        let mut parts = vec![tape.scale(adv, cfg.adversarial_weight)?];
        if let Some(v) = variety {
            parts.push(tape.scale(v, cfg.variety_weight)?);
        }
        if cfg.lambda != 0.0 {
            parts.push(tape.scale(div, cfg.lambda)?);
        }
        let total = tape.add_all(&parts)?;
        let total_v = finite("generator", tape.item(total))?;
        report.adversarial += adv_v * scale;
        report.variety += var_v * scale;
        report.diversity += div_v * scale;
        report.generator += total_v * scale;
        tape.backward(total)?;
        generator.accumulate_grads(&tape, &gb, scale);
    }
    discriminator.zero_grad();
    generator_opt.step(generator);
    Ok(report)
}

/// `k` seeded joint samples for one scene, each `[ped][step]` absolute.
pub fn sample_predictions<R: Rng + ?Sized>(
    model: &ScanModel,
    params: &ParamStore,
    scene: &PreparedScene,
    k: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<Vec<Vec<Point>>>, GanError> {
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        tape.reset();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(&model.cfg, &b)?;
        let z = noise.sample(rng);
        let fwd = model.forward(&mut tape, &vars, scene, Some(&z))?;
        out.push(model::JointPrediction::from_forward(&tape, &fwd).positions);
    }
    Ok(out)
}
