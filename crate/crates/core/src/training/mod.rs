//! Training loops, checkpoints and evaluation.

mod checkpoint;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdamState, ParamStore, Tape};
use crate::data::{DataError, SceneWindow};
use crate::generative::{self, GanConfig, GanError, GanParts, NoiseSpec};
use crate::geometry::Point;
use crate::metrics::{self, CollisionTally, DisplacementSums, MetricError, MetricReport};
use crate::model::{self, l2_loss, JointPrediction, ModelConfig, ModelError, ModelVars, PreparedScene, ScanModel};
use crate::rng::{self, StreamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite {term} loss ({value}); training aborted")]
    NonFinite { term: &'static str, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<GanError> for TrainError {
    fn from(e: GanError) -> Self {
        match e {
            GanError::NonFinite { term, value } => TrainError::NonFinite { term, value },
            GanError::Model(m) => TrainError::Model(m),
            GanError::Config(c) => TrainError::Config(c),
        }
    }
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Present for adversarial training.
    pub gan: Option<GanConfig>,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 0.001,
            epochs: 200,
            seed: 0,
            gan: None,
            eval_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for adversarial training (400 epochs).
    pub fn gan_default() -> Self {
        TrainConfig {
            epochs: 400,
            gan: Some(GanConfig::default()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be non-negative".into()));
        }
        if let Some(g) = &self.gan {
            g.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("shuffle".into(), self.shuffle.to_string()),
            ("gan".into(), self.gan.is_some().to_string()),
        ];
        if let Some(g) = &self.gan {
            kv.push(("k".into(), g.k.to_string()));
            kv.push(("lambda".into(), g.lambda.to_string()));
            kv.push(("adversarial_weight".into(), g.adversarial_weight.to_string()));
            kv.push(("variety_weight".into(), g.variety_weight.to_string()));
            kv.push(("noise_dim".into(), g.noise.dim.to_string()));
        }
        kv
    }

    /// Applies one `key=value` setting. GAN keys switch adversarial
    /// training on.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || TrainError::Config(format!("bad value `{value}` for `{key}`"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "batch_size" => self.batch_size = num(value)?,
            "lr" => self.lr = float(value)?,
            "epochs" => self.epochs = num(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "eval_every" => self.eval_every = num(value)?,
            "shuffle" => self.shuffle = value.parse().map_err(|_| bad())?,
            "gan" => {
                let on: bool = value.parse().map_err(|_| bad())?;
                self.gan = if on { Some(self.gan.unwrap_or_default()) } else { None };
            }
            "k" | "lambda" | "adversarial_weight" | "variety_weight" | "noise_dim" => {
                let g = self.gan.get_or_insert_with(GanConfig::default);
                match key {
                    "k" => g.k = num(value)?,
                    "lambda" => g.lambda = float(value)?,
                    "adversarial_weight" => g.adversarial_weight = float(value)?,
                    "variety_weight" => g.variety_weight = float(value)?,
                    _ => g.noise = NoiseSpec { dim: num(value)? },
                }
            }
            _ => return Err(TrainError::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if map.get("gan").map(String::as_str) == Some("true") {
            cfg.gan = Some(GanConfig::default());
        }
        for (k, v) in map {
            if k != "gan" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One point of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

pub fn curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,term,value\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.term, r.value));
    }
    out
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub epoch: usize,
    pub batch: usize,
    /// Batch-mean loss terms.
    pub terms: Vec<(&'static str, f64)>,
    pub generator_forward_passes: usize,
    /// True when this step finished an epoch.
    pub epoch_done: bool,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ScanModel,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub opt: AdamState,
    pub disc: Option<(ParamStore, AdamState)>,
    pub epoch: usize,
    pub cursor: usize,
    pub steps: u64,
    pub order: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    epoch_sums: BTreeMap<String, (f64, f64)>,
    /// Completed-epoch means, `train_<term>` for loss terms.
    pub curve: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(mut model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(g) = &cfg.gan {
            model_cfg.noise_dim = g.noise.dim;
        } else if model_cfg.noise_dim > 0 {
            return Err(TrainError::Config("a generative model needs GAN training settings".into()));
        }
        let model = ScanModel::new(model_cfg)?;
        let params = model::init_params(&model.cfg, cfg.seed)?;
        let opt = AdamState::new(&params, cfg.lr);
        let disc = match cfg.gan {
            Some(_) => {
                let d = generative::init_discriminator(&model.cfg, cfg.seed)?;
                let o = AdamState::new(&d, cfg.lr);
                Some((d, o))
            }
            None => None,
        };
        Ok(Trainer {
            shuffle_rng: rng::stream(cfg.seed, "shuffle"),
            noise_rng: rng::stream(cfg.seed, "noise"),
            model,
            cfg,
            params,
            opt,
            disc,
            epoch: 0,
            cursor: 0,
            steps: 0,
            order: Vec::new(),
            epoch_sums: BTreeMap::new(),
            curve: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let restore = |name: &str| {
            ck.rng
                .get(name)
                .map(StreamState::restore)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing rng stream `{name}`")))
        };
        Ok(Trainer {
            shuffle_rng: restore("shuffle")?,
            noise_rng: restore("noise")?,
            model: ScanModel::new(ck.model)?,
            cfg: ck.train,
            params: ck.params,
            opt: ck.opt,
            disc: ck.disc,
            epoch: ck.epoch,
            cursor: ck.cursor,
            steps: ck.steps,
            order: ck.order,
            epoch_sums: ck.epoch_sums,
            curve: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut rng = BTreeMap::new();
        rng.insert("shuffle".to_string(), StreamState::capture(self.cfg.seed, &self.shuffle_rng));
        rng.insert("noise".to_string(), StreamState::capture(self.cfg.seed, &self.noise_rng));
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            epoch: self.epoch,
            cursor: self.cursor,
            steps: self.steps,
            order: self.order.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            disc: self.disc.clone(),
            rng,
            epoch_sums: self.epoch_sums.clone(),
        }
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Runs the next batch of the current epoch.
    pub fn step_batch(&mut self, scenes: &[PreparedScene]) -> Result<StepOutcome> {
        if scenes.is_empty() {
            return Err(TrainError::Config("no training windows".into()));
        }
        if self.cursor == 0 || self.order.len() != scenes.len() {
            self.order = (0..scenes.len()).collect();
            if self.cfg.shuffle {
                self.order.shuffle(&mut self.shuffle_rng);
            }
            self.cursor = 0;
        }
        let bs = self.cfg.batch_size;
        let start = self.cursor * bs;
        let end = (start + bs).min(scenes.len());
        let batch: Vec<PreparedScene> = self.order[start..end].iter().map(|&i| scenes[i].clone()).collect();

        let (terms, passes) = match (&self.cfg.gan, &mut self.disc) {
            (Some(gan), Some((disc, disc_opt))) => {
                let report = generative::gan_train_step(
                    &self.model,
                    &batch,
                    gan,
                    GanParts {
                        generator: &mut self.params,
                        discriminator: disc,
                        generator_opt: &mut self.opt,
                        discriminator_opt: disc_opt,
                        noise_rng: &mut self.noise_rng,
                    },
                )?;
                (report.terms().to_vec(), report.generator_forward_passes)
            }
            _ => {
                let loss = deterministic_step(&self.model, &mut self.params, &mut self.opt, &batch)?;
                (vec![("l2", loss)], batch.len())
            }
        };
        let weight = batch.len() as f64;
        for (term, v) in &terms {
            let e = self.epoch_sums.entry(term.to_string()).or_insert((0.0, 0.0));
            e.0 += v * weight;
            e.1 += weight;
        }
        let outcome_batch = self.cursor;
        self.steps += 1;
        self.cursor += 1;
        let epoch_done = self.cursor >= self.batches_per_epoch(scenes.len());
        let outcome_epoch = self.epoch;
        if epoch_done {
            for (term, (s, w)) in std::mem::take(&mut self.epoch_sums) {
                self.curve.push(LossRecord {
                    epoch: self.epoch,
                    term: format!("train_{term}"),
                    value: s / w,
                });
            }
            self.epoch += 1;
            self.cursor = 0;
        }
        Ok(StepOutcome {
            epoch: outcome_epoch,
            batch: outcome_batch,
            terms,
            generator_forward_passes: passes,
            epoch_done,
        })
    }

    /// Runs batches until the current epoch finishes.
    pub fn run_epoch(&mut self, scenes: &[PreparedScene]) -> Result<()> {
        loop {
            if self.step_batch(scenes)?.epoch_done {
                return Ok(());
            }
        }
    }

    /// Trains until `cfg.epochs` epochs are complete, evaluating on `eval`
    /// at the configured cadence.
    pub fn fit(&mut self, scenes: &[PreparedScene], eval: Option<&[SceneWindow]>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(scenes)?;
            if let (Some(eval), true) = (eval, self.cfg.eval_every > 0 && self.epoch.is_multiple_of(self.cfg.eval_every)) {
                let k = if self.model.cfg.is_generative() { Some(20) } else { None };
                let report = evaluate_params(&self.model.cfg, &self.params, eval, k, self.cfg.seed)?;
                let e = self.epoch - 1;
                self.curve.push(LossRecord {
                    epoch: e,
                    term: "eval_ade".into(),
                    value: report.ade,
                });
                self.curve.push(LossRecord {
                    epoch: e,
                    term: "eval_fde".into(),
                    value: report.fde,
                });
            }
        }
        Ok(())
    }
}

/// One Adam step on the batch-mean L2 loss. Returns the batch-mean loss.
pub fn deterministic_step(model: &ScanModel, params: &mut ParamStore, opt: &mut AdamState, batch: &[PreparedScene]) -> Result<f64> {
    let cfg = &model.cfg;
    let obs = cfg.obs_len;
    let scored: Vec<&PreparedScene> = batch
        .iter()
        .filter(|s| s.num_peds() > 0 && s.presence[obs..].iter().any(|f| f.iter().any(|&b| b)))
        .collect();
    params.zero_grad();
    if scored.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / scored.len() as f64;
    let mut total = 0.0;
    let mut tape = Tape::new();
    for scene in scored {
        tape.reset();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(cfg, &b)?;
        let fwd = model.forward(&mut tape, &vars, scene, None)?;
        let Some(loss) = l2_loss(&mut tape, &fwd, scene, obs)? else {
            continue;
        };
        let v = tape.item(loss);
        if !v.is_finite() {
            params.zero_grad();
            return Err(TrainError::NonFinite { term: "l2", value: v });
        }
        total += v * scale;
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &b, scale);
    }
    opt.step(params);
    Ok(total)
}

pub fn prepare(cfg: &ModelConfig, scenes: &[SceneWindow]) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| PreparedScene::new(cfg, s).map_err(TrainError::from)).collect()
}

/// Output of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

/// Minimises the batch-mean L2 loss with Adam.
pub fn train_deterministic(
    train: &[SceneWindow],
    eval: Option<&[SceneWindow]>,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.gan.is_some() {
        return Err(TrainError::Config("deterministic training takes no GAN settings".into()));
    }
    run_training(train, eval, model_cfg, cfg)
}

/// Alternating discriminator and generator updates per batch.
pub fn train_gan(train: &[SceneWindow], eval: Option<&[SceneWindow]>, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    if cfg.gan.is_none() {
        return Err(TrainError::Config("GAN training needs GAN settings".into()));
    }
    run_training(train, eval, model_cfg, cfg)
}

fn run_training(train: &[SceneWindow], eval: Option<&[SceneWindow]>, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(TrainError::Config("no training windows".into()));
    }
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let prepared = prepare(&trainer.model.cfg, train)?;
    trainer.fit(&prepared, eval)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        curve: trainer.curve,
    })
}

/// Least-squares constant-velocity fit to the observed frames of each
/// pedestrian, extrapolated over the horizon. `[ped][step]`.
pub fn linear_baseline(scene: &SceneWindow) -> Vec<Vec<Point>> {
    let obs = scene.obs_len;
    let tm = (obs as f64 - 1.0) / 2.0;
    let stt: f64 = (0..obs).map(|t| (t as f64 - tm).powi(2)).sum();
    (0..scene.num_peds())
        .map(|p| {
            let track = scene.observed(p);
            let mut fit = [[0.0; 2]; 2];
            for d in 0..2 {
                let mean = track.iter().map(|x| x[d]).sum::<f64>() / obs as f64;
                let slope = if stt > 0.0 {
                    track.iter().enumerate().map(|(t, x)| (t as f64 - tm) * (x[d] - mean)).sum::<f64>() / stt
                } else {
                    0.0
                };
                fit[d] = [mean, slope];
            }
            (0..scene.pred_len)
                .map(|k| {
                    let t = (obs + k) as f64 - tm;
                    [fit[0][0] + fit[0][1] * t, fit[1][0] + fit[1][1] * t]
                })
                .collect()
        })
        .collect()
}

/// Scores `samples(scene)` (one or more joint futures per scene).
/// ADE/FDE pool every sample, best-of-k takes the minimum-ADE sample per
/// scene and the near-collision rate pools every sample's frames.
pub fn score_samples<F>(scenes: &[SceneWindow], mut samples: F) -> Result<MetricReport>
where
    F: FnMut(&SceneWindow) -> Result<Vec<Vec<Vec<Point>>>>,
{
    let mut all = DisplacementSums::default();
    let mut best = DisplacementSums::default();
    let mut collisions = CollisionTally::default();
    let mut n_scenes = 0;
    let mut n_peds = 0;
    for scene in scenes.iter().filter(|s| s.num_peds() > 0) {
        let truth = scene.futures();
        let mask = scene.future_masks();
        let set = samples(scene)?;
        if !mask.iter().flatten().any(|&b| b) {
            continue;
        }
        for s in &set {
            all.add(s, &truth, &mask)?;
            collisions.add(s, Some(&mask));
        }
        let i = metrics::best_sample_index(&set, &truth, &mask)?;
        best.add(&set[i], &truth, &mask)?;
        n_scenes += 1;
        n_peds += scene.num_peds();
    }
    Ok(MetricReport {
        ade: all.ade()?,
        fde: all.fde()?,
        best_of_k_ade: best.ade()?,
        best_of_k_fde: best.fde()?,
        near_collision_pct: collisions.rate(),
        n_scenes,
        n_peds,
    })
}

/// Metrics of a parameter set. Deterministic models take `k` of `None` or
/// 1; generative models draw `k` (default 20) seeded samples per scene.
pub fn evaluate_params(cfg: &ModelConfig, params: &ParamStore, scenes: &[SceneWindow], k: Option<usize>, seed: u64) -> Result<MetricReport> {
    if let Some(s) = scenes.iter().find(|s| s.pred_len != cfg.pred_len || s.obs_len != cfg.obs_len) {
        return Err(TrainError::Config(format!(
            "windows are {}+{} steps but the checkpoint predicts {}+{}",
            s.obs_len, s.pred_len, cfg.obs_len, cfg.pred_len
        )));
    }
    let model = ScanModel::new(cfg.clone())?;
    if cfg.is_generative() {
        let k = k.unwrap_or(20);
        if k < 1 {
            return Err(TrainError::Config("k must be at least 1".into()));
        }
        let noise = NoiseSpec { dim: cfg.noise_dim };
        let mut rng = rng::stream(seed, "eval");
        score_samples(scenes, |scene| {
            let prepared = PreparedScene::new(cfg, scene)?;
            Ok(generative::sample_predictions(&model, params, &prepared, k, &noise, &mut rng)?)
        })
    } else {
        if k.is_some_and(|k| k != 1) {
            return Err(TrainError::Config(format!(
                "best-of-{} requested for a deterministic checkpoint",
                k.unwrap_or(1)
            )));
        }
        score_samples(scenes, |scene| Ok(vec![model::predict(scene, cfg, params)?.positions]))
    }
}

pub fn evaluate(ck: &Checkpoint, scenes: &[SceneWindow], k: Option<usize>, seed: u64) -> Result<MetricReport> {
    evaluate_params(&ck.model, &ck.params, scenes, k, seed)
}

/// Joint predictions for every scene: one per scene for deterministic
/// models, `k` for generative ones.
pub fn predict_samples(ck: &Checkpoint, scene: &SceneWindow, k: usize, seed: u64) -> Result<Vec<JointPrediction>> {
    if ck.is_generative() {
        let noise = NoiseSpec { dim: ck.model.noise_dim };
        let mut rng = rng::stream(seed, "predict");
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let z = noise.sample(&mut rng);
            out.push(model::predict_with_noise(scene, &ck.model, &ck.params, Some(&z))?);
        }
        Ok(out)
    } else {
        Ok(vec![model::predict(scene, &ck.model, &ck.params)?])
    }
}
