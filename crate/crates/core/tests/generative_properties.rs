mod common;

use common::{random_scene, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use scan_core::autodiff::{AdamState, ParamStore, Tape, Var};
use scan_core::data::{synth_scenarios, SceneWindow, SynthKind};
use scan_core::generative::{
    discriminate, discriminator_logits, discriminator_loss, diversity_loss, gan_train_step, init_discriminator,
    sample_predictions, variety_loss, DiscriminatorVars, GanConfig, GanParts, NoiseSpec, TrajectoryNodes,
};
use scan_core::geometry::Point;
use scan_core::model::{init_params, l2_loss, predict_with_noise, ModelConfig, ModelVars, PreparedScene, SceneForward, ScanModel};
use scan_core::training::{evaluate_params, prepare};

fn gen_cfg() -> ModelConfig {
    ModelConfig {
        noise_dim: 8,
        ..ModelConfig::default()
    }
}

fn z(seed: u64) -> Vec<f64> {
    NoiseSpec::default().sample(&mut rng(seed))
}

fn forward(tape: &mut Tape, cfg: &ModelConfig, vars: &ModelVars, scene: &PreparedScene, noise: &[f64]) -> SceneForward {
    ScanModel::new(cfg.clone()).unwrap().forward(tape, vars, scene, Some(noise)).unwrap()
}

/// Constant-offset copies of the ground-truth future as tape leaves.
fn offset_sample(tape: &mut Tape, scene: &PreparedScene, obs_len: usize, offset: f64) -> SceneForward {
    let n = scene.num_peds();
    let pred_len = scene.rel.len() - obs_len;
    let positions: Vec<Vec<Var>> = (0..n)
        .map(|p| {
            (0..pred_len)
                .map(|k| {
                    let t = scene.rel[obs_len + k][p];
                    tape.vector(&[t[0] + offset, t[1]])
                })
                .collect()
        })
        .collect();
    SceneForward {
        anchor: scene.anchor,
        displacements: positions.clone(),
        positions,
        encoder_final: Vec::new(),
    }
}

#[test]
fn single_sample_variety_is_plain_l2() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 1).unwrap();
    for seed in 0..10 {
        let scene = PreparedScene::new(&cfg, &random_scene(&mut rng(seed), 3, 8, 12)).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(&cfg, &b).unwrap();
        let fwd = forward(&mut tape, &cfg, &vars, &scene, &z(seed));
        let l2 = l2_loss(&mut tape, &fwd, &scene, 8).unwrap().unwrap();
        let (v, idx) = variety_loss(&mut tape, std::slice::from_ref(&fwd), &scene, 8).unwrap().unwrap();
        assert_eq!(idx, 0);
        assert!((tape.item(v) - tape.item(l2)).abs() <= 1e-12);
    }
}

#[test]
fn only_the_selected_sample_receives_gradient() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 2).unwrap();
    for seed in 0..5 {
        let scene = PreparedScene::new(&cfg, &random_scene(&mut rng(100 + seed), 3, 8, 12)).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(&cfg, &b).unwrap();
        let samples: Vec<SceneForward> = (0..4).map(|i| forward(&mut tape, &cfg, &vars, &scene, &z(seed * 10 + i))).collect();
        let (loss, best) = variety_loss(&mut tape, &samples, &scene, 8).unwrap().unwrap();
        tape.backward(loss).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let grads: Vec<f64> = s.positions.iter().flatten().flat_map(|&v| tape.grad(v)).collect();
            if i == best {
                assert!(grads.iter().any(|&g| g != 0.0));
            } else {
                assert!(grads.iter().all(|&g| g == 0.0), "sample {i} of {best} got gradient");
            }
        }
    }
}

#[test]
fn variety_picks_the_lower_ade_sample() {
    let cfg = ModelConfig::default();
    let scene = PreparedScene::new(&cfg, &random_scene(&mut rng(3), 2, 8, 12)).unwrap();
    let mut tape = Tape::new();
    let samples = [offset_sample(&mut tape, &scene, 8, 0.7), offset_sample(&mut tape, &scene, 8, 0.3)];
    let (loss, idx) = variety_loss(&mut tape, &samples, &scene, 8).unwrap().unwrap();
    assert_eq!(idx, 1);
    assert!((tape.item(loss) - 0.09).abs() < 1e-12);

    let exact = [offset_sample(&mut tape, &scene, 8, 0.5), offset_sample(&mut tape, &scene, 8, 0.0)];
    let (loss, idx) = variety_loss(&mut tape, &exact, &scene, 8).unwrap().unwrap();
    assert_eq!((tape.item(loss), idx), (0.0, 1));
}

fn sample_nodes(tape: &mut Tape, pts: &[Vec<Vec<Point>>]) -> Vec<Vec<Vec<Var>>> {
    pts.iter().map(|s| s.iter().map(|p| p.iter().map(|x| tape.vector(x)).collect()).collect()).collect()
}

fn random_samples(seed: u64, k: usize, n: usize, steps: usize) -> Vec<Vec<Vec<Point>>> {
    let mut r = rng(seed);
    (0..k)
        .map(|_| (0..n).map(|_| (0..steps).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect()).collect())
        .collect()
}

fn diversity_value(pts: &[Vec<Vec<Point>>], mask: &[Vec<bool>]) -> f64 {
    let mut tape = Tape::new();
    let nodes = sample_nodes(&mut tape, pts);
    let l = diversity_loss(&mut tape, &nodes, mask).unwrap();
    tape.item(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diversity_ignores_sample_order(seed in any::<u64>(), k in 2usize..6, n in 1usize..4) {
        let pts = random_samples(seed, k, n, 5);
        let mask = vec![vec![true; 5]; n];
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng(seed ^ 1));
        let a = diversity_value(&pts, &mask);
        let b = diversity_value(&shuffled, &mask);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn diversity_falls_as_a_pair_separates(seed in any::<u64>(), k in 2usize..5, push in 0.01f64..3.0) {
        // moving sample 0 rigidly away along its offset from sample 1 raises
        // d_01 and, for k = 2, nothing else
        let mut pts = random_samples(seed, k, 1, 4);
        let base = pts[0][0].clone();
        for (q, b) in pts[1][0].iter_mut().zip(&base) {
            *q = [b[0] - 1.0, b[1]];
        }
        let mask = vec![vec![true; 4]];
        let before = diversity_value(&pts[..2], &mask);
        for q in pts[0][0].iter_mut() {
            q[0] += push;
        }
        let after = diversity_value(&pts[..2], &mask);
        prop_assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn diversity_matches_the_pairwise_formula(seed in any::<u64>(), k in 2usize..6, n in 1usize..4) {
        let pts = random_samples(seed, k, n, 4);
        let mut mask = vec![vec![true; 4]; n];
        mask[0][3] = false;
        let mut expected = 0.0;
        for p in 0..n {
            let valid: Vec<usize> = (0..4).filter(|&t| mask[p][t]).collect();
            for i in 0..k {
                for j in i + 1..k {
                    let d: f64 = valid
                        .iter()
                        .map(|&t| (pts[i][p][t][0] - pts[j][p][t][0]).hypot(pts[i][p][t][1] - pts[j][p][t][1]))
                        .sum::<f64>()
                        / valid.len() as f64;
                    expected += (-d).exp();
                }
            }
        }
        expected /= n as f64;
        let got = diversity_value(&pts, &mask);
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn zero_noise_is_a_fixed_function_of_the_past() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 4).unwrap();
    let zero = vec![0.0; 8];
    let scene = random_scene(&mut rng(5), 3, 8, 12);
    let mut other_future = scene.clone();
    for frame in &mut other_future.positions[8..] {
        for p in frame.iter_mut() {
            p[0] += 1.0;
        }
    }
    let a = predict_with_noise(&scene, &cfg, &params, Some(&zero)).unwrap();
    let b = predict_with_noise(&scene, &cfg, &params, Some(&zero)).unwrap();
    let c = predict_with_noise(&other_future, &cfg, &params, Some(&zero)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn distinct_noise_draws_give_distinct_futures() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 6).unwrap();
    let scene = random_scene(&mut rng(7), 2, 8, 12);
    let a = predict_with_noise(&scene, &cfg, &params, Some(&z(1))).unwrap();
    let b = predict_with_noise(&scene, &cfg, &params, Some(&z(2))).unwrap();
    for p in 0..2 {
        assert_ne!(a.positions[p], b.positions[p]);
    }
}

#[test]
fn seeded_sampling_reproduces_prediction_sets() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 8).unwrap();
    let model = ScanModel::new(cfg.clone()).unwrap();
    let scene = PreparedScene::new(&cfg, &random_scene(&mut rng(9), 3, 8, 12)).unwrap();
    let noise = NoiseSpec::default();
    let a = sample_predictions(&model, &params, &scene, 5, &noise, &mut rng(11)).unwrap();
    let b = sample_predictions(&model, &params, &scene, 5, &noise, &mut rng(11)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn discriminator_scores_are_probabilities_and_follow_pedestrians(seed in any::<u64>(), n in 1usize..5) {
        let cfg = gen_cfg();
        let disc = init_discriminator(&cfg, seed).unwrap();
        let scene = random_scene(&mut rng(seed), n, 8, 12);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 7));
        let base = discriminate(&cfg, &disc, &PreparedScene::new(&cfg, &scene).unwrap(), None).unwrap();
        let moved = discriminate(&cfg, &disc, &PreparedScene::new(&cfg, &scene.permuted(&perm)).unwrap(), None).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!(base[src] > 0.0 && base[src] < 1.0);
            prop_assert_eq!(moved[i], base[src]);
        }
    }
}

/// Straight walkers turned into random walks with the same start.
fn random_walk(scene: &SceneWindow, seed: u64) -> SceneWindow {
    let mut r = rng(seed);
    let mut out = scene.clone();
    for p in 0..scene.num_peds() {
        let mut cur = scene.positions[0][p];
        for t in 1..scene.len() {
            let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
            cur = [cur[0] + 0.4 * a.cos(), cur[1] + 0.4 * a.sin()];
            out.positions[t][p] = cur;
        }
    }
    out
}

#[test]
fn discriminator_learns_straight_lines_from_random_walks() {
    let cfg = ModelConfig {
        hidden_dim: 16,
        embed_dim: 8,
        noise_dim: 8,
        ..ModelConfig::default()
    };
    let mut disc = init_discriminator(&cfg, 3).unwrap();
    let mut opt = AdamState::new(&disc, 0.01);
    let make = |seed: u64, count: usize| -> Vec<(PreparedScene, PreparedScene)> {
        synth_scenarios(SynthKind::Straight, count, seed)
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fake = random_walk(s, seed * 1000 + i as u64);
                (PreparedScene::new(&cfg, s).unwrap(), PreparedScene::new(&cfg, &fake).unwrap())
            })
            .collect()
    };
    let train = make(1, 16);
    let held_out = make(2, 16);
    let mut tape = Tape::new();
    for _ in 0..40 {
        disc.zero_grad();
        for (real, fake) in &train {
            tape.reset();
            let b = disc.bind(&mut tape);
            let vars = DiscriminatorVars::bind(&cfg, &b).unwrap();
            let rn = TrajectoryNodes::real(&mut tape, real);
            let fnodes = TrajectoryNodes::real(&mut tape, fake);
            let lr = discriminator_logits(&mut tape, &cfg, &vars, &rn, &real.order).unwrap();
            let lf = discriminator_logits(&mut tape, &cfg, &vars, &fnodes, &fake.order).unwrap();
            let loss = discriminator_loss(&mut tape, &lr, &lf).unwrap();
            tape.backward(loss).unwrap();
            disc.accumulate_grads(&tape, &b, 1.0 / train.len() as f64);
        }
        opt.step(&mut disc);
    }
    let mean = |which: usize| {
        let scores: Vec<f64> = held_out
            .iter()
            .flat_map(|pair| discriminate(&cfg, &disc, if which == 0 { &pair.0 } else { &pair.1 }, None).unwrap())
            .collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let (real, fake) = (mean(0), mean(1));
    assert!(real > fake, "real {real} fake {fake}");
}

struct GanRig {
    model: ScanModel,
    gen: ParamStore,
    disc: ParamStore,
    gen_opt: AdamState,
    disc_opt: AdamState,
}

fn rig() -> GanRig {
    let cfg = gen_cfg();
    let gen = init_params(&cfg, 1).unwrap();
    let disc = init_discriminator(&cfg, 2).unwrap();
    GanRig {
        gen_opt: AdamState::new(&gen, 0.001),
        disc_opt: AdamState::new(&disc, 0.001),
        model: ScanModel::new(cfg).unwrap(),
        gen,
        disc,
    }
}

fn step(r: &mut GanRig, batch: &[PreparedScene], cfg: &GanConfig, seed: u64) -> scan_core::generative::LossReport {
    gan_train_step(
        &r.model,
        batch,
        cfg,
        GanParts {
            generator: &mut r.gen,
            discriminator: &mut r.disc,
            generator_opt: &mut r.gen_opt,
            discriminator_opt: &mut r.disc_opt,
            noise_rng: &mut rng(seed),
        },
    )
    .unwrap()
}

#[test]
fn forward_passes_scale_with_k() {
    let cfg = gen_cfg();
    let batch = prepare(&cfg, &synth_scenarios(SynthKind::Crossing, 3, 4)).unwrap();
    for k in [1, 2, 4] {
        let report = step(&mut rig(), &batch, &GanConfig { k, ..GanConfig::default() }, 0);
        assert_eq!(report.generator_forward_passes, 3 * k);
    }
}

#[test]
fn k1_lambda0_objective_is_adversarial_plus_l2() {
    let cfg = gen_cfg();
    let scenes = synth_scenarios(SynthKind::HeadOn, 2, 5);
    let batch = prepare(&cfg, &scenes).unwrap();
    let mut r = rig();
    let report = step(&mut r, &batch, &GanConfig::default(), 3);
    assert!((report.generator - (report.adversarial + report.variety)).abs() < 1e-12);
    assert_eq!(report.diversity, 0.0);
    assert!(report.real_score > 0.0 && report.real_score < 1.0);
    assert!(report.fake_score > 0.0 && report.fake_score < 1.0);
}

#[test]
fn gan_step_is_reproducible() {
    let cfg = gen_cfg();
    let batch = prepare(&cfg, &synth_scenarios(SynthKind::Overtake, 2, 6)).unwrap();
    let gcfg = GanConfig {
        k: 3,
        lambda: 0.5,
        ..GanConfig::default()
    };
    let (mut a, mut b) = (rig(), rig());
    assert_eq!(step(&mut a, &batch, &gcfg, 9), step(&mut b, &batch, &gcfg, 9));
    assert_eq!(a.gen, b.gen);
    assert_eq!(a.disc, b.disc);
}

#[test]
fn generative_evaluation_defaults_to_twenty_draws() {
    let cfg = gen_cfg();
    let params = init_params(&cfg, 1).unwrap();
    let scenes = synth_scenarios(SynthKind::Straight, 3, 1);
    let default = evaluate_params(&cfg, &params, &scenes, None, 4).unwrap();
    let twenty = evaluate_params(&cfg, &params, &scenes, Some(20), 4).unwrap();
    let one = evaluate_params(&cfg, &params, &scenes, Some(1), 4).unwrap();
    assert_eq!(default, twenty);
    assert!(twenty.best_of_k_ade <= one.best_of_k_ade);
}
