mod common;

use common::{far_neighbour_runs, quantized, random_scene, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use scan_core::autodiff::{ParamStore, Tape, Var};
use scan_core::data::SceneWindow;
use scan_core::layers::{Linear, Lstm};
use scan_core::model::{
    init_params, l2_loss, predict, ModelConfig, ModelVars, PreparedScene, ScanModel, Variant,
};
use scan_core::training::{deterministic_step, TrainConfig, Trainer};

fn scan_params() -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig::default();
    let p = init_params(&cfg, 7).unwrap();
    (cfg, p)
}

fn scene_for(seed: u64, n: usize) -> SceneWindow {
    random_scene(&mut rng(seed), n, 8, 12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_pedestrians_permutes_predictions(seed in any::<u64>(), n in 2usize..6) {
        let (cfg, params) = scan_params();
        let scene = scene_for(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 0x5eed));
        let base = predict(&scene, &cfg, &params).unwrap();
        let moved = predict(&scene.permuted(&perm), &cfg, &params).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&moved.positions[i], &base.positions[src]);
            prop_assert_eq!(&moved.displacements[i], &base.displacements[src]);
        }
    }

    #[test]
    fn exact_translations_shift_outputs(seed in any::<u64>(), n in 1usize..5, a in -4000i32..4000, b in -4000i32..4000) {
        let (cfg, params) = scan_params();
        let scene = quantized(&scene_for(seed, n));
        let c = [f64::from(a) / 16.0, f64::from(b) / 16.0];
        let base = predict(&scene, &cfg, &params).unwrap();
        let moved = predict(&scene.translated(c), &cfg, &params).unwrap();
        prop_assert_eq!(&moved.displacements, &base.displacements);
        for (mp, bp) in moved.positions.iter().zip(&base.positions) {
            for (m, q) in mp.iter().zip(bp) {
                prop_assert!((m[0] - (q[0] + c[0])).abs() <= 1e-12 * (1.0 + c[0].abs()));
                prop_assert!((m[1] - (q[1] + c[1])).abs() <= 1e-12 * (1.0 + c[1].abs()));
            }
        }
    }

    #[test]
    fn predictions_are_deterministic(seed in any::<u64>(), n in 0usize..5) {
        let (cfg, params) = scan_params();
        let scene = scene_for(seed, n);
        prop_assert_eq!(predict(&scene, &cfg, &params).unwrap(), predict(&scene, &cfg, &params).unwrap());
    }

    #[test]
    fn far_neighbour_hidden_state_has_no_influence(seed in any::<u64>(), n in 2usize..4) {
        let (cfg, params) = scan_params();
        let (base, perturbed) = far_neighbour_runs(&cfg, &params, seed, n);
        for p in 0..n {
            prop_assert_eq!(&base.positions[p], &perturbed.positions[p]);
        }
    }
}

/// Hand-written LSTM encoder-decoder with the fusion applied to `[h; 0]`.
fn plain_lstm_positions(cfg: &ModelConfig, params: &ParamStore, scene: &PreparedScene) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let h_dim = cfg.hidden_dim;
    let enc_embed = Linear::bind(&b, "enc.embed").unwrap();
    let enc_lstm = Lstm::bind(&b, "enc.lstm", h_dim).unwrap();
    let enc_fuse = Linear::bind(&b, "enc.fuse").unwrap();
    let dec_embed = Linear::bind(&b, "dec.embed").unwrap();
    let dec_lstm = Lstm::bind(&b, "dec.lstm", h_dim).unwrap();
    let dec_fuse = Linear::bind(&b, "dec.fuse").unwrap();
    let dec_out = Linear::bind(&b, "dec.out").unwrap();
    let fuse = |tape: &mut Tape, lin: &Linear, h: Var| {
        let zero = tape.zeros(h_dim);
        let cat = tape.concat(&[h, zero]).unwrap();
        let y = lin.forward(tape, cat).unwrap();
        tape.tanh(y).unwrap()
    };
    let rel = |t: usize| scene.rel[t][0];
    let disp = |t: usize| if t == 0 { [0.0, 0.0] } else { [rel(t)[0] - rel(t - 1)[0], rel(t)[1] - rel(t - 1)[1]] };
    let mut h = tape.zeros(h_dim);
    let mut c = tape.zeros(h_dim);
    for t in 0..cfg.obs_len {
        let state = fuse(&mut tape, &enc_fuse, h);
        let x = tape.vector(&disp(t));
        let x = enc_embed.forward(&mut tape, x).unwrap();
        (h, c) = enc_lstm.step(&mut tape, x, state, c).unwrap();
    }
    let mut cur = tape.vector(&rel(cfg.obs_len - 1));
    let mut last = tape.vector(&disp(cfg.obs_len - 1));
    let mut out = Vec::new();
    for _ in 0..cfg.pred_len {
        let state = fuse(&mut tape, &dec_fuse, h);
        let x = dec_embed.forward(&mut tape, last).unwrap();
        (h, c) = dec_lstm.step(&mut tape, x, state, c).unwrap();
        let d = dec_out.forward(&mut tape, h).unwrap();
        cur = tape.add(cur, d).unwrap();
        last = d;
        out.push(tape.value(cur).to_vec());
    }
    out
}

fn model_rel_positions(cfg: &ModelConfig, params: &ParamStore, scene: &PreparedScene) -> Vec<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let vars = ModelVars::bind(cfg, &b).unwrap();
    let fwd = ScanModel::new(cfg.clone()).unwrap().forward(&mut tape, &vars, scene, None).unwrap();
    fwd.positions.iter().map(|s| s.iter().map(|&v| tape.value(v).to_vec()).collect()).collect()
}

#[test]
fn lone_pedestrian_reduces_to_a_plain_lstm() {
    let cfg = ModelConfig {
        variant: Variant::Vanilla,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 3).unwrap();
    for seed in 0..10 {
        let scene = PreparedScene::new(&cfg, &scene_for(seed, 1)).unwrap();
        assert_eq!(model_rel_positions(&cfg, &params, &scene)[0], plain_lstm_positions(&cfg, &params, &scene));
    }
}

#[test]
fn head_on_pair_sees_mirror_images() {
    use scan_core::geometry::{AgentKinematics, BinSpec};
    use scan_core::layers::register_linear;
    use scan_core::spatial_attention::{attend_scene, AgentSlot, DomainGrid, ScoreNormalization};
    let mut store = ParamStore::new();
    register_linear(&mut store, &mut rng(1), "fuse", 64, 32, true).unwrap();
    let h: Vec<f64> = {
        let mut r = rng(2);
        (0..32).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let run = |order: [usize; 2]| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let fuse = Linear::bind(&b, "fuse").unwrap();
        let spec = BinSpec::default();
        let values = tape.leaf(scan_core::autodiff::Shape::matrix(12, 12), vec![4.0; 144]).unwrap();
        let grid = DomainGrid { values, spec };
        let agents = [([-1.5, 0.0], 0.0), ([1.5, 0.0], 180.0)];
        let slots: Vec<AgentSlot> = order
            .iter()
            .map(|&i| AgentSlot {
                position: tape.vector(&agents[i].0),
                kinematics: AgentKinematics::new(agents[i].0, agents[i].1),
                hidden: tape.vector(&h),
                present: true,
            })
            .collect();
        let att = attend_scene(&mut tape, &grid, ScoreNormalization::Masked, &fuse, &slots, &[0, 1], 32).unwrap();
        let norms: Vec<f64> = att
            .iter()
            .map(|a| tape.value(a.as_ref().unwrap().fused.hidden).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        norms
    };
    let ab = run([0, 1]);
    let ba = run([1, 0]);
    assert_eq!(ab[0], ab[1]);
    assert_eq!(ab[0], ba[0]);
    assert_eq!(ab[1], ba[1]);
}

#[test]
fn spatial_context_off_matches_across_scene_layouts() {
    // with context forced to zero and no temporal attention, the first
    // batch loss equals the mean of independent plain-LSTM losses
    let cfg = ModelConfig {
        variant: Variant::Vanilla,
        spatial_context: false,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg, 5).unwrap();
    let scenes: Vec<PreparedScene> = (0..4).map(|s| PreparedScene::new(&cfg, &scene_for(40 + s, 3)).unwrap()).collect();
    let model = ScanModel::new(cfg.clone()).unwrap();

    let mut joint = Vec::new();
    let mut split = Vec::new();
    for s in &scenes {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let vars = ModelVars::bind(&cfg, &b).unwrap();
        let fwd = model.forward(&mut tape, &vars, s, None).unwrap();
        let l = l2_loss(&mut tape, &fwd, s, cfg.obs_len).unwrap().unwrap();
        joint.push(tape.item(l));

        let mut per_ped = Vec::new();
        for p in 0..3 {
            let mut alone = s.clone();
            alone.order = vec![0];
            alone.rel = s.rel.iter().map(|f| vec![f[p]]).collect();
            alone.kinematics = s.kinematics.iter().map(|f| vec![f[p]]).collect();
            alone.presence = s.presence.iter().map(|f| vec![f[p]]).collect();
            let pos = plain_lstm_positions(&cfg, &params, &alone);
            let sq: Vec<f64> = pos
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    let t = alone.rel[cfg.obs_len + k][0];
                    (x[0] - t[0]).powi(2) + (x[1] - t[1]).powi(2)
                })
                .collect();
            per_ped.extend(sq);
        }
        split.push(per_ped.iter().sum::<f64>() / per_ped.len() as f64);
    }
    for (a, b) in joint.iter().zip(&split) {
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
    }

    let scan_cfg = ModelConfig {
        variant: Variant::Scan,
        ..cfg.clone()
    };
    let mut scan_params = init_params(&scan_cfg, 5).unwrap();
    let mut vanilla_params = params.clone();
    let mut o1 = scan_core::autodiff::AdamState::new(&vanilla_params, 0.0);
    let v_loss = deterministic_step(&model, &mut vanilla_params, &mut o1, &scenes).unwrap();
    let mut o2 = scan_core::autodiff::AdamState::new(&scan_params, 0.0);
    let scan_model = ScanModel::new(scan_cfg).unwrap();
    let s_loss = deterministic_step(&scan_model, &mut scan_params, &mut o2, &scenes).unwrap();
    let expected = joint.iter().sum::<f64>() / joint.len() as f64;
    assert!((v_loss - expected).abs() <= 1e-12 * expected);
    // temporal attention is the only remaining difference
    assert_ne!(v_loss, s_loss);
}

#[test]
fn stationary_walker_overfits_to_zero_motion() {
    let cfg = ModelConfig {
        variant: Variant::Vanilla,
        ..ModelConfig::default()
    };
    let scene = SceneWindow {
        source: "still".into(),
        start_frame: 0,
        obs_len: 8,
        pred_len: 12,
        ped_ids: vec![1],
        positions: vec![vec![[2.0, -1.0]]; 20],
        presence: vec![vec![true]; 20],
    };
    let train = TrainConfig {
        epochs: 150,
        batch_size: 1,
        lr: 0.003,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), train).unwrap();
    let prepared = scan_core::training::prepare(&cfg, std::slice::from_ref(&scene)).unwrap();
    trainer.fit(&prepared, None).unwrap();
    let pred = predict(&scene, &cfg, &trainer.params).unwrap();
    let worst = pred.displacements[0].iter().map(|d| d[0].hypot(d[1])).fold(0.0, f64::max);
    assert!(worst < 0.01, "largest predicted step {worst} m");
}

#[test]
fn shapes_follow_the_horizon() {
    for pred_len in [8, 12, 20] {
        let cfg = ModelConfig {
            pred_len,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 0).unwrap();
        let scene = random_scene(&mut rng(1), 3, 8, pred_len);
        let pred = predict(&scene, &cfg, &params).unwrap();
        assert_eq!(pred.positions.len(), 3);
        assert!(pred.positions.iter().all(|p| p.len() == pred_len));
        assert!(pred.positions.iter().flatten().flatten().all(|x| x.is_finite()));
    }
}
