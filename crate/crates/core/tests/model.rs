use msresnet::blocks::{InceptionDown, MultiScaleStem, ResidualBlock, SeBlock};
use msresnet::model::{ablation_configs, build_model, ModelConfig};
use msresnet::params::ParamBuilder;
use msresnet::{Graph, Mode, ParamStore, Session, Tensor};

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 10_000) as f64 / 5_000.0 - 1.0
    })
    .unwrap()
}

fn run_eval<F>(store: &ParamStore<f64>, x: Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Session<'_, f64>, msresnet::Var) -> msresnet::Result<msresnet::Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut s = Session::new(&mut g, store, Mode::Eval);
    let out = f(&mut s, xv).unwrap();
    drop(s);
    g.value(out).clone()
}

#[test]
fn residual_block_shapes() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, 1);
    let plain = ResidualBlock::plain::<f64>(&mut b, "p", 8, None).unwrap();
    let down = ResidualBlock::downsample::<f64>(&mut b, "d", 8, 16, Some(4)).unwrap();
    let x = input(&[2, 8, 10, 10], 3);
    let y = run_eval(&store, x.clone(), |s, v| plain.forward(s, v));
    assert_eq!(y.shape(), &[2, 8, 10, 10]);
    let y = run_eval(&store, x, |s, v| down.forward(s, v));
    assert_eq!(y.shape(), &[2, 16, 5, 5]);
    assert!(y.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn inception_down_doubles_channels_and_halves_resolution() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, 2);
    let block = InceptionDown::new::<f64>(&mut b, "i", 6).unwrap();
    assert_eq!(block.out_channels(), 12);
    let y = run_eval(&store, input(&[1, 6, 8, 8], 4), |s, v| block.forward(s, v));
    assert_eq!(y.shape(), &[1, 12, 4, 4]);
    let y = run_eval(&store, input(&[1, 6, 7, 7], 4), |s, v| block.forward(s, v));
    assert_eq!(y.shape(), &[1, 12, 4, 4]);
}

#[test]
fn multiscale_stem_shape() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, 3);
    let stem = MultiScaleStem::new::<f64>(&mut b, "stem", 3, 4).unwrap();
    let y = run_eval(&store, input(&[2, 3, 24, 24], 5), |s, v| stem.forward(s, v));
    assert_eq!(y.shape(), &[2, stem.out_channels(), 12, 12]);
    assert_eq!(stem.out_channels(), 8);
}

#[test]
fn saturated_se_is_the_identity() {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, 4);
    let se = SeBlock::new::<f64>(&mut b, "se", 8, 4).unwrap();
    store.get_mut(se.fc2_weight).data_mut().fill(0.0);
    store.get_mut(se.fc2_bias).data_mut().fill(40.0);
    let x = input(&[2, 8, 5, 5], 6);
    let y = run_eval(&store, x.clone(), |s, v| se.forward(s, v));
    assert_eq!(y.data(), x.data());
}

#[test]
fn se_rejects_indivisible_reduction() {
    let mut store = ParamStore::<f64>::new();
    let mut b = ParamBuilder::new(&mut store, 4);
    assert!(SeBlock::new::<f64>(&mut b, "se", 10, 4).is_err());
}

#[test]
fn se_model_adds_only_se_parameters() {
    let m1 = build_model::<f32>(&ModelConfig::preset(1, 4).unwrap(), 0).unwrap();
    let m4 = build_model::<f32>(&ModelConfig::preset(4, 4).unwrap(), 0).unwrap();
    let base: Vec<&str> = m1.param_names();
    let extra: Vec<&str> = m4.param_names().into_iter().filter(|n| !base.contains(n)).collect();
    assert!(!extra.is_empty());
    assert!(extra.iter().all(|n| n.contains(".se.")), "{extra:?}");
    assert!(base.iter().all(|n| m4.param_names().contains(n)));
    assert!(m4.count_params() > m1.count_params());
}

#[test]
fn parameter_counts_are_pinned() {
    let counts: Vec<usize> = ablation_configs(4)
        .iter()
        .map(|c| build_model::<f32>(c, 0).unwrap().count_params())
        .collect();
    assert_eq!(counts, [21_286_724, 17_908_356, 21_331_972, 21_447_920, 18_070_840]);
}

#[test]
fn full_resolution_forward_gives_logits() {
    for cfg in ablation_configs(4) {
        let model = build_model::<f32>(&cfg, 9).unwrap();
        let x = input(&[2, 3, 224, 224], 7).cast::<f32>();
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4], "{cfg}");
        assert!(logits.all_finite());
    }
}

#[test]
fn reduced_resolution_forward_is_finite() {
    for cfg in ablation_configs(4) {
        let cfg = ModelConfig {
            input_resolution: 64,
            ..cfg
        };
        let model = build_model::<f32>(&cfg, 3).unwrap();
        let logits = model.logits(&input(&[1, 3, 64, 64], 2).cast::<f32>()).unwrap();
        assert_eq!(logits.shape(), &[1, 4], "{cfg}");
        assert!(logits.all_finite());
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = ModelConfig {
        stage_widths: [8, 16, 32, 64],
        se_reduction: 4,
        input_resolution: 64,
        ..ModelConfig::preset(5, 4).unwrap()
    };
    let model = build_model::<f32>(&cfg, 0).unwrap();
    assert!(model.logits(&Tensor::zeros(&[1, 3, 64, 64]).unwrap()).is_ok());
    assert!(model.logits(&Tensor::zeros(&[1, 1, 64, 64]).unwrap()).is_err());
    assert!(model.logits(&Tensor::zeros(&[1, 3, 16, 16]).unwrap()).is_err());
}

#[test]
fn initialization_is_seeded() {
    let cfg = ModelConfig {
        stage_widths: [8, 16, 32, 64],
        se_reduction: 4,
        ..ModelConfig::preset(5, 4).unwrap()
    };
    let a = build_model::<f32>(&cfg, 11).unwrap();
    let b = build_model::<f32>(&cfg, 11).unwrap();
    let c = build_model::<f32>(&cfg, 12).unwrap();
    let same = |x: &msresnet::model::Model<f32>, y: &msresnet::model::Model<f32>| {
        x.params().entries().iter().zip(y.params().entries()).all(|(p, q)| p.value == q.value)
    };
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn eval_mode_leaves_parameters_untouched() {
    let cfg = ModelConfig {
        stage_widths: [8, 16, 32, 64],
        se_reduction: 4,
        in_channels: 1,
        input_resolution: 64,
        ..ModelConfig::preset(5, 4).unwrap()
    };
    let model = build_model::<f64>(&cfg, 0).unwrap();
    let before = model.params().clone();
    let x = input(&[3, 1, 64, 64], 8);
    let p1 = model.logits(&x).unwrap();
    let p2 = model.logits(&x).unwrap();
    assert_eq!(p1.data(), p2.data());
    for (e, f) in before.entries().iter().zip(model.params().entries()) {
        assert_eq!(e.value, f.value, "{}", e.name);
    }
}

#[test]
fn train_mode_defers_running_statistics() {
    let cfg = ModelConfig {
        stage_widths: [8, 16, 32, 64],
        se_reduction: 4,
        in_channels: 1,
        input_resolution: 64,
        ..ModelConfig::preset(1, 4).unwrap()
    };
    let mut model = build_model::<f64>(&cfg, 0).unwrap();
    let before = model.params().clone();
    let mut g = Graph::new();
    let pass = model.forward(&mut g, input(&[4, 1, 64, 64], 9), Mode::Train).unwrap();
    for (e, f) in before.entries().iter().zip(model.params().entries()) {
        assert_eq!(e.value, f.value);
    }
    pass.bindings.apply_running_stats(model.params_mut(), 0.1);
    let id = model.params().lookup("stem.bn.running_mean").unwrap();
    assert!(model.params().get(id).data().iter().any(|&v| v != 0.0));
}
