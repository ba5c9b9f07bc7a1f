use baunet::bayes::{LayerMode, PriorSpec, VariationalConv2d};
use baunet::tensor::gradcheck::{check, ScalarFn};
use baunet::tensor::{ParamStore, Padding};
use baunet::unet::{build_model, ArchConfig, AttentionPlacement, Cbam, Conv2d, ModelGraph};
use baunet::{Real, Result, RngStream, Tape, Tensor, Var};
use proptest::prelude::*;

fn cfg(base_filters: usize, depth: usize, input_size: usize) -> ArchConfig {
    ArchConfig {
        base_filters,
        depth,
        input_size,
        ..ArchConfig::default()
    }
}

#[test]
fn doubling_filters_quadruples_parameters() {
    let small = build_model(&cfg(16, 4, 256), 0).unwrap().param_count();
    let large = build_model(&cfg(32, 4, 256), 0).unwrap().param_count();
    let ratio = large as f64 / small as f64;
    assert!((3.9..=4.1).contains(&ratio), "{small} {large} {ratio}");
}

#[test]
fn tiny_model_shape_contract() {
    let m = build_model(&cfg(1, 1, 4), 0).unwrap();
    let out = m.predict(&Tensor::zeros([1, 1, 4, 4]), LayerMode::Frozen, &RngStream::new(0, 0)).unwrap();
    assert_eq!(out.shape(), [1, 2, 4, 4]);
}

#[test]
fn desk_scale_shape_contract() {
    let m = build_model(&cfg(4, 4, 64), 0).unwrap();
    let x = Tensor::rand_uniform([2, 1, 64, 64], 0.0, 1.0, &mut RngStream::new(1, 0));
    for mode in [LayerMode::Train, LayerMode::Sample, LayerMode::Frozen] {
        let out = m.predict(&x, mode, &RngStream::new(0, 0)).unwrap();
        assert_eq!(out.shape(), [2, 2, 64, 64]);
        assert!(out.all_finite());
    }
}

#[test]
fn variational_layer_count() {
    for depth in 1..=4 {
        for tail in 0..=3 {
            let c = ArchConfig {
                deterministic_tail_convs: tail,
                ..cfg(2, depth, 32)
            };
            let m = build_model(&c, 0).unwrap();
            assert_eq!(m.variational_layers().len(), 3 * depth - tail);
        }
    }
    let off = ArchConfig {
        variational_decoder: false,
        ..cfg(2, 2, 32)
    };
    assert!(build_model(&off, 0).unwrap().variational_layers().is_empty());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(build_model(&cfg(16, 4, 100), 0).is_err());
    assert!(build_model(&cfg(0, 4, 64), 0).is_err());
    let tail = ArchConfig {
        deterministic_tail_convs: 7,
        ..cfg(2, 2, 32)
    };
    assert!(build_model(&tail, 0).is_err());
}

#[test]
fn central_attention_adds_parameters() {
    let base = cfg(8, 3, 64);
    let central = ArchConfig {
        attention_placement: AttentionPlacement::CentralLayers,
        ..base.clone()
    };
    let a = build_model(&base, 0).unwrap();
    let b = build_model(&central, 0).unwrap();
    assert!(b.param_count() > a.param_count());
    let x = Tensor::rand_uniform([1, 1, 64, 64], 0.0, 1.0, &mut RngStream::new(1, 0));
    assert_eq!(b.predict(&x, LayerMode::Train, &RngStream::new(0, 0)).unwrap().shape(), [1, 2, 64, 64]);
}

#[test]
fn layer_parameter_counts() {
    let mut store = ParamStore::<f32>::new();
    Conv2d::new(&mut store, "c", 1, 32, 3, &mut RngStream::new(0, 0));
    assert_eq!(store.numel(), 320);
    let mut store = ParamStore::<f32>::new();
    let v = VariationalConv2d::new(&mut store, "v", 1, 32, 3, PriorSpec::default(), 0, &mut RngStream::new(0, 0));
    assert_eq!(store.numel(), 608);
    assert_eq!(v.param_count(), 608);
}

#[test]
fn frozen_is_repeatable_and_samples_vary() {
    let m = build_model(&cfg(4, 2, 16), 3).unwrap();
    let x = Tensor::rand_uniform([1, 1, 16, 16], 0.0, 1.0, &mut RngStream::new(1, 0));
    let f1 = m.predict(&x, LayerMode::Frozen, &RngStream::new(0, 0)).unwrap();
    let f2 = m.predict(&x, LayerMode::Frozen, &RngStream::new(0, 9)).unwrap();
    assert_eq!(f1, f2);
    let s1 = m.predict(&x, LayerMode::Sample, &RngStream::new(0, 1)).unwrap();
    let s2 = m.predict(&x, LayerMode::Sample, &RngStream::new(0, 2)).unwrap();
    let s1_again = m.predict(&x, LayerMode::Sample, &RngStream::new(0, 1)).unwrap();
    assert_ne!(s1, s2);
    assert_eq!(s1, s1_again);
}

#[test]
fn kl_total_sums_layers() {
    let m = build_model(&cfg(2, 2, 16), 0).unwrap();
    let total = m.kl_value().unwrap();
    let by_layer: f64 = m
        .variational_layers()
        .iter()
        .map(|l| l.posterior(&m.params.cast::<f64>()).kl(&l.prior).unwrap())
        .sum();
    assert!(total.is_finite() && total > 0.0);
    assert!((total - by_layer).abs() < 1e-3 * by_layer);
}

fn cbam(channels: usize, reduction: usize, seed: u64) -> (ParamStore<f64>, Cbam) {
    let mut store = ParamStore::new();
    let c = Cbam::new(&mut store, "a", channels, reduction, &mut RngStream::new(seed, 0)).unwrap();
    // Non-zero biases so the oracle exercises them.
    let mut rng = RngStream::new(seed, 1);
    for id in [c.fc1_bias, c.fc2_bias, c.spatial_bias] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::randn(shape, &mut rng)).unwrap();
    }
    (store, c)
}

/// Channel gate computed with plain loops.
fn channel_gate_oracle(store: &ParamStore<f64>, c: &Cbam, x: &Tensor<f64>) -> Vec<f64> {
    let (n, ch, h, w) = x.dims4().unwrap();
    let w1 = store.value(c.fc1_weight).data();
    let b1 = store.value(c.fc1_bias).data();
    let w2 = store.value(c.fc2_weight).data();
    let b2 = store.value(c.fc2_bias).data();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let hidden: Vec<f64> = (0..c.hidden)
            .map(|j| (b1[j] + (0..ch).map(|i| w1[j * ch + i] * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..ch).map(|i| b2[i] + (0..c.hidden).map(|j| w2[i * c.hidden + j] * hidden[j]).sum::<f64>()).collect()
    };
    let mut out = Vec::new();
    for s in 0..n {
        let mut avg = vec![0.0; ch];
        let mut max = vec![f64::NEG_INFINITY; ch];
        for i in 0..ch {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at4(s, i, y, xx);
                    avg[i] += v / (h * w) as f64;
                    max[i] = max[i].max(v);
                }
            }
        }
        let (a, m) = (mlp(&avg), mlp(&max));
        out.extend(a.iter().zip(&m).map(|(p, q)| 1.0 / (1.0 + (-(p + q)).exp())));
    }
    out
}

#[test]
fn channel_attention_matches_loop_oracle() {
    for seed in 0..5 {
        let (store, c) = cbam(16, 4, seed);
        let x = Tensor::randn([2, 16, 5, 3], &mut RngStream::new(seed, 7));
        let tape = Tape::no_grad();
        let gate = c.channel_attention(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
        assert_eq!(gate.shape(), [2, 16, 1, 1]);
        for (a, b) in gate.value().data().iter().zip(channel_gate_oracle(&store, &c, &x)) {
            assert!((a - b).abs() < 1e-6);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }
}

#[test]
fn constant_feature_gate_doubles_mlp() {
    let (store, c) = cbam(8, 2, 1);
    let x = Tensor::full([1, 8, 4, 4], 0.7);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let gate = c.channel_attention(&p, &tape.constant(x)).unwrap();
    let v = tape.constant(Tensor::full([1, 8, 1, 1], 0.7));
    let mlp = c.mlp(&p);
    let h = v.conv2d(&mlp.fc1_weight, Some(&mlp.fc1_bias), 1, Padding::Same).unwrap().relu();
    let once = h.conv2d(&mlp.fc2_weight, Some(&mlp.fc2_bias), 1, Padding::Same).unwrap();
    let expected = once.scale(2.0).sigmoid();
    for (a, b) in gate.value().data().iter().zip(expected.value().data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn channel_attention_needs_enough_channels() {
    let mut store = ParamStore::<f32>::new();
    assert!(Cbam::new(&mut store, "a", 4, 8, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn spatial_attention_range_and_single_channel() {
    let (store, c) = cbam(1, 1, 2);
    let x = Tensor::randn([2, 1, 6, 6], &mut RngStream::new(3, 0));
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let gate = c.spatial_attention(&p, &tape.constant(x.clone())).unwrap();
    assert_eq!(gate.shape(), [2, 1, 6, 6]);
    assert!(gate.value().data().iter().all(|&g| g > 0.0 && g < 1.0));
    // With one channel the mean and max maps are both the input itself.
    let stacked = Var::concat_channels(&[&tape.constant(x.clone()), &tape.constant(x)]).unwrap();
    let direct = stacked
        .conv2d(&p.var(c.spatial_weight), Some(&p.var(c.spatial_bias)), 1, Padding::Same)
        .unwrap()
        .sigmoid();
    assert_eq!(gate.value(), direct.value());
}

struct AttentionFn {
    store: ParamStore<f64>,
    cbam: Cbam,
    weights: Tensor<f64>,
    spatial_only: bool,
}

impl ScalarFn for AttentionFn {
    fn eval<'t, F: Real>(&self, tape: &'t Tape<F>, v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let store = self.store.cast::<F>();
        let p = store.bind(tape);
        let y = if self.spatial_only {
            self.cbam.spatial_attention(&p, &v[0])?
        } else {
            self.cbam.apply(&p, &v[0])?
        };
        Ok(y.mul(&tape.constant(self.weights.cast()))?.sum())
    }
}

#[test]
fn attention_gradients_pass_finite_differences() {
    for seed in 0..5 {
        let (store, c) = cbam(4, 2, seed);
        let mut rng = RngStream::new(seed, 3);
        let x = Tensor::randn([2, 4, 5, 5], &mut rng);
        for spatial_only in [true, false] {
            let out_c = if spatial_only { 1 } else { 4 };
            let f = AttentionFn {
                store: store.clone(),
                cbam: c.clone(),
                weights: Tensor::randn([2, out_c, 5, 5], &mut rng),
                spatial_only,
            };
            let e32 = check::<f32>(&f, std::slice::from_ref(&x), 1e-6).unwrap().max_relative_error();
            let e64 = check::<f64>(&f, std::slice::from_ref(&x), 1e-6).unwrap().max_relative_error();
            assert!(e32 < 1e-3 && e64 < 1e-5, "{e32} {e64}");
        }
    }
}

#[test]
fn saturated_gates_are_identity() {
    let (mut store, c) = cbam(4, 2, 5);
    // sigmoid(80) rounds to exactly 1 in f64.
    store.set_value(c.fc2_bias, Tensor::full([4], 40.0)).unwrap();
    store.set_value(c.spatial_weight, Tensor::zeros([1, 2, 7, 7])).unwrap();
    store.set_value(c.spatial_bias, Tensor::full([1], 80.0)).unwrap();
    let x = Tensor::randn([1, 4, 6, 6], &mut RngStream::new(0, 0));
    let tape = Tape::no_grad();
    let y = c.apply(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn channel_then_spatial_order_matters() {
    let (store, c) = cbam(8, 2, 6);
    let x = Tensor::randn([1, 8, 6, 6], &mut RngStream::new(1, 0));
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let xv = tape.constant(x);
    let forward = c.apply(&p, &xv).unwrap();
    let s = xv.mul(&c.spatial_attention(&p, &xv).unwrap()).unwrap();
    let reversed = s.mul(&c.channel_attention(&p, &s).unwrap()).unwrap();
    let diff = forward.value().zip_map(reversed.value(), |a, b| a - b).unwrap().max_abs();
    assert!(diff > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gates_shrink_without_flipping_sign(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let (store, c) = cbam(8, 4, seed);
        let x = Tensor::randn([2, 8, h, w], &mut RngStream::new(seed, 11));
        let tape = Tape::no_grad();
        let y = c.apply(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
        for (a, b) in x.data().iter().zip(y.value().data()) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn skips_align_for_any_valid_size(depth in 1usize..4, k in 1usize..3, k2 in 1usize..3) {
        let m = build_model(&cfg(2, depth, 8), 0).unwrap();
        let (h, w) = (k << depth, k2 << depth);
        let out = m.predict(&Tensor::zeros([1, 1, h, w]), LayerMode::Frozen, &RngStream::new(0, 0)).unwrap();
        prop_assert_eq!(out.shape(), &[1, 2, h, w]);
    }
}

struct ModelFn {
    model: ModelGraph<f64>,
    mode: LayerMode,
    weights: Tensor<f64>,
}

impl ScalarFn for ModelFn {
    fn eval<'t, F: Real>(&self, tape: &'t Tape<F>, v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let model = self.model.cast::<F>();
        let p = model.params.bind(tape);
        let y = model.forward(&p, &v[0], self.mode, &RngStream::new(1, 2))?;
        Ok(y.mul(&tape.constant(self.weights.cast()))?.sum())
    }
}

#[test]
fn model_input_gradient_passes_finite_differences() {
    let c = ArchConfig {
        attention_placement: AttentionPlacement::CentralLayers,
        ..cfg(2, 2, 8)
    };
    let model = ModelGraph::<f64>::build(&c, 4).unwrap();
    let mut rng = RngStream::new(0, 0);
    let x = Tensor::rand_uniform([2, 1, 8, 8], 0.0, 1.0, &mut rng);
    for mode in [LayerMode::Train, LayerMode::Sample, LayerMode::Frozen] {
        let f = ModelFn {
            model: model.clone(),
            mode,
            weights: Tensor::randn([2, 2, 8, 8], &mut rng),
        };
        let err = check::<f64>(&f, std::slice::from_ref(&x), 1e-6).unwrap().max_relative_error();
        assert!(err < 1e-5, "{mode:?}: {err}");
    }
}
