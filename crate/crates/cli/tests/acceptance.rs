//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use baunet::bayes::{flipout_conv, GaussianPosterior, PriorSpec, VariationalConv2d};
use baunet::data::{gen_synthetic, split, Sample, SplitSpec, SynthConfig};
use baunet::degrade::{gaussian_blur, gaussian_kernel, rayleigh_sample, DegradationSpec};
use baunet::metrics::degradation_report;
use baunet::tensor::gradcheck::{check, check_params, ParamFn, ScalarFn};
use baunet::tensor::{softplus_inv, Binding, ParamStore, Padding, PoolAxis, PoolKind};
use baunet::training::{elbo_loss, evaluate, heteroscedastic_nll_with, train, ElboConfig, TrainConfig};
use baunet::unet::{build_model, ArchConfig, AttentionPlacement, Cbam, ModelGraph};
use baunet::uq::{decompose_uncertainty, images_of, t_sweep, LabelConvention, McConfig, McSample};
use baunet::{Real, Result, RngStream, Tape, Tensor, Var};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 1: gradients ----

fn weighted_sum<'t, F: Real>(y: &Var<'t, F>, seed: u64) -> Result<Var<'t, F>> {
    let w = Tensor::rand_uniform(y.shape().to_vec(), -1.0, 1.0, &mut RngStream::new(seed, 99));
    Ok(y.mul(&y.tape().constant(w))?.sum())
}

macro_rules! op_fn {
    ($name:ident, |$v:ident| $body:expr) => {
        struct $name(u64);
        impl ScalarFn for $name {
            fn eval<'t, F: Real>(&self, _tape: &'t Tape<F>, $v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
                weighted_sum(&$body, self.0)
            }
        }
    };
}

op_fn!(ConvFn, |v| v[0].conv2d(&v[1], Some(&v[2]), 1, Padding::Same)?);
op_fn!(MaxPoolFn, |v| v[0].pool2d(PoolKind::Max, 2, 2)?);
op_fn!(AvgPoolFn, |v| v[0].pool2d(PoolKind::Avg, 2, 2)?);
op_fn!(GlobalPoolFn, |v| {
    let s = v[0].global_pool(PoolKind::Avg, PoolAxis::Spatial)?.add(&v[0].global_pool(PoolKind::Max, PoolAxis::Spatial)?)?;
    let c = v[0].global_pool(PoolKind::Avg, PoolAxis::Channel)?.add(&v[0].global_pool(PoolKind::Max, PoolAxis::Channel)?)?;
    v[0].mul(&s)?.mul(&c)?
});
op_fn!(UpsampleFn, |v| v[0].upsample2x()?);
op_fn!(ActivationFn, |v| v[0].relu().add(&v[0].sigmoid())?.add(&v[0].softplus())?.add(&v[0].scale(F::lit(0.5)).exp())?);
op_fn!(GroupNormFn, |v| v[0].group_norm(2, &v[1], &v[2], 1e-5)?);

struct CbamFn {
    store: ParamStore<f64>,
    cbam: Cbam,
    seed: u64,
}

impl ScalarFn for CbamFn {
    fn eval<'t, F: Real>(&self, tape: &'t Tape<F>, v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let store = self.store.cast::<F>();
        weighted_sum(&self.cbam.apply(&store.bind(tape), &v[0])?, self.seed)
    }
}

struct FlipoutFn {
    eps: Tensor<f64>,
    r: Tensor<f64>,
    s: Tensor<f64>,
    seed: u64,
}

impl ScalarFn for FlipoutFn {
    fn eval<'t, F: Real>(&self, _tape: &'t Tape<F>, v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let y = flipout_conv(&v[0], &v[1], &v[2], Some(&v[3]), &self.eps.cast(), &self.r.cast(), &self.s.cast(), Padding::Same)?;
        weighted_sum(&y, self.seed)
    }
}

struct NllFn {
    target: Tensor<f64>,
    noise: Vec<Tensor<f64>>,
}

impl ScalarFn for NllFn {
    fn eval<'t, F: Real>(&self, _tape: &'t Tape<F>, v: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let noise: Vec<Tensor<F>> = self.noise.iter().map(|t| t.cast()).collect();
        heteroscedastic_nll_with(&v[0], &v[1], &self.target.cast(), &noise)
    }
}

struct ElboFn {
    model: ModelGraph<f64>,
    images: Tensor<f64>,
    masks: Tensor<f64>,
    cfg: ElboConfig,
    rng: RngStream,
}

impl ParamFn for ElboFn {
    fn eval<'t, F: Real>(&self, params: &Binding<'t, '_, F>) -> Result<Var<'t, F>> {
        let model = self.model.cast::<F>();
        Ok(elbo_loss(&model, params, &self.images.cast(), &self.masks.cast(), 1, 3, &self.cfg, &self.rng)?.loss)
    }
}

fn mask(shape: [usize; 4], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.uniform(0.0, 1.0) < 0.4 { 1.0 } else { 0.0 })
}

fn signs(shape: [usize; 4], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.rademacher())
}

fn gradient_suite() -> Outcome {
    const SEEDS: u64 = 10;
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = e.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, 7);
        let mut u = |shape: &[usize]| Tensor::<f64>::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng);
        let mut op = |name: &'static str, e: Result<baunet::tensor::gradcheck::GradCheck>| -> std::result::Result<(), String> {
            record(name, e.map_err(|e| format!("{name}: {e}"))?.max_relative_error());
            Ok(())
        };
        op("conv", check::<f32>(&ConvFn(seed), &[u(&[2, 2, 5, 4]), u(&[3, 2, 3, 3]), u(&[3])], 1e-6))?;
        op("max pool", check::<f32>(&MaxPoolFn(seed), &[u(&[2, 2, 4, 6])], 1e-6))?;
        op("avg pool", check::<f32>(&AvgPoolFn(seed), &[u(&[2, 2, 4, 6])], 1e-6))?;
        op("global pool", check::<f32>(&GlobalPoolFn(seed), &[u(&[2, 3, 3, 4])], 1e-6))?;
        op("upsample", check::<f32>(&UpsampleFn(seed), &[u(&[1, 2, 3, 2])], 1e-6))?;
        op("activations", check::<f32>(&ActivationFn(seed), &[u(&[2, 3, 4])], 1e-6))?;
        op("group norm", check::<f32>(&GroupNormFn(seed), &[u(&[2, 4, 3, 3]), u(&[4]), u(&[4])], 1e-6))?;

        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut store, "a", 4, 2, &mut RngStream::new(seed, 0)).map_err(|e| e.to_string())?;
        let mut brng = RngStream::new(seed, 1);
        for id in [cbam.fc1_bias, cbam.fc2_bias, cbam.spatial_bias] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::randn(shape, &mut brng)).map_err(|e| e.to_string())?;
        }
        let x = Tensor::randn([2, 4, 5, 5], &mut brng);
        let f = CbamFn { store, cbam, seed };
        record("cbam", check::<f32>(&f, &[x], 1e-6).map_err(|e| e.to_string())?.max_relative_error());

        let mut rng = RngStream::new(seed, 8);
        let f = FlipoutFn {
            eps: Tensor::randn([3, 2, 3, 3], &mut rng),
            r: signs([2, 3, 1, 1], &mut rng),
            s: signs([2, 2, 1, 1], &mut rng),
            seed,
        };
        let inputs = [
            Tensor::randn([2, 2, 5, 5], &mut rng),
            Tensor::randn([3, 2, 3, 3], &mut rng),
            Tensor::rand_uniform([3, 2, 3, 3], -2.0, 0.0, &mut rng),
            Tensor::randn([3], &mut rng),
        ];
        record("variational conv", check::<f32>(&f, &inputs, 1e-6).map_err(|e| e.to_string())?.max_relative_error());

        let shape = [2, 1, 3, 3];
        let f = NllFn {
            target: mask(shape, &mut rng),
            noise: (0..4).map(|_| Tensor::randn(shape, &mut rng)).collect(),
        };
        let inputs = [Tensor::randn(shape, &mut rng), Tensor::rand_uniform(shape, -2.0, 1.0, &mut rng)];
        record("nll", check::<f32>(&f, &inputs, 1e-4).map_err(|e| e.to_string())?.max_relative_error());

        let arch = ArchConfig {
            base_filters: 2,
            depth: 1,
            input_size: 4,
            groupnorm_group_size: 1,
            cbam_reduction: 1,
            ..ArchConfig::default()
        };
        let model = ModelGraph::<f64>::build(&arch, seed).map_err(|e| e.to_string())?;
        let mut rng = RngStream::new(seed, 1);
        let f = ElboFn {
            images: Tensor::rand_uniform([2, 1, 4, 4], 0.0, 1.0, &mut rng),
            masks: mask([2, 1, 4, 4], &mut rng),
            cfg: ElboConfig {
                likelihood_mc_samples: 3,
                ..ElboConfig::default()
            },
            rng: RngStream::new(seed, 2),
            model,
        };
        record("elbo", check_params::<f32>(&f, &f.model.params, 1e-6).map_err(|e| e.to_string())?.max_relative_error());
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = format!(
        "{SEEDS} seeds, max f32 relative error {max:.2e} ({}), {:.1}s",
        worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "),
        elapsed.as_secs_f64()
    );
    ensure(max < 1e-3 && elapsed < Duration::from_secs(120), detail)
}

// ---- 2: KL ----

fn kl_oracle() -> Outcome {
    let post = |mu: Vec<f64>, sigma: Vec<f64>| {
        let n = mu.len();
        GaussianPosterior::new(
            Tensor::new([n], mu).unwrap(),
            Tensor::new([n], sigma.into_iter().map(softplus_inv).collect()).unwrap(),
        )
        .unwrap()
    };
    let prior = PriorSpec::default();
    let point = post(vec![0.5], vec![0.3]).kl(&prior).map_err(|e| e.to_string())?;
    // Simpson quadrature of q log(q/p) over mu ± 12 sigma
    let log_n = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let (a, b, n) = (0.5 - 3.6, 0.5 + 3.6, 20_000);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = log_n(x, 0.5, 0.3);
        lq.exp() * (lq - log_n(x, 0.0, 1.0))
    };
    let quad = (1..n).fold(f(a) + f(b), |acc, i| acc + f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }) * h / 3.0;

    let mut rng = RngStream::new(21, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sigma: Vec<f64> = (0..8).map(|_| rng.uniform(0.2, 0.8)).collect();
        let closed = post(mu.clone(), sigma.clone()).kl(&prior).map_err(|e| e.to_string())?;
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            for (m, s) in mu.iter().zip(&sigma) {
                let e: f64 = rng.normal();
                let w = m + s * e;
                acc += -0.5 * e * e - s.ln() + 0.5 * w * w;
            }
        }
        worst = worst.max((acc / draws as f64 - closed).abs() / closed);
    }
    let detail = format!(
        "closed form {point:.6}, quadrature {quad:.6}; worst MC relative gap {:.3}% over 20 posteriors",
        100.0 * worst
    );
    ensure((point - 0.873966).abs() <= 1e-4 && (quad - 0.873966).abs() <= 1e-4 && worst < 0.01, detail)
}

// ---- 3: Flipout ----

struct Moments {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; len],
            sq: vec![0.0; len],
        }
    }
    fn push(&mut self, xs: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(&mut self.sq).zip(xs) {
            *s += x;
            *q += x * x;
        }
    }
    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }
    fn var(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum.iter().zip(&self.sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).collect()
    }
}

fn toy_layer(store: &mut ParamStore<f64>, seed: u64) -> VariationalConv2d {
    let l = VariationalConv2d::new(store, "v", 2, 2, 3, PriorSpec::default(), 0, &mut RngStream::new(seed, 9));
    store.set_value(l.rho, Tensor::full(l.kernel_shape(), softplus_inv(0.5))).unwrap();
    store.set_value(l.bias, Tensor::randn([2], &mut RngStream::new(seed, 10))).unwrap();
    l
}

fn mu_gradient(store: &ParamStore<f64>, l: &VariationalConv2d, x: &Tensor<f64>, y: &Tensor<f64>, shared: bool, rng: &mut RngStream) -> Vec<f64> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let out = if shared {
        let n = x.shape()[0];
        let eps = Tensor::randn(l.kernel_shape(), rng);
        let ones = |c| Tensor::ones([n, c, 1, 1]);
        flipout_conv(&xv, &p.var(l.mu), &p.var(l.rho), Some(&p.var(l.bias)), &eps, &ones(2), &ones(2), Padding::Same).unwrap()
    } else {
        l.flipout_forward(&p, &xv, rng).unwrap()
    };
    let d = out.sub(&tape.constant(y.clone())).unwrap();
    tape.backward(&d.mul(&d).unwrap().mean()).unwrap().get(&p.var(l.mu)).unwrap().to_vec()
}

fn flipout() -> Outcome {
    let start = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let l = toy_layer(&mut store, 4);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::randn([3, 2, 4, 4], &mut RngStream::new(5, 0)));
    let expected = l.frozen_forward(&p, &x).map_err(|e| e.to_string())?;
    let mut m = Moments::new(expected.value().numel());
    let mut rng = RngStream::new(6, 0);
    for _ in 0..10_000 {
        m.push(l.flipout_forward(&p, &x, &mut rng).map_err(|e| e.to_string())?.value().data());
    }
    let worst_z = m
        .mean()
        .iter()
        .zip(m.var())
        .zip(expected.value().data())
        .map(|((mean, var), e)| (mean - e).abs() / (var / m.n as f64).sqrt())
        .fold(0.0, f64::max);

    let mut store = ParamStore::<f64>::new();
    let l = toy_layer(&mut store, 7);
    let mut rng = RngStream::new(8, 0);
    let x = Tensor::randn([32, 2, 6, 6], &mut rng);
    let y = Tensor::randn([32, 2, 6, 6], &mut rng);
    let mut variance = |shared: bool| {
        let mut m = Moments::new(l.kernel_shape().iter().product());
        for _ in 0..300 {
            m.push(&mu_gradient(&store, &l, &x, &y, shared, &mut rng));
        }
        m.var().iter().sum::<f64>()
    };
    let v_shared = variance(true);
    let v_flip = variance(false);
    let ratio = v_flip / v_shared;
    let elapsed = start.elapsed();
    let detail = format!(
        "worst |bias|/SE {worst_z:.2} at 1e4 draws; gradient variance ratio {ratio:.3} at N=32; {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure(worst_z <= 3.0 && ratio <= 0.5 && elapsed < Duration::from_secs(300), detail)
}

// ---- 4: architecture ----

fn architecture() -> Outcome {
    let cfg = |base_filters, placement| ArchConfig {
        base_filters,
        attention_placement: placement,
        ..ArchConfig::default()
    };
    let count = |c: &ArchConfig| build_model(c, 0).map(|m| m.param_count()).map_err(|e| e.to_string());
    let small = count(&cfg(16, AttentionPlacement::BottleneckOnly))?;
    let large = count(&cfg(32, AttentionPlacement::BottleneckOnly))?;
    let ratio = large as f64 / small as f64;
    let x = Tensor::rand_uniform([1, 1, 64, 64], 0.0, 1.0, &mut RngStream::new(1, 0));
    let mut shapes = Vec::new();
    for placement in [AttentionPlacement::BottleneckOnly, AttentionPlacement::CentralLayers] {
        let c = ArchConfig {
            input_size: 64,
            ..cfg(8, placement)
        };
        let m = build_model(&c, 0).map_err(|e| e.to_string())?;
        let out = m.predict(&x, baunet::bayes::LayerMode::Sample, &RngStream::new(0, 0)).map_err(|e| e.to_string())?;
        shapes.push(out.shape() == [1, 2, 64, 64] && out.all_finite());
    }
    let detail = format!("{small} vs {large} parameters, ratio {ratio:.4}; both attention placements run: {shapes:?}");
    ensure((3.9..=4.1).contains(&ratio) && shapes.iter().all(|&s| s), detail)
}

// ---- 5, 7, 8: trained surrogate ----

const EPOCHS: usize = 10;

struct Surrogate {
    model: ModelGraph<f32>,
    test: Vec<Sample>,
    scores: baunet::metrics::SegmentationScores,
    elapsed: Duration,
    sizes: (usize, usize, usize),
}

fn surrogate() -> &'static std::result::Result<Surrogate, String> {
    static CELL: OnceLock<std::result::Result<Surrogate, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let samples = gen_synthetic(450, 64, &SynthConfig::default(), &RngStream::new(1, 0)).map_err(|e| e.to_string())?;
        let spec = SplitSpec {
            train: 300.0 / 450.0,
            val: 50.0 / 450.0,
            test: 100.0 / 450.0,
            seed: 1,
        };
        let splits = split(samples, &spec).map_err(|e| e.to_string())?;
        let arch = ArchConfig {
            base_filters: 8,
            input_size: 64,
            ..ArchConfig::default()
        };
        let mut model = build_model(&arch, 0).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: EPOCHS,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train(&mut model, &splits.train, &splits.val, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let scores = evaluate(&model, &splits.test, 8).map_err(|e| e.to_string())?;
        Ok(Surrogate {
            sizes: (splits.train.len(), splits.val.len(), splits.test.len()),
            model,
            test: splits.test,
            scores,
            elapsed: start.elapsed(),
        })
    })
}

fn training() -> Outcome {
    let s = surrogate().as_ref().map_err(|e| e.clone())?;
    let detail = format!(
        "split {:?}, {EPOCHS} epochs: test F1 {:.4}, IoU {:.4}, {:.0}s",
        s.sizes,
        s.scores.mean_f1,
        s.scores.mean_iou,
        s.elapsed.as_secs_f64()
    );
    ensure(
        s.sizes == (300, 50, 100) && s.scores.mean_f1 >= 0.90 && s.scores.mean_iou >= 0.80 && s.elapsed < Duration::from_secs(600),
        detail,
    )
}

fn degradation() -> Outcome {
    let s = surrogate().as_ref().map_err(|e| e.clone())?;
    let specs = [
        DegradationSpec::Clean,
        DegradationSpec::Blur { sigma: 2.6 },
        DegradationSpec::Blur { sigma: 4.4 },
        DegradationSpec::Rician { sigma: 0.3, seed: 3 },
    ];
    let rows = degradation_report(&s.model, &s.test, &specs, &McConfig::default()).map_err(|e| e.to_string())?;
    let u: Vec<f64> = rows.iter().map(|r| r.mean_total_unc).collect();
    let detail = format!(
        "{} images, mean total uncertainty {}",
        s.test.len(),
        rows.iter()
            .map(|r| format!("{} {:.6} ({:+.1}%)", r.spec_id, r.mean_total_unc, r.pct_change_unc))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(s.test.len() >= 50 && u[0] < u[1] && u[1] < u[2] && u[3] > u[0], detail)
}

fn sweep() -> Outcome {
    let s = surrogate().as_ref().map_err(|e| e.clone())?;
    let rows = t_sweep(&s.model, &images_of(&s.test[..4]), &[5, 30], 20, &McConfig::default()).map_err(|e| e.to_string())?;
    let (a, b) = (&rows[0], &rows[1]);
    let detail = format!(
        "20 repeats on 4 images: var term1 {:.3e} -> {:.3e}, var term2 {:.3e} -> {:.3e} (T 5 -> 30)",
        a.var_term1, b.var_term1, a.var_term2, b.var_term2
    );
    ensure(b.var_term1 < a.var_term1 && b.var_term2 < a.var_term2, detail)
}

// ---- 6: decomposition ----

fn decomposition() -> Outcome {
    let pass = |p: &[f64], v: &[f64]| McSample {
        prob: Tensor::new([1, p.len()], p.to_vec()).unwrap(),
        var: Tensor::new([1, v.len()], v.to_vec()).unwrap(),
    };
    let r = decompose_uncertainty(&[pass(&[0.2], &[0.01]), pass(&[0.4], &[0.03])], LabelConvention::SpreadAleatoric)
        .map_err(|e| e.to_string())?;
    let (t1, t2, total) = (r.term1.data()[0], r.term2.data()[0], r.total.data()[0]);
    let ulps = |x: f64, want: f64| ((x - want) / (want * f64::EPSILON)).abs();
    let hand = ulps(t1, 0.01).max(ulps(t2, 0.02)).max(ulps(total, 0.03));

    let mut rng = RngStream::new(17, 0);
    let (mut additive, mut max_t1) = (true, 0.0f64);
    for _ in 0..200 {
        let t = 2 + rng.below(20);
        let samples: Vec<McSample> = (0..t)
            .map(|_| {
                let p: Vec<f64> = (0..16).map(|_| rng.uniform(0.0, 1.0)).collect();
                let v: Vec<f64> = (0..16).map(|_| rng.uniform(0.0, 0.25)).collect();
                pass(&p, &v)
            })
            .collect();
        let r = decompose_uncertainty(&samples, LabelConvention::SpreadAleatoric).map_err(|e| e.to_string())?;
        additive &= r.total.data().iter().zip(r.term1.data()).zip(r.term2.data()).all(|((s, a), b)| *s == a + b);
        max_t1 = r.term1.data().iter().copied().fold(max_t1, f64::max);
    }
    let detail = format!(
        "hand case {t1} / {t2} / {total} (max {hand:.1} ulps from 0.01/0.02/0.03, total == term1 + term2: {}); \
         200 random cases additive: {additive}, max term1 {max_t1:.4}",
        total == t1 + t2
    );
    ensure(hand <= 4.0 && total == t1 + t2 && additive && max_t1 <= 0.25, detail)
}

// ---- 9: samplers ----

fn samplers() -> Outcome {
    let sigma = 0.3;
    let n = 1_000_000;
    let mut xs = rayleigh_sample(sigma, n, &mut RngStream::new(9, 0)).map_err(|e| e.to_string())?;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let want = sigma * (std::f64::consts::PI / 2.0).sqrt();
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| 1.0 - (-x * x / (2.0 * sigma * sigma)).exp();
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - c)
        })
        .fold(0.0, f64::max);

    let mut kernel_gap = 0.0f64;
    let mut const_gap = 0.0f64;
    for s in [0.5, 1.0, 2.6, 4.4] {
        let k = gaussian_kernel(s).map_err(|e| e.to_string())?;
        kernel_gap = kernel_gap.max((k.data().iter().sum::<f64>() - 1.0).abs());
        for c in [0.0f32, 0.37, 1.0] {
            let img = Tensor::full([1, 40, 40], c);
            let out = gaussian_blur(&img, s).map_err(|e| e.to_string())?;
            const_gap = out.data().iter().map(|&v| f64::from((v - c).abs())).fold(const_gap, f64::max);
        }
    }
    let rel = (mean - want).abs() / want;
    let detail = format!(
        "Rayleigh mean {mean:.5} vs {want:.5} ({:.3}%), KS {ks:.5}; kernel sum error {kernel_gap:.1e}, constant image error {const_gap:.1e}",
        100.0 * rel
    );
    ensure(rel < 0.01 && ks < 0.002 && kernel_gap <= 1e-6 && const_gap <= 1e-6, detail)
}

// ---- 10: CLI reproducibility ----

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let tiny = [
        "--set", "arch.base_filters=2", "--set", "arch.depth=2", "--set", "arch.groupnorm_group_size=2",
        "--set", "arch.cbam_reduction=2", "--seed", "5",
    ];
    let run = |threads: &str, label: &str| -> std::result::Result<PathBuf, String> {
        let base = root.join(label);
        let data = base.join("data");
        let ckpt = base.join("train").join("checkpoint");
        let specs = root.join("specs.json");
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        fs::write(&specs, r#"[{"kind": "clean"}, {"kind": "blur", "sigma": 1.5}, {"kind": "rician", "sigma": 0.1}]"#)
            .map_err(|e| e.to_string())?;
        let image = data.join("images").join("synth_00000.png");
        let (d, c, s, i) = (data.to_str().unwrap(), ckpt.to_str().unwrap(), specs.to_str().unwrap(), image.to_str().unwrap());
        let commands: [(&str, Vec<&str>); 6] = [
            ("data", vec!["synth", "--n", "24", "--size", "16"]),
            ("train", vec!["train", "--data", d, "--epochs", "2"]),
            ("infer", vec!["infer", "--checkpoint", c, "--image", i, "--T", "4"]),
            ("degrade", vec!["degrade", "--image", i, "--kind", "rician", "--sigma", "0.2"]),
            ("eval", vec!["eval", "--checkpoint", c, "--data", d, "--specs", s]),
            ("sweep", vec!["sweep", "--checkpoint", c, "--data", d, "--T-values", "2,4", "--repeats", "3", "--images", "2"]),
        ];
        for (dir, args) in commands {
            let out_dir = base.join(dir);
            let out = Command::new(env!("CARGO_BIN_EXE_baunet"))
                .args(["--threads", threads, "--output-dir", out_dir.to_str().unwrap()])
                .args(tiny)
                .args(&args)
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        Ok(base)
    };
    let a = run("1", "a")?;
    let b = run("1", "b")?;
    let c = run("3", "c")?;
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    // snapshots embed absolute paths of their own run directory
    let strip = |t: &[(PathBuf, Vec<u8>)], base: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let prefix = base.to_str().unwrap();
        t.iter()
            .map(|(p, bytes)| {
                let bytes = match std::str::from_utf8(bytes) {
                    Ok(text) if p.extension().is_some_and(|e| e == "json") => text.replace(prefix, "<run>").into_bytes(),
                    _ => bytes.clone(),
                };
                (p.clone(), bytes)
            })
            .collect()
    };
    let (ta, tb, tc) = (strip(&ta, &a), strip(&tb, &b), strip(&tc, &c));
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .zip(&tc)
        .filter(|((x, y), z)| x != y || x != z)
        .map(|((x, _), _)| x.0.display().to_string())
        .collect();
    let detail = format!(
        "6 commands x 3 runs (1, 1 and 3 threads): {} files compared, {} differ {:?}",
        ta.len(),
        differing.len(),
        differing
    );
    ensure(ta.len() == tb.len() && ta.len() == tc.len() && !ta.is_empty() && differing.is_empty(), detail)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("C1 gradient suite", gradient_suite),
        ("C2 KL oracle", kl_oracle),
        ("C3 flipout", flipout),
        ("C4 architecture", architecture),
        ("C5 desk-scale training", training),
        ("C6 uncertainty decomposition", decomposition),
        ("C7 degradation response", degradation),
        ("C8 T-sweep", sweep),
        ("C9 samplers", samplers),
        ("C10 reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
