//! The Bayesian attention U-Net.
//!
//! Encoder stage `i` has `base_filters · 2^i` channels: two [`ConvBlock`]s
//! and a 2×2 max pool, with the pre-pool activation kept as the skip. The
//! bottleneck is two blocks followed by [`Cbam`]. Each decoder stage
//! upsamples, applies a block that halves the channels, concatenates the
//! skip and applies two more blocks. Decoder convolutions are variational
//! except the trailing `deterministic_tail_convs`. A 1×1 head maps to two
//! channels: the segmentation logit and the log aleatoric variance.

mod attention;
mod layers;

use serde::{Deserialize, Serialize};

pub use attention::{channel_attention, spatial_attention, ChannelMlp, Cbam, SPATIAL_KERNEL};
pub use layers::{Conv2d, ConvBlock, ConvLayer, GroupNorm};

use crate::bayes::{Estimator, LayerMode, PriorSpec, VariationalConv2d};
use crate::error::{Error, Result};
use crate::tensor::{Binding, ParamStore, PoolKind, Real, RngStream, Tape, Tensor, Var};

/// Where attention modules sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlacement {
    #[default]
    BottleneckOnly,
    /// Bottleneck plus the deepest encoder and decoder stages.
    CentralLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub variational_decoder: bool,
    pub deterministic_tail_convs: usize,
    pub attention_placement: AttentionPlacement,
    /// Channels per normalization group, clamped to the layer width.
    pub groupnorm_group_size: usize,
    pub cbam_reduction: usize,
    /// Square input side.
    pub input_size: usize,
    pub prior: PriorSpec,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_filters: 16,
            depth: 4,
            variational_decoder: true,
            deterministic_tail_convs: 2,
            attention_placement: AttentionPlacement::BottleneckOnly,
            groupnorm_group_size: 32,
            cbam_reduction: 8,
            input_size: 256,
            prior: PriorSpec::default(),
        }
    }
}

impl ArchConfig {
    /// Three convolutions per decoder stage.
    pub fn decoder_convs(&self) -> usize {
        3 * self.depth
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_filters << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "build_model";
        let bad = |msg: String| Err(Error::invalid(OP, msg));
        if self.base_filters == 0 {
            return bad("base_filters must be at least 1".into());
        }
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth {} outside 1..=16", self.depth));
        }
        if self.deterministic_tail_convs > self.decoder_convs() {
            return bad(format!(
                "deterministic_tail_convs {} exceeds the {} decoder convolutions",
                self.deterministic_tail_convs,
                self.decoder_convs()
            ));
        }
        if self.groupnorm_group_size == 0 || self.cbam_reduction == 0 {
            return bad("groupnorm_group_size and cbam_reduction must be positive".into());
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return bad(format!("input_size {} not divisible by 2^depth = {stride}", self.input_size));
        }
        for i in 0..=self.depth {
            let c = self.base_filters << i;
            let per_group = self.groupnorm_group_size.min(c);
            if !c.is_multiple_of(per_group) {
                return bad(format!("{c} channels not divisible into groups of {per_group}"));
            }
        }
        self.prior.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    up: ConvBlock,
    fuse: [ConvBlock; 2],
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct ModelGraph<F: Real = f32> {
    pub config: ArchConfig,
    pub params: ParamStore<F>,
    encoder: Vec<[ConvBlock; 2]>,
    encoder_attention: Option<Cbam>,
    bottleneck: [ConvBlock; 2],
    bottleneck_attention: Cbam,
    /// Deepest stage first.
    decoder: Vec<DecoderStage>,
    decoder_attention: Option<Cbam>,
    head: Conv2d,
    variational: Vec<VariationalConv2d>,
}

/// Builds an `f32` model with parameters initialized from `seed`.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<ModelGraph<f32>> {
    ModelGraph::build(cfg, seed)
}

struct Builder<'a, F: Real> {
    cfg: &'a ArchConfig,
    store: ParamStore<F>,
    rng: RngStream,
    variational: Vec<VariationalConv2d>,
}

impl<F: Real> Builder<'_, F> {
    fn block(&mut self, name: &str, cin: usize, cout: usize, variational: bool) -> ConvBlock {
        let conv = if variational {
            let label = self.variational.len() as u64;
            let layer = VariationalConv2d::new(&mut self.store, name, cin, cout, 3, self.cfg.prior, label, &mut self.rng);
            self.variational.push(layer.clone());
            ConvLayer::Variational(layer)
        } else {
            ConvLayer::Deterministic(Conv2d::new(&mut self.store, name, cin, cout, 3, &mut self.rng))
        };
        let norm = GroupNorm::new(&mut self.store, &format!("{name}.norm"), cout, self.cfg.groupnorm_group_size);
        ConvBlock { conv, norm }
    }

    fn attention(&mut self, name: &str, channels: usize) -> Result<Cbam> {
        // Narrow desk-scale layers cannot support the full reduction ratio.
        let reduction = self.cfg.cbam_reduction.min(channels);
        Cbam::new(&mut self.store, name, channels, reduction, &mut self.rng)
    }
}

impl<F: Real> ModelGraph<F> {
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            store: ParamStore::new(),
            rng: RngStream::new(seed, 0),
            variational: Vec::new(),
        };
        let width = |i: usize| cfg.base_filters << i;
        let central = cfg.attention_placement == AttentionPlacement::CentralLayers;

        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for i in 0..cfg.depth {
            let c = width(i);
            encoder.push([
                b.block(&format!("enc{i}.conv0"), cin, c, false),
                b.block(&format!("enc{i}.conv1"), c, c, false),
            ]);
            cin = c;
        }
        let encoder_attention = central
            .then(|| b.attention(&format!("enc{}.cbam", cfg.depth - 1), width(cfg.depth - 1)))
            .transpose()?;

        let c = width(cfg.depth);
        let bottleneck = [
            b.block("bottleneck.conv0", cin, c, false),
            b.block("bottleneck.conv1", c, c, false),
        ];
        let bottleneck_attention = b.attention("bottleneck.cbam", c)?;

        let variational_convs = if cfg.variational_decoder {
            cfg.decoder_convs() - cfg.deterministic_tail_convs
        } else {
            0
        };
        let mut conv_index = 0;
        let mut is_variational = || {
            conv_index += 1;
            conv_index <= variational_convs
        };
        let mut decoder = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let c = width(i);
            let up = b.block(&format!("dec{i}.up"), 2 * c, c, is_variational());
            let fuse0 = b.block(&format!("dec{i}.conv0"), 2 * c, c, is_variational());
            let fuse1 = b.block(&format!("dec{i}.conv1"), c, c, is_variational());
            decoder.push(DecoderStage { up, fuse: [fuse0, fuse1] });
        }
        let decoder_attention = central
            .then(|| b.attention(&format!("dec{}.cbam", cfg.depth - 1), width(cfg.depth - 1)))
            .transpose()?;
        let head = Conv2d::new(&mut b.store, "head", cfg.base_filters, 2, 1, &mut b.rng);

        Ok(Self {
            config: cfg.clone(),
            params: b.store,
            encoder,
            encoder_attention,
            bottleneck,
            bottleneck_attention,
            decoder,
            decoder_attention,
            head,
            variational: b.variational,
        })
    }

    /// The same network with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> ModelGraph<G> {
        ModelGraph {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            encoder_attention: self.encoder_attention.clone(),
            bottleneck: self.bottleneck.clone(),
            bottleneck_attention: self.bottleneck_attention.clone(),
            decoder: self.decoder.clone(),
            decoder_attention: self.decoder_attention.clone(),
            head: self.head.clone(),
            variational: self.variational.clone(),
        }
    }

    pub fn variational_layers(&self) -> &[VariationalConv2d] {
        &self.variational
    }

    /// Switches the training-mode estimator of every variational layer.
    pub fn set_estimator(&mut self, estimator: Estimator) {
        let set = |layer: &mut VariationalConv2d| layer.estimator = estimator;
        self.variational.iter_mut().for_each(set);
        for block in self.decoder.iter_mut().flat_map(|s| std::iter::once(&mut s.up).chain(s.fuse.iter_mut())) {
            if let ConvLayer::Variational(v) = &mut block.conv {
                set(v);
            }
        }
    }

    /// Total scalar parameters, counting both `mu` and `rho` of variational kernels.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// `[N, 1, H, W]` → `[N, 2, H, W]` (logit, log variance).
    pub fn forward<'t>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        mode: LayerMode,
        rng: &RngStream,
    ) -> Result<Var<'t, F>> {
        const OP: &str = "forward";
        let (_, c, h, w) = x.value().dims4()?;
        if c != 1 {
            return Err(Error::shape(OP, "input channels (dim 1)", 1, c));
        }
        let stride = 1usize << self.config.depth;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::invalid(OP, format!("spatial size {h}x{w} not divisible by {stride}")));
        }

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut y = x.clone();
        let last = self.encoder.len() - 1;
        for (i, [a, b]) in self.encoder.iter().enumerate() {
            y = a.forward(params, &y, mode, rng)?;
            y = b.forward(params, &y, mode, rng)?;
            if i == last {
                if let Some(att) = &self.encoder_attention {
                    y = att.apply(params, &y)?;
                }
            }
            let pooled = y.pool2d(PoolKind::Max, 2, 2)?;
            skips.push(y);
            y = pooled;
        }
        for block in &self.bottleneck {
            y = block.forward(params, &y, mode, rng)?;
        }
        y = self.bottleneck_attention.apply(params, &y)?;
        for (i, stage) in self.decoder.iter().enumerate() {
            let up = stage.up.forward(params, &y.upsample2x()?, mode, rng)?;
            let skip = skips.pop().expect("one skip per stage");
            y = Var::concat_channels(&[&skip, &up])?;
            for block in &stage.fuse {
                y = block.forward(params, &y, mode, rng)?;
            }
            if i == 0 {
                if let Some(att) = &self.decoder_attention {
                    y = att.apply(params, &y)?;
                }
            }
        }
        self.head.forward(params, &y)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, x: &Tensor<F>, mode: LayerMode, rng: &RngStream) -> Result<Tensor<F>> {
        let tape = Tape::no_grad();
        let params = self.params.bind(&tape);
        let out = self.forward(&params, &tape.constant(x.clone()), mode, rng)?;
        Ok(out.value().clone())
    }

    /// Sum of the KL terms of every variational layer.
    pub fn kl_total<'t>(&self, params: &Binding<'t, '_, F>) -> Result<Var<'t, F>> {
        let mut total = params.tape().constant(Tensor::scalar(F::zero()));
        for layer in &self.variational {
            total = total.add(&layer.kl(params)?)?;
        }
        Ok(total)
    }

    pub fn kl_value(&self) -> Result<f64> {
        let tape = Tape::no_grad();
        Ok(self.kl_total(&self.params.bind(&tape))?.value().item()?.f64())
    }
}
