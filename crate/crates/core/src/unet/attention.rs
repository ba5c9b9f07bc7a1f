//! Convolutional block attention: a channel gate followed by a spatial gate.

use crate::error::{Error, Result};
use crate::tensor::{Binding, Padding, ParamId, ParamStore, PoolAxis, PoolKind, Real, RngStream, Tensor, Var};

pub const SPATIAL_KERNEL: usize = 7;

/// Parameters of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbam {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub spatial_weight: ParamId,
    pub spatial_bias: ParamId,
}

/// Shared two-layer MLP of the channel gate, as bound tape values.
pub struct ChannelMlp<'t, F: Real> {
    /// `[hidden, C, 1, 1]`
    pub fc1_weight: Var<'t, F>,
    pub fc1_bias: Var<'t, F>,
    /// `[C, hidden, 1, 1]`
    pub fc2_weight: Var<'t, F>,
    pub fc2_bias: Var<'t, F>,
}

impl<'t, F: Real> ChannelMlp<'t, F> {
    fn apply(&self, v: &Var<'t, F>) -> Result<Var<'t, F>> {
        let h = v.conv2d(&self.fc1_weight, Some(&self.fc1_bias), 1, Padding::Same)?.relu();
        h.conv2d(&self.fc2_weight, Some(&self.fc2_bias), 1, Padding::Same)
    }
}

/// `sigmoid(MLP(avg_pool(x)) + MLP(max_pool(x)))`, shape `[N, C, 1, 1]`.
pub fn channel_attention<'t, F: Real>(x: &Var<'t, F>, mlp: &ChannelMlp<'t, F>) -> Result<Var<'t, F>> {
    let avg = mlp.apply(&x.global_pool(PoolKind::Avg, PoolAxis::Spatial)?)?;
    let max = mlp.apply(&x.global_pool(PoolKind::Max, PoolAxis::Spatial)?)?;
    Ok(avg.add(&max)?.sigmoid())
}

/// `sigmoid(conv7x7([mean_c(x); max_c(x)]))`, shape `[N, 1, H, W]`.
pub fn spatial_attention<'t, F: Real>(x: &Var<'t, F>, weight: &Var<'t, F>, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
    let avg = x.global_pool(PoolKind::Avg, PoolAxis::Channel)?;
    let max = x.global_pool(PoolKind::Max, PoolAxis::Channel)?;
    let stacked = Var::concat_channels(&[&avg, &max])?;
    Ok(stacked.conv2d(weight, Some(bias), 1, Padding::Same)?.sigmoid())
}

impl Cbam {
    /// Errors when `channels < reduction` or `reduction == 0`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::invalid(
                "channel_attention",
                format!("{channels} channels cannot be reduced by {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        let mut he = |shape: [usize; 4]| {
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, rng)
        };
        let k = SPATIAL_KERNEL;
        let fc1_weight = he([hidden, channels, 1, 1]);
        let fc2_weight = he([channels, hidden, 1, 1]);
        let spatial_weight = he([1, 2, k, k]);
        Ok(Self {
            name: name.to_string(),
            channels,
            hidden,
            fc1_weight: store.add(format!("{name}.fc1.weight"), fc1_weight),
            fc1_bias: store.add(format!("{name}.fc1.bias"), Tensor::zeros([hidden])),
            fc2_weight: store.add(format!("{name}.fc2.weight"), fc2_weight),
            fc2_bias: store.add(format!("{name}.fc2.bias"), Tensor::zeros([channels])),
            spatial_weight: store.add(format!("{name}.spatial.weight"), spatial_weight),
            spatial_bias: store.add(format!("{name}.spatial.bias"), Tensor::zeros([1])),
        })
    }

    pub fn mlp<'t, F: Real>(&self, params: &Binding<'t, '_, F>) -> ChannelMlp<'t, F> {
        ChannelMlp {
            fc1_weight: params.var(self.fc1_weight),
            fc1_bias: params.var(self.fc1_bias),
            fc2_weight: params.var(self.fc2_weight),
            fc2_bias: params.var(self.fc2_bias),
        }
    }

    pub fn channel_attention<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("channel_attention", "channels (dim 1)", self.channels, c));
        }
        channel_attention(x, &self.mlp(params))
    }

    pub fn spatial_attention<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        spatial_attention(x, &params.var(self.spatial_weight), &params.var(self.spatial_bias))
    }

    /// `F' = M_c(F) ∘ F`, then `F'' = M_s(F') ∘ F'`.
    pub fn apply<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let refined = x.mul(&self.channel_attention(params, x)?)?;
        refined.mul(&self.spatial_attention(params, &refined)?)
    }

    pub fn param_count(&self) -> usize {
        2 * self.hidden * self.channels + self.hidden + self.channels + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL + 1
    }
}
