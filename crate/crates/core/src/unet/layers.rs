use crate::bayes::{LayerMode, VariationalConv2d};
use crate::error::Result;
use crate::tensor::{Binding, Padding, ParamId, ParamStore, Real, RngStream, Tensor, Var};

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Plain convolution with a He-uniform kernel and zero bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut RngStream,
    ) -> Self {
        let bound = (6.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::rand_uniform([cout, cin, kernel, kernel], -bound, bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self {
            name: name.to_string(),
            weight,
            bias,
        }
    }

    pub fn forward<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        x.conv2d(&params.var(self.weight), Some(&params.var(self.bias)), 1, Padding::Same)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvLayer {
    Deterministic(Conv2d),
    Variational(VariationalConv2d),
}

impl ConvLayer {
    pub fn forward<'t, F: Real>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        mode: LayerMode,
        rng: &RngStream,
    ) -> Result<Var<'t, F>> {
        match self {
            Self::Deterministic(c) => c.forward(params, x),
            Self::Variational(v) => v.forward(params, x, mode, rng),
        }
    }

    pub fn variational(&self) -> Option<&VariationalConv2d> {
        match self {
            Self::Variational(v) => Some(v),
            Self::Deterministic(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// `group_size` channels per group, clamped to `channels`.
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, group_size: usize) -> Self {
        let per_group = group_size.min(channels);
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups: channels / per_group,
        }
    }

    pub fn forward<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        x.group_norm(self.groups, &params.var(self.gamma), &params.var(self.beta), GROUP_NORM_EPS)
    }
}

/// 3×3 convolution, group norm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn forward<'t, F: Real>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        mode: LayerMode,
        rng: &RngStream,
    ) -> Result<Var<'t, F>> {
        let y = self.conv.forward(params, x, mode, rng)?;
        Ok(self.norm.forward(params, &y)?.relu())
    }
}
