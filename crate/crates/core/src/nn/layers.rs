use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::ops::{effective_groups, ConvSpec, NORM_EPS};
use crate::nn::params::{Init, ParamBuilder, ParamId};
use crate::nn::tensor::Real;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        let mut sub = pb.sub(name);
        let fan_in = in_channels / spec.groups * kernel * kernel;
        let weight = sub.add(
            "weight",
            &[out_channels, in_channels / spec.groups, kernel, kernel],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(sub.add("bias", &[out_channels], Init::KaimingUniform { fan_in })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn pointwise<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(pb, name, cin, cout, 1, ConvSpec::new(1, 0, 1), bias)
    }

    /// 3x3 depthwise, stride 1, padding 1.
    pub fn depthwise<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, bias: bool) -> Result<Self> {
        Self::new(pb, name, channels, channels, 3, ConvSpec::new(1, 1, channels), bias)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels / self.spec.groups * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// `groups` is capped to the largest divisor of `channels` not above the request.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gamma: sub.add("gamma", &[channels], Init::Ones)?,
            beta: sub.add("beta", &[channels], Init::Zeros)?,
            groups: effective_groups(channels, groups),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gamma: sub.add("gamma", &[channels], Init::Ones)?,
            beta: sub.add("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}
