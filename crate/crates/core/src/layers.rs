//! Parameterized building blocks: each holds [`ParamId`]s and runs its
//! primitive on a [`Session`].

use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::nn::ConvSpec;
use crate::params::{Init, NormId, ParamId, ParamRegistry, Session};
use crate::tape::Var;
use crate::tensor::Scalar;

pub const INIT_STD: f64 = 0.02;

const WEIGHT: Init = Init::TruncatedNormal { std: INIT_STD };

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: reg.param(format!("{name}.weight"), &[in_dim, out_dim], WEIGHT),
            bias: Some(reg.param(format!("{name}.bias"), &[out_dim], Init::Zeros)),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: reg.param(format!("{name}.weight"), &[in_dim, out_dim], WEIGHT),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: reg.param(format!("{name}.gamma"), &[channels], Init::Ones),
            beta: reg.param(format!("{name}.beta"), &[channels], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layernorm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: NormId,
}

impl BatchNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: reg.param(format!("{name}.gamma"), &[channels], Init::Ones),
            beta: reg.param(format!("{name}.beta"), &[channels], Init::Zeros),
            stats: reg.batch_norm(String::from(name), channels),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batchnorm2d(x, self.gamma, self.beta, self.stats)
    }
}

/// Ordinary, depthwise or transposed 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    transposed: bool,
}

impl Conv {
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        let shape = if spec.depthwise {
            [k, k, spec.in_channels].to_vec()
        } else {
            [k, k, spec.in_channels, spec.out_channels].to_vec()
        };
        Conv {
            weight: reg.param(format!("{name}.weight"), &shape, WEIGHT),
            bias: reg.param(format!("{name}.bias"), &[spec.out_channels], Init::Zeros),
            spec,
            transposed: false,
        }
    }

    pub fn transposed(reg: &mut ParamRegistry, name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        Conv {
            weight: reg.param(format!("{name}.weight"), &[k, k, spec.out_channels, spec.in_channels], WEIGHT),
            bias: reg.param(format!("{name}.bias"), &[spec.out_channels], Init::Zeros),
            spec,
            transposed: true,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        if self.transposed {
            s.tape.conv_transpose2d(x, w, Some(b), &self.spec)
        } else {
            s.tape.conv2d(x, w, Some(b), &self.spec)
        }
    }
}
