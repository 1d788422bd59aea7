//! Declarative layer descriptions and their parameterized instances.

use serde::{Deserialize, Serialize};

use super::{Graph, Initializer, ParamId, ParamRole, ParameterStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Swish,
    Tanh,
}

/// One layer kind with its shape parameters. Every convolution uses "same"
/// padding, so only pooling and upsampling change spatial dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    Conv1x1 {
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    },
    /// Kernel spans (time, height, width) with the same odd size on each axis.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    ConvLstm2d {
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        /// Many-to-many: emit the hidden map of every step as `[N,H,T,h,w]`;
        /// otherwise only the last one as `[N,H,h,w]`.
        return_sequences: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    MaxPool2x2,
    AvgPool2x2,
    Upsample2x,
    Activation(Activation),
    /// Channel concatenation of all inputs.
    Concat,
    /// Element-wise product of two inputs; a 1-channel operand is broadcast
    /// over the channels of the other.
    HadamardFuse,
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        let odd = |k: usize, what: &str| {
            if k % 2 == 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} kernel must be odd, got {k}")))
            }
        };
        let positive = |c: usize, what: &str| {
            if c > 0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} channel count must be positive")))
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                odd(kernel, "conv")?;
                positive(in_channels, "conv")?;
                positive(out_channels, "conv")
            }
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
                ..
            } => {
                positive(in_channels, "conv1x1")?;
                positive(out_channels, "conv1x1")
            }
            LayerSpec::ConvLstm2d {
                in_channels,
                hidden,
                kernel,
                ..
            } => {
                odd(kernel, "convlstm")?;
                positive(in_channels, "convlstm")?;
                positive(hidden, "convlstm")
            }
            LayerSpec::DepthwiseConv2d { channels, kernel, .. } => {
                odd(kernel, "depthwise")?;
                positive(channels, "depthwise")
            }
            LayerSpec::BatchNorm { channels } => positive(channels, "batch norm"),
            _ => Ok(()),
        }
    }
}

/// A [`LayerSpec`] bound to its parameters inside a store.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    params: Vec<ParamId>,
}

impl Layer {
    /// Registers the parameters of `spec` under `name.` and initializes them:
    /// He-uniform kernels, zero biases, unit scale and zero shift for batch
    /// norm with running mean 0 and running variance 1.
    pub fn build<T: Scalar>(
        store: &mut ParameterStore<T>,
        init: &mut Initializer,
        name: impl Into<String>,
        spec: LayerSpec,
    ) -> Result<Layer> {
        spec.validate()?;
        let name = name.into();
        let mut params = Vec::new();
        let mut kernel = |store: &mut ParameterStore<T>, shape: &[usize], bias: bool| {
            let fan_in: usize = shape[1..].iter().product();
            let mut ids = vec![store.add(
                format!("{name}.weight"),
                ParamRole::Weight,
                init.he_uniform(shape, fan_in),
            )];
            if bias {
                ids.push(store.add(
                    format!("{name}.bias"),
                    ParamRole::Bias,
                    Tensor::zeros(&shape[..1]),
                ));
            }
            ids
        };
        match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: k,
                bias,
            } => params = kernel(store, &[out_channels, in_channels, k, k], bias),
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
                bias,
            } => params = kernel(store, &[out_channels, in_channels, 1, 1], bias),
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel: k,
                bias,
            } => params = kernel(store, &[out_channels, in_channels, k, k, k], bias),
            LayerSpec::ConvLstm2d {
                in_channels,
                hidden,
                kernel: k,
                ..
            } => params = kernel(store, &[4 * hidden, in_channels + hidden, k, k], true),
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel: k,
                bias,
            } => params = kernel(store, &[channels, 1, k, k], bias),
            LayerSpec::BatchNorm { channels } => {
                let c = [channels];
                params.push(store.add(format!("{name}.gamma"), ParamRole::Gamma, Tensor::full(&c, T::one())));
                params.push(store.add(format!("{name}.beta"), ParamRole::Beta, Tensor::zeros(&c)));
                params.push(store.add(
                    format!("{name}.running_mean"),
                    ParamRole::RunningMean,
                    Tensor::zeros(&c),
                ));
                params.push(store.add(
                    format!("{name}.running_var"),
                    ParamRole::RunningVar,
                    Tensor::full(&c, T::one()),
                ));
            }
            _ => {}
        }
        Ok(Layer { name, spec, params })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var> {
        self.forward_inner(g, inputs).map_err(|e| match e {
            Error::Shape { layer, detail } => Error::Shape {
                layer: format!("{} ({layer})", self.name),
                detail,
            },
            other => other,
        })
    }

    fn one(&self, inputs: &[Var]) -> Result<Var> {
        match inputs {
            [x] => Ok(*x),
            _ => Err(Error::shape(
                self.name.clone(),
                format!("expects 1 input, got {}", inputs.len()),
            )),
        }
    }

    fn forward_inner<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var> {
        let p = |g: &mut Graph<'_, T>, i: usize| g.param(self.params[i]);
        match &self.spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Conv1x1 { .. } => {
                let x = self.one(inputs)?;
                if g.shape(x).len() != 4 {
                    return Err(Error::shape("conv2d", format!("needs [N,C,H,W], got {:?}", g.shape(x))));
                }
                let w = p(g, 0);
                let b = (self.params.len() > 1).then(|| p(g, 1));
                g.conv(x, w, b)
            }
            LayerSpec::Conv3d { .. } => {
                let x = self.one(inputs)?;
                if g.shape(x).len() != 5 {
                    return Err(Error::shape("conv3d", format!("needs [N,C,T,H,W], got {:?}", g.shape(x))));
                }
                let w = p(g, 0);
                let b = (self.params.len() > 1).then(|| p(g, 1));
                g.conv(x, w, b)
            }
            LayerSpec::DepthwiseConv2d { .. } => {
                let x = self.one(inputs)?;
                let w = p(g, 0);
                let b = (self.params.len() > 1).then(|| p(g, 1));
                g.depthwise_conv(x, w, b)
            }
            LayerSpec::ConvLstm2d {
                in_channels,
                hidden,
                return_sequences,
                ..
            } => {
                let x = self.one(inputs)?;
                self.convlstm(g, x, *in_channels, *hidden, *return_sequences)
            }
            LayerSpec::BatchNorm { .. } => {
                let x = self.one(inputs)?;
                let (gamma, beta) = (p(g, 0), p(g, 1));
                g.batch_norm(x, gamma, beta, self.params[2], self.params[3])
            }
            LayerSpec::MaxPool2x2 => {
                let x = self.one(inputs)?;
                g.max_pool2(x)
            }
            LayerSpec::AvgPool2x2 => {
                let x = self.one(inputs)?;
                g.avg_pool2(x)
            }
            LayerSpec::Upsample2x => {
                let x = self.one(inputs)?;
                g.upsample2(x)
            }
            LayerSpec::Activation(a) => {
                let x = self.one(inputs)?;
                Ok(match a {
                    Activation::Sigmoid => g.sigmoid(x),
                    Activation::Relu => g.relu(x),
                    Activation::Swish => g.swish(x),
                    Activation::Tanh => g.tanh(x),
                })
            }
            LayerSpec::Concat => g.concat(inputs),
            LayerSpec::HadamardFuse => match inputs {
                [a, b] => g.mul(*a, *b),
                _ => Err(Error::shape(
                    "hadamard",
                    format!("expects 2 inputs, got {}", inputs.len()),
                )),
            },
        }
    }

    /// Gate order along the output channels: input, forget, candidate, output.
    fn convlstm<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        in_channels: usize,
        hidden: usize,
        return_sequences: bool,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != in_channels {
            return Err(Error::shape(
                "convlstm",
                format!("needs [N,{in_channels},T,H,W], got {xs:?}"),
            ));
        }
        let (n, steps, h, w) = (xs[0], xs[2], xs[3], xs[4]);
        let wt = g.param(self.params[0]);
        let bias = g.param(self.params[1]);
        let state_shape = [n, hidden, h, w];
        let mut hs = g.input(Tensor::zeros(&state_shape));
        let mut cs = g.input(Tensor::zeros(&state_shape));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.select_time(x, t)?;
            let joined = g.concat(&[xt, hs])?;
            let z = g.conv(joined, wt, Some(bias))?;
            let zi = g.slice_channels(z, 0, hidden)?;
            let zf = g.slice_channels(z, hidden, hidden)?;
            let zg = g.slice_channels(z, 2 * hidden, hidden)?;
            let zo = g.slice_channels(z, 3 * hidden, hidden)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, cs)?;
            let write = g.mul(i, cand)?;
            cs = g.add(keep, write)?;
            let squashed = g.tanh(cs);
            hs = g.mul(o, squashed)?;
            outputs.push(hs);
        }
        if return_sequences {
            g.stack_time(&outputs)
        } else {
            Ok(hs)
        }
    }
}

/// A sequential stack of single-input layers.
#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |v, layer| layer.forward(g, &[v]))
    }
}

/// Builds a sequential network named `layer{i}` and its freshly initialized
/// parameters; deterministic in `seed`.
pub fn init_parameters<T: Scalar>(specs: &[LayerSpec], seed: u64) -> Result<(Network, ParameterStore<T>)> {
    let mut store = ParameterStore::new();
    let mut init = Initializer::new(seed);
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Layer::build(&mut store, &mut init, format!("layer{i}"), s.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((Network { layers }, store))
}
