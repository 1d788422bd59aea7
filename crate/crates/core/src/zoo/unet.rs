//! Encoder-decoder segmentation network with skip connections.

use super::config::BackboneKind;
use crate::error::Result;
use crate::nn::{Activation, Graph, Initializer, Layer, LayerSpec, ParameterStore, Scalar, Var};

/// Number of 2× downsamplings in the encoder.
pub const DEPTH: usize = 4;

/// Channel expansion of every MBConv block after the first.
pub const MBCONV_EXPANSION: usize = 4;

pub fn channel_plan(backbone: BackboneKind, base: usize) -> [usize; DEPTH] {
    match backbone {
        BackboneKind::CompactVgg => [base, 2 * base, 4 * base, 8 * base],
        BackboneKind::CompactEffNet => {
            // At least 2 so no block normalizes a single-channel projection.
            [16, 24, 40, 80].map(|c| ((c * base) as f64 / 16.0).round().max(2.0) as usize)
        }
    }
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParameterStore<T>,
    init: &'a mut Initializer,
}

impl<T: Scalar> Builder<'_, T> {
    fn layer(&mut self, name: String, spec: LayerSpec) -> Result<Layer> {
        Layer::build(self.store, self.init, name, spec)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<[Layer; 2]> {
        let spec = if kernel == 1 {
            LayerSpec::Conv1x1 {
                in_channels: cin,
                out_channels: cout,
                bias: false,
            }
        } else {
            LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                bias: false,
            }
        };
        Ok([
            self.layer(format!("{name}.conv"), spec)?,
            self.layer(format!("{name}.bn"), LayerSpec::BatchNorm { channels: cout })?,
        ])
    }
}

fn act<T: Scalar>(g: &mut Graph<'_, T>, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::Swish => g.swish(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
    }
}

fn conv_bn_act<T: Scalar>(g: &mut Graph<'_, T>, pair: &[Layer; 2], x: Var, a: Option<Activation>) -> Result<Var> {
    let y = pair[0].forward(g, &[x])?;
    let y = pair[1].forward(g, &[y])?;
    Ok(match a {
        Some(a) => act(g, y, a),
        None => y,
    })
}

enum Block {
    Double {
        first: [Layer; 2],
        second: [Layer; 2],
    },
    MbConv {
        expand: Option<[Layer; 2]>,
        depthwise: Layer,
        depthwise_bn: Layer,
        se_reduce: Layer,
        se_expand: Layer,
        project: [Layer; 2],
        residual: bool,
    },
}

impl Block {
    fn double<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Block> {
        Ok(Block::Double {
            first: b.conv_bn(&format!("{name}.conv1"), cin, cout, 3)?,
            second: b.conv_bn(&format!("{name}.conv2"), cout, cout, 3)?,
        })
    }

    fn mbconv<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, ratio: usize) -> Result<Block> {
        let wide = ratio * cin;
        let squeezed = (cin / 4).max(1);
        let expand = if ratio > 1 {
            Some(b.conv_bn(&format!("{name}.expand"), cin, wide, 1)?)
        } else {
            None
        };
        Ok(Block::MbConv {
            expand,
            depthwise: b.layer(
                format!("{name}.depthwise"),
                LayerSpec::DepthwiseConv2d {
                    channels: wide,
                    kernel: 3,
                    bias: false,
                },
            )?,
            depthwise_bn: b.layer(format!("{name}.depthwise_bn"), LayerSpec::BatchNorm { channels: wide })?,
            se_reduce: b.layer(
                format!("{name}.se_reduce"),
                LayerSpec::Conv1x1 {
                    in_channels: wide,
                    out_channels: squeezed,
                    bias: true,
                },
            )?,
            se_expand: b.layer(
                format!("{name}.se_expand"),
                LayerSpec::Conv1x1 {
                    in_channels: squeezed,
                    out_channels: wide,
                    bias: true,
                },
            )?,
            project: b.conv_bn(&format!("{name}.project"), wide, cout, 1)?,
            residual: cin == cout,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Double { first, second } => {
                let y = conv_bn_act(g, first, x, Some(Activation::Relu))?;
                conv_bn_act(g, second, y, Some(Activation::Relu))
            }
            Block::MbConv {
                expand,
                depthwise,
                depthwise_bn,
                se_reduce,
                se_expand,
                project,
                residual,
            } => {
                let y = match expand {
                    Some(e) => conv_bn_act(g, e, x, Some(Activation::Swish))?,
                    None => x,
                };
                let y = depthwise.forward(g, &[y])?;
                let y = depthwise_bn.forward(g, &[y])?;
                let y = g.swish(y);
                let s = g.global_avg_pool(y)?;
                let s = se_reduce.forward(g, &[s])?;
                let s = g.swish(s);
                let s = se_expand.forward(g, &[s])?;
                let s = g.sigmoid(s);
                let y = g.mul(y, s)?;
                let y = conv_bn_act(g, project, y, None)?;
                if *residual {
                    g.add(y, x)
                } else {
                    Ok(y)
                }
            }
        }
    }
}

/// One U-Net: optional 1×1 channel mixer, a four-stage encoder reaching
/// 1/16 resolution, a mirrored decoder and a 1×1 head that emits
/// single-channel logits.
pub struct UNet {
    mixer: Option<Layer>,
    stem: Option<[Layer; 2]>,
    stages: Vec<Block>,
    bridge: Option<Block>,
    decoder: Vec<[[Layer; 2]; 2]>,
    decoder_act: Activation,
    /// Max pooling for the VGG-style encoder, average pooling (a smooth
    /// stand-in for strided convolution) for the EfficientNet-style one.
    smooth_pool: bool,
    head: Layer,
}

impl UNet {
    pub fn build<T: Scalar>(
        store: &mut ParameterStore<T>,
        init: &mut Initializer,
        prefix: &str,
        backbone: BackboneKind,
        in_channels: usize,
        base: usize,
        mixer: bool,
    ) -> Result<UNet> {
        let mut b = Builder { store, init };
        let ch = channel_plan(backbone, base);
        let mut cin = in_channels;
        let mixer = if mixer {
            let m = b.layer(
                format!("{prefix}mixer"),
                LayerSpec::Conv1x1 {
                    in_channels: cin,
                    out_channels: 3,
                    bias: true,
                },
            )?;
            cin = 3;
            Some(m)
        } else {
            None
        };
        let enc = format!("{prefix}encoder");
        let mut stem = None;
        let mut stages = Vec::with_capacity(DEPTH);
        match backbone {
            BackboneKind::CompactVgg => {
                for (i, &c) in ch.iter().enumerate() {
                    stages.push(Block::double(&mut b, &format!("{enc}.stage{i}"), cin, c)?);
                    cin = c;
                }
            }
            BackboneKind::CompactEffNet => {
                stem = Some(b.conv_bn(&format!("{enc}.stem"), cin, ch[0], 3)?);
                cin = ch[0];
                for (i, &c) in ch.iter().enumerate() {
                    // The first block skips channel expansion.
                    let ratio = if i == 0 { 1 } else { MBCONV_EXPANSION };
                    stages.push(Block::mbconv(&mut b, &format!("{enc}.stage{i}"), cin, c, ratio)?);
                    cin = c;
                }
            }
        }
        // The VGG-style encoder gets a fifth conv block at 1/16 resolution;
        // the EfficientNet-style one hands its pooled last stage straight to
        // the decoder.
        let bridge = match backbone {
            BackboneKind::CompactVgg => Some(Block::double(&mut b, &format!("{enc}.bridge"), cin, cin)?),
            BackboneKind::CompactEffNet => None,
        };
        let mut decoder = Vec::with_capacity(DEPTH);
        for i in (0..DEPTH).rev() {
            let name = format!("{prefix}decoder.stage{i}");
            decoder.push([
                b.conv_bn(&format!("{name}.conv1"), cin + ch[i], ch[i], 3)?,
                b.conv_bn(&format!("{name}.conv2"), ch[i], ch[i], 3)?,
            ]);
            cin = ch[i];
        }
        let head = b.layer(
            format!("{prefix}head"),
            LayerSpec::Conv1x1 {
                in_channels: cin,
                out_channels: 1,
                bias: true,
            },
        )?;
        Ok(UNet {
            mixer,
            stem,
            stages,
            bridge,
            decoder,
            decoder_act: match backbone {
                BackboneKind::CompactVgg => Activation::Relu,
                BackboneKind::CompactEffNet => Activation::Swish,
            },
            smooth_pool: backbone == BackboneKind::CompactEffNet,
            head,
        })
    }

    /// `[N, C, H, W]` → logits `[N, 1, H, W]`; H and W must be divisible by 16.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(m) = &self.mixer {
            y = m.forward(g, &[y])?;
        }
        if let Some(stem) = &self.stem {
            y = conv_bn_act(g, stem, y, Some(Activation::Swish))?;
        }
        let mut skips = Vec::with_capacity(DEPTH);
        for stage in &self.stages {
            y = stage.forward(g, y)?;
            skips.push(y);
            y = if self.smooth_pool { g.avg_pool2(y)? } else { g.max_pool2(y)? };
        }
        if let Some(bridge) = &self.bridge {
            y = bridge.forward(g, y)?;
        }
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = g.upsample2(y)?;
            let joined = g.concat(&[up, *skip])?;
            let z = conv_bn_act(g, &block[0], joined, Some(self.decoder_act))?;
            y = conv_bn_act(g, &block[1], z, Some(self.decoder_act))?;
        }
        self.head.forward(g, &[y])
    }
}
