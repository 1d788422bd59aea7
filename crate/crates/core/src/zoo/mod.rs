//! The ten segmentation architectures.
//!
//! Parameter names carry the structure: the single model lives under
//! `unet.`, the per-flight branches under `branch.` (shared) or
//! `branch0.`..`branch2.` (one set per flight), the temporal head under
//! `lstm.`. Every U-Net keeps its encoder under `<prefix>encoder.`.

mod check;
mod config;
mod unet;

use std::path::Path;

pub use check::{check_architecture, CHECK_SIDE};
pub use config::{ArchitectureKind, BackboneKind, ConvLstmConfig, ModelConfig};
pub use unet::{channel_plan, UNet, DEPTH};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, OptimizerState};
use crate::nn::{Graph, Initializer, Layer, LayerSpec, Mode, ParameterStore, Scalar, Tensor, Var};
use crate::raster::Raster;

/// Spatial dims of model inputs must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 1 << DEPTH;

/// ConvLSTM stack (many-to-many) with batch norm after every cell, then a
/// 3-D convolution to one channel and a sigmoid.
pub struct LstmHead {
    cells: Vec<[Layer; 2]>,
    out: Layer,
}

impl LstmHead {
    fn build<T: Scalar>(
        store: &mut ParameterStore<T>,
        init: &mut Initializer,
        prefix: &str,
        in_channels: usize,
        cfg: &ConvLstmConfig,
    ) -> Result<LstmHead> {
        let mut cells = Vec::with_capacity(cfg.layers);
        let mut cin = in_channels;
        for i in 0..cfg.layers {
            let cell = Layer::build(
                store,
                init,
                format!("{prefix}cell{i}"),
                LayerSpec::ConvLstm2d {
                    in_channels: cin,
                    hidden: cfg.hidden_channels,
                    kernel: cfg.kernel,
                    return_sequences: true,
                },
            )?;
            let bn = Layer::build(
                store,
                init,
                format!("{prefix}bn{i}"),
                LayerSpec::BatchNorm {
                    channels: cfg.hidden_channels,
                },
            )?;
            cells.push([cell, bn]);
            cin = cfg.hidden_channels;
        }
        let out = Layer::build(
            store,
            init,
            format!("{prefix}conv3d"),
            LayerSpec::Conv3d {
                in_channels: cin,
                out_channels: 1,
                kernel: 3,
                bias: true,
            },
        )?;
        Ok(LstmHead { cells, out })
    }

    /// `[N, C, T, H, W]` → T probability maps `[N, 1, H, W]`, oldest first.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: Var) -> Result<Vec<Var>> {
        let mut y = seq;
        for [cell, bn] in &self.cells {
            y = cell.forward(g, &[y])?;
            y = bn.forward(g, &[y])?;
        }
        let y = self.out.forward(g, &[y])?;
        let y = g.sigmoid(y);
        let steps = g.shape(y)[2];
        (0..steps).map(|t| g.select_time(y, t)).collect()
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Probability maps `[N, 1, H, W]`, oldest first for 3-output models.
    pub masks: Vec<Var>,
    /// Per-flight maps before temporal fusion (Proposed) or the LSTM maps
    /// fed to the U-Nets (Pre-LSTM); empty otherwise.
    pub intermediates: Vec<Var>,
    /// Extra maps that the loss should also supervise.
    pub aux: Vec<Var>,
}

pub struct Model {
    config: ModelConfig,
    unets: Vec<UNet>,
    lstm: Option<LstmHead>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("unets", &self.unets.len())
            .field("lstm", &self.lstm.is_some())
            .finish()
    }
}

impl Model {
    pub fn build<T: Scalar>(cfg: &ModelConfig) -> Result<(Model, ParameterStore<T>)> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Initializer::new(cfg.seed);
        let c = cfg.input_channels;
        let base = cfg.base_channels;
        let bb = cfg.backbone;
        let mix = cfg.channel_mixer;
        let unet = |store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, cin: usize, mixer: bool| {
            UNet::build(store, init, prefix, bb, cin, base, mixer)
        };
        let mut unets = Vec::new();
        let mut lstm = None;
        match cfg.arch {
            ArchitectureKind::SingleUNet => unets.push(unet(&mut store, &mut init, "unet.", c, mix)?),
            ArchitectureKind::NineChannel => unets.push(unet(&mut store, &mut init, "unet.", c, mix)?),
            ArchitectureKind::NineChannelConv1D => unets.push(unet(&mut store, &mut init, "unet.", c, true)?),
            ArchitectureKind::ProposedShared => {
                unets.push(unet(&mut store, &mut init, "branch.", c, mix)?);
                lstm = Some(LstmHead::build(&mut store, &mut init, "lstm.", 1, &cfg.convlstm)?);
            }
            ArchitectureKind::ProposedUnshared => {
                for i in 0..3 {
                    unets.push(unet(&mut store, &mut init, &format!("branch{i}."), c, mix)?);
                }
                lstm = Some(LstmHead::build(&mut store, &mut init, "lstm.", 1, &cfg.convlstm)?);
            }
            ArchitectureKind::OnlyLstm => {
                lstm = Some(LstmHead::build(&mut store, &mut init, "lstm.", c, &cfg.convlstm)?);
            }
            ArchitectureKind::PreLstmConcat | ArchitectureKind::PreLstmMultiply => {
                lstm = Some(LstmHead::build(&mut store, &mut init, "lstm.", c, &cfg.convlstm)?);
                let fused = if cfg.arch == ArchitectureKind::PreLstmConcat { c + 1 } else { c };
                for i in 0..3 {
                    unets.push(unet(&mut store, &mut init, &format!("branch{i}."), fused, mix)?);
                }
            }
            ArchitectureKind::CascadingConcat | ArchitectureKind::CascadingMultiply => {
                let fused = if cfg.arch == ArchitectureKind::CascadingConcat { c + 1 } else { c };
                for i in 0..3 {
                    let cin = if i == 0 { c } else { fused };
                    unets.push(unet(&mut store, &mut init, &format!("branch{i}."), cin, mix)?);
                }
            }
        }
        if cfg.freeze_encoder {
            store.set_trainable_where(|n| n.contains("encoder."), false);
        }
        Ok((
            Model {
                config: cfg.clone(),
                unets,
                lstm,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> ArchitectureKind {
        self.config.arch
    }

    fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var, mask: Var) -> Result<Var> {
        match self.config.arch {
            ArchitectureKind::PreLstmConcat | ArchitectureKind::CascadingConcat => g.concat(&[image, mask]),
            _ => g.mul(image, mask),
        }
    }

    fn branch<T: Scalar>(&self, g: &mut Graph<'_, T>, i: usize, x: Var) -> Result<Var> {
        let net = &self.unets[i.min(self.unets.len() - 1)];
        let logits = net.forward(g, x)?;
        Ok(g.sigmoid(logits))
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<'_, T>, inputs: &[Var]) -> Result<()> {
        let want = self.config.arch.input_count();
        if inputs.len() != want {
            return Err(Error::Validation(format!(
                "{} takes {want} input(s), got {}",
                self.config.arch.name(),
                inputs.len()
            )));
        }
        let first = g.shape(inputs[0]).to_vec();
        let c = self.config.flight_channels();
        for &x in inputs {
            let s = g.shape(x);
            if s.len() != 4 || s[1] != c || s != first.as_slice() {
                return Err(Error::Validation(format!(
                    "inputs must all be [N,{c},H,W], got {s:?} and {first:?}"
                )));
            }
            if !s[2].is_multiple_of(SPATIAL_MULTIPLE) || !s[3].is_multiple_of(SPATIAL_MULTIPLE) {
                return Err(Error::Validation(format!(
                    "spatial dims {}x{} are not multiples of {SPATIAL_MULTIPLE}",
                    s[2], s[3]
                )));
            }
        }
        Ok(())
    }

    /// Inputs are `[N, C, H, W]` flights, oldest first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<ForwardOutput> {
        self.check_inputs(g, inputs)?;
        let mut out = ForwardOutput {
            masks: Vec::new(),
            intermediates: Vec::new(),
            aux: Vec::new(),
        };
        match self.config.arch {
            ArchitectureKind::SingleUNet => out.masks.push(self.branch(g, 0, inputs[0])?),
            ArchitectureKind::NineChannel | ArchitectureKind::NineChannelConv1D => {
                let x = g.concat(inputs)?;
                out.masks.push(self.branch(g, 0, x)?);
            }
            ArchitectureKind::ProposedShared | ArchitectureKind::ProposedUnshared => {
                for (i, &x) in inputs.iter().enumerate() {
                    let s = self.branch(g, i, x)?;
                    out.intermediates.push(s);
                }
                let seq = g.stack_time(&out.intermediates)?;
                out.masks = self.lstm_head().forward(g, seq)?;
            }
            ArchitectureKind::OnlyLstm => {
                let seq = g.stack_time(inputs)?;
                out.masks = self.lstm_head().forward(g, seq)?;
            }
            ArchitectureKind::PreLstmConcat | ArchitectureKind::PreLstmMultiply => {
                let seq = g.stack_time(inputs)?;
                out.intermediates = self.lstm_head().forward(g, seq)?;
                for i in 0..inputs.len() {
                    let fused = self.fuse(g, inputs[i], out.intermediates[i])?;
                    out.masks.push(self.branch(g, i, fused)?);
                }
                if self.config.intermediate_supervision {
                    out.aux = out.intermediates.clone();
                }
            }
            ArchitectureKind::CascadingConcat | ArchitectureKind::CascadingMultiply => {
                let mut prev = self.branch(g, 0, inputs[0])?;
                out.masks.push(prev);
                for (i, &x) in inputs.iter().enumerate().skip(1) {
                    let fused = self.fuse(g, x, prev)?;
                    prev = self.branch(g, i, fused)?;
                    out.masks.push(prev);
                }
            }
        }
        Ok(out)
    }

    fn lstm_head(&self) -> &LstmHead {
        self.lstm.as_ref().expect("architecture has a temporal head")
    }

    /// Packages the parameters with this model's configuration.
    pub fn to_checkpoint(&self, store: &ParameterStore<f32>, optimizer: Option<OptimizerState>) -> Checkpoint {
        Checkpoint {
            arch_tag: self.config.arch.tag(),
            config_json: serde_json::to_string(&self.config).expect("model config serializes"),
            params: store.clone(),
            optimizer,
        }
    }

    /// Rebuilds the model described by a checkpoint and loads its values.
    pub fn from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(Model, ParameterStore<T>)> {
        let cfg: ModelConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        if ArchitectureKind::from_tag(ck.arch_tag) != Some(cfg.arch) {
            return Err(Error::Config(format!(
                "checkpoint architecture tag {} disagrees with its config ({})",
                ck.arch_tag,
                cfg.arch.name()
            )));
        }
        let (model, mut store) = Model::build::<T>(&cfg)?;
        let loaded = ck.params.cast::<T>();
        if loaded.len() != store.len() || store.load_matching(&loaded) != store.len() {
            return Err(Error::Config(format!(
                "checkpoint parameters do not match a {} model",
                cfg.arch.name()
            )));
        }
        Ok((model, store))
    }

    pub fn load<T: Scalar>(path: &Path) -> Result<(Model, ParameterStore<T>)> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Packs same-sized rasters into one `[N, C, H, W]` tensor.
pub fn rasters_to_tensor<T: Scalar>(rasters: &[&Raster]) -> Result<Tensor<T>> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::Validation("cannot batch zero rasters".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(rasters.len() * h * w * c);
    for r in rasters {
        if r.dims() != (h, w, c) {
            return Err(Error::Validation(format!(
                "batched rasters differ: {:?} vs {:?}",
                r.dims(),
                (h, w, c)
            )));
        }
        let v = r.values();
        for ch in 0..c {
            data.extend((0..h * w).map(|p| T::of(v[p * c + ch])));
        }
    }
    Ok(Tensor::new(&[rasters.len(), c, h, w], data))
}

/// Splits a `[N, C, H, W]` tensor into N rasters.
pub fn tensor_to_rasters<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Raster>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Validation(format!("expected [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = t.data();
    (0..n)
        .map(|i| {
            let plane = &d[i * c * h * w..(i + 1) * c * h * w];
            let mut v = vec![0.0; c * h * w];
            for ch in 0..c {
                for p in 0..h * w {
                    v[p * c + ch] = plane[ch * h * w + p].as_f64();
                }
            }
            Raster::new(h, w, c, v)
        })
        .collect()
}

/// Masks of one forward pass, converted back to rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// Single-channel probability maps, oldest first.
    pub masks: Vec<Raster>,
    pub intermediates: Vec<Raster>,
}

/// Runs the model on one sample. `inputs` are flights, oldest first.
pub fn forward_sequence<T: Scalar>(
    model: &Model,
    store: &ParameterStore<T>,
    inputs: &[Raster],
    mode: Mode,
) -> Result<PredictionSet> {
    let mut batch = forward_batch(model, store, &[inputs.iter().collect()], mode)?;
    Ok(batch.remove(0))
}

/// Runs the model on a batch; `samples[i]` holds the flights of sample i.
pub fn forward_batch<T: Scalar>(
    model: &Model,
    store: &ParameterStore<T>,
    samples: &[Vec<&Raster>],
    mode: Mode,
) -> Result<Vec<PredictionSet>> {
    let steps = samples
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Validation("empty batch".into()))?;
    if samples.iter().any(|s| s.len() != steps) {
        return Err(Error::Validation("samples in a batch have different flight counts".into()));
    }
    let mut g = Graph::new(store, mode);
    let mut inputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let col: Vec<&Raster> = samples.iter().map(|s| s[t]).collect();
        inputs.push(g.input(rasters_to_tensor(&col)?));
    }
    let out = model.forward(&mut g, &inputs)?;
    let unpack = |vars: &[Var]| -> Result<Vec<Vec<Raster>>> {
        vars.iter().map(|&v| tensor_to_rasters(g.value(v))).collect()
    };
    let masks = unpack(&out.masks)?;
    let inter = unpack(&out.intermediates)?;
    Ok((0..samples.len())
        .map(|i| PredictionSet {
            masks: masks.iter().map(|m| m[i].clone()).collect(),
            intermediates: inter.iter().map(|m| m[i].clone()).collect(),
        })
        .collect())
}
