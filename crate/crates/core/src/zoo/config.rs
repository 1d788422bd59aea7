use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The segmentation architectures: one single-timestep baseline and nine
/// ways of consuming three flights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    #[serde(rename = "single_unet")]
    SingleUNet,
    #[default]
    ProposedShared,
    ProposedUnshared,
    OnlyLstm,
    NineChannel,
    #[serde(rename = "nine_channel_conv1d")]
    NineChannelConv1D,
    PreLstmConcat,
    PreLstmMultiply,
    CascadingConcat,
    CascadingMultiply,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 10] = [
        ArchitectureKind::SingleUNet,
        ArchitectureKind::ProposedShared,
        ArchitectureKind::ProposedUnshared,
        ArchitectureKind::OnlyLstm,
        ArchitectureKind::NineChannel,
        ArchitectureKind::NineChannelConv1D,
        ArchitectureKind::PreLstmConcat,
        ArchitectureKind::PreLstmMultiply,
        ArchitectureKind::CascadingConcat,
        ArchitectureKind::CascadingMultiply,
    ];

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&a| a == self).expect("listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::SingleUNet => "single_unet",
            ArchitectureKind::ProposedShared => "proposed_shared",
            ArchitectureKind::ProposedUnshared => "proposed_unshared",
            ArchitectureKind::OnlyLstm => "only_lstm",
            ArchitectureKind::NineChannel => "nine_channel",
            ArchitectureKind::NineChannelConv1D => "nine_channel_conv1d",
            ArchitectureKind::PreLstmConcat => "pre_lstm_concat",
            ArchitectureKind::PreLstmMultiply => "pre_lstm_multiply",
            ArchitectureKind::CascadingConcat => "cascading_concat",
            ArchitectureKind::CascadingMultiply => "cascading_multiply",
        }
    }

    /// Number of flight rasters consumed.
    pub fn input_count(self) -> usize {
        match self {
            ArchitectureKind::SingleUNet => 1,
            _ => 3,
        }
    }

    /// Number of probability masks produced.
    pub fn output_count(self) -> usize {
        match self {
            ArchitectureKind::SingleUNet | ArchitectureKind::NineChannel | ArchitectureKind::NineChannelConv1D => 1,
            _ => 3,
        }
    }

    pub fn is_nine_channel(self) -> bool {
        matches!(self, ArchitectureKind::NineChannel | ArchitectureKind::NineChannelConv1D)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Two 3×3 conv-BN-ReLU per stage, channels `base × (1, 2, 4, 8)`.
    CompactVgg,
    /// Inverted-residual blocks with squeeze-excitation and expansion 4
    /// (none in the first stage),
    /// channels `(16, 24, 40, 80) × base / 16`.
    #[default]
    #[serde(rename = "compact_effnet")]
    CompactEffNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvLstmConfig {
    pub layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl Default for ConvLstmConfig {
    fn default() -> Self {
        ConvLstmConfig {
            layers: 2,
            hidden_channels: 16,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchitectureKind,
    pub backbone: BackboneKind,
    /// Channels per model input. Nine-channel models take the three flights
    /// stacked, so 9 there.
    pub input_channels: usize,
    pub freeze_encoder: bool,
    /// Width multiplier of the backbone; 16 gives the documented plans.
    pub base_channels: usize,
    pub convlstm: ConvLstmConfig,
    /// Learnable 1×1 convolution mapping each U-Net input to 3 channels.
    pub channel_mixer: bool,
    /// Pre-LSTM only: also supervise the intermediate maps.
    pub intermediate_supervision: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchitectureKind::default(),
            backbone: BackboneKind::default(),
            input_channels: 3,
            freeze_encoder: false,
            base_channels: 16,
            convlstm: ConvLstmConfig::default(),
            channel_mixer: false,
            intermediate_supervision: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration suitable for gradient checks.
    pub fn tiny(arch: ArchitectureKind, backbone: BackboneKind) -> ModelConfig {
        ModelConfig {
            arch,
            backbone,
            input_channels: if arch.is_nine_channel() { 9 } else { 3 },
            base_channels: 1,
            convlstm: ConvLstmConfig {
                layers: 1,
                hidden_channels: 2,
                kernel: 3,
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.arch.is_nine_channel() {
            if self.input_channels != 9 {
                return bad(format!(
                    "{} needs 9 input channels (three stacked 3-channel flights), got {}",
                    self.arch.name(),
                    self.input_channels
                ));
            }
        } else if ![1, 3, 4].contains(&self.input_channels) {
            return bad(format!(
                "{} needs 1, 3 or 4 input channels, got {}",
                self.arch.name(),
                self.input_channels
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        let l = &self.convlstm;
        if l.layers == 0 || l.hidden_channels == 0 || l.kernel.is_multiple_of(2) {
            return bad("convlstm needs >= 1 layer, >= 1 hidden channel and an odd kernel".into());
        }
        if self.intermediate_supervision
            && !matches!(self.arch, ArchitectureKind::PreLstmConcat | ArchitectureKind::PreLstmMultiply)
        {
            return bad("intermediate_supervision applies to pre-LSTM architectures only".into());
        }
        Ok(())
    }

    /// Channels of one flight as read from the dataset.
    pub fn flight_channels(&self) -> usize {
        if self.arch.is_nine_channel() {
            self.input_channels / 3
        } else {
            self.input_channels
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for a in ArchitectureKind::ALL {
            assert_eq!(ArchitectureKind::from_tag(a.tag()), Some(a));
        }
        assert_eq!(ArchitectureKind::from_tag(10), None);
    }

    #[test]
    fn channel_rules() {
        let mut c = ModelConfig {
            arch: ArchitectureKind::NineChannel,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.input_channels = 9;
        assert!(c.validate().is_ok());
        let single = ModelConfig {
            arch: ArchitectureKind::SingleUNet,
            input_channels: 9,
            ..ModelConfig::default()
        };
        assert!(single.validate().is_err());
    }

    #[test]
    fn serde_names() {
        let s = serde_json::to_string(&ArchitectureKind::NineChannelConv1D).unwrap();
        assert_eq!(s, "\"nine_channel_conv1d\"");
        let b: BackboneKind = serde_json::from_str("\"compact_vgg\"").unwrap();
        assert_eq!(b, BackboneKind::CompactVgg);
        for a in ArchitectureKind::ALL {
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }
}
