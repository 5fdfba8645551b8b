//! The five predictors: invasion and expansion streams alone, and their
//! early, late and end-to-end fusions.
//!
//! Every network reads its streams from a channel-stacked source patch. The
//! joint source is the 3 invasion channels of the current timepoint followed
//! by the 4 expansion channels of the previous interval; invasion-only
//! sources carry just the first 3.

mod data;
mod personalize;
mod predict;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tumorcast_nnet::{InitScheme, LayerSpec, NetworkSpec, StreamSpec};

pub use data::{pair_samples, prepare_case, validation_samples, CaseFeatures, PopulationSet};
pub use personalize::{personalize_snapshot, personalize_threshold, select_snapshot, SnapshotPolicy, ThresholdChoice};
pub use predict::{
    average_maps, predict_volume, predict_with, probability_map, threshold_in_zone, ModelProvenance, PersonalizedModel, StreamModel,
};
pub use train::{snapshot_loss, train_network, train_population, TrainedNetwork};

use crate::sampling::PATCH;
use crate::{CoreError, Result};

pub const INVASION_CHANNELS: [usize; 2] = [0, 3];
pub const EXPANSION_CHANNELS: [usize; 2] = [3, 7];
pub const JOINT_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureKind {
    #[serde(rename = "invasion")]
    Invasion,
    #[serde(rename = "expansion")]
    Expansion,
    #[serde(rename = "early")]
    EarlyFusion,
    #[serde(rename = "late")]
    LateFusion,
    #[serde(rename = "end2end")]
    EndToEnd,
}

impl ArchitectureKind {
    pub const ALL: [Self; 5] = [Self::Invasion, Self::Expansion, Self::EarlyFusion, Self::LateFusion, Self::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Invasion => "invasion",
            Self::Expansion => "expansion",
            Self::EarlyFusion => "early",
            Self::LateFusion => "late",
            Self::EndToEnd => "end2end",
        }
    }

    /// Channel ranges of the source patch feeding each stream of each
    /// network of this kind.
    pub fn input_groups(self) -> Vec<Vec<[usize; 2]>> {
        match self {
            Self::Invasion => vec![vec![INVASION_CHANNELS]],
            Self::Expansion => vec![vec![EXPANSION_CHANNELS]],
            Self::EarlyFusion => vec![vec![[0, JOINT_CHANNELS]]],
            Self::LateFusion => vec![vec![INVASION_CHANNELS], vec![EXPANSION_CHANNELS]],
            Self::EndToEnd => vec![vec![INVASION_CHANNELS, EXPANSION_CHANNELS]],
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "invasion" => Self::Invasion,
            "expansion" => Self::Expansion,
            "early" | "early_fusion" => Self::EarlyFusion,
            "late" | "late_fusion" => Self::LateFusion,
            "end2end" | "end_to_end" => Self::EndToEnd,
            other => return Err(CoreError::InvalidInput(format!("unknown architecture kind '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Filters of conv1..conv4.
    pub widths: [usize; 4],
    pub fc_units: usize,
    /// Output channels of the 1x1 end-to-end fusion convolution.
    pub fusion_channels: usize,
    pub init: InitScheme,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256, 512],
            fc_units: 256,
            fusion_channels: 512,
            init: InitScheme::default(),
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.fc_units == 0 || self.fusion_channels == 0 {
            return Err(CoreError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// conv1..conv4 with their activations, normalization and first pooling.
fn conv_tower(arch: &ArchitectureConfig) -> Vec<LayerSpec> {
    let [w1, w2, w3, w4] = arch.widths;
    vec![
        LayerSpec::conv3(w1),
        LayerSpec::Relu,
        LayerSpec::lrn_default(),
        LayerSpec::pool3s2(),
        LayerSpec::conv3(w2),
        LayerSpec::Relu,
        LayerSpec::lrn_default(),
        LayerSpec::conv3(w3),
        LayerSpec::Relu,
        LayerSpec::conv3(w4),
        LayerSpec::Relu,
    ]
}

/// fc5 with dropout and the two-way output.
fn classifier(arch: &ArchitectureConfig, dropout: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Fc { out_units: arch.fc_units },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Fc { out_units: 2 },
    ]
}

fn stream(name: &str, channels: usize, layers: Vec<LayerSpec>) -> StreamSpec {
    StreamSpec {
        name: name.into(),
        input: [PATCH, PATCH, channels],
        layers,
    }
}

fn single(name: &str, channels: usize, arch: &ArchitectureConfig, dropout: f64, seed: u64) -> NetworkSpec {
    let mut layers = conv_tower(arch);
    layers.push(LayerSpec::pool3s2());
    NetworkSpec {
        name: name.into(),
        streams: vec![stream(name, channels, layers)],
        trunk: classifier(arch, dropout),
        init: arch.init,
        seed,
    }
}

/// SplitMix64 step keyed by `salt`; used to give each network and each
/// sampling draw its own reproducible stream.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Network seeds depend only on the run seed and the stream role, so the
/// late fusion members coincide with the stand-alone invasion and expansion
/// networks.
pub fn network_seed(run_seed: u64, role: &str) -> u64 {
    let salt = role.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    derive_seed(run_seed, salt)
}

/// Specs of the networks making up `kind`, in the order of
/// [`ArchitectureKind::input_groups`].
pub fn instantiate_architecture(kind: ArchitectureKind, arch: &ArchitectureConfig, dropout: f64, seed: u64) -> Result<Vec<NetworkSpec>> {
    arch.validate()?;
    let inv = || single("invasion", 3, arch, dropout, network_seed(seed, "invasion"));
    let exp = || single("expansion", 4, arch, dropout, network_seed(seed, "expansion"));
    let specs = match kind {
        ArchitectureKind::Invasion => vec![inv()],
        ArchitectureKind::Expansion => vec![exp()],
        ArchitectureKind::EarlyFusion => vec![single("early", JOINT_CHANNELS, arch, dropout, network_seed(seed, "early"))],
        ArchitectureKind::LateFusion => vec![inv(), exp()],
        ArchitectureKind::EndToEnd => {
            let mut trunk = vec![LayerSpec::conv1x1(arch.fusion_channels), LayerSpec::Relu, LayerSpec::pool3s2()];
            trunk.extend(classifier(arch, dropout));
            vec![NetworkSpec {
                name: "end2end".into(),
                streams: vec![stream("invasion", 3, conv_tower(arch)), stream("expansion", 4, conv_tower(arch))],
                trunk,
                init: arch.init,
                seed: network_seed(seed, "end2end"),
            }]
        }
    };
    for s in &specs {
        s.shape_trace()?;
    }
    Ok(specs)
}
