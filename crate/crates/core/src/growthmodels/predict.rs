//! Zone-restricted inference and the persisted form of a personalized model.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tumorcast_nnet::{Checkpoint, Network};

use crate::growthmodels::train::batch_tensors;
use crate::growthmodels::{ArchitectureKind, CaseFeatures};
use crate::sampling::{extract_patch_into, growth_zone, GrowthZone, PATCH};
use crate::volumes::{TumorMask, Volume3D};
use crate::{CoreError, Result};

/// One trained network together with how it reads the source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamModel {
    pub checkpoint: Checkpoint,
    pub groups: Vec<[usize; 2]>,
    pub input_scale: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub seed: u64,
    /// Epoch of the snapshot kept for each member.
    pub epochs: Vec<usize>,
    /// Validation loss per epoch of the network used for snapshot selection.
    pub validation_curve: Vec<f64>,
    /// Dice reached at the chosen threshold on the t1 -> t2 interval.
    pub tau_dice: Option<f64>,
    pub tau_degenerate: bool,
    /// False when the fixed threshold and final epoch were used.
    pub personalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel {
    pub kind: ArchitectureKind,
    pub members: Vec<StreamModel>,
    pub tau: f64,
    pub provenance: ModelProvenance,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ArchitectureKind,
    tau: f64,
    members: Vec<MemberHeader>,
    provenance: ModelProvenance,
}

#[derive(Serialize, Deserialize)]
struct MemberHeader {
    checkpoint: String,
    groups: Vec<[usize; 2]>,
    input_scale: f32,
}

impl PersonalizedModel {
    /// Writes `model.json` plus one checkpoint per member into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut members = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member{i}.ckpt.json");
            m.checkpoint.save(&dir.join(&name))?;
            members.push(MemberHeader {
                checkpoint: name,
                groups: m.groups.clone(),
                input_scale: m.input_scale,
            });
        }
        let header = ModelHeader {
            kind: self.kind,
            tau: self.tau,
            members,
            provenance: self.provenance.clone(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| CoreError::io(&path, e))
    }

    /// Accepts the model directory or its `model.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join("model.json") } else { path.to_path_buf() };
        let dir = file.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
        let header: ModelHeader = serde_json::from_str(&text)?;
        let members = header
            .members
            .into_iter()
            .map(|m| {
                Ok(StreamModel {
                    checkpoint: Checkpoint::load(&dir.join(&m.checkpoint))?,
                    groups: m.groups,
                    input_scale: m.input_scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() || !(0.0..=1.0).contains(&header.tau) {
            return Err(CoreError::InvalidInput(format!("{}: malformed model header", file.display())));
        }
        Ok(Self {
            kind: header.kind,
            members,
            tau: header.tau,
            provenance: header.provenance,
        })
    }
}

fn member_probabilities(m: &StreamModel, source: &[&Volume3D], voxels: &[[usize; 3]], batch: usize) -> Result<Vec<f32>> {
    let channels = source.len();
    if m.groups.iter().any(|g| g[1] > channels) {
        return Err(CoreError::InvalidInput(format!(
            "{} needs {} source channels, got {channels}",
            m.checkpoint.spec.name,
            m.groups.iter().map(|g| g[1]).max().unwrap_or(0)
        )));
    }
    let net = m.checkpoint.network::<f32>()?;
    let patch_len = PATCH * PATCH * channels;
    let chunks: Vec<Result<Vec<f32>>> = voxels
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut buf = vec![0.0f32; chunk.len() * patch_len];
            for (v, out) in chunk.iter().zip(buf.chunks_exact_mut(patch_len)) {
                extract_patch_into(source, *v, PATCH, out);
            }
            let inputs = batch_tensors(buf.chunks_exact(patch_len), channels, &m.groups, &m.checkpoint.means, m.input_scale);
            let p = Network::predict_proba(&net, &inputs)?;
            Ok(p.chunks_exact(2).map(|r| r[1]).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(voxels.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Per-voxel growth probability inside `zone`, averaged over `members`;
/// voxels outside the zone stay zero.
pub fn probability_map(members: &[StreamModel], source: &[&Volume3D], zone: &GrowthZone, batch: usize) -> Result<Volume3D> {
    let Some(first) = source.first() else {
        return Err(CoreError::InvalidInput("no source channels".into()));
    };
    if source.iter().any(|c| !c.same_grid(first)) {
        return Err(CoreError::DimsMismatch("source channels differ in grid".into()));
    }
    if members.is_empty() {
        return Err(CoreError::InvalidInput("model has no members".into()));
    }
    let voxels = zone.voxels();
    let maps = members
        .iter()
        .map(|m| {
            let p = member_probabilities(m, source, &voxels, batch)?;
            let mut vol = Volume3D::filled(first.dims(), first.spacing(), 0.0)?;
            for (&[x, y, z], &v) in voxels.iter().zip(&p) {
                vol.set(x, y, z, v);
            }
            Ok(vol)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average_maps(&maps))
}

/// Voxelwise mean, summed in member order.
pub fn average_maps(maps: &[Volume3D]) -> Volume3D {
    let mut out = maps[0].clone();
    if maps.len() > 1 {
        let n = maps.len() as f32;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let s: f32 = maps.iter().map(|m| m.data()[i]).sum();
            *v = s / n;
        }
    }
    out
}

/// `{voxels in zone with p >= tau}`.
pub fn threshold_in_zone(prob: &Volume3D, zone: &GrowthZone, tau: f64) -> Result<TumorMask> {
    TumorMask::from_fn(prob.dims(), prob.spacing(), |x, y, z| {
        zone.contains([x, y, z]) && prob.get(x, y, z) as f64 >= tau
    })
}

/// Probability map and thresholded prediction from an explicit source.
pub fn predict_with(
    members: &[StreamModel],
    tau: f64,
    source: &[&Volume3D],
    zone: &GrowthZone,
    batch: usize,
) -> Result<(Volume3D, TumorMask)> {
    let prob = probability_map(members, source, zone, batch)?;
    let mask = threshold_in_zone(&prob, zone, tau)?;
    Ok((prob, mask))
}

/// Forecast of the t3 mask from the t2 invasion and t1 -> t2 expansion
/// channels, restricted to the t2 growth zone.
pub fn predict_volume(model: &PersonalizedModel, f: &CaseFeatures, margin: [usize; 3], batch: usize) -> Result<(Volume3D, TumorMask)> {
    let zone = growth_zone(&f.masks[1], margin)?;
    predict_with(&model.members, model.tau, &f.joint_source(), &zone, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growthmodels::{instantiate_architecture, ArchitectureConfig};
    use crate::volumes::VoxelBox;
    use tumorcast_nnet::InitScheme;

    fn tiny_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            widths: [4, 4, 4, 4],
            fc_units: 8,
            fusion_channels: 4,
            init: InitScheme::Msra,
        }
    }

    fn members(kind: ArchitectureKind) -> Vec<StreamModel> {
        instantiate_architecture(kind, &tiny_arch(), 0.5, 11)
            .unwrap()
            .into_iter()
            .zip(kind.input_groups())
            .map(|(spec, groups)| {
                let net = Network::<f32>::new(&spec).unwrap();
                let means = groups.iter().map(|g| vec![1.0; PATCH * PATCH * (g[1] - g[0])]).collect();
                StreamModel {
                    checkpoint: Checkpoint::from_network(&net, means, 1, spec.seed),
                    groups,
                    input_scale: 0.1,
                }
            })
            .collect()
    }

    fn source() -> Vec<Volume3D> {
        (0..7)
            .map(|c| Volume3D::from_fn([12, 12, 3], [1.0; 3], |x, y, z| ((x * 3 + y * 5 + z + c) % 11) as f32).unwrap())
            .collect()
    }

    fn zone() -> GrowthZone {
        GrowthZone {
            region: VoxelBox {
                min: [2, 3, 1],
                max: [9, 8, 2],
            },
        }
    }

    #[test]
    fn late_map_is_member_average() {
        let src = source();
        let refs: Vec<&Volume3D> = src.iter().collect();
        let late = members(ArchitectureKind::LateFusion);
        let both = probability_map(&late, &refs, &zone(), 7).unwrap();
        let a = probability_map(&late[..1], &refs, &zone(), 64).unwrap();
        let b = probability_map(&late[1..], &refs, &zone(), 64).unwrap();
        for i in 0..both.data().len() {
            assert!((both.data()[i] - (a.data()[i] + b.data()[i]) / 2.0).abs() < 1e-6);
        }
        assert_eq!(both.get(0, 0, 0), 0.0);
        assert!(both.get(5, 5, 1) > 0.0);
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let src = source();
        let refs: Vec<&Volume3D> = src.iter().collect();
        let m = members(ArchitectureKind::EndToEnd);
        let a = probability_map(&m, &refs, &zone(), 1).unwrap();
        let b = probability_map(&m, &refs, &zone(), 1000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_is_monotone() {
        let prob = Volume3D::from_fn([10, 10, 3], [1.0; 3], |x, y, _| (x + y) as f32 / 18.0).unwrap();
        let mut prev = usize::MAX;
        for k in 0..=19 {
            let n = threshold_in_zone(&prob, &zone(), k as f64 * 0.05).unwrap().count();
            assert!(n <= prev);
            prev = n;
        }
        let all = threshold_in_zone(&prob, &zone(), 0.0).unwrap();
        assert_eq!(all.count(), zone().voxels().len());
    }

    #[test]
    fn too_few_channels_rejected() {
        let src = source();
        let refs: Vec<&Volume3D> = src.iter().take(3).collect();
        assert!(probability_map(&members(ArchitectureKind::Expansion), &refs, &zone(), 8).is_err());
    }

    #[test]
    fn model_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = PersonalizedModel {
            kind: ArchitectureKind::LateFusion,
            members: members(ArchitectureKind::LateFusion),
            tau: 0.35,
            provenance: ModelProvenance {
                seed: 4,
                epochs: vec![3, 20],
                personalized: true,
                ..ModelProvenance::default()
            },
        };
        model.save(dir.path()).unwrap();
        assert_eq!(PersonalizedModel::load(dir.path()).unwrap(), model);
    }
}
