//! Labelled patch datasets and the prediction growth zone.

use std::borrow::Borrow;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volumes::{bounding_box, TumorMask, Volume3D, VoxelBox};
use crate::{CoreError, Result};

/// Patch side length in voxels.
pub const PATCH: usize = 17;

/// Which interval a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairTag {
    #[serde(rename = "t1->t2")]
    T1T2,
    #[serde(rename = "t2->t3")]
    T2T3,
    #[serde(rename = "(t1->t2)->t3")]
    T12T3,
}

impl fmt::Display for PairTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::T1T2 => "t1->t2",
            Self::T2T3 => "t2->t3",
            Self::T12T3 => "(t1->t2)->t3",
        })
    }
}

/// Tumor bounding box grown by a per-axis margin, clipped to the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthZone {
    pub region: VoxelBox,
}

impl GrowthZone {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.region.contains(p)
    }

    pub fn voxels(&self) -> Vec<[usize; 3]> {
        self.region.iter().collect()
    }

    pub fn z_range(&self) -> std::ops::RangeInclusive<usize> {
        self.region.min[2]..=self.region.max[2]
    }
}

pub fn growth_zone(mask: &TumorMask, margin: [usize; 3]) -> Result<GrowthZone> {
    Ok(GrowthZone {
        region: bounding_box(mask)?.expanded(margin, mask.dims()),
    })
}

/// Copies the axial `size x size` crop centred at `center` into `out` in
/// (y, x, channel) order. Voxels outside the volume read as zero.
pub fn extract_patch_into(channels: &[&Volume3D], center: [usize; 3], size: usize, out: &mut [f32]) {
    let c = channels.len();
    let half = (size / 2) as isize;
    let [nx, ny, _] = channels[0].dims();
    let z = center[2];
    for py in 0..size {
        let y = center[1] as isize + py as isize - half;
        for px in 0..size {
            let x = center[0] as isize + px as isize - half;
            let dst = &mut out[(py * size + px) * c..(py * size + px + 1) * c];
            if x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
                dst.fill(0.0);
            } else {
                for (k, ch) in channels.iter().enumerate() {
                    dst[k] = ch.get(x as usize, y as usize, z);
                }
            }
        }
    }
}

pub fn extract_patch(channels: &[&Volume3D], center: [usize; 3], size: usize) -> Result<Vec<f32>> {
    let Some(first) = channels.first() else {
        return Err(CoreError::InvalidInput("no channels to extract from".into()));
    };
    let d = first.dims();
    if channels.iter().any(|c| c.dims() != d) {
        return Err(CoreError::DimsMismatch("patch channels differ in dims".into()));
    }
    if (0..3).any(|a| center[a] >= d[a]) {
        return Err(CoreError::InvalidInput(format!("patch center {center:?} outside volume {d:?}")));
    }
    if size == 0 || size % 2 == 0 {
        return Err(CoreError::InvalidInput(format!("patch size {size} must be odd")));
    }
    let mut out = vec![0.0; size * size * channels.len()];
    extract_patch_into(channels, center, size, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `PATCH x PATCH x C`, (y, x, channel) order.
    pub data: Vec<f32>,
    pub label: u8,
    pub center: [usize; 3],
    pub patient_id: Arc<str>,
    pub pair_tag: PairTag,
}

impl PatchSample {
    pub fn channels(&self) -> usize {
        self.data.len() / (PATCH * PATCH)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Candidate centers lie within this many voxels of the anchor centroid.
    pub half_box: usize,
    /// Negatives kept per positive after under-sampling.
    pub negative_ratio: f64,
    /// Optional cap on samples per (patient, pair); class proportions are
    /// kept when it applies.
    pub max_samples_per_pair: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            half_box: 15,
            negative_ratio: 1.15,
            max_samples_per_pair: None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=1.3).contains(&self.negative_ratio) {
            return Err(CoreError::InvalidConfig(format!(
                "negative_ratio {} outside [1.0, 1.3]",
                self.negative_ratio
            )));
        }
        if self.max_samples_per_pair == Some(0) {
            return Err(CoreError::InvalidConfig("max_samples_per_pair must be > 0".into()));
        }
        Ok(())
    }
}

/// Candidate box around the rounded anchor centroid.
pub fn candidate_box(anchor: &TumorMask, half_box: usize) -> Result<VoxelBox> {
    let c = anchor.rounded_centroid()?;
    let d = anchor.dims();
    let h = half_box as i64;
    Ok(VoxelBox {
        min: [0, 1, 2].map(|a| (c[a] - h).clamp(0, d[a] as i64 - 1) as usize),
        max: [0, 1, 2].map(|a| (c[a] + h).clamp(0, d[a] as i64 - 1) as usize),
    })
}

/// Balanced samples for one interval. `channels` are the inputs observed at
/// the anchor time; labels come from `next`.
pub fn sample_training_patches(
    channels: &[&Volume3D],
    anchor: &TumorMask,
    next: &TumorMask,
    patient_id: &str,
    pair_tag: PairTag,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    cfg.validate()?;
    if channels.is_empty() || channels.iter().any(|c| c.dims() != anchor.dims()) || next.dims() != anchor.dims() {
        return Err(CoreError::DimsMismatch(format!("{patient_id}: sampling inputs differ in dims")));
    }
    let bx = candidate_box(anchor, cfg.half_box)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for p in bx.iter() {
        if next.is_on(p[0], p[1], p[2]) {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if pos.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "{patient_id} {pair_tag}: no positive candidates in the sampling box"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_neg = ((pos.len() as f64 * cfg.negative_ratio).round() as usize).min(neg.len());
    let mut neg = pick(&mut rng, neg, n_neg);
    if let Some(cap) = cfg.max_samples_per_pair {
        let total = pos.len() + neg.len();
        if total > cap {
            let keep_pos = ((cap as f64 * pos.len() as f64 / total as f64).round() as usize).clamp(1, cap);
            pos = pick(&mut rng, pos, keep_pos);
            neg = pick(&mut rng, neg, cap - keep_pos);
        }
    }
    let id: Arc<str> = Arc::from(patient_id);
    let c = channels.len();
    let mut out = Vec::with_capacity(pos.len() + neg.len());
    let labelled = pos.into_iter().map(|p| (p, 1u8)).chain(neg.into_iter().map(|p| (p, 0u8)));
    for (center, label) in labelled {
        let mut data = vec![0.0; PATCH * PATCH * c];
        extract_patch_into(channels, center, PATCH, &mut data);
        out.push(PatchSample {
            data,
            label,
            center,
            patient_id: id.clone(),
            pair_tag,
        });
    }
    // deterministic order independent of class: scan order of the box
    out.sort_by_key(|s| (s.center[2], s.center[1], s.center[0]));
    Ok(out)
}

/// Uniform subset of size `k`, returned in original order.
fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: Vec<T>, k: usize) -> Vec<T> {
    if k >= items.len() {
        return items;
    }
    let mut idx = index::sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

pub fn compute_mean_patch<S: Borrow<PatchSample>>(samples: &[S]) -> Result<Vec<f32>> {
    let Some(first) = samples.first() else {
        return Err(CoreError::InvalidInput("mean patch of an empty training set".into()));
    };
    let len = first.borrow().data.len();
    if samples.iter().any(|s| s.borrow().data.len() != len) {
        return Err(CoreError::InvalidInput("training patches differ in size".into()));
    }
    let mut acc = vec![0.0f64; len];
    for s in samples {
        for (a, &v) in acc.iter_mut().zip(&s.borrow().data) {
            *a += v as f64;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

pub fn apply_mean(patch: &[f32], mean: &[f32]) -> Vec<f32> {
    patch.iter().zip(mean).map(|(p, m)| p - m).collect()
}

// ---------------------------------------------------------------------------
// Patch-dataset cache

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    count: usize,
    channels: usize,
    size: usize,
    seed: u64,
    pair_tag: PairTag,
    patient_id: String,
    centers: Vec<[usize; 3]>,
    patch_blob: String,
    label_blob: String,
}

fn cache_sibling(header: &Path, ext: &str) -> PathBuf {
    let name = header.file_name().and_then(|n| n.to_str()).unwrap_or("patches");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    header.with_file_name(format!("{stem}.{ext}"))
}

/// Writes `<name>.json` plus `<name>.raw` (f32 LE patches) and
/// `<name>.labels` (one byte per sample). All samples must share patient and
/// pair tag.
pub fn write_patch_cache(path: &Path, samples: &[PatchSample], seed: u64) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(CoreError::InvalidInput("empty patch cache".into()));
    };
    if samples
        .iter()
        .any(|s| s.pair_tag != first.pair_tag || s.patient_id != first.patient_id || s.data.len() != first.data.len())
    {
        return Err(CoreError::InvalidInput("patch cache must hold one patient and pair".into()));
    }
    let raw = cache_sibling(path, "raw");
    let labels = cache_sibling(path, "labels");
    let mut bytes = Vec::with_capacity(samples.len() * first.data.len() * 4);
    for s in samples {
        for v in &s.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&raw, bytes).map_err(|e| CoreError::io(&raw, e))?;
    fs::write(&labels, samples.iter().map(|s| s.label).collect::<Vec<u8>>()).map_err(|e| CoreError::io(&labels, e))?;
    let file = |p: &Path| p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let header = CacheHeader {
        format: "tumorcast-patches".into(),
        count: samples.len(),
        channels: first.channels(),
        size: PATCH,
        seed,
        pair_tag: first.pair_tag,
        patient_id: first.patient_id.to_string(),
        centers: samples.iter().map(|s| s.center).collect(),
        patch_blob: file(&raw),
        label_blob: file(&labels),
    };
    fs::write(path, serde_json::to_string(&header)?).map_err(|e| CoreError::io(path, e))
}

pub fn read_patch_cache(path: &Path) -> Result<(Vec<PatchSample>, u64)> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let h: CacheHeader = serde_json::from_str(&text)?;
    if h.format != "tumorcast-patches" || h.size != PATCH || h.centers.len() != h.count {
        return Err(CoreError::InvalidInput(format!("{}: not a patch cache", path.display())));
    }
    let raw_path = path.with_file_name(&h.patch_blob);
    let raw = fs::read(&raw_path).map_err(|e| CoreError::io(&raw_path, e))?;
    let label_path = path.with_file_name(&h.label_blob);
    let labels = fs::read(&label_path).map_err(|e| CoreError::io(&label_path, e))?;
    let per = PATCH * PATCH * h.channels;
    if raw.len() != h.count * per * 4 || labels.len() != h.count || labels.iter().any(|&l| l > 1) {
        return Err(CoreError::InvalidInput(format!("{}: blob sizes disagree with header", path.display())));
    }
    let id: Arc<str> = Arc::from(h.patient_id.as_str());
    let samples = (0..h.count)
        .map(|i| PatchSample {
            data: raw[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            label: labels[i],
            center: h.centers[i],
            patient_id: id.clone(),
            pair_tag: h.pair_tag,
        })
        .collect();
    Ok((samples, h.seed))
}
