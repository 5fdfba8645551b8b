//! Volumetric data model, raw-blob persistence and tumor-centroid alignment.
//!
//! A volume on disk is a `<name>.vol.json` header next to a `<name>.raw` blob
//! of little-endian `f32` values in x-fastest order. A case directory holds a
//! `case.json` manifest referencing one such volume per channel and timepoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Scalar 3-D grid, x-fastest row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let len = dims[0] * dims[1] * dims[2];
        if len == 0 {
            return Err(CoreError::InvalidVolume(format!("zero-voxel dims {dims:?}")));
        }
        if data.len() != len {
            return Err(CoreError::InvalidVolume(format!(
                "dims {dims:?} need {len} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CoreError::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Value at signed coordinates, zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> f32 {
        if x < 0
            || y < 0
            || z < 0
            || x as usize >= self.dims[0]
            || y as usize >= self.dims[1]
            || z as usize >= self.dims[2]
        {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Integer translation: output(p) = input(p - shift), zero-filled.
    pub fn translated(&self, shift: [i64; 3]) -> Volume3D {
        if shift == [0, 0, 0] {
            return self.clone();
        }
        let [nx, ny, nz] = self.dims;
        let mut out = vec![0.0f32; self.data.len()];
        for z in 0..nz {
            let sz = z as i64 - shift[2];
            if sz < 0 || sz >= nz as i64 {
                continue;
            }
            for y in 0..ny {
                let sy = y as i64 - shift[1];
                if sy < 0 || sy >= ny as i64 {
                    continue;
                }
                for x in 0..nx {
                    let sx = x as i64 - shift[0];
                    if sx < 0 || sx >= nx as i64 {
                        continue;
                    }
                    out[(z * ny + y) * nx + x] = self.get(sx as usize, sy as usize, sz as usize);
                }
            }
        }
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: out,
        }
    }
}

/// Binary tumor mask stored as 0 / 255.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorMask(Volume3D);

pub const MASK_ON: f32 = 255.0;

impl TumorMask {
    pub fn new(volume: Volume3D) -> Result<Self> {
        if let Some(bad) = volume.data.iter().find(|&&v| v != 0.0 && v != MASK_ON) {
            return Err(CoreError::InvalidMask(format!("value {bad} not in {{0, 255}}")));
        }
        Ok(Self(volume))
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut inside: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        Ok(Self(Volume3D::from_fn(dims, spacing, |x, y, z| {
            if inside(x, y, z) {
                MASK_ON
            } else {
                0.0
            }
        })?))
    }

    pub fn from_bools(dims: [usize; 3], spacing: [f64; 3], bits: &[bool]) -> Result<Self> {
        Ok(Self(Volume3D::new(
            dims,
            spacing,
            bits.iter().map(|&b| if b { MASK_ON } else { 0.0 }).collect(),
        )?))
    }

    pub fn empty_like(v: &Volume3D) -> Self {
        Self(v.map(|_| 0.0))
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    #[inline]
    pub fn is_on(&self, x: usize, y: usize, z: usize) -> bool {
        self.0.get(x, y, z) == MASK_ON
    }

    #[inline]
    pub fn is_on_index(&self, i: usize) -> bool {
        self.0.data[i] == MASK_ON
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == MASK_ON).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn bits(&self) -> Vec<bool> {
        self.0.data.iter().map(|&v| v == MASK_ON).collect()
    }

    /// Mean voxel coordinate of the foreground.
    pub fn centroid(&self) -> Result<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.0.data.iter().enumerate() {
            if v == MASK_ON {
                let c = self.0.coords(i);
                for a in 0..3 {
                    sum[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(CoreError::EmptyMask("centroid of an empty mask".into()));
        }
        Ok(sum.map(|s| s / n as f64))
    }

    pub fn rounded_centroid(&self) -> Result<[i64; 3]> {
        Ok(self.centroid()?.map(|c| c.round() as i64))
    }

    pub fn translated(&self, shift: [i64; 3]) -> Self {
        Self(self.0.translated(shift))
    }
}

/// Inclusive axis-aligned voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl VoxelBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &VoxelBox) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    /// Grows by `margin` on each side, clipped to `dims`.
    pub fn expanded(&self, margin: [usize; 3], dims: [usize; 3]) -> VoxelBox {
        VoxelBox {
            min: [0, 1, 2].map(|a| self.min[a].saturating_sub(margin[a])),
            max: [0, 1, 2].map(|a| (self.max[a] + margin[a]).min(dims[a] - 1)),
        }
    }

    /// Voxels in z-major, then y, then x order.
    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.min[2]..=self.max[2]).flat_map(move |z| {
            (self.min[1]..=self.max[1])
                .flat_map(move |y| (self.min[0]..=self.max[0]).map(move |x| [x, y, z]))
        })
    }
}

/// Tightest box holding every foreground voxel.
pub fn bounding_box(mask: &TumorMask) -> Result<VoxelBox> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.0.data.iter().enumerate() {
        if v == MASK_ON {
            let c = mask.0.coords(i);
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
                max[a] = max[a].max(c[a]);
            }
            any = true;
        }
    }
    if !any {
        return Err(CoreError::EmptyMask("bounding box of an empty mask".into()));
    }
    Ok(VoxelBox { min, max })
}

/// One imaging session.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyTimepoint {
    pub ct_pre: Volume3D,
    pub ct_post: Volume3D,
    pub suv: Volume3D,
    pub mask: TumorMask,
    pub acquisition_day: i64,
}

impl StudyTimepoint {
    pub fn validate(&self) -> Result<()> {
        let d = self.mask.dims();
        for (name, v) in [("ct_pre", &self.ct_pre), ("ct_post", &self.ct_post), ("suv", &self.suv)] {
            if v.dims() != d {
                return Err(CoreError::DimsMismatch(format!(
                    "{name} dims {:?} differ from mask dims {d:?}",
                    v.dims()
                )));
            }
        }
        Ok(())
    }

    fn translated(&self, shift: [i64; 3]) -> Self {
        Self {
            ct_pre: self.ct_pre.translated(shift),
            ct_post: self.ct_post.translated(shift),
            suv: self.suv.translated(shift),
            mask: self.mask.translated(shift),
            acquisition_day: self.acquisition_day,
        }
    }
}

/// Record of the translations applied by [`align_to_tumor_center`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub method: String,
    /// Cumulative voxel shift applied to each timepoint.
    pub translations: [[i64; 3]; 3],
}

/// One patient: three chronologically ordered timepoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCase {
    pub patient_id: String,
    pub timepoints: [StudyTimepoint; 3],
    pub hematocrit: f64,
    /// Aorta blood-pool means used as the ICVF reference.
    pub blood_hu_pre_mean: f64,
    pub blood_hu_post_mean: f64,
    pub alignment: Option<AlignmentRecord>,
}

impl LongitudinalCase {
    pub fn validate(&self) -> Result<()> {
        if !(self.hematocrit > 0.0 && self.hematocrit < 1.0) {
            return Err(CoreError::InvalidInput(format!(
                "{}: hematocrit {} outside (0, 1)",
                self.patient_id, self.hematocrit
            )));
        }
        let d = self.timepoints[0].mask.dims();
        for tp in &self.timepoints {
            tp.validate()?;
            if tp.mask.dims() != d {
                return Err(CoreError::DimsMismatch(format!(
                    "{}: timepoints have different dims",
                    self.patient_id
                )));
            }
        }
        if !self
            .timepoints
            .windows(2)
            .all(|w| w[0].acquisition_day < w[1].acquisition_day)
        {
            return Err(CoreError::InvalidInput(format!(
                "{}: acquisition days must be strictly increasing",
                self.patient_id
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.timepoints[0].mask.dims()
    }
}

/// Shifts timepoints 2 and 3 by whole voxels so that each rounded mask
/// centroid coincides with that of timepoint 1. Vacated voxels are zero.
pub fn align_to_tumor_center(case: &LongitudinalCase) -> Result<LongitudinalCase> {
    let mut centroids = Vec::with_capacity(3);
    for (k, tp) in case.timepoints.iter().enumerate() {
        centroids.push(tp.mask.rounded_centroid().map_err(|_| {
            CoreError::EmptyMask(format!("{}: timepoint {} mask is empty", case.patient_id, k + 1))
        })?);
    }
    let shifts: [[i64; 3]; 3] = [0, 1, 2].map(|k| [0, 1, 2].map(|a| centroids[0][a] - centroids[k][a]));
    let timepoints = [0, 1, 2].map(|k| case.timepoints[k].translated(shifts[k]));
    let previous = case
        .alignment
        .as_ref()
        .map(|r| r.translations)
        .unwrap_or([[0; 3]; 3]);
    Ok(LongitudinalCase {
        patient_id: case.patient_id.clone(),
        timepoints,
        hematocrit: case.hematocrit,
        blood_hu_pre_mean: case.blood_hu_pre_mean,
        blood_hu_post_mean: case.blood_hu_post_mean,
        alignment: Some(AlignmentRecord {
            method: "mask-centroid integer translation".into(),
            translations: [0, 1, 2].map(|k| [0, 1, 2].map(|a| previous[k][a] + shifts[k][a])),
        }),
    })
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    blob: String,
}

/// `foo.vol.json` -> `foo.raw`.
fn raw_path_for(header: &Path) -> PathBuf {
    let name = header.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    let stem = name
        .strip_suffix(".vol.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    header.with_file_name(format!("{stem}.raw"))
}

pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    if v.data.is_empty() || v.data.len() != v.dims.iter().product::<usize>() {
        return Err(CoreError::InvalidVolume("refusing to save an invalid volume".into()));
    }
    let raw = raw_path_for(path);
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let header = VolumeHeader {
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: "f32le".into(),
        blob: raw.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&raw, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32le" {
        return Err(CoreError::InvalidVolume(format!("unsupported dtype {}", header.dtype)));
    }
    let raw = path.with_file_name(&header.blob);
    let bytes = fs::read(&raw).map_err(|e| CoreError::io(&raw, e))?;
    let expected = header.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(CoreError::InvalidVolume(format!(
            "{}: blob has {} bytes, header implies {expected}",
            raw.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(header.dims, header.spacing_mm, data)
}

pub fn load_mask(path: &Path) -> Result<TumorMask> {
    TumorMask::new(load_volume(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimepointEntry {
    pub acquisition_day: i64,
    pub ct_pre: String,
    pub ct_post: String,
    pub suv: String,
    pub mask: String,
}

/// `case.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseManifest {
    pub patient_id: String,
    pub hematocrit: f64,
    pub blood_hu_pre_mean: f64,
    pub blood_hu_post_mean: f64,
    pub timepoints: Vec<TimepointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentRecord>,
}

pub const CASE_MANIFEST: &str = "case.json";

/// Writes `dir/case.json` and one volume pair per channel and timepoint.
pub fn save_case(case: &LongitudinalCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (k, tp) in case.timepoints.iter().enumerate() {
        let name = |ch: &str| format!("t{}_{ch}.vol.json", k + 1);
        save_volume(&tp.ct_pre, &dir.join(name("ct_pre")))?;
        save_volume(&tp.ct_post, &dir.join(name("ct_post")))?;
        save_volume(&tp.suv, &dir.join(name("suv")))?;
        save_volume(tp.mask.volume(), &dir.join(name("mask")))?;
        entries.push(TimepointEntry {
            acquisition_day: tp.acquisition_day,
            ct_pre: name("ct_pre"),
            ct_post: name("ct_post"),
            suv: name("suv"),
            mask: name("mask"),
        });
    }
    let manifest = CaseManifest {
        patient_id: case.patient_id.clone(),
        hematocrit: case.hematocrit,
        blood_hu_pre_mean: case.blood_hu_pre_mean,
        blood_hu_post_mean: case.blood_hu_post_mean,
        timepoints: entries,
        alignment: case.alignment.clone(),
    };
    fs::write(dir.join(CASE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a case from its directory or from the path of its `case.json`.
pub fn load_case(path: &Path) -> Result<LongitudinalCase> {
    let manifest_path = if path.is_dir() {
        path.join(CASE_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
    let m: CaseManifest = serde_json::from_str(&text)?;
    if m.timepoints.len() != 3 {
        return Err(CoreError::InvalidInput(format!(
            "{}: expected 3 timepoints, found {}",
            m.patient_id,
            m.timepoints.len()
        )));
    }
    let mut tps = Vec::with_capacity(3);
    for e in &m.timepoints {
        tps.push(StudyTimepoint {
            ct_pre: load_volume(&dir.join(&e.ct_pre))?,
            ct_post: load_volume(&dir.join(&e.ct_post))?,
            suv: load_volume(&dir.join(&e.suv))?,
            mask: load_mask(&dir.join(&e.mask))?,
            acquisition_day: e.acquisition_day,
        });
    }
    let timepoints: [StudyTimepoint; 3] = tps.try_into().expect("three timepoints");
    let case = LongitudinalCase {
        patient_id: m.patient_id,
        timepoints,
        hematocrit: m.hematocrit,
        blood_hu_pre_mean: m.blood_hu_pre_mean,
        blood_hu_post_mean: m.blood_hu_post_mean,
        alignment: m.alignment,
    };
    case.validate()?;
    Ok(case)
}

/// Loads every case directory (one holding a `case.json`) under `dir`,
/// sorted by directory name.
pub fn load_cohort(dir: &Path) -> Result<Vec<LongitudinalCase>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CASE_MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CoreError::InvalidInput(format!("no case.json under {}", dir.display())));
    }
    dirs.iter().map(|d| load_case(d)).collect()
}
