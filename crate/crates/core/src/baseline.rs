//! Linear growth comparator: per axial slice, boundary distances along
//! uniformly spaced rays from the t2 slice centroid are extrapolated one
//! interval forward, `r3 = max(0, 2 r2 - r1)`, and rasterized back.
//!
//! The polar parameterization assumes each slice is star-shaped about its
//! centroid; for other shapes the farthest boundary crossing on each ray is
//! used.

use std::f64::consts::PI;

use crate::volumes::{TumorMask, MASK_ON};
use crate::{CoreError, Result};

pub const DEFAULT_RAYS: usize = 72;
const RAY_STEP: f64 = 0.05;

/// Boundary distances of one slice along `k` rays about `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub center: (f64, f64),
    pub radii: Vec<f64>,
}

impl RadialProfile {
    /// Radius at an arbitrary angle, linear between neighbouring rays.
    pub fn radius_at(&self, theta: f64) -> f64 {
        let k = self.radii.len();
        let pos = theta.rem_euclid(2.0 * PI) / (2.0 * PI) * k as f64;
        let i0 = pos.floor() as usize % k;
        let i1 = (i0 + 1) % k;
        let f = pos - pos.floor();
        (1.0 - f) * self.radii[i0] + f * self.radii[i1]
    }
}

fn slice_on(mask: &TumorMask, z: usize) -> Vec<bool> {
    let [nx, ny, _] = mask.dims();
    let d = mask.volume().data();
    d[z * nx * ny..(z + 1) * nx * ny].iter().map(|&v| v == MASK_ON).collect()
}

fn slice_centroid(on: &[bool], nx: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in on.iter().enumerate().filter(|(_, &b)| b) {
        sx += (i % nx) as f64;
        sy += (i / nx) as f64;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Farthest distance along each ray whose nearest voxel is foreground, plus
/// half a voxel so a disc of radius R measures about R + 0.5. Zero for rays
/// that never meet the foreground.
pub fn radial_profile(on: &[bool], nx: usize, ny: usize, center: (f64, f64), rays: usize) -> RadialProfile {
    let reach = ((nx * nx + ny * ny) as f64).sqrt();
    let steps = (reach / RAY_STEP).ceil() as usize;
    let radii = (0..rays)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / rays as f64;
            let (dx, dy) = (th.cos(), th.sin());
            let mut last = None;
            for s in 0..=steps {
                let t = s as f64 * RAY_STEP;
                let x = (center.0 + t * dx).round();
                let y = (center.1 + t * dy).round();
                if x < 0.0 || y < 0.0 || x >= nx as f64 || y >= ny as f64 {
                    break;
                }
                if on[y as usize * nx + x as usize] {
                    last = Some(t);
                }
            }
            last.map_or(0.0, |t| t + 0.5)
        })
        .collect();
    RadialProfile { center, radii }
}

/// Extrapolated t3 mask from the (t1, t2) pair.
pub fn linear_predict(mask_t1: &TumorMask, mask_t2: &TumorMask) -> Result<TumorMask> {
    linear_predict_with(mask_t1, mask_t2, DEFAULT_RAYS)
}

pub fn linear_predict_with(mask_t1: &TumorMask, mask_t2: &TumorMask, rays: usize) -> Result<TumorMask> {
    if mask_t1.dims() != mask_t2.dims() {
        return Err(CoreError::DimsMismatch("linear baseline masks differ in dims".into()));
    }
    if rays < 3 {
        return Err(CoreError::InvalidInput(format!("need at least 3 rays, got {rays}")));
    }
    if mask_t2.is_empty() {
        return Err(CoreError::EmptyMask("linear baseline needs a nonempty t2 mask".into()));
    }
    let [nx, ny, nz] = mask_t2.dims();
    let mut out = vec![false; nx * ny * nz];
    for z in 0..nz {
        let on2 = slice_on(mask_t2, z);
        let Some(center) = slice_centroid(&on2, nx) else {
            continue;
        };
        let on1 = slice_on(mask_t1, z);
        let p2 = radial_profile(&on2, nx, ny, center, rays);
        let p1 = radial_profile(&on1, nx, ny, center, rays);
        let p3 = RadialProfile {
            center,
            radii: p2.radii.iter().zip(&p1.radii).map(|(r2, r1)| (2.0 * r2 - r1).max(0.0)).collect(),
        };
        for y in 0..ny {
            for x in 0..nx {
                let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
                // undo the half-voxel edge offset of the profile
                let r = p3.radius_at(dy.atan2(dx)) - 0.5;
                if r >= 0.0 && dx.hypot(dy) <= r {
                    out[(z * ny + y) * nx + x] = true;
                }
            }
        }
    }
    TumorMask::from_bools(mask_t2.dims(), mask_t2.volume().spacing(), &out)
}
