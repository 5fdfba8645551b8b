//! Patient-level adaptation: snapshot choice and Dice-optimal thresholding
//! on the target's first interval.

use tumorcast_nnet::Checkpoint;

use crate::config::TauGrid;
use crate::sampling::GrowthZone;
use crate::volumes::{TumorMask, Volume3D};
use crate::{CoreError, Result};

/// Index of the lowest loss; the earliest epoch wins ties.
pub fn select_snapshot(val_losses: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| CoreError::InvalidInput("no finite validation loss to select from".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotPolicy {
    /// Lowest validation loss on the target's t1 -> t2 patches.
    LowestValidation,
    /// The snapshot after this 1-based epoch, or the last one if training
    /// stopped earlier.
    Epoch(usize),
    Final,
}

pub fn personalize_snapshot<'a>(snapshots: &'a [Checkpoint], val_losses: &[f64], policy: SnapshotPolicy) -> Result<&'a Checkpoint> {
    if snapshots.is_empty() {
        return Err(CoreError::InvalidInput("empty snapshot list".into()));
    }
    let i = match policy {
        SnapshotPolicy::LowestValidation => {
            if val_losses.len() != snapshots.len() {
                return Err(CoreError::InvalidInput(format!(
                    "{} validation losses for {} snapshots",
                    val_losses.len(),
                    snapshots.len()
                )));
            }
            select_snapshot(val_losses)?
        }
        SnapshotPolicy::Epoch(e) => e.clamp(1, snapshots.len()) - 1,
        SnapshotPolicy::Final => snapshots.len() - 1,
    };
    Ok(&snapshots[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub dice: f64,
    /// `(tau, dice)` at every grid point.
    pub curve: Vec<(f64, f64)>,
    /// Set when no threshold yields any overlap.
    pub degenerate: bool,
}

/// Grid argmax of Dice between `{zone voxels with p >= tau}` and `truth`;
/// ties resolve to the smallest tau.
pub fn personalize_threshold(prob: &Volume3D, zone: &GrowthZone, truth: &TumorMask, grid: &TauGrid) -> Result<ThresholdChoice> {
    if prob.dims() != truth.dims() {
        return Err(CoreError::DimsMismatch("probability map and truth differ in dims".into()));
    }
    let voxels = zone.voxels();
    if voxels.is_empty() {
        return Err(CoreError::InvalidInput("empty growth zone".into()));
    }
    let vgt = truth.count();
    if vgt == 0 {
        return Err(CoreError::EmptyMask("threshold personalization needs a nonempty target".into()));
    }
    let scored: Vec<(f32, bool)> = voxels
        .iter()
        .map(|&[x, y, z]| (prob.get(x, y, z), truth.is_on(x, y, z)))
        .collect();
    let mut curve = Vec::new();
    let mut best = (f64::NAN, -1.0);
    for tau in grid.values() {
        let (mut vp, mut tp) = (0usize, 0usize);
        for &(p, t) in &scored {
            if p as f64 >= tau {
                vp += 1;
                tp += t as usize;
            }
        }
        let dice = 2.0 * tp as f64 / (vp + vgt) as f64;
        curve.push((tau, dice));
        if dice > best.1 {
            best = (tau, dice);
        }
    }
    Ok(ThresholdChoice {
        tau: best.0,
        dice: best.1,
        degenerate: best.1 == 0.0,
        curve,
    })
}
