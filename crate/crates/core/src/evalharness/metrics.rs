//! Overlap and volume metrics between a predicted and a ground-truth mask.

use serde::{Deserialize, Serialize};

use crate::volumes::TumorMask;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tpv_vox: u64,
    pub vpred_vox: u64,
    pub vgt_vox: u64,
    pub tpv_mm3: f64,
    pub vpred_mm3: f64,
    pub vgt_mm3: f64,
    pub recall: f64,
    /// Zero when the prediction is empty; see `empty_prediction`.
    pub precision: f64,
    pub dice: f64,
    pub rvd: f64,
    pub empty_prediction: bool,
}

impl Metrics {
    /// Metrics from raw counts. `vgt` must be positive.
    pub fn from_counts(tpv: u64, vpred: u64, vgt: u64, voxel_mm3: f64) -> Self {
        let (t, p, g) = (tpv as f64, vpred as f64, vgt as f64);
        Self {
            tpv_vox: tpv,
            vpred_vox: vpred,
            vgt_vox: vgt,
            tpv_mm3: t * voxel_mm3,
            vpred_mm3: p * voxel_mm3,
            vgt_mm3: g * voxel_mm3,
            recall: t / g,
            precision: if vpred == 0 { 0.0 } else { t / p },
            dice: 2.0 * t / (p + g),
            rvd: (p - g) / g,
            empty_prediction: vpred == 0,
        }
    }
}

pub fn compute_metrics(pred: &TumorMask, gt: &TumorMask) -> Result<Metrics> {
    if pred.dims() != gt.dims() {
        return Err(CoreError::DimsMismatch(format!("prediction {:?} vs truth {:?}", pred.dims(), gt.dims())));
    }
    let (p, g) = (pred.volume().data(), gt.volume().data());
    let (mut tpv, mut vp, mut vg) = (0u64, 0u64, 0u64);
    for (&a, &b) in p.iter().zip(g) {
        let (a, b) = (a != 0.0, b != 0.0);
        vp += a as u64;
        vg += b as u64;
        tpv += (a && b) as u64;
    }
    if vg == 0 {
        return Err(CoreError::EmptyMask("ground-truth mask is empty".into()));
    }
    Ok(Metrics::from_counts(tpv, vp, vg, gt.volume().voxel_mm3()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[bool]) -> TumorMask {
        TumorMask::from_bools([bits.len(), 1, 1], [1.0, 1.0, 2.0], bits).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = compute_metrics(&mask(&[true, true, false]), &mask(&[true, true, false])).unwrap();
        assert_eq!((m.dice, m.recall, m.precision, m.rvd), (1.0, 1.0, 1.0, 0.0));
        assert_eq!(m.vgt_mm3, 4.0);
    }

    #[test]
    fn disjoint_masks() {
        let m = compute_metrics(&mask(&[true, true, true, false]), &mask(&[false, false, false, true])).unwrap();
        assert_eq!((m.dice, m.recall), (0.0, 0.0));
        assert_eq!(m.rvd, 3.0 / 1.0 - 1.0);
    }

    #[test]
    fn half_overlap() {
        let m = compute_metrics(&mask(&[true, true, false]), &mask(&[false, true, true])).unwrap();
        assert_eq!((m.dice, m.recall, m.precision, m.rvd), (0.5, 0.5, 0.5, 0.0));
    }

    #[test]
    fn empty_prediction_is_flagged() {
        let m = compute_metrics(&mask(&[false, false]), &mask(&[true, false])).unwrap();
        assert!(m.empty_prediction);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.rvd, -1.0);
    }

    #[test]
    fn rejects_empty_truth_and_mismatch() {
        assert!(compute_metrics(&mask(&[true]), &mask(&[false])).is_err());
        assert!(compute_metrics(&mask(&[true]), &mask(&[true, false])).is_err());
    }
}
