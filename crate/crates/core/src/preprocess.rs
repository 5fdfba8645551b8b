//! Invasion-network channels: windowed SUV, ICVF from dual-phase CT, mask.

use crate::volumes::{StudyTimepoint, TumorMask, Volume3D, MASK_ON};
use crate::{CoreError, Result};

/// SUV×100 window mapped onto [0, 255].
pub const SUV_WINDOW: (f32, f32) = (100.0, 2600.0);

pub fn map_suv(suv: &Volume3D) -> Result<Volume3D> {
    if let Some(bad) = suv.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CoreError::InvalidInput(format!("SUV value {bad} is negative or non-finite")));
    }
    let (lo, hi) = SUV_WINDOW;
    Ok(suv.map(|v| ((100.0 * v).clamp(lo, hi) - lo) / (hi - lo) * 255.0))
}

/// Case-level reference values for the ICVF formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloodStats {
    pub hu_pre_mean: f64,
    pub hu_post_mean: f64,
    pub hematocrit: f64,
}

impl BloodStats {
    pub fn of(case: &crate::LongitudinalCase) -> Self {
        Self {
            hu_pre_mean: case.blood_hu_pre_mean,
            hu_post_mean: case.blood_hu_post_mean,
            hematocrit: case.hematocrit,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.hu_post_mean - self.hu_pre_mean > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "degenerate blood pool: post {} <= pre {}",
                self.hu_post_mean, self.hu_pre_mean
            )));
        }
        if !(self.hematocrit > 0.0 && self.hematocrit < 1.0) {
            return Err(CoreError::InvalidInput(format!("hematocrit {} outside (0, 1)", self.hematocrit)));
        }
        Ok(())
    }
}

/// ICVF = 1 - (ΔHU_tumor / ΔHU_blood)(1 - Hct), clamped to [0, 1] and scaled
/// by 100 inside the mask; zero outside.
pub fn compute_icvf(ct_post: &Volume3D, ct_pre: &Volume3D, blood: BloodStats, mask: &TumorMask) -> Result<Volume3D> {
    blood.validate()?;
    if !ct_post.same_grid(ct_pre) || ct_post.dims() != mask.dims() {
        return Err(CoreError::DimsMismatch("ICVF inputs must share dims".into()));
    }
    let blood_delta = blood.hu_post_mean - blood.hu_pre_mean;
    let keep = 1.0 - blood.hematocrit;
    let mut out = ct_post.map(|_| 0.0);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if mask.is_on_index(i) {
            let delta = ct_post.data()[i] as f64 - ct_pre.data()[i] as f64;
            let icvf = 1.0 - delta / blood_delta * keep;
            *o = (icvf.clamp(0.0, 1.0) * 100.0) as f32;
        }
    }
    Ok(out)
}

/// Mask channel: values pass through unchanged after validation.
pub fn encode_mask(mask: &Volume3D) -> Result<Volume3D> {
    Ok(TumorMask::new(mask.clone())?.into_volume())
}

/// Channels in fixed order: scaled SUV, scaled ICVF, mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InvasionImage {
    pub suv: Volume3D,
    pub icvf: Volume3D,
    pub mask: Volume3D,
}

impl InvasionImage {
    pub fn channels(&self) -> [&Volume3D; 3] {
        [&self.suv, &self.icvf, &self.mask]
    }

    /// Checks the per-channel value ranges and shared dims.
    pub fn validate(&self) -> Result<()> {
        let d = self.suv.dims();
        if self.icvf.dims() != d || self.mask.dims() != d {
            return Err(CoreError::DimsMismatch("invasion channels differ in dims".into()));
        }
        let in_range = |v: &Volume3D, hi: f32| v.data().iter().all(|&x| (0.0..=hi).contains(&x));
        if !in_range(&self.suv, 255.0) {
            return Err(CoreError::InvalidInput("SUV channel outside [0, 255]".into()));
        }
        if !in_range(&self.icvf, 100.0) {
            return Err(CoreError::InvalidInput("ICVF channel outside [0, 100]".into()));
        }
        if !self.mask.data().iter().all(|&x| x == 0.0 || x == MASK_ON) {
            return Err(CoreError::InvalidInput("mask channel is not binary".into()));
        }
        Ok(())
    }
}

pub fn assemble_invasion_channels(tp: &StudyTimepoint, blood: BloodStats) -> Result<InvasionImage> {
    tp.validate()?;
    let img = InvasionImage {
        suv: map_suv(&tp.suv)?,
        icvf: compute_icvf(&tp.ct_post, &tp.ct_pre, blood, &tp.mask)?,
        mask: encode_mask(tp.mask.volume())?,
    };
    img.validate()?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SP: [f64; 3] = [1.0; 3];

    fn constant(v: f32) -> Volume3D {
        Volume3D::filled([3, 3, 3], SP, v).unwrap()
    }

    #[test]
    fn suv_window_examples() {
        let out = map_suv(&Volume3D::new([3, 1, 1], SP, vec![26.0, 1.0, 5.0]).unwrap()).unwrap();
        assert_eq!(out.data()[0], 255.0);
        assert_eq!(out.data()[1], 0.0);
        // hand-evaluated affine map
        assert!((out.data()[2] - (400.0 / 2500.0 * 255.0)).abs() < 1e-4);
        assert!((out.data()[2] - 40.8).abs() < 1e-4);
    }

    #[test]
    fn suv_rejects_negative() {
        assert!(map_suv(&constant(-0.1)).is_err());
        assert!(map_suv(&constant(f32::NAN)).is_err());
    }

    fn stats(pre: f64, post: f64, hct: f64) -> BloodStats {
        BloodStats {
            hu_pre_mean: pre,
            hu_post_mean: post,
            hematocrit: hct,
        }
    }

    fn full_mask() -> TumorMask {
        TumorMask::new(constant(255.0)).unwrap()
    }

    #[test]
    fn icvf_examples() {
        let m = full_mask();
        let out = compute_icvf(&constant(30.0), &constant(30.0), stats(40.0, 140.0, 0.45), &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 100.0));
        let out = compute_icvf(&constant(70.0), &constant(30.0), stats(40.0, 140.0, 0.45), &m).unwrap();
        let oracle = (1.0 - 0.4 * 0.55) * 100.0;
        assert!(out.data().iter().all(|&v| (v as f64 - oracle).abs() < 1e-4));
        // tumor enhancement equal to blood, Hct -> 0
        let out = compute_icvf(&constant(140.0), &constant(40.0), stats(40.0, 140.0, 1e-12), &m).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn icvf_zero_outside_and_rejects_degenerate_blood() {
        let m = TumorMask::from_fn([3, 3, 3], SP, |x, _, _| x == 1).unwrap();
        let out = compute_icvf(&constant(30.0), &constant(30.0), stats(40.0, 140.0, 0.4), &m).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(1, 2, 2), 100.0);
        assert!(compute_icvf(&constant(0.0), &constant(0.0), stats(100.0, 100.0, 0.4), &m).is_err());
    }

    #[test]
    fn mask_encoding() {
        assert_eq!(encode_mask(&constant(255.0)).unwrap(), constant(255.0));
        assert!(encode_mask(&constant(128.0)).is_err());
    }

    #[test]
    fn permuted_channels_fail_self_check() {
        let tp = StudyTimepoint {
            ct_pre: constant(30.0),
            ct_post: constant(50.0),
            suv: constant(5.0),
            mask: full_mask(),
            acquisition_day: 0,
        };
        let img = assemble_invasion_channels(&tp, stats(40.0, 140.0, 0.4)).unwrap();
        assert!(img.suv.data().iter().all(|&v| (v - 40.8).abs() < 1e-4));
        assert_eq!(img.mask, tp.mask.volume().clone());
        let swapped = InvasionImage {
            suv: img.mask.clone(),
            icvf: img.icvf.clone(),
            mask: img.suv.clone(),
        };
        assert!(swapped.validate().is_err());
    }
}
