//! Longitudinal phantoms with known ground truth.
//!
//! A tumor is a perturbed ellipsoid whose semi-axes are scaled by a growth
//! factor per interval. Each timepoint's SUV level and ICVF encode the growth
//! of the following interval through a population map, modulated by a
//! per-patient factor, so a classifier can learn growth from appearance while
//! patient-level calibration still matters. Dual-phase CT is synthesized by
//! inverting the ICVF formula against the case's blood-pool reference.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volumes::{save_case, LongitudinalCase, StudyTimepoint, TumorMask, Volume3D};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthRegime {
    Nonlinear,
    Stable,
    Shrinking,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub patient_id: String,
    pub regime: GrowthRegime,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Timepoint-1 tumor center in voxels.
    pub center: [f64; 3],
    /// Timepoint-1 semi-axes in voxels.
    pub semi_axes: [f64; 3],
    /// Per-axis linear scale applied between t1 and t2, and t2 and t3.
    pub g12: [f64; 3],
    pub g23: [f64; 3],
    /// Center displacement per interval, voxels.
    pub drift: [f64; 3],
    /// Relative amplitude of the boundary perturbation.
    pub perturbation: f64,
    /// Mean tumor SUV at each timepoint.
    pub suv_level: [f64; 3],
    /// SUV drop from center to rim as a fraction of the level.
    pub suv_falloff: f64,
    pub suv_background: f64,
    /// Mean tumor ICVF fraction at each timepoint.
    pub icvf_level: [f64; 3],
    /// ICVF difference between center and rim as a fraction of the level.
    pub icvf_gradient: f64,
    pub hematocrit: f64,
    pub blood_hu_pre: f64,
    pub blood_hu_post: f64,
    pub noise_hu: f64,
    pub noise_suv: f64,
    pub days: [i64; 3],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            patient_id: "phantom".into(),
            regime: GrowthRegime::Custom,
            dims: [64, 64, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            center: [31.5, 31.5, 31.5],
            semi_axes: [9.0, 9.0, 9.0],
            g12: [1.1; 3],
            g23: [1.1; 3],
            drift: [0.0; 3],
            perturbation: 0.06,
            suv_level: [7.0, 7.0, 7.0],
            suv_falloff: 0.3,
            suv_background: 0.9,
            icvf_level: [0.6; 3],
            icvf_gradient: 0.1,
            hematocrit: 0.42,
            blood_hu_pre: 40.0,
            blood_hu_post: 200.0,
            noise_hu: 4.0,
            noise_suv: 0.1,
            days: [0, 365, 730],
            seed: 0,
        }
    }
}

/// Population map from appearance to the next interval's linear growth.
pub fn growth_from_suv(suv: f64) -> f64 {
    0.75 + 0.04 * suv
}

pub fn suv_for_growth(g: f64) -> f64 {
    ((g - 0.75) / 0.04).max(1.2)
}

pub fn icvf_for_growth(g: f64) -> f64 {
    (0.45 + 0.9 * (g - 0.85)).clamp(0.3, 0.9)
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidInput(format!("phantom {}: {m}", self.patient_id)));
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad("semi-axes must be positive".into());
        }
        if self.g12.iter().chain(&self.g23).any(|&g| !(g > 0.0)) {
            return bad("growth factors must be positive".into());
        }
        if !(self.hematocrit > 0.0 && self.hematocrit < 1.0) || !(self.blood_hu_post > self.blood_hu_pre) {
            return bad("blood reference invalid".into());
        }
        if self.dims.iter().any(|&d| d == 0) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("grid invalid".into());
        }
        if !(self.days[0] < self.days[1] && self.days[1] < self.days[2]) {
            return bad("days must increase".into());
        }
        if !(0.0..0.5).contains(&self.perturbation) || self.noise_hu < 0.0 || self.noise_suv < 0.0 {
            return bad("perturbation in [0, 0.5) and noise >= 0 required".into());
        }
        for t in 0..3 {
            let (c, a) = (self.center_at(t), self.axes_at(t));
            for k in 0..3 {
                let reach = a[k] * (1.0 + self.perturbation) + 1.0;
                if c[k] - reach < 0.0 || c[k] + reach > (self.dims[k] - 1) as f64 {
                    return bad(format!("tumor exceeds the grid at timepoint {}", t + 1));
                }
            }
        }
        Ok(())
    }

    pub fn axes_at(&self, t: usize) -> [f64; 3] {
        [0, 1, 2].map(|k| match t {
            0 => self.semi_axes[k],
            1 => self.semi_axes[k] * self.g12[k],
            _ => self.semi_axes[k] * self.g12[k] * self.g23[k],
        })
    }

    pub fn center_at(&self, t: usize) -> [f64; 3] {
        [0, 1, 2].map(|k| self.center[k] + self.drift[k] * t as f64)
    }
}

/// Smooth angular modulation of the boundary; shared by all timepoints.
#[derive(Debug, Clone, Copy)]
struct Perturbation {
    amp: f64,
    phase: [f64; 3],
}

impl Perturbation {
    fn factor(&self, d: [f64; 3], rho: f64) -> f64 {
        if rho == 0.0 {
            return 1.0;
        }
        let phi = d[1].atan2(d[0]);
        let cos_t = (d[2] / rho).clamp(-1.0, 1.0);
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        1.0 + self.amp
            * (0.5 * (2.0 * phi + self.phase[0]).cos() * sin_t
                + 0.3 * (3.0 * phi + self.phase[1]).cos() * sin_t
                + 0.2 * (2.0 * cos_t.acos() + self.phase[2]).cos())
    }
}

pub fn generate_case(params: &PhantomParams) -> Result<LongitudinalCase> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let pert = Perturbation {
        amp: params.perturbation,
        phase: [rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI],
    };
    let hu_noise = Normal::new(0.0, params.noise_hu.max(0.0)).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    let suv_noise = Normal::new(0.0, params.noise_suv.max(0.0)).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    let blood_delta = params.blood_hu_post - params.blood_hu_pre;
    let dims = params.dims;
    let sp = params.spacing_mm;
    let mut timepoints = Vec::with_capacity(3);
    for t in 0..3 {
        let c = params.center_at(t);
        let a = params.axes_at(t);
        // normalised ellipsoidal radius relative to the perturbed boundary
        let rel: Vec<f64> = (0..dims[2])
            .flat_map(|z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
            .map(|p| {
                let d = [0, 1, 2].map(|k| (p[k] as f64 - c[k]) / a[k]);
                let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                rho / pert.factor(d, rho)
            })
            .collect();
        let bits: Vec<bool> = rel.iter().map(|&r| r <= 1.0).collect();
        let mask = TumorMask::from_bools(dims, sp, &bits)?;
        if mask.is_empty() {
            return Err(CoreError::InvalidInput(format!(
                "phantom {}: timepoint {} mask is empty",
                params.patient_id,
                t + 1
            )));
        }
        let mut ct_pre = Vec::with_capacity(rel.len());
        let mut ct_post = Vec::with_capacity(rel.len());
        let mut suv = Vec::with_capacity(rel.len());
        for (&r, &inside) in rel.iter().zip(&bits) {
            let (pre, post, s);
            if inside {
                let icvf = (params.icvf_level[t] * (1.0 + params.icvf_gradient * (0.5 - r))).clamp(0.0, 1.0);
                pre = 35.0;
                post = pre + (1.0 - icvf) / (1.0 - params.hematocrit) * blood_delta;
                s = params.suv_level[t] * (1.0 + params.suv_falloff * (0.5 - r * r));
            } else {
                pre = 50.0;
                post = 110.0;
                s = params.suv_background;
            }
            ct_pre.push((pre + hu_noise.sample(&mut rng)) as f32);
            ct_post.push((post + hu_noise.sample(&mut rng)) as f32);
            suv.push((s + suv_noise.sample(&mut rng)).max(0.0) as f32);
        }
        timepoints.push(StudyTimepoint {
            ct_pre: Volume3D::new(dims, sp, ct_pre)?,
            ct_post: Volume3D::new(dims, sp, ct_post)?,
            suv: Volume3D::new(dims, sp, suv)?,
            mask,
            acquisition_day: params.days[t],
        });
    }
    let case = LongitudinalCase {
        patient_id: params.patient_id.clone(),
        timepoints: timepoints.try_into().expect("three timepoints"),
        hematocrit: params.hematocrit,
        blood_hu_pre_mean: params.blood_hu_pre,
        blood_hu_post_mean: params.blood_hu_post,
        alignment: None,
    };
    case.validate()?;
    Ok(case)
}

/// Counts of (nonlinear, stable, shrinking) cases.
pub type RegimeMix = [usize; 3];

/// Proportional 60/20/20 split; the remainder goes to the nonlinear group.
pub fn default_mix(n: usize) -> RegimeMix {
    let stable = (n as f64 * 0.2).round() as usize;
    let shrinking = (n as f64 * 0.2).round() as usize;
    [n.saturating_sub(stable + shrinking), stable, shrinking]
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws the parameters of one case in the given regime.
pub fn sample_params(regime: GrowthRegime, patient_id: &str, seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g12, g23) = match regime {
        GrowthRegime::Nonlinear => {
            if rng.random::<bool>() {
                (uniform(&mut rng, 1.0, 1.08), uniform(&mut rng, 1.16, 1.25))
            } else {
                (uniform(&mut rng, 1.16, 1.25), uniform(&mut rng, 0.94, 1.04))
            }
        }
        GrowthRegime::Stable => (uniform(&mut rng, 0.98, 1.02), uniform(&mut rng, 0.98, 1.02)),
        GrowthRegime::Shrinking | GrowthRegime::Custom => (uniform(&mut rng, 0.85, 0.93), uniform(&mut rng, 0.85, 0.93)),
    };
    // patient-specific deviation from the population appearance-to-growth map
    let patient = uniform(&mut rng, 0.96, 1.04);
    let radius = uniform(&mut rng, 8.0, 10.0);
    let semi_axes = [0, 1, 2].map(|_| radius * uniform(&mut rng, 0.92, 1.08));
    let aniso = |rng: &mut ChaCha8Rng, g: f64| [0, 1, 2].map(|_| g * uniform(rng, 0.985, 1.015));
    let g12v = aniso(&mut rng, g12);
    let g23v = aniso(&mut rng, g23);
    let drift = [0, 1, 2].map(|_| uniform(&mut rng, -1.0, 1.0));
    let g3 = g23 * uniform(&mut rng, 0.95, 1.05);
    let level = |g: f64| suv_for_growth(g / patient);
    let gap = uniform(&mut rng, 300.0, 420.0) as i64;
    let gap2 = uniform(&mut rng, 300.0, 420.0) as i64;
    PhantomParams {
        patient_id: patient_id.to_string(),
        regime,
        center: [0, 1, 2].map(|_| uniform(&mut rng, 30.0, 33.0)),
        semi_axes,
        g12: g12v,
        g23: g23v,
        drift,
        suv_level: [level(g12), level(g23), level(g3)],
        icvf_level: [icvf_for_growth(g12 / patient), icvf_for_growth(g23 / patient), icvf_for_growth(g3 / patient)],
        hematocrit: uniform(&mut rng, 0.36, 0.48),
        blood_hu_pre: uniform(&mut rng, 35.0, 45.0),
        blood_hu_post: uniform(&mut rng, 180.0, 220.0),
        days: [0, gap, gap + gap2],
        seed: rng.random(),
        ..PhantomParams::default()
    }
}

/// Parameters for an n-case cohort in regime order: nonlinear, stable,
/// shrinking. Patient ids are `P01`, `P02`, ...
pub fn cohort_params(n: usize, mix: RegimeMix, seed: u64) -> Result<Vec<PhantomParams>> {
    if n < 2 {
        return Err(CoreError::InvalidInput(format!("cohort needs at least 2 cases, got {n}")));
    }
    if mix.iter().sum::<usize>() != n {
        return Err(CoreError::InvalidInput(format!("mix {mix:?} does not sum to {n}")));
    }
    let regimes = [GrowthRegime::Nonlinear, GrowthRegime::Stable, GrowthRegime::Shrinking];
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (regime, &count) in regimes.iter().zip(&mix) {
        for _ in 0..count {
            let id = format!("P{:02}", out.len() + 1);
            out.push(sample_params(*regime, &id, master.random()));
        }
    }
    Ok(out)
}

pub fn generate_cohort(n: usize, mix: RegimeMix, seed: u64) -> Result<Vec<(LongitudinalCase, PhantomParams)>> {
    cohort_params(n, mix, seed)?
        .into_iter()
        .map(|p| Ok((generate_case(&p)?, p)))
        .collect()
}

pub const PHANTOM_TRUTH: &str = "phantom.json";

/// Writes one directory per case plus each case's generator parameters,
/// which the pipeline never reads.
pub fn write_cohort(cohort: &[(LongitudinalCase, PhantomParams)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (case, params) in cohort {
        let case_dir = dir.join(&case.patient_id);
        save_case(case, &case_dir)?;
        fs::write(case_dir.join(PHANTOM_TRUTH), serde_json::to_string_pretty(params)?)?;
    }
    Ok(())
}
