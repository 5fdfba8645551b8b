//! Per-case feature rasters and the patch sets drawn from them.

use crate::growthmodels::derive_seed;
use crate::motion::{assemble_expansion_channels, ExpansionImage, FlowParams};
use crate::preprocess::{assemble_invasion_channels, BloodStats, InvasionImage};
use crate::sampling::{sample_training_patches, PairTag, PatchSample, SamplingConfig};
use crate::volumes::{LongitudinalCase, TumorMask, Volume3D};
use crate::Result;

/// Network inputs of one (already aligned) case.
#[derive(Debug, Clone)]
pub struct CaseFeatures {
    pub patient_id: String,
    /// Invasion channels at t1 and t2.
    pub invasion: [InvasionImage; 2],
    /// Expansion channels of the t1 -> t2 interval.
    pub expansion12: ExpansionImage,
    pub masks: [TumorMask; 3],
}

pub fn prepare_case(case: &LongitudinalCase, flow: &FlowParams) -> Result<CaseFeatures> {
    case.validate()?;
    let blood = BloodStats::of(case);
    let [t1, t2, t3] = &case.timepoints;
    let (expansion12, _) = assemble_expansion_channels(&t1.mask, &t2.mask, flow)?;
    Ok(CaseFeatures {
        patient_id: case.patient_id.clone(),
        invasion: [assemble_invasion_channels(t1, blood)?, assemble_invasion_channels(t2, blood)?],
        expansion12,
        masks: [t1.mask.clone(), t2.mask.clone(), t3.mask.clone()],
    })
}

impl CaseFeatures {
    /// Invasion channels observed at timepoint `t` (0 or 1).
    pub fn invasion_source(&self, t: usize) -> Vec<&Volume3D> {
        self.invasion[t].channels().to_vec()
    }

    /// t2 invasion channels followed by the t1 -> t2 expansion channels.
    pub fn joint_source(&self) -> Vec<&Volume3D> {
        let mut v = self.invasion[1].channels().to_vec();
        v.extend(self.expansion12.channels());
        v
    }
}

fn id_salt(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Balanced samples of one case for one interval; the draw depends only on
/// `seed`, the patient id and the tag.
pub fn pair_samples(f: &CaseFeatures, tag: PairTag, cfg: &SamplingConfig, seed: u64) -> Result<Vec<PatchSample>> {
    let tag_salt = match tag {
        PairTag::T1T2 => 1,
        PairTag::T2T3 => 2,
        PairTag::T12T3 => 3,
    };
    let seed = derive_seed(derive_seed(seed, id_salt(&f.patient_id)), tag_salt);
    let (channels, anchor, next) = match tag {
        PairTag::T1T2 => (f.invasion_source(0), &f.masks[0], &f.masks[1]),
        PairTag::T2T3 => (f.invasion_source(1), &f.masks[1], &f.masks[2]),
        PairTag::T12T3 => (f.joint_source(), &f.masks[1], &f.masks[2]),
    };
    sample_training_patches(&channels, anchor, next, &f.patient_id, tag, cfg, seed)
}

/// Salt separating a target's validation draw from its training draw.
const VALIDATION_SALT: u64 = 0x7A11_DA7E;

/// Balanced t1 -> t2 patches of a held-out patient, drawn independently of
/// its training draw; scored to pick the invasion snapshot.
pub fn validation_samples(f: &CaseFeatures, cfg: &SamplingConfig, seed: u64) -> Result<Vec<PatchSample>> {
    pair_samples(f, PairTag::T1T2, cfg, derive_seed(seed, VALIDATION_SALT))
}

/// Training patches of a population: invasion pairs from both intervals and
/// triplet-derived joint patches.
#[derive(Debug, Clone, Default)]
pub struct PopulationSet<'a> {
    pub pairs: Vec<&'a PatchSample>,
    pub triplets: Vec<&'a PatchSample>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_case, PhantomParams};
    use crate::volumes::align_to_tumor_center;

    fn features() -> CaseFeatures {
        let p = PhantomParams {
            dims: [40, 40, 32],
            center: [19.5, 19.5, 15.5],
            semi_axes: [6.0, 6.0, 5.0],
            g12: [1.1; 3],
            g23: [1.1; 3],
            ..PhantomParams::default()
        };
        let case = align_to_tumor_center(&generate_case(&p).unwrap()).unwrap();
        prepare_case(&case, &FlowParams::default()).unwrap()
    }

    #[test]
    fn invasion_pairs_double_triplets() {
        let f = features();
        let cfg = SamplingConfig::default();
        let a = pair_samples(&f, PairTag::T1T2, &cfg, 1).unwrap();
        let b = pair_samples(&f, PairTag::T2T3, &cfg, 1).unwrap();
        let t = pair_samples(&f, PairTag::T12T3, &cfg, 1).unwrap();
        assert_eq!(a[0].channels(), 3);
        assert_eq!(t[0].channels(), 7);
        assert_eq!(b.len(), t.len());
        let ratio = (a.len() + b.len()) as f64 / t.len() as f64;
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
        // labels come from the next mask
        for s in &t {
            let [x, y, z] = s.center;
            assert_eq!(s.label == 1, f.masks[2].is_on(x, y, z));
        }
    }

    #[test]
    fn joint_source_order() {
        let f = features();
        let j = f.joint_source();
        assert_eq!(j.len(), 7);
        assert!(std::ptr::eq(j[2], &f.invasion[1].mask));
        assert!(std::ptr::eq(j[6], &f.expansion12.growth));
    }
}
