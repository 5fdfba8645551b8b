use proptest::prelude::*;
use tumorcast_core::config::TauGrid;
use tumorcast_core::evalharness::compute_metrics;
use tumorcast_core::growthmodels::{personalize_threshold, threshold_in_zone};
use tumorcast_core::motion::{build_growth_map, estimate_flow, flow_to_rgb, rgb_to_flow, FlowParams};
use tumorcast_core::sampling::{growth_zone, sample_training_patches, PairTag, SamplingConfig};
use tumorcast_core::volumes::{bounding_box, load_volume, save_volume, VoxelBox};
use tumorcast_core::{TumorMask, Volume3D};

const SP: [f64; 3] = [1.0, 1.0, 1.0];

fn mask_strategy(max: usize) -> impl Strategy<Value = TumorMask> {
    (1..=max, 1..=max, 1..=max, any::<u64>(), 0.05f64..0.7).prop_map(|(nx, ny, nz, seed, p)| {
        let mut s = seed | 1;
        TumorMask::from_fn([nx, ny, nz], SP, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f64 / 1000.0 < p
        })
        .unwrap()
    })
}

fn pair_strategy(max: usize) -> impl Strategy<Value = (TumorMask, TumorMask)> {
    mask_strategy(max).prop_flat_map(|a| {
        let d = a.dims();
        (Just(a), any::<u64>()).prop_map(move |(a, seed)| {
            let mut s = seed | 1;
            let b = TumorMask::from_fn(d, SP, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 61) < 3
            })
            .unwrap();
            (a, b)
        })
    })
}

fn ball(d: [usize; 3], c: [f64; 3], r: f64) -> TumorMask {
    TumorMask::from_fn(d, SP, |x, y, z| {
        let (dx, dy, dz) = (x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]);
        (dx * dx + dy * dy + dz * dz).sqrt() <= r
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_roundtrip_is_bit_exact(d in (1usize..6, 1usize..6, 1usize..6), vals in prop::collection::vec(-1e30f32..1e30, 216)) {
        let n = d.0 * d.1 * d.2;
        let v = Volume3D::new([d.0, d.1, d.2], [0.5, 1.25, 2.0], vals[..n].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol.json");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        let bits = |x: &Volume3D| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn bounding_box_is_tight(m in mask_strategy(10)) {
        prop_assume!(!m.is_empty());
        let b = bounding_box(&m).unwrap();
        let [nx, ny, nz] = m.dims();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if m.is_on(x, y, z) {
                        prop_assert!(b.contains([x, y, z]));
                        for (a, v) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        prop_assert_eq!(b, VoxelBox { min: lo, max: hi });
    }

    #[test]
    fn metric_identities((a, b) in pair_strategy(12)) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let ab = compute_metrics(&a, &b).unwrap();
        let ba = compute_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.dice, ba.dice);
        for v in [ab.dice, ab.recall, ab.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(ab.rvd >= -1.0);
        prop_assert!((ab.recall * ab.vgt_vox as f64 - ab.tpv_vox as f64).abs() < 1e-9);
        prop_assert!((ab.precision * ab.vpred_vox as f64 - ab.tpv_vox as f64).abs() < 1e-9);
        if ab.tpv_vox > 0 {
            prop_assert!((ab.rvd - (ab.recall / ab.precision - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn growth_map_is_a_set_operation((a, b) in pair_strategy(10)) {
        let g = build_growth_map(&a, &b).unwrap();
        let [nx, ny, nz] = a.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let want = match (a.is_on(x, y, z), b.is_on(x, y, z)) {
                        (true, true) => 255.0,
                        (false, true) => 170.0,
                        (true, false) => 85.0,
                        (false, false) => 0.0,
                    };
                    prop_assert_eq!(g.get(x, y, z), want);
                }
            }
        }
    }

    #[test]
    fn color_roundtrip(theta in 0.0f64..std::f64::consts::TAU, frac in 0.25f64..1.0, max in 0.5f64..20.0) {
        let (u, v) = (frac * max * theta.cos(), frac * max * theta.sin());
        let rgb = flow_to_rgb(u, v, max);
        let (du, dv) = rgb_to_flow(rgb.map(f64::from), max);
        let err = (dv.atan2(du) - v.atan2(u)).abs();
        let err = err.min(std::f64::consts::TAU - err).to_degrees();
        prop_assert!(err < 3.0, "direction off by {err} deg");
        prop_assert!((du.hypot(dv) - frac * max).abs() <= 2.0 / 255.0 * max + 1e-9);
    }

    #[test]
    fn threshold_volume_is_monotone_and_tau_is_grid_argmax(seed in any::<u64>()) {
        let d = [9, 9, 3];
        let mut s = seed | 1;
        let prob = Volume3D::from_fn(d, SP, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1001) as f32 / 1000.0
        }).unwrap();
        let truth = ball(d, [4.0, 4.0, 1.0], 2.5);
        let zone = growth_zone(&truth, [2, 2, 1]).unwrap();
        let grid = TauGrid::default();
        let choice = personalize_threshold(&prob, &zone, &truth, &grid).unwrap();
        let mut prev = usize::MAX;
        for tau in grid.values() {
            let m = threshold_in_zone(&prob, &zone, tau).unwrap();
            prop_assert!(m.count() <= prev);
            prev = m.count();
            let dice = compute_metrics(&m, &truth).unwrap().dice;
            prop_assert!(dice <= choice.dice + 1e-12);
        }
        prop_assert!(grid.values().contains(&choice.tau));
    }

    #[test]
    fn sampling_labels_and_box(r in 2.0f64..4.0, grow in 0.0f64..2.0, seed in any::<u64>(), half in 3usize..8) {
        let d = [24, 24, 16];
        let a = ball(d, [12.0, 12.0, 8.0], r);
        let b = ball(d, [12.0, 12.0, 8.0], r + grow);
        let ch = a.volume().clone();
        let cfg = SamplingConfig { half_box: half, ..SamplingConfig::default() };
        let s = sample_training_patches(&[&ch], &a, &b, "p", PairTag::T1T2, &cfg, seed).unwrap();
        let bx = tumorcast_core::sampling::candidate_box(&a, half).unwrap();
        let mut positives = 0;
        for p in &s {
            let [x, y, z] = p.center;
            prop_assert!(bx.contains(p.center));
            prop_assert_eq!(p.label == 1, b.is_on(x, y, z));
            positives += p.label as usize;
        }
        // every positive in the box is kept when no cap applies
        let all_pos = bx.iter().filter(|&[x, y, z]| b.is_on(x, y, z)).count();
        prop_assert_eq!(positives, all_pos);
        prop_assert!(s.len() - positives <= (all_pos as f64 * cfg.negative_ratio).round() as usize);
    }
}

/// Mean and max endpoint difference between the flow of a disc pair and
/// the flow of the same pair shifted by `(sx, sy)`, over the t1 disc.
fn shift_deviation(sx: usize, sy: usize) -> (f32, f32) {
    let d = [96, 96, 1];
    let a = ball(d, [45.0, 45.0, 0.0], 6.0);
    let b = ball(d, [47.0, 46.0, 0.0], 6.5);
    let p = FlowParams::default();
    let base = estimate_flow(&a, &b, &p).unwrap();
    let shift = [sx as i64, sy as i64, 0];
    let moved = estimate_flow(&a.translated(shift), &b.translated(shift), &p).unwrap();
    let (mut sum, mut max, mut n) = (0.0f32, 0.0f32, 0);
    for y in 30..60 {
        for x in 30..60 {
            if a.is_on(x, y, 0) {
                let (u0, v0) = base.at(x, y, 0);
                let (u1, v1) = moved.at(x + sx, y + sy, 0);
                let e = (u0 - u1).hypot(v0 - v1);
                sum += e;
                max = max.max(e);
                n += 1;
            }
        }
    }
    (sum / n as f32, max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Off-grid shifts move the disc relative to the pyramid's decimation
    // lattice, so single boundary voxels can drift by ~0.2; the field as a
    // whole stays put.
    #[test]
    fn flow_is_translation_equivariant(sx in 0usize..9, sy in 0usize..9) {
        let (mean, _) = shift_deviation(sx, sy);
        prop_assert!(mean < 0.1, "mean deviation {mean}");
    }
}

#[test]
fn flow_is_pointwise_equivariant_on_the_pyramid_lattice() {
    for (sx, sy) in [(8, 0), (0, 8), (8, 8)] {
        let (_, max) = shift_deviation(sx, sy);
        assert!(max < 0.1, "shift ({sx},{sy}): max deviation {max}");
    }
}
