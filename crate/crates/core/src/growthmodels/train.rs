//! Mini-batch SGD over patch sets with per-epoch snapshots.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tumorcast_nnet::{sgd_step, Checkpoint, Network, NetworkSpec, SgdState, Shape, Tensor, TrainConfig};

use crate::growthmodels::{derive_seed, instantiate_architecture, ArchitectureKind, PopulationSet};
use crate::sampling::{compute_mean_patch, PatchSample, PATCH};
use crate::{CoreError, Result, RunConfig};

/// A trained network with its history.
#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    /// `snapshots[e]` holds the weights after epoch `e + 1`.
    pub snapshots: Vec<Checkpoint>,
    pub train_loss: Vec<f64>,
    /// Empty when no validation set was given.
    pub val_loss: Vec<f64>,
    pub groups: Vec<[usize; 2]>,
    pub input_scale: f32,
}

/// Splits a full-source mean patch into one mean per stream group.
pub(crate) fn group_means(full: &[f32], channels: usize, groups: &[[usize; 2]]) -> Vec<Vec<f32>> {
    groups
        .iter()
        .map(|g| {
            let mut m = Vec::with_capacity(PATCH * PATCH * (g[1] - g[0]));
            for px in 0..PATCH * PATCH {
                m.extend_from_slice(&full[px * channels + g[0]..px * channels + g[1]]);
            }
            m
        })
        .collect()
}

/// Fills one tensor per group from source patches: `(value - mean) * scale`.
pub(crate) fn batch_tensors<'a>(
    patches: impl ExactSizeIterator<Item = &'a [f32]> + Clone,
    channels: usize,
    groups: &[[usize; 2]],
    means: &[Vec<f32>],
    scale: f32,
) -> Vec<Tensor<f32>> {
    let n = patches.len();
    groups
        .iter()
        .zip(means)
        .map(|(g, mean)| {
            let gc = g[1] - g[0];
            let mut data = Vec::with_capacity(n * PATCH * PATCH * gc);
            for p in patches.clone() {
                for px in 0..PATCH * PATCH {
                    let src = &p[px * channels + g[0]..px * channels + g[1]];
                    let m = &mean[px * gc..(px + 1) * gc];
                    data.extend(src.iter().zip(m).map(|(v, m)| (v - m) * scale));
                }
            }
            Tensor::from_vec(Shape::new(n, PATCH, PATCH, gc), data).expect("batch shape")
        })
        .collect()
}

fn mean_loss(net: &Network<f32>, samples: &[&PatchSample], groups: &[[usize; 2]], means: &[Vec<f32>], scale: f32) -> Result<f64> {
    let channels = samples[0].channels();
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let inputs = batch_tensors(chunk.iter().map(|s| s.data.as_slice()), channels, groups, means, scale);
        let labels: Vec<usize> = chunk.iter().map(|s| s.label as usize).collect();
        total += net.eval_loss(&inputs, &labels)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Eval-mode loss of a stored snapshot on `samples`, using its own means.
pub fn snapshot_loss(ck: &Checkpoint, groups: &[[usize; 2]], input_scale: f32, samples: &[&PatchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::InvalidInput("empty validation patch set".into()));
    }
    let net = ck.network::<f32>()?;
    mean_loss(&net, samples, groups, &ck.means, input_scale)
}

/// Trains `spec` for `epochs` epochs. Mean patches come from `train`; the
/// validation loss, when `val` is nonempty, is evaluated after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_network(
    spec: &NetworkSpec,
    groups: &[[usize; 2]],
    train: &[&PatchSample],
    val: &[&PatchSample],
    cfg: &TrainConfig,
    epochs: usize,
    input_scale: f32,
    seed: u64,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::InvalidInput(format!("{}: empty training patch set", spec.name)));
    }
    let channels = train[0].channels();
    if train.iter().chain(val).any(|s| s.channels() != channels) {
        return Err(CoreError::InvalidInput(format!("{}: patch channel counts differ", spec.name)));
    }
    if groups.len() != spec.streams.len() || groups.iter().any(|g| g[1] > channels || g[0] >= g[1]) {
        return Err(CoreError::InvalidInput(format!("{}: input groups do not fit the patches", spec.name)));
    }
    let full_mean = compute_mean_patch(train)?;
    let means = group_means(&full_mean, channels, groups);
    let mut net = Network::<f32>::new(spec)?;
    let mut state = SgdState::for_params(&net.params_mut());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut out = TrainedNetwork {
        snapshots: Vec::with_capacity(epochs),
        train_loss: Vec::with_capacity(epochs),
        val_loss: Vec::new(),
        groups: groups.to_vec(),
        input_scale,
    };
    for epoch in 0..epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5000 + epoch as u64));
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let inputs = batch_tensors(idx.iter().map(|&i| train[i].data.as_slice()), channels, groups, &means, input_scale);
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label as usize).collect();
            let loss = net.train_batch(&inputs, &labels, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(CoreError::InvalidInput(format!("{}: loss diverged at epoch {}", spec.name, epoch + 1)));
            }
            total += loss * idx.len() as f64;
            let mut params = net.params_mut();
            sgd_step(&mut params, &mut state, cfg, epoch);
        }
        out.train_loss.push(total / train.len() as f64);
        if !val.is_empty() {
            out.val_loss.push(mean_loss(&net, val, groups, &means, input_scale)?);
        }
        out.snapshots.push(Checkpoint::from_network(&net, means.clone(), epoch + 1, seed));
    }
    Ok(out)
}

/// Trains every network of `kind`. Invasion streams learn from both
/// single-interval pair sets; every other stream learns from triplets. Only
/// the invasion network is scored on `validation` (target t1 -> t2 pairs).
pub fn train_population(
    kind: ArchitectureKind,
    data: &PopulationSet<'_>,
    validation: &[&PatchSample],
    cfg: &RunConfig,
) -> Result<Vec<TrainedNetwork>> {
    let specs = instantiate_architecture(kind, &cfg.arch, cfg.train.dropout, cfg.seed)?;
    specs
        .iter()
        .zip(kind.input_groups())
        .map(|(spec, groups)| {
            let invasion = spec.name == "invasion";
            let (set, epochs, val) = if invasion {
                (&data.pairs, cfg.train.max_epochs, validation)
            } else {
                (&data.triplets, cfg.fusion_epochs, &[][..])
            };
            train_network(spec, &groups, set, val, &cfg.train, epochs, cfg.input_scale, spec.seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growthmodels::ArchitectureConfig;
    use crate::sampling::PairTag;
    use std::sync::Arc;
    use tumorcast_nnet::InitScheme;

    /// Positive patches carry a bright center, negatives a dark one.
    fn separable(n: usize) -> Vec<PatchSample> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut data = vec![0.0f32; PATCH * PATCH * 3];
                for px in 0..PATCH * PATCH {
                    let (y, x) = (px / PATCH, px % PATCH);
                    let near = (y as i32 - 8).abs() <= 3 && (x as i32 - 8).abs() <= 3;
                    data[px * 3] = if near && label == 1 { 255.0 } else { ((i * 7 + px) % 13) as f32 };
                    data[px * 3 + 2] = (i % 5) as f32 * 10.0;
                }
                PatchSample {
                    data,
                    label,
                    center: [i, 0, 0],
                    patient_id: Arc::from("toy"),
                    pair_tag: PairTag::T1T2,
                }
            })
            .collect()
    }

    fn toy_spec() -> NetworkSpec {
        let arch = ArchitectureConfig {
            widths: [4, 8, 8, 8],
            fc_units: 16,
            fusion_channels: 8,
            init: InitScheme::Msra,
        };
        instantiate_architecture(ArchitectureKind::Invasion, &arch, 0.5, 3).unwrap().remove(0)
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            lr0: 0.01,
            batch_size: 16,
            dropout: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_patches_are_learned() {
        let s = separable(128);
        let refs: Vec<&PatchSample> = s.iter().collect();
        let run = train_network(&toy_spec(), &[[0, 3]], &refs, &refs, &toy_cfg(), 30, 1.0 / 128.0, 5).unwrap();
        assert_eq!(run.snapshots.len(), 30);
        assert_eq!(run.val_loss.len(), 30);
        // eval-mode loss on the training set itself; the running training
        // loss carries dropout noise
        let best = run.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best <= 0.01, "{:?}", run.val_loss);
    }

    #[test]
    fn training_is_reproducible() {
        let s = separable(48);
        let refs: Vec<&PatchSample> = s.iter().collect();
        let a = train_network(&toy_spec(), &[[0, 3]], &refs, &[], &toy_cfg(), 3, 1.0 / 128.0, 9).unwrap();
        let b = train_network(&toy_spec(), &[[0, 3]], &refs, &[], &toy_cfg(), 3, 1.0 / 128.0, 9).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.train_loss, b.train_loss);
    }

    #[test]
    fn stored_mean_is_the_training_mean() {
        let s = separable(20);
        let refs: Vec<&PatchSample> = s.iter().collect();
        let run = train_network(&toy_spec(), &[[0, 3]], &refs, &[], &toy_cfg(), 1, 1.0, 1).unwrap();
        assert_eq!(run.snapshots[0].means[0], compute_mean_patch(&s).unwrap());
    }

    #[test]
    fn group_split_matches_channels() {
        let full: Vec<f32> = (0..PATCH * PATCH * 7).map(|i| i as f32).collect();
        let m = group_means(&full, 7, &[[0, 3], [3, 7]]);
        assert_eq!(&m[0][..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&m[1][..4], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m[1][4], 10.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(train_network(&toy_spec(), &[[0, 3]], &[], &[], &toy_cfg(), 1, 1.0, 1).is_err());
    }
}
