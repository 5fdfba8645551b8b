//! Finite-difference verification of analytic gradients, in `f64`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv2d, Dense, Dropout, Layer, Lrn, MaxPool2d, Relu};
use crate::loss::softmax_xent;
use crate::network::Network;
use crate::spec::NetworkSpec;
use crate::tensor::{Shape, Tensor};
use crate::Result;

const EPS: f64 = 1e-6;
/// Denominator floor so that vanishing gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let verdict = if e.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} max_rel_err={:.3e} probes={:<5} {verdict}",
                e.name, e.max_rel_error, e.probes
            )?;
        }
        Ok(())
    }
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn probe_indices(len: usize, max_probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_probes {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, max_probes).into_vec()
    }
}

/// Checks one layer against central differences of `L = sum(y * r)` for a
/// fixed random `r`. Every input element and every parameter element is
/// probed when the tensors hold at most `max_probes` entries, otherwise a
/// random subset of that size.
pub fn check_layer(
    name: &str,
    layer: &mut dyn Layer<f64>,
    input: Shape,
    seed: u64,
    max_probes: usize,
) -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(input, &mut rng);
    let out_shape = layer.output_shape(input);
    let r = random_tensor(out_shape, &mut rng);
    let fwd_seed = rng.next_u64();

    let loss = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
        let mut frng = ChaCha8Rng::seed_from_u64(fwd_seed);
        let y = layer.forward(x, true, &mut frng);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    for p in layer.params_mut() {
        p.zero_grad();
        let vals: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        p.value.copy_from_slice(&vals);
    }
    let mut frng = ChaCha8Rng::seed_from_u64(fwd_seed);
    let _ = layer.forward(&x, true, &mut frng);
    let dx = layer.backward(&r);
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for i in probe_indices(x.shape().len(), max_probes, &mut rng) {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let lp = loss(layer, &xp);
        xp.data_mut()[i] -= 2.0 * EPS;
        let lm = loss(layer, &xp);
        worst = worst.max(relative_error(dx.data()[i], (lp - lm) / (2.0 * EPS)));
        probes += 1;
    }
    for (pi, analytic) in analytic_params.iter().enumerate() {
        for i in probe_indices(analytic.len(), max_probes, &mut rng) {
            let orig = layer.params()[pi].value[i];
            layer.params_mut()[pi].value[i] = orig + EPS;
            let lp = loss(layer, &x);
            layer.params_mut()[pi].value[i] = orig - EPS;
            let lm = loss(layer, &x);
            layer.params_mut()[pi].value[i] = orig;
            worst = worst.max(relative_error(analytic[i], (lp - lm) / (2.0 * EPS)));
            probes += 1;
        }
    }
    GradCheckEntry {
        name: name.to_string(),
        max_rel_error: worst,
        probes,
    }
}

/// Checks the softmax cross-entropy gradient with respect to the logits.
pub fn check_softmax_xent(seed: u64) -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(4, 1, 1, 2);
    let logits = random_tensor(shape, &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
    let analytic = softmax_xent(&logits, &labels).expect("valid").grad;
    let mut worst: f64 = 0.0;
    for i in 0..shape.len() {
        let mut lp = logits.clone();
        lp.data_mut()[i] += EPS;
        let up = softmax_xent(&lp, &labels).expect("valid").loss;
        lp.data_mut()[i] -= 2.0 * EPS;
        let down = softmax_xent(&lp, &labels).expect("valid").loss;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * EPS)));
    }
    GradCheckEntry {
        name: "softmax_xent".into(),
        max_rel_error: worst,
        probes: shape.len(),
    }
}

/// Every layer type on small random tensors.
pub fn layer_suite(tolerance: f64, seed: u64) -> GradCheckReport {
    let mut entries = vec![
        check_layer("conv3x3", &mut Conv2d::<f64>::new(2, 3, 3, 1), Shape::new(2, 5, 5, 2), seed, 400),
        check_layer("conv1x1", &mut Conv2d::<f64>::new(4, 3, 1, 0), Shape::new(2, 4, 4, 4), seed + 1, 400),
        check_layer("maxpool3s2", &mut MaxPool2d::new(3, 2), Shape::new(2, 7, 7, 2), seed + 2, 400),
        check_layer("lrn", &mut Lrn::<f64>::new(5, 1e-4, 0.75, 1.0), Shape::new(2, 3, 3, 7), seed + 3, 400),
        check_layer("lrn_strong", &mut Lrn::<f64>::new(5, 2.0, 0.75, 1.0), Shape::new(2, 3, 3, 7), seed + 4, 400),
        check_layer("relu", &mut Relu::new(), Shape::new(2, 4, 4, 3), seed + 5, 400),
        check_layer("fc", &mut Dense::<f64>::new(12, 5), Shape::new(3, 2, 2, 3), seed + 6, 400),
        check_layer("dropout", &mut Dropout::<f64>::new(0.5), Shape::new(2, 1, 1, 20), seed + 7, 400),
    ];
    entries.push(check_softmax_xent(seed + 8));
    GradCheckReport { tolerance, entries }
}

/// Scalar objective used by [`check_network_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetLoss {
    /// Softmax cross-entropy on alternating labels.
    SoftmaxXent,
    /// `sum(logits * r)` for a fixed random `r`; exact for linear networks.
    Linear,
}

/// Whole-network check with softmax cross-entropy on random labels. Dropout
/// uses the same mask for every evaluation. Reports one entry per parameter
/// tensor plus one for the inputs.
pub fn check_network(
    spec: &NetworkSpec,
    batch: usize,
    seed: u64,
    max_probes: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_network_with(spec, batch, seed, max_probes, tolerance, NetLoss::SoftmaxXent)
}

pub fn check_network_with(
    spec: &NetworkSpec,
    batch: usize,
    seed: u64,
    max_probes: usize,
    tolerance: f64,
    objective: NetLoss,
) -> Result<GradCheckReport> {
    let mut net = Network::<f64>::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let inputs: Vec<Tensor<f64>> = net
        .input_shapes()
        .into_iter()
        .map(|s| random_tensor(s.with_batch(batch), &mut rng))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let classes = spec.classes()?;
    let weights = random_tensor(Shape::new(batch, 1, 1, classes), &mut rng);
    let fwd_seed = rng.next_u64();
    // A linear objective has no truncation error, so a wide step only lowers roundoff.
    let eps = match objective {
        NetLoss::SoftmaxXent => EPS,
        NetLoss::Linear => 1e-3,
    };

    let objective_of = |logits: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
        match objective {
            NetLoss::SoftmaxXent => {
                let out = softmax_xent(logits, &labels)?;
                Ok((out.loss, out.grad))
            }
            NetLoss::Linear => {
                let l = logits.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
                Ok((l, weights.clone()))
            }
        }
    };
    let loss_of = |net: &mut Network<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut frng = ChaCha8Rng::seed_from_u64(fwd_seed);
        let logits = net.forward(inputs, true, &mut frng)?;
        Ok((objective_of(&logits)?.0, net.branch_signature()))
    };

    net.zero_grad();
    let mut frng = ChaCha8Rng::seed_from_u64(fwd_seed);
    let logits = net.forward(&inputs, true, &mut frng)?;
    let base = net.branch_signature();
    let dinputs = net.backward(objective_of(&logits)?.1);
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let names = net.labelled_param_lens();

    let mut report = GradCheckReport {
        tolerance,
        entries: Vec::new(),
    };
    for (k, x) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let idx = probe_indices(x.shape().len(), max_probes, &mut rng);
        for &i in &idx {
            let numeric = smooth_difference(eps, |h| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[i] += h;
                let up = loss_of(&mut net, &perturbed)?;
                perturbed[k].data_mut()[i] -= 2.0 * h;
                let down = loss_of(&mut net, &perturbed)?;
                Ok((up, down))
            }, base)?;
            worst = worst.max(relative_error(dinputs[k].data()[i], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: format!("{}.input", spec.streams[k].name),
            max_rel_error: worst,
            probes: idx.len(),
        });
    }
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let idx = probe_indices(grad.len(), max_probes, &mut rng);
        for &i in &idx {
            let orig = net.params()[pi].value[i];
            let numeric = smooth_difference(eps, |h| {
                net.params_mut()[pi].value[i] = orig + h;
                let up = loss_of(&mut net, &inputs)?;
                net.params_mut()[pi].value[i] = orig - h;
                let down = loss_of(&mut net, &inputs)?;
                net.params_mut()[pi].value[i] = orig;
                Ok((up, down))
            }, base)?;
            worst = worst.max(relative_error(grad[i], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: names[pi].0.clone(),
            max_rel_error: worst,
            probes: idx.len(),
        });
    }
    Ok(report)
}

/// Smallest step tried when a probe straddles a ReLU or pooling kink.
const MIN_STEP: f64 = 1e-9;

/// Central difference `(L(+h) - L(-h)) / 2h`, starting at `h = step` and
/// shrinking tenfold while either side lands on a different linear piece
/// than the unperturbed input. A difference taken across a kink measures
/// neither one-sided derivative, so it says nothing about backprop.
fn smooth_difference(
    step: f64,
    mut eval: impl FnMut(f64) -> Result<((f64, u64), (f64, u64))>,
    base: u64,
) -> Result<f64> {
    let mut h = step;
    loop {
        let ((up, su), (down, sd)) = eval(h)?;
        if (su == base && sd == base) || h / 10.0 < MIN_STEP {
            return Ok((up - down) / (2.0 * h));
        }
        h /= 10.0;
    }
}

/// Layer suite followed by whole-network checks of each spec.
pub fn full_suite(specs: &[NetworkSpec], tolerance: f64, seed: u64, max_probes: usize) -> Result<GradCheckReport> {
    let mut report = layer_suite(tolerance, seed);
    for spec in specs {
        report.merge(check_network(spec, 2, seed, max_probes, tolerance)?);
    }
    Ok(report)
}
