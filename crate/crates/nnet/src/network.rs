//! Executable networks built from a [`NetworkSpec`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{Conv2d, Dense, Dropout, Layer, Lrn, MaxPool2d, Param, Relu};
use crate::loss::{softmax, softmax_xent};
use crate::spec::{InitScheme, LayerSpec, NetworkSpec};
use crate::tensor::{Real, Shape, Tensor};
use crate::{NnetError, Result};

type Stack<T> = Vec<Box<dyn Layer<T>>>;

pub struct Network<T: Real> {
    spec: NetworkSpec,
    streams: Vec<Stack<T>>,
    trunk: Stack<T>,
    stream_channels: Vec<usize>,
}

impl<T: Real> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("name", &self.spec.name)
            .field("params", &self.param_count())
            .finish()
    }
}

fn build_layer<T: Real>(spec: &LayerSpec, input: Shape) -> Box<dyn Layer<T>> {
    match *spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            pad,
        } => Box::new(Conv2d::new(input.c, out_channels, kernel, pad)),
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::MaxPool { window, stride } => Box::new(MaxPool2d::new(window, stride)),
        LayerSpec::Lrn {
            local_size,
            alpha,
            beta,
            k,
        } => Box::new(Lrn::new(local_size, alpha, beta, k)),
        LayerSpec::Fc { out_units } => Box::new(Dense::new(input.item_len(), out_units)),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(rate)),
    }
}

fn build_stack<T: Real>(layers: &[LayerSpec], mut shape: Shape) -> Result<(Stack<T>, Shape)> {
    let mut stack = Vec::with_capacity(layers.len());
    for l in layers {
        stack.push(build_layer(l, shape));
        shape = l.output_shape(shape)?;
    }
    Ok((stack, shape))
}

fn run_infer<T: Real>(stack: &Stack<T>, mut x: Tensor<T>) -> Tensor<T> {
    for l in stack {
        x = l.infer(&x);
    }
    x
}

fn run_forward<T: Real>(
    stack: &mut Stack<T>,
    mut x: Tensor<T>,
    train: bool,
    rng: &mut dyn RngCore,
) -> Tensor<T> {
    for l in stack.iter_mut() {
        x = l.forward(&x, train, rng);
    }
    x
}

fn run_backward<T: Real>(stack: &mut Stack<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for l in stack.iter_mut().rev() {
        dy = l.backward(&dy);
    }
    dy
}

/// Like [`run_backward`] but the first layer only accumulates its parameter
/// gradients; nothing reads the gradient of a network input during training.
fn run_backward_params<T: Real>(stack: &mut Stack<T>, mut dy: Tensor<T>) {
    let Some((first, rest)) = stack.split_first_mut() else {
        return;
    };
    for l in rest.iter_mut().rev() {
        dy = l.backward(&dy);
    }
    first.backward_params(&dy);
}

/// Channel-wise concatenation of equally sized NHWC tensors.
pub fn concat_channels<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let s0 = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = Shape::new(s0.n, s0.h, s0.w, c);
    let mut out = Vec::with_capacity(shape.len());
    let pixels = s0.n * s0.h * s0.w;
    for p in 0..pixels {
        for part in parts {
            let pc = part.shape().c;
            out.extend_from_slice(&part.data()[p * pc..(p + 1) * pc]);
        }
    }
    Tensor::from_vec(shape, out).expect("concat shape")
}

fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let s = x.shape();
    let pixels = s.n * s.h * s.w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(pixels * c)).collect();
    for p in 0..pixels {
        let mut off = p * s.c;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&x.data()[off..off + c]);
            off += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, s.h, s.w, c), d).expect("split shape"))
        .collect()
}

impl<T: Real> Network<T> {
    /// Builds and initialises a network. Weights are drawn from the spec's
    /// init scheme with a ChaCha stream seeded by `spec.seed`; biases start at 0.
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        let mut net = Self::uninitialised(spec)?;
        net.initialise();
        Ok(net)
    }

    fn uninitialised(spec: &NetworkSpec) -> Result<Self> {
        spec.shape_trace()?;
        let mut streams = Vec::new();
        let mut ends = Vec::new();
        for s in &spec.streams {
            let (stack, end) = build_stack(&s.layers, s.input_shape())?;
            streams.push(stack);
            ends.push(end);
        }
        let stream_channels: Vec<usize> = ends.iter().map(|e| e.c).collect();
        let trunk_in = Shape::new(1, ends[0].h, ends[0].w, stream_channels.iter().sum());
        let (trunk, _) = build_stack(&spec.trunk, trunk_in)?;
        Ok(Self {
            spec: spec.clone(),
            streams,
            trunk,
            stream_channels,
        })
    }

    fn initialise(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let scheme = self.spec.init;
        let layers = self
            .streams
            .iter_mut()
            .flat_map(|s| s.iter_mut())
            .chain(self.trunk.iter_mut());
        for layer in layers {
            let mut params = layer.params_mut();
            if params.is_empty() {
                continue;
            }
            let (weight, rest) = params.split_first_mut().expect("weight");
            let fan_in = weight.len() / rest.first().map(|b| b.len()).unwrap_or(1).max(1);
            let std = match scheme {
                InitScheme::Gaussian { std } => std,
                InitScheme::Msra => (2.0 / fan_in.max(1) as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for w in weight.value.iter_mut() {
                *w = T::from_f64_lossy(normal.sample(&mut rng));
            }
            for b in rest.iter_mut() {
                b.value.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shapes(&self) -> Vec<Shape> {
        self.spec.streams.iter().map(|s| s.input_shape()).collect()
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.streams.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "network {} expects {} inputs, got {}",
                self.spec.name,
                self.streams.len(),
                inputs.len()
            )));
        }
        let n = inputs[0].shape().n;
        for (x, s) in inputs.iter().zip(&self.spec.streams) {
            let want = s.input_shape().with_batch(n);
            if x.shape() != want {
                return Err(NnetError::ShapeMismatch(format!(
                    "stream {} expects {want} x{n}, got {} x{}",
                    s.name,
                    x.shape(),
                    x.shape().n
                )));
            }
        }
        Ok(())
    }

    /// Evaluation-mode logits. Does not touch any cached state, so a shared
    /// `&Network` can serve many threads.
    pub fn infer(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        let ends: Vec<Tensor<T>> = self
            .streams
            .iter()
            .zip(inputs)
            .map(|(s, x)| run_infer(s, x.clone()))
            .collect();
        let x = if ends.len() == 1 {
            ends.into_iter().next().expect("one stream")
        } else {
            concat_channels(&ends)
        };
        Ok(run_infer(&self.trunk, x))
    }

    /// Evaluation-mode class probabilities, row-major `n x classes`.
    pub fn predict_proba(&self, inputs: &[Tensor<T>]) -> Result<Vec<T>> {
        Ok(softmax(&self.infer(inputs)?))
    }

    /// Training-mode forward pass returning logits; caches for [`Self::backward`].
    pub fn forward(&mut self, inputs: &[Tensor<T>], train: bool, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        let mut ends = Vec::with_capacity(inputs.len());
        for (s, x) in self.streams.iter_mut().zip(inputs) {
            ends.push(run_forward(s, x.clone(), train, rng));
        }
        let x = if ends.len() == 1 {
            ends.pop().expect("one stream")
        } else {
            concat_channels(&ends)
        };
        Ok(run_forward(&mut self.trunk, x, train, rng))
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients, and returns
    /// the gradient with respect to each input.
    pub fn backward(&mut self, dlogits: Tensor<T>) -> Vec<Tensor<T>> {
        let d = run_backward(&mut self.trunk, dlogits);
        let parts = if self.streams.len() == 1 {
            vec![d]
        } else {
            split_channels(&d, &self.stream_channels)
        };
        self.streams
            .iter_mut()
            .zip(parts)
            .map(|(s, dp)| run_backward(s, dp))
            .collect()
    }

    /// Combined [`Layer::branch_signature`] of every layer after the last
    /// `forward`; equal signatures mean the same linear piece was evaluated.
    pub fn branch_signature(&self) -> u64 {
        self.streams
            .iter()
            .flat_map(|s| s.iter())
            .chain(self.trunk.iter())
            .fold(0u64, |h, l| h.rotate_left(7) ^ l.branch_signature())
    }

    /// [`Self::backward`] without the input gradients.
    pub fn backward_params(&mut self, dlogits: Tensor<T>) {
        let d = run_backward(&mut self.trunk, dlogits);
        let parts = if self.streams.len() == 1 {
            vec![d]
        } else {
            split_channels(&d, &self.stream_channels)
        };
        for (s, dp) in self.streams.iter_mut().zip(parts) {
            run_backward_params(s, dp);
        }
    }

    /// Forward + softmax cross-entropy + backward on one batch. Gradients are
    /// zeroed first. Returns the mean batch loss.
    pub fn train_batch(&mut self, inputs: &[Tensor<T>], labels: &[usize], rng: &mut dyn RngCore) -> Result<f64> {
        self.zero_grad();
        let logits = self.forward(inputs, true, rng)?;
        let out = softmax_xent(&logits, labels)?;
        self.backward_params(out.grad);
        Ok(out.loss)
    }

    /// Mean evaluation-mode cross-entropy.
    pub fn eval_loss(&self, inputs: &[Tensor<T>], labels: &[usize]) -> Result<f64> {
        let logits = self.infer(inputs)?;
        Ok(softmax_xent(&logits, labels)?.loss)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All parameters in canonical order: streams, then trunk; within a layer
    /// weight before bias.
    pub fn params(&self) -> Vec<&Param<T>> {
        self.streams
            .iter()
            .flat_map(|s| s.iter())
            .chain(self.trunk.iter())
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.streams
            .iter_mut()
            .flat_map(|s| s.iter_mut())
            .chain(self.trunk.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Parameter tensors with their owning layer label, in canonical order.
    pub fn labelled_param_lens(&self) -> Vec<(String, usize)> {
        let labels = self.spec.layer_labels();
        let layers = self.streams.iter().flat_map(|s| s.iter()).chain(self.trunk.iter());
        let mut out = Vec::new();
        for (label, l) in labels.iter().zip(layers) {
            for (i, p) in l.params().into_iter().enumerate() {
                let suffix = if i == 0 { "weight" } else { "bias" };
                out.push((format!("{label}.{suffix}"), p.len()));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flattened parameter values converted to `f32`.
    pub fn export_f32(&self) -> Vec<f32> {
        self.params()
            .iter()
            .flat_map(|p| p.value.iter().map(|v| v.to_f64_lossy() as f32))
            .collect()
    }

    /// Loads a flat `f32` parameter vector in canonical order.
    pub fn import_f32(&mut self, flat: &[f32]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(NnetError::ShapeMismatch(format!(
                "network {} has {total} parameters, blob has {}",
                self.spec.name,
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            for v in p.value.iter_mut() {
                *v = T::from_f64_lossy(f64::from(flat[off]));
                off += 1;
            }
        }
        Ok(())
    }

    /// Builds a network carrying the given parameters (no random init).
    pub fn from_params(spec: &NetworkSpec, flat: &[f32]) -> Result<Self> {
        let mut net = Self::uninitialised(spec)?;
        net.import_f32(flat)?;
        Ok(net)
    }

    /// Direct access to a layer for diagnostics and tests.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Box<dyn Layer<T>>> {
        self.streams
            .iter_mut()
            .flat_map(|s| s.iter_mut())
            .chain(self.trunk.iter_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::StreamSpec;

    fn two_stream() -> NetworkSpec {
        let tower = |name: &str, c| StreamSpec {
            name: name.into(),
            input: [5, 5, c],
            layers: vec![LayerSpec::conv3(3), LayerSpec::Relu],
        };
        NetworkSpec {
            name: "fuse".into(),
            streams: vec![tower("a", 2), tower("b", 1)],
            trunk: vec![LayerSpec::conv1x1(4), LayerSpec::Relu, LayerSpec::Fc { out_units: 2 }],
            init: InitScheme::Msra,
            seed: 3,
        }
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = Tensor::from_vec(Shape::new(2, 1, 2, 2), (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(Shape::new(2, 1, 2, 1), (100..104).map(f64::from).collect()).unwrap();
        let cat = concat_channels(&[a.clone(), b.clone()]);
        assert_eq!(&cat.data()[..3], &[0.0, 1.0, 100.0]);
        let parts = split_channels(&cat, &[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn parameter_only_backward_matches_full_backward() {
        let mut spec = two_stream();
        spec.streams[0].layers.push(LayerSpec::lrn_default());
        let inputs = [
            Tensor::from_vec(Shape::new(3, 5, 5, 2), (0..150).map(|i| (i % 11) as f32 / 5.0 - 1.0).collect()).unwrap(),
            Tensor::from_vec(Shape::new(3, 5, 5, 1), (0..75).map(|i| (i % 7) as f32 / 3.0 - 1.0).collect()).unwrap(),
        ];
        let grads = |full: bool| {
            let mut net = Network::<f32>::new(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let logits = net.forward(&inputs, true, &mut rng).unwrap();
            let d = softmax_xent(&logits, &[0, 1, 1]).unwrap().grad;
            if full {
                net.backward(d);
            } else {
                net.backward_params(d);
            }
            net.params().iter().flat_map(|p| p.grad.iter().map(|g| g.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(grads(true), grads(false));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f32>::new(&two_stream()).unwrap();
        let b = Network::<f32>::new(&two_stream()).unwrap();
        assert_eq!(a.export_f32(), b.export_f32());
        let mut other = two_stream();
        other.seed = 4;
        assert_ne!(a.export_f32(), Network::<f32>::new(&other).unwrap().export_f32());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = Network::<f32>::new(&two_stream()).unwrap();
        let xa = Tensor::from_vec(Shape::new(3, 5, 5, 2), (0..150).map(|v| (v % 7) as f32).collect()).unwrap();
        let xb = Tensor::from_vec(Shape::new(3, 5, 5, 1), (0..75).map(|v| (v % 5) as f32).collect()).unwrap();
        let p = net.predict_proba(&[xa, xb]).unwrap();
        for row in p.chunks(2) {
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_input_count() {
        let net = Network::<f32>::new(&two_stream()).unwrap();
        let xa = Tensor::zeros(Shape::new(1, 5, 5, 2));
        assert!(net.infer(&[xa]).is_err());
    }

    #[test]
    fn param_count_matches_spec() {
        let spec = two_stream();
        let net = Network::<f64>::new(&spec).unwrap();
        assert_eq!(net.param_count(), spec.param_count().unwrap());
    }
}
