use crate::tensor::{Real, Shape, Tensor};

/// Output of [`softmax_xent`].
#[derive(Debug, Clone)]
pub struct SoftmaxXent<T> {
    /// Row-major `n x classes` probabilities.
    pub probs: Vec<T>,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss w.r.t. the logits, shaped like the logits.
    pub grad: Tensor<T>,
}

/// Softmax followed by multinomial cross-entropy, averaged over the batch.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> crate::Result<SoftmaxXent<T>> {
    let s = logits.shape();
    let classes = s.item_len();
    if labels.len() != s.n {
        return Err(crate::NnetError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(crate::NnetError::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax(logits);
    let inv_n = T::from_f64_lossy(1.0 / s.n.max(1) as f64);
    let mut grad = Tensor::zeros(Shape::new(s.n, s.h, s.w, s.c));
    let mut loss = 0.0;
    for (&label, (p, g)) in labels
        .iter()
        .zip(probs.chunks_exact(classes).zip(grad.data_mut().chunks_exact_mut(classes)))
    {
        loss -= p[label].to_f64_lossy().max(f64::MIN_POSITIVE).ln();
        for (c, (gv, &pv)) in g.iter_mut().zip(p).enumerate() {
            let target = if c == label { T::one() } else { T::zero() };
            *gv = (pv - target) * inv_n;
        }
    }
    Ok(SoftmaxXent {
        probs,
        loss: loss / s.n.max(1) as f64,
        grad,
    })
}

/// Row-wise softmax of `n x classes` logits, max-shifted for stability.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Vec<T> {
    let classes = logits.shape().item_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
