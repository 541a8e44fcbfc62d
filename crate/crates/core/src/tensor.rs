//! Dense row-major `f64` tensors and the stable softmax primitives the losses
//! are built from.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("softmax needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("channel group is empty")]
    EmptyGroup,
    #[error("channel {channel} out of range for {channels} channels")]
    ChannelOutOfRange { channel: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the innermost axis.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Rows of the innermost axis, one per pixel for `..×C` tensors.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index, value: self.data[index] }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `log Σ exp(z)` with the max shifted out.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `log Σ_{k∈group} exp(z_k)`.
pub fn logsumexp_group(z: &[f64], group: &[usize]) -> f64 {
    let m = group.iter().map(|&k| z[k]).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + group.iter().map(|&k| (z[k] - m).exp()).sum::<f64>().ln()
}

/// Softmax of one pixel's logits into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax over the innermost (channel) axis of `logits`.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor, TensorError> {
    let c = logits.channels();
    if c < 2 {
        return Err(TensorError::TooFewChannels(c));
    }
    logits.check_finite()?;
    let mut out = Tensor::zeros(logits.shape.clone());
    for (z, o) in logits.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        softmax_into(z, o);
    }
    Ok(out)
}

/// `log Σ_{k∈group} softmax(z)_k`, computed as a difference of two
/// log-sum-exps so small probabilities are never formed.
pub fn log_group_prob(logits: &[f64], group: &[usize]) -> Result<f64, TensorError> {
    if group.is_empty() {
        return Err(TensorError::EmptyGroup);
    }
    if let Some(&channel) = group.iter().find(|&&k| k >= logits.len()) {
        return Err(TensorError::ChannelOutOfRange { channel, channels: logits.len() });
    }
    if group.len() == logits.len() {
        return Ok(0.0);
    }
    Ok((logsumexp_group(logits, group) - logsumexp(logits)).min(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(z: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, z.len()], z.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_channels(&px(&[0.0, 0.0, 0.0])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_channels(&px(&[1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        // Reference values evaluated independently at high precision.
        let s = softmax_channels(&px(&[1.0, 2.0, 3.0])).unwrap();
        for (v, want) in s.data().iter().zip([0.09003057317038046, 0.24472847105479764, 0.6652409557748219]) {
            assert!((v - want).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert_eq!(softmax_channels(&px(&[1.0])), Err(TensorError::TooFewChannels(1)));
        assert!(matches!(softmax_channels(&px(&[1.0, f64::NAN])), Err(TensorError::NonFinite { index: 1, .. })));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn group_prob_examples() {
        assert_eq!(log_group_prob(&[0.3, -2.0, 5.0], &[0, 1, 2]).unwrap(), 0.0);
        let v = log_group_prob(&[0.0; 4], &[0, 1]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        let z = [1.0, 2.0, 3.0];
        let single = log_group_prob(&z, &[1]).unwrap();
        assert!((single - (2.0 - logsumexp(&z))).abs() < 1e-15);
        assert_eq!(log_group_prob(&z, &[]), Err(TensorError::EmptyGroup));
        assert!(log_group_prob(&z, &[3]).is_err());
    }

    #[test]
    fn group_prob_keeps_precision_at_tiny_probabilities() {
        // softmax_0 = e^-800 / (1 + e^-800) underflows to 0; the log form does not.
        let v = log_group_prob(&[-800.0, 0.0], &[0]).unwrap();
        assert!((v + 800.0).abs() < 1e-9);
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-30.0f64..30.0, 2..8)
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(z in logits(), shift in -50.0f64..50.0) {
            let a = softmax_channels(&px(&z)).unwrap();
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let b = softmax_channels(&px(&zs)).unwrap();
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12 * x);
            }
        }

        #[test]
        fn group_prob_matches_summed_softmax(z in logits(), bits in any::<u8>()) {
            let c = z.len();
            let mut group: Vec<usize> = (0..c).filter(|k| bits & (1 << k) != 0).collect();
            if group.is_empty() {
                group.push(0);
            }
            let lp = log_group_prob(&z, &group).unwrap();
            let mut q = vec![0.0; c];
            softmax_into(&z, &mut q);
            let direct: f64 = group.iter().map(|&k| q[k]).sum::<f64>().ln();
            prop_assert!(lp <= 0.0);
            prop_assert!((lp - direct).abs() <= 1e-10);
            // Adding a channel never lowers the group probability.
            if let Some(extra) = (0..c).find(|k| !group.contains(k)) {
                let mut bigger = group.clone();
                bigger.push(extra);
                prop_assert!(log_group_prob(&z, &bigger).unwrap() >= lp);
            }
        }
    }
}
