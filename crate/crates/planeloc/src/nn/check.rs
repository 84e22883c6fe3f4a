//! Central-difference gradient verification.
//!
//! The numeric side only ever calls `forward`/`forward_seq` plus the loss,
//! so it exercises a code path fully independent of the handwritten
//! backward implementations it judges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grad, ForwardCache, LossKind, Network, NnError, Tensor};

/// One checked coordinate: parameter tensor index, flat coordinate, and the
/// two gradient estimates.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.samples.len()
    }
}

fn eval_loss(net: &Network, inputs: &[Tensor], target: &Tensor, loss: LossKind) -> Result<f64, NnError> {
    let mut cache = ForwardCache::new();
    if net.spec().is_recurrent() {
        net.forward_seq(inputs, &mut cache)?;
    } else {
        net.forward(&inputs[0], &mut cache)?;
    }
    Ok(loss_and_grad(loss, cache.output()?, target)?.0)
}

/// Compares analytic gradients against central finite differences on
/// `coords_per_tensor` randomly sampled coordinates of every parameter
/// tensor. `inputs` is the single input for feedforward nets or the step
/// sequence for recurrent ones.
pub fn check_gradients(
    net: &Network,
    inputs: &[Tensor],
    target: &Tensor,
    loss: LossKind,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut cache = ForwardCache::new();
    let mut grads = net.zero_grads();
    if net.spec().is_recurrent() {
        net.forward_seq(inputs, &mut cache)?;
        let (_, upstream) = loss_and_grad(loss, cache.output()?, target)?;
        net.backward_seq(&cache, &upstream, &mut grads)?;
    } else {
        net.forward(&inputs[0], &mut cache)?;
        let (_, upstream) = loss_and_grad(loss, cache.output()?, target)?;
        net.backward(&cache, &upstream, &mut grads)?;
    }

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut probe = net.clone();
    for ti in 0..net.params().len() {
        let len = net.params()[ti].len();
        for _ in 0..coords_per_tensor.min(len) {
            let ci = rng.gen_range(0..len);
            let original = net.params()[ti].data()[ci];
            probe.params_mut()[ti].data_mut()[ci] = original + h;
            let plus = eval_loss(&probe, inputs, target, loss)?;
            probe.params_mut()[ti].data_mut()[ci] = original - h;
            let minus = eval_loss(&probe, inputs, target, loss)?;
            probe.params_mut()[ti].data_mut()[ci] = original;
            samples.push(GradSample {
                tensor: ti,
                coord: ci,
                analytic: grads[ti].data()[ci],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(GradCheckReport { samples })
}
