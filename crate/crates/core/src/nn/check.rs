//! Central finite-difference checks for tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;

/// Norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖,
/// ‖numeric‖)` between analytic gradients and central differences of
/// `loss`, taken over the probed entries of all tensors together. At most
/// `max_entries` randomly chosen entries per tensor are probed.
///
/// Pooling the entries keeps tensors whose gradients sit near the
/// finite-difference noise floor from dominating the measure.
pub fn param_grad_error(
    params: &ParamStore,
    analytic: &Grads,
    max_entries: usize,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut probe = params.clone();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (id, g) in params.ids().zip(analytic.iter()) {
        let n = g.len();
        let picks = if n <= max_entries {
            (0..n).collect::<Vec<_>>()
        } else {
            index::sample(&mut rng, n, max_entries).into_vec()
        };
        for j in picks {
            let orig = probe.get(id).data[j];
            probe.get_mut(id).data[j] = orig + step;
            let up = loss(&probe);
            probe.get_mut(id).data[j] = orig - step;
            let down = loss(&probe);
            probe.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            diff += (g.data[j] - numeric).powi(2);
            na += g.data[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    relative(diff, na, nn)
}

fn relative(diff: f64, na: f64, nn: f64) -> f64 {
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Same measure for the gradient with respect to an input tensor.
pub fn input_grad_error(
    input: &Tensor,
    analytic: &Tensor,
    step: f64,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let mut probe = input.clone();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for j in 0..input.len() {
        let orig = probe.data[j];
        probe.data[j] = orig + step;
        let up = loss(&probe);
        probe.data[j] = orig - step;
        let down = loss(&probe);
        probe.data[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        diff += (analytic.data[j] - numeric).powi(2);
        na += analytic.data[j].powi(2);
        nn += numeric.powi(2);
    }
    relative(diff, na, nn)
}
