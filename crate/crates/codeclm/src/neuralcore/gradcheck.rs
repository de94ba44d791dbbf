//! Central-difference verification of analytic gradients. 64-bit only: at 32
//! bits the difference quotient noise would swamp the thing being checked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_MAX_COORDS: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked_coords: usize,
    pub max_rel_error: f64,
}

/// Compares analytic gradients against central differences on up to
/// `max_coords` randomly chosen coordinates of `params`. `eval` must return
/// the loss and its gradients at the store's current point. Relative error
/// uses `max(|analytic|, |numeric|, 1e-6)` as the denominator.
pub fn grad_check<EvalFn>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    mut eval: EvalFn,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    EvalFn: FnMut(&ParamStore<f64>) -> Result<(f64, Gradients<f64>)>,
{
    let (base_loss, grads) = eval(store)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for &pid in params {
        for offset in 0..store.get(pid).len() {
            coords.push((pid, offset));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, coords.len(), max_coords);
        let mut sampled: Vec<(ParamId, usize)> = picked.into_iter().map(|i| coords[i]).collect();
        sampled.sort();
        coords = sampled;
    }

    let mut max_rel_error = 0.0f64;
    for &(pid, offset) in &coords {
        let original = store.get(pid).data()[offset];

        store.get_mut(pid).data_mut()[offset] = original + h;
        let (loss_plus, _) = eval(store)?;
        store.get_mut(pid).data_mut()[offset] = original - h;
        let (loss_minus, _) = eval(store)?;
        store.get_mut(pid).data_mut()[offset] = original;

        if !loss_plus.is_finite() || !loss_minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * h);
        let analytic = grads.get(pid).map_or(0.0, |g| g.data()[offset]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel_error {
            max_rel_error = rel;
        }
    }

    Ok(GradCheckReport { checked_coords: coords.len(), max_rel_error })
}
