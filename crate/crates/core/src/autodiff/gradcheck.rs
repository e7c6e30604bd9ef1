use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Settings for a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Check only this many randomly chosen coordinates (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` and returns the largest relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and one tracked leaf per entry of `theta`.
pub fn check_gradients<F>(mut f: F, theta: &[Tensor], cfg: GradCheck) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(theta)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec())
        })
        .collect();

    let mut coords: Vec<(usize, usize)> = theta
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |j| (ti, j)))
        .collect();
    if let Some(limit) = cfg.max_coords {
        if limit < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let picked = rand::seq::index::sample(&mut rng, coords.len(), limit);
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut params = theta.to_vec();
    for (ti, j) in coords {
        let orig = params[ti].data()[j];
        params[ti].data_mut()[j] = orig + cfg.step;
        let plus = eval(&params)?;
        params[ti].data_mut()[j] = orig - cfg.step;
        let minus = eval(&params)?;
        params[ti].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[ti][j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
