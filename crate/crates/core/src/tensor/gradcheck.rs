//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Parameters with more coordinates than this are subsampled.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares autograd gradients of `f` against `(f(x+eps) - f(x-eps)) / 2eps`
/// for every coordinate of `params`, or a seeded subsample of large ones.
///
/// `f` must rebuild its graph on each call and be deterministic.
pub fn check_gradients(f: impl Fn() -> Tensor, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    if !loss.all_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {:?}", loss.to_vec())));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let eval = || -> Result<f64> {
        let v = no_grad(&f).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective at a perturbed point".into()))
        }
    };

    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n > cfg.max_coords_per_param {
            let mut c = sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        for c in coords {
            let orig = p.data()[c];
            p.update_data(|d| d[c] = orig + cfg.eps);
            let plus = eval();
            p.update_data(|d| d[c] = orig - cfg.eps);
            let minus = eval();
            p.update_data(|d| d[c] = orig);
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((pi, c));
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        passed: max_rel < cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BackwardFn;

    #[test]
    fn linear_function_matches_tightly() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().trainable();
        let w = Tensor::new(&[3], vec![3.0, -2.0, 0.25]).unwrap();
        let cfg = GradCheckConfig {
            tol: 1e-9,
            ..Default::default()
        };
        let r = check_gradients(|| x.mul(&w).unwrap().sum(), &[x.clone()], &cfg).unwrap();
        assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::new(&[2], vec![0.3, 0.7]).unwrap().trainable();
        // square with a backward rule that forgets the factor 2
        let bad_square = |x: &Tensor| {
            let data = x.data().iter().map(|v| v * v).collect();
            let backward: BackwardFn = Box::new(|g, _, parents| {
                let x = parents[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g * x).collect())]
            });
            Tensor::from_op(vec![2], data, vec![x.clone()], backward)
        };
        let r = check_gradients(|| bad_square(&x).sum(), &[x.clone()], &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_objective_is_diagnosed() {
        let x = Tensor::scalar(1.0).trainable();
        let r = check_gradients(|| x.scale(f64::INFINITY), &[x.clone()], &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
