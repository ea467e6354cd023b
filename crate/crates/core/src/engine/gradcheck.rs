use super::params::Bound;
use super::{Graph, ModelParams, Var};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    // Below 1e-6 in magnitude the comparison is absolute.
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` builds a scalar loss from bound parameters. Every coordinate is
/// checked unless `max_coords` is set, in which case a seeded random
/// subsample of that size is used.
pub fn grad_check<F>(
    params: &ModelParams<f64>,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    if !g.value(loss).all_finite() {
        return Err(Error::Numerical("grad_check: loss".into()));
    }
    g.backward(loss)?;
    let mut analytic = params.clone();
    analytic.collect_grads(&g, &bound);

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = match max_coords {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = f(&mut g, &b)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numerical("grad_check: perturbed loss".into()));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: chosen.len(),
        worst: None,
    };
    for ci in chosen {
        let (name, idx) = &coords[ci];
        let orig = work.get(name).expect("known").value.data()[*idx];
        work.get_mut(name).expect("known").value.data_mut()[*idx] = orig + eps;
        let up = eval(&work)?;
        work.get_mut(name).expect("known").value.data_mut()[*idx] = orig - eps;
        let down = eval(&work)?;
        work.get_mut(name).expect("known").value.data_mut()[*idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(name).and_then(|p| p.grad.as_ref()).expect("collected").data()[*idx];
        let err = rel_error(a, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), *idx));
        }
    }
    Ok(report)
}
