//! Central finite differences against the reverse sweep.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParameterSet};
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Check only this many randomly chosen coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, floor)` over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` with central differences.
///
/// `f` receives a fresh graph and the bound parameters and must return a
/// scalar; it is re-evaluated twice per checked coordinate.
pub fn gradient_check<T, F>(f: F, params: &ParameterSet<T>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let analytic = bound.grads(params, &grads);
    drop(g);

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |j| (pi, j)))
        .collect();
    if let Some(k) = opts.max_coords {
        if k < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), k).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let eval = |p: &ParameterSet<T>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item().to_f64())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: coords.len(),
    };
    for (pi, j) in coords {
        let id = ParamId(pi);
        let orig = work.by_id(id).data()[j];
        work.by_id_mut(id).data_mut()[j] = T::of(orig.to_f64() + opts.step);
        let plus = eval(&work)?;
        work.by_id_mut(id).data_mut()[j] = T::of(orig.to_f64() - opts.step);
        let minus = eval(&work)?;
        work.by_id_mut(id).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[pi].data()[j].to_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((params.name_of(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
