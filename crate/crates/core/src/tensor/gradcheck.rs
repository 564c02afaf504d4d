//! Central finite-difference checks for graphs built over a [`ParamSet`].
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`; the floor keeps
//! coordinates whose true gradient is zero from dividing by zero.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamSet, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub points: usize,
    pub max_rel_err: f64,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.points += other.points;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `build` against
/// central differences at `points` randomly chosen parameter coordinates.
pub fn check_params<F>(params: &ParamSet<f64>, build: F, points: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::with_params(ps);
        let out = build(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::with_params(params);
    let out = build(&mut g)?;
    let analytic = g.backward_scalar(out)?.into_param_grads(params);

    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| (0..params.at(p).len()).map(move |j| (p, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        points: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = params.clone();
    for _ in 0..points {
        let &(p, j) = if coords.len() <= points {
            &coords[rng.random_range(0..coords.len())]
        } else {
            coords.choose(&mut rng).expect("non-empty")
        };
        let orig = work.at(p).data()[j];
        work.at_mut(p).data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work.at_mut(p).data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work.at_mut(p).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.at(p).data()[j];
        let err = relative_error(a, numeric);
        report.points += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((params.name(p).to_string(), j, a, numeric));
        }
    }
    Ok(report)
}
