//! Naive reference models: climatology (unconditional empirical density of
//! the training targets) and MuPEn (uniform resampling without replacement
//! from historical scenarios).

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::ScenarioSet;

/// Sorted training target values.
#[derive(Debug, Clone)]
pub struct EmpiricalDist {
    sorted: Vec<f64>,
}

impl EmpiricalDist {
    pub fn new(values: &[f64]) -> Result<EmpiricalDist> {
        if values.is_empty() {
            return Err(Error::Data("empirical distribution needs at least one value".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in empirical distribution".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(EmpiricalDist { sorted })
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// Linear-interpolation empirical quantile, type-7 convention:
/// `h = (n-1) * alpha`.
pub fn climatology_quantile(dist: &EmpiricalDist, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("quantile level {alpha} outside (0,1)")));
    }
    let v = &dist.sorted;
    let h = (v.len() - 1) as f64 * alpha;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < v.len() {
        Ok(v[i] + frac * (v[i + 1] - v[i]))
    } else {
        Ok(v[i])
    }
}

/// Draw `count` distinct rows of the history matrix, uniformly without
/// replacement, under the caller's seeded generator.
pub fn mupen_sample(history: &Matrix, count: usize, rng: &mut impl Rng) -> Result<ScenarioSet> {
    let n = history.rows();
    if count == 0 {
        return Err(Error::Config("scenario count must be >= 1".into()));
    }
    if count > n {
        return Err(Error::Config(format!(
            "cannot draw {count} scenarios without replacement from {n} historical rows"
        )));
    }
    let picked = rand::seq::index::sample(rng, n, count);
    let indices: Vec<usize> = picked.into_iter().collect();
    ScenarioSet::new(history.take_rows(&indices))
}
