//! Proper scoring rules and calibration diagnostics: CRPS, energy score,
//! variogram score, reliability diagram, and prediction-interval width.
//! Scores are per forecast instance; callers average over the test set.

use crate::error::{Error, Result};
use crate::flow::ForecastDensity;
use crate::matrix::Matrix;

/// S joint draws of a d-dimensional target.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    draws: Matrix,
}

impl ScenarioSet {
    pub fn new(draws: Matrix) -> Result<ScenarioSet> {
        if draws.rows() == 0 {
            return Err(Error::Data("a scenario set needs at least one draw".into()));
        }
        if draws.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite scenario value".into()));
        }
        Ok(ScenarioSet { draws })
    }

    pub fn draws(&self) -> &Matrix {
        &self.draws
    }

    /// Number of scenarios S.
    pub fn count(&self) -> usize {
        self.draws.rows()
    }

    pub fn dim(&self) -> usize {
        self.draws.cols()
    }
}

/// Nominal quantile levels against observed coverage proportions.
#[derive(Debug, Clone)]
pub struct ReliabilityCurve {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
}

impl ReliabilityCurve {
    pub fn max_deviation(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.observed)
            .map(|(l, o)| (l - o).abs())
            .fold(0.0, f64::max)
    }
}

/// The levels grid used for reliability diagrams: 0.05 to 0.95 step 0.05.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// CRPS by quadrature of `(F(y) - H(y - y_obs))^2` with the unit-step
/// discontinuity handled by splitting the integral at the observation:
/// `F^2` below, `(F-1)^2` above, trapezoid with `points` nodes total.
pub fn crps_from_cdf(
    cdf: impl Fn(f64) -> Result<f64>,
    span: (f64, f64),
    y_obs: f64,
    points: usize,
) -> Result<f64> {
    let (lo, hi) = (span.0.min(y_obs), span.1.max(y_obs));
    if points < 3 || hi <= lo {
        return Err(Error::Config("quadrature needs a span and at least 3 points".into()));
    }
    let total = hi - lo;
    let n_left = (((y_obs - lo) / total) * (points - 1) as f64).round() as usize;
    let n_left = n_left.clamp(1, points - 2);
    let n_right = points - 1 - n_left;

    let integrate = |a: f64, b: f64, cells: usize, shift: f64| -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        let h = (b - a) / cells as f64;
        let mut acc = 0.0;
        for i in 0..=cells {
            let y = a + i as f64 * h;
            let f = cdf(y)? - shift;
            let term = f * f;
            acc += if i == 0 || i == cells { 0.5 * term } else { term };
        }
        Ok(acc * h)
    };
    Ok(integrate(lo, y_obs, n_left, 0.0)? + integrate(y_obs, hi, n_right, 1.0)?)
}

/// CRPS of a univariate flow density, integrating its exact CDF over the
/// predictive support on 2001 points.
pub fn crps_quadrature(density: &ForecastDensity, y_obs: f64) -> Result<f64> {
    let span = density.support_span(1e-7)?;
    crps_from_cdf(|y| density.cdf(y), span, y_obs, 2001)
}

/// Sample-based CRPS estimator
/// `(1/S) sum |y_i - y| - 1/(2 S^2) sum sum |y_i - y_j|`.
///
/// This is the energy score at d=1 and shares its summation order exactly.
pub fn crps_samples(draws: &[f64], y_obs: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::Config("sample CRPS needs at least 2 draws".into()));
    }
    let scen = ScenarioSet::new(Matrix::new(draws.len(), 1, draws.to_vec())?)?;
    energy_score(&scen, &[y_obs])
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy score of a scenario set against one observation.
pub fn energy_score(scen: &ScenarioSet, y_obs: &[f64]) -> Result<f64> {
    if y_obs.len() != scen.dim() {
        return Err(Error::Shape(format!(
            "observation has {} dims, scenarios {}",
            y_obs.len(),
            scen.dim()
        )));
    }
    let s = scen.count();
    let mut to_obs = 0.0;
    for i in 0..s {
        to_obs += euclid(scen.draws.row(i), y_obs);
    }
    let mut between = 0.0;
    for i in 0..s {
        for j in 0..s {
            if i != j {
                between += euclid(scen.draws.row(i), scen.draws.row(j));
            }
        }
    }
    Ok(to_obs / s as f64 - between / (2.0 * (s * s) as f64))
}

/// Variogram score of order `p` (0.5 in this artifact), full double sum over
/// ordered dimension pairs.
pub fn variogram_score(scen: &ScenarioSet, y_obs: &[f64], p: f64) -> Result<f64> {
    if y_obs.len() != scen.dim() {
        return Err(Error::Shape(format!(
            "observation has {} dims, scenarios {}",
            y_obs.len(),
            scen.dim()
        )));
    }
    let d = scen.dim();
    let s = scen.count();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            let obs_term = (y_obs[i] - y_obs[j]).abs().powf(p);
            let mut mean_term = 0.0;
            for r in 0..s {
                let row = scen.draws.row(r);
                mean_term += (row[i] - row[j]).abs().powf(p);
            }
            mean_term /= s as f64;
            let diff = obs_term - mean_term;
            total += diff * diff;
        }
    }
    Ok(total)
}

/// Observed coverage per nominal level: the fraction of rows with
/// `y_t <= q_t(level)`. `quantiles` is `[times x levels]`.
pub fn reliability(
    quantiles: &Matrix,
    observations: &[f64],
    levels: &[f64],
) -> Result<ReliabilityCurve> {
    if quantiles.rows() != observations.len() {
        return Err(Error::Shape(format!(
            "{} quantile rows vs {} observations",
            quantiles.rows(),
            observations.len()
        )));
    }
    if quantiles.cols() != levels.len() {
        return Err(Error::Shape(format!(
            "{} quantile columns vs {} levels",
            quantiles.cols(),
            levels.len()
        )));
    }
    if observations.is_empty() {
        return Err(Error::Data("reliability needs at least one observation".into()));
    }
    let n = observations.len() as f64;
    let observed = (0..levels.len())
        .map(|c| {
            let covered = observations
                .iter()
                .enumerate()
                .filter(|(r, &y)| y <= quantiles.get(*r, c))
                .count();
            covered as f64 / n
        })
        .collect();
    Ok(ReliabilityCurve { levels: levels.to_vec(), observed })
}

/// Mean width of a prediction-interval series. Ties are allowed; a crossing
/// pair is an error.
pub fn pi_width(lower: &[f64], upper: &[f64]) -> Result<f64> {
    if lower.len() != upper.len() {
        return Err(Error::Shape(format!(
            "{} lower bounds vs {} upper bounds",
            lower.len(),
            upper.len()
        )));
    }
    if lower.is_empty() {
        return Err(Error::Data("empty interval series".into()));
    }
    let mut total = 0.0;
    for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
        if l > u {
            return Err(Error::Data(format!("crossing interval at row {i}: {l} > {u}")));
        }
        total += u - l;
    }
    Ok(total / lower.len() as f64)
}
