//! Monotonic rational-quadratic spline transformer: normalization of raw
//! conditioner outputs into a valid knot grid, the forward map with its
//! analytic log-derivative, and the closed-form inverse via the numerically
//! stable quadratic root.
//!
//! The spline acts on `[-B, B]` and continues as the identity outside;
//! endpoint knots sit exactly at `+/-B` on both axes and boundary derivatives
//! are pinned to 1, so value and derivative are continuous at the tail join.
//!
//! Two implementations share the same arithmetic: a scalar path on `f64`
//! (inference, sampling, quantiles) and a batched path on autodiff tensors
//! (the training objective). Their agreement is covered by tests.

use crate::autodiff::{softplus, softplus_inv, Tensor};
use crate::error::{Error, Result};

/// Minimum bin width/height in knot units, keeping slopes finite.
pub const MIN_BIN: f64 = 1e-3;

/// Shift making `softplus(raw + SHIFT) = 1` at `raw = 0`, so zero raw
/// parameters yield unit derivatives (the identity spline).
pub fn deriv_shift() -> f64 {
    softplus_inv(1.0)
}

/// One monotone rational-quadratic transformer: `M+1` knots per axis plus a
/// derivative at every knot (boundary derivatives fixed at 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SplineParams {
    pub knots_x: Vec<f64>,
    pub knots_y: Vec<f64>,
    pub derivs: Vec<f64>,
    pub bound: f64,
}

impl SplineParams {
    pub fn bins(&self) -> usize {
        self.knots_x.len() - 1
    }

    fn validate(&self) -> Result<()> {
        let m = self.bins();
        if m < 1 || self.knots_y.len() != m + 1 || self.derivs.len() != m + 1 {
            return Err(Error::Shape("inconsistent spline knot arrays".into()));
        }
        let b = self.bound;
        if self.knots_x[0] != -b || self.knots_x[m] != b || self.knots_y[0] != -b || self.knots_y[m] != b
        {
            return Err(Error::Domain("spline endpoints must sit exactly at +/-bound".into()));
        }
        for w in self.knots_x.windows(2).chain(self.knots_y.windows(2)) {
            if !(w[1] - w[0] >= MIN_BIN * (1.0 - 1e-9)) {
                return Err(Error::Domain(format!("bin of size {} below floor", w[1] - w[0])));
            }
        }
        if self.derivs.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Domain("spline derivatives must be positive".into()));
        }
        if self.derivs[0] != 1.0 || self.derivs[m] != 1.0 {
            return Err(Error::Domain("boundary derivatives must equal 1".into()));
        }
        Ok(())
    }
}

/// The epsilon-mixed softmax fraction for one axis: guarantees every bin at
/// least `MIN_BIN` wide while uniform raws stay exactly uniform.
fn mix_fractions(softmaxed: &[f64], bins: usize, bound: f64) -> Vec<f64> {
    let eps = MIN_BIN / (2.0 * bound);
    let keep = 1.0 - bins as f64 * eps;
    softmaxed.iter().map(|&p| p * keep + eps).collect()
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = raw.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.iter().map(|&e| e / sum).collect()
}

fn knots_from_raw(raw: &[f64], bins: usize, bound: f64) -> Vec<f64> {
    let fractions = mix_fractions(&softmax(raw), bins, bound);
    let mut knots = Vec::with_capacity(bins + 1);
    knots.push(-bound);
    let mut acc = -bound;
    for f in &fractions {
        acc += f * 2.0 * bound;
        knots.push(acc);
    }
    knots[bins] = bound; // pin the endpoint exactly
    knots
}

/// Turn `3M-1` raw conditioner outputs (M widths, M heights, M-1 internal
/// derivatives) into a valid knot grid.
pub fn normalize_params(raw: &[f64], bins: usize, bound: f64) -> Result<SplineParams> {
    if raw.len() != 3 * bins - 1 {
        return Err(Error::Shape(format!(
            "spline with {bins} bins needs {} raw values, got {}",
            3 * bins - 1,
            raw.len()
        )));
    }
    let knots_x = knots_from_raw(&raw[..bins], bins, bound);
    let knots_y = knots_from_raw(&raw[bins..2 * bins], bins, bound);
    let shift = deriv_shift();
    let mut derivs = Vec::with_capacity(bins + 1);
    derivs.push(1.0);
    derivs.extend(raw[2 * bins..].iter().map(|&r| softplus(r + shift)));
    derivs.push(1.0);
    let params = SplineParams { knots_x, knots_y, derivs, bound };
    params.validate()?;
    Ok(params)
}

/// Bin index in `1..=bins` such that `v` lies in `[knots[m-1], knots[m])`,
/// with exact knot hits resolved to the right-hand bin.
fn locate_bin(knots: &[f64], v: f64) -> usize {
    let idx = knots.partition_point(|&k| k <= v);
    idx.clamp(1, knots.len() - 1)
}

/// Log of the forward derivative at local coordinate `xi` in a bin with slope
/// `s` and edge derivatives `d0`, `d1`.
fn log_forward_deriv(s: f64, d0: f64, d1: f64, xi: f64) -> f64 {
    let omx = 1.0 - xi;
    let num = d1 * xi * xi + 2.0 * s * xi * omx + d0 * omx * omx;
    let den = s + (d1 + d0 - 2.0 * s) * xi * omx;
    (s * s * num).ln() - 2.0 * den.ln()
}

/// Forward map: `(y, log|dy/dz|)`. Identity with zero log-derivative outside
/// the knot range.
pub fn spline_forward(z: f64, p: &SplineParams) -> Result<(f64, f64)> {
    if z.is_nan() {
        return Err(Error::Domain("NaN input to spline".into()));
    }
    let m = p.bins();
    if z <= p.knots_x[0] || z >= p.knots_x[m] {
        return Ok((z, 0.0));
    }
    let bin = locate_bin(&p.knots_x, z);
    let (x0, x1) = (p.knots_x[bin - 1], p.knots_x[bin]);
    let (y0, y1) = (p.knots_y[bin - 1], p.knots_y[bin]);
    let (d0, d1) = (p.derivs[bin - 1], p.derivs[bin]);
    let s = (y1 - y0) / (x1 - x0);
    let xi = (z - x0) / (x1 - x0);
    let omx = 1.0 - xi;
    let num = (y1 - y0) * (s * xi * xi + d0 * xi * omx);
    let den = s + (d1 + d0 - 2.0 * s) * xi * omx;
    Ok((y0 + num / den, log_forward_deriv(s, d0, d1, xi)))
}

/// Analytic inverse: `(z, log|dz/dy|)`, solving the quadratic with the
/// stable root `2C / (-B - sqrt(B^2 - 4AC))`. Identity outside the knot
/// range. A negative discriminant signals an invalid knot grid upstream and
/// is a hard error.
pub fn spline_inverse(y: f64, p: &SplineParams) -> Result<(f64, f64)> {
    if y.is_nan() {
        return Err(Error::Domain("NaN input to spline inverse".into()));
    }
    let m = p.bins();
    if y <= p.knots_y[0] || y >= p.knots_y[m] {
        return Ok((y, 0.0));
    }
    let bin = locate_bin(&p.knots_y, y);
    let (x0, x1) = (p.knots_x[bin - 1], p.knots_x[bin]);
    let (y0, y1) = (p.knots_y[bin - 1], p.knots_y[bin]);
    let (d0, d1) = (p.derivs[bin - 1], p.derivs[bin]);
    let dy = y1 - y0;
    let s = dy / (x1 - x0);
    let y_rel = y - y0;
    let t = d1 + d0 - 2.0 * s;
    let a = dy * (s - d0) + y_rel * t;
    let b = dy * d0 - y_rel * t;
    let c = -s * y_rel;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(Error::Domain(format!(
            "negative discriminant {disc} in spline inverse: invalid parameters upstream"
        )));
    }
    let xi = 2.0 * c / (-b - disc.sqrt());
    let z = x0 + xi * (x1 - x0);
    Ok((z, -log_forward_deriv(s, d0, d1, xi)))
}

// ----- batched autodiff path --------------------------------------------------------

/// Batched knot grids for one dimension: row `r` holds the spline for
/// example `r`.
#[derive(Debug, Clone)]
pub struct SplineGraphParams {
    pub knots_x: Tensor,
    pub knots_y: Tensor,
    pub derivs: Tensor,
    pub bound: f64,
}

/// Differentiable counterpart of [`normalize_params`] on a `[n x 3M-1]`
/// block of raw conditioner outputs.
pub fn normalize_params_graph(raw: &Tensor, bins: usize, bound: f64) -> Result<SplineGraphParams> {
    if raw.cols() != 3 * bins - 1 {
        return Err(Error::Shape(format!(
            "spline with {bins} bins needs {} raw columns, got {}",
            3 * bins - 1,
            raw.cols()
        )));
    }
    let n = raw.rows();
    let eps = MIN_BIN / (2.0 * bound);
    let keep = 1.0 - bins as f64 * eps;
    let edge = Tensor::constant(n, 1, vec![-bound; n]);
    let axis = |block: Tensor| -> Result<Tensor> {
        let widths = block
            .softmax_rows()
            .scale(keep)
            .add_scalar(eps)
            .scale(2.0 * bound);
        Tensor::concat_cols(&[edge.clone(), widths.cumsum_rows().add_scalar(-bound)])
    };
    let knots_x = axis(raw.slice_cols(0, bins)?)?;
    let knots_y = axis(raw.slice_cols(bins, bins)?)?;
    let ones = Tensor::constant(n, 1, vec![1.0; n]);
    let inner = raw.slice_cols(2 * bins, bins - 1)?.add_scalar(deriv_shift()).softplus();
    let derivs = Tensor::concat_cols(&[ones.clone(), inner, ones])?;
    Ok(SplineGraphParams { knots_x, knots_y, derivs, bound })
}

/// Differentiable batched inverse of one column: returns `(z, log|dz/dy|)`
/// per row, with identity and zero log-derivative outside the knot range.
pub fn spline_inverse_graph(y: &Tensor, p: &SplineGraphParams) -> Result<(Tensor, Tensor)> {
    let n = y.rows();
    if y.cols() != 1 {
        return Err(Error::Shape(format!("expected a column, got {} cols", y.cols())));
    }
    let yv = y.data();
    let ky = p.knots_y.data();
    let cols = p.knots_y.cols();
    let bins = cols - 1;

    // Bin location and the in-range mask come from values; out-of-range rows
    // are evaluated at a safe interior point and masked back to the identity.
    let mut inside = vec![false; n];
    let mut safe = vec![0.0; n];
    let mut lo_idx = Vec::with_capacity(n);
    let mut hi_idx = Vec::with_capacity(n);
    for r in 0..n {
        let row = &ky[r * cols..(r + 1) * cols];
        let v = yv[r];
        let is_in = v > row[0] && v < row[bins];
        inside[r] = is_in;
        let probe = if is_in { v } else { 0.0 };
        safe[r] = probe;
        let bin = {
            let idx = row.partition_point(|&k| k <= probe);
            idx.clamp(1, bins)
        };
        lo_idx.push(bin - 1);
        hi_idx.push(bin);
    }

    let y_safe = y.where_mask(&inside, &Tensor::constant(n, 1, safe))?;
    let x0 = p.knots_x.select_per_row(&lo_idx)?;
    let x1 = p.knots_x.select_per_row(&hi_idx)?;
    let y0 = p.knots_y.select_per_row(&lo_idx)?;
    let y1 = p.knots_y.select_per_row(&hi_idx)?;
    let d0 = p.derivs.select_per_row(&lo_idx)?;
    let d1 = p.derivs.select_per_row(&hi_idx)?;

    let dx = x1.sub(&x0)?;
    let dy = y1.sub(&y0)?;
    let s = dy.div(&dx)?;
    let y_rel = y_safe.sub(&y0)?;
    let t = d1.add(&d0)?.sub(&s.scale(2.0))?;

    let a = dy.mul(&s.sub(&d0)?)?.add(&y_rel.mul(&t)?)?;
    let b = dy.mul(&d0)?.sub(&y_rel.mul(&t)?)?;
    let c = s.mul(&y_rel)?.neg();
    let disc = b.mul(&b)?.sub(&a.mul(&c)?.scale(4.0))?;
    if disc.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "negative discriminant in spline inverse: invalid parameters upstream".into(),
        ));
    }
    let xi = c.scale(2.0).div(&b.neg().sub(&disc.sqrt()?)?)?;
    let z_formula = x0.add(&xi.mul(&dx)?)?;

    let omx = xi.neg().add_scalar(1.0);
    let cross = xi.mul(&omx)?;
    let num = d1
        .mul(&xi.mul(&xi)?)?
        .add(&s.scale(2.0).mul(&cross)?)?
        .add(&d0.mul(&omx.mul(&omx)?)?)?;
    let den = s.add(&t.mul(&cross)?)?;
    let fwd_logderiv = s.mul(&s)?.mul(&num)?.log()?.sub(&den.log()?.scale(2.0))?;

    let z = z_formula.where_mask(&inside, y)?;
    let zeros = Tensor::constant(n, 1, vec![0.0; n]);
    let logdet = fwd_logderiv.neg().where_mask(&inside, &zeros)?;
    Ok((z, logdet))
}
