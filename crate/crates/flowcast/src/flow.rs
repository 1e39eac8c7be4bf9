//! Conditional normalizing flow: a context-dependent Gaussian base
//! distribution composed with K invertible transforms.
//!
//! The inverse pass (training direction) is vectorizable because every
//! conditioner input is already available; the forward pass (sampling
//! direction) generates coordinates sequentially. Affine and affine+sigmoid
//! transformer kinds realize the Gaussian (NN-G) and logit-normal (NN-L)
//! baselines inside the same machinery.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, softplus, Tensor};
use crate::base_dist::{self, GaussianParams, LN_2PI, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::ScenarioSet;
use crate::nets::{build_additive_conditioner, Conditioner, MaskedMlp, Mlp, Permutation};
use crate::rq_spline::{
    normalize_params, normalize_params_graph, spline_forward, spline_inverse,
    spline_inverse_graph, SplineParams,
};

/// Clamp keeping the logit finite on (0,1)-valued data.
const SIGMOID_EPS: f64 = 1e-12;

/// Elementwise monotone transformer applied per dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformerKind {
    RationalQuadratic { bins: usize, bound: f64 },
    Affine,
    Sigmoid,
}

impl TransformerKind {
    /// Raw conditioner outputs consumed per dimension.
    pub fn params_per_dim(&self) -> usize {
        match self {
            TransformerKind::RationalQuadratic { bins, .. } => 3 * bins - 1,
            TransformerKind::Affine => 2,
            TransformerKind::Sigmoid => 0,
        }
    }
}

/// One flow step: a permutation, then an autoregressive elementwise
/// transformer whose parameters come from the conditioner.
#[derive(Debug, Clone)]
pub struct Transform {
    pub conditioner: Conditioner,
    pub kind: TransformerKind,
    pub permutation: Permutation,
}

/// Base distribution of `z^(0)`.
#[derive(Debug, Clone)]
pub enum BaseDist {
    /// Fixed N(0, I); kept as an ablation knob.
    Standard,
    /// Context-dependent diagonal Gaussian via the shape-parameter net.
    Learned(Mlp),
}

/// Affine pre-map coupling bounded data to the spline interval. Targets in
/// `[0,1]` are stretched to `[-(bound-margin), bound-margin]` before the flow
/// and mapped back after sampling; the constant log-determinant is accounted
/// in every density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupportMap {
    Identity,
    Unit { bound: f64, margin: f64 },
}

impl SupportMap {
    fn scale(&self) -> f64 {
        match self {
            SupportMap::Identity => 1.0,
            SupportMap::Unit { bound, margin } => 2.0 * (bound - margin),
        }
    }

    fn offset(&self) -> f64 {
        match self {
            SupportMap::Identity => 0.0,
            SupportMap::Unit { bound, margin } => -(bound - margin),
        }
    }

    /// Data units to flow units.
    pub fn to_flow(&self, y: f64) -> f64 {
        self.scale() * y + self.offset()
    }

    /// Flow units back to data units.
    pub fn from_flow(&self, v: f64) -> f64 {
        (v - self.offset()) / self.scale()
    }

    /// `log |d to_flow / dy|` per coordinate.
    pub fn log_det(&self) -> f64 {
        self.scale().ln()
    }
}

/// Conditional normalizing flow over `dim` target dimensions.
#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    dim: usize,
    ctx_dim: usize,
    base: BaseDist,
    transforms: Vec<Transform>,
    support: SupportMap,
}

/// Architecture knobs for the stock constructors.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub dim: usize,
    pub ctx_dim: usize,
    pub transforms: usize,
    pub base_hidden: Vec<usize>,
    pub cond_hidden: Vec<usize>,
    pub bins: usize,
    pub bound: f64,
    pub standard_base: bool,
    pub support: SupportMap,
    pub permute: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 1,
            ctx_dim: 1,
            transforms: 5,
            base_hidden: vec![512, 512],
            cond_hidden: vec![256, 256],
            bins: 10,
            bound: 5.0,
            standard_base: false,
            support: SupportMap::Identity,
            permute: true,
            seed: 0,
        }
    }
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 1 || self.ctx_dim < 1 || self.transforms < 1 {
            return Err(Error::Config("dim, ctx_dim, and transforms must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("a spline needs at least 2 bins".into()));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Config("spline bound must be positive".into()));
        }
        Ok(())
    }

    fn conditioner(&self, kind: TransformerKind, rng: &mut impl Rng) -> Result<Conditioner> {
        let per = kind.params_per_dim();
        if per == 0 {
            return Ok(Conditioner::None);
        }
        let mut ctx_dims = vec![self.ctx_dim];
        ctx_dims.extend_from_slice(&self.cond_hidden);
        ctx_dims.push(self.dim * per);
        let ctx = Mlp::new(&ctx_dims, rng);
        if self.dim == 1 {
            Ok(Conditioner::Context(ctx))
        } else {
            let made = MaskedMlp::new(self.dim, 0, &self.cond_hidden, per, rng);
            build_additive_conditioner(made, ctx)
        }
    }

    fn base(&self, rng: &mut impl Rng) -> BaseDist {
        if self.standard_base {
            BaseDist::Standard
        } else {
            let mut dims = vec![self.ctx_dim];
            dims.extend_from_slice(&self.base_hidden);
            dims.push(2 * self.dim);
            BaseDist::Learned(Mlp::new(&dims, rng))
        }
    }

    fn permutation(&self) -> Permutation {
        if self.permute && self.dim > 1 {
            Permutation::reversal(self.dim)
        } else {
            Permutation::identity(self.dim)
        }
    }
}

/// K rational-quadratic spline transforms over the learned Gaussian base.
pub fn make_spline_flow(cfg: &FlowConfig) -> Result<ConditionalFlow> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kind = TransformerKind::RationalQuadratic { bins: cfg.bins, bound: cfg.bound };
    let transforms = (0..cfg.transforms)
        .map(|_| {
            Ok(Transform {
                conditioner: cfg.conditioner(kind, &mut rng)?,
                kind,
                permutation: cfg.permutation(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalFlow {
        dim: cfg.dim,
        ctx_dim: cfg.ctx_dim,
        base: cfg.base(&mut rng),
        transforms,
        support: cfg.support,
    })
}

/// K affine transforms: the Gaussian baseline (NN-G).
pub fn make_affine_flow(cfg: &FlowConfig) -> Result<ConditionalFlow> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let transforms = (0..cfg.transforms)
        .map(|_| {
            Ok(Transform {
                conditioner: cfg.conditioner(TransformerKind::Affine, &mut rng)?,
                kind: TransformerKind::Affine,
                permutation: cfg.permutation(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalFlow {
        dim: cfg.dim,
        ctx_dim: cfg.ctx_dim,
        base: cfg.base(&mut rng),
        transforms,
        support: SupportMap::Identity,
    })
}

/// K affine transforms behind a fixed elementwise sigmoid: the logit-normal
/// baseline (NN-L). Outputs live in (0,1).
pub fn make_logit_flow(cfg: &FlowConfig) -> Result<ConditionalFlow> {
    let mut flow = make_affine_flow(cfg)?;
    flow.transforms.push(Transform {
        conditioner: Conditioner::None,
        kind: TransformerKind::Sigmoid,
        permutation: Permutation::identity(cfg.dim),
    });
    Ok(flow)
}

/// Scalar transformer application: `(out, log|d out / d in|)`.
fn transformer_forward(kind: TransformerKind, raw: &[f64], u: f64) -> Result<(f64, f64)> {
    match kind {
        TransformerKind::RationalQuadratic { bins, bound } => {
            let p = normalize_params(raw, bins, bound)?;
            spline_forward(u, &p)
        }
        TransformerKind::Affine => {
            let scale = softplus(raw[1]) + SIGMA_FLOOR;
            Ok((scale * u + raw[0], scale.ln()))
        }
        TransformerKind::Sigmoid => {
            let w = sigmoid(u);
            Ok((w, w.ln() + (1.0 - w).ln()))
        }
    }
}

fn transformer_inverse(kind: TransformerKind, raw: &[f64], w: f64) -> Result<(f64, f64)> {
    match kind {
        TransformerKind::RationalQuadratic { bins, bound } => {
            let p = normalize_params(raw, bins, bound)?;
            spline_inverse(w, &p)
        }
        TransformerKind::Affine => {
            let scale = softplus(raw[1]) + SIGMA_FLOOR;
            Ok(((w - raw[0]) / scale, -scale.ln()))
        }
        TransformerKind::Sigmoid => {
            let wc = w.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
            Ok(((wc / (1.0 - wc)).ln(), -(wc.ln() + (1.0 - wc).ln())))
        }
    }
}

fn raw_block<'a>(raw: &'a Option<Vec<f64>>, i: usize, per: usize) -> &'a [f64] {
    match raw {
        Some(r) => &r[i * per..(i + 1) * per],
        None => &[],
    }
}

impl ConditionalFlow {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn base(&self) -> &BaseDist {
        &self.base
    }

    pub fn support(&self) -> SupportMap {
        self.support
    }

    /// Every trainable leaf tensor, base net first, then transforms in order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if let BaseDist::Learned(net) = &self.base {
            out.extend(net.params());
        }
        for t in &self.transforms {
            out.extend(t.conditioner.params());
        }
        out
    }

    /// Trainable tensors grouped per component: `("phi", ...)` then
    /// `("t0", ...)`, `("t1", ...)` in transform order.
    pub fn param_groups(&self) -> Vec<(String, Vec<Tensor>)> {
        let mut out = Vec::new();
        if let BaseDist::Learned(net) = &self.base {
            out.push(("phi".to_string(), net.params()));
        }
        for (k, t) in self.transforms.iter().enumerate() {
            let p = t.conditioner.params();
            if !p.is_empty() {
                out.push((format!("t{k}"), p));
            }
        }
        out
    }

    /// Base-distribution parameters for one context row.
    pub fn base_params(&self, x: &[f64]) -> Result<GaussianParams> {
        self.check_ctx(x)?;
        match &self.base {
            BaseDist::Standard => Ok(GaussianParams::standard(self.dim)),
            BaseDist::Learned(net) => base_dist::shape_params(net, x),
        }
    }

    fn check_ctx(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.ctx_dim {
            return Err(Error::Shape(format!(
                "flow expects {} context features, got {}",
                self.ctx_dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::Shape(format!(
                "flow expects {} target dims, got {}",
                self.dim,
                y.len()
            )));
        }
        Ok(())
    }

    /// Inverse (training) direction: map a data point to the base space.
    /// Returns `z^(0)` and the accumulated `log|det J|` of the full inverse
    /// map, the term added to the base log-density in the likelihood.
    pub fn inverse_pass(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(y)?;
        self.check_ctx(x)?;
        let mut v: Vec<f64> = y.iter().map(|&t| self.support.to_flow(t)).collect();
        let mut total_ld = self.dim as f64 * self.support.log_det();
        for t in self.transforms.iter().rev() {
            let raw = t.conditioner.forward_values(&v, x)?;
            let per = t.kind.params_per_dim();
            let mut u = vec![0.0; self.dim];
            for i in 0..self.dim {
                let (ui, ld) = transformer_inverse(t.kind, raw_block(&raw, i, per), v[i])?;
                u[i] = ui;
                total_ld += ld;
            }
            v = t.permutation.apply_inverse(&u);
        }
        Ok((v, total_ld))
    }

    /// Forward (sampling) direction: coordinates are generated sequentially
    /// per transform since each conditioner input is a produced prefix.
    pub fn forward_pass(&self, z0: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_pass_logdet(z0, x)?.0)
    }

    /// Forward pass together with the accumulated forward log-determinant
    /// (exactly cancels the inverse pass log-determinant at the same point).
    pub fn forward_pass_logdet(&self, z0: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(z0)?;
        self.check_ctx(x)?;
        let mut v = z0.to_vec();
        let mut total_ld = 0.0;
        for t in &self.transforms {
            let u = t.permutation.apply(&v);
            let per = t.kind.params_per_dim();
            let mut w = vec![0.0; self.dim];
            for i in 0..self.dim {
                let raw = t.conditioner.forward_values(&w, x)?;
                let (wi, ld) = transformer_forward(t.kind, raw_block(&raw, i, per), u[i])?;
                w[i] = wi;
                total_ld += ld;
            }
            v = w;
        }
        total_ld -= self.dim as f64 * self.support.log_det();
        Ok((v.iter().map(|&t| self.support.from_flow(t)).collect(), total_ld))
    }

    /// Log-density of one data point under the conditional law.
    pub fn log_prob(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        let (z0, ld) = self.inverse_pass(y, x)?;
        Ok(base_dist::log_prob(&self.base_params(x)?, &z0)? + ld)
    }

    /// Differentiable mean negative log-likelihood of a batch, built on the
    /// autodiff graph. This is the training objective.
    pub fn nll(&self, y: &Matrix, x: &Matrix) -> Result<Tensor> {
        if y.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if y.rows() != x.rows() {
            return Err(Error::Shape(format!(
                "batch rows differ: {} targets vs {} contexts",
                y.rows(),
                x.rows()
            )));
        }
        if y.cols() != self.dim || x.cols() != self.ctx_dim {
            return Err(Error::Shape(format!(
                "batch is [{}x{}]/[{}x{}], flow wants dim {} ctx {}",
                y.rows(),
                y.cols(),
                x.rows(),
                x.cols(),
                self.dim,
                self.ctx_dim
            )));
        }
        let n = y.rows();
        let d = self.dim;
        let mapped: Vec<f64> = y.data().iter().map(|&t| self.support.to_flow(t)).collect();
        let mut z = Tensor::constant(n, d, mapped);
        let xg = Tensor::constant(n, self.ctx_dim, x.data().to_vec());

        let (mu, sigma) = match &self.base {
            BaseDist::Standard => (
                Tensor::constant(n, d, vec![0.0; n * d]),
                Tensor::constant(n, d, vec![1.0; n * d]),
            ),
            BaseDist::Learned(net) => {
                let out = net.forward_graph(&xg)?;
                let mu = out.slice_cols(0, d)?;
                let sigma = out.slice_cols(d, d)?.softplus().add_scalar(SIGMA_FLOOR);
                (mu, sigma)
            }
        };

        let base_ld = self.dim as f64 * self.support.log_det();
        let mut logdet = Tensor::constant(n, 1, vec![base_ld; n]);
        for t in self.transforms.iter().rev() {
            let raw = t.conditioner.forward_graph(&z, &xg)?;
            let per = t.kind.params_per_dim();
            let mut cols = Vec::with_capacity(d);
            for i in 0..d {
                let w_col = z.slice_cols(i, 1)?;
                let (u_col, ld_col) = match t.kind {
                    TransformerKind::RationalQuadratic { bins, bound } => {
                        let raw = raw.as_ref().expect("spline transform has a conditioner");
                        let block = raw.slice_cols(i * per, per)?;
                        let gp = normalize_params_graph(&block, bins, bound)?;
                        spline_inverse_graph(&w_col, &gp)?
                    }
                    TransformerKind::Affine => {
                        let raw = raw.as_ref().expect("affine transform has a conditioner");
                        let shift = raw.slice_cols(i * per, 1)?;
                        let scale = raw.slice_cols(i * per + 1, 1)?.softplus().add_scalar(SIGMA_FLOOR);
                        let u = w_col.sub(&shift)?.div(&scale)?;
                        (u, scale.log()?.neg())
                    }
                    TransformerKind::Sigmoid => {
                        let vals = w_col.data();
                        let interior: Vec<bool> = vals
                            .iter()
                            .map(|&v| v > SIGMOID_EPS && v < 1.0 - SIGMOID_EPS)
                            .collect();
                        let clamped: Vec<f64> = vals
                            .iter()
                            .map(|&v| v.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS))
                            .collect();
                        let safe =
                            w_col.where_mask(&interior, &Tensor::constant(n, 1, clamped))?;
                        let one_m = safe.neg().add_scalar(1.0);
                        let u = safe.log()?.sub(&one_m.log()?)?;
                        let ld = safe.log()?.add(&one_m.log()?)?.neg();
                        (u, ld)
                    }
                };
                cols.push(u_col);
                logdet = logdet.add(&ld_col)?;
            }
            let u_mat = Tensor::concat_cols(&cols)?;
            z = u_mat.permute_cols(t.permutation.inverse_order())?;
        }

        let diff = z.sub(&mu)?;
        let ratio = diff.div(&sigma)?;
        let quad = ratio.mul(&ratio)?.scale(0.5);
        let lp = sigma
            .log()?
            .neg()
            .sub(&quad)?
            .row_sum()
            .add_scalar(-0.5 * d as f64 * LN_2PI);
        Ok(lp.add(&logdet)?.neg().mean())
    }

    /// Non-differentiable NLL through the scalar inverse pass; used for
    /// validation scoring and as a cross-route check on [`Self::nll`].
    pub fn nll_scalar(&self, y: &Matrix, x: &Matrix) -> Result<f64> {
        if y.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut total = 0.0;
        for r in 0..y.rows() {
            total -= self.log_prob(y.row(r), x.row(r))?;
        }
        Ok(total / y.rows() as f64)
    }

    /// Draw `count` joint scenarios for one context; deterministic under the
    /// caller's seeded generator.
    pub fn sample_scenarios(
        &self,
        x: &[f64],
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<ScenarioSet> {
        if count == 0 {
            return Err(Error::Config("scenario count must be >= 1".into()));
        }
        let params = self.base_params(x)?;
        let draws = base_dist::sample(&params, count, rng);
        let mut rows = Vec::with_capacity(count);
        for z0 in draws {
            rows.push(self.forward_pass(&z0, x)?);
        }
        ScenarioSet::new(Matrix::from_rows(&rows)?)
    }

    /// Map the base quantile through the monotone transform chain
    /// (univariate only; multivariate quantiles are not scalar-ordered).
    pub fn predict_quantile(&self, x: &[f64], alpha: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Config(format!(
                "quantile mapping is univariate-only, flow has dim {}",
                self.dim
            )));
        }
        let params = self.base_params(x)?;
        let q0 = base_dist::quantile(&params, alpha)?;
        Ok(self.forward_pass(&q0, x)?[0])
    }

    /// Central `(1-beta)` prediction interval from the quantile pair
    /// `(beta/2, 1-beta/2)`.
    pub fn predict_interval(&self, x: &[f64], beta: f64) -> Result<(f64, f64)> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Domain(format!("interval level {beta} outside (0,1)")));
        }
        let lower = self.predict_quantile(x, beta / 2.0)?;
        let upper = self.predict_quantile(x, 1.0 - beta / 2.0)?;
        Ok((lower, upper))
    }

    /// Freeze the predictive law for one context into a queryable density
    /// (univariate only). Conditioners depend only on the context here, so
    /// every transformer is precomputed once.
    pub fn density(&self, x: &[f64]) -> Result<ForecastDensity> {
        if self.dim != 1 {
            return Err(Error::Config(format!(
                "ForecastDensity is univariate-only, flow has dim {}",
                self.dim
            )));
        }
        let base = self.base_params(x)?;
        let mut prepared = Vec::with_capacity(self.transforms.len());
        for t in &self.transforms {
            let raw = t.conditioner.forward_values(&[0.0], x)?;
            prepared.push(match t.kind {
                TransformerKind::RationalQuadratic { bins, bound } => {
                    PreparedTransformer::Spline(normalize_params(
                        raw.as_deref().unwrap_or(&[]),
                        bins,
                        bound,
                    )?)
                }
                TransformerKind::Affine => {
                    let raw = raw.expect("affine transform has a conditioner");
                    PreparedTransformer::Affine {
                        shift: raw[0],
                        scale: softplus(raw[1]) + SIGMA_FLOOR,
                    }
                }
                TransformerKind::Sigmoid => PreparedTransformer::Sigmoid,
            });
        }
        Ok(ForecastDensity { support: self.support, base, prepared })
    }
}

#[derive(Debug, Clone)]
enum PreparedTransformer {
    Spline(SplineParams),
    Affine { shift: f64, scale: f64 },
    Sigmoid,
}

impl PreparedTransformer {
    fn forward(&self, u: f64) -> Result<(f64, f64)> {
        match self {
            PreparedTransformer::Spline(p) => spline_forward(u, p),
            PreparedTransformer::Affine { shift, scale } => {
                Ok((scale * u + shift, scale.ln()))
            }
            PreparedTransformer::Sigmoid => {
                let w = sigmoid(u);
                Ok((w, w.ln() + (1.0 - w).ln()))
            }
        }
    }

    fn inverse(&self, w: f64) -> Result<(f64, f64)> {
        match self {
            PreparedTransformer::Spline(p) => spline_inverse(w, p),
            PreparedTransformer::Affine { shift, scale } => {
                Ok(((w - shift) / scale, -scale.ln()))
            }
            PreparedTransformer::Sigmoid => {
                let wc = w.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
                Ok(((wc / (1.0 - wc)).ln(), -(wc.ln() + (1.0 - wc).ln())))
            }
        }
    }
}

/// Queryable univariate predictive law for one issue time: log-density, CDF,
/// quantiles, and a sampler, with all transformer parameters frozen.
#[derive(Debug, Clone)]
pub struct ForecastDensity {
    support: SupportMap,
    base: GaussianParams,
    prepared: Vec<PreparedTransformer>,
}

impl ForecastDensity {
    pub fn base_params(&self) -> &GaussianParams {
        &self.base
    }

    fn inverse(&self, y: f64) -> Result<(f64, f64)> {
        let mut v = self.support.to_flow(y);
        let mut ld = self.support.log_det();
        for t in self.prepared.iter().rev() {
            let (u, l) = t.inverse(v)?;
            v = u;
            ld += l;
        }
        Ok((v, ld))
    }

    fn forward(&self, z0: f64) -> Result<f64> {
        let mut v = z0;
        for t in &self.prepared {
            v = t.forward(v)?.0;
        }
        Ok(self.support.from_flow(v))
    }

    pub fn log_density(&self, y: f64) -> Result<f64> {
        let (z0, ld) = self.inverse(y)?;
        Ok(base_dist::log_prob(&self.base, &[z0])? + ld)
    }

    /// Exact CDF by monotonicity: `F(y) = Phi((T^{-1}(y) - mu) / sigma)`.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        let (z0, _) = self.inverse(y)?;
        Ok(base_dist::norm_cdf((z0 - self.base.mu[0]) / self.base.sigma[0]))
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        let q0 = base_dist::quantile(&self.base, alpha)?;
        self.forward(q0[0])
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let draws = base_dist::sample(&self.base, count, rng);
        draws.into_iter().map(|z| self.forward(z[0])).collect()
    }

    /// Span holding all but `2 * tail_mass` of the predictive mass, padded a
    /// little; the quadrature window for CRPS and normalization checks.
    pub fn support_span(&self, tail_mass: f64) -> Result<(f64, f64)> {
        let lo = self.quantile(tail_mass)?;
        let hi = self.quantile(1.0 - tail_mass)?;
        let pad = 0.05 * (hi - lo).max(1e-6);
        Ok((lo - pad, hi + pad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus_inv;

    fn small_cfg(dim: usize, kind_seed: u64) -> FlowConfig {
        FlowConfig {
            dim,
            ctx_dim: 2,
            transforms: 2,
            base_hidden: vec![8],
            cond_hidden: vec![8],
            bins: 5,
            bound: 5.0,
            standard_base: false,
            support: SupportMap::Identity,
            permute: true,
            seed: kind_seed,
        }
    }

    fn zero_all(flow: &ConditionalFlow) {
        for p in flow.params() {
            p.update_data(|d| d.fill(0.0));
        }
    }

    /// Zero a context-only conditioner and pin its output bias.
    fn pin_conditioner_bias(t: &Transform, bias: &[f64]) {
        match &t.conditioner {
            Conditioner::Context(mlp) => {
                for layer in mlp.layers() {
                    layer.w.update_data(|d| d.fill(0.0));
                    layer.b.update_data(|d| d.fill(0.0));
                }
                mlp.layers().last().unwrap().b.set_data(bias);
            }
            _ => panic!("expected context conditioner"),
        }
    }

    #[test]
    fn affine_identity_transform_passes_through() {
        let mut cfg = small_cfg(1, 1);
        cfg.transforms = 1;
        cfg.standard_base = true;
        let flow = make_affine_flow(&cfg).unwrap();
        pin_conditioner_bias(&flow.transforms[0], &[0.0, softplus_inv(1.0 - SIGMA_FLOOR)]);
        let x = [0.3, -0.8];
        for y in [-2.0, 0.0, 1.7] {
            let (z0, ld) = flow.inverse_pass(&[y], &x).unwrap();
            assert!((z0[0] - y).abs() < 1e-9);
            assert!(ld.abs() < 1e-9);
        }
    }

    #[test]
    fn spline_identity_params_pass_through() {
        let mut cfg = small_cfg(1, 2);
        cfg.transforms = 1;
        cfg.standard_base = true;
        let flow = make_spline_flow(&cfg).unwrap();
        zero_all(&flow);
        let x = [0.0, 0.0];
        for y in [-4.0, -0.3, 0.0, 2.9] {
            let (z0, ld) = flow.inverse_pass(&[y], &x).unwrap();
            assert!((z0[0] - y).abs() < 1e-12);
            assert!(ld.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_flow_nll_is_standard_normal_entropy_at_zero() {
        let mut cfg = small_cfg(1, 3);
        cfg.transforms = 1;
        cfg.standard_base = true;
        let flow = make_spline_flow(&cfg).unwrap();
        zero_all(&flow);
        let y = Matrix::new(1, 1, vec![0.0]).unwrap();
        let x = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let nll = flow.nll(&y, &x).unwrap().item();
        assert!((nll - 0.9189385).abs() < 1e-6);
    }

    #[test]
    fn wider_base_shifts_nll_by_log_sigma() {
        // identity transforms over a learned base pinned at N(0, 2)
        let mut cfg = small_cfg(1, 4);
        cfg.transforms = 1;
        let flow = make_spline_flow(&cfg).unwrap();
        zero_all(&flow);
        if let BaseDist::Learned(net) = &flow.base {
            let raw_sigma = softplus_inv(2.0 - SIGMA_FLOOR);
            net.layers().last().unwrap().b.set_data(&[0.0, raw_sigma]);
        }
        let y = Matrix::new(1, 1, vec![0.0]).unwrap();
        let x = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let nll = flow.nll(&y, &x).unwrap().item();
        assert!((nll - (0.9189385 + std::f64::consts::LN_2)).abs() < 1e-6);
    }

    #[test]
    fn bijection_roundtrip_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let builders: [fn(&FlowConfig) -> Result<ConditionalFlow>; 3] =
            [make_spline_flow, make_affine_flow, make_logit_flow];
        for (bi, build) in builders.iter().enumerate() {
            for d in [1usize, 3] {
                let cfg = small_cfg(d, 100 + bi as u64);
                let flow = build(&cfg).unwrap();
                for _ in 0..50 {
                    let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let y: Vec<f64> = (0..d)
                        .map(|_| {
                            if bi == 2 {
                                rng.random_range(0.02..0.98)
                            } else {
                                rng.random_range(-4.0..4.0)
                            }
                        })
                        .collect();
                    let (z0, ld_inv) = flow.inverse_pass(&y, &x).unwrap();
                    let (back, ld_fwd) = flow.forward_pass_logdet(&z0, &x).unwrap();
                    for i in 0..d {
                        assert!((back[i] - y[i]).abs() < 1e-7, "kind {bi} dim {i}");
                    }
                    assert!((ld_inv + ld_fwd).abs() < 1e-8, "kind {bi}: {ld_inv} vs {ld_fwd}");
                }
            }
        }
    }

    #[test]
    fn graph_nll_matches_scalar_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let builders: [fn(&FlowConfig) -> Result<ConditionalFlow>; 3] =
            [make_spline_flow, make_affine_flow, make_logit_flow];
        for (bi, build) in builders.iter().enumerate() {
            for d in [1usize, 2, 4] {
                let mut cfg = small_cfg(d, 200 + bi as u64);
                if bi == 0 && d == 4 {
                    cfg.support = SupportMap::Unit { bound: 5.0, margin: 0.5 };
                }
                let flow = build(&cfg).unwrap();
                let n = 16;
                let needs_unit = bi == 2 || cfg.support != SupportMap::Identity;
                let y: Vec<f64> = (0..n * d)
                    .map(|_| {
                        if needs_unit {
                            rng.random_range(0.05..0.95)
                        } else {
                            rng.random_range(-3.0..3.0)
                        }
                    })
                    .collect();
                let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ym = Matrix::new(n, d, y).unwrap();
                let xm = Matrix::new(n, 2, x).unwrap();
                let graph = flow.nll(&ym, &xm).unwrap().item();
                let scalar = flow.nll_scalar(&ym, &xm).unwrap();
                assert!(
                    (graph - scalar).abs() < 1e-9,
                    "kind {bi} d {d}: graph {graph} vs scalar {scalar}"
                );
            }
        }
    }

    #[test]
    fn autoregressive_inverse_is_triangular_without_permutations() {
        let mut cfg = small_cfg(3, 9);
        cfg.permute = false;
        let flow = make_spline_flow(&cfg).unwrap();
        let x = [0.2, -0.4];
        let y = [0.5, -1.0, 1.5];
        let base = flow.inverse_pass(&y, &x).unwrap().0;
        // perturbing y[2] must leave z0[0], z0[1] unchanged
        let mut y2 = y;
        y2[2] += 0.37;
        let moved = flow.inverse_pass(&y2, &x).unwrap().0;
        assert_eq!(base[0], moved[0]);
        assert_eq!(base[1], moved[1]);
        // and the forward direction: z0[2] cannot reach y[0], y[1]
        let z = [0.1, 0.2, 0.3];
        let fwd = flow.forward_pass(&z, &x).unwrap();
        let mut z2 = z;
        z2[2] -= 0.9;
        let fwd2 = flow.forward_pass(&z2, &x).unwrap();
        assert_eq!(fwd[0], fwd2[0]);
        assert_eq!(fwd[1], fwd2[1]);
    }

    #[test]
    fn identity_flow_scenarios_are_base_draws() {
        let mut cfg = small_cfg(2, 10);
        cfg.transforms = 1;
        cfg.standard_base = true;
        cfg.permute = false;
        let flow = make_spline_flow(&cfg).unwrap();
        zero_all(&flow);
        let x = [0.1, 0.1];
        let scen = flow
            .sample_scenarios(&x, 8, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let direct = base_dist::sample(
            &GaussianParams::standard(2),
            8,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        for (i, row) in direct.iter().enumerate() {
            for (a, b) in scen.draws().row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scenario_sampling_deterministic_under_seed() {
        let flow = make_spline_flow(&small_cfg(2, 11)).unwrap();
        let x = [0.4, 0.2];
        let a = flow.sample_scenarios(&x, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = flow.sample_scenarios(&x, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.draws().data(), b.draws().data());
    }

    #[test]
    fn quantiles_never_cross_and_match_sampling() {
        let flow = make_spline_flow(&small_cfg(1, 12)).unwrap();
        let x = [0.5, -0.5];
        let mut prev = f64::NEG_INFINITY;
        for i in 1..100 {
            let q = flow.predict_quantile(&x, i as f64 / 100.0).unwrap();
            assert!(q > prev, "crossing at level {}", i as f64 / 100.0);
            prev = q;
        }
        let median = flow.predict_quantile(&x, 0.5).unwrap();
        let scen = flow
            .sample_scenarios(&x, 5000, &mut ChaCha8Rng::seed_from_u64(44))
            .unwrap();
        let mut draws: Vec<f64> = scen.draws().column(0);
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let empirical = draws[2500];
        assert!((median - empirical).abs() < 0.02, "{median} vs {empirical}");
    }

    #[test]
    fn quantile_rejects_multivariate() {
        let flow = make_spline_flow(&small_cfg(2, 13)).unwrap();
        assert!(flow.predict_quantile(&[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn interval_on_identity_standard_normal() {
        let mut cfg = small_cfg(1, 14);
        cfg.transforms = 1;
        cfg.standard_base = true;
        let flow = make_spline_flow(&cfg).unwrap();
        zero_all(&flow);
        let (lo, hi) = flow.predict_interval(&[0.0, 0.0], 0.1).unwrap();
        assert!((lo + 1.6449).abs() < 1e-4, "{lo}");
        assert!((hi - 1.6449).abs() < 1e-4, "{hi}");
        // width shrinks as beta grows
        let (lo2, hi2) = flow.predict_interval(&[0.0, 0.0], 0.5).unwrap();
        assert!(hi2 - lo2 < hi - lo);
        assert!(lo2 < hi2);
    }

    #[test]
    fn logit_flow_lives_in_unit_interval() {
        let flow = make_logit_flow(&small_cfg(1, 15)).unwrap();
        let x = [0.3, 0.9];
        let scen = flow
            .sample_scenarios(&x, 500, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        for &v in scen.draws().data() {
            assert!(v > 0.0 && v < 1.0);
        }
        // round trip away from saturation
        for y in [0.01, 0.2, 0.5, 0.93] {
            let (z0, _) = flow.inverse_pass(&[y], &x).unwrap();
            let back = flow.forward_pass(&z0, &x).unwrap()[0];
            assert!((back - y).abs() < 1e-8);
        }
    }

    #[test]
    fn nng_equals_closed_form_gaussian() {
        // context-only affine conditioners compose to a Gaussian; the model
        // NLL must equal the closed form within 1e-9
        let cfg = small_cfg(1, 16);
        let flow = make_affine_flow(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(-2.0..2.0);
            let p = flow.base_params(&x).unwrap();
            let (mut mu, mut sigma) = (p.mu[0], p.sigma[0]);
            for t in flow.transforms() {
                let raw = t.conditioner.forward_values(&[0.0], &x).unwrap().unwrap();
                let scale = softplus(raw[1]) + SIGMA_FLOOR;
                mu = scale * mu + raw[0];
                sigma *= scale;
            }
            let closed = -(-0.5 * LN_2PI - sigma.ln() - 0.5 * ((y - mu) / sigma).powi(2));
            let ym = Matrix::new(1, 1, vec![y]).unwrap();
            let xm = Matrix::new(1, 2, x.clone()).unwrap();
            let nll = flow.nll(&ym, &xm).unwrap().item();
            assert!((nll - closed).abs() < 1e-9, "{nll} vs {closed}");
        }
    }

    #[test]
    fn univariate_density_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for seed in 0..5 {
            let mut cfg = small_cfg(1, 300 + seed);
            if seed % 2 == 0 {
                cfg.support = SupportMap::Unit { bound: 5.0, margin: 0.5 };
            }
            let flow = make_spline_flow(&cfg).unwrap();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dens = flow.density(&x).unwrap();
            let (lo, hi) = dens.support_span(1e-6).unwrap();
            let n = 2001;
            let h = (hi - lo) / (n - 1) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let y = lo + i as f64 * h;
                let f = dens.log_density(y).unwrap().exp();
                total += if i == 0 || i == n - 1 { 0.5 * f } else { f };
            }
            total *= h;
            assert!((total - 1.0).abs() < 1e-3, "seed {seed}: integral {total}");
        }
    }

    #[test]
    fn density_cdf_quantile_are_inverse() {
        let flow = make_spline_flow(&small_cfg(1, 17)).unwrap();
        let dens = flow.density(&[0.1, -0.9]).unwrap();
        for alpha in [0.05, 0.3, 0.5, 0.8, 0.99] {
            let q = dens.quantile(alpha).unwrap();
            let back = dens.cdf(q).unwrap();
            assert!((back - alpha).abs() < 1e-7, "alpha {alpha}: {back}");
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let flow = make_spline_flow(&small_cfg(1, 18)).unwrap();
        let y = Matrix::zeros(0, 1);
        let x = Matrix::zeros(0, 2);
        assert!(flow.nll(&y, &x).is_err());
    }
}
