//! Feed-forward networks: plain MLPs for shape parameters and context
//! conditioning, the masked autoregressive network enforcing strict
//! triangular dependence, and the inter-transform permutations.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One dense layer; weight is `(in, out)` so batches multiply as `x . w`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

fn init_layer(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Layer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Layer { w: Tensor::leaf(fan_in, fan_out, w), b: Tensor::leaf(1, fan_out, b) }
}

fn matvec_into(w: &[f64], b: &[f64], x: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate().take(fan_in) {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * fan_out..(i + 1) * fan_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// Fully connected network with ReLU hidden activations and a linear output
/// layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// `dims` chains layer sizes: `[in, hidden..., out]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims.windows(2).map(|d| init_layer(d[0], d[1], rng)).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    /// Batched differentiable forward: `[n x in] -> [n x out]`, no activation
    /// on the final layer.
    pub fn forward_graph(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.w)?.bias_add(&layer.b)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Single-row inference on raw values; no graph is recorded.
    pub fn forward_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.w.data();
            let b = layer.b.data();
            h = matvec_into(&w, &b, &h, layer.w.rows(), layer.w.cols());
            if i + 1 < self.layers.len() {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }
}

/// Masked autoregressive network (MADE). Inputs are the autoregressive block
/// `z` of width `d` followed by `ctx_width` unmasked context columns; the
/// output is `d` blocks of `out_per_dim` values where block `i` has zero
/// sensitivity to `z_j` for `j >= i`.
///
/// Degree assignment: input `z_i` gets degree `i`; hidden units cycle over
/// `1..d-1` (all zero when `d = 1`, so only context flows); output block `i`
/// gets degree `i`. Connections require `deg(to) >= deg(from)` into hidden
/// layers and `deg(out) > deg(hidden)` into the output layer.
#[derive(Debug, Clone)]
pub struct MaskedMlp {
    layers: Vec<Layer>,
    masks: Vec<Vec<f64>>,
    d: usize,
    ctx_width: usize,
    out_per_dim: usize,
}

impl MaskedMlp {
    pub fn new(
        d: usize,
        ctx_width: usize,
        hidden: &[usize],
        out_per_dim: usize,
        rng: &mut impl Rng,
    ) -> MaskedMlp {
        assert!(d >= 1 && out_per_dim >= 1 && !hidden.is_empty());
        let in_deg: Vec<usize> = (1..=d).chain(std::iter::repeat(0).take(ctx_width)).collect();
        let hid_deg: Vec<Vec<usize>> = hidden
            .iter()
            .map(|&h| {
                (0..h)
                    .map(|j| if d == 1 { 0 } else { 1 + (j % (d - 1)) })
                    .collect()
            })
            .collect();
        let out_deg: Vec<usize> = (1..=d).flat_map(|i| std::iter::repeat(i).take(out_per_dim)).collect();

        let mut dims = vec![d + ctx_width];
        dims.extend_from_slice(hidden);
        dims.push(d * out_per_dim);

        let mut layers = Vec::new();
        let mut masks = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            layers.push(init_layer(fan_in, fan_out, rng));
            let from: &[usize] = if l == 0 { &in_deg } else { &hid_deg[l - 1] };
            let last = l + 1 == dims.len() - 1;
            let to: &[usize] = if last { &out_deg } else { &hid_deg[l] };
            let mut mask = vec![0.0; fan_in * fan_out];
            for (i, &df) in from.iter().enumerate() {
                for (j, &dt) in to.iter().enumerate() {
                    let connected = if last { dt > df } else { dt >= df };
                    if connected {
                        mask[i * fan_out + j] = 1.0;
                    }
                }
            }
            masks.push(mask);
        }
        MaskedMlp { layers, masks, d, ctx_width, out_per_dim }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn out_per_dim(&self) -> usize {
        self.out_per_dim
    }

    pub fn out_dim(&self) -> usize {
        self.d * self.out_per_dim
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Batched differentiable forward. `z` is `[n x d]`; `x` must be
    /// `[n x ctx_width]` when the network was built with context inputs.
    pub fn forward_graph(&self, z: &Tensor, x: Option<&Tensor>) -> Result<Tensor> {
        if z.cols() != self.d {
            return Err(Error::Shape(format!("made expects {} dims, got {}", self.d, z.cols())));
        }
        let mut h = match (self.ctx_width, x) {
            (0, _) => z.clone(),
            (w, Some(x)) if x.cols() == w => Tensor::concat_cols(&[z.clone(), x.clone()])?,
            (w, got) => {
                return Err(Error::Shape(format!(
                    "made expects {w} context columns, got {}",
                    got.map_or(0, |t| t.cols())
                )))
            }
        };
        for (i, (layer, mask)) in self.layers.iter().zip(&self.masks).enumerate() {
            let masked = layer.w.mul(&Tensor::constant(layer.w.rows(), layer.w.cols(), mask.clone()))?;
            h = h.matmul(&masked)?.bias_add(&layer.b)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Single-row inference on raw values.
    pub fn forward_values(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d || x.len() != self.ctx_width {
            return Err(Error::Shape(format!(
                "made expects {}+{} inputs, got {}+{}",
                self.d,
                self.ctx_width,
                z.len(),
                x.len()
            )));
        }
        let mut h: Vec<f64> = z.iter().chain(x.iter()).cloned().collect();
        for (i, (layer, mask)) in self.layers.iter().zip(&self.masks).enumerate() {
            let w = layer.w.data();
            let b = layer.b.data();
            let fan_out = layer.w.cols();
            let masked: Vec<f64> = w.iter().zip(mask.iter()).map(|(wv, mv)| wv * mv).collect();
            h = matvec_into(&masked, &b, &h, layer.w.rows(), fan_out);
            if i + 1 < self.layers.len() {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }
}

/// Bijection on dimension indices with its precomputed inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(d: usize) -> Permutation {
        Permutation { order: (0..d).collect(), inverse: (0..d).collect() }
    }

    /// Dimension-order reversal, the deterministic choice used between
    /// transforms.
    pub fn reversal(d: usize) -> Permutation {
        Permutation::new((0..d).rev().collect()).unwrap()
    }

    pub fn new(order: Vec<usize>) -> Result<Permutation> {
        let d = order.len();
        let mut inverse = vec![usize::MAX; d];
        for (j, &src) in order.iter().enumerate() {
            if src >= d || inverse[src] != usize::MAX {
                return Err(Error::Config(format!("not a permutation of 0..{d}: {order:?}")));
            }
            inverse[src] = j;
        }
        Ok(Permutation { order, inverse })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse_order(&self) -> &[usize] {
        &self.inverse
    }

    /// `out[j] = v[order[j]]`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&src| v[src]).collect()
    }

    /// Undoes [`Permutation::apply`].
    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        self.inverse.iter().map(|&src| v[src]).collect()
    }
}

/// Conditioner producing per-dimension transformer parameters from the
/// autoregressive prefix and the context features.
#[derive(Debug, Clone)]
pub enum Conditioner {
    /// Fixed transformer with no parameters (the logit-normal sigmoid).
    None,
    /// Univariate case: parameters depend on context only.
    Context(Mlp),
    /// Additive model: masked autoregressive part over `z` plus a context
    /// network over `x`, summed elementwise.
    Additive { made: MaskedMlp, ctx: Mlp },
}

/// Combine a MADE over the autoregressive inputs with a context network into
/// an additive conditioner. Both parts must produce the same output width.
pub fn build_additive_conditioner(made: MaskedMlp, ctx: Mlp) -> Result<Conditioner> {
    if made.out_dim() != ctx.out_dim() {
        return Err(Error::Shape(format!(
            "additive conditioner width mismatch: made {} vs ctx {}",
            made.out_dim(),
            ctx.out_dim()
        )));
    }
    Ok(Conditioner::Additive { made, ctx })
}

impl Conditioner {
    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Conditioner::None => Vec::new(),
            Conditioner::Context(mlp) => mlp.params(),
            Conditioner::Additive { made, ctx } => {
                let mut p = made.params();
                p.extend(ctx.params());
                p
            }
        }
    }

    /// Batched conditioner outputs `[n x d*out_per_dim]`, or `None` for a
    /// parameter-free transformer.
    pub fn forward_graph(&self, z: &Tensor, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            Conditioner::None => Ok(None),
            Conditioner::Context(mlp) => Ok(Some(mlp.forward_graph(x)?)),
            Conditioner::Additive { made, ctx } => {
                let a = made.forward_graph(z, None)?;
                let c = ctx.forward_graph(x)?;
                Ok(Some(a.add(&c)?))
            }
        }
    }

    /// Single-row conditioner outputs.
    pub fn forward_values(&self, z: &[f64], x: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            Conditioner::None => Ok(None),
            Conditioner::Context(mlp) => Ok(Some(mlp.forward_values(x)?)),
            Conditioner::Additive { made, ctx } => {
                let a = made.forward_values(z, &[])?;
                let c = ctx.forward_values(x)?;
                Ok(Some(a.iter().zip(&c).map(|(u, v)| u + v).collect()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_net(net: &Mlp) {
        for p in net.params() {
            p.update_data(|d| d.fill(0.0));
        }
    }

    #[test]
    fn zero_weights_pass_bias_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 2], &mut rng);
        zero_net(&net);
        net.layers()[0].b.set_data(&[0.7, -0.2]);
        for x in [[0.0, 0.0, 0.0], [1.0, -5.0, 3.0]] {
            assert_eq!(net.forward_values(&x).unwrap(), vec![0.7, -0.2]);
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 3], &mut rng);
        net.layers()[0]
            .w
            .set_data(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        net.layers()[0].b.set_data(&[0.0, 0.0, 0.0]);
        let x = [0.4, -2.0, 3.5];
        assert_eq!(net.forward_values(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn two_layer_matches_hand_computed_chain() {
        // independent oracle: explicit matrix products with ReLU in between
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[2, 3, 2], &mut rng);
        let x = [0.3, -1.1];
        let w1 = net.layers()[0].w.data();
        let b1 = net.layers()[0].b.data();
        let w2 = net.layers()[1].w.data();
        let b2 = net.layers()[1].b.data();
        let mut h = vec![0.0; 3];
        for j in 0..3 {
            h[j] = (b1[j] + x[0] * w1[j] + x[1] * w1[3 + j]).max(0.0);
        }
        let mut expect = vec![0.0; 2];
        for j in 0..2 {
            expect[j] = b2[j] + h[0] * w2[j] + h[1] * w2[2 + j] + h[2] * w2[4 + j];
        }
        let got = net.forward_values(&x).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        // graph path agrees with the value path
        let gx = Tensor::constant(1, 2, x.to_vec());
        let via_graph = net.forward_graph(&gx).unwrap().data();
        for (g, e) in via_graph.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn output_bias_shift_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[3, 4, 2], &mut rng);
        let x = [0.5, 0.1, -0.7];
        let before = net.forward_values(&x).unwrap();
        let last = &net.layers()[1].b;
        let mut b = last.data();
        b[0] += 0.25;
        b[1] -= 1.5;
        last.set_data(&b);
        let after = net.forward_values(&x).unwrap();
        assert!((after[0] - before[0] - 0.25).abs() < 1e-12);
        assert!((after[1] - before[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 2], &mut rng);
        assert!(net.forward_values(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn made_masks_block_high_degrees() {
        // reachability product over all layers must be strictly triangular
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in [2usize, 3, 5] {
            let made = MaskedMlp::new(d, 0, &[16, 16], 3, &mut rng);
            let mut reach = made.masks()[0].clone();
            let mut rows = d;
            let mut cols = made.layers()[0].w.cols();
            for mask in &made.masks()[1..] {
                let next_cols = mask.len() / cols;
                let mut prod = vec![0.0; rows * next_cols];
                for i in 0..rows {
                    for k in 0..cols {
                        if reach[i * cols + k] == 0.0 {
                            continue;
                        }
                        for j in 0..next_cols {
                            prod[i * next_cols + j] += reach[i * cols + k] * mask[k * next_cols + j];
                        }
                    }
                }
                reach = prod;
                cols = next_cols;
                rows = d;
            }
            for j in 0..d {
                for i in 1..=d {
                    if j + 1 >= i {
                        for p in 0..made.out_per_dim() {
                            assert_eq!(
                                reach[j * cols + (i - 1) * made.out_per_dim() + p],
                                0.0,
                                "z_{} must not reach block {i}",
                                j + 1
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn made_d1_depends_on_context_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let made = MaskedMlp::new(1, 3, &[8], 2, &mut rng);
        let x = [0.2, -0.4, 1.0];
        let a = made.forward_values(&[0.0], &x).unwrap();
        let b = made.forward_values(&[123.0], &x).unwrap();
        assert_eq!(a, b);
        let c = made.forward_values(&[0.0], &[0.2, -0.4, 2.0]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perturbing_last_dim_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let made = MaskedMlp::new(d, 0, &[12, 12], 2, &mut rng);
        let z = [0.1, -0.2, 0.3, 0.4];
        let mut z2 = z;
        z2[d - 1] = -9.0;
        let a = made.forward_values(&z, &[]).unwrap();
        let b = made.forward_values(&z2, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn made_jacobian_is_block_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let per = 2;
        let made = MaskedMlp::new(d, 0, &[16], per, &mut rng);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        for j in 0..d {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let up = made.forward_values(&zp, &[]).unwrap();
            let dn = made.forward_values(&zm, &[]).unwrap();
            for i in 1..=d {
                if j + 1 >= i {
                    for p in 0..per {
                        let fd = (up[(i - 1) * per + p] - dn[(i - 1) * per + p]) / (2.0 * h);
                        assert!(fd.abs() < 1e-10, "block {i} leaked from z_{}", j + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_roundtrip_exact() {
        let p = Permutation::reversal(5);
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(p.apply(&v), vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(p.apply_inverse(&p.apply(&v)), v.to_vec());
        let q = Permutation::new(vec![2, 0, 1]).unwrap();
        let w = [7.0, 8.0, 9.0];
        assert_eq!(q.apply_inverse(&q.apply(&w)), w.to_vec());
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn additive_conditioner_sums_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 3;
        let per = 2;
        let made = MaskedMlp::new(d, 0, &[8], per, &mut rng);
        let ctx = Mlp::new(&[2, 8, d * per], &mut rng);
        let z = [0.3, -0.5, 0.9];
        let x = [1.0, -0.2];
        let made_only = made.forward_values(&z, &[]).unwrap();
        let ctx_only = ctx.forward_values(&x).unwrap();

        let cond = build_additive_conditioner(made.clone(), ctx.clone()).unwrap();
        let got = cond.forward_values(&z, &x).unwrap().unwrap();
        for i in 0..d * per {
            assert!((got[i] - (made_only[i] + ctx_only[i])).abs() < 1e-12);
        }

        // zeroing one side leaves exactly the other
        for p in ctx.params() {
            p.update_data(|v| v.fill(0.0));
        }
        let got = cond.forward_values(&z, &x).unwrap().unwrap();
        assert_eq!(got, made_only);
    }

    #[test]
    fn additive_width_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let made = MaskedMlp::new(3, 0, &[8], 2, &mut rng);
        let ctx = Mlp::new(&[2, 8, 5], &mut rng);
        assert!(build_additive_conditioner(made, ctx).is_err());
    }

    #[test]
    fn graph_and_value_paths_agree_for_made() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let made = MaskedMlp::new(3, 2, &[8], 2, &mut rng);
        let z = [0.1, 0.5, -0.3];
        let x = [0.7, -0.1];
        let vals = made.forward_values(&z, &x).unwrap();
        let zg = Tensor::constant(1, 3, z.to_vec());
        let xg = Tensor::constant(1, 2, x.to_vec());
        let graph = made.forward_graph(&zg, Some(&xg)).unwrap().data();
        for (a, b) in vals.iter().zip(&graph) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
