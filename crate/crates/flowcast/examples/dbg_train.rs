use flowcast::flow::{make_spline_flow, FlowConfig, SupportMap};
use flowcast::matrix::Matrix;
use flowcast::training::{fit, TrainConfig};
use flowcast::base_dist;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_data(n: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| base_dist::standard_normal(&mut rng)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (Matrix::new(n, 1, y).unwrap(), Matrix::new(n, 1, x).unwrap())
}

fn main() {
    let flow = make_spline_flow(&FlowConfig {
        dim: 1, ctx_dim: 1, transforms: 1,
        base_hidden: vec![8], cond_hidden: vec![8],
        bins: 4, bound: 5.0, standard_base: false,
        support: SupportMap::Identity, permute: false, seed: 1,
    }).unwrap();
    let (ty, tx) = gaussian_data(4000, 10);
    let (vy, vx) = gaussian_data(2000, 11);
    println!("init val nll: {}", flow.nll(&vy, &vx).unwrap().item());
    let cfg = TrainConfig { lr0: 3e-3, decay_every: 300, max_iters: 500, batch_size: 256, seed: 5, patience: 20, ..TrainConfig::default() };
    let r = fit(&flow, &ty, &tx, &vy, &vx, &cfg).unwrap();
    for row in r.history.iter().filter(|h| h.val_nll.is_some()) {
        println!("iter {} train {:.4} val {:.4} lr {:.2e}", row.iter, row.train_nll, row.val_nll.unwrap(), row.lr);
    }
    println!("best {} at {}", r.best_val_nll, r.best_iter);
}
