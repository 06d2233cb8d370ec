//! Finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::Act;
use super::resnet::{cross_entropy, NetworkConfig, ResNet3d};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub network: NetworkConfig,
    pub params: usize,
    pub eps: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            network: NetworkConfig::tiny(),
            params: 20,
            eps: 1e-5,
            batch: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Denominators below this are treated as this value, so parameters with
/// vanishing gradient are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Deterministic standard-normal batch with alternating labels.
pub fn synthetic_batch(net: &ResNet3d<f64>, n: usize, seed: u64) -> (Act<f64>, Vec<usize>) {
    let d = net.config().input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d * d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    (Act { n, c: 1, dims: [d; 3], data }, labels)
}

/// Training-mode loss at the current parameters.
pub fn train_loss(net: &mut ResNet3d<f64>, x: &Act<f64>, labels: &[usize]) -> Result<f64> {
    let (logits, _) = net.forward_train(x)?;
    Ok(cross_entropy(&logits, labels, None).0)
}

/// Compares analytic gradients with central differences on randomly chosen
/// parameters.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = ResNet3d::<f64>::new(cfg.network.clone(), cfg.seed)?;
    let (x, labels) = synthetic_batch(&net, cfg.batch, cfg.seed ^ 0x9e37);
    let (_, grad) = net.loss_and_grad(&x, &labels, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let picks = sample(&mut rng, net.num_params(), cfg.params.min(net.num_params()));
    let mut entries = Vec::with_capacity(picks.len());
    for index in picks.into_iter() {
        let orig = net.params()[index];
        net.params_mut()[index] = orig + cfg.eps;
        let lp = train_loss(&mut net, &x, &labels)?;
        net.params_mut()[index] = orig - cfg.eps;
        let lm = train_loss(&mut net, &x, &labels)?;
        net.params_mut()[index] = orig;
        let numeric = (lp - lm) / (2.0 * cfg.eps);
        let analytic = grad[index];
        entries.push(GradEntry {
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}

/// Zeroes the classifier head and returns the gradient projected on the
/// bias-difference direction `(1, -1)/√2`.
pub fn head_symmetry_projection(net: &mut ResNet3d<f64>, x: &Act<f64>, labels: &[usize]) -> Result<f64> {
    let w = net.head_weight_range();
    let b = net.head_bias_range();
    net.params_mut()[w].fill(0.0);
    net.params_mut()[b.clone()].fill(0.0);
    let (_, grad) = net.loss_and_grad(x, labels, None)?;
    Ok((grad[b.start] - grad[b.start + 1]) / std::f64::consts::SQRT_2)
}

/// Losses after stepping the parameters by `+step·ĝ` and `-step·ĝ`, where ĝ
/// is the unit gradient.
pub fn directional_losses(net: &mut ResNet3d<f64>, x: &Act<f64>, labels: &[usize], step: f64) -> Result<(f64, f64)> {
    let (_, grad) = net.loss_and_grad(x, labels, None)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let orig = net.params().to_vec();
    let shifted = |sign: f64| -> Vec<f64> { orig.iter().zip(&grad).map(|(p, g)| p + sign * step * g / norm).collect() };
    net.params_mut().copy_from_slice(&shifted(1.0));
    let lp = train_loss(net, x, labels)?;
    net.params_mut().copy_from_slice(&shifted(-1.0));
    let lm = train_loss(net, x, labels)?;
    net.params_mut().copy_from_slice(&orig);
    Ok((lp, lm))
}
