//! Loss terms, the combined objective, AdamW with decoupled weight decay,
//! the cosine learning-rate schedule, gradient accumulation, and
//! finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::nn::ParamClass;
use crate::tensor::{Scalar, Tensor};
use crate::varfusion::LatentPosterior;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Closed-form divergence of a diagonal Gaussian from the standard normal,
/// summed over latent dimensions.
pub fn kl_divergence<F: Scalar>(post: &LatentPosterior<F>) -> F {
    let half = F::from_f64(0.5);
    post.mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .sum()
}

/// Squared L2 distance between a fused feature and its reconstruction,
/// summed over dimensions.
pub fn recon_loss<F: Scalar>(f_fused0: &Tensor<F>, f_hat: &Tensor<F>) -> F {
    assert_eq!(f_fused0.shape(), f_hat.shape(), "reconstruction shape mismatch");
    f_fused0
        .data()
        .iter()
        .zip(f_hat.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Mean negative log probability of the true class position over a query
/// set.
pub fn episodic_ce<F: Scalar>(query_probs: &[Vec<F>], query_labels: &[usize]) -> F {
    assert_eq!(query_probs.len(), query_labels.len());
    assert!(!query_probs.is_empty());
    let total: F = query_probs
        .iter()
        .zip(query_labels)
        .map(|(probs, &y)| probs[y].ln())
        .sum();
    -total / F::from_f64(query_probs.len() as f64)
}

/// Components of one optimization step's objective.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub recon_loss: f64,
    pub kl_loss: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `total = task + alpha * (recon + kl)`.
pub fn total_loss(task: f64, recon: f64, kl: f64, alpha: f64) -> LossBreakdown {
    assert!(alpha >= 0.0, "alpha must be nonnegative");
    LossBreakdown {
        task_loss: task,
        recon_loss: recon,
        kl_loss: kl,
        alpha,
        total: task + alpha * (recon + kl),
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates with bias correction plus decoupled weight decay:
/// the decay multiplies the parameter directly and never enters the moments.
pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    step_count: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over a flat parameter list. `lr` is the scheduled rate for
    /// this step; `names` are used in diagnostics only.
    pub fn step(
        &mut self,
        lr: f64,
        names: &[String],
        params: &mut [Tensor<F>],
        grads: &[Tensor<F>],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (name, grad) in names.iter().zip(grads) {
            if !grad.is_finite() {
                return Err(Error::numeric(
                    "optimizer_step",
                    format!("non-finite gradient for {name}"),
                ));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.cfg.beta1.powf(t));
        let bias2 = F::from_f64(1.0 - self.cfg.beta2.powf(t));
        let eps = F::from_f64(self.cfg.eps);
        let lr_f = F::from_f64(lr);
        let decay = F::from_f64(1.0 - lr * self.cfg.weight_decay);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv = *pv * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` to `0.1 * base_lr` over `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past schedule end {total_steps}");
    let eta_min = 0.1 * base_lr;
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step as f64 / total_steps as f64;
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Sums per-micro-batch gradients and divides by the micro-batch count, so
/// one optimizer step sees the mean exactly as a concatenated batch would.
pub struct GradAccumulator<F: Scalar> {
    sums: Vec<Tensor<F>>,
    count: usize,
}

impl<F: Scalar> GradAccumulator<F> {
    pub fn new() -> Self {
        GradAccumulator {
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &[Tensor<F>]) {
        if self.sums.is_empty() {
            self.sums = grads.to_vec();
        } else {
            assert_eq!(self.sums.len(), grads.len());
            for (acc, g) in self.sums.iter_mut().zip(grads) {
                acc.axpy(F::one(), g);
            }
        }
        self.count += 1;
    }

    pub fn micro_batches(&self) -> usize {
        self.count
    }

    /// Mean gradients, resetting the accumulator.
    pub fn take_mean(&mut self) -> Vec<Tensor<F>> {
        assert!(self.count > 0, "nothing accumulated");
        let inv = F::one() / F::from_f64(self.count as f64);
        let mut out = std::mem::take(&mut self.sums);
        for t in out.iter_mut() {
            t.scale_in_place(inv);
        }
        self.count = 0;
        out
    }
}

impl<F: Scalar> Default for GradAccumulator<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_REL_TOL: f64 = 1e-4;
pub const GRAD_CHECK_COORDS_PER_CLASS: usize = 200;

/// A named parameter snapshot used by the gradient checker.
pub type NamedParams = Vec<(String, ParamClass, Tensor<f64>)>;

#[derive(Debug, Clone, Serialize)]
pub struct ClassCheck {
    pub class: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_class: Vec<ClassCheck>,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
    pub failing_tensors: Vec<String>,
}

/// Relative error with an absolute floor: coordinates whose gradients sit
/// below the floor are compared absolutely at `floor * rel`.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients against central finite differences on a
/// random coordinate subset, at least `coords_per_class` per parameter
/// class.
pub fn grad_check(
    params: &NamedParams,
    loss: impl Fn(&NamedParams) -> f64,
    analytic_grads: &[Tensor<f64>],
    rel_tol: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic_grads.len());
    let mut by_class: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for (i, (_, class, _)) in params.iter().enumerate() {
        by_class.entry(class.name()).or_default().push(i);
    }

    let mut per_class = Vec::new();
    let mut failing = Vec::new();
    let mut overall_max: f64 = 0.0;
    for (class_name, tensor_ids) in by_class {
        let total_coords: usize = tensor_ids.iter().map(|&i| params[i].2.numel()).sum();
        let sample_count = GRAD_CHECK_COORDS_PER_CLASS.min(total_coords);
        let mut max_rel: f64 = 0.0;
        let mut worst = String::new();
        for _ in 0..sample_count {
            // uniform over the class's flattened coordinates
            let mut flat = rng.random_range(0..total_coords);
            let mut tensor_id = tensor_ids[0];
            for &i in &tensor_ids {
                let n = params[i].2.numel();
                if flat < n {
                    tensor_id = i;
                    break;
                }
                flat -= n;
            }
            let mut plus = params.clone();
            plus[tensor_id].2.data_mut()[flat] += GRAD_CHECK_STEP;
            let mut minus = params.clone();
            minus[tensor_id].2.data_mut()[flat] -= GRAD_CHECK_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * GRAD_CHECK_STEP);
            let analytic = analytic_grads[tensor_id].data()[flat];
            let rel = relative_error(analytic, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = params[tensor_id].0.clone();
            }
        }
        if max_rel >= rel_tol && !worst.is_empty() {
            failing.push(worst.clone());
        }
        overall_max = overall_max.max(max_rel);
        per_class.push(ClassCheck {
            class: class_name.to_string(),
            coordinates: sample_count,
            max_rel_err: max_rel,
            worst_tensor: worst,
        });
    }
    GradCheckReport {
        per_class,
        max_rel_err: overall_max,
        rel_tol,
        passed: overall_max < rel_tol,
        failing_tensors: failing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::{stream, Concern};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kl_zero_when_posterior_is_prior() {
        let post = LatentPosterior {
            mu: Tensor::<f64>::zeros(&[4]),
            log_var: Tensor::zeros(&[4]),
        };
        assert_eq!(kl_divergence(&post), 0.0);
    }

    #[test]
    fn kl_single_mean_term() {
        let post = LatentPosterior {
            mu: Tensor::vector(&[1.0f64, 0.0]),
            log_var: Tensor::zeros(&[2]),
        };
        assert!((kl_divergence(&post) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_with_equality_only_at_prior() {
        let mut rng = stream(0, Concern::GradCheck, 0);
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let post = LatentPosterior {
                mu: Tensor::vector(&mu),
                log_var: Tensor::vector(&lv),
            };
            let kl = kl_divergence(&post);
            assert!(kl >= 0.0);
            let at_prior = mu.iter().all(|&m| m == 0.0) && lv.iter().all(|&l| l == 0.0);
            if !at_prior {
                assert!(kl > 1e-9 || (mu.iter().all(|&m| m.abs() < 1e-6) && lv.iter().all(|&l| l.abs() < 1e-6)));
            }
        }
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        let post = LatentPosterior {
            mu: Tensor::vector(&[0.8, -0.3, 1.4, 0.1]),
            log_var: Tensor::vector(&[0.5, -0.7, 0.2, -1.1]),
        };
        let closed = kl_divergence(&post);
        // E_q[log q - log p] sampled at z = mu + sigma * eps reduces to
        // sum_j(-lv/2 - eps^2/2 + z^2/2)
        let mut rng = stream(1, Concern::GradCheck, 0);
        let n = 1_000_000;
        let sigma = post.sigma();
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..4 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = post.mu.data()[j] + sigma.data()[j] * eps;
                acc += -0.5 * post.log_var.data()[j] - 0.5 * eps * eps + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        assert!(
            (mc - closed).abs() / closed.abs() < 0.01,
            "mc {} vs closed {}",
            mc,
            closed
        );
    }

    #[test]
    fn recon_loss_cases() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert_eq!(recon_loss(&a, &a), 0.0);
        let b = Tensor::vector(&[4.0, 6.0, 3.0]);
        assert_eq!(recon_loss(&a, &b), 25.0);
        assert_eq!(recon_loss(&a, &b), recon_loss(&b, &a));
    }

    #[test]
    fn episodic_ce_cases() {
        let perfect = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        assert_eq!(episodic_ce(&perfect, &[0, 1]), 0.0);

        let uniform = vec![vec![0.2f64; 5]; 3];
        let ce = episodic_ce(&uniform, &[0, 2, 4]);
        assert!((ce - 5.0f64.ln()).abs() < 1e-12);

        let probs = vec![
            vec![0.7f64, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
        ];
        let expected = -(0.7f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((episodic_ce(&probs, &[0, 1, 2]) - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(3.0, 7.0, 9.0, 0.0).total, 3.0);
        let lb = total_loss(1.0, 2.0, 3.0, 0.01);
        assert!((lb.total - 1.05).abs() < 1e-12);
        let lb = total_loss(0.0, 2.0, 3.0, 1.0);
        assert!((lb.total - 5.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linearity_fuzz() {
        let mut rng = stream(2, Concern::GradCheck, 0);
        for _ in 0..10_000 {
            let task = rng.random::<f64>() * 10.0;
            let recon = rng.random::<f64>() * 10.0;
            let kl = rng.random::<f64>() * 10.0;
            let alpha = rng.random::<f64>();
            let lb = total_loss(task, recon, kl, alpha);
            assert!((lb.total - (task + alpha * (recon + kl))).abs() <= 1e-9);
        }
    }

    #[test]
    fn adamw_zero_grads() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let names = vec!["p".to_string()];
        let mut params = vec![Tensor::vector(&[1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        opt.step(0.1, &names, &mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);

        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(0.1, &names, &mut params, &grads).unwrap();
        // pure multiplicative shrink p * (1 - lr * wd)
        assert!((params[0].data()[0] - 1.0 * 0.95).abs() < 1e-12);
        assert!((params[0].data()[1] + 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        let names = vec!["p".to_string()];
        let mut params = vec![Tensor::vector(&[1.0])];
        for _ in 0..500 {
            let g = vec![Tensor::vector(&[params[0].data()[0]])];
            opt.step(0.05, &names, &mut params, &g).unwrap();
        }
        assert!(params[0].data()[0].abs() < 1e-3, "ended at {}", params[0].data()[0]);
    }

    #[test]
    fn adamw_rejects_non_finite_grads() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let names = vec!["conv.weight".to_string()];
        let mut params = vec![Tensor::vector(&[1.0])];
        let grads = vec![Tensor::vector(&[f64::NAN])];
        let err = opt.step(0.1, &names, &mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("conv.weight"));
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 100, 0.002) - 0.002).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.002) - 0.0002).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.002) - 0.0011).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded() {
        let base = 0.01;
        let mut prev = f64::INFINITY;
        for step in 0..=200 {
            let lr = cosine_lr(step, 200, base);
            assert!(lr <= prev + 1e-15);
            assert!(lr >= 0.1 * base - 1e-15 && lr <= base + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn accumulator_means_micro_batches() {
        let mut acc = GradAccumulator::<f64>::new();
        for i in 1..=4 {
            acc.add(&[Tensor::vector(&[i as f64, 2.0 * i as f64])]);
        }
        assert_eq!(acc.micro_batches(), 4);
        let mean = acc.take_mean();
        assert_eq!(mean[0].data(), &[2.5, 5.0]);
        assert_eq!(acc.micro_batches(), 0);
    }

    fn linear_mse_setup() -> (NamedParams, impl Fn(&NamedParams) -> f64, Vec<Tensor<f64>>) {
        // loss(w, b) = mean over rows of |x w + b - y|^2
        let x = Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]);
        let y = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, -0.5, 2.0, 0.3, 0.3]);
        let params: NamedParams = vec![
            (
                "w".into(),
                ParamClass::HeadWeight,
                Tensor::from_vec(&[2, 2], vec![0.4, -0.2, 0.8, 0.6]),
            ),
            ("b".into(), ParamClass::HeadBias, Tensor::vector(&[0.1, -0.3])),
        ];
        let (x2, y2) = (x.clone(), y.clone());
        let loss = move |p: &NamedParams| -> f64 {
            let mut g = Graph::new();
            let w = g.constant(p[0].2.clone());
            let b = g.constant(p[1].2.clone());
            let xv = g.constant(x2.clone());
            let yv = g.constant(y2.clone());
            let pred = g.matmul(xv, w);
            let pred = g.add_row(pred, b);
            let l = g.mse_loss(pred, yv);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let w = g.param(params[0].2.clone());
        let b = g.param(params[1].2.clone());
        let xv = g.constant(x);
        let yv = g.constant(y);
        let pred = g.matmul(xv, w);
        let pred = g.add_row(pred, b);
        let l = g.mse_loss(pred, yv);
        let grads = g.backward(l);
        let analytic = vec![grads.expect(w).clone(), grads.expect(b).clone()];
        (params, loss, analytic)
    }

    #[test]
    fn grad_check_linear_model_is_tight() {
        let (params, loss, analytic) = linear_mse_setup();
        let mut rng = stream(3, Concern::GradCheck, 0);
        let report = grad_check(&params, loss, &analytic, GRAD_CHECK_REL_TOL, &mut rng);
        assert!(report.passed);
        // quadratics have no truncation error; only roundoff remains
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_catches_corruption() {
        let (params, loss, mut analytic) = linear_mse_setup();
        analytic[0].scale_in_place(2.0);
        let mut rng = stream(4, Concern::GradCheck, 0);
        let report = grad_check(&params, loss, &analytic, GRAD_CHECK_REL_TOL, &mut rng);
        assert!(!report.passed);
        assert!(report.failing_tensors.iter().any(|n| n == "w"));
    }
}
