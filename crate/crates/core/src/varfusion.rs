//! Variational core: posterior encoder, latent-conditioned gate, weighted
//! scale fusion, centered L2 normalization, and the reconstruction decoder.

use crate::backbone::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows_value, Graph, Var};
use crate::nn::{
    linear_forward, mlp2_forward, Activation, LinearParams, ParamClass, ParamVisitor,
    ParamVisitorMut,
};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Bounds that keep `exp(log_var)` representable.
pub const LOG_VAR_MIN: f64 = -40.0;
pub const LOG_VAR_MAX: f64 = 20.0;
/// Running-mean update rate for the centering statistics.
pub const CENTER_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Dimension of the fused feature the encoder consumes.
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Hidden width of the encoder and decoder MLPs.
    pub hidden: usize,
    /// Hidden width of the gating MLP.
    pub gate_hidden: usize,
    /// Number of scales the gate mixes.
    pub scale_count: usize,
    /// Additive guard in the normalization denominator.
    pub norm_eps: f64,
    /// Hidden activation; `Identity` exists for linear test configurations.
    pub activation: Activation,
}

impl VaeConfig {
    pub fn new(input_dim: usize, latent_dim: usize, hidden: usize, gate_hidden: usize, scale_count: usize) -> Self {
        VaeConfig {
            input_dim,
            latent_dim,
            hidden,
            gate_hidden,
            scale_count,
            norm_eps: 1e-8,
            activation: Activation::Relu,
        }
    }
}

/// Diagonal Gaussian posterior for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior<F: Scalar> {
    pub mu: Tensor<F>,
    pub log_var: Tensor<F>,
}

impl<F: Scalar> LatentPosterior<F> {
    pub fn sigma(&self) -> Tensor<F> {
        self.log_var.map(|lv| (lv * F::from_f64(0.5)).exp())
    }
}

/// Softmax gate output: a point on the K-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<F: Scalar> {
    pub w: Vec<F>,
}

impl<F: Scalar> FusionWeights<F> {
    pub fn uniform(k: usize) -> Self {
        FusionWeights {
            w: vec![F::one() / F::from_f64(k as f64); k],
        }
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        let sum: f64 = self.w.iter().map(|&v| v.to_f64_lossy()).sum();
        self.w.iter().all(|&v| v >= F::zero()) && (sum - 1.0).abs() <= tol
    }
}

/// One fusion draw: gate weights, the weighted sum, and its centered
/// normalized form.
#[derive(Debug, Clone)]
pub struct FusionResult<F: Scalar> {
    pub weights: FusionWeights<F>,
    pub fused: Tensor<F>,
    pub normalized: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams<F: Scalar> {
    /// `input_dim -> hidden`
    pub enc_hidden: LinearParams<F>,
    /// `hidden -> 2 * latent_dim` (mean then log-variance columns)
    pub enc_out: LinearParams<F>,
    /// `latent_dim -> hidden`
    pub dec_hidden: LinearParams<F>,
    /// `hidden -> input_dim`
    pub dec_out: LinearParams<F>,
    /// `latent_dim -> gate_hidden`
    pub gate_hidden: LinearParams<F>,
    /// `gate_hidden -> scale_count`
    pub gate_out: LinearParams<F>,
}

impl<F: Scalar> VaeParams<F> {
    pub fn init(cfg: &VaeConfig, rng: &mut impl Rng) -> Self {
        VaeParams {
            enc_hidden: LinearParams::init(cfg.input_dim, cfg.hidden, rng),
            enc_out: LinearParams::init(cfg.hidden, 2 * cfg.latent_dim, rng),
            dec_hidden: LinearParams::init(cfg.latent_dim, cfg.hidden, rng),
            dec_out: LinearParams::init(cfg.hidden, cfg.input_dim, rng),
            gate_hidden: LinearParams::init(cfg.latent_dim, cfg.gate_hidden, rng),
            gate_out: LinearParams::init(cfg.gate_hidden, cfg.scale_count, rng),
        }
    }

    pub fn zeros(cfg: &VaeConfig) -> Self {
        VaeParams {
            enc_hidden: LinearParams::zeros(cfg.input_dim, cfg.hidden),
            enc_out: LinearParams::zeros(cfg.hidden, 2 * cfg.latent_dim),
            dec_hidden: LinearParams::zeros(cfg.latent_dim, cfg.hidden),
            dec_out: LinearParams::zeros(cfg.hidden, cfg.input_dim),
            gate_hidden: LinearParams::zeros(cfg.latent_dim, cfg.gate_hidden),
            gate_out: LinearParams::zeros(cfg.gate_hidden, cfg.scale_count),
        }
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_, F>) {
        self.enc_hidden.visit("vae.enc_hidden", ParamClass::EncoderWeight, ParamClass::EncoderBias, f);
        self.enc_out.visit("vae.enc_out", ParamClass::EncoderWeight, ParamClass::EncoderBias, f);
        self.dec_hidden.visit("vae.dec_hidden", ParamClass::DecoderWeight, ParamClass::DecoderBias, f);
        self.dec_out.visit("vae.dec_out", ParamClass::DecoderWeight, ParamClass::DecoderBias, f);
        self.gate_hidden.visit("vae.gate_hidden", ParamClass::GateWeight, ParamClass::GateBias, f);
        self.gate_out.visit("vae.gate_out", ParamClass::GateWeight, ParamClass::GateBias, f);
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        self.enc_hidden.visit_mut("vae.enc_hidden", ParamClass::EncoderWeight, ParamClass::EncoderBias, f);
        self.enc_out.visit_mut("vae.enc_out", ParamClass::EncoderWeight, ParamClass::EncoderBias, f);
        self.dec_hidden.visit_mut("vae.dec_hidden", ParamClass::DecoderWeight, ParamClass::DecoderBias, f);
        self.dec_out.visit_mut("vae.dec_out", ParamClass::DecoderWeight, ParamClass::DecoderBias, f);
        self.gate_hidden.visit_mut("vae.gate_hidden", ParamClass::GateWeight, ParamClass::GateBias, f);
        self.gate_out.visit_mut("vae.gate_out", ParamClass::GateWeight, ParamClass::GateBias, f);
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BoundVae {
        BoundVae {
            enc_hidden: self.enc_hidden.bind(g),
            enc_out: self.enc_out.bind(g),
            dec_hidden: self.dec_hidden.bind(g),
            dec_out: self.dec_out.bind(g),
            gate_hidden: self.gate_hidden.bind(g),
            gate_out: self.gate_out.bind(g),
        }
    }

    pub fn cast<G: Scalar>(&self) -> VaeParams<G> {
        VaeParams {
            enc_hidden: self.enc_hidden.cast(),
            enc_out: self.enc_out.cast(),
            dec_hidden: self.dec_hidden.cast(),
            dec_out: self.dec_out.cast(),
            gate_hidden: self.gate_hidden.cast(),
            gate_out: self.gate_out.cast(),
        }
    }
}

pub struct BoundVae {
    pub enc_hidden: crate::nn::BoundLinear,
    pub enc_out: crate::nn::BoundLinear,
    pub dec_hidden: crate::nn::BoundLinear,
    pub dec_out: crate::nn::BoundLinear,
    pub gate_hidden: crate::nn::BoundLinear,
    pub gate_out: crate::nn::BoundLinear,
}

// ---- graph builders (training path) ----

/// Posterior parameters for a `[B,input_dim]` batch: `(mu, log_var)`, the
/// log-variance clamped to a representable range.
pub fn encoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    vae: &BoundVae,
    cfg: &VaeConfig,
    fused0: Var,
) -> (Var, Var) {
    let out = mlp2_forward(g, vae.enc_hidden, vae.enc_out, fused0, cfg.activation);
    let mu = g.slice_cols(out, 0, cfg.latent_dim);
    let lv = g.slice_cols(out, cfg.latent_dim, 2 * cfg.latent_dim);
    let lv = g.clamp(lv, F::from_f64(LOG_VAR_MIN), F::from_f64(LOG_VAR_MAX));
    (mu, lv)
}

/// `z = mu + exp(log_var / 2) (*) eps`, with gradients flowing to the
/// posterior parameters only.
pub fn reparameterize_forward<F: Scalar>(
    g: &mut Graph<F>,
    mu: Var,
    log_var: Var,
    eps: Tensor<F>,
) -> Var {
    let half = g.scale(log_var, F::from_f64(0.5));
    let sigma = g.exp(half);
    let noise = g.mul_const(sigma, eps);
    g.add(mu, noise)
}

pub fn gate_forward<F: Scalar>(g: &mut Graph<F>, vae: &BoundVae, z: Var) -> Var {
    let h = linear_forward(g, vae.gate_hidden, z);
    let h = g.relu(h);
    let logits = linear_forward(g, vae.gate_out, h);
    g.softmax_rows(logits)
}

pub fn decoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    vae: &BoundVae,
    cfg: &VaeConfig,
    z: Var,
) -> Var {
    mlp2_forward(g, vae.dec_hidden, vae.dec_out, z, cfg.activation)
}

/// How the centering mean is obtained.
pub enum CenterMode<F: Scalar> {
    /// Subtract the batch's own mean (training).
    Batch,
    /// Subtract a frozen mean (evaluation and the accumulation-equivalence
    /// setting).
    Running(Tensor<F>),
}

pub fn center_normalize_forward<F: Scalar>(
    g: &mut Graph<F>,
    fused: Var,
    mode: &CenterMode<F>,
    eps: F,
) -> Var {
    let centered = match mode {
        CenterMode::Batch => g.center_rows(fused),
        CenterMode::Running(mean) => g.sub_row(fused, mean.clone()),
    };
    g.normalize_rows(centered, eps)
}

// ---- plain per-sample operations ----

fn affine<F: Scalar>(layer: &LinearParams<F>, x: &[F]) -> Vec<F> {
    let (i, o) = (layer.in_dim(), layer.out_dim());
    assert_eq!(x.len(), i);
    let mut out = layer.bias.data().to_vec();
    for (k, &xv) in x.iter().enumerate() {
        if xv == F::zero() {
            continue;
        }
        let row = &layer.weight.data()[k * o..(k + 1) * o];
        for (ov, &wv) in out.iter_mut().zip(row) {
            *ov = *ov + xv * wv;
        }
    }
    out
}

fn activate<F: Scalar>(mut h: Vec<F>, activation: Activation) -> Vec<F> {
    if activation == Activation::Relu {
        for v in h.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
    }
    h
}

/// Posterior for a single fused vector.
pub fn encode<F: Scalar>(
    params: &VaeParams<F>,
    cfg: &VaeConfig,
    f_fused0: &Tensor<F>,
) -> Result<LatentPosterior<F>> {
    assert_eq!(f_fused0.numel(), cfg.input_dim);
    let h = activate(affine(&params.enc_hidden, f_fused0.data()), cfg.activation);
    let out = affine(&params.enc_out, &h);
    let (lo, hi) = (F::from_f64(LOG_VAR_MIN), F::from_f64(LOG_VAR_MAX));
    let mu = Tensor::vector(&out[..cfg.latent_dim]);
    let log_var = Tensor::vector(&out[cfg.latent_dim..]).map(|v| v.max(lo).min(hi));
    if !mu.is_finite() || !log_var.is_finite() {
        return Err(Error::numeric("encode", "non-finite posterior activations"));
    }
    Ok(LatentPosterior { mu, log_var })
}

/// `z = mu + sigma (*) eps` for one sample.
pub fn reparameterize<F: Scalar>(post: &LatentPosterior<F>, eps: &Tensor<F>) -> Tensor<F> {
    assert_eq!(eps.numel(), post.mu.numel());
    let sigma = post.sigma();
    let mut z = post.mu.clone();
    for ((zv, &sv), &ev) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *zv = *zv + sv * ev;
    }
    z
}

/// Softmax gate for a single latent vector.
pub fn gate<F: Scalar>(params: &VaeParams<F>, z: &Tensor<F>) -> FusionWeights<F> {
    let h = activate(affine(&params.gate_hidden, z.data()), Activation::Relu);
    let logits = affine(&params.gate_out, &h);
    let probs = softmax_rows_value(&Tensor::from_vec(&[1, logits.len()], logits));
    FusionWeights {
        w: probs.into_data(),
    }
}

/// Exact weighted sum of the per-scale vectors.
pub fn fuse<F: Scalar>(scales: &MultiScaleFeatures<F>, w: &FusionWeights<F>) -> Tensor<F> {
    assert_eq!(scales.scales.len(), w.w.len(), "one weight per scale");
    let mut out = Tensor::zeros(scales.f_fused0.shape());
    for (scale, &weight) in scales.scales.iter().zip(&w.w) {
        out.axpy(weight, scale);
    }
    out
}

/// Running centering statistics shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterStats<F: Scalar> {
    pub running_mean: Tensor<F>,
}

impl<F: Scalar> CenterStats<F> {
    pub fn new(dim: usize) -> Self {
        CenterStats {
            running_mean: Tensor::zeros(&[dim]),
        }
    }

    pub fn update(&mut self, batch_mean: &Tensor<F>) {
        let m = F::from_f64(CENTER_MOMENTUM);
        let keep = F::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + m * b;
        }
    }
}

/// Center a batch of fused vectors and scale each row to (nearly) unit
/// length. Training uses the batch's own mean and folds it into the running
/// mean; evaluation subtracts the running mean.
pub fn center_normalize<F: Scalar>(
    fused_batch: &Tensor<F>,
    stats: &mut CenterStats<F>,
    eps: F,
    training: bool,
) -> Tensor<F> {
    let (b, d) = (fused_batch.rows(), fused_batch.cols());
    let mean: Vec<F> = if training {
        let m = crate::graph::column_mean(fused_batch);
        stats.update(&Tensor::vector(&m));
        m
    } else {
        stats.running_mean.data().to_vec()
    };
    let mut out = vec![F::zero(); b * d];
    for r in 0..b {
        let row = fused_batch.row(r);
        let centered: Vec<F> = row.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        let norm = centered.iter().map(|&v| v * v).sum::<F>().sqrt();
        let denom = norm + eps;
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(&centered) {
            *o = v / denom;
        }
    }
    Tensor::from_vec(&[b, d], out)
}

/// Reconstruction of the initial fused feature from a latent draw.
pub fn decode_reconstruct<F: Scalar>(
    params: &VaeParams<F>,
    cfg: &VaeConfig,
    z: &Tensor<F>,
) -> Tensor<F> {
    let h = activate(affine(&params.dec_hidden, z.data()), cfg.activation);
    Tensor::vector(&affine(&params.dec_out, &h))
}

/// FAAM embedding of one sample: `T` latent draws condition the gate, each
/// draw mixes the scale vectors, and the mixes are centered against the
/// running mean and normalized. Deterministic mode collapses to one pass at
/// the posterior mean.
pub fn faam_embed<F: Scalar>(
    params: &VaeParams<F>,
    cfg: &VaeConfig,
    scales: &MultiScaleFeatures<F>,
    t_draws: usize,
    rng: &mut impl Rng,
    stochastic: bool,
    stats: &CenterStats<F>,
) -> Result<Vec<FusionResult<F>>> {
    assert!(t_draws >= 1, "at least one draw");
    let post = encode(params, cfg, &scales.f_fused0)?;
    let draws = if stochastic { t_draws } else { 1 };
    let mut results = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = if stochastic {
            let eps: Vec<F> = (0..cfg.latent_dim)
                .map(|_| F::from_f64(StandardNormal.sample(rng)))
                .collect();
            reparameterize(&post, &Tensor::vector(&eps))
        } else {
            post.mu.clone()
        };
        let weights = gate(params, &z);
        let fused = fuse(scales, &weights);
        let eps_norm = F::from_f64(cfg.norm_eps);
        let centered: Vec<F> = fused
            .data()
            .iter()
            .zip(stats.running_mean.data())
            .map(|(&v, &m)| v - m)
            .collect();
        let norm = centered.iter().map(|&v| v * v).sum::<F>().sqrt();
        let denom = norm + eps_norm;
        let normalized = Tensor::vector(&centered).map(|v| v / denom);
        results.push(FusionResult {
            weights,
            fused,
            normalized,
        });
    }
    Ok(results)
}
