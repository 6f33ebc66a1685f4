//! Full model assembly: backbone, variational core, task heads, and the
//! end-to-end training graphs for both protocols.

use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams, BoundBackbone};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heads::HeadParams;
use crate::nn::{linear_forward, BoundLinear, ParamClass, ParamVisitor, ParamVisitorMut};
use crate::rng::{stream, Concern};
use crate::tensor::{Scalar, Tensor};
use crate::varfusion::{
    center_normalize_forward, decoder_forward, encoder_forward, gate_forward,
    reparameterize_forward, CenterMode, CenterStats, VaeConfig, VaeParams,
};
use std::path::Path;

pub const RUNNING_MEAN_NAME: &str = "center.running_mean";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub gate_hidden: usize,
    pub norm_eps: f64,
    /// Supervised classifier width; episodic-only models carry no head.
    pub n_classes: Option<usize>,
}

impl ModelConfig {
    pub fn vae_config(&self) -> VaeConfig {
        let mut cfg = VaeConfig::new(
            self.backbone.fused_dim,
            self.latent_dim,
            self.vae_hidden,
            self.gate_hidden,
            self.backbone.scale_count(),
        );
        cfg.norm_eps = self.norm_eps;
        cfg
    }
}

pub struct VdlfModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub backbone: BackboneParams<F>,
    pub vae: VaeParams<F>,
    pub head: Option<HeadParams<F>>,
    pub center: CenterStats<F>,
}

impl<F: Scalar> VdlfModel<F> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Concern::Init, 0);
        let backbone = BackboneParams::init(&cfg.backbone, &mut rng);
        let vae = VaeParams::init(&cfg.vae_config(), &mut rng);
        let head = cfg
            .n_classes
            .map(|n| HeadParams::init(cfg.backbone.fused_dim, n, &mut rng));
        let center = CenterStats::new(cfg.backbone.fused_dim);
        VdlfModel {
            cfg,
            backbone,
            vae,
            head,
            center,
        }
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_, F>) {
        self.backbone.visit(f);
        self.vae.visit(f);
        if let Some(head) = &self.head {
            head.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        self.backbone.visit_mut(f);
        self.vae.visit_mut(f);
        if let Some(head) = &mut self.head {
            head.visit_mut(f);
        }
    }

    /// Snapshot of every trainable tensor, in visitor order.
    pub fn collect_params(&self) -> (Vec<String>, Vec<ParamClass>, Vec<Tensor<F>>) {
        let mut names = Vec::new();
        let mut classes = Vec::new();
        let mut tensors = Vec::new();
        self.visit(&mut |name, class, tensor| {
            names.push(name.to_string());
            classes.push(class);
            tensors.push(tensor.clone());
        });
        (names, classes, tensors)
    }

    /// Overwrite every trainable tensor from a visitor-ordered snapshot.
    pub fn assign_params(&mut self, tensors: &[Tensor<F>]) {
        let mut iter = tensors.iter();
        self.visit_mut(&mut |_, _, tensor| {
            let next = iter.next().expect("snapshot shorter than model");
            assert_eq!(next.shape(), tensor.shape(), "snapshot shape mismatch");
            *tensor = next.clone();
        });
        assert!(iter.next().is_none(), "snapshot longer than model");
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, _, t| count += t.numel());
        count
    }

    pub fn cast<G: Scalar>(&self) -> VdlfModel<G> {
        VdlfModel {
            cfg: self.cfg.clone(),
            backbone: self.backbone.cast(),
            vae: self.vae.cast(),
            head: self.head.as_ref().map(|h| h.cast()),
            center: CenterStats {
                running_mean: self.center.running_mean.cast(),
            },
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BoundModel {
        let backbone = self.backbone.bind(g);
        let vae = self.vae.bind(g);
        let head = self.head.as_ref().map(|h| h.classifier.bind(g));
        BoundModel {
            backbone,
            vae,
            head,
        }
    }

    /// Graph leaf handles in the same order as [`Self::collect_params`].
    pub fn ordered_vars(bound: &BoundModel) -> Vec<Var> {
        let _ = std::marker::PhantomData::<F>;
        let mut vars = Vec::new();
        for s in &bound.backbone.stages {
            vars.extend([s.weight, s.bias, s.gain, s.shift]);
        }
        for p in &bound.backbone.projections {
            vars.extend([p.weight, p.bias]);
        }
        for l in [
            &bound.vae.enc_hidden,
            &bound.vae.enc_out,
            &bound.vae.dec_hidden,
            &bound.vae.dec_out,
            &bound.vae.gate_hidden,
            &bound.vae.gate_out,
        ] {
            vars.extend([l.weight, l.bias]);
        }
        if let Some(h) = &bound.head {
            vars.extend([h.weight, h.bias]);
        }
        vars
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor<F>)> = Vec::new();
        self.visit(&mut |name, _, tensor| entries.push((name.to_string(), tensor.clone())));
        entries.push((RUNNING_MEAN_NAME.to_string(), self.center.running_mean.clone()));
        checkpoint::save(path, &entries)
    }

    /// Load parameters into a freshly built model of the given
    /// configuration. Every stored tensor must match an expected name and
    /// shape exactly; mismatches are reported by tensor name.
    pub fn load(path: &Path, cfg: ModelConfig) -> Result<Self> {
        let raw = checkpoint::load(path)?;
        let mut model = VdlfModel::init(cfg, 0);
        let mut expected: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
        model.visit(&mut |name, _, tensor| {
            expected.insert(name.to_string(), tensor.shape().to_vec());
        });
        expected.insert(
            RUNNING_MEAN_NAME.to_string(),
            model.center.running_mean.shape().to_vec(),
        );

        let mut loaded: std::collections::BTreeMap<String, Tensor<F>> = Default::default();
        let mut problems = Vec::new();
        for r in &raw {
            match expected.get(&r.name) {
                None => problems.push(format!("unexpected tensor {}", r.name)),
                Some(shape) if shape != &r.dims => problems.push(format!(
                    "{} has shape {:?}, model expects {:?}",
                    r.name, r.dims, shape
                )),
                Some(_) => {
                    loaded.insert(r.name.clone(), r.to_tensor()?);
                }
            }
        }
        for name in expected.keys() {
            if !loaded.contains_key(name) && !problems.iter().any(|p| p.contains(name.as_str())) {
                problems.push(format!("missing tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ShapeMismatch(problems.join("; ")));
        }
        model.visit_mut(&mut |name, _, tensor| {
            *tensor = loaded[name].clone();
        });
        model.center.running_mean = loaded[RUNNING_MEAN_NAME].clone();
        Ok(model)
    }
}

pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub vae: BoundVaeAlias,
    pub head: Option<BoundLinear>,
}

// The bound VAE struct lives in varfusion; aliased here for field clarity.
pub type BoundVaeAlias = crate::varfusion::BoundVae;

/// Loss-path switches shared by both protocols.
pub struct PipelineSettings<F: Scalar> {
    pub tau: F,
    pub alpha: f64,
    pub include_kl: bool,
    pub include_recon: bool,
    /// Bypass the gate with constant `1/K` weights.
    pub uniform_weights: bool,
    pub center: CenterMode<F>,
}

fn gate_or_uniform<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundModel,
    z: Var,
    k: usize,
    uniform: bool,
) -> Var {
    if uniform {
        let rows = g.value(z).rows();
        let w = Tensor::filled(&[rows, k], F::one() / F::from_f64(k as f64));
        g.constant(w)
    } else {
        gate_forward(g, &bound.vae, z)
    }
}

/// Combine task/recon/kl scalars into the weighted total.
fn combine_losses<F: Scalar>(
    g: &mut Graph<F>,
    task: Var,
    recon: Option<Var>,
    kl: Option<Var>,
    alpha: f64,
) -> Var {
    let reg = match (recon, kl) {
        (Some(r), Some(k)) => Some(g.add(r, k)),
        (Some(r), None) => Some(r),
        (None, Some(k)) => Some(k),
        (None, None) => None,
    };
    match reg {
        Some(reg) => {
            let scaled = g.scale(reg, F::from_f64(alpha));
            g.add(task, scaled)
        }
        None => task,
    }
}

pub struct EpisodicInputs<F: Scalar> {
    /// `[S+Q, C, H, W]`, support rows first in class-major order.
    pub images: Tensor<F>,
    pub support_count: usize,
    pub support_positions: Vec<usize>,
    pub query_positions: Vec<usize>,
    pub n_way: usize,
    /// One `[S, latent]` noise tensor per support draw.
    pub eps_draws: Vec<Tensor<F>>,
}

pub struct EpisodicGraph {
    pub task: Var,
    pub recon: Option<Var>,
    pub kl: Option<Var>,
    pub total: Var,
    /// `[Q, N]` cosine similarities between query embeddings and prototypes.
    pub sims: Var,
    pub prototypes: Var,
    pub support_fused: Var,
    pub query_fused: Var,
    pub support_norm: Var,
    pub query_norm: Var,
    pub mu: Var,
    pub log_var: Var,
}

/// Build the episodic objective: T stochastic support embeddings feed
/// class prototypes; queries embed deterministically at the posterior mean
/// and are scored by temperature-scaled cosine similarity.
pub fn episodic_graph<F: Scalar>(
    g: &mut Graph<F>,
    model: &VdlfModel<F>,
    bound: &BoundModel,
    inputs: &EpisodicInputs<F>,
    settings: &PipelineSettings<F>,
) -> EpisodicGraph {
    let s = inputs.support_count;
    let total_rows = inputs.images.shape()[0];
    let q = total_rows - s;
    let t_draws = inputs.eps_draws.len();
    assert!(t_draws >= 1, "at least one support draw");
    assert_eq!(inputs.support_positions.len(), s);
    assert_eq!(inputs.query_positions.len(), q);
    let k = model.cfg.backbone.scale_count();
    let eps_norm = F::from_f64(model.cfg.norm_eps);

    let images = g.constant(inputs.images.clone());
    let ms = backbone_forward(g, &bound.backbone, &model.cfg.backbone, images);
    let (mu, log_var) = encoder_forward(g, &bound.vae, &model.cfg.vae_config(), ms.fused0);

    let support_rows: Vec<usize> = (0..s).collect();
    let query_rows: Vec<usize> = (s..total_rows).collect();
    let scales_s: Vec<Var> = ms.scales.iter().map(|&v| g.select_rows(v, &support_rows)).collect();
    let scales_q: Vec<Var> = ms.scales.iter().map(|&v| g.select_rows(v, &query_rows)).collect();
    let fused0_s = g.select_rows(ms.fused0, &support_rows);
    let fused0_q = g.select_rows(ms.fused0, &query_rows);
    let mu_s = g.select_rows(mu, &support_rows);
    let mu_q = g.select_rows(mu, &query_rows);
    let lv_s = g.select_rows(log_var, &support_rows);

    // T latent draws per support image; each draw re-gates the same scales
    let mut fused_draws = Vec::with_capacity(t_draws);
    let mut z_draws = Vec::with_capacity(t_draws);
    for eps in &inputs.eps_draws {
        assert_eq!(eps.shape(), &[s, model.cfg.latent_dim]);
        let z = reparameterize_forward(g, mu_s, lv_s, eps.clone());
        let w = gate_or_uniform(g, bound, z, k, settings.uniform_weights);
        fused_draws.push(g.weighted_sum_scales(&scales_s, w));
        z_draws.push(z);
    }
    let support_fused = g.concat_rows(&fused_draws);
    let support_norm = center_normalize_forward(g, support_fused, &settings.center, eps_norm);

    // draw-major concatenation: row t*S + i belongs to support slot i
    let segments: Vec<usize> = (0..t_draws)
        .flat_map(|_| inputs.support_positions.iter().copied())
        .collect();
    let prototypes = g.segment_mean(support_norm, &segments, inputs.n_way);

    // deterministic query path at the posterior mean
    let wq = gate_or_uniform(g, bound, mu_q, k, settings.uniform_weights);
    let query_fused = g.weighted_sum_scales(&scales_q, wq);
    let query_norm = center_normalize_forward(g, query_fused, &settings.center, eps_norm);

    let sims = g.cosine_scores(query_norm, prototypes, F::from_f64(crate::heads::COSINE_EPS));
    let logits = g.scale(sims, settings.tau);
    let logp = g.log_softmax_rows(logits);
    let task = g.nll_loss(logp, &inputs.query_positions);

    let recon = settings.include_recon.then(|| {
        let vae_cfg = model.cfg.vae_config();
        let mut hats = Vec::with_capacity(t_draws);
        for &z in &z_draws {
            hats.push(decoder_forward(g, &bound.vae, &vae_cfg, z));
        }
        let hat_all = g.concat_rows(&hats);
        let target_all = g.concat_rows(&vec![fused0_s; t_draws]);
        // mean over S*T rows = mean over images of the per-image draw average
        let recon_s = g.mse_loss(hat_all, target_all);
        let hat_q = decoder_forward(g, &bound.vae, &vae_cfg, mu_q);
        let recon_q = g.mse_loss(hat_q, fused0_q);
        // weight by image counts so the average runs over all episode samples
        let total = (s + q) as f64;
        let ws = g.scale(recon_s, F::from_f64(s as f64 / total));
        let wq = g.scale(recon_q, F::from_f64(q as f64 / total));
        g.add(ws, wq)
    });
    let kl = settings.include_kl.then(|| g.kl_loss(mu, log_var));
    let total = combine_losses(g, task, recon, kl, settings.alpha);

    EpisodicGraph {
        task,
        recon,
        kl,
        total,
        sims,
        prototypes,
        support_fused,
        query_fused,
        support_norm,
        query_norm,
        mu,
        log_var,
    }
}

pub struct SupervisedInputs<F: Scalar> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    /// Latent noise per sample; `None` uses the posterior mean.
    pub eps: Option<Tensor<F>>,
}

pub struct SupervisedGraph {
    pub task: Var,
    pub recon: Option<Var>,
    pub kl: Option<Var>,
    pub total: Var,
    pub logits: Var,
    pub fused: Var,
    pub embedding: Var,
    pub mu: Var,
    pub log_var: Var,
}

pub fn supervised_graph<F: Scalar>(
    g: &mut Graph<F>,
    model: &VdlfModel<F>,
    bound: &BoundModel,
    inputs: &SupervisedInputs<F>,
    settings: &PipelineSettings<F>,
) -> SupervisedGraph {
    let batch = inputs.images.shape()[0];
    assert_eq!(inputs.labels.len(), batch);
    let k = model.cfg.backbone.scale_count();
    let vae_cfg = model.cfg.vae_config();
    let head = bound.head.as_ref().expect("supervised head missing");

    let images = g.constant(inputs.images.clone());
    let ms = backbone_forward(g, &bound.backbone, &model.cfg.backbone, images);
    let (mu, log_var) = encoder_forward(g, &bound.vae, &vae_cfg, ms.fused0);
    let z = match &inputs.eps {
        Some(eps) => {
            assert_eq!(eps.shape(), &[batch, model.cfg.latent_dim]);
            reparameterize_forward(g, mu, log_var, eps.clone())
        }
        None => mu,
    };
    let w = gate_or_uniform(g, bound, z, k, settings.uniform_weights);
    let fused = g.weighted_sum_scales(&ms.scales, w);
    let embedding = center_normalize_forward(g, fused, &settings.center, F::from_f64(model.cfg.norm_eps));
    let logits = linear_forward(g, *head, embedding);
    let logp = g.log_softmax_rows(logits);
    let task = g.nll_loss(logp, &inputs.labels);

    let recon = settings.include_recon.then(|| {
        let hat = decoder_forward(g, &bound.vae, &vae_cfg, z);
        g.mse_loss(hat, ms.fused0)
    });
    let kl = settings.include_kl.then(|| g.kl_loss(mu, log_var));
    let total = combine_losses(g, task, recon, kl, settings.alpha);

    SupervisedGraph {
        task,
        recon,
        kl,
        total,
        logits,
        fused,
        embedding,
        mu,
        log_var,
    }
}

/// Row argmax with ties resolved to the lowest index.
pub fn argmax_rows<F: Scalar>(scores: &Tensor<F>) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn tiny_config(n_classes: Option<usize>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                stage_widths: vec![4, 8],
                pool_grids: vec![(2, 2), (1, 1)],
                fused_dim: 6,
            },
            latent_dim: 4,
            vae_hidden: 5,
            gate_hidden: 5,
            norm_eps: 1e-8,
            n_classes,
        }
    }

    fn noise<F: Scalar>(shape: &[usize], seed: u64) -> Tensor<F> {
        let mut rng = stream(seed, Concern::LatentNoise, 0);
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::from_f64(StandardNormal.sample(&mut rng)))
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn episodic_inputs(seed: u64, t_draws: usize) -> EpisodicInputs<f64> {
        // 2-way 1-shot with 2 queries per class on 8x8 images
        let mut rng = stream(seed, Concern::Synthetic, 5);
        let rows = 2 + 4;
        let n: usize = rows * 3 * 8 * 8;
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        EpisodicInputs {
            images: Tensor::from_vec(&[rows, 3, 8, 8], data),
            support_count: 2,
            support_positions: vec![0, 1],
            query_positions: vec![0, 0, 1, 1],
            n_way: 2,
            eps_draws: (0..t_draws).map(|t| noise(&[2, 4], seed * 31 + t as u64)).collect(),
        }
    }

    #[test]
    fn snapshot_round_trip_preserves_model() {
        let model = VdlfModel::<f32>::init(tiny_config(Some(7)), 1);
        let (names, classes, tensors) = model.collect_params();
        assert_eq!(names.len(), tensors.len());
        assert_eq!(classes.len(), tensors.len());
        let mut other = VdlfModel::<f32>::init(tiny_config(Some(7)), 2);
        other.assign_params(&tensors);
        let (_, _, restored) = other.collect_params();
        assert_eq!(tensors, restored);
    }

    #[test]
    fn ordered_vars_align_with_visitor_order() {
        let model = VdlfModel::<f64>::init(tiny_config(Some(3)), 1);
        let (_, _, tensors) = model.collect_params();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let vars = VdlfModel::<f64>::ordered_vars(&bound);
        assert_eq!(vars.len(), tensors.len());
        for (var, tensor) in vars.iter().zip(&tensors) {
            assert_eq!(g.value(*var), tensor);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch_reporting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = VdlfModel::<f32>::init(tiny_config(Some(5)), 3);
        model.save(&path).unwrap();
        let loaded = VdlfModel::<f32>::load(&path, tiny_config(Some(5))).unwrap();
        let (_, _, a) = model.collect_params();
        let (_, _, b) = loaded.collect_params();
        assert_eq!(a, b);
        assert_eq!(loaded.center.running_mean, model.center.running_mean);

        // a differently shaped model names the offending tensors
        let err = match VdlfModel::<f32>::load(&path, tiny_config(Some(9))) {
            Err(e) => e,
            Ok(_) => panic!("load should fail on shape mismatch"),
        };
        let msg = err.to_string();
        assert!(msg.contains("head.classifier"), "got: {msg}");
    }

    #[test]
    fn episodic_graph_runs_and_losses_compose() {
        let model = VdlfModel::<f64>::init(tiny_config(None), 4);
        let inputs = episodic_inputs(4, 3);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = PipelineSettings {
            tau: 15.0,
            alpha: 0.01,
            include_kl: true,
            include_recon: true,
            uniform_weights: false,
            center: CenterMode::Batch,
        };
        let out = episodic_graph(&mut g, &model, &bound, &inputs, &settings);
        let task = g.value(out.task).item();
        let recon = g.value(out.recon.unwrap()).item();
        let kl = g.value(out.kl.unwrap()).item();
        let total = g.value(out.total).item();
        assert!((total - (task + 0.01 * (recon + kl))).abs() < 1e-12);
        assert!(kl >= 0.0);
        assert_eq!(g.value(out.sims).shape(), &[4, 2]);
        assert_eq!(g.value(out.prototypes).shape(), &[2, 6]);
        assert_eq!(g.value(out.support_norm).shape(), &[6, 6]);

        // gradients reach every parameter
        let grads = g.backward(out.total);
        let vars = VdlfModel::<f64>::ordered_vars(&bound);
        for (var, name) in vars.iter().zip(model.collect_params().0) {
            assert!(grads.get(*var).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn dropped_terms_leave_pure_task_loss() {
        let model = VdlfModel::<f64>::init(tiny_config(None), 5);
        let inputs = episodic_inputs(5, 2);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = PipelineSettings {
            tau: 15.0,
            alpha: 0.01,
            include_kl: false,
            include_recon: false,
            uniform_weights: false,
            center: CenterMode::Batch,
        };
        let out = episodic_graph(&mut g, &model, &bound, &inputs, &settings);
        assert!(out.recon.is_none() && out.kl.is_none());
        assert_eq!(g.value(out.total).item(), g.value(out.task).item());
    }

    #[test]
    fn uniform_weights_match_explicit_uniform_gate() {
        // when the gate would emit exactly 1/K, the bypass is a no-op
        let mut model = VdlfModel::<f64>::init(tiny_config(None), 6);
        model.vae.gate_hidden.weight.scale_in_place(0.0);
        model.vae.gate_hidden.bias.scale_in_place(0.0);
        model.vae.gate_out.weight.scale_in_place(0.0);
        model.vae.gate_out.bias.scale_in_place(0.0);
        let inputs = episodic_inputs(6, 2);
        let run = |uniform: bool| -> Tensor<f64> {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let settings = PipelineSettings {
                tau: 15.0,
                alpha: 0.01,
                include_kl: true,
                include_recon: true,
                uniform_weights: uniform,
                center: CenterMode::Batch,
            };
            let out = episodic_graph(&mut g, &model, &bound, &inputs, &settings);
            g.value(out.sims).clone()
        };
        let gated = run(false);
        let bypassed = run(true);
        assert!(gated.max_abs_diff(&bypassed) < 1e-12);
    }

    #[test]
    fn supervised_graph_runs() {
        let model = VdlfModel::<f64>::init(tiny_config(Some(4)), 7);
        let mut rng = stream(7, Concern::Synthetic, 9);
        let data: Vec<f64> = (0..3 * 3 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        let inputs = SupervisedInputs {
            images: Tensor::from_vec(&[3, 3, 8, 8], data),
            labels: vec![0, 2, 3],
            eps: Some(noise(&[3, 4], 70)),
        };
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = PipelineSettings {
            tau: 1.0,
            alpha: 0.01,
            include_kl: true,
            include_recon: true,
            uniform_weights: false,
            center: CenterMode::Batch,
        };
        let out = supervised_graph(&mut g, &model, &bound, &inputs, &settings);
        assert_eq!(g.value(out.logits).shape(), &[3, 4]);
        let total = g.value(out.total).item();
        assert!(total.is_finite());
        let grads = g.backward(out.total);
        let vars = VdlfModel::<f64>::ordered_vars(&bound);
        assert!(vars.iter().all(|&v| grads.get(v).is_some()));
    }

    #[test]
    fn argmax_rows_tie_breaks_low() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5f64, 0.5, 0.1, 0.1, 0.9, 0.9]);
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
