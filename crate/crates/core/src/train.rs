//! Training loops, evaluation drivers, the ablation sweep, and the
//! full-model gradient check.

use crate::config::{DataSource, RunConfig};
use crate::dataio::{
    augment, load_cifar100_dir, make_synthetic_dataset_with, sample_episode, ClassSplit, Episode,
    LabeledImage, SplitManifest, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{episode_ci, macro_prf1, AblationVariant, ConfusionMatrix, EpisodeStats};
use crate::graph::{column_mean, Graph};
use crate::model::{
    argmax_rows, episodic_graph, supervised_graph, EpisodicInputs, PipelineSettings,
    SupervisedInputs, VdlfModel,
};
use crate::objective::{
    cosine_lr, grad_check, total_loss, AdamW, GradAccumulator, GradCheckReport, LossBreakdown,
    NamedParams, GRAD_CHECK_REL_TOL,
};
use crate::report::{RunReport, StepRecord, SupervisedMetrics};
use crate::rng::{stream, Concern};
use crate::tensor::{Scalar, Tensor};
use crate::varfusion::CenterMode;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::path::Path;

/// Stream-index offset separating evaluation draws from training draws.
const EVAL_INDEX_BASE: u64 = 1 << 40;
/// Train-image share per class when a supervised run must hold out its own
/// test split (synthetic corpora).
const SYNTHETIC_TRAIN_FRACTION: f64 = 0.8;

pub struct DatasetBundle {
    pub pool: Vec<LabeledImage>,
    /// Supervised held-out images; empty in episodic runs.
    pub test_pool: Vec<LabeledImage>,
    pub split: ClassSplit,
    pub n_classes: usize,
}

pub fn load_dataset(config: &RunConfig, for_supervised: bool) -> Result<DatasetBundle> {
    match config.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                n_classes: config.synthetic_classes,
                per_class: config.synthetic_per_class,
                image_side: config.image_side,
                contrast: config.synthetic_contrast,
                noise_sigma: config.synthetic_noise,
            };
            let all = make_synthetic_dataset_with(spec, config.seed)?;
            if for_supervised {
                let cut = (config.synthetic_per_class as f64 * SYNTHETIC_TRAIN_FRACTION) as usize;
                let mut pool = Vec::new();
                let mut test_pool = Vec::new();
                for class in 0..config.synthetic_classes {
                    let members: Vec<_> = all.iter().filter(|i| i.label == class).cloned().collect();
                    pool.extend_from_slice(&members[..cut]);
                    test_pool.extend_from_slice(&members[cut..]);
                }
                Ok(DatasetBundle {
                    pool,
                    test_pool,
                    split: ClassSplit::by_counts(config.synthetic_classes, config.synthetic_classes, 0, 0)?,
                    n_classes: config.synthetic_classes,
                })
            } else {
                let split = ClassSplit::by_counts(
                    config.synthetic_classes,
                    config.train_classes,
                    config.val_classes,
                    config.test_classes,
                )?;
                Ok(DatasetBundle {
                    pool: all,
                    test_pool: Vec::new(),
                    split,
                    n_classes: config.synthetic_classes,
                })
            }
        }
        DataSource::Cifar => {
            let dir = config
                .cifar_dir
                .as_ref()
                .ok_or_else(|| Error::config("cifar_dir is required for the cifar source"))?;
            let (mut train, mut test) = load_cifar100_dir(Path::new(dir))?;
            let n_classes = match config.max_classes {
                Some(m) => {
                    train.retain(|img| img.label < m);
                    test.retain(|img| img.label < m);
                    m
                }
                None => crate::dataio::cifar::FINE_CLASSES,
            };
            if train.is_empty() {
                return Err(Error::data(format!("no training images under {dir}")));
            }
            if for_supervised {
                Ok(DatasetBundle {
                    pool: train,
                    test_pool: test,
                    split: ClassSplit::by_counts(n_classes, n_classes, 0, 0)?,
                    n_classes,
                })
            } else {
                let split = ClassSplit::by_counts(
                    n_classes,
                    config.train_classes,
                    config.val_classes,
                    config.test_classes,
                )?;
                Ok(DatasetBundle {
                    pool: train,
                    test_pool: Vec::new(),
                    split,
                    n_classes,
                })
            }
        }
        DataSource::Folder => {
            if for_supervised {
                return Err(Error::config(
                    "the folder source drives episodic protocols; supervised runs use cifar or synthetic",
                ));
            }
            let root = config
                .folder_root
                .as_ref()
                .ok_or_else(|| Error::config("folder_root is required for the folder source"))?;
            let manifest_path = config
                .manifest
                .as_ref()
                .ok_or_else(|| Error::config("manifest is required for the folder source"))?;
            let manifest = SplitManifest::load(Path::new(manifest_path))?;
            let ds = crate::dataio::folder::load_folder_dataset(Path::new(root), &manifest)?;
            let n_classes = ds.class_names.len();
            Ok(DatasetBundle {
                pool: ds.images,
                test_pool: Vec::new(),
                split: ds.split,
                n_classes,
            })
        }
    }
}

fn stack_images<F: Scalar>(images: &[Tensor<f32>]) -> Tensor<F> {
    let (c, h, w) = (
        images[0].shape()[0],
        images[0].shape()[1],
        images[0].shape()[2],
    );
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!(img.shape(), &[c, h, w]);
        data.extend(img.data().iter().map(|&v| F::from_f64(v as f64)));
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

fn latent_noise<F: Scalar>(seed: u64, index: u64, t_draws: usize, latent: usize) -> Vec<Vec<F>> {
    let mut rng = stream(seed, Concern::LatentNoise, index);
    (0..t_draws)
        .map(|_| {
            (0..latent)
                .map(|_| F::from_f64(StandardNormal.sample(&mut rng)))
                .collect()
        })
        .collect()
}

/// Assemble the padded/normalized image batch and per-support-sample noise
/// for one episode. `base_index` keys the augmentation and latent streams.
fn episode_inputs<F: Scalar>(
    pool: &[LabeledImage],
    episode: &Episode,
    config: &RunConfig,
    latent_dim: usize,
    base_index: u64,
    train_mode: bool,
) -> EpisodicInputs<F> {
    let policy = config.augment_policy();
    let slots: Vec<_> = episode.support.iter().chain(&episode.query).collect();
    let images: Vec<Tensor<f32>> = slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let mut rng = stream(config.seed, Concern::Augment, base_index + i as u64);
            augment(&pool[slot.pool_index], &policy, &mut rng, train_mode)
        })
        .collect();
    let s = episode.support.len();
    // per-sample noise streams make draws independent of batch grouping
    let per_slot: Vec<Vec<Vec<F>>> = (0..s)
        .map(|i| latent_noise(config.seed, base_index + i as u64, config.t_draws, latent_dim))
        .collect();
    let eps_draws: Vec<Tensor<F>> = (0..config.t_draws)
        .map(|t| {
            let mut data = Vec::with_capacity(s * latent_dim);
            for slot_noise in &per_slot {
                data.extend_from_slice(&slot_noise[t]);
            }
            Tensor::from_vec(&[s, latent_dim], data)
        })
        .collect();
    EpisodicInputs {
        images: stack_images(&images),
        support_count: s,
        support_positions: episode.support_labels(),
        query_positions: episode.query_labels(),
        n_way: episode.n_way,
        eps_draws,
    }
}

fn pipeline_settings<F: Scalar>(
    config: &RunConfig,
    variant: AblationVariant,
    center: CenterMode<F>,
) -> PipelineSettings<F> {
    PipelineSettings {
        tau: F::from_f64(config.tau),
        alpha: config.alpha,
        include_kl: variant.include_kl(),
        include_recon: variant.include_recon(),
        uniform_weights: variant.force_uniform_weights(),
        center,
    }
}

fn grads_or_zero<F: Scalar>(
    g: &Graph<F>,
    grads: &crate::graph::Gradients<F>,
    vars: &[crate::graph::Var],
) -> Vec<Tensor<F>> {
    vars.iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect()
}

fn breakdown<F: Scalar>(
    g: &Graph<F>,
    task: crate::graph::Var,
    recon: Option<crate::graph::Var>,
    kl: Option<crate::graph::Var>,
    alpha: f64,
) -> LossBreakdown {
    total_loss(
        g.value(task).item().to_f64_lossy(),
        recon.map(|r| g.value(r).item().to_f64_lossy()).unwrap_or(0.0),
        kl.map(|k| g.value(k).item().to_f64_lossy()).unwrap_or(0.0),
        alpha,
    )
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Meta-train on episodes sampled from the train classes, then evaluate on
/// fresh episodes from the held-out test classes.
pub fn train_episodic(config: &RunConfig) -> Result<(RunReport, VdlfModel<f32>)> {
    train_episodic_variant(config, AblationVariant::Full)
}

pub fn train_episodic_variant(
    config: &RunConfig,
    variant: AblationVariant,
) -> Result<(RunReport, VdlfModel<f32>)> {
    let start = std::time::Instant::now();
    let bundle = load_dataset(config, false)?;
    if bundle.split.train_classes.len() < config.n_way {
        return Err(Error::config(format!(
            "train split has {} classes, episodes need {}",
            bundle.split.train_classes.len(),
            config.n_way
        )));
    }
    if bundle.split.test_classes.len() < config.n_way {
        return Err(Error::config(format!(
            "test split has {} classes, episodes need {}",
            bundle.split.test_classes.len(),
            config.n_way
        )));
    }
    let mut model = VdlfModel::<f32>::init(config.model_config(None), config.seed);
    let mut report = RunReport::new("episodic", config);
    report.variant = Some(variant.tag().to_string());

    let mut opt = AdamW::new(config.adamw_config());
    let mut accumulator = GradAccumulator::new();
    let total_steps = div_ceil(config.train_episodes, config.accumulation) as u64;
    let (names, _, _) = model.collect_params();
    let rows_per_episode = (config.n_way * (config.k_shot + config.q_queries)) as u64;
    let mut step_index = 0u64;

    for e in 0..config.train_episodes {
        let mut sampler = stream(config.seed, Concern::EpisodeSampling, e as u64);
        let episode = sample_episode(
            &bundle.pool,
            &bundle.split.train_classes,
            config.n_way,
            config.k_shot,
            config.q_queries,
            &mut sampler,
        )?;
        let inputs = episode_inputs::<f32>(
            &bundle.pool,
            &episode,
            config,
            config.latent_dim,
            e as u64 * rows_per_episode,
            true,
        );
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = pipeline_settings(config, variant, CenterMode::Batch);
        let out = episodic_graph(&mut g, &model, &bound, &inputs, &settings);

        // fold the batch means into the running centering statistics,
        // support draws first, then queries
        let sm = column_mean(g.value(out.support_fused));
        model.center.update(&Tensor::vector(&sm));
        let qm = column_mean(g.value(out.query_fused));
        model.center.update(&Tensor::vector(&qm));

        let lr = cosine_lr(step_index.min(total_steps), total_steps, config.lr);
        report.steps.push(StepRecord {
            index: e,
            loss: breakdown(&g, out.task, out.recon, out.kl, config.alpha),
            lr,
        });

        let grads = g.backward(out.total);
        let vars = VdlfModel::<f32>::ordered_vars(&bound);
        accumulator.add(&grads_or_zero(&g, &grads, &vars));

        if accumulator.micro_batches() == config.accumulation || e + 1 == config.train_episodes {
            let mean_grads = accumulator.take_mean();
            let (_, _, mut tensors) = model.collect_params();
            opt.step(lr, &names, &mut tensors, &mean_grads)?;
            model.assign_params(&tensors);
            step_index += 1;
        }
    }

    let stats = evaluate_episodic(&model, config, &bundle.pool, &bundle.split.test_classes, variant)?;
    report.episodes = Some(stats);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((report, model))
}

/// Accuracy over fresh episodes from `classes`, evaluated with frozen
/// centering statistics. Episodes run in parallel; per-episode streams keep
/// the outcome independent of scheduling.
pub fn evaluate_episodic(
    model: &VdlfModel<f32>,
    config: &RunConfig,
    pool: &[LabeledImage],
    classes: &BTreeSet<usize>,
    variant: AblationVariant,
) -> Result<EpisodeStats> {
    let rows_per_episode = (config.n_way * (config.k_shot + config.q_queries)) as u64;
    let run_one = |i: usize| -> Result<f64> {
        let mut sampler = stream(config.seed, Concern::EvalSampling, i as u64);
        let episode = sample_episode(
            pool,
            classes,
            config.n_way,
            config.k_shot,
            config.q_queries,
            &mut sampler,
        )?;
        let inputs = episode_inputs::<f32>(
            pool,
            &episode,
            config,
            config.latent_dim,
            EVAL_INDEX_BASE + i as u64 * rows_per_episode,
            false,
        );
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = pipeline_settings(
            config,
            variant,
            CenterMode::Running(model.center.running_mean.clone()),
        );
        let out = episodic_graph(&mut g, model, &bound, &inputs, &settings);
        let predictions = argmax_rows(g.value(out.sims));
        let correct = predictions
            .iter()
            .zip(&inputs.query_positions)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / predictions.len() as f64)
    };
    let accs: Result<Vec<f64>> = if config.deterministic {
        (0..config.test_episodes).map(run_one).collect()
    } else {
        (0..config.test_episodes)
            .into_par_iter()
            .map(run_one)
            .collect()
    };
    episode_ci(&accs?)
}

fn supervised_inputs<F: Scalar>(
    pool: &[LabeledImage],
    indices: &[usize],
    config: &RunConfig,
    latent_dim: usize,
    epoch: u64,
    train_mode: bool,
) -> SupervisedInputs<F> {
    let policy = config.augment_policy();
    let n = pool.len() as u64;
    let images: Vec<Tensor<f32>> = indices
        .iter()
        .map(|&idx| {
            let stream_index = if train_mode {
                epoch * n + idx as u64
            } else {
                EVAL_INDEX_BASE + idx as u64
            };
            let mut rng = stream(config.seed, Concern::Augment, stream_index);
            augment(&pool[idx], &policy, &mut rng, train_mode)
        })
        .collect();
    let eps = (train_mode && config.supervised_stochastic).then(|| {
        let mut data = Vec::with_capacity(indices.len() * latent_dim);
        for &idx in indices {
            let noise = latent_noise::<F>(config.seed, epoch * n + idx as u64, 1, latent_dim);
            data.extend_from_slice(&noise[0]);
        }
        Tensor::from_vec(&[indices.len(), latent_dim], data)
    });
    SupervisedInputs {
        images: stack_images(&images),
        labels: indices.iter().map(|&i| pool[i].label).collect(),
        eps,
    }
}

pub fn train_supervised(config: &RunConfig) -> Result<(RunReport, VdlfModel<f32>)> {
    train_supervised_variant(config, AblationVariant::Full)
}

pub fn train_supervised_variant(
    config: &RunConfig,
    variant: AblationVariant,
) -> Result<(RunReport, VdlfModel<f32>)> {
    let start = std::time::Instant::now();
    let bundle = load_dataset(config, true)?;
    let mut model = VdlfModel::<f32>::init(config.model_config(Some(bundle.n_classes)), config.seed);
    let mut report = RunReport::new("supervised", config);
    report.variant = Some(variant.tag().to_string());

    let mut opt = AdamW::new(config.adamw_config());
    let mut accumulator = GradAccumulator::new();
    let batches_per_epoch = div_ceil(bundle.pool.len(), config.batch_size);
    let total_steps = div_ceil(config.epochs * batches_per_epoch, config.accumulation) as u64;
    let (names, _, _) = model.collect_params();
    let mut step_index = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..bundle.pool.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = stream(config.seed, Concern::Shuffle, epoch as u64);
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = Vec::with_capacity(batches_per_epoch);
        let mut lr = cosine_lr(step_index.min(total_steps), total_steps, config.lr);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let inputs = supervised_inputs::<f32>(
                &bundle.pool,
                batch,
                config,
                config.latent_dim,
                epoch as u64,
                true,
            );
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let settings = pipeline_settings(config, variant, CenterMode::Batch);
            let out = supervised_graph(&mut g, &model, &bound, &inputs, &settings);
            let fm = column_mean(g.value(out.fused));
            model.center.update(&Tensor::vector(&fm));
            epoch_loss.push(breakdown(&g, out.task, out.recon, out.kl, config.alpha));

            let grads = g.backward(out.total);
            let vars = VdlfModel::<f32>::ordered_vars(&bound);
            accumulator.add(&grads_or_zero(&g, &grads, &vars));
            let last_batch = epoch + 1 == config.epochs && b + 1 == order.chunks(config.batch_size).count();
            if accumulator.micro_batches() == config.accumulation || last_batch {
                let mean_grads = accumulator.take_mean();
                lr = cosine_lr(step_index.min(total_steps), total_steps, config.lr);
                let (_, _, mut tensors) = model.collect_params();
                opt.step(lr, &names, &mut tensors, &mean_grads)?;
                model.assign_params(&tensors);
                step_index += 1;
            }
        }
        let mean = |f: fn(&LossBreakdown) -> f64| {
            epoch_loss.iter().map(f).sum::<f64>() / epoch_loss.len() as f64
        };
        report.steps.push(StepRecord {
            index: epoch,
            loss: total_loss(
                mean(|l| l.task_loss),
                mean(|l| l.recon_loss),
                mean(|l| l.kl_loss),
                config.alpha,
            ),
            lr,
        });
    }

    let (cm, metrics) = evaluate_supervised(&model, config, &bundle.test_pool, variant)?;
    debug_assert_eq!(cm.total() as usize, bundle.test_pool.len());
    report.supervised = Some(metrics);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((report, model))
}

/// Deterministic test-set pass: center crop, posterior mean, frozen
/// centering.
pub fn evaluate_supervised(
    model: &VdlfModel<f32>,
    config: &RunConfig,
    test_pool: &[LabeledImage],
    variant: AblationVariant,
) -> Result<(ConfusionMatrix, SupervisedMetrics)> {
    if test_pool.is_empty() {
        return Err(Error::data("supervised evaluation needs a test pool"));
    }
    let n_classes = model
        .head
        .as_ref()
        .map(|h| h.classifier.out_dim())
        .ok_or_else(|| Error::Protocol("model has no supervised head".into()))?;
    let mut cm = ConfusionMatrix::new(n_classes);
    let indices: Vec<usize> = (0..test_pool.len()).collect();
    for batch in indices.chunks(config.batch_size.max(1)) {
        let inputs = supervised_inputs::<f32>(test_pool, batch, config, config.latent_dim, 0, false);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let settings = pipeline_settings(
            config,
            variant,
            CenterMode::Running(model.center.running_mean.clone()),
        );
        let out = supervised_graph(&mut g, model, &bound, &inputs, &settings);
        let predictions = argmax_rows(g.value(out.logits));
        for (&truth, pred) in inputs.labels.iter().zip(predictions) {
            cm.record(truth, pred);
        }
    }
    let (p, r, f1) = macro_prf1(&cm);
    let metrics = SupervisedMetrics {
        accuracy: cm.accuracy(),
        macro_precision: p,
        macro_recall: r,
        macro_f1: f1,
    };
    Ok((cm, metrics))
}

/// Train one ablation variant from scratch under the shared seed.
pub fn run_ablation(
    variant: AblationVariant,
    config: &RunConfig,
    seed: u64,
) -> Result<RunReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    match variant {
        AblationVariant::FineOnly => {
            cfg.pool_grids = vec![fine_grid(&config.pool_grids)?];
        }
        AblationVariant::CoarseOnly => {
            cfg.pool_grids = vec![coarse_grid(&config.pool_grids)?];
        }
        _ => {}
    }
    let (report, _) = train_episodic_variant(&cfg, variant)?;
    Ok(report)
}

/// The grid with the fewest cells (the widest receptive field per cell).
fn fine_grid(grids: &[(usize, usize)]) -> Result<(usize, usize)> {
    single_grid(grids, true)
}

fn coarse_grid(grids: &[(usize, usize)]) -> Result<(usize, usize)> {
    single_grid(grids, false)
}

fn single_grid(grids: &[(usize, usize)], smallest: bool) -> Result<(usize, usize)> {
    if grids.len() < 2 {
        return Err(Error::config(
            "scale ablations need at least two pooling grids to choose from",
        ));
    }
    let key = |g: &(usize, usize)| g.0 * g.1;
    let pick = if smallest {
        grids.iter().min_by_key(|g| key(g))
    } else {
        grids.iter().max_by_key(|g| key(g))
    };
    Ok(*pick.expect("nonempty grids"))
}

/// Run all seven variants from the shared base seed.
pub fn ablate_all(config: &RunConfig) -> Result<Vec<RunReport>> {
    AblationVariant::ALL
        .iter()
        .map(|&variant| run_ablation(variant, config, config.seed))
        .collect()
}

/// Evaluate a trained model per the checkpoint's own protocol: models with
/// a classifier head run the supervised test pass, others run episodic
/// evaluation.
pub fn evaluate_checkpoint(config: &RunConfig) -> Result<RunReport> {
    let start = std::time::Instant::now();
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval mode requires run.checkpoint"))?;
    let raw = crate::checkpoint::load(Path::new(path))?;
    let head_tensor = raw.iter().find(|t| t.name == "head.classifier.weight");
    let mut report;
    if let Some(head) = head_tensor {
        let n_classes = head.dims[1];
        let model = VdlfModel::<f32>::load(Path::new(path), config.model_config(Some(n_classes)))?;
        let bundle = load_dataset(config, true)?;
        if bundle.n_classes != n_classes {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint head covers {} classes, dataset has {}",
                n_classes, bundle.n_classes
            )));
        }
        let (_, metrics) =
            evaluate_supervised(&model, config, &bundle.test_pool, AblationVariant::Full)?;
        report = RunReport::new("eval-supervised", config);
        report.supervised = Some(metrics);
    } else {
        let model = VdlfModel::<f32>::load(Path::new(path), config.model_config(None))?;
        let bundle = load_dataset(config, false)?;
        let stats = evaluate_episodic(
            &model,
            config,
            &bundle.pool,
            &bundle.split.test_classes,
            AblationVariant::Full,
        )?;
        report = RunReport::new("eval-episodic", config);
        report.episodes = Some(stats);
    }
    report.checkpoint = Some(path.clone());
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Verify the full episodic objective against central differences on a
/// 2-way 1-shot micro-episode in double precision.
pub fn gradcheck_episodic(config: &RunConfig) -> Result<GradCheckReport> {
    let micro = micro_episode_config(config);
    let bundle = load_dataset(&micro, false)?;
    let mut sampler = stream(micro.seed, Concern::EpisodeSampling, 0);
    let episode = sample_episode(
        &bundle.pool,
        &bundle.split.train_classes,
        micro.n_way,
        micro.k_shot,
        micro.q_queries,
        &mut sampler,
    )?;
    let model32 = VdlfModel::<f32>::init(micro.model_config(None), micro.seed);
    let model = model32.cast::<f64>();
    let inputs = episode_inputs::<f64>(&bundle.pool, &episode, &micro, micro.latent_dim, 0, true);

    let (param_names, classes, tensors) = model.collect_params();
    let named: NamedParams = param_names
        .iter()
        .cloned()
        .zip(classes)
        .zip(tensors)
        .map(|((n, c), t)| (n, c, t))
        .collect();

    let cfg_for_loss = micro.clone();
    let template = model.cfg.clone();
    let center_mean = model.center.running_mean.clone();
    let loss = move |p: &NamedParams| -> f64 {
        let mut m = VdlfModel::<f64>::init(template.clone(), 0);
        m.center.running_mean = center_mean.clone();
        let flat: Vec<Tensor<f64>> = p.iter().map(|(_, _, t)| t.clone()).collect();
        m.assign_params(&flat);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let settings = pipeline_settings(&cfg_for_loss, AblationVariant::Full, CenterMode::Batch);
        let out = episodic_graph(&mut g, &m, &bound, &inputs, &settings);
        g.value(out.total).item()
    };

    let analytic = {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let inputs = episode_inputs::<f64>(&bundle.pool, &episode, &micro, micro.latent_dim, 0, true);
        let settings = pipeline_settings(&micro, AblationVariant::Full, CenterMode::Batch);
        let out = episodic_graph(&mut g, &model, &bound, &inputs, &settings);
        let grads = g.backward(out.total);
        let vars = VdlfModel::<f64>::ordered_vars(&bound);
        grads_or_zero(&g, &grads, &vars)
    };

    let mut rng = stream(micro.seed, Concern::GradCheck, 0);
    Ok(grad_check(&named, loss, &analytic, GRAD_CHECK_REL_TOL, &mut rng))
}

/// Shrink any run config to a 2-way 1-shot micro-episode on synthetic data.
pub fn micro_episode_config(config: &RunConfig) -> RunConfig {
    let mut micro = config.clone();
    micro.source = DataSource::Synthetic;
    micro.synthetic_classes = 4;
    micro.synthetic_per_class = 4;
    micro.image_side = 12;
    micro.train_classes = 2;
    micro.val_classes = 0;
    micro.test_classes = 2;
    micro.n_way = 2;
    micro.k_shot = 1;
    micro.q_queries = 2;
    micro.t_draws = 2;
    micro.stage_widths = vec![4, 6];
    micro.pool_grids = vec![(2, 2), (1, 1)];
    micro.fused_dim = 6;
    micro.latent_dim = 4;
    micro.vae_hidden = 6;
    micro.gate_hidden = 5;
    micro
}
