//! ABN pre-training and joint self-supervised adaptation.

mod eval;
mod log;

pub use eval::{evaluate, predict_labels, EvalReport, IouAccumulator};
pub use log::{adapt_csv, pretrain_csv, priors_csv, MetricsRow, PriorRow};

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::databench::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{build_target_batch, fuse, ViewOptions};
use crate::imaging::{apply_crop, apply_crop_labels, resample_plane, sample_crop_spec, CropSpec, Image, LabelMap};
use crate::io::create_dir;
use crate::loss::{focal_target_loss, source_ce_loss};
use crate::model::checkpoint::Checkpoint;
use crate::model::{backward, ema_update, forward, predict, sgd_step, BnMode, BnState, ModelParams, SoftmaxMap};
use crate::pseudo::{
    estimate_prior, extract_pseudo_labels, peak_confidence, thresholds, thresholds_without_class_prior,
    ClassPriorState, PseudoLabelMap,
};
use crate::rng::RngStream;
use crate::sampler::{precompute_priors, SamplerState};
use crate::tensor::Tensor;
use eval::stack;

/// Where and how a run reports progress.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for metrics, checkpoints and sidecars; nothing is written
    /// when absent.
    pub out_dir: Option<&'a Path>,
    /// Labeled target images scored every `eval_every` iterations and at the end.
    pub val: Option<&'a Dataset>,
    /// Skips every target computation during adaptation.
    pub source_only: bool,
    /// Called after every adaptation iteration.
    pub observer: Option<&'a mut dyn FnMut(&TrainerState)>,
}

/// A trained segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: ModelParams,
    pub bn: BnState,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub iteration: usize,
    pub phi: ModelParams,
    pub psi: ModelParams,
    pub bn_phi: BnState,
    pub bn_psi: BnState,
    pub velocity: Vec<f64>,
    pub prior: ClassPriorState,
    pub sampler: Option<SamplerState>,
    pub config: RunConfig,
    pub metrics: Vec<MetricsRow>,
    pub priors: Vec<PriorRow>,
}

impl TrainerState {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            input_h: self.config.input_h,
            input_w: self.config.input_w,
            config_hash: self.config.hash(),
            params: self.phi.clone(),
            bn: self.bn_phi.clone(),
            velocity: self.velocity.clone(),
            momentum: Some((self.psi.clone(), self.bn_psi.clone())),
            class_prior: Some(self.prior.chi().to_vec()),
        }
    }
}

pub const CHECKPOINT_FINAL: &str = "model.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PRIORS_CSV: &str = "priors.csv";
pub const SAMPLER_SIDECAR: &str = "chi_matrix.bin";

fn periodic_checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.ckpt")
}

fn guard(iteration: usize, last_good: &Option<PathBuf>) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            iteration,
            last_good: last_good.clone(),
        },
        other => other,
    }
}

fn check_finite(loss: f64, iteration: usize, last_good: &Option<PathBuf>) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            last_good: last_good.clone(),
        })
    }
}

/// Random multi-scale, randomly flipped source crops with their labels.
fn source_batch(cfg: &RunConfig, source: &Dataset, stream: &mut RngStream) -> Result<(Tensor, Vec<LabelMap>)> {
    let mut images = Vec::with_capacity(cfg.batch_source);
    let mut labels = Vec::with_capacity(cfg.batch_source);
    for _ in 0..cfg.batch_source {
        let idx = stream.below(source.len());
        let img = &source.images[idx];
        let spec = sample_crop_spec(img.height(), img.width(), cfg.min_scale, stream);
        images.push(apply_crop(img, &spec, cfg.input_h, cfg.input_w)?);
        labels.push(apply_crop_labels(&source.labels[idx], &spec, cfg.input_h, cfg.input_w)?);
    }
    Ok((stack(&images.iter().collect::<Vec<_>>()), labels))
}

fn target_abn_batch(cfg: &RunConfig, target: &Dataset, stream: &mut RngStream) -> Result<Tensor> {
    let mut images = Vec::with_capacity(cfg.batch_source);
    for _ in 0..cfg.batch_source {
        let img = &target.images[stream.below(target.len())];
        let spec = sample_crop_spec(img.height(), img.width(), cfg.min_scale, stream);
        images.push(apply_crop(img, &spec, cfg.input_h, cfg.input_w)?);
    }
    Ok(stack(&images.iter().collect::<Vec<_>>()))
}

struct Step {
    loss: f64,
    grads: Vec<f64>,
    labeled: usize,
    clamped: usize,
}

/// Mean over the batch of per-image mean cross-entropy, with its gradient.
fn supervised_step(params: &ModelParams, bn: &mut BnState, batch: &Tensor, labels: &[LabelMap], mode: BnMode) -> Result<Step> {
    let out = forward(params, bn, batch, mode)?;
    let b = out.maps.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len() / 3 * params.num_classes());
    for (map, gt) in out.maps.iter().zip(labels) {
        let r = source_ce_loss(map, gt)?;
        loss += r.loss / b;
        dlogits.extend(r.grad_logits.data().iter().map(|g| g / b));
    }
    let dims = vec![out.maps.len(), params.num_classes(), batch.dims()[2], batch.dims()[3]];
    let grads = backward(out.cache.as_ref().expect("training forward keeps its cache"), &Tensor::new(dims, dlogits)?)?;
    Ok(Step { loss, grads, labeled: 0, clamped: 0 })
}

/// Focal target loss averaged over all views, with its gradient.
fn target_step(params: &ModelParams, bn: &mut BnState, batch: &Tensor, pseudo: &[PseudoLabelMap], chi: &[f64], cfg: &RunConfig) -> Result<Step> {
    let out = forward(params, bn, batch, BnMode::Frozen)?;
    let v = out.maps.len() as f64;
    let mut step = Step { loss: 0.0, grads: Vec::new(), labeled: 0, clamped: 0 };
    let mut dlogits = Vec::with_capacity(batch.len() / 3 * params.num_classes());
    for (map, p) in out.maps.iter().zip(pseudo) {
        let r = focal_target_loss(map, p, chi, cfg.lambda, cfg.target_loss_scale)?;
        step.loss += r.loss / v;
        step.labeled += r.count;
        step.clamped += r.clamp_count;
        dlogits.extend(r.grad_logits.data().iter().map(|g| g / v));
    }
    let dims = vec![out.maps.len(), params.num_classes(), batch.dims()[2], batch.dims()[3]];
    step.grads = backward(out.cache.as_ref().expect("training forward keeps its cache"), &Tensor::new(dims, dlogits)?)?;
    Ok(step)
}

/// Maps a canvas-frame pseudo-label map into a crop's frame at `out_h×out_w`:
/// nearest neighbour for labels, bilinear for confidences.
pub fn pseudo_to_crop_frame(pseudo: &PseudoLabelMap, spec: &CropSpec, out_h: usize, out_w: usize) -> Result<PseudoLabelMap> {
    let labels = apply_crop_labels(&pseudo.labels, spec, out_h, out_w)?;
    let mut confidence = vec![0.0; out_h * out_w];
    resample_plane(&pseudo.confidence, pseudo.height(), pseudo.width(), spec, out_h, out_w, &mut confidence);
    Ok(PseudoLabelMap { labels, confidence })
}

fn write_checkpoint(dir: Option<&Path>, name: &str, ckpt: &Checkpoint) -> Result<Option<PathBuf>> {
    match dir {
        Some(d) => {
            let path = d.join(name);
            ckpt.save(&path)?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}

fn due(every: usize, t: usize, last: usize) -> bool {
    (every > 0 && t % every == 0) || t == last
}

/// Supervised source training whose BN statistics also see target batches:
/// each iteration takes one source step, then one target forward pass that
/// only refreshes the running statistics.
pub fn pretrain_abn(cfg: &RunConfig, source: &Dataset, target: &Dataset, opts: RunOptions<'_>) -> Result<Trained> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one source image".into()));
    }
    let root = RngStream::root(cfg.seed).derive("pretrain");
    let mut params = ModelParams::init(cfg.num_classes, &mut root.derive("init"));
    let mut bn = BnState::new(cfg.bn_momentum);
    let mut velocity = vec![0.0; params.len()];
    let mut metrics = Vec::with_capacity(cfg.pretrain_iters);
    let mut last_good = None;
    if let Some(d) = opts.out_dir {
        create_dir(d)?;
    }
    let last = cfg.pretrain_iters;
    for t in 1..=last {
        let it = root.derive(&format!("iter={t}"));
        let (batch, labels) = source_batch(cfg, source, &mut it.derive("source"))?;
        let step = supervised_step(&params, &mut bn, &batch, &labels, BnMode::TrainStats).map_err(guard(t, &last_good))?;
        check_finite(step.loss, t, &last_good)?;
        sgd_step(params.values_mut(), &step.grads, &mut velocity, cfg.lr, cfg.sgd_momentum, cfg.weight_decay);

        if !target.is_empty() {
            let batch = target_abn_batch(cfg, target, &mut it.derive("target"))?;
            forward(&params, &mut bn, &batch, BnMode::TrainStats).map_err(guard(t, &last_good))?;
        }

        let miou_val = match opts.val {
            Some(v) if due(cfg.eval_every, t, last) => Some(evaluate(&params, &bn, v)?.miou),
            _ => None,
        };
        metrics.push(MetricsRow {
            iteration: t,
            source_loss: step.loss,
            target_loss: None,
            labeled_fraction: None,
            clamp_count: None,
            miou_val,
            chi: None,
        });
        if let Some(d) = opts.out_dir {
            if due(cfg.checkpoint_every, t, last) {
                let ckpt = Checkpoint {
                    iteration: t,
                    input_h: cfg.input_h,
                    input_w: cfg.input_w,
                    config_hash: cfg.hash(),
                    params: params.clone(),
                    bn: bn.clone(),
                    velocity: velocity.clone(),
                    momentum: None,
                    class_prior: None,
                };
                let name = if t == last { CHECKPOINT_FINAL.to_string() } else { periodic_checkpoint_name(t) };
                last_good = write_checkpoint(Some(d), &name, &ckpt)?;
                log::write_text(&d.join(METRICS_CSV), &pretrain_csv(&metrics))?;
            }
        }
    }
    Ok(Trained { params, bn, metrics })
}

/// Per-image prior matrix of the target set under a fixed network.
pub fn target_sampler(params: &ModelParams, bn: &BnState, target: &[Image]) -> Result<SamplerState> {
    precompute_priors(target, |img| {
        Ok(predict(params, bn, &stack(&[img]))?.remove(0))
    })
}

/// Per-class thresholds for one fused map: a forced constant when set,
/// `ζ·m*` without class-based thresholding, else the prior-aware rule.
pub fn target_thresholds(cfg: &RunConfig, prior: &ClassPriorState, peak: &[f64]) -> Vec<f64> {
    match cfg.force_threshold {
        Some(f) => vec![f; peak.len()],
        None if cfg.ablation.no_cbt => thresholds_without_class_prior(cfg.zeta, peak),
        None => thresholds(prior, peak),
    }
}

/// Pseudo labels for one target image, already mapped into every view's frame.
struct TargetSupervision {
    views: Vec<Image>,
    pseudo: Vec<PseudoLabelMap>,
    prior: Vec<f64>,
    theta: Vec<f64>,
}

fn supervise_target(state: &TrainerState, img: &Image, stream: &RngStream) -> Result<TargetSupervision> {
    let cfg = &state.config;
    let a = &cfg.ablation;
    let crops = if a.no_multiscale { 0 } else { cfg.crops_per_image };
    let options = ViewOptions {
        photometric: !a.no_photometric,
        flip: !a.no_flip,
    };
    let tb = build_target_batch(img, crops, cfg.min_scale, cfg.input_h, cfg.input_w, options, stream)?;
    let clean: Vec<&Image> = tb.clean_views().collect();
    let preds: Vec<SoftmaxMap> = predict(&state.psi, &state.bn_psi, &stack(&clean))?;
    let fused = fuse(&preds, &tb.crop_specs, (img.height(), img.width()), cfg.fusion_mode)?;

    let theta = target_thresholds(cfg, &state.prior, &peak_confidence(&fused.map));
    let mut pseudo = extract_pseudo_labels(&fused.map, &theta)?;
    if a.no_conf_reg {
        pseudo = pseudo.with_unit_confidence();
    }
    let per_view = tb
        .specs()
        .iter()
        .map(|s| pseudo_to_crop_frame(&pseudo, s, cfg.input_h, cfg.input_w))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSupervision {
        views: tb.noisy_views().cloned().collect(),
        pseudo: per_view,
        prior: estimate_prior(&fused.map),
        theta,
    })
}

/// Joint source/target training from a pretrained network.
pub fn adapt(
    cfg: &RunConfig,
    pretrained: (&ModelParams, &BnState),
    source: &Dataset,
    target: &Dataset,
    sampler: Option<SamplerState>,
    mut opts: RunOptions<'_>,
) -> Result<TrainerState> {
    if source.is_empty() || (target.is_empty() && !opts.source_only) {
        return Err(Error::InvalidArgument("adaptation needs source and target images".into()));
    }
    let (params, bn) = pretrained;
    if params.num_classes() != cfg.num_classes {
        return Err(Error::Shape(format!(
            "pretrained network has {} classes, config {}",
            params.num_classes(),
            cfg.num_classes
        )));
    }
    if let Some(d) = opts.out_dir {
        create_dir(d)?;
    }
    let sampler = match sampler {
        Some(s) => Some(s),
        None if !cfg.ablation.no_importance_sampling && !opts.source_only => {
            let s = target_sampler(params, bn, &target.images)?;
            if let Some(d) = opts.out_dir {
                s.save(&d.join(SAMPLER_SIDECAR))?;
            }
            Some(s)
        }
        None => None,
    };
    let mut state = TrainerState {
        iteration: 0,
        phi: params.clone(),
        psi: params.clone(),
        bn_phi: bn.clone(),
        bn_psi: bn.clone(),
        velocity: vec![0.0; params.len()],
        prior: ClassPriorState::uniform(cfg.num_classes, cfg.gamma_chi, cfg.beta, cfg.zeta),
        sampler,
        config: cfg.clone(),
        metrics: Vec::with_capacity(cfg.adapt_iters),
        priors: Vec::with_capacity(cfg.adapt_iters),
    };
    let root = RngStream::root(cfg.seed).derive("adapt");
    let k = cfg.num_classes;
    let mut last_good = None;
    let last = cfg.adapt_iters;
    for t in 1..=last {
        let it = root.derive(&format!("iter={t}"));

        let mut target_loss = None;
        let mut labeled_fraction = None;
        let mut clamp_count = None;
        let mut grads = None;
        let mut observed = None;
        if !opts.source_only {
            let mut pick = it.derive("sample");
            let mut views = Vec::new();
            let mut pseudo = Vec::new();
            let mut prior_sum = vec![0.0; k];
            let mut theta_sum = vec![0.0; k];
            for j in 0..cfg.batch_target_images {
                let idx = match &state.sampler {
                    Some(s) => s.draw(&mut pick),
                    None => pick.below(target.len()),
                };
                let sup = supervise_target(&state, &target.images[idx], &it.derive(&format!("target={j}")))
                    .map_err(guard(t, &last_good))?;
                for c in 0..k {
                    prior_sum[c] += sup.prior[c];
                    theta_sum[c] += sup.theta[c];
                }
                views.extend(sup.views);
                pseudo.extend(sup.pseudo);
            }
            let n_img = cfg.batch_target_images as f64;
            let batch = stack(&views.iter().collect::<Vec<_>>());
            let step = target_step(&state.phi, &mut state.bn_phi, &batch, &pseudo, state.prior.chi(), cfg)
                .map_err(guard(t, &last_good))?;
            check_finite(step.loss, t, &last_good)?;
            target_loss = Some(step.loss);
            labeled_fraction = Some(step.labeled as f64 / (pseudo.len() * cfg.input_h * cfg.input_w) as f64);
            clamp_count = Some(step.clamped);
            grads = Some(step.grads);
            observed = Some((
                prior_sum.iter().map(|v| v / n_img).collect::<Vec<_>>(),
                theta_sum.iter().map(|v| v / n_img).collect::<Vec<_>>(),
            ));
        }

        let (batch, labels) = source_batch(cfg, source, &mut it.derive("source"))?;
        let src = supervised_step(&state.phi, &mut state.bn_phi, &batch, &labels, BnMode::Frozen)
            .map_err(guard(t, &last_good))?;
        check_finite(src.loss, t, &last_good)?;
        let total = match grads {
            Some(mut g) => {
                for (a, b) in g.iter_mut().zip(&src.grads) {
                    *a += b;
                }
                g
            }
            None => src.grads,
        };
        sgd_step(state.phi.values_mut(), &total, &mut state.velocity, cfg.adapt_lr, cfg.sgd_momentum, cfg.weight_decay);

        if let Some((prior, theta)) = observed {
            let chi_before = state.prior.chi().to_vec();
            state.prior.update(&prior)?;
            state.priors.push(PriorRow { iteration: t, chi: chi_before, theta });
        }
        if t % cfg.momentum_period == 0 {
            ema_update(&mut state.psi, &state.phi, cfg.gamma_psi)?;
            state.bn_psi = state.bn_phi.clone();
        }
        state.iteration = t;

        let miou_val = match opts.val {
            Some(v) if due(cfg.eval_every, t, last) => Some(evaluate(&state.phi, &state.bn_phi, v)?.miou),
            _ => None,
        };
        state.metrics.push(MetricsRow {
            iteration: t,
            source_loss: src.loss,
            target_loss,
            labeled_fraction,
            clamp_count,
            miou_val,
            chi: (!opts.source_only).then(|| state.prior.chi().to_vec()),
        });
        if let Some(d) = opts.out_dir {
            if due(cfg.checkpoint_every, t, last) {
                let name = if t == last { CHECKPOINT_FINAL.to_string() } else { periodic_checkpoint_name(t) };
                last_good = write_checkpoint(Some(d), &name, &state.checkpoint())?;
                log::write_text(&d.join(METRICS_CSV), &adapt_csv(&state.metrics, k))?;
                log::write_text(&d.join(PRIORS_CSV), &priors_csv(&state.priors, k))?;
            }
        }
        if let Some(f) = opts.observer.as_mut() {
            f(&state);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::IGNORE;

    fn pseudo(h: usize, w: usize) -> PseudoLabelMap {
        let labels = (0..h * w).map(|i| if i % 7 == 0 { IGNORE } else { (i % 3) as u8 }).collect();
        let confidence = (0..h * w).map(|i| 0.4 + 0.5 * ((i * 13) % 11) as f64 / 11.0).collect();
        PseudoLabelMap { labels: LabelMap::from_raw(h, w, labels), confidence }
    }

    #[test]
    fn crop_frame_identity() {
        let p = pseudo(12, 10);
        let q = pseudo_to_crop_frame(&p, &CropSpec::full(12, 10), 12, 10).unwrap();
        assert_eq!(p.labels, q.labels);
        for (a, b) in p.confidence.iter().zip(&q.confidence) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_frame_all_ignore() {
        let p = PseudoLabelMap::all_ignore(16, 16);
        let spec = sample_crop_spec(16, 16, 0.5, &mut RngStream::root(3));
        let q = pseudo_to_crop_frame(&p, &spec, 8, 8).unwrap();
        assert!(q.labels.data().iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn crop_frame_creates_no_classes() {
        let p = pseudo(20, 20);
        let mut s = RngStream::root(9);
        for _ in 0..50 {
            let spec = sample_crop_spec(20, 20, 0.3, &mut s);
            let q = pseudo_to_crop_frame(&p, &spec, 13, 17).unwrap();
            assert!(q.labels.data().iter().all(|l| p.labels.data().contains(l)));
        }
    }
}
