//! Trainers for the ERM baseline, the self-calibrated source model and the
//! target model, plus evaluation helpers shared by all of them.
//!
//! All runs are deterministic in the config seed: the data order, the model
//! initialisation and the per-batch masks each come from their own derived
//! stream. Source and target see the same batch order.

mod investigation;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_platt, fit_platt, FitOptions, PlattFit, PlattParams};
use crate::config::{Ablation, KdDirection, MimuConfig, PlattRefit, TargetInit};
use crate::error::{MimuError, Result};
use crate::hashing::mix_seed;
use crate::losses::{
    attention_alignment_loss_with_grad, calibration_loss_with_grad, kd_loss_reverse_with_grad,
    kd_loss_with_grad, label_loss_with_grad, mask_and_top_m, one_hot, random_mask, softened,
    softmax_backward, total_target_loss, MaskSet, PROB_EPS,
};
use crate::metrics::{accuracy, ece, EceReport};
use crate::model::{
    backward, forward_cached, gradient_materializations, AttentionGrad, FrozenParams,
    TransformerConfig, TransformerParams,
};
use crate::synthdata::{bundle_hash, DatasetBundle, Example, Modality};

pub use investigation::{
    investigation_configs, run_investigation, InvestigationReport, VariantResult,
    INVESTIGATION_VARIANTS,
};
pub use optim::Sgd;

const STREAM_INIT: u64 = 0x11;
const STREAM_ORDER: u64 = 0x22;
const STREAM_MASK: u64 = 0x33;

/// Mean per-example loss terms over one epoch. Unused terms stay 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// Cross-entropy against the label.
    pub label: f64,
    /// `sum_k (p_k - y_k)^2`, weighted by `lambda_c` in the source objective.
    pub squared_error: f64,
    pub kd: f64,
    pub att: f64,
    pub total: f64,
}

impl LossComponents {
    fn add(&mut self, o: &LossComponents) {
        self.label += o.label;
        self.squared_error += o.squared_error;
        self.kd += o.kd;
        self.att += o.att;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> LossComponents {
        LossComponents {
            label: self.label * s,
            squared_error: self.squared_error * s,
            kd: self.kd * s,
            att: self.att * s,
            total: self.total * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub ece: EceReport,
}

impl SplitMetrics {
    pub fn summary(&self) -> SplitEval {
        SplitEval {
            accuracy: self.accuracy,
            ece: self.ece.ece,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossComponents,
    pub dev: SplitEval,
    /// Filled on OOD evaluation epochs only.
    pub ood: BTreeMap<String, SplitEval>,
    /// Dev metrics after a per-epoch Platt refit.
    pub calibrated_dev: Option<SplitEval>,
    /// Mean last-layer attention vector on dev (source runs).
    pub dev_source_attention: Option<Vec<f64>>,
}

/// Loss settings as actually used by a run, after ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub lambda_c: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub temperature: f64,
    pub mask_fraction: f64,
    pub mask_positions: usize,
    pub top_m: usize,
    pub kd_direction: KdDirection,
    pub exclude_class_token: bool,
    pub target_init: TargetInit,
    pub ablate: Vec<Ablation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub settings: RunSettings,
    pub epochs: Vec<EpochRecord>,
    /// Raw softmax metrics of the final model per split.
    pub final_metrics: BTreeMap<String, SplitMetrics>,
    /// Metrics after Platt calibration (target runs).
    pub calibrated_metrics: Option<BTreeMap<String, SplitMetrics>>,
    pub platt: Option<PlattFit>,
    /// Backward passes recorded against the source parameters while the
    /// target trained; always 0.
    pub source_gradient_materializations: Option<usize>,
    /// Kept out of `report.json` so reruns produce identical files; the CLI
    /// records it in the run manifest.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Accuracy of the deployed prediction path: calibrated when available.
    pub fn accuracy(&self, split: &str) -> Option<f64> {
        self.calibrated_metrics
            .as_ref()
            .unwrap_or(&self.final_metrics)
            .get(split)
            .map(|m| m.accuracy)
    }

    pub fn raw_accuracy(&self, split: &str) -> Option<f64> {
        self.final_metrics.get(split).map(|m| m.accuracy)
    }

    pub fn ece(&self, split: &str) -> Option<f64> {
        self.calibrated_metrics
            .as_ref()
            .unwrap_or(&self.final_metrics)
            .get(split)
            .map(|m| m.ece.ece)
    }

    pub fn raw_ece(&self, split: &str) -> Option<f64> {
        self.final_metrics.get(split).map(|m| m.ece.ece)
    }

    pub fn ood_splits(&self) -> Vec<&str> {
        self.final_metrics
            .keys()
            .map(String::as_str)
            .filter(|s| *s != "dev")
            .collect()
    }

    pub fn mean_ood_accuracy(&self) -> f64 {
        let splits = self.ood_splits();
        if splits.is_empty() {
            return f64::NAN;
        }
        splits.iter().filter_map(|s| self.accuracy(s)).sum::<f64>() / splits.len() as f64
    }

    /// The report with its timing zeroed, for reproducibility comparisons.
    pub fn without_wall_clock(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per epoch; OOD columns are empty on epochs without OOD
    /// evaluation.
    pub fn curves_csv(&self) -> String {
        let ood: Vec<&str> = self.ood_splits();
        let mut out = String::from("epoch,learning_rate,label,squared_error,kd,att,total,dev_accuracy,dev_ece");
        for s in &ood {
            let _ = write!(out, ",{s}_accuracy,{s}_ece");
        }
        out.push('\n');
        for e in &self.epochs {
            let l = &e.loss;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, e.learning_rate, l.label, l.squared_error, l.kd, l.att, l.total,
                e.dev.accuracy, e.dev.ece
            );
            for s in &ood {
                match e.ood.get(*s) {
                    Some(m) => {
                        let _ = write!(out, ",{},{}", m.accuracy, m.ece);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Raw model outputs on one split.
pub struct Scores {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn score_split<F: crate::Real>(params: &TransformerParams<F>, split: &[Example]) -> Result<Scores> {
    let mut logits = Vec::with_capacity(split.len());
    let mut probs = Vec::with_capacity(split.len());
    for ex in split {
        let c = forward_cached(params, &ex.features)?;
        logits.push(c.logits.iter().map(|v| v.as_f64()).collect());
        probs.push(c.probs.iter().map(|v| v.as_f64()).collect());
    }
    Ok(Scores {
        logits,
        probs,
        labels: split.iter().map(|e| e.label).collect(),
    })
}

fn metrics_of(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        accuracy: accuracy(probs, labels)?,
        ece: ece(probs, labels, bins)?,
    })
}

fn calibrate(scores: &Scores, platt: &PlattParams) -> Result<Vec<Vec<f64>>> {
    scores.logits.iter().map(|f| apply_platt(f, platt)).collect()
}

/// Accuracy and ECE of `params` on one split, optionally through Platt.
pub fn evaluate_split<F: crate::Real>(
    params: &TransformerParams<F>,
    split: &[Example],
    bins: usize,
    platt: Option<&PlattParams>,
) -> Result<SplitMetrics> {
    let s = score_split(params, split)?;
    match platt {
        Some(p) => metrics_of(&calibrate(&s, p)?, &s.labels, bins),
        None => metrics_of(&s.probs, &s.labels, bins),
    }
}

/// Metrics on dev and every OOD variant.
pub fn evaluate_bundle<F: crate::Real>(
    params: &TransformerParams<F>,
    bundle: &DatasetBundle,
    bins: usize,
    platt: Option<&PlattParams>,
) -> Result<BTreeMap<String, SplitMetrics>> {
    let mut out = BTreeMap::new();
    for (name, split) in bundle.eval_splits() {
        out.insert(name.to_string(), evaluate_split(params, split, bins, platt)?);
    }
    Ok(out)
}

pub fn model_config(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<TransformerConfig> {
    let c = TransformerConfig::for_input(&bundle.meta.input, bundle.meta.num_classes, &cfg.model);
    c.validate()?;
    Ok(c)
}

/// Initial weights shared by the ERM, source and fresh target models.
pub fn initial_params(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<TransformerParams<f32>> {
    TransformerParams::init(&model_config(bundle, cfg)?, mix_seed(cfg.seed, &[STREAM_INIT]))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[STREAM_ORDER, epoch as u64]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn run_settings(cfg: &MimuConfig, seq_len: usize, lambda_c: f64) -> Result<RunSettings> {
    let w = cfg.loss_weights(seq_len)?;
    let frac = cfg.loss.mask_fraction_for(cfg.data.modality);
    let (n, _) = mask_and_top_m(cfg.alignment_positions(seq_len), frac, cfg.loss.top_m_fraction);
    Ok(RunSettings {
        lambda_c,
        lambda_1: w.lambda_1,
        lambda_2: w.lambda_2,
        temperature: w.temperature,
        mask_fraction: frac,
        mask_positions: n,
        top_m: w.top_m,
        kd_direction: cfg.loss.kd_direction,
        exclude_class_token: cfg.loss.exclude_class_token,
        target_init: cfg.train.target_init,
        ablate: cfg.train.ablate.clone(),
    })
}

fn check_bundle(bundle: &DatasetBundle) -> Result<()> {
    if bundle.train.is_empty() || bundle.dev_iid.is_empty() {
        return Err(MimuError::InvalidInput("bundle needs non-empty train and dev splits".into()));
    }
    Ok(())
}

fn is_ood_epoch(cfg: &MimuConfig, epoch: usize) -> bool {
    epoch % cfg.eval.ood_every == 0 || epoch == cfg.train.epochs
}

fn ood_summaries<F: crate::Real>(
    params: &TransformerParams<F>,
    bundle: &DatasetBundle,
    bins: usize,
    platt: Option<&PlattParams>,
) -> Result<BTreeMap<String, SplitEval>> {
    let mut out = BTreeMap::new();
    for (name, split) in &bundle.ood_variants {
        out.insert(name.clone(), evaluate_split(params, split, bins, platt)?.summary());
    }
    Ok(out)
}

fn mean_dev_source_attention(params: &TransformerParams<f32>, dev: &[Example]) -> Result<Vec<f64>> {
    let (nh, l) = (params.config.num_heads, params.config.seq_len);
    let mut mean = vec![0.0; l];
    for ex in dev {
        let c = forward_cached(params, &ex.features)?;
        for (m, v) in mean.iter_mut().zip(c.attention(nh, l).source_vector().0) {
            *m += v as f64;
        }
    }
    let n = dev.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

fn diverged(epoch: usize, loss: f64, params: &TransformerParams<f32>) -> Result<()> {
    if !loss.is_finite() || !params.all_finite() {
        log::warn!("non-finite loss or weights at epoch {epoch}");
        return Err(MimuError::Diverged { epoch });
    }
    Ok(())
}

/// Finite but huge weights can still overflow inside the forward pass.
fn finite_outputs(epoch: usize, logits: &[f32]) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        log::warn!("non-finite logits at epoch {epoch}");
        Err(MimuError::Diverged { epoch })
    }
}

/// Cross-entropy plus `lambda_c`-weighted squared error; `lambda_c = 0` is
/// plain ERM.
fn train_supervised(
    bundle: &DatasetBundle,
    cfg: &MimuConfig,
    lambda_c: f64,
    mode: &str,
) -> Result<(TransformerParams<f32>, RunReport)> {
    let start = Instant::now();
    check_bundle(bundle)?;
    let mut params = initial_params(bundle, cfg)?;
    let mcfg = params.config.clone();
    let mut grads = TransformerParams::<f32>::zeros(&mcfg)?;
    let n = bundle.train.len();
    let bs = cfg.train.batch_size;
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = Sgd::new(&mcfg, &cfg.train, steps_per_epoch * cfg.train.epochs)?;
    let k = mcfg.num_classes;
    let bins = cfg.eval.ece_bins;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);

    for epoch in 1..=cfg.train.epochs {
        let learning_rate = opt.learning_rate(step);
        let mut sums = LossComponents::default();
        let mut max_norm = 0.0f64;
        for batch in epoch_order(cfg.seed, epoch, n).chunks(bs) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &bundle.train[i];
                let cache = forward_cached(&params, &ex.features)?;
                finite_outputs(epoch, &cache.logits)?;
                let y = one_hot::<f32>(ex.label, k);
                let (_, dp) = calibration_loss_with_grad(&cache.probs, &y, lambda_c)?;
                let ce = -(cache.probs[ex.label] as f64).max(PROB_EPS).ln();
                let sq: f64 = cache
                    .probs
                    .iter()
                    .zip(&y)
                    .map(|(&p, &t)| ((p - t) as f64).powi(2))
                    .sum();
                let total = ce + lambda_c * sq;
                batch_loss += total;
                sums.add(&LossComponents {
                    label: ce,
                    squared_error: sq,
                    total,
                    ..Default::default()
                });
                let dlogits: Vec<f32> = softmax_backward(&cache.probs, &dp)
                    .into_iter()
                    .map(|g| g * scale)
                    .collect();
                backward(&params, &cache, &dlogits, AttentionGrad::None, &mut grads)?;
            }
            diverged(epoch, batch_loss, &params)?;
            let norm = opt.step(&mut params, &mut grads, step);
            diverged(epoch, norm, &params)?;
            max_norm = max_norm.max(norm);
            step += 1;
        }
        let loss = sums.scaled(1.0 / n as f64);
        diverged(epoch, loss.total, &params)?;
        let dev = evaluate_split(&params, &bundle.dev_iid, bins, None)?.summary();
        let ood = if is_ood_epoch(cfg, epoch) {
            ood_summaries(&params, bundle, bins, None)?
        } else {
            BTreeMap::new()
        };
        let dev_source_attention = if mode == "source" {
            Some(mean_dev_source_attention(&params, &bundle.dev_iid)?)
        } else {
            None
        };
        log::info!(
            "{mode} epoch {epoch}: loss {:.4} dev acc {:.4} ece {:.4} max grad norm {max_norm:.3}",
            loss.total,
            dev.accuracy,
            dev.ece
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate,
            loss,
            dev,
            ood,
            calibrated_dev: None,
            dev_source_attention,
        });
    }

    let final_metrics = evaluate_bundle(&params, bundle, bins, None)?;
    let report = RunReport {
        mode: mode.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dataset_hash: bundle_hash(bundle)?,
        settings: run_settings(cfg, mcfg.seq_len, lambda_c)?,
        epochs,
        final_metrics,
        calibrated_metrics: None,
        platt: None,
        source_gradient_materializations: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Plain cross-entropy baseline.
pub fn train_erm(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<(TransformerParams<f32>, RunReport)> {
    train_supervised(bundle, &cfg.effective(), 0.0, "erm")
}

/// Self-calibrated source model, returned frozen. The `s-c` ablation trains
/// it with plain cross-entropy.
pub fn train_source(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<(FrozenParams<f32>, RunReport)> {
    let cfg = cfg.effective();
    let (params, report) = train_supervised(bundle, &cfg, cfg.loss.lambda_c, "source")?;
    Ok((FrozenParams::freeze(params), report))
}

/// Draws the per-batch mask over the positions eligible for alignment.
fn draw_mask(rng: &mut ChaCha8Rng, seq_len: usize, n: usize, exclude_cls: bool) -> Result<MaskSet> {
    if exclude_cls {
        let inner = random_mask(seq_len - 1, n, rng)?;
        let mut pos: Vec<usize> = inner.positions().iter().map(|p| p + 1).collect();
        pos.push(0);
        MaskSet::new(pos, seq_len)
    } else {
        random_mask(seq_len, n, rng)
    }
}

fn fit_dev_platt(params: &TransformerParams<f32>, bundle: &DatasetBundle) -> Result<PlattFit> {
    let s = score_split(params, &bundle.dev_iid)?;
    fit_platt(&s.logits, &s.labels, &FitOptions::default(), "dev")
}

/// Target model trained against a frozen source with label, distillation
/// and masked attention-alignment losses, then Platt-calibrated on dev.
pub fn train_target(
    bundle: &DatasetBundle,
    cfg: &MimuConfig,
    source: &FrozenParams<f32>,
) -> Result<(TransformerParams<f32>, PlattFit, RunReport)> {
    let start = Instant::now();
    let cfg = cfg.effective();
    check_bundle(bundle)?;
    let mut params = match cfg.train.target_init {
        TargetInit::Fresh => initial_params(bundle, &cfg)?,
        TargetInit::Copy => source.params().clone(),
    };
    let mcfg = params.config.clone();
    if source.config.seq_len != mcfg.seq_len {
        return Err(MimuError::shape("source sequence length", mcfg.seq_len, source.config.seq_len));
    }
    if source.config != mcfg {
        return Err(MimuError::shape("source model config", "target config", "different config"));
    }
    let source_grads_before = gradient_materializations(source.id());

    let l = mcfg.seq_len;
    let nh = mcfg.num_heads;
    let k = mcfg.num_classes;
    let settings = run_settings(&cfg, l, cfg.loss.lambda_c)?;
    let weights = cfg.loss_weights(l)?;
    let exclude_cls = cfg.loss.exclude_class_token && cfg.data.modality == Modality::Image;
    let n_mask = settings.mask_positions;
    // the excluded class token occupies one extra masked slot
    weights.validate(l, n_mask + exclude_cls as usize)?;
    let temp = weights.temperature;
    let inv_t = (1.0 / temp) as f32;

    let mut grads = TransformerParams::<f32>::zeros(&mcfg)?;
    let n = bundle.train.len();
    let bs = cfg.train.batch_size;
    let mut opt = Sgd::new(&mcfg, &cfg.train, n.div_ceil(bs) * cfg.train.epochs)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[STREAM_MASK]));
    let bins = cfg.eval.ece_bins;
    let use_att = weights.lambda_2 > 0.0;
    let use_kd = weights.lambda_1 > 0.0;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut platt: Option<PlattFit> = None;

    for epoch in 1..=cfg.train.epochs {
        let learning_rate = opt.learning_rate(step);
        let mut sums = LossComponents::default();
        let mut max_norm = 0.0f64;
        for batch in epoch_order(cfg.seed, epoch, n).chunks(bs) {
            grads.fill_zero();
            let mask = draw_mask(&mut mask_rng, l, n_mask, exclude_cls)?;
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &bundle.train[i];
                let src = forward_cached(source.params(), &ex.features)?;
                let tgt = forward_cached(&params, &ex.features)?;
                finite_outputs(epoch, &tgt.logits)?;
                let y = one_hot::<f32>(ex.label, k);

                let (lab, dp) = label_loss_with_grad(&tgt.probs, &y)?;
                let mut dlogits = softmax_backward(&tgt.probs, &dp);

                let mut kd = 0.0;
                if use_kd {
                    let pt = softened(&tgt.logits, temp);
                    let ps = softened(&src.logits, temp);
                    if pt.iter().any(|&p| p <= 0.0) {
                        log::warn!("softened target probabilities underflowed at epoch {epoch}");
                        return Err(MimuError::Diverged { epoch });
                    }
                    let (v, dpt) = match cfg.loss.kd_direction {
                        KdDirection::TargetSource => kd_loss_with_grad(&pt, &ps, temp)?,
                        KdDirection::SourceTarget => kd_loss_reverse_with_grad(&pt, &ps, temp)?,
                    };
                    let lam = weights.lambda_1 as f32;
                    for (d, g) in dlogits.iter_mut().zip(softmax_backward(&pt, &dpt)) {
                        *d += lam * inv_t * g;
                    }
                    kd = v;
                }

                let (att, mut dat) = if use_att {
                    let a_s = src.attention(nh, l).source_vector();
                    let a_t = tgt.attention(nh, l).target_vector();
                    attention_alignment_loss_with_grad(&a_t.0, &a_s.0, &mask, weights.top_m)?
                } else {
                    (0.0, Vec::new())
                };

                let (lab, kd, att) = (lab as f64, kd as f64, att as f64);
                let total = total_target_loss(lab, kd, att, &weights)?;
                batch_loss += total;
                sums.add(&LossComponents {
                    label: lab,
                    kd,
                    att,
                    total,
                    ..Default::default()
                });

                for d in dlogits.iter_mut() {
                    *d *= scale;
                }
                let attn_grad = if use_att {
                    let lam = weights.lambda_2 as f32 * scale;
                    for g in dat.iter_mut() {
                        *g *= lam;
                    }
                    AttentionGrad::AllLayers(&dat)
                } else {
                    AttentionGrad::None
                };
                backward(&params, &tgt, &dlogits, attn_grad, &mut grads)?;
            }
            diverged(epoch, batch_loss, &params)?;
            let norm = opt.step(&mut params, &mut grads, step);
            diverged(epoch, norm, &params)?;
            max_norm = max_norm.max(norm);
            step += 1;
        }
        let mut loss = sums.scaled(1.0 / n as f64);
        // recompute so the logged total is exactly the weighted sum of the
        // logged components
        loss.total = total_target_loss(loss.label, loss.kd, loss.att, &weights)?;
        diverged(epoch, loss.total, &params)?;

        let dev = evaluate_split(&params, &bundle.dev_iid, bins, None)?.summary();
        let mut calibrated_dev = None;
        if cfg.train.platt_refit == PlattRefit::EveryEpoch || epoch == cfg.train.epochs {
            let fit = fit_dev_platt(&params, bundle)?;
            if cfg.train.platt_refit == PlattRefit::EveryEpoch {
                calibrated_dev =
                    Some(evaluate_split(&params, &bundle.dev_iid, bins, Some(&fit.params()))?.summary());
            }
            platt = Some(fit);
        }
        let ood = if is_ood_epoch(&cfg, epoch) {
            ood_summaries(&params, bundle, bins, None)?
        } else {
            BTreeMap::new()
        };
        log::info!(
            "target epoch {epoch}: loss {:.4} (lab {:.4} kd {:.4} att {:.4}) dev acc {:.4} max grad norm {max_norm:.3}",
            loss.total,
            loss.label,
            loss.kd,
            loss.att,
            dev.accuracy
        );
        epochs.push(EpochRecord {
            epoch,
            learning_rate,
            loss,
            dev,
            ood,
            calibrated_dev,
            dev_source_attention: None,
        });
    }

    let platt = platt.expect("the last epoch always fits Platt parameters");
    let final_metrics = evaluate_bundle(&params, bundle, bins, None)?;
    let calibrated = evaluate_bundle(&params, bundle, bins, Some(&platt.params()))?;
    let report = RunReport {
        mode: "target".into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dataset_hash: bundle_hash(bundle)?,
        settings,
        epochs,
        final_metrics,
        calibrated_metrics: Some(calibrated),
        platt: Some(platt.clone()),
        source_gradient_materializations: Some(gradient_materializations(source.id()) - source_grads_before),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, platt, report))
}

/// Source then target, as one call.
pub struct MimuRun {
    pub source: FrozenParams<f32>,
    pub source_report: RunReport,
    pub target: TransformerParams<f32>,
    pub platt: PlattFit,
    pub target_report: RunReport,
}

pub fn train_mimu(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<MimuRun> {
    let (source, source_report) = train_source(bundle, cfg)?;
    let (target, platt, target_report) = train_target(bundle, cfg, &source)?;
    Ok(MimuRun {
        source,
        source_report,
        target,
        platt,
        target_report,
    })
}

/// Calibrated class probabilities for one example.
pub fn predict_calibrated(
    params: &TransformerParams<f32>,
    platt: &PlattParams,
    example: &Example,
) -> Result<Vec<f64>> {
    let c = forward_cached(params, &example.features)?;
    let f: Vec<f64> = c.logits.iter().map(|&v| v as f64).collect();
    apply_platt(&f, platt)
}
