//! Source training, target adaptation (SHOT or RCHC), evaluation and exports.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{AdaptationConfig, Mode};
pub use metrics::{accuracy, Accuracy, Evaluator, MetricsRecord, METRICS_FIELDS};

use crate::autodiff::{softmax, Graph, Sgd, Tensor};
use crate::data::{grid_side, rotate_flat, LabeledDataset};
use crate::error::{Error, Result};
use crate::fmt_num;
use crate::losses::{
    info_entropy_loss, label_smoothing_ce, pseudo_label_ce, rotation_loss, signed_entropy_loss, total_loss_graph,
    LossBreakdown,
};
use crate::model::{init_target_from_source, ModelParams, ParamGroup, ROTATION_CLASSES};
use crate::pseudo_label::{conflict_flags, generate_pseudo_labels, threshold_stats, PseudoLabelTable, ThresholdStats};

/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 3] = [2019, 2020, 2021];

// Independent random streams per stage, so the adaptation draws do not
// depend on how many the source stage consumed.
const SOURCE_STREAM: u64 = 0;
const ADAPT_STREAM: u64 = 1;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One SGD update over every trainable tensor that received a gradient.
fn apply_grads(
    model: &mut ModelParams,
    sgd: &mut Sgd,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &AdaptationConfig,
    rotation_active: bool,
) -> Result<()> {
    let groups: Vec<(String, ParamGroup)> = model.named_tensors().into_iter().map(|(n, g, _)| (n, g)).collect();
    for (name, group) in groups {
        if !model.is_trainable(group) || (!rotation_active && name.starts_with("rotation.")) {
            continue;
        }
        let Some(grad) = grads.get(&name) else { continue };
        let lr = match group {
            ParamGroup::Backbone => cfg.lr_backbone(),
            _ => cfg.lr_new_layers(),
        };
        let param = model
            .tensor_mut(&name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        sgd.step(&name, param, grad, lr)?;
    }
    Ok(())
}

/// The randomly initialized source model `train_source` starts from.
pub fn init_source_model(cfg: &AdaptationConfig, in_dim: usize, n_classes: usize) -> ModelParams {
    let mut rng = stage_rng(cfg.seed, SOURCE_STREAM);
    ModelParams::init(&cfg.architecture(in_dim, n_classes), &mut rng)
}

/// Supervised training on labeled source data with label-smoothed
/// cross-entropy.
pub fn train_source(cfg: &AdaptationConfig, data: &LabeledDataset, n_classes: usize) -> Result<ModelParams> {
    cfg.validate()?;
    let labels = data.require_labels()?;
    if n_classes < 2 {
        return Err(Error::config(format!("n_classes: need at least 2, got {n_classes}")));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::contract(format!("source label {bad} outside [0, {n_classes})")));
    }
    if data.is_empty() {
        return Err(Error::contract("empty source dataset"));
    }
    let mut rng = stage_rng(cfg.seed, SOURCE_STREAM);
    let mut model = ModelParams::init(&cfg.architecture(data.dim(), n_classes), &mut rng);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    for _ in 0..cfg.source_epochs {
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let x = g.constant(data.inputs.select_rows(&idx));
            let (emb, moments) = model.embed_graph(&mut g, &p, x, true)?;
            let logits = model.classify_graph(&mut g, &p, emb)?;
            let loss = label_smoothing_ce(&mut g, logits, &y, cfg.alpha_smooth)?;
            g.backward(loss)?;
            let grads = p.grads(&g);
            apply_grads(&mut model, &mut sgd, &grads, cfg, false)?;
            if let Some(m) = moments {
                model.batch_norm.update_running(&m);
            }
        }
    }
    Ok(model)
}

/// Accuracy of `model` on labeled `data`.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset) -> Result<Accuracy> {
    let labels = data.require_labels()?;
    let preds = model.predict(&data.inputs)?;
    accuracy(&preds, labels, model.n_classes())
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    /// Loss breakdown of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
    /// Batches that held both conflict and non-conflict samples.
    pub mixed_sign_batches: usize,
}

/// Called after every epoch with its record and the current model.
pub type EpochObserver<'a> = dyn FnMut(&MetricsRecord, &ModelParams) -> Result<()> + 'a;

/// [`adapt_target_with`] without an observer.
pub fn adapt_target(
    cfg: &AdaptationConfig,
    source: &ModelParams,
    target_inputs: &Tensor,
    evaluator: Option<&Evaluator>,
) -> Result<AdaptOutcome> {
    adapt_target_with(cfg, source, target_inputs, evaluator, &mut |_, _| Ok(()))
}

/// Adapts a copy of `source` to unlabeled target inputs. Ground truth, if
/// any, is only reachable through `evaluator`, which scores predictions for
/// the metrics stream.
pub fn adapt_target_with(
    cfg: &AdaptationConfig,
    source: &ModelParams,
    target_inputs: &Tensor,
    evaluator: Option<&Evaluator>,
    observer: &mut EpochObserver<'_>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let n = target_inputs.rows();
    if n == 0 {
        return Err(Error::contract("empty target dataset"));
    }
    if target_inputs.cols() != source.in_dim() {
        return Err(Error::contract(format!(
            "target width {} does not match model input width {}",
            target_inputs.cols(),
            source.in_dim()
        )));
    }
    if let Some(ev) = evaluator {
        if ev.len() != n {
            return Err(Error::contract("evaluator labels do not cover the target set"));
        }
    }
    let side = if cfg.rotation_enabled {
        Some(grid_side(target_inputs.cols()).ok_or_else(|| {
            Error::config(format!("rotation_enabled: input width {} is not a square grid", target_inputs.cols()))
        })?)
    } else {
        None
    };

    let mut rng = stage_rng(cfg.seed, ADAPT_STREAM);
    let mut model = init_target_from_source(source, &mut rng);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let r_th = cfg.effective_r_th();
    let mut outcome = AdaptOutcome { model: model.clone(), metrics: Vec::new(), steps: Vec::new(), mixed_sign_batches: 0 };

    for epoch in 1..=cfg.epochs {
        let (emb, probs) = model.embed_and_predict(target_inputs)?;
        let (table, _) = generate_pseudo_labels(&emb, &probs, epoch).map_err(|e| match e {
            Error::Clustering { msg, .. } => Error::Clustering { epoch: Some(epoch), msg },
            other => other,
        })?;
        let start_hyp = probs.argmax_rows();
        let agree: Vec<bool> = table.labels.iter().zip(&start_hyp).map(|(a, b)| a == b).collect();
        let ratio_median_nonconflict = threshold_stats(&table.ratios, &agree).ok().map(|s| s.median);
        let pseudo_label_accuracy = evaluator.map(|ev| ev.score(&table.labels)).transpose()?.map(|a| a.overall);

        let mut sums = LossBreakdown::default();
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let step = adapt_step(cfg, &mut model, &mut sgd, target_inputs, &idx, &table, r_th, side, &mut rng)?;
            if step.conflict_count > 0 && step.conflict_count < step.batch_size {
                outcome.mixed_sign_batches += 1;
            }
            let w = step.batch_size as f64;
            sums.l_ent += w * step.l_ent;
            sums.l_info += w * step.l_info;
            sums.l_ce += w * step.l_ce;
            sums.l_rot += w * step.l_rot;
            sums.total += w * step.total;
            sums.conflict_count += step.conflict_count;
            sums.batch_size += step.batch_size;
            outcome.steps.push(step);
        }
        let w = sums.batch_size as f64;
        let mean = LossBreakdown {
            l_ent: sums.l_ent / w,
            l_info: sums.l_info / w,
            l_ce: sums.l_ce / w,
            l_rot: sums.l_rot / w,
            total: sums.total / w,
            ..sums
        };
        let acc = evaluator.map(|ev| ev.score(&model.predict(target_inputs)?)).transpose()?;
        let record = MetricsRecord {
            epoch,
            accuracy: acc.as_ref().map(|a| a.overall),
            mean_class_accuracy: acc.as_ref().map(|a| a.mean_per_class),
            per_class_accuracy: acc.map(|a| a.per_class).unwrap_or_default(),
            pseudo_label_accuracy,
            conflict_count: sums.conflict_count,
            loss_breakdown: mean,
            ratio_median_nonconflict,
        };
        observer(&record, &model)?;
        outcome.metrics.push(record);
    }
    outcome.model = model;
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn adapt_step(
    cfg: &AdaptationConfig,
    model: &mut ModelParams,
    sgd: &mut Sgd,
    inputs: &Tensor,
    idx: &[usize],
    table: &PseudoLabelTable,
    r_th: f64,
    side: Option<usize>,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let batch = inputs.select_rows(idx);
    let pls: Vec<usize> = idx.iter().map(|&i| table.labels[i]).collect();
    let ratios: Vec<f64> = idx.iter().map(|&i| table.ratios[i]).collect();

    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(batch.clone());
    let (emb, moments) = model.embed_graph(&mut g, &p, x, true)?;
    let logits = model.classify_graph(&mut g, &p, emb)?;
    let probs = g.softmax(logits)?;
    let hyps = g.value(probs).argmax_rows();
    let flags = conflict_flags(&pls, &hyps, &ratios, r_th)?;
    let delta: Vec<f64> = flags.iter().map(|&f| if f { -1.0 } else { 1.0 }).collect();

    let ent = signed_entropy_loss(&mut g, probs, &delta)?;
    let info = info_entropy_loss(&mut g, probs)?;
    let ce = pseudo_label_ce(&mut g, logits, &pls)?;

    let mut rot_moments = None;
    let rot = match side {
        Some(side) => {
            let turns: Vec<usize> = idx.iter().map(|_| rng.random_range(0..ROTATION_CLASSES)).collect();
            let mut rotated = batch.clone();
            for (r, &t) in turns.iter().enumerate() {
                let turned = rotate_flat(batch.row(r), side, t);
                rotated.row_mut(r).copy_from_slice(&turned);
            }
            let xr = g.constant(rotated);
            let (emb_r, m) = model.embed_graph(&mut g, &p, xr, true)?;
            rot_moments = m;
            let rot_logits = model.rotation_graph(&mut g, &p, emb, emb_r)?;
            Some(rotation_loss(&mut g, rot_logits, &turns)?)
        }
        None => None,
    };
    let total = total_loss_graph(&mut g, ent, info, ce, rot, cfg.alpha_ce, cfg.beta_rot)?;
    g.backward(total)?;
    let grads = p.grads(&g);
    apply_grads(model, sgd, &grads, cfg, side.is_some())?;
    for m in [moments, rot_moments].into_iter().flatten() {
        model.batch_norm.update_running(&m);
    }

    Ok(LossBreakdown {
        l_ent: g.value(ent).item(),
        l_info: g.value(info).item(),
        l_ce: g.value(ce).item(),
        l_rot: rot.map_or(0.0, |r| g.value(r).item()),
        total: g.value(total).item(),
        conflict_count: flags.iter().filter(|&&f| f).count(),
        batch_size: idx.len(),
    })
}

/// Source model, its source-only target accuracy, and the adaptation run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub source_model: ModelParams,
    pub source_only: Option<Accuracy>,
    pub adapted: AdaptOutcome,
}

/// Trains on `source`, then adapts to `target`. Target labels, when
/// present, only feed the evaluator.
pub fn run_pipeline(
    cfg: &AdaptationConfig,
    source: &LabeledDataset,
    target: &LabeledDataset,
    n_classes: usize,
) -> Result<PipelineRun> {
    let source_model = train_source(cfg, source, n_classes)?;
    let evaluator = target.labels.clone().map(|l| Evaluator::new(l, n_classes)).transpose()?;
    let source_only = match &evaluator {
        Some(ev) => Some(ev.score(&source_model.predict(&target.inputs)?)?),
        None => None,
    };
    let adapted = adapt_target(cfg, &source_model, &target.inputs, evaluator.as_ref())?;
    Ok(PipelineRun { source_model, source_only, adapted })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub final_metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedAggregate {
    /// Sorted by seed.
    pub runs: Vec<SeedRun>,
    pub accuracy: Option<MeanStd>,
    pub mean_class_accuracy: Option<MeanStd>,
    pub conflict_count: MeanStd,
}

impl SeedAggregate {
    /// `key=value` summary lines, one per aggregated metric.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        let ms = |m: Option<MeanStd>| match m {
            Some(m) => format!("mean={} std={}", fmt_num(m.mean), fmt_num(m.std)),
            None => "mean=na std=na".to_string(),
        };
        let mut s = format!("seeds={}\n", seeds.join(","));
        let _ = writeln!(s, "metric=accuracy {}", ms(self.accuracy));
        let _ = writeln!(s, "metric=mean_class_accuracy {}", ms(self.mean_class_accuracy));
        let _ = writeln!(s, "metric=conflict_count {}", ms(Some(self.conflict_count)));
        s
    }
}

/// Runs `run` once per seed (with `cfg.seed` replaced) and aggregates the
/// final-epoch metrics. Results do not depend on seed order.
pub fn run_seeds<F>(cfg: &AdaptationConfig, seeds: &[u64], mut run: F) -> Result<SeedAggregate>
where
    F: FnMut(&AdaptationConfig) -> Result<MetricsRecord>,
{
    if seeds.is_empty() {
        return Err(Error::config("seeds: at least one seed is required"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs = Vec::with_capacity(sorted.len());
    for seed in sorted {
        let seeded = AdaptationConfig { seed, ..cfg.clone() };
        runs.push(SeedRun { seed, final_metrics: run(&seeded)? });
    }
    let collect = |f: fn(&MetricsRecord) -> Option<f64>| -> Option<MeanStd> {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| f(&r.final_metrics)).collect();
        vals.and_then(|v| MeanStd::of(&v))
    };
    let accuracy = collect(|m| m.accuracy);
    let mean_class_accuracy = collect(|m| m.mean_class_accuracy);
    let counts: Vec<f64> = runs.iter().map(|r| r.final_metrics.conflict_count as f64).collect();
    let conflict_count = MeanStd::of(&counts).unwrap_or(MeanStd { mean: 0.0, std: 0.0 });
    Ok(SeedAggregate { runs, accuracy, mean_class_accuracy, conflict_count })
}

/// Evaluation-mode view of a dataset: embeddings, pseudo-labels, hypotheses
/// and conflict flags at threshold `r_th`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub embeddings: Tensor,
    pub probs: Tensor,
    pub table: PseudoLabelTable,
    pub hypotheses: Vec<usize>,
    pub flags: Vec<bool>,
}

impl Snapshot {
    pub fn compute(model: &ModelParams, inputs: &Tensor, r_th: f64) -> Result<Self> {
        let (embeddings, probs) = model.embed_and_predict(inputs)?;
        let (table, _) = generate_pseudo_labels(&embeddings, &probs, 0)?;
        let hypotheses = probs.argmax_rows();
        let flags = conflict_flags(&table.labels, &hypotheses, &table.ratios, r_th)?;
        Ok(Snapshot { embeddings, probs, table, hypotheses, flags })
    }

    /// Samples whose pseudo-label agrees with the hypothesis.
    pub fn agreement_mask(&self) -> Vec<bool> {
        self.table.labels.iter().zip(&self.hypotheses).map(|(a, b)| a == b).collect()
    }
}

/// Header of the embedding export for embedding width `d`.
pub fn embedding_header(d: usize) -> String {
    let mut cols = vec!["sample_id".to_string()];
    cols.extend((0..d).map(|j| format!("z{j}")));
    cols.extend(["pseudo_label", "hypothesis", "ratio", "conflict_flag", "true_label"].map(String::from));
    cols.join(",")
}

/// CSV rows of embeddings with pseudo-labels, hypotheses, ratios, conflict
/// flags and (if known) true labels; `na` marks a missing label.
pub fn embeddings_to_string(model: &ModelParams, data: &LabeledDataset, r_th: f64) -> Result<String> {
    let snap = Snapshot::compute(model, &data.inputs, r_th)?;
    let mut s = embedding_header(snap.embeddings.cols());
    s.push('\n');
    for i in 0..data.len() {
        let _ = write!(s, "{i}");
        for &z in snap.embeddings.row(i) {
            let _ = write!(s, ",{}", fmt_num(z));
        }
        let truth = data.labels.as_ref().map_or_else(|| "na".to_string(), |l| l[i].to_string());
        let _ = writeln!(
            s,
            ",{},{},{},{},{}",
            snap.table.labels[i],
            snap.hypotheses[i],
            fmt_num(snap.table.ratios[i]),
            u8::from(snap.flags[i]),
            truth
        );
    }
    Ok(s)
}

pub fn export_embeddings(model: &ModelParams, data: &LabeledDataset, r_th: f64, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_to_string(model, data, r_th)?).map_err(|e| Error::io(path, e))
}

/// Ratio statistics over samples without a centroid-hypothesis conflict.
pub fn threshold_report(model: &ModelParams, inputs: &Tensor) -> Result<ThresholdStats> {
    let snap = Snapshot::compute(model, inputs, 0.0)?;
    threshold_stats(&snap.table.ratios, &snap.agreement_mask()).map_err(|e| match e {
        Error::Statistics(_) => Error::Statistics(
            "every sample's pseudo-label disagrees with its hypothesis; no non-conflict ratios to summarize".into(),
        ),
        other => other,
    })
}

/// Histogram table `bin_lo,bin_hi,count` preceded by summary comment lines.
pub fn threshold_stats_to_string(stats: &ThresholdStats) -> String {
    let mut s = format!(
        "# count={} mean={} median={}\nbin_lo,bin_hi,count\n",
        stats.count,
        fmt_num(stats.mean),
        fmt_num(stats.median)
    );
    let bins = stats.histogram.len();
    for (i, c) in stats.histogram.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", fmt_num(i as f64 / bins as f64), fmt_num((i + 1) as f64 / bins as f64));
    }
    s
}

/// Probabilities of a dataset under `model`, evaluation mode.
pub fn predict_probs(model: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let emb = model.embed(inputs)?;
    softmax(&model.classify_embeddings(&emb)?)
}
