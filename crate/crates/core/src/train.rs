//! Weighted loss, data splits, the training loop and the evaluation
//! harness.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Sample;
use crate::error::{config_err, format_err, shape_err, Error, Result};
use crate::geometry::{GridSpec, PolarRaster};
use crate::model::{
    apply_running_stats, forward_batch, patch_batch, Forward, Modality, ModalityInput, Model, ModelConfig,
};
use crate::synth::derive_seed;
use crate::tensor::{adam_step, AdamConfig, Mode, Tensor};

/// Samples per forward pass when embedding or evaluating.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions {parts:?} must be in [0, 1] and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Sequential per-scenario split: within each scenario (in order of first
/// appearance) the first `floor(n * train)` items train, the next
/// `floor(n * val)` validate and the remainder test.
pub fn split<T>(items: Vec<T>, scenario: impl Fn(&T) -> &str, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<T>> = HashMap::new();
    for item in items {
        let key = scenario(&item).to_owned();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(item);
    }
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for key in order {
        let group = groups.remove(&key).unwrap();
        let n = group.len() as f64;
        let n_train = (n * spec.train + 1e-9).floor() as usize;
        let n_val = (n * spec.val + 1e-9).floor() as usize;
        for (i, item) in group.into_iter().enumerate() {
            if i < n_train {
                out.train.push(item);
            } else if i < n_train + n_val {
                out.val.push(item);
            } else {
                out.test.push(item);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate up to and including `lr_switch_epoch`.
    pub lr: f64,
    /// Learning rate afterwards.
    pub lr_late: f64,
    pub lr_switch_epoch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Elevation band `[lo, hi)` in degrees weighted by `alpha`.
    pub band: (f64, f64),
    pub alpha: f64,
    /// Train on ranges divided by the grid's `max_range`. Reported losses
    /// stay in meters squared.
    pub normalize_range: bool,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_switch_epoch: 10,
            adam: AdamConfig::default(),
            seed: 0,
            band: (-1.71875, 2.1875),
            alpha: 10.0,
            normalize_range: false,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_epoch {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2 for batch norm"));
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(config_err!("invalid Adam parameters {a:?}"));
        }
        self.split.validate()?;
        weight_mask(grid, self.band, self.alpha).map(|_| ())
    }
}

/// Per-row loss weights: `alpha` for rows whose elevation center lies in
/// `[band.0, band.1)`, 1 elsewhere.
pub fn weight_mask(grid: &GridSpec, band: (f64, f64), alpha: f64) -> Result<Vec<f32>> {
    let (lo, hi) = band;
    if !(lo < hi && lo >= grid.phi_lo() && hi <= grid.phi_hi()) {
        return Err(config_err!(
            "loss band [{lo}, {hi}) outside elevation span [{}, {})",
            grid.phi_lo(),
            grid.phi_hi()
        ));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(config_err!("band weight {alpha} must be positive"));
    }
    Ok((0..grid.n_rows())
        .map(|r| {
            let c = grid.phi_center(r);
            if c >= lo && c < hi {
                alpha as f32
            } else {
                1.0
            }
        })
        .collect())
}

/// Mean over all pixels of `mask[row] * (pred - target)^2` for row-major
/// `cols`-wide images.
pub fn weighted_mse(pred: &[f32], target: &[f32], mask: &[f32], cols: usize) -> Result<f64> {
    if pred.len() != target.len() || cols == 0 || pred.len() != mask.len() * cols {
        return Err(shape_err!(
            "{} predictions, {} targets, {} rows of {cols}",
            pred.len(),
            target.len(),
            mask.len()
        ));
    }
    let total: f64 = pred
        .chunks_exact(cols)
        .zip(target.chunks_exact(cols))
        .zip(mask)
        .map(|((p, t), w)| {
            let s: f64 = p.iter().zip(t).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            *w as f64 * s
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn mmse_loss(pred: &PolarRaster, target: &PolarRaster, mask: &[f32]) -> Result<f64> {
    if (pred.n_rows(), pred.n_cols()) != (target.n_rows(), target.n_cols()) {
        return Err(shape_err!("prediction and target rasters differ in size"));
    }
    weighted_mse(pred.data(), target.data(), mask, pred.n_cols())
}

/// Range divisor applied to targets during training.
pub fn target_scale(grid: &GridSpec, cfg: &TrainConfig) -> f32 {
    if cfg.normalize_range {
        grid.max_range
    } else {
        1.0
    }
}

/// Shuffled mini-batches; a final short batch is kept only with at least
/// two samples.
pub fn batch_plan(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Encoder inputs of a fixed sample set, with frozen encoders evaluated
/// once up front.
struct Prepared {
    /// Per modality: one flat embedding or patch matrix per sample.
    rows: [Vec<Vec<f32>>; 4],
    frozen: [bool; 4],
    shapes: [Vec<usize>; 4],
    targets: Vec<Vec<f32>>,
}

impl Prepared {
    fn new(model: &Model, samples: &[Sample], scale: f32) -> Result<Self> {
        let cfg = model.config();
        let mut rows: [Vec<Vec<f32>>; 4] = Default::default();
        let mut frozen = [false; 4];
        let mut shapes: [Vec<usize>; 4] = Default::default();
        for m in Modality::ALL {
            let enc = cfg.encoder(m);
            let i = m.index();
            frozen[i] = enc.frozen;
            let chunks: Vec<Result<Vec<Vec<f32>>>> = samples
                .par_chunks(EVAL_CHUNK)
                .map(|chunk| {
                    let imgs: Vec<&Tensor> = chunk.iter().map(|s| s.image(m)).collect();
                    let t = if enc.frozen { model.embed(m, &imgs)? } else { patch_batch(enc, &imgs)? };
                    let per = t.numel() / chunk.len();
                    Ok(t.data().chunks_exact(per).map(<[f32]>::to_vec).collect())
                })
                .collect();
            for c in chunks {
                rows[i].extend(c?);
            }
            shapes[i] = if enc.frozen { vec![enc.d_model] } else { vec![enc.n_patches(), enc.patch_len()] };
        }
        let targets = samples.iter().map(|s| s.target.data().iter().map(|v| v / scale).collect()).collect();
        Ok(Self { rows, frozen, shapes, targets })
    }

    fn inputs(&self, idx: &[usize]) -> Result<[ModalityInput; 4]> {
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            let mut shape = vec![idx.len()];
            shape.extend(&self.shapes[i]);
            let data = idx.iter().flat_map(|j| self.rows[i][*j].iter().copied()).collect();
            let t = Tensor::new(&shape, data)?;
            out.push(if self.frozen[i] { ModalityInput::Embeddings(t) } else { ModalityInput::Patches(t) });
        }
        Ok(out.try_into().unwrap())
    }

    fn target(&self, idx: &[usize], grid: &GridSpec) -> Result<Tensor> {
        let data = idx.iter().flat_map(|j| self.targets[*j].iter().copied()).collect();
        Tensor::new(&[idx.len(), grid.n_rows(), grid.n_cols()], data)
    }
}

/// Evaluation-mode predictions in meters, clamped to the grid range.
fn predict_prepared(model: &Model, prep: &Prepared, n: usize, scale: f32) -> Result<Vec<PolarRaster>> {
    let grid = &model.config().grid;
    let idx: Vec<usize> = (0..n).collect();
    let chunks: Vec<Result<Vec<PolarRaster>>> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let raw = model.predict_raw(prep.inputs(chunk)?)?;
            raw.data()
                .chunks_exact(grid.n_rows() * grid.n_cols())
                .map(|c| PolarRaster::from_clamped(grid.clone(), c.iter().map(|v| v * scale).collect()))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Evaluation-mode predictions in meters for `samples`.
pub fn predict(model: &Model, samples: &[Sample], scale: f32) -> Result<Vec<PolarRaster>> {
    let prep = Prepared::new(model, samples, scale)?;
    predict_prepared(model, &prep, samples.len(), scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses, meters squared.
    pub train_mmse: f64,
    /// Evaluation-mode loss on the validation split; `None` without one.
    pub val_mmse: Option<f64>,
    pub lr: f64,
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    /// Parameters of the epoch with the lowest validation loss (the final
    /// epoch without a validation split).
    pub best_model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam on the weighted loss. Fails with [`Error::Numeric`] as
/// soon as a batch loss is not finite.
pub fn train(train_set: &[Sample], val_set: &[Sample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(&model_cfg.grid)?;
    if train_set.len() < 2 {
        return Err(Error::Argument(format!(
            "training needs at least 2 samples, got {}",
            train_set.len()
        )));
    }
    let grid = &model_cfg.grid;
    let mask = weight_mask(grid, cfg.band, cfg.alpha)?;
    let scale = target_scale(grid, cfg);
    let sq = (scale as f64).powi(2);
    let mut model = Model::new(model_cfg.clone())?;
    let prep = Prepared::new(&model, train_set, scale)?;
    let val_prep = Prepared::new(&model, val_set, scale)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = batch_plan(train_set.len(), cfg.batch_size, &mut rng);
        let (mut total, mut seen) = (0.0f64, 0usize);
        for batch in &batches {
            let inputs = prep.inputs(batch)?;
            let target = prep.target(batch, grid)?;
            let mut f = Forward::new(model.params(), Mode::Train, derive_seed(cfg.seed, step));
            step += 1;
            let pred = forward_batch(&mut f, model_cfg, inputs)?;
            let loss = f.graph.weighted_mse(pred.raster, &target, &mask)?;
            let value = f.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}, step {step}")));
            }
            f.graph.backward(loss)?;
            let (graph, binder, stats) = f.finish();
            let store = model.params_mut();
            store.zero_grad();
            binder.export_grads(&graph, store)?;
            apply_running_stats(store, stats)?;
            adam_step(store, lr, cfg.adam)?;
            total += value * batch.len() as f64;
            seen += batch.len();
        }
        let train_mmse = total / seen as f64 * sq;
        let val_mmse = if val_set.is_empty() {
            None
        } else {
            let preds = predict_prepared(&model, &val_prep, val_set.len(), scale)?;
            Some(mean_mmse(&preds, val_set, &mask)?)
        };
        if let Some(v) = val_mmse {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("validation loss diverged at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
        history.push(EpochRecord { epoch, train_mmse, val_mmse, lr, batch_sizes: batches.iter().map(Vec::len).collect() });
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs, model.clone()),
    };
    Ok(TrainOutcome { final_model: model, best_model, best_epoch, history })
}

fn mean_mmse(preds: &[PolarRaster], samples: &[Sample], mask: &[f32]) -> Result<f64> {
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += mmse_loss(p, &s.target, mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// `history.txt` lines: epoch, train MMSE, validation MMSE (`nan` when
/// absent), learning rate; tab separated.
pub fn history_text(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| {
            let val = r.val_mmse.map_or_else(|| "nan".to_owned(), |v| v.to_string());
            format!("{}\t{}\t{}\t{}\n", r.epoch, r.train_mmse, val, r.lr)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScore {
    pub scenario: String,
    pub mmse: f64,
    /// Not part of the text form; 0 after parsing.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenarios: Vec<ScenarioScore>,
    /// Sample-weighted mean of the scenario scores.
    pub overall: f64,
    pub baseline_zeros: f64,
    pub ablation_no_fusion: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sc in &self.scenarios {
            s.push_str(&format!("{}\t{}\n", sc.scenario, sc.mmse));
        }
        s.push_str(&format!("overall\t{}\n", self.overall));
        s.push_str(&format!("baseline_zeros\t{}\n", self.baseline_zeros));
        if let Some(a) = self.ablation_no_fusion {
            s.push_str(&format!("ablation_no_fusion\t{a}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut scenarios, mut overall, mut baseline, mut ablation) = (Vec::new(), None, None, None);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('\t').ok_or_else(|| format_err!("report line {line:?}"))?;
            let v: f64 = value.trim().parse().map_err(|_| format_err!("report value {value:?}"))?;
            match key {
                "overall" => overall = Some(v),
                "baseline_zeros" => baseline = Some(v),
                "ablation_no_fusion" => ablation = Some(v),
                id => scenarios.push(ScenarioScore { scenario: id.to_owned(), mmse: v, samples: 0 }),
            }
        }
        Ok(Self {
            scenarios,
            overall: overall.ok_or_else(|| format_err!("report lacks overall"))?,
            baseline_zeros: baseline.ok_or_else(|| format_err!("report lacks baseline_zeros"))?,
            ablation_no_fusion: ablation,
        })
    }
}

/// Mean loss of the all-zero prediction.
pub fn baseline_all_zeros(samples: &[Sample], mask: &[f32]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("baseline of an empty split".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let zeros = vec![0.0; s.target.data().len()];
        total += weighted_mse(&zeros, s.target.data(), mask, s.target.n_cols())?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-scenario and overall loss of `model` on `samples`, with the
/// all-zeros baseline.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Argument("evaluation split is empty".into()));
    }
    let grid = &model.config().grid;
    let mask = weight_mask(grid, cfg.band, cfg.alpha)?;
    let preds = predict(model, samples, target_scale(grid, cfg))?;
    let mut scenarios: Vec<ScenarioScore> = Vec::new();
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let l = mmse_loss(p, &s.target, &mask)?;
        total += l;
        match scenarios.iter_mut().find(|sc| sc.scenario == s.scenario) {
            Some(sc) => {
                sc.mmse += l;
                sc.samples += 1;
            }
            None => scenarios.push(ScenarioScore { scenario: s.scenario.clone(), mmse: l, samples: 1 }),
        }
    }
    for sc in &mut scenarios {
        sc.mmse /= sc.samples as f64;
    }
    Ok(EvalReport {
        scenarios,
        overall: total / samples.len() as f64,
        baseline_zeros: baseline_all_zeros(samples, &mask)?,
        ablation_no_fusion: None,
    })
}

/// The model variant whose fusion transformer is bypassed.
pub fn no_fusion_config(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.fusion.bypass = true;
    c
}

/// Trains and evaluates the no-fusion variant on the same splits,
/// evaluating its best-validation parameters.
pub fn ablation_no_fusion(split: &Split<Sample>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(EvalReport, TrainOutcome)> {
    let outcome = train(&split.train, &split.val, &no_fusion_config(model_cfg), cfg)?;
    let report = evaluate(&outcome.best_model, &split.test, cfg)?;
    Ok((report, outcome))
}
