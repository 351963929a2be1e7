//! Training and inference orchestration: patch streaming with augmentation,
//! the epoch loop with early stopping and keep-best checkpointing, the full
//! prediction pipeline, and the five-setup phantom comparison.

use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{augment, AugmentConfig, Augmentation};
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, froc, optimal_threshold, FrocCurve, FrocPoint};
use crate::losses::{loss, LossBatch, LossKind, DEFAULT_EPSILON};
use crate::nn::{adam_step, AdamState, Checkpoint, Graph, NamedArray, OptimizerMeta, Tensor};
use crate::phantom::{generate, Phantom, TreeSpec};
use crate::patching::{extract_patch, plan_windows, reconstruct, TaperProfile};
use crate::rng::{self, Stream};
use crate::unet::{Model, UnetConfig};
use crate::volume_io::{lung_crops, CropSpec, Mask, Volume};

/// How "validation loss increases over `patience` epochs" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// Stop after `patience` epochs without beating the best value so far.
    NoImprovement,
    /// Stop after `patience` consecutive epochs of strictly rising loss.
    Increasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub augmentation: Augmentation,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
    /// Axial overlap between consecutive windows.
    pub overlap: f64,
    /// Slices added above and below the lung when cropping.
    pub crop_margin: usize,
    /// Augmented patches buffered ahead of the training step; 0 produces
    /// them inline.
    pub queue_depth: usize,
    /// Multiply network inputs by the lung mask. Off by default: the loss is
    /// masked, the input is not.
    pub mask_input: bool,
    pub epsilon: f64,
    pub augment: AugmentConfig,
    pub net: UnetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Dice,
            augmentation: Augmentation::Elastic,
            lr: 1e-5,
            max_epochs: 300,
            patience: 15,
            early_stop: EarlyStop::NoImprovement,
            seed: 0,
            overlap: 0.75,
            crop_margin: 30,
            queue_depth: 4,
            mask_input: false,
            epsilon: DEFAULT_EPSILON,
            augment: AugmentConfig::default(),
            net: UnetConfig::default(),
        }
    }
}

/// The five (loss, augmentation) pairs compared by [`compare_setups`].
pub const SETUPS: [(LossKind, Augmentation); 5] = [
    (LossKind::Wbce, Augmentation::None),
    (LossKind::Wbce, Augmentation::Rigid),
    (LossKind::Dice, Augmentation::None),
    (LossKind::Dice, Augmentation::Rigid),
    (LossKind::Dice, Augmentation::Elastic),
];

pub fn setup_name(loss: LossKind, aug: Augmentation) -> String {
    format!("{}-{}", loss.name(), aug.name())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and > 0"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config("patch.overlap", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be > 0"));
        }
        if self.augment.max_angle_deg < 0.0 || self.augment.elastic_sigma < 0.0 {
            return Err(Error::config("augment", "angle and sigma must be >= 0"));
        }
        if self.augment.elastic_grid.iter().any(|&g| g < 2) {
            return Err(Error::config("augment.elastic_grid", "needs >= 2 nodes per axis"));
        }
        Ok(())
    }

    /// Additionally requires the (loss, augmentation) pair to be one of [`SETUPS`].
    pub fn validate_setup(&self) -> Result<()> {
        self.validate()?;
        if !SETUPS.contains(&(self.loss, self.augmentation)) {
            return Err(Error::config(
                "train.augmentation",
                format!(
                    "{} is not one of the five setups (wBCE-None, wBCE-Rigid, dice-None, dice-Rigid, dice-Elastic)",
                    setup_name(self.loss, self.augmentation)
                ),
            ));
        }
        Ok(())
    }

    fn crop_spec(&self) -> CropSpec {
        let [_, h, w] = self.net.input_shape;
        CropSpec::new([h, w], self.crop_margin)
    }
}

/// One CT with its lung ROI, airway truth and optional Dice exclusion mask.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub ct: Volume,
    pub lung: Mask,
    pub truth: Mask,
    pub exclude: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopping_reason: StopReason,
}

impl RunRecord {
    /// `epoch,train_loss,val_loss` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

/// Early-stopping bookkeeping, fed one validation loss per epoch.
#[derive(Debug, Clone)]
pub struct StopRule {
    rule: EarlyStop,
    patience: usize,
    best: f64,
    best_epoch: usize,
    last: f64,
    rising: usize,
}

impl StopRule {
    pub fn new(rule: EarlyStop, patience: usize) -> Self {
        StopRule {
            rule,
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            last: f64::INFINITY,
            rising: 0,
        }
    }

    /// Records epoch `epoch` (1-based). Returns (is new best, should stop).
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.best_epoch = epoch;
        }
        self.rising = if val > self.last { self.rising + 1 } else { 0 };
        self.last = val;
        let stop = match self.rule {
            EarlyStop::NoImprovement => epoch - self.best_epoch >= self.patience,
            EarlyStop::Increasing => self.rising >= self.patience,
        };
        (improved, stop)
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// A training example: cropped window of image, ROI and truth.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Volume,
    pub roi: Mask,
    pub truth: Mask,
}

/// Cuts every scan into lung crops and each crop into axial windows.
pub fn scan_patches(scans: &[Scan], cfg: &TrainConfig) -> Result<Vec<Patch>> {
    let depth = cfg.net.input_shape[0];
    let spec = cfg.crop_spec();
    let mut out = Vec::new();
    for s in scans {
        if s.ct.dims() != s.lung.dims() || s.ct.dims() != s.truth.dims() {
            return Err(Error::shape(format!("scan {} has mismatched volumes", s.id)));
        }
        for (img, roi, realized) in lung_crops(&s.ct, &s.lung, &spec, depth)? {
            let region = realized.region.expect("lung_crops records the region");
            let truth = s.truth.sub_block(region.origin, region.size)?;
            check_patch_fits(img.dims(), &cfg.net, &s.id)?;
            let plan = plan_windows(img.dims()[0], depth, cfg.overlap)?;
            for (i, &off) in plan.axial_offsets.iter().enumerate() {
                let [_, h, w] = img.dims();
                out.push(Patch {
                    image: extract_patch(&img, &plan, i)?,
                    roi: roi.sub_block([off, 0, 0], [depth, h, w])?,
                    truth: truth.sub_block([off, 0, 0], [depth, h, w])?,
                });
            }
        }
    }
    Ok(out)
}

fn check_patch_fits(crop: [usize; 3], net: &UnetConfig, id: &str) -> Result<()> {
    let [d, h, w] = net.input_shape;
    if crop[0] < d || crop[1] != h || crop[2] != w {
        return Err(Error::shape(format!(
            "scan {id}: crop {crop:?} cannot hold {d}×{h}×{w} patches (volume too small)"
        )));
    }
    Ok(())
}

struct Sample {
    input: Tensor,
    truth: Vec<f32>,
    roi: Vec<f32>,
}

fn make_sample(p: &Patch, cfg: &TrainConfig, mut rng: rng::Rng) -> Result<Sample> {
    // masking before augmentation keeps out-of-ROI intensities out of the
    // interpolation stencils too
    let masked;
    let image = if cfg.mask_input {
        let mut m = p.image.clone();
        for (v, &r) in m.data_mut().iter_mut().zip(p.roi.data()) {
            if r == 0 {
                *v = 0.0;
            }
        }
        masked = m;
        &masked
    } else {
        &p.image
    };
    let (img, masks) = augment(cfg.augmentation, &cfg.augment, &mut rng, image, &[&p.roi, &p.truth])?;
    let roi: Vec<f32> = masks[0].data().iter().map(|&v| v as f32).collect();
    let truth: Vec<f32> = masks[1].data().iter().map(|&v| v as f32).collect();
    let [d, h, w] = cfg.net.input_shape;
    Ok(Sample {
        input: Tensor::new([1, 1, d, h, w], img.into_data())?,
        truth,
        roi,
    })
}

/// Runs `consume` over samples built in `order`, with a bounded producer
/// thread when `queue_depth > 0`. Each sample's RNG depends only on
/// `(seed, stream, epoch, patch index)`, so results match inline production.
fn stream_samples(
    patches: &[Patch],
    order: &[usize],
    cfg: &TrainConfig,
    tag: Stream,
    epoch: usize,
    mut consume: impl FnMut(Sample) -> Result<()>,
) -> Result<()> {
    let build = |i: usize| make_sample(&patches[i], cfg, rng::stream(cfg.seed, tag, epoch as u64, i as u64));
    if cfg.queue_depth == 0 {
        for &i in order {
            consume(build(i)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel(cfg.queue_depth);
        s.spawn(move || {
            for &i in order {
                if tx.send(build(i)).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            consume(item?)?;
        }
        Ok(())
    })
}

fn take_params(model: &mut Model) -> Vec<Tensor> {
    model
        .params
        .iter_mut()
        .map(|p| std::mem::replace(&mut p.value, Tensor::zeros([1, 1, 1, 1, 1])))
        .collect()
}

fn put_params(model: &mut Model, ts: Vec<Tensor>) {
    for (p, t) in model.params.iter_mut().zip(ts) {
        p.value = t;
    }
}

fn check_finite(value: f64, what: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {value} in epoch {epoch}")))
    }
}

/// One forward/backward/Adam step on a single patch. Returns the loss.
fn train_step(model: &mut Model, opt: &mut AdamState, s: &Sample, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(s.input.clone(), false);
    let (p, leaves) = model.forward_graph(&mut g, x, true)?;
    let out = {
        let batch = LossBatch::new(g.value(p).data(), &s.truth, &s.roi, cfg.epsilon)?;
        loss(cfg.loss, &batch)?
    };
    if !out.value.is_finite() || out.grad.iter().any(|v| !v.is_finite()) {
        return Ok(f64::NAN);
    }
    let l = g.scalar_loss(p, out.value as f32, out.grad)?;
    g.backward(l)?;
    let mut ts = take_params(model);
    for (t, &leaf) in ts.iter_mut().zip(&leaves) {
        t.set_grad(g.take_grad(leaf));
    }
    let res = adam_step(&mut ts, opt);
    put_params(model, ts);
    res?;
    Ok(out.value)
}

fn eval_loss(model: &Model, s: &Sample, cfg: &TrainConfig) -> Result<f64> {
    let p = model.forward(&s.input)?;
    let batch = LossBatch::new(p.data(), &s.truth, &s.roi, cfg.epsilon)?;
    Ok(loss(cfg.loss, &batch)?.value)
}

/// Epoch-end callback payload.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains from scratch and returns the checkpoint of the best-validation
/// epoch together with the per-epoch record.
pub fn train(
    train_scans: &[Scan],
    val_scans: &[Scan],
    cfg: &TrainConfig,
    on_epoch: Option<EpochHook>,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    if train_scans.is_empty() {
        return Err(Error::config("data.train", "needs at least one training scan"));
    }
    if val_scans.is_empty() {
        return Err(Error::config("data.val", "needs at least one validation scan"));
    }
    let train_patches = scan_patches(train_scans, cfg)?;
    let val_patches = scan_patches(val_scans, cfg)?;
    train_on_patches(&train_patches, &val_patches, cfg, on_epoch)
}

pub fn train_on_patches(
    train_patches: &[Patch],
    val_patches: &[Patch],
    cfg: &TrainConfig,
    mut on_epoch: Option<EpochHook>,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    if train_patches.is_empty() || val_patches.is_empty() {
        return Err(Error::config("data", "training and validation need at least one patch each"));
    }
    let mut model = Model::build(&cfg.net, cfg.seed)?;
    let mut opt = AdamState::new(cfg.lr as f32);
    let mut rule = StopRule::new(cfg.early_stop, cfg.patience);
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut reason = StopReason::MaxEpochs;
    let val_order: Vec<usize> = (0..val_patches.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_patches.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let mut train_sum = 0.0;
        stream_samples(train_patches, &order, cfg, Stream::TrainAugment, epoch, |s| {
            let l = train_step(&mut model, &mut opt, &s, cfg)?;
            check_finite(l, "training loss", epoch)?;
            train_sum += l;
            Ok(())
        })?;
        let mut val_sum = 0.0;
        stream_samples(val_patches, &val_order, cfg, Stream::ValAugment, epoch, |s| {
            val_sum += eval_loss(&model, &s, cfg)?;
            Ok(())
        })?;
        let rec = EpochRecord {
            epoch,
            train_loss: train_sum / train_patches.len() as f64,
            val_loss: val_sum / val_patches.len() as f64,
        };
        check_finite(rec.val_loss, "validation loss", epoch)?;
        if let Some(hook) = on_epoch.as_mut() {
            hook(&rec);
        }
        let (improved, stop) = rule.observe(epoch, rec.val_loss);
        epochs.push(rec);
        if improved {
            best = Some(snapshot(&model, &opt, cfg, epoch, rule.best().1)?);
        }
        if stop {
            reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_validation_loss) = rule.best();
    let record = RunRecord {
        epochs,
        best_epoch,
        best_validation_loss,
        stopping_reason: reason,
    };
    Ok((best.expect("at least one epoch ran"), record))
}

fn snapshot(model: &Model, opt: &AdamState, cfg: &TrainConfig, epoch: usize, val: f64) -> Result<Checkpoint> {
    let named = |prefix: &[Vec<f32>]| -> Vec<NamedArray> {
        model
            .params
            .iter()
            .zip(prefix)
            .map(|(p, d)| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: d.clone(),
            })
            .collect()
    };
    let moments = if opt.m.is_empty() {
        None
    } else {
        Some((named(&opt.m), named(&opt.v)))
    };
    let train_cfg = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint {
        config: serde_json::to_value(&model.cfg).map_err(|e| Error::Format(e.to_string()))?,
        meta: json!({
            "epoch": epoch,
            "val_loss": val,
            "setup": setup_name(cfg.loss, cfg.augmentation),
            "train": train_cfg,
        }),
        params: model.param_arrays(),
        optimizer: Some(OptimizerMeta {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        }),
        moments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub threshold: f64,
    pub overlap: f64,
    pub crop_margin: usize,
    pub mask_input: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            threshold: 0.5,
            overlap: 0.75,
            crop_margin: 30,
            mask_input: false,
        }
    }
}

impl PredictOptions {
    pub fn from_train(cfg: &TrainConfig, threshold: f64) -> Self {
        PredictOptions {
            threshold,
            overlap: cfg.overlap,
            crop_margin: cfg.crop_margin,
            mask_input: cfg.mask_input,
        }
    }
}

/// Full-volume inference: crop, window, forward, taper-weighted
/// reconstruction, lung masking, re-embedding, thresholding.
/// `seg = {prob >= threshold} ∩ {prob > 0}`, so `seg ⊆ lung` for any threshold.
pub fn predict(ct: &Volume, lung: &Mask, model: &Model, opts: &PredictOptions) -> Result<(Volume, Mask)> {
    if ct.dims() != lung.dims() {
        return Err(Error::shape(format!(
            "ct dims {:?} != lung dims {:?}",
            ct.dims(),
            lung.dims()
        )));
    }
    let net = &model.cfg;
    let [depth, h, w] = net.input_shape;
    let mut prob = Volume::like(ct, 0.0);
    if lung.count() == 0 {
        return Ok((prob, Mask::like(ct, 0)));
    }
    let taper = TaperProfile::from_insets(net.input_shape, net.valid_shrinkage())?;
    let spec = CropSpec::new([h, w], opts.crop_margin);
    for (img, roi, realized) in lung_crops(ct, lung, &spec, depth)? {
        check_patch_fits(img.dims(), net, "input")?;
        let plan = plan_windows(img.dims()[0], depth, opts.overlap)?;
        let mut outputs = Vec::with_capacity(plan.len());
        for i in 0..plan.len() {
            let mut patch = extract_patch(&img, &plan, i)?;
            if opts.mask_input {
                let off = plan.axial_offsets[i];
                let r = roi.sub_block([off, 0, 0], [depth, h, w])?;
                for (v, &m) in patch.data_mut().iter_mut().zip(r.data()) {
                    if m == 0 {
                        *v = 0.0;
                    }
                }
            }
            let spacing = patch.spacing();
            let x = Tensor::new([1, 1, depth, h, w], patch.into_data())?;
            let y = model.forward(&x)?;
            outputs.push(Volume::new([depth, h, w], spacing, y.into_data())?);
        }
        let mut p = reconstruct(&outputs, &plan, &taper, img.dims())?;
        for (v, &m) in p.data_mut().iter_mut().zip(roi.data()) {
            if m == 0 {
                *v = 0.0;
            }
        }
        let region = realized.region.expect("lung_crops records the region");
        prob.embed_with(&p, region.origin, |old, new| old.max(new))?;
    }
    let t = opts.threshold as f32;
    let seg = Mask::from_fn(&prob, |p| p > 0.0 && p >= t);
    Ok((prob, seg))
}

/// Evaluation ROI: lung minus the exclusion mask.
pub fn eval_roi(scan: &Scan) -> Mask {
    let mut roi = scan.lung.clone();
    if let Some(ex) = &scan.exclude {
        for (r, &e) in roi.data_mut().iter_mut().zip(ex.data()) {
            if e != 0 {
                *r = 0;
            }
        }
    }
    roi
}

/// Per-scan FROC curve of `model` on `scan`, inside [`eval_roi`].
pub fn evaluate_scan(scan: &Scan, model: &Model, opts: &PredictOptions, thresholds: &[f64]) -> Result<FrocCurve> {
    let (prob, _) = predict(&scan.ct, &scan.lung, model, opts)?;
    froc(&prob, &scan.truth, &eval_roi(scan), thresholds)
}

/// Sums counts of several curves sharing a threshold grid.
pub fn pool_curves(curves: &[FrocCurve]) -> Result<FrocCurve> {
    let first = curves.first().ok_or_else(|| Error::domain("no curves to pool"))?;
    let mut points = Vec::with_capacity(first.points.len());
    for (k, p0) in first.points.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in curves {
            let p = c
                .points
                .get(k)
                .filter(|p| p.threshold == p0.threshold)
                .ok_or_else(|| Error::domain("curves use different thresholds"))?;
            tp += p.tp;
            fp += p.fp;
            fn_ += p.fn_;
        }
        points.push(FrocPoint {
            threshold: p0.threshold,
            tp,
            fp,
            fn_,
            sensitivity: tp as f64 / (tp + fn_) as f64,
            dice: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        });
    }
    let normalization = points.iter().map(|p| p.fp).max().unwrap_or(0);
    Ok(FrocCurve {
        points,
        normalization,
    })
}

/// Train/validation/test split of scans.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<Scan>,
    pub val: Vec<Scan>,
    pub test: Vec<Scan>,
}

/// One replication row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupResult {
    pub name: String,
    pub loss: LossKind,
    pub augmentation: Augmentation,
    /// Corner-optimal threshold of each trained model (one per seed), from
    /// its curve pooled over the test scans.
    pub optimal_thresholds: Vec<f64>,
    /// Mean over seeds of the mean test Dice at that seed's optimal threshold.
    pub mean_dice: f64,
    /// Mean test Dice over scans at the model's optimal threshold, per seed.
    pub dice_per_seed: Vec<f64>,
    /// Single threshold optimal for the curve pooled over all seeds and scans.
    pub pooled_threshold: f64,
    /// Mean test Dice over seeds and scans at `pooled_threshold`.
    pub mean_dice_pooled: f64,
    /// Mean test Dice at threshold 0.5.
    pub mean_dice_at_half: f64,
    pub best_epochs: Vec<usize>,
    /// Per-seed, per-scan curves: (seed, scan id, curve).
    #[serde(skip)]
    pub curves: Vec<(u64, String, FrocCurve)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub rows: Vec<SetupResult>,
}

/// Claimed orderings checked by [`ReplicationReport::ordinal_checks`].
pub const ORDINAL_CLAIMS: [(&str, &str); 3] = [
    ("dice-Elastic", "dice-Rigid"),
    ("dice-Rigid", "dice-None"),
    ("wBCE-Rigid", "wBCE-None"),
];

impl ReplicationReport {
    pub fn row(&self, name: &str) -> Option<&SetupResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `(better, worse, gap)` for each claimed ordering, gap = Dice(better) − Dice(worse).
    pub fn ordinal_checks(&self) -> Vec<(String, String, f64)> {
        ORDINAL_CLAIMS
            .iter()
            .filter_map(|&(a, b)| {
                let (ra, rb) = (self.row(a)?, self.row(b)?);
                Some((a.to_string(), b.to_string(), ra.mean_dice - rb.mean_dice))
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "setup,optimal_thresholds,mean_dice,pooled_threshold,mean_dice_pooled,mean_dice_at_0.5\n",
        );
        for r in &self.rows {
            let ts: Vec<String> = r.optimal_thresholds.iter().map(f64::to_string).collect();
            s.push_str(&format!(
                "{},{},{:.6},{},{:.6},{:.6}\n",
                r.name,
                ts.join(";"),
                r.mean_dice,
                r.pooled_threshold,
                r.mean_dice_pooled,
                r.mean_dice_at_half
            ));
        }
        s
    }
}

/// Dice of a curve at the point whose threshold is `t`.
pub fn dice_at(c: &FrocCurve, t: f64) -> Result<f64> {
    c.points
        .iter()
        .find(|p| p.threshold == t)
        .map(|p| p.dice)
        .ok_or_else(|| Error::domain(format!("threshold {t} is not on the curve")))
}

/// Trains and evaluates the five setups, one run per seed each.
/// `progress` receives `(setup name, seed, record)` after every run.
pub fn compare_setups(
    data: &Datasets,
    base: &TrainConfig,
    seeds: &[u64],
    mut progress: Option<&mut dyn FnMut(&str, u64, &RunRecord)>,
) -> Result<ReplicationReport> {
    if seeds.is_empty() {
        return Err(Error::config("replicate.seeds", "needs at least one seed"));
    }
    if data.test.is_empty() {
        return Err(Error::config("data.test", "needs at least one test scan"));
    }
    let thresholds = default_thresholds();
    let mut cfg0 = base.clone();
    cfg0.augmentation = Augmentation::None;
    let train_patches = scan_patches(&data.train, &cfg0)?;
    let val_patches = scan_patches(&data.val, &cfg0)?;
    let mut rows = Vec::new();
    for &(loss_kind, aug) in &SETUPS {
        let name = setup_name(loss_kind, aug);
        let mut curves = Vec::new();
        let mut best_epochs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                loss: loss_kind,
                augmentation: aug,
                seed,
                ..base.clone()
            };
            cfg.validate_setup()?;
            let (ckpt, rec) = train_on_patches(&train_patches, &val_patches, &cfg, None)?;
            if let Some(f) = progress.as_mut() {
                f(&name, seed, &rec);
            }
            best_epochs.push(rec.best_epoch);
            let model = Model::from_checkpoint(&ckpt, &cfg.net)?;
            let opts = PredictOptions::from_train(&cfg, 0.5);
            for scan in &data.test {
                curves.push((seed, scan.id.clone(), evaluate_scan(scan, &model, &opts, &thresholds)?));
            }
        }
        let curves_of = |filter: &dyn Fn(u64) -> bool| -> Vec<FrocCurve> {
            curves.iter().filter(|c| filter(c.0)).map(|c| c.2.clone()).collect()
        };
        let mean = |t: f64, filter: &dyn Fn(u64) -> bool| -> Result<f64> {
            let ds: Vec<f64> = curves_of(filter).iter().map(|c| dice_at(c, t)).collect::<Result<_>>()?;
            Ok(ds.iter().sum::<f64>() / ds.len() as f64)
        };
        let mut optimal_thresholds = Vec::with_capacity(seeds.len());
        let mut dice_per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let t = optimal_threshold(&pool_curves(&curves_of(&|x| x == s))?)?;
            optimal_thresholds.push(t);
            dice_per_seed.push(mean(t, &|x| x == s)?);
        }
        let pooled_threshold = optimal_threshold(&pool_curves(&curves_of(&|_| true))?)?;
        rows.push(SetupResult {
            name,
            loss: loss_kind,
            augmentation: aug,
            optimal_thresholds,
            mean_dice: dice_per_seed.iter().sum::<f64>() / dice_per_seed.len() as f64,
            dice_per_seed,
            pooled_threshold,
            mean_dice_pooled: mean(pooled_threshold, &|_| true)?,
            mean_dice_at_half: mean(0.5, &|_| true)?,
            best_epochs,
            curves,
        });
    }
    Ok(ReplicationReport { rows })
}

/// Phantom geometry used by the desk-scale experiments: noisy enough that
/// intensity alone does not separate tubes from parenchyma, with per-scan
/// variation in branch angles, lengths and branching planes.
pub fn desk_tree() -> TreeSpec {
    TreeSpec {
        noise_sd: 0.7,
        jitter_deg: 15.0,
        azimuth_jitter_deg: 30.0,
        ..TreeSpec::default()
    }
}

/// Phantom volume dims of the desk experiments.
pub const DESK_DIMS: [usize; 3] = [40, 32, 32];

/// Desk-scale training config: levels 3, base 4, 16×32×32 patches.
/// The learning rate and elastic sigma are scaled to the small problem.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_epochs: 150,
        crop_margin: 2,
        augment: AugmentConfig {
            elastic_sigma: 3.0,
            ..AugmentConfig::default()
        },
        net: UnetConfig::desk(),
        ..TrainConfig::default()
    }
}

pub fn phantom_scan(p: Phantom, id: impl Into<String>) -> Scan {
    Scan {
        id: id.into(),
        ct: p.image,
        lung: p.lung,
        truth: p.truth,
        exclude: Some(p.exclude),
    }
}

/// `n_train`/`n_val`/`n_test` phantoms of [`desk_tree`] with distinct seeds
/// derived from `seed`.
pub fn phantom_datasets(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Datasets> {
    let make = |k: usize, role: &str| -> Result<Scan> {
        let spec = TreeSpec {
            seed: seed.wrapping_mul(1000).wrapping_add(k as u64 + 1),
            ..desk_tree()
        };
        Ok(phantom_scan(generate(&spec, DESK_DIMS)?, format!("{role}{k}")))
    };
    let mut k = 0;
    let mut take = |n: usize, role: &str| -> Result<Vec<Scan>> {
        let v = (k..k + n).map(|i| make(i, role)).collect();
        k += n;
        v
    };
    Ok(Datasets {
        train: take(n_train, "train")?,
        val: take(n_val, "val")?,
        test: take(n_test, "test")?,
    })
}

/// Split used by the five-setup comparison: 2 train, 1 val, 4 test phantoms.
pub fn desk_datasets(seed: u64) -> Result<Datasets> {
    phantom_datasets(seed, 2, 1, 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rule_traces() {
        let mut r = StopRule::new(EarlyStop::NoImprovement, 1);
        assert_eq!(r.observe(1, 1.0), (true, false));
        assert_eq!(r.observe(2, 2.0), (false, true));
        assert_eq!(r.best(), (1, 1.0));

        let mut r = StopRule::new(EarlyStop::NoImprovement, 3);
        for (e, v) in [(1, 1.0), (2, 0.5), (3, 0.7), (4, 0.4), (5, 0.6), (6, 0.45)] {
            assert!(!r.observe(e, v).1);
        }
        assert!(r.observe(7, 0.41).1);

        // a dip resets the rising streak
        let mut r = StopRule::new(EarlyStop::Increasing, 2);
        assert!(!r.observe(1, 1.0).1);
        assert!(!r.observe(2, 1.1).1);
        assert!(!r.observe(3, 0.9).1);
        assert!(!r.observe(4, 1.5).1);
        assert!(r.observe(5, 1.6).1);
    }

    #[test]
    fn setups_validate() {
        for (l, a) in SETUPS {
            let cfg = TrainConfig {
                loss: l,
                augmentation: a,
                ..Default::default()
            };
            cfg.validate_setup().unwrap();
        }
        let bad = TrainConfig {
            loss: LossKind::Wbce,
            augmentation: Augmentation::Elastic,
            ..Default::default()
        };
        assert!(matches!(bad.validate_setup(), Err(Error::Config { .. })));
        assert_eq!(setup_name(LossKind::Wbce, Augmentation::Rigid), "wBCE-Rigid");
    }

    #[test]
    fn empty_split_is_a_config_error() {
        let cfg = TrainConfig {
            net: UnetConfig::desk(),
            ..Default::default()
        };
        let r = train(&[], &[], &cfg, None);
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
