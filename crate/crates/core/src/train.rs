//! Desk-scale training loop: decoupled-weight-decay Adam, a cosine
//! learning-rate schedule, deterministic shuffling and augmentation, a
//! per-identity validation split, and early stopping with best-weight
//! restore.

use crate::backbone::layers::ParamReg;
use crate::backbone::{EdgeEarModel, ModelConfig};
use crate::data::{augment, mix_seed, resize_dataset, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ClassificationHead, LossKind};
use crate::tensor::{read_blob, write_blob, GradTape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Learning rate at `step` of a cosine decay from `lr0` to zero over
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "schedule step {} is past the end ({})",
            step, total_steps
        )));
    }
    let x = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + x.cos()))
}

/// Decoupled-weight-decay Adam keyed by parameter name. Decay applies to
/// projection and convolution weights; biases, norm parameters, and
/// attention temperatures are left undecayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Whether a parameter name belongs to the decayed group.
    pub fn decays(name: &str) -> bool {
        name.ends_with(".weight") || name.ends_with(".w_down") || name.ends_with(".w_up")
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Start one optimizer step; every `update` call until the next
    /// `begin_step` shares its bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one named parameter in place from its gradient.
    pub fn update(&mut self, lr: f64, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Contract("call begin_step before update".into()));
        }
        let n = param.numel();
        if grad.len() != n {
            return Err(Error::Dimension(format!(
                "gradient for {} has {} values, parameter has {}",
                name,
                grad.len(),
                n
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient for {} is not finite",
                name
            )));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Dimension(format!(
                "optimizer state for {} was built for {} values, parameter has {}",
                name,
                m.len(),
                n
            )));
        }
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let wd = if Self::decays(name) { self.weight_decay } else { 0.0 };
        let data = param.data_mut();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * data[i]);
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {} became non-finite after the update",
                name
            )));
        }
        Ok(())
    }
}

/// Full training recipe. Defaults are sized for a desktop CPU run; larger
/// batches and long schedules only pay off with far more data and compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    /// Peak learning rate, reached at step 0 of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; also shortens the cosine schedule.
    pub max_steps: Option<usize>,
    /// Consecutive non-improving validation epochs tolerated before
    /// stopping.
    pub patience: usize,
    /// Share of each identity's samples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossKind::CrossEntropy { label_smoothing: 0.1 },
            lr: 3e-3,
            weight_decay: 0.05,
            batch_size: 32,
            epochs: 30,
            max_steps: None,
            patience: 5,
            val_fraction: 0.2,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if !(self.val_fraction.is_finite() && (0.0..1.0).contains(&self.val_fraction)) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        match self.loss {
            LossKind::CrossEntropy { label_smoothing } => {
                if !(label_smoothing.is_finite() && (0.0..1.0).contains(&label_smoothing)) {
                    return Err(Error::Config(format!(
                        "label_smoothing must be in [0, 1), got {}",
                        label_smoothing
                    )));
                }
            }
            LossKind::ArcFace { margin, scale } => {
                if !(margin.is_finite() && (0.0..std::f64::consts::FRAC_PI_2).contains(&margin)) {
                    return Err(Error::Config(format!(
                        "margin must be in [0, pi/2), got {}",
                        margin
                    )));
                }
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Config(format!(
                        "scale must be positive, got {}",
                        scale
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One epoch's summary. `lr` is the rate used at the epoch's last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// A finished training run: the restored best model with its classifier
/// head and the full epoch history.
#[derive(Debug)]
pub struct FitResult {
    pub model: EdgeEarModel,
    pub head: ClassificationHead,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps_taken: usize,
}

/// Per-identity split: the last `floor(val_fraction * n)` samples of each
/// identity (in dataset order) go to validation.
fn split_indices(ds: &Dataset, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut per_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        per_identity.entry(s.identity).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, idx) in per_identity {
        let n_val = (val_fraction * idx.len() as f64).floor() as usize;
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn stack_augmented(
    ds: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let size = cfg.output_size;
    let mut out = Tensor::zeros(&[indices.len(), 3, size, size]);
    let plane = 3 * size * size;
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let img = augment(&ds.samples[i].image, cfg, rng)?;
        out.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(img.data());
        labels.push(ds.samples[i].identity);
    }
    Ok((out, labels))
}

fn batch_loss(
    model: &EdgeEarModel,
    head: &ClassificationHead,
    kind: &LossKind,
    images: &Tensor,
    labels: &[usize],
    trainable: bool,
) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
    let mut tape = GradTape::new();
    let mut reg = if trainable {
        ParamReg::for_training()
    } else {
        ParamReg::frozen()
    };
    let emb = model.forward_embed(&mut tape, images, &mut reg)?;
    let w = reg.register(&mut tape, "classifier.weight".into(), &head.weight);
    let b = head
        .bias
        .as_ref()
        .map(|t| reg.register(&mut tape, "classifier.bias".into(), t));
    let loss = head.loss_with(&mut tape, emb, labels, kind, w, b)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", value)));
    }
    if !trainable {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in reg.vars() {
        let g = tape.grad(*var).ok_or_else(|| {
            Error::Contract(format!("no gradient reached parameter {}", name))
        })?;
        grads.insert(name.clone(), g.to_vec());
    }
    Ok((value, Some(grads)))
}

fn snapshot(model: &EdgeEarModel, head: &ClassificationHead) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    model.visit_params(&mut |name, t| {
        out.insert(name, t.clone());
    });
    out.insert("classifier.weight".into(), head.weight.clone());
    if let Some(b) = &head.bias {
        out.insert("classifier.bias".into(), b.clone());
    }
    out
}

fn restore(model: &mut EdgeEarModel, head: &mut ClassificationHead, snap: &BTreeMap<String, Tensor>) {
    model.visit_params_mut(&mut |name, t| {
        *t = snap[&name].clone();
    });
    head.weight = snap["classifier.weight"].clone();
    if let Some(b) = &mut head.bias {
        *b = snap["classifier.bias"].clone();
    }
}

/// Train a fresh model on the dataset. Fully deterministic: the same
/// config and dataset produce bitwise-identical weights and history.
pub fn fit(config: &TrainConfig, dataset: &Dataset) -> Result<FitResult> {
    config.validate()?;
    if dataset.num_identities < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 identities, got {}",
            dataset.num_identities
        )));
    }
    let input = config.model.input_size;
    let resized;
    let ds = if dataset.image_size == input {
        dataset
    } else {
        resized = resize_dataset(dataset, input)?;
        &resized
    };
    let mut aug = config.augment.clone();
    aug.output_size = input;

    let (train_idx, val_idx) = split_indices(ds, config.val_fraction);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::Config(
            "validation split is empty; raise val_fraction or add samples".into(),
        ));
    }

    let mut model = EdgeEarModel::build(config.model.clone(), config.seed)?;
    let mut head = ClassificationHead::new(
        config.model.embedding_dim,
        ds.num_identities,
        &config.loss,
    )?;
    let mut head_rng = ChaCha20Rng::seed_from_u64(mix_seed(&[config.seed, 0xC1A5]));
    head.init_with(&mut head_rng);

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let mut total_steps = config.epochs * steps_per_epoch;
    if let Some(cap) = config.max_steps {
        total_steps = total_steps.min(cap);
    }

    let mut opt = AdamW::new(config.weight_decay);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snap = None;
    let mut bad_epochs = 0usize;
    let mut global_step = 0usize;

    'epochs: for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, 1]));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = ChaCha20Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, 2]));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        let mut stop_after_epoch = false;
        for chunk in order.chunks(config.batch_size) {
            if global_step >= total_steps {
                stop_after_epoch = true;
                break;
            }
            let (images, labels) = stack_augmented(ds, chunk, &aug, &mut aug_rng)?;
            let (value, grads) = batch_loss(&model, &head, &config.loss, &images, &labels, true)
                .map_err(|e| {
                    Error::Numeric(format!("epoch {} step {}: {}", epoch, global_step, e))
                })?;
            let grads = grads.expect("trainable pass returns gradients");
            let lr = cosine_lr(global_step, total_steps, config.lr)?;
            last_lr = lr;
            opt.begin_step();
            let mut first_err: Option<Error> = None;
            model.visit_params_mut(&mut |name, t| {
                if first_err.is_some() {
                    return;
                }
                if let Err(e) = opt.update(lr, &name, t, &grads[&name]) {
                    first_err = Some(e);
                }
            });
            if let Some(e) = first_err {
                return Err(e);
            }
            opt.update(lr, "classifier.weight", &mut head.weight, &grads["classifier.weight"])?;
            if let Some(b) = &mut head.bias {
                opt.update(lr, "classifier.bias", b, &grads["classifier.bias"])?;
            }
            loss_sum += value * labels.len() as f64;
            seen += labels.len();
            global_step += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let train_loss = loss_sum / seen as f64;

        let mut val_sum = 0.0;
        let mut val_seen = 0usize;
        for chunk in val_idx.chunks(config.batch_size) {
            let images = crate::data::stack_images(&ds.samples, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].identity).collect();
            let (value, _) = batch_loss(&model, &head, &config.loss, &images, &labels, false)?;
            val_sum += value * labels.len() as f64;
            val_seen += labels.len();
        }
        let val_loss = val_sum / val_seen as f64;

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: last_lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_snap = Some(snapshot(&model, &head));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > config.patience {
                break 'epochs;
            }
        }
        if stop_after_epoch {
            break 'epochs;
        }
    }

    if let Some(snap) = &best_snap {
        restore(&mut model, &mut head, snap);
    }
    Ok(FitResult {
        model,
        head,
        history,
        best_epoch,
        best_val_loss: best_val,
        steps_taken: global_step,
    })
}

/// Columns: epoch, train_loss, val_loss, lr.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["epoch", "train_loss", "val_loss", "lr"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{}", h.train_loss),
            format!("{}", h.val_loss),
            format!("{}", h.lr),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Write a checkpoint directory: config.json, model.blob, head.blob,
/// history.csv.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, result: &FitResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Contract(format!("config serialization failed: {}", e)))?;
    std::fs::write(dir.join("config.json"), json + "\n")?;
    result.model.save_weights(&dir.join("model.blob"))?;
    let mut head_entries: Vec<(String, &Tensor)> =
        vec![("classifier.weight".into(), &result.head.weight)];
    if let Some(b) = &result.head.bias {
        head_entries.push(("classifier.bias".into(), b));
    }
    write_blob(&dir.join("head.blob"), &head_entries)?;
    write_history_csv(&dir.join("history.csv"), &result.history)?;
    Ok(())
}

/// Rebuild the trained model from a checkpoint directory.
pub fn load_checkpoint_model(dir: &Path) -> Result<(TrainConfig, EdgeEarModel)> {
    let text = std::fs::read_to_string(dir.join("config.json"))
        .map_err(|e| Error::Load(format!("cannot read {}: {}", dir.join("config.json").display(), e)))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("bad train config: {}", e)))?;
    config.validate()?;
    let mut model = EdgeEarModel::new(config.model.clone())?;
    model.load_weights(&dir.join("model.blob"))?;
    Ok((config, model))
}

/// Load the classifier head saved next to the model.
pub fn load_checkpoint_head(dir: &Path, config: &TrainConfig, num_classes: usize) -> Result<ClassificationHead> {
    let entries = read_blob(&dir.join("head.blob"))?;
    let mut head = ClassificationHead::new(config.model.embedding_dim, num_classes, &config.loss)?;
    let mut seen_weight = false;
    for (name, t) in entries {
        match name.as_str() {
            "classifier.weight" => {
                if t.shape() != head.weight.shape() {
                    return Err(Error::Load(format!(
                        "classifier.weight has shape {:?}, expected {:?}",
                        t.shape(),
                        head.weight.shape()
                    )));
                }
                head.weight = t;
                seen_weight = true;
            }
            "classifier.bias" => match &mut head.bias {
                Some(b) if b.shape() == t.shape() => *b = t,
                _ => {
                    return Err(Error::Load(
                        "checkpoint head bias does not match the configured loss".into(),
                    ))
                }
            },
            other => {
                return Err(Error::Load(format!("unexpected tensor {} in head blob", other)))
            }
        }
    }
    if !seen_weight {
        return Err(Error::Load("head blob is missing classifier.weight".into()));
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cosine_schedule_hits_its_anchors() {
        assert_eq!(cosine_lr(0, 100, 3e-3).unwrap(), 3e-3);
        let end = cosine_lr(100, 100, 3e-3).unwrap();
        assert!(end.abs() < 1e-18);
        let mid = cosine_lr(50, 100, 3e-3).unwrap();
        assert!((mid - 1.5e-3).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 3e-3).is_err());
        assert!(cosine_lr(0, 0, 3e-3).is_err());
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![0.5, -0.25, 2.0]).unwrap();
        let before = p.data().to_vec();
        let mut opt = AdamW::new(0.0);
        opt.begin_step();
        opt.update(1e-2, "layer.weight", &mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn two_steps_match_the_written_out_update() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.05);
        let lr = 0.1;
        let grads = [0.3, -0.2];
        let (b1, b2, eps, wd): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.05);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut expect = 1.0f64;
        for (t, &g) in grads.iter().enumerate() {
            let t = t + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            expect -= lr * (mhat / (vhat.sqrt() + eps) + wd * expect);
            opt.begin_step();
            opt.update(lr, "w.weight", &mut p, &[g]).unwrap();
        }
        assert_eq!(p.data()[0].to_bits(), expect.to_bits());
    }

    #[test]
    fn decay_only_shrinks_decayed_parameters_multiplicatively() {
        let mut w = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut g = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(0.05);
        let lr = 0.1;
        opt.begin_step();
        opt.update(lr, "layer.weight", &mut w, &[0.0, 0.0]).unwrap();
        opt.update(lr, "layer.gamma", &mut g, &[0.0, 0.0]).unwrap();
        assert_eq!(w.data()[0], 1.0 * (1.0 - lr * 0.05));
        assert_eq!(w.data()[1], -2.0 * (1.0 - lr * 0.05));
        // undecayed parameter with zero gradient stays put
        assert_eq!(g.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_mask_follows_name_suffixes() {
        for name in ["stem.conv.weight", "s.b.pw1.w_down", "s.b.pw1.w_up", "head.linear.weight"] {
            assert!(AdamW::decays(name), "{}", name);
        }
        for name in [
            "stem.conv.bias",
            "stem.norm.gamma",
            "stage4.block3.norm_mlp.beta",
            "stage4.block3.attention.temperature",
        ] {
            assert!(!AdamW::decays(name), "{}", name);
        }
    }

    #[test]
    fn nan_gradient_is_rejected_with_the_parameter_name() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.begin_step();
        let err = opt
            .update(0.1, "stage1.block1.dwconv.weight", &mut p, &[f64::NAN])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage1.block1.dwconv.weight"), "{}", err);
    }

    #[test]
    fn train_config_validation_catches_bad_fields() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c = ok.clone();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c = ok.clone();
        c.val_fraction = 1.0;
        assert!(c.validate().is_err());
        c = ok.clone();
        c.loss = LossKind::ArcFace { margin: 2.0, scale: 8.0 };
        assert!(c.validate().is_err());
        c = ok.clone();
        c.max_steps = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_takes_the_last_fifth_of_each_identity() {
        let ds = crate::data::synth_dataset(3, 10, 16, 4).unwrap();
        let (train, val) = split_indices(&ds, 0.2);
        assert_eq!(train.len(), 24);
        assert_eq!(val.len(), 6);
        // samples are grouped by identity in synthesis order, so the val
        // rows are the last two of each group of ten
        assert_eq!(val, vec![8, 9, 18, 19, 28, 29]);
    }

    #[test]
    fn history_csv_round_trips_textually() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochStats { epoch: 1, train_loss: 2.5, val_loss: 2.25, lr: 3e-3 },
            EpochStats { epoch: 2, train_loss: 1.75, val_loss: 2.5, lr: 1.5e-3 },
        ];
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,val_loss,lr\n1,2.5,2.25,0.003\n2,1.75,2.5,0.0015\n"
        );
    }

    #[test]
    fn adamw_moves_a_quadratic_toward_its_minimum() {
        // minimize (x - 3)^2 by hand-fed gradients
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        for _ in 0..300 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.begin_step();
            opt.update(0.05, "x.weight", &mut p, &[g]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.05, "{}", p.data()[0]);
    }

    #[test]
    fn update_without_begin_step_is_a_contract_error() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        assert!(opt.update(0.1, "w.weight", &mut p, &[0.1]).is_err());
    }

    #[test]
    fn rng_streams_for_shuffle_and_augment_differ() {
        let a = mix_seed(&[7, 1, 1]);
        let b = mix_seed(&[7, 1, 2]);
        assert_ne!(a, b);
        let mut ra = ChaCha20Rng::seed_from_u64(a);
        let mut rb = ChaCha20Rng::seed_from_u64(b);
        assert_ne!(ra.gen::<u64>(), rb.gen::<u64>());
    }
}
