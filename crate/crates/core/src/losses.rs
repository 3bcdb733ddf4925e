//! Training losses: label-smoothed cross-entropy and additive angular
//! margin (ArcFace) on cosine logits, plus the classification head that
//! carries the class weights during training.

use crate::error::{Error, Result};
use crate::loralin::xavier_fill;
use crate::tensor::{GradTape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Loss selector used by the trainer and the head.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over linear logits, with label smoothing.
    CrossEntropy { label_smoothing: f64 },
    /// Additive angular margin on normalized cosine logits.
    ArcFace { margin: f64, scale: f64 },
}

/// Cross-entropy with label smoothing over [B, K] logits, averaged over the
/// batch. With uniform logits the loss is ln(K) for any smoothing factor.
pub fn cross_entropy_label_smoothing(
    tape: &mut GradTape,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
) -> Result<Var> {
    tape.cross_entropy_label_smoothing(logits, targets, epsilon)
}

/// Margin-adjusted, scale-multiplied cosine logits: rows of `embeddings`
/// and `weight` are L2-normalized, their cosines taken, the target entry of
/// each row moved from cos(theta) to cos(theta + margin), and everything
/// multiplied by `scale`.
///
/// Zero-norm embedding rows are a numeric error; class weight rows must be
/// nonzero as well.
pub fn arcface_logits(
    tape: &mut GradTape,
    embeddings: Var,
    weight: Var,
    targets: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    if scale <= 0.0 {
        return Err(Error::Config(format!(
            "arcface: scale {} must be positive",
            scale
        )));
    }
    {
        let e = tape.value(embeddings);
        let shape = e.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "arcface: embeddings must be [B, D], got {:?}",
                shape
            )));
        }
        let d = shape[1];
        for (i, row) in e.data().chunks_exact(d).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Numeric(format!(
                    "arcface: zero-norm embedding at row {}",
                    i
                )));
            }
        }
        let w = tape.value(weight);
        if w.shape().len() != 2 || w.shape()[1] != d {
            return Err(Error::Dimension(format!(
                "arcface: weight shape {:?} incompatible with embedding dim {}",
                w.shape(),
                d
            )));
        }
        for (k, row) in w.data().chunks_exact(d).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Numeric(format!(
                    "arcface: zero-norm class weight at row {}",
                    k
                )));
            }
        }
    }
    let e_norm = tape.l2_normalize_rows(embeddings, 0.0)?;
    let w_norm = tape.l2_normalize_rows(weight, 0.0)?;
    let w_t = tape.transpose(w_norm)?;
    let cos = tape.matmul(e_norm, w_t)?;
    let adjusted = tape.arc_margin(cos, targets, margin)?;
    tape.scale(adjusted, scale)
}

/// Full ArcFace loss: cross-entropy over [`arcface_logits`].
pub fn arcface(
    tape: &mut GradTape,
    embeddings: Var,
    weight: Var,
    targets: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let logits = arcface_logits(tape, embeddings, weight, targets, margin, scale)?;
    tape.cross_entropy_label_smoothing(logits, targets, 0.0)
}

/// Class-weight head used during training. The cross-entropy variant is a
/// biased linear layer over raw embeddings; the ArcFace variant is a
/// bias-free weight matrix compared against embeddings by cosine.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub dim: usize,
    pub num_classes: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ClassificationHead {
    pub fn new(dim: usize, num_classes: usize, kind: &LossKind) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classification head needs at least 2 classes, got {}",
                num_classes
            )));
        }
        if dim == 0 {
            return Err(Error::Config("classification head: dim must be positive".into()));
        }
        let bias = match kind {
            LossKind::CrossEntropy { .. } => Some(Tensor::zeros(&[num_classes])),
            LossKind::ArcFace { .. } => None,
        };
        Ok(ClassificationHead {
            dim,
            num_classes,
            weight: Tensor::zeros(&[num_classes, dim]),
            bias,
        })
    }

    pub fn xavier_init(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.init_with(&mut rng);
    }

    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        xavier_fill(&mut self.weight, self.dim, self.num_classes, rng);
    }

    /// Loss with caller-registered parameter handles for the head weights.
    pub fn loss_with(
        &self,
        tape: &mut GradTape,
        embeddings: Var,
        targets: &[usize],
        kind: &LossKind,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        match *kind {
            LossKind::CrossEntropy { label_smoothing } => {
                let logits = tape.linear(embeddings, weight, bias)?;
                tape.cross_entropy_label_smoothing(logits, targets, label_smoothing)
            }
            LossKind::ArcFace { margin, scale } => {
                arcface(tape, embeddings, weight, targets, margin, scale)
            }
        }
    }

    /// Loss registering the head's own parameters on the tape.
    pub fn loss(
        &self,
        tape: &mut GradTape,
        embeddings: Var,
        targets: &[usize],
        kind: &LossKind,
    ) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|t| tape.param(t));
        self.loss_with(tape, embeddings, targets, kind, w, b)
    }
}
