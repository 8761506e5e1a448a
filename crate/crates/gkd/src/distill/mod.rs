//! Knowledge distillation for the toy detector.
//!
//! Two signals flow from a frozen teacher to a student:
//!
//! * a **saliency** term ([`crate::saliency`]) matching where the task loss
//!   says the features matter, and
//! * an **imitation** term ([`crate::imitation`]) matching the features
//!   themselves, gated by box masks and attention.
//!
//! The combined distillation loss is `saliency + bmfi_weight * imitation`,
//! and the training objective is `task + kd_weight * distillation`. Each
//! signal toggles independently, and with everything off the training loop
//! is exactly the plain baseline — same arithmetic, same random draws.

mod sgd;
mod train;

pub use sgd::{sgd_step, SgdState};
pub use train::{
    distill_train, prepare_teacher_kd, train_detector, EpochMetrics, TeacherKd, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::imitation::bmfi_loss;
use crate::saliency::{gkd_loss, target_map};
use crate::tensor::{Tape, Tensor};

/// Which distillation signals run, and their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    /// Saliency-map matching.
    pub use_gkd: bool,
    /// Box masks inside the imitation term.
    pub use_mask: bool,
    /// Attention weighting plus attention matching inside the imitation term.
    pub use_mfi: bool,
    /// Weight of the whole distillation loss against the task loss.
    pub kd_weight: f64,
    /// Weight of the imitation term inside the distillation loss.
    pub bmfi_weight: f64,
    /// Weight of attention matching inside the imitation term.
    pub attention_weight: f64,
    /// Attention softmax temperature.
    pub temperature: f64,
}

impl Default for KdConfig {
    /// Every signal on with unit weights — the neutral starting point (the
    /// balance weights are free hyperparameters with no canonical values).
    fn default() -> KdConfig {
        KdConfig {
            use_gkd: true,
            use_mask: true,
            use_mfi: true,
            kd_weight: 1.0,
            bmfi_weight: 1.0,
            attention_weight: 1.0,
            temperature: 0.5,
        }
    }
}

impl KdConfig {
    /// Weights sized for the toy detector on the synthetic shapes set,
    /// picked by the sweep in `examples/kd_sweep.rs`: the raw feature
    /// imitation term is a sum over feature cells and runs two to three
    /// orders of magnitude hotter than the task loss, so its weight comes
    /// well down; attention matching keeps unit weight inside it.
    pub fn desk() -> KdConfig {
        KdConfig { bmfi_weight: 0.002, attention_weight: 1.0, ..KdConfig::default() }
    }

    /// No distillation at all: the plain training baseline.
    pub fn disabled() -> KdConfig {
        KdConfig { use_gkd: false, use_mask: false, use_mfi: false, ..KdConfig::default() }
    }

    /// True when any signal is on and carries weight.
    pub fn is_active(&self) -> bool {
        self.kd_weight != 0.0 && (self.use_gkd || self.imitation_active())
    }

    /// True when the imitation term participates.
    pub fn imitation_active(&self) -> bool {
        self.use_mask || self.use_mfi
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kd_weight", self.kd_weight),
            ("bmfi_weight", self.bmfi_weight),
            ("attention_weight", self.attention_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("kd config", format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(
                "kd config",
                format!("temperature must be positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Optimizer schedule and loop shape for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps of linear learning-rate warmup (0 disables it).
    pub warmup_steps: usize,
    /// Seed for shuffling (model init seeds are passed separately).
    pub seed: u64,
    /// How many validation scenes feed the per-epoch saliency-similarity
    /// metric (0 skips it).
    pub similarity_scenes: usize,
}

impl TrainConfig {
    /// Minutes-on-one-core settings: gentle learning rate with warmup.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            seed: 0,
            similarity_scenes: 12,
        }
    }

    /// The schedule shape used by large-scale detector training: a high
    /// learning rate and no warmup. Kept for comparison runs.
    pub fn high_lr() -> TrainConfig {
        TrainConfig { lr: 0.2, warmup_steps: 0, ..TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train config", "epochs and batch_size must be positive".to_string()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train config", format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train config", format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "train config",
                format!("weight_decay must be >= 0, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }

    /// Learning rate at a (0-based) global step, with linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step + 1 >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Constant per-batch teacher-side inputs to the distillation loss, one
/// entry per pyramid level.
pub struct KdBatch {
    /// Teacher pyramid features, `[B, C, h, w]` each.
    pub teacher_features: Vec<Tensor>,
    /// Teacher saliency maps, `[B, 1, h, w]` each.
    pub teacher_maps: Vec<Tensor>,
    /// Box masks, `[B, 1, h, w]` each; `None` runs imitation unmasked.
    pub masks: Vec<Option<Tensor>>,
}

/// The distillation loss with its components' plain values for logging.
pub struct KdLossParts {
    pub total: Tensor,
    pub saliency_value: f64,
    pub imitation_value: f64,
}

/// Builds the combined distillation loss on `tape`.
///
/// `student_levels` are the student's live pyramid features;
/// `student_weights` are its per-level saliency channel weights (constants
/// from a capture pass), required exactly when saliency matching is on.
pub fn total_kd_loss(
    tape: &Tape,
    kd: &KdConfig,
    batch: &KdBatch,
    student_levels: &[Tensor],
    student_weights: Option<&[Tensor]>,
) -> Result<KdLossParts> {
    kd.validate()?;
    let levels = student_levels.len();
    if batch.teacher_features.len() != levels
        || batch.teacher_maps.len() != levels
        || batch.masks.len() != levels
    {
        return Err(Error::shape(
            "kd loss",
            format!(
                "level counts disagree: student {levels}, teacher features {}, maps {}, masks {}",
                batch.teacher_features.len(),
                batch.teacher_maps.len(),
                batch.masks.len()
            ),
        ));
    }

    let mut total: Option<Tensor> = None;
    let mut saliency_value = 0.0;
    let mut imitation_value = 0.0;

    if kd.use_gkd {
        let weights = student_weights.ok_or_else(|| {
            Error::invalid("kd loss", "saliency matching needs student channel weights".to_string())
        })?;
        if weights.len() != levels {
            return Err(Error::shape(
                "kd loss",
                format!("{} weight sets for {levels} levels", weights.len()),
            ));
        }
        let student_maps = student_levels
            .iter()
            .zip(weights)
            .map(|(f, w)| target_map(tape, f, w))
            .collect::<Result<Vec<_>>>()?;
        let s = gkd_loss(tape, &batch.teacher_maps, &student_maps)?;
        saliency_value = s.item();
        total = Some(s);
    }

    if kd.imitation_active() {
        let mut imitation: Option<Tensor> = None;
        for (level, s_feat) in student_levels.iter().enumerate() {
            let term = bmfi_loss(
                tape,
                &batch.teacher_features[level],
                s_feat,
                batch.masks[level].as_ref(),
                kd.temperature,
                kd.attention_weight,
                kd.use_mfi,
            )?;
            imitation = Some(match imitation {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        let imit = imitation.expect("at least one level");
        imitation_value = imit.item();
        let weighted = tape.scalar_mul(kd.bmfi_weight, &imit)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(&acc, &weighted)?,
        });
    }

    let total = match total {
        Some(t) => t,
        None => Tensor::scalar(0.0)?,
    };
    Ok(KdLossParts { total, saliency_value, imitation_value })
}

/// Copies every teacher parameter whose shape the student shares by
/// construction — the per-level smoothing convs and both heads — into the
/// student. Backbone and lateral projections depend on the backbone width
/// and keep their fresh initialization. Returns how many tensors were
/// copied.
///
/// A caution: a trained, confident head sitting on random lateral features
/// yields task losses one to two orders above a fresh head's, and under the
/// desk schedule such runs often blow up within the first warmup epoch.
/// Warm starts also advantage any run that gets one, so comparisons against
/// a from-scratch baseline should either warm-start both sides or neither.
pub fn inherit_init(student: &mut DetectorModel, teacher: &DetectorModel) -> Result<usize> {
    let want = |name: &str| {
        name.starts_with("neck_out.") || name.starts_with("head.")
    };
    let teacher_params: Vec<(String, Tensor)> = teacher
        .named_params()
        .into_iter()
        .filter(|(n, _)| want(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut copied = 0usize;
    for (name, slot) in student.named_params_mut() {
        if !want(&name) {
            continue;
        }
        let Some((_, src)) = teacher_params.iter().find(|(n, _)| *n == name) else {
            return Err(Error::invalid(
                "inherit",
                format!("teacher has no tensor named '{name}'"),
            ));
        };
        if src.shape() != slot.shape() {
            return Err(Error::shape(
                "inherit",
                format!("'{name}': teacher {:?} vs student {:?}", src.shape(), slot.shape()),
            ));
        }
        *slot = src.detach().requires_grad(true);
        copied += 1;
    }
    Ok(copied)
}
