//! Supervision terms: binary cross-entropy (optionally class-balanced), Dice,
//! and the per-branch combination used to train the model.
//!
//! The branch mapping is: segmentation -> BCE, boundary -> BCE + Dice,
//! contraction -> Dice, expansion -> Dice, summed without weights by default.
//! BCE is mean-reduced over pixels; Dice uses global sums. All math runs on
//! logits in the numerically stable softplus form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::morphology::{BinaryMask, TargetSet};

/// How the positive-class weight of the boundary BCE term is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosWeightMode {
    /// Weight 1: plain BCE.
    Fixed,
    /// Scale the positive term by #negatives / #positives, per sample.
    AutoBalance,
}

/// Scalar multipliers for each loss term; all default to 1 (plain sum).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub seg: f64,
    pub bnd_bce: f64,
    pub bnd_dice: f64,
    pub con: f64,
    pub exp: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { seg: 1.0, bnd_bce: 1.0, bnd_dice: 1.0, con: 1.0, exp: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Smoothing constant added to the Dice numerator and denominator.
    pub dice_smooth: f64,
    pub pos_weight_mode: PosWeightMode,
    pub term_weights: TermWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_smooth: 1.0,
            // Plain BCE on the boundary term: the thin-contour target is
            // sparse, and a per-sample positive reweighting there floods the
            // shared encoder with outsized early gradients that the Dice-only
            // squeeze branches never recover from.
            pos_weight_mode: PosWeightMode::Fixed,
            term_weights: TermWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        Ok(())
    }
}

/// Which auxiliary branches are active; the segmentation branch always is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchSet {
    pub bnd: bool,
    pub con: bool,
    pub exp: bool,
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet { bnd: true, con: true, exp: true }
    }
}

impl BranchSet {
    pub fn seg_only() -> Self {
        BranchSet { bnd: false, con: false, exp: false }
    }

    pub fn none_extra(&self) -> bool {
        !(self.bnd || self.con || self.exp)
    }
}

/// Per-branch prediction logits; absent branches are disabled.
#[derive(Clone, Debug)]
pub struct BranchLogits {
    pub seg: FeatureField,
    pub bnd: Option<FeatureField>,
    pub con: Option<FeatureField>,
    pub exp: Option<FeatureField>,
}

/// Raw per-term values plus the weighted total; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub bnd_bce: f64,
    pub bnd_dice: f64,
    pub con: f64,
    pub exp: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combined boundary term as logged.
    pub fn bnd(&self) -> f64 {
        self.bnd_bce + self.bnd_dice
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// #neg / #pos, or 1 when the target has no positives.
pub(crate) fn auto_pos_weight(targets: &[f64]) -> f64 {
    let pos: f64 = targets.iter().sum();
    if pos == 0.0 {
        1.0
    } else {
        (targets.len() as f64 - pos) / pos
    }
}

pub(crate) fn bce_forward(logits: &[f64], targets: &[f64], pos_weight: f64) -> f64 {
    let mut acc = 0.0;
    for (&z, &t) in logits.iter().zip(targets) {
        acc += pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z);
    }
    acc / logits.len() as f64
}

/// Accumulate `scale * d/dz` of the mean BCE into `d_logits`.
pub(crate) fn bce_backward(logits: &[f64], targets: &[f64], pos_weight: f64, scale: f64, d_logits: &mut [f64]) {
    let inv_n = scale / logits.len() as f64;
    for ((d, &z), &t) in d_logits.iter_mut().zip(logits).zip(targets) {
        let p = sigmoid(z);
        *d += inv_n * (p * (1.0 - t + pos_weight * t) - pos_weight * t);
    }
}

pub(crate) fn dice_forward(logits: &[f64], targets: &[f64], smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&z, &t) in logits.iter().zip(targets) {
        let p = sigmoid(z);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth)
}

/// Accumulate `scale * d/dz` of the Dice loss into `d_logits`.
pub(crate) fn dice_backward(logits: &[f64], targets: &[f64], smooth: f64, scale: f64, d_logits: &mut [f64]) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&z, &t) in logits.iter().zip(targets) {
        let p = sigmoid(z);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let num = 2.0 * inter + smooth;
    let den = psum + tsum + smooth;
    for ((d, &z), &t) in d_logits.iter_mut().zip(logits).zip(targets) {
        let p = sigmoid(z);
        // d/dp of -(num/den), then the sigmoid chain factor.
        let dp = -(2.0 * t * den - num) / (den * den);
        *d += scale * dp * p * (1.0 - p);
    }
}

pub(crate) fn mask_bits_f64(mask: &BinaryMask) -> Vec<f64> {
    mask.bits().iter().map(|&b| f64::from(b)).collect()
}

fn check_pair(logits: &FeatureField, target: &BinaryMask) -> Result<()> {
    if logits.channels() != 1 || logits.height() != target.height() || logits.width() != target.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("1x{}x{} logits", target.height(), target.width()),
            got: format!("{}x{}x{}", logits.channels(), logits.height(), logits.width()),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy between logits and a binary target.
pub fn bce(logits: &FeatureField, target: &BinaryMask) -> Result<f64> {
    check_pair(logits, target)?;
    Ok(bce_forward(logits.values(), &mask_bits_f64(target), 1.0))
}

/// BCE with the positive term scaled by #neg/#pos; plain BCE when no positives.
pub fn weighted_bce(logits: &FeatureField, target: &BinaryMask) -> Result<f64> {
    check_pair(logits, target)?;
    let t = mask_bits_f64(target);
    let w = auto_pos_weight(&t);
    Ok(bce_forward(logits.values(), &t, w))
}

/// Smoothed Dice loss on sigmoid probabilities: 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s).
pub fn dice_loss(logits: &FeatureField, target: &BinaryMask, smooth: f64) -> Result<f64> {
    check_pair(logits, target)?;
    Ok(dice_forward(logits.values(), &mask_bits_f64(target), smooth))
}

/// Combined loss over the enabled branches, with a per-term breakdown.
///
/// Every enabled branch must have logits present; extra logits for disabled
/// branches are ignored.
pub fn mask_loss(preds: &BranchLogits, targets: &TargetSet, enabled: &BranchSet, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let w = &cfg.term_weights;
    let mut out = LossBreakdown::default();
    out.seg = bce(&preds.seg, &targets.gs)?;
    out.total = w.seg * out.seg;
    if enabled.bnd {
        let bnd = preds.bnd.as_ref().ok_or_else(|| Error::MissingSlot("boundary logits".into()))?;
        out.bnd_bce = match cfg.pos_weight_mode {
            PosWeightMode::Fixed => bce(bnd, &targets.gb)?,
            PosWeightMode::AutoBalance => weighted_bce(bnd, &targets.gb)?,
        };
        out.bnd_dice = dice_loss(bnd, &targets.gb, cfg.dice_smooth)?;
        out.total += w.bnd_bce * out.bnd_bce + w.bnd_dice * out.bnd_dice;
    }
    if enabled.con {
        let con = preds.con.as_ref().ok_or_else(|| Error::MissingSlot("contraction logits".into()))?;
        out.con = dice_loss(con, &targets.gc, cfg.dice_smooth)?;
        out.total += w.con * out.con;
    }
    if enabled.exp {
        let exp = preds.exp.as_ref().ok_or_else(|| Error::MissingSlot("expansion logits".into()))?;
        out.exp = dice_loss(exp, &targets.ge, cfg.dice_smooth)?;
        out.total += w.exp * out.exp;
    }
    Ok(out)
}
