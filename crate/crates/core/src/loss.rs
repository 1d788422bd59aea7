//! Focal and dice losses, their per-timestep combination, and overlap scores.
//!
//! The slice functions return the loss together with its gradient with
//! respect to the predicted probabilities so the trainer can seed the
//! backward pass; the [`Raster`] wrappers are the checked public surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Predictions are clipped into `[CLIP, 1 - CLIP]` before the logarithm.
pub const CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub eval_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            eval_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("loss: {what}")));
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal_alpha must be in (0, 1]");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !(self.dice_smooth > 0.0) {
            return bad("dice_smooth must be > 0");
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return bad("eval_threshold must be in (0, 1)");
        }
        Ok(())
    }
}

/// Mean focal loss `-alpha (1 - p_t)^gamma ln p_t` with `p_t = p` on
/// positives and `1 - p` on negatives, and its gradient in `p`.
pub fn focal_with_grad(pred: &[f64], target: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p_raw, &y) in pred.iter().zip(target) {
        let p = p_raw.clamp(CLIP, 1.0 - CLIP);
        let pt = y * p + (1.0 - y) * (1.0 - p);
        let q = 1.0 - pt;
        let log_pt = pt.ln();
        total += -alpha * q.powf(gamma) * log_pt;
        let d_pt = if gamma == 0.0 {
            -alpha / pt
        } else {
            -alpha * (-gamma * q.powf(gamma - 1.0) * log_pt + q.powf(gamma) / pt)
        };
        let inside = p_raw > CLIP && p_raw < 1.0 - CLIP;
        grad.push(if inside { d_pt * (2.0 * y - 1.0) / n } else { 0.0 });
    }
    (total / n, grad)
}

/// Soft dice loss `1 - (2 sum(p y) + s) / (sum p + sum y + s)` and its
/// gradient in `p`.
pub fn dice_with_grad(pred: &[f64], target: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let s = cfg.dice_smooth;
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(target) {
        inter += p * y;
        sp += p;
        sy += y;
    }
    let num = 2.0 * inter + s;
    let den = sp + sy + s;
    let grad = target
        .iter()
        .map(|&y| -(2.0 * y * den - num) / (den * den))
        .collect();
    (1.0 - num / den, grad)
}

/// Focal plus dice for one mask, with the summed gradient.
pub fn combined_with_grad(pred: &[f64], target: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (f, mut g) = focal_with_grad(pred, target, cfg);
    let (d, gd) = dice_with_grad(pred, target, cfg);
    g.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
    (f + d, g)
}

/// Mean over outputs of focal plus dice, every output scored against the
/// same target, with one gradient per output.
pub fn sequence_with_grad(preds: &[&[f64]], target: &[f64], cfg: &LossConfig) -> (f64, Vec<Vec<f64>>) {
    let k = preds.len().max(1) as f64;
    let mut total = 0.0;
    let grads = preds
        .iter()
        .map(|p| {
            let (l, mut g) = combined_with_grad(p, target, cfg);
            total += l;
            g.iter_mut().for_each(|v| *v /= k);
            g
        })
        .collect();
    (total / k, grads)
}

fn check_pair(pred: &Raster, target: &Raster) -> Result<()> {
    if pred.dims() != target.dims() || pred.channels() != 1 {
        return Err(Error::shape(
            "loss",
            format!(
                "prediction {:?} and target {:?} must be matching 1-channel rasters",
                pred.dims(),
                target.dims()
            ),
        ));
    }
    Ok(())
}

pub fn focal_loss(pred: &Raster, target: &Raster, cfg: &LossConfig) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(focal_with_grad(pred.values(), target.values(), cfg).0)
}

pub fn dice_loss(pred: &Raster, target: &Raster, cfg: &LossConfig) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(dice_with_grad(pred.values(), target.values(), cfg).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub focal: f64,
    pub dice: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.focal + self.dice
    }
}

/// Per-output focal and dice terms, each mask scored against the same target.
pub fn sequence_loss_terms(preds: &[Raster], target: &Raster, cfg: &LossConfig) -> Result<Vec<StepLoss>> {
    if preds.len() != 1 && preds.len() != 3 {
        return Err(Error::Validation(format!(
            "sequence loss needs 1 or 3 masks, got {}",
            preds.len()
        )));
    }
    preds
        .iter()
        .map(|p| {
            Ok(StepLoss {
                focal: focal_loss(p, target, cfg)?,
                dice: dice_loss(p, target, cfg)?,
            })
        })
        .collect()
}

/// Mean over outputs of focal plus dice.
pub fn sequence_loss(preds: &[Raster], target: &Raster, cfg: &LossConfig) -> Result<f64> {
    let terms = sequence_loss_terms(preds, target, cfg)?;
    Ok(terms.iter().map(StepLoss::total).sum::<f64>() / terms.len() as f64)
}

/// Pixel counts of a thresholded prediction against a binary target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl Overlap {
    pub fn count(pred: &[f64], target: &[f64], threshold: f64) -> Overlap {
        let mut o = Overlap::default();
        for (&p, &y) in pred.iter().zip(target) {
            let (a, b) = (p > threshold, y > 0.5);
            o.predicted += a as usize;
            o.actual += b as usize;
            o.intersection += (a && b) as usize;
        }
        o
    }

    /// `|P∩G| / |P∪G|`, 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let union = self.predicted + self.actual - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }

    /// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
    pub fn f1(&self) -> f64 {
        let denom = self.predicted + self.actual;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
}

pub fn segmentation_scores(pred: &Raster, target: &Raster, cfg: &LossConfig) -> Result<Scores> {
    check_pair(pred, target)?;
    let o = Overlap::count(pred.values(), target.values(), cfg.eval_threshold);
    Ok(Scores {
        iou: o.iou(),
        f1: o.f1(),
    })
}
