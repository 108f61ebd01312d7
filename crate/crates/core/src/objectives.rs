//! Soft Dice loss and the two composite training objectives: the
//! multi-expert sum used for training and the single-expert sum used for
//! fine-tuning to a new expert.

use crate::data::{AnnotatedCase, BinaryMask, ExpertCombination, ExpertId, ImageGrid};
use crate::error::{Error, Result};
use crate::model::{CinUnet, Gradients, LogitMap};

pub const DEFAULT_SMOOTH: f64 = 1.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `1 - (2 sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)` with `p = sigmoid(z)`,
/// together with its gradient with respect to the logits `z`.
pub fn dice_loss_with_grad(logits: &[f64], target: &[u8], smooth: f64) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len(), "logit/target length");
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&pi, &yi) in p.iter().zip(target) {
        let y = yi as f64;
        inter += pi * y;
        sum_p += pi;
        sum_y += y;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_y + smooth;
    let loss = 1.0 - num / den;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &yi)| {
            let dl_dp = -(2.0 * yi as f64 * den - num) / (den * den);
            dl_dp * pi * (1.0 - pi)
        })
        .collect();
    (loss, grad)
}

pub fn dice_loss(logits: &LogitMap, target: &BinaryMask, smooth: f64) -> Result<f64> {
    check_pair(logits, target, smooth)?;
    let z: Vec<f64> = logits.values.iter().map(|&v| v as f64).collect();
    Ok(dice_loss_with_grad(&z, target.pixels(), smooth).0)
}

fn check_pair(logits: &LogitMap, target: &BinaryMask, smooth: f64) -> Result<()> {
    if (logits.height, logits.width) != target.shape() {
        return Err(Error::Shape {
            expected: target.shape(),
            got: (logits.height, logits.width),
        });
    }
    if !(smooth > 0.0) {
        return Err(Error::Invalid("dice smoothing must be positive".into()));
    }
    Ok(())
}

/// Loss of one (image, mask) pair through `expert`'s branch; when `grads` is
/// given the gradient is back-propagated into it.
pub fn branch_loss(
    model: &CinUnet,
    image: &ImageGrid,
    target: &BinaryMask,
    expert: ExpertId,
    smooth: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    match grads {
        None => dice_loss(&model.forward(image, expert)?, target, smooth),
        Some(grads) => {
            let tape = model.forward_train(image, expert)?;
            let z: Vec<f64> = tape.logits().iter().map(|&v| v as f64).collect();
            if z.len() != target.pixels().len() {
                return Err(Error::Shape {
                    expected: target.shape(),
                    got: image.shape(),
                });
            }
            let (loss, dz) = dice_loss_with_grad(&z, target.pixels(), smooth);
            let dz: Vec<f32> = dz.into_iter().map(|v| v as f32).collect();
            model.backward(tape, &dz, grads)?;
            Ok(loss)
        }
    }
}

/// Sum over cases and combo experts of the Dice loss of each expert's branch
/// against that expert's mask. Branches are evaluated one after another and
/// gradients accumulate into `grads` when given.
pub fn multi_task_loss(
    model: &CinUnet,
    batch: &[AnnotatedCase],
    combo: &ExpertCombination,
    smooth: f64,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let mut total = 0.0;
    for case in batch {
        for &r in combo.members() {
            let mask = case.mask(r).map_err(|_| {
                Error::Data(format!(
                    "case {} has no annotation from {r}",
                    case.case_index()
                ))
            })?;
            total += branch_loss(model, case.image(), mask, r, smooth, grads.as_deref_mut())?;
        }
    }
    Ok(total)
}

/// Sum over the new expert's samples of the Dice loss of its branch.
pub fn finetune_loss(
    model: &CinUnet,
    batch: &[(ImageGrid, BinaryMask)],
    new_expert: ExpertId,
    smooth: f64,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    if !model.has_expert(new_expert) {
        return Err(Error::UnknownExpert(new_expert.0));
    }
    let mut total = 0.0;
    for (x, y) in batch {
        total += branch_loss(model, x, y, new_expert, smooth, grads.as_deref_mut())?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_prediction_has_near_zero_loss() {
        let y: Vec<u8> = (0..36).map(|i| u8::from(i % 3 == 0)).collect();
        let z: Vec<f64> = y.iter().map(|&v| if v == 1 { 40.0 } else { -40.0 }).collect();
        let (loss, _) = dice_loss_with_grad(&z, &y, 1.0);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn double_empty_is_zero() {
        let (loss, _) = dice_loss_with_grad(&[-800.0; 16], &[0; 16], 1.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn half_probability_closed_form() {
        // F foreground of N pixels at p = 0.5 with vanishing smoothing
        let n = 64;
        let f = 20;
        let y: Vec<u8> = (0..n).map(|i| u8::from(i < f)).collect();
        let (loss, _) = dice_loss_with_grad(&vec![0.0; n], &y, 1e-12);
        // brute-force sums: inter = 0.5 F, sum p = 0.5 N
        let inter: f64 = y.iter().map(|&v| 0.5 * v as f64).sum();
        let sum_p: f64 = (0..n).map(|_| 0.5).sum();
        let brute = 1.0 - 2.0 * inter / (sum_p + f as f64);
        let closed = 1.0 - f as f64 / (0.5 * n as f64 + f as f64);
        assert!((loss - closed).abs() < 1e-9);
        assert!((brute - closed).abs() < 1e-12);
    }

    #[test]
    fn shape_and_smooth_validation() {
        let logits = LogitMap {
            height: 8,
            width: 8,
            values: vec![0.0; 64],
        };
        let wrong = BinaryMask::empty(9, 8).unwrap();
        assert!(matches!(dice_loss(&logits, &wrong, 1.0), Err(Error::Shape { .. })));
        let ok = BinaryMask::empty(8, 8).unwrap();
        assert!(dice_loss(&logits, &ok, 0.0).is_err());
        assert!(dice_loss(&logits, &ok, 1.0).is_ok());
    }
}
