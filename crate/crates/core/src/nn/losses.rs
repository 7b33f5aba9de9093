//! Training objectives expressed on the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Batch mean of `w_s * ||pred_s - target_s||^2`, the squared norm summed over
/// steps and coordinates. Without weights every sample counts once.
pub fn l2_on_tape(tape: &mut Tape, pred: Var, target: Var, weights: Option<Var>) -> Var {
    let d = tape.sub(pred, target);
    let sq = tape.square(d);
    let per_sample = tape.row_sum(sq);
    let weighted = match weights {
        Some(w) => tape.mul_col(per_sample, w),
        None => per_sample,
    };
    tape.mean(weighted)
}

/// `-E[log D(real)] - E[log(1 - D(fake))]` from classifier logits.
pub fn discriminator_loss(tape: &mut Tape, logit_real: Var, logit_fake: Var) -> Var {
    let neg_real = tape.scale(logit_real, -1.0);
    let a = tape.softplus(neg_real);
    let a = tape.mean(a);
    let b = tape.softplus(logit_fake);
    let b = tape.mean(b);
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `-E[log D(G(x, z))]`
    #[default]
    NonSaturating,
    /// `E[log(1 - D(G(x, z)))]`, the minimax objective as written.
    Minimax,
}

pub fn generator_adversarial_loss(tape: &mut Tape, logit_fake: Var, form: AdversarialForm) -> Var {
    match form {
        AdversarialForm::NonSaturating => {
            let neg = tape.scale(logit_fake, -1.0);
            let s = tape.softplus(neg);
            tape.mean(s)
        }
        AdversarialForm::Minimax => {
            let s = tape.softplus(logit_fake);
            let m = tape.mean(s);
            tape.scale(m, -1.0)
        }
    }
}

/// Weighted L2 on plain matrices; rejects negative weights.
pub fn weighted_l2_loss(pred: &Mat, target: &Mat, weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if weights.len() != pred.rows {
        return Err(Error::Shape(format!("{} weights for {} samples", weights.len(), pred.rows)));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("sample weight {w} is negative or NaN")));
    }
    if pred.rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..pred.rows)
        .map(|r| {
            let se: f64 = pred.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            weights[r] * se
        })
        .sum();
    Ok(total / pred.rows as f64)
}

/// Gradient of [`weighted_l2_loss`] with respect to `pred`.
pub fn weighted_l2_grad(pred: &Mat, target: &Mat, weights: &[f64]) -> Result<Mat> {
    let mut tape = Tape::new();
    let p = tape.input(pred.clone());
    let t = tape.constant(target.clone());
    weighted_l2_loss(pred, target, weights)?;
    let w = tape.constant(Mat::from_vec(weights.len(), 1, weights.to_vec()));
    let loss = l2_on_tape(&mut tape, p, t, Some(w));
    let mut g = tape.backward(loss);
    Ok(g.take(p).unwrap_or_else(|| Mat::zeros(pred.rows, pred.cols)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_l2_examples() {
        // per-sample squared errors 3 and 5
        let pred = Mat::from_vec(2, 2, vec![1.0, 1.0, 2.0, 1.0]);
        let target = Mat::from_vec(2, 2, vec![0.0, (1.0f64 - 2f64.sqrt()), 0.0, 0.0]);
        let se0 = 1.0 + 2.0;
        assert!((weighted_l2_loss(&pred, &target, &[1.0, 1.0]).unwrap() - (se0 + 5.0) / 2.0).abs() < 1e-12);
        assert!((weighted_l2_loss(&pred, &target, &[2.0, 1.0]).unwrap() - 5.5).abs() < 1e-12);
        assert!(matches!(
            weighted_l2_loss(&pred, &target, &[-1.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_weight_sample_has_zero_gradient() {
        let pred = Mat::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let target = Mat::zeros(2, 2);
        let g = weighted_l2_grad(&pred, &target, &[0.0, 1.0]).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(1), &[0.5, 2.0]);
    }
}
