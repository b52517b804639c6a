use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-position cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// `-ln p(true)` per position in `(b, h, w)` order; `None` where ignored.
    pub losses: Vec<Option<T>>,
    /// `p - onehot(true)` at kept positions, zero elsewhere. Same shape as the probabilities.
    pub grad_logits: Tensor<T>,
}

impl<T: Scalar> CrossEntropy<T> {
    pub fn kept(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.losses
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
    }
}

/// Cross-entropy of softmax outputs against per-position class targets.
///
/// `targets[i]` is the true class at position `i = (b * H + h) * W + w`, or
/// `None` to exclude the position from the loss.
pub fn masked_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[Option<usize>],
) -> Result<CrossEntropy<T>> {
    let s = probs.shape();
    let plane = s.plane();
    if targets.len() != s.batch * plane {
        return Err(Error::shape(format!(
            "{} targets for {} positions",
            targets.len(),
            s.batch * plane
        )));
    }
    let p = probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut losses = Vec::with_capacity(targets.len());
    let floor = T::min_positive_value();
    for (pos, target) in targets.iter().enumerate() {
        let Some(t) = *target else {
            losses.push(None);
            continue;
        };
        if t >= s.channels {
            return Err(Error::invalid(format!(
                "target class {t} out of range for {} classes",
                s.channels
            )));
        }
        let (b, q) = (pos / plane, pos % plane);
        let idx = |c: usize| (b * s.channels + c) * plane + q;
        losses.push(Some(-(p[idx(t)].max(floor)).ln()));
        for c in 0..s.channels {
            grad[idx(c)] = p[idx(c)];
        }
        grad[idx(t)] = grad[idx(t)] - T::one();
    }
    Ok(CrossEntropy {
        losses,
        grad_logits: Tensor::from_vec(s, grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn probs(p1: f64) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0 - p1, p1]).unwrap()
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let ce = masked_cross_entropy(&probs(1.0), &[Some(1)]).unwrap();
        assert_eq!(ce.losses[0], Some(0.0));
    }

    #[test]
    fn coin_flip_costs_ln_two() {
        let ce = masked_cross_entropy(&probs(0.5), &[Some(0)]).unwrap();
        assert!((ce.losses[0].unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn all_ignored_gives_no_loss_and_zero_grad() {
        let p = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 0.5).unwrap();
        let ce = masked_cross_entropy(&p, &[None; 4]).unwrap();
        assert_eq!(ce.kept().count(), 0);
        assert!(ce.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_target_fails() {
        assert!(masked_cross_entropy(&probs(0.5), &[Some(2)]).is_err());
    }

    #[test]
    fn zero_probability_stays_finite() {
        let ce = masked_cross_entropy(&probs(0.0), &[Some(1)]).unwrap();
        assert!(ce.losses[0].unwrap().is_finite());
    }
}
