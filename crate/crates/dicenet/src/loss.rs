//! Dice overlap and the class-weighted (generalized) Dice loss.

use crate::error::{shape_err, NetError, Result};
use crate::tensor::{Real, Tensor5};

/// Dice similarity `2 Σ p q / (Σ p² + Σ q²)`. Two empty inputs agree
/// perfectly and score 1.
pub fn dice_coefficient<T: Real>(p: &Tensor5<T>, q: &Tensor5<T>) -> Result<f64> {
    if p.shape() != q.shape() {
        return shape_err("dice_coefficient", format!("{} vs {}", p.shape(), q.shape()));
    }
    Ok(dice_of_slices(p.data(), q.data()))
}

pub(crate) fn dice_of_slices<T: Real>(p: &[T], q: &[T]) -> f64 {
    let (mut pq, mut pp, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a.as_f64(), b.as_f64());
        pq += a * b;
        pp += a * a;
        qq += b * b;
    }
    if pp + qq == 0.0 {
        1.0
    } else {
        2.0 * pq / (pp + qq)
    }
}

/// Per-class weights `w_l` of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceWeights(pub Vec<f64>);

impl DiceWeights {
    /// `w_l = 1 / (Σ_i q_li)²` over the whole batch; a class absent from the
    /// batch gets weight 0 and drops out of both sums.
    pub fn from_truth<T: Real>(q: &Tensor5<T>) -> Self {
        Self(
            class_sums(q)
                .into_iter()
                .map(|s| if s > 0.0 { 1.0 / (s * s) } else { 0.0 })
                .collect(),
        )
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

fn class_sums<T: Real>(q: &Tensor5<T>) -> Vec<f64> {
    let s = q.shape();
    let mut sums = vec![0.0; s.channels];
    for b in 0..s.batch {
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += q.channel(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    sums
}

/// Which loss weighting the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceLossKind {
    WeightedDice,
    UnweightedDice,
}

/// `1 − 2 Σ_l w_l Σ_i p_li q_li / Σ_l w_l Σ_i (p_li² + q_li²)` and its
/// gradient with respect to `p`. Channels are classes; with more than one
/// channel, channel 0 is background.
pub fn dice_loss_with_weights<T: Real>(p: &Tensor5<T>, q: &Tensor5<T>, weights: &DiceWeights) -> Result<(f64, Vec<T>)> {
    let s = p.shape();
    if s != q.shape() {
        return shape_err("weighted_dice_loss", format!("{} vs {}", s, q.shape()));
    }
    if weights.classes() != s.channels {
        return shape_err(
            "weighted_dice_loss",
            format!("{} weights for {} classes", weights.classes(), s.channels),
        );
    }
    let sums = class_sums(q);
    let first_fg = usize::from(s.channels > 1);
    if sums[first_fg..].iter().all(|&v| v == 0.0) {
        return Err(NetError::EmptyTruth);
    }

    let (mut overlap, mut denom) = (0.0f64, 0.0f64);
    for b in 0..s.batch {
        for (c, &w) in weights.0.iter().enumerate() {
            if w == 0.0 || sums[c] == 0.0 {
                continue;
            }
            let (mut pq, mut sq) = (0.0, 0.0);
            for (&a, &t) in p.channel(b, c).iter().zip(q.channel(b, c)) {
                let (a, t) = (a.as_f64(), t.as_f64());
                pq += a * t;
                sq += a * a + t * t;
            }
            overlap += w * pq;
            denom += w * sq;
        }
    }
    let loss = 1.0 - 2.0 * overlap / denom;

    let n = s.spatial();
    let mut grad = vec![T::zero(); s.len()];
    for b in 0..s.batch {
        for (c, &w) in weights.0.iter().enumerate() {
            if w == 0.0 || sums[c] == 0.0 {
                continue;
            }
            let start = (b * s.channels + c) * n;
            let scale = -2.0 * w / (denom * denom);
            for i in start..start + n {
                let (a, t) = (p.data()[i].as_f64(), q.data()[i].as_f64());
                grad[i] = T::of(scale * (t * denom - 2.0 * overlap * a));
            }
        }
    }
    Ok((loss, grad))
}

/// [`dice_loss_with_weights`] with weights recomputed from `q`.
pub fn weighted_dice_loss<T: Real>(p: &Tensor5<T>, q: &Tensor5<T>) -> Result<(f64, Vec<T>)> {
    dice_loss_with_weights(p, q, &DiceWeights::from_truth(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;

    fn vec1(v: &[f64]) -> Tensor5<f64> {
        Tensor5::from_vec(Shape5::new(1, 1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn dice_hand_values() {
        let p = vec1(&[1.0, 1.0, 0.0, 0.0]);
        let q = vec1(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(dice_coefficient(&p, &q).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&p, &p).unwrap(), 1.0);
        let r = vec1(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice_coefficient(&p, &r).unwrap(), 0.0);
        let z = vec1(&[0.0; 4]);
        assert_eq!(dice_coefficient(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn eq3_weights_for_three_kidney_voxels() {
        let n = 40;
        let s = Shape5::new(1, 2, 1, 1, n);
        let mut q = vec![0.0f64; 2 * n];
        for i in 0..n {
            let fg = i < 3;
            q[i] = if fg { 0.0 } else { 1.0 };
            q[n + i] = if fg { 1.0 } else { 0.0 };
        }
        let q = Tensor5::from_vec(s, q).unwrap();
        let w = DiceWeights::from_truth(&q);
        assert_eq!(w.0[1], 1.0 / 9.0);
        assert_eq!(w.0[0], 1.0 / ((n - 3) * (n - 3)) as f64);
        let (loss, grad) = weighted_dice_loss(&q, &q).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let s = Shape5::new(1, 2, 1, 1, 3);
        let q = Tensor5::from_vec(s, vec![1.0f32, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(weighted_dice_loss(&q, &q), Err(NetError::EmptyTruth)));
    }

    #[test]
    fn single_class_uniform_is_one_minus_dice() {
        let p = vec1(&[0.9, 0.2, 0.6, 0.1, 0.0]);
        let q = vec1(&[1.0, 0.0, 1.0, 1.0, 0.0]);
        let (loss, _) = dice_loss_with_weights(&p, &q, &DiceWeights::uniform(1)).unwrap();
        let d = dice_coefficient(&p, &q).unwrap();
        assert!((loss - (1.0 - d)).abs() < 1e-14);
    }
}
