//! Binary cross-entropy, the soft Jaccard distance and their sum, together
//! with gradients with respect to the predicted disc probabilities.
//!
//! A batch is scored by pooling all of its pixels into one [`PixelPartition`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Predictions are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before logs.
pub const BCE_EPSILON: f64 = 1e-7;

/// Ground-truth labels (1 = disc, 0 = background) paired with predicted disc
/// probabilities of the same shape.
#[derive(Clone, Copy, Debug)]
pub struct PixelPartition<'a> {
    labels: &'a Tensor,
    predictions: &'a Tensor,
    disc_count: usize,
}

impl<'a> PixelPartition<'a> {
    pub fn new(labels: &'a Tensor, predictions: &'a Tensor) -> Result<Self> {
        if labels.shape() != predictions.shape() {
            return Err(shape_err!(
                "labels {:?} and predictions {:?} differ in shape",
                labels.shape(),
                predictions.shape()
            ));
        }
        if labels.is_empty() {
            return Err(Error::Parameter("empty pixel partition".into()));
        }
        let mut disc_count = 0;
        for &y in labels.data() {
            if y == 1.0 {
                disc_count += 1;
            } else if y != 0.0 {
                return Err(Error::Parameter(format!("label {y} is not 0 or 1")));
            }
        }
        if let Some(p) = predictions
            .data()
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Parameter(format!("prediction {p} outside [0, 1]")));
        }
        Ok(PixelPartition {
            labels,
            predictions,
            disc_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of ground-truth disc pixels, `|Y_d|`.
    pub fn disc_count(&self) -> usize {
        self.disc_count
    }

    pub fn background_count(&self) -> usize {
        self.len() - self.disc_count
    }

    fn pairs(&self) -> impl Iterator<Item = (bool, f64)> + 'a {
        self.labels
            .data()
            .iter()
            .zip(self.predictions.data())
            .map(|(&y, &p)| (y == 1.0, p as f64))
    }

    /// (sum of predictions over disc pixels, sum over background pixels)
    fn prediction_sums(&self) -> (f64, f64) {
        self.pairs().fold((0.0, 0.0), |(d, b), (is_disc, p)| {
            if is_disc {
                (d + p, b)
            } else {
                (d, b + p)
            }
        })
    }

    fn grad_tensor(&self, f: impl Fn(bool, f64) -> f64) -> Tensor {
        let data = self.pairs().map(|(d, p)| f(d, p) as f32).collect();
        Tensor::from_vec(self.labels.shape(), data).expect("shape already validated")
    }
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

/// Mean pixel-wise binary cross-entropy.
pub fn bce_loss(part: &PixelPartition) -> f64 {
    let n = part.len() as f64;
    let total: f64 = part
        .pairs()
        .map(|(is_disc, p)| {
            let p = clamp_probability(p);
            if is_disc {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / n
}

/// Gradient of [`bce_loss`], evaluated at the clamped predictions.
pub fn bce_grad(part: &PixelPartition) -> Tensor {
    let n = part.len() as f64;
    part.grad_tensor(|is_disc, p| {
        let p = clamp_probability(p);
        if is_disc {
            -1.0 / (n * p)
        } else {
            1.0 / (n * (1.0 - p))
        }
    })
}

/// Soft Jaccard distance
/// `1 - sum_disc(p) / (|Y_d| + sum_background(p))`.
///
/// Requires at least one disc pixel; see [`jaccard_term`] for the variant
/// used during training.
pub fn jaccard_loss(part: &PixelPartition) -> Result<f64> {
    require_disc(part)?;
    Ok(jaccard_term(part))
}

/// Derivative of [`jaccard_loss`] with respect to each prediction:
/// `-1 / D` on disc pixels and `sum_disc(p) / D^2` on background pixels,
/// where `D = |Y_d| + sum_background(p)`.
pub fn jaccard_grad(part: &PixelPartition) -> Result<Tensor> {
    require_disc(part)?;
    Ok(jaccard_term_grad(part))
}

fn require_disc(part: &PixelPartition) -> Result<()> {
    if part.disc_count == 0 {
        return Err(Error::DegenerateLabel(
            "jaccard distance needs at least one disc pixel".into(),
        ));
    }
    Ok(())
}

/// Jaccard term of the training objective. Equal to [`jaccard_loss`] when
/// the labels contain disc pixels; otherwise (e.g. a shift pushed the disc
/// out of frame) it is `s / (s + 1)` with `s = sum_background(p)`, which is
/// zero for an all-zero prediction.
pub fn jaccard_term(part: &PixelPartition) -> f64 {
    let (disc_sum, bg_sum) = part.prediction_sums();
    if part.disc_count == 0 {
        log::debug!("jaccard: no disc pixels in batch, using background-only fallback");
        return bg_sum / (bg_sum + 1.0);
    }
    1.0 - disc_sum / (part.disc_count as f64 + bg_sum)
}

pub fn jaccard_term_grad(part: &PixelPartition) -> Tensor {
    let (disc_sum, bg_sum) = part.prediction_sums();
    if part.disc_count == 0 {
        let g = 1.0 / ((bg_sum + 1.0) * (bg_sum + 1.0));
        return part.grad_tensor(|_, _| g);
    }
    let denom = part.disc_count as f64 + bg_sum;
    let disc_g = -1.0 / denom;
    let bg_g = disc_sum / (denom * denom);
    part.grad_tensor(|is_disc, _| if is_disc { disc_g } else { bg_g })
}

/// `BCE + Jaccard`, the default training objective.
pub fn combined_loss(part: &PixelPartition) -> f64 {
    bce_loss(part) + jaccard_term(part)
}

pub fn combined_grad(part: &PixelPartition) -> Tensor {
    bce_grad(part)
        .add(&jaccard_term_grad(part))
        .expect("gradients share the partition shape")
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Jaccard,
    #[default]
    Combined,
}

impl LossKind {
    pub fn loss(self, part: &PixelPartition) -> f64 {
        match self {
            LossKind::Bce => bce_loss(part),
            LossKind::Jaccard => jaccard_term(part),
            LossKind::Combined => combined_loss(part),
        }
    }

    pub fn grad(self, part: &PixelPartition) -> Tensor {
        match self {
            LossKind::Bce => bce_grad(part),
            LossKind::Jaccard => jaccard_term_grad(part),
            LossKind::Combined => combined_grad(part),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Jaccard => "jaccard",
            LossKind::Combined => "combined",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "jaccard" => Ok(LossKind::Jaccard),
            "combined" | "bce+jaccard" => Ok(LossKind::Combined),
            other => Err(Error::Parameter(format!("unknown loss '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_values() {
        let y = t(&[1.0, 0.0]);
        let p = t(&[1.0 - 1e-7, 1e-7]);
        let part = PixelPartition::new(&y, &p).unwrap();
        assert!(bce_loss(&part) < 2e-7);
        let p = t(&[0.5, 0.5]);
        let part = PixelPartition::new(&y, &p).unwrap();
        assert!((bce_loss(&part) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jaccard_values() {
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let p = t(&[0.8, 0.6, 0.1, 0.3]);
        let part = PixelPartition::new(&y, &p).unwrap();
        assert!((jaccard_loss(&part).unwrap() - (1.0 - 1.4 / 2.4)).abs() < 1e-7);
        assert!((jaccard_loss(&part).unwrap() - 0.41667).abs() < 1e-5);

        let perfect = t(&[1.0, 1.0, 0.0, 0.0]);
        let part = PixelPartition::new(&y, &perfect).unwrap();
        assert_eq!(jaccard_loss(&part).unwrap(), 0.0);
        let zero = t(&[0.0; 4]);
        let part = PixelPartition::new(&y, &zero).unwrap();
        assert_eq!(jaccard_loss(&part).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_grad_structure() {
        let y = t(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = t(&[0.2, 0.7, 0.9, 0.1, 0.4]);
        let part = PixelPartition::new(&y, &p).unwrap();
        let g = jaccard_grad(&part).unwrap();
        assert_eq!(g.data()[0], g.data()[2]);
        assert!(g.data()[0] < 0.0);
        for i in [1, 3, 4] {
            assert!(g.data()[i] >= 0.0);
        }
        let denom = 2.0 + 1.2;
        assert!((g.data()[0] as f64 + 1.0 / denom).abs() < 1e-7);
        assert!((g.data()[1] as f64 - 1.1 / (denom * denom)).abs() < 1e-7);
    }

    #[test]
    fn degenerate_labels() {
        let y = t(&[0.0, 0.0]);
        let p = t(&[0.0, 0.0]);
        let part = PixelPartition::new(&y, &p).unwrap();
        assert_eq!(jaccard_term(&part), 0.0);
        assert!(matches!(jaccard_loss(&part), Err(Error::DegenerateLabel(_))));
        assert!(matches!(jaccard_grad(&part), Err(Error::DegenerateLabel(_))));
        let p = t(&[0.5, 0.5]);
        let part = PixelPartition::new(&y, &p).unwrap();
        assert_eq!(jaccard_term(&part), 0.5);
        assert!(jaccard_term_grad(&part).data().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn combined_is_sum() {
        let y = t(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = t(&[0.2, 0.7, 0.9, 0.1, 0.4]);
        let part = PixelPartition::new(&y, &p).unwrap();
        let sum = bce_grad(&part).add(&jaccard_grad(&part).unwrap()).unwrap();
        assert_eq!(combined_grad(&part), sum);
        let c = combined_loss(&part);
        assert!(c >= bce_loss(&part).max(jaccard_loss(&part).unwrap()));
        let perfect = t(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let part = PixelPartition::new(&y, &perfect).unwrap();
        assert!(combined_loss(&part) <= 1e-6);
    }

    #[test]
    fn partition_validation() {
        let y = t(&[1.0, 0.5]);
        let p = t(&[0.1, 0.2]);
        assert!(PixelPartition::new(&y, &p).is_err());
        let y = t(&[1.0, 0.0]);
        assert!(PixelPartition::new(&y, &t(&[0.1, 1.5])).is_err());
        assert!(PixelPartition::new(&y, &t(&[0.1])).is_err());
    }

    #[test]
    fn loss_kind_parse() {
        assert_eq!("BCE".parse::<LossKind>().unwrap(), LossKind::Bce);
        assert_eq!("combined".parse::<LossKind>().unwrap(), LossKind::Combined);
        assert!("dice".parse::<LossKind>().is_err());
    }
}
