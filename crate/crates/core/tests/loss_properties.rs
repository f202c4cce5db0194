use odseg_core::loss::{bce_loss, combined_loss, jaccard_loss, jaccard_term};
use odseg_core::{LossKind, PixelPartition, Tensor};
use proptest::prelude::*;

fn pair(labels: Vec<bool>, probs: Vec<f32>) -> (Tensor, Tensor) {
    let n = labels.len();
    let y = Tensor::from_vec(&[1, 1, n, 1], labels.iter().map(|&b| b as u8 as f32).collect()).unwrap();
    let p = Tensor::from_vec(&[1, 1, n, 1], probs[..n].to_vec()).unwrap();
    (y, p)
}

proptest! {
    #[test]
    fn losses_are_bounded_and_combined_is_their_sum(
        labels in prop::collection::vec(any::<bool>(), 1..64),
        probs in prop::collection::vec(0.0f32..=1.0, 64),
    ) {
        let (y, p) = pair(labels, probs);
        let part = PixelPartition::new(&y, &p).unwrap();
        let bce = bce_loss(&part);
        let jac = jaccard_term(&part);
        prop_assert!(bce >= 0.0 && bce.is_finite());
        prop_assert!((0.0..=1.0).contains(&jac));
        prop_assert!((combined_loss(&part) - (bce + jac)).abs() < 1e-12);
        prop_assert_eq!(LossKind::Combined.loss(&part), combined_loss(&part));
        if part.disc_count() > 0 {
            prop_assert_eq!(jaccard_loss(&part).unwrap(), jac);
        } else {
            prop_assert!(jaccard_loss(&part).is_err());
        }
    }

    #[test]
    fn perfect_predictions_minimise_both_losses(labels in prop::collection::vec(any::<bool>(), 1..64)) {
        prop_assume!(labels.iter().any(|&b| b));
        let probs: Vec<f32> = labels.iter().map(|&b| b as u8 as f32).collect();
        let (y, p) = pair(labels, probs);
        let part = PixelPartition::new(&y, &p).unwrap();
        prop_assert!(bce_loss(&part) < 1e-6);
        prop_assert!(jaccard_term(&part) < 1e-6);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let y = Tensor::zeros(&[1, 2, 2, 1]).unwrap();
    let p = Tensor::zeros(&[1, 2, 3, 1]).unwrap();
    assert!(PixelPartition::new(&y, &p).is_err());
}
