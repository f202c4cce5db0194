use odseg_core::data::generate_synthetic;
use odseg_core::{LossKind, Model, ModelConfig, PixelPartition, Tensor};
use rand::{Rng, SeedableRng};

fn loss_of(model: &Model, x: &Tensor, y: &Tensor) -> f64 {
    let p = model.predict(x).unwrap();
    LossKind::Combined.loss(&PixelPartition::new(y, &p).unwrap())
}

fn setup() -> (Model, Tensor, Tensor, Vec<Vec<f32>>) {
    let ds = generate_synthetic(1, 32, 11).unwrap();
    let (x, y) = ds.batch(&[0]).unwrap();
    let model = Model::build(ModelConfig::new(32, 32, 0.125).unwrap(), 3).unwrap();
    let (p, trace) = model.forward(&x).unwrap();
    let grad = LossKind::Combined.grad(&PixelPartition::new(&y, &p).unwrap());
    let analytic = model
        .backward(trace, &grad)
        .unwrap()
        .tensors()
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    (model, x, y, analytic)
}

/// Backpropagated gradients of 20 random parameters of the first encoder
/// block and the output head against central differences. The first block's
/// gradient flows through every later layer, so this covers the whole
/// backward chain; interior parameters sit on ReLU kinks (dead units with
/// exact zeros) where central differences are not meaningful.
#[test]
fn full_model_gradient_matches_finite_differences() {
    let (mut model, x, y, analytic) = setup();
    let n_tensors = analytic.len();
    let candidates = [0, 1, 2, 3, n_tensors - 2, n_tensors - 1];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let h = 3e-4f32;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 20 {
        let ti = candidates[rng.random_range(0..candidates.len())];
        let ei = rng.random_range(0..analytic[ti].len());
        let a = analytic[ti][ei] as f64;
        let orig = model.parameters_mut()[ti].data()[ei];
        model.parameters_mut()[ti].data_mut()[ei] = orig + h;
        let up = loss_of(&model, &x, &y);
        model.parameters_mut()[ti].data_mut()[ei] = orig - h;
        let down = loss_of(&model, &x, &y);
        model.parameters_mut()[ti].data_mut()[ei] = orig;
        let n = (up - down) / (2.0 * h as f64);
        // parameters with negligible influence carry only rounding noise
        if a.abs().max(n.abs()) < 1e-4 {
            continue;
        }
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        checked += 1;
    }
    assert!(worst < 2e-2, "worst relative error {worst}");
}

/// Directional derivative along the full gradient equals its squared norm.
#[test]
fn directional_derivative_matches_gradient_norm() {
    let (mut model, x, y, analytic) = setup();
    let norm2: f64 = analytic.iter().flatten().map(|&g| g as f64 * g as f64).sum();
    // a step of length 1e-3 in parameter space
    let eps = 1e-3 / norm2.sqrt();
    let shift = |model: &mut Model, s: f64| {
        for (t, g) in model.parameters_mut().into_iter().zip(&analytic) {
            for (v, &d) in t.data_mut().iter_mut().zip(g) {
                *v += (s * d as f64) as f32;
            }
        }
    };
    shift(&mut model, eps);
    let up = loss_of(&model, &x, &y);
    shift(&mut model, -2.0 * eps);
    let down = loss_of(&model, &x, &y);
    let numeric = (up - down) / (2.0 * eps);
    let rel = (numeric - norm2).abs() / norm2;
    assert!(rel < 2e-2, "directional {numeric} vs |g|^2 {norm2} (rel {rel})");
}

#[test]
fn predictions_are_probabilities_of_input_size() {
    let model = Model::build(ModelConfig::new(64, 32, 0.0625).unwrap(), 0).unwrap();
    let x = Tensor::gaussian(&[2, 64, 32, 3], 0.5, 0.2, 1).unwrap();
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), &[2, 64, 32, 1]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(model.predict(&Tensor::zeros(&[1, 48, 32, 3]).unwrap()).is_err());
}
