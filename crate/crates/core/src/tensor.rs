//! Dense row-major `f32` tensors.
//!
//! Image-like tensors use the `[batch, height, width, channels]` layout so
//! that the innermost loop of a convolution runs over channels. Reductions
//! accumulate in `f64`.

use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("shape must have at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("dimension {d} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Normal(mean, stddev) samples, reproducible for a fixed seed.
    pub fn gaussian(shape: &[usize], mean: f32, stddev: f32, seed: u64) -> Result<Self> {
        if !(stddev > 0.0) || !stddev.is_finite() || !mean.is_finite() {
            return Err(Error::Parameter(format!(
                "gaussian init needs finite mean and stddev > 0, got mean={mean} stddev={stddev}"
            )));
        }
        let n = check_shape(shape)?;
        let normal = Normal::new(mean as f64, stddev as f64)
            .map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = rng::stream(seed, &[]);
        let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Dimensions of a rank-4 `[B, H, W, C]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clip(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constructors() {
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert_eq!(Tensor::full(&[1], 3.5).unwrap().data(), &[3.5]);
        assert_eq!(Tensor::ones(&[2, 1, 1, 1]).unwrap().sum(), 2.0);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(&[3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn elementwise_and_reductions() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(b.sub(&a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        let c = Tensor::from_vec(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(c.clip(0.0, 1.0).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(Tensor::ones(&[4]).unwrap().mean(), 1.0);
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn gaussian_is_deterministic_and_rejects_bad_stddev() {
        let a = Tensor::gaussian(&[3, 3], 0.0, 0.05, 11).unwrap();
        let b = Tensor::gaussian(&[3, 3], 0.0, 0.05, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            Tensor::gaussian(&[3], 0.0, 0.0, 1),
            Err(Error::Parameter(_))
        ));
        assert!(Tensor::gaussian(&[3], 0.0, -1.0, 1).is_err());
    }

    #[test]
    fn gaussian_statistics() {
        let n = 1_000_000;
        let t = Tensor::gaussian(&[n], 0.0, 0.05, 2024).unwrap();
        let mean = t.mean();
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n as f64 - 1.0);
        assert!(mean.abs() < 0.001, "mean {mean}");
        let sd = var.sqrt();
        assert!((0.049..=0.051).contains(&sd), "stddev {sd}");
        // 5 sigma / sqrt(n) bound on the sample mean
        assert!(mean.abs() < 5.0 * 0.05 / (n as f64).sqrt());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
        (1usize..32).prop_flat_map(|n| {
            let v = || proptest::collection::vec(-1000.0f32..1000.0, n);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn add_mul_commute_and_associate((a, b, c) in vec_pair()) {
            let n = a.len();
            let ta = Tensor::from_vec(&[n], a).unwrap();
            let tb = Tensor::from_vec(&[n], b).unwrap();
            let tc = Tensor::from_vec(&[n], c).unwrap();
            prop_assert_eq!(ta.add(&tb).unwrap(), tb.add(&ta).unwrap());
            prop_assert_eq!(ta.mul(&tb).unwrap(), tb.mul(&ta).unwrap());
            let l = ta.add(&tb).unwrap().add(&tc).unwrap();
            let r = ta.add(&tb.add(&tc).unwrap()).unwrap();
            for (i, (x, y)) in l.data().iter().zip(r.data()).enumerate() {
                let mag = ta.data()[i].abs() + tb.data()[i].abs() + tc.data()[i].abs();
                prop_assert!((x - y).abs() <= 1e-6 * mag);
            }
            let l = ta.mul(&tb).unwrap().mul(&tc).unwrap();
            let r = ta.mul(&tb.mul(&tc).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3));
            }
        }

        #[test]
        fn sum_of_scale((a, _b, _c) in vec_pair(), k in -10.0f32..10.0) {
            let t = Tensor::from_vec(&[a.len()], a).unwrap();
            let lhs = t.scale(k).sum();
            let rhs = k as f64 * t.sum();
            let mag: f64 = t.data().iter().map(|v| (*v as f64 * k as f64).abs()).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-5 * mag.max(1e-12));
        }

        #[test]
        fn clip_is_idempotent((a, _b, _c) in vec_pair(), lo in -500.0f32..0.0, hi in 0.0f32..500.0) {
            let t = Tensor::from_vec(&[a.len()], a).unwrap();
            let once = t.clip(lo, hi);
            prop_assert_eq!(once.clip(lo, hi), once.clone());
            prop_assert!(once.data().iter().all(|v| (lo..=hi).contains(v)));
        }
    }
}
