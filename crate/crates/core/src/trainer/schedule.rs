use candle_core::{Device, Tensor};

use crate::{Error, Result};

/// Linear beta schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "linear schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// The 1000-step range 0.00085..0.012 rescaled so `steps` steps carry a
    /// comparable total amount of noise.
    pub fn for_steps(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps as f64;
        Self::linear(steps, 0.00085 * k, 0.012 * k)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with one timestep per frame.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let f = x0.dim(0)?;
        if t.len() != f {
            return Err(Error::Shape(format!("{} timesteps for {f} frames", t.len())));
        }
        let (a, b) = self.coefficients(t, x0.dtype(), x0.device())?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }

    fn coefficients(&self, t: &[usize], dtype: candle_core::DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let a: Vec<f64> = t.iter().map(|&i| self.alpha_bar[i].sqrt()).collect();
        let b: Vec<f64> = t.iter().map(|&i| (1.0 - self.alpha_bar[i]).sqrt()).collect();
        let shape = (t.len(), 1, 1, 1);
        Ok((
            Tensor::from_vec(a, shape, device)?.to_dtype(dtype)?,
            Tensor::from_vec(b, shape, device)?.to_dtype(dtype)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        let toy = NoiseSchedule::for_steps(100).unwrap();
        assert!((toy.betas()[0] - 0.0085).abs() < 1e-15);
        assert!((toy.betas()[99] - 0.12).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn invariants(steps in 13usize..2000) {
            let s = NoiseSchedule::for_steps(steps).unwrap();
            prop_assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
            prop_assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a <= 1.0));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        }
    }
}
