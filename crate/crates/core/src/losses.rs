//! Scalar objectives: similarity, KL, adversarial, the stage-1 registration
//! objective and the stage-2 denoising objective.
//!
//! These are pure functions over plain tensors; the training loops use the
//! fused tape ops, and the gradient suites use these as the forward oracle
//! for finite differencing. All reductions are means so the weights stay
//! transferable across resolutions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    displacement_gradient_penalty, displacement_magnitude, DeformationField, FieldError, Volume,
};
use crate::nets::Latent;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Weights of the stage-1 objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage1Weights {
    pub alpha: f64,
    pub beta: f64,
    pub kl_weight: f64,
    pub adv_weight: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { alpha: 5.0, beta: 1.0, kl_weight: 1e-7, adv_weight: 0.005 }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.kl_weight < 0.0 || self.adv_weight < 0.0 {
            return Err(LossError::ShapeMismatch("stage-1 weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_similarity<T: Scalar>(pred: &Volume<T>, target: &Volume<T>) -> Result<T, LossError> {
    if pred.tensor().shape() != target.tensor().shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.tensor().shape(),
            target.tensor().shape()
        )));
    }
    let n = pred.tensor().numel();
    let mut acc = T::zero();
    for (&a, &b) in pred.tensor().data().iter().zip(target.tensor().data()) {
        acc += (a - b).abs();
    }
    Ok(acc / T::of_usize(n))
}

/// Mean over elements of `0.5 (mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_to_standard_normal<T: Scalar>(latent: &Latent<T>) -> T {
    let n = latent.mu().numel();
    let half = T::of_f64(0.5);
    let mut acc = T::zero();
    for (&m, &lv) in latent.mu().data().iter().zip(latent.logvar().data()) {
        acc += half * (m * m + lv.exp() - lv - T::one());
    }
    acc / T::of_usize(n)
}

/// Hinge adversarial pair: `disc = mean(relu(1-real)) + mean(relu(1+fake))`,
/// `gen = -mean(fake)`.
pub fn adversarial_losses<T: Scalar>(disc_real: &Tensor<T>, disc_fake: &Tensor<T>) -> (T, T) {
    let one = T::one();
    let mut dr = T::zero();
    for &v in disc_real.data() {
        dr += (one - v).max(T::zero());
    }
    dr = dr / T::of_usize(disc_real.numel());
    let mut df = T::zero();
    let mut gf = T::zero();
    for &v in disc_fake.data() {
        df += (one + v).max(T::zero());
        gf += v;
    }
    df = df / T::of_usize(disc_fake.numel());
    let gen_loss = -gf / T::of_usize(disc_fake.numel());
    (gen_loss, dr + df)
}

/// Mean squared error between true and predicted noise.
pub fn denoising_objective<T: Scalar>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<T, LossError> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            eps_true.shape(),
            eps_pred.shape()
        )));
    }
    let n = eps_true.numel();
    let mut acc = T::zero();
    for (&a, &b) in eps_true.data().iter().zip(eps_pred.data()) {
        acc += (a - b) * (a - b);
    }
    Ok(acc / T::of_usize(n))
}

/// Forward outputs entering the stage-1 objective. `field` is absent for the
/// plain reconstruction variants; `disc_fake` is absent when the adversarial
/// term is disabled.
pub struct Stage1Outputs<'a, T: Scalar> {
    pub reconstruction: &'a Volume<T>,
    pub field: Option<&'a DeformationField<T>>,
    pub latent: &'a Latent<T>,
    pub disc_fake: Option<&'a Tensor<T>>,
}

/// Weighted components of the stage-1 objective; they sum to the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Components {
    pub similarity: f64,
    pub adversarial: f64,
    pub magnitude: f64,
    pub smoothness: f64,
    pub kl: f64,
}

impl Stage1Components {
    pub fn total(&self) -> f64 {
        self.similarity + self.adversarial + self.magnitude + self.smoothness + self.kl
    }
}

/// Stage-1 registration objective:
/// `l1 + adv_weight*gen + alpha*|u| + beta*|grad u| + kl_weight*KL`.
pub fn stage1_objective<T: Scalar>(
    target: &Volume<T>,
    outputs: &Stage1Outputs<'_, T>,
    weights: &Stage1Weights,
) -> Result<(T, Stage1Components), LossError> {
    weights.validate()?;
    let sim = l1_similarity(outputs.reconstruction, target)?;
    let (mag, smooth) = match outputs.field {
        Some(field) => (
            displacement_magnitude(field),
            displacement_gradient_penalty(field)?,
        ),
        None => (T::zero(), T::zero()),
    };
    let kl = kl_to_standard_normal(outputs.latent);
    let gen = match outputs.disc_fake {
        Some(fake) if weights.adv_weight > 0.0 => {
            let mut acc = T::zero();
            for &v in fake.data() {
                acc += v;
            }
            -acc / T::of_usize(fake.numel())
        }
        _ => T::zero(),
    };
    let components = Stage1Components {
        similarity: sim.as_f64(),
        adversarial: weights.adv_weight * gen.as_f64(),
        magnitude: weights.alpha * mag.as_f64(),
        smoothness: weights.beta * smooth.as_f64(),
        kl: weights.kl_weight * kl.as_f64(),
    };
    let total = sim
        + T::of_f64(weights.adv_weight) * gen
        + T::of_f64(weights.alpha) * mag
        + T::of_f64(weights.beta) * smooth
        + T::of_f64(weights.kl_weight) * kl;
    Ok((total, components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_standard_normal, substream};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = substream(seed, "losses.test", 0);
        let mut data = vec![0.0; shape.iter().product()];
        fill_standard_normal(&mut rng, &mut data);
        Tensor::new(shape, data)
    }

    fn vol(t: Tensor<f64>) -> Volume<f64> {
        Volume::new(t).unwrap()
    }

    #[test]
    fn l1_identical_zero_and_offset() {
        let a = vol(randn(&[1, 4, 4], 1));
        assert_eq!(l1_similarity(&a, &a).unwrap(), 0.0);
        let b = vol(a.tensor().map(|v| v + 0.3));
        assert!((l1_similarity(&a, &b).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let a = vol(randn(&[2, 5, 5], 2));
        let b = vol(randn(&[2, 5, 5], 3));
        let oracle: f64 = a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 50.0;
        assert!((l1_similarity(&a, &b).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn l1_shape_mismatch_errors() {
        let a = vol(randn(&[1, 4, 4], 4));
        let b = vol(randn(&[1, 5, 5], 5));
        assert!(l1_similarity(&a, &b).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let zero = Latent::<f64>::new(Tensor::zeros(&[8, 2, 2]), Tensor::zeros(&[8, 2, 2]));
        assert_eq!(kl_to_standard_normal(&zero), 0.0);
        let ones = Latent::<f64>::new(Tensor::full(&[8, 2, 2], 1.0), Tensor::zeros(&[8, 2, 2]));
        assert!((kl_to_standard_normal(&ones) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_closed_form_oracle() {
        let mu = randn(&[4, 3, 3], 6);
        let lv = randn(&[4, 3, 3], 7);
        let lat = Latent::new(mu.clone(), lv.clone());
        let oracle: f64 = mu
            .data()
            .iter()
            .zip(lv.data())
            .map(|(m, l)| 0.5 * (m * m + l.exp() - l - 1.0))
            .sum::<f64>()
            / 36.0;
        assert!((kl_to_standard_normal(&lat) - oracle).abs() < 1e-6);
        assert!(kl_to_standard_normal(&lat) >= 0.0);
    }

    #[test]
    fn hinge_saturation() {
        let real = Tensor::full(&[6], 1.5);
        let fake = Tensor::full(&[6], -2.0);
        let (_g, d) = adversarial_losses(&real, &fake);
        assert_eq!(d, 0.0);
        let zero_fake = Tensor::zeros(&[6]);
        let (g, _d) = adversarial_losses(&real, &zero_fake);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn hinge_matches_formula_oracle() {
        let real = randn(&[20], 8);
        let fake = randn(&[20], 9);
        let (g, d) = adversarial_losses(&real, &fake);
        let od: f64 = real.data().iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / 20.0
            + fake.data().iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / 20.0;
        let og: f64 = -fake.data().iter().sum::<f64>() / 20.0;
        assert!((d - od).abs() < 1e-7);
        assert!((g - og).abs() < 1e-7);
    }

    #[test]
    fn denoising_zero_and_oracle() {
        let e = randn(&[4, 8, 8], 10);
        assert_eq!(denoising_objective(&e, &e).unwrap(), 0.0);
        let p = randn(&[4, 8, 8], 11);
        let oracle: f64 = e
            .data()
            .iter()
            .zip(p.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 256.0;
        assert!((denoising_objective(&e, &p).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn denoising_unit_variance_expectation() {
        let e = randn(&[200_000], 12);
        let z = Tensor::zeros(&[200_000]);
        let loss = denoising_objective(&e, &z).unwrap();
        // E[eps^2] = 1, sem = sqrt(2/n)
        assert!((loss - 1.0).abs() < 3.0 * (2.0f64 / 200_000.0).sqrt());
    }

    #[test]
    fn stage1_global_minimum_is_zero() {
        let x = vol(randn(&[1, 6, 6], 13));
        let field = DeformationField::zeros(&[6, 6]);
        let latent = Latent::new(Tensor::zeros(&[8]), Tensor::zeros(&[8]));
        let outputs = Stage1Outputs {
            reconstruction: &x,
            field: Some(&field),
            latent: &latent,
            disc_fake: None,
        };
        let weights = Stage1Weights { adv_weight: 0.0, ..Default::default() };
        let (total, comps) = stage1_objective(&x, &outputs, &weights).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(comps.total(), 0.0);
    }

    #[test]
    fn stage1_components_recombine_and_match_piecewise_oracle() {
        let x = vol(randn(&[1, 6, 6], 14));
        let recon = vol(randn(&[1, 6, 6], 15));
        let fdata = randn(&[2, 6, 6], 16);
        let field = DeformationField::new(fdata).unwrap();
        let latent = Latent::new(randn(&[8], 17), randn(&[8], 18));
        let fake = randn(&[9], 19);
        let outputs = Stage1Outputs {
            reconstruction: &recon,
            field: Some(&field),
            latent: &latent,
            disc_fake: Some(&fake),
        };
        let weights = Stage1Weights { alpha: 5.0, beta: 1.0, kl_weight: 1e-7, adv_weight: 0.005 };
        let (total, comps) = stage1_objective(&x, &outputs, &weights).unwrap();
        assert!((comps.total() - total).abs() < 1e-7);

        // independent recomposition from the component operations
        let expect = l1_similarity(&recon, &x).unwrap()
            + weights.adv_weight * adversarial_losses(&fake, &fake).0
            + weights.alpha * displacement_magnitude(&field)
            + weights.beta * displacement_gradient_penalty(&field).unwrap()
            + weights.kl_weight * kl_to_standard_normal(&latent);
        assert!((total - expect).abs() < 1e-6);
    }

    #[test]
    fn doubling_alpha_doubles_only_magnitude() {
        let x = vol(randn(&[1, 6, 6], 20));
        let recon = vol(randn(&[1, 6, 6], 21));
        let field = DeformationField::new(randn(&[2, 6, 6], 22)).unwrap();
        let latent = Latent::new(randn(&[8], 23), randn(&[8], 24));
        let outputs =
            Stage1Outputs { reconstruction: &recon, field: Some(&field), latent: &latent, disc_fake: None };
        let w1 = Stage1Weights { adv_weight: 0.0, ..Default::default() };
        let w2 = Stage1Weights { alpha: 2.0 * w1.alpha, ..w1 };
        let (_t1, c1) = stage1_objective(&x, &outputs, &w1).unwrap();
        let (_t2, c2) = stage1_objective(&x, &outputs, &w2).unwrap();
        assert!((c2.magnitude - 2.0 * c1.magnitude).abs() < 1e-12);
        assert_eq!(c1.similarity, c2.similarity);
        assert_eq!(c1.smoothness, c2.smoothness);
        assert_eq!(c1.kl, c2.kl);
    }

    #[test]
    fn stage1_nonnegative_without_adversarial() {
        for seed in 0..5 {
            let x = vol(randn(&[1, 5, 5], 100 + seed));
            let recon = vol(randn(&[1, 5, 5], 200 + seed));
            let field = DeformationField::new(randn(&[2, 5, 5], 300 + seed)).unwrap();
            let latent = Latent::new(randn(&[4], 400 + seed), randn(&[4], 500 + seed));
            let outputs = Stage1Outputs {
                reconstruction: &recon,
                field: Some(&field),
                latent: &latent,
                disc_fake: None,
            };
            let weights = Stage1Weights { adv_weight: 0.0, ..Default::default() };
            let (total, _) = stage1_objective(&x, &outputs, &weights).unwrap();
            assert!(total >= 0.0);
        }
    }
}
