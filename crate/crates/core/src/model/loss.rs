//! Pixel, discriminator and generator-adversarial losses with their gradients.
//!
//! Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
//! The gradient of the clamp is zero outside that interval.

use serde::{Deserialize, Serialize};

use crate::error::{FdnnError, Result};
use crate::tensor::Tensor;

pub const LOG_EPS: f64 = 1e-7;

/// Sign convention for the generator's adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSign {
    /// mean −log D(G(s)); falls as the discriminator is fooled.
    #[default]
    Nonsaturating,
    /// mean +log D(G(s)), minimized as written.
    Positive,
}

fn clamp(p: f64) -> (f64, bool) {
    let c = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    (c, p > LOG_EPS && p < 1.0 - LOG_EPS)
}

fn nonempty(xs: &[f64], what: &str) -> Result<f64> {
    if xs.is_empty() {
        return Err(FdnnError::domain(format!("{what} needs at least one sample")));
    }
    Ok(xs.len() as f64)
}

/// Mean squared error over every element.
pub fn pixel_loss(r_hat: &Tensor, r: &Tensor) -> Result<f64> {
    Ok(pixel_loss_grad(r_hat, r)?.0)
}

/// Pixel loss and its gradient with respect to `r_hat`.
pub fn pixel_loss_grad(r_hat: &Tensor, r: &Tensor) -> Result<(f64, Tensor)> {
    if r_hat.shape() != r.shape() {
        return Err(FdnnError::shape(format!(
            "pixel loss: prediction {:?} vs target {:?}",
            r_hat.shape(),
            r.shape()
        )));
    }
    let diff = r_hat.sub(r)?;
    let q = diff.sum_sq()? / diff.len() as f64;
    let k = 2.0 / diff.len() as f64;
    Ok((q, diff.map(|d| k * d)))
}

/// mean(log d_real) + mean(log(1 − d_fake)).
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    let (nr, nf) = (
        nonempty(d_real, "discriminator loss")?,
        nonempty(d_fake, "discriminator loss")?,
    );
    let real: f64 = d_real.iter().map(|&p| clamp(p).0.ln()).sum::<f64>() / nr;
    let fake: f64 = d_fake.iter().map(|&p| (1.0 - clamp(p).0).ln()).sum::<f64>() / nf;
    Ok(real + fake)
}

/// Gradients of [`discriminator_loss`] with respect to each real and fake output.
pub fn discriminator_loss_grads(d_real: &[f64], d_fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((real_term_grad(d_real)?, fake_term_grad(d_fake)?))
}

/// Gradient of mean(log d_real).
pub fn real_term_grad(d_real: &[f64]) -> Result<Vec<f64>> {
    let n = nonempty(d_real, "discriminator loss")?;
    Ok(d_real
        .iter()
        .map(|&p| match clamp(p) {
            (c, true) => 1.0 / (n * c),
            _ => 0.0,
        })
        .collect())
}

/// Gradient of mean(log(1 − d_fake)).
pub fn fake_term_grad(d_fake: &[f64]) -> Result<Vec<f64>> {
    let n = nonempty(d_fake, "discriminator loss")?;
    Ok(d_fake
        .iter()
        .map(|&p| match clamp(p) {
            (c, true) => -1.0 / (n * (1.0 - c)),
            _ => 0.0,
        })
        .collect())
}

pub fn generator_adv_loss(d_fake: &[f64], sign: AdvSign) -> Result<f64> {
    let n = nonempty(d_fake, "generator adversarial loss")?;
    let mean_log = d_fake.iter().map(|&p| clamp(p).0.ln()).sum::<f64>() / n;
    Ok(match sign {
        AdvSign::Nonsaturating => -mean_log,
        AdvSign::Positive => mean_log,
    })
}

pub fn generator_adv_loss_grad(d_fake: &[f64], sign: AdvSign) -> Result<Vec<f64>> {
    let n = nonempty(d_fake, "generator adversarial loss")?;
    let s = match sign {
        AdvSign::Nonsaturating => -1.0,
        AdvSign::Positive => 1.0,
    };
    Ok(d_fake
        .iter()
        .map(|&p| match clamp(p) {
            (c, true) => s / (n * c),
            _ => 0.0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pixel_examples() {
        let r = Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 17) as f64 / 17.0);
        assert_eq!(pixel_loss(&r, &r).unwrap(), 0.0);
        let mut r_hat = r.clone();
        r_hat.data_mut()[100] += 1.0;
        let q = pixel_loss(&r_hat, &r).unwrap();
        assert!((q - 1.0 / 3072.0).abs() < 1e-15);
        assert!((q - 3.2552e-4).abs() < 1e-8);
        assert!(pixel_loss(&r, &Tensor::zeros(&[1, 3, 32, 31])).is_err());
    }

    #[test]
    fn pixel_batch_is_mean_of_images() {
        let a = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64 / 48.0);
        let b = Tensor::from_fn(&[1, 3, 4, 4], |i| ((i * 7) % 48) as f64 / 48.0);
        let ta = Tensor::zeros(&[1, 3, 4, 4]);
        let tb = Tensor::full(&[1, 3, 4, 4], 0.5);
        let la = pixel_loss(&a, &ta).unwrap();
        let lb = pixel_loss(&b, &tb).unwrap();
        let cat = |x: &Tensor, y: &Tensor| Tensor::new(vec![2, 3, 4, 4], [x.data(), y.data()].concat()).unwrap();
        let both = pixel_loss(&cat(&a, &b), &cat(&ta, &tb)).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn discriminator_examples() {
        let f = discriminator_loss(&[0.5], &[0.5]).unwrap();
        assert!((f - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((f + 1.386294361).abs() < 1e-9);
        let f = discriminator_loss(&[0.9], &[0.1]).unwrap();
        assert!((f + 0.210721031).abs() < 1e-9);
        let f = discriminator_loss(&[1.0 - LOG_EPS], &[LOG_EPS]).unwrap();
        assert!(f.abs() < 1e-6 && f <= 0.0);
        // saturated inputs stay finite
        assert!(discriminator_loss(&[0.0], &[1.0]).unwrap().is_finite());
        assert!(discriminator_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn generator_examples() {
        let ns = generator_adv_loss(&[0.5], AdvSign::Nonsaturating).unwrap();
        assert!((ns - 0.693147181).abs() < 1e-9);
        let lit = generator_adv_loss(&[0.5], AdvSign::Positive).unwrap();
        assert!((lit + 0.693147181).abs() < 1e-9);
        let fooled = generator_adv_loss(&[1.0 - LOG_EPS], AdvSign::Nonsaturating).unwrap();
        assert!(fooled.abs() < 1e-6);
    }

    #[test]
    fn gradients_match_differences() {
        let h = 1e-7;
        let real = [0.3, 0.8, 0.55];
        let fake = [0.2, 0.6];
        let (gr, gf) = discriminator_loss_grads(&real, &fake).unwrap();
        for i in 0..real.len() {
            let (mut up, mut dn) = (real, real);
            up[i] += h;
            dn[i] -= h;
            let num = (discriminator_loss(&up, &fake).unwrap() - discriminator_loss(&dn, &fake).unwrap()) / (2.0 * h);
            assert!((num - gr[i]).abs() < 1e-6);
        }
        for i in 0..fake.len() {
            let (mut up, mut dn) = (fake, fake);
            up[i] += h;
            dn[i] -= h;
            let num = (discriminator_loss(&real, &up).unwrap() - discriminator_loss(&real, &dn).unwrap()) / (2.0 * h);
            assert!((num - gf[i]).abs() < 1e-6);
        }
        for sign in [AdvSign::Nonsaturating, AdvSign::Positive] {
            let g = generator_adv_loss_grad(&fake, sign).unwrap();
            for i in 0..fake.len() {
                let (mut up, mut dn) = (fake, fake);
                up[i] += h;
                dn[i] -= h;
                let num = (generator_adv_loss(&up, sign).unwrap() - generator_adv_loss(&dn, sign).unwrap()) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6);
            }
        }
        let (q, g) = pixel_loss_grad(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(q, 1.0);
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn clamped_region_has_zero_gradient() {
        let (gr, gf) = discriminator_loss_grads(&[0.0], &[1.0]).unwrap();
        assert_eq!((gr[0], gf[0]), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn losses_are_finite(r in 0.0f64..=1.0, f in 0.0f64..=1.0) {
            prop_assert!(discriminator_loss(&[r], &[f]).unwrap() <= 0.0);
            prop_assert!(generator_adv_loss(&[f], AdvSign::Nonsaturating).unwrap() >= 0.0);
            prop_assert!(generator_adv_loss(&[f], AdvSign::Positive).unwrap().is_finite());
        }
    }
}
