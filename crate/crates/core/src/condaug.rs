//! Conditioning augmentation: a diagonal Gaussian over the condition
//! embedding, sampled by reparameterisation.

use numgrad::{diag_gaussian_kl, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctxembed::gaussian_kl;
use crate::error::{Error, Result};

/// Parameter slots, in order: `w_mu`, `b_mu`, `w_logvar`, `b_logvar`.
pub const AUGMENTOR_SLOTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentor {
    width: usize,
}

impl Augmentor {
    pub fn new(width: usize) -> Self {
        Self { width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Appends the augmentor's parameters to `params`, returning the first slot.
    pub fn init_params(&self, params: &mut ParamSet, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = params.push_glorot("augment.w_mu", self.width, self.width, &mut rng);
        params.push_zeros("augment.b_mu", &[1, self.width]);
        params.push_glorot("augment.w_logvar", self.width, self.width, &mut rng);
        params.push_zeros("augment.b_logvar", &[1, self.width]);
        first
    }

    /// `(mu(z), logvar(z))` for a batch of rows `z`.
    pub fn forward(&self, tape: &mut Tape, slots: &[Var], z: Var) -> (Var, Var) {
        let mu = tape.linear(z, slots[0], slots[1]);
        let logvar = tape.linear(z, slots[2], slots[3]);
        (mu, logvar)
    }

    /// `c = mu(z) + sigma(z) * eps` with `sigma = exp(logvar / 2)`.
    pub fn sample(&self, tape: &mut Tape, slots: &[Var], z: Var, eps: Var) -> (Var, Var, Var) {
        let (mu, logvar) = self.forward(tape, slots, z);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = tape.mul(sigma, eps);
        let c = tape.add(mu, noise);
        (c, mu, logvar)
    }

    /// Sum over rows of `KL[N(mu, sigma^2) || N(0, 1)]`.
    pub fn kl_term(&self, tape: &mut Tape, mu: Var, logvar: Var) -> Var {
        gaussian_kl(tape, mu, logvar)
    }

    fn eval(&self, params: &[Tensor], z: &[f64]) -> Result<(Tensor, Tensor)> {
        if z.len() != self.width {
            return Err(Error::invalid(
                "condition",
                format!("width {} vs augmentor {}", z.len(), self.width),
            ));
        }
        let zt = Tensor::row(z);
        let lin = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
            Ok(zt.matmul(w)?.zip_map(b, "bias", |x, y| x + y)?)
        };
        let mu = lin(&params[0], &params[1])?;
        let sigma = lin(&params[2], &params[3])?.map(|lv| (0.5 * lv).exp());
        Ok((mu, sigma))
    }

    /// `(mu(z), sigma(z))` from the four parameter tensors.
    pub fn distribution(&self, params: &[Tensor], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, sigma) = self.eval(params, z)?;
        Ok((mu.into_data(), sigma.into_data()))
    }

    pub fn augment(&self, params: &[Tensor], z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.width {
            return Err(Error::invalid("epsilon", format!("width {}", eps.len())));
        }
        let (mu, sigma) = self.eval(params, z)?;
        Ok(mu
            .data()
            .iter()
            .zip(sigma.data())
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn kl_penalty(&self, params: &[Tensor], z: &[f64]) -> Result<f64> {
        let (mu, sigma) = self.eval(params, z)?;
        Ok(diag_gaussian_kl(&mu, &sigma)?)
    }
}

/// Clones the augmentor tensors out of a parameter set starting at `first`.
pub fn augmentor_tensors(params: &ParamSet, first: usize) -> Vec<Tensor> {
    (first..first + AUGMENTOR_SLOTS)
        .map(|i| params.get(i).value.clone())
        .collect()
}
