//! Sampled training objective and its exact gradients.
//!
//! For one `(x, label)` pair and one noise draw the model produces an
//! evidence lower bound
//!
//! ```text
//! elbo = ln p(x | y, z, m) + ln p(z) + ln p(y) - ln q(z | x, y, m) - kl_m
//! ```
//!
//! with `z` drawn by reparameterization from the context encoder and the
//! perturbation term depending on the training mode: under
//! [`TrainingMode::FullElbo`], `m` is a reparameterized draw and `kl_m` is
//! the closed-form KL from its encoder to the standard-normal prior; under
//! [`TrainingMode::ZeroPerturbation`], `m` is zero and `kl_m` is dropped
//! from the bound but kept in the loss so the perturbation encoder still
//! learns to match its prior.
//!
//! The minimized loss is therefore the same expression in both modes:
//!
//! ```text
//! loss = -(ln p(x|y,z,m) + ln p(z) + ln p(y) - ln q(z|..)) + KL(q_m, prior)
//! ```
//!
//! Gradients are derived by hand: pathwise terms flow through the samples,
//! the closed-form KL contributes directly to the perturbation encoder's
//! heads, and log-variance heads are gated wherever the clamp saturated.
//! The whole pass is checked against finite differences in the tests.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::frame::ClassLabel;
use crate::nn::gaussian::{
    clamp_log_var, diag_log_pdf, kl_to_std_normal, sample_diag, std_normal_log_pdf,
};
use crate::nn::{NetGrads, Tape};

use super::{concat2, concat3, one_hot, split_heads, GenClassifier, ModelError, TrainingMode};

/// Standard-normal driving noise for one objective evaluation. Holding it
/// fixed makes the sampled objective a deterministic, differentiable
/// function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub eps_m: Vec<f64>,
    pub eps_z: Vec<f64>,
}

impl ElboNoise {
    /// Draws fresh noise: `m_dim` values for the perturbation, then `z_dim`
    /// for the context. The draw order is part of the crate's determinism
    /// contract.
    pub fn standard(m_dim: usize, z_dim: usize, rng: &mut impl Rng) -> ElboNoise {
        let eps_m = (0..m_dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps_z = (0..z_dim).map(|_| rng.sample(StandardNormal)).collect();
        ElboNoise { eps_m, eps_z }
    }
}

/// Additive pieces of one sampled bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `ln p(x | y, z, m)` at the drawn latents.
    pub log_lik: f64,
    /// `ln p(z)` at the drawn context.
    pub log_prior_z: f64,
    /// `ln p(y)` under the class prior.
    pub log_prior_y: f64,
    /// `ln q(z | x, y, m)` at the drawn context.
    pub log_q_z: f64,
    /// Closed-form `KL(q(m|x,y), prior)`; zero under
    /// [`TrainingMode::ZeroPerturbation`], where the bound ignores it.
    pub kl_m: f64,
    /// `log_lik + log_prior_z + log_prior_y - log_q_z - kl_m`.
    pub elbo: f64,
}

/// Everything backward needs from a forward evaluation.
pub(crate) struct ElboState {
    tape_m: Tape,
    tape_z: Tape,
    tape_dec: Tape,
    mu_m: Vec<f64>,
    lv_m: Vec<f64>,
    mask_m: Vec<bool>,
    eps_m: Vec<f64>,
    mu_z: Vec<f64>,
    lv_z: Vec<f64>,
    mask_z: Vec<bool>,
    eps_z: Vec<f64>,
    z: Vec<f64>,
    x_hat: Vec<f64>,
    /// Closed-form perturbation KL, kept regardless of mode because the
    /// loss always includes it.
    kl_m_full: f64,
}

/// Gradients of the loss for all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub enc_m: NetGrads,
    pub enc_z: NetGrads,
    pub dec: NetGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &GenClassifier) -> ModelGrads {
        ModelGrads {
            enc_m: NetGrads::zeros_like(&model.enc_m),
            enc_z: NetGrads::zeros_like(&model.enc_z),
            dec: NetGrads::zeros_like(&model.dec),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.enc_m.add_assign(&other.enc_m);
        self.enc_z.add_assign(&other.enc_z);
        self.dec.add_assign(&other.dec);
    }

    pub fn scale(&mut self, factor: f64) {
        self.enc_m.scale(factor);
        self.enc_z.scale(factor);
        self.dec.scale(factor);
    }
}

/// `ln N(x; x_hat, e^{log_var} I)` summed over dimensions, the decoder's
/// fixed-variance likelihood.
pub(crate) fn recon_log_pdf(x: &[f64], x_hat: &[f64], log_var: f64) -> f64 {
    debug_assert_eq!(x.len(), x_hat.len());
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let inv_var = (-log_var).exp();
    let mut acc = 0.0;
    for (xi, hi) in x.iter().zip(x_hat) {
        let diff = xi - hi;
        acc += -0.5 * (ln_2pi + log_var + diff * diff * inv_var);
    }
    acc
}

impl GenClassifier {
    fn check_noise(&self, noise: &ElboNoise) -> Result<(), ModelError> {
        if noise.eps_m.len() != self.config.m_dim {
            return Err(ModelError::NoiseDim {
                what: "perturbation",
                expected: self.config.m_dim,
                got: noise.eps_m.len(),
            });
        }
        if noise.eps_z.len() != self.config.z_dim {
            return Err(ModelError::NoiseDim {
                what: "context",
                expected: self.config.z_dim,
                got: noise.eps_z.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn elbo_forward(
        &self,
        x: &[f64],
        label: ClassLabel,
        noise: &ElboNoise,
    ) -> Result<(ElboTerms, ElboState), ModelError> {
        self.check_x(x)?;
        self.check_noise(noise)?;
        let cfg = &self.config;
        let y = one_hot(label);

        let (head_m, tape_m) = self.enc_m.forward(&concat2(x, &y))?;
        let (mu_m, mut lv_m) = split_heads(head_m);
        let mask_m = clamp_log_var(&mut lv_m);
        let m = match cfg.mode {
            TrainingMode::ZeroPerturbation => vec![0.0; cfg.m_dim],
            TrainingMode::FullElbo => sample_diag(&mu_m, &lv_m, &noise.eps_m),
        };

        let (head_z, tape_z) = self.enc_z.forward(&concat3(x, &y, &m))?;
        let (mu_z, mut lv_z) = split_heads(head_z);
        let mask_z = clamp_log_var(&mut lv_z);
        let z = sample_diag(&mu_z, &lv_z, &noise.eps_z);

        let (x_hat, tape_dec) = self.dec.forward(&concat3(&y, &z, &m))?;

        let log_lik = recon_log_pdf(x, &x_hat, cfg.dec_log_var);
        let log_prior_z = std_normal_log_pdf(&z);
        let log_prior_y = self.prior_y[label.index()].ln();
        let log_q_z = diag_log_pdf(&z, &mu_z, &lv_z);
        let kl_m_full = kl_to_std_normal(&mu_m, &lv_m);
        let kl_m = match cfg.mode {
            TrainingMode::ZeroPerturbation => 0.0,
            TrainingMode::FullElbo => kl_m_full,
        };

        let terms = ElboTerms {
            log_lik,
            log_prior_z,
            log_prior_y,
            log_q_z,
            kl_m,
            elbo: log_lik + log_prior_z + log_prior_y - log_q_z - kl_m,
        };
        let state = ElboState {
            tape_m,
            tape_z,
            tape_dec,
            mu_m,
            lv_m,
            mask_m,
            eps_m: noise.eps_m.clone(),
            mu_z,
            lv_z,
            mask_z,
            eps_z: noise.eps_z.clone(),
            z,
            x_hat,
            kl_m_full,
        };
        Ok((terms, state))
    }

    /// One sampled bound for `(x, label)` under the given noise.
    pub fn elbo_sample(
        &self,
        x: &[f64],
        label: ClassLabel,
        noise: &ElboNoise,
    ) -> Result<ElboTerms, ModelError> {
        self.elbo_forward(x, label, noise).map(|(terms, _)| terms)
    }

    /// The scalar the trainer minimizes for one draw: the negated sampled
    /// bound plus, under [`TrainingMode::ZeroPerturbation`], the
    /// perturbation encoder's prior-matching penalty.
    pub fn loss_sample(
        &self,
        x: &[f64],
        label: ClassLabel,
        noise: &ElboNoise,
    ) -> Result<f64, ModelError> {
        let (terms, state) = self.elbo_forward(x, label, noise)?;
        Ok(loss_from(&terms, &state))
    }

    /// Loss and its exact parameter gradients for one draw.
    pub fn loss_and_grad(
        &self,
        x: &[f64],
        label: ClassLabel,
        noise: &ElboNoise,
    ) -> Result<(f64, ModelGrads), ModelError> {
        let (terms, state) = self.elbo_forward(x, label, noise)?;
        let grads = self.elbo_backward(x, &state)?;
        Ok((loss_from(&terms, &state), grads))
    }

    fn elbo_backward(&self, x: &[f64], state: &ElboState) -> Result<ModelGrads, ModelError> {
        let cfg = &self.config;
        let c = ClassLabel::COUNT;
        let (z_dim, m_dim) = (cfg.z_dim, cfg.m_dim);

        // Decoder: d loss / d x_hat = (x_hat - x) / var.
        let inv_var = (-cfg.dec_log_var).exp();
        let g_x_hat: Vec<f64> = state
            .x_hat
            .iter()
            .zip(x)
            .map(|(hi, xi)| (hi - xi) * inv_var)
            .collect();
        let (dec_grads, g_dec_in) = self.dec.backward(&state.tape_dec, &g_x_hat)?;
        let g_z_dec = &g_dec_in[c..c + z_dim];
        let g_m_dec = &g_dec_in[c + z_dim..];

        // Context head: total gradient w.r.t. the sample z collects the
        // decoder path, -ln p(z), and +ln q(z|..); the encoder heads add the
        // direct density derivatives and the reparameterization path.
        let mut g_head_z = vec![0.0; 2 * z_dim];
        for k in 0..z_dim {
            let inv = (-state.lv_z[k]).exp();
            let diff = state.z[k] - state.mu_z[k];
            let g_z_total = g_z_dec[k] + state.z[k] - diff * inv;
            g_head_z[k] = g_z_total + diff * inv;
            g_head_z[z_dim + k] = if state.mask_z[k] {
                g_z_total * 0.5 * (0.5 * state.lv_z[k]).exp() * state.eps_z[k]
                    + (-0.5 + 0.5 * diff * diff * inv)
            } else {
                0.0
            };
        }
        let (enc_z_grads, g_enc_z_in) = self.enc_z.backward(&state.tape_z, &g_head_z)?;
        let g_m_enc_z = &g_enc_z_in[cfg.x_dim + c..];

        // Perturbation head: the KL penalty contributes in both modes; the
        // pathwise terms exist only when m was actually sampled.
        let mut g_head_m = vec![0.0; 2 * m_dim];
        for k in 0..m_dim {
            let kl_mu = state.mu_m[k];
            let kl_lv = 0.5 * (state.lv_m[k].exp() - 1.0);
            match cfg.mode {
                TrainingMode::ZeroPerturbation => {
                    g_head_m[k] = kl_mu;
                    g_head_m[m_dim + k] = if state.mask_m[k] { kl_lv } else { 0.0 };
                }
                TrainingMode::FullElbo => {
                    let g_m_total = g_m_dec[k] + g_m_enc_z[k];
                    g_head_m[k] = g_m_total + kl_mu;
                    g_head_m[m_dim + k] = if state.mask_m[k] {
                        g_m_total * 0.5 * (0.5 * state.lv_m[k]).exp() * state.eps_m[k] + kl_lv
                    } else {
                        0.0
                    };
                }
            }
        }
        let (enc_m_grads, _) = self.enc_m.backward(&state.tape_m, &g_head_m)?;

        Ok(ModelGrads {
            enc_m: enc_m_grads,
            enc_z: enc_z_grads,
            dec: dec_grads,
        })
    }
}

fn loss_from(terms: &ElboTerms, state: &ElboState) -> f64 {
    -(terms.log_lik + terms.log_prior_z + terms.log_prior_y - terms.log_q_z) + state.kl_m_full
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, uniform_prior};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample_input(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn model_with_mode(mode: TrainingMode, seed: u64) -> GenClassifier {
        let config = super::super::ModelConfig {
            mode,
            ..tiny_config()
        };
        GenClassifier::new(config, uniform_prior(), seed).unwrap()
    }

    #[test]
    fn terms_sum_to_the_bound() {
        for mode in [TrainingMode::ZeroPerturbation, TrainingMode::FullElbo] {
            let model = model_with_mode(mode, 5);
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            let x = sample_input(&mut rng, 4);
            let noise = ElboNoise::standard(2, 2, &mut rng);
            let t = model.elbo_sample(&x, ClassLabel::Fuzzy, &noise).unwrap();
            let sum = t.log_lik + t.log_prior_z + t.log_prior_y - t.log_q_z - t.kl_m;
            assert_eq!(t.elbo, sum);
            if mode == TrainingMode::ZeroPerturbation {
                assert_eq!(t.kl_m, 0.0);
            } else {
                assert!(t.kl_m >= 0.0);
            }
        }
    }

    #[test]
    fn loss_matches_bound_per_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = sample_input(&mut rng, 4);
        let noise = ElboNoise::standard(2, 2, &mut rng);

        // Sampled perturbations: the loss is exactly the negated bound.
        let fe = model_with_mode(TrainingMode::FullElbo, 6);
        let terms = fe.elbo_sample(&x, ClassLabel::Dos, &noise).unwrap();
        let loss = fe.loss_sample(&x, ClassLabel::Dos, &noise).unwrap();
        assert!((loss + terms.elbo).abs() < 1e-12);

        // Pinned perturbations: the loss adds the prior-matching penalty on
        // top of the negated bound, so it can only be larger.
        let zp = model_with_mode(TrainingMode::ZeroPerturbation, 6);
        let terms = zp.elbo_sample(&x, ClassLabel::Dos, &noise).unwrap();
        let loss = zp.loss_sample(&x, ClassLabel::Dos, &noise).unwrap();
        assert!(loss >= -terms.elbo - 1e-12);
    }

    #[test]
    fn pinned_mode_ignores_perturbation_columns() {
        // Under ZeroPerturbation the m inputs are always zero, so deleting
        // those columns (m_dim = 0) must not change the bound at all.
        let model = model_with_mode(TrainingMode::ZeroPerturbation, 9);

        let mut stripped = model.clone();
        stripped.config.m_dim = 0;
        // Perturbation encoder shrinks to an empty output head.
        let last = stripped.enc_m.layers.len() - 1;
        stripped.enc_m.layers[last].weights.clear();
        stripped.enc_m.layers[last].bias.clear();
        stripped.enc_m.layers[last].out_dim = 0;
        // Drop the trailing m columns from the context encoder's first layer.
        let l0 = &mut stripped.enc_z.layers[0];
        let (old_in, new_in) = (l0.in_dim, l0.in_dim - 2);
        let mut kept = Vec::with_capacity(new_in * l0.out_dim);
        for row in 0..l0.out_dim {
            kept.extend_from_slice(&l0.weights[row * old_in..row * old_in + new_in]);
        }
        l0.weights = kept;
        l0.in_dim = new_in;
        // Same for the decoder.
        let l0 = &mut stripped.dec.layers[0];
        let (old_in, new_in) = (l0.in_dim, l0.in_dim - 2);
        let mut kept = Vec::with_capacity(new_in * l0.out_dim);
        for row in 0..l0.out_dim {
            kept.extend_from_slice(&l0.weights[row * old_in..row * old_in + new_in]);
        }
        l0.weights = kept;
        l0.in_dim = new_in;

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for label in ClassLabel::ALL {
            let x = sample_input(&mut rng, 4);
            let noise = ElboNoise::standard(2, 2, &mut rng);
            let stripped_noise = ElboNoise {
                eps_m: vec![],
                eps_z: noise.eps_z.clone(),
            };
            let full = model.elbo_sample(&x, label, &noise).unwrap();
            let small = stripped.elbo_sample(&x, label, &stripped_noise).unwrap();
            assert_eq!(full.elbo, small.elbo);
            assert_eq!(full.log_lik, small.log_lik);
            assert_eq!(full.log_q_z, small.log_q_z);
        }
    }

    #[test]
    fn noise_shape_is_checked() {
        let model = model_with_mode(TrainingMode::FullElbo, 1);
        let bad = ElboNoise {
            eps_m: vec![0.0],
            eps_z: vec![0.0, 0.0],
        };
        assert!(matches!(
            model.elbo_sample(&[0.1; 4], ClassLabel::Normal, &bad),
            Err(ModelError::NoiseDim { what: "perturbation", expected: 2, got: 1 })
        ));
    }

    /// Every parameter's analytic gradient against a central difference of
    /// the sampled loss, in both modes.
    #[test]
    fn gradients_match_finite_differences() {
        for mode in [TrainingMode::ZeroPerturbation, TrainingMode::FullElbo] {
            let mut model = model_with_mode(mode, 13);
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let x = sample_input(&mut rng, 4);
            let noise = ElboNoise::standard(2, 2, &mut rng);
            let label = ClassLabel::GearSpoof;

            let (_, grads) = model.loss_and_grad(&x, label, &noise).unwrap();
            let analytic = [&grads.enc_m, &grads.enc_z, &grads.dec];

            let h = 1e-6;
            for (net_idx, net_name) in ["enc_m", "enc_z", "dec"].iter().enumerate() {
                let n_layers = analytic[net_idx].layers.len();
                for li in 0..n_layers {
                    let n_weights = analytic[net_idx].layers[li].d_weights.len();
                    let n_bias = analytic[net_idx].layers[li].d_bias.len();
                    for pi in 0..n_weights + n_bias {
                        let read = |model: &GenClassifier| {
                            model.loss_sample(&x, label, &noise).unwrap()
                        };
                        let tweak = |model: &mut GenClassifier, delta: f64| {
                            let net = match net_idx {
                                0 => &mut model.enc_m,
                                1 => &mut model.enc_z,
                                _ => &mut model.dec,
                            };
                            if pi < n_weights {
                                net.layers[li].weights[pi] += delta;
                            } else {
                                net.layers[li].bias[pi - n_weights] += delta;
                            }
                        };
                        tweak(&mut model, h);
                        let up = read(&model);
                        tweak(&mut model, -2.0 * h);
                        let down = read(&model);
                        tweak(&mut model, h);
                        let numeric = (up - down) / (2.0 * h);
                        let exact = if pi < n_weights {
                            analytic[net_idx].layers[li].d_weights[pi]
                        } else {
                            analytic[net_idx].layers[li].d_bias[pi - n_weights]
                        };
                        assert!(
                            (numeric - exact).abs() <= 1e-5 * (1.0 + exact.abs()),
                            "{mode:?} {net_name} layer {li} param {pi}: numeric {numeric} vs analytic {exact}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn grad_accumulation_helpers() {
        let model = model_with_mode(TrainingMode::FullElbo, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = sample_input(&mut rng, 4);
        let noise = ElboNoise::standard(2, 2, &mut rng);
        let (_, g) = model.loss_and_grad(&x, ClassLabel::Normal, &noise).unwrap();
        let mut acc = ModelGrads::zeros_like(&model);
        acc.add_assign(&g);
        acc.add_assign(&g);
        acc.scale(0.5);
        for (a, b) in acc.dec.layers.iter().zip(&g.dec.layers) {
            for (x, y) in a.d_weights.iter().zip(&b.d_weights) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
