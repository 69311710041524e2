//! Generative classifier over frame features.
//!
//! One latent-variable model is shared across classes; the class label enters
//! every network as a one-hot block. Three small dense nets cooperate:
//!
//! * a perturbation encoder `q(m | x, y)` for factors absent from training,
//! * a context encoder `q(z | x, y, m)` for ordinary within-class variation,
//! * a decoder giving the likelihood `p(x | y, z, m)`,
//!
//! plus a categorical class prior estimated from training-set frequencies.
//!
//! A frame is classified by estimating `ln p(x, y_c)` for every class with
//! `k` importance-weighted draws of the latents and taking a softmax over
//! the per-class scores. Ties resolve to the earliest class in label order,
//! so a dead heat falls back to `Normal` rather than alarming.

mod checkpoint;
mod elbo;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use elbo::{ElboNoise, ElboTerms, ModelGrads};
pub use train::{train, EvalPoint, TrainConfig, TrainError, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_stream, FeatureConfig};
use crate::frame::{CanFrame, ClassLabel};
use crate::ingest::LabelCounts;
use crate::nn::gaussian::{
    clamp_log_var, diag_log_pdf, log_sum_exp, sample_diag, std_normal_log_pdf,
};
use crate::nn::{DenseNet, NnError};

/// How the perturbation latent `m` is handled while fitting the model.
/// Prediction always samples `m` from its encoder; the modes differ in what
/// the training objective and the importance weights do with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// `m` is pinned to zero during training; its encoder is fitted only by
    /// a prior-matching penalty, and prediction weights omit the
    /// perturbation prior-to-posterior ratio.
    ZeroPerturbation,
    /// `m` is sampled during training with a closed-form KL penalty, and
    /// prediction weights include the perturbation ratio, making the scores
    /// genuine evidence estimates for the full latent pair.
    FullElbo,
}

/// Architecture and scoring hyperparameters. The defaults match the
/// shipped training recipe; tests shrink them freely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the feature vectors this model scores.
    pub x_dim: usize,
    /// Context latent width.
    pub z_dim: usize,
    /// Perturbation latent width. May be zero, which reduces the model to a
    /// plain conditional VAE.
    pub m_dim: usize,
    /// Hidden layers per network.
    pub hidden_layers: usize,
    /// Hidden width of both encoders.
    pub enc_hidden_width: usize,
    /// Hidden width of the decoder.
    pub dec_hidden_width: usize,
    /// Fixed log-variance of the decoder's output Gaussian.
    pub dec_log_var: f64,
    pub mode: TrainingMode,
    /// Default importance-sample count per class during prediction.
    pub k_predict: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            x_dim: crate::features::FEATURE_DIM,
            z_dim: 8,
            m_dim: 4,
            hidden_layers: 10,
            enc_hidden_width: 26,
            dec_hidden_width: 36,
            // Features live in [0, 1], so unit observation variance drowns
            // byte-level reconstruction error in the Gaussian constant and the
            // classifier never separates the classes. e^-6 puts one standard
            // deviation at about thirteen counts of an 8-bit payload byte.
            dec_log_var: -6.0,
            mode: TrainingMode::FullElbo,
            k_predict: 16,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what} must be at least 1")]
    ZeroDim { what: &'static str },
    #[error("decoder log-variance must be finite")]
    BadDecLogVar,
    #[error("class prior invalid: {0}")]
    BadPrior(String),
    #[error("feature vector has {got} values, model expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("feature {index} is not finite")]
    NonFiniteFeature { index: usize },
    #[error("noise for {what} has {got} values, expected {expected}")]
    NoiseDim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("importance sample count must be at least 1")]
    ZeroSamples,
    #[error("every class scored zero likelihood")]
    DegenerateLikelihood,
    #[error(transparent)]
    Net(#[from] NnError),
}

/// The full model: three networks plus the class prior.
///
/// Fields are public for serialization and inspection; [`GenClassifier::new`]
/// is the validating way to build one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenClassifier {
    pub config: ModelConfig,
    /// Perturbation encoder, input `[x, y]`, output `[mean, log_var]`.
    pub enc_m: DenseNet,
    /// Context encoder, input `[x, y, m]`, output `[mean, log_var]`.
    pub enc_z: DenseNet,
    /// Decoder, input `[y, z, m]`, output the reconstructed feature means.
    pub dec: DenseNet,
    /// Class probabilities, in [`ClassLabel::ALL`] order, summing to one.
    pub prior_y: [f64; ClassLabel::COUNT],
}

fn layer_dims(in_dim: usize, hidden_width: usize, hidden_layers: usize, out_dim: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden_layers + 2);
    dims.push(in_dim);
    dims.extend(std::iter::repeat(hidden_width).take(hidden_layers));
    dims.push(out_dim);
    dims
}

/// Turns label counts into a probability vector for [`GenClassifier::new`].
pub fn prior_from_counts(counts: &LabelCounts) -> Result<[f64; ClassLabel::COUNT], ModelError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(ModelError::BadPrior("no frames counted".to_string()));
    }
    let mut prior = [0.0; ClassLabel::COUNT];
    for (p, &n) in prior.iter_mut().zip(counts) {
        *p = n as f64 / total as f64;
    }
    Ok(prior)
}

fn validate_prior(prior: &[f64; ClassLabel::COUNT]) -> Result<(), ModelError> {
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ModelError::BadPrior(
            "entries must be finite and non-negative".to_string(),
        ));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(ModelError::BadPrior(format!("entries sum to {sum}, not 1")));
    }
    Ok(())
}

pub(crate) fn one_hot(label: ClassLabel) -> [f64; ClassLabel::COUNT] {
    let mut y = [0.0; ClassLabel::COUNT];
    y[label.index()] = 1.0;
    y
}

/// Splits an encoder head `[mean..., log_var...]` into its halves.
fn split_heads(out: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(out.len() % 2, 0);
    let d = out.len() / 2;
    let mut mean = out;
    let log_var = mean.split_off(d);
    (mean, log_var)
}

fn concat2(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn concat3(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len() + c.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v.extend_from_slice(c);
    v
}

/// Index of the first maximum, so earlier labels win exact ties.
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > best {
            best = s;
            idx = i;
        }
    }
    idx
}

/// Per-frame scoring stream: one seed covers a whole run, one stream per
/// frame, so results do not depend on how frames are batched or scheduled.
fn prediction_rng(seed: u64, frame_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

/// Classification result for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: ClassLabel,
    /// Estimated `ln p(x, y_c)` per class.
    pub scores: [f64; ClassLabel::COUNT],
    /// `ln p(y_c | x)`, the softmax of the scores in log space.
    pub log_posterior: [f64; ClassLabel::COUNT],
    /// `p(y_c | x)`; sums to one.
    pub posterior: [f64; ClassLabel::COUNT],
}

impl GenClassifier {
    /// Builds a model with Glorot-initialized weights drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        prior_y: [f64; ClassLabel::COUNT],
        seed: u64,
    ) -> Result<GenClassifier, ModelError> {
        if config.x_dim == 0 {
            return Err(ModelError::ZeroDim { what: "x_dim" });
        }
        if config.z_dim == 0 {
            return Err(ModelError::ZeroDim { what: "z_dim" });
        }
        if config.hidden_layers > 0 && (config.enc_hidden_width == 0 || config.dec_hidden_width == 0)
        {
            return Err(ModelError::ZeroDim { what: "hidden width" });
        }
        if !config.dec_log_var.is_finite() {
            return Err(ModelError::BadDecLogVar);
        }
        validate_prior(&prior_y)?;

        let c = ClassLabel::COUNT;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let enc_m = DenseNet::new(
            &layer_dims(
                config.x_dim + c,
                config.enc_hidden_width,
                config.hidden_layers,
                2 * config.m_dim,
            ),
            &mut rng,
        );
        let enc_z = DenseNet::new(
            &layer_dims(
                config.x_dim + c + config.m_dim,
                config.enc_hidden_width,
                config.hidden_layers,
                2 * config.z_dim,
            ),
            &mut rng,
        );
        let dec = DenseNet::new(
            &layer_dims(
                c + config.z_dim + config.m_dim,
                config.dec_hidden_width,
                config.hidden_layers,
                config.x_dim,
            ),
            &mut rng,
        );
        Ok(GenClassifier {
            config,
            enc_m,
            enc_z,
            dec,
            prior_y,
        })
    }

    pub fn param_count(&self) -> usize {
        self.enc_m.param_count() + self.enc_z.param_count() + self.dec.param_count()
    }

    pub(crate) fn check_x(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.config.x_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.x_dim,
                got: x.len(),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature { index });
        }
        Ok(())
    }

    /// Estimates `ln p(x, y_c)` for every class with `k` importance draws
    /// per class, consuming `2 * k * (m_dim + z_dim)` values from `rng` in
    /// class order.
    pub fn predict_scores(
        &self,
        x: &[f64],
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<[f64; ClassLabel::COUNT], ModelError> {
        self.check_x(x)?;
        if k == 0 {
            return Err(ModelError::ZeroSamples);
        }

        let cfg = &self.config;
        let ln_k = (k as f64).ln();
        let mut scores = [f64::NEG_INFINITY; ClassLabel::COUNT];
        let mut log_w = Vec::with_capacity(k);

        for label in ClassLabel::ALL {
            let y = one_hot(label);
            let (head_m, _) = self.enc_m.forward(&concat2(x, &y))?;
            let (mu_m, mut lv_m) = split_heads(head_m);
            clamp_log_var(&mut lv_m);
            let log_prior_y = self.prior_y[label.index()].ln();

            log_w.clear();
            for _ in 0..k {
                let noise = ElboNoise::standard(cfg.m_dim, cfg.z_dim, rng);
                let m = sample_diag(&mu_m, &lv_m, &noise.eps_m);
                let (head_z, _) = self.enc_z.forward(&concat3(x, &y, &m))?;
                let (mu_z, mut lv_z) = split_heads(head_z);
                clamp_log_var(&mut lv_z);
                let z = sample_diag(&mu_z, &lv_z, &noise.eps_z);
                let (x_hat, _) = self.dec.forward(&concat3(&y, &z, &m))?;

                let mut lw = elbo::recon_log_pdf(x, &x_hat, cfg.dec_log_var)
                    + std_normal_log_pdf(&z)
                    + log_prior_y
                    - diag_log_pdf(&z, &mu_z, &lv_z);
                if cfg.mode == TrainingMode::FullElbo {
                    lw += std_normal_log_pdf(&m) - diag_log_pdf(&m, &mu_m, &lv_m);
                }
                log_w.push(lw);
            }
            scores[label.index()] = log_sum_exp(&log_w) - ln_k;
        }

        if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
            return Err(ModelError::DegenerateLikelihood);
        }
        Ok(scores)
    }

    /// Classifies one frame: per-class evidence scores, their softmax, and
    /// the winning label.
    pub fn predict(
        &self,
        x: &[f64],
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Prediction, ModelError> {
        let scores = self.predict_scores(x, k, rng)?;
        let total = log_sum_exp(&scores);
        let mut log_posterior = [0.0; ClassLabel::COUNT];
        let mut posterior = [0.0; ClassLabel::COUNT];
        for i in 0..ClassLabel::COUNT {
            log_posterior[i] = scores[i] - total;
            posterior[i] = log_posterior[i].exp();
        }
        let label = ClassLabel::from_index(argmax_first(&scores)).unwrap();
        Ok(Prediction {
            label,
            scores,
            log_posterior,
            posterior,
        })
    }

    /// Classifies a batch, one deterministic noise stream per frame. With
    /// the `parallel` feature this fans out across threads; results are
    /// identical to [`GenClassifier::predict_batch_seq`] either way.
    #[cfg(feature = "parallel")]
    pub fn predict_batch<X: AsRef<[f64]> + Sync>(
        &self,
        xs: &[X],
        k: usize,
        seed: u64,
    ) -> Result<Vec<Prediction>, ModelError> {
        use rayon::prelude::*;
        xs.par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = prediction_rng(seed, i as u64);
                self.predict(x.as_ref(), k, &mut rng)
            })
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn predict_batch<X: AsRef<[f64]> + Sync>(
        &self,
        xs: &[X],
        k: usize,
        seed: u64,
    ) -> Result<Vec<Prediction>, ModelError> {
        self.predict_batch_seq(xs, k, seed)
    }

    /// Single-threaded twin of [`GenClassifier::predict_batch`].
    pub fn predict_batch_seq<X: AsRef<[f64]>>(
        &self,
        xs: &[X],
        k: usize,
        seed: u64,
    ) -> Result<Vec<Prediction>, ModelError> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = prediction_rng(seed, i as u64);
                self.predict(x.as_ref(), k, &mut rng)
            })
            .collect()
    }

    /// Encodes an ordered frame stream and classifies every frame.
    pub fn classify_log(
        &self,
        frames: &[CanFrame],
        feature_config: &FeatureConfig,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Prediction>, ModelError> {
        let features = extract_stream(frames, feature_config);
        self.predict_batch(&features, k, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            x_dim: 4,
            z_dim: 2,
            m_dim: 2,
            hidden_layers: 2,
            enc_hidden_width: 8,
            dec_hidden_width: 8,
            dec_log_var: 0.0,
            mode: TrainingMode::FullElbo,
            k_predict: 8,
        }
    }

    pub(crate) fn uniform_prior() -> [f64; ClassLabel::COUNT] {
        [0.2; ClassLabel::COUNT]
    }

    #[test]
    fn prior_from_counts_matches_fractions() {
        let prior = prior_from_counts(&[8, 1, 1, 1, 1]).unwrap();
        assert!((prior[0] - 2.0 / 3.0).abs() < 1e-15);
        for p in &prior[1..] {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
        assert!(matches!(
            prior_from_counts(&[0; 5]),
            Err(ModelError::BadPrior(_))
        ));
    }

    #[test]
    fn prior_validation() {
        let cfg = tiny_config();
        assert!(GenClassifier::new(cfg, [0.25, 0.25, 0.25, 0.25, 0.1], 0).is_err());
        assert!(GenClassifier::new(cfg, [-0.2, 0.3, 0.3, 0.3, 0.3], 0).is_err());
        assert!(GenClassifier::new(cfg, [1.0, 0.0, 0.0, 0.0, 0.0], 0).is_ok());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = GenClassifier::new(tiny_config(), uniform_prior(), 7).unwrap();
        let b = GenClassifier::new(tiny_config(), uniform_prior(), 7).unwrap();
        let c = GenClassifier::new(tiny_config(), uniform_prior(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn network_shapes_follow_config() {
        let model = GenClassifier::new(ModelConfig::default(), uniform_prior(), 0).unwrap();
        assert_eq!(model.enc_m.in_dim(), 25);
        assert_eq!(model.enc_m.out_dim(), 8);
        assert_eq!(model.enc_z.in_dim(), 29);
        assert_eq!(model.enc_z.out_dim(), 16);
        assert_eq!(model.dec.in_dim(), 17);
        assert_eq!(model.dec.out_dim(), 20);
        assert_eq!(model.enc_m.layers.len(), 11);
    }

    #[test]
    fn argmax_prefers_earliest_on_ties() {
        assert_eq!(argmax_first(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_first(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax_first(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), 0);
    }

    #[test]
    fn posterior_is_a_distribution() {
        let model = GenClassifier::new(tiny_config(), uniform_prior(), 3).unwrap();
        let mut rng = prediction_rng(5, 0);
        let p = model.predict(&[0.2, 0.8, 0.5, 0.1], 16, &mut rng).unwrap();
        let sum: f64 = p.posterior.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.posterior.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.scores.iter().all(|s| s.is_finite()));
        assert_eq!(p.label.index(), argmax_first(&p.scores));
    }

    #[test]
    fn prediction_is_deterministic_per_seed() {
        let model = GenClassifier::new(tiny_config(), uniform_prior(), 3).unwrap();
        let xs = vec![vec![0.2, 0.8, 0.5, 0.1], vec![0.9, 0.0, 0.3, 0.6]];
        let a = model.predict_batch(&xs, 8, 11).unwrap();
        let b = model.predict_batch(&xs, 8, 11).unwrap();
        assert_eq!(a, b);
        let c = model.predict_batch(&xs, 8, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_and_sequential_batches_agree_exactly() {
        let model = GenClassifier::new(tiny_config(), uniform_prior(), 4).unwrap();
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![0.1 * (i % 10) as f64, 0.5, 0.3, 0.9])
            .collect();
        let par = model.predict_batch(&xs, 8, 21).unwrap();
        let seq = model.predict_batch_seq(&xs, 8, 21).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn zero_prior_class_is_never_predicted() {
        let mut prior = [0.0; ClassLabel::COUNT];
        prior[ClassLabel::Normal.index()] = 0.5;
        prior[ClassLabel::Dos.index()] = 0.5;
        let model = GenClassifier::new(tiny_config(), prior, 6).unwrap();
        for i in 0..20 {
            let x = vec![0.05 * i as f64, 0.3, 0.7, 0.2];
            let mut rng = prediction_rng(9, i);
            let p = model.predict(&x, 8, &mut rng).unwrap();
            assert!(matches!(p.label, ClassLabel::Normal | ClassLabel::Dos));
            assert_eq!(p.posterior[ClassLabel::Fuzzy.index()], 0.0);
        }
    }

    #[test]
    fn input_validation_errors() {
        let model = GenClassifier::new(tiny_config(), uniform_prior(), 3).unwrap();
        let mut rng = prediction_rng(0, 0);
        assert!(matches!(
            model.predict(&[0.0; 3], 8, &mut rng),
            Err(ModelError::FeatureDim { expected: 4, got: 3 })
        ));
        assert!(matches!(
            model.predict(&[0.0, f64::NAN, 0.0, 0.0], 8, &mut rng),
            Err(ModelError::NonFiniteFeature { index: 1 })
        ));
        assert!(matches!(
            model.predict(&[0.0; 4], 0, &mut rng),
            Err(ModelError::ZeroSamples)
        ));
    }
}
