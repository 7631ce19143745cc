//! The conditioned denoising UNet, its noise schedule, and the sampler.
//!
//! Two architecturally identical UNets are built side by side: the denoiser
//! (prefix `dn`) and the identity encoder (prefix `id`). The denoiser takes
//! the noised latent, the timestep/expression embedding, the attribute
//! rigger features, and per-block identity tokens; the identity encoder runs
//! once per source image with no noise and a fixed t=0 embedding.

pub mod checkpoint;
pub mod sampler;
pub(crate) mod unet;

pub use sampler::{sample_latent, Denoiser};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attribprov::{ConditionSet, ProviderConfig};
use crate::autodiff::{Arr, BoundParams, ParamStore, Tape, Var};
use crate::face3d::{Image, EXPR_DIM};
use crate::facefusion::{self, FusionVariant, IdentityFeatures};
use crate::latentcodec::{self, LATENT_CHANNELS};
use crate::{Error, Result};

/// β range of the linear schedule.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Default number of diffusion steps for training.
pub const DEFAULT_TIMESTEPS: usize = 1000;

static ADD_NOISE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Diagnostic counter: total [`NoiseSchedule::add_noise`] invocations in this
/// process. Identity-feature extraction must never advance it.
pub fn add_noise_call_count() -> u64 {
    ADD_NOISE_CALLS.load(Ordering::Relaxed)
}

/// β/α/ᾱ tables for the forward and reverse processes.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear β schedule from 1e-4 to 0.02 inclusive; ᾱ accumulated in f64.
pub fn make_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::InvalidInput(format!("schedule needs T >= 2, got {timesteps}")));
    }
    let mut betas = Vec::with_capacity(timesteps);
    for i in 0..timesteps {
        let frac = i as f64 / (timesteps - 1) as f64;
        betas.push(BETA_START + frac * (BETA_END - BETA_START));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut acc = 1.0f64;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { timesteps, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    /// ᾱ_t for t in 1..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// Forward noising: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, z0: &Array3<f64>, eps: &Array3<f64>, t: usize) -> Result<Array3<f64>> {
        self.check_t(t)?;
        if z0.dim() != eps.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", z0.dim()),
                got: format!("{:?}", eps.dim()),
            });
        }
        ADD_NOISE_CALLS.fetch_add(1, Ordering::Relaxed);
        let ab = self.alpha_bar(t);
        Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}

/// Architecture of one UNet tower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Level indices carrying transformer blocks (the mid block always has one).
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub expr_dim: usize,
    pub heads: usize,
    pub context_dim: usize,
    pub ff_mult: usize,
    pub norm_groups: usize,
    /// Rigger conv output channels.
    pub rigger_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: LATENT_CHANNELS,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            time_embed_dim: 128,
            expr_dim: EXPR_DIM,
            heads: 4,
            context_dim: 64,
            ff_mult: 2,
            norm_groups: 8,
            rigger_channels: 8,
        }
    }
}

impl UNetConfig {
    /// Tiny tower for gradient checking and fast tests.
    pub fn micro() -> Self {
        UNetConfig {
            in_channels: LATENT_CHANNELS,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![0, 1],
            time_embed_dim: 32,
            expr_dim: EXPR_DIM,
            heads: 2,
            context_dim: 16,
            ff_mult: 2,
            norm_groups: 4,
            rigger_channels: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Transformer block count of one tower (down + mid + up).
    pub fn transformer_blocks(&self) -> usize {
        2 * self.attention_levels.len() + 1
    }

    /// Validate against the latent spatial size.
    pub fn validate(&self, latent_hw: (usize, usize)) -> Result<()> {
        let depth = self.levels() - 1;
        let (h, w) = latent_hw;
        if h >> depth < 2 || w >> depth < 2 {
            return Err(Error::Config(format!(
                "latent {h}x{w} too small for {} levels (deepest must keep >= 2 px)",
                self.levels()
            )));
        }
        if h % (1 << depth) != 0 || w % (1 << depth) != 0 {
            return Err(Error::Config(format!(
                "latent {h}x{w} not divisible by 2^{depth}"
            )));
        }
        for level in &self.attention_levels {
            if *level >= self.levels() {
                return Err(Error::Config(format!("attention level {level} out of range")));
            }
        }
        for level in 0..self.levels() {
            let c = self.channels_at(level);
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channels {c} at level {level} not divisible by norm groups {}",
                    self.norm_groups
                )));
            }
            if self.has_attention(level) && c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "channels {c} at level {level} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        if self.time_embed_dim < 6 {
            return Err(Error::Config("time embedding dimension too small".into()));
        }
        Ok(())
    }
}

/// Conditioning route for the coefficient ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningVariant {
    /// Image conditions through the rigger, ψ through the expression map.
    Full,
    /// One concatenated (ψ, pose, light) vector through a single linear
    /// layer into the time embedding; no rendering image. The background
    /// condition is retained through the rigger.
    NoDisent,
    /// Three separate linear layers whose outputs are concatenated and added
    /// to the time embedding; no rendering image, background retained.
    CoefSep,
}

/// Whether the identity encoder starts from the denoiser's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Shared,
    Independent,
}

/// Everything needed to rebuild the model and its conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub fusion: FusionVariant,
    pub conditioning: ConditioningVariant,
    pub init: InitMode,
    pub provider: ProviderConfig,
    pub image_size: (usize, usize),
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            unet: UNetConfig::default(),
            fusion: FusionVariant::SpatialHalve,
            conditioning: ConditioningVariant::Full,
            init: InitMode::Shared,
            provider: ProviderConfig::default(),
            image_size: (64, 64),
            timesteps: DEFAULT_TIMESTEPS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn latent_hw(&self) -> (usize, usize) {
        (self.image_size.0 / latentcodec::SCALE_FACTOR, self.image_size.1 / latentcodec::SCALE_FACTOR)
    }

    /// Rigger conv input channels under this conditioning variant.
    pub fn rigger_in_channels(&self) -> usize {
        match self.conditioning {
            ConditioningVariant::Full => 2 * self.unet.in_channels,
            ConditioningVariant::NoDisent | ConditioningVariant::CoefSep => self.unet.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size.0 % latentcodec::SCALE_FACTOR != 0
            || self.image_size.1 % latentcodec::SCALE_FACTOR != 0
        {
            return Err(Error::Config(format!(
                "image size {:?} not divisible by codec factor {}",
                self.image_size,
                latentcodec::SCALE_FACTOR
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be >= 2".into()));
        }
        self.unet.validate(self.latent_hw())
    }
}

/// Per-sample conditioning inputs after encoding.
#[derive(Debug, Clone)]
pub struct DenoiserInputs {
    /// Latent stack entering the attribute rigger, when the variant uses it.
    pub rig_input: Option<Arr>,
    pub cond_vector: CondVector,
}

/// The coefficient route into the time embedding.
#[derive(Debug, Clone)]
pub enum CondVector {
    /// ψ through the expression linear map.
    Psi([f64; EXPR_DIM]),
    /// Concatenated (ψ, pose, light), one linear layer.
    Joint(Vec<f64>),
    /// Separate linear layers per coefficient group.
    Separate { expr: [f64; EXPR_DIM], pose: [f64; 3], light: [f64; 9] },
}

/// The model: config plus all learnable parameters of the denoiser, the
/// identity encoder, the rigger, and the coefficient maps.
#[derive(Debug, Clone)]
pub struct RigModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
}

impl RigModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_schedule(config.timesteps)?;
        let params = unet::init_params(&config);
        Ok(RigModel { config, params, schedule })
    }

    /// Run the identity encoder over a source image, recording the tokens
    /// entering each transformer block's self-attention. No noise is added
    /// and the timestep embedding is fixed at t = 0.
    pub fn extract_identity(&self, source_image: &Image) -> Result<IdentityFeatures> {
        let latent = latentcodec::encode(source_image)?;
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&self.params);
        let captured = self.identity_forward(&mut tape, &mut bound, &latent.data)?;
        Ok(IdentityFeatures {
            blocks: captured.iter().map(|v| tape.value(*v).clone()).collect(),
        })
    }

    /// Identity-encoder forward on an existing tape; returns the captured
    /// per-block token `Var`s so training can differentiate through them.
    pub(crate) fn identity_forward(
        &self,
        tape: &mut Tape,
        bound: &mut BoundParams,
        latent: &Array3<f64>,
    ) -> Result<Vec<Var>> {
        let z = tape.leaf(latent.clone().into_dyn());
        let temb = unet::time_embedding_base(tape, 0, self.config.unet.time_embed_dim);
        let mut captured = Vec::new();
        unet::unet_forward(
            tape,
            bound,
            &self.config.unet,
            z,
            temb,
            unet::identity_context(tape, bound),
            unet::ForwardSpec {
                prefix: "id",
                fusion: None,
                rig_input: None,
                conv_input_id: None,
                id_tokens: None,
                capture: Some(&mut captured),
                trace: None,
            },
        );
        Ok(captured)
    }

    /// Denoiser forward on an existing tape.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn denoiser_forward(
        &self,
        tape: &mut Tape,
        bound: &mut BoundParams,
        z_t: &Array3<f64>,
        t: usize,
        inputs: &DenoiserInputs,
        id_tokens: Option<&[Var]>,
        trace: Option<&mut Vec<usize>>,
    ) -> Result<Var> {
        let cfg = &self.config.unet;
        if let Some(tokens) = id_tokens {
            if tokens.len() != cfg.transformer_blocks() {
                return Err(Error::Config(format!(
                    "identity feature count {} does not match transformer block count {}",
                    tokens.len(),
                    cfg.transformer_blocks()
                )));
            }
        }
        let z = tape.leaf(z_t.clone().into_dyn());
        let temb = unet::conditioned_time_embedding(
            tape,
            bound,
            cfg,
            t,
            &inputs.cond_vector,
        );
        let (rig_var, conv_id) = match self.config.fusion {
            FusionVariant::ConvInput => {
                // Identity is embedded by a single conv at the UNet input;
                // the identity tokens are unused.
                (inputs.rig_input.as_ref().map(|r| tape.leaf(r.clone())), id_tokens.map(|_| ()))
            }
            _ => (inputs.rig_input.as_ref().map(|r| tape.leaf(r.clone())), None),
        };
        // conv_input needs the raw identity latent, which callers pass via
        // the identity token slot as a single (c_in, h, w) tensor.
        let conv_input_id = if matches!(self.config.fusion, FusionVariant::ConvInput) {
            conv_id.and_then(|_| id_tokens.and_then(|t| t.first().copied()))
        } else {
            None
        };
        let ctx = unet::denoiser_context(tape, bound, cfg, &inputs.cond_vector);
        let fusion = match self.config.fusion {
            FusionVariant::ConvInput => None,
            f => Some(f),
        };
        let out = unet::unet_forward(
            tape,
            bound,
            cfg,
            z,
            temb,
            ctx,
            unet::ForwardSpec {
                prefix: "dn",
                fusion,
                rig_input: rig_var,
                conv_input_id,
                id_tokens: if matches!(self.config.fusion, FusionVariant::ConvInput) {
                    None
                } else {
                    id_tokens
                },
                capture: None,
                trace,
            },
        );
        Ok(out)
    }

    /// Inference-mode ε prediction on a fresh tape.
    pub fn predict_eps(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        inputs: &DenoiserInputs,
        id_features: &IdentityFeatures,
    ) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&self.params);
        let id_tokens: Vec<Var> = id_features
            .blocks
            .iter()
            .map(|f| tape.leaf(f.clone()))
            .collect();
        let out = self.denoiser_forward(
            &mut tape,
            &mut bound,
            z_t,
            t,
            inputs,
            Some(&id_tokens),
            None,
        )?;
        Ok(tape
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("eps prediction is (c,h,w)")
            .to_owned())
    }

    /// Identity features for the conv_input ablation: the raw source latent,
    /// passed through as a single pseudo-block.
    pub fn conv_input_features(&self, source_image: &Image) -> Result<IdentityFeatures> {
        let latent = latentcodec::encode(source_image)?;
        Ok(IdentityFeatures { blocks: vec![latent.data.into_dyn()] })
    }

    /// Build the per-sample denoiser inputs from a condition set.
    pub fn denoiser_inputs(&self, conditions: &ConditionSet) -> Result<DenoiserInputs> {
        conditioning_inputs(&self.config, conditions, None)
    }

    /// Deterministic DDIM sampling of an edited image.
    pub fn sample(
        &self,
        conditions: &ConditionSet,
        id_features: &IdentityFeatures,
        steps: usize,
        seed: u64,
    ) -> Result<Image> {
        let inputs = self.denoiser_inputs(conditions)?;
        let (lh, lw) = self.config.latent_hw();
        let shape = (self.config.unet.in_channels, lh, lw);
        let den = ModelDenoiser { model: self, inputs: &inputs, id_features };
        let z0 = sampler::sample_latent(&den, &self.schedule, steps, seed, shape)?;
        Ok(latentcodec::decode(&latentcodec::LatentTensor {
            data: z0,
            scale_factor: latentcodec::SCALE_FACTOR,
        }))
    }
}

struct ModelDenoiser<'m> {
    model: &'m RigModel,
    inputs: &'m DenoiserInputs,
    id_features: &'m IdentityFeatures,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict(&self, z_t: &Array3<f64>, t: usize) -> Array3<f64> {
        self.model
            .predict_eps(z_t, t, self.inputs, self.id_features)
            .expect("denoiser forward")
    }
}

/// Encode a condition set into denoiser inputs for a conditioning variant.
///
/// `coeffs` supplies (pose, light) for the coefficient variants; when absent
/// they are taken as zeros (the full variant never reads them).
pub fn conditioning_inputs(
    config: &ModelConfig,
    conditions: &ConditionSet,
    coeffs: Option<([f64; 3], [f64; 9])>,
) -> Result<DenoiserInputs> {
    let bg = latentcodec::encode(&conditions.background)?;
    match config.conditioning {
        ConditioningVariant::Full => {
            let rend = latentcodec::encode(&conditions.rendering)?;
            let stacked = ndarray::concatenate(
                ndarray::Axis(0),
                &[rend.data.view(), bg.data.view()],
            )
            .expect("condition latents stack");
            Ok(DenoiserInputs {
                rig_input: Some(stacked.into_dyn()),
                cond_vector: CondVector::Psi(conditions.expr),
            })
        }
        ConditioningVariant::NoDisent => {
            let (pose, light) = coeffs.unwrap_or(([0.0; 3], [0.0; 9]));
            let mut joint = Vec::with_capacity(EXPR_DIM + 12);
            joint.extend_from_slice(&conditions.expr);
            joint.extend_from_slice(&pose);
            joint.extend_from_slice(&light);
            Ok(DenoiserInputs {
                rig_input: Some(bg.data.into_dyn()),
                cond_vector: CondVector::Joint(joint),
            })
        }
        ConditioningVariant::CoefSep => {
            let (pose, light) = coeffs.unwrap_or(([0.0; 3], [0.0; 9]));
            Ok(DenoiserInputs {
                rig_input: Some(bg.data.into_dyn()),
                cond_vector: CondVector::Separate { expr: conditions.expr, pose, light },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert_eq!(s.betas[999], 0.02);
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0], "alpha_bar must strictly decrease");
        }
        assert!(s.alpha_bar(1) > 0.999);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(make_schedule(1).is_err());
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        let s = make_schedule(1000).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - s.betas[t - 1];
        }
        assert!((prod - s.alpha_bar(1000)).abs() < 1e-12);
    }

    #[test]
    fn add_noise_cases() {
        let s = make_schedule(100).unwrap();
        let z0 = Array3::from_elem((2, 3, 3), 0.7);
        let zero = Array3::zeros((2, 3, 3));
        let zt = s.add_noise(&z0, &zero, 10).unwrap();
        let ab = s.alpha_bar(10);
        assert!((zt[[0, 0, 0]] - 0.7 * ab.sqrt()).abs() < 1e-15);
        let eps = Array3::from_elem((2, 3, 3), 1.0);
        let zt = s.add_noise(&zero, &eps, 100).unwrap();
        assert!((zt[[0, 0, 0]] - (1.0 - s.alpha_bar(100)).sqrt()).abs() < 1e-15);
        assert!(s.add_noise(&z0, &eps, 0).is_err());
        assert!(s.add_noise(&z0, &eps, 101).is_err());
    }

    #[test]
    fn forward_noising_preserves_variance() {
        let s = make_schedule(1000).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let n = 10_000usize;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let t = 1 + (i * 997) % 1000;
            let z0: f64 = StandardNormal.sample(&mut rng);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let ab = s.alpha_bar(t);
            values.push(ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn model_config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.validate().unwrap();
        cfg.image_size = (20, 64);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig { unet: UNetConfig::micro(), image_size: (16, 16), ..Default::default() };
        cfg.validate().unwrap();
        cfg.unet.channel_multipliers = vec![1, 2, 4, 8];
        assert!(cfg.validate().is_err());
    }
}
