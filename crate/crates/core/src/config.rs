//! Full set of scoring hyperparameters and their fingerprint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MsdError, Result};
use crate::scoring::FusionConfig;
use crate::sphere::RngState;
use crate::vmf::EmConfig;

/// Caption-length regime selecting the mixture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `(K_img, K_txt) = (3, 2)`.
    Short,
    /// `(K_img, K_txt) = (5, 3)`.
    Long,
}

impl Profile {
    pub fn mixture_sizes(self) -> (usize, usize) {
        match self {
            Profile::Short => (3, 2),
            Profile::Long => (5, 3),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = MsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Profile::Short),
            "long" => Ok(Profile::Long),
            other => Err(MsdError::InvalidConfig(format!("profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fusion: FusionConfig,
    pub em_img: EmConfig,
    pub em_txt: EmConfig,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (k_img, k_txt) = profile.mixture_sizes();
        Self {
            fusion: FusionConfig::default(),
            em_img: EmConfig::new(k_img),
            em_txt: EmConfig::new(k_txt),
        }
    }

    pub fn short() -> Self {
        Self::for_profile(Profile::Short)
    }

    pub fn long() -> Self {
        Self::for_profile(Profile::Long)
    }

    /// Same base seed for both modalities.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.em_img.seed = RngState::new(seed);
        self.em_txt.seed = RngState::new(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.em_img.validate()?;
        self.em_txt.validate()?;
        if self.em_img.kappa != self.em_txt.kappa {
            return Err(MsdError::KappaMismatch {
                left: self.em_img.kappa,
                right: self.em_txt.kappa,
            });
        }
        Ok(())
    }

    /// Seeds bound to one manifest record: the image mixture uses
    /// `seed/<id>/image`, captions use `seed/<id>/text` (further split per
    /// candidate by the batch scorer).
    pub fn for_sample(&self, sample_id: &str) -> Self {
        let mut out = self.clone();
        out.em_img.seed = self.em_img.seed.derive(&format!("{sample_id}/image"));
        out.em_txt.seed = self.em_txt.seed.derive(&format!("{sample_id}/text"));
        out
    }

    /// Canonical `key=value` lines, one per hyperparameter, in fixed order.
    pub fn canonical(&self) -> String {
        let f = &self.fusion;
        let em = |tag: &str, c: &EmConfig| {
            format!(
                "{tag}.k={}\n{tag}.kappa={:e}\n{tag}.iterations={}\n{tag}.reinit_threshold={:e}\n{tag}.seed={}\n",
                c.k, c.kappa, c.iterations, c.reinit_threshold, c.seed.seed
            )
        };
        format!(
            "alpha={:e}\nxi={:e}\nl0={:e}\ntau_l={:e}\nmode={:?}\n{}{}rng={}\n",
            f.alpha,
            f.xi,
            f.beta.l0,
            f.beta.tau_l,
            f.mode,
            em("em_img", &self.em_img),
            em("em_txt", &self.em_txt),
            RngState::ALGORITHM,
        )
    }

    /// First 16 hex digits of SHA-256 over [`canonical`](Self::canonical).
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::short()
    }
}
