//! Hyperparameter resolution: profile defaults, then the `--config` file,
//! then explicit flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use msd_core::scoring::DivergenceMode;
use msd_core::{MsdError, PipelineConfig, Profile};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// `key=value` file; keys are the long flag names with `_` or `-`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Mixture sizes: short = (3, 2), long = (5, 3).
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Shared vMF concentration.
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    /// EM iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Fusion weight.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Softmax temperature over candidate cosines.
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    /// Caption length at which both KL directions weigh 0.5.
    #[arg(long, global = true)]
    pub l0: Option<f64>,
    /// Width of the length sigmoid.
    #[arg(long, global = true)]
    pub tau_l: Option<f64>,
    /// Image mixture size (overrides the profile).
    #[arg(long, global = true)]
    pub k_img: Option<usize>,
    /// Caption mixture size (overrides the profile).
    #[arg(long, global = true)]
    pub k_txt: Option<usize>,
    /// Component mass below which EM reinitializes a mean.
    #[arg(long, global = true)]
    pub reinit_threshold: Option<f64>,
    /// Divergence fed to the correction: bikl, img_to_txt or txt_to_img.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Preference tie band for agreement.
    #[arg(long, global = true)]
    pub eps_tie: Option<f64>,
    /// Base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "MSD_THREADS")]
    pub threads: Option<usize>,
}

/// Resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub profile: Profile,
    pub pipeline: PipelineConfig,
    pub eps_tie: f64,
    pub seed: u64,
    pub threads: usize,
}

fn invalid(msg: String) -> MsdError {
    MsdError::InvalidConfig(msg)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, origin: &str) -> Result<T, MsdError> {
    value
        .parse()
        .map_err(|_| invalid(format!("{origin}: `{key}` cannot take value `{value}`")))
}

impl ConfigArgs {
    /// Fills unset fields from `key=value` text. `#` starts a comment.
    pub fn merge_file_text(&mut self, text: &str, origin: &str) -> Result<(), MsdError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{at}: expected key=value")))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            macro_rules! fill {
                ($field:ident) => {
                    if self.$field.is_none() {
                        self.$field = Some(parse(&key, value, &at)?);
                    }
                };
            }
            match key.as_str() {
                "profile" => fill!(profile),
                "kappa" => fill!(kappa),
                "iterations" => fill!(iterations),
                "alpha" => fill!(alpha),
                "xi" => fill!(xi),
                "l0" => fill!(l0),
                "tau_l" => fill!(tau_l),
                "k_img" => fill!(k_img),
                "k_txt" => fill!(k_txt),
                "reinit_threshold" => fill!(reinit_threshold),
                "mode" => fill!(mode),
                "eps_tie" => fill!(eps_tie),
                "seed" => fill!(seed),
                "threads" => fill!(threads),
                other => return Err(invalid(format!("{at}: unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Settings, MsdError> {
        let mut args = self.clone();
        if let Some(path) = &self.config {
            let text = read_config(path)?;
            args.merge_file_text(&text, &path.display().to_string())?;
        }
        args.build()
    }

    fn build(&self) -> Result<Settings, MsdError> {
        let profile: Profile = self.profile.as_deref().unwrap_or("short").parse()?;
        let seed = self.seed.unwrap_or(0);
        let mut p = PipelineConfig::for_profile(profile).with_seed(seed);
        for em in [&mut p.em_img, &mut p.em_txt] {
            if let Some(k) = self.kappa {
                em.kappa = k;
            }
            if let Some(m) = self.iterations {
                em.iterations = m;
            }
            if let Some(r) = self.reinit_threshold {
                em.reinit_threshold = r;
            }
        }
        if let Some(k) = self.k_img {
            p.em_img.k = k;
        }
        if let Some(k) = self.k_txt {
            p.em_txt.k = k;
        }
        if let Some(a) = self.alpha {
            p.fusion.alpha = a;
        }
        if let Some(x) = self.xi {
            p.fusion.xi = x;
        }
        if let Some(l) = self.l0 {
            p.fusion.beta.l0 = l;
        }
        if let Some(t) = self.tau_l {
            p.fusion.beta.tau_l = t;
        }
        if let Some(m) = &self.mode {
            p.fusion.mode = m.parse::<DivergenceMode>()?;
        }
        p.validate()?;
        let eps_tie = self.eps_tie.unwrap_or(1e-4);
        if !(eps_tie >= 0.0 && eps_tie.is_finite()) {
            return Err(MsdError::OutOfRange {
                what: "eps_tie",
                value: eps_tie,
            });
        }
        Ok(Settings {
            profile,
            pipeline: p,
            eps_tie,
            seed,
            threads: self.threads.unwrap_or(0),
        })
    }
}

fn read_config(path: &Path) -> Result<String, MsdError> {
    if !path.is_file() {
        return Err(MsdError::MissingPath(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

impl Settings {
    /// Header printed to stderr at run start.
    pub fn describe(&self) -> String {
        format!(
            "profile={}\n{}eps_tie={:e}\nthreads={}\nfingerprint={}\n",
            match self.profile {
                Profile::Short => "short",
                Profile::Long => "long",
            },
            self.pipeline.canonical(),
            self.eps_tie,
            self.threads,
            self.pipeline.fingerprint()
        )
    }
}
