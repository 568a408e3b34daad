//! Latent factor models for mixed continuous/binary outcomes.
//!
//! Variants:
//! - `SAT`: unrestricted covariance for the continuous block; binary items
//!   independent given the group intercepts.
//! - `IND`: diagonal covariance for the continuous block; binary items independent.
//! - `EZ1`/`EZ2`: two-factor CFA (factor 1 on continuous items, factor 2 on
//!   binary items) with independent / correlated factors.
//! - `AZ1`: `EZ2` plus residual random effects on the binary items with an
//!   inverse-Wishart covariance.
//! - `AZ2`: `AZ1` plus shrunk cross-loadings.
//!
//! Every variant has a pooled form (`-p`) that shares the covariance
//! structure across groups; intercepts are always group specific.

mod likelihood;
mod posterior;
mod prior;
mod sign;
mod theta;
mod transform;

pub use likelihood::{
    loglik_binary_conditional, loglik_continuous_marginal, marginal_covariance,
    marginal_blocks, row_loglik_marginal, ContinuousBlock,
};
pub use posterior::PosteriorTarget;
pub use prior::{log_prior, lkj_log_normalizer, Prior, PriorConfig};
pub use sign::{sign_postprocess, sign_postprocess_one};
pub use theta::{BlockGrad, CovBlock, Theta, ThetaGrad};
pub use transform::{Layout, Unpacked};

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Sat,
    Ind,
    Ez1,
    Ez2,
    Az1,
    Az2,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sat,
        Variant::Ind,
        Variant::Ez1,
        Variant::Ez2,
        Variant::Az1,
        Variant::Az2,
    ];

    pub fn has_factors(self) -> bool {
        !matches!(self, Variant::Sat | Variant::Ind)
    }

    pub fn correlated_factors(self) -> bool {
        matches!(self, Variant::Ez2 | Variant::Az1 | Variant::Az2)
    }

    pub fn has_residual_effects(self) -> bool {
        matches!(self, Variant::Az1 | Variant::Az2)
    }

    pub fn has_cross_loadings(self) -> bool {
        matches!(self, Variant::Az2)
    }

    fn label(self) -> &'static str {
        match self {
            Variant::Sat => "SAT",
            Variant::Ind => "IND",
            Variant::Ez1 => "EZ1",
            Variant::Ez2 => "EZ2",
            Variant::Az1 => "AZ1",
            Variant::Az2 => "AZ2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
}

/// Role of one entry of the loading matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadingKind {
    Zero,
    /// Fixed scale anchor.
    Fixed(f64),
    Principal,
    /// Shrunk cross-loading (AZ2 only).
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub pooled: bool,
    pub p_c: usize,
    pub p_b: usize,
    pub n_groups: usize,
    pub link: Link,
}

/// Which latent quantities a subject carries in the augmented posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentFactors {
    /// Factors integrated out analytically.
    None,
    /// Only the binary-item factor is kept; the continuous factor is
    /// integrated out conditionally on it.
    BinaryFactor,
    /// Both factors kept (cross-loadings tie binary items to factor 1).
    Both,
}

impl ModelSpec {
    pub fn new(variant: Variant, pooled: bool, p_c: usize, p_b: usize, n_groups: usize) -> Result<Self> {
        if p_c + p_b == 0 {
            return Err(Error::Model("model needs at least one item".into()));
        }
        if n_groups == 0 {
            return Err(Error::Model("model needs at least one group".into()));
        }
        Ok(ModelSpec {
            variant,
            pooled,
            p_c,
            p_b,
            n_groups,
            link: Link::Logit,
        })
    }

    /// Parses names such as `EZ1-p`, `sat`, `AZ2`.
    pub fn parse(name: &str, p_c: usize, p_b: usize, n_groups: usize) -> Result<Self> {
        let (variant, pooled) = parse_variant(name)?;
        ModelSpec::new(variant, pooled, p_c, p_b, n_groups)
    }

    pub fn p(&self) -> usize {
        self.p_c + self.p_b
    }

    /// Number of factors.
    pub fn k(&self) -> usize {
        if self.variant.has_factors() {
            2
        } else {
            0
        }
    }

    pub fn n_blocks(&self) -> usize {
        if self.pooled {
            1
        } else {
            self.n_groups
        }
    }

    pub fn block_of(&self, group: usize) -> usize {
        if self.pooled {
            0
        } else {
            group
        }
    }

    pub fn loading_kind(&self, item: usize, factor: usize) -> LoadingKind {
        if !self.variant.has_factors() {
            return LoadingKind::Zero;
        }
        let continuous = item < self.p_c;
        match (factor, continuous) {
            (0, true) if item == 0 => LoadingKind::Fixed(1.0),
            (0, true) | (1, false) => LoadingKind::Principal,
            _ if self.variant.has_cross_loadings() => LoadingKind::Cross,
            _ => LoadingKind::Zero,
        }
    }

    /// Item whose loading fixes the sign of `factor`.
    pub fn anchor(&self, factor: usize) -> Option<usize> {
        match factor {
            0 if self.p_c > 0 => Some(0),
            1 if self.p_b > 0 => Some(self.p_c),
            _ => None,
        }
    }

    pub fn latent_factors(&self) -> LatentFactors {
        if !self.variant.has_factors() || self.p_b == 0 {
            LatentFactors::None
        } else if self.variant.has_cross_loadings() {
            LatentFactors::Both
        } else {
            LatentFactors::BinaryFactor
        }
    }

    /// Latent coordinates per subject in the augmented posterior.
    pub fn latent_dim(&self) -> usize {
        let z = match self.latent_factors() {
            LatentFactors::None => 0,
            LatentFactors::BinaryFactor => 1,
            LatentFactors::Both => 2,
        };
        let u = if self.variant.has_residual_effects() { self.p_b } else { 0 };
        z + u
    }

    pub fn name(&self) -> String {
        if self.pooled {
            format!("{}-p", self.variant.label())
        } else {
            self.variant.label().to_string()
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SAT" => Ok(Variant::Sat),
            "IND" => Ok(Variant::Ind),
            "EZ1" => Ok(Variant::Ez1),
            "EZ2" => Ok(Variant::Ez2),
            "AZ1" => Ok(Variant::Az1),
            "AZ2" => Ok(Variant::Az2),
            other => Err(Error::Model(format!("unknown model variant `{other}`"))),
        }
    }
}

pub fn parse_variant(name: &str) -> Result<(Variant, bool)> {
    let trimmed = name.trim();
    let (base, pooled) = match trimmed.strip_suffix("-p").or_else(|| trimmed.strip_suffix("-P")) {
        Some(b) => (b, true),
        None => (trimmed, false),
    };
    Ok((base.parse()?, pooled))
}
