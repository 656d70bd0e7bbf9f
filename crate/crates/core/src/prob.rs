//! Log-space discrete distributions.
//!
//! A [`Dist`] pairs an ordered support of string ids with natural-log
//! probabilities. Zero-probability items stay in the support as `-inf`, so
//! rows that describe the same vocabulary or the same set of images always
//! line up index for index.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Tolerance on `logsumexp(logp)` accepted by [`Dist::from_normalized`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Shared, immutable support. Cloning is a reference-count bump.
pub type Support = Arc<[String]>;

/// Build a [`Support`] from anything yielding strings.
pub fn support<I, S>(ids: I) -> Support
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ids.into_iter().map(Into::into).collect::<Vec<_>>().into()
}

/// Numerically stable `ln Σ exp(x)`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    support: Support,
    logp: Vec<f64>,
}

fn check_support(support: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(support.len());
    for id in support {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidDistribution(format!("duplicate support id `{id}`")));
        }
    }
    Ok(())
}

fn check_logits(logits: &[f64], support: &[String]) -> Result<()> {
    if logits.len() != support.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} logits for a support of {}",
            logits.len(),
            support.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
        return Err(Error::InvalidDistribution(format!("logit {bad} is not allowed")));
    }
    Ok(())
}

impl Dist {
    /// Normalize arbitrary log-weights into a distribution.
    pub fn log_normalize(logits: Vec<f64>, support: impl Into<Support>) -> Result<Self> {
        let support = support.into();
        check_logits(&logits, &support)?;
        check_support(&support)?;
        let mut logp = logits;
        let z = log_sum_exp(&logp);
        if z == f64::NEG_INFINITY {
            return Err(Error::AllMassZero);
        }
        for x in &mut logp {
            *x -= z;
        }
        Ok(Dist { support, logp })
    }

    /// Accept log-probabilities that are already normalized within `tol`,
    /// then renormalize exactly. Larger deviations are rejected.
    pub fn from_normalized(logp: Vec<f64>, support: impl Into<Support>, tol: f64) -> Result<Self> {
        let support = support.into();
        check_logits(&logp, &support)?;
        let z = log_sum_exp(&logp);
        if z == f64::NEG_INFINITY {
            return Err(Error::AllMassZero);
        }
        let mass = z.exp();
        if (mass - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!(
                "total mass {mass} deviates from 1 by more than {tol}"
            )));
        }
        Self::log_normalize(logp, support)
    }

    pub fn uniform(support: impl Into<Support>) -> Result<Self> {
        let support = support.into();
        let n = support.len();
        Self::log_normalize(vec![0.0; n], support)
    }

    pub fn point_mass(support: impl Into<Support>, index: usize) -> Result<Self> {
        let support = support.into();
        if index >= support.len() {
            return Err(Error::InvalidDistribution(format!(
                "point mass index {index} out of range"
            )));
        }
        let mut logits = vec![f64::NEG_INFINITY; support.len()];
        logits[index] = 0.0;
        Self::log_normalize(logits, support)
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.logp[index].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|x| x.exp()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.support.iter().position(|s| s == id)
    }

    pub fn logp_of(&self, id: &str) -> Option<f64> {
        self.index_of(id).map(|i| self.logp[i])
    }

    /// Index of the most probable item; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.logp.iter().enumerate() {
            if x > self.logp[best] {
                best = i;
            }
        }
        best
    }

    /// Membership mask aligned with the support. Fails if an id in `keep`
    /// is not in the support.
    pub fn mask<S: AsRef<str> + Ord>(&self, keep: &BTreeSet<S>) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for id in keep {
            let id = id.as_ref();
            let i = self
                .index_of(id)
                .ok_or_else(|| Error::InvalidDistribution(format!("`{id}` is not in the support")))?;
            mask[i] = true;
        }
        Ok(mask)
    }

    /// `ln Σ_{i ∈ mask} p_i`.
    pub fn log_mass_masked(&self, mask: &[bool]) -> f64 {
        let kept: Vec<f64> = self
            .logp
            .iter()
            .zip(mask)
            .filter_map(|(&x, &m)| m.then_some(x))
            .collect();
        log_sum_exp(&kept)
    }

    pub fn mask_renormalize_masked(&self, mask: &[bool]) -> Result<Dist> {
        let logits = self
            .logp
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { x } else { f64::NEG_INFINITY })
            .collect();
        Dist::log_normalize(logits, self.support.clone())
    }

    /// Total variation distance to another distribution over the same support.
    pub fn total_variation(&self, other: &Dist) -> f64 {
        debug_assert_eq!(self.support, other.support);
        0.5 * self
            .logp
            .iter()
            .zip(&other.logp)
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .sum::<f64>()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(d: &Dist) -> f64 {
    let h: f64 = d.logp.iter().filter(|x| x.is_finite()).map(|&x| -x.exp() * x).sum();
    h.max(0.0)
}

/// Restrict `d` to `keep` and renormalize. Items outside `keep` remain in
/// the support with zero probability.
pub fn mask_renormalize<S: AsRef<str> + Ord>(d: &Dist, keep: &BTreeSet<S>) -> Result<Dist> {
    d.mask_renormalize_masked(&d.mask(keep)?)
}

/// Probability mass `d` assigns to `keep`.
pub fn total_mass<S: AsRef<str> + Ord>(d: &Dist, keep: &BTreeSet<S>) -> Result<f64> {
    Ok(d.log_mass_masked(&d.mask(keep)?).exp())
}
