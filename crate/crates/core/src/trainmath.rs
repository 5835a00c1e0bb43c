//! Forward-value training numerics: losses, batch-hard mining, batch
//! composition and the learning-rate schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{DistanceMatrix, Domain, SampleMeta};

/// Default label-smoothing strength.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Cross entropy against the smoothed target
/// `q = (1 - eps + eps / N)` on the true class, `eps / N` elsewhere.
pub fn label_smooth_ce(
    logits: &[f64],
    true_class: usize,
    epsilon: f64,
    n_classes: usize,
) -> Result<f64> {
    if logits.len() != n_classes || n_classes == 0 {
        return Err(Error::DimensionMismatch {
            left: logits.len(),
            right: n_classes,
        });
    }
    if true_class >= n_classes {
        return Err(Error::IndexOutOfRange {
            index: true_class,
            len: n_classes,
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::param(format!("epsilon = {epsilon} outside [0, 1)")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("logits must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let off = epsilon / n_classes as f64;
    let on = 1.0 - epsilon + off;
    let loss: f64 = logits
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let q = if k == true_class { on } else { off };
            -q * (x - log_norm)
        })
        .sum();
    Ok(loss.max(0.0))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Soft-margin triplet loss `softplus(d_ap - d_an)`.
pub fn soft_margin_triplet(d_ap: f64, d_an: f64) -> Result<f64> {
    if !(d_ap.is_finite() && d_an.is_finite()) || d_ap < 0.0 || d_an < 0.0 {
        return Err(Error::param(format!(
            "triplet distances must be finite and >= 0, got ({d_ap}, {d_an})"
        )));
    }
    Ok(softplus(d_ap - d_an))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardTriplet {
    pub anchor: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Hardest positive and hardest negative for every eligible anchor.
///
/// Samples flagged `negatives_only` are never anchors or positives but do
/// count as negatives for everyone else.
pub fn batch_hard_triplets(
    dist: &DistanceMatrix,
    labels: &[i64],
    negatives_only: &[bool],
) -> Result<Vec<HardTriplet>> {
    let n = labels.len();
    if dist.shape() != (n, n) || negatives_only.len() != n || !dist.is_self() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} batch distance matrix for {n} labels and {} flags",
            dist.shape(),
            negatives_only.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for a in (0..n).filter(|&a| !negatives_only[a]) {
        let mut d_ap: Option<f64> = None;
        let mut d_an: Option<f64> = None;
        for j in (0..n).filter(|&j| j != a) {
            let d = dist.get(a, j) as f64;
            if labels[j] == labels[a] {
                if !negatives_only[j] {
                    d_ap = Some(d_ap.map_or(d, |v| v.max(d)));
                }
            } else {
                d_an = Some(d_an.map_or(d, |v| v.min(d)));
            }
        }
        let d_ap = d_ap.ok_or_else(|| {
            Error::InsufficientSamples(format!(
                "class {} has no positive for anchor {a}",
                labels[a]
            ))
        })?;
        let d_an = d_an.ok_or_else(|| {
            Error::InsufficientSamples(format!("anchor {a} has no negative in the batch"))
        })?;
        out.push(HardTriplet {
            anchor: a,
            d_ap,
            d_an,
        });
    }
    Ok(out)
}

/// Mean soft-margin loss over mined triplets.
pub fn batch_triplet_loss(triplets: &[HardTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in triplets {
        sum += soft_margin_triplet(t.d_ap, t.d_an)?;
    }
    Ok(sum / triplets.len() as f64)
}

/// Linear warmup from 0.1x followed by step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 0.02,
            warmup_epochs: 10,
            decay_epochs: vec![24, 48],
            decay_factor: 0.1,
            total_epochs: 60,
        }
    }
}

const WARMUP_START: f64 = 0.1;

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::param("base_lr must be > 0"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::param("decay_factor must be > 0"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("decay epochs must be strictly increasing"));
        }
        if self
            .decay_epochs
            .last()
            .is_some_and(|&e| e >= self.total_epochs)
        {
            return Err(Error::param("decay epochs must precede total_epochs"));
        }
        Ok(())
    }

    /// Learning rate at a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch < 1 || epoch > self.total_epochs {
            return Err(Error::param(format!(
                "epoch {epoch} outside 1..={}",
                self.total_epochs
            )));
        }
        if epoch <= self.warmup_epochs && self.warmup_epochs > 1 {
            let t = (epoch - 1) as f64 / (self.warmup_epochs - 1) as f64;
            return Ok(self.base_lr * (WARMUP_START + (1.0 - WARMUP_START) * t));
        }
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok(self.base_lr * self.decay_factor.powi(decays as i32))
    }
}

pub fn lr_at(epoch: usize, schedule: &LrSchedule) -> Result<f64> {
    schedule.lr_at(epoch)
}

/// P identities x K instances per mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPolicy {
    pub p_identities: usize,
    pub k_instances: usize,
    /// Probability that a batch is drawn from the target domain.
    pub target_batch_ratio: f64,
    /// Fraction of CamStyle rows within a batch.
    pub camstyle_ratio: f64,
    /// Draw `round(target_batch_ratio * P)` identities from the target domain
    /// and the rest from the source domain in every batch, instead of picking
    /// one domain per batch.
    #[serde(default)]
    pub mixed_domain: bool,
}

impl BatchPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.p_identities < 2 || self.k_instances < 2 {
            return Err(Error::param("batch-hard mining needs P >= 2 and K >= 2"));
        }
        for (name, v) in [
            ("target_batch_ratio", self.target_batch_ratio),
            ("camstyle_ratio", self.camstyle_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct ClassRows {
    original: Vec<usize>,
    camstyle: Vec<usize>,
}

fn pick_classes<'a>(
    pool: &'a BTreeMap<(Domain, i64), ClassRows>,
    domain: Domain,
    count: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a ClassRows>> {
    let eligible: Vec<&ClassRows> = pool
        .iter()
        .filter(|((d, _), rows)| *d == domain && rows.original.len() + rows.camstyle.len() >= k)
        .map(|(_, rows)| rows)
        .collect();
    if eligible.len() < count {
        return Err(Error::InsufficientSamples(format!(
            "{} domain has {} classes with >= {k} samples, need {count}",
            domain,
            eligible.len()
        )));
    }
    Ok(eligible.choose_multiple(rng, count).copied().collect())
}

/// Samples one mini-batch of `P * K` row positions into `meta`.
///
/// Classes are the `pid` values (use pseudo labels for the target domain);
/// rows with `pid < 0` are ignored. The CamStyle share is the achievable count
/// closest to `camstyle_ratio * P * K`.
pub fn compose_batch(meta: &[SampleMeta], policy: &BatchPolicy, seed: u64) -> Result<Vec<usize>> {
    policy.validate()?;
    let (p, k) = (policy.p_identities, policy.k_instances);
    let mut pool: BTreeMap<(Domain, i64), ClassRows> = BTreeMap::new();
    for (row, m) in meta.iter().enumerate().filter(|(_, m)| m.pid >= 0) {
        let entry = pool.entry((m.domain, m.pid)).or_default();
        if m.camstyle {
            entry.camstyle.push(row);
        } else {
            entry.original.push(row);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = if policy.mixed_domain {
        let n_target = ((policy.target_batch_ratio * p as f64).round() as usize).min(p);
        let mut chosen = pick_classes(&pool, Domain::Source, p - n_target, k, &mut rng)?;
        chosen.extend(pick_classes(&pool, Domain::Target, n_target, k, &mut rng)?);
        chosen
    } else {
        let domain = if rng.gen::<f64>() < policy.target_batch_ratio {
            Domain::Target
        } else {
            Domain::Source
        };
        pick_classes(&pool, domain, p, k, &mut rng)?
    };

    let lo: Vec<usize> = classes
        .iter()
        .map(|c| k.saturating_sub(c.original.len()))
        .collect();
    let hi: Vec<usize> = classes.iter().map(|c| c.camstyle.len().min(k)).collect();
    let wanted = (policy.camstyle_ratio * (p * k) as f64).round() as usize;
    let target = wanted.clamp(lo.iter().sum(), hi.iter().sum());
    let mut alloc = lo.clone();
    let mut remaining = target - lo.iter().sum::<usize>();
    while remaining > 0 {
        for (a, h) in alloc.iter_mut().zip(&hi) {
            if remaining > 0 && *a < *h {
                *a += 1;
                remaining -= 1;
            }
        }
    }

    let mut batch = Vec::with_capacity(p * k);
    for (class, n_cam) in classes.iter().zip(alloc) {
        batch.extend(class.camstyle.choose_multiple(&mut rng, n_cam));
        batch.extend(class.original.choose_multiple(&mut rng, k - n_cam));
    }
    Ok(batch)
}
