use rand::Rng;
use serde::{Deserialize, Serialize};

/// Linear warmup from 0 to `nominal` over `warmup` generator steps.
pub fn warmup_lr(nominal: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        return nominal;
    }
    nominal * (step as f64 / warmup as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropRates {
    pub cls_only: f64,
    pub uni_only: f64,
    pub both: f64,
}

impl Default for DropRates {
    fn default() -> Self {
        DropRates { cls_only: 0.10, uni_only: 0.10, both: 0.05 }
    }
}

impl DropRates {
    pub fn is_valid(&self) -> bool {
        let r = [self.cls_only, self.uni_only, self.both];
        r.iter().all(|v| (0.0..=1.0).contains(v)) && r.iter().sum::<f64>() <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Drops {
    pub cls: bool,
    pub uni: bool,
}

/// One draw of the four exclusive outcomes: class only, tokens only, both, neither.
pub fn sample_conditioning_drops(rates: &DropRates, rng: &mut impl Rng) -> Drops {
    let u: f64 = rng.random();
    if u < rates.cls_only {
        Drops { cls: true, uni: false }
    } else if u < rates.cls_only + rates.uni_only {
        Drops { cls: false, uni: true }
    } else if u < rates.cls_only + rates.uni_only + rates.both {
        Drops { cls: true, uni: true }
    } else {
        Drops { cls: false, uni: false }
    }
}
