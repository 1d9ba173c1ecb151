//! Condition dropout for training and classifier-free guidance combiners for
//! inference, over a garment condition and a text condition.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceScales {
    pub s_g: f64,
    pub s_t: f64,
}

impl GuidanceScales {
    pub fn new(s_g: f64, s_t: f64) -> Result<Self> {
        for (name, v) in [("s_g", s_g), ("s_t", s_t)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "guidance scale {name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(GuidanceScales { s_g, s_t })
    }
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales { s_g: 2.5, s_t: 7.5 }
    }
}

/// How the branch predictions are combined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    /// Both conditions as one: `e00 + s_t * (eGT - e00)`.
    Single,
    /// Each scale on the delta of its own condition, both relative to `e00`.
    Independent,
    /// Nested: garment delta from `e00`, text delta from `eG0`.
    #[default]
    Joint,
    /// The independent form with the scales attached as literally printed:
    /// `s_g` on the text delta, `s_t` on the garment delta.
    SwappedScales,
}

impl GuidanceMode {
    /// Condition pairs whose predictions this mode consumes, in the order the
    /// combiner expects them.
    pub fn branches(self) -> &'static [ConditionPair] {
        use ConditionPair as C;
        const NN: C = C::new(false, false);
        const NT: C = C::new(false, true);
        const GN: C = C::new(true, false);
        const GT: C = C::new(true, true);
        match self {
            GuidanceMode::Single => &[NN, GT],
            GuidanceMode::Independent | GuidanceMode::SwappedScales => &[NN, NT, GN],
            GuidanceMode::Joint => &[NN, GN, GT],
        }
    }

    /// Applies the combiner to predictions ordered as in [`Self::branches`].
    pub fn combine<S: Scalar>(self, preds: &[Tensor<S>], scales: GuidanceScales) -> Result<Tensor<S>> {
        if preds.len() != self.branches().len() {
            return Err(Error::Contract(format!(
                "{self} guidance needs {} predictions, got {}",
                self.branches().len(),
                preds.len()
            )));
        }
        match self {
            GuidanceMode::Single => cfg_single(&preds[0], &preds[1], scales.s_t),
            GuidanceMode::Independent => cfg_independent(&preds[0], &preds[1], &preds[2], scales),
            GuidanceMode::SwappedScales => cfg_independent_as_printed(&preds[0], &preds[1], &preds[2], scales),
            GuidanceMode::Joint => cfg_joint(&preds[0], &preds[1], &preds[2], scales),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::Single => "single",
            GuidanceMode::Independent => "independent",
            GuidanceMode::Joint => "joint",
            GuidanceMode::SwappedScales => "swapped-scales",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(GuidanceMode::Single),
            "independent" => Ok(GuidanceMode::Independent),
            "joint" => Ok(GuidanceMode::Joint),
            "swapped-scales" | "strict-eq5" => Ok(GuidanceMode::SwappedScales),
            other => Err(Error::Config(format!(
                "unknown guidance mode `{other}` (single, independent, joint, swapped-scales)"
            ))),
        }
    }
}

/// Presence of each condition for one training sample or inference branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConditionPair {
    pub garment_present: bool,
    pub text_present: bool,
}

impl ConditionPair {
    pub const fn new(garment_present: bool, text_present: bool) -> Self {
        ConditionPair {
            garment_present,
            text_present,
        }
    }

    pub const FULL: ConditionPair = ConditionPair::new(true, true);
}

/// Joint distribution over which conditions are replaced by their null value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPolicy {
    pub garment_only: f64,
    pub text_only: f64,
    pub both: f64,
}

impl Default for DropPolicy {
    fn default() -> Self {
        DropPolicy {
            garment_only: 0.05,
            text_only: 0.05,
            both: 0.05,
        }
    }
}

impl DropPolicy {
    pub const NEVER: DropPolicy = DropPolicy {
        garment_only: 0.0,
        text_only: 0.0,
        both: 0.0,
    };

    pub fn new(garment_only: f64, text_only: f64, both: f64) -> Result<Self> {
        let p = DropPolicy {
            garment_only,
            text_only,
            both,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.garment_only, self.text_only, self.both];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) || all.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!("invalid drop policy {self:?}")));
        }
        Ok(())
    }

    /// Probabilities of (full, garment dropped, text dropped, both dropped).
    pub fn state_probabilities(&self) -> [f64; 4] {
        [
            1.0 - self.garment_only - self.text_only - self.both,
            self.garment_only,
            self.text_only,
            self.both,
        ]
    }
}

/// One uniform draw partitioned into the four condition states.
pub fn sample_condition_mask(rng: &mut SeededRng, policy: &DropPolicy) -> ConditionPair {
    let u = rng.uniform();
    let a = policy.garment_only;
    let b = a + policy.text_only;
    let c = b + policy.both;
    if u < a {
        ConditionPair::new(false, true)
    } else if u < b {
        ConditionPair::new(true, false)
    } else if u < c {
        ConditionPair::new(false, false)
    } else {
        ConditionPair::FULL
    }
}

fn combine<S: Scalar>(parts: &[(&Tensor<S>, f64)]) -> Result<Tensor<S>> {
    let shape = parts[0].0.shape();
    for (t, _) in parts {
        if t.shape() != shape {
            return Err(Error::dim("guidance", shape, t.shape()));
        }
    }
    let n = parts[0].0.len();
    let data = (0..n)
        .map(|i| {
            parts
                .iter()
                .fold(S::zero(), |acc, (t, w)| acc + S::lit(*w) * t.data()[i])
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// `uncond + s * (cond - uncond)`.
pub fn cfg_single<S: Scalar>(eps_uncond: &Tensor<S>, eps_cond: &Tensor<S>, s: f64) -> Result<Tensor<S>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::dim("cfg_single", eps_uncond.shape(), eps_cond.shape()));
    }
    let s = S::lit(s);
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| *u + s * (*c - *u))
        .collect();
    Tensor::from_vec(eps_uncond.shape(), data)
}

fn delta_sum<S: Scalar>(base: &Tensor<S>, terms: [(&Tensor<S>, &Tensor<S>, f64); 2]) -> Result<Tensor<S>> {
    for (a, b, _) in &terms {
        for t in [a, b] {
            if t.shape() != base.shape() {
                return Err(Error::dim("guidance", base.shape(), t.shape()));
            }
        }
    }
    let [(a1, b1, s1), (a2, b2, s2)] = terms;
    let (s1, s2) = (S::lit(s1), S::lit(s2));
    let data = (0..base.len())
        .map(|i| base.data()[i] + s1 * (a1.data()[i] - b1.data()[i]) + s2 * (a2.data()[i] - b2.data()[i]))
        .collect();
    Tensor::from_vec(base.shape(), data)
}

/// `e00 + s_t * (e0T - e00) + s_g * (eG0 - e00)`.
pub fn cfg_independent<S: Scalar>(
    eps_00: &Tensor<S>,
    eps_0t: &Tensor<S>,
    eps_g0: &Tensor<S>,
    scales: GuidanceScales,
) -> Result<Tensor<S>> {
    delta_sum(eps_00, [(eps_0t, eps_00, scales.s_t), (eps_g0, eps_00, scales.s_g)])
}

/// `e00 + s_g * (e0T - e00) + s_t * (eG0 - e00)`, scales as printed.
pub fn cfg_independent_as_printed<S: Scalar>(
    eps_00: &Tensor<S>,
    eps_0t: &Tensor<S>,
    eps_g0: &Tensor<S>,
    scales: GuidanceScales,
) -> Result<Tensor<S>> {
    delta_sum(eps_00, [(eps_0t, eps_00, scales.s_g), (eps_g0, eps_00, scales.s_t)])
}

/// `e00 + s_g * (eG0 - e00) + s_t * (eGT - eG0)`.
pub fn cfg_joint<S: Scalar>(
    eps_00: &Tensor<S>,
    eps_g0: &Tensor<S>,
    eps_gt: &Tensor<S>,
    scales: GuidanceScales,
) -> Result<Tensor<S>> {
    delta_sum(eps_00, [(eps_g0, eps_00, scales.s_g), (eps_gt, eps_g0, scales.s_t)])
}

/// Weighted sum helper used by tests and reports: `sum_i w_i * t_i`.
pub fn weighted_sum<S: Scalar>(parts: &[(&Tensor<S>, f64)]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Contract("weighted_sum of nothing".into()));
    }
    combine(parts)
}
