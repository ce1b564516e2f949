//! Three Bernoulli erasure channels (legitimate, eavesdropper, acknowledgment)
//! and the acknowledgment-blocking attacker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, format!("{p} is outside [0, 1]")));
    }
    Ok(())
}

/// Per-step success probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Legitimate receiver.
    pub alpha: f64,
    /// Acknowledgment channel back to the sensor.
    pub alpha_a: f64,
    /// Eavesdropper.
    pub alpha_e: f64,
}

impl ChannelParams {
    pub fn new(alpha: f64, alpha_a: f64, alpha_e: f64) -> Result<Self> {
        check_probability("alpha", alpha)?;
        check_probability("alpha_a", alpha_a)?;
        check_probability("alpha_e", alpha_e)?;
        Ok(Self {
            alpha,
            alpha_a,
            alpha_e,
        })
    }

    /// Probability that the reference time advances at a step with no attacker, `α·α_a`.
    pub fn ack_success_rate(&self) -> f64 {
        self.alpha * self.alpha_a
    }

    /// Same under selective blocking, `α·α_a·α_e`.
    pub fn ack_success_rate_under_attack(&self) -> f64 {
        self.alpha * self.alpha_a * self.alpha_e
    }

    /// Ages are only informative when acknowledgment success is neither impossible nor certain.
    pub fn check_detectable(&self) -> Result<()> {
        let rho = self.ack_success_rate();
        if rho <= 0.0 || rho >= 1.0 {
            return Err(Error::config(
                "alpha, alpha_a",
                format!("product {rho} must lie in (0, 1) for change detection"),
            ));
        }
        Ok(())
    }
}

/// Raw channel draws `(γ, γᵉ, γᵃ)` for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDraw {
    pub gamma: bool,
    pub gamma_e: bool,
    pub gamma_a: bool,
}

/// One uniform draw compared against `p`. Always consumes exactly one value,
/// so a stream stays aligned when `p` changes.
pub fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// Three independent draws from a single stream, in the order γ, γᵉ, γᵃ.
pub fn sample_step<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> ChannelDraw {
    let gamma = bernoulli(params.alpha, rng);
    let gamma_e = bernoulli(params.alpha_e, rng);
    let gamma_a = bernoulli(params.alpha_a, rng);
    ChannelDraw {
        gamma,
        gamma_e,
        gamma_a,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Eavesdrops only.
    Passive,
    /// Erases every acknowledgment once active.
    #[serde(alias = "block_all")]
    BlockAll,
    /// Erases an acknowledgment only when the legitimate receiver got the
    /// packet and the eavesdropper did not.
    Selective,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Passive => "passive",
            AttackKind::BlockAll => "block-all",
            AttackKind::Selective => "selective",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passive" => Ok(AttackKind::Passive),
            "block-all" | "block_all" => Ok(AttackKind::BlockAll),
            "selective" => Ok(AttackKind::Selective),
            other => Err(Error::config(
                "attacker",
                format!("unknown kind {other:?} (passive, selective, block-all)"),
            )),
        }
    }
}

/// An attacker that starts acting at legitimate receipt `activation_receipt` (λ ≥ 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackerPolicy {
    pub kind: AttackKind,
    pub activation_receipt: u64,
}

impl AttackerPolicy {
    pub fn new(kind: AttackKind, activation_receipt: u64) -> Result<Self> {
        if activation_receipt < 1 {
            return Err(Error::config("activation_receipt", "must be at least 1"));
        }
        Ok(Self {
            kind,
            activation_receipt,
        })
    }

    pub fn is_active(&self, receipt_index: u64) -> bool {
        receipt_index >= self.activation_receipt
    }
}

/// Whether the attacker erases this step's acknowledgment.
///
/// `receipt_index` counts legitimate receipts so far, including the current
/// step when `gamma` is set.
pub fn decide_block(policy: &AttackerPolicy, receipt_index: u64, gamma: bool, gamma_e: bool) -> bool {
    if !policy.is_active(receipt_index) {
        return false;
    }
    match policy.kind {
        AttackKind::Passive => false,
        AttackKind::BlockAll => true,
        AttackKind::Selective => gamma && !gamma_e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub k: u64,
    pub gamma: bool,
    pub gamma_e: bool,
    pub gamma_a: bool,
    pub blocked: bool,
    pub ack_delivered: bool,
}

impl StepOutcome {
    /// Acknowledgments exist only for received packets; a blocked one is
    /// erased silently, invisible to both endpoints.
    pub fn resolve(k: u64, draw: ChannelDraw, blocked: bool) -> Self {
        Self {
            k,
            gamma: draw.gamma,
            gamma_e: draw.gamma_e,
            gamma_a: draw.gamma_a,
            blocked,
            ack_delivered: draw.gamma && draw.gamma_a && !blocked,
        }
    }
}

/// Last acknowledged time after this step.
pub fn update_ack_reference(t_k: u64, outcome: &StepOutcome) -> u64 {
    if outcome.ack_delivered {
        outcome.k
    } else {
        t_k
    }
}

/// When the change happens in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// At a fixed process time; the change receipt is the first receipt at or after it.
    Step(u64),
    /// At a fixed legitimate receipt index λ ≥ 1.
    Receipt(u64),
    /// λ drawn from a geometric prior with the given success rate.
    Geometric(f64),
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::Step(_) => Ok(()),
            Activation::Receipt(l) if l >= 1 => Ok(()),
            Activation::Receipt(_) => Err(Error::config("activation_receipt", "must be at least 1")),
            Activation::Geometric(rho) if rho > 0.0 && rho < 1.0 => Ok(()),
            Activation::Geometric(rho) => Err(Error::config(
                "activation_rate",
                format!("{rho} must lie in (0, 1)"),
            )),
        }
    }

    /// Resolves receipt-indexed modes up front. `Step` activation resolves
    /// during the run, so this returns `None` for it.
    pub fn draw_receipt<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u64> {
        match *self {
            Activation::Step(_) => None,
            Activation::Receipt(l) => Some(l),
            Activation::Geometric(rho) => {
                // inversion: P(λ > m) = (1 - ρ)^m
                let u: f64 = 1.0 - rng.random::<f64>();
                let m = (u.ln() / (-rho).ln_1p()).floor() + 1.0;
                Some(if m.is_finite() && m < u64::MAX as f64 {
                    m.max(1.0) as u64
                } else {
                    u64::MAX
                })
            }
        }
    }
}
