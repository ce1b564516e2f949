//! Bayesian quickest change detection on ages of information.
//!
//! Before the intrusion the age observed at each receipt is geometric with
//! success rate `ρ₁ = α·α_a`; afterwards, with selective blocking, it is
//! geometric with `ρ₂ = α·α_a·α_e`. The change receipt λ has a geometric prior
//! with rate `ρ_i`. The no-change posterior `Ẑ_m = P(m < λ | A_1..A_m)` obeys
//!
//! ```text
//! Ẑ_m      = N_m (1 − ρ_i) b₁(A_m) Ẑ_{m−1},      Ẑ_0 = 1
//! N_m⁻¹    = b₂(A_m) + (1 − ρ_i)(b₁(A_m) − b₂(A_m)) Ẑ_{m−1}
//! ```
//!
//! and the alarm is raised at the first `m` with `Ẑ_m ≤ h`.
//!
//! The recursion is evaluated in log space. Ages under a block-all attacker
//! grow without bound, and `b₁`, `b₂` and `Ẑ` all underflow long before the
//! posterior stops carrying information.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ChannelParams;

/// `ρ (1 − ρ)^{κ−1}` for `κ ≥ 1`, zero otherwise.
pub fn geometric_pmf(rho: f64, kappa: u64) -> f64 {
    if kappa == 0 {
        return 0.0;
    }
    rho * (1.0 - rho).powf((kappa - 1) as f64)
}

/// Natural log of [`geometric_pmf`]; `-inf` outside the support.
pub fn log_geometric_pmf(rho: f64, kappa: u64) -> f64 {
    if kappa == 0 {
        return f64::NEG_INFINITY;
    }
    rho.ln() + (kappa - 1) as f64 * (-rho).ln_1p()
}

fn check_open_unit(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::config(field, format!("{v} must lie in (0, 1)")));
    }
    Ok(())
}

/// Pre-change rate `rho1`, post-change rate `rho2`, change-prior rate `rho_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricModel {
    pub rho1: f64,
    pub rho2: f64,
    pub rho_i: f64,
}

impl GeometricModel {
    pub fn new(rho1: f64, rho2: f64, rho_i: f64) -> Result<Self> {
        check_open_unit("rho1", rho1)?;
        check_open_unit("rho2", rho2)?;
        check_open_unit("rho_i", rho_i)?;
        if rho2 > rho1 {
            return Err(Error::config(
                "rho2",
                format!("post-change rate {rho2} exceeds pre-change rate {rho1}"),
            ));
        }
        Ok(Self { rho1, rho2, rho_i })
    }

    /// Model implied by the channels, with an assumed eavesdropper quality.
    /// Passing the true `α_e` gives the exact model; an upper bound on it
    /// gives the mis-specified one.
    pub fn from_channels(channels: &ChannelParams, assumed_alpha_e: f64, rho_i: f64) -> Result<Self> {
        let rho1 = channels.ack_success_rate();
        Self::new(rho1, rho1 * assumed_alpha_e, rho_i)
    }

    pub fn b1(&self, age: u64) -> f64 {
        geometric_pmf(self.rho1, age)
    }

    pub fn b2(&self, age: u64) -> f64 {
        geometric_pmf(self.rho2, age)
    }

    pub fn pre_change_mean(&self) -> f64 {
        1.0 / self.rho1
    }

    pub fn post_change_mean(&self) -> f64 {
        1.0 / self.rho2
    }
}

/// One age observation at receipt (or acknowledgment) index `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeObservation {
    pub index: u64,
    pub receipt_time: u64,
    pub age: u64,
}

/// `A_m = D_m − t_k`.
pub fn age_from_packet(index: u64, receipt_time: u64, packet_ref_time: u64) -> Result<AgeObservation> {
    if receipt_time <= packet_ref_time {
        return Err(Error::NonPositiveAge {
            receipt_time,
            ref_time: packet_ref_time,
        });
    }
    Ok(AgeObservation {
        index,
        receipt_time,
        age: receipt_time - packet_ref_time,
    })
}

/// Running state of one detector at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    log_z: f64,
    threshold: f64,
    alarmed: bool,
    alarm_index: Option<u64>,
    alarm_time: Option<u64>,
    last: Option<(u64, u64)>,
}

impl DetectorState {
    /// Fresh detector with `Ẑ_0 = 1`.
    pub fn new(threshold: f64) -> Result<Self> {
        Self::from_posterior(1.0, threshold)
    }

    pub fn from_posterior(z_hat: f64, threshold: f64) -> Result<Self> {
        check_open_unit("threshold", threshold)?;
        if !(0.0..=1.0).contains(&z_hat) {
            return Err(Error::config("z_hat", format!("{z_hat} is outside [0, 1]")));
        }
        Ok(Self {
            log_z: z_hat.ln(),
            threshold,
            alarmed: false,
            alarm_index: None,
            alarm_time: None,
            last: None,
        })
    }

    pub fn z_hat(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn log_z_hat(&self) -> f64 {
        self.log_z
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    pub fn alarm_index(&self) -> Option<u64> {
        self.alarm_index
    }

    pub fn alarm_time(&self) -> Option<u64> {
        self.alarm_time
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// One step of the no-change posterior recursion, in log space.
pub fn posterior_update(
    state: &DetectorState,
    obs: &AgeObservation,
    model: &GeometricModel,
) -> Result<DetectorState> {
    let log_z = state.log_z;
    let z = log_z.exp();
    let log_keep = (-model.rho_i).ln_1p();
    let log_b1 = log_geometric_pmf(model.rho1, obs.age);
    let log_b2 = log_geometric_pmf(model.rho2, obs.age);

    // N⁻¹ = b₂ (1 − (1 − ρ_i) Ẑ) + (1 − ρ_i) b₁ Ẑ,  with 1 − Ẑ = −expm1(log Ẑ)
    let changed_mass = -log_z.exp_m1() + model.rho_i * z;
    let log_stay = log_keep + log_b1 + log_z;
    let log_change = log_b2 + changed_mass.ln();
    let log_norm_inv = log_add_exp(log_stay, log_change);
    if log_norm_inv == f64::NEG_INFINITY || log_norm_inv.is_nan() {
        return Err(Error::InvalidObservation { age: obs.age });
    }
    let next = if log_stay == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (log_stay - log_norm_inv).min(0.0)
    };
    Ok(DetectorState {
        log_z: next,
        last: Some((obs.index, obs.receipt_time)),
        ..state.clone()
    })
}

/// `τ* = inf{m ≥ 1 : Ẑ_m ≤ h}`. Latches the first alarm's index and time.
pub fn stopping_decision(state: &mut DetectorState) -> bool {
    let Some((index, time)) = state.last else {
        return false;
    };
    let stop = state.z_hat() <= state.threshold;
    if stop && !state.alarmed {
        state.alarmed = true;
        state.alarm_index = Some(index);
        state.alarm_time = Some(time);
    }
    stop
}

/// Sliding mean of the last `window` ages, emitted from the `window`-th receipt on.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    window: usize,
    ages: VecDeque<u64>,
    sum: u64,
}

impl MovingAverage {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        Ok(Self {
            window,
            ages: VecDeque::with_capacity(window),
            sum: 0,
        })
    }

    pub fn push(&mut self, age: u64) -> Option<f64> {
        self.ages.push_back(age);
        self.sum += age;
        if self.ages.len() > self.window {
            self.sum -= self.ages.pop_front().expect("nonempty");
        }
        (self.ages.len() == self.window).then(|| self.sum as f64 / self.window as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MovingAveragePoint {
    pub index: u64,
    pub receipt_time: u64,
    pub mean_age: f64,
}

/// Baseline test: windowed mean age, with the theoretical means `1/ρ₁` and
/// `1/ρ₂` to compare against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MovingAverageSeries {
    pub points: Vec<MovingAveragePoint>,
    pub pre_change_mean: f64,
    pub post_change_mean: f64,
}

pub fn moving_average_detector(
    ages: &[AgeObservation],
    window: usize,
    model: &GeometricModel,
) -> Result<MovingAverageSeries> {
    let mut ma = MovingAverage::new(window)?;
    let points = ages
        .iter()
        .filter_map(|obs| {
            ma.push(obs.age).map(|mean_age| MovingAveragePoint {
                index: obs.index,
                receipt_time: obs.receipt_time,
                mean_age,
            })
        })
        .collect();
    Ok(MovingAverageSeries {
        points,
        pre_change_mean: model.pre_change_mean(),
        post_change_mean: model.post_change_mean(),
    })
}

/// Per-step delay penalty `c` of the Bayes risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub c: f64,
}

impl RiskParams {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::config("delay_penalty", format!("{c} must be positive")));
        }
        Ok(Self { c })
    }
}

/// Stopping index τ and change index λ of one run, in the detector's own index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoppingOutcome {
    pub tau: u64,
    pub lambda: u64,
}

/// Sample estimate of `c E[(τ − λ)⁺] + P(τ < λ)`.
pub fn bayes_risk(runs: &[StoppingOutcome], risk: &RiskParams) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Evaluation("Bayes risk over an empty run set".into()));
    }
    let n = runs.len() as f64;
    let delay: f64 = runs.iter().map(|r| r.tau.saturating_sub(r.lambda) as f64).sum::<f64>() / n;
    let false_alarm = runs.iter().filter(|r| r.tau < r.lambda).count() as f64 / n;
    Ok(risk.c * delay + false_alarm)
}

/// Threshold whose false-alarm rate on the given sample is closest to `target`
/// from above. `pre_change_minima` holds, per run, the smallest posterior seen
/// before the change (`+inf` if the detector never updated before it), so a
/// run false-alarms at threshold `h` exactly when its minimum is `≤ h`.
pub fn threshold_for_pfa(pre_change_minima: &[f64], target: f64) -> Result<f64> {
    if pre_change_minima.is_empty() {
        return Err(Error::Evaluation("no runs to calibrate on".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::config("target_pfa", format!("{target} must lie in (0, 1)")));
    }
    let mut sorted = pre_change_minima.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let j = ((target * n as f64).ceil() as usize).clamp(1, n);
    let lo = sorted[j - 1];
    let hi = if j < n { sorted[j] } else { 1.0 };
    let h = if hi.is_finite() { 0.5 * (lo + hi.min(1.0)) } else { lo };
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Evaluation(format!(
            "calibrated threshold {h} falls outside (0, 1)"
        )));
    }
    Ok(h)
}

/// Empirical false-alarm rate at threshold `h` from per-run pre-change minima.
pub fn pfa_at(pre_change_minima: &[f64], h: f64) -> f64 {
    if pre_change_minima.is_empty() {
        return 0.0;
    }
    pre_change_minima.iter().filter(|&&m| m <= h).count() as f64 / pre_change_minima.len() as f64
}
