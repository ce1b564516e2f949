//! Full runs: process, sensor filter, channels, attacker, coding and the
//! online detectors, plus the Monte Carlo harness around them.
//!
//! Random streams: each run derives independent ChaCha streams from
//! `(seed, run_index, purpose)`, one per purpose (initial state, process
//! noise, measurement noise, each channel, activation draw). Changing one
//! channel's quality therefore leaves every other stream untouched.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coding::{encode, CovarianceSchedule, EstimateLog, LogEntry, ReceiverState};
use crate::error::{Error, Result};
use crate::linalg::MatrixPowers;
use crate::network::{bernoulli, decide_block, update_ack_reference, Activation, AttackerPolicy, ChannelDraw, StepOutcome};
use crate::process::{
    initial_estimate, kalman_step, measure_with_noise, sample_measurement_noise, sample_process_noise,
    step_process_with_noise, ProcessState, SensorEstimate,
};
use crate::qcd::{
    age_from_packet, bayes_risk, posterior_update, stopping_decision, threshold_for_pfa, DetectorState,
    GeometricModel, MovingAverage, RiskParams, StoppingOutcome,
};
use crate::scenario::{DetectorSide, InitialState, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Purpose {
    Initial = 0,
    Process = 1,
    Measurement = 2,
    Gamma = 3,
    GammaE = 4,
    GammaA = 5,
    Activation = 6,
}

fn stream(seed: u64, run_index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index.wrapping_mul(16).wrapping_add(purpose as u64));
    rng
}

/// How much of a run to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    /// Detector outcomes only.
    Summary,
    /// Plus receipt and acknowledgment records.
    Events,
    /// Plus one record per step.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: u64,
    pub x: DVector<f64>,
    pub x_hat_s: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub x_hat_e: DVector<f64>,
    pub p_s: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p_e: DMatrix<f64>,
    pub gamma: bool,
    pub gamma_e: bool,
    pub gamma_a: bool,
    pub blocked: bool,
    pub ack_delivered: bool,
    /// Reference time after this step's acknowledgment (if any).
    pub t_k: u64,
    pub eavesdropper_synced: bool,
    pub attacker_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiptRecord {
    pub m: u64,
    pub k: u64,
    pub ref_time: u64,
    pub age: u64,
    pub post_change: bool,
    /// Posterior of each receiver-side detector, in scenario order.
    pub z_hat: Vec<f64>,
    pub window_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AckRecord {
    pub n: u64,
    pub k: u64,
    pub age: u64,
    pub post_change: bool,
    /// Posterior of each sensor-side detector, in scenario order.
    pub z_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub threshold: f64,
    pub alarm_index: Option<u64>,
    pub alarm_time: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutcome {
    pub name: String,
    pub side: DetectorSide,
    /// Number of observations the detector consumed.
    pub events: u64,
    /// Own-stream index of the first post-change observation.
    pub change_index: Option<u64>,
    /// Smallest posterior before the change (over the whole run if it never happened).
    pub pre_change_min: f64,
    pub thresholds: Vec<ThresholdOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub run_index: u64,
    pub horizon: u64,
    pub activation_step: Option<u64>,
    pub receipts: u64,
    pub acks: u64,
    pub steps: Vec<StepRecord>,
    pub receipt_log: Vec<ReceiptRecord>,
    pub ack_log: Vec<AckRecord>,
    pub detectors: Vec<DetectorOutcome>,
    pub receiver_detectors: Vec<String>,
    pub sensor_detectors: Vec<String>,
}

struct LiveDetector {
    name: String,
    side: DetectorSide,
    model: GeometricModel,
    states: Vec<DetectorState>,
    events: u64,
    change_index: Option<u64>,
    pre_change_min: f64,
}

impl LiveDetector {
    fn observe(&mut self, index: u64, k: u64, ref_time: u64, change_index: Option<u64>) -> Result<f64> {
        let obs = age_from_packet(index, k, ref_time)?;
        self.events = index;
        self.change_index = change_index;
        for state in &mut self.states {
            *state = posterior_update(state, &obs, &self.model)?;
            stopping_decision(state);
        }
        let z = self.states[0].z_hat();
        if change_index.is_none_or(|l| index < l) {
            self.pre_change_min = self.pre_change_min.min(z);
        }
        Ok(z)
    }

    fn finish(self) -> DetectorOutcome {
        DetectorOutcome {
            name: self.name,
            side: self.side,
            events: self.events,
            change_index: self.change_index,
            pre_change_min: self.pre_change_min,
            thresholds: self
                .states
                .iter()
                .map(|s| ThresholdOutcome {
                    threshold: s.threshold(),
                    alarm_index: s.alarm_index(),
                    alarm_time: s.alarm_time(),
                })
                .collect(),
        }
    }
}

fn invariant(step: u64, what: String) -> Error {
    Error::Invariant(what).at_step(step)
}

/// Simulates run `run_index` of the scenario with full records.
pub fn run_once(scenario: &Scenario, run_index: u64) -> Result<RunTrace> {
    simulate(scenario, run_index, TraceLevel::Full)
}

pub fn simulate(scenario: &Scenario, run_index: u64, level: TraceLevel) -> Result<RunTrace> {
    scenario.validate()?;
    let params = &scenario.system;
    let seed = scenario.seed;
    let mut rng_init = stream(seed, run_index, Purpose::Initial);
    let mut rng_w = stream(seed, run_index, Purpose::Process);
    let mut rng_r = stream(seed, run_index, Purpose::Measurement);
    let mut rng_g = stream(seed, run_index, Purpose::Gamma);
    let mut rng_ge = stream(seed, run_index, Purpose::GammaE);
    let mut rng_ga = stream(seed, run_index, Purpose::GammaA);
    let mut rng_act = stream(seed, run_index, Purpose::Activation);

    let fixed_receipt = scenario.activation.draw_receipt(&mut rng_act);
    let activation_from_step = match scenario.activation {
        Activation::Step(s) => Some(s),
        _ => None,
    };

    let mut detectors = Vec::with_capacity(scenario.detectors.len());
    for spec in &scenario.detectors {
        detectors.push(LiveDetector {
            name: spec.name.clone(),
            side: spec.side,
            model: spec.model(scenario)?,
            states: spec
                .thresholds
                .iter()
                .map(|&h| DetectorState::new(h))
                .collect::<Result<_>>()?,
            events: 0,
            change_index: None,
            pre_change_min: f64::INFINITY,
        });
    }
    let names_on = |side| {
        detectors
            .iter()
            .filter(|d| d.side == side)
            .map(|d| d.name.clone())
            .collect::<Vec<_>>()
    };
    let receiver_detectors = names_on(DetectorSide::Receiver);
    let sensor_detectors = names_on(DetectorSide::Sensor);

    // k = 0: shared origin
    let zero_w = DVector::zeros(params.state_dim());
    let zero_r = DVector::zeros(params.output_dim());
    let mut state = match &scenario.x0 {
        InitialState::Fixed(x) => ProcessState::new(0, x.clone()),
        InitialState::Random => ProcessState::sample_initial(params, &mut rng_init),
    };
    let r0 = sample_measurement_noise(params, &mut rng_r);
    let r0 = if scenario.script.noise_on(0) { r0 } else { zero_r.clone() };
    let y0 = measure_with_noise(&state, params, &r0).map_err(|e| e.at_step(0))?;
    let mut sensor: SensorEstimate = initial_estimate(&y0, params).map_err(|e| e.at_step(0))?;
    let mut sensor_log = EstimateLog::new();
    sensor_log.record(
        0,
        LogEntry {
            x_hat: sensor.x_hat.clone(),
            p: sensor.p.clone(),
            synced: true,
        },
    );
    let mut sensor_covs = CovarianceSchedule::new();
    sensor_covs.push(0, sensor.p.clone());
    let mut receiver = ReceiverState::synchronized_origin(&sensor);
    let mut eve = ReceiverState::synchronized_origin(&sensor);
    let mut powers = MatrixPowers::new(params.a().clone());

    let mut t_k = 0u64;
    let mut receipts = 0u64;
    let mut acks = 0u64;
    let mut activation_step: Option<u64> = None;
    let mut receipt_change: Option<u64> = None;
    let mut ack_change: Option<u64> = None;
    let mut window = MovingAverage::new(scenario.moving_average_window)?;

    let full = level == TraceLevel::Full;
    let events = level != TraceLevel::Summary;
    let mut steps = Vec::with_capacity(if full { scenario.horizon as usize + 1 } else { 0 });
    let mut receipt_log = Vec::new();
    let mut ack_log = Vec::new();
    if full {
        steps.push(StepRecord {
            k: 0,
            x: state.x.clone(),
            x_hat_s: sensor.x_hat.clone(),
            x_hat: receiver.x_hat.clone(),
            x_hat_e: eve.x_hat.clone(),
            p_s: sensor.p.clone(),
            p: receiver.p.clone(),
            p_e: eve.p.clone(),
            gamma: false,
            gamma_e: false,
            gamma_a: false,
            blocked: false,
            ack_delivered: false,
            t_k: 0,
            eavesdropper_synced: true,
            attacker_active: false,
        });
    }

    for k in 1..=scenario.horizon {
        let noise_on = scenario.script.noise_on(k);
        let w = sample_process_noise(params, &mut rng_w);
        let r = sample_measurement_noise(params, &mut rng_r);
        let (w, r) = if noise_on { (w, r) } else { (zero_w.clone(), zero_r.clone()) };
        state = step_process_with_noise(&state, params, &w).map_err(|e| e.at_step(k))?;
        let y = measure_with_noise(&state, params, &r).map_err(|e| e.at_step(k))?;
        sensor = kalman_step(&sensor, &y, params).map_err(|e| e.at_step(k))?;
        sensor_log.record(
            k,
            LogEntry {
                x_hat: sensor.x_hat.clone(),
                p: sensor.p.clone(),
                synced: true,
            },
        );
        sensor_covs.push(k, sensor.p.clone());

        let forced = scenario.script.forced(k);
        let mut gamma = bernoulli(scenario.channels.alpha, &mut rng_g);
        if let Some(g) = forced.and_then(|f| f.gamma) {
            gamma = g;
        }
        if gamma {
            receipts += 1;
        }
        if activation_step.is_none() {
            let reached = match (activation_from_step, fixed_receipt) {
                (Some(s), _) => k >= s,
                (None, Some(l)) => gamma && receipts >= l,
                (None, None) => false,
            };
            if reached {
                activation_step = Some(activation_from_step.unwrap_or(k));
            }
        }
        let active = activation_step.is_some();
        if active && gamma && receipt_change.is_none() {
            receipt_change = Some(receipts);
        }

        let alpha_e = if active {
            scenario.channels.alpha_e
        } else {
            scenario.alpha_e_before_activation
        };
        let mut gamma_e = bernoulli(alpha_e, &mut rng_ge);
        let mut gamma_a = bernoulli(scenario.channels.alpha_a, &mut rng_ga);
        if let Some(f) = forced {
            gamma_e = f.gamma_e.unwrap_or(gamma_e);
            gamma_a = f.gamma_a.unwrap_or(gamma_a);
        }
        let blocked = match receipt_change {
            Some(l) => decide_block(&AttackerPolicy::new(scenario.attacker, l)?, receipts, gamma, gamma_e),
            None => false,
        };
        let outcome = StepOutcome::resolve(k, ChannelDraw { gamma, gamma_e, gamma_a }, blocked);

        if gamma || gamma_e {
            let packet = encode(&sensor, &sensor_log, t_k, k, &mut powers).map_err(|e| e.at_step(k))?;
            if gamma {
                receiver
                    .decode_receipt(&packet, &sensor_covs, &mut powers)
                    .map_err(|e| e.at_step(k))?;
                if receiver.x_hat != sensor.x_hat || receiver.p != sensor.p {
                    return Err(invariant(k, "legitimate decode differs from the sensor estimate".into()));
                }
            }
            if gamma_e {
                eve.decode_receipt(&packet, &sensor_covs, &mut powers)
                    .map_err(|e| e.at_step(k))?;
            }
        }
        if !gamma {
            receiver.predict_on_dropout(params);
        }
        if !gamma_e {
            eve.predict_on_dropout(params);
        }
        if gamma_e && eve.x_hat != sensor.x_hat {
            eve.synced = false;
        }

        if gamma {
            let mut z_hat = Vec::with_capacity(receiver_detectors.len());
            for det in detectors.iter_mut().filter(|d| d.side == DetectorSide::Receiver) {
                z_hat.push(det.observe(receipts, k, t_k, receipt_change).map_err(|e| e.at_step(k))?);
            }
            let window_mean = window.push(k - t_k);
            if events {
                receipt_log.push(ReceiptRecord {
                    m: receipts,
                    k,
                    ref_time: t_k,
                    age: k - t_k,
                    post_change: receipt_change.is_some_and(|l| receipts >= l),
                    z_hat,
                    window_mean,
                });
            }
        }
        if outcome.ack_delivered {
            acks += 1;
            if active && ack_change.is_none() {
                ack_change = Some(acks);
            }
            let mut z_hat = Vec::with_capacity(sensor_detectors.len());
            for det in detectors.iter_mut().filter(|d| d.side == DetectorSide::Sensor) {
                z_hat.push(det.observe(acks, k, t_k, ack_change).map_err(|e| e.at_step(k))?);
            }
            if events {
                ack_log.push(AckRecord {
                    n: acks,
                    k,
                    age: k - t_k,
                    post_change: ack_change.is_some_and(|l| acks >= l),
                    z_hat,
                });
            }
        }
        t_k = update_ack_reference(t_k, &outcome);
        if acks > receipts {
            return Err(invariant(k, format!("{acks} acknowledgments exceed {receipts} receipts")));
        }

        if full {
            steps.push(StepRecord {
                k,
                x: state.x.clone(),
                x_hat_s: sensor.x_hat.clone(),
                x_hat: receiver.x_hat.clone(),
                x_hat_e: eve.x_hat.clone(),
                p_s: sensor.p.clone(),
                p: receiver.p.clone(),
                p_e: eve.p.clone(),
                gamma,
                gamma_e,
                gamma_a,
                blocked,
                ack_delivered: outcome.ack_delivered,
                t_k,
                eavesdropper_synced: eve.synced,
                attacker_active: active,
            });
        }
    }

    Ok(RunTrace {
        run_index,
        horizon: scenario.horizon,
        activation_step,
        receipts,
        acks,
        steps,
        receipt_log,
        ack_log,
        detectors: detectors.into_iter().map(LiveDetector::finish).collect(),
        receiver_detectors,
        sensor_detectors,
    })
}

/// Runs `0..scenario.runs` in parallel; the result is in run order.
pub fn run_batch(scenario: &Scenario, level: TraceLevel) -> Result<Vec<RunTrace>> {
    scenario.validate()?;
    (0..scenario.runs)
        .into_par_iter()
        .map(|i| simulate(scenario, i, level))
        .collect()
}

/// Sample mean with a 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub count: u64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                half_width: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            mean,
            half_width,
            count: n as u64,
        }
    }
}

/// Statistics of one detector at one threshold across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub detector: String,
    pub side: DetectorSide,
    pub threshold: f64,
    pub runs: u64,
    pub false_alarms: u64,
    /// Fraction of runs alarming before the change (or at all, if it never came).
    pub pfa: Estimate,
    /// Runs alarming at or after the change.
    pub detections: u64,
    /// Runs whose change came but that never alarmed.
    pub misses: u64,
    /// Over runs with a change and no false alarm; misses censored at the horizon.
    pub delay_receipts: Estimate,
    pub delay_steps: Estimate,
    pub bayes_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub runs: u64,
    pub delay_penalty: f64,
    pub rows: Vec<SummaryRow>,
}

struct RunScore {
    false_alarm: bool,
    detected: bool,
    missed: bool,
    delay: Option<(f64, f64)>,
    stopping: StoppingOutcome,
}

fn score(run: &RunTrace, det: &DetectorOutcome, th: &ThresholdOutcome) -> RunScore {
    let after_last = det.events + 1;
    let lambda = det.change_index.unwrap_or(after_last);
    let tau = th.alarm_index.unwrap_or(after_last);
    let false_alarm = th.alarm_index.is_some_and(|a| a < lambda);
    let detected = det.change_index.is_some() && th.alarm_index.is_some() && !false_alarm;
    let missed = det.change_index.is_some() && th.alarm_index.is_none();
    let delay = match (det.change_index, run.activation_step) {
        (Some(l), Some(s)) if !false_alarm => {
            let alarm_time = th.alarm_time.unwrap_or(run.horizon + 1);
            Some(((tau - l) as f64, alarm_time.saturating_sub(s) as f64))
        }
        _ => None,
    };
    RunScore {
        false_alarm,
        detected,
        missed,
        delay,
        stopping: StoppingOutcome { tau, lambda },
    }
}

pub fn summarize(scenario: &Scenario, runs: &[RunTrace]) -> Result<SummaryStats> {
    if runs.is_empty() {
        return Err(Error::Evaluation("no runs to summarize".into()));
    }
    let risk = RiskParams::new(scenario.delay_penalty)?;
    let mut rows = Vec::new();
    for (d, spec) in scenario.detectors.iter().enumerate() {
        for (t, &h) in spec.thresholds.iter().enumerate() {
            let scores: Vec<RunScore> = runs
                .iter()
                .map(|run| score(run, &run.detectors[d], &run.detectors[d].thresholds[t]))
                .collect();
            let fa: Vec<f64> = scores.iter().map(|s| f64::from(u8::from(s.false_alarm))).collect();
            let delays: Vec<(f64, f64)> = scores.iter().filter_map(|s| s.delay).collect();
            let stopping: Vec<StoppingOutcome> = scores.iter().map(|s| s.stopping).collect();
            rows.push(SummaryRow {
                detector: spec.name.clone(),
                side: spec.side,
                threshold: h,
                runs: runs.len() as u64,
                false_alarms: scores.iter().filter(|s| s.false_alarm).count() as u64,
                pfa: Estimate::of(&fa),
                detections: scores.iter().filter(|s| s.detected).count() as u64,
                misses: scores.iter().filter(|s| s.missed).count() as u64,
                delay_receipts: Estimate::of(&delays.iter().map(|d| d.0).collect::<Vec<_>>()),
                delay_steps: Estimate::of(&delays.iter().map(|d| d.1).collect::<Vec<_>>()),
                bayes_risk: bayes_risk(&stopping, &risk)?,
            });
        }
    }
    Ok(SummaryStats {
        runs: runs.len() as u64,
        delay_penalty: scenario.delay_penalty,
        rows,
    })
}

pub fn run_monte_carlo(scenario: &Scenario) -> Result<SummaryStats> {
    let runs = run_batch(scenario, TraceLevel::Summary)?;
    summarize(scenario, &runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedThreshold {
    pub detector: String,
    pub target_pfa: f64,
    pub threshold: f64,
    pub achieved_pfa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// One row per detector and grid threshold.
    pub sweep: SummaryStats,
    pub targets: Vec<CalibratedThreshold>,
}

/// Sweeps every detector over `grid` and, given a target, picks the threshold
/// whose in-sample false-alarm rate matches it.
pub fn calibrate(scenario: &Scenario, grid: &[f64], target_pfa: Option<f64>) -> Result<Calibration> {
    if grid.is_empty() {
        return Err(Error::config("thresholds", "calibration grid is empty"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    let mut sweep_scenario = scenario.clone();
    for d in &mut sweep_scenario.detectors {
        d.thresholds = grid.clone();
    }
    sweep_scenario.validate()?;
    let runs = run_batch(&sweep_scenario, TraceLevel::Summary)?;
    let sweep = summarize(&sweep_scenario, &runs)?;
    let mut targets = Vec::new();
    if let Some(target) = target_pfa {
        for (d, spec) in sweep_scenario.detectors.iter().enumerate() {
            let minima: Vec<f64> = runs.iter().map(|r| r.detectors[d].pre_change_min).collect();
            let h = threshold_for_pfa(&minima, target)?;
            targets.push(CalibratedThreshold {
                detector: spec.name.clone(),
                target_pfa: target,
                threshold: h,
                achieved_pfa: crate::qcd::pfa_at(&minima, h),
            });
        }
    }
    Ok(Calibration { sweep, targets })
}
