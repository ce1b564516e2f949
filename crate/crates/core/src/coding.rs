//! State-secrecy coding of sensor estimates.
//!
//! The sensor sends the innovation of its current estimate against the last
//! acknowledged one propagated through the dynamics,
//!
//! ```text
//! z_k = { x̂ˢ_k − A^{k−t_k} x̂ˢ_{t_k},  t_k }
//! ```
//!
//! and any receiver adds `A^{k−t_k}` times its own estimate at `t_k` back.
//! A receiver whose estimate at `t_k` matched the sensor's recovers `x̂ˢ_k`
//! exactly; one that was out of sync carries its old error forward, amplified
//! by the unstable dynamics.
//!
//! Innovations are carried as an unevaluated pair `innovation + residual`
//! (the rounded difference and its exact rounding error), and decoding sums
//! the three terms with a correctly rounded summation. A synchronized decoder
//! therefore reproduces the sensor estimate bit for bit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{exact_sum, symmetrize, two_diff, MatrixPowers};
use crate::process::{predicted_covariance, SensorEstimate, SystemParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    /// Rounded innovation `x̂ˢ_k − A^{k−t_k} x̂ˢ_{t_k}`.
    pub innovation: DVector<f64>,
    /// Exact rounding error of `innovation`; `innovation + residual` is the true difference.
    pub residual: DVector<f64>,
    pub ref_time: u64,
    pub send_time: u64,
}

impl Packet {
    pub fn lag(&self) -> u64 {
        self.send_time - self.ref_time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Whether this estimate was decoded against a synchronized reference.
    pub synced: bool,
}

/// Estimates held at each past time. Retention is unbounded: the reference
/// time can lag arbitrarily far behind under acknowledgment blocking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateLog {
    entries: BTreeMap<u64, LogEntry>,
}

impl EstimateLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, k: u64, entry: LogEntry) {
        self.entries.insert(k, entry);
    }

    pub fn get(&self, k: u64) -> Result<&LogEntry> {
        self.entries.get(&k).ok_or(Error::MissingLogEntry { time: k })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Public sequence of sensor error covariances `Pˢ_k`. It depends only on the
/// public model, so every party can compute it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovarianceSchedule {
    covs: Vec<DMatrix<f64>>,
}

impl CovarianceSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `Pˢ_k`; `k` must be the next time index.
    pub fn push(&mut self, k: u64, p: DMatrix<f64>) {
        assert_eq!(k as usize, self.covs.len(), "covariance schedule must be filled in order");
        self.covs.push(p);
    }

    pub fn get(&self, k: u64) -> Result<&DMatrix<f64>> {
        self.covs
            .get(k as usize)
            .ok_or(Error::MissingLogEntry { time: k })
    }
}

/// Builds the packet for time `k` against the last acknowledged time `t_k`.
pub fn encode(
    sensor_est: &SensorEstimate,
    sensor_log: &EstimateLog,
    t_k: u64,
    k: u64,
    powers: &mut MatrixPowers,
) -> Result<Packet> {
    if t_k >= k {
        return Err(Error::config(
            "ref_time",
            format!("reference time {t_k} must precede send time {k}"),
        ));
    }
    let reference = sensor_log.get(t_k)?;
    let propagated = powers.pow(k - t_k) * &reference.x_hat;
    let n = sensor_est.x_hat.len();
    let mut innovation = DVector::zeros(n);
    let mut residual = DVector::zeros(n);
    for i in 0..n {
        let (hi, lo) = two_diff(sensor_est.x_hat[i], propagated[i]);
        innovation[i] = hi;
        residual[i] = lo;
    }
    Ok(Packet {
        innovation,
        residual,
        ref_time: t_k,
        send_time: k,
    })
}

/// Estimate held by a legitimate receiver or by an eavesdropper.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverState {
    pub k: u64,
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub synced: bool,
    pub log: EstimateLog,
}

impl ReceiverState {
    /// Shared origin at `k = 0`: the sensor's initial estimate is known to every party.
    pub fn synchronized_origin(initial: &SensorEstimate) -> Self {
        let mut log = EstimateLog::new();
        log.record(
            0,
            LogEntry {
                x_hat: initial.x_hat.clone(),
                p: initial.p.clone(),
                synced: true,
            },
        );
        Self {
            k: 0,
            x_hat: initial.x_hat.clone(),
            p: initial.p.clone(),
            synced: true,
            log,
        }
    }

    fn commit(&mut self, k: u64, x_hat: DVector<f64>, p: DMatrix<f64>, synced: bool) {
        self.log.record(
            k,
            LogEntry {
                x_hat: x_hat.clone(),
                p: p.clone(),
                synced,
            },
        );
        self.k = k;
        self.x_hat = x_hat;
        self.p = p;
        self.synced = synced;
    }

    /// Decodes a received packet.
    ///
    /// `x̂_k = z_k + A^{k−t_k} x̂_{t_k}`. The covariance is
    /// `Pˢ_k + A^{k−t_k} (P_{t_k} − Pˢ_{t_k}) A^{k−t_k}ᵀ`: the sensor's own
    /// error plus the propagated mismatch at the reference time, which is
    /// exactly zero for a synchronized receiver.
    pub fn decode_receipt(
        &mut self,
        pkt: &Packet,
        sensor_covs: &CovarianceSchedule,
        powers: &mut MatrixPowers,
    ) -> Result<()> {
        let k = pkt.send_time;
        let reference = self.log.get(pkt.ref_time)?.clone();
        let transition = powers.pow(pkt.lag());
        let propagated = transition * &reference.x_hat;
        let x_hat = DVector::from_fn(propagated.len(), |i, _| {
            exact_sum(&[propagated[i], pkt.innovation[i], pkt.residual[i]])
        });

        let sensor_now = sensor_covs.get(k)?;
        let mismatch = &reference.p - sensor_covs.get(pkt.ref_time)?;
        let p = if mismatch.iter().all(|&v| v == 0.0) {
            sensor_now.clone()
        } else {
            symmetrize(&(sensor_now + transition * mismatch * transition.transpose()))
        };
        self.commit(k, x_hat, p, reference.synced);
        Ok(())
    }

    /// Open-loop prediction when no packet arrives at `k = self.k + 1`.
    pub fn predict_on_dropout(&mut self, params: &SystemParams) {
        let x_hat = params.a() * &self.x_hat;
        let p = predicted_covariance(&self.p, params);
        self.commit(self.k + 1, x_hat, p, false);
    }
}
