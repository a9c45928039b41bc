//! Measurement synthesis.
//!
//! Every timing measurement is built from the same primitives: the true
//! one-way flight time (`d/c` plus any NLoS excess delay), each node's clock
//! (offset for epochs, drift for durations) and a zero-mean Gaussian ToA
//! estimation error whose spread follows [`toa_std_s`].
//!
//! Azimuth is measured from +x (east), counter-clockwise, in `[-π, π)`.
//! Zenith is measured from +z, in `[0, π]`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::LinkState;
use crate::clock::local_duration;
use crate::estimators::EstimatorMethod;
use crate::scenario::Node;
use crate::{Error, NodeId, Result, SPEED_OF_LIGHT_M_S};

/// PRS bandwidths the presets sweep over, Hz.
pub const BANDWIDTH_PRESETS_HZ: [f64; 4] = [20e6, 40e6, 100e6, 400e6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_figure_db: f64,
    /// Elements per array axis.
    pub n_antennas: u32,
    #[serde(default = "half")]
    pub antenna_spacing_wavelengths: f64,
    /// Adds a vertical axis so zenith can be measured.
    #[serde(default)]
    pub planar_array: bool,
}

fn half() -> f64 {
    0.5
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 100e6,
            carrier_hz: 5.9e9,
            tx_power_dbm: 23.0,
            noise_figure_db: 9.0,
            n_antennas: 4,
            antenna_spacing_wavelengths: 0.5,
            planar_array: false,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bandwidth_hz.is_finite()
            && self.bandwidth_hz > 0.0
            && self.carrier_hz.is_finite()
            && self.carrier_hz > 0.0
            && self.tx_power_dbm.is_finite()
            && self.noise_figure_db.is_finite()
            && self.n_antennas >= 1
            && self.antenna_spacing_wavelengths.is_finite()
            && self.antenna_spacing_wavelengths > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid radio config {self:?}")))
        }
    }
}

/// ToA standard deviation from the delay-estimation CRLB,
/// `1 / (2√2·π·β·√snr)` with flat-spectrum RMS bandwidth `β = B/√12`.
pub fn toa_std_s(bandwidth_hz: f64, snr_linear: f64) -> f64 {
    let beta = bandwidth_hz / 12f64.sqrt();
    1.0 / (2.0 * std::f64::consts::SQRT_2 * PI * beta * snr_linear.sqrt())
}

/// Uniform-linear-array angle CRLB. `off_broadside_rad` is the angle between
/// the arrival direction and the array broadside. Returns the standard
/// deviation and whether it hit the π/4 cap (near endfire or very low SNR).
pub fn aoa_std_rad(radio: &RadioConfig, snr_linear: f64, off_broadside_rad: f64) -> (f64, bool) {
    let n = radio.n_antennas as f64;
    let k = 2.0 * PI * radio.antenna_spacing_wavelengths;
    let cos2 = off_broadside_rad.cos().powi(2);
    let var = 6.0 / (k * k * snr_linear * n * (n * n - 1.0) * cos2);
    let std = var.sqrt();
    if std.is_finite() && std <= FRAC_PI_4 {
        (std, false)
    } else {
        (FRAC_PI_4, true)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToaMeasurement {
    pub tx_id: NodeId,
    pub rx_id: NodeId,
    /// Arrival time in the receiver's clock relative to the transmitter's
    /// scheduled epoch, s.
    pub toa_s: f64,
    pub snr_db: f64,
    pub los: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RttKind {
    SingleSided,
    #[default]
    DoubleSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttMeasurement {
    /// Initiator.
    pub a_id: NodeId,
    /// Responder.
    pub b_id: NodeId,
    pub kind: RttKind,
    pub est_range_m: f64,
    pub reply_times_s: Vec<f64>,
    pub snr_db: f64,
    pub los: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaDiff {
    pub anchor_id: NodeId,
    /// `c·(ToA_anchor − ToA_ref)`, m.
    pub diff_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaSet {
    pub target_id: NodeId,
    pub ref_anchor_id: NodeId,
    pub diffs: Vec<TdoaDiff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoaMeasurement {
    pub observer_id: NodeId,
    pub source_id: NodeId,
    pub azimuth_rad: f64,
    /// `π/2` when the array cannot resolve elevation.
    pub zenith_rad: f64,
    /// Reported azimuth noise level.
    pub std_rad: f64,
    pub zenith_std_rad: Option<f64>,
    /// Noise level hit the π/4 cap.
    pub low_quality: bool,
    pub los: bool,
}

/// Number of SL-PRS transmissions a method needs with `n_anchors` anchors.
pub fn prs_transmissions(method: EstimatorMethod, rtt: RttKind, n_anchors: usize) -> usize {
    let per_pair = match rtt {
        RttKind::SingleSided => 2,
        RttKind::DoubleSided => 3,
    };
    match method {
        EstimatorMethod::RttMultilat => per_pair * n_anchors,
        // the bearing is taken on the same PRS as the range
        EstimatorMethod::HybridRttAoa => per_pair * n_anchors,
        EstimatorMethod::Tdoa => n_anchors,
        EstimatorMethod::AoaTriang => n_anchors,
        EstimatorMethod::BruteForce => 0,
    }
}

/// Asymmetric double-sided two-way-ranging estimate of the flight time.
pub fn ds_twr_tof(round1: f64, reply1: f64, round2: f64, reply2: f64) -> f64 {
    (round1 * round2 - reply1 * reply2) / (round1 + round2 + reply1 + reply2)
}

/// Symmetric double-sided estimate; equals [`ds_twr_tof`] for equal reply
/// times and ideal clocks.
pub fn symmetric_ds_tof(round1: f64, reply1: f64, round2: f64, reply2: f64) -> f64 {
    (round1 - reply1 + round2 - reply2) / 4.0
}

/// Synthesizes measurements for one radio configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub radio: RadioConfig,
    /// When false every estimation error is zero (σ forced to 0).
    pub noise_enabled: bool,
    pub nlos_aoa_scatter_prob: f64,
}

impl MeasurementModel {
    pub fn new(radio: RadioConfig) -> Self {
        Self {
            radio,
            noise_enabled: true,
            nlos_aoa_scatter_prob: 1.0,
        }
    }

    pub fn noiseless(radio: RadioConfig) -> Self {
        Self {
            noise_enabled: false,
            ..Self::new(radio)
        }
    }

    fn gaussian<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> f64 {
        if !self.noise_enabled || std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }

    fn toa_error<R: Rng + ?Sized>(&self, link: &LinkState, rng: &mut R) -> f64 {
        self.gaussian(toa_std_s(self.radio.bandwidth_hz, link.snr_linear()), rng)
    }

    fn flight_time(a: &Node, b: &Node, link: &LinkState) -> f64 {
        a.position.distance(&b.position) / SPEED_OF_LIGHT_M_S + link.excess_delay_s
    }

    pub fn measure_toa<R: Rng + ?Sized>(
        &self,
        tx: &Node,
        rx: &Node,
        link: &LinkState,
        rng: &mut R,
    ) -> ToaMeasurement {
        let toa_s = Self::flight_time(tx, rx, link) + (rx.clock.offset_s - tx.clock.offset_s)
            + self.toa_error(link, rng);
        ToaMeasurement {
            tx_id: tx.id,
            rx_id: rx.id,
            toa_s,
            snr_db: link.snr_db,
            los: link.los,
        }
    }

    /// Single-sided RTT initiated by `a`. `b` replies `t_reply_s` (true time)
    /// after receiving and reports the reply time in its own clock.
    pub fn rtt_single<R: Rng + ?Sized>(
        &self,
        a: &Node,
        b: &Node,
        t_reply_s: f64,
        link: &LinkState,
        rng: &mut R,
    ) -> Result<RttMeasurement> {
        check_reply(t_reply_s)?;
        let tof = Self::flight_time(a, b, link);
        let rx_at_b = self.toa_error(link, rng);
        let rx_at_a = self.toa_error(link, rng);
        let round = local_duration(2.0 * tof + t_reply_s, &a.clock) + rx_at_a;
        let reply = local_duration(t_reply_s, &b.clock) - rx_at_b;
        Ok(RttMeasurement {
            a_id: a.id,
            b_id: b.id,
            kind: RttKind::SingleSided,
            est_range_m: SPEED_OF_LIGHT_M_S * (round - reply) / 2.0,
            reply_times_s: vec![t_reply_s],
            snr_db: link.snr_db,
            los: link.los,
        })
    }

    /// Double-sided RTT: `a` polls, `b` responds after `t_reply1_s`, `a` sends
    /// a final message `t_reply2_s` after the response.
    pub fn rtt_double<R: Rng + ?Sized>(
        &self,
        a: &Node,
        b: &Node,
        t_reply1_s: f64,
        t_reply2_s: f64,
        link: &LinkState,
        rng: &mut R,
    ) -> Result<RttMeasurement> {
        check_reply(t_reply1_s)?;
        check_reply(t_reply2_s)?;
        let tof = Self::flight_time(a, b, link);
        let poll_at_b = self.toa_error(link, rng);
        let response_at_a = self.toa_error(link, rng);
        let final_at_b = self.toa_error(link, rng);
        let round1 = local_duration(2.0 * tof + t_reply1_s, &a.clock) + response_at_a;
        let reply1 = local_duration(t_reply1_s, &b.clock) - poll_at_b;
        let round2 = local_duration(2.0 * tof + t_reply2_s, &b.clock) + final_at_b;
        let reply2 = local_duration(t_reply2_s, &a.clock) - response_at_a;
        Ok(RttMeasurement {
            a_id: a.id,
            b_id: b.id,
            kind: RttKind::DoubleSided,
            est_range_m: SPEED_OF_LIGHT_M_S * ds_twr_tof(round1, reply1, round2, reply2),
            reply_times_s: vec![t_reply1_s, t_reply2_s],
            snr_db: link.snr_db,
            los: link.los,
        })
    }

    /// Downlink-style TDoA: every anchor transmits, the target measures ToA.
    /// `links[i]` belongs to `anchors[i]`; the first anchor is the reference.
    pub fn tdoa_set<R: Rng + ?Sized>(
        &self,
        target: &Node,
        anchors: &[&Node],
        links: &[LinkState],
        rng: &mut R,
    ) -> Result<TdoaSet> {
        if anchors.len() < 3 {
            return Err(Error::Config(format!(
                "TDoA needs at least 3 anchors, got {}",
                anchors.len()
            )));
        }
        if links.len() != anchors.len() {
            return Err(Error::Config("one link per anchor required".into()));
        }
        let toas: Vec<ToaMeasurement> = anchors
            .iter()
            .zip(links)
            .map(|(a, l)| self.measure_toa(a, target, l, rng))
            .collect();
        let reference = toas[0].toa_s;
        Ok(TdoaSet {
            target_id: target.id,
            ref_anchor_id: anchors[0].id,
            diffs: toas[1..]
                .iter()
                .map(|t| TdoaDiff {
                    anchor_id: t.tx_id,
                    diff_m: SPEED_OF_LIGHT_M_S * (t.toa_s - reference),
                })
                .collect(),
        })
    }

    /// Angle of arrival of `source`'s PRS at `observer`'s array, whose
    /// broadside points along `observer.heading_rad`.
    pub fn measure_aoa<R: Rng + ?Sized>(
        &self,
        observer: &Node,
        source: &Node,
        link: &LinkState,
        rng: &mut R,
    ) -> Result<AoaMeasurement> {
        if self.radio.n_antennas < 2 {
            return Err(Error::Capability(format!(
                "node {} has {} antenna(s); AoA needs at least 2",
                observer.id, self.radio.n_antennas
            )));
        }
        let v = source.position - observer.position;
        let range = v.norm();
        if range < 1e-9 {
            return Err(Error::Geometry("observer and source coincide".into()));
        }
        let true_az = v.y.atan2(v.x);
        let true_zen = (v.z / range).clamp(-1.0, 1.0).acos();
        let snr = link.snr_linear();

        let (std_rad, low_quality) = aoa_std_rad(&self.radio, snr, true_az - observer.heading_rad);
        let scattered = !link.los && rng.random_bool(self.nlos_aoa_scatter_prob);
        let base_az = if scattered {
            rng.random_range(-PI..PI)
        } else {
            true_az
        };
        let azimuth_rad = wrap_angle(base_az + self.gaussian(std_rad, rng));

        let (zenith_rad, zenith_std_rad) = if self.radio.planar_array {
            let (zstd, _) = aoa_std_rad(&self.radio, snr, 0.0);
            let z = (true_zen + self.gaussian(zstd, rng)).clamp(0.0, PI);
            (z, Some(zstd))
        } else {
            (FRAC_PI_2, None)
        };

        Ok(AoaMeasurement {
            observer_id: observer.id,
            source_id: source.id,
            azimuth_rad,
            zenith_rad,
            std_rad,
            zenith_std_rad,
            low_quality,
            los: link.los,
        })
    }
}

fn check_reply(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("reply time must be positive, got {t}")))
    }
}

/// One row of a raw measurement dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub trial: u64,
    pub method: String,
    pub tx: NodeId,
    pub rx: NodeId,
    pub value: f64,
    pub snr_db: f64,
    pub los: bool,
}
