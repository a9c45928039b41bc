//! Simplified sidelink propagation: log-distance path loss with separate
//! LoS/NLoS exponents, log-normal shadowing, an exponential LoS probability
//! and a one-sided NLoS excess delay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::measurement::RadioConfig;
use crate::rng::derive_seed;
use crate::scenario::Node;
use crate::{Error, NodeId, Result};

/// Thermal noise power spectral density at 290 K, dBm/Hz.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExcessDelayModel {
    Exponential { mean_s: f64 },
    Fixed { bias_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    /// Path loss at 1 m, dB.
    pub reference_loss_db: f64,
    pub pathloss_exponent: f64,
    pub pathloss_exponent_nlos: f64,
    pub shadowing_std_db: f64,
    /// LoS probability e-folding distance, m.
    pub los_decay_m: f64,
    pub nlos_excess_delay: ExcessDelayModel,
    /// Probability that an NLoS link's AoA is replaced by a scatter direction.
    #[serde(default = "one")]
    pub nlos_aoa_scatter_prob: f64,
    /// Distance-independent blocking probability multiplying the LoS
    /// probability; set from the scenario (factory clutter).
    #[serde(default)]
    pub los_blockage: f64,
}

fn one() -> f64 {
    1.0
}

impl ChannelModel {
    /// Free-space loss at 1 m for the given carrier: `20·log10(4π/λ)`.
    pub fn free_space_reference_loss_db(carrier_hz: f64) -> f64 {
        let wavelength = crate::SPEED_OF_LIGHT_M_S / carrier_hz;
        20.0 * (4.0 * std::f64::consts::PI / wavelength).log10()
    }

    /// Highway-like fragment: long LoS runs, mild shadowing, short NLoS tails.
    pub fn highway_like() -> Self {
        Self {
            reference_loss_db: 47.9,
            pathloss_exponent: 2.0,
            pathloss_exponent_nlos: 3.0,
            shadowing_std_db: 1.0,
            los_decay_m: 20_000.0,
            nlos_excess_delay: ExcessDelayModel::Exponential { mean_s: 5e-9 },
            nlos_aoa_scatter_prob: 1.0,
            los_blockage: 0.0,
        }
    }

    /// Urban-grid-like fragment: frequent blockage around corners.
    pub fn urban_grid_like() -> Self {
        Self {
            reference_loss_db: 47.9,
            pathloss_exponent: 2.2,
            pathloss_exponent_nlos: 3.5,
            shadowing_std_db: 6.0,
            los_decay_m: 80.0,
            nlos_excess_delay: ExcessDelayModel::Exponential { mean_s: 20e-9 },
            nlos_aoa_scatter_prob: 1.0,
            los_blockage: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.reference_loss_db.is_finite()
            && self.pathloss_exponent >= 1.5
            && self.pathloss_exponent_nlos >= 1.5
            && self.shadowing_std_db >= 0.0
            && self.los_decay_m > 0.0
            && (0.0..=1.0).contains(&self.nlos_aoa_scatter_prob)
            && (0.0..=1.0).contains(&self.los_blockage);
        let delay_ok = match self.nlos_excess_delay {
            ExcessDelayModel::Exponential { mean_s } => mean_s.is_finite() && mean_s >= 0.0,
            ExcessDelayModel::Fixed { bias_s } => bias_s.is_finite() && bias_s >= 0.0,
        };
        if ok && delay_ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid channel model {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub los: bool,
    pub snr_db: f64,
    /// Extra propagation delay of the first detectable path, s. Zero on LoS links.
    pub excess_delay_s: f64,
}

impl LinkState {
    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }
}

pub fn los_probability(distance_m: f64, model: &ChannelModel) -> f64 {
    (1.0 - model.los_blockage) * (-distance_m / model.los_decay_m).exp()
}

/// Receiver noise power over the configured bandwidth, dBm.
pub fn noise_floor_dbm(radio: &RadioConfig) -> f64 {
    THERMAL_NOISE_DBM_PER_HZ + 10.0 * radio.bandwidth_hz.log10() + radio.noise_figure_db
}

/// Path loss without shadowing, dB.
pub fn path_loss_db(distance_m: f64, los: bool, model: &ChannelModel) -> f64 {
    let exponent = if los {
        model.pathloss_exponent
    } else {
        model.pathloss_exponent_nlos
    };
    model.reference_loss_db + 10.0 * exponent * distance_m.log10()
}

pub fn snr_db<R: Rng + ?Sized>(
    tx_power_dbm: f64,
    distance_m: f64,
    los: bool,
    radio: &RadioConfig,
    model: &ChannelModel,
    rng: &mut R,
) -> f64 {
    let shadowing = if model.shadowing_std_db > 0.0 {
        Normal::new(0.0, model.shadowing_std_db)
            .expect("validated std")
            .sample(rng)
    } else {
        0.0
    };
    tx_power_dbm - (path_loss_db(distance_m, los, model) + shadowing) - noise_floor_dbm(radio)
}

/// Draws LoS state, excess delay and SNR for one link.
pub fn draw_link<R: Rng + ?Sized>(
    tx: &Node,
    rx: &Node,
    model: &ChannelModel,
    radio: &RadioConfig,
    rng: &mut R,
) -> Result<LinkState> {
    let d = tx.position.distance(&rx.position);
    if d < 1e-9 {
        return Err(Error::Geometry(format!(
            "nodes {} and {} are coincident",
            tx.id, rx.id
        )));
    }
    let los = rng.random_bool(los_probability(d, model).clamp(0.0, 1.0));
    let excess_delay_s = if los {
        0.0
    } else {
        match model.nlos_excess_delay {
            ExcessDelayModel::Fixed { bias_s } => bias_s,
            ExcessDelayModel::Exponential { mean_s } if mean_s > 0.0 => {
                Exp::new(1.0 / mean_s).expect("positive rate").sample(rng)
            }
            ExcessDelayModel::Exponential { .. } => 0.0,
        }
    };
    let snr_db = snr_db(radio.tx_power_dbm, d, los, radio, model, rng);
    Ok(LinkState {
        los,
        snr_db,
        excess_delay_s,
    })
}

/// Order-independent per-link seed so that (a, b) and (b, a) draw the same link.
pub fn pair_seed(base: u64, a: NodeId, b: NodeId) -> u64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    derive_seed(base, ((lo as u64) << 32) | hi as u64)
}

/// Draws the link between `a` and `b` from the pair's own stream.
pub fn draw_link_canonical(
    base_seed: u64,
    a: &Node,
    b: &Node,
    model: &ChannelModel,
    radio: &RadioConfig,
) -> Result<LinkState> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(base_seed, a.id, b.id));
    let (tx, rx) = if a.id <= b.id { (a, b) } else { (b, a) };
    draw_link(tx, rx, model, radio, &mut rng)
}
