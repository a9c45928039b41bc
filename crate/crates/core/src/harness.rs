//! Monte Carlo experiments.
//!
//! Trial `i` draws everything from a stream seeded by `(master_seed, i)`, so
//! results do not depend on the worker count or on scheduling.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_link_canonical, ChannelModel, LinkState};
use crate::clock::{sample_clock, DriftModel, SyncErrorModel};
use crate::estimators::{
    polar_fix, solve_aoa_triangulation, solve_range_multilateration, solve_tdoa, Bearing, EstimatorMethod,
    InitStrategy, PositionEstimate, RangeObservation, SolverSettings,
};
use crate::measurement::{MeasurementModel, MeasurementRow, RadioConfig, RttKind, RttMeasurement};
use crate::protocol::{run_session, MeasurementPlan, ProtocolDelays, SessionKind};
use crate::rng::{derive_seed, stream};
use crate::scenario::{generate, select_anchors, Dimensionality, Node, Position, ScenarioConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub session_kind: SessionKind,
    pub delays: ProtocolDelays,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            session_kind: SessionKind::Usl,
            delays: ProtocolDelays::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RttConfig {
    pub kind: RttKind,
    pub t_reply1_s: f64,
    /// Used by double-sided exchanges only.
    pub t_reply2_s: f64,
}

impl Default for RttConfig {
    fn default() -> Self {
        Self {
            kind: RttKind::DoubleSided,
            t_reply1_s: 1e-3,
            t_reply2_s: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: ScenarioConfig,
    pub method: EstimatorMethod,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default = "ChannelModel::highway_like")]
    pub channel: ChannelModel,
    #[serde(default)]
    pub sync: SyncErrorModel,
    #[serde(default)]
    pub drift: DriftModel,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub rtt: RttConfig,
    #[serde(default = "yes")]
    pub noise_enabled: bool,
    /// Every link is LoS with no excess delay.
    #[serde(default)]
    pub force_los: bool,
    /// Solver settings; the dimensionality is taken from the scenario.
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_trials() -> usize {
    2000
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Fewest anchors the method can work with.
    pub fn min_anchors(&self) -> usize {
        let three_d = self.scenario.dimensionality == Dimensionality::ThreeD;
        match self.method {
            EstimatorMethod::HybridRttAoa => 1,
            EstimatorMethod::AoaTriang => 2,
            EstimatorMethod::RttMultilat | EstimatorMethod::Tdoa if three_d => 4,
            EstimatorMethod::RttMultilat | EstimatorMethod::Tdoa => 3,
            EstimatorMethod::BruteForce => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 1 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if self.method == EstimatorMethod::BruteForce {
            return Err(Error::Config("brute_force is a test oracle, not an experiment method".into()));
        }
        self.scenario.validate()?;
        self.radio.validate()?;
        self.channel.validate()?;
        self.sync.validate()?;
        self.drift.validate()?;
        self.protocol.delays.validate()?;
        self.solver.validate()?;
        if self.scenario.n_anchors < self.min_anchors() {
            return Err(Error::Config(format!(
                "{} needs at least {} anchors, n_anchors is {}",
                self.method,
                self.min_anchors(),
                self.scenario.n_anchors
            )));
        }
        if matches!(self.method, EstimatorMethod::AoaTriang | EstimatorMethod::HybridRttAoa) {
            if self.radio.n_antennas < 2 {
                return Err(Error::Config(format!(
                    "{} needs radio.n_antennas ≥ 2, got {}",
                    self.method, self.radio.n_antennas
                )));
            }
            if self.scenario.dimensionality == Dimensionality::ThreeD && !self.radio.planar_array {
                return Err(Error::Config(format!(
                    "3-D {} needs radio.planar_array for zenith",
                    self.method
                )));
            }
        }
        for t in [self.rtt.t_reply1_s, self.rtt.t_reply2_s] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("rtt reply times must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn measurement_plan(&self) -> MeasurementPlan {
        MeasurementPlan {
            method: self.method,
            rtt_kind: self.rtt.kind,
            n_anchors: if self.method == EstimatorMethod::HybridRttAoa {
                1
            } else {
                self.scenario.n_anchors
            },
        }
    }

    /// Structural session latency; identical for every trial.
    pub fn session_latency_s(&self) -> Result<f64> {
        run_session(self.protocol.session_kind, self.measurement_plan(), &self.protocol.delays)?.session_latency_s()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub true_position: Position,
    pub estimate: PositionEstimate,
    pub horizontal_error_m: f64,
    pub vertical_error_m: f64,
    pub latency_s: f64,
    pub converged: bool,
}

fn fallback(anchors: &[Node], method: EstimatorMethod) -> PositionEstimate {
    let pts: Vec<Position> = anchors.iter().map(|n| n.position).collect();
    PositionEstimate {
        position: Position::centroid(&pts).unwrap_or_default(),
        method,
        iterations: 0,
        converged: false,
        final_residual_norm: f64::NAN,
        ambiguous: false,
    }
}

struct Trial<'a> {
    config: &'a ExperimentConfig,
    model: MeasurementModel,
    channel: ChannelModel,
    settings: SolverSettings,
    latency_s: f64,
}

impl Trial<'_> {
    fn rtt<R: Rng + ?Sized>(&self, target: &Node, anchor: &Node, link: &LinkState, rng: &mut R) -> Result<RttMeasurement> {
        let rtt = &self.config.rtt;
        match rtt.kind {
            RttKind::SingleSided => self.model.rtt_single(target, anchor, rtt.t_reply1_s, link, rng),
            RttKind::DoubleSided => self.model.rtt_double(target, anchor, rtt.t_reply1_s, rtt.t_reply2_s, link, rng),
        }
    }

    fn run(&self, index: usize, mut dump: Option<&mut Vec<MeasurementRow>>) -> Result<TrialRecord> {
        let cfg = self.config;
        let trial_seed = derive_seed(cfg.master_seed, index as u64);
        let mut scenario_cfg = cfg.scenario.clone();
        scenario_cfg.seed = derive_seed(trial_seed, 0);
        let mut scenario = generate(&scenario_cfg)?;
        let mut clock_rng = stream(trial_seed, 1);
        for node in &mut scenario.nodes {
            node.clock = sample_clock(&cfg.sync, &cfg.drift, &mut clock_rng)?;
        }
        let target = scenario
            .target()
            .cloned()
            .ok_or_else(|| Error::Config("scenario has no target UE".into()))?;
        let ids = select_anchors(&scenario, target.id, cfg.scenario.n_anchors, cfg.scenario.anchor_policy, &mut stream(trial_seed, 2))?;
        let anchors: Vec<Node> = ids.iter().map(|id| scenario.node(*id).cloned().expect("selected")).collect();

        let mut channel = self.channel.clone();
        channel.los_blockage = 1.0 - (1.0 - channel.los_blockage) * (1.0 - scenario.los_blockage);
        if cfg.force_los {
            channel.los_blockage = 0.0;
            channel.los_decay_m = f64::INFINITY;
        }
        let link_seed = derive_seed(trial_seed, 3);
        let mut rng = stream(trial_seed, 4);
        let links: Vec<LinkState> = anchors
            .iter()
            .map(|a| draw_link_canonical(link_seed, &target, a, &channel, &cfg.radio))
            .collect::<Result<_>>()?;

        let mut record_row = |tx: u32, rx: u32, value: f64, link: &LinkState| {
            if let Some(rows) = dump.as_deref_mut() {
                rows.push(MeasurementRow {
                    trial: index as u64,
                    method: cfg.method.to_string(),
                    tx,
                    rx,
                    value,
                    snr_db: link.snr_db,
                    los: link.los,
                });
            }
        };

        let solved: Result<PositionEstimate> = match cfg.method {
            EstimatorMethod::RttMultilat => {
                let mut obs = Vec::with_capacity(anchors.len());
                for (a, l) in anchors.iter().zip(&links) {
                    let m = self.rtt(&target, a, l, &mut rng)?;
                    record_row(target.id, a.id, m.est_range_m, l);
                    obs.push(RangeObservation {
                        anchor: a.position,
                        range_m: m.est_range_m,
                    });
                }
                solve_range_multilateration(&obs, &self.settings)
            }
            EstimatorMethod::Tdoa => {
                let refs: Vec<&Node> = anchors.iter().collect();
                let set = self.model.tdoa_set(&target, &refs, &links, &mut rng)?;
                for d in &set.diffs {
                    let l = &links[ids.iter().position(|id| *id == d.anchor_id).expect("anchor")];
                    record_row(d.anchor_id, target.id, d.diff_m, l);
                }
                let positions: BTreeMap<_, _> = anchors.iter().map(|a| (a.id, a.position)).collect();
                solve_tdoa(&set, &positions, &self.settings)
            }
            EstimatorMethod::AoaTriang => {
                let mut bearings = Vec::with_capacity(anchors.len());
                for (a, l) in anchors.iter().zip(&links) {
                    let m = self.model.measure_aoa(a, &target, l, &mut rng)?;
                    record_row(target.id, a.id, m.azimuth_rad, l);
                    bearings.push(Bearing {
                        observer: a.position,
                        measurement: m,
                    });
                }
                solve_aoa_triangulation(&bearings, &self.settings)
            }
            EstimatorMethod::HybridRttAoa => {
                let (a, l) = (&anchors[0], &links[0]);
                let range = self.rtt(&target, a, l, &mut rng)?;
                let bearing = self.model.measure_aoa(a, &target, l, &mut rng)?;
                record_row(target.id, a.id, range.est_range_m, l);
                record_row(target.id, a.id, bearing.azimuth_rad, l);
                Ok(polar_fix(&a.position, range.est_range_m, bearing.azimuth_rad, bearing.zenith_rad))
            }
            EstimatorMethod::BruteForce => unreachable!("rejected by validate"),
        };
        let estimate = match solved {
            Ok(e) => e,
            Err(Error::Geometry(_)) => fallback(&anchors, cfg.method),
            Err(e) => return Err(e),
        };
        let truth = target.position;
        Ok(TrialRecord {
            trial_index: index,
            true_position: truth,
            horizontal_error_m: estimate.position.horizontal_distance(&truth),
            vertical_error_m: (estimate.position.z - truth.z).abs(),
            latency_s: self.latency_s,
            converged: estimate.converged,
            estimate,
        })
    }
}

fn prepare(config: &ExperimentConfig) -> Result<Trial<'_>> {
    config.validate()?;
    let mut model = MeasurementModel::new(config.radio.clone());
    model.noise_enabled = config.noise_enabled;
    model.nlos_aoa_scatter_prob = config.channel.nlos_aoa_scatter_prob;
    let mut settings = config.solver;
    settings.dimensionality = config.scenario.dimensionality;
    Ok(Trial {
        config,
        model,
        channel: config.channel.clone(),
        settings,
        latency_s: config.session_latency_s()?,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every trial on `workers` threads. Records come back in trial order.
pub fn run(config: &ExperimentConfig, workers: usize) -> Result<Vec<TrialRecord>> {
    let trial = prepare(config)?;
    pool(workers)?.install(|| {
        (0..config.n_trials)
            .into_par_iter()
            .map(|i| trial.run(i, None))
            .collect()
    })
}

/// Raw measurements of the listed trials.
pub fn dump_measurements(config: &ExperimentConfig, trials: impl IntoIterator<Item = usize>) -> Result<Vec<MeasurementRow>> {
    let trial = prepare(config)?;
    let mut rows = Vec::new();
    for i in trials {
        trial.run(i, Some(&mut rows))?;
    }
    Ok(rows)
}

/// Empirical distribution of a non-negative quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfSummary {
    sorted: Vec<f64>,
}

impl CdfSummary {
    /// NaN values sort last.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("cannot summarize an empty set".into()));
        }
        values.sort_by(|a, b| a.total_cmp(b));
        if let Some(first_nan) = values.iter().position(|v| v.is_nan()) {
            for v in &mut values[first_nan..] {
                *v = f64::INFINITY;
            }
        }
        Ok(Self { sorted: values })
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_errors(&self) -> &[f64] {
        &self.sorted
    }

    /// Nearest-rank percentile: the value at 1-based rank `ceil(p·n)`.
    pub fn percentile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let rank = (p * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        self.sorted[rank - 1]
    }

    /// Fraction of values ≤ `threshold`.
    pub fn availability(&self, threshold: f64) -> f64 {
        let count = self.sorted.partition_point(|v| *v <= threshold);
        count as f64 / self.sorted.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summaries {
    pub horizontal: CdfSummary,
    pub vertical: Option<CdfSummary>,
    pub latency: Option<CdfSummary>,
}

pub fn summarize(records: &[TrialRecord]) -> Result<Summaries> {
    if records.is_empty() {
        return Err(Error::Usage("no trial records to summarize".into()));
    }
    Ok(Summaries {
        horizontal: CdfSummary::new(records.iter().map(|r| r.horizontal_error_m).collect())?,
        vertical: Some(CdfSummary::new(records.iter().map(|r| r.vertical_error_m).collect())?),
        latency: Some(CdfSummary::new(records.iter().map(|r| r.latency_s).collect())?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BandwidthHz,
    NAnchors,
    /// Sync error standard deviation, s; 0 means perfect sync.
    SyncStdS,
    /// Maximum |drift|, ppm, drawn uniformly per node.
    DriftPpm,
    NAntennas,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::BandwidthHz => "bandwidth_hz",
            SweepAxis::NAnchors => "n_anchors",
            SweepAxis::SyncStdS => "sync_std_s",
            SweepAxis::DriftPpm => "drift_ppm",
            SweepAxis::NAntennas => "n_antennas",
        }
    }
}

/// Returns `base` with one axis set to `value`.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let count = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{} sweep needs whole numbers, got {v}", axis.as_str())))
        }
    };
    match axis {
        SweepAxis::BandwidthHz => cfg.radio.bandwidth_hz = value,
        SweepAxis::NAnchors => cfg.scenario.n_anchors = count(value)?,
        SweepAxis::SyncStdS => {
            cfg.sync = if value == 0.0 {
                SyncErrorModel::Perfect
            } else {
                match base.sync {
                    SyncErrorModel::TruncatedNormal {
                        mean_s,
                        std_s,
                        lower_s,
                        upper_s,
                    } if std_s > 0.0 => {
                        let k = value / std_s;
                        SyncErrorModel::TruncatedNormal {
                            mean_s: mean_s * k,
                            std_s: value,
                            lower_s: lower_s * k,
                            upper_s: upper_s * k,
                        }
                    }
                    _ => SyncErrorModel::symmetric(value, 2.0),
                }
            }
        }
        SweepAxis::DriftPpm => cfg.drift = DriftModel::UniformSymmetric { max_abs_ppm: value },
        SweepAxis::NAntennas => {
            if !matches!(base.method, EstimatorMethod::AoaTriang | EstimatorMethod::HybridRttAoa) {
                return Err(Error::Config(format!(
                    "n_antennas sweep has no effect on {}",
                    base.method
                )));
            }
            cfg.radio.n_antennas = count(value)? as u32;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub records: Vec<TrialRecord>,
    pub summaries: Summaries,
}

/// One full run per value. Every run keeps the base master seed, so all points
/// see the same drops and noise draws.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], workers: usize) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| apply_axis(base, axis, *v)).collect::<Result<_>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(cfg, v)| {
            let records = run(cfg, workers)?;
            let summaries = summarize(&records)?;
            Ok(SweepPoint {
                value: *v,
                records,
                summaries,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PslRequirement {
    pub name: String,
    pub horizontal_m: f64,
    #[serde(default)]
    pub vertical_m: Option<f64>,
    pub availability_frac: f64,
    #[serde(default)]
    pub latency_s: Option<f64>,
    #[serde(default)]
    pub relative: bool,
    #[serde(default)]
    pub mobility_class: String,
    /// Values are stand-ins, not quoted requirement cells.
    #[serde(default)]
    pub placeholder: bool,
}

impl PslRequirement {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = positive(self.horizontal_m)
            && self.vertical_m.is_none_or(positive)
            && self.latency_s.is_none_or(positive)
            && self.availability_frac > 0.0
            && self.availability_frac <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid requirement {}", self.name)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub clause: String,
    pub required: f64,
    pub achieved: f64,
    /// Positive when the clause is met with room to spare.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PslReport {
    pub name: String,
    pub pass: bool,
    pub clauses: Vec<ClauseResult>,
}

const AVAILABILITY_EPS: f64 = 1e-12;

/// Checks one requirement. Relative requirements are evaluated on the
/// horizontal error, which for known anchors equals the relative error.
pub fn evaluate_psl(summaries: &Summaries, psl: &PslRequirement) -> Result<PslReport> {
    psl.validate()?;
    let need = psl.availability_frac;
    let mut clauses = Vec::new();
    let avail_clause = |name: &str, summary: &CdfSummary, threshold: f64| {
        let achieved = summary.availability(threshold);
        ClauseResult {
            clause: format!("{name} ≤ {threshold} m"),
            required: need,
            achieved,
            margin: achieved - need,
            pass: achieved >= need - AVAILABILITY_EPS,
        }
    };
    clauses.push(avail_clause("horizontal", &summaries.horizontal, psl.horizontal_m));
    if let Some(v) = psl.vertical_m {
        let vs = summaries
            .vertical
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} needs a vertical error summary", psl.name)))?;
        clauses.push(avail_clause("vertical", vs, v));
    }
    if let Some(limit) = psl.latency_s {
        let ls = summaries
            .latency
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} needs a latency summary", psl.name)))?;
        let achieved = ls.percentile(need);
        clauses.push(ClauseResult {
            clause: format!("latency p{} ≤ {limit} s", need * 100.0),
            required: limit,
            achieved,
            margin: limit - achieved,
            pass: achieved <= limit,
        });
    }
    Ok(PslReport {
        name: psl.name.clone(),
        pass: clauses.iter().all(|c| c.pass),
        clauses,
    })
}

/// Built-in requirement table. PSL 1 carries the quoted extremes; the other
/// levels' cells are placeholders meant to be replaced from configuration.
pub fn default_psl_table() -> Vec<PslRequirement> {
    let row = |name: &str, h: f64, v: Option<f64>, a: f64, l: Option<f64>, rel: bool, mob: &str, ph: bool| PslRequirement {
        name: name.into(),
        horizontal_m: h,
        vertical_m: v,
        availability_frac: a,
        latency_s: l,
        relative: rel,
        mobility_class: mob.into(),
        placeholder: ph,
    };
    vec![
        row("PSL1", 10.0, Some(3.0), 0.95, Some(1.0), false, "MO250", false),
        row("PSL2", 3.0, Some(3.0), 0.99, Some(1.0), false, "MO250", true),
        row("PSL3", 1.0, Some(2.0), 0.99, Some(1.0), false, "MO250", true),
        row("PSL4", 1.0, Some(2.0), 0.999, Some(0.015), false, "MI30", true),
        row("PSL5", 0.3, Some(2.0), 0.99, Some(1.0), false, "MO250", true),
        row("PSL6", 0.3, Some(2.0), 0.999, Some(0.010), false, "MI30", true),
        row("PSL7", 0.2, None, 0.99, Some(1.0), true, "MI30", true),
    ]
}

/// V2X sidelink benchmark: 0.5 m horizontal at 90 % availability.
pub fn v2x_benchmark() -> PslRequirement {
    PslRequirement {
        name: "V2X-0.5m@90".into(),
        horizontal_m: 0.5,
        vertical_m: None,
        availability_frac: 0.9,
        latency_s: None,
        relative: false,
        mobility_class: "MO250".into(),
        placeholder: false,
    }
}

/// Highway relative-positioning benchmark: 1.5 m at 90 % availability.
pub fn relative_highway_benchmark() -> PslRequirement {
    PslRequirement {
        name: "REL-1.5m@90".into(),
        horizontal_m: 1.5,
        vertical_m: None,
        availability_frac: 0.9,
        latency_s: None,
        relative: true,
        mobility_class: "MO250".into(),
        placeholder: false,
    }
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trial: usize,
    pub method: String,
    pub bandwidth_hz: f64,
    pub n_anchors: usize,
    pub h_err_m: f64,
    pub v_err_m: f64,
    pub latency_s: f64,
    pub converged: bool,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Usage(format!("csv: {e}"))
}

pub fn result_rows(config: &ExperimentConfig, records: &[TrialRecord]) -> Vec<ResultRow> {
    records
        .iter()
        .map(|r| ResultRow {
            trial: r.trial_index,
            method: config.method.to_string(),
            bandwidth_hz: config.radio.bandwidth_hz,
            n_anchors: config.scenario.n_anchors,
            h_err_m: r.horizontal_error_m,
            v_err_m: r.vertical_error_m,
            latency_s: r.latency_s,
            converged: r.converged,
        })
        .collect()
}

pub fn write_results_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Usage(format!("csv: {e}")))
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

pub fn summarize_rows(rows: &[ResultRow]) -> Result<Summaries> {
    if rows.is_empty() {
        return Err(Error::Usage("results file has no rows".into()));
    }
    Ok(Summaries {
        horizontal: CdfSummary::new(rows.iter().map(|r| r.h_err_m).collect())?,
        vertical: Some(CdfSummary::new(rows.iter().map(|r| r.v_err_m).collect())?),
        latency: Some(CdfSummary::new(rows.iter().map(|r| r.latency_s).collect())?),
    })
}

pub fn write_measurements_csv<W: Write>(out: W, rows: &[MeasurementRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Usage(format!("csv: {e}")))
}

/// Percentiles reported in summaries.
pub const REPORTED_PERCENTILES: [(&str, f64); 5] = [("p50", 0.5), ("p67", 0.67), ("p90", 0.9), ("p95", 0.95), ("p99", 0.99)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityPoint {
    pub threshold_m: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub name: String,
    pub n_trials: usize,
    pub converged_frac: f64,
    pub horizontal: BTreeMap<String, f64>,
    pub vertical: BTreeMap<String, f64>,
    pub latency: BTreeMap<String, f64>,
    pub availability: Vec<AvailabilityPoint>,
    pub psl: Vec<PslReport>,
}

fn percentile_map(s: &CdfSummary) -> BTreeMap<String, f64> {
    REPORTED_PERCENTILES.iter().map(|(k, p)| (k.to_string(), s.percentile(*p))).collect()
}

pub fn summary_report(
    name: &str,
    records: &[TrialRecord],
    thresholds_m: &[f64],
    psl: &[PslRequirement],
) -> Result<SummaryReport> {
    let s = summarize(records)?;
    Ok(SummaryReport {
        name: name.into(),
        n_trials: records.len(),
        converged_frac: records.iter().filter(|r| r.converged).count() as f64 / records.len() as f64,
        horizontal: percentile_map(&s.horizontal),
        vertical: s.vertical.as_ref().map(percentile_map).unwrap_or_default(),
        latency: s.latency.as_ref().map(percentile_map).unwrap_or_default(),
        availability: thresholds_m
            .iter()
            .map(|t| AvailabilityPoint {
                threshold_m: *t,
                fraction: s.horizontal.availability(*t),
            })
            .collect(),
        psl: psl.iter().map(|p| evaluate_psl(&s, p)).collect::<Result<_>>()?,
    })
}

/// One row of the long-format sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Outer axis of a two-level sweep.
    pub by_axis: Option<String>,
    pub by_value: Option<f64>,
    pub axis: String,
    pub value: f64,
    pub statistic: String,
    pub result: f64,
}

pub fn sweep_rows(
    by: Option<(SweepAxis, f64)>,
    axis: SweepAxis,
    points: &[SweepPoint],
    thresholds_m: &[f64],
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for pt in points {
        let mut push = |statistic: String, result: f64| {
            rows.push(SweepRow {
                by_axis: by.map(|(a, _)| a.as_str().into()),
                by_value: by.map(|(_, v)| v),
                axis: axis.as_str().into(),
                value: pt.value,
                statistic,
                result,
            })
        };
        for (k, p) in REPORTED_PERCENTILES {
            push(format!("h_{k}"), pt.summaries.horizontal.percentile(p));
        }
        if let Some(v) = &pt.summaries.vertical {
            push("v_p90".into(), v.percentile(0.9));
        }
        for t in thresholds_m {
            push(format!("h_avail_{t}m"), pt.summaries.horizontal.availability(*t));
        }
        if let Some(l) = &pt.summaries.latency {
            push("latency_p90".into(), l.percentile(0.9));
        }
    }
    rows
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Usage(format!("csv: {e}")))
}

/// Initial guess override used by callers that know a rough position.
pub fn provided_init(position: Position) -> InitStrategy {
    InitStrategy::Provided { position }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AnchorPolicy, LayoutKind, NodeRole};
    use crate::SPEED_OF_LIGHT_M_S as C;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn summary(v: &[f64]) -> CdfSummary {
        CdfSummary::new(v.to_vec()).unwrap()
    }

    pub(crate) fn factory(method: EstimatorMethod, n_anchors: usize) -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            scenario: ScenarioConfig {
                layout: LayoutKind::IndoorFactory {
                    hall_length_m: 120.0,
                    hall_width_m: 60.0,
                    clutter_density: 0.2,
                },
                n_anchors,
                anchor_policy: AnchorPolicy::Nearest,
                dimensionality: Dimensionality::TwoD,
                seed: 0,
                candidate_anchors: None,
            },
            method,
            radio: RadioConfig::default(),
            channel: ChannelModel::urban_grid_like(),
            sync: SyncErrorModel::Perfect,
            drift: DriftModel::default(),
            n_trials: 50,
            master_seed: 11,
            protocol: ProtocolConfig::default(),
            rtt: RttConfig::default(),
            noise_enabled: true,
            force_los: false,
            solver: SolverSettings::default(),
        }
    }

    #[test]
    fn nearest_rank_examples() {
        let s = summary(&(1..=10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(s.percentile(0.9), 9.0);
        assert_eq!(s.percentile(1.0), 10.0);
        assert_eq!(s.percentile(0.0), 1.0);
        let s = summary(&[0.4, 0.6, 1.2]);
        assert_relative_eq!(s.availability(1.0), 2.0 / 3.0);
        let s = summary(&[2.5; 7]);
        for p in [0.01, 0.5, 0.9, 0.99, 1.0] {
            assert_eq!(s.percentile(p), 2.5);
        }
    }

    #[test]
    fn empty_inputs_are_usage_errors() {
        assert!(matches!(summarize(&[]), Err(Error::Usage(_))));
        assert!(matches!(CdfSummary::new(vec![]), Err(Error::Usage(_))));
    }

    #[test]
    fn nan_sorts_as_outage() {
        let s = summary(&[1.0, f64::NAN, 0.5]);
        assert_eq!(s.percentile(1.0), f64::INFINITY);
        assert_relative_eq!(s.availability(10.0), 2.0 / 3.0);
    }

    #[test]
    fn zero_noise_end_to_end() {
        for method in [EstimatorMethod::RttMultilat, EstimatorMethod::Tdoa, EstimatorMethod::AoaTriang, EstimatorMethod::HybridRttAoa] {
            let cfg = ExperimentConfig {
                n_trials: 1,
                noise_enabled: false,
                force_los: true,
                channel: ChannelModel::highway_like(),
                ..factory(method, 4)
            };
            let recs = run(&cfg, 1).unwrap();
            assert!(recs[0].horizontal_error_m <= 1e-6, "{method}: {}", recs[0].horizontal_error_m);
        }
    }

    #[test]
    fn tdoa_sync_median_tracks_hdop() {
        // three anchors 120° apart on a 300 m circle, so the 15 m sync error stays linear
        let target = Position::new(0.0, 0.0, 1.5);
        let mut nodes = vec![Node::new(0, NodeRole::TargetUe, target)];
        let anchors: Vec<Position> = (0..3)
            .map(|k| {
                let a = 0.3 + k as f64 * std::f64::consts::TAU / 3.0;
                Position::new(300.0 * a.cos(), 300.0 * a.sin(), 1.5)
            })
            .collect();
        nodes.extend(anchors.iter().enumerate().map(|(k, a)| Node::new(k as u32 + 1, NodeRole::AnchorUe, *a)));
        let mut cfg = ExperimentConfig {
            sync: SyncErrorModel::symmetric(50e-9, 2.0),
            n_trials: 400,
            noise_enabled: false,
            force_los: true,
            ..factory(EstimatorMethod::Tdoa, 3)
        };
        cfg.scenario.layout = LayoutKind::CustomFixed { nodes };
        let s = summarize(&run(&cfg, 4).unwrap()).unwrap();
        let mut h = nalgebra::DMatrix::<f64>::zeros(3, 3);
        for (r, a) in anchors.iter().enumerate() {
            let u = (target - *a).xy().normalize();
            h[(r, 0)] = u.x;
            h[(r, 1)] = u.y;
            h[(r, 2)] = 1.0;
        }
        let cov = (h.transpose() * h).try_inverse().unwrap();
        let hdop = (cov[(0, 0)] + cov[(1, 1)]).sqrt();
        assert_relative_eq!(hdop, (4.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        let scale = C * 50e-9 * hdop;
        let median = s.horizontal.percentile(0.5);
        assert!((0.6 * scale..=1.6 * scale).contains(&median), "{median} vs {scale}");
        assert_relative_eq!(median, 14.180_072_889_820_709, max_relative = 1e-9);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = factory(EstimatorMethod::Tdoa, 4);
        assert_eq!(run(&cfg, 1).unwrap(), run(&cfg, 8).unwrap());
    }

    #[test]
    fn trial_latency_matches_session() {
        let cfg = factory(EstimatorMethod::RttMultilat, 3);
        let recs = run(&cfg, 2).unwrap();
        let l = cfg.session_latency_s().unwrap();
        assert!(recs.iter().all(|r| r.latency_s == l));
    }

    #[test]
    fn anchor_minimums_enforced() {
        assert!(factory(EstimatorMethod::Tdoa, 2).validate().is_err());
        assert!(factory(EstimatorMethod::HybridRttAoa, 1).validate().is_ok());
        let mut cfg = factory(EstimatorMethod::RttMultilat, 3);
        cfg.scenario.dimensionality = Dimensionality::ThreeD;
        assert!(cfg.validate().is_err());
        assert!(factory(EstimatorMethod::BruteForce, 3).validate().is_err());
    }

    #[test]
    fn n_antennas_sweep_rejected_for_timing_methods() {
        let err = apply_axis(&factory(EstimatorMethod::Tdoa, 4), SweepAxis::NAntennas, 8.0);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(apply_axis(&factory(EstimatorMethod::AoaTriang, 4), SweepAxis::NAntennas, 8.0).is_ok());
    }

    #[test]
    fn sync_axis_scales_truncation() {
        let mut base = factory(EstimatorMethod::Tdoa, 4);
        base.sync = SyncErrorModel::symmetric(10e-9, 3.0);
        let cfg = apply_axis(&base, SweepAxis::SyncStdS, 20e-9).unwrap();
        assert_eq!(cfg.sync, SyncErrorModel::symmetric(20e-9, 3.0));
        assert_eq!(apply_axis(&base, SweepAxis::SyncStdS, 0.0).unwrap().sync, SyncErrorModel::Perfect);
    }

    #[test]
    fn sweep_points_share_drops() {
        let base = ExperimentConfig {
            n_trials: 20,
            ..factory(EstimatorMethod::Tdoa, 4)
        };
        assert_eq!(apply_axis(&base, SweepAxis::BandwidthHz, 40e6).unwrap().master_seed, base.master_seed);
        let pts = sweep(&base, SweepAxis::BandwidthHz, &[20e6, 100e6], 2).unwrap();
        for (a, b) in pts[0].records.iter().zip(&pts[1].records) {
            assert_eq!(a.true_position, b.true_position);
        }
        assert!(sweep(&base, SweepAxis::BandwidthHz, &[], 1).is_err());
    }

    #[test]
    fn psl_all_small_errors_pass() {
        let s = Summaries {
            horizontal: summary(&[0.1; 20]),
            vertical: None,
            latency: None,
        };
        let r = evaluate_psl(&s, &v2x_benchmark()).unwrap();
        assert!(r.pass);
        assert_relative_eq!(r.clauses[0].margin, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn psl_boundary_is_inclusive() {
        let mut errs = vec![1.0; 9];
        errs.push(2.0);
        let s = Summaries {
            horizontal: summary(&errs),
            vertical: None,
            latency: None,
        };
        assert_eq!(s.horizontal.availability(1.5), 0.9);
        assert!(evaluate_psl(&s, &relative_highway_benchmark()).unwrap().pass);
    }

    #[test]
    fn psl_missing_dimension_is_usage_error() {
        let s = Summaries {
            horizontal: summary(&[0.1]),
            vertical: None,
            latency: None,
        };
        assert!(matches!(evaluate_psl(&s, &default_psl_table()[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn psl_latency_clause() {
        let s = Summaries {
            horizontal: summary(&[0.1; 10]),
            vertical: Some(summary(&[0.1; 10])),
            latency: Some(summary(&[0.02; 10])),
        };
        let table = default_psl_table();
        assert!(evaluate_psl(&s, &table[0]).unwrap().pass);
        let psl6 = evaluate_psl(&s, &table[5]).unwrap();
        assert!(!psl6.pass);
        assert!(psl6.clauses.iter().any(|c| c.clause.starts_with("latency") && !c.pass));
    }

    #[test]
    fn default_table_shape() {
        let t = default_psl_table();
        assert_eq!(t.len(), 7);
        assert!(t.iter().all(|p| p.validate().is_ok()));
        assert!(t.iter().filter(|p| p.relative).count() == 1);
        assert_eq!(t[0].horizontal_m, 10.0);
        assert_eq!(t[0].availability_frac, 0.95);
    }

    #[test]
    fn results_csv_roundtrip() {
        let cfg = factory(EstimatorMethod::Tdoa, 4);
        let recs = run(&cfg, 2).unwrap();
        let rows = result_rows(&cfg, &recs);
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("trial,method,bandwidth_hz,n_anchors,h_err_m,v_err_m,latency_s,converged\n"));
        let back = read_results_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let s = summarize_rows(&back).unwrap();
        assert_eq!(s.horizontal, summarize(&recs).unwrap().horizontal);
    }

    #[test]
    fn measurement_dump_columns() {
        let cfg = factory(EstimatorMethod::RttMultilat, 3);
        let rows = dump_measurements(&cfg, [0, 1]).unwrap();
        assert_eq!(rows.len(), 6);
        let mut buf = Vec::new();
        write_measurements_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("trial,method,tx,rx,value,snr_db,los\n"));
    }

    #[test]
    fn summary_report_contents() {
        let cfg = factory(EstimatorMethod::Tdoa, 4);
        let recs = run(&cfg, 2).unwrap();
        let rep = summary_report("x", &recs, &[0.5, 1.0], &default_psl_table()).unwrap();
        assert_eq!(rep.horizontal.len(), 5);
        assert_eq!(rep.availability.len(), 2);
        assert_eq!(rep.psl.len(), 7);
        assert!(rep.horizontal["p50"] <= rep.horizontal["p99"]);
    }

    proptest! {
        #[test]
        fn percentile_and_availability_monotone(
            v in prop::collection::vec(0.0..100.0f64, 1..200),
            p1 in 0.0..1.0f64, p2 in 0.0..1.0f64,
            t1 in 0.0..120.0f64, t2 in 0.0..120.0f64,
        ) {
            let s = summary(&v);
            let (pl, ph) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(s.percentile(pl) <= s.percentile(ph));
            let (tl, th) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(s.availability(tl) <= s.availability(th));
            prop_assert_eq!(s.availability(f64::INFINITY), 1.0);
        }
    }
}
