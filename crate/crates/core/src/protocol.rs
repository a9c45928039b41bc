//! Positioning session state machine.
//!
//! Three session kinds share one stage graph:
//!
//! ```text
//! NslMtLr: Requested → AnchorSelection → CapabilityExchange → AssistanceRequested
//!          → AssistanceDelivered → Measuring → Computing → Reported
//! NslMoLr: Requested → PrivacyCheck → AnchorSelection → … (as NslMtLr)
//! Usl:     Requested → AnchorSelection → CapabilityExchange → Measuring
//!          → Computing → Reported
//! ```
//!
//! Any non-terminal state moves to `Failed` on [`Event::Drop`]. Stages run
//! strictly one after another; latency is the sum of every emitted message's
//! delay plus each stage's processing time.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::estimators::EstimatorMethod;
use crate::measurement::{prs_transmissions, RttKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    TargetUe,
    AnchorUe,
    Amf,
    Lmf,
    Gmlc,
    SlServer,
}

impl EntityKind {
    pub fn is_core_network(self) -> bool {
        matches!(self, EntityKind::Amf | EntityKind::Lmf | EntityKind::Gmlc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    NslMtLr,
    NslMoLr,
    Usl,
}

impl SessionKind {
    pub fn is_network(self) -> bool {
        !matches!(self, SessionKind::Usl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    Requested,
    PrivacyCheck,
    AnchorSelection,
    CapabilityExchange,
    AssistanceRequested,
    AssistanceDelivered,
    Measuring,
    Computing,
    Reported,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Reported | SessionState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    CheckPrivacy,
    SelectAnchors,
    ExchangeCapabilities,
    RequestAssistance,
    DeliverAssistance,
    Measure,
    Compute,
    Report,
    Drop,
}

pub const ALL_EVENTS: [Event; 9] = [
    Event::CheckPrivacy,
    Event::SelectAnchors,
    Event::ExchangeCapabilities,
    Event::RequestAssistance,
    Event::DeliverAssistance,
    Event::Measure,
    Event::Compute,
    Event::Report,
    Event::Drop,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Request,
    PrivacyQuery,
    AnchorInvite,
    CapabilityInfo,
    AssistanceRequest,
    AssistanceData,
    PrsExchange,
    Result,
}

/// Capability advertisement carried by [`MessageKind::CapabilityInfo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub supported_methods: Vec<EstimatorMethod>,
    pub n_antennas: u32,
    pub bandwidth_hz: f64,
    /// Opaque; carried but never interpreted.
    pub computation_power: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: EntityKind,
    pub to: EntityKind,
    pub kind: MessageKind,
    pub delay_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<Capability>,
}

/// Fixed delays per message kind plus per-stage processing, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolDelays {
    pub request_s: f64,
    pub privacy_query_s: f64,
    pub anchor_invite_s: f64,
    pub capability_info_s: f64,
    pub assistance_request_s: f64,
    pub assistance_data_s: f64,
    pub prs_exchange_s: f64,
    pub result_s: f64,
    /// Processing time charged on entering each stage.
    pub stage_processing_s: f64,
    /// Extra processing charged in the Computing stage.
    pub compute_s: f64,
}

impl Default for ProtocolDelays {
    fn default() -> Self {
        Self {
            request_s: 1e-3,
            privacy_query_s: 2e-3,
            anchor_invite_s: 1e-3,
            capability_info_s: 1e-3,
            assistance_request_s: 2e-3,
            assistance_data_s: 2e-3,
            prs_exchange_s: 0.5e-3,
            result_s: 1e-3,
            stage_processing_s: 0.0,
            compute_s: 1e-3,
        }
    }
}

impl ProtocolDelays {
    /// Every delay set to `d`, no processing time.
    pub fn uniform(d: f64) -> Self {
        Self {
            request_s: d,
            privacy_query_s: d,
            anchor_invite_s: d,
            capability_info_s: d,
            assistance_request_s: d,
            assistance_data_s: d,
            prs_exchange_s: d,
            result_s: d,
            stage_processing_s: 0.0,
            compute_s: 0.0,
        }
    }

    pub fn delay(&self, kind: MessageKind) -> f64 {
        match kind {
            MessageKind::Request => self.request_s,
            MessageKind::PrivacyQuery => self.privacy_query_s,
            MessageKind::AnchorInvite => self.anchor_invite_s,
            MessageKind::CapabilityInfo => self.capability_info_s,
            MessageKind::AssistanceRequest => self.assistance_request_s,
            MessageKind::AssistanceData => self.assistance_data_s,
            MessageKind::PrsExchange => self.prs_exchange_s,
            MessageKind::Result => self.result_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.request_s,
            self.privacy_query_s,
            self.anchor_invite_s,
            self.capability_info_s,
            self.assistance_request_s,
            self.assistance_data_s,
            self.prs_exchange_s,
            self.result_s,
            self.stage_processing_s,
            self.compute_s,
        ];
        if all.iter().all(|d| d.is_finite() && *d >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("protocol delays must be finite and ≥ 0: {self:?}")))
        }
    }
}

/// What the Measuring stage has to carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub method: EstimatorMethod,
    pub rtt_kind: RttKind,
    pub n_anchors: usize,
}

impl MeasurementPlan {
    pub fn prs_count(&self) -> usize {
        prs_transmissions(self.method, self.rtt_kind, self.n_anchors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: usize,
    pub from: EntityKind,
    pub to: EntityKind,
    pub kind: MessageKind,
    pub cumulative_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    kind: SessionKind,
    state: SessionState,
    plan: MeasurementPlan,
    delays: ProtocolDelays,
    capability: Capability,
    trace: Vec<TraceEntry>,
    latency_s: f64,
}

impl Session {
    /// Opens a session. The participants must include the entities the
    /// session kind relies on.
    pub fn start(
        kind: SessionKind,
        participants: &[EntityKind],
        plan: MeasurementPlan,
        delays: ProtocolDelays,
    ) -> Result<Self> {
        delays.validate()?;
        let has = |e: EntityKind| participants.contains(&e);
        let mut missing = Vec::new();
        if !has(EntityKind::TargetUe) {
            missing.push("TargetUe");
        }
        if !has(EntityKind::AnchorUe) {
            missing.push("AnchorUe");
        }
        match kind {
            SessionKind::NslMtLr | SessionKind::NslMoLr => {
                if !has(EntityKind::Amf) {
                    missing.push("Amf");
                }
                if !has(EntityKind::Lmf) {
                    missing.push("Lmf");
                }
                if kind == SessionKind::NslMoLr && !has(EntityKind::Gmlc) {
                    missing.push("Gmlc");
                }
            }
            SessionKind::Usl => {
                if !has(EntityKind::SlServer) {
                    missing.push("SlServer");
                }
                if participants.iter().any(|e| e.is_core_network()) {
                    return Err(Error::Config("USL sessions cannot include Amf, Lmf or Gmlc".into()));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{kind:?} session is missing {}",
                missing.join(", ")
            )));
        }
        Ok(Self {
            kind,
            state: SessionState::Requested,
            plan,
            delays,
            capability: Capability {
                supported_methods: vec![plan.method],
                n_antennas: 1,
                bandwidth_hz: 0.0,
                computation_power: 0,
            },
            trace: Vec::new(),
            latency_s: 0.0,
        })
    }

    pub fn with_capability(mut self, capability: Capability) -> Self {
        self.capability = capability;
        self
    }

    pub fn kind(&self) -> SessionKind {
        self.kind
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    fn next_state(&self, event: Event) -> Option<SessionState> {
        use SessionState as S;
        let nsl = self.kind.is_network();
        let next = match (self.state, event) {
            (s, Event::Drop) if !s.is_terminal() && s != S::Idle => S::Failed,
            (S::Requested, Event::CheckPrivacy) if self.kind == SessionKind::NslMoLr => S::PrivacyCheck,
            (S::Requested, Event::SelectAnchors) if self.kind != SessionKind::NslMoLr => S::AnchorSelection,
            (S::PrivacyCheck, Event::SelectAnchors) => S::AnchorSelection,
            (S::AnchorSelection, Event::ExchangeCapabilities) => S::CapabilityExchange,
            (S::CapabilityExchange, Event::RequestAssistance) if nsl => S::AssistanceRequested,
            (S::AssistanceRequested, Event::DeliverAssistance) => S::AssistanceDelivered,
            (S::AssistanceDelivered, Event::Measure) if nsl => S::Measuring,
            (S::CapabilityExchange, Event::Measure) if !nsl => S::Measuring,
            (S::Measuring, Event::Compute) => S::Computing,
            (S::Computing, Event::Report) => S::Reported,
            _ => return None,
        };
        Some(next)
    }

    fn message(&self, from: EntityKind, to: EntityKind, kind: MessageKind) -> Message {
        Message {
            from,
            to,
            kind,
            delay_s: self.delays.delay(kind),
            capability: (kind == MessageKind::CapabilityInfo).then(|| self.capability.clone()),
        }
    }

    fn emitted(&self, event: Event) -> Vec<Message> {
        use EntityKind::*;
        use MessageKind as K;
        let n = self.plan.n_anchors.max(1);
        let m = |f, t, k| self.message(f, t, k);
        let nsl = self.kind.is_network();
        match event {
            Event::CheckPrivacy => vec![m(TargetUe, Gmlc, K::PrivacyQuery), m(Gmlc, Amf, K::Request)],
            Event::SelectAnchors => {
                let (origin, first) = match self.kind {
                    SessionKind::NslMtLr => (Amf, m(Amf, TargetUe, K::Request)),
                    SessionKind::NslMoLr => (Amf, m(Amf, TargetUe, K::Request)),
                    SessionKind::Usl => (SlServer, m(TargetUe, SlServer, K::Request)),
                };
                std::iter::once(first)
                    .chain((0..n).map(|_| m(origin, AnchorUe, K::AnchorInvite)))
                    .collect()
            }
            Event::ExchangeCapabilities => {
                if nsl {
                    (0..n)
                        .flat_map(|_| [m(TargetUe, AnchorUe, K::CapabilityInfo), m(AnchorUe, TargetUe, K::CapabilityInfo)])
                        .collect()
                } else {
                    std::iter::once(m(TargetUe, SlServer, K::CapabilityInfo))
                        .chain((0..n).map(|_| m(AnchorUe, SlServer, K::CapabilityInfo)))
                        .collect()
                }
            }
            Event::RequestAssistance => vec![m(TargetUe, Amf, K::AssistanceRequest), m(Amf, Lmf, K::AssistanceRequest)],
            Event::DeliverAssistance => vec![m(Lmf, TargetUe, K::AssistanceData)],
            Event::Measure => (0..self.plan.prs_count())
                .map(|_| m(AnchorUe, TargetUe, K::PrsExchange))
                .collect(),
            Event::Compute => {
                if nsl {
                    Vec::new()
                } else {
                    vec![m(TargetUe, SlServer, K::Result)]
                }
            }
            Event::Report => {
                if nsl {
                    vec![m(Lmf, Amf, K::Result)]
                } else {
                    vec![m(SlServer, TargetUe, K::Result)]
                }
            }
            Event::Drop => Vec::new(),
        }
    }

    /// Advances one stage, returning the messages the stage emitted.
    pub fn step(&mut self, event: Event) -> Result<Vec<Message>> {
        let next = self.next_state(event).ok_or_else(|| Error::Protocol {
            state: format!("{:?}", self.state),
            event: format!("{event:?}"),
        })?;
        let messages = self.emitted(event);
        if next != SessionState::Failed {
            self.latency_s += self.delays.stage_processing_s;
        }
        if next == SessionState::Computing {
            self.latency_s += self.delays.compute_s;
        }
        for msg in &messages {
            self.latency_s += msg.delay_s;
            self.trace.push(TraceEntry {
                seq: self.trace.len(),
                from: msg.from,
                to: msg.to,
                kind: msg.kind,
                cumulative_latency_s: self.latency_s,
            });
        }
        self.state = next;
        Ok(messages)
    }

    /// Total latency once the session has ended.
    pub fn session_latency_s(&self) -> Result<f64> {
        if self.state.is_terminal() {
            Ok(self.latency_s)
        } else {
            Err(Error::State(format!("session still in {:?}", self.state)))
        }
    }

    /// Writes the trace as JSON lines.
    pub fn write_trace_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in &self.trace {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Events that drive a session of `kind` from Requested to Reported.
pub fn happy_path(kind: SessionKind) -> Vec<Event> {
    let mut events = Vec::new();
    if kind == SessionKind::NslMoLr {
        events.push(Event::CheckPrivacy);
    }
    events.extend([Event::SelectAnchors, Event::ExchangeCapabilities]);
    if kind.is_network() {
        events.extend([Event::RequestAssistance, Event::DeliverAssistance]);
    }
    events.extend([Event::Measure, Event::Compute, Event::Report]);
    events
}

/// Entities a session of `kind` needs.
pub fn default_participants(kind: SessionKind) -> Vec<EntityKind> {
    use EntityKind::*;
    match kind {
        SessionKind::NslMtLr => vec![TargetUe, AnchorUe, Amf, Lmf],
        SessionKind::NslMoLr => vec![TargetUe, AnchorUe, Amf, Lmf, Gmlc],
        SessionKind::Usl => vec![TargetUe, AnchorUe, SlServer],
    }
}

/// Runs a full happy-path session and returns it in the Reported state.
pub fn run_session(kind: SessionKind, plan: MeasurementPlan, delays: &ProtocolDelays) -> Result<Session> {
    let mut session = Session::start(kind, &default_participants(kind), plan, delays.clone())?;
    for event in happy_path(kind) {
        session.step(event)?;
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(method: EstimatorMethod, rtt_kind: RttKind, n: usize) -> MeasurementPlan {
        MeasurementPlan {
            method,
            rtt_kind,
            n_anchors: n,
        }
    }

    fn tdoa3() -> MeasurementPlan {
        plan(EstimatorMethod::Tdoa, RttKind::DoubleSided, 3)
    }

    #[test]
    fn usl_with_ues_and_server_starts() {
        let s = Session::start(
            SessionKind::Usl,
            &[EntityKind::TargetUe, EntityKind::AnchorUe, EntityKind::SlServer],
            tdoa3(),
            ProtocolDelays::default(),
        )
        .unwrap();
        assert_eq!(s.state(), SessionState::Requested);
        assert!(s.trace().is_empty());
    }

    #[test]
    fn missing_entities_rejected() {
        let err = Session::start(
            SessionKind::NslMtLr,
            &[EntityKind::TargetUe, EntityKind::AnchorUe, EntityKind::Amf],
            tdoa3(),
            ProtocolDelays::default(),
        );
        assert!(matches!(err, Err(Error::Config(ref m)) if m.contains("Lmf")));
        let err = Session::start(
            SessionKind::NslMoLr,
            &default_participants(SessionKind::NslMtLr),
            tdoa3(),
            ProtocolDelays::default(),
        );
        assert!(matches!(err, Err(Error::Config(ref m)) if m.contains("Gmlc")));
        let err = Session::start(
            SessionKind::Usl,
            &[EntityKind::TargetUe, EntityKind::AnchorUe, EntityKind::SlServer, EntityKind::Lmf],
            tdoa3(),
            ProtocolDelays::default(),
        );
        assert!(err.is_err());
        let err = Session::start(SessionKind::Usl, &[EntityKind::TargetUe, EntityKind::SlServer], tdoa3(), ProtocolDelays::default());
        assert!(err.is_err());
    }

    #[test]
    fn mo_lr_first_message_goes_to_gmlc() {
        let s = run_session(SessionKind::NslMoLr, tdoa3(), &ProtocolDelays::default()).unwrap();
        assert_eq!(s.trace()[0].to, EntityKind::Gmlc);
    }

    fn states(kind: SessionKind) -> Vec<SessionState> {
        let mut s = Session::start(kind, &default_participants(kind), tdoa3(), ProtocolDelays::default()).unwrap();
        let mut out = vec![s.state()];
        for e in happy_path(kind) {
            s.step(e).unwrap();
            out.push(s.state());
        }
        out
    }

    #[test]
    fn mt_lr_state_sequence() {
        use SessionState::*;
        assert_eq!(
            states(SessionKind::NslMtLr),
            vec![
                Requested,
                AnchorSelection,
                CapabilityExchange,
                AssistanceRequested,
                AssistanceDelivered,
                Measuring,
                Computing,
                Reported
            ]
        );
    }

    #[test]
    fn usl_state_sequence() {
        use SessionState::*;
        assert_eq!(
            states(SessionKind::Usl),
            vec![Requested, AnchorSelection, CapabilityExchange, Measuring, Computing, Reported]
        );
    }

    #[test]
    fn mo_lr_visits_privacy_check() {
        let s = states(SessionKind::NslMoLr);
        assert_eq!(s[1], SessionState::PrivacyCheck);
        assert_eq!(s.last(), Some(&SessionState::Reported));
    }

    #[test]
    fn measure_in_requested_is_protocol_error() {
        let mut s = Session::start(
            SessionKind::NslMtLr,
            &default_participants(SessionKind::NslMtLr),
            tdoa3(),
            ProtocolDelays::default(),
        )
        .unwrap();
        let err = s.step(Event::Measure).unwrap_err();
        assert_eq!(
            err,
            Error::Protocol {
                state: "Requested".into(),
                event: "Measure".into()
            }
        );
        assert_eq!(s.state(), SessionState::Requested);
    }

    #[test]
    fn latency_requires_terminal_state() {
        let s = Session::start(SessionKind::Usl, &default_participants(SessionKind::Usl), tdoa3(), ProtocolDelays::default()).unwrap();
        assert!(matches!(s.session_latency_s(), Err(Error::State(_))));
    }

    #[test]
    fn zero_delays_zero_latency() {
        for kind in [SessionKind::NslMtLr, SessionKind::NslMoLr, SessionKind::Usl] {
            let s = run_session(kind, tdoa3(), &ProtocolDelays::uniform(0.0)).unwrap();
            assert_eq!(s.session_latency_s().unwrap(), 0.0);
        }
    }

    #[test]
    fn double_sided_slower_than_single_sided() {
        let d = ProtocolDelays::uniform(1e-3);
        let ss = run_session(SessionKind::Usl, plan(EstimatorMethod::RttMultilat, RttKind::SingleSided, 3), &d).unwrap();
        let ds = run_session(SessionKind::Usl, plan(EstimatorMethod::RttMultilat, RttKind::DoubleSided, 3), &d).unwrap();
        assert!(ds.session_latency_s().unwrap() > ss.session_latency_s().unwrap());
    }

    #[test]
    fn tdoa_measuring_contributes_n_delays() {
        let d = ProtocolDelays {
            prs_exchange_s: 0.7e-3,
            ..ProtocolDelays::uniform(0.0)
        };
        let mut s = Session::start(SessionKind::NslMtLr, &default_participants(SessionKind::NslMtLr), tdoa3(), d).unwrap();
        for e in happy_path(SessionKind::NslMtLr) {
            let before = s.latency_s;
            let msgs = s.step(e).unwrap();
            if e == Event::Measure {
                assert_eq!(msgs.len(), 3);
                assert!((s.latency_s - before - 3.0 * 0.7e-3).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn drop_fails_and_terminates() {
        let mut s = Session::start(SessionKind::Usl, &default_participants(SessionKind::Usl), tdoa3(), ProtocolDelays::default()).unwrap();
        s.step(Event::SelectAnchors).unwrap();
        s.step(Event::Drop).unwrap();
        assert_eq!(s.state(), SessionState::Failed);
        assert!(s.session_latency_s().is_ok());
        assert!(s.step(Event::Drop).is_err());
    }

    #[test]
    fn capability_payload_attached() {
        let cap = Capability {
            supported_methods: vec![EstimatorMethod::AoaTriang],
            n_antennas: 8,
            bandwidth_hz: 100e6,
            computation_power: 3,
        };
        let mut s = Session::start(SessionKind::Usl, &default_participants(SessionKind::Usl), tdoa3(), ProtocolDelays::default())
            .unwrap()
            .with_capability(cap.clone());
        s.step(Event::SelectAnchors).unwrap();
        let msgs = s.step(Event::ExchangeCapabilities).unwrap();
        assert!(msgs.iter().all(|m| m.capability.as_ref() == Some(&cap)));
    }

    #[test]
    fn trace_jsonl_lines() {
        let s = run_session(SessionKind::NslMoLr, tdoa3(), &ProtocolDelays::default()).unwrap();
        let mut buf = Vec::new();
        s.write_trace_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["to"], "Gmlc");
        assert_eq!(first["seq"], 0);
        assert_eq!(text.lines().count(), s.trace().len());
    }

    fn kinds() -> impl Strategy<Value = SessionKind> {
        prop_oneof![Just(SessionKind::NslMtLr), Just(SessionKind::NslMoLr), Just(SessionKind::Usl)]
    }

    proptest! {
        #[test]
        fn random_event_sequences_keep_invariants(kind in kinds(), events in prop::collection::vec(0..ALL_EVENTS.len(), 0..20)) {
            let mut s = Session::start(kind, &default_participants(kind), tdoa3(), ProtocolDelays::default()).unwrap();
            let mut replay = s.clone();
            for i in events {
                let e = ALL_EVENTS[i];
                let before = s.state();
                if s.step(e).is_err() {
                    prop_assert_eq!(s.state(), before);
                }
                let _ = replay.step(e);
            }
            prop_assert_eq!(s.trace(), replay.trace());
            let gmlc = s.trace().iter().any(|t| t.to == EntityKind::Gmlc || t.from == EntityKind::Gmlc);
            if kind != SessionKind::NslMoLr {
                prop_assert!(!gmlc);
            }
            if kind == SessionKind::Usl {
                prop_assert!(s.trace().iter().all(|t| !t.to.is_core_network() && !t.from.is_core_network()));
            }
            let latencies: Vec<f64> = s.trace().iter().map(|t| t.cumulative_latency_s).collect();
            prop_assert!(latencies.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
