//! Synchronous lockstep executor.
//!
//! A run owns the full node population and drives it through epochs k = 2,
//! 3, ... until the leader accepts. Per round it fetches the round graph,
//! computes every node's update from round-start state (two-phase), and
//! swaps buffers; the message structs of the protocol module are fused away
//! but the observable behavior is the same, which a test pins down.
//!
//! Besides the plain executor there is an instrumented mode that audits the
//! analysis claims while running: conservation of total potential during
//! alarm-free stretches of phase 1, potentials staying inside [0,1],
//! threshold-crossing counts and slack mass at the end of phase 1,
//! leader-alarm deadlines in undersized epochs, and the random-walk
//! convergence bound per alarm-free phase.

use std::cmp::Ordering;
use std::io::{self, Write};

use num_bigint::BigUint;
use num_traits::{One, Pow, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::extensions::{self, AggregateFn, AggregateResult, ExtError, DEFAULT_VALUE_WIDTH};
use crate::network::{
    chronopath, diameter, CompiledSchedule, NetworkError, RoundGraph, TopologySchedule,
};
use crate::numeric::{log2_big, pow_base, Backend, PotentialMath, ScalarRepr};
use crate::params::{params_for, EpsilonPolicy, ParamError, ProtocolParams};
use crate::protocol::{NodeState, ProtocolError, Role, Status};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("bad run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Extension(#[from] ExtError),
    #[error("internal failure: {0}")]
    Internal(String),
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n: usize,
    pub schedule: TopologySchedule,
    pub backend: Backend,
    pub epsilon_policy: EpsilonPolicy,
    pub function: AggregateFn,
    pub values: Option<Vec<u64>>,
    pub value_width: u32,
    /// Collect trace rows: one every this many rounds inside a phase, plus
    /// every phase and epoch boundary. None disables the trace entirely,
    /// which also skips rendering cost (exact potentials deep into a run
    /// are large).
    pub trace_stride: Option<u64>,
}

impl RunConfig {
    /// A plain counting run on the exact backend.
    pub fn counting(n: usize, schedule: TopologySchedule) -> Self {
        RunConfig {
            n,
            schedule,
            backend: Backend::Exact,
            epsilon_policy: EpsilonPolicy::Auto,
            function: AggregateFn::Count,
            values: None,
            value_width: DEFAULT_VALUE_WIDTH,
            trace_stride: None,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        let fail = |msg: String| Err(EngineError::Config(msg));
        if self.n < 2 {
            return fail(format!("need at least 2 nodes, got {}", self.n));
        }
        if self.schedule.n != self.n {
            return fail(format!(
                "schedule is for n={}, run is for n={}",
                self.schedule.n, self.n
            ));
        }
        match &self.values {
            Some(values) => {
                if self.function == AggregateFn::Count {
                    return fail("values make no sense when only counting".into());
                }
                if values.len() != self.n {
                    return fail(format!(
                        "expected {} values, got {}",
                        self.n,
                        values.len()
                    ));
                }
                if self.function.is_boolean() {
                    if let Some((node, &value)) =
                        values.iter().enumerate().find(|(_, &v)| v > 1)
                    {
                        return Err(EngineError::Extension(ExtError::NonBitInput {
                            function: self.function,
                            node,
                            value,
                        }));
                    }
                }
            }
            None => {
                if self.function.needs_values() {
                    return fail(format!("{} needs --values", self.function));
                }
            }
        }
        Ok(())
    }
}

/// One epoch as observed from the outside.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub k: u64,
    pub epsilon: f64,
    pub d: u32,
    pub p: u64,
    pub r: u64,
    pub tau: String,
    pub rho_final: ScalarRepr,
    pub first_alarm_round: Option<u64>,
    pub accepted: bool,
    pub rounds_epoch: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub schema: String,
    pub n: usize,
    pub function: AggregateFn,
    pub backend: Backend,
    pub outputs: Vec<u64>,
    pub total_rounds: u64,
    pub stopped_simultaneously: bool,
    pub per_epoch: Vec<EpochRecord>,
    pub aggregate: Option<AggregateResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub round: u64,
    pub phis: Vec<ScalarRepr>,
    pub statuses: Vec<Status>,
    pub rho: ScalarRepr,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

/// Audit trail of an instrumented run.
#[derive(Debug, Clone, Default)]
pub struct Evidence {
    /// Rounds of phase-1 alarm-free prefixes where total potential was
    /// checked to scale exactly by d (exact backend only).
    pub conservation_rounds: u64,
    pub conservation_ok: bool,
    pub conservation_failure: Option<String>,
    /// Potential-range samples (every potential in [0,1], widened by the
    /// tolerance on floats).
    pub range_samples: u64,
    pub range_ok: bool,
    /// Worst range excess seen on the float backend.
    pub range_worst: f64,
    pub epochs: Vec<EpochEvidence>,
    pub mixing: Vec<MixingSample>,
}

#[derive(Debug, Clone)]
pub struct EpochEvidence {
    pub k: u64,
    pub d: u32,
    pub p: u64,
    pub r: u64,
    pub accepted: bool,
    pub first_alarm_round: Option<u64>,
    pub leader_alarm_round: Option<u64>,
    /// Orderings of final rho against (k^2-k-1)/k and k-1; present when the
    /// leader ended the epoch unalarmed.
    pub rho_vs_lower: Option<Ordering>,
    pub rho_vs_upper: Option<Ordering>,
    pub census: Option<ThresholdCensus>,
    pub alarm_deadline: Option<AlarmDeadline>,
}

/// End of phase 1, no alarms: how many potentials sit at or below tau
/// (bounded by d, the integer form of k^(1+eps)), and whether the slack mass
/// n-1-sum(phi) is exactly 1 (exact backend).
#[derive(Debug, Clone)]
pub struct ThresholdCensus {
    pub low_count: usize,
    pub bound: u32,
    pub slack_sum_is_one: Option<bool>,
    pub holds: bool,
}

/// Epochs with d < n: the leader must hear an alarm within d rounds after
/// phase 1 ends.
#[derive(Debug, Clone)]
pub struct AlarmDeadline {
    pub deadline: u64,
    pub leader_alarm_round: Option<u64>,
    pub holds: bool,
}

/// One sampled point of the per-phase convergence bound
/// ||p_t - u||^2 <= (1 - 1/(dDn))^t ||p_0 - u||^2, evaluated as an exact
/// integer comparison; the chronopath-based variant is reported alongside.
#[derive(Debug, Clone)]
pub struct MixingSample {
    pub k: u64,
    pub phase: u64,
    pub t: u64,
    pub d: u32,
    pub diam: usize,
    pub chrono: Option<usize>,
    pub holds_diam: bool,
    pub ratio_log2_diam: f64,
    pub holds_chrono: Option<bool>,
    pub ratio_log2_chrono: Option<f64>,
}

struct Instruments {
    exact: bool,
    evidence: Evidence,
    /// d^exp for the current shared exponent (exact backend).
    pow_p: BigUint,
    exp: u64,
    /// Total-numerator of the previous round while the phase-1 prefix is
    /// still alarm-free.
    prev_sum: Option<BigUint>,
    /// (A_0, S_0) at the start of the current phase if it began alarm-free.
    phase_start: Option<(BigUint, BigUint)>,
    phase_alarm_free: bool,
    pending: Vec<(u64, BigUint)>,
    phase_diam: usize,
    phase_graphs: Vec<RoundGraph>,
    round_counter: u64,
}

impl Instruments {
    fn new(exact: bool) -> Self {
        Instruments {
            exact,
            evidence: Evidence {
                conservation_ok: true,
                range_ok: true,
                ..Evidence::default()
            },
            pow_p: BigUint::one(),
            exp: 0,
            prev_sum: None,
            phase_start: None,
            phase_alarm_free: true,
            pending: Vec::new(),
            phase_diam: 0,
            phase_graphs: Vec::new(),
            round_counter: 0,
        }
    }

    fn reset_epoch(&mut self) {
        self.pow_p = BigUint::one();
        self.exp = 0;
        self.prev_sum = None;
        self.phase_start = None;
        self.phase_alarm_free = true;
        self.pending.clear();
        self.phase_diam = 0;
        self.phase_graphs.clear();
    }
}

/// The running system: all node state in lockstep plus bookkeeping.
pub struct World<C: PotentialMath> {
    ctx: C,
    backend: Backend,
    n: usize,
    policy: EpsilonPolicy,
    params: ProtocolParams,
    schedule: CompiledSchedule,
    function: AggregateFn,
    values: Option<Vec<u64>>,
    value_bits: Vec<Vec<u8>>,
    full_coord_dynamics: bool,

    k: u64,
    phase_index: u64,
    round_index: u64,
    global_round: u64,
    epoch_start: u64,

    phis: Vec<C::S>,
    next_phis: Vec<C::S>,
    statuses: Vec<Status>,
    next_statuses: Vec<Status>,
    coords: Vec<Vec<C::S>>,
    next_coords: Vec<Vec<C::S>>,
    snapshots: Vec<Vec<C::S>>,
    rho: C::S,
    first_alarm: Option<u64>,
    leader_alarm: Option<u64>,
    phase1_prealarm: bool,
    outputs: Vec<Option<u64>>,
    adj: Vec<Vec<usize>>,

    finished: bool,
    records: Vec<EpochRecord>,
    trace: Trace,
    trace_stride: Option<u64>,
    instruments: Option<Instruments>,
}

impl World<crate::numeric::ExactCtx> {
    pub fn exact(cfg: &RunConfig) -> Result<Self, EngineError> {
        Self::exact_with_estimate(cfg, 2)
    }

    /// Start the first epoch at estimate `k0` instead of 2.
    pub fn exact_with_estimate(cfg: &RunConfig, k0: u64) -> Result<Self, EngineError> {
        let params = params_for(k0, cfg.epsilon_policy)?;
        let ctx = crate::numeric::ExactCtx { d: params.d };
        World::build(ctx, Backend::Exact, params, cfg)
    }
}

impl World<crate::numeric::FloatCtx> {
    pub fn float(cfg: &RunConfig) -> Result<Self, EngineError> {
        Self::float_with_estimate(cfg, 2)
    }

    pub fn float_with_estimate(cfg: &RunConfig, k0: u64) -> Result<Self, EngineError> {
        let tolerance = match cfg.backend {
            Backend::Float64 { tolerance } => tolerance,
            Backend::Exact => crate::numeric::DEFAULT_FLOAT_TOLERANCE,
        };
        let params = params_for(k0, cfg.epsilon_policy)?;
        let ctx = crate::numeric::FloatCtx { d: params.d, tolerance };
        World::build(ctx, Backend::Float64 { tolerance }, params, cfg)
    }
}

impl<C: PotentialMath> World<C> {
    fn build(
        ctx: C,
        backend: Backend,
        params: ProtocolParams,
        cfg: &RunConfig,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        let schedule = CompiledSchedule::compile(&cfg.schedule)?;
        let value_bits = if cfg.function.needs_coords() {
            extensions::encode_values(cfg.values.as_ref().unwrap(), cfg.value_width)?
        } else {
            Vec::new()
        };
        let n = cfg.n;
        let rho = ctx.zero();
        let mut world = World {
            ctx,
            backend,
            n,
            policy: cfg.epsilon_policy,
            params,
            schedule,
            function: cfg.function,
            values: cfg.values.clone(),
            value_bits,
            full_coord_dynamics: false,
            k: params.k,
            phase_index: 1,
            round_index: 1,
            global_round: 0,
            epoch_start: 0,
            phis: Vec::new(),
            next_phis: Vec::new(),
            statuses: vec![Status::Normal; n],
            next_statuses: vec![Status::Normal; n],
            coords: Vec::new(),
            next_coords: Vec::new(),
            snapshots: Vec::new(),
            rho,
            first_alarm: None,
            leader_alarm: None,
            phase1_prealarm: false,
            outputs: vec![None; n],
            adj: Vec::new(),
            finished: false,
            records: Vec::new(),
            trace: Trace::default(),
            trace_stride: cfg.trace_stride,
            instruments: None,
        };
        world.init_epoch_state();
        Ok(world)
    }

    /// Turn on the invariant audit (kept off by default; it costs time and
    /// is meaningful mainly on the exact backend).
    pub fn instrument(&mut self) {
        let exact = self.backend == Backend::Exact;
        self.instruments = Some(Instruments::new(exact));
    }

    /// Keep mixing value coordinates after phase 1. The snapshot is all that
    /// is ever read back, so this is off by default; the protocol-vs-engine
    /// equivalence test turns it on.
    pub fn set_full_coord_dynamics(&mut self, on: bool) {
        self.full_coord_dynamics = on;
    }

    fn init_epoch_state(&mut self) {
        let n = self.n;
        self.phis = (0..n)
            .map(|i| if i == 0 { self.ctx.zero() } else { self.ctx.one() })
            .collect();
        self.next_phis = self.phis.clone();
        self.statuses.fill(Status::Normal);
        self.next_statuses.fill(Status::Normal);
        self.rho = self.ctx.zero();
        if self.function.needs_coords() {
            self.coords = self
                .value_bits
                .iter()
                .map(|bits| {
                    bits.iter()
                        .map(|&b| if b == 0 { self.ctx.zero() } else { self.ctx.one() })
                        .collect()
                })
                .collect();
            self.next_coords = self.coords.clone();
        }
        self.first_alarm = None;
        self.leader_alarm = None;
        self.phase1_prealarm = false;
        self.phase_index = 1;
        self.round_index = 1;
        self.epoch_start = self.global_round;
        if let Some(ins) = self.instruments.as_mut() {
            ins.reset_epoch();
        }
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn ctx(&self) -> &C {
        &self.ctx
    }

    pub fn potentials(&self) -> &[C::S] {
        &self.phis
    }

    pub fn statuses(&self) -> &[Status] {
        &self.statuses
    }

    pub fn rho(&self) -> &C::S {
        &self.rho
    }

    /// Per-node value coordinates as of the latest phase-1 boundary.
    pub fn snapshots(&self) -> &[Vec<C::S>] {
        &self.snapshots
    }

    pub fn global_round(&self) -> u64 {
        self.global_round
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn epoch_report(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Materialize a node's full protocol-level state (for comparisons).
    pub fn node_state(&self, i: usize) -> NodeState<C::S> {
        NodeState {
            role: if i == 0 { Role::Leader } else { Role::NonLeader },
            k: self.k,
            phase_index: self.phase_index,
            round_index: self.round_index,
            status: self.statuses[i],
            phi: self.phis[i].clone(),
            rho: if i == 0 { self.rho.clone() } else { self.ctx.zero() },
            params: self.params,
            value_coords: self.coords.get(i).cloned().unwrap_or_default(),
            phase1_snapshot: self.snapshots.get(i).cloned().unwrap_or_default(),
        }
    }

    fn coords_active(&self) -> bool {
        self.function.needs_coords() && (self.phase_index == 1 || self.full_coord_dynamics)
    }

    /// One phase round for every node, two-phase commit.
    pub fn step_round(&mut self) -> Result<(), EngineError> {
        debug_assert!(!self.finished);
        debug_assert!(self.phase_index <= self.params.p);
        debug_assert!(self.round_index <= self.params.r);
        let instrumented = self.instruments.is_some();
        if instrumented && self.round_index == 1 {
            self.begin_phase_audit();
        }
        {
            let graph = self.schedule.graph_at(self.global_round)?;
            graph.fill_adjacency(&mut self.adj);
            if instrumented && self.instruments.as_ref().unwrap().exact {
                // the mixing-bound audit is exact-only, so skip the per-round
                // diameter work on floats
                let diam = diameter(&graph).unwrap_or(self.n);
                let ins = self.instruments.as_mut().unwrap();
                ins.phase_diam = ins.phase_diam.max(diam);
                ins.phase_graphs.push(graph.into_owned());
            }
        }
        let coords_active = self.coords_active();
        let d = self.params.d as usize;
        let World {
            ctx,
            phis,
            next_phis,
            statuses,
            next_statuses,
            coords,
            next_coords,
            adj,
            ..
        } = self;
        for i in 0..adj.len() {
            let deg = adj[i].len();
            debug_assert!(deg >= 1, "connected rounds deliver at least one message");
            let alarmed = statuses[i] != Status::Normal
                || deg > d - 1
                || adj[i].iter().any(|&j| statuses[j] != Status::Normal);
            if alarmed {
                next_statuses[i] = Status::Alarm;
                next_phis[i] = ctx.one();
                if coords_active {
                    next_coords[i].clone_from(&coords[i]);
                }
            } else {
                next_statuses[i] = Status::Normal;
                next_phis[i] = ctx.mix(&phis[i], adj[i].iter().map(|&j| &phis[j]), deg as u32);
                if coords_active {
                    for (j, own) in coords[i].iter().enumerate() {
                        next_coords[i][j] =
                            ctx.mix(own, adj[i].iter().map(|&x| &coords[x][j]), deg as u32);
                    }
                }
            }
        }
        std::mem::swap(&mut self.phis, &mut self.next_phis);
        std::mem::swap(&mut self.statuses, &mut self.next_statuses);
        if coords_active {
            std::mem::swap(&mut self.coords, &mut self.next_coords);
        }
        self.global_round += 1;
        let round_in_epoch = self.global_round - self.epoch_start;
        if self.statuses.iter().any(|&s| s == Status::Alarm) {
            if self.first_alarm.is_none() {
                self.first_alarm = Some(round_in_epoch);
            }
            if self.phase_index == 1 {
                self.phase1_prealarm = true;
            }
        }
        if self.leader_alarm.is_none() && self.statuses[0] == Status::Alarm {
            self.leader_alarm = Some(round_in_epoch);
        }
        if instrumented {
            self.round_audit();
        }
        if let Some(stride) = self.trace_stride {
            let t = self.round_index;
            if t % stride == 0 && t < self.params.r {
                self.push_trace_row();
            }
        }
        self.round_index += 1;
        Ok(())
    }

    /// Phase-start bookkeeping for the audit: the normalized state is a
    /// distribution only while nobody is alarmed.
    fn begin_phase_audit(&mut self) {
        let start = self.exact_moments();
        let all_normal = self.statuses.iter().all(|&s| s == Status::Normal);
        let phase1 = self.phase_index == 1;
        let ins = self.instruments.as_mut().unwrap();
        ins.phase_alarm_free = all_normal;
        ins.phase_diam = 0;
        ins.phase_graphs.clear();
        ins.pending.clear();
        ins.phase_start = match start {
            Some((a, s)) if all_normal && !s.is_zero() => Some((a, s)),
            _ => None,
        };
        if phase1 {
            ins.prev_sum = ins.phase_start.as_ref().map(|(_, s)| s.clone());
        }
    }

    /// (A, S) of the current exact potential vector: S the numerator total,
    /// A the centered second moment sum((n*num - S)^2).
    fn exact_moments(&self) -> Option<(BigUint, BigUint)> {
        let mut nums: Vec<&BigUint> = Vec::with_capacity(self.n);
        for phi in &self.phis {
            let (num, _) = self.ctx.exact_view(phi)?;
            nums.push(num);
        }
        let s: BigUint = nums.iter().copied().sum();
        let n = self.n as u64;
        let mut a = BigUint::zero();
        for num in nums {
            let scaled = num * n;
            let diff = if scaled >= s { &scaled - &s } else { &s - &scaled };
            a += &diff * &diff;
        }
        Some((a, s))
    }

    fn round_audit(&mut self) {
        let t = self.round_index; // the round just completed, within the phase
        let r = self.params.r;
        let d = self.params.d;
        let all_normal = self.statuses.iter().all(|&s| s == Status::Normal);

        // potential-range samples: exact compares numerators against d^exp,
        // float checks the raw values every round
        if self.instruments.as_ref().unwrap().exact {
            {
                let ins = self.instruments.as_mut().unwrap();
                ins.exp += 1;
                ins.pow_p *= d;
                ins.round_counter += 1;
            }
            let sample = {
                let ins = self.instruments.as_ref().unwrap();
                ins.round_counter % 97 == 0 || t == r || t == 1
            };
            if sample {
                let mut ok = true;
                for (i, phi) in self.phis.iter().enumerate() {
                    let (num, exp) = self.ctx.exact_view(phi).unwrap();
                    let ins = self.instruments.as_ref().unwrap();
                    let in_range = if self.statuses[i] == Status::Normal {
                        if num.is_zero() {
                            true
                        } else {
                            debug_assert_eq!(exp, ins.exp);
                            num <= &ins.pow_p
                        }
                    } else {
                        num.is_one() && exp == 0
                    };
                    ok &= in_range;
                }
                let ins = self.instruments.as_mut().unwrap();
                ins.evidence.range_samples += 1;
                ins.evidence.range_ok &= ok;
            }
        } else {
            let mut worst = 0.0f64;
            for phi in &self.phis {
                let v = self.ctx.approx_f64(phi);
                worst = worst.max(-v).max(v - 1.0);
            }
            let ins = self.instruments.as_mut().unwrap();
            ins.evidence.range_samples += 1;
            ins.evidence.range_worst = ins.evidence.range_worst.max(worst);
            ins.evidence.range_ok &= worst <= 1e-9;
        }

        // conservation along the alarm-free prefix of phase 1
        if self.phase_index == 1 && self.instruments.as_ref().unwrap().prev_sum.is_some() {
            if all_normal {
                let (_, s_new) = self.exact_moments().unwrap();
                let ins = self.instruments.as_mut().unwrap();
                let prev = ins.prev_sum.take().unwrap();
                let expect = &prev * d;
                if s_new != expect {
                    ins.evidence.conservation_ok = false;
                    ins.evidence.conservation_failure.get_or_insert(format!(
                        "epoch k={} phase 1 round {t}: total numerator drifted",
                        self.k
                    ));
                }
                ins.evidence.conservation_rounds += 1;
                ins.prev_sum = Some(s_new);
            } else {
                self.instruments.as_mut().unwrap().prev_sum = None;
            }
        }

        // convergence-bound samples at t=1 and t=r of alarm-free phases
        if self.instruments.as_ref().unwrap().exact
            && self.instruments.as_ref().unwrap().phase_start.is_some()
        {
            if !all_normal {
                let ins = self.instruments.as_mut().unwrap();
                ins.phase_alarm_free = false;
                ins.pending.clear();
            } else if t == 1 || t == r {
                if let Some((a_t, _)) = self.exact_moments() {
                    self.instruments.as_mut().unwrap().pending.push((t, a_t));
                }
            }
        }
    }

    /// Evaluate the pending convergence samples now that the phase's graphs
    /// (hence its dynamic diameter and chronopath) are known.
    fn finish_phase_audit(&mut self) {
        let Some(ins) = self.instruments.as_mut() else {
            return;
        };
        if !ins.exact || !ins.phase_alarm_free || ins.phase_start.is_none() {
            ins.pending.clear();
            return;
        }
        let (a0, _) = ins.phase_start.clone().unwrap();
        let d = self.params.d;
        let n = self.n as u64;
        let diam = ins.phase_diam.max(1);
        let chrono = chronopath(ins.phase_graphs.iter());
        let pending = std::mem::take(&mut ins.pending);
        for (t, a_t) in pending {
            let (holds_diam, ratio_log2_diam) = mixing_compare(&a0, &a_t, t, d, diam as u64, n);
            let (holds_chrono, ratio_log2_chrono) = match chrono {
                Some(dd) => {
                    let (h, rl) = mixing_compare(&a0, &a_t, t, d, dd.max(1) as u64, n);
                    (Some(h), Some(rl))
                }
                None => (None, None),
            };
            ins.evidence.mixing.push(MixingSample {
                k: self.k,
                phase: self.phase_index,
                t,
                d,
                diam,
                chrono,
                holds_diam,
                ratio_log2_diam,
                holds_chrono,
                ratio_log2_chrono,
            });
        }
    }

    /// Census at the end of phase 1, before the threshold check rewrites
    /// potentials: count nodes at or below tau and check the slack mass.
    /// Skipped if the phase saw alarms.
    fn census_audit(&mut self) -> Option<ThresholdCensus> {
        self.instruments.as_ref()?;
        if self.phase1_prealarm {
            return None;
        }
        let tau = self.params.tau;
        let low_count = self
            .phis
            .iter()
            .filter(|phi| {
                self.ctx.cmp_ratio(phi, *tau.numer(), *tau.denom()) != Ordering::Greater
            })
            .count();
        let bound = self.params.d;
        let slack_sum_is_one = if self.instruments.as_ref().unwrap().exact {
            let (_, s) = self.exact_moments().unwrap();
            let ins = self.instruments.as_ref().unwrap();
            Some(s == &ins.pow_p * (self.n as u64 - 1))
        } else {
            None
        };
        Some(ThresholdCensus {
            low_count,
            bound,
            slack_sum_is_one,
            holds: low_count as u64 <= bound as u64 && slack_sum_is_one != Some(false),
        })
    }

    fn push_trace_row(&mut self) {
        if self.trace_stride.is_none() {
            return;
        }
        let round = self.global_round;
        if self.trace.rows.last().is_some_and(|row| row.round >= round) {
            return;
        }
        self.trace.rows.push(TraceRow {
            round,
            phis: self.phis.iter().map(|p| self.ctx.render(p)).collect(),
            statuses: self.statuses.clone(),
            rho: self.ctx.render(&self.rho),
        });
    }

    /// End-of-phase processing: threshold alarms and snapshot (phase 1),
    /// leader consumption, audit wrap-up.
    fn end_of_phase_all(&mut self) -> Option<ThresholdCensus> {
        debug_assert_eq!(self.round_index, self.params.r + 1);
        let mut census = None;
        if self.phase_index == 1 {
            census = self.census_audit();
            let tau = self.params.tau;
            let mut newly_alarmed = false;
            for i in 0..self.n {
                if self.statuses[i] == Status::Normal
                    && self.ctx.cmp_ratio(&self.phis[i], *tau.numer(), *tau.denom())
                        == Ordering::Greater
                {
                    self.statuses[i] = Status::Alarm;
                    self.phis[i] = self.ctx.one();
                    newly_alarmed = true;
                }
            }
            if newly_alarmed {
                let round_in_epoch = self.global_round - self.epoch_start;
                self.first_alarm.get_or_insert(round_in_epoch);
                if self.statuses[0] == Status::Alarm {
                    self.leader_alarm.get_or_insert(round_in_epoch);
                }
            }
            if self.function.needs_coords() {
                self.snapshots = self.coords.clone();
            }
        }
        if self.statuses[0] == Status::Normal {
            let phi0 = self.phis[0].clone();
            self.ctx.accumulate(&mut self.rho, &phi0);
            self.phis[0] = self.ctx.zero();
        }
        self.finish_phase_audit();
        self.push_trace_row();
        self.phase_index += 1;
        self.round_index = 1;
        census
    }

    /// k rounds of status flooding at the epoch's (old) k.
    fn disseminate(&mut self) -> Result<(), EngineError> {
        let k = self.k;
        let any_done = self.statuses.contains(&Status::Done);
        for _ in 0..k {
            let graph = self.schedule.graph_at(self.global_round)?;
            if any_done {
                graph.fill_adjacency(&mut self.adj);
                self.next_statuses.copy_from_slice(&self.statuses);
                for i in 1..self.n {
                    if self.statuses[i] != Status::Done
                        && self.adj[i].iter().any(|&j| self.statuses[j] == Status::Done)
                    {
                        self.next_statuses[i] = Status::Done;
                        self.outputs[i] = Some(k);
                    }
                }
                std::mem::swap(&mut self.statuses, &mut self.next_statuses);
            }
            self.global_round += 1;
        }
        Ok(())
    }

    /// Run one full epoch (p phases + dissemination); true when the leader
    /// accepted and the run is over.
    pub fn run_one_epoch(&mut self) -> Result<bool, EngineError> {
        debug_assert!(!self.finished);
        let mut census = None;
        for _ in 1..=self.params.p {
            for _ in 1..=self.params.r {
                self.step_round()?;
            }
            if let Some(check) = self.end_of_phase_all() {
                census = Some(check);
            }
        }

        let k = self.k;
        let leader_normal = self.statuses[0] == Status::Normal;
        let (rho_vs_lower, rho_vs_upper) = if leader_normal {
            (
                Some(self.ctx.cmp_ratio(&self.rho, k * k - k - 1, k)),
                Some(self.ctx.cmp_ratio(&self.rho, k - 1, 1)),
            )
        } else {
            (None, None)
        };
        let accepted = leader_normal
            && rho_vs_lower != Some(Ordering::Less)
            && rho_vs_upper != Some(Ordering::Greater);
        let rho_final = self.ctx.render(&self.rho);
        if accepted {
            self.statuses[0] = Status::Done;
            self.outputs[0] = Some(k);
        }

        self.disseminate()?;
        let rounds_epoch = self.global_round - self.epoch_start;
        debug_assert_eq!(rounds_epoch, self.params.phase_rounds() + k);

        self.records.push(EpochRecord {
            k,
            epsilon: self.params.epsilon,
            d: self.params.d,
            p: self.params.p,
            r: self.params.r,
            tau: format!("{}/{}", self.params.tau.numer(), self.params.tau.denom()),
            rho_final,
            first_alarm_round: self.first_alarm,
            accepted,
            rounds_epoch,
        });
        if let Some(ins) = self.instruments.as_mut() {
            let d = self.params.d;
            let alarm_deadline = if (d as u64) < self.n as u64 {
                let deadline = self.params.r + d as u64;
                Some(AlarmDeadline {
                    deadline,
                    leader_alarm_round: self.leader_alarm,
                    holds: self.leader_alarm.is_some_and(|t| t <= deadline),
                })
            } else {
                None
            };
            ins.evidence.epochs.push(EpochEvidence {
                k,
                d,
                p: self.params.p,
                r: self.params.r,
                accepted,
                first_alarm_round: self.first_alarm,
                leader_alarm_round: self.leader_alarm,
                rho_vs_lower,
                rho_vs_upper,
                census,
                alarm_deadline,
            });
        }
        self.push_trace_row();

        if accepted {
            self.finished = true;
        } else {
            self.k += 1;
            if self.k > (self.n as u64).max(2) * 4 + 8 {
                return Err(EngineError::Internal(format!(
                    "estimate k={} grew far past the network size {}",
                    self.k, self.n
                )));
            }
            self.params = params_for(self.k, self.policy)?;
            self.ctx = self.ctx.for_divisor(self.params.d);
            self.init_epoch_state();
        }
        Ok(accepted)
    }

    pub fn run_to_completion(&mut self) -> Result<(), EngineError> {
        while !self.finished {
            self.run_one_epoch()?;
        }
        Ok(())
    }

    /// Assemble the outcome (and optionally the audit evidence).
    pub fn into_results(mut self) -> Result<(RunOutcome, Trace, Option<Evidence>), EngineError> {
        debug_assert!(self.finished);
        let stopped_simultaneously = self.statuses.iter().all(|&s| s == Status::Done);
        let outputs = self
            .outputs
            .iter()
            .map(|o| o.ok_or_else(|| EngineError::Internal("a node never finished".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let aggregate = self.compute_aggregate()?;
        let outcome = RunOutcome {
            schema: "1".to_string(),
            n: self.n,
            function: self.function,
            backend: self.backend,
            outputs,
            total_rounds: self.global_round,
            stopped_simultaneously,
            per_epoch: std::mem::take(&mut self.records),
            aggregate,
        };
        let evidence = self.instruments.take().map(|ins| ins.evidence);
        Ok((outcome, std::mem::take(&mut self.trace), evidence))
    }

    fn compute_aggregate(&self) -> Result<Option<AggregateResult>, EngineError> {
        if self.function == AggregateFn::Count {
            return Ok(None);
        }
        let values = self.values.as_ref().unwrap();
        let n = self.n as u64;
        let mut result = AggregateResult {
            function: self.function,
            sum: None,
            average: None,
            boolean: None,
            max: None,
            min: None,
        };
        if self.function.is_extremum() {
            let (max, min) =
                extensions::flood_extrema(values, &self.schedule, self.global_round)?;
            result.max = Some(max);
            result.min = Some(min);
            return Ok(Some(result));
        }
        // decode the accepted epoch's snapshot at every node; they must agree
        let leader_input = values[0];
        let mut sum = None;
        for node_snapshot in &self.snapshots {
            let s = extensions::decode_sum(&self.ctx, node_snapshot, n, leader_input)?;
            match sum {
                None => sum = Some(s),
                Some(prev) if prev != s => {
                    return Err(EngineError::Internal(format!(
                        "nodes decoded different sums: {prev} vs {s}"
                    )));
                }
                _ => {}
            }
        }
        let sum = sum.ok_or_else(|| EngineError::Internal("no snapshot to decode".into()))?;
        result.sum = Some(sum);
        if self.function == AggregateFn::Average {
            result.average = Some(extensions::average_of(sum, n));
        }
        if self.function.is_boolean() {
            result.boolean = Some(extensions::boolean_eval(sum, n, self.function)?);
        }
        Ok(Some(result))
    }
}

/// `A_t * b^t <= A_0 * a^t * d^(2t)` with b = d*D*n and a = b-1: the
/// convergence inequality cleared of denominators (using S_t = d^t * S_0).
/// Returns the verdict and the log2 of LHS/RHS.
fn mixing_compare(a0: &BigUint, a_t: &BigUint, t: u64, d: u32, big_d: u64, n: u64) -> (bool, f64) {
    let b = d as u64 * big_d * n;
    let a = b - 1;
    if a_t.is_zero() {
        return (true, f64::NEG_INFINITY);
    }
    if a0.is_zero() {
        // uniform start must stay uniform
        return (false, f64::INFINITY);
    }
    let lhs = a_t * Pow::pow(&BigUint::from(b), t);
    let rhs = a0 * Pow::pow(&BigUint::from(a), t) * pow_base(d, 2 * t);
    let ratio = log2_big(&lhs) - log2_big(&rhs);
    (lhs <= rhs, ratio)
}

/// Execute a configured run start to finish.
pub fn run(cfg: &RunConfig) -> Result<(RunOutcome, Trace), EngineError> {
    let (outcome, trace, _) = dispatch(cfg, false)?;
    Ok((outcome, trace))
}

/// Execute with the invariant audit enabled.
pub fn run_instrumented(cfg: &RunConfig) -> Result<(RunOutcome, Trace, Evidence), EngineError> {
    let (outcome, trace, evidence) = dispatch(cfg, true)?;
    Ok((
        outcome,
        trace,
        evidence.expect("instrumented run always yields evidence"),
    ))
}

fn dispatch(
    cfg: &RunConfig,
    instrument: bool,
) -> Result<(RunOutcome, Trace, Option<Evidence>), EngineError> {
    match cfg.backend {
        Backend::Exact => {
            let mut world = World::exact(cfg)?;
            if instrument {
                world.instrument();
            }
            world.run_to_completion()?;
            world.into_results()
        }
        Backend::Float64 { .. } => {
            let mut world = World::float(cfg)?;
            if instrument {
                world.instrument();
            }
            world.run_to_completion()?;
            world.into_results()
        }
    }
}

/// The outcome as one stable JSON document.
pub fn outcome_json(outcome: &RunOutcome) -> String {
    let mut s = serde_json::to_string_pretty(outcome).expect("outcome serializes");
    s.push('\n');
    s
}

pub const METRICS_CSV_HEADER: &str =
    "n,k,epsilon,d,p,r,tau,rho_final,first_alarm_round,accepted,rounds_epoch";

/// Per-epoch metrics as CSV.
pub fn write_metrics_csv(outcome: &RunOutcome, w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for e in &outcome.per_epoch {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            outcome.n,
            e.k,
            e.epsilon,
            e.d,
            e.p,
            e.r,
            e.tau,
            e.rho_final.csv_cell(),
            e.first_alarm_round.map(|x| x.to_string()).unwrap_or_default(),
            e.accepted,
            e.rounds_epoch
        )?;
    }
    Ok(())
}

/// Trace snapshots as line-delimited JSON.
pub fn write_trace_jsonl(trace: &Trace, w: &mut impl Write) -> io::Result<()> {
    for row in &trace.rows {
        let line = serde_json::to_string(row).expect("trace row serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}
