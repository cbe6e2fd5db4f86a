//! The counting state machines, as pure step functions.
//!
//! An epoch under estimate k runs p phases of r rounds. Each round every
//! node broadcasts its potential and mixes what it hears at rate 1/d; a node
//! that hears d or more neighbors, or any alarm, raises an alarm itself and
//! pins its potential to 1 for the rest of the epoch. At the end of phase 1
//! a potential above tau = (d-1)/d also raises the alarm. At the end of
//! every phase the (still normal) leader consumes its potential into the
//! accumulator rho. After p phases the leader accepts k exactly when it is
//! alarm-free and rho landed in [k-1-1/k, k-1]; its status is then flooded
//! for k more rounds, after which unfinished nodes move on to k+1.
//!
//! Everything here is potential-in, potential-out: the engine owns message
//! delivery, round counting, and the epoch loop.

use serde::Serialize;
use thiserror::Error;

use crate::numeric::PotentialMath;
use crate::params::ProtocolParams;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("empty inbox: a connected round delivers at least one message")]
    EmptyInbox,
    #[error("node is done; no further rounds apply")]
    AlreadyDone,
    #[error("phase messages expected in a phase round")]
    WrongMessageKind,
    #[error("epoch decision is the leader's alone")]
    NotLeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    NonLeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Normal,
    Alarm,
    Done,
}

/// Full per-node state. `phase_index`/`round_index` are 1-based and name the
/// next round to execute; all nodes of a run hold identical counters.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<S> {
    pub role: Role,
    pub k: u64,
    pub phase_index: u64,
    pub round_index: u64,
    pub status: Status,
    pub phi: S,
    /// Consumed-potential accumulator; meaningful for the leader only.
    pub rho: S,
    pub params: ProtocolParams,
    /// Aggregate-value coordinates; empty when only counting.
    pub value_coords: Vec<S>,
    /// Coordinates as of the end of phase 1, taken before consumption.
    pub phase1_snapshot: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message<S> {
    Phase {
        phi: S,
        status: Status,
        coords: Vec<S>,
    },
    Dissemination {
        status: Status,
    },
}

impl<S> Message<S> {
    pub fn status(&self) -> Status {
        match self {
            Message::Phase { status, .. } => *status,
            Message::Dissemination { status } => *status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

/// Fresh state at the start of an epoch: the leader holds potential 0, every
/// other node 1. `coords` carry the node's encoded input bits (empty when
/// not aggregating; all-zero for the leader).
pub fn init_node<C: PotentialMath>(
    ctx: &C,
    role: Role,
    params: ProtocolParams,
    coords: Vec<C::S>,
) -> NodeState<C::S> {
    NodeState {
        role,
        k: params.k,
        phase_index: 1,
        round_index: 1,
        status: Status::Normal,
        phi: match role {
            Role::Leader => ctx.zero(),
            Role::NonLeader => ctx.one(),
        },
        rho: ctx.zero(),
        params,
        value_coords: coords,
        phase1_snapshot: Vec::new(),
    }
}

/// What the node broadcasts in a phase round.
pub fn outgoing_message<C: PotentialMath>(_ctx: &C, s: &NodeState<C::S>) -> Message<C::S> {
    Message::Phase {
        phi: s.phi.clone(),
        status: s.status,
        coords: s.value_coords.clone(),
    }
}

/// What the node broadcasts in a dissemination round.
pub fn outgoing_dissemination<S>(s: &NodeState<S>) -> Message<S> {
    Message::Dissemination { status: s.status }
}

/// One phase round: mix at rate 1/d, or alarm. A node mixes only while it is
/// normal, hears at most d-1 neighbors, and hears no alarm; otherwise its
/// potential pins to 1 (value coordinates freeze as they are). The update is
/// a function of the inbox multiset, so inbox order cannot matter.
pub fn apply_round<C: PotentialMath>(
    ctx: &C,
    s: &NodeState<C::S>,
    inbox: &[Message<C::S>],
) -> Result<NodeState<C::S>, ProtocolError> {
    if s.status == Status::Done {
        return Err(ProtocolError::AlreadyDone);
    }
    if inbox.is_empty() {
        return Err(ProtocolError::EmptyInbox);
    }
    let mut phis = Vec::with_capacity(inbox.len());
    let mut coords: Vec<&Vec<C::S>> = Vec::with_capacity(inbox.len());
    let mut all_normal = true;
    for m in inbox {
        match m {
            Message::Phase { phi, status, coords: c } => {
                phis.push(phi);
                coords.push(c);
                all_normal &= *status == Status::Normal;
            }
            Message::Dissemination { .. } => return Err(ProtocolError::WrongMessageKind),
        }
    }
    let mut next = s.clone();
    let d = s.params.d as usize;
    if s.status == Status::Normal && inbox.len() <= d - 1 && all_normal {
        next.phi = ctx.mix(&s.phi, phis.iter().copied(), inbox.len() as u32);
        for (j, own) in s.value_coords.iter().enumerate() {
            next.value_coords[j] =
                ctx.mix(own, coords.iter().map(|c| &c[j]), inbox.len() as u32);
        }
    } else {
        next.status = Status::Alarm;
        next.phi = ctx.one();
    }
    next.round_index += 1;
    Ok(next)
}

/// End-of-phase bookkeeping, called right after round r. In phase 1 a normal
/// node whose potential exceeds tau alarms (leader included), and the value
/// coordinates are snapshotted before anything is consumed. A normal leader
/// then folds its potential into rho.
pub fn end_of_phase<C: PotentialMath>(
    ctx: &C,
    s: &NodeState<C::S>,
    phase_index: u64,
) -> NodeState<C::S> {
    debug_assert_eq!(phase_index, s.phase_index);
    debug_assert_eq!(s.round_index, s.params.r + 1);
    let mut next = s.clone();
    if phase_index == 1 {
        let tau = s.params.tau;
        if s.status == Status::Normal
            && ctx.cmp_ratio(&s.phi, *tau.numer(), *tau.denom()) == std::cmp::Ordering::Greater
        {
            next.status = Status::Alarm;
            next.phi = ctx.one();
        }
        next.phase1_snapshot = next.value_coords.clone();
    }
    if s.role == Role::Leader && next.status == Status::Normal {
        let phi = next.phi.clone();
        ctx.accumulate(&mut next.rho, &phi);
        next.phi = ctx.zero();
    }
    next.phase_index += 1;
    next.round_index = 1;
    next
}

/// The leader's verdict after p phases: accept exactly when still normal and
/// k-1-1/k <= rho <= k-1. Read-only; the caller marks `done` and runs the
/// dissemination rounds either way.
pub fn end_of_epoch_leader<C: PotentialMath>(
    ctx: &C,
    s: &NodeState<C::S>,
) -> Result<Decision, ProtocolError> {
    if s.role != Role::Leader {
        return Err(ProtocolError::NotLeader);
    }
    if s.status != Status::Normal {
        return Ok(Decision::Reject);
    }
    let k = s.k;
    // lower bound (k^2 - k - 1)/k, upper bound k - 1
    let lo_ok = ctx.cmp_ratio(&s.rho, k * k - k - 1, k) != std::cmp::Ordering::Less;
    let hi_ok = ctx.cmp_ratio(&s.rho, k - 1, 1) != std::cmp::Ordering::Greater;
    Ok(if lo_ok && hi_ok {
        Decision::Accept
    } else {
        Decision::Reject
    })
}

/// One dissemination round: statuses flood, and a non-leader that hears
/// `done` is done. Done is terminal; nothing else changes.
pub fn dissemination_step<S: Clone>(s: &NodeState<S>, inbox: &[Message<S>]) -> NodeState<S> {
    let mut next = s.clone();
    if s.role == Role::NonLeader
        && s.status != Status::Done
        && inbox.iter().any(|m| m.status() == Status::Done)
    {
        next.status = Status::Done;
    }
    next
}

/// Move an unfinished node into the next epoch: k+1 with fresh parameters,
/// potentials re-initialized, input coordinates put back.
pub fn epoch_reset<C: PotentialMath>(
    ctx: &C,
    s: &NodeState<C::S>,
    params: ProtocolParams,
    coords: Vec<C::S>,
) -> NodeState<C::S> {
    debug_assert_eq!(params.k, s.k + 1);
    debug_assert_eq!(ctx.base(), params.d);
    let mut next = init_node(ctx, s.role, params, coords);
    next.k = params.k;
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ExactCtx, ExactScalar, FloatCtx, PotentialMath, DEFAULT_FLOAT_TOLERANCE};
    use crate::params::{params_for, EpsilonPolicy};
    use proptest::prelude::*;

    fn ctx_k2() -> ExactCtx {
        ExactCtx { d: 4 }
    }

    fn p_k2() -> crate::params::ProtocolParams {
        params_for(2, EpsilonPolicy::Auto).unwrap()
    }

    fn scalar(_ctx: &ExactCtx, num: u64, exp: u64) -> ExactScalar {
        ExactScalar::new(num.into(), exp, 4).unwrap()
    }

    fn phase_msg(
        ctx: &ExactCtx,
        num: u64,
        exp: u64,
        status: Status,
    ) -> Message<<ExactCtx as PotentialMath>::S> {
        Message::Phase {
            phi: scalar(ctx, num, exp),
            status,
            coords: vec![],
        }
    }

    #[test]
    fn init_leader_and_nonleader() {
        let ctx = ctx_k2();
        let l = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        assert!(ctx.is_zero(&l.phi));
        assert!(ctx.is_zero(&l.rho));
        assert_eq!(l.status, Status::Normal);
        assert_eq!((l.k, l.phase_index, l.round_index), (2, 1, 1));

        let nl = init_node(&ctx, Role::NonLeader, p_k2(), vec![ctx.one(), ctx.zero()]);
        assert_eq!(ctx.compare(&nl.phi, &ctx.one()), std::cmp::Ordering::Equal);
        assert_eq!(nl.value_coords.len(), 2);
    }

    #[test]
    fn outgoing_carries_phi_and_status() {
        let ctx = ctx_k2();
        let l = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        match outgoing_message(&ctx, &l) {
            Message::Phase { phi, status, .. } => {
                assert!(ctx.is_zero(&phi));
                assert_eq!(status, Status::Normal);
            }
            _ => panic!("phase rounds broadcast phase messages"),
        }
        let mut alarmed = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        alarmed.status = Status::Alarm;
        alarmed.phi = ctx.one();
        match outgoing_message(&ctx, &alarmed) {
            Message::Phase { phi, status, .. } => {
                assert!(ctx.compare(&phi, &ctx.one()).is_eq());
                assert_eq!(status, Status::Alarm);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn mix_round_examples() {
        let ctx = ctx_k2();
        // leader phi=0 hears phi=1: next is 1/4
        let l = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        let next = apply_round(&ctx, &l, &[phase_msg(&ctx, 1, 0, Status::Normal)]).unwrap();
        assert_eq!(ctx.cmp_ratio(&next.phi, 1, 4), std::cmp::Ordering::Equal);
        assert_eq!(next.status, Status::Normal);
        assert_eq!(next.round_index, 2);

        // phi=1 hearing two ones stays at 1
        let nl = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        let next = apply_round(
            &ctx,
            &nl,
            &[
                phase_msg(&ctx, 1, 0, Status::Normal),
                phase_msg(&ctx, 1, 0, Status::Normal),
            ],
        )
        .unwrap();
        assert_eq!(ctx.cmp_ratio(&next.phi, 1, 1), std::cmp::Ordering::Equal);
    }

    #[test]
    fn crowding_and_alarm_messages_trigger_alarm() {
        let ctx = ctx_k2();
        let mut s = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        s.phi = scalar(&ctx, 2, 1); // 1/2
        let four = vec![
            phase_msg(&ctx, 1, 0, Status::Normal),
            phase_msg(&ctx, 1, 0, Status::Normal),
            phase_msg(&ctx, 1, 0, Status::Normal),
            phase_msg(&ctx, 1, 0, Status::Normal),
        ];
        let crowded = apply_round(&ctx, &s, &four).unwrap();
        assert_eq!(crowded.status, Status::Alarm);
        assert!(ctx.compare(&crowded.phi, &ctx.one()).is_eq());

        let heard_alarm =
            apply_round(&ctx, &s, &[phase_msg(&ctx, 1, 1, Status::Alarm)]).unwrap();
        assert_eq!(heard_alarm.status, Status::Alarm);
        assert!(ctx.compare(&heard_alarm.phi, &ctx.one()).is_eq());
    }

    #[test]
    fn inbox_errors() {
        let ctx = ctx_k2();
        let s = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        assert_eq!(apply_round(&ctx, &s, &[]), Err(ProtocolError::EmptyInbox));
        let mut done = s.clone();
        done.status = Status::Done;
        assert_eq!(
            apply_round(&ctx, &done, &[phase_msg(&ctx, 1, 0, Status::Normal)]),
            Err(ProtocolError::AlreadyDone)
        );
        assert_eq!(
            apply_round(&ctx, &s, &[Message::Dissemination { status: Status::Normal }]),
            Err(ProtocolError::WrongMessageKind)
        );
    }

    #[test]
    fn alarm_sticks_for_the_epoch() {
        let ctx = ctx_k2();
        let mut s = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        s.status = Status::Alarm;
        s.phi = ctx.one();
        for _ in 0..5 {
            s = apply_round(&ctx, &s, &[phase_msg(&ctx, 1, 2, Status::Normal)]).unwrap();
            assert_eq!(s.status, Status::Alarm);
            assert!(ctx.compare(&s.phi, &ctx.one()).is_eq());
        }
    }

    #[test]
    fn phase_one_threshold_both_roles() {
        let ctx = ctx_k2();
        // tau = 3/4 at k=2; 13/16 exceeds it
        for role in [Role::Leader, Role::NonLeader] {
            let mut s = init_node(&ctx, role, p_k2(), vec![]);
            s.phi = scalar(&ctx, 13, 2);
            s.round_index = s.params.r + 1;
            let after = end_of_phase(&ctx, &s, 1);
            assert_eq!(after.status, Status::Alarm, "{role:?}");
            assert!(ctx.compare(&after.phi, &ctx.one()).is_eq());
            assert_eq!((after.phase_index, after.round_index), (2, 1));
        }
        // float backend, the 9/10 > 3/4 case
        let fctx = FloatCtx { d: 4, tolerance: DEFAULT_FLOAT_TOLERANCE };
        let mut s = init_node(&fctx, Role::NonLeader, p_k2(), vec![]);
        s.phi = crate::numeric::FloatScalar::new(0.9).unwrap();
        s.round_index = s.params.r + 1;
        assert_eq!(end_of_phase(&fctx, &s, 1).status, Status::Alarm);
    }

    #[test]
    fn leader_consumes_each_phase() {
        let ctx = ctx_k2();
        let mut s = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        s.phi = scalar(&ctx, 2, 1); // 1/2
        s.round_index = s.params.r + 1;
        let after = end_of_phase(&ctx, &s, 1);
        assert_eq!(ctx.cmp_ratio(&after.rho, 1, 2), std::cmp::Ordering::Equal);
        assert!(ctx.is_zero(&after.phi));

        // threshold only applies in phase 1
        let mut s2 = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        s2.phi = scalar(&ctx, 13, 2);
        s2.phase_index = 2;
        s2.round_index = s2.params.r + 1;
        let after2 = end_of_phase(&ctx, &s2, 2);
        assert_eq!(after2.status, Status::Normal);
        assert_eq!(ctx.cmp_ratio(&after2.phi, 13, 16), std::cmp::Ordering::Equal);
    }

    #[test]
    fn snapshot_taken_before_consumption() {
        let ctx = ctx_k2();
        let mut s = init_node(&ctx, Role::Leader, p_k2(), vec![scalar(&ctx, 3, 2)]);
        s.phi = scalar(&ctx, 2, 1);
        s.round_index = s.params.r + 1;
        let after = end_of_phase(&ctx, &s, 1);
        assert_eq!(after.phase1_snapshot.len(), 1);
        assert_eq!(
            ctx.cmp_ratio(&after.phase1_snapshot[0], 3, 16),
            std::cmp::Ordering::Equal
        );
    }

    #[test]
    fn epoch_decision_ranges() {
        let ctx = ctx_k2();
        let mut s = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        s.rho = ctx.one();
        assert_eq!(end_of_epoch_leader(&ctx, &s), Ok(Decision::Accept));
        s.rho = scalar(&ctx, 2, 1); // 1/2, the lower boundary
        assert_eq!(end_of_epoch_leader(&ctx, &s), Ok(Decision::Accept));
        s.rho = scalar(&ctx, 7, 2); // 7/16 < 1/2
        assert_eq!(end_of_epoch_leader(&ctx, &s), Ok(Decision::Reject));
        s.rho = scalar(&ctx, 3, 1); // 3/4, in range but alarmed
        s.status = Status::Alarm;
        assert_eq!(end_of_epoch_leader(&ctx, &s), Ok(Decision::Reject));

        let nl = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        assert_eq!(end_of_epoch_leader(&ctx, &nl), Err(ProtocolError::NotLeader));
    }

    #[test]
    fn dissemination_adopts_done() {
        let ctx = ctx_k2();
        let nl = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
        let heard = dissemination_step(
            &nl,
            &[
                Message::Dissemination { status: Status::Alarm },
                Message::Dissemination { status: Status::Done },
            ],
        );
        assert_eq!(heard.status, Status::Done);

        let unheard =
            dissemination_step(&nl, &[Message::Dissemination { status: Status::Alarm }]);
        assert_eq!(unheard.status, Status::Normal);

        let mut leader = init_node(&ctx, Role::Leader, p_k2(), vec![]);
        leader.status = Status::Done;
        let still = dissemination_step(
            &leader,
            &[Message::Dissemination { status: Status::Alarm }],
        );
        assert_eq!(still.status, Status::Done);
        assert_eq!(outgoing_dissemination(&still).status(), Status::Done);
    }

    #[test]
    fn reset_moves_to_next_estimate() {
        let ctx3 = ExactCtx { d: 6 };
        let p3 = params_for(3, EpsilonPolicy::Auto).unwrap();
        let mut s = init_node(&ctx_k2(), Role::NonLeader, p_k2(), vec![]);
        s.status = Status::Alarm;
        s.phi = ctx_k2().one();
        let fresh = epoch_reset(&ctx3, &s, p3, vec![]);
        assert_eq!(fresh.k, 3);
        assert_eq!(fresh.status, Status::Normal);
        assert!(ctx3.compare(&fresh.phi, &ctx3.one()).is_eq());
        assert_eq!((fresh.phase_index, fresh.round_index), (1, 1));
    }

    #[test]
    fn coords_mix_like_potentials() {
        let ctx = ctx_k2();
        // a coordinate starting at the same value as phi must track it
        let mut a = init_node(&ctx, Role::NonLeader, p_k2(), vec![ctx.one()]);
        let mut b = init_node(&ctx, Role::Leader, p_k2(), vec![ctx.zero()]);
        for _ in 0..4 {
            let from_a = outgoing_message(&ctx, &a);
            let from_b = outgoing_message(&ctx, &b);
            a = apply_round(&ctx, &a, &[from_b]).unwrap();
            b = apply_round(&ctx, &b, &[from_a]).unwrap();
            for s in [&a, &b] {
                assert_eq!(ctx.compare(&s.phi, &s.value_coords[0]), std::cmp::Ordering::Equal);
            }
        }
    }

    proptest! {
        #[test]
        fn inbox_order_is_irrelevant(nums in proptest::collection::vec(0u64..=16, 1..3), swap in any::<bool>()) {
            let ctx = ctx_k2();
            let mut s = init_node(&ctx, Role::NonLeader, p_k2(), vec![]);
            s.phi = scalar(&ctx, 3, 2);
            let mut inbox: Vec<_> = nums.iter().map(|&q| phase_msg(&ctx, q, 2, Status::Normal)).collect();
            let a = apply_round(&ctx, &s, &inbox).unwrap();
            if swap {
                inbox.reverse();
            }
            let b = apply_round(&ctx, &s, &inbox).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
