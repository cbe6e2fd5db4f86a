//! Aggregates on top of counting: sum, average, symmetric Booleans, extrema.
//!
//! Each node carries its input as a bit sequence alongside the potential, one
//! scalar coordinate per bit position, updated by the same mixing rule. The
//! leader contributes zeros (its real input returns at decode time). When the
//! count is accepted at k = n, coordinate j at any single node approximates
//! S_j/n, where S_j counts the set bits at position j across the network, so
//! `round(n * coord)` recovers S_j and with it the exact sum. Max and min
//! skip the arithmetic entirely: once n is known, n rounds of flooding carry
//! the extremes everywhere.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::Zero;
use serde::Serialize;
use thiserror::Error;

use crate::network::{CompiledSchedule, NetworkError};
use crate::numeric::{log2_big, pow_base, PotentialMath};

pub const DEFAULT_VALUE_WIDTH: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtError {
    #[error("value width must be between 1 and 64 bits, got {0}")]
    BadWidth(u32),
    #[error("node {node} input {value} does not fit in {width} bits")]
    ValueTooWide { node: usize, value: u64, width: u32 },
    #[error("{function} needs bit inputs; node {node} holds {value}")]
    NonBitInput {
        function: AggregateFn,
        node: usize,
        value: u64,
    },
    #[error("{0} is not a Boolean function")]
    NotBoolean(AggregateFn),
    #[error("coordinate {coordinate}: n*coord is at least 1/2 away from every integer")]
    RoundingResidue { coordinate: usize },
    #[error("decoded sum exceeds the 64-bit range")]
    SumOverflow,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// What a run computes besides (always) the count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateFn {
    Count,
    Sum,
    Average,
    And,
    Or,
    Xor,
    Nand,
    Nor,
    Xnor,
    Max,
    Min,
}

impl AggregateFn {
    pub fn needs_values(self) -> bool {
        self != AggregateFn::Count
    }

    /// Functions decoded from the coordinate snapshot.
    pub fn needs_coords(self) -> bool {
        !matches!(self, AggregateFn::Count | AggregateFn::Max | AggregateFn::Min)
    }

    pub fn is_boolean(self) -> bool {
        matches!(
            self,
            AggregateFn::And
                | AggregateFn::Or
                | AggregateFn::Xor
                | AggregateFn::Nand
                | AggregateFn::Nor
                | AggregateFn::Xnor
        )
    }

    pub fn is_extremum(self) -> bool {
        matches!(self, AggregateFn::Max | AggregateFn::Min)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggregateFn::Count => "count",
            AggregateFn::Sum => "sum",
            AggregateFn::Average => "average",
            AggregateFn::And => "and",
            AggregateFn::Or => "or",
            AggregateFn::Xor => "xor",
            AggregateFn::Nand => "nand",
            AggregateFn::Nor => "nor",
            AggregateFn::Xnor => "xnor",
            AggregateFn::Max => "max",
            AggregateFn::Min => "min",
        }
    }
}

impl fmt::Display for AggregateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregateFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(AggregateFn::Count),
            "sum" => Ok(AggregateFn::Sum),
            "average" => Ok(AggregateFn::Average),
            "and" => Ok(AggregateFn::And),
            "or" => Ok(AggregateFn::Or),
            "xor" => Ok(AggregateFn::Xor),
            "nand" => Ok(AggregateFn::Nand),
            "nor" => Ok(AggregateFn::Nor),
            "xnor" => Ok(AggregateFn::Xnor),
            "max" => Ok(AggregateFn::Max),
            "min" => Ok(AggregateFn::Min),
            other => Err(format!("unknown function {other:?}")),
        }
    }
}

/// The n-ary XOR reading. `Parity` (sum odd) is the default; `ExactlyOne`
/// (sum = 1) is the literal one-hot reading some texts use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum XorSemantics {
    #[default]
    Parity,
    ExactlyOne,
}

/// Exact rational `num/den`, already reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResult {
    pub function: AggregateFn,
    pub sum: Option<u64>,
    pub average: Option<Rational>,
    pub boolean: Option<bool>,
    pub max: Option<u64>,
    pub min: Option<u64>,
}

/// Per-node input bits, least-significant bit first. Node 0 is the leader
/// and is encoded as all zeros; its true input is re-added at decode time.
pub fn encode_values(inputs: &[u64], width: u32) -> Result<Vec<Vec<u8>>, ExtError> {
    if width == 0 || width > 64 {
        return Err(ExtError::BadWidth(width));
    }
    inputs
        .iter()
        .enumerate()
        .map(|(node, &value)| {
            if width < 64 && value >= 1u64 << width {
                return Err(ExtError::ValueTooWide { node, value, width });
            }
            if node == 0 {
                return Ok(vec![0; width as usize]);
            }
            Ok((0..width).map(|j| ((value >> j) & 1) as u8).collect())
        })
        .collect()
}

/// Recover one bit-position count from a single node's mixed coordinate:
/// the integer nearest `n * coord`. Errors when nothing is strictly within
/// 1/2 (a numeric-backend failure; the exact backend cannot get here).
/// Returns the count and how far from the integer the product sat.
pub fn decode_position<C: PotentialMath>(
    ctx: &C,
    coord: &C::S,
    n: u64,
    coordinate: usize,
) -> Result<(u64, f64), ExtError> {
    if let Some((num, exp)) = ctx.exact_view(coord) {
        let p = pow_base(ctx.base(), exp);
        let t = num * n;
        let s: BigUint = (&t * 2u32 + &p).div_floor(&(&p * 2u32));
        let sp = &s * &p;
        let diff = if t >= sp { &t - &sp } else { &sp - &t };
        if &diff * 2u32 >= p {
            return Err(ExtError::RoundingResidue { coordinate });
        }
        let residue = if diff.is_zero() {
            0.0
        } else {
            (log2_big(&diff) - log2_big(&p)).exp2()
        };
        let s = u64::try_from(&s).map_err(|_| ExtError::SumOverflow)?;
        Ok((s, residue))
    } else {
        let t = ctx.approx_f64(coord) * n as f64;
        let s = t.round();
        let residue = (t - s).abs();
        if !(residue < 0.5) || s < 0.0 {
            return Err(ExtError::RoundingResidue { coordinate });
        }
        Ok((s as u64, residue))
    }
}

/// Decode the network-wide sum from one node's phase-1 coordinate snapshot
/// of the accepted epoch, re-adding the leader's withheld input. Also
/// reports the worst rounding residue across coordinates.
pub fn decode_sum_report<C: PotentialMath>(
    ctx: &C,
    coords: &[C::S],
    n: u64,
    leader_input: u64,
) -> Result<(u64, f64), ExtError> {
    let mut sum: u128 = leader_input as u128;
    let mut worst = 0.0f64;
    for (j, coord) in coords.iter().enumerate() {
        let (s_j, residue) = decode_position(ctx, coord, n, j)?;
        worst = worst.max(residue);
        sum += (s_j as u128) << j;
    }
    let sum = u64::try_from(sum).map_err(|_| ExtError::SumOverflow)?;
    Ok((sum, worst))
}

pub fn decode_sum<C: PotentialMath>(
    ctx: &C,
    coords: &[C::S],
    n: u64,
    leader_input: u64,
) -> Result<u64, ExtError> {
    decode_sum_report(ctx, coords, n, leader_input).map(|(sum, _)| sum)
}

/// Evaluate a symmetric Boolean function from the bit sum, parity XOR.
pub fn boolean_eval(sum: u64, n: u64, function: AggregateFn) -> Result<bool, ExtError> {
    boolean_eval_with(sum, n, function, XorSemantics::Parity)
}

pub fn boolean_eval_with(
    sum: u64,
    n: u64,
    function: AggregateFn,
    xor: XorSemantics,
) -> Result<bool, ExtError> {
    debug_assert!(sum <= n);
    let xor_value = match xor {
        XorSemantics::Parity => sum % 2 == 1,
        XorSemantics::ExactlyOne => sum == 1,
    };
    match function {
        AggregateFn::And => Ok(sum == n),
        AggregateFn::Or => Ok(sum > 0),
        AggregateFn::Xor => Ok(xor_value),
        AggregateFn::Nand => Ok(sum != n),
        AggregateFn::Nor => Ok(sum == 0),
        AggregateFn::Xnor => Ok(!xor_value),
        other => Err(ExtError::NotBoolean(other)),
    }
}

/// n rounds of max/min flooding on the rounds following the counting run,
/// every node starting from its true input (the leader's included).
pub fn flood_extrema(
    inputs: &[u64],
    schedule: &CompiledSchedule,
    start_round: u64,
) -> Result<(u64, u64), ExtError> {
    let n = inputs.len();
    let mut state: Vec<(u64, u64)> = inputs.iter().map(|&v| (v, v)).collect();
    let mut adj: Vec<Vec<usize>> = Vec::new();
    for t in 0..n as u64 {
        let graph = schedule.graph_at(start_round + t)?;
        graph.fill_adjacency(&mut adj);
        let prev = state.clone();
        for (i, nbrs) in adj.iter().enumerate() {
            for &j in nbrs {
                state[i].0 = state[i].0.max(prev[j].0);
                state[i].1 = state[i].1.min(prev[j].1);
            }
        }
    }
    debug_assert!(state.iter().all(|&s| s == state[0]));
    Ok(state[0])
}

/// Exact average sum/n.
pub fn average_of(sum: u64, n: u64) -> Rational {
    let g = sum.gcd(&n);
    Rational { num: sum / g, den: n / g }
}
