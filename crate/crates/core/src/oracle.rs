//! Independent reference for the potential dynamics.
//!
//! Everything here is built on reduced big rationals and explicit
//! matrix-vector products, deliberately sharing no arithmetic with the
//! engine's unreduced base-power scalars. Tests pit the two against each
//! other; agreement is meaningful because the code paths only have the
//! round graphs in common.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::network::{diameter, RoundGraph};
use crate::numeric::log2_big;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("round {round}: node {node} has degree {degree}, too high for divisor {d}")]
    DegreeTooHigh {
        round: u64,
        node: usize,
        degree: usize,
        d: u32,
    },
    #[error("potential vector has {got} entries, graphs have {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no rounds to evaluate")]
    Empty,
    #[error("round {round} is disconnected, the bound needs a finite diameter")]
    Disconnected { round: u64 },
}

/// One round's averaging as an explicit row-stochastic matrix: entry (i, j)
/// is 1/d for each neighbor j of i, and (d - deg(i))/d on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkMatrix {
    d: u32,
    rows: Vec<Vec<BigRational>>,
}

impl WalkMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn rows(&self) -> &[Vec<BigRational>] {
        &self.rows
    }

    pub fn entry(&self, i: usize, j: usize) -> &BigRational {
        &self.rows[i][j]
    }

    /// Matrix-vector product: the potentials after one round.
    pub fn apply(&self, v: &[BigRational]) -> Vec<BigRational> {
        assert_eq!(v.len(), self.rows.len());
        self.rows
            .iter()
            .map(|row| row.iter().zip(v).map(|(m, x)| m * x).sum())
            .collect()
    }
}

/// The averaging matrix of one round graph under divisor `d`.
pub fn walk_matrix(g: &RoundGraph, d: u32) -> Result<WalkMatrix, OracleError> {
    let adj = g.adjacency();
    check_degrees(&adj, d, 0)?;
    let dd = BigRational::from_integer(BigInt::from(d));
    let share = BigRational::one() / &dd;
    let rows = adj
        .iter()
        .enumerate()
        .map(|(i, neigh)| {
            let mut row = vec![BigRational::zero(); g.n()];
            row[i] = BigRational::from_integer(BigInt::from(d - neigh.len() as u32)) / &dd;
            for &j in neigh {
                row[j] = share.clone();
            }
            row
        })
        .collect();
    Ok(WalkMatrix { d, rows })
}

fn check_degrees(adj: &[Vec<usize>], d: u32, round: u64) -> Result<(), OracleError> {
    for (node, neigh) in adj.iter().enumerate() {
        if neigh.len() as u32 >= d {
            return Err(OracleError::DegreeTooHigh {
                round,
                node,
                degree: neigh.len(),
                d,
            });
        }
    }
    Ok(())
}

/// Round-by-round evolution of a potential vector, reusable across calls.
#[derive(Debug, Clone)]
pub struct Evolver {
    d: u32,
    state: Vec<BigRational>,
    rounds: u64,
}

impl Evolver {
    pub fn new(start: Vec<BigRational>, d: u32) -> Self {
        Evolver {
            d,
            state: start,
            rounds: 0,
        }
    }

    pub fn current(&self) -> &[BigRational] {
        &self.state
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Advance one round. Works straight off adjacency; building the full
    /// matrix is only worth it when someone wants to look at it.
    pub fn step(&mut self, g: &RoundGraph) -> Result<(), OracleError> {
        if g.n() != self.state.len() {
            return Err(OracleError::LengthMismatch {
                expected: g.n(),
                got: self.state.len(),
            });
        }
        let adj = g.adjacency();
        check_degrees(&adj, self.d, self.rounds)?;
        let dd = BigRational::from_integer(BigInt::from(self.d));
        let next = adj
            .iter()
            .enumerate()
            .map(|(i, neigh)| {
                let keep = BigInt::from(self.d - neigh.len() as u32);
                let mut acc = &self.state[i] * BigRational::from_integer(keep);
                for &j in neigh {
                    acc += &self.state[j];
                }
                acc / &dd
            })
            .collect();
        self.state = next;
        self.rounds += 1;
        Ok(())
    }
}

/// The potential vector after all the given rounds.
pub fn evolve(
    start: &[BigRational],
    graphs: &[RoundGraph],
    d: u32,
) -> Result<Vec<BigRational>, OracleError> {
    let mut ev = Evolver::new(start.to_vec(), d);
    for g in graphs {
        ev.step(g)?;
    }
    Ok(ev.state)
}

/// Float mirror of [`evolve`], accumulating in exactly the order the float
/// engine does so results can be compared bit for bit.
pub fn evolve_f64(start: &[f64], graphs: &[RoundGraph], d: u32) -> Result<Vec<f64>, OracleError> {
    let mut state = start.to_vec();
    for (t, g) in graphs.iter().enumerate() {
        if g.n() != state.len() {
            return Err(OracleError::LengthMismatch {
                expected: g.n(),
                got: state.len(),
            });
        }
        let adj = g.adjacency();
        check_degrees(&adj, d, t as u64)?;
        let next: Vec<f64> = adj
            .iter()
            .enumerate()
            .map(|(i, neigh)| {
                let mut acc = state[i] * (d - neigh.len() as u32) as f64;
                for &j in neigh {
                    acc += state[j];
                }
                acc / d as f64
            })
            .collect();
        state = next;
    }
    Ok(state)
}

/// Empirical check of the mixing inequality
/// `||p_t - u||^2 <= (1 - 1/(d*D*n))^t * ||p_0 - u||^2`, where `u` is the
/// conserved-mass uniform vector and `D` the largest single-round diameter
/// over the window. All comparisons are exact.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rounds_checked: u64,
    pub max_ratio_lhs_over_rhs: f64,
    pub pass: bool,
}

pub fn check_convergence_bound(
    start: &[BigRational],
    graphs: &[RoundGraph],
    d: u32,
) -> Result<ConvergenceReport, OracleError> {
    if graphs.is_empty() {
        return Err(OracleError::Empty);
    }
    let n = start.len();
    let mut big_d = 0usize;
    for (t, g) in graphs.iter().enumerate() {
        big_d = big_d.max(diameter(g).ok_or(OracleError::Disconnected { round: t as u64 })?);
    }
    let lambda = {
        let denom = BigInt::from(d as u64 * big_d.max(1) as u64 * n as u64);
        BigRational::new(&denom - BigInt::one(), denom)
    };
    let lhs0 = uniform_distance_sq(start);
    let mut ev = Evolver::new(start.to_vec(), d);
    let mut bound = lhs0.clone();
    let mut max_ratio = 0.0f64;
    let mut pass = true;
    for g in graphs {
        ev.step(g)?;
        bound *= &lambda;
        let lhs = uniform_distance_sq(ev.current());
        if lhs > bound {
            pass = false;
        }
        max_ratio = max_ratio.max(ratio_f64(&lhs, &bound));
    }
    Ok(ConvergenceReport {
        rounds_checked: ev.rounds(),
        max_ratio_lhs_over_rhs: max_ratio,
        pass,
    })
}

/// `||p - u||^2` against the uniform vector with the same total mass.
pub fn uniform_distance_sq(p: &[BigRational]) -> BigRational {
    let n = BigInt::from(p.len());
    let total: BigRational = p.iter().sum();
    let u = total / BigRational::from_integer(n);
    p.iter()
        .map(|x| {
            let diff = x - &u;
            &diff * &diff
        })
        .sum()
}

fn ratio_f64(lhs: &BigRational, rhs: &BigRational) -> f64 {
    if lhs.is_zero() {
        return 0.0;
    }
    if rhs.is_zero() {
        return f64::INFINITY;
    }
    let q = lhs / rhs;
    let log2 = log2_magnitude(q.numer()) - log2_magnitude(q.denom());
    log2.exp2()
}

fn log2_magnitude(x: &BigInt) -> f64 {
    let mag: BigUint = x.abs().to_biguint().expect("abs is nonnegative");
    log2_big(&mag)
}
