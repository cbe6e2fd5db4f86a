//! Simulator and protocol library for leader-based counting in anonymous
//! dynamic networks.
//!
//! The protocol under study lets a single distinguished leader determine the
//! exact number of nodes in a synchronous network whose topology is rebuilt
//! by an adversary every round, subject only to per-round connectivity. It
//! works by repeatedly guessing a size `k`, spreading unit "potential" mass
//! through lazy-random-walk style averaging, letting the leader consume mass
//! at phase boundaries, and accepting the guess when the consumed total lands
//! in a range only the true size can produce.
//!
//! Crate layout:
//!
//! * [`numeric`] has the exact big-rational and float64 scalar backends.
//! * [`params`] derives the per-estimate schedule (`d`, `p`, `r`, `tau`) and
//!   the closed-form total round count.
//! * [`protocol`] holds the leader/non-leader state machines as pure step
//!   functions.
//! * [`network`] builds adversarial topology schedules, validates them, and
//!   measures graph metrics.
//! * [`engine`] is the lockstep round executor, with traces and
//!   instrumentation.
//! * [`extensions`] layers sum/average/Boolean/extrema aggregates on a
//!   counting run.
//! * [`oracle`] is an independent matrix-based reference for the potential
//!   dynamics plus empirical mixing-bound checks.

pub mod engine;
pub mod extensions;
pub mod network;
pub mod numeric;
pub mod oracle;
pub mod params;
pub mod protocol;
