//! Protocol-driven admission and attestation toolchain.
//!
//! A protocol bundle collects three invariant classes into one sealed,
//! content-addressed artifact:
//!
//! * **structural** — the typed request/response/error handshake,
//! * **behavioral** — semantic properties checked by generated cases
//!   (determinism, ranges, monotonicity, fails-closed, idempotence),
//! * **operational** — a capability manifest bounding network, filesystem,
//!   dependency, secret, latency, memory, and background-work authority.
//!
//! Candidate implementations run behind a language-neutral line-delimited
//! wire protocol ([`harness`]); the validation engine ([`validate`]) checks
//! a candidate against the sealed bundle and admission produces a signed
//! [`evidence::EvidenceObject`]. After deployment, observation traces are
//! attested against the monitorable projection of the same bundle and the
//! results appended to a hash-linked ledger ([`runtime`]); violations become
//! structured repair contexts ([`remediate`]) that re-enter validation.
//!
//! The [`cli`] module wires the loop together for the `pdd` binary.

pub mod bundle;
pub mod canon;
pub mod cli;
pub mod corpus;
pub mod evidence;
pub mod gen;
pub mod harness;
pub mod negotiate;
pub mod refine;
pub mod remediate;
pub mod runtime;
pub mod schema;
pub mod sign;
pub mod store;
pub mod surface;
pub mod time;
pub mod validate;
pub mod version;

pub use canon::{canonical_bytes, ContentDigest, Doc};
pub use time::{Clock, FixedClock, SystemClock, UtcTime};
