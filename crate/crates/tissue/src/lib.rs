//! An artificial immune system framework built around a tissue compartment:
//! bounded stores of antigen (syscall tokens), signals (cytokine levels), and
//! cells whose receptors and producers move antigen around, react to signals,
//! and emit responses.
//!
//! The crate ships the framework itself ([`engine`], [`compartment`],
//! [`dynamics`], [`model`]), a line-based TCP ingestion layer ([`net`]),
//! replay of recorded syscall traces ([`replay`]), the two-type reference
//! cell algorithm ([`twocell`]), and policy construction and evaluation on
//! top of its responses ([`policy`], [`harness`]).

pub mod compartment;
pub mod dynamics;
pub mod engine;
pub mod harness;
pub mod model;
pub mod net;
pub mod params;
pub mod policy;
pub mod replay;
pub mod twocell;
