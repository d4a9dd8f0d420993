//! Probabilistic checkers for distributed data operations.
//!
//! The crate provides hash families ([`hashing`]), a deterministic
//! message-passing cluster simulator with bit-level communication
//! accounting ([`simnet`]), reference distributed operations
//! ([`dataops`]), communication-efficient checkers that verify those
//! operations' outputs ([`checkers`]), a parameter tuner for the sum
//! checker ([`tuner`]), fault injectors ([`faults`]), and workload
//! generators plus experiment drivers ([`workload`], [`experiment`]).

pub mod checkers;
pub mod faults;
pub mod tuner;
pub mod workload;
pub mod dataops;
pub mod experiment;
pub mod hashing;
pub mod simnet;
