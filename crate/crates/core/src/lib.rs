//! Safe output-feedback adaptive optimal control.
//!
//! A robust control-barrier-function QP filters an actor-critic policy while a
//! DNN-based adaptive observer estimates the state from partial measurements.

pub mod critic;
pub mod harness;
pub mod histstack;
pub mod numerics;
pub mod observer;
pub mod plant;
pub mod qp;
pub mod trainer;
