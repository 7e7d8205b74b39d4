//! Core library for active classification of moving targets by a single
//! drone: world and sensor simulation, conflation-based belief fusion, a
//! permutation-invariant attention policy with from-scratch PPO training, a
//! receding-horizon tracking controller, baseline policies and the paired
//! evaluation harness.

pub mod baselines;
pub mod belief;
pub mod config;
pub mod env;
pub mod geom;
pub mod harness;
pub mod mpc;
pub mod policy;
pub mod ppo;
pub mod seeding;
pub mod sensor;
pub mod world;
