//! Stackelberg linear-quadratic games in which the leader and the follower
//! observe different, overlapping sets of Brownian motions.
//!
//! The crate solves the follower and leader Riccati systems, simulates the
//! closed loop together with its filtering estimates, and checks the
//! resulting strategies by Monte Carlo perturbation.

pub mod assembly;
pub mod equilibrium;
pub mod error;
pub mod filtering;
pub mod game_model;
pub mod linalg;
pub mod mat_json;
pub mod principal_agent;
pub mod riccati;
pub mod rng;

pub use error::{Assumption, Error, Result};
pub use game_model::{CidGame, CidSpec, GameSpec, InfoPattern, MatPath, Observed, TimeGrid, ValidationReport};
