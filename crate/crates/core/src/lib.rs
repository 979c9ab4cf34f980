//! Clustering-based control inversion for wide-area damping control.
//!
//! The crate builds a linearized multi-machine power-system model, designs a
//! consensus-preserving LQR reference, computes a frequency-limited Gramian
//! of the reference closed loop through the Hamiltonian eigenstructure,
//! clusters the generators by weighted k-means on the Gramian factor,
//! synthesizes the projected suboptimal gain by inverse projection, and
//! quantifies how closely that gain matches the reference inside the
//! inter-area frequency band.
//!
//! The usual flow is [`sysmodel::synth_random_model`] (or
//! [`sysmodel::ModelInputs`]) followed by [`inversion::design_pipeline`] and
//! [`evalsim::evaluate_design`]; [`hiersim::run_hierarchy`] replays the
//! distributed implementation of the resulting gain.

pub mod cluster;
pub mod cplqr;
pub mod error;
pub mod evalsim;
pub mod fgram;
pub mod hiersim;
pub mod io;
pub mod linalg;
pub mod seed;
pub mod sysmodel;

pub mod inversion;

pub use error::{Error, Result};
