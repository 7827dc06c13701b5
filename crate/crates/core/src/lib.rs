//! Anderson localization in the time domain: correlated disorder, the
//! effective Hamiltonian on a lattice, transfer-matrix localization lengths,
//! finite-size scaling, interior eigenstates with lab-frame time traces, and
//! a direct check of the secular approximation for the driven 1D system.

pub mod config;
pub mod disorder;
pub mod driven1d;
pub mod error;
pub mod fss;
pub mod interp;
pub mod io;
pub mod lattice;
pub mod manifest;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod tmm;

pub use error::{Error, Result};
