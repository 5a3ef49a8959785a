//! Grid simulator and fault-tolerance toolkit for the square-lattice GKP code,
//! written in the stabilizer subsystem (logical qubit x syndrome) picture.

pub mod circuits;
pub mod energy;
pub mod error;
pub mod faultmc;
pub mod ftcheck;
pub mod gates;
pub mod measurement;
pub mod states;
pub mod zakcore;

pub use error::{Result, SimError};
pub use zakcore::{GridSpec, SssState, SQRT_PI};
