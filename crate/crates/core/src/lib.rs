//! Ergodic mean field games of controls on a bounded interval with
//! state constraints enforced by blow-up of the value function.

pub mod domain;
pub mod fp;
pub mod hjb;
pub mod measure;
pub mod mfgc;
pub mod model;
pub mod sde;
