//! Decay widths of auto-ionizing states from complex absorbing potentials or exterior
//! complex scaling, checked against Lindblad propagation of the block density matrix.

pub mod fock;
pub mod model;
pub mod spectral;
pub mod widths;
pub mod lindblad;
pub mod pipeline;
