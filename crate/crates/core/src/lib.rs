//! Phase-field topology optimization of a supercapacitor electrode under a
//! steady Poisson–Nernst–Planck model.

#![allow(clippy::needless_range_loop)]

pub mod adjoint;
pub mod cli;
pub mod fem;
pub mod io;
pub mod materials;
pub mod mesh;
pub mod optimizer;
pub mod pnp;
