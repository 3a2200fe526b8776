//! Fourier spectral solvers for 2D Navier–Stokes and 1D Burgers, and a
//! transformer that forecasts their spectral coefficients autoregressively.

pub mod burgers1d;
pub mod config;
pub mod container;
pub mod forecast;
pub mod ns2d;
pub mod persist;
pub mod plot;
pub mod spectral;
pub mod trajectory;
pub mod training;
pub mod transformer;
