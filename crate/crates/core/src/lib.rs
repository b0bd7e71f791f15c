//! Virtual laboratory for number statistics of a small degenerate Bose gas
//! held in a five-sheet optical dipole trap.
//!
//! The pipeline runs trap depth -> chemical potential -> Thomas-Fermi atom
//! number -> technical noise -> fluorescence detection -> estimators:
//!
//! - [`trap`]: Gaussian-sheet potential, minimum search, barrier heights,
//!   trap frequencies and calibration of the intensity-to-energy coefficient.
//! - [`condensate`]: Thomas-Fermi density, atom number and its inverse.
//! - [`noise`]: Monte Carlo propagation of technical fluctuations and the
//!   closed-form fluctuation model.
//! - [`detector`]: photon-count traces, step detection and calibration.
//! - [`stats`]: sample statistics, chi-square intervals, histograms, fits.
//! - [`experiment`]: end-to-end runs, figure data and the ramp schedule.
//!
//! All internal quantities are SI. Helpers in [`units`] convert to the nK,
//! μm, mW and Hz used in reports.

pub mod condensate;
pub mod detector;
pub mod experiment;
pub mod noise;
pub mod optim;
pub mod plot;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod trap;
pub mod units;
