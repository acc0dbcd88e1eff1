//! Second-order targeted maximum likelihood estimation with highly adaptive
//! lasso (HAL) regularization.
//!
//! Two estimands are covered: the integrated square of a discrete density
//! ([`density2`]) and the treatment-specific mean `E[E(Y | A = 1, W)]`
//! ([`tsm`]). [`hal`] provides the penalized indicator-spline fits both rely
//! on, and [`sim`] the Monte-Carlo harness used to study them.

pub mod density2;
pub mod hal;
pub mod numeric;
pub mod sim;
pub mod tsm;
