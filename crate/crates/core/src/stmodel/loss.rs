//! Aggregate (bag-level) likelihood of an observed travel time.
//!
//! The time over a route is modelled with the summed means and summed
//! variances of its segments; the per-pair loss is the Gaussian negative
//! log-likelihood of the observed total under those aggregate moments.

use std::f64::consts::PI;

use crate::pathing::Route;

use super::table::TravelTimeTable;

/// Sums per-segment `(mean, std)` into `(Σ mean, sqrt(Σ std²))`.
pub fn aggregate_moments(parts: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mu, var) = parts
        .into_iter()
        .fold((0.0, 0.0), |(m, v), (mu, sigma)| (m + mu, v + sigma * sigma));
    (mu, var.sqrt())
}

/// Aggregate mean and std of a route at one time step. An empty route
/// aggregates to `(0, 0)`.
pub fn aggregate_route(route: &Route, table: &TravelTimeTable, time_step: usize) -> (f64, f64) {
    aggregate_moments(
        route
            .segment_ids
            .iter()
            .map(|&s| (table.mu(s, time_step), table.sigma(s, time_step))),
    )
}

/// `(T - μ)² / (2σ²) + ½ ln(2πσ²)`.
pub fn pair_nll(mu_t: f64, sigma_t: f64, observed: f64) -> f64 {
    let var = sigma_t * sigma_t;
    let r = observed - mu_t;
    r * r / (2.0 * var) + 0.5 * (2.0 * PI * var).ln()
}

/// Partial derivatives of [`pair_nll`] with respect to `(mu_t, sigma_t)`.
pub fn pair_nll_grad(mu_t: f64, sigma_t: f64, observed: f64) -> (f64, f64) {
    let var = sigma_t * sigma_t;
    let r = observed - mu_t;
    (-r / var, 1.0 / sigma_t - r * r / (var * sigma_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate_moments([(60.0, 3.0), (120.0, 4.0)]);
        assert_eq!((m, s), (180.0, 5.0));
        assert_eq!(aggregate_moments([(42.0, 7.0)]), (42.0, 7.0));
        let (m, s) = aggregate_moments(std::iter::repeat_n((30.0, 6.0), 10));
        assert!((m - 300.0).abs() < 1e-12);
        assert!((s - 18.9737).abs() < 1e-4);
        assert_eq!(aggregate_moments([]), (0.0, 0.0));
    }

    #[test]
    fn nll_examples() {
        let base = pair_nll(300.0, 30.0, 300.0);
        assert!((base - 0.5 * (2.0 * PI * 900.0).ln()).abs() < 1e-12);
        assert!((base - 4.320136).abs() < 1e-6);
        assert_eq!(pair_nll(310.0, 30.0, 300.0), pair_nll(290.0, 30.0, 300.0));
        let doubled = pair_nll(300.0, 60.0, 300.0);
        assert!((doubled - base - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_differences() {
        let (mu, sigma, t) = (250.0, 40.0, 310.0);
        let (dm, ds) = pair_nll_grad(mu, sigma, t);
        let h = 1e-5;
        let fm = (pair_nll(mu + h, sigma, t) - pair_nll(mu - h, sigma, t)) / (2.0 * h);
        let fs = (pair_nll(mu, sigma + h, t) - pair_nll(mu, sigma - h, t)) / (2.0 * h);
        assert!((dm - fm).abs() < 1e-8);
        assert!((ds - fs).abs() < 1e-8);
        assert_eq!(pair_nll_grad(300.0, 30.0, 300.0).0, 0.0);
    }
}
