#pragma once

#include <cstdint>
#include <vector>

#include "comigs/decoupled.hpp"
#include "comigs/quadratic.hpp"

namespace comigs {

/// Random strictly positive definite coupled quadratic (H = G^T G + 0.1 I).
QuadraticBilevel random_quadratic(int dim_theta, int dim_phi, Rng& rng);

/// Random decoupled instance with the regularizer set exactly at the
/// strong-convexity bound for the given penalty.
DecoupledInstance random_decoupled(int d, int n, int n_specialists, LossKind loss, Rng& rng);

struct QuadInstanceReport {
    int dim_theta = 0, dim_phi = 0;
    double operator_norm = 0.0;    // Euclidean ||T||_2
    double spectral_radius = 0.0;  // A-weighted contraction factor
    double loose_bound = 0.0;      // (L - mu) / L
    double max_step_ratio = 0.0;          // Euclidean per-step ratio
    double max_weighted_step_ratio = 0.0;  // A-weighted per-step ratio
    bool contraction_ok = false;  // every Euclidean ratio <= operator_norm + 1e-9
    bool weighted_ok = false;     // every A-weighted ratio <= spectral_radius + 1e-9
    bool bound_ok = false;        // spectral_radius <= loose_bound + 1e-12 < 1
};

struct QuadCertification {
    std::vector<QuadInstanceReport> instances;
    bool hand_instance_ok = false;  // first coordinate contracts by exactly 0.25
    bool all_ok() const;
};

QuadCertification certify_quadratic(std::size_t n_instances, int dim_max, int iters,
                                    std::uint64_t seed);

struct DecoupledInstanceReport {
    int d = 0, n = 0, n_specialists = 0;
    double alpha = 0.0, mu_pen = 0.0;
    double mu_sc = 0.0, l_sc = 0.0;
    double f_start = 0.0, f_star = 0.0;
    double min_curvature = 0.0;
    bool curvature_positive = false;
    bool monotone_ok = false;  // F non-increasing at every block step within 1e-12
    bool envelope_ok = false;  // (1 - mu/L)^{2k} residual envelope
    int first_violation = -1;
};

struct DecoupledCertification {
    std::vector<DecoupledInstanceReport> instances;
    std::size_t kl_checked = 0;
    double kl_max_err = 0.0;
    bool kl_ok = false;  // decoupled == un-decoupled objective within 1e-12
    bool all_ok() const;
};

DecoupledCertification certify_decoupled(std::size_t n_instances, int sweeps, int d_max,
                                         int n_max, int specialists_max,
                                         std::size_t kl_instances, int curvature_trials,
                                         std::uint64_t seed);

}  // namespace comigs
