#pragma once

#include <Eigen/Dense>
#include <vector>

namespace comigs {

/// Coupled quadratic objective
///   f(theta, phi) = 1/2 <A theta, theta> + 1/2 <B phi, phi> + <C theta, phi>
/// with block matrix H = [[A, C^T], [C, B]] required positive definite.
/// Both partial argmin maps are then linear and their composition
/// T = A^{-1} C^T B^{-1} C contracts toward the unique optimum at zero.
struct QuadraticBilevel {
    Eigen::MatrixXd a;  // |theta| x |theta|, symmetric
    Eigen::MatrixXd b;  // |phi| x |phi|, symmetric
    Eigen::MatrixXd c;  // |phi| x |theta|

    QuadraticBilevel(Eigen::MatrixXd a_in, Eigen::MatrixXd b_in, Eigen::MatrixXd c_in);

    Eigen::MatrixXd block_h() const;
    /// Extreme eigenvalues of H (mu = smallest, l = largest).
    double mu() const { return mu_; }
    double l() const { return l_; }

private:
    double mu_ = 0.0, l_ = 0.0;
};

/// The composition matrix A^{-1} C^T B^{-1} C, computed via factorizations.
Eigen::MatrixXd quad_operator_t(const QuadraticBilevel& q);

/// Exact alternation theta_{k+1} = T theta_k; returns ||theta_k|| for
/// k = 0..k_max (inclusive of the start).
std::vector<double> quad_alternate(const QuadraticBilevel& q, const Eigen::VectorXd& theta0,
                                   int k_max);

struct ContractionRate {
    double operator_norm;    // ||A^{-1} C^T B^{-1} C||_2 (Euclidean)
    double spectral_radius;  // rho(T) = ||A^{-1/2} C^T B^{-1} C A^{-1/2}||_2, the
                             // contraction factor in the A^{1/2}-weighted norm;
                             // provably <= (L - mu)/L < 1 for H > 0
    double loose_bound;      // (L - mu) / L from the extreme eigenvalues of H
};
ContractionRate contraction_rate(const QuadraticBilevel& q);

/// Trajectory norms in the A^{1/2}-weighted norm (the norm in which the
/// alternation provably contracts).
std::vector<double> quad_alternate_weighted(const QuadraticBilevel& q,
                                            const Eigen::VectorXd& theta0, int k_max);

}  // namespace comigs
