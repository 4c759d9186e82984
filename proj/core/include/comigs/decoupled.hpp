#pragma once

#include <Eigen/Dense>
#include <vector>

#include "comigs/rng.hpp"

namespace comigs {

enum class LossKind { Quadratic, Logistic };

/// The decoupled convex program over linear experts: free simplex columns
/// lambda^i replace the router outputs and are tied back through a KL
/// penalty with weight mu_pen. alpha_reg is the Frobenius regularizer on
/// both parameter blocks. `radius` bounds the parameter region used when
/// deriving the quadratic loss derivative bound.
struct DecoupledInstance {
    Eigen::MatrixXd x;       // d x n data columns
    Eigen::VectorXd target;  // b_i (quadratic) or labels in {-1,+1} (logistic)
    LossKind loss = LossKind::Quadratic;
    int n_specialists = 0;   // N; experts = N + 1
    double alpha_reg = 1.0;
    double mu_pen = 1.0;
    double radius = 1.0;

    Eigen::MatrixXd theta;   // d x (N+1)
    Eigen::MatrixXd phi;     // d x (N+1)
    Eigen::MatrixXd lambda;  // (N+1) x n, columns on the simplex

    /// theta = phi = 0, lambda uniform.
    void init_start();
    void validate() const;
    int n_experts() const { return n_specialists + 1; }
    Eigen::Index n_samples() const { return x.cols(); }
};

double loss_value(LossKind kind, double t, double target);
double loss_deriv(LossKind kind, double t, double target);
double loss_second(LossKind kind, double t, double target);

Eigen::VectorXd softmax_vec(const Eigen::VectorXd& y);

/// F_mu with the KL penalty written out as d(lambda) + s(phi^T x) -
/// <lambda, phi^T x>. Throws if any lambda column leaves the simplex by
/// more than 1e-9.
double decoupled_objective(const DecoupledInstance& inst);

/// The un-decoupled objective with router outputs pi_phi(x_i) in place of
/// lambda. Written independently of decoupled_objective; the two must agree
/// when lambda^i = pi_phi(x_i).
double linmodel_objective(const DecoupledInstance& inst);

void set_lambda_to_router(DecoupledInstance& inst);

/// Per-sample exponentiated-gradient argmin over the simplex, run to
/// gradient-mapping norm <= tol. Objective never increases.
void step_lambda(DecoupledInstance& inst, double tol = 1e-10, int max_iter = 200000);

/// Gradient descent with backtracking on the smooth strongly convex
/// phi-subproblem, to gradient norm <= tol.
void step_phi(DecoupledInstance& inst, double tol = 1e-10, long max_iter = 2000000);

/// Quadratic loss: exact ridge normal-equations solve. Logistic: damped
/// Newton to gradient norm <= tol.
void step_theta(DecoupledInstance& inst, double tol = 1e-10, int max_iter = 500);

/// Bound on |loss'| over the feasible region: 1 for logistic, data- and
/// radius-dependent for the quadratic loss.
double rho_bound(const DecoupledInstance& inst);

/// 2 ||x||^2 max{mu, rho^2/mu} with ||x|| = max_i ||x_i||.
double alpha_strong_convexity_bound(const DecoupledInstance& inst);

struct Direction {
    Eigen::MatrixXd dtheta, dphi, dlambda;  // dlambda columns sum to zero
};
Direction random_direction(const DecoupledInstance& inst, Rng& rng);

/// z^T grad^2 F z estimated by a second-order central difference at the
/// instance's current variables.
double directional_curvature(const DecoupledInstance& inst, const Direction& dir,
                             double delta = 1e-4);

/// Moves the instance's variables to a random feasible point: parameter
/// blocks inside the radius ball, lambda columns in the simplex interior.
void randomize_point(DecoupledInstance& inst, Rng& rng);

struct CurvatureReport {
    double min_curvature;
    double max_curvature;
    bool positive;
};

/// Samples `trials` random (feasible point, direction) pairs.
CurvatureReport strong_convexity_check(DecoupledInstance inst, int trials, Rng& rng);

struct SweepTrace {
    std::vector<double> sweep_f;  // F after each full (lambda, phi, theta) sweep; [0] = start
    std::vector<double> step_f;   // F after every individual block step
};
SweepTrace run_decoupled(DecoupledInstance& inst, int sweeps);

/// Checks F_k - F* <= (1 - mu/L)^{2k} (F_0 - F*) (1 + slack) for all k.
/// On failure stores the first violating index when requested.
bool verify_linear_rate(const std::vector<double>& f_trace, double mu_sc, double l_sc,
                        double f_star, double slack = 1e-6, int* first_violation = nullptr);

}  // namespace comigs
