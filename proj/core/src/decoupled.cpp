#include "comigs/decoupled.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "comigs/errors.hpp"

namespace comigs {

void DecoupledInstance::init_start() {
    const int ne = n_experts();
    theta = Eigen::MatrixXd::Zero(x.rows(), ne);
    phi = Eigen::MatrixXd::Zero(x.rows(), ne);
    lambda = Eigen::MatrixXd::Constant(ne, x.cols(), 1.0 / static_cast<double>(ne));
}

void DecoupledInstance::validate() const {
    if (x.cols() != target.size())
        throw ShapeError("DecoupledInstance: one target per data column required");
    if (n_specialists < 0) throw ConfigError("DecoupledInstance: negative specialist count");
    if (alpha_reg < 0.0 || mu_pen < 0.0)
        throw ConfigError("DecoupledInstance: alpha_reg and mu_pen must be >= 0");
    const int ne = n_experts();
    if (theta.rows() != x.rows() || theta.cols() != ne || phi.rows() != x.rows() ||
        phi.cols() != ne)
        throw ShapeError("DecoupledInstance: theta/phi must be d x (N+1)");
    if (lambda.rows() != ne || lambda.cols() != x.cols())
        throw ShapeError("DecoupledInstance: lambda must be (N+1) x n");
    if (loss == LossKind::Logistic)
        for (Eigen::Index i = 0; i < target.size(); ++i)
            if (target(i) != 1.0 && target(i) != -1.0)
                throw ConfigError("DecoupledInstance: logistic labels must be in {-1,+1}");
}

double loss_value(LossKind kind, double t, double target) {
    if (kind == LossKind::Quadratic) {
        const double r = t - target;
        return 0.5 * r * r;
    }
    const double z = -target * t;
    // ln(1 + exp(z)) without overflow
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double loss_deriv(LossKind kind, double t, double target) {
    if (kind == LossKind::Quadratic) return t - target;
    const double z = -target * t;
    const double s = z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return -target * s;
}

double loss_second(LossKind kind, double t, double target) {
    if (kind == LossKind::Quadratic) return 1.0;
    const double z = -target * t;
    const double s = z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return s * (1.0 - s);
}

Eigen::VectorXd softmax_vec(const Eigen::VectorXd& y) {
    Eigen::VectorXd e = (y.array() - y.maxCoeff()).exp();
    return e / e.sum();
}

namespace {

double neg_entropy(const Eigen::VectorXd& lam) {
    double d = 0.0;
    for (Eigen::Index j = 0; j < lam.size(); ++j)
        if (lam(j) > 0.0) d += lam(j) * std::log(lam(j));
    return d;
}

double log_sum_exp_vec(const Eigen::VectorXd& y) {
    const double mx = y.maxCoeff();
    return mx + std::log((y.array() - mx).exp().sum());
}

void check_simplex(const Eigen::MatrixXd& lambda) {
    for (Eigen::Index i = 0; i < lambda.cols(); ++i) {
        double sum = 0.0;
        for (Eigen::Index j = 0; j < lambda.rows(); ++j) {
            if (lambda(j, i) < -1e-9)
                throw std::invalid_argument("lambda column " + std::to_string(i) +
                                            " has negative entry " + std::to_string(lambda(j, i)));
            sum += lambda(j, i);
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("lambda column " + std::to_string(i) + " sums to " +
                                        std::to_string(sum));
    }
}

}  // namespace

double decoupled_objective(const DecoupledInstance& inst) {
    check_simplex(inst.lambda);
    const Eigen::Index n = inst.n_samples();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd xi = inst.x.col(i);
        const Eigen::VectorXd lam = inst.lambda.col(i);
        const Eigen::VectorXd tx = inst.theta.transpose() * xi;
        const Eigen::VectorXd px = inst.phi.transpose() * xi;
        const double t = lam.dot(tx);
        acc += loss_value(inst.loss, t, inst.target(i));
        acc += inst.mu_pen * (neg_entropy(lam) + log_sum_exp_vec(px) - lam.dot(px));
    }
    acc /= static_cast<double>(n);
    acc += 0.5 * inst.alpha_reg * (inst.theta.squaredNorm() + inst.phi.squaredNorm());
    return acc;
}

double linmodel_objective(const DecoupledInstance& inst) {
    const Eigen::Index n = inst.n_samples();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd xi = inst.x.col(i);
        const Eigen::VectorXd gate = softmax_vec(inst.phi.transpose() * xi);
        double t = 0.0;
        for (int j = 0; j < inst.n_experts(); ++j) t += gate(j) * inst.theta.col(j).dot(xi);
        acc += loss_value(inst.loss, t, inst.target(i));
    }
    acc /= static_cast<double>(n);
    acc += 0.5 * inst.alpha_reg * (inst.theta.squaredNorm() + inst.phi.squaredNorm());
    return acc;
}

void set_lambda_to_router(DecoupledInstance& inst) {
    for (Eigen::Index i = 0; i < inst.n_samples(); ++i)
        inst.lambda.col(i) = softmax_vec(inst.phi.transpose() * inst.x.col(i));
}

// ---------------------------------------------------------------------------
// Block steps

namespace {

// Per-sample subproblem, normalized by max(1, mu) so its conditioning (and
// the 1e-10 gradient-mapping target) is scale free:
//   g(lam) = loss(<lam, c>) / s + (mu / s) (d(lam) - <lam, m>),  s = max(1, mu).
struct LambdaSubproblem {
    Eigen::VectorXd c, m;
    LossKind kind;
    double target, mu;
    double scale;  // max(1, mu)

    double value(const Eigen::VectorXd& lam) const {
        return (loss_value(kind, lam.dot(c), target) +
                mu * (neg_entropy(lam) - lam.dot(m))) /
               scale;
    }
    Eigen::VectorXd gradient(const Eigen::VectorXd& lam) const {
        Eigen::VectorXd g = (loss_deriv(kind, lam.dot(c), target) / scale) * c - (mu / scale) * m;
        for (Eigen::Index j = 0; j < lam.size(); ++j)
            g(j) += (mu / scale) * (std::log(std::max(lam(j), 1e-300)) + 1.0);
        return g;
    }
    // Multiplicative (mirror) step in log space, max-subtracted.
    Eigen::VectorXd eg_step(const Eigen::VectorXd& lam, double eta) const {
        const Eigen::VectorXd g = gradient(lam);
        Eigen::VectorXd logits(lam.size());
        for (Eigen::Index j = 0; j < lam.size(); ++j)
            logits(j) = std::log(std::max(lam(j), 1e-300)) - eta * g(j);
        return softmax_vec(logits);
    }
};

}  // namespace

void step_lambda(DecoupledInstance& inst, double tol, int max_iter) {
    const Eigen::Index n = inst.n_samples();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double scale = std::max(1.0, inst.mu_pen);
        LambdaSubproblem sub{inst.theta.transpose() * inst.x.col(i),
                             inst.phi.transpose() * inst.x.col(i), inst.loss, inst.target(i),
                             inst.mu_pen, scale};
        Eigen::VectorXd lam = inst.lambda.col(i);
        if (lam.size() == 1) {
            inst.lambda.col(i) = Eigen::VectorXd::Ones(1);
            continue;
        }
        // The entropy block is 1-smooth relative to itself after the
        // normalization; the loss block adds at most l''_max ||c||^2 / s.
        const double second = inst.loss == LossKind::Quadratic ? 1.0 : 0.25;
        const double eta = 1.0 / (1.0 + second * sub.c.squaredNorm() / scale);
        double gval = sub.value(lam);
        double residual = 0.0;
        bool converged = false;
        for (int it = 0; it < max_iter; ++it) {
            residual = (lam - sub.eg_step(lam, 1.0)).norm();
            if (residual <= tol) {
                converged = true;
                break;
            }
            const Eigen::VectorXd cand = sub.eg_step(lam, eta);
            const double cval = sub.value(cand);
            if (cval > gval + 1e-14 * (1.0 + std::abs(gval))) break;  // roundoff floor
            lam = cand;
            gval = std::min(gval, cval);
        }
        if (!converged) {
            residual = (lam - sub.eg_step(lam, 1.0)).norm();
            if (residual > tol)
                throw ConvergenceError(
                    "step_lambda: sample " + std::to_string(i) + " did not reach tolerance",
                    residual);
        }
        inst.lambda.col(i) = lam;
    }
}

void step_phi(DecoupledInstance& inst, double tol, long max_iter) {
    if (inst.alpha_reg <= 0.0)
        throw ConfigError("step_phi: requires alpha_reg > 0");
    const Eigen::Index n = inst.n_samples();
    const double inv_n = 1.0 / static_cast<double>(n);
    auto value = [&](const Eigen::MatrixXd& phi) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd px = phi.transpose() * inst.x.col(i);
            acc += inst.mu_pen * (log_sum_exp_vec(px) - inst.lambda.col(i).dot(px));
        }
        return acc * inv_n + 0.5 * inst.alpha_reg * phi.squaredNorm();
    };
    auto gradient = [&](const Eigen::MatrixXd& phi) {
        Eigen::MatrixXd g = inst.alpha_reg * phi;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd xi = inst.x.col(i);
            const Eigen::VectorXd gate = softmax_vec(phi.transpose() * xi);
            g += (inst.mu_pen * inv_n) * xi * (gate - inst.lambda.col(i)).transpose();
        }
        return g;
    };

    Eigen::MatrixXd phi = inst.phi;
    double fval = value(phi);
    double step = 1.0 / std::max(inst.alpha_reg, 1e-12);
    for (long it = 0; it < max_iter; ++it) {
        const Eigen::MatrixXd g = gradient(phi);
        const double gnorm = g.norm();
        if (gnorm <= tol) {
            inst.phi = phi;
            return;
        }
        // Armijo backtracking with a gently growing trial step.
        double s = step;
        int shrink = 0;
        while (shrink < 80) {
            const Eigen::MatrixXd cand = phi - s * g;
            const double cval = value(cand);
            if (cval <= fval - 1e-4 * s * gnorm * gnorm) {
                phi = cand;
                fval = cval;
                break;
            }
            s *= 0.5;
            ++shrink;
        }
        if (shrink >= 80)
            throw ConvergenceError("step_phi: line search failed", gnorm);
        step = s * 2.0;
    }
    throw ConvergenceError("step_phi: gradient tolerance not reached",
                           gradient(phi).norm());
}

namespace {

// vec by columns: component (j*d + k) multiplies theta(k, j).
Eigen::VectorXd sample_design(const DecoupledInstance& inst, Eigen::Index i) {
    const Eigen::Index d = inst.x.rows();
    const int ne = inst.n_experts();
    Eigen::VectorXd m(d * ne);
    for (int j = 0; j < ne; ++j) m.segment(j * d, d) = inst.lambda(j, i) * inst.x.col(i);
    return m;
}

}  // namespace

void step_theta(DecoupledInstance& inst, double tol, int max_iter) {
    if (inst.alpha_reg <= 0.0)
        throw ConfigError("step_theta: requires alpha_reg > 0");
    const Eigen::Index n = inst.n_samples();
    const Eigen::Index d = inst.x.rows();
    const int ne = inst.n_experts();
    const Eigen::Index dim = d * ne;
    const double inv_n = 1.0 / static_cast<double>(n);

    if (inst.loss == LossKind::Quadratic) {
        Eigen::MatrixXd gram = inst.alpha_reg * Eigen::MatrixXd::Identity(dim, dim);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd m = sample_design(inst, i);
            gram += inv_n * m * m.transpose();
            rhs += inv_n * inst.target(i) * m;
        }
        const Eigen::VectorXd sol = gram.ldlt().solve(rhs);
        for (int j = 0; j < ne; ++j) inst.theta.col(j) = sol.segment(j * d, d);
        return;
    }

    // Logistic: damped Newton.
    Eigen::VectorXd v(dim);
    for (int j = 0; j < ne; ++j) v.segment(j * d, d) = inst.theta.col(j);
    auto value = [&](const Eigen::VectorXd& w) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            acc += loss_value(inst.loss, sample_design(inst, i).dot(w), inst.target(i));
        return acc * inv_n + 0.5 * inst.alpha_reg * w.squaredNorm();
    };
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd grad = inst.alpha_reg * v;
        Eigen::MatrixXd hess = inst.alpha_reg * Eigen::MatrixXd::Identity(dim, dim);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd m = sample_design(inst, i);
            const double t = m.dot(v);
            grad += inv_n * loss_deriv(inst.loss, t, inst.target(i)) * m;
            hess += inv_n * loss_second(inst.loss, t, inst.target(i)) * m * m.transpose();
        }
        if (grad.norm() <= tol) {
            for (int j = 0; j < ne; ++j) inst.theta.col(j) = v.segment(j * d, d);
            return;
        }
        const Eigen::VectorXd dir = hess.ldlt().solve(grad);
        double s = 1.0;
        const double f0 = value(v);
        const double slope = grad.dot(dir);
        while (s > 1e-12 && value(v - s * dir) > f0 - 1e-4 * s * slope) s *= 0.5;
        v -= s * dir;
    }
    Eigen::VectorXd grad = inst.alpha_reg * v;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd m = sample_design(inst, i);
        grad += inv_n * loss_deriv(inst.loss, m.dot(v), inst.target(i)) * m;
    }
    throw ConvergenceError("step_theta: Newton tolerance not reached", grad.norm());
}

// ---------------------------------------------------------------------------
// Strong convexity and rate machinery

double rho_bound(const DecoupledInstance& inst) {
    if (inst.loss == LossKind::Logistic) return 1.0;
    double max_x = 0.0, max_b = 0.0;
    for (Eigen::Index i = 0; i < inst.n_samples(); ++i) {
        max_x = std::max(max_x, inst.x.col(i).norm());
        max_b = std::max(max_b, std::abs(inst.target(i)));
    }
    // |t - b| <= ||x|| * max_j ||theta_j|| + |b| over the radius region.
    return max_x * inst.radius + max_b;
}

double alpha_strong_convexity_bound(const DecoupledInstance& inst) {
    double max_x2 = 0.0;
    for (Eigen::Index i = 0; i < inst.n_samples(); ++i)
        max_x2 = std::max(max_x2, inst.x.col(i).squaredNorm());
    const double rho = rho_bound(inst);
    return 2.0 * max_x2 * std::max(inst.mu_pen, rho * rho / inst.mu_pen);
}

Direction random_direction(const DecoupledInstance& inst, Rng& rng) {
    Direction dir;
    const Eigen::Index d = inst.x.rows();
    const int ne = inst.n_experts();
    const Eigen::Index n = inst.n_samples();
    dir.dtheta.resize(d, ne);
    dir.dphi.resize(d, ne);
    dir.dlambda.resize(ne, n);
    for (Eigen::Index r = 0; r < d; ++r)
        for (int j = 0; j < ne; ++j) {
            dir.dtheta(r, j) = rng.normal();
            dir.dphi(r, j) = rng.normal();
        }
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd h(ne);
        for (int j = 0; j < ne; ++j) h(j) = rng.normal();
        h.array() -= h.mean();  // stay in the simplex's affine hull
        dir.dlambda.col(i) = h;
    }
    const double norm = std::sqrt(dir.dtheta.squaredNorm() + dir.dphi.squaredNorm() +
                                  dir.dlambda.squaredNorm());
    dir.dtheta /= norm;
    dir.dphi /= norm;
    dir.dlambda /= norm;
    return dir;
}

double directional_curvature(const DecoupledInstance& inst, const Direction& dir, double delta) {
    DecoupledInstance probe = inst;
    probe.theta = inst.theta + delta * dir.dtheta;
    probe.phi = inst.phi + delta * dir.dphi;
    probe.lambda = inst.lambda + delta * dir.dlambda;
    const double fp = decoupled_objective(probe);
    probe.theta = inst.theta - delta * dir.dtheta;
    probe.phi = inst.phi - delta * dir.dphi;
    probe.lambda = inst.lambda - delta * dir.dlambda;
    const double fm = decoupled_objective(probe);
    const double f0 = decoupled_objective(inst);
    return (fp - 2.0 * f0 + fm) / (delta * delta);
}

void randomize_point(DecoupledInstance& inst, Rng& rng) {
    const Eigen::Index d = inst.x.rows();
    const int ne = inst.n_experts();
    for (Eigen::Index r = 0; r < d; ++r)
        for (int j = 0; j < ne; ++j) {
            inst.theta(r, j) = rng.normal();
            inst.phi(r, j) = rng.normal();
        }
    const double scale_t = inst.radius / std::max(inst.theta.norm(), 1e-12) * rng.uniform();
    const double scale_p = inst.radius / std::max(inst.phi.norm(), 1e-12) * rng.uniform();
    inst.theta *= scale_t;
    inst.phi *= scale_p;
    for (Eigen::Index i = 0; i < inst.n_samples(); ++i) {
        Eigen::VectorXd lam(ne);
        for (int j = 0; j < ne; ++j) lam(j) = 0.1 + 0.9 * rng.uniform();
        inst.lambda.col(i) = lam / lam.sum();
    }
}

CurvatureReport strong_convexity_check(DecoupledInstance inst, int trials, Rng& rng) {
    CurvatureReport rep{std::numeric_limits<double>::infinity(),
                        -std::numeric_limits<double>::infinity(), false};
    for (int t = 0; t < trials; ++t) {
        randomize_point(inst, rng);
        const double c = directional_curvature(inst, random_direction(inst, rng));
        rep.min_curvature = std::min(rep.min_curvature, c);
        rep.max_curvature = std::max(rep.max_curvature, c);
    }
    rep.positive = rep.min_curvature > 0.0;
    return rep;
}

SweepTrace run_decoupled(DecoupledInstance& inst, int sweeps) {
    SweepTrace trace;
    trace.sweep_f.push_back(decoupled_objective(inst));
    trace.step_f.push_back(trace.sweep_f.back());
    for (int k = 0; k < sweeps; ++k) {
        step_lambda(inst);
        trace.step_f.push_back(decoupled_objective(inst));
        step_phi(inst);
        trace.step_f.push_back(decoupled_objective(inst));
        step_theta(inst);
        trace.step_f.push_back(decoupled_objective(inst));
        trace.sweep_f.push_back(trace.step_f.back());
    }
    return trace;
}

bool verify_linear_rate(const std::vector<double>& f_trace, double mu_sc, double l_sc,
                        double f_star, double slack, int* first_violation) {
    if (f_trace.empty()) return true;
    const double gamma = mu_sc / l_sc;
    const double f0 = f_trace[0] - f_star;
    double envelope = f0;
    const double factor = (1.0 - gamma) * (1.0 - gamma);
    for (std::size_t k = 0; k < f_trace.size(); ++k) {
        const double lhs = f_trace[k] - f_star;
        if (lhs > envelope * (1.0 + slack)) {
            if (first_violation) *first_violation = static_cast<int>(k);
            return false;
        }
        envelope *= factor;
    }
    return true;
}

}  // namespace comigs
