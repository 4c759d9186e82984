#include "comigs/quadratic.hpp"

#include <Eigen/Eigenvalues>

#include "comigs/errors.hpp"

namespace comigs {

QuadraticBilevel::QuadraticBilevel(Eigen::MatrixXd a_in, Eigen::MatrixXd b_in,
                                   Eigen::MatrixXd c_in)
    : a(std::move(a_in)), b(std::move(b_in)), c(std::move(c_in)) {
    if (a.rows() != a.cols() || b.rows() != b.cols())
        throw ShapeError("QuadraticBilevel: A and B must be square");
    if (c.rows() != b.rows() || c.cols() != a.rows())
        throw ShapeError("QuadraticBilevel: C must be |phi| x |theta|");
    if (!a.isApprox(a.transpose(), 1e-12) || !b.isApprox(b.transpose(), 1e-12))
        throw std::invalid_argument("QuadraticBilevel: A and B must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(block_h());
    mu_ = es.eigenvalues().minCoeff();
    l_ = es.eigenvalues().maxCoeff();
    if (mu_ <= 0.0)
        throw std::invalid_argument(
            "QuadraticBilevel: block matrix H is not positive definite (smallest eigenvalue " +
            std::to_string(mu_) + ")");
}

Eigen::MatrixXd QuadraticBilevel::block_h() const {
    const Eigen::Index nt = a.rows(), np = b.rows();
    Eigen::MatrixXd h(nt + np, nt + np);
    h.topLeftCorner(nt, nt) = a;
    h.topRightCorner(nt, np) = c.transpose();
    h.bottomLeftCorner(np, nt) = c;
    h.bottomRightCorner(np, np) = b;
    return h;
}

namespace {

void check_invertible(const Eigen::MatrixXd& m, const char* name) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.eigenvalues().cwiseAbs().minCoeff() < 1e-12)
        throw std::invalid_argument(std::string("quad_operator_t: ") + name + " is singular");
}

}  // namespace

Eigen::MatrixXd quad_operator_t(const QuadraticBilevel& q) {
    check_invertible(q.a, "A");
    check_invertible(q.b, "B");
    // A^{-1} C^T B^{-1} C, solved block by block, no explicit inverses.
    Eigen::MatrixXd binv_c = q.b.ldlt().solve(q.c);
    return q.a.ldlt().solve(q.c.transpose() * binv_c);
}

std::vector<double> quad_alternate(const QuadraticBilevel& q, const Eigen::VectorXd& theta0,
                                   int k_max) {
    if (theta0.size() != q.a.rows())
        throw ShapeError("quad_alternate: theta0 dimension mismatch");
    const Eigen::MatrixXd t = quad_operator_t(q);
    std::vector<double> norms;
    norms.reserve(static_cast<std::size_t>(k_max) + 1);
    Eigen::VectorXd theta = theta0;
    norms.push_back(theta.norm());
    for (int k = 0; k < k_max; ++k) {
        theta = t * theta;
        norms.push_back(theta.norm());
    }
    return norms;
}

ContractionRate contraction_rate(const QuadraticBilevel& q) {
    const Eigen::MatrixXd t = quad_operator_t(q);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(t);
    ContractionRate r;
    r.operator_norm = t.size() == 0 ? 0.0 : svd.singularValues().maxCoeff();
    // T is similar to the symmetric PSD matrix A^{-1/2} C^T B^{-1} C A^{-1/2},
    // whose largest eigenvalue is both rho(T) and the A-weighted norm of T.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(q.a);
    const Eigen::MatrixXd a_inv_sqrt = ea.operatorInverseSqrt();
    const Eigen::MatrixXd s = a_inv_sqrt * q.c.transpose() * q.b.ldlt().solve(q.c) * a_inv_sqrt;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    r.spectral_radius = es.eigenvalues().maxCoeff();
    r.loose_bound = (q.l() - q.mu()) / q.l();
    return r;
}

std::vector<double> quad_alternate_weighted(const QuadraticBilevel& q,
                                            const Eigen::VectorXd& theta0, int k_max) {
    if (theta0.size() != q.a.rows())
        throw ShapeError("quad_alternate_weighted: theta0 dimension mismatch");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(q.a);
    const Eigen::MatrixXd a_sqrt = ea.operatorSqrt();
    const Eigen::MatrixXd t = quad_operator_t(q);
    std::vector<double> norms;
    norms.reserve(static_cast<std::size_t>(k_max) + 1);
    Eigen::VectorXd theta = theta0;
    norms.push_back((a_sqrt * theta).norm());
    for (int k = 0; k < k_max; ++k) {
        theta = t * theta;
        norms.push_back((a_sqrt * theta).norm());
    }
    return norms;
}

}  // namespace comigs
