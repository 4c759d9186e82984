#include "comigs/certify.hpp"

#include <algorithm>
#include <cmath>

namespace comigs {

QuadraticBilevel random_quadratic(int dim_theta, int dim_phi, Rng& rng) {
    const int n = dim_theta + dim_phi;
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
    Eigen::MatrixXd h = g.transpose() * g + 0.1 * Eigen::MatrixXd::Identity(n, n);
    return QuadraticBilevel(h.topLeftCorner(dim_theta, dim_theta),
                            h.bottomRightCorner(dim_phi, dim_phi),
                            h.bottomLeftCorner(dim_phi, dim_theta));
}

DecoupledInstance random_decoupled(int d, int n, int n_specialists, LossKind loss, Rng& rng) {
    DecoupledInstance inst;
    inst.loss = loss;
    inst.n_specialists = n_specialists;
    inst.x.resize(d, n);
    inst.target.resize(n);
    for (int i = 0; i < n; ++i) {
        for (int r = 0; r < d; ++r) inst.x(r, i) = rng.normal() / std::sqrt(static_cast<double>(d));
        inst.target(i) = loss == LossKind::Quadratic ? (rng.uniform() - 0.5)
                                                     : (rng.uniform() < 0.5 ? -1.0 : 1.0);
    }
    inst.mu_pen = 0.5 + 1.5 * rng.uniform();
    inst.radius = 1.0;
    inst.init_start();
    inst.alpha_reg = alpha_strong_convexity_bound(inst);
    inst.validate();
    return inst;
}

bool QuadCertification::all_ok() const {
    if (!hand_instance_ok) return false;
    for (const QuadInstanceReport& r : instances)
        if (!r.contraction_ok || !r.weighted_ok || !r.bound_ok) return false;
    return true;
}

QuadCertification certify_quadratic(std::size_t n_instances, int dim_max, int iters,
                                    std::uint64_t seed) {
    QuadCertification cert;
    Rng rng(mix_seed(seed ^ 0x9a9a5eedULL));
    for (std::size_t k = 0; k < n_instances; ++k) {
        const int dt = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(dim_max)));
        const int dp = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(dim_max)));
        QuadraticBilevel q = random_quadratic(dt, dp, rng);
        ContractionRate rate = contraction_rate(q);

        Eigen::VectorXd theta0(dt);
        for (int i = 0; i < dt; ++i) theta0(i) = rng.normal();
        theta0.normalize();
        std::vector<double> norms = quad_alternate(q, theta0, iters);
        std::vector<double> wnorms = quad_alternate_weighted(q, theta0, iters);

        QuadInstanceReport rep;
        rep.dim_theta = dt;
        rep.dim_phi = dp;
        rep.operator_norm = rate.operator_norm;
        rep.spectral_radius = rate.spectral_radius;
        rep.loose_bound = rate.loose_bound;
        rep.contraction_ok = true;
        rep.weighted_ok = true;
        for (std::size_t i = 0; i + 1 < norms.size(); ++i) {
            if (norms[i] < 1e-200) break;  // fully converged, ratios are roundoff
            const double ratio = norms[i + 1] / norms[i];
            rep.max_step_ratio = std::max(rep.max_step_ratio, ratio);
            if (ratio > rate.operator_norm + 1e-9) rep.contraction_ok = false;
            const double wratio = wnorms[i + 1] / wnorms[i];
            rep.max_weighted_step_ratio = std::max(rep.max_weighted_step_ratio, wratio);
            if (wratio > rate.spectral_radius + 1e-9) rep.weighted_ok = false;
        }
        rep.bound_ok =
            rate.spectral_radius <= rate.loose_bound + 1e-12 && rate.spectral_radius < 1.0;
        cert.instances.push_back(rep);
    }

    // Worked instance: A = 2 I2, B = [2], C = [[1, 0]].
    {
        Eigen::MatrixXd a = 2.0 * Eigen::MatrixXd::Identity(2, 2);
        Eigen::MatrixXd b(1, 1);
        b << 2.0;
        Eigen::MatrixXd c(1, 2);
        c << 1.0, 0.0;
        QuadraticBilevel q(a, b, c);
        Eigen::MatrixXd t = quad_operator_t(q);
        bool ok = std::abs(t(0, 0) - 0.25) < 1e-15 && std::abs(t(0, 1)) < 1e-15 &&
                  std::abs(t(1, 0)) < 1e-15 && std::abs(t(1, 1)) < 1e-15;
        Eigen::VectorXd theta(2);
        theta << 1.0, 1.0;
        for (int k = 0; k < 6 && ok; ++k) {
            Eigen::VectorXd next = t * theta;
            ok = std::abs(next(0) - 0.25 * theta(0)) < 1e-15 && std::abs(next(1)) < 1e-15;
            theta = next;
        }
        cert.hand_instance_ok = ok;
    }
    return cert;
}

bool DecoupledCertification::all_ok() const {
    if (!kl_ok) return false;
    for (const DecoupledInstanceReport& r : instances)
        if (!r.monotone_ok || !r.envelope_ok || !r.curvature_positive) return false;
    return true;
}

DecoupledCertification certify_decoupled(std::size_t n_instances, int sweeps, int d_max,
                                         int n_max, int specialists_max,
                                         std::size_t kl_instances, int curvature_trials,
                                         std::uint64_t seed) {
    DecoupledCertification cert;
    Rng rng(mix_seed(seed ^ 0xdec0de11ULL));

    for (std::size_t k = 0; k < n_instances; ++k) {
        const int d = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(d_max - 1)));
        const int n = 5 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_max - 4)));
        const int ns = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(specialists_max + 1)));
        DecoupledInstance inst = random_decoupled(d, n, ns, LossKind::Quadratic, rng);

        DecoupledInstanceReport rep;
        rep.d = d;
        rep.n = n;
        rep.n_specialists = ns;
        rep.alpha = inst.alpha_reg;
        rep.mu_pen = inst.mu_pen;

        CurvatureReport curv = strong_convexity_check(inst, curvature_trials, rng);
        rep.min_curvature = curv.min_curvature;
        rep.curvature_positive = curv.positive;

        // F* from running the alternation to stagnation.
        DecoupledInstance probe = inst;
        probe.init_start();
        double prev = decoupled_objective(probe);
        double f_star = prev;
        for (int s = 0; s < 20000; ++s) {
            step_lambda(probe);
            step_phi(probe);
            step_theta(probe);
            const double cur = decoupled_objective(probe);
            f_star = cur;
            if (prev - cur < 1e-14) break;
            prev = cur;
        }
        rep.f_star = f_star;

        // Certified trajectory.
        DecoupledInstance run = inst;
        run.init_start();
        SweepTrace trace = run_decoupled(run, sweeps);
        rep.f_start = trace.sweep_f.front();
        rep.monotone_ok = true;
        for (std::size_t i = 1; i < trace.step_f.size(); ++i)
            if (trace.step_f[i] > trace.step_f[i - 1] + 1e-12) rep.monotone_ok = false;

        // Curvature range sampled at random feasible points plus points
        // along the trajectory, with 0.9x / 1.1x safety margins.
        double cmin = curv.min_curvature, cmax = curv.max_curvature;
        {
            DecoupledInstance at = inst;
            at.init_start();
            std::vector<int> snaps = {0, 1, 5, sweeps};
            int done = 0;
            for (int target : snaps) {
                while (done < target) {
                    step_lambda(at);
                    step_phi(at);
                    step_theta(at);
                    ++done;
                }
                for (int dir = 0; dir < 64; ++dir) {
                    const double c = directional_curvature(at, random_direction(at, rng));
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                }
            }
        }
        rep.mu_sc = 0.9 * cmin;
        rep.l_sc = 1.1 * cmax;
        rep.envelope_ok = rep.mu_sc > 0.0 &&
                          verify_linear_rate(trace.sweep_f, rep.mu_sc, rep.l_sc, f_star, 1e-6,
                                             &rep.first_violation);
        cert.instances.push_back(rep);
    }

    // KL identity: with lambda = pi_phi(x), the decoupled and un-decoupled
    // objectives coincide.
    cert.kl_checked = kl_instances;
    cert.kl_max_err = 0.0;
    for (std::size_t k = 0; k < kl_instances; ++k) {
        const int d = 2 + static_cast<int>(rng.uniform_int(3));
        const int n = 3 + static_cast<int>(rng.uniform_int(8));
        const int ns = static_cast<int>(rng.uniform_int(4));
        const LossKind kind = rng.uniform() < 0.5 ? LossKind::Quadratic : LossKind::Logistic;
        DecoupledInstance inst = random_decoupled(d, n, ns, kind, rng);
        randomize_point(inst, rng);
        set_lambda_to_router(inst);
        const double err = std::abs(decoupled_objective(inst) - linmodel_objective(inst));
        cert.kl_max_err = std::max(cert.kl_max_err, err);
    }
    cert.kl_ok = cert.kl_max_err <= 1e-12;
    return cert;
}

}  // namespace comigs
