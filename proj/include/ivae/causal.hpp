#pragma once

// Bivariate causal direction from recovered disturbances: HSIC permutation tests between
// each observed variable and each disturbance estimate.

#include <Eigen/Dense>

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include "ivae/datagen.hpp"
#include "ivae/errors.hpp"
#include "ivae/eval.hpp"
#include "ivae/model.hpp"
#include "ivae/rng.hpp"

namespace ivae {

struct HsicConfig {
    double alpha = 0.05;
    std::size_t num_perms = 500;
    std::uint64_t seed = 0;
    std::size_t max_points = 1000;  // larger inputs are subsampled without replacement
    std::size_t threads = 1;

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("HsicConfig: alpha must lie in (0, 1)");
        if (num_perms < 100) throw ConfigError("HsicConfig: num_perms must be >= 100");
        if (max_points < 50) throw ConfigError("HsicConfig: max_points must be >= 50");
        if (threads < 1) throw ConfigError("HsicConfig: threads must be >= 1");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HsicConfig, alpha, num_perms, seed, max_points, threads)

struct HsicResult {
    double statistic = 0.0;
    double p_value = 1.0;
    std::size_t num_perms = 0;
    double bandwidth_a = 0.0;
    double bandwidth_b = 0.0;
    bool reject = false;
    std::size_t points_used = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HsicResult, statistic, p_value, num_perms, bandwidth_a, bandwidth_b,
                                                reject, points_used)

namespace detail {

// Median of the nonzero pairwise distances.
inline double median_bandwidth(std::span<const double> v) {
    std::vector<double> d;
    d.reserve(v.size() * (v.size() - 1) / 2);
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = i + 1; j < v.size(); ++j) {
            const double x = std::abs(v[i] - v[j]);
            if (x > 0.0) d.push_back(x);
        }
    if (d.empty()) throw DomainError("hsic: input is constant");
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return *mid;
}

inline Eigen::MatrixXd gaussian_gram(std::span<const double> v, double bw) {
    const auto n = static_cast<Eigen::Index>(v.size());
    Eigen::MatrixXd k(n, n);
    const double c = -0.5 / (bw * bw);
    for (Eigen::Index i = 0; i < n; ++i) {
        k(i, i) = 1.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double dd = v[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(j)];
            k(i, j) = k(j, i) = std::exp(c * dd * dd);
        }
    }
    return k;
}

inline Eigen::MatrixXd double_center(const Eigen::MatrixXd& k) {
    const Eigen::VectorXd rm = k.rowwise().mean();
    const double all = k.mean();
    Eigen::MatrixXd c = k;
    c.colwise() -= rm;
    c.rowwise() -= rm.transpose();
    c.array() += all;
    return c;
}

// sum_ij Kc(i,j) L(p_i, p_j) / n^2
inline double permuted_stat(const Eigen::MatrixXd& kc, const Eigen::MatrixXd& l, const std::vector<std::size_t>& p) {
    const auto n = kc.rows();
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto pj = static_cast<Eigen::Index>(p[static_cast<std::size_t>(j)]);
        for (Eigen::Index i = 0; i < n; ++i) s += kc(i, j) * l(static_cast<Eigen::Index>(p[static_cast<std::size_t>(i)]), pj);
    }
    return s / static_cast<double>(n * n);
}

}  // namespace detail

// Biased HSIC with Gaussian kernels, trace(K H L H) / N^2, and a permutation p-value
// (1 + #{perm stat >= observed}) / (1 + num_perms). Permutation r uses stream r of the seed, so
// the result does not depend on the thread count.
inline HsicResult hsic(std::span<const double> a, std::span<const double> b, const HsicConfig& cfg = {}) {
    cfg.validate();
    if (a.size() != b.size()) throw ShapeError("hsic: inputs must have equal length");
    if (a.size() < 50) throw ConfigError("hsic: need at least 50 points");

    std::vector<double> av(a.begin(), a.end()), bv(b.begin(), b.end());
    if (av.size() > cfg.max_points) {
        auto idx = random_permutation(av.size(), cfg.seed, 0xC0FFEE);
        idx.resize(cfg.max_points);
        std::sort(idx.begin(), idx.end());
        std::vector<double> as, bs;
        for (auto i : idx) {
            as.push_back(av[i]);
            bs.push_back(bv[i]);
        }
        av = std::move(as);
        bv = std::move(bs);
    }

    HsicResult r;
    r.points_used = av.size();
    r.num_perms = cfg.num_perms;
    r.bandwidth_a = detail::median_bandwidth(av);
    r.bandwidth_b = detail::median_bandwidth(bv);
    const Eigen::MatrixXd kc = detail::double_center(detail::gaussian_gram(av, r.bandwidth_a));
    const Eigen::MatrixXd l = detail::gaussian_gram(bv, r.bandwidth_b);
    const auto n = av.size();
    std::vector<std::size_t> ident(n);
    std::iota(ident.begin(), ident.end(), 0);
    r.statistic = std::max(0.0, detail::permuted_stat(kc, l, ident));

    std::vector<double> perm_stats(cfg.num_perms);
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t p = begin; p < cfg.num_perms; p += step)
            perm_stats[p] = detail::permuted_stat(kc, l, random_permutation(n, cfg.seed, p + 1));
    };
    const std::size_t nt = std::min(cfg.threads, cfg.num_perms);
    if (nt <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(work, t, nt);
        for (auto& t : pool) t.join();
    }
    // tolerance so that exact ties (e.g. the identity permutation) count as "at least as large"
    const double tol = 1e-12 * (1.0 + std::abs(r.statistic));
    std::size_t count = 0;
    for (double s : perm_stats)
        if (s >= r.statistic - tol) ++count;
    r.p_value = static_cast<double>(1 + count) / static_cast<double>(1 + cfg.num_perms);
    r.reject = r.p_value < cfg.alpha;
    return r;
}

// ---- direction decision -------------------------------------------------------------------

enum class Verdict { x1_causes_x2, x2_causes_x1, none };

NLOHMANN_JSON_SERIALIZE_ENUM(Verdict, {{Verdict::x1_causes_x2, "x1_causes_x2"},
                                       {Verdict::x2_causes_x1, "x2_causes_x1"},
                                       {Verdict::none, "none"}})

struct CausalDecision {
    Verdict verdict = Verdict::none;
    // order: (x1, n1), (x1, n2), (x2, n1), (x2, n2)
    std::array<double, 4> p_values{};
    double alpha = 0.05;
    std::vector<std::size_t> disturbance_of_x;  // n_hat column matched to each x column
    HsicConfig hsic;
};

inline nlohmann::json to_json(const CausalDecision& d) {
    return {{"verdict", d.verdict},
            {"p_values",
             {{"x1_n1", d.p_values[0]}, {"x1_n2", d.p_values[1]}, {"x2_n1", d.p_values[2]}, {"x2_n2", d.p_values[3]}}},
            {"alpha", d.alpha},
            {"disturbance_of_x", d.disturbance_of_x},
            {"hsic", d.hsic}};
}

// Exactly one non-rejection decides; x1 independent of n2 means x1 -> x2.
inline Verdict decide_from_pvalues(const std::array<double, 4>& p, double alpha) {
    int accepted = -1, count = 0;
    for (int i = 0; i < 4; ++i)
        if (!(p[static_cast<std::size_t>(i)] < alpha)) {
            accepted = i;
            ++count;
        }
    if (count != 1) return Verdict::none;
    if (accepted == 1) return Verdict::x1_causes_x2;
    if (accepted == 2) return Verdict::x2_causes_x1;
    return Verdict::none;
}

inline CausalDecision decide_direction(const Matrix& x, const Matrix& n_hat, const HsicConfig& cfg = {}) {
    if (x.cols() != 2 || n_hat.cols() != 2 || x.rows() != n_hat.rows())
        throw ShapeError("decide_direction: expected two N x 2 matrices");
    CausalDecision d;
    d.alpha = cfg.alpha;
    d.hsic = cfg;
    d.disturbance_of_x = assign(correlation_matrix(x, n_hat)).col_of_row;

    auto col = [](const Matrix& m, Eigen::Index c) {
        std::vector<double> v(static_cast<std::size_t>(m.rows()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, c);
        return v;
    };
    std::size_t t = 0;
    for (Eigen::Index xi = 0; xi < 2; ++xi)
        for (Eigen::Index ni = 0; ni < 2; ++ni) {
            HsicConfig c = cfg;
            c.seed = derive_seed(cfg.seed, t);
            const auto a = col(x, xi);
            const auto b = col(n_hat, static_cast<Eigen::Index>(d.disturbance_of_x[static_cast<std::size_t>(ni)]));
            d.p_values[t++] = hsic(a, b, c).p_value;
        }
    d.verdict = decide_from_pvalues(d.p_values, cfg.alpha);
    return d;
}

// Trains an iVAE on the observations and returns posterior means as disturbance estimates.
struct Disturbances {
    Model model;
    Matrix n_hat;
    std::vector<double> trace;
};

inline Disturbances recover_disturbances(const Dataset& ds, ModelConfig mc, const TrainConfig& tc) {
    if (ds.config.variant != DataVariant::causal_sem)
        throw ConfigError("recover_disturbances: dataset must use the causal_sem variant");
    mc.latent_dim = 2;
    mc.variant.kind = Variant::ivae;
    Model m = make_model(mc, ds.x.cols(), ds.u.cols());
    auto res = train(m, ds.x, ds.u, tc);
    Matrix n_hat = to_matrix(posterior_stats(m, ds.x, ds.u).mean);
    return {std::move(m), std::move(n_hat), std::move(res.elbo_trace)};
}

}  // namespace ivae
