#pragma once

// Conditionally factorized exponential-family priors
//
//   p(z | u) = prod_i Q(z_i) / Z_i(u) * exp( sum_j T_j(z_i) * lambda_ij(u) ).
//
// Natural parameters are laid out component-major, statistic-minor: for k = 2 a row is
// (l_11, l_12, l_21, l_22, ...). Supported families:
//
//   gaussian_mean_var  k=2  T(z) = (z, z^2)  Q = 1         l_2 < 0
//   gaussian_var       k=1  T(z) = z^2       Q = 1         l < 0   (zero-mean, variance-modulated)
//   laplace_scale      k=1  T(z) = -|z|      Q = 1         l > 0   (zero-location, scale-modulated)
//   gaussian_location  k=1  T(z) = z         Q = e^{-z^2}  any l   (variance fixed at 1/2)

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "ivae/errors.hpp"
#include "ivae/nets.hpp"
#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"

namespace ivae {

enum class Family { gaussian_mean_var, gaussian_var, laplace_scale, gaussian_location };

NLOHMANN_JSON_SERIALIZE_ENUM(Family, {{Family::gaussian_mean_var, "gaussian_mean_var"},
                                      {Family::gaussian_var, "gaussian_var"},
                                      {Family::laplace_scale, "laplace_scale"},
                                      {Family::gaussian_location, "gaussian_location"}})

inline std::size_t stats_per_component(Family f) { return f == Family::gaussian_mean_var ? 2 : 1; }

struct ExpFamilySpec {
    Family family = Family::gaussian_var;
    std::size_t n = 1;

    std::size_t k() const { return stats_per_component(family); }
    std::size_t width() const { return n * k(); }
};

inline void to_json(nlohmann::json& j, const ExpFamilySpec& s) {
    j = {{"family", s.family}, {"n", s.n}, {"k", s.k()}};
}
inline void from_json(const nlohmann::json& j, ExpFamilySpec& s) {
    j.at("family").get_to(s.family);
    j.at("n").get_to(s.n);
    if (s.n < 1) throw ConfigError("ExpFamilySpec: n must be >= 1");
    if (j.contains("k") && j.at("k").get<std::size_t>() != s.k())
        throw ConfigError("ExpFamilySpec: k does not match family");
}

// Sign constraint on one natural parameter slot: -1 strictly negative, +1 strictly positive, 0 free.
inline int natural_sign(Family f, std::size_t stat) {
    switch (f) {
        case Family::gaussian_mean_var: return stat == 1 ? -1 : 0;
        case Family::gaussian_var: return -1;
        case Family::laplace_scale: return 1;
        case Family::gaussian_location: return 0;
    }
    return 0;
}

inline void check_naturals(const ExpFamilySpec& spec, std::span<const double> lam) {
    const std::size_t k = spec.k();
    for (std::size_t idx = 0; idx < lam.size(); ++idx) {
        const int s = natural_sign(spec.family, idx % k);
        if ((s < 0 && !(lam[idx] < 0.0)) || (s > 0 && !(lam[idx] > 0.0)) || !std::isfinite(lam[idx]))
            throw DomainError("natural parameter " + std::to_string(lam[idx]) + " at slot " + std::to_string(idx) +
                              " lies outside the family's domain");
    }
}

namespace detail {

// nk x n matrix selecting statistic `stat` of every component.
inline Tensor stat_selector(const ExpFamilySpec& spec, std::size_t stat) {
    const std::size_t k = spec.k(), n = spec.n;
    std::vector<double> sel(n * k * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) sel[(i * k + stat) * n + i] = 1.0;
    return Tensor({n * k, n}, std::move(sel));
}

inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

}  // namespace detail

// Concatenated sufficient statistics, batch x (n*k).
inline Tensor sufficient_stats(const ExpFamilySpec& spec, const Tensor& z) {
    if (z.rank() != 2 || z.cols() != spec.n)
        throw ShapeError("sufficient_stats: expected batch x " + std::to_string(spec.n) + ", got " + shape_str(z.shape()));
    switch (spec.family) {
        case Family::gaussian_var: return square(z);
        case Family::laplace_scale: return neg(abs(z));
        case Family::gaussian_location: return z;
        case Family::gaussian_mean_var: {
            // interleave (z_i, z_i^2) via the transposed selectors
            return add(matmul(z, transpose(detail::stat_selector(spec, 0))),
                       matmul(square(z), transpose(detail::stat_selector(spec, 1))));
        }
    }
    throw std::logic_error("unreachable");
}

// Exact normalized log-density per row, batch x 1. Differentiable in both lam and z.
inline Tensor log_prior(const ExpFamilySpec& spec, const Tensor& lam, const Tensor& z) {
    if (lam.rank() != 2 || lam.cols() != spec.width() || z.rank() != 2 || z.cols() != spec.n ||
        (lam.rows() != z.rows() && lam.rows() != 1))
        throw ShapeError("log_prior: natural parameters " + shape_str(lam.shape()) + " and latents " +
                         shape_str(z.shape()) + " do not match the family");
    check_naturals(spec, lam.values());
    const double n = static_cast<double>(spec.n);
    const double log_pi = std::log(std::numbers::pi);
    switch (spec.family) {
        case Family::gaussian_var:
            // l z^2 + 0.5 log(-l) - 0.5 log(pi)
            return sum(add(mul(lam, square(z)), mul(log(neg(lam)), Tensor::scalar(0.5))), 1) - 0.5 * n * log_pi;
        case Family::gaussian_mean_var: {
            Tensor l1 = matmul(lam, detail::stat_selector(spec, 0));
            Tensor l2 = matmul(lam, detail::stat_selector(spec, 1));
            Tensor per = mul(l1, z) + mul(l2, square(z)) + div(square(l1), 4.0 * l2) + 0.5 * log(neg(l2));
            return sum(per, 1) - 0.5 * n * log_pi;
        }
        case Family::laplace_scale:
            // -l|z| + log l - log 2
            return sum(sub(log(lam), mul(lam, abs(z))), 1) - n * std::numbers::ln2;
        case Family::gaussian_location:
            // -z^2 + l z - 0.5 log(pi) - l^2/4
            return sum(sub(mul(lam, z), square(z)) - 0.25 * square(lam), 1) - 0.5 * n * log_pi;
    }
    throw std::logic_error("unreachable");
}

// E[T(z)] = gradient of log Z with respect to the naturals, closed form, same layout as lam.
inline std::vector<double> expected_stats(const ExpFamilySpec& spec, std::span<const double> lam) {
    check_naturals(spec, lam);
    std::vector<double> out(lam.size());
    for (std::size_t i = 0; i < spec.n; ++i) {
        switch (spec.family) {
            case Family::gaussian_var: out[i] = -0.5 / lam[i]; break;
            case Family::laplace_scale: out[i] = -1.0 / lam[i]; break;
            case Family::gaussian_location: out[i] = 0.5 * lam[i]; break;
            case Family::gaussian_mean_var: {
                const double var = -0.5 / lam[2 * i + 1];
                const double mu = lam[2 * i] * var;
                out[2 * i] = mu;
                out[2 * i + 1] = mu * mu + var;
                break;
            }
        }
    }
    return out;
}

struct Moments {
    std::vector<double> mean;
    std::vector<double> variance;
};

// Per-component (mean, variance) to naturals. Laplace ignores the mean (location is fixed at 0)
// and uses the scale b = sqrt(var/2), lambda = 1/b. The location family has its variance fixed
// at 1/2 and ignores the variance argument.
inline std::vector<double> moment_to_natural(const ExpFamilySpec& spec, std::span<const double> mean,
                                             std::span<const double> variance) {
    if (mean.size() != spec.n || variance.size() != spec.n)
        throw ShapeError("moment_to_natural: expected " + std::to_string(spec.n) + " means and variances");
    std::vector<double> lam;
    for (std::size_t i = 0; i < spec.n; ++i) {
        if (!(variance[i] > 0.0)) throw DomainError("moment_to_natural: variance must be positive");
        switch (spec.family) {
            case Family::gaussian_mean_var:
                lam.push_back(mean[i] / variance[i]);
                lam.push_back(-0.5 / variance[i]);
                break;
            case Family::gaussian_var: lam.push_back(-0.5 / variance[i]); break;
            case Family::laplace_scale: lam.push_back(1.0 / std::sqrt(variance[i] / 2.0)); break;
            case Family::gaussian_location: lam.push_back(2.0 * mean[i]); break;
        }
    }
    return lam;
}

inline Moments natural_to_moment(const ExpFamilySpec& spec, std::span<const double> lam) {
    check_naturals(spec, lam);
    Moments m;
    for (std::size_t i = 0; i < spec.n; ++i) {
        switch (spec.family) {
            case Family::gaussian_mean_var: {
                const double var = -0.5 / lam[2 * i + 1];
                m.mean.push_back(lam[2 * i] * var);
                m.variance.push_back(var);
                break;
            }
            case Family::gaussian_var:
                m.mean.push_back(0.0);
                m.variance.push_back(-0.5 / lam[i]);
                break;
            case Family::laplace_scale: {
                const double b = 1.0 / lam[i];
                m.mean.push_back(0.0);
                m.variance.push_back(2.0 * b * b);
                break;
            }
            case Family::gaussian_location:
                m.mean.push_back(0.5 * lam[i]);
                m.variance.push_back(0.5);
                break;
        }
    }
    return m;
}

// `count` i.i.d. draws (count x n) from the prior with natural parameters `lam` (one row).
inline Tensor sample_prior(const ExpFamilySpec& spec, std::span<const double> lam, std::size_t count,
                           std::uint64_t seed) {
    if (lam.size() != spec.width()) throw ShapeError("sample_prior: natural parameter row has wrong width");
    const Moments mo = natural_to_moment(spec, lam);
    std::vector<double> out(count * spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        CounterRng rng(seed, i);
        if (spec.family == Family::laplace_scale) {
            const double b = 1.0 / lam[i];
            for (std::size_t r = 0; r < count; ++r) out[r * spec.n + i] = b * rng.laplace();
        } else {
            const double sd = std::sqrt(mo.variance[i]);
            for (std::size_t r = 0; r < count; ++r) out[r * spec.n + i] = mo.mean[i] + sd * rng.normal();
        }
    }
    return Tensor({count, spec.n}, std::move(out));
}

// ---- lambda(u) --------------------------------------------------------------------------

enum class LambdaKind { lookup_table, mlp };

NLOHMANN_JSON_SERIALIZE_ENUM(LambdaKind, {{LambdaKind::lookup_table, "lookup_table"}, {LambdaKind::mlp, "mlp"}})

// Maps one-hot auxiliary rows to natural parameters. The unconstrained output `raw` is pushed
// into the family's domain slot by slot: -softplus for negative slots, softplus for positive
// ones, identity otherwise.
struct LambdaMap {
    LambdaKind kind = LambdaKind::lookup_table;
    ExpFamilySpec spec;
    std::size_t aux_dim = 1;
    Tensor table;  // aux_dim x nk raw values (lookup_table)
    Mlp net;       // aux_dim -> nk raw values (mlp)

    void append_params(ParamList& out, const std::string& prefix) const {
        if (kind == LambdaKind::lookup_table) out.push_back({prefix + ".table", table});
        else net.append_params(out, prefix);
    }
};

inline Tensor constrain_naturals(const ExpFamilySpec& spec, const Tensor& raw) {
    const std::size_t w = spec.width(), k = spec.k();
    std::vector<double> neg_mask(w, 0.0), pos_mask(w, 0.0), id_mask(w, 0.0);
    bool any_neg = false, any_pos = false, any_id = false;
    for (std::size_t c = 0; c < w; ++c) {
        const int s = natural_sign(spec.family, c % k);
        (s < 0 ? neg_mask : s > 0 ? pos_mask : id_mask)[c] = 1.0;
        (s < 0 ? any_neg : s > 0 ? any_pos : any_id) = true;
    }
    if (!any_neg && !any_pos) return raw;
    Tensor sp = softplus(raw);
    Tensor out = Tensor::scalar(0.0);
    if (any_neg) out = out - mul(sp, Tensor::vector(neg_mask));
    if (any_pos) out = out + mul(sp, Tensor::vector(pos_mask));
    if (any_id) out = out + mul(raw, Tensor::vector(id_mask));
    return out;
}

inline std::vector<double> unconstrain_naturals(const ExpFamilySpec& spec, std::span<const double> lam) {
    check_naturals(spec, lam);
    std::vector<double> raw(lam.size());
    for (std::size_t c = 0; c < lam.size(); ++c) {
        const int s = natural_sign(spec.family, c % spec.k());
        raw[c] = s < 0 ? detail::inverse_softplus(-lam[c]) : s > 0 ? detail::inverse_softplus(lam[c]) : lam[c];
    }
    return raw;
}

// Lookup table initialised from true naturals (aux_dim rows).
inline LambdaMap lambda_table_from_naturals(const ExpFamilySpec& spec, const std::vector<std::vector<double>>& rows) {
    LambdaMap m;
    m.kind = LambdaKind::lookup_table;
    m.spec = spec;
    m.aux_dim = rows.size();
    std::vector<double> raw;
    for (const auto& r : rows) {
        if (r.size() != spec.width()) throw ShapeError("lambda table: row width mismatch");
        const auto u = unconstrain_naturals(spec, r);
        raw.insert(raw.end(), u.begin(), u.end());
    }
    m.table = Tensor({rows.size(), spec.width()}, std::move(raw));
    return m;
}

// Trainable lambda(u) initialised near the unit-variance prior (zero mean, variance 1, Laplace b = 1/sqrt(2)).
inline LambdaMap init_lambda(LambdaKind kind, const ExpFamilySpec& spec, std::size_t aux_dim, std::uint64_t seed,
                             const MlpSpec& net_spec = {}) {
    LambdaMap m;
    m.kind = kind;
    m.spec = spec;
    m.aux_dim = aux_dim;
    std::vector<double> zeros(spec.n, 0.0), ones(spec.n, 1.0);
    const auto base = unconstrain_naturals(spec, moment_to_natural(spec, zeros, ones));
    if (kind == LambdaKind::lookup_table) {
        CounterRng rng(seed, 0);
        std::vector<double> raw;
        for (std::size_t r = 0; r < aux_dim; ++r)
            for (double b : base) raw.push_back(b + rng.uniform(-0.1, 0.1));
        m.table = Tensor({aux_dim, spec.width()}, std::move(raw)).set_requires_grad();
    } else {
        MlpSpec s = net_spec;
        s.input_dim = aux_dim;
        s.output_dim = spec.width();
        s.output_activation = OutputActivation::identity;
        m.net = init_mlp(s, seed);
        // start from the unit-variance prior
        auto b = m.net.biases.back().mutable_values();
        for (std::size_t c = 0; c < b.size(); ++c) b[c] = base[c];
    }
    return m;
}

inline void check_one_hot(const Tensor& u) {
    if (u.rank() != 2) throw ShapeError("auxiliary variable must be batch x M, got " + shape_str(u.shape()));
    const std::size_t M = u.cols();
    const auto v = u.values();
    for (std::size_t r = 0; r < u.rows(); ++r) {
        int ones = 0;
        for (std::size_t c = 0; c < M; ++c) {
            const double x = v[r * M + c];
            if (x == 1.0) ++ones;
            else if (x != 0.0) ones = 2;
        }
        if (ones != 1) throw DomainError("auxiliary row " + std::to_string(r) + " is not one-hot");
    }
}

inline Tensor eval_lambda(const LambdaMap& map, const Tensor& u) {
    check_one_hot(u);
    if (u.cols() != map.aux_dim)
        throw ShapeError("eval_lambda: expected " + std::to_string(map.aux_dim) + " auxiliary columns, got " +
                         std::to_string(u.cols()));
    Tensor raw = map.kind == LambdaKind::lookup_table ? matmul(u, map.table) : mlp_forward(map.net, u);
    return constrain_naturals(map.spec, raw);
}

}  // namespace ivae
