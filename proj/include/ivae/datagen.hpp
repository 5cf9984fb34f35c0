#pragma once

// Synthetic nonstationary-source benchmarks: segment-wise exponential-family sources pushed
// through a random injective MLP, plus the two identifiability audits (the L-matrix rank
// condition and the location-family rotation witness).

#include <Eigen/Dense>

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ivae/errors.hpp"
#include "ivae/nets.hpp"
#include "ivae/priors.hpp"
#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"

namespace ivae {

enum class DataVariant { normal, easy_classify, causal_sem };

NLOHMANN_JSON_SERIALIZE_ENUM(DataVariant, {{DataVariant::normal, "normal"},
                                           {DataVariant::easy_classify, "easy_classify"},
                                           {DataVariant::causal_sem, "causal_sem"}})

enum class MixingActivation { leaky_relu, smooth_leaky };

NLOHMANN_JSON_SERIALIZE_ENUM(MixingActivation, {{MixingActivation::leaky_relu, "leaky_relu"},
                                                {MixingActivation::smooth_leaky, "smooth_leaky"}})

enum class Observation { gaussian, bernoulli };

NLOHMANN_JSON_SERIALIZE_ENUM(Observation, {{Observation::gaussian, "gaussian"}, {Observation::bernoulli, "bernoulli"}})

struct GenConfig {
    std::size_t M = 40;  // segments
    std::size_t L = 1000;  // samples per segment
    std::size_t n = 5;
    std::size_t d = 5;
    Family family = Family::gaussian_var;
    double var_lo = 0.5;
    double var_hi = 3.0;
    double mean_lo = -3.0;  // k = 2 and location families only
    double mean_hi = 3.0;
    std::size_t mixing_layers = 4;
    double mixing_slope = 0.2;
    MixingActivation mixing_activation = MixingActivation::leaky_relu;
    double max_condition = 25.0;
    double noise_var = 0.01;
    Observation observation = Observation::gaussian;
    double logit_scale = 1.0;  // bernoulli: x ~ Bernoulli(sigmoid(logit_scale * f(z)))
    DataVariant variant = DataVariant::normal;
    double easy_alpha = 2.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (M < 2) throw ConfigError("GenConfig: M must be >= 2");
        if (L < 1) throw ConfigError("GenConfig: L must be >= 1");
        if (n < 1 || d < n) throw ConfigError("GenConfig: need 1 <= n <= d");
        if (mixing_layers < 1) throw ConfigError("GenConfig: mixing_layers must be >= 1");
        if (noise_var < 0.0) throw ConfigError("GenConfig: noise_var must be >= 0");
        if (!(var_lo > 0.0 && var_hi >= var_lo)) throw ConfigError("GenConfig: variance range must be positive");
        if (variant == DataVariant::easy_classify && (n != 2 || d != 2 || family != Family::gaussian_mean_var))
            throw ConfigError("GenConfig: easy_classify needs n = d = 2 and the gaussian_mean_var family");
        if (variant == DataVariant::causal_sem && (n != 2 || d != 2))
            throw ConfigError("GenConfig: causal_sem needs n = d = 2");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenConfig, M, L, n, d, family, var_lo, var_hi, mean_lo, mean_hi,
                                                mixing_layers, mixing_slope, mixing_activation, max_condition,
                                                noise_var, observation, logit_scale, variant, easy_alpha, seed)

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline RowMatrix to_matrix(const Tensor& t) {
    return Eigen::Map<const RowMatrix>(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                                       static_cast<Eigen::Index>(t.cols()));
}

inline Tensor to_tensor(const RowMatrix& m) {
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  std::vector<double>(m.data(), m.data() + m.size()));
}

// Random mixing MLP. Layer l maps h to act(h W_l + b_l); the last layer has no activation.
struct Mixing {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
    double slope = 0.2;
    MixingActivation activation = MixingActivation::leaky_relu;

    Tensor apply(const Tensor& z) const {
        Tensor h = z;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            h = add(matmul(h, weights[l]), biases[l]);
            if (l + 1 == weights.size()) break;
            if (activation == MixingActivation::leaky_relu) h = leaky_relu(h, slope);
            else h = add(mul(h, Tensor::scalar(slope)), mul(softplus(h), Tensor::scalar(1.0 - slope)));
        }
        return h;
    }
};

inline nlohmann::json mixing_json(const Mixing& m) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        std::vector<double> w(m.weights[l].values().begin(), m.weights[l].values().end());
        std::vector<double> b(m.biases[l].values().begin(), m.biases[l].values().end());
        layers.push_back({{"shape", m.weights[l].shape()}, {"W", w}, {"b", b}});
    }
    return {{"slope", m.slope}, {"activation", m.activation}, {"layers", layers}};
}

inline Mixing mixing_from_json(const nlohmann::json& j) {
    Mixing m;
    m.slope = j.at("slope").get<double>();
    m.activation = j.at("activation").get<MixingActivation>();
    for (const auto& layer : j.at("layers")) {
        Shape s = layer.at("shape").get<Shape>();
        m.weights.emplace_back(s, layer.at("W").get<std::vector<double>>());
        m.biases.emplace_back(Shape{s[1]}, layer.at("b").get<std::vector<double>>());
    }
    return m;
}

inline double condition_number(const RowMatrix& w) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    const auto& s = svd.singularValues();
    const double lo = s(s.size() - 1);
    return lo > 0 ? s(0) / lo : std::numeric_limits<double>::infinity();
}

// Layers n -> d then d -> d. Weights have columns of norm sqrt(2 / (1 + slope^2)) and
// are resampled until their condition number is below the gate, which together with a
// bijective activation makes the composite injective.
inline Mixing make_mixing(const GenConfig& cfg, std::uint64_t seed, bool lower_triangular = false) {
    Mixing mix;
    mix.slope = cfg.mixing_slope;
    mix.activation = cfg.mixing_activation;
    // variance-preserving column norm for a leaky unit
    const double gain = std::sqrt(2.0 / (1.0 + cfg.mixing_slope * cfg.mixing_slope));
    for (std::size_t l = 0; l < cfg.mixing_layers; ++l) {
        const std::size_t in = l == 0 ? cfg.n : cfg.d, out = cfg.d;
        RowMatrix w(in, out);
        bool ok = false;
        for (std::size_t attempt = 0; attempt < 100 && !ok; ++attempt) {
            CounterRng rng(derive_seed(seed, l), attempt);
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal();
            if (lower_triangular)  // output j reads inputs i <= j only
                for (Eigen::Index i = 0; i < w.rows(); ++i)
                    for (Eigen::Index j = 0; j < i && j < w.cols(); ++j) w(i, j) = 0.0;
            for (Eigen::Index j = 0; j < w.cols(); ++j) w.col(j) *= gain / w.col(j).norm();
            ok = condition_number(w) < cfg.max_condition;
        }
        if (!ok)
            throw NumericError("make_mixing: layer " + std::to_string(l) + " failed the condition gate after 100 resamples");
        mix.weights.push_back(to_tensor(w));
        mix.biases.push_back(Tensor::zeros({out}));
    }
    return mix;
}

struct Dataset {
    GenConfig config;
    Tensor x;       // N x d
    Tensor u;       // N x M one-hot
    Tensor z_star;  // N x n
    std::vector<std::size_t> segment;
    std::vector<std::vector<double>> lambda_star;  // M rows of n*k naturals
    Mixing mixing;

    std::size_t size() const { return x.rows(); }
};

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t M) {
    std::vector<double> v(labels.size() * M, 0.0);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] >= M) throw ShapeError("one_hot: label out of range");
        v[r * M + labels[r]] = 1.0;
    }
    return Tensor({labels.size(), M}, std::move(v));
}

// Index of the staircase permutation used by the easy_classify variant (identity over segments).
inline double staircase(std::size_t segment) { return static_cast<double>(segment); }

inline Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    NoGradGuard no_grad;
    Dataset ds;
    ds.config = cfg;
    const ExpFamilySpec spec{cfg.family, cfg.n};
    const std::size_t N = cfg.M * cfg.L;
    CounterRng prm(cfg.seed, 7);
    std::vector<double> z(N * cfg.n);
    for (std::size_t m = 0; m < cfg.M; ++m) {
        std::vector<double> mean(cfg.n, 0.0), var(cfg.n);
        for (std::size_t i = 0; i < cfg.n; ++i) {
            var[i] = prm.uniform(cfg.var_lo, cfg.var_hi);
            if (cfg.family == Family::gaussian_mean_var || cfg.family == Family::gaussian_location)
                mean[i] = prm.uniform(cfg.mean_lo, cfg.mean_hi);
        }
        if (cfg.variant == DataVariant::easy_classify) {
            mean[0] = 0.0;
            mean[1] = cfg.easy_alpha * staircase(m);
        }
        ds.lambda_star.push_back(moment_to_natural(spec, mean, var));
        Tensor draws = sample_prior(spec, ds.lambda_star.back(), cfg.L, derive_seed(cfg.seed, 100 + m));
        std::copy(draws.values().begin(), draws.values().end(), z.begin() + static_cast<std::ptrdiff_t>(m * cfg.L * cfg.n));
        for (std::size_t r = 0; r < cfg.L; ++r) ds.segment.push_back(m);
    }
    ds.z_star = Tensor({N, cfg.n}, std::move(z));
    ds.u = one_hot(ds.segment, cfg.M);
    ds.mixing = make_mixing(cfg, derive_seed(cfg.seed, 11), cfg.variant == DataVariant::causal_sem);
    Tensor clean = ds.mixing.apply(ds.z_star);
    std::vector<double> x(clean.values().begin(), clean.values().end());
    if (cfg.variant == DataVariant::easy_classify)  // x2 carries the mean-modulated source directly
        for (std::size_t r = 0; r < N; ++r) x[r * 2 + 1] = ds.z_star.at(r, 1);
    CounterRng noise(cfg.seed, 13);
    if (cfg.observation == Observation::bernoulli) {
        for (auto& v : x) v = noise.uniform() < detail::sigmoid_value(cfg.logit_scale * v) ? 1.0 : 0.0;
    } else if (cfg.noise_var > 0.0) {
        const double sd = std::sqrt(cfg.noise_var);
        for (auto& v : x) v += sd * noise.normal();
    }
    ds.x = Tensor({N, cfg.d}, std::move(x));
    return ds;
}

// ---- dataset files -------------------------------------------------------------------------
//
// <stem>.json: metadata (config, lambda_star, mixing, seed, checksum, layout).
// <stem>.bin:  x (N*d float64-le, row-major), segment (N int64-le), z_star (N*n float64-le).

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

inline std::string dataset_blob(const Dataset& ds) {
    std::ostringstream os(std::ios::binary);
    write_f64_le(os, ds.x.values());
    for (std::size_t s : ds.segment) {
        const auto v = static_cast<std::uint64_t>(s);
        for (int k = 0; k < 8; ++k) os.put(static_cast<char>(v >> (8 * k)));
    }
    write_f64_le(os, ds.z_star.values());
    return os.str();
}

inline std::string dataset_checksum(const Dataset& ds) { return hex64(fnv1a64(dataset_blob(ds))); }

inline std::string save_dataset(const std::filesystem::path& stem, const Dataset& ds) {
    const std::string blob = dataset_blob(ds);
    const std::string sum = hex64(fnv1a64(blob));
    {
        std::ofstream bin(stem.string() + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("save_dataset: cannot open " + stem.string() + ".bin");
        bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    nlohmann::json meta = {{"format", "ivae-dataset"},
                           {"version", 1},
                           {"config", ds.config},
                           {"N", ds.size()},
                           {"lambda_star", ds.lambda_star},
                           {"mixing", mixing_json(ds.mixing)},
                           {"seed", ds.config.seed},
                           {"checksum", {{"algorithm", "fnv1a64"}, {"value", sum}}},
                           {"layout", {"x: N*d float64-le row-major", "segment: N int64-le",
                                       "z_star: N*n float64-le row-major"}},
                           {"notes", {"segment means for k=2 drawn uniform on [mean_lo, mean_hi]"}},
                           {"blob", stem.filename().string() + ".bin"}};
    std::ofstream js(stem.string() + ".json");
    if (!js) throw std::runtime_error("save_dataset: cannot open " + stem.string() + ".json");
    js << meta.dump(2) << '\n';
    return sum;
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw ConfigError("load_dataset: cannot open " + stem.string() + ".json");
    const auto meta = nlohmann::json::parse(js);
    if (meta.value("format", "") != "ivae-dataset") throw ConfigError("load_dataset: not an ivae dataset");
    Dataset ds;
    ds.config = meta.at("config").get<GenConfig>();
    const std::size_t N = meta.at("N").get<std::size_t>();
    const std::size_t d = ds.config.d, n = ds.config.n;
    std::ifstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw ConfigError("load_dataset: cannot open " + stem.string() + ".bin");
    ds.x = Tensor({N, d}, read_f64_le(bin, N * d));
    for (std::size_t r = 0; r < N; ++r) {
        unsigned char b[8];
        if (!bin.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("load_dataset: truncated blob");
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
        ds.segment.push_back(static_cast<std::size_t>(v));
    }
    ds.z_star = Tensor({N, n}, read_f64_le(bin, N * n));
    ds.u = one_hot(ds.segment, ds.config.M);
    ds.lambda_star = meta.at("lambda_star").get<std::vector<std::vector<double>>>();
    ds.mixing = mixing_from_json(meta.at("mixing"));
    if (dataset_checksum(ds) != meta.at("checksum").at("value").get<std::string>())
        throw std::runtime_error("load_dataset: checksum mismatch");
    return ds;
}

// CSV with header: segment, z1..zn, x1..xd.
inline void export_csv(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("export_csv: cannot open " + path.string());
    os << "segment";
    for (std::size_t i = 0; i < ds.config.n; ++i) os << ",z" << i + 1;
    for (std::size_t i = 0; i < ds.config.d; ++i) os << ",x" << i + 1;
    os << '\n';
    os.precision(17);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        os << ds.segment[r];
        for (std::size_t i = 0; i < ds.config.n; ++i) os << ',' << ds.z_star.at(r, i);
        for (std::size_t i = 0; i < ds.config.d; ++i) os << ',' << ds.x.at(r, i);
        os << '\n';
    }
}

// ---- assumption (iv): the L matrix ----------------------------------------------------------

struct LMatrixCheck {
    std::size_t pivot = 0;
    std::vector<std::size_t> chosen;
    Eigen::MatrixXd L;  // nk x nk, column l = lambda(u_l) - lambda(u_0)
    double smallest_singular = 0.0;
    double largest_singular = 0.0;
    bool invertible = false;
};

namespace detail {

inline Eigen::VectorXd singular_values(const Eigen::MatrixXd& m) {
    if (m.cols() == 0) return Eigen::VectorXd();
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
}

inline double min_singular(const Eigen::MatrixXd& m) {
    const auto s = singular_values(m);
    return s.size() ? s(s.size() - 1) : 0.0;
}

}  // namespace detail

// Greedily builds the nk x nk matrix of natural-parameter differences that maximizes its
// smallest singular value. `lambdas` holds one natural-parameter row per candidate point u.
// If `pivot` is given it is used as u_0, otherwise every candidate is tried.
inline LMatrixCheck check_assumption_iv(const std::vector<std::vector<double>>& lambdas, std::size_t n, std::size_t k,
                                        std::optional<std::size_t> pivot = std::nullopt) {
    const std::size_t nk = n * k;
    if (lambdas.size() < nk + 1)
        throw ConfigError("check_assumption_iv: need at least " + std::to_string(nk + 1) + " distinct points, got " +
                          std::to_string(lambdas.size()));
    for (const auto& l : lambdas)
        if (l.size() != nk) throw ShapeError("check_assumption_iv: natural parameter rows must have n*k entries");
    auto column = [&](std::size_t c, std::size_t p) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(nk));
        for (std::size_t i = 0; i < nk; ++i) v(static_cast<Eigen::Index>(i)) = lambdas[c][i] - lambdas[p][i];
        return v;
    };
    LMatrixCheck best;
    bool have = false;
    const std::size_t p_begin = pivot ? *pivot : 0, p_end = pivot ? *pivot + 1 : lambdas.size();
    if (p_end > lambdas.size()) throw ConfigError("check_assumption_iv: pivot index out of range");
    for (std::size_t p = p_begin; p < p_end; ++p) {
        std::vector<std::size_t> chosen;
        Eigen::MatrixXd L(static_cast<Eigen::Index>(nk), 0);
        for (std::size_t step = 0; step < nk; ++step) {
            double best_score = -1.0;
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < lambdas.size(); ++c) {
                if (c == p || std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
                Eigen::MatrixXd trial(L.rows(), L.cols() + 1);
                trial << L, column(c, p);
                const double score = detail::min_singular(trial);
                if (score > best_score) {
                    best_score = score;
                    best_c = c;
                }
            }
            chosen.push_back(best_c);
            Eigen::MatrixXd next(L.rows(), L.cols() + 1);
            next << L, column(best_c, p);
            L = std::move(next);
        }
        const auto s = detail::singular_values(L);
        const double lo = s(s.size() - 1);
        if (!have || lo > best.smallest_singular) {
            best.pivot = p;
            best.chosen = chosen;
            best.L = L;
            best.smallest_singular = lo;
            best.largest_singular = s(0);
            have = true;
        }
    }
    best.invertible = best.smallest_singular > 1e-6 * best.largest_singular;
    return best;
}

// ---- location-family rotation witness ----------------------------------------------------------

struct WitnessConfig {
    std::size_t n = 2;  // 1 or 2 (the marginal likelihood is integrated on a tensor grid)
    Family family = Family::gaussian_location;
    std::uint64_t seed = 0;
    std::size_t segments = 5;
    std::size_t test_points = 100;
    double noise_var = 0.25;
    double grid_step = 0.04;
    double grid_halfwidth_sd = 8.0;
    bool identity_rotation = false;
};

struct WitnessResult {
    Eigen::MatrixXd rotation;
    std::vector<std::vector<double>> lambda;          // per segment, original parameters
    std::vector<std::vector<double>> lambda_rotated;  // per segment, R * lambda
    std::vector<double> gaps;                         // |log p(x|u) - log p~(x|u)| per test point
    double max_gap = 0.0;
};

namespace detail {

// log of the integral over z of N(x; f(z), s2 I) p(z|u), tensor-product trapezoid on a grid
// centred at the prior mean. `rot` maps grid points back to the original latent space (f o R^T).
struct GridIntegrator {
    ExpFamilySpec spec;
    const Mixing* mix;
    Eigen::MatrixXd row_map;
    double noise_var, step, halfwidth_sd;

    struct Grid {
        RowMatrix fx;                // f(R^T z) per grid point
        Eigen::VectorXd log_weight;  // log prior + log cell volume
    };

    Grid build(const std::vector<double>& lam) const {
        NoGradGuard no_grad;
        const Moments mo = natural_to_moment(spec, lam);
        const std::size_t n = spec.n;
        double sd = 0.0;
        for (double v : mo.variance) sd = std::max(sd, std::sqrt(v));
        const double half = halfwidth_sd * sd;
        const std::size_t per = static_cast<std::size_t>(std::ceil(2 * half / step)) + 1;
        std::size_t total = 1;
        for (std::size_t i = 0; i < n; ++i) total *= per;
        std::vector<double> z(total * n);
        for (std::size_t g = 0; g < total; ++g) {
            std::size_t rem = g;
            for (std::size_t i = 0; i < n; ++i) {
                z[g * n + i] = mo.mean[i] - half + step * static_cast<double>(rem % per);
                rem /= per;
            }
        }
        Tensor zt({total, n}, std::move(z));
        Tensor lp = log_prior(spec, Tensor({1, spec.width()}, lam), zt);
        RowMatrix zr = to_matrix(zt) * row_map;  // rows are (R^T z)^T
        Grid grid;
        grid.fx = to_matrix(mix->apply(to_tensor(zr)));
        grid.log_weight = Eigen::Map<const Eigen::VectorXd>(lp.values().data(), static_cast<Eigen::Index>(total)).array() +
                          static_cast<double>(n) * std::log(step);
        return grid;
    }

    double log_marginal(const Grid& grid, const Eigen::RowVectorXd& x) const {
        const double d = static_cast<double>(x.size());
        Eigen::VectorXd terms = grid.log_weight.array() -
                                (grid.fx.rowwise() - x).rowwise().squaredNorm().array() / (2.0 * noise_var) -
                                0.5 * d * std::log(2.0 * std::numbers::pi * noise_var);
        const double mx = terms.maxCoeff();
        return mx + std::log((terms.array() - mx).exp().sum());
    }
};

}  // namespace detail

// Builds theta = (f, T, lambda) and theta~ = (f o R^T, T, R lambda) for a random orthogonal R
// and reports the largest difference of log p(x|u) between them over sampled test points.
inline WitnessResult proposition3_witness(const WitnessConfig& cfg) {
    if (cfg.n < 1 || cfg.n > 2) throw ConfigError("proposition3_witness: n must be 1 or 2");
    if (stats_per_component(cfg.family) != 1) throw ConfigError("proposition3_witness: family must have k = 1");
    const ExpFamilySpec spec{cfg.family, cfg.n};
    const std::size_t n = cfg.n;
    WitnessResult res;
    CounterRng rng(cfg.seed, 21);

    // rotation
    Eigen::MatrixXd R = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    if (!cfg.identity_rotation) {
        if (n == 1) {
            R(0, 0) = -1.0;
        } else {
            const double a = rng.uniform(std::numbers::pi / 8, 3 * std::numbers::pi / 8);
            R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        }
    }
    res.rotation = R;

    // per-segment naturals; for sign-constrained families keep only rows whose rotation stays valid
    for (std::size_t m = 0; m < cfg.segments; ++m) {
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt > 10000) throw NumericError("proposition3_witness: no valid rotated parameters found");
            std::vector<double> mean(n), var(n);
            for (std::size_t i = 0; i < n; ++i) {
                mean[i] = rng.uniform(-2.0, 2.0);
                var[i] = rng.uniform(0.5, 3.0);
            }
            auto lam = moment_to_natural(spec, mean, var);
            Eigen::VectorXd lr = R * Eigen::Map<const Eigen::VectorXd>(lam.data(), static_cast<Eigen::Index>(n));
            std::vector<double> lam_r(lr.data(), lr.data() + n);
            try {
                check_naturals(spec, lam_r);
            } catch (const DomainError&) {
                continue;
            }
            res.lambda.push_back(lam);
            res.lambda_rotated.push_back(lam_r);
            break;
        }
    }

    // smooth injective mixing n -> n
    GenConfig mcfg;
    mcfg.n = mcfg.d = n;
    mcfg.mixing_layers = 2;
    mcfg.mixing_slope = 0.2;
    mcfg.mixing_activation = MixingActivation::smooth_leaky;
    const Mixing mix = make_mixing(mcfg, derive_seed(cfg.seed, 22));

    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    detail::GridIntegrator orig{spec, &mix, I, cfg.noise_var, cfg.grid_step, cfg.grid_halfwidth_sd};
    detail::GridIntegrator rot{spec, &mix, R, cfg.noise_var, cfg.grid_step, cfg.grid_halfwidth_sd};
    // rows of a grid matrix are z^T; (R^T z)^T = z^T R
    std::vector<detail::GridIntegrator::Grid> grids_o, grids_r;
    for (std::size_t m = 0; m < cfg.segments; ++m) {
        grids_o.push_back(orig.build(res.lambda[m]));
        grids_r.push_back(rot.build(res.lambda_rotated[m]));
    }

    NoGradGuard no_grad;
    const double sd = std::sqrt(cfg.noise_var);
    for (std::size_t t = 0; t < cfg.test_points; ++t) {
        const std::size_t m = t % cfg.segments;
        Tensor z = sample_prior(spec, res.lambda[m], 1, derive_seed(cfg.seed, 1000 + t));
        RowMatrix fx = to_matrix(mix.apply(z));
        Eigen::RowVectorXd x = fx.row(0);
        CounterRng nz(cfg.seed, 2000 + t);
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += sd * nz.normal();
        const double a = orig.log_marginal(grids_o[m], x);
        const double b = rot.log_marginal(grids_r[m], x);
        res.gaps.push_back(std::abs(a - b));
        res.max_gap = std::max(res.max_gap, res.gaps.back());
    }
    return res;
}

}  // namespace ivae
