#pragma once

// Multi-layer perceptrons, Adam, learning-rate schedules and parameter checkpoints.

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ivae/errors.hpp"
#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"

namespace ivae {

enum class OutputActivation { identity, softplus, sigmoid };

NLOHMANN_JSON_SERIALIZE_ENUM(OutputActivation, {{OutputActivation::identity, "identity"},
                                                {OutputActivation::softplus, "softplus"},
                                                {OutputActivation::sigmoid, "sigmoid"}})

struct MlpSpec {
    std::size_t input_dim = 1;
    std::size_t output_dim = 1;
    std::size_t hidden_dim = 50;
    std::size_t num_layers = 3;  // number of affine maps
    double slope = 0.01;         // leaky_relu slope between affine maps
    OutputActivation output_activation = OutputActivation::identity;

    void validate() const {
        if (input_dim < 1 || output_dim < 1 || hidden_dim < 1 || num_layers < 1)
            throw ConfigError("MlpSpec: all dimensions and num_layers must be >= 1");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MlpSpec, input_dim, output_dim, hidden_dim, num_layers, slope,
                                                output_activation)

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

struct Mlp {
    MlpSpec spec;
    std::vector<Tensor> weights;  // layer l: in_l x out_l, applied as x W + b
    std::vector<Tensor> biases;   // layer l: out_l

    std::size_t layer_in(std::size_t l) const { return l == 0 ? spec.input_dim : spec.hidden_dim; }
    std::size_t layer_out(std::size_t l) const { return l + 1 == spec.num_layers ? spec.output_dim : spec.hidden_dim; }

    void append_params(ParamList& out, const std::string& prefix) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back({prefix + ".W" + std::to_string(l), weights[l]});
            out.push_back({prefix + ".b" + std::to_string(l), biases[l]});
        }
    }
};

// Glorot-uniform weights, zero biases. Deterministic in (spec, seed).
inline Mlp init_mlp(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Mlp m;
    m.spec = spec;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const std::size_t in = m.layer_in(l), out = m.layer_out(l);
        const double a = std::sqrt(6.0 / static_cast<double>(in + out));
        CounterRng rng(seed, l);
        std::vector<double> w(in * out);
        for (auto& v : w) v = rng.uniform(-a, a);
        m.weights.push_back(Tensor({in, out}, std::move(w)).set_requires_grad());
        m.biases.push_back(Tensor::zeros({out}).set_requires_grad());
    }
    return m;
}

inline Tensor mlp_forward(const Mlp& m, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != m.spec.input_dim)
        throw ShapeError("mlp_forward: expected batch x " + std::to_string(m.spec.input_dim) + ", got " +
                         shape_str(x.shape()));
    Tensor h = x;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        h = add(matmul(h, m.weights[l]), m.biases[l]);
        if (l + 1 < m.weights.size()) h = leaky_relu(h, m.spec.slope);
    }
    switch (m.spec.output_activation) {
        case OutputActivation::softplus: return softplus(h);
        case OutputActivation::sigmoid: return sigmoid(h);
        case OutputActivation::identity: break;
    }
    return h;
}

// ---- Adam ---------------------------------------------------------------------------------

struct AdamState {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

// One Adam update with bias correction using each parameter's accumulated gradient.
inline void adam_step(AdamState& s, ParamList& params) {
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.tensor.size(), 0.0);
            s.v.emplace_back(p.tensor.size(), 0.0);
        }
    }
    if (s.m.size() != params.size()) throw ShapeError("adam_step: optimizer state tracks a different parameter set");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].tensor.grad();
        if (g.size() != params[i].tensor.size() || s.m[i].size() != g.size())
            throw ShapeError("adam_step: gradient of '" + params[i].name + "' is not shaped like the parameter");
        for (double x : g)
            if (!std::isfinite(x)) throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name + "'");
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.mutable_values();
        const auto g = params[i].tensor.grad();
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
            w[j] -= s.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.eps);
        }
    }
}

inline void zero_grads(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

enum class ScheduleKind { constant, multiplicative_decay };

NLOHMANN_JSON_SERIALIZE_ENUM(ScheduleKind, {{ScheduleKind::constant, "constant"},
                                            {ScheduleKind::multiplicative_decay, "multiplicative_decay"}})

struct LrSchedule {
    ScheduleKind kind = ScheduleKind::multiplicative_decay;
    double factor = 0.99;
    double floor = 1e-5;

    void validate() const {
        if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("LrSchedule: factor must lie in (0, 1]");
        if (floor < 0.0) throw ConfigError("LrSchedule: floor must be >= 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LrSchedule, kind, factor, floor)

inline double schedule_lr(const LrSchedule& s, std::size_t epoch, double base_lr) {
    if (s.kind == ScheduleKind::constant) return base_lr;
    return std::max(s.floor, base_lr * std::pow(s.factor, static_cast<double>(epoch)));
}

// ---- checkpoints --------------------------------------------------------------------------
//
// <stem>.json holds metadata plus a "tensors" table (name, shape, offset in doubles);
// <stem>.bin holds every tensor's values back to back as little-endian float64, in table order.

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
    static_assert(sizeof(double) == 8);
    for (double d : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        unsigned char b[8];
        for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
        os.write(reinterpret_cast<const char*>(b), 8);
    }
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t count) {
    std::vector<double> out(count);
    for (auto& d : out) {
        unsigned char b[8];
        if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("read_f64_le: truncated blob");
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
        std::memcpy(&d, &bits, 8);
    }
    return out;
}

struct BlobEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline void save_checkpoint(const std::filesystem::path& stem, nlohmann::json meta,
                            const std::vector<BlobEntry>& entries) {
    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    std::ofstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_checkpoint: cannot open " + stem.string() + ".bin");
    for (const auto& e : entries) {
        table.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
        write_f64_le(bin, e.values);
        offset += e.values.size();
    }
    meta["tensors"] = std::move(table);
    meta["blob"] = {{"file", stem.filename().string() + ".bin"}, {"dtype", "float64-le"}, {"count", offset}};
    std::ofstream js(stem.string() + ".json");
    if (!js) throw std::runtime_error("save_checkpoint: cannot open " + stem.string() + ".json");
    js << meta.dump(2) << '\n';
}

struct LoadedCheckpoint {
    nlohmann::json meta;
    std::vector<BlobEntry> entries;

    const BlobEntry& find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    }
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw std::runtime_error("load_checkpoint: cannot open " + stem.string() + ".json");
    LoadedCheckpoint ck;
    ck.meta = nlohmann::json::parse(js);
    std::ifstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_checkpoint: cannot open " + stem.string() + ".bin");
    for (const auto& t : ck.meta.at("tensors")) {
        BlobEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<Shape>();
        e.values = read_f64_le(bin, shape_numel(e.shape));
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

inline std::vector<BlobEntry> param_entries(const ParamList& params) {
    std::vector<BlobEntry> out;
    for (const auto& p : params)
        out.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
    return out;
}

// Copies values stored under each parameter's name into the live tensors.
inline void restore_params(ParamList& params, const LoadedCheckpoint& ck) {
    for (auto& p : params) {
        const auto& e = ck.find(p.name);
        if (e.shape != p.tensor.shape())
            throw ShapeError("checkpoint: '" + p.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                             shape_str(p.tensor.shape()));
        std::copy(e.values.begin(), e.values.end(), p.tensor.mutable_values().begin());
    }
}

}  // namespace ivae
