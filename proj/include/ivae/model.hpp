#pragma once

// The conditional latent-variable model, its Gaussian inference network, ELBO estimators for
// iVAE and the VAE-family baselines, and the minibatch training loop.

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ivae/errors.hpp"
#include "ivae/nets.hpp"
#include "ivae/priors.hpp"
#include "ivae/rng.hpp"
#include "ivae/tensor.hpp"

namespace ivae {

enum class Variant { ivae, vae, beta_vae, beta_tc_vae };

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::ivae, "ivae"},
                                       {Variant::vae, "vae"},
                                       {Variant::beta_vae, "beta_vae"},
                                       {Variant::beta_tc_vae, "beta_tc_vae"}})

enum class Likelihood { gaussian, bernoulli };

NLOHMANN_JSON_SERIALIZE_ENUM(Likelihood, {{Likelihood::gaussian, "gaussian"}, {Likelihood::bernoulli, "bernoulli"}})

// Fixed prior used by the VAE-family baselines.
enum class BaselinePrior { standard_normal, standard_laplace };

NLOHMANN_JSON_SERIALIZE_ENUM(BaselinePrior, {{BaselinePrior::standard_normal, "standard_normal"},
                                             {BaselinePrior::standard_laplace, "standard_laplace"}})

struct VariantSpec {
    Variant kind = Variant::ivae;
    double alpha = 1.0;  // beta_tc_vae: index-code mutual information weight
    double beta = 1.0;   // beta_vae: KL weight; beta_tc_vae: total-correlation weight
    double gamma = 1.0;  // beta_tc_vae: dimension-wise KL weight

    bool uses_aux() const { return kind == Variant::ivae; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VariantSpec, kind, alpha, beta, gamma)

inline std::string variant_label(const VariantSpec& v) {
    switch (v.kind) {
        case Variant::ivae: return "ivae";
        case Variant::vae: return "vae";
        case Variant::beta_vae: return "beta_vae(" + nlohmann::json(v.beta).dump() + ")";
        case Variant::beta_tc_vae: return "beta_tc_vae(" + nlohmann::json(v.beta).dump() + ")";
    }
    return "?";
}

struct ModelConfig {
    std::size_t latent_dim = 2;
    std::size_t hidden_dim = 50;
    std::size_t num_layers = 3;
    double slope = 0.01;
    Family family = Family::gaussian_var;
    LambdaKind lambda_kind = LambdaKind::lookup_table;
    Likelihood likelihood = Likelihood::gaussian;
    double noise_var = 0.01;
    bool learn_noise = false;
    BaselinePrior baseline_prior = BaselinePrior::standard_normal;
    VariantSpec variant;
    std::uint64_t seed = 0;

    void validate() const {
        if (latent_dim < 1 || hidden_dim < 1 || num_layers < 1) throw ConfigError("model: dimensions must be >= 1");
        if (likelihood == Likelihood::gaussian && !(noise_var >= 0.0)) throw ConfigError("model: noise_var must be >= 0");
        if (variant.beta < 0 || variant.alpha < 0 || variant.gamma < 0)
            throw ConfigError("model: variant weights must be non-negative");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, latent_dim, hidden_dim, num_layers, slope, family,
                                                lambda_kind, likelihood, noise_var, learn_noise, baseline_prior,
                                                variant, seed)

struct Model {
    ModelConfig config;
    std::size_t obs_dim = 0;
    std::size_t aux_dim = 0;
    ExpFamilySpec prior;  // conditional prior family (ivae) or the fixed baseline prior
    LambdaMap lambda;     // trained only by ivae
    Mlp decoder;          // n -> d (mean, or Bernoulli logits)
    Mlp enc_mean;         // d + M -> n
    Mlp enc_logvar;       // d + M -> n
    Tensor log_noise_var;

    std::size_t latent_dim() const { return config.latent_dim; }

    ParamList parameters() const {
        ParamList p;
        decoder.append_params(p, "decoder");
        enc_mean.append_params(p, "encoder.mean");
        enc_logvar.append_params(p, "encoder.logvar");
        if (config.variant.uses_aux()) lambda.append_params(p, "prior.lambda");
        if (config.learn_noise) p.push_back({"decoder.log_noise_var", log_noise_var});
        return p;
    }
};

inline Model make_model(const ModelConfig& cfg, std::size_t obs_dim, std::size_t aux_dim) {
    cfg.validate();
    if (obs_dim < 1 || aux_dim < 1) throw ConfigError("model: observation and auxiliary dims must be >= 1");
    Model m;
    m.config = cfg;
    m.obs_dim = obs_dim;
    m.aux_dim = aux_dim;
    const std::size_t n = cfg.latent_dim;
    MlpSpec dec{n, obs_dim, cfg.hidden_dim, cfg.num_layers, cfg.slope, OutputActivation::identity};
    MlpSpec enc{obs_dim + aux_dim, n, cfg.hidden_dim, cfg.num_layers, cfg.slope, OutputActivation::identity};
    m.decoder = init_mlp(dec, derive_seed(cfg.seed, 1));
    m.enc_mean = init_mlp(enc, derive_seed(cfg.seed, 2));
    m.enc_logvar = init_mlp(enc, derive_seed(cfg.seed, 3));
    if (cfg.variant.uses_aux()) {
        m.prior = {cfg.family, n};
        MlpSpec lam_net{aux_dim, 1, cfg.hidden_dim, cfg.num_layers, cfg.slope, OutputActivation::identity};
        m.lambda = init_lambda(cfg.lambda_kind, m.prior, aux_dim, derive_seed(cfg.seed, 4), lam_net);
    } else {
        m.prior = {cfg.baseline_prior == BaselinePrior::standard_laplace ? Family::laplace_scale : Family::gaussian_var, n};
    }
    const double nv = cfg.likelihood == Likelihood::gaussian && cfg.noise_var > 0 ? cfg.noise_var : 1.0;
    m.log_noise_var = Tensor::vector({std::log(nv)});
    if (cfg.learn_noise) m.log_noise_var.set_requires_grad();
    return m;
}

// Natural parameters of the prior for each row of u (ivae) or the fixed baseline row.
inline Tensor prior_naturals(const Model& m, const Tensor& u) {
    if (m.config.variant.uses_aux()) return eval_lambda(m.lambda, u);
    const double v = m.prior.family == Family::laplace_scale ? 1.0 : -0.5;
    return Tensor({1, m.prior.n}, std::vector<double>(m.prior.n, v));
}

inline Tensor encoder_input(const Model& m, const Tensor& x, const Tensor& u) {
    if (x.rank() != 2 || x.cols() != m.obs_dim)
        throw ShapeError("model: expected observations batch x " + std::to_string(m.obs_dim) + ", got " +
                         shape_str(x.shape()));
    if (u.rank() != 2 || u.cols() != m.aux_dim || u.rows() != x.rows())
        throw ShapeError("model: expected auxiliary batch x " + std::to_string(m.aux_dim) + ", got " +
                         shape_str(u.shape()));
    // baselines see the same architecture with u zeroed out
    return concat({x, m.config.variant.uses_aux() ? u : Tensor::zeros(u.shape())}, 1);
}

// z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from (seed, stream). eps is a constant.
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, std::uint64_t seed, std::uint64_t stream = 0) {
    if (mu.shape() != logvar.shape()) throw ShapeError("reparameterize: mu and logvar shapes differ");
    std::vector<double> eps(mu.size());
    CounterRng rng(seed, stream);
    for (auto& e : eps) e = rng.normal();
    return add(mu, mul(exp(mul(logvar, Tensor::scalar(0.5))), Tensor(mu.shape(), std::move(eps))));
}

// log N(z; mu, exp(logvar)) summed over columns, batch x 1.
inline Tensor gaussian_log_density(const Tensor& z, const Tensor& mu, const Tensor& logvar) {
    const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(z.cols());
    return sum(mul(add(logvar, div(square(sub(z, mu)), exp(logvar))), Tensor::scalar(-0.5)), 1) + c;
}

// Decoder log-likelihood log p(x | z), batch x 1.
inline Tensor reconstruction_log_lik(const Model& m, const Tensor& x, const Tensor& z) {
    Tensor out = mlp_forward(m.decoder, z);
    if (m.config.likelihood == Likelihood::bernoulli) {
        // x * logit - softplus(logit)
        return sum(sub(mul(x, out), softplus(out)), 1);
    }
    if (!m.config.learn_noise && !(m.config.noise_var > 0.0))
        throw DomainError("model: gaussian likelihood needs noise_var > 0 to evaluate densities");
    const double d = static_cast<double>(m.obs_dim);
    Tensor lnv = m.log_noise_var;  // 1-element
    Tensor sq = sum(square(sub(x, out)), 1);
    return sub(mul(sq, exp(neg(lnv)) * -0.5), (lnv + std::log(2.0 * std::numbers::pi)) * (0.5 * d));
}

inline bool prior_is_gaussian(Family f) { return f != Family::laplace_scale; }

// Prior mean and variance tensors (broadcastable to batch x n) for the Gaussian families.
inline std::pair<Tensor, Tensor> gaussian_prior_moments(const ExpFamilySpec& spec, const Tensor& lam) {
    switch (spec.family) {
        case Family::gaussian_var: return {Tensor::scalar(0.0), div(Tensor::scalar(-0.5), lam)};
        case Family::gaussian_location: return {mul(lam, Tensor::scalar(0.5)), Tensor::scalar(0.5)};
        case Family::gaussian_mean_var: {
            Tensor l1 = matmul(lam, detail::stat_selector(spec, 0));
            Tensor l2 = matmul(lam, detail::stat_selector(spec, 1));
            Tensor var = div(Tensor::scalar(-0.5), l2);
            return {mul(l1, var), var};
        }
        case Family::laplace_scale: break;
    }
    throw DomainError("gaussian_prior_moments: family is not Gaussian");
}

// KL( N(mu, exp(logvar)) || N(pm, pv) ) summed over components, batch x 1.
inline Tensor gaussian_kl(const Tensor& mu, const Tensor& logvar, const Tensor& pm, const Tensor& pv) {
    Tensor v = exp(logvar);
    Tensor per = log(pv) - logvar + div(v + square(mu - pm), pv) - 1.0;
    return mul(sum(per, 1), Tensor::scalar(0.5));
}

struct ElboOptions {
    std::size_t samples = 1;
    bool analytic_kl = true;
    std::size_t dataset_size = 0;  // N for the beta-TC-VAE minibatch-weighted estimator
};

struct ElboResult {
    Tensor objective;  // scalar, mean over the batch of the variant's objective
    Tensor per_point;  // batch x 1 unweighted ELBO estimate (recon - KL) per datapoint
    double reconstruction = 0.0;
    double kl = 0.0;  // mean KL(q || p), analytic or MC
    double mutual_info = 0.0;
    double total_correlation = 0.0;
    double dimwise_kl = 0.0;
};

inline ElboResult elbo(const Model& m, const Tensor& x, const Tensor& u, std::uint64_t seed,
                       const ElboOptions& opt = {}) {
    if (opt.samples < 1) throw ConfigError("elbo: samples must be >= 1");
    if (m.config.likelihood == Likelihood::bernoulli)
        for (double v : x.values())
            if (v != 0.0 && v != 1.0) throw DomainError("elbo: Bernoulli likelihood needs binary observations");
    Tensor h = encoder_input(m, x, u);
    Tensor mu = mlp_forward(m.enc_mean, h);
    Tensor logvar = mlp_forward(m.enc_logvar, h);
    Tensor lam = prior_naturals(m, u);
    const bool analytic = opt.analytic_kl && prior_is_gaussian(m.prior.family);
    const double inv_s = 1.0 / static_cast<double>(opt.samples);

    Tensor recon = Tensor::scalar(0.0);
    Tensor mc_kl = Tensor::scalar(0.0);
    Tensor z0;
    for (std::size_t s = 0; s < opt.samples; ++s) {
        Tensor z = reparameterize(mu, logvar, seed, s);
        if (s == 0) z0 = z;
        recon = recon + reconstruction_log_lik(m, x, z) * inv_s;
        if (!analytic) mc_kl = mc_kl + (gaussian_log_density(z, mu, logvar) - log_prior(m.prior, lam, z)) * inv_s;
    }
    Tensor kl;
    if (analytic) {
        auto [pm, pv] = gaussian_prior_moments(m.prior, lam);
        kl = gaussian_kl(mu, logvar, pm, pv);
    } else {
        kl = mc_kl;
    }

    ElboResult r;
    r.per_point = recon - kl;
    r.reconstruction = mean(recon).item();
    r.kl = mean(kl).item();
    const auto& v = m.config.variant;
    switch (v.kind) {
        case Variant::ivae:
        case Variant::vae: r.objective = mean(r.per_point); break;
        case Variant::beta_vae: r.objective = mean(recon - kl * v.beta); break;
        case Variant::beta_tc_vae: {
            // Minibatch-weighted sampling estimates of log q(z) and log prod_k q(z_k).
            const std::size_t B = x.rows(), n = m.latent_dim();
            const double log_nb = std::log(static_cast<double>(std::max(opt.dataset_size, B)) * static_cast<double>(B));
            const double c = -0.5 * std::log(2.0 * std::numbers::pi);
            Tensor joint = Tensor::scalar(0.0);
            Tensor log_prod = Tensor::scalar(0.0);
            for (std::size_t k = 0; k < n; ++k) {
                Tensor zk = slice(z0, 1, k, k + 1);                    // B x 1
                Tensor mk = transpose(slice(mu, 1, k, k + 1));         // 1 x B
                Tensor lk = transpose(slice(logvar, 1, k, k + 1));     // 1 x B
                Tensor dk = (lk + div(square(zk - mk), exp(lk))) * -0.5 + c;  // B x B: log q(z_ik | x_j)
                joint = joint + dk;
                log_prod = log_prod + (logsumexp(dk, 1) - log_nb);
            }
            Tensor log_qz = logsumexp(joint, 1) - log_nb;
            Tensor log_qzx = gaussian_log_density(z0, mu, logvar);
            Tensor log_pz = log_prior(m.prior, lam, z0);
            Tensor mi = mean(log_qzx - log_qz);
            Tensor tc = mean(log_qz - log_prod);
            Tensor dw = mean(log_prod - log_pz);
            r.mutual_info = mi.item();
            r.total_correlation = tc.item();
            r.dimwise_kl = dw.item();
            r.objective = mean(recon) - mi * v.alpha - tc * v.beta - dw * v.gamma;
            break;
        }
    }
    return r;
}

// ---- training -----------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double lr = 0.01;
    LrSchedule schedule;
    std::uint64_t seed = 0;
    std::size_t samples = 1;
    bool analytic_kl = true;

    void validate(std::size_t n_rows) const {
        if (batch_size < 1 || samples < 1 || !(lr > 0.0)) throw ConfigError("train: batch_size, samples, lr must be positive");
        if (batch_size > n_rows) throw ConfigError("train: batch_size exceeds dataset size");
        schedule.validate();
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, lr, schedule, seed, samples,
                                                analytic_kl)

// Optimizer progress carried across train() calls so training can resume bit-exactly.
struct TrainState {
    AdamState adam;
    std::size_t epochs_done = 0;
};

struct TrainResult {
    std::vector<double> elbo_trace;  // mean minibatch objective per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_elbo)>;

inline TrainResult train(Model& m, const Tensor& x, const Tensor& u, const TrainConfig& cfg, TrainState& state,
                         const EpochCallback& on_epoch = {}) {
    const std::size_t N = x.rows();
    cfg.validate(N);
    if (u.rows() != N) throw ShapeError("train: x and u row counts differ");
    check_one_hot(u);
    ParamList params = m.parameters();
    TrainResult result;
    ElboOptions opt{cfg.samples, cfg.analytic_kl, N};
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const std::size_t epoch = state.epochs_done;
        state.adam.lr = schedule_lr(cfg.schedule, epoch, cfg.lr);
        const auto perm = random_permutation(N, derive_seed(cfg.seed, 1000 + epoch));
        double total = 0.0;
        for (std::size_t start = 0, b = 0; start < N; start += cfg.batch_size, ++b) {
            const std::size_t end = std::min(N, start + cfg.batch_size);
            if (end - start < 2 && N >= 2) break;
            std::span<const std::size_t> idx(perm.data() + start, end - start);
            Tensor xb = gather_rows(x, idx);
            Tensor ub = gather_rows(u, idx);
            Tape tape;
            TapeScope scope(tape);
            double value = 0.0;
            try {
                ElboResult r = elbo(m, xb, ub, derive_seed(derive_seed(cfg.seed, epoch), b), opt);
                value = r.objective.item();
                zero_grads(params);
                tape.backward(neg(r.objective));
                adam_step(state.adam, params);
            } catch (const NumericError& err) {
                throw NumericError("train: divergence at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b) + ": " + err.what());
            } catch (const DomainError& err) {
                throw NumericError("train: divergence at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b) + ": " + err.what());
            }
            total += value * static_cast<double>(end - start);
        }
        const double epoch_mean = total / static_cast<double>(N);
        result.elbo_trace.push_back(epoch_mean);
        ++state.epochs_done;
        if (on_epoch) on_epoch(epoch, epoch_mean);
    }
    return result;
}

inline TrainResult train(Model& m, const Tensor& x, const Tensor& u, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
    TrainState state;
    return train(m, x, u, cfg, state, on_epoch);
}

struct ElboEstimate {
    double mean = 0.0;
    double standard_error = 0.0;
    std::vector<double> per_point;
};

// Unweighted ELBO (recon - KL) on a full dataset in inference mode.
inline ElboEstimate evaluate_elbo(const Model& m, const Tensor& x, const Tensor& u, std::uint64_t seed,
                                  const ElboOptions& opt = {}, std::size_t chunk = 4096) {
    NoGradGuard no_grad;
    ElboEstimate est;
    const std::size_t N = x.rows();
    for (std::size_t start = 0, c = 0; start < N; start += chunk, ++c) {
        const std::size_t end = std::min(N, start + chunk);
        Tensor xb = slice(x, 0, start, end), ub = slice(u, 0, start, end);
        ElboResult r = elbo(m, xb, ub, derive_seed(seed, c), opt);
        est.per_point.insert(est.per_point.end(), r.per_point.values().begin(), r.per_point.values().end());
    }
    double s = 0.0, s2 = 0.0;
    for (double v : est.per_point) s += v;
    est.mean = s / static_cast<double>(N);
    for (double v : est.per_point) s2 += (v - est.mean) * (v - est.mean);
    est.standard_error = N > 1 ? std::sqrt(s2 / static_cast<double>(N - 1) / static_cast<double>(N)) : 0.0;
    return est;
}

struct PosteriorStats {
    Tensor mean;
    Tensor variance;
    Tensor sample;
};

inline PosteriorStats posterior_stats(const Model& m, const Tensor& x, const Tensor& u, std::uint64_t seed = 0) {
    NoGradGuard no_grad;
    Tensor h = encoder_input(m, x, u);
    Tensor mu = mlp_forward(m.enc_mean, h);
    Tensor lv = mlp_forward(m.enc_logvar, h);
    return {mu, exp(lv), reparameterize(mu, lv, seed)};
}

// Draws z ~ p(z|u) and then x ~ p(x|z) for every row of u.
inline Tensor generate(const Model& m, const Tensor& u, std::uint64_t seed) {
    NoGradGuard no_grad;
    check_one_hot(u);
    Tensor lam = prior_naturals(m, u);
    const std::size_t B = u.rows(), n = m.latent_dim(), w = m.prior.width();
    std::vector<double> z(B * n);
    for (std::size_t r = 0; r < B; ++r) {
        const std::size_t lr = lam.rows() == 1 ? 0 : r;
        std::span<const double> row(lam.values().data() + lr * w, w);
        Tensor draw = sample_prior(m.prior, row, 1, derive_seed(seed, r));
        std::copy(draw.values().begin(), draw.values().end(), z.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    Tensor f = mlp_forward(m.decoder, Tensor({B, n}, std::move(z)));
    std::vector<double> x(f.values().begin(), f.values().end());
    CounterRng rng(seed, 0xD0D0);
    if (m.config.likelihood == Likelihood::bernoulli) {
        for (auto& v : x) v = rng.uniform() < detail::sigmoid_value(v) ? 1.0 : 0.0;
    } else {
        const double sd = std::sqrt(std::exp(m.log_noise_var[0]) * (m.config.learn_noise || m.config.noise_var > 0 ? 1.0 : 0.0));
        for (auto& v : x) v += sd * rng.normal();
    }
    return Tensor(f.shape(), std::move(x));
}

// ---- checkpoints --------------------------------------------------------------------------

inline nlohmann::json lambda_json(const Model& m) {
    nlohmann::json j = {{"kind", m.lambda.kind}, {"family", m.prior}};
    if (m.config.variant.uses_aux() && m.lambda.kind == LambdaKind::lookup_table) {
        NoGradGuard no_grad;
        Tensor nat = constrain_naturals(m.prior, m.lambda.table);
        std::vector<std::vector<double>> rows;
        for (std::size_t r = 0; r < nat.rows(); ++r)
            rows.emplace_back(nat.values().begin() + static_cast<std::ptrdiff_t>(r * nat.cols()),
                              nat.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * nat.cols()));
        j["naturals"] = rows;
    }
    return j;
}

inline void save_model(const std::filesystem::path& stem, const Model& m, const TrainState& st,
                       nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json meta = {{"format", "ivae-checkpoint"},
                           {"version", 1},
                           {"model", m.config},
                           {"obs_dim", m.obs_dim},
                           {"aux_dim", m.aux_dim},
                           {"variant", variant_label(m.config.variant)},
                           {"uses_aux", m.config.variant.uses_aux()},
                           {"prior", lambda_json(m)},
                           {"init", "glorot_uniform weights, zero biases"},
                           {"adam", {{"step", st.adam.step}, {"beta1", st.adam.beta1}, {"beta2", st.adam.beta2},
                                     {"eps", st.adam.eps}, {"lr", st.adam.lr}}},
                           {"epochs_done", st.epochs_done},
                           {"extra", std::move(extra)}};
    ParamList params = m.parameters();
    auto entries = param_entries(params);
    for (std::size_t i = 0; i < st.adam.m.size() && i < params.size(); ++i) {
        entries.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), st.adam.m[i]});
        entries.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), st.adam.v[i]});
    }
    save_checkpoint(stem, std::move(meta), entries);
}

struct LoadedModel {
    Model model;
    TrainState state;
    nlohmann::json meta;
};

inline LoadedModel load_model(const std::filesystem::path& stem) {
    LoadedCheckpoint ck = load_checkpoint(stem);
    if (ck.meta.value("format", "") != "ivae-checkpoint") throw ConfigError("load_model: not an ivae checkpoint");
    LoadedModel out;
    out.meta = ck.meta;
    ModelConfig cfg = ck.meta.at("model").get<ModelConfig>();
    out.model = make_model(cfg, ck.meta.at("obs_dim").get<std::size_t>(), ck.meta.at("aux_dim").get<std::size_t>());
    ParamList params = out.model.parameters();
    restore_params(params, ck);
    const auto& adam = ck.meta.at("adam");
    out.state.adam.step = adam.at("step").get<std::uint64_t>();
    out.state.adam.beta1 = adam.at("beta1").get<double>();
    out.state.adam.beta2 = adam.at("beta2").get<double>();
    out.state.adam.eps = adam.at("eps").get<double>();
    out.state.adam.lr = adam.at("lr").get<double>();
    out.state.epochs_done = ck.meta.at("epochs_done").get<std::size_t>();
    if (out.state.adam.step > 0) {
        for (const auto& p : params) {
            out.state.adam.m.push_back(ck.find("adam.m." + p.name).values);
            out.state.adam.v.push_back(ck.find("adam.v." + p.name).values);
        }
    }
    return out;
}

}  // namespace ivae
