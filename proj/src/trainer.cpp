#include "koopkal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace koopkal {

using nlohmann::json;

void Hyper::validate() const {
    if (n_vars <= 0) throw ConfigError("hyper: n_vars must be positive");
    if (patch_size <= 0) throw ConfigError("hyper: patch_size must be positive");
    if (context_len % patch_size != 0) {
        throw ConfigError("hyper: context length " + std::to_string(context_len) +
                          " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (horizon_len % patch_size != 0) {
        throw ConfigError("hyper: horizon length " + std::to_string(horizon_len) +
                          " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (latent_dim <= 0) throw ConfigError("hyper: latent_dim must be positive");
    if (token_count() < 2) {
        throw ConfigError("hyper: need at least 2 context tokens for the operator fit, got " +
                          std::to_string(token_count()));
    }
    if (batch_size <= 0 || epochs < 0 || train_stride <= 0) {
        throw ConfigError("hyper: batch_size and train_stride must be positive, epochs >= 0");
    }
    if (val_samples < 2 || eval_samples < 2) {
        throw ConfigError("hyper: sampling counts must be at least 2");
    }
    if (lr <= 0 || grad_clip <= 0) throw ConfigError("hyper: lr and grad_clip must be positive");
    if (beta_kl < 0 || lambda_rec < 0 || ridge_lambda < 0) {
        throw ConfigError("hyper: loss weights must be nonnegative");
    }
}

ModelBundle ModelBundle::init(const Hyper& hyper) {
    hyper.validate();
    ModelBundle b;
    b.hyper = hyper;
    const int64_t d = hyper.latent_dim;
    const int64_t flat = hyper.n_vars * hyper.patch_size;
    Rng rng(derive_seed(hyper.seed, 0x1417));
    b.embed_w = Tensor::randn({d, flat}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(flat)));
    b.embed_w.set_requires_grad(true);
    b.embed_b = Tensor::zeros({d});
    b.embed_b.set_requires_grad(true);
    b.psi = MeasurementMlp::init(d, rng);
    b.k_glo = Tensor::zeros({d, d});
    b.k_glo.set_requires_grad(true);
    b.integrator = IntegratorNet::init(d, hyper.token_count(), hyper.horizon_tokens(), rng);
    b.kalman = KalmanParams::init(d);
    b.heads.mu = DecoderHead::init(d, flat, rng, false);
    b.heads.sigma = DecoderHead::init(d, flat, rng, true);
    return b;
}

std::vector<NamedParam> ModelBundle::parameters() {
    std::vector<NamedParam> out;
    out.push_back({"embed.w", embed_w});
    out.push_back({"embed.b", embed_b});
    psi.collect(out, "psi");
    out.push_back({"koopman.k_glo", k_glo});
    integrator.collect(out, "integrator");
    kalman.collect(out, "kalman");
    heads.mu.collect(out, "decoder.mu");
    heads.sigma.collect(out, "decoder.sigma");
    return out;
}

ModelBundle ModelBundle::clone() const {
    ModelBundle copy = ModelBundle::init(hyper);
    auto src = const_cast<ModelBundle*>(this)->parameters();
    auto dst = copy.parameters();
    for (size_t i = 0; i < src.size(); ++i) {
        auto s = src[i].tensor.data();
        auto d = dst[i].tensor.data_mut();
        std::copy(s.begin(), s.end(), d.begin());
    }
    return copy;
}

namespace {

template <typename F>
auto with_stage(const char* stage, F&& fn) {
    try {
        return fn();
    } catch (const PdError& e) {
        throw PdError(std::string(stage) + ": " + e.what(), e.minor_index);
    } catch (const NumericError& e) {
        throw NumericError(std::string(stage) + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(std::string(stage) + ": " + e.what());
    }
}

double spectral_estimate(const double* k, int64_t d) {
    std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d))), w(d), u(d);
    double sigma = 0.0;
    for (int iter = 0; iter < 12; ++iter) {
        for (int64_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += k[i * d + j] * v[j];
            w[i] = s;
        }
        sigma = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
        for (int64_t i = 0; i < d; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += k[j * d + i] * w[j];
            u[i] = s;
        }
        const double norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
        if (norm == 0.0) return 0.0;
        for (int64_t i = 0; i < d; ++i) v[i] = u[i] / norm;
    }
    return sigma;
}

Diagnostics compute_diagnostics(const Tensor& u, const Tensor& k_combined, int64_t d) {
    Diagnostics diag;
    const auto& uv = u.data();
    const int64_t batch = u.shape()[0];
    const int64_t per = u.numel() / batch;
    for (int64_t t = 0; t < batch; ++t) {
        double s = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            const double x = uv[t * per + i];
            s += x * x;
        }
        diag.u_norm_mean += std::sqrt(s);
    }
    diag.u_norm_mean /= static_cast<double>(batch);

    const auto& kv = k_combined.data();
    const int64_t kb = k_combined.dim() == 3 ? k_combined.shape()[0] : 1;
    for (int64_t t = 0; t < kb; ++t) {
        diag.k_spectral_max =
            std::max(diag.k_spectral_max, spectral_estimate(kv.data() + t * d * d, d));
    }
    return diag;
}

}  // namespace

EncodeResult encode_window(const ModelBundle& bundle, const WindowBatch& batch,
                           const VariantConfig& variant) {
    const auto& hyper = bundle.hyper;
    if (batch.vars() != hyper.n_vars || batch.context_len() != hyper.context_len) {
        throw ShapeError("encode: batch context " + shape_str(batch.context.shape()) +
                         " does not match model (N=" + std::to_string(hyper.n_vars) +
                         ", T=" + std::to_string(hyper.context_len) + ")");
    }
    const int64_t n = hyper.token_count();
    const int64_t m = hyper.horizon_tokens();
    const int64_t d = hyper.latent_dim;
    const int64_t batch_size = batch.batch_size();

    auto ctx_std = with_stage("standardize", [&] {
        return standardize(batch.context, batch.mean, batch.std);
    });
    auto flat = with_stage("patchify", [&] { return patchify(ctx_std, hyper.patch_size); });
    auto tokens = with_stage("embed", [&] { return embed(flat, bundle.embed_w, bundle.embed_b); });
    auto x_star = with_stage("measure", [&] { return measure(bundle.psi, tokens); });

    Tensor k;
    switch (variant.op) {
        case VariantConfig::Operator::GlobalOnly:
            k = bundle.k_glo;
            break;
        case VariantConfig::Operator::LocalOnly:
            k = with_stage("fit_local_operator",
                           [&] { return fit_local_operator(x_star, hyper.ridge_lambda); });
            break;
        case VariantConfig::Operator::Mixed:
            k = with_stage("fit_local_operator", [&] {
                return add(fit_local_operator(x_star, hyper.ridge_lambda), bundle.k_glo);
            });
            break;
    }

    auto x1 = slice(x_star, 2, 0, 1);
    auto [x_hat_c, x_hat_h] = with_stage("rollout", [&] { return rollout(k, x1, n, m); });

    Tensor u;
    if (variant.use_integrator) {
        auto x_res = sub(x_star, x_hat_c);
        u = with_stage("integrate_residual", [&] { return bundle.integrator.apply(x_res); });
    } else {
        u = Tensor::zeros({batch_size, d, m});
    }

    auto z0 = slice(x_star, 2, n - 1, n);
    auto control = variant.use_control ? u : Tensor::zeros({batch_size, d, m});
    auto filtered = with_stage("run_filter",
                               [&] { return run_filter(z0, control, x_hat_h, bundle.kalman); });

    EncodeResult out;
    out.posterior.means =
        variant.use_skip ? skip_connect(filtered.states, u) : filtered.states;
    out.posterior.covariances = std::move(filtered.covariances);
    out.x_hat_c = x_hat_c;
    out.diagnostics = compute_diagnostics(u, k, d);
    return out;
}

ForwardResult forward_pass(const ModelBundle& bundle, const WindowBatch& batch,
                           const Tensor& noise, const VariantConfig& variant) {
    const auto& hyper = bundle.hyper;
    if (batch.horizon_len() != hyper.horizon_len) {
        throw ShapeError("forward: batch horizon " + shape_str(batch.target.shape()) +
                         " does not match model L=" + std::to_string(hyper.horizon_len));
    }
    auto encoded = encode_window(bundle, batch, variant);
    auto z_sample = with_stage("resample", [&] { return resample(encoded.posterior, noise); });
    auto decoded = with_stage("decode", [&] { return decode(bundle.heads, z_sample, batch); });
    auto x_rec = with_stage("reconstruct_context", [&] {
        return reconstruct_context(bundle.heads.mu, encoded.x_hat_c, batch);
    });
    ForwardResult out;
    out.loss = with_stage("total_loss", [&] {
        return total_loss(batch.target, decoded, encoded.posterior.means,
                          encoded.posterior.covariances, batch.context, x_rec, hyper.beta_kl,
                          hyper.lambda_rec);
    });
    out.forecast = decoded;
    out.diagnostics = encoded.diagnostics;
    return out;
}

AdamState AdamState::init(const std::vector<NamedParam>& params, double lr, double beta1,
                          double beta2, double eps) {
    AdamState s;
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (const auto& p : params) {
        s.m.emplace_back(p.tensor.numel(), 0.0);
        s.v.emplace_back(p.tensor.numel(), 0.0);
    }
    return s;
}

void adam_step(AdamState& state, std::vector<NamedParam>& params) {
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state does not match parameter registry");
    }
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
            throw ShapeError("adam_step: parameter '" + p.name + "' has no gradient");
        }
    }
    ++state.step_count;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        auto g = params[i].tensor.grad();
        auto x = params[i].tensor.data_mut();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < x.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            x[j] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

double clip_gradients(std::vector<NamedParam>& params, double max_norm) {
    double total = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) total += g * g;
    }
    total = std::sqrt(total);
    if (total > max_norm && total > 0.0) {
        const double scale = max_norm / total;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            auto& node = p.tensor.node();
            for (auto& g : node.grad) g *= scale;
        }
    }
    return total;
}

SampleForecast sample_forecast(const ModelBundle& bundle, const SeriesDataset& dataset,
                               const WindowSpec& window, int64_t n_samples, uint64_t seed,
                               const VariantConfig& variant) {
    if (n_samples < 2) {
        throw ShapeError("sample_forecast: need at least 2 samples, got " +
                         std::to_string(n_samples));
    }
    NoGradGuard ng;
    const auto& hyper = bundle.hyper;
    WindowSpec specs[1] = {window};
    auto batch = assemble_batch(dataset, specs, hyper.context_len, hyper.horizon_len,
                               hyper.standardize);
    auto encoded = encode_window(bundle, batch, variant);

    const int64_t d = hyper.latent_dim;
    const int64_t m = hyper.horizon_tokens();
    const int64_t coords = hyper.n_vars * hyper.horizon_len;
    SampleForecast fc;
    fc.sample_count = n_samples;
    fc.coords = coords;
    fc.paths.resize(n_samples * coords);
    fc.observation.assign(batch.target.data().begin(), batch.target.data().end());

    Rng rng(derive_seed(seed, static_cast<uint64_t>(window.start), 0x5a3713));
    for (int64_t s = 0; s < n_samples; ++s) {
        auto eps = Tensor::randn({1, d, m}, rng);
        auto z = resample(encoded.posterior, eps);
        auto decoded = decode(bundle.heads, z, batch);
        auto mu = decoded.mu.data();
        auto sig = decoded.sigma.data();
        for (int64_t c = 0; c < coords; ++c) {
            fc.paths[s * coords + c] = mu[c] + sig[c] * rng.normal();
        }
    }
    return fc;
}

SplitMetrics evaluate_split(const ModelBundle& bundle, const SeriesDataset& dataset, Split split,
                            int64_t n_samples, uint64_t seed, int threads,
                            const VariantConfig& variant) {
    const auto& hyper = bundle.hyper;
    auto windows = make_windows(dataset, hyper.context_len, hyper.horizon_len, hyper.horizon_len,
                                split);
    struct Partial {
        double crps_sum = 0.0, abs_obs_sum = 0.0, abs_err_sum = 0.0;
        std::vector<double> per_step;
    };
    std::vector<Partial> partials(windows.size());

    auto work = [&](size_t begin, size_t end) {
        for (size_t w = begin; w < end; ++w) {
            auto fc = sample_forecast(bundle, dataset, windows[w], n_samples, seed, variant);
            Partial p;
            p.per_step.assign(hyper.horizon_len, 0.0);
            std::vector<double> column(fc.sample_count);
            for (int64_t c = 0; c < fc.coords; ++c) {
                for (int64_t s = 0; s < fc.sample_count; ++s) column[s] = fc.path(s, c);
                const double crps = crps_empirical_sorted(column, fc.observation[c]);
                p.crps_sum += crps;
                p.abs_obs_sum += std::abs(fc.observation[c]);
                p.per_step[c % hyper.horizon_len] += crps;
            }
            auto med = median_path(fc);
            for (int64_t c = 0; c < fc.coords; ++c) {
                p.abs_err_sum += std::abs(med[c] - fc.observation[c]);
            }
            partials[w] = std::move(p);
        }
    };

    int n_threads = threads > 0 ? threads
                                : static_cast<int>(std::min<unsigned>(
                                      std::max(1u, std::thread::hardware_concurrency()), 8));
    n_threads = std::min<int>(n_threads, static_cast<int>(windows.size()));
    if (n_threads <= 1) {
        work(0, windows.size());
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (windows.size() + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t) {
            const size_t b = t * chunk;
            const size_t e = std::min(windows.size(), b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }

    SplitMetrics out;
    out.window_count = static_cast<int64_t>(windows.size());
    out.per_step_crps.assign(hyper.horizon_len, 0.0);
    double crps_sum = 0.0, abs_obs = 0.0, abs_err = 0.0;
    for (const auto& p : partials) {
        crps_sum += p.crps_sum;
        abs_obs += p.abs_obs_sum;
        abs_err += p.abs_err_sum;
        for (int64_t i = 0; i < hyper.horizon_len; ++i) out.per_step_crps[i] += p.per_step[i];
    }
    const double total_coords =
        static_cast<double>(out.window_count) * static_cast<double>(hyper.n_vars) *
        static_cast<double>(hyper.horizon_len);
    out.crps_mean = crps_sum / total_coords;
    if (abs_obs == 0.0) {
        throw NumericError("evaluate_split: observations are identically zero");
    }
    out.crps_normalized = crps_sum / abs_obs;
    out.nmae = abs_err / abs_obs;
    const double per_step_div =
        static_cast<double>(out.window_count) * static_cast<double>(hyper.n_vars);
    for (auto& v : out.per_step_crps) v /= per_step_div;
    return out;
}

TrainResult train(ModelBundle& bundle, const SeriesDataset& dataset, AdamState& adam,
                  int64_t start_epoch, const EpochCallback& on_epoch,
                  const VariantConfig& variant) {
    const auto& hyper = bundle.hyper;
    hyper.validate();
    auto params = bundle.parameters();
    auto windows = make_windows(dataset, hyper.context_len, hyper.horizon_len,
                                hyper.train_stride, Split::Train);
    const int64_t d = hyper.latent_dim;
    const int64_t m = hyper.horizon_tokens();

    TrainResult result;
    result.best = bundle.clone();
    result.report.best_epoch = -1;
    result.report.best_val_crps = 0.0;

    for (int64_t epoch = start_epoch; epoch < hyper.epochs; ++epoch) {
        std::vector<size_t> order(windows.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(hyper.seed, 0x0e0c, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch;
        int64_t steps = 0;
        for (size_t pos = 0; pos < order.size(); pos += hyper.batch_size) {
            const size_t take = std::min<size_t>(hyper.batch_size, order.size() - pos);
            std::vector<WindowSpec> chunk(take);
            for (size_t i = 0; i < take; ++i) chunk[i] = windows[order[pos + i]];
            try {
                auto batch = assemble_batch(dataset, chunk, hyper.context_len,
                                           hyper.horizon_len, hyper.standardize);
                Rng noise_rng(derive_seed(hyper.seed, 0x70153, static_cast<uint64_t>(epoch),
                                          static_cast<uint64_t>(steps)));
                auto noise = Tensor::randn({static_cast<int64_t>(take), d, m}, noise_rng);
                auto fwd = forward_pass(bundle, batch, noise, variant);
                fwd.loss.total.backward();
                rec.grad_norm += clip_gradients(params, hyper.grad_clip);
                adam_step(adam, params);
                for (auto& p : params) p.tensor.zero_grad();

                rec.loss += fwd.loss.total.item();
                rec.nll += fwd.loss.nll;
                rec.kl += fwd.loss.kl;
                rec.rec += fwd.loss.rec;
                rec.u_norm += fwd.diagnostics.u_norm_mean;
                rec.k_spectral += fwd.diagnostics.k_spectral_max;
            } catch (const NumericError& e) {
                throw NumericError("train: epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(steps) + ": " + e.what());
            }
            ++steps;
        }
        if (steps > 0) {
            const double inv = 1.0 / static_cast<double>(steps);
            rec.loss *= inv;
            rec.nll *= inv;
            rec.kl *= inv;
            rec.rec *= inv;
            rec.u_norm *= inv;
            rec.k_spectral *= inv;
            rec.grad_norm *= inv;
        }

        auto val = evaluate_split(bundle, dataset, Split::Val, hyper.val_samples,
                                  derive_seed(hyper.seed, 0x7a1, static_cast<uint64_t>(epoch)), 0,
                                  variant);
        rec.val_crps = val.crps_normalized;
        if (result.report.best_epoch < 0 || rec.val_crps < result.report.best_val_crps) {
            result.report.best_epoch = epoch;
            result.report.best_val_crps = rec.val_crps;
            result.best = bundle.clone();
        }
        result.report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

// ---- checkpointing ----

namespace {

uint64_t fnv1a64(const unsigned char* data, size_t n) {
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json hyper_to_json(const Hyper& h) {
    json j;
    j["n_vars"] = h.n_vars;
    j["context_len"] = h.context_len;
    j["horizon_len"] = h.horizon_len;
    j["patch_size"] = h.patch_size;
    j["latent_dim"] = h.latent_dim;
    j["lr"] = h.lr;
    j["adam_beta1"] = h.adam_beta1;
    j["adam_beta2"] = h.adam_beta2;
    j["adam_eps"] = h.adam_eps;
    j["grad_clip"] = h.grad_clip;
    j["beta_kl"] = h.beta_kl;
    j["lambda_rec"] = h.lambda_rec;
    j["ridge_lambda"] = h.ridge_lambda;
    j["batch_size"] = h.batch_size;
    j["epochs"] = h.epochs;
    j["train_stride"] = h.train_stride;
    j["val_samples"] = h.val_samples;
    j["eval_samples"] = h.eval_samples;
    j["standardize"] = h.standardize;
    j["seed"] = h.seed;
    return j;
}

Hyper hyper_from_json(const json& j) {
    Hyper h;
    h.n_vars = j.at("n_vars");
    h.context_len = j.at("context_len");
    h.horizon_len = j.at("horizon_len");
    h.patch_size = j.at("patch_size");
    h.latent_dim = j.at("latent_dim");
    h.lr = j.at("lr");
    h.adam_beta1 = j.at("adam_beta1");
    h.adam_beta2 = j.at("adam_beta2");
    h.adam_eps = j.at("adam_eps");
    h.grad_clip = j.at("grad_clip");
    h.beta_kl = j.at("beta_kl");
    h.lambda_rec = j.at("lambda_rec");
    h.ridge_lambda = j.at("ridge_lambda");
    h.batch_size = j.at("batch_size");
    h.epochs = j.at("epochs");
    h.train_stride = j.at("train_stride");
    h.val_samples = j.at("val_samples");
    h.eval_samples = j.at("eval_samples");
    h.standardize = j.at("standardize");
    h.seed = j.at("seed");
    return h;
}

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::string& path_prefix,
                     const AdamState* adam, const TrainProgress* progress) {
    auto params = const_cast<ModelBundle&>(bundle).parameters();
    if (adam && adam->m.size() != params.size()) {
        throw ShapeError("save_checkpoint: optimizer state does not match parameters");
    }

    struct Entry {
        std::string name;
        Shape shape;
        const double* data;
        int64_t count;
    };
    std::vector<Entry> entries;
    for (const auto& p : params) {
        entries.push_back({p.name, p.tensor.shape(), p.tensor.data().data(), p.tensor.numel()});
    }
    if (adam) {
        for (size_t i = 0; i < params.size(); ++i) {
            const int64_t n = static_cast<int64_t>(adam->m[i].size());
            entries.push_back({"adam.m." + params[i].name, {n}, adam->m[i].data(), n});
            entries.push_back({"adam.v." + params[i].name, {n}, adam->v[i].data(), n});
        }
    }

    std::vector<unsigned char> blob;
    json tensors = json::array();
    int64_t offset = 0;
    for (const auto& e : entries) {
        const size_t bytes = e.count * sizeof(double);
        const size_t at = blob.size();
        blob.resize(at + bytes);
        std::memcpy(blob.data() + at, e.data, bytes);
        json t;
        t["name"] = e.name;
        t["shape"] = e.shape;
        t["offset"] = offset;
        t["count"] = e.count;
        t["fnv64"] = hex64(fnv1a64(blob.data() + at, bytes));
        tensors.push_back(t);
        offset += e.count;
    }

    json manifest;
    manifest["format_version"] = 1;
    manifest["hyper"] = hyper_to_json(bundle.hyper);
    manifest["tensors"] = tensors;
    manifest["blob_fnv64"] = hex64(fnv1a64(blob.data(), blob.size()));
    if (adam) {
        json a;
        a["lr"] = adam->lr;
        a["beta1"] = adam->beta1;
        a["beta2"] = adam->beta2;
        a["eps"] = adam->eps;
        a["step_count"] = adam->step_count;
        manifest["adam"] = a;
    }
    if (progress) {
        json p;
        p["next_epoch"] = progress->next_epoch;
        p["best_epoch"] = progress->best_epoch;
        p["best_val_crps"] = progress->best_val_crps;
        manifest["train_state"] = p;
    }

    std::ofstream mf(path_prefix + ".json");
    if (!mf) throw ParseError("save_checkpoint: cannot write '" + path_prefix + ".json'", 0);
    mf << manifest.dump(2) << "\n";
    std::ofstream bf(path_prefix + ".bin", std::ios::binary);
    if (!bf) throw ParseError("save_checkpoint: cannot write '" + path_prefix + ".bin'", 0);
    bf.write(reinterpret_cast<const char*>(blob.data()), blob.size());
}

LoadedCheckpoint load_checkpoint(const std::string& path_prefix) {
    std::ifstream mf(path_prefix + ".json");
    if (!mf) throw ParseError("load_checkpoint: cannot open '" + path_prefix + ".json'", 0);
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw ParseError(std::string("load_checkpoint: manifest parse failure: ") + e.what(), 0);
    }
    if (manifest.value("format_version", -1) != 1) {
        throw ParseError("load_checkpoint: unsupported format version", 0);
    }

    std::ifstream bf(path_prefix + ".bin", std::ios::binary);
    if (!bf) throw ParseError("load_checkpoint: cannot open '" + path_prefix + ".bin'", 0);
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bf)),
                                    std::istreambuf_iterator<char>());
    if (manifest.at("blob_fnv64").get<std::string>() != hex64(fnv1a64(blob.data(), blob.size()))) {
        throw ParseError("load_checkpoint: blob checksum mismatch (file corrupted?)", 0);
    }

    LoadedCheckpoint out;
    out.bundle = ModelBundle::init(hyper_from_json(manifest.at("hyper")));
    auto params = out.bundle.parameters();

    const bool has_adam = manifest.contains("adam");
    if (has_adam) {
        const auto& a = manifest.at("adam");
        out.adam = AdamState::init(params, a.at("lr"), a.at("beta1"), a.at("beta2"), a.at("eps"));
        out.adam->step_count = a.at("step_count");
    }
    if (manifest.contains("train_state")) {
        const auto& p = manifest.at("train_state");
        out.progress.next_epoch = p.at("next_epoch");
        out.progress.best_epoch = p.at("best_epoch");
        out.progress.best_val_crps = p.at("best_val_crps");
    }

    size_t param_cursor = 0;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name");
        const int64_t offset = t.at("offset");
        const int64_t count = t.at("count");
        if ((offset + count) * static_cast<int64_t>(sizeof(double)) >
            static_cast<int64_t>(blob.size())) {
            throw ParseError("load_checkpoint: blob truncated for tensor '" + name + "'", 0);
        }
        const unsigned char* src = blob.data() + offset * sizeof(double);
        if (t.at("fnv64").get<std::string>() != hex64(fnv1a64(src, count * sizeof(double)))) {
            throw ParseError("load_checkpoint: checksum mismatch for tensor '" + name + "'", 0);
        }
        if (name.rfind("adam.", 0) == 0) {
            if (!out.adam) throw ParseError("load_checkpoint: adam tensors without adam state", 0);
            const bool is_m = name.rfind("adam.m.", 0) == 0;
            const std::string pname = name.substr(is_m ? 7 : 7);
            size_t idx = params.size();
            for (size_t i = 0; i < params.size(); ++i) {
                if (params[i].name == pname) {
                    idx = i;
                    break;
                }
            }
            if (idx == params.size()) {
                throw ParseError("load_checkpoint: optimizer tensor for unknown parameter '" +
                                     pname + "'",
                                 0);
            }
            auto& dst = is_m ? out.adam->m[idx] : out.adam->v[idx];
            if (static_cast<int64_t>(dst.size()) != count) {
                throw ParseError("load_checkpoint: size mismatch for '" + name + "'", 0);
            }
            std::memcpy(dst.data(), src, count * sizeof(double));
        } else {
            if (param_cursor >= params.size() || params[param_cursor].name != name) {
                throw ParseError("load_checkpoint: unexpected tensor '" + name +
                                     "', registry has '" +
                                     (param_cursor < params.size() ? params[param_cursor].name
                                                                   : "<end>") +
                                     "'",
                                 0);
            }
            auto& p = params[param_cursor];
            if (Shape(t.at("shape").get<std::vector<int64_t>>()) != p.tensor.shape() ||
                count != p.tensor.numel()) {
                throw ParseError("load_checkpoint: shape mismatch for tensor '" + name + "'", 0);
            }
            std::memcpy(p.tensor.data_mut().data(), src, count * sizeof(double));
            ++param_cursor;
        }
    }
    if (param_cursor != params.size()) {
        throw ParseError("load_checkpoint: missing tensors, stopped at '" +
                             params[param_cursor].name + "'",
                         0);
    }
    return out;
}

}  // namespace koopkal
