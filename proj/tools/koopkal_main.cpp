#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "koopkal/config.hpp"
#include "koopkal/selftest.hpp"
#include "koopkal/trainer.hpp"

namespace fs = std::filesystem;
using namespace koopkal;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct Cli {
    std::string config_path;
    RunConfig cfg;
    // override bookkeeping: CLI11 fills these only when the flag is present
    CLI::App* attach_common(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration file (key = value)");
        cmd->add_option("--seed", cfg.seed, "run seed");
        cmd->add_option("--out", cfg.out_dir, "output directory");
        cmd->add_option("--samples", cfg.samples, "sample paths per evaluated window");
        cmd->add_option("--data-kind", cfg.data_kind, "csv|synth_linear|synth_vanderpol|synth_sine");
        cmd->add_option("--csv-path", cfg.csv_path, "input CSV path");
        cmd->add_flag("--csv-has-timestamp", cfg.csv_has_timestamp,
                      "skip a leading timestamp column");
        cmd->add_option("--synth-state-dim", cfg.synth_state_dim, "synthetic state dimension");
        cmd->add_option("--synth-vars", cfg.synth_vars, "synthetic variable count");
        cmd->add_option("--synth-steps", cfg.synth_steps, "synthetic series length");
        cmd->add_option("--synth-noise", cfg.synth_noise, "synthetic noise scale");
        cmd->add_option("--synth-seed", cfg.synth_seed, "synthetic generator seed");
        cmd->add_option("--train-fraction", cfg.train_fraction, "chronological train fraction");
        cmd->add_option("--val-fraction", cfg.val_fraction, "chronological validation fraction");
        cmd->add_option("--context-len", cfg.context_len, "context length T");
        cmd->add_option("--horizon-len", cfg.horizon_len, "forecast horizon L");
        cmd->add_option("--patch-size", cfg.patch_size, "patch size s (0 = auto)");
        cmd->add_option("--latent-dim", cfg.latent_dim, "token dimension d");
        cmd->add_option("--lr", cfg.lr, "learning rate");
        cmd->add_option("--beta-kl", cfg.beta_kl, "weight of the KL term");
        cmd->add_option("--lambda-rec", cfg.lambda_rec, "weight of the reconstruction term");
        cmd->add_option("--ridge-lambda", cfg.ridge_lambda, "operator-fit ridge");
        cmd->add_option("--batch-size", cfg.batch_size, "training batch size");
        cmd->add_option("--epochs", cfg.epochs, "training epochs");
        cmd->add_option("--train-stride", cfg.train_stride, "training window stride");
        cmd->add_option("--val-samples", cfg.val_samples, "sample paths for validation scoring");
        cmd->add_option("--standardize", cfg.standardize,
                        "per-window instance standardization (true/false)");
        cmd->add_option("--grad-clip", cfg.grad_clip, "gradient norm clip");
        return cmd;
    }

    // config file first, then re-apply explicit command-line overrides
    void resolve(CLI::App* cmd) {
        if (!config_path.empty()) {
            RunConfig from_file = RunConfig::from_file(config_path);
            RunConfig overrides = cfg;  // values CLI11 already wrote
            cfg = from_file;
            for (const auto* opt : cmd->get_options()) {
                if (opt->count() == 0) continue;
                const std::string name = opt->get_name();
                if (name == "--seed") cfg.seed = overrides.seed;
                else if (name == "--out") cfg.out_dir = overrides.out_dir;
                else if (name == "--samples") cfg.samples = overrides.samples;
                else if (name == "--data-kind") cfg.data_kind = overrides.data_kind;
                else if (name == "--csv-path") cfg.csv_path = overrides.csv_path;
                else if (name == "--csv-has-timestamp") cfg.csv_has_timestamp = overrides.csv_has_timestamp;
                else if (name == "--synth-state-dim") cfg.synth_state_dim = overrides.synth_state_dim;
                else if (name == "--synth-vars") cfg.synth_vars = overrides.synth_vars;
                else if (name == "--synth-steps") cfg.synth_steps = overrides.synth_steps;
                else if (name == "--synth-noise") cfg.synth_noise = overrides.synth_noise;
                else if (name == "--synth-seed") cfg.synth_seed = overrides.synth_seed;
                else if (name == "--train-fraction") cfg.train_fraction = overrides.train_fraction;
                else if (name == "--val-fraction") cfg.val_fraction = overrides.val_fraction;
                else if (name == "--context-len") cfg.context_len = overrides.context_len;
                else if (name == "--horizon-len") cfg.horizon_len = overrides.horizon_len;
                else if (name == "--patch-size") cfg.patch_size = overrides.patch_size;
                else if (name == "--latent-dim") cfg.latent_dim = overrides.latent_dim;
                else if (name == "--lr") cfg.lr = overrides.lr;
                else if (name == "--beta-kl") cfg.beta_kl = overrides.beta_kl;
                else if (name == "--lambda-rec") cfg.lambda_rec = overrides.lambda_rec;
                else if (name == "--ridge-lambda") cfg.ridge_lambda = overrides.ridge_lambda;
                else if (name == "--batch-size") cfg.batch_size = overrides.batch_size;
                else if (name == "--epochs") cfg.epochs = overrides.epochs;
                else if (name == "--train-stride") cfg.train_stride = overrides.train_stride;
                else if (name == "--val-samples") cfg.val_samples = overrides.val_samples;
                else if (name == "--standardize") cfg.standardize = overrides.standardize;
                else if (name == "--grad-clip") cfg.grad_clip = overrides.grad_clip;
            }
        }
        cfg.validate();
    }
};

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << content;
}

std::string format_epoch_record(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["nll"] = r.nll;
    j["kl"] = r.kl;
    j["rec"] = r.rec;
    j["val_crps"] = r.val_crps;
    j["u_norm"] = r.u_norm;
    j["k_spectral"] = r.k_spectral;
    j["grad_norm"] = r.grad_norm;
    return j.dump();
}

int cmd_train(Cli& cli) {
    auto dataset = cli.cfg.load_dataset();
    auto hyper = cli.cfg.to_hyper(dataset.vars());
    fs::create_directories(cli.cfg.out_dir);
    write_text(fs::path(cli.cfg.out_dir) / "config_echo.txt", cli.cfg.echo());

    auto bundle = ModelBundle::init(hyper);
    auto params = bundle.parameters();
    auto adam = AdamState::init(params, hyper.lr, hyper.adam_beta1, hyper.adam_beta2,
                                hyper.adam_eps);

    std::ofstream log(fs::path(cli.cfg.out_dir) / "training_log.jsonl");
    auto result = train(bundle, dataset, adam, 0, [&](const EpochRecord& r) {
        const std::string line = format_epoch_record(r);
        log << line << "\n";
        log.flush();
        std::printf("%s\n", line.c_str());
    });

    TrainProgress progress{hyper.epochs, result.report.best_epoch, result.report.best_val_crps};
    save_checkpoint(bundle, (fs::path(cli.cfg.out_dir) / "checkpoint_last").string(), &adam,
                    &progress);
    save_checkpoint(result.best, (fs::path(cli.cfg.out_dir) / "checkpoint_best").string());
    std::printf("best epoch %lld (val crps %.6g); checkpoints written to %s\n",
                static_cast<long long>(result.report.best_epoch), result.report.best_val_crps,
                cli.cfg.out_dir.c_str());
    return kOk;
}

json metrics_to_json(const SplitMetrics& m) {
    json j;
    j["crps_mean"] = m.crps_mean;
    j["crps_normalized"] = m.crps_normalized;
    j["nmae"] = m.nmae;
    j["windows"] = m.window_count;
    j["per_step_crps"] = m.per_step_crps;
    return j;
}

int cmd_evaluate(Cli& cli, const std::string& checkpoint_prefix) {
    auto loaded = load_checkpoint(checkpoint_prefix);
    auto dataset = cli.cfg.load_dataset();
    auto cfg_hyper = cli.cfg.to_hyper(dataset.vars());
    const auto& h = loaded.bundle.hyper;
    if (h.n_vars != cfg_hyper.n_vars || h.context_len != cfg_hyper.context_len ||
        h.horizon_len != cfg_hyper.horizon_len || h.patch_size != cfg_hyper.patch_size ||
        h.latent_dim != cfg_hyper.latent_dim) {
        throw ConfigError(
            "evaluate: checkpoint hyperparameters (N=" + std::to_string(h.n_vars) +
            ", T=" + std::to_string(h.context_len) + ", L=" + std::to_string(h.horizon_len) +
            ", s=" + std::to_string(h.patch_size) + ", d=" + std::to_string(h.latent_dim) +
            ") do not match the run configuration");
    }
    json out;
    for (Split split : {Split::Val, Split::Test}) {
        auto metrics = evaluate_split(loaded.bundle, dataset, split, cli.cfg.samples,
                                      derive_seed(cli.cfg.seed, 0xe7a1));
        out[split_name(split)] = metrics_to_json(metrics);
        std::printf("%s: crps_mean=%.6g crps_normalized=%.6g nmae=%.6g over %lld windows\n",
                    split_name(split), metrics.crps_mean, metrics.crps_normalized, metrics.nmae,
                    static_cast<long long>(metrics.window_count));
    }
    fs::create_directories(cli.cfg.out_dir);
    write_text(fs::path(cli.cfg.out_dir) / "metrics.json", out.dump(2) + "\n");
    return kOk;
}

int cmd_forecast(Cli& cli, const std::string& checkpoint_prefix, int64_t window_index) {
    auto loaded = load_checkpoint(checkpoint_prefix);
    auto dataset = cli.cfg.load_dataset();
    const auto& h = loaded.bundle.hyper;
    if (dataset.vars() != h.n_vars) {
        throw ConfigError("forecast: dataset has " + std::to_string(dataset.vars()) +
                          " variables, checkpoint expects " + std::to_string(h.n_vars));
    }
    auto windows = make_windows(dataset, h.context_len, h.horizon_len, h.horizon_len, Split::Test);
    if (window_index < 0 || window_index >= static_cast<int64_t>(windows.size())) {
        throw ConfigError("forecast: window index " + std::to_string(window_index) +
                          " out of range [0, " + std::to_string(windows.size()) + ")");
    }
    auto fc = sample_forecast(loaded.bundle, dataset, windows[window_index], cli.cfg.samples,
                              derive_seed(cli.cfg.seed, 0xf07e));

    fs::create_directories(cli.cfg.out_dir);
    const fs::path out_path = fs::path(cli.cfg.out_dir) / "forecast.csv";
    std::ofstream out(out_path);
    out << "variable,step,observed,median,q025,q975";
    for (int64_t s = 0; s < fc.sample_count; ++s) out << ",sample" << s;
    out << "\n";
    const int64_t horizon = h.horizon_len;
    std::vector<double> column(fc.sample_count);
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << "," << buf;
    };
    for (int64_t var = 0; var < h.n_vars; ++var) {
        for (int64_t step = 0; step < horizon; ++step) {
            const int64_t c = var * horizon + step;
            for (int64_t s = 0; s < fc.sample_count; ++s) column[s] = fc.path(s, c);
            std::sort(column.begin(), column.end());
            auto quantile = [&](double q) {
                const double pos = q * static_cast<double>(fc.sample_count - 1);
                const int64_t lo = static_cast<int64_t>(pos);
                const int64_t hi = std::min<int64_t>(lo + 1, fc.sample_count - 1);
                const double frac = pos - static_cast<double>(lo);
                return column[lo] * (1.0 - frac) + column[hi] * frac;
            };
            out << dataset.variable_names[var] << "," << step;
            put(fc.observation[c]);
            put(quantile(0.5));
            put(quantile(0.025));
            put(quantile(0.975));
            for (int64_t s = 0; s < fc.sample_count; ++s) put(fc.path(s, c));
            out << "\n";
        }
    }
    std::printf("forecast for window %lld written to %s\n",
                static_cast<long long>(window_index), out_path.string().c_str());
    return kOk;
}

int cmd_selftest(uint64_t seed, bool corrupt_joseph) {
    SelftestOptions opt;
    opt.seed = seed;
    opt.corrupt_joseph = corrupt_joseph;
    auto report = run_selftest(opt);
    std::printf("%-28s %-6s %-12s %-12s %s\n", "suite", "status", "worst", "threshold", "time");
    for (const auto& row : report.rows) {
        std::printf("%-28s %-6s %-12.3e %-12.3e %.2fs\n", row.name.c_str(),
                    row.pass ? "pass" : "FAIL", row.worst, row.threshold, row.seconds);
    }
    return report.all_pass ? kOk : kRuntimeFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"probabilistic time-series forecaster"};
    app.require_subcommand(1);

    Cli train_cli, eval_cli, forecast_cli;
    std::string eval_checkpoint, forecast_checkpoint;
    int64_t window_index = 0;
    uint64_t selftest_seed = 0;
    bool corrupt_joseph = false;

    auto* train_cmd = train_cli.attach_common(app.add_subcommand("train", "train a model"));
    auto* eval_cmd = eval_cli.attach_common(
        app.add_subcommand("evaluate", "score a checkpoint on the val/test splits"));
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path prefix")->required();
    auto* forecast_cmd = forecast_cli.attach_common(
        app.add_subcommand("forecast", "emit quantiles and sample paths for one test window"));
    forecast_cmd->add_option("--checkpoint", forecast_checkpoint, "checkpoint path prefix")
        ->required();
    forecast_cmd->add_option("--window-index", window_index, "test window index");
    auto* selftest_cmd = app.add_subcommand("selftest", "run the built-in property suites");
    selftest_cmd->add_option("--seed", selftest_seed, "suite seed");
    selftest_cmd->add_flag("--inject-joseph-bug", corrupt_joseph)->group("");  // test hook

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        if (train_cmd->parsed()) {
            train_cli.resolve(train_cmd);
            return cmd_train(train_cli);
        }
        if (eval_cmd->parsed()) {
            eval_cli.resolve(eval_cmd);
            return cmd_evaluate(eval_cli, eval_checkpoint);
        }
        if (forecast_cmd->parsed()) {
            forecast_cli.resolve(forecast_cmd);
            return cmd_forecast(forecast_cli, forecast_checkpoint, window_index);
        }
        if (selftest_cmd->parsed()) {
            return cmd_selftest(selftest_seed, corrupt_joseph);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsageError;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return kUsageError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return kRuntimeFailure;
    }
    return kUsageError;
}
