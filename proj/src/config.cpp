#include "koopkal/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace koopkal {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: field '" + key + "' expects a boolean, got '" + v + "'");
}

int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        int64_t out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: field '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_uint(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        uint64_t out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: field '" + key + "' expects an unsigned integer, got '" + v +
                          "'");
    }
}

double parse_float(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: field '" + key + "' expects a number, got '" + v + "'");
    }
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    RunConfig cfg;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not 'key = value': '" + stripped + "'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));

        if (key == "data_kind") cfg.data_kind = value;
        else if (key == "csv_path") cfg.csv_path = value;
        else if (key == "csv_has_timestamp") cfg.csv_has_timestamp = parse_bool(value, key);
        else if (key == "synth_state_dim") cfg.synth_state_dim = parse_int(value, key);
        else if (key == "synth_vars") cfg.synth_vars = parse_int(value, key);
        else if (key == "synth_steps") cfg.synth_steps = parse_int(value, key);
        else if (key == "synth_noise") cfg.synth_noise = parse_float(value, key);
        else if (key == "synth_seed") cfg.synth_seed = parse_uint(value, key);
        else if (key == "train_fraction") cfg.train_fraction = parse_float(value, key);
        else if (key == "val_fraction") cfg.val_fraction = parse_float(value, key);
        else if (key == "context_len") cfg.context_len = parse_int(value, key);
        else if (key == "horizon_len") cfg.horizon_len = parse_int(value, key);
        else if (key == "patch_size") cfg.patch_size = parse_int(value, key);
        else if (key == "latent_dim") cfg.latent_dim = parse_int(value, key);
        else if (key == "lr") cfg.lr = parse_float(value, key);
        else if (key == "adam_beta1") cfg.adam_beta1 = parse_float(value, key);
        else if (key == "adam_beta2") cfg.adam_beta2 = parse_float(value, key);
        else if (key == "adam_eps") cfg.adam_eps = parse_float(value, key);
        else if (key == "grad_clip") cfg.grad_clip = parse_float(value, key);
        else if (key == "beta_kl") cfg.beta_kl = parse_float(value, key);
        else if (key == "lambda_rec") cfg.lambda_rec = parse_float(value, key);
        else if (key == "ridge_lambda") cfg.ridge_lambda = parse_float(value, key);
        else if (key == "batch_size") cfg.batch_size = parse_int(value, key);
        else if (key == "epochs") cfg.epochs = parse_int(value, key);
        else if (key == "train_stride") cfg.train_stride = parse_int(value, key);
        else if (key == "standardize") cfg.standardize = parse_bool(value, key);
        else if (key == "seed") cfg.seed = parse_uint(value, key);
        else if (key == "samples") cfg.samples = parse_int(value, key);
        else if (key == "val_samples") cfg.val_samples = parse_int(value, key);
        else if (key == "out_dir") cfg.out_dir = value;
        else throw ConfigError("config: unknown field '" + key + "' at line " +
                               std::to_string(line_no));
    }
    return cfg;
}

void RunConfig::validate() const {
    if (data_kind != "csv" && data_kind != "synth_linear" && data_kind != "synth_vanderpol" &&
        data_kind != "synth_sine") {
        throw ConfigError("config: data_kind must be csv|synth_linear|synth_vanderpol|synth_sine, "
                          "got '" + data_kind + "'");
    }
    if (data_kind == "csv" && csv_path.empty()) {
        throw ConfigError("config: csv_path is required when data_kind = csv");
    }
    if (data_kind != "csv") {
        if (synth_vars <= 0 || synth_steps <= 0 || synth_state_dim <= 0) {
            throw ConfigError("config: synth_vars, synth_steps, synth_state_dim must be positive");
        }
        if (synth_noise < 0) throw ConfigError("config: synth_noise must be nonnegative");
    }
    if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction >= 1.0) {
        throw ConfigError("config: fractions must satisfy 0 < train, 0 <= val, train+val < 1");
    }
    if (context_len <= 0 || horizon_len <= 0) {
        throw ConfigError("config: context_len and horizon_len must be positive");
    }
    if (patch_size < 0) throw ConfigError("config: patch_size must be nonnegative (0 = auto)");
    if (samples < 2 || val_samples < 2) {
        throw ConfigError("config: samples and val_samples must be at least 2");
    }
    if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
    // the rest is validated by Hyper::validate at model construction
}

Hyper RunConfig::to_hyper(int64_t n_vars) const {
    Hyper h;
    h.n_vars = n_vars;
    h.context_len = context_len;
    h.horizon_len = horizon_len;
    h.patch_size = patch_size > 0 ? patch_size : (context_len >= 96 ? 16 : 8);
    h.latent_dim = latent_dim;
    h.lr = lr;
    h.adam_beta1 = adam_beta1;
    h.adam_beta2 = adam_beta2;
    h.adam_eps = adam_eps;
    h.grad_clip = grad_clip;
    h.beta_kl = beta_kl;
    h.lambda_rec = lambda_rec;
    h.ridge_lambda = ridge_lambda;
    h.batch_size = batch_size;
    h.epochs = epochs;
    h.train_stride = train_stride;
    h.val_samples = val_samples;
    h.eval_samples = samples;
    h.standardize = standardize;
    h.seed = seed;
    h.validate();
    return h;
}

SeriesDataset RunConfig::load_dataset() const {
    SeriesDataset ds;
    if (data_kind == "csv") {
        ds = load_csv(csv_path, csv_has_timestamp);
    } else if (data_kind == "synth_linear") {
        ds = synth_linear_gaussian(synth_state_dim, synth_vars, synth_steps, synth_seed,
                                   synth_noise)
                 .dataset;
    } else if (data_kind == "synth_vanderpol") {
        ds = synth_nonlinear(NonlinearKind::VanDerPol, synth_vars, synth_steps, synth_noise,
                             synth_seed);
    } else {
        ds = synth_nonlinear(NonlinearKind::SineMixtureDrift, synth_vars, synth_steps,
                             synth_noise, synth_seed);
    }
    ds.train_fraction = train_fraction;
    ds.val_fraction = val_fraction;
    return ds;
}

std::string RunConfig::echo() const {
    std::ostringstream os;
    char buf[40];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "data_kind = " << data_kind << "\n";
    os << "csv_path = " << csv_path << "\n";
    os << "csv_has_timestamp = " << (csv_has_timestamp ? "true" : "false") << "\n";
    os << "synth_state_dim = " << synth_state_dim << "\n";
    os << "synth_vars = " << synth_vars << "\n";
    os << "synth_steps = " << synth_steps << "\n";
    os << "synth_noise = " << num(synth_noise) << "\n";
    os << "synth_seed = " << synth_seed << "\n";
    os << "train_fraction = " << num(train_fraction) << "\n";
    os << "val_fraction = " << num(val_fraction) << "\n";
    os << "context_len = " << context_len << "\n";
    os << "horizon_len = " << horizon_len << "\n";
    os << "patch_size = " << patch_size << "\n";
    os << "latent_dim = " << latent_dim << "\n";
    os << "lr = " << num(lr) << "\n";
    os << "adam_beta1 = " << num(adam_beta1) << "\n";
    os << "adam_beta2 = " << num(adam_beta2) << "\n";
    os << "adam_eps = " << num(adam_eps) << "\n";
    os << "grad_clip = " << num(grad_clip) << "\n";
    os << "beta_kl = " << num(beta_kl) << "\n";
    os << "lambda_rec = " << num(lambda_rec) << "\n";
    os << "ridge_lambda = " << num(ridge_lambda) << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "epochs = " << epochs << "\n";
    os << "train_stride = " << train_stride << "\n";
    os << "standardize = " << (standardize ? "true" : "false") << "\n";
    os << "seed = " << seed << "\n";
    os << "samples = " << samples << "\n";
    os << "val_samples = " << val_samples << "\n";
    os << "out_dir = " << out_dir << "\n";
    return os.str();
}

}  // namespace koopkal
