#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "koopkal/trainer.hpp"

using namespace koopkal;

namespace {

Hyper tiny_hyper() {
    Hyper h;
    h.n_vars = 2;
    h.context_len = 8;
    h.horizon_len = 8;
    h.patch_size = 4;
    h.latent_dim = 6;
    h.batch_size = 4;
    h.epochs = 0;
    h.seed = 5;
    return h;
}

WindowBatch random_batch(const Hyper& h, int64_t batch, Rng& rng) {
    WindowBatch b;
    b.context = Tensor::randn({batch, h.n_vars, h.context_len}, rng);
    b.target = Tensor::randn({batch, h.n_vars, h.horizon_len}, rng);
    compute_window_stats(b);
    return b;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("forward pass obeys the shape contract") {
    Hyper h;
    h.n_vars = 7;
    h.context_len = 96;
    h.horizon_len = 96;
    h.patch_size = 16;
    h.latent_dim = 32;
    h.seed = 1;
    CHECK(h.token_count() == 6);
    CHECK(h.horizon_tokens() == 6);
    auto bundle = ModelBundle::init(h);
    Rng rng(2);
    auto batch = random_batch(h, 2, rng);
    auto noise = Tensor::randn({2, 32, 6}, rng);
    auto out = forward_pass(bundle, batch, noise);
    CHECK(out.forecast.mu.shape() == Shape{2, 7, 96});
    CHECK(out.forecast.sigma.shape() == Shape{2, 7, 96});
    CHECK(std::isfinite(out.loss.total.item()));
}

TEST_CASE("forward pass is reproducible at a fixed seed") {
    auto h = tiny_hyper();
    auto b1 = ModelBundle::init(h);
    auto b2 = ModelBundle::init(h);
    Rng rng(3);
    auto batch = random_batch(h, 3, rng);
    auto zero_noise = Tensor::zeros({3, h.latent_dim, h.horizon_tokens()});
    const double l1 = forward_pass(b1, batch, zero_noise).loss.total.item();
    const double l2 = forward_pass(b2, batch, zero_noise).loss.total.item();
    CHECK(std::memcmp(&l1, &l2, 8) == 0);
}

TEST_CASE("hyper validation rejects inconsistent token geometry") {
    auto h = tiny_hyper();
    h.context_len = 10;  // not divisible by 4
    CHECK_THROWS_AS(h.validate(), ConfigError);
    h = tiny_hyper();
    h.patch_size = 8;  // single context token
    CHECK_THROWS_AS(h.validate(), ConfigError);
}

TEST_CASE("no parameter is dead on a random batch") {
    auto h = tiny_hyper();
    auto bundle = ModelBundle::init(h);
    Rng rng(7);
    auto batch = random_batch(h, 4, rng);
    auto noise = Tensor::randn({4, h.latent_dim, h.horizon_tokens()}, rng);
    auto out = forward_pass(bundle, batch, noise);
    out.loss.total.backward();
    for (auto& p : bundle.parameters()) {
        REQUIRE(p.tensor.has_grad());
        double max_abs = 0.0;
        for (double g : p.tensor.grad()) max_abs = std::max(max_abs, std::abs(g));
        CAPTURE(p.name);
        CHECK(max_abs > 0.0);
    }
}

TEST_CASE("full-pipeline gradients match finite differences for every parameter") {
    auto h = tiny_hyper();
    // a two-token context makes the snapshot Gram matrix rank-1; a larger
    // ridge keeps the solve conditioned enough for finite differences
    h.ridge_lambda = 1e-2;
    auto bundle = ModelBundle::init(h);
    auto params = bundle.parameters();
    // move off the init point: the fresh model has an exactly-zero residual
    // (one snapshot pair is fit exactly), which parks the integrator on
    // relu kinks where numerical differentiation is undefined
    Rng prng(77);
    for (auto& p : params) {
        for (auto& v : p.tensor.data_mut()) v += prng.normal(0.0, 0.05);
    }
    Rng rng(11);
    auto batch = random_batch(h, 2, rng);
    auto noise = Tensor::randn({2, h.latent_dim, h.horizon_tokens()}, rng);
    auto f = [&] { return forward_pass(bundle, batch, noise).loss.total; };
    // 1e-4 keeps the central difference out of the cancellation regime of
    // this deep composition
    auto report = finite_difference_check(f, params, 1e-4, 1e-3);
    CHECK(report.entries.size() == 46);
    for (const auto& e : report.entries) {
        CAPTURE(e.name);
        CHECK(e.max_rel_err <= 1e-3);
    }
}

TEST_CASE("ablation variants change the wiring") {
    auto h = tiny_hyper();
    auto bundle = ModelBundle::init(h);
    Rng rng(13);
    auto batch = random_batch(h, 2, rng);
    auto noise = Tensor::zeros({2, h.latent_dim, h.horizon_tokens()});

    const double full = forward_pass(bundle, batch, noise).loss.total.item();
    VariantConfig no_integ;
    no_integ.use_integrator = false;
    VariantConfig no_skip;
    no_skip.use_skip = false;
    VariantConfig glo_only;
    glo_only.op = VariantConfig::Operator::GlobalOnly;
    const double v1 = forward_pass(bundle, batch, noise, no_integ).loss.total.item();
    const double v2 = forward_pass(bundle, batch, noise, no_skip).loss.total.item();
    const double v3 = forward_pass(bundle, batch, noise, glo_only).loss.total.item();
    CHECK(v1 != full);
    CHECK(v2 != full);
    CHECK(v3 != full);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
    auto x = Tensor::from_vector({2}, {1.0, -2.0});
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<NamedParam> params{{"x", x}};
    auto adam = AdamState::init(params, 0.1, 0.9, 0.999, 1e-8);
    adam_step(adam, params);
    CHECK(x.data()[0] == 1.0);
    CHECK(x.data()[1] == -2.0);
    CHECK(adam.step_count == 1);
}

TEST_CASE("adam: first unit-gradient step moves by about minus lr") {
    auto x = Tensor::from_vector({1}, {0.5});
    x.set_requires_grad(true);
    x.zero_grad();
    x.node().grad[0] = 1.0;
    std::vector<NamedParam> params{{"x", x}};
    auto adam = AdamState::init(params, 0.1, 0.9, 0.999, 1e-8);
    adam_step(adam, params);
    CHECK(std::abs(x.data()[0] - (0.5 - 0.1)) < 1e-8);
}

TEST_CASE("adam: identical states and gradients update identically") {
    auto mk = [] {
        auto t = Tensor::from_vector({3}, {1.0, 2.0, 3.0});
        t.set_requires_grad(true);
        t.zero_grad();
        auto g = t.node().grad.data();
        g[0] = 0.3;
        g[1] = -0.2;
        g[2] = 0.9;
        return t;
    };
    auto a = mk();
    auto b = mk();
    std::vector<NamedParam> pa{{"a", a}}, pb{{"b", b}};
    auto sa = AdamState::init(pa, 0.05, 0.9, 0.999, 1e-8);
    auto sb = AdamState::init(pb, 0.05, 0.9, 0.999, 1e-8);
    adam_step(sa, pa);
    adam_step(sb, pb);
    for (int i = 0; i < 3; ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("adam: missing gradient is reported by name") {
    auto x = Tensor::from_vector({1}, {1.0});
    x.set_requires_grad(true);
    std::vector<NamedParam> params{{"lonely", x}};
    auto adam = AdamState::init(params, 0.1, 0.9, 0.999, 1e-8);
    CHECK_THROWS_WITH_AS(adam_step(adam, params), doctest::Contains("lonely"), ShapeError);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
    auto x = Tensor::from_vector({2}, {0.0, 0.0});
    x.set_requires_grad(true);
    x.zero_grad();
    x.node().grad[0] = 3.0;
    x.node().grad[1] = 4.0;
    std::vector<NamedParam> params{{"x", x}};
    const double before = clip_gradients(params, 1.0);
    CHECK(before == doctest::Approx(5.0));
    const double after = std::hypot(x.grad()[0], x.grad()[1]);
    CHECK(after == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero-epoch training returns the untouched bundle and empty report") {
    auto h = tiny_hyper();
    h.epochs = 0;
    auto data = synth_linear_gaussian(2, h.n_vars, 160, 3);
    auto bundle = ModelBundle::init(h);
    auto before = bundle.clone();
    auto params = bundle.parameters();
    auto adam = AdamState::init(params, h.lr, h.adam_beta1, h.adam_beta2, h.adam_eps);
    auto result = train(bundle, data.dataset, adam);
    CHECK(result.report.epochs.empty());
    CHECK(result.report.best_epoch == -1);
    auto pa = before.parameters();
    auto pb = result.best.parameters();
    for (size_t i = 0; i < pa.size(); ++i) {
        auto va = pa[i].tensor.data();
        auto vb = pb[i].tensor.data();
        for (size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
    }
}

TEST_CASE("short training run reduces the loss on a linear synthetic task") {
    Hyper h;
    h.n_vars = 2;
    h.context_len = 16;
    h.horizon_len = 8;
    h.patch_size = 4;
    h.latent_dim = 8;
    h.batch_size = 16;
    h.epochs = 50;
    h.train_stride = 4;
    h.val_samples = 8;
    h.seed = 17;
    auto data = synth_linear_gaussian(2, h.n_vars, 240, 23, 0.05);
    auto bundle = ModelBundle::init(h);
    auto params = bundle.parameters();
    auto adam = AdamState::init(params, h.lr, h.adam_beta1, h.adam_beta2, h.adam_eps);
    auto result = train(bundle, data.dataset, adam);
    REQUIRE(result.report.epochs.size() == 50);
    CHECK(result.report.epochs.back().loss < result.report.epochs.front().loss);
    CHECK(result.report.best_epoch >= 0);
    for (const auto& rec : result.report.epochs) {
        CHECK(std::isfinite(rec.u_norm));
        CHECK(std::isfinite(rec.k_spectral));
    }
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run exactly") {
    Hyper h;
    h.n_vars = 2;
    h.context_len = 8;
    h.horizon_len = 8;
    h.patch_size = 4;
    h.latent_dim = 6;
    h.batch_size = 8;
    h.epochs = 3;
    h.train_stride = 2;
    h.val_samples = 4;
    h.seed = 31;
    auto data = synth_linear_gaussian(2, h.n_vars, 200, 41);

    // uninterrupted
    auto full_bundle = ModelBundle::init(h);
    auto full_params = full_bundle.parameters();
    auto full_adam = AdamState::init(full_params, h.lr, h.adam_beta1, h.adam_beta2, h.adam_eps);
    auto full = train(full_bundle, data.dataset, full_adam);

    // two epochs, checkpoint, resume for the third
    auto h2 = h;
    h2.epochs = 2;
    auto part_bundle = ModelBundle::init(h2);
    auto part_params = part_bundle.parameters();
    auto part_adam = AdamState::init(part_params, h.lr, h.adam_beta1, h.adam_beta2, h.adam_eps);
    auto part = train(part_bundle, data.dataset, part_adam);
    (void)part;

    const std::string prefix = "/tmp/koopkal_resume_ckpt";
    TrainProgress progress{2, part.report.best_epoch, part.report.best_val_crps};
    save_checkpoint(part_bundle, prefix, &part_adam, &progress);
    auto loaded = load_checkpoint(prefix);
    REQUIRE(loaded.adam.has_value());
    loaded.bundle.hyper.epochs = 3;
    auto resumed = train(loaded.bundle, data.dataset, *loaded.adam, loaded.progress.next_epoch);

    REQUIRE(resumed.report.epochs.size() == 1);
    const double a = full.report.epochs[2].loss;
    const double b = resumed.report.epochs[0].loss;
    CHECK(std::memcmp(&a, &b, 8) == 0);
    std::remove((prefix + ".json").c_str());
    std::remove((prefix + ".bin").c_str());
}

TEST_CASE("checkpoint round trip is byte-identical and checksummed") {
    auto h = tiny_hyper();
    auto bundle = ModelBundle::init(h);
    const std::string p1 = "/tmp/koopkal_ckpt_a", p2 = "/tmp/koopkal_ckpt_b";
    save_checkpoint(bundle, p1);
    auto loaded = load_checkpoint(p1);
    save_checkpoint(loaded.bundle, p2);
    CHECK(read_file(p1 + ".json") == read_file(p2 + ".json"));
    CHECK(read_file(p1 + ".bin") == read_file(p2 + ".bin"));

    // corrupt one byte of the blob
    {
        std::fstream f(p1 + ".bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(17);
        char c;
        f.seekg(17);
        f.get(c);
        f.seekp(17);
        c = static_cast<char>(c ^ 0x40);
        f.put(c);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(p1), doctest::Contains("checksum"), ParseError);
    for (const auto& p : {p1, p2}) {
        std::remove((p + ".json").c_str());
        std::remove((p + ".bin").c_str());
    }
}

TEST_CASE("sample_forecast produces the requested paths deterministically") {
    auto h = tiny_hyper();
    auto data = synth_linear_gaussian(2, h.n_vars, 160, 51);
    auto bundle = ModelBundle::init(h);
    auto windows = make_windows(data.dataset, h.context_len, h.horizon_len, h.horizon_len,
                                Split::Test);
    REQUIRE(!windows.empty());
    auto fc1 = sample_forecast(bundle, data.dataset, windows[0], 16, 99);
    auto fc2 = sample_forecast(bundle, data.dataset, windows[0], 16, 99);
    CHECK(fc1.sample_count == 16);
    CHECK(fc1.coords == h.n_vars * h.horizon_len);
    for (size_t i = 0; i < fc1.paths.size(); ++i) {
        CHECK(std::memcmp(&fc1.paths[i], &fc2.paths[i], 8) == 0);
    }
    CHECK_THROWS_AS(sample_forecast(bundle, data.dataset, windows[0], 1, 99), ShapeError);
}

TEST_CASE("evaluate_split is deterministic and fills per-step scores") {
    auto h = tiny_hyper();
    h.val_samples = 8;
    auto data = synth_linear_gaussian(2, h.n_vars, 200, 61);
    auto bundle = ModelBundle::init(h);
    auto m1 = evaluate_split(bundle, data.dataset, Split::Test, 8, 7);
    auto m2 = evaluate_split(bundle, data.dataset, Split::Test, 8, 7);
    CHECK(std::memcmp(&m1.crps_mean, &m2.crps_mean, 8) == 0);
    CHECK(std::memcmp(&m1.nmae, &m2.nmae, 8) == 0);
    REQUIRE(m1.per_step_crps.size() == static_cast<size_t>(h.horizon_len));
    CHECK(m1.window_count > 0);
    for (double v : m1.per_step_crps) CHECK(v > 0.0);
}

TEST_SUITE_END();
