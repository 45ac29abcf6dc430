#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "zsq/errors.hpp"
#include "zsq/models.hpp"
#include "zsq/ops.hpp"
#include "zsq/rng.hpp"
#include "zsq/synthesis.hpp"

using namespace zsq;
using namespace zsq::synthesis;

TEST_CASE("bns_loss: zero point, direct arithmetic, length check") {
    nn::LayerStatsRec eq;
    eq.mu_stored = {0.5, -1.0};
    eq.sigma_stored = {1.0, 2.0};
    eq.mu_batch = eq.mu_stored;
    eq.sigma_batch = eq.sigma_stored;
    CHECK(bns_loss({eq}) == doctest::Approx(0.0));

    nn::LayerStatsRec one;
    one.mu_stored = {1.0};
    one.mu_batch = {0.5};
    one.sigma_stored = {1.0};
    one.sigma_batch = {1.0};
    CHECK(bns_loss({one}) == doctest::Approx(0.5).epsilon(1e-15));

    // two layers average
    CHECK(bns_loss({one, eq}) == doctest::Approx(0.25).epsilon(1e-15));

    nn::LayerStatsRec bad = one;
    bad.sigma_batch = {1.0, 2.0};
    CHECK_THROWS_AS(bns_loss({bad}), std::invalid_argument);
    CHECK_THROWS_AS(bns_loss({}), std::invalid_argument);
}

TEST_CASE("il_loss: certainty, uniform, per-sample oracle") {
    Tensor sure({2, 4});
    sure[0] = 50.0;       // row 0, class 0
    sure[4 + 2] = 50.0;   // row 1, class 2
    CHECK(il_loss(sure, {0, 2}) == doctest::Approx(0.0).epsilon(1e-12));

    Tensor uni({3, 10});
    CHECK(il_loss(uni, {1, 5, 9}) == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    Rng rng(3);
    Tensor z({8, 6});
    std::vector<int> y(8);
    for (std::size_t i = 0; i < 8; ++i) {
        y[i] = static_cast<int>(rng.index(6));
        for (std::size_t j = 0; j < 6; ++j) z[i * 6 + j] = rng.uniform(-3.0, 3.0);
    }
    Tensor p = ops::softmax(z);
    double by_hand = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
        by_hand -= std::log(p[i * 6 + static_cast<std::size_t>(y[i])]);
    by_hand /= 8.0;
    CHECK(il_loss(z, y) == doctest::Approx(by_hand).epsilon(1e-12));
}

TEST_CASE("hil_loss: gamma=0 reduction, fixed point, easy-sample damping") {
    Rng rng(5);
    Tensor z({16, 10});
    std::vector<int> y(16);
    for (std::size_t i = 0; i < 16; ++i) {
        y[i] = static_cast<int>(rng.index(10));
        for (std::size_t j = 0; j < 10; ++j) z[i * 10 + j] = rng.uniform(-4.0, 4.0);
    }
    CHECK(std::abs(hil_loss(z, y, 0.0) - il_loss(z, y)) <= 1e-12);

    // one sample at p_y = 0.5 with gamma 2: 0.25 * ln 2
    Tensor half({1, 2});
    CHECK(hil_loss(half, {0}, 2.0) == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));

    // p_y = 0.99: weighted term below 1e-3 of the raw CE
    Tensor easy({1, 2});
    easy[0] = std::log(0.99);
    easy[1] = std::log(0.01);
    const double ce = -std::log(0.99);
    CHECK(hil_loss(easy, {0}, 2.0) < 1e-3 * ce);

    CHECK_THROWS_AS(hil_loss(z, {1}, 2.0), std::invalid_argument);
}

static void check_logit_grad(double gamma, bool diff_weight) {
    Rng rng(17);
    Tensor z({6, 5});
    std::vector<int> y(6);
    for (std::size_t i = 0; i < 6; ++i) {
        y[i] = static_cast<int>(rng.index(5));
        for (std::size_t j = 0; j < 5; ++j) z[i * 5 + j] = rng.uniform(-2.0, 2.0);
    }
    Tensor g;
    hil_loss(z, y, gamma, &g, diff_weight);
    const double h = 1e-6;
    for (std::size_t i = 0; i < z.size(); ++i) {
        Tensor zp = z, zm = z;
        zp[i] += h;
        zm[i] -= h;
        const double fd =
            (hil_loss(zp, y, gamma, nullptr, diff_weight) -
             hil_loss(zm, y, gamma, nullptr, diff_weight)) /
            (2.0 * h);
        const double denom = std::max(std::abs(fd), 1e-6);
        CHECK(std::abs(g[i] - fd) / denom < 1e-4);
    }
}

TEST_CASE("hil_loss gradient matches finite differences") {
    check_logit_grad(0.0, true);
    check_logit_grad(2.0, true);
    check_logit_grad(0.7, true);
}

TEST_CASE("detached-weight gradient is the plain CE gradient scaled by d^gamma") {
    // the detached variant treats d^gamma as a constant coefficient, so it
    // cannot match full finite differences; check the closed form instead
    Rng rng(19);
    Tensor z({4, 3});
    std::vector<int> y(4);
    for (std::size_t i = 0; i < 4; ++i) {
        y[i] = static_cast<int>(rng.index(3));
        for (std::size_t j = 0; j < 3; ++j) z[i * 3 + j] = rng.uniform(-2.0, 2.0);
    }
    Tensor g;
    hil_loss(z, y, 2.0, &g, false);
    Tensor p = ops::softmax(z);
    for (std::size_t i = 0; i < 4; ++i) {
        const double py = p[i * 3 + static_cast<std::size_t>(y[i])];
        const double w = (1.0 - py) * (1.0 - py);
        for (std::size_t j = 0; j < 3; ++j) {
            const double expect =
                w * (p[i * 3 + j] - (j == static_cast<std::size_t>(y[i]) ? 1.0 : 0.0)) / 4.0;
            CHECK(g[i * 3 + j] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

// conv -> bn -> relu -> gap graph; logits have 5 classes
static nn::Graph small_probe_graph() {
    nn::Graph g;
    int c = g.add("conv", std::make_unique<nn::Conv2d>(3, 5, 3, 1, 1, false), {-1});
    int b = g.add("bn", std::make_unique<nn::BatchNorm2d>(5), {c});
    int r = g.add("relu", std::make_unique<nn::ReLU>(), {b});
    int p = g.add("gap", std::make_unique<nn::GlobalAvgPool>(), {r});
    g.set_output(p);
    Rng wr(23);
    for (nn::Param* pa : g.params())
        if (pa->trainable && pa->value.rank() >= 2)
            for (std::size_t i = 0; i < pa->value.size(); ++i) pa->value[i] = 0.3 * wr.normal();
    // move the stored BN stats off their defaults so the match term is active
    auto* bn = static_cast<nn::BatchNorm2d*>(g.layer(b));
    for (std::size_t i = 0; i < 5; ++i) {
        bn->running_mean.value[i] = 0.2 * static_cast<double>(i) - 0.3;
        bn->running_var.value[i] = 0.5 + 0.2 * static_cast<double>(i);
    }
    return g;
}

static double objective_at(nn::Graph& g, const Tensor& x, const std::vector<int>& y,
                           double beta, double gamma, ObjectiveMode mode,
                           nn::BackwardSeeds* seeds) {
    nn::ForwardOptions opt;
    opt.bn_mode = nn::BnMode::Batch;
    opt.capture_stats = true;
    auto res = g.forward(x, opt);
    models::TracedForward tf{std::move(res.logits), {}, std::move(res.stats)};
    return synthesis_objective(tf, y, beta, gamma, mode, true, seeds);
}

TEST_CASE("synthesis objective: beta=0 equals bns, gamma=0 collapses modes") {
    auto g = small_probe_graph();
    Rng rng(29);
    Tensor x({3, 3, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    std::vector<int> y{0, 2, 4};

    nn::ForwardOptions opt;
    opt.bn_mode = nn::BnMode::Batch;
    opt.capture_stats = true;
    auto res = g.forward(x, opt);
    models::TracedForward tf{std::move(res.logits), {}, std::move(res.stats)};

    const double bare = bns_loss(tf.stats);
    CHECK(synthesis_objective(tf, y, 0.0, 2.0, ObjectiveMode::FNL) == doctest::Approx(bare));
    CHECK(synthesis_objective(tf, y, 0.0, 2.0, ObjectiveMode::HFNL) == doctest::Approx(bare));

    const double fnl = synthesis_objective(tf, y, 1.3, 0.0, ObjectiveMode::FNL);
    const double hfnl = synthesis_objective(tf, y, 1.3, 0.0, ObjectiveMode::HFNL);
    CHECK(std::abs(fnl - hfnl) <= 1e-12);
}

TEST_CASE("objective input-gradient matches central differences") {
    for (ObjectiveMode mode : {ObjectiveMode::FNL, ObjectiveMode::HFNL}) {
        auto g = small_probe_graph();
        Rng rng(31);
        Tensor x({3, 3, 8, 8});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
        std::vector<int> y{1, 3, 0};

        nn::BackwardSeeds seeds;
        objective_at(g, x, y, 0.8, 2.0, mode, &seeds);
        Tensor dx = g.backward(seeds, false);

        const double h = 1e-5;
        Rng pick(37);
        for (int k = 0; k < 24; ++k) {
            const std::size_t i = pick.index(x.size());
            Tensor xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fp = objective_at(g, xp, y, 0.8, 2.0, mode, nullptr);
            const double fm = objective_at(g, xm, y, 0.8, 2.0, mode, nullptr);
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max(std::abs(fd), 1e-5);
            CHECK(std::abs(dx[i] - fd) / denom < 1e-4);
        }
    }
}

// shared trained teacher for the generation tests
static nn::Graph& toy_teacher() {
    static nn::Graph g = [] {
        auto ds = models::generate_toy_dataset(61, 4, 40, 10);
        auto t = models::build_model("small_cnn", 4, 4);
        models::init_params(t, 62);
        models::TeacherSchedule sched;
        sched.epochs = 6;
        sched.lr = 0.05;
        sched.batch = 32;
        sched.seed = 63;
        models::train_teacher(t, ds, sched);
        return t;
    }();
    return g;
}

static ClipRange toy_clip() {
    return ClipRange{{-3.0, -3.0, -3.0}, {3.0, 3.0, 3.0}};
}

TEST_CASE("synthesize_batch improves the statistics match") {
    SynthesisConfig cfg;
    cfg.batch = 24;
    cfg.iters = 120;
    cfg.classes = 4;
    cfg.seed = 71;
    std::vector<int> labels;
    for (int i = 0; i < 24; ++i) labels.push_back(i % 4);

    auto br = synthesize_batch(toy_teacher(), labels, cfg, 72, toy_clip());
    CHECK(br.bns_final < br.bns_initial);
    CHECK(br.loss_trace.size() == 120);
    CHECK(br.loss_trace.back() < br.loss_trace.front());
    for (double v : br.loss_trace) CHECK(std::isfinite(v));
    for (double d : br.d_teacher) {
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
    }
    // inputs respect the clip range
    for (std::size_t i = 0; i < br.images.size(); ++i) {
        CHECK(br.images[i] >= -3.0);
        CHECK(br.images[i] <= 3.0);
    }

    // window-50 moving average trends downward
    const std::size_t w = 50;
    Vec smooth;
    for (std::size_t i = 0; i + w <= br.loss_trace.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = i; j < i + w; ++j) s += br.loss_trace[j];
        smooth.push_back(s / static_cast<double>(w));
    }
    // non-increasing trend, with slack for residual optimizer jitter
    const double slack = 5e-3 * std::max(1.0, std::abs(smooth.front()));
    for (std::size_t i = 0; i + 1 < smooth.size(); ++i)
        CHECK(smooth[i + 1] <= smooth[i] + slack);
}

TEST_CASE("hard-sample mode yields harder samples than the plain mode") {
    SynthesisConfig cfg;
    cfg.batch = 48;
    cfg.iters = 120;
    cfg.classes = 4;
    cfg.gamma = 2.0;
    std::vector<int> labels;
    for (int i = 0; i < 48; ++i) labels.push_back(i % 4);

    cfg.mode = ObjectiveMode::HFNL;
    auto hard = synthesize_batch(toy_teacher(), labels, cfg, 81, toy_clip());
    cfg.mode = ObjectiveMode::FNL;
    auto plain = synthesize_batch(toy_teacher(), labels, cfg, 81, toy_clip());

    double mh = 0.0, mp = 0.0;
    for (double d : hard.d_teacher) mh += d;
    for (double d : plain.d_teacher) mp += d;
    CHECK(mh / 48.0 > mp / 48.0);
}

TEST_CASE("non-finite teacher state raises a divergence error") {
    nn::Graph poisoned = toy_teacher();
    poisoned.params()[0]->value[0] = std::nan("");
    SynthesisConfig cfg;
    cfg.batch = 4;
    cfg.iters = 5;
    cfg.classes = 4;
    CHECK_THROWS_AS(synthesize_batch(poisoned, {0, 1, 2, 3}, cfg, 5, toy_clip()),
                    DivergenceError);
}

static std::size_t hash_tensor(const Tensor& t) {
    std::size_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint64_t bits;
        double v = t[i];
        std::memcpy(&bits, &v, 8);
        h = (h ^ bits) * 1099511628211ull;
    }
    return h;
}

TEST_CASE("synthesize_dataset: balance, determinism, ragged totals") {
    SynthesisConfig cfg;
    cfg.total = 32;
    cfg.batch = 16;
    cfg.iters = 15;
    cfg.classes = 4;
    cfg.seed = 91;

    auto a = synthesize_dataset(toy_teacher(), cfg, toy_clip());
    CHECK(a.images.dim(0) == 32);
    CHECK(a.labels.size() == 32);
    std::vector<int> counts(4, 0);
    for (int y : a.labels) counts[static_cast<std::size_t>(y)]++;
    for (int c : counts) CHECK(c == 8);

    auto b = synthesize_dataset(toy_teacher(), cfg, toy_clip());
    CHECK(hash_tensor(a.images) == hash_tensor(b.images));
    CHECK(a.labels == b.labels);

    cfg.total = 30;  // per-class counts may differ by at most one
    auto r = synthesize_dataset(toy_teacher(), cfg, toy_clip());
    std::vector<int> rc(4, 0);
    for (int y : r.labels) rc[static_cast<std::size_t>(y)]++;
    const int lo = *std::min_element(rc.begin(), rc.end());
    const int hi = *std::max_element(rc.begin(), rc.end());
    CHECK(hi - lo <= 1);

    SynthesisConfig bad = cfg;
    bad.lr0 = -1.0;
    CHECK_THROWS_AS(synthesize_dataset(toy_teacher(), bad, toy_clip()), std::invalid_argument);
}
