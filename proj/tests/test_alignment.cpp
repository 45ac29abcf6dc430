#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "zsq/alignment.hpp"
#include "zsq/ops.hpp"
#include "zsq/rng.hpp"

using namespace zsq;
using namespace zsq::alignment;

static Tensor fill_random(const std::vector<std::size_t>& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

TEST_CASE("attention vector: arithmetic, zero guard, brute-force oracle") {
    Tensor f({1, 2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) f[i] = 1.0;       // channel 0
    for (std::size_t i = 4; i < 8; ++i) f[i] = 2.0;       // channel 1
    Vec raw = attention_vector(f, 0, false);
    CHECK(raw[0] == doctest::Approx(4.0));
    CHECK(raw[1] == doctest::Approx(16.0));

    Vec unit = attention_vector(f, 0, true);
    const double r = std::sqrt(4.0 * 4.0 + 16.0 * 16.0);
    CHECK(unit[0] == doctest::Approx(4.0 / r));
    CHECK(unit[1] == doctest::Approx(16.0 / r));

    Tensor z({1, 3, 2, 2});
    for (double v : attention_vector(z, 0, true)) CHECK(v == 0.0);

    Rng rng(3);
    Tensor g = fill_random({2, 8, 4, 4}, rng);
    for (std::size_t n = 0; n < 2; ++n) {
        Vec a = attention_vector(g, n, false);
        for (std::size_t c = 0; c < 8; ++c) {
            double s = 0.0;
            for (std::size_t w = 0; w < 4; ++w)
                for (std::size_t h = 0; h < 4; ++h) {
                    const double v = g[((n * 8 + c) * 4 + w) * 4 + h];
                    s += v * v;
                }
            CHECK(a[c] == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention metric: identity, scale invariance, direct arithmetic") {
    Rng rng(5);
    Tensor f = fill_random({2, 4, 3, 3}, rng);
    AlignmentConfig cfg;
    CHECK(attention_metric(f, f, 0, cfg) == doctest::Approx(0.0));

    // positive scaling of either side vanishes under normalization
    Tensor g = fill_random({2, 4, 3, 3}, rng);
    for (double k : {0.1, 2.0, 37.5}) {
        Tensor fk = f;
        for (std::size_t i = 0; i < fk.size(); ++i) fk[i] *= k;
        CHECK(std::abs(attention_metric(fk, g, 1, cfg) - attention_metric(f, g, 1, cfg)) <= 1e-9);
        CHECK(std::abs(attention_metric(g, fk, 1, cfg) - attention_metric(g, f, 1, cfg)) <= 1e-9);
    }

    // unnormalized [4,16] vs [4,12] -> 16
    AlignmentConfig un;
    un.normalize_attention = false;
    Tensor ft({1, 2, 2, 2}), fs({1, 2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        ft[i] = 1.0;
        fs[i] = 1.0;
    }
    for (std::size_t i = 4; i < 8; ++i) {
        ft[i] = 2.0;
        fs[i] = std::sqrt(3.0);
    }
    CHECK(attention_metric(ft, fs, 0, un) == doctest::Approx(16.0).epsilon(1e-12));

    Tensor bad({1, 4, 2, 2});
    CHECK_THROWS_AS(attention_metric(f, bad, 0, cfg), std::invalid_argument);
}

static Tensor random_simplex(std::size_t n, std::size_t c, Rng& rng) {
    Tensor p({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            p[i * c + j] = -std::log(std::max(rng.uniform(), 1e-300));
            s += p[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
    }
    return p;
}

TEST_CASE("kl term: identity, arithmetic, non-negativity sweep") {
    Rng rng(7);
    Tensor p = random_simplex(4, 6, rng);
    CHECK(kl_term(p, p) == doctest::Approx(0.0).epsilon(1e-12));

    Tensor pt({1, 2}, {1.0, 0.0});
    Tensor ps({1, 2}, {0.5, 0.5});
    CHECK(kl_term(pt, ps) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    for (int rep = 0; rep < 1000; ++rep) {
        Tensor a = random_simplex(1, 5, rng);
        Tensor b = random_simplex(1, 5, rng);
        CHECK(kl_term(a, b) >= -1e-12);
    }
}

TEST_CASE("kl gradient matches finite differences through softmax") {
    Rng rng(9);
    Tensor zt = fill_random({3, 5}, rng), zs = fill_random({3, 5}, rng);
    Tensor pt = ops::softmax(zt), ps = ops::softmax(zs);
    Tensor dps, dpt;
    kl_term(pt, ps, &dps, &dpt);
    Tensor dzs = ops::softmax_vjp(ps, dps);
    Tensor dzt = ops::softmax_vjp(pt, dpt);

    const double h = 1e-6;
    for (std::size_t i = 0; i < zs.size(); ++i) {
        Tensor zp = zs, zm = zs;
        zp[i] += h;
        zm[i] -= h;
        const double fd =
            (kl_term(pt, ops::softmax(zp)) - kl_term(pt, ops::softmax(zm))) / (2.0 * h);
        CHECK(std::abs(dzs[i] - fd) / std::max(std::abs(fd), 1e-6) < 1e-4);

        Tensor tp = zt, tm = zt;
        tp[i] += h;
        tm[i] -= h;
        const double fdt =
            (kl_term(ops::softmax(tp), ps) - kl_term(ops::softmax(tm), ps)) / (2.0 * h);
        CHECK(std::abs(dzt[i] - fdt) / std::max(std::abs(fdt), 1e-6) < 1e-4);
    }
}

static std::vector<nn::FeatureEntry> make_traces(const std::vector<Tensor>& feats,
                                                 int first_node = 3) {
    std::vector<nn::FeatureEntry> tr;
    for (std::size_t l = 0; l < feats.size(); ++l)
        tr.push_back({first_node + static_cast<int>(l), "probe", feats[l]});
    return tr;
}

TEST_CASE("fa objective: self-alignment zero and alpha removal") {
    Rng rng(11);
    std::vector<Tensor> feats{fill_random({3, 4, 5, 5}, rng), fill_random({3, 6, 3, 3}, rng)};
    Tensor p = ops::softmax(fill_random({3, 4}, rng));
    AlignmentConfig cfg;
    cfg.lambda = 50.0;

    auto self_aln = fa_objective(make_traces(feats), make_traces(feats), p, p, cfg);
    CHECK(self_aln.total == doctest::Approx(0.0).epsilon(1e-12));

    std::vector<Tensor> sf{fill_random({3, 4, 5, 5}, rng), fill_random({3, 6, 3, 3}, rng)};
    Tensor ps = ops::softmax(fill_random({3, 4}, rng));
    AlignmentConfig a0 = cfg;
    a0.alpha = 0.0;
    auto r = fa_objective(make_traces(feats), make_traces(sf), p, ps, a0);
    double mean_phi = 0.0;
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t n = 0; n < 3; ++n)
            mean_phi += attention_metric(feats[l], sf[l], n, a0);
    mean_phi /= 6.0;
    CHECK(r.total == doctest::Approx(a0.lambda * mean_phi).epsilon(1e-12));
    CHECK(r.total >= 0.0);

    // probe-set mismatch
    CHECK_THROWS_AS(fa_objective(make_traces(feats, 3), make_traces(sf, 4), p, ps, cfg),
                    std::invalid_argument);
}

static void fa_grad_check(AlignmentConfig::Mode mode, bool normalize) {
    Rng rng(13);
    std::vector<Tensor> tf{fill_random({2, 3, 4, 4}, rng), fill_random({2, 5, 2, 2}, rng)};
    std::vector<Tensor> sf{fill_random({2, 3, 4, 4}, rng), fill_random({2, 5, 2, 2}, rng)};
    Tensor zt = fill_random({2, 4}, rng), zs = fill_random({2, 4}, rng);
    AlignmentConfig cfg;
    cfg.lambda = 20.0;
    cfg.alpha = 1.5;
    cfg.mode = mode;
    cfg.normalize_attention = normalize;

    auto eval = [&](const std::vector<Tensor>& t, const std::vector<Tensor>& s, const Tensor& lt,
                    const Tensor& ls) {
        return fa_objective(make_traces(t), make_traces(s), ops::softmax(lt), ops::softmax(ls),
                            cfg)
            .total;
    };

    FaSeeds seeds;
    fa_objective(make_traces(tf), make_traces(sf), ops::softmax(zt), ops::softmax(zs), cfg,
                 &seeds);
    Tensor dzs = ops::softmax_vjp(ops::softmax(zs), seeds.d_probs_s);
    Tensor dzt = ops::softmax_vjp(ops::softmax(zt), seeds.d_probs_t);

    const double h = 1e-5;
    Rng pick(17);
    // student and teacher logits
    for (std::size_t i = 0; i < zs.size(); ++i) {
        Tensor a = zs, b = zs;
        a[i] += h;
        b[i] -= h;
        double fd = (eval(tf, sf, zt, a) - eval(tf, sf, zt, b)) / (2.0 * h);
        CHECK(std::abs(dzs[i] - fd) / std::max(std::abs(fd), 1e-5) < 1e-4);

        Tensor c = zt, d = zt;
        c[i] += h;
        d[i] -= h;
        fd = (eval(tf, sf, c, zs) - eval(tf, sf, d, zs)) / (2.0 * h);
        CHECK(std::abs(dzt[i] - fd) / std::max(std::abs(fd), 1e-5) < 1e-4);
    }
    // feature coordinates, both sides, both layers
    for (std::size_t l = 0; l < 2; ++l) {
        const int node = 3 + static_cast<int>(l);
        for (int k = 0; k < 12; ++k) {
            const std::size_t i = pick.index(sf[l].size());
            auto s2 = sf;
            Tensor a = sf[l], b = sf[l];
            a[i] += h;
            b[i] -= h;
            s2[l] = a;
            const double fp = eval(tf, s2, zt, zs);
            s2[l] = b;
            const double fm = eval(tf, s2, zt, zs);
            const double fd = (fp - fm) / (2.0 * h);
            CHECK(std::abs(seeds.d_feat_s[node][i] - fd) / std::max(std::abs(fd), 1e-5) < 1e-4);

            auto t2 = tf;
            Tensor ta = tf[l], tb = tf[l];
            ta[i] += h;
            tb[i] -= h;
            t2[l] = ta;
            const double gp = eval(t2, sf, zt, zs);
            t2[l] = tb;
            const double gm = eval(t2, sf, zt, zs);
            const double gfd = (gp - gm) / (2.0 * h);
            CHECK(std::abs(seeds.d_feat_t[node][i] - gfd) / std::max(std::abs(gfd), 1e-5) < 1e-4);
        }
    }
}

TEST_CASE("fa gradients match finite differences in every mode") {
    fa_grad_check(AlignmentConfig::Mode::Relaxed, true);
    fa_grad_check(AlignmentConfig::Mode::Relaxed, false);
    fa_grad_check(AlignmentConfig::Mode::Direct, true);
}

TEST_CASE("gradient cosine: self, antiparallel, degenerate") {
    Rng rng(19);
    std::vector<Tensor> g{fill_random({3, 3}, rng), fill_random({7}, rng)};
    std::vector<Tensor> neg;
    for (const auto& t : g) {
        Tensor m = t;
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = -m[i];
        neg.push_back(m);
    }
    CHECK(*grad_cosine_similarity(g, g) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*grad_cosine_similarity(g, neg) == doctest::Approx(-1.0).epsilon(1e-12));

    std::vector<Tensor> zero{Tensor({3, 3}), Tensor({7})};
    CHECK(!grad_cosine_similarity(g, zero).has_value());
    CHECK(!grad_cosine_similarity(zero, zero).has_value());
}
