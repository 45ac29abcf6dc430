#include "zsq/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "zsq/ops.hpp"
#include "zsq/rng.hpp"

namespace zsq::models {

namespace {

constexpr std::size_t kSide = 32;

struct PatternParams {
    double a, b, c, d, e, f;
};

// Intensity in [0,1] for pixel (x,y) of a class pattern. Parameters give
// per-sample variation (phase, period, centers) so the class is a pattern
// family, not a fixed image.
double pattern_intensity(int cls, double x, double y, const PatternParams& p) {
    auto stripe = [](double t, double period, double phase) {
        double s = std::sin(2.0 * M_PI * (t / period + phase));
        return s > 0.0 ? 1.0 : 0.0;
    };
    switch (cls) {
        case 0:  // horizontal bars
            return stripe(y, p.a, p.b);
        case 1:  // vertical bars
            return stripe(x, p.a, p.b);
        case 2:  // diagonal stripes
            return stripe(x + y, p.a, p.b);
        case 3: {  // concentric rings
            double r = std::hypot(x - p.c, y - p.d);
            return stripe(r, p.a, p.b);
        }
        case 4:  // checkerboard
            return (stripe(x, p.a, p.b) + stripe(y, p.a, p.e) == 1.0) ? 1.0 : 0.0;
        case 5: {  // filled disc
            double r = std::hypot(x - p.c, y - p.d);
            return r < p.a ? 1.0 : 0.0;
        }
        case 6: {  // linear gradient along a random direction
            double t = (x * std::cos(p.b) + y * std::sin(p.b)) / kSide + 0.5;
            return std::clamp(t, 0.0, 1.0);
        }
        case 7: {  // soft blobs
            double v = 0.0;
            v += std::exp(-(std::pow(x - p.a, 2) + std::pow(y - p.b, 2)) / (2 * 9.0));
            v += std::exp(-(std::pow(x - p.c, 2) + std::pow(y - p.d, 2)) / (2 * 9.0));
            v += std::exp(-(std::pow(x - p.e, 2) + std::pow(y - p.f, 2)) / (2 * 9.0));
            return std::clamp(v, 0.0, 1.0);
        }
        case 8: {  // plus / cross
            bool in = std::abs(x - p.c) < p.a || std::abs(y - p.d) < p.a;
            return in ? 1.0 : 0.0;
        }
        case 9: {  // dot grid
            double mx = std::fmod(x + p.b * p.a, p.a) - p.a / 2.0;
            double my = std::fmod(y + p.e * p.a, p.a) - p.a / 2.0;
            return std::hypot(mx, my) < 2.0 ? 1.0 : 0.0;
        }
        default:
            throw std::invalid_argument("pattern_intensity: unknown class");
    }
}

PatternParams draw_params(int cls, Rng& rng) {
    PatternParams p{};
    switch (cls) {
        case 0:
        case 1:
        case 2:
        case 3:
            p.a = rng.uniform(4.0, 9.0);   // period
            p.b = rng.uniform();           // phase
            p.c = rng.uniform(12.0, 20.0);
            p.d = rng.uniform(12.0, 20.0);
            break;
        case 4:
            p.a = rng.uniform(5.0, 10.0);
            p.b = rng.uniform();
            p.e = rng.uniform();
            break;
        case 5:
            p.a = rng.uniform(6.0, 12.0);  // radius
            p.c = rng.uniform(10.0, 22.0);
            p.d = rng.uniform(10.0, 22.0);
            break;
        case 6:
            p.b = rng.uniform(0.0, 2.0 * M_PI);
            break;
        case 7:
            p.a = rng.uniform(4.0, 28.0);
            p.b = rng.uniform(4.0, 28.0);
            p.c = rng.uniform(4.0, 28.0);
            p.d = rng.uniform(4.0, 28.0);
            p.e = rng.uniform(4.0, 28.0);
            p.f = rng.uniform(4.0, 28.0);
            break;
        case 8:
            p.a = rng.uniform(1.5, 3.0);  // half bar width
            p.c = rng.uniform(10.0, 22.0);
            p.d = rng.uniform(10.0, 22.0);
            break;
        case 9:
            p.a = rng.uniform(6.0, 10.0);  // spacing
            p.b = rng.uniform();
            p.e = rng.uniform();
            break;
        default:
            break;
    }
    return p;
}

void render_sample(int cls, Rng& rng, double* out /* 3*32*32 */) {
    PatternParams p = draw_params(cls, rng);
    // random foreground tint and dark background; color carries no class signal
    double fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
        fg[c] = rng.uniform(0.55, 1.0);
        bg[c] = rng.uniform(0.0, 0.35);
    }
    const double noise = 0.1;
    for (std::size_t y = 0; y < kSide; ++y)
        for (std::size_t x = 0; x < kSide; ++x) {
            double v = pattern_intensity(cls, static_cast<double>(x), static_cast<double>(y), p);
            for (int c = 0; c < 3; ++c) {
                double px = fg[c] * v + bg[c] * (1.0 - v) + noise * rng.normal();
                out[(static_cast<std::size_t>(c) * kSide + y) * kSide + x] =
                    std::clamp(px, 0.0, 1.0);
            }
        }
}

}  // namespace

ToyDataset generate_toy_dataset(std::uint64_t seed, int classes, int per_class_train,
                                int per_class_test) {
    if (classes < 2 || classes > 10)
        throw std::invalid_argument("generate_toy_dataset: classes must be in [2,10]");
    if (per_class_train < 1 || per_class_test < 1)
        throw std::invalid_argument("generate_toy_dataset: counts must be >= 1");

    ToyDataset ds;
    ds.classes = classes;
    ds.seed = seed;
    Rng rng(seed);

    auto gen_split = [&](int per_class, Tensor& images, std::vector<int>& labels) {
        const std::size_t n = static_cast<std::size_t>(per_class) * classes;
        images = Tensor({n, 3, kSide, kSide});
        labels.resize(n);
        std::size_t i = 0;
        for (int cls = 0; cls < classes; ++cls)
            for (int s = 0; s < per_class; ++s, ++i) {
                labels[i] = cls;
                render_sample(cls, rng, images.data() + i * 3 * kSide * kSide);
            }
    };
    gen_split(per_class_train, ds.train_images, ds.train_labels);
    gen_split(per_class_test, ds.test_images, ds.test_labels);

    // dataset-wide per-channel normalization from the train split
    const std::size_t ntr = ds.train_images.dim(0);
    const std::size_t hw = kSide * kSide;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < ntr; ++i) {
            const double* p = ds.train_images.data() + (i * 3 + c) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                sum += p[j];
                sq += p[j] * p[j];
            }
        }
        const double m = sum / static_cast<double>(ntr * hw);
        const double var = sq / static_cast<double>(ntr * hw) - m * m;
        ds.mean[c] = m;
        ds.stdev[c] = std::sqrt(std::max(var, 1e-12));
        ds.norm_lo[c] = (0.0 - m) / ds.stdev[c];
        ds.norm_hi[c] = (1.0 - m) / ds.stdev[c];
    }
    auto normalize = [&](Tensor& images) {
        const std::size_t n = images.dim(0);
        for (std::size_t i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) {
                double* p = images.data() + (i * 3 + c) * hw;
                for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - ds.mean[c]) / ds.stdev[c];
            }
    };
    normalize(ds.train_images);
    normalize(ds.test_images);
    return ds;
}

// ---------------------------------------------------------------------------
// Architectures

namespace {

int add_conv_bn_relu(nn::Graph& g, const std::string& name, int input, std::size_t in_c,
                     std::size_t out_c, std::size_t stride) {
    int c = g.add(name + ".conv", std::make_unique<nn::Conv2d>(in_c, out_c, 3, stride, 1, false),
                  {input});
    int b = g.add(name + ".bn", std::make_unique<nn::BatchNorm2d>(out_c), {c});
    int r = g.add(name + ".relu", std::make_unique<nn::ReLU>(), {b});
    return g.add(name + ".aq", std::make_unique<nn::ActQuant>(), {r});
}

nn::Graph build_tiny_resnet(int classes, std::size_t w) {
    nn::Graph g;
    int in_q = g.add("input.aq", std::make_unique<nn::ActQuant>(), {-1});
    int stem = add_conv_bn_relu(g, "stem", in_q, 3, w, 1);

    auto block = [&](const std::string& name, int input, std::size_t in_c, std::size_t out_c,
                     std::size_t stride) {
        int c1 = g.add(name + ".conv1",
                       std::make_unique<nn::Conv2d>(in_c, out_c, 3, stride, 1, false), {input});
        int b1 = g.add(name + ".bn1", std::make_unique<nn::BatchNorm2d>(out_c), {c1});
        int r1 = g.add(name + ".relu1", std::make_unique<nn::ReLU>(), {b1});
        int q1 = g.add(name + ".aq1", std::make_unique<nn::ActQuant>(), {r1});
        int c2 = g.add(name + ".conv2", std::make_unique<nn::Conv2d>(out_c, out_c, 3, 1, 1, false),
                       {q1});
        int b2 = g.add(name + ".bn2", std::make_unique<nn::BatchNorm2d>(out_c), {c2});
        int skip = input;
        if (in_c != out_c || stride != 1) {
            int sc = g.add(name + ".short.conv",
                           std::make_unique<nn::Conv2d>(in_c, out_c, 1, stride, 0, false), {input});
            skip = g.add(name + ".short.bn", std::make_unique<nn::BatchNorm2d>(out_c), {sc});
        }
        int a = g.add(name + ".add", std::make_unique<nn::Add>(), {b2, skip});
        int r = g.add(name + ".relu2", std::make_unique<nn::ReLU>(), {a});
        return g.add(name + ".aq2", std::make_unique<nn::ActQuant>(), {r});
    };

    int s1 = block("stage1", stem, w, w, 1);
    g.add_probe(s1);
    int s2 = block("stage2", s1, w, 2 * w, 2);
    g.add_probe(s2);
    int s3 = block("stage3", s2, 2 * w, 4 * w, 2);
    g.add_probe(s3);

    int gap = g.add("gap", std::make_unique<nn::GlobalAvgPool>(), {s3});
    int gq = g.add("gap.aq", std::make_unique<nn::ActQuant>(), {gap});
    int fc = g.add("fc", std::make_unique<nn::Linear>(4 * w, static_cast<std::size_t>(classes)),
                   {gq});
    g.set_output(fc);
    return g;
}

nn::Graph build_small_cnn(int classes, std::size_t w) {
    nn::Graph g;
    int in_q = g.add("input.aq", std::make_unique<nn::ActQuant>(), {-1});
    int b1 = add_conv_bn_relu(g, "block1", in_q, 3, w, 1);
    int b2 = add_conv_bn_relu(g, "block2", b1, w, w, 2);
    g.add_probe(b2);
    int b3 = add_conv_bn_relu(g, "block3", b2, w, 2 * w, 2);
    g.add_probe(b3);
    int b4 = add_conv_bn_relu(g, "block4", b3, 2 * w, 2 * w, 2);
    int gap = g.add("gap", std::make_unique<nn::GlobalAvgPool>(), {b4});
    int gq = g.add("gap.aq", std::make_unique<nn::ActQuant>(), {gap});
    int fc = g.add("fc", std::make_unique<nn::Linear>(2 * w, static_cast<std::size_t>(classes)),
                   {gq});
    g.set_output(fc);
    return g;
}

}  // namespace

nn::Graph build_model(const std::string& arch, int classes, std::size_t width) {
    if (classes < 2) throw std::invalid_argument("build_model: classes must be >= 2");
    if (arch == "tiny_resnet") return build_tiny_resnet(classes, width);
    if (arch == "small_cnn") return build_small_cnn(classes, width);
    throw std::invalid_argument("build_model: unknown arch '" + arch + "'");
}

void init_params(nn::Graph& g, std::uint64_t seed) {
    Rng rng(seed);
    for (nn::Param* p : g.params()) {
        if (!p->trainable || p->value.rank() < 2) continue;  // weights only
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < p->value.rank(); ++d) fan_in *= p->value.dim(d);
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = std * rng.normal();
    }
}

TracedForward forward_traced(nn::Graph& model, const Tensor& x, bool capture_bn,
                             nn::BnMode bn_mode) {
    if (capture_bn && x.dim(0) < 2)
        throw std::invalid_argument("forward_traced: batch must be >= 2 to capture BN stats");
    nn::ForwardOptions opt;
    opt.bn_mode = bn_mode;
    opt.capture_stats = capture_bn;
    opt.capture_features = true;
    auto res = model.forward(x, opt);
    return {std::move(res.logits), std::move(res.features), std::move(res.stats)};
}

Tensor slice_batch(const Tensor& t, std::size_t lo, std::size_t n) {
    std::vector<std::size_t> shape = t.shape();
    const std::size_t row = t.size() / t.dim(0);
    shape[0] = n;
    Tensor out(shape);
    std::copy(t.data() + lo * row, t.data() + (lo + n) * row, out.data());
    return out;
}

Tensor gather_batch(const Tensor& t, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> shape = t.shape();
    const std::size_t row = t.size() / t.dim(0);
    shape[0] = idx.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(t.data() + idx[i] * row, t.data() + (idx[i] + 1) * row, out.data() + i * row);
    return out;
}

double top1_accuracy(nn::Graph& model, const Tensor& images, const std::vector<int>& labels,
                     bool quant, std::size_t batch) {
    if (labels.empty()) throw std::invalid_argument("top1_accuracy: empty set");
    nn::ForwardOptions opt;
    opt.quant = quant;
    std::size_t correct = 0;
    const std::size_t n = images.dim(0);
    for (std::size_t lo = 0; lo < n; lo += batch) {
        const std::size_t bn = std::min(batch, n - lo);
        Tensor xb = slice_batch(images, lo, bn);
        Tensor logits = model.forward(xb, opt).logits;
        for (std::size_t i = 0; i < bn; ++i)
            if (ops::argmax_row(logits, i) == static_cast<std::size_t>(labels[lo + i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

TeacherReport train_teacher(nn::Graph& model, const ToyDataset& data,
                            const TeacherSchedule& sched) {
    if (data.train_labels.empty()) throw std::invalid_argument("train_teacher: empty train split");
    TeacherReport rep;
    Rng rng(sched.seed);

    auto params = model.params();
    std::vector<Tensor> velocity;
    for (nn::Param* p : params) velocity.emplace_back(p->value.shape());

    const std::size_t n = data.train_images.dim(0);
    const std::size_t classes = static_cast<std::size_t>(data.classes);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        double lr = sched.lr;
        if (epoch >= sched.epochs * 6 / 10) lr *= 0.1;
        if (epoch >= sched.epochs * 17 / 20) lr *= 0.1;
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t steps = 0;

        for (std::size_t lo = 0; lo < n; lo += sched.batch) {
            const std::size_t bn = std::min(sched.batch, n - lo);
            if (bn < 2) continue;  // batch-stat BN needs >= 2 samples
            std::vector<std::size_t> idx(order.begin() + lo, order.begin() + lo + bn);
            Tensor xb = gather_batch(data.train_images, idx);

            nn::ForwardOptions opt;
            opt.bn_mode = nn::BnMode::Batch;
            opt.update_running = true;
            Tensor logits = model.forward(xb, opt).logits;
            Tensor probs = ops::softmax(logits);

            double loss = 0.0;
            Tensor dlogits(logits.shape());
            for (std::size_t i = 0; i < bn; ++i) {
                const int y = data.train_labels[idx[i]];
                const double py = std::max(probs[i * classes + y], 1e-12);
                loss -= std::log(py);
                for (std::size_t j = 0; j < classes; ++j)
                    dlogits[i * classes + j] =
                        (probs[i * classes + j] - (static_cast<int>(j) == y ? 1.0 : 0.0)) /
                        static_cast<double>(bn);
            }
            loss /= static_cast<double>(bn);
            if (!std::isfinite(loss)) throw std::runtime_error("train_teacher: loss diverged");
            epoch_loss += loss;
            ++steps;

            model.zero_grads();
            nn::BackwardSeeds seeds;
            seeds.d_logits = dlogits;
            model.backward(seeds, true);

            for (std::size_t pi = 0; pi < params.size(); ++pi) {
                nn::Param* p = params[pi];
                if (!p->trainable) continue;
                for (std::size_t i = 0; i < p->value.size(); ++i) {
                    double g = p->grad[i];
                    if (!p->decay_exempt) g += sched.weight_decay * p->value[i];
                    velocity[pi][i] = sched.momentum * velocity[pi][i] + g;
                    p->value[i] -= lr * velocity[pi][i];
                }
            }
        }
        rep.epoch_losses.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    }
    rep.train_top1 = top1_accuracy(model, data.train_images, data.train_labels);
    rep.test_top1 = top1_accuracy(model, data.test_images, data.test_labels);
    return rep;
}

}  // namespace zsq::models
