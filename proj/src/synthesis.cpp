#include "zsq/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "zsq/difficulty.hpp"
#include "zsq/errors.hpp"
#include "zsq/ops.hpp"
#include "zsq/rng.hpp"

namespace zsq::synthesis {

void SynthesisConfig::validate() const {
    if (total == 0) throw std::invalid_argument("synthesis: total must be positive");
    if (batch < 2) throw std::invalid_argument("synthesis: batch must be >= 2");
    if (iters < 1) throw std::invalid_argument("synthesis: iters must be >= 1");
    if (!(lr0 > 0.0)) throw std::invalid_argument("synthesis: lr0 must be positive");
    if (plateau_window < 1) throw std::invalid_argument("synthesis: plateau_window must be >= 1");
    if (!(lr_decay > 0.0) || lr_decay > 1.0)
        throw std::invalid_argument("synthesis: lr_decay must be in (0, 1]");
    if (beta < 0.0) throw std::invalid_argument("synthesis: beta must be >= 0");
    if (gamma < 0.0) throw std::invalid_argument("synthesis: gamma must be >= 0");
    if (classes < 2) throw std::invalid_argument("synthesis: classes must be >= 2");
}

double bns_loss(const std::vector<nn::LayerStatsRec>& stats,
                std::map<int, std::pair<Vec, Vec>>* d_bn) {
    if (stats.empty()) throw std::invalid_argument("bns_loss: no BN statistics captured");
    const double inv_l = 1.0 / static_cast<double>(stats.size());
    double total = 0.0;
    for (const auto& st : stats) {
        const std::size_t c = st.mu_batch.size();
        if (st.mu_stored.size() != c || st.sigma_stored.size() != c ||
            st.sigma_batch.size() != c)
            throw std::invalid_argument("bns_loss: statistic vector lengths differ");
        double mu_sq = 0.0, sg_sq = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            const double dm = st.mu_stored[i] - st.mu_batch[i];
            const double ds = st.sigma_stored[i] - st.sigma_batch[i];
            mu_sq += dm * dm;
            sg_sq += ds * ds;
        }
        const double mu_n = std::sqrt(mu_sq), sg_n = std::sqrt(sg_sq);
        total += inv_l * (mu_n + sg_n);
        if (d_bn) {
            Vec dmu(c, 0.0), dsg(c, 0.0);
            for (std::size_t i = 0; i < c; ++i) {
                if (mu_n > 1e-12)
                    dmu[i] = inv_l * (st.mu_batch[i] - st.mu_stored[i]) / mu_n;
                if (sg_n > 1e-12)
                    dsg[i] = inv_l * (st.sigma_batch[i] - st.sigma_stored[i]) / sg_n;
            }
            (*d_bn)[st.node] = {std::move(dmu), std::move(dsg)};
        }
    }
    return total;
}

double il_loss(const Tensor& logits, const std::vector<int>& labels, Tensor* d_logits) {
    return hil_loss(logits, labels, 0.0, d_logits, false);
}

double hil_loss(const Tensor& logits, const std::vector<int>& labels, double gamma,
                Tensor* d_logits, bool differentiate_weight) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n) throw std::invalid_argument("hil_loss: label count mismatch");
    Tensor p = ops::softmax(logits);
    if (d_logits) *d_logits = Tensor(logits.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw std::invalid_argument("hil_loss: label out of range");
        const double* pi = p.data() + i * c;
        const double py = pi[static_cast<std::size_t>(y)];
        const double ce = -std::log(std::max(py, 1e-12));
        const double d = 1.0 - py;
        const double w = gamma == 0.0 ? 1.0 : std::pow(d, gamma);
        total += w * ce;
        if (d_logits) {
            double coef = w;
            if (differentiate_weight && gamma > 0.0)
                coef += gamma * std::pow(std::max(d, 1e-12), gamma - 1.0) * ce * py;
            coef /= static_cast<double>(n);
            double* o = d_logits->data() + i * c;
            for (std::size_t j = 0; j < c; ++j)
                o[j] = coef * (pi[j] - (static_cast<int>(j) == y ? 1.0 : 0.0));
        }
    }
    return total / static_cast<double>(n);
}

double synthesis_objective(const models::TracedForward& traced, const std::vector<int>& labels,
                           double beta, double gamma, ObjectiveMode mode,
                           bool differentiate_weight, nn::BackwardSeeds* seeds) {
    std::map<int, std::pair<Vec, Vec>> d_bn;
    double loss = bns_loss(traced.stats, seeds ? &d_bn : nullptr);
    Tensor d_logits;
    const double g = mode == ObjectiveMode::FNL ? 0.0 : gamma;
    loss += beta * hil_loss(traced.logits, labels, g, seeds ? &d_logits : nullptr,
                            differentiate_weight);
    if (seeds) {
        seeds->d_bn = std::move(d_bn);
        d_logits *= beta;
        seeds->d_logits = std::move(d_logits);
    }
    return loss;
}

namespace {

void clip_channels(Tensor& x, const ClipRange& clip) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* p = x.data() + (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j)
                p[j] = std::clamp(p[j], clip.lo[ch], clip.hi[ch]);
        }
}

}  // namespace

BatchResult synthesize_batch(nn::Graph& teacher, const std::vector<int>& labels,
                             const SynthesisConfig& cfg, std::uint64_t batch_seed,
                             const ClipRange& clip) {
    cfg.validate();
    const std::size_t n = labels.size();
    if (n < 2) throw std::invalid_argument("synthesize_batch: need at least 2 samples");

    Rng rng(batch_seed);
    Tensor x({n, 3, 32, 32});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    if (cfg.clip_inputs) clip_channels(x, clip);

    nn::ForwardOptions fwd;
    fwd.bn_mode = nn::BnMode::Batch;
    fwd.capture_stats = true;

    Tensor m(x.shape()), v(x.shape());
    double lr = cfg.lr0;
    double best = std::numeric_limits<double>::infinity();
    int since_improve = 0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    BatchResult out;
    out.labels = labels;
    out.loss_trace.reserve(static_cast<std::size_t>(cfg.iters));

    for (int it = 0; it < cfg.iters; ++it) {
        auto res = teacher.forward(x, fwd);
        models::TracedForward traced{std::move(res.logits), std::move(res.features),
                                     std::move(res.stats)};
        nn::BackwardSeeds seeds;
        const double loss = synthesis_objective(traced, labels, cfg.beta, cfg.gamma, cfg.mode,
                                                cfg.differentiate_weight, &seeds);
        if (!std::isfinite(loss))
            throw DivergenceError("synthesis objective became non-finite");
        if (it == 0) out.bns_initial = bns_loss(traced.stats);
        out.loss_trace.push_back(loss);

        Tensor dx = teacher.backward(seeds, false);
        if (!ops::all_finite(dx))
            throw DivergenceError("synthesis gradient became non-finite");

        const double bc1 = 1.0 - std::pow(b1, it + 1);
        const double bc2 = 1.0 - std::pow(b2, it + 1);
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * dx[i];
            v[i] = b2 * v[i] + (1.0 - b2) * dx[i] * dx[i];
            x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
        if (cfg.clip_inputs) clip_channels(x, clip);

        if (loss < best) {
            best = loss;
            since_improve = 0;
        } else if (++since_improve >= cfg.plateau_window) {
            lr *= cfg.lr_decay;
            since_improve = 0;
        }
    }

    auto final_res = teacher.forward(x, fwd);
    out.bns_final = bns_loss(final_res.stats);
    out.images = std::move(x);
    out.d_teacher = difficulty::difficulties(teacher, out.images, labels);
    return out;
}

SyntheticDataset synthesize_dataset(nn::Graph& teacher, const SynthesisConfig& cfg,
                                    const ClipRange& clip) {
    cfg.validate();
    const std::size_t n = cfg.total;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i)
        labels[i] = static_cast<int>(i % static_cast<std::size_t>(cfg.classes));

    SyntheticDataset ds;
    ds.config = cfg;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(n);
    ds.d_teacher.resize(n);

    Rng label_rng(cfg.seed);
    std::size_t done = 0, batch_idx = 0;
    while (done < n) {
        const std::size_t bsz = std::min(cfg.batch, n - done);
        if (bsz < 2) {
            // fold a trailing singleton into nothing: regenerate it inside the
            // previous batch is not possible here, so reject the configuration
            throw std::invalid_argument("synthesize_dataset: trailing batch of size 1");
        }
        std::vector<int> blab(labels.begin() + static_cast<std::ptrdiff_t>(done),
                              labels.begin() + static_cast<std::ptrdiff_t>(done + bsz));
        label_rng.shuffle(blab);

        const std::uint64_t bseed = cfg.seed ^ (0x9e3779b97f4a7c15ull * (batch_idx + 1));
        BatchResult br;
        try {
            br = synthesize_batch(teacher, blab, cfg, bseed, clip);
        } catch (const DivergenceError&) {
            // one retry from a different starting point
            br = synthesize_batch(teacher, blab, cfg, bseed ^ 0x51caf00dull, clip);
        }

        std::copy(br.images.data(), br.images.data() + br.images.size(),
                  ds.images.data() + done * 3 * 32 * 32);
        std::copy(blab.begin(), blab.end(), ds.labels.begin() + static_cast<std::ptrdiff_t>(done));
        std::copy(br.d_teacher.begin(), br.d_teacher.end(),
                  ds.d_teacher.begin() + static_cast<std::ptrdiff_t>(done));
        ds.loss_traces.push_back(std::move(br.loss_trace));
        done += bsz;
        ++batch_idx;
    }
    return ds;
}

}  // namespace zsq::synthesis
