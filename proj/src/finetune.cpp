#include "zsq/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "zsq/errors.hpp"
#include "zsq/models.hpp"
#include "zsq/ops.hpp"
#include "zsq/rng.hpp"

namespace zsq::finetune {

void FinetuneConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
    if (!(lr0 > 0.0)) throw std::invalid_argument("finetune: lr0 must be positive");
    if (lr_step < 1) throw std::invalid_argument("finetune: lr_step must be >= 1");
    if (batch < 2) throw std::invalid_argument("finetune: batch must be >= 2");
    if (alpha < 0.0) throw std::invalid_argument("finetune: alpha must be >= 0");
    promotion.validate();
    alignment.validate();
}

SgdNesterov::SgdNesterov(std::vector<nn::Param*> params, double momentum, double weight_decay,
                         bool nesterov)
    : params_(std::move(params)), mu_(momentum), wd_(weight_decay), nesterov_(nesterov) {
    params_.erase(std::remove_if(params_.begin(), params_.end(),
                                 [](nn::Param* p) { return !p->trainable; }),
                  params_.end());
    for (nn::Param* p : params_) vel_.emplace_back(p->value.shape());
}

void SgdNesterov::step(double lr) {
    for (std::size_t t = 0; t < params_.size(); ++t) {
        nn::Param* p = params_[t];
        if (p->grad.empty()) continue;
        Tensor& v = vel_[t];
        const double wd = p->decay_exempt ? 0.0 : wd_;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i] + wd * p->value[i];
            v[i] = mu_ * v[i] + g;
            const double d = nesterov_ ? g + mu_ * v[i] : v[i];
            p->value[i] -= lr * d;
        }
    }
}

namespace {

// trainable-parameter gradients, in graph order
std::vector<Tensor> snapshot_grads(nn::Graph& g) {
    std::vector<Tensor> out;
    for (nn::Param* p : g.params())
        if (p->trainable) out.push_back(p->grad.empty() ? Tensor(p->value.shape()) : p->grad);
    return out;
}

struct SubBatch {
    const Tensor* x;
    double w;
};

}  // namespace

StepResult hast_step(const Tensor& x_batch, const std::vector<int>& labels,
                     quant::FakeQuantModel& student, nn::Graph& teacher,
                     const FinetuneConfig& cfg, SgdNesterov& opt, double lr,
                     bool probe_cosine) {
    if (!student.calibrated()) throw std::invalid_argument("hast_step: student not calibrated");
    auto delta =
        promotion::perturb(x_batch, labels, student.graph(), teacher, cfg.promotion,
                           cfg.alignment);
    auto pair = promotion::promoted_batch(x_batch, delta.delta, cfg.promotion);

    nn::ForwardOptions sopt;
    sopt.quant = true;
    sopt.bn_mode = nn::BnMode::Batch;
    sopt.update_running = true;
    sopt.capture_features = true;
    sopt.calibrate = !student.freeze_activation_ranges;
    nn::ForwardOptions topt;
    topt.capture_features = true;

    student.graph().zero_grads();
    StepResult out;

    const SubBatch parts[2] = {{&pair.original, pair.w_original},
                               {&pair.promoted, pair.w_promoted}};
    bool first = true;
    for (const auto& part : parts) {
        if (part.w <= 0.0) continue;
        auto tres = teacher.forward(*part.x, topt);
        auto sres = student.graph().forward(*part.x, sopt);
        Tensor pt = ops::softmax(tres.logits);
        Tensor ps = ops::softmax(sres.logits);

        alignment::FaSeeds fa;
        auto breakdown =
            alignment::fa_objective(tres.features, sres.features, pt, ps, cfg.alignment, &fa);

        if (probe_cosine && first) {
            // FA-only and KL-only parameter gradients from the same forward
            alignment::AlignmentConfig fa_only = cfg.alignment;
            fa_only.alpha = 0.0;
            alignment::FaSeeds s1;
            alignment::fa_objective(tres.features, sres.features, pt, ps, fa_only, &s1);
            nn::BackwardSeeds b1;
            b1.d_logits = ops::softmax_vjp(ps, s1.d_probs_s);
            b1.d_feature = std::move(s1.d_feat_s);
            student.graph().zero_grads();
            student.graph().backward(b1, true);
            auto g_fa = snapshot_grads(student.graph());

            Tensor dps;
            alignment::kl_term(pt, ps, &dps);
            nn::BackwardSeeds b2;
            b2.d_logits = ops::softmax_vjp(ps, dps);
            student.graph().zero_grads();
            student.graph().backward(b2, true);
            auto g_kl = snapshot_grads(student.graph());

            out.grad_cosine = alignment::grad_cosine_similarity(g_fa, g_kl);
            student.graph().zero_grads();
        }
        first = false;

        nn::BackwardSeeds seeds;
        Tensor dz = ops::softmax_vjp(ps, fa.d_probs_s);
        dz *= part.w;
        seeds.d_logits = std::move(dz);
        for (auto& [node, g] : fa.d_feat_s) {
            g *= part.w;
            seeds.d_feature.emplace(node, std::move(g));
        }
        student.graph().backward(seeds, true);

        out.loss += part.w * breakdown.total;
        out.fa_term += part.w * breakdown.fa_term;
        out.kl_term += part.w * breakdown.kl;
    }

    if (!std::isfinite(out.loss))
        throw DivergenceError("fine-tune loss became non-finite");
    opt.step(lr);
    student.refresh_weight_params();
    if (!student.freeze_activation_ranges) student.refresh_activation_params();
    return out;
}

StepResult baseline_step(const Tensor& x_batch, const std::vector<int>& labels,
                         quant::FakeQuantModel& student, nn::Graph& teacher,
                         const FinetuneConfig& cfg, SgdNesterov& opt, double lr) {
    if (!student.calibrated())
        throw std::invalid_argument("baseline_step: student not calibrated");
    auto delta =
        promotion::perturb(x_batch, labels, student.graph(), teacher, cfg.promotion,
                           cfg.alignment);
    auto pair = promotion::promoted_batch(x_batch, delta.delta, cfg.promotion);

    nn::ForwardOptions sopt;
    sopt.quant = true;
    sopt.bn_mode = nn::BnMode::Batch;
    sopt.update_running = true;
    sopt.calibrate = !student.freeze_activation_ranges;

    student.graph().zero_grads();
    StepResult out;
    const std::size_t n = x_batch.dim(0);

    const SubBatch parts[2] = {{&pair.original, pair.w_original},
                               {&pair.promoted, pair.w_promoted}};
    for (const auto& part : parts) {
        if (part.w <= 0.0) continue;
        Tensor pt = ops::softmax(teacher.forward(*part.x, {}).logits);
        auto sres = student.graph().forward(*part.x, sopt);
        Tensor ps = ops::softmax(sres.logits);
        const std::size_t c = ps.dim(1);

        double ce = 0.0;
        Tensor dps_ce(ps.shape());
        for (std::size_t i = 0; i < n; ++i) {
            const int y = labels[i];
            if (y < 0 || static_cast<std::size_t>(y) >= c)
                throw std::invalid_argument("baseline_step: label out of range");
            const double py = ps[i * c + static_cast<std::size_t>(y)];
            ce -= std::log(std::max(py, 1e-12));
        }
        ce /= static_cast<double>(n);

        Tensor dps_kl;
        const double kl = alignment::kl_term(pt, ps, &dps_kl);

        // CE gradient straight on logits; KL chained through softmax
        Tensor dz(ps.shape());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j)
                dz[i * c + j] =
                    (ps[i * c + j] -
                     (j == static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0)) /
                    static_cast<double>(n);
        dps_kl *= cfg.alpha;
        Tensor dz_kl = ops::softmax_vjp(ps, dps_kl);
        dz += dz_kl;
        dz *= part.w;

        nn::BackwardSeeds seeds;
        seeds.d_logits = std::move(dz);
        student.graph().backward(seeds, true);

        out.loss += part.w * (ce + cfg.alpha * kl);
        out.kl_term += part.w * kl;
    }

    if (!std::isfinite(out.loss))
        throw DivergenceError("fine-tune loss became non-finite");
    opt.step(lr);
    student.refresh_weight_params();
    if (!student.freeze_activation_ranges) student.refresh_activation_params();
    return out;
}

namespace {

// pad-4 random crop plus horizontal flip, in normalized pixel space
void augment_batch(Tensor& x, Rng& rng) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int pad = 4;
    Tensor src = x;
    for (std::size_t i = 0; i < n; ++i) {
        const int dy = static_cast<int>(rng.index(2 * pad + 1)) - pad;
        const int dx = static_cast<int>(rng.index(2 * pad + 1)) - pad;
        const bool flip = rng.uniform() < 0.5;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* s = src.data() + (i * c + ch) * h * w;
            double* d = x.data() + (i * c + ch) * h * w;
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t q = 0; q < w; ++q) {
                    const std::size_t qq = flip ? w - 1 - q : q;
                    const int sr = static_cast<int>(r) + dy;
                    const int sq = static_cast<int>(qq) + dx;
                    d[r * w + q] = (sr >= 0 && sr < static_cast<int>(h) && sq >= 0 &&
                                    sq < static_cast<int>(w))
                                       ? s[static_cast<std::size_t>(sr) * w +
                                           static_cast<std::size_t>(sq)]
                                       : 0.0;
                }
        }
    }
}

}  // namespace

TrainState finetune(const synthesis::SyntheticDataset& data, nn::Graph& teacher,
                    quant::FakeQuantModel student, const FinetuneConfig& cfg,
                    const Tensor* test_images, const std::vector<int>* test_labels) {
    cfg.validate();
    const std::size_t n = data.labels.size();
    if (n == 0 || data.images.dim(0) != n)
        throw std::invalid_argument("finetune: empty or inconsistent dataset");
    if (!student.calibrated()) throw std::invalid_argument("finetune: student not calibrated");

    TrainState state{std::move(student), {}, {}, {}, {}, {}, {}, {}, {}, {}};
    SgdNesterov opt(state.student.graph().params(), cfg.momentum, cfg.weight_decay,
                    cfg.nesterov);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);

    long iter = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cfg.lr0 * std::pow(cfg.lr_decay, e / cfg.lr_step);
        rng.shuffle(order);
        double loss_sum = 0.0, fa_sum = 0.0, kl_sum = 0.0;
        std::size_t seen = 0;

        for (std::size_t lo = 0; lo + 2 <= n; lo += cfg.batch) {
            const std::size_t bsz = std::min(cfg.batch, n - lo);
            if (bsz < 2) break;
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                         order.begin() + static_cast<std::ptrdiff_t>(lo + bsz));
            Tensor xb = models::gather_batch(data.images, idx);
            std::vector<int> yb(bsz);
            for (std::size_t k = 0; k < bsz; ++k) yb[k] = data.labels[idx[k]];
            if (cfg.augment) augment_batch(xb, rng);

            StepResult sr;
            try {
                if (cfg.objective == FinetuneConfig::Objective::HAST) {
                    const bool probe = cfg.grad_cosine_every > 0 &&
                                       iter % cfg.grad_cosine_every == 0;
                    sr = hast_step(xb, yb, state.student, teacher, cfg, opt, lr, probe);
                    if (sr.grad_cosine) state.grad_cosines.push_back(*sr.grad_cosine);
                } else {
                    sr = baseline_step(xb, yb, state.student, teacher, cfg, opt, lr);
                }
            } catch (const DivergenceError& err) {
                state.diverged = true;
                state.divergence_note = err.what();
                return state;
            }
            loss_sum += sr.loss * static_cast<double>(bsz);
            fa_sum += sr.fa_term * static_cast<double>(bsz);
            kl_sum += sr.kl_term * static_cast<double>(bsz);
            seen += bsz;
            ++iter;
        }

        EpochMetrics m;
        m.epoch = e;
        m.lr = lr;
        m.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        m.fa_term = seen ? fa_sum / static_cast<double>(seen) : 0.0;
        m.kl_term = seen ? kl_sum / static_cast<double>(seen) : 0.0;
        if (test_images && test_labels) {
            m.test_top1 = evaluate(state.student.graph(), *test_images, *test_labels, true);
            if (m.test_top1 > state.best_top1 || state.best_epoch < 0) {
                state.best_top1 = m.test_top1;
                state.best_epoch = e;
                state.best_student = state.student.graph();
            }
            state.final_top1 = m.test_top1;
        } else {
            m.test_top1 = std::numeric_limits<double>::quiet_NaN();
        }
        state.metrics.push_back(m);
        state.epoch = e + 1;
    }
    return state;
}

double evaluate(nn::Graph& model, const Tensor& images, const std::vector<int>& labels,
                bool quant) {
    if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
    return models::top1_accuracy(model, images, labels, quant);
}

}  // namespace zsq::finetune
