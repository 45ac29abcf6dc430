#include "zsq/promotion.hpp"

#include <cmath>
#include <stdexcept>

#include "zsq/ops.hpp"

namespace zsq::promotion {

void PromotionConfig::validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("promotion: epsilon must be >= 0");
    if (weight_original < 0.0 || weight_promoted < 0.0)
        throw std::invalid_argument("promotion: weights must be >= 0");
    if (weight_original + weight_promoted <= 0.0)
        throw std::invalid_argument("promotion: weights must not both be zero");
}

PerturbResult perturb(const Tensor& x_batch, const std::vector<int>& labels, nn::Graph& student,
                      nn::Graph& teacher, const PromotionConfig& cfg,
                      const alignment::AlignmentConfig& acfg) {
    (void)labels;
    cfg.validate();
    PerturbResult out;
    out.delta = Tensor(x_batch.shape());
    if (!cfg.enabled || cfg.epsilon == 0.0) return out;

    nn::ForwardOptions sopt;
    sopt.quant = true;
    sopt.bn_mode = nn::BnMode::Batch;
    sopt.capture_features = cfg.direction != PromotionConfig::Direction::KL;
    nn::ForwardOptions topt;
    topt.capture_features = sopt.capture_features;

    auto sres = student.forward(x_batch, sopt);
    auto tres = teacher.forward(x_batch, topt);
    Tensor ps = ops::softmax(sres.logits);
    Tensor pt = ops::softmax(tres.logits);

    nn::BackwardSeeds sseed, tseed;
    if (cfg.direction == PromotionConfig::Direction::KL) {
        Tensor dps, dpt;
        alignment::kl_term(pt, ps, &dps, &dpt);
        sseed.d_logits = ops::softmax_vjp(ps, dps);
        tseed.d_logits = ops::softmax_vjp(pt, dpt);
    } else {
        alignment::AlignmentConfig dir = acfg;
        if (cfg.direction == PromotionConfig::Direction::FA) dir.alpha = 0.0;
        alignment::FaSeeds fa;
        alignment::fa_objective(tres.features, sres.features, pt, ps, dir, &fa);
        sseed.d_logits = ops::softmax_vjp(ps, fa.d_probs_s);
        tseed.d_logits = ops::softmax_vjp(pt, fa.d_probs_t);
        sseed.d_feature = std::move(fa.d_feat_s);
        tseed.d_feature = std::move(fa.d_feat_t);
    }

    Tensor g = student.backward(sseed, false);
    g += teacher.backward(tseed, false);

    const std::size_t n = x_batch.dim(0);
    const std::size_t stride = x_batch.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * stride;
        bool ok = true;
        for (std::size_t k = 0; k < stride; ++k)
            if (!std::isfinite(gi[k])) {
                ok = false;
                break;
            }
        if (!ok) {
            ++out.nonfinite_samples;
            continue;  // delta stays zero for this sample
        }
        double* di = out.delta.data() + i * stride;
        for (std::size_t k = 0; k < stride; ++k)
            di[k] = gi[k] > 0.0 ? cfg.epsilon : (gi[k] < 0.0 ? -cfg.epsilon : 0.0);
    }
    return out;
}

WeightedBatch promoted_batch(const Tensor& x_batch, const Tensor& delta,
                             const PromotionConfig& cfg) {
    cfg.validate();
    if (!x_batch.same_shape(delta))
        throw std::invalid_argument("promoted_batch: shape mismatch");
    WeightedBatch out;
    out.original = x_batch;
    out.promoted = x_batch;
    out.promoted += delta;
    const double z = cfg.weight_original + cfg.weight_promoted;
    out.w_original = cfg.weight_original / z;
    out.w_promoted = cfg.weight_promoted / z;
    return out;
}

}  // namespace zsq::promotion
