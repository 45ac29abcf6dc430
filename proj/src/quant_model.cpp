#include "zsq/quant_model.hpp"

#include <algorithm>
#include <stdexcept>

namespace zsq::quant {

FakeQuantModel::FakeQuantModel(nn::Graph base, int weight_bits, int act_bits)
    : graph_(std::move(base)), weight_bits_(weight_bits), act_bits_(act_bits) {
    if (weight_bits < 2 || weight_bits > 8 || act_bits < 2 || act_bits > 8)
        throw std::invalid_argument("FakeQuantModel: bit-widths must be in [2,8]");
}

void FakeQuantModel::refresh_weight_params() {
    for (nn::Param* p : graph_.params()) {
        if (!p->quantizable) continue;
        double lo = p->value[0], hi = p->value[0];
        for (std::size_t i = 1; i < p->value.size(); ++i) {
            lo = std::min(lo, p->value[i]);
            hi = std::max(hi, p->value[i]);
        }
        if (hi - lo < 1e-8) {
            double mid = 0.5 * (lo + hi);
            lo = mid - 1e-8;
            hi = mid + 1e-8;
        }
        p->qp = compute_params(lo, hi, weight_bits_);
    }
}

void FakeQuantModel::refresh_activation_params() {
    for (int node : graph_.actquant_nodes()) {
        auto* aq = static_cast<nn::ActQuant*>(graph_.layer(node));
        if (!aq->observer.seen) continue;
        auto [lo, hi] = aq->observer.bounds();
        aq->qp = compute_params(lo, hi, act_bits_);
    }
}

void FakeQuantModel::calibrate(const std::vector<Tensor>& batches) {
    if (batches.empty()) throw std::invalid_argument("calibrate: need at least one batch");
    nn::ForwardOptions opt;
    opt.calibrate = true;
    for (const Tensor& b : batches) graph_.forward(b, opt);
    refresh_weight_params();
    refresh_activation_params();
    calibrated_ = true;
}

}  // namespace zsq::quant
