#pragma once

#include "zsq/alignment.hpp"
#include "zsq/nn.hpp"
#include "zsq/tensor.hpp"

namespace zsq::promotion {

struct PromotionConfig {
    bool enabled = true;
    double epsilon = 0.01;  // l-infinity bound
    enum class Direction { KL, FA, KLplusFA };
    Direction direction = Direction::KLplusFA;
    double weight_original = 1.0;  // a
    double weight_promoted = 1.0;  // b

    void validate() const;
};

struct PerturbResult {
    Tensor delta;
    int nonfinite_samples = 0;  // samples whose gradient was unusable
};

// Single-step sign-of-gradient ascent on the chosen direction loss,
// delta = epsilon * sign(d loss / d x), computed against the student's
// quantized forward and the teacher in evaluation mode. Parameters of both
// graphs are left untouched. `labels` is accepted for interface parity; none
// of the direction losses consult it.
PerturbResult perturb(const Tensor& x_batch, const std::vector<int>& labels, nn::Graph& student,
                      nn::Graph& teacher, const PromotionConfig& cfg,
                      const alignment::AlignmentConfig& acfg);

struct WeightedBatch {
    Tensor original;
    Tensor promoted;
    double w_original = 0.5;  // a / (a + b)
    double w_promoted = 0.5;  // b / (a + b)
};

WeightedBatch promoted_batch(const Tensor& x_batch, const Tensor& delta,
                             const PromotionConfig& cfg);

}  // namespace zsq::promotion
