#pragma once

#include <vector>

#include "zsq/nn.hpp"
#include "zsq/quant.hpp"
#include "zsq/tensor.hpp"

namespace zsq::quant {

// A network whose weights and activation sites pass through
// quantize-dequantize with straight-through gradients. Owns its graph copy;
// quantization engages only after calibration.
class FakeQuantModel {
public:
    FakeQuantModel(nn::Graph base, int weight_bits, int act_bits);

    nn::Graph& graph() { return graph_; }
    const nn::Graph& graph() const { return graph_; }
    int weight_bits() const { return weight_bits_; }
    int act_bits() const { return act_bits_; }
    bool calibrated() const { return calibrated_; }

    // Weight (l,u) from exact per-tensor min/max; activation (l,u) from an
    // EMA of per-batch min/max (decay 0.9). Requires >= 1 batch.
    void calibrate(const std::vector<Tensor>& batches);

    // Recompute weight QuantParams from the current latent weights; called
    // after each fine-tuning update.
    void refresh_weight_params();

    // Push the current activation observer ranges into QuantParams. Used
    // when activation ranges are not frozen after calibration.
    void refresh_activation_params();

    // Activation ranges freeze after calibration by default (overridable).
    bool freeze_activation_ranges = true;

    // Checkpoint restore re-engages quantization without a calibration pass.
    void set_calibrated(bool c) { calibrated_ = c; }

private:
    nn::Graph graph_;
    int weight_bits_;
    int act_bits_;
    bool calibrated_ = false;
};

}  // namespace zsq::quant
