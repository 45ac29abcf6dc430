#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "zsq/models.hpp"
#include "zsq/nn.hpp"
#include "zsq/tensor.hpp"

namespace zsq::synthesis {

enum class ObjectiveMode { FNL, HFNL };

struct SynthesisConfig {
    std::size_t total = 5120;  // N
    std::size_t batch = 256;
    int iters = 1000;  // optimization steps per batch
    double lr0 = 0.5;
    int plateau_window = 50;
    double lr_decay = 0.1;
    double beta = 1.0;
    double gamma = 2.0;
    int classes = 10;
    std::uint64_t seed = 0;
    bool clip_inputs = true;
    ObjectiveMode mode = ObjectiveMode::HFNL;
    // d^gamma participates in differentiation (focal-style); flag for the
    // detached variant
    bool differentiate_weight = true;

    void validate() const;
};

struct SyntheticDataset {
    Tensor images;  // (N, 3, 32, 32)
    std::vector<int> labels;
    Vec d_teacher;                 // final difficulty under the teacher
    std::vector<Vec> loss_traces;  // one per batch
    SynthesisConfig config;
};

// Mean over BN layers of ||mu_stored - mu_batch|| + ||sigma_stored -
// sigma_batch||. Optional gradients w.r.t. the batch statistics, keyed by
// BN node, for seeding the graph backward.
double bns_loss(const std::vector<nn::LayerStatsRec>& stats,
                std::map<int, std::pair<Vec, Vec>>* d_bn = nullptr);

// Mean cross-entropy against assigned labels.
double il_loss(const Tensor& logits, const std::vector<int>& labels,
               Tensor* d_logits = nullptr);

// Difficulty-weighted cross-entropy: mean of d^gamma * CE.
double hil_loss(const Tensor& logits, const std::vector<int>& labels, double gamma,
                Tensor* d_logits = nullptr, bool differentiate_weight = true);

// FNL = bns + beta*il; HFNL = bns + beta*hil. Consumes one traced forward.
double synthesis_objective(const models::TracedForward& traced, const std::vector<int>& labels,
                           double beta, double gamma, ObjectiveMode mode,
                           bool differentiate_weight = true, nn::BackwardSeeds* seeds = nullptr);

struct BatchResult {
    Tensor images;
    std::vector<int> labels;
    Vec d_teacher;
    Vec loss_trace;
    double bns_initial = 0.0;
    double bns_final = 0.0;
};

// Per-channel clip range for the optimized inputs (normalized image range).
struct ClipRange {
    std::array<double, 3> lo{-10.0, -10.0, -10.0};
    std::array<double, 3> hi{10.0, 10.0, 10.0};
    static ClipRange from_dataset(const models::ToyDataset& ds) {
        return {ds.norm_lo, ds.norm_hi};
    }
};

BatchResult synthesize_batch(nn::Graph& teacher, const std::vector<int>& labels,
                             const SynthesisConfig& cfg, std::uint64_t batch_seed,
                             const ClipRange& clip);

SyntheticDataset synthesize_dataset(nn::Graph& teacher, const SynthesisConfig& cfg,
                                    const ClipRange& clip);

}  // namespace zsq::synthesis
