#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "zsq/nn.hpp"
#include "zsq/tensor.hpp"

namespace zsq::models {

// Procedurally generated 3x32x32 classification data. Regeneration from the
// same seed is byte-identical; classes are balanced.
struct ToyDataset {
    Tensor train_images, test_images;  // (N, 3, 32, 32), normalized
    std::vector<int> train_labels, test_labels;
    int classes = 0;
    std::uint64_t seed = 0;
    std::array<double, 3> mean{}, stdev{};  // raw-space normalization constants
    // valid range of normalized pixel values per channel
    std::array<double, 3> norm_lo{}, norm_hi{};
};

ToyDataset generate_toy_dataset(std::uint64_t seed, int classes = 10,
                                int per_class_train = 100, int per_class_test = 20);

// Supported archs: "tiny_resnet" (3 residual stages) and "small_cnn"
// (4 conv blocks). Both expose >=4 BN layers and >=2 probe sites.
nn::Graph build_model(const std::string& arch, int classes, std::size_t width = 8);

// Random (He-style) parameter init, deterministic in the seed.
void init_params(nn::Graph& g, std::uint64_t seed);

struct TracedForward {
    Tensor logits;
    std::vector<nn::FeatureEntry> features;
    std::vector<nn::LayerStatsRec> stats;
};

// Instrumented forward capturing probe features and, when capture_bn is set,
// per-BN batch statistics (requires batch >= 2).
TracedForward forward_traced(nn::Graph& model, const Tensor& x, bool capture_bn,
                             nn::BnMode bn_mode = nn::BnMode::Eval);

struct TeacherReport {
    double test_top1 = 0.0;
    double train_top1 = 0.0;
    std::vector<double> epoch_losses;
};

struct TeacherSchedule {
    int epochs = 30;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch = 64;
    std::uint64_t seed = 0;
};

TeacherReport train_teacher(nn::Graph& model, const ToyDataset& data,
                            const TeacherSchedule& sched);

// Top-1 accuracy in eval mode, quantization as configured on the graph.
double top1_accuracy(nn::Graph& model, const Tensor& images, const std::vector<int>& labels,
                     bool quant = false, std::size_t batch = 256);

// Slice rows [lo, lo+n) of an (N, ...) tensor.
Tensor slice_batch(const Tensor& t, std::size_t lo, std::size_t n);
Tensor gather_batch(const Tensor& t, const std::vector<std::size_t>& idx);

}  // namespace zsq::models
