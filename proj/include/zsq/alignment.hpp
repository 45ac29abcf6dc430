#pragma once

#include <map>
#include <optional>
#include <vector>

#include "zsq/nn.hpp"
#include "zsq/tensor.hpp"

namespace zsq::alignment {

struct AlignmentConfig {
    double lambda = 100.0;
    double alpha = 1.0;
    enum class Mode { Relaxed, Direct };
    Mode mode = Mode::Relaxed;
    bool normalize_attention = true;

    void validate() const;
};

// Channel attention of one sample of an (N, C, H, W) feature map:
// a(c) = sum over the spatial extent of f(c, ., .)^2, optionally scaled to
// unit L2 norm (an all-zero vector stays zero).
Vec attention_vector(const Tensor& f, std::size_t sample, bool normalize);

// Squared L2 distance between the two attention vectors of one sample.
double attention_metric(const Tensor& f_teacher, const Tensor& f_student, std::size_t sample,
                        const AlignmentConfig& cfg);

// Batch-mean KL(p_t || p_s) with a 1e-12 floor inside the log. Optional
// gradients w.r.t. either probability tensor.
double kl_term(const Tensor& probs_t, const Tensor& probs_s, Tensor* d_probs_s = nullptr,
               Tensor* d_probs_t = nullptr);

// Gradient seeds produced by fa_objective; probability-space gradients are
// chained through softmax by the caller.
struct FaSeeds {
    Tensor d_probs_s, d_probs_t;
    std::map<int, Tensor> d_feat_s, d_feat_t;  // probe node -> feature grad
};

struct FaBreakdown {
    double total = 0.0;
    double fa_term = 0.0;  // lambda-scaled feature part
    double kl = 0.0;       // unscaled KL
};

// Relaxed: lambda * mean over (sample, probe) of the attention metric
// + alpha * KL. Direct: the attention metric is replaced by a per-element
// squared feature distance.
FaBreakdown fa_objective(const std::vector<nn::FeatureEntry>& traces_t,
                         const std::vector<nn::FeatureEntry>& traces_s, const Tensor& probs_t,
                         const Tensor& probs_s, const AlignmentConfig& cfg,
                         FaSeeds* seeds = nullptr);

// Cosine between two flattened gradient collections; empty when either
// gradient is (numerically) zero.
std::optional<double> grad_cosine_similarity(const std::vector<Tensor>& grads_a,
                                             const std::vector<Tensor>& grads_b);

}  // namespace zsq::alignment
