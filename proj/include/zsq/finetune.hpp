#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zsq/alignment.hpp"
#include "zsq/nn.hpp"
#include "zsq/promotion.hpp"
#include "zsq/quant_model.hpp"
#include "zsq/synthesis.hpp"
#include "zsq/tensor.hpp"

namespace zsq::finetune {

struct FinetuneConfig {
    int epochs = 150;
    double lr0 = 1e-3;
    int lr_step = 100;  // epochs between lr decays
    double lr_decay = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 1e-4;
    std::size_t batch = 256;
    enum class Objective { HAST, BaselineCeKl };
    Objective objective = Objective::HAST;
    double alpha = 1.0;  // KL weight in the baseline objective
    promotion::PromotionConfig promotion;
    alignment::AlignmentConfig alignment;
    std::uint64_t seed = 0;
    bool augment = true;
    int grad_cosine_every = 0;  // iterations between FA/KL cosine probes; 0 = off

    void validate() const;
};

struct EpochMetrics {
    int epoch = 0;  // 0-based
    double lr = 0.0;
    double train_loss = 0.0;
    double fa_term = 0.0;
    double kl_term = 0.0;
    double test_top1 = 0.0;  // NaN when no test split was supplied
};

struct TrainState {
    quant::FakeQuantModel student;
    int epoch = 0;  // completed epochs
    std::vector<EpochMetrics> metrics;
    Vec grad_cosines;
    double best_top1 = 0.0;
    int best_epoch = -1;
    nn::Graph best_student;  // snapshot at the best test accuracy
    double final_top1 = 0.0;
    bool diverged = false;
    std::string divergence_note;
};

// SGD with (optional Nesterov) momentum; weight decay skips parameters
// flagged decay_exempt (BN affine, biases).
class SgdNesterov {
public:
    SgdNesterov(std::vector<nn::Param*> params, double momentum, double weight_decay,
                bool nesterov);
    void step(double lr);

private:
    std::vector<nn::Param*> params_;
    std::vector<Tensor> vel_;
    double mu_, wd_;
    bool nesterov_;
};

struct StepResult {
    double loss = 0.0;
    double fa_term = 0.0;
    double kl_term = 0.0;
    std::optional<double> grad_cosine;  // FA-vs-KL cosine, when probed
};

// One update on the relaxed-alignment objective: perturbation, weighted
// original/promoted pair, backward through the quantized student, optimizer
// step, weight-range refresh. Throws DivergenceError on non-finite loss.
StepResult hast_step(const Tensor& x_batch, const std::vector<int>& labels,
                     quant::FakeQuantModel& student, nn::Graph& teacher,
                     const FinetuneConfig& cfg, SgdNesterov& opt, double lr,
                     bool probe_cosine = false);

// One update on CE(p_s, y) + alpha * KL(p_t || p_s); honors the same
// promotion pairing.
StepResult baseline_step(const Tensor& x_batch, const std::vector<int>& labels,
                         quant::FakeQuantModel& student, nn::Graph& teacher,
                         const FinetuneConfig& cfg, SgdNesterov& opt, double lr);

TrainState finetune(const synthesis::SyntheticDataset& data, nn::Graph& teacher,
                    quant::FakeQuantModel student, const FinetuneConfig& cfg,
                    const Tensor* test_images = nullptr,
                    const std::vector<int>* test_labels = nullptr);

double evaluate(nn::Graph& model, const Tensor& images, const std::vector<int>& labels,
                bool quant = true);

}  // namespace zsq::finetune
