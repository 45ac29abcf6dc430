#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "zsq/quant.hpp"
#include "zsq/tensor.hpp"

namespace zsq::nn {

enum class BnMode { Eval, Batch };

struct ForwardOptions {
    BnMode bn_mode = BnMode::Eval;
    bool quant = false;             // fake-quantize weights and activation sites
    bool calibrate = false;         // activation sites record ranges, pass through
    bool capture_stats = false;     // collect BN layer statistics
    bool capture_features = false;  // collect probe features
    bool update_running = false;    // BN running-stat update
};

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool decay_exempt = false;   // biases and BN affine
    bool quantizable = false;    // conv/linear weights
    std::optional<quant::QuantParams> qp;

    void zero_grad() {
        grad = Tensor(value.shape());
    }
    // Weight tensor as seen by the forward pass.
    Tensor effective(bool quant_on) const {
        if (quant_on && qp) return quant::fake_quantize(value, *qp);
        return value;
    }
    // Accumulate with the straight-through mask when quantized.
    void accumulate(const Tensor& g, bool quant_on) {
        if (grad.empty()) grad = Tensor(value.shape());
        if (quant_on && qp) {
            for (std::size_t i = 0; i < g.size(); ++i)
                grad[i] += g[i] * quant::ste_mask(value[i], *qp);
        } else {
            grad += g;
        }
    }
};

// Per-BN-layer statistics captured during a traced forward.
struct LayerStatsRec {
    int node = -1;
    std::string name;
    Vec mu_stored, sigma_stored, mu_batch, sigma_batch;
};

struct FeatureEntry {
    int node = -1;
    std::string name;
    Tensor feat;  // N x C x H x W
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) = 0;
    // Returns one gradient per input; parameter grads accumulated when accum_params.
    virtual std::vector<Tensor> backward(const Tensor& dy, bool accum_params) = 0;
    virtual std::vector<Param*> params() { return {}; }
    virtual std::unique_ptr<Layer> clone() const = 0;
};

class Conv2d final : public Layer {
public:
    Conv2d(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t stride,
           std::size_t pad, bool bias);
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::vector<Param*> params() override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

    Param weight, bias_p;
    bool has_bias;
    std::size_t in_c, out_c, k, stride, pad;

private:
    Tensor x_cache_;
    bool quant_cache_ = false;
};

class Linear final : public Layer {
public:
    Linear(std::size_t in_f, std::size_t out_f);
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::vector<Param*> params() override { return {&weight, &bias}; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

    Param weight, bias;
    std::size_t in_f, out_f;

private:
    Tensor x_cache_;
    bool quant_cache_ = false;
};

class BatchNorm2d final : public Layer {
public:
    explicit BatchNorm2d(std::size_t channels);
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::vector<Param*> params() override {
        return {&gamma, &beta, &running_mean, &running_var};
    }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

    // Gradients seeded directly on the captured batch statistics (BNS loss).
    void inject_stat_grads(Vec d_mu, Vec d_sigma);

    LayerStatsRec capture() const;

    Param gamma, beta;
    Param running_mean, running_var;  // non-trainable buffers
    std::size_t channels;
    double eps_norm = 1e-5;  // inside the normalization
    double eps_std = 1e-8;   // inside the captured std
    double momentum = 0.1;

private:
    Tensor x_cache_;
    Vec mu_b_, var_b_;
    bool stats_valid_ = false;
    BnMode mode_cache_ = BnMode::Eval;
    Vec d_mu_inj_, d_sigma_inj_;
};

class ReLU final : public Layer {
public:
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }

private:
    std::vector<char> mask_;
};

class Add final : public Layer {
public:
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Add>(*this); }

private:
    std::size_t arity_ = 0;
};

class GlobalAvgPool final : public Layer {
public:
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

private:
    std::vector<std::size_t> in_shape_;
};

// Activation fake-quant site. Pass-through until calibrated and quant is on.
class ActQuant final : public Layer {
public:
    Tensor forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) override;
    std::vector<Tensor> backward(const Tensor& dy, bool accum_params) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ActQuant>(*this); }

    quant::RangeObserver observer;
    std::optional<quant::QuantParams> qp;

private:
    std::vector<char> mask_;
    bool quant_cache_ = false;
};

struct ForwardResult {
    Tensor logits;
    std::vector<FeatureEntry> features;
    std::vector<LayerStatsRec> stats;
};

struct BackwardSeeds {
    Tensor d_logits;
    std::map<int, Tensor> d_feature;             // probe node -> grad on its output
    std::map<int, std::pair<Vec, Vec>> d_bn;     // bn node -> (d_mu, d_sigma)
};

// Static feed-forward DAG. Node input -1 designates the graph input.
class Graph {
public:
    Graph() = default;
    Graph(const Graph& o);
    Graph& operator=(const Graph& o);
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    int add(const std::string& name, std::unique_ptr<Layer> layer, std::vector<int> inputs);
    void set_output(int node) { output_ = node; }
    void add_probe(int node) { probes_.push_back(node); }

    ForwardResult forward(const Tensor& x, const ForwardOptions& opt);
    // Returns dL/dx; requires a preceding forward.
    Tensor backward(const BackwardSeeds& seeds, bool accum_params);

    std::vector<Param*> params();
    void zero_grads();

    Layer* layer(int node) { return nodes_[node].layer.get(); }
    const std::string& node_name(int node) const { return nodes_[node].name; }
    int output_node() const { return output_; }
    const std::vector<int>& probe_nodes() const { return probes_; }
    const std::vector<int>& bn_nodes() const { return bn_nodes_; }
    const std::vector<int>& actquant_nodes() const { return actq_nodes_; }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct NodeDef {
        std::string name;
        std::unique_ptr<Layer> layer;
        std::vector<int> inputs;
    };
    std::vector<NodeDef> nodes_;
    int output_ = -1;
    std::vector<int> probes_;
    std::vector<int> bn_nodes_;
    std::vector<int> actq_nodes_;

    // forward state
    std::vector<Tensor> outs_;
    Tensor input_cache_;
    ForwardOptions opt_cache_;
};

}  // namespace zsq::nn
