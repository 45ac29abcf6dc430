#include "zsq/nn.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace zsq::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::size_t in_c_, std::size_t out_c_, std::size_t k_, std::size_t stride_,
               std::size_t pad_, bool bias_)
    : has_bias(bias_), in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
    weight.name = "weight";
    weight.value = Tensor({out_c, in_c, k, k});
    weight.quantizable = true;
    if (has_bias) {
        bias_p.name = "bias";
        bias_p.value = Tensor({out_c});
        bias_p.decay_exempt = true;
    }
}

std::vector<Param*> Conv2d::params() {
    std::vector<Param*> p{&weight};
    if (has_bias) p.push_back(&bias_p);
    return p;
}

static void im2col(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t ho, std::size_t wo, MatRM& col) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    col.setZero(static_cast<Eigen::Index>(n * ho * wo), static_cast<Eigen::Index>(c * k * k));
    const double* xd = x.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t hi = 0; hi < ho; ++hi)
            for (std::size_t wi = 0; wi < wo; ++wi) {
                const std::size_t row = (ni * ho + hi) * wo + wi;
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const long ih = static_cast<long>(hi * stride + kh) - static_cast<long>(pad);
                        if (ih < 0 || ih >= static_cast<long>(h)) continue;
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const long iw =
                                static_cast<long>(wi * stride + kw) - static_cast<long>(pad);
                            if (iw < 0 || iw >= static_cast<long>(w)) continue;
                            col(row, (ci * k + kh) * k + kw) =
                                xd[((ni * c + ci) * h + ih) * w + iw];
                        }
                    }
            }
}

static void col2im(const MatRM& col, std::size_t k, std::size_t stride, std::size_t pad,
                   std::size_t ho, std::size_t wo, Tensor& dx) {
    const std::size_t n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    double* xd = dx.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t hi = 0; hi < ho; ++hi)
            for (std::size_t wi = 0; wi < wo; ++wi) {
                const std::size_t row = (ni * ho + hi) * wo + wi;
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const long ih = static_cast<long>(hi * stride + kh) - static_cast<long>(pad);
                        if (ih < 0 || ih >= static_cast<long>(h)) continue;
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const long iw =
                                static_cast<long>(wi * stride + kw) - static_cast<long>(pad);
                            if (iw < 0 || iw >= static_cast<long>(w)) continue;
                            xd[((ni * c + ci) * h + ih) * w + iw] +=
                                col(row, (ci * k + kh) * k + kw);
                        }
                    }
            }
}

Tensor Conv2d::forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) {
    const Tensor& x = *in.at(0);
    if (x.rank() != 4 || x.dim(1) != in_c)
        throw std::invalid_argument("Conv2d: bad input shape");
    x_cache_ = x;
    quant_cache_ = opt.quant;
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;

    MatRM col;
    im2col(x, k, stride, pad, ho, wo, col);
    Tensor weff = weight.effective(opt.quant);
    CMapRM wmat(weff.data(), static_cast<Eigen::Index>(out_c),
                static_cast<Eigen::Index>(in_c * k * k));
    MatRM out_mat = col * wmat.transpose();  // (N*Ho*Wo, Co)

    Tensor y({n, out_c, ho, wo});
    double* yd = y.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t co = 0; co < out_c; ++co)
            for (std::size_t hi = 0; hi < ho; ++hi)
                for (std::size_t wi = 0; wi < wo; ++wi) {
                    double v = out_mat((ni * ho + hi) * wo + wi, co);
                    if (has_bias) v += bias_p.value[co];
                    yd[((ni * out_c + co) * ho + hi) * wo + wi] = v;
                }
    return y;
}

std::vector<Tensor> Conv2d::backward(const Tensor& dy, bool accum_params) {
    const Tensor& x = x_cache_;
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = dy.dim(2), wo = dy.dim(3);

    MatRM dy_mat(static_cast<Eigen::Index>(n * ho * wo), static_cast<Eigen::Index>(out_c));
    const double* dyd = dy.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t co = 0; co < out_c; ++co)
            for (std::size_t hi = 0; hi < ho; ++hi)
                for (std::size_t wi = 0; wi < wo; ++wi)
                    dy_mat((ni * ho + hi) * wo + wi, co) =
                        dyd[((ni * out_c + co) * ho + hi) * wo + wi];

    MatRM col;
    im2col(x, k, stride, pad, ho, wo, col);

    if (accum_params) {
        MatRM dw = dy_mat.transpose() * col;  // (Co, Ci*k*k)
        Tensor dwt({out_c, in_c, k, k});
        std::copy(dw.data(), dw.data() + dw.size(), dwt.data());
        weight.accumulate(dwt, quant_cache_);
        if (has_bias) {
            Tensor db({out_c});
            for (Eigen::Index r = 0; r < dy_mat.rows(); ++r)
                for (std::size_t co = 0; co < out_c; ++co) db[co] += dy_mat(r, co);
            bias_p.accumulate(db, false);
        }
    }

    Tensor weff = weight.effective(quant_cache_);
    CMapRM wmat(weff.data(), static_cast<Eigen::Index>(out_c),
                static_cast<Eigen::Index>(in_c * k * k));
    MatRM dcol = dy_mat * wmat;  // (N*Ho*Wo, Ci*k*k)
    Tensor dx({n, in_c, h, w});
    col2im(dcol, k, stride, pad, ho, wo, dx);
    return {dx};
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::size_t in_f_, std::size_t out_f_) : in_f(in_f_), out_f(out_f_) {
    weight.name = "weight";
    weight.value = Tensor({out_f, in_f});
    weight.quantizable = true;
    bias.name = "bias";
    bias.value = Tensor({out_f});
    bias.decay_exempt = true;
}

Tensor Linear::forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) {
    const Tensor& x = *in.at(0);
    if (x.rank() != 2 || x.dim(1) != in_f) throw std::invalid_argument("Linear: bad input shape");
    x_cache_ = x;
    quant_cache_ = opt.quant;
    const std::size_t n = x.dim(0);
    Tensor weff = weight.effective(opt.quant);
    CMapRM xm(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_f));
    CMapRM wm(weff.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
    Tensor y({n, out_f});
    MapRM ym(y.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out_f));
    ym = xm * wm.transpose();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t o = 0; o < out_f; ++o) y[ni * out_f + o] += bias.value[o];
    return y;
}

std::vector<Tensor> Linear::backward(const Tensor& dy, bool accum_params) {
    const std::size_t n = x_cache_.dim(0);
    CMapRM dym(dy.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out_f));
    CMapRM xm(x_cache_.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_f));
    if (accum_params) {
        MatRM dw = dym.transpose() * xm;
        Tensor dwt({out_f, in_f});
        std::copy(dw.data(), dw.data() + dw.size(), dwt.data());
        weight.accumulate(dwt, quant_cache_);
        Tensor db({out_f});
        for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t o = 0; o < out_f; ++o) db[o] += dy[ni * out_f + o];
        bias.accumulate(db, false);
    }
    Tensor weff = weight.effective(quant_cache_);
    CMapRM wm(weff.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
    Tensor dx({n, in_f});
    MapRM dxm(dx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_f));
    dxm = dym * wm;
    return {dx};
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::size_t channels_) : channels(channels_) {
    gamma.name = "gamma";
    gamma.value = Tensor({channels});
    gamma.value.fill(1.0);
    gamma.decay_exempt = true;
    beta.name = "beta";
    beta.value = Tensor({channels});
    beta.decay_exempt = true;
    running_mean.name = "running_mean";
    running_mean.value = Tensor({channels});
    running_mean.trainable = false;
    running_var.name = "running_var";
    running_var.value = Tensor({channels});
    running_var.value.fill(1.0);
    running_var.trainable = false;
}

Tensor BatchNorm2d::forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) {
    const Tensor& x = *in.at(0);
    if (x.rank() != 4 || x.dim(1) != channels)
        throw std::invalid_argument("BatchNorm2d: bad input shape");
    x_cache_ = x;
    mode_cache_ = opt.bn_mode;
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t m = n * h * w;

    stats_valid_ = false;
    if (opt.bn_mode == BnMode::Batch || opt.capture_stats || opt.update_running) {
        mu_b_.assign(channels, 0.0);
        var_b_.assign(channels, 0.0);
        for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t c = 0; c < channels; ++c) {
                const double* p = x.data() + ((ni * channels + c) * h) * w;
                double s = 0.0;
                for (std::size_t i = 0; i < h * w; ++i) s += p[i];
                mu_b_[c] += s;
            }
        for (std::size_t c = 0; c < channels; ++c) mu_b_[c] /= static_cast<double>(m);
        for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t c = 0; c < channels; ++c) {
                const double* p = x.data() + ((ni * channels + c) * h) * w;
                double s = 0.0;
                for (std::size_t i = 0; i < h * w; ++i) {
                    double d = p[i] - mu_b_[c];
                    s += d * d;
                }
                var_b_[c] += s;
            }
        for (std::size_t c = 0; c < channels; ++c) var_b_[c] /= static_cast<double>(m);
        stats_valid_ = true;
    }

    if (opt.update_running) {
        // unbiased variance for the running estimate
        const double corr = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
        for (std::size_t c = 0; c < channels; ++c) {
            running_mean.value[c] =
                (1.0 - momentum) * running_mean.value[c] + momentum * mu_b_[c];
            running_var.value[c] =
                (1.0 - momentum) * running_var.value[c] + momentum * var_b_[c] * corr;
        }
    }

    Tensor y(x.shape());
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t c = 0; c < channels; ++c) {
            double mu, inv_sigma;
            if (opt.bn_mode == BnMode::Batch) {
                mu = mu_b_[c];
                inv_sigma = 1.0 / std::sqrt(var_b_[c] + eps_norm);
            } else {
                mu = running_mean.value[c];
                inv_sigma = 1.0 / std::sqrt(running_var.value[c] + eps_norm);
            }
            const double g = gamma.value[c], b = beta.value[c];
            const double* xp = x.data() + ((ni * channels + c) * h) * w;
            double* yp = y.data() + ((ni * channels + c) * h) * w;
            for (std::size_t i = 0; i < h * w; ++i) yp[i] = g * (xp[i] - mu) * inv_sigma + b;
        }
    return y;
}

void BatchNorm2d::inject_stat_grads(Vec d_mu, Vec d_sigma) {
    if (!stats_valid_)
        throw std::logic_error("BatchNorm2d: stat grads injected without captured stats");
    d_mu_inj_ = std::move(d_mu);
    d_sigma_inj_ = std::move(d_sigma);
}

LayerStatsRec BatchNorm2d::capture() const {
    if (!stats_valid_) throw std::logic_error("BatchNorm2d: no captured stats");
    LayerStatsRec rec;
    rec.mu_batch = mu_b_;
    rec.sigma_batch.resize(channels);
    rec.mu_stored.resize(channels);
    rec.sigma_stored.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        rec.sigma_batch[c] = std::sqrt(var_b_[c] + eps_std);
        rec.mu_stored[c] = running_mean.value[c];
        rec.sigma_stored[c] = std::sqrt(running_var.value[c] + eps_std);
    }
    return rec;
}

std::vector<Tensor> BatchNorm2d::backward(const Tensor& dy, bool accum_params) {
    const Tensor& x = x_cache_;
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t m = n * h * w;
    Tensor dx(x.shape());

    Tensor dgamma({channels}), dbeta({channels});
    for (std::size_t c = 0; c < channels; ++c) {
        double mu, inv_sigma;
        if (mode_cache_ == BnMode::Batch) {
            mu = mu_b_[c];
            inv_sigma = 1.0 / std::sqrt(var_b_[c] + eps_norm);
        } else {
            mu = running_mean.value[c];
            inv_sigma = 1.0 / std::sqrt(running_var.value[c] + eps_norm);
        }
        const double g = gamma.value[c];

        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t ni = 0; ni < n; ++ni) {
            const double* xp = x.data() + ((ni * channels + c) * h) * w;
            const double* dp = dy.data() + ((ni * channels + c) * h) * w;
            for (std::size_t i = 0; i < h * w; ++i) {
                sum_dy += dp[i];
                sum_dy_xhat += dp[i] * (xp[i] - mu) * inv_sigma;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;

        const double mean_dy = sum_dy / static_cast<double>(m);
        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
        for (std::size_t ni = 0; ni < n; ++ni) {
            const double* xp = x.data() + ((ni * channels + c) * h) * w;
            const double* dp = dy.data() + ((ni * channels + c) * h) * w;
            double* op = dx.data() + ((ni * channels + c) * h) * w;
            for (std::size_t i = 0; i < h * w; ++i) {
                const double xhat = (xp[i] - mu) * inv_sigma;
                if (mode_cache_ == BnMode::Batch) {
                    op[i] = g * inv_sigma * (dp[i] - mean_dy - xhat * mean_dy_xhat);
                } else {
                    op[i] = g * inv_sigma * dp[i];
                }
            }
        }
    }

    // contributions of gradients seeded on the captured batch statistics
    if (!d_mu_inj_.empty() || !d_sigma_inj_.empty()) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double dmu = d_mu_inj_.empty() ? 0.0 : d_mu_inj_[c];
            const double dsig = d_sigma_inj_.empty() ? 0.0 : d_sigma_inj_[c];
            const double sigma_cap = std::sqrt(var_b_[c] + eps_std);
            for (std::size_t ni = 0; ni < n; ++ni) {
                const double* xp = x.data() + ((ni * channels + c) * h) * w;
                double* op = dx.data() + ((ni * channels + c) * h) * w;
                for (std::size_t i = 0; i < h * w; ++i) {
                    op[i] += dmu / static_cast<double>(m) +
                             dsig * (xp[i] - mu_b_[c]) /
                                 (static_cast<double>(m) * sigma_cap);
                }
            }
        }
        d_mu_inj_.clear();
        d_sigma_inj_.clear();
    }

    if (accum_params) {
        gamma.accumulate(dgamma, false);
        beta.accumulate(dbeta, false);
    }
    return {dx};
}

// ---------------------------------------------------------------------------
// ReLU / Add / GlobalAvgPool / ActQuant

Tensor ReLU::forward(const std::vector<const Tensor*>& in, const ForwardOptions&) {
    const Tensor& x = *in.at(0);
    Tensor y(x.shape());
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) {
            y[i] = x[i];
            mask_[i] = 1;
        }
    }
    return y;
}

std::vector<Tensor> ReLU::backward(const Tensor& dy, bool) {
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = mask_[i] ? dy[i] : 0.0;
    return {dx};
}

Tensor Add::forward(const std::vector<const Tensor*>& in, const ForwardOptions&) {
    if (in.empty()) throw std::invalid_argument("Add: no inputs");
    Tensor y = *in[0];
    for (std::size_t i = 1; i < in.size(); ++i) {
        if (!y.same_shape(*in[i])) throw std::invalid_argument("Add: shape mismatch");
        y += *in[i];
    }
    arity_ = in.size();
    return y;
}

std::vector<Tensor> Add::backward(const Tensor& dy, bool) {
    return std::vector<Tensor>(arity_, dy);
}

Tensor GlobalAvgPool::forward(const std::vector<const Tensor*>& in, const ForwardOptions&) {
    const Tensor& x = *in.at(0);
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y({n, c});
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* p = x.data() + (ni * c + ci) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += p[i];
            y[ni * c + ci] = s / static_cast<double>(hw);
        }
    return y;
}

std::vector<Tensor> GlobalAvgPool::backward(const Tensor& dy, bool) {
    Tensor dx(in_shape_);
    const std::size_t n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double g = dy[ni * c + ci] / static_cast<double>(hw);
            double* p = dx.data() + (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] = g;
        }
    return {dx};
}

Tensor ActQuant::forward(const std::vector<const Tensor*>& in, const ForwardOptions& opt) {
    const Tensor& x = *in.at(0);
    if (opt.calibrate) {
        double lo = x[0], hi = x[0];
        for (std::size_t i = 1; i < x.size(); ++i) {
            lo = std::min(lo, x[i]);
            hi = std::max(hi, x[i]);
        }
        observer.observe(lo, hi);
    }
    quant_cache_ = opt.quant && qp.has_value();
    if (!quant_cache_) return x;
    Tensor y(x.shape());
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = quant::fake_quantize(x[i], *qp);
        mask_[i] = quant::ste_mask(x[i], *qp) > 0.0 ? 1 : 0;
    }
    return y;
}

std::vector<Tensor> ActQuant::backward(const Tensor& dy, bool) {
    if (!quant_cache_) return {dy};
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = mask_[i] ? dy[i] : 0.0;
    return {dx};
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph(const Graph& o)
    : output_(o.output_), probes_(o.probes_), bn_nodes_(o.bn_nodes_), actq_nodes_(o.actq_nodes_) {
    nodes_.reserve(o.nodes_.size());
    for (const auto& nd : o.nodes_) nodes_.push_back({nd.name, nd.layer->clone(), nd.inputs});
}

Graph& Graph::operator=(const Graph& o) {
    if (this == &o) return *this;
    Graph tmp(o);
    *this = std::move(tmp);
    return *this;
}

int Graph::add(const std::string& name, std::unique_ptr<Layer> layer, std::vector<int> inputs) {
    const int id = static_cast<int>(nodes_.size());
    for (Param* p : layer->params()) p->name = name + "." + p->name;
    if (dynamic_cast<BatchNorm2d*>(layer.get())) bn_nodes_.push_back(id);
    if (dynamic_cast<ActQuant*>(layer.get())) actq_nodes_.push_back(id);
    nodes_.push_back({name, std::move(layer), std::move(inputs)});
    return id;
}

ForwardResult Graph::forward(const Tensor& x, const ForwardOptions& opt) {
    input_cache_ = x;
    opt_cache_ = opt;
    outs_.assign(nodes_.size(), Tensor());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        std::vector<const Tensor*> ins;
        ins.reserve(nodes_[i].inputs.size());
        for (int src : nodes_[i].inputs)
            ins.push_back(src < 0 ? &input_cache_ : &outs_[static_cast<std::size_t>(src)]);
        outs_[i] = nodes_[i].layer->forward(ins, opt);
    }
    ForwardResult res;
    res.logits = outs_[static_cast<std::size_t>(output_)];
    if (opt.capture_features) {
        for (int p : probes_)
            res.features.push_back({p, nodes_[static_cast<std::size_t>(p)].name,
                                    outs_[static_cast<std::size_t>(p)]});
    }
    if (opt.capture_stats) {
        for (int b : bn_nodes_) {
            auto* bn = static_cast<BatchNorm2d*>(nodes_[static_cast<std::size_t>(b)].layer.get());
            LayerStatsRec rec = bn->capture();
            rec.node = b;
            rec.name = nodes_[static_cast<std::size_t>(b)].name;
            res.stats.push_back(std::move(rec));
        }
    }
    return res;
}

Tensor Graph::backward(const BackwardSeeds& seeds, bool accum_params) {
    if (outs_.empty()) throw std::logic_error("Graph::backward before forward");
    std::vector<Tensor> grads(nodes_.size());

    auto ensure = [&](int node) -> Tensor& {
        Tensor& g = grads[static_cast<std::size_t>(node)];
        if (g.empty()) g = Tensor(outs_[static_cast<std::size_t>(node)].shape());
        return g;
    };

    if (!seeds.d_logits.empty()) ensure(output_) += seeds.d_logits;
    for (const auto& [node, g] : seeds.d_feature) ensure(node) += g;
    for (const auto& [node, dms] : seeds.d_bn) {
        auto* bn = static_cast<BatchNorm2d*>(nodes_[static_cast<std::size_t>(node)].layer.get());
        bn->inject_stat_grads(dms.first, dms.second);
        ensure(node);  // force the backward visit even with zero output grad
    }

    Tensor dx;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Tensor& g = grads[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        std::vector<Tensor> din = nodes_[static_cast<std::size_t>(i)].layer->backward(g, accum_params);
        for (std::size_t j = 0; j < nodes_[static_cast<std::size_t>(i)].inputs.size(); ++j) {
            const int src = nodes_[static_cast<std::size_t>(i)].inputs[j];
            if (src < 0) {
                if (dx.empty()) dx = Tensor(input_cache_.shape());
                dx += din[j];
            } else {
                Tensor& tg = grads[static_cast<std::size_t>(src)];
                if (tg.empty())
                    tg = std::move(din[j]);
                else
                    tg += din[j];
            }
        }
    }
    if (dx.empty()) dx = Tensor(input_cache_.shape());
    return dx;
}

std::vector<Param*> Graph::params() {
    std::vector<Param*> out;
    for (auto& nd : nodes_)
        for (Param* p : nd.layer->params()) out.push_back(p);
    return out;
}

void Graph::zero_grads() {
    for (Param* p : params()) p->zero_grad();
}

}  // namespace zsq::nn
