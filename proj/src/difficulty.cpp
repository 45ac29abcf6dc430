#include "zsq/difficulty.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "zsq/models.hpp"
#include "zsq/ops.hpp"

namespace zsq::difficulty {

Vec difficulties(nn::Graph& model, const Tensor& x, const std::vector<int>& labels, bool quant,
                 std::size_t batch) {
    if (labels.empty()) throw std::invalid_argument("difficulties: empty set");
    const std::size_t n = x.dim(0);
    Vec out(n);
    nn::ForwardOptions opt;
    opt.quant = quant;
    for (std::size_t lo = 0; lo < n; lo += batch) {
        const std::size_t bn = std::min(batch, n - lo);
        Tensor xb = models::slice_batch(x, lo, bn);
        Tensor probs = ops::softmax(model.forward(xb, opt).logits);
        const std::size_t c = probs.dim(1);
        for (std::size_t i = 0; i < bn; ++i) {
            const int y = labels[lo + i];
            if (y < 0 || static_cast<std::size_t>(y) >= c)
                throw std::invalid_argument("difficulties: label out of range");
            out[lo + i] = 1.0 - probs[i * c + static_cast<std::size_t>(y)];
        }
    }
    return out;
}

double difficulty(nn::Graph& model, const Tensor& x_batch, std::size_t row, int label,
                  bool quant) {
    nn::ForwardOptions opt;
    opt.quant = quant;
    Tensor probs = ops::softmax(model.forward(x_batch, opt).logits);
    const std::size_t c = probs.dim(1);
    if (label < 0 || static_cast<std::size_t>(label) >= c)
        throw std::invalid_argument("difficulty: label out of range");
    return 1.0 - probs[row * c + static_cast<std::size_t>(label)];
}

std::size_t bin_of(double d, int bins) {
    auto b = static_cast<long>(std::floor(d * bins));
    if (b < 0) b = 0;
    if (b >= bins) b = bins - 1;  // right-closed last bin
    return static_cast<std::size_t>(b);
}

DifficultyReport difficulty_histogram(const Vec& d, int bins) {
    if (d.empty()) throw std::invalid_argument("difficulty_histogram: empty set");
    DifficultyReport rep;
    rep.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        rep.bin_edges[static_cast<std::size_t>(i)] = static_cast<double>(i) / bins;
    rep.fractions.assign(static_cast<std::size_t>(bins), 0.0);
    for (double v : d) rep.fractions[bin_of(v, bins)] += 1.0;
    for (double& f : rep.fractions) f /= static_cast<double>(d.size());
    return rep;
}

DifficultyReport difficulty_histogram(nn::Graph& model, const Tensor& x,
                                      const std::vector<int>& labels, int bins, bool quant) {
    return difficulty_histogram(difficulties(model, x, labels, quant), bins);
}

DifficultyReport error_rate_by_difficulty(nn::Graph& model, const Tensor& x,
                                          const std::vector<int>& labels, int bins, bool quant) {
    if (labels.empty()) throw std::invalid_argument("error_rate_by_difficulty: empty set");
    const std::size_t n = x.dim(0);
    nn::ForwardOptions opt;
    opt.quant = quant;

    std::vector<std::size_t> count(static_cast<std::size_t>(bins), 0);
    std::vector<std::size_t> errors(static_cast<std::size_t>(bins), 0);
    const std::size_t batch = 256;
    for (std::size_t lo = 0; lo < n; lo += batch) {
        const std::size_t bn = std::min(batch, n - lo);
        Tensor xb = models::slice_batch(x, lo, bn);
        Tensor probs = ops::softmax(model.forward(xb, opt).logits);
        const std::size_t c = probs.dim(1);
        for (std::size_t i = 0; i < bn; ++i) {
            const int y = labels[lo + i];
            if (y < 0 || static_cast<std::size_t>(y) >= c)
                throw std::invalid_argument("error_rate_by_difficulty: label out of range");
            const double d = 1.0 - probs[i * c + static_cast<std::size_t>(y)];
            const std::size_t b = bin_of(d, bins);
            ++count[b];
            if (ops::argmax_row(probs, i) != static_cast<std::size_t>(y)) ++errors[b];
        }
    }

    DifficultyReport rep;
    rep.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        rep.bin_edges[static_cast<std::size_t>(i)] = static_cast<double>(i) / bins;
    rep.fractions.assign(static_cast<std::size_t>(bins), 0.0);
    rep.error_rates.assign(static_cast<std::size_t>(bins),
                           std::numeric_limits<double>::quiet_NaN());
    rep.populated.assign(static_cast<std::size_t>(bins), false);
    for (std::size_t b = 0; b < count.size(); ++b) {
        rep.fractions[b] = static_cast<double>(count[b]) / static_cast<double>(n);
        if (count[b] > 0) {
            rep.populated[b] = true;
            rep.error_rates[b] = static_cast<double>(errors[b]) / static_cast<double>(count[b]);
        }
    }
    return rep;
}

}  // namespace zsq::difficulty
