#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "zsq/tensor.hpp"

namespace zsq::ops {

// Row-wise softmax over logits of shape (N, C).
inline Tensor softmax(const Tensor& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    Tensor p(logits.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* z = logits.data() + i * c;
        double* o = p.data() + i * c;
        double zmax = z[0];
        for (std::size_t j = 1; j < c; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(z[j] - zmax);
            sum += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
    }
    return p;
}

inline std::size_t argmax_row(const Tensor& m, std::size_t row) {
    const std::size_t c = m.dim(1);
    const double* p = m.data() + row * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

// Chain rule through row-wise softmax: given dL/dp, return dL/dlogits.
inline Tensor softmax_vjp(const Tensor& probs, const Tensor& dprobs) {
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    Tensor dz(probs.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* p = probs.data() + i * c;
        const double* g = dprobs.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * p[j];
        double* o = dz.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) o[j] = p[j] * (g[j] - dot);
    }
    return dz;
}

inline bool all_finite(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

}  // namespace zsq::ops
