#include "zsq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zsq::quant {

double round_half_even(double v) {
    double f = std::floor(v);
    double diff = v - f;
    if (diff > 0.5) return f + 1.0;
    if (diff < 0.5) return f;
    return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

QuantParams compute_params(double lo, double hi, int bits) {
    if (bits < 2 || bits > 8)
        throw std::invalid_argument("compute_params: bit-width must be in [2,8]");
    if (!(hi > lo))
        throw std::invalid_argument("compute_params: upper bound must exceed lower bound");
    QuantParams p;
    p.bits = bits;
    p.lo = lo;
    p.hi = hi;
    p.scale = (static_cast<double>((1 << bits) - 1)) / (hi - lo);
    p.zero = p.scale * lo + static_cast<double>(1 << (bits - 1));
    return p;
}

static std::int32_t quantize_one(double x, const QuantParams& p) {
    if (std::isnan(x)) throw std::invalid_argument("quantize: non-finite input");
    double c = std::clamp(x, p.lo, p.hi);
    double q = round_half_even(c * p.scale - p.zero);
    // clamp guards float round-off at the extremes
    q = std::clamp(q, static_cast<double>(p.qmin()), static_cast<double>(p.qmax()));
    return static_cast<std::int32_t>(q);
}

QuantizedTensor quantize(const Tensor& x, const QuantParams& p) {
    if (p.bits == 0) throw std::invalid_argument("quantize: invalid params");
    QuantizedTensor out;
    out.shape = x.shape();
    out.params = p;
    out.values.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = quantize_one(x[i], p);
    return out;
}

Tensor dequantize(const QuantizedTensor& q) {
    Tensor out(q.shape);
    for (std::size_t i = 0; i < q.values.size(); ++i)
        out[i] = (static_cast<double>(q.values[i]) + q.params.zero) / q.params.scale;
    return out;
}

double fake_quantize(double x, const QuantParams& p) {
    // propagate non-finite values so divergence stays observable downstream
    if (!std::isfinite(x)) return x;
    return (static_cast<double>(quantize_one(x, p)) + p.zero) / p.scale;
}

Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fake_quantize(x[i], p);
    return out;
}

double ste_mask(double x, const QuantParams& p) {
    return (x >= p.lo && x <= p.hi) ? 1.0 : 0.0;
}

void RangeObserver::observe(double batch_lo, double batch_hi) {
    if (!seen) {
        lo = batch_lo;
        hi = batch_hi;
        seen = true;
    } else {
        lo = decay * lo + (1.0 - decay) * batch_lo;
        hi = decay * hi + (1.0 - decay) * batch_hi;
    }
}

std::pair<double, double> RangeObserver::bounds() const {
    double l = lo, u = hi;
    if (u - l < 1e-8) {
        double mid = 0.5 * (l + u);
        l = mid - 1e-8;
        u = mid + 1e-8;
    }
    return {l, u};
}

}  // namespace zsq::quant
