#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zsq/tensor.hpp"

namespace zsq::quant {

// Asymmetric uniform quantizer parameters for one tensor.
// scale = (2^bits - 1) / (hi - lo), zero = scale * lo + 2^(bits-1).
struct QuantParams {
    int bits = 0;
    double lo = 0.0;
    double hi = 0.0;
    double scale = 0.0;
    double zero = 0.0;

    int qmin() const { return -(1 << (bits - 1)); }
    int qmax() const { return (1 << (bits - 1)) - 1; }
};

QuantParams compute_params(double lo, double hi, int bits);

struct QuantizedTensor {
    std::vector<std::size_t> shape;
    std::vector<std::int32_t> values;
    QuantParams params;
};

// round(clamp(x, lo, hi) * scale - zero), ties to even
QuantizedTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const QuantizedTensor& q);

// dequantize(quantize(x)); scalar form used in hot loops
double fake_quantize(double x, const QuantParams& p);
Tensor fake_quantize(const Tensor& x, const QuantParams& p);

// Straight-through gradient mask: 1 on [lo, hi], 0 outside.
double ste_mask(double x, const QuantParams& p);

double round_half_even(double v);

// Running-range observer backing activation calibration: first batch takes
// the observed min/max, later batches fold in with EMA decay 0.9.
struct RangeObserver {
    bool seen = false;
    double lo = 0.0;
    double hi = 0.0;
    double decay = 0.9;

    void observe(double batch_lo, double batch_hi);
    // Degenerate ranges are widened to +-1e-8 around the midpoint.
    std::pair<double, double> bounds() const;
};

}  // namespace zsq::quant
