#pragma once

#include <vector>

#include "zsq/nn.hpp"
#include "zsq/tensor.hpp"

namespace zsq::difficulty {

// Histogram of sample difficulty over uniform bins on [0,1]; last bin is
// right-closed. error_rates present only for error_rate_by_difficulty.
struct DifficultyReport {
    Vec bin_edges;
    Vec fractions;
    std::vector<double> error_rates;  // NaN where the bin is empty
    std::vector<bool> populated;
};

// d = 1 - p_y for each sample, evaluation-mode forward.
Vec difficulties(nn::Graph& model, const Tensor& x, const std::vector<int>& labels,
                 bool quant = false, std::size_t batch = 256);

double difficulty(nn::Graph& model, const Tensor& x_batch, std::size_t row, int label,
                  bool quant = false);

std::size_t bin_of(double d, int bins);

DifficultyReport difficulty_histogram(const Vec& d, int bins = 10);
DifficultyReport difficulty_histogram(nn::Graph& model, const Tensor& x,
                                      const std::vector<int>& labels, int bins = 10,
                                      bool quant = false);

// Per-bin top-1 error of the same model that defines bin membership.
DifficultyReport error_rate_by_difficulty(nn::Graph& model, const Tensor& x,
                                          const std::vector<int>& labels, int bins = 10,
                                          bool quant = false);

}  // namespace zsq::difficulty
