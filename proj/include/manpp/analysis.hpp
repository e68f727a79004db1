#pragma once

// Representation and gradient diagnostics plus exact parameter/FLOP counts.
//
// FLOP convention: a multiply-add is 2 FLOPs. matmul m x k . k x n costs
// 2mkn; linear(in, out) on n rows costs 2*n*in*out + n*out (bias add);
// conv2d costs 2*n*out*oh*ow*in*kh*kw + n*out*oh*ow. The head's learnable
// bias adds one FLOP per mirror output element.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "manpp/tensor.hpp"
#include "manpp/trainer.hpp"

namespace manpp {

/// Raised when a similarity score is undefined (zero-variance input).
class UndefinedScoreError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// n examples by d features, row-major.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  /// Flattens all but the first dimension. Throws InputError for n < 2.
  static FeatureMatrix from_tensor(const Tensor& t);
  void validate() const;
};

/// Linear CKA with per-column centering. Throws ShapeError on mismatched
/// rows and UndefinedScoreError when either input has zero variance.
double linear_cka(const FeatureMatrix& x, const FeatureMatrix& y);

/// Post-activation output of every layer unit of the deployed network.
std::vector<FeatureMatrix> unit_features(const LocalModel& model, const Tensor& x);

/// Logits for block j's local loss given its (attached) output features.
using LocalLossFn = std::function<Tensor(std::size_t j, const Tensor& features)>;

/// Per block j: ||g_local - g_e2e|| / ||g_e2e|| over theta_j, where g_local
/// is the gradient of block j's local loss (its head, or the output for the
/// last block) and g_e2e the gradient of the global loss, both on the same
/// weights and batch. The model is not modified. 0 when both are zero.
std::vector<double> gradient_bias_probe(const LocalModel& model, const Tensor& x, std::span<const int> labels);

/// Same, with a caller-supplied local loss in place of the heads.
std::vector<double> gradient_bias_probe(const LocalModel& model, const Tensor& x, std::span<const int> labels,
                                        const LocalLossFn& local_logits);

struct BlockParamCount {
  std::size_t theta = 0;       // backbone
  std::size_t gamma = 0;       // head mirror (weight + bias)
  std::size_t bias = 0;        // head learnable bias b_j
  std::size_t scale = 0;       // head scale s_j
  std::size_t projection = 0;  // head classifier
};

struct ParamCounts {
  std::vector<BlockParamCount> blocks;
  /// ||W||_0 + ||b||_0 of every parametric backbone layer, in order.
  std::vector<std::size_t> layers;
  BlockParamCount total;
};

/// Counts from layer dimensions. Disabled toggles still own their tensors
/// (bias, scale), but they are counted only when enabled.
ParamCounts count_params(const LocalModel& model);

struct BlockFlops {
  std::uint64_t backbone = 0;
  std::uint64_t mirror = 0;
  std::uint64_t lb = 0;  // scale and bias on the mirror output
  std::uint64_t projection = 0;
};

struct FlopCounts {
  std::vector<BlockFlops> blocks;
  std::vector<std::uint64_t> layers;  // per parametric backbone layer
  std::map<std::string, std::uint64_t> by_op;
  BlockFlops total;
};

/// Forward FLOPs for one batch; `input` includes the batch dimension.
FlopCounts count_flops(const LocalModel& model, const Shape& input);

}  // namespace manpp
