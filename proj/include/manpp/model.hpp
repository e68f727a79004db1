#pragma once

// Network layers, block partitioning and the momentum auxiliary heads.
//
// Blocks are indexed from 0. Block j < K-1 owns head j, whose mirror layer
// has the shape of the first layer of block j+1. The last block feeds the
// output directly and has no head.
//
// Head forward, with x the (non-detached) output of block j:
//   z = mirror(x)            mirror params gamma_j (weight + bias)
//   z = z + b_j              only with use_lb; b_j has one entry per output
//                            feature (linear) or channel (conv)
//   a = relu(z)
//   a = global_mean_pool(a)  conv mirrors only
//   logits = projection(a)
//
// Local update after backward of the head loss:
//   theta_j        <- step(lr_local)
//   (gamma_j, b_j) <- step((2 - s_j) * lr_aux)    factor is 1 without use_scalable
//   projection     <- step(lr_aux)
//   s_j            <- step(lr_aux), then clamped to [kScaleMargin, 2 - kScaleMargin]
//                    (no weight decay; s_j is not in the head forward, so its
//                    loss gradient is zero and it stays at its initial value)
// then the EMA coupling toward block j+1's first layer:
//   literal: gamma <- s * (alpha * gamma + (1 - alpha) * theta)
//   convex:  gamma <- (1 - s * (1 - alpha)) * gamma + s * (1 - alpha) * theta
//            (evaluated as gamma + w * (theta - gamma), so gamma = theta stays put)

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "manpp/memory.hpp"
#include "manpp/optim.hpp"
#include "manpp/rng.hpp"
#include "manpp/tensor.hpp"

namespace manpp {

enum class LayerKind { linear, conv2d, relu, flatten, mean_pool2d };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // linear: input features, conv2d: input channels
  std::size_t out = 0;  // linear: output features, conv2d: output channels
  std::size_t kh = 0, kw = 0, stride = 1;
  std::size_t window = 0;
  Tensor weight;  // linear [out, in], conv2d [out, in, kh, kw]
  Tensor bias;    // [out]

  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw,
                          std::size_t stride);
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec mean_pool2d(std::size_t window);

  bool parametric() const { return kind == LayerKind::linear || kind == LayerKind::conv2d; }
  /// ||W||_0 + ||b||_0 computed from the layer dimensions.
  std::size_t param_count() const;
  std::vector<Tensor> params() const;
  Shape output_shape(const Shape& input) const;
  Tensor forward(const Tensor& x) const;
  LayerSpec clone() const;
  /// Model-file line for this layer, e.g. "conv2d 1 8 3 3 1".
  std::string describe() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
void init_layer(LayerSpec& layer, Rng& rng);

struct Block {
  std::vector<LayerSpec> layers;

  std::vector<Tensor> params() const;
  std::size_t param_count() const;
  /// First parametric layer; throws ConfigError if the block has none.
  const LayerSpec& first_layer() const;
  std::vector<TensorSnapshot> first_layer_snapshot() const;
  Shape output_shape(Shape input) const;
  /// Charges each parametric layer's output size to `acct` under `phase` and
  /// adds the total to `*charged`.
  Tensor forward(const Tensor& x, MemoryAccountant* acct = nullptr, std::string_view phase = {},
                 std::int64_t* charged = nullptr) const;
};

/// Contiguous spans of layer units. `cuts` holds K+1 layer indices with
/// cuts.front() == 0 and cuts.back() == layers.size().
struct BlockPartition {
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> cuts;

  std::size_t blocks() const { return cuts.size() - 1; }
  /// Number of parametric layers (L).
  std::size_t layer_units() const;
  /// Parametric layers per block.
  std::vector<std::size_t> span_sizes() const;
  std::span<const LayerSpec> block_layers(std::size_t j) const;

  /// Validates contiguity and non-empty spans. Throws ConfigError.
  static BlockPartition from_cuts(std::vector<LayerSpec> layers, std::vector<std::size_t> cuts);
  std::vector<Block> split() const;
};

/// Sizes of K balanced spans over L items; earlier spans take the remainder.
std::vector<std::size_t> balanced_span_sizes(std::size_t L, std::size_t K);

/// Groups layers into units and cuts them into K balanced blocks. Throws
/// ConfigError when K is 0 or exceeds the number of parametric layers.
BlockPartition partition(std::vector<LayerSpec> layers, std::size_t K);

enum class CouplingMode { literal, convex };

struct HeadConfig {
  double alpha = 0.999;
  CouplingMode coupling = CouplingMode::literal;
  bool use_ema = true;
  bool use_lb = true;
  bool use_scalable = true;
};

void validate(const HeadConfig& cfg);

inline constexpr double kScaleMargin = 1e-3;

struct AuxiliaryHead {
  LayerSpec mirror;
  Tensor bias;
  Tensor scale;
  LayerSpec projection;
  HeadConfig config;

  double scale_value() const { return scale.data()[0]; }
  std::vector<Tensor> mirror_params() const { return mirror.params(); }
  /// Parameters stepped at (2 - s) * lr_aux: mirror plus the bias when enabled.
  std::vector<Tensor> coupled_params() const;
  std::size_t bias_count() const { return bias.numel(); }
  Tensor forward(const Tensor& features, MemoryAccountant* acct = nullptr, std::string_view phase = {},
                 std::int64_t* charged = nullptr) const;
};

/// Head for block j (0-based) mirroring the first layer of block j+1. Throws
/// ConfigError if j is out of range or that layer is parameter-free.
AuxiliaryHead build_aux_head(const BlockPartition& part, std::size_t j, std::size_t classes,
                             const HeadConfig& cfg, Rng& rng);
AuxiliaryHead build_aux_head(const LayerSpec& next_first, std::size_t classes, const HeadConfig& cfg, Rng& rng);

struct LocalForward {
  Tensor features;    // block output, still attached to the block's graph
  Tensor next_input;  // detached copy handed to block j+1
  Tensor logits;      // head output, or the block output for the last block
  std::int64_t charged = 0;
};

LocalForward local_forward(const Block& block, const AuxiliaryHead* head, const Tensor& x,
                           MemoryAccountant* acct = nullptr, std::string_view phase = {});

struct LocalOptimizers {
  OptimizerState backbone;
  OptimizerState coupled;
  OptimizerState projection;
  OptimizerState scale;
};

LocalOptimizers make_local_optimizers(const Block& block, const AuxiliaryHead* head, const OptimizerConfig& cfg);

/// Effective learning rate for (gamma_j, b_j).
double coupled_lr(const AuxiliaryHead& head, double lr_aux);

/// One optimizer step for a block and its head; zeros their grads.
void update_local(Block& block, AuxiliaryHead* head, LocalOptimizers& optim, double lr_local, double lr_aux);

/// Moves the mirror toward `target` (block j+1's first-layer weight, bias).
/// Gradient-free; a no-op without use_ema. Throws InternalError on shape drift.
void ema_couple(AuxiliaryHead& head, std::span<const TensorSnapshot> target);

}  // namespace manpp
