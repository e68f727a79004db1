#include "manpp/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "manpp/errors.hpp"

namespace manpp {

// ---- LayerSpec ------------------------------------------------------------

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw ConfigError("linear layer needs positive widths");
  LayerSpec l;
  l.kind = LayerKind::linear;
  l.in = in;
  l.out = out;
  l.weight = Tensor::zeros({out, in}, true);
  l.bias = Tensor::zeros({out}, true);
  return l;
}

LayerSpec LayerSpec::conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw,
                            std::size_t stride) {
  if (in_ch == 0 || out_ch == 0 || kh == 0 || kw == 0 || stride == 0) {
    throw ConfigError("conv2d layer needs positive channels, kernel and stride");
  }
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in = in_ch;
  l.out = out_ch;
  l.kh = kh;
  l.kw = kw;
  l.stride = stride;
  l.weight = Tensor::zeros({out_ch, in_ch, kh, kw}, true);
  l.bias = Tensor::zeros({out_ch}, true);
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::mean_pool2d(std::size_t window) {
  if (window == 0) throw ConfigError("mean_pool2d window must be >= 1");
  LayerSpec l;
  l.kind = LayerKind::mean_pool2d;
  l.window = window;
  return l;
}

std::size_t LayerSpec::param_count() const {
  switch (kind) {
    case LayerKind::linear:
      return in * out + out;
    case LayerKind::conv2d:
      return out * in * kh * kw + out;
    default:
      return 0;
  }
}

std::vector<Tensor> LayerSpec::params() const {
  if (!parametric()) return {};
  return {weight, bias};
}

Shape LayerSpec::output_shape(const Shape& input) const {
  auto fail = [&](const std::string& why) {
    return ShapeError(describe() + ": " + why + " (input " + shape_str(input) + ")");
  };
  switch (kind) {
    case LayerKind::linear:
      if (input.size() != 2 || input[1] != in) throw fail("expects [n, " + std::to_string(in) + "]");
      return {input[0], out};
    case LayerKind::conv2d: {
      if (input.size() != 4 || input[1] != in) throw fail("expects [n, " + std::to_string(in) + ", h, w]");
      if (kh > input[2] || kw > input[3]) throw fail("kernel larger than input");
      return {input[0], out, (input[2] - kh) / stride + 1, (input[3] - kw) / stride + 1};
    }
    case LayerKind::relu:
      return input;
    case LayerKind::flatten: {
      if (input.empty()) throw fail("rank-0 input");
      return {input[0], shape_numel(input) / input[0]};
    }
    case LayerKind::mean_pool2d:
      if (input.size() != 4) throw fail("expects [n, c, h, w]");
      if (window > input[2] || window > input[3]) throw fail("window larger than input");
      return {input[0], input[1], input[2] / window, input[3] / window};
  }
  throw InternalError("unknown layer kind");
}

Tensor LayerSpec::forward(const Tensor& x) const {
  switch (kind) {
    case LayerKind::linear:
      output_shape(x.shape());
      return manpp::linear(x, weight, bias);
    case LayerKind::conv2d:
      output_shape(x.shape());
      return manpp::conv2d(x, weight, bias, stride);
    case LayerKind::relu:
      return manpp::relu(x);
    case LayerKind::flatten:
      return manpp::flatten(x);
    case LayerKind::mean_pool2d:
      return manpp::mean_pool2d(x, window);
  }
  throw InternalError("unknown layer kind");
}

LayerSpec LayerSpec::clone() const {
  LayerSpec copy = *this;
  if (weight.defined()) copy.weight = weight.clone();
  if (bias.defined()) copy.bias = bias.clone();
  return copy;
}

std::string LayerSpec::describe() const {
  std::ostringstream os;
  switch (kind) {
    case LayerKind::linear:
      os << "linear " << in << ' ' << out;
      break;
    case LayerKind::conv2d:
      os << "conv2d " << in << ' ' << out << ' ' << kh << ' ' << kw << ' ' << stride;
      break;
    case LayerKind::relu:
      os << "relu";
      break;
    case LayerKind::flatten:
      os << "flatten";
      break;
    case LayerKind::mean_pool2d:
      os << "mean_pool2d " << window;
      break;
  }
  return os.str();
}

void init_layer(LayerSpec& layer, Rng& rng) {
  if (!layer.parametric()) return;
  const std::size_t fan_in = layer.kind == LayerKind::linear ? layer.in : layer.in * layer.kh * layer.kw;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : layer.weight.mutable_data()) v = dist(rng);
  for (auto& v : layer.bias.mutable_data()) v = dist(rng);
}

// ---- Block ----------------------------------------------------------------

std::vector<Tensor> Block::params() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    for (auto& p : l.params()) out.push_back(p);
  }
  return out;
}

std::size_t Block::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

const LayerSpec& Block::first_layer() const {
  for (const auto& l : layers) {
    if (l.parametric()) return l;
  }
  throw ConfigError("block has no parametric layer");
}

std::vector<TensorSnapshot> Block::first_layer_snapshot() const {
  const auto& first = first_layer();
  return {first.weight.snapshot(), first.bias.snapshot()};
}

Shape Block::output_shape(Shape input) const {
  for (const auto& l : layers) input = l.output_shape(input);
  return input;
}

Tensor Block::forward(const Tensor& x, MemoryAccountant* acct, std::string_view phase,
                      std::int64_t* charged) const {
  Tensor h = x;
  for (const auto& l : layers) {
    h = l.forward(h);
    if (l.parametric()) {
      const auto n = static_cast<std::int64_t>(h.numel());
      if (acct) acct->account(phase, n);
      if (charged) *charged += n;
    }
  }
  return h;
}

// ---- partition ------------------------------------------------------------

std::size_t BlockPartition::layer_units() const {
  return static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.parametric(); }));
}

std::vector<std::size_t> BlockPartition::span_sizes() const {
  std::vector<std::size_t> sizes;
  for (std::size_t j = 0; j < blocks(); ++j) {
    const auto span = block_layers(j);
    sizes.push_back(static_cast<std::size_t>(
        std::count_if(span.begin(), span.end(), [](const LayerSpec& l) { return l.parametric(); })));
  }
  return sizes;
}

std::span<const LayerSpec> BlockPartition::block_layers(std::size_t j) const {
  if (j >= blocks()) throw ConfigError("block index " + std::to_string(j) + " out of range");
  return std::span<const LayerSpec>(layers).subspan(cuts[j], cuts[j + 1] - cuts[j]);
}

BlockPartition BlockPartition::from_cuts(std::vector<LayerSpec> layers, std::vector<std::size_t> cuts) {
  if (cuts.size() < 2) throw ConfigError("a partition needs at least one block");
  if (cuts.front() != 0 || cuts.back() != layers.size()) {
    throw ConfigError("partition cuts must start at 0 and end at the layer count");
  }
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    if (cuts[i] <= cuts[i - 1]) throw ConfigError("partition spans must be non-empty and ordered");
  }
  return BlockPartition{std::move(layers), std::move(cuts)};
}

std::vector<Block> BlockPartition::split() const {
  std::vector<Block> out;
  for (std::size_t j = 0; j < blocks(); ++j) {
    const auto span = block_layers(j);
    out.push_back(Block{std::vector<LayerSpec>(span.begin(), span.end())});
  }
  return out;
}

std::vector<std::size_t> balanced_span_sizes(std::size_t L, std::size_t K) {
  if (K == 0) throw ConfigError("block count K must be >= 1");
  if (K > L) {
    throw ConfigError("block count K=" + std::to_string(K) + " exceeds layer count L=" + std::to_string(L));
  }
  std::vector<std::size_t> sizes(K, L / K);
  for (std::size_t i = 0; i < L % K; ++i) ++sizes[i];
  return sizes;
}

BlockPartition partition(std::vector<LayerSpec> layers, std::size_t K) {
  // Unit k starts at the k-th parametric layer; unit 0 also owns any leading
  // parameter-free layers.
  std::vector<std::size_t> unit_starts;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].parametric()) unit_starts.push_back(unit_starts.empty() ? 0 : i);
  }
  const auto sizes = balanced_span_sizes(unit_starts.size(), K);
  std::vector<std::size_t> cuts{0};
  std::size_t unit = 0;
  for (std::size_t j = 0; j + 1 < K; ++j) {
    unit += sizes[j];
    cuts.push_back(unit_starts[unit]);
  }
  cuts.push_back(layers.size());
  return BlockPartition::from_cuts(std::move(layers), std::move(cuts));
}

// ---- heads ----------------------------------------------------------------

void validate(const HeadConfig& cfg) {
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw ConfigError("EMA decay alpha must lie in (0, 1)");
}

std::vector<Tensor> AuxiliaryHead::coupled_params() const {
  auto out = mirror.params();
  if (config.use_lb) out.push_back(bias);
  return out;
}

Tensor AuxiliaryHead::forward(const Tensor& features, MemoryAccountant* acct, std::string_view phase,
                              std::int64_t* charged) const {
  Tensor z = mirror.forward(features);
  std::int64_t n = static_cast<std::int64_t>(z.numel());
  if (config.use_lb) {
    z = add(z, bias);
    n += static_cast<std::int64_t>(bias.numel());
  }
  if (acct) acct->account(phase, n);
  if (charged) *charged += n;
  Tensor a = relu(z);
  if (a.rank() == 4) a = global_mean_pool(a);
  return projection.forward(a);
}

AuxiliaryHead build_aux_head(const LayerSpec& next_first, std::size_t classes, const HeadConfig& cfg, Rng& rng) {
  validate(cfg);
  if (!next_first.parametric()) {
    throw ConfigError("auxiliary head needs a parametric first layer in the next block, found '" +
                      next_first.describe() + "'; reorder the layers so each block starts with linear or conv2d");
  }
  if (classes < 2) throw ConfigError("auxiliary head needs at least two classes");
  AuxiliaryHead head;
  head.mirror = next_first.clone();
  head.bias = Tensor::zeros({next_first.out}, cfg.use_lb);
  head.scale = Tensor::scalar(1.0, cfg.use_scalable);
  head.projection = LayerSpec::linear(next_first.out, classes);
  init_layer(head.projection, rng);
  head.config = cfg;
  return head;
}

AuxiliaryHead build_aux_head(const BlockPartition& part, std::size_t j, std::size_t classes,
                             const HeadConfig& cfg, Rng& rng) {
  if (j + 1 >= part.blocks()) {
    throw ConfigError("head index " + std::to_string(j) + " invalid for K=" + std::to_string(part.blocks()) +
                      " (heads exist for blocks 0..K-2)");
  }
  const auto next = part.block_layers(j + 1);
  return build_aux_head(next.front(), classes, cfg, rng);
}

LocalForward local_forward(const Block& block, const AuxiliaryHead* head, const Tensor& x, MemoryAccountant* acct,
                           std::string_view phase) {
  LocalForward out;
  out.features = block.forward(x, acct, phase, &out.charged);
  out.next_input = out.features.detach();
  out.logits = head ? head->forward(out.features, acct, phase, &out.charged) : out.features;
  return out;
}

LocalOptimizers make_local_optimizers(const Block& block, const AuxiliaryHead* head, const OptimizerConfig& cfg) {
  LocalOptimizers o;
  const auto backbone = block.params();
  o.backbone = OptimizerState(cfg, backbone);
  if (head) {
    const auto coupled = head->coupled_params();
    o.coupled = OptimizerState(cfg, coupled);
    const auto proj = head->projection.params();
    o.projection = OptimizerState(cfg, proj);
    if (head->config.use_scalable) {
      const std::vector<Tensor> s{head->scale};
      OptimizerConfig scale_cfg = cfg;
      scale_cfg.weight_decay = 0.0;
      o.scale = OptimizerState(scale_cfg, s);
    }
  }
  return o;
}

double coupled_lr(const AuxiliaryHead& head, double lr_aux) {
  return head.config.use_scalable ? (2.0 - head.scale_value()) * lr_aux : lr_aux;
}

void update_local(Block& block, AuxiliaryHead* head, LocalOptimizers& optim, double lr_local, double lr_aux) {
  auto backbone = block.params();
  optim.backbone.step(backbone, lr_local);
  if (!head) return;
  const double lr_coupled = coupled_lr(*head, lr_aux);
  auto coupled = head->coupled_params();
  optim.coupled.step(coupled, lr_coupled);
  auto proj = head->projection.params();
  optim.projection.step(proj, lr_aux);
  if (head->config.use_scalable) {
    std::vector<Tensor> s{head->scale};
    optim.scale.step(s, lr_aux);
    auto v = head->scale.mutable_data();
    v[0] = std::clamp(v[0], kScaleMargin, 2.0 - kScaleMargin);
  }
}

void ema_couple(AuxiliaryHead& head, std::span<const TensorSnapshot> target) {
  if (!head.config.use_ema) return;
  auto params = head.mirror.params();
  if (target.size() != params.size()) {
    throw InternalError("EMA target has " + std::to_string(target.size()) + " tensors, mirror has " +
                        std::to_string(params.size()));
  }
  const double alpha = head.config.alpha;
  const double s = head.scale_value();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (target[i].shape != params[i].shape()) {
      throw InternalError("EMA shape drift: mirror " + shape_str(params[i].shape()) + " vs target " +
                          shape_str(target[i].shape));
    }
    auto g = params[i].mutable_data();
    const auto& t = target[i].data;
    if (head.config.coupling == CouplingMode::literal) {
      for (std::size_t k = 0; k < g.size(); ++k) g[k] = s * (alpha * g[k] + (1.0 - alpha) * t[k]);
    } else {
      const double w = s * (1.0 - alpha);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += w * (t[k] - g[k]);
    }
  }
}

}  // namespace manpp
