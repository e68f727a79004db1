#include "manpp/analysis.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "manpp/errors.hpp"

namespace manpp {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd centered(const FeatureMatrix& m) {
  Eigen::MatrixXd out = Eigen::Map<const RowMatrix>(m.values.data(), static_cast<Eigen::Index>(m.rows),
                                                    static_cast<Eigen::Index>(m.cols));
  out.rowwise() -= out.colwise().mean();
  return out;
}

std::vector<std::vector<double>> grads_of(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

void zero_all(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

double relative_gap(const std::vector<std::vector<double>>& local, const std::vector<std::vector<double>>& e2e) {
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < e2e.size(); ++i) {
    for (std::size_t k = 0; k < e2e[i].size(); ++k) {
      const double d = local[i][k] - e2e[i][k];
      diff += d * d;
      norm += e2e[i][k] * e2e[i][k];
    }
  }
  if (diff == 0.0) return 0.0;
  if (norm == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(diff / norm);
}

}  // namespace

FeatureMatrix FeatureMatrix::from_tensor(const Tensor& t) {
  if (t.rank() < 1) throw ShapeError("feature tensor needs a batch dimension");
  FeatureMatrix m;
  m.rows = t.dim(0);
  m.cols = m.rows ? t.numel() / m.rows : 0;
  m.values.assign(t.data().begin(), t.data().end());
  m.validate();
  return m;
}

void FeatureMatrix::validate() const {
  if (rows < 2) throw InputError("feature matrix needs at least 2 rows, got " + std::to_string(rows));
  if (cols == 0) throw InputError("feature matrix needs at least one column");
  if (values.size() != rows * cols) throw ShapeError("feature matrix holds " + std::to_string(values.size()) +
                                                     " values for " + std::to_string(rows) + "x" +
                                                     std::to_string(cols));
  for (double v : values) {
    if (!std::isfinite(v)) throw InputError("feature matrix contains a non-finite value");
  }
}

double linear_cka(const FeatureMatrix& x, const FeatureMatrix& y) {
  x.validate();
  y.validate();
  if (x.rows != y.rows) {
    throw ShapeError("CKA needs the same examples: " + std::to_string(x.rows) + " vs " + std::to_string(y.rows) +
                     " rows");
  }
  const Eigen::MatrixXd xc = centered(x);
  const Eigen::MatrixXd yc = centered(y);
  double cross, xx, yy;
  if (x.cols + y.cols <= 2 * x.rows) {
    cross = (yc.transpose() * xc).squaredNorm();
    xx = (xc.transpose() * xc).norm();
    yy = (yc.transpose() * yc).norm();
  } else {
    // Same quantities through the n x n Gram matrices.
    const Eigen::MatrixXd kx = xc * xc.transpose();
    const Eigen::MatrixXd ky = yc * yc.transpose();
    cross = kx.cwiseProduct(ky).sum();
    xx = kx.norm();
    yy = ky.norm();
  }
  if (!(xx > 0.0) || !(yy > 0.0)) throw UndefinedScoreError("CKA is undefined for zero-variance features");
  return cross / (xx * yy);
}

std::vector<FeatureMatrix> unit_features(const LocalModel& model, const Tensor& x) {
  std::vector<LayerSpec> layers;
  for (const auto& u : model.units)
    for (const auto& l : u.block.layers) layers.push_back(l.clone());
  std::vector<FeatureMatrix> out;
  Tensor h = x;
  bool seen_param = false;
  for (const auto& l : layers) {
    if (l.parametric() && seen_param) out.push_back(FeatureMatrix::from_tensor(h));
    seen_param = seen_param || l.parametric();
    h = l.forward(h);
  }
  out.push_back(FeatureMatrix::from_tensor(h));
  return out;
}

std::vector<double> gradient_bias_probe(const LocalModel& model, const Tensor& x, std::span<const int> labels) {
  return gradient_bias_probe(model, x, labels, {});
}

std::vector<double> gradient_bias_probe(const LocalModel& model, const Tensor& x, std::span<const int> labels,
                                        const LocalLossFn& local_logits) {
  const LocalModel copy = model.clone();
  const auto all = copy.all_params();
  const auto K = copy.blocks();

  std::vector<std::vector<std::vector<double>>> local(K);
  Tensor input = x.detach();
  for (std::size_t j = 0; j < K; ++j) {
    zero_all(all);
    const auto& unit = copy.units[j];
    const Tensor features = unit.block.forward(input);
    Tensor logits;
    if (local_logits) {
      logits = local_logits(j, features);
    } else {
      logits = unit.head ? unit.head->forward(features) : features;
    }
    backward(softmax_cross_entropy(logits, labels));
    local[j] = grads_of(unit.block.params());
    input = features.detach();
  }

  zero_all(all);
  Tensor h = x.detach();
  for (const auto& u : copy.units) h = u.block.forward(h);
  backward(softmax_cross_entropy(h, labels));

  std::vector<double> out;
  for (std::size_t j = 0; j < K; ++j) out.push_back(relative_gap(local[j], grads_of(copy.units[j].block.params())));
  zero_all(all);
  return out;
}

ParamCounts count_params(const LocalModel& model) {
  ParamCounts c;
  for (const auto& u : model.units) {
    BlockParamCount b;
    for (const auto& l : u.block.layers) {
      if (!l.parametric()) continue;
      b.theta += l.param_count();
      c.layers.push_back(l.param_count());
    }
    if (u.head) {
      b.gamma = u.head->mirror.param_count();
      b.bias = u.head->config.use_lb ? u.head->bias.numel() : 0;
      b.scale = u.head->config.use_scalable ? 1 : 0;
      b.projection = u.head->projection.param_count();
    }
    c.total.theta += b.theta;
    c.total.gamma += b.gamma;
    c.total.bias += b.bias;
    c.total.scale += b.scale;
    c.total.projection += b.projection;
    c.blocks.push_back(b);
  }
  return c;
}

namespace {

std::uint64_t layer_flops(const LayerSpec& l, const Shape& in, const Shape& out, FlopCounts& c) {
  std::uint64_t f = 0;
  switch (l.kind) {
    case LayerKind::linear: {
      const std::uint64_t mm = 2ULL * in[0] * l.in * l.out;
      c.by_op["matmul"] += mm;
      c.by_op["bias_add"] += shape_numel(out);
      f = mm + shape_numel(out);
      break;
    }
    case LayerKind::conv2d: {
      const std::uint64_t mm = 2ULL * shape_numel(out) * l.in * l.kh * l.kw;
      c.by_op["conv2d"] += mm;
      c.by_op["bias_add"] += shape_numel(out);
      f = mm + shape_numel(out);
      break;
    }
    case LayerKind::relu:
      c.by_op["relu"] += shape_numel(out);
      break;
    case LayerKind::mean_pool2d:
      c.by_op["mean_pool2d"] += shape_numel(in);
      break;
    case LayerKind::flatten:
      break;
  }
  return f;
}

}  // namespace

FlopCounts count_flops(const LocalModel& model, const Shape& input) {
  FlopCounts c;
  Shape shape = input;
  for (const auto& u : model.units) {
    BlockFlops b;
    for (const auto& l : u.block.layers) {
      const Shape next = l.output_shape(shape);
      const auto f = layer_flops(l, shape, next, c);
      if (l.parametric()) c.layers.push_back(f);
      b.backbone += f;
      shape = next;
    }
    if (u.head) {
      // Head flops are tallied separately from the backbone op totals.
      FlopCounts scratch;
      const Shape z = u.head->mirror.output_shape(shape);
      b.mirror = layer_flops(u.head->mirror, shape, z, scratch);
      const std::uint64_t per = shape_numel(z);
      b.lb = u.head->config.use_lb ? per : 0;
      Shape a = z;
      if (a.size() == 4) a = {a[0], a[1]};
      b.projection = layer_flops(u.head->projection, a, u.head->projection.output_shape(a), scratch);
      c.by_op["head_mirror"] += b.mirror;
      c.by_op["head_lb"] += b.lb;
      c.by_op["head_projection"] += b.projection;
    }
    c.total.backbone += b.backbone;
    c.total.mirror += b.mirror;
    c.total.lb += b.lb;
    c.total.projection += b.projection;
    c.blocks.push_back(b);
  }
  return c;
}

}  // namespace manpp
