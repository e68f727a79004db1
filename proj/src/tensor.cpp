#include "manpp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "manpp/errors.hpp"

namespace manpp {

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// Row-major products with a fixed summation order, so results do not depend
// on buffer alignment or tiling: every c entry adds its terms in increasing
// order of the inner index, starting from its current value.

using Vec = double __attribute__((vector_size(64)));

inline Vec loadv(const double* p) {
  Vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void storev(double* p, Vec v) { std::memcpy(p, &v, sizeof v); }

// c[M,N] += A * b[K,N] with A(r, q) = a[r * rs + q * cs]. Tiles of 4 rows by
// 32 columns stay in registers across the whole inner loop.
void gemm_strided(const double* a, std::size_t rs, std::size_t cs, const double* b, double* c, std::size_t M,
                  std::size_t K, std::size_t N) {
  constexpr std::size_t RB = 4, CB = 32, VB = CB / 8;
  std::size_t j0 = 0;
  for (; j0 + CB <= N; j0 += CB) {
    std::size_t i0 = 0;
    for (; i0 + RB <= M; i0 += RB) {
      Vec acc[RB][VB];
      for (std::size_t r = 0; r < RB; ++r)
        for (std::size_t v = 0; v < VB; ++v) acc[r][v] = loadv(c + (i0 + r) * N + j0 + 8 * v);
      const double* ar = a + i0 * rs;
      for (std::size_t q = 0; q < K; ++q) {
        const double* bq = b + q * N + j0;
        Vec bv[VB];
        for (std::size_t v = 0; v < VB; ++v) bv[v] = loadv(bq + 8 * v);
        const double* aq = ar + q * cs;
        for (std::size_t r = 0; r < RB; ++r) {
          const double av = aq[r * rs];
          for (std::size_t v = 0; v < VB; ++v) acc[r][v] += av * bv[v];
        }
      }
      for (std::size_t r = 0; r < RB; ++r)
        for (std::size_t v = 0; v < VB; ++v) storev(c + (i0 + r) * N + j0 + 8 * v, acc[r][v]);
    }
    for (; i0 < M; ++i0) {
      Vec acc[VB];
      for (std::size_t v = 0; v < VB; ++v) acc[v] = loadv(c + i0 * N + j0 + 8 * v);
      for (std::size_t q = 0; q < K; ++q) {
        const double av = a[i0 * rs + q * cs];
        const double* bq = b + q * N + j0;
        for (std::size_t v = 0; v < VB; ++v) acc[v] += av * loadv(bq + 8 * v);
      }
      for (std::size_t v = 0; v < VB; ++v) storev(c + i0 * N + j0 + 8 * v, acc[v]);
    }
  }
  if (j0 == N) return;
  for (std::size_t i = 0; i < M; ++i) {
    double* ci = c + i * N;
    for (std::size_t q = 0; q < K; ++q) {
      const double av = a[i * rs + q * cs];
      const double* bq = b + q * N;
      for (std::size_t j = j0; j < N; ++j) ci[j] += av * bq[j];
    }
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, k, 1, b, c, m, k, n);
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, 1, k, b, c, k, m, n);
}

thread_local std::uint64_t g_next_id = 1;
thread_local bool g_in_backward = false;

std::uint64_t next_id() { return g_next_id++; }

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_finite_debug([[maybe_unused]] const Node& n, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!all_finite(n.value)) throw InputError(std::string("non-finite value produced by ") + op);
#endif
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Builds op results. Parents that do not require grad are dropped entirely so
// constant subgraphs are freed as soon as possible.
struct OpBuilder {
  static Tensor make(Shape shape, std::vector<double> value,
                     std::vector<NodePtr> parents, std::function<void(Node&)> fn,
                     const char* op) {
    if (g_in_backward) throw UsageError("tape is frozen during backward");
    auto node = std::make_shared<Node>();
    node->id = next_id();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->leaf = false;
    node->requires_grad =
        std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (node->requires_grad) {
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
    check_finite_debug(*node, op);
    return Tensor(std::move(node));
  }

  static const NodePtr& node(const Tensor& t) {
    if (!t.node_) throw UsageError("operation on an undefined tensor");
    return t.node_;
  }
};

namespace {
const NodePtr& N(const Tensor& t) { return OpBuilder::node(t); }
}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  if (!all_finite(data)) throw InputError("tensor created with non-finite values");
  node_ = std::make_shared<Node>();
  node_->id = next_id();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->ensure_grad();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_snapshot(const TensorSnapshot& snap, bool requires_grad) {
  return Tensor(snap.shape, snap.data, requires_grad);
}

const Shape& Tensor::shape() const { return N(*this)->shape; }
std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dim index out of range for " + shape_str(s));
  return s[i];
}
std::size_t Tensor::numel() const { return N(*this)->value.size(); }
std::span<const double> Tensor::data() const { return N(*this)->value; }

std::span<double> Tensor::mutable_data() {
  auto& n = N(*this);
  if (!n->leaf) throw UsageError("in-place write to a non-leaf tensor");
  return n->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return N(*this)->requires_grad; }
bool Tensor::is_leaf() const { return N(*this)->leaf; }
std::uint64_t Tensor::node_id() const { return N(*this)->id; }

std::span<const double> Tensor::grad() const {
  auto& n = N(*this);
  if (n->requires_grad) n->ensure_grad();
  return n->grad;
}

std::span<double> Tensor::mutable_grad() {
  auto& n = N(*this);
  n->ensure_grad();
  return n->grad;
}

void Tensor::zero_grad() {
  auto& n = N(*this);
  std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto out = std::make_shared<Node>();
  out->id = next_id();
  out->shape = shape();
  out->value = N(*this)->value;
  return Tensor(std::move(out));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = requires_grad();
  if (t.node_->requires_grad) t.node_->ensure_grad();
  return t;
}

TensorSnapshot Tensor::snapshot() const { return {shape(), N(*this)->value}; }

void Tensor::assign(const TensorSnapshot& snap) {
  auto& n = N(*this);
  if (!n->leaf) throw UsageError("assign to a non-leaf tensor");
  if (snap.shape != n->shape) {
    throw ShapeError("assign " + shape_str(snap.shape) + " into " + shape_str(n->shape));
  }
  if (!all_finite(snap.data)) throw InputError("assign of non-finite values");
  n->value = snap.data;
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  if (g_in_backward) throw UsageError("backward called while the tape is frozen");
  const auto& root = N(loss);
  if (root->value.size() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_str(root->shape));
  }
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  struct Freeze {
    Freeze() { g_in_backward = true; }
    ~Freeze() { g_in_backward = false; }
  } freeze;

  for (Node* n : order) {
    if (n->leaf) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return OpBuilder::make({m, n}, std::move(out), {N(a), N(b)},
                         [m, k, n](Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           if (pa.requires_grad) {
                             pa.ensure_grad();
                             gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
                           }
                         },
                         "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2 && w.rank() == 2, "linear needs x[n,in] and w[out,in]");
  const auto n = x.dim(0), in = x.dim(1), out = w.dim(0);
  require(w.dim(1) == in, "linear input width " + std::to_string(in) + " does not match weight " +
                              shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.rank() == 1 && b.dim(0) == out, "linear bias shape mismatch");
  std::vector<double> y(n * out, 0.0);
  gemm_nt(x.data().data(), w.data().data(), y.data(), n, in, out);
  if (has_bias) {
    const double* bv = b.data().data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) y[i * out + o] += bv[o];
  }
  std::vector<NodePtr> parents{N(x), N(w)};
  if (has_bias) parents.push_back(N(b));
  return OpBuilder::make({n, out}, std::move(y), std::move(parents),
                         [n, in, out, has_bias](Node& self) {
                           auto& px = *self.parents[0];
                           auto& pw = *self.parents[1];
                           const double* g = self.grad.data();
                           if (px.requires_grad) {
                             px.ensure_grad();
                             gemm_nn(g, pw.value.data(), px.grad.data(), n, out, in);
                           }
                           if (pw.requires_grad) {
                             pw.ensure_grad();
                             gemm_tn(g, px.value.data(), pw.grad.data(), n, out, in);
                           }
                           if (has_bias && self.parents[2]->requires_grad) {
                             auto& pb = *self.parents[2];
                             pb.ensure_grad();
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t o = 0; o < out; ++o) pb.grad[o] += g[i * out + o];
                           }
                         },
                         "linear");
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride) {
  require(x.rank() == 4 && k.rank() == 4, "conv2d needs x[n,c,h,w] and k[o,c,kh,kw]");
  if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  require(k.dim(1) == c, "conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                             shape_str(k.shape()));
  require(kh <= h && kw <= w, "conv2d kernel " + shape_str(k.shape()) + " larger than input " +
                                  shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == o, "conv2d bias shape mismatch");
  const auto oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;

  const auto xs = x.data();
  const auto ks = k.data();
  std::vector<double> y(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      double* yp = &y[((b * o + oc) * oh) * ow];
      for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t r = 0; r < kh; ++r)
          for (std::size_t s = 0; s < kw; ++s) {
            const double kv = ks[((oc * c + ic) * kh + r) * kw + s];
            for (std::size_t i = 0; i < oh; ++i) {
              const double* xp = &xs[((b * c + ic) * h + i * stride + r) * w + s];
              for (std::size_t j = 0; j < ow; ++j) yp[i * ow + j] += kv * xp[j * stride];
            }
          }
      if (has_bias) {
        const double bv = bias.data()[oc];
        for (std::size_t i = 0; i < oh * ow; ++i) yp[i] += bv;
      }
    }

  std::vector<NodePtr> parents{N(x), N(k)};
  if (has_bias) parents.push_back(N(bias));
  return OpBuilder::make(
      {n, o, oh, ow}, std::move(y), std::move(parents),
      [=](Node& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        const auto& g = self.grad;
        if (px.requires_grad) px.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < o; ++oc) {
            const double* gp = &g[((b * o + oc) * oh) * ow];
            for (std::size_t ic = 0; ic < c; ++ic)
              for (std::size_t r = 0; r < kh; ++r)
                for (std::size_t s = 0; s < kw; ++s) {
                  const std::size_t kidx = ((oc * c + ic) * kh + r) * kw + s;
                  const double kv = pk.value[kidx];
                  double kacc = 0.0;
                  for (std::size_t i = 0; i < oh; ++i) {
                    const std::size_t xrow = ((b * c + ic) * h + i * stride + r) * w + s;
                    for (std::size_t j = 0; j < ow; ++j) {
                      const double gv = gp[i * ow + j];
                      kacc += gv * px.value[xrow + j * stride];
                      if (px.requires_grad) px.grad[xrow + j * stride] += gv * kv;
                    }
                  }
                  if (pk.requires_grad) pk.grad[kidx] += kacc;
                }
            if (has_bias && self.parents[2]->requires_grad) {
              auto& pb = *self.parents[2];
              pb.ensure_grad();
              double acc = 0.0;
              for (std::size_t i = 0; i < oh * ow; ++i) acc += gp[i];
              pb.grad[oc] += acc;
            }
          }
      },
      "conv2d");
}

Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride) {
  return conv2d(x, k, Tensor{}, stride);
}

Tensor relu(const Tensor& x) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  return OpBuilder::make(x.shape(), std::move(y), {N(x)},
                         [](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (px.value[i] > 0.0) px.grad[i] += self.grad[i];
                         },
                         "relu");
}

Tensor mean_pool2d(const Tensor& x, std::size_t window) {
  require(x.rank() == 4, "mean_pool2d needs x[n,c,h,w]");
  if (window == 0) throw ShapeError("mean_pool2d window must be >= 1");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(window <= h && window <= w, "mean_pool2d window larger than input " + shape_str(x.shape()));
  const auto oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  const auto xs = x.data();
  std::vector<double> y(n * c * oh * ow, 0.0);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < window; ++r)
          for (std::size_t s = 0; s < window; ++s) acc += xs[(p * h + i * window + r) * w + j * window + s];
        y[(p * oh + i) * ow + j] = acc * inv;
      }
  return OpBuilder::make({n, c, oh, ow}, std::move(y), {N(x)},
                         [=](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (std::size_t p = 0; p < n * c; ++p)
                             for (std::size_t i = 0; i < oh; ++i)
                               for (std::size_t j = 0; j < ow; ++j) {
                                 const double gv = self.grad[(p * oh + i) * ow + j] * inv;
                                 for (std::size_t r = 0; r < window; ++r)
                                   for (std::size_t s = 0; s < window; ++s)
                                     px.grad[(p * h + i * window + r) * w + j * window + s] += gv;
                               }
                         },
                         "mean_pool2d");
}

Tensor global_mean_pool(const Tensor& x) {
  require(x.rank() == 4, "global_mean_pool needs x[n,c,h,w]");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  const auto xs = x.data();
  std::vector<double> y(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xs[p * hw + i];
    y[p] = acc * inv;
  }
  return OpBuilder::make({n, c}, std::move(y), {N(x)},
                         [=](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (std::size_t p = 0; p < n * c; ++p) {
                             const double gv = self.grad[p] * inv;
                             for (std::size_t i = 0; i < hw; ++i) px.grad[p * hw + i] += gv;
                           }
                         },
                         "global_mean_pool");
}

Tensor flatten(const Tensor& x) {
  require(x.rank() >= 1, "flatten of a rank-0 tensor");
  const auto n = x.dim(0);
  const auto rest = x.numel() / n;
  std::vector<double> y(x.data().begin(), x.data().end());
  return OpBuilder::make({n, rest}, std::move(y), {N(x)},
                         [](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
                         },
                         "flatten");
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto as = a.data(), bs = b.data();
  if (a.shape() == b.shape()) {
    std::vector<double> y(as.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] + bs[i];
    return OpBuilder::make(a.shape(), std::move(y), {N(a), N(b)},
                           [](Node& self) {
                             for (auto& p : self.parents) {
                               if (!p->requires_grad) continue;
                               p->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
                             }
                           },
                           "add");
  }
  require(a.rank() >= 2 && b.rank() == 1 && b.dim(0) == a.dim(1),
          "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
              " are neither equal nor a channel bias-add");
  const auto n = a.dim(0), c = a.dim(1), inner = a.numel() / (n * c);
  std::vector<double> y(as.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const auto idx = (r * c + ch) * inner + i;
        y[idx] = as[idx] + bs[ch];
      }
  return OpBuilder::make(a.shape(), std::move(y), {N(a), N(b)},
                         [n, c, inner](Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           if (pa.requires_grad) {
                             pa.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < inner; ++i) acc += self.grad[(r * c + ch) * inner + i];
                                 pb.grad[ch] += acc;
                               }
                           }
                         },
                         "bias_add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const auto as = a.data(), bs = b.data();
  std::vector<double> y(as.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] * bs[i];
  return OpBuilder::make(a.shape(), std::move(y), {N(a), N(b)},
                         [](Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           // Read both values before writing: a and b may be the same node.
                           if (pa.requires_grad) pa.ensure_grad();
                           if (pb.requires_grad) pb.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             const double av = pa.value[i], bv = pb.value[i];
                             if (pa.requires_grad) pa.grad[i] += self.grad[i] * bv;
                             if (pb.requires_grad) pb.grad[i] += self.grad[i] * av;
                           }
                         },
                         "mul");
}

Tensor scale_by(const Tensor& x, double s) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * s;
  return OpBuilder::make(x.shape(), std::move(y), {N(x)},
                         [s](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * s;
                         },
                         "scale_by");
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "scale_by expects a one-element scale, got " + shape_str(s.shape()));
  const double sv = s.data()[0];
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * sv;
  return OpBuilder::make(x.shape(), std::move(y), {N(x), N(s)},
                         [](Node& self) {
                           auto& px = *self.parents[0];
                           auto& ps = *self.parents[1];
                           const double sv = ps.value[0];
                           if (px.requires_grad) {
                             px.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * sv;
                           }
                           if (ps.requires_grad) {
                             ps.ensure_grad();
                             double acc = 0.0;
                             for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.value[i];
                             ps.grad[0] += acc;
                           }
                         },
                         "scale_by");
}

Tensor sum(const Tensor& x) {
  const auto xs = x.data();
  const double total = std::accumulate(xs.begin(), xs.end(), 0.0);
  return OpBuilder::make({1}, {total}, {N(x)},
                         [](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           for (auto& g : px.grad) g += self.grad[0];
                         },
                         "sum");
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "softmax_cross_entropy needs logits[n,c]");
  const auto n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw InputError("label " + std::to_string(labels[r]) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto xs = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &xs[r * c];
    const auto top = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    const double mx = row[top];
    // log-sum-exp as max + log1p(sum over non-max terms) keeps tiny losses exact.
    double rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[r * c + j] = e;
      if (j != top) rest += e;
    }
    const double denom = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= denom;
    total += (mx - row[labels[r]]) + std::log1p(rest);
  }
  const double loss = total / static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return OpBuilder::make({1}, {loss}, {N(logits)},
                         [n, c, probs = std::move(probs), lab = std::move(lab)](Node& self) {
                           auto& px = *self.parents[0];
                           px.ensure_grad();
                           const double scale = self.grad[0] / static_cast<double>(n);
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < c; ++j) {
                               const double onehot = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
                               px.grad[r * c + j] += (probs[r * c + j] - onehot) * scale;
                             }
                         },
                         "softmax_cross_entropy");
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "count_correct shape mismatch");
  const auto n = logits.dim(0), c = logits.dim(1);
  const auto xs = logits.data();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &xs[r * c];
    const auto top = std::max_element(row, row + c) - row;
    if (top == labels[r]) ++hits;
  }
  return hits;
}

}  // namespace manpp
