#include "tams/ndgrad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tams::ndgrad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << 'x';
    ss << shape[i];
  }
  ss << ']';
  return ss.str();
}

namespace detail {

struct GraphState {
  std::vector<std::function<void()>> ops;                 // backward closures
  std::vector<std::shared_ptr<TensorData>> op_outputs;    // zeroed per sweep
  std::int64_t next_node = 0;
  std::uint64_t domain_errors = 0;
};

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized iff tracked
  bool tracked = false;
  bool is_leaf = false;
  std::int64_t node_id = -1;
  std::shared_ptr<GraphState> graph;
};

}  // namespace detail

using detail::GraphState;
using detail::TensorData;

namespace {

thread_local std::uint64_t g_domain_errors = 0;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::shared_ptr<TensorData> make_plain(Shape shape, std::vector<double> value) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  return d;
}

void require_defined(const std::shared_ptr<TensorData>& d, const char* who) {
  if (!d) throw ValueError(std::string(who) + ": undefined tensor");
}

// Common graph of all tracked inputs, or null when none is tracked.
std::shared_ptr<GraphState> resolve_graph(
    std::initializer_list<const std::shared_ptr<TensorData>*> inputs) {
  std::shared_ptr<GraphState> g;
  for (const auto* in : inputs) {
    const auto& d = *in;
    if (d && d->tracked) {
      if (!g) {
        g = d->graph;
      } else if (g != d->graph) {
        throw ValueError("operands belong to different graphs");
      }
    }
  }
  return g;
}

std::shared_ptr<TensorData> make_result(Shape shape, std::vector<double> value,
                                        const std::shared_ptr<GraphState>& g) {
  auto d = make_plain(std::move(shape), std::move(value));
  if (g) {
    d->tracked = true;
    d->graph = g;
    d->node_id = g->next_node++;
    d->grad.assign(d->value.size(), 0.0);
    g->op_outputs.push_back(d);
  }
  return d;
}

void record(const std::shared_ptr<GraphState>& g, std::function<void()> fn) {
  if (g) g->ops.push_back(std::move(fn));
}

struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> a_stride;  // per out dim; 0 where broadcast
  std::vector<std::size_t> b_stride;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

BroadcastPlan make_broadcast(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out_shape.resize(rank);
  p.a_stride.assign(rank, 0);
  p.b_stride.assign(rank, 0);
  auto sa = row_major_strides(a);
  auto sb = row_major_strides(b);
  for (std::size_t d = 0; d < rank; ++d) {
    std::size_t pad_a = rank - a.size();
    std::size_t pad_b = rank - b.size();
    std::size_t ea = d < pad_a ? 1 : a[d - pad_a];
    std::size_t eb = d < pad_b ? 1 : b[d - pad_b];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes not broadcastable: " + shape_to_string(a) + " vs " +
                       shape_to_string(b));
    }
    p.out_shape[d] = std::max(ea, eb);
    if (ea != 1) p.a_stride[d] = sa[d - pad_a];
    if (eb != 1) p.b_stride[d] = sb[d - pad_b];
  }
  return p;
}

template <typename F>
void broadcast_walk(const BroadcastPlan& p, F&& f) {
  std::size_t n = numel(p.out_shape);
  std::size_t rank = p.out_shape.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    f(lin, ao, bo);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ao += p.a_stride[d];
      bo += p.b_stride[d];
      if (idx[d] < p.out_shape[d]) break;
      ao -= p.a_stride[d] * p.out_shape[d];
      bo -= p.b_stride[d] * p.out_shape[d];
      idx[d] = 0;
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

std::shared_ptr<TensorData> payload(const Tensor& t);
Tensor wrap(std::shared_ptr<TensorData> d);

// fwd(a_val, b_val) -> out_val;
// bwd(g, a_val, b_val, out_val) -> (da, db)
template <typename Fwd, typename Bwd>
Tensor binary_ew(const char* name, const Tensor& ta, const Tensor& tb, Fwd fwd, Bwd bwd) {
  auto a = payload(ta);
  auto b = payload(tb);
  require_defined(a, name);
  require_defined(b, name);
  BroadcastPlan plan = make_broadcast(a->shape, b->shape);
  std::vector<double> out(numel(plan.out_shape));
  broadcast_walk(plan, [&](std::size_t lin, std::size_t ao, std::size_t bo) {
    out[lin] = fwd(a->value[ao], b->value[bo]);
  });
  auto g = resolve_graph({&a, &b});
  auto res = make_result(plan.out_shape, std::move(out), g);
  record(g, [a, b, res, plan, bwd]() {
    broadcast_walk(plan, [&](std::size_t lin, std::size_t ao, std::size_t bo) {
      double gv = res->grad[lin];
      auto [da, db] = bwd(gv, a->value[ao], b->value[bo], res->value[lin]);
      if (a->tracked) a->grad[ao] += da;
      if (b->tracked) b->grad[bo] += db;
    });
  });
  return wrap(res);
}

// fwd(x) -> y; bwd(g, x, y) -> dx
template <typename Fwd, typename Bwd>
Tensor unary_ew(const char* name, const Tensor& tx, Fwd fwd, Bwd bwd) {
  auto x = payload(tx);
  require_defined(x, name);
  std::vector<double> out(x->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x->value[i]);
  auto g = resolve_graph({&x});
  auto res = make_result(x->shape, std::move(out), g);
  record(g, [x, res, bwd]() {
    if (!x->tracked) return;
    for (std::size_t i = 0; i < x->value.size(); ++i) {
      x->grad[i] += bwd(res->grad[i], x->value[i], res->value[i]);
    }
  });
  return wrap(res);
}

std::shared_ptr<TensorData> payload(const Tensor& t);

}  // namespace

// ---- Tensor ----

struct OpAccess {
  static std::shared_ptr<TensorData> get(const Tensor& t) { return t.data_; }
  static Tensor make(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }
  static std::shared_ptr<GraphState> state(const Graph& g) { return g.state_; }
};

namespace {
std::shared_ptr<TensorData> payload(const Tensor& t) { return OpAccess::get(t); }
Tensor wrap(std::shared_ptr<TensorData> d) { return OpAccess::make(std::move(d)); }
}  // namespace

Tensor::Tensor() = default;

Tensor::Tensor(double scalar) : data_(make_plain({}, {scalar})) {}

Tensor::Tensor(Shape shape, double fill) {
  std::size_t n = numel(shape);
  data_ = make_plain(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_to_string(shape));
  }
  data_ = make_plain(std::move(shape), std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

const Shape& Tensor::shape() const {
  require_defined(data_, "shape");
  return data_->shape;
}

std::size_t Tensor::size() const {
  require_defined(data_, "size");
  return data_->value.size();
}

std::size_t Tensor::rank() const { return shape().size(); }

const std::vector<double>& Tensor::data() const {
  require_defined(data_, "data");
  return data_->value;
}

std::vector<double>& Tensor::mutable_data() {
  require_defined(data_, "mutable_data");
  if (data_->tracked) throw ValueError("tracked tensors are immutable");
  return data_->value;
}

double Tensor::item() const {
  require_defined(data_, "item");
  if (data_->value.size() != 1) {
    throw ShapeError("item() requires a one-element tensor, got " + shape_to_string(data_->shape));
  }
  return data_->value[0];
}

bool Tensor::tracked() const { return data_ && data_->tracked; }

std::int64_t Tensor::node_id() const {
  require_defined(data_, "node_id");
  return data_->node_id;
}

const std::vector<double>& Tensor::grad() const {
  require_defined(data_, "grad");
  if (!data_->tracked) throw ValueError("grad() on untracked tensor");
  return data_->grad;
}

Tensor Tensor::detached() const {
  require_defined(data_, "detached");
  return wrap(make_plain(data_->shape, data_->value));
}

// ---- Graph ----

Graph::Graph() : state_(std::make_shared<GraphState>()) {}

Tensor Graph::leaf(const Tensor& value) {
  auto src = payload(value);
  require_defined(src, "leaf");
  auto d = make_plain(src->shape, src->value);
  d->tracked = true;
  d->is_leaf = true;
  d->graph = state_;
  d->node_id = state_->next_node++;
  d->grad.assign(d->value.size(), 0.0);
  return wrap(d);
}

void Graph::backward(const Tensor& root) {
  auto r = payload(root);
  require_defined(r, "backward");
  if (!r->tracked || r->graph != state_) {
    throw ValueError("backward root is not tracked on this graph");
  }
  if (r->value.size() != 1) {
    throw ShapeError("backward root must be scalar, got " + shape_to_string(r->shape));
  }
  for (auto& out : state_->op_outputs) {
    std::fill(out->grad.begin(), out->grad.end(), 0.0);
  }
  r->grad[0] += 1.0;
  for (auto it = state_->ops.rbegin(); it != state_->ops.rend(); ++it) (*it)();
}

std::int64_t Graph::node_count() const { return state_->next_node; }

std::uint64_t Graph::domain_error_count() const { return state_->domain_errors; }

std::uint64_t domain_error_count() { return g_domain_errors; }
void reset_domain_error_count() { g_domain_errors = 0; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double) { return std::pair<double, double>(g, g); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double) { return std::pair<double, double>(g, -g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double) { return std::pair<double, double>(g * y, g * x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double) {
        return std::pair<double, double>(g / y, -g * x / (y * y));
      });
}

Tensor neg(const Tensor& a) {
  return unary_ew(
      "neg", a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor relu(const Tensor& a) {
  return unary_ew(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_ew(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_ew(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  auto x = payload(a);
  require_defined(x, "log");
  bool bad = false;
  for (double v : x->value) {
    if (!(v > 0.0)) {
      bad = true;
      break;
    }
  }
  if (bad) {
    ++g_domain_errors;
    if (x->tracked) ++x->graph->domain_errors;
  }
  return unary_ew(
      "log", a,
      [](double v) { return v > 0.0 ? std::log(v) : std::numeric_limits<double>::quiet_NaN(); },
      [](double g, double v, double) { return g / v; });
}

Tensor tanh(const Tensor& a) {
  return unary_ew(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor softplus(const Tensor& a) {
  return unary_ew(
      "softplus", a, [](double x) { return stable_softplus(x); },
      [](double g, double x, double) { return g * stable_sigmoid(x); });
}

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw ValueError("elementwise: binary kind requires a second operand");
    return *b;
  };
  switch (kind) {
    case EwKind::add: return add(a, need_b());
    case EwKind::sub: return sub(a, need_b());
    case EwKind::mul: return mul(a, need_b());
    case EwKind::div: return div(a, need_b());
    case EwKind::neg: return neg(a);
    case EwKind::relu: return relu(a);
    case EwKind::sigmoid: return sigmoid(a);
    case EwKind::exp: return exp(a);
    case EwKind::log: return log(a);
    case EwKind::tanh: return tanh(a);
    case EwKind::softplus: return softplus(a);
  }
  throw ValueError("elementwise: unknown kind");
}

// ---- matmul ----

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  auto a = payload(ta);
  auto b = payload(tb);
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a->shape.size() != 2 || b->shape.size() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_to_string(a->shape) + " and " +
                     shape_to_string(b->shape));
  }
  std::size_t m = a->shape[0], k = a->shape[1];
  std::size_t k2 = b->shape[0], n = b->shape[1];
  if (k != k2) {
    throw ShapeError("matmul inner dimensions differ: " + shape_to_string(a->shape) + " * " +
                     shape_to_string(b->shape));
  }
  std::vector<double> out(m * n);
  {
    CMapRM A(a->value.data(), m, k), B(b->value.data(), k, n);
    MapRM C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto g = resolve_graph({&a, &b});
  auto res = make_result({m, n}, std::move(out), g);
  record(g, [a, b, res, m, k, n]() {
    CMapRM dC(res->grad.data(), m, n);
    if (a->tracked) {
      CMapRM B(b->value.data(), k, n);
      MapRM dA(a->grad.data(), m, k);
      dA.noalias() += dC * B.transpose();
    }
    if (b->tracked) {
      CMapRM A(a->value.data(), m, k);
      MapRM dB(b->grad.data(), k, n);
      dB.noalias() += A.transpose() * dC;
    }
  });
  return wrap(res);
}

// ---- conv2d ----

namespace {

// Zero-padded 3x3 im2col: M(HW, C*9), column-major.
void fill_im2col(const double* x, std::size_t C, std::size_t H, std::size_t W,
                 Eigen::MatrixXd& M) {
  std::ptrdiff_t iH = static_cast<std::ptrdiff_t>(H);
  std::ptrdiff_t iW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::ptrdiff_t di = -1; di <= 1; ++di) {
      for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
        std::size_t col = c * 9 + static_cast<std::size_t>((di + 1) * 3 + (dj + 1));
        double* dst = M.data() + col * M.rows();
        const double* plane = x + c * H * W;
        for (std::ptrdiff_t i = 0; i < iH; ++i) {
          std::ptrdiff_t si = i + di;
          for (std::ptrdiff_t j = 0; j < iW; ++j) {
            std::ptrdiff_t sj = j + dj;
            bool in = si >= 0 && si < iH && sj >= 0 && sj < iW;
            dst[i * iW + j] = in ? plane[si * iW + sj] : 0.0;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& tx, const Tensor& tk) {
  auto x = payload(tx);
  auto k = payload(tk);
  require_defined(x, "conv2d");
  require_defined(k, "conv2d");
  if (x->shape.size() != 4) {
    throw ShapeError("conv2d input must be [B,C,H,W], got " + shape_to_string(x->shape));
  }
  if (k->shape.size() != 4 || k->shape[2] != 3 || k->shape[3] != 3) {
    throw ShapeError("conv2d kernel must be [F,C,3,3], got " + shape_to_string(k->shape));
  }
  std::size_t B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  std::size_t F = k->shape[0];
  if (k->shape[1] != C) {
    throw ShapeError("conv2d channel mismatch: input " + shape_to_string(x->shape) + ", kernel " +
                     shape_to_string(k->shape));
  }
  std::size_t HW = H * W, C9 = C * 9;
  std::vector<double> out(B * F * HW);
  {
    CMapRM Km(k->value.data(), F, C9);
    Eigen::MatrixXd M(HW, C9);
    Eigen::MatrixXd Y(HW, F);
    for (std::size_t b = 0; b < B; ++b) {
      fill_im2col(x->value.data() + b * C * HW, C, H, W, M);
      Y.noalias() = M * Km.transpose();
      for (std::size_t f = 0; f < F; ++f) {
        std::copy(Y.data() + f * HW, Y.data() + (f + 1) * HW, out.data() + (b * F + f) * HW);
      }
    }
  }
  auto g = resolve_graph({&x, &k});
  auto res = make_result({B, F, H, W}, std::move(out), g);
  record(g, [x, k, res, B, C, H, W, F]() {
    std::size_t HW = H * W, C9 = C * 9;
    Eigen::MatrixXd dY(HW, F);
    Eigen::MatrixXd M(HW, C9);
    Eigen::MatrixXd dK = Eigen::MatrixXd::Zero(F, C9);
    Eigen::MatrixXd dM(HW, C9);
    CMapRM Km(k->value.data(), F, C9);
    std::ptrdiff_t iH = static_cast<std::ptrdiff_t>(H);
    std::ptrdiff_t iW = static_cast<std::ptrdiff_t>(W);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t f = 0; f < F; ++f) {
        const double* src = res->grad.data() + (b * F + f) * HW;
        std::copy(src, src + HW, dY.data() + f * HW);
      }
      if (k->tracked || x->tracked) fill_im2col(x->value.data() + b * C * HW, C, H, W, M);
      if (k->tracked) dK.noalias() += dY.transpose() * M;
      if (x->tracked) {
        dM.noalias() = dY * Km;
        double* dx = x->grad.data() + b * C * HW;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::ptrdiff_t di = -1; di <= 1; ++di) {
            for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
              std::size_t col = c * 9 + static_cast<std::size_t>((di + 1) * 3 + (dj + 1));
              const double* gcol = dM.data() + col * HW;
              double* plane = dx + c * HW;
              for (std::ptrdiff_t i = 0; i < iH; ++i) {
                std::ptrdiff_t si = i + di;
                if (si < 0 || si >= iH) continue;
                for (std::ptrdiff_t j = 0; j < iW; ++j) {
                  std::ptrdiff_t sj = j + dj;
                  if (sj < 0 || sj >= iW) continue;
                  plane[si * iW + sj] += gcol[i * iW + j];
                }
              }
            }
          }
        }
      }
    }
    if (k->tracked) {
      MapRM kg(k->grad.data(), F, C9);
      kg.noalias() += dK;
    }
  });
  return wrap(res);
}

// ---- pooling / shaping ----

Tensor maxpool2(const Tensor& tx) {
  auto x = payload(tx);
  require_defined(x, "maxpool2");
  if (x->shape.size() != 4 || x->shape[2] % 2 != 0 || x->shape[3] % 2 != 0) {
    throw ShapeError("maxpool2 expects [B,C,H,W] with even H,W, got " +
                     shape_to_string(x->shape));
  }
  std::size_t B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  std::size_t OH = H / 2, OW = W / 2;
  std::vector<double> out(B * C * OH * OW);
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = x->value.data() + bc * H * W;
    double* oplane = out.data() + bc * OH * OW;
    std::uint32_t* aplane = argmax.data() + bc * OH * OW;
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        std::size_t base = 2 * i * W + 2 * j;
        std::size_t best = base;
        double bv = plane[base];
        for (std::size_t q = 1; q < 4; ++q) {
          std::size_t off = base + (q / 2) * W + (q % 2);
          if (plane[off] > bv) {
            bv = plane[off];
            best = off;
          }
        }
        oplane[i * OW + j] = bv;
        aplane[i * OW + j] = static_cast<std::uint32_t>(bc * H * W + best);
      }
    }
  }
  auto g = resolve_graph({&x});
  auto res = make_result({B, C, OH, OW}, std::move(out), g);
  record(g, [x, res, argmax = std::move(argmax)]() {
    if (!x->tracked) return;
    for (std::size_t i = 0; i < res->grad.size(); ++i) x->grad[argmax[i]] += res->grad[i];
  });
  return wrap(res);
}

Tensor upsample2(const Tensor& tx) {
  auto x = payload(tx);
  require_defined(x, "upsample2");
  if (x->shape.size() != 4) {
    throw ShapeError("upsample2 expects [B,C,H,W], got " + shape_to_string(x->shape));
  }
  std::size_t B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  std::size_t OH = 2 * H, OW = 2 * W;
  std::vector<double> out(B * C * OH * OW);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = x->value.data() + bc * H * W;
    double* oplane = out.data() + bc * OH * OW;
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        oplane[i * OW + j] = plane[(i / 2) * W + (j / 2)];
      }
    }
  }
  auto g = resolve_graph({&x});
  auto res = make_result({B, C, OH, OW}, std::move(out), g);
  record(g, [x, res, B, C, H, W]() {
    if (!x->tracked) return;
    std::size_t OH = 2 * H, OW = 2 * W;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double* gplane = res->grad.data() + bc * OH * OW;
      double* xg = x->grad.data() + bc * H * W;
      for (std::size_t i = 0; i < OH; ++i) {
        for (std::size_t j = 0; j < OW; ++j) {
          xg[(i / 2) * W + (j / 2)] += gplane[i * OW + j];
        }
      }
    }
  });
  return wrap(res);
}

Tensor reshape(const Tensor& tx, Shape shape) {
  auto x = payload(tx);
  require_defined(x, "reshape");
  if (numel(shape) != x->value.size()) {
    throw ShapeError("reshape from " + shape_to_string(x->shape) + " to " +
                     shape_to_string(shape) + " changes element count");
  }
  auto g = resolve_graph({&x});
  auto res = make_result(std::move(shape), std::vector<double>(x->value), g);
  record(g, [x, res]() {
    if (!x->tracked) return;
    for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += res->grad[i];
  });
  return wrap(res);
}

Tensor concat(const Tensor& ta, const Tensor& tb, std::size_t axis) {
  auto a = payload(ta);
  auto b = payload(tb);
  require_defined(a, "concat");
  require_defined(b, "concat");
  if (a->shape.size() != b->shape.size() || axis >= a->shape.size()) {
    throw ShapeError("concat rank/axis mismatch: " + shape_to_string(a->shape) + " vs " +
                     shape_to_string(b->shape) + " axis " + std::to_string(axis));
  }
  for (std::size_t d = 0; d < a->shape.size(); ++d) {
    if (d != axis && a->shape[d] != b->shape[d]) {
      throw ShapeError("concat shapes differ off-axis: " + shape_to_string(a->shape) + " vs " +
                       shape_to_string(b->shape));
    }
  }
  Shape out_shape = a->shape;
  out_shape[axis] += b->shape[axis];
  std::size_t prefix = 1, suffix = 1;
  for (std::size_t d = 0; d < axis; ++d) prefix *= a->shape[d];
  for (std::size_t d = axis + 1; d < a->shape.size(); ++d) suffix *= a->shape[d];
  std::size_t ablk = a->shape[axis] * suffix, bblk = b->shape[axis] * suffix;
  std::vector<double> out(numel(out_shape));
  for (std::size_t p = 0; p < prefix; ++p) {
    std::copy(a->value.begin() + p * ablk, a->value.begin() + (p + 1) * ablk,
              out.begin() + p * (ablk + bblk));
    std::copy(b->value.begin() + p * bblk, b->value.begin() + (p + 1) * bblk,
              out.begin() + p * (ablk + bblk) + ablk);
  }
  auto g = resolve_graph({&a, &b});
  auto res = make_result(std::move(out_shape), std::move(out), g);
  record(g, [a, b, res, prefix, ablk, bblk]() {
    for (std::size_t p = 0; p < prefix; ++p) {
      const double* gp = res->grad.data() + p * (ablk + bblk);
      if (a->tracked) {
        double* ag = a->grad.data() + p * ablk;
        for (std::size_t i = 0; i < ablk; ++i) ag[i] += gp[i];
      }
      if (b->tracked) {
        double* bg = b->grad.data() + p * bblk;
        for (std::size_t i = 0; i < bblk; ++i) bg[i] += gp[ablk + i];
      }
    }
  });
  return wrap(res);
}

// ---- reductions ----

namespace {

struct AxisSplit {
  std::size_t prefix = 1, extent = 1, suffix = 1;
  Shape out_shape;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("reduction axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(shape));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d < axis) {
      s.prefix *= shape[d];
    } else if (d > axis) {
      s.suffix *= shape[d];
    }
    if (d != axis) s.out_shape.push_back(shape[d]);
  }
  s.extent = shape[axis];
  return s;
}

Tensor reduce_full(ReduceKind kind, const Tensor& tx) {
  auto x = payload(tx);
  require_defined(x, "reduce");
  if (x->value.empty()) throw ShapeError("reduction of empty tensor");
  double acc;
  std::size_t arg = 0;
  if (kind == ReduceKind::max) {
    acc = x->value[0];
    for (std::size_t i = 1; i < x->value.size(); ++i) {
      if (x->value[i] > acc) {
        acc = x->value[i];
        arg = i;
      }
    }
  } else {
    acc = 0.0;
    for (double v : x->value) acc += v;
    if (kind == ReduceKind::mean) acc /= static_cast<double>(x->value.size());
  }
  auto g = resolve_graph({&x});
  auto res = make_result({}, {acc}, g);
  std::size_t n = x->value.size();
  record(g, [x, res, kind, arg, n]() {
    if (!x->tracked) return;
    double gv = res->grad[0];
    switch (kind) {
      case ReduceKind::sum:
        for (auto& gg : x->grad) gg += gv;
        break;
      case ReduceKind::mean: {
        double w = gv / static_cast<double>(n);
        for (auto& gg : x->grad) gg += w;
        break;
      }
      case ReduceKind::max:
        x->grad[arg] += gv;
        break;
    }
  });
  return wrap(res);
}

Tensor reduce_axis(ReduceKind kind, const Tensor& tx, std::size_t axis) {
  auto x = payload(tx);
  require_defined(x, "reduce");
  AxisSplit s = split_axis(x->shape, axis);
  std::size_t out_n = s.prefix * s.suffix;
  std::vector<double> out(out_n);
  std::vector<std::uint32_t> argmax(kind == ReduceKind::max ? out_n : 0);
  for (std::size_t p = 0; p < s.prefix; ++p) {
    for (std::size_t q = 0; q < s.suffix; ++q) {
      std::size_t base = p * s.extent * s.suffix + q;
      if (kind == ReduceKind::max) {
        double bv = x->value[base];
        std::size_t bi = base;
        for (std::size_t i = 1; i < s.extent; ++i) {
          std::size_t off = base + i * s.suffix;
          if (x->value[off] > bv) {
            bv = x->value[off];
            bi = off;
          }
        }
        out[p * s.suffix + q] = bv;
        argmax[p * s.suffix + q] = static_cast<std::uint32_t>(bi);
      } else {
        double acc = 0.0;
        for (std::size_t i = 0; i < s.extent; ++i) acc += x->value[base + i * s.suffix];
        if (kind == ReduceKind::mean) acc /= static_cast<double>(s.extent);
        out[p * s.suffix + q] = acc;
      }
    }
  }
  auto g = resolve_graph({&x});
  auto res = make_result(s.out_shape, std::move(out), g);
  record(g, [x, res, s, kind, argmax = std::move(argmax)]() {
    if (!x->tracked) return;
    for (std::size_t p = 0; p < s.prefix; ++p) {
      for (std::size_t q = 0; q < s.suffix; ++q) {
        double gv = res->grad[p * s.suffix + q];
        std::size_t base = p * s.extent * s.suffix + q;
        switch (kind) {
          case ReduceKind::sum:
            for (std::size_t i = 0; i < s.extent; ++i) x->grad[base + i * s.suffix] += gv;
            break;
          case ReduceKind::mean: {
            double w = gv / static_cast<double>(s.extent);
            for (std::size_t i = 0; i < s.extent; ++i) x->grad[base + i * s.suffix] += w;
            break;
          }
          case ReduceKind::max:
            x->grad[argmax[p * s.suffix + q]] += gv;
            break;
        }
      }
    }
  });
  return wrap(res);
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_full(ReduceKind::sum, x); }
Tensor sum(const Tensor& x, std::size_t axis) { return reduce_axis(ReduceKind::sum, x, axis); }
Tensor mean(const Tensor& x) { return reduce_full(ReduceKind::mean, x); }
Tensor mean(const Tensor& x, std::size_t axis) { return reduce_axis(ReduceKind::mean, x, axis); }
Tensor max(const Tensor& x) { return reduce_full(ReduceKind::max, x); }
Tensor max(const Tensor& x, std::size_t axis) { return reduce_axis(ReduceKind::max, x, axis); }

Tensor reduce(ReduceKind kind, const Tensor& x, std::optional<std::size_t> axis) {
  return axis ? reduce_axis(kind, x, *axis) : reduce_full(kind, x);
}

// ---- losses ----

Tensor bce_with_logits(const Tensor& tlogits, const Tensor& ttargets) {
  auto z = payload(tlogits);
  auto t = payload(ttargets);
  require_defined(z, "bce_with_logits");
  require_defined(t, "bce_with_logits");
  if (z->shape != t->shape) {
    throw ShapeError("bce_with_logits shape mismatch: " + shape_to_string(z->shape) + " vs " +
                     shape_to_string(t->shape));
  }
  std::size_t n = z->value.size();
  if (n == 0) throw ShapeError("bce_with_logits on empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += stable_softplus(z->value[i]) - z->value[i] * t->value[i];
  }
  auto g = resolve_graph({&z, &t});
  auto res = make_result({}, {acc / static_cast<double>(n)}, g);
  record(g, [z, t, res, n]() {
    double gv = res->grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (z->tracked) z->grad[i] += gv * (stable_sigmoid(z->value[i]) - t->value[i]);
      if (t->tracked) t->grad[i] += gv * (-z->value[i]);
    }
  });
  return wrap(res);
}

Tensor softmax_cross_entropy(const Tensor& tlogits, const std::vector<int>& classes) {
  auto z = payload(tlogits);
  require_defined(z, "softmax_cross_entropy");
  if (z->shape.size() != 2) {
    throw ShapeError("softmax_cross_entropy expects [B,K] logits, got " +
                     shape_to_string(z->shape));
  }
  std::size_t B = z->shape[0], K = z->shape[1];
  if (classes.size() != B) {
    throw ShapeError("softmax_cross_entropy: class count " + std::to_string(classes.size()) +
                     " does not match batch " + std::to_string(B));
  }
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= K) {
      throw ValueError("softmax_cross_entropy: class index out of range");
    }
  }
  double acc = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = z->value.data() + b * K;
    double m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - m);
    acc += m + std::log(se) - row[classes[b]];
  }
  auto g = resolve_graph({&z});
  auto res = make_result({}, {acc / static_cast<double>(B)}, g);
  record(g, [z, res, classes, B, K]() {
    if (!z->tracked) return;
    double gv = res->grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const double* row = z->value.data() + b * K;
      double* grow = z->grad.data() + b * K;
      double m = row[0];
      for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
      double se = 0.0;
      for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - m);
      for (std::size_t k = 0; k < K; ++k) {
        double soft = std::exp(row[k] - m) / se;
        grow[k] += gv * (soft - (static_cast<std::size_t>(classes[b]) == k ? 1.0 : 0.0));
      }
    }
  });
  return wrap(res);
}

Tensor soft_dice_loss(const Tensor& probs, const Tensor& targets) {
  if (probs.shape() != targets.shape()) {
    throw ShapeError("soft_dice_loss shape mismatch: " + shape_to_string(probs.shape()) + " vs " +
                     shape_to_string(targets.shape()));
  }
  Tensor num = add(mul(sum(mul(probs, targets)), Tensor(2.0)), Tensor(kSoftDiceEps));
  Tensor den = add(add(sum(probs), sum(targets)), Tensor(kSoftDiceEps));
  return sub(Tensor(1.0), div(num, den));
}

// ---- gradient checking ----

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step) {
  if (!(step > 0.0)) throw ValueError("grad_check: step must be positive");
  Graph g;
  Tensor leaf = g.leaf(point);
  Tensor out = f(leaf);
  if (out.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  g.backward(out);
  std::vector<double> analytic = leaf.grad();

  const double inf = std::numeric_limits<double>::infinity();
  double worst = 0.0;
  std::vector<double> base = point.data();
  for (std::size_t i = 0; i < base.size(); ++i) {
    Tensor hi(point.shape(), base);
    hi.mutable_data()[i] += step;
    Tensor lo(point.shape(), base);
    lo.mutable_data()[i] -= step;
    double fp = f(hi).item();
    double fm = f(lo).item();
    double fd = (fp - fm) / (2.0 * step);
    double a = analytic[i];
    if (!std::isfinite(fd) || !std::isfinite(a)) return inf;
    double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tams::ndgrad
