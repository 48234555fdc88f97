#include "tams/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace tams::neural {

using ndgrad::Shape;
using ndgrad::Tensor;

namespace {

struct ParamInfo {
  std::size_t layer;
  Shape weight_shape;
  Shape bias_shape;
  std::size_t fan_in;
  std::size_t fan_out;
};

// Shape walk shared by validation, initialization and compatibility checks.
std::vector<Shape> walk_shapes(const NetworkSpec& spec, std::vector<ParamInfo>* params) {
  if (spec.input_shape.empty()) throw ValueError("invalid spec: empty input shape");
  std::vector<Shape> outs;
  Shape cur = spec.input_shape;
  cur.insert(cur.begin(), 1);  // batch 1
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::dense: {
        if (cur.size() != 2) {
          throw ValueError("invalid spec: dense layer " + std::to_string(i) +
                           " needs rank-2 input, got " + ndgrad::shape_to_string(cur));
        }
        if (l.units == 0) throw ValueError("invalid spec: dense layer with zero units");
        if (params) {
          params->push_back({i, {cur[1], l.units}, {l.units}, cur[1], l.units});
        }
        cur = {1, l.units};
        break;
      }
      case LayerKind::conv3x3: {
        if (cur.size() != 4) {
          throw ValueError("invalid spec: conv3x3 layer " + std::to_string(i) +
                           " needs rank-4 input, got " + ndgrad::shape_to_string(cur));
        }
        if (l.channels == 0) throw ValueError("invalid spec: conv3x3 with zero channels");
        if (params) {
          params->push_back(
              {i, {l.channels, cur[1], 3, 3}, {l.channels}, cur[1] * 9, l.channels * 9});
        }
        cur = {1, l.channels, cur[2], cur[3]};
        break;
      }
      case LayerKind::maxpool2: {
        if (cur.size() != 4 || cur[2] % 2 != 0 || cur[3] % 2 != 0) {
          throw ValueError("invalid spec: maxpool2 layer " + std::to_string(i) +
                           " needs rank-4 input with even spatial dims");
        }
        cur = {1, cur[1], cur[2] / 2, cur[3] / 2};
        break;
      }
      case LayerKind::upsample2: {
        if (cur.size() != 4) {
          throw ValueError("invalid spec: upsample2 layer " + std::to_string(i) +
                           " needs rank-4 input");
        }
        cur = {1, cur[1], cur[2] * 2, cur[3] * 2};
        break;
      }
      case LayerKind::relu:
      case LayerKind::sigmoid:
        break;
      case LayerKind::flatten: {
        std::size_t rest = 1;
        for (std::size_t d = 1; d < cur.size(); ++d) rest *= cur[d];
        cur = {1, rest};
        break;
      }
      case LayerKind::concat_skip: {
        if (l.skip_from < 0 || static_cast<std::size_t>(l.skip_from) >= i) {
          throw ValueError("invalid spec: concat_skip layer " + std::to_string(i) +
                           " references layer " + std::to_string(l.skip_from));
        }
        const Shape& src = outs[static_cast<std::size_t>(l.skip_from)];
        if (src.size() != cur.size() || cur.size() < 2) {
          throw ValueError("invalid spec: concat_skip rank mismatch at layer " +
                           std::to_string(i));
        }
        for (std::size_t d = 0; d < cur.size(); ++d) {
          if (d != 1 && src[d] != cur[d]) {
            throw ValueError("invalid spec: concat_skip shape mismatch at layer " +
                             std::to_string(i));
          }
        }
        cur[1] += src[1];
        break;
      }
    }
    outs.push_back(cur);
  }
  return outs;
}

void check_head(const NetworkSpec& spec, const std::vector<Shape>& outs) {
  if (spec.layers.empty()) throw ValueError("invalid spec: no layers");
  const Shape& out = outs.back();
  switch (spec.head) {
    case OutputHead::class_logits:
      if (out.size() != 2) throw ValueError("invalid spec: class-logits head needs [B,K] output");
      break;
    case OutputHead::pixel_logits:
      if (out.size() != 4 || out[1] != 1) {
        throw ValueError("invalid spec: pixel-logits head needs [B,1,H,W] output");
      }
      break;
    case OutputHead::unit_scalar:
      if (out.size() != 2 || out[1] != 1) {
        throw ValueError("invalid spec: unit-scalar head needs [B,1] output");
      }
      if (spec.layers.back().kind != LayerKind::sigmoid) {
        throw ValueError("invalid spec: unit-scalar head requires a final sigmoid");
      }
      break;
    case OutputHead::scalar_value:
      if (out.size() != 2 || out[1] != 1) {
        throw ValueError("invalid spec: scalar head needs [B,1] output");
      }
      break;
  }
  if (spec.embed_tap >= 0) {
    if (static_cast<std::size_t>(spec.embed_tap) >= spec.layers.size()) {
      throw ValueError("invalid spec: embed_tap out of range");
    }
    if (outs[static_cast<std::size_t>(spec.embed_tap)].size() != 2) {
      throw ValueError("invalid spec: embed_tap must reference a rank-2 activation");
    }
  }
}

bool relu_follows(const NetworkSpec& spec, std::size_t layer) {
  for (std::size_t j = layer + 1; j < spec.layers.size(); ++j) {
    switch (spec.layers[j].kind) {
      case LayerKind::relu: return true;
      case LayerKind::sigmoid: return false;
      case LayerKind::maxpool2:
      case LayerKind::upsample2:
      case LayerKind::flatten:
        continue;  // shape-only, keep scanning
      default: return false;
    }
  }
  return false;
}

std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

}  // namespace

void NetworkSpec::validate() const {
  std::vector<Shape> outs = walk_shapes(*this, nullptr);
  check_head(*this, outs);
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  std::vector<Shape> outs = walk_shapes(*this, nullptr);
  check_head(*this, outs);
  return outs;
}

ParameterSet::ParameterSet(const ParameterSet& other) {
  items_.reserve(other.items_.size());
  for (const auto& [name, t] : other.items_) items_.emplace_back(name, t.detached());
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this == &other) return *this;
  items_.clear();
  items_.reserve(other.items_.size());
  for (const auto& [name, t] : other.items_) items_.emplace_back(name, t.detached());
  return *this;
}

void ParameterSet::add(std::string name, Tensor value) {
  if (has(name)) throw ValueError("duplicate parameter name: " + name);
  items_.emplace_back(std::move(name), std::move(value));
}

bool ParameterSet::has(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(),
                     [&](const auto& kv) { return kv.first == name; });
}

Tensor& ParameterSet::at(const std::string& name) {
  for (auto& kv : items_) {
    if (kv.first == name) return kv.second;
  }
  throw ValueError("unknown parameter: " + name);
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& kv : items_) {
    if (kv.first == name) return kv.second;
  }
  throw ValueError("unknown parameter: " + name);
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& kv : items_) n += kv.second.size();
  return n;
}

ParameterSet init_network(const NetworkSpec& spec, std::uint64_t seed) {
  std::vector<ParamInfo> infos;
  std::vector<Shape> outs = walk_shapes(spec, &infos);
  check_head(spec, outs);
  Rng rng(seed);
  ParameterSet params;
  for (const ParamInfo& info : infos) {
    double bound;
    if (relu_follows(spec, info.layer)) {
      bound = std::sqrt(6.0 / static_cast<double>(info.fan_in));
    } else {
      bound = std::sqrt(6.0 / static_cast<double>(info.fan_in + info.fan_out));
    }
    std::vector<double> w(ndgrad::numel(info.weight_shape));
    for (auto& v : w) v = rng.uniform(-bound, bound);
    params.add(weight_name(info.layer), Tensor(info.weight_shape, std::move(w)));
    params.add(bias_name(info.layer), Tensor::zeros(info.bias_shape));
  }
  return params;
}

Tensor forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& x,
               ForwardTrace* trace) {
  Tensor cur = x;
  if (cur.shape() == spec.input_shape) {
    Shape batched = spec.input_shape;
    batched.insert(batched.begin(), 1);
    cur = ndgrad::reshape(cur, batched);
  } else {
    const Shape& s = cur.shape();
    bool ok = s.size() == spec.input_shape.size() + 1 &&
              std::equal(spec.input_shape.begin(), spec.input_shape.end(), s.begin() + 1);
    if (!ok) {
      throw ShapeError("forward input " + ndgrad::shape_to_string(s) + " does not match spec " +
                       ndgrad::shape_to_string(spec.input_shape));
    }
  }
  std::vector<Tensor> outs;
  outs.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = params.at(weight_name(i));
        const Tensor& b = params.at(bias_name(i));
        cur = ndgrad::add(ndgrad::matmul(cur, w), b);
        break;
      }
      case LayerKind::conv3x3: {
        const Tensor& w = params.at(weight_name(i));
        const Tensor& b = params.at(bias_name(i));
        cur = ndgrad::add(ndgrad::conv2d(cur, w), ndgrad::reshape(b, {b.size(), 1, 1}));
        break;
      }
      case LayerKind::maxpool2:
        cur = ndgrad::maxpool2(cur);
        break;
      case LayerKind::upsample2:
        cur = ndgrad::upsample2(cur);
        break;
      case LayerKind::relu:
        cur = ndgrad::relu(cur);
        break;
      case LayerKind::sigmoid:
        cur = ndgrad::sigmoid(cur);
        break;
      case LayerKind::flatten: {
        std::size_t rest = 1;
        for (std::size_t d = 1; d < cur.shape().size(); ++d) rest *= cur.shape()[d];
        cur = ndgrad::reshape(cur, {cur.shape()[0], rest});
        break;
      }
      case LayerKind::concat_skip:
        cur = ndgrad::concat(cur, outs[static_cast<std::size_t>(l.skip_from)], 1);
        break;
    }
    outs.push_back(cur);
  }
  if (trace) {
    if (spec.embed_tap >= 0) trace->embedding = outs[static_cast<std::size_t>(spec.embed_tap)];
    trace->layer_outputs = std::move(outs);
  }
  return cur;
}

ParameterSet attach(const ParameterSet& params, ndgrad::Graph& graph) {
  ParameterSet out;
  for (const auto& [name, value] : params) out.add(name, graph.leaf(value));
  return out;
}

ParameterSet collect_grads(const ParameterSet& attached) {
  ParameterSet out;
  for (const auto& [name, value] : attached) {
    out.add(name, Tensor(value.shape(), value.grad()));
  }
  return out;
}

OptimizerState make_sgd(double lr) {
  OptimizerState s;
  s.kind = OptimizerState::Kind::sgd;
  s.lr = lr;
  return s;
}

OptimizerState make_adam(double lr) {
  OptimizerState s;
  s.kind = OptimizerState::Kind::adam;
  s.lr = lr;
  return s;
}

void optimizer_step(OptimizerState& state, ParameterSet& params, const ParameterSet& grads) {
  for (auto& [name, p] : params) {
    if (!grads.has(name)) throw ValueError("missing gradient for parameter: " + name);
  }
  if (state.kind == OptimizerState::Kind::sgd) {
    for (auto& [name, p] : params) {
      const Tensor& g = grads.at(name);
      if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
      auto& pv = p.mutable_data();
      const auto& gv = g.data();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= state.lr * gv[i];
    }
    ++state.step_count;
    return;
  }
  // adam
  if (state.m.size() == 0) {
    for (auto& [name, p] : params) {
      state.m.add(name, Tensor::zeros(p.shape()));
      state.v.add(name, Tensor::zeros(p.shape()));
    }
  }
  ++state.step_count;
  double t = static_cast<double>(state.step_count);
  double bc1 = 1.0 - std::pow(state.beta1, t);
  double bc2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
    auto& pv = p.mutable_data();
    const auto& gv = g.data();
    auto& mv = state.m.at(name).mutable_data();
    auto& vv = state.v.at(name).mutable_data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = state.beta1 * mv[i] + (1.0 - state.beta1) * gv[i];
      vv[i] = state.beta2 * vv[i] + (1.0 - state.beta2) * gv[i] * gv[i];
      double mhat = mv[i] / bc1;
      double vhat = vv[i] / bc2;
      pv[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void soft_update(ParameterSet& target, const ParameterSet& online, double tau) {
  if (tau < 0.0 || tau > 1.0) throw ValueError("soft_update: tau must lie in [0,1]");
  if (target.size() != online.size()) {
    throw ValueError("soft_update: parameter sets differ in size");
  }
  for (auto& [name, t] : target) {
    if (!online.has(name)) throw ValueError("soft_update: missing online parameter " + name);
    const Tensor& o = online.at(name);
    if (o.shape() != t.shape()) throw ShapeError("soft_update: shape mismatch for " + name);
    auto& tv = t.mutable_data();
    const auto& ov = o.data();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = tau * ov[i] + (1.0 - tau) * tv[i];
  }
}

namespace {
constexpr char kMagic[4] = {'T', 'A', 'M', 'S'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void checkpoint_save(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  io::write_bytes(out, kMagic, 4);
  io::write_u32(out, kVersion);
  io::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xffff) throw ValueError("parameter name too long: " + name);
    io::write_u16(out, static_cast<std::uint16_t>(name.size()));
    io::write_bytes(out, name.data(), name.size());
    const auto& shape = t.shape();
    if (shape.size() > 0xff) throw ValueError("parameter rank too large");
    io::write_u8(out, static_cast<std::uint8_t>(shape.size()));
    for (std::size_t e : shape) io::write_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) io::write_f64(out, v);
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

ParameterSet checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  io::read_bytes(in, magic, 4, "checkpoint magic");
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw IoError("bad magic in checkpoint: " + path.string());
  }
  std::uint32_t version = io::read_u32(in, "checkpoint version");
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                  path.string());
  }
  std::uint32_t count = io::read_u32(in, "tensor count");
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = io::read_u16(in, "name length");
    std::string name(name_len, '\0');
    io::read_bytes(in, name.data(), name_len, "name");
    std::uint8_t rank = io::read_u8(in, "rank");
    Shape shape(rank);
    for (auto& e : shape) e = io::read_u32(in, "extent");
    std::size_t n = ndgrad::numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = io::read_f64(in, "tensor data");
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw IoError("trailing bytes after checkpoint payload: " + path.string());
  }
  return params;
}

void require_compatible(const NetworkSpec& spec, const ParameterSet& params) {
  ParameterSet expected = init_network(spec, 0);
  if (expected.size() != params.size()) {
    throw ShapeError("checkpoint has " + std::to_string(params.size()) + " tensors, spec needs " +
                     std::to_string(expected.size()));
  }
  for (const auto& [name, t] : expected) {
    if (!params.has(name)) throw ShapeError("checkpoint missing parameter " + name);
    if (params.at(name).shape() != t.shape()) {
      throw ShapeError("checkpoint shape mismatch for " + name);
    }
  }
}

NetworkSpec classifier_spec(std::size_t image, std::size_t classes, std::size_t c1,
                            std::size_t c2, std::size_t hidden) {
  NetworkSpec s;
  s.input_shape = {1, image, image};
  s.head = OutputHead::class_logits;
  s.layers = {
      {LayerKind::conv3x3, 0, c1},  {LayerKind::relu},   {LayerKind::maxpool2},
      {LayerKind::conv3x3, 0, c2},  {LayerKind::relu},   {LayerKind::maxpool2},
      {LayerKind::flatten},         {LayerKind::dense, hidden}, {LayerKind::relu},
      {LayerKind::dense, classes},
  };
  return s;
}

NetworkSpec unet_spec(std::size_t image, std::size_t c) {
  NetworkSpec s;
  s.input_shape = {1, image, image};
  s.head = OutputHead::pixel_logits;
  s.layers = {
      {LayerKind::conv3x3, 0, c},            // 0
      {LayerKind::relu},                     // 1: skip source, full res
      {LayerKind::maxpool2},                 // 2
      {LayerKind::conv3x3, 0, 2 * c},        // 3
      {LayerKind::relu},                     // 4: skip source, half res
      {LayerKind::maxpool2},                 // 5
      {LayerKind::conv3x3, 0, 2 * c},        // 6
      {LayerKind::relu},                     // 7: bottleneck
      {LayerKind::upsample2},                // 8
      {LayerKind::concat_skip, 0, 0, 4},     // 9
      {LayerKind::conv3x3, 0, c},            // 10
      {LayerKind::relu},                     // 11
      {LayerKind::upsample2},                // 12
      {LayerKind::concat_skip, 0, 0, 1},     // 13
      {LayerKind::conv3x3, 0, c},            // 14
      {LayerKind::relu},                     // 15
      {LayerKind::conv3x3, 0, 1},            // 16: pixel logits
  };
  return s;
}

NetworkSpec controller_spec(std::size_t image, std::size_t c1, std::size_t c2,
                            std::size_t embed_dim) {
  NetworkSpec s;
  s.input_shape = {1, image, image};
  s.head = OutputHead::unit_scalar;
  s.layers = {
      {LayerKind::conv3x3, 0, c1},   {LayerKind::relu},  {LayerKind::maxpool2},
      {LayerKind::conv3x3, 0, c2},   {LayerKind::relu},  {LayerKind::maxpool2},
      {LayerKind::flatten},          {LayerKind::dense, embed_dim},
      {LayerKind::relu},  // embedding tap
      {LayerKind::dense, 1},         {LayerKind::sigmoid},
  };
  s.embed_tap = 8;
  return s;
}

NetworkSpec critic_spec(std::size_t in_features, std::size_t hidden) {
  NetworkSpec s;
  s.input_shape = {in_features};
  s.head = OutputHead::scalar_value;
  s.layers = {
      {LayerKind::dense, hidden}, {LayerKind::relu},
      {LayerKind::dense, hidden}, {LayerKind::relu},
      {LayerKind::dense, 1},
  };
  return s;
}

NetworkSpec dense_actor_spec(std::size_t in_features, std::size_t hidden) {
  NetworkSpec s;
  s.input_shape = {in_features};
  s.head = OutputHead::unit_scalar;
  s.layers = {
      {LayerKind::dense, hidden}, {LayerKind::relu},
      {LayerKind::dense, 1},      {LayerKind::sigmoid},
  };
  s.embed_tap = 1;
  return s;
}

}  // namespace tams::neural
