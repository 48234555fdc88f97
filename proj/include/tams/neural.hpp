#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tams/common.hpp"
#include "tams/ndgrad.hpp"

namespace tams::neural {

enum class LayerKind {
  dense,
  conv3x3,
  maxpool2,
  upsample2,
  relu,
  sigmoid,
  flatten,
  concat_skip
};

struct LayerDesc {
  LayerKind kind;
  std::size_t units = 0;     // dense output width
  std::size_t channels = 0;  // conv output channels
  int skip_from = -1;        // concat_skip source layer index
};

enum class OutputHead {
  class_logits,   // [B,K]
  pixel_logits,   // [B,1,H,W]
  unit_scalar,    // [B,1] in [0,1]; spec must end with sigmoid
  scalar_value    // [B,1], unbounded (critic)
};

struct NetworkSpec {
  std::vector<LayerDesc> layers;
  ndgrad::Shape input_shape;  // without batch dimension
  OutputHead head = OutputHead::class_logits;
  int embed_tap = -1;  // layer index whose activation is the embedding output

  void validate() const;
  // Shape after each layer for batch size 1 (batch dimension included).
  std::vector<ndgrad::Shape> layer_shapes() const;
};

// Ordered name -> Tensor map. Names follow "layer{index}.{weight|bias}".
// Copies are deep (detached values), so sets behave as plain values.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  void add(std::string name, ndgrad::Tensor value);
  bool has(const std::string& name) const;
  ndgrad::Tensor& at(const std::string& name);
  const ndgrad::Tensor& at(const std::string& name) const;
  std::size_t size() const { return items_.size(); }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t total_elements() const;

 private:
  std::vector<std::pair<std::string, ndgrad::Tensor>> items_;
};

// He-uniform for relu-followed layers, Xavier-uniform otherwise; zero biases.
// Bit-deterministic per (spec, seed).
ParameterSet init_network(const NetworkSpec& spec, std::uint64_t seed);

struct ForwardTrace {
  std::vector<ndgrad::Tensor> layer_outputs;
  ndgrad::Tensor embedding;  // set when spec.embed_tap >= 0
};

ndgrad::Tensor forward(const NetworkSpec& spec, const ParameterSet& params,
                       const ndgrad::Tensor& x, ForwardTrace* trace = nullptr);

// Tracked leaf copies of all parameters on `graph`.
ParameterSet attach(const ParameterSet& params, ndgrad::Graph& graph);
// Gradient tensors of an attached set, same names.
ParameterSet collect_grads(const ParameterSet& attached);

struct OptimizerState {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  ParameterSet m, v;  // adam moments, lazily shaped
};

OptimizerState make_sgd(double lr);
OptimizerState make_adam(double lr);

void optimizer_step(OptimizerState& state, ParameterSet& params, const ParameterSet& grads);

// target <- tau * online + (1 - tau) * target
void soft_update(ParameterSet& target, const ParameterSet& online, double tau);

void checkpoint_save(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet checkpoint_load(const std::filesystem::path& path);

// Names and shapes must match what init_network(spec, ...) would produce.
void require_compatible(const NetworkSpec& spec, const ParameterSet& params);

// Micro architectures used throughout.
NetworkSpec classifier_spec(std::size_t image = 16, std::size_t classes = 2, std::size_t c1 = 8,
                            std::size_t c2 = 16, std::size_t hidden = 64);
NetworkSpec unet_spec(std::size_t image = 16, std::size_t base_channels = 8);
NetworkSpec controller_spec(std::size_t image = 16, std::size_t c1 = 8, std::size_t c2 = 16,
                            std::size_t embed_dim = 16);
NetworkSpec critic_spec(std::size_t in_features, std::size_t hidden = 32);
// Dense-only scalar actor used by low-dimensional policies.
NetworkSpec dense_actor_spec(std::size_t in_features, std::size_t hidden = 8);

}  // namespace tams::neural
