#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fpcnet/layers.hpp"
#include "fpcnet/rng.hpp"

namespace fpcnet {

inline constexpr int kNetworkInput = -1;

struct Node {
  std::string id;
  LayerSpec layer;
  std::vector<int> inputs;  // node indices, or kNetworkInput
  Shape in_shape;           // shape of the first input
  Shape out_shape;
};

/// A small DAG of layers: linear chains plus fan-out and concat joins.
/// Nodes are stored in topological order; every output node is a scalar head.
struct NetworkSpec {
  std::string name;
  Shape input_shape;
  std::vector<Node> nodes;
  std::vector<int> outputs;

  std::optional<std::size_t> find(const std::string& id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].id == id) return i;
    return std::nullopt;
  }

  std::size_t output_size() const {
    std::size_t n = 0;
    for (int o : outputs) n += nodes[static_cast<std::size_t>(o)].out_shape.size();
    return n;
  }
};

/// Incrementally assembles a NetworkSpec, checking that every layer's input
/// shape chains from its producers.
class NetworkBuilder {
 public:
  NetworkBuilder(std::string name, Shape input_shape) {
    spec_.name = std::move(name);
    spec_.input_shape = input_shape;
  }

  int add(const std::string& id, LayerSpec layer, std::vector<int> inputs) {
    if (spec_.find(id)) throw dimension_error("duplicate layer id '" + id + "'");
    if (inputs.empty()) throw dimension_error("layer '" + id + "' has no inputs");
    std::vector<Shape> in_shapes;
    for (int i : inputs) {
      if (i != kNetworkInput && (i < 0 || static_cast<std::size_t>(i) >= spec_.nodes.size()))
        throw dimension_error("layer '" + id + "' refers to an unknown input");
      in_shapes.push_back(shape_of(i));
    }
    const Shape in = in_shapes.front();
    if (layer.kind != LayerKind::ConcatChannels && inputs.size() != 1)
      throw dimension_error("layer '" + id + "' takes exactly one input");

    Shape out;
    const auto fail = [&](const std::string& why) { throw dimension_error("layer '" + id + "': " + why); };
    switch (layer.kind) {
      case LayerKind::PointwiseConv:
        if (layer.kh != 1 || layer.kw != 1 || layer.pad != 0 || layer.stride != 1)
          fail("pointwise conv must be 1x1, pad 0, stride 1");
        [[fallthrough]];
      case LayerKind::Conv2d:
        if (layer.in_channels != in.c)
          fail("channel axis: expects " + std::to_string(layer.in_channels) + " input channels, got " +
               std::to_string(in.c));
        out = conv_output_shape(in, layer);
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        layer.in_channels = layer.out_channels = in.c;
        out = pool_output_shape(in, layer.kh, layer.pad, layer.stride);
        break;
      case LayerKind::Maxout:
        if (layer.maxout_group == 0 || in.c % layer.maxout_group != 0)
          fail("channel axis: " + std::to_string(in.c) + " channels not divisible by maxout group " +
               std::to_string(layer.maxout_group));
        layer.in_channels = in.c;
        layer.out_channels = in.c / layer.maxout_group;
        out = {layer.out_channels, in.h, in.w};
        break;
      case LayerKind::ReLU:
      case LayerKind::BReLU:
        layer.in_channels = layer.out_channels = in.c;
        out = in;
        break;
      case LayerKind::ConcatChannels: {
        std::size_t c = 0;
        for (const Shape& s : in_shapes) {
          if (s.h != in.h || s.w != in.w)
            fail("concat spatial mismatch " + s.str() + " vs " + in.str());
          c += s.c;
        }
        layer.in_channels = layer.out_channels = c;
        out = {c, in.h, in.w};
        break;
      }
    }
    spec_.nodes.push_back({id, layer, std::move(inputs), in, out});
    return static_cast<int>(spec_.nodes.size() - 1);
  }

  void output(int node) {
    if (node < 0 || static_cast<std::size_t>(node) >= spec_.nodes.size())
      throw dimension_error("output refers to an unknown node");
    spec_.outputs.push_back(node);
  }

  NetworkSpec build() const {
    if (spec_.outputs.empty()) throw dimension_error("network '" + spec_.name + "' has no output");
    return spec_;
  }

 private:
  Shape shape_of(int i) const {
    return i == kNetworkInput ? spec_.input_shape : spec_.nodes[static_cast<std::size_t>(i)].out_shape;
  }

  NetworkSpec spec_;
};

enum class InitScheme { UniformFanIn, Zero };

inline const char* to_string(InitScheme s) { return s == InitScheme::Zero ? "zero" : "uniform_fan_in"; }

/// Weights for every parametric node, aligned with NetworkSpec::nodes
/// (non-parametric nodes hold an empty KernelWeights).
struct ParamStore {
  std::vector<KernelWeights> layers;
  InitScheme scheme = InitScheme::UniformFanIn;
  std::uint64_t seed = 0;

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size();
    return n;
  }

  /// Zero-valued store with the same layout.
  ParamStore zeros_like() const {
    ParamStore z;
    z.scheme = scheme;
    z.seed = seed;
    for (const auto& l : layers) z.layers.emplace_back(l.out, l.in, l.kh, l.kw);
    return z;
  }

  void zero() {
    for (auto& l : layers) l.zero();
  }

  void add(const ParamStore& other) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (std::size_t j = 0; j < layers[i].weights.size(); ++j) layers[i].weights[j] += other.layers[i].weights[j];
      for (std::size_t j = 0; j < layers[i].bias.size(); ++j) layers[i].bias[j] += other.layers[i].bias[j];
    }
  }

  void scale(double s) {
    for (auto& l : layers) {
      for (double& v : l.weights) v *= s;
      for (double& v : l.bias) v *= s;
    }
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      for (double v : l.weights)
        if (!std::isfinite(v)) return false;
      for (double v : l.bias)
        if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

/// Symmetric uniform init scaled by 1/sqrt(fan-in); biases start at zero.
/// Each layer draws from its own stream derived from (seed, node index).
inline ParamStore init_params(const NetworkSpec& spec, InitScheme scheme, std::uint64_t seed) {
  ParamStore p;
  p.scheme = scheme;
  p.seed = seed;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const LayerSpec& l = spec.nodes[i].layer;
    if (!l.parametric()) {
      p.layers.emplace_back();
      continue;
    }
    KernelWeights w(l.out_channels, l.in_channels, l.kh, l.kw);
    if (scheme == InitScheme::UniformFanIn) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_channels * l.kh * l.kw));
      Rng rng(seed, {0x1417, i});
      for (double& v : w.weights) v = rng.uniform(-bound, bound);
    }
    p.layers.push_back(std::move(w));
  }
  return p;
}

inline void check_params(const NetworkSpec& spec, const ParamStore& p) {
  if (p.layers.size() != spec.nodes.size())
    throw dimension_error("parameter store has " + std::to_string(p.layers.size()) + " layers, network has " +
                          std::to_string(spec.nodes.size()));
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const LayerSpec& l = spec.nodes[i].layer;
    const KernelWeights& w = p.layers[i];
    if (!l.parametric()) continue;
    if (w.out != l.out_channels || w.in != l.in_channels || w.kh != l.kh || w.kw != l.kw || !w.consistent())
      throw dimension_error("weights of layer '" + spec.nodes[i].id + "' do not match its declared shape");
  }
}

/// Everything backward needs from one forward pass.
struct ForwardState {
  Tensor input;
  std::vector<Tensor> outputs;
  std::vector<std::vector<std::uint32_t>> argmax;
  bool ready = false;
};

/// Executes the DAG. Returns the flattened concatenation of all output heads.
inline std::vector<double> forward(const NetworkSpec& spec, const ParamStore& params, const Tensor& input,
                                   ForwardState* state = nullptr) {
  if (input.shape() != spec.input_shape)
    throw dimension_error("network '" + spec.name + "' expects input " + spec.input_shape.str() + ", got " +
                          input.shape().str());
  if (params.layers.size() != spec.nodes.size())
    throw dimension_error("parameter store does not match network '" + spec.name + "'");
  ForwardState local;
  ForwardState& st = state ? *state : local;
  st.ready = false;
  st.outputs.assign(spec.nodes.size(), Tensor());
  st.argmax.assign(spec.nodes.size(), {});
  st.input = input;
  std::vector<const Tensor*> in;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const Node& n = spec.nodes[i];
    in.clear();
    for (int j : n.inputs) in.push_back(j == kNetworkInput ? &st.input : &st.outputs[static_cast<std::size_t>(j)]);
    st.outputs[i] = detail::dispatch_forward(n.layer, n.layer.parametric() ? &params.layers[i] : nullptr, in,
                                             &st.argmax[i]);
  }
  std::vector<double> out;
  out.reserve(spec.output_size());
  for (int o : spec.outputs) {
    const auto d = st.outputs[static_cast<std::size_t>(o)].data();
    out.insert(out.end(), d.begin(), d.end());
  }
  st.ready = true;
  return out;
}

/// Back-propagates d(loss)/d(outputs) through a retained forward pass and
/// accumulates weight gradients into `grads` (laid out like the params).
inline void backward(const NetworkSpec& spec, const ParamStore& params, const ForwardState& state,
                     std::span<const double> d_outputs, ParamStore& grads) {
  if (!state.ready) throw state_error("backward called before a retained forward pass");
  if (d_outputs.size() != spec.output_size())
    throw dimension_error("output gradient has " + std::to_string(d_outputs.size()) + " entries, network has " +
                          std::to_string(spec.output_size()) + " outputs");
  std::vector<Tensor> g(spec.nodes.size());
  std::size_t off = 0;
  for (int o : spec.outputs) {
    const auto oi = static_cast<std::size_t>(o);
    const Shape s = spec.nodes[oi].out_shape;
    if (g[oi].empty()) g[oi] = Tensor(s);
    for (std::size_t k = 0; k < s.size(); ++k) g[oi][k] += d_outputs[off + k];
    off += s.size();
  }
  std::vector<const Tensor*> in;
  for (std::size_t idx = spec.nodes.size(); idx-- > 0;) {
    if (g[idx].empty()) continue;
    const Node& n = spec.nodes[idx];
    in.clear();
    bool feeds_nodes = false;
    for (int j : n.inputs) {
      in.push_back(j == kNetworkInput ? &state.input : &state.outputs[static_cast<std::size_t>(j)]);
      feeds_nodes = feeds_nodes || j != kNetworkInput;
    }
    auto gin = detail::dispatch_backward(n.layer, n.layer.parametric() ? &params.layers[idx] : nullptr, in,
                                         state.argmax[idx], g[idx],
                                         n.layer.parametric() ? &grads.layers[idx] : nullptr, feeds_nodes);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const int j = n.inputs[k];
      if (j == kNetworkInput || gin[k].empty()) continue;
      Tensor& dst = g[static_cast<std::size_t>(j)];
      if (dst.empty()) {
        dst = std::move(gin[k]);
      } else {
        for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += gin[k][e];
      }
    }
    g[idx] = Tensor();
  }
}

}  // namespace fpcnet
