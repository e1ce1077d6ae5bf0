#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpcnet/network.hpp"

namespace fpcnet {

// Architecture builders. Layer ids follow the row names of the published
// architecture tables so that shape traces can be compared row by row.
// Each hidden convolution is rectified. Where a max pool follows, the ReLU is
// placed after the pool: max and ReLU commute, so outputs are identical and the
// rectifier touches 1/64 of the values.

/// Fully point-wise color-constancy net. `width_divisor` shrinks the 240/80
/// channel counts for desk-scale runs.
inline NetworkSpec build_fpcnet_cc(std::size_t width_divisor = 1) {
  if (width_divisor == 0 || 240 % width_divisor != 0 || 80 % width_divisor != 0)
    throw dimension_error("width divisor must divide 240 and 80");
  const std::size_t c1 = 240 / width_divisor;
  const std::size_t c2 = 80 / width_divisor;
  NetworkBuilder b(width_divisor == 1 ? "fpcnet-cc" : "fpcnet-cc/" + std::to_string(width_divisor), {3, 32, 32});
  const int conv11 = b.add("conv1_1", LayerSpec::pointwise(3, c1), {kNetworkInput});
  const int pool11 = b.add("maxpool1_1", LayerSpec::max_pool(8, 0, 8), {conv11});
  const int relu11 = b.add("relu1_1", LayerSpec::relu(), {pool11});
  const int conv12 = b.add("conv1_2", LayerSpec::pointwise(3, c1), {kNetworkInput});
  const int pool12 = b.add("maxpool1_2", LayerSpec::max_pool(10, 1, 8), {conv12});
  const int relu12 = b.add("relu1_2", LayerSpec::relu(), {pool12});
  const int concat = b.add("concat1", LayerSpec::concat(), {relu11, relu12});
  for (const char* ch : {"r", "g", "b"}) {
    const std::string s = std::string("_") + ch;
    const int conv2 = b.add("conv2" + s, LayerSpec::pointwise(2 * c1, c2), {concat});
    const int pool2 = b.add("maxpool2" + s, LayerSpec::max_pool(4, 0, 4), {conv2});
    const int relu2 = b.add("relu2" + s, LayerSpec::relu(), {pool2});
    b.output(b.add("conv3" + s, LayerSpec::pointwise(c2, 1), {relu2}));
  }
  return b.build();
}

/// Baseline with a 3x3 branch and 4x4 strided heads.
inline NetworkSpec build_basenet() {
  NetworkBuilder b("basenet", {3, 32, 32});
  const int conv1a = b.add("conv1_1x1", LayerSpec::pointwise(3, 240), {kNetworkInput});
  const int conv1b = b.add("conv1_3x3", LayerSpec::conv(3, 240, 3, 1, 1), {kNetworkInput});
  const int concat = b.add("concat1", LayerSpec::concat(), {conv1a, conv1b});
  const int pool1 = b.add("maxpool1", LayerSpec::max_pool(8, 0, 8), {concat});
  const int relu1 = b.add("relu1", LayerSpec::relu(), {pool1});
  for (const char* ch : {"r", "g", "b"}) {
    const std::string s = std::string("_") + ch;
    const int conv2 = b.add("conv2" + s, LayerSpec::conv(480, 40, 4, 0, 4), {relu1});
    const int relu2 = b.add("relu2" + s, LayerSpec::relu(), {conv2});
    b.output(b.add("conv3" + s, LayerSpec::pointwise(40, 1), {relu2}));
  }
  return b.build();
}

/// Fully point-wise dehazing net; BReLU bounds the transmission to [0, 1].
inline NetworkSpec build_fpcnet_dh() {
  NetworkBuilder b("fpcnet-dh", {3, 16, 16});
  int n = b.add("conv1", LayerSpec::pointwise(3, 16), {kNetworkInput});
  n = b.add("maxout", LayerSpec::maxout(4), {n});
  n = b.add("maxpool1", LayerSpec::max_pool(2, 0, 2), {n});
  n = b.add("conv2", LayerSpec::pointwise(4, 48), {n});
  n = b.add("maxpool2", LayerSpec::max_pool(8, 0, 8), {n});
  n = b.add("conv3", LayerSpec::pointwise(48, 1), {n});
  b.output(b.add("brelu", LayerSpec::brelu(), {n}));
  return b.build();
}

/// Accepts "fpcnet-cc", "fpcnet-cc/<d>", "basenet" and "fpcnet-dh".
inline NetworkSpec build_model(const std::string& name) {
  if (name == "fpcnet-cc") return build_fpcnet_cc();
  if (name.rfind("fpcnet-cc/", 0) == 0) return build_fpcnet_cc(std::stoul(name.substr(10)));
  if (name == "basenet") return build_basenet();
  if (name == "fpcnet-dh") return build_fpcnet_dh();
  throw data_error("unknown model '" + name + "' (expected fpcnet-cc, fpcnet-cc/<d>, basenet or fpcnet-dh)");
}

/// Weights only; biases are deliberately not counted.
inline std::uint64_t count_params(const NetworkSpec& spec) {
  std::uint64_t n = 0;
  for (const Node& node : spec.nodes) n += node.layer.weight_count();
  return n;
}

/// Multiply-adds: one per weight application per output position. Pooling,
/// activations and concatenation are free.
inline std::uint64_t count_flops(const NetworkSpec& spec) {
  std::uint64_t n = 0;
  for (const Node& node : spec.nodes) n += node.layer.weight_count() * node.out_shape.h * node.out_shape.w;
  return n;
}

/// One row of an architecture table: layer, input size, filter count,
/// filter size, pad and stride. Activations are omitted, as in the tables.
struct TableRow {
  std::string id;
  LayerKind kind;
  Shape input;
  Shape output;
  std::size_t num = 0;  // filters for conv layers, 0 otherwise
  std::size_t filter = 0;
  std::size_t pad = 0;
  std::size_t stride = 0;
};

inline std::vector<TableRow> shape_trace(const NetworkSpec& spec) {
  std::vector<TableRow> rows;
  for (const Node& n : spec.nodes) {
    const LayerSpec& l = n.layer;
    if (l.kind == LayerKind::ReLU || l.kind == LayerKind::BReLU) continue;
    TableRow r{n.id, l.kind, n.in_shape, n.out_shape};
    if (l.kind == LayerKind::ConcatChannels) r.input = n.out_shape;
    if (l.parametric()) r.num = l.out_channels;
    if (l.parametric() || l.pooling()) {
      r.filter = l.kh;
      r.pad = l.pad;
      r.stride = l.stride;
    }
    if (l.kind == LayerKind::Maxout) r.filter = l.maxout_group;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------- model files
//
// {name, spec, init, layers:[{id, shape, weights, bias}]} with insertion-ordered
// keys. Doubles are written in shortest round-trip form, so load(save(p)) is
// bit-exact.

using ordered_json = nlohmann::ordered_json;

inline ordered_json spec_to_json(const NetworkSpec& spec) {
  ordered_json nodes = ordered_json::array();
  for (const Node& n : spec.nodes) {
    ordered_json inputs = ordered_json::array();
    for (int i : n.inputs) inputs.push_back(i == kNetworkInput ? std::string("input") : spec.nodes[static_cast<std::size_t>(i)].id);
    nodes.push_back({{"id", n.id},
                     {"kind", to_string(n.layer.kind)},
                     {"inputs", inputs},
                     {"in_channels", n.layer.in_channels},
                     {"out_channels", n.layer.out_channels},
                     {"kernel", {n.layer.kh, n.layer.kw}},
                     {"pad", n.layer.pad},
                     {"stride", n.layer.stride},
                     {"maxout_group", n.layer.maxout_group}});
  }
  ordered_json outputs = ordered_json::array();
  for (int o : spec.outputs) outputs.push_back(spec.nodes[static_cast<std::size_t>(o)].id);
  return {{"input_shape", {spec.input_shape.c, spec.input_shape.h, spec.input_shape.w}},
          {"nodes", nodes},
          {"outputs", outputs}};
}

inline NetworkSpec spec_from_json(const std::string& name, const ordered_json& j) {
  const auto& is = j.at("input_shape");
  NetworkBuilder b(name, {is.at(0).get<std::size_t>(), is.at(1).get<std::size_t>(), is.at(2).get<std::size_t>()});
  std::vector<std::string> ids;
  for (const auto& n : j.at("nodes")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(n.at("kind").get<std::string>());
    l.in_channels = n.at("in_channels").get<std::size_t>();
    l.out_channels = n.at("out_channels").get<std::size_t>();
    l.kh = n.at("kernel").at(0).get<std::size_t>();
    l.kw = n.at("kernel").at(1).get<std::size_t>();
    l.pad = n.at("pad").get<std::size_t>();
    l.stride = n.at("stride").get<std::size_t>();
    l.maxout_group = n.at("maxout_group").get<std::size_t>();
    std::vector<int> inputs;
    for (const auto& in : n.at("inputs")) {
      const auto s = in.get<std::string>();
      if (s == "input") {
        inputs.push_back(kNetworkInput);
        continue;
      }
      const auto it = std::find(ids.begin(), ids.end(), s);
      if (it == ids.end()) throw data_error("node '" + s + "' used before it is defined");
      inputs.push_back(static_cast<int>(it - ids.begin()));
    }
    const auto id = n.at("id").get<std::string>();
    b.add(id, l, inputs);
    ids.push_back(id);
  }
  for (const auto& o : j.at("outputs")) {
    const auto it = std::find(ids.begin(), ids.end(), o.get<std::string>());
    if (it == ids.end()) throw data_error("unknown output node '" + o.get<std::string>() + "'");
    b.output(static_cast<int>(it - ids.begin()));
  }
  return b.build();
}

struct Model {
  NetworkSpec spec;
  ParamStore params;
};

inline ordered_json model_to_json(const NetworkSpec& spec, const ParamStore& params) {
  check_params(spec, params);
  ordered_json layers = ordered_json::array();
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    if (!spec.nodes[i].layer.parametric()) continue;
    const KernelWeights& w = params.layers[i];
    layers.push_back({{"id", spec.nodes[i].id},
                      {"shape", {w.out, w.in, w.kh, w.kw}},
                      {"weights", w.weights},
                      {"bias", w.bias}});
  }
  return {{"name", spec.name},
          {"spec", spec_to_json(spec)},
          {"init", {{"scheme", to_string(params.scheme)}, {"seed", params.seed}}},
          {"layers", layers}};
}

inline Model model_from_json(const ordered_json& j) {
  Model m;
  m.spec = spec_from_json(j.at("name").get<std::string>(), j.at("spec"));
  m.params = init_params(m.spec, InitScheme::Zero, 0);
  const auto& init = j.at("init");
  m.params.scheme = init.at("scheme").get<std::string>() == "zero" ? InitScheme::Zero : InitScheme::UniformFanIn;
  m.params.seed = init.at("seed").get<std::uint64_t>();
  std::size_t seen = 0;
  for (const auto& l : j.at("layers")) {
    const auto id = l.at("id").get<std::string>();
    const auto idx = m.spec.find(id);
    if (!idx || !m.spec.nodes[*idx].layer.parametric()) throw data_error("weights for unknown layer '" + id + "'");
    KernelWeights& w = m.params.layers[*idx];
    const auto shape = l.at("shape").get<std::vector<std::size_t>>();
    if (shape != std::vector<std::size_t>{w.out, w.in, w.kh, w.kw})
      throw data_error("layer '" + id + "' weight shape does not match its spec");
    w.weights = l.at("weights").get<std::vector<double>>();
    w.bias = l.at("bias").get<std::vector<double>>();
    if (!w.consistent()) throw data_error("layer '" + id + "' weight or bias array has the wrong length");
    ++seen;
  }
  std::size_t parametric = 0;
  for (const Node& n : m.spec.nodes) parametric += n.layer.parametric() ? 1 : 0;
  if (seen != parametric) throw data_error("model file is missing weights for some layers");
  return m;
}

inline void save_model(const std::filesystem::path& path, const NetworkSpec& spec, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write model file " + path.string());
  out << model_to_json(spec, params).dump(1) << '\n';
  if (!out) throw data_error("failed writing model file " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open model file " + path.string());
  try {
    return model_from_json(ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed model file " + path.string() + ": " + e.what());
  }
}

}  // namespace fpcnet
