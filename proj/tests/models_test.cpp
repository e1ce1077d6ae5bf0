#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "fpcnet/ensemble.hpp"
#include "fpcnet/models.hpp"
#include "test_util.hpp"

using namespace fpcnet;
using fpcnet::test_util::random_tensor;

namespace {

// Expected architecture rows: layer, input size, filters, filter size, pad,
// stride (0 where the table prints "-"). Heads repeat once per RGB channel.
struct Row {
  std::string id;
  Shape input;
  std::size_t num, filter, pad, stride;
};

std::vector<Row> expand_heads(std::vector<Row> trunk, const std::vector<Row>& head) {
  for (const char* ch : {"_r", "_g", "_b"})
    for (Row r : head) {
      r.id += ch;
      trunk.push_back(r);
    }
  return trunk;
}

void expect_trace(const NetworkSpec& spec, const std::vector<Row>& expected) {
  const auto rows = shape_trace(spec);
  ASSERT_EQ(rows.size(), expected.size()) << spec.name;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    SCOPED_TRACE(spec.name + " row " + expected[i].id);
    EXPECT_EQ(rows[i].id, expected[i].id);
    EXPECT_EQ(rows[i].input, expected[i].input);
    EXPECT_EQ(rows[i].num, expected[i].num);
    EXPECT_EQ(rows[i].filter, expected[i].filter);
    EXPECT_EQ(rows[i].pad, expected[i].pad);
    EXPECT_EQ(rows[i].stride, expected[i].stride);
  }
}

}  // namespace

TEST(Counts, FpcnetCc) {
  const auto s = build_fpcnet_cc();
  EXPECT_EQ(count_params(s), 720u + 720u + 3u * 38400u + 3u * 80u);
  EXPECT_EQ(count_params(s), 116880u);
  EXPECT_EQ(count_flops(s), 3318000u);
}

TEST(Counts, BaseNet) {
  const auto s = build_basenet();
  EXPECT_EQ(count_params(s), 720u + 6480u + 3u * 307200u + 3u * 40u);
  EXPECT_EQ(count_params(s), 928920u);
  EXPECT_EQ(count_flops(s), 8294520u);
}

TEST(Counts, FpcnetDh) {
  const auto s = build_fpcnet_dh();
  EXPECT_EQ(count_params(s), 288u);
  EXPECT_EQ(count_flops(s), 12288u + 12288u + 48u);
}

TEST(Counts, EmptyNetwork) {
  EXPECT_EQ(count_params(NetworkSpec{}), 0u);
  EXPECT_EQ(count_flops(NetworkSpec{}), 0u);
}

TEST(Counts, RoundToPublishedFigures) {
  auto three_sig = [](double v) {
    const double e = std::floor(std::log10(v)) - 2;
    return std::round(v / std::pow(10, e)) * std::pow(10, e);
  };
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_params(build_fpcnet_cc()))), 1.17e5);
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_flops(build_fpcnet_cc()))), 3.32e6);
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_params(build_basenet()))), 9.29e5);
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_flops(build_basenet()))), 8.29e6);
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_params(build_fpcnet_dh()))), 288);
  EXPECT_DOUBLE_EQ(three_sig(static_cast<double>(count_flops(build_fpcnet_dh()))), 2.46e4);
}

TEST(ShapeTrace, FpcnetCc) {
  // The published table lists the second max pool's input as 480x4x4; the
  // head conv before it emits 80 channels, so 80x4x4 is what actually flows.
  expect_trace(build_fpcnet_cc(), expand_heads(
                                      {
                                          {"conv1_1", {3, 32, 32}, 240, 1, 0, 1},
                                          {"maxpool1_1", {240, 32, 32}, 0, 8, 0, 8},
                                          {"conv1_2", {3, 32, 32}, 240, 1, 0, 1},
                                          {"maxpool1_2", {240, 32, 32}, 0, 10, 1, 8},
                                          {"concat1", {480, 4, 4}, 0, 0, 0, 0},
                                      },
                                      {
                                          {"conv2", {480, 4, 4}, 80, 1, 0, 1},
                                          {"maxpool2", {80, 4, 4}, 0, 4, 0, 4},
                                          {"conv3", {80, 1, 1}, 1, 1, 0, 1},
                                      }));
}

TEST(ShapeTrace, BaseNet) {
  expect_trace(build_basenet(), expand_heads(
                                    {
                                        {"conv1_1x1", {3, 32, 32}, 240, 1, 0, 1},
                                        {"conv1_3x3", {3, 32, 32}, 240, 3, 1, 1},
                                        {"concat1", {480, 32, 32}, 0, 0, 0, 0},
                                        {"maxpool1", {480, 32, 32}, 0, 8, 0, 8},
                                    },
                                    {
                                        {"conv2", {480, 4, 4}, 40, 4, 0, 4},
                                        {"conv3", {40, 1, 1}, 1, 1, 0, 1},
                                    }));
}

TEST(ShapeTrace, FpcnetDh) {
  expect_trace(build_fpcnet_dh(), {
                                      {"conv1", {3, 16, 16}, 16, 1, 0, 1},
                                      {"maxout", {16, 16, 16}, 0, 4, 0, 0},
                                      {"maxpool1", {4, 16, 16}, 0, 2, 0, 2},
                                      {"conv2", {4, 8, 8}, 48, 1, 0, 1},
                                      {"maxpool2", {48, 8, 8}, 0, 8, 0, 8},
                                      {"conv3", {48, 1, 1}, 1, 1, 0, 1},
                                  });
}

TEST(Builders, OutputHeads) {
  EXPECT_EQ(build_fpcnet_cc().output_size(), 3u);
  EXPECT_EQ(build_basenet().output_size(), 3u);
  EXPECT_EQ(build_fpcnet_dh().output_size(), 1u);
  EXPECT_EQ(build_fpcnet_cc(4).output_size(), 3u);
  EXPECT_EQ(count_params(build_fpcnet_cc(4)), 180u + 180u + 3u * 120u * 20u + 3u * 20u);
  EXPECT_THROW(build_fpcnet_cc(7), dimension_error);
  EXPECT_THROW(build_model("resnet"), data_error);
  EXPECT_EQ(build_model("fpcnet-cc/2").name, "fpcnet-cc/2");
}

TEST(Builders, ChainMismatchRejected) {
  NetworkBuilder b("bad", {3, 8, 8});
  const int n = b.add("conv", LayerSpec::pointwise(3, 4), {kNetworkInput});
  EXPECT_THROW(b.add("conv2", LayerSpec::pointwise(5, 1), {n}), dimension_error);
  EXPECT_THROW(b.add("maxout", LayerSpec::maxout(3), {n}), dimension_error);
  const int p = b.add("pool", LayerSpec::max_pool(2, 0, 2), {n});
  EXPECT_THROW(b.add("cat", LayerSpec::concat(), {n, p}), dimension_error);
  EXPECT_THROW(b.build(), dimension_error);
}

TEST(Forward, FpcnetCcGivesThreeFiniteScalars) {
  const auto s = build_fpcnet_cc();
  const auto p = init_params(s, InitScheme::UniformFanIn, 1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto out = forward(s, p, random_tensor({3, 32, 32}, seed, 0, 1));
    ASSERT_EQ(out.size(), 3u);
    for (double v : out) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Forward, ZeroInitDhOutputsZero) {
  const auto s = build_fpcnet_dh();
  const auto p = init_params(s, InitScheme::Zero, 0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_EQ(forward(s, p, random_tensor({3, 16, 16}, seed))[0], 0.0);
}

TEST(Forward, DhOutputBounded) {
  const auto s = build_fpcnet_dh();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto p = init_params(s, InitScheme::UniformFanIn, seed);
    for (auto& l : p.layers)
      for (double& w : l.weights) w *= 10.0;
    const double t = forward(s, p, random_tensor({3, 16, 16}, seed, -2, 2))[0];
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1.0);
  }
}

TEST(Forward, InputShapeChecked) {
  const auto s = build_fpcnet_dh();
  EXPECT_THROW(forward(s, init_params(s, InitScheme::Zero, 0), Tensor({3, 32, 32})), dimension_error);
}

TEST(Forward, GlobalMaxProbeIsPermutationInvariant) {
  NetworkBuilder b("probe", {3, 8, 8});
  const int c = b.add("conv", LayerSpec::pointwise(3, 5), {kNetworkInput});
  b.output(b.add("pool", LayerSpec::max_pool(8, 0, 8), {c}));
  const auto s = b.build();
  const auto p = init_params(s, InitScheme::UniformFanIn, 3);
  const Tensor x = random_tensor({3, 8, 8}, 4);
  const auto ref = forward(s, p, x);
  for (std::uint64_t seed = 0; seed < 100; ++seed) EXPECT_EQ(forward(s, p, shuffle_image(x, seed).pixels), ref);
}

TEST(Init, DeterministicAndFanInBounded) {
  const auto s = build_fpcnet_dh();
  EXPECT_EQ(init_params(s, InitScheme::UniformFanIn, 5), init_params(s, InitScheme::UniformFanIn, 5));
  EXPECT_NE(init_params(s, InitScheme::UniformFanIn, 5), init_params(s, InitScheme::UniformFanIn, 6));
  const auto p = init_params(s, InitScheme::UniformFanIn, 5);
  for (std::size_t i = 0; i < s.nodes.size(); ++i) {
    const auto& l = s.nodes[i].layer;
    if (!l.parametric()) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_channels));
    for (double w : p.layers[i].weights) EXPECT_LE(std::abs(w), bound);
  }
}

TEST(Serialization, RoundTripBitExact) {
  test_util::TempDir dir("models");
  for (const char* name : {"fpcnet-dh", "fpcnet-cc/4", "basenet"}) {
    const auto s = build_model(name);
    auto p = init_params(s, InitScheme::UniformFanIn, 77);
    Rng rng(1);
    for (auto& l : p.layers)
      for (double& b : l.bias) b = rng.uniform(-1, 1) * 1e-7;
    save_model(dir / "m.json", s, p);
    const Model m = load_model(dir / "m.json");
    EXPECT_EQ(m.params, p) << name;
    EXPECT_EQ(m.spec.name, s.name);
    EXPECT_EQ(count_flops(m.spec), count_flops(s));
    EXPECT_EQ(shape_trace(m.spec).size(), shape_trace(s).size());
  }
}

TEST(Serialization, DeterministicBytes) {
  test_util::TempDir dir("models-bytes");
  const auto s = build_fpcnet_dh();
  const auto p = init_params(s, InitScheme::UniformFanIn, 3);
  save_model(dir / "a.json", s, p);
  save_model(dir / "b.json", s, p);
  auto slurp = [](const std::filesystem::path& f) {
    std::ifstream in(f, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  const auto text = slurp(dir / "a.json");
  EXPECT_LT(text.find("\"name\""), text.find("\"spec\""));
  EXPECT_LT(text.find("\"spec\""), text.find("\"layers\""));
}

TEST(Serialization, MalformedFilesAreDataErrors) {
  test_util::TempDir dir("models-bad");
  {
    std::ofstream(dir / "junk.json") << "{ not json";
  }
  EXPECT_THROW(load_model(dir / "junk.json"), data_error);
  EXPECT_THROW(load_model(dir / "missing.json"), data_error);

  const auto s = build_fpcnet_dh();
  auto j = model_to_json(s, init_params(s, InitScheme::Zero, 0));
  j["layers"][0]["weights"].erase(0);
  {
    std::ofstream(dir / "short.json") << j.dump();
  }
  EXPECT_THROW(load_model(dir / "short.json"), data_error);
}
