#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "fpcnet/dehazing.hpp"
#include "fpcnet/image_io.hpp"
#include "fpcnet/scenes.hpp"
#include "test_util.hpp"

using namespace fpcnet;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Runs the CLI inside `dir` and captures both streams.
CliRun cli(const test_util::TempDir& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.path().string() + "' && '" FPCNET_CLI_PATH "' " + args + " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "stdout.txt");
  r.err = slurp(dir / "stderr.txt");
  return r;
}

void write_scenes(const fs::path& dir, std::size_t n, std::size_t side) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < n; ++i)
    ppm_write(scenes::make_scene(side, side, 50 + i).image, dir / ("s" + std::to_string(i) + ".ppm"));
}

}  // namespace

TEST(Cli, CountPrintsTotals) {
  test_util::TempDir d("cli-count");
  const CliRun r = cli(d, "count --model fpcnet-dh");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "fpcnet-dh 288 24624\n");
  EXPECT_EQ(cli(d, "count --model fpcnet-cc").out, "fpcnet-cc 116880 3318000\n");
  EXPECT_EQ(cli(d, "count --model basenet").out, "basenet 928920 8294520\n");
  const CliRun t = cli(d, "count --model fpcnet-dh --table");
  EXPECT_NE(t.out.find("maxout,maxout,16x16x16,4x16x16,0,4,0,0"), std::string::npos) << t.out;
}

TEST(Cli, ExitCodes) {
  test_util::TempDir d("cli-exit");
  EXPECT_EQ(cli(d, "").code, 1);
  EXPECT_EQ(cli(d, "count --bogus").code, 1);
  EXPECT_EQ(cli(d, "frobnicate").code, 1);
  EXPECT_EQ(cli(d, "count --threads 0").code, 1);
  EXPECT_EQ(cli(d, "--threads 0 count").code, 1);
  EXPECT_EQ(cli(d, "verify-equivalence --k 1 --trials 2").code, 1);
  EXPECT_EQ(cli(d, "count --model nosuch").code, 2);
  EXPECT_EQ(cli(d, "dehaze --in missing.ppm --out x.ppm --method dcp").code, 2);
  EXPECT_EQ(cli(d, "--help").code, 0);

  std::ofstream(d / "bad.ppm") << "P6\n4 4\n255\nabc";
  const CliRun bad = cli(d, "dehaze --in bad.ppm --out x.ppm --method dcp");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("truncated"), std::string::npos) << bad.err;
}

TEST(Cli, NonFiniteLossExitsThree) {
  test_util::TempDir d("cli-nan");
  DhRecord r{Tensor({3, 16, 16}, 0.5), std::numeric_limits<double>::quiet_NaN(), {0.8, 0.8, 0.8}, 0, false};
  write_dh_dataset(d / "nan.bin", std::vector<DhRecord>(4, r));
  const CliRun run = cli(d, "train-dh --data nan.bin --out m.json --iterations 3 --batch 2 --quiet");
  EXPECT_EQ(run.code, 3) << run.err;
  EXPECT_NE(run.err.find("non-finite"), std::string::npos);
}

TEST(Cli, SidecarRecordsResolvedConfig) {
  test_util::TempDir d("cli-sidecar");
  ASSERT_EQ(cli(d, "--threads 2 verify-equivalence --k 2 3 --trials 20 --seed 4 --out eq.csv").code, 0);
  const auto j = nlohmann::json::parse(slurp(d / "eq.csv.config.json"));
  EXPECT_EQ(j["command"], "verify-equivalence");
  EXPECT_EQ(j["threads"], 2);
  EXPECT_EQ(j["options"]["seed"], 4);
  EXPECT_EQ(j["options"]["trials"], 20);
  EXPECT_EQ(j["options"]["k"], nlohmann::json::array({2, 3}));

  ASSERT_EQ(cli(d, "count").code, 0);
  const auto c = nlohmann::json::parse(slurp(d / "fpcnet-count.config.json"));
  EXPECT_EQ(c["options"]["model"], "fpcnet-dh");
  EXPECT_EQ(c["options"]["table"], false);

  ASSERT_EQ(cli(d, "--sidecar side.json count --model basenet").code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(d / "side.json"))["options"]["model"], "basenet");
}

TEST(Cli, ThreadsFromEnvironment) {
  test_util::TempDir d("cli-env");
  ASSERT_EQ(cli(d, "count").code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(d / "fpcnet-count.config.json"))["threads"], 1);
  const std::string cmd = "cd '" + d.path().string() + "' && FPCNET_THREADS=3 '" FPCNET_CLI_PATH "' count > /dev/null";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(d / "fpcnet-count.config.json"))["threads"], 3);
}

TEST(ImageIo, WhitePixelAndRoundTrip) {
  test_util::TempDir d("ppm");
  {
    std::ofstream f(d / "w.ppm", std::ios::binary);
    f << "P6\n1 1\n255\n" << '\xff' << '\xff' << '\xff';
  }
  const Tensor w = ppm_read(d / "w.ppm");
  EXPECT_EQ(w.shape(), (Shape{3, 1, 1}));
  for (double v : w.data()) EXPECT_EQ(v, 1.0);

  const Tensor img = test_util::random_tensor({3, 7, 5}, 1, 0, 1);
  ppm_write(img, d / "r.ppm");
  const Tensor back = ppm_read(d / "r.ppm");
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), 0.5 / 255 + 1e-12);
  ppm_write(back, d / "r2.ppm");
  EXPECT_EQ(slurp(d / "r.ppm"), slurp(d / "r2.ppm"));
}

TEST(ImageIo, TruncatedPayloadNamesOffset) {
  test_util::TempDir d("ppm-bad");
  std::ofstream(d / "t.ppm", std::ios::binary) << "P6\n2 2\n255\n" << std::string(5, 'a');
  try {
    ppm_read(d / "t.ppm");
    FAIL();
  } catch (const data_error& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("expected 12"), std::string::npos) << m;
    EXPECT_NE(m.find("offset"), std::string::npos) << m;
  }
  std::ofstream(d / "m.ppm", std::ios::binary) << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(ppm_read(d / "m.ppm"), data_error);
}

TEST(Cli, VerifyEquivalenceCsvIsDeterministic) {
  test_util::TempDir d("cli-eq");
  ASSERT_EQ(cli(d, "verify-equivalence --k 2 3 --trials 50 --seed 1 --out a.csv").code, 0);
  ASSERT_EQ(cli(d, "verify-equivalence --k 2 3 --trials 50 --seed 1 --out b.csv").code, 0);
  const std::string a = slurp(d / "a.csv");
  EXPECT_EQ(a, slurp(d / "b.csv"));
  std::istringstream in(a);
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2);
}

TEST(Cli, DehazeWritesImageAndMap) {
  test_util::TempDir d("cli-dehaze");
  const auto h = scenes::make_hazy_scene(scenes::make_scene(48, 64, 3), 1.0, 0.85);
  ppm_write(h.hazy, d / "hazy.ppm");
  const CliRun r = cli(d, "dehaze --in hazy.ppm --out out/clear.ppm --method dcp");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(ppm_read(d / "out/clear.ppm").shape(), (Shape{3, 48, 64}));
  EXPECT_EQ(ppm_read(d / "out/clear.t.pgm").shape(), (Shape{1, 48, 64}));
  EXPECT_EQ(r.out.rfind("A ", 0), 0u);
  EXPECT_EQ(cli(d, "dehaze --in hazy.ppm --out y.ppm").code, 1);  // model method without --model
}

TEST(Cli, DehazingPipelineEndToEnd) {
  test_util::TempDir d("cli-dh");
  write_scenes(d / "clear", 4, 40);
  ASSERT_EQ(cli(d, "synth-dh --clear clear --out dh.bin --patches 200 --seed 2").code, 0);
  const CliRun t1 = cli(d, "train-dh --data dh.bin --out m1.json --iterations 40 --batch 16 --quiet");
  ASSERT_EQ(t1.code, 0) << t1.err;
  ASSERT_EQ(cli(d, "--threads 2 train-dh --data dh.bin --out m2.json --iterations 40 --batch 16 --quiet").code, 0);
  EXPECT_EQ(slurp(d / "m1.json"), slurp(d / "m2.json"));
  EXPECT_TRUE(fs::exists(d / "m1.json.report.csv"));

  const CliRun ev = cli(d, "eval-dh --model m1.json --data dh.bin");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(ev.out.substr(0, ev.out.find('\n')), "method,MSE(x10^-2),PSNR,SSIM");

  ppm_write(scenes::make_hazy_scene(scenes::make_scene(40, 40, 9), 1.0, 0.9).hazy, d / "h.ppm");
  ASSERT_EQ(cli(d, "dehaze --in h.ppm --model m1.json --out a.ppm").code, 0);
  ASSERT_EQ(cli(d, "dehaze --in h.ppm --model m1.json --out b.ppm").code, 0);
  EXPECT_EQ(slurp(d / "a.ppm"), slurp(d / "b.ppm"));

  ASSERT_EQ(cli(d, "inspect-dh --clear clear --model m1.json --out insp --ensembles 2").code, 0);
  EXPECT_TRUE(fs::exists(d / "insp.svg"));
  EXPECT_TRUE(fs::exists(d / "insp_dark_channel.csv"));
  // wrong kind of model
  ASSERT_EQ(cli(d, "count").code, 0);
  std::ofstream(d / "junk.json") << "{not json";
  EXPECT_EQ(cli(d, "dehaze --in h.ppm --model junk.json --out c.ppm").code, 2);
}

TEST(Cli, ColorConstancyPipelineEndToEnd) {
  test_util::TempDir d("cli-cc");
  write_scenes(d / "clear", 5, 48);
  const CliRun s = cli(d, "synth-cc --clear clear --out cc --casts-per-image 3 --seed 3");
  ASSERT_EQ(s.code, 0) << s.err;
  const std::string csv = slurp(d / "cc/casts.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "image,E_R,E_G,E_B,split");
  const CliRun t = cli(d, "train-cc --data cc --out m.json --width-divisor 8 --iterations 20 --batch 8 --quiet");
  ASSERT_EQ(t.code, 0) << t.err;
  const CliRun e = cli(d, "eval-cc --data cc --model m.json --ensembles 4");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("gray-world,"), std::string::npos);
  ppm_write(scenes::make_scene(40, 40, 1).image, d / "in.ppm");
  const CliRun c = cli(d, "correct --in in.ppm --model m.json --out fixed.ppm --ensembles 4");
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(ppm_read(d / "fixed.ppm").shape(), (Shape{3, 40, 40}));
  ASSERT_EQ(cli(d, "inspect-cc --data cc --model m.json --out hist --ensembles 1").code, 0);
  EXPECT_TRUE(fs::exists(d / "hist.svg"));
  EXPECT_EQ(cli(d, "eval-cc --data cc --model m.json --split nope").code, 1);
}

TEST(Cli, GradcheckPasses) {
  test_util::TempDir d("cli-gc");
  const CliRun r = cli(d, "gradcheck --model fpcnet-dh --samples 50");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}
