// fpcnet command-line tool: dataset synthesis, training, evaluation, dehazing,
// equivalence checks, architecture accounting and activation inspection.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fpcnet/fpcnet.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace fpcnet;

namespace {

struct usage_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- option registry

ordered_json to_json_value(const fs::path& p) { return p.string(); }
template <class T>
ordered_json to_json_value(const T& v) {
  return v;
}

/// A subcommand plus typed accessors for every option it owns, so the
/// resolved configuration can be echoed after parsing.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<ordered_json()>>> fields;

  template <class T>
  CLI::Option* opt(const std::string& names, T& var, const std::string& desc) {
    CLI::Option* o = app->add_option(names, var, desc)->capture_default_str();
    fields.emplace_back(o->get_single_name(), [&var] { return to_json_value(var); });
    return o;
  }

  CLI::Option* flag(const std::string& names, bool& var, const std::string& desc) {
    CLI::Option* o = app->add_flag(names, var, desc);
    fields.emplace_back(o->get_single_name(), [&var] { return ordered_json(var); });
    return o;
  }

  ordered_json resolved() const {
    ordered_json j = ordered_json::object();
    for (const auto& [name, get] : fields) j[name] = get();
    return j;
  }
};

// ---------------------------------------------------------------- helpers

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream os(p);
  if (!os) throw data_error("cannot write " + p.string());
  return os;
}

/// Runs `fn` against the named file, or stdout for "-".
void with_output(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  if (path == "-") {
    fn(std::cout);
    return;
  }
  auto os = open_out(path);
  fn(os);
}

fs::path clear_dir(const fs::path& dir) { return fs::is_directory(dir / "clear") ? dir / "clear" : dir; }

std::vector<Tensor> load_rgb_images(const fs::path& dir, std::vector<std::string>* names = nullptr) {
  std::vector<Tensor> out;
  for (const auto& p : list_ppm(dir)) {
    Tensor t = ppm_read(p);
    if (t.channels() != 3) throw data_error(p.string() + ": expected an RGB (P6) image");
    out.push_back(std::move(t));
    if (names) names->push_back(p.filename().string());
  }
  if (out.empty()) throw data_error("no .ppm images in " + dir.string());
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error(where + ": '" + s + "' is not a number");
  }
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// CC datasets: DIR/images/*.ppm plus DIR/casts.csv (image,E_R,E_G,E_B[,split]).
struct CcData {
  std::vector<std::string> names;
  std::vector<Tensor> images;
  std::vector<CastEntry> entries;
  std::vector<std::string> split;
};

CcData load_cc_data(const fs::path& dir) {
  const fs::path csv = dir / "casts.csv";
  std::ifstream in(csv);
  if (!in) throw data_error("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw data_error(csv.string() + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "image" || header[1] != "E_R" || header[2] != "E_G" || header[3] != "E_B")
    throw data_error(csv.string() + ": header must start with image,E_R,E_G,E_B");
  const fs::path image_dir = fs::is_directory(dir / "images") ? dir / "images" : dir / "clear";
  CcData d;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = csv.string() + ":" + std::to_string(line_no);
    if (cells.size() < 4) throw data_error(where + ": expected at least 4 columns");
    auto [it, fresh] = index.emplace(cells[0], d.images.size());
    if (fresh) {
      Tensor t = ppm_read(image_dir / cells[0]);
      if (t.channels() != 3) throw data_error(where + ": " + cells[0] + " is not an RGB image");
      d.images.push_back(std::move(t));
      d.names.push_back(cells[0]);
    }
    Rgb e{parse_double(cells[1], where), parse_double(cells[2], where), parse_double(cells[3], where)};
    for (double v : e)
      if (!(v > 0.0)) throw data_error(where + ": cast components must be positive");
    d.entries.push_back({it->second, {e[0] / e[1], 1.0, e[2] / e[1]}});
    d.split.push_back(cells.size() > 4 ? cells[4] : "all");
  }
  if (d.entries.empty()) throw data_error(csv.string() + ": no rows");
  return d;
}

std::vector<CastEntry> select_split(const CcData& d, const std::string& split) {
  if (split != "train" && split != "test" && split != "all") throw usage_error("--split must be train, test or all");
  std::vector<CastEntry> out;
  for (std::size_t i = 0; i < d.entries.size(); ++i)
    if (split == "all" || d.split[i] == split || d.split[i] == "all") out.push_back(d.entries[i]);
  if (out.empty()) throw data_error("no rows in split '" + split + "'");
  return out;
}

Model load_model_checked(const fs::path& p, std::size_t outputs) {
  Model m = load_model(p);
  if (m.spec.output_size() != outputs)
    throw data_error(p.string() + ": model '" + m.spec.name + "' has " + std::to_string(m.spec.output_size()) +
                     " outputs, expected " + std::to_string(outputs));
  return m;
}

void write_train_outputs(const fs::path& model_out, const std::string& report, const NetworkSpec& spec,
                         const TrainReport& r) {
  ensure_parent(model_out);
  save_model(model_out, spec, r.params);
  with_output(report, [&](std::ostream& os) { write_report_csv(os, r); });
  std::cerr << "trained " << spec.name << " in " << fmt(r.wall_seconds, 4) << " s, final loss "
            << fmt(r.loss_curve.empty() ? 0.0 : r.loss_curve.back().loss) << "\n";
}

ProgressFn stderr_progress(bool quiet) {
  if (quiet) return {};
  return [](std::size_t it, double loss) { std::cerr << "iter " << it << " loss " << fmt(loss) << "\n"; };
}

// ---------------------------------------------------------------- options

struct Options {
  std::size_t threads = default_threads();
  std::string sidecar;

  // count
  std::string count_model = "fpcnet-dh";
  bool count_table = false;

  // verify-equivalence
  std::vector<std::size_t> eq_k{3};
  std::size_t eq_trials = 1000;
  fs::path eq_image;
  std::uint64_t eq_seed = 0;
  std::string eq_out = "-";

  // make-scenes
  fs::path ms_out;
  std::size_t ms_count = 60, ms_height = 128, ms_width = 128;
  std::uint64_t ms_seed = 1;
  bool ms_hazy = false;
  double ms_beta_lo = 0.5, ms_beta_hi = 1.5, ms_a_lo = 0.7, ms_a_hi = 1.0;

  // synth-cc
  fs::path scc_clear, scc_out;
  std::size_t scc_casts = 10;
  double scc_lo = 0.4, scc_hi = 2.5, scc_test = 0.2;
  std::uint64_t scc_seed = 1;

  // train-cc
  fs::path tcc_data, tcc_out;
  std::string tcc_report;
  std::size_t tcc_divisor = 4, tcc_iterations = 20000, tcc_batch = 128, tcc_per_cast = 20, tcc_decay_step = 0,
              tcc_log = 100;
  double tcc_lr = 0.005, tcc_momentum = 0.9, tcc_decay = 0.5;
  bool tcc_full = false, tcc_edge = false, tcc_quiet = false;
  std::uint64_t tcc_seed = 1;

  // eval-cc
  fs::path ecc_data, ecc_model;
  std::string ecc_out = "-", ecc_split = "test", ecc_errors;
  std::size_t ecc_ensembles = 128;
  std::uint64_t ecc_seed = 0;

  // correct
  fs::path cor_in, cor_model, cor_out;
  std::size_t cor_ensembles = 128;
  std::uint64_t cor_seed = 0;

  // synth-dh
  fs::path sdh_clear, sdh_out;
  std::size_t sdh_patches = 30000, sdh_levels = 1, sdh_patch = 16;
  double sdh_t_lo = 0.1, sdh_t_hi = 1.0, sdh_a_lo = 0.7, sdh_a_hi = 1.0, sdh_test = 0.2;
  bool sdh_no_shuffle = false;
  std::uint64_t sdh_seed = 1;

  // train-dh
  fs::path tdh_data, tdh_out;
  std::string tdh_report;
  std::size_t tdh_iterations = 50000, tdh_batch = 128, tdh_decay_step = 0, tdh_log = 100;
  double tdh_lr = 0.005, tdh_momentum = 0.9, tdh_decay = 0.5;
  bool tdh_quiet = false;
  std::uint64_t tdh_seed = 1;

  // eval-dh
  fs::path edh_data, edh_model, edh_pairs;
  std::string edh_out = "-";
  std::size_t edh_patch = 16, edh_stride = 8;
  std::uint64_t edh_seed = 0;

  // dehaze
  fs::path dh_in, dh_model, dh_out, dh_tmap;
  std::string dh_method = "model";
  std::size_t dh_patch = 16, dh_stride = 8;
  double dh_t_min = kDefaultTMin;
  std::uint64_t dh_seed = 0;

  // inspect-cc
  fs::path icc_data, icc_model;
  std::string icc_out, icc_layer = "maxpool1_1", icc_split = "all";
  std::size_t icc_ensembles = 16, icc_bins = 64;
  double icc_max = 2.0;
  std::uint64_t icc_seed = 0;

  // inspect-dh
  fs::path idh_clear, idh_model;
  std::string idh_out, idh_layer = "maxpool2";
  std::size_t idh_ensembles = 64, idh_bins = 64;
  std::uint64_t idh_seed = 0;

  // gradcheck
  std::string gc_model = "all";
  std::size_t gc_samples = 200;
  double gc_step = 1e-4, gc_tolerance = 1e-4;
  std::uint64_t gc_seed = 0;
};

// ---------------------------------------------------------------- commands

int run_count(const Options& o) {
  const NetworkSpec spec = build_model(o.count_model);
  std::cout << spec.name << ' ' << count_params(spec) << ' ' << count_flops(spec) << '\n';
  if (o.count_table) {
    std::cout << "layer,kind,input,output,num,filter,pad,stride\n";
    for (const auto& r : shape_trace(spec))
      std::cout << r.id << ',' << to_string(r.kind) << ',' << r.input.str() << ',' << r.output.str() << ','
                << r.num << ',' << r.filter << ',' << r.pad << ',' << r.stride << '\n';
  }
  return 0;
}

int run_verify_equivalence(const Options& o) {
  if (o.eq_trials == 0) throw usage_error("--trials must be positive");
  for (std::size_t k : o.eq_k)
    if (k < 2) throw usage_error("--k values must be at least 2");
  const Tensor image = o.eq_image.empty() ? scenes::make_texture(96, 96, o.eq_seed) : ppm_read(o.eq_image);
  const auto rows = sweep_equivalence(image, o.eq_k, o.eq_trials, o.eq_seed);
  with_output(o.eq_out, [&](std::ostream& os) { write_sweep_csv(os, rows); });
  return 0;
}

int run_make_scenes(const Options& o) {
  if (o.ms_count == 0) throw usage_error("--count must be positive");
  if (!(o.ms_beta_lo >= 0.0 && o.ms_beta_lo <= o.ms_beta_hi)) throw usage_error("beta range must satisfy 0 <= lo <= hi");
  if (!(o.ms_a_lo > 0.0 && o.ms_a_lo <= o.ms_a_hi && o.ms_a_hi <= 1.0))
    throw usage_error("airlight range must satisfy 0 < lo <= hi <= 1");
  fs::create_directories(o.ms_out / "clear");
  if (o.ms_hazy) {
    fs::create_directories(o.ms_out / "hazy");
    fs::create_directories(o.ms_out / "transmission");
  }
  std::ofstream air;
  if (o.ms_hazy) {
    air = open_out(o.ms_out / "airlight.csv");
    air << "image,A_R,A_G,A_B,beta\n" << std::setprecision(17);
  }
  for (std::size_t i = 0; i < o.ms_count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.ppm", i);
    const auto scene = scenes::make_scene(o.ms_height, o.ms_width, derive_seed(o.ms_seed, {i}));
    ppm_write(scene.image, o.ms_out / "clear" / name);
    if (!o.ms_hazy) continue;
    Rng rng(o.ms_seed, {0x4a2e, i});
    const double beta = rng.uniform(o.ms_beta_lo, o.ms_beta_hi);
    const double a = rng.uniform(o.ms_a_lo, o.ms_a_hi);
    const auto hz = scenes::make_hazy_scene(scene, beta, a);
    ppm_write(hz.hazy, o.ms_out / "hazy" / name);
    pgm_write(hz.transmission, (o.ms_out / "transmission" / name).replace_extension(".pgm"));
    air << name << ',' << a << ',' << a << ',' << a << ',' << beta << '\n';
  }
  std::cout << "wrote " << o.ms_count << " scenes to " << o.ms_out.string() << '\n';
  return 0;
}

int run_synth_cc(const Options& o) {
  if (!(o.scc_lo > 0.0 && o.scc_lo <= o.scc_hi)) throw usage_error("cast range must satisfy 0 < lo <= hi");
  if (!(o.scc_test >= 0.0 && o.scc_test <= 1.0)) throw usage_error("--test-fraction must be in [0, 1]");
  std::vector<std::string> names;
  const auto images = load_rgb_images(clear_dir(o.scc_clear), &names);
  const auto syn = synthesize_cc_casts(images.size(), o.scc_casts, o.scc_lo, o.scc_hi, o.scc_seed, o.scc_test);
  fs::create_directories(o.scc_out / "images");
  auto csv = open_out(o.scc_out / "casts.csv");
  csv << "image,E_R,E_G,E_B,split\n" << std::setprecision(17);
  std::size_t written = 0;
  std::vector<std::size_t> per_image(images.size(), 0);
  auto emit = [&](const CastEntry& e, const char* split) {
    Tensor I = apply_cast(images[e.image], e.cast);
    // Scale so the brightest value is 1: the cast direction is unchanged and
    // nothing clips on export.
    double peak = 0.0;
    for (double v : I.data()) peak = std::max(peak, v);
    if (peak > 0.0)
      for (double& v : I.data()) v /= peak;
    const std::string stem = fs::path(names[e.image]).stem().string();
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_%03zu.ppm", per_image[e.image]++);
    ppm_write(I, o.scc_out / "images" / (stem + suffix));
    const auto unit = IlluminantEstimate::from(e.cast).e;
    csv << stem + suffix << ',' << unit[0] << ',' << unit[1] << ',' << unit[2] << ',' << split << '\n';
    ++written;
  };
  // One pass in image order keeps the file layout independent of the split.
  std::size_t ti = 0, si = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const bool test = syn.is_test_image[i];
    const auto& list = test ? syn.test : syn.train;
    std::size_t& cursor = test ? si : ti;
    while (cursor < list.size() && list[cursor].image == i) emit(list[cursor++], test ? "test" : "train");
  }
  std::cout << "wrote " << written << " cast images (" << syn.train.size() << " train, " << syn.test.size()
            << " test)\n";
  return 0;
}

int run_train_cc(const Options& o) {
  if (o.tcc_per_cast == 0) throw usage_error("--ensembles-per-cast must be positive");
  TrainConfig cfg;
  cfg.batch_size = o.tcc_batch;
  cfg.iterations = o.tcc_iterations;
  cfg.learning_rate = o.tcc_lr;
  cfg.momentum = o.tcc_momentum;
  cfg.lr_decay_factor = o.tcc_decay;
  cfg.lr_decay_interval = o.tcc_decay_step;
  cfg.seed = derive_seed(o.tcc_seed, {0x7ca1});
  cfg.log_interval = o.tcc_log;
  cfg.threads = o.threads;
  cfg.validate();
  const NetworkSpec spec = build_fpcnet_cc(o.tcc_divisor);

  CcData d = load_cc_data(o.tcc_data);
  auto images = std::make_shared<const std::vector<Tensor>>(std::move(d.images));
  const auto train_rows = select_split(d, "train");
  const CcDataset data(images, train_rows, false, o.tcc_per_cast, spec.input_shape, derive_seed(o.tcc_seed, {0xda7a}),
                       o.tcc_edge);
  const ParamStore init = init_params(spec, InitScheme::UniformFanIn, derive_seed(o.tcc_seed, {0x1417}));
  const TrainReport r = train(spec, init, data, cfg, {}, stderr_progress(o.tcc_quiet));
  write_train_outputs(o.tcc_out, o.tcc_report.empty() ? o.tcc_out.string() + ".report.csv" : o.tcc_report, spec, r);
  return 0;
}

int run_eval_cc(const Options& o) {
  if (o.ecc_ensembles == 0) throw usage_error("--ensembles must be positive");
  const CcData d = load_cc_data(o.ecc_data);
  const auto rows = select_split(d, o.ecc_split);
  const Model m = load_model_checked(o.ecc_model, 3);
  const auto ev = evaluate_cc(d.images, rows, false, m.spec, m.params, o.ecc_ensembles, o.ecc_seed, o.threads);
  with_output(o.ecc_out, [&](std::ostream& os) {
    write_cc_metrics_header(os);
    write_cc_metrics_row(os, m.spec.name, cc_metrics(ev.model_errors));
    write_cc_metrics_row(os, "gray-world", cc_metrics(ev.gray_world_errors));
  });
  if (!o.ecc_errors.empty()) {
    auto os = open_out(o.ecc_errors);
    os << "image,model_error,gray_world_error\n" << std::setprecision(10);
    for (std::size_t i = 0; i < rows.size(); ++i)
      os << d.names[rows[i].image] << ',' << ev.model_errors[i] << ',' << ev.gray_world_errors[i] << '\n';
  }
  return 0;
}

int run_correct(const Options& o) {
  if (o.cor_ensembles == 0) throw usage_error("--ensembles must be positive");
  const Tensor I = ppm_read(o.cor_in);
  if (I.channels() != 3) throw data_error(o.cor_in.string() + ": expected an RGB image");
  const Model m = load_model_checked(o.cor_model, 3);
  const auto est = estimate_illuminant(I, m.spec, m.params, o.cor_ensembles, o.cor_seed, o.threads);
  ensure_parent(o.cor_out);
  ppm_write(correct_image(I, est.e), o.cor_out);
  std::cout << std::setprecision(10) << est.e[0] << ' ' << est.e[1] << ' ' << est.e[2] << '\n';
  return 0;
}

int run_synth_dh(const Options& o) {
  DhSynthConfig cfg;
  cfg.patches = o.sdh_patches;
  cfg.levels = o.sdh_levels;
  cfg.patch = o.sdh_patch;
  cfg.t_lo = o.sdh_t_lo;
  cfg.t_hi = o.sdh_t_hi;
  cfg.a_lo = o.sdh_a_lo;
  cfg.a_hi = o.sdh_a_hi;
  cfg.test_fraction = o.sdh_test;
  cfg.shuffle = !o.sdh_no_shuffle;
  cfg.seed = o.sdh_seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw usage_error(e.what());
  }
  const auto images = load_rgb_images(clear_dir(o.sdh_clear));
  const auto records = synthesize_dh_dataset(images, cfg);
  ensure_parent(o.sdh_out);
  write_dh_dataset(o.sdh_out, records);
  std::size_t test = 0;
  for (const auto& r : records) test += r.test;
  std::cout << "wrote " << records.size() << " patches (" << records.size() - test << " train, " << test
            << " test)\n";
  return 0;
}

int run_train_dh(const Options& o) {
  TrainConfig cfg;
  cfg.batch_size = o.tdh_batch;
  cfg.iterations = o.tdh_iterations;
  cfg.learning_rate = o.tdh_lr;
  cfg.momentum = o.tdh_momentum;
  cfg.lr_decay_factor = o.tdh_decay;
  cfg.lr_decay_interval = o.tdh_decay_step;
  cfg.seed = derive_seed(o.tdh_seed, {0x7d41});
  cfg.log_interval = o.tdh_log;
  cfg.threads = o.threads;
  cfg.validate();
  const auto records = read_dh_dataset(o.tdh_data);
  const NetworkSpec spec = build_fpcnet_dh();
  if (!records.empty() && records[0].patch.shape() != spec.input_shape)
    throw data_error(o.tdh_data.string() + ": patches are " + records[0].patch.shape().str() + ", model expects " +
                     spec.input_shape.str());
  const DhDataset data(records, false);
  const ParamStore init = init_params(spec, InitScheme::UniformFanIn, derive_seed(o.tdh_seed, {0x1417}));
  const TrainReport r = train(spec, init, data, cfg, {}, stderr_progress(o.tdh_quiet));
  write_train_outputs(o.tdh_out, o.tdh_report.empty() ? o.tdh_out.string() + ".report.csv" : o.tdh_report, spec, r);
  return 0;
}

struct PairScores {
  double psnr = 0.0, ssim = 0.0;
};

int run_eval_dh(const Options& o) {
  if (o.edh_data.empty() && o.edh_pairs.empty()) throw usage_error("eval-dh needs --data and/or --pairs");
  const Model m = load_model_checked(o.edh_model, 1);
  std::string mse_model, mse_dcp, psnr_model, psnr_dcp, ssim_model, ssim_dcp;
  if (!o.edh_data.empty()) {
    const auto records = read_dh_dataset(o.edh_data);
    const auto ev = evaluate_dh(records, m.spec, m.params, o.threads);
    if (ev.count == 0) throw data_error(o.edh_data.string() + ": no test-split patches");
    mse_model = fmt(ev.model_mse * 100.0);
    mse_dcp = fmt(ev.dcp_mse * 100.0);
  }
  if (!o.edh_pairs.empty()) {
    std::vector<std::string> names;
    const auto hazy = load_rgb_images(o.edh_pairs / "hazy", &names);
    double pm = 0, pd = 0, sm = 0, sd = 0;
    for (std::size_t i = 0; i < hazy.size(); ++i) {
      const Tensor clear = ppm_read(o.edh_pairs / "clear" / names[i]);
      const Rgb A = estimate_atmospheric_light(hazy[i]);
      TransmissionMapConfig tc{o.edh_patch, o.edh_stride, kDefaultTMin, true, derive_seed(o.edh_seed, {i}), o.threads};
      const Tensor jm = clip01(recover_clear(hazy[i], transmission_map(hazy[i], m.spec, m.params, tc), A));
      const Tensor jd = clip01(recover_clear(hazy[i], dcp_transmission(hazy[i], A), A));
      pm += psnr(jm, clear);
      pd += psnr(jd, clear);
      sm += ssim(jm, clear);
      sd += ssim(jd, clear);
    }
    const double n = static_cast<double>(hazy.size());
    psnr_model = fmt(pm / n);
    psnr_dcp = fmt(pd / n);
    ssim_model = fmt(sm / n);
    ssim_dcp = fmt(sd / n);
  }
  with_output(o.edh_out, [&](std::ostream& os) {
    os << "method,MSE(x10^-2),PSNR,SSIM\n";
    os << m.spec.name << ',' << mse_model << ',' << psnr_model << ',' << ssim_model << '\n';
    os << "dcp," << mse_dcp << ',' << psnr_dcp << ',' << ssim_dcp << '\n';
  });
  return 0;
}

int run_dehaze(const Options& o) {
  if (o.dh_method != "model" && o.dh_method != "dcp") throw usage_error("--method must be model or dcp");
  if (!(o.dh_t_min > 0.0 && o.dh_t_min <= 1.0)) throw usage_error("--t-min must be in (0, 1]");
  const Tensor I = ppm_read(o.dh_in);
  if (I.channels() != 3) throw data_error(o.dh_in.string() + ": expected an RGB image");
  const Rgb A = estimate_atmospheric_light(I);
  Tensor t;
  if (o.dh_method == "model") {
    if (o.dh_model.empty()) throw usage_error("--model is required with --method model");
    const Model m = load_model_checked(o.dh_model, 1);
    t = transmission_map(I, m.spec, m.params, {o.dh_patch, o.dh_stride, o.dh_t_min, true, o.dh_seed, o.threads});
  } else {
    t = dcp_transmission(I, A, 0.95, 15, o.dh_t_min);
  }
  ensure_parent(o.dh_out);
  ppm_write(recover_clear(I, t, A, o.dh_t_min), o.dh_out);
  fs::path tmap = o.dh_tmap;
  if (tmap.empty()) tmap = fs::path(o.dh_out).replace_extension(".t.pgm");
  ensure_parent(tmap);
  pgm_write(t, tmap);
  std::cout << std::setprecision(10) << "A " << A[0] << ' ' << A[1] << ' ' << A[2] << '\n';
  return 0;
}

int run_inspect_cc(const Options& o) {
  if (o.icc_ensembles == 0 || o.icc_bins == 0) throw usage_error("--ensembles and --bins must be positive");
  const CcData d = load_cc_data(o.icc_data);
  const auto rows = select_split(d, o.icc_split);
  const Model m = load_model_checked(o.icc_model, 3);
  const Shape in = m.spec.input_shape;
  std::vector<WeightedHistogram> weighted(rows.size()), plain(rows.size());
  parallel_for(rows.size(), o.threads, [&](std::size_t i) {
    const Tensor& I = d.images[rows[i].image];
    const Tensor intrinsic = correct_image(I, rows[i].cast);
    Tensor wmap({1, I.height(), I.width()});
    Rng rng(o.icc_seed, {0x1ce0, i});
    for (std::size_t k = 0; k < o.icc_ensembles; ++k) {
      const auto e = sample_ensemble(I, in.h, in.w, rng);
      const auto aw = activation_weights(m.spec, m.params, e.pixels, o.icc_layer);
      const Tensor r = reproject(aw.values, e);
      for (std::size_t p = 0; p < r.size(); ++p) wmap[p] += r[p];
    }
    weighted[i] = WeightedHistogram::chroma(o.icc_bins, 0.0, o.icc_max);
    plain[i] = WeightedHistogram::chroma(o.icc_bins, 0.0, o.icc_max);
    accumulate_chroma(weighted[i], intrinsic, wmap);
    accumulate_chroma(plain[i], intrinsic, unit_weights(intrinsic));
  });
  WeightedHistogram hw = WeightedHistogram::chroma(o.icc_bins, 0.0, o.icc_max), hp = hw;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    hw.merge(weighted[i]);
    hp.merge(plain[i]);
  }
  with_output(o.icc_out + ".csv", [&](std::ostream& os) { hw.write_csv(os); });
  with_output(o.icc_out + "_unweighted.csv", [&](std::ostream& os) { hp.write_csv(os); });
  with_output(o.icc_out + ".svg", [&](std::ostream& os) { svg::write_heatmap(os, hw, "activation-weighted chroma"); });
  with_output(o.icc_out + "_unweighted.svg", [&](std::ostream& os) { svg::write_heatmap(os, hp, "unweighted chroma"); });
  const std::size_t center = static_cast<std::size_t>(hw.bin_of(1.0));
  std::cout << "weighted mass " << fmt(hw.total()) << ", fraction at (1,1) bin "
            << fmt(hw.total() > 0 ? hw.at(center, center) / hw.total() : 0.0) << ", skipped " << hw.skipped() << '\n';
  return 0;
}

int run_inspect_dh(const Options& o) {
  if (o.idh_ensembles == 0 || o.idh_bins == 0) throw usage_error("--ensembles and --bins must be positive");
  const auto images = load_rgb_images(clear_dir(o.idh_clear));
  const Model m = load_model_checked(o.idh_model, 1);
  const Shape in = m.spec.input_shape;
  std::vector<WeightedHistogram> weighted(images.size()), plain(images.size()), dark(images.size());
  parallel_for(images.size(), o.threads, [&](std::size_t i) {
    const Tensor& J = images[i];
    Tensor wmap({1, J.height(), J.width()});
    Rng rng(o.idh_seed, {0x1de0, i});
    for (std::size_t k = 0; k < o.idh_ensembles; ++k) {
      const auto e = sample_ensemble(J, in.h, in.w, rng);
      const auto aw = activation_weights(m.spec, m.params, e.pixels, o.idh_layer);
      const Tensor r = reproject(aw.values, e);
      for (std::size_t p = 0; p < r.size(); ++p) wmap[p] += r[p];
    }
    weighted[i] = plain[i] = dark[i] = WeightedHistogram::min_channel(o.idh_bins);
    accumulate_min_channel(weighted[i], J, wmap);
    accumulate_min_channel(plain[i], J, unit_weights(J));
    const Tensor dc = dark_channel(J, 15);
    accumulate_min_channel(dark[i], dc, unit_weights(J));
  });
  auto hw = WeightedHistogram::min_channel(o.idh_bins), hp = hw, hd = hw;
  for (std::size_t i = 0; i < images.size(); ++i) {
    hw.merge(weighted[i]);
    hp.merge(plain[i]);
    hd.merge(dark[i]);
  }
  with_output(o.idh_out + "_weighted.csv", [&](std::ostream& os) { hw.write_csv(os); });
  with_output(o.idh_out + "_unweighted.csv", [&](std::ostream& os) { hp.write_csv(os); });
  with_output(o.idh_out + "_dark_channel.csv", [&](std::ostream& os) { hd.write_csv(os); });
  with_output(o.idh_out + ".svg", [&](std::ostream& os) {
    svg::write_curves(os,
                      {{m.spec.name + " weighted", hw.cumulative()},
                       {"dark channel (15x15)", hd.cumulative()},
                       {"min channel", hp.cumulative()}},
                      0.0, 1.0, "cumulative min-channel distribution");
  });
  return 0;
}

int run_gradcheck(const Options& o) {
  std::vector<std::string> models;
  if (o.gc_model == "all")
    models = {"fpcnet-dh", "fpcnet-cc", "basenet"};
  else
    models = {o.gc_model};
  if (!(o.gc_step > 0.0)) throw usage_error("--step must be positive");
  bool ok = true;
  std::cout << "model,max_rel_error,checked,skipped,result\n";
  for (const auto& name : models) {
    const NetworkSpec spec = build_model(name);
    ParamStore p = init_params(spec, InitScheme::UniformFanIn, derive_seed(o.gc_seed, {0x9c}));
    Rng rng(o.gc_seed, {0x9c, 1});
    for (auto& l : p.layers)
      for (double& b : l.bias) b = rng.uniform(-0.1, 0.1);
    Tensor x(spec.input_shape);
    for (double& v : x.data()) v = rng.uniform();
    std::vector<double> target(spec.output_size());
    for (double& v : target) v = rng.uniform();
    const auto r = grad_check(spec, p, x, target, o.gc_samples, o.gc_step, o.gc_seed);
    const bool pass = r.checked >= o.gc_samples && r.max_rel_error < o.gc_tolerance;
    ok = ok && pass;
    std::cout << spec.name << ',' << fmt(r.max_rel_error, 4) << ',' << r.checked << ',' << r.skipped << ','
              << (pass ? "PASS" : "FAIL") << '\n';
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Per-sample activations are a few hundred KB; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  Options o;
  CLI::App app{"Fully point-wise CNN toolkit: color constancy and dehazing"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.add_option("--threads", o.threads, "Worker threads (default: $FPCNET_THREADS or 1)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_option("--sidecar", o.sidecar, "Path of the resolved-config JSON (default: <out>.config.json)");

  std::map<std::string, Command> cmds;
  auto make = [&](const std::string& name, const std::string& desc) -> Command& {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, desc);
    return c;
  };

  {
    auto& c = make("count", "Print weights-only parameter count and multiply-adds of a model");
    c.opt("--model", o.count_model, "fpcnet-dh, fpcnet-cc, fpcnet-cc/<d> or basenet");
    c.flag("--table", o.count_table, "Also print the layer-by-layer shape table");
  }
  {
    auto& c = make("verify-equivalence", "Compare k x k convolution with its collapsed 1x1 kernel");
    c.opt("--k", o.eq_k, "Kernel sizes")->expected(1, 16);
    c.opt("--trials", o.eq_trials, "Paired trials per kernel size");
    c.opt("--image", o.eq_image, "Source PPM (default: a procedural texture)");
    c.opt("--seed", o.eq_seed, "Random seed");
    c.opt("--out", o.eq_out, "CSV output ('-' for stdout)");
  }
  {
    auto& c = make("make-scenes", "Render procedural outdoor scenes as PPM files");
    c.opt("--out", o.ms_out, "Output directory")->required();
    c.opt("--count", o.ms_count, "Number of scenes");
    c.opt("--height", o.ms_height, "Image height")->check(CLI::Range(16, 4096));
    c.opt("--width", o.ms_width, "Image width")->check(CLI::Range(16, 4096));
    c.opt("--seed", o.ms_seed, "Random seed");
    c.flag("--hazy", o.ms_hazy, "Also write hazy renderings with their transmission and airlight");
    c.opt("--beta-lo", o.ms_beta_lo, "Lowest scattering coefficient");
    c.opt("--beta-hi", o.ms_beta_hi, "Highest scattering coefficient");
    c.opt("--a-lo", o.ms_a_lo, "Lowest airlight");
    c.opt("--a-hi", o.ms_a_hi, "Highest airlight");
  }
  {
    auto& c = make("synth-cc", "Apply random color casts to clear images");
    c.opt("--clear", o.scc_clear, "Directory of clear PPM images (or DIR/clear)")->required();
    c.opt("--out", o.scc_out, "Output dataset directory")->required();
    c.opt("--casts-per-image", o.scc_casts, "Casts drawn per clear image");
    c.opt("--cast-lo", o.scc_lo, "Lowest R/G and B/G ratio");
    c.opt("--cast-hi", o.scc_hi, "Highest R/G and B/G ratio");
    c.opt("--test-fraction", o.scc_test, "Fraction of images held out");
    c.opt("--seed", o.scc_seed, "Random seed");
  }
  {
    auto& c = make("train-cc", "Train the color-constancy network");
    c.opt("--data", o.tcc_data, "Dataset directory with casts.csv")->required();
    c.opt("--out", o.tcc_out, "Model JSON to write")->required();
    c.opt("--report", o.tcc_report, "Loss curve CSV (default: <out>.report.csv)");
    c.opt("--width-divisor", o.tcc_divisor, "Divide the 240/80 channel widths by this");
    c.flag("--full", o.tcc_full, "Full width and 200000 iterations");
    c.opt("--iterations", o.tcc_iterations, "SGD iterations");
    c.opt("--batch", o.tcc_batch, "Batch size");
    c.opt("--lr", o.tcc_lr, "Learning rate");
    c.opt("--momentum", o.tcc_momentum, "Momentum");
    c.opt("--lr-decay", o.tcc_decay, "Learning-rate decay factor");
    c.opt("--lr-step", o.tcc_decay_step, "Iterations between decays (0: a quarter of the run)");
    c.opt("--ensembles-per-cast", o.tcc_per_cast, "Pixel-ensembles drawn per (image, cast) pair");
    c.flag("--edge-augment", o.tcc_edge, "Add samples drawn from gradient-magnitude images");
    c.opt("--log-interval", o.tcc_log, "Iterations per loss-curve point");
    c.flag("--quiet", o.tcc_quiet, "No progress output");
    c.opt("--seed", o.tcc_seed, "Random seed");
  }
  {
    auto& c = make("eval-cc", "Angular-error metrics of a model and of gray world");
    c.opt("--data", o.ecc_data, "Dataset directory with casts.csv")->required();
    c.opt("--model", o.ecc_model, "Model JSON")->required();
    c.opt("--split", o.ecc_split, "train, test or all");
    c.opt("--ensembles", o.ecc_ensembles, "Pixel-ensembles per image (median pooled)");
    c.opt("--seed", o.ecc_seed, "Random seed");
    c.opt("--out", o.ecc_out, "Metrics CSV ('-' for stdout)");
    c.opt("--errors", o.ecc_errors, "Optional per-image error CSV");
  }
  {
    auto& c = make("correct", "Estimate the illuminant of one image and remove it");
    c.opt("--in", o.cor_in, "Input PPM")->required();
    c.opt("--model", o.cor_model, "Model JSON")->required();
    c.opt("--out", o.cor_out, "Corrected PPM")->required();
    c.opt("--ensembles", o.cor_ensembles, "Pixel-ensembles (median pooled)");
    c.opt("--seed", o.cor_seed, "Random seed");
  }
  {
    auto& c = make("synth-dh", "Synthesize hazy patches with known transmission");
    c.opt("--clear", o.sdh_clear, "Directory of clear PPM images (or DIR/clear)")->required();
    c.opt("--out", o.sdh_out, "Dataset file")->required();
    c.opt("--patches", o.sdh_patches, "Clear patches sampled");
    c.opt("--levels", o.sdh_levels, "Hazy variants per clear patch");
    c.opt("--patch", o.sdh_patch, "Patch side")->check(CLI::Range(1, 1024));
    c.opt("--t-lo", o.sdh_t_lo, "Lowest transmission");
    c.opt("--t-hi", o.sdh_t_hi, "Highest transmission");
    c.opt("--a-lo", o.sdh_a_lo, "Lowest airlight");
    c.opt("--a-hi", o.sdh_a_hi, "Highest airlight");
    c.opt("--test-fraction", o.sdh_test, "Fraction of source images held out");
    c.flag("--no-shuffle", o.sdh_no_shuffle, "Keep patches spatially intact");
    c.opt("--seed", o.sdh_seed, "Random seed");
  }
  {
    auto& c = make("train-dh", "Train the dehazing network");
    c.opt("--data", o.tdh_data, "Dataset file from synth-dh")->required();
    c.opt("--out", o.tdh_out, "Model JSON to write")->required();
    c.opt("--report", o.tdh_report, "Loss curve CSV (default: <out>.report.csv)");
    c.opt("--iterations", o.tdh_iterations, "SGD iterations");
    c.opt("--batch", o.tdh_batch, "Batch size");
    c.opt("--lr", o.tdh_lr, "Learning rate");
    c.opt("--momentum", o.tdh_momentum, "Momentum");
    c.opt("--lr-decay", o.tdh_decay, "Learning-rate decay factor");
    c.opt("--lr-step", o.tdh_decay_step, "Iterations between decays (0: a quarter of the run)");
    c.opt("--log-interval", o.tdh_log, "Iterations per loss-curve point");
    c.flag("--quiet", o.tdh_quiet, "No progress output");
    c.opt("--seed", o.tdh_seed, "Random seed");
  }
  {
    auto& c = make("eval-dh", "Transmission MSE on held-out patches and PSNR/SSIM on image pairs");
    c.opt("--model", o.edh_model, "Model JSON")->required();
    c.opt("--data", o.edh_data, "Dataset file from synth-dh");
    c.opt("--pairs", o.edh_pairs, "Directory with hazy/ and clear/ PPM pairs");
    c.opt("--patch", o.edh_patch, "Window side for transmission maps");
    c.opt("--stride", o.edh_stride, "Window stride")->check(CLI::PositiveNumber);
    c.opt("--seed", o.edh_seed, "Random seed");
    c.opt("--out", o.edh_out, "Metrics CSV ('-' for stdout)");
  }
  {
    auto& c = make("dehaze", "Remove haze from one image");
    c.opt("--in", o.dh_in, "Hazy PPM")->required();
    c.opt("--model", o.dh_model, "Model JSON");
    c.opt("--out", o.dh_out, "Recovered PPM")->required();
    c.opt("--tmap", o.dh_tmap, "Transmission PGM (default: <out>.t.pgm)");
    c.opt("--method", o.dh_method, "model or dcp");
    c.opt("--patch", o.dh_patch, "Window side");
    c.opt("--stride", o.dh_stride, "Window stride")->check(CLI::PositiveNumber);
    c.opt("--t-min", o.dh_t_min, "Transmission floor");
    c.opt("--seed", o.dh_seed, "Random seed");
  }
  {
    auto& c = make("inspect-cc", "Activation-weighted chroma histogram of a color-constancy model");
    c.opt("--data", o.icc_data, "Dataset directory with casts.csv")->required();
    c.opt("--model", o.icc_model, "Model JSON")->required();
    c.opt("--out", o.icc_out, "Output prefix for CSV and SVG files")->required();
    c.opt("--layer", o.icc_layer, "Pooling layer to probe");
    c.opt("--split", o.icc_split, "train, test or all");
    c.opt("--ensembles", o.icc_ensembles, "Pixel-ensembles per image");
    c.opt("--bins", o.icc_bins, "Bins per axis");
    c.opt("--chroma-max", o.icc_max, "Upper end of the R/G and B/G axes")->check(CLI::PositiveNumber);
    c.opt("--seed", o.icc_seed, "Random seed");
  }
  {
    auto& c = make("inspect-dh", "Activation-weighted min-channel histogram of a dehazing model");
    c.opt("--clear", o.idh_clear, "Directory of clear PPM images (or DIR/clear)")->required();
    c.opt("--model", o.idh_model, "Model JSON")->required();
    c.opt("--out", o.idh_out, "Output prefix for CSV and SVG files")->required();
    c.opt("--layer", o.idh_layer, "Pooling layer to probe");
    c.opt("--ensembles", o.idh_ensembles, "Pixel-ensembles per image");
    c.opt("--bins", o.idh_bins, "Bins");
    c.opt("--seed", o.idh_seed, "Random seed");
  }
  {
    auto& c = make("gradcheck", "Compare analytic and finite-difference gradients");
    c.opt("--model", o.gc_model, "fpcnet-dh, fpcnet-cc, basenet or all");
    c.opt("--samples", o.gc_samples, "Weights checked per model");
    c.opt("--step", o.gc_step, "Central-difference step");
    c.opt("--tolerance", o.gc_tolerance, "Largest accepted relative error");
    c.opt("--seed", o.gc_seed, "Random seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::string name;
  const Command* cmd = nullptr;
  for (const auto& [n, c] : cmds)
    if (c.app->parsed()) {
      name = n;
      cmd = &c;
    }

  // The sidecar sits next to the command's --out when there is one.
  auto out_of = [&]() -> std::string {
    const auto j = cmd->resolved();
    if (j.contains("out") && j["out"].is_string()) {
      const std::string s = j["out"].get<std::string>();
      if (!s.empty() && s != "-") return s;
    }
    return {};
  };

  try {
    if (o.threads < 1) throw usage_error("--threads must be >= 1");
    if (name == "train-cc" && o.tcc_full) {
      if (!cmd->app->get_option("--width-divisor")->count()) o.tcc_divisor = 1;
      if (!cmd->app->get_option("--iterations")->count()) o.tcc_iterations = 200000;
      o.tcc_full = false;  // already applied
    }
    ordered_json sidecar;
    sidecar["command"] = name;
    sidecar["threads"] = o.threads;
    sidecar["options"] = cmd->resolved();
    fs::path sidecar_path = o.sidecar;
    if (sidecar_path.empty()) {
      const std::string out = out_of();
      sidecar_path = out.empty() ? fs::path("fpcnet-" + name + ".config.json") : fs::path(out + ".config.json");
    }
    {
      auto os = open_out(sidecar_path);
      os << sidecar.dump(2) << '\n';
    }

    if (name == "count") return run_count(o);
    if (name == "verify-equivalence") return run_verify_equivalence(o);
    if (name == "make-scenes") return run_make_scenes(o);
    if (name == "synth-cc") return run_synth_cc(o);
    if (name == "train-cc") return run_train_cc(o);
    if (name == "eval-cc") return run_eval_cc(o);
    if (name == "correct") return run_correct(o);
    if (name == "synth-dh") return run_synth_dh(o);
    if (name == "train-dh") return run_train_dh(o);
    if (name == "eval-dh") return run_eval_dh(o);
    if (name == "dehaze") return run_dehaze(o);
    if (name == "inspect-cc") return run_inspect_cc(o);
    if (name == "inspect-dh") return run_inspect_dh(o);
    if (name == "gradcheck") return run_gradcheck(o);
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const dimension_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
