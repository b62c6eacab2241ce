// spreg: synthetic benchmark generation, registration, evaluation and
// gradient self-checks behind one binary.
//
// Every numeric setting can be given in a JSON config (--config) and then
// overridden with --section.key value flags, e.g. --sp.K 0 --optim.step_size 2e-3.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spreg/bench.hpp"
#include "spreg/config.hpp"
#include "spreg/diffeo.hpp"
#include "spreg/errors.hpp"
#include "spreg/gradcheck.hpp"
#include "spreg/io.hpp"
#include "spreg/registrar.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spreg;
using namespace spreg::io;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

std::string pair_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "pair_%02d", i);
  return buf;
}

// Shortest round-trip text for a double.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

int thread_count() {
  const char* env = std::getenv("SPREG_THREADS");
  if (!env || !*env) return 1;
  int n = 0;
  const auto res = std::from_chars(env, env + std::char_traits<char>::length(env), n);
  if (res.ec != std::errc() || *res.ptr != '\0' || n < 1) throw ValidationError("SPREG_THREADS must be a positive integer");
  return n;
}

// Runs job(i) for i in [0, n) on SPREG_THREADS workers; rethrows the first
// failure after all workers stop.
template <class Job>
void parallel_for(int n, Job job) {
  const int workers = std::min(thread_count(), std::max(n, 1));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Collects "--section.key value" and "--section.key=value" pairs left over
// after CLI11 has consumed the named options.
std::vector<std::pair<std::string, std::string>> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
      throw ValidationError("unexpected argument " + arg);
    }
    const auto eq = arg.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(arg.substr(2, eq - 2), arg.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ValidationError("override " + arg + " needs a value");
      out.emplace_back(arg.substr(2), extras[++i]);
    }
  }
  return out;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  json root = path.empty() ? json::object() : read_json_file(path);
  // Bundles echo their config under "config"; accept those directly.
  if (root.is_object() && root.contains("config") && root.size() == 1) root = root["config"];
  apply_overrides(root, collect_overrides(extras));
  return config_from_json(root);
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// synth

json spec_json(const SynthSpec& s) {
  return {{"size", s.size},
          {"vessel_count", s.vessel_count},
          {"vessel_width", s.vessel_width},
          {"deformation", to_string(s.deformation)},
          {"tx", s.tx},
          {"ty", s.ty},
          {"max_magnitude", s.max_magnitude},
          {"smoothness_sigma", s.smoothness_sigma},
          {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

void write_pair(const fs::path& dir, const SynthPair& pair, double mask_dilation) {
  ensure_dir(dir);
  save_image(dir / "fixed.png", pair.fixed, 16);
  save_image(dir / "moving.png", pair.moving, 16);
  save_image(dir / "mask.png", vessel_mask(pair.vessels, pair.fixed.width(), mask_dilation), 8);
  save_flo(dir / "gt.flo", pair.gt_flow);
  save_landmarks(dir / "landmarks.csv", pair.landmarks);
}

int cmd_synth(const RunConfig& cfg, const fs::path& out) {
  ensure_dir(out);
  const auto specs = cfg.bench.specs();
  parallel_for(static_cast<int>(specs.size()), [&](int i) {
    write_pair(out / pair_name(i), synth_pair(specs[static_cast<std::size_t>(i)]), cfg.bench.mask_dilation);
  });
  json manifest;
  manifest["config"] = config_to_json(cfg);
  manifest["pairs"] = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    json entry = spec_json(specs[i]);
    entry["name"] = pair_name(static_cast<int>(i));
    manifest["pairs"].push_back(entry);
  }
  write_json(out / "manifest.json", manifest);
  std::cout << "wrote " << specs.size() << " pairs to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// register

double mean_norm(const VectorField2D& u) {
  double s = 0.0;
  for (std::size_t px = 0; px < u.pixels(); ++px) s += std::hypot(u[2 * px], u[2 * px + 1]);
  return s / static_cast<double>(u.pixels());
}

void write_bundle(const fs::path& out, const RunConfig& cfg, const Image2D& moving, const RegistrationResult& r,
                  const std::string& fixed_path, const std::string& moving_path) {
  ensure_dir(out);
  save_flo(out / "u.flo", r.u);
  save_flo(out / "phi.flo", r.phi);
  save_image(out / "warped.png", warp(moving, r.phi), cfg.io.image_depth);

  std::string trace = "iteration,level,loss,lncc,reg\n";
  for (const auto& t : r.trace) {
    trace += std::to_string(t.iteration) + "," + std::to_string(t.level) + "," + fmt(t.loss) + "," + fmt(t.lncc) +
             "," + fmt(t.reg) + "\n";
  }
  write_text(out / "trace.csv", trace);

  json levels = json::array();
  for (const auto& l : r.levels) {
    levels.push_back({{"level", l.level},
                      {"width", l.width},
                      {"height", l.height},
                      {"lncc_window", l.lncc_window},
                      {"final_loss", l.final_loss},
                      {"final_lncc", l.final_lncc},
                      {"final_reg", l.final_reg},
                      {"sp_energy", l.sp_energy}});
  }
  json diag;
  diag["fixed"] = fixed_path;
  diag["moving"] = moving_path;
  diag["sp_disabled"] = r.sp_disabled;
  diag["min_jacobian_det"] = r.jacobian.min_det;
  diag["percent_nonpositive_jacobian"] = r.jacobian.percent_nonpositive;
  diag["mean_u_norm"] = mean_norm(r.u);
  diag["final_loss"] = r.trace.empty() ? 0.0 : r.trace.back().loss;
  diag["levels"] = levels;
  diag["config"] = config_to_json(cfg);
  diag["wall_time"] = {{"finished_utc", utc_timestamp()}, {"seconds", r.runtime_seconds}};
  write_json(out / "diagnostics.json", diag);
  write_json(out / "config.json", config_to_json(cfg));
}

RegistrationResult run_registration(const RunConfig& cfg, const Image2D& fixed, const Image2D& moving) {
  return register_images(fixed, moving, cfg.pyramid, cfg.smoothproper, cfg.loss, cfg.optim);
}

int cmd_register_pair(const RunConfig& cfg, const std::string& fixed_path, const std::string& moving_path,
                      const fs::path& out) {
  const Image2D fixed = load_image(fixed_path);
  const Image2D moving = load_image(moving_path);
  if (!fixed.same_shape(moving)) {
    throw ValidationError("fixed and moving images differ in size (" + std::to_string(fixed.width()) + "x" +
                          std::to_string(fixed.height()) + " vs " + std::to_string(moving.width()) + "x" +
                          std::to_string(moving.height()) + ")");
  }
  const RegistrationResult r = run_registration(cfg, fixed, moving);
  write_bundle(out, cfg, moving, r, fixed_path, moving_path);
  std::cout << "registered in " << fmt(std::round(r.runtime_seconds * 10) / 10) << " s, min |J| "
            << fmt(r.jacobian.min_det) << ", mean |u| " << fmt(mean_norm(r.u)) << "\n";
  return 0;
}

json read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IoError("missing " + path.string());
  json m = read_json_file(path);
  if (!m.contains("pairs") || !m["pairs"].is_array()) throw IoError(path.string() + ": no pair list");
  return m;
}

std::vector<std::string> manifest_names(const json& manifest) {
  std::vector<std::string> names;
  for (const auto& p : manifest["pairs"]) names.push_back(p.at("name").get<std::string>());
  return names;
}

int cmd_register_bench(const RunConfig& cfg, const fs::path& gt_dir, const fs::path& out, int only_pair) {
  const json gt_manifest = read_manifest(gt_dir);
  std::vector<std::string> names = manifest_names(gt_manifest);
  if (only_pair >= 0) {
    if (only_pair >= static_cast<int>(names.size())) throw ValidationError("--pair out of range");
    names = {names[static_cast<std::size_t>(only_pair)]};
  }
  ensure_dir(out);
  parallel_for(static_cast<int>(names.size()), [&](int i) {
    const std::string& name = names[static_cast<std::size_t>(i)];
    const fs::path fixed_path = gt_dir / name / "fixed.png";
    const fs::path moving_path = gt_dir / name / "moving.png";
    const Image2D fixed = load_image(fixed_path);
    const Image2D moving = load_image(moving_path);
    const RegistrationResult r = run_registration(cfg, fixed, moving);
    write_bundle(out / name, cfg, moving, r, fixed_path.string(), moving_path.string());
    std::cerr << name << ": " << fmt(std::round(r.runtime_seconds * 10) / 10) << " s\n";
  });
  json manifest;
  manifest["pairs"] = json::array();
  for (const auto& n : names) manifest["pairs"].push_back({{"name", n}});
  manifest["config"] = config_to_json(cfg);
  write_json(out / "manifest.json", manifest);
  std::cout << "registered " << names.size() << " pairs into " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct PairMetrics {
  std::string name;
  double tre_mean = 0.0;
  double epe = 0.0;
  double min_det = 0.0;
};

PairMetrics evaluate_pair(const std::string& name, const fs::path& result, const fs::path& gt) {
  const VectorField2D phi = load_flo(result / "phi.flo");
  const VectorField2D gt_flow = load_flo(gt / "gt.flo");
  if (!phi.same_shape(gt_flow)) throw ValidationError(name + ": result and ground-truth flow sizes differ");
  const LandmarkSet lms = load_landmarks(gt / "landmarks.csv");
  std::optional<Image2D> mask;
  if (fs::exists(gt / "mask.png")) mask = load_image(gt / "mask.png");
  PairMetrics m;
  m.name = name;
  m.tre_mean = tre(lms, phi).mean;
  m.epe = endpoint_error(phi, gt_flow, mask ? &*mask : nullptr);
  m.min_det = summarize_jacobian(jacobian_det(phi)).min_det;
  return m;
}

int cmd_eval(const fs::path& result_dir, const fs::path& gt_dir) {
  std::vector<PairMetrics> pairs;
  if (fs::exists(result_dir / "manifest.json")) {
    const auto res_names = manifest_names(read_manifest(result_dir));
    const auto gt_names = manifest_names(read_manifest(gt_dir));
    for (const auto& n : res_names) {
      if (std::find(gt_names.begin(), gt_names.end(), n) == gt_names.end()) {
        throw ValidationError("manifests do not match: " + n + " has no ground truth");
      }
    }
    pairs.resize(res_names.size());
    parallel_for(static_cast<int>(res_names.size()), [&](int i) {
      const auto& n = res_names[static_cast<std::size_t>(i)];
      pairs[static_cast<std::size_t>(i)] = evaluate_pair(n, result_dir / n, gt_dir / n);
    });
  } else {
    pairs.push_back(evaluate_pair(result_dir.filename().string(), result_dir, gt_dir));
  }

  std::vector<double> tres;
  double epe = 0.0, min_det = std::numeric_limits<double>::infinity();
  for (const auto& p : pairs) {
    tres.push_back(p.tre_mean);
    epe += p.epe;
    min_det = std::min(min_det, p.min_det);
  }
  double tre_mean = 0.0;
  for (double t : tres) tre_mean += t;
  tre_mean /= static_cast<double>(tres.size());
  epe /= static_cast<double>(pairs.size());

  json metrics;
  metrics["tre_mean"] = tre_mean;
  metrics["auc15"] = auc_at(tres, 15);
  metrics["auc25"] = auc_at(tres, 25);
  metrics["auc50"] = auc_at(tres, 50);
  metrics["epe"] = epe;
  metrics["min_jacobian_det"] = min_det;
  metrics["pairs"] = json::array();
  for (const auto& p : pairs) {
    metrics["pairs"].push_back({{"name", p.name}, {"tre_mean", p.tre_mean}, {"epe", p.epe}, {"min_jacobian_det", p.min_det}});
  }
  write_json(result_dir / "metrics.json", metrics);

  std::ostringstream table;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %10s %10s %10s\n", "pair", "TRE", "EPE", "min|J|");
  table << line;
  for (const auto& p : pairs) {
    std::snprintf(line, sizeof(line), "%-10s %10.3f %10.3f %10.3f\n", p.name.c_str(), p.tre_mean, p.epe, p.min_det);
    table << line;
  }
  std::snprintf(line, sizeof(line), "%-10s %10.3f %10.3f %10.3f\n", "mean", tre_mean, epe, min_det);
  table << line;
  std::snprintf(line, sizeof(line), "AUC@15 %.4f  AUC@25 %.4f  AUC@50 %.4f\n", metrics["auc15"].get<double>(),
                metrics["auc25"].get<double>(), metrics["auc50"].get<double>());
  table << line;
  std::cout << table.str();
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::string& primitive, bool corrupt, int size) {
  constexpr double kThreshold = 1e-4;
  GradCheckOptions opt;
  opt.size = size;
  if (corrupt) opt.adjoint_scale = 1.5;
  const auto rows = run_gradcheck(opt, primitive);
  bool ok = true;
  std::printf("%-14s %12s %12s\n", "primitive", "dot_rel", "fd_rel");
  for (const auto& r : rows) {
    const bool row_ok = r.dot_error <= kThreshold && r.fd_error <= kThreshold;
    ok = ok && row_ok;
    std::printf("%-14s %12.3e %12.3e %s\n", r.name.c_str(), r.dot_error, r.fd_error, row_ok ? "ok" : "FAIL");
  }
  if (!ok) {
    std::fprintf(stderr, "gradcheck: relative error above %.0e\n", kThreshold);
    return kExitNumeric;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spreg: deformable registration with an unrolled smoothing layer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;

  auto* synth = app.add_subcommand("synth", "generate the synthetic vessel benchmark");
  synth->add_option("--config", config_path, "JSON run config");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->allow_extras();

  std::string fixed_path, moving_path, bench_dir;
  int only_pair = -1;
  auto* reg = app.add_subcommand("register", "register a moving image onto a fixed image");
  reg->add_option("fixed", fixed_path, "fixed image (.png/.pgm)");
  reg->add_option("moving", moving_path, "moving image (.png/.pgm)");
  reg->add_option("--bench", bench_dir, "register every pair of a synth directory instead");
  reg->add_option("--pair", only_pair, "with --bench, only this pair index");
  reg->add_option("--config", config_path, "JSON run config");
  reg->add_option("--out", out_dir, "output directory")->required();
  reg->allow_extras();

  std::string result_dir, gt_dir;
  auto* eval = app.add_subcommand("eval", "score registration results against ground truth");
  eval->add_option("result", result_dir, "bundle or benchmark result directory")->required();
  eval->add_option("gt", gt_dir, "pair or benchmark ground-truth directory")->required();

  std::string primitive;
  bool corrupt = false;
  int gc_size = 8;
  auto* gc = app.add_subcommand("gradcheck", "adjoint and finite-difference checks of every primitive");
  gc->add_option("--primitive", primitive, "only this row (" + [] {
    std::string s;
    for (const auto& n : gradcheck_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
  }() + ")");
  gc->add_option("--size", gc_size, "grid side of the test instances")->check(CLI::Range(4, 64));
  gc->add_flag("--corrupt-adjoint", corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth) return cmd_synth(load_config(config_path, synth->remaining()), out_dir);
    if (*reg) {
      const RunConfig cfg = load_config(config_path, reg->remaining());
      if (!bench_dir.empty()) {
        if (!fixed_path.empty()) throw ValidationError("register: give either images or --bench, not both");
        return cmd_register_bench(cfg, bench_dir, out_dir, only_pair);
      }
      if (fixed_path.empty() || moving_path.empty()) throw ValidationError("register: fixed and moving images required");
      return cmd_register_pair(cfg, fixed_path, moving_path, out_dir);
    }
    if (*eval) return cmd_eval(result_dir, gt_dir);
    if (*gc) return cmd_gradcheck(primitive, corrupt, gc_size);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return 0;
}
