// JSON run configuration shared by the command-line tools: one section per
// component, unknown keys rejected, missing keys defaulted.
#pragma once

#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spreg/bench.hpp"
#include "spreg/energy.hpp"
#include "spreg/errors.hpp"
#include "spreg/registrar.hpp"
#include "spreg/smoothproper.hpp"

namespace spreg {

struct IoConfig {
  int image_depth = 16;  // bit depth of written images (8 or 16)

  void validate() const {
    if (image_depth != 8 && image_depth != 16) throw ValidationError("io.image_depth must be 8 or 16");
  }
};

struct RunConfig {
  PyramidConfig pyramid;
  SPConfig smoothproper;
  LossConfig loss;
  OptimConfig optim;
  IoConfig io;
  BenchConfig bench;

  void validate() const {
    pyramid.validate();
    smoothproper.validate();
    loss.validate();
    optim.validate(pyramid.levels);
    io.validate();
    bench.validate();
  }
};

namespace detail {

using nlohmann::json;

// Reads the listed keys of one section into their targets, rejecting any key
// not in the list.
class SectionReader {
 public:
  SectionReader(const json& root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    section_ = &root.at(name_);
    if (!section_->is_object()) throw ValidationError(name_ + " must be an object");
  }

  template <class T>
  SectionReader& field(const std::string& key, T& target) {
    known_.insert(key);
    if (!section_ || !section_->contains(key)) return *this;
    try {
      target = section_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError(name_ + "." + key + " has the wrong type");
    }
    return *this;
  }

  template <class T, class Parse>
  SectionReader& field(const std::string& key, T& target, Parse parse) {
    std::string text;
    field(key, text);
    if (section_ && section_->contains(key)) target = parse(text);
    return *this;
  }

  void finish() const {
    if (!section_) return;
    for (const auto& item : section_->items()) {
      if (!known_.count(item.key())) throw ValidationError("unknown config key " + name_ + "." + item.key());
    }
  }

 private:
  std::string name_;
  const json* section_ = nullptr;
  std::set<std::string> known_;
};

inline const std::set<std::string>& section_names() {
  static const std::set<std::string> names{"pyramid", "smoothproper", "loss", "optim", "io", "bench"};
  return names;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& item : root.items()) {
    if (!detail::section_names().count(item.key())) throw ValidationError("unknown config section " + item.key());
  }
  RunConfig c;
  detail::SectionReader(root, "pyramid")
      .field("levels", c.pyramid.levels)
      .field("pre_blur_sigma", c.pyramid.pre_blur_sigma)
      .finish();
  detail::SectionReader(root, "smoothproper")
      .field("m", c.smoothproper.m)
      .field("K", c.smoothproper.K)
      .field("alpha_schedule", c.smoothproper.alpha_schedule)
      .field("sigma_v", c.smoothproper.sigma_v)
      .field("beta", c.smoothproper.beta)
      .field("nonneg_q", c.smoothproper.nonneg_q)
      .field("v_solver", c.smoothproper.v_solver, vsolver_from_string)
      .field("basis_scales", c.smoothproper.basis_scales)
      .field("exact_tol", c.smoothproper.exact_tol)
      .field("exact_max_iters", c.smoothproper.exact_max_iters)
      .finish();
  detail::SectionReader(root, "loss")
      .field("lncc_window", c.loss.lncc_window)
      .field("lambda", c.loss.lambda)
      .field("variance_floor", c.loss.variance_floor)
      .finish();
  detail::SectionReader(root, "optim")
      .field("iterations", c.optim.iterations)
      .field("iterations_per_level", c.optim.iterations_per_level)
      .field("step_size", c.optim.step_size)
      .field("beta1", c.optim.beta1)
      .field("beta2", c.optim.beta2)
      .field("epsilon", c.optim.epsilon)
      .field("final_step_fraction", c.optim.final_step_fraction)
      .field("decay_power", c.optim.decay_power)
      .field("seed", c.optim.seed)
      .field("optimize_basis", c.optim.optimize_basis)
      .field("integration_steps", c.optim.integration_steps)
      .finish();
  detail::SectionReader(root, "io").field("image_depth", c.io.image_depth).finish();
  detail::SectionReader(root, "bench")
      .field("pairs", c.bench.pairs)
      .field("size", c.bench.size)
      .field("vessel_count", c.bench.vessel_count)
      .field("vessel_width", c.bench.vessel_width)
      .field("background_level", c.bench.background_level)
      .field("vessel_level", c.bench.vessel_level)
      .field("max_displacement", c.bench.max_displacement)
      .field("smoothness_sigma", c.bench.smoothness_sigma)
      .field("noise_std", c.bench.noise_std)
      .field("landmark_count", c.bench.landmark_count)
      .field("mask_dilation", c.bench.mask_dilation)
      .field("seed", c.bench.seed)
      .finish();
  c.validate();
  return c;
}

/// Full echo of every setting; config_from_json(config_to_json(c)) == c.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["pyramid"] = {{"levels", c.pyramid.levels}, {"pre_blur_sigma", c.pyramid.pre_blur_sigma}};
  j["smoothproper"] = {{"m", c.smoothproper.m},
                       {"K", c.smoothproper.K},
                       {"alpha_schedule", c.smoothproper.schedule().values()},
                       {"sigma_v", c.smoothproper.sigma_v},
                       {"beta", c.smoothproper.beta},
                       {"nonneg_q", c.smoothproper.nonneg_q},
                       {"v_solver", to_string(c.smoothproper.v_solver)},
                       {"basis_scales", c.smoothproper.basis_scales},
                       {"exact_tol", c.smoothproper.exact_tol},
                       {"exact_max_iters", c.smoothproper.exact_max_iters}};
  j["loss"] = {{"lncc_window", c.loss.lncc_window},
               {"lambda", c.loss.lambda},
               {"variance_floor", c.loss.variance_floor}};
  j["optim"] = {{"iterations", c.optim.iterations},
                {"iterations_per_level", c.optim.iterations_per_level},
                {"step_size", c.optim.step_size},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"epsilon", c.optim.epsilon},
                {"final_step_fraction", c.optim.final_step_fraction},
                {"decay_power", c.optim.decay_power},
                {"seed", c.optim.seed},
                {"optimize_basis", c.optim.optimize_basis},
                {"integration_steps", c.optim.integration_steps}};
  j["io"] = {{"image_depth", c.io.image_depth}};
  j["bench"] = {{"pairs", c.bench.pairs},
                {"size", c.bench.size},
                {"vessel_count", c.bench.vessel_count},
                {"vessel_width", c.bench.vessel_width},
                {"background_level", c.bench.background_level},
                {"vessel_level", c.bench.vessel_level},
                {"max_displacement", c.bench.max_displacement},
                {"smoothness_sigma", c.bench.smoothness_sigma},
                {"noise_std", c.bench.noise_std},
                {"landmark_count", c.bench.landmark_count},
                {"mask_dilation", c.bench.mask_dilation},
                {"seed", c.bench.seed}};
  return j;
}

/// Applies "section.key" = value overrides on top of a JSON document. Values
/// are parsed as JSON when possible ("3", "[1,2]", "true") and taken as
/// strings otherwise. "sp" abbreviates "smoothproper".
inline void apply_overrides(nlohmann::json& root, const std::vector<std::pair<std::string, std::string>>& overrides) {
  if (root.is_null()) root = nlohmann::json::object();
  for (const auto& [path, text] : overrides) {
    const auto dot = path.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
      throw ValidationError("override --" + path + " must look like --section.key");
    }
    std::string section = path.substr(0, dot);
    if (section == "sp") section = "smoothproper";
    const std::string key = path.substr(dot + 1);
    if (!detail::section_names().count(section)) throw ValidationError("unknown config section " + section);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    root[section][key] = std::move(value);
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ValidationError(path.string() + " is not valid JSON");
  return j;
}

}  // namespace spreg
