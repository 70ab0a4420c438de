#include "mergelab/plan.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mergelab {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

const std::vector<std::string>& known_plan_keys() {
  static const std::vector<std::string> keys = {
      "dataset.kind", "dataset.task_id", "dataset.n_train", "dataset.n_test", "dataset.classes",
      "dataset.input_dim", "dataset.train_path", "dataset.test_path",
      // second synthetic task for task-arithmetic setting (a)
      "dataset.task_id_b",
      "augment.enabled", "augment.flip_prob", "augment.crop_pad", "augment.jitter_sigma",
      "arch.kind", "arch.hidden",
      "train.eta", "train.batch", "train.momentum", "train.weight_decay", "train.epochs",
      "schedule.warmup_steps", "schedule.stable_epochs", "schedule.checkpoint_interval",
      "schedule.decay_epochs",
      "merge.alpha", "merge.stats_policy", "merge.branch_seed_a", "merge.branch_seed_b",
      "merge.coefficients",
      "sweep.kind", "sweep.eta_grid", "sweep.batch_grid", "sweep.wd_grid", "sweep.augment_grid",
      "sweep.seeds",
      "analysis.alpha_points", "analysis.ta_alpha_max", "analysis.ta_alpha_points",
      "analysis.transition_points", "analysis.transition_probe", "analysis.hessian_k",
      "analysis.hessian_tol", "analysis.hessian_max_iters", "analysis.hessian_probe",
      "analysis.hessian_mode", "analysis.collapse_bins", "analysis.bn_eps",
      "slice.resolution", "slice.margin",
      "inputs.checkpoint", "inputs.checkpoint_a", "inputs.checkpoint_b", "inputs.checkpoint_base",
      "run.seed",
  };
  return keys;
}

Plan Plan::parse_text(const std::string& text, const std::string& origin) {
  Plan plan;
  plan.origin_ = origin;
  const auto& known = known_plan_keys();
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                  ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty key");
    if (section.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": key '" + key +
                                  "' outside any [section]");
    const std::string full = section + "." + key;
    if (std::find(known.begin(), known.end(), full) == known.end())
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": unknown key '" +
                                  full + "'");
    if (plan.values_.count(full))
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                                  full + "'");
    plan.values_[full] = value;
  }
  return plan;
}

Plan Plan::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open plan file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

std::string Plan::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Plan::require_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end())
    throw std::invalid_argument(origin_ + ": missing required key '" + key + "'");
  return it->second;
}

double Plan::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(origin_ + ": key '" + key + "' is not a number: '" + it->second + "'");
  }
}

std::int64_t Plan::get_int(const std::string& key, std::int64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(origin_ + ": key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

std::uint64_t Plan::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(origin_ + ": key '" + key + "' is not an unsigned integer: '" +
                                it->second + "'");
  }
}

bool Plan::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument(origin_ + ": key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::string> Plan::get_string_list(const std::string& key,
                                               std::vector<std::string> fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<std::string> out;
  std::istringstream in(it->second);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  if (out.empty())
    throw std::invalid_argument(origin_ + ": key '" + key + "' holds an empty list");
  return out;
}

std::vector<double> Plan::get_double_list(const std::string& key,
                                          std::vector<double> fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  for (const std::string& item : get_string_list(key, {})) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw std::invalid_argument(origin_ + ": key '" + key + "' has non-numeric element '" + item + "'");
    }
  }
  return out;
}

std::vector<std::int64_t> Plan::get_int_list(const std::string& key,
                                             std::vector<std::int64_t> fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<std::int64_t> out;
  for (const std::string& item : get_string_list(key, {})) {
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw std::invalid_argument(origin_ + ": key '" + key + "' has non-integer element '" + item + "'");
    }
  }
  return out;
}

}  // namespace mergelab
