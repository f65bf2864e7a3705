#include "unmask/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace unmask {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v) {
  throw std::runtime_error("config key '" + key + "' has invalid value '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (pos != v.size()) bad_value(key, v);
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (pos != v.size() || v.find('-') != std::string::npos) bad_value(key, v);
  return out;
}

float to_float(const std::string& key, const std::string& v) {
  size_t pos = 0;
  float out = 0;
  try {
    out = std::stof(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (pos != v.size()) bad_value(key, v);
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
  if (pos != v.size()) bad_value(key, v);
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v);
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream in(v);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(to_int(key, trim(part)));
  if (out.empty()) bad_value(key, v);
  return out;
}

void apply_key(RunConfig& c, const std::string& k, const std::string& v) {
  if (k == "image_size") c.net.image_size = to_int(k, v);
  else if (k == "num_classes") c.net.num_classes = to_int(k, v);
  else if (k == "trunk_width") c.net.trunk_width = to_int(k, v);
  else if (k == "gm_head_width") c.net.gm_head_width = to_int(k, v);
  else if (k == "inpaint_width") c.net.inpaint_width = to_int(k, v);
  else if (k == "disc_rf_width") c.net.disc_rf_width = to_int(k, v);
  else if (k == "critic_width") c.net.critic_width = to_int(k, v);
  else if (k == "perceptual_depths") c.net.perceptual_depths = to_int_list(k, v);
  else if (k == "lambda_c") c.train.weights.lambda_c = to_float(k, v);
  else if (k == "lambda_p") c.train.weights.lambda_p = to_float(k, v);
  else if (k == "lambda_sz") c.train.weights.lambda_sz = to_float(k, v);
  else if (k == "lambda_rf") c.train.weights.lambda_rf = to_float(k, v);
  else if (k == "lambda_r") c.train.weights.lambda_r = to_float(k, v);
  else if (k == "lambda_tv") c.train.weights.lambda_tv = to_float(k, v);
  else if (k == "lambda_sty") c.train.weights.lambda_sty = to_float(k, v);
  else if (k == "epochs") c.train.epochs = to_int(k, v);
  else if (k == "warmup_epochs") c.train.warmup_epochs = to_int(k, v);
  else if (k == "batch_size") c.train.batch_size = to_int(k, v);
  else if (k == "lr") c.train.lr = to_float(k, v);
  else if (k == "beta1") c.train.beta1 = to_float(k, v);
  else if (k == "beta2") c.train.beta2 = to_float(k, v);
  else if (k == "alternation_period") c.train.alternation_period = to_int(k, v);
  else if (k == "critic_steps") c.train.critic_steps = to_int(k, v);
  else if (k == "gp_coeff") c.train.gp_coeff = to_float(k, v);
  else if (k == "mask_gen_first") c.train.mask_gen_first = to_bool(k, v);
  else if (k == "occlude_prob") c.train.occlude_prob = to_float(k, v);
  else if (k == "seed") c.train.seed = to_u64(k, v);
  else if (k == "box_area_min") c.train.prior.box_area_min = to_double(k, v);
  else if (k == "box_area_max") c.train.prior.box_area_max = to_double(k, v);
  else if (k == "box_aspect_min") c.train.prior.box_aspect_min = to_double(k, v);
  else if (k == "box_aspect_max") c.train.prior.box_aspect_max = to_double(k, v);
  else if (k == "box_rot_min_deg") c.train.prior.box_rot_min_deg = to_double(k, v);
  else if (k == "box_rot_max_deg") c.train.prior.box_rot_max_deg = to_double(k, v);
  else if (k == "pool_per_class_limit") c.train.prior.pool_per_class_limit = to_int(k, v);
  else if (k == "eval_boundary") c.eval_boundary = to_float(k, v);
  else if (k == "mask_threshold") c.mask_threshold = to_double(k, v);
  else throw std::runtime_error("unknown config key '" + k + "'");
}

template <typename T>
std::string num_str(T v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string int_list_str(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  cfg.raw = text;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               " is not a 'key = value' pair");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               " is missing a key or value");
    if (!seen.insert(key).second)
      throw std::runtime_error("duplicate config key '" + key + "'");
    apply_key(cfg, key, value);
  }
  if (!(cfg.eval_boundary > 0.0f && cfg.eval_boundary < 1.0f))
    throw std::runtime_error("config key 'eval_boundary' must be inside (0, 1)");
  if (!(cfg.mask_threshold > 0.0 && cfg.mask_threshold < 1.0))
    throw std::runtime_error("config key 'mask_threshold' must be inside (0, 1)");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_run_config(os.str());
}

std::string default_run_config() {
  const RunConfig d;
  std::ostringstream os;
  os << "# Networks. image_size and num_classes must match the dataset manifest.\n"
     << "image_size = " << d.net.image_size << "\n"
     << "num_classes = " << d.net.num_classes << "\n"
     << "trunk_width = " << d.net.trunk_width << "\n"
     << "gm_head_width = " << d.net.gm_head_width << "\n"
     << "inpaint_width = " << d.net.inpaint_width << "\n"
     << "disc_rf_width = " << d.net.disc_rf_width << "\n"
     << "critic_width = " << d.net.critic_width << "\n"
     << "perceptual_depths = " << int_list_str(d.net.perceptual_depths) << "\n"
     << "\n"
     << "# Objective weights.\n"
     << "lambda_c = " << num_str(d.train.weights.lambda_c) << "\n"
     << "lambda_p = " << num_str(d.train.weights.lambda_p) << "\n"
     << "lambda_sz = " << num_str(d.train.weights.lambda_sz) << "\n"
     << "lambda_rf = " << num_str(d.train.weights.lambda_rf) << "\n"
     << "lambda_r = " << num_str(d.train.weights.lambda_r) << "\n"
     << "lambda_tv = " << num_str(d.train.weights.lambda_tv) << "\n"
     << "lambda_sty = " << num_str(d.train.weights.lambda_sty) << "\n"
     << "\n"
     << "# Schedule and optimizer.\n"
     << "epochs = " << d.train.epochs << "\n"
     << "warmup_epochs = " << d.train.warmup_epochs << "\n"
     << "batch_size = " << d.train.batch_size << "\n"
     << "lr = " << num_str(d.train.lr) << "\n"
     << "beta1 = " << num_str(d.train.beta1) << "\n"
     << "beta2 = " << num_str(d.train.beta2) << "\n"
     << "alternation_period = " << d.train.alternation_period << "\n"
     << "critic_steps = " << d.train.critic_steps << "\n"
     << "gp_coeff = " << num_str(d.train.gp_coeff) << "\n"
     << "mask_gen_first = " << (d.train.mask_gen_first ? "true" : "false") << "\n"
     << "occlude_prob = " << num_str(d.train.occlude_prob) << "\n"
     << "seed = " << d.train.seed << "\n"
     << "\n"
     << "# Box prior sampling ranges (area and aspect are fractions).\n"
     << "box_area_min = " << num_str(d.train.prior.box_area_min) << "\n"
     << "box_area_max = " << num_str(d.train.prior.box_area_max) << "\n"
     << "box_aspect_min = " << num_str(d.train.prior.box_aspect_min) << "\n"
     << "box_aspect_max = " << num_str(d.train.prior.box_aspect_max) << "\n"
     << "box_rot_min_deg = " << num_str(d.train.prior.box_rot_min_deg) << "\n"
     << "box_rot_max_deg = " << num_str(d.train.prior.box_rot_max_deg) << "\n"
     << "pool_per_class_limit = " << d.train.prior.pool_per_class_limit << "\n"
     << "\n"
     << "# Evaluation: classifier decision boundary and mask binarization.\n"
     << "eval_boundary = " << num_str(d.eval_boundary) << "\n"
     << "mask_threshold = " << num_str(d.mask_threshold) << "\n";
  return os.str();
}

}  // namespace unmask
