#include "pointcaps/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "pointcaps/errors.hpp"

namespace pointcaps {

namespace {

constexpr const char* kHeader = "POINTCAPS-CKPT v1";

std::string fmt_real(real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelState& state) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << kHeader << '\n';
  for (auto& [name, t] : state.named_tensors()) {
    f << name << ' ' << t.rank();
    for (int64_t d : t.shape()) f << ' ' << d;
    f << '\n';
    const auto& v = t.values();
    for (size_t i = 0; i < v.size(); ++i) {
      f << fmt_real(v[i]) << (i % 8 == 7 || i + 1 == v.size() ? '\n' : ' ');
    }
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

void load_checkpoint(const std::string& path, ModelState& state) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string header;
  std::getline(f, header);
  while (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != kHeader) {
    throw VersionError("'" + path + "' is not a " + std::string(kHeader) + " file");
  }

  std::map<std::string, Tensor> want;
  for (auto& [name, t] : state.named_tensors()) want.emplace(name, t);
  std::map<std::string, bool> filled;

  std::string name;
  while (f >> name) {
    int64_t rank = -1;
    if (!(f >> rank) || rank < 0) throw ParseError(path + ": bad rank for tensor '" + name + "'");
    Shape shape(static_cast<size_t>(rank));
    for (int64_t& d : shape) {
      if (!(f >> d)) throw ParseError(path + ": bad shape for tensor '" + name + "'");
    }
    auto it = want.find(name);
    if (it == want.end()) {
      throw VersionError(path + ": tensor '" + name + "' does not exist in this config");
    }
    if (filled[name]) throw VersionError(path + ": tensor '" + name + "' appears twice");
    if (it->second.shape() != shape) {
      throw VersionError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                         ", config expects " + shape_str(it->second.shape()));
    }
    auto& dst = it->second.values_mut();
    for (real& v : dst) {
      if (!(f >> v)) throw ParseError(path + ": truncated values for tensor '" + name + "'");
    }
    filled[name] = true;
  }
  for (const auto& [n, t] : want) {
    if (!filled[n]) throw VersionError(path + ": missing tensor '" + n + "'");
  }
}

// ---- config text -------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> config_kv(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto add_i = [&kv](const char* k, int64_t v) { kv.emplace_back(k, std::to_string(v)); };
  auto add_b = [&kv](const char* k, bool v) { kv.emplace_back(k, v ? "true" : "false"); };
  auto add_r = [&kv](const char* k, real v) { kv.emplace_back(k, fmt_real(v)); };
  add_i("num_points", c.num_points);
  add_i("num_classes", c.num_classes);
  add_b("use_normals", c.use_normals);
  add_i("conv1_width", c.conv1_width);
  add_i("conv2_width", c.conv2_width);
  add_i("conv3_width", c.conv3_width);
  add_i("capa_count", c.capa_count);
  add_i("capa_dim", c.capa_dim);
  add_i("capc_count", c.capc_count);
  add_i("capc_dim", c.capc_dim);
  add_i("capb_count", c.capb_count);
  add_i("capb_dim", c.capb_dim);
  add_i("digit_dim", c.digit_dim);
  add_i("dense_width", c.dense_width);
  add_i("deconv1_channels", c.deconv1_channels);
  add_i("deconv3_channels", c.deconv3_channels);
  add_i("deconv4_channels", c.deconv4_channels);
  kv.emplace_back("routing_policy", routing_policy_name(c.routing_policy));
  add_i("capa1_iterations", c.capa1_iterations);
  add_i("capa2_iterations", c.capa2_iterations);
  add_i("side_iterations", c.side_iterations);
  add_i("capb_iterations", c.capb_iterations);
  add_i("digit_iterations", c.digit_iterations);
  add_b("unroll_routing_grad", c.unroll_routing_grad);
  add_b("cosine_agreement", c.cosine_agreement);
  add_b("skip_connection", c.skip_connection);
  add_b("conv_bias", c.conv_bias);
  add_r("margin_m_plus", c.margin_m_plus);
  add_r("margin_m_minus", c.margin_m_minus);
  add_r("margin_lambda", c.margin_lambda);
  add_r("chamfer_gamma", c.chamfer_gamma);
  add_r("bn_momentum", c.bn_momentum);
  return kv;
}

namespace {

int64_t parse_i(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const int64_t r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

bool parse_b(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

real parse_r(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const real r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

void apply_key(ModelConfig& c, const std::string& k, const std::string& v) {
  if (k == "num_points") c.num_points = parse_i(k, v);
  else if (k == "num_classes") c.num_classes = parse_i(k, v);
  else if (k == "use_normals") c.use_normals = parse_b(k, v);
  else if (k == "conv1_width") c.conv1_width = parse_i(k, v);
  else if (k == "conv2_width") c.conv2_width = parse_i(k, v);
  else if (k == "conv3_width") c.conv3_width = parse_i(k, v);
  else if (k == "capa_count") c.capa_count = parse_i(k, v);
  else if (k == "capa_dim") c.capa_dim = parse_i(k, v);
  else if (k == "capc_count") c.capc_count = parse_i(k, v);
  else if (k == "capc_dim") c.capc_dim = parse_i(k, v);
  else if (k == "capb_count") c.capb_count = parse_i(k, v);
  else if (k == "capb_dim") c.capb_dim = parse_i(k, v);
  else if (k == "digit_dim") c.digit_dim = parse_i(k, v);
  else if (k == "dense_width") c.dense_width = parse_i(k, v);
  else if (k == "deconv1_channels") c.deconv1_channels = parse_i(k, v);
  else if (k == "deconv3_channels") c.deconv3_channels = parse_i(k, v);
  else if (k == "deconv4_channels") c.deconv4_channels = parse_i(k, v);
  else if (k == "routing_policy") c.routing_policy = routing_policy_from(v);
  else if (k == "capa1_iterations") c.capa1_iterations = static_cast<int>(parse_i(k, v));
  else if (k == "capa2_iterations") c.capa2_iterations = static_cast<int>(parse_i(k, v));
  else if (k == "side_iterations") c.side_iterations = static_cast<int>(parse_i(k, v));
  else if (k == "capb_iterations") c.capb_iterations = static_cast<int>(parse_i(k, v));
  else if (k == "digit_iterations") c.digit_iterations = static_cast<int>(parse_i(k, v));
  else if (k == "unroll_routing_grad") c.unroll_routing_grad = parse_b(k, v);
  else if (k == "cosine_agreement") c.cosine_agreement = parse_b(k, v);
  else if (k == "skip_connection") c.skip_connection = parse_b(k, v);
  else if (k == "conv_bias") c.conv_bias = parse_b(k, v);
  else if (k == "margin_m_plus") c.margin_m_plus = parse_r(k, v);
  else if (k == "margin_m_minus") c.margin_m_minus = parse_r(k, v);
  else if (k == "margin_lambda") c.margin_lambda = parse_r(k, v);
  else if (k == "chamfer_gamma") c.chamfer_gamma = parse_r(k, v);
  else if (k == "bn_momentum") c.bn_momentum = parse_r(k, v);
  else throw ConfigError("unknown config key '" + k + "'");
}

std::string trimmed(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void save_config(const std::string& path, const ModelConfig& config) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& [k, v] : config_kv(config)) f << k << " = " << v << '\n';
  if (!f) throw IoError("write to '" + path + "' failed");
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  ModelConfig c;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trimmed(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    apply_key(c, trimmed(line.substr(0, eq)), trimmed(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

}  // namespace pointcaps
