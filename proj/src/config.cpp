#include "moerl/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "moerl/error.hpp"

extern char** environ;

namespace moerl {

using nlohmann::json;

namespace {

constexpr std::string_view kEnvPrefix = "MOERL_";

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// "dqn.steps": 5 becomes {"dqn": {"steps": 5}}.
json expand_dotted(const json& in) {
  if (!in.is_object()) return in;
  json out = json::object();
  for (const auto& [key, value] : in.items()) {
    json* node = &out;
    std::string rest = key;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      node = &(*node)[rest.substr(0, dot)];
      if (!node->is_null() && !node->is_object()) throw ConfigError("config key `" + key + "` conflicts with a value");
      rest = rest.substr(dot + 1);
    }
    json& slot = (*node)[rest];
    json expanded = expand_dotted(value);
    if (slot.is_object() && expanded.is_object()) {
      slot.merge_patch(expanded);
    } else {
      slot = std::move(expanded);
    }
  }
  return out;
}

void check_keys(const json& overrides, const json& schema, const std::string& path) {
  if (!overrides.is_object()) throw ConfigError("config key `" + (path.empty() ? "<root>" : path) + "` must be an object");
  for (const auto& [key, value] : overrides.items()) {
    const auto full = join(path, key);
    if (!schema.contains(key)) throw ConfigError("unknown config key `" + full + "`");
    if (value.is_null()) throw ConfigError("config key `" + full + "` must not be null");
    if (schema.at(key).is_object()) check_keys(value, schema.at(key), full);
  }
}

class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const std::string& path) const {
    const json* node = &root_;
    std::string rest = path;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      node = &node->at(rest.substr(0, dot));
      rest = rest.substr(dot + 1);
    }
    return node->at(rest);
  }

  double real(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number()) throw ConfigError("config key `" + path + "` must be a number");
    return v.get<double>();
  }

  long integer(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number_integer()) throw ConfigError("config key `" + path + "` must be an integer");
    return v.get<long>();
  }

  int small(const std::string& path) const {
    const long v = integer(path);
    if (v < -(1L << 30) || v > (1L << 30)) throw ConfigError("config key `" + path + "` is out of range");
    return static_cast<int>(v);
  }

  std::uint64_t seed(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long>() >= 0)) {
      throw ConfigError("config key `" + path + "` must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_boolean()) throw ConfigError("config key `" + path + "` must be true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_string()) throw ConfigError("config key `" + path + "` must be a string");
    return v.get<std::string>();
  }

  std::vector<int> ints(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_array()) throw ConfigError("config key `" + path + "` must be an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError("config key `" + path + "` must be an array of integers");
      out.push_back(e.get<int>());
    }
    return out;
  }

 private:
  const json& root_;
};

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError("config key `" + path + "` " + what);
}

}  // namespace

std::string_view to_string(Scale scale) { return scale == Scale::desk ? "desk" : "paper"; }

Scale scale_from_string(std::string_view name) {
  if (name == "desk") return Scale::desk;
  if (name == "paper") return Scale::paper;
  throw ConfigError("config key `scale` must be desk or paper, got '" + std::string(name) + "'");
}

PipelineConfig preset(Scale scale) {
  PipelineConfig c;
  c.scale = scale;
  c.encoder.training = {128, 50, 0, 1e-3, 0.99, 0.0, 0};
  c.reward.training = {128, 50, 0, 1e-3, 0.99, 0.0, 0};
  c.dqn.training.batch_size = 30;
  c.dqn.training.learning_rate = 1e-4;
  c.gate.minibatch = 256;
  c.gate.learning_rate = 1e-4;
  c.gate.epochs = 50;
  if (scale == Scale::desk) {
    c.out = "runs/desk";
    c.patients = 2000;
    c.dqn.training.steps = 20000;
    c.gate.restarts = 100;
    c.bootstrap = 200;
  } else {
    c.out = "runs/paper";
    c.patients = 20000;
    c.dqn.training.steps = 200000;
    c.gate.restarts = 1000;
    c.bootstrap = 1000;
  }
  return c;
}

json to_json(const PipelineConfig& c) {
  const auto& r = c.dqn.replay;
  return {
      {"scale", std::string(to_string(c.scale))},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"cohort_csv", c.cohort_csv.string()},
      {"patients", c.patients},
      {"train_ratio", c.train_ratio},
      {"discount", c.discount},
      {"encoder",
       {{"epochs", c.encoder.training.epochs},
        {"batch_size", c.encoder.training.batch_size},
        {"learning_rate", c.encoder.training.learning_rate},
        {"hidden", c.encoder.hidden},
        {"sparsity_target", c.encoder.sparsity_target},
        {"sparsity_weight", c.encoder.sparsity_weight}}},
      {"reward",
       {{"epochs", c.reward.training.epochs},
        {"batch_size", c.reward.training.batch_size},
        {"learning_rate", c.reward.training.learning_rate},
        {"input_gradient_weight", c.reward.input_gradient_weight}}},
      {"dqn",
       {{"steps", c.dqn.training.steps},
        {"batch_size", c.dqn.training.batch_size},
        {"learning_rate", c.dqn.training.learning_rate},
        {"penalty", c.dqn.training.regularization},
        {"reward_bound", c.dqn.reward_bound},
        {"target_sync", c.dqn.target_sync},
        {"trunk_hidden", c.dqn.trunk_hidden},
        {"head_hidden", c.dqn.head_hidden},
        {"temperature", c.dqn.temperature},
        {"replay",
         {{"alpha", r.alpha}, {"beta_start", r.beta_start}, {"beta_end", r.beta_end}, {"priority_floor", r.priority_floor}}}}},
      {"kernel",
       {{"k", c.kernel_k},
        {"behavior_k", c.behavior_k},
        {"cross_validate", c.cross_validate_k},
        {"k_candidates", c.k_candidates}}},
      {"gate",
       {{"minibatch", c.gate.minibatch},
        {"restarts", c.gate.restarts},
        {"learning_rate", c.gate.learning_rate},
        {"epochs", c.gate.epochs}}},
      {"evaluation",
       {{"bootstrap", c.bootstrap},
        {"agreement", c.agreement == AgreementMetric::argmax ? "argmax" : "total_variation"}}},
  };
}

PipelineConfig config_from_json(const json& raw, std::optional<Scale> base) {
  const json overrides = expand_dotted(raw.is_null() ? json::object() : raw);
  if (!overrides.is_object()) throw ConfigError("config must be a JSON object");
  Scale scale = base.value_or(Scale::desk);
  if (overrides.contains("scale")) {
    if (!overrides.at("scale").is_string()) throw ConfigError("config key `scale` must be desk or paper");
    scale = scale_from_string(overrides.at("scale").get<std::string>());
  }
  json merged = to_json(preset(scale));
  check_keys(overrides, merged, "");
  merged.merge_patch(overrides);

  const Reader in(merged);
  PipelineConfig c = preset(scale);
  c.seed = in.seed("seed");
  c.out = in.text("out");
  c.cohort_csv = in.text("cohort_csv");
  c.patients = in.small("patients");
  c.train_ratio = in.real("train_ratio");
  c.discount = in.real("discount");

  c.encoder.training.epochs = in.small("encoder.epochs");
  c.encoder.training.batch_size = in.small("encoder.batch_size");
  c.encoder.training.learning_rate = in.real("encoder.learning_rate");
  c.encoder.hidden = in.small("encoder.hidden");
  c.encoder.sparsity_target = in.real("encoder.sparsity_target");
  c.encoder.sparsity_weight = in.real("encoder.sparsity_weight");

  c.reward.training.epochs = in.small("reward.epochs");
  c.reward.training.batch_size = in.small("reward.batch_size");
  c.reward.training.learning_rate = in.real("reward.learning_rate");
  c.reward.input_gradient_weight = in.real("reward.input_gradient_weight");

  c.dqn.training.steps = in.integer("dqn.steps");
  c.dqn.training.batch_size = in.small("dqn.batch_size");
  c.dqn.training.learning_rate = in.real("dqn.learning_rate");
  c.dqn.training.regularization = in.real("dqn.penalty");
  c.dqn.reward_bound = in.real("dqn.reward_bound");
  c.dqn.target_sync = in.small("dqn.target_sync");
  c.dqn.trunk_hidden = in.small("dqn.trunk_hidden");
  c.dqn.head_hidden = in.small("dqn.head_hidden");
  c.dqn.temperature = in.real("dqn.temperature");
  c.dqn.replay.alpha = in.real("dqn.replay.alpha");
  c.dqn.replay.beta_start = in.real("dqn.replay.beta_start");
  c.dqn.replay.beta_end = in.real("dqn.replay.beta_end");
  c.dqn.replay.priority_floor = in.real("dqn.replay.priority_floor");

  c.kernel_k = in.small("kernel.k");
  c.behavior_k = in.small("kernel.behavior_k");
  c.cross_validate_k = in.boolean("kernel.cross_validate");
  c.k_candidates = in.ints("kernel.k_candidates");

  c.gate.minibatch = in.small("gate.minibatch");
  c.gate.restarts = in.small("gate.restarts");
  c.gate.learning_rate = in.real("gate.learning_rate");
  c.gate.epochs = in.small("gate.epochs");

  c.bootstrap = in.small("evaluation.bootstrap");
  const auto metric = in.text("evaluation.agreement");
  if (metric == "argmax") {
    c.agreement = AgreementMetric::argmax;
  } else if (metric == "total_variation") {
    c.agreement = AgreementMetric::total_variation;
  } else {
    throw ConfigError("config key `evaluation.agreement` must be argmax or total_variation");
  }
  return c;
}

void PipelineConfig::validate() const {
  require(!out.empty(), "out", "must not be empty");
  require(cohort_csv.empty() || std::filesystem::is_regular_file(cohort_csv), "cohort_csv",
          "names a file that does not exist: " + cohort_csv.string());
  require(patients >= 4, "patients", "must be >= 4");
  require(train_ratio > 0.0 && train_ratio < 1.0, "train_ratio", "must lie in (0,1)");
  require(discount > 0.0 && discount <= 1.0, "discount", "must lie in (0,1], got " + std::to_string(discount));

  require(encoder.training.epochs >= 1, "encoder.epochs", "must be >= 1");
  require(encoder.training.batch_size >= 1, "encoder.batch_size", "must be >= 1");
  require(encoder.training.learning_rate > 0.0 && std::isfinite(encoder.training.learning_rate),
          "encoder.learning_rate", "must be > 0");
  require(encoder.hidden >= 1, "encoder.hidden", "must be >= 1");
  require(encoder.sparsity_target > 0.0 && encoder.sparsity_target < 1.0, "encoder.sparsity_target",
          "must lie in (0,1)");
  require(encoder.sparsity_weight >= 0.0, "encoder.sparsity_weight", "must be >= 0");

  require(reward.training.epochs >= 1, "reward.epochs", "must be >= 1");
  require(reward.training.batch_size >= 2, "reward.batch_size", "must be >= 2");
  require(reward.training.learning_rate > 0.0 && std::isfinite(reward.training.learning_rate),
          "reward.learning_rate", "must be > 0");
  require(reward.input_gradient_weight >= 0.0, "reward.input_gradient_weight", "must be >= 0");

  require(dqn.training.steps >= 1, "dqn.steps", "must be >= 1");
  require(dqn.training.batch_size >= 1, "dqn.batch_size", "must be >= 1");
  require(dqn.training.learning_rate > 0.0 && std::isfinite(dqn.training.learning_rate), "dqn.learning_rate",
          "must be > 0");
  require(dqn.training.regularization >= 0.0, "dqn.penalty", "must be >= 0");
  require(dqn.reward_bound >= 0.0, "dqn.reward_bound", "must be >= 0");
  require(dqn.target_sync >= 1, "dqn.target_sync", "must be >= 1");
  require(dqn.trunk_hidden >= 1, "dqn.trunk_hidden", "must be >= 1");
  require(dqn.head_hidden >= 1, "dqn.head_hidden", "must be >= 1");
  require(dqn.temperature > 0.0, "dqn.temperature", "must be > 0");
  require(dqn.replay.alpha >= 0.0, "dqn.replay.alpha", "must be >= 0");
  require(dqn.replay.beta_start >= 0.0 && dqn.replay.beta_start <= 1.0, "dqn.replay.beta_start", "must lie in [0,1]");
  require(dqn.replay.beta_end >= 0.0 && dqn.replay.beta_end <= 1.0, "dqn.replay.beta_end", "must lie in [0,1]");
  require(dqn.replay.priority_floor > 0.0, "dqn.replay.priority_floor", "must be > 0");

  require(kernel_k >= 1, "kernel.k", "must be >= 1");
  require(behavior_k >= 1, "kernel.behavior_k", "must be >= 1");
  require(!cross_validate_k || !k_candidates.empty(), "kernel.k_candidates", "must not be empty");
  for (int k : k_candidates) require(k >= 1, "kernel.k_candidates", "entries must be >= 1");

  require(gate.minibatch >= 1, "gate.minibatch", "must be >= 1");
  require(gate.restarts >= 2, "gate.restarts", "must be >= 2 (the two corner starts)");
  require(gate.learning_rate > 0.0 && std::isfinite(gate.learning_rate), "gate.learning_rate", "must be > 0");
  require(gate.epochs >= 0, "gate.epochs", "must be >= 0");

  require(bootstrap >= 1, "evaluation.bootstrap", "must be >= 1");
}

json env_overrides(const std::map<std::string, std::string>& environment) {
  json out = json::object();
  for (const auto& [name, value] : environment) {
    if (name.rfind(kEnvPrefix, 0) != 0 || name.size() == kEnvPrefix.size()) continue;
    std::string key;
    for (std::size_t i = kEnvPrefix.size(); i < name.size(); ++i) {
      if (name[i] == '_' && i + 1 < name.size() && name[i + 1] == '_') {
        key += '.';
        ++i;
      } else {
        key += static_cast<char>(std::tolower(static_cast<unsigned char>(name[i])));
      }
    }
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    out[key] = std::move(parsed);
  }
  return out;
}

std::map<std::string, std::string> process_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    if (entry.rfind(kEnvPrefix, 0) == 0) env[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return env;
}

PipelineConfig resolve_config(const CliOverrides& cli, const std::map<std::string, std::string>& environment) {
  json merged = json::object();
  if (cli.config_path) {
    std::ifstream in(*cli.config_path);
    if (!in) throw ConfigError("cannot open config file " + cli.config_path->string());
    json file = json::parse(in, nullptr, false, true);
    if (file.is_discarded()) throw ConfigError("config file " + cli.config_path->string() + " is not valid JSON");
    merged = expand_dotted(file);
  }
  const json env = expand_dotted(env_overrides(environment));
  if (!merged.is_object()) throw ConfigError("config must be a JSON object");
  merged.merge_patch(env);
  if (cli.scale) merged["scale"] = std::string(to_string(*cli.scale));
  if (cli.seed) merged["seed"] = *cli.seed;
  if (cli.out) merged["out"] = cli.out->string();
  auto config = config_from_json(merged);
  config.validate();
  return config;
}

std::string config_hash(const PipelineConfig& config) {
  json j = to_json(config);
  j.erase("out");
  const auto text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace moerl
