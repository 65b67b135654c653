#include "fedsdaf/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "fedsdaf/errors.hpp"
#include "json.hpp"

namespace fedsdaf::config {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object())
    throw SchemaError(path.empty() ? "<root>" : path, "expected an object");
}

void require_known_keys(const json& j, const std::string& path,
                        std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known) throw SchemaError(join(path, item.key()), "unknown field");
  }
}

void fetch(const json& j, const std::string& path, const char* key,
           double& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number()) throw SchemaError(join(path, key), "expected a number");
  out = v.get<double>();
}

void fetch(const json& j, const std::string& path, const char* key,
           std::size_t& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw SchemaError(join(path, key), "expected a nonnegative integer");
  out = v.get<std::size_t>();
}

void fetch(const json& j, const std::string& path, const char* key,
           bool& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw SchemaError(join(path, key), "expected a boolean");
  out = v.get<bool>();
}

void fetch(const json& j, const std::string& path, const char* key,
           std::string& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string()) throw SchemaError(join(path, key), "expected a string");
  out = v.get<std::string>();
}

// --- section parsers -------------------------------------------------------

void parse_data(const json& j, data::DataConfig& d) {
  require_object(j, "data");
  require_known_keys(j, "data",
                     {"n_domains", "n_classes", "n_per_class", "d_in",
                      "shift_strength", "noise_sigma", "prototype_scale",
                      "generator", "train_fraction"});
  fetch(j, "data", "n_domains", d.n_domains);
  fetch(j, "data", "n_classes", d.n_classes);
  fetch(j, "data", "n_per_class", d.n_per_class);
  fetch(j, "data", "d_in", d.d_in);
  fetch(j, "data", "shift_strength", d.shift_strength);
  fetch(j, "data", "noise_sigma", d.noise_sigma);
  fetch(j, "data", "prototype_scale", d.prototype_scale);
  fetch(j, "data", "generator", d.generator);
  fetch(j, "data", "train_fraction", d.train_fraction);
}

void parse_model(const json& j, model::ModelConfig& m) {
  require_object(j, "model");
  require_known_keys(j, "model",
                     {"d_h", "d_layers", "rank", "heads", "adapter_activation",
                      "per_layer_insertion"});
  fetch(j, "model", "d_h", m.d_h);
  fetch(j, "model", "d_layers", m.d_layers);
  fetch(j, "model", "rank", m.rank);
  fetch(j, "model", "heads", m.heads);
  std::string act;
  fetch(j, "model", "adapter_activation", act);
  if (!act.empty()) {
    if (act == "gelu")
      m.adapter_activation = model::Activation::gelu;
    else if (act == "relu")
      m.adapter_activation = model::Activation::relu;
    else if (act == "identity")
      m.adapter_activation = model::Activation::identity;
    else
      throw SchemaError("model.adapter_activation",
                        "expected gelu, relu or identity, got '" + act + "'");
  }
  fetch(j, "model", "per_layer_insertion", m.per_layer_insertion);
}

void parse_train(const json& j, fed::TrainSettings& t) {
  require_object(j, "train");
  require_known_keys(j, "train",
                     {"rounds", "epochs", "batch", "lr", "lr_decay",
                      "lr_step_fraction", "momentum", "participation"});
  fetch(j, "train", "rounds", t.rounds);
  fetch(j, "train", "epochs", t.epochs);
  fetch(j, "train", "batch", t.batch);
  fetch(j, "train", "lr", t.lr);
  fetch(j, "train", "lr_decay", t.lr_decay);
  fetch(j, "train", "lr_step_fraction", t.lr_step_fraction);
  fetch(j, "train", "momentum", t.momentum);
  fetch(j, "train", "participation", t.participation);
}

void parse_loss(const json& j, losses::LossConfig& l) {
  require_object(j, "loss");
  require_known_keys(j, "loss",
                     {"alpha_mode", "alpha", "alpha_max", "tau", "temperature",
                      "ce_target"});
  std::string mode;
  fetch(j, "loss", "alpha_mode", mode);
  if (!mode.empty()) {
    if (mode == "fixed")
      l.alpha_mode = losses::AlphaMode::fixed;
    else if (mode == "dynamic")
      l.alpha_mode = losses::AlphaMode::dynamic;
    else
      throw SchemaError("loss.alpha_mode",
                        "expected fixed or dynamic, got '" + mode + "'");
  }
  fetch(j, "loss", "alpha", l.alpha);
  fetch(j, "loss", "alpha_max", l.alpha_max);
  fetch(j, "loss", "tau", l.tau);
  fetch(j, "loss", "temperature", l.temperature);
  std::string target;
  fetch(j, "loss", "ce_target", target);
  if (!target.empty()) {
    if (target == "both_branches")
      l.ce_target = losses::CeTarget::both_branches;
    else if (target == "fused_only")
      l.ce_target = losses::CeTarget::fused_only;
    else
      throw SchemaError("loss.ce_target",
                        "expected both_branches or fused_only, got '" + target +
                            "'");
  }
}

void parse_toggles(const json& j, model::Toggles& t) {
  require_object(j, "toggles");
  require_known_keys(j, "toggles", {"bkd", "mhsa", "a_di", "a_dw"});
  fetch(j, "toggles", "bkd", t.bkd);
  fetch(j, "toggles", "mhsa", t.mhsa);
  fetch(j, "toggles", "a_di", t.a_di);
  fetch(j, "toggles", "a_dw", t.a_dw);
}

void parse_fusion(const json& j, TrainConfig& cfg) {
  require_object(j, "fusion");
  require_known_keys(j, "fusion", {"variant", "lambda"});
  std::string variant;
  fetch(j, "fusion", "variant", variant);
  if (!variant.empty()) {
    if (variant == "weighted_sum")
      cfg.fusion_variant = model::FusionVariant::weighted_sum;
    else if (variant == "concat_project")
      cfg.fusion_variant = model::FusionVariant::concat_project;
    else
      throw SchemaError("fusion.variant",
                        "expected weighted_sum or concat_project, got '" +
                            variant + "'");
  }
  fetch(j, "fusion", "lambda", cfg.fusion_lambda);
}

void parse_federation(const json& j, TrainConfig& cfg) {
  require_object(j, "federation");
  require_known_keys(j, "federation", {"clients", "target_domain"});
  fetch(j, "federation", "clients", cfg.n_clients);
  fetch(j, "federation", "target_domain", cfg.target_domain);
}

void parse_warm_start(const json& j, WarmStart& w) {
  require_object(j, "warm_start");
  require_known_keys(j, "warm_start", {"epochs", "lr", "batch"});
  fetch(j, "warm_start", "epochs", w.epochs);
  fetch(j, "warm_start", "lr", w.lr);
  fetch(j, "warm_start", "batch", w.batch);
}

void parse_comm(const json& j, fed::CommCostModel& c) {
  require_object(j, "comm");
  require_known_keys(j, "comm",
                     {"bytes_per_param", "include_logits", "logit_batches",
                      "n_classes"});
  fetch(j, "comm", "bytes_per_param", c.bytes_per_param);
  fetch(j, "comm", "include_logits", c.include_logits);
  fetch(j, "comm", "logit_batches", c.logit_batches);
  fetch(j, "comm", "n_classes", c.n_classes);
}

TrainConfig parse_tree(const json& j) {
  require_object(j, "");
  require_known_keys(j, "",
                     {"version", "data", "model", "train", "loss", "toggles",
                      "fusion", "federation", "seeds", "warm_start", "comm"});
  TrainConfig cfg;
  if (j.contains("version")) {
    const json& v = j.at("version");
    if (!v.is_number_integer())
      throw SchemaError("version", "expected an integer");
    cfg.version = v.get<int>();
    if (cfg.version != kConfigVersion)
      throw SchemaError("version",
                        "unsupported config version " +
                            std::to_string(cfg.version) + " (this build reads " +
                            std::to_string(kConfigVersion) + ")");
  }
  if (j.contains("data")) parse_data(j.at("data"), cfg.data);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("loss")) parse_loss(j.at("loss"), cfg.loss);
  if (j.contains("toggles")) parse_toggles(j.at("toggles"), cfg.toggles);
  if (j.contains("fusion")) parse_fusion(j.at("fusion"), cfg);
  if (j.contains("federation")) parse_federation(j.at("federation"), cfg);
  if (j.contains("warm_start")) parse_warm_start(j.at("warm_start"), cfg.warm_start);
  if (j.contains("comm")) parse_comm(j.at("comm"), cfg.comm);
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (!s.is_array() || s.empty())
      throw SchemaError("seeds", "expected a nonempty array of integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s[i].is_number_integer() || s[i].get<long long>() < 0)
        throw SchemaError("seeds[" + std::to_string(i) + "]",
                          "expected a nonnegative integer");
      cfg.seeds.push_back(s[i].get<std::uint64_t>());
    }
  }
  // The network is sized by the data it sees.
  cfg.model.d_in = cfg.data.d_in;
  cfg.model.n_classes = cfg.data.n_classes;
  return cfg;
}

json to_json(const TrainConfig& cfg) {
  json j;
  j["version"] = cfg.version;
  j["data"] = {{"n_domains", cfg.data.n_domains},
               {"n_classes", cfg.data.n_classes},
               {"n_per_class", cfg.data.n_per_class},
               {"d_in", cfg.data.d_in},
               {"shift_strength", cfg.data.shift_strength},
               {"noise_sigma", cfg.data.noise_sigma},
               {"prototype_scale", cfg.data.prototype_scale},
               {"generator", cfg.data.generator},
               {"train_fraction", cfg.data.train_fraction}};
  const char* act = cfg.model.adapter_activation == model::Activation::gelu
                        ? "gelu"
                        : cfg.model.adapter_activation == model::Activation::relu
                              ? "relu"
                              : "identity";
  j["model"] = {{"d_h", cfg.model.d_h},
                {"d_layers", cfg.model.d_layers},
                {"rank", cfg.model.rank},
                {"heads", cfg.model.heads},
                {"adapter_activation", act},
                {"per_layer_insertion", cfg.model.per_layer_insertion}};
  j["train"] = {{"rounds", cfg.train.rounds},
                {"epochs", cfg.train.epochs},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.lr},
                {"lr_decay", cfg.train.lr_decay},
                {"lr_step_fraction", cfg.train.lr_step_fraction},
                {"momentum", cfg.train.momentum},
                {"participation", cfg.train.participation}};
  j["loss"] = {
      {"alpha_mode",
       cfg.loss.alpha_mode == losses::AlphaMode::fixed ? "fixed" : "dynamic"},
      {"alpha", cfg.loss.alpha},
      {"alpha_max", cfg.loss.alpha_max},
      {"tau", cfg.loss.tau},
      {"temperature", cfg.loss.temperature},
      {"ce_target", cfg.loss.ce_target == losses::CeTarget::both_branches
                        ? "both_branches"
                        : "fused_only"}};
  j["toggles"] = {{"bkd", cfg.toggles.bkd},
                  {"mhsa", cfg.toggles.mhsa},
                  {"a_di", cfg.toggles.a_di},
                  {"a_dw", cfg.toggles.a_dw}};
  j["fusion"] = {{"variant", cfg.fusion_variant == model::FusionVariant::weighted_sum
                                 ? "weighted_sum"
                                 : "concat_project"},
                 {"lambda", cfg.fusion_lambda}};
  j["federation"] = {{"clients", cfg.n_clients},
                     {"target_domain", cfg.target_domain}};
  j["seeds"] = cfg.seeds;
  j["warm_start"] = {{"epochs", cfg.warm_start.epochs},
                     {"lr", cfg.warm_start.lr},
                     {"batch", cfg.warm_start.batch}};
  j["comm"] = {{"bytes_per_param", cfg.comm.bytes_per_param},
               {"include_logits", cfg.comm.include_logits},
               {"logit_batches", cfg.comm.logit_batches},
               {"n_classes", cfg.comm.n_classes}};
  return j;
}

void apply_override(json& root, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw SchemaError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  std::vector<std::string> keys;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty())
      throw SchemaError(path, "override path has an empty segment");
    keys.push_back(part);
  }

  json* cur = &root;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (cur->contains(keys[i]) && !(*cur)[keys[i]].is_object())
      throw SchemaError(path, "override path traverses a non-object");
    cur = &(*cur)[keys[i]];
  }
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  // Anything that is not valid JSON is taken as a bare string, so
  // generator=moons works without inner quotes.
  (*cur)[keys.back()] = parsed.is_discarded() ? json(value) : parsed;
}

}  // namespace

TrainConfig default_config() { return TrainConfig{}; }

TrainConfig from_json_text(const std::string& text,
                           const std::vector<std::string>& overrides,
                           const std::uint64_t* seed) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ParseError("config is not valid JSON");
  for (const std::string& o : overrides) apply_override(j, o);
  if (seed) j["seeds"] = json::array({*seed});
  TrainConfig cfg = parse_tree(j);
  validate(cfg);
  return cfg;
}

TrainConfig load(const std::string& path,
                 const std::vector<std::string>& overrides,
                 const std::uint64_t* seed) {
  json j;
  if (path.empty()) {
    j = to_json(default_config());
  } else {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << f.rdbuf();
    j = json::parse(buf.str(), nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded())
      throw ParseError(path + ": config is not valid JSON");
  }
  for (const std::string& o : overrides) apply_override(j, o);
  if (seed) j["seeds"] = json::array({*seed});
  TrainConfig cfg = parse_tree(j);
  validate(cfg);
  return cfg;
}

std::string to_json_text(const TrainConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void validate(const TrainConfig& cfg) {
  const data::DataConfig& d = cfg.data;
  if (d.n_domains < 2) throw ConfigError("data.n_domains must be at least 2");
  if (d.n_classes < 2) throw ConfigError("data.n_classes must be at least 2");
  if (d.n_per_class < 2) throw ConfigError("data.n_per_class must be at least 2");
  if (d.d_in < 1) throw ConfigError("data.d_in must be positive");
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0))
    throw ConfigError("data.train_fraction must lie strictly between 0 and 1");
  if (d.shift_strength < 0.0)
    throw ConfigError("data.shift_strength must be nonnegative");
  if (d.noise_sigma < 0.0)
    throw ConfigError("data.noise_sigma must be nonnegative");
  if (d.generator != "blobs" && d.generator != "moons")
    throw ConfigError("data.generator must be blobs or moons");
  if (d.generator == "moons" && (d.n_classes != 2 || d.d_in < 2))
    throw ConfigError("the moons generator needs exactly 2 classes and d_in >= 2");

  const model::ModelConfig& m = cfg.model;
  if (m.d_h < 2) throw ConfigError("model.d_h must be at least 2");
  if (m.d_layers < 1) throw ConfigError("model.d_layers must be at least 1");
  if (m.rank < 1 || m.rank >= m.d_h)
    throw ConfigError("model.rank must satisfy 0 < rank < d_h");
  if (m.heads < 1 || m.d_h % m.heads != 0)
    throw ConfigError("model.heads must divide d_h");

  const fed::TrainSettings& t = cfg.train;
  if (t.batch < 1) throw ConfigError("train.batch must be at least 1");
  if (t.lr < 0.0) throw ConfigError("train.lr must be nonnegative");
  if (t.lr_decay <= 0.0) throw ConfigError("train.lr_decay must be positive");
  if (t.lr_step_fraction < 0.0)
    throw ConfigError("train.lr_step_fraction must be nonnegative");
  if (t.momentum < 0.0 || t.momentum >= 1.0)
    throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(t.participation > 0.0 && t.participation <= 1.0))
    throw ConfigError("train.participation must lie in (0, 1]");

  losses::validate(cfg.loss);

  if (cfg.toggles.mhsa && !cfg.toggles.a_dw)
    throw ConfigError(
        "toggles.mhsa requires toggles.a_dw: the attention block lives inside "
        "the aware branch");

  if (cfg.fusion_lambda < 0.0)
    throw ConfigError("fusion.lambda must be nonnegative");

  if (cfg.n_clients < 1)
    throw ConfigError("federation.clients must be at least 1");
  if (cfg.target_domain >= cfg.data.n_domains)
    throw ConfigError("federation.target_domain must name one of the " +
                      std::to_string(cfg.data.n_domains) + " domains");
  if (cfg.n_clients < cfg.data.n_domains - 1)
    throw ConfigError(
        "federation.clients must be at least the number of source domains (" +
        std::to_string(cfg.data.n_domains - 1) + ")");

  if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (cfg.warm_start.epochs > 0 && cfg.warm_start.lr <= 0.0)
    throw ConfigError("warm_start.lr must be positive when warm_start.epochs > 0");
  if (cfg.warm_start.batch < 1)
    throw ConfigError("warm_start.batch must be at least 1");
  if (cfg.comm.bytes_per_param < 1)
    throw ConfigError("comm.bytes_per_param must be at least 1");
}

std::string output_root(const std::string& cli_out) {
  if (!cli_out.empty()) return cli_out;
  const char* env = std::getenv("FEDSDAF_OUT");
  if (env && *env) return env;
  return "runs";
}

}  // namespace fedsdaf::config
