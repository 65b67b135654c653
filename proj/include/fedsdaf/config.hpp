#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsdaf/datagen.hpp"
#include "fedsdaf/federation.hpp"
#include "fedsdaf/losses.hpp"
#include "fedsdaf/model.hpp"

namespace fedsdaf::config {

inline constexpr int kConfigVersion = 1;

// Optional supervised warm start of the otherwise random frozen backbone,
// emulating a pretrained foundation model. Off by default so the baseline
// rows stay honest random-feature classifiers.
struct WarmStart {
  std::size_t epochs = 0;
  double lr = 0.05;
  std::size_t batch = 64;
};

// Everything a run needs, assembled from the JSON config file plus CLI
// overrides. model.d_in and model.n_classes are always mirrored from the
// data section and are not part of the schema.
struct TrainConfig {
  int version = kConfigVersion;
  data::DataConfig data;
  model::ModelConfig model;
  fed::TrainSettings train;
  losses::LossConfig loss;
  model::Toggles toggles;
  model::FusionVariant fusion_variant = model::FusionVariant::weighted_sum;
  double fusion_lambda = 1.0;
  std::size_t n_clients = 4;
  std::size_t target_domain = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  WarmStart warm_start;
  fed::CommCostModel comm;
};

TrainConfig default_config();

// Loads `path` (empty path = built-in defaults), applies the dotted-path
// overrides in order ("train.lr=0.01", "toggles.bkd=false", "seeds=[1,2]"),
// then pins the seed list to {*seed} when given. Unknown fields, type
// mismatches and malformed overrides raise SchemaError with the field path;
// semantic violations raise ConfigError.
TrainConfig load(const std::string& path,
                 const std::vector<std::string>& overrides = {},
                 const std::uint64_t* seed = nullptr);

TrainConfig from_json_text(const std::string& text,
                           const std::vector<std::string>& overrides = {},
                           const std::uint64_t* seed = nullptr);

// Effective config as pretty JSON; parses back to an identical config.
std::string to_json_text(const TrainConfig& cfg);

void validate(const TrainConfig& cfg);

// Output directory precedence: --out flag, then $FEDSDAF_OUT, then "runs".
std::string output_root(const std::string& cli_out);

}  // namespace fedsdaf::config
