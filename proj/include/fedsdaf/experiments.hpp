#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsdaf/config.hpp"
#include "fedsdaf/federation.hpp"
#include "fedsdaf/metrics.hpp"

namespace fedsdaf::experiments {

// Everything produced by one (target domain, seed) federated run.
struct RunArtifacts {
  fed::ServerState server;  // final global adapters + transcript
  std::vector<fed::ClientState> clients;
  std::vector<RoundMetrics> history;
  double final_accuracy = 0.0;  // fused view on the held-out target
  data::DomainDataset target;
};

// Assembles data, backbone, server and clients from the config and executes
// the full round loop. Deterministic in (cfg, target_domain, seed).
RunArtifacts run_single(const config::TrainConfig& cfg,
                        std::size_t target_domain, std::uint64_t seed);

struct SeedStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::vector<double> values;
};

SeedStats stats(const std::vector<double>& values);

// Main run: per-seed metrics/transcript/adapter artifacts under
// out_dir/seed_<s>/, plus a summary whose accuracies are recomputed from the
// written CSV files rather than carried over in memory.
void cmd_train(const config::TrainConfig& cfg, const std::string& out_dir);

// Single-source single-adapter grid: trains one adapter per source domain
// (no federation) and evaluates it on every domain's test split.
void cmd_motivation(const config::TrainConfig& cfg, const std::string& out_dir);

// Component toggle study. The standard grid walks six component on/off
// combinations; hard_domain_grid switches to the alternative six-
// row set whose aware-branch-off row nominally keeps attention ticked (the
// attention block cannot exist without the aware branch, so that row runs
// with it off and says so in its label).
void cmd_ablate(const config::TrainConfig& cfg, const std::string& out_dir,
                bool hard_domain_grid = false);

void cmd_sweep_alpha(const config::TrainConfig& cfg,
                     const std::vector<double>& alphas,
                     const std::string& out_dir);

// Dynamic-weight grid with the attention block disabled throughout.
void cmd_sweep_alpha_dynamic(const config::TrainConfig& cfg,
                             const std::vector<double>& alpha_max_grid,
                             const std::vector<double>& tau_grid,
                             const std::string& out_dir);

void cmd_sweep_clients(const config::TrainConfig& cfg,
                       const std::vector<std::size_t>& k_list,
                       const std::string& out_dir);

void cmd_fusion_sweep(const config::TrainConfig& cfg,
                      const std::vector<double>& lambdas, bool include_concat,
                      const std::string& out_dir);

// Trains one run (first seed, configured target) and dumps the penultimate
// representation of every target test sample under all four views.
void cmd_export_features(const config::TrainConfig& cfg,
                         const std::string& out_dir);

// Byte accounting over a finished run directory (needs its transcript.bin
// and config.json).
void cmd_comm_report(const std::string& run_dir, const std::string& out_dir);

}  // namespace fedsdaf::experiments
