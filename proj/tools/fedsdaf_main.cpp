#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedsdaf/config.hpp"
#include "fedsdaf/errors.hpp"
#include "fedsdaf/experiments.hpp"
#include "json.hpp"

namespace {

using fedsdaf::ConfigError;

std::vector<double> parse_double_list(const std::string& s, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item +
                        "' is not a number");
    }
  }
  if (out.empty())
    throw ConfigError(std::string(flag) + ": expected a comma-separated list");
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s,
                                         const char* flag) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(s, flag)) {
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw ConfigError(std::string(flag) + ": expected nonnegative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

int fail_json(const char* type, const std::string& message) {
  nlohmann::json err = {{"error", {{"type", type}, {"message", message}}}};
  std::cerr << err.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "fedsdaf: federated dual-adapter domain generalization simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_root;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON config file; built-in defaults when omitted");
    sub->add_option("--seed", seed, "pin the seed list to this single seed");
    sub->add_option("--out", out_root,
                    "output root (else $FEDSDAF_OUT, else ./runs)");
    sub->add_option("--override", overrides,
                    "config override like train.lr=0.01 (repeatable)");
  };

  CLI::App* c_train =
      app.add_subcommand("train", "federated leave-one-domain-out run");
  add_common(c_train);

  CLI::App* c_motivation = app.add_subcommand(
      "motivation", "single-source adapter grid over all domain pairs");
  add_common(c_motivation);

  CLI::App* c_ablate =
      app.add_subcommand("ablate", "component toggle study over all targets");
  add_common(c_ablate);
  bool hard_domains = false;
  c_ablate->add_flag("--hard-domains", hard_domains,
                     "use the alternative six-row hard-domain grid");

  CLI::App* c_alpha =
      app.add_subcommand("sweep-alpha", "fixed distillation weight sweep");
  add_common(c_alpha);
  std::string alphas_s = "0,0.1,0.3,1,2,5";
  c_alpha->add_option("--alphas", alphas_s, "comma-separated alpha values");

  CLI::App* c_alpha_dyn = app.add_subcommand(
      "sweep-alpha-dynamic",
      "dynamic weight grid for the attention-free variant");
  add_common(c_alpha_dyn);
  std::string amax_s = "0.5,1,2";
  std::string tau_s = "10,50,100";
  c_alpha_dyn->add_option("--alpha-max-grid", amax_s,
                          "comma-separated alpha_max values");
  c_alpha_dyn->add_option("--tau-grid", tau_s, "comma-separated tau values");

  CLI::App* c_clients =
      app.add_subcommand("sweep-clients", "client pool size sweep");
  add_common(c_clients);
  std::string k_s = "4,20,30,50";
  c_clients->add_option("--k-list", k_s, "comma-separated client counts");

  CLI::App* c_fusion =
      app.add_subcommand("fusion-sweep", "adapter fusion strategy sweep");
  add_common(c_fusion);
  std::string lambdas_s = "0.1,0.5,1,1.5";
  c_fusion->add_option("--lambdas", lambdas_s,
                       "comma-separated residual weights");
  bool no_concat = false;
  c_fusion->add_flag("--no-concat", no_concat,
                     "skip the concatenation strategy row");

  CLI::App* c_export = app.add_subcommand(
      "export-features", "dump per-branch penultimate features to CSV");
  add_common(c_export);

  CLI::App* c_comm =
      app.add_subcommand("comm-report", "byte accounting over a finished run");
  std::string run_dir;
  c_comm->add_option("--run", run_dir, "run directory holding transcript.bin")
      ->required();
  c_comm->add_option("--out", out_root,
                     "output root (else $FEDSDAF_OUT, else ./runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::stringstream ss;
    ss << e.what();
    return fail_json("CliError", ss.str());
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  const std::string out =
      fedsdaf::config::output_root(out_root) + "/" + name;

  try {
    if (name == "comm-report") {
      fedsdaf::experiments::cmd_comm_report(run_dir, out);
      std::cout << "wrote " << out << "\n";
      return 0;
    }

    const bool has_seed = sub->count("--seed") > 0;
    fedsdaf::config::TrainConfig cfg = fedsdaf::config::load(
        config_path, overrides, has_seed ? &seed : nullptr);

    if (name == "train") {
      fedsdaf::experiments::cmd_train(cfg, out);
    } else if (name == "motivation") {
      fedsdaf::experiments::cmd_motivation(cfg, out);
    } else if (name == "ablate") {
      fedsdaf::experiments::cmd_ablate(cfg, out, hard_domains);
    } else if (name == "sweep-alpha") {
      fedsdaf::experiments::cmd_sweep_alpha(
          cfg, parse_double_list(alphas_s, "--alphas"), out);
    } else if (name == "sweep-alpha-dynamic") {
      fedsdaf::experiments::cmd_sweep_alpha_dynamic(
          cfg, parse_double_list(amax_s, "--alpha-max-grid"),
          parse_double_list(tau_s, "--tau-grid"), out);
    } else if (name == "sweep-clients") {
      fedsdaf::experiments::cmd_sweep_clients(cfg, parse_size_list(k_s, "--k-list"),
                                      out);
    } else if (name == "fusion-sweep") {
      fedsdaf::experiments::cmd_fusion_sweep(
          cfg, parse_double_list(lambdas_s, "--lambdas"), !no_concat, out);
    } else if (name == "export-features") {
      fedsdaf::experiments::cmd_export_features(cfg, out);
    }
    std::cout << "wrote " << out << "\n";
    return 0;
  } catch (const fedsdaf::SchemaError& e) {
    return fail_json("SchemaError", e.what());
  } catch (const fedsdaf::ConfigError& e) {
    return fail_json("ConfigError", e.what());
  } catch (const fedsdaf::ParseError& e) {
    return fail_json("ParseError", e.what());
  } catch (const fedsdaf::ProtocolError& e) {
    return fail_json("ProtocolError", e.what());
  } catch (const fedsdaf::NumericalError& e) {
    return fail_json("NumericalError", e.what());
  } catch (const fedsdaf::ShapeError& e) {
    return fail_json("ShapeError", e.what());
  } catch (const std::exception& e) {
    return fail_json("Error", e.what());
  }
}
