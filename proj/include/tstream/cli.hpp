#pragma once

// Configuration and orchestration behind the `tstream` command-line tool.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tstream/harness.hpp"
#include "tstream/json_util.hpp"
#include "tstream/training.hpp"

namespace tstream::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "TSTREAM_OUT_DIR";

struct Toggles {
  bool rtpe = true;
  bool tat = true;
  bool planner = true;
  bool buffer = true;  // feature buffer; off recomputes past features

  bool operator==(const Toggles&) const = default;
};

struct DetectorConfig {
  std::string type = "oracle";  // oracle | model
  sim::OracleSpec oracle{sim::OracleKind::kBundle};
  std::string checkpoint;  // required for type=model
};

struct MetricsConfig {
  std::vector<double> delay_factors{1.0, 2.0, 4.0, 8.0, 16.0};
  std::vector<int> horizons{2, 4, 8, 16};
  bool include_warmup = false;
};

struct SweepMethod {
  std::string name;
  DetectorConfig detector;
  Toggles toggles;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  sim::ScenarioSpec scenario;
  std::size_t num_scenarios = 4;
  sim::DelaySpec delay;
  DetectorConfig detector;
  sim::StreamConfig stream;  // planner / feature_buffer come from toggles
  model::ModelConfig model;  // train only
  sim::TrainConfig train;    // its scenario is `scenario`
  MetricsConfig metrics;
  Toggles toggles;
  std::vector<SweepMethod> methods;  // sweep rows; empty means one row from the top level
  // ablate: checkpoints trained with one component removed, keyed rtpe_off / tat_off.
  std::map<std::string, std::string> ablation_checkpoints;
  std::size_t workers = 1;

  // Throws ConfigError naming the key path.
  void validate() const;
};

// Command-line overrides, applied after the file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<double> delay_factor;
  std::optional<int> horizon;            // stream.horizon and the forecast oracle
  std::vector<std::string> toggles;      // "name=on|off"
};

// Parses a JSON document (empty text means defaults). Unknown keys throw
// ConfigError. The output directory falls back to $TSTREAM_OUT_DIR, then "out".
RunConfig parse_config(const std::string& text, const std::string& command, const Overrides& overrides = {});
RunConfig load_config(const std::string& path, const std::string& command, const Overrides& overrides = {});

// Full resolved configuration, suitable for parse_config.
Json config_to_json(const RunConfig& cfg);

// Hash of scenario + delay + seed (+ scenario count).
std::string config_fingerprint(const RunConfig& cfg);

// Independent stream of seeds per purpose and index.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose, std::uint64_t index);

std::vector<sim::Scenario> make_scenarios(const RunConfig& cfg);
// Model checkpoints must agree with the rtpe / tat toggles (ConfigError otherwise).
std::unique_ptr<sim::Detector> make_detector(const DetectorConfig& det, const Toggles& toggles);
sim::StreamConfig stream_config(const RunConfig& cfg, const Toggles& toggles);

// Pooled streaming run over the configured scenarios at one delay factor.
struct StreamingRun {
  std::vector<sim::StreamTrace> traces;
  sim::EvalResult result;
  bool failed = false;
  std::string failure;
};
StreamingRun run_streaming(const RunConfig& cfg, const sim::Detector& det, const Toggles& toggles,
                           double delay_factor);

// Command entry points; each returns an exit code and writes into cfg.out_dir.
int cmd_simulate(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_evaluate(const RunConfig& cfg, std::ostream& log);
int cmd_sweep(const RunConfig& cfg, std::ostream& log);
int cmd_ablate(const RunConfig& cfg, std::ostream& log);
int cmd_gradcheck(const RunConfig& cfg, std::ostream& log);

// Parses argv and dispatches; exceptions become exit codes.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

// ---- tabular reports ----------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string format_number(double v);  // shortest text that parses back exactly
void write_csv(const Table& table, const std::string& path);
Table read_csv(const std::string& path);

}  // namespace tstream::cli
