#pragma once

// Discrete-event streaming simulator, oracle detectors and the streaming /
// offline evaluators.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tstream/delay.hpp"
#include "tstream/detmetrics.hpp"
#include "tstream/json_util.hpp"
#include "tstream/scenario.hpp"
#include "tstream/strategy.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::sim {

using metrics::APReport;
using metrics::FramePair;
using model::FeatureMap;
using model::TemporalProposal;

// ---- detectors -------------------------------------------------------------------

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  // True when predictions depend on past features; such detectors get warm-up
  // loops and feature recomputation.
  virtual bool uses_features() const { return false; }
  virtual FeatureMap features(const Scenario& scenario, int frame) const;
  // One set per predicted target, frame_index = absolute target frame.
  // `past` is aligned with proposal.past and labelled with relative indices.
  virtual std::vector<DetectionSet> predict(const Scenario& scenario, int frame,
                                            const FeatureMap& current,
                                            const std::vector<FeatureMap>& past,
                                            const TemporalProposal& proposal) const = 0;
};

enum class OracleKind {
  kCurrent,   // O_i
  kForecast,  // O_{i+h}
  kNoisy,     // O_i with Gaussian corner jitter
  kBundle,    // O_{i+f} for every f in the proposal's future
};

struct OracleSpec {
  OracleKind kind = OracleKind::kCurrent;
  int horizon = 0;     // kForecast
  double sigma = 0.0;  // pixels; applies to every kind
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
  bool operator==(const OracleSpec&) const = default;
};

std::string to_string(OracleKind kind);
OracleKind oracle_kind_from_string(const std::string& name);

class OracleDetector : public Detector {
 public:
  explicit OracleDetector(OracleSpec spec);
  std::string name() const override;
  std::vector<DetectionSet> predict(const Scenario& scenario, int frame, const FeatureMap& current,
                                    const std::vector<FeatureMap>& past,
                                    const TemporalProposal& proposal) const override;
  const OracleSpec& spec() const { return spec_; }

 private:
  DetectionSet lookup(const Scenario& scenario, int frame, int target) const;
  OracleSpec spec_;
};

std::unique_ptr<Detector> make_oracle(const OracleSpec& spec);

class ModelDetector : public Detector {
 public:
  explicit ModelDetector(model::ModelParams params) : params_(std::move(params)) {}
  std::string name() const override { return "transtreamer"; }
  bool uses_features() const override { return true; }
  FeatureMap features(const Scenario& scenario, int frame) const override;
  std::vector<DetectionSet> predict(const Scenario& scenario, int frame, const FeatureMap& current,
                                    const std::vector<FeatureMap>& past,
                                    const TemporalProposal& proposal) const override;
  const model::ModelParams& params() const { return params_; }

 private:
  model::ModelParams params_;
};

// ---- streaming simulation ------------------------------------------------------

enum class FramePolicy {
  kDropInFlight,     // next loop takes the first frame arriving at or after finish
  kLatestAvailable,  // next loop takes the newest frame already arrived
};

struct StreamConfig {
  bool planner = true;
  bool feature_buffer = true;
  bool output_buffer = true;
  int horizon = 1;  // future used when the planner is off
  strategy::PlannerConfig planner_cfg;
  std::size_t buffer_capacity = 4;
  FramePolicy policy = FramePolicy::kDropInFlight;

  // Raw detector output emitted at finish time with a fixed proposal.
  static StreamConfig strategy_off(int horizon = 1);
  void validate() const;  // ConfigError
};

// Planner-off proposal: past={-3,-2,-1}, future={horizon}.
inline constexpr int kFixedPastCount = 3;

struct LoopRecord {
  int loop = 0;
  int frame = 0;
  std::int64_t start = 0;  // ticks
  std::int64_t startup = 0;
  DelayTicks delays;
  std::int64_t recompute = 0;  // extra backbone passes without the feature buffer
  std::int64_t finish = 0;
  TemporalProposal proposal;
  bool synthetic_past = false;
  bool warmup = false;
  std::vector<int> buffered;  // absolute indices in the feature buffer at plan time
  std::vector<DetectionSet> predictions;
};

struct Emission {
  std::int64_t time = 0;  // ticks
  int source_loop = 0;
  int target = 0;  // absolute frame the detections were predicted for
  std::optional<int> query;  // dispatch frame, output-buffer mode only
  bool reemitted = false;
  bool warmup = false;
  DetectionSet detections;
};

struct StreamTrace {
  std::string detector;
  double frame_rate = 30.0;
  int length = 0;
  std::vector<LoopRecord> loops;
  std::vector<Emission> emissions;  // non-decreasing time
  bool failed = false;
  int failure_loop = -1;
  std::string failure_message;
};

StreamTrace run_stream(const Scenario& scenario, const Detector& detector, DelayModel& delays,
                       const StreamConfig& config);

// ---- pairing and evaluation ----------------------------------------------------------

struct Pairing {
  std::vector<std::optional<std::size_t>> frame_to_emission;  // per gt frame
  std::vector<std::vector<int>> emission_frames;              // per emission
};

// Emission e covers gt frames [ceil(T_e), ceil(T_{e+1}) - 1] (frame units);
// the last one runs to the final frame. Throws ContractError on decreasing times.
Pairing pair_streaming(const std::vector<Emission>& emissions, int length);
Pairing pair_streaming(const StreamTrace& trace, const Scenario& scenario);

struct EvalResult {
  std::string metric;  // "sAP", "sAP_4", "mAP_8"
  APReport report;
  std::vector<Pairing> pairings;  // streaming only, one per trace
  std::size_t frames_scored = 0;
  std::size_t frames_excluded = 0;  // warm-up frames left out
  std::string fingerprint;

  double ap() const { return report.ap_mean; }
};

std::string sap_label(double delay_factor);

// Frames paired with warm-up emissions are excluded unless include_warmup.
std::vector<FramePair> streaming_pairs(const StreamTrace& trace, const Scenario& scenario,
                                       bool include_warmup, std::size_t* excluded = nullptr);
EvalResult evaluate_sap(const StreamTrace& trace, const Scenario& scenario, bool include_warmup = false,
                        const std::string& label = "sAP");
// Pooled over several runs; traces[i] belongs to scenarios[i].
EvalResult evaluate_sap(const std::vector<StreamTrace>& traces, const std::vector<const Scenario*>& scenarios,
                        bool include_warmup = false, const std::string& label = "sAP");

// For each frame i with i + min(past) >= 0 and i + j < length: predict with
// proposal {past, {j}} and pair with O_{i+j}.
std::vector<FramePair> offline_pairs(const Detector& detector, const Scenario& scenario, int j,
                                     const std::vector<int>& past);
// Default offline history for horizon j: {-count*j, ..., -2j, -j}, keeping
// offsets no older than `deepest` (at least {-j} survives when j <= -deepest).
std::vector<int> strided_past(int j, int count = 3, int deepest = model::kMixedPastMin);
EvalResult evaluate_offline_map_j(const Detector& detector, const std::vector<const Scenario*>& scenarios,
                                  int j, const std::vector<int>& past);

// ---- records ---------------------------------------------------------------------------

// Line-delimited JSON: one header, one record per loop, one per emission and
// a failure record if the run failed.
void write_trace_jsonl(const StreamTrace& trace, std::ostream& out);
Json eval_result_to_json(const EvalResult& result);

std::uint64_t fnv1a64(const std::string& bytes);
std::string fingerprint_hex(const std::string& canonical);

}  // namespace tstream::sim
