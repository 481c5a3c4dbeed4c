#include "tstream/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "tstream/errors.hpp"
#include "tstream/gradsuite.hpp"
#include "tstream/model_json.hpp"

namespace tstream::cli {

namespace fs = std::filesystem;
using sim::DelaySpec;
using sim::ScenarioSpec;

// ---- JSON <-> config --------------------------------------------------------------

namespace {

Json components_to_json(const strategy::ComponentDelays& c) {
  return {{"backbone", c.backbone}, {"neck", c.neck}, {"head", c.head}, {"other", c.other}};
}

strategy::ComponentDelays components_from_json(JsonReader r, strategy::ComponentDelays c) {
  r.get("backbone", c.backbone);
  r.get("neck", c.neck);
  r.get("head", c.head);
  r.get("other", c.other);
  r.finish();
  return c;
}

Json scenario_to_json(const ScenarioSpec& s) {
  Json objects = Json::array();
  for (const auto& o : s.objects) {
    Json changes = Json::array();
    for (const auto& c : o.changes) changes.push_back({{"frame", c.frame}, {"vx", c.vx}, {"vy", c.vy}});
    objects.push_back({{"class", o.class_id},
                       {"x", o.x},
                       {"y", o.y},
                       {"w", o.w},
                       {"h", o.h},
                       {"vx", o.vx},
                       {"vy", o.vy},
                       {"first_frame", o.first_frame},
                       {"changes", changes}});
  }
  return {{"width", s.width},
          {"height", s.height},
          {"length", s.length},
          {"frame_rate", s.frame_rate},
          {"num_classes", s.num_classes},
          {"num_objects", s.num_objects},
          {"size_min", s.size_min},
          {"size_max", s.size_max},
          {"speed_min", s.speed_min},
          {"speed_max", s.speed_max},
          {"accel_prob", s.accel_prob},
          {"accel_changes", s.accel_changes},
          {"accel_speed_max", s.accel_speed_max},
          {"noise", s.noise},
          {"min_visible", s.min_visible},
          {"objects", objects}};
}

ScenarioSpec scenario_from_json(JsonReader r) {
  ScenarioSpec s;
  r.get("width", s.width);
  r.get("height", s.height);
  r.get("length", s.length);
  r.get("frame_rate", s.frame_rate);
  r.get("num_classes", s.num_classes);
  r.get("num_objects", s.num_objects);
  r.get("size_min", s.size_min);
  r.get("size_max", s.size_max);
  r.get("speed_min", s.speed_min);
  r.get("speed_max", s.speed_max);
  r.get("accel_prob", s.accel_prob);
  r.get("accel_changes", s.accel_changes);
  r.get("accel_speed_max", s.accel_speed_max);
  r.get("noise", s.noise);
  r.get("min_visible", s.min_visible);
  if (r.has("objects")) {
    const Json& arr = r.raw("objects");
    if (!arr.is_array()) throw ConfigError(r.where("objects") + ": expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      JsonReader o(arr[i], r.where("objects") + "[" + std::to_string(i) + "]");
      sim::ObjectSpec spec;
      o.get("class", spec.class_id);
      o.get("x", spec.x);
      o.get("y", spec.y);
      o.get("w", spec.w);
      o.get("h", spec.h);
      o.get("vx", spec.vx);
      o.get("vy", spec.vy);
      o.get("first_frame", spec.first_frame);
      if (o.has("changes")) {
        const Json& ch = o.raw("changes");
        if (!ch.is_array()) throw ConfigError(o.where("changes") + ": expected an array");
        for (std::size_t k = 0; k < ch.size(); ++k) {
          JsonReader c(ch[k], o.where("changes") + "[" + std::to_string(k) + "]");
          sim::VelocityChange v;
          c.get("frame", v.frame);
          c.get("vx", v.vx);
          c.get("vy", v.vy);
          c.finish();
          spec.changes.push_back(v);
        }
      }
      o.finish();
      s.objects.push_back(spec);
    }
  }
  r.finish();
  return s;
}

Json delay_to_json(const DelaySpec& d) {
  Json table = Json::array();
  for (const auto& row : d.table) table.push_back(components_to_json(row));
  return {{"kind", sim::to_string(d.kind)},
          {"base", components_to_json(d.base)},
          {"table", table},
          {"burst_prob", d.burst_prob},
          {"burst_scale", d.burst_scale},
          {"jitter", d.jitter},
          {"factor", d.factor}};
}

DelaySpec delay_from_json(JsonReader r) {
  DelaySpec d;
  std::string kind = sim::to_string(d.kind);
  r.get("kind", kind);
  try {
    d.kind = sim::delay_kind_from_string(kind);
  } catch (const ConfigError& e) {
    throw ConfigError(r.where("kind") + ": " + e.what());
  }
  d.base = components_from_json(r.child("base"), d.base);
  if (r.has("table")) {
    const Json& arr = r.raw("table");
    if (!arr.is_array()) throw ConfigError(r.where("table") + ": expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      d.table.push_back(components_from_json(JsonReader(arr[i], r.where("table") + "[" + std::to_string(i) + "]"),
                                             strategy::ComponentDelays{0, 0, 0, 0}));
    }
  }
  r.get("burst_prob", d.burst_prob);
  r.get("burst_scale", d.burst_scale);
  r.get("jitter", d.jitter);
  r.get("factor", d.factor);
  r.finish();
  return d;
}

const char* stride_name(strategy::StrideRule s) {
  return s == strategy::StrideRule::kEstimate ? "estimate" : "recent_peak";
}

const char* policy_name(sim::FramePolicy p) {
  return p == sim::FramePolicy::kDropInFlight ? "drop_in_flight" : "latest_available";
}

Json planner_to_json(const strategy::PlannerConfig& p) {
  return {{"max_past", p.max_past},     {"max_future", p.max_future}, {"clip_min", p.clip_min},
          {"clip_max", p.clip_max},     {"ema_decay", p.ema_decay},   {"stride", stride_name(p.stride)},
          {"peak_window", p.peak_window}};
}

strategy::PlannerConfig planner_from_json(JsonReader r) {
  strategy::PlannerConfig p;
  r.get("max_past", p.max_past);
  r.get("max_future", p.max_future);
  r.get("clip_min", p.clip_min);
  r.get("clip_max", p.clip_max);
  r.get("ema_decay", p.ema_decay);
  std::string stride = stride_name(p.stride);
  r.get("stride", stride);
  if (stride == "estimate") {
    p.stride = strategy::StrideRule::kEstimate;
  } else if (stride == "recent_peak") {
    p.stride = strategy::StrideRule::kRecentPeak;
  } else {
    throw ConfigError(r.where("stride") + ": expected estimate or recent_peak");
  }
  r.get("peak_window", p.peak_window);
  r.finish();
  return p;
}

Json stream_to_json(const sim::StreamConfig& s) {
  return {{"output_buffer", s.output_buffer},
          {"horizon", s.horizon},
          {"buffer_capacity", s.buffer_capacity},
          {"policy", policy_name(s.policy)},
          {"planner", planner_to_json(s.planner_cfg)}};
}

sim::StreamConfig stream_from_json(JsonReader r) {
  sim::StreamConfig s;
  r.get("output_buffer", s.output_buffer);
  r.get("horizon", s.horizon);
  r.get("buffer_capacity", s.buffer_capacity);
  std::string policy = policy_name(s.policy);
  r.get("policy", policy);
  if (policy == "drop_in_flight") {
    s.policy = sim::FramePolicy::kDropInFlight;
  } else if (policy == "latest_available") {
    s.policy = sim::FramePolicy::kLatestAvailable;
  } else {
    throw ConfigError(r.where("policy") + ": expected drop_in_flight or latest_available");
  }
  s.planner_cfg = planner_from_json(r.child("planner"));
  r.finish();
  return s;
}

Json toggles_to_json(const Toggles& t) {
  return {{"rtpe", t.rtpe}, {"tat", t.tat}, {"planner", t.planner}, {"buffer", t.buffer}};
}

Toggles toggles_from_json(JsonReader r, Toggles t) {
  r.get("rtpe", t.rtpe);
  r.get("tat", t.tat);
  r.get("planner", t.planner);
  r.get("buffer", t.buffer);
  r.finish();
  return t;
}

void set_toggle(Toggles& t, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--toggle expects name=on|off, got '" + assignment + "'");
  const std::string name = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  if (value != "on" && value != "off") throw ConfigError("toggles." + name + ": expected on or off");
  const bool on = value == "on";
  if (name == "rtpe") t.rtpe = on;
  else if (name == "tat") t.tat = on;
  else if (name == "planner") t.planner = on;
  else if (name == "buffer") t.buffer = on;
  else throw ConfigError("toggles." + name + ": unknown toggle (rtpe|tat|planner|buffer)");
}

Json detector_to_json(const DetectorConfig& d) {
  return {{"type", d.type},
          {"oracle", {{"kind", sim::to_string(d.oracle.kind)}, {"horizon", d.oracle.horizon},
                      {"sigma", d.oracle.sigma}, {"seed", d.oracle.seed}}},
          {"checkpoint", d.checkpoint}};
}

DetectorConfig detector_from_json(JsonReader r, DetectorConfig d) {
  r.get("type", d.type);
  auto o = r.child("oracle");
  std::string kind = sim::to_string(d.oracle.kind);
  o.get("kind", kind);
  try {
    d.oracle.kind = sim::oracle_kind_from_string(kind);
  } catch (const ConfigError& e) {
    throw ConfigError(o.where("kind") + ": " + e.what());
  }
  o.get("horizon", d.oracle.horizon);
  o.get("sigma", d.oracle.sigma);
  o.get("seed", d.oracle.seed);
  o.finish();
  r.get("checkpoint", d.checkpoint);
  r.finish();
  return d;
}

Json train_to_json(const sim::TrainConfig& t) {
  return {{"num_scenarios", t.num_scenarios}, {"steps", t.steps},
          {"batch", t.batch},                 {"learning_rate", t.sgd.learning_rate},
          {"grad_clip", t.sgd.grad_clip},     {"lr_final_fraction", t.lr_final_fraction},
          {"mixed_speed", t.mixed_speed},     {"fixed_future", t.fixed_future}};
}

sim::TrainConfig train_from_json(JsonReader r) {
  sim::TrainConfig t;
  r.get("num_scenarios", t.num_scenarios);
  r.get("steps", t.steps);
  r.get("batch", t.batch);
  r.get("learning_rate", t.sgd.learning_rate);
  r.get("grad_clip", t.sgd.grad_clip);
  r.get("lr_final_fraction", t.lr_final_fraction);
  r.get("mixed_speed", t.mixed_speed);
  r.get("fixed_future", t.fixed_future);
  r.finish();
  return t;
}

// Re-throws a validation failure with a key path in front.
template <typename F>
void at_path(const std::string& path, F&& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  at_path("scenario", [&] { scenario.validate(); });
  if (num_scenarios < 1) throw ConfigError("num_scenarios must be >= 1");
  at_path("delay", [&] { delay.validate(); });
  at_path("stream", [&] { stream.validate(); });
  at_path("model", [&] { model.validate(); });
  if (workers < 1) throw ConfigError("workers must be >= 1");
  for (std::size_t i = 0; i < metrics.delay_factors.size(); ++i) {
    const double d = metrics.delay_factors[i];
    if (!(d >= 1.0) || !std::isfinite(d)) {
      throw ConfigError("metrics.delay_factors[" + std::to_string(i) + "]: must be >= 1");
    }
  }
  for (std::size_t i = 0; i < metrics.horizons.size(); ++i) {
    if (metrics.horizons[i] < 1) throw ConfigError("metrics.horizons[" + std::to_string(i) + "]: must be >= 1");
  }
  auto check_detector = [&](const DetectorConfig& d, const std::string& path) {
    if (d.type != "oracle" && d.type != "model") throw ConfigError(path + ".type: expected oracle or model");
    at_path(path + ".oracle", [&] { d.oracle.validate(); });
    const bool reads_checkpoint = command != "train" && command != "gradcheck";
    if (d.type == "model" && reads_checkpoint) {
      if (d.checkpoint.empty()) throw ConfigError(path + ".checkpoint: required for type=model");
      if (!fs::exists(d.checkpoint)) throw ConfigError(path + ".checkpoint: no such file " + d.checkpoint);
    }
  };
  check_detector(detector, "detector");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const std::string path = "methods[" + std::to_string(i) + "]";
    const auto& name = methods[i].name;
    if (name.empty() || name.find_first_of(",\"\n/\\") != std::string::npos) {
      throw ConfigError(path + ".name: must be non-empty without , \" / \\ or newlines");
    }
    for (std::size_t k = 0; k < i; ++k)
      if (methods[k].name == name) throw ConfigError(path + ".name: duplicate '" + name + "'");
    check_detector(methods[i].detector, path + ".detector");
  }
  if (command == "train") {
    sim::TrainConfig t = train;
    t.scenario = scenario;
    at_path("train", [&] { t.validate(model); });
  }
  if (command == "sweep" && metrics.delay_factors.empty() && metrics.horizons.empty()) {
    throw ConfigError("metrics: sweep needs a non-empty delay_factors or horizons grid");
  }
  if ((command == "evaluate" || command == "ablate") && metrics.horizons.empty()) {
    throw ConfigError("metrics.horizons: must be non-empty for " + command);
  }
  if (command == "ablate" && detector.type != "model") {
    throw ConfigError("detector.type: ablate needs a trained model checkpoint");
  }
  for (const auto& [name, path] : ablation_checkpoints) {
    if (name != "rtpe_off" && name != "tat_off") {
      throw ConfigError("ablation_checkpoints." + name + ": unknown key (rtpe_off|tat_off)");
    }
    if (command == "ablate" && !fs::exists(path)) {
      throw ConfigError("ablation_checkpoints." + name + ": no such file " + path);
    }
  }
}

RunConfig parse_config(const std::string& text, const std::string& command, const Overrides& overrides) {
  Json doc = Json::object();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    try {
      doc = Json::parse(text);
    } catch (const Json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  JsonReader r(doc, "");
  RunConfig cfg;
  cfg.command = command;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) cfg.out_dir = env;
  r.get("seed", cfg.seed);
  r.get("out_dir", cfg.out_dir);
  cfg.scenario = scenario_from_json(r.child("scenario"));
  r.get("num_scenarios", cfg.num_scenarios);
  cfg.delay = delay_from_json(r.child("delay"));
  cfg.detector = detector_from_json(r.child("detector"), cfg.detector);
  cfg.stream = stream_from_json(r.child("stream"));
  cfg.model = model::model_config_from_json(r.child("model"));
  cfg.train = train_from_json(r.child("train"));
  {
    auto m = r.child("metrics");
    m.get("delay_factors", cfg.metrics.delay_factors);
    m.get("horizons", cfg.metrics.horizons);
    m.get("include_warmup", cfg.metrics.include_warmup);
    m.finish();
  }
  cfg.toggles = toggles_from_json(r.child("toggles"), cfg.toggles);
  if (r.has("methods")) {
    const Json& arr = r.raw("methods");
    if (!arr.is_array()) throw ConfigError("methods: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      JsonReader m(arr[i], "methods[" + std::to_string(i) + "]");
      SweepMethod method;
      m.get("name", method.name);
      method.detector = detector_from_json(m.child("detector"), cfg.detector);
      method.toggles = toggles_from_json(m.child("toggles"), cfg.toggles);
      m.finish();
      cfg.methods.push_back(std::move(method));
    }
  }
  r.get("ablation_checkpoints", cfg.ablation_checkpoints);
  r.get("workers", cfg.workers);
  r.finish();

  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;
  if (overrides.delay_factor) cfg.delay.factor = *overrides.delay_factor;
  if (overrides.horizon) {
    cfg.stream.horizon = *overrides.horizon;
    cfg.detector.oracle.horizon = *overrides.horizon;
  }
  for (const auto& t : overrides.toggles) set_toggle(cfg.toggles, t);
  cfg.model.use_rtpe = cfg.toggles.rtpe;
  cfg.model.use_tat = cfg.toggles.tat;
  cfg.train.scenario = cfg.scenario;
  cfg.train.seed = derive_seed(cfg.seed, "train", 0);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path, const std::string& command, const Overrides& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), command, overrides);
}

Json config_to_json(const RunConfig& cfg) {
  Json methods = Json::array();
  for (const auto& m : cfg.methods) {
    methods.push_back({{"name", m.name}, {"detector", detector_to_json(m.detector)}, {"toggles", toggles_to_json(m.toggles)}});
  }
  return {{"seed", cfg.seed},
          {"out_dir", cfg.out_dir},
          {"scenario", scenario_to_json(cfg.scenario)},
          {"num_scenarios", cfg.num_scenarios},
          {"delay", delay_to_json(cfg.delay)},
          {"detector", detector_to_json(cfg.detector)},
          {"stream", stream_to_json(cfg.stream)},
          {"model", model::model_config_to_json(cfg.model)},
          {"train", train_to_json(cfg.train)},
          {"metrics",
           {{"delay_factors", cfg.metrics.delay_factors},
            {"horizons", cfg.metrics.horizons},
            {"include_warmup", cfg.metrics.include_warmup}}},
          {"toggles", toggles_to_json(cfg.toggles)},
          {"methods", methods},
          {"ablation_checkpoints", cfg.ablation_checkpoints},
          {"workers", cfg.workers}};
}

std::string config_fingerprint(const RunConfig& cfg) {
  const Json canon = {{"scenario", scenario_to_json(cfg.scenario)},
                      {"num_scenarios", cfg.num_scenarios},
                      {"delay", delay_to_json(cfg.delay)},
                      {"seed", cfg.seed}};
  return sim::fingerprint_hex(canon.dump());
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose, std::uint64_t index) {
  // splitmix64 finaliser over a mix of the inputs.
  std::uint64_t z = seed ^ (sim::fnv1a64(purpose) * 0x9e3779b97f4a7c15ull) ^ (index * 0xbf58476d1ce4e5b9ull);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---- orchestration -------------------------------------------------------------------

std::vector<sim::Scenario> make_scenarios(const RunConfig& cfg) {
  std::vector<sim::Scenario> out;
  for (std::size_t s = 0; s < cfg.num_scenarios; ++s) {
    out.push_back(sim::generate_scenario(cfg.scenario, derive_seed(cfg.seed, "scenario", s)));
  }
  return out;
}

std::unique_ptr<sim::Detector> make_detector(const DetectorConfig& det, const Toggles& toggles) {
  if (det.type == "oracle") return sim::make_oracle(det.oracle);
  auto params = model::load_checkpoint(det.checkpoint);
  auto check = [&](const char* name, bool wanted, bool trained) {
    if (wanted != trained) {
      throw ConfigError(std::string("toggles.") + name + ": " + (wanted ? "on" : "off") + " but checkpoint " +
                        det.checkpoint + " was trained with it " + (trained ? "on" : "off"));
    }
  };
  check("rtpe", toggles.rtpe, params.config.use_rtpe);
  check("tat", toggles.tat, params.config.use_tat);
  return std::make_unique<sim::ModelDetector>(std::move(params));
}

sim::StreamConfig stream_config(const RunConfig& cfg, const Toggles& toggles) {
  sim::StreamConfig s = cfg.stream;
  s.planner = toggles.planner;
  s.feature_buffer = toggles.buffer;
  s.planner_cfg.frame_rate = cfg.scenario.frame_rate;
  return s;
}

StreamingRun run_streaming(const RunConfig& cfg, const sim::Detector& det, const Toggles& toggles,
                           double delay_factor) {
  const auto scenarios = make_scenarios(cfg);
  const auto scfg = stream_config(cfg, toggles);
  DelaySpec d = cfg.delay;
  d.factor = delay_factor;
  StreamingRun run;
  std::vector<const sim::Scenario*> ptrs;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    sim::DelayModel delays(d, cfg.scenario.frame_rate, derive_seed(cfg.seed, "delay", s));
    run.traces.push_back(sim::run_stream(scenarios[s], det, delays, scfg));
    ptrs.push_back(&scenarios[s]);
    if (run.traces.back().failed && !run.failed) {
      run.failed = true;
      run.failure = "scenario " + std::to_string(s) + ", loop " + std::to_string(run.traces.back().failure_loop) +
                    ": " + run.traces.back().failure_message;
    }
  }
  run.result = sim::evaluate_sap(run.traces, ptrs, cfg.metrics.include_warmup, sim::sap_label(delay_factor));
  run.result.fingerprint = config_fingerprint(cfg);
  return run;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  // The directory itself is left out so reruns elsewhere compare equal.
  Json resolved = config_to_json(cfg);
  resolved.erase("out_dir");
  write_text(dir / "config.json", resolved.dump(2) + "\n");
  return dir;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

std::string trace_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trace_%03zu.jsonl", s);
  return buf;
}

void write_traces(const fs::path& dir, const std::vector<sim::StreamTrace>& traces) {
  for (std::size_t s = 0; s < traces.size(); ++s) {
    std::ostringstream out;
    sim::write_trace_jsonl(traces[s], out);
    write_text(dir / trace_name(s), out.str());
  }
}

std::vector<std::string> result_row(const sim::EvalResult& r) {
  return {r.metric,
          format_number(r.ap()),
          format_number(r.report.ap50()),
          format_number(r.report.ap75()),
          std::to_string(r.frames_scored),
          std::to_string(r.frames_excluded)};
}

const std::vector<std::string> kResultHeader{"metric", "ap", "ap50", "ap75", "frames_scored", "frames_excluded"};

std::vector<const sim::Scenario*> pointers(const std::vector<sim::Scenario>& v) {
  std::vector<const sim::Scenario*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

sim::EvalResult offline_result(const RunConfig& cfg, const sim::Detector& det,
                               const std::vector<const sim::Scenario*>& scenarios, int j) {
  auto r = sim::evaluate_offline_map_j(det, scenarios, j, sim::strided_past(j));
  r.fingerprint = config_fingerprint(cfg);
  return r;
}

struct LoopStats {
  double mean_total = 0.0;  // ticks, including recomputation
  double mean_recompute = 0.0;
  std::size_t loops = 0;
};

LoopStats loop_stats(const std::vector<sim::StreamTrace>& traces) {
  LoopStats s;
  for (const auto& t : traces) {
    for (const auto& l : t.loops) {
      s.mean_total += static_cast<double>(l.delays.total() + l.recompute);
      s.mean_recompute += static_cast<double>(l.recompute);
      ++s.loops;
    }
  }
  if (s.loops) {
    s.mean_total /= static_cast<double>(s.loops);
    s.mean_recompute /= static_cast<double>(s.loops);
  }
  return s;
}

// Runs jobs[0..n) on up to `workers` threads; job i writes only its own slot.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) job(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

}  // namespace

int cmd_simulate(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  const auto det = make_detector(cfg.detector, cfg.toggles);
  const auto run = run_streaming(cfg, *det, cfg.toggles, cfg.delay.factor);
  write_traces(dir, run.traces);
  Json result = sim::eval_result_to_json(run.result);
  result["detector"] = det->name();
  result["failed"] = run.failed;
  write_text(dir / "result.json", result.dump(2) + "\n");
  Table t{kResultHeader, {result_row(run.result)}};
  write_csv(t, (dir / "summary.csv").string());
  log << run.result.metric << "=" << format_number(run.result.ap()) << " detector=" << det->name()
      << " frames=" << run.result.frames_scored << " excluded=" << run.result.frames_excluded
      << " fingerprint=" << run.result.fingerprint << "\n";
  if (run.failed) {
    log << "simulation failed: " << run.failure << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  auto params = model::init_params(cfg.model, derive_seed(cfg.seed, "init", 0));
  Table curve{{"step", "loss", "objectness", "box", "classification", "past", "future"}, {}};
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 10);
  sim::train_model(params, cfg.train, [&](const sim::TrainLogEntry& e) {
    std::string past, future;
    for (std::size_t b = 0; b < e.proposals.size(); ++b) {
      past += (b ? "|" : "") + join_ints(e.proposals[b].past);
      future += (b ? "|" : "") + join_ints(e.proposals[b].future);
    }
    curve.rows.push_back({std::to_string(e.step), format_number(e.loss), format_number(e.terms.objectness),
                          format_number(e.terms.box), format_number(e.terms.classification), past, future});
    if ((e.step + 1) % every == 0) log << "step " << e.step + 1 << " loss " << format_number(e.loss) << "\n";
  });
  write_csv(curve, (dir / "train_log.csv").string());
  model::save_checkpoint(params, (dir / "checkpoint.json").string());
  log << "checkpoint " << (dir / "checkpoint.json").string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  const auto det = make_detector(cfg.detector, cfg.toggles);
  const auto scenarios = make_scenarios(cfg);
  const auto ptrs = pointers(scenarios);
  Table t{kResultHeader, {}};
  Json all = Json::array();
  for (int j : cfg.metrics.horizons) {
    const auto r = offline_result(cfg, *det, ptrs, j);
    t.rows.push_back(result_row(r));
    Json rec = sim::eval_result_to_json(r);
    rec["past"] = sim::strided_past(j);
    all.push_back(std::move(rec));
    log << r.metric << "=" << format_number(r.ap()) << "\n";
  }
  write_csv(t, (dir / "evaluate.csv").string());
  write_text(dir / "results.json", all.dump(2) + "\n");
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  std::vector<SweepMethod> methods = cfg.methods;
  if (methods.empty()) methods.push_back({"default", cfg.detector, cfg.toggles});
  std::vector<std::unique_ptr<sim::Detector>> detectors;
  for (const auto& m : methods) detectors.push_back(make_detector(m.detector, m.toggles));
  const auto scenarios = make_scenarios(cfg);
  const auto ptrs = pointers(scenarios);

  struct Point {
    std::size_t method;
    bool streaming;
    double d;
    int j;
    std::optional<sim::EvalResult> result;
    std::string error;
  };
  std::vector<Point> points;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (double d : cfg.metrics.delay_factors) points.push_back({m, true, d, 0, std::nullopt, {}});
    for (int j : cfg.metrics.horizons) points.push_back({m, false, 0.0, j, std::nullopt, {}});
  }
  parallel_for(points.size(), cfg.workers, [&](std::size_t i) {
    Point& p = points[i];
    try {
      if (p.streaming) {
        auto run = run_streaming(cfg, *detectors[p.method], methods[p.method].toggles, p.d);
        if (run.failed) p.error = run.failure;
        else p.result = std::move(run.result);
      } else {
        p.result = offline_result(cfg, *detectors[p.method], ptrs, p.j);
      }
    } catch (const std::exception& e) {
      p.error = e.what();
    }
  });

  Table sap{{"method"}, {}}, map{{"method"}, {}};
  Table sap_series{{"method", "delay_factor", "metric", "ap"}, {}}, map_series{{"method", "j", "metric", "ap"}, {}};
  for (double d : cfg.metrics.delay_factors) sap.header.push_back(sim::sap_label(d));
  for (int j : cfg.metrics.horizons) map.header.push_back("mAP_" + std::to_string(j));
  std::string points_jsonl;
  bool any_failed = false;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    sap.rows.push_back({methods[m].name});
    map.rows.push_back({methods[m].name});
  }
  for (const auto& p : points) {
    const std::string& name = methods[p.method].name;
    const std::string label = p.streaming ? sim::sap_label(p.d) : "mAP_" + std::to_string(p.j);
    const std::string cell = p.result ? format_number(p.result->ap()) : "error";
    (p.streaming ? sap : map).rows[p.method].push_back(cell);
    if (p.streaming) sap_series.rows.push_back({name, format_number(p.d), label, cell});
    else map_series.rows.push_back({name, std::to_string(p.j), label, cell});
    Json rec = p.result ? sim::eval_result_to_json(*p.result) : Json{{"metric", label}};
    rec["method"] = name;
    if (!p.error.empty()) {
      rec["error"] = p.error;
      any_failed = true;
      log << "grid point " << name << " " << label << " failed: " << p.error << "\n";
    }
    points_jsonl += rec.dump() + "\n";
  }
  if (!cfg.metrics.delay_factors.empty()) {
    write_csv(sap, (dir / "sweep_sap.csv").string());
    write_csv(sap_series, (dir / "series_sap.csv").string());
  }
  if (!cfg.metrics.horizons.empty()) {
    write_csv(map, (dir / "sweep_map.csv").string());
    write_csv(map_series, (dir / "series_map.csv").string());
  }
  write_text(dir / "points.jsonl", points_jsonl);
  for (const auto* t : {&sap, &map}) {
    if (t->header.size() < 2) continue;
    for (const auto& h : t->header) log << h << (&h == &t->header.back() ? "\n" : "\t");
    for (const auto& row : t->rows)
      for (std::size_t c = 0; c < row.size(); ++c) log << row[c] << (c + 1 == row.size() ? "\n" : "\t");
  }
  return any_failed ? kExitFailure : kExitOk;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  struct Row {
    std::string name;
    Toggles toggles;
  };
  // Planner and buffer only matter when streaming; RTPE and TAT are compared
  // offline against checkpoints trained without them.
  std::vector<Row> streaming{{"base", cfg.toggles}};
  if (cfg.toggles.planner) streaming.push_back({"planner_off", cfg.toggles}), streaming.back().toggles.planner = false;
  if (cfg.toggles.buffer) streaming.push_back({"buffer_off", cfg.toggles}), streaming.back().toggles.buffer = false;
  std::vector<std::pair<Row, DetectorConfig>> offline{{{"base", cfg.toggles}, cfg.detector}};
  for (const auto& [name, path] : cfg.ablation_checkpoints) {
    Row row{name, cfg.toggles};
    (name == "rtpe_off" ? row.toggles.rtpe : row.toggles.tat) = false;
    DetectorConfig det = cfg.detector;
    det.checkpoint = path;
    offline.emplace_back(row, det);
  }

  const std::string label = sim::sap_label(cfg.delay.factor);
  Table st{{"row", "planner", "buffer", label, "mean_delay_ticks", "mean_recompute_ticks", "loops"}, {}};
  for (const auto& row : streaming) {
    const auto det = make_detector(cfg.detector, row.toggles);
    const auto run = run_streaming(cfg, *det, row.toggles, cfg.delay.factor);
    if (run.failed) throw std::runtime_error("ablation row " + row.name + " failed: " + run.failure);
    const auto stats = loop_stats(run.traces);
    st.rows.push_back({row.name, row.toggles.planner ? "on" : "off", row.toggles.buffer ? "on" : "off",
                       format_number(run.result.ap()), format_number(stats.mean_total),
                       format_number(stats.mean_recompute), std::to_string(stats.loops)});
    log << row.name << " " << label << "=" << format_number(run.result.ap()) << " mean_delay_ticks="
        << format_number(stats.mean_total) << "\n";
  }
  write_csv(st, (dir / "ablate_streaming.csv").string());

  const auto scenarios = make_scenarios(cfg);
  const auto ptrs = pointers(scenarios);
  Table off{{"row", "rtpe", "tat"}, {}};
  for (int j : cfg.metrics.horizons) off.header.push_back("mAP_" + std::to_string(j));
  for (const auto& [row, detector] : offline) {
    const auto det = make_detector(detector, row.toggles);
    std::vector<std::string> cells{row.name, row.toggles.rtpe ? "on" : "off", row.toggles.tat ? "on" : "off"};
    for (int j : cfg.metrics.horizons) cells.push_back(format_number(offline_result(cfg, *det, ptrs, j).ap()));
    log << row.name;
    for (std::size_t c = 3; c < cells.size(); ++c) log << " " << off.header[c] << "=" << cells[c];
    log << "\n";
    off.rows.push_back(std::move(cells));
  }
  write_csv(off, (dir / "ablate_offline.csv").string());
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& log) {
  const auto dir = prepare_out_dir(cfg);
  constexpr double kTolerance = 1e-4;
  Table t{{"case", "max_rel_error", "pass"}, {}};
  bool ok = true;
  for (const auto& c : model::run_gradient_suite(cfg.seed)) {
    const bool pass = c.max_rel_error < kTolerance;
    ok = ok && pass;
    t.rows.push_back({c.name, format_number(c.max_rel_error), pass ? "yes" : "no"});
    log << c.name << " max_rel_error=" << format_number(c.max_rel_error) << (pass ? "" : " FAIL") << "\n";
  }
  write_csv(t, (dir / "gradcheck.csv").string());
  return ok ? kExitOk : kExitFailure;
}

// ---- argv ----------------------------------------------------------------------------

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming-perception simulator and toy multi-horizon detector"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides ov;
  std::uint64_t seed = 0;
  std::string out_dir;
  double delay_factor = 0.0;
  int horizon = 0;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"simulate", "run the streaming simulator and score sAP"},
      {"train", "train a toy detector and write a checkpoint"},
      {"evaluate", "offline mAP_j of a detector"},
      {"sweep", "grids of delay factors and offline horizons"},
      {"ablate", "toggle matrix for planner, buffer, RTPE and TAT"},
      {"gradcheck", "finite-difference gradient checks"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out-dir", out_dir, std::string("output directory (default $") + kOutDirEnv + " or out)");
    sub->add_option("--delay-factor", delay_factor, "delay factor d >= 1");
    sub->add_option("--horizon", horizon, "planner-off horizon and forecast-oracle horizon");
    sub->add_option("--toggle", ov.toggles, "name=on|off for rtpe, tat, planner, buffer");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  const auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  if (sub->count("--seed")) ov.seed = seed;
  if (sub->count("--out-dir")) ov.out_dir = out_dir;
  if (sub->count("--delay-factor")) ov.delay_factor = delay_factor;
  if (sub->count("--horizon")) ov.horizon = horizon;
  try {
    const RunConfig cfg = config_path.empty() ? parse_config("", command, ov) : load_config(config_path, command, ov);
    if (command == "simulate") return cmd_simulate(cfg, out);
    if (command == "train") return cmd_train(cfg, out);
    if (command == "evaluate") return cmd_evaluate(cfg, out);
    if (command == "sweep") return cmd_sweep(cfg, out);
    if (command == "ablate") return cmd_ablate(cfg, out);
    return cmd_gradcheck(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

// ---- tables --------------------------------------------------------------------------

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_csv(const Table& table, const std::string& path) {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c].find_first_of(",\n\"") != std::string::npos) {
        throw ContractError("csv cell contains a separator: " + cells[c]);
      }
      out << cells[c] << (c + 1 == cells.size() ? "\n" : ",");
    }
  };
  line(table.header);
  for (const auto& row : table.rows) line(row);
  write_text(path, out.str());
}

Table read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) t.header = std::move(cells);
    else t.rows.push_back(std::move(cells));
    first = false;
  }
  return t;
}

}  // namespace tstream::cli
