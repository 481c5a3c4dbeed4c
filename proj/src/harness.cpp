#include "tstream/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <ostream>
#include <random>

#include "tstream/errors.hpp"

namespace tstream::sim {

// ---- detectors -------------------------------------------------------------------

FeatureMap Detector::features(const Scenario&, int frame) const { return FeatureMap{frame, {}}; }

std::string to_string(OracleKind kind) {
  switch (kind) {
    case OracleKind::kCurrent: return "current";
    case OracleKind::kForecast: return "forecast";
    case OracleKind::kNoisy: return "noisy";
    case OracleKind::kBundle: return "bundle";
  }
  return "?";
}

OracleKind oracle_kind_from_string(const std::string& name) {
  if (name == "current") return OracleKind::kCurrent;
  if (name == "forecast") return OracleKind::kForecast;
  if (name == "noisy") return OracleKind::kNoisy;
  if (name == "bundle") return OracleKind::kBundle;
  throw ConfigError("unknown oracle kind '" + name + "' (current|forecast|noisy|bundle)");
}

void OracleSpec::validate() const {
  if (horizon < 0) throw ConfigError("oracle.horizon must be >= 0");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("oracle.sigma must be >= 0");
}

OracleDetector::OracleDetector(OracleSpec spec) : spec_(spec) { spec_.validate(); }

std::string OracleDetector::name() const {
  std::string n = "oracle-" + to_string(spec_.kind);
  if (spec_.kind == OracleKind::kForecast) n += "(" + std::to_string(spec_.horizon) + ")";
  if (spec_.sigma > 0.0) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "+noise(%g)", spec_.sigma);
    n += buf;
  }
  return n;
}

DetectionSet OracleDetector::lookup(const Scenario& scenario, int frame, int target) const {
  DetectionSet out = scenario.ground_truth(target);
  out.frame_index = target;
  if (spec_.sigma > 0.0) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec_.seed), static_cast<std::uint32_t>(spec_.seed >> 32),
                      static_cast<std::uint32_t>(frame), static_cast<std::uint32_t>(target)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> n(0.0, spec_.sigma);
    const double W = scenario.spec().width, H = scenario.spec().height;
    for (auto& b : out.boxes) {
      double x0 = b.x_min + n(rng), y0 = b.y_min + n(rng);
      double x1 = b.x_max + n(rng), y1 = b.y_max + n(rng);
      if (x1 < x0) std::swap(x0, x1);
      if (y1 < y0) std::swap(y0, y1);
      x0 = std::clamp(x0, 0.0, W - 1e-3);
      y0 = std::clamp(y0, 0.0, H - 1e-3);
      b.x_min = x0;
      b.y_min = y0;
      b.x_max = std::clamp(x1, x0 + 1e-3, W);
      b.y_max = std::clamp(y1, y0 + 1e-3, H);
    }
  }
  for (auto& b : out.boxes) b.score = 1.0;
  return out;
}

std::vector<DetectionSet> OracleDetector::predict(const Scenario& scenario, int frame, const FeatureMap&,
                                                  const std::vector<FeatureMap>&,
                                                  const TemporalProposal& proposal) const {
  switch (spec_.kind) {
    case OracleKind::kCurrent:
    case OracleKind::kNoisy: return {lookup(scenario, frame, frame)};
    case OracleKind::kForecast: return {lookup(scenario, frame, frame + spec_.horizon)};
    case OracleKind::kBundle: {
      std::vector<DetectionSet> out;
      for (int f : proposal.future) out.push_back(lookup(scenario, frame, frame + f));
      return out;
    }
  }
  return {};
}

std::unique_ptr<Detector> make_oracle(const OracleSpec& spec) { return std::make_unique<OracleDetector>(spec); }

FeatureMap ModelDetector::features(const Scenario& scenario, int frame) const {
  return model::compute_features(params_, scenario.frame(frame), frame);
}

std::vector<DetectionSet> ModelDetector::predict(const Scenario&, int frame, const FeatureMap& current,
                                                 const std::vector<FeatureMap>& past,
                                                 const TemporalProposal& proposal) const {
  auto sets = model::transtreamer_forward(params_, current, past, proposal);
  for (auto& s : sets) s.frame_index += frame;
  return sets;
}

// ---- streaming simulation ------------------------------------------------------

StreamConfig StreamConfig::strategy_off(int horizon) {
  StreamConfig c;
  c.planner = false;
  c.output_buffer = false;
  c.horizon = horizon;
  return c;
}

void StreamConfig::validate() const {
  planner_cfg.validate();
  if (horizon < 0) throw ConfigError("stream.horizon must be >= 0");
  if (buffer_capacity < 1) throw ConfigError("stream.buffer_capacity must be >= 1");
}

namespace {

struct Push {
  std::int64_t finish;
  int loop;
  std::vector<DetectionSet> sets;
};

ComponentDelays to_seconds(const DelayTicks& d, std::int64_t recompute, double k) {
  return {ticks_to_seconds(d.backbone + recompute, k), ticks_to_seconds(d.neck, k),
          ticks_to_seconds(d.head, k), ticks_to_seconds(d.other, k)};
}

}  // namespace

StreamTrace run_stream(const Scenario& scenario, const Detector& detector, DelayModel& delays,
                       const StreamConfig& config) {
  config.validate();
  const double k = scenario.frame_rate();
  const int L = scenario.length();
  strategy::PlannerConfig pcfg = config.planner_cfg;
  pcfg.frame_rate = k;

  StreamTrace trace;
  trace.detector = detector.name();
  trace.frame_rate = k;
  trace.length = L;

  strategy::FeatureBuffer buffer(config.buffer_capacity);
  std::deque<int> processed;  // buffer-off: indices only, features recomputed on use
  strategy::DelayTracker tracker(pcfg);
  std::vector<Push> pushes;
  std::int64_t clock = 0;
  int last_frame = -1;

  for (int n = 0;; ++n) {
    int i = config.policy == FramePolicy::kDropInFlight
                ? first_frame_at_or_after(clock)
                : static_cast<int>(clock / kTicksPerFrame);
    i = std::max(i, last_frame + 1);
    if (i >= L) break;

    LoopRecord rec;
    rec.loop = n;
    rec.frame = i;
    rec.start = std::max(clock, frame_ticks(i));
    rec.startup = rec.start - frame_ticks(i);

    // Candidate past frames are the previously processed ones either way;
    // without the buffer their features are recomputed.
    const std::vector<int> available =
        config.feature_buffer ? buffer.indices() : std::vector<int>(processed.begin(), processed.end());
    rec.buffered = available;

    if (config.planner) {
      const auto estimate = tracker.estimate(ticks_to_seconds(rec.startup, k));
      const auto p = strategy::plan(available, estimate, i, pcfg, tracker.recent_totals());
      rec.proposal = p.proposal;
      rec.synthetic_past = p.synthetic_past;
    } else {
      const std::size_t count = std::min<std::size_t>(kFixedPastCount, available.size());
      for (int m = static_cast<int>(count); m >= 1; --m) rec.proposal.past.push_back(-m);
      if (rec.proposal.past.empty()) {
        rec.proposal.past = {-1};
        rec.synthetic_past = true;
      }
      rec.proposal.future = {std::max(1, config.horizon)};
    }
    rec.warmup = available.empty() && detector.uses_features();

    FeatureMap current;
    try {
      current = detector.features(scenario, i);
      std::vector<FeatureMap> past;
      if (rec.synthetic_past) {
        past.push_back(current);
        past.back().source_index = -1;
      } else {
        // Latest |past| available frames, relabelled with the proposal's offsets.
        const std::size_t count = rec.proposal.past.size();
        for (std::size_t m = 0; m < count; ++m) {
          const int absolute = config.planner ? i + rec.proposal.past[m]
                                              : available[available.size() - count + m];
          FeatureMap f = config.feature_buffer ? buffer.at(absolute) : detector.features(scenario, absolute);
          f.source_index = rec.proposal.past[m];
          past.push_back(std::move(f));
        }
      }
      rec.predictions = detector.predict(scenario, i, current, past, rec.proposal);
      if (rec.predictions.empty()) throw ContractError("detector returned no prediction set");
    } catch (const std::exception& e) {
      trace.failed = true;
      trace.failure_loop = n;
      trace.failure_message = e.what();
      break;
    }

    rec.delays = delays.sample();
    if (!config.feature_buffer && !rec.synthetic_past) {
      rec.recompute = static_cast<std::int64_t>(rec.proposal.past.size()) * rec.delays.backbone;
    }
    rec.finish = rec.start + rec.delays.total() + rec.recompute;
    tracker.observe(to_seconds(rec.delays, rec.recompute, k));
    if (config.feature_buffer) {
      buffer.push(i, std::move(current));
    } else {
      processed.push_back(i);
      if (processed.size() > config.buffer_capacity) processed.pop_front();
    }

    if (config.output_buffer) {
      pushes.push_back({rec.finish, n, rec.predictions});
    } else {
      Emission e;
      e.time = rec.finish;
      e.source_loop = n;
      e.target = rec.predictions.front().frame_index;
      e.warmup = rec.warmup;
      e.detections = rec.predictions.front();
      trace.emissions.push_back(std::move(e));
    }
    clock = rec.finish;
    last_frame = i;
    trace.loops.push_back(std::move(rec));
  }

  if (config.output_buffer) {
    strategy::OutputBuffer out;
    std::map<int, int> origin;  // target -> producing loop
    std::size_t next = 0;
    std::optional<Emission> last;
    for (int q = 0; q < L; ++q) {
      const std::int64_t now = frame_ticks(q);
      while (next < pushes.size() && pushes[next].finish <= now) {
        std::vector<std::pair<int, DetectionSet>> batch;
        for (const auto& s : pushes[next].sets) {
          batch.emplace_back(s.frame_index, s);
          origin[s.frame_index] = pushes[next].loop;
        }
        out.push(batch);
        ++next;
      }
      Emission e;
      if (auto d = out.dispatch(q)) {
        e.source_loop = origin.at(d->first);
        e.target = d->first;
        e.detections = std::move(d->second);
        e.warmup = trace.loops[static_cast<std::size_t>(e.source_loop)].warmup;
      } else if (last) {
        e = *last;
        e.reemitted = true;
      } else {
        continue;
      }
      e.time = now;
      e.query = q;
      last = e;
      trace.emissions.push_back(std::move(e));
    }
  }
  return trace;
}

// ---- pairing and evaluation ----------------------------------------------------------

Pairing pair_streaming(const std::vector<Emission>& emissions, int length) {
  Pairing p;
  p.frame_to_emission.assign(static_cast<std::size_t>(std::max(length, 0)), std::nullopt);
  p.emission_frames.resize(emissions.size());
  for (std::size_t e = 0; e < emissions.size(); ++e) {
    if (emissions[e].time < 0) throw ContractError("negative emission time");
    if (e > 0 && emissions[e].time < emissions[e - 1].time) {
      throw ContractError("emission times are not sorted at index " + std::to_string(e));
    }
  }
  for (std::size_t e = 0; e < emissions.size(); ++e) {
    const int first = first_frame_at_or_after(emissions[e].time);
    const int last = e + 1 < emissions.size() ? first_frame_at_or_after(emissions[e + 1].time) - 1 : length - 1;
    for (int q = std::max(first, 0); q <= std::min(last, length - 1); ++q) {
      p.frame_to_emission[static_cast<std::size_t>(q)] = e;
      p.emission_frames[e].push_back(q);
    }
  }
  return p;
}

Pairing pair_streaming(const StreamTrace& trace, const Scenario& scenario) {
  return pair_streaming(trace.emissions, scenario.length());
}

std::string sap_label(double delay_factor) {
  if (delay_factor == 1.0) return "sAP";
  char buf[48];
  std::snprintf(buf, sizeof buf, "sAP_%g", delay_factor);
  return buf;
}

std::vector<FramePair> streaming_pairs(const StreamTrace& trace, const Scenario& scenario, bool include_warmup,
                                       std::size_t* excluded) {
  const Pairing p = pair_streaming(trace, scenario);
  std::vector<FramePair> out;
  std::size_t skipped = 0;
  for (int q = 0; q < scenario.length(); ++q) {
    FramePair fp;
    fp.ground_truth = scenario.ground_truth(q);
    fp.predictions.frame_index = q;
    if (const auto& e = p.frame_to_emission[static_cast<std::size_t>(q)]) {
      const Emission& em = trace.emissions[*e];
      if (em.warmup && !include_warmup) {
        ++skipped;
        continue;
      }
      fp.predictions.boxes = em.detections.boxes;
    }
    out.push_back(std::move(fp));
  }
  if (excluded) *excluded = skipped;
  return out;
}

EvalResult evaluate_sap(const StreamTrace& trace, const Scenario& scenario, bool include_warmup,
                        const std::string& label) {
  return evaluate_sap(std::vector<StreamTrace>{trace}, {&scenario}, include_warmup, label);
}

EvalResult evaluate_sap(const std::vector<StreamTrace>& traces, const std::vector<const Scenario*>& scenarios,
                        bool include_warmup, const std::string& label) {
  if (traces.size() != scenarios.size()) throw ContractError("traces and scenarios differ in count");
  EvalResult r;
  r.metric = label;
  std::vector<FramePair> pooled;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    std::size_t excluded = 0;
    auto pairs = streaming_pairs(traces[t], *scenarios[t], include_warmup, &excluded);
    r.frames_excluded += excluded;
    r.pairings.push_back(pair_streaming(traces[t], *scenarios[t]));
    std::move(pairs.begin(), pairs.end(), std::back_inserter(pooled));
  }
  r.frames_scored = pooled.size();
  r.report = metrics::evaluate_coco(pooled);
  return r;
}

std::vector<FramePair> offline_pairs(const Detector& detector, const Scenario& scenario, int j,
                                     const std::vector<int>& past) {
  if (j < 1) throw ConfigError("offline horizon j must be >= 1");
  TemporalProposal proposal{past, {j}};
  proposal.validate();
  const int L = scenario.length();
  const int first = -proposal.past.front();
  std::vector<std::optional<FeatureMap>> cache(static_cast<std::size_t>(std::max(L, 0)));
  auto feature = [&](int f) -> const FeatureMap& {
    auto& slot = cache[static_cast<std::size_t>(f)];
    if (!slot) slot = detector.features(scenario, f);
    return *slot;
  };
  std::vector<FramePair> out;
  for (int i = first; i + j < L; ++i) {
    std::vector<FeatureMap> history;
    for (int p : proposal.past) {
      FeatureMap f = feature(i + p);
      f.source_index = p;
      history.push_back(std::move(f));
    }
    auto sets = detector.predict(scenario, i, feature(i), history, proposal);
    FramePair fp;
    fp.predictions = sets.front();
    fp.ground_truth = scenario.ground_truth(i + j);
    out.push_back(std::move(fp));
    // Frames older than the deepest past offset are no longer needed.
    const int stale = i + proposal.past.front();
    if (stale >= 0) cache[static_cast<std::size_t>(stale)].reset();
  }
  return out;
}

std::vector<int> strided_past(int j, int count, int deepest) {
  if (j < 1 || count < 1) throw ConfigError("strided_past needs j >= 1 and count >= 1");
  std::vector<int> past;
  for (int m = count; m >= 1; --m) {
    if (-m * j >= deepest) past.push_back(-m * j);
  }
  if (past.empty()) past.push_back(-j);
  return past;
}

EvalResult evaluate_offline_map_j(const Detector& detector, const std::vector<const Scenario*>& scenarios, int j,
                                  const std::vector<int>& past) {
  EvalResult r;
  r.metric = "mAP_" + std::to_string(j);
  std::vector<FramePair> pooled;
  for (const Scenario* s : scenarios) {
    auto pairs = offline_pairs(detector, *s, j, past);
    std::move(pairs.begin(), pairs.end(), std::back_inserter(pooled));
  }
  r.frames_scored = pooled.size();
  r.report = metrics::evaluate_coco(pooled);
  return r;
}

// ---- records ---------------------------------------------------------------------------

namespace {

Json boxes_json(const DetectionSet& set) {
  Json arr = Json::array();
  for (const auto& b : set.boxes) {
    Json row = {b.x_min, b.y_min, b.x_max, b.y_max, b.class_id};
    row.push_back(b.score ? Json(*b.score) : Json(nullptr));
    arr.push_back(std::move(row));
  }
  return arr;
}

}  // namespace

void write_trace_jsonl(const StreamTrace& trace, std::ostream& out) {
  Json header = {{"record", "header"},
                 {"detector", trace.detector},
                 {"frame_rate", trace.frame_rate},
                 {"ticks_per_frame", kTicksPerFrame},
                 {"length", trace.length},
                 {"loops", trace.loops.size()},
                 {"emissions", trace.emissions.size()},
                 {"failed", trace.failed}};
  out << header.dump() << '\n';
  for (const auto& r : trace.loops) {
    Json preds = Json::array();
    for (const auto& s : r.predictions) preds.push_back({{"target", s.frame_index}, {"boxes", boxes_json(s)}});
    Json rec = {{"record", "loop"},
                {"loop", r.loop},
                {"frame", r.frame},
                {"start", r.start},
                {"startup", r.startup},
                {"delays",
                 {{"backbone", r.delays.backbone},
                  {"neck", r.delays.neck},
                  {"head", r.delays.head},
                  {"other", r.delays.other},
                  {"recompute", r.recompute}}},
                {"finish", r.finish},
                {"buffered", r.buffered},
                {"past", r.proposal.past},
                {"future", r.proposal.future},
                {"synthetic_past", r.synthetic_past},
                {"warmup", r.warmup},
                {"predictions", std::move(preds)}};
    out << rec.dump() << '\n';
  }
  for (const auto& e : trace.emissions) {
    Json rec = {{"record", "emission"},
                {"time", e.time},
                {"query", e.query ? Json(*e.query) : Json(nullptr)},
                {"target", e.target},
                {"source_loop", e.source_loop},
                {"reemitted", e.reemitted},
                {"warmup", e.warmup},
                {"boxes", boxes_json(e.detections)}};
    out << rec.dump() << '\n';
  }
  if (trace.failed) {
    out << Json{{"record", "failure"}, {"loop", trace.failure_loop}, {"message", trace.failure_message}}.dump()
        << '\n';
  }
}

Json eval_result_to_json(const EvalResult& result) {
  Json j = {{"metric", result.metric}, {"ap", result.report.ap_mean}};
  for (const auto& [t, v] : result.report.ap_per_iou) j["ap_" + std::to_string(t)] = v;
  j["ap_small"] = result.report.ap_small;
  j["ap_medium"] = result.report.ap_medium;
  j["ap_large"] = result.report.ap_large;
  j["no_ground_truth"] = result.report.no_ground_truth;
  j["frames_scored"] = result.frames_scored;
  j["frames_excluded"] = result.frames_excluded;
  j["fingerprint"] = result.fingerprint;
  return j;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string fingerprint_hex(const std::string& canonical) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical)));
  return buf;
}

}  // namespace tstream::sim
