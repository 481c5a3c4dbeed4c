#include <fstream>
#include <sstream>

#include "tstream/json_util.hpp"
#include "tstream/model_json.hpp"
#include "tstream/transtreamer.hpp"

namespace tstream::model {

namespace {

constexpr int kCheckpointVersion = 1;

const char* value_mode_name(ValueMode m) {
  switch (m) {
    case ValueMode::kPresentMinusPast: return "present_minus_past";
    case ValueMode::kPastMinusPresent: return "past_minus_present";
    case ValueMode::kKeyFeatures: return "key_features";
  }
  return "?";
}

}  // namespace

Json model_config_to_json(const ModelConfig& c) {
  return Json{{"channels", c.channels},
              {"layers", c.layers},
              {"heads", c.heads},
              {"window", {{"t", c.window.win_t}, {"h", c.window.win_h}, {"w", c.window.win_w}}},
              {"patch", c.patch},
              {"num_classes", c.num_classes},
              {"mlp_hidden", c.mlp_hidden},
              {"rtpe_hidden", c.rtpe_hidden},
              {"max_past", c.max_past},
              {"max_future", c.max_future},
              {"rtpe", c.use_rtpe},
              {"tat", c.use_tat},
              {"values", value_mode_name(c.values)},
              {"ln_eps", c.ln_eps},
              {"score_threshold", c.score_threshold},
              {"nms_iou", c.nms_iou}};
}

ModelConfig model_config_from_json(JsonReader r) {
  ModelConfig c;
  r.get("channels", c.channels);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  auto w = r.child("window");
  w.get("t", c.window.win_t);
  w.get("h", c.window.win_h);
  w.get("w", c.window.win_w);
  w.finish();
  r.get("patch", c.patch);
  r.get("num_classes", c.num_classes);
  r.get("mlp_hidden", c.mlp_hidden);
  r.get("rtpe_hidden", c.rtpe_hidden);
  r.get("max_past", c.max_past);
  r.get("max_future", c.max_future);
  r.get("rtpe", c.use_rtpe);
  r.get("tat", c.use_tat);
  std::string values = value_mode_name(c.values);
  r.get("values", values);
  if (values == "present_minus_past") {
    c.values = ValueMode::kPresentMinusPast;
  } else if (values == "past_minus_present") {
    c.values = ValueMode::kPastMinusPresent;
  } else if (values == "key_features") {
    c.values = ValueMode::kKeyFeatures;
  } else {
    throw ConfigError(r.where("values") + ": expected present_minus_past, past_minus_present or key_features");
  }
  r.get("ln_eps", c.ln_eps);
  r.get("score_threshold", c.score_threshold);
  r.get("nms_iou", c.nms_iou);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(r.where("") + ": " + e.what());
  }
  return c;
}

std::string serialize_checkpoint(const ModelParams& params) {
  Json tensors = Json::object();
  for (const auto& [name, t] : params.tensors) {
    tensors[name] = Json{{"shape", t.shape()},
                         {"data", std::vector<double>(t.values().begin(), t.values().end())}};
  }
  Json doc{{"format", "tstream-checkpoint"},
           {"version", kCheckpointVersion},
           {"config", model_config_to_json(params.config)},
           {"params", tensors}};
  return doc.dump() + "\n";
}

ModelParams deserialize_checkpoint(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  JsonReader r(doc, "checkpoint");
  std::string format;
  int version = 0;
  r.get("format", format);
  r.get("version", version);
  if (format != "tstream-checkpoint" || version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint format " + format + " v" + std::to_string(version));
  }
  ModelParams p;
  p.config = model_config_from_json(r.child("config"));
  auto tensors = r.child("params");
  for (const auto& [name, entry] : r.raw("params").items()) {
    JsonReader t = tensors.child(name);
    Shape shape;
    std::vector<double> data;
    t.get("shape", shape);
    t.get("data", data);
    t.finish();
    try {
      p.tensors[name] = Tensor(shape, std::move(data));
    } catch (const ShapeError& e) {
      throw ConfigError(t.where("") + ": " + e.what());
    }
  }
  tensors.finish();
  r.finish();
  // Shapes must match a fresh initialisation of the same config.
  const auto reference = init_params(p.config, 0);
  for (const auto& [name, t] : reference.tensors) {
    const auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw ConfigError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter " + name + " has shape " +
                        nn::to_string(it->second.shape()) + ", expected " + nn::to_string(t.shape()));
    }
  }
  if (p.tensors.size() != reference.tensors.size()) {
    throw ConfigError("checkpoint has parameters not used by its config");
  }
  return p;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << serialize_checkpoint(params);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace tstream::model
