#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tstream/cli.hpp"
#include "tstream/errors.hpp"

using namespace tstream;
using namespace tstream::cli;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::absolute("cli_test_out");

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

int run(std::vector<std::string> args, std::string* out = nullptr, std::string* err = nullptr) {
  args.insert(args.begin(), "tstream");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream o, e;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

// Small training problem shared by the model-based cases.
const char* kTrainConfig = R"({
  "model": {"channels": 8, "layers": 1, "heads": 2, "mlp_hidden": 16, "rtpe_hidden": 8},
  "scenario": {"length": 48, "size_min": 8, "size_max": 14},
  "num_scenarios": 2,
  "train": {"steps": 10, "batch": 2, "num_scenarios": 2, "learning_rate": 0.01},
  "metrics": {"horizons": [1, 8], "delay_factors": [1, 2]}
})";

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST_CASE("parse_config") {
  SUBCASE("empty text gives defaults") {
    const auto cfg = parse_config("", "simulate");
    CHECK(cfg.seed == 1);
    CHECK(cfg.num_scenarios == 4);
    CHECK(cfg.toggles == Toggles{});
    CHECK(cfg.delay.factor == 1.0);
    CHECK(cfg.detector.type == "oracle");
  }
  SUBCASE("flags override the file") {
    Overrides ov;
    ov.delay_factor = 4.0;
    ov.seed = 9;
    ov.horizon = 3;
    ov.toggles = {"planner=off"};
    const auto cfg = parse_config(R"({"delay": {"factor": 2}, "seed": 5})", "simulate", ov);
    CHECK(cfg.delay.factor == 4.0);
    CHECK(cfg.seed == 9);
    CHECK(cfg.stream.horizon == 3);
    CHECK(cfg.detector.oracle.horizon == 3);
    CHECK_FALSE(cfg.toggles.planner);
    CHECK(cfg.toggles.buffer);
  }
  SUBCASE("invalid values name their key") {
    auto rejects = [](const std::string& text, const std::string& key, const Overrides& ov = {}) {
      try {
        parse_config(text, "simulate", ov);
        FAIL("accepted: " << text);
      } catch (const ConfigError& e) {
        CHECK_MESSAGE(std::string(e.what()).find(key) != std::string::npos, e.what());
      }
    };
    rejects(R"({"delay": {"factor": 0}})", "delay");
    rejects(R"({"scenario": {"lenght": 10}})", "scenario.lenght");
    rejects(R"({"stream": {"planner": {"stride": "fast"}}})", "stream.planner.stride");
    rejects(R"({"metrics": {"horizons": [0]}})", "metrics.horizons[0]");
    rejects(R"({"metrics": {"delay_factors": [0.5]}})", "metrics.delay_factors[0]");
    rejects(R"({"detector": {"type": "model", "checkpoint": "/nonexistent.json"}})", "detector.checkpoint");
    rejects(R"({"seed": "x"})", "seed");
    rejects("{", "JSON");
    Overrides bad;
    bad.toggles = {"warp=on"};
    rejects("", "toggles.warp", bad);
  }
  SUBCASE("resolved config parses back to itself") {
    const auto cfg = parse_config(R"({"delay": {"kind": "table", "table": [{"backbone": 0.03}]},
                                     "scenario": {"objects": [{"x": 3, "changes": [{"frame": 2, "vx": 1}]}]}})",
                                  "simulate");
    const auto again = parse_config(config_to_json(cfg).dump(), "simulate");
    CHECK(config_to_json(again) == config_to_json(cfg));
    CHECK(config_fingerprint(again) == config_fingerprint(cfg));
  }
  SUBCASE("fingerprint follows scenario, delay and seed") {
    const auto a = parse_config("", "simulate");
    CHECK(config_fingerprint(a) == config_fingerprint(parse_config(R"({"workers": 3})", "simulate")));
    CHECK(config_fingerprint(a) != config_fingerprint(parse_config(R"({"seed": 2})", "simulate")));
    CHECK(config_fingerprint(a) != config_fingerprint(parse_config(R"({"delay": {"jitter": 0.1}})", "simulate")));
  }
  SUBCASE("sweep needs a grid") {
    CHECK_THROWS_AS(parse_config(R"({"metrics": {"delay_factors": [], "horizons": []}})", "sweep"), ConfigError);
  }
  SUBCASE("output directory falls back to the environment") {
    ::setenv(kOutDirEnv, "from_env", 1);
    CHECK(parse_config("", "simulate").out_dir == "from_env");
    CHECK(parse_config(R"({"out_dir": "file"})", "simulate").out_dir == "file");
    ::unsetenv(kOutDirEnv);
    CHECK(parse_config("", "simulate").out_dir == "out");
  }
}

TEST_CASE("tables round-trip") {
  Table t{{"a", "b"}, {{"x", format_number(0.1)}, {"y", format_number(1.0 / 3.0)}}};
  const auto path = kRoot / "t.csv";
  fs::create_directories(kRoot);
  write_csv(t, path.string());
  const auto back = read_csv(path.string());
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(std::stod(back.rows[1][1]) == 1.0 / 3.0);
  CHECK_THROWS_AS(write_csv(Table{{"a,b"}, {}}, path.string()), ContractError);
}

TEST_CASE("simulate") {
  const auto a = kRoot / "sim_a", b = kRoot / "sim_b";
  fs::remove_all(a);
  fs::remove_all(b);
  std::string out;
  REQUIRE(run({"simulate", "--out-dir", a.string()}, &out) == kExitOk);
  REQUIRE(run({"simulate", "--out-dir", b.string()}) == kExitOk);
  CHECK(out.find("sAP=") != std::string::npos);
  const auto ca = dir_contents(a);
  CHECK(ca == dir_contents(b));
  CHECK(ca.count("trace_000.jsonl"));
  CHECK(ca.count("result.json"));
  // The reported value is the pooled streaming evaluation of the same config.
  const auto cfg = parse_config("", "simulate");
  const auto det = make_detector(cfg.detector, cfg.toggles);
  const auto res = Json::parse(ca.at("result.json"));
  CHECK(res.at("ap").get<double>() == run_streaming(cfg, *det, cfg.toggles, 1.0).result.ap());
  CHECK(res.at("fingerprint") == config_fingerprint(cfg));

  SUBCASE("exit codes") {
    std::string err;
    CHECK(run({"simulate", "--delay-factor", "0", "--out-dir", a.string()}, nullptr, &err) == kExitConfig);
    CHECK(err.find("delay") != std::string::npos);
    CHECK(run({"simulate", "--config", (kRoot / "missing.json").string()}) == kExitConfig);
    CHECK(run({"frobnicate"}) == kExitConfig);
    CHECK(run({"simulate", "--toggle", "planner"}) == kExitConfig);
    spit(kRoot / "model.json", R"({"detector": {"type": "model"}})");
    CHECK(run({"simulate", "--config", (kRoot / "model.json").string()}) == kExitConfig);
  }
}

TEST_CASE("train, evaluate, sweep and ablate") {
  const auto dir = kRoot / "model";
  fs::remove_all(dir);
  spit(dir / "train.json", kTrainConfig);
  const std::string cfg = (dir / "train.json").string();
  REQUIRE(run({"train", "--config", cfg, "--out-dir", (dir / "mixed").string()}) == kExitOk);
  REQUIRE(run({"train", "--config", cfg, "--out-dir", (dir / "mixed2").string()}) == kExitOk);
  CHECK(dir_contents(dir / "mixed") == dir_contents(dir / "mixed2"));
  const auto ckpt = (dir / "mixed" / "checkpoint.json").string();
  CHECK_NOTHROW(model::load_checkpoint(ckpt));

  SUBCASE("mixed training samples the documented ranges") {
    const auto log = read_csv((dir / "mixed" / "train_log.csv").string());
    REQUIRE(log.rows.size() == 10);
    auto numbers = [](std::string text) {
      std::replace(text.begin(), text.end(), '|', ' ');
      std::istringstream in(text);
      std::vector<int> v;
      for (int x; in >> x;) v.push_back(x);
      return v;
    };
    std::set<int> futures;
    for (const auto& row : log.rows) {
      for (int p : numbers(row[5])) CHECK((p >= -24 && p <= -1));
      for (int f : numbers(row[6])) {
        CHECK((f >= 1 && f <= 16));
        futures.insert(f);
      }
    }
    CHECK(futures.size() > 1);
  }
  SUBCASE("fixed training keeps the configured future") {
    std::string text = kTrainConfig;
    text.replace(text.find("\"learning_rate\": 0.01"), 21,
                 "\"learning_rate\": 0.01, \"mixed_speed\": false, \"fixed_future\": 3");
    spit(dir / "fixed.json", text);
    REQUIRE(run({"train", "--config", (dir / "fixed.json").string(), "--out-dir", (dir / "fixed").string()}) ==
            kExitOk);
    for (const auto& row : read_csv((dir / "fixed" / "train_log.csv").string()).rows) CHECK(row[6] == "3|3");
  }
  SUBCASE("evaluate and sweep") {
    const std::string base = R"({"detector": {"type": "model", "checkpoint": ")" + ckpt + R"("},
      "scenario": {"length": 48, "size_min": 8, "size_max": 14}, "num_scenarios": 2, "workers": 2,
      "metrics": {"horizons": [2, 4, 8, 16], "delay_factors": [2, 4, 8, 16]}})";
    spit(dir / "eval.json", base);
    REQUIRE(run({"evaluate", "--config", (dir / "eval.json").string(), "--out-dir", (dir / "ev").string()}) ==
            kExitOk);
    CHECK(read_csv((dir / "ev" / "evaluate.csv").string()).rows.size() == 4);
    REQUIRE(run({"sweep", "--config", (dir / "eval.json").string(), "--out-dir", (dir / "sw").string()}) == kExitOk);
    const auto sap = read_csv((dir / "sw" / "series_sap.csv").string());
    CHECK(sap.rows.size() == 4);
    const auto map = read_csv((dir / "sw" / "sweep_map.csv").string());
    CHECK(map.header == std::vector<std::string>{"method", "mAP_2", "mAP_4", "mAP_8", "mAP_16"});
    // Worker count does not change the reports.
    spit(dir / "eval1.json", std::string(base).replace(base.find("\"workers\": 2"), 12, "\"workers\": 1"));
    REQUIRE(run({"sweep", "--config", (dir / "eval1.json").string(), "--out-dir", (dir / "sw1").string()}) ==
            kExitOk);
    auto a = dir_contents(dir / "sw"), b = dir_contents(dir / "sw1");
    a.erase("config.json");
    b.erase("config.json");
    CHECK(a == b);
  }
  SUBCASE("ablate") {
    REQUIRE(run({"train", "--config", cfg, "--out-dir", (dir / "nortpe").string(), "--toggle", "rtpe=off"}) ==
            kExitOk);
    const std::string nortpe = (dir / "nortpe" / "checkpoint.json").string();
    spit(dir / "ablate.json", R"({"detector": {"type": "model", "checkpoint": ")" + ckpt + R"("},
      "ablation_checkpoints": {"rtpe_off": ")" + nortpe + R"("},
      "scenario": {"length": 48, "size_min": 8, "size_max": 14}, "num_scenarios": 2,
      "metrics": {"horizons": [1]}})");
    const std::string acfg = (dir / "ablate.json").string();
    REQUIRE(run({"ablate", "--config", acfg, "--out-dir", (dir / "ab").string()}) == kExitOk);
    const auto st = read_csv((dir / "ab" / "ablate_streaming.csv").string());
    REQUIRE(st.rows.size() == 3);
    CHECK(st.rows[0][0] == "base");
    CHECK(st.rows[2][0] == "buffer_off");
    CHECK(std::stod(st.rows[2][5]) > 0.0);  // recomputation reported
    CHECK(std::stod(st.rows[0][5]) == 0.0);
    const auto off = read_csv((dir / "ab" / "ablate_offline.csv").string());
    REQUIRE(off.rows.size() == 2);
    CHECK(off.rows[1][0] == "rtpe_off");
    // Base row equals simulate on the same config.
    REQUIRE(run({"simulate", "--config", acfg, "--out-dir", (dir / "abs").string()}) == kExitOk);
    const auto sim = read_csv((dir / "abs" / "summary.csv").string());
    CHECK(sim.rows[0][1] == st.rows[0][3]);
    // A checkpoint trained without RTPE cannot be run with it on.
    spit(dir / "bad.json", R"({"detector": {"type": "model", "checkpoint": ")" + nortpe + R"("}})");
    CHECK(run({"evaluate", "--config", (dir / "bad.json").string(), "--out-dir", (dir / "bad").string()}) ==
          kExitConfig);
  }
}

TEST_CASE("gradcheck command") {
  std::string out;
  CHECK(run({"gradcheck", "--out-dir", (kRoot / "gc").string()}, &out) == kExitOk);
  CHECK(read_csv((kRoot / "gc" / "gradcheck.csv").string()).rows.size() == 4);
}
