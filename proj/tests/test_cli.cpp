#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "arccap/container.hpp"
#include "toy_corpus.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args, const std::string& env = "") {
  std::string command =
      env + " \"" + ARCCAP_BIN + "\" " + args + " >/dev/null 2>&1";
  int status = std::system(command.c_str());
  return WEXITSTATUS(status);
}

struct Workspace {
  fs::path dir;

  Workspace() {
    dir = fs::temp_directory_path() /
          ("arccap_cli_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter()++));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }

  static int& counter() {
    static int value = 0;
    return value;
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write_config(const json& extra = json::object()) const {
    json cfg = {
        {"seed", 11},
        {"threads", 2},
        {"paths",
         {{"annotations", path("annotations.json")},
          {"regions", path("regions.json")},
          {"prepared", path("prepared.json")},
          {"captioner", path("captioner.arcc")},
          {"predictions", path("predictions.json")},
          {"report", path("report.json")}}},
        {"model",
         {{"embed_dim", 24},
          {"attn_dim", 24},
          {"layers", 2},
          {"kernel_width", 3},
          {"max_len", 10},
          {"min_count", 1},
          {"steps", 40},
          {"batch_size", 8},
          {"lr", 0.05}}},
        {"arc", {{"epochs", 8}, {"eta0", 0.5}}},
        {"split_ratios", {0.7, 0.1, 0.2}},
    };
    for (const auto& [key, value] : extra.items()) {
      if (cfg.contains(key) && cfg[key].is_object())
        for (const auto& [k2, v2] : value.items()) cfg[key][k2] = v2;
      else
        cfg[key] = value;
    }
    std::ofstream out(path("config.json"));
    out << cfg.dump(2);
  }

  std::string config_flag() const { return "--config " + path("config.json"); }

  std::string slurp(const std::string& name) const {
    std::ifstream in(path(name));
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  }
};

}  // namespace

TEST_CASE("cli: unknown command and flags exit 1") {
  CHECK(run_cli("definitely-not-a-command") == 1);
  CHECK(run_cli("decode --no-such-flag") == 1);
  CHECK(run_cli("") == 1);
}

TEST_CASE("cli: selfcheck passes on a correct build") {
  CHECK(run_cli("selfcheck") == 0);
}

TEST_CASE("cli: missing inputs exit 2") {
  Workspace ws;
  ws.write_config();
  CHECK(run_cli("train-captioner " + ws.config_flag()) == 2);   // no prepared file
  CHECK(run_cli("ingest " + ws.config_flag()) == 2);            // no annotations
  CHECK(run_cli("eval " + ws.config_flag()) == 2);              // no predictions
}

TEST_CASE("cli: full toy pipeline runs end to end") {
  Workspace ws;
  toy_corpus::write(ws.dir, 30, 21);
  ws.write_config(json{{"paths", {{"arc", ws.path("arc.arcc")}}}});

  REQUIRE(run_cli("ingest " + ws.config_flag()) == 0);
  REQUIRE(fs::exists(ws.path("prepared.json")));
  json prep = json::parse(ws.slurp("prepared.json"));
  CHECK(prep["vocab"]["tokens"].size() == 30);

  REQUIRE(run_cli("train-captioner " + ws.config_flag()) == 0);
  auto records = arccap::data::read_container(ws.path("captioner.arcc"));
  const auto& loss = arccap::data::find_record(records, "train/loss");
  REQUIRE(loss.values.size() == 40);
  CHECK(loss.values.back() < loss.values.front());

  REQUIRE(run_cli("train-arc " + ws.config_flag()) == 0);
  REQUIRE(fs::exists(ws.path("arc.arcc")));

  REQUIRE(run_cli("decode --beam 2 " + ws.config_flag()) == 0);
  auto preds = json::parse(ws.slurp("predictions.json"));
  REQUIRE(preds.is_array());
  CHECK(preds.size() == 6);  // 30 images, test ratio 0.2
  for (const auto& p : preds) {
    CHECK(p.contains("image_id"));
    CHECK(p.contains("caption"));
  }

  REQUIRE(run_cli("eval " + ws.config_flag()) == 0);
  json report = json::parse(ws.slurp("report.json"));
  for (const char* key : {"B1", "B2", "B3", "B4", "M", "R", "C", "S"})
    REQUIRE(report.contains(key));
  CHECK(report["M"].is_null());
  CHECK(report["S"].is_null());
  CHECK(report["B1"].get<double>() >= 0.0);
  CHECK(report["B1"].get<double>() <= 1.0);

  SECTION("decode is byte-deterministic") {
    std::string first = ws.slurp("predictions.json");
    REQUIRE(run_cli("decode --beam 2 " + ws.config_flag()) == 0);
    CHECK(ws.slurp("predictions.json") == first);
  }

  SECTION("worker count never changes decode output") {
    std::string first = ws.slurp("predictions.json");  // config ran with 2 threads
    REQUIRE(run_cli("decode --beam 2 --threads 1 " + ws.config_flag()) == 0);
    CHECK(ws.slurp("predictions.json") == first);
  }
}

TEST_CASE("cli: referential problems in inputs exit 2") {
  Workspace ws;
  toy_corpus::write(ws.dir, 6, 9);
  ws.write_config();

  SECTION("image without regions") {
    json regions = json::parse(ws.slurp("regions.json"));
    regions.erase(regions.begin());
    std::ofstream(ws.path("regions.json")) << regions.dump();
    CHECK(run_cli("ingest " + ws.config_flag()) == 2);
    CHECK(!fs::exists(ws.path("prepared.json")));
  }

  SECTION("prediction for an unknown image") {
    REQUIRE(run_cli("ingest " + ws.config_flag()) == 0);
    std::ofstream(ws.path("predictions.json"))
        << R"([{"image_id": 424242, "caption": "a cat"}])";
    CHECK(run_cli("eval " + ws.config_flag()) == 2);
  }
}

TEST_CASE("cli: log level env var is accepted") {
  Workspace ws;
  toy_corpus::write(ws.dir, 6, 9);
  ws.write_config();
  CHECK(run_cli("ingest " + ws.config_flag(), "ARCCAP_LOG=debug") == 0);
}

TEST_CASE("cli: convergence failure exits 3") {
  Workspace ws;
  toy_corpus::write(ws.dir, 8, 5);
  // One double-oracle iteration cannot close the regret on a mixed game.
  ws.write_config(json{{"paths", {{"arc", ws.path("arc.arcc")}}},
                       {"arc", {{"max_iter", 1}}}});
  REQUIRE(run_cli("ingest " + ws.config_flag()) == 0);
  CHECK(run_cli("train-arc " + ws.config_flag()) == 3);
  CHECK(!fs::exists(ws.path("arc.arcc")));  // outputs only on success
}

TEST_CASE("cli: eval on predictions equal to references reports identity scores") {
  Workspace ws;
  toy_corpus::write(ws.dir, 12, 33);
  ws.write_config();
  REQUIRE(run_cli("ingest " + ws.config_flag()) == 0);

  json prep = json::parse(ws.slurp("prepared.json"));
  json preds = json::array();
  for (const auto& image : prep["images"])
    preds.push_back({{"image_id", image["id"]},
                     {"caption", image["captions"][0]["text"]}});
  {
    std::ofstream out(ws.path("predictions.json"));
    out << preds.dump(2);
  }
  REQUIRE(run_cli("eval " + ws.config_flag()) == 0);
  json report = json::parse(ws.slurp("report.json"));
  CHECK(report["B1"].get<double>() == Catch::Approx(1.0).margin(1e-9));
  CHECK(report["R"].get<double>() == Catch::Approx(1.0).margin(1e-9));
}
