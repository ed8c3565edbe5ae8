// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exits non-zero if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "arccap/arcgame.hpp"
#include "arccap/container.hpp"
#include "arccap/convcap.hpp"
#include "arccap/data.hpp"
#include "arccap/decode.hpp"
#include "arccap/graphcut.hpp"
#include "arccap/metrics.hpp"
#include "arccap/pipeline.hpp"
#include "toy_corpus.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace arccap;

namespace {

int g_failures = 0;

void report(const std::string& name, bool passed, const std::string& detail) {
  std::printf("%s %-18s %s\n", passed ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!passed) ++g_failures;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return std::string(buf);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

int run_cli(const std::string& args, const fs::path& log) {
  std::string command = std::string("\"") + ARCCAP_BIN + "\" " + args + " >>\"" +
                        log.string() + "\" 2>&1";
  return WEXITSTATUS(std::system(command.c_str()));
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// --- criterion 1: cut oracle ------------------------------------------------

double enum_energy(const graphcut::BinaryEnergy& e, unsigned mask) {
  double total = 0.0;
  for (int i = 0; i < e.n; ++i)
    if (mask & (1u << i)) total += e.unary[i];
  for (const auto& p : e.pairwise) {
    bool yi = mask & (1u << p.i);
    bool yj = mask & (1u << p.j);
    if (yi != yj) total += p.weight;
  }
  return total;
}

graphcut::BinaryEnergy random_energy(Rng& rng, int n) {
  graphcut::BinaryEnergy e;
  e.n = n;
  for (int i = 0; i < n; ++i) e.unary.push_back(rng.uniform(-2.0, 2.0));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.next_double() < 0.5) e.pairwise.push_back({i, j, rng.uniform(0.0, 1.0)});
  return e;
}

void criterion_cut_oracle() {
  auto start = std::chrono::steady_clock::now();
  Rng rng(20240001);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng.next_below(11));  // up to 12
    graphcut::BinaryEnergy e = random_energy(rng, n);
    double best = enum_energy(e, 0);
    for (unsigned mask = 1; mask < (1u << n); ++mask)
      best = std::min(best, enum_energy(e, mask));
    graphcut::EnergyMinimum m = graphcut::minimize_energy(e);
    if (m.value != best) {
      report("cut-oracle", false,
             "instance " + std::to_string(trial) + ": " + std::to_string(m.value) +
                 " != " + std::to_string(best));
      return;
    }
  }
  double elapsed = seconds_since(start);
  report("cut-oracle", elapsed < 30.0,
         "200/200 instances exact in " + std::to_string(elapsed) + "s (< 30s)");
}

// --- criterion 2: game oracle -----------------------------------------------

void criterion_game_oracle() {
  auto start = std::chrono::steady_clock::now();
  Rng rng(20240002);
  double worst_dv = 0.0, worst_regret = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    int n = 1 + static_cast<int>(rng.next_below(4));  // up to 4
    graphcut::BinaryEnergy e = random_energy(rng, n);

    std::vector<graphcut::Labeling> ys;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      graphcut::Labeling y(n, 0);
      for (int i = 0; i < n; ++i)
        if (mask & (1u << i)) y[i] = 1;
      ys.push_back(y);
    }
    std::vector<std::vector<double>> payoff(ys.size(), std::vector<double>(ys.size()));
    for (std::size_t r = 0; r < ys.size(); ++r)
      for (std::size_t c = 0; c < ys.size(); ++c)
        payoff[r][c] =
            arcgame::hamming(ys[c], ys[r]) - enum_energy(e, static_cast<unsigned>(r));
    double full_value = arcgame::solve_matrix_game(payoff, 1e-9).value;

    arcgame::GameResult g = arcgame::double_oracle(e, 1e-6, 200);
    worst_dv = std::max(worst_dv, std::abs(g.value - full_value));
    worst_regret = std::max(worst_regret, g.regret);
    if (std::abs(g.value - full_value) > 1e-6 || g.regret > 1e-6) {
      report("game-oracle", false,
             "instance " + std::to_string(trial) + ": |dv| " +
                 sci(std::abs(g.value - full_value)) + ", regret " + sci(g.regret));
      return;
    }
  }
  double elapsed = seconds_since(start);
  report("game-oracle", elapsed < 60.0,
         "50/50 within 1e-6 (max |dv| " + sci(worst_dv) + ", max regret " +
             sci(worst_regret) + ") in " + std::to_string(elapsed) + "s (< 60s)");
}

// --- criterion 3: gradient check ---------------------------------------------

void criterion_grad_check() {
  auto start = std::chrono::steady_clock::now();
  convcap::ModelConfig cfg;
  cfg.vocab_size = 9;
  cfg.embed_dim = 8;
  cfg.feature_dim = 5;
  cfg.attn_dim = 8;
  cfg.layers = 3;
  cfg.kernel_width = 3;
  cfg.max_len = 8;
  cfg.seed = 20240003;
  convcap::ModelParams params = convcap::init_params(cfg);
  // inflate from the tiny init so every path's gradient is visible
  for (convcap::TensorView& view : convcap::tensor_views(params))
    for (std::size_t i = 0; i < view.size; ++i) view.data[i] *= 8.0;

  Rng rng(20240004);
  std::vector<convcap::TrainExample> batch;
  for (int i = 0; i < 2; ++i) {
    convcap::TrainExample ex;
    ex.image.cells = convcap::Mat(3, 5);
    for (double& v : ex.image.cells.a) v = rng.uniform(-1.0, 1.0);
    ex.image.global_vec.assign(5, 0.0);
    for (int g = 0; g < 3; ++g)
      for (int f = 0; f < 5; ++f) ex.image.global_vec[f] += ex.image.cells(g, f) / 3.0;
    ex.tokens = {1, 4, 7, 5, 8, 2};
    batch.push_back(ex);
  }
  double err = convcap::grad_check(params, batch, 1e-5, 400, 20240005);
  double elapsed = seconds_since(start);
  report("grad-check", err < 1e-4 && elapsed < 60.0,
         "3-layer model, max relative error " + sci(err) + " (< 1e-4) in " +
             std::to_string(elapsed) + "s (< 60s)");
}

// --- criterion 4: decoder oracle ---------------------------------------------

decode::Scorer make_scorer(std::uint64_t seed, int vocab) {
  return [seed, vocab](const std::vector<int>& prefix) {
    std::uint64_t h = seed;
    for (int t : prefix) h = h * 1000003ULL + static_cast<std::uint64_t>(t) + 1;
    Rng rng(h);
    std::vector<double> logits(vocab);
    for (double& v : logits) v = rng.uniform(-3.0, 3.0);
    double max_z = *std::max_element(logits.begin(), logits.end());
    double lse = 0.0;
    for (double v : logits) lse += std::exp(v - max_z);
    lse = max_z + std::log(lse);
    for (double& v : logits) v -= lse;
    return logits;
  };
}

struct BeamBest {
  std::vector<int> tokens;
  double score = -1e300;
};

void beam_enumerate(const decode::Scorer& scorer, int vocab, int max_len,
                    std::vector<int>& tokens, double score, BeamBest& best) {
  std::vector<int> prefix{1};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  std::vector<double> row = scorer(prefix);
  for (int w = 0; w < vocab; ++w) {
    tokens.push_back(w);
    double s = score + row[w];
    if (w == 0 || static_cast<int>(tokens.size()) == max_len) {
      if (s > best.score) best = {tokens, s};
    } else {
      beam_enumerate(scorer, vocab, max_len, tokens, s, best);
    }
    tokens.pop_back();
  }
}

void criterion_decoder_oracle() {
  for (int trial = 0; trial < 50; ++trial) {
    int vocab = 3 + trial % 3;     // up to 5
    int max_len = 2 + trial % 3;   // up to 4
    decode::Scorer scorer = make_scorer(20240100 + trial, vocab);

    decode::DecodeConfig cfg;
    cfg.max_len = max_len;
    cfg.beam_size = 1;
    for (int i = 0; i < max_len; ++i) cfg.beam_size *= vocab;
    std::vector<decode::Hypothesis> ranked = decode::beam_search(scorer, cfg, 1, 0, vocab);

    BeamBest best;
    std::vector<int> tokens;
    beam_enumerate(scorer, vocab, max_len, tokens, 0.0, best);
    if (ranked.empty() || ranked[0].tokens != best.tokens) {
      report("decoder-oracle", false, "scorer " + std::to_string(trial) + ": beam != oracle");
      return;
    }

    decode::DecodeConfig greedy_cfg;
    greedy_cfg.beam_size = 1;
    greedy_cfg.max_len = max_len;
    std::vector<decode::Hypothesis> beam1 =
        decode::beam_search(scorer, greedy_cfg, 1, 0, vocab);
    std::vector<int> greedy;
    for (int step = 0; step < max_len; ++step) {
      std::vector<int> prefix{1};
      prefix.insert(prefix.end(), greedy.begin(), greedy.end());
      std::vector<double> row = scorer(prefix);
      int arg = 0;
      for (int w = 1; w < vocab; ++w)
        if (row[w] > row[arg]) arg = w;
      greedy.push_back(arg);
      if (arg == 0) break;
    }
    if (beam1.size() != 1 || beam1[0].tokens != greedy) {
      report("decoder-oracle", false, "scorer " + std::to_string(trial) + ": beam1 != greedy");
      return;
    }
  }
  report("decoder-oracle", true, "50/50 scorers: unpruned beam exact, beam-1 greedy");
}

// --- criterion 5: metric identity suite --------------------------------------

void criterion_metric_identity() {
  metrics::RefCorpus refs = metrics::RefCorpus::build({
      {1, {"a red cat sits quietly"}},
      {2, {"big blue dogs run fast"}},
  });
  metrics::Candidates cands{{1, "a red cat sits quietly"}, {2, "big blue dogs run fast"}};
  metrics::MetricReport identity = metrics::evaluate_all(cands, refs);
  bool ok = std::abs(identity.b1 - 1.0) <= 1e-9 && std::abs(identity.b2 - 1.0) <= 1e-9 &&
            std::abs(identity.b3 - 1.0) <= 1e-9 && std::abs(identity.b4 - 1.0) <= 1e-9 &&
            std::abs(identity.rouge_l - 1.0) <= 1e-9 &&
            std::abs(identity.cider - 10.0) <= 1e-9;

  metrics::RefCorpus bleu_refs = metrics::RefCorpus::build({{1, {"the cat sat on the mat"}}});
  double b1 = metrics::bleu({{1, "the cat sat on mat"}}, bleu_refs, 1);
  bool bleu_ok = std::abs(b1 - 0.8187) <= 1e-4;

  metrics::RefCorpus rouge_refs = metrics::RefCorpus::build({{1, {"a c"}}});
  double rl = metrics::rouge_l({{1, "a b c"}}, rouge_refs);
  bool rouge_ok = std::abs(rl - 0.8299) <= 1e-4;

  report("metric-identity", ok && bleu_ok && rouge_ok,
         "identity B/R/C exact, hand BLEU-1 " + std::to_string(b1) + ", hand ROUGE-L " +
             std::to_string(rl));
}

// --- criteria 6, 7, 9: CLI pipeline on the synthetic corpus -------------------

struct PipelineArtifacts {
  fs::path dir;
  fs::path log;
  fs::path config_cnn;
  fs::path config_arc;
  bool ok = false;
  double train_loss_final = 0.0;
  double elapsed = 0.0;
  json report_cnn;
  json report_arc;
};

json pipeline_config(const fs::path& dir, const toy_corpus::Paths& corpus, bool with_arc) {
  std::string suffix = with_arc ? "_arc" : "_cnn";
  json cfg = {
      {"seed", 7},
      {"threads", 2},
      {"paths",
       {{"annotations", corpus.annotations.string()},
        {"regions", corpus.regions.string()},
        {"prepared", (dir / "prepared.json").string()},
        {"captioner", (dir / "captioner.arcc").string()},
        {"predictions", (dir / ("predictions" + suffix + ".json")).string()},
        {"report", (dir / ("report" + suffix + ".json")).string()}}},
      {"model",
       {{"embed_dim", 64},
        {"attn_dim", 64},
        {"layers", 3},
        {"kernel_width", 5},
        {"max_len", 16},
        {"min_count", 5},
        {"steps", 500},
        {"batch_size", 8},
        {"lr", 0.05}}},
      {"decode", {{"beam_size", 2}, {"fusion_lambda", 0.3}}},
      {"arc", {{"epochs", 30}, {"eta0", 0.5}}},
  };
  if (with_arc) cfg["paths"]["arc"] = (dir / "arc.arcc").string();
  return cfg;
}

PipelineArtifacts run_pipeline(const fs::path& dir, int num_images) {
  PipelineArtifacts artifacts;
  artifacts.dir = dir;
  artifacts.log = dir / "cli.log";
  fs::create_directories(dir);
  toy_corpus::Paths corpus = toy_corpus::write(dir, num_images, 20240777);

  artifacts.config_cnn = dir / "config_cnn.json";
  artifacts.config_arc = dir / "config_arc.json";
  {
    std::ofstream out(artifacts.config_cnn);
    out << pipeline_config(dir, corpus, false).dump(2);
  }
  {
    std::ofstream out(artifacts.config_arc);
    out << pipeline_config(dir, corpus, true).dump(2);
  }

  auto start = std::chrono::steady_clock::now();
  std::string arc_cfg = " --config " + artifacts.config_arc.string();
  if (run_cli("ingest" + arc_cfg, artifacts.log) != 0) return artifacts;
  if (run_cli("train-captioner" + arc_cfg, artifacts.log) != 0) return artifacts;
  if (run_cli("train-arc" + arc_cfg, artifacts.log) != 0) return artifacts;
  if (run_cli("decode --beam 2" + arc_cfg, artifacts.log) != 0) return artifacts;
  if (run_cli("eval" + arc_cfg, artifacts.log) != 0) return artifacts;
  artifacts.elapsed = seconds_since(start);

  std::string cnn_cfg = " --config " + artifacts.config_cnn.string();
  if (run_cli("decode --beam 2" + cnn_cfg, artifacts.log) != 0) return artifacts;
  if (run_cli("eval" + cnn_cfg, artifacts.log) != 0) return artifacts;

  auto records = data::read_container(dir / "captioner.arcc");
  const data::TensorRecord& loss = data::find_record(records, "train/loss");
  if (loss.values.empty()) return artifacts;
  artifacts.train_loss_final = loss.values.back();

  artifacts.report_cnn = json::parse(slurp(dir / "report_cnn.json"), nullptr, false);
  artifacts.report_arc = json::parse(slurp(dir / "report_arc.json"), nullptr, false);
  artifacts.ok = !artifacts.report_cnn.is_discarded() && !artifacts.report_arc.is_discarded();
  return artifacts;
}

// Field order is a property of the serialized document, so check the raw
// bytes, not a re-dumped parse.
bool report_schema_valid(const std::string& raw) {
  json report = json::parse(raw, nullptr, false);
  if (report.is_discarded() || !report.is_object() || report.size() != 8) return false;
  const char* keys[] = {"B1", "B2", "B3", "B4", "M", "R", "C", "S"};
  std::size_t last = 0;
  for (const char* key : keys) {
    std::size_t pos = raw.find(std::string("\"") + key + "\"");
    if (pos == std::string::npos || pos < last) return false;
    last = pos;
  }
  return report["M"].is_null() && report["S"].is_null();
}

void criterion_e2e(const PipelineArtifacts& artifacts) {
  if (!artifacts.ok) {
    report("e2e-toy", false, "pipeline failed; see " + artifacts.log.string());
    return;
  }
  double ln_v = std::log(30.0);
  bool loss_ok = artifacts.train_loss_final < ln_v;
  bool time_ok = artifacts.elapsed < 300.0;
  report("e2e-toy", loss_ok && time_ok,
         "500-step CE " + std::to_string(artifacts.train_loss_final) + " (< ln 30 = " +
             std::to_string(ln_v) + "), pipeline " + std::to_string(artifacts.elapsed) +
             "s (< 300s)");
  if (artifacts.ok) {
    auto fmt = [](const json& r, const char* k) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.3f", r[k].get<double>());
      return std::string(buf);
    };
    std::printf("     side-by-side     B1      B2      B3      B4      M       R       C       S\n");
    for (const auto& [name, rep] :
         {std::pair<const char*, const json*>{"CNN    ", &artifacts.report_cnn},
          std::pair<const char*, const json*>{"CNN+ARC", &artifacts.report_arc}}) {
      std::printf("     %s          %s   %s   %s   %s   -       %s   %s   -\n", name,
                  fmt(*rep, "B1").c_str(), fmt(*rep, "B2").c_str(), fmt(*rep, "B3").c_str(),
                  fmt(*rep, "B4").c_str(), fmt(*rep, "R").c_str(), fmt(*rep, "C").c_str());
    }
    std::fflush(stdout);
  }
}

void criterion_beam_protocol(const PipelineArtifacts& artifacts) {
  if (!artifacts.ok) {
    report("beam-protocol", false, "pipeline unavailable");
    return;
  }
  std::string arc_cfg = " --config " + artifacts.config_arc.string();
  bool ok = true;
  std::string detail;
  for (int beam : {2, 4}) {
    if (run_cli("decode --beam " + std::to_string(beam) + arc_cfg, artifacts.log) != 0 ||
        run_cli("eval" + arc_cfg, artifacts.log) != 0) {
      ok = false;
      detail = "beam " + std::to_string(beam) + " run failed";
      break;
    }
    if (!report_schema_valid(slurp(artifacts.dir / "report_arc.json"))) {
      ok = false;
      detail = "beam " + std::to_string(beam) + " report schema invalid";
      break;
    }
  }
  if (ok) detail = "beam 2 and beam 4 end-to-end, schema B1,B2,B3,B4,M,R,C,S with null M,S";
  report("beam-protocol", ok, detail);
}

void criterion_determinism(const PipelineArtifacts& first) {
  if (!first.ok) {
    report("determinism", false, "pipeline unavailable");
    return;
  }
  fs::path dir2 = first.dir.parent_path() / (first.dir.filename().string() + "_repeat");
  PipelineArtifacts second = run_pipeline(dir2, 200);
  if (!second.ok) {
    report("determinism", false, "repeat pipeline failed; see " + second.log.string());
    return;
  }
  // The first pipeline re-decoded at beam 4 afterwards, so re-run its beam-2
  // decode+eval to restore the canonical artifacts before comparing.
  std::string arc_cfg = " --config " + first.config_arc.string();
  if (run_cli("decode --beam 2" + arc_cfg, first.log) != 0 ||
      run_cli("eval" + arc_cfg, first.log) != 0) {
    report("determinism", false, "restore decode failed");
    return;
  }
  struct Pair {
    const char* name;
    const char* file;
  };
  for (Pair p : {Pair{"prepared", "prepared.json"}, Pair{"captioner", "captioner.arcc"},
                 Pair{"arc", "arc.arcc"}, Pair{"predictions", "predictions_arc.json"},
                 Pair{"report", "report_arc.json"}}) {
    if (slurp(first.dir / p.file) != slurp(second.dir / p.file)) {
      report("determinism", false, std::string(p.name) + " differs between same-seed runs");
      return;
    }
  }
  report("determinism", true,
         "same-seed runs byte-identical: prepared, checkpoints, predictions, report");
}

// --- criterion 8: split check -------------------------------------------------

void criterion_split_check() {
  // Mocked index with the published split sizes 113287/5000/5000.
  const int total = 113287 + 5000 + 5000;
  std::vector<std::int64_t> ids(total);
  for (int i = 0; i < total; ++i) ids[i] = 100000 + i;
  Rng rng(20240008);
  rng.shuffle(ids);

  json doc;
  doc["train"] = json::array();
  doc["val"] = json::array();
  doc["test"] = json::array();
  for (int i = 0; i < 113287; ++i) doc["train"].push_back(ids[i]);
  for (int i = 0; i < 5000; ++i) doc["val"].push_back(ids[113287 + i]);
  for (int i = 0; i < 5000; ++i) doc["test"].push_back(ids[118287 + i]);

  data::SplitSpec split = data::split_from_document(doc, ids);
  bool ok = split.train.size() == 113287 && split.val.size() == 5000 &&
            split.test.size() == 5000;
  report("split-check", ok,
         "sizes " + std::to_string(split.train.size()) + "/" +
             std::to_string(split.val.size()) + "/" + std::to_string(split.test.size()) +
             " (expect 113287/5000/5000)");
}

}  // namespace

int main() {
  std::printf("arccap acceptance suite\n");
  criterion_cut_oracle();
  criterion_game_oracle();
  criterion_grad_check();
  criterion_decoder_oracle();
  criterion_metric_identity();

  fs::path base = fs::temp_directory_path() / ("arccap_accept_" + std::to_string(::getpid()));
  PipelineArtifacts artifacts = run_pipeline(base / "run", 200);
  criterion_e2e(artifacts);
  criterion_beam_protocol(artifacts);
  criterion_split_check();
  criterion_determinism(artifacts);

  std::error_code ec;
  fs::remove_all(base, ec);

  if (g_failures > 0) {
    std::printf("%d criterion(s) FAILED\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
