#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "arccap/arcgame.hpp"
#include "arccap/common.hpp"
#include "arccap/container.hpp"
#include "arccap/convcap.hpp"
#include "arccap/data.hpp"
#include "arccap/decode.hpp"
#include "arccap/graphcut.hpp"
#include "arccap/metrics.hpp"
#include "arccap/region_graph.hpp"
#include "arccap/text.hpp"

namespace arccap::pipeline {

using data::json;
using data::ordered_json;

struct PathsConfig {
  std::string annotations;
  std::string regions;
  std::string split;  // optional explicit split document
  std::string prepared = "prepared.json";
  std::string captioner = "captioner.arcc";
  std::string arc;  // optional; enables marginal fusion when set
  std::string predictions = "predictions.json";
  std::string report = "report.json";
};

struct ModelSection {
  int embed_dim = 64;
  int attn_dim = 64;
  int layers = 3;
  int kernel_width = 5;
  int max_len = 16;
  double dropout = 0.0;
  int min_count = 5;
  bool weight_norm = true;
  bool residual = true;
  bool attention = true;
  int steps = 500;
  int batch_size = 8;
  double lr = 0.05;
  double clip_norm = 5.0;
};

struct DecodeSection {
  int beam_size = 2;
  double fusion_lambda = 0.3;
  double fusion_epsilon = 1e-6;
  std::string split = "test";
};

struct ArcSection {
  double tol = 1e-6;
  int max_iter = 200;
  double eta0 = 0.1;
  int epochs = 50;
};

struct RunConfig {
  PathsConfig paths;
  ModelSection model;
  DecodeSection decode_cfg;
  ArcSection arc;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = available cores

  void validate() const {
    if (decode_cfg.beam_size < 1) throw ValidationError("config: beam_size must be >= 1");
    if (!(arc.tol > 0.0)) throw ValidationError("config: arc.tol must be positive");
    if (!(decode_cfg.fusion_epsilon > 0.0))
      throw ValidationError("config: fusion_epsilon must be positive");
    if (model.steps < 0 || model.batch_size < 1)
      throw ValidationError("config: steps/batch_size invalid");
    if (model.min_count < 1) throw ValidationError("config: min_count must be >= 1");
    if (decode_cfg.split != "train" && decode_cfg.split != "val" &&
        decode_cfg.split != "test")
      throw ValidationError("config: decode split must be train, val or test");
  }
};

namespace detail {

template <typename T>
void read_scalar(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw SchemaError(std::string("config: ") + key + " must be a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw SchemaError(std::string("config: ") + key + " must be a boolean");
    out = v.get<bool>();
  } else {
    if (!v.is_number()) throw SchemaError(std::string("config: ") + key + " must be a number");
    out = v.get<T>();
  }
}

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (key == k) ok = true;
    if (!ok) throw SchemaError("config: unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

inline RunConfig config_from_json(const json& doc) {
  RunConfig cfg;
  detail::check_keys(doc, {"paths", "model", "decode", "arc", "split_ratios", "seed", "threads"},
                     "$");
  if (doc.contains("paths")) {
    const json& p = doc.at("paths");
    detail::check_keys(p,
                       {"annotations", "regions", "split", "prepared", "captioner", "arc",
                        "predictions", "report"},
                       "paths");
    detail::read_scalar(p, "annotations", cfg.paths.annotations);
    detail::read_scalar(p, "regions", cfg.paths.regions);
    detail::read_scalar(p, "split", cfg.paths.split);
    detail::read_scalar(p, "prepared", cfg.paths.prepared);
    detail::read_scalar(p, "captioner", cfg.paths.captioner);
    detail::read_scalar(p, "arc", cfg.paths.arc);
    detail::read_scalar(p, "predictions", cfg.paths.predictions);
    detail::read_scalar(p, "report", cfg.paths.report);
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    detail::check_keys(m,
                       {"embed_dim", "attn_dim", "layers", "kernel_width", "max_len",
                        "dropout", "min_count", "weight_norm", "residual", "attention",
                        "steps", "batch_size", "lr", "clip_norm"},
                       "model");
    detail::read_scalar(m, "embed_dim", cfg.model.embed_dim);
    detail::read_scalar(m, "attn_dim", cfg.model.attn_dim);
    detail::read_scalar(m, "layers", cfg.model.layers);
    detail::read_scalar(m, "kernel_width", cfg.model.kernel_width);
    detail::read_scalar(m, "max_len", cfg.model.max_len);
    detail::read_scalar(m, "dropout", cfg.model.dropout);
    detail::read_scalar(m, "min_count", cfg.model.min_count);
    detail::read_scalar(m, "weight_norm", cfg.model.weight_norm);
    detail::read_scalar(m, "residual", cfg.model.residual);
    detail::read_scalar(m, "attention", cfg.model.attention);
    detail::read_scalar(m, "steps", cfg.model.steps);
    detail::read_scalar(m, "batch_size", cfg.model.batch_size);
    detail::read_scalar(m, "lr", cfg.model.lr);
    detail::read_scalar(m, "clip_norm", cfg.model.clip_norm);
  }
  if (doc.contains("decode")) {
    const json& d = doc.at("decode");
    detail::check_keys(d, {"beam_size", "fusion_lambda", "fusion_epsilon", "split"}, "decode");
    detail::read_scalar(d, "beam_size", cfg.decode_cfg.beam_size);
    detail::read_scalar(d, "fusion_lambda", cfg.decode_cfg.fusion_lambda);
    detail::read_scalar(d, "fusion_epsilon", cfg.decode_cfg.fusion_epsilon);
    detail::read_scalar(d, "split", cfg.decode_cfg.split);
  }
  if (doc.contains("arc")) {
    const json& a = doc.at("arc");
    detail::check_keys(a, {"tol", "max_iter", "eta0", "epochs"}, "arc");
    detail::read_scalar(a, "tol", cfg.arc.tol);
    detail::read_scalar(a, "max_iter", cfg.arc.max_iter);
    detail::read_scalar(a, "eta0", cfg.arc.eta0);
    detail::read_scalar(a, "epochs", cfg.arc.epochs);
  }
  if (doc.contains("split_ratios")) {
    const json& r = doc.at("split_ratios");
    if (!r.is_array() || r.size() != 3)
      throw SchemaError("config: split_ratios must be an array of 3 numbers");
    for (int i = 0; i < 3; ++i) cfg.split_ratios[i] = r[i].get<double>();
  }
  detail::read_scalar(doc, "seed", cfg.seed);
  detail::read_scalar(doc, "threads", cfg.threads);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  json doc = json::parse(data::read_file(path), nullptr, false);
  if (doc.is_discarded()) throw FormatError("config: invalid JSON in " + path);
  return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Prepared dataset: the self-contained output of `ingest`.

struct PreparedImage {
  std::int64_t id = 0;
  std::string file_name;
  std::vector<data::CaptionRecord> captions;
  std::vector<data::Region> regions;
};

struct Prepared {
  data::Vocab vocab;
  data::SplitSpec split;
  std::vector<PreparedImage> images;  // ascending id
  int feature_dim = 0;

  const PreparedImage& image(std::int64_t id) const {
    auto it = std::lower_bound(
        images.begin(), images.end(), id,
        [](const PreparedImage& img, std::int64_t v) { return img.id < v; });
    if (it == images.end() || it->id != id)
      throw ReferentialError("prepared: unknown image id " + std::to_string(id));
    return *it;
  }

  const std::vector<std::int64_t>& split_ids(const std::string& name) const {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    throw ValidationError("prepared: unknown split '" + name + "'");
  }
};

inline convcap::ImageFeatures image_features(const PreparedImage& img) {
  convcap::ImageFeatures feats;
  const int g = static_cast<int>(img.regions.size());
  const int f = static_cast<int>(img.regions.at(0).features.size());
  feats.cells = convcap::Mat(g, f);
  feats.global_vec.assign(f, 0.0);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < f; ++c) {
      feats.cells(r, c) = img.regions[r].features[c];
      feats.global_vec[c] += img.regions[r].features[c] / g;
    }
  return feats;
}

inline ordered_json prepared_to_json(const Prepared& prep) {
  ordered_json doc;
  doc["vocab"] = {{"min_count", prep.vocab.min_count},
                  {"tokens", prep.vocab.id_to_token}};
  doc["split"] = {{"train", prep.split.train}, {"val", prep.split.val},
                  {"test", prep.split.test}};
  ordered_json images = ordered_json::array();
  for (const PreparedImage& img : prep.images) {
    ordered_json captions = ordered_json::array();
    for (const data::CaptionRecord& cap : img.captions)
      captions.push_back({{"id", cap.ann_id}, {"text", cap.text}});
    ordered_json regions = ordered_json::array();
    for (const data::Region& region : img.regions) {
      ordered_json rj = {{"box", region.box}, {"features", region.features}};
      if (!region.tag.empty()) rj["tag"] = region.tag;
      regions.push_back(rj);
    }
    images.push_back({{"id", img.id},
                      {"file_name", img.file_name},
                      {"captions", captions},
                      {"regions", regions}});
  }
  doc["images"] = images;
  return doc;
}

inline Prepared prepared_from_json(const json& doc) {
  Prepared prep;
  const json& v = data::detail::require_field(doc, "vocab", "$");
  prep.vocab.min_count = data::detail::require_int(v, "min_count", "$.vocab");
  const json& tokens = data::detail::require_field(v, "tokens", "$.vocab");
  if (!tokens.is_array() || tokens.size() < 4)
    throw SchemaError("prepared: vocab.tokens must list at least the specials");
  for (const json& t : tokens) prep.vocab.id_to_token.push_back(t.get<std::string>());
  for (std::size_t i = 0; i < prep.vocab.id_to_token.size(); ++i)
    prep.vocab.token_to_id[prep.vocab.id_to_token[i]] = static_cast<int>(i);

  const json& split = data::detail::require_field(doc, "split", "$");
  for (const json& id : data::detail::require_field(split, "train", "$.split"))
    prep.split.train.push_back(id.get<std::int64_t>());
  for (const json& id : data::detail::require_field(split, "val", "$.split"))
    prep.split.val.push_back(id.get<std::int64_t>());
  for (const json& id : data::detail::require_field(split, "test", "$.split"))
    prep.split.test.push_back(id.get<std::int64_t>());

  const json& images = data::detail::require_field(doc, "images", "$");
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::string path = "$.images[" + std::to_string(i) + "]";
    const json& ij = images[i];
    PreparedImage img;
    img.id = data::detail::require_int(ij, "id", path);
    img.file_name = data::detail::require_string(ij, "file_name", path);
    for (const json& cj : data::detail::require_field(ij, "captions", path)) {
      data::CaptionRecord rec;
      rec.ann_id = data::detail::require_int(cj, "id", path + ".captions[]");
      rec.text = data::detail::require_string(cj, "text", path + ".captions[]");
      img.captions.push_back(std::move(rec));
    }
    for (const json& rj : data::detail::require_field(ij, "regions", path)) {
      data::Region region;
      const json& box = data::detail::require_field(rj, "box", path + ".regions[]");
      for (int b = 0; b < 4; ++b) region.box[b] = box.at(b).get<double>();
      for (const json& f : data::detail::require_field(rj, "features", path + ".regions[]"))
        region.features.push_back(f.get<double>());
      if (rj.contains("tag")) region.tag = rj.at("tag").get<std::string>();
      img.regions.push_back(std::move(region));
    }
    prep.images.push_back(std::move(img));
  }
  std::sort(prep.images.begin(), prep.images.end(),
            [](const PreparedImage& a, const PreparedImage& b) { return a.id < b.id; });
  if (!prep.images.empty()) {
    if (prep.images[0].regions.empty())
      throw ValidationError("prepared: image without regions");
    prep.feature_dim = static_cast<int>(prep.images[0].regions[0].features.size());
  }
  return prep;
}

inline Prepared load_prepared(const std::string& path) {
  json doc = json::parse(data::read_file(path), nullptr, false);
  if (doc.is_discarded()) throw FormatError("prepared: invalid JSON in " + path);
  return prepared_from_json(doc);
}

// ---------------------------------------------------------------------------
// Captioner and ARC checkpoints in the ARCC container.

inline std::vector<data::TensorRecord> captioner_records(convcap::ModelParams& params,
                                                         const std::vector<double>& loss_curve) {
  const convcap::ModelConfig& cfg = params.cfg;
  std::vector<data::TensorRecord> records;
  records.push_back({"cfg",
                     {12},
                     {static_cast<double>(cfg.vocab_size), static_cast<double>(cfg.embed_dim),
                      static_cast<double>(cfg.feature_dim), static_cast<double>(cfg.attn_dim),
                      static_cast<double>(cfg.layers), static_cast<double>(cfg.kernel_width),
                      static_cast<double>(cfg.max_len), cfg.dropout,
                      cfg.use_weight_norm ? 1.0 : 0.0, cfg.use_residual ? 1.0 : 0.0,
                      cfg.use_attention ? 1.0 : 0.0, static_cast<double>(cfg.seed)}});
  for (const convcap::TensorView& view : convcap::tensor_views(params)) {
    data::TensorRecord rec;
    rec.name = view.name;
    rec.dims = {static_cast<std::uint32_t>(view.size)};
    rec.values.assign(view.data, view.data + view.size);
    records.push_back(std::move(rec));
  }
  data::TensorRecord loss;
  loss.name = "train/loss";
  loss.dims = {static_cast<std::uint32_t>(loss_curve.size())};
  loss.values = loss_curve;
  records.push_back(std::move(loss));
  return records;
}

inline convcap::ModelParams captioner_from_records(const std::vector<data::TensorRecord>& records) {
  const data::TensorRecord& cfg_rec = data::find_record(records, "cfg");
  if (cfg_rec.values.size() != 12) throw FormatError("checkpoint: malformed cfg tensor");
  convcap::ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(cfg_rec.values[0]);
  cfg.embed_dim = static_cast<int>(cfg_rec.values[1]);
  cfg.feature_dim = static_cast<int>(cfg_rec.values[2]);
  cfg.attn_dim = static_cast<int>(cfg_rec.values[3]);
  cfg.layers = static_cast<int>(cfg_rec.values[4]);
  cfg.kernel_width = static_cast<int>(cfg_rec.values[5]);
  cfg.max_len = static_cast<int>(cfg_rec.values[6]);
  cfg.dropout = cfg_rec.values[7];
  cfg.use_weight_norm = cfg_rec.values[8] != 0.0;
  cfg.use_residual = cfg_rec.values[9] != 0.0;
  cfg.use_attention = cfg_rec.values[10] != 0.0;
  cfg.seed = static_cast<std::uint64_t>(cfg_rec.values[11]);
  convcap::ModelParams params = convcap::init_params(cfg);
  for (convcap::TensorView& view : convcap::tensor_views(params)) {
    const data::TensorRecord& rec = data::find_record(records, view.name);
    if (rec.values.size() != view.size)
      throw FormatError("checkpoint: tensor '" + view.name + "' has " +
                        std::to_string(rec.values.size()) + " values, expected " +
                        std::to_string(view.size));
    std::copy(rec.values.begin(), rec.values.end(), view.data);
  }
  return params;
}

inline void write_lattice(const std::filesystem::path& path,
                          const convcap::EmissionLattice& lattice) {
  data::TensorRecord rec;
  rec.name = "lattice";
  rec.dims = {static_cast<std::uint32_t>(lattice.logprobs.rows),
              static_cast<std::uint32_t>(lattice.logprobs.cols)};
  rec.values = lattice.logprobs.a;
  data::write_container(path, {rec});
}

inline convcap::EmissionLattice read_lattice(const std::filesystem::path& path) {
  std::vector<data::TensorRecord> records = data::read_container(path);
  const data::TensorRecord& rec = data::find_record(records, "lattice");
  if (rec.dims.size() != 2)
    throw FormatError("lattice: expected a rank-2 tensor, got rank " +
                      std::to_string(rec.dims.size()));
  convcap::EmissionLattice lattice;
  lattice.logprobs = convcap::Mat(static_cast<int>(rec.dims[0]),
                                  static_cast<int>(rec.dims[1]));
  lattice.logprobs.a = rec.values;
  return lattice;
}

inline std::vector<data::TensorRecord> arc_records(const arcgame::ArcWeights& weights,
                                                   const std::vector<double>& gap_curve) {
  std::vector<data::TensorRecord> records;
  records.push_back({"arc/node_weights",
                     {static_cast<std::uint32_t>(weights.node_weights.size())},
                     weights.node_weights});
  records.push_back({"arc/edge_weights",
                     {static_cast<std::uint32_t>(weights.edge_weights.size())},
                     weights.edge_weights});
  records.push_back(
      {"train/gap", {static_cast<std::uint32_t>(gap_curve.size())}, gap_curve});
  return records;
}

inline arcgame::ArcWeights arc_from_records(const std::vector<data::TensorRecord>& records) {
  arcgame::ArcWeights weights;
  weights.node_weights = data::find_record(records, "arc/node_weights").values;
  weights.edge_weights = data::find_record(records, "arc/edge_weights").values;
  return weights;
}

// ---------------------------------------------------------------------------
// Commands.

namespace detail {

inline void require_input(const std::string& path, const char* what) {
  if (path.empty())
    throw ValidationError(std::string("config: no path configured for ") + what);
  if (!std::filesystem::exists(path))
    throw FormatError(std::string(what) + " not found: " + path);
}

inline json parse_file(const std::string& path, const char* what) {
  json doc = json::parse(data::read_file(path), nullptr, false);
  if (doc.is_discarded())
    throw FormatError(std::string(what) + ": invalid JSON in " + path);
  return doc;
}

}  // namespace detail

inline void run_ingest(const RunConfig& cfg) {
  detail::require_input(cfg.paths.annotations, "annotations");
  detail::require_input(cfg.paths.regions, "regions");

  data::Dataset dataset = data::load_coco(detail::parse_file(cfg.paths.annotations, "annotations"));
  auto regions = data::load_regions(detail::parse_file(cfg.paths.regions, "regions"));

  Prepared prep;
  std::vector<std::vector<std::string>> token_lists;
  std::vector<std::int64_t> ids;
  int feature_dim = -1;
  for (const data::ImageEntry& entry : dataset.images) {
    auto it = regions.find(entry.id);
    if (it == regions.end() || it->second.empty())
      throw ReferentialError("ingest: image " + std::to_string(entry.id) +
                             " has no regions");
    PreparedImage img;
    img.id = entry.id;
    img.file_name = entry.file_name;
    img.captions = entry.captions;
    img.regions = it->second;
    for (const data::Region& r : img.regions) {
      int dim = static_cast<int>(r.features.size());
      if (feature_dim == -1) feature_dim = dim;
      if (dim != feature_dim)
        throw ValidationError("ingest: inconsistent region feature dims (" +
                              std::to_string(dim) + " vs " + std::to_string(feature_dim) +
                              ") for image " + std::to_string(entry.id));
    }
    data::build_region_graph(img.regions);  // validates boxes
    for (const data::CaptionRecord& cap : entry.captions)
      token_lists.push_back(data::tokenize(cap.text));
    ids.push_back(entry.id);
    prep.images.push_back(std::move(img));
  }
  for (const auto& [image_id, region_list] : regions)
    if (dataset.find(image_id) == nullptr)
      throw ReferentialError("ingest: regions reference unknown image id " +
                             std::to_string(image_id));

  prep.vocab = data::build_vocab(token_lists, cfg.model.min_count);
  prep.feature_dim = feature_dim;

  if (!cfg.paths.split.empty()) {
    detail::require_input(cfg.paths.split, "split");
    prep.split = data::split_from_document(detail::parse_file(cfg.paths.split, "split"), ids);
  } else {
    prep.split = data::split_by_ratio(ids, cfg.split_ratios[0], cfg.split_ratios[1],
                                      cfg.split_ratios[2], cfg.seed);
  }

  data::write_file_atomic(cfg.paths.prepared, prepared_to_json(prep).dump(2) + "\n");
  log(LogLevel::kInfo, "ingest: %zu images, vocab %d, splits %zu/%zu/%zu",
      prep.images.size(), prep.vocab.size(), prep.split.train.size(),
      prep.split.val.size(), prep.split.test.size());
}

// Caption -> [start] + body ids (truncated to max_len - 1) + [end].
inline std::vector<int> encode_caption(const data::Vocab& vocab, const std::string& text,
                                       int max_len) {
  std::vector<int> tokens{data::Vocab::kStart};
  std::vector<std::string> words = data::tokenize(text);
  int body_limit = max_len - 1;
  for (std::size_t i = 0; i < words.size() && static_cast<int>(i) < body_limit; ++i)
    tokens.push_back(vocab.encode(words[i]));
  tokens.push_back(data::Vocab::kEnd);
  return tokens;
}

inline void run_train_captioner(const RunConfig& cfg) {
  detail::require_input(cfg.paths.prepared, "prepared dataset");
  Prepared prep = load_prepared(cfg.paths.prepared);
  if (prep.split.train.empty()) throw ValidationError("train-captioner: empty train split");

  convcap::ModelConfig mc;
  mc.vocab_size = prep.vocab.size();
  mc.embed_dim = cfg.model.embed_dim;
  mc.feature_dim = prep.feature_dim;
  mc.attn_dim = cfg.model.attn_dim;
  mc.layers = cfg.model.layers;
  mc.kernel_width = cfg.model.kernel_width;
  mc.max_len = cfg.model.max_len;
  mc.dropout = cfg.model.dropout;
  mc.use_weight_norm = cfg.model.weight_norm;
  mc.use_residual = cfg.model.residual;
  mc.use_attention = cfg.model.attention;
  mc.seed = cfg.seed;
  convcap::ModelParams params = convcap::init_params(mc);

  std::vector<convcap::TrainExample> pool;
  for (std::int64_t id : prep.split.train) {
    const PreparedImage& img = prep.image(id);
    convcap::ImageFeatures feats = image_features(img);
    for (const data::CaptionRecord& cap : img.captions)
      pool.push_back({feats, encode_caption(prep.vocab, cap.text, mc.max_len)});
  }
  if (pool.empty()) throw ValidationError("train-captioner: no training captions");

  Rng order_rng(cfg.seed ^ 0x5deece66dULL);
  Rng dropout_rng(cfg.seed ^ 0xda7a5eedULL);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);

  std::vector<double> loss_curve;
  std::size_t cursor = 0;
  for (int step = 0; step < cfg.model.steps; ++step) {
    std::vector<convcap::TrainExample> batch;
    for (int b = 0; b < cfg.model.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(pool[order[cursor++]]);
    }
    convcap::TrainStepResult r =
        convcap::train_step(params, batch, cfg.model.lr, &dropout_rng, cfg.model.clip_norm);
    loss_curve.push_back(r.loss);
    if ((step + 1) % 50 == 0 || step + 1 == cfg.model.steps)
      log(LogLevel::kInfo, "train-captioner: step %d loss %.4f", step + 1, r.loss);
  }

  data::write_container(cfg.paths.captioner, captioner_records(params, loss_curve));
  log(LogLevel::kInfo, "train-captioner: wrote %s", cfg.paths.captioner.c_str());
}

// Gold region label: the region's tag occurs in some reference caption.
inline graphcut::Labeling gold_labeling(const PreparedImage& img) {
  std::set<std::string> ref_tokens;
  for (const data::CaptionRecord& cap : img.captions)
    for (const std::string& token : data::tokenize(cap.text)) ref_tokens.insert(token);
  graphcut::Labeling gold(img.regions.size(), 0);
  for (std::size_t i = 0; i < img.regions.size(); ++i)
    if (!img.regions[i].tag.empty() && ref_tokens.count(img.regions[i].tag))
      gold[i] = 1;
  return gold;
}

inline void run_train_arc(const RunConfig& cfg) {
  detail::require_input(cfg.paths.prepared, "prepared dataset");
  if (cfg.paths.arc.empty())
    throw ValidationError("train-arc: paths.arc must name the output checkpoint");
  Prepared prep = load_prepared(cfg.paths.prepared);
  if (prep.split.train.empty()) throw ValidationError("train-arc: empty train split");

  std::vector<std::pair<data::RegionGraph, graphcut::Labeling>> examples;
  for (std::int64_t id : prep.split.train) {
    const PreparedImage& img = prep.image(id);
    examples.push_back({data::build_region_graph(img.regions), gold_labeling(img)});
  }

  arcgame::ArcTrainConfig tc;
  tc.eta0 = cfg.arc.eta0;
  tc.epochs = cfg.arc.epochs;
  tc.game_tol = cfg.arc.tol;
  tc.game_max_iter = cfg.arc.max_iter;
  arcgame::ArcTrainResult result =
      arcgame::train_weights(examples, tc, nullptr, cfg.threads);

  data::write_container(cfg.paths.arc, arc_records(result.weights, result.epoch_gaps));
  log(LogLevel::kInfo, "train-arc: final gap %.6f, wrote %s",
      result.epoch_gaps.empty() ? 0.0 : result.epoch_gaps.back(), cfg.paths.arc.c_str());
}

// Predictor marginals bridged to the vocabulary: a tagged region boosts its
// tag token; multiple regions with one tag keep the largest marginal.
inline std::map<int, double> attribute_marginals(const PreparedImage& img,
                                                 const data::Vocab& vocab,
                                                 const arcgame::ArcWeights& weights,
                                                 const ArcSection& arc) {
  data::RegionGraph graph = data::build_region_graph(img.regions);
  graphcut::BinaryEnergy energy = arcgame::energy_from_graph(graph, weights);
  arcgame::GameResult game = arcgame::double_oracle(energy, arc.tol, arc.max_iter);
  std::vector<double> marginals = arcgame::node_marginals(game.predictor);
  std::map<int, double> out;
  for (std::size_t i = 0; i < img.regions.size(); ++i) {
    const std::string& tag = img.regions[i].tag;
    if (tag.empty() || !vocab.contains(tag)) continue;
    int token = vocab.encode(tag);
    auto it = out.find(token);
    if (it == out.end() || it->second < marginals[i]) out[token] = marginals[i];
  }
  return out;
}

inline void run_decode(const RunConfig& cfg) {
  detail::require_input(cfg.paths.prepared, "prepared dataset");
  detail::require_input(cfg.paths.captioner, "captioner checkpoint");
  Prepared prep = load_prepared(cfg.paths.prepared);
  convcap::ModelParams params =
      captioner_from_records(data::read_container(cfg.paths.captioner));
  if (params.cfg.vocab_size != prep.vocab.size())
    throw ValidationError("decode: checkpoint vocab size " +
                          std::to_string(params.cfg.vocab_size) +
                          " != prepared vocab size " + std::to_string(prep.vocab.size()));

  bool use_arc = !cfg.paths.arc.empty();
  arcgame::ArcWeights weights;
  if (use_arc) {
    detail::require_input(cfg.paths.arc, "arc checkpoint");
    weights = arc_from_records(data::read_container(cfg.paths.arc));
  }

  const std::vector<std::int64_t>& ids = prep.split_ids(cfg.decode_cfg.split);
  if (ids.empty())
    throw ValidationError("decode: split '" + cfg.decode_cfg.split + "' is empty");
  std::vector<std::int64_t> sorted_ids = ids;
  std::sort(sorted_ids.begin(), sorted_ids.end());

  decode::DecodeConfig dc;
  dc.beam_size = cfg.decode_cfg.beam_size;
  dc.max_len = params.cfg.max_len;
  dc.fusion_lambda = cfg.decode_cfg.fusion_lambda;
  dc.fusion_epsilon = cfg.decode_cfg.fusion_epsilon;

  std::vector<data::Prediction> predictions(sorted_ids.size());
  parallel_for(sorted_ids.size(), cfg.threads, [&](std::size_t idx) {
    const PreparedImage& img = prep.image(sorted_ids[idx]);
    convcap::ImageFeatures feats = image_features(img);
    std::map<int, double> marginals;
    if (use_arc) marginals = attribute_marginals(img, prep.vocab, weights, cfg.arc);

    decode::Scorer scorer = [&](const std::vector<int>& prefix) {
      std::vector<double> emission =
          convcap::forward(params, feats, prefix, data::Vocab::kStart);
      return use_arc ? decode::fuse(emission, marginals, dc) : emission;
    };
    std::vector<decode::Hypothesis> ranked =
        decode::beam_search(scorer, dc, data::Vocab::kStart, data::Vocab::kEnd,
                            prep.vocab.size());
    if (ranked.empty()) throw NumericError("decode: empty beam result");

    std::vector<std::string> words;
    for (int token : ranked[0].tokens) {
      if (token == data::Vocab::kEnd) break;
      if (token == data::Vocab::kPad || token == data::Vocab::kStart) continue;
      words.push_back(prep.vocab.decode(token));
    }
    predictions[idx] = {sorted_ids[idx], data::join_tokens(words)};
  });

  data::write_file_atomic(cfg.paths.predictions, data::encode_predictions(predictions));
  log(LogLevel::kInfo, "decode: wrote %zu predictions to %s", predictions.size(),
      cfg.paths.predictions.c_str());
}

inline metrics::MetricReport run_eval(const RunConfig& cfg, std::string* rendered = nullptr) {
  detail::require_input(cfg.paths.predictions, "predictions");
  detail::require_input(cfg.paths.prepared, "prepared dataset");
  Prepared prep = load_prepared(cfg.paths.prepared);
  std::vector<data::Prediction> predictions =
      data::decode_predictions(data::read_file(cfg.paths.predictions));
  if (predictions.empty()) throw ValidationError("eval: no predictions");

  metrics::Candidates candidates;
  std::map<std::int64_t, std::vector<std::string>> raw_refs;
  for (const data::Prediction& p : predictions) {
    const PreparedImage& img = prep.image(p.image_id);
    candidates[p.image_id] = p.caption;
    std::vector<std::string>& refs = raw_refs[p.image_id];
    for (const data::CaptionRecord& cap : img.captions) refs.push_back(cap.text);
  }
  metrics::RefCorpus refs = metrics::RefCorpus::build(raw_refs);
  metrics::MetricReport report = metrics::evaluate_all(candidates, refs);

  ordered_json doc = metrics::report_to_json(report);
  data::write_file_atomic(cfg.paths.report, doc.dump(2) + "\n");

  auto fmt = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return std::string(buf);
  };
  std::string table;
  table += doc.dump(2) + "\n";
  table += "        B1      B2      B3      B4      M       R       C       S\n";
  table += "result  " + fmt(report.b1) + "   " + fmt(report.b2) + "   " + fmt(report.b3) +
           "   " + fmt(report.b4) + "   -       " + fmt(report.rouge_l) + "   " +
           fmt(report.cider) + "   -\n";
  if (rendered != nullptr) *rendered = table;
  return report;
}

}  // namespace arccap::pipeline
