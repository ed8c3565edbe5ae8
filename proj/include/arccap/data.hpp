#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "arccap/common.hpp"
#include "arccap/container.hpp"
#include "arccap/region_graph.hpp"
#include "arccap/text.hpp"

namespace arccap::data {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct CaptionRecord {
  std::int64_t ann_id = 0;
  std::string text;
};

struct ImageEntry {
  std::int64_t id = 0;
  std::string file_name;
  std::vector<CaptionRecord> captions;  // kept sorted by annotation id
};

struct Dataset {
  std::vector<ImageEntry> images;  // sorted by image id

  const ImageEntry* find(std::int64_t id) const {
    auto it = std::lower_bound(images.begin(), images.end(), id,
                               [](const ImageEntry& e, std::int64_t v) { return e.id < v; });
    return (it != images.end() && it->id == id) ? &*it : nullptr;
  }
};

namespace detail {

inline const json& require_field(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key))
    throw SchemaError("missing field: " + path + "." + key);
  return obj.at(key);
}

inline std::int64_t require_int(const json& obj, const char* key, const std::string& path) {
  const json& v = require_field(obj, key, path);
  if (!v.is_number_integer())
    throw SchemaError("field is not an integer: " + path + "." + key);
  return v.get<std::int64_t>();
}

inline std::string require_string(const json& obj, const char* key, const std::string& path) {
  const json& v = require_field(obj, key, path);
  if (!v.is_string()) throw SchemaError("field is not a string: " + path + "." + key);
  return v.get<std::string>();
}

}  // namespace detail

// COCO captions subset: `images` (id, file_name) and `annotations`
// (id, image_id, caption). Captions group by image, sorted by annotation id;
// images without captions stay in the dataset.
inline Dataset load_coco(const json& doc) {
  const json& images = detail::require_field(doc, "images", "$");
  const json& annotations = detail::require_field(doc, "annotations", "$");
  if (!images.is_array()) throw SchemaError("field is not an array: $.images");
  if (!annotations.is_array()) throw SchemaError("field is not an array: $.annotations");

  Dataset out;
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::string path = "$.images[" + std::to_string(i) + "]";
    ImageEntry entry;
    entry.id = detail::require_int(images[i], "id", path);
    entry.file_name = detail::require_string(images[i], "file_name", path);
    if (index.count(entry.id))
      throw ReferentialError("duplicate image id " + std::to_string(entry.id));
    index[entry.id] = 0;
    out.images.push_back(std::move(entry));
  }
  std::sort(out.images.begin(), out.images.end(),
            [](const ImageEntry& a, const ImageEntry& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < out.images.size(); ++i) index[out.images[i].id] = i;

  for (std::size_t i = 0; i < annotations.size(); ++i) {
    std::string path = "$.annotations[" + std::to_string(i) + "]";
    CaptionRecord rec;
    rec.ann_id = detail::require_int(annotations[i], "id", path);
    std::int64_t image_id = detail::require_int(annotations[i], "image_id", path);
    rec.text = detail::require_string(annotations[i], "caption", path);
    auto it = index.find(image_id);
    if (it == index.end())
      throw ReferentialError("annotation " + std::to_string(rec.ann_id) +
                             " references unknown image_id " + std::to_string(image_id));
    out.images[it->second].captions.push_back(std::move(rec));
  }
  for (ImageEntry& entry : out.images)
    std::sort(entry.captions.begin(), entry.captions.end(),
              [](const CaptionRecord& a, const CaptionRecord& b) {
                return a.ann_id < b.ann_id;
              });
  return out;
}

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> id_to_token;
  std::map<std::string, int> token_to_id;
  int min_count = 1;

  int size() const { return static_cast<int>(id_to_token.size()); }

  int encode(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id.count(token) > 0; }

  const std::string& decode(int id) const {
    if (id < 0 || id >= size())
      throw ValidationError("vocab: id " + std::to_string(id) + " out of range");
    return id_to_token[static_cast<std::size_t>(id)];
  }
};

// Ids in descending corpus frequency (ties alphabetical) starting at 4;
// below min_count maps to unk.
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& token_lists,
                         int min_count) {
  if (min_count < 1) throw ValidationError("vocab: min_count must be >= 1");
  std::map<std::string, std::int64_t> counts;
  for (const auto& tokens : token_lists)
    for (const std::string& t : tokens) ++counts[t];

  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (const auto& [token, count] : counts)
    if (count >= min_count) kept.push_back({token, count});
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab vocab;
  vocab.min_count = min_count;
  vocab.id_to_token = {"<pad>", "<s>", "</s>", "<unk>"};
  for (const auto& [token, count] : kept) vocab.id_to_token.push_back(token);
  for (std::size_t i = 0; i < vocab.id_to_token.size(); ++i)
    vocab.token_to_id[vocab.id_to_token[i]] = static_cast<int>(i);
  return vocab;
}

struct SplitSpec {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;
};

namespace detail {

inline void check_partition(const SplitSpec& split, std::vector<std::int64_t> dataset_ids) {
  std::vector<std::int64_t> combined;
  for (const auto* part : {&split.train, &split.val, &split.test})
    combined.insert(combined.end(), part->begin(), part->end());
  std::sort(combined.begin(), combined.end());
  auto dup = std::adjacent_find(combined.begin(), combined.end());
  if (dup != combined.end())
    throw ValidationError("split: image id " + std::to_string(*dup) +
                          " appears in more than one part");
  std::sort(dataset_ids.begin(), dataset_ids.end());
  if (combined != dataset_ids)
    throw ValidationError("split: parts do not exactly cover the dataset (" +
                          std::to_string(combined.size()) + " listed vs " +
                          std::to_string(dataset_ids.size()) + " images)");
}

}  // namespace detail

// Seeded deterministic partition at the given ratios.
inline SplitSpec split_by_ratio(std::vector<std::int64_t> ids, double train_ratio,
                                double val_ratio, double test_ratio, std::uint64_t seed) {
  if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0 ||
      std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    throw ValidationError("split: ratios must be non-negative and sum to 1");
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(ids);
  std::size_t n = ids.size();
  std::size_t n_train = static_cast<std::size_t>(train_ratio * n);
  std::size_t n_val = static_cast<std::size_t>(val_ratio * n);
  if (n_train + n_val > n) n_val = n - n_train;
  SplitSpec split;
  split.train.assign(ids.begin(), ids.begin() + n_train);
  split.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test.assign(ids.begin() + n_train + n_val, ids.end());
  detail::check_partition(split, ids);
  return split;
}

// Explicit id-list document: {"train": [...], "val": [...], "test": [...]};
// the three lists must exactly partition the dataset ids.
inline SplitSpec split_from_document(const json& doc,
                                     const std::vector<std::int64_t>& dataset_ids) {
  SplitSpec split;
  struct Part {
    const char* key;
    std::vector<std::int64_t>* out;
  };
  for (Part part : {Part{"train", &split.train}, Part{"val", &split.val},
                    Part{"test", &split.test}}) {
    const json& arr = detail::require_field(doc, part.key, "$");
    if (!arr.is_array())
      throw SchemaError(std::string("field is not an array: $.") + part.key);
    for (const json& v : arr) {
      if (!v.is_number_integer())
        throw SchemaError(std::string("non-integer id in $.") + part.key);
      part.out->push_back(v.get<std::int64_t>());
    }
  }
  detail::check_partition(split, dataset_ids);
  return split;
}

// Regions document: map image_id -> list of {box: [x,y,w,h], features: [...],
// tag?: token}.
inline std::map<std::int64_t, std::vector<Region>> load_regions(const json& doc) {
  if (!doc.is_object()) throw SchemaError("regions: document must be an object");
  std::map<std::int64_t, std::vector<Region>> out;
  for (const auto& [key, value] : doc.items()) {
    std::int64_t image_id = 0;
    try {
      std::size_t used = 0;
      image_id = std::stoll(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw SchemaError("regions: key '" + key + "' is not an image id");
    }
    if (!value.is_array())
      throw SchemaError("regions: entry for image " + key + " is not an array");
    std::vector<Region>& regions = out[image_id];
    for (std::size_t i = 0; i < value.size(); ++i) {
      std::string path = "$." + key + "[" + std::to_string(i) + "]";
      const json& rj = value[i];
      const json& box = detail::require_field(rj, "box", path);
      if (!box.is_array() || box.size() != 4)
        throw SchemaError("regions: box must have 4 numbers: " + path);
      Region region;
      for (int b = 0; b < 4; ++b) {
        if (!box[b].is_number()) throw SchemaError("regions: non-numeric box: " + path);
        region.box[b] = box[b].get<double>();
      }
      const json& feats = detail::require_field(rj, "features", path);
      if (!feats.is_array() || feats.empty())
        throw SchemaError("regions: features must be a non-empty array: " + path);
      for (const json& f : feats) {
        if (!f.is_number()) throw SchemaError("regions: non-numeric feature: " + path);
        region.features.push_back(f.get<double>());
      }
      if (rj.contains("tag")) {
        if (!rj.at("tag").is_string())
          throw SchemaError("regions: tag must be a string: " + path);
        region.tag = rj.at("tag").get<std::string>();
      }
      regions.push_back(std::move(region));
    }
  }
  return out;
}

struct Prediction {
  std::int64_t image_id = 0;
  std::string caption;
};

inline std::string encode_predictions(const std::vector<Prediction>& predictions) {
  ordered_json arr = ordered_json::array();
  for (const Prediction& p : predictions)
    arr.push_back(ordered_json{{"image_id", p.image_id}, {"caption", p.caption}});
  return arr.dump(2) + "\n";
}

inline std::vector<Prediction> decode_predictions(const std::string& text) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded() || !doc.is_array())
    throw FormatError("predictions: document is not a JSON array");
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    std::string path = "$[" + std::to_string(i) + "]";
    Prediction p;
    p.image_id = detail::require_int(doc[i], "image_id", path);
    p.caption = detail::require_string(doc[i], "caption", path);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace arccap::data
