#pragma once

// Synthetic desk-scale corpus: images carry 2-4 tagged regions whose
// features encode the tag plus a salience flag; templated captions mention
// exactly the two salient tags, so region tags carry real signal for both
// the captioner and the cut learner. 26 distinct caption words + 4 specials
// give a 30-token vocabulary.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "arccap/common.hpp"

namespace toy_corpus {

inline const std::array<std::string, 10>& attributes() {
  static const std::array<std::string, 10> kAttributes{
      "cat", "dog", "car", "tree", "bird", "boat", "horse", "sheep", "train", "house"};
  return kAttributes;
}

inline std::vector<std::string> captions_for(arccap::Rng& rng, const std::string& t1,
                                             const std::string& t2) {
  const std::vector<std::string> templates[] = {
      {"a", t1, "near", "a", t2},
      {"the", t1, "sits", "by", "the", t2},
      {"a", "small", t1, "and", "a", "big", t2},
      {"the", t1, "waits", "near", "the", "old", t2},
      {"a", "red", t1, "rests", "by", "a", "blue", t2},
      {"the", "young", t1, "stands", "on", "the", t2},
  };
  std::size_t first = rng.next_below(6);
  std::size_t second = (first + 1 + rng.next_below(5)) % 6;
  std::vector<std::string> out;
  for (std::size_t idx : {first, second}) {
    std::string caption;
    for (std::size_t w = 0; w < templates[idx].size(); ++w) {
      if (w > 0) caption.push_back(' ');
      caption += templates[idx][w];
    }
    out.push_back(caption);
  }
  return out;
}

struct Paths {
  std::filesystem::path annotations;
  std::filesystem::path regions;
};

constexpr int kFeatureDim = 12;  // 10 attribute dims + salience + bias

inline Paths write(const std::filesystem::path& dir, int num_images, std::uint64_t seed) {
  arccap::Rng rng(seed);
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  nlohmann::ordered_json annotations = nlohmann::ordered_json::array();
  nlohmann::ordered_json regions_doc = nlohmann::ordered_json::object();

  std::int64_t ann_id = 1;
  for (int i = 0; i < num_images; ++i) {
    std::int64_t image_id = 1000 + i;
    images.push_back({{"id", image_id},
                      {"file_name", "toy_" + std::to_string(image_id) + ".jpg"}});

    int num_regions = 2 + static_cast<int>(rng.next_below(3));
    std::size_t attr1 = rng.next_below(10);
    std::size_t attr2 = (attr1 + 1 + rng.next_below(9)) % 10;

    nlohmann::ordered_json region_list = nlohmann::ordered_json::array();
    for (int r = 0; r < num_regions; ++r) {
      bool salient = r < 2;
      std::size_t attr;
      if (r == 0) attr = attr1;
      else if (r == 1) attr = attr2;
      else {
        attr = rng.next_below(10);
        while (attr == attr1 || attr == attr2) attr = rng.next_below(10);
      }
      std::vector<double> features(kFeatureDim, 0.0);
      features[attr] = 2.0;
      features[10] = salient ? 1.0 : 0.0;
      features[11] = 1.0;
      for (double& f : features) f += rng.uniform(-0.1, 0.1);
      nlohmann::ordered_json box = {rng.uniform(0.0, 60.0), rng.uniform(0.0, 60.0),
                                    rng.uniform(20.0, 40.0), rng.uniform(20.0, 40.0)};
      region_list.push_back({{"box", box},
                             {"features", features},
                             {"tag", attributes()[attr]}});
    }
    regions_doc[std::to_string(image_id)] = region_list;

    for (const std::string& caption :
         captions_for(rng, attributes()[attr1], attributes()[attr2])) {
      annotations.push_back(
          {{"id", ann_id++}, {"image_id", image_id}, {"caption", caption}});
    }
  }

  Paths paths{dir / "annotations.json", dir / "regions.json"};
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(paths.annotations);
    out << nlohmann::ordered_json{{"images", images}, {"annotations", annotations}}.dump(2);
  }
  {
    std::ofstream out(paths.regions);
    out << regions_doc.dump(2);
  }
  return paths;
}

}  // namespace toy_corpus
