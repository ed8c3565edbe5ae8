#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "arccap/common.hpp"

namespace arccap::data {

struct Region {
  std::array<double, 4> box{};       // x, y, w, h in pixels
  std::vector<double> features;
  std::string tag;                   // vocabulary token; empty when untagged
};

struct RegionEdge {
  int i = 0;
  int j = 0;                         // i < j
  double iou = 0.0;
  double norm_center_dist = 0.0;     // centroid distance / image diagonal
};

// Complete graph over image regions with spatial edge features.
struct RegionGraph {
  std::vector<Region> regions;
  std::vector<RegionEdge> edges;

  int size() const { return static_cast<int>(regions.size()); }

  std::vector<double> edge_features(const RegionEdge& e) const {
    return {e.iou, e.norm_center_dist};
  }
};

inline double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double ix = std::max(0.0, std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]));
  double iy = std::max(0.0, std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]));
  double inter = ix * iy;
  double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline RegionGraph build_region_graph(const std::vector<Region>& regions) {
  if (regions.empty()) throw ValidationError("region graph: need at least one region");
  std::size_t dim = regions[0].features.size();
  double extent_x = 0.0, extent_y = 0.0;
  for (const Region& r : regions) {
    if (r.features.size() != dim)
      throw ValidationError("region graph: inconsistent feature dims (" +
                            std::to_string(r.features.size()) + " vs " +
                            std::to_string(dim) + ")");
    if (r.box[2] < 0.0 || r.box[3] < 0.0)
      throw ValidationError("region graph: box width/height must be >= 0");
    extent_x = std::max(extent_x, r.box[0] + r.box[2]);
    extent_y = std::max(extent_y, r.box[1] + r.box[3]);
  }
  // Region files carry no image size; the diagonal of the joint box extent
  // stands in for it.
  double diagonal = std::hypot(extent_x, extent_y);
  RegionGraph g;
  g.regions = regions;
  int n = g.size();
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      RegionEdge e;
      e.i = i;
      e.j = j;
      e.iou = box_iou(regions[i].box, regions[j].box);
      double cx_i = regions[i].box[0] + regions[i].box[2] / 2.0;
      double cy_i = regions[i].box[1] + regions[i].box[3] / 2.0;
      double cx_j = regions[j].box[0] + regions[j].box[2] / 2.0;
      double cy_j = regions[j].box[1] + regions[j].box[3] / 2.0;
      double dist = std::hypot(cx_i - cx_j, cy_i - cy_j);
      e.norm_center_dist = diagonal > 0.0 ? dist / diagonal : 0.0;
      g.edges.push_back(e);
    }
  }
  return g;
}

}  // namespace arccap::data
