#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "owssl/errors.hpp"

namespace owssl {

/// Geometry of datasets whose rows are flattened images; all-zero means the
/// rows are plain feature vectors.
struct DataShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  bool is_image() const { return channels > 0 && height > 0 && width > 0; }
  int flat_dim() const { return channels * height * width; }
};

/// A labeled dataset: one example per row of `x`, class ids in `labels`.
struct Dataset {
  Eigen::MatrixXd x;
  std::vector<int> labels;
  int num_classes = 0;
  DataShape shape{};

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }

  std::vector<Eigen::Index> indices_of_class(int c) const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(labels.size()); ++i) {
      if (labels[i] == c) out.push_back(i);
    }
    return out;
  }

  void validate() const {
    if (x.rows() != static_cast<Eigen::Index>(labels.size())) {
      throw InternalConsistencyError("dataset rows and labels are misaligned");
    }
    if (num_classes <= 0) {
      throw InternalConsistencyError("dataset num_classes must be positive");
    }
    for (int y : labels) {
      if (y < 0 || y >= num_classes) {
        throw InternalConsistencyError("dataset label " + std::to_string(y) +
                                       " outside [0, " +
                                       std::to_string(num_classes) + ")");
      }
    }
    if (shape.is_image() && shape.flat_dim() != x.cols()) {
      throw InternalConsistencyError("image shape does not match row width");
    }
  }
};

/// Disjoint split of all class ids into seen (labeled) and unseen classes,
/// plus the dense head-slot remapping with seen classes occupying the first
/// |seen| slots.
struct ClassPartition {
  int num_classes = 0;
  std::vector<int> seen;    // ascending
  std::vector<int> unseen;  // ascending
  std::vector<int> class_to_slot;
  std::vector<int> slot_to_class;

  static ClassPartition make(int num_classes, std::vector<int> seen_classes) {
    if (num_classes <= 0) {
      throw std::invalid_argument("num_classes must be positive");
    }
    std::sort(seen_classes.begin(), seen_classes.end());
    seen_classes.erase(std::unique(seen_classes.begin(), seen_classes.end()),
                       seen_classes.end());
    if (seen_classes.empty()) {
      throw std::invalid_argument("at least one seen class is required");
    }
    for (int c : seen_classes) {
      if (c < 0 || c >= num_classes) {
        throw std::invalid_argument("seen class id " + std::to_string(c) +
                                    " outside [0, " +
                                    std::to_string(num_classes) + ")");
      }
    }
    ClassPartition p;
    p.num_classes = num_classes;
    p.seen = std::move(seen_classes);
    std::vector<bool> is_seen(num_classes, false);
    for (int c : p.seen) is_seen[c] = true;
    for (int c = 0; c < num_classes; ++c) {
      if (!is_seen[c]) p.unseen.push_back(c);
    }
    p.class_to_slot.assign(num_classes, -1);
    p.slot_to_class.resize(num_classes);
    int slot = 0;
    for (int c : p.seen) {
      p.class_to_slot[c] = slot;
      p.slot_to_class[slot] = c;
      ++slot;
    }
    for (int c : p.unseen) {
      p.class_to_slot[c] = slot;
      p.slot_to_class[slot] = c;
      ++slot;
    }
    return p;
  }

  int num_seen() const { return static_cast<int>(seen.size()); }
  int num_unseen() const { return static_cast<int>(unseen.size()); }

  bool is_seen(int c) const {
    return std::binary_search(seen.begin(), seen.end(), c);
  }

  int slot_of(int c) const { return class_to_slot.at(c); }
  int class_at_slot(int s) const { return slot_to_class.at(s); }

  /// Position of class c within the unseen ordering; -1 if c is seen.
  int novel_index_of(int c) const {
    auto it = std::lower_bound(unseen.begin(), unseen.end(), c);
    if (it == unseen.end() || *it != c) return -1;
    return static_cast<int>(it - unseen.begin());
  }

  void validate() const {
    if (seen.empty()) {
      throw InternalConsistencyError("partition has no seen classes");
    }
    if (static_cast<int>(seen.size() + unseen.size()) != num_classes) {
      throw InternalConsistencyError("seen and unseen do not cover all classes");
    }
    std::vector<bool> hit(num_classes, false);
    for (int c : seen) hit.at(c) = true;
    for (int c : unseen) {
      if (hit.at(c)) {
        throw InternalConsistencyError("class appears as both seen and unseen");
      }
      hit[c] = true;
    }
  }
};

}  // namespace owssl
