#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/rng.hpp"

namespace owssl {

/// Labeled / unlabeled / test split over a fixed class partition. The index
/// vectors record which rows of the source training pool went where, so a
/// split manifest can reproduce the bundle exactly.
struct DatasetBundle {
  Dataset labeled;
  Eigen::MatrixXd unlabeled;
  Dataset test;
  ClassPartition partition;
  std::vector<Eigen::Index> labeled_indices;
  std::vector<Eigen::Index> unlabeled_indices;

  void validate() const {
    partition.validate();
    labeled.validate();
    test.validate();
    for (int y : labeled.labels) {
      if (!partition.is_seen(y)) {
        throw InternalConsistencyError("labeled example carries unseen class " +
                                       std::to_string(y));
      }
    }
    std::vector<bool> taken(
        static_cast<std::size_t>(labeled_indices.size() + unlabeled_indices.size() + 1),
        false);
    auto mark = [&taken](Eigen::Index i) {
      if (i < 0) throw InternalConsistencyError("negative source index");
      if (static_cast<std::size_t>(i) >= taken.size()) {
        taken.resize(static_cast<std::size_t>(i) + 1, false);
      }
      if (taken[static_cast<std::size_t>(i)]) {
        throw InternalConsistencyError("source index used twice in bundle");
      }
      taken[static_cast<std::size_t>(i)] = true;
    };
    for (Eigen::Index i : labeled_indices) mark(i);
    for (Eigen::Index i : unlabeled_indices) mark(i);
  }
};

inline ClassPartition split_classes(int num_classes, int num_unseen,
                                    std::uint64_t seed) {
  if (num_classes <= 0) {
    throw std::invalid_argument("num_classes must be positive");
  }
  if (num_unseen < 0 || num_unseen >= num_classes) {
    throw std::invalid_argument("num_unseen must lie in [0, num_classes)");
  }
  Rng rng = make_rng(seed, /*stream=*/1);
  std::vector<int> ids(static_cast<std::size_t>(num_classes));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> seen(ids.begin() + num_unseen, ids.end());
  return ClassPartition::make(num_classes, std::move(seen));
}

/// Unseen classes are chosen as a union of whole superclasses totalling
/// exactly num_unseen classes; superclass order is shuffled under the seed
/// and the first exact cover in depth-first order wins.
inline ClassPartition split_classes_by_superclass(
    const std::vector<int>& class_to_super, int num_unseen,
    std::uint64_t seed) {
  const int num_classes = static_cast<int>(class_to_super.size());
  if (num_classes == 0) {
    throw std::invalid_argument("superclass map is empty");
  }
  if (num_unseen < 0 || num_unseen >= num_classes) {
    throw std::invalid_argument("num_unseen must lie in [0, num_classes)");
  }
  std::map<int, std::vector<int>> groups;
  for (int c = 0; c < num_classes; ++c) {
    if (class_to_super[c] < 0) {
      throw std::invalid_argument("class " + std::to_string(c) +
                                  " has no superclass");
    }
    groups[class_to_super[c]].push_back(c);
  }
  std::vector<std::vector<int>> members;
  members.reserve(groups.size());
  for (auto& [super_id, classes] : groups) members.push_back(classes);
  Rng rng = make_rng(seed, /*stream=*/2);
  std::shuffle(members.begin(), members.end(), rng);

  std::vector<int> chosen;
  auto dfs = [&](auto&& self, std::size_t pos, int remaining) -> bool {
    if (remaining == 0) return true;
    if (pos == members.size()) return false;
    const int sz = static_cast<int>(members[pos].size());
    if (sz <= remaining) {
      chosen.push_back(static_cast<int>(pos));
      if (self(self, pos + 1, remaining - sz)) return true;
      chosen.pop_back();
    }
    return self(self, pos + 1, remaining);
  };
  if (!dfs(dfs, 0, num_unseen)) {
    throw std::invalid_argument(
        "num_unseen=" + std::to_string(num_unseen) +
        " is not a union of whole superclasses");
  }
  std::vector<bool> unseen_flag(static_cast<std::size_t>(num_classes), false);
  for (int g : chosen) {
    for (int c : members[static_cast<std::size_t>(g)]) unseen_flag[c] = true;
  }
  std::vector<int> seen;
  for (int c = 0; c < num_classes; ++c) {
    if (!unseen_flag[c]) seen.push_back(c);
  }
  return ClassPartition::make(num_classes, std::move(seen));
}

namespace detail {

inline Dataset gather_rows(const Dataset& src,
                           const std::vector<Eigen::Index>& rows,
                           bool keep_labels) {
  Dataset out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), src.x.cols());
  out.num_classes = src.num_classes;
  out.shape = src.shape;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.x.row(static_cast<Eigen::Index>(r)) = src.x.row(rows[r]);
    if (keep_labels) out.labels.push_back(src.labels[static_cast<std::size_t>(rows[r])]);
  }
  return out;
}

inline Eigen::MatrixXd gather_matrix(const Dataset& src,
                                     const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), src.x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = src.x.row(rows[r]);
  }
  return out;
}

}  // namespace detail

/// Exactly k labeled examples per seen class; everything else (label
/// stripped) becomes the unlabeled set. Unseen-class examples contribute no
/// labels at all.
inline DatasetBundle build_balanced_fewshot(const Dataset& train,
                                            const Dataset& test,
                                            const ClassPartition& partition,
                                            int k, std::uint64_t seed) {
  train.validate();
  partition.validate();
  if (k <= 0) throw std::invalid_argument("k must be positive");
  Rng rng = make_rng(seed, /*stream=*/3);

  std::vector<bool> is_labeled(static_cast<std::size_t>(train.size()), false);
  std::vector<Eigen::Index> labeled_idx;
  for (int c : partition.seen) {
    auto members = train.indices_of_class(c);
    if (static_cast<int>(members.size()) < k) {
      throw InsufficientDataError("class " + std::to_string(c) + " has only " +
                                  std::to_string(members.size()) +
                                  " examples, need " + std::to_string(k));
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (int j = 0; j < k; ++j) {
      labeled_idx.push_back(members[static_cast<std::size_t>(j)]);
      is_labeled[static_cast<std::size_t>(members[static_cast<std::size_t>(j)])] = true;
    }
  }
  std::sort(labeled_idx.begin(), labeled_idx.end());

  DatasetBundle bundle;
  bundle.partition = partition;
  bundle.labeled_indices = labeled_idx;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    if (!is_labeled[static_cast<std::size_t>(i)]) bundle.unlabeled_indices.push_back(i);
  }
  bundle.labeled = detail::gather_rows(train, bundle.labeled_indices, true);
  bundle.unlabeled = detail::gather_matrix(train, bundle.unlabeled_indices);
  bundle.test = test;
  bundle.validate();
  return bundle;
}

/// Uniform without-replacement draw of n examples to label; seen classes are
/// exactly those hit by the draw, all other examples lose their labels.
inline DatasetBundle build_budget_labeled(const Dataset& train,
                                          const Dataset& test, int n,
                                          std::uint64_t seed) {
  train.validate();
  if (n <= 0 || n > train.size()) {
    throw std::invalid_argument("budget n must lie in [1, dataset size]");
  }
  Rng rng = make_rng(seed, /*stream=*/4);
  auto order = shuffled_indices(static_cast<std::size_t>(train.size()), rng);

  std::vector<Eigen::Index> labeled_idx;
  std::vector<bool> is_labeled(static_cast<std::size_t>(train.size()), false);
  std::vector<int> seen_classes;
  for (int j = 0; j < n; ++j) {
    const auto i = static_cast<Eigen::Index>(order[static_cast<std::size_t>(j)]);
    labeled_idx.push_back(i);
    is_labeled[static_cast<std::size_t>(i)] = true;
    seen_classes.push_back(train.labels[static_cast<std::size_t>(i)]);
  }
  std::sort(labeled_idx.begin(), labeled_idx.end());

  DatasetBundle bundle;
  bundle.partition = ClassPartition::make(train.num_classes, seen_classes);
  bundle.labeled_indices = labeled_idx;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    if (!is_labeled[static_cast<std::size_t>(i)]) bundle.unlabeled_indices.push_back(i);
  }
  bundle.labeled = detail::gather_rows(train, bundle.labeled_indices, true);
  bundle.unlabeled = detail::gather_matrix(train, bundle.unlabeled_indices);
  bundle.test = test;
  bundle.validate();
  return bundle;
}

/// Isotropic unit-variance Gaussian clusters around centroids drawn from
/// N(0, separation^2 I) and re-drawn until pairwise centroid distances are
/// at least `separation`. Class id equals cluster id.
inline Dataset make_synthetic_blobs(int num_classes, int dims, int per_class,
                                    double separation, std::uint64_t seed) {
  if (num_classes <= 0 || dims <= 0 || per_class <= 0) {
    throw std::invalid_argument("blob counts must be positive");
  }
  if (!(separation > 0.0)) {
    throw std::invalid_argument("separation must be positive");
  }
  Rng rng = make_rng(seed, /*stream=*/5);
  std::normal_distribution<double> unit(0.0, 1.0);

  Eigen::MatrixXd centroids(num_classes, dims);
  double scale = separation;
  for (int c = 0; c < num_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Eigen::RowVectorXd cand(dims);
      for (int d = 0; d < dims; ++d) cand(d) = scale * unit(rng);
      placed = true;
      for (int prev = 0; prev < c; ++prev) {
        if ((centroids.row(prev) - cand).norm() < separation) {
          placed = false;
          break;
        }
      }
      if (placed) centroids.row(c) = cand;
      if (!placed && attempt % 100 == 99) scale *= 1.5;
    }
    if (!placed) {
      throw InsufficientDataError("could not place separated centroids");
    }
  }

  Dataset out;
  out.num_classes = num_classes;
  out.x.resize(static_cast<Eigen::Index>(num_classes) * per_class, dims);
  out.labels.reserve(static_cast<std::size_t>(num_classes) * per_class);
  Eigen::Index row = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (int j = 0; j < per_class; ++j) {
      for (int d = 0; d < dims; ++d) {
        out.x(row, d) = centroids(c, d) + unit(rng);
      }
      out.labels.push_back(c);
      ++row;
    }
  }
  return out;
}

/// Stratified hold-out: per_class_test examples of every class move to the
/// returned test set, the remainder stays as the training pool.
inline std::pair<Dataset, Dataset> hold_out_split(const Dataset& full,
                                                  int per_class_test,
                                                  std::uint64_t seed) {
  full.validate();
  if (per_class_test <= 0) {
    throw std::invalid_argument("per_class_test must be positive");
  }
  Rng rng = make_rng(seed, /*stream=*/6);
  std::vector<bool> to_test(static_cast<std::size_t>(full.size()), false);
  for (int c = 0; c < full.num_classes; ++c) {
    auto members = full.indices_of_class(c);
    if (static_cast<int>(members.size()) <= per_class_test) {
      throw InsufficientDataError("class " + std::to_string(c) +
                                  " too small for requested test split");
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (int j = 0; j < per_class_test; ++j) {
      to_test[static_cast<std::size_t>(members[static_cast<std::size_t>(j)])] = true;
    }
  }
  std::vector<Eigen::Index> train_rows, test_rows;
  for (Eigen::Index i = 0; i < full.size(); ++i) {
    (to_test[static_cast<std::size_t>(i)] ? test_rows : train_rows).push_back(i);
  }
  return {detail::gather_rows(full, train_rows, true),
          detail::gather_rows(full, test_rows, true)};
}

// ---------------------------------------------------------------------------
// Split manifest: line-delimited records that pin a bundle to its source pool.
// ---------------------------------------------------------------------------

inline void write_split_manifest(const std::string& path,
                                 const DatasetBundle& bundle,
                                 std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open manifest for writing: " + path);
  nlohmann::json header = {{"record", "header"},
                           {"kind", "split_manifest"},
                           {"version", 1},
                           {"seed", seed}};
  nlohmann::json partition = {{"record", "partition"},
                              {"num_classes", bundle.partition.num_classes},
                              {"seen", bundle.partition.seen}};
  nlohmann::json labeled = {{"record", "labeled_indices"},
                            {"indices", bundle.labeled_indices}};
  out << header.dump() << '\n'
      << partition.dump() << '\n'
      << labeled.dump() << '\n';
}

struct SplitManifest {
  std::uint64_t seed = 0;
  ClassPartition partition;
  std::vector<Eigen::Index> labeled_indices;
};

inline SplitManifest read_split_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path);
  SplitManifest m;
  std::string line;
  bool saw_header = false, saw_partition = false, saw_labeled = false;
  int num_classes = 0;
  std::vector<int> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line);
    const std::string kind = rec.at("record").get<std::string>();
    if (kind == "header") {
      if (rec.at("kind").get<std::string>() != "split_manifest" ||
          rec.at("version").get<int>() != 1) {
        throw ConfigError("unsupported manifest header in " + path);
      }
      m.seed = rec.at("seed").get<std::uint64_t>();
      saw_header = true;
    } else if (kind == "partition") {
      num_classes = rec.at("num_classes").get<int>();
      seen = rec.at("seen").get<std::vector<int>>();
      saw_partition = true;
    } else if (kind == "labeled_indices") {
      for (auto v : rec.at("indices")) {
        m.labeled_indices.push_back(v.get<Eigen::Index>());
      }
      saw_labeled = true;
    }
  }
  if (!saw_header || !saw_partition || !saw_labeled) {
    throw ConfigError("manifest missing records: " + path);
  }
  m.partition = ClassPartition::make(num_classes, seen);
  return m;
}

/// Rebuild the exact bundle a manifest was written from, given the same
/// source pools.
inline DatasetBundle apply_split_manifest(const Dataset& train,
                                          const Dataset& test,
                                          const SplitManifest& m) {
  train.validate();
  DatasetBundle bundle;
  bundle.partition = m.partition;
  bundle.labeled_indices = m.labeled_indices;
  std::vector<bool> is_labeled(static_cast<std::size_t>(train.size()), false);
  for (Eigen::Index i : m.labeled_indices) {
    if (i < 0 || i >= train.size()) {
      throw ConfigError("manifest index outside the training pool");
    }
    is_labeled[static_cast<std::size_t>(i)] = true;
  }
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    if (!is_labeled[static_cast<std::size_t>(i)]) bundle.unlabeled_indices.push_back(i);
  }
  bundle.labeled = detail::gather_rows(train, bundle.labeled_indices, true);
  bundle.unlabeled = detail::gather_matrix(train, bundle.unlabeled_indices);
  bundle.test = test;
  bundle.validate();
  return bundle;
}

}  // namespace owssl
