#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mptf/common.hpp"
#include "mptf/fusion_net.hpp"

namespace mptf {

struct IndexEntry {
  std::string frame_id;
  Descriptor descriptor;
  double east = 0.0;
  double north = 0.0;
};

/// Immutable database of unit descriptors with capture positions.
class DescriptorIndex {
 public:
  explicit DescriptorIndex(std::vector<IndexEntry> entries) : entries_(std::move(entries)) {
    std::set<std::string> ids;
    for (const auto& e : entries_) {
      if (!ids.insert(e.frame_id).second) throw Error("DescriptorIndex: duplicate frame_id " + e.frame_id);
      if (e.descriptor.size() != entries_.front().descriptor.size()) {
        throw Error("DescriptorIndex: descriptor dimension mismatch at " + e.frame_id);
      }
      double ss = 0.0;
      for (double v : e.descriptor.values) ss += v * v;
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) throw Error("DescriptorIndex: descriptor " + e.frame_id + " is not unit norm");
    }
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  const IndexEntry& operator[](std::size_t i) const { return entries_[i]; }

  /// Hash over ids, positions and descriptor bits.
  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& e : entries_) {
      h.update(e.frame_id);
      h.update_pod(e.east);
      h.update_pod(e.north);
      for (double v : e.descriptor.values) h.update_pod(v);
    }
    return h.digest();
  }

 private:
  std::vector<IndexEntry> entries_;
};

struct Match {
  std::size_t index = 0;
  std::string frame_id;
  double distance = 0.0;
};

/// Exact k nearest entries by Euclidean distance, ascending; equal distances
/// are ordered by frame_id.
inline std::vector<Match> query_topk(const DescriptorIndex& index, const Descriptor& q, std::size_t k) {
  if (index.empty()) throw Error("query_topk: empty index");
  if (k < 1) throw Error("query_topk: k must be >= 1");
  std::vector<Match> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    all.push_back({i, index[i].frame_id, descriptor_distance(q, index[i].descriptor)});
  }
  auto less = [](const Match& a, const Match& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.frame_id < b.frame_id;
  };
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), less);
  all.resize(take);
  return all;
}

struct EvalQuery {
  std::string frame_id;
  Descriptor descriptor;
  double east = 0.0;
  double north = 0.0;
};

namespace detail {

inline bool in_radius(const IndexEntry& e, const EvalQuery& q, double radius) {
  return std::hypot(e.east - q.east, e.north - q.north) <= radius;
}

inline bool has_revisit(const DescriptorIndex& index, const EvalQuery& q, double radius) {
  return std::any_of(index.entries().begin(), index.entries().end(),
                     [&](const IndexEntry& e) { return in_radius(e, q, radius); });
}

}  // namespace detail

struct RecallResult {
  std::map<int, double> recall_at;
  std::size_t evaluated = 0;  ///< queries with at least one in-radius entry
  std::size_t excluded = 0;   ///< queries without any
};

/// Fraction of revisit queries whose top-k contains an entry within
/// `pos_radius` meters. Non-revisit queries are excluded and counted.
inline RecallResult recall_at_k(const DescriptorIndex& index, const std::vector<EvalQuery>& queries,
                                const std::vector<int>& ks, double pos_radius = 9.0) {
  if (queries.empty()) throw Error("recall_at_k: empty query set");
  if (ks.empty()) throw Error("recall_at_k: no k values");
  const int kmax = *std::max_element(ks.begin(), ks.end());
  if (kmax < 1) throw Error("recall_at_k: k must be >= 1");
  RecallResult out;
  std::map<int, std::size_t> hits;
  for (int k : ks) hits[k] = 0;
  for (const auto& q : queries) {
    if (!detail::has_revisit(index, q, pos_radius)) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    const auto top = query_topk(index, q.descriptor, static_cast<std::size_t>(kmax));
    std::size_t first_hit = top.size();
    for (std::size_t r = 0; r < top.size(); ++r) {
      if (detail::in_radius(index[top[r].index], q, pos_radius)) {
        first_hit = r;
        break;
      }
    }
    for (int k : ks)
      if (first_hit < static_cast<std::size_t>(k)) ++hits[k];
  }
  for (int k : ks) {
    out.recall_at[k] = out.evaluated == 0 ? 0.0 : static_cast<double>(hits[k]) / static_cast<double>(out.evaluated);
  }
  return out;
}

struct PrPoint {
  double tau = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct EvalReport {
  std::map<int, double> recall_at;
  double max_f1 = 0.0;
  double pr_auc = 0.0;
  std::vector<PrPoint> pr_points;
  std::size_t queries = 0;
  std::size_t revisit_queries = 0;
};

/// Threshold sweep on top-1 matches. For each tau among the observed top-1
/// distances (plus +inf, accept everything) a query's top-1 is accepted iff
/// its distance < tau. TP: accepted and within radius; FP: accepted and not;
/// recall = TP / revisit queries; precision = TP / accepted, taken as 1 when
/// nothing is accepted. AUC is the trapezoid rule over the points in
/// ascending tau order (recall is non-decreasing along it).
inline EvalReport pr_curve_max_f1_auc(const DescriptorIndex& index, const std::vector<EvalQuery>& queries,
                                      double pos_radius = 9.0) {
  if (queries.empty()) throw Error("pr_curve: empty query set");
  struct Top1 {
    double distance;
    bool correct;
    bool revisit;
  };
  std::vector<Top1> tops;
  tops.reserve(queries.size());
  std::size_t revisits = 0;
  for (const auto& q : queries) {
    const auto best = query_topk(index, q.descriptor, 1).front();
    const bool revisit = detail::has_revisit(index, q, pos_radius);
    revisits += revisit;
    tops.push_back({best.distance, detail::in_radius(index[best.index], q, pos_radius), revisit});
  }
  if (revisits == 0) throw Error("pr_curve: no revisit queries, recall undefined");

  std::vector<double> taus;
  for (const auto& t : tops) taus.push_back(t.distance);
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  taus.push_back(std::numeric_limits<double>::infinity());

  // Sweep with tops sorted by distance; accepted set grows monotonically.
  std::vector<Top1> sorted = tops;
  std::sort(sorted.begin(), sorted.end(), [](const Top1& a, const Top1& b) { return a.distance < b.distance; });
  EvalReport rep;
  rep.queries = queries.size();
  rep.revisit_queries = revisits;
  std::size_t next = 0, tp = 0, fp = 0;
  for (double tau : taus) {
    while (next < sorted.size() && sorted[next].distance < tau) {
      if (sorted[next].correct)
        ++tp;
      else
        ++fp;
      ++next;
    }
    const double precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(revisits);
    rep.pr_points.push_back({tau, precision, recall});
    const double f1 = (tp == 0) ? 0.0 : 2.0 * precision * recall / (precision + recall);
    rep.max_f1 = std::max(rep.max_f1, f1);
  }
  for (std::size_t i = 1; i < rep.pr_points.size(); ++i) {
    const auto& a = rep.pr_points[i - 1];
    const auto& b = rep.pr_points[i];
    rep.pr_auc += (b.recall - a.recall) * 0.5 * (a.precision + b.precision);
  }
  return rep;
}

/// Recall@k plus the PR metrics.
inline EvalReport evaluate(const DescriptorIndex& index, const std::vector<EvalQuery>& queries,
                           const std::vector<int>& ks = {1, 5, 10}, double pos_radius = 9.0) {
  EvalReport rep = pr_curve_max_f1_auc(index, queries, pos_radius);
  rep.recall_at = recall_at_k(index, queries, ks, pos_radius).recall_at;
  return rep;
}

}  // namespace mptf
