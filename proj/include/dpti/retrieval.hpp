#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dpti {

/// Labelled descriptor vectors in insertion order.
struct DescriptorSet {
  std::vector<std::vector<double>> vectors;
  std::vector<int> labels;

  void add(std::vector<double> vector, int label) {
    vectors.push_back(std::move(vector));
    labels.push_back(label);
  }
  std::size_t size() const { return vectors.size(); }
};

struct RankedList {
  int query_id = 0;
  std::vector<int> gallery_ids;        // ordered by ascending distance
  std::vector<std::size_t> positions;  // gallery insertion index of each entry
  std::vector<double> distances;
};

/// Cosine distance between every query and gallery vector, each row sorted
/// ascending with ties broken by gallery insertion index. `threads` splits
/// the query rows across workers; the result does not depend on it.
std::vector<RankedList> rank_all(const DescriptorSet& queries, const DescriptorSet& gallery, std::size_t threads = 1);

struct RetrievalReport {
  std::vector<double> cmc;  // cmc[k-1] = Rank-k accuracy, k = 1..gallery size
  double map = 0.0;
  double minp = 0.0;
  std::vector<double> ap;
  std::vector<double> inp;
  std::size_t n_query = 0;
  std::size_t n_gallery = 0;
  std::string mode;

  double rank(std::size_t k) const { return cmc.at(k - 1); }
  bool operator==(const RetrievalReport&) const = default;
};

/// AP averages the precision at each positive's rank over all positives;
/// INP = (number of positives) / (rank of the last positive). Throws
/// DataError if a query has no positive in its list.
RetrievalReport compute_report(std::span<const RankedList> ranked, const std::string& mode = "");

nlohmann::json to_json(const RetrievalReport& report);

}  // namespace dpti
