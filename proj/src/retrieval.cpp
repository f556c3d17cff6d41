#include "dpti/retrieval.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "dpti/errors.hpp"
#include "dpti/head.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

namespace {

RankedList rank_one(const std::vector<double>& query, int query_id, const DescriptorSet& gallery) {
  const std::size_t n = gallery.size();
  std::vector<double> dist(n);
  for (std::size_t j = 0; j < n; ++j) dist[j] = cosine_distance(query, gallery.vectors[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  RankedList list;
  list.query_id = query_id;
  list.positions = order;
  list.gallery_ids.reserve(n);
  list.distances.reserve(n);
  for (std::size_t j : order) {
    list.gallery_ids.push_back(gallery.labels[j]);
    list.distances.push_back(dist[j]);
  }
  return list;
}

}  // namespace

std::vector<RankedList> rank_all(const DescriptorSet& queries, const DescriptorSet& gallery, std::size_t threads) {
  if (gallery.size() == 0) throw DataError("rank_all: empty gallery");
  const std::size_t dim = gallery.vectors.front().size();
  for (const auto* set : {&queries, &gallery}) {
    if (set->labels.size() != set->vectors.size()) throw DimensionError("rank_all: labels and vectors differ in count");
    for (const auto& v : set->vectors) {
      if (v.size() != dim) {
        throw DimensionError("rank_all: descriptor length " + std::to_string(v.size()) + " differs from " +
                             std::to_string(dim));
      }
    }
  }
  std::vector<RankedList> out(queries.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = rank_one(queries.vectors[i], queries.labels[i], gallery);
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, queries.size()));
  if (threads == 1) {
    work(0, queries.size());
    return out;
  }
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (queries.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(queries.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  return out;
}

RetrievalReport compute_report(std::span<const RankedList> ranked, const std::string& mode) {
  if (ranked.empty()) throw DataError("compute_report: no queries");
  RetrievalReport report;
  report.mode = mode;
  report.n_query = ranked.size();
  report.n_gallery = ranked.front().gallery_ids.size();
  std::vector<std::size_t> first_hit_count(report.n_gallery, 0);
  for (const RankedList& list : ranked) {
    if (list.gallery_ids.size() != report.n_gallery) throw DimensionError("compute_report: ragged ranked lists");
    std::size_t hits = 0, first = 0, last = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < list.gallery_ids.size(); ++r) {
      if (list.gallery_ids[r] != list.query_id) continue;
      ++hits;
      if (hits == 1) first = r;
      last = r;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits == 0) {
      throw DataError("compute_report: query of identity " + std::to_string(list.query_id) +
                      " has no gallery positive");
    }
    ++first_hit_count[first];
    report.ap.push_back(precision_sum / static_cast<double>(hits));
    report.inp.push_back(static_cast<double>(hits) / static_cast<double>(last + 1));
  }
  const auto nq = static_cast<double>(report.n_query);
  std::size_t cumulative = 0;
  for (std::size_t k = 0; k < report.n_gallery; ++k) {
    cumulative += first_hit_count[k];
    report.cmc.push_back(static_cast<double>(cumulative) / nq);
  }
  report.map = std::accumulate(report.ap.begin(), report.ap.end(), 0.0) / nq;
  report.minp = std::accumulate(report.inp.begin(), report.inp.end(), 0.0) / nq;
  return report;
}

nlohmann::json to_json(const RetrievalReport& report) {
  return {{"cmc", report.cmc},         {"map", report.map},
          {"minp", report.minp},       {"n_query", report.n_query},
          {"n_gallery", report.n_gallery}, {"mode", report.mode}};
}

}  // namespace dpti
