#pragma once

// Retrieval metrics, the seen/unseen protocol and the drift and routing
// diagnostics.

#include "pad/autograd.hpp"
#include "pad/encoders.hpp"
#include "pad/synthdata.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pad {

struct ModelState;

/// Cosine distance 1 - q.g between rows; throws on non-finite input.
Matrix pairwise_distances(const Matrix& q, const Matrix& g);

/// One query's gallery ordering. Entries with the query's identity and camera
/// are invalid and never count as positive or negative.
struct RankingRow {
  std::vector<int> order;         // gallery indices, nearest first
  std::vector<double> distances;  // along `order`
  std::vector<bool> valid;        // along `order`
  std::vector<bool> positive;     // along `order`
};

/// Stable ascending sort on distance, ties to the lower gallery index.
RankingRow rank_gallery(std::span<const double> distances, int query_id, int query_cam, std::span<const int> gallery_ids,
                        std::span<const int> gallery_cams);

/// Mean precision at each valid positive; nullopt without valid positives.
std::optional<double> compute_ap(const RankingRow& row);

struct RetrievalSummary {
  double mAP = 0;
  std::vector<double> cmc;  // cmc[r-1] = hit within top r
  int valid_queries = 0;
  int excluded_queries = 0;
};

/// Queries without a valid positive are excluded and counted.
RetrievalSummary compute_map(std::span<const RankingRow> rows);
std::vector<double> compute_cmc(std::span<const RankingRow> rows, int max_rank);
RetrievalSummary evaluate_retrieval(const Matrix& query_feats, std::span<const int> q_ids, std::span<const int> q_cams,
                                    const Matrix& gallery_feats, std::span<const int> g_ids,
                                    std::span<const int> g_cams, int max_rank = 10);

struct MetricEntry {
  int stage = 0;
  int domain = 0;
  std::string split;  // "seen" or "unseen"
  double mAP = 0;
  double R1 = 0;
};

struct DiagnosticEntry {
  int stage = 0;
  double drift = 0;
  double rho_pearson = 0;
  double rho_spearman = 0;
  bool rho_defined = false;
};

struct MetricsReport {
  std::vector<MetricEntry> entries;
  std::vector<DiagnosticEntry> diagnostics;

  int final_stage() const;
  std::vector<MetricEntry> stage_entries(int stage, const std::string& split) const;
  double seen_avg_map(int stage) const;
  double seen_avg_r1(int stage) const;
  double unseen_avg_map(int stage) const;
  double unseen_avg_r1(int stage) const;
  /// Per seen domain: best mAP at an earlier stage minus final-stage mAP.
  std::map<int, double> forgetting() const;
  const DiagnosticEntry* diagnostic(int stage) const;
};

std::string metrics_csv(const MetricsReport& r);
std::string diagnostics_csv(const MetricsReport& r);
/// Inverse of the two writers above (the diagnostics text may be empty).
MetricsReport parse_metrics(const std::string& metrics, const std::string& diagnostics);

/// Query-side features and prompt routing of one split, kept for diagnostics.
struct SplitEmbedding {
  int domain = 0;
  std::string split;
  Matrix query;
  Matrix gallery;
  RoutingRecord query_routing;
};

struct StageEvaluation {
  std::vector<MetricEntry> entries;
  std::vector<SplitEmbedding> embeddings;
};

/// Image encoder only; one entry per split, seen first.
StageEvaluation evaluate_protocol(const ModelState& m, std::span<const EvalSplit* const> seen,
                                  std::span<const EvalSplit* const> unseen, int stage);

/// Mean over rows of the max cosine against the bank rows.
double semantic_drift_score(const Matrix& features, const Matrix& text_bank);
double semantic_drift_score(const ModelState& m, const EvalSplit& split, const Matrix& text_bank);

/// Normalized selection counts per slot over all images and layers.
Vector routing_histogram(const RoutingRecord& record, int pool_size);

struct Correlation {
  double pearson = 0;
  double spearman = 0;
  bool defined = false;
};

double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

/// Over all domain pairs: cosine of activation histograms vs cosine of mean
/// features. Needs at least two domains; undefined variance gives NaN.
Correlation prompt_routing_correlation(std::span<const Vector> histograms, std::span<const RowVector> mean_features);

}  // namespace pad
