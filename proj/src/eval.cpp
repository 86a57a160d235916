#include "pad/eval.hpp"

#include "pad/io.hpp"
#include "pad/lifelong.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pad {

Matrix pairwise_distances(const Matrix& q, const Matrix& g) {
  if (!q.allFinite() || !g.allFinite()) throw std::invalid_argument("pairwise_distances: non-finite input");
  if (q.cols() != g.cols()) throw std::invalid_argument("pairwise_distances: dimension mismatch");
  return (Matrix::Ones(q.rows(), g.rows()) - q * g.transpose()).eval();
}

RankingRow rank_gallery(std::span<const double> distances, int query_id, int query_cam, std::span<const int> gallery_ids,
                        std::span<const int> gallery_cams) {
  const size_t n = distances.size();
  if (gallery_ids.size() != n || gallery_cams.size() != n) throw std::invalid_argument("rank_gallery: size mismatch");
  RankingRow r;
  r.order.resize(n);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) { return distances[a] < distances[b]; });
  for (int g : r.order) {
    const bool same_id = gallery_ids[g] == query_id;
    r.distances.push_back(distances[g]);
    r.valid.push_back(!(same_id && gallery_cams[g] == query_cam));
    r.positive.push_back(same_id && gallery_cams[g] != query_cam);
  }
  return r;
}

std::optional<double> compute_ap(const RankingRow& row) {
  int rank = 0, hits = 0;
  double sum = 0;
  for (size_t i = 0; i < row.order.size(); ++i) {
    if (!row.valid[i]) continue;
    ++rank;
    if (row.positive[i]) {
      ++hits;
      sum += static_cast<double>(hits) / rank;
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / hits;
}

std::vector<double> compute_cmc(std::span<const RankingRow> rows, int max_rank) {
  std::vector<double> cmc(static_cast<size_t>(std::max(0, max_rank)), 0.0);
  int valid = 0;
  for (const auto& row : rows) {
    int rank = 0, first = -1;
    bool any = false;
    for (size_t i = 0; i < row.order.size(); ++i) {
      if (!row.valid[i]) continue;
      if (row.positive[i]) {
        any = true;
        if (first < 0) first = rank;
      }
      ++rank;
    }
    if (!any) continue;
    ++valid;
    for (int r = first; r < max_rank; ++r) cmc[static_cast<size_t>(r)] += 1.0;
  }
  if (valid > 0)
    for (double& c : cmc) c /= valid;
  return cmc;
}

RetrievalSummary compute_map(std::span<const RankingRow> rows) {
  RetrievalSummary s;
  double sum = 0;
  for (const auto& row : rows) {
    if (auto ap = compute_ap(row)) {
      sum += *ap;
      ++s.valid_queries;
    } else {
      ++s.excluded_queries;
    }
  }
  if (s.valid_queries > 0) s.mAP = sum / s.valid_queries;
  return s;
}

RetrievalSummary evaluate_retrieval(const Matrix& query_feats, std::span<const int> q_ids, std::span<const int> q_cams,
                                    const Matrix& gallery_feats, std::span<const int> g_ids,
                                    std::span<const int> g_cams, int max_rank) {
  const Matrix d = pairwise_distances(query_feats, gallery_feats);
  std::vector<RankingRow> rows;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    std::vector<double> di(d.row(i).data(), d.row(i).data() + d.cols());
    rows.push_back(rank_gallery(di, q_ids[static_cast<size_t>(i)], q_cams[static_cast<size_t>(i)], g_ids, g_cams));
  }
  RetrievalSummary s = compute_map(rows);
  s.cmc = compute_cmc(rows, max_rank);
  return s;
}

int MetricsReport::final_stage() const {
  int s = -1;
  for (const auto& e : entries) s = std::max(s, e.stage);
  return s;
}

std::vector<MetricEntry> MetricsReport::stage_entries(int stage, const std::string& split) const {
  std::vector<MetricEntry> out;
  for (const auto& e : entries)
    if (e.stage == stage && e.split == split) out.push_back(e);
  return out;
}

namespace {

double average(const std::vector<MetricEntry>& es, bool map) {
  if (es.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (const auto& e : es) s += map ? e.mAP : e.R1;
  return s / static_cast<double>(es.size());
}

}  // namespace

double MetricsReport::seen_avg_map(int stage) const { return average(stage_entries(stage, "seen"), true); }
double MetricsReport::seen_avg_r1(int stage) const { return average(stage_entries(stage, "seen"), false); }
double MetricsReport::unseen_avg_map(int stage) const { return average(stage_entries(stage, "unseen"), true); }
double MetricsReport::unseen_avg_r1(int stage) const { return average(stage_entries(stage, "unseen"), false); }

std::map<int, double> MetricsReport::forgetting() const {
  const int last = final_stage();
  std::map<int, double> best, final_map;
  for (const auto& e : entries) {
    if (e.split != "seen") continue;
    if (e.stage == last) final_map[e.domain] = e.mAP;
    else best[e.domain] = std::max(best.contains(e.domain) ? best[e.domain] : -1.0, e.mAP);
  }
  std::map<int, double> out;
  for (const auto& [d, f] : final_map) out[d] = best.contains(d) ? best[d] - f : 0.0;
  return out;
}

const DiagnosticEntry* MetricsReport::diagnostic(int stage) const {
  for (const auto& d : diagnostics)
    if (d.stage == stage) return &d;
  return nullptr;
}

std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "stage,domain,split,mAP,R1\n";
  for (const auto& e : r.entries)
    os << e.stage << ',' << e.domain << ',' << e.split << ',' << format_double(e.mAP) << ',' << format_double(e.R1)
       << '\n';
  return os.str();
}

std::string diagnostics_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "stage,drift,rho_pearson,rho_spearman\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string("nan") : format_double(v); };
  for (const auto& d : r.diagnostics)
    os << d.stage << ',' << cell(d.drift) << ',' << cell(d.rho_pearson) << ',' << cell(d.rho_spearman) << '\n';
  return os.str();
}

namespace {

std::vector<std::vector<std::string>> split_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

}  // namespace

MetricsReport parse_metrics(const std::string& metrics, const std::string& diagnostics) {
  MetricsReport r;
  auto m = split_csv(metrics);
  if (m.empty() || m[0] != std::vector<std::string>{"stage", "domain", "split", "mAP", "R1"})
    throw std::runtime_error("metrics.csv: unexpected header");
  for (size_t i = 1; i < m.size(); ++i) {
    if (m[i].size() != 5) throw std::runtime_error("metrics.csv: malformed row " + std::to_string(i));
    r.entries.push_back({std::stoi(m[i][0]), std::stoi(m[i][1]), m[i][2], parse_double(m[i][3]), parse_double(m[i][4])});
  }
  auto d = split_csv(diagnostics);
  for (size_t i = 1; i < d.size(); ++i) {
    if (d[i].size() != 4) throw std::runtime_error("diagnostics.csv: malformed row " + std::to_string(i));
    DiagnosticEntry e{std::stoi(d[i][0]), parse_double(d[i][1]), parse_double(d[i][2]), parse_double(d[i][3]), false};
    e.rho_defined = !std::isnan(e.rho_pearson);
    r.diagnostics.push_back(e);
  }
  return r;
}

StageEvaluation evaluate_protocol(const ModelState& m, std::span<const EvalSplit* const> seen,
                                  std::span<const EvalSplit* const> unseen, int stage) {
  StageEvaluation out;
  auto run = [&](const EvalSplit& split, const std::string& kind) {
    if (split.query.empty() || split.gallery.empty())
      throw std::invalid_argument("evaluate_protocol: empty split for domain " + std::to_string(split.domain_id));
    SplitEmbedding emb;
    emb.domain = split.domain_id;
    emb.split = kind;
    emb.query = embed_images(m, split.query, &emb.query_routing);
    emb.gallery = embed_images(m, split.gallery);
    std::vector<int> qi, qc, gi, gc;
    for (const auto& img : split.query) {
      qi.push_back(img.identity);
      qc.push_back(img.camera);
    }
    for (const auto& img : split.gallery) {
      gi.push_back(img.identity);
      gc.push_back(img.camera);
    }
    RetrievalSummary s = evaluate_retrieval(emb.query, qi, qc, emb.gallery, gi, gc, 1);
    out.entries.push_back({stage, split.domain_id, kind, s.mAP, s.cmc.at(0)});
    out.embeddings.push_back(std::move(emb));
  };
  for (const EvalSplit* s : seen) run(*s, "seen");
  for (const EvalSplit* s : unseen) run(*s, "unseen");
  return out;
}

double semantic_drift_score(const Matrix& features, const Matrix& text_bank) {
  if (text_bank.rows() == 0) throw std::invalid_argument("semantic_drift_score: empty bank");
  if (features.rows() == 0) throw std::invalid_argument("semantic_drift_score: no features");
  Matrix f = features, t = text_bank;
  for (Eigen::Index i = 0; i < f.rows(); ++i) f.row(i).normalize();
  for (Eigen::Index i = 0; i < t.rows(); ++i) t.row(i).normalize();
  const Matrix cos = f * t.transpose();
  return cos.rowwise().maxCoeff().mean();
}

double semantic_drift_score(const ModelState& m, const EvalSplit& split, const Matrix& text_bank) {
  return semantic_drift_score(embed_images(m, split.query), text_bank);
}

Vector routing_histogram(const RoutingRecord& record, int pool_size) {
  Vector h = Vector::Zero(pool_size);
  for (const auto& image : record)
    for (const auto& layer : image)
      for (int s : layer) h[s] += 1.0;
  const double total = h.sum();
  if (total > 0) h /= total;
  return h;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const size_t n = x.size();
  if (n != y.size() || n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (size_t i = 0; i < idx.size();) {
    size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

double cosine(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  const double n = a.norm() * b.norm();
  return n > 0 ? a.dot(b) / n : 0.0;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

Correlation prompt_routing_correlation(std::span<const Vector> histograms, std::span<const RowVector> mean_features) {
  if (histograms.size() != mean_features.size()) throw std::invalid_argument("prompt_routing_correlation: size mismatch");
  if (histograms.size() < 2) throw std::invalid_argument("prompt_routing_correlation: needs at least two domains");
  std::vector<double> act, feat;
  for (size_t i = 0; i < histograms.size(); ++i)
    for (size_t j = i + 1; j < histograms.size(); ++j) {
      act.push_back(cosine(histograms[i].transpose(), histograms[j].transpose()));
      feat.push_back(cosine(mean_features[i], mean_features[j]));
    }
  Correlation c;
  c.pearson = pearson(act, feat);
  c.spearman = spearman(act, feat);
  c.defined = !std::isnan(c.pearson);
  return c;
}

}  // namespace pad
