// metrics.cc

#include "opensep/metrics.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "opensep/errors.h"

namespace opensep {

namespace {

double energy(std::span<const double> v) {
  double e = 0.0;
  for (double x : v) e += x * x;
  return e;
}

double ratio_db(double num, double den, double cap_db) {
  if (den <= 0.0) return cap_db;
  return std::min(cap_db, 10.0 * std::log10(num / den));
}

// Precomputed projection machinery for one reference set.
class Projector {
 public:
  Projector(std::span<const Waveform> refs, const BssEvalOptions& opts)
      : refs_(refs), taps_(std::max(1, opts.filter_length)) {
    if (refs.empty()) throw InvalidInput("bss_eval needs at least one reference");
    n_ = refs[0].size();
    for (const auto& r : refs)
      if (r.size() != n_) throw InvalidInput("bss_eval references differ in length");
    if (n_ == 0) throw InvalidInput("bss_eval references are empty");
    const int k = static_cast<int>(refs.size());

    Eigen::MatrixXd g0(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) g0(i, j) = corr(i, j, 0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g0);
    const double lmax = eig.eigenvalues().maxCoeff();
    const double lmin = eig.eigenvalues().minCoeff();
    if (!(lmax > 0.0) || !(lmin > 0.0) || lmax / lmin >= opts.max_condition)
      throw DegenerateReferences("reference Gram matrix is singular or ill-conditioned");

    const int dim = k * taps_;
    Eigen::MatrixXd gram(dim, dim);
    if (taps_ == 1) {
      gram = g0;
    } else {
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          std::vector<double> lag(2 * taps_ - 1);
          for (int d = -(taps_ - 1); d <= taps_ - 1; ++d) lag[d + taps_ - 1] = corr(i, j, d);
          for (int a = 0; a < taps_; ++a)
            for (int b = 0; b < taps_; ++b) gram(i * taps_ + a, j * taps_ + b) = lag[a - b + taps_ - 1];
        }
    }
    full_ = gram.ldlt();
    for (int j = 0; j < k; ++j)
      single_.push_back(gram.block(j * taps_, j * taps_, taps_, taps_).ldlt());
  }

  std::size_t out_length() const { return n_ + taps_ - 1; }

  Decomposition decompose(const Waveform& est, int target) const {
    if (est.size() != n_) throw InvalidInput("estimate and references differ in length");
    const int k = static_cast<int>(refs_.size());
    if (target < 0 || target >= k) throw InvalidInput("target index out of range");
    const std::size_t m = out_length();

    Eigen::VectorXd d(k * taps_);
    for (int i = 0; i < k; ++i)
      for (int a = 0; a < taps_; ++a) {
        // sum_u r_i[u] e[u + a]
        double acc = 0.0;
        const auto& r = refs_[i].samples;
        for (std::size_t u = 0; u + a < n_; ++u) acc += r[u] * est.samples[u + a];
        d(i * taps_ + a) = acc;
      }
    const Eigen::VectorXd c_all = full_.solve(d);
    const Eigen::VectorXd c_tgt = single_[target].solve(d.segment(target * taps_, taps_));

    Decomposition out;
    out.s_target = synth(c_tgt, target, m);
    std::vector<double> p_all(m, 0.0);
    for (int i = 0; i < k; ++i) {
      auto part = synth(c_all.segment(i * taps_, taps_), i, m);
      for (std::size_t t = 0; t < m; ++t) p_all[t] += part[t];
    }
    out.e_interf.resize(m);
    out.e_artif.resize(m);
    for (std::size_t t = 0; t < m; ++t) {
      const double e = t < n_ ? est.samples[t] : 0.0;
      out.e_interf[t] = p_all[t] - out.s_target[t];
      out.e_artif[t] = e - p_all[t];
    }
    return out;
  }

 private:
  // sum_t r_i[t] r_j[t + lag]
  double corr(int i, int j, int lag) const {
    const auto& a = refs_[i].samples;
    const auto& b = refs_[j].samples;
    double acc = 0.0;
    if (lag >= 0) {
      for (std::size_t t = 0; t + lag < n_; ++t) acc += a[t] * b[t + lag];
    } else {
      for (std::size_t t = -lag; t < n_; ++t) acc += a[t] * b[t + lag];
    }
    return acc;
  }

  std::vector<double> synth(const Eigen::VectorXd& coef, int ref, std::size_t m) const {
    std::vector<double> out(m, 0.0);
    const auto& r = refs_[ref].samples;
    for (int a = 0; a < taps_; ++a) {
      const double c = coef(a);
      if (c == 0.0) continue;
      for (std::size_t u = 0; u < n_; ++u) out[u + a] += c * r[u];
    }
    return out;
  }

  std::span<const Waveform> refs_;
  int taps_;
  std::size_t n_ = 0;
  Eigen::LDLT<Eigen::MatrixXd> full_;
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> single_;
};

bool target_is_zero(const Decomposition& d) {
  const double s = energy(d.s_target);
  double total = 0.0;
  for (std::size_t t = 0; t < d.s_target.size(); ++t) {
    const double e = d.s_target[t] + d.e_interf[t] + d.e_artif[t];
    total += e * e;
  }
  return s == 0.0 || s <= 1e-24 * total;
}

struct ScoreMatrix {
  std::vector<std::vector<double>> sdr, sir;
};

ScoreMatrix score_all(std::span<const Waveform> estimates, std::span<const Waveform> references,
                      const BssEvalOptions& opts) {
  Projector proj(references, opts);
  ScoreMatrix m;
  m.sdr.assign(estimates.size(), std::vector<double>(references.size()));
  m.sir = m.sdr;
  for (std::size_t i = 0; i < estimates.size(); ++i)
    for (std::size_t j = 0; j < references.size(); ++j) {
      const auto d = proj.decompose(estimates[i], static_cast<int>(j));
      m.sdr[i][j] = sdr(d, opts.cap_db);
      m.sir[i][j] = sir(d, opts.cap_db);
    }
  return m;
}

// -inf scores are replaced by a large finite penalty so sums stay ordered.
double finite_score(double v) { return std::isinf(v) && v < 0 ? -1e6 : v; }

// Lexicographic search: each estimate takes a reference (lowest index first)
// or stays unassigned when there are more estimates than references. The
// first optimum found wins, so ties favour matching earlier estimates.
struct Search {
  const std::vector<std::vector<double>>& score;
  std::size_t nr;
  int skips_left;
  std::vector<int> current;
  std::vector<bool> used;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<int> best_map;

  void run(std::size_t row, double acc) {
    if (row == score.size()) {
      if (acc > best) {
        best = acc;
        best_map = current;
      }
      return;
    }
    for (std::size_t c = 0; c < nr; ++c) {
      if (used[c]) continue;
      used[c] = true;
      current[row] = static_cast<int>(c);
      run(row + 1, acc + score[row][c]);
      used[c] = false;
    }
    if (skips_left > 0) {
      --skips_left;
      current[row] = -1;
      run(row + 1, acc);
      ++skips_left;
    }
  }
};

}  // namespace

Decomposition decompose(const Waveform& estimate, std::span<const Waveform> references,
                        int target_index, const BssEvalOptions& opts) {
  return Projector(references, opts).decompose(estimate, target_index);
}

double sdr(const Decomposition& d, double cap_db) {
  if (target_is_zero(d)) return kNegInfinityDb;
  double den = 0.0;
  for (std::size_t t = 0; t < d.e_interf.size(); ++t) {
    const double e = d.e_interf[t] + d.e_artif[t];
    den += e * e;
  }
  return ratio_db(energy(d.s_target), den, cap_db);
}

double sir(const Decomposition& d, double cap_db) {
  if (target_is_zero(d)) return kNegInfinityDb;
  return ratio_db(energy(d.s_target), energy(d.e_interf), cap_db);
}

double sar(const Decomposition& d, double cap_db) {
  if (target_is_zero(d)) return kNegInfinityDb;
  double num = 0.0;
  for (std::size_t t = 0; t < d.s_target.size(); ++t) {
    const double v = d.s_target[t] + d.e_interf[t];
    num += v * v;
  }
  return ratio_db(num, energy(d.e_artif), cap_db);
}

std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
  // Classic potentials formulation, 1-based internally.
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (n > m) throw InvalidInput("hungarian: more rows than columns");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

MatchResult best_match_permutation(std::span<const Waveform> estimates,
                                   std::span<const Waveform> references, const BssEvalOptions& opts) {
  if (estimates.empty() || references.empty())
    throw InvalidInput("best_match_permutation needs at least one estimate and one reference");
  const auto scores = score_all(estimates, references, opts);
  const std::size_t ne = estimates.size(), nr = references.size();

  MatchResult res;
  if (std::max(ne, nr) <= 6) {
    std::vector<std::vector<double>> score(ne, std::vector<double>(nr));
    for (std::size_t i = 0; i < ne; ++i)
      for (std::size_t j = 0; j < nr; ++j) score[i][j] = finite_score(scores.sdr[i][j]);
    Search search{score, nr, static_cast<int>(ne > nr ? ne - nr : 0),
                  std::vector<int>(ne, -1), std::vector<bool>(nr, false), -std::numeric_limits<double>::infinity(), {}};
    search.run(0, 0.0);
    res.assignment = search.best_map;
  } else {
    // Hungarian wants rows <= cols, so put the smaller side on rows.
    const bool rows_are_refs = ne > nr;
    const std::size_t rows = rows_are_refs ? nr : ne;
    const std::size_t cols = rows_are_refs ? ne : nr;
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        cost[r][c] = -finite_score(rows_are_refs ? scores.sdr[c][r] : scores.sdr[r][c]);
    const auto row_to_col = hungarian_min_cost(cost);
    res.assignment.assign(ne, -1);
    for (std::size_t r = 0; r < rows; ++r) {
      if (rows_are_refs)
        res.assignment[row_to_col[r]] = static_cast<int>(r);
      else
        res.assignment[r] = row_to_col[r];
    }
  }
  for (std::size_t i = 0; i < ne; ++i) {
    const int j = res.assignment[i];
    if (j >= 0) res.pairs.push_back({static_cast<int>(i), j, scores.sdr[i][j], scores.sir[i][j]});
  }
  return res;
}

MatchResult score_aligned(std::span<const Waveform> estimates, std::span<const Waveform> references,
                          const BssEvalOptions& opts) {
  if (estimates.size() != references.size() || estimates.empty())
    throw InvalidInput("score_aligned needs one estimate per reference");
  Projector proj(references, opts);
  MatchResult res;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const auto d = proj.decompose(estimates[i], static_cast<int>(i));
    res.assignment.push_back(static_cast<int>(i));
    res.pairs.push_back({static_cast<int>(i), static_cast<int>(i), sdr(d, opts.cap_db), sir(d, opts.cap_db)});
  }
  return res;
}

BatchReport aggregate(std::vector<MatchResult> cases, std::vector<std::string> names) {
  BatchReport rep;
  std::vector<double> sdrs, sirs;
  for (const auto& c : cases)
    for (const auto& p : c.pairs) {
      ++rep.pair_count;
      if (std::isinf(p.sdr) && p.sdr < 0) {
        ++rep.excluded_count;
        continue;
      }
      sdrs.push_back(p.sdr);
      sirs.push_back(p.sir);
    }
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
      mean = sd = 0.0;
      return;
    }
    mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / v.size());
  };
  mean_std(sdrs, rep.mean_sdr, rep.std_sdr);
  mean_std(sirs, rep.mean_sir, rep.std_sir);
  if (names.size() != cases.size()) {
    names.clear();
    for (std::size_t i = 0; i < cases.size(); ++i) names.push_back("case" + std::to_string(i));
  }
  rep.cases = std::move(cases);
  rep.names = std::move(names);
  return rep;
}

BatchReport evaluate_batch(std::span<const EvalCase> cases, const BssEvalOptions& opts) {
  if (cases.empty()) throw InvalidInput("evaluate_batch needs at least one case");
  std::vector<MatchResult> results;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    results.push_back(best_match_permutation(cases[i].estimates, cases[i].references, opts));
    names.push_back(cases[i].name.empty() ? "case" + std::to_string(i) : cases[i].name);
  }
  return aggregate(std::move(results), std::move(names));
}

std::string BatchReport::to_json() const {
  using nlohmann::json;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j;
  j["schema_version"] = 1;
  j["cases"] = json::array();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    json c;
    c["name"] = names[i];
    c["assignment"] = cases[i].assignment;
    c["sdr"] = json::array();
    c["sir"] = json::array();
    for (const auto& p : cases[i].pairs) {
      c["sdr"].push_back(num(p.sdr));
      c["sir"].push_back(num(p.sir));
    }
    j["cases"].push_back(c);
  }
  j["mean_sdr"] = mean_sdr;
  j["std_sdr"] = std_sdr;
  j["mean_sir"] = mean_sir;
  j["std_sir"] = std_sir;
  j["pair_count"] = pair_count;
  j["excluded_count"] = excluded_count;
  return j.dump(2);
}

std::string BatchReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "metric,mean,std,pairs,excluded\n";
  os << "SDR," << mean_sdr << "," << std_sdr << "," << pair_count << "," << excluded_count << "\n";
  os << "SIR," << mean_sir << "," << std_sir << "," << pair_count << "," << excluded_count << "\n";
  return os.str();
}

}  // namespace opensep
