// metrics.h
// bss_eval-style SDR/SIR via orthogonal projections, best-match assignment
// of estimates to references, and batch aggregation.

#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "opensep/dsp.h"

namespace opensep {

inline constexpr double kSdrCapDb = 60.0;
inline constexpr double kNegInfinityDb = -std::numeric_limits<double>::infinity();

struct BssEvalOptions {
  // Number of distortion-filter taps. 0 and 1 both mean a plain projection
  // onto the references; L > 1 projects onto L delayed copies of each
  // reference, with signals zero-extended by L - 1 samples.
  int filter_length = 0;
  double cap_db = kSdrCapDb;
  double max_condition = 1e12;
};

struct Decomposition {
  std::vector<double> s_target;
  std::vector<double> e_interf;
  std::vector<double> e_artif;
};

Decomposition decompose(const Waveform& estimate, std::span<const Waveform> references,
                        int target_index, const BssEvalOptions& opts = {});

// 10 log10(|s_target|^2 / |e_interf + e_artif|^2), capped at cap_db.
// Returns kNegInfinityDb when s_target is zero.
double sdr(const Decomposition& d, double cap_db = kSdrCapDb);
double sir(const Decomposition& d, double cap_db = kSdrCapDb);
double sar(const Decomposition& d, double cap_db = kSdrCapDb);

struct PairScore {
  int estimate = -1;
  int reference = -1;
  double sdr = 0.0;
  double sir = 0.0;
};

struct MatchResult {
  // assignment[i] = reference index matched to estimate i, or -1.
  std::vector<int> assignment;
  std::vector<PairScore> pairs;  // ordered by estimate index
};

// One-to-one assignment maximising total SDR over min(#est, #ref) pairs.
// Exhaustive (lexicographic, first optimum wins) for up to 6 items on the
// larger side, Hungarian above that.
MatchResult best_match_permutation(std::span<const Waveform> estimates,
                                   std::span<const Waveform> references,
                                   const BssEvalOptions& opts = {});

// Scores estimate i against reference i directly (conditioned outputs).
MatchResult score_aligned(std::span<const Waveform> estimates, std::span<const Waveform> references,
                          const BssEvalOptions& opts = {});

// Min-cost assignment of rows to distinct columns (rows <= cols).
std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost);

struct EvalCase {
  std::vector<Waveform> estimates;
  std::vector<Waveform> references;
  std::string name;
};

struct BatchReport {
  std::vector<MatchResult> cases;
  std::vector<std::string> names;
  double mean_sdr = 0.0;
  double std_sdr = 0.0;
  double mean_sir = 0.0;
  double std_sir = 0.0;
  int pair_count = 0;
  int excluded_count = 0;

  std::string to_json() const;
  std::string to_csv() const;
};

// Mean and population std over all assigned pairs; pairs with a -inf SDR
// are excluded and counted.
BatchReport aggregate(std::vector<MatchResult> cases, std::vector<std::string> names = {});
BatchReport evaluate_batch(std::span<const EvalCase> cases, const BssEvalOptions& opts = {});

}  // namespace opensep
