#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/metrics.h"

using namespace opensep;

namespace {

Waveform random_wave(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s(n);
  for (auto& v : s) v = g(rng);
  return {std::move(s), 16000};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Gram-Schmidt: a random vector orthogonal to every reference.
std::vector<double> orthogonal_noise(std::mt19937_64& rng, const std::vector<Waveform>& refs) {
  std::vector<std::vector<double>> basis;
  for (const auto& r : refs) {
    auto v = r.samples;
    for (const auto& b : basis) {
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
    const double nrm = std::sqrt(dot(v, v));
    for (auto& x : v) x /= nrm;
    basis.push_back(v);
  }
  auto n = random_wave(rng, refs[0].size()).samples;
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      const double c = dot(n, b);
      for (std::size_t i = 0; i < n.size(); ++i) n[i] -= c * b[i];
    }
  return n;
}

Waveform add_scaled(const Waveform& a, const std::vector<double>& b, double scale) {
  Waveform out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += scale * b[i];
  return out;
}

double energy(const std::vector<double>& v) { return dot(v, v); }

}  // namespace

TEST_CASE("decompose identity and mixture of references") {
  std::mt19937_64 rng(1);
  std::vector<Waveform> refs{random_wave(rng, 2000), random_wave(rng, 2000)};

  auto d = decompose(refs[0], refs, 0);
  for (std::size_t i = 0; i < d.s_target.size(); ++i) {
    CHECK(d.s_target[i] == doctest::Approx(refs[0].samples[i]).epsilon(1e-9));
    CHECK(std::abs(d.e_interf[i]) < 1e-9);
    CHECK(std::abs(d.e_artif[i]) < 1e-9);
  }
  CHECK(sdr(d) == kSdrCapDb);

  // s_target is the projection onto refs[0] alone, so use an orthogonal partner.
  std::vector<Waveform> one{refs[0]};
  refs[1].samples = orthogonal_noise(rng, one);
  auto mix = add_scaled(refs[0], refs[1].samples, 0.5);
  d = decompose(mix, refs, 0);
  for (std::size_t i = 0; i < d.s_target.size(); ++i) {
    CHECK(d.s_target[i] == doctest::Approx(refs[0].samples[i]).epsilon(1e-9));
    CHECK(d.e_interf[i] == doctest::Approx(0.5 * refs[1].samples[i]).epsilon(1e-9));
    CHECK(std::abs(d.e_artif[i]) < 1e-9);
  }
  CHECK(sir(d) == doctest::Approx(sdr(d)).epsilon(1e-9));  // no artifacts
  CHECK(sdr(d) == doctest::Approx(10.0 * std::log10(energy(refs[0].samples) / (0.25 * energy(refs[1].samples)))));
}

TEST_CASE("orthogonal estimate gives the -inf sentinel") {
  std::mt19937_64 rng(2);
  std::vector<Waveform> refs{random_wave(rng, 1000), random_wave(rng, 1000)};
  Waveform est{orthogonal_noise(rng, refs), 16000};
  const auto d = decompose(est, refs, 1);
  CHECK(energy(d.s_target) < 1e-20);
  CHECK(std::isinf(sdr(d)));
  CHECK(sdr(d) < 0);
  CHECK(sdr(d) == kNegInfinityDb);
}

TEST_CASE("closed-form SDR from orthogonal noise ratios") {
  std::mt19937_64 rng(3);
  std::vector<Waveform> refs{random_wave(rng, 4000), random_wave(rng, 4000)};
  const auto noise = orthogonal_noise(rng, refs);
  const double pr = energy(refs[0].samples), pn = energy(noise);
  for (double ratio : {10.0, 100.0, 1000.0}) {
    const auto est = add_scaled(refs[0], noise, std::sqrt(pr / (ratio * pn)));
    const auto d = decompose(est, refs, 0);
    CHECK(std::abs(sdr(d) - 10.0 * std::log10(ratio)) < 1e-6);
    CHECK(sir(d) == kSdrCapDb);  // e_interf = 0 hits the cap
  }
}

TEST_CASE("SIR from interference ratio") {
  std::mt19937_64 rng(4);
  std::vector<Waveform> refs{random_wave(rng, 3000), random_wave(rng, 3000)};
  // Make ref1 orthogonal to ref0 so the interference term is exactly the added part.
  std::vector<Waveform> one{refs[0]};
  refs[1].samples = orthogonal_noise(rng, one);
  const double scale = std::sqrt(energy(refs[0].samples) / (100.0 * energy(refs[1].samples)));
  const auto est = add_scaled(refs[0], refs[1].samples, scale);
  const auto d = decompose(est, refs, 0);
  CHECK(std::abs(sir(d) - 20.0) < 1e-6);
  CHECK(std::abs(sdr(d) - 20.0) < 1e-6);
}

TEST_CASE("scale invariance, completeness and monotonicity") {
  std::mt19937_64 rng(5);
  std::vector<Waveform> refs{random_wave(rng, 2500), random_wave(rng, 2500), random_wave(rng, 2500)};
  auto est = add_scaled(refs[1], refs[0].samples, 0.3);
  est = add_scaled(est, random_wave(rng, 2500).samples, 0.2);
  const auto base = decompose(est, refs, 1);
  for (double alpha : {1e-3, 0.5, 7.0, 1e4}) {
    Waveform scaled = est;
    for (auto& v : scaled.samples) v *= alpha;
    const auto d = decompose(scaled, refs, 1);
    CHECK(std::abs(sdr(d) - sdr(base)) < 1e-9);
    CHECK(std::abs(sir(d) - sir(base)) < 1e-9);
  }
  for (std::size_t i = 0; i < est.size(); ++i)
    CHECK(base.s_target[i] + base.e_interf[i] + base.e_artif[i] ==
          doctest::Approx(est.samples[i]).epsilon(1e-12));

  const auto noise = orthogonal_noise(rng, refs);
  double prev = std::numeric_limits<double>::infinity();
  for (double level : {0.01, 0.03, 0.1, 0.3, 1.0, 3.0}) {
    const double s = sdr(decompose(add_scaled(refs[2], noise, level), refs, 2));
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("invalid references") {
  std::mt19937_64 rng(6);
  std::vector<Waveform> refs{random_wave(rng, 100), Waveform(std::vector<double>(100, 0.0), 16000)};
  CHECK_THROWS_AS(decompose(refs[0], refs, 0), DegenerateReferences);
  std::vector<Waveform> dup{refs[0], refs[0]};
  CHECK_THROWS_AS(decompose(refs[0], dup, 0), DegenerateReferences);
  std::vector<Waveform> ok{refs[0]};
  CHECK_THROWS_AS(decompose(random_wave(rng, 50), ok, 0), InvalidInput);
  CHECK_THROWS_AS(decompose(refs[0], ok, 3), InvalidInput);
  CHECK_THROWS_AS(decompose(refs[0], std::vector<Waveform>{}, 0), InvalidInput);
}

TEST_CASE("distortion filter absorbs a short delay") {
  std::mt19937_64 rng(7);
  std::vector<Waveform> refs{random_wave(rng, 1500), random_wave(rng, 1500)};
  Waveform delayed(std::vector<double>(1500, 0.0), 16000);
  for (std::size_t i = 3; i < 1500; ++i) delayed.samples[i] = refs[0].samples[i - 3];
  const double plain = sdr(decompose(delayed, refs, 0));
  BssEvalOptions opts;
  opts.filter_length = 8;
  const auto d = decompose(delayed, refs, 0, opts);
  CHECK(d.s_target.size() == 1500 + 7);
  CHECK(plain < 5.0);
  CHECK(sdr(d) > 20.0);
  // filter_length 1 is the plain projection
  opts.filter_length = 1;
  CHECK(sdr(decompose(delayed, refs, 0, opts)) == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("swapped estimates are matched back") {
  std::mt19937_64 rng(8);
  std::vector<Waveform> refs{random_wave(rng, 800), random_wave(rng, 800)};
  std::vector<Waveform> est{refs[1], refs[0]};
  const auto m = best_match_permutation(est, refs);
  CHECK(m.assignment == std::vector<int>{1, 0});
  REQUIRE(m.pairs.size() == 2);
  for (const auto& p : m.pairs) CHECK(p.sdr == kSdrCapDb);
}

TEST_CASE("assignment equals exhaustive search") {
  // Independent oracle: score matrix from decompose, every permutation enumerated.
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::mt19937_64 rng(100 + trial);
    const int n = 1 + trial % 4;
    std::vector<Waveform> refs, est;
    for (int i = 0; i < n; ++i) refs.push_back(random_wave(rng, 600));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
      Waveform e(std::vector<double>(600, 0.0), 16000);
      for (int j = 0; j < n; ++j) e = add_scaled(e, refs[j].samples, u(rng));
      e = add_scaled(e, random_wave(rng, 600).samples, 0.3 * u(rng));
      est.push_back(e);
    }
    std::vector<std::vector<double>> score(n, std::vector<double>(n));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) score[i][j] = sdr(decompose(est[i], refs, j));

    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    double best = -1e300;
    std::vector<int> best_perm;
    do {
      double total = 0.0;
      for (int i = 0; i < n; ++i) total += score[i][perm[i]];
      if (total > best) {
        best = total;
        best_perm = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));

    const auto m = best_match_permutation(est, refs);
    double total = 0.0;
    for (const auto& p : m.pairs) total += p.sdr;
    CHECK(total == doctest::Approx(best).epsilon(1e-12));
    CHECK(m.assignment == best_perm);
    ++checked;
  }
  CHECK(checked == 50);
}

TEST_CASE("rectangular assignment") {
  std::mt19937_64 rng(9);
  std::vector<Waveform> refs{random_wave(rng, 700), random_wave(rng, 700)};
  std::vector<Waveform> est{random_wave(rng, 700), add_scaled(refs[1], refs[0].samples, 0.1),
                            random_wave(rng, 700), refs[0]};
  auto m = best_match_permutation(est, refs);
  CHECK(m.assignment == std::vector<int>{-1, 1, -1, 0});
  CHECK(m.pairs.size() == 2);

  std::vector<Waveform> few{refs[1]};
  std::vector<Waveform> many{refs[0], refs[1], random_wave(rng, 700)};
  m = best_match_permutation(few, many);
  CHECK(m.assignment == std::vector<int>{1});
}

TEST_CASE("hungarian matches brute force on larger problems") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 5 + trial % 3, cols = rows + trial % 2;
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (auto& r : cost)
      for (auto& v : r) v = u(rng);
    const auto a = hungarian_min_cost(cost);
    double got = 0.0;
    for (int r = 0; r < rows; ++r) got += cost[r][a[r]];
    std::vector<int> perm(cols);
    for (int i = 0; i < cols; ++i) perm[i] = i;
    double best = 1e300;
    do {
      double t = 0.0;
      for (int r = 0; r < rows; ++r) t += cost[r][perm[r]];
      best = std::min(best, t);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(got == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("best match above six uses the hungarian path") {
  std::mt19937_64 rng(11);
  std::vector<Waveform> refs;
  for (int i = 0; i < 8; ++i) refs.push_back(random_wave(rng, 400));
  std::vector<int> order{3, 7, 0, 5, 1, 6, 2, 4};
  std::vector<Waveform> est;
  for (int k : order) est.push_back(add_scaled(refs[k], random_wave(rng, 400).samples, 0.05));
  const auto m = best_match_permutation(est, refs);
  CHECK(m.assignment == order);
}

TEST_CASE("aggregation") {
  MatchResult a, b;
  a.assignment = {0};
  a.pairs = {{0, 0, 10.0, 12.0}};
  b.assignment = {0};
  b.pairs = {{0, 0, 20.0, 30.0}};
  MatchResult c;
  c.assignment = {0};
  c.pairs = {{0, 0, kNegInfinityDb, kNegInfinityDb}};
  const auto rep = aggregate({a, b, c}, {"a", "b", "c"});
  CHECK(rep.mean_sdr == doctest::Approx(15.0));
  CHECK(rep.std_sdr == doctest::Approx(5.0));
  CHECK(rep.mean_sir == doctest::Approx(21.0));
  CHECK(rep.std_sir == doctest::Approx(9.0));
  CHECK(rep.excluded_count == 1);
  CHECK(rep.pair_count == 3);

  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j["cases"].size() == 3);
  CHECK(j["cases"][2]["sdr"][0].is_null());
  CHECK(j["excluded_count"] == 1);
  CHECK(rep.to_csv().find("SDR,15.000000,5.000000,3,1") != std::string::npos);
}

TEST_CASE("batch of perfect estimates") {
  std::mt19937_64 rng(12);
  std::vector<EvalCase> cases;
  for (int i = 0; i < 3; ++i) {
    EvalCase c;
    c.references = {random_wave(rng, 500), random_wave(rng, 500)};
    c.estimates = {c.references[1], c.references[0]};
    cases.push_back(c);
  }
  const auto rep = evaluate_batch(cases);
  CHECK(rep.mean_sdr == kSdrCapDb);
  CHECK(rep.std_sdr == 0.0);
  CHECK(rep.names[0] == "case0");
  CHECK_THROWS_AS(evaluate_batch(std::vector<EvalCase>{}), InvalidInput);
}
