// training.cc

#include "opensep/training.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/hash.h"
#include "opensep/metrics.h"

namespace opensep {

using json = nlohmann::json;
namespace fs = std::filesystem;

double TrainConfig::lr_at(int epoch) const {
  return lr * std::pow(lr_decay_factor, epoch / lr_decay_every);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw InvalidInput("epochs must be >= 0");
  if (!(lr > 0)) throw InvalidInput("lr must be positive");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) throw InvalidInput("lr_decay_factor must be in (0, 1]");
  if (lr_decay_every < 1) throw InvalidInput("lr_decay_every must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
    throw InvalidInput("bad Adam constants");
  if (batch_trees_per_step < 1 || steps_per_epoch < 1) throw InvalidInput("batch and steps must be >= 1");
  if (crop_frames < 0) throw InvalidInput("crop_frames must be >= 0");
  if (!(grad_clip > 0)) throw InvalidInput("grad_clip must be positive");
  gains.validate();
  stft.validate();
}

TrainConfig TrainConfig::toy_preset() {
  TrainConfig c;
  c.epochs = 12;
  c.lr = 5e-4;
  c.lr_decay_every = 9;
  c.steps_per_epoch = 20;
  return c;
}

namespace {

json stft_json(const StftConfig& s) {
  return {{"window_length", s.window_length},
          {"hop_length", s.hop_length},
          {"fft_length", s.fft_length},
          {"window", s.window == WindowKind::kHann ? "hann" : "rectangular"}};
}

StftConfig stft_from(const json& j) {
  StftConfig s;
  s.window_length = j.value("window_length", s.window_length);
  s.hop_length = j.value("hop_length", s.hop_length);
  s.fft_length = j.value("fft_length", s.window_length);
  const std::string w = j.value("window", std::string("hann"));
  if (w != "hann" && w != "rectangular") throw InvalidInput("unknown window: " + w);
  s.window = w == "hann" ? WindowKind::kHann : WindowKind::kRectangular;
  return s;
}

}  // namespace

std::string to_json(const TrainConfig& c) {
  json j = {{"epochs", c.epochs},
            {"lr", c.lr},
            {"lr_decay_factor", c.lr_decay_factor},
            {"lr_decay_every", c.lr_decay_every},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"batch_trees_per_step", c.batch_trees_per_step},
            {"steps_per_epoch", c.steps_per_epoch},
            {"crop_frames", c.crop_frames},
            {"grad_clip", c.grad_clip},
            {"objective", to_string(c.objective)},
            {"prompts", c.prompts == PromptText::kEnriched ? "enriched" : "class_only"},
            {"gain_low", c.gains.gain_low},
            {"gain_high", c.gains.gain_high},
            {"normalize_peak", c.gains.normalize_peak},
            {"stft", stft_json(c.stft)},
            {"rng_seed", c.rng_seed}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_trees_per_step = j.value("batch_trees_per_step", c.batch_trees_per_step);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.crop_frames = j.value("crop_frames", c.crop_frames);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.objective = objective_from_string(j.value("objective", to_string(c.objective)));
    const std::string p = j.value("prompts", std::string("enriched"));
    if (p != "enriched" && p != "class_only") throw InvalidInput("unknown prompt mode: " + p);
    c.prompts = p == "enriched" ? PromptText::kEnriched : PromptText::kClassOnly;
    c.gains.gain_low = j.value("gain_low", c.gains.gain_low);
    c.gains.gain_high = j.value("gain_high", c.gains.gain_high);
    c.gains.normalize_peak = j.value("normalize_peak", c.gains.normalize_peak);
    if (j.contains("stft")) c.stft = stft_from(j.at("stft"));
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::string> corpus_vocabulary(const std::vector<ToyClassSpec>& classes) {
  std::vector<std::string> texts;
  for (const auto& c : classes) {
    texts.push_back(c.class_phrase);
    texts.push_back(knowledge_text_for_class(c, KnowledgeMode::kEnriched));
  }
  texts.emplace_back("and");  // joins the two halves of M1/M2 prompts
  return build_vocabulary(texts);
}

MixtureTree sample_tree(const ToyCorpus& corpus, const TrainConfig& tc, std::uint64_t seed) {
  auto ids = corpus.class_ids();
  if (ids.size() < 4) throw InvalidInput("training needs at least 4 classes, corpus has " + std::to_string(ids.size()));
  std::mt19937_64 rng(seed);
  std::array<SourceClip, 4> leaves;
  for (int i = 0; i < 4; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
    const auto clips = corpus.clips_of(ids[i]);
    if (clips.empty()) throw InvalidInput("class " + ids[i] + " has no clips");
    std::uniform_int_distribution<std::size_t> clip(0, clips.size() - 1);
    leaves[i] = *clips[clip(rng)];
  }
  GainPolicy gp = tc.gains;
  gp.rng_seed = mix_seed(seed, 1);
  return build_mixture_tree(leaves, gp, tc.stft, tc.prompts);
}

namespace {

MagnitudeSpectrogram crop_frames(const MagnitudeSpectrogram& s, int start, int n) {
  MagnitudeSpectrogram o = s;
  o.num_frames = n;
  o.bins.resize(static_cast<std::size_t>(s.num_bins) * n);
  for (int f = 0; f < s.num_bins; ++f)
    for (int t = 0; t < n; ++t) o.bins[static_cast<std::size_t>(f) * n + t] = s.at(f, start + t);
  return o;
}

// Loss and gradient of one tree; gradients are scaled by `weight` and added
// to the parameters.
double tree_step(SeparatorModel& model, const MixtureTree& tree, const TrainConfig& tc, std::uint64_t seed,
                 double weight) {
  MagnitudeSpectrogram root = magnitude(tree.root_spec);
  const auto nodes = objective_nodes(tc.objective);
  std::vector<MagnitudeSpectrogram> targets;
  for (const auto& n : nodes) targets.push_back(tree.targets.at(n));
  if (tc.crop_frames > 0 && tc.crop_frames < root.num_frames) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> start(0, root.num_frames - tc.crop_frames);
    const int s = start(rng);
    root = crop_frames(root, s, tc.crop_frames);
    for (auto& t : targets) t = crop_frames(t, s, tc.crop_frames);
  }
  std::vector<std::pair<std::string, const MagnitudeSpectrogram*>> pt;
  for (std::size_t i = 0; i < nodes.size(); ++i) pt.emplace_back(tree.prompts.at(nodes[i]), &targets[i]);
  nn::Tape tape;
  const int loss = multilevel_loss_node(tape, model, root, pt);
  const double value = tape.value(loss)(0, 0);
  if (!std::isfinite(value)) return value;
  tape.backward(tape.scaled_sum({loss}, weight));
  return value;
}

void adam_update(SeparatorModel& model, const TrainConfig& tc, double lr, long long t) {
  double sq = 0.0;
  for (const auto& p : model.parameters()) sq += p.grad.squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;
  const double c1 = 1.0 - std::pow(tc.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(tc.adam_beta2, static_cast<double>(t));
  for (auto& p : model.parameters()) {
    const nn::Mat g = p.grad * clip;
    p.adam_m = tc.adam_beta1 * p.adam_m + (1.0 - tc.adam_beta1) * g;
    p.adam_v = tc.adam_beta2 * p.adam_v + (1.0 - tc.adam_beta2) * g.cwiseProduct(g);
    p.value.array() -= lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + tc.adam_eps);
  }
}

json log_json(const std::vector<EpochLog>& log) {
  json a = json::array();
  for (const auto& e : log)
    a.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}, {"wall_seconds", e.wall_seconds}});
  return a;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os || !(os << text)) throw IoError(path, "cannot write");
}

}  // namespace

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,lr,mean_loss,wall_seconds\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << std::setprecision(17) << e.lr << ',' << e.mean_loss << ',' << std::fixed
       << std::setprecision(3) << e.wall_seconds << '\n';
    os.unsetf(std::ios::floatfield);
  }
  return os.str();
}

TrainResult train(SeparatorModel& model, const ToyCorpus& corpus, const TrainConfig& tc, const TrainOptions& opts) {
  tc.validate();
  if (corpus.clips.empty()) throw InvalidInput("training corpus is empty");
  const std::string tc_json = to_json(tc);

  TrainResult result;
  int start_epoch = 0;
  if (opts.resume && !opts.checkpoint_path.empty() && fs::exists(opts.checkpoint_path)) {
    std::string state;
    model = load_checkpoint(opts.checkpoint_path, &state);
    const json s = json::parse(state);
    if (s.value("train_config", std::string()) != tc_json)
      throw InvalidInput(opts.checkpoint_path + " was written with a different training config");
    start_epoch = s.at("epochs_done").get<int>();
    result.steps = s.at("adam_step").get<long long>();
    for (const auto& e : s.at("log"))
      result.log.push_back({e.at("epoch"), e.at("lr"), e.at("mean_loss"), e.at("wall_seconds")});
  }

  auto save = [&](int epochs_done) {
    if (opts.checkpoint_path.empty()) return;
    json s = {{"epochs_done", epochs_done},
              {"adam_step", result.steps},
              {"train_config", tc_json},
              {"log", log_json(result.log)}};
    save_checkpoint(opts.checkpoint_path, model, s.dump());
  };
  if (start_epoch == 0) save(0);
  auto last_good = [&] { return opts.checkpoint_path; };

  const int end_epoch = opts.stop_after >= 0 ? std::min(opts.stop_after, tc.epochs) : tc.epochs;
  const double weight = 1.0 / tc.batch_trees_per_step;
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = tc.lr_at(epoch);
    double total = 0.0;
    for (int step = 0; step < tc.steps_per_epoch; ++step) {
      model.zero_grad();
      double step_loss = 0.0;
      for (int b = 0; b < tc.batch_trees_per_step; ++b) {
        const std::uint64_t seed =
            mix_seed(mix_seed(tc.rng_seed, static_cast<std::uint64_t>(epoch)),
                     static_cast<std::uint64_t>(step) * tc.batch_trees_per_step + b);
        const MixtureTree tree = sample_tree(corpus, tc, seed);
        const double v = tree_step(model, tree, tc, mix_seed(seed, 2), weight);
        if (!std::isfinite(v))
          throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step),
                                 last_good(), epoch);
        step_loss += v * weight;
      }
      adam_update(model, tc, lr, ++result.steps);
      if (!model.all_finite())
        throw TrainingDiverged("non-finite parameters at epoch " + std::to_string(epoch), last_good(), epoch);
      total += step_loss;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back({epoch, lr, total / tc.steps_per_epoch, secs});
    save(epoch + 1);
    if (!opts.log_csv_path.empty()) write_text(opts.log_csv_path, epoch_log_csv(result.log));
    if (opts.on_epoch) opts.on_epoch(result.log.back());
  }
  if (!opts.log_csv_path.empty() && result.log.empty()) write_text(opts.log_csv_path, epoch_log_csv(result.log));
  return result;
}

// ---- evaluation ----

std::vector<PairCase> make_pair_cases(const std::vector<ToyClassSpec>& classes,
                                      const std::vector<std::string>& class_ids, int count, std::uint64_t seed,
                                      double duration_s, int sample_rate) {
  if (class_ids.size() < 2) throw InvalidInput("pair cases need at least 2 classes");
  auto spec_of = [&](const std::string& id) -> const ToyClassSpec& {
    for (const auto& c : classes)
      if (c.class_id == id) return c;
    throw InvalidInput("unknown class " + id);
  };
  std::mt19937_64 rng(mix_seed(seed, 0x7e57));
  std::uniform_int_distribution<std::size_t> pick(0, class_ids.size() - 1);
  std::vector<PairCase> out;
  for (int i = 0; i < count; ++i) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    const std::uint64_t case_seed = mix_seed(mix_seed(seed, 0xca5e), static_cast<std::uint64_t>(i));
    PairCase pc;
    pc.sources[0] = generate_clip(spec_of(class_ids[a]), duration_s, mix_seed(case_seed, 1), sample_rate);
    pc.sources[1] = generate_clip(spec_of(class_ids[b]), duration_s, mix_seed(case_seed, 2), sample_rate);
    GainPolicy gp;
    gp.rng_seed = mix_seed(case_seed, 3);
    const std::array<Waveform, 2> raw = {pc.sources[0].audio, pc.sources[1].audio};
    const MixResult mr = rescale_and_mix(raw, gp);
    for (int k = 0; k < 2; ++k)
      for (auto& v : pc.sources[k].audio.samples) v *= mr.gains[k];
    pc.mixture = mr.mixture;
    out.push_back(std::move(pc));
  }
  return out;
}

std::string pair_prompt_text(const SourceClip& clip, PromptText mode) { return leaf_prompt(clip, mode); }

namespace {

using Separator = std::function<std::vector<Waveform>(const Waveform&, const std::vector<std::string>&)>;

PairEvaluation evaluate_with(const std::vector<PairCase>& cases, const Separator& sep, PromptText mode) {
  if (cases.empty()) throw InvalidInput("no evaluation cases");
  std::vector<MatchResult> model_scores, base_scores;
  int swaps = 0;
  for (const auto& c : cases) {
    const std::vector<Waveform> refs = {c.sources[0].audio, c.sources[1].audio};
    const auto est = sep(c.mixture, {pair_prompt_text(c.sources[0], mode), pair_prompt_text(c.sources[1], mode)});
    model_scores.push_back(score_aligned(est, refs));
    base_scores.push_back(score_aligned(std::vector<Waveform>{c.mixture, c.mixture}, refs));
    // Masks depend only on (mixture, prompt), so the swapped prompt order
    // returns the same two outputs reversed; checking each output's best
    // reference covers both orders.
    bool ok = true;
    for (int i = 0; i < 2; ++i) {
      const double own = sdr(decompose(est[i], refs, i));
      const double other = sdr(decompose(est[i], refs, 1 - i));
      ok = ok && own > other;
    }
    swaps += ok;
  }
  const BatchReport m = aggregate(std::move(model_scores));
  const BatchReport b = aggregate(std::move(base_scores));
  PairEvaluation e;
  e.mean_sdr = m.mean_sdr;
  e.mean_sir = m.mean_sir;
  e.mean_baseline_sdr = b.mean_sdr;
  e.swap_rate = static_cast<double>(swaps) / cases.size();
  e.cases = static_cast<int>(cases.size());
  return e;
}

}  // namespace

PairEvaluation evaluate_pairs(const std::vector<PairCase>& cases, const MaskFn& mask_fn, PromptText mode,
                              const StftConfig& stft) {
  return evaluate_with(
      cases, [&](const Waveform& mix, const std::vector<std::string>& p) { return separate(mix, p, mask_fn, stft); },
      mode);
}

PairEvaluation evaluate_pairs(const std::vector<PairCase>& cases, const SeparatorModel& model, PromptText mode,
                              const StftConfig& stft, int parallelism) {
  return evaluate_with(
      cases,
      [&](const Waveform& mix, const std::vector<std::string>& p) { return separate(mix, p, model, stft, parallelism); },
      mode);
}

}  // namespace opensep
