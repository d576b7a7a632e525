// training.h
// Adam training loop over randomly drawn mixture trees, and the two-source
// evaluation used to compare trained models.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "opensep/mixer.h"
#include "opensep/separator.h"
#include "opensep/toy_corpus.h"

namespace opensep {

struct TrainConfig {
  int epochs = 80;
  double lr = 1e-3;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 20;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_trees_per_step = 1;
  int steps_per_epoch = 25;
  // Random window of this many frames per tree; 0 trains on whole clips.
  int crop_frames = 16;
  double grad_clip = 5.0;
  Objective objective = Objective::kMultiLevel;
  PromptText prompts = PromptText::kEnriched;
  GainPolicy gains;  // rng_seed is overridden per tree
  StftConfig stft;
  std::uint64_t rng_seed = 0;

  double lr_at(int epoch) const;
  void validate() const;

  // Short schedule used by the toy experiments.
  static TrainConfig toy_preset();
};

std::string to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainOptions {
  std::string checkpoint_path;  // written after every epoch when set
  std::string log_csv_path;     // rewritten after every epoch when set
  bool resume = false;          // continue from checkpoint_path if it exists
  // Stop after this epoch index (exclusive) without touching the schedule.
  // -1 runs to tc.epochs. Used to test resumption.
  int stop_after = -1;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  long long steps = 0;
};

// Vocabulary for a model trained on these classes: class phrases and
// enriched descriptors.
std::vector<std::string> corpus_vocabulary(const std::vector<ToyClassSpec>& classes);

// Leaves drawn from 4 distinct corpus classes, one random clip each.
MixtureTree sample_tree(const ToyCorpus& corpus, const TrainConfig& tc, std::uint64_t seed);

// Throws TrainingDiverged on a non-finite loss or parameter.
TrainResult train(SeparatorModel& model, const ToyCorpus& corpus, const TrainConfig& tc,
                  const TrainOptions& opts = {});

std::string epoch_log_csv(const std::vector<EpochLog>& log);

// ---- evaluation on two-source mixtures ----

struct PairCase {
  std::array<SourceClip, 2> sources;  // already scaled by their mix gains
  Waveform mixture;
};

// Fresh clips (seeds disjoint from corpus generation) of two distinct
// classes drawn from `class_ids`.
std::vector<PairCase> make_pair_cases(const std::vector<ToyClassSpec>& classes,
                                      const std::vector<std::string>& class_ids, int count,
                                      std::uint64_t seed, double duration_s = 1.0, int sample_rate = 16000);

struct PairEvaluation {
  double mean_sdr = 0.0;           // model outputs vs. prompted source
  double mean_sir = 0.0;
  double mean_baseline_sdr = 0.0;  // the mixture itself as the estimate
  // Fraction of cases where each output's highest-SDR reference is the
  // prompted one, for both prompt orders.
  double swap_rate = 0.0;
  int cases = 0;
};

std::string pair_prompt_text(const SourceClip& clip, PromptText mode);

PairEvaluation evaluate_pairs(const std::vector<PairCase>& cases, const MaskFn& mask_fn, PromptText mode,
                              const StftConfig& stft);
PairEvaluation evaluate_pairs(const std::vector<PairCase>& cases, const SeparatorModel& model, PromptText mode,
                              const StftConfig& stft, int parallelism = 1);

}  // namespace opensep
