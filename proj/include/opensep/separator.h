// separator.h
// Text-conditioned mask predictor: a small U-Net over the magnitude
// spectrogram with self- and cross-attention on the deepest skip connections,
// plus the multi-level mix-and-separate loss.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "opensep/autodiff.h"
#include "opensep/dsp.h"
#include "opensep/mixer.h"

namespace opensep {

struct SeparatorConfig {
  int levels = 4;
  int base_channels = 8;
  std::vector<int> attention_levels = {3, 4};
  int attention_heads = 4;
  int embed_dim = 64;
  int context_window = 512;
  int hash_buckets = 32;
  std::uint64_t rng_seed = 0;

  // Channels after encoder level i (level 0 is the full-resolution stem).
  int channels(int level) const;
  bool has_attention(int level) const;
  void validate() const;
  bool operator==(const SeparatorConfig&) const = default;

  // Larger shape closer to the published network (7 stages, 8 heads). Not
  // trained anywhere in this repo.
  static SeparatorConfig paper_preset();
};

std::string to_json(const SeparatorConfig& c);
SeparatorConfig separator_config_from_json(const std::string& text);

// ---- text side ----

inline constexpr int kNumericFeatures = 16;

// Sin/cos features of a normalized log frequency u in [0, 1]
// (u = log(f / 20) / log(400), 20 Hz .. 8 kHz).
Eigen::VectorXd frequency_features(double hz);
double log_frequency_coordinate(double hz);

// Words of the training texts, lowercased, numbers excluded, sorted.
std::vector<std::string> build_vocabulary(const std::vector<std::string>& texts);

struct TextEmbedding {
  std::vector<int> tokens;       // length <= context_window
  std::vector<double> hertz;     // per token, 0 unless a frequency in Hz
  nn::Mat vectors;               // embed_dim x tokens.size()
};

class SeparatorModel;

// Token ids and the frequency each numeric token names. Vectors are left
// empty; encode_text fills them from the model's tables.
TextEmbedding tokenize(const std::string& text, const std::vector<std::string>& vocab,
                       const SeparatorConfig& cfg);
TextEmbedding encode_text(const std::string& text, const SeparatorModel& model);

// ---- model ----

class SeparatorModel {
 public:
  SeparatorModel() = default;
  SeparatorModel(const SeparatorConfig& cfg, std::vector<std::string> vocab);

  const SeparatorConfig& config() const { return config_; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  std::vector<nn::Parameter>& parameters() { return params_; }
  const std::vector<nn::Parameter>& parameters() const { return params_; }
  nn::Parameter& param(const std::string& name);
  const nn::Parameter& param(const std::string& name) const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  void zero_grad();

 private:
  void add(const std::string& name, nn::Mat value);

  SeparatorConfig config_;
  std::vector<std::string> vocab_;
  std::vector<nn::Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Bit-exact save/load of config, vocabulary, parameters and Adam moments.
// `state_json` carries trainer bookkeeping (epoch, step counter, ...).
void save_checkpoint(const std::string& path, const SeparatorModel& model,
                     const std::string& state_json = "{}");
SeparatorModel load_checkpoint(const std::string& path, std::string* state_json = nullptr);

// Mixture-only activations (stem, encoder, self-attention), reusable across
// prompts and threads.
struct EncoderFeatures {
  int bins = 0, frames = 0;  // unpadded grid
  int height = 0, width = 0;  // padded grid
  double bin_hz = 0.0;
  std::vector<nn::Mat> levels;
};

// Builds the network on a tape. Mixture-only work is done once in the
// constructor; decode() runs per prompt.
class SeparatorGraph {
 public:
  // mix: num_bins x num_frames magnitude grid (frequency-major).
  SeparatorGraph(nn::Tape& tape, SeparatorModel& model, const MagnitudeSpectrogram& mix);
  // Re-enters precomputed features as constants (inference only).
  SeparatorGraph(nn::Tape& tape, SeparatorModel& model, const EncoderFeatures& features);

  // Returns a 1 x (bins*frames) mask node in [0, 1].
  int decode(const TextEmbedding& cond);
  EncoderFeatures features() const;

 private:
  void init_positions();
  int text_node(const TextEmbedding& cond);
  int level_height(int l) const { return height_ >> l; }
  int level_width(int l) const { return width_ >> l; }

  nn::Tape& t_;
  SeparatorModel& m_;
  int bins_ = 0, frames_ = 0, height_ = 0, width_ = 0;
  double bin_hz_ = 0.0;
  std::vector<int> enc_;      // per level, after self-attention where configured
  std::vector<int> pix_phi_;  // per level, 16 x pixels constant (-1 if unused)
};

Mask predict_mask(const MagnitudeSpectrogram& mix_mag, const TextEmbedding& cond,
                  const SeparatorModel& model);
// Shares the encoder pass; runs the per-prompt decoders on up to
// `parallelism` threads.
std::vector<Mask> predict_masks(const MagnitudeSpectrogram& mix_mag, const std::vector<std::string>& prompts,
                                const SeparatorModel& model, int parallelism = 4);

// ---- loss ----

// Which prompts contribute: all six tree nodes, or S1..S4 only.
enum class Objective { kMultiLevel, kSingleLevel };
std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);
std::vector<std::string> objective_nodes(Objective o);

// Mean over prompts of mean_bins |mask .* |Z| - |target||.
double multilevel_loss(const MixtureTree& tree, const SeparatorModel& model,
                       Objective objective = Objective::kMultiLevel);
// Same loss with externally supplied masks (oracle injection), keyed by node.
double multilevel_loss(const MixtureTree& tree, const std::function<Mask(const std::string&)>& masks,
                       const std::vector<std::string>& nodes = objective_nodes(Objective::kMultiLevel));

// Loss graph over possibly cropped grids. `root` and targets must share a
// shape. Returns the 1x1 loss node.
int multilevel_loss_node(nn::Tape& tape, SeparatorModel& model, const MagnitudeSpectrogram& root,
                         const std::vector<std::pair<std::string, const MagnitudeSpectrogram*>>& prompt_targets);

// ---- separation ----

using MaskFn = std::function<Mask(const MagnitudeSpectrogram& mix_mag, const std::string& prompt)>;

std::vector<Waveform> separate(const Waveform& mix, const std::vector<std::string>& prompts,
                               const SeparatorModel& model, const StftConfig& cfg, int parallelism = 4);
std::vector<Waveform> separate(const Waveform& mix, const std::vector<std::string>& prompts,
                               const MaskFn& mask_fn, const StftConfig& cfg);

}  // namespace opensep
