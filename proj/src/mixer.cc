// mixer.cc

#include "opensep/mixer.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"
#include "opensep/errors.h"
#include "opensep/wav_io.h"

namespace opensep {

namespace fs = std::filesystem;
using nlohmann::json;

void GainPolicy::validate() const {
  if (!(gain_low > 0.0 && gain_low <= gain_high))
    throw InvalidInput("gain policy requires 0 < gain_low <= gain_high");
}

Waveform weighted_sum(std::span<const Waveform> sources, std::span<const double> gains) {
  if (sources.empty() || sources.size() != gains.size())
    throw InvalidInput("weighted_sum: one gain per source required");
  Waveform out;
  out.sample_rate = sources[0].sample_rate;
  out.samples.assign(sources[0].size(), 0.0);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    if (sources[s].size() != out.size()) throw InvalidInput("mix sources differ in length");
    if (sources[s].sample_rate != out.sample_rate) throw InvalidInput("mix sources differ in sample rate");
    for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += gains[s] * sources[s].samples[i];
  }
  return out;
}

namespace {

std::vector<double> draw_gains(std::size_t n, const GainPolicy& policy) {
  policy.validate();
  std::mt19937_64 rng(policy.rng_seed);
  std::uniform_real_distribution<double> d(policy.gain_low, policy.gain_high);
  std::vector<double> g(n);
  for (auto& v : g) v = policy.gain_low == policy.gain_high ? policy.gain_low : d(rng);
  return g;
}

void check_sources(std::span<const Waveform> sources) {
  if (sources.size() < 2) throw InvalidInput("mixing needs at least two sources");
  for (const auto& s : sources) {
    if (s.size() != sources[0].size()) throw InvalidInput("mix sources differ in length");
    if (s.sample_rate != sources[0].sample_rate) throw InvalidInput("mix sources differ in sample rate");
    s.validate();
  }
}

}  // namespace

MixResult rescale_and_mix(std::span<const Waveform> sources, const GainPolicy& policy) {
  check_sources(sources);
  MixResult r;
  r.gains = draw_gains(sources.size(), policy);
  r.mixture = weighted_sum(sources, r.gains);
  const double peak = r.mixture.peak();
  if (policy.normalize_peak && peak > 1.0) {
    const double scale = kNormalizedPeak / peak;
    for (auto& g : r.gains) g *= scale;
    r.mixture = weighted_sum(sources, r.gains);
  }
  return r;
}

std::string leaf_prompt(const SourceClip& clip, PromptText mode) {
  return mode == PromptText::kEnriched && !clip.descriptor.empty() ? clip.descriptor : clip.class_label;
}

std::string pair_prompt(const std::string& a, const std::string& b) { return a + " and " + b; }

Waveform MixtureTree::node_waveform(const std::string& node) const {
  for (int i = 0; i < 4; ++i) {
    if (node == kTreeNodes[i]) {
      Waveform w = leaves[i].audio;
      for (auto& v : w.samples) v *= gains[i];
      return w;
    }
  }
  if (node == "M1") return mid[0];
  if (node == "M2") return mid[1];
  throw InvalidInput("unknown tree node: " + node);
}

MixtureTree build_mixture_tree(const std::array<SourceClip, 4>& leaves, const GainPolicy& policy,
                               const StftConfig& stft_cfg, PromptText mode) {
  std::vector<Waveform> audio;
  for (const auto& l : leaves) audio.push_back(l.audio);
  check_sources(audio);
  stft_cfg.validate();

  MixtureTree t;
  t.leaves = leaves;
  t.seed = policy.rng_seed;
  auto gains = draw_gains(4, policy);
  auto build = [&] {
    t.mid[0] = weighted_sum(std::span(audio).subspan(0, 2), std::span(gains).subspan(0, 2));
    t.mid[1] = weighted_sum(std::span(audio).subspan(2, 2), std::span(gains).subspan(2, 2));
    t.root = t.mid[0];
    for (std::size_t i = 0; i < t.root.size(); ++i) t.root.samples[i] += t.mid[1].samples[i];
  };
  build();
  const double peak = t.root.peak();
  if (policy.normalize_peak && peak > 1.0) {
    for (auto& g : gains) g *= kNormalizedPeak / peak;
    build();
  }
  std::copy(gains.begin(), gains.end(), t.gains.begin());

  for (int i = 0; i < 4; ++i) t.prompts[kTreeNodes[i]] = leaf_prompt(leaves[i], mode);
  t.prompts["M1"] = pair_prompt(t.prompts["S1"], t.prompts["S2"]);
  t.prompts["M2"] = pair_prompt(t.prompts["S3"], t.prompts["S4"]);

  t.root_spec = stft(t.root, stft_cfg);
  for (const auto& node : kTreeNodes) t.targets[node] = magnitude(stft(t.node_waveform(node), stft_cfg));
  return t;
}

std::string write_mixture_manifest(const MixtureTree& tree, const std::string& dir,
                                   const std::string& stem) {
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError(root.string(), "cannot create directory: " + ec.message());

  json j;
  j["schema_version"] = 1;
  j["seed"] = tree.seed;
  const auto root_name = stem + ".root.wav";
  write_wav((root / root_name).string(), tree.root);
  j["root_wav"] = root_name;
  j["mid_wavs"] = json::array();
  for (int k = 0; k < 2; ++k) {
    const auto name = stem + ".mid" + std::to_string(k + 1) + ".wav";
    write_wav((root / name).string(), tree.mid[k]);
    j["mid_wavs"].push_back(name);
  }
  j["leaf_wavs"] = json::array();
  j["leaf_classes"] = json::array();
  j["leaf_clip_ids"] = json::array();
  for (int k = 0; k < 4; ++k) {
    const auto name = stem + ".leaf" + std::to_string(k + 1) + ".wav";
    write_wav((root / name).string(), tree.leaves[k].audio);
    j["leaf_wavs"].push_back(name);
    j["leaf_classes"].push_back(tree.leaves[k].class_id);
    j["leaf_clip_ids"].push_back(tree.leaves[k].clip_id);
  }
  j["gains"] = tree.gains;
  j["prompts"] = tree.prompts;

  const auto path = (root / (stem + ".json")).string();
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError(path, "write failed");
  return path;
}

MixtureManifest read_mixture_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open mixture manifest");
  try {
    const json j = json::parse(is);
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const json& v) { return (base / v.get<std::string>()).string(); };
    MixtureManifest m;
    m.root_wav = resolve(j.at("root_wav"));
    for (int k = 0; k < 2; ++k) m.mid_wavs[k] = resolve(j.at("mid_wavs").at(k));
    for (int k = 0; k < 4; ++k) {
      m.leaf_wavs[k] = resolve(j.at("leaf_wavs").at(k));
      m.gains[k] = j.at("gains").at(k).get<double>();
      m.leaf_classes[k] = j.at("leaf_classes").at(k).get<std::string>();
    }
    m.prompts = j.at("prompts").get<std::map<std::string, std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
  } catch (const json::exception& e) {
    throw IoError(path, std::string("malformed mixture manifest: ") + e.what());
  }
}

}  // namespace opensep
