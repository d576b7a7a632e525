// separator.cc

#include "opensep/separator.h"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <random>
#include <thread>

#include "json.hpp"
#include "opensep/errors.h"

namespace opensep {

using json = nlohmann::json;
using nn::Mat;
using nn::Tape;

namespace {

Mat normal(std::mt19937_64& rng, int rows, int cols, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// One identity block per head, so a query and a key carrying the same
// frequency features line up in every head.
Mat position_init(int embed, int heads) {
  Mat p = Mat::Zero(embed, kNumericFeatures);
  const int dh = embed / heads;
  for (int h = 0; h < heads; ++h)
    for (int r = 0; r < std::min(dh, kNumericFeatures); ++r) p(h * dh + r, r) = std::sqrt(2.0);
  return p;
}

Mat positional_encoding(int embed, int n) {
  Mat pe(embed, n);
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < embed; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / embed);
      pe(i, pos) = i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

Mat token_frequency_features(const TextEmbedding& e) {
  Mat phi = Mat::Zero(kNumericFeatures, static_cast<Eigen::Index>(e.tokens.size()));
  for (std::size_t j = 0; j < e.hertz.size(); ++j)
    if (e.hertz[j] > 0) phi.col(static_cast<Eigen::Index>(j)) = frequency_features(e.hertz[j]);
  return phi;
}

std::string lvl(const char* prefix, int l, const char* field) {
  return std::string(prefix) + std::to_string(l) + "." + field;
}

}  // namespace

// ---- model ----

SeparatorModel::SeparatorModel(const SeparatorConfig& cfg, std::vector<std::string> vocab)
    : config_(cfg), vocab_(std::move(vocab)) {
  cfg.validate();
  std::sort(vocab_.begin(), vocab_.end());
  vocab_.erase(std::unique(vocab_.begin(), vocab_.end()), vocab_.end());

  std::mt19937_64 rng(cfg.rng_seed);
  const int e = cfg.embed_dim;
  const int levels = cfg.levels;
  const int table = 1 + static_cast<int>(vocab_.size()) + cfg.hash_buckets;
  add("tok.embed", normal(rng, e, table, 1.0));
  add("tok.num", normal(rng, e, kNumericFeatures, 0.25));

  const int c0 = cfg.channels(0);
  add("stem.w", normal(rng, c0, 27, std::sqrt(2.0 / 27)));
  add("stem.b", Mat::Zero(c0, 1));
  for (int l = 1; l <= levels; ++l) {
    const int cin = cfg.channels(l - 1), cout = cfg.channels(l);
    add(lvl("enc", l, "w"), normal(rng, cout, 9 * cin, std::sqrt(2.0 / (9 * cin))));
    add(lvl("enc", l, "b"), Mat::Zero(cout, 1));
  }
  for (int l = 1; l <= levels; ++l) {
    if (!cfg.has_attention(l)) continue;
    const int c = cfg.channels(l);
    for (const char* p : {"sa", "xa"}) {
      const bool cross = p[0] == 'x';
      add(lvl(p, l, "ln_g"), Mat::Ones(c, 1));
      add(lvl(p, l, "ln_b"), Mat::Zero(c, 1));
      add(lvl(p, l, "wq"), normal(rng, e, c, 1.0 / std::sqrt(c)));
      const int kin = cross ? e : c;
      add(lvl(p, l, "wk"), normal(rng, e, kin, 1.0 / std::sqrt(kin)));
      add(lvl(p, l, "wv"), normal(rng, e, kin, 1.0 / std::sqrt(kin)));
      add(lvl(p, l, "pos"), position_init(e, cfg.attention_heads));
      add(lvl(p, l, "wo"), normal(rng, c, e, 1.0 / std::sqrt(e)));
    }
  }
  for (int l = levels - 1; l >= 0; --l) {
    const int cin = cfg.channels(l + 1) + cfg.channels(l), cout = cfg.channels(l);
    add(lvl("dec", l, "w"), normal(rng, cout, 9 * cin, std::sqrt(2.0 / (9 * cin))));
    add(lvl("dec", l, "b"), Mat::Zero(cout, 1));
  }
  add("head.w", normal(rng, 1, c0, 1.0 / std::sqrt(c0)));
  add("head.b", Mat::Zero(1, 1));
}

void SeparatorModel::add(const std::string& name, Mat value) {
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(value));
}

nn::Parameter& SeparatorModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("no parameter named " + name);
  return params_[it->second];
}

const nn::Parameter& SeparatorModel::param(const std::string& name) const {
  return const_cast<SeparatorModel*>(this)->param(name);
}

std::size_t SeparatorModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool SeparatorModel::all_finite() const {
  for (const auto& p : params_)
    if (!p.value.allFinite()) return false;
  return true;
}

void SeparatorModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

TextEmbedding encode_text(const std::string& text, const SeparatorModel& model) {
  TextEmbedding e = tokenize(text, model.vocabulary(), model.config());
  const auto n = static_cast<Eigen::Index>(e.tokens.size());
  const Mat& table = model.param("tok.embed").value;
  e.vectors = positional_encoding(model.config().embed_dim, static_cast<int>(n));
  for (Eigen::Index j = 0; j < n; ++j) e.vectors.col(j) += table.col(e.tokens[j]);
  e.vectors += model.param("tok.num").value * token_frequency_features(e);
  return e;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'O', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(path, "truncated checkpoint");
  return v;
}

void put_mat(std::ostream& os, const Mat& m) {
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

void get_mat(std::istream& is, Mat& m, const std::string& path) {
  if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size())))
    throw IoError(path, "truncated checkpoint");
}

}  // namespace

void save_checkpoint(const std::string& path, const SeparatorModel& model, const std::string& state_json) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  json header;
  header["config"] = json::parse(to_json(model.config()));
  header["vocab"] = model.vocabulary();
  header["state"] = json::parse(state_json);
  json shapes = json::array();
  for (const auto& p : model.parameters()) shapes.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  header["params"] = shapes;
  const std::string h = header.dump();

  // write to a sibling and rename, so a crash never leaves half a checkpoint
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(tmp, "cannot open for writing");
    os.write(kMagic, sizeof(kMagic));
    put(os, kCheckpointVersion);
    put(os, static_cast<std::uint64_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& p : model.parameters()) {
      put_mat(os, p.value);
      put_mat(os, p.adam_m);
      put_mat(os, p.adam_v);
    }
    if (!os) throw IoError(tmp, "write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError(path, "cannot move checkpoint into place");
}

SeparatorModel load_checkpoint(const std::string& path, std::string* state_json) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open checkpoint");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path, "not an opensep checkpoint");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
  const auto len = get<std::uint64_t>(is, path);
  if (len > (1u << 26)) throw IoError(path, "checkpoint header too large");
  std::string h(len, '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(len))) throw IoError(path, "truncated checkpoint");

  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw IoError(path, std::string("bad checkpoint header: ") + e.what());
  }
  SeparatorModel model(separator_config_from_json(header.at("config").dump()),
                       header.at("vocab").get<std::vector<std::string>>());
  const auto& shapes = header.at("params");
  if (shapes.size() != model.parameters().size()) throw IoError(path, "parameter list does not match the config");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& p = model.parameters()[i];
    if (shapes[i].at("name") != p.name || shapes[i].at("rows") != p.value.rows() || shapes[i].at("cols") != p.value.cols())
      throw IoError(path, "parameter " + p.name + " does not match the config");
    get_mat(is, p.value, path);
    get_mat(is, p.adam_m, path);
    get_mat(is, p.adam_v, path);
  }
  if (state_json) *state_json = header.at("state").dump();
  return model;
}

// ---- graph ----

namespace {

int norm(Tape& t, SeparatorModel& m, const char* prefix, int l, int x) {
  return t.layer_norm(x, m.param(lvl(prefix, l, "ln_g")), m.param(lvl(prefix, l, "ln_b")));
}

// x + Wo * MHA(Wq xn + P phi, keys, values)
int attend(Tape& t, SeparatorModel& m, const char* prefix, int l, int x, int xn, int q_phi, int keys, int values) {
  const int q = t.add(t.linear(m.param(lvl(prefix, l, "wq")), xn), q_phi);
  const int o = t.attention(q, keys, values, m.config().attention_heads);
  return t.add(x, t.linear(m.param(lvl(prefix, l, "wo")), o));
}

}  // namespace

SeparatorGraph::SeparatorGraph(Tape& tape, SeparatorModel& model, const MagnitudeSpectrogram& mix)
    : t_(tape), m_(model) {
  const auto& cfg = m_.config();
  bins_ = mix.num_bins;
  frames_ = mix.num_frames;
  if (bins_ < 1 || frames_ < 1 || mix.bins.size() != static_cast<std::size_t>(bins_) * frames_)
    throw InvalidInput("mixture magnitude grid is malformed");
  const int q = 1 << cfg.levels;
  height_ = (bins_ + q - 1) / q * q;
  width_ = (frames_ + q - 1) / q * q;
  bin_hz_ = static_cast<double>(mix.sample_rate) / mix.config.fft_length;

  double peak = 0.0;
  for (double v : mix.bins) {
    if (!std::isfinite(v) || v < 0) throw InvalidInput("mixture magnitude must be finite and non-negative");
    peak = std::max(peak, v);
  }
  Mat x = Mat::Zero(3, static_cast<Eigen::Index>(height_) * width_);
  const double log_norm = std::log(1001.0);
  for (int f = 0; f < bins_; ++f) {
    const double u = log_frequency_coordinate(f * bin_hz_);
    for (int tt = 0; tt < frames_; ++tt) {
      const Eigen::Index p = static_cast<Eigen::Index>(f) * width_ + tt;
      const double lin = peak > 0 ? mix.at(f, tt) / peak : 0.0;
      x(0, p) = lin;
      x(1, p) = std::log1p(1000.0 * lin) / log_norm;
      x(2, p) = u;
    }
  }
  init_positions();

  enc_.assign(cfg.levels + 1, -1);
  enc_[0] = t_.silu(t_.conv3x3(t_.constant(std::move(x)), height_, width_, m_.param("stem.w"), m_.param("stem.b")));
  for (int l = 1; l <= cfg.levels; ++l) {
    const int pooled = t_.avgpool2(enc_[l - 1], level_height(l - 1), level_width(l - 1));
    int h = t_.silu(t_.conv3x3(pooled, level_height(l), level_width(l), m_.param(lvl("enc", l, "w")),
                               m_.param(lvl("enc", l, "b"))));
    if (cfg.has_attention(l)) {
      const int pe = t_.linear(m_.param(lvl("sa", l, "pos")), pix_phi_[l]);
      const int xn = norm(t_, m_, "sa", l, h);
      const int k = t_.add(t_.linear(m_.param(lvl("sa", l, "wk")), xn), pe);
      const int v = t_.linear(m_.param(lvl("sa", l, "wv")), xn);
      h = attend(t_, m_, "sa", l, h, xn, pe, k, v);
    }
    enc_[l] = h;
  }
}

SeparatorGraph::SeparatorGraph(Tape& tape, SeparatorModel& model, const EncoderFeatures& f)
    : t_(tape), m_(model), bins_(f.bins), frames_(f.frames), height_(f.height), width_(f.width), bin_hz_(f.bin_hz) {
  if (static_cast<int>(f.levels.size()) != m_.config().levels + 1)
    throw InvalidInput("encoder features do not match the model depth");
  init_positions();
  for (const auto& m : f.levels) enc_.push_back(t_.constant(m));
}

EncoderFeatures SeparatorGraph::features() const {
  EncoderFeatures f;
  f.bins = bins_;
  f.frames = frames_;
  f.height = height_;
  f.width = width_;
  f.bin_hz = bin_hz_;
  for (int id : enc_) f.levels.push_back(t_.value(id));
  return f;
}

void SeparatorGraph::init_positions() {
  const auto& cfg = m_.config();
  pix_phi_.assign(cfg.levels + 1, -1);
  for (int l = 1; l <= cfg.levels; ++l) {
    if (!cfg.has_attention(l)) continue;
    const int h = level_height(l), w = level_width(l);
    Mat phi(kNumericFeatures, static_cast<Eigen::Index>(h) * w);
    for (int r = 0; r < h; ++r) {
      // centre of the 2^l full-resolution rows pooled into row r
      const double centre = (r + 0.5) * (1 << l) - 0.5;
      const Eigen::VectorXd col = frequency_features(centre * bin_hz_);
      for (int c = 0; c < w; ++c) phi.col(static_cast<Eigen::Index>(r) * w + c) = col;
    }
    pix_phi_[l] = t_.constant(std::move(phi));
  }
}

int SeparatorGraph::text_node(const TextEmbedding& cond) {
  if (cond.tokens.empty()) throw InvalidInput("empty text condition");
  const int n = static_cast<int>(cond.tokens.size());
  const int e = t_.gather_columns(m_.param("tok.embed"), cond.tokens);
  const int pe = t_.constant(positional_encoding(m_.config().embed_dim, n));
  const int num = t_.linear(m_.param("tok.num"), t_.constant(token_frequency_features(cond)));
  return t_.add(t_.add(e, pe), num);
}

int SeparatorGraph::decode(const TextEmbedding& cond) {
  const auto& cfg = m_.config();
  const int text = text_node(cond);
  const int tok_phi = t_.constant(token_frequency_features(cond));

  std::vector<int> skip(enc_);
  for (int l = 1; l <= cfg.levels; ++l) {
    if (!cfg.has_attention(l)) continue;
    const int q_phi = t_.linear(m_.param(lvl("xa", l, "pos")), pix_phi_[l]);
    const int k = t_.add(t_.linear(m_.param(lvl("xa", l, "wk")), text),
                         t_.linear(m_.param(lvl("xa", l, "pos")), tok_phi));
    const int v = t_.linear(m_.param(lvl("xa", l, "wv")), text);
    skip[l] = attend(t_, m_, "xa", l, enc_[l], norm(t_, m_, "xa", l, enc_[l]), q_phi, k, v);
  }

  int d = skip[cfg.levels];
  for (int l = cfg.levels - 1; l >= 0; --l) {
    const int up = t_.upsample2(d, level_height(l + 1), level_width(l + 1));
    d = t_.silu(t_.conv3x3(t_.concat_rows(up, skip[l]), level_height(l), level_width(l),
                           m_.param(lvl("dec", l, "w")), m_.param(lvl("dec", l, "b"))));
  }
  // Normalizing over pixels keeps the head from sliding every logit down at
  // once; a uniform shift is left to the single head bias.
  const int mask = t_.sigmoid(t_.linear(m_.param("head.w"), t_.instance_norm(d), m_.param("head.b")));
  return t_.crop(mask, height_, width_, bins_, frames_);
}

// ---- inference ----

namespace {

Mask to_mask(const Mat& row, int bins, int frames) {
  Mask m;
  m.num_bins = bins;
  m.num_frames = frames;
  m.bins.assign(row.data(), row.data() + row.size());
  return m;
}

// Inference never writes to the model; the graph API takes non-const
// parameters because training shares it.
SeparatorModel& mutable_model(const SeparatorModel& m) { return const_cast<SeparatorModel&>(m); }

}  // namespace

Mask predict_mask(const MagnitudeSpectrogram& mix_mag, const TextEmbedding& cond, const SeparatorModel& model) {
  Tape t(false);
  SeparatorGraph g(t, mutable_model(model), mix_mag);
  return to_mask(t.value(g.decode(cond)), mix_mag.num_bins, mix_mag.num_frames);
}

std::vector<Mask> predict_masks(const MagnitudeSpectrogram& mix_mag, const std::vector<std::string>& prompts,
                                const SeparatorModel& model, int parallelism) {
  std::vector<TextEmbedding> conds;
  for (const auto& p : prompts) conds.push_back(tokenize(p, model.vocabulary(), model.config()));
  EncoderFeatures feats;
  {
    Tape t(false);
    SeparatorGraph g(t, mutable_model(model), mix_mag);
    feats = g.features();
  }
  std::vector<Mask> out(prompts.size());
  std::vector<std::exception_ptr> errors(prompts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < prompts.size(); i = next++) {
      try {
        Tape t(false);
        SeparatorGraph g(t, mutable_model(model), feats);
        out[i] = to_mask(t.value(g.decode(conds[i])), mix_mag.num_bins, mix_mag.num_frames);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::clamp(parallelism, 1, std::max(1, static_cast<int>(prompts.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---- loss ----

std::string to_string(Objective o) { return o == Objective::kMultiLevel ? "multi_level" : "single_level"; }

Objective objective_from_string(const std::string& s) {
  if (s == "multi_level") return Objective::kMultiLevel;
  if (s == "single_level") return Objective::kSingleLevel;
  throw InvalidInput("unknown objective: " + s);
}

std::vector<std::string> objective_nodes(Objective o) {
  std::vector<std::string> nodes(kTreeNodes.begin(), kTreeNodes.end());
  if (o == Objective::kSingleLevel) nodes.resize(4);
  return nodes;
}

int multilevel_loss_node(Tape& tape, SeparatorModel& model, const MagnitudeSpectrogram& root,
                         const std::vector<std::pair<std::string, const MagnitudeSpectrogram*>>& prompt_targets) {
  if (prompt_targets.empty()) throw InvalidInput("loss needs at least one prompt");
  const auto n = static_cast<Eigen::Index>(root.bins.size());
  const Mat scale = Eigen::Map<const Mat>(root.bins.data(), 1, n);
  SeparatorGraph g(tape, model, root);
  std::vector<int> terms;
  for (const auto& [prompt, target] : prompt_targets) {
    if (!target->same_shape(root) || target->bins.size() != root.bins.size())
      throw InvalidInput("target grid does not match the mixture grid");
    const int m = g.decode(tokenize(prompt, model.vocabulary(), model.config()));
    terms.push_back(tape.masked_l1(m, scale, Eigen::Map<const Mat>(target->bins.data(), 1, n)));
  }
  return tape.scaled_sum(terms, 1.0 / static_cast<double>(terms.size()));
}

namespace {

MagnitudeSpectrogram checked_root(const MixtureTree& tree, const std::vector<std::string>& nodes) {
  MagnitudeSpectrogram root = magnitude(tree.root_spec);
  for (const auto& node : nodes) {
    auto it = tree.targets.find(node);
    if (it == tree.targets.end()) throw InvalidInput("tree has no target for " + node);
    if (!it->second.same_shape(root) || !(it->second.config == root.config))
      throw InvalidInput("target " + node + " is not on the mixture's STFT grid");
  }
  return root;
}

}  // namespace

double multilevel_loss(const MixtureTree& tree, const SeparatorModel& model, Objective objective) {
  const auto nodes = objective_nodes(objective);
  const MagnitudeSpectrogram root = checked_root(tree, nodes);
  std::vector<std::pair<std::string, const MagnitudeSpectrogram*>> pt;
  for (const auto& node : nodes) pt.emplace_back(tree.prompts.at(node), &tree.targets.at(node));
  Tape t(false);
  return t.value(multilevel_loss_node(t, mutable_model(model), root, pt))(0, 0);
}

double multilevel_loss(const MixtureTree& tree, const std::function<Mask(const std::string&)>& masks,
                       const std::vector<std::string>& nodes) {
  if (nodes.empty()) throw InvalidInput("loss needs at least one prompt");
  const MagnitudeSpectrogram root = checked_root(tree, nodes);
  double total = 0.0;
  for (const auto& node : nodes) {
    const Mask m = masks(node);
    if (m.num_bins != root.num_bins || m.num_frames != root.num_frames || m.bins.size() != root.bins.size())
      throw InvalidInput("mask for " + node + " does not match the mixture grid");
    const auto& target = tree.targets.at(node).bins;
    double acc = 0.0;
    for (std::size_t i = 0; i < root.bins.size(); ++i) acc += std::abs(m.bins[i] * root.bins[i] - target[i]);
    total += acc / static_cast<double>(root.bins.size());
  }
  return total / static_cast<double>(nodes.size());
}

// ---- separation ----

std::vector<Waveform> separate(const Waveform& mix, const std::vector<std::string>& prompts,
                               const SeparatorModel& model, const StftConfig& cfg, int parallelism) {
  if (prompts.empty()) throw InvalidInput("separate needs at least one prompt");
  const ComplexSpectrogram spec = stft(mix, cfg);
  const auto masks = predict_masks(magnitude(spec), prompts, model, parallelism);
  std::vector<Waveform> out;
  for (const auto& m : masks) out.push_back(apply_mask_and_reconstruct(spec, m));
  return out;
}

std::vector<Waveform> separate(const Waveform& mix, const std::vector<std::string>& prompts,
                               const MaskFn& mask_fn, const StftConfig& cfg) {
  if (prompts.empty()) throw InvalidInput("separate needs at least one prompt");
  const ComplexSpectrogram spec = stft(mix, cfg);
  const MagnitudeSpectrogram mag = magnitude(spec);
  std::vector<Waveform> out;
  for (const auto& p : prompts) out.push_back(apply_mask_and_reconstruct(spec, mask_fn(mag, p)));
  return out;
}

}  // namespace opensep
