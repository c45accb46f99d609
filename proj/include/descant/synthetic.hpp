#pragma once

// Synthetic music domain with known ground truth. A song is a section-
// structured program of per-window instrument intensities; window embeddings,
// tags, lyrics and audio tokens are all derived from those intensities, so
// every downstream claim (structural correlation, adherence, copying) can be
// checked against construction.

#include "descant/core.hpp"
#include "descant/embedding.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace descant {

inline constexpr int kNumChannels = 5;
inline constexpr std::array<const char*, kNumChannels> kChannelNames = {
    "vocals", "bass", "drums", "guitar", "piano"};

inline constexpr std::array<const char*, 3> kGenreTags = {"pop", "ballad", "ambient"};

// Vocabulary the synthetic lyric generator draws from; also the tokenizer
// lexicon (word-level, lowercase a-z plus space).
inline const std::vector<std::string>& lyric_word_list() {
  static const std::vector<std::string> kWords = {
      "la",   "da",   "oh",   "yeah", "night", "light", "love", "dream",
      "fire", "rain", "sun",  "moon", "heart", "road",  "home", "time",
      "sky",  "run",  "stay", "gone"};
  return kWords;
}

// ---------------------------------------------------------------------------
// Synthetic embedding provider
//
// The five channel anchors are orthonormal columns of a seeded D x 5 matrix P;
// a window with intensity row u embeds as normalize(P u + eps) where eps is a
// content-keyed Gaussian perturbation. Because the anchors are exact columns
// of P, cosine similarity against an anchor is monotone in that channel's
// intensity, which turns the analyzability claim into a testable property.

class SyntheticProvider final : public EmbeddingProvider {
 public:
  SyntheticProvider(int dim, std::uint64_t seed, double noise_scale,
                    double window_seconds = 10.0)
      : dim_(dim), seed_(seed), noise_scale_(noise_scale), window_seconds_(window_seconds) {
    if (dim < kNumChannels)
      throw ConfigError("provider dim must be >= " + std::to_string(kNumChannels));
    if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    anchors_ = orthonormal_columns(dim, kNumChannels, derive_seed(seed, "anchors"));
  }

  int dim() const override { return dim_; }
  double window_seconds() const override { return window_seconds_; }
  std::uint64_t seed() const { return seed_; }
  double noise_scale() const { return noise_scale_; }

  /// D x 5 matrix whose columns are the channel anchor embeddings.
  const Mat& anchor_matrix() const { return anchors_; }

  Embedding embed_text(const std::string& text) const override {
    if (text.empty()) throw DomainError("embed_text: empty text");
    for (int c = 0; c < kNumChannels; ++c)
      if (text == kChannelNames[c]) return make_embedding(Vec(anchors_.col(c)));
    // Any other text maps to a seeded unit vector keyed by its content.
    Rng rng(derive_seed(seed_, fnv1a64("text:" + text)));
    Vec v(dim_);
    for (int i = 0; i < dim_; ++i) v[i] = rng.next_gaussian();
    v.normalize();
    return make_embedding(v);
  }

  std::vector<Embedding> embed_audio_windows(const FeatureStream& signal) const override {
    if (signal.empty()) throw DomainError("embed_audio_windows: empty signal");
    std::vector<Embedding> out;
    out.reserve(signal.size());
    for (const auto& row : signal) out.push_back(embed_window(row));
    return out;
  }

  /// Embeds one intensity row. Noise is keyed by the row content, so the
  /// mapping is a pure function of (provider seed, row).
  Embedding embed_window(const std::vector<double>& intensities) const {
    if (static_cast<int>(intensities.size()) != kNumChannels)
      throw DomainError("embed_window: expected " + std::to_string(kNumChannels) +
                        " intensity channels, got " + std::to_string(intensities.size()));
    Vec u(kNumChannels);
    for (int c = 0; c < kNumChannels; ++c) u[c] = intensities[c];
    Vec e = anchors_ * u;
    if (noise_scale_ > 0.0) {
      std::uint64_t h = hash_mix(derive_seed(seed_, "window-noise"),
                                 fnv1a64(intensities.data(),
                                         intensities.size() * sizeof(double)));
      Rng rng(h);
      for (int i = 0; i < dim_; ++i) e[i] += noise_scale_ * rng.next_gaussian();
    }
    const double n = e.norm();
    if (n < 1e-12)
      throw DomainError("embed_window: degenerate zero embedding (all-zero intensities with no noise)");
    return make_embedding(Vec(e / n));
  }

  AnchorSet channel_anchors() const {
    std::vector<std::string> names(kChannelNames.begin(), kChannelNames.end());
    std::vector<Embedding> embs;
    for (int c = 0; c < kNumChannels; ++c) embs.push_back(make_embedding(Vec(anchors_.col(c))));
    return make_anchor_set(std::move(names), std::move(embs));
  }

 private:
  // Modified Gram-Schmidt on seeded Gaussians; deterministic and portable.
  static Mat orthonormal_columns(int dim, int count, std::uint64_t seed) {
    Rng rng(seed);
    Mat m(dim, count);
    for (int c = 0; c < count; ++c) {
      Vec v(dim);
      for (int i = 0; i < dim; ++i) v[i] = rng.next_gaussian();
      for (int prev = 0; prev < c; ++prev) v -= m.col(prev).dot(v) * m.col(prev);
      const double n = v.norm();
      if (n < 1e-8) throw DomainError("orthonormal_columns: degenerate draw");
      m.col(c) = v / n;
    }
    return m;
  }

  int dim_;
  std::uint64_t seed_;
  double noise_scale_;
  double window_seconds_;
  Mat anchors_;
};

// ---------------------------------------------------------------------------
// Songs and corpus

/// Toy song with full ground truth. `intensities` is M x 5 in [0,1];
/// embeddings, tags, lyrics and audio tokens all derive from it.
struct SyntheticSong {
  Mat intensities;                        // M x kNumChannels
  std::vector<std::string> sections;      // per-window label
  std::vector<Embedding> embeddings;      // M windows
  std::vector<std::string> tags;
  std::string lyrics;                     // empty for instrumentals
  std::vector<int> audio_tokens;          // M * tokens_per_window ids

  int windows() const { return static_cast<int>(intensities.rows()); }
};

struct CorpusConfig {
  int songs = 200;
  int m_min = 6;
  int m_max = 18;
  double noise_scale = 0.05;
  double instrumental_fraction = 0.3;
  int tokens_per_window = 20;   // F
  int dim = 32;                 // D
  int audio_vocab = 256;        // V
  double valid_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (songs < 1) throw ConfigError("corpus: songs must be >= 1");
    if (m_min < 1 || m_max < m_min) throw ConfigError("corpus: invalid window range");
    if (noise_scale < 0) throw ConfigError("corpus: noise_scale must be >= 0");
    if (instrumental_fraction < 0 || instrumental_fraction > 1)
      throw ConfigError("corpus: instrumental_fraction out of [0,1]");
    if (tokens_per_window < 1) throw ConfigError("corpus: tokens_per_window must be >= 1");
    if (dim < kNumChannels) throw ConfigError("corpus: dim too small");
    if (audio_vocab < kNumChannels) throw ConfigError("corpus: audio_vocab too small");
    if (valid_fraction < 0 || valid_fraction >= 1)
      throw ConfigError("corpus: valid_fraction out of [0,1)");
  }
};

struct Corpus {
  CorpusConfig config;
  SyntheticProvider provider;
  std::vector<SyntheticSong> songs;
  std::vector<std::string> tag_names;     // tag universe, fixed order
  std::vector<int> train_indices;
  std::vector<int> valid_indices;
};

/// Audio ids partition into channels round-robin: id belongs to channel
/// id % kNumChannels.
inline int audio_channel_of(int audio_local_id) { return audio_local_id % kNumChannels; }

inline int audio_channel_size(int audio_vocab, int channel) {
  return (audio_vocab - channel + kNumChannels - 1) / kNumChannels;
}

/// Draws one audio id for a window: channel ~ intensities (normalized), then
/// uniform within the channel's id set. An all-zero row falls back to a
/// uniform channel choice.
inline int draw_audio_token(const Eigen::Ref<const Eigen::RowVectorXd>& intensity_row,
                            int audio_vocab, Rng& rng) {
  double total = 0.0;
  for (int c = 0; c < kNumChannels; ++c) total += intensity_row[c];
  int channel = 0;
  if (total <= 0.0) {
    channel = rng.uniform_int(kNumChannels);
  } else {
    double u = rng.next_double() * total;
    double acc = 0.0;
    channel = kNumChannels - 1;
    for (int c = 0; c < kNumChannels; ++c) {
      acc += intensity_row[c];
      if (u < acc) {
        channel = c;
        break;
      }
    }
    // Zero-intensity channels can never win: u < acc only moves past them.
  }
  const int within = rng.uniform_int(audio_channel_size(audio_vocab, channel));
  return channel + within * kNumChannels;
}

namespace detail {

struct SectionProfile {
  const char* name;
  std::array<double, kNumChannels> mean;  // vocals, bass, drums, guitar, piano
};

inline const std::array<SectionProfile, 4>& section_profiles() {
  static const std::array<SectionProfile, 4> kProfiles = {{
      {"intro", {0.05, 0.25, 0.15, 0.45, 0.55}},
      {"verse", {0.60, 0.50, 0.45, 0.40, 0.30}},
      {"chorus", {0.90, 0.70, 0.85, 0.65, 0.35}},
      {"outro", {0.15, 0.30, 0.20, 0.50, 0.60}},
  }};
  return kProfiles;
}

inline const SectionProfile& profile_for(const std::string& name) {
  for (const auto& p : section_profiles())
    if (name == p.name) return p;
  throw DomainError("unknown section label: " + name);
}

// Left-to-right section grammar: intro, then verse (optionally alternating
// with chorus), then outro. Roughly a quarter of songs skip the chorus.
inline std::vector<std::string> draw_sections(int windows, Rng& rng) {
  std::vector<std::string> out;
  out.reserve(windows);
  const bool has_chorus = rng.next_double() < 0.75;
  auto push = [&](const char* name, int count) {
    for (int i = 0; i < count && static_cast<int>(out.size()) < windows; ++i)
      out.emplace_back(name);
  };
  push("intro", 1);
  bool verse_turn = true;
  while (static_cast<int>(out.size()) < windows - 1) {
    const int len = 1 + rng.uniform_int(2);
    if (verse_turn || !has_chorus)
      push("verse", len);
    else
      push("chorus", len);
    verse_turn = !verse_turn;
  }
  if (static_cast<int>(out.size()) < windows) push("outro", 1);
  return out;
}

inline std::string derive_genre(const std::vector<std::string>& sections) {
  int chorus = 0, verse = 0;
  for (const auto& s : sections) {
    if (s == "chorus") ++chorus;
    if (s == "verse") ++verse;
  }
  const double m = static_cast<double>(sections.size());
  if (chorus / m >= 0.25) return "pop";
  if (verse / m >= 0.40) return "ballad";
  return "ambient";
}

}  // namespace detail

/// Deterministic tag extraction: channels whose mean intensity over the song
/// exceeds 0.4, plus the section-derived genre tag.
inline std::vector<std::string> mir_stub(const SyntheticSong& song) {
  std::vector<std::string> tags;
  const double m = static_cast<double>(song.windows());
  for (int c = 0; c < kNumChannels; ++c) {
    if (m > 0 && song.intensities.col(c).sum() / m > 0.4) tags.emplace_back(kChannelNames[c]);
  }
  tags.push_back(detail::derive_genre(song.sections));
  return tags;
}

inline std::vector<std::string> tag_universe_names() {
  std::vector<std::string> names(kChannelNames.begin(), kChannelNames.end());
  names.insert(names.end(), kGenreTags.begin(), kGenreTags.end());
  return names;
}

inline SyntheticSong generate_song(const CorpusConfig& config,
                                   const SyntheticProvider& provider,
                                   std::uint64_t song_seed) {
  Rng rng(song_seed);
  const int windows = config.m_min + rng.uniform_int(config.m_max - config.m_min + 1);
  const bool instrumental = rng.next_double() < config.instrumental_fraction;

  SyntheticSong song;
  song.sections = detail::draw_sections(windows, rng);
  song.intensities = Mat(windows, kNumChannels);

  // Per-channel smooth noise: first-order low-pass over Gaussian steps.
  std::array<double, kNumChannels> drift{};
  for (int m = 0; m < windows; ++m) {
    const auto& prof = detail::profile_for(song.sections[m]);
    for (int c = 0; c < kNumChannels; ++c) {
      drift[c] = 0.7 * drift[c] + 0.08 * rng.next_gaussian();
      double v = prof.mean[c] + drift[c];
      if (c == 0 && instrumental) v *= 0.05;
      song.intensities(m, c) = std::clamp(v, 0.0, 1.0);
    }
  }

  FeatureStream signal(windows, std::vector<double>(kNumChannels));
  for (int m = 0; m < windows; ++m)
    for (int c = 0; c < kNumChannels; ++c) signal[m][c] = song.intensities(m, c);
  song.embeddings = provider.embed_audio_windows(signal);

  song.tags = mir_stub(song);

  const double vocal_mean = song.intensities.col(0).sum() / windows;
  if (vocal_mean > 0.2) {
    const auto& words = lyric_word_list();
    const int n_words = 4 + rng.uniform_int(9);
    std::string lyrics;
    for (int i = 0; i < n_words; ++i) {
      if (i) lyrics += ' ';
      lyrics += words[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(words.size())))];
    }
    song.lyrics = lyrics;
  }

  song.audio_tokens.reserve(static_cast<std::size_t>(windows) * config.tokens_per_window);
  for (int m = 0; m < windows; ++m)
    for (int t = 0; t < config.tokens_per_window; ++t)
      song.audio_tokens.push_back(draw_audio_token(song.intensities.row(m),
                                                   config.audio_vocab, rng));
  return song;
}

/// Generates the full corpus: songs, the provider that embeds them, the tag
/// universe, and a seeded train/validation split.
inline Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus{config,
                SyntheticProvider(config.dim, derive_seed(config.seed, "provider"),
                                  config.noise_scale),
                {},
                tag_universe_names(),
                {},
                {}};
  corpus.songs.reserve(config.songs);
  const std::uint64_t split_seed = derive_seed(config.seed, "split");
  for (int i = 0; i < config.songs; ++i) {
    corpus.songs.push_back(
        generate_song(config, corpus.provider, derive_seed(config.seed, static_cast<std::uint64_t>(i))));
    const double u = static_cast<double>(derive_seed(split_seed, static_cast<std::uint64_t>(i)) >> 11) * 0x1.0p-53;
    if (u < config.valid_fraction)
      corpus.valid_indices.push_back(i);
    else
      corpus.train_indices.push_back(i);
  }
  return corpus;
}

}  // namespace descant
