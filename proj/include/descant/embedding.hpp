#pragma once

// Joint text/audio embedding space: the Embedding value type, cosine
// similarity, named text anchors, and the provider interface that abstracts
// the pretrained contrastive model behind it.

#include "descant/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace descant {

/// A D-dimensional vector in the joint language-audio space, one per
/// 10-second audio window or one per text anchor. Stored unnormalized; the
/// Euclidean norm is cached at construction.
struct Embedding {
  std::vector<double> values;
  double norm = 0.0;
};

inline Embedding make_embedding(std::vector<double> values) {
  double sq = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw DomainError("embedding entry is not finite");
    sq += v * v;
  }
  return Embedding{std::move(values), std::sqrt(sq)};
}

inline Embedding make_embedding(const Vec& v) {
  return make_embedding(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Vec as_vec(const Embedding& e) {
  return Eigen::Map<const Vec>(e.values.data(),
                               static_cast<Eigen::Index>(e.values.size()));
}

inline int embedding_dim(const Embedding& e) {
  return static_cast<int>(e.values.size());
}

/// Standard cosine similarity a.b / (|a| |b|). Symmetric and invariant under
/// positive rescaling of either argument.
///
/// Note on the conditioning threshold rule: the source formulation of the tag
/// threshold divides by squared norms, which is not a cosine; this library
/// implements the standard (unsquared) cosine throughout.
inline double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.values.size() != b.values.size())
    throw DomainError("cosine_similarity: dimension mismatch");
  if (a.norm == 0.0 || b.norm == 0.0)
    throw DomainError("cosine_similarity: zero-norm input");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) dot += a.values[i] * b.values[i];
  return dot / (a.norm * b.norm);
}

// ---------------------------------------------------------------------------
// Anchors

/// Ordered set of named text anchors used to score musical content over time.
struct AnchorSet {
  std::vector<std::string> names;
  std::vector<Embedding> embeddings;

  int size() const { return static_cast<int>(names.size()); }
};

inline AnchorSet make_anchor_set(std::vector<std::string> names,
                                 std::vector<Embedding> embeddings) {
  if (names.size() != embeddings.size())
    throw ConfigError("anchor set: names/embeddings size mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t j = i + 1; j < names.size(); ++j)
      if (names[i] == names[j])
        throw ConfigError("anchor set: duplicate anchor name '" + names[i] + "'");
    if (embeddings[i].norm == 0.0)
      throw ConfigError("anchor set: anchor '" + names[i] + "' has zero embedding");
  }
  return AnchorSet{std::move(names), std::move(embeddings)};
}

// ---------------------------------------------------------------------------
// Provider interface

/// Per-window feature stream: one feature row per embedding window. At desk
/// scale a row is the 5-channel instrument intensity vector of that window.
using FeatureStream = std::vector<std::vector<double>>;

/// Abstracts the pretrained contrastive embedding model. Implementations must
/// produce text and audio embeddings of identical dimension and be safe for
/// concurrent read-only use after construction.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual int dim() const = 0;
  virtual double window_seconds() const = 0;
  virtual Embedding embed_text(const std::string& text) const = 0;
  virtual std::vector<Embedding> embed_audio_windows(const FeatureStream& signal) const = 0;
};

inline Embedding embed_text(const EmbeddingProvider& provider, const std::string& text) {
  if (text.empty()) throw DomainError("embed_text: empty text");
  return provider.embed_text(text);
}

/// Embeds exactly `total_windows` windows, one per feature row, in temporal
/// order.
inline std::vector<Embedding> embed_audio_windows(const EmbeddingProvider& provider,
                                                  const FeatureStream& signal,
                                                  int total_windows) {
  if (total_windows < 1) throw DomainError("embed_audio_windows: no windows (M = 0)");
  if (static_cast<int>(signal.size()) != total_windows)
    throw DomainError("embed_audio_windows: signal has " +
                      std::to_string(signal.size()) + " rows, expected " +
                      std::to_string(total_windows));
  auto out = provider.embed_audio_windows(signal);
  if (static_cast<int>(out.size()) != total_windows)
    throw DomainError("embed_audio_windows: provider returned wrong window count");
  return out;
}

inline int windows_for_duration(double duration_seconds, double window_seconds) {
  if (window_seconds <= 0.0) throw ConfigError("window_seconds must be positive");
  return static_cast<int>(std::ceil(duration_seconds / window_seconds));
}

// ---------------------------------------------------------------------------
// Anchor table loading
//
// One line per anchor: `name<TAB>comma-separated floats`, or `name` alone in
// which case the provider embeds the name.

inline AnchorSet load_anchor_set(const std::string& path, const EmbeddingProvider& provider) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open anchor table: " + path);
  std::vector<std::string> names;
  std::vector<Embedding> embeddings;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      names.push_back(line);
      embeddings.push_back(provider.embed_text(line));
      continue;
    }
    names.push_back(line.substr(0, tab));
    std::vector<double> vals;
    std::stringstream ss(line.substr(tab + 1));
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("anchor table " + path + ":" + std::to_string(lineno) +
                      ": bad float '" + cell + "'");
      }
    }
    if (static_cast<int>(vals.size()) != provider.dim())
      throw ConfigError("anchor table " + path + ":" + std::to_string(lineno) +
                        ": dimension " + std::to_string(vals.size()) +
                        " does not match provider dim " + std::to_string(provider.dim()));
    embeddings.push_back(make_embedding(std::move(vals)));
  }
  return make_anchor_set(std::move(names), std::move(embeddings));
}

}  // namespace descant
