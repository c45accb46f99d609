#pragma once

// Condition assembly: the word-level tokenizer, the tag universe with
// threshold selection, and the training/inference condition bundles that
// prefix every model sequence.

#include "descant/core.hpp"
#include "descant/embedding.hpp"
#include "descant/synthetic.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace descant {

// ---------------------------------------------------------------------------
// Tokenizer
//
// Fixed word-level lexicon over lowercase words separated by single spaces.
// Reversible by construction on the synthetic lyric alphabet.

struct Lexicon {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(words.size()); }
};

inline Lexicon make_lexicon(std::vector<std::string> words) {
  Lexicon lex;
  lex.words = std::move(words);
  for (int i = 0; i < lex.size(); ++i) {
    if (!lex.index.emplace(lex.words[static_cast<std::size_t>(i)], i).second)
      throw ConfigError("lexicon: duplicate word '" + lex.words[static_cast<std::size_t>(i)] + "'");
  }
  return lex;
}

inline const Lexicon& default_lexicon() {
  static const Lexicon kLexicon = make_lexicon(lyric_word_list());
  return kLexicon;
}

inline std::vector<int> tokenize(const Lexicon& lexicon, const std::string& text) {
  for (char ch : text) {
    if (!((ch >= 'a' && ch <= 'z') || ch == ' '))
      throw DomainError(std::string("tokenize: character '") + ch +
                        "' is outside the lexicon character set [a-z ]");
  }
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string::npos) end = text.size();
    const std::string word = text.substr(pos, end - pos);
    const auto it = lexicon.index.find(word);
    if (it == lexicon.index.end())
      throw DomainError("tokenize: word '" + word + "' is not in the lexicon");
    ids.push_back(it->second);
    pos = end;
  }
  return ids;
}

inline std::string detokenize(const Lexicon& lexicon, const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= lexicon.size())
      throw DomainError("detokenize: id " + std::to_string(ids[i]) + " out of lexicon range");
    if (i) out += ' ';
    out += lexicon.words[static_cast<std::size_t>(ids[i])];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tag universe

/// The finite tag set with precomputed text embeddings, in fixed order.
struct TagUniverse {
  std::vector<std::string> tags;
  std::vector<Embedding> embeddings;

  int size() const { return static_cast<int>(tags.size()); }
};

inline TagUniverse make_tag_universe(const std::vector<std::string>& names,
                                     const EmbeddingProvider& provider) {
  if (names.empty()) throw ConfigError("tag universe: empty");
  TagUniverse u;
  u.tags = names;
  for (const auto& name : names) u.embeddings.push_back(provider.embed_text(name));
  for (const auto& e : u.embeddings)
    if (embedding_dim(e) != provider.dim())
      throw ConfigError("tag universe: embedding dimension mismatch");
  return u;
}

/// Tag universe file: one tag per line.
inline TagUniverse load_tag_universe(const std::string& path,
                                     const EmbeddingProvider& provider) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tag universe: " + path);
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) names.push_back(line);
  return make_tag_universe(names, provider);
}

/// Every tag whose cosine similarity with the prompt embedding strictly
/// exceeds delta, in universe order.
inline std::vector<std::string> select_tags(const Embedding& prompt_embedding,
                                            const TagUniverse& universe, double delta) {
  if (!(delta > 0.0 && delta < 1.0))
    throw ConfigError("select_tags: delta must lie in (0, 1)");
  std::vector<std::string> out;
  for (int i = 0; i < universe.size(); ++i) {
    if (cosine_similarity(prompt_embedding, universe.embeddings[static_cast<std::size_t>(i)]) > delta)
      out.push_back(universe.tags[static_cast<std::size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Condition bundles

/// The condition prefix of one sequence: a single joint-space embedding, tag
/// strings, and lyric token ids (lexicon-local). `dropped` marks the
/// unconditional variant used to train classifier-free guidance.
struct ConditionBundle {
  Embedding clap;
  std::vector<std::string> tags;
  std::vector<int> lyrics;
  bool dropped = false;
};

/// Training-time bundle: a uniformly random window embedding of the song, the
/// deterministic tag extraction, and the tokenized lyrics.
inline ConditionBundle build_condition_train(const SyntheticSong& song,
                                             const Lexicon& lexicon, Rng& rng) {
  if (song.windows() < 1) throw DomainError("build_condition_train: song has no windows");
  ConditionBundle bundle;
  bundle.clap = song.embeddings[static_cast<std::size_t>(rng.uniform_int(song.windows()))];
  bundle.tags = song.tags;
  bundle.lyrics = tokenize(lexicon, song.lyrics);
  return bundle;
}

/// Inference-time bundle: text prompt embedded, tags selected by threshold,
/// lyrics supplied by the caller (empty for instrumental prompts).
inline ConditionBundle build_condition_infer(const std::string& prompt_text,
                                             const EmbeddingProvider& provider,
                                             const TagUniverse& universe, double delta,
                                             std::vector<int> lyrics = {}) {
  if (prompt_text.empty()) throw DomainError("build_condition_infer: empty prompt");
  ConditionBundle bundle;
  bundle.clap = embed_text(provider, prompt_text);
  bundle.tags = select_tags(bundle.clap, universe, delta);
  bundle.lyrics = std::move(lyrics);
  return bundle;
}

}  // namespace descant
