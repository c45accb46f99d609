#pragma once

// Single-vocabulary token layout and the coarse-to-fine sequence plumbing:
// flattening a code grid codebook-major, assembling training sequences with
// loss masks, and parsing generated streams back into (grid, audio tokens).

#include "descant/conditioning.hpp"
#include "descant/core.hpp"
#include "descant/rvq.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace descant {

// Special token ids, fixed at the bottom of the vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kCotBos = 3;
inline constexpr int kCotEos = 4;
inline constexpr int kSep = 5;
inline constexpr int kNullCond = 6;
inline constexpr int kNumSpecials = 7;

/// Contiguous id blocks: specials, text (lexicon), tags, L CoT blocks of Q
/// ids each, then the audio block. Every id maps to exactly one
/// (segment, local index).
struct VocabLayout {
  std::vector<std::string> lexicon;
  std::vector<std::string> tags;
  int levels = 0;          // L
  int codebook_size = 0;   // Q
  int audio_vocab = 0;     // V

  int text_base() const { return kNumSpecials; }
  int tag_base() const { return text_base() + static_cast<int>(lexicon.size()); }
  int cot_base() const { return tag_base() + static_cast<int>(tags.size()); }
  int audio_base() const { return cot_base() + levels * codebook_size; }
  int vocab_size() const { return audio_base() + audio_vocab; }

  bool is_text(int id) const { return id >= text_base() && id < tag_base(); }
  bool is_tag(int id) const { return id >= tag_base() && id < cot_base(); }
  bool is_cot(int id) const { return id >= cot_base() && id < audio_base(); }
  bool is_audio(int id) const { return id >= audio_base() && id < vocab_size(); }

  int text_id(int word) const { return text_base() + word; }
  int tag_id(const std::string& tag) const {
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == tag) return tag_base() + static_cast<int>(i);
    throw ConfigError("layout: tag '" + tag + "' not in tag block");
  }
  // level is 0-based; level k local index q maps to cot_base + k*Q + q.
  int cot_id(int level, int index) const {
    if (level < 0 || level >= levels || index < 0 || index >= codebook_size)
      throw DomainError("layout: cot (level " + std::to_string(level + 1) + ", index " +
                        std::to_string(index) + ") out of range");
    return cot_base() + level * codebook_size + index;
  }
  std::pair<int, int> cot_of(int id) const {
    if (!is_cot(id)) throw DomainError("layout: id " + std::to_string(id) + " is not a cot token");
    const int local = id - cot_base();
    return {local / codebook_size, local % codebook_size};
  }
  int audio_id(int local) const {
    if (local < 0 || local >= audio_vocab)
      throw DomainError("layout: audio index " + std::to_string(local) + " out of range");
    return audio_base() + local;
  }
  int audio_of(int id) const {
    if (!is_audio(id)) throw DomainError("layout: id " + std::to_string(id) + " is not an audio token");
    return id - audio_base();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"lexicon", lexicon},
                          {"tags", tags},
                          {"levels", levels},
                          {"codebook_size", codebook_size},
                          {"audio_vocab", audio_vocab}};
  }
  static VocabLayout from_json(const nlohmann::json& j) {
    VocabLayout l;
    l.lexicon = j.at("lexicon").get<std::vector<std::string>>();
    l.tags = j.at("tags").get<std::vector<std::string>>();
    l.levels = j.at("levels").get<int>();
    l.codebook_size = j.at("codebook_size").get<int>();
    l.audio_vocab = j.at("audio_vocab").get<int>();
    return l;
  }
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

inline VocabLayout make_layout(std::vector<std::string> lexicon, std::vector<std::string> tags,
                               int levels, int codebook_size, int audio_vocab) {
  if (levels < 1 || codebook_size < 1 || audio_vocab < 1)
    throw ConfigError("layout: levels, codebook_size and audio_vocab must be >= 1");
  VocabLayout l;
  l.lexicon = std::move(lexicon);
  l.tags = std::move(tags);
  l.levels = levels;
  l.codebook_size = codebook_size;
  l.audio_vocab = audio_vocab;
  return l;
}

// ---------------------------------------------------------------------------
// Token sequences

enum class Segment : std::uint8_t { Condition, Cot, Audio, Special };

inline const char* segment_name(Segment s) {
  switch (s) {
    case Segment::Condition: return "condition";
    case Segment::Cot: return "cot";
    case Segment::Audio: return "audio";
    case Segment::Special: return "special";
  }
  return "?";
}

/// One flat token stream with per-position segment labels and loss mask. When
/// the condition carries a continuous embedding, `clap_pos` names the
/// reserved position and `clap` holds the raw vector the model projects.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<Segment> segments;
  std::vector<std::uint8_t> loss_mask;
  int clap_pos = -1;
  std::vector<double> clap;

  int size() const { return static_cast<int>(ids.size()); }
  void push(int id, Segment seg, bool mask) {
    ids.push_back(id);
    segments.push_back(seg);
    loss_mask.push_back(mask ? 1 : 0);
  }
};

// ---------------------------------------------------------------------------
// Flattening
//
// Codebook-major order: all level-1 codes in temporal order, then all
// level-2 codes, ..., through level L, so coarse structure precedes detail.

inline std::vector<std::pair<int, int>> flatten_cot(const CotGrid& grid) {
  for (const auto& row : grid.codes)
    if (static_cast<int>(row.size()) != grid.levels)
      throw DomainError("flatten_cot: ragged grid");
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(grid.frames()) * static_cast<std::size_t>(grid.levels));
  for (int level = 0; level < grid.levels; ++level)
    for (int m = 0; m < grid.frames(); ++m)
      out.emplace_back(level, grid.codes[static_cast<std::size_t>(m)][static_cast<std::size_t>(level)]);
  return out;
}

inline CotGrid unflatten_cot(const std::vector<std::pair<int, int>>& flat, int levels) {
  if (levels < 1) throw DomainError("unflatten_cot: levels must be >= 1");
  if (flat.size() % static_cast<std::size_t>(levels) != 0)
    throw MalformedCot("unflatten_cot: length " + std::to_string(flat.size()) +
                       " not divisible by " + std::to_string(levels) + " levels");
  const int frames = static_cast<int>(flat.size()) / levels;
  CotGrid grid;
  grid.levels = levels;
  grid.codes.assign(static_cast<std::size_t>(frames), std::vector<int>(static_cast<std::size_t>(levels)));
  std::size_t pos = 0;
  for (int level = 0; level < levels; ++level) {
    for (int m = 0; m < frames; ++m, ++pos) {
      if (flat[pos].first != level)
        throw MalformedCot("unflatten_cot: expected level " + std::to_string(level + 1) +
                           " at position " + std::to_string(pos) + ", got level " +
                           std::to_string(flat[pos].first + 1));
      grid.codes[static_cast<std::size_t>(m)][static_cast<std::size_t>(level)] = flat[pos].second;
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Assembly

namespace detail {

// [bos, clap slot, tag ids, sep, lyric ids] — or [bos, null_cond] when the
// condition is dropped for CFG training. Loss mask is false throughout.
inline TokenSequence condition_prefix(const ConditionBundle& cond, const VocabLayout& layout) {
  TokenSequence seq;
  seq.push(kBos, Segment::Special, false);
  if (cond.dropped) {
    seq.push(kNullCond, Segment::Condition, false);
    return seq;
  }
  seq.clap_pos = seq.size();
  seq.clap = cond.clap.values;
  seq.push(kPad, Segment::Condition, false);  // rendered from the clap projection
  for (const auto& tag : cond.tags) seq.push(layout.tag_id(tag), Segment::Condition, false);
  seq.push(kSep, Segment::Condition, false);
  for (int word : cond.lyrics) {
    if (word < 0 || word >= static_cast<int>(layout.lexicon.size()))
      throw DomainError("assemble: lyric id " + std::to_string(word) + " out of lexicon range");
    seq.push(layout.text_id(word), Segment::Condition, false);
  }
  return seq;
}

}  // namespace detail

/// Full training sequence:
/// [bos, condition, cot_bos, flattened cot, cot_eos, audio, eos].
/// Loss mask is true from cot_bos onward and false on the condition.
inline TokenSequence assemble_training_sequence(const ConditionBundle& cond, const CotGrid& grid,
                                                const std::vector<int>& audio_tokens,
                                                const VocabLayout& layout) {
  if (grid.levels != layout.levels)
    throw DomainError("assemble: grid has " + std::to_string(grid.levels) +
                      " levels, layout expects " + std::to_string(layout.levels));
  TokenSequence seq = detail::condition_prefix(cond, layout);
  seq.push(kCotBos, Segment::Special, true);
  for (const auto& [level, index] : flatten_cot(grid))
    seq.push(layout.cot_id(level, index), Segment::Cot, true);
  seq.push(kCotEos, Segment::Special, true);
  for (int a : audio_tokens) seq.push(layout.audio_id(a), Segment::Audio, true);
  seq.push(kEos, Segment::Special, true);
  return seq;
}

/// Ablation variant with no CoT region at all:
/// [bos, condition, audio, eos], loss mask true from the first audio token.
inline TokenSequence assemble_baseline_sequence(const ConditionBundle& cond,
                                                const std::vector<int>& audio_tokens,
                                                const VocabLayout& layout) {
  TokenSequence seq = detail::condition_prefix(cond, layout);
  for (int a : audio_tokens) seq.push(layout.audio_id(a), Segment::Audio, true);
  seq.push(kEos, Segment::Special, true);
  return seq;
}

/// Replaces the condition region of an assembled sequence with the single
/// null_cond token (classifier-free-guidance dropout applied after assembly).
inline TokenSequence drop_condition(const TokenSequence& seq) {
  TokenSequence out;
  out.push(kBos, Segment::Special, false);
  out.push(kNullCond, Segment::Condition, false);
  for (int i = 1; i < seq.size(); ++i) {
    if (seq.segments[static_cast<std::size_t>(i)] == Segment::Condition) continue;
    out.push(seq.ids[static_cast<std::size_t>(i)], seq.segments[static_cast<std::size_t>(i)],
             seq.loss_mask[static_cast<std::size_t>(i)] != 0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

struct ParsedStream {
  CotGrid grid;
  std::vector<int> audio_tokens;
};

/// Inverse of the assembly arrangement. Splits on cot_bos/cot_eos, validates
/// the CoT region (length divisible by L, level runs ascending with equal
/// lengths), and recovers the grid plus audio ids. A stream with no cot_bos
/// is treated as a pure-audio (baseline) stream. Reading stops at eos.
inline ParsedStream parse_generated(const std::vector<int>& ids, const VocabLayout& layout) {
  ParsedStream out;
  out.grid.levels = layout.levels;

  std::size_t end = ids.size();
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == kEos) {
      end = i;
      break;
    }

  std::size_t cot_start = end;
  bool has_cot = false;
  for (std::size_t i = 0; i < end; ++i)
    if (ids[i] == kCotBos) {
      cot_start = i + 1;
      has_cot = true;
      break;
    }

  if (!has_cot) {
    for (std::size_t i = 0; i < end; ++i)
      if (layout.is_audio(ids[i])) out.audio_tokens.push_back(layout.audio_of(ids[i]));
    return out;
  }

  std::size_t cot_end = end;
  bool closed = false;
  for (std::size_t i = cot_start; i < end; ++i) {
    if (ids[i] == kCotEos) {
      cot_end = i;
      closed = true;
      break;
    }
  }
  if (!closed) throw MalformedCot("parse: cot_bos without matching cot_eos");

  std::vector<std::pair<int, int>> flat;
  for (std::size_t i = cot_start; i < cot_end; ++i) {
    const int id = ids[i];
    if (layout.is_audio(id))
      throw SegmentViolation("parse: audio id " + std::to_string(id) + " inside the CoT region");
    if (!layout.is_cot(id))
      throw SegmentViolation("parse: id " + std::to_string(id) + " inside the CoT region");
    flat.push_back(layout.cot_of(id));
  }
  out.grid = unflatten_cot(flat, layout.levels);

  for (std::size_t i = cot_end + 1; i < end; ++i) {
    const int id = ids[i];
    if (!layout.is_audio(id))
      throw SegmentViolation("parse: id " + std::to_string(id) + " in the audio region");
    out.audio_tokens.push_back(layout.audio_of(id));
  }
  return out;
}

/// Token streams dump as one integer id per line for inspection.
inline void dump_token_ids(const std::vector<int>& ids, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write token dump: " + path);
  for (int id : ids) out << id << "\n";
}

}  // namespace descant
