#pragma once

// Residual vector quantizer over the embedding space. Level k is fit to the
// residuals left by levels 1..k-1 (k-means++ init, EMA centroid refinement,
// dead-code reseeding), so decoding the codes coarse-to-fine reconstructs an
// embedding as the cumulative sum of one codeword per level.

#include "descant/core.hpp"
#include "descant/embedding.hpp"

#include <json.hpp>

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

namespace descant {

/// The "musical thoughts" of one song: an M x L grid of codebook indices,
/// frame-major (rows are windows, columns are levels coarse to fine).
struct CotGrid {
  int levels = 0;
  std::vector<std::vector<int>> codes;  // M rows of exactly `levels` entries

  int frames() const { return static_cast<int>(codes.size()); }
};

inline CotGrid make_cot_grid(int levels, std::vector<std::vector<int>> codes) {
  for (const auto& row : codes)
    if (static_cast<int>(row.size()) != levels)
      throw DomainError("cot grid: ragged row (expected " + std::to_string(levels) +
                        " levels, got " + std::to_string(row.size()) + ")");
  return CotGrid{levels, std::move(codes)};
}

struct RvqTrainConfig {
  int epochs = 50;
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
};

struct RvqModel {
  int dim = 0;
  int levels = 0;
  int codebook_size = 0;
  std::vector<Mat> codebooks;     // levels entries, each Q x dim
  bool trained = false;
  std::uint64_t seed = 0;
  std::uint64_t corpus_hash = 0;  // hash of the training corpus artifact, 0 if ad hoc
  std::vector<double> level_mse;  // training-set mean squared error after each level
};

namespace detail {

// Argmin over codebook rows by squared distance; ties break to the lowest
// index. The accumulation matches the exhaustive oracle formulation exactly.
inline int nearest_code(const Mat& codebook, const Eigen::Ref<const Vec>& x) {
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int q = 0; q < codebook.rows(); ++q) {
    const double d = (codebook.row(q).transpose() - x).squaredNorm();
    if (d < best_dist) {
      best_dist = d;
      best = q;
    }
  }
  return best;
}

inline Mat kmeans_pp_init(const Mat& data, int k, Rng& rng) {
  const int n = static_cast<int>(data.rows());
  Mat centers(k, data.cols());
  centers.row(0) = data.row(rng.uniform_int(n));
  Vec min_dist(n);
  for (int i = 0; i < n; ++i)
    min_dist[i] = (data.row(i) - centers.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = min_dist.sum();
    int chosen;
    if (total <= 0.0) {
      chosen = rng.uniform_int(n);  // all points coincide with a center
    } else {
      double u = rng.next_double() * total;
      chosen = n - 1;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += min_dist[i];
        if (u < acc) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = data.row(chosen);
    for (int i = 0; i < n; ++i)
      min_dist[i] = std::min(min_dist[i], (data.row(i) - centers.row(c)).squaredNorm());
  }
  return centers;
}

// One codebook fit to `data` with EMA updates. Codes unused for a full epoch
// are reseeded to the residual with the highest quantization error.
inline Mat fit_codebook(const Mat& data, int k, const RvqTrainConfig& cfg, Rng& rng) {
  const int n = static_cast<int>(data.rows());
  Mat codebook = kmeans_pp_init(data, k, rng);
  Vec ema_count = Vec::Ones(k);
  Mat ema_sum = codebook;
  std::vector<int> assignment(static_cast<std::size_t>(n));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Vec counts = Vec::Zero(k);
    Mat sums = Mat::Zero(k, data.cols());
    Vec errs(n);
    for (int i = 0; i < n; ++i) {
      const int q = nearest_code(codebook, data.row(i).transpose());
      assignment[static_cast<std::size_t>(i)] = q;
      counts[q] += 1.0;
      sums.row(q) += data.row(i);
      errs[i] = (data.row(i) - codebook.row(q)).squaredNorm();
    }
    const double g = cfg.ema_decay;
    ema_count = g * ema_count + (1.0 - g) * counts;
    ema_sum = g * ema_sum + (1.0 - g) * sums;
    for (int q = 0; q < k; ++q) {
      if (counts[q] == 0.0) {
        int worst;
        errs.maxCoeff(&worst);
        codebook.row(q) = data.row(worst);
        ema_count[q] = 1.0;
        ema_sum.row(q) = data.row(worst);
        errs[worst] = 0.0;  // avoid reseeding two dead codes to the same point
      } else {
        codebook.row(q) = ema_sum.row(q) / ema_count[q];
      }
    }
  }
  // Duplicate rows would make the argmin degenerate; nudge any onto distinct
  // high-error points.
  for (int q = 0; q < k; ++q) {
    for (int r = 0; r < q; ++r) {
      if ((codebook.row(q) - codebook.row(r)).squaredNorm() == 0.0) {
        Vec errs(n);
        for (int i = 0; i < n; ++i)
          errs[i] = (data.row(i) - codebook.row(nearest_code(codebook, data.row(i).transpose()))).squaredNorm();
        int worst;
        errs.maxCoeff(&worst);
        codebook.row(q) = data.row(worst);
      }
    }
  }
  return codebook;
}

}  // namespace detail

inline RvqModel train_rvq(const std::vector<Embedding>& embeddings, int levels,
                          int codebook_size, const RvqTrainConfig& config = {}) {
  if (levels < 1) throw ConfigError("train_rvq: levels must be >= 1");
  if (codebook_size < 1) throw ConfigError("train_rvq: codebook_size must be >= 1");
  if (static_cast<int>(embeddings.size()) < codebook_size)
    throw DomainError("train_rvq: need at least " + std::to_string(codebook_size) +
                      " embeddings, got " + std::to_string(embeddings.size()));
  const int dim = embedding_dim(embeddings.front());
  Mat residuals(static_cast<Eigen::Index>(embeddings.size()), dim);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embedding_dim(embeddings[i]) != dim)
      throw DomainError("train_rvq: inconsistent embedding dimensions");
    for (int d = 0; d < dim; ++d) {
      const double v = embeddings[i].values[static_cast<std::size_t>(d)];
      if (!std::isfinite(v)) throw DomainError("train_rvq: non-finite input");
      residuals(static_cast<Eigen::Index>(i), d) = v;
    }
  }

  RvqModel model;
  model.dim = dim;
  model.levels = levels;
  model.codebook_size = codebook_size;
  model.seed = config.seed;
  Rng rng(derive_seed(config.seed, "rvq-train"));
  for (int level = 0; level < levels; ++level) {
    Mat codebook = detail::fit_codebook(residuals, codebook_size, config, rng);
    for (Eigen::Index i = 0; i < residuals.rows(); ++i) {
      const int q = detail::nearest_code(codebook, residuals.row(i).transpose());
      residuals.row(i) -= codebook.row(q);
    }
    model.level_mse.push_back(residuals.rowwise().squaredNorm().mean());
    model.codebooks.push_back(std::move(codebook));
  }
  model.trained = true;
  return model;
}

/// Greedy residual encoding: codes[k] = argmin_q |r_(k-1) - codeword_k(q)|^2
/// with r_0 = e and r_k = r_(k-1) - codeword_k(codes[k]).
inline std::vector<int> quantize(const RvqModel& model, const Embedding& e) {
  if (!model.trained) throw DomainError("quantize: model is not trained");
  if (embedding_dim(e) != model.dim)
    throw DomainError("quantize: embedding dimension " + std::to_string(embedding_dim(e)) +
                      " does not match model dim " + std::to_string(model.dim));
  Vec residual = as_vec(e);
  std::vector<int> codes(static_cast<std::size_t>(model.levels));
  for (int k = 0; k < model.levels; ++k) {
    const int q = detail::nearest_code(model.codebooks[static_cast<std::size_t>(k)], residual);
    codes[static_cast<std::size_t>(k)] = q;
    residual -= model.codebooks[static_cast<std::size_t>(k)].row(q).transpose();
  }
  return codes;
}

/// Cumulative sum of the selected codewords across all levels.
inline Embedding dequantize(const RvqModel& model, const std::vector<int>& codes) {
  if (!model.trained) throw DomainError("dequantize: model is not trained");
  if (static_cast<int>(codes.size()) != model.levels)
    throw DomainError("dequantize: expected " + std::to_string(model.levels) + " codes");
  Vec sum = Vec::Zero(model.dim);
  for (int k = 0; k < model.levels; ++k) {
    const int q = codes[static_cast<std::size_t>(k)];
    if (q < 0 || q >= model.codebook_size)
      throw DomainError("dequantize: code " + std::to_string(q) + " out of range at level " +
                        std::to_string(k + 1));
    sum += model.codebooks[static_cast<std::size_t>(k)].row(q).transpose();
  }
  return make_embedding(sum);
}

inline Embedding dequantize_frame(const RvqModel& model, const CotGrid& grid, int frame) {
  if (frame < 0 || frame >= grid.frames()) throw DomainError("dequantize_frame: frame out of range");
  return dequantize(model, grid.codes[static_cast<std::size_t>(frame)]);
}

/// Frame-wise quantization, order preserved. An empty input yields an empty
/// grid (instrumental-reference edge case).
inline CotGrid quantize_sequence(const RvqModel& model, const std::vector<Embedding>& embeddings) {
  CotGrid grid;
  grid.levels = model.levels;
  grid.codes.reserve(embeddings.size());
  for (const auto& e : embeddings) grid.codes.push_back(quantize(model, e));
  return grid;
}

// ---------------------------------------------------------------------------
// Persistence: binary container + human-readable sidecar.
//
// Layout: magic "DRVQ", version, dim, levels, codebook_size (u32 each), seed,
// corpus_hash (u64 each), then per level a Q x dim row-major table of
// little-endian 32-bit floats.

inline void save_rvq(const RvqModel& model, const std::string& path) {
  if (!model.trained) throw DomainError("save_rvq: model is not trained");
  BinWriter w(path);
  w.raw("DRVQ", 4);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(model.dim));
  w.u32(static_cast<std::uint32_t>(model.levels));
  w.u32(static_cast<std::uint32_t>(model.codebook_size));
  w.u64(model.seed);
  w.u64(model.corpus_hash);
  for (const auto& cb : model.codebooks)
    for (Eigen::Index r = 0; r < cb.rows(); ++r)
      for (Eigen::Index c = 0; c < cb.cols(); ++c) w.f32(static_cast<float>(cb(r, c)));

  nlohmann::json meta;
  meta["kind"] = "rvq-codebooks";
  meta["dim"] = model.dim;
  meta["levels"] = model.levels;
  meta["codebook_size"] = model.codebook_size;
  meta["seed"] = model.seed;
  meta["corpus_hash"] = model.corpus_hash;
  meta["train_mse_per_level"] = model.level_mse;
  std::ofstream side(path + ".json");
  if (!side) throw IoError("cannot write sidecar: " + path + ".json");
  side << meta.dump(2) << "\n";
}

inline RvqModel load_rvq(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "DRVQ") throw IoError("not an rvq container: " + path);
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported rvq container version");
  RvqModel model;
  model.dim = static_cast<int>(r.u32());
  model.levels = static_cast<int>(r.u32());
  model.codebook_size = static_cast<int>(r.u32());
  model.seed = r.u64();
  model.corpus_hash = r.u64();
  for (int k = 0; k < model.levels; ++k) {
    Mat cb(model.codebook_size, model.dim);
    for (Eigen::Index row = 0; row < cb.rows(); ++row)
      for (Eigen::Index col = 0; col < cb.cols(); ++col) cb(row, col) = static_cast<double>(r.f32());
    model.codebooks.push_back(std::move(cb));
  }
  model.trained = true;
  std::ifstream side(path + ".json");
  if (side) {
    nlohmann::json meta = nlohmann::json::parse(side, nullptr, false);
    if (!meta.is_discarded() && meta.contains("train_mse_per_level"))
      model.level_mse = meta["train_mse_per_level"].get<std::vector<double>>();
  }
  return model;
}

}  // namespace descant
