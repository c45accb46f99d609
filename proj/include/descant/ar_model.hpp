#pragma once

// Decoder-only autoregressive model over the unified vocabulary: pre-norm
// transformer blocks with learned positions, a projection that renders the
// condition embedding into the stream, teacher-forced masked-CE training with
// hand-derived gradients, and an incremental decode state for sampling.
//
// Everything runs in double precision so the finite-difference gradient check
// is meaningful; checkpoints store tensors as little-endian 32-bit floats.

#include "descant/core.hpp"
#include "descant/sequence.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace descant {

struct ArConfig {
  int width = 128;
  int depth = 4;
  int heads = 4;
  int context = 1024;
  int vocab = 0;       // from the layout
  int clap_dim = 32;   // D
  bool final_norm = true;

  int head_dim() const { return width / heads; }
  int hidden() const { return 4 * width; }

  void validate() const {
    if (width < 1 || depth < 0 || heads < 1 || context < 1)
      throw ConfigError("ar model: width/heads/context must be positive");
    if (width % heads != 0) throw ConfigError("ar model: width must be divisible by heads");
    if (vocab < kNumSpecials) throw ConfigError("ar model: vocab not set from layout");
    if (clap_dim < 1) throw ConfigError("ar model: clap_dim must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameter storage
//
// One flat double buffer; typed Eigen maps views into it in a fixed canonical
// order shared by init, Adam, serialization and the gradient check.

namespace detail {

template <bool Const>
struct ViewBuilder {
  using Ptr = std::conditional_t<Const, const double*, double*>;
  using MapMat = std::conditional_t<Const, Eigen::Map<const Mat>, Eigen::Map<Mat>>;
  using MapVec = std::conditional_t<Const, Eigen::Map<const Vec>, Eigen::Map<Vec>>;

  Ptr base;
  std::size_t off = 0;

  MapMat mat(int rows, int cols) {
    MapMat m(base + off, rows, cols);
    off += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    return m;
  }
  MapVec vec(int n) {
    MapVec v(base + off, n);
    off += static_cast<std::size_t>(n);
    return v;
  }
};

}  // namespace detail

template <bool Const>
struct LayerViewsT {
  using B = detail::ViewBuilder<Const>;
  typename B::MapVec ln1_g, ln1_b;
  typename B::MapMat wq, wk, wv, wo;
  typename B::MapVec ln2_g, ln2_b;
  typename B::MapMat w1;
  typename B::MapVec b1;
  typename B::MapMat w2;
  typename B::MapVec b2;

  LayerViewsT(B& b, int width, int hidden)
      : ln1_g(b.vec(width)),
        ln1_b(b.vec(width)),
        wq(b.mat(width, width)),
        wk(b.mat(width, width)),
        wv(b.mat(width, width)),
        wo(b.mat(width, width)),
        ln2_g(b.vec(width)),
        ln2_b(b.vec(width)),
        w1(b.mat(width, hidden)),
        b1(b.vec(hidden)),
        w2(b.mat(hidden, width)),
        b2(b.vec(width)) {}
};

template <bool Const>
struct ParamViewsT {
  using B = detail::ViewBuilder<Const>;
  B builder;
  typename B::MapMat tok_emb, pos_emb, clap_proj, head_w;
  typename B::MapVec head_b, lnf_g, lnf_b;
  std::vector<LayerViewsT<Const>> layers;

  ParamViewsT(const ArConfig& cfg, typename B::Ptr base)
      : builder{base, 0},
        tok_emb(builder.mat(cfg.vocab, cfg.width)),
        pos_emb(builder.mat(cfg.context, cfg.width)),
        clap_proj(builder.mat(cfg.clap_dim, cfg.width)),
        head_w(builder.mat(cfg.width, cfg.vocab)),
        head_b(builder.vec(cfg.vocab)),
        lnf_g(builder.vec(cfg.width)),
        lnf_b(builder.vec(cfg.width)) {
    layers.reserve(static_cast<std::size_t>(cfg.depth));
    for (int l = 0; l < cfg.depth; ++l) layers.emplace_back(builder, cfg.width, cfg.hidden());
  }
};

using ParamViews = ParamViewsT<false>;
using ConstParamViews = ParamViewsT<true>;

inline std::size_t param_count(const ArConfig& cfg) {
  const std::size_t w = static_cast<std::size_t>(cfg.width);
  const std::size_t per_layer = 2 * w + 4 * w * w + 2 * w +
                                w * static_cast<std::size_t>(cfg.hidden()) + cfg.hidden() +
                                static_cast<std::size_t>(cfg.hidden()) * w + w;
  return static_cast<std::size_t>(cfg.vocab) * w + static_cast<std::size_t>(cfg.context) * w +
         static_cast<std::size_t>(cfg.clap_dim) * w + w * static_cast<std::size_t>(cfg.vocab) +
         static_cast<std::size_t>(cfg.vocab) + 2 * w +
         static_cast<std::size_t>(cfg.depth) * per_layer;
}

/// Tensor names in canonical buffer order, for serialization.
inline std::vector<std::string> tensor_names(const ArConfig& cfg) {
  std::vector<std::string> names = {"tok_emb", "pos_emb", "clap_proj", "head_w",
                                    "head_b",  "lnf_g",   "lnf_b"};
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* n : {"ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1",
                          "b1", "w2", "b2"})
      names.push_back(p + n);
  }
  return names;
}

struct ArModel {
  ArConfig cfg;
  std::vector<double> theta;

  ParamViews views() { return ParamViews(cfg, theta.data()); }
  ConstParamViews views() const { return ConstParamViews(cfg, theta.data()); }
};

inline ArModel make_ar_model(ArConfig cfg, std::uint64_t init_seed) {
  cfg.validate();
  ArModel model;
  model.cfg = cfg;
  model.theta.assign(param_count(cfg), 0.0);
  ParamViews v = model.views();
  Rng rng(derive_seed(init_seed, "ar-init"));
  auto gauss_fill = [&](auto&& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = 0.02 * rng.next_gaussian();
  };
  gauss_fill(v.tok_emb);
  gauss_fill(v.pos_emb);
  gauss_fill(v.clap_proj);
  // head_w / head_b stay zero: an untrained model emits a uniform distribution.
  v.lnf_g.setOnes();
  for (auto& layer : v.layers) {
    layer.ln1_g.setOnes();
    layer.ln2_g.setOnes();
    gauss_fill(layer.wq);
    gauss_fill(layer.wk);
    gauss_fill(layer.wv);
    gauss_fill(layer.wo);
    gauss_fill(layer.w1);
    gauss_fill(layer.w2);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

template <class VecG, class VecB>
inline void layer_norm_fwd(const Mat& x, const VecG& g, const VecB& b, Mat& x_hat, Vec& inv,
                           Mat& out) {
  const Eigen::Index t = x.rows(), w = x.cols();
  x_hat.resize(t, w);
  inv.resize(t);
  out.resize(t, w);
  for (Eigen::Index i = 0; i < t; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double s = 1.0 / std::sqrt(var + kLnEps);
    inv[i] = s;
    x_hat.row(i) = (x.row(i).array() - mu) * s;
    out.row(i) = x_hat.row(i).cwiseProduct(g.transpose()) + b.transpose();
  }
}

// dx is written, dg/db accumulated.
template <class VecG, class GradG, class GradB>
inline void layer_norm_bwd(const Mat& x_hat, const Vec& inv, const VecG& g, const Mat& dy,
                           Mat& dx, GradG& dg, GradB& db) {
  const Eigen::Index t = x_hat.rows(), w = x_hat.cols();
  dx.resize(t, w);
  for (Eigen::Index i = 0; i < t; ++i) {
    dg += dy.row(i).cwiseProduct(x_hat.row(i)).transpose();
    db += dy.row(i).transpose();
    Eigen::RowVectorXd dyg = dy.row(i).cwiseProduct(g.transpose());
    const double m1 = dyg.mean();
    const double m2 = dyg.cwiseProduct(x_hat.row(i)).mean();
    dx.row(i) = inv[i] * (dyg.array() - m1 - x_hat.row(i).array() * m2);
  }
}

struct LayerCache {
  Mat a_hat, a;           // LN1 normalized / output
  Vec inv1;
  Mat q, k, v;            // T x W
  std::vector<Mat> probs; // per head, T x T lower-triangular
  Mat att_concat;         // heads merged, before wo
  Mat b_hat, bmat;        // LN2 normalized / output
  Vec inv2;
  Mat h_pre, h_act;       // MLP pre-activation / activation
};

struct ForwardCache {
  Mat x0;                 // embedding stream (first block input)
  std::vector<LayerCache> layers;
  Mat f_hat, f;           // final norm
  Vec invf;
  Mat logits;
};

inline void embed_sequence(const ArConfig& cfg, const ConstParamViews& p,
                           const TokenSequence& seq, Mat& x) {
  const int t = seq.size();
  if (t > cfg.context)
    throw DomainError("ar model: sequence length " + std::to_string(t) +
                      " exceeds context " + std::to_string(cfg.context));
  if (seq.clap_pos >= 0 && static_cast<int>(seq.clap.size()) != cfg.clap_dim)
    throw DomainError("ar model: clap embedding dim mismatch");
  x.resize(t, cfg.width);
  for (int i = 0; i < t; ++i) {
    if (i == seq.clap_pos) {
      Eigen::Map<const Vec> clap(seq.clap.data(), cfg.clap_dim);
      x.row(i) = clap.transpose() * p.clap_proj;
    } else {
      const int id = seq.ids[static_cast<std::size_t>(i)];
      if (id < 0 || id >= cfg.vocab)
        throw DomainError("ar model: token id " + std::to_string(id) + " out of vocab");
      x.row(i) = p.tok_emb.row(id);
    }
    x.row(i) += p.pos_emb.row(i);
  }
}

inline void forward_cached(const ArConfig& cfg, const ConstParamViews& p,
                           const TokenSequence& seq, ForwardCache& cache) {
  const int t = seq.size();
  const int dh = cfg.head_dim();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

  embed_sequence(cfg, p, seq, cache.x0);
  Mat x = cache.x0;
  cache.layers.assign(static_cast<std::size_t>(cfg.depth), LayerCache());

  for (int l = 0; l < cfg.depth; ++l) {
    LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto& lp = p.layers[static_cast<std::size_t>(l)];

    layer_norm_fwd(x, lp.ln1_g, lp.ln1_b, lc.a_hat, lc.inv1, lc.a);
    lc.q.noalias() = lc.a * lp.wq;
    lc.k.noalias() = lc.a * lp.wk;
    lc.v.noalias() = lc.a * lp.wv;

    lc.att_concat.resize(t, cfg.width);
    lc.probs.assign(static_cast<std::size_t>(cfg.heads), Mat());
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      Mat scores = alpha * (qh * kh.transpose());
      Mat& probs = lc.probs[static_cast<std::size_t>(h)];
      probs = Mat::Zero(t, t);
      for (int i = 0; i < t; ++i) {
        const auto row = scores.row(i).head(i + 1);
        const double mx = row.maxCoeff();
        Eigen::RowVectorXd e = (row.array() - mx).exp();
        probs.row(i).head(i + 1) = e / e.sum();
      }
      lc.att_concat.middleCols(h * dh, dh).noalias() = probs * vh;
    }
    x.noalias() += lc.att_concat * lp.wo;

    layer_norm_fwd(x, lp.ln2_g, lp.ln2_b, lc.b_hat, lc.inv2, lc.bmat);
    lc.h_pre.noalias() = lc.bmat * lp.w1;
    lc.h_pre.rowwise() += lp.b1.transpose();
    lc.h_act = lc.h_pre.unaryExpr([](double v) { return gelu(v); });
    x.noalias() += lc.h_act * lp.w2;
    x.rowwise() += lp.b2.transpose();
  }

  if (cfg.final_norm) {
    layer_norm_fwd(x, p.lnf_g, p.lnf_b, cache.f_hat, cache.invf, cache.f);
  } else {
    cache.f = x;
  }
  cache.logits.noalias() = cache.f * p.head_w;
  cache.logits.rowwise() += p.head_b.transpose();
}

// Masked-CE sum (unnormalized) plus dlogits for the masked targets. mask[i]
// gates whether ids/targets at position i receive loss when predicted from
// the prefix ending at i-1.
inline double ce_and_dlogits(const Mat& logits, const TokenSequence& seq,
                             const std::vector<int>& targets, Mat* dlogits, long& count) {
  const int t = seq.size();
  double loss = 0.0;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  for (int i = 1; i < t; ++i) {
    if (!seq.loss_mask[static_cast<std::size_t>(i)]) continue;
    const int target = targets[static_cast<std::size_t>(i)];
    const auto row = logits.row(i - 1);
    const double mx = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - mx).exp();
    const double z = e.sum();
    loss += -(row[target] - mx - std::log(z));
    ++count;
    if (dlogits) {
      dlogits->row(i - 1) += e / z;
      (*dlogits)(i - 1, target) -= 1.0;
    }
  }
  return loss;
}

// Full backward pass; gradients accumulate into `g`.
inline void backward_cached(const ArConfig& cfg, const ConstParamViews& p,
                            const TokenSequence& seq, const ForwardCache& cache,
                            const Mat& dlogits, ParamViews& g) {
  const int t = seq.size();
  const int dh = cfg.head_dim();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

  g.head_w.noalias() += cache.f.transpose() * dlogits;
  g.head_b += dlogits.colwise().sum().transpose();
  Mat dx;
  {
    Mat df = dlogits * p.head_w.transpose();
    if (cfg.final_norm)
      layer_norm_bwd(cache.f_hat, cache.invf, p.lnf_g, df, dx, g.lnf_g, g.lnf_b);
    else
      dx = std::move(df);
  }

  for (int l = cfg.depth - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    auto& lg = g.layers[static_cast<std::size_t>(l)];

    // MLP half: x_out = x_mid + gelu(ln2(x_mid) w1 + b1) w2 + b2
    Mat dG = dx * lp.w2.transpose();
    lg.w2.noalias() += lc.h_act.transpose() * dx;
    lg.b2 += dx.colwise().sum().transpose();
    Mat dH = dG.cwiseProduct(lc.h_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    Mat dB = dH * lp.w1.transpose();
    lg.w1.noalias() += lc.bmat.transpose() * dH;
    lg.b1 += dH.colwise().sum().transpose();
    Mat dx_ln2;
    layer_norm_bwd(lc.b_hat, lc.inv2, lp.ln2_g, dB, dx_ln2, lg.ln2_g, lg.ln2_b);
    Mat dx_mid = dx + dx_ln2;

    // Attention half: x_mid = x_in + (concat_h P_h V_h) wo
    Mat dO = dx_mid * lp.wo.transpose();
    lg.wo.noalias() += lc.att_concat.transpose() * dx_mid;
    Mat dq(t, cfg.width), dk(t, cfg.width), dv(t, cfg.width);
    for (int h = 0; h < cfg.heads; ++h) {
      const Mat& probs = lc.probs[static_cast<std::size_t>(h)];
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      auto dOh = dO.middleCols(h * dh, dh);
      Mat dP = dOh * vh.transpose();
      dv.middleCols(h * dh, dh).noalias() = probs.transpose() * dOh;
      Mat dS(t, t);
      for (int i = 0; i < t; ++i) {
        const auto pr = probs.row(i).head(i + 1);
        const auto dpr = dP.row(i).head(i + 1);
        const double dot = dpr.cwiseProduct(pr).sum();
        dS.row(i).setZero();
        dS.row(i).head(i + 1) = pr.cwiseProduct(dpr.array() - dot);
      }
      dq.middleCols(h * dh, dh).noalias() = alpha * (dS * kh);
      dk.middleCols(h * dh, dh).noalias() = alpha * (dS.transpose() * qh);
    }
    lg.wq.noalias() += lc.a.transpose() * dq;
    lg.wk.noalias() += lc.a.transpose() * dk;
    lg.wv.noalias() += lc.a.transpose() * dv;
    Mat dA = dq * lp.wq.transpose();
    dA.noalias() += dk * lp.wk.transpose();
    dA.noalias() += dv * lp.wv.transpose();
    Mat dx_ln1;
    layer_norm_bwd(lc.a_hat, lc.inv1, lp.ln1_g, dA, dx_ln1, lg.ln1_g, lg.ln1_b);
    dx = dx_mid + dx_ln1;
  }

  for (int i = 0; i < t; ++i) {
    if (i == seq.clap_pos) {
      Eigen::Map<const Vec> clap(seq.clap.data(), cfg.clap_dim);
      g.clap_proj.noalias() += clap * dx.row(i);
    } else {
      g.tok_emb.row(seq.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    }
    g.pos_emb.row(i) += dx.row(i);
  }
}

}  // namespace detail

/// All-position logits (T x vocab); row i scores the token at position i+1.
inline Mat forward_all_logits(const ArModel& model, const TokenSequence& seq) {
  detail::ForwardCache cache;
  detail::forward_cached(model.cfg, model.views(), seq, cache);
  return std::move(cache.logits);
}

/// Next-token logits for a prefix (the last row of the full forward pass).
inline Vec forward_logits(const ArModel& model, const TokenSequence& prefix) {
  if (prefix.size() < 1) throw DomainError("forward_logits: empty prefix");
  if (prefix.size() >= model.cfg.context)
    throw DomainError("forward_logits: prefix length " + std::to_string(prefix.size()) +
                      " leaves no room in context " + std::to_string(model.cfg.context));
  Mat logits = forward_all_logits(model, prefix);
  return logits.row(logits.rows() - 1).transpose();
}

/// Mean masked CE (nats per masked token) with explicit targets; `targets`
/// entries at unmasked positions never influence the result.
inline double masked_ce_with_targets(const ArModel& model, const TokenSequence& seq,
                                     const std::vector<int>& targets) {
  if (targets.size() != seq.ids.size())
    throw DomainError("masked_ce: targets length mismatch");
  detail::ForwardCache cache;
  detail::forward_cached(model.cfg, model.views(), seq, cache);
  long count = 0;
  const double sum = detail::ce_and_dlogits(cache.logits, seq, targets, nullptr, count);
  if (count == 0) return 0.0;
  return sum / static_cast<double>(count);
}

inline int default_threads() {
  const unsigned hc = std::thread::hardware_concurrency();
  return std::max(1, std::min<int>(static_cast<int>(hc == 0 ? 1 : hc), 8));
}

/// Mean masked CE over a batch; optionally writes the gradient of that mean
/// into `grad` (a param_count-sized buffer). Work is split across threads by
/// a static partition, and per-item gradients reduce in a fixed order.
inline double batch_loss(const ArModel& model, const std::vector<const TokenSequence*>& batch,
                         double* grad = nullptr, int threads = 0) {
  if (batch.empty()) throw DomainError("batch_loss: empty batch");
  const std::size_t n_params = param_count(model.cfg);
  if (threads <= 0) threads = default_threads();
  threads = std::min<int>(threads, static_cast<int>(batch.size()));

  std::vector<std::vector<double>> grad_parts;
  std::vector<double> loss_parts(static_cast<std::size_t>(threads), 0.0);
  std::vector<long> count_parts(static_cast<std::size_t>(threads), 0);
  if (grad) grad_parts.assign(static_cast<std::size_t>(threads), std::vector<double>(n_params, 0.0));

  auto worker = [&](int ti) {
    detail::ForwardCache cache;
    Mat dlogits;
    for (std::size_t i = static_cast<std::size_t>(ti); i < batch.size();
         i += static_cast<std::size_t>(threads)) {
      const TokenSequence& seq = *batch[i];
      detail::forward_cached(model.cfg, model.views(), seq, cache);
      long count = 0;
      const double sum = detail::ce_and_dlogits(cache.logits, seq, seq.ids,
                                                grad ? &dlogits : nullptr, count);
      loss_parts[static_cast<std::size_t>(ti)] += sum;
      count_parts[static_cast<std::size_t>(ti)] += count;
      if (grad) {
        ParamViews gv(model.cfg, grad_parts[static_cast<std::size_t>(ti)].data());
        detail::backward_cached(model.cfg, model.views(), seq, cache, dlogits, gv);
      }
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int ti = 0; ti < threads; ++ti) pool.emplace_back(worker, ti);
    for (auto& th : pool) th.join();
  }

  double loss_sum = 0.0;
  long count = 0;
  for (int ti = 0; ti < threads; ++ti) {
    loss_sum += loss_parts[static_cast<std::size_t>(ti)];
    count += count_parts[static_cast<std::size_t>(ti)];
  }
  if (count == 0) {
    if (grad) std::fill(grad, grad + n_params, 0.0);
    return 0.0;
  }
  if (grad) {
    std::fill(grad, grad + n_params, 0.0);
    for (int ti = 0; ti < threads; ++ti) {
      const auto& part = grad_parts[static_cast<std::size_t>(ti)];
      for (std::size_t j = 0; j < n_params; ++j) grad[j] += part[j];
    }
    const double scale = 1.0 / static_cast<double>(count);
    for (std::size_t j = 0; j < n_params; ++j) grad[j] *= scale;
  }
  return loss_sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 3e-4;
  int batch = 8;
  int steps = 2000;
  double cond_dropout = 0.1;   // probability a sequence trains with null_cond
  std::uint64_t seed = 0;
  bool cosine_decay = true;
  int threads = 0;             // 0 = hardware default
  int log_every = 50;

  void validate() const {
    if (!(cond_dropout >= 0.0 && cond_dropout < 1.0))
      throw ConfigError("train: cond_dropout out of [0,1)");
    if (lr <= 0 || batch < 1 || steps < 1) throw ConfigError("train: bad lr/batch/steps");
  }
};

struct TrainReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, mean masked CE)
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline void write_loss_csv(const TrainReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write loss curve: " + path);
  out << "step,loss\n";
  for (const auto& [step, loss] : report.loss_curve) out << step << "," << loss << "\n";
}

/// Teacher-forced masked-CE training with Adam and cosine learning-rate
/// decay. Condition dropout swaps a sequence's condition region for the
/// null_cond token before batching, which trains the unconditional branches
/// that guidance mixing needs at decode time.
inline TrainReport train(ArModel& model, const std::vector<TokenSequence>& dataset,
                         const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw DomainError("train: empty dataset");
  for (const auto& seq : dataset)
    if (seq.size() > model.cfg.context)
      throw DomainError("train: sequence of length " + std::to_string(seq.size()) +
                        " exceeds context " + std::to_string(model.cfg.context));

  const std::size_t n_params = param_count(model.cfg);
  std::vector<double> grad(n_params, 0.0), m(n_params, 0.0), v(n_params, 0.0);
  Rng rng(derive_seed(config.seed, "ar-train"));
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  TrainReport report;
  std::vector<TokenSequence> dropped;  // batch-local storage for dropout copies
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<const TokenSequence*> batch;
    batch.reserve(static_cast<std::size_t>(config.batch));
    dropped.clear();
    dropped.reserve(static_cast<std::size_t>(config.batch));
    for (int b = 0; b < config.batch; ++b) {
      const auto& seq = dataset[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(dataset.size())))];
      if (config.cond_dropout > 0.0 && rng.next_double() < config.cond_dropout) {
        dropped.push_back(drop_condition(seq));
        batch.push_back(&dropped.back());
      } else {
        batch.push_back(&seq);
      }
    }

    const double loss = batch_loss(model, batch, grad.data(), config.threads);
    if (!std::isfinite(loss))
      throw Error(ErrorCategory::Domain,
                  "train: non-finite loss at step " + std::to_string(step) +
                      " (lr=" + std::to_string(config.lr) + ")");

    const double lr_t = config.cosine_decay
                            ? config.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step - 1) /
                                                                static_cast<double>(config.steps)))
                            : config.lr;
    const double bc1 = 1.0 - std::pow(kBeta1, step);
    const double bc2 = 1.0 - std::pow(kBeta2, step);
    for (std::size_t j = 0; j < n_params; ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * grad[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * grad[j] * grad[j];
      model.theta[j] -= lr_t * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps);
    }

    if (step == 1) report.initial_loss = loss;
    if (step == 1 || step == config.steps || step % config.log_every == 0)
      report.loss_curve.emplace_back(step, loss);
    if (step == config.steps) report.final_loss = loss;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Compares the analytic gradient of the batch loss against central finite
/// differences on randomly sampled parameters; returns the worst relative
/// error. Meant for tiny double-precision models.
inline double gradient_check(const ArModel& model, const std::vector<TokenSequence>& batch,
                             int n_samples = 200, double h = 1e-5, std::uint64_t seed = 0) {
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  const std::size_t n_params = param_count(model.cfg);
  std::vector<double> grad(n_params, 0.0);
  batch_loss(model, ptrs, grad.data(), 1);

  ArModel probe = model;
  Rng rng(derive_seed(seed, "grad-check"));
  double worst = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n_params)));
    const double saved = probe.theta[j];
    probe.theta[j] = saved + h;
    const double up = batch_loss(probe, ptrs, nullptr, 1);
    probe.theta[j] = saved - h;
    const double down = batch_loss(probe, ptrs, nullptr, 1);
    probe.theta[j] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max(1e-8, std::abs(fd) + std::abs(grad[j]));
    worst = std::max(worst, std::abs(fd - grad[j]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// Append-only decode state: per-block key/value caches grow one position at
/// a time and each feed returns the next-token logits. Matches the full
/// forward pass exactly.
class DecodeState {
 public:
  explicit DecodeState(const ArModel& model) : model_(&model) {
    k_cache_.assign(static_cast<std::size_t>(model.cfg.depth), Mat(model.cfg.context, model.cfg.width));
    v_cache_.assign(static_cast<std::size_t>(model.cfg.depth), Mat(model.cfg.context, model.cfg.width));
  }

  int length() const { return t_; }

  Vec feed_token(int id) {
    const auto p = model_->views();
    if (id < 0 || id >= model_->cfg.vocab)
      throw DomainError("decode: token id " + std::to_string(id) + " out of vocab");
    Eigen::RowVectorXd x = p.tok_emb.row(id);
    return feed_embedding(x);
  }

  Vec feed_clap(const std::vector<double>& clap) {
    const auto p = model_->views();
    if (static_cast<int>(clap.size()) != model_->cfg.clap_dim)
      throw DomainError("decode: clap embedding dim mismatch");
    Eigen::Map<const Vec> c(clap.data(), model_->cfg.clap_dim);
    Eigen::RowVectorXd x = c.transpose() * p.clap_proj;
    return feed_embedding(x);
  }

 private:
  Vec feed_embedding(Eigen::RowVectorXd x) {
    const ArConfig& cfg = model_->cfg;
    const auto p = model_->views();
    if (t_ >= cfg.context) throw DomainError("decode: context overflow");
    const int dh = cfg.head_dim();
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
    x += p.pos_emb.row(t_);

    for (int l = 0; l < cfg.depth; ++l) {
      const auto& lp = p.layers[static_cast<std::size_t>(l)];
      Eigen::RowVectorXd a = norm_row(x, lp.ln1_g, lp.ln1_b);
      Mat& kc = k_cache_[static_cast<std::size_t>(l)];
      Mat& vc = v_cache_[static_cast<std::size_t>(l)];
      kc.row(t_) = a * lp.wk;
      vc.row(t_) = a * lp.wv;
      Eigen::RowVectorXd q = a * lp.wq;
      Eigen::RowVectorXd att(cfg.width);
      for (int h = 0; h < cfg.heads; ++h) {
        const auto qh = q.segment(h * dh, dh);
        const auto kh = kc.topRows(t_ + 1).middleCols(h * dh, dh);
        const auto vh = vc.topRows(t_ + 1).middleCols(h * dh, dh);
        Vec scores = alpha * (kh * qh.transpose());
        const double mx = scores.maxCoeff();
        Vec e = (scores.array() - mx).exp();
        att.segment(h * dh, dh) = (e.transpose() * vh) / e.sum();
      }
      x += att * lp.wo;
      Eigen::RowVectorXd b = norm_row(x, lp.ln2_g, lp.ln2_b);
      Eigen::RowVectorXd hpre = b * lp.w1 + lp.b1.transpose();
      Eigen::RowVectorXd hact = hpre.unaryExpr([](double u) { return detail::gelu(u); });
      x += hact * lp.w2 + lp.b2.transpose();
    }
    Eigen::RowVectorXd f = cfg.final_norm ? norm_row(x, p.lnf_g, p.lnf_b) : x;
    Vec logits = (f * p.head_w).transpose() + p.head_b;
    ++t_;
    return logits;
  }

  template <class G, class B>
  static Eigen::RowVectorXd norm_row(const Eigen::RowVectorXd& x, const G& g, const B& b) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + detail::kLnEps);
    return (((x.array() - mu) * inv).matrix().cwiseProduct(g.transpose()) + b.transpose());
  }

  const ArModel* model_;
  int t_ = 0;
  std::vector<Mat> k_cache_, v_cache_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: magic "DCKP", version, layout JSON, mode, dims, seed/step/hashes,
// then each tensor by canonical name as little-endian 32-bit floats.

struct LmCheckpoint {
  ArModel model;
  VocabLayout layout;
  std::string mode = "musicot";  // or "baseline"
  std::uint64_t seed = 0;
  int step = 0;
  std::uint64_t corpus_hash = 0;
  std::uint64_t rvq_hash = 0;
  std::uint64_t config_hash = 0;
};

inline void save_checkpoint(const LmCheckpoint& ck, const std::string& path) {
  BinWriter w(path);
  w.raw("DCKP", 4);
  w.u32(1);
  w.str(ck.layout.to_json().dump());
  w.str(ck.mode);
  const ArConfig& c = ck.model.cfg;
  w.u32(static_cast<std::uint32_t>(c.width));
  w.u32(static_cast<std::uint32_t>(c.depth));
  w.u32(static_cast<std::uint32_t>(c.heads));
  w.u32(static_cast<std::uint32_t>(c.context));
  w.u32(static_cast<std::uint32_t>(c.vocab));
  w.u32(static_cast<std::uint32_t>(c.clap_dim));
  w.u32(c.final_norm ? 1 : 0);
  w.u64(ck.seed);
  w.u32(static_cast<std::uint32_t>(ck.step));
  w.u64(ck.corpus_hash);
  w.u64(ck.rvq_hash);
  w.u64(ck.config_hash);

  const auto names = tensor_names(c);
  w.u32(static_cast<std::uint32_t>(names.size()));
  std::size_t off = 0;
  auto views = ck.model.views();
  (void)views;
  // Tensors are contiguous in canonical order; emit them by walking offsets.
  const std::vector<std::pair<std::size_t, std::size_t>> extents = [&] {
    std::vector<std::pair<std::size_t, std::size_t>> ext;
    detail::ViewBuilder<true> b{ck.model.theta.data(), 0};
    auto push = [&](std::size_t count) {
      ext.emplace_back(b.off, count);
      b.off += count;
    };
    const std::size_t wd = static_cast<std::size_t>(c.width);
    push(static_cast<std::size_t>(c.vocab) * wd);
    push(static_cast<std::size_t>(c.context) * wd);
    push(static_cast<std::size_t>(c.clap_dim) * wd);
    push(wd * static_cast<std::size_t>(c.vocab));
    push(static_cast<std::size_t>(c.vocab));
    push(wd);
    push(wd);
    for (int l = 0; l < c.depth; ++l) {
      push(wd);
      push(wd);
      for (int k = 0; k < 4; ++k) push(wd * wd);
      push(wd);
      push(wd);
      push(wd * static_cast<std::size_t>(c.hidden()));
      push(static_cast<std::size_t>(c.hidden()));
      push(static_cast<std::size_t>(c.hidden()) * wd);
      push(wd);
    }
    return ext;
  }();
  for (std::size_t i = 0; i < names.size(); ++i) {
    w.str(names[i]);
    w.u64(extents[i].second);
    w.f32_span(ck.model.theta.data() + extents[i].first, extents[i].second);
    off = extents[i].first + extents[i].second;
  }
  if (off != param_count(c)) throw IoError("checkpoint: tensor extent mismatch");
}

inline LmCheckpoint load_checkpoint(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "DCKP") throw IoError("not a checkpoint: " + path);
  if (r.u32() != 1) throw IoError("unsupported checkpoint version");
  LmCheckpoint ck;
  ck.layout = VocabLayout::from_json(nlohmann::json::parse(r.str()));
  ck.mode = r.str();
  ArConfig c;
  c.width = static_cast<int>(r.u32());
  c.depth = static_cast<int>(r.u32());
  c.heads = static_cast<int>(r.u32());
  c.context = static_cast<int>(r.u32());
  c.vocab = static_cast<int>(r.u32());
  c.clap_dim = static_cast<int>(r.u32());
  c.final_norm = r.u32() != 0;
  ck.seed = r.u64();
  ck.step = static_cast<int>(r.u32());
  ck.corpus_hash = r.u64();
  ck.rvq_hash = r.u64();
  ck.config_hash = r.u64();
  if (ck.layout.vocab_size() != c.vocab)
    throw IoError("checkpoint: layout vocab does not match model vocab");
  ck.model.cfg = c;
  ck.model.theta.assign(param_count(c), 0.0);
  const auto names = tensor_names(c);
  const std::uint32_t n = r.u32();
  if (n != names.size()) throw IoError("checkpoint: tensor count mismatch");
  std::size_t off = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    if (name != names[i]) throw IoError("checkpoint: unexpected tensor '" + name + "'");
    const std::uint64_t count = r.u64();
    if (off + count > ck.model.theta.size()) throw IoError("checkpoint: tensor overflow");
    r.f32_span(ck.model.theta.data() + off, count);
    off += count;
  }
  if (off != ck.model.theta.size()) throw IoError("checkpoint: incomplete parameter set");
  return ck;
}

}  // namespace descant
