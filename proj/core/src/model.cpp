#include "hulm/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "hulm/error.hpp"

namespace hulm {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix constant(std::size_t rows, std::size_t cols, double value) {
  return Matrix::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), value);
}

struct LayerNormOut {
  Matrix y;
  Matrix xhat;
  Eigen::VectorXd rstd;
};

LayerNormOut layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  LayerNormOut out;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  out.xhat.resize(n, d);
  out.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    out.rstd[i] = rstd;
    out.xhat.row(i) = (x.row(i).array() - mu) * rstd;
  }
  out.y = (out.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  return out;
}

// dy -> dx, accumulating gain/bias gradients when requested.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Eigen::VectorXd& rstd, const Matrix& gain,
                           Matrix* dgain, Matrix* dbias) {
  if (dgain) dgain->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (dbias) dbias->row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// y = x W^T (+ s * (x A^T) B^T). Stores x A^T in `t` when adapted.
Matrix project(const Matrix& x, const Matrix& w, const LoraPair* lora, double s, Matrix& t) {
  Matrix y = x * w.transpose();
  if (lora) {
    t = x * lora->a.transpose();
    y.noalias() += s * (t * lora->b.transpose());
  }
  return y;
}

// Backward of project(); returns dx.
Matrix project_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const LoraPair* lora, double s,
                        const Matrix& t, Matrix* dw, LoraPair* dlora) {
  if (dw) dw->noalias() += dy.transpose() * x;
  Matrix dx = dy * w;
  if (lora) {
    const Matrix dt = s * (dy * lora->b);
    if (dlora) {
      dlora->b.noalias() += s * (dy.transpose() * t);
      dlora->a.noalias() += dt.transpose() * x;
    }
    dx.noalias() += dt * lora->a;
  }
  return dx;
}

const Matrix& head_matrix(const LmParameters& p) {
  return p.config.tied_head ? p.token_embedding : p.output_head;
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
}

template <class Named>
std::uint64_t hash_named(const Named& named) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, m] : named) {
    fnv_bytes(h, name.data(), name.size());
    const std::uint64_t shape[2] = {static_cast<std::uint64_t>(m->rows()), static_cast<std::uint64_t>(m->cols())};
    fnv_bytes(h, shape, sizeof shape);
    fnv_bytes(h, m->data(), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  return h;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_positions == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_positions", c.max_positions},
          {"tied_head", c.tied_head},   {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.tied_head = j.value("tied_head", false);
    c.seed = j.value("seed", std::uint64_t{42});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::pair<std::string, const Matrix*>> LmParameters::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.emplace_back("tok_emb", &token_embedding);
  out.emplace_back("pos_emb", &position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", &L.ln1_gain);
    out.emplace_back(p + "ln1.bias", &L.ln1_bias);
    out.emplace_back(p + "attn.q", &L.wq);
    out.emplace_back(p + "attn.k", &L.wk);
    out.emplace_back(p + "attn.v", &L.wv);
    out.emplace_back(p + "attn.o", &L.wo);
    out.emplace_back(p + "ln2.gain", &L.ln2_gain);
    out.emplace_back(p + "ln2.bias", &L.ln2_bias);
    out.emplace_back(p + "ffn.w1", &L.w1);
    out.emplace_back(p + "ffn.b1", &L.b1);
    out.emplace_back(p + "ffn.w2", &L.w2);
    out.emplace_back(p + "ffn.b2", &L.b2);
  }
  out.emplace_back("lnf.gain", &lnf_gain);
  out.emplace_back("lnf.bias", &lnf_bias);
  if (!config.tied_head) out.emplace_back("head", &output_head);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> LmParameters::named_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (auto& [name, m] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Matrix*>(m));
  return out;
}

LmParameters init_parameters(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto d = config.d_model;
  LmParameters p;
  p.config = config;
  p.token_embedding = gaussian(config.vocab_size, d, kInitStd, rng);
  p.position_embedding = gaussian(config.max_positions, d, kInitStd, rng);
  p.layers.resize(config.n_layers);
  for (auto& L : p.layers) {
    L.ln1_gain = constant(1, d, 1.0);
    L.ln1_bias = constant(1, d, 0.0);
    L.wq = gaussian(d, d, kInitStd, rng);
    L.wk = gaussian(d, d, kInitStd, rng);
    L.wv = gaussian(d, d, kInitStd, rng);
    L.wo = gaussian(d, d, kInitStd, rng);
    L.ln2_gain = constant(1, d, 1.0);
    L.ln2_bias = constant(1, d, 0.0);
    L.w1 = gaussian(config.d_ff, d, kInitStd, rng);
    L.b1 = constant(1, config.d_ff, 0.0);
    L.w2 = gaussian(d, config.d_ff, kInitStd, rng);
    L.b2 = constant(1, d, 0.0);
  }
  p.lnf_gain = constant(1, d, 1.0);
  p.lnf_bias = constant(1, d, 0.0);
  if (!config.tied_head) p.output_head = gaussian(config.vocab_size, d, kInitStd, rng);
  return p;
}

LmParameters zeros_like(const LmParameters& like) {
  LmParameters z = like;
  for (auto& [name, m] : z.named_tensors()) m->setZero();
  return z;
}

LoraPair& LoraLayer::at(Projection p) {
  switch (p) {
    case Projection::q: return q;
    case Projection::k: return k;
    case Projection::v: return v;
    case Projection::o: return o;
  }
  throw std::logic_error("bad projection");
}

const LoraPair& LoraLayer::at(Projection p) const { return const_cast<LoraLayer*>(this)->at(p); }

std::vector<std::pair<std::string, const Matrix*>> LoraAdapter::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  static constexpr std::pair<Projection, const char*> kNames[] = {
      {Projection::q, "q"}, {Projection::k, "k"}, {Projection::v, "v"}, {Projection::o, "o"}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (auto [proj, tag] : kNames) {
      const std::string p = "lora.layers." + std::to_string(l) + "." + tag;
      out.emplace_back(p + ".a", &layers[l].at(proj).a);
      out.emplace_back(p + ".b", &layers[l].at(proj).b);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Matrix*>> LoraAdapter::named_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (auto& [name, m] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Matrix*>(m));
  return out;
}

LoraAdapter init_lora(const ModelConfig& config, std::size_t rank, double alpha, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  std::mt19937_64 rng(seed);
  LoraAdapter a;
  a.rank = rank;
  a.alpha = alpha;
  a.layers.resize(config.n_layers);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  for (auto& L : a.layers) {
    for (auto p : {Projection::q, Projection::k, Projection::v, Projection::o}) {
      L.at(p).a = gaussian(rank, config.d_model, stddev, rng);
      L.at(p).b = constant(config.d_model, rank, 0.0);
    }
  }
  return a;
}

LoraAdapter zeros_like(const LoraAdapter& like) {
  LoraAdapter z = like;
  for (auto& [name, m] : z.named_tensors()) m->setZero();
  return z;
}

void check_adapter_shapes(const ModelConfig& config, const LoraAdapter& adapter) {
  if (adapter.rank == 0) throw DataError("adapter rank must be positive");
  if (adapter.layers.size() != config.n_layers) throw DataError("adapter layer count does not match model");
  const auto r = static_cast<Eigen::Index>(adapter.rank);
  const auto d = static_cast<Eigen::Index>(config.d_model);
  for (const auto& L : adapter.layers) {
    for (auto p : {Projection::q, Projection::k, Projection::v, Projection::o}) {
      const auto& pair = L.at(p);
      if (pair.a.rows() != r || pair.b.cols() != r) throw DataError("adapter rank mismatch");
      if (pair.a.cols() != d || pair.b.rows() != d) throw DataError("adapter projection shape mismatch");
    }
  }
}

LmParameters lora_merge(const LmParameters& params, const LoraAdapter& adapter) {
  check_adapter_shapes(params.config, adapter);
  LmParameters merged = params;
  const double s = adapter.scaling();
  for (std::size_t l = 0; l < merged.layers.size(); ++l) {
    auto& L = merged.layers[l];
    const auto& A = adapter.layers[l];
    L.wq.noalias() += s * (A.q.b * A.q.a);
    L.wk.noalias() += s * (A.k.b * A.k.a);
    L.wv.noalias() += s * (A.v.b * A.v.a);
    L.wo.noalias() += s * (A.o.b * A.o.a);
  }
  return merged;
}

ForwardCache forward_cached(const LmParameters& params, const LoraAdapter* adapter, std::span<const TokenId> tokens,
                            bool compute_logits) {
  const auto& cfg = params.config;
  if (tokens.size() > cfg.max_positions) throw std::length_error("sequence longer than max_positions");
  if (adapter) check_adapter_shapes(cfg, *adapter);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double s = adapter ? adapter->scaling() : 0.0;

  ForwardCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId t = tokens[static_cast<std::size_t>(i)];
    if (t >= cfg.vocab_size) throw std::out_of_range("token id outside vocabulary");
    x.row(i) = params.token_embedding.row(t) + params.position_embedding.row(i);
  }

  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& W = params.layers[l];
    const LoraLayer* A = adapter ? &adapter->layers[l] : nullptr;
    auto& c = cache.layers[l];

    auto ln1 = layer_norm(x, W.ln1_gain, W.ln1_bias);
    c.a = std::move(ln1.y);
    c.ln1_xhat = std::move(ln1.xhat);
    c.ln1_rstd = std::move(ln1.rstd);
    c.q = project(c.a, W.wq, A ? &A->q : nullptr, s, c.tq);
    c.k = project(c.a, W.wk, A ? &A->k : nullptr, s, c.tk);
    c.v = project(c.a, W.wv, A ? &A->v : nullptr, s, c.tv);

    c.context.resize(n, d);
    c.probs.resize(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Matrix scores = (c.q.middleCols(col, dh) * c.k.middleCols(col, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mx = scores.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(scores(i, j) - mx);
          scores(i, j) = e;
          z += e;
        }
        scores.row(i).head(i + 1) /= z;
        if (i + 1 < n) scores.row(i).tail(n - i - 1).setZero();
      }
      c.context.middleCols(col, dh).noalias() = scores * c.v.middleCols(col, dh);
      c.probs[h] = std::move(scores);
    }
    x += project(c.context, W.wo, A ? &A->o : nullptr, s, c.to);

    auto ln2 = layer_norm(x, W.ln2_gain, W.ln2_bias);
    c.b = std::move(ln2.y);
    c.ln2_xhat = std::move(ln2.xhat);
    c.ln2_rstd = std::move(ln2.rstd);
    c.u = (c.b * W.w1.transpose()).rowwise() + W.b1.row(0);
    c.g = c.u.unaryExpr([](double v) { return gelu(v); });
    x += (c.g * W.w2.transpose()).rowwise() + W.b2.row(0);
  }

  auto lnf = layer_norm(x, params.lnf_gain, params.lnf_bias);
  cache.hidden = std::move(lnf.y);
  cache.lnf_xhat = std::move(lnf.xhat);
  cache.lnf_rstd = std::move(lnf.rstd);
  if (compute_logits) cache.logits = cache.hidden * head_matrix(params).transpose();
  return cache;
}

ForwardResult forward(const LmParameters& params, const LoraAdapter* adapter, std::span<const TokenId> tokens,
                      bool compute_logits) {
  auto cache = forward_cached(params, adapter, tokens, compute_logits);
  return ForwardResult{std::move(cache.logits), std::move(cache.hidden)};
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

namespace {

bool counted(std::span<const TokenId> tokens, std::span<const std::uint8_t> mask, std::size_t i) {
  return i + 1 < tokens.size() && i < mask.size() && mask[i] && tokens[i + 1] != kPad;
}

double log_sum_exp(const Eigen::Ref<const RowVector>& row) {
  const double mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace

NllSum nll_sum(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  if (static_cast<std::size_t>(logits.rows()) != tokens.size()) throw std::invalid_argument("logits/tokens length mismatch");
  NllSum out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!counted(tokens, loss_mask, i)) continue;
    const auto row = static_cast<Eigen::Index>(i);
    out.sum += log_sum_exp(logits.row(row)) - logits(row, tokens[i + 1]);
    out.count += 1;
  }
  return out;
}

double nll_loss(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  const auto s = nll_sum(logits, tokens, loss_mask);
  if (s.count == 0) throw DataError("empty loss support");
  return s.mean();
}

void Gradients::scale(double factor) {
  if (base) for (auto& [n, m] : base->named_tensors()) *m *= factor;
  if (adapter) for (auto& [n, m] : adapter->named_tensors()) *m *= factor;
}

void Gradients::add(const Gradients& other) {
  if (base && other.base) {
    auto dst = base->named_tensors();
    auto src = other.base->named_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second += *src[i].second;
  }
  if (adapter && other.adapter) {
    auto dst = adapter->named_tensors();
    auto src = other.adapter->named_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second += *src[i].second;
  }
}

Gradients zero_gradients(const LmParameters& params, const LoraAdapter* adapter, Trainable trainable) {
  Gradients g;
  if (trainable == Trainable::full) g.base = zeros_like(params);
  if (adapter && trainable != Trainable::head_only) g.adapter = zeros_like(*adapter);
  return g;
}

void backward_from(const LmParameters& params, const LoraAdapter* adapter, const ForwardCache& cache,
                   const Matrix* dlogits, const Matrix* dhidden, Gradients& grads) {
  const auto& cfg = params.config;
  const auto n = static_cast<Eigen::Index>(cache.tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double s = adapter ? adapter->scaling() : 0.0;
  LmParameters* G = grads.base ? &*grads.base : nullptr;
  LoraAdapter* GA = (adapter && grads.adapter) ? &*grads.adapter : nullptr;
  if (!G && !GA) return;

  Matrix dh_final = Matrix::Zero(n, d);
  if (dhidden) dh_final += *dhidden;
  if (dlogits) {
    const Matrix& head = head_matrix(params);
    dh_final.noalias() += *dlogits * head;
    if (G) {
      Matrix& dhead = cfg.tied_head ? G->token_embedding : G->output_head;
      dhead.noalias() += dlogits->transpose() * cache.hidden;
    }
  }
  Matrix dx = layer_norm_backward(dh_final, cache.lnf_xhat, cache.lnf_rstd, params.lnf_gain,
                                  G ? &G->lnf_gain : nullptr, G ? &G->lnf_bias : nullptr);

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& W = params.layers[l];
    const auto& c = cache.layers[l];
    const LoraLayer* A = adapter ? &adapter->layers[l] : nullptr;
    LayerParams* GL = G ? &G->layers[l] : nullptr;
    LoraLayer* GAL = GA ? &GA->layers[l] : nullptr;

    // Feed-forward sublayer.
    if (GL) {
      GL->w2.noalias() += dx.transpose() * c.g;
      GL->b2.row(0) += dx.colwise().sum();
    }
    Matrix du = (dx * W.w2).array() * c.u.unaryExpr([](double v) { return gelu_grad(v); }).array();
    if (GL) {
      GL->w1.noalias() += du.transpose() * c.b;
      GL->b1.row(0) += du.colwise().sum();
    }
    Matrix db = du * W.w1;
    dx += layer_norm_backward(db, c.ln2_xhat, c.ln2_rstd, W.ln2_gain, GL ? &GL->ln2_gain : nullptr,
                              GL ? &GL->ln2_bias : nullptr);

    // Attention sublayer.
    Matrix dcontext = project_backward(dx, c.context, W.wo, A ? &A->o : nullptr, s, c.to, GL ? &GL->wo : nullptr,
                                       GAL ? &GAL->o : nullptr);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Matrix& P = c.probs[h];
      const auto dctx = dcontext.middleCols(col, dh);
      Matrix dP = dctx * c.v.middleCols(col, dh).transpose();
      dv.middleCols(col, dh).noalias() = P.transpose() * dctx;
      const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
      Matrix dS = P.array() * (dP.colwise() - rowdot).array();
      dq.middleCols(col, dh).noalias() = scale * (dS * c.k.middleCols(col, dh));
      dk.middleCols(col, dh).noalias() = scale * (dS.transpose() * c.q.middleCols(col, dh));
    }
    Matrix da = project_backward(dq, c.a, W.wq, A ? &A->q : nullptr, s, c.tq, GL ? &GL->wq : nullptr,
                                 GAL ? &GAL->q : nullptr);
    da += project_backward(dk, c.a, W.wk, A ? &A->k : nullptr, s, c.tk, GL ? &GL->wk : nullptr,
                           GAL ? &GAL->k : nullptr);
    da += project_backward(dv, c.a, W.wv, A ? &A->v : nullptr, s, c.tv, GL ? &GL->wv : nullptr,
                           GAL ? &GAL->v : nullptr);
    dx += layer_norm_backward(da, c.ln1_xhat, c.ln1_rstd, W.ln1_gain, GL ? &GL->ln1_gain : nullptr,
                              GL ? &GL->ln1_bias : nullptr);
  }

  if (G) {
    for (Eigen::Index i = 0; i < n; ++i) {
      G->token_embedding.row(cache.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
      G->position_embedding.row(i) += dx.row(i);
    }
  }
}

NllSum accumulate_nll_gradients(const LmParameters& params, const LoraAdapter* adapter,
                                std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask,
                                double scale, Gradients& grads) {
  const auto cache = forward_cached(params, adapter, tokens, true);
  NllSum out;
  Matrix dlogits = Matrix::Zero(cache.logits.rows(), cache.logits.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!counted(tokens, loss_mask, i)) continue;
    const auto row = static_cast<Eigen::Index>(i);
    const double lse = log_sum_exp(cache.logits.row(row));
    out.sum += lse - cache.logits(row, tokens[i + 1]);
    out.count += 1;
    dlogits.row(row) = (cache.logits.row(row).array() - lse).exp() * scale;
    dlogits(row, tokens[i + 1]) -= scale;
  }
  if (out.count > 0) backward_from(params, adapter, cache, &dlogits, nullptr, grads);
  return out;
}

Gradients backward(const LmParameters& params, const LoraAdapter* adapter, std::span<const TokenId> tokens,
                   std::span<const std::uint8_t> loss_mask, Trainable trainable) {
  Gradients grads = zero_gradients(params, adapter, trainable);
  const auto s = accumulate_nll_gradients(params, adapter, tokens, loss_mask, 1.0, grads);
  if (s.count == 0) throw DataError("empty loss support");
  grads.scale(1.0 / static_cast<double>(s.count));
  return grads;
}

RowVector pool(const HiddenStates& hidden, std::span<const std::size_t> positions, PoolingMode mode) {
  if (positions.empty()) throw DataError("pooling over an empty position set");
  for (auto p : positions) {
    if (p >= static_cast<std::size_t>(hidden.rows())) throw std::out_of_range("pool position outside hidden states");
  }
  if (mode == PoolingMode::last) {
    if (positions.size() != 1) throw DataError("last pooling needs a single position");
    return hidden.row(static_cast<Eigen::Index>(positions.front()));
  }
  RowVector acc = RowVector::Zero(hidden.cols());
  for (auto p : positions) acc += hidden.row(static_cast<Eigen::Index>(p));
  return acc / static_cast<double>(positions.size());
}

std::uint64_t parameter_hash(const LmParameters& params) { return hash_named(params.named_tensors()); }
std::uint64_t parameter_hash(const LoraAdapter& adapter) { return hash_named(adapter.named_tensors()); }

std::size_t parameter_count(const LmParameters& params) {
  std::size_t n = 0;
  for (const auto& [name, m] : params.named_tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

std::size_t parameter_count(const LoraAdapter& adapter) {
  std::size_t n = 0;
  for (const auto& [name, m] : adapter.named_tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

}  // namespace hulm
