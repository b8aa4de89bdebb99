#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "hulm/tokenizer.hpp"

namespace hulm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

struct ModelConfig {
  std::size_t vocab_size = kVocabSize;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_positions = 8192;
  bool tied_head = false;
  std::uint64_t seed = 42;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  // Throws ConfigError on inconsistent dimensions.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Dense weights of one pre-norm decoder block. Projection matrices are stored
// as (d_out x d_in) and applied to row-vector activations as x * W^T.
struct LayerParams {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1;
  Matrix w2, b2;
};

struct LmParameters {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_positions x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;
  Matrix output_head;  // vocab x d; empty when tied to token_embedding

  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;
};

// Gaussian(0, 0.02) dense weights, unit gains, zero biases.
LmParameters init_parameters(const ModelConfig& config);
// Same shapes as `like`, every entry zero.
LmParameters zeros_like(const LmParameters& like);

enum class Projection { q, k, v, o };

struct LoraPair {
  Matrix a;  // rank x d_in
  Matrix b;  // d_out x rank
};

struct LoraLayer {
  LoraPair q, k, v, o;

  LoraPair& at(Projection p);
  const LoraPair& at(Projection p) const;
};

struct LoraAdapter {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<LoraLayer> layers;

  double scaling() const noexcept { return alpha / static_cast<double>(rank); }
  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;
};

// A ~ Gaussian(0, variance 1/rank), B = 0 on Q, K, V, O of every layer.
LoraAdapter init_lora(const ModelConfig& config, std::size_t rank = 8, double alpha = 16.0,
                      std::uint64_t seed = 7);
LoraAdapter zeros_like(const LoraAdapter& like);

// W + (alpha/r) * B * A for every adapted projection. Calling it twice applies
// the delta twice. Throws DataError when the adapter does not match.
LmParameters lora_merge(const LmParameters& params, const LoraAdapter& adapter);
void check_adapter_shapes(const ModelConfig& config, const LoraAdapter& adapter);

// Final-LayerNorm output, one row per position.
using HiddenStates = Matrix;

struct ForwardResult {
  Matrix logits;  // positions x vocab (empty when not requested)
  HiddenStates hidden;
};

// Everything the backward pass needs from one forward evaluation.
struct LayerCache {
  Matrix ln1_xhat;
  Eigen::VectorXd ln1_rstd;
  Matrix a;  // LN1 output
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, positions x positions
  Matrix context;             // concatenated head outputs
  Matrix tq, tk, tv, to;      // LoRA intermediates x * A^T
  Matrix ln2_xhat;
  Eigen::VectorXd ln2_rstd;
  Matrix b;  // LN2 output
  Matrix u;  // pre-activation of the feed-forward layer
  Matrix g;  // GELU(u)
};

struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<LayerCache> layers;
  Matrix lnf_xhat;
  Eigen::VectorXd lnf_rstd;
  HiddenStates hidden;
  Matrix logits;
};

// Throws std::out_of_range for a token id >= vocab_size and
// std::length_error for sequences longer than max_positions.
ForwardResult forward(const LmParameters& params, const LoraAdapter* adapter, std::span<const TokenId> tokens,
                      bool compute_logits = true);
ForwardCache forward_cached(const LmParameters& params, const LoraAdapter* adapter,
                            std::span<const TokenId> tokens, bool compute_logits = true);

Matrix softmax_rows(const Matrix& logits);

struct NllSum {
  double sum = 0.0;
  std::size_t count = 0;

  double mean() const noexcept { return count ? sum / static_cast<double>(count) : 0.0; }
};

// Position i predicts tokens[i + 1]; counted where loss_mask[i] is set and the
// target is not PAD.
NllSum nll_sum(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask);
// Mean NLL; throws DataError("empty loss support") when nothing is counted.
double nll_loss(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask);

enum class Trainable { adapter_only, full, head_only };

// Gradient buffers for the trainable tensors; frozen tensors have none.
struct Gradients {
  std::optional<LmParameters> base;
  std::optional<LoraAdapter> adapter;

  void scale(double factor);
  void add(const Gradients& other);
};

Gradients zero_gradients(const LmParameters& params, const LoraAdapter* adapter, Trainable trainable);

// Back-propagates upstream gradients w.r.t. logits and/or hidden states
// through the cached forward pass, accumulating into `grads`.
void backward_from(const LmParameters& params, const LoraAdapter* adapter, const ForwardCache& cache,
                   const Matrix* dlogits, const Matrix* dhidden, Gradients& grads);

// Forward + backward of the summed next-token NLL; gradients scaled by
// `scale` are added into `grads`.
NllSum accumulate_nll_gradients(const LmParameters& params, const LoraAdapter* adapter,
                                std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask,
                                double scale, Gradients& grads);

// Exact gradients of the mean next-token NLL of one sequence.
Gradients backward(const LmParameters& params, const LoraAdapter* adapter, std::span<const TokenId> tokens,
                   std::span<const std::uint8_t> loss_mask, Trainable trainable);

enum class PoolingMode { last, mean };

// Throws DataError on empty positions, std::out_of_range on bad rows.
RowVector pool(const HiddenStates& hidden, std::span<const std::size_t> positions, PoolingMode mode);

// FNV-1a over the raw bytes of every tensor, in name order.
std::uint64_t parameter_hash(const LmParameters& params);
std::uint64_t parameter_hash(const LoraAdapter& adapter);

std::size_t parameter_count(const LmParameters& params);
std::size_t parameter_count(const LoraAdapter& adapter);

}  // namespace hulm
