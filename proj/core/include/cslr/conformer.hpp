#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cslr/params.hpp"
#include "cslr/tensor.hpp"

namespace cslr {

struct AttentionConfig {
  std::size_t model_dim = 512;
  std::size_t num_heads = 8;
  std::size_t max_relative_distance = 64;

  std::size_t head_dim() const { return model_dim / num_heads; }
  void validate() const;
};

enum class ConvNorm { kLayer, kChannel };

struct ConformerConfig {
  AttentionConfig attention;
  std::size_t conv_kernel = 31;
  std::size_t expansion = 4;
  std::size_t num_blocks = 3;
  double dropout = 0.1;
  double norm_eps = 1e-5;
  // Default normalizes over channels inside the convolution module; kChannel
  // restores per-channel statistics over time.
  ConvNorm conv_norm = ConvNorm::kLayer;

  void validate() const;
};

// Pass-through in inference; when training, dropout draws from `rng`.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  Rng* rng = nullptr;

  Tensor apply_dropout(const Tensor& x) const;
};

struct RelativeAttentionParams {
  Tensor w_q, w_k, w_v, w_out;  // [d x d]
  Tensor rel_embedding;         // [(2M+1) x d], sliced per head like K
  Tensor content_bias;          // u, [d]
  Tensor position_bias;         // v, [d]

  static RelativeAttentionParams init(const AttentionConfig& cfg, std::uint64_t seed);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct FeedForwardParams {
  Tensor norm_gain, norm_bias;
  Tensor w1, b1;  // d -> expansion*d
  Tensor w2, b2;  // expansion*d -> d

  static FeedForwardParams init(std::size_t dim, std::size_t expansion, std::uint64_t seed);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ConvModuleParams {
  Tensor norm_gain, norm_bias;
  Tensor pw1_w, pw1_b;  // d -> 2d
  Tensor dw_kernel;     // [K x d]
  Tensor post_norm_gain, post_norm_bias;
  Tensor pw2_w, pw2_b;  // d -> d

  static ConvModuleParams init(std::size_t dim, std::size_t kernel, std::uint64_t seed);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ConformerBlockParams {
  FeedForwardParams ffn1;
  RelativeAttentionParams attention;
  ConvModuleParams conv;
  FeedForwardParams ffn2;
  Tensor final_norm_gain, final_norm_bias;

  static ConformerBlockParams init(const ConformerConfig& cfg, std::uint64_t seed);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

using ConformerStack = std::vector<ConformerBlockParams>;

ConformerStack init_conformer_stack(const ConformerConfig& cfg, std::uint64_t seed);
void collect_stack(const ConformerStack& stack, const std::string& prefix, NamedTensors& out);

// Per-head scaled dot-product attention with relative-position logits added
// before the softmax; heads concatenated and output-projected. The sequence
// carries no absolute position signal.
Tensor relative_attention(const Tensor& x, const RelativeAttentionParams& params,
                          const AttentionConfig& cfg);

// Two complete attention evaluations over stream a's keys and values: one
// with queries from a, one with queries projected from b by a's query map.
// Reduces to 2 * relative_attention(x) when both streams coincide.
Tensor cross_modal_relative_attention(const Tensor& x_a, const Tensor& x_b,
                                      const RelativeAttentionParams& params_a,
                                      const AttentionConfig& cfg);

// norm -> pointwise d->2d -> GLU -> depthwise conv -> norm -> swish ->
// pointwise d->d -> dropout. Residual is the caller's.
Tensor convolution_module(const Tensor& x, const ConvModuleParams& params,
                          const ConformerConfig& cfg, const ForwardContext& ctx = {});

// norm -> d->4d -> swish -> 4d->d -> dropout. Caller applies the half-step
// residual.
Tensor feed_forward_module(const Tensor& x, const FeedForwardParams& params,
                           const ConformerConfig& cfg, const ForwardContext& ctx = {});

// Macaron block: x + 1/2 FFN1 -> attention residual -> convolution residual
// -> + 1/2 FFN2 -> final norm. When cross_stream is present the attention is
// cross-modal, with the cross stream passed through the same first FFN
// half-step so that both query sources live in the same representation.
Tensor conformer_block(const Tensor& x, const ConformerBlockParams& params,
                       const ConformerConfig& cfg,
                       const std::optional<Tensor>& cross_stream = std::nullopt,
                       const ForwardContext& ctx = {});

Tensor encode(const Tensor& x, const ConformerStack& stack, const ConformerConfig& cfg,
              const std::optional<Tensor>& cross_stream = std::nullopt,
              const ForwardContext& ctx = {});

}  // namespace cslr
