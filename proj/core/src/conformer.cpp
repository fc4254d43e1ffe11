#include "cslr/conformer.hpp"

#include <cmath>

#include "cslr/error.hpp"

namespace cslr {

void AttentionConfig::validate() const {
  if (model_dim == 0 || num_heads == 0) throw ConfigError("attention: model_dim and num_heads must be positive");
  if (model_dim % num_heads != 0)
    throw ConfigError("attention: model_dim " + std::to_string(model_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  if (max_relative_distance == 0) throw ConfigError("attention: max_relative_distance must be positive");
}

void ConformerConfig::validate() const {
  attention.validate();
  if (conv_kernel % 2 == 0) throw ConfigError("conformer: conv kernel must be odd");
  if (expansion == 0) throw ConfigError("conformer: expansion factor must be positive");
  if (num_blocks == 0) throw ConfigError("conformer: at least one block required");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("conformer: dropout must be in [0, 1)");
  if (!(norm_eps > 0.0)) throw ConfigError("conformer: norm eps must be positive");
}

Tensor ForwardContext::apply_dropout(const Tensor& x) const {
  if (!training || dropout_rate == 0.0) return x;
  if (!rng) throw ContractError("forward context: training dropout requires an rng");
  return dropout(x, dropout_rate, *rng);
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor init_zeros(Shape shape) {
  return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor init_ones(Shape shape) {
  return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 1.0));
}

RelativeAttentionParams RelativeAttentionParams::init(const AttentionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  const std::size_t table = 2 * cfg.max_relative_distance + 1;
  RelativeAttentionParams p;
  p.w_q = init_uniform({d, d}, d, derive_seed(seed, "w_q"));
  p.w_k = init_uniform({d, d}, d, derive_seed(seed, "w_k"));
  p.w_v = init_uniform({d, d}, d, derive_seed(seed, "w_v"));
  p.w_out = init_uniform({d, d}, d, derive_seed(seed, "w_out"));
  p.rel_embedding = init_uniform({table, d}, d, derive_seed(seed, "rel"));
  p.content_bias = init_uniform({d}, d, derive_seed(seed, "u"));
  p.position_bias = init_uniform({d}, d, derive_seed(seed, "v"));
  return p;
}

void RelativeAttentionParams::collect(const std::string& prefix, NamedTensors& out) const {
  collect_into(out, prefix + ".w_q", w_q);
  collect_into(out, prefix + ".w_k", w_k);
  collect_into(out, prefix + ".w_v", w_v);
  collect_into(out, prefix + ".w_out", w_out);
  collect_into(out, prefix + ".rel", rel_embedding);
  collect_into(out, prefix + ".u", content_bias);
  collect_into(out, prefix + ".v", position_bias);
}

FeedForwardParams FeedForwardParams::init(std::size_t dim, std::size_t expansion, std::uint64_t seed) {
  FeedForwardParams p;
  p.norm_gain = init_ones({dim});
  p.norm_bias = init_zeros({dim});
  p.w1 = init_uniform({dim, dim * expansion}, dim, derive_seed(seed, "w1"));
  p.b1 = init_zeros({dim * expansion});
  p.w2 = init_uniform({dim * expansion, dim}, dim * expansion, derive_seed(seed, "w2"));
  p.b2 = init_zeros({dim});
  return p;
}

void FeedForwardParams::collect(const std::string& prefix, NamedTensors& out) const {
  collect_into(out, prefix + ".norm_gain", norm_gain);
  collect_into(out, prefix + ".norm_bias", norm_bias);
  collect_into(out, prefix + ".w1", w1);
  collect_into(out, prefix + ".b1", b1);
  collect_into(out, prefix + ".w2", w2);
  collect_into(out, prefix + ".b2", b2);
}

ConvModuleParams ConvModuleParams::init(std::size_t dim, std::size_t kernel, std::uint64_t seed) {
  ConvModuleParams p;
  p.norm_gain = init_ones({dim});
  p.norm_bias = init_zeros({dim});
  p.pw1_w = init_uniform({dim, 2 * dim}, dim, derive_seed(seed, "pw1"));
  p.pw1_b = init_zeros({2 * dim});
  p.dw_kernel = init_uniform({kernel, dim}, kernel, derive_seed(seed, "dw"));
  p.post_norm_gain = init_ones({dim});
  p.post_norm_bias = init_zeros({dim});
  p.pw2_w = init_uniform({dim, dim}, dim, derive_seed(seed, "pw2"));
  p.pw2_b = init_zeros({dim});
  return p;
}

void ConvModuleParams::collect(const std::string& prefix, NamedTensors& out) const {
  collect_into(out, prefix + ".norm_gain", norm_gain);
  collect_into(out, prefix + ".norm_bias", norm_bias);
  collect_into(out, prefix + ".pw1_w", pw1_w);
  collect_into(out, prefix + ".pw1_b", pw1_b);
  collect_into(out, prefix + ".dw_kernel", dw_kernel);
  collect_into(out, prefix + ".post_norm_gain", post_norm_gain);
  collect_into(out, prefix + ".post_norm_bias", post_norm_bias);
  collect_into(out, prefix + ".pw2_w", pw2_w);
  collect_into(out, prefix + ".pw2_b", pw2_b);
}

ConformerBlockParams ConformerBlockParams::init(const ConformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.attention.model_dim;
  ConformerBlockParams p;
  p.ffn1 = FeedForwardParams::init(d, cfg.expansion, derive_seed(seed, "ffn1"));
  p.attention = RelativeAttentionParams::init(cfg.attention, derive_seed(seed, "attn"));
  p.conv = ConvModuleParams::init(d, cfg.conv_kernel, derive_seed(seed, "conv"));
  p.ffn2 = FeedForwardParams::init(d, cfg.expansion, derive_seed(seed, "ffn2"));
  p.final_norm_gain = init_ones({d});
  p.final_norm_bias = init_zeros({d});
  return p;
}

void ConformerBlockParams::collect(const std::string& prefix, NamedTensors& out) const {
  ffn1.collect(prefix + ".ffn1", out);
  attention.collect(prefix + ".attn", out);
  conv.collect(prefix + ".conv", out);
  ffn2.collect(prefix + ".ffn2", out);
  collect_into(out, prefix + ".final_norm_gain", final_norm_gain);
  collect_into(out, prefix + ".final_norm_bias", final_norm_bias);
}

ConformerStack init_conformer_stack(const ConformerConfig& cfg, std::uint64_t seed) {
  ConformerStack stack;
  stack.reserve(cfg.num_blocks);
  for (std::size_t i = 0; i < cfg.num_blocks; ++i)
    stack.push_back(ConformerBlockParams::init(cfg, derive_seed(seed, "block", i)));
  return stack;
}

void collect_stack(const ConformerStack& stack, const std::string& prefix, NamedTensors& out) {
  for (std::size_t i = 0; i < stack.size(); ++i)
    stack[i].collect(prefix + "." + std::to_string(i), out);
}

namespace {

Tensor slice_vec(const Tensor& v, std::size_t start, std::size_t count) {
  return reshape(slice_cols(reshape(v, {1, v.size()}), start, count), {count});
}

// One complete attention evaluation: queries from q_src, keys/values from
// kv_src, relative-position logits from the (clamped) offset table, output
// projection included.
Tensor attention_eval(const Tensor& q_src, const Tensor& kv_src,
                      const RelativeAttentionParams& params, const AttentionConfig& cfg) {
  const std::size_t d = cfg.model_dim;
  const std::size_t h = cfg.num_heads;
  const std::size_t dz = cfg.head_dim();
  if (q_src.rank() != 2 || q_src.cols() != d)
    throw DimensionError("attention: expected [T x " + std::to_string(d) + "], got " +
                         shape_to_string(q_src.shape()));
  if (q_src.rows() == 0) throw DimensionError("attention: empty sequence");

  Tensor q = matmul(q_src, params.w_q);
  Tensor k = matmul(kv_src, params.w_k);
  Tensor v = matmul(kv_src, params.w_v);

  std::vector<Tensor> heads;
  heads.reserve(h);
  const double scale = std::sqrt(static_cast<double>(dz));
  for (std::size_t i = 0; i < h; ++i) {
    Tensor qh = slice_cols(q, i * dz, dz);
    Tensor kh = slice_cols(k, i * dz, dz);
    Tensor vh = slice_cols(v, i * dz, dz);
    Tensor uh = slice_vec(params.content_bias, i * dz, dz);
    Tensor vb = slice_vec(params.position_bias, i * dz, dz);
    Tensor relh = slice_cols(params.rel_embedding, i * dz, dz);
    Tensor content = matmul(add_rowwise(qh, uh), transpose(kh));
    Tensor position = relative_position_logits(add_rowwise(qh, vb), relh, cfg.max_relative_distance);
    Tensor weights = softmax_lastdim(add(content, position), scale);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(heads), params.w_out);
}

}  // namespace

Tensor relative_attention(const Tensor& x, const RelativeAttentionParams& params,
                          const AttentionConfig& cfg) {
  return attention_eval(x, x, params, cfg);
}

Tensor cross_modal_relative_attention(const Tensor& x_a, const Tensor& x_b,
                                      const RelativeAttentionParams& params_a,
                                      const AttentionConfig& cfg) {
  if (x_a.shape() != x_b.shape())
    throw AlignmentError("cross-modal attention: stream shapes differ, " +
                         shape_to_string(x_a.shape()) + " vs " + shape_to_string(x_b.shape()));
  Tensor own = attention_eval(x_a, x_a, params_a, cfg);
  Tensor swapped = attention_eval(x_b, x_a, params_a, cfg);
  return add(own, swapped);
}

Tensor feed_forward_module(const Tensor& x, const FeedForwardParams& params,
                           const ConformerConfig& cfg, const ForwardContext& ctx) {
  Tensor h = layer_norm(x, params.norm_gain, params.norm_bias, cfg.norm_eps);
  h = add_rowwise(matmul(h, params.w1), params.b1);
  h = swish(h);
  h = add_rowwise(matmul(h, params.w2), params.b2);
  return ctx.apply_dropout(h);
}

Tensor convolution_module(const Tensor& x, const ConvModuleParams& params,
                          const ConformerConfig& cfg, const ForwardContext& ctx) {
  Tensor h = layer_norm(x, params.norm_gain, params.norm_bias, cfg.norm_eps);
  h = add_rowwise(matmul(h, params.pw1_w), params.pw1_b);
  h = glu(h);
  h = depthwise_conv1d(h, params.dw_kernel);
  h = cfg.conv_norm == ConvNorm::kLayer
          ? layer_norm(h, params.post_norm_gain, params.post_norm_bias, cfg.norm_eps)
          : channel_norm(h, params.post_norm_gain, params.post_norm_bias, cfg.norm_eps);
  h = swish(h);
  h = add_rowwise(matmul(h, params.pw2_w), params.pw2_b);
  return ctx.apply_dropout(h);
}

Tensor conformer_block(const Tensor& x, const ConformerBlockParams& params,
                       const ConformerConfig& cfg, const std::optional<Tensor>& cross_stream,
                       const ForwardContext& ctx) {
  if (cross_stream && cross_stream->shape() != x.shape())
    throw DimensionError("conformer block: cross stream shape " +
                         shape_to_string(cross_stream->shape()) + " does not match input " +
                         shape_to_string(x.shape()));
  Tensor x1 = add(x, scale(feed_forward_module(x, params.ffn1, cfg, ctx), 0.5));
  Tensor att;
  if (cross_stream) {
    Tensor c1 = add(*cross_stream,
                    scale(feed_forward_module(*cross_stream, params.ffn1, cfg, ctx), 0.5));
    att = cross_modal_relative_attention(x1, c1, params.attention, cfg.attention);
  } else {
    att = relative_attention(x1, params.attention, cfg.attention);
  }
  Tensor x2 = add(x1, att);
  Tensor x3 = add(x2, convolution_module(x2, params.conv, cfg, ctx));
  Tensor x4 = add(x3, scale(feed_forward_module(x3, params.ffn2, cfg, ctx), 0.5));
  return layer_norm(x4, params.final_norm_gain, params.final_norm_bias, cfg.norm_eps);
}

Tensor encode(const Tensor& x, const ConformerStack& stack, const ConformerConfig& cfg,
              const std::optional<Tensor>& cross_stream, const ForwardContext& ctx) {
  if (stack.empty()) throw ConfigError("encode: empty conformer stack");
  Tensor h = x;
  for (const ConformerBlockParams& block : stack) h = conformer_block(h, block, cfg, cross_stream, ctx);
  return h;
}

}  // namespace cslr
