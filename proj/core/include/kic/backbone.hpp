#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "kic/tokenizer.hpp"

namespace kic {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Desk-scale encoder-decoder transformer: pre-norm residual blocks, learned
// absolute positions, GELU feed-forward, byte vocabulary by default.
struct T2TConfig {
  int vocab_size = kByteVocabSize;
  int d_model = 32;
  int n_heads = 2;
  int n_enc_layers = 1;
  int n_dec_layers = 1;
  int d_ff = 64;
  int max_positions = 128;
  std::uint64_t seed = 1;
  bool tie_embeddings = false;

  void validate() const;
  // Stable digest over every shape-determining field (not the seed).
  std::uint64_t digest() const;
  bool operator==(const T2TConfig&) const = default;
};

template <typename T>
struct NormParams {
  Matrix<T> gain;  // 1 x d
  Matrix<T> bias;  // 1 x d
};

template <typename T>
struct AttentionParams {
  Matrix<T> wq, wk, wv, wo;  // d x d, (out, in)
};

template <typename T>
struct FeedForwardParams {
  Matrix<T> w1;  // d_ff x d
  Matrix<T> b1;  // 1 x d_ff
  Matrix<T> w2;  // d x d_ff
  Matrix<T> b2;  // 1 x d
};

template <typename T>
struct EncoderLayerParams {
  NormParams<T> ln1;
  AttentionParams<T> attn;
  NormParams<T> ln2;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  NormParams<T> ln1;
  AttentionParams<T> self_attn;
  NormParams<T> ln2;
  AttentionParams<T> cross_attn;
  NormParams<T> ln3;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct T2TParams {
  T2TConfig config;
  Matrix<T> token_embedding;    // V x d
  Matrix<T> encoder_positions;  // P x d
  Matrix<T> decoder_positions;  // P x d
  std::vector<EncoderLayerParams<T>> encoder;
  NormParams<T> encoder_norm;
  std::vector<DecoderLayerParams<T>> decoder;
  NormParams<T> decoder_norm;
  Matrix<T> output_weight;  // V x d; 0 x 0 when tied to token_embedding
  Matrix<T> output_bias;    // 1 x V

  // All-zero tensors (layer-norm gains included), e.g. for gradients.
  static T2TParams zeros(const T2TConfig& config);
  // Seeded random initialization from config.seed.
  static T2TParams random(const T2TConfig& config);

  // Visits every tensor in declaration order, which is also checkpoint order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;
  void set_zero();

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    f(std::string_view("token_embedding"), p.token_embedding);
    f(std::string_view("encoder_positions"), p.encoder_positions);
    f(std::string_view("decoder_positions"), p.decoder_positions);
    auto norm = [&f](const std::string& prefix, auto& n) {
      f(std::string_view(prefix + ".gain"), n.gain);
      f(std::string_view(prefix + ".bias"), n.bias);
    };
    auto attn = [&f](const std::string& prefix, auto& a) {
      f(std::string_view(prefix + ".wq"), a.wq);
      f(std::string_view(prefix + ".wk"), a.wk);
      f(std::string_view(prefix + ".wv"), a.wv);
      f(std::string_view(prefix + ".wo"), a.wo);
    };
    auto ffn = [&f](const std::string& prefix, auto& m) {
      f(std::string_view(prefix + ".w1"), m.w1);
      f(std::string_view(prefix + ".b1"), m.b1);
      f(std::string_view(prefix + ".w2"), m.w2);
      f(std::string_view(prefix + ".b2"), m.b2);
    };
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
      const std::string base = "encoder." + std::to_string(i);
      norm(base + ".ln1", p.encoder[i].ln1);
      attn(base + ".attn", p.encoder[i].attn);
      norm(base + ".ln2", p.encoder[i].ln2);
      ffn(base + ".ffn", p.encoder[i].ffn);
    }
    norm("encoder_norm", p.encoder_norm);
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
      const std::string base = "decoder." + std::to_string(i);
      norm(base + ".ln1", p.decoder[i].ln1);
      attn(base + ".self_attn", p.decoder[i].self_attn);
      norm(base + ".ln2", p.decoder[i].ln2);
      attn(base + ".cross_attn", p.decoder[i].cross_attn);
      norm(base + ".ln3", p.decoder[i].ln3);
      ffn(base + ".ffn", p.decoder[i].ffn);
    }
    norm("decoder_norm", p.decoder_norm);
    f(std::string_view("output_weight"), p.output_weight);
    f(std::string_view("output_bias"), p.output_bias);
  }
};

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
struct AttentionCache {
  Matrix<T> q_in, kv_in;
  Matrix<T> q, k, v;
  Matrix<T> concat;
  std::vector<Matrix<T>> probs;  // one Lq x Lk matrix per head
};

template <typename T>
struct FeedForwardCache {
  Matrix<T> in, pre, act;
};

template <typename T>
struct EncoderLayerCache {
  NormCache<T> ln1;
  AttentionCache<T> attn;
  NormCache<T> ln2;
  FeedForwardCache<T> ffn;
};

template <typename T>
struct DecoderLayerCache {
  NormCache<T> ln1;
  AttentionCache<T> self_attn;
  NormCache<T> ln2;
  AttentionCache<T> cross_attn;
  NormCache<T> ln3;
  FeedForwardCache<T> ffn;
};

template <typename T>
struct EncoderCache {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> pad_mask;
  std::vector<EncoderLayerCache<T>> layers;
  NormCache<T> final_norm;
};

template <typename T>
struct DecoderCache {
  std::vector<TokenId> ids;
  std::vector<DecoderLayerCache<T>> layers;
  NormCache<T> final_norm;
  Matrix<T> final_hidden;
};

template <typename T>
struct EncoderOutput {
  Matrix<T> hidden;                    // L x d_model
  std::vector<std::uint8_t> pad_mask;  // 1 where the input token is PAD
};

// Throws InvalidArgument for out-of-range ids or inputs longer than
// max_positions (or empty).
template <typename T>
EncoderOutput<T> encode(const T2TParams<T>& params, std::span<const TokenId> ids,
                        EncoderCache<T>* cache = nullptr);

// Accumulates parameter gradients given dLoss/dHidden.
template <typename T>
void encode_backward(const T2TParams<T>& params, const EncoderCache<T>& cache, const Matrix<T>& d_hidden,
                     T2TParams<T>& grads);

// Teacher-forced logits (T x V) for a prefix that starts with BOS. Row t
// depends only on prefix[0..t] and the encoder output.
template <typename T>
Matrix<T> decode_logits(const T2TParams<T>& params, const EncoderOutput<T>& enc,
                        std::span<const TokenId> prefix, DecoderCache<T>* cache = nullptr);

// Accumulates decoder gradients; returns dLoss/dEncoderHidden.
template <typename T>
Matrix<T> decode_backward(const T2TParams<T>& params, const DecoderCache<T>& cache, const Matrix<T>& d_logits,
                          T2TParams<T>& grads);

template <typename T>
struct ForwardCache {
  EncoderCache<T> encoder;
  DecoderCache<T> decoder;
  Matrix<T> logits;  // unscaled
  Matrix<T> probs;   // softmax(scale * logits)
  std::vector<TokenId> targets;
  T scale = T(1);
  bool consumed = false;
};

template <typename T>
struct LossResult {
  T ce = T(0);
  ForwardCache<T> cache;
};

// Summed cross-entropy of softmax(scale * logits_t) against y_t, PAD targets
// excluded. The decoder reads BOS followed by y[0..T-2]; y normally ends in
// EOS. scale must lie in (0, 1].
template <typename T>
LossResult<T> forward_loss(const T2TParams<T>& params, std::span<const TokenId> x_ids,
                           std::span<const TokenId> y_ids, T scale);

// Reverse pass for forward_loss. Adds weight * dCE/dParams into grads and
// returns dCE/dScale (unweighted). A cache can be consumed once.
template <typename T>
T backward(const T2TParams<T>& params, ForwardCache<T>& cache, T2TParams<T>& grads, T weight = T(1));

// Argmax decoding from BOS until EOS or max_out tokens; EOS is not
// returned. Ties go to the lowest token id.
template <typename T>
std::vector<TokenId> greedy_decode(const T2TParams<T>& params, const EncoderOutput<T>& enc, int max_out,
                                   T scale = T(1));

// sum_t log softmax(scale * logits_t)[y_t] under teacher forcing. The
// candidate is scored exactly as given (no EOS appended).
template <typename T>
T sequence_log_prob(const T2TParams<T>& params, std::span<const TokenId> x_ids,
                    std::span<const TokenId> candidate, T scale = T(1));

// Row-wise softmax of scale * logits.
template <typename T>
Matrix<T> scaled_softmax(const Matrix<T>& logits, T scale);

}  // namespace kic
