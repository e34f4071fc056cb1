#include "kic/backbone.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "kic/error.hpp"
#include "kic/hash.hpp"
#include "kic/rng.hpp"

namespace kic {
namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
Matrix<T> zeros(Eigen::Index rows, Eigen::Index cols) {
  return Matrix<T>::Zero(rows, cols);
}

template <typename T>
void fill_normal(Matrix<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
}

// ---- layer norm -----------------------------------------------------------

template <typename T>
Matrix<T> norm_forward(const Matrix<T>& x, const NormParams<T>& p, NormCache<T>* cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  Matrix<T> xhat(rows, d);
  std::vector<T> inv(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + T(kNormEps));
    inv[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (x.row(r).array() - mean) * is;
  }
  Matrix<T> y = (xhat.array().rowwise() * p.gain.row(0).array()).rowwise() + p.bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename T>
Matrix<T> norm_backward(const Matrix<T>& dy, const NormParams<T>& p, const NormCache<T>& c, NormParams<T>& g) {
  g.gain.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias.row(0) += dy.colwise().sum();
  const Eigen::Index d = dy.cols();
  Matrix<T> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  Matrix<T> dx(dy.rows(), d);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dx.row(r) = (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2) * c.inv_std[static_cast<std::size_t>(r)];
  }
  return dx;
}

// ---- attention ------------------------------------------------------------

// key_mask[j] != 0 hides key j; causal hides j > i. A query row with no
// visible key attends to nothing (zero output).
template <typename T>
Matrix<T> attention_forward(const Matrix<T>& q_in, const Matrix<T>& kv_in, const AttentionParams<T>& p,
                            int n_heads, const std::vector<std::uint8_t>* key_mask, bool causal,
                            AttentionCache<T>* cache) {
  const Eigen::Index lq = q_in.rows();
  const Eigen::Index lk = kv_in.rows();
  const Eigen::Index d = q_in.cols();
  const Eigen::Index dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> q = q_in * p.wq.transpose();
  Matrix<T> k = kv_in * p.wk.transpose();
  Matrix<T> v = kv_in * p.wv.transpose();
  Matrix<T> concat = zeros<T>(lq, d);
  std::vector<Matrix<T>> probs;
  probs.reserve(static_cast<std::size_t>(n_heads));

  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * dh;
    Matrix<T> s = (q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose()) * inv_sqrt;
    Matrix<T> prob = zeros<T>(lq, lk);
    for (Eigen::Index i = 0; i < lq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j < lk; ++j) {
        const bool hidden = (causal && j > i) || (key_mask && (*key_mask)[static_cast<std::size_t>(j)]);
        if (!hidden) mx = std::max(mx, s(i, j));
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      T sum = T(0);
      for (Eigen::Index j = 0; j < lk; ++j) {
        const bool hidden = (causal && j > i) || (key_mask && (*key_mask)[static_cast<std::size_t>(j)]);
        if (hidden) continue;
        const T e = std::exp(s(i, j) - mx);
        prob(i, j) = e;
        sum += e;
      }
      prob.row(i) /= sum;
    }
    concat.middleCols(c0, dh) = prob * v.middleCols(c0, dh);
    probs.push_back(std::move(prob));
  }
  Matrix<T> out = concat * p.wo.transpose();
  if (cache) {
    cache->q_in = q_in;
    cache->kv_in = kv_in;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->probs = std::move(probs);
  }
  return out;
}

template <typename T>
void attention_backward(const Matrix<T>& d_out, const AttentionParams<T>& p, const AttentionCache<T>& c,
                        int n_heads, AttentionParams<T>& g, Matrix<T>& d_q_in, Matrix<T>& d_kv_in) {
  const Eigen::Index d = c.q.cols();
  const Eigen::Index dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  g.wo.noalias() += d_out.transpose() * c.concat;
  const Matrix<T> d_concat = d_out * p.wo;
  Matrix<T> dq = zeros<T>(c.q.rows(), d);
  Matrix<T> dk = zeros<T>(c.k.rows(), d);
  Matrix<T> dv = zeros<T>(c.v.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * dh;
    const Matrix<T>& prob = c.probs[static_cast<std::size_t>(h)];
    const Matrix<T> d_head = d_concat.middleCols(c0, dh);
    dv.middleCols(c0, dh).noalias() += prob.transpose() * d_head;
    const Matrix<T> dp = d_head * c.v.middleCols(c0, dh).transpose();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * prob.array()).rowwise().sum();
    Matrix<T> ds = (prob.array() * (dp.array().colwise() - rowdot.array())) * inv_sqrt;
    dq.middleCols(c0, dh).noalias() += ds * c.k.middleCols(c0, dh);
    dk.middleCols(c0, dh).noalias() += ds.transpose() * c.q.middleCols(c0, dh);
  }
  g.wq.noalias() += dq.transpose() * c.q_in;
  g.wk.noalias() += dk.transpose() * c.kv_in;
  g.wv.noalias() += dv.transpose() * c.kv_in;
  d_q_in = dq * p.wq;
  d_kv_in = dk * p.wk + dv * p.wv;
}

// ---- feed-forward ----------------------------------------------------------

template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
Matrix<T> ffn_forward(const Matrix<T>& x, const FeedForwardParams<T>& p, FeedForwardCache<T>* cache) {
  Matrix<T> pre = (x * p.w1.transpose()).rowwise() + p.b1.row(0);
  Matrix<T> act = pre.unaryExpr([](T v) { return gelu(v); });
  Matrix<T> out = (act * p.w2.transpose()).rowwise() + p.b2.row(0);
  if (cache) {
    cache->in = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <typename T>
Matrix<T> ffn_backward(const Matrix<T>& d_out, const FeedForwardParams<T>& p, const FeedForwardCache<T>& c,
                       FeedForwardParams<T>& g) {
  g.w2.noalias() += d_out.transpose() * c.act;
  g.b2.row(0) += d_out.colwise().sum();
  const Matrix<T> d_act = d_out * p.w2;
  const Matrix<T> d_pre = d_act.array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
  g.w1.noalias() += d_pre.transpose() * c.in;
  g.b1.row(0) += d_pre.colwise().sum();
  return d_pre * p.w1;
}

template <typename T>
NormParams<T> norm_zeros(int d) {
  return {zeros<T>(1, d), zeros<T>(1, d)};
}

template <typename T>
AttentionParams<T> attn_zeros(int d) {
  return {zeros<T>(d, d), zeros<T>(d, d), zeros<T>(d, d), zeros<T>(d, d)};
}

template <typename T>
FeedForwardParams<T> ffn_zeros(int d, int dff) {
  return {zeros<T>(dff, d), zeros<T>(1, dff), zeros<T>(d, dff), zeros<T>(1, d)};
}

template <typename T>
const Matrix<T>& output_matrix(const T2TParams<T>& p) {
  return p.config.tie_embeddings ? p.token_embedding : p.output_weight;
}

template <typename T>
void check_ids(const T2TParams<T>& p, std::span<const TokenId> ids, const char* what) {
  if (ids.empty()) throw InvalidArgument(std::string(what) + " is empty");
  if (static_cast<int>(ids.size()) > p.config.max_positions)
    throw InvalidArgument(std::string(what) + " has " + std::to_string(ids.size()) +
                          " tokens, more than max_positions=" + std::to_string(p.config.max_positions));
  for (const TokenId id : ids)
    if (id < 0 || id >= p.config.vocab_size)
      throw InvalidArgument(std::string(what) + " holds out-of-range token id " + std::to_string(id));
}

template <typename T>
Matrix<T> embed(const T2TParams<T>& p, std::span<const TokenId> ids, const Matrix<T>& positions) {
  Matrix<T> x(static_cast<Eigen::Index>(ids.size()), p.config.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) =
        p.token_embedding.row(ids[i]) + positions.row(static_cast<Eigen::Index>(i));
  return x;
}

template <typename T>
void embed_backward(std::span<const TokenId> ids, const Matrix<T>& dx, Matrix<T>& d_tokens, Matrix<T>& d_positions) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    d_tokens.row(ids[i]) += dx.row(static_cast<Eigen::Index>(i));
    d_positions.row(static_cast<Eigen::Index>(i)) += dx.row(static_cast<Eigen::Index>(i));
  }
}

template <typename T>
std::vector<TokenId> teacher_prefix(std::span<const TokenId> y) {
  std::vector<TokenId> prefix;
  prefix.reserve(y.size());
  prefix.push_back(kBos);
  for (std::size_t i = 0; i + 1 < y.size(); ++i) prefix.push_back(y[i]);
  return prefix;
}

}  // namespace

// ---- config -----------------------------------------------------------------

void T2TConfig::validate() const {
  if (vocab_size <= kNumReserved) throw InvalidArgument("vocab_size must exceed the reserved token count");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
    throw InvalidArgument("d_model must be a positive multiple of n_heads");
  if (n_enc_layers < 0 || n_dec_layers < 0) throw InvalidArgument("layer counts must be >= 0");
  if (d_ff <= 0) throw InvalidArgument("d_ff must be positive");
  if (max_positions <= 0) throw InvalidArgument("max_positions must be positive");
}

std::uint64_t T2TConfig::digest() const {
  std::ostringstream s;
  s << "t2t/v1 V=" << vocab_size << " d=" << d_model << " h=" << n_heads << " enc=" << n_enc_layers
    << " dec=" << n_dec_layers << " ff=" << d_ff << " P=" << max_positions << " tied=" << tie_embeddings;
  return fnv1a64(s.str());
}

// ---- params -----------------------------------------------------------------

template <typename T>
T2TParams<T> T2TParams<T>::zeros(const T2TConfig& config) {
  config.validate();
  const int d = config.d_model;
  T2TParams p;
  p.config = config;
  p.token_embedding = kic::zeros<T>(config.vocab_size, d);
  p.encoder_positions = kic::zeros<T>(config.max_positions, d);
  p.decoder_positions = kic::zeros<T>(config.max_positions, d);
  for (int i = 0; i < config.n_enc_layers; ++i)
    p.encoder.push_back({norm_zeros<T>(d), attn_zeros<T>(d), norm_zeros<T>(d), ffn_zeros<T>(d, config.d_ff)});
  p.encoder_norm = norm_zeros<T>(d);
  for (int i = 0; i < config.n_dec_layers; ++i)
    p.decoder.push_back({norm_zeros<T>(d), attn_zeros<T>(d), norm_zeros<T>(d), attn_zeros<T>(d), norm_zeros<T>(d),
                         ffn_zeros<T>(d, config.d_ff)});
  p.decoder_norm = norm_zeros<T>(d);
  p.output_weight = config.tie_embeddings ? Matrix<T>() : kic::zeros<T>(config.vocab_size, d);
  p.output_bias = kic::zeros<T>(1, config.vocab_size);
  return p;
}

template <typename T>
T2TParams<T> T2TParams<T>::random(const T2TConfig& config) {
  T2TParams p = zeros(config);
  Rng rng(mix64(config.seed, 0x7432));
  const double d = config.d_model;
  const double residual = 1.0 / std::sqrt(2.0 * std::max(1, config.n_enc_layers + config.n_dec_layers));
  fill_normal(p.token_embedding, rng, 1.0 / std::sqrt(d));
  fill_normal(p.encoder_positions, rng, 0.5 / std::sqrt(d));
  fill_normal(p.decoder_positions, rng, 0.5 / std::sqrt(d));
  auto init_norm = [](NormParams<T>& n) { n.gain.setOnes(); };
  auto init_attn = [&](AttentionParams<T>& a) {
    fill_normal(a.wq, rng, 1.0 / std::sqrt(d));
    fill_normal(a.wk, rng, 1.0 / std::sqrt(d));
    fill_normal(a.wv, rng, 1.0 / std::sqrt(d));
    fill_normal(a.wo, rng, residual / std::sqrt(d));
  };
  auto init_ffn = [&](FeedForwardParams<T>& f) {
    fill_normal(f.w1, rng, 1.0 / std::sqrt(d));
    fill_normal(f.w2, rng, residual / std::sqrt(static_cast<double>(config.d_ff)));
  };
  for (auto& l : p.encoder) {
    init_norm(l.ln1);
    init_attn(l.attn);
    init_norm(l.ln2);
    init_ffn(l.ffn);
  }
  init_norm(p.encoder_norm);
  for (auto& l : p.decoder) {
    init_norm(l.ln1);
    init_attn(l.self_attn);
    init_norm(l.ln2);
    init_attn(l.cross_attn);
    init_norm(l.ln3);
    init_ffn(l.ffn);
  }
  init_norm(p.decoder_norm);
  if (!config.tie_embeddings) fill_normal(p.output_weight, rng, 1.0 / std::sqrt(d));
  return p;
}

template <typename T>
std::size_t T2TParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](std::string_view, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename T>
void T2TParams<T>::set_zero() {
  for_each([](std::string_view, Matrix<T>& m) { m.setZero(); });
}

// ---- encoder ----------------------------------------------------------------

template <typename T>
EncoderOutput<T> encode(const T2TParams<T>& p, std::span<const TokenId> ids, EncoderCache<T>* cache) {
  check_ids(p, ids, "encoder input");
  EncoderOutput<T> out;
  out.pad_mask.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.pad_mask[i] = ids[i] == kPad ? 1 : 0;

  Matrix<T> x = embed(p, ids, p.encoder_positions);
  if (cache) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->pad_mask = out.pad_mask;
    cache->layers.assign(p.encoder.size(), {});
  }
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& lp = p.encoder[l];
    EncoderLayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
    const Matrix<T> a = norm_forward(x, lp.ln1, lc ? &lc->ln1 : nullptr);
    x += attention_forward(a, a, lp.attn, p.config.n_heads, &out.pad_mask, false, lc ? &lc->attn : nullptr);
    const Matrix<T> b = norm_forward(x, lp.ln2, lc ? &lc->ln2 : nullptr);
    x += ffn_forward(b, lp.ffn, lc ? &lc->ffn : nullptr);
  }
  out.hidden = norm_forward(x, p.encoder_norm, cache ? &cache->final_norm : nullptr);
  return out;
}

template <typename T>
void encode_backward(const T2TParams<T>& p, const EncoderCache<T>& c, const Matrix<T>& d_hidden, T2TParams<T>& g) {
  Matrix<T> dx = norm_backward(d_hidden, p.encoder_norm, c.final_norm, g.encoder_norm);
  for (std::size_t li = p.encoder.size(); li-- > 0;) {
    const auto& lp = p.encoder[li];
    const auto& lc = c.layers[li];
    auto& lg = g.encoder[li];
    const Matrix<T> d_b = ffn_backward(dx, lp.ffn, lc.ffn, lg.ffn);
    dx += norm_backward(d_b, lp.ln2, lc.ln2, lg.ln2);
    Matrix<T> d_q, d_kv;
    attention_backward(dx, lp.attn, lc.attn, p.config.n_heads, lg.attn, d_q, d_kv);
    const Matrix<T> d_a = d_q + d_kv;
    dx += norm_backward(d_a, lp.ln1, lc.ln1, lg.ln1);
  }
  embed_backward(std::span<const TokenId>(c.ids), dx, g.token_embedding, g.encoder_positions);
}

// ---- decoder ----------------------------------------------------------------

template <typename T>
Matrix<T> decode_logits(const T2TParams<T>& p, const EncoderOutput<T>& enc, std::span<const TokenId> prefix,
                        DecoderCache<T>* cache) {
  check_ids(p, prefix, "decoder prefix");
  if (prefix.front() != kBos) throw InvalidArgument("decoder prefix must start with BOS");
  if (enc.hidden.cols() != p.config.d_model) throw DimensionMismatch("encoder output width != d_model");

  Matrix<T> x = embed(p, prefix, p.decoder_positions);
  if (cache) {
    cache->ids.assign(prefix.begin(), prefix.end());
    cache->layers.assign(p.decoder.size(), {});
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& lp = p.decoder[l];
    DecoderLayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
    const Matrix<T> a = norm_forward(x, lp.ln1, lc ? &lc->ln1 : nullptr);
    x += attention_forward(a, a, lp.self_attn, p.config.n_heads, nullptr, true, lc ? &lc->self_attn : nullptr);
    const Matrix<T> b = norm_forward(x, lp.ln2, lc ? &lc->ln2 : nullptr);
    x += attention_forward(b, enc.hidden, lp.cross_attn, p.config.n_heads, &enc.pad_mask, false,
                           lc ? &lc->cross_attn : nullptr);
    const Matrix<T> f = norm_forward(x, lp.ln3, lc ? &lc->ln3 : nullptr);
    x += ffn_forward(f, lp.ffn, lc ? &lc->ffn : nullptr);
  }
  Matrix<T> h = norm_forward(x, p.decoder_norm, cache ? &cache->final_norm : nullptr);
  Matrix<T> logits = (h * output_matrix(p).transpose()).rowwise() + p.output_bias.row(0);
  if (cache) cache->final_hidden = std::move(h);
  return logits;
}

template <typename T>
Matrix<T> decode_backward(const T2TParams<T>& p, const DecoderCache<T>& c, const Matrix<T>& d_logits,
                          T2TParams<T>& g) {
  Matrix<T>& d_out_w = p.config.tie_embeddings ? g.token_embedding : g.output_weight;
  d_out_w.noalias() += d_logits.transpose() * c.final_hidden;
  g.output_bias.row(0) += d_logits.colwise().sum();
  const Matrix<T> d_h = d_logits * output_matrix(p);
  Matrix<T> dx = norm_backward(d_h, p.decoder_norm, c.final_norm, g.decoder_norm);

  Matrix<T> d_enc;
  for (std::size_t li = p.decoder.size(); li-- > 0;) {
    const auto& lp = p.decoder[li];
    const auto& lc = c.layers[li];
    auto& lg = g.decoder[li];
    dx += norm_backward(ffn_backward(dx, lp.ffn, lc.ffn, lg.ffn), lp.ln3, lc.ln3, lg.ln3);

    Matrix<T> d_q, d_kv;
    attention_backward(dx, lp.cross_attn, lc.cross_attn, p.config.n_heads, lg.cross_attn, d_q, d_kv);
    if (d_enc.size() == 0) {
      d_enc = std::move(d_kv);
    } else {
      d_enc += d_kv;
    }
    dx += norm_backward(d_q, lp.ln2, lc.ln2, lg.ln2);

    Matrix<T> s_q, s_kv;
    attention_backward(dx, lp.self_attn, lc.self_attn, p.config.n_heads, lg.self_attn, s_q, s_kv);
    const Matrix<T> d_a = s_q + s_kv;
    dx += norm_backward(d_a, lp.ln1, lc.ln1, lg.ln1);
  }
  embed_backward(std::span<const TokenId>(c.ids), dx, g.token_embedding, g.decoder_positions);
  return d_enc;
}

// ---- losses -----------------------------------------------------------------

template <typename T>
Matrix<T> scaled_softmax(const Matrix<T>& logits, T scale) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto z = (logits.row(r).array() * scale).eval();
    const T mx = z.maxCoeff();
    const auto e = (z - mx).exp().eval();
    out.row(r) = e / e.sum();
  }
  return out;
}

template <typename T>
LossResult<T> forward_loss(const T2TParams<T>& p, std::span<const TokenId> x_ids, std::span<const TokenId> y_ids,
                           T scale) {
  if (!(scale > T(0) && scale <= T(1))) throw InvalidArgument("logit scale must lie in (0, 1]");
  if (y_ids.empty()) throw InvalidArgument("target sequence is empty");
  LossResult<T> res;
  auto& c = res.cache;
  const EncoderOutput<T> enc = encode(p, x_ids, &c.encoder);
  const std::vector<TokenId> prefix = teacher_prefix<T>(y_ids);
  c.logits = decode_logits(p, enc, std::span<const TokenId>(prefix), &c.decoder);
  c.targets.assign(y_ids.begin(), y_ids.end());
  c.scale = scale;
  c.probs = scaled_softmax(c.logits, scale);

  T ce = T(0);
  for (std::size_t t = 0; t < c.targets.size(); ++t) {
    const TokenId y = c.targets[t];
    if (y == kPad) continue;
    if (y < 0 || y >= p.config.vocab_size) throw InvalidArgument("target id out of range");
    const auto row = (c.logits.row(static_cast<Eigen::Index>(t)).array() * scale).eval();
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row - mx).exp().sum());
    ce += lse - row(y);
  }
  if (!std::isfinite(static_cast<double>(ce))) {
    std::ostringstream msg;
    msg << "non-finite cross-entropy (" << ce << "); max |logit| = " << c.logits.cwiseAbs().maxCoeff()
        << ", scale = " << scale << ", input length " << x_ids.size() << ", target length " << y_ids.size();
    throw NumericalError(msg.str());
  }
  res.ce = ce;
  return res;
}

template <typename T>
T backward(const T2TParams<T>& p, ForwardCache<T>& c, T2TParams<T>& g, T weight) {
  if (c.consumed) throw std::logic_error("forward cache already consumed by a backward pass");
  c.consumed = true;
  Matrix<T> d_logits = zeros<T>(c.logits.rows(), c.logits.cols());
  T d_scale = T(0);
  for (std::size_t t = 0; t < c.targets.size(); ++t) {
    const TokenId y = c.targets[t];
    if (y == kPad) continue;
    const auto r = static_cast<Eigen::Index>(t);
    // d/dz of -log softmax(s z)[y] = s (p - e_y);  d/ds = sum_j p_j z_j - z_y.
    d_scale += c.probs.row(r).dot(c.logits.row(r)) - c.logits(r, y);
    d_logits.row(r) = c.probs.row(r) * (c.scale * weight);
    d_logits(r, y) -= c.scale * weight;
  }
  const Matrix<T> d_enc = decode_backward(p, c.decoder, d_logits, g);
  encode_backward(p, c.encoder, d_enc, g);
  return d_scale;
}

template <typename T>
std::vector<TokenId> greedy_decode(const T2TParams<T>& p, const EncoderOutput<T>& enc, int max_out, T scale) {
  if (max_out < 1) throw InvalidArgument("max_out must be >= 1");
  std::vector<TokenId> prefix{kBos};
  std::vector<TokenId> out;
  const int limit = std::min(max_out, p.config.max_positions);
  while (static_cast<int>(out.size()) < limit) {
    const Matrix<T> logits = decode_logits(p, enc, std::span<const TokenId>(prefix));
    const auto last = (logits.row(logits.rows() - 1).array() * scale).eval();
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < last.size(); ++j)
      if (last(j) > last(best)) best = j;
    const auto id = static_cast<TokenId>(best);
    if (id == kEos) break;
    out.push_back(id);
    prefix.push_back(id);
    if (static_cast<int>(prefix.size()) > p.config.max_positions) break;
  }
  return out;
}

template <typename T>
T sequence_log_prob(const T2TParams<T>& p, std::span<const TokenId> x_ids, std::span<const TokenId> candidate,
                    T scale) {
  if (candidate.empty()) throw InvalidArgument("candidate sequence is empty");
  const EncoderOutput<T> enc = encode(p, x_ids);
  std::vector<TokenId> prefix = teacher_prefix<T>(candidate);
  const Matrix<T> logits = decode_logits(p, enc, std::span<const TokenId>(prefix));
  T total = T(0);
  for (std::size_t t = 0; t < candidate.size(); ++t) {
    const auto row = (logits.row(static_cast<Eigen::Index>(t)).array() * scale).eval();
    const T mx = row.maxCoeff();
    total += row(candidate[t]) - mx - std::log((row - mx).exp().sum());
  }
  return total;
}

#define KIC_INSTANTIATE_BACKBONE(T)                                                                          \
  template struct T2TParams<T>;                                                                              \
  template EncoderOutput<T> encode<T>(const T2TParams<T>&, std::span<const TokenId>, EncoderCache<T>*);       \
  template void encode_backward<T>(const T2TParams<T>&, const EncoderCache<T>&, const Matrix<T>&,            \
                                   T2TParams<T>&);                                                           \
  template Matrix<T> decode_logits<T>(const T2TParams<T>&, const EncoderOutput<T>&, std::span<const TokenId>, \
                                      DecoderCache<T>*);                                                     \
  template Matrix<T> decode_backward<T>(const T2TParams<T>&, const DecoderCache<T>&, const Matrix<T>&,       \
                                        T2TParams<T>&);                                                      \
  template LossResult<T> forward_loss<T>(const T2TParams<T>&, std::span<const TokenId>,                      \
                                         std::span<const TokenId>, T);                                       \
  template T backward<T>(const T2TParams<T>&, ForwardCache<T>&, T2TParams<T>&, T);                           \
  template std::vector<TokenId> greedy_decode<T>(const T2TParams<T>&, const EncoderOutput<T>&, int, T);      \
  template T sequence_log_prob<T>(const T2TParams<T>&, std::span<const TokenId>, std::span<const TokenId>, T); \
  template Matrix<T> scaled_softmax<T>(const Matrix<T>&, T);

KIC_INSTANTIATE_BACKBONE(float)
KIC_INSTANTIATE_BACKBONE(double)

#undef KIC_INSTANTIATE_BACKBONE

}  // namespace kic
