/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Miniature pre-LN encoder-decoder transformer with learned absolute
// positions, tied input/output embeddings, and an optional span-selection
// head on the encoder.

#ifndef FSQA_MODEL_HPP
#define FSQA_MODEL_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fsqa/autodiff.hpp"
#include "fsqa/errors.hpp"
#include "fsqa/rng.hpp"
#include "fsqa/vocab.hpp"

namespace fsqa {

struct ModelConfig {
  int n_encoder_layers = 2;
  int n_decoder_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_positions = 256;
  double dropout_rate = 0.0;
  bool span_head = false;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) {
        throw ConfigError(std::string("model.") + name + " must be positive");
      }
    };
    positive(n_encoder_layers, "n_encoder_layers");
    positive(n_decoder_layers, "n_decoder_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_positions, "max_positions");
    if (d_model % n_heads != 0) {
      throw ConfigError("model.d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ConfigError("model.dropout_rate must lie in [0, 1)");
    }
  }

  // Same shapes for every shared parameter; the span head and dropout may
  // differ.
  bool same_backbone(const ModelConfig& o) const {
    return n_encoder_layers == o.n_encoder_layers &&
           n_decoder_layers == o.n_decoder_layers && d_model == o.d_model &&
           n_heads == o.n_heads && d_ff == o.d_ff &&
           vocab_size == o.vocab_size && max_positions == o.max_positions;
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_encoder_layers,
                                                n_decoder_layers, d_model,
                                                n_heads, d_ff, vocab_size,
                                                max_positions, dropout_rate,
                                                span_head)

// Closed-form number of scalar parameters for `config`.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff;
  const std::size_t norm = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * ff + ff + ff * d + d;
  std::size_t total = static_cast<std::size_t>(c.vocab_size) * d +
                      2 * static_cast<std::size_t>(c.max_positions) * d;
  total += c.n_encoder_layers * (2 * norm + attn + ffn) + norm;
  total += c.n_decoder_layers * (3 * norm + 2 * attn + ffn) + norm;
  if (c.span_head) total += 2 * d;
  return total;
}

template <typename T>
class Seq2SeqModel {
 public:
  using TensorT = Tensor<T>;

  struct Linear {
    TensorT weight;  // [in x out]
    TensorT bias;    // [out]
    TensorT operator()(const TensorT& x) const {
      return add_bias(matmul(x, weight), bias);
    }
  };
  struct Norm {
    TensorT gain;
    TensorT bias;
    TensorT operator()(const TensorT& x) const {
      return layer_norm(x, gain, bias);
    }
  };
  struct Attention {
    Linear query, key, value, output;
  };
  struct FeedForward {
    Linear up, down;
  };
  struct EncoderLayer {
    Norm attn_norm;
    Attention self_attn;
    Norm ff_norm;
    FeedForward ff;
  };
  struct DecoderLayer {
    Norm self_norm;
    Attention self_attn;
    Norm cross_norm;
    Attention cross_attn;
    Norm ff_norm;
    FeedForward ff;
  };

  // Encoder output plus per-layer cross-attention keys and values.
  struct Memory {
    TensorT states;
    std::vector<TensorT> keys;
    std::vector<TensorT> values;
  };

  Seq2SeqModel() = default;
  // Copies would share parameter storage; use clone() for a deep copy.
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;
  Seq2SeqModel(Seq2SeqModel&&) noexcept = default;
  Seq2SeqModel& operator=(Seq2SeqModel&&) noexcept = default;

  // Normal(0, 0.02) weights, zero biases, unit norm gains.
  static Seq2SeqModel create(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Seq2SeqModel m;
    m.config_ = config;
    Rng rng(seed);
    m.build(rng);
    m.dropout_rng_.reseed(mix64(seed ^ 0xd509d509ULL));
    return m;
  }

  Seq2SeqModel clone() const {
    Seq2SeqModel copy = create(config_, 0);
    copy.restore(snapshot());
    copy.dropout_rng_ = dropout_rng_;
    copy.training_ = training_;
    return copy;
  }

  const ModelConfig& config() const { return config_; }

  const std::vector<std::pair<std::string, TensorT>>& named_parameters() const {
    return named_;
  }

  std::vector<TensorT> parameters() const {
    std::vector<TensorT> out;
    out.reserve(named_.size());
    for (const auto& [name, t] : named_) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_) n += t.size();
    return n;
  }

  const TensorT& token_embedding() const { return token_embedding_; }

  void set_training(bool training) { training_ = training; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.reseed(seed); }

  // Bidirectional encoder states, [n x d_model].
  TensorT encode(std::span<const int> input_ids) const {
    check_length(input_ids.size(), "input");
    TensorT x = add(embedding(token_embedding_, input_ids),
                    embedding(encoder_positions_, positions(input_ids.size())));
    x = drop(x);
    for (const auto& layer : encoder_) {
      TensorT h = layer.attn_norm(x);
      x = add(x, drop(attend(layer.self_attn, h, project_kv(layer.self_attn, h),
                             false)));
      x = add(x, drop(feed_forward(layer.ff, layer.ff_norm(x))));
    }
    return encoder_norm_(x);
  }

  Memory prepare_memory(const TensorT& states) const {
    Memory mem;
    mem.states = states;
    for (const auto& layer : decoder_) {
      mem.keys.push_back(layer.cross_attn.key(states));
      mem.values.push_back(layer.cross_attn.value(states));
    }
    return mem;
  }

  // Final decoder states for the given decoder inputs (already BOS-shifted).
  TensorT decode_states(const Memory& memory,
                        std::span<const int> decoder_input) const {
    check_length(decoder_input.size(), "decoder input");
    TensorT x =
        add(embedding(token_embedding_, decoder_input),
            embedding(decoder_positions_, positions(decoder_input.size())));
    x = drop(x);
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const auto& layer = decoder_[l];
      TensorT h = layer.self_norm(x);
      x = add(x, drop(attend(layer.self_attn, h, project_kv(layer.self_attn, h),
                             true)));
      h = layer.cross_norm(x);
      x = add(x, drop(attend(layer.cross_attn, h,
                             {memory.keys[l], memory.values[l]}, false)));
      x = add(x, drop(feed_forward(layer.ff, layer.ff_norm(x))));
    }
    return decoder_norm_(x);
  }

  TensorT project_vocab(const TensorT& states) const {
    return matmul_nt(states, token_embedding_);
  }

  // Logits [n x vocab_size]; row i is conditioned on the input and on
  // target_ids[0..i-1] through the BOS-shifted decoder input.
  TensorT forward_teacher_forced(std::span<const int> input_ids,
                                 std::span<const int> target_ids) const {
    if (target_ids.empty()) {
      throw ContractError("forward_teacher_forced: empty target");
    }
    std::vector<int> decoder_input;
    decoder_input.reserve(target_ids.size());
    decoder_input.push_back(Vocab::kBos);
    decoder_input.insert(decoder_input.end(), target_ids.begin(),
                         target_ids.end() - 1);
    const Memory mem = prepare_memory(encode(input_ids));
    return project_vocab(decode_states(mem, decoder_input));
  }

  // Next-token logits after `prefix` (which starts with BOS).
  std::vector<T> next_token_logits(const Memory& memory,
                                   std::span<const int> prefix) const {
    NoGradGuard no_grad;
    TensorT states = decode_states(memory, prefix);
    TensorT last = slice_rows(states, states.rows() - 1, states.rows());
    TensorT logits = project_vocab(last);
    return {logits.values().begin(), logits.values().end()};
  }

  // Start and end logits over input positions, each shaped [1 x n].
  std::pair<TensorT, TensorT> span_head_forward(
      std::span<const int> input_ids) const {
    if (!config_.span_head) {
      throw ConfigError("span_head_forward: model was built without a span head");
    }
    TensorT states = encode(input_ids);
    return {transpose(matmul(states, span_start_)),
            transpose(matmul(states, span_end_))};
  }

  // Copies of all parameter values, in named_parameters() order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& [name, t] : named_)
      out.emplace_back(t.values().begin(), t.values().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != named_.size()) {
      throw ContractError("restore: snapshot has wrong parameter count");
    }
    for (std::size_t i = 0; i < named_.size(); ++i) {
      auto dst = named_[i].second.values();
      if (values[i].size() != dst.size()) {
        throw ContractError("restore: size mismatch for " + named_[i].first);
      }
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

  // Copies every parameter present in `other` with a matching name and
  // shape. Returns the number copied.
  template <typename U>
  std::size_t load_matching(const Seq2SeqModel<U>& other) {
    std::size_t copied = 0;
    for (auto& [name, dst] : named_) {
      for (const auto& [other_name, src] : other.named_parameters()) {
        if (other_name != name) continue;
        if (src.shape() != dst.shape()) {
          throw ContractError("parameter " + name + " has shape " +
                              shape_string(src.shape()) + ", expected " +
                              shape_string(dst.shape()));
        }
        auto out = dst.values();
        for (std::size_t i = 0; i < out.size(); ++i)
          out[i] = static_cast<T>(src.values()[i]);
        ++copied;
      }
    }
    return copied;
  }

  TensorT* find_parameter(const std::string& name) {
    for (auto& [n, t] : named_)
      if (n == name) return &t;
    return nullptr;
  }

 private:
  void check_length(std::size_t n, const char* what) const {
    if (n == 0) throw ContractError(std::string("empty ") + what + " sequence");
    if (n > static_cast<std::size_t>(config_.max_positions)) {
      throw LengthError(std::string(what) + " length " + std::to_string(n) +
                        " exceeds max_positions " +
                        std::to_string(config_.max_positions));
    }
  }

  static std::vector<int> positions(std::size_t n) {
    std::vector<int> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
    return p;
  }

  TensorT drop(const TensorT& x) const {
    if (!training_ || config_.dropout_rate <= 0.0 || !grad_enabled()) return x;
    return dropout(x, config_.dropout_rate, dropout_rng_);
  }

  std::pair<TensorT, TensorT> project_kv(const Attention& a,
                                         const TensorT& h) const {
    return {a.key(h), a.value(h)};
  }

  TensorT attend(const Attention& a, const TensorT& h,
                 const std::pair<TensorT, TensorT>& kv, bool causal) const {
    TensorT q = a.query(h);
    return a.output(attention(q, kv.first, kv.second,
                              static_cast<std::size_t>(config_.n_heads), causal));
  }

  TensorT feed_forward(const FeedForward& f, const TensorT& h) const {
    return f.down(gelu(f.up(h)));
  }

  TensorT param(const std::string& name, Shape shape, Rng& rng,
                double init_std, double fill = 0.0) {
    const std::size_t n = shape_size(shape);
    std::vector<T> v(n);
    for (auto& x : v)
      x = init_std > 0.0 ? static_cast<T>(rng.normal() * init_std)
                         : static_cast<T>(fill);
    TensorT t = TensorT::from_values(std::move(shape), std::move(v), true);
    named_.emplace_back(name, t);
    return t;
  }

  Linear linear(const std::string& name, std::size_t in, std::size_t out,
                Rng& rng) {
    Linear l;
    l.weight = param(name + ".weight", {in, out}, rng, kInitStd);
    l.bias = param(name + ".bias", {out}, rng, 0.0);
    return l;
  }

  Norm norm(const std::string& name, std::size_t d, Rng& rng) {
    Norm n;
    n.gain = param(name + ".gain", {d}, rng, 0.0, 1.0);
    n.bias = param(name + ".bias", {d}, rng, 0.0);
    return n;
  }

  Attention attention_block(const std::string& name, Rng& rng) {
    const std::size_t d = config_.d_model;
    Attention a;
    a.query = linear(name + ".query", d, d, rng);
    a.key = linear(name + ".key", d, d, rng);
    a.value = linear(name + ".value", d, d, rng);
    a.output = linear(name + ".output", d, d, rng);
    return a;
  }

  FeedForward feed_forward_block(const std::string& name, Rng& rng) {
    FeedForward f;
    f.up = linear(name + ".up", config_.d_model, config_.d_ff, rng);
    f.down = linear(name + ".down", config_.d_ff, config_.d_model, rng);
    return f;
  }

  void build(Rng& rng) {
    const std::size_t d = config_.d_model;
    token_embedding_ =
        param("token_embedding", {static_cast<std::size_t>(config_.vocab_size), d},
              rng, kInitStd);
    encoder_positions_ = param(
        "encoder.positions", {static_cast<std::size_t>(config_.max_positions), d},
        rng, kInitStd);
    decoder_positions_ = param(
        "decoder.positions", {static_cast<std::size_t>(config_.max_positions), d},
        rng, kInitStd);
    for (int l = 0; l < config_.n_encoder_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      EncoderLayer layer;
      layer.attn_norm = norm(p + ".attn_norm", d, rng);
      layer.self_attn = attention_block(p + ".self_attn", rng);
      layer.ff_norm = norm(p + ".ff_norm", d, rng);
      layer.ff = feed_forward_block(p + ".ff", rng);
      encoder_.push_back(layer);
    }
    encoder_norm_ = norm("encoder.final_norm", d, rng);
    for (int l = 0; l < config_.n_decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      DecoderLayer layer;
      layer.self_norm = norm(p + ".self_norm", d, rng);
      layer.self_attn = attention_block(p + ".self_attn", rng);
      layer.cross_norm = norm(p + ".cross_norm", d, rng);
      layer.cross_attn = attention_block(p + ".cross_attn", rng);
      layer.ff_norm = norm(p + ".ff_norm", d, rng);
      layer.ff = feed_forward_block(p + ".ff", rng);
      decoder_.push_back(layer);
    }
    decoder_norm_ = norm("decoder.final_norm", d, rng);
    if (config_.span_head) {
      span_start_ = param("span_head.start", {d, 1}, rng, kInitStd);
      span_end_ = param("span_head.end", {d, 1}, rng, kInitStd);
    }
  }

  static constexpr double kInitStd = 0.02;

  ModelConfig config_;
  std::vector<std::pair<std::string, TensorT>> named_;
  TensorT token_embedding_;
  TensorT encoder_positions_;
  TensorT decoder_positions_;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  TensorT span_start_;
  TensorT span_end_;
  bool training_ = false;
  mutable Rng dropout_rng_;
};

// Best (start, end) with start <= end inside [context_begin, context_end),
// maximizing start_logits[s] + end_logits[e]. Ties go to the pair with the
// smallest end, then the smallest start.
template <typename T>
std::pair<std::size_t, std::size_t> predict_span(std::span<const T> start_logits,
                                                 std::span<const T> end_logits,
                                                 std::size_t context_begin,
                                                 std::size_t context_end) {
  if (start_logits.size() != end_logits.size()) {
    throw DimensionError("predict_span: start/end logit lengths differ");
  }
  context_end = std::min(context_end, start_logits.size());
  if (context_begin >= context_end) {
    throw ContractError("predict_span: empty context segment");
  }
  // Running best start for each end keeps this linear.
  std::size_t best_s = context_begin, best_e = context_begin;
  T best = start_logits[context_begin] + end_logits[context_begin];
  std::size_t arg_start = context_begin;
  for (std::size_t e = context_begin; e < context_end; ++e) {
    if (start_logits[e] > start_logits[arg_start]) arg_start = e;
    const T score = start_logits[arg_start] + end_logits[e];
    if (score > best) {
      best = score;
      best_s = arg_start;
      best_e = e;
    }
  }
  return {best_s, best_e};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Binary layout, little-endian:
//   char[8]  magic "FSQACKPT"
//   u32      format version (1)
//   u32      byte length L of the config JSON, then L bytes of JSON
//   u32      tensor count
//   per tensor:
//     u32 name length, name bytes
//     u8  element type (1 = float32, 2 = float64)
//     u32 rank, then rank x u64 dimensions
//     raw element bytes
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'Q', 'A',
                                             'C', 'K', 'P', 'T'};

template <typename U>
void write_pod(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U read_pod(std::istream& in, const std::string& path) {
  U v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError("truncated checkpoint " + path);
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Seq2SeqModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(detail::kCheckpointMagic, 8);
  detail::write_pod<std::uint32_t>(out, 1);
  const std::string cfg = nlohmann::json(model.config()).dump();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto& params = model.named_parameters();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint8_t>(out, detail::dtype_code<T>());
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto dim : t.shape()) detail::write_pod<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline ModelConfig read_checkpoint_config(std::istream& in,
                                          const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw FormatError(path + " is not an fsqa checkpoint");
  }
  const auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != 1) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = detail::read_pod<std::uint32_t>(in, path);
  std::string cfg(len, '\0');
  in.read(cfg.data(), len);
  if (!in) throw FormatError("truncated checkpoint " + path);
  try {
    return nlohmann::json::parse(cfg).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad config in checkpoint " + path + ": " + e.what());
  }
}

template <typename T>
Seq2SeqModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const ModelConfig config = read_checkpoint_config(in, path);
  auto model = Seq2SeqModel<T>::create(config, 0);
  const auto count = detail::read_pod<std::uint32_t>(in, path);
  if (count != model.named_parameters().size()) {
    throw FormatError("checkpoint " + path + " holds " + std::to_string(count) +
                      " tensors, config implies " +
                      std::to_string(model.named_parameters().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto dtype = detail::read_pod<std::uint8_t>(in, path);
    const auto rank = detail::read_pod<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& dim : shape) dim = detail::read_pod<std::uint64_t>(in, path);
    auto* dst = model.find_parameter(name);
    if (dst == nullptr || dst->shape() != shape) {
      throw FormatError("checkpoint tensor " + name + " " + shape_string(shape) +
                        " does not match the model");
    }
    auto values = dst->values();
    if (dtype == 1) {
      std::vector<float> buf(values.size());
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (std::size_t j = 0; j < buf.size(); ++j) values[j] = static_cast<T>(buf[j]);
    } else if (dtype == 2) {
      std::vector<double> buf(values.size());
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
      for (std::size_t j = 0; j < buf.size(); ++j) values[j] = static_cast<T>(buf[j]);
    } else {
      throw FormatError("unknown element type in checkpoint " + path);
    }
    if (!in) throw FormatError("truncated checkpoint " + path);
  }
  return model;
}

}  // namespace fsqa

#endif  // FSQA_MODEL_HPP
