#include "neuroadapt/model.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>

#include "neuroadapt/hash.hpp"

namespace neuroadapt {

// ------------------------------------------------------------------ batch

void WindowBatch::validate() const {
  const std::size_t n = record_ids.size();
  if (data.size() != n * window_size()) {
    throw ShapeError("window batch holds " + std::to_string(data.size()) + " values, expected " +
                     std::to_string(n) + " x " + std::to_string(channels) + " x " +
                     std::to_string(samples));
  }
  if (subject_ids.size() != n) throw ShapeError("window batch: subject id count != record count");
  if (labels && labels->size() != n) throw ShapeError("window batch: label count != record count");
}

UnlabeledBatch strip_labels(WindowBatch batch) {
  batch.validate();
  UnlabeledBatch out;
  out.channels_ = batch.channels;
  out.samples_ = batch.samples;
  out.data_ = std::move(batch.data);
  out.record_ids_ = std::move(batch.record_ids);
  return out;
}

// ---------------------------------------------------------------- encoder

const char* to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::identity: return "identity";
    case EncoderKind::random_projection: return "frozen_random_projection";
    case EncoderKind::two_layer: return "frozen_two_layer";
  }
  return "?";
}

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "identity") return EncoderKind::identity;
  if (s == "frozen_random_projection" || s == "random_projection") return EncoderKind::random_projection;
  if (s == "frozen_two_layer" || s == "two_layer") return EncoderKind::two_layer;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

std::size_t EncoderSpec::feature_dim() const {
  return kind == EncoderKind::identity ? input_size() : out_dim;
}

void EncoderSpec::validate() const {
  if (channels == 0 || samples == 0) throw ConfigError("encoder: input shape must be nonzero");
  if (kind != EncoderKind::identity && out_dim == 0) throw ConfigError("encoder: out_dim must be >= 1");
  if (kind == EncoderKind::two_layer) {
    if (hidden == 0) throw ConfigError("encoder: two_layer needs hidden >= 1");
    const std::size_t p = patch == 0 ? samples : patch;
    if (samples % p != 0) {
      throw ConfigError("encoder: patch " + std::to_string(p) + " does not divide " +
                        std::to_string(samples) + " samples");
    }
  }
}

namespace {

Matrix gaussian_matrix(std::uint64_t seed, std::string_view tag, std::size_t rows, std::size_t cols,
                       double scale) {
  Rng rng = Rng::derive(seed, tag);
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = static_cast<float>(rng.normal() * scale);
  return m;
}

std::vector<float> gaussian_vector(std::uint64_t seed, std::string_view tag, std::size_t n,
                                   double scale) {
  Rng rng = Rng::derive(seed, tag);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
  return v;
}

}  // namespace

Encoder::Encoder(EncoderSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const std::size_t in = spec_.input_size();
  switch (spec_.kind) {
    case EncoderKind::identity:
      break;
    case EncoderKind::random_projection:
      proj_ = gaussian_matrix(spec_.seed, "encoder.proj", in, spec_.out_dim,
                              1.0 / std::sqrt(static_cast<double>(in)));
      break;
    case EncoderKind::two_layer: {
      const std::size_t p = spec_.patch == 0 ? spec_.samples : spec_.patch;
      const std::size_t tok = spec_.channels * p;
      w1_ = gaussian_matrix(spec_.seed, "encoder.w1", tok, spec_.hidden,
                            1.0 / std::sqrt(static_cast<double>(tok)));
      b1_ = gaussian_vector(spec_.seed, "encoder.b1", spec_.hidden, 0.1);
      w2_ = gaussian_matrix(spec_.seed, "encoder.w2", spec_.hidden, spec_.out_dim,
                            1.0 / std::sqrt(static_cast<double>(spec_.hidden)));
      b2_ = gaussian_vector(spec_.seed, "encoder.b2", spec_.out_dim, 0.1);
      break;
    }
  }
}

void Encoder::encode_one(std::span<const float> window, std::span<float> out) const {
  switch (spec_.kind) {
    case EncoderKind::identity:
      std::copy(window.begin(), window.end(), out.begin());
      return;
    case EncoderKind::random_projection: {
      std::fill(out.begin(), out.end(), 0.0f);
      for (std::size_t i = 0; i < window.size(); ++i) {
        auto pr = proj_.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += window[i] * pr[j];
      }
      return;
    }
    case EncoderKind::two_layer: {
      // Non-overlapping patches along time become tokens; token outputs are
      // mean-pooled into one feature vector.
      const std::size_t C = spec_.channels, T = spec_.samples;
      const std::size_t P = spec_.patch == 0 ? T : spec_.patch;
      const std::size_t n_tok = T / P;
      std::vector<std::vector<float>> tokens;
      tokens.reserve(n_tok);
      std::vector<float> hidden(spec_.hidden);
      for (std::size_t t = 0; t < n_tok; ++t) {
        hidden.assign(b1_.begin(), b1_.end());
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t s = 0; s < P; ++s) {
            const float x = window[c * T + t * P + s];
            if (x == 0.0f) continue;
            auto wr = w1_.row(c * P + s);
            for (std::size_t h = 0; h < hidden.size(); ++h) hidden[h] += x * wr[h];
          }
        }
        std::vector<float> o(b2_);
        for (std::size_t h = 0; h < hidden.size(); ++h) {
          const float a = gelu(hidden[h]);
          auto wr = w2_.row(h);
          for (std::size_t j = 0; j < o.size(); ++j) o[j] += a * wr[j];
        }
        tokens.push_back(std::move(o));
      }
      auto pooled = mean_pool(tokens);
      std::copy(pooled.begin(), pooled.end(), out.begin());
      return;
    }
  }
}

Matrix Encoder::encode_windows(std::span<const float> windows, std::size_t count) const {
  const std::size_t in = spec_.input_size();
  if (windows.size() != count * in) {
    throw ShapeError("encoder '" + spec_.name + "': expected " + std::to_string(count) + " windows of " +
                     std::to_string(spec_.channels) + "x" + std::to_string(spec_.samples) + " (" +
                     std::to_string(count * in) + " values), got " + std::to_string(windows.size()));
  }
  Matrix z(count, feature_dim());
  for (std::size_t i = 0; i < count; ++i) encode_one(windows.subspan(i * in, in), z.row(i));
  return z;
}

FeatureBatch Encoder::encode(const WindowBatch& batch) const {
  if (batch.channels != spec_.channels || batch.samples != spec_.samples) {
    throw ShapeError("encoder '" + spec_.name + "': expected input " +
                     shape_str(spec_.channels, spec_.samples) + ", got " +
                     shape_str(batch.channels, batch.samples));
  }
  return {encode_windows(batch.data, batch.size()), spec_.name, batch.record_ids};
}

FeatureBatch Encoder::encode(const UnlabeledBatch& batch) const {
  if (batch.channels() != spec_.channels || batch.samples() != spec_.samples) {
    throw ShapeError("encoder '" + spec_.name + "': expected input " +
                     shape_str(spec_.channels, spec_.samples) + ", got " +
                     shape_str(batch.channels(), batch.samples()));
  }
  return {encode_windows(batch.data(), batch.size()), spec_.name, batch.record_ids()};
}

std::uint64_t Encoder::hash() const {
  Fnv1a h;
  h.text(to_string(spec_.kind))
      .u64(spec_.channels)
      .u64(spec_.samples)
      .u64(spec_.out_dim)
      .u64(spec_.hidden)
      .u64(spec_.patch)
      .u64(spec_.seed);
  h.floats(proj_.data()).floats(w1_.data()).floats(b1_).floats(w2_.data()).floats(b2_);
  return h.value();
}

std::vector<float> mean_pool(std::span<const std::vector<float>> seq) {
  if (seq.empty()) throw ContractError("mean_pool: empty sequence");
  const std::size_t D = seq.front().size();
  std::vector<double> acc(D, 0.0);
  for (const auto& v : seq) {
    if (v.size() != D) throw ShapeError("mean_pool: ragged sequence");
    for (std::size_t j = 0; j < D; ++j) acc[j] += v[j];
  }
  std::vector<float> out(D);
  const double n = static_cast<double>(seq.size());
  for (std::size_t j = 0; j < D; ++j) out[j] = static_cast<float>(acc[j] / n);
  return out;
}

// -------------------------------------------------------------------- head

HeadParams init_head(std::size_t input_dim, std::size_t num_classes, Rng& rng, std::size_t hidden,
                     double dropout) {
  if (input_dim == 0 || hidden == 0 || num_classes < 2) {
    throw ConfigError("init_head: need D >= 1, hidden >= 1, K >= 2");
  }
  HeadParams p;
  p.ln_gamma.assign(input_dim, 1.0f);
  p.ln_beta.assign(input_dim, 0.0f);
  auto uniform_fill = [&rng](std::span<float> v, double bound) {
    for (auto& x : v) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  };
  const double b1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.w1 = Matrix(input_dim, hidden);
  p.b1.resize(hidden);
  p.w2 = Matrix(hidden, num_classes);
  p.b2.resize(num_classes);
  uniform_fill(p.w1.data(), b1);
  uniform_fill(p.b1, b1);
  uniform_fill(p.w2.data(), b2);
  uniform_fill(p.b2, b2);
  p.dropout_rate = dropout;
  p.validate();
  return p;
}

const char* to_string(ParamSubset s) {
  switch (s) {
    case ParamSubset::all_head: return "all_head";
    case ParamSubset::norm_affine_only: return "norm_affine_only";
    case ParamSubset::adapter_only: return "adapter_only";
    case ParamSubset::none: return "none";
  }
  return "?";
}

namespace {

template <typename P, typename Span>
std::vector<Span> blocks_impl(P& p, ParamSubset subset) {
  std::vector<Span> out;
  if (subset == ParamSubset::none) return out;
  out.push_back(Span(p.ln_gamma));
  out.push_back(Span(p.ln_beta));
  if (subset == ParamSubset::norm_affine_only) return out;
  out.push_back(p.w1.data());
  out.push_back(Span(p.b1));
  if (subset == ParamSubset::adapter_only) return out;
  out.push_back(p.w2.data());
  out.push_back(Span(p.b2));
  return out;
}

}  // namespace

std::vector<std::span<float>> param_blocks(HeadParams& p, ParamSubset subset) {
  return blocks_impl<HeadParams, std::span<float>>(p, subset);
}

std::vector<std::span<const float>> param_blocks(const HeadParams& p, ParamSubset subset) {
  return blocks_impl<const HeadParams, std::span<const float>>(p, subset);
}

std::uint64_t hash_head(const HeadParams& p) {
  Fnv1a h;
  for (auto b : param_blocks(p, ParamSubset::all_head)) h.floats(b);
  return h.value();
}

std::uint64_t hash_classifier(const HeadParams& p) {
  return Fnv1a{}.floats(p.w2.data()).floats(p.b2).value();
}

std::uint64_t hash_non_norm(const HeadParams& p) {
  return Fnv1a{}.floats(p.w1.data()).floats(p.b1).floats(p.w2.data()).floats(p.b2).value();
}

Matrix predict_proba(const HeadParams& head, const Matrix& features) {
  return softmax(head_forward(head, features, HeadMode::eval()).logits);
}

Matrix predict_proba(const HeadParams& head, const Encoder& encoder, const WindowBatch& batch) {
  return predict_proba(head, encoder.encode(batch).z);
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kCheckpointMagic[4] = {'N', 'A', 'C', 'K'};

class ByteWriter {
 public:
  void raw(const char* s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(s[i]));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > in_.size()) {
      throw IoError(std::string("checkpoint truncated reading ") + what + ": need " +
                    std::to_string(pos_ + n) + " bytes, have " + std::to_string(in_.size()));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  void floats(std::span<float> out, const char* what) {
    need(4 * out.size(), what);
    for (auto& x : out) x = f32(what);
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const HeadParams& p = ckpt.head;
  p.validate();
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(p.input_dim()));
  w.u32(static_cast<std::uint32_t>(p.num_classes()));
  w.u32(static_cast<std::uint32_t>(p.hidden_dim()));
  w.f32(static_cast<float>(p.dropout_rate));
  w.u64(ckpt.encoder_hash);
  for (auto b : param_blocks(p, ParamSubset::all_head)) w.floats(b);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint: bad magic");
  }
  ByteReader r(bytes.subspan(4));
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::size_t D = r.u32("D"), K = r.u32("K"), H = r.u32("hidden");
  Checkpoint c;
  {
    // Shortest decimal of the stored float, so 0.1 reads back as 0.1.
    const float d = r.f32("dropout");
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof buf, d).ptr;
    std::from_chars(buf, end, c.head.dropout_rate);
  }
  c.encoder_hash = r.u64("encoder hash");
  const std::size_t expected = 4 * (2 * D + D * H + H + H * K + K);
  if (r.remaining() != expected) {
    throw IoError("checkpoint: parameter section is " + std::to_string(r.remaining()) +
                  " bytes, expected " + std::to_string(expected));
  }
  c.head.ln_gamma.resize(D);
  c.head.ln_beta.resize(D);
  c.head.w1 = Matrix(D, H);
  c.head.b1.resize(H);
  c.head.w2 = Matrix(H, K);
  c.head.b2.resize(K);
  for (auto b : param_blocks(c.head, ParamSubset::all_head)) r.floats(b, "parameters");
  c.head.validate();
  return c;
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
  return Fnv1a{}.bytes(serialize_checkpoint(ckpt)).value();
}

}  // namespace neuroadapt
