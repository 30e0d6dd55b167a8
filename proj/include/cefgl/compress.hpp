#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cefgl/error.hpp"
#include "cefgl/linalg.hpp"
#include "cefgl/rng.hpp"

namespace cefgl {

// ---------------------------------------------------------------------------
// Norm-scaled sign/magnitude quantization.
//
// Each coordinate becomes sign_i and level_i = round(2^r |x_i| / ‖x‖₂), and
// decodes to ‖x‖₂ · sign_i · level_i / 2^r. Levels live in [0, 2^r]; the top
// level 2^r ("saturated") cannot be stored in an r-bit field, so the wire
// format lists saturated coordinates explicitly (at most one in deterministic
// mode).

enum class QuantMode { Deterministic, Stochastic };

struct QuantizedVector {
  std::size_t len = 0;
  unsigned bits = 0;
  double norm = 0.0;
  std::vector<std::uint8_t> signs;    // 1 = negative
  std::vector<std::uint64_t> levels;  // each in [0, 2^bits]

  bool operator==(const QuantizedVector&) const = default;
};

inline double l2_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline void check_bits(unsigned r) {
  if (r < 1 || r > 32) throw BadBits("quantize: bits must be in [1, 32], got " + std::to_string(r));
}

// `rng` is only consulted in stochastic mode.
inline QuantizedVector quantize(std::span<const double> x, unsigned r,
                                QuantMode mode = QuantMode::Deterministic, Rng* rng = nullptr) {
  check_bits(r);
  for (double v : x) {
    if (!std::isfinite(v)) throw NonFiniteInput("quantize: non-finite input");
  }
  const double norm = l2_norm(x);
  if (x.empty() || norm == 0.0) throw ZeroVector("quantize: vector has zero norm");
  if (mode == QuantMode::Stochastic && rng == nullptr) {
    throw std::invalid_argument("quantize: stochastic mode needs an RNG stream");
  }

  const double scale = std::ldexp(1.0, static_cast<int>(r));
  const auto top = static_cast<std::uint64_t>(scale);
  QuantizedVector q;
  q.len = x.size();
  q.bits = r;
  q.norm = norm;
  q.signs.resize(x.size());
  q.levels.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::min(scale, scale * std::abs(x[i]) / norm);
    std::uint64_t level;
    if (mode == QuantMode::Deterministic) {
      level = static_cast<std::uint64_t>(std::round(v));
    } else {
      const double fl = std::floor(v);
      level = static_cast<std::uint64_t>(fl) + (uniform01(*rng) < v - fl ? 1u : 0u);
    }
    level = std::min(level, top);
    q.levels[i] = level;
    q.signs[i] = (x[i] < 0.0 && level > 0) ? 1 : 0;
  }
  return q;
}

inline std::vector<double> dequantize(const QuantizedVector& q) {
  const double scale = std::ldexp(1.0, static_cast<int>(q.bits));
  std::vector<double> out(q.len);
  for (std::size_t i = 0; i < q.len; ++i) {
    const double mag = q.norm * (static_cast<double>(q.levels[i]) / scale);
    out[i] = q.signs[i] ? -mag : mag;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sparsification

struct SparseTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::pair<std::size_t, double>> entries;  // flat index, strictly increasing

  std::size_t nnz() const { return entries.size(); }
  bool operator==(const SparseTensor&) const = default;
};

inline Matrix to_dense(const SparseTensor& s) {
  Matrix m(s.rows, s.cols);
  for (const auto& [idx, v] : s.entries) m.data()[idx] = v;
  return m;
}

// Drops every entry with |v| < cut (and exact zeros).
inline SparseTensor sparsify_threshold(const Matrix& s, double cut) {
  if (!(cut >= 0.0)) throw std::invalid_argument("sparsify_threshold: cut must be >= 0");
  SparseTensor out{s.rows(), s.cols(), {}};
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = s.data()[i];
    if (v != 0.0 && std::abs(v) >= cut) out.entries.emplace_back(i, v);
  }
  return out;
}

// Keeps the k largest-magnitude non-zeros; ties go to the smaller flat index.
inline SparseTensor sparsify_topk(const Matrix& s, std::size_t k) {
  if (k > s.size()) throw std::invalid_argument("sparsify_topk: k exceeds element count");
  std::vector<std::size_t> nz;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.data()[i] != 0.0) nz.push_back(i);
  }
  const std::size_t keep = std::min(k, nz.size());
  auto by_magnitude = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(s.data()[a]), mb = std::abs(s.data()[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::partial_sort(nz.begin(), nz.begin() + static_cast<std::ptrdiff_t>(keep), nz.end(),
                    by_magnitude);
  nz.resize(keep);
  std::sort(nz.begin(), nz.end());
  SparseTensor out{s.rows(), s.cols(), {}};
  out.entries.reserve(keep);
  for (std::size_t i : nz) out.entries.emplace_back(i, s.data()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Payloads and wire format
//
//   header : "CFP1" | version u16 | scheme u8 | tensor count u16
//   tensor : name_len u16 | name bytes | rows u32 | cols u32 | body
//
// Bodies (little-endian throughout):
//   Dense            rows*cols f64
//   Quantized        0xFF (all-zero tensor) or a quantized segment
//   LowRankQuantized 0xFF (zero), 0x02 + quantized segment (vector bypass), or
//                    0x01 + rank u16 + quantized U (rows*rank) +
//                    quantized V (cols*rank) + rank f64 singular values
//
//   quantized segment: r u8 (bit 7 set when saturated levels follow) | norm f64 |
//                      [count u32 | count x index u32] | sign bits, LSB-first,
//                      padded to a byte | levels r bits each, LSB-first, padded
//                      to a byte (saturated coordinates store 0)

inline constexpr std::uint16_t kPayloadVersion = 1;
inline constexpr std::size_t kPayloadHeaderBytes = 4 + 2 + 1 + 2;
inline constexpr std::uint8_t kZeroMarker = 0xFF;
inline constexpr std::uint8_t kLowRankTag = 0x01;
inline constexpr std::uint8_t kVectorTag = 0x02;
inline constexpr std::uint8_t kSaturatedFlag = 0x80;

enum class Scheme : std::uint8_t { Dense = 0, Quantized = 1, LowRankQuantized = 2 };

struct DenseBody {
  std::vector<double> values;
  bool operator==(const DenseBody&) const = default;
};
struct QuantBody {
  QuantizedVector q;
  bool operator==(const QuantBody&) const = default;
};
struct LowRankBody {
  std::size_t rank = 0;
  QuantizedVector u;  // rows x rank, row-major
  QuantizedVector v;  // cols x rank, row-major
  std::vector<double> sigma;
  bool operator==(const LowRankBody&) const = default;
};
struct ZeroBody {
  bool operator==(const ZeroBody&) const = default;
};

using SegmentBody = std::variant<DenseBody, QuantBody, LowRankBody, ZeroBody>;

struct PayloadTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  SegmentBody body;
  bool operator==(const PayloadTensor&) const = default;
};

struct CompressedPayload {
  Scheme scheme = Scheme::Dense;
  std::vector<PayloadTensor> tensors;
  bool operator==(const CompressedPayload&) const = default;
};

struct EncodeOptions {
  Scheme scheme = Scheme::Dense;
  unsigned bits = 32;
  double tau_lowrank = 0.0;
  ThresholdMode threshold_mode = ThresholdMode::Relative;
  QuantMode quant_mode = QuantMode::Deterministic;
  Rng* rng = nullptr;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::uint8_t peek() const {
    need(1);
    return buf_[pos_];
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw MalformedPayload("payload truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

// Packs `width`-bit unsigned fields LSB-first.
inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint64_t> vals, unsigned width) {
  std::vector<std::uint8_t> out((vals.size() * width + 7) / 8, 0);
  std::size_t bit = 0;
  for (std::uint64_t v : vals) {
    for (unsigned b = 0; b < width; ++b, ++bit) {
      if ((v >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  return out;
}

inline std::vector<std::uint64_t> unpack_bits(std::span<const std::uint8_t> in, std::size_t count,
                                              unsigned width) {
  std::vector<std::uint64_t> out(count, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < count; ++i) {
    for (unsigned b = 0; b < width; ++b, ++bit) {
      if ((in[bit / 8] >> (bit % 8)) & 1u) out[i] |= std::uint64_t{1} << b;
    }
  }
  return out;
}

inline std::vector<std::size_t> saturated_indices(const QuantizedVector& q) {
  const std::uint64_t top = std::uint64_t{1} << q.bits;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < q.len; ++i) {
    if (q.levels[i] == top) idx.push_back(i);
  }
  return idx;
}

inline std::size_t quant_segment_bytes(const QuantizedVector& q) {
  const std::size_t sat = saturated_indices(q).size();
  return 1 + 8 + (sat ? 4 + 4 * sat : 0) + (q.len + 7) / 8 + (q.len * q.bits + 7) / 8;
}

inline void write_quant(ByteWriter& w, const QuantizedVector& q) {
  const auto sat = saturated_indices(q);
  w.u8(static_cast<std::uint8_t>(q.bits | (sat.empty() ? 0u : kSaturatedFlag)));
  w.f64(q.norm);
  if (!sat.empty()) {
    w.u32(static_cast<std::uint32_t>(sat.size()));
    for (std::size_t i : sat) w.u32(static_cast<std::uint32_t>(i));
  }
  std::vector<std::uint64_t> signs(q.signs.begin(), q.signs.end());
  w.bytes(pack_bits(signs, 1));
  std::vector<std::uint64_t> fields = q.levels;
  for (std::size_t i : sat) fields[i] = 0;
  w.bytes(pack_bits(fields, q.bits));
}

inline QuantizedVector read_quant(ByteReader& r, std::size_t len) {
  const std::uint8_t head = r.u8();
  QuantizedVector q;
  q.len = len;
  q.bits = head & ~kSaturatedFlag;
  if (q.bits < 1 || q.bits > 32) throw MalformedPayload("quantized segment: bad bit width");
  q.norm = r.f64();
  if (!std::isfinite(q.norm) || q.norm < 0.0) throw MalformedPayload("quantized segment: bad norm");
  std::vector<std::size_t> sat;
  if (head & kSaturatedFlag) {
    const std::uint32_t count = r.u32();
    if (count == 0 || count > len) throw MalformedPayload("quantized segment: bad saturated count");
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t idx = r.u32();
      if (idx >= len) throw MalformedPayload("quantized segment: saturated index out of range");
      sat.push_back(idx);
    }
  }
  if (len > 8 * r.remaining()) throw MalformedPayload("payload truncated");
  auto signs = unpack_bits(r.bytes((len + 7) / 8), len, 1);
  q.signs.assign(signs.begin(), signs.end());
  q.levels = unpack_bits(r.bytes((len * q.bits + 7) / 8), len, q.bits);
  for (std::size_t i : sat) {
    if (q.levels[i] != 0) throw MalformedPayload("quantized segment: saturated slot not zero");
    q.levels[i] = std::uint64_t{1} << q.bits;
  }
  return q;
}

inline bool is_zero(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0; });
}

inline QuantizedVector quantize_with(std::span<const double> x, const EncodeOptions& opt) {
  return quantize(x, opt.bits, opt.quant_mode, opt.rng);
}

inline SegmentBody encode_body(const Matrix& m, const EncodeOptions& opt) {
  switch (opt.scheme) {
    case Scheme::Dense:
      return DenseBody{m.values()};
    case Scheme::Quantized:
      if (is_zero(m)) return ZeroBody{};
      return QuantBody{quantize_with(m.data(), opt)};
    case Scheme::LowRankQuantized: {
      if (is_zero(m)) return ZeroBody{};
      if (std::min(m.rows(), m.cols()) <= 1) return QuantBody{quantize_with(m.data(), opt)};
      const SvdResult s = svd(m);
      const std::size_t k = retained_rank(s, opt.threshold_mode, opt.tau_lowrank);
      if (k == 0) return ZeroBody{};
      std::vector<double> u(m.rows() * k), v(m.cols() * k);
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) u[i * k + j] = s.u(i, j);
      for (std::size_t i = 0; i < m.cols(); ++i)
        for (std::size_t j = 0; j < k; ++j) v[i * k + j] = s.v(i, j);
      return LowRankBody{k, quantize_with(u, opt), quantize_with(v, opt),
                         std::vector<double>(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(k))};
    }
  }
  throw std::invalid_argument("encode_body: unknown scheme");
}

inline Matrix decode_body(const PayloadTensor& t) {
  const std::size_t rows = t.rows, cols = t.cols;
  return std::visit(
      [&](const auto& body) -> Matrix {
        using B = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<B, DenseBody>) {
          return Matrix(rows, cols, body.values);
        } else if constexpr (std::is_same_v<B, QuantBody>) {
          return Matrix(rows, cols, dequantize(body.q));
        } else if constexpr (std::is_same_v<B, LowRankBody>) {
          const auto u = dequantize(body.u);
          const auto v = dequantize(body.v);
          const std::size_t k = body.rank;
          Matrix out(rows, cols);
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t i = 0; i < rows; ++i) {
              const double ui = body.sigma[j] * u[i * k + j];
              if (ui == 0.0) continue;
              for (std::size_t c = 0; c < cols; ++c) out(i, c) += ui * v[c * k + j];
            }
          }
          return out;
        } else {
          return Matrix(rows, cols);
        }
      },
      t.body);
}

}  // namespace detail

inline CompressedPayload encode_payload(std::span<const NamedMatrix> tensors, const EncodeOptions& opt) {
  if (opt.scheme != Scheme::Dense) check_bits(opt.bits);
  if (tensors.size() > 0xFFFF) throw std::invalid_argument("encode_payload: too many tensors");
  CompressedPayload p{opt.scheme, {}};
  p.tensors.reserve(tensors.size());
  for (const auto& t : tensors) {
    if (!all_finite(t.value)) throw NonFiniteInput("encode_payload: tensor '" + t.name + "' is not finite");
    if (t.name.size() > 0xFFFF) throw std::invalid_argument("encode_payload: name too long");
    p.tensors.push_back({t.name, static_cast<std::uint32_t>(t.value.rows()),
                         static_cast<std::uint32_t>(t.value.cols()), detail::encode_body(t.value, opt)});
  }
  return p;
}

inline std::vector<std::uint8_t> serialize(const CompressedPayload& p) {
  detail::ByteWriter w;
  for (char c : std::string_view("CFP1")) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kPayloadVersion);
  w.u8(static_cast<std::uint8_t>(p.scheme));
  w.u16(static_cast<std::uint16_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(t.name.data()), t.name.size()});
    w.u32(t.rows);
    w.u32(t.cols);
    std::visit(
        [&](const auto& body) {
          using B = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<B, DenseBody>) {
            for (double v : body.values) w.f64(v);
          } else if constexpr (std::is_same_v<B, QuantBody>) {
            if (p.scheme == Scheme::LowRankQuantized) w.u8(kVectorTag);
            detail::write_quant(w, body.q);
          } else if constexpr (std::is_same_v<B, LowRankBody>) {
            w.u8(kLowRankTag);
            w.u16(static_cast<std::uint16_t>(body.rank));
            detail::write_quant(w, body.u);
            detail::write_quant(w, body.v);
            for (double s : body.sigma) w.f64(s);
          } else {
            w.u8(kZeroMarker);
          }
        },
        t.body);
  }
  return w.take();
}

inline CompressedPayload parse_payload(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), "CFP1", 4) != 0) throw MalformedPayload("bad magic");
  const std::uint16_t version = r.u16();
  if (version != kPayloadVersion) {
    throw MalformedPayload("unsupported payload version " + std::to_string(version));
  }
  const std::uint8_t scheme_byte = r.u8();
  if (scheme_byte > 2) throw MalformedPayload("unknown scheme " + std::to_string(scheme_byte));
  CompressedPayload p{static_cast<Scheme>(scheme_byte), {}};
  const std::uint16_t count = r.u16();
  for (std::uint16_t n = 0; n < count; ++n) {
    PayloadTensor t;
    const std::uint16_t name_len = r.u16();
    auto name = r.bytes(name_len);
    t.name.assign(name.begin(), name.end());
    t.rows = r.u32();
    t.cols = r.u32();
    const std::size_t len = static_cast<std::size_t>(t.rows) * t.cols;
    switch (p.scheme) {
      case Scheme::Dense: {
        DenseBody b;
        if (len > r.remaining() / 8) throw MalformedPayload("payload truncated");
        b.values.resize(len);
        for (auto& v : b.values) v = r.f64();
        t.body = std::move(b);
        break;
      }
      case Scheme::Quantized:
        if (r.peek() == kZeroMarker) {
          r.u8();
          t.body = ZeroBody{};
        } else {
          t.body = QuantBody{detail::read_quant(r, len)};
        }
        break;
      case Scheme::LowRankQuantized: {
        const std::uint8_t tag = r.u8();
        if (tag == kZeroMarker) {
          t.body = ZeroBody{};
        } else if (tag == kVectorTag) {
          t.body = QuantBody{detail::read_quant(r, len)};
        } else if (tag == kLowRankTag) {
          LowRankBody b;
          b.rank = r.u16();
          if (b.rank == 0 || b.rank > std::min(t.rows, t.cols)) {
            throw MalformedPayload("low-rank segment: bad rank");
          }
          b.u = detail::read_quant(r, t.rows * b.rank);
          b.v = detail::read_quant(r, t.cols * b.rank);
          b.sigma.resize(b.rank);
          for (auto& s : b.sigma) s = r.f64();
          t.body = std::move(b);
        } else {
          throw MalformedPayload("low-rank segment: unknown tag");
        }
        break;
      }
    }
    p.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw MalformedPayload("trailing bytes after payload");
  return p;
}

inline std::vector<NamedMatrix> decode_payload(const CompressedPayload& p) {
  std::vector<NamedMatrix> out;
  out.reserve(p.tensors.size());
  for (const auto& t : p.tensors) out.push_back({t.name, detail::decode_body(t)});
  return out;
}

inline std::vector<NamedMatrix> decode_payload(std::span<const std::uint8_t> bytes) {
  return decode_payload(parse_payload(bytes));
}

// Exact serialized size in bits, computed from the layout rather than by
// serializing.
inline std::uint64_t payload_bits(const CompressedPayload& p) {
  std::uint64_t bytes = kPayloadHeaderBytes;
  for (const auto& t : p.tensors) {
    bytes += 2 + t.name.size() + 4 + 4;
    bytes += std::visit(
        [&](const auto& body) -> std::uint64_t {
          using B = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<B, DenseBody>) {
            return 8 * body.values.size();
          } else if constexpr (std::is_same_v<B, QuantBody>) {
            return (p.scheme == Scheme::LowRankQuantized ? 1 : 0) + detail::quant_segment_bytes(body.q);
          } else if constexpr (std::is_same_v<B, LowRankBody>) {
            return 1 + 2 + detail::quant_segment_bytes(body.u) + detail::quant_segment_bytes(body.v) +
                   8 * body.sigma.size();
          } else {
            return 1;
          }
        },
        t.body);
  }
  return 8 * bytes;
}

}  // namespace cefgl
