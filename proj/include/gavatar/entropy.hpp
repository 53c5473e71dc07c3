#pragma once

// Binary range coder with count-based adaptive contexts, plus the
// exp-Golomb binarization used by the frame and canonical coders.
//
// The carry handling follows the LZMA range coder. Its always-zero lead byte
// is dropped, so flushing costs exactly 4 bytes.

#include <gavatar/common.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace gavatar {

inline constexpr uint32_t kCountLimit = 1024;

// Adaptive probability state: counts of zeros and ones seen so far, both
// starting at 1 and halved once their sum reaches kCountLimit.
struct BitContext {
  uint32_t c0 = 1;
  uint32_t c1 = 1;

  void update(int bit) {
    (bit ? c1 : c0) += 1;
    if (c0 + c1 >= kCountLimit) {
      c0 = (c0 + 1) / 2;
      c1 = (c1 + 1) / 2;
    }
  }
  // Share of the range given to a zero. Never 0 or the full range because
  // range >= 2^24 while c0, c1 >= 1 and the total stays below 2^11.
  uint32_t split(uint32_t range) const {
    return static_cast<uint32_t>(static_cast<uint64_t>(range) * c0 / (c0 + c1));
  }
};

namespace detail {
inline constexpr uint32_t kTop = 1u << 24;
}

class RangeEncoder {
 public:
  void encode(int bit, BitContext& ctx) {
    const uint32_t bound = ctx.split(range_);
    if (bit) {
      low_ += bound;
      range_ -= bound;
    } else {
      range_ = bound;
    }
    ctx.update(bit);
    normalize();
  }

  void encode_bypass(int bit) {
    range_ >>= 1;
    if (bit) low_ += range_;
    normalize();
  }

  // Most significant bit first.
  void encode_bits(uint32_t value, int count) {
    for (int i = count - 1; i >= 0; --i) encode_bypass(static_cast<int>((value >> i) & 1u));
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    std::vector<uint8_t> out = std::move(out_);
    out.erase(out.begin());  // lead byte is always zero
    *this = RangeEncoder{};
    return out;
  }

 private:
  void normalize() {
    while (range_ < detail::kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  void shift_low() {
    if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<uint8_t>(low_ >> 32);
      uint8_t temp = cache_;
      do {
        out_.push_back(static_cast<uint8_t>(temp + carry));
        temp = 0xFF;
      } while (--pending_ != 0);
      cache_ = static_cast<uint8_t>(low_ >> 24);
    }
    ++pending_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
  }

  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  uint64_t pending_ = 1;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const uint8_t> data) : data_(data) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next();
  }

  int decode(BitContext& ctx) {
    const uint32_t bound = ctx.split(range_);
    int bit;
    if (code_ < bound) {
      range_ = bound;
      bit = 0;
    } else {
      code_ -= bound;
      range_ -= bound;
      bit = 1;
    }
    ctx.update(bit);
    normalize();
    return bit;
  }

  int decode_bypass() {
    range_ >>= 1;
    int bit = 0;
    if (code_ >= range_) {
      code_ -= range_;
      bit = 1;
    }
    normalize();
    return bit;
  }

  uint32_t decode_bits(int count) {
    uint32_t v = 0;
    for (int i = 0; i < count; ++i) v = (v << 1) | static_cast<uint32_t>(decode_bypass());
    return v;
  }

  // Bytes consumed so far; equals the stream length once every symbol of a
  // well-formed stream has been decoded.
  size_t position() const { return pos_; }
  size_t size() const { return data_.size(); }

 private:
  uint32_t next() {
    if (pos_ >= data_.size()) throw CorruptionError("arithmetic decoder ran past the end of the payload");
    return data_[pos_++];
  }
  void normalize() {
    while (range_ < detail::kTop) {
      range_ <<= 8;
      code_ = (code_ << 8) | next();
    }
  }

  std::span<const uint8_t> data_;
  size_t pos_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// ---------------------------------------------------------------------------
// Exp-Golomb (order 0) magnitude + sign, every bin context coded. Prefix and
// suffix bins have their own context per bin position.

inline constexpr int kMaxGolombBins = 25;

struct GolombContexts {
  std::array<BitContext, kMaxGolombBins> prefix{};
  std::array<BitContext, kMaxGolombBins> suffix{};
  BitContext sign{};
};

inline void encode_golomb(RangeEncoder& enc, GolombContexts& ctx, uint32_t magnitude) {
  const uint64_t v = static_cast<uint64_t>(magnitude) + 1;
  const int k = std::bit_width(v) - 1;
  for (int i = 0; i < k; ++i) enc.encode(1, ctx.prefix[static_cast<size_t>(std::min(i, kMaxGolombBins - 1))]);
  if (k < 32) enc.encode(0, ctx.prefix[static_cast<size_t>(std::min(k, kMaxGolombBins - 1))]);
  for (int i = k - 1; i >= 0; --i)
    enc.encode(static_cast<int>((v >> i) & 1u), ctx.suffix[static_cast<size_t>(std::min(i, kMaxGolombBins - 1))]);
}

inline uint32_t decode_golomb(RangeDecoder& dec, GolombContexts& ctx) {
  int k = 0;
  while (k < 32 && dec.decode(ctx.prefix[static_cast<size_t>(std::min(k, kMaxGolombBins - 1))])) ++k;
  uint64_t v = 1;
  for (int i = k - 1; i >= 0; --i)
    v = (v << 1) | static_cast<uint64_t>(dec.decode(ctx.suffix[static_cast<size_t>(std::min(i, kMaxGolombBins - 1))]));
  if (v - 1 > 0xFFFFFFFFull) throw CorruptionError("exp-Golomb value out of range");
  return static_cast<uint32_t>(v - 1);
}

inline void encode_signed(RangeEncoder& enc, GolombContexts& ctx, int64_t value) {
  encode_golomb(enc, ctx, static_cast<uint32_t>(value < 0 ? -value : value));
  if (value != 0) enc.encode(value < 0 ? 1 : 0, ctx.sign);
}

inline int64_t decode_signed(RangeDecoder& dec, GolombContexts& ctx) {
  const int64_t m = decode_golomb(dec, ctx);
  if (m == 0) return 0;
  return dec.decode(ctx.sign) ? -m : m;
}

}  // namespace gavatar
