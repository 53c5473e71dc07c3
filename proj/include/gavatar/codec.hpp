#pragma once

// Quantization, per-frame parameter coding, canonical avatar coding and the
// GAVC stream container.

#include <gavatar/avatar.hpp>
#include <gavatar/entropy.hpp>

#include <numeric>
#include <optional>

namespace gavatar {

// ---------------------------------------------------------------------------
// Quantizer: uniform mid-rise over [lo, hi] with 2^bits bins, clamped.

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 24;

inline uint32_t quantize(double x, double lo, double hi, int bits) {
  const double levels = std::ldexp(1.0, bits);
  const double t = (x - lo) / (hi - lo) * levels;
  if (!(t > 0)) return 0;  // also catches NaN
  if (t >= levels) return static_cast<uint32_t>(levels) - 1;
  return static_cast<uint32_t>(std::floor(t));
}

inline double dequantize(uint32_t q, double lo, double hi, int bits) {
  return lo + (static_cast<double>(q) + 0.5) * (hi - lo) / std::ldexp(1.0, bits);
}

inline double quant_step(double lo, double hi, int bits) { return (hi - lo) / std::ldexp(1.0, bits); }

struct QuantRange {
  float lo = 0;
  float hi = 1;
  bool operator==(const QuantRange&) const = default;
};

// Ranges are floats so that the container echo is exact.
struct QuantConfig {
  int theta_bits = 12;
  int beta_bits = 10;
  int rot_bits = 14;
  int trans_bits = 16;
  int position_bits = 14;
  int scale_bits = 10;
  int quat_bits = 10;
  int opacity_bits = 8;
  int sh_bits = 8;
  QuantRange theta{static_cast<float>(-kPi), static_cast<float>(kPi)};
  QuantRange beta{-3.0f, 3.0f};
  QuantRange trans{-10.0f, 10.0f};
  QuantRange scale{-12.0f, 2.5f};
  QuantRange opacity{-8.0f, 8.0f};
  QuantRange sh{-2.0f, 2.0f};

  void validate() const {
    for (int b : {theta_bits, beta_bits, rot_bits, trans_bits, position_bits, scale_bits, quat_bits, opacity_bits,
                  sh_bits})
      if (b < kMinBits || b > kMaxBits) throw ConfigError("quant config: bit depth outside [2, 24]");
    for (const QuantRange& r : {theta, beta, trans, scale, opacity, sh})
      if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || !(r.hi > r.lo))
        throw ConfigError("quant config: range must be finite with max > min");
  }

  bool operator==(const QuantConfig&) const = default;
};

inline constexpr int kProfileCount = 4;

// qp0 is the coarsest rate point, qp3 the finest (and the default config).
inline QuantConfig quant_profile(int qp) {
  static constexpr int depths[kProfileCount][5] = {
      {10, 6, 6, 5, 5}, {11, 7, 7, 6, 6}, {12, 8, 8, 7, 7}, {14, 10, 10, 8, 8}};
  if (qp < 0 || qp >= kProfileCount) throw ConfigError("quant profile must be 0..3");
  QuantConfig q;
  q.position_bits = depths[qp][0];
  q.scale_bits = depths[qp][1];
  q.quat_bits = depths[qp][2];
  q.opacity_bits = depths[qp][3];
  q.sh_bits = depths[qp][4];
  return q;
}

inline constexpr size_t kQuantBlockSize = 64;

inline void write_quant_block(ByteWriter& w, const QuantConfig& q) {
  const size_t start = w.size();
  for (int b : {q.theta_bits, q.beta_bits, q.rot_bits, q.trans_bits, q.position_bits, q.scale_bits, q.quat_bits,
                q.opacity_bits, q.sh_bits})
    w.u8(static_cast<uint8_t>(b));
  w.u8(16);  // skin weight precision
  w.u16(0);
  for (const QuantRange& r : {q.theta, q.beta, q.trans, q.scale, q.opacity, q.sh}) {
    w.f32(r.lo);
    w.f32(r.hi);
  }
  while (w.size() - start < kQuantBlockSize) w.u8(0);
}

inline QuantConfig read_quant_block(ByteReader& r) {
  const size_t start = r.position();
  QuantConfig q;
  for (int* b : {&q.theta_bits, &q.beta_bits, &q.rot_bits, &q.trans_bits, &q.position_bits, &q.scale_bits,
                 &q.quat_bits, &q.opacity_bits, &q.sh_bits})
    *b = r.u8();
  if (r.u8() != 16) throw CorruptionError("quant block: unsupported skin weight precision");
  r.u16();
  for (QuantRange* range : {&q.theta, &q.beta, &q.trans, &q.scale, &q.opacity, &q.sh}) {
    range->lo = r.f32();
    range->hi = r.f32();
  }
  r.raw(kQuantBlockSize - (r.position() - start));
  try {
    q.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("quant block: ") + e.what());
  }
  return q;
}

// ---------------------------------------------------------------------------
// Shared helpers for delta coding of quantized indices.

namespace detail {

// Difference a - b wrapped into [-2^(bits-1), 2^(bits-1)).
inline int64_t wrap_delta(uint32_t a, uint32_t b, int bits) {
  const int64_t m = int64_t{1} << bits;
  int64_t d = (static_cast<int64_t>(a) - static_cast<int64_t>(b)) % m;
  if (d < -(m / 2)) d += m;
  if (d >= m / 2) d -= m;
  return d;
}

inline uint32_t apply_delta(uint32_t base, int64_t d, int bits) {
  const int64_t m = int64_t{1} << bits;
  if (d < -(m / 2) || d >= m / 2) throw CorruptionError("delta outside the coded range");
  return static_cast<uint32_t>(((static_cast<int64_t>(base) + d) % m + m) % m);
}

inline uint32_t midpoint(int bits) { return 1u << (bits - 1); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-frame parameters: theta | beta | R (row-major) | T.

enum class FrameGroup : uint8_t { Theta = 0, Beta = 1, Rotation = 2, Translation = 3 };

struct FrameSlot {
  FrameGroup group;
  int bits;
  double lo, hi;
};

inline std::vector<FrameSlot> frame_layout(int pose_size, const QuantConfig& q) {
  std::vector<FrameSlot> out;
  for (int i = 0; i < pose_size; ++i) out.push_back({FrameGroup::Theta, q.theta_bits, q.theta.lo, q.theta.hi});
  for (int i = 0; i < kShapeCount; ++i) out.push_back({FrameGroup::Beta, q.beta_bits, q.beta.lo, q.beta.hi});
  for (int i = 0; i < 9; ++i) out.push_back({FrameGroup::Rotation, q.rot_bits, -1.0, 1.0});
  for (int i = 0; i < 3; ++i) out.push_back({FrameGroup::Translation, q.trans_bits, q.trans.lo, q.trans.hi});
  return out;
}

// Upper bound on a coded frame: 94 fixed-length values at the largest depth
// plus 64 bits of slack (mode flag and coder flush).
inline size_t raw_frame_bound_bits(int pose_size, const QuantConfig& q) {
  size_t bits = 0;
  for (const auto& s : frame_layout(pose_size, q)) bits = std::max(bits, static_cast<size_t>(s.bits));
  return static_cast<size_t>(pose_size + kShapeCount + 12) * bits + 64;
}

inline std::vector<uint32_t> quantize_frame(const FrameParams& fp, const QuantConfig& q) {
  FrameParams c = fp;
  // Axis-angle vectors are reduced to |theta| <= pi so they fit the range.
  for (Eigen::Index j = 0; j + 2 < c.theta.size(); j += 3) c.theta.segment<3>(j) = canonicalize_axis_angle(c.theta.segment<3>(j));
  const Eigen::VectorXd v = c.to_vector();
  const auto layout = frame_layout(static_cast<int>(fp.theta.size()), q);
  if (static_cast<size_t>(v.size()) != layout.size()) throw ShapeError("frame params: wrong value count");
  std::vector<uint32_t> out(layout.size());
  for (size_t i = 0; i < layout.size(); ++i)
    out[i] = quantize(v(static_cast<Eigen::Index>(i)), layout[i].lo, layout[i].hi, layout[i].bits);
  return out;
}

// Gram-Schmidt on the rows, third row from the cross product.
inline Mat3 orthonormalize_rows(const Mat3& m) {
  Vec3 r0 = m.row(0), r1 = m.row(1);
  if (r0.norm() < 1e-9) return Mat3::Identity();
  r0.normalize();
  r1 -= r1.dot(r0) * r0;
  if (r1.norm() < 1e-9) {
    r1 = std::abs(r0.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    r1 -= r1.dot(r0) * r0;
  }
  r1.normalize();
  Mat3 out;
  out.row(0) = r0;
  out.row(1) = r1;
  out.row(2) = r0.cross(r1);
  return out;
}

inline FrameParams dequantize_frame(std::span<const uint32_t> idx, const QuantConfig& q, int pose_size) {
  const auto layout = frame_layout(pose_size, q);
  if (idx.size() != layout.size()) throw ShapeError("frame indices: wrong value count");
  Eigen::VectorXd v(static_cast<Eigen::Index>(layout.size()));
  for (size_t i = 0; i < layout.size(); ++i) v(static_cast<Eigen::Index>(i)) = dequantize(idx[i], layout[i].lo, layout[i].hi, layout[i].bits);
  FrameParams fp = FrameParams::from_vector(v, pose_size);
  fp.rotation = orthonormalize_rows(fp.rotation);
  return fp;
}

namespace detail {

// Contexts are fresh for every frame so frames decode independently given
// the previous frame's parameters.
struct FrameContexts {
  std::array<GolombContexts, 4> group{};
};

}  // namespace detail

// Payload starts with a bypass flag: 0 = exp-Golomb bins, 1 = fixed-length
// raw deltas (chosen when smaller, which bounds the worst case).
inline std::vector<uint8_t> encode_frame_indices(std::span<const uint32_t> cur, std::optional<std::span<const uint32_t>> prev,
                                                 int pose_size, const QuantConfig& q) {
  const auto layout = frame_layout(pose_size, q);
  if (cur.size() != layout.size() || (prev && prev->size() != layout.size()))
    throw ShapeError("encode_frame: wrong value count");
  std::vector<int64_t> deltas(layout.size());
  for (size_t i = 0; i < layout.size(); ++i)
    deltas[i] = detail::wrap_delta(cur[i], prev ? (*prev)[i] : detail::midpoint(layout[i].bits), layout[i].bits);

  RangeEncoder coded;
  coded.encode_bypass(0);
  detail::FrameContexts ctx;
  for (size_t i = 0; i < layout.size(); ++i)
    encode_signed(coded, ctx.group[static_cast<size_t>(layout[i].group)], deltas[i]);
  std::vector<uint8_t> a = coded.finish();

  RangeEncoder raw;
  raw.encode_bypass(1);
  for (size_t i = 0; i < layout.size(); ++i) {
    const uint32_t mask = (1u << layout[i].bits) - 1;
    raw.encode_bits(static_cast<uint32_t>(deltas[i]) & mask, layout[i].bits);
  }
  std::vector<uint8_t> b = raw.finish();
  return a.size() <= b.size() ? a : b;
}

inline std::vector<uint32_t> decode_frame_indices(std::span<const uint8_t> bytes, std::optional<std::span<const uint32_t>> prev,
                                                  int pose_size, const QuantConfig& q) {
  const auto layout = frame_layout(pose_size, q);
  if (prev && prev->size() != layout.size()) throw ShapeError("decode_frame: wrong value count");
  RangeDecoder dec(bytes);
  const bool raw = dec.decode_bypass();
  detail::FrameContexts ctx;
  std::vector<uint32_t> out(layout.size());
  for (size_t i = 0; i < layout.size(); ++i) {
    const int bits = layout[i].bits;
    int64_t d;
    if (raw) {
      const uint32_t u = dec.decode_bits(bits);
      d = u >= (1u << (bits - 1)) ? static_cast<int64_t>(u) - (int64_t{1} << bits) : static_cast<int64_t>(u);
    } else {
      d = decode_signed(dec, ctx.group[static_cast<size_t>(layout[i].group)]);
    }
    out[i] = detail::apply_delta(prev ? (*prev)[i] : detail::midpoint(bits), d, bits);
  }
  if (dec.position() != dec.size()) throw CorruptionError("frame payload has trailing bytes");
  return out;
}

// prev must be the decoder-side reconstruction of the previous frame so that
// encoder and decoder predict from identical indices.
inline std::vector<uint8_t> encode_frame(const FrameParams& fp, const std::optional<FrameParams>& prev,
                                         const QuantConfig& q) {
  const int pose_size = static_cast<int>(fp.theta.size());
  const auto cur = quantize_frame(fp, q);
  if (!prev) return encode_frame_indices(cur, std::nullopt, pose_size, q);
  const auto p = quantize_frame(*prev, q);
  return encode_frame_indices(cur, std::span<const uint32_t>(p), pose_size, q);
}

inline FrameParams decode_frame(std::span<const uint8_t> bytes, const std::optional<FrameParams>& prev,
                                const QuantConfig& q, int pose_size) {
  std::vector<uint32_t> idx;
  if (prev) {
    const auto p = quantize_frame(*prev, q);
    idx = decode_frame_indices(bytes, std::span<const uint32_t>(p), pose_size, q);
  } else {
    idx = decode_frame_indices(bytes, std::nullopt, pose_size, q);
  }
  return dequantize_frame(idx, q, pose_size);
}

inline std::vector<std::vector<uint8_t>> encode_frames(std::span<const FrameParams> frames, const QuantConfig& q) {
  std::vector<std::vector<uint8_t>> out;
  std::optional<FrameParams> prev;
  for (const auto& fp : frames) {
    out.push_back(encode_frame(fp, prev, q));
    prev = decode_frame(out.back(), prev, q, static_cast<int>(fp.theta.size()));
  }
  return out;
}

inline std::vector<FrameParams> decode_frames(std::span<const std::vector<uint8_t>> payloads, const QuantConfig& q,
                                              int pose_size) {
  std::vector<FrameParams> out;
  std::optional<FrameParams> prev;
  for (const auto& p : payloads) {
    prev = decode_frame(p, prev, q, pose_size);
    out.push_back(*prev);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical avatar payload:
//   N u32 | J u16 | sh_degree u8 | reserved u8 | AABB lo f32[3] hi f32[3] | coded bins
// Gaussians are coded in Morton order of their quantized positions, each
// attribute component delta-predicted from the previous Gaussian.

inline constexpr int kWeightBits = 16;

namespace detail {

inline int bits_for(uint32_t max_value) { return std::max(1, static_cast<int>(std::bit_width(max_value))); }

// Morton order without building the interleaved key: compare on the axis
// whose coordinates differ in the highest bit (z > y > x on ties).
inline bool morton_less(const std::array<uint32_t, 3>& a, const std::array<uint32_t, 3>& b) {
  int axis = 2;
  uint32_t best = 0;
  for (int k = 2; k >= 0; --k) {
    const uint32_t x = a[static_cast<size_t>(k)] ^ b[static_cast<size_t>(k)];
    if (x > best && (best ^ x) > best) {  // strictly higher leading bit
      best = x;
      axis = k;
    }
  }
  return a[static_cast<size_t>(axis)] < b[static_cast<size_t>(axis)];
}

struct Aabb {
  std::array<float, 3> lo{}, hi{};
};

inline Aabb position_bounds(const CanonicalAvatar& a) {
  Aabb box;
  for (int k = 0; k < 3; ++k) {
    double lo = 0, hi = 0;
    if (a.size() > 0) {
      lo = hi = a.positions[0][k];
      for (const auto& p : a.positions) {
        lo = std::min(lo, p[k]);
        hi = std::max(hi, p[k]);
      }
    }
    float flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
    if (flo > lo) flo = std::nextafter(flo, -INFINITY);
    if (fhi < hi) fhi = std::nextafter(fhi, INFINITY);
    if (!(fhi - flo >= 1e-6f)) fhi = flo + 1e-6f;
    box.lo[static_cast<size_t>(k)] = flo;
    box.hi[static_cast<size_t>(k)] = fhi;
  }
  return box;
}

inline std::array<uint32_t, 3> quantize_position(const Vec3& p, const Aabb& box, int bits) {
  return {quantize(p.x(), box.lo[0], box.hi[0], bits), quantize(p.y(), box.lo[1], box.hi[1], bits),
          quantize(p.z(), box.lo[2], box.hi[2], bits)};
}

inline std::vector<size_t> morton_order(const std::vector<std::array<uint32_t, 3>>& cells) {
  std::vector<size_t> order(cells.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) {
    if (cells[i] == cells[j]) return i < j;
    return morton_less(cells[i], cells[j]);
  });
  return order;
}

// Attribute streams in coding order: the position cell, then log-scale,
// quaternion, opacity and SH indices for one Gaussian.
struct CanonicalLayout {
  std::vector<int> bits;
  std::vector<double> lo, hi;
  size_t position_end = 3;
};

inline CanonicalLayout canonical_layout(const QuantConfig& q, int sh_basis) {
  CanonicalLayout l;
  auto add = [&](int n, int bits, double lo, double hi) {
    for (int i = 0; i < n; ++i) {
      l.bits.push_back(bits);
      l.lo.push_back(lo);
      l.hi.push_back(hi);
    }
  };
  add(3, q.position_bits, 0, 0);  // per-axis ranges come from the AABB
  add(3, q.scale_bits, q.scale.lo, q.scale.hi);
  add(4, q.quat_bits, -1.0, 1.0);
  add(1, q.opacity_bits, q.opacity.lo, q.opacity.hi);
  add(3 * sh_basis, q.sh_bits, q.sh.lo, q.sh.hi);
  return l;
}

inline Quat canonical_sign(Quat q) {
  q.normalize();
  if (q[0] < 0 || (q[0] == 0 && (q[1] < 0 || (q[1] == 0 && (q[2] < 0 || (q[2] == 0 && q[3] < 0)))))) q = -q;
  return q;
}

}  // namespace detail

// Order in which encode_canonical visits the Gaussians; decode_canonical
// returns them in this order.
inline std::vector<size_t> canonical_coding_order(const CanonicalAvatar& a, const QuantConfig& q) {
  const detail::Aabb box = detail::position_bounds(a);
  std::vector<std::array<uint32_t, 3>> cells(a.size());
  for (size_t i = 0; i < a.size(); ++i) cells[i] = detail::quantize_position(a.positions[i], box, q.position_bits);
  return detail::morton_order(cells);
}

inline std::vector<uint8_t> encode_canonical(const CanonicalAvatar& a, const QuantConfig& q) {
  q.validate();
  a.validate();
  const size_t n = a.size();
  const int joints = a.joint_count();
  const int b = a.sh_basis();
  ByteWriter w;
  w.u32(static_cast<uint32_t>(n));
  w.u16(static_cast<uint16_t>(joints));
  w.u8(static_cast<uint8_t>(a.sh_degree));
  w.u8(0);
  const detail::Aabb box = detail::position_bounds(a);
  for (float v : box.lo) w.f32(v);
  for (float v : box.hi) w.f32(v);

  const auto layout = detail::canonical_layout(q, b);
  const size_t comps = layout.bits.size();
  std::vector<std::array<uint32_t, 3>> cells(n);
  for (size_t i = 0; i < n; ++i) cells[i] = detail::quantize_position(a.positions[i], box, q.position_bits);
  const auto order = detail::morton_order(cells);

  RangeEncoder enc;
  std::vector<GolombContexts> ctx(comps);
  std::vector<uint32_t> prev(comps), cur(comps);
  for (size_t c = 0; c < comps; ++c) prev[c] = detail::midpoint(layout.bits[c]);
  for (size_t i : order) {
    for (int k = 0; k < 3; ++k) cur[static_cast<size_t>(k)] = cells[i][static_cast<size_t>(k)];
    for (int k = 0; k < 3; ++k) cur[3 + static_cast<size_t>(k)] = quantize(a.log_scales[i][k], layout.lo[3], layout.hi[3], layout.bits[3]);
    const Quat qr = detail::canonical_sign(a.rotations[i]);
    for (int k = 0; k < 4; ++k) cur[6 + static_cast<size_t>(k)] = quantize(qr[k], -1.0, 1.0, layout.bits[6]);
    cur[10] = quantize(a.opacities[i], layout.lo[10], layout.hi[10], layout.bits[10]);
    const double* sh = a.sh_of(i);
    for (int k = 0; k < 3 * b; ++k) cur[11 + static_cast<size_t>(k)] = quantize(sh[k], layout.lo[11], layout.hi[11], layout.bits[11]);
    for (size_t c = 0; c < comps; ++c) encode_signed(enc, ctx[c], detail::wrap_delta(cur[c], prev[c], layout.bits[c]));
    prev = cur;

    // Skin weights: nonzero count, then (joint, 16-bit weight) pairs.
    std::vector<std::pair<uint32_t, uint32_t>> nz;
    for (int j = 0; j < joints; ++j) {
      const auto qw = static_cast<uint32_t>(std::lround(a.gauss_weights(static_cast<Eigen::Index>(i), j) * 65535.0));
      if (qw > 0) nz.emplace_back(static_cast<uint32_t>(j), qw);
    }
    if (nz.empty()) throw ContractError("encode_canonical: skin weights round to zero");
    enc.encode_bits(static_cast<uint32_t>(nz.size()), detail::bits_for(static_cast<uint32_t>(joints)));
    for (const auto& [j, qw] : nz) {
      enc.encode_bits(j, detail::bits_for(static_cast<uint32_t>(joints - 1)));
      enc.encode_bits(qw, kWeightBits);
    }
  }
  w.raw(enc.finish());
  return w.bytes();
}

inline CanonicalAvatar decode_canonical(std::span<const uint8_t> bytes, const QuantConfig& q) {
  q.validate();
  ByteReader r(bytes);
  const size_t n = r.u32();
  const int joints = r.u16();
  const int degree = r.u8();
  r.u8();
  if (joints < 1 || degree > 2) throw CorruptionError("canonical payload: bad joint count or SH degree");
  detail::Aabb box;
  for (auto& v : box.lo) v = r.f32();
  for (auto& v : box.hi) v = r.f32();
  for (int k = 0; k < 3; ++k)
    if (!std::isfinite(box.lo[static_cast<size_t>(k)]) || !std::isfinite(box.hi[static_cast<size_t>(k)]) ||
        !(box.hi[static_cast<size_t>(k)] > box.lo[static_cast<size_t>(k)]))
      throw CorruptionError("canonical payload: bad bounding box");
  // Each Gaussian costs at least a few bits; reject absurd counts up front.
  if (n > 8 * r.remaining() + 8) throw CorruptionError("canonical payload: Gaussian count exceeds payload");

  CanonicalAvatar a;
  a.sh_degree = degree;
  a.resize(n, joints);
  const int b = a.sh_basis();
  const auto layout = detail::canonical_layout(q, b);
  const size_t comps = layout.bits.size();
  RangeDecoder dec(r.raw(r.remaining()));
  std::vector<GolombContexts> ctx(comps);
  std::vector<uint32_t> cur(comps);
  for (size_t c = 0; c < comps; ++c) cur[c] = detail::midpoint(layout.bits[c]);
  for (size_t i = 0; i < n; ++i) {
    for (size_t c = 0; c < comps; ++c) cur[c] = detail::apply_delta(cur[c], decode_signed(dec, ctx[c]), layout.bits[c]);
    for (int k = 0; k < 3; ++k)
      a.positions[i][k] = dequantize(cur[static_cast<size_t>(k)], box.lo[static_cast<size_t>(k)], box.hi[static_cast<size_t>(k)], layout.bits[0]);
    for (int k = 0; k < 3; ++k) a.log_scales[i][k] = dequantize(cur[3 + static_cast<size_t>(k)], layout.lo[3], layout.hi[3], layout.bits[3]);
    Quat qr;
    for (int k = 0; k < 4; ++k) qr[k] = dequantize(cur[6 + static_cast<size_t>(k)], -1.0, 1.0, layout.bits[6]);
    a.rotations[i] = qr.norm() > 1e-12 ? Quat(qr.normalized()) : Quat(1, 0, 0, 0);
    a.opacities[i] = std::clamp(dequantize(cur[10], layout.lo[10], layout.hi[10], layout.bits[10]),
                                static_cast<double>(q.opacity.lo), static_cast<double>(q.opacity.hi));
    double* sh = a.sh.data() + i * 3 * static_cast<size_t>(b);
    for (int k = 0; k < 3 * b; ++k) sh[k] = dequantize(cur[11 + static_cast<size_t>(k)], layout.lo[11], layout.hi[11], layout.bits[11]);

    const uint32_t count = dec.decode_bits(detail::bits_for(static_cast<uint32_t>(joints)));
    if (count == 0 || count > static_cast<uint32_t>(joints)) throw CorruptionError("canonical payload: bad weight count");
    a.gauss_weights.row(static_cast<Eigen::Index>(i)).setZero();
    double sum = 0;
    for (uint32_t k = 0; k < count; ++k) {
      const uint32_t j = dec.decode_bits(detail::bits_for(static_cast<uint32_t>(joints - 1)));
      const uint32_t qw = dec.decode_bits(kWeightBits);
      if (j >= static_cast<uint32_t>(joints)) throw CorruptionError("canonical payload: joint index out of range");
      a.gauss_weights(static_cast<Eigen::Index>(i), j) = qw;
      sum += qw;
    }
    if (sum <= 0) throw CorruptionError("canonical payload: zero skin weights");
    a.gauss_weights.row(static_cast<Eigen::Index>(i)) /= sum;
  }
  if (dec.position() != dec.size()) throw CorruptionError("canonical payload has trailing bytes");
  return a;
}

// ---------------------------------------------------------------------------
// Container:
//   "GAVC" | version u16 | flags u16 | N u32 | J u16 | sh_degree u8 | reserved u8 |
//   frame_count u32 | quant block (64) | prior hash (8) | canonical_len u64 |
//   canonical bytes | per frame: len u32 + bytes

inline constexpr uint16_t kStreamVersion = 1;
inline constexpr size_t kStreamHeaderSize = 4 + 2 + 2 + 4 + 2 + 1 + 1 + 4 + kQuantBlockSize + 8 + 8;
inline constexpr size_t kFrameLengthSize = 4;

struct AvatarStream {
  uint16_t flags = 0;
  uint32_t gaussian_count = 0;
  uint16_t joint_count = 0;
  uint8_t sh_degree = 0;
  QuantConfig quant;
  uint64_t prior_hash = 0;
  std::vector<uint8_t> canonical;
  std::vector<std::vector<uint8_t>> frames;

  // header + canonical + per-frame (length field + payload)
  size_t byte_size() const {
    size_t s = kStreamHeaderSize + canonical.size();
    for (const auto& f : frames) s += kFrameLengthSize + f.size();
    return s;
  }
  bool operator==(const AvatarStream&) const = default;
};

inline std::vector<uint8_t> serialize_stream(const AvatarStream& s) {
  ByteWriter w;
  w.tag("GAVC");
  w.u16(kStreamVersion);
  w.u16(s.flags);
  w.u32(s.gaussian_count);
  w.u16(s.joint_count);
  w.u8(s.sh_degree);
  w.u8(0);
  w.u32(static_cast<uint32_t>(s.frames.size()));
  write_quant_block(w, s.quant);
  w.u64(s.prior_hash);
  w.u64(s.canonical.size());
  w.raw(s.canonical);
  for (const auto& f : s.frames) {
    if (f.size() > 0xFFFFFFFFu) throw ContractError("frame payload too large");
    w.u32(static_cast<uint32_t>(f.size()));
    w.raw(f);
  }
  return w.bytes();
}

inline AvatarStream deserialize_stream(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("GAVC", "avatar stream");
  if (r.u16() != kStreamVersion) throw CorruptionError("avatar stream: unsupported version");
  AvatarStream s;
  s.flags = r.u16();
  s.gaussian_count = r.u32();
  s.joint_count = r.u16();
  s.sh_degree = r.u8();
  r.u8();
  const uint32_t frame_count = r.u32();
  s.quant = read_quant_block(r);
  s.prior_hash = r.u64();
  const uint64_t canonical_len = r.u64();
  if (canonical_len > r.remaining()) throw CorruptionError("avatar stream: canonical length exceeds file");
  const auto c = r.raw(static_cast<size_t>(canonical_len));
  s.canonical.assign(c.begin(), c.end());
  if (frame_count > r.remaining() / kFrameLengthSize) throw CorruptionError("avatar stream: frame count exceeds file");
  s.frames.reserve(frame_count);
  for (uint32_t f = 0; f < frame_count; ++f) {
    const uint32_t len = r.u32();
    const auto p = r.raw(len);
    s.frames.emplace_back(p.begin(), p.end());
  }
  if (r.remaining() != 0) throw CorruptionError("avatar stream: trailing bytes");
  return s;
}

inline void write_stream(const AvatarStream& s, const std::string& path) { write_file(path, serialize_stream(s)); }
inline AvatarStream read_stream(const std::string& path) { return deserialize_stream(read_file(path)); }

inline AvatarStream encode_stream(const CanonicalAvatar& avatar, std::span<const FrameParams> frames,
                                  const PriorModel& model, const QuantConfig& q) {
  if (avatar.joint_count() != model.joint_count) throw ShapeError("encode_stream: avatar and model joint counts differ");
  for (const auto& f : frames)
    if (f.theta.size() != model.pose_size() || f.beta.size() != kShapeCount)
      throw ShapeError("encode_stream: frame parameter sizes do not match the model");
  AvatarStream s;
  s.gaussian_count = static_cast<uint32_t>(avatar.size());
  s.joint_count = static_cast<uint16_t>(avatar.joint_count());
  s.sh_degree = static_cast<uint8_t>(avatar.sh_degree);
  s.quant = q;
  s.prior_hash = prior_hash(model);
  s.canonical = encode_canonical(avatar, q);
  s.frames = encode_frames(frames, q);
  return s;
}

struct DecodedStream {
  CanonicalAvatar avatar;
  std::vector<FrameParams> frames;
};

// The model is optional; when given its hash must match the stream.
inline DecodedStream decode_stream(const AvatarStream& s, const PriorModel* model = nullptr) {
  if (model && prior_hash(*model) != s.prior_hash) throw ContractError("decode_stream: prior model hash mismatch");
  DecodedStream out;
  out.avatar = decode_canonical(s.canonical, s.quant);
  if (out.avatar.size() != s.gaussian_count || out.avatar.joint_count() != s.joint_count ||
      out.avatar.sh_degree != s.sh_degree)
    throw CorruptionError("avatar stream: header disagrees with canonical payload");
  out.frames = decode_frames(s.frames, s.quant, 3 * s.joint_count);
  return out;
}

}  // namespace gavatar
