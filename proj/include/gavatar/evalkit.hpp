#pragma once

// Image metrics, stream rate and rate-distortion sweeps.

#include <gavatar/codec.hpp>
#include <gavatar/optimizer.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace gavatar {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kDefaultFps = 25.0;

inline double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("mse: image dimensions differ");
  if (a.size() == 0) throw ShapeError("mse: empty image");
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

// Peak 1.0; identical images report the cap.
inline double psnr(const Image& a, const Image& b) {
  const double e = mse(a, b);
  if (e <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

// Canonical bits are amortized over every frame of the stream.
inline double rate_mbps(uint64_t total_bits, int64_t frame_count, double fps = kDefaultFps) {
  if (frame_count < 1) throw ConfigError("rate: need at least one frame");
  if (!(fps > 0)) throw ConfigError("rate: fps must be positive");
  return static_cast<double>(total_bits) / static_cast<double>(frame_count) * fps / 1e6;
}

struct RDPoint {
  std::string label;
  double rate_mbps = 0;
  double psnr_db = 0;
  double ssim = 0;
};

// One evaluation target: a frame index and the camera / reference image.
struct EvalView {
  int frame = 0;
  Camera camera;
  Image reference;
};

struct QualityStats {
  double psnr_db = 0;
  double ssim = 0;
};

inline QualityStats evaluate_views(const CanonicalAvatar& avatar, const PriorModel& model,
                                   std::span<const FrameParams> frames, std::span<const EvalView> views) {
  if (views.empty()) throw ConfigError("evaluate: no views");
  std::vector<QualityStats> per(views.size());
  // Pairs are independent; each writes its own slot.
  parallel_for(views.size(), [&](size_t i) {
    const EvalView& v = views[i];
    if (v.frame < 0 || static_cast<size_t>(v.frame) >= frames.size()) throw ShapeError("evaluate: frame out of range");
    const RenderOutput out = rasterize(deform(avatar, model, frames[static_cast<size_t>(v.frame)]), v.camera);
    per[i] = {psnr(out.image, v.reference), ssim(out.image, v.reference)};
  });
  QualityStats mean;
  for (const auto& p : per) {
    mean.psnr_db += p.psnr_db;
    mean.ssim += p.ssim;
  }
  mean.psnr_db /= static_cast<double>(per.size());
  mean.ssim /= static_cast<double>(per.size());
  return mean;
}

struct RDResult {
  RDPoint point;
  AvatarStream stream;
  size_t file_bytes = 0;
};

// Name of the matching standard profile, else "custom<index>".
inline std::string profile_label(const QuantConfig& q, size_t index) {
  for (int k = 0; k < kProfileCount; ++k)
    if (q == quant_profile(k)) return "qp" + std::to_string(k);
  return "custom" + std::to_string(index);
}

// Encode, decode and evaluate one rate point per profile; sorted by rate.
inline std::vector<RDResult> rd_sweep_detailed(const CanonicalAvatar& avatar, const PriorModel& model,
                                               std::span<const FrameParams> frames, std::span<const EvalView> views,
                                               std::span<const QuantConfig> profiles,
                                               std::span<const std::string> labels = {}) {
  if (frames.empty()) throw ConfigError("rd sweep: need at least one frame");
  std::vector<RDResult> out;
  for (size_t p = 0; p < profiles.size(); ++p) {
    RDResult r;
    r.stream = encode_stream(avatar, frames, model, profiles[p]);
    r.file_bytes = serialize_stream(r.stream).size();
    const DecodedStream d = decode_stream(r.stream, &model);
    const QualityStats q = evaluate_views(d.avatar, model, d.frames, views);
    r.point.label = p < labels.size() ? labels[p] : profile_label(profiles[p], p);
    r.point.rate_mbps = rate_mbps(8ull * r.file_bytes, static_cast<int64_t>(frames.size()));
    r.point.psnr_db = q.psnr_db;
    r.point.ssim = q.ssim;
    out.push_back(std::move(r));
  }
  std::stable_sort(out.begin(), out.end(), [](const RDResult& a, const RDResult& b) {
    return a.point.rate_mbps < b.point.rate_mbps;
  });
  return out;
}

inline std::vector<RDPoint> rd_sweep(const CanonicalAvatar& avatar, const PriorModel& model,
                                     std::span<const FrameParams> frames, std::span<const EvalView> views,
                                     std::span<const QuantConfig> profiles) {
  std::vector<RDPoint> out;
  for (auto& r : rd_sweep_detailed(avatar, model, frames, views, profiles)) out.push_back(r.point);
  return out;
}

inline std::vector<QuantConfig> default_profiles() {
  std::vector<QuantConfig> out;
  for (int qp = 0; qp < kProfileCount; ++qp) out.push_back(quant_profile(qp));
  return out;
}

inline std::string rd_csv(std::span<const RDPoint> points) {
  std::ostringstream s;
  s << "label,rate_mbps,psnr_db,ssim\n" << std::setprecision(9);
  for (const auto& p : points) s << p.label << ',' << p.rate_mbps << ',' << p.psnr_db << ',' << p.ssim << '\n';
  return s.str();
}

inline void write_rd_csv(std::span<const RDPoint> points, const std::string& path) {
  const std::string text = rd_csv(points);
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

}  // namespace gavatar
