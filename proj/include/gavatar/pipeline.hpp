#pragma once

// Synthetic subject generation, the on-disk dataset layout and the
// synth -> fit -> encode -> decode -> evaluate chain.

#include <gavatar/evalkit.hpp>

#include <cstdio>
#include <filesystem>

namespace gavatar {

struct SynthConfig {
  uint64_t seed = 0;
  int gaussian_count = 200;
  int frame_count = 20;
  int view_count = 8;
  int width = 64;
  int height = 64;
  double pose_amplitude = 0.3;  // radians
  int prior_vertices = 400;     // toy prior size; the fit starts from all of them
  double ring_radius = 2.5;

  void validate() const {
    if (gaussian_count < 1 || frame_count < 1 || view_count < 1) throw ConfigError("synth: counts must be >= 1");
    if (width < 1 || height < 1) throw ConfigError("synth: image size must be positive");
    if (!(pose_amplitude >= 0 && pose_amplitude <= kPi / 2)) throw ConfigError("synth: amplitude outside [0, pi/2]");
    if (prior_vertices < 1) throw ConfigError("synth: prior vertex count must be >= 1");
    if (!(ring_radius > 0)) throw ConfigError("synth: ring radius must be positive");
  }
};

// The model after a trip through its file format, so in-memory values equal
// what any later stage loads from disk.
inline PriorModel make_prior(const SynthConfig& cfg) {
  cfg.validate();
  return deserialize_prior(serialize_prior(build_toy_prior(cfg.seed, kDefaultJointCount, cfg.prior_vertices)));
}

// Subsample of init_from_prior with jittered geometry, colors per body part
// and opacities in [0.6, 0.95].
inline CanonicalAvatar make_gt_avatar(const PriorModel& model, const SynthConfig& cfg) {
  cfg.validate();
  if (static_cast<size_t>(cfg.gaussian_count) > static_cast<size_t>(model.vertex_count()))
    throw ConfigError("synth: gaussian count exceeds prior vertex count");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CanonicalAvatar a = init_from_prior(model, 1);

  std::vector<size_t> idx(a.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> keep(a.size(), false);
  for (int i = 0; i < cfg.gaussian_count; ++i) keep[idx[static_cast<size_t>(i)]] = true;
  a.keep(keep);

  std::vector<Vec3> palette(static_cast<size_t>(model.joint_count));
  for (auto& c : palette) c = Vec3(0.15 + 0.7 * u(rng), 0.15 + 0.7 * u(rng), 0.15 + 0.7 * u(rng));
  const int b = a.sh_basis();
  for (size_t i = 0; i < a.size(); ++i) {
    Eigen::Index joint = 0;
    a.gauss_weights.row(static_cast<Eigen::Index>(i)).maxCoeff(&joint);
    double* sh = a.sh.data() + i * 3 * static_cast<size_t>(b);
    for (int c = 0; c < 3; ++c) {
      const double color = std::clamp(palette[static_cast<size_t>(joint)][c] + 0.1 * (u(rng) - 0.5), 0.05, 0.95);
      sh[c * b] = (color - 0.5) / kSh0;
      for (int k = 1; k < b; ++k) sh[c * b + k] = 0.1 * (u(rng) - 0.5);
    }
    a.opacities[i] = logit(0.6 + 0.35 * u(rng));
    // Move geometry off the initialization so the fit has work to do.
    const double step = std::exp(a.log_scales[i].maxCoeff()) / 0.3;
    a.positions[i] += 0.3 * step * Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
    for (int k = 0; k < 3; ++k) a.log_scales[i][k] += std::log(0.7 + 0.8 * u(rng));
    a.rotations[i] = Quat(1.0, u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5).normalized();
  }
  a.validate();
  return a;
}

// Frame t: theta_c + A (sin(w t + phi) - sin(phi)) / 2 per component, a slow
// yaw and a small sinusoidal translation. Frame 0 is exactly canonical.
inline std::vector<FrameParams> make_pose_sequence(const PriorModel& model, const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dull);
  std::uniform_real_distribution<double> u(0.0, 2 * kPi);
  const Eigen::Index n = model.canonical_pose.size();
  Eigen::VectorXd phase(n);
  for (Eigen::Index i = 0; i < n; ++i) phase(i) = u(rng);
  const double w = 2 * kPi / cfg.frame_count;
  std::vector<FrameParams> out;
  for (int t = 0; t < cfg.frame_count; ++t) {
    FrameParams fp = canonical_frame(model);
    for (Eigen::Index i = 0; i < n; ++i)
      fp.theta(i) += cfg.pose_amplitude * (std::sin(w * t + phase(i)) - std::sin(phase(i))) / 2;
    const double yaw = 0.3 * std::sin(w * t);
    fp.rotation = Eigen::AngleAxisd(yaw, Vec3::UnitY()).toRotationMatrix();
    fp.translation = Vec3(0.1 * std::sin(w * t), 0.0, 0.05 * std::sin(2 * w * t));
    if (t == 0) {
      fp.rotation = Mat3::Identity();
      fp.translation = Vec3::Zero();
    }
    out.push_back(std::move(fp));
  }
  // Match what the dataset files hold.
  return deserialize_frames(serialize_frames(out, model.pose_size()));
}

// Ring of cameras at body-center height, all looking at the body center.
inline std::vector<Camera> make_cameras(const PriorModel& model, const SynthConfig& cfg) {
  cfg.validate();
  const auto verts = canonical_vertices(model);
  Vec3 lo = verts[0], hi = verts[0];
  for (const auto& v : verts) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 center = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo).maxCoeff();
  const double focal = 0.38 * std::min(cfg.width, cfg.height) * cfg.ring_radius / half;
  std::vector<Camera> cams;
  for (int v = 0; v < cfg.view_count; ++v) {
    const double a = 2 * kPi * v / cfg.view_count;
    const Vec3 eye = center + cfg.ring_radius * Vec3(std::sin(a), 0, std::cos(a));
    cams.push_back(Camera::look_at(eye, center, Vec3::UnitY(), focal, cfg.width, cfg.height));
  }
  return cams;
}

// ---------------------------------------------------------------------------
// Dataset layout:
//   model.gapm  cameras.json  manifest.json  gt_avatar.gava
//   frames/NNNN.gafp  gt/NNNN_VV.ppm  masks/NNNN_VV.pgm

struct Dataset {
  std::string dir;
  PriorModel model;
  std::vector<Camera> cameras;
  std::vector<FrameParams> frames;
  std::vector<int> train_views;
  std::vector<int> test_views;

  static std::string frame_name(int f) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", f);
    return buf;
  }
  static std::string pair_name(int f, int v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%04d_%02d", f, v);
    return buf;
  }
  std::string image_path(int f, int v) const { return dir + "/gt/" + pair_name(f, v) + ".ppm"; }
  std::string mask_path(int f, int v) const { return dir + "/masks/" + pair_name(f, v) + ".pgm"; }
  std::string frame_path(int f) const { return dir + "/frames/" + frame_name(f) + ".gafp"; }

  Image image(int f, int v) const { return read_ppm(image_path(f, v)); }
  Image mask(int f, int v) const { return read_pgm(mask_path(f, v)); }

  static Dataset load(const std::string& dir) {
    Dataset d;
    d.dir = dir;
    d.model = load_prior(dir + "/model.gapm");
    d.cameras = load_cameras(dir + "/cameras.json");
    const auto text = read_file(dir + "/manifest.json");
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(text.begin(), text.end());
      d.train_views = m.at("train_views").get<std::vector<int>>();
      d.test_views = m.at("test_views").get<std::vector<int>>();
      const int frame_count = m.at("frame_count").get<int>();
      for (int f = 0; f < frame_count; ++f) {
        auto one = load_frames(d.frame_path(f));
        if (one.size() != 1) throw CorruptionError("dataset: frame file must hold one frame");
        d.frames.push_back(std::move(one[0]));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(std::string("dataset manifest: ") + e.what());
    }
    for (int v : d.train_views)
      if (v < 0 || static_cast<size_t>(v) >= d.cameras.size()) throw CorruptionError("dataset: view index out of range");
    for (int v : d.test_views) {
      if (v < 0 || static_cast<size_t>(v) >= d.cameras.size()) throw CorruptionError("dataset: view index out of range");
      if (std::find(d.train_views.begin(), d.train_views.end(), v) != d.train_views.end())
        throw CorruptionError("dataset: train and test views overlap");
    }
    for (int f = 0; f < static_cast<int>(d.frames.size()); ++f)
      for (size_t v = 0; v < d.cameras.size(); ++v)
        if (!std::filesystem::exists(d.image_path(f, static_cast<int>(v))) ||
            !std::filesystem::exists(d.mask_path(f, static_cast<int>(v))))
          throw IoError("dataset: missing image or mask for " + pair_name(f, static_cast<int>(v)));
    return d;
  }
};

// Renders every (frame, view) pair; even views train, odd views test.
inline Dataset render_dataset(const CanonicalAvatar& avatar, const PriorModel& model,
                              std::span<const FrameParams> poses, std::span<const Camera> cameras,
                              const std::string& dir) {
  if (poses.empty() || cameras.empty()) throw ConfigError("render_dataset: need frames and cameras");
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"", "/frames", "/gt", "/masks"}) {
    fs::create_directories(dir + sub, ec);
    if (ec) throw IoError("cannot create " + dir + sub + ": " + ec.message());
  }
  Dataset d;
  d.dir = dir;
  d.model = model;
  d.cameras.assign(cameras.begin(), cameras.end());
  d.frames.assign(poses.begin(), poses.end());
  for (int v = 0; v < static_cast<int>(cameras.size()); ++v) (v % 2 == 0 ? d.train_views : d.test_views).push_back(v);

  save_prior(model, dir + "/model.gapm");
  save_cameras(cameras, dir + "/cameras.json");
  save_avatar(avatar, dir + "/gt_avatar.gava");
  for (int f = 0; f < static_cast<int>(poses.size()); ++f)
    save_frames(poses.subspan(static_cast<size_t>(f), 1), model.pose_size(), d.frame_path(f));

  std::vector<DeformedGaussians> deformed(poses.size());
  parallel_for(poses.size(), [&](size_t f) { deformed[f] = deform(avatar, model, poses[f]); });
  const size_t views = cameras.size();
  parallel_for(poses.size() * views, [&](size_t k) {
    const int f = static_cast<int>(k / views), v = static_cast<int>(k % views);
    const RenderOutput out = rasterize(deformed[static_cast<size_t>(f)], cameras[static_cast<size_t>(v)]);
    write_ppm(out.image, d.image_path(f, v));
    write_pgm(out.alpha, d.mask_path(f, v));
  });

  nlohmann::json m;
  m["version"] = 1;
  m["frame_count"] = poses.size();
  m["view_count"] = views;
  m["width"] = cameras[0].width;
  m["height"] = cameras[0].height;
  m["gaussian_count"] = avatar.size();
  m["train_views"] = d.train_views;
  m["test_views"] = d.test_views;
  std::vector<int> frame_ids(poses.size());
  std::iota(frame_ids.begin(), frame_ids.end(), 0);
  m["frames"] = frame_ids;
  const std::string text = m.dump(2) + "\n";
  write_file(dir + "/manifest.json", std::vector<uint8_t>(text.begin(), text.end()));
  return d;
}

inline std::vector<TrainingSample> training_samples(const Dataset& d, std::span<const int> views) {
  std::vector<TrainingSample> out;
  for (int f = 0; f < static_cast<int>(d.frames.size()); ++f)
    for (int v : views)
      out.push_back({d.frames[static_cast<size_t>(f)], d.cameras[static_cast<size_t>(v)], d.image(f, v), d.mask(f, v)});
  return out;
}

inline std::vector<EvalView> eval_views(const Dataset& d, std::span<const int> views) {
  std::vector<EvalView> out;
  for (int f = 0; f < static_cast<int>(d.frames.size()); ++f)
    for (int v : views) out.push_back({f, d.cameras[static_cast<size_t>(v)], d.image(f, v)});
  return out;
}

// ---------------------------------------------------------------------------
// End to end.

struct EndToEndConfig {
  SynthConfig synth;
  FitConfig fit;
  LossWeights loss;
  std::vector<QuantConfig> profiles = default_profiles();
  std::string out_dir = "e2e_out";
};

struct EndToEndReport {
  double train_psnr = 0, test_psnr = 0;
  double train_ssim = 0, test_ssim = 0;
  double temporal_rate_mbps = 0;
  double finest_vs_uncompressed_psnr = 0;
  std::vector<RDPoint> rd;
  std::vector<double> loss_log;
  std::vector<PruneEvent> prunes;
  size_t final_gaussians = 0;
  std::vector<std::pair<std::string, bool>> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.second; });
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["train_psnr_db"] = train_psnr;
    j["test_psnr_db"] = test_psnr;
    j["train_ssim"] = train_ssim;
    j["test_ssim"] = test_ssim;
    j["temporal_rate_mbps"] = temporal_rate_mbps;
    j["finest_vs_uncompressed_psnr_db"] = finest_vs_uncompressed_psnr;
    j["final_gaussians"] = final_gaussians;
    j["prune_events"] = prunes.size();
    if (!loss_log.empty()) {
      j["loss_first"] = loss_log.front();
      j["loss_last"] = loss_log.back();
    }
    for (const auto& p : rd)
      j["rd"].push_back({{"label", p.label}, {"rate_mbps", p.rate_mbps}, {"psnr_db", p.psnr_db}, {"ssim", p.ssim}});
    for (const auto& [name, ok] : checks) j["checks"][name] = ok;
    j["passed"] = passed();
    return j;
  }
};

// Mean of a window at each end of the loss log.
inline std::pair<double, double> smoothed_loss_ends(std::span<const double> log, size_t window = 100) {
  if (log.empty()) return {0, 0};
  const size_t w = std::min(window, log.size());
  double head = 0, tail = 0;
  for (size_t i = 0; i < w; ++i) {
    head += log[i];
    tail += log[log.size() - 1 - i];
  }
  return {head / static_cast<double>(w), tail / static_cast<double>(w)};
}

inline std::string loss_csv(std::span<const double> log) {
  std::ostringstream s;
  s << "iteration,loss\n" << std::setprecision(10);
  for (size_t i = 0; i < log.size(); ++i) s << i + 1 << ',' << log[i] << '\n';
  return s.str();
}

inline double temporal_rate(std::span<const std::vector<uint8_t>> frame_payloads, double fps = kDefaultFps) {
  uint64_t bits = 0;
  for (const auto& f : frame_payloads) bits += 8ull * f.size();
  return rate_mbps(bits, static_cast<int64_t>(frame_payloads.size()), fps);
}

inline bool rd_rates_increasing(std::span<const RDPoint> rd) {
  for (size_t i = 1; i < rd.size(); ++i)
    if (!(rd[i].rate_mbps > rd[i - 1].rate_mbps)) return false;
  return true;
}

inline bool rd_psnr_non_decreasing(std::span<const RDPoint> rd, double tolerance_db = 0.1) {
  for (size_t i = 1; i < rd.size(); ++i)
    if (rd[i].psnr_db < rd[i - 1].psnr_db - tolerance_db) return false;
  return true;
}

// Log lines go to `log` when given.
inline EndToEndReport run_end_to_end(const EndToEndConfig& cfg, std::ostream* log = nullptr) {
  auto say = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };
  cfg.synth.validate();
  const PriorModel model = make_prior(cfg.synth);
  const CanonicalAvatar gt = make_gt_avatar(model, cfg.synth);
  const auto poses = make_pose_sequence(model, cfg.synth);
  const auto cams = make_cameras(model, cfg.synth);
  const Dataset data = render_dataset(gt, model, poses, cams, cfg.out_dir + "/dataset");
  say("synth: " + std::to_string(gt.size()) + " gaussians, " + std::to_string(poses.size()) + " frames, " +
      std::to_string(cams.size()) + " views");

  const auto samples = training_samples(data, data.train_views);
  FitResult fr = fit(model, samples, cfg.fit, cfg.loss);
  save_avatar(fr.avatar, cfg.out_dir + "/avatar.gava");
  {
    const std::string csv = loss_csv(fr.loss_log);
    write_file(cfg.out_dir + "/loss.csv", std::vector<uint8_t>(csv.begin(), csv.end()));
  }
  say("fit: " + std::to_string(fr.avatar.size()) + " gaussians after " + std::to_string(fr.prunes.size()) + " prune steps");

  EndToEndReport rep;
  rep.loss_log = fr.loss_log;
  rep.prunes = fr.prunes;
  rep.final_gaussians = fr.avatar.size();
  const auto train = eval_views(data, data.train_views);
  const auto test = eval_views(data, data.test_views);
  const QualityStats tq = evaluate_views(fr.avatar, model, data.frames, train);
  const QualityStats vq = evaluate_views(fr.avatar, model, data.frames, test);
  rep.train_psnr = tq.psnr_db;
  rep.train_ssim = tq.ssim;
  rep.test_psnr = vq.psnr_db;
  rep.test_ssim = vq.ssim;

  auto rd = rd_sweep_detailed(fr.avatar, model, data.frames, test, cfg.profiles);
  for (const auto& r : rd) rep.rd.push_back(r.point);
  write_rd_csv(rep.rd, cfg.out_dir + "/rd.csv");
  const AvatarStream& finest = rd.back().stream;
  write_stream(finest, cfg.out_dir + "/stream.gavc");
  rep.temporal_rate_mbps = temporal_rate(finest.frames);

  // Finest rate point against the uncompressed fitted avatar.
  const DecodedStream dec = decode_stream(finest, &model);
  std::vector<EvalView> reference;
  for (const auto& v : test) {
    const RenderOutput r = rasterize(deform(fr.avatar, model, data.frames[static_cast<size_t>(v.frame)]), v.camera);
    reference.push_back({v.frame, v.camera, r.image});
  }
  rep.finest_vs_uncompressed_psnr = evaluate_views(dec.avatar, model, dec.frames, reference).psnr_db;

  const auto [head, tail] = smoothed_loss_ends(rep.loss_log);
  bool prune_ok = true;
  for (const auto& p : rep.prunes)
    if (p.loss_after > p.loss_before * 1.01 + 1e-12) prune_ok = false;
  rep.checks = {
      {"train_psnr_ge_30db", rep.train_psnr >= 30.0},
      {"test_within_3db_of_train", std::abs(rep.train_psnr - rep.test_psnr) <= 3.0},
      {"rd_rates_strictly_increasing", rd_rates_increasing(rep.rd)},
      {"rd_psnr_non_decreasing", rd_psnr_non_decreasing(rep.rd)},
      {"finest_vs_uncompressed_ge_40db", rep.finest_vs_uncompressed_psnr >= 40.0},
      {"temporal_rate_lt_0.05mbps", rep.temporal_rate_mbps < 0.05},
      {"loss_trend_decreasing", tail < head},
      {"prune_jump_lt_1pct", prune_ok},
  };
  const std::string summary = rep.to_json().dump(2) + "\n";
  write_file(cfg.out_dir + "/summary.json", std::vector<uint8_t>(summary.begin(), summary.end()));
  return rep;
}

}  // namespace gavatar
