#pragma once

// Fitting the canonical avatar through the deform -> rasterize chain.

#include <gavatar/avatar.hpp>
#include <gavatar/renderer.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <vector>

namespace gavatar {

struct LossWeights {
  double lambda1 = 0.1;   // mask
  double lambda2 = 0.01;  // 1 - SSIM
  double lambda3 = 0.0;   // perceptual slot, not evaluated

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss weights must be non-negative");
  }
};

struct TrainingSample {
  FrameParams frame;
  Camera camera;
  Image image;  // H x W x 3
  Image mask;   // H x W x 1
};

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window (sigma 1.5) over fully covered positions,
// K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over channels.

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline const std::array<double, kSsimWindow>& ssim_kernel() {
  static const auto kernel = [] {
    std::array<double, kSsimWindow> k{};
    double sum = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double d = i - kSsimWindow / 2;
      k[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
      sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
  }();
  return kernel;
}

// Valid-mode separable filtering of a single-channel plane.
inline std::vector<double> filter_valid(const std::vector<double>& in, int w, int h) {
  const auto& k = ssim_kernel();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * in[static_cast<size_t>(y) * w + x + i];
      tmp[static_cast<size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[static_cast<size_t>(y + i) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = s;
    }
  return out;
}

// Adjoint of filter_valid: scatters a valid-size plane back to full size.
inline std::vector<double> filter_adjoint(const std::vector<double>& in, int w, int h) {
  const auto& k = ssim_kernel();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<size_t>(ow) * h, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int i = 0; i < kSsimWindow; ++i)
        tmp[static_cast<size_t>(y + i) * ow + x] += k[i] * in[static_cast<size_t>(y) * ow + x];
  std::vector<double> out(static_cast<size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x)
      for (int i = 0; i < kSsimWindow; ++i)
        out[static_cast<size_t>(y) * w + x + i] += k[i] * tmp[static_cast<size_t>(y) * ow + x];
  return out;
}

}  // namespace detail

// Mean SSIM of a against b; optionally the gradient with respect to a.
inline double ssim(const Image& a, const Image& b, Image* grad_a = nullptr) {
  if (!a.same_shape(b)) throw ShapeError("ssim: image dimensions differ");
  if (a.width < kSsimWindow || a.height < kSsimWindow) throw ShapeError("ssim: image smaller than the window");
  const int w = a.width, h = a.height, nc = a.channels;
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  const size_t plane = static_cast<size_t>(w) * h;
  const size_t valid = static_cast<size_t>(ow) * oh;
  const double norm = 1.0 / (static_cast<double>(valid) * nc);
  if (grad_a) *grad_a = Image(w, h, nc);

  double total = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int c = 0; c < nc; ++c) {
    for (size_t i = 0; i < plane; ++i) {
      x[i] = a.data[i * nc + c];
      y[i] = b.data[i * nc + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, w, h), my = detail::filter_valid(y, w, h);
    const auto exx = detail::filter_valid(xx, w, h), eyy = detail::filter_valid(yy, w, h);
    const auto exy = detail::filter_valid(xy, w, h);
    std::vector<double> ga(grad_a ? valid : 0), gb(grad_a ? valid : 0), gc(grad_a ? valid : 0);
    for (size_t p = 0; p < valid; ++p) {
      const double vx = exx[p] - mx[p] * mx[p];
      const double vy = eyy[p] - my[p] * my[p];
      const double cxy = exy[p] - mx[p] * my[p];
      const double a1 = 2 * mx[p] * my[p] + kSsimC1, a2 = 2 * cxy + kSsimC2;
      const double b1 = mx[p] * mx[p] + my[p] * my[p] + kSsimC1, b2 = vx + vy + kSsimC2;
      const double s = a1 * a2 / (b1 * b2);
      total += s;
      if (grad_a) {
        // Arranged so every term is exactly zero when a == b; Adam would
        // otherwise blow rounding noise up to full-size steps.
        const double d_mx = 2 * s * (my[p] - mx[p]) * (my[p] * (mx[p] + my[p]) + kSsimC1) / (a1 * b1);
        ga[p] = norm * (d_mx + 2 * s * (mx[p] / b2 - my[p] / a2));
        gb[p] = -(norm * 2 * s / b2);
        gc[p] = a2 != 0.0 ? norm * 2 * s / a2 : norm * 2 * a1 / (b1 * b2);
      }
    }
    if (grad_a) {
      const auto fa = detail::filter_adjoint(ga, w, h), fb = detail::filter_adjoint(gb, w, h),
                 fc = detail::filter_adjoint(gc, w, h);
      for (size_t i = 0; i < plane; ++i) grad_a->data[i * nc + c] = fa[i] + x[i] * fb[i] + y[i] * fc[i];
    }
  }
  return total * norm;
}

// ---------------------------------------------------------------------------
// Loss: mean |I^ - I| + l1 * mean (alpha - m)^2 + l2 * (1 - ssim(I^, I)).

struct LossTerms {
  double l1 = 0;
  double mask = 0;
  double ssim = 1;
  double total = 0;
};

inline LossTerms loss_terms(const RenderOutput& out, const TrainingSample& sample, const LossWeights& w,
                            Image* grad_image = nullptr, Image* grad_alpha = nullptr) {
  w.validate();
  if (!out.image.same_shape(sample.image) || !out.alpha.same_shape(sample.mask))
    throw ShapeError("loss: render and sample dimensions differ");
  LossTerms t;
  const double n_img = static_cast<double>(out.image.size());
  const double n_px = static_cast<double>(out.alpha.size());
  if (grad_image) *grad_image = Image(out.image.width, out.image.height, 3);
  if (grad_alpha) *grad_alpha = Image(out.alpha.width, out.alpha.height, 1);
  for (size_t i = 0; i < out.image.size(); ++i) {
    const double d = out.image.data[i] - sample.image.data[i];
    t.l1 += std::abs(d);
    if (grad_image) grad_image->data[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n_img;
  }
  t.l1 /= n_img;
  for (size_t i = 0; i < out.alpha.size(); ++i) {
    const double d = out.alpha.data[i] - sample.mask.data[i];
    t.mask += d * d;
    if (grad_alpha) grad_alpha->data[i] = w.lambda1 * 2 * d / n_px;
  }
  t.mask /= n_px;
  t.total = t.l1 + w.lambda1 * t.mask;
  // With lambda2 == 0 the structural term is skipped entirely and ssim stays 1.
  if (w.lambda2 != 0.0) {
    Image g_ssim;
    t.ssim = ssim(out.image, sample.image, grad_image ? &g_ssim : nullptr);
    if (grad_image)
      for (size_t i = 0; i < g_ssim.size(); ++i) grad_image->data[i] -= w.lambda2 * g_ssim.data[i];
    t.total += w.lambda2 * (1.0 - t.ssim);
  }
  return t;
}

inline double loss(const RenderOutput& out, const TrainingSample& sample, const LossWeights& w) {
  return loss_terms(out, sample, w).total;
}

// ---------------------------------------------------------------------------
// Analytic gradients through rasterization and LBS. Frame parameters and
// skin weights are held fixed.

struct AvatarGradients {
  std::vector<Vec3> positions;
  std::vector<Vec3> log_scales;
  std::vector<Quat> rotations;
  std::vector<double> opacities;  // w.r.t. logits
  std::vector<double> sh;
  double loss = 0;
};

namespace detail {

// d(vec R)/dq for the unnormalized rotation formula; row = 3 * r + c.
inline Eigen::Matrix<double, 9, 4> quat_matrix_jacobian(const Quat& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix<double, 9, 4> j;
  j << 0, 0, -4 * y, -4 * z,       //
      -2 * z, 2 * y, 2 * x, -2 * w,  //
      2 * y, 2 * z, 2 * w, 2 * x,    //
      2 * z, 2 * y, 2 * x, 2 * w,    //
      0, -4 * x, 0, -4 * z,          //
      -2 * x, -2 * w, 2 * z, 2 * y,  //
      -2 * y, 2 * z, -2 * w, 2 * x,  //
      2 * x, 2 * w, 2 * z, 2 * y,    //
      0, -4 * x, -4 * y, 0;
  return j;
}

}  // namespace detail

inline AvatarGradients gradients(const CanonicalAvatar& avatar, const PriorModel& model, const TrainingSample& sample,
                                 const LossWeights& w) {
  std::vector<BlendedTransform> blends;
  const DeformedGaussians g = deform(avatar, model, sample.frame, &blends);
  const RenderOutput out = rasterize(g, sample.camera);
  Image grad_image, grad_alpha;
  AvatarGradients grad;
  grad.loss = loss_terms(out, sample, w, &grad_image, &grad_alpha).total;
  const DeformedGradients dg = rasterize_backward(g, sample.camera, grad_image, grad_alpha);

  const size_t n = avatar.size();
  grad.positions.resize(n);
  grad.log_scales.resize(n);
  grad.rotations.resize(n);
  grad.opacities.resize(n);
  grad.sh = dg.sh;
  const Mat3& rt = sample.frame.rotation;
  parallel_for(n, [&](size_t i) {
    const Mat3 ra = rt * blends[i].A;
    grad.positions[i] = ra.transpose() * dg.means[i];

    const Mat3 g_t = 0.5 * (dg.covariances[i] + dg.covariances[i].transpose());
    const Mat3 g_c = ra.transpose() * g_t * ra;  // symmetric
    const double qn = avatar.rotations[i].norm();
    const Quat q = avatar.rotations[i] / qn;
    const Mat3 rot = quat_to_matrix(q);
    const Vec3 s = avatar.log_scales[i].array().exp();
    const Mat3 m = rot * s.asDiagonal();
    const Mat3 d_m = 2.0 * g_c * m;
    const Mat3 rtdm = rot.transpose() * d_m;
    for (int a = 0; a < 3; ++a) grad.log_scales[i][a] = rtdm(a, a) * s[a];
    const Mat3 d_rot = d_m * s.asDiagonal();
    Eigen::Matrix<double, 9, 1> d_vec;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) d_vec(3 * r + c) = d_rot(r, c);
    const Quat d_qhat = detail::quat_matrix_jacobian(q).transpose() * d_vec;
    grad.rotations[i] = (d_qhat - q * q.dot(d_qhat)) / qn;

    const double o = g.opacities[i];
    grad.opacities[i] = dg.opacities[i] * o * (1.0 - o);
  });
  return grad;
}

// ---------------------------------------------------------------------------
// Initialization.

// Mean distance from each point to its (up to) three nearest neighbours,
// using a uniform grid.
inline std::vector<double> mean_neighbor_distance(std::span<const Vec3> pts, int neighbors = 3) {
  const size_t n = pts.size();
  std::vector<double> out(n, 0.0);
  if (n < 2) return out;
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = std::max((hi - lo).maxCoeff(), 1e-9);
  const int res = std::max(1, static_cast<int>(std::cbrt(static_cast<double>(n) / 2.0)));
  const double cell = extent / res + 1e-12;
  auto cell_of = [&](const Vec3& p) {
    Eigen::Vector3i c;
    for (int a = 0; a < 3; ++a) c[a] = std::clamp(static_cast<int>((p[a] - lo[a]) / cell), 0, res - 1);
    return c;
  };
  std::vector<std::vector<size_t>> grid(static_cast<size_t>(res) * res * res);
  auto slot = [&](const Eigen::Vector3i& c) { return (static_cast<size_t>(c.z()) * res + c.y()) * res + c.x(); };
  for (size_t i = 0; i < n; ++i) grid[slot(cell_of(pts[i]))].push_back(i);

  const int k = static_cast<int>(std::min<size_t>(static_cast<size_t>(neighbors), n - 1));
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3i c = cell_of(pts[i]);
    std::vector<double> best;
    // Grow the search shell until the k-th candidate is provably nearest.
    for (int ring = 0;; ++ring) {
      best.clear();
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            const Eigen::Vector3i cc = c + Eigen::Vector3i(dx, dy, dz);
            if ((cc.array() < 0).any() || (cc.array() >= res).any()) continue;
            for (size_t j : grid[slot(cc)])
              if (j != i) best.push_back((pts[j] - pts[i]).norm());
          }
      if (static_cast<int>(best.size()) >= k) {
        std::partial_sort(best.begin(), best.begin() + k, best.end());
        if (best[static_cast<size_t>(k - 1)] <= ring * cell || ring >= res) break;
      }
    }
    double sum = 0;
    for (int j = 0; j < k; ++j) sum += best[static_cast<size_t>(j)];
    out[i] = sum / k;
  }
  return out;
}

inline constexpr double kInitScaleFactor = 0.3;
inline constexpr double kInitOpacity = 0.1;

inline CanonicalAvatar init_from_prior(const PriorModel& model, int sh_degree = 0) {
  const std::vector<Vec3> verts = canonical_vertices(model);
  CanonicalAvatar a;
  a.sh_degree = sh_degree;
  a.resize(verts.size(), model.joint_count);
  const auto nn = mean_neighbor_distance(verts);
  for (size_t i = 0; i < verts.size(); ++i) {
    a.positions[i] = verts[i];
    const double scale = nn[i] > 0 ? kInitScaleFactor * nn[i] : 0.01;
    a.log_scales[i] = Vec3::Constant(std::log(scale));
    a.rotations[i] = Quat(1, 0, 0, 0);
    a.opacities[i] = logit(kInitOpacity);
  }
  std::fill(a.sh.begin(), a.sh.end(), 0.0);
  a.gauss_weights = model.skin_weights;
  return a;
}

// ---------------------------------------------------------------------------
// Fitting.

struct LearningRates {
  double position = 2e-4;
  double log_scale = 5e-3;
  double rotation = 1e-3;
  double opacity = 5e-2;
  double sh = 2.5e-3;
};

struct FitConfig {
  int iterations = 2000;
  LearningRates lr;
  double position_decay = 0.99;  // applied every 100 iterations
  int prune_interval = 100;
  double prune_opacity_threshold = 0.005;
  uint64_t seed = 0;

  void validate() const {
    if (iterations < 1) throw ConfigError("fit: iterations must be >= 1");
    if (!(lr.position > 0 && lr.log_scale > 0 && lr.rotation > 0 && lr.opacity > 0 && lr.sh > 0))
      throw ConfigError("fit: learning rates must be positive");
    if (prune_interval < 1) throw ConfigError("fit: prune interval must be >= 1");
  }
};

struct PruneEvent {
  int iteration = 0;
  size_t removed = 0;
  double loss_before = 0;
  double loss_after = 0;
};

struct FitResult {
  CanonicalAvatar avatar;
  std::vector<double> loss_log;
  std::vector<PruneEvent> prunes;
};

namespace detail {

// Adam moments for a flat parameter block.
struct AdamState {
  std::vector<double> m, v;
  void resize(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
  void keep(const std::vector<bool>& flags, size_t stride) {
    size_t out = 0;
    for (size_t i = 0; i < flags.size(); ++i) {
      if (!flags[i]) continue;
      for (size_t k = 0; k < stride; ++k) {
        m[out * stride + k] = m[i * stride + k];
        v[out * stride + k] = v[i * stride + k];
      }
      ++out;
    }
    m.resize(out * stride);
    v.resize(out * stride);
  }
  void step(double* param, const double* grad, size_t count, double lr, int t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (size_t i = 0; i < count; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grad[i];
      v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
      param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

inline double sample_loss(const CanonicalAvatar& a, const PriorModel& model, const TrainingSample& s,
                          const LossWeights& w) {
  return loss(rasterize(deform(a, model, s.frame), s.camera), s, w);
}

}  // namespace detail

inline FitResult fit(const PriorModel& model, std::span<const TrainingSample> samples, const FitConfig& cfg,
                     const LossWeights& w, std::optional<CanonicalAvatar> initial = std::nullopt, int sh_degree = 1) {
  if (samples.empty()) throw ConfigError("fit: need at least one training sample");
  cfg.validate();
  w.validate();
  FitResult result;
  CanonicalAvatar& a = result.avatar;
  a = initial ? std::move(*initial) : init_from_prior(model, sh_degree);
  a.validate();

  const size_t b3 = 3 * static_cast<size_t>(a.sh_basis());
  detail::AdamState pos, scl, rot, opa, shs;
  pos.resize(3 * a.size());
  scl.resize(3 * a.size());
  rot.resize(4 * a.size());
  opa.resize(a.size());
  shs.resize(b3 * a.size());

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick(0, samples.size() - 1);
  result.loss_log.reserve(static_cast<size_t>(cfg.iterations));
  std::vector<double> flat;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const TrainingSample& s = samples[pick(rng)];
    const AvatarGradients g = gradients(a, model, s, w);
    result.loss_log.push_back(g.loss);

    const double pos_lr = cfg.lr.position * std::pow(cfg.position_decay, (it - 1) / 100);
    const size_t n = a.size();
    pos.step(a.positions.front().data(), g.positions.front().data(), 3 * n, pos_lr, it);
    scl.step(a.log_scales.front().data(), g.log_scales.front().data(), 3 * n, cfg.lr.log_scale, it);
    const std::vector<Quat> before = a.rotations;
    rot.step(a.rotations.front().data(), g.rotations.front().data(), 4 * n, cfg.lr.rotation, it);
    opa.step(a.opacities.data(), g.opacities.data(), n, cfg.lr.opacity, it);
    shs.step(a.sh.data(), g.sh.data(), b3 * n, cfg.lr.sh, it);
    // Untouched quaternions are left alone so an exact optimum stays put.
    for (size_t i = 0; i < n; ++i)
      if (a.rotations[i] != before[i]) a.rotations[i].normalize();
    for (auto& l : a.log_scales) l = l.cwiseMax(std::log(2e-7)).cwiseMin(std::log(5.0));

    if (it % cfg.prune_interval == 0 && it < cfg.iterations) {
      std::vector<bool> keep(n);
      size_t kept = 0;
      for (size_t i = 0; i < n; ++i) {
        keep[i] = sigmoid(a.opacities[i]) >= cfg.prune_opacity_threshold;
        kept += keep[i];
      }
      if (kept == 0) throw FitError("fit: every Gaussian was pruned");
      if (kept < n) {
        PruneEvent ev{it, n - kept, detail::sample_loss(a, model, s, w), 0.0};
        a.keep(keep);
        pos.keep(keep, 3);
        scl.keep(keep, 3);
        rot.keep(keep, 4);
        opa.keep(keep, 1);
        shs.keep(keep, b3);
        ev.loss_after = detail::sample_loss(a, model, s, w);
        result.prunes.push_back(ev);
      }
    }
  }
  return result;
}

}  // namespace gavatar
