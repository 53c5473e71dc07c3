#pragma once

// CPU splatting rasterizer: EWA projection, SH shading and front-to-back
// alpha compositing, plus the matching backward pass.

#include <gavatar/avatar.hpp>
#include <gavatar/image.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace gavatar {

inline constexpr double kAlphaCap = 0.99;
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTransmittanceStop = 1e-4;
inline constexpr double kDilation = 0.3;
inline constexpr double kSh0 = 0.28209479177387814;
inline constexpr double kSh1 = 0.4886025119029199;
inline constexpr double kSh2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                   -1.0925484305920792, 0.5462742152960396};

struct Camera {
  Mat3 rotation = Mat3::Identity();  // world to camera
  Vec3 translation = Vec3::Zero();
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  double near = 0.01;

  Vec3 center() const { return -rotation.transpose() * translation; }

  void validate() const {
    if ((rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        rotation.determinant() < 0)
      throw ConfigError("camera: rotation not orthonormal");
    if (!(fx > 0 && fy > 0)) throw ConfigError("camera: focal lengths must be positive");
    if (width < 1 || height < 1) throw ConfigError("camera: empty image");
  }

  // Camera at `eye` looking at `target`; image y points down, z forward.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
    const Vec3 z = (target - eye).normalized();
    const Vec3 x = z.cross(up).normalized();
    const Vec3 y = z.cross(x);
    Camera cam;
    cam.rotation.row(0) = x.transpose();
    cam.rotation.row(1) = y.transpose();
    cam.rotation.row(2) = z.transpose();
    cam.translation = -cam.rotation * eye;
    cam.fx = cam.fy = focal;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.width = width;
    cam.height = height;
    return cam;
  }
};

struct RenderOutput {
  Image image;  // H x W x 3
  Image alpha;  // H x W x 1
};

struct RenderOptions {
  bool bbox_culling = true;
};

// ---------------------------------------------------------------------------
// Spherical harmonics, real basis up to degree 2.

inline void sh_basis(const Vec3& d, int degree, double* out) {
  out[0] = kSh0;
  if (degree < 1) return;
  const double x = d.x(), y = d.y(), z = d.z();
  out[1] = -kSh1 * y;
  out[2] = kSh1 * z;
  out[3] = -kSh1 * x;
  if (degree < 2) return;
  out[4] = kSh2[0] * x * y;
  out[5] = kSh2[1] * y * z;
  out[6] = kSh2[2] * (2 * z * z - x * x - y * y);
  out[7] = kSh2[3] * x * z;
  out[8] = kSh2[4] * (x * x - y * y);
}

// Row k holds d(basis_k)/d(direction).
inline void sh_basis_gradient(const Vec3& d, int degree, Eigen::Matrix<double, 9, 3>& out) {
  out.setZero();
  if (degree < 1) return;
  const double x = d.x(), y = d.y(), z = d.z();
  out.row(1) << 0, -kSh1, 0;
  out.row(2) << 0, 0, kSh1;
  out.row(3) << -kSh1, 0, 0;
  if (degree < 2) return;
  out.row(4) << kSh2[0] * y, kSh2[0] * x, 0;
  out.row(5) << 0, kSh2[1] * z, kSh2[1] * y;
  out.row(6) << -2 * kSh2[2] * x, -2 * kSh2[2] * y, 4 * kSh2[2] * z;
  out.row(7) << kSh2[3] * z, 0, kSh2[3] * x;
  out.row(8) << 2 * kSh2[4] * x, -2 * kSh2[4] * y, 0;
}

inline int sh_degree_for_basis(int basis) {
  switch (basis) {
    case 1: return 0;
    case 4: return 1;
    case 9: return 2;
    default: throw ConfigError("eval_sh: unsupported coefficient count " + std::to_string(basis));
  }
}

// Unclamped color 0.5 + sum_k c_k Y_k(dir) for each channel.
inline Vec3 eval_sh_raw(std::span<const double> coeffs, const Vec3& dir) {
  if (coeffs.size() % 3 != 0) throw ConfigError("eval_sh: coefficient count must be a multiple of 3");
  const int b = static_cast<int>(coeffs.size() / 3);
  const int degree = sh_degree_for_basis(b);
  double basis[9];
  sh_basis(dir, degree, basis);
  Vec3 rgb = Vec3::Constant(0.5);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < b; ++k) rgb[c] += coeffs[static_cast<size_t>(c * b + k)] * basis[k];
  return rgb;
}

inline Vec3 eval_sh(std::span<const double> coeffs, const Vec3& dir) {
  return eval_sh_raw(coeffs, dir).cwiseMax(0.0).cwiseMin(1.0);
}

// ---------------------------------------------------------------------------
// Projection.

struct ProjectedGaussian {
  Vec2 mean;
  Mat2 cov;  // includes the anti-aliasing dilation
  double depth = 0;
};

inline Eigen::Matrix<double, 2, 3> perspective_jacobian(const Vec3& p, const Camera& cam) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * iz, 0, -cam.fx * p.x() * iz * iz, 0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return j;
}

inline std::optional<ProjectedGaussian> project_gaussian(const Vec3& mean, const Mat3& sigma, const Camera& cam) {
  const Vec3 p = cam.rotation * mean + cam.translation;
  if (p.z() < cam.near) return std::nullopt;
  const Eigen::Matrix<double, 2, 3> jw = perspective_jacobian(p, cam) * cam.rotation;
  ProjectedGaussian out;
  out.mean = Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
  out.cov = jw * sigma * jw.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.cov.diagonal().array() += kDilation;
  out.depth = p.z();
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization.

namespace detail {

struct Splat {
  size_t index = 0;
  Vec2 mean;
  Mat2 conic;  // inverse screen covariance
  double opacity = 0;
  Vec3 color;
  Vec3 color_raw;
  Vec3 view_dir;
  double view_dist = 0;
  double depth = 0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

inline std::vector<Splat> prepare_splats(const DeformedGaussians& g, const Camera& cam, const RenderOptions& opt) {
  const Vec3 eye = cam.center();
  std::vector<Splat> splats;
  splats.reserve(g.size());
  const int b = sh_basis_count(g.sh_degree);
  for (size_t i = 0; i < g.size(); ++i) {
    const auto proj = project_gaussian(g.world_means[i], g.covariances[i], cam);
    if (!proj) continue;
    const double det = proj->cov.determinant();
    if (!(det > 1e-12)) continue;
    Splat s;
    s.index = i;
    s.mean = proj->mean;
    s.conic = proj->cov.inverse();
    s.opacity = g.opacities[i];
    s.depth = proj->depth;
    const Vec3 v = g.world_means[i] - eye;
    s.view_dist = v.norm();
    s.view_dir = s.view_dist > 0 ? Vec3(v / s.view_dist) : Vec3(0, 0, 1);
    s.color_raw = eval_sh_raw({g.sh_of(i), static_cast<size_t>(3 * b)}, s.view_dir);
    s.color = s.color_raw.cwiseMax(0.0).cwiseMin(1.0);
    if (opt.bbox_culling) {
      // 3 sigma, widened where the opacity keeps alpha above the skip
      // threshold further out.
      const double lambda_max =
          0.5 * (proj->cov.trace() + std::sqrt(std::max(0.0, std::pow(proj->cov(0, 0) - proj->cov(1, 1), 2) +
                                                                 4 * proj->cov(0, 1) * proj->cov(0, 1))));
      const double k = std::max(3.0, std::sqrt(std::max(0.0, 2.0 * std::log(255.0 * s.opacity))));
      const double r = k * std::sqrt(lambda_max);
      s.x0 = std::max(0, static_cast<int>(std::ceil(s.mean.x() - r)));
      s.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.mean.x() + r)));
      s.y0 = std::max(0, static_cast<int>(std::ceil(s.mean.y() - r)));
      s.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.mean.y() + r)));
      if (s.x0 > s.x1 || s.y0 > s.y1) continue;
    } else {
      s.x0 = 0;
      s.x1 = cam.width - 1;
      s.y0 = 0;
      s.y1 = cam.height - 1;
    }
    splats.push_back(s);
  }
  std::stable_sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });
  return splats;
}

struct Contribution {
  size_t splat = 0;
  double alpha = 0;
  double gauss = 0;  // exp(power)
  double transmittance = 0;  // before this splat
  bool capped = false;
};

// Front-to-back compositing of one pixel; returns final transmittance.
template <class Visit>
double composite_pixel(const std::vector<Splat>& splats, int x, int y, Visit&& visit) {
  double t = 1.0;
  for (size_t s = 0; s < splats.size(); ++s) {
    const Splat& sp = splats[s];
    if (x < sp.x0 || x > sp.x1 || y < sp.y0 || y > sp.y1) continue;
    const double dx = x - sp.mean.x();
    const double dy = y - sp.mean.y();
    const double power = -0.5 * (sp.conic(0, 0) * dx * dx + 2 * sp.conic(0, 1) * dx * dy + sp.conic(1, 1) * dy * dy);
    const double gauss = std::exp(power);
    const double raw = sp.opacity * gauss;
    const double alpha = std::min(kAlphaCap, raw);
    if (alpha < kAlphaSkip) continue;
    visit(Contribution{s, alpha, gauss, t, raw > kAlphaCap});
    t *= 1.0 - alpha;
    if (t < kTransmittanceStop) break;
  }
  return t;
}

}  // namespace detail

inline RenderOutput rasterize(const DeformedGaussians& g, const Camera& cam, const RenderOptions& opt = {}) {
  cam.validate();
  const auto splats = detail::prepare_splats(g, cam, opt);
  RenderOutput out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1)};
  parallel_for(static_cast<size_t>(cam.height), [&](size_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < cam.width; ++x) {
      Vec3 c = Vec3::Zero();
      const double t = detail::composite_pixel(splats, x, y, [&](const detail::Contribution& k) {
        c += splats[k.splat].color * (k.alpha * k.transmittance);
      });
      for (int ch = 0; ch < 3; ++ch) out.image.at(x, y, ch) = std::clamp(c[ch], 0.0, 1.0);
      out.alpha.at(x, y) = std::clamp(1.0 - t, 0.0, 1.0);
    }
  });
  return out;
}

// Gradients of a scalar loss with respect to the renderer inputs.
struct DeformedGradients {
  std::vector<Vec3> means;
  std::vector<Mat3> covariances;
  std::vector<double> opacities;
  std::vector<double> sh;
};

// Backward pass of rasterize(). Per-row-block partial sums are reduced in a
// fixed order, so results do not depend on the thread count.
inline DeformedGradients rasterize_backward(const DeformedGaussians& g, const Camera& cam, const Image& grad_image,
                                            const Image& grad_alpha, const RenderOptions& opt = {}) {
  const auto splats = detail::prepare_splats(g, cam, opt);
  const size_t ns = splats.size();
  const int b = sh_basis_count(g.sh_degree);

  struct Partial {
    std::vector<Vec2> mean;
    std::vector<Mat2> conic;
    std::vector<double> opacity;
    std::vector<Vec3> color;
  };
  constexpr int kRowsPerBlock = 8;
  const size_t blocks = static_cast<size_t>((cam.height + kRowsPerBlock - 1) / kRowsPerBlock);
  std::vector<Partial> partial(blocks);

  parallel_for(blocks, [&](size_t blk) {
    Partial& acc = partial[blk];
    acc.mean.assign(ns, Vec2::Zero());
    acc.conic.assign(ns, Mat2::Zero());
    acc.opacity.assign(ns, 0.0);
    acc.color.assign(ns, Vec3::Zero());
    std::vector<detail::Contribution> list;
    const int y_end = std::min(cam.height, static_cast<int>(blk + 1) * kRowsPerBlock);
    for (int y = static_cast<int>(blk) * kRowsPerBlock; y < y_end; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        list.clear();
        const double t_final =
            detail::composite_pixel(splats, x, y, [&](const detail::Contribution& k) { list.push_back(k); });
        const Vec3 g_color(grad_image.at(x, y, 0), grad_image.at(x, y, 1), grad_image.at(x, y, 2));
        // The output clamp is never active: composited values stay in [0, 1].
        const double g_alpha = grad_alpha.at(x, y);
        Vec3 behind = Vec3::Zero();  // sum over later splats of c_j a_j T_j
        for (size_t r = list.size(); r-- > 0;) {
          const auto& k = list[r];
          const detail::Splat& sp = splats[k.splat];
          acc.color[k.splat] += g_color * (k.alpha * k.transmittance);
          const double one_minus = 1.0 - k.alpha;
          const double d_alpha = g_color.dot(sp.color * k.transmittance - behind / one_minus) +
                                 g_alpha * t_final / one_minus;
          behind += sp.color * (k.alpha * k.transmittance);
          if (k.capped) continue;
          acc.opacity[k.splat] += d_alpha * k.gauss;
          const double d_power = d_alpha * sp.opacity * k.gauss;
          const Vec2 d(x - sp.mean.x(), y - sp.mean.y());
          acc.mean[k.splat] += d_power * (sp.conic * d);
          acc.conic[k.splat] += d_power * (-0.5 * d * d.transpose());
        }
      }
    }
  });

  DeformedGradients out;
  const size_t n = g.size();
  out.means.assign(n, Vec3::Zero());
  out.covariances.assign(n, Mat3::Zero());
  out.opacities.assign(n, 0.0);
  out.sh.assign(g.sh.size(), 0.0);
  for (size_t s = 0; s < ns; ++s) {
    Vec2 d_mean2 = Vec2::Zero();
    Mat2 d_conic = Mat2::Zero();
    double d_opacity = 0;
    Vec3 d_color = Vec3::Zero();
    for (const auto& p : partial) {
      d_mean2 += p.mean[s];
      d_conic += p.conic[s];
      d_opacity += p.opacity[s];
      d_color += p.color[s];
    }
    const detail::Splat& sp = splats[s];
    const size_t i = sp.index;
    out.opacities[i] = d_opacity;

    // Color through the clamp and the SH basis.
    for (int c = 0; c < 3; ++c)
      if (!(sp.color_raw[c] > 0.0 && sp.color_raw[c] < 1.0)) d_color[c] = 0.0;
    double basis[9];
    sh_basis(sp.view_dir, g.sh_degree, basis);
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < b; ++k) out.sh[i * 3 * b + static_cast<size_t>(c * b + k)] = d_color[c] * basis[k];
    Vec3 d_mean = Vec3::Zero();
    if (g.sh_degree > 0) {
      Eigen::Matrix<double, 9, 3> dbasis;
      sh_basis_gradient(sp.view_dir, g.sh_degree, dbasis);
      Vec3 d_dir = Vec3::Zero();
      const double* coeffs = g.sh_of(i);
      for (int c = 0; c < 3; ++c)
        for (int k = 1; k < b; ++k) d_dir += d_color[c] * coeffs[c * b + k] * dbasis.row(k).transpose();
      d_mean += (Mat3::Identity() - sp.view_dir * sp.view_dir.transpose()) * d_dir / sp.view_dist;
    }

    // Screen covariance from the conic gradient: dL/dS = -S^-1 G S^-1.
    const Mat2 d_cov2 = -sp.conic * d_conic * sp.conic;
    const Vec3 p = cam.rotation * g.world_means[i] + cam.translation;
    const Eigen::Matrix<double, 2, 3> j = perspective_jacobian(p, cam);
    const Mat3 v = cam.rotation * g.covariances[i] * cam.rotation.transpose();
    const Mat3 d_v = j.transpose() * d_cov2 * j;
    const Eigen::Matrix<double, 2, 3> d_j = (d_cov2 + d_cov2.transpose()) * j * v;
    const double iz = 1.0 / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3 d_p;
    d_p.x() = d_j(0, 2) * (-cam.fx * iz2);
    d_p.y() = d_j(1, 2) * (-cam.fy * iz2);
    d_p.z() = d_j(0, 0) * (-cam.fx * iz2) + d_j(0, 2) * (2 * cam.fx * p.x() * iz3) +
              d_j(1, 1) * (-cam.fy * iz2) + d_j(1, 2) * (2 * cam.fy * p.y() * iz3);
    d_p += j.transpose() * d_mean2;
    d_mean += cam.rotation.transpose() * d_p;
    out.means[i] = d_mean;
    out.covariances[i] = cam.rotation.transpose() * d_v * cam.rotation;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Camera sets as JSON: [{"rotation": [[..],[..],[..]], "translation": [..],
// "fx":.., "fy":.., "cx":.., "cy":.., "width":.., "height":.., "near":..}, ...]

inline nlohmann::json camera_to_json(const Camera& c) {
  nlohmann::json rot = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) rot.push_back({c.rotation(i, 0), c.rotation(i, 1), c.rotation(i, 2)});
  return {{"rotation", rot},
          {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}},
          {"fx", c.fx},
          {"fy", c.fy},
          {"cx", c.cx},
          {"cy", c.cy},
          {"width", c.width},
          {"height", c.height},
          {"near", c.near}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = j.at("rotation").at(r).at(k).get<double>();
  for (int k = 0; k < 3; ++k) c.translation(k) = j.at("translation").at(k).get<double>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.near = j.value("near", 0.01);
  c.validate();
  return c;
}

inline void save_cameras(std::span<const Camera> cams, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cams) arr.push_back(camera_to_json(c));
  const std::string text = arr.dump(2);
  write_file(path, {reinterpret_cast<const uint8_t*>(text.data()), text.size()});
}

inline std::vector<Camera> load_cameras(const std::string& path) {
  const auto bytes = read_file(path);
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("cameras: " + std::string(e.what()));
  }
  std::vector<Camera> cams;
  for (const auto& j : arr) cams.push_back(camera_from_json(j));
  return cams;
}

}  // namespace gavatar
