#pragma once

// Parametric human prior: skeleton, shape blendshapes, skinning weights and
// forward kinematics. The toy prior keeps the 24-joint / 72-pose / 10-shape
// layout of the usual body models but is generated procedurally.

#include <gavatar/common.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace gavatar {

inline constexpr int kShapeCount = 10;
inline constexpr int kDefaultJointCount = 24;
inline constexpr int kMaxInfluences = 4;

struct PriorModel {
  int joint_count = 0;
  std::vector<int> parent;        // parent[0] == -1
  std::vector<Vec3> rest_joints;  // meters, canonical (star) configuration at beta = 0
  std::vector<Vec3> rest_vertices;
  RowMatrix shape_basis;        // (3V) x kShapeCount, rows ordered vertex-major then axis
  RowMatrix joint_shape_basis;  // (3J) x kShapeCount
  RowMatrix skin_weights;       // V x J, row-stochastic, <= 4 nonzeros per row
  Eigen::VectorXd canonical_pose;   // 3J axis-angle (radians)
  Eigen::VectorXd canonical_shape;  // kShapeCount

  int vertex_count() const { return static_cast<int>(rest_vertices.size()); }
  int pose_size() const { return 3 * joint_count; }

  PriorModel& validate();
};

struct PoseShape {
  Eigen::VectorXd theta;
  Eigen::VectorXd beta;
};

// Per-joint transform taking a point of the shaped rest configuration to the
// posed configuration: x' = rotation[k] * x + translation[k].
struct JointTransforms {
  std::vector<Mat3> rotation;
  std::vector<Vec3> translation;
  std::vector<Vec3> joint_positions;
};

struct ForwardResult {
  std::vector<Vec3> vertices;
  JointTransforms transforms;
};

// ---------------------------------------------------------------------------

inline Mat3 skew(const Vec3& v) {
  Mat3 k;
  k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return k;
}

inline Mat3 rodrigues(const Vec3& axis_angle) {
  const double angle2 = axis_angle.squaredNorm();
  const Mat3 k = skew(axis_angle);
  double a, b;  // sin(t)/t, (1 - cos(t))/t^2
  if (angle2 < 1e-12) {
    a = 1.0 - angle2 / 6.0;
    b = 0.5 - angle2 / 24.0;
  } else {
    const double angle = std::sqrt(angle2);
    a = std::sin(angle) / angle;
    b = (1.0 - std::cos(angle)) / angle2;
  }
  return Mat3::Identity() + a * k + b * k * k;
}

// Wraps an axis-angle vector so that its angle lies in [0, pi]; every
// component then lies in [-pi, pi].
inline Vec3 canonicalize_axis_angle(const Vec3& v) {
  const double angle = v.norm();
  if (angle <= kPi) return v;
  double wrapped = std::fmod(angle + kPi, 2.0 * kPi);
  if (wrapped < 0) wrapped += 2.0 * kPi;
  wrapped -= kPi;
  return v * (wrapped / angle);
}

inline PriorModel& PriorModel::validate() {
  const int j = joint_count;
  const int v = vertex_count();
  if (j < 1 || static_cast<int>(parent.size()) != j || static_cast<int>(rest_joints.size()) != j)
    throw ShapeError("prior: joint arrays inconsistent");
  if (parent[0] != -1) throw ConfigError("prior: joint 0 must be the root");
  for (int k = 1; k < j; ++k)
    if (parent[k] < 0 || parent[k] >= k) throw ConfigError("prior: joints not in topological order");
  if (shape_basis.rows() != 3 * v || shape_basis.cols() != kShapeCount ||
      joint_shape_basis.rows() != 3 * j || joint_shape_basis.cols() != kShapeCount ||
      skin_weights.rows() != v || skin_weights.cols() != j || canonical_pose.size() != 3 * j ||
      canonical_shape.size() != kShapeCount)
    throw ShapeError("prior: array dimensions inconsistent");
  for (int r = 0; r < v; ++r) {
    int nonzero = 0;
    double sum = 0;
    for (int k = 0; k < j; ++k) {
      const double w = skin_weights(r, k);
      if (w < 0) throw ContractError("prior: negative skin weight");
      if (w > 0) ++nonzero;
      sum += w;
    }
    if (nonzero > kMaxInfluences || std::abs(sum - 1.0) > 1e-9)
      throw ContractError("prior: skin weight row " + std::to_string(r) + " invalid");
  }
  return *this;
}

inline PoseShape canonical_pose_shape(const PriorModel& m) { return {m.canonical_pose, m.canonical_shape}; }

inline ForwardResult forward(const PriorModel& m, const PoseShape& ps) {
  const int nj = m.joint_count;
  const int nv = m.vertex_count();
  if (ps.theta.size() != 3 * nj || ps.beta.size() != kShapeCount)
    throw ShapeError("forward: pose/shape dimensions do not match the model");

  const Eigen::VectorXd joint_offsets = m.joint_shape_basis * ps.beta;
  std::vector<Vec3> shaped_joints(nj);
  for (int k = 0; k < nj; ++k) shaped_joints[k] = m.rest_joints[k] + joint_offsets.segment<3>(3 * k);

  ForwardResult out;
  JointTransforms& tf = out.transforms;
  tf.rotation.resize(nj);
  tf.translation.resize(nj);
  tf.joint_positions.resize(nj);
  for (int k = 0; k < nj; ++k) {
    // Rotations are relative to the canonical pose, so theta == canonical
    // yields identity transforms.
    const Mat3 local = rodrigues(ps.theta.segment<3>(3 * k)) *
                       rodrigues(m.canonical_pose.segment<3>(3 * k)).transpose();
    const int p = m.parent[k];
    if (p < 0) {
      tf.rotation[k] = local;
      tf.joint_positions[k] = shaped_joints[k];
    } else {
      tf.rotation[k] = tf.rotation[p] * local;
      tf.joint_positions[k] = tf.joint_positions[p] + tf.rotation[p] * (shaped_joints[k] - shaped_joints[p]);
    }
    tf.translation[k] = tf.joint_positions[k] - tf.rotation[k] * shaped_joints[k];
  }

  const Eigen::VectorXd vertex_offsets = m.shape_basis * ps.beta;
  out.vertices.resize(nv);
  for (int v = 0; v < nv; ++v) {
    const Vec3 rest = m.rest_vertices[v] + vertex_offsets.segment<3>(3 * v);
    Vec3 acc = Vec3::Zero();
    for (int k = 0; k < nj; ++k) {
      const double w = m.skin_weights(v, k);
      if (w != 0.0) acc += w * (tf.rotation[k] * rest + tf.translation[k]);
    }
    out.vertices[v] = acc;
  }
  return out;
}

inline std::vector<Vec3> canonical_vertices(const PriorModel& m) {
  return forward(m, canonical_pose_shape(m)).vertices;
}

// ---------------------------------------------------------------------------
// Procedural prior.

namespace detail {

struct Bone {
  int from = 0;    // start joint
  Vec3 a, b;       // segment endpoints
  double radius = 0;
  int driver = 0;  // joint whose transform moves this bone
};

inline double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

// Forward kinematics with absolute axis-angle rotations over a template
// skeleton given as parent-relative offsets.
inline std::vector<Vec3> pose_template(const std::vector<int>& parent, const std::vector<Vec3>& offsets,
                                       const Eigen::VectorXd& theta) {
  const size_t n = parent.size();
  std::vector<Mat3> rot(n);
  std::vector<Vec3> pos(n);
  for (size_t k = 0; k < n; ++k) {
    const Mat3 local = rodrigues(theta.segment<3>(3 * static_cast<int>(k)));
    if (parent[k] < 0) {
      rot[k] = local;
      pos[k] = offsets[k];
    } else {
      rot[k] = rot[parent[k]] * local;
      pos[k] = pos[parent[k]] + rot[parent[k]] * offsets[k];
    }
  }
  return pos;
}

inline double bone_radius_smpl(int from, int to) {
  // Torso and head are thick; limbs taper toward hands and feet.
  if (to == 15 || from == 15) return 0.09;
  if (to == 3 || to == 6 || to == 9 || to == 12 || to == 1 || to == 2) return 0.11;
  if (to == 13 || to == 14) return 0.07;
  if (to == 4 || to == 5 || to == 7 || to == 8) return 0.065;
  if (to == 16 || to == 17 || to == 18 || to == 19) return 0.045;
  return 0.035;
}

}  // namespace detail

inline PriorModel build_toy_prior(uint64_t seed, int joint_count = kDefaultJointCount, int vertex_count = 600) {
  if (joint_count < 2) throw ConfigError("build_toy_prior: joint_count must be >= 2");
  if (vertex_count < joint_count) throw ConfigError("build_toy_prior: vertex_count must be >= joint_count");
  if (joint_count > 0xFFFF) throw ConfigError("build_toy_prior: joint_count too large");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };
  auto random_unit = [&] {
    std::normal_distribution<double> n01(0.0, 1.0);
    Vec3 d;
    do {
      d = Vec3(n01(rng), n01(rng), n01(rng));
    } while (d.norm() < 1e-6);
    return d.normalized();
  };

  PriorModel m;
  m.joint_count = joint_count;
  std::vector<Vec3> offsets(joint_count);
  Eigen::VectorXd star = Eigen::VectorXd::Zero(3 * joint_count);
  std::vector<double> radius(joint_count, 0.05);

  if (joint_count == kDefaultJointCount) {
    // 24-joint humanoid in a T-pose at theta = 0 (y up, +x = subject's left).
    m.parent = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
    const double tpose[24][3] = {
        {0, 0, 0},        {0.07, -0.09, 0}, {-0.07, -0.09, 0}, {0, 0.11, 0},      {0, -0.38, 0},
        {0, -0.38, 0},    {0, 0.13, 0},     {0, -0.40, 0},     {0, -0.40, 0},     {0, 0.05, 0},
        {0, -0.05, 0.12}, {0, -0.05, 0.12}, {0, 0.21, 0},      {0.08, 0.12, 0},   {-0.08, 0.12, 0},
        {0, 0.09, 0.03},  {0.10, 0.03, 0},  {-0.10, 0.03, 0},  {0.26, 0, 0},      {-0.26, 0, 0},
        {0.25, 0, 0},     {-0.25, 0, 0},    {0.08, 0, 0},      {-0.08, 0, 0}};
    const double stature = uniform(0.92, 1.08);
    for (int k = 0; k < joint_count; ++k)
      offsets[k] = stature * uniform(0.95, 1.05) * Vec3(tpose[k][0], tpose[k][1], tpose[k][2]);
    // Star pose: arms raised and legs spread outward in the frontal plane.
    star.segment<3>(3 * 16) = Vec3(0, 0, 0.55);
    star.segment<3>(3 * 17) = Vec3(0, 0, -0.55);
    star.segment<3>(3 * 1) = Vec3(0, 0, 0.35);
    star.segment<3>(3 * 2) = Vec3(0, 0, -0.35);
    for (int k = 1; k < joint_count; ++k)
      for (int a = 0; a < 3; ++a) star(3 * k + a) += uniform(-0.04, 0.04);
  } else {
    m.parent.assign(joint_count, -1);
    offsets[0] = Vec3::Zero();
    for (int k = 1; k < joint_count; ++k) {
      m.parent[k] = std::max(0, k - 1 - static_cast<int>(rng() % 3));
      offsets[k] = uniform(0.12, 0.22) * random_unit();
      for (int a = 0; a < 3; ++a) star(3 * k + a) = uniform(-0.3, 0.3);
    }
  }

  // Rejection keeps the generic tree free of near-coincident joints.
  m.rest_joints = detail::pose_template(m.parent, offsets, star);
  if (joint_count != kDefaultJointCount) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      bool ok = true;
      for (int a = 0; a < joint_count && ok; ++a)
        for (int b = a + 1; b < joint_count && ok; ++b)
          if ((m.rest_joints[a] - m.rest_joints[b]).norm() < 0.03) ok = false;
      if (ok) break;
      for (int k = 1; k < joint_count; ++k) offsets[k] = uniform(0.12, 0.22) * random_unit();
      m.rest_joints = detail::pose_template(m.parent, offsets, star);
    }
  }
  m.canonical_pose = star;

  // Bones: one per parent-child pair, plus an end segment past every leaf.
  std::vector<detail::Bone> bones;
  std::vector<int> child_count(joint_count, 0);
  for (int k = 1; k < joint_count; ++k) {
    const int p = m.parent[k];
    ++child_count[p];
    const double r = joint_count == kDefaultJointCount ? detail::bone_radius_smpl(p, k) : 0.05;
    bones.push_back({p, m.rest_joints[p], m.rest_joints[k], r, p});
  }
  for (int k = 1; k < joint_count; ++k) {
    if (child_count[k] != 0) continue;
    const Vec3 dir = m.rest_joints[k] - m.rest_joints[m.parent[k]];
    const double r = joint_count == kDefaultJointCount ? detail::bone_radius_smpl(k, k) : 0.05;
    bones.push_back({k, m.rest_joints[k], m.rest_joints[k] + 0.5 * dir, r, k});
  }

  std::vector<double> area(bones.size());
  for (size_t b = 0; b < bones.size(); ++b) area[b] = ((bones[b].b - bones[b].a).norm() + 1e-3) * bones[b].radius;
  std::discrete_distribution<size_t> pick_bone(area.begin(), area.end());

  m.rest_vertices.resize(vertex_count);
  for (int v = 0; v < vertex_count; ++v) {
    const detail::Bone& bone = bones[pick_bone(rng)];
    const Vec3 axis = bone.b - bone.a;
    const double t = uni(rng);
    Vec3 radial = random_unit();
    if (axis.norm() > 1e-9) {
      const Vec3 u = axis.normalized();
      radial = radial - radial.dot(u) * u;
      if (radial.norm() < 1e-6) radial = u.unitOrthogonal();
      radial.normalize();
    }
    m.rest_vertices[v] = bone.a + t * axis + bone.radius * uniform(0.85, 1.0) * radial;
  }

  // Inverse-distance falloff to bone segments, top 4 driving joints kept.
  m.skin_weights = RowMatrix::Zero(vertex_count, joint_count);
  for (int v = 0; v < vertex_count; ++v) {
    std::vector<double> per_joint(joint_count, 0.0);
    for (const auto& bone : bones) {
      const double d = std::max(0.0, detail::segment_distance(m.rest_vertices[v], bone.a, bone.b) - 0.5 * bone.radius);
      per_joint[bone.driver] += 1.0 / std::pow(d + 0.01, 4);
    }
    std::vector<int> order(joint_count);
    for (int k = 0; k < joint_count; ++k) order[k] = k;
    std::partial_sort(order.begin(), order.begin() + std::min(kMaxInfluences, joint_count), order.end(),
                      [&](int a, int b) { return per_joint[a] > per_joint[b] || (per_joint[a] == per_joint[b] && a < b); });
    double sum = 0;
    for (int i = 0; i < std::min(kMaxInfluences, joint_count); ++i) sum += per_joint[order[i]];
    for (int i = 0; i < std::min(kMaxInfluences, joint_count); ++i)
      m.skin_weights(v, order[i]) = per_joint[order[i]] / sum;
  }

  // Shape bases: smooth sinusoid fields, scaled so that |basis . beta| <= 5 cm
  // at every vertex whenever |beta|_inf <= 2.
  struct Wave {
    Vec3 k;
    double phase;
    Vec3 amp;
  };
  std::vector<std::vector<Wave>> fields(kShapeCount);
  for (auto& field : fields)
    for (int w = 0; w < 3; ++w)
      field.push_back({uniform(1.0, 4.0) * random_unit(), uniform(0, 2 * kPi),
                       Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1))});
  auto eval_field = [&](int s, const Vec3& x) {
    Vec3 out = Vec3::Zero();
    for (const auto& w : fields[s]) out += w.amp * std::sin(w.k.dot(x) + w.phase);
    return out;
  };
  m.shape_basis.resize(3 * vertex_count, kShapeCount);
  m.joint_shape_basis.resize(3 * joint_count, kShapeCount);
  for (int s = 0; s < kShapeCount; ++s) {
    for (int v = 0; v < vertex_count; ++v) m.shape_basis.block<3, 1>(3 * v, s) = eval_field(s, m.rest_vertices[v]);
    for (int k = 0; k < joint_count; ++k) m.joint_shape_basis.block<3, 1>(3 * k, s) = eval_field(s, m.rest_joints[k]);
  }
  double worst = 0;
  for (int v = 0; v < vertex_count; ++v) {
    double total = 0;
    for (int s = 0; s < kShapeCount; ++s) total += m.shape_basis.block<3, 1>(3 * v, s).norm();
    worst = std::max(worst, total);
  }
  const double scale = worst > 0 ? 0.025 / worst * 0.999 : 0.0;
  m.shape_basis *= scale;
  m.joint_shape_basis *= scale;

  m.canonical_shape.resize(kShapeCount);
  for (int s = 0; s < kShapeCount; ++s) m.canonical_shape(s) = uniform(-0.5, 0.5);
  return std::move(m.validate());
}

// ---------------------------------------------------------------------------
// GAPM file: "GAPM" | version u16 | J u16 | V u32 | S u16 | reserved u16 |
// parents i32[J] | f32 rest_joints[J*3] | rest_vertices[V*3] |
// shape_basis[V*3*S] | joint_shape_basis[J*3*S] | skin_weights[V*J] |
// canonical_pose[J*3] | canonical_shape[S]

inline constexpr uint16_t kPriorVersion = 1;

inline std::vector<uint8_t> serialize_prior(const PriorModel& m) {
  ByteWriter w;
  w.tag("GAPM");
  w.u16(kPriorVersion);
  w.u16(static_cast<uint16_t>(m.joint_count));
  w.u32(static_cast<uint32_t>(m.vertex_count()));
  w.u16(kShapeCount);
  w.u16(0);
  for (int p : m.parent) w.i32(p);
  for (const auto& j : m.rest_joints)
    for (int a = 0; a < 3; ++a) w.f32(j[a]);
  for (const auto& v : m.rest_vertices)
    for (int a = 0; a < 3; ++a) w.f32(v[a]);
  for (Eigen::Index r = 0; r < m.shape_basis.rows(); ++r)
    for (int s = 0; s < kShapeCount; ++s) w.f32(m.shape_basis(r, s));
  for (Eigen::Index r = 0; r < m.joint_shape_basis.rows(); ++r)
    for (int s = 0; s < kShapeCount; ++s) w.f32(m.joint_shape_basis(r, s));
  for (Eigen::Index r = 0; r < m.skin_weights.rows(); ++r)
    for (Eigen::Index k = 0; k < m.skin_weights.cols(); ++k) w.f32(m.skin_weights(r, k));
  for (Eigen::Index i = 0; i < m.canonical_pose.size(); ++i) w.f32(m.canonical_pose(i));
  for (Eigen::Index i = 0; i < m.canonical_shape.size(); ++i) w.f32(m.canonical_shape(i));
  return std::move(w).bytes();
}

// Weight rows are renormalized in double precision after reading.
inline PriorModel deserialize_prior(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("GAPM", "prior");
  if (r.u16() != kPriorVersion) throw CorruptionError("prior: unsupported version");
  PriorModel m;
  m.joint_count = r.u16();
  const int nv = static_cast<int>(r.u32());
  if (r.u16() != kShapeCount) throw CorruptionError("prior: unexpected shape count");
  r.u16();
  const size_t floats = 3ull * m.joint_count + 3ull * nv + 3ull * nv * kShapeCount +
                        3ull * m.joint_count * kShapeCount + 1ull * nv * m.joint_count + 3ull * m.joint_count +
                        kShapeCount;
  if (r.remaining() != 4ull * m.joint_count + 4ull * floats) throw CorruptionError("prior: length mismatch");
  m.parent.resize(m.joint_count);
  for (auto& p : m.parent) p = r.i32();
  auto read_vec3 = [&](std::vector<Vec3>& out, int n) {
    out.resize(n);
    for (auto& v : out) v = r.f32_vec<3>();
  };
  read_vec3(m.rest_joints, m.joint_count);
  read_vec3(m.rest_vertices, nv);
  auto read_matrix = [&](RowMatrix& out, Eigen::Index rows, Eigen::Index cols) {
    out.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = r.f32();
  };
  read_matrix(m.shape_basis, 3 * nv, kShapeCount);
  read_matrix(m.joint_shape_basis, 3 * m.joint_count, kShapeCount);
  read_matrix(m.skin_weights, nv, m.joint_count);
  for (Eigen::Index i = 0; i < m.skin_weights.rows(); ++i) {
    const double sum = m.skin_weights.row(i).sum();
    if (!(sum > 0)) throw CorruptionError("prior: empty skin weight row");
    m.skin_weights.row(i) /= sum;
  }
  m.canonical_pose.resize(3 * m.joint_count);
  for (Eigen::Index i = 0; i < m.canonical_pose.size(); ++i) m.canonical_pose(i) = r.f32();
  m.canonical_shape.resize(kShapeCount);
  for (Eigen::Index i = 0; i < kShapeCount; ++i) m.canonical_shape(i) = r.f32();
  try {
    m.validate();
  } catch (const Error& e) {
    throw CorruptionError(std::string("prior: ") + e.what());
  }
  return m;
}

inline uint64_t prior_hash(const PriorModel& m) { return fnv1a64(serialize_prior(m)); }

inline void save_prior(const PriorModel& m, const std::string& path) { write_file(path, serialize_prior(m)); }
inline PriorModel load_prior(const std::string& path) { return deserialize_prior(read_file(path)); }

}  // namespace gavatar
