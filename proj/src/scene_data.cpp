#include "nerfloc/scene_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "nerfloc/rng.hpp"

namespace fs = std::filesystem;

namespace nerfloc {

int SceneDataset::index_of(const std::string& id) const {
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].id == id) return static_cast<int>(i);
  }
  throw std::runtime_error("unknown image id: " + id);
}

namespace {

// Aperiodic blob texture: a base palette plus randomly placed Gaussian
// color splats. Locally distinctive (good for patch matching) yet smooth
// enough for the field to fit.
struct TextureCoeffs {
  Eigen::Vector3d base;
  struct Blob {
    Eigen::Vector3d center;
    double inv_two_r2 = 0;
    Eigen::Vector3d color;
  };
  std::vector<Blob> blobs;
  Eigen::Vector3d grad_dir;   // mild large-scale shading gradient
  double grad_amp = 0;

  static TextureCoeffs random(Rng& rng, const Eigen::Vector3d& base,
                              int n_blobs = 24) {
    TextureCoeffs t;
    t.base = base;
    for (int k = 0; k < n_blobs; ++k) {
      Blob b;
      b.center = {rng.uniform(-0.1, 1.1), rng.uniform(-0.1, 1.1),
                  rng.uniform(-0.1, 1.1)};
      const double r = rng.uniform(0.05, 0.16);
      b.inv_two_r2 = 1.0 / (2.0 * r * r);
      b.color = {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95),
                 rng.uniform(0.05, 0.95)};
      t.blobs.push_back(b);
    }
    t.grad_dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    t.grad_amp = rng.uniform(0.05, 0.12);
    return t;
  }

  Eigen::Vector3d color_at(const Eigen::Vector3d& p) const {
    Eigen::Vector3d c = base + grad_amp * (grad_dir.dot(p) - 0.5) * Eigen::Vector3d::Ones();
    for (const auto& b : blobs) {
      const double w = std::exp(-(p - b.center).squaredNorm() * b.inv_two_r2);
      c += w * (b.color - base) * 0.85;
    }
    for (int k = 0; k < 3; ++k) c(k) = std::clamp(c(k), 0.02, 0.98);
    return c;
  }
};

struct Primitive {
  enum Kind { kBox, kSphere } kind = kBox;
  Eigen::Vector3d bmin, bmax;   // box
  Eigen::Vector3d center;       // sphere
  double radius = 0;
  TextureCoeffs texture;
};

// Ray-box slab intersection; returns smallest t > t_min hitting the surface.
std::optional<double> intersect_box(const Ray& ray, const Eigen::Vector3d& bmin,
                                    const Eigen::Vector3d& bmax, bool inside) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double inv = 1.0 / ray.direction(a);
    double lo = (bmin(a) - ray.origin(a)) * inv;
    double hi = (bmax(a) - ray.origin(a)) * inv;
    if (inv < 0) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
    if (t0 > t1) return std::nullopt;
  }
  const double t = inside ? t1 : t0;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

std::optional<double> intersect_sphere(const Ray& ray,
                                       const Eigen::Vector3d& center,
                                       double radius) {
  const Eigen::Vector3d oc = ray.origin - center;
  const double b = oc.dot(ray.direction);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-9) t = -b + sq;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

struct SynthWorld {
  std::vector<Primitive> objects;
  TextureCoeffs walls[6];  // -x +x -y +y -z +z inner faces of the unit cube

  // Nearest hit: color and depth.
  void trace(const Ray& ray, Eigen::Vector3d* color, double* depth) const {
    double best_t = std::numeric_limits<double>::infinity();
    const Primitive* best = nullptr;
    for (const auto& prim : objects) {
      std::optional<double> t;
      if (prim.kind == Primitive::kBox) {
        t = intersect_box(ray, prim.bmin, prim.bmax, false);
      } else {
        t = intersect_sphere(ray, prim.center, prim.radius);
      }
      if (t && *t < best_t) {
        best_t = *t;
        best = &prim;
      }
    }
    // Room box always encloses the cameras.
    const auto t_room = intersect_box(ray, Eigen::Vector3d::Zero(),
                                      Eigen::Vector3d::Ones(), true);
    int wall = -1;
    if (t_room && *t_room < best_t) {
      best_t = *t_room;
      best = nullptr;
      const Eigen::Vector3d p = ray.point_at(best_t);
      double dmin = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        if (std::abs(p(a)) < dmin) { dmin = std::abs(p(a)); wall = 2 * a; }
        if (std::abs(p(a) - 1.0) < dmin) { dmin = std::abs(p(a) - 1.0); wall = 2 * a + 1; }
      }
    }
    const Eigen::Vector3d p = ray.point_at(best_t);
    *depth = best_t;
    *color = best ? best->texture.color_at(p) : walls[wall].color_at(p);
  }
};

SynthWorld build_world(const SyntheticSceneSpec& spec) {
  SynthWorld world;
  Rng rng(derive_seed(spec.seed, 1));
  const Eigen::Vector3d palettes[8] = {
      {0.85, 0.25, 0.25}, {0.25, 0.75, 0.30}, {0.25, 0.35, 0.85},
      {0.85, 0.75, 0.25}, {0.75, 0.30, 0.80}, {0.30, 0.80, 0.80},
      {0.90, 0.55, 0.25}, {0.55, 0.55, 0.60}};
  for (int w = 0; w < 6; ++w) {
    Eigen::Vector3d base = palettes[w % 8] * 0.5 + Eigen::Vector3d::Constant(0.25);
    world.walls[w] = TextureCoeffs::random(rng, base);
  }
  const Eigen::Vector3d room_center(0.5, 0.5, 0.5);
  for (int i = 0; i < spec.n_objects; ++i) {
    Primitive prim;
    prim.kind = (i % 2 == 0) ? Primitive::kSphere : Primitive::kBox;
    // Objects cluster near the center, clear of the camera orbit shell.
    Eigen::Vector3d c = room_center +
                        Eigen::Vector3d(rng.uniform(-0.20, 0.20),
                                        rng.uniform(-0.20, 0.20),
                                        rng.uniform(-0.20, 0.20));
    if (prim.kind == Primitive::kSphere) {
      prim.center = c;
      prim.radius = rng.uniform(0.04, 0.09);
    } else {
      const Eigen::Vector3d half(rng.uniform(0.03, 0.08), rng.uniform(0.03, 0.08),
                                 rng.uniform(0.03, 0.08));
      prim.bmin = c - half;
      prim.bmax = c + half;
    }
    prim.texture = TextureCoeffs::random(rng, palettes[i % 8]);
    world.objects.push_back(prim);
  }
  return world;
}

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d up_hint(0, 1, 0);
  const Eigen::Vector3d z = (target - eye).normalized();
  Eigen::Vector3d x = z.cross(up_hint);
  if (x.norm() < 1e-9) x = z.cross(Eigen::Vector3d(1, 0, 0));
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);  // y points image-down
  Eigen::Matrix3d r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  CameraPose pose;
  pose.rotation = Eigen::Quaterniond(r).normalized();
  pose.translation = eye;
  return pose;
}

Image render_analytic(const SynthWorld& world, const CameraPose& pose,
                      const CameraIntrinsics& K, Image* depth_out) {
  Image img(K.width, K.height, 3);
  Image depth(K.width, K.height, 1);
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const Ray ray = ray_for_pixel({x + 0.5, y + 0.5}, pose, K);
      Eigen::Vector3d color;
      double t;
      world.trace(ray, &color, &t);
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(color(c));
      depth.at(x, y, 0) = static_cast<float>(t);
    }
  }
  img.quantize8();
  if (depth_out) *depth_out = std::move(depth);
  return img;
}

}  // namespace

SceneDataset generate_synthetic(const SyntheticSceneSpec& spec) {
  SceneDataset dataset;
  dataset.near = 0.05;
  dataset.far = 1.75;
  dataset.diameter = std::sqrt(3.0);
  const SynthWorld world = build_world(spec);

  CameraIntrinsics K;
  K.width = K.height = spec.image_size;
  K.fx = K.fy = spec.image_size / (2.0 * std::tan(spec.fov_deg * M_PI / 360.0));
  K.cx = K.cy = spec.image_size / 2.0;

  Rng rng(derive_seed(spec.seed, 2));
  const Eigen::Vector3d center(0.5, 0.5, 0.5);
  const double elevations[3] = {-20.0, 5.0, 28.0};

  auto add_view = [&](const std::string& id, double azimuth_deg, int order,
                      bool train) {
    const double az = azimuth_deg * M_PI / 180.0 + rng.uniform(-0.04, 0.04);
    const double el =
        elevations[order % 3] * M_PI / 180.0 + rng.uniform(-0.05, 0.05);
    const double radius = rng.uniform(spec.orbit_radius_min, spec.orbit_radius_max);
    const Eigen::Vector3d eye =
        center + radius * Eigen::Vector3d(std::cos(az) * std::cos(el),
                                          std::sin(el), std::sin(az) * std::cos(el));
    const Eigen::Vector3d target =
        center + Eigen::Vector3d(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                 rng.uniform(-0.05, 0.05));
    SceneDataset::Item item;
    item.id = id;
    item.pose = look_at(eye, target);
    item.intrinsics = K;
    const int half = train ? spec.n_train_views : spec.n_test_views;
    item.sequence = "seq" + std::to_string(spec.n_sequences > 0
                                               ? (order * spec.n_sequences) / std::max(1, half)
                                               : 0);
    Image depth;
    item.image = render_analytic(world, item.pose, K, &depth);
    dataset.items.push_back(std::move(item));
    dataset.depths.push_back(std::move(depth));
    if (train) {
      dataset.train_ids.push_back(static_cast<int>(dataset.items.size()) - 1);
    } else {
      dataset.test_ids.push_back(static_cast<int>(dataset.items.size()) - 1);
    }
  };

  for (int i = 0; i < spec.n_train_views; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "train_%03d", i);
    add_view(id, 360.0 * i / spec.n_train_views, i, true);
  }
  for (int i = 0; i < spec.n_test_views; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "test_%03d", i);
    // Interleave test azimuths between the train ones.
    add_view(id, 360.0 * (i + 0.5) / spec.n_test_views, i, false);
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// Dataset IO.
// ---------------------------------------------------------------------------

void save_dataset(const SceneDataset& dataset, const std::string& root) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "splits");
  bool any_mask = false;
  for (const auto& item : dataset.items) {
    save_png(item.image, (fs::path(root) / "images" / (item.id + ".png")).string());
    if (!item.mask.empty()) any_mask = true;
  }
  if (any_mask) {
    fs::create_directories(fs::path(root) / "masks");
    for (const auto& item : dataset.items) {
      if (!item.mask.empty()) {
        save_png(item.mask, (fs::path(root) / "masks" / (item.id + ".png")).string());
      }
    }
  }
  {
    std::ofstream f(fs::path(root) / "poses.txt");
    for (const auto& item : dataset.items) {
      const auto& q = item.pose.rotation;
      const auto& t = item.pose.translation;
      char line[512];
      std::snprintf(line, sizeof(line),
                    "%s %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                    item.id.c_str(), q.w(), q.x(), q.y(), q.z(), t.x(), t.y(),
                    t.z());
      f << line;
    }
  }
  {
    std::ofstream f(fs::path(root) / "intrinsics.txt");
    bool shared = true;
    for (const auto& item : dataset.items) {
      const auto& a = dataset.items.front().intrinsics;
      const auto& b = item.intrinsics;
      if (a.fx != b.fx || a.fy != b.fy || a.cx != b.cx || a.cy != b.cy ||
          a.width != b.width || a.height != b.height) {
        shared = false;
        break;
      }
    }
    auto write_k = [&f](const std::string& id, const CameraIntrinsics& k) {
      char line[512];
      std::snprintf(line, sizeof(line), "%s %.17g %.17g %.17g %.17g %d %d\n",
                    id.c_str(), k.fx, k.fy, k.cx, k.cy, k.width, k.height);
      f << line;
    };
    if (shared && !dataset.items.empty()) {
      write_k("*", dataset.items.front().intrinsics);
    } else {
      for (const auto& item : dataset.items) write_k(item.id, item.intrinsics);
    }
  }
  {
    std::ofstream f(fs::path(root) / "sequences.txt");
    for (const auto& item : dataset.items) f << item.id << " " << item.sequence << "\n";
  }
  {
    std::ofstream f(fs::path(root) / "splits" / "train.txt");
    for (int i : dataset.train_ids) f << dataset.items[i].id << "\n";
  }
  {
    std::ofstream f(fs::path(root) / "splits" / "test.txt");
    for (int i : dataset.test_ids) f << dataset.items[i].id << "\n";
  }
  {
    std::ofstream f(fs::path(root) / "meta.txt");
    char line[256];
    std::snprintf(line, sizeof(line), "%.17g %.17g %.17g\n", dataset.near,
                  dataset.far, dataset.diameter);
    f << line;
  }
}

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

}  // namespace

SceneDataset load_dataset(const std::string& root) {
  SceneDataset dataset;
  const fs::path poses_path = fs::path(root) / "poses.txt";
  if (!fs::exists(poses_path)) throw MissingPoses(root);

  {
    std::ifstream f(poses_path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tok = split_ws(line);
      if (tok.size() != 8) throw MalformedLine("poses.txt", line_no);
      SceneDataset::Item item;
      item.id = tok[0];
      try {
        item.pose.rotation = Eigen::Quaterniond(
            std::stod(tok[1]), std::stod(tok[2]), std::stod(tok[3]),
            std::stod(tok[4]));
        item.pose.translation =
            Eigen::Vector3d(std::stod(tok[5]), std::stod(tok[6]), std::stod(tok[7]));
      } catch (const std::exception&) {
        throw MalformedLine("poses.txt", line_no);
      }
      item.pose.normalize();
      dataset.items.push_back(std::move(item));
    }
  }
  {
    std::ifstream f(fs::path(root) / "intrinsics.txt");
    std::string line;
    int line_no = 0;
    while (f && std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tok = split_ws(line);
      if (tok.size() != 7) throw MalformedLine("intrinsics.txt", line_no);
      CameraIntrinsics k;
      try {
        k.fx = std::stod(tok[1]);
        k.fy = std::stod(tok[2]);
        k.cx = std::stod(tok[3]);
        k.cy = std::stod(tok[4]);
        k.width = std::stoi(tok[5]);
        k.height = std::stoi(tok[6]);
      } catch (const std::exception&) {
        throw MalformedLine("intrinsics.txt", line_no);
      }
      if (tok[0] == "*") {
        for (auto& item : dataset.items) item.intrinsics = k;
      } else {
        dataset.items[dataset.index_of(tok[0])].intrinsics = k;
      }
    }
  }
  {
    std::ifstream f(fs::path(root) / "sequences.txt");
    std::string line;
    int line_no = 0;
    while (f && std::getline(f, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tok = split_ws(line);
      if (tok.size() != 2) throw MalformedLine("sequences.txt", line_no);
      dataset.items[dataset.index_of(tok[0])].sequence = tok[1];
    }
  }
  for (auto& item : dataset.items) {
    const fs::path img = fs::path(root) / "images" / (item.id + ".png");
    if (fs::exists(img)) item.image = load_png(img.string());
    const fs::path mask = fs::path(root) / "masks" / (item.id + ".png");
    if (fs::exists(mask)) item.mask = load_png(mask.string());
  }
  auto read_split = [&](const std::string& name, std::vector<int>* out) {
    std::ifstream f(fs::path(root) / "splits" / name);
    std::string line;
    while (f && std::getline(f, line)) {
      if (line.empty()) continue;
      out->push_back(dataset.index_of(split_ws(line)[0]));
    }
  };
  read_split("train.txt", &dataset.train_ids);
  read_split("test.txt", &dataset.test_ids);
  {
    std::ifstream f(fs::path(root) / "meta.txt");
    std::string line;
    if (f && std::getline(f, line)) {
      const auto tok = split_ws(line);
      if (tok.size() != 3) throw MalformedLine("meta.txt", 1);
      dataset.near = std::stod(tok[0]);
      dataset.far = std::stod(tok[1]);
      dataset.diameter = std::stod(tok[2]);
    }
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// Covisibility.
// ---------------------------------------------------------------------------

std::vector<std::vector<CovisNeighbor>> covisibility_pairs(
    const SceneDataset& dataset, int top_n) {
  const bool has_depth = !dataset.depths.empty();
  const int n = static_cast<int>(dataset.items.size());
  std::vector<std::vector<CovisNeighbor>> out(n);

  // Probe points per view: back-projected depth grid when available, frustum
  // samples at three depths otherwise.
  std::vector<std::vector<Eigen::Vector3d>> probes(n);
  constexpr int kGrid = 12;
  for (int i = 0; i < n; ++i) {
    const auto& item = dataset.items[i];
    const auto& K = item.intrinsics;
    for (int gy = 0; gy < kGrid; ++gy) {
      for (int gx = 0; gx < kGrid; ++gx) {
        const double u = (gx + 0.5) * K.width / kGrid;
        const double v = (gy + 0.5) * K.height / kGrid;
        const Ray ray = ray_for_pixel({u, v}, item.pose, K);
        if (has_depth) {
          const double d = dataset.depths[i].sample(u, v, 0);
          probes[i].push_back(ray.point_at(d));
        } else {
          for (double frac : {0.25, 0.5, 0.75}) {
            probes[i].push_back(
                ray.point_at(dataset.near + frac * (dataset.far - dataset.near)));
          }
        }
      }
    }
  }

  for (int a : dataset.train_ids) {
    std::vector<CovisNeighbor> scored;
    for (int b : dataset.train_ids) {
      if (a == b) continue;
      const auto& kb = dataset.items[b].intrinsics;
      int visible = 0;
      for (const auto& p : probes[a]) {
        Eigen::Vector2d px;
        if (!project_checked(p, dataset.items[b].pose, kb, &px)) continue;
        if (px.x() < 0 || px.x() > kb.width || px.y() < 0 || px.y() > kb.height)
          continue;
        if (has_depth) {
          const double d_obs = dataset.depths[b].sample(px.x(), px.y(), 0);
          const double d_exp = (p - dataset.items[b].pose.camera_center()).norm();
          if (std::abs(d_obs - d_exp) > 0.05 * dataset.far) continue;
        }
        ++visible;
      }
      const double score = static_cast<double>(visible) / probes[a].size();
      if (score > 0) scored.push_back({b, score});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const CovisNeighbor& x, const CovisNeighbor& y) {
                       return x.score > y.score;
                     });
    if (static_cast<int>(scored.size()) > top_n) scored.resize(top_n);
    out[a] = std::move(scored);
  }
  return out;
}

void save_pairs(const std::vector<std::pair<std::string, std::string>>& pairs,
                const std::string& path) {
  std::ofstream f(path);
  for (const auto& [q, r] : pairs) f << q << " " << r << "\n";
}

std::vector<std::pair<std::string, std::string>> load_pairs(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open pair file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tok = split_ws(line);
    if (tok.size() != 2) throw MalformedLine(path, line_no);
    out.emplace_back(tok[0], tok[1]);
  }
  return out;
}

}  // namespace nerfloc
