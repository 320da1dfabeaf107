#include "nerfloc/retrieval.hpp"

#include <algorithm>
#include <map>

#include "nerfloc/rng.hpp"

namespace nerfloc {

GlobalDescriptor describe(const Image& image, const MatcherParams<float>& encoder,
                          const RetrievalConfig& cfg) {
  Image square = image;
  if (image.width != encoder.cfg.image_size ||
      image.height != encoder.cfg.image_size) {
    square = image.resized(encoder.cfg.image_size, encoder.cfg.image_size);
  }
  const ImageFeaturePyramid<float> pyr = encode_image(square, encoder);
  Eigen::VectorXd pooled =
      pyr.coarse.colwise().mean().transpose().cast<double>();
  GlobalDescriptor desc;
  if (cfg.descriptor_dim > 0 && cfg.descriptor_dim != pooled.size()) {
    Rng rng(cfg.projection_seed);
    Eigen::MatrixXd proj(cfg.descriptor_dim, pooled.size());
    for (Eigen::Index i = 0; i < proj.size(); ++i) {
      proj.data()[i] = rng.normal() / std::sqrt(static_cast<double>(pooled.size()));
    }
    desc.vector = proj * pooled;
  } else {
    desc.vector = pooled;
  }
  const double n = desc.vector.norm();
  if (n > 0) desc.vector /= n;
  return desc;
}

ReferenceDatabase build_database(const SceneDataset& dataset,
                                 const SceneField<float>& field,
                                 const MatcherParams<float>& encoder,
                                 const std::string& source,
                                 const RetrievalConfig& cfg) {
  ReferenceDatabase db;
  for (size_t idx = 0; idx < dataset.train_ids.size(); ++idx) {
    const auto& item = dataset.items[dataset.train_ids[idx]];
    ReferenceEntry entry;
    entry.pose = item.pose;
    entry.intrinsics = item.intrinsics;
    entry.source = source;
    entry.sequence = item.sequence;
    Image view;
    if (source == "synthesized") {
      RenderOptions opts;
      opts.n_coarse = cfg.render_n_coarse;
      opts.n_fine = cfg.render_n_fine;
      opts.want_feature = false;
      opts.jitter = false;
      opts.threads = 2;
      opts.appearance_id = item.sequence;
      opts.seed = derive_seed(cfg.render_seed, idx);
      const SurfaceGrid grid =
          render_view(field, item.pose, item.intrinsics, 1, opts);
      view = Image(item.intrinsics.width, item.intrinsics.height, 3);
      for (int y = 0; y < view.height; ++y) {
        for (int x = 0; x < view.width; ++x) {
          const auto& s = grid.surfaces[static_cast<size_t>(y) * view.width + x];
          for (int c = 0; c < 3; ++c) {
            view.at(x, y, c) =
                static_cast<float>(std::clamp(s.color(c), 0.0, 1.0));
          }
        }
      }
    } else {
      view = item.image;
    }
    entry.descriptor = describe(view, encoder, cfg);
    entry.descriptor.image_id = item.id;
    db.entries.push_back(std::move(entry));
  }
  return db;
}

std::vector<int> topk(const GlobalDescriptor& query,
                      const ReferenceDatabase& db, int k) {
  if (k < 1 || k > static_cast<int>(db.entries.size())) throw KTooLarge();
  std::vector<std::pair<double, int>> scored;
  for (size_t i = 0; i < db.entries.size(); ++i) {
    scored.push_back(
        {query.vector.dot(db.entries[i].descriptor.vector), static_cast<int>(i)});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

std::vector<Correspondence> merge_matches(
    const std::vector<std::vector<Correspondence>>& per_reference) {
  bool any = false;
  for (const auto& set : per_reference) {
    if (!set.empty()) any = true;
  }
  if (!any) throw AllEmpty();

  // Exact (pixel, point) duplicates keep the highest score.
  auto key_of = [](const Correspondence& c) {
    auto q = [](double v) { return std::llround(v * 1e6); };
    return std::array<long long, 5>{q(c.pixel.x()), q(c.pixel.y()),
                                    q(c.point.x()), q(c.point.y()),
                                    q(c.point.z())};
  };
  std::map<std::array<long long, 5>, Correspondence> merged;
  for (const auto& set : per_reference) {
    for (const auto& c : set) {
      auto [it, inserted] = merged.try_emplace(key_of(c), c);
      if (!inserted && c.score > it->second.score) it->second = c;
    }
  }
  std::vector<Correspondence> out;
  out.reserve(merged.size());
  for (const auto& [k, v] : merged) out.push_back(v);
  return out;
}

ScenePointSet merge_3d(const std::vector<ScenePointSet>& per_reference,
                       int covis_min, double scene_diameter, int max_points,
                       uint64_t seed) {
  const double voxel = scene_diameter / 256.0;
  struct Cluster {
    Eigen::Vector3d point_sum = Eigen::Vector3d::Zero();
    Eigen::VectorXd feature_sum;
    double opacity_sum = 0;
    int count = 0;
    uint32_t ref_mask = 0;
  };
  auto key_of = [&](const Eigen::Vector3d& p) {
    return std::array<long long, 3>{
        static_cast<long long>(std::floor(p.x() / voxel)),
        static_cast<long long>(std::floor(p.y() / voxel)),
        static_cast<long long>(std::floor(p.z() / voxel))};
  };
  std::map<std::array<long long, 3>, Cluster> clusters;
  for (size_t r = 0; r < per_reference.size(); ++r) {
    const auto& set = per_reference[r];
    for (Eigen::Index i = 0; i < set.points.rows(); ++i) {
      Cluster& c = clusters[key_of(set.points.row(i).transpose())];
      if (c.count == 0) c.feature_sum = Eigen::VectorXd::Zero(set.features.cols());
      c.point_sum += set.points.row(i).transpose();
      c.feature_sum += set.features.row(i).transpose();
      c.opacity_sum += set.opacities(i);
      c.count += 1;
      c.ref_mask |= 1u << std::min<size_t>(r, 31);
    }
  }
  std::vector<const Cluster*> survivors;
  for (const auto& [k, c] : clusters) {
    int refs = 0;
    for (uint32_t m = c.ref_mask; m; m >>= 1) refs += m & 1;
    if (refs >= covis_min) survivors.push_back(&c);
  }
  if (survivors.empty()) throw EmptyAfterFilter();

  // Seeded uniform subsample down to the cap.
  if (static_cast<int>(survivors.size()) > max_points) {
    Rng rng(seed);
    for (size_t i = survivors.size(); i > 1; --i) {
      std::swap(survivors[i - 1], survivors[rng.uniform_int(static_cast<int>(i))]);
    }
    survivors.resize(max_points);
  }

  ScenePointSet out;
  out.source = per_reference.front().source;
  const Eigen::Index dim = per_reference.front().features.cols();
  out.points.resize(static_cast<Eigen::Index>(survivors.size()), 3);
  out.features.resize(static_cast<Eigen::Index>(survivors.size()), dim);
  out.opacities.resize(static_cast<Eigen::Index>(survivors.size()));
  for (size_t i = 0; i < survivors.size(); ++i) {
    const Cluster& c = *survivors[i];
    out.points.row(static_cast<Eigen::Index>(i)) =
        (c.point_sum / c.count).transpose();
    out.features.row(static_cast<Eigen::Index>(i)) =
        (c.feature_sum / c.count).transpose();
    out.opacities(static_cast<Eigen::Index>(i)) = c.opacity_sum / c.count;
  }
  return out;
}

}  // namespace nerfloc
