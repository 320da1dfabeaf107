#include "nerfloc/refinement.hpp"

#include <cmath>

#include "nerfloc/rng.hpp"

namespace nerfloc {

template <typename T>
double photometric_pose_loss_and_grad(SceneField<T>& field,
                                      const CameraPose& pose,
                                      const CameraIntrinsics& K,
                                      const Image& query,
                                      const std::vector<Eigen::Vector2i>& pixels,
                                      int appearance_idx,
                                      const PhotometricOptions& opts,
                                      Eigen::Vector3d* d_omega,
                                      Eigen::Vector3d* d_t) {
  const int n_rays = static_cast<int>(pixels.size());
  std::vector<Ray> rays;
  MatX<T> targets(n_rays, 3);
  for (int r = 0; r < n_rays; ++r) {
    rays.push_back(ray_for_pixel(
        {pixels[r].x() + 0.5, pixels[r].y() + 0.5}, pose, K));
    for (int c = 0; c < 3; ++c) {
      targets(r, c) = static_cast<T>(query.at(pixels[r].x(), pixels[r].y(), c));
    }
  }

  Rng rng(opts.seed);
  const double near = field.cfg.near, far = field.cfg.far;
  std::vector<Eigen::VectorXd> ts(n_rays);
  if (opts.n_fine > 0) {
    std::vector<Eigen::VectorXd> coarse(n_rays);
    MatX<T> cpts(static_cast<Eigen::Index>(n_rays) * opts.n_coarse, 3);
    for (int r = 0; r < n_rays; ++r) {
      coarse[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
      for (int i = 0; i < opts.n_coarse; ++i) {
        cpts.row(static_cast<Eigen::Index>(r) * opts.n_coarse + i) =
            rays[r].point_at(coarse[r](i)).template cast<T>().transpose();
      }
    }
    FieldCache<T> cache;
    const VecX<T> sigma = field.density(cpts, &cache);
    for (int r = 0; r < n_rays; ++r) {
      const RaySamples cs =
          RaySamples::make(rays[r], coarse[r], field.cfg.delta_cap);
      const VecX<T> w = composite_weights<T>(
          sigma.segment(static_cast<Eigen::Index>(r) * opts.n_coarse,
                        opts.n_coarse),
          cs.deltas.cast<T>());
      ts[r] = merge_sorted(coarse[r],
                           importance_resample(coarse[r],
                                               w.template cast<double>(),
                                               opts.n_fine, rng));
    }
  } else {
    for (int r = 0; r < n_rays; ++r) {
      ts[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
    }
  }

  const int n_m = static_cast<int>(ts[0].size());
  const Eigen::Index total = static_cast<Eigen::Index>(n_rays) * n_m;
  MatX<T> pts(total, 3), dirs(total, 3);
  std::vector<int> app(static_cast<size_t>(total), appearance_idx);
  for (int r = 0; r < n_rays; ++r) {
    const Eigen::Matrix<T, 1, 3> d = rays[r].direction.template cast<T>().transpose();
    const Eigen::Matrix<T, 1, 3> o = rays[r].origin.template cast<T>().transpose();
    for (int i = 0; i < n_m; ++i) {
      pts.row(static_cast<Eigen::Index>(r) * n_m + i) =
          o + static_cast<T>(ts[r](i)) * d;
      dirs.row(static_cast<Eigen::Index>(r) * n_m + i) = d;
    }
  }

  FieldCache<T> cache;
  VecX<T> sigma;
  MatX<T> color;
  field.forward(pts, dirs, app, &cache, &sigma, &color);

  double loss = 0;
  const double norm = 1.0 / (3.0 * n_rays);
  VecX<T> d_sigma = VecX<T>::Zero(total);
  MatX<T> d_color = MatX<T>::Zero(total, 3);
  VecX<T> deltas(n_m), dw(n_m);
  for (int r = 0; r < n_rays; ++r) {
    const Eigen::Index base = static_cast<Eigen::Index>(r) * n_m;
    for (int i = 0; i + 1 < n_m; ++i)
      deltas(i) = static_cast<T>(ts[r](i + 1) - ts[r](i));
    deltas(n_m - 1) = static_cast<T>(field.cfg.delta_cap);
    const VecX<T> w = composite_weights<T>(sigma.segment(base, n_m), deltas);
    Eigen::Matrix<T, 1, 3> chat = Eigen::Matrix<T, 1, 3>::Zero();
    for (int i = 0; i < n_m; ++i) chat += w(i) * color.row(base + i);
    const Eigen::Matrix<T, 1, 3> resid = chat - targets.row(r);
    loss += static_cast<double>(resid.squaredNorm()) * norm;
    if (!d_omega) continue;
    const Eigen::Matrix<T, 1, 3> d_chat = resid * static_cast<T>(2.0 * norm);
    for (int i = 0; i < n_m; ++i) {
      dw(i) = d_chat.dot(color.row(base + i));
      d_color.row(base + i) = w(i) * d_chat;
    }
    d_sigma.segment(base, n_m) =
        composite_weights_backward<T>(sigma.segment(base, n_m), deltas, w, dw);
  }
  if (!d_omega) return loss;

  MatX<T> d_points = MatX<T>::Zero(total, 3);
  MatX<T> d_dirs = MatX<T>::Zero(total, 3);
  field.backward(cache, d_sigma, d_color, MatX<T>(), 0, &d_points, &d_dirs);

  // Fold per-sample gradients onto the pose tangent. With X_i = o + t_i w and
  // w = R d_cam (unit): dL/do sums the point grads, while the direction
  // channel collects t_i-weighted point grads plus the view-direction grads;
  // the left rotation tangent picks up w x (that sum).
  d_omega->setZero();
  d_t->setZero();
  for (int r = 0; r < n_rays; ++r) {
    const Eigen::Index base = static_cast<Eigen::Index>(r) * n_m;
    Eigen::Vector3d g_dir = Eigen::Vector3d::Zero();
    for (int i = 0; i < n_m; ++i) {
      const Eigen::Vector3d gx =
          d_points.row(base + i).template cast<double>().transpose();
      *d_t += gx;
      g_dir += ts[r](i) * gx +
               d_dirs.row(base + i).template cast<double>().transpose();
    }
    *d_omega += rays[r].direction.cross(g_dir);
  }
  return loss;
}

template double photometric_pose_loss_and_grad<float>(
    SceneField<float>&, const CameraPose&, const CameraIntrinsics&,
    const Image&, const std::vector<Eigen::Vector2i>&, int,
    const PhotometricOptions&, Eigen::Vector3d*, Eigen::Vector3d*);
template double photometric_pose_loss_and_grad<double>(
    SceneField<double>&, const CameraPose&, const CameraIntrinsics&,
    const Image&, const std::vector<Eigen::Vector2i>&, int,
    const PhotometricOptions&, Eigen::Vector3d*, Eigen::Vector3d*);

namespace {

// One matching + PnP pass at the given reference pose. Returns false (and
// leaves `solved` untouched) when any stage fails.
bool match_and_solve(const RefineContext& ctx, const CameraPose& reference,
                     uint64_t seed, CameraPose* solved, int* inliers) {
  try {
    const ScenePointSet pts = prepare_scene_features(
        reference, ctx.K, *ctx.field, ctx.matcher->cfg, seed,
        ctx.appearance_id, ctx.render_n_coarse, ctx.render_n_fine);
    const ImageFeaturePyramid<float> pyramid =
        encode_image(ctx.query, *ctx.matcher);
    const MatchSet matches = match_query(pyramid, pts, *ctx.matcher);
    const auto corr = to_correspondences(matches, pts);
    RansacConfig rc = ctx.ransac;
    rc.seed = derive_seed(seed, 17);
    const PoseEstimate est = ransac_pnp(corr, ctx.K, rc);
    *solved = est.pose;
    if (inliers) *inliers = static_cast<int>(est.inliers.size());
    return true;
  } catch (const std::runtime_error&) {
    return false;
  }
}

void push_round(const RefineContext& ctx, RefinementTrace* trace,
                const CameraPose& pose, bool failed,
                std::vector<double> losses = {}) {
  if (!trace) return;
  RefinementRound round;
  round.pose = pose;
  round.solver_failed = failed;
  round.photometric_losses = std::move(losses);
  if (ctx.ground_truth) round.errors = pose_errors(pose, *ctx.ground_truth);
  trace->rounds.push_back(std::move(round));
}

std::vector<Eigen::Vector2i> sample_pixels(const RefineContext& ctx, int count,
                                           Rng* rng) {
  std::vector<Eigen::Vector2i> pixels;
  int guard = 0;
  while (static_cast<int>(pixels.size()) < count && guard < 20 * count) {
    ++guard;
    const int x = rng->uniform_int(ctx.query.width);
    const int y = rng->uniform_int(ctx.query.height);
    if (ctx.mask && !ctx.mask->empty() && ctx.mask->at(x, y, 0) > 0) continue;
    pixels.push_back({x, y});
  }
  return pixels;
}

}  // namespace

CameraPose refine_iterative(const RefineContext& ctx, const CameraPose& initial,
                            int rounds, RefinementTrace* trace) {
  CameraPose current = initial;
  push_round(ctx, trace, current, false);
  for (int round = 0; round < rounds; ++round) {
    CameraPose solved;
    const bool ok = match_and_solve(ctx, current,
                                    derive_seed(ctx.seed, 100 + round),
                                    &solved, nullptr);
    if (ok) current = solved;
    push_round(ctx, trace, current, !ok);
  }
  return current;
}

CameraPose refine_photometric(const RefineContext& ctx,
                              const CameraPose& initial, int steps, double lr0,
                              double lr_decay, int rays_per_step,
                              std::vector<double>* losses) {
  CameraPose pose = initial;
  Rng rng(derive_seed(ctx.seed, 7));
  const int app_idx = ctx.appearance_id.empty()
                          ? -1
                          : ctx.field->appearance_index(ctx.appearance_id);
  // Adam moments on the 6-vector tangent, re-based at the current pose.
  Eigen::Matrix<double, 6, 1> m = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> v = Eigen::Matrix<double, 6, 1>::Zero();
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-12;
  double lr = lr0;
  for (int step = 0; step < steps; ++step) {
    const auto pixels = sample_pixels(ctx, rays_per_step, &rng);
    if (pixels.empty()) break;
    PhotometricOptions opts;
    opts.n_coarse = ctx.render_n_coarse;
    opts.n_fine = ctx.render_n_fine;
    opts.seed = derive_seed(ctx.seed, 9000 + step);
    Eigen::Vector3d d_omega, d_t;
    const double loss = photometric_pose_loss_and_grad(
        *ctx.field, pose, ctx.K, ctx.query, pixels, app_idx, opts, &d_omega,
        &d_t);
    if (losses) losses->push_back(loss);
    Eigen::Matrix<double, 6, 1> g;
    g << d_omega, d_t;
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    const Eigen::Matrix<double, 6, 1> update =
        (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
    pose = apply_tangent(pose, -update.head<3>(), -update.tail<3>());
    lr *= lr_decay;
  }
  return pose;
}

CameraPose refine(const RefineContext& ctx, const CameraPose& initial,
                  const RefineConfig& config, RefinementTrace* trace) {
  if (config.mode == "iterative") {
    return refine_iterative(ctx, initial, config.rounds, trace);
  }
  if (config.mode != "optimize-then-match") {
    throw std::invalid_argument("unknown refinement mode: " + config.mode);
  }
  const double lr0 =
      config.lr > 0 ? config.lr
                    : (ctx.matcher && ctx.matcher->cfg.variant == "full"
                           ? config.lr_full
                           : config.lr_mini);
  CameraPose current = initial;
  push_round(ctx, trace, current, false);
  for (int round = 0; round < config.rounds; ++round) {
    std::vector<double> losses;
    const CameraPose optimized = refine_photometric(
        ctx, current, config.opt_steps_per_round, lr0, config.lr_decay,
        config.rays_for_photometric, &losses);
    CameraPose solved;
    const bool ok = match_and_solve(ctx, optimized,
                                    derive_seed(ctx.seed, 500 + round),
                                    &solved, nullptr);
    current = ok ? solved : optimized;
    push_round(ctx, trace, current, !ok, std::move(losses));
  }
  return current;
}

}  // namespace nerfloc
