#include "nerfloc/nerf_training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

namespace nerfloc {

double photometric_loss(const Eigen::MatrixXd& rendered,
                        const Eigen::MatrixXd& target,
                        const std::vector<uint8_t>& mask) {
  if (rendered.rows() != target.rows()) {
    throw std::invalid_argument("photometric_loss: count mismatch");
  }
  double sum = 0;
  long n = 0;
  for (Eigen::Index i = 0; i < rendered.rows(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    sum += (rendered.row(i) - target.row(i)).squaredNorm();
    ++n;
  }
  if (n == 0) throw AllMasked();
  return sum / (3.0 * n);
}

template <typename T>
double field_loss_and_grad(SceneField<T>* field, const std::vector<Ray>& rays,
                           const MatX<T>& targets,
                           const std::vector<uint8_t>& mask,
                           const std::vector<int>& app_idx,
                           const TrainBatchOptions& opts,
                           TrainWorkspace<T>* workspace) {
  const int n_rays = static_cast<int>(rays.size());
  long n_active = 0;
  for (int r = 0; r < n_rays; ++r) {
    if (mask.empty() || !mask[r]) ++n_active;
  }
  if (n_active == 0) throw AllMasked();

  TrainWorkspace<T> local_ws;
  TrainWorkspace<T>& ws = workspace ? *workspace : local_ws;
  Rng rng(opts.seed);
  const double near = field->cfg.near, far = field->cfg.far;

  // Depth samples. The fine depths come from a no-grad density pass.
  std::vector<Eigen::VectorXd> ts(n_rays);
  if (opts.n_fine > 0) {
    std::vector<Eigen::VectorXd> coarse(n_rays);
    ws.coarse_pts.resize(static_cast<Eigen::Index>(n_rays) * opts.n_coarse, 3);
    for (int r = 0; r < n_rays; ++r) {
      coarse[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
      for (int i = 0; i < opts.n_coarse; ++i) {
        ws.coarse_pts.row(static_cast<Eigen::Index>(r) * opts.n_coarse + i) =
            rays[r].point_at(coarse[r](i)).template cast<T>().transpose();
      }
    }
    const VecX<T> sigma = field->density(ws.coarse_pts, &ws.density_cache);
    for (int r = 0; r < n_rays; ++r) {
      const RaySamples cs =
          RaySamples::make(rays[r], coarse[r], field->cfg.delta_cap);
      const VecX<T> w = composite_weights<T>(
          sigma.segment(static_cast<Eigen::Index>(r) * opts.n_coarse, opts.n_coarse),
          cs.deltas.cast<T>());
      const Eigen::VectorXd fine = importance_resample(
          coarse[r], w.template cast<double>(), opts.n_fine, rng);
      ts[r] = merge_sorted(coarse[r], fine);
    }
  } else {
    for (int r = 0; r < n_rays; ++r) {
      ts[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
    }
  }

  const int n_m = static_cast<int>(ts[0].size());
  const Eigen::Index total = static_cast<Eigen::Index>(n_rays) * n_m;
  ws.pts.resize(total, 3);
  ws.dirs.resize(total, 3);
  ws.app.assign(static_cast<size_t>(total), -1);
  for (int r = 0; r < n_rays; ++r) {
    const Eigen::Matrix<T, 1, 3> d = rays[r].direction.template cast<T>().transpose();
    const Eigen::Matrix<T, 1, 3> o = rays[r].origin.template cast<T>().transpose();
    for (int i = 0; i < n_m; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(r) * n_m + i;
      ws.pts.row(row) = o + static_cast<T>(ts[r](i)) * d;
      ws.dirs.row(row) = d;
      ws.app[row] = app_idx.empty() ? -1 : app_idx[r];
    }
  }

  VecX<T> sigma;
  MatX<T> color;
  if (opts.density_noise_std > 0) {
    VecX<T> noise(total);
    for (Eigen::Index i = 0; i < total; ++i) {
      noise(i) = static_cast<T>(opts.density_noise_std * rng.normal());
    }
    field->forward(ws.pts, ws.dirs, ws.app, &ws.cache, &sigma, &color, &noise);
  } else {
    field->forward(ws.pts, ws.dirs, ws.app, &ws.cache, &sigma, &color);
  }

  double loss = 0;
  ws.d_sigma.resize(sigma.size());
  ws.d_sigma.setZero();
  ws.d_color.resize(color.rows(), 3);
  ws.d_color.setZero();
  const double norm = 1.0 / (3.0 * n_active);
  VecX<T> deltas(n_m), dw(n_m);
  for (int r = 0; r < n_rays; ++r) {
    if (!mask.empty() && mask[r]) continue;
    const Eigen::Index base = static_cast<Eigen::Index>(r) * n_m;
    for (int i = 0; i + 1 < n_m; ++i)
      deltas(i) = static_cast<T>(ts[r](i + 1) - ts[r](i));
    deltas(n_m - 1) = static_cast<T>(field->cfg.delta_cap);
    const VecX<T> w = composite_weights<T>(sigma.segment(base, n_m), deltas);
    Eigen::Matrix<T, 1, 3> chat = Eigen::Matrix<T, 1, 3>::Zero();
    for (int i = 0; i < n_m; ++i) chat += w(i) * color.row(base + i);
    const Eigen::Matrix<T, 1, 3> resid = chat - targets.row(r);
    loss += static_cast<double>(resid.squaredNorm()) * norm;
    const Eigen::Matrix<T, 1, 3> d_chat = resid * static_cast<T>(2.0 * norm);
    for (int i = 0; i < n_m; ++i) {
      dw(i) = d_chat.dot(color.row(base + i));
      ws.d_color.row(base + i) = w(i) * d_chat;
    }
    ws.d_sigma.segment(base, n_m) =
        composite_weights_backward<T>(sigma.segment(base, n_m), deltas, w, dw);
  }
  field->backward(ws.cache, ws.d_sigma, ws.d_color, MatX<T>(), 0, nullptr,
                  nullptr);
  return loss;
}

template double field_loss_and_grad<float>(SceneField<float>*,
                                           const std::vector<Ray>&,
                                           const MatX<float>&,
                                           const std::vector<uint8_t>&,
                                           const std::vector<int>&,
                                           const TrainBatchOptions&,
                                           TrainWorkspace<float>*);
template double field_loss_and_grad<double>(SceneField<double>*,
                                            const std::vector<Ray>&,
                                            const MatX<double>&,
                                            const std::vector<uint8_t>&,
                                            const std::vector<int>&,
                                            const TrainBatchOptions&,
                                            TrainWorkspace<double>*);

namespace {

struct RaySpec {
  int item = 0;
  int x = 0, y = 0;
};

double psnr_from_mse(double mse) {
  return mse <= 0 ? 99.0 : -10.0 * std::log10(mse);
}

}  // namespace

NerfTrainResult train_scene(const SceneDataset& dataset,
                            const SceneFieldConfig& field_config,
                            const NerfTrainConfig& config) {
  if (dataset.train_ids.empty()) throw EmptyDataset();

  std::vector<int> train_ids = dataset.train_ids;
  if (static_cast<int>(train_ids.size()) > config.max_train_images) {
    train_ids.resize(config.max_train_images);
  }

  // Sequence vocabulary for the appearance table.
  std::vector<std::string> sequences;
  for (int id : train_ids) {
    const auto& s = dataset.items[id].sequence;
    if (std::find(sequences.begin(), sequences.end(), s) == sequences.end()) {
      sequences.push_back(s);
    }
  }

  SceneFieldConfig fc = field_config;
  fc.near = dataset.near;
  fc.far = dataset.far;

  NerfTrainResult result;
  Rng init_rng(derive_seed(config.seed, 0));
  result.field.init(fc, sequences, init_rng);
  SceneField<float>& field = result.field;

  // Pool of unmasked train pixels.
  std::vector<RaySpec> pool;
  for (int id : train_ids) {
    const auto& item = dataset.items[id];
    for (int y = 0; y < item.image.height; ++y) {
      for (int x = 0; x < item.image.width; ++x) {
        if (!item.mask.empty() && item.mask.at(x, y, 0) > 0) continue;
        pool.push_back({id, x, y});
      }
    }
  }
  if (pool.empty()) throw AllMasked();

  const long rays_per_epoch =
      config.rays_per_epoch > 0
          ? std::min<long>(config.rays_per_epoch, static_cast<long>(pool.size()))
          : static_cast<long>(pool.size());
  const long batches_per_epoch =
      std::max<long>(1, (rays_per_epoch + config.rays_per_batch - 1) /
                            config.rays_per_batch);
  const long total_steps = batches_per_epoch * config.epochs;

  const int n_threads = config.threads > 0
                            ? config.threads
                            : std::max(1u, std::thread::hardware_concurrency());

  // Fixed PSNR probe rays.
  std::vector<RaySpec> probe;
  {
    Rng prng(derive_seed(config.seed, 9001));
    for (int i = 0; i < config.psnr_sample_rays && !pool.empty(); ++i) {
      probe.push_back(pool[prng.uniform_int(static_cast<int>(pool.size()))]);
    }
  }

  auto make_rays = [&](const std::vector<RaySpec>& specs, size_t lo, size_t hi,
                       std::vector<Ray>* rays, MatX<float>* targets,
                       std::vector<int>* app) {
    rays->clear();
    targets->resize(static_cast<Eigen::Index>(hi - lo), 3);
    app->clear();
    for (size_t i = lo; i < hi; ++i) {
      const auto& spec = specs[i];
      const auto& item = dataset.items[spec.item];
      rays->push_back(ray_for_pixel({spec.x + 0.5, spec.y + 0.5}, item.pose,
                                    item.intrinsics));
      for (int c = 0; c < 3; ++c)
        (*targets)(static_cast<Eigen::Index>(i - lo), c) =
            item.image.at(spec.x, spec.y, c);
      app->push_back(field.appearance_index(item.sequence));
    }
  };

  auto estimate_psnr = [&]() {
    std::vector<Ray> rays;
    MatX<float> targets;
    std::vector<int> app;
    make_rays(probe, 0, probe.size(), &rays, &targets, &app);
    RenderOptions ro;
    ro.n_coarse = config.n_coarse;
    ro.n_fine = config.n_fine;
    ro.want_feature = false;
    ro.jitter = false;
    ro.threads = n_threads;
    // Probe rays span sequences; the table mean stands in for per-ray
    // appearance, which is fine for a PSNR estimate.
    const auto surfaces = render_rays(field, rays, ro);
    double mse = 0;
    for (size_t i = 0; i < surfaces.size(); ++i) {
      mse += (surfaces[i].color -
              targets.row(static_cast<Eigen::Index>(i)).cast<double>().transpose())
                 .squaredNorm();
    }
    mse /= (3.0 * std::max<size_t>(1, surfaces.size()));
    return psnr_from_mse(mse);
  };

  Adam<float> adam;
  ParamRegistry<float> master_reg = field.registry();
  Rng shuffle_rng(derive_seed(config.seed, 1));
  long step = 0;

  // Persistent worker state: field copy, registry, workspace. Chunks are
  // assigned statically (worker w takes chunks w, w+W, ...) so the float
  // accumulation order is identical across runs and thread schedules.
  const int n_workers = n_threads;
  std::vector<SceneField<float>> locals(n_workers, field);
  std::vector<ParamRegistry<float>> local_regs;
  for (auto& l : locals) local_regs.push_back(l.registry());
  std::vector<TrainWorkspace<float>> workspaces(n_workers);

  std::ofstream log;
  if (!config.log_path.empty()) log.open(config.log_path);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Seeded Fisher-Yates shuffle of the pool.
    for (size_t i = pool.size(); i > 1; --i) {
      std::swap(pool[i - 1], pool[shuffle_rng.uniform_int(static_cast<int>(i))]);
    }
    double epoch_loss = 0;
    long epoch_batches = 0;
    for (long b = 0; b < batches_per_epoch; ++b) {
      const size_t lo = static_cast<size_t>(b) * config.rays_per_batch;
      const size_t hi = std::min<size_t>(lo + config.rays_per_batch,
                                         static_cast<size_t>(rays_per_epoch));
      if (lo >= hi) break;
      const double lr = cosine_anneal(config.lr, step, total_steps);

      // Chunks small enough to occupy every worker, large enough for GEMMs.
      const size_t sub = std::max<size_t>(
          32, std::min<size_t>(config.rays_per_chunk,
                               (hi - lo + n_workers - 1) / n_workers));
      const size_t n_sub = (hi - lo + sub - 1) / sub;
      std::vector<double> sub_loss(n_sub, 0.0);

      auto worker = [&](size_t worker_idx) {
        local_regs[worker_idx].copy_params_from(master_reg);
        local_regs[worker_idx].zero_grads();
        for (size_t s = worker_idx; s < n_sub; s += n_workers) {
          const size_t a = lo + s * sub;
          const size_t z = std::min(hi, a + sub);
          std::vector<Ray> rays;
          MatX<float> targets;
          std::vector<int> app;
          make_rays(pool, a, z, &rays, &targets, &app);
          TrainBatchOptions opts;
          opts.n_coarse = config.n_coarse;
          opts.n_fine = config.n_fine;
          opts.jitter = true;
          opts.seed = derive_seed(config.seed, 100000 + step * 4096 + s);
          // Linear anneal of the density noise over the first half of training.
          const double frac = static_cast<double>(step) / std::max(1L, total_steps);
          opts.density_noise_std =
              config.density_noise_std * std::max(0.0, 1.0 - 2.0 * frac);
          sub_loss[s] = field_loss_and_grad(&locals[worker_idx], rays, targets,
                                            {}, app, opts,
                                            &workspaces[worker_idx]) *
                        (static_cast<double>(z - a) / (hi - lo));
        }
      };
      if (n_workers == 1) {
        worker(0);
      } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker, w);
        for (auto& t : threads) t.join();
      }
      master_reg.zero_grads();
      for (const auto& lreg : local_regs) master_reg.accumulate_from(lreg);
      adam.step(master_reg, lr, config.adam_beta1, config.adam_beta2);

      double batch_loss = 0;
      for (double l : sub_loss) batch_loss += l;
      epoch_loss += batch_loss;
      ++epoch_batches;
      ++step;
    }
    EpochLog el;
    el.epoch = epoch;
    el.loss = epoch_loss / std::max(1L, epoch_batches);
    el.psnr = estimate_psnr();
    el.lr = cosine_anneal(config.lr, step, total_steps);
    result.epochs.push_back(el);
    if (log) {
      log << "epoch " << el.epoch << " loss " << el.loss << " psnr " << el.psnr
          << "\n";
      log.flush();
    }
  }

  // Full-frame train PSNR over a few views.
  {
    double mse_sum = 0;
    long px = 0;
    const int n_views =
        std::min<int>(config.final_psnr_views, static_cast<int>(train_ids.size()));
    for (int v = 0; v < n_views; ++v) {
      const auto& item = dataset.items[train_ids[v]];
      RenderOptions ro;
      ro.n_coarse = config.n_coarse;
      ro.n_fine = config.n_fine;
      ro.want_feature = false;
      ro.jitter = false;
      ro.threads = n_threads;
      ro.appearance_id = item.sequence;
      ro.seed = derive_seed(config.seed, 7000 + v);
      const SurfaceGrid grid = render_view(field, item.pose, item.intrinsics, 1, ro);
      for (int y = 0; y < item.image.height; ++y) {
        for (int x = 0; x < item.image.width; ++x) {
          const auto& s = grid.surfaces[static_cast<size_t>(y) * item.image.width + x];
          for (int c = 0; c < 3; ++c) {
            const double d = s.color(c) - item.image.at(x, y, c);
            mse_sum += d * d;
          }
          ++px;
        }
      }
    }
    result.final_psnr = psnr_from_mse(mse_sum / std::max(1L, 3 * px));
  }
  if (log) log << "final_psnr " << result.final_psnr << "\n";
  return result;
}

}  // namespace nerfloc
