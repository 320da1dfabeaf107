#pragma once

#include <string>
#include <vector>

#include "nerfloc/scene_data.hpp"
#include "nerfloc/scene_field.hpp"

namespace nerfloc {

struct AllMasked : std::runtime_error {
  AllMasked() : std::runtime_error("all rays masked") {}
};
struct EmptyDataset : std::runtime_error {
  EmptyDataset() : std::runtime_error("dataset has no training images") {}
};

struct NerfTrainConfig {
  int rays_per_batch = 9216;
  int n_coarse = 128;
  int n_fine = 128;
  int epochs = 15;
  double lr = 1.6e-3;  // cosine-annealed to 0
  int max_train_images = 900;
  long rays_per_epoch = 0;  // 0 -> one pass over every unmasked train pixel
  uint64_t seed = 0;
  int threads = 0;          // 0 -> hardware concurrency
  int rays_per_chunk = 256; // parallel work granularity (fixed for determinism)
  double density_noise_std = 1.0;  // annealed to 0 by mid-training
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int psnr_sample_rays = 4096;
  int final_psnr_views = 8;
  std::string log_path;  // optional plain-text metrics log
};

// Mean squared error over unmasked rays (mask nonzero = excluded).
// Mean is taken over rays and channels. Throws AllMasked.
double photometric_loss(const Eigen::MatrixXd& rendered,
                        const Eigen::MatrixXd& target,
                        const std::vector<uint8_t>& mask);

struct TrainBatchOptions {
  int n_coarse = 32;
  int n_fine = 32;
  bool jitter = true;
  uint64_t seed = 0;
  double density_noise_std = 0.0;  // pre-softplus noise, train-time only
};

// Reusable buffers for the training forward/backward; keeping them alive
// across batches avoids re-faulting tens of MB per call.
template <typename T>
struct TrainWorkspace {
  FieldCache<T> density_cache;
  FieldCache<T> cache;
  MatX<T> coarse_pts, pts, dirs;
  std::vector<int> app;
  VecX<T> d_sigma;
  MatX<T> d_color;
};

// Renders a batch of rays through the stratified + hierarchical pipeline,
// computes the masked photometric MSE against `targets`, and accumulates
// parameter gradients. The hierarchical depths are treated as constants of
// the backward pass. Exposed so gradient checks can drive it directly.
template <typename T>
double field_loss_and_grad(SceneField<T>* field, const std::vector<Ray>& rays,
                           const MatX<T>& targets,
                           const std::vector<uint8_t>& mask,
                           const std::vector<int>& app_idx,
                           const TrainBatchOptions& opts,
                           TrainWorkspace<T>* workspace = nullptr);

struct EpochLog {
  int epoch = 0;
  double loss = 0;
  double psnr = 0;  // sampled train-ray estimate
  double lr = 0;
};

struct NerfTrainResult {
  SceneField<float> field;
  std::vector<EpochLog> epochs;
  double final_psnr = 0;  // full-frame PSNR over a few train views
};

// Per-scene field optimization: masked photometric loss over shuffled ray
// batches, Adam with cosine annealing, per-epoch PSNR logging. Deterministic
// given config.seed. Throws EmptyDataset.
NerfTrainResult train_scene(const SceneDataset& dataset,
                            const SceneFieldConfig& field_config,
                            const NerfTrainConfig& config);

}  // namespace nerfloc
