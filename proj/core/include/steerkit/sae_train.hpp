#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "steerkit/dataset.hpp"
#include "steerkit/sae.hpp"

namespace steerkit {

struct TrainConfig {
  double lr = 3e-4;
  int lr_warmup_steps = 1000;
  int sparsity_warmup_steps = 5000;
  double decay_start_fraction = 0.8;
  int total_steps = 0;
  int batch = 0;
  double aux_k_coeff = 1.0 / 32.0;
  int k_aux = 32;
  int dead_window = 1000;            // steps of inactivity before "dead"
  int threshold_tracking_start = 1000;
  double threshold_momentum = 0.999;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Piecewise-linear schedule: 0 -> lr over the warmup, flat until
/// decay_start_fraction * total_steps, then linear to 0 at total_steps.
double lr_at(int step, const TrainConfig& config);

/// Linear ramp 0 -> lambda over sparsity_warmup_steps, then constant.
double lambda_eff_at(int step, const TrainConfig& config, double lambda);

/// Gradients for the trainable tensors of one architecture. Tensors that do
/// not apply are left empty. gate_bias is present for Gated but always zero:
/// the gate indicator has no usable derivative.
struct SaeGradients {
  Eigen::MatrixXd w_enc, w_dec;
  Eigen::VectorXd b_enc, b_dec, threshold, r_mag, mag_bias, gate_bias;
};

/// One training forward/backward evaluation on a batch. The objective is
///   mean_b [ ||x_b - xhat_b||^2 + sparsity_b ] + aux_coeff * mean_b aux_b
/// with BatchTopK encoded in batch mode and JumpReLU's threshold trained
/// through a straight-through kernel of bandwidth epsilon around the jump.
struct BatchEval {
  double total = 0.0;
  double recon = 0.0;
  double sparsity = 0.0;
  double aux = 0.0;
  double l0 = 0.0;
  std::vector<std::uint8_t> latent_active;  // fired anywhere in the batch
  double min_selected_preact = 0.0;         // BatchTopK; 0 when none selected
  bool any_selected = false;
  SaeGradients grads;
};

BatchEval evaluate_batch(const SaeParams& params, const Eigen::MatrixXd& batch,
                         double lambda_eff,
                         const std::vector<std::uint8_t>& dead = {},
                         double aux_coeff = 0.0, int k_aux = 0,
                         bool want_grads = true);

SaeGradients grad(const SaeParams& params, const Eigen::MatrixXd& batch,
                  double lambda_eff,
                  const std::vector<std::uint8_t>& dead = {},
                  double aux_coeff = 0.0, int k_aux = 0);

/// The scalar objective evaluate_batch differentiates; finite-difference
/// oracles probe this function.
double training_loss(const SaeParams& params, const Eigen::MatrixXd& batch,
                     double lambda_eff,
                     const std::vector<std::uint8_t>& dead = {},
                     double aux_coeff = 0.0, int k_aux = 0);

/// Residual reconstruction error using the top k_aux currently-dead latents'
/// preactivations: ||(x - xhat) - W_dec h_aux||^2. TopK/BatchTopK only.
double aux_k_loss(const SaeParams& params, const Eigen::VectorXd& x,
                  const LatentCode& h, int k_aux,
                  const std::vector<std::uint8_t>& dead);

struct AdamState {
  SaeGradients m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

AdamState init_adam(const SaeParams& params);
void adam_step(SaeParams& params, AdamState& state, const SaeGradients& grads,
               double lr_t);

struct TrainMetrics {
  std::vector<double> total, recon, sparsity, l0, lr, lambda_eff;
  double final_l0 = 0.0;  // mean measured L0 over the last 10% of steps
};

struct TrainResult {
  SaeParams params;
  TrainMetrics metrics;
};

/// Full optimization loop: seeded batches, decoder-gradient projection,
/// Adam, per-step decoder renormalization, dead-latent tracking and the
/// BatchTopK inference-threshold EMA.
TrainResult train(const ActivationDataset& dataset, const SaeConfig& sae_config,
                  const TrainConfig& train_config);

}  // namespace steerkit
