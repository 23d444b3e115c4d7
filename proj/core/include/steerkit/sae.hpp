#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>

#include "steerkit/dataset.hpp"

namespace steerkit {

enum class SaeArchitecture { ReLU, Gated, TopK, BatchTopK, JumpReLU };

std::string to_string(SaeArchitecture arch);
SaeArchitecture parse_architecture(const std::string& label);

struct SaeConfig {
  SaeArchitecture architecture = SaeArchitecture::ReLU;
  int d = 0;          // input width
  int dict_size = 0;  // F
  int k = 0;          // TopK / BatchTopK active count
  double lambda = 0.0;     // ReLU / Gated penalty (JumpReLU override allowed)
  double target_l0 = 0.0;  // JumpReLU
  std::uint64_t seed = 0;

  void validate() const;
};

/// Weights for one SAE. Only the fields of the configured architecture are
/// populated; the rest stay empty.
struct SaeParams {
  SaeArchitecture architecture = SaeArchitecture::ReLU;
  Eigen::MatrixXd w_enc;  // F x d
  Eigen::VectorXd b_enc;  // F   (not used by Gated)
  Eigen::MatrixXd w_dec;  // d x F
  Eigen::VectorXd b_dec;  // d

  Eigen::VectorXd threshold;                   // JumpReLU, F, entries >= 0
  Eigen::VectorXd r_mag, mag_bias, gate_bias;  // Gated, F each
  int k = 0;                                   // TopK / BatchTopK
  std::optional<double> inference_threshold;   // BatchTopK single-row encode

  double lambda = 0.0;
  double target_l0 = 0.0;

  int d() const { return int(w_dec.rows()); }
  int dict_size() const { return int(w_dec.cols()); }
  void validate() const;
};

SaeParams init_sae(const SaeConfig& config);

/// One row's latent code: dense values (length F, all >= 0 for every
/// architecture here) plus the count of strictly positive entries.
struct LatentCode {
  Eigen::VectorXd values;
  int active_count = 0;
};

/// Encoder preactivation z = W_enc x + b_enc (W_enc x for Gated).
Eigen::VectorXd preactivation(const SaeParams& params, const Eigen::VectorXd& x);

LatentCode encode(const SaeParams& params, const Eigen::VectorXd& x);

/// Row-wise encode, except BatchTopK which uses training-mode selection:
/// the B*k largest strictly positive preactivations across the whole batch.
Eigen::MatrixXd encode_batch(const SaeParams& params, const Eigen::MatrixXd& x);

Eigen::VectorXd decode(const SaeParams& params, const Eigen::VectorXd& h);
Eigen::VectorXd decode(const SaeParams& params, const LatentCode& h);

struct LossParts {
  double total = 0.0;
  double recon = 0.0;
  double sparsity = 0.0;
};

/// Squared reconstruction error plus the architecture's sparsity penalty:
/// lambda_eff * l1(h) for ReLU/Gated, lambda_eff * L0(h) for JumpReLU,
/// zero for TopK/BatchTopK.
LossParts loss(const SaeParams& params, const Eigen::VectorXd& x,
               double lambda_eff);

SaeParams normalize_decoder_columns(SaeParams params);
void normalize_decoder_columns_inplace(SaeParams& params);

/// Mean count of strictly positive entries per row.
double l0(const Eigen::MatrixXd& codes);

/// f-th decoder column (unit norm once the decoder is normalized).
Eigen::VectorXd feature_direction(const SaeParams& params, int f);

/// Max encode(x)_f over unmasked dataset rows; 0 if the feature never fires.
double feature_max_activation(const SaeParams& params,
                              const ActivationDataset& dataset, int f);

/// All features at once (one chunked pass over the dataset).
Eigen::VectorXd feature_max_activations(const SaeParams& params,
                                        const ActivationDataset& dataset);

/// Latent activations of one feature over every dataset row (masked rows
/// get 0). Row-wise inference encode semantics.
Eigen::VectorXd feature_activations(const SaeParams& params,
                                    const ActivationDataset& dataset, int f);

/// Full inference-mode code matrix for the dataset, rows x F, chunked.
Eigen::MatrixXd encode_dataset(const SaeParams& params,
                               const ActivationDataset& dataset);

}  // namespace steerkit
