#include "steerkit/sae.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

std::string to_string(SaeArchitecture arch) {
  switch (arch) {
    case SaeArchitecture::ReLU: return "ReLU";
    case SaeArchitecture::Gated: return "Gated";
    case SaeArchitecture::TopK: return "TopK";
    case SaeArchitecture::BatchTopK: return "BatchTopK";
    case SaeArchitecture::JumpReLU: return "JumpReLU";
  }
  return "?";
}

SaeArchitecture parse_architecture(const std::string& label) {
  if (label == "ReLU") return SaeArchitecture::ReLU;
  if (label == "Gated") return SaeArchitecture::Gated;
  if (label == "TopK") return SaeArchitecture::TopK;
  if (label == "BatchTopK") return SaeArchitecture::BatchTopK;
  if (label == "JumpReLU") return SaeArchitecture::JumpReLU;
  throw ValidationError("unknown SAE architecture '" + label + "'");
}

void SaeConfig::validate() const {
  if (d <= 0 || dict_size <= 0)
    throw ValidationError("sae config: d and dict_size must be positive");
  if (dict_size < d)
    throw ValidationError("sae config: dictionary width must be >= d");
  const bool topk_family = architecture == SaeArchitecture::TopK ||
                           architecture == SaeArchitecture::BatchTopK;
  if (topk_family && (k <= 0 || k > dict_size))
    throw ValidationError("sae config: k must be in [1, F]");
  if ((architecture == SaeArchitecture::ReLU ||
       architecture == SaeArchitecture::Gated) &&
      lambda < 0)
    throw ValidationError("sae config: lambda must be >= 0");
  if (architecture == SaeArchitecture::JumpReLU && target_l0 <= 0)
    throw ValidationError("sae config: JumpReLU needs target_l0 > 0");
}

void SaeParams::validate() const {
  const int F = dict_size();
  const int dd = d();
  if (w_enc.rows() != F || w_enc.cols() != dd || b_dec.size() != dd)
    throw ValidationError("sae params: shape mismatch");
  switch (architecture) {
    case SaeArchitecture::Gated:
      if (r_mag.size() != F || mag_bias.size() != F || gate_bias.size() != F)
        throw ValidationError("sae params: gated extras missing");
      break;
    case SaeArchitecture::JumpReLU:
      if (threshold.size() != F || b_enc.size() != F)
        throw ValidationError("sae params: jumprelu extras missing");
      if ((threshold.array() < 0).any())
        throw ValidationError("sae params: threshold entries must be >= 0");
      break;
    default:
      if (b_enc.size() != F)
        throw ValidationError("sae params: encoder bias missing");
      break;
  }
}

SaeParams init_sae(const SaeConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x5ae));
  SaeParams p;
  p.architecture = config.architecture;
  p.k = config.k;
  p.lambda = config.lambda;
  p.target_l0 = config.target_l0;

  p.w_dec.resize(config.d, config.dict_size);
  for (int f = 0; f < config.dict_size; ++f) {
    Eigen::VectorXd col(config.d);
    for (int i = 0; i < config.d; ++i) col(i) = rng.gaussian();
    p.w_dec.col(f) = col / col.norm();
  }
  p.w_enc = p.w_dec.transpose();
  p.b_dec = Eigen::VectorXd::Zero(config.d);

  if (config.architecture == SaeArchitecture::Gated) {
    p.r_mag = Eigen::VectorXd::Zero(config.dict_size);
    p.mag_bias = Eigen::VectorXd::Zero(config.dict_size);
    p.gate_bias = Eigen::VectorXd::Zero(config.dict_size);
  } else {
    p.b_enc = Eigen::VectorXd::Zero(config.dict_size);
  }
  if (config.architecture == SaeArchitecture::JumpReLU) {
    p.threshold = Eigen::VectorXd::Constant(config.dict_size, 1e-3);
  }
  return p;
}

Eigen::VectorXd preactivation(const SaeParams& params,
                              const Eigen::VectorXd& x) {
  if (x.size() != params.d())
    throw ValidationError("sae encode: input width " +
                          std::to_string(x.size()) + " != d " +
                          std::to_string(params.d()));
  Eigen::VectorXd z = params.w_enc * x;
  if (params.architecture != SaeArchitecture::Gated) z += params.b_enc;
  return z;
}

namespace {

// Indices of the n largest strictly positive entries, ties broken by lower
// index. Returns fewer than n when fewer are positive.
std::vector<int> top_positive(const Eigen::VectorXd& z, int n) {
  std::vector<int> idx;
  for (int i = 0; i < z.size(); ++i)
    if (z(i) > 0.0) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (z(a) != z(b)) return z(a) > z(b);
    return a < b;
  });
  if (int(idx.size()) > n) idx.resize(std::size_t(n));
  return idx;
}

int count_positive(const Eigen::VectorXd& h) {
  int n = 0;
  for (int i = 0; i < h.size(); ++i) n += (h(i) > 0.0);
  return n;
}

}  // namespace

namespace {

// Inference nonlinearity on one row's preactivation (W_enc x + b_enc, or
// W_enc x for Gated).
Eigen::VectorXd nonlinearity(const SaeParams& params,
                             const Eigen::VectorXd& z) {
  const int F = params.dict_size();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(F);
  switch (params.architecture) {
    case SaeArchitecture::ReLU:
      h = z.cwiseMax(0.0);
      break;
    case SaeArchitecture::TopK:
      for (int i : top_positive(z, params.k)) h(i) = z(i);
      break;
    case SaeArchitecture::BatchTopK: {
      if (!params.inference_threshold)
        throw ValidationError(
            "sae encode: BatchTopK single-row encode needs "
            "inference_threshold (train first or encode as a batch)");
      const double thr = *params.inference_threshold;
      for (int i = 0; i < F; ++i)
        if (z(i) > thr) h(i) = z(i);
      break;
    }
    case SaeArchitecture::JumpReLU:
      for (int i = 0; i < F; ++i)
        if (z(i) > params.threshold(i)) h(i) = z(i);
      break;
    case SaeArchitecture::Gated:
      for (int i = 0; i < F; ++i) {
        if (z(i) + params.gate_bias(i) > 0.0) {
          const double mag =
              std::exp(params.r_mag(i)) * z(i) + params.mag_bias(i);
          if (mag > 0.0) h(i) = mag;
        }
      }
      break;
  }
  return h;
}

}  // namespace

LatentCode encode(const SaeParams& params, const Eigen::VectorXd& x) {
  LatentCode code;
  code.values = nonlinearity(params, preactivation(params, x));
  code.active_count = count_positive(code.values);
  return code;
}

Eigen::MatrixXd encode_batch(const SaeParams& params,
                             const Eigen::MatrixXd& x) {
  if (x.rows() < 1) throw ValidationError("sae encode_batch: empty batch");
  if (x.cols() != params.d())
    throw ValidationError("sae encode_batch: width mismatch");
  const Eigen::Index B = x.rows();
  const int F = params.dict_size();

  if (params.architecture != SaeArchitecture::BatchTopK) {
    Eigen::MatrixXd codes(B, F);
    for (Eigen::Index r = 0; r < B; ++r)
      codes.row(r) = encode(params, x.row(r).transpose()).values.transpose();
    return codes;
  }

  // BatchTopK training mode: B*k largest strictly positive preactivations
  // across the whole batch. Ties broken by (value desc, row, feature).
  Eigen::MatrixXd z = x * params.w_enc.transpose();
  z.rowwise() += params.b_enc.transpose();
  struct Cell {
    double v;
    Eigen::Index r;
    int f;
  };
  std::vector<Cell> cells;
  for (Eigen::Index r = 0; r < B; ++r)
    for (int f = 0; f < F; ++f)
      if (z(r, f) > 0.0) cells.push_back({z(r, f), r, f});
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.r != b.r) return a.r < b.r;
    return a.f < b.f;
  });
  const std::size_t keep =
      std::min(cells.size(), std::size_t(B) * std::size_t(params.k));
  Eigen::MatrixXd codes = Eigen::MatrixXd::Zero(B, F);
  for (std::size_t i = 0; i < keep; ++i)
    codes(cells[i].r, cells[i].f) = cells[i].v;
  return codes;
}

Eigen::VectorXd decode(const SaeParams& params, const Eigen::VectorXd& h) {
  if (h.size() != params.dict_size())
    throw ValidationError("sae decode: code width mismatch");
  return params.w_dec * h + params.b_dec;
}

Eigen::VectorXd decode(const SaeParams& params, const LatentCode& h) {
  return decode(params, h.values);
}

LossParts loss(const SaeParams& params, const Eigen::VectorXd& x,
               double lambda_eff) {
  const LatentCode code = encode(params, x);
  const Eigen::VectorXd xhat = decode(params, code);
  LossParts parts;
  parts.recon = (x - xhat).squaredNorm();
  switch (params.architecture) {
    case SaeArchitecture::ReLU:
    case SaeArchitecture::Gated:
      parts.sparsity = lambda_eff * code.values.lpNorm<1>();
      break;
    case SaeArchitecture::JumpReLU:
      parts.sparsity = lambda_eff * double(code.active_count);
      break;
    default:
      parts.sparsity = 0.0;
      break;
  }
  parts.total = parts.recon + parts.sparsity;
  return parts;
}

void normalize_decoder_columns_inplace(SaeParams& params) {
  for (int f = 0; f < params.dict_size(); ++f) {
    const double n = params.w_dec.col(f).norm();
    if (n < 1e-12)
      throw ValidationError("decoder column " + std::to_string(f) +
                            " has zero norm");
    params.w_dec.col(f) /= n;
  }
}

SaeParams normalize_decoder_columns(SaeParams params) {
  normalize_decoder_columns_inplace(params);
  return params;
}

double l0(const Eigen::MatrixXd& codes) {
  if (codes.rows() == 0) throw ValidationError("l0: empty batch");
  double count = 0.0;
  for (Eigen::Index r = 0; r < codes.rows(); ++r)
    for (Eigen::Index c = 0; c < codes.cols(); ++c)
      count += (codes(r, c) > 0.0);
  return count / double(codes.rows());
}

Eigen::VectorXd feature_direction(const SaeParams& params, int f) {
  if (f < 0 || f >= params.dict_size())
    throw ValidationError("feature index " + std::to_string(f) +
                          " out of range");
  return params.w_dec.col(f);
}

Eigen::MatrixXd encode_dataset(const SaeParams& params,
                               const ActivationDataset& dataset) {
  const Eigen::Index n = Eigen::Index(dataset.size());
  Eigen::MatrixXd codes(n, params.dict_size());
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index begin = 0; begin < n; begin += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - begin);
    Eigen::MatrixXd z =
        dataset.activations.middleRows(begin, len) * params.w_enc.transpose();
    if (params.architecture != SaeArchitecture::Gated)
      z.rowwise() += params.b_enc.transpose();
    for (Eigen::Index r = 0; r < len; ++r)
      codes.row(begin + r) =
          nonlinearity(params, z.row(r).transpose()).transpose();
  }
  return codes;
}

Eigen::VectorXd feature_activations(const SaeParams& params,
                                    const ActivationDataset& dataset, int f) {
  if (f < 0 || f >= params.dict_size())
    throw ValidationError("feature index out of range");
  const Eigen::Index n = Eigen::Index(dataset.size());
  Eigen::VectorXd acts = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (dataset.special_mask[std::size_t(i)]) continue;
    acts(i) =
        encode(params, dataset.activations.row(i).transpose()).values(f);
  }
  return acts;
}

Eigen::VectorXd feature_max_activations(const SaeParams& params,
                                        const ActivationDataset& dataset) {
  if (dataset.size() == 0) throw ValidationError("empty dataset");
  const Eigen::MatrixXd codes = encode_dataset(params, dataset);
  Eigen::VectorXd maxima = Eigen::VectorXd::Zero(params.dict_size());
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    if (dataset.special_mask[std::size_t(i)]) continue;
    maxima = maxima.cwiseMax(codes.row(i).transpose());
  }
  return maxima;
}

double feature_max_activation(const SaeParams& params,
                              const ActivationDataset& dataset, int f) {
  if (f < 0 || f >= params.dict_size())
    throw ValidationError("feature index out of range");
  return feature_activations(params, dataset, f).maxCoeff();
}

}  // namespace steerkit
