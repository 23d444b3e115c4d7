#include "steerkit/sae_train.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {
constexpr double kSteBandwidth = 1e-3;  // straight-through kernel width
}

void TrainConfig::validate() const {
  if (total_steps <= 0 || batch <= 0)
    throw ValidationError("train config: total_steps and batch must be > 0");
  if (lr <= 0) throw ValidationError("train config: lr must be > 0");
  if (lr_warmup_steps < 0 || sparsity_warmup_steps < 0)
    throw ValidationError("train config: warmup steps must be >= 0");
  if (lr_warmup_steps >= total_steps)
    throw ValidationError("train config: warmup must be shorter than the run");
  if (decay_start_fraction <= 0.0 || decay_start_fraction > 1.0)
    throw ValidationError("train config: decay_start_fraction in (0, 1]");
  if (double(lr_warmup_steps) >= decay_start_fraction * total_steps)
    throw ValidationError("train config: warmup must end before decay starts");
}

double lr_at(int step, const TrainConfig& config) {
  if (step < 0 || step > config.total_steps)
    throw ValidationError("lr_at: step out of range");
  if (config.lr_warmup_steps > 0 && step < config.lr_warmup_steps)
    return config.lr * double(step) / double(config.lr_warmup_steps);
  const double decay_start = config.decay_start_fraction * config.total_steps;
  if (double(step) <= decay_start) return config.lr;
  const double span = double(config.total_steps) - decay_start;
  return config.lr * (double(config.total_steps) - double(step)) / span;
}

double lambda_eff_at(int step, const TrainConfig& config, double lambda) {
  if (step < 0) throw ValidationError("lambda_eff_at: negative step");
  if (config.sparsity_warmup_steps <= 0 || step >= config.sparsity_warmup_steps)
    return lambda;
  return lambda * double(step) / double(config.sparsity_warmup_steps);
}

namespace {

// Largest-value indices among dead latents, ties broken by lower index.
std::vector<int> top_dead(const Eigen::VectorXd& z,
                          const std::vector<std::uint8_t>& dead, int k_aux) {
  std::vector<int> idx;
  for (int i = 0; i < z.size(); ++i)
    if (i < int(dead.size()) && dead[std::size_t(i)]) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (z(a) != z(b)) return z(a) > z(b);
    return a < b;
  });
  if (int(idx.size()) > k_aux) idx.resize(std::size_t(k_aux));
  return idx;
}

SaeGradients zero_grads(const SaeParams& p) {
  SaeGradients g;
  const int F = p.dict_size();
  const int d = p.d();
  g.w_enc = Eigen::MatrixXd::Zero(F, d);
  g.w_dec = Eigen::MatrixXd::Zero(d, F);
  g.b_dec = Eigen::VectorXd::Zero(d);
  if (p.architecture == SaeArchitecture::Gated) {
    g.r_mag = Eigen::VectorXd::Zero(F);
    g.mag_bias = Eigen::VectorXd::Zero(F);
    g.gate_bias = Eigen::VectorXd::Zero(F);
  } else {
    g.b_enc = Eigen::VectorXd::Zero(F);
  }
  if (p.architecture == SaeArchitecture::JumpReLU)
    g.threshold = Eigen::VectorXd::Zero(F);
  return g;
}

}  // namespace

BatchEval evaluate_batch(const SaeParams& params, const Eigen::MatrixXd& batch,
                         double lambda_eff,
                         const std::vector<std::uint8_t>& dead,
                         double aux_coeff, int k_aux, bool want_grads) {
  if (batch.cols() != params.d())
    throw ValidationError("evaluate_batch: width mismatch");
  const Eigen::Index B = batch.rows();
  if (B < 1) throw ValidationError("evaluate_batch: empty batch");
  const int F = params.dict_size();
  const double invB = 1.0 / double(B);
  const SaeArchitecture arch = params.architecture;
  const bool topk_family =
      arch == SaeArchitecture::TopK || arch == SaeArchitecture::BatchTopK;

  BatchEval eval;
  eval.latent_active.assign(std::size_t(F), 0);

  // Preactivations.
  Eigen::MatrixXd z = batch * params.w_enc.transpose();
  if (arch != SaeArchitecture::Gated) z.rowwise() += params.b_enc.transpose();

  // Codes and selection.
  Eigen::MatrixXd codes = Eigen::MatrixXd::Zero(B, F);
  Eigen::MatrixXd gated_mag;  // Gated magnitude path, reused in backward
  switch (arch) {
    case SaeArchitecture::ReLU:
      codes = z.cwiseMax(0.0);
      break;
    case SaeArchitecture::TopK: {
      for (Eigen::Index r = 0; r < B; ++r) {
        std::vector<int> idx;
        for (int f = 0; f < F; ++f)
          if (z(r, f) > 0.0) idx.push_back(f);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
          if (z(r, a) != z(r, b)) return z(r, a) > z(r, b);
          return a < b;
        });
        if (int(idx.size()) > params.k) idx.resize(std::size_t(params.k));
        for (int f : idx) codes(r, f) = z(r, f);
      }
      break;
    }
    case SaeArchitecture::BatchTopK: {
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
      for (std::size_t i = 0; i < keep; ++i)
        codes(cells[i].r, cells[i].f) = cells[i].v;
      if (keep > 0) {
        eval.any_selected = true;
        eval.min_selected_preact = cells[keep - 1].v;
      }
      break;
    }
    case SaeArchitecture::JumpReLU:
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f)
          if (z(r, f) > params.threshold(f)) codes(r, f) = z(r, f);
      break;
    case SaeArchitecture::Gated: {
      gated_mag.resize(B, F);
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f) {
          gated_mag(r, f) =
              std::exp(params.r_mag(f)) * z(r, f) + params.mag_bias(f);
          if (z(r, f) + params.gate_bias(f) > 0.0 && gated_mag(r, f) > 0.0)
            codes(r, f) = gated_mag(r, f);
        }
      break;
    }
  }

  double active_cells = 0.0;
  for (Eigen::Index r = 0; r < B; ++r)
    for (int f = 0; f < F; ++f)
      if (codes(r, f) > 0.0) {
        eval.latent_active[std::size_t(f)] = 1;
        active_cells += 1.0;
      }
  eval.l0 = active_cells * invB;

  // Reconstruction.
  Eigen::MatrixXd xhat = codes * params.w_dec.transpose();
  xhat.rowwise() += params.b_dec.transpose();
  const Eigen::MatrixXd err = batch - xhat;  // rows: x_b - xhat_b
  eval.recon = err.squaredNorm() * invB;

  switch (arch) {
    case SaeArchitecture::ReLU:
    case SaeArchitecture::Gated:
      eval.sparsity = lambda_eff * codes.sum() * invB;
      break;
    case SaeArchitecture::JumpReLU:
      eval.sparsity = lambda_eff * active_cells * invB;
      break;
    default:
      eval.sparsity = 0.0;
      break;
  }

  // Aux-k on dead latents (TopK family only). The auxiliary latents encode
  // the residual itself (no bias), so a zero residual costs exactly zero.
  const bool want_aux = topk_family && aux_coeff > 0.0 && k_aux > 0 &&
                        std::any_of(dead.begin(), dead.end(),
                                    [](std::uint8_t d) { return d != 0; });
  Eigen::MatrixXd aux_codes, aux_err;
  if (want_aux) {
    const Eigen::MatrixXd z_res = err * params.w_enc.transpose();
    aux_codes = Eigen::MatrixXd::Zero(B, F);
    for (Eigen::Index r = 0; r < B; ++r)
      for (int f : top_dead(z_res.row(r).transpose(), dead, k_aux))
        aux_codes(r, f) = z_res(r, f);
    aux_err = err - aux_codes * params.w_dec.transpose();
    eval.aux = aux_err.squaredNorm() * invB;
  }

  eval.total = eval.recon + eval.sparsity + aux_coeff * eval.aux;
  if (!want_grads) return eval;

  // ---- Backward ----
  SaeGradients g = zero_grads(params);

  // Recon path.
  g.w_dec = -2.0 * invB * err.transpose() * codes;
  g.b_dec = -2.0 * invB * err.colwise().sum().transpose();
  Eigen::MatrixXd g_codes = -2.0 * invB * err * params.w_dec;  // B x F

  if (want_aux) {
    // aux = ||u||^2 with u = e - W_dec S (W_enc e), e = x - W_dec h - b_dec.
    // d(aux)/de = 2 (I - P)^T u with P = W_dec S W_enc; plus the direct
    // paths through the selected decoder columns and encoder rows.
    const double c2 = 2.0 * aux_coeff * invB;
    const Eigen::MatrixXd vtu = aux_err * params.w_dec;  // B x F: u . v_i
    Eigen::MatrixXd vtu_masked = Eigen::MatrixXd::Zero(B, F);
    for (Eigen::Index r = 0; r < B; ++r)
      for (int f = 0; f < F; ++f)
        if (aux_codes(r, f) != 0.0) vtu_masked(r, f) = vtu(r, f);
    const Eigen::MatrixXd g_e =
        c2 * (aux_err - vtu_masked * params.w_enc);  // B x d

    g.w_dec -= g_e.transpose() * codes;              // via e
    g.w_dec -= c2 * aux_err.transpose() * aux_codes; // via selected columns
    g.b_dec -= g_e.colwise().sum().transpose();
    g_codes -= g_e * params.w_dec;                   // via h into e
    g.w_enc -= c2 * vtu_masked.transpose() * err;    // via selected rows
  }

  // Chain through the nonlinearity into preactivation space.
  Eigen::MatrixXd g_z = Eigen::MatrixXd::Zero(B, F);
  switch (arch) {
    case SaeArchitecture::ReLU: {
      const double sp = lambda_eff * invB;
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f)
          if (codes(r, f) > 0.0) g_z(r, f) = g_codes(r, f) + sp;
      break;
    }
    case SaeArchitecture::TopK:
    case SaeArchitecture::BatchTopK: {
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f)
          if (codes(r, f) > 0.0) g_z(r, f) = g_codes(r, f);
      break;
    }
    case SaeArchitecture::JumpReLU: {
      const double eps = kSteBandwidth;
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f) {
          if (codes(r, f) > 0.0) g_z(r, f) = g_codes(r, f);
          if (std::abs(z(r, f) - params.threshold(f)) <= eps / 2.0) {
            // Straight-through: the jump in h and in the L0 count.
            g.threshold(f) += g_codes(r, f) * (-params.threshold(f) / eps);
            g.threshold(f) += lambda_eff * invB * (-1.0 / eps);
          }
        }
      break;
    }
    case SaeArchitecture::Gated: {
      const double sp = lambda_eff * invB;
      for (Eigen::Index r = 0; r < B; ++r)
        for (int f = 0; f < F; ++f) {
          if (codes(r, f) <= 0.0) continue;
          const double g_mag = g_codes(r, f) + sp;
          const double em = std::exp(params.r_mag(f));
          g_z(r, f) = g_mag * em;
          g.r_mag(f) += g_mag * em * z(r, f);
          g.mag_bias(f) += g_mag;
        }
      break;
    }
  }

  g.w_enc = g_z.transpose() * batch;
  if (arch != SaeArchitecture::Gated)
    g.b_enc = g_z.colwise().sum().transpose();
  eval.grads = std::move(g);
  return eval;
}

SaeGradients grad(const SaeParams& params, const Eigen::MatrixXd& batch,
                  double lambda_eff, const std::vector<std::uint8_t>& dead,
                  double aux_coeff, int k_aux) {
  return evaluate_batch(params, batch, lambda_eff, dead, aux_coeff, k_aux, true)
      .grads;
}

double training_loss(const SaeParams& params, const Eigen::MatrixXd& batch,
                     double lambda_eff, const std::vector<std::uint8_t>& dead,
                     double aux_coeff, int k_aux) {
  return evaluate_batch(params, batch, lambda_eff, dead, aux_coeff, k_aux,
                        false)
      .total;
}

double aux_k_loss(const SaeParams& params, const Eigen::VectorXd& x,
                  const LatentCode& h, int k_aux,
                  const std::vector<std::uint8_t>& dead) {
  if (params.architecture != SaeArchitecture::TopK &&
      params.architecture != SaeArchitecture::BatchTopK)
    throw ValidationError("aux_k_loss: TopK/BatchTopK only");
  const Eigen::VectorXd residual = x - decode(params, h);
  const Eigen::VectorXd z_res = params.w_enc * residual;  // no bias
  const std::vector<int> selected = top_dead(z_res, dead, k_aux);
  if (selected.empty()) return 0.0;  // empty auxiliary set
  Eigen::VectorXd aux_recon = Eigen::VectorXd::Zero(params.d());
  for (int f : selected) aux_recon += z_res(f) * params.w_dec.col(f);
  return (residual - aux_recon).squaredNorm();
}

// ---------------------------------------------------------------------------
// Adam

namespace {

void adam_update(Eigen::MatrixXd& p, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                 const Eigen::MatrixXd& g, double lr, double b1, double b2,
                 double eps, double bc1, double bc2) {
  if (p.size() == 0) return;
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v.array().matrix() + (1.0 - b2) * g.array().square().matrix();
  const Eigen::ArrayXXd mhat = m.array() / bc1;
  const Eigen::ArrayXXd vhat = v.array() / bc2;
  p.array() -= lr * mhat / (vhat.sqrt() + eps);
}

void adam_update(Eigen::VectorXd& p, Eigen::VectorXd& m, Eigen::VectorXd& v,
                 const Eigen::VectorXd& g, double lr, double b1, double b2,
                 double eps, double bc1, double bc2) {
  if (p.size() == 0) return;
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v.array().matrix() + (1.0 - b2) * g.array().square().matrix();
  const Eigen::ArrayXd mhat = m.array() / bc1;
  const Eigen::ArrayXd vhat = v.array() / bc2;
  p.array() -= lr * mhat / (vhat.sqrt() + eps);
}

}  // namespace

AdamState init_adam(const SaeParams& params) {
  AdamState s;
  s.m = zero_grads(params);
  s.v = zero_grads(params);
  return s;
}

void adam_step(SaeParams& params, AdamState& state, const SaeGradients& grads,
               double lr_t) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
  const double b1 = state.beta1, b2 = state.beta2, eps = state.eps;

  adam_update(params.w_enc, state.m.w_enc, state.v.w_enc, grads.w_enc, lr_t,
              b1, b2, eps, bc1, bc2);
  adam_update(params.w_dec, state.m.w_dec, state.v.w_dec, grads.w_dec, lr_t,
              b1, b2, eps, bc1, bc2);
  adam_update(params.b_dec, state.m.b_dec, state.v.b_dec, grads.b_dec, lr_t,
              b1, b2, eps, bc1, bc2);
  if (grads.b_enc.size() > 0)
    adam_update(params.b_enc, state.m.b_enc, state.v.b_enc, grads.b_enc, lr_t,
                b1, b2, eps, bc1, bc2);
  if (grads.threshold.size() > 0) {
    adam_update(params.threshold, state.m.threshold, state.v.threshold,
                grads.threshold, lr_t, b1, b2, eps, bc1, bc2);
    params.threshold = params.threshold.cwiseMax(0.0);
  }
  if (grads.r_mag.size() > 0) {
    adam_update(params.r_mag, state.m.r_mag, state.v.r_mag, grads.r_mag, lr_t,
                b1, b2, eps, bc1, bc2);
    adam_update(params.mag_bias, state.m.mag_bias, state.v.mag_bias,
                grads.mag_bias, lr_t, b1, b2, eps, bc1, bc2);
    adam_update(params.gate_bias, state.m.gate_bias, state.v.gate_bias,
                grads.gate_bias, lr_t, b1, b2, eps, bc1, bc2);
  }
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const ActivationDataset& dataset, const SaeConfig& sae_config,
                  const TrainConfig& train_config) {
  sae_config.validate();
  train_config.validate();
  if (Eigen::Index(sae_config.d) != dataset.width())
    throw ValidationError("train: dataset width does not match sae config");

  SaeParams params = init_sae(sae_config);
  normalize_decoder_columns_inplace(params);
  AdamState adam = init_adam(params);
  BatchStream stream(dataset, std::size_t(train_config.batch),
                     derive_seed(train_config.seed, 0xba7c4));

  // JumpReLU trains its L0 count against an internally scaled penalty when
  // no explicit lambda was configured.
  double lambda = params.lambda;
  if (sae_config.architecture == SaeArchitecture::JumpReLU && lambda <= 0.0)
    lambda = 1.0 / sae_config.target_l0;

  const bool topk_family =
      sae_config.architecture == SaeArchitecture::TopK ||
      sae_config.architecture == SaeArchitecture::BatchTopK;
  std::vector<int> steps_inactive(std::size_t(sae_config.dict_size), 0);
  std::vector<std::uint8_t> dead(std::size_t(sae_config.dict_size), 0);

  double thr_ema = 0.0;
  bool thr_started = false;

  TrainMetrics metrics;
  metrics.total.reserve(std::size_t(train_config.total_steps));

  for (int step = 0; step < train_config.total_steps; ++step) {
    const Eigen::MatrixXd batch = stream.next();
    const double lam_eff = lambda_eff_at(step, train_config, lambda);
    const double lr_t = lr_at(step, train_config);

    for (std::size_t f = 0; f < dead.size(); ++f)
      dead[f] = steps_inactive[f] >= train_config.dead_window ? 1 : 0;

    BatchEval eval = evaluate_batch(
        params, batch, lam_eff, dead,
        topk_family ? train_config.aux_k_coeff : 0.0, train_config.k_aux, true);

    // Remove the gradient component parallel to each decoder column so the
    // renormalization below does not fight the optimizer.
    for (int f = 0; f < sae_config.dict_size; ++f) {
      const Eigen::VectorXd col = params.w_dec.col(f);
      eval.grads.w_dec.col(f) -= eval.grads.w_dec.col(f).dot(col) * col;
    }

    adam_step(params, adam, eval.grads, lr_t);
    normalize_decoder_columns_inplace(params);

    for (std::size_t f = 0; f < dead.size(); ++f) {
      if (eval.latent_active[f])
        steps_inactive[f] = 0;
      else
        ++steps_inactive[f];
    }

    if (sae_config.architecture == SaeArchitecture::BatchTopK &&
        step >= train_config.threshold_tracking_start && eval.any_selected) {
      if (!thr_started) {
        thr_ema = eval.min_selected_preact;
        thr_started = true;
      } else {
        thr_ema = train_config.threshold_momentum * thr_ema +
                  (1.0 - train_config.threshold_momentum) *
                      eval.min_selected_preact;
      }
    }

    metrics.total.push_back(eval.total);
    metrics.recon.push_back(eval.recon);
    metrics.sparsity.push_back(eval.sparsity);
    metrics.l0.push_back(eval.l0);
    metrics.lr.push_back(lr_t);
    metrics.lambda_eff.push_back(lam_eff);
  }

  if (sae_config.architecture == SaeArchitecture::BatchTopK)
    params.inference_threshold = thr_started ? thr_ema : 0.0;

  const std::size_t n = metrics.l0.size();
  const std::size_t tail = std::max<std::size_t>(1, n / 10);
  double acc = 0.0;
  for (std::size_t i = n - tail; i < n; ++i) acc += metrics.l0[i];
  metrics.final_l0 = acc / double(tail);

  return TrainResult{std::move(params), std::move(metrics)};
}

}  // namespace steerkit
