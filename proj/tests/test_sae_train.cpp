#include <doctest.h>

#include <cmath>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/sae.hpp"
#include "steerkit/sae_train.hpp"

using namespace steerkit;

namespace {

TrainConfig schedule_config() {
  TrainConfig tc;
  tc.lr = 3e-4;
  tc.lr_warmup_steps = 1000;
  tc.sparsity_warmup_steps = 5000;
  tc.decay_start_fraction = 0.8;
  tc.total_steps = 10000;
  tc.batch = 8;
  return tc;
}

SaeParams seeded_params(SaeArchitecture arch, int d, int F,
                        std::uint64_t seed) {
  SaeConfig cfg;
  cfg.architecture = arch;
  cfg.d = d;
  cfg.dict_size = F;
  cfg.k = 3;
  cfg.lambda = 0.05;
  cfg.target_l0 = 4;
  cfg.seed = seed;
  SaeParams p = init_sae(cfg);
  // Perturb biases/extras so every trainable path is exercised.
  Rng rng(derive_seed(seed, 1));
  if (p.b_enc.size())
    for (int i = 0; i < p.b_enc.size(); ++i) p.b_enc(i) = 0.1 * rng.gaussian();
  p.b_dec.resize(d);
  for (int i = 0; i < d; ++i) p.b_dec(i) = 0.1 * rng.gaussian();
  if (p.threshold.size())
    for (int i = 0; i < p.threshold.size(); ++i)
      p.threshold(i) = 0.05 + 0.02 * std::abs(rng.gaussian());
  if (p.r_mag.size())
    for (int i = 0; i < p.r_mag.size(); ++i) {
      p.r_mag(i) = 0.1 * rng.gaussian();
      p.mag_bias(i) = 0.1 * rng.gaussian();
      p.gate_bias(i) = 0.1 * rng.gaussian();
    }
  if (arch == SaeArchitecture::BatchTopK) p.inference_threshold = 0.1;
  return p;
}

Eigen::MatrixXd seeded_batch(int B, int d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(B, d);
  for (int r = 0; r < B; ++r)
    for (int c = 0; c < d; ++c) x(r, c) = rng.gaussian();
  return x;
}

ActivationDataset dataset_from(const Eigen::MatrixXd& rows) {
  ActivationDataset ds;
  ds.model_id = "t";
  ds.layer = 0;
  ds.activations = rows;
  for (int r = 0; r < rows.rows(); ++r) {
    ds.tokens.push_back(r % 7);
    ds.doc_ids.push_back(0);
    ds.special_mask.push_back(0);
  }
  return ds;
}

// Central finite differences of the training objective. The oracle only
// touches training_loss, never the analytic gradient path.
double fd_gradient(SaeParams params, double* slot,
                   const Eigen::MatrixXd& batch, double lambda_eff,
                   const std::vector<std::uint8_t>& dead, double aux_coeff,
                   int k_aux, double h = 1e-6) {
  const double saved = *slot;
  *slot = saved + h;
  const double up = training_loss(params, batch, lambda_eff, dead, aux_coeff,
                                  k_aux);
  *slot = saved - h;
  const double down = training_loss(params, batch, lambda_eff, dead,
                                    aux_coeff, k_aux);
  *slot = saved;
  return (up - down) / (2.0 * h);
}

struct TensorRef {
  std::string name;
  double* data;
  const double* grad;
  Eigen::Index size;
};

std::vector<TensorRef> trainable(SaeParams& p, const SaeGradients& g) {
  std::vector<TensorRef> refs;
  refs.push_back({"w_enc", p.w_enc.data(), g.w_enc.data(), p.w_enc.size()});
  refs.push_back({"w_dec", p.w_dec.data(), g.w_dec.data(), p.w_dec.size()});
  refs.push_back({"b_dec", p.b_dec.data(), g.b_dec.data(), p.b_dec.size()});
  if (g.b_enc.size())
    refs.push_back({"b_enc", p.b_enc.data(), g.b_enc.data(), p.b_enc.size()});
  if (g.threshold.size())
    refs.push_back({"threshold", p.threshold.data(), g.threshold.data(),
                    p.threshold.size()});
  if (g.r_mag.size()) {
    refs.push_back({"r_mag", p.r_mag.data(), g.r_mag.data(), p.r_mag.size()});
    refs.push_back({"mag_bias", p.mag_bias.data(), g.mag_bias.data(),
                    p.mag_bias.size()});
    refs.push_back({"gate_bias", p.gate_bias.data(), g.gate_bias.data(),
                    p.gate_bias.size()});
  }
  return refs;
}

double max_relative_error(SaeParams params, const Eigen::MatrixXd& batch,
                          double lambda_eff,
                          const std::vector<std::uint8_t>& dead,
                          double aux_coeff, int k_aux) {
  const SaeGradients grads =
      grad(params, batch, lambda_eff, dead, aux_coeff, k_aux);
  SaeParams probe = params;
  const SaeGradients& gref = grads;
  double worst = 0.0;
  for (auto& ref : trainable(probe, gref)) {
    for (Eigen::Index i = 0; i < ref.size; ++i) {
      const double analytic = ref.grad[i];
      const double numeric = fd_gradient(probe, ref.data + i, batch,
                                         lambda_eff, dead, aux_coeff, k_aux);
      const double denom = std::max({std::abs(analytic), std::abs(numeric),
                                     1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedules

TEST_CASE("lr schedule: ramp start, warmup end, half decay, terminal zero") {
  const TrainConfig tc = schedule_config();
  CHECK(lr_at(0, tc) == 0.0);
  CHECK(lr_at(1000, tc) == doctest::Approx(3e-4));  // warmup end
  CHECK(lr_at(5000, tc) == doctest::Approx(3e-4));  // plateau
  // Decay starts at 8000; step 9000 is half of the decay span.
  CHECK(lr_at(9000, tc) == doctest::Approx(1.5e-4));
  CHECK(lr_at(10000, tc) == 0.0);
}

TEST_CASE("lr schedule is continuous and piecewise linear") {
  const TrainConfig tc = schedule_config();
  double prev = lr_at(0, tc);
  for (int step = 1; step <= tc.total_steps; ++step) {
    const double cur = lr_at(step, tc);
    CHECK(std::abs(cur - prev) <= tc.lr / 1000.0 + 1e-12);
    prev = cur;
  }
}

TEST_CASE("sparsity warmup ramps linearly then holds") {
  const TrainConfig tc = schedule_config();
  CHECK(lambda_eff_at(0, tc, 0.04) == 0.0);
  CHECK(lambda_eff_at(2500, tc, 0.04) == doctest::Approx(0.02));
  CHECK(lambda_eff_at(5000, tc, 0.04) == doctest::Approx(0.04));
  CHECK(lambda_eff_at(123456, tc, 0.04) == doctest::Approx(0.04));
}

// ---------------------------------------------------------------------------
// Gradients vs central finite differences

TEST_CASE("analytic gradients match finite differences for all architectures") {
  const int d = 8, F = 16, B = 4;
  const Eigen::MatrixXd batch = seeded_batch(B, d, 71);
  std::vector<std::uint8_t> dead(F, 0);
  dead[1] = dead[7] = dead[12] = 1;

  for (auto arch : {SaeArchitecture::ReLU, SaeArchitecture::Gated,
                    SaeArchitecture::TopK, SaeArchitecture::BatchTopK,
                    SaeArchitecture::JumpReLU}) {
    CAPTURE(to_string(arch));
    const SaeParams p = seeded_params(arch, d, F, 73);
    const bool topk_family = arch == SaeArchitecture::TopK ||
                             arch == SaeArchitecture::BatchTopK;
    const double aux = topk_family ? 1.0 / 32.0 : 0.0;
    const double err =
        max_relative_error(p, batch, 0.05, dead, aux, 2);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("zero batch with zero biases gives zero recon gradient on w_dec") {
  SaeConfig cfg;
  cfg.architecture = SaeArchitecture::ReLU;
  cfg.d = 4;
  cfg.dict_size = 8;
  cfg.lambda = 0.0;
  cfg.seed = 5;
  const SaeParams p = init_sae(cfg);  // zero biases
  const Eigen::MatrixXd batch = Eigen::MatrixXd::Zero(3, 4);
  const SaeGradients g = grad(p, batch, 0.0);
  CHECK(g.w_dec.lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("sparsity gradient is linear in lambda for relu") {
  const SaeParams p = seeded_params(SaeArchitecture::ReLU, 6, 10, 79);
  const Eigen::MatrixXd batch = seeded_batch(5, 6, 83);
  const SaeGradients g0 = grad(p, batch, 0.0);
  const SaeGradients g1 = grad(p, batch, 0.1);
  const SaeGradients g2 = grad(p, batch, 0.2);
  const Eigen::MatrixXd sp1 = g1.b_enc - g0.b_enc;
  const Eigen::MatrixXd sp2 = g2.b_enc - g0.b_enc;
  CHECK((sp2 - 2.0 * sp1).lpNorm<Eigen::Infinity>() < 1e-14);
}

// ---------------------------------------------------------------------------
// Adam

TEST_CASE("adam leaves parameters unchanged under a zero gradient") {
  SaeParams p = seeded_params(SaeArchitecture::ReLU, 4, 6, 89);
  const SaeParams before = p;
  AdamState state = init_adam(p);
  SaeGradients zeros = grad(p, Eigen::MatrixXd::Zero(2, 4), 0.0);
  zeros.w_enc.setZero();
  zeros.w_dec.setZero();
  zeros.b_enc.setZero();
  zeros.b_dec.setZero();
  adam_step(p, state, zeros, 1e-3);
  CHECK(p.w_enc == before.w_enc);
  CHECK(p.w_dec == before.w_dec);
}

TEST_CASE("first adam step matches the closed form") {
  // With bias correction, step 1 moves by -lr * g / (|g| + eps') where the
  // epsilon enters after the sqrt of the bias-corrected second moment.
  SaeParams p = seeded_params(SaeArchitecture::ReLU, 3, 4, 97);
  const SaeParams before = p;
  AdamState state = init_adam(p);
  SaeGradients g = grad(p, Eigen::MatrixXd::Zero(2, 3), 0.0);
  g.w_enc.setConstant(0.0);
  g.w_dec.setConstant(0.0);
  g.b_dec.setZero();
  g.b_enc.setZero();
  g.w_enc(1, 2) = 0.25;
  g.w_enc(0, 0) = -3.0;
  const double lr = 1e-2;
  adam_step(p, state, g, lr);
  for (auto [r, c] : {std::pair{1, 2}, std::pair{0, 0}}) {
    const double gv = g.w_enc(r, c);
    const double mhat = 0.1 * gv / (1.0 - 0.9);
    const double vhat = 0.001 * gv * gv / (1.0 - 0.999);
    const double expected =
        before.w_enc(r, c) - lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.w_enc(r, c) == doctest::Approx(expected).epsilon(1e-12));
  }
  // Untouched coordinates stay put.
  CHECK(p.w_enc(2, 1) == before.w_enc(2, 1));
}

// ---------------------------------------------------------------------------
// Aux-k

TEST_CASE("aux_k_loss is zero with no dead latents or zero residual") {
  const SaeParams p = seeded_params(SaeArchitecture::TopK, 4, 8, 101);
  Eigen::VectorXd x = seeded_batch(1, 4, 103).row(0).transpose();
  const LatentCode h = encode(p, x);
  std::vector<std::uint8_t> none(8, 0);
  CHECK(aux_k_loss(p, x, h, 4, none) == 0.0);

  // Zero residual: decode(h) == x by construction.
  std::vector<std::uint8_t> some(8, 0);
  some[2] = 1;
  const Eigen::VectorXd xhat = decode(p, h);
  // Feed x = xhat so the residual is exactly zero; the aux term reconstructs
  // the zero vector minus the dead contribution. With preactivation z_2 at
  // xhat generally nonzero this is ||0 - z_2 v_2||^2, so instead check the
  // stated case via the formula below.
  const double z2 = preactivation(p, xhat)(2);
  const double expected = (Eigen::VectorXd::Zero(4) - z2 * p.w_dec.col(2))
                              .squaredNorm();
  CHECK(aux_k_loss(p, xhat, encode(p, xhat), 4, some) ==
        doctest::Approx(expected));
}

TEST_CASE("aux_k_loss with one dead latent matches the direct formula") {
  const SaeParams p = seeded_params(SaeArchitecture::TopK, 4, 8, 107);
  const Eigen::VectorXd x = seeded_batch(1, 4, 109).row(0).transpose();
  const LatentCode h = encode(p, x);
  std::vector<std::uint8_t> dead(8, 0);
  dead[5] = 1;
  const double a = preactivation(p, x)(5);
  const Eigen::VectorXd residual = x - decode(p, h);
  const double expected = (residual - a * p.w_dec.col(5)).squaredNorm();
  CHECK(aux_k_loss(p, x, h, 3, dead) == doctest::Approx(expected));
}

TEST_CASE("aux_k_loss rejects penalty architectures") {
  const SaeParams p = seeded_params(SaeArchitecture::ReLU, 4, 8, 113);
  const Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
  CHECK_THROWS_AS(aux_k_loss(p, x, encode(p, x), 4, {}), ValidationError);
}

// ---------------------------------------------------------------------------
// Full training runs (desk scale)

namespace {

TrainConfig desk_train(int steps, int batch, std::uint64_t seed) {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.lr_warmup_steps = 20;
  tc.sparsity_warmup_steps = 50;
  tc.decay_start_fraction = 0.8;
  tc.total_steps = steps;
  tc.batch = batch;
  tc.dead_window = 100;
  tc.threshold_tracking_start = 50;
  tc.seed = seed;
  return tc;
}

}  // namespace

TEST_CASE("relu lambda sweep yields strictly decreasing final L0") {
  Rng rng(127);
  Eigen::MatrixXd rows(2000, 8);
  // A few latent directions plus noise, so sparsity has something to find.
  Eigen::MatrixXd basis = seeded_batch(4, 8, 131);
  for (int r = 0; r < rows.rows(); ++r) {
    rows.row(r) = 0.05 * seeded_batch(1, 8, 137 + std::uint64_t(r)).row(0);
    rows.row(r) += std::abs(rng.gaussian()) * basis.row(int(rng.index(4)));
  }
  const ActivationDataset ds = dataset_from(rows);

  double previous = -1.0;
  bool first = true;
  for (double lambda : {0.012, 0.02, 0.04}) {
    SaeConfig cfg;
    cfg.architecture = SaeArchitecture::ReLU;
    cfg.d = 8;
    cfg.dict_size = 16;
    cfg.lambda = lambda;
    cfg.seed = 139;
    const TrainResult result = train(ds, cfg, desk_train(400, 64, 149));
    CAPTURE(lambda);
    if (!first) CHECK(result.metrics.final_l0 < previous);
    previous = result.metrics.final_l0;
    first = false;
  }
}

TEST_CASE("topk training pins the measured L0 at k") {
  const ActivationDataset ds = dataset_from(seeded_batch(1500, 8, 151));
  SaeConfig cfg;
  cfg.architecture = SaeArchitecture::TopK;
  cfg.d = 8;
  cfg.dict_size = 32;
  cfg.k = 8;
  cfg.seed = 157;
  const TrainResult result = train(ds, cfg, desk_train(200, 32, 163));
  CHECK(result.metrics.final_l0 == doctest::Approx(8.0).epsilon(0.0125));
}

TEST_CASE("training is deterministic given identical seeds") {
  const ActivationDataset ds = dataset_from(seeded_batch(600, 6, 167));
  SaeConfig cfg;
  cfg.architecture = SaeArchitecture::Gated;
  cfg.d = 6;
  cfg.dict_size = 12;
  cfg.lambda = 0.02;
  cfg.seed = 173;
  const TrainConfig tc = desk_train(120, 32, 179);
  const TrainResult a = train(ds, cfg, tc);
  const TrainResult b = train(ds, cfg, tc);
  CHECK(a.params.w_enc == b.params.w_enc);
  CHECK(a.params.w_dec == b.params.w_dec);
  CHECK(a.metrics.total == b.metrics.total);
}

TEST_CASE("decoder columns stay unit norm and loss improves over training") {
  const ActivationDataset ds = dataset_from(seeded_batch(1200, 8, 181));
  for (auto arch : {SaeArchitecture::ReLU, SaeArchitecture::BatchTopK,
                    SaeArchitecture::JumpReLU}) {
    CAPTURE(to_string(arch));
    SaeConfig cfg;
    cfg.architecture = arch;
    cfg.d = 8;
    cfg.dict_size = 16;
    cfg.k = 4;
    cfg.lambda = 0.01;
    cfg.target_l0 = 4;
    cfg.seed = 191;
    const TrainResult result = train(ds, cfg, desk_train(300, 32, 193));
    for (int f = 0; f < 16; ++f)
      CHECK(std::abs(result.params.w_dec.col(f).norm() - 1.0) < 1e-6);

    const auto& total = result.metrics.total;
    const std::size_t decile = total.size() / 10;
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < decile; ++i) {
      first += total[i];
      last += total[total.size() - 1 - i];
    }
    CHECK(last < first);

    if (arch == SaeArchitecture::BatchTopK) {
      REQUIRE(result.params.inference_threshold.has_value());
      CHECK(*result.params.inference_threshold > 0.0);
    }
  }
}

TEST_CASE("train validates dataset width") {
  const ActivationDataset ds = dataset_from(seeded_batch(100, 5, 197));
  SaeConfig cfg;
  cfg.architecture = SaeArchitecture::ReLU;
  cfg.d = 8;
  cfg.dict_size = 16;
  cfg.seed = 1;
  CHECK_THROWS_AS(train(ds, cfg, desk_train(10, 8, 1)), ValidationError);
}
