#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/sae.hpp"
#include "steerkit/sae_checkpoint.hpp"

using namespace steerkit;

namespace {

SaeParams small_params(SaeArchitecture arch, int d = 4, int F = 6,
                       std::uint64_t seed = 1) {
  SaeConfig cfg;
  cfg.architecture = arch;
  cfg.d = d;
  cfg.dict_size = F;
  cfg.k = 2;
  cfg.lambda = 0.1;
  cfg.target_l0 = 2;
  cfg.seed = seed;
  return init_sae(cfg);
}

ActivationDataset random_dataset(int rows, int d, std::uint64_t seed) {
  ActivationDataset ds;
  ds.model_id = "t";
  ds.layer = 0;
  Rng rng(seed);
  ds.activations.resize(rows, d);
  for (int r = 0; r < rows; ++r) {
    ds.tokens.push_back(r % 11);
    ds.doc_ids.push_back(0);
    ds.special_mask.push_back(0);
    for (int c = 0; c < d; ++c) ds.activations(r, c) = rng.gaussian();
  }
  return ds;
}

}  // namespace

TEST_CASE("relu encode kills all-negative preactivations") {
  SaeParams p = small_params(SaeArchitecture::ReLU);
  p.b_enc = Eigen::VectorXd::Constant(6, -100.0);
  const LatentCode code = encode(p, Eigen::VectorXd::Zero(4));
  CHECK(code.active_count == 0);
  CHECK(code.values.lpNorm<1>() == 0.0);
}

TEST_CASE("topk keeps the k largest positive preactivations") {
  SaeParams p = small_params(SaeArchitecture::TopK, 4, 4);
  p.k = 2;
  // Force preactivations [1, 3, 2, 5] via zero weights and bias.
  p.w_enc = Eigen::MatrixXd::Zero(4, 4);
  p.b_enc = Eigen::VectorXd(4);
  p.b_enc << 1, 3, 2, 5;
  const LatentCode code = encode(p, Eigen::VectorXd::Zero(4));
  Eigen::VectorXd expected(4);
  expected << 0, 3, 0, 5;
  CHECK(code.values == expected);
  CHECK(code.active_count == 2);
}

TEST_CASE("topk tie at the k-th value resolves to the lower index") {
  SaeParams p = small_params(SaeArchitecture::TopK, 4, 4);
  p.k = 2;
  p.w_enc = Eigen::MatrixXd::Zero(4, 4);
  p.b_enc = Eigen::VectorXd(4);
  p.b_enc << 2, 5, 2, 1;  // tie between indices 0 and 2
  const LatentCode code = encode(p, Eigen::VectorXd::Zero(4));
  CHECK(code.values(0) == 2.0);
  CHECK(code.values(1) == 5.0);
  CHECK(code.values(2) == 0.0);
}

TEST_CASE("jumprelu gates strictly above per-feature thresholds") {
  SaeParams p = small_params(SaeArchitecture::JumpReLU, 2, 2);
  p.w_enc = Eigen::MatrixXd::Zero(2, 2);
  p.b_enc = Eigen::VectorXd(2);
  p.b_enc << 0.4, 0.6;
  p.threshold = Eigen::VectorXd::Constant(2, 0.5);
  const LatentCode code = encode(p, Eigen::VectorXd::Zero(2));
  CHECK(code.values(0) == 0.0);
  CHECK(code.values(1) == 0.6);

  // Boundary: value exactly at threshold stays off.
  p.b_enc(1) = 0.5;
  CHECK(encode(p, Eigen::VectorXd::Zero(2)).values(1) == 0.0);
}

TEST_CASE("gated encode follows the gate/magnitude split") {
  SaeParams p = small_params(SaeArchitecture::Gated, 2, 2);
  p.w_enc = Eigen::MatrixXd::Zero(2, 2);
  p.w_enc(0, 0) = 1.0;  // zw_0 = x_0
  p.w_enc(1, 1) = 1.0;  // zw_1 = x_1
  p.gate_bias << -0.5, -0.5;
  p.r_mag << std::log(2.0), 0.0;
  p.mag_bias << 0.25, -10.0;

  Eigen::VectorXd x(2);
  x << 1.0, 1.0;
  const LatentCode code = encode(p, x);
  // Feature 0: gate 1 + (-0.5) > 0 open; magnitude 2*1 + 0.25 = 2.25.
  CHECK(code.values(0) == doctest::Approx(2.25));
  // Feature 1: gate open but magnitude negative -> 0.
  CHECK(code.values(1) == 0.0);

  x(0) = 0.2;  // gate 0.2 - 0.5 < 0: closed regardless of magnitude
  CHECK(encode(p, x).values(0) == 0.0);
}

TEST_CASE("batchtopk single-row encode needs the tracked threshold") {
  SaeParams p = small_params(SaeArchitecture::BatchTopK, 4, 6);
  CHECK_THROWS_AS(encode(p, Eigen::VectorXd::Zero(4)), ValidationError);
  p.inference_threshold = 0.5;
  CHECK_NOTHROW(encode(p, Eigen::VectorXd::Zero(4)));
}

TEST_CASE("batchtopk training mode keeps the B*k largest positives") {
  SaeParams p = small_params(SaeArchitecture::BatchTopK, 2, 2);
  p.k = 1;
  p.w_enc = Eigen::MatrixXd::Identity(2, 2);
  p.b_enc = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd x(2, 2);
  x << 5, 1, 4, 3;  // preactivations [[5,1],[4,3]]
  const Eigen::MatrixXd codes = encode_batch(p, x);
  Eigen::MatrixXd expected(2, 2);
  expected << 5, 0, 4, 0;  // the 2 largest of {5,1,4,3} are 5 and 4
  CHECK(codes == expected);
}

TEST_CASE("batchtopk with a single row matches topk") {
  SaeParams btk = small_params(SaeArchitecture::BatchTopK, 4, 6, 3);
  SaeParams tk = btk;
  tk.architecture = SaeArchitecture::TopK;
  Rng rng(5);
  Eigen::MatrixXd x(1, 4);
  for (int c = 0; c < 4; ++c) x(0, c) = rng.gaussian();
  const Eigen::MatrixXd batch_codes = encode_batch(btk, x);
  const LatentCode row_code = encode(tk, x.row(0).transpose());
  CHECK(batch_codes.row(0).transpose() == row_code.values);
}

TEST_CASE("row-independent architectures encode batches row-wise") {
  for (auto arch : {SaeArchitecture::ReLU, SaeArchitecture::JumpReLU,
                    SaeArchitecture::Gated, SaeArchitecture::TopK}) {
    CAPTURE(to_string(arch));
    SaeParams p = small_params(arch, 4, 6, 7);
    Rng rng(11);
    Eigen::MatrixXd x(3, 4);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) x(r, c) = rng.gaussian();
    const Eigen::MatrixXd codes = encode_batch(p, x);
    for (int r = 0; r < 3; ++r)
      CHECK(codes.row(r).transpose() == encode(p, x.row(r).transpose()).values);
  }
}

TEST_CASE("decode is affine: zero code gives b_dec, basis gives a column") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 4, 6);
  p.b_dec = Eigen::VectorXd::LinSpaced(4, 0.0, 3.0);
  CHECK(decode(p, Eigen::VectorXd::Zero(6)) == p.b_dec);

  Eigen::VectorXd basis = Eigen::VectorXd::Zero(6);
  basis(2) = 1.0;
  CHECK(decode(p, basis) == Eigen::VectorXd(p.w_dec.col(2) + p.b_dec));
}

TEST_CASE("decode equals an explicit dense multiply") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 5, 8, 13);
  Rng rng(17);
  Eigen::VectorXd h(8);
  for (int i = 0; i < 8; ++i) h(i) = std::abs(rng.gaussian());
  Eigen::VectorXd expected = p.b_dec;
  for (int f = 0; f < 8; ++f) expected += h(f) * p.w_dec.col(f);
  CHECK((decode(p, h) - expected).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("loss matches the direct evaluation of the formula") {
  // x = 0, xhat = x + (1,0), h = (2,0), lambda_eff = 0.5
  SaeParams p = small_params(SaeArchitecture::ReLU, 2, 2);
  p.w_enc = Eigen::MatrixXd::Zero(2, 2);
  p.b_enc = Eigen::VectorXd(2);
  p.b_enc << 2.0, 0.0;
  p.w_dec = Eigen::MatrixXd::Zero(2, 2);
  p.w_dec(0, 0) = 0.5;
  p.b_dec = Eigen::VectorXd::Zero(2);

  const LossParts parts = loss(p, Eigen::VectorXd::Zero(2), 0.5);
  CHECK(parts.recon == doctest::Approx(1.0));
  CHECK(parts.sparsity == doctest::Approx(1.0));
  CHECK(parts.total == doctest::Approx(2.0));

  // lambda off: total reduces to recon.
  CHECK(loss(p, Eigen::VectorXd::Zero(2), 0.0).total ==
        doctest::Approx(parts.recon));
}

TEST_CASE("perfect reconstruction with empty code is a zero loss") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 3, 4);
  p.b_enc = Eigen::VectorXd::Constant(4, -1.0);  // code 0 at x = 0
  p.b_dec = Eigen::VectorXd::Zero(3);
  const LossParts parts = loss(p, Eigen::VectorXd::Zero(3), 0.7);
  CHECK(parts.total == 0.0);
}

TEST_CASE("loss recon equals the encode-decode reconstruction error") {
  Rng rng(23);
  for (auto arch : {SaeArchitecture::ReLU, SaeArchitecture::Gated,
                    SaeArchitecture::TopK, SaeArchitecture::JumpReLU}) {
    CAPTURE(to_string(arch));
    SaeParams p = small_params(arch, 4, 6, 29);
    Eigen::VectorXd x(4);
    for (int i = 0; i < 4; ++i) x(i) = rng.gaussian();
    const double recon = loss(p, x, 0.3).recon;
    const double direct = (x - decode(p, encode(p, x))).squaredNorm();
    CHECK(recon == doctest::Approx(direct).epsilon(1e-15));
  }
}

TEST_CASE("decoder normalization: 3-4-5 column, idempotence, zero column") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 4, 4);
  p.w_dec.setZero();
  p.w_dec(0, 0) = 3.0;
  p.w_dec(1, 0) = 4.0;
  p.w_dec(2, 1) = 1.0;
  p.w_dec(3, 2) = -2.0;
  p.w_dec(0, 3) = 1.0;
  SaeParams n = normalize_decoder_columns(p);
  CHECK(n.w_dec(0, 0) == doctest::Approx(0.6));
  CHECK(n.w_dec(1, 0) == doctest::Approx(0.8));

  SaeParams again = normalize_decoder_columns(n);
  CHECK((again.w_dec - n.w_dec).lpNorm<Eigen::Infinity>() < 1e-12);

  p.w_dec.col(3).setZero();
  CHECK_THROWS_AS(normalize_decoder_columns(p), ValidationError);
}

TEST_CASE("l0 averages strictly positive entries per row") {
  Eigen::MatrixXd codes(2, 2);
  codes << 1, 0, 1, 1;
  CHECK(l0(codes) == doctest::Approx(1.5));
  CHECK(l0(Eigen::MatrixXd::Zero(3, 4)) == 0.0);
  CHECK_THROWS_AS(l0(Eigen::MatrixXd(0, 2)), ValidationError);
}

TEST_CASE("feature_direction returns unit columns and checks bounds") {
  SaeParams p = normalize_decoder_columns(small_params(SaeArchitecture::ReLU, 6, 9));
  for (int f : {0, 4, 8})
    CHECK(feature_direction(p, f).norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(feature_direction(p, 9), ValidationError);
  CHECK_THROWS_AS(feature_direction(p, -1), ValidationError);
  // Basis identity: v_f = decode(e_f) - b_dec.
  Eigen::VectorXd e4 = Eigen::VectorXd::Zero(9);
  e4(4) = 1.0;
  CHECK(Eigen::VectorXd(decode(p, e4) - p.b_dec) == feature_direction(p, 4));
}

TEST_CASE("feature_max_activation matches a brute-force scan") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 4, 6, 31);
  const ActivationDataset ds = random_dataset(1000, 4, 37);
  const int f = 3;
  double expected = 0.0;
  for (int r = 0; r < 1000; ++r)
    expected = std::max(
        expected, encode(p, ds.activations.row(r).transpose()).values(f));
  CHECK(feature_max_activation(p, ds, f) == doctest::Approx(expected));

  // All-features pass agrees with the single-feature path.
  const Eigen::VectorXd all = feature_max_activations(p, ds);
  CHECK(all(f) == doctest::Approx(expected));
}

TEST_CASE("a never-active feature has zero max activation") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 4, 6);
  p.b_enc = Eigen::VectorXd::Constant(6, -1e6);
  const ActivationDataset ds = random_dataset(50, 4, 41);
  CHECK(feature_max_activation(p, ds, 2) == 0.0);
}

TEST_CASE("single-row dataset max equals that row's code entry") {
  SaeParams p = small_params(SaeArchitecture::ReLU, 4, 6, 43);
  const ActivationDataset ds = random_dataset(1, 4, 47);
  const LatentCode code = encode(p, ds.activations.row(0).transpose());
  CHECK(feature_max_activation(p, ds, 1) == code.values(1));
}

TEST_CASE("codes are non-negative for every architecture") {
  Rng rng(53);
  for (auto arch : {SaeArchitecture::ReLU, SaeArchitecture::Gated,
                    SaeArchitecture::TopK, SaeArchitecture::JumpReLU}) {
    SaeParams p = small_params(arch, 5, 8, 59);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::VectorXd x(5);
      for (int i = 0; i < 5; ++i) x(i) = 3.0 * rng.gaussian();
      const LatentCode code = encode(p, x);
      CHECK(code.values.minCoeff() >= 0.0);
      int positives = 0;
      for (int i = 0; i < code.values.size(); ++i)
        positives += (code.values(i) > 0.0);
      CHECK(code.active_count == positives);
    }
  }
}

TEST_CASE("width mismatches are rejected") {
  SaeParams p = small_params(SaeArchitecture::ReLU);
  CHECK_THROWS_AS(encode(p, Eigen::VectorXd::Zero(5)), ValidationError);
  CHECK_THROWS_AS(decode(p, Eigen::VectorXd::Zero(7)), ValidationError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_CASE("checkpoints use the per-architecture parameter names") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "steerkit-tests";
  fs::create_directories(dir);

  struct Expectation {
    SaeArchitecture arch;
    std::vector<std::string> names;
  };
  const std::vector<Expectation> table = {
      {SaeArchitecture::ReLU,
       {"encoder.weight", "encoder.bias", "decoder.weight", "bias"}},
      {SaeArchitecture::Gated,
       {"encoder.weight", "gate_bias", "decoder.weight", "decoder_bias",
        "r_mag", "mag_bias"}},
      {SaeArchitecture::TopK,
       {"encoder.weight", "encoder.bias", "decoder.weight", "b_dec", "k"}},
      {SaeArchitecture::BatchTopK,
       {"encoder.weight", "encoder.bias", "decoder.weight", "b_dec", "k"}},
      {SaeArchitecture::JumpReLU,
       {"W_enc", "b_enc", "W_dec", "b_dec", "threshold"}},
  };
  for (const auto& expected : table) {
    CAPTURE(to_string(expected.arch));
    SaeParams p = small_params(expected.arch, 4, 6, 61);
    if (expected.arch == SaeArchitecture::BatchTopK)
      p.inference_threshold = 0.25;
    const TensorContainer c = sae_to_container(p);
    for (const auto& name : expected.names) CHECK(c.has(name));

    const fs::path path = dir / ("ckpt_" + to_string(expected.arch) + ".stkt");
    save_sae(path, p);
    const SaeParams back = load_sae(path);
    CHECK(back.architecture == p.architecture);
    CHECK(back.w_enc == p.w_enc);
    CHECK(back.w_dec == p.w_dec);
    CHECK(back.b_dec == p.b_dec);
  }
}

TEST_CASE("jumprelu checkpoints store the transposed orientation") {
  SaeParams p = small_params(SaeArchitecture::JumpReLU, 4, 6, 67);
  const TensorContainer c = sae_to_container(p);
  const Tensor& w_enc = c.get("W_enc");
  CHECK(w_enc.shape == std::vector<std::size_t>{4, 6});  // (d, F) on disk
  const Tensor& w_dec = c.get("W_dec");
  CHECK(w_dec.shape == std::vector<std::size_t>{6, 4});  // (F, d) on disk
  const SaeParams back = sae_from_container(c);
  CHECK(back.w_enc == p.w_enc);
  CHECK(back.w_dec == p.w_dec);
  CHECK(back.threshold == p.threshold);
}
