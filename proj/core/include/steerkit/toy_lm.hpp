#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerkit/dataset.hpp"
#include "steerkit/distribution.hpp"
#include "steerkit/tensor_io.hpp"

namespace steerkit {

struct ToyLmConfig {
  int vocab_size = 256;  // byte-level tokens
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context = 128;
  std::uint64_t seed = 0;

  void validate() const;
  std::string model_id() const;
};

/// A pure transform applied to the residual stream after one block.
/// `transform` maps a residual row to a residual row of the same width.
struct HookPoint {
  int layer = 0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> transform;
};

/// Small deterministic decoder-only transformer (pre-norm residual blocks).
///
/// Construction seeds random weights and then runs a short, fully
/// deterministic pretraining pass on the seeded synthetic corpus, so the
/// weights are a pure function of the config. Trained weights are cached on
/// disk (keyed by a config hash; directory overridable via the
/// STEERKIT_LM_CACHE_DIR environment variable) because several experiment
/// stages and test suites instantiate the same model.
class ToyLm {
 public:
  static constexpr int kDocSep = 0;  // BOS / EOS / document separator

  explicit ToyLm(const ToyLmConfig& config);

  const ToyLmConfig& config() const { return config_; }
  int default_hook_layer() const { return config_.n_layers / 2; }

  struct ForwardResult {
    Eigen::VectorXd logits;             // final position, length V
    Eigen::MatrixXd residual_at_layer;  // pre-hook capture, positions x d
  };

  /// Runs the model over `tokens` (length <= context). The residual after
  /// block hook.layer is captured before the hook transform is applied.
  ForwardResult forward_with_hook(std::span<const int> tokens,
                                  const std::optional<HookPoint>& hook) const;

  TokenDistribution next_token_distribution(
      std::span<const int> prefix, const std::optional<HookPoint>& hook) const;

  /// Greedy by default; sampled decoding draws from the distribution with a
  /// stream seeded by decode_seed. Stops after max_tokens or at kDocSep.
  /// Prefixes longer than the context are handled with a sliding window.
  std::vector<int> generate(const std::vector<int>& prefix, int max_tokens,
                            const std::optional<HookPoint>& hook,
                            std::uint64_t decode_seed,
                            bool greedy = true) const;

  /// Residual activations at `layer` (default mid-layer) for each position
  /// of a synthetic templated corpus. Documents are separated by kDocSep and
  /// processed in non-overlapping context-sized chunks.
  ActivationDataset build_corpus(int n_tokens, std::uint64_t seed,
                                 int layer = -1) const;

  const Eigen::MatrixXd& embedding() const { return embed_; }
  const Eigen::MatrixXd& unembedding() const { return unembed_; }

  TensorContainer weights_container() const;

 private:
  struct TrainTrace;

  Eigen::MatrixXd block_forward(int block, const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward_trace(std::span<const int> tokens,
                                TrainTrace* trace) const;
  void init_random_weights();
  void pretrain();
  void load_weights(const TensorContainer& c);

  struct Block {
    Eigen::MatrixXd wq, wk, wv, wo;  // d x d
    Eigen::VectorXd ln1_g, ln1_b, ln2_g, ln2_b;
    Eigen::MatrixXd w1, w2;  // 4d x d, d x 4d
    Eigen::VectorXd b1, b2;
  };

  ToyLmConfig config_;
  Eigen::MatrixXd embed_;    // V x d
  Eigen::MatrixXd pos_;      // context x d
  std::vector<Block> blocks_;
  Eigen::MatrixXd unembed_;  // V x d
};

/// Convenience wrapper: init a model from `config` and dump its corpus.
ActivationDataset build_corpus(const ToyLmConfig& config, int n_tokens,
                               std::uint64_t seed);

/// Concept vocabulary planted in the synthetic corpus (word families the
/// templated documents revolve around).
const std::vector<std::string>& corpus_concept_words();

std::vector<int> text_to_tokens(const std::string& text);
std::string tokens_to_text(std::span<const int> tokens);

}  // namespace steerkit
