#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace steerkit {

/// Token ids plus residual-stream vectors captured at one layer.
/// Document boundaries are explicit (doc_ids) so downstream window sampling
/// never crosses documents. Special positions (BOS/EOS/PAD) are flagged,
/// never deleted.
struct ActivationDataset {
  std::string model_id;
  int layer = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> doc_ids;
  std::vector<std::uint8_t> special_mask;
  Eigen::MatrixXd activations;  // positions x d

  std::size_t size() const { return tokens.size(); }
  Eigen::Index width() const { return activations.cols(); }

  std::size_t unmasked_count() const;
  void validate() const;
};

void save_dataset(const std::filesystem::path& path,
                  const ActivationDataset& ds);
ActivationDataset load_dataset(const std::filesystem::path& path);

/// Deterministic shuffled order of unmasked row indices for one epoch.
std::vector<std::size_t> shuffled_unmasked_rows(const ActivationDataset& ds,
                                                std::uint64_t seed);

/// Streams shuffled activation batches. Within one epoch every unmasked row
/// appears exactly once; the final partial batch is emitted, not dropped.
/// Each epoch reshuffles with a seed derived from (seed, epoch index).
class BatchStream {
 public:
  BatchStream(const ActivationDataset& ds, std::size_t batch,
              std::uint64_t seed);

  Eigen::MatrixXd next();

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t epoch() const { return epoch_; }

 private:
  void start_epoch();

  const ActivationDataset& ds_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batches_per_epoch_ = 0;
};

}  // namespace steerkit
