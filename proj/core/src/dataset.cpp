#include "steerkit/dataset.hpp"

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/tensor_io.hpp"

namespace steerkit {

std::size_t ActivationDataset::unmasked_count() const {
  std::size_t n = 0;
  for (auto m : special_mask) n += (m == 0);
  return n;
}

void ActivationDataset::validate() const {
  const std::size_t n = tokens.size();
  if (doc_ids.size() != n || special_mask.size() != n ||
      static_cast<std::size_t>(activations.rows()) != n)
    throw ValidationError(
        "activation dataset: tokens, doc_ids, special_mask and activation "
        "rows must all have the same length");
}

namespace {

Eigen::VectorXd to_f64(const std::vector<std::int32_t>& v) {
  Eigen::VectorXd out(Eigen::Index(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out(Eigen::Index(i)) = double(v[i]);
  return out;
}

Eigen::VectorXd to_f64(const std::vector<std::uint8_t>& v) {
  Eigen::VectorXd out(Eigen::Index(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out(Eigen::Index(i)) = double(v[i]);
  return out;
}

Eigen::VectorXd text_to_f64(const std::string& s) {
  Eigen::VectorXd out(Eigen::Index(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i)
    out(Eigen::Index(i)) = double(std::uint8_t(s[i]));
  return out;
}

std::string f64_to_text(const Eigen::VectorXd& v) {
  std::string s;
  s.reserve(std::size_t(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    s.push_back(char(std::uint8_t(v(i))));
  return s;
}

}  // namespace

void save_dataset(const std::filesystem::path& path,
                  const ActivationDataset& ds) {
  ds.validate();
  TensorContainer c;
  c.add_vector("model_id", text_to_f64(ds.model_id));
  c.add_scalar("layer", double(ds.layer));
  c.add_vector("tokens", to_f64(ds.tokens));
  c.add_vector("doc_ids", to_f64(ds.doc_ids));
  c.add_vector("special_mask", to_f64(ds.special_mask));
  c.add_matrix("activations", ds.activations);
  write_container(path, c);
}

ActivationDataset load_dataset(const std::filesystem::path& path) {
  const TensorContainer c = read_container(path);
  ActivationDataset ds;
  ds.model_id = f64_to_text(c.get_vector("model_id"));
  ds.layer = int(c.get_scalar("layer"));
  const Eigen::VectorXd tokens = c.get_vector("tokens");
  const Eigen::VectorXd doc_ids = c.get_vector("doc_ids");
  const Eigen::VectorXd mask = c.get_vector("special_mask");
  ds.tokens.resize(std::size_t(tokens.size()));
  ds.doc_ids.resize(std::size_t(doc_ids.size()));
  ds.special_mask.resize(std::size_t(mask.size()));
  for (Eigen::Index i = 0; i < tokens.size(); ++i) {
    ds.tokens[std::size_t(i)] = std::int32_t(tokens(i));
    ds.doc_ids[std::size_t(i)] = std::int32_t(doc_ids(i));
    ds.special_mask[std::size_t(i)] = std::uint8_t(mask(i));
  }
  ds.activations = c.get_matrix("activations");
  ds.validate();
  return ds;
}

std::vector<std::size_t> shuffled_unmasked_rows(const ActivationDataset& ds,
                                                std::uint64_t seed) {
  std::vector<std::size_t> rows;
  rows.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.special_mask[i] == 0) rows.push_back(i);
  Rng rng(seed);
  rng.shuffle(rows);
  return rows;
}

BatchStream::BatchStream(const ActivationDataset& ds, std::size_t batch,
                         std::uint64_t seed)
    : ds_(ds), batch_(batch), seed_(seed) {
  const std::size_t n = ds.unmasked_count();
  if (n == 0) throw ValidationError("batch stream: dataset has no usable rows");
  if (batch == 0 || batch > n)
    throw ValidationError("batch stream: batch size must be in [1, " +
                          std::to_string(n) + "]");
  batches_per_epoch_ = (n + batch - 1) / batch;
  start_epoch();
}

void BatchStream::start_epoch() {
  order_ = shuffled_unmasked_rows(ds_, derive_seed(seed_, epoch_));
  cursor_ = 0;
}

Eigen::MatrixXd BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    start_epoch();
  }
  const std::size_t take = std::min(batch_, order_.size() - cursor_);
  Eigen::MatrixXd out(Eigen::Index(take), ds_.activations.cols());
  for (std::size_t i = 0; i < take; ++i)
    out.row(Eigen::Index(i)) = ds_.activations.row(Eigen::Index(order_[cursor_ + i]));
  cursor_ += take;
  return out;
}

}  // namespace steerkit
