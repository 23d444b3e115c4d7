#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "steerkit/dataset.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/result_store.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/tensor_io.hpp"

using namespace steerkit;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "steerkit-tests";
  fs::create_directories(dir);
  return dir / name;
}

// Independent byte-level checksum (FNV-1a over the raw f64 bytes).
std::uint64_t byte_checksum(const std::vector<double>& values) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

TEST_CASE("container round-trips zero vector exactly") {
  TensorContainer c;
  c.add("b", Tensor{{2}, {0.0, 0.0}});
  const fs::path path = temp_file("zero.stkt");
  write_container(path, c);
  const TensorContainer back = read_container(path);
  CHECK(back.get("b").values == std::vector<double>{0.0, 0.0});
  CHECK(back == c);
}

TEST_CASE("container round-trips a small matrix elementwise") {
  TensorContainer c;
  c.add("W", Tensor{{2, 3}, {1.5, -2.25, 3.0, 0.125, -0.5, 9.75}});
  const fs::path path = temp_file("small.stkt");
  write_container(path, c);
  CHECK(read_container(path) == c);
}

TEST_CASE("large seeded matrix round-trips bit-identically with checksum") {
  // Desk-scaled version of a full checkpoint tensor; values include
  // subnormals-free random doubles. Checksum computed by an independent
  // byte-level pass before the write.
  Rng rng(99);
  Tensor t;
  t.shape = {1024, 288};
  t.values.resize(1024 * 288);
  for (auto& v : t.values) v = rng.gaussian() * 1e3;
  const std::uint64_t checksum_before = byte_checksum(t.values);

  TensorContainer c;
  c.add("encoder.weight", std::move(t));
  const fs::path path = temp_file("big.stkt");
  write_container(path, c);
  const TensorContainer back = read_container(path);
  const auto& values = back.get("encoder.weight").values;
  CHECK(byte_checksum(values) == checksum_before);
  CHECK(back == c);
}

TEST_CASE("special float values survive the round trip bitwise") {
  TensorContainer c;
  c.add("specials",
        Tensor{{4},
               {-0.0, std::numeric_limits<double>::infinity(),
                std::numeric_limits<double>::denorm_min(), 1e-308}});
  const fs::path path = temp_file("specials.stkt");
  write_container(path, c);
  CHECK(read_container(path) == c);
}

TEST_CASE("duplicate tensor names are rejected") {
  TensorContainer c;
  c.add("a", Tensor{{1}, {1.0}});
  CHECK_THROWS_AS(c.add("a", Tensor{{1}, {2.0}}), ValidationError);
}

TEST_CASE("shape/value mismatch is rejected at insert") {
  TensorContainer c;
  CHECK_THROWS_AS(c.add("bad", Tensor{{2, 2}, {1.0}}), ValidationError);
}

TEST_CASE("truncated payload raises a format error") {
  TensorContainer c;
  c.add("W", Tensor{{8}, {1, 2, 3, 4, 5, 6, 7, 8}});
  const fs::path path = temp_file("trunc.stkt");
  write_container(path, c);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 16);
  CHECK_THROWS_AS(read_container(path), FormatError);
}

TEST_CASE("corrupt descriptor with overlapping offsets is rejected") {
  TensorContainer c;
  c.add("a", Tensor{{2}, {1, 2}});
  c.add("b", Tensor{{2}, {3, 4}});
  const fs::path path = temp_file("overlap.stkt");
  write_container(path, c);

  // The second entry's offset field lives right before the payload-size
  // field; rewrite it to overlap the first tensor's bytes.
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  // header: magic(8) + version(4) + count(4)
  // entry a: name_len(4)+1 + ndim(4) + dim(8) + offset(8)
  // entry b: name_len(4)+1 + ndim(4) + dim(8) + offset(8)
  const std::streamoff b_offset_pos = 8 + 4 + 4 + (4 + 1 + 4 + 8 + 8) +
                                      (4 + 1 + 4 + 8);
  f.seekp(b_offset_pos);
  const std::uint64_t overlapping = 8;  // inside tensor a's 16-byte span
  f.write(reinterpret_cast<const char*>(&overlapping), 8);
  f.close();
  CHECK_THROWS_AS(read_container(path), FormatError);
}

TEST_CASE("unknown version is rejected") {
  TensorContainer c;
  c.add("a", Tensor{{1}, {1.0}});
  const fs::path path = temp_file("version.stkt");
  write_container(path, c);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(8);
  const std::uint32_t bogus = 99;
  f.write(reinterpret_cast<const char*>(&bogus), 4);
  f.close();
  CHECK_THROWS_AS(read_container(path), FormatError);
}

// ---------------------------------------------------------------------------
// ActivationDataset + batching

namespace {

ActivationDataset tiny_dataset(int rows, int d, std::uint64_t seed) {
  ActivationDataset ds;
  ds.model_id = "test";
  ds.layer = 1;
  Rng rng(seed);
  ds.activations.resize(rows, d);
  for (int r = 0; r < rows; ++r) {
    ds.tokens.push_back(r % 17);
    ds.doc_ids.push_back(r / 8);
    ds.special_mask.push_back(0);
    for (int c = 0; c < d; ++c) ds.activations(r, c) = rng.gaussian();
  }
  return ds;
}

}  // namespace

TEST_CASE("dataset round-trips through the container format") {
  ActivationDataset ds = tiny_dataset(20, 4, 1);
  ds.special_mask[0] = 1;
  ds.model_id = "toy-v256";
  const fs::path path = temp_file("dataset.stkt");
  save_dataset(path, ds);
  const ActivationDataset back = load_dataset(path);
  CHECK(back.model_id == ds.model_id);
  CHECK(back.layer == ds.layer);
  CHECK(back.tokens == ds.tokens);
  CHECK(back.doc_ids == ds.doc_ids);
  CHECK(back.special_mask == ds.special_mask);
  CHECK(back.activations == ds.activations);
}

TEST_CASE("stream covers every unmasked row exactly once per epoch") {
  ActivationDataset ds = tiny_dataset(10, 3, 2);
  BatchStream stream(ds, 5, 7);
  const Eigen::MatrixXd b1 = stream.next();
  const Eigen::MatrixXd b2 = stream.next();
  CHECK(b1.rows() == 5);
  CHECK(b2.rows() == 5);

  // Multisets of rows must match the dataset.
  std::multiset<double> seen, expected;
  for (const auto& b : {b1, b2})
    for (Eigen::Index r = 0; r < b.rows(); ++r) seen.insert(b(r, 0));
  for (int r = 0; r < 10; ++r) expected.insert(ds.activations(r, 0));
  CHECK(seen == expected);
}

TEST_CASE("identical seeds give identical batch sequences") {
  ActivationDataset ds = tiny_dataset(32, 3, 3);
  BatchStream a(ds, 7, 42), b(ds, 7, 42);
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
}

TEST_CASE("final partial batch is emitted, not dropped") {
  ActivationDataset ds = tiny_dataset(10, 2, 4);
  BatchStream stream(ds, 3, 1);
  CHECK(stream.batches_per_epoch() == 4);
  CHECK(stream.next().rows() == 3);
  CHECK(stream.next().rows() == 3);
  CHECK(stream.next().rows() == 3);
  CHECK(stream.next().rows() == 1);  // enumeration of the 10 = 3+3+3+1 split
  CHECK(stream.epoch() == 0);
  stream.next();
  CHECK(stream.epoch() == 1);
}

TEST_CASE("masked rows never enter the stream") {
  ActivationDataset ds = tiny_dataset(12, 2, 5);
  ds.special_mask[3] = 1;
  ds.special_mask[9] = 1;
  BatchStream stream(ds, 5, 1);
  CHECK(stream.batches_per_epoch() == 2);
  std::multiset<double> seen;
  for (int i = 0; i < 2; ++i) {
    const Eigen::MatrixXd b = stream.next();
    for (Eigen::Index r = 0; r < b.rows(); ++r) seen.insert(b(r, 0));
  }
  CHECK(seen.size() == 10);
  CHECK(seen.count(ds.activations(3, 0)) == 0);
  CHECK(seen.count(ds.activations(9, 0)) == 0);
}

TEST_CASE("empty dataset and oversized batch are rejected") {
  ActivationDataset empty;
  empty.activations.resize(0, 2);
  CHECK_THROWS_AS(BatchStream(empty, 1, 0), ValidationError);
  ActivationDataset ds = tiny_dataset(4, 2, 6);
  CHECK_THROWS_AS(BatchStream(ds, 5, 0), ValidationError);
}

// ---------------------------------------------------------------------------
// ResultStore

TEST_CASE("result store appends, reloads, and enforces uniqueness") {
  const fs::path path = temp_file("store.jsonl");
  fs::remove(path);
  {
    ResultStore store(path);
    store.append("run1", "metrics", {{"loss", 0.5}});
    store.append("run1", "concept", {{"x", 1}}, "c1");
    store.append("run1", "concept", {{"x", 2}}, "c2");
    CHECK_THROWS_AS(store.append("run1", "metrics", {{"loss", 0.7}}),
                    ValidationError);
  }
  ResultStore reloaded(path);
  CHECK(reloaded.records().size() == 3);
  CHECK(reloaded.get("run1", "metrics").at("loss") == 0.5);
  CHECK(reloaded.find("run1", "concept").size() == 2);
  CHECK_THROWS_AS(reloaded.append("run1", "concept", {{"x", 3}}, "c1"),
                  ValidationError);
}

TEST_CASE("result store compaction keeps only selected records") {
  const fs::path path = temp_file("store2.jsonl");
  fs::remove(path);
  {
    ResultStore store(path);
    store.append("a", "k1", {});
    store.append("b", "k1", {});
    store.append("a", "k2", {});
  }
  ResultStore::compact(path, [](const nlohmann::json& rec) {
    return rec.at("run_id") != "a";
  });
  ResultStore reloaded(path);
  CHECK(reloaded.records().size() == 1);
  CHECK(reloaded.has("b", "k1"));
}
