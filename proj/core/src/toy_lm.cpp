#include "steerkit/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

constexpr double kLnEps = 1e-5;

// Bumped whenever the init/pretraining procedure changes, so stale cached
// weights are never reused.
constexpr int kWeightsVersion = 3;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) +
         x * std::exp(-0.5 * x * x) * 0.3989422804014326779;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - m).exp();
  return e / e.sum();
}

Eigen::MatrixXd gaussian_matrix(Rng& rng, int rows, int cols, double scale) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  return m;
}

// Row-wise layer norm; optionally captures per-row (mean, inv_std).
Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                           const Eigen::VectorXd& b,
                           Eigen::MatrixXd* stats = nullptr) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  if (stats) stats->resize(x.rows(), 2);
  const double n = double(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      out(r, c) = (x(r, c) - mean) * inv * g(c) + b(c);
    if (stats) {
      (*stats)(r, 0) = mean;
      (*stats)(r, 1) = inv;
    }
  }
  return out;
}

// dL/dx for y = LN(x) * g + b, given the cached stats.
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& x,
                                    const Eigen::MatrixXd& dy,
                                    const Eigen::VectorXd& g,
                                    const Eigen::MatrixXd& stats,
                                    Eigen::VectorXd& dg, Eigen::VectorXd& db) {
  Eigen::MatrixXd dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = stats(r, 0);
    const double inv = stats(r, 1);
    const Eigen::ArrayXd xhat = (x.row(r).transpose().array() - mean) * inv;
    const Eigen::ArrayXd dyg = dy.row(r).transpose().array() * g.array();
    dg += (dy.row(r).transpose().array() * xhat).matrix();
    db += dy.row(r).transpose();
    const double m1 = dyg.mean();
    const double m2 = (dyg * xhat).mean();
    dx.row(r) = (inv * (dyg - m1 - xhat * m2)).matrix().transpose();
  }
  return dx;
}

}  // namespace

void ToyLmConfig::validate() const {
  if (vocab_size < 2) throw ValidationError("toy lm: vocab_size must be >= 2");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context < 2)
    throw ValidationError("toy lm: dimensions must be positive, context >= 2");
  if (d_model % n_heads != 0)
    throw ValidationError("toy lm: d_model must be divisible by n_heads");
}

std::string ToyLmConfig::model_id() const {
  return "toy-v" + std::to_string(vocab_size) + "-d" + std::to_string(d_model) +
         "-l" + std::to_string(n_layers) + "-s" + std::to_string(seed);
}

// ---------------------------------------------------------------------------
// Synthetic corpus text

namespace {

const std::vector<std::string> kConcepts = {"cake",   "river",  "music",
                                            "dragon", "engine", "winter",
                                            "garden", "pirate"};
const std::vector<std::string> kDets = {"the", "a", "my", "our", "that"};
const std::vector<std::string> kAdjs = {"old",    "small", "bright", "quiet",
                                        "warm",   "green", "fresh",  "heavy",
                                        "strange", "gentle"};
const std::vector<std::string> kVerbs = {"holds", "keeps",  "makes", "finds",
                                         "takes", "shows",  "gives", "leaves",
                                         "meets", "turns"};
const std::vector<std::string> kObjects = {"light", "stone", "path",  "door",
                                           "song",  "fire",  "cloud", "field",
                                           "night", "corner"};

std::string pick(Rng& rng, const std::vector<std::string>& words) {
  return words[rng.index(words.size())];
}

std::string make_sentence(Rng& rng, const std::string& concept_word) {
  switch (rng.index(4)) {
    case 0:
      return pick(rng, kDets) + " " + pick(rng, kAdjs) + " " + concept_word +
             " " + pick(rng, kVerbs) + " " + pick(rng, kDets) + " " +
             pick(rng, kObjects) + ".";
    case 1:
      return pick(rng, kDets) + " " + concept_word + " " + pick(rng, kVerbs) +
             " " + pick(rng, kAdjs) + " " + pick(rng, kObjects) + " and " +
             pick(rng, kDets) + " " + concept_word + " stays " +
             pick(rng, kAdjs) + ".";
    case 2:
      return "near " + pick(rng, kDets) + " " + pick(rng, kObjects) + " " +
             pick(rng, kDets) + " " + concept_word + " " + pick(rng, kVerbs) +
             " " + pick(rng, kDets) + " " + pick(rng, kAdjs) + " " +
             pick(rng, kObjects) + ".";
    default:
      return pick(rng, kDets) + " " + concept_word + " is " +
             pick(rng, kAdjs) + " but " + pick(rng, kDets) + " " +
             concept_word + " feels " + pick(rng, kAdjs) + ".";
  }
}

// Token stream of templated documents separated by kDocSep.
std::vector<int> corpus_tokens(int n_tokens, std::uint64_t seed,
                               std::vector<std::int32_t>* doc_ids = nullptr) {
  Rng rng(seed);
  std::vector<int> tokens;
  tokens.reserve(std::size_t(n_tokens) + 256);
  std::int32_t doc = -1;
  while (int(tokens.size()) < n_tokens) {
    ++doc;
    tokens.push_back(ToyLm::kDocSep);
    if (doc_ids) doc_ids->push_back(doc);
    const std::string& concept_word = kConcepts[rng.index(kConcepts.size())];
    const std::size_t n_sentences = 1 + rng.index(3);
    std::string text;
    for (std::size_t s = 0; s < n_sentences; ++s) {
      if (s > 0) text += " ";
      text += make_sentence(rng, concept_word);
    }
    for (char ch : text) {
      tokens.push_back(int(std::uint8_t(ch)));
      if (doc_ids) doc_ids->push_back(doc);
    }
  }
  tokens.resize(std::size_t(n_tokens));
  if (doc_ids) doc_ids->resize(std::size_t(n_tokens));
  return tokens;
}

}  // namespace

const std::vector<std::string>& corpus_concept_words() { return kConcepts; }

std::vector<int> text_to_tokens(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(int(std::uint8_t(c)));
  return out;
}

std::string tokens_to_text(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens)
    if (t != ToyLm::kDocSep) out.push_back(char(std::uint8_t(t)));
  return out;
}

// ---------------------------------------------------------------------------
// Construction: random init, then a short deterministic pretraining run on
// the seeded synthetic corpus. Weights are a pure function of the config and
// are cached on disk keyed by a config hash.

namespace {

std::uint64_t config_key(const ToyLmConfig& c) {
  std::uint64_t h = mix64(std::uint64_t(kWeightsVersion));
  h = derive_seed(h, std::uint64_t(c.vocab_size));
  h = derive_seed(h, std::uint64_t(c.d_model));
  h = derive_seed(h, std::uint64_t(c.n_layers));
  h = derive_seed(h, std::uint64_t(c.n_heads));
  h = derive_seed(h, std::uint64_t(c.context));
  h = derive_seed(h, c.seed);
  return h;
}

std::filesystem::path lm_cache_path(const ToyLmConfig& c) {
  namespace fs = std::filesystem;
  fs::path dir;
  if (const char* env = std::getenv("STEERKIT_LM_CACHE_DIR"))
    dir = env;
  else
    dir = fs::temp_directory_path() / "steerkit-lm-cache";
  char name[40];
  std::snprintf(name, sizeof(name), "lm-%016llx.stkt",
                static_cast<unsigned long long>(config_key(c)));
  return dir / name;
}

// Adam buffers for one tensor.
struct AdamBuf {
  Eigen::MatrixXd m, v;
  void init(Eigen::Index rows, Eigen::Index cols) {
    m = Eigen::MatrixXd::Zero(rows, cols);
    v = Eigen::MatrixXd::Zero(rows, cols);
  }
  void step(Eigen::MatrixXd& p, const Eigen::MatrixXd& g, double lr,
            double bc1, double bc2) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.array().square().matrix();
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + 1e-8);
  }
  void step(Eigen::VectorXd& p, const Eigen::VectorXd& g, double lr,
            double bc1, double bc2) {
    Eigen::MatrixXd pm = p, gm = g;
    step(pm, gm, lr, bc1, bc2);
    p = pm.col(0);
  }
};

}  // namespace

ToyLm::ToyLm(const ToyLmConfig& config) : config_(config) {
  config.validate();
  const std::filesystem::path cached = lm_cache_path(config);
  if (std::filesystem::exists(cached)) {
    try {
      load_weights(read_container(cached));
      return;
    } catch (const Error&) {
      // stale or corrupt cache entry: retrain below
    }
  }

  init_random_weights();
  pretrain();

  try {
    std::filesystem::create_directories(cached.parent_path());
    const std::filesystem::path tmp =
        cached.string() + "." + std::to_string(mix64(config.seed) % 100000) +
        ".tmp";
    write_container(tmp, weights_container());
    std::filesystem::rename(tmp, cached);
  } catch (const std::exception&) {
    // the cache is an optimization only
  }
}

void ToyLm::init_random_weights() {
  const int d = config_.d_model;
  Rng rng(derive_seed(config_.seed, 0x70791a));
  const double ws = 0.08;

  embed_ = gaussian_matrix(rng, config_.vocab_size, d, ws);
  pos_ = gaussian_matrix(rng, config_.context, d, ws);
  unembed_ = gaussian_matrix(rng, config_.vocab_size, d, ws);

  blocks_.assign(std::size_t(config_.n_layers), Block{});
  for (auto& blk : blocks_) {
    blk.wq = gaussian_matrix(rng, d, d, ws);
    blk.wk = gaussian_matrix(rng, d, d, ws);
    blk.wv = gaussian_matrix(rng, d, d, ws);
    blk.wo = gaussian_matrix(rng, d, d, ws);
    blk.ln1_g = Eigen::VectorXd::Ones(d);
    blk.ln1_b = Eigen::VectorXd::Zero(d);
    blk.ln2_g = Eigen::VectorXd::Ones(d);
    blk.ln2_b = Eigen::VectorXd::Zero(d);
    blk.w1 = gaussian_matrix(rng, 4 * d, d, ws);
    blk.w2 = gaussian_matrix(rng, d, 4 * d, ws);
    blk.b1 = Eigen::VectorXd::Zero(4 * d);
    blk.b2 = Eigen::VectorXd::Zero(d);
  }
}

// Everything the backward pass needs from one forward evaluation.
struct ToyLm::TrainTrace {
  struct BlockTrace {
    Eigen::MatrixXd input;  // residual entering the block
    Eigen::MatrixXd a;      // LN1 output
    Eigen::MatrixXd ln1_stats;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per head, row-softmax weights
    Eigen::MatrixXd concat;
    Eigen::MatrixXd mid;  // residual after attention
    Eigen::MatrixXd m;    // LN2 output
    Eigen::MatrixXd ln2_stats;
    Eigen::MatrixXd pre;     // MLP preactivation
    Eigen::MatrixXd hidden;  // gelu(pre)
  };
  std::vector<BlockTrace> blocks;
};

Eigen::MatrixXd ToyLm::forward_trace(std::span<const int> tokens,
                                     TrainTrace* trace) const {
  const Eigen::Index n = Eigen::Index(tokens.size());
  const int d = config_.d_model;
  const int heads = config_.n_heads;
  const int hd = d / heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    x.row(i) = embed_.row(tokens[std::size_t(i)]) + pos_.row(i);
  if (trace) trace->blocks.resize(blocks_.size());

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    TrainTrace::BlockTrace* bt = trace ? &trace->blocks[l] : nullptr;
    if (bt) bt->input = x;

    Eigen::MatrixXd ln1_stats;
    const Eigen::MatrixXd a =
        layer_norm(x, blk.ln1_g, blk.ln1_b, bt ? &ln1_stats : nullptr);
    const Eigen::MatrixXd q = a * blk.wq.transpose();
    const Eigen::MatrixXd k = a * blk.wk.transpose();
    const Eigen::MatrixXd v = a * blk.wv.transpose();

    Eigen::MatrixXd concat(n, d);
    if (bt) bt->attn.assign(std::size_t(heads), Eigen::MatrixXd());
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.middleCols(h * hd, hd);
      const auto kh = k.middleCols(h * hd, hd);
      const auto vh = v.middleCols(h * hd, hd);
      Eigen::MatrixXd attn;
      if (bt) attn = Eigen::MatrixXd::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd scores(i + 1);
        for (Eigen::Index j = 0; j <= i; ++j)
          scores(j) = qh.row(i).dot(kh.row(j)) * inv_sqrt_hd;
        const Eigen::VectorXd w = softmax(scores);
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(hd);
        for (Eigen::Index j = 0; j <= i; ++j) {
          acc += w(j) * vh.row(j);
          if (bt) attn(i, j) = w(j);
        }
        concat.block(i, h * hd, 1, hd) = acc;
      }
      if (bt) bt->attn[std::size_t(h)] = std::move(attn);
    }
    x += concat * blk.wo.transpose();
    if (bt) {
      bt->a = a;
      bt->ln1_stats = ln1_stats;
      bt->q = q;
      bt->k = k;
      bt->v = v;
      bt->concat = concat;
      bt->mid = x;
    }

    Eigen::MatrixXd ln2_stats;
    const Eigen::MatrixXd m =
        layer_norm(x, blk.ln2_g, blk.ln2_b, bt ? &ln2_stats : nullptr);
    Eigen::MatrixXd pre = m * blk.w1.transpose();
    pre.rowwise() += blk.b1.transpose();
    Eigen::MatrixXd hidden(pre.rows(), pre.cols());
    for (Eigen::Index r = 0; r < pre.rows(); ++r)
      for (Eigen::Index c = 0; c < pre.cols(); ++c)
        hidden(r, c) = gelu(pre(r, c));
    x += hidden * blk.w2.transpose();
    x.rowwise() += blk.b2.transpose();
    if (bt) {
      bt->m = m;
      bt->ln2_stats = ln2_stats;
      bt->pre = pre;
      bt->hidden = hidden;
    }
  }
  return x;
}

void ToyLm::pretrain() {
  const int steps = 900;
  const int batch = 8;
  const int window = std::min(64, config_.context);
  const double base_lr = 3e-3;
  const int warmup = 50;

  const std::vector<int> stream =
      corpus_tokens(60000, derive_seed(config_.seed, 0x9e7a11));
  Rng sampler(derive_seed(config_.seed, 0x5a371e));

  const int d = config_.d_model;
  const int heads = config_.n_heads;
  const int hd = d / heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

  AdamBuf a_embed, a_pos, a_unembed;
  a_embed.init(embed_.rows(), embed_.cols());
  a_pos.init(pos_.rows(), pos_.cols());
  a_unembed.init(unembed_.rows(), unembed_.cols());
  struct BlockAdam {
    AdamBuf wq, wk, wv, wo, ln1_g, ln1_b, ln2_g, ln2_b, w1, w2, b1, b2;
  };
  std::vector<BlockAdam> a_blocks(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    BlockAdam& ab = a_blocks[l];
    ab.wq.init(d, d);
    ab.wk.init(d, d);
    ab.wv.init(d, d);
    ab.wo.init(d, d);
    ab.ln1_g.init(d, 1);
    ab.ln1_b.init(d, 1);
    ab.ln2_g.init(d, 1);
    ab.ln2_b.init(d, 1);
    ab.w1.init(b.w1.rows(), b.w1.cols());
    ab.w2.init(b.w2.rows(), b.w2.cols());
    ab.b1.init(b.b1.size(), 1);
    ab.b2.init(b.b2.size(), 1);
  }

  struct BlockGrad {
    Eigen::MatrixXd wq, wk, wv, wo, w1, w2;
    Eigen::VectorXd ln1_g, ln1_b, ln2_g, ln2_b, b1, b2;
  };

  for (int step = 0; step < steps; ++step) {
    Eigen::MatrixXd g_embed = Eigen::MatrixXd::Zero(embed_.rows(), d);
    Eigen::MatrixXd g_pos = Eigen::MatrixXd::Zero(pos_.rows(), d);
    Eigen::MatrixXd g_unembed = Eigen::MatrixXd::Zero(unembed_.rows(), d);
    std::vector<BlockGrad> g_blocks(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      BlockGrad& gb = g_blocks[l];
      gb.wq = Eigen::MatrixXd::Zero(d, d);
      gb.wk = Eigen::MatrixXd::Zero(d, d);
      gb.wv = Eigen::MatrixXd::Zero(d, d);
      gb.wo = Eigen::MatrixXd::Zero(d, d);
      gb.w1 = Eigen::MatrixXd::Zero(blocks_[l].w1.rows(), d);
      gb.w2 = Eigen::MatrixXd::Zero(d, blocks_[l].w2.cols());
      gb.ln1_g = Eigen::VectorXd::Zero(d);
      gb.ln1_b = Eigen::VectorXd::Zero(d);
      gb.ln2_g = Eigen::VectorXd::Zero(d);
      gb.ln2_b = Eigen::VectorXd::Zero(d);
      gb.b1 = Eigen::VectorXd::Zero(blocks_[l].b1.size());
      gb.b2 = Eigen::VectorXd::Zero(d);
    }

    const double scale = 1.0 / double(batch * window);
    for (int b = 0; b < batch; ++b) {
      const std::size_t start =
          sampler.index(stream.size() - std::size_t(window) - 1);
      std::span<const int> inputs(stream.data() + start, std::size_t(window));
      std::span<const int> targets(stream.data() + start + 1,
                                   std::size_t(window));

      TrainTrace trace;
      const Eigen::MatrixXd final_x = forward_trace(inputs, &trace);

      // Cross-entropy at every position.
      Eigen::MatrixXd dx(window, d);
      for (int i = 0; i < window; ++i) {
        const Eigen::VectorXd logits = unembed_ * final_x.row(i).transpose();
        Eigen::VectorXd p = softmax(logits);
        p(targets[std::size_t(i)]) -= 1.0;
        p *= scale;
        g_unembed += p * final_x.row(i);
        dx.row(i) = (unembed_.transpose() * p).transpose();
      }

      for (int l = int(blocks_.size()) - 1; l >= 0; --l) {
        const Block& blk = blocks_[std::size_t(l)];
        BlockGrad& gb = g_blocks[std::size_t(l)];
        const TrainTrace::BlockTrace& bt = trace.blocks[std::size_t(l)];

        // MLP backward.
        Eigen::MatrixXd d_hidden = dx * blk.w2;
        gb.w2 += dx.transpose() * bt.hidden;
        gb.b2 += dx.colwise().sum().transpose();
        Eigen::MatrixXd d_pre(d_hidden.rows(), d_hidden.cols());
        for (Eigen::Index r = 0; r < d_pre.rows(); ++r)
          for (Eigen::Index c = 0; c < d_pre.cols(); ++c)
            d_pre(r, c) = d_hidden(r, c) * gelu_grad(bt.pre(r, c));
        gb.w1 += d_pre.transpose() * bt.m;
        gb.b1 += d_pre.colwise().sum().transpose();
        const Eigen::MatrixXd d_m = d_pre * blk.w1;
        Eigen::MatrixXd d_mid = layer_norm_backward(
            bt.mid, d_m, blk.ln2_g, bt.ln2_stats, gb.ln2_g, gb.ln2_b);
        d_mid += dx;  // residual connection

        // Attention backward.
        const Eigen::MatrixXd d_concat = d_mid * blk.wo;
        gb.wo += d_mid.transpose() * bt.concat;
        Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(window, d);
        Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(window, d);
        Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(window, d);
        for (int h = 0; h < heads; ++h) {
          const Eigen::MatrixXd& attn = bt.attn[std::size_t(h)];
          const auto vh = bt.v.middleCols(h * hd, hd);
          const auto qh = bt.q.middleCols(h * hd, hd);
          const auto kh = bt.k.middleCols(h * hd, hd);
          const auto d_oh = d_concat.middleCols(h * hd, hd);
          for (int i = 0; i < window; ++i) {
            double dot = 0.0;
            Eigen::VectorXd da(i + 1);
            for (int j = 0; j <= i; ++j) {
              da(j) = d_oh.row(i).dot(vh.row(j));
              dot += da(j) * attn(i, j);
            }
            for (int j = 0; j <= i; ++j) {
              const double ds = attn(i, j) * (da(j) - dot) * inv_sqrt_hd;
              d_q.row(i).segment(h * hd, hd) += ds * kh.row(j);
              d_k.row(j).segment(h * hd, hd) += ds * qh.row(i);
              d_v.row(j).segment(h * hd, hd) += attn(i, j) * d_oh.row(i);
            }
          }
        }
        gb.wq += d_q.transpose() * bt.a;
        gb.wk += d_k.transpose() * bt.a;
        gb.wv += d_v.transpose() * bt.a;
        const Eigen::MatrixXd d_a =
            d_q * blk.wq + d_k * blk.wk + d_v * blk.wv;
        Eigen::MatrixXd d_input = layer_norm_backward(
            bt.input, d_a, blk.ln1_g, bt.ln1_stats, gb.ln1_g, gb.ln1_b);
        d_input += d_mid;  // residual connection
        dx = std::move(d_input);
      }

      for (int i = 0; i < window; ++i) {
        g_embed.row(inputs[std::size_t(i)]) += dx.row(i);
        g_pos.row(i) += dx.row(i);
      }
    }

    double lr = base_lr;
    if (step < warmup) lr *= double(step + 1) / double(warmup);
    if (step > steps * 4 / 5)
      lr *= std::max(0.2, double(steps - step) / double(steps / 5));
    const double bc1 = 1.0 - std::pow(0.9, double(step + 1));
    const double bc2 = 1.0 - std::pow(0.999, double(step + 1));

    a_embed.step(embed_, g_embed, lr, bc1, bc2);
    a_pos.step(pos_, g_pos, lr, bc1, bc2);
    a_unembed.step(unembed_, g_unembed, lr, bc1, bc2);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      Block& blk = blocks_[l];
      BlockAdam& ab = a_blocks[l];
      BlockGrad& gb = g_blocks[l];
      ab.wq.step(blk.wq, gb.wq, lr, bc1, bc2);
      ab.wk.step(blk.wk, gb.wk, lr, bc1, bc2);
      ab.wv.step(blk.wv, gb.wv, lr, bc1, bc2);
      ab.wo.step(blk.wo, gb.wo, lr, bc1, bc2);
      ab.w1.step(blk.w1, gb.w1, lr, bc1, bc2);
      ab.w2.step(blk.w2, gb.w2, lr, bc1, bc2);
      ab.ln1_g.step(blk.ln1_g, gb.ln1_g, lr, bc1, bc2);
      ab.ln1_b.step(blk.ln1_b, gb.ln1_b, lr, bc1, bc2);
      ab.ln2_g.step(blk.ln2_g, gb.ln2_g, lr, bc1, bc2);
      ab.ln2_b.step(blk.ln2_b, gb.ln2_b, lr, bc1, bc2);
      ab.b1.step(blk.b1, gb.b1, lr, bc1, bc2);
      ab.b2.step(blk.b2, gb.b2, lr, bc1, bc2);
    }
  }
}

// ---------------------------------------------------------------------------
// Inference

Eigen::MatrixXd ToyLm::block_forward(int block, const Eigen::MatrixXd& x) const {
  const Block& blk = blocks_[std::size_t(block)];
  const int d = config_.d_model;
  const int heads = config_.n_heads;
  const int hd = d / heads;
  const Eigen::Index n = x.rows();
  const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

  Eigen::MatrixXd out = x;
  const Eigen::MatrixXd a = layer_norm(x, blk.ln1_g, blk.ln1_b);
  const Eigen::MatrixXd q = a * blk.wq.transpose();
  const Eigen::MatrixXd k = a * blk.wk.transpose();
  const Eigen::MatrixXd v = a * blk.wv.transpose();

  Eigen::MatrixXd concat(n, d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * hd, hd);
    const auto kh = k.middleCols(h * hd, hd);
    const auto vh = v.middleCols(h * hd, hd);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd scores(i + 1);
      for (Eigen::Index j = 0; j <= i; ++j)
        scores(j) = qh.row(i).dot(kh.row(j)) * inv_sqrt_hd;
      const Eigen::VectorXd w = softmax(scores);
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(hd);
      for (Eigen::Index j = 0; j <= i; ++j) acc += w(j) * vh.row(j);
      concat.block(i, h * hd, 1, hd) = acc;
    }
  }
  out += concat * blk.wo.transpose();

  const Eigen::MatrixXd m = layer_norm(out, blk.ln2_g, blk.ln2_b);
  Eigen::MatrixXd hidden = m * blk.w1.transpose();
  hidden.rowwise() += blk.b1.transpose();
  for (Eigen::Index r = 0; r < hidden.rows(); ++r)
    for (Eigen::Index c = 0; c < hidden.cols(); ++c)
      hidden(r, c) = gelu(hidden(r, c));
  out += hidden * blk.w2.transpose();
  out.rowwise() += blk.b2.transpose();
  return out;
}

ToyLm::ForwardResult ToyLm::forward_with_hook(
    std::span<const int> tokens, const std::optional<HookPoint>& hook) const {
  if (tokens.empty()) throw ValidationError("toy lm: empty token sequence");
  if (Eigen::Index(tokens.size()) > config_.context)
    throw ValidationError("toy lm: sequence longer than context (" +
                          std::to_string(tokens.size()) + " > " +
                          std::to_string(config_.context) + ")");
  for (int t : tokens)
    if (t < 0 || t >= config_.vocab_size)
      throw ValidationError("toy lm: token " + std::to_string(t) +
                            " out of vocabulary");
  if (hook && (hook->layer < 0 || hook->layer >= config_.n_layers))
    throw ValidationError("toy lm: hook layer out of range");

  const Eigen::Index n = Eigen::Index(tokens.size());
  const int d = config_.d_model;
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    x.row(i) = embed_.row(tokens[std::size_t(i)]) + pos_.row(i);

  ForwardResult result;
  const int capture_layer = hook ? hook->layer : default_hook_layer();
  for (int l = 0; l < config_.n_layers; ++l) {
    x = block_forward(l, x);
    if (l == capture_layer) {
      result.residual_at_layer = x;
      if (hook && hook->transform) {
        for (Eigen::Index i = 0; i < n; ++i) {
          Eigen::VectorXd row = hook->transform(x.row(i).transpose());
          if (row.size() != d)
            throw ValidationError("toy lm: hook transform changed width");
          x.row(i) = row.transpose();
        }
      }
    }
  }
  // No final norm: logits are a linear read of the residual stream, so a
  // direction orthogonal to every unembedding row has exactly zero effect
  // when injected at the last layer.
  result.logits = unembed_ * x.row(n - 1).transpose();
  return result;
}

TokenDistribution ToyLm::next_token_distribution(
    std::span<const int> prefix, const std::optional<HookPoint>& hook) const {
  TokenDistribution dist;
  dist.probs = softmax(forward_with_hook(prefix, hook).logits);
  return dist;
}

std::vector<int> ToyLm::generate(const std::vector<int>& prefix,
                                 int max_tokens,
                                 const std::optional<HookPoint>& hook,
                                 std::uint64_t decode_seed,
                                 bool greedy) const {
  if (max_tokens < 1) throw ValidationError("toy lm: max_tokens must be >= 1");
  std::vector<int> seq = prefix;
  Rng rng(derive_seed(decode_seed, 0xdec0de));
  for (int step = 0; step < max_tokens; ++step) {
    const std::size_t window =
        std::min(seq.size(), std::size_t(config_.context));
    std::span<const int> view(seq.data() + (seq.size() - window), window);
    const Eigen::VectorXd logits = forward_with_hook(view, hook).logits;

    int next = 0;
    if (greedy) {
      double best = logits(0);
      for (int t = 1; t < config_.vocab_size; ++t)
        if (logits(t) > best) {
          best = logits(t);
          next = t;
        }
    } else {
      const Eigen::VectorXd p = softmax(logits);
      double u = rng.uniform01();
      double acc = 0.0;
      next = config_.vocab_size - 1;
      for (int t = 0; t < config_.vocab_size; ++t) {
        acc += p(t);
        if (u < acc) {
          next = t;
          break;
        }
      }
    }
    seq.push_back(next);
    if (next == kDocSep) break;
  }
  return seq;
}

ActivationDataset ToyLm::build_corpus(int n_tokens, std::uint64_t seed,
                                      int layer) const {
  if (n_tokens < config_.context)
    throw ValidationError("toy lm: corpus must cover at least one context");
  if (layer < 0) layer = default_hook_layer();
  if (config_.vocab_size < 128)
    throw ValidationError("toy lm: corpus synthesis needs a byte vocabulary");

  std::vector<std::int32_t> doc_ids;
  const std::vector<int> tokens =
      corpus_tokens(n_tokens, derive_seed(seed, 0xc0a905), &doc_ids);

  ActivationDataset ds;
  ds.model_id = config_.model_id();
  ds.layer = layer;
  ds.tokens.assign(tokens.begin(), tokens.end());
  ds.doc_ids = doc_ids;
  ds.special_mask.resize(std::size_t(n_tokens));
  for (std::size_t i = 0; i < std::size_t(n_tokens); ++i)
    ds.special_mask[i] = (tokens[i] == kDocSep) ? 1 : 0;

  ds.activations.resize(n_tokens, config_.d_model);
  HookPoint capture{layer, nullptr};
  for (int begin = 0; begin < n_tokens; begin += config_.context) {
    const int len = std::min(config_.context, n_tokens - begin);
    std::span<const int> chunk(tokens.data() + begin, std::size_t(len));
    const ForwardResult fwd = forward_with_hook(chunk, capture);
    ds.activations.middleRows(begin, len) = fwd.residual_at_layer;
  }
  return ds;
}

ActivationDataset build_corpus(const ToyLmConfig& config, int n_tokens,
                               std::uint64_t seed) {
  return ToyLm(config).build_corpus(n_tokens, seed);
}

TensorContainer ToyLm::weights_container() const {
  TensorContainer c;
  c.add_scalar("vocab_size", config_.vocab_size);
  c.add_scalar("d_model", config_.d_model);
  c.add_scalar("n_layers", config_.n_layers);
  c.add_scalar("n_heads", config_.n_heads);
  c.add_scalar("context", config_.context);
  c.add_matrix("embed", embed_);
  c.add_matrix("pos", pos_);
  c.add_matrix("unembed", unembed_);
  for (int l = 0; l < config_.n_layers; ++l) {
    const Block& b = blocks_[std::size_t(l)];
    const std::string p = "block" + std::to_string(l) + ".";
    c.add_matrix(p + "wq", b.wq);
    c.add_matrix(p + "wk", b.wk);
    c.add_matrix(p + "wv", b.wv);
    c.add_matrix(p + "wo", b.wo);
    c.add_vector(p + "ln1_g", b.ln1_g);
    c.add_vector(p + "ln1_b", b.ln1_b);
    c.add_vector(p + "ln2_g", b.ln2_g);
    c.add_vector(p + "ln2_b", b.ln2_b);
    c.add_matrix(p + "w1", b.w1);
    c.add_matrix(p + "w2", b.w2);
    c.add_vector(p + "b1", b.b1);
    c.add_vector(p + "b2", b.b2);
  }
  return c;
}

void ToyLm::load_weights(const TensorContainer& c) {
  if (int(c.get_scalar("vocab_size")) != config_.vocab_size ||
      int(c.get_scalar("d_model")) != config_.d_model ||
      int(c.get_scalar("n_layers")) != config_.n_layers ||
      int(c.get_scalar("n_heads")) != config_.n_heads ||
      int(c.get_scalar("context")) != config_.context)
    throw FormatError("toy lm weights: config mismatch");
  embed_ = c.get_matrix("embed");
  pos_ = c.get_matrix("pos");
  unembed_ = c.get_matrix("unembed");
  blocks_.assign(std::size_t(config_.n_layers), Block{});
  for (int l = 0; l < config_.n_layers; ++l) {
    Block& b = blocks_[std::size_t(l)];
    const std::string p = "block" + std::to_string(l) + ".";
    b.wq = c.get_matrix(p + "wq");
    b.wk = c.get_matrix(p + "wk");
    b.wv = c.get_matrix(p + "wv");
    b.wo = c.get_matrix(p + "wo");
    b.ln1_g = c.get_vector(p + "ln1_g");
    b.ln1_b = c.get_vector(p + "ln1_b");
    b.ln2_g = c.get_vector(p + "ln2_g");
    b.ln2_b = c.get_vector(p + "ln2_b");
    b.w1 = c.get_matrix(p + "w1");
    b.w2 = c.get_matrix(p + "w2");
    b.b1 = c.get_vector(p + "b1");
    b.b2 = c.get_vector(p + "b2");
  }
}

void TokenDistribution::validate(double tol) const {
  if (probs.size() == 0) throw ValidationError("token distribution: empty");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs(i) < 0.0)
      throw ValidationError("token distribution: negative probability");
    sum += probs(i);
  }
  if (std::abs(sum - 1.0) > tol)
    throw ValidationError("token distribution: probabilities sum to " +
                          std::to_string(sum));
}

}  // namespace steerkit
