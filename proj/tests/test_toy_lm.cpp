#include <doctest.h>

#include <cmath>

#include "steerkit/errors.hpp"
#include "steerkit/toy_lm.hpp"

using namespace steerkit;

namespace {

// One shared default model per test binary; construction hits the on-disk
// weight cache after the first build.
const ToyLm& default_lm() {
  static ToyLmConfig cfg = [] {
    ToyLmConfig c;
    c.seed = 7;
    return c;
  }();
  static ToyLm lm(cfg);
  return lm;
}

std::vector<int> prompt_tokens(const std::string& text) {
  std::vector<int> toks{ToyLm::kDocSep};
  for (int t : text_to_tokens(text)) toks.push_back(t);
  return toks;
}

}  // namespace

TEST_CASE("invalid dimensions are rejected") {
  ToyLmConfig bad;
  bad.d_model = 65;
  bad.n_heads = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  ToyLmConfig tiny_vocab;
  tiny_vocab.vocab_size = 1;
  CHECK_THROWS_AS(tiny_vocab.validate(), ValidationError);
}

TEST_CASE("same config twice gives identical logits on a fixed prompt") {
  ToyLmConfig cfg;
  cfg.seed = 7;
  ToyLm a(cfg), b(cfg);
  const auto prompt = prompt_tokens("the old cake");
  const Eigen::VectorXd la = a.forward_with_hook(prompt, {}).logits;
  const Eigen::VectorXd lb = b.forward_with_hook(prompt, {}).logits;
  CHECK(la == lb);
}

TEST_CASE("logits have vocabulary length") {
  const auto prompt = prompt_tokens("morning");
  const auto out = default_lm().forward_with_hook(prompt, {});
  CHECK(out.logits.size() == 256);
  CHECK(out.residual_at_layer.rows() == Eigen::Index(prompt.size()));
  CHECK(out.residual_at_layer.cols() == 64);
}

TEST_CASE("identity hook reproduces the plain forward bitwise") {
  const auto prompt = prompt_tokens("the old cake holds");
  const auto plain = default_lm().forward_with_hook(prompt, {});
  HookPoint identity;
  identity.layer = default_lm().default_hook_layer();
  identity.transform = [](const Eigen::VectorXd& x) { return x; };
  const auto hooked = default_lm().forward_with_hook(prompt, identity);
  CHECK(plain.logits == hooked.logits);
  CHECK(plain.residual_at_layer == hooked.residual_at_layer);
}

TEST_CASE("hook additions apply to the captured residual, not before it") {
  const auto prompt = prompt_tokens("a river");
  const ToyLm& lm = default_lm();
  Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(64, -1.0, 1.0);

  HookPoint add;
  add.layer = lm.default_hook_layer();
  add.transform = [&u](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(x + u);
  };
  const auto hooked = lm.forward_with_hook(prompt, add);
  const auto plain = lm.forward_with_hook(prompt, {});
  // Captured residual is pre-hook.
  CHECK(hooked.residual_at_layer == plain.residual_at_layer);
  CHECK(hooked.logits != plain.logits);
}

TEST_CASE("zeroing the final-layer residual equals the zero-residual path") {
  // Both paths computed independently: the hook scales the captured residual
  // by zero, and the direct path applies the unembedding to a zero vector.
  const auto prompt = prompt_tokens("stone door");
  const ToyLm& lm = default_lm();
  HookPoint zero;
  zero.layer = lm.config().n_layers - 1;
  zero.transform = [](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(Eigen::VectorXd::Zero(x.size()));
  };
  const auto out = lm.forward_with_hook(prompt, zero);
  const Eigen::VectorXd expected =
      lm.unembedding() * Eigen::VectorXd::Zero(64);
  CHECK((out.logits - expected).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("out-of-vocab tokens and overlong sequences are rejected") {
  const ToyLm& lm = default_lm();
  std::vector<int> bad{0, 300};
  CHECK_THROWS_AS(lm.forward_with_hook(bad, {}), ValidationError);
  std::vector<int> overlong(std::size_t(lm.config().context) + 1, 65);
  CHECK_THROWS_AS(lm.forward_with_hook(overlong, {}), ValidationError);
}

TEST_CASE("next-token distribution is normalized and stable") {
  const auto prompt = prompt_tokens("the warm garden");
  const TokenDistribution p = default_lm().next_token_distribution(prompt, {});
  double sum = 0.0;
  for (Eigen::Index i = 0; i < p.probs.size(); ++i) {
    CHECK(p.probs(i) >= 0.0);
    sum += p.probs(i);
  }
  CHECK(std::abs(sum - 1.0) <= 1e-12);
  const TokenDistribution q = default_lm().next_token_distribution(prompt, {});
  CHECK(p.probs == q.probs);
}

TEST_CASE("equal logits give the uniform distribution") {
  // Symmetry check on the softmax path via a single-token prompt through a
  // zeroing hook: logits = U * 0 = equal, so probs must be exactly 1/V.
  const ToyLm& lm = default_lm();
  HookPoint zero;
  zero.layer = lm.config().n_layers - 1;
  zero.transform = [](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(Eigen::VectorXd::Zero(x.size()));
  };
  const auto prompt = prompt_tokens("x");
  const TokenDistribution p = lm.next_token_distribution(prompt, zero);
  for (Eigen::Index i = 0; i < p.probs.size(); ++i)
    CHECK(p.probs(i) == doctest::Approx(1.0 / 256).epsilon(1e-12));
}

TEST_CASE("generate appends exactly max_tokens or stops at the separator") {
  const auto prompt = prompt_tokens("the quiet music");
  const auto one = default_lm().generate(prompt, 1, {}, 9);
  CHECK(one.size() == prompt.size() + 1);

  const auto many = default_lm().generate(prompt, 40, {}, 9);
  CHECK(many.size() <= prompt.size() + 40);
  if (many.size() < prompt.size() + 40) CHECK(many.back() == ToyLm::kDocSep);
}

TEST_CASE("generation with identity hook equals generation without") {
  const auto prompt = prompt_tokens("near the field");
  HookPoint identity;
  identity.layer = default_lm().default_hook_layer();
  identity.transform = [](const Eigen::VectorXd& x) { return x; };
  const auto a = default_lm().generate(prompt, 24, {}, 5);
  const auto b = default_lm().generate(prompt, 24, identity, 5);
  CHECK(a == b);
}

TEST_CASE("greedy decoding is reproducible and sampled decoding is seeded") {
  const auto prompt = prompt_tokens("my bright engine");
  const auto g1 = default_lm().generate(prompt, 16, {}, 3);
  const auto g2 = default_lm().generate(prompt, 16, {}, 4);
  CHECK(g1 == g2);  // greedy ignores the decode seed

  const auto s1 = default_lm().generate(prompt, 16, {}, 3, false);
  const auto s2 = default_lm().generate(prompt, 16, {}, 3, false);
  const auto s3 = default_lm().generate(prompt, 16, {}, 4, false);
  CHECK(s1 == s2);
  CHECK(s1 != s3);
}

TEST_CASE("pretrained model speaks the corpus language") {
  const auto prompt = prompt_tokens("the old cake holds");
  const auto out = default_lm().generate(prompt, 24, {}, 1);
  const std::string cont = tokens_to_text(
      std::span<const int>(out.data() + prompt.size(),
                           out.size() - prompt.size()));
  // Continuation should be mostly lowercase corpus characters.
  int friendly = 0;
  for (char ch : cont)
    friendly += (std::islower(static_cast<unsigned char>(ch)) || ch == ' ' ||
                 ch == '.');
  CHECK(cont.size() > 0);
  CHECK(double(friendly) >= 0.9 * double(cont.size()));
}

TEST_CASE("corpus dataset has the requested shape and flags") {
  const ActivationDataset ds = default_lm().build_corpus(4096, 11);
  CHECK(ds.size() == 4096);
  CHECK(ds.width() == 64);
  CHECK(ds.layer == default_lm().default_hook_layer());
  // Separators flagged, never deleted.
  bool any_special = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.special_mask[i]) {
      any_special = true;
      CHECK(ds.tokens[i] == ToyLm::kDocSep);
    }
  }
  CHECK(any_special);
}

TEST_CASE("same corpus seed reproduces the dataset") {
  const ActivationDataset a = default_lm().build_corpus(512, 21);
  const ActivationDataset b = default_lm().build_corpus(512, 21);
  CHECK(a.tokens == b.tokens);
  CHECK(a.activations == b.activations);
}

TEST_CASE("dataset activations match an independent forward recomputation") {
  const ToyLm& lm = default_lm();
  const ActivationDataset ds = lm.build_corpus(300, 31);
  // Recompute a sampled position's activation: position t lives in the
  // chunk starting at (t / context) * context.
  const int context = lm.config().context;
  for (int t : {5, 130, 262}) {
    const int begin = (t / context) * context;
    const int len = std::min(context, int(ds.size()) - begin);
    std::vector<int> chunk(ds.tokens.begin() + begin,
                           ds.tokens.begin() + begin + len);
    HookPoint capture{ds.layer, nullptr};
    const auto fwd = lm.forward_with_hook(chunk, capture);
    const Eigen::VectorXd expected =
        fwd.residual_at_layer.row(t - begin).transpose();
    CHECK((ds.activations.row(t).transpose() - expected)
              .lpNorm<Eigen::Infinity>() == 0.0);
  }
}

TEST_CASE("weights persist through the tensor container") {
  const TensorContainer c = default_lm().weights_container();
  CHECK(c.has("embed"));
  CHECK(c.has("block0.wq"));
  CHECK(c.has("block1.w2"));
  CHECK(c.get_matrix("embed").rows() == 256);
}
