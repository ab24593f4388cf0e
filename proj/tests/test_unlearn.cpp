#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "steu/error.hpp"
#include "steu/unlearn.hpp"
#include "support.hpp"

using namespace steu;
namespace fs = std::filesystem;

namespace {

std::string expect_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  FAIL("expected steu::Error");
  return {};
}

double scalar(ad::Var v) { return v.value()[0]; }

double bce(double q, double p) { return -(p * std::log(q) + (1 - p) * std::log(1 - q)); }
double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Fixture {
  LabeledDataset ds = test::random_dataset(17, 30, 3, 40, 12, 8);
  ModelConfig cfg = test::small_config(30, 3, 8, 2, 2);
  ModelParams theta0 = test::random_params(cfg, 4, 0.3);
  SelectedSet selected = select_tokens(score_tokens(count_token_stats(ds, 0)), 5, 1, 0);

  UnlearnConfig config(Method m = Method::steu) const {
    UnlearnConfig c;
    c.method = m;
    c.k = 5;
    c.epochs = 2;
    c.batch_size = 8;
    c.lr = 1e-2;
    return c;
  }
};

}  // namespace

TEST_CASE("build_mask") {
  const auto cfg = test::small_config(10, 3, 8, 2);
  SelectedSet s;
  s.token_ids = {3, 7};
  UnlearnConfig c;
  auto m = build_mask(s, c, cfg);
  CHECK(m.trainable_rows() == 2);
  CHECK(m.embedding_rows[3]);
  CHECK(m.embedding_rows[7]);
  CHECK_FALSE(m.embedding_rows[4]);
  CHECK(m.head_trainable);
  CHECK(m.encoder_trainable_tensors.empty());
  CHECK(m.capacity(cfg) == 2 * 8 + 8 * 3 + 3);

  c.update_head = false;
  CHECK_FALSE(build_mask(s, c, cfg).head_trainable);
  c.method = Method::steu_emb_only;
  c.update_head = true;
  CHECK_FALSE(build_mask(s, c, cfg).head_trainable);

  c.method = Method::direct_suppression;
  m = build_mask(s, c, cfg);
  CHECK(m.trainable_rows() == 0);
  CHECK(m.head_trainable);
  CHECK(m.encoder_trainable_tensors.size() == 12);
  CHECK(m.touches("block1.attn.wq"));
  CHECK_FALSE(m.touches("block0.attn.wq"));
  CHECK_FALSE(m.touches(kWordEmbedding));
  CHECK(m.touches(kHeadWeight));

  s.token_ids = {10};
  CHECK_THROWS_AS(build_mask(s, UnlearnConfig{}, cfg), Error);
}

TEST_CASE("mask_gradients") {
  GradientMask m;
  m.embedding_rows = {false, true, false, false};
  ad::Gradients g;
  g.emplace(std::string(kWordEmbedding), Tensor({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1}));
  g.emplace(std::string(kHeadWeight), Tensor({2, 2}, {1, 2, 3, 4}));
  g.emplace(std::string(kHeadBias), Tensor({2}, {1, 2}));
  g.emplace("block0.attn.wq", Tensor({2, 2}, {5, 6, 7, 8}));
  auto out = mask_gradients(g, m);
  CHECK(out.at(std::string(kWordEmbedding)) == Tensor({4, 2}, {0, 0, 1, 1, 0, 0, 0, 0}));
  CHECK(out.at(std::string(kHeadWeight)) == Tensor({2, 2}));
  CHECK(out.at(std::string(kHeadBias)) == Tensor({2}));
  CHECK(out.at("block0.attn.wq") == Tensor({2, 2}));

  m.embedding_rows.assign(4, true);
  m.head_trainable = true;
  m.encoder_trainable_tensors = {"block0.attn.wq"};
  CHECK(mask_gradients(g, m) == g);

  m.encoder_trainable_tensors = {"block9.attn.wq"};
  CHECK_THROWS_AS(mask_gradients(g, m), Error);
  m.encoder_trainable_tensors.clear();
  m.embedding_rows.assign(3, true);
  CHECK_THROWS_AS(mask_gradients(g, m), Error);
}

TEST_CASE("mask json round trip") {
  const auto cfg = test::small_config(12, 3, 8, 2);
  SelectedSet s;
  s.token_ids = {2, 9, 5};
  const auto dir = fs::temp_directory_path() / "steu_unlearn_mask";
  fs::create_directories(dir);
  for (Method m : {Method::steu, Method::grad_ascent}) {
    UnlearnConfig c;
    c.method = m;
    const auto mask = build_mask(s, c, cfg);
    write_mask(dir / "mask.json", mask);
    CHECK(read_mask(dir / "mask.json") == mask);
  }
}

TEST_CASE("forget_loss examples") {
  ad::Tape tape;
  const Tensor labels({1, 3}, {1, 0, 1});
  const Tensor z({1, 3}, {0.3, -0.4, 1.1});
  const double want = (bce(sig(0.3), 0) + bce(sig(-0.4), 0) + bce(sig(1.1), 1)) / 3.0;
  CHECK(std::abs(scalar(forget_loss(tape.constant(z), labels, 0)) - want) < 1e-12);
  CHECK(std::abs(scalar(forget_loss(tape.constant(z), labels, 0, ForgetScope::target)) - bce(sig(0.3), 0)) < 1e-12);

  CHECK(scalar(forget_loss(tape.constant(Tensor({2, 3})), Tensor({2, 3}, {1, 0, 1, 1, 1, 0}), 0)) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(scalar(forget_loss(tape.constant(Tensor({1, 3}, {-20, -20, 20})), labels, 0)) < 1e-6);

  const auto msg = expect_error([&] { forget_loss(tape.constant(z), Tensor({1, 3}, {0, 1, 1}), 0); });
  CHECK(msg.find("lacks the forget label") != std::string::npos);
}

TEST_CASE("utility_loss examples") {
  {
    ad::Tape tape;
    const Tensor zero({2, 3});
    auto z = tape.parameter("z", zero, true);
    const auto loss = utility_loss(z, Tensor({2, 3}), 1);
    CHECK(scalar(loss) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const auto grads = tape.backward(loss);
    for (double g : grads.at("z").values()) CHECK(std::abs(g) < 1e-15);
  }
  {
    // only column 1 counts when C=2 and c_f=0
    ad::Tape tape;
    const Tensor a({1, 2}, {5.0, 0.2}), b({1, 2}, {-7.0, 0.2});
    CHECK(scalar(utility_loss(tape.constant(a), Tensor({1, 2}, {0.0, 0.2}), 0)) ==
          scalar(utility_loss(tape.constant(b), Tensor({1, 2}, {3.0, 0.2}), 0)));
  }
  {
    Rng rng(9);
    const Tensor z = test::random_tensor({2, 3}, rng, 1.5), base = test::random_tensor({2, 3}, rng, 1.5);
    double want = 0.0;
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c : {0, 2}) want += bce(sig(z(r, c)), sig(base(r, c)));
    want /= 4.0;
    ad::Tape tape;
    CHECK(std::abs(scalar(utility_loss(tape.constant(z), base, 1)) - want) < 1e-12);
  }
  ad::Tape tape;
  CHECK_THROWS_AS(utility_loss(tape.constant(Tensor({2, 1})), Tensor({2, 1}), 0), Error);
}

TEST_CASE("utility loss is stationary at the base model") {
  Fixture f;
  const auto batch = make_batch(f.ds.train);
  const Tensor base = infer_logits(f.theta0, batch);
  for (Method m : {Method::steu, Method::direct_suppression}) {
    const auto mask = build_mask(f.selected, f.config(m), f.cfg);
    auto out = forward(f.theta0, batch, [&](std::string_view n) { return mask.touches(n); });
    const auto grads = out.tape->backward(utility_loss(out.logits, base, 0));
    std::size_t checked = 0;
    for (const auto& [name, g] : grads) {
      for (double v : g.values()) CHECK(std::abs(v) <= 1e-10);
      checked += g.size();
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("zero learning rate returns the base model") {
  Fixture f;
  for (Method m : {Method::steu, Method::grad_ascent, Method::influence_weighted}) {
    auto c = f.config(m);
    c.lr = 0.0;
    CHECK(run_unlearning(f.theta0, f.ds, f.selected, c).params == f.theta0);
  }
}

TEST_CASE("steu freezes everything outside the mask") {
  Fixture f;
  const auto before = f.theta0;
  for (Method m : {Method::steu, Method::steu_emb_only}) {
    const auto result = run_unlearning(f.theta0, f.ds, f.selected, f.config(m));
    CHECK(f.theta0 == before);
    const auto& p = result.params;
    for (std::size_t i = 0; i < p.tensor_count(); ++i) {
      const auto& name = p.name(i);
      if (name == kWordEmbedding) continue;
      if ((name == kHeadWeight || name == kHeadBias) && result.mask.head_trainable) continue;
      INFO(name);
      CHECK(p.tensor(i) == before.tensor(i));
    }
    const Tensor& e1 = p.at(kWordEmbedding);
    const Tensor& e0 = before.at(kWordEmbedding);
    std::size_t moved = 0;
    for (std::size_t r = 0; r < e0.rows(); ++r) {
      const bool same = std::equal(e1.row(r).begin(), e1.row(r).end(), e0.row(r).begin());
      if (!result.mask.embedding_rows[r]) CHECK(same);
      if (!same) ++moved;
    }
    CHECK(moved > 0);
    CHECK(moved <= f.selected.token_ids.size());
  }
}

TEST_CASE("baselines only move the last block and the head") {
  Fixture f;
  const auto result = run_unlearning(f.theta0, f.ds, f.selected, f.config(Method::direct_suppression));
  for (std::size_t i = 0; i < result.params.tensor_count(); ++i) {
    const auto& name = result.params.name(i);
    INFO(name);
    if (result.mask.touches(name)) continue;
    CHECK(result.params.tensor(i) == f.theta0.tensor(i));
  }
  CHECK_FALSE(result.params.at("block1.ffn.w1") == f.theta0.at("block1.ffn.w1"));
}

TEST_CASE("observer sees exactly-zero gradients outside the mask") {
  Fixture f;
  for (Method m : {Method::steu, Method::grad_ascent}) {
    const auto mask = build_mask(f.selected, f.config(m), f.cfg);
    std::size_t calls = 0;
    run_unlearning(f.theta0, f.ds, f.selected, f.config(m), [&](std::size_t, const ad::Gradients& g) {
      ++calls;
      for (const auto& [name, t] : g) {
        if (name == kWordEmbedding) {
          for (std::size_t r = 0; r < t.rows(); ++r)
            if (!mask.embedding_rows[r])
              for (double v : t.row(r)) CHECK(v == 0.0);
        } else if (!mask.touches(name)) {
          for (double v : t.values()) CHECK(v == 0.0);
        }
      }
    });
    CHECK(calls > 0);
  }
}

TEST_CASE("unlearning is deterministic") {
  Fixture f;
  const auto a = run_unlearning(f.theta0, f.ds, f.selected, f.config(Method::influence_weighted));
  const auto b = run_unlearning(f.theta0, f.ds, f.selected, f.config(Method::influence_weighted));
  CHECK(a.params == b.params);
  auto c = f.config(Method::influence_weighted);
  c.seed = 8;
  CHECK_FALSE(run_unlearning(f.theta0, f.ds, f.selected, c).params == a.params);
}

TEST_CASE("history shape") {
  Fixture f;
  std::size_t forget_docs = 0;
  for (const auto& d : f.ds.train) forget_docs += d.has_label(0);
  const auto c = f.config();
  const auto r = run_unlearning(f.theta0, f.ds, f.selected, c);
  CHECK(r.history.steps_per_epoch == (forget_docs + c.batch_size - 1) / c.batch_size);
  CHECK(r.history.steps.size() == c.epochs * r.history.steps_per_epoch);
  REQUIRE(r.history.epochs.size() == c.epochs);
  CHECK(r.history.epochs.back().last_step == r.history.steps.back().step);
  for (const auto& s : r.history.steps) {
    CHECK(s.total_loss == doctest::Approx(c.lambda_u * s.forget_loss + c.lambda_k * s.utility_loss));
  }
}

TEST_CASE("pure anchoring leaves the model where it is") {
  Fixture f;
  auto c = f.config();
  c.lambda_u = 0.0;
  const auto r = run_unlearning(f.theta0, f.ds, f.selected, c);
  CHECK(r.params == f.theta0);
  for (const auto& s : r.history.steps) CHECK(s.total_loss == s.utility_loss);
}

TEST_CASE("run_unlearning errors") {
  Fixture f;
  auto ds = f.ds;
  for (auto& d : ds.train) d.labels[0] = 1;
  CHECK(expect_error([&] { run_unlearning(f.theta0, ds, f.selected, f.config()); }).find("empty retain stream") !=
        std::string::npos);
  ds = f.ds;
  for (auto& d : ds.train) d.labels[0] = 0;
  CHECK(expect_error([&] { run_unlearning(f.theta0, ds, f.selected, f.config()); }).find("empty forget stream") !=
        std::string::npos);
  auto c = f.config();
  c.lambda_u = c.lambda_k = 0.0;
  CHECK_THROWS_AS(run_unlearning(f.theta0, f.ds, f.selected, c), Error);
  c = f.config();
  c.forget_class = 3;
  CHECK_THROWS_AS(run_unlearning(f.theta0, f.ds, f.selected, c), Error);
  CHECK_THROWS_AS(parse_method("sisa"), UsageError);
  CHECK(parse_method("steu_emb_only") == Method::steu_emb_only);
}
