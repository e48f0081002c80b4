#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "icdit/backbone.hpp"
#include "icdit/diffusion.hpp"
#include "icdit/errors.hpp"
#include "icdit/gradcheck.hpp"
#include "icdit/ops.hpp"
#include "icdit/synthdata.hpp"
#include "icdit/trainer.hpp"

using namespace icdit;
using testing::bit_equal;
using testing::brute_force_mm;
using testing::max_diff;
using testing::random_tensor;

namespace {

AttentionParams random_attention(std::size_t d, std::size_t heads, std::uint64_t seed) {
  AttentionParams p;
  p.n_heads = heads;
  Tensor* all[] = {&p.q_a, &p.k_a, &p.v_a, &p.o_a, &p.q_b, &p.k_b, &p.v_b, &p.o_b};
  for (std::size_t i = 0; i < 8; ++i) *all[i] = random_tensor({d, d}, seed * 16 + i, 0.7);
  return p;
}

struct Fixture {
  ModelConfig config;
  SurrogateEncoders encoders;
  std::vector<SynthSample> samples = gen_dataset(2, 99);
  std::vector<PreparedSample> prepared = prepare_samples(samples, encoders);
};

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("timestep features") {
    const Tensor f0 = timestep_features(0, 8, 200);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(f0[i] == 0.0);
      CHECK(f0[4 + i] == 1.0);
    }
    const Tensor f1 = timestep_features(1, 4, 200);
    CHECK(std::abs(f1[0] - std::sin(1.0)) < 1e-12);
    CHECK(std::abs(f1[1] - std::sin(0.01)) < 1e-12);
    CHECK(std::abs(f1[2] - std::cos(1.0)) < 1e-12);
    CHECK(std::abs(f1[3] - std::cos(0.01)) < 1e-12);
    std::set<std::vector<double>> seen;
    for (std::size_t t = 0; t < 200; ++t) {
      const Tensor f = timestep_features(t, 32, 200);
      seen.insert(std::vector<double>(f.data().begin(), f.data().end()));
    }
    CHECK(seen.size() == 200);
    CHECK_THROWS_AS(timestep_features(200, 32, 200), ContractError);
  }

  TEST_CASE("grid positions distinguish every cell") {
    const Tensor pos = grid_positions(4, 4, 32);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = i + 1; j < 16; ++j) {
        double dist = 0.0;
        for (std::size_t c = 0; c < 32; ++c) dist += std::pow(pos.at(i, c) - pos.at(j, c), 2);
        CHECK(std::sqrt(dist) > 0.5);
      }
  }

  TEST_CASE("mm_attention with identity projections over equal tokens returns the token") {
    AttentionParams p;
    p.n_heads = 1;
    for (Tensor* t : {&p.q_a, &p.k_a, &p.v_a, &p.o_a, &p.q_b, &p.k_b, &p.v_b, &p.o_b}) *t = Tensor::eye(4);
    const Tensor u({1, 4}, {0.3, -1.2, 0.8, 2.0});
    TokenStream a{Modality::image, u}, b{Modality::text, u.clone()};
    const auto [oa, ob] = mm_attention(a, b, p);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(std::abs(oa.tokens[c] - u[c]) < 1e-15);
      CHECK(std::abs(ob.tokens[c] - u[c]) < 1e-15);
    }
  }

  TEST_CASE("mm_attention equals brute-force joint attention") {
    {
      const auto p = random_attention(4, 1, 1);
      const Tensor a = random_tensor({3, 4}, 2), b = random_tensor({2, 4}, 3);
      const auto [oa, ob] = mm_attention(TokenStream{Modality::image, a}, TokenStream{Modality::text, b}, p);
      const auto [wa, wb] = brute_force_mm(a, b, p);
      CHECK(max_diff(oa.tokens, wa) < 1e-10);
      CHECK(max_diff(ob.tokens, wb) < 1e-10);
    }
    for (std::size_t d : {2, 4})
      for (std::size_t heads : {1, 2})
        for (std::size_t na = 1; na <= 4; ++na)
          for (std::size_t nb = 1; nb <= 4; ++nb) {
            CAPTURE(d);
            CAPTURE(heads);
            CAPTURE(na);
            CAPTURE(nb);
            const auto p = random_attention(d, heads, d * 100 + heads * 10 + na + nb);
            const Tensor a = random_tensor({na, d}, na * 7 + nb), b = random_tensor({nb, d}, na * 11 + nb + 500);
            const auto [oa, ob] = mm_attention(TokenStream{Modality::image, a}, TokenStream{Modality::text, b}, p);
            const auto [wa, wb] = brute_force_mm(a, b, p);
            CHECK(max_diff(oa.tokens, wa) < 1e-10);
            CHECK(max_diff(ob.tokens, wb) < 1e-10);
          }
  }

  TEST_CASE("mm_attention batches do not interact") {
    const auto p = random_attention(4, 2, 5);
    const Tensor a1 = random_tensor({3, 4}, 6), b1 = random_tensor({2, 4}, 7);
    const Tensor a2 = random_tensor({1, 4}, 8), b2 = random_tensor({4, 4}, 9);
    const Tensor as[] = {a1, a2}, bs[] = {b1, b2};
    const auto [oa, ob] = mm_attention(StreamBatch{concat_tokens(as), {0, 3, 4}}, StreamBatch{concat_tokens(bs), {0, 2, 6}}, p);
    const auto [s1a, s1b] = mm_attention(TokenStream{Modality::image, a1}, TokenStream{Modality::text, b1}, p);
    const auto [s2a, s2b] = mm_attention(TokenStream{Modality::image, a2}, TokenStream{Modality::text, b2}, p);
    const Tensor wa[] = {s1a.tokens, s2a.tokens}, wb[] = {s1b.tokens, s2b.tokens};
    CHECK(testing::max_abs_diff(oa.tokens.data(), concat_tokens(wa).data()) < 1e-12);
    CHECK(testing::max_abs_diff(ob.tokens.data(), concat_tokens(wb).data()) < 1e-12);
  }

  TEST_CASE("permuting b permutes b' and leaves a' unchanged") {
    const auto p = random_attention(4, 2, 10);
    const Tensor a = random_tensor({3, 4}, 11), b = random_tensor({4, 4}, 12);
    const std::size_t perm[] = {2, 0, 3, 1};
    const Tensor bp = gather_rows(b, perm);
    const auto [oa, ob] = mm_attention(TokenStream{Modality::image, a}, TokenStream{Modality::text, b}, p);
    const auto [pa, pb] = mm_attention(TokenStream{Modality::image, a}, TokenStream{Modality::text, bp}, p);
    CHECK(testing::max_abs_diff(oa.tokens.data(), pa.tokens.data()) < 1e-12);
    CHECK(testing::max_abs_diff(gather_rows(ob.tokens, perm).data(), pb.tokens.data()) < 1e-12);
  }

  TEST_CASE("mm_attention rejects mismatched widths") {
    const auto p = random_attention(4, 1, 13);
    CHECK_THROWS_AS(mm_attention(TokenStream{Modality::image, random_tensor({2, 4}, 1)},
                                 TokenStream{Modality::text, random_tensor({2, 3}, 2)}, p),
                    ShapeError);
  }

  TEST_CASE("block_forward at init passes the image stream through unchanged") {
    Fixture fx;
    const ModelParams params = init_model(fx.config, 3);
    const std::vector<SampleConditions> conds = {fx.prepared[0].conditions, fx.prepared[1].conditions};
    const ConditionBatch cb = make_condition_batch(conds, fx.config);
    const BlockStreams in{StreamBatch{random_tensor({32, 32}, 14), {0, 16, 32}}, cb.text, cb.layout, cb.embedding};
    const Tensor cond = silu(random_tensor({2, 32}, 15));
    const BlockStreams out = block_forward(in, cond, params.blocks[0]);
    CHECK(bit_equal(out.z.tokens, in.z.tokens));
    CHECK(out.z.offsets == in.z.offsets);
    CHECK(out.text.offsets == in.text.offsets);
    CHECK(out.layout.offsets == in.layout.offsets);
    CHECK(out.embedding.offsets == in.embedding.offsets);
    CHECK(out.text.tokens.shape() == in.text.tokens.shape());
  }

  TEST_CASE("block_forward gradient check at d=8 with 2 heads") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.depth = 1;
    ModelParams params = init_model(cfg, 4);
    randomize_zero_init(params, 4, 0.2);
    const auto& blk = params.blocks[0];
    Tensor z = random_tensor({6, 8}, 16), t = random_tensor({3, 8}, 17), l = random_tensor({4, 8}, 18),
           e = random_tensor({2, 8}, 19), cond = random_tensor({2, 8}, 20);
    for (Tensor* x : {&z, &t, &l, &e, &cond}) x->set_requires_grad(true);
    const Tensor w = random_tensor({6, 8}, 21);
    auto f = [&] {
      const BlockStreams in{StreamBatch{z, {0, 3, 6}}, StreamBatch{t, {0, 2, 3}}, StreamBatch{l, {0, 2, 4}},
                            StreamBatch{e, {0, 1, 2}}};
      const BlockStreams out = block_forward(in, cond, blk);
      return add(sum(mul(out.z.tokens, w)), sum(mul(out.layout.tokens, out.layout.tokens)));
    };
    std::vector<Tensor> leaves = {z, t, l, e, cond};
    for (const auto& [name, tensor] : params.named())
      if (name.rfind("blocks.0.", 0) == 0) leaves.push_back(tensor);
    const auto report = grad_check(f, leaves);
    CHECK(report.components > 1000);
    CHECK(report.max_rel_error < 1e-5);
  }

  TEST_CASE("predict_epsilon at init is the head applied to the normalized image tokens") {
    Fixture fx;
    ModelParams params = init_model(fx.config, 5);
    Rng rng(6);
    for (auto& v : params.head_w.mutable_data()) v = rng.normal();
    for (auto& v : params.head_b.mutable_data()) v = rng.normal();
    const Tensor z = random_tensor(fx.config.latent_shape(), 22);
    const std::vector<SampleConditions> conds = {fx.prepared[0].conditions};
    const std::size_t steps[] = {17};
    const Tensor zs[] = {z};
    const Tensor out = predict_epsilon_vectors(params, fx.encoders, zs, steps, make_condition_batch(conds, fx.config));

    const Tensor pv = patch_vectors(z, 2);
    const Tensor pos = grid_positions(4, 4, 32);
    const auto& proj = fx.encoders.image_patch_projection();
    for (std::size_t i = 0; i < 16; ++i) {
      std::vector<long double> tok(32, 0.0L);
      for (std::size_t c = 0; c < 32; ++c) {
        for (std::size_t k = 0; k < 16; ++k) tok[c] += static_cast<long double>(pv.at(i, k)) * proj.at(k, c);
        tok[c] += pos.at(i, c);
      }
      long double m = 0.0L, var = 0.0L;
      for (auto v : tok) m += v / 32.0L;
      for (auto v : tok) var += (v - m) * (v - m) / 32.0L;
      for (auto& v : tok) v = (v - m) / std::sqrt(var + 1e-6L);
      for (std::size_t j = 0; j < 16; ++j) {
        long double y = params.head_b[j];
        for (std::size_t c = 0; c < 32; ++c) y += tok[c] * params.head_w.at(c, j);
        CHECK(std::abs(out.at(i, j) - static_cast<double>(y)) < 1e-12);
      }
    }

    // Conditions and timestep do not reach the image stream while the gates are zero.
    const std::vector<SampleConditions> other = {fx.prepared[1].conditions};
    const std::size_t other_steps[] = {150};
    CHECK(bit_equal(out, predict_epsilon_vectors(params, fx.encoders, zs, other_steps,
                                                 make_condition_batch(other, fx.config))));
  }

  TEST_CASE("predict_epsilon shapes and per-sample independence") {
    Fixture fx;
    ModelParams params = init_model(fx.config, 7);
    randomize_zero_init(params, 7, 0.1);
    const Tensor z1 = random_tensor(fx.config.latent_shape(), 23), z2 = random_tensor(fx.config.latent_shape(), 24);
    const std::vector<SampleConditions> both = {fx.prepared[0].conditions, fx.prepared[1].conditions};
    const Tensor zs[] = {z1, z2};
    const std::size_t steps[] = {3, 140};
    const auto batched = predict_epsilon(params, fx.encoders, zs, steps, make_condition_batch(both, fx.config));
    REQUIRE(batched.size() == 2);
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(batched[s].shape() == fx.config.latent_shape());
      const std::vector<SampleConditions> one = {both[s]};
      const Tensor z1s[] = {zs[s]};
      const std::size_t st[] = {steps[s]};
      const auto single = predict_epsilon(params, fx.encoders, z1s, st, make_condition_batch(one, fx.config));
      CHECK(testing::max_abs_diff(batched[s].data(), single[0].data()) < 1e-12);
    }
    const Tensor bad[] = {random_tensor({4, 4, 4}, 25)};
    const std::vector<SampleConditions> one = {both[0]};
    const std::size_t st[] = {0};
    CHECK_THROWS_AS(predict_epsilon(params, fx.encoders, bad, st, make_condition_batch(one, fx.config)), ConfigError);
  }

  TEST_CASE("drop sets and null tokens") {
    const auto all = DropSet::all();
    CHECK(all.size() == 8);
    CHECK(all.front().empty());
    CHECK(all.back() == DropSet{true, true, true});
    std::set<std::string> labels;
    for (const auto& d : all) labels.insert(d.label());
    CHECK(labels.size() == 8);
    const std::vector<std::string> names = {"layout", "embedding"};
    CHECK(DropSet::from_names(names) == DropSet{false, true, true});
    const std::vector<std::string> bad = {"colour"};
    CHECK_THROWS_AS(DropSet::from_names(bad), ConfigError);

    Fixture fx;
    const ModelParams params = init_model(fx.config, 8);
    const std::vector<SampleConditions> conds = {fx.prepared[0].conditions, fx.prepared[1].conditions};
    const ConditionBatch cb = apply_drops(make_condition_batch(conds, fx.config), DropSet{false, true, false}, params);
    CHECK(cb.layout.offsets == std::vector<std::size_t>{0, 1, 2});
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t c = 0; c < 32; ++c) CHECK(cb.layout.tokens.at(s, c) == params.null_layout.at(0, c));
    CHECK(cb.text.tokens.rows() == conds[0].text.size() + conds[1].text.size());
  }

  TEST_CASE("trainable and frozen sets are disjoint and cover the forward pass") {
    Fixture fx;
    ModelParams params = init_model(fx.config, 9);
    randomize_zero_init(params, 9, 0.1);
    std::set<std::string> names;
    for (const auto& [name, t] : params.named()) {
      names.insert(name);
      CHECK(t.requires_grad());
      for (const auto& [fname, ft] : fx.encoders.frozen_tensors()) CHECK_FALSE(t.same_storage(ft));
    }
    CHECK(names.size() == params.named().size());
    CHECK(params.parameter_count() > 0);

    DiffusionBatch batch;
    for (const auto& p : fx.prepared) {
      batch.z0.push_back(p.latent);
      batch.eps.push_back(random_tensor(p.latent.shape(), 26));
      batch.t.push_back(50);
    }
    const std::vector<SampleConditions> conds = {fx.prepared[0].conditions, fx.prepared[1].conditions};
    // Drop the caption so the null caption token is exercised too.
    ConditionBatch cb = make_condition_batch(conds, fx.config);
    batch.conditions = cb;
    Tape::current().reset();
    backward(denoise_loss(batch, params, fx.encoders, make_schedule(fx.config.steps, 5e-4, 0.1)));
    batch.conditions = apply_drops(cb, DropSet{true, true, true}, params);
    backward(denoise_loss(batch, params, fx.encoders, make_schedule(fx.config.steps, 5e-4, 0.1)));
    Tape::current().reset();
    // The last block's condition-stream outputs feed nothing downstream.
    const std::string last = "blocks." + std::to_string(params.blocks.size() - 1) + ".";
    auto dead_end = [&](const std::string& name) {
      if (name.rfind(last, 0) != 0) return false;
      const std::string rest = name.substr(last.size());
      return rest.find("o_cond") != std::string::npos || rest.rfind("mlp_norm.", 0) == 0 ||
             (rest.rfind("mlp.", 0) == 0 && rest.rfind("mlp.image.", 0) != 0);
    };
    std::size_t unreached = 0;
    for (const auto& [name, t] : params.named()) {
      CAPTURE(name);
      CHECK(t.has_grad() != dead_end(name));
      unreached += dead_end(name);
    }
    CHECK(unreached == 3 * (1 + 2 + 4));
    for (const auto& [name, t] : fx.encoders.frozen_tensors()) CHECK_FALSE(t.has_grad());
  }
}
