#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cerd/gradcheck.hpp"
#include "cerd/moe.hpp"

using namespace cerd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  fill_normal(t, 0.0, 1.0, rng);
  return t;
}

TokenSet completed_tokens(std::size_t modalities, std::size_t tokens, std::size_t hidden, Rng& rng,
                          const std::vector<std::uint8_t>& mask) {
  TokenSet ts;
  for (std::size_t m = 0; m < modalities; ++m) {
    ts.blocks.push_back(random_tensor({tokens, hidden}, rng));
    ts.provenance.push_back(mask[m] ? Provenance::observed : Provenance::reconstructed);
  }
  return ts;
}

}  // namespace

TEST_CASE("encode_tokens preserves the 64x128 paper-scale shape") {
  Rng rng(1);
  std::vector<TransformerEncoderBlock> encoder;
  encoder.emplace_back(128, 4, rng);
  encoder.emplace_back(128, 4, rng);
  const TokenSet ts = completed_tokens(4, 16, 128, rng, {1, 1, 1, 1});
  const Tensor encoded = encode_tokens(encoder, ts, eval_context());
  CHECK(encoded.dim(0) == 64);
  CHECK(encoded.dim(1) == 128);

  TokenSet gappy = ts;
  gappy.provenance[1] = Provenance::missing;
  CHECK_THROWS_AS(encode_tokens(encoder, gappy, eval_context()), ContractError);
}

TEST_CASE("identity-initialized encoder returns the concatenated tokens") {
  Rng rng(2);
  std::vector<TransformerEncoderBlock> encoder;
  encoder.emplace_back(8, 2, rng);
  zero_values(encoder[0].attn.out_proj.weight);
  zero_values(encoder[0].attn.out_proj.bias);
  zero_values(encoder[0].ff.fc2.weight);
  zero_values(encoder[0].ff.fc2.bias);
  const TokenSet ts = completed_tokens(3, 2, 8, rng, {1, 1, 1});
  const Tensor encoded = encode_tokens(encoder, ts, eval_context());
  const Tensor plain = concat(ts.blocks, 0);
  for (std::size_t i = 0; i < encoded.size(); ++i) CHECK(encoded.values()[i] == plain.values()[i]);
}

TEST_CASE("splitting encoded rows then re-concatenating is the identity") {
  Rng rng(3);
  const Tensor encoded = random_tensor({12, 6}, rng);
  const auto blocks = split_blocks(encoded, 4, 3);
  REQUIRE(blocks.size() == 4);
  const Tensor back = concat(blocks, 0);
  for (std::size_t i = 0; i < encoded.size(); ++i) CHECK(back.values()[i] == encoded.values()[i]);
}

TEST_CASE("routing vector is the mask-weighted mean of pooled blocks") {
  Rng rng(4);
  std::vector<Tensor> blocks;
  std::vector<Tensor> pooled;
  for (std::size_t m = 0; m < 4; ++m) {
    blocks.push_back(random_tensor({5, 3}, rng));
    pooled.push_back(reduce(blocks[m], Reduce::mean, 0));
  }

  const Tensor all = routing_vector(blocks, {1, 1, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) {
    const double expect =
        (pooled[0].values()[c] + pooled[1].values()[c] + pooled[2].values()[c] + pooled[3].values()[c]) / 4.0;
    CHECK(all.values()[c] == doctest::Approx(expect).epsilon(1e-12));
  }

  const Tensor single = routing_vector(blocks, {0, 0, 1, 0});
  for (std::size_t c = 0; c < 3; ++c) CHECK(single.values()[c] == pooled[2].values()[c]);

  const Tensor two = routing_vector(blocks, {1, 0, 1, 0});
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(two.values()[c] ==
          doctest::Approx((pooled[0].values()[c] + pooled[2].values()[c]) / 2.0).epsilon(1e-12));

  CHECK_THROWS_AS(routing_vector(blocks, {0, 0, 0, 0}), ContractError);
}

TEST_CASE("corrupting reconstructed blocks never changes the routing vector") {
  Rng rng(5);
  std::vector<Tensor> blocks;
  for (std::size_t m = 0; m < 4; ++m) blocks.push_back(random_tensor({4, 6}, rng));
  const std::vector<std::uint8_t> mask{1, 0, 1, 0};
  const Tensor before = routing_vector(blocks, mask);

  std::vector<Tensor> corrupted = blocks;
  corrupted[1] = Tensor::filled({4, 6}, 1e9);
  corrupted[3] = random_tensor({4, 6}, rng);
  const Tensor after = routing_vector(corrupted, mask);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before.values()[i] == after.values()[i]);
}

TEST_CASE("zeroed gate yields the uniform distribution over 16 experts") {
  Rng rng(6);
  Router router(8, 16, 1.0, 4, rng);
  zero_values(router.gate.weight);
  zero_values(router.gate.bias);
  const Tensor pi = gate_distribution(router, random_tensor({8}, rng));
  for (double v : pi.values()) CHECK(v == doctest::Approx(0.0625).epsilon(1e-12));
}

TEST_CASE("gate argmax is invariant under routing temperature") {
  Rng rng(7);
  const Tensor v = random_tensor({8}, rng);
  std::size_t reference = 0;
  for (double temp : {0.1, 1.0, 10.0}) {
    Router router(8, 16, temp, 4, rng);
    Rng fresh(7000);
    router.gate = LinearLayer(8, 16, fresh);
    const Tensor pi = gate_distribution(router, v);
    std::size_t best = 0;
    for (std::size_t e = 1; e < 16; ++e)
      if (pi.values()[e] > pi.values()[best]) best = e;
    if (temp == 0.1)
      reference = best;
    else
      CHECK(best == reference);
    double sum = 0.0;
    for (double p : pi.values()) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("gate matches the closed-form softmax on fixed logits") {
  Rng rng(8);
  Router router(3, 4, 1.0, 2, rng);
  zero_values(router.gate.weight);
  router.gate.bias = Tensor::vector({2.0, 1.0, 0.0, -1.0}, true);
  const Tensor pi = gate_distribution(router, Tensor::vector({0.0, 0.0, 0.0}));
  CHECK(pi.values()[0] == doctest::Approx(0.6439).epsilon(1e-4));
  CHECK(pi.values()[1] == doctest::Approx(0.2369).epsilon(1e-4));
  CHECK(pi.values()[2] == doctest::Approx(0.0871).epsilon(1e-4));
  CHECK(pi.values()[3] == doctest::Approx(0.0321).epsilon(1e-4));
}

TEST_CASE("router construction validates temperature and top_k") {
  Rng rng(9);
  CHECK_THROWS_AS(Router(4, 8, 0.0, 2, rng), ParameterError);
  CHECK_THROWS_AS(Router(4, 8, 1.0, 0, rng), ParameterError);
  CHECK_THROWS_AS(Router(4, 8, 1.0, 9, rng), ParameterError);
}

TEST_CASE("top-k selection: k equal to expert count keeps the gate weights") {
  const Tensor pi = Tensor::vector({0.1, 0.4, 0.2, 0.3});
  const RoutingDecision d = select_topk(pi, 4);
  REQUIRE(d.selected.size() == 4);
  CHECK(d.selected == std::vector<std::size_t>{1, 3, 2, 0});
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(d.mix_weights.values()[i] == doctest::Approx(pi.values()[d.selected[i]]).epsilon(1e-12));
}

TEST_CASE("top-k selection: k=1 picks the argmax with weight one") {
  const RoutingDecision d = select_topk(Tensor::vector({0.2, 0.5, 0.3}), 1);
  CHECK(d.selected == std::vector<std::size_t>{1});
  CHECK(d.mix_weights.values()[0] == 1.0);
}

TEST_CASE("top-k renormalizes the selected gates") {
  const RoutingDecision d = select_topk(Tensor::vector({0.4, 0.3, 0.2, 0.1}), 2);
  CHECK(d.selected == std::vector<std::size_t>{0, 1});
  CHECK(d.mix_weights.values()[0] == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(d.mix_weights.values()[1] == doctest::Approx(3.0 / 7.0).epsilon(1e-12));

  double sum = 0.0;
  for (double w : d.mix_weights.values()) sum += w;
  CHECK(std::abs(sum - 1.0) <= 1e-12);

  CHECK_THROWS_AS(select_topk(Tensor::vector({0.5, 0.5}), 0), ParameterError);
  CHECK_THROWS_AS(select_topk(Tensor::vector({0.5, 0.5}), 3), ParameterError);
}

TEST_CASE("top-k ties break toward the lower expert index") {
  const RoutingDecision d = select_topk(Tensor::vector({0.25, 0.25, 0.25, 0.25}), 2);
  CHECK(d.selected == std::vector<std::size_t>{0, 1});
}

TEST_CASE("literal-sum mode mixes with unit weights") {
  const RoutingDecision d = select_topk(Tensor::vector({0.4, 0.3, 0.2, 0.1}), 2, true);
  CHECK(d.mix_weights.values()[0] == 1.0);
  CHECK(d.mix_weights.values()[1] == 1.0);
}

TEST_CASE("identical experts make the mixture selection-independent") {
  Rng rng(10);
  std::vector<Expert> experts;
  Expert proto(6, rng);
  for (std::size_t e = 0; e < 4; ++e) experts.push_back(proto);

  std::vector<Tensor> blocks{random_tensor({3, 6}, rng), random_tensor({3, 6}, rng)};
  const RoutingDecision d1 = select_topk(Tensor::vector({0.4, 0.3, 0.2, 0.1}), 2);
  const RoutingDecision d2 = select_topk(Tensor::vector({0.1, 0.2, 0.3, 0.4}), 2);
  const auto p1 = expert_mix(d1, experts, blocks, eval_context());
  const auto p2 = expert_mix(d2, experts, blocks, eval_context());
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t c = 0; c < 6; ++c)
      CHECK(p1[m].values()[c] == doctest::Approx(p2[m].values()[c]).epsilon(1e-12));
}

TEST_CASE("k=1 mixture equals the argmax expert applied to each block") {
  Rng rng(11);
  std::vector<Expert> experts;
  for (std::size_t e = 0; e < 3; ++e) experts.emplace_back(5, rng);
  std::vector<Tensor> blocks{random_tensor({2, 5}, rng)};
  const RoutingDecision d = select_topk(Tensor::vector({0.2, 0.7, 0.1}), 1);
  const auto fused = expert_mix(d, experts, blocks, eval_context());
  const Tensor direct = experts[1].forward(blocks[0], eval_context());
  for (std::size_t c = 0; c < 5; ++c) CHECK(fused[0].values()[c] == direct.values()[c]);
}

TEST_CASE("k=2 mixture matches the two-term weighted sum oracle") {
  Rng rng(12);
  std::vector<Expert> experts;
  for (std::size_t e = 0; e < 4; ++e) experts.emplace_back(4, rng);
  std::vector<Tensor> blocks{random_tensor({3, 4}, rng)};
  const Tensor pi = Tensor::vector({0.5, 0.1, 0.3, 0.1});
  const RoutingDecision d = select_topk(pi, 2);
  REQUIRE(d.selected == std::vector<std::size_t>{0, 2});

  const auto fused = expert_mix(d, experts, blocks, eval_context());
  const Tensor e0 = experts[0].forward(blocks[0], eval_context());
  const Tensor e2 = experts[2].forward(blocks[0], eval_context());
  const double w0 = 0.5 / 0.8, w2 = 0.3 / 0.8;
  for (std::size_t c = 0; c < 4; ++c)
    CHECK(fused[0].values()[c] ==
          doctest::Approx(w0 * e0.values()[c] + w2 * e2.values()[c]).epsilon(1e-12));
}

TEST_CASE("exactly k distinct experts execute per subject") {
  Rng rng(13);
  std::vector<Expert> experts;
  for (std::size_t e = 0; e < 16; ++e) experts.emplace_back(4, rng);
  std::vector<Tensor> blocks;
  for (std::size_t m = 0; m < 4; ++m) blocks.push_back(random_tensor({2, 4}, rng));

  Router router(4, 16, 1.0, 4, rng);
  const Tensor pi = gate_distribution(router, routing_vector(blocks, {1, 1, 1, 1}));
  const RoutingDecision d = select_topk(pi, 4);
  expert_mix(d, experts, blocks, eval_context());

  std::size_t executed = 0;
  for (std::size_t e = 0; e < 16; ++e) {
    const bool selected =
        std::find(d.selected.begin(), d.selected.end(), e) != d.selected.end();
    if (experts[e].forward_calls > 0) {
      ++executed;
      CHECK(selected);
      CHECK(experts[e].forward_calls == blocks.size());
    } else {
      CHECK(!selected);
    }
  }
  CHECK(executed == 4);
}

TEST_CASE("gradients flow through routing, gating and expert mixing") {
  Rng rng(14);
  std::vector<Expert> experts;
  for (std::size_t e = 0; e < 4; ++e) experts.emplace_back(4, rng);
  Router router(4, 4, 1.0, 2, rng);
  Tensor block_a = random_tensor({2, 4}, rng);
  Tensor block_b = random_tensor({2, 4}, rng);
  block_a.set_requires_grad(true);
  block_b.set_requires_grad(true);

  ParamList params{{"block_a", block_a}, {"block_b", block_b}};
  router.collect(params, "router");
  for (std::size_t e = 0; e < 4; ++e) experts[e].collect(params, "expert" + std::to_string(e));

  auto f = [&]() {
    std::vector<Tensor> blocks{block_a, block_b};
    const Tensor v = routing_vector(blocks, {1, 1});
    const Tensor pi = gate_distribution(router, v);
    const RoutingDecision d = select_topk(pi, 2);
    const auto fused = expert_mix(d, experts, blocks, eval_context());
    return mean_all(mul(add(fused[0], fused[1]), v));
  };
  CHECK(check_gradients(f, params).max_rel_error < 1e-4);
}

TEST_CASE("load balance loss vanishes on a uniform batch distribution") {
  const std::vector<Tensor> uniform{Tensor::filled({4}, 0.25), Tensor::filled({4}, 0.25)};
  CHECK(load_balance_loss(uniform).value() == doctest::Approx(0.0).epsilon(1e-15));

  const std::vector<Tensor> skewed{Tensor::vector({1.0, 0.0, 0.0, 0.0})};
  CHECK(load_balance_loss(skewed).value() > 0.0);
}
