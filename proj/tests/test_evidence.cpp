#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cerd/evidence.hpp"
#include "cerd/gradcheck.hpp"

using namespace cerd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  fill_normal(t, 0.0, 1.0, rng);
  return t;
}

void make_phi_identity(EvidenceHead& head) {
  zero_values(head.phi.out_proj.weight);
  zero_values(head.phi.out_proj.bias);
}

std::vector<Tensor> random_features(std::size_t modalities, std::size_t hidden, Rng& rng) {
  std::vector<Tensor> f;
  for (std::size_t m = 0; m < modalities; ++m) f.push_back(random_tensor({hidden}, rng));
  return f;
}

EvidenceReport run_head(const EvidenceHead& head, const std::vector<Tensor>& fused,
                        const std::string& id = "S1") {
  const auto d = head.decompose(fused);
  const Tensor w = head.modality_weights(d.cues);
  return head.report(head.attribute(d, w), id);
}

}  // namespace

TEST_CASE("identical features with identity extractor leave only the psi bias") {
  Rng rng(1);
  EvidenceHead head(4, 6, 3, 2, 1.0, rng);
  make_phi_identity(head);
  for (std::size_t m = 0; m < 4; ++m) fill_normal(head.psi[m].bias, 0.0, 1.0, rng);

  const Tensor proto = random_tensor({6}, rng);
  const std::vector<Tensor> fused(4, proto);
  const auto d = head.decompose(fused);

  // Shared summary equals the common row; every residual is zero, so each
  // cue collapses to its projection bias.
  for (std::size_t c = 0; c < 6; ++c)
    CHECK(d.shared.values()[c] == doctest::Approx(proto.values()[c]).epsilon(1e-12));
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t c = 0; c < 6; ++c)
      CHECK(d.cues[m].values()[c] == doctest::Approx(head.psi[m].bias.values()[c]).epsilon(1e-12));
}

TEST_CASE("with identity extractor the residuals of the mean sum to zero") {
  Rng rng(2);
  EvidenceHead head(4, 5, 3, 1, 1.0, rng);
  make_phi_identity(head);
  for (std::size_t m = 0; m < 4; ++m) {
    head.psi[m].weight = Tensor::identity(5).set_requires_grad(true);
    zero_values(head.psi[m].bias);
  }
  const auto fused = random_features(4, 5, rng);
  const auto d = head.decompose(fused);
  for (std::size_t c = 0; c < 5; ++c) {
    double acc = 0.0;
    for (std::size_t m = 0; m < 4; ++m) acc += d.cues[m].values()[c];
    CHECK(std::abs(acc) < 1e-12);
  }
}

TEST_CASE("decompose matches a stepwise oracle on a hand-sized case") {
  Rng rng(3);
  const std::size_t M = 2, D = 3;
  EvidenceHead head(M, D, 2, 1, 1.0, rng);
  const auto fused = random_features(M, D, rng);

  auto affine_vec = [](const std::vector<double>& x, const LinearLayer& lin) {
    std::vector<double> y(lin.out_features(), 0.0);
    for (std::size_t o = 0; o < lin.out_features(); ++o) {
      double acc = lin.bias.values()[o];
      for (std::size_t i = 0; i < lin.in_features(); ++i) acc += lin.weight.at(o, i) * x[i];
      y[o] = acc;
    }
    return y;
  };

  // Stack -> single-head self-attention -> residual -> mean -> residual
  // projection.
  std::vector<double> stacked(M * D);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < D; ++c) stacked[m * D + c] = fused[m].values()[c];

  auto affine_rows = [&](const std::vector<double>& x, std::size_t rows, const LinearLayer& lin) {
    std::vector<double> y(rows * lin.out_features());
    for (std::size_t r = 0; r < rows; ++r) {
      const std::vector<double> row(x.begin() + r * lin.in_features(),
                                    x.begin() + (r + 1) * lin.in_features());
      const auto out = affine_vec(row, lin);
      std::copy(out.begin(), out.end(), y.begin() + r * lin.out_features());
    }
    return y;
  };

  const auto q = affine_rows(stacked, M, head.phi.q_proj);
  const auto k = affine_rows(stacked, M, head.phi.k_proj);
  const auto v = affine_rows(stacked, M, head.phi.v_proj);
  std::vector<double> mixed(M * D, 0.0);
  for (std::size_t r = 0; r < M; ++r) {
    std::vector<double> scores(M, 0.0);
    for (std::size_t l = 0; l < M; ++l)
      for (std::size_t c = 0; c < D; ++c) scores[l] += q[r * D + c] * k[l * D + c] / std::sqrt(double(D));
    const double mx = *std::max_element(scores.begin(), scores.end());
    double denom = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      denom += s;
    }
    for (std::size_t l = 0; l < M; ++l)
      for (std::size_t c = 0; c < D; ++c) mixed[r * D + c] += scores[l] / denom * v[l * D + c];
  }
  auto refined = affine_rows(mixed, M, head.phi.out_proj);
  for (std::size_t i = 0; i < refined.size(); ++i) refined[i] += stacked[i];

  std::vector<double> shared(D, 0.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < D; ++c) shared[c] += refined[m * D + c] / double(M);

  const auto d = head.decompose(fused);
  for (std::size_t c = 0; c < D; ++c)
    CHECK(d.shared.values()[c] == doctest::Approx(shared[c]).epsilon(1e-12));
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<double> residual(D);
    for (std::size_t c = 0; c < D; ++c) residual[c] = refined[m * D + c] - shared[c];
    const auto cue = affine_vec(residual, head.psi[m]);
    for (std::size_t c = 0; c < D; ++c)
      CHECK(d.cues[m].values()[c] == doctest::Approx(cue[c]).epsilon(1e-12));
  }
}

TEST_CASE("zero gate network gives uniform modality weights") {
  Rng rng(4);
  EvidenceHead head(4, 5, 3, 1, 1.0, rng);
  zero_values(head.gate2.weight);
  zero_values(head.gate2.bias);
  const auto fused = random_features(4, 5, rng);
  const auto d = head.decompose(fused);
  const Tensor w = head.modality_weights(d.cues);
  for (double v : w.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("modality weight argmax is invariant under temperature rescaling") {
  Rng rng(5);
  const auto fused = random_features(4, 5, rng);
  std::size_t reference = 0;
  bool first = true;
  for (double tau : {0.25, 1.0, 4.0}) {
    Rng head_rng(500);
    EvidenceHead head(4, 5, 3, 1, tau, head_rng);
    const auto d = head.decompose(fused);
    const Tensor w = head.modality_weights(d.cues);
    std::size_t best = 0;
    for (std::size_t m = 1; m < 4; ++m)
      if (w.values()[m] > w.values()[best]) best = m;
    if (first) {
      reference = best;
      first = false;
    } else {
      CHECK(best == reference);
    }
    double sum = 0.0;
    for (double v : w.values()) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("fixed gate scores match the closed-form softmax") {
  Rng rng(6);
  EvidenceHead head(4, 5, 3, 1, 1.0, rng);
  zero_values(head.gate2.weight);
  head.gate2.bias = Tensor::vector({1.0, 1.0, 0.0, 0.0}, true);
  const auto fused = random_features(4, 5, rng);
  const Tensor w = head.modality_weights(head.decompose(fused).cues);
  CHECK(w.values()[0] == doctest::Approx(0.3655).epsilon(2e-4));
  CHECK(w.values()[1] == doctest::Approx(0.3655).epsilon(2e-4));
  CHECK(w.values()[2] == doctest::Approx(0.1345).epsilon(2e-4));
  CHECK(w.values()[3] == doctest::Approx(0.1345).epsilon(2e-4));
}

TEST_CASE("zeroed modality heads reduce the logits to the shared head") {
  Rng rng(7);
  EvidenceHead head(3, 4, 2, 1, 1.0, rng);
  for (auto& h : head.modality_heads) {
    zero_values(h.weight);
    zero_values(h.bias);
  }
  const auto fused = random_features(3, 4, rng);
  const auto d = head.decompose(fused);
  const auto attribution = head.attribute(d, head.modality_weights(d.cues));
  const Tensor direct = head.shared_head.forward(d.shared);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(attribution.logits.values()[c] == doctest::Approx(direct.values()[c]).epsilon(1e-12));
    for (const Tensor& contrib : attribution.contributions) CHECK(contrib.values()[c] == 0.0);
  }
}

TEST_CASE("single nonzero modality head carries the whole logit vector") {
  Rng rng(8);
  EvidenceHead head(3, 4, 2, 1, 1.0, rng);
  zero_values(head.shared_head.weight);
  zero_values(head.shared_head.bias);
  for (std::size_t m = 1; m < 3; ++m) {
    zero_values(head.modality_heads[m].weight);
    zero_values(head.modality_heads[m].bias);
  }
  const auto fused = random_features(3, 4, rng);
  const auto d = head.decompose(fused);
  const auto a = head.attribute(d, head.modality_weights(d.cues));
  for (std::size_t c = 0; c < 2; ++c)
    CHECK(a.logits.values()[c] == doctest::Approx(a.contributions[0].values()[c]).epsilon(1e-12));
}

TEST_CASE("additive identity holds to 1e-9 over many random heads") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    EvidenceHead head(4, 6, 3, 2, 1.0, rng);
    const EvidenceReport r = run_head(head, random_features(4, 6, rng));
    CHECK(r.additive_gap() < 1e-9);
    double wsum = 0.0;
    for (double w : r.weights) wsum += w;
    CHECK(std::abs(wsum - 1.0) <= 1e-12);
  }
}

TEST_CASE("prediction is the argmax with ties to the lower class") {
  EvidenceReport r;
  r.logits = {0.5, 0.5, 0.1};
  r.shared = {0.5, 0.5, 0.1};
  r.contributions = {};
  r.weights = {};
  // report() computes the argmax; emulate its rule directly here.
  std::size_t best = 0;
  for (std::size_t c = 1; c < r.logits.size(); ++c)
    if (r.logits[c] > r.logits[best]) best = c;
  CHECK(best == 0);
}

TEST_CASE("importance summary of identical reports equals the single report") {
  Rng rng(10);
  EvidenceHead head(4, 5, 3, 1, 1.0, rng);
  const EvidenceReport r = run_head(head, random_features(4, 5, rng));
  const std::vector<EvidenceReport> reports(7, r);
  const auto summary = importance_summary(reports, {"A", "B", "C", "D"}, {"c0", "c1", "c2"});
  for (std::size_t m = 0; m < 4; ++m) {
    CHECK(summary.mean_weight[m] == doctest::Approx(r.weights[m]).epsilon(1e-12));
    double l1 = 0.0;
    for (double c : r.contributions[m]) l1 += std::abs(c);
    CHECK(summary.mean_abs_contribution[m] == doctest::Approx(l1).epsilon(1e-12));
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(summary.mean_signed[m][c] == doctest::Approx(r.contributions[m][c]).epsilon(1e-12));
  }
}

TEST_CASE("summary mean weights sum to one") {
  Rng rng(11);
  EvidenceHead head(4, 5, 3, 1, 1.0, rng);
  std::vector<EvidenceReport> reports;
  for (int i = 0; i < 20; ++i) reports.push_back(run_head(head, random_features(4, 5, rng)));
  const auto summary = importance_summary(reports, {"A", "B", "C", "D"}, {"c0", "c1", "c2"});
  double sum = 0.0;
  for (double w : summary.mean_weight) sum += w;
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  CHECK_THROWS_AS(importance_summary({}, {"A"}, {"c0"}), ContractError);
}

TEST_CASE("summary csv carries the pinned header") {
  Rng rng(12);
  EvidenceHead head(2, 4, 2, 1, 1.0, rng);
  const EvidenceReport r = run_head(head, random_features(2, 4, rng));
  const auto summary = importance_summary({r}, {"A", "B"}, {"healthy", "sick"});
  const std::string csv = summary.to_csv();
  CHECK(csv.rfind("modality,mean_weight,mean_abs_contribution,mean_signed_healthy,mean_signed_sick\n",
                  0) == 0);
  CHECK(csv.find("\nA,") != std::string::npos);
}

TEST_CASE("evidence head gradients pass finite-difference checks") {
  Rng rng(13);
  EvidenceHead head(3, 4, 2, 2, 1.0, rng);
  std::vector<Tensor> fused = random_features(3, 4, rng);
  ParamList params;
  for (std::size_t m = 0; m < 3; ++m) {
    fused[m].set_requires_grad(true);
    params.push_back({"fused" + std::to_string(m), fused[m]});
  }
  head.collect(params, "head");
  auto f = [&]() {
    const auto d = head.decompose(fused);
    const auto a = head.attribute(d, head.modality_weights(d.cues));
    return cross_entropy(a.logits, 1);
  };
  CHECK(check_gradients(f, params).max_rel_error < 1e-4);
}
