#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cerd/metrics.hpp"
#include "cerd/random.hpp"

using namespace cerd;

namespace {

// Brute-force oracles, kept deliberately dumb.

double acc_oracle(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& pred) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == pred[i];
  return double(hit) / double(labels.size());
}

double f1_oracle(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& pred,
                 std::size_t classes) {
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (pred[i] == c && labels[i] == c) tp += 1;
      if (pred[i] == c && labels[i] != c) fp += 1;
      if (pred[i] != c && labels[i] == c) fn += 1;
    }
    total += (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / double(classes);
}

// Pairwise comparison AUC: every (positive, negative) pair contributes 1 for
// a correct ordering, 1/2 for a tie.
double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<bool>& pos) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / double(pairs);
}

double macro_auc_oracle(const std::vector<std::size_t>& labels, const std::vector<double>& scores,
                        std::size_t classes) {
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t npos = 0;
    for (std::size_t l : labels) npos += l == c;
    if (npos == 0 || npos == labels.size()) continue;
    std::vector<double> col(labels.size());
    std::vector<bool> pos(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores[i * classes + c];
      pos[i] = labels[i] == c;
    }
    total += auc_pairwise_oracle(col, pos);
    ++used;
  }
  return total / double(used);
}

}  // namespace

TEST_CASE("perfect predictions score 1.0 on every metric") {
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  std::vector<double> scores(labels.size() * 3, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) scores[i * 3 + labels[i]] = 1.0;
  const EvalMetrics m = compute_metrics(labels, scores, 3);
  CHECK(m.accuracy == 1.0);
  CHECK(m.macro_f1 == 1.0);
  CHECK(m.macro_auc == 1.0);
}

TEST_CASE("constant scores give AUC one half in every class") {
  const std::vector<std::size_t> labels{0, 1, 2, 1, 0, 2, 1};
  const std::vector<double> scores(labels.size() * 3, 0.25);
  std::vector<std::size_t> skipped;
  CHECK(macro_ovr_auc(labels, scores, 3, &skipped) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(skipped.empty());
}

TEST_CASE("six-subject hand case matches the pairwise AUC oracle") {
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
  const std::vector<double> scores{
      0.7, 0.2, 0.1,  //
      0.4, 0.4, 0.2,  //
      0.3, 0.5, 0.2,  //
      0.2, 0.5, 0.3,  //
      0.1, 0.3, 0.6,  //
      0.3, 0.3, 0.4,  //
  };
  const double mine = macro_ovr_auc(labels, scores, 3);
  const double oracle = macro_auc_oracle(labels, scores, 3);
  CHECK(mine == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("a class missing from the split is excluded with a report") {
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  std::vector<double> scores{
      0.6, 0.3, 0.1,  //
      0.5, 0.2, 0.3,  //
      0.2, 0.7, 0.1,  //
      0.4, 0.5, 0.1,  //
  };
  std::vector<std::size_t> skipped;
  const double auc = macro_ovr_auc(labels, scores, 3, &skipped);
  CHECK(skipped == std::vector<std::size_t>{2});
  CHECK(auc == doctest::Approx(macro_auc_oracle(labels, scores, 3)).epsilon(1e-12));
}

TEST_CASE("degenerate single-class split throws") {
  const std::vector<std::size_t> labels{1, 1, 1};
  const std::vector<double> scores(9, 0.3);
  CHECK_THROWS_AS(macro_ovr_auc(labels, scores, 3), ContractError);
}

TEST_CASE("argmax predictions break ties toward the lower class") {
  const std::vector<double> scores{0.4, 0.4, 0.2};
  const auto pred = argmax_predictions(scores, 1, 3);
  CHECK(pred[0] == 0);
}

TEST_CASE("metrics agree with brute-force oracles on all small label configurations") {
  // Exhaustive over label assignments for n = 2..8 subjects and 3 classes;
  // scores drawn from a coarse grid so ties are frequent.
  Rng rng(2024);
  const std::vector<double> grid{0.0, 0.25, 0.5, 0.75};
  for (std::size_t n = 2; n <= 8; ++n) {
    std::size_t configs = 1;
    for (std::size_t i = 0; i < n; ++i) configs *= 3;
    for (std::size_t code = 0; code < configs; ++code) {
      std::vector<std::size_t> labels(n);
      std::size_t rest = code;
      for (std::size_t i = 0; i < n; ++i) {
        labels[i] = rest % 3;
        rest /= 3;
      }
      std::vector<double> scores(n * 3);
      for (double& s : scores) s = grid[rng.integer(grid.size())];

      const auto pred = argmax_predictions(scores, n, 3);
      CHECK(accuracy(labels, pred) == doctest::Approx(acc_oracle(labels, pred)).epsilon(1e-12));
      CHECK(macro_f1(labels, pred, 3) == doctest::Approx(f1_oracle(labels, pred, 3)).epsilon(1e-12));

      bool has_both = false;
      for (std::size_t c = 0; c < 3 && !has_both; ++c) {
        std::size_t npos = 0;
        for (std::size_t l : labels) npos += l == c;
        has_both = npos > 0 && npos < n;
      }
      if (has_both)
        CHECK(macro_ovr_auc(labels, scores, 3) ==
              doctest::Approx(macro_auc_oracle(labels, scores, 3)).epsilon(1e-12));
    }
  }
}
