#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "gridstab/error.hpp"
#include "gridstab/random.hpp"
#include "gridstab/tree.hpp"

using namespace gridstab;
using namespace gridstab::trees;

namespace {

Matrix make_matrix(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t r = 0;
  for (const auto& row : rows) {
    std::size_t c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (auto& v : m.values) v = rng.uniform(-1.0, 1.0);
  return m;
}

double gini_weighted(double n0, double n1) {
  const double n = n0 + n1;
  if (n == 0) return 0.0;
  return n * (1.0 - (n0 / n) * (n0 / n) - (n1 / n) * (n1 / n));
}

struct OracleSplit {
  double gain = -1.0;
  std::vector<std::pair<int, double>> argmax;  // every (feature, threshold) reaching the best gain
};

// Exhaustive search: every feature, every midpoint between adjacent distinct values.
OracleSplit exhaustive_split(const Matrix& x, const std::vector<int>& y) {
  OracleSplit best;
  double n0 = 0, n1 = 0;
  for (int v : y) (v ? n1 : n0) += 1;
  const double parent = gini_weighted(n0, n1);
  std::vector<std::tuple<int, double, double>> all;
  for (std::size_t f = 0; f < x.cols; ++f) {
    std::vector<double> vals;
    for (std::size_t r = 0; r < x.rows; ++r) vals.push_back(x(r, f));
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
      const double thr = 0.5 * (vals[k] + vals[k + 1]);
      double l0 = 0, l1 = 0, r0 = 0, r1 = 0;
      for (std::size_t r = 0; r < x.rows; ++r) {
        const bool left = x(r, f) <= thr;
        (left ? (y[r] ? l1 : l0) : (y[r] ? r1 : r0)) += 1;
      }
      const double gain = parent - gini_weighted(l0, l1) - gini_weighted(r0, r1);
      all.emplace_back(static_cast<int>(f), thr, gain);
      best.gain = std::max(best.gain, gain);
    }
  }
  for (const auto& [f, thr, gain] : all) {
    if (std::abs(gain - best.gain) < 1e-9) best.argmax.emplace_back(f, thr);
  }
  return best;
}

double accuracy(const DecisionTree& tree, const Matrix& x, const std::vector<int>& y) {
  double ok = 0;
  for (std::size_t r = 0; r < x.rows; ++r) ok += argmax_class(predict_tree(tree, x.row(r))) == y[r];
  return ok / static_cast<double>(x.rows);
}

}  // namespace

TEST_SUITE("tree_models") {
  TEST_CASE("pure labels give a single leaf with probability 1") {
    Rng rng(1);
    const Matrix x = random_matrix(rng, 10, 3);
    const std::vector<int> y(10, 1);
    const auto tree = fit_tree(x, y, TreeParams{});
    CHECK(tree.nodes().size() == 1);
    const auto p = predict_tree(tree, x.row(0));
    CHECK(p[0] == 0.0);
    CHECK(p[1] == 1.0);
  }

  TEST_CASE("XOR is solved exactly at depth 2") {
    const Matrix x = make_matrix({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    const std::vector<int> y = {0, 1, 1, 0};

    // Brute force: some pair of axis-aligned splits classifies all four points.
    bool exists = false;
    for (int f1 = 0; f1 < 2 && !exists; ++f1) {
      for (int f2 = 0; f2 < 2 && !exists; ++f2) {
        for (int f3 = 0; f3 < 2 && !exists; ++f3) {
          // Root on f1 at 0.5, children on f2 / f3 at 0.5, leaves take the majority.
          int correct = 0;
          for (int side = 0; side < 2; ++side) {
            const int fc = side == 0 ? f2 : f3;
            int counts[2][2] = {};
            for (int i = 0; i < 4; ++i) {
              if ((x(i, f1) > 0.5) != side) continue;
              counts[x(i, fc) > 0.5][y[i]]++;
            }
            for (auto& c : counts) correct += std::max(c[0], c[1]);
          }
          exists = correct == 4;
        }
      }
    }
    REQUIRE(exists);

    TreeParams params;
    params.max_depth = 2;
    const auto tree = fit_tree(x, y, params);
    CHECK(tree.depth() == 2);
    CHECK(accuracy(tree, x, y) == 1.0);
  }

  TEST_CASE("root split matches the exhaustive-search oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = trial == 0 ? 20 : 2 + rng.below(49);
      const std::size_t d = trial == 0 ? 2 : 1 + rng.below(3);
      Matrix x = random_matrix(rng, n, d);
      // A few duplicated values so that equal-value runs are exercised.
      for (std::size_t r = 0; r + 1 < n; r += 5) x(r + 1, 0) = x(r, 0);
      std::vector<int> y(n);
      for (auto& v : y) v = rng.bernoulli(0.4) ? 1 : 0;
      if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;

      TreeParams params;
      params.max_depth = 1;
      const auto tree = fit_tree(x, y, params);
      const auto oracle = exhaustive_split(x, y);
      if (oracle.argmax.empty()) {
        CHECK(tree.nodes().size() == 1);
        continue;
      }
      const auto& root = tree.nodes()[0];
      REQUIRE(!root.is_leaf());
      CHECK(root.impurity_decrease == doctest::Approx(std::max(0.0, oracle.gain)).epsilon(1e-9));
      const bool among_best = std::any_of(oracle.argmax.begin(), oracle.argmax.end(), [&](const auto& s) {
        return s.first == root.feature && std::abs(s.second - root.threshold) < 1e-12;
      });
      CHECK(among_best);
    }
  }

  TEST_CASE("thresholds are midpoints of adjacent observed values") {
    Rng rng(4);
    const Matrix x = random_matrix(rng, 60, 3);
    std::vector<int> y(60);
    for (std::size_t r = 0; r < 60; ++r) y[r] = x(r, 0) + 0.3 * x(r, 2) > 0 ? 1 : 0;
    const auto tree = fit_tree(x, y, TreeParams{});
    // Walk the tree carrying the rows that reach each node.
    std::function<void(int, std::vector<std::size_t>)> visit = [&](int id, std::vector<std::size_t> rows) {
      const auto& node = tree.nodes()[static_cast<std::size_t>(id)];
      if (node.is_leaf()) {
        CHECK(node.counts[0] + node.counts[1] > 0);
        return;
      }
      const auto f = static_cast<std::size_t>(node.feature);
      std::vector<double> vals;
      for (auto r : rows) vals.push_back(x(r, f));
      std::sort(vals.begin(), vals.end());
      bool found = false;
      for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
        found |= vals[k] < vals[k + 1] && std::abs(0.5 * (vals[k] + vals[k + 1]) - node.threshold) < 1e-12;
      }
      CHECK(found);
      std::vector<std::size_t> left, right;
      for (auto r : rows) (x(r, f) <= node.threshold ? left : right).push_back(r);
      visit(node.left, left);
      visit(node.right, right);
    };
    std::vector<std::size_t> all(x.rows);
    std::iota(all.begin(), all.end(), 0);
    visit(0, all);
    CHECK(accuracy(tree, x, y) == 1.0);
  }

  TEST_CASE("fit_tree errors") {
    CHECK_THROWS_AS(fit_tree(Matrix(0, 2), std::vector<int>{}, TreeParams{}), Error);
    CHECK_THROWS_AS(fit_tree(Matrix(3, 2), std::vector<int>{0, 1}, TreeParams{}), Error);
    const auto tree = fit_tree(make_matrix({{0, 0}, {1, 1}}), std::vector<int>{0, 1}, TreeParams{});
    const std::vector<double> wrong = {1.0, 2.0, 3.0};
    try {
      predict_tree(tree, wrong);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeMismatch);
    }
  }

  TEST_CASE("leaf probabilities are class frequencies") {
    TreeNode leaf;
    leaf.counts = {3.0, 1.0};
    leaf.weight = 4.0;
    const DecisionTree tree(Task::Classification, 2, 0, {leaf});
    const std::vector<double> x = {0.0, 0.0};
    const auto p = predict_tree(tree, x);
    CHECK(p[0] == 0.75);
    CHECK(p[1] == 0.25);
  }

  TEST_CASE("voting examples") {
    CHECK(forest_hard_vote(std::vector<int>{1, 1, 0}) == 1);
    CHECK(forest_hard_vote(std::vector<int>{0}) == 0);
    CHECK(forest_hard_vote(std::vector<int>{0, 1}) == 0);
    CHECK(forest_hard_vote(std::vector<int>{1, 0}) == 0);

    const auto two = forest_soft_vote(std::vector<std::vector<double>>{{0.2, 0.8}, {0.6, 0.4}});
    CHECK(two[0] == doctest::Approx(0.4));
    CHECK(two[1] == doctest::Approx(0.6));
    const auto one = forest_soft_vote(std::vector<std::vector<double>>{{0.3, 0.7}});
    CHECK(one == std::vector<double>{0.3, 0.7});
    const auto same = forest_soft_vote(std::vector<std::vector<double>>{{0.1, 0.9}, {0.1, 0.9}, {0.1, 0.9}});
    CHECK(same[0] == doctest::Approx(0.1));
    CHECK(same[1] == doctest::Approx(0.9));

    CHECK(argmax_class(std::vector<double>{0.4, 0.6}) == 1);
    CHECK(argmax_class(std::vector<double>{0.5, 0.5}) == 0);
    CHECK(argmax_class(std::vector<double>{1.0, 0.0}) == 0);
  }

  TEST_CASE("voting errors") {
    auto code = [](const std::function<void()>& f) {
      try {
        f();
      } catch (const Error& e) {
        return e.code();
      }
      return ErrorCode::IoFailure;
    };
    CHECK(code([] { forest_hard_vote(std::vector<int>{}); }) == ErrorCode::EmptyInput);
    CHECK(code([] { forest_soft_vote(std::vector<std::vector<double>>{}); }) == ErrorCode::EmptyInput);
    CHECK(code([] { forest_soft_vote(std::vector<std::vector<double>>{{0.5, 0.6}}); }) == ErrorCode::NotNormalized);
    CHECK(code([] { argmax_class(std::vector<double>{}); }) == ErrorCode::EmptyInput);
  }

  TEST_CASE("soft vote is permutation invariant and normalized") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<std::vector<double>> probs(1 + rng.below(7));
      for (auto& p : probs) {
        const double a = rng.uniform();
        p = {a, 1.0 - a};
      }
      const auto base = forest_soft_vote(probs);
      CHECK(std::abs(base[0] + base[1] - 1.0) < 1e-9);
      rng.shuffle(std::span(probs));
      const auto shuffled = forest_soft_vote(probs);
      CHECK(std::abs(shuffled[0] - base[0]) < 1e-12);
    }
  }

  TEST_CASE("one tree without bootstrap equals fit_tree") {
    Rng rng(7);
    const Matrix x = random_matrix(rng, 80, 4);
    std::vector<int> y(80);
    for (std::size_t r = 0; r < 80; ++r) y[r] = x(r, 1) * x(r, 3) > 0 ? 1 : 0;
    ForestParams fp;
    fp.n_trees = 1;
    fp.max_depth = -1;
    fp.features_per_split = 0;
    fp.bootstrap = false;
    const auto forest = fit_forest(x, y, fp);
    const auto tree = fit_tree(x, y, TreeParams{});
    Rng probe(8);
    for (int i = 0; i < 200; ++i) {
      const std::vector<double> q = {probe.uniform(-1, 1), probe.uniform(-1, 1), probe.uniform(-1, 1),
                                     probe.uniform(-1, 1)};
      CHECK(predict_forest(forest, q) == predict_tree(tree, q));
    }
  }

  TEST_CASE("forest prediction composes per-tree predictions") {
    Rng rng(9);
    const Matrix x = random_matrix(rng, 120, 3);
    std::vector<int> y(120);
    for (std::size_t r = 0; r < 120; ++r) y[r] = x(r, 0) + x(r, 1) > 0.2 ? 1 : 0;
    ForestParams fp;
    fp.n_trees = 9;
    fp.max_depth = 4;
    fp.features_per_split = 2;
    fp.seed = 3;
    auto forest = fit_forest(x, y, fp);
    for (std::size_t r = 0; r < 20; ++r) {
      std::vector<std::vector<double>> per_tree;
      std::vector<int> labels;
      for (const auto& t : forest.trees) {
        per_tree.push_back(predict_tree(t, x.row(r)));
        labels.push_back(argmax_class(per_tree.back()));
      }
      const auto soft = predict_forest(forest, x.row(r));
      const auto expected = forest_soft_vote(per_tree);
      CHECK(std::abs(soft[0] - expected[0]) < 1e-12);
      forest.params.voting = Voting::Hard;
      CHECK(predict_forest_label(forest, x.row(r)) == forest_hard_vote(labels));
      forest.params.voting = Voting::Soft;
    }
  }

  TEST_CASE("forest of identical trees predicts like a single tree") {
    Rng rng(10);
    const Matrix x = random_matrix(rng, 50, 2);
    std::vector<int> y(50);
    for (std::size_t r = 0; r < 50; ++r) y[r] = x(r, 0) > 0 ? 1 : 0;
    ForestParams fp;
    fp.n_trees = 5;
    fp.features_per_split = 0;
    fp.bootstrap = false;
    fp.max_depth = -1;
    auto forest = fit_forest(x, y, fp);
    const auto tree = fit_tree(x, y, TreeParams{});
    for (std::size_t r = 0; r < 50; ++r) {
      forest.params.voting = Voting::Hard;
      CHECK(predict_forest_label(forest, x.row(r)) == argmax_class(predict_tree(tree, x.row(r))));
    }
  }

  TEST_CASE("forest fitting is deterministic per seed") {
    Rng rng(11);
    const Matrix x = random_matrix(rng, 100, 5);
    std::vector<int> y(100);
    for (std::size_t r = 0; r < 100; ++r) y[r] = x(r, 2) > 0.1 ? 1 : 0;
    ForestParams fp;
    fp.n_trees = 7;
    fp.seed = 99;
    CHECK(fit_forest(x, y, fp) == fit_forest(x, y, fp));
    auto other = fp;
    other.seed = 100;
    CHECK(!(fit_forest(x, y, other) == fit_forest(x, y, fp)));
    fp.n_trees = 0;
    CHECK_THROWS_AS(fit_forest(x, y, fp), Error);
  }

  TEST_CASE("feature importance") {
    Rng rng(12);
    const Matrix x = random_matrix(rng, 300, 12);
    std::vector<int> y(300);
    for (std::size_t r = 0; r < 300; ++r) y[r] = x(r, 0) > 0 ? 1 : 0;
    ForestParams fp;
    fp.n_trees = 20;
    fp.seed = 1;
    const auto imp = forest_feature_importance(fit_forest(x, y, fp));
    CHECK(!imp.degenerate);
    CHECK(std::accumulate(imp.scores.begin(), imp.scores.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::max_element(imp.scores.begin(), imp.scores.end()) - imp.scores.begin() == 0);

    fp.max_depth = 0;
    const auto flat = forest_feature_importance(fit_forest(x, y, fp));
    CHECK(flat.degenerate);
    for (double s : flat.scores) CHECK(s == doctest::Approx(1.0 / 12.0));
    CHECK_THROWS_AS(forest_feature_importance(ForestModel{}), Error);
  }

  TEST_CASE("GBT with no stages predicts the class prior") {
    const Matrix x = make_matrix({{0}, {1}, {2}, {3}});
    const std::vector<int> y = {0, 1, 1, 1};
    GbtParams gp;
    gp.n_stages = 0;
    const auto model = fit_gbt(x, y, gp);
    CHECK(model.base_score == doctest::Approx(std::log(3.0)));
    for (std::size_t r = 0; r < 4; ++r) CHECK(predict_gbt(model, x.row(r))[1] == doctest::Approx(0.75));

    GbtModel zero;
    zero.n_features = 1;
    zero.base_score = 0.0;
    CHECK(predict_gbt(zero, x.row(0))[1] == 0.5);
  }

  TEST_CASE("GBT invalid configs") {
    const Matrix x = make_matrix({{0}, {1}});
    const std::vector<int> y = {0, 1};
    GbtParams gp;
    gp.learning_rate = 0.0;
    CHECK_THROWS_AS(fit_gbt(x, y, gp), Error);
    gp.learning_rate = 0.1;
    gp.n_stages = -1;
    CHECK_THROWS_AS(fit_gbt(x, y, gp), Error);
  }

  TEST_CASE("GBT separates a linearly separable set and its loss never rises") {
    Rng rng(13);
    const Matrix x = random_matrix(rng, 200, 2);
    std::vector<int> y(200);
    std::vector<double> yd(200);
    for (std::size_t r = 0; r < 200; ++r) {
      y[r] = x(r, 0) - 0.5 * x(r, 1) > 0.1 ? 1 : 0;
      yd[r] = y[r];
    }
    for (auto mode : {SplitMode::Exact, SplitMode::Histogram}) {
      GbtParams gp;
      gp.n_stages = 50;
      gp.learning_rate = 0.1;
      gp.max_depth = 3;
      gp.split_mode = mode;
      const auto model = fit_gbt(x, y, gp);
      int correct = 0;
      for (std::size_t r = 0; r < 200; ++r) correct += (predict_gbt(model, x.row(r))[1] > 0.5) == (y[r] == 1);
      CHECK(correct == 200);
      const auto curve = gbt_training_loss_curve(model, x, yd);
      REQUIRE(curve.size() == 51);
      for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1] + 1e-12);
    }
  }

  TEST_CASE("GBT training loss is non-increasing at lr 0.3 on noisy labels") {
    Rng rng(14);
    const Matrix x = random_matrix(rng, 300, 4);
    std::vector<int> y(300);
    std::vector<double> yd(300);
    for (std::size_t r = 0; r < 300; ++r) {
      y[r] = (x(r, 0) + x(r, 1) * x(r, 2) + rng.uniform(-0.5, 0.5)) > 0 ? 1 : 0;
      yd[r] = y[r];
    }
    GbtParams gp;
    gp.n_stages = 60;
    gp.learning_rate = 0.3;
    gp.max_depth = 1;
    const auto curve = gbt_training_loss_curve(fit_gbt(x, y, gp), x, yd);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1] + 1e-12);
  }

  TEST_CASE("squared-loss GBT on a constant target predicts the constant") {
    Rng rng(15);
    const Matrix x = random_matrix(rng, 50, 3);
    const std::vector<double> y(50, 0.0375);
    GbtParams gp;
    gp.loss = Loss::Squared;
    gp.n_stages = 20;
    const auto model = fit_gbt(x, y, gp);
    for (std::size_t r = 0; r < 50; ++r) CHECK(std::abs(predict_gbt_value(model, x.row(r)) - 0.0375) < 1e-6);
  }

  TEST_CASE("serialization round trips are exact") {
    Rng rng(16);
    const Matrix x = random_matrix(rng, 150, 4);
    std::vector<int> y(150);
    for (std::size_t r = 0; r < 150; ++r) y[r] = x(r, 0) * 1.7 + x(r, 3) > 0 ? 1 : 0;

    const auto tree = fit_tree(x, y, TreeParams{});
    CHECK(tree_from_json(nlohmann::json::parse(to_json(tree).dump())) == tree);

    ForestParams fp;
    fp.n_trees = 5;
    fp.seed = 2;
    const auto forest = fit_forest(x, y, fp);
    CHECK(forest_from_json(nlohmann::json::parse(to_json(forest).dump())) == forest);

    GbtParams gp;
    gp.n_stages = 15;
    gp.split_mode = SplitMode::Histogram;
    gp.n_bins = 16;
    const auto gbt = fit_gbt(x, y, gp);
    const auto back = gbt_from_json(nlohmann::json::parse(to_json(gbt).dump()));
    CHECK(back == gbt);
    for (std::size_t r = 0; r < 10; ++r) CHECK(gbt_score(back, x.row(r)) == gbt_score(gbt, x.row(r)));

    auto bad = to_json(gbt);
    bad["format"] = "something-else";
    CHECK_THROWS_AS(gbt_from_json(bad), Error);
  }

  TEST_CASE("exact and histogram modes agree on a moderately sized problem") {
    Rng rng(17);
    const Matrix x = random_matrix(rng, 3000, 6);
    std::vector<int> y(3000);
    for (std::size_t r = 0; r < 3000; ++r) {
      y[r] = (std::sin(3 * x(r, 0)) + x(r, 1) * x(r, 2) - 0.5 * x(r, 4) + rng.uniform(-0.3, 0.3)) > 0 ? 1 : 0;
    }
    const Matrix train = take_rows(x, [] {
      std::vector<std::size_t> idx(2400);
      std::iota(idx.begin(), idx.end(), 0);
      return idx;
    }());
    const std::span<const int> ytrain(y.data(), 2400);
    GbtParams gp;
    gp.n_stages = 100;
    gp.learning_rate = 0.1;
    gp.max_depth = 4;
    const auto exact = fit_gbt(train, ytrain, gp);
    gp.split_mode = SplitMode::Histogram;
    const auto hist = fit_gbt(train, ytrain, gp);
    double acc_e = 0, acc_h = 0;
    for (std::size_t r = 2400; r < 3000; ++r) {
      acc_e += (predict_gbt(exact, x.row(r))[1] > 0.5) == (y[r] == 1);
      acc_h += (predict_gbt(hist, x.row(r))[1] > 0.5) == (y[r] == 1);
    }
    CHECK(std::abs(acc_e - acc_h) / 600.0 <= 0.01);
  }
}
