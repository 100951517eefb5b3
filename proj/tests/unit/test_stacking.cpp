#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "gridstab/error.hpp"
#include "gridstab/stacking.hpp"
#include "support.hpp"

using namespace gridstab;
using namespace gridstab::stacking;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

struct Problem {
  Matrix x;
  std::vector<int> y;
};

Problem make_problem(std::size_t n, std::uint64_t seed, double noise = 0.2) {
  Rng rng(seed);
  Problem p{Matrix(n, 5), std::vector<int>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < 5; ++c) p.x(r, c) = rng.uniform(-1, 1);
    p.y[r] = p.x(r, 0) + std::sin(2 * p.x(r, 1)) - 0.5 * p.x(r, 3) + rng.uniform(-noise, noise) > 0 ? 1 : 0;
  }
  return p;
}

// Seed-free base learner: one unbootstrapped tree over all features.
trees::ForestParams exact_tree() {
  trees::ForestParams fp;
  fp.n_trees = 1;
  fp.bootstrap = false;
  fp.features_per_split = 0;
  fp.max_depth = 6;
  return fp;
}

StackingConfig small_config(std::uint64_t seed) {
  StackingConfig c;
  auto& forest = std::get<trees::ForestParams>(c.bases[0]);
  forest.n_trees = 15;
  forest.max_depth = 8;
  for (std::size_t m : {1u, 2u}) {
    auto& g = std::get<trees::GbtParams>(c.bases[m]);
    g.n_stages = 30;
    g.learning_rate = 0.3;
    g.max_depth = 3;
  }
  std::get<nn::AnnConfig>(c.bases[3]).epochs = 5;
  c.seed = seed;
  return c;
}

double accuracy(const std::vector<StackingPrediction>& pred, std::span<const int> y) {
  double ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += pred[i].label == y[i];
  return ok / static_cast<double>(y.size());
}

}  // namespace

TEST_SUITE("stacking_ensemble") {
  TEST_CASE("logistic examples") {
    Matrix x(2, 1);
    x(1, 0) = 1.0;
    const std::vector<int> y = {0, 1};
    const auto sep = fit_logistic(x, y, LogisticConfig{});
    CHECK(predict_logistic(sep, x.row(0)) < 0.5);
    CHECK(predict_logistic(sep, x.row(1)) > 0.5);

    const auto none = fit_logistic(x, y, LogisticConfig{0, 0.1});
    CHECK(none.weights == std::vector<double>{0.0});
    CHECK(none.bias == 0.0);
    CHECK(predict_logistic(none, x.row(1)) == 0.5);

    CHECK(code_of([&] { fit_logistic(x, std::vector<int>{0}, LogisticConfig{}); }) == ErrorCode::ShapeMismatch);
  }

  TEST_CASE("a meta feature equal to the label gets positive weight") {
    Rng rng(3);
    Matrix x(100, 3);
    std::vector<int> y(100);
    for (std::size_t r = 0; r < 100; ++r) {
      y[r] = rng.bernoulli(0.4) ? 1 : 0;
      x(r, 0) = rng.uniform();
      x(r, 1) = y[r];
      x(r, 2) = rng.uniform();
    }
    const auto m = fit_logistic(x, y, LogisticConfig{});
    CHECK(m.weights[1] > 0.0);
    CHECK(m.weights[1] > std::abs(m.weights[0]));
    int ok = 0;
    for (std::size_t r = 0; r < 100; ++r) ok += predict_from_meta(m, x.row(r)).label == y[r];
    CHECK(ok == 100);
  }

  TEST_CASE("logistic loss does not increase with more gradient steps") {
    const auto p = make_problem(200, 4, 1.0);
    double prev = std::log(2.0) + 1e-12;
    for (int steps = 0; steps <= 200; steps += 10) {
      const double loss = logistic_loss(fit_logistic(p.x, p.y, LogisticConfig{steps, 0.1}), p.x, p.y);
      CHECK(loss <= prev + 1e-12);
      prev = loss;
    }
  }

  TEST_CASE("meta probability is in (0, 1), ties go to stable, monotone in base probabilities") {
    LogisticModel zero{{0, 0, 0, 0}, 0.0};
    const std::vector<double> half = {0.5, 0.5, 0.5, 0.5};
    const auto tie = predict_from_meta(zero, half);
    CHECK(tie.probability == 0.5);
    CHECK(tie.label == 0);

    const LogisticModel m{{1.3, 2.8, 2.8, 2.1}, -4.5};
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> probs(4);
      for (auto& v : probs) v = rng.uniform();
      const double base = predict_from_meta(m, probs).probability;
      CHECK(base > 0.0);
      CHECK(base < 1.0);
      const std::size_t k = rng.below(4);
      probs[k] = std::min(1.0, probs[k] + rng.uniform(0.0, 0.3));
      CHECK(predict_from_meta(m, probs).probability >= base);
    }
  }

  TEST_CASE("stratified folds") {
    std::vector<int> y(100);
    for (std::size_t i = 0; i < 100; ++i) y[i] = i < 36 ? 1 : 0;
    const auto folds = stratified_folds(y, 5, 11);
    CHECK(folds == stratified_folds(y, 5, 11));
    CHECK(folds != stratified_folds(y, 5, 12));
    for (int f = 0; f < 5; ++f) {
      CHECK(std::count(folds.begin(), folds.end(), f) == 20);
      int pos = 0;
      for (std::size_t i = 0; i < 100; ++i) pos += folds[i] == f && y[i] == 1;
      CHECK(std::abs(pos - 36.0 / 5.0) <= 1.0);
    }
    const std::vector<int> stable(50, 0);
    CHECK(code_of([&] { stratified_folds(stable, 5, 0); }) == ErrorCode::FoldDegenerate);
    CHECK(code_of([&] { stratified_folds(std::vector<int>{0, 1, 0}, 5, 0); }) == ErrorCode::TooFewRows);
    CHECK(code_of([&] { stratified_folds(y, 1, 0); }) == ErrorCode::InvalidConfig);
  }

  TEST_CASE("out-of-fold entries come from models that never saw the row") {
    const auto p = make_problem(100, 6);
    const std::vector<BaseConfig> configs(4, exact_tree());
    const auto oof = oof_predictions(p.x, p.y, configs, 5, 2);
    REQUIRE(oof.meta.rows == 100);
    REQUIRE(oof.meta.cols == 4);
    for (int f = 0; f < 5; ++f) {
      std::vector<std::size_t> train, held;
      for (std::size_t i = 0; i < 100; ++i) (oof.fold[i] == f ? held : train).push_back(i);
      CHECK(held.size() == 20);
      // Independent refit on the complement of fold f.
      std::vector<int> ytrain;
      for (auto i : train) ytrain.push_back(p.y[i]);
      const auto model = fit_base(exact_tree(), take_rows(p.x, train), ytrain);
      const auto expected = base_probabilities(model, take_rows(p.x, held));
      for (std::size_t k = 0; k < held.size(); ++k) {
        for (std::size_t m = 0; m < 4; ++m) CHECK(oof.meta(held[k], m) == expected[k]);
      }
    }
    // A memorizing tree would score every row perfectly in-sample; out of fold it cannot.
    trees::ForestParams deep = exact_tree();
    deep.max_depth = -1;
    Problem noisy = make_problem(100, 7);
    Rng rng(1);
    for (auto& v : noisy.y) v = rng.bernoulli(0.5) ? 1 : 0;
    const auto leak = oof_predictions(noisy.x, noisy.y, std::vector<BaseConfig>{deep}, 5, 3);
    int ok = 0;
    for (std::size_t i = 0; i < 100; ++i) ok += (leak.meta(i, 0) > 0.5) == (noisy.y[i] == 1);
    CHECK(ok < 75);
  }

  TEST_CASE("stacking fit is deterministic and round-trips through files") {
    const auto train = make_problem(600, 8);
    const auto test = make_problem(200, 9);
    const auto cfg = small_config(21);
    const auto a = fit_stacking(train.x, train.y, cfg);
    const auto b = fit_stacking(train.x, train.y, cfg);
    REQUIRE(a.trained());
    CHECK(a.meta == b.meta);
    CHECK(a.names == default_base_names());

    const auto pa = predict_stacking(a, test.x);
    CHECK(accuracy(pa, test.y) > 0.85);

    const auto dir = testing::scratch_dir("stacking");
    const auto written = save_stacking(a, dir / "stack.json");
    CHECK(written.size() == 5);
    const auto loaded = load_stacking(dir / "stack.json");
    CHECK(loaded.meta == a.meta);
    const auto pl = predict_stacking(loaded, test.x);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pl[i].probability == pa[i].probability);
      CHECK(pl[i].label == pa[i].label);
    }
    const auto meta = stacking_meta_features(a, test.x);
    CHECK(meta.cols == 4);
    CHECK(predict_from_meta(a.meta, meta.row(0)).probability == pa[0].probability);
  }

  TEST_CASE("an unfitted stacking model is rejected") {
    StackingModel empty;
    const std::vector<double> x(5, 0.0);
    CHECK(code_of([&] { predict_stacking(empty, x); }) == ErrorCode::UntrainedModel);
    CHECK(code_of([&] { load_stacking("/no/such/manifest.json"); }) == ErrorCode::MissingFile);
  }

  TEST_CASE("stacking four copies of one forest is not worse than that forest") {
    const auto train = make_problem(1500, 10, 0.4);
    const auto test = make_problem(600, 11, 0.4);
    trees::ForestParams fp;
    fp.n_trees = 30;
    fp.max_depth = 10;
    fp.seed = 77;
    StackingConfig cfg;
    cfg.bases = {fp, fp, fp, fp};
    cfg.seed = 5;
    const auto stack = fit_stacking(train.x, train.y, cfg);
    const auto forest = trees::fit_forest(train.x, train.y, fp);
    double forest_ok = 0;
    for (std::size_t r = 0; r < test.x.rows; ++r) {
      forest_ok += trees::argmax_class(trees::predict_forest(forest, test.x.row(r))) == test.y[r];
    }
    CHECK(accuracy(predict_stacking(stack, test.x), test.y) >= forest_ok / 600.0 - 0.005);
  }
}
