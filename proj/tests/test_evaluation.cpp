#include <doctest.h>

#include <random>

#include "tailsafe/evaluation.hpp"

using namespace tailsafe;

namespace {

// O(n_pos * n_neg) pairwise AUROC oracle with half credit for ties.
double auroc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j])
        wins += 1.0;
      else if (s[i] == s[j])
        wins += 0.5;
    }
  return wins / pairs;
}

}  // namespace

TEST_CASE("auroc: frozen hand examples") {
  CHECK(classification_metrics({0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}).auroc == doctest::Approx(1.0));
  CHECK(classification_metrics({0.9, 0.3, 0.8, 0.1}, {1, 1, 0, 0}).auroc == doctest::Approx(0.75));
  CHECK(classification_metrics({0.1, 0.3, 0.8, 0.9}, {1, 1, 0, 0}).auroc == doctest::Approx(0.0));
  // All-tied scores: chance.
  CHECK(classification_metrics({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}).auroc == doctest::Approx(0.5));
}

TEST_CASE("auroc matches the pairwise oracle on random data with ties") {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> us(-1.0, 1.0);
  std::uniform_int_distribution<int> uy(0, 1);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      // Coarse grid on odd trials forces heavy ties.
      s.push_back(trial % 2 == 0 ? us(rng) : 0.25 * coarse(rng));
      y.push_back(uy(rng));
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    CHECK(classification_metrics(s, y).auroc == doctest::Approx(auroc_oracle(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("error rates split by the threshold") {
  const auto m = classification_metrics({0.5, -0.5, 0.5, -0.5}, {1, 1, 0, 0}, 0.0);
  CHECK(m.false_safe_rate == doctest::Approx(0.5));    // one unsafe at +0.5
  CHECK(m.false_unsafe_rate == doctest::Approx(0.5));  // one safe at -0.5
  CHECK(m.n_pos == 2);
  CHECK(m.n_neg == 2);
  const auto perfect = classification_metrics({2.0, 1.0, -1.0, -2.0}, {1, 1, 0, 0}, 0.0);
  CHECK(perfect.false_safe_rate == doctest::Approx(0.0));
  CHECK(perfect.false_unsafe_rate == doctest::Approx(0.0));
  CHECK(perfect.auprc == doctest::Approx(1.0));
}

TEST_CASE("ece is small for a calibrated scorer and bounded in [0,1]") {
  // Scores whose logistic value equals the empirical positive rate per bin.
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> up(0.05, 0.95);
  std::bernoulli_distribution flip;
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 20000; ++i) {
    const double p = up(rng);
    s.push_back(std::log(p / (1.0 - p)));  // logit so logistic(score) = p
    y.push_back(std::bernoulli_distribution(p)(rng) ? 1 : 0);
  }
  const auto m = classification_metrics(s, y);
  CHECK(m.ece < 0.05);
  CHECK(m.ece >= 0.0);
  // Anti-calibrated scorer: large ECE.
  for (auto& v : s) v = -v;
  CHECK(classification_metrics(s, y).ece > 0.3);
}

TEST_CASE("cohens d: frozen oracle and degenerate cases") {
  // a = {0,1}, b = {2,3}: pooled sd = sqrt(0.5), d = -2/sqrt(0.5).
  CHECK(cohens_d({0.0, 1.0}, {2.0, 3.0}) == doctest::Approx(-2.0 / std::sqrt(0.5)));
  CHECK(cohens_d({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == doctest::Approx(0.0));
  CHECK(cohens_d({1.0}, {2.0}) == 0.0);          // too few samples
  CHECK(cohens_d({1.0, 1.0}, {1.0, 1.0}) == 0.0);  // zero pooled sd
}

TEST_CASE("detection lead time") {
  CHECK(detection_lead_time({0.5, 0.4, -0.1, -0.2}, 3) == 1);
  CHECK(detection_lead_time({-0.5, 0.4, 0.3}, 2) == 2);
  CHECK(detection_lead_time({0.5, 0.4, 0.3}, 2) == std::nullopt);
  CHECK(detection_lead_time({}, 0) == std::nullopt);
}

namespace {

struct BowlQ : QFunction {
  double peak = 0.5;
  double value(const Eigen::VectorXd&, const Eigen::Vector4d& a) const override {
    return peak - a.squaredNorm();
  }
  Eigen::Vector4d grad(const Eigen::VectorXd&, const Eigen::Vector4d& a) const override {
    return -2.0 * a;
  }
};

std::vector<AblationCase> corner_cases(int n) {
  std::vector<AblationCase> cases;
  for (int i = 0; i < n; ++i) {
    AblationCase c;
    c.embedding = Eigen::VectorXd::Zero(16);
    c.a_norm = Eigen::Vector4d::Ones();  // ||a|| = 2, unsafe for the bowl
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace

TEST_CASE("ablation benchmark climbs a bowl and reports gradient stats") {
  BowlQ q;
  const auto res = ablation_benchmark(q, corner_cases(10));
  CHECK(res.cases == 10);
  CHECK(res.success_rate == doctest::Approx(1.0));
  // |grad| = 2*||a||, averaged along the climb: ||a|| walks 2.0 -> 0.8 before
  // the bowl turns safe, so the mean is 2 * (2.0+1.8+...+0.8)/7 = 2.8.
  CHECK(res.mean_grad_norm == doctest::Approx(2.8));
  CHECK(res.mean_steps >= 1.0);
  CHECK(res.mean_steps < 200.0);
}

TEST_CASE("ablation benchmark counts already-safe and unclimbable starts as failures") {
  BowlQ wide;
  wide.peak = 10.0;  // every start is already safe
  CHECK(ablation_benchmark(wide, corner_cases(5)).success_rate == doctest::Approx(0.0));
  BowlQ hopeless;
  hopeless.peak = -1.0;  // maximum is below threshold
  CHECK(ablation_benchmark(hopeless, corner_cases(5)).success_rate == doctest::Approx(0.0));
}

TEST_CASE("flat gradient fraction") {
  BowlQ q;
  CHECK(flat_gradient_fraction(q, corner_cases(4), 1e-2) == doctest::Approx(0.0));
  // At the origin the bowl gradient vanishes.
  std::vector<AblationCase> origin(3);
  for (auto& c : origin) {
    c.embedding = Eigen::VectorXd::Zero(16);
    c.a_norm.setZero();
  }
  CHECK(flat_gradient_fraction(q, origin, 1e-2) == doctest::Approx(1.0));
}

TEST_CASE("cbf barrier saturates and matches finite-difference gradients") {
  CbfConfig cfg;
  cfg.mlp.dims = {20, 32, 32, 32, 1};
  const LipschitzMlp net(cfg.mlp);
  const CbfBarrier b(&net);
  Eigen::VectorXd e = Eigen::VectorXd::LinSpaced(16, -0.3, 0.3);
  Eigen::Vector4d a(0.2, -0.1, 0.4, 0.0);
  const double v = b.value(e, a);
  CHECK(v > -1.0);
  CHECK(v < 1.0);
  const Eigen::Vector4d g = b.grad(e, a);
  for (int i = 0; i < 4; ++i) {
    Eigen::Vector4d ap = a, am = a;
    ap(i) += 1e-6;
    am(i) -= 1e-6;
    const double fd = (b.value(e, ap) - b.value(e, am)) / 2e-6;
    CHECK(g(i) == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("cbf training separates a simple per-step dataset") {
  std::mt19937_64 rng(15);
  std::normal_distribution<double> gauss(0.0, 0.5);
  std::vector<QSample> samples;
  for (int i = 0; i < 400; ++i) {
    QSample s;
    s.embedding.resize(16);
    for (Eigen::Index k = 0; k < 16; ++k) s.embedding(k) = gauss(rng);
    s.action = ActionDelta{};
    s.y = s.embedding(0) > 0.0 ? 0.8 : -0.8;  // label sign is what matters
    samples.push_back(std::move(s));
  }
  CbfConfig cfg;
  cfg.mlp.dims = {20, 64, 64, 64, 1};
  cfg.epochs = 100;
  cfg.batch_size = 32;
  const LipschitzMlp net = train_cbf(samples, cfg);
  const CbfBarrier b(&net);
  int correct = 0;
  for (const QSample& s : samples) {
    const Eigen::Vector4d a = normalize_action(s.action, ActionBox{});
    if ((b.value(s.embedding, a) >= 0.0) == (s.y >= 0.0)) ++correct;
  }
  // Near-boundary samples stay unresolvable under the Lipschitz cap.
  CHECK(double(correct) / samples.size() > 0.85);
}

TEST_CASE("ensemble helpers: mean action and action variance") {
  const ActionBox box;
  const std::vector<ActionDelta> same(5, ActionDelta{0.01, -0.01, 0.05, 0.1});
  CHECK(action_variance(same, box) == doctest::Approx(0.0));
  const ActionDelta m = mean_action(same);
  CHECK(m.dx == doctest::Approx(0.01));
  CHECK(m.dgrip == doctest::Approx(0.1));

  // Two opposite corners: normalized vectors (+-1)^4, covariance trace = 4 * 1
  // with n-1 = 1 denominator -> centered.squaredNorm()/(n-1) = 8.
  const std::vector<ActionDelta> split{ActionDelta{0.02, 0.02, 0.1, 0.25},
                                       ActionDelta{-0.02, -0.02, -0.1, -0.25}};
  CHECK(action_variance(split, box) == doctest::Approx(8.0));
  const ActionDelta mid = mean_action(split);
  CHECK(mid.dx == doctest::Approx(0.0));
  CHECK(mid.dtheta == doctest::Approx(0.0));
}

TEST_CASE("random scores give chance-level auroc") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> us(-1.0, 1.0);
  std::vector<double> s(4000);
  std::vector<int> y(4000);
  for (int i = 0; i < 4000; ++i) {
    s[i] = us(rng);
    y[i] = i % 2;
  }
  CHECK(classification_metrics(s, y).auroc == doctest::Approx(0.5).epsilon(0.05));
}
