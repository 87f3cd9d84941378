#include <doctest.h>

#include <filesystem>

#include "tailsafe/pipeline.hpp"

using namespace tailsafe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("tailsafe_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static inline int counter = 0;
};

std::vector<Rollout> tiny_rollouts(const Simulator& sim, int n) {
  auto [rollouts, meta] = generate_rollouts(sim, PipelineConfig{}.demo_perturb, n, 55);
  return rollouts;
}

}  // namespace

TEST_CASE("rollout jsonl round-trips exactly, including optional fields") {
  const Simulator sim((WorldConfig()));
  auto [rollouts, meta] = generate_rollouts(sim, PipelineConfig{}.train_perturb, 4, 11);
  // Mixed annotation: scores+h on episode 0 only, q on episode 1 only.
  rollouts[0].records[0].scores = SafetyScores{0.1, 0.2, 0.3};
  for (auto& rec : rollouts[0].records) rec.h = 0.25;
  for (auto& rec : rollouts[1].records) rec.q_label = -0.5;

  TempDir dir;
  const fs::path file = dir.path / "rollouts.jsonl";
  write_rollouts(file, rollouts, meta);
  const auto [back, back_meta] = read_rollouts(file);

  REQUIRE(back.size() == rollouts.size());
  REQUIRE(back_meta.size() == meta.size());
  for (std::size_t e = 0; e < rollouts.size(); ++e) {
    CHECK(back[e].episode_id == rollouts[e].episode_id);
    CHECK(back[e].outcome == rollouts[e].outcome);
    CHECK(back[e].seed == rollouts[e].seed);
    CHECK(back_meta[e].sigma == meta[e].sigma);
    REQUIRE(back[e].records.size() == rollouts[e].records.size());
    for (std::size_t t = 0; t < rollouts[e].records.size(); ++t) {
      const auto& a = rollouts[e].records[t];
      const auto& b = back[e].records[t];
      CHECK(a.state.ee.x == b.state.ee.x);
      CHECK(a.state.object.theta == b.state.object.theta);
      CHECK((a.state.embedding - b.state.embedding).norm() == 0.0);
      CHECK(a.action.dgrip == b.action.dgrip);
      CHECK(a.h.has_value() == b.h.has_value());
      CHECK(a.q_label.has_value() == b.q_label.has_value());
      if (a.h) CHECK(*a.h == *b.h);
      if (a.q_label) CHECK(*a.q_label == *b.q_label);
      if (a.scores) {
        REQUIRE(b.scores.has_value());
        CHECK(a.scores->s_fov == b.scores->s_fov);
      }
    }
  }

  // Writing the parsed data again yields byte-identical files.
  const fs::path file2 = dir.path / "rollouts2.jsonl";
  write_rollouts(file2, back, back_meta);
  CHECK(read_file(file) == read_file(file2));
}

TEST_CASE("malformed jsonl is rejected with the offending line number") {
  TempDir dir;
  const fs::path file = dir.path / "bad.jsonl";
  atomic_write(file, "{\"episode\":0}\n");
  try {
    read_rollouts(file);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.exit_code == 2);
    CHECK(std::string(e.what()).find(":1") != std::string::npos);
  }
}

TEST_CASE("config: round-trip, unknown keys rejected, hash is canonical") {
  const PipelineConfig cfg = default_config();
  const auto j = config_to_json(cfg);
  const PipelineConfig back = config_from_json(j);
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(config_to_json(back).dump() == j.dump());

  auto bad = j;
  bad["world"]["gravity"] = 9.81;
  try {
    config_from_json(bad);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.exit_code == 2);
    CHECK(std::string(e.what()).find("gravity") != std::string::npos);
  }

  // Changing any value changes the hash.
  PipelineConfig other = cfg;
  other.base_seed += 1;
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("atomic_write replaces content without leaving temp files") {
  TempDir dir;
  const fs::path file = dir.path / "x.txt";
  atomic_write(file, "one");
  atomic_write(file, "two");
  CHECK(read_file(file) == "two");
  int entries = 0;
  for (const auto& _ : fs::directory_iterator(dir.path)) ++entries;
  CHECK(entries == 1);
}

TEST_CASE("manifests gate stage order") {
  TempDir dir;
  const fs::path stage_a = dir.path / "a";
  const fs::path stage_b = dir.path / "b";
  fs::create_directories(stage_a);
  fs::create_directories(stage_b);
  const PipelineConfig cfg = default_config();

  atomic_write(stage_a / "rollouts.jsonl", "{}\n");
  write_manifest(stage_a, "gen-rollouts", cfg, {}, {"rollouts.jsonl"}, {});

  const ManifestInput in = require_manifest(stage_a / "rollouts.jsonl", {"gen-rollouts"});
  CHECK(in.stage == "gen-rollouts");
  CHECK(in.path == (stage_a / "rollouts.jsonl").string());
  CHECK(!in.hash.empty());

  // Wrong producing stage -> stage-order violation.
  try {
    require_manifest(stage_a / "rollouts.jsonl", {"fit-criteria", "train-weightnet"});
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.exit_code == 2);
    CHECK(std::string(e.what()).find("stage-order") != std::string::npos);
  }

  // No manifest at all -> rejected.
  atomic_write(stage_b / "orphan.jsonl", "{}\n");
  CHECK_THROWS_AS(require_manifest(stage_b / "orphan.jsonl", {"gen-rollouts"}),
                  PipelineError);
}

TEST_CASE("generate_rollouts validates the episode count") {
  const Simulator sim((WorldConfig()));
  try {
    generate_rollouts(sim, PipelineConfig{}.demo_perturb, 0, 1);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.exit_code == 1);
  }
}

TEST_CASE("demo preset rollouts mostly succeed; failure fraction is consistent") {
  const Simulator sim((WorldConfig()));
  const auto rollouts = tiny_rollouts(sim, 20);
  CHECK(rollouts.size() == 20);
  CHECK(failure_fraction(rollouts) < 0.2);
  int failures = 0;
  for (const auto& r : rollouts)
    if (r.outcome == Outcome::Failure) ++failures;
  CHECK(failure_fraction(rollouts) == doctest::Approx(failures / 20.0));
}

TEST_CASE("annotation stages enforce their prerequisites") {
  const Simulator sim((WorldConfig()));
  auto rollouts = tiny_rollouts(sim, 2);
  // Labels need h everywhere; error names the first offending episode/step.
  try {
    annotate_labels(rollouts, 0.99);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.exit_code == 2);
    CHECK(std::string(e.what()).find("episode 0 step 0") != std::string::npos);
  }
}

TEST_CASE("h, labels, and q-sample extraction are consistent") {
  const Simulator sim((WorldConfig()));
  auto rollouts = tiny_rollouts(sim, 3);
  const WeightNet wn = make_weightnet(WeightNetConfig{});
  DistributionFit fit = fit_from_rollouts(rollouts);
  const PipelineConfig cfg = default_config();
  annotate_scores(sim, fit, cfg.grasp_template, rollouts);
  annotate_h(wn, rollouts);
  annotate_labels(rollouts, 0.99);

  std::size_t steps = 0;
  for (const auto& r : rollouts) {
    std::vector<double> h;
    for (const auto& rec : r.records) {
      REQUIRE(rec.scores.has_value());
      REQUIRE(rec.h.has_value());
      REQUIRE(rec.q_label.has_value());
      h.push_back(*rec.h);
      ++steps;
    }
    // Labels match the reach-avoid recursion applied to the stored h values.
    const auto expect = reach_avoid_labels(h, r.outcome == Outcome::Success, 0.99);
    for (std::size_t t = 0; t < h.size(); ++t)
      CHECK(*r.records[t].q_label == doctest::Approx(expect[t]).epsilon(1e-12));
  }
  const auto samples = to_q_samples(rollouts);
  CHECK(samples.size() == steps);
}

TEST_CASE("criteria fit checkpoint round-trips") {
  const Simulator sim((WorldConfig()));
  const auto rollouts = tiny_rollouts(sim, 12);
  const DistributionFit fit = fit_from_rollouts(rollouts);
  const PipelineConfig cfg = default_config();
  const auto j = nlohmann::ordered_json::parse(fit_to_json(fit, cfg.grasp_template).dump());
  const auto [back_fit, back_tmpl] = fit_from_json(j);
  // Mahalanobis distances agree bit-for-bit on arbitrary probes.
  Eigen::VectorXd probe = Eigen::VectorXd::LinSpaced(fit.pca_mean.size(), -0.4, 0.7);
  CHECK(mahalanobis_distance(back_fit, probe) == mahalanobis_distance(fit, probe));
  CHECK(back_tmpl.sigma_t == cfg.grasp_template.sigma_t);
}

TEST_CASE("make_unsafe_starts is deterministic and respects the request") {
  const Simulator sim((WorldConfig()));
  const auto rollouts = tiny_rollouts(sim, 10);
  const auto a = make_unsafe_starts(rollouts, 50, 0.8, 1.6, 42);
  const auto b = make_unsafe_starts(rollouts, 50, 0.8, 1.6, 42);
  REQUIRE(a.size() == 50);
  REQUIRE(b.size() == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK((a[i].a_norm - b[i].a_norm).norm() == 0.0);
    CHECK((a[i].embedding - b[i].embedding).norm() == 0.0);
    // Starts may leave the unit action box (off-manifold proposals) but stay
    // within the demo action plus the requested displacement.
    CHECK(a[i].a_norm.cwiseAbs().maxCoeff() <= 1.0 + 1.6 + 1e-12);
  }
  const auto c = make_unsafe_starts(rollouts, 50, 0.8, 1.6, 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if ((a[i].a_norm - c[i].a_norm).norm() > 0.0) any_diff = true;
  CHECK(any_diff);
}
