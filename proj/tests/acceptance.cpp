// Acceptance suite: one pass/fail line per shipped guarantee. Builds the full
// artifact chain once (demos -> criteria fit -> weightnet -> labels -> Q ->
// variants -> evaluations) and checks each property against its pinned
// tolerance and runtime budget.
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tailsafe/pipeline.hpp"

using namespace tailsafe;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

double secs(clk::time_point since) {
  return std::chrono::duration<double>(clk::now() - since).count();
}

struct Artifacts {
  PipelineConfig cfg = default_config();
  Simulator sim{cfg.world};
  DistributionFit fit;
  WeightNet wn;
  std::vector<Rollout> train;
  std::vector<Rollout> holdout;
  std::vector<QSample> samples;
  SafetyQ q_full{cfg.qtrain.mlp};       // spectral + hill
  SafetyQ q_spectral{cfg.qtrain.mlp};   // spectral, no hill
  SafetyQ q_plain;                      // no spectral, no hill
  std::vector<AblationCase> starts;
  double build_seconds = 0.0;

  Artifacts()
      : q_plain([this] {
          MlpConfig m = cfg.qtrain.mlp;
          m.spectral = false;
          m.lipschitz = -1.0;
          return m;
        }()) {
    const auto t0 = clk::now();
    auto [demos, dmeta] = generate_rollouts(sim, cfg.demo_perturb, 60, 101);
    fit = fit_from_rollouts(demos);

    auto [tr, tmeta] = generate_rollouts(sim, cfg.train_perturb, 300, 102);
    train = std::move(tr);
    annotate_scores(sim, fit, cfg.grasp_template, train);
    wn = make_weightnet(cfg.weightnet);
    train_weightnet(wn, to_trajectory_samples(train), cfg.weightnet);
    annotate_h(wn, train);
    annotate_labels(train, cfg.qtrain.gamma);
    samples = to_q_samples(train);

    train_q(q_full, samples, cfg.qtrain);
    QTrainConfig no_hill = cfg.qtrain;
    no_hill.hill_lambda = 0.0;
    train_q(q_spectral, samples, no_hill);
    QTrainConfig plain = no_hill;
    plain.mlp.spectral = false;
    plain.mlp.lipschitz = -1.0;
    train_q(q_plain, samples, plain);

    auto [ho, hmeta] = generate_rollouts(sim, cfg.train_perturb, 120, 777);
    holdout = std::move(ho);
    annotate_scores(sim, fit, cfg.grasp_template, holdout);
    annotate_h(wn, holdout);
    annotate_labels(holdout, cfg.qtrain.gamma);

    starts = make_unsafe_starts(train, 200, 0.8, 1.6, 42);
    build_seconds = secs(t0);
  }
};

int g_failures = 0;

void report(int idx, const char* name, bool pass, const std::string& detail) {
  std::printf("criterion %2d (%s): %s  [%s]\n", idx, name, pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// 1. Label recursion equals the brute-force min-discounted oracle.
void criterion1() {
  const auto t0 = clk::now();
  std::mt19937_64 rng(9001);
  std::uniform_real_distribution<double> uh(-1.0, 1.0);
  std::uniform_int_distribution<int> ulen(1, 50);
  double max_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> h(ulen(rng));
    for (double& v : h) v = uh(rng);
    const bool success = trial % 2 == 0;
    const auto y = reach_avoid_labels(h, success, 0.99);
    // Oracle: y_t = min_k gamma^k * seq[t+k], seq = h ++ [terminal].
    std::vector<double> seq = h;
    seq.push_back(success ? 1.0 : -1.0);
    for (std::size_t t = 0; t < h.size(); ++t) {
      double best = 1e300, disc = 1.0;
      for (std::size_t k = t; k < seq.size(); ++k) {
        best = std::min(best, disc * seq[k]);
        disc *= 0.99;
      }
      max_err = std::max(max_err, std::abs(best - y[t]));
    }
  }
  const double el = secs(t0);
  report(1, "reach-avoid label equivalence", max_err <= 1e-12 && el < 5.0,
         fmt("max err %.2e on 1000 sequences, %.2fs", max_err, el));
}

// 2. Analytic input gradients match central finite differences.
void criterion2() {
  const auto t0 = clk::now();
  std::mt19937_64 rng(1234);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    MlpConfig mc;
    mc.dims = {6, 16, 16, 1};
    mc.spectral = trial % 2 == 0;
    mc.seed = 5000 + trial;
    const LipschitzMlp net(mc);
    Eigen::VectorXd x(6);
    for (int i = 0; i < 6; ++i) x(i) = gauss(rng);
    const Eigen::VectorXd g = net.input_gradient(x);
    for (int i = 0; i < 6; ++i) {
      Eigen::VectorXd xp = x, xm = x;
      xp(i) += 1e-5;
      xm(i) -= 1e-5;
      const double fd = (net.value(xp) - net.value(xm)) / 2e-5;
      const double rel = std::abs(g(i) - fd) / std::max({std::abs(fd), std::abs(g(i)), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  const double el = secs(t0);
  report(2, "analytic vs finite-difference gradients", worst < 1e-4 && el < 30.0,
         fmt("worst rel err %.2e on 100 nets, %.2fs", worst, el));
}

// 3. Lipschitz audit on every shipped (spectrally constrained) Q checkpoint.
void criterion3(const Artifacts& art) {
  const auto t0 = clk::now();
  const LipschitzAudit a = verify_lipschitz(art.q_full.net(), 10000, 1e-4, 1e-1, 77);
  const LipschitzAudit b = verify_lipschitz(art.q_spectral.net(), 10000, 1e-4, 1e-1, 78);
  const double el = secs(t0);
  report(3, "lipschitz audit of shipped checkpoints",
         a.passed && b.passed && el < 60.0,
         fmt("max ratios %.4f / %.4f vs bound 2.5, %.2fs", a.max_ratio, b.max_ratio, el));
}

// 4. Every pre-projection recovery step has norm exactly eta.
void criterion4(const Artifacts& art) {
  const LearnedQ lq(&art.q_full);
  const ActionBox& box = art.cfg.world.box;
  double max_dev = 0.0;
  long steps = 0;
  for (const AblationCase& c : art.starts) {
    const FilterResult r =
        filter_action(lq, c.embedding, denormalize_action(c.a_norm, box), art.cfg.filter, box);
    for (double n : r.step_norms) {
      max_dev = std::max(max_dev, std::abs(n - art.cfg.filter.eta));
      ++steps;
    }
  }
  report(4, "recovery step-norm identity", steps > 0 && max_dev <= 1e-9,
         fmt("max |step - eta| = %.2e over %ld steps", max_dev, steps));
}

// 5. Recovery ordering across constraint ablations with energized gradients.
void criterion5(const Artifacts& art) {
  const auto t0 = clk::now();
  const LearnedQ la(&art.q_plain), lb(&art.q_spectral), lc(&art.q_full);
  const AblationResult ra = ablation_benchmark(la, art.starts);
  const AblationResult rb = ablation_benchmark(lb, art.starts);
  const AblationResult rc = ablation_benchmark(lc, art.starts);
  const double el = secs(t0) + art.build_seconds;  // includes variant training
  const bool ordering = ra.success_rate <= rb.success_rate + 1e-12 &&
                        rb.success_rate <= rc.success_rate + 1e-12;
  const bool pass = ordering && rc.success_rate >= 0.95 &&
                    rc.mean_grad_norm >= 5.0 * ra.mean_grad_norm && el < 900.0;
  report(5, "constraint-ablation recovery ordering", pass,
         fmt("success %.3f<=%.3f<=%.3f, grads %.4f vs %.4f (x%.1f), %.0fs",
             ra.success_rate, rb.success_rate, rc.success_rate, rc.mean_grad_norm,
             ra.mean_grad_norm,
             ra.mean_grad_norm > 0 ? rc.mean_grad_norm / ra.mean_grad_norm : 1e9, el));
}

// 6. Equal weights condemn successful trajectories; the trained fusion clears them.
void criterion6(const Artifacts& art) {
  int succ = 0, eq_unsafe = 0, tr_safe = 0;
  for (const Rollout& r : art.train) {
    if (r.outcome != Outcome::Success) continue;
    ++succ;
    double eq_min = 1e300, tr_min = 1e300;
    for (const RolloutRecord& rec : r.records) {
      eq_min = std::min(eq_min, equal_weights_h(*rec.scores, 0.5));
      tr_min = std::min(tr_min, *rec.h);
    }
    if (eq_min < 0.0) ++eq_unsafe;
    if (tr_min >= 0.0) ++tr_safe;
  }
  const double eq_rate = succ ? double(eq_unsafe) / succ : 0.0;
  const double tr_rate = succ ? double(tr_safe) / succ : 0.0;
  report(6, "adaptive weighting rescues occluded grasps",
         eq_rate >= 0.95 && tr_rate >= 0.90,
         fmt("equal-weights unsafe %.3f (>=0.95), trained safe %.3f (>=0.90), n=%d",
             eq_rate, tr_rate, succ));
}

// 7. Held-out per-state detection quality of the trained Q.
void criterion7(const Artifacts& art) {
  std::vector<double> scores;
  std::vector<int> labels;
  const ActionBox& box = art.cfg.world.box;
  for (const Rollout& r : art.holdout)
    for (const RolloutRecord& rec : r.records) {
      scores.push_back(art.q_full.value(rec.state.embedding, rec.action, box));
      labels.push_back(*rec.q_label >= 0.0 ? 1 : 0);
    }
  const ClassificationMetrics m = classification_metrics(scores, labels, 0.0);
  report(7, "held-out detection quality", m.auroc >= 0.95 && m.false_safe_rate <= 0.03,
         fmt("AUROC %.4f (>=0.95), false-safe %.4f (<=0.03), n=%zu", m.auroc,
             m.false_safe_rate, scores.size()));
}

// 8. The runtime guard converts failing perturbed episodes into successes.
void criterion8(const Artifacts& art) {
  const auto t0 = clk::now();
  const LearnedQ lq(&art.q_full);
  const GuardedStats ug = run_batch(art.sim, art.cfg.eval_perturb, 200, 303);
  const MonitorFn guard = make_guard(lq, art.cfg.filter, art.cfg.world.box);
  const GuardedStats g = run_batch(art.sim, art.cfg.eval_perturb, 200, 303, &guard);
  const double el = secs(t0);
  const bool pass = ug.success_rate <= 0.40 && g.success_rate >= 0.90 &&
                    g.mean_steps_success < ug.mean_steps_success &&
                    g.mean_recoveries < 5.0 && el < 1200.0;
  report(8, "guarded vs unguarded success", pass,
         fmt("success %.3f->%.3f, steps %.1f->%.1f, recoveries %.2f, %.0fs",
             ug.success_rate, g.success_rate, ug.mean_steps_success, g.mean_steps_success,
             g.mean_recoveries, el));
}

// 9. Baseline comparison: saturating classifier, ensemble variance, instant h.
void criterion9(const Artifacts& art) {
  const ActionBox& box = art.cfg.world.box;
  const LearnedQ lq(&art.q_full);

  const LipschitzMlp cbf_net = train_cbf(art.samples, art.cfg.cbf);
  const CbfBarrier barrier(&cbf_net);
  std::vector<AblationCase> unsafe_cases;
  for (const QSample& s : art.samples)
    if (s.y < 0.0) unsafe_cases.push_back(AblationCase{s.embedding, normalize_action(s.action, box)});
  const double flat_cbf = flat_gradient_fraction(barrier, unsafe_cases, 1e-2);
  const double flat_q = flat_gradient_fraction(lq, unsafe_cases, 1e-2);
  const bool cbf_ok = flat_cbf >= 5.0 * flat_q;

  // Ensemble of scripted-policy variants: action variance as unsafety score.
  std::vector<double> neg_var;
  std::vector<int> labels;
  std::vector<std::pair<double, double>> var_dq;
  {
    auto [evs, emeta] = generate_rollouts(art.sim, art.cfg.train_perturb, 60, 555);
    annotate_scores(art.sim, art.fit, art.cfg.grasp_template, evs);
    annotate_h(art.wn, evs);
    annotate_labels(evs, art.cfg.qtrain.gamma);
    for (std::size_t e = 0; e < evs.size(); ++e) {
      const EpisodeContext ctx{evs[e].seed, emeta[e].sigma};
      for (const RolloutRecord& rec : evs[e].records) {
        const Observation obs = art.sim.observe(rec.state, ctx);
        std::vector<ActionDelta> actions;
        for (int k = 0; k < 5; ++k)
          actions.push_back(
              box.clip(art.sim.nominal_policy_variant(rec.state, obs, 0.15 * (k - 2.0))));
        const double var = action_variance(actions, box);
        neg_var.push_back(-var);
        labels.push_back(*rec.q_label >= 0.0 ? 1 : 0);
        var_dq.emplace_back(var,
                            art.q_full.value(rec.state.embedding, mean_action(actions), box) -
                                art.q_full.value(rec.state.embedding, rec.action, box));
      }
    }
  }
  const double ens_auroc = classification_metrics(neg_var, labels).auroc;
  std::vector<double> vars;
  for (const auto& [v, dq] : var_dq) vars.push_back(v);
  std::sort(vars.begin(), vars.end());
  const double cut = vars[static_cast<std::size_t>(0.9 * (vars.size() - 1))];
  double mean_dq = 0.0;
  int flagged = 0;
  for (const auto& [v, dq] : var_dq)
    if (v >= cut) {
      mean_dq += dq;
      ++flagged;
    }
  if (flagged > 0) mean_dq /= flagged;
  const bool ens_ok = ens_auroc >= 0.4 && ens_auroc <= 0.7 && mean_dq <= 0.0;

  // Deceptive states: instantaneous h positive inside failing episodes.
  std::vector<double> h_succ, h_fail, q_succ, q_fail;
  for (const Rollout& r : art.holdout)
    for (const RolloutRecord& rec : r.records) {
      if (*rec.h <= 0.0) continue;
      const double qv = art.q_full.value(rec.state.embedding, rec.action, box);
      (r.outcome == Outcome::Success ? h_succ : h_fail).push_back(*rec.h);
      (r.outcome == Outcome::Success ? q_succ : q_fail).push_back(qv);
    }
  const double d_h = std::abs(cohens_d(h_succ, h_fail));
  const double d_q = std::abs(cohens_d(q_succ, q_fail));
  const bool dec_ok = h_fail.size() >= 10 && d_q > d_h;

  report(9, "baseline comparison trends", cbf_ok && ens_ok && dec_ok,
         fmt("flat-grad %.3f vs %.3f, ensemble AUROC %.3f, dQ %.4f, d %.2f vs %.2f (n=%zu)",
             flat_cbf, flat_q, ens_auroc, mean_dq, d_q, d_h, h_fail.size()));
}

// 10. CLI determinism: identical config and seeds give byte-identical outputs.
void criterion10(const char* argv0) {
  const fs::path self(argv0);
  fs::path cli = self.parent_path() / ".." / "tools" / "tailsafe_cli";
  if (!fs::exists(cli)) {
    report(10, "command-line determinism", false, "tailsafe_cli binary not found");
    return;
  }
  cli = fs::canonical(cli);
  const fs::path base = fs::temp_directory_path() / "tailsafe_acceptance_c10";
  fs::remove_all(base);
  fs::create_directories(base);
  auto run = [&](const fs::path& out) {
    const std::string cmd = cli.string() + " gen-rollouts --n 10 --preset demo --seed 17 --out " +
                            out.string() + " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  bool ok = run(base / "a") && run(base / "b");
  if (ok)
    for (const char* f : {"rollouts.jsonl", "manifest.json"})
      ok = ok && read_file(base / "a" / f) == read_file(base / "b" / f);
  // Second stage re-run on the same inputs.
  auto fitrun = [&](const fs::path& out) {
    const std::string cmd = cli.string() + " fit-criteria --demos " +
                            (base / "a" / "rollouts.jsonl").string() + " --out " + out.string() +
                            " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  ok = ok && fitrun(base / "fa") && fitrun(base / "fb") &&
       read_file(base / "fa" / "criteria.json") == read_file(base / "fb" / "criteria.json");
  fs::remove_all(base);
  report(10, "command-line determinism", ok, "gen-rollouts + fit-criteria byte-identical");
}

// 11. Recovery filter latency budget.
void criterion11(const Artifacts& art) {
  const LearnedQ lq(&art.q_full);
  const ActionBox& box = art.cfg.world.box;
  const auto t0 = clk::now();
  int calls = 0;
  for (int rep = 0; rep < 3; ++rep)
    for (const AblationCase& c : art.starts) {
      filter_action(lq, c.embedding, denormalize_action(c.a_norm, box), art.cfg.filter, box);
      ++calls;
    }
  const double mean_ms = secs(t0) * 1000.0 / calls;
  report(11, "filter latency budget", mean_ms < 10.0,
         fmt("mean %.3f ms over %d calls (<10 ms)", mean_ms, calls));
}

}  // namespace

int main(int, char** argv) {
  std::printf("building shared artifacts (rollouts, weightnet, q variants)...\n");
  std::fflush(stdout);
  Artifacts art;
  std::printf("artifacts ready in %.0fs\n", art.build_seconds);
  std::fflush(stdout);

  criterion1();
  criterion2();
  criterion3(art);
  criterion4(art);
  criterion5(art);
  criterion6(art);
  criterion7(art);
  criterion8(art);
  criterion9(art);
  criterion10(argv[0]);
  criterion11(art);

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 3;
  }
  std::printf("all 11 criteria passed\n");
  return 0;
}
