// tailsafe: end-to-end pipeline driver.
//
// Stages write their artifacts plus a manifest.json into --out; downstream
// stages check the manifests of their inputs, so running stages out of order
// fails with a clear message instead of garbage output.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>

#include "tailsafe/pipeline.hpp"

namespace ts = tailsafe;
using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
};

ts::PipelineConfig get_config(const Common& c) {
  if (!c.config_path.empty()) return ts::load_config(c.config_path);
  const char* env = std::getenv("TAILSAFE_CONFIG");
  if (env != nullptr && *env != '\0') return ts::load_config(env);
  return ts::default_config();
}

std::filesystem::path ensure_out(const Common& c) {
  if (c.out_dir.empty()) throw ts::PipelineError(1, "--out is required");
  std::filesystem::create_directories(c.out_dir);
  return c.out_dir;
}

const ts::PerturbationSpec& preset(const ts::PipelineConfig& cfg, const std::string& name) {
  if (name == "demo") return cfg.demo_perturb;
  if (name == "train") return cfg.train_perturb;
  if (name == "eval") return cfg.eval_perturb;
  throw ts::PipelineError(1, "unknown perturbation preset '" + name + "'");
}

ts::WeightNet load_weightnet(const std::filesystem::path& path) {
  try {
    return ts::WeightNet::from_json(json::parse(ts::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ts::PipelineError(2, path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ts::PipelineError(2, path.string() + ": " + e.what());
  }
}

ts::SafetyQ load_q(const std::filesystem::path& path) {
  try {
    return ts::SafetyQ::from_json(json::parse(ts::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ts::PipelineError(2, path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ts::PipelineError(2, path.string() + ": " + e.what());
  }
}

void dump_json(const std::filesystem::path& path, const json& j) {
  ts::atomic_write(path, j.dump(2) + "\n");
}

// --- gen-rollouts ----------------------------------------------------------
int cmd_gen_rollouts(const Common& common, int n, std::uint64_t seed, bool seed_set,
                     const std::string& preset_name, bool guarded, const std::string& q_path) {
  ts::PipelineConfig cfg = get_config(common);
  if (n <= 0) throw ts::PipelineError(1, "--n must be positive");
  const std::uint64_t base_seed = seed_set ? seed : cfg.base_seed;
  const auto out = ensure_out(common);

  ts::Simulator sim(cfg.world);
  std::vector<ts::ManifestInput> inputs;
  ts::SafetyQ q;
  ts::LearnedQ learned(&q);
  ts::MonitorFn guard;
  if (guarded) {
    if (q_path.empty()) throw ts::PipelineError(1, "--guarded requires --q CHECKPOINT");
    inputs.push_back(ts::require_manifest(q_path, {"train-q"}));
    q = load_q(q_path);
    guard = ts::make_guard(learned, cfg.filter, cfg.world.box);
  }
  auto [rollouts, metas] =
      ts::generate_rollouts(sim, preset(cfg, preset_name), n, base_seed, guarded ? &guard : nullptr);
  ts::write_rollouts(out / "rollouts.jsonl", rollouts, metas);

  const double ff = ts::failure_fraction(rollouts);
  json stats{{"episodes", n},
             {"preset", preset_name},
             {"base_seed", base_seed},
             {"guarded", guarded},
             {"failure_fraction", ff}};
  ts::write_manifest(out, "gen-rollouts", cfg, inputs, {"rollouts.jsonl"}, stats);
  std::cout << "episodes " << n << "  failure fraction " << ff << "\n";
  return 0;
}

// --- fit-criteria ----------------------------------------------------------
int cmd_fit_criteria(const Common& common, const std::string& demos_path,
                     const std::string& in_path) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs;
  inputs.push_back(ts::require_manifest(demos_path, {"gen-rollouts"}));

  auto [demos, demo_meta] = ts::read_rollouts(demos_path);
  ts::DistributionFit fit = ts::fit_from_rollouts(demos);
  dump_json(out / "criteria.json", ts::fit_to_json(fit, cfg.grasp_template));

  std::vector<std::string> outputs{"criteria.json"};
  if (!in_path.empty()) {
    inputs.push_back(ts::require_manifest(in_path, {"gen-rollouts"}));
    ts::Simulator sim(cfg.world);
    auto [rollouts, metas] = ts::read_rollouts(in_path);
    ts::annotate_scores(sim, fit, cfg.grasp_template, rollouts);
    ts::write_rollouts(out / "rollouts.jsonl", rollouts, metas);
    outputs.push_back("rollouts.jsonl");
  }

  json stats{{"reduced_dim", fit.mu.size()},
             {"retained_variance", fit.retained_variance},
             {"degenerate", fit.degenerate}};
  ts::write_manifest(out, "fit-criteria", cfg, inputs, outputs, stats);
  std::cout << "criteria fit: " << fit.mu.size() << " components, retained variance "
            << fit.retained_variance << "\n";
  return 0;
}

// --- train-weightnet -------------------------------------------------------
int cmd_train_weightnet(const Common& common, const std::string& in_path, bool equal_weights) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"fit-criteria"})};

  auto [rollouts, metas] = ts::read_rollouts(in_path);
  ts::WeightNet wn = ts::make_weightnet(cfg.weightnet);
  json stats{{"equal_weights", equal_weights}};
  if (equal_weights) {
    for (ts::DenseLayer& layer : wn.net.layers()) {
      layer.W.setZero();
      layer.b.setZero();
    }
    wn.tau = 0.5;
  } else {
    const auto trajs = ts::to_trajectory_samples(rollouts);
    const ts::WeightNetTrainReport rep = ts::train_weightnet(wn, trajs, cfg.weightnet);
    stats["initial_loss"] = rep.initial_loss;
    stats["final_loss"] = rep.final_loss;
    stats["tau"] = rep.tau;
    std::cout << "weightnet loss " << rep.initial_loss << " -> " << rep.final_loss << ", tau "
              << rep.tau << "\n";
  }
  ts::annotate_h(wn, rollouts);
  dump_json(out / "weightnet.json", wn.to_json());
  ts::write_rollouts(out / "rollouts.jsonl", rollouts, metas);
  ts::write_manifest(out, "train-weightnet", cfg, inputs, {"weightnet.json", "rollouts.jsonl"},
                     stats);
  return 0;
}

// --- label-q ---------------------------------------------------------------
int cmd_label_q(const Common& common, const std::string& in_path) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"train-weightnet"})};
  auto [rollouts, metas] = ts::read_rollouts(in_path);
  ts::annotate_labels(rollouts, cfg.qtrain.gamma);
  ts::write_rollouts(out / "rollouts.jsonl", rollouts, metas);
  ts::write_manifest(out, "label-q", cfg, inputs, {"rollouts.jsonl"},
                     json{{"gamma", cfg.qtrain.gamma}});
  return 0;
}

// --- train-q ---------------------------------------------------------------
int cmd_train_q(const Common& common, const std::string& in_path) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"label-q"})};
  auto [rollouts, metas] = ts::read_rollouts(in_path);
  const auto samples = ts::to_q_samples(rollouts);

  ts::SafetyQ q(cfg.qtrain.mlp);
  const ts::QTrainReport rep = ts::train_q(q, samples, cfg.qtrain);
  dump_json(out / "q.json", q.to_json());
  dump_json(out / "history.json", json{{"initial_loss", rep.initial_loss},
                                       {"final_loss", rep.final_loss},
                                       {"final_anchor_loss", rep.final_anchor_loss},
                                       {"final_hill_loss", rep.final_hill_loss},
                                       {"epochs", rep.epochs},
                                       {"samples", samples.size()}});
  ts::write_manifest(out, "train-q", cfg, inputs, {"q.json", "history.json"},
                     json{{"final_loss", rep.final_loss}, {"samples", samples.size()}});
  std::cout << "q loss " << rep.initial_loss << " -> " << rep.final_loss << " on "
            << samples.size() << " samples\n";
  return 0;
}

// --- verify-lipschitz ------------------------------------------------------
int cmd_verify_lipschitz(const Common& common, const std::string& ckpt_path, int pairs,
                         double mag_min, double mag_max, std::uint64_t seed) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{
      ts::require_manifest(ckpt_path, {"train-q", "train-weightnet"})};

  std::string kind;
  ts::LipschitzMlp net;
  try {
    net = ts::LipschitzMlp::from_json(json::parse(ts::read_file(ckpt_path)), &kind);
  } catch (const nlohmann::json::exception& e) {
    throw ts::PipelineError(2, ckpt_path + ": " + e.what());
  }
  const ts::LipschitzAudit audit = ts::verify_lipschitz(net, pairs, mag_min, mag_max, seed);

  json report{{"kind", kind},
              {"pairs", audit.pairs},
              {"mag_min", mag_min},
              {"mag_max", mag_max},
              {"seed", seed},
              {"bound", audit.bound},
              {"max_ratio", audit.max_ratio},
              {"passed", audit.passed}};
  dump_json(out / "lipschitz_report.json", report);
  ts::write_manifest(out, "verify-lipschitz", cfg, inputs, {"lipschitz_report.json"}, report);
  std::cout << "lipschitz audit (" << kind << "): max ratio " << audit.max_ratio << " vs bound "
            << audit.bound << " -> " << (audit.passed ? "pass" : "FAIL") << "\n";
  return audit.passed ? 0 : 3;
}

// --- evaluate --------------------------------------------------------------
int cmd_evaluate(const Common& common, const std::string& q_path, const std::string& in_path,
                 const std::string& format) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"label-q"}),
                                        ts::require_manifest(q_path, {"train-q"})};
  ts::SafetyQ q = load_q(q_path);
  auto [rollouts, metas] = ts::read_rollouts(in_path);
  const ts::ActionBox box = cfg.world.box;

  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> lead_times;
  int failed = 0, false_safe_traj = 0, ep_correct = 0;
  std::vector<double> ep_scores;
  std::vector<int> ep_labels;
  std::ostringstream csv;
  csv << "episode,t,q,label,outcome\n";
  for (const ts::Rollout& r : rollouts) {
    double min_q = std::numeric_limits<double>::infinity();
    std::vector<double> trace;
    for (const ts::RolloutRecord& rec : r.records) {
      if (!rec.q_label) throw ts::PipelineError(2, "evaluate: input has no q labels");
      const double qv = q.value(rec.state.embedding, rec.action, box);
      scores.push_back(qv);
      labels.push_back(*rec.q_label >= 0.0 ? 1 : 0);
      trace.push_back(qv);
      min_q = std::min(min_q, qv);
      csv << r.episode_id << ',' << rec.state.t << ',' << qv << ','
          << (*rec.q_label >= 0.0 ? 1 : 0) << ','
          << (&rec == &r.records.back()
                  ? (r.outcome == ts::Outcome::Success ? "success" : "failure")
                  : "")
          << "\n";
    }
    const bool success = r.outcome == ts::Outcome::Success;
    ep_scores.push_back(min_q);
    ep_labels.push_back(success ? 1 : 0);
    if ((min_q >= 0.0) == success) ++ep_correct;
    if (!success) {
      ++failed;
      const auto lead =
          ts::detection_lead_time(trace, static_cast<int>(r.records.size()) - 1);
      if (lead)
        lead_times.push_back(std::max(0, *lead));
      else
        ++false_safe_traj;
    }
  }

  const ts::ClassificationMetrics m = ts::classification_metrics(scores, labels, 0.0);
  const ts::ClassificationMetrics ep_m = ts::classification_metrics(ep_scores, ep_labels, 0.0);
  double mean_lead = 0.0;
  for (int lt : lead_times) mean_lead += lt;
  if (!lead_times.empty()) mean_lead /= double(lead_times.size());

  json report;
  report["calibration"] = {{"auroc", m.auroc},
                           {"auprc", m.auprc},
                           {"ece", m.ece},
                           {"false_safe_rate", m.false_safe_rate},
                           {"false_unsafe_rate", m.false_unsafe_rate},
                           {"n_pos", m.n_pos},
                           {"n_neg", m.n_neg}};
  report["detection"] = {{"failed_episodes", failed},
                         {"mean_lead_time", mean_lead},
                         {"detected_fraction",
                          failed > 0 ? double(lead_times.size()) / failed : 0.0},
                         {"false_safe_trajectories", false_safe_traj},
                         {"episode_auroc", ep_m.auroc},
                         {"episode_accuracy",
                          rollouts.empty() ? 0.0 : double(ep_correct) / rollouts.size()}};
  dump_json(out / "evaluate_report.json", report);
  std::vector<std::string> outputs{"evaluate_report.json"};
  if (format == "csv") {
    ts::atomic_write(out / "curves.csv", csv.str());
    outputs.push_back("curves.csv");
  }
  ts::write_manifest(out, "evaluate", cfg, inputs, outputs, report);

  std::cout << "state-level      AUROC " << m.auroc << "  AUPRC " << m.auprc << "  ECE " << m.ece
            << "\n"
            << "threshold 0      false-safe " << m.false_safe_rate << "  false-unsafe "
            << m.false_unsafe_rate << "\n"
            << "episodes         lead time " << mean_lead << "  detected "
            << (failed > 0 ? double(lead_times.size()) / failed : 0.0) << "  episode AUROC "
            << ep_m.auroc << "\n";
  return 0;
}

// --- recover-bench ---------------------------------------------------------
int cmd_recover_bench(const Common& common, const std::string& in_path, int n_starts,
                      std::uint64_t seed) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"label-q"})};
  auto [rollouts, metas] = ts::read_rollouts(in_path);
  const auto samples = ts::to_q_samples(rollouts);
  const auto starts = ts::make_unsafe_starts(rollouts, n_starts, 0.8, 1.6, seed);

  ts::QTrainConfig cfg_a = cfg.qtrain;  // no Lipschitz constraint, no hill term
  cfg_a.mlp.spectral = false;
  cfg_a.mlp.lipschitz = -1.0;
  cfg_a.hill_lambda = 0.0;
  ts::QTrainConfig cfg_b = cfg.qtrain;  // Lipschitz constraint only
  cfg_b.hill_lambda = 0.0;

  ts::SafetyQ qa(cfg_a.mlp), qb(cfg_b.mlp), qc(cfg.qtrain.mlp);
  ts::train_q(qa, samples, cfg_a);
  ts::train_q(qb, samples, cfg_b);
  ts::train_q(qc, samples, cfg.qtrain);
  const ts::LearnedQ la(&qa), lb(&qb), lc(&qc);

  const ts::AblationResult ra = ts::ablation_benchmark(la, starts);
  const ts::AblationResult rb = ts::ablation_benchmark(lb, starts);
  const ts::AblationResult rc = ts::ablation_benchmark(lc, starts);

  // Latency + step-identity audit of the actual runtime filter.
  double max_step_dev = 0.0;
  int filter_calls = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const ts::AblationCase& c : starts) {
    const ts::FilterResult res = ts::filter_action(
        lc, c.embedding, ts::denormalize_action(c.a_norm, cfg.world.box), cfg.filter,
        cfg.world.box);
    for (double sn : res.step_norms)
      max_step_dev = std::max(max_step_dev, std::abs(sn - cfg.filter.eta));
    ++filter_calls;
  }
  const double mean_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
      std::max(1, filter_calls);

  auto row = [](const char* name, const ts::AblationResult& r) {
    return json{{"variant", name},
                {"success_rate", r.success_rate},
                {"mean_grad_norm", r.mean_grad_norm},
                {"mean_steps", r.mean_steps}};
  };
  json report;
  report["unsafe_starts"] = n_starts;
  report["seed"] = seed;
  report["rows"] = json::array({row("no_constraints", ra), row("lipschitz", rb),
                                row("lipschitz_hill", rc)});
  report["filter_mean_ms"] = mean_ms;
  report["max_step_norm_deviation"] = max_step_dev;
  dump_json(out / "recover_report.json", report);
  ts::write_manifest(out, "recover-bench", cfg, inputs, {"recover_report.json"}, report);

  std::printf("%-16s %8s %10s %8s\n", "variant", "success", "mean|grad|", "steps");
  const std::vector<std::pair<const char*, const ts::AblationResult*>> table{
      {"no_constraints", &ra}, {"lipschitz", &rb}, {"lipschitz_hill", &rc}};
  for (const auto& [name, r] : table)
    std::printf("%-16s %8.3f %10.4f %8.1f\n", name, r->success_rate, r->mean_grad_norm,
                r->mean_steps);
  std::printf("filter: mean %.3f ms/call, max pre-projection step deviation %.2e\n", mean_ms,
              max_step_dev);
  return 0;
}

// --- baseline --------------------------------------------------------------
int cmd_baseline(const Common& common, const std::string& in_path, const std::string& q_path,
                 int ensemble_k) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  if (ensemble_k < 2) throw ts::PipelineError(1, "--ensemble-k must be at least 2");
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(in_path, {"label-q"}),
                                        ts::require_manifest(q_path, {"train-q"})};
  ts::SafetyQ q = load_q(q_path);
  const ts::LearnedQ lq(&q);
  auto [rollouts, metas] = ts::read_rollouts(in_path);
  const auto samples = ts::to_q_samples(rollouts);
  const ts::ActionBox box = cfg.world.box;
  json report;

  // Learned-CBF baseline: per-step classifier, same architecture.
  {
    const ts::LipschitzMlp cbf = ts::train_cbf(samples, cfg.cbf);
    const ts::CbfBarrier barrier(&cbf);

    std::vector<double> cbf_scores;
    std::vector<int> labels;
    std::vector<ts::AblationCase> unsafe_cases;
    for (const ts::QSample& s : samples) {
      Eigen::Vector4d a = ts::normalize_action(s.action, box);
      cbf_scores.push_back(barrier.value(s.embedding, a));
      labels.push_back(s.y >= 0.0 ? 1 : 0);
      if (s.y < 0.0) unsafe_cases.push_back(ts::AblationCase{s.embedding, a});
    }
    const ts::ClassificationMetrics m = ts::classification_metrics(cbf_scores, labels, 0.0);
    const double flat_cbf = ts::flat_gradient_fraction(barrier, unsafe_cases, 1e-2);
    const double flat_q = ts::flat_gradient_fraction(lq, unsafe_cases, 1e-2);

    // Recovery usefulness, judged by the reach-avoid Q as oracle.
    int rec_cbf = 0, rec_q = 0, attempts = 0;
    for (std::size_t i = 0; i < unsafe_cases.size(); i += std::max<std::size_t>(1, unsafe_cases.size() / 200)) {
      const ts::AblationCase& c = unsafe_cases[i];
      const ts::ActionDelta raw = ts::denormalize_action(c.a_norm, box);
      const ts::FilterResult fc = ts::filter_action(barrier, c.embedding, raw, cfg.filter, box);
      const ts::FilterResult fq = ts::filter_action(lq, c.embedding, raw, cfg.filter, box);
      if (q.value(c.embedding, fc.action, box) >= 0.0) ++rec_cbf;
      if (q.value(c.embedding, fq.action, box) >= 0.0) ++rec_q;
      ++attempts;
    }
    report["cbf"] = {{"auroc", m.auroc},
                     {"flat_grad_fraction", flat_cbf},
                     {"flat_grad_fraction_q", flat_q},
                     {"true_recovery_rate", attempts ? double(rec_cbf) / attempts : 0.0},
                     {"true_recovery_rate_q", attempts ? double(rec_q) / attempts : 0.0},
                     {"recovery_attempts", attempts}};
  }

  // Instantaneous-h baseline: deceptive-state analysis.
  {
    std::vector<double> h_succ, h_fail, q_succ, q_fail;
    int agree = 0, non_deceptive = 0;
    for (const ts::Rollout& r : rollouts)
      for (const ts::RolloutRecord& rec : r.records) {
        if (!rec.h) throw ts::PipelineError(2, "baseline: input has no h annotations");
        const double qv = q.value(rec.state.embedding, rec.action, box);
        const bool deceptive = *rec.h > 0.0 && r.outcome == ts::Outcome::Failure;
        if (*rec.h > 0.0) {
          (r.outcome == ts::Outcome::Success ? h_succ : h_fail).push_back(*rec.h);
          (r.outcome == ts::Outcome::Success ? q_succ : q_fail).push_back(qv);
        }
        if (!deceptive) {
          ++non_deceptive;
          if ((*rec.h >= 0.0) == (qv >= 0.0)) ++agree;
        }
      }
    if (h_fail.size() < 10) {
      report["instant_h"] = {{"skipped", "fewer than 10 deceptive states"}};
    } else {
      report["instant_h"] = {{"deceptive_states", h_fail.size()},
                             {"cohens_d_h", ts::cohens_d(h_succ, h_fail)},
                             {"cohens_d_q", ts::cohens_d(q_succ, q_fail)},
                             {"sign_agreement_non_deceptive",
                              non_deceptive ? double(agree) / non_deceptive : 0.0}};
    }
  }

  // Ensemble-disagreement baseline: variance of scripted-policy variants.
  {
    ts::Simulator sim(cfg.world);
    std::vector<double> offsets;
    for (int k = 0; k < ensemble_k; ++k)
      offsets.push_back(0.15 * (k - (ensemble_k - 1) / 2.0));
    std::vector<double> neg_variance;
    std::vector<int> labels;
    std::vector<std::pair<double, double>> var_dq;
    for (std::size_t e = 0; e < rollouts.size(); ++e) {
      const ts::Rollout& r = rollouts[e];
      const ts::EpisodeContext ctx{r.seed, metas[e].sigma};
      for (const ts::RolloutRecord& rec : r.records) {
        const ts::Observation obs = sim.observe(rec.state, ctx);
        std::vector<ts::ActionDelta> actions;
        for (double off : offsets)
          actions.push_back(box.clip(sim.nominal_policy_variant(rec.state, obs, off)));
        const double var = ts::action_variance(actions, box);
        neg_variance.push_back(-var);  // high variance should mean unsafe
        if (!rec.q_label) throw ts::PipelineError(2, "baseline: input has no q labels");
        labels.push_back(*rec.q_label >= 0.0 ? 1 : 0);
        const double dq = q.value(rec.state.embedding, ts::mean_action(actions), box) -
                          q.value(rec.state.embedding, rec.action, box);
        var_dq.emplace_back(var, dq);
      }
    }
    const ts::ClassificationMetrics m = ts::classification_metrics(neg_variance, labels, 0.0);
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
    report["ensemble"] = {{"k", ensemble_k},
                          {"auroc", m.auroc},
                          {"flagged_states", flagged},
                          {"mean_dq_flagged", mean_dq}};
  }

  dump_json(out / "baseline_report.json", report);
  ts::write_manifest(out, "baseline", cfg, inputs, {"baseline_report.json"}, report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// --- run-guarded -----------------------------------------------------------
int cmd_run_guarded(const Common& common, const std::string& q_path, int episodes,
                    std::uint64_t seed, bool seed_set) {
  ts::PipelineConfig cfg = get_config(common);
  const auto out = ensure_out(common);
  if (episodes <= 0) throw ts::PipelineError(1, "--episodes must be positive");
  std::vector<ts::ManifestInput> inputs{ts::require_manifest(q_path, {"train-q"})};
  const std::uint64_t base_seed = seed_set ? seed : cfg.base_seed;

  ts::Simulator sim(cfg.world);
  ts::SafetyQ q = load_q(q_path);
  const ts::LearnedQ lq(&q);
  const ts::MonitorFn guard = ts::make_guard(lq, cfg.filter, cfg.world.box);

  const ts::GuardedStats unguarded =
      ts::run_batch(sim, cfg.eval_perturb, episodes, base_seed, nullptr);
  const ts::GuardedStats guarded =
      ts::run_batch(sim, cfg.eval_perturb, episodes, base_seed, &guard);

  // Trace dump of the guarded episodes for inspection/plotting.
  auto [rollouts, metas] =
      ts::generate_rollouts(sim, cfg.eval_perturb, episodes, base_seed, &guard);
  ts::write_rollouts(out / "rollouts.jsonl", rollouts, metas);

  auto stats_json = [](const ts::GuardedStats& s) {
    return json{{"episodes", s.episodes},
                {"success_rate", s.success_rate},
                {"mean_steps_success", s.mean_steps_success},
                {"mean_recoveries", s.mean_recoveries}};
  };
  json report{{"seed", base_seed},
              {"unguarded", stats_json(unguarded)},
              {"guarded", stats_json(guarded)}};
  dump_json(out / "guarded_report.json", report);
  ts::write_manifest(out, "run-guarded", cfg, inputs, {"guarded_report.json", "rollouts.jsonl"},
                     report);

  std::printf("%-10s %8s %8s %10s\n", "", "success", "steps", "recoveries");
  std::printf("%-10s %8.3f %8.1f %10s\n", "unguarded", unguarded.success_rate,
              unguarded.mean_steps_success, "-");
  std::printf("%-10s %8.3f %8.1f %10.2f\n", "guarded", guarded.success_rate,
              guarded.mean_steps_success, guarded.mean_recoveries);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tailsafe: safety watchdog pipeline for a planar pick-and-place policy"};
  app.require_subcommand(1);
  int ret = 0;

  Common common;
  app.add_option("--config", common.config_path,
                 "pipeline config JSON (default: $TAILSAFE_CONFIG or built-in defaults)");

  // gen-rollouts
  auto* gen = app.add_subcommand("gen-rollouts", "generate scripted-policy episodes");
  int gen_n = 500;
  std::uint64_t gen_seed = 0;
  std::string gen_preset = "train", gen_q;
  bool gen_guarded = false;
  gen->add_option("--n", gen_n, "number of episodes");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--preset", gen_preset, "perturbation preset: demo|train|eval");
  gen->add_flag("--guarded,!--unguarded", gen_guarded, "run with the recovery filter");
  gen->add_option("--q", gen_q, "Q checkpoint (required with --guarded)");
  gen->add_option("--out", common.out_dir, "output directory")->required();
  gen->callback([&] {
    ret = cmd_gen_rollouts(common, gen_n, gen_seed, !gen_seed_opt->empty(), gen_preset,
                           gen_guarded, gen_q);
  });

  // fit-criteria
  auto* fit = app.add_subcommand("fit-criteria", "fit the demo feature distribution");
  std::string fit_demos, fit_in;
  fit->add_option("--demos", fit_demos, "demo rollouts JSONL")->required();
  fit->add_option("--in", fit_in, "rollouts to annotate with scores");
  fit->add_option("--out", common.out_dir, "output directory")->required();
  fit->callback([&] { ret = cmd_fit_criteria(common, fit_demos, fit_in); });

  // train-weightnet
  auto* twn = app.add_subcommand("train-weightnet", "train the score-fusion WeightNet");
  std::string twn_in;
  bool twn_equal = false;
  twn->add_option("--in", twn_in, "scored rollouts JSONL")->required();
  twn->add_flag("--equal-weights", twn_equal, "emit the uniform-weight baseline instead");
  twn->add_option("--out", common.out_dir, "output directory")->required();
  twn->callback([&] { ret = cmd_train_weightnet(common, twn_in, twn_equal); });

  // label-q
  auto* lab = app.add_subcommand("label-q", "propagate reach-avoid labels");
  std::string lab_in;
  lab->add_option("--in", lab_in, "rollouts with h")->required();
  lab->add_option("--out", common.out_dir, "output directory")->required();
  lab->callback([&] { ret = cmd_label_q(common, lab_in); });

  // train-q
  auto* tq = app.add_subcommand("train-q", "train the reach-avoid Q net");
  std::string tq_in;
  tq->add_option("--in", tq_in, "labeled rollouts")->required();
  tq->add_option("--out", common.out_dir, "output directory")->required();
  tq->callback([&] { ret = cmd_train_q(common, tq_in); });

  // verify-lipschitz
  auto* ver = app.add_subcommand("verify-lipschitz", "empirical Lipschitz audit of a checkpoint");
  std::string ver_ckpt;
  int ver_pairs = 10000;
  double ver_min = 1e-4, ver_max = 1e-1;
  std::uint64_t ver_seed = 1234;
  ver->add_option("--checkpoint", ver_ckpt, "network checkpoint JSON")->required();
  ver->add_option("--pairs", ver_pairs, "number of input pairs");
  ver->add_option("--mag-min", ver_min, "min perturbation magnitude");
  ver->add_option("--mag-max", ver_max, "max perturbation magnitude");
  ver->add_option("--seed", ver_seed, "audit seed");
  ver->add_option("--out", common.out_dir, "output directory")->required();
  ver->callback(
      [&] { ret = cmd_verify_lipschitz(common, ver_ckpt, ver_pairs, ver_min, ver_max, ver_seed); });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "detection & calibration metrics of a Q checkpoint");
  std::string ev_q, ev_in, ev_format = "json";
  ev->add_option("--q", ev_q, "Q checkpoint")->required();
  ev->add_option("--in", ev_in, "labeled rollouts")->required();
  ev->add_option("--format", ev_format, "json|csv (csv adds per-step curves)");
  ev->add_option("--out", common.out_dir, "output directory")->required();
  ev->callback([&] { ret = cmd_evaluate(common, ev_q, ev_in, ev_format); });

  // recover-bench
  auto* rb = app.add_subcommand("recover-bench",
                                "train Q variants and benchmark gradient-ascent recovery");
  std::string rb_in;
  int rb_n = 200;
  std::uint64_t rb_seed = 42;
  rb->add_option("--in", rb_in, "labeled rollouts")->required();
  rb->add_option("--n", rb_n, "number of unsafe starts");
  rb->add_option("--seed", rb_seed, "benchmark seed");
  rb->add_option("--out", common.out_dir, "output directory")->required();
  rb->callback([&] { ret = cmd_recover_bench(common, rb_in, rb_n, rb_seed); });

  // baseline
  auto* bl = app.add_subcommand("baseline", "CBF / instantaneous-h / ensemble baselines");
  std::string bl_in, bl_q;
  int bl_k = 5;
  bl->add_option("--in", bl_in, "labeled rollouts")->required();
  bl->add_option("--q", bl_q, "Q checkpoint")->required();
  bl->add_option("--ensemble-k", bl_k, "number of policy variants");
  bl->add_option("--out", common.out_dir, "output directory")->required();
  bl->callback([&] { ret = cmd_baseline(common, bl_in, bl_q, bl_k); });

  // run-guarded
  auto* rg = app.add_subcommand("run-guarded", "guarded vs unguarded episode batches");
  std::string rg_q;
  int rg_episodes = 200;
  std::uint64_t rg_seed = 0;
  rg->add_option("--q", rg_q, "Q checkpoint")->required();
  rg->add_option("--episodes", rg_episodes, "episodes per batch");
  auto* rg_seed_opt = rg->add_option("--seed", rg_seed, "base seed");
  rg->add_option("--out", common.out_dir, "output directory")->required();
  rg->callback(
      [&] { ret = cmd_run_guarded(common, rg_q, rg_episodes, rg_seed, !rg_seed_opt->empty()); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ts::PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return ret;
}
