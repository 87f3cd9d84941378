#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailsafe/evaluation.hpp"
#include "tailsafe/recovery.hpp"
#include "tailsafe/safetyq.hpp"
#include "tailsafe/weightnet.hpp"
#include "tailsafe/world.hpp"

namespace tailsafe {

// Exit-code conventions shared by the CLI: 1 usage, 2 data/schema, 3 failed
// acceptance-style check.
struct PipelineError : std::runtime_error {
  PipelineError(int code, const std::string& msg) : std::runtime_error(msg), exit_code(code) {}
  int exit_code;
};

struct PipelineConfig {
  WorldConfig world{};
  PerturbationSpec demo_perturb{0.015, 0.15, 0.01, 0.02, 0};
  PerturbationSpec train_perturb{0.05, 0.5236, 0.01, 0.05, 0};
  PerturbationSpec eval_perturb{0.075, 0.5236, 0.01, 0.05, 0};
  WeightNetConfig weightnet{};
  QTrainConfig qtrain{};
  CbfConfig cbf{};
  FilterConfig filter{};
  GraspSet grasp_template = symmetric_grasp_template();
  std::uint64_t base_seed = 7;
};

PipelineConfig default_config();
// Parses and validates; unknown keys anywhere are rejected (exit code 2).
PipelineConfig config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);

std::uint64_t fnv1a(const std::string& bytes);
std::string config_hash(const PipelineConfig& cfg);  // hex FNV-1a of canonical JSON

// --- on-disk formats -------------------------------------------------------
// One JSONL line per step:
//   {"episode":i,"t":t,"seed":s,"sigma":x,
//    "state":{"ee":[x,y,th],"grip":g,"object":[x,y,th],"emb":[...]},
//    "action":[dx,dy,dth,dg],"scores":[fov,rec,grasp]|null,
//    "h":null|number,"q":null|number,"outcome":null|"success"|"failure"}
// `outcome` is non-null only on the episode's last line. `sigma` is the
// episode observation-noise level, repeated on every line for parse locality.

struct EpisodeMeta {
  double sigma = 0.0;
};

void write_rollouts(const std::filesystem::path& path, const std::vector<Rollout>& rollouts,
                    const std::vector<EpisodeMeta>& meta);
std::pair<std::vector<Rollout>, std::vector<EpisodeMeta>> read_rollouts(
    const std::filesystem::path& path);

void atomic_write(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

nlohmann::ordered_json fit_to_json(const DistributionFit& fit, const GraspSet& tmpl);
std::pair<DistributionFit, GraspSet> fit_from_json(const nlohmann::ordered_json& j);

// --- manifests -------------------------------------------------------------
// Every command writes its artifacts plus exactly one manifest.json into its
// output directory; downstream stages refuse inputs whose directory carries
// no manifest (stage-order check) and record input hashes for traceability.
struct ManifestInput {
  std::string path;
  std::string hash;
  std::string stage;  // producing stage, from the input's manifest
};

void write_manifest(const std::filesystem::path& dir, const std::string& stage,
                    const PipelineConfig& cfg, const std::vector<ManifestInput>& inputs,
                    const std::vector<std::string>& outputs,
                    const nlohmann::ordered_json& stats);
// Loads <dir(input)>/manifest.json and returns the input's lineage entry.
ManifestInput require_manifest(const std::filesystem::path& input,
                               const std::vector<std::string>& allowed_stages);

// --- pipeline stages -------------------------------------------------------
std::pair<std::vector<Rollout>, std::vector<EpisodeMeta>> generate_rollouts(
    const Simulator& sim, const PerturbationSpec& spec, int n, std::uint64_t base_seed,
    const MonitorFn* monitor = nullptr);

double failure_fraction(const std::vector<Rollout>& rollouts);

// Fits the demo feature distribution on all steps of successful episodes.
DistributionFit fit_from_rollouts(const std::vector<Rollout>& demos);

SafetyScores score_record(const Simulator& sim, const DistributionFit& fit,
                          const GraspSet& tmpl, const WorldState& state,
                          const ActionDelta& action);
void annotate_scores(const Simulator& sim, const DistributionFit& fit, const GraspSet& tmpl,
                     std::vector<Rollout>& rollouts);

std::vector<TrajectorySample> to_trajectory_samples(const std::vector<Rollout>& rollouts);

void annotate_h(const WeightNet& wn, std::vector<Rollout>& rollouts);
// Fills the q field with reach-avoid labels propagated from h and the outcome.
void annotate_labels(std::vector<Rollout>& rollouts, double gamma);

std::vector<QSample> to_q_samples(const std::vector<Rollout>& rollouts);

// Perturbed pre-grasp states drawn from successful episodes, with the stored
// action pushed far from the demonstrated one. Shared by the ablation
// benchmark and the baselines so every variant sees identical starts.
std::vector<AblationCase> make_unsafe_starts(const std::vector<Rollout>& rollouts, int n,
                                             double delta_min, double delta_max,
                                             std::uint64_t seed);

struct GuardedStats {
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_steps_success = 0.0;
  double mean_recoveries = 0.0;
};

GuardedStats run_batch(const Simulator& sim, const PerturbationSpec& spec, int n,
                       std::uint64_t base_seed, const MonitorFn* monitor = nullptr);

// Monitor adapter: runs the recovery filter on every proposed action.
MonitorFn make_guard(const QFunction& q, const FilterConfig& cfg, const ActionBox& box);

}  // namespace tailsafe
