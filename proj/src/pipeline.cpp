#include "tailsafe/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace tailsafe {

namespace {

using json = nlohmann::ordered_json;

json vec_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Eigen::VectorXd vec_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

json pose_to_json(const PoseSE2& p) { return json::array({p.x, p.y, p.theta}); }

PoseSE2 pose_from_json(const json& j) {
  return PoseSE2{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw PipelineError(2, "config: " + where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (allowed.find(key) == allowed.end())
      throw PipelineError(2, "config: unknown key '" + key + "' in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::vector<int> stack_dims(int input, int hidden, int layers, int output) {
  std::vector<int> dims{input};
  for (int i = 0; i < layers - 1; ++i) dims.push_back(hidden);
  dims.push_back(output);
  return dims;
}

}  // namespace

PipelineConfig default_config() { return PipelineConfig{}; }

nlohmann::ordered_json config_to_json(const PipelineConfig& cfg) {
  json j;
  json world;
  world["ee_start"] = pose_to_json(cfg.world.ee_start);
  world["nominal_object"] = pose_to_json(cfg.world.nominal_object);
  world["place_pose"] = pose_to_json(cfg.world.place_pose);
  world["object_radius"] = cfg.world.object_radius;
  world["object_point_count"] = cfg.world.object_point_count;
  world["horizon"] = cfg.world.horizon;
  world["grasp_tol_t"] = cfg.world.grasp_tol_t;
  world["grasp_tol_r"] = cfg.world.grasp_tol_r;
  world["place_tol"] = cfg.world.place_tol;
  world["pose_noise_scale"] = cfg.world.pose_noise_scale;
  world["rot_noise_scale"] = cfg.world.rot_noise_scale;
  world["embedding_noise_scale"] = cfg.world.embedding_noise_scale;
  world["embedding_seed"] = cfg.world.embedding_seed;
  world["box"] = {{"dx", cfg.world.box.dx},
                  {"dy", cfg.world.box.dy},
                  {"dtheta", cfg.world.box.dtheta},
                  {"dgrip", cfg.world.box.dgrip}};
  world["camera"] = {{"width", cfg.world.camera.width},
                     {"height", cfg.world.camera.height},
                     {"fov_half_angle", cfg.world.camera.fov_half_angle},
                     {"max_range", cfg.world.camera.max_range},
                     {"near_range", cfg.world.camera.near_range}};
  world["policy"] = {{"k_vis", cfg.world.policy.k_vis},
                     {"r_blind", cfg.world.policy.r_blind},
                     {"r_align", cfg.world.policy.r_align},
                     {"close_trigger", cfg.world.policy.close_trigger},
                     {"close_rot_trigger", cfg.world.policy.close_rot_trigger},
                     {"kp_t", cfg.world.policy.kp_t},
                     {"kp_r", cfg.world.policy.kp_r},
                     {"vis_q_lo", cfg.world.policy.vis_q_lo},
                     {"vis_q_hi", cfg.world.policy.vis_q_hi}};
  j["world"] = std::move(world);

  auto perturb = [](const PerturbationSpec& p) {
    return json{{"displacement_range", p.displacement_range},
                {"rotation_range", p.rotation_range},
                {"noise_sigma_min", p.noise_sigma_min},
                {"noise_sigma_max", p.noise_sigma_max}};
  };
  j["perturb"] = {{"demo", perturb(cfg.demo_perturb)},
                  {"train", perturb(cfg.train_perturb)},
                  {"eval", perturb(cfg.eval_perturb)}};

  j["weightnet"] = {{"hidden", cfg.weightnet.mlp.dims.size() > 2 ? cfg.weightnet.mlp.dims[1] : 256},
                    {"layers", static_cast<int>(cfg.weightnet.mlp.dims.size()) - 1},
                    {"lipschitz", cfg.weightnet.mlp.lipschitz},
                    {"softplus_beta", cfg.weightnet.mlp.softplus_beta},
                    {"seed", cfg.weightnet.mlp.seed},
                    {"tau_init", cfg.weightnet.tau_init},
                    {"bce_sharpness", cfg.weightnet.bce_sharpness},
                    {"lr", cfg.weightnet.adam.lr},
                    {"batch_size", cfg.weightnet.batch_size},
                    {"epochs", cfg.weightnet.epochs},
                    {"shuffle_seed", cfg.weightnet.shuffle_seed}};

  j["q"] = {{"hidden", cfg.qtrain.mlp.dims.size() > 2 ? cfg.qtrain.mlp.dims[1] : 512},
            {"layers", static_cast<int>(cfg.qtrain.mlp.dims.size()) - 1},
            {"lipschitz", cfg.qtrain.mlp.lipschitz},
            {"softplus_beta", cfg.qtrain.mlp.softplus_beta},
            {"seed", cfg.qtrain.mlp.seed},
            {"lr", cfg.qtrain.adam.lr},
            {"batch_size", cfg.qtrain.batch_size},
            {"epochs", cfg.qtrain.epochs},
            {"gamma", cfg.qtrain.gamma},
            {"hill_alpha", cfg.qtrain.hill_alpha},
            {"hill_lambda", cfg.qtrain.hill_lambda},
            {"hill_noise", cfg.qtrain.hill_noise},
            {"shuffle_seed", cfg.qtrain.shuffle_seed},
            {"holdout_fraction", cfg.qtrain.holdout_fraction}};

  j["cbf"] = {{"seed", cfg.cbf.mlp.seed},
              {"lr", cfg.cbf.adam.lr},
              {"batch_size", cfg.cbf.batch_size},
              {"epochs", cfg.cbf.epochs},
              {"shuffle_seed", cfg.cbf.shuffle_seed}};

  j["grasp"] = {{"sigma_t", cfg.grasp_template.sigma_t},
                {"sigma_r", cfg.grasp_template.sigma_r},
                {"w_t", cfg.grasp_template.w_t},
                {"w_r", cfg.grasp_template.w_r}};

  j["filter"] = {{"eta", cfg.filter.eta},
                 {"k_max", cfg.filter.k_max},
                 {"grad_floor", cfg.filter.grad_floor},
                 {"threshold", cfg.filter.threshold}};

  j["seed"] = cfg.base_seed;
  return j;
}

PipelineConfig config_from_json(const nlohmann::ordered_json& j) {
  PipelineConfig cfg;
  check_keys(j, {"world", "perturb", "weightnet", "q", "cbf", "grasp", "filter", "seed"},
             "top level");

  if (j.contains("world")) {
    const json& w = j.at("world");
    check_keys(w,
               {"ee_start", "nominal_object", "place_pose", "object_radius",
                "object_point_count", "horizon", "grasp_tol_t", "grasp_tol_r", "place_tol",
                "pose_noise_scale", "rot_noise_scale", "embedding_noise_scale",
                "embedding_seed", "box", "camera",
                "policy"},
               "world");
    if (w.contains("ee_start")) cfg.world.ee_start = pose_from_json(w.at("ee_start"));
    if (w.contains("nominal_object")) cfg.world.nominal_object = pose_from_json(w.at("nominal_object"));
    if (w.contains("place_pose")) cfg.world.place_pose = pose_from_json(w.at("place_pose"));
    maybe(w, "object_radius", cfg.world.object_radius);
    maybe(w, "object_point_count", cfg.world.object_point_count);
    maybe(w, "horizon", cfg.world.horizon);
    maybe(w, "grasp_tol_t", cfg.world.grasp_tol_t);
    maybe(w, "grasp_tol_r", cfg.world.grasp_tol_r);
    maybe(w, "place_tol", cfg.world.place_tol);
    maybe(w, "pose_noise_scale", cfg.world.pose_noise_scale);
    maybe(w, "rot_noise_scale", cfg.world.rot_noise_scale);
    maybe(w, "embedding_noise_scale", cfg.world.embedding_noise_scale);
    maybe(w, "embedding_seed", cfg.world.embedding_seed);
    if (w.contains("box")) {
      const json& b = w.at("box");
      check_keys(b, {"dx", "dy", "dtheta", "dgrip"}, "world.box");
      maybe(b, "dx", cfg.world.box.dx);
      maybe(b, "dy", cfg.world.box.dy);
      maybe(b, "dtheta", cfg.world.box.dtheta);
      maybe(b, "dgrip", cfg.world.box.dgrip);
    }
    if (w.contains("camera")) {
      const json& c = w.at("camera");
      check_keys(c, {"width", "height", "fov_half_angle", "max_range", "near_range"},
                 "world.camera");
      maybe(c, "width", cfg.world.camera.width);
      maybe(c, "height", cfg.world.camera.height);
      maybe(c, "fov_half_angle", cfg.world.camera.fov_half_angle);
      maybe(c, "max_range", cfg.world.camera.max_range);
      maybe(c, "near_range", cfg.world.camera.near_range);
    }
    if (w.contains("policy")) {
      const json& p = w.at("policy");
      check_keys(p,
                 {"k_vis", "r_blind", "r_align", "close_trigger", "close_rot_trigger", "kp_t",
                  "kp_r", "vis_q_lo", "vis_q_hi"},
                 "world.policy");
      maybe(p, "k_vis", cfg.world.policy.k_vis);
      maybe(p, "r_blind", cfg.world.policy.r_blind);
      maybe(p, "r_align", cfg.world.policy.r_align);
      maybe(p, "close_trigger", cfg.world.policy.close_trigger);
      maybe(p, "close_rot_trigger", cfg.world.policy.close_rot_trigger);
      maybe(p, "kp_t", cfg.world.policy.kp_t);
      maybe(p, "kp_r", cfg.world.policy.kp_r);
      maybe(p, "vis_q_lo", cfg.world.policy.vis_q_lo);
      maybe(p, "vis_q_hi", cfg.world.policy.vis_q_hi);
    }
  }

  if (j.contains("perturb")) {
    const json& p = j.at("perturb");
    check_keys(p, {"demo", "train", "eval"}, "perturb");
    auto parse = [&](const char* key, PerturbationSpec& spec) {
      if (!p.contains(key)) return;
      const json& s = p.at(key);
      check_keys(s, {"displacement_range", "rotation_range", "noise_sigma_min", "noise_sigma_max"},
                 std::string("perturb.") + key);
      maybe(s, "displacement_range", spec.displacement_range);
      maybe(s, "rotation_range", spec.rotation_range);
      maybe(s, "noise_sigma_min", spec.noise_sigma_min);
      maybe(s, "noise_sigma_max", spec.noise_sigma_max);
    };
    parse("demo", cfg.demo_perturb);
    parse("train", cfg.train_perturb);
    parse("eval", cfg.eval_perturb);
  }

  if (j.contains("weightnet")) {
    const json& w = j.at("weightnet");
    check_keys(w,
               {"hidden", "layers", "lipschitz", "softplus_beta", "seed", "tau_init",
                "bce_sharpness", "lr", "batch_size", "epochs", "shuffle_seed"},
               "weightnet");
    int hidden = 256, layers = 3;
    maybe(w, "hidden", hidden);
    maybe(w, "layers", layers);
    cfg.weightnet.mlp.dims = stack_dims(EmbeddingModel::kOutputDim, hidden, layers, 3);
    maybe(w, "lipschitz", cfg.weightnet.mlp.lipschitz);
    maybe(w, "softplus_beta", cfg.weightnet.mlp.softplus_beta);
    maybe(w, "seed", cfg.weightnet.mlp.seed);
    maybe(w, "tau_init", cfg.weightnet.tau_init);
    maybe(w, "bce_sharpness", cfg.weightnet.bce_sharpness);
    maybe(w, "lr", cfg.weightnet.adam.lr);
    maybe(w, "batch_size", cfg.weightnet.batch_size);
    maybe(w, "epochs", cfg.weightnet.epochs);
    maybe(w, "shuffle_seed", cfg.weightnet.shuffle_seed);
  }

  if (j.contains("q")) {
    const json& q = j.at("q");
    check_keys(q,
               {"hidden", "layers", "lipschitz", "softplus_beta", "seed", "lr", "batch_size",
                "epochs", "gamma", "hill_alpha", "hill_lambda", "hill_noise", "shuffle_seed",
                "holdout_fraction"},
               "q");
    int hidden = 512, layers = 4;
    maybe(q, "hidden", hidden);
    maybe(q, "layers", layers);
    cfg.qtrain.mlp.dims = stack_dims(EmbeddingModel::kOutputDim + 4, hidden, layers, 1);
    maybe(q, "lipschitz", cfg.qtrain.mlp.lipschitz);
    maybe(q, "softplus_beta", cfg.qtrain.mlp.softplus_beta);
    maybe(q, "seed", cfg.qtrain.mlp.seed);
    maybe(q, "lr", cfg.qtrain.adam.lr);
    maybe(q, "batch_size", cfg.qtrain.batch_size);
    maybe(q, "epochs", cfg.qtrain.epochs);
    maybe(q, "gamma", cfg.qtrain.gamma);
    maybe(q, "hill_alpha", cfg.qtrain.hill_alpha);
    maybe(q, "hill_lambda", cfg.qtrain.hill_lambda);
    maybe(q, "hill_noise", cfg.qtrain.hill_noise);
    maybe(q, "shuffle_seed", cfg.qtrain.shuffle_seed);
    maybe(q, "holdout_fraction", cfg.qtrain.holdout_fraction);
  }

  if (j.contains("cbf")) {
    const json& c = j.at("cbf");
    check_keys(c, {"seed", "lr", "batch_size", "epochs", "shuffle_seed"}, "cbf");
    maybe(c, "seed", cfg.cbf.mlp.seed);
    maybe(c, "lr", cfg.cbf.adam.lr);
    maybe(c, "batch_size", cfg.cbf.batch_size);
    maybe(c, "epochs", cfg.cbf.epochs);
    maybe(c, "shuffle_seed", cfg.cbf.shuffle_seed);
  }

  if (j.contains("grasp")) {
    const json& g = j.at("grasp");
    check_keys(g, {"sigma_t", "sigma_r", "w_t", "w_r"}, "grasp");
    maybe(g, "sigma_t", cfg.grasp_template.sigma_t);
    maybe(g, "sigma_r", cfg.grasp_template.sigma_r);
    maybe(g, "w_t", cfg.grasp_template.w_t);
    maybe(g, "w_r", cfg.grasp_template.w_r);
  }

  if (j.contains("filter")) {
    const json& f = j.at("filter");
    check_keys(f, {"eta", "k_max", "grad_floor", "threshold"}, "filter");
    maybe(f, "eta", cfg.filter.eta);
    maybe(f, "k_max", cfg.filter.k_max);
    maybe(f, "grad_floor", cfg.filter.grad_floor);
    maybe(f, "threshold", cfg.filter.threshold);
  }

  maybe(j, "seed", cfg.base_seed);
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw PipelineError(2, "config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string config_hash(const PipelineConfig& cfg) {
  std::ostringstream out;
  out << std::hex << fnv1a(config_to_json(cfg).dump());
  return out.str();
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw PipelineError(2, "cannot write " + tmp.string());
    f << contents;
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PipelineError(2, "cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_rollouts(const std::filesystem::path& path, const std::vector<Rollout>& rollouts,
                    const std::vector<EpisodeMeta>& meta) {
  if (meta.size() != rollouts.size())
    throw PipelineError(2, "write_rollouts: meta/rollout count mismatch");
  std::ostringstream out;
  for (std::size_t e = 0; e < rollouts.size(); ++e) {
    const Rollout& ro = rollouts[e];
    for (std::size_t i = 0; i < ro.records.size(); ++i) {
      const RolloutRecord& rec = ro.records[i];
      json line;
      line["episode"] = ro.episode_id;
      line["t"] = rec.state.t;
      line["seed"] = ro.seed;
      line["sigma"] = meta[e].sigma;
      line["state"] = {{"ee", pose_to_json(rec.state.ee)},
                       {"grip", rec.state.grip},
                       {"object", pose_to_json(rec.state.object)},
                       {"emb", vec_to_json(rec.state.embedding)}};
      line["action"] =
          json::array({rec.action.dx, rec.action.dy, rec.action.dtheta, rec.action.dgrip});
      if (rec.scores)
        line["scores"] = json::array({rec.scores->s_fov, rec.scores->s_rec, rec.scores->s_grasp});
      else
        line["scores"] = nullptr;
      line["h"] = rec.h ? json(*rec.h) : json(nullptr);
      line["q"] = rec.q_label ? json(*rec.q_label) : json(nullptr);
      if (i + 1 == ro.records.size())
        line["outcome"] = ro.outcome == Outcome::Success ? "success" : "failure";
      else
        line["outcome"] = nullptr;
      out << line.dump() << '\n';
    }
  }
  atomic_write(path, out.str());
}

std::pair<std::vector<Rollout>, std::vector<EpisodeMeta>> read_rollouts(
    const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<Rollout> rollouts;
  std::vector<EpisodeMeta> metas;
  std::string raw;
  int lineno = 0;
  bool episode_open = false;
  while (std::getline(in, raw)) {
    ++lineno;
    if (raw.empty()) continue;
    json line;
    try {
      line = json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw PipelineError(2, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      const int episode = line.at("episode").get<int>();
      if (!episode_open || rollouts.back().episode_id != episode) {
        if (episode_open)
          throw PipelineError(2, path.string() + ":" + std::to_string(lineno) +
                                     ": previous episode has no outcome line");
        rollouts.emplace_back();
        rollouts.back().episode_id = episode;
        rollouts.back().seed = line.at("seed").get<std::uint64_t>();
        metas.push_back(EpisodeMeta{line.at("sigma").get<double>()});
        episode_open = true;
      }
      RolloutRecord rec;
      rec.state.t = line.at("t").get<int>();
      const json& st = line.at("state");
      rec.state.ee = pose_from_json(st.at("ee"));
      rec.state.grip = st.at("grip").get<double>();
      rec.state.object = pose_from_json(st.at("object"));
      rec.state.embedding = vec_from_json(st.at("emb"));
      const json& a = line.at("action");
      rec.action = ActionDelta{a.at(0).get<double>(), a.at(1).get<double>(),
                               a.at(2).get<double>(), a.at(3).get<double>()};
      if (!line.at("scores").is_null()) {
        const json& s = line.at("scores");
        rec.scores = SafetyScores{s.at(0).get<double>(), s.at(1).get<double>(),
                                  s.at(2).get<double>()};
      }
      if (!line.at("h").is_null()) rec.h = line.at("h").get<double>();
      if (!line.at("q").is_null()) rec.q_label = line.at("q").get<double>();
      rollouts.back().records.push_back(std::move(rec));
      if (!line.at("outcome").is_null()) {
        const std::string oc = line.at("outcome").get<std::string>();
        if (oc != "success" && oc != "failure")
          throw PipelineError(2, path.string() + ":" + std::to_string(lineno) +
                                     ": bad outcome '" + oc + "'");
        rollouts.back().outcome = oc == "success" ? Outcome::Success : Outcome::Failure;
        episode_open = false;
      }
    } catch (const nlohmann::json::exception& e) {
      throw PipelineError(2, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (episode_open)
    throw PipelineError(2, path.string() + ": last episode has no outcome line");
  return {std::move(rollouts), std::move(metas)};
}

nlohmann::ordered_json fit_to_json(const DistributionFit& fit, const GraspSet& tmpl) {
  json j;
  j["schema_version"] = 1;
  j["kind"] = "criteria";
  j["pca_basis"] = mat_to_json(fit.pca_basis);
  j["pca_mean"] = vec_to_json(fit.pca_mean);
  j["mu"] = vec_to_json(fit.mu);
  j["sigma"] = mat_to_json(fit.sigma);
  j["retained_variance"] = fit.retained_variance;
  j["degenerate"] = fit.degenerate;
  json grasps = json::array();
  for (const PoseSE2& g : tmpl.grasps) grasps.push_back(pose_to_json(g));
  j["grasp_template"] = {{"grasps", std::move(grasps)},
                         {"sigma_t", tmpl.sigma_t},
                         {"sigma_r", tmpl.sigma_r},
                         {"w_t", tmpl.w_t},
                         {"w_r", tmpl.w_r}};
  return j;
}

std::pair<DistributionFit, GraspSet> fit_from_json(const nlohmann::ordered_json& j) {
  if (j.at("schema_version").get<int>() != 1)
    throw PipelineError(2, "criteria checkpoint: unsupported schema_version");
  if (j.at("kind").get<std::string>() != "criteria")
    throw PipelineError(2, "criteria checkpoint: wrong kind");
  DistributionFit fit;
  fit.pca_basis = mat_from_json(j.at("pca_basis"));
  fit.pca_mean = vec_from_json(j.at("pca_mean"));
  fit.mu = vec_from_json(j.at("mu"));
  fit.sigma = mat_from_json(j.at("sigma"));
  fit.retained_variance = j.at("retained_variance").get<double>();
  fit.degenerate = j.at("degenerate").get<bool>();
  GraspSet tmpl;
  const json& g = j.at("grasp_template");
  for (const auto& p : g.at("grasps")) tmpl.grasps.push_back(pose_from_json(p));
  tmpl.sigma_t = g.at("sigma_t").get<double>();
  tmpl.sigma_r = g.at("sigma_r").get<double>();
  tmpl.w_t = g.at("w_t").get<double>();
  tmpl.w_r = g.at("w_r").get<double>();
  return {std::move(fit), std::move(tmpl)};
}

void write_manifest(const std::filesystem::path& dir, const std::string& stage,
                    const PipelineConfig& cfg, const std::vector<ManifestInput>& inputs,
                    const std::vector<std::string>& outputs, const nlohmann::ordered_json& stats) {
  json j;
  j["schema_version"] = 1;
  j["stage"] = stage;
  j["code_version"] = "tailsafe 0.1.0";
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.base_seed;
  const char* epoch = std::getenv("SOURCE_DATE_EPOCH");
  j["timestamp"] = epoch != nullptr ? std::strtoll(epoch, nullptr, 10) : 0LL;
  json in = json::array();
  for (const ManifestInput& i : inputs)
    in.push_back({{"path", i.path}, {"hash", i.hash}, {"stage", i.stage}});
  j["inputs"] = std::move(in);
  j["outputs"] = outputs;
  j["stats"] = stats;
  atomic_write(dir / "manifest.json", j.dump(2) + "\n");
}

ManifestInput require_manifest(const std::filesystem::path& input,
                               const std::vector<std::string>& allowed_stages) {
  const std::filesystem::path mpath = input.parent_path() / "manifest.json";
  if (!std::filesystem::exists(mpath))
    throw PipelineError(2, "missing manifest for input " + input.string() +
                               " (expected " + mpath.string() + "); run the upstream stage first");
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const nlohmann::json::parse_error& e) {
    throw PipelineError(2, mpath.string() + ": " + e.what());
  }
  const std::string stage = m.at("stage").get<std::string>();
  if (!allowed_stages.empty()) {
    bool ok = false;
    for (const std::string& s : allowed_stages) ok = ok || s == stage;
    if (!ok)
      throw PipelineError(2, "stage-order violation: input " + input.string() +
                                 " was produced by stage '" + stage + "'");
  }
  std::ostringstream h;
  h << std::hex << fnv1a(read_file(input));
  return ManifestInput{input.string(), h.str(), stage};
}

std::pair<std::vector<Rollout>, std::vector<EpisodeMeta>> generate_rollouts(
    const Simulator& sim, const PerturbationSpec& spec, int n, std::uint64_t base_seed,
    const MonitorFn* monitor) {
  if (n <= 0) throw PipelineError(1, "episode count must be positive");
  std::vector<Rollout> rollouts;
  std::vector<EpisodeMeta> metas;
  rollouts.reserve(n);
  std::mt19937_64 seeder(base_seed);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t ep_seed = seeder();
    auto [init, ctx] = sim.perturb_initial(spec, ep_seed);
    PolicyFn policy = [&sim](const WorldState& s, const Observation& o) {
      return sim.nominal_policy(s, o);
    };
    Rollout ro = sim.run_rollout(policy, init, sim.config().horizon, ctx, monitor);
    ro.episode_id = i;
    rollouts.push_back(std::move(ro));
    metas.push_back(EpisodeMeta{ctx.noise_sigma});
  }
  return {std::move(rollouts), std::move(metas)};
}

double failure_fraction(const std::vector<Rollout>& rollouts) {
  if (rollouts.empty()) return 0.0;
  int failures = 0;
  for (const Rollout& r : rollouts)
    if (r.outcome == Outcome::Failure) ++failures;
  return double(failures) / double(rollouts.size());
}

DistributionFit fit_from_rollouts(const std::vector<Rollout>& demos) {
  std::vector<const Eigen::VectorXd*> rows;
  for (const Rollout& r : demos)
    if (r.outcome == Outcome::Success)
      for (const RolloutRecord& rec : r.records) rows.push_back(&rec.state.embedding);
  if (rows.empty())
    throw PipelineError(2, "fit-criteria: no successful demonstration episodes in input");
  Eigen::MatrixXd features(rows.size(), rows.front()->size());
  for (std::size_t i = 0; i < rows.size(); ++i) features.row(i) = rows[i]->transpose();
  return fit_demo_distribution(features);
}

SafetyScores score_record(const Simulator& sim, const DistributionFit& fit, const GraspSet& tmpl,
                          const WorldState& state, const ActionDelta& action) {
  SafetyScores s;
  s.s_fov = visibility_score(sim.config().camera, sim.object_boundary(state.object), state.ee);
  s.s_rec = recognizability_score(fit, state.embedding);
  const PoseSE2 ee_after{state.ee.x + action.dx, state.ee.y + action.dy,
                         wrap_angle(state.ee.theta + action.dtheta)};
  // A held object moves rigidly with the gripper, so graspability is judged
  // against the post-action object pose.
  PoseSE2 object_after = state.object;
  const WorldConfig& wc = sim.config();
  const bool attached = state.grip >= 1.0 &&
                        pose_dist(state.ee, state.object) <= wc.grasp_tol_t &&
                        angle_dist(state.ee.theta, state.object.theta) <= wc.grasp_tol_r;
  if (attached) {
    object_after.x += action.dx;
    object_after.y += action.dy;
    object_after.theta = wrap_angle(object_after.theta + action.dtheta);
  }
  s.s_grasp = graspability_score(instantiate(tmpl, object_after), ee_after);
  return s;
}

void annotate_scores(const Simulator& sim, const DistributionFit& fit, const GraspSet& tmpl,
                     std::vector<Rollout>& rollouts) {
  for (Rollout& r : rollouts)
    for (RolloutRecord& rec : r.records)
      rec.scores = score_record(sim, fit, tmpl, rec.state, rec.action);
}

std::vector<TrajectorySample> to_trajectory_samples(const std::vector<Rollout>& rollouts) {
  std::vector<TrajectorySample> out;
  out.reserve(rollouts.size());
  for (const Rollout& r : rollouts) {
    TrajectorySample traj;
    traj.success = r.outcome == Outcome::Success;
    for (const RolloutRecord& rec : r.records) {
      if (!rec.scores)
        throw PipelineError(2, "train-weightnet: episode " + std::to_string(r.episode_id) +
                                   " step " + std::to_string(rec.state.t) + " has no scores");
      traj.embeddings.push_back(rec.state.embedding);
      traj.scores.push_back(*rec.scores);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

void annotate_h(const WeightNet& wn, std::vector<Rollout>& rollouts) {
  for (Rollout& r : rollouts)
    for (RolloutRecord& rec : r.records) {
      if (!rec.scores)
        throw PipelineError(2, "annotate_h: episode " + std::to_string(r.episode_id) + " step " +
                                   std::to_string(rec.state.t) + " has no scores");
      rec.h = wn.h(rec.state.embedding, *rec.scores);
    }
}

void annotate_labels(std::vector<Rollout>& rollouts, double gamma) {
  for (Rollout& r : rollouts) {
    std::vector<double> h;
    h.reserve(r.records.size());
    for (const RolloutRecord& rec : r.records) {
      if (!rec.h)
        throw PipelineError(2, "label-q: episode " + std::to_string(r.episode_id) + " step " +
                                   std::to_string(rec.state.t) + " has no h");
      h.push_back(*rec.h);
    }
    const std::vector<double> y = reach_avoid_labels(h, r.outcome == Outcome::Success, gamma);
    for (std::size_t t = 0; t < y.size(); ++t) r.records[t].q_label = y[t];
  }
}

std::vector<QSample> to_q_samples(const std::vector<Rollout>& rollouts) {
  std::vector<QSample> out;
  for (const Rollout& r : rollouts)
    for (const RolloutRecord& rec : r.records) {
      if (!rec.q_label)
        throw PipelineError(2, "train-q: episode " + std::to_string(r.episode_id) + " step " +
                                   std::to_string(rec.state.t) + " has no q label");
      QSample s;
      s.embedding = rec.state.embedding;
      s.action = rec.action;
      s.y = *rec.q_label;
      s.from_success = r.outcome == Outcome::Success;
      out.push_back(std::move(s));
    }
  return out;
}

std::vector<AblationCase> make_unsafe_starts(const std::vector<Rollout>& rollouts, int n,
                                             double delta_min, double delta_max,
                                             std::uint64_t seed) {
  std::vector<const RolloutRecord*> candidates;
  for (const Rollout& r : rollouts) {
    if (r.outcome != Outcome::Success) continue;
    for (const RolloutRecord& rec : r.records)
      if (rec.state.grip == 0.0) candidates.push_back(&rec);
  }
  if (candidates.empty()) throw PipelineError(2, "no pre-grasp success states for unsafe starts");

  const ActionBox box{};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  std::uniform_real_distribution<double> mag(delta_min, delta_max);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<AblationCase> cases;
  cases.reserve(n);
  for (int i = 0; i < n; ++i) {
    const RolloutRecord* rec = candidates[pick(rng)];
    Eigen::Vector4d dir;
    for (int k = 0; k < 4; ++k) dir(k) = gauss(rng);
    dir.normalize();
    AblationCase c;
    c.embedding = rec->state.embedding;
    c.a_norm = normalize_action(rec->action, box) + mag(rng) * dir;
    cases.push_back(std::move(c));
  }
  return cases;
}

GuardedStats run_batch(const Simulator& sim, const PerturbationSpec& spec, int n,
                       std::uint64_t base_seed, const MonitorFn* monitor) {
  auto [rollouts, metas] = generate_rollouts(sim, spec, n, base_seed, monitor);
  GuardedStats stats;
  stats.episodes = n;
  double steps = 0.0, recoveries = 0.0;
  for (const Rollout& r : rollouts) {
    recoveries += r.recoveries;
    if (r.outcome == Outcome::Success) {
      ++stats.successes;
      steps += static_cast<double>(r.records.size());
    }
  }
  stats.success_rate = double(stats.successes) / double(n);
  stats.mean_steps_success = stats.successes > 0 ? steps / stats.successes : 0.0;
  stats.mean_recoveries = recoveries / double(n);
  return stats;
}

MonitorFn make_guard(const QFunction& q, const FilterConfig& cfg, const ActionBox& box) {
  return [&q, cfg, box](const WorldState& state, const ActionDelta& proposed) {
    const FilterResult res = filter_action(q, state.embedding, proposed, cfg, box);
    return std::make_pair(res.action, res.status != FilterStatus::NotNeeded);
  };
}

}  // namespace tailsafe
