#pragma once

// Dataset-level scoring and the ablation harness.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/metrics.hpp"
#include "bcat/model.hpp"
#include "bcat/parallel.hpp"
#include "bcat/rollout.hpp"
#include "bcat/training.hpp"

namespace bcat {

struct EvalConfig {
  std::size_t input_frames = 10;        // T0
  std::size_t output_frames = 10;       // T
  std::size_t short_output_frames = 4;  // T for trajectories shorter than T0 + T
  double eps = kRelL2Eps;
  bool use_cache = true;
  bool valid_channels_only = true;  // false scores padded channels too

  void validate() const {
    if (input_frames < 1) throw ConfigError("eval.input_frames: must be >= 1");
    if (output_frames < 1) throw ConfigError("eval.output_frames: must be >= 1");
    if (short_output_frames < 1) throw ConfigError("eval.short_output_frames: must be >= 1");
    if (!(eps >= 0)) throw ConfigError("eval.eps: must be >= 0");
  }
};

inline nlohmann::json eval_config_to_json(const EvalConfig& c) {
  return {{"input_frames", c.input_frames},
          {"output_frames", c.output_frames},
          {"short_output_frames", c.short_output_frames},
          {"eps", c.eps},
          {"use_cache", c.use_cache},
          {"channels", c.valid_channels_only ? "valid" : "all"}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j, const std::string& where = "eval") {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  EvalConfig c;
  for (const auto& [key, v] : j.items()) {
    const std::string field = where + "." + key;
    try {
      if (key == "input_frames") c.input_frames = v.get<std::size_t>();
      else if (key == "output_frames") c.output_frames = v.get<std::size_t>();
      else if (key == "short_output_frames") c.short_output_frames = v.get<std::size_t>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "use_cache") c.use_cache = v.get<bool>();
      else if (key == "channels") {
        const auto s = v.get<std::string>();
        if (s != "valid" && s != "all") throw ConfigError(field + ": expected \"valid\" or \"all\"");
        c.valid_channels_only = s == "valid";
      } else {
        throw ConfigError(field + ": unknown key");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field + ": " + e.what());
    }
  }
  return c;
}

/// Output frame count used for a trajectory of `frames` frames.
inline std::size_t scored_frames(const EvalConfig& cfg, std::size_t frames) {
  if (frames >= cfg.input_frames + cfg.output_frames) return cfg.output_frames;
  if (frames >= cfg.input_frames + cfg.short_output_frames) return cfg.short_output_frames;
  throw DataError("trajectory has " + std::to_string(frames) + " frames, evaluation needs at least " +
                  std::to_string(cfg.input_frames + cfg.short_output_frames));
}

// ---------------------------------------------------------------------------
// Evaluation

/// Produces T frames after the first t0 of a trajectory. Implementations
/// backed by a model only look at the first t0 frames.
using Predictor = std::function<RolloutReport(const Trajectory& traj, std::size_t t0, std::size_t t)>;

inline Predictor model_predictor(const ModelParams<float>& params, bool use_cache = true) {
  return [&params, use_cache](const Trajectory& traj, std::size_t t0, std::size_t t) {
    return rollout(params, traj.slice_frames(0, t0), t, use_cache);
  };
}

/// Returns the ground truth itself; scores are zero by construction.
inline Predictor oracle_predictor(std::size_t resolution, std::size_t channels) {
  return [resolution, channels](const Trajectory& traj, std::size_t t0, std::size_t t) {
    RolloutReport r;
    r.predicted = conform_trajectory(traj.slice_frames(t0, t0 + t), resolution, channels);
    return r;
  };
}

struct EvalEntry {
  std::string family;
  std::string id;
  double rel_l2 = 0.0;
  std::size_t frames = 0;
  std::size_t model_calls = 0;
  bool truncated = false;
};

struct EvalReport {
  std::vector<EvalEntry> entries;
  std::vector<std::pair<std::string, double>> family_means;  // sorted by family
  double grand_mean = 0.0;                                   // unweighted mean of family means
  nlohmann::json metadata = nlohmann::json::object();
};

/// Family means sorted by name and their unweighted mean.
inline void aggregate(EvalReport& report) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& e : report.entries) {
    auto& [sum, count] = acc[e.family];
    sum += e.rel_l2;
    ++count;
  }
  report.family_means.clear();
  double total = 0.0;
  for (const auto& [family, sc] : acc) {
    const double mean = sc.first / static_cast<double>(sc.second);
    report.family_means.emplace_back(family, mean);
    total += mean;
  }
  report.grand_mean = acc.empty() ? 0.0 : total / static_cast<double>(acc.size());
}

struct EvalItem {
  std::string family;
  std::string id;
  Trajectory traj;
};

/// Scores every item with `predict` on a resolution x resolution x channels
/// grid. Items are processed in parallel; the report order is input order.
inline EvalReport evaluate(const Predictor& predict, const std::vector<EvalItem>& items, std::size_t resolution,
                           std::size_t channels, const EvalConfig& cfg) {
  cfg.validate();
  if (items.empty()) throw DataError("evaluate: no trajectories");
  EvalReport report;
  report.entries.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& item = items[i];
    const std::size_t t = scored_frames(cfg, item.traj.frames);
    const RolloutReport r = predict(item.traj, cfg.input_frames, t);
    Trajectory truth =
        conform_trajectory(item.traj.slice_frames(cfg.input_frames, cfg.input_frames + t), resolution, channels);
    EvalEntry& e = report.entries[i];
    e.family = item.family;
    e.id = item.id;
    e.frames = t;
    e.model_calls = r.model_calls;
    e.truncated = r.truncated;
    const std::size_t valid = cfg.valid_channels_only ? truth.valid_channels : truth.channels;
    if (r.predicted.frames < t) {
      // A truncated rollout scores its missing frames as total misses.
      std::vector<float> pred(truth.data.size(), 0.0f);
      std::copy(r.predicted.data.begin(), r.predicted.data.end(), pred.begin());
      e.rel_l2 = relative_l2(pred, truth.data, t, truth.channels, valid, cfg.eps);
    } else {
      e.rel_l2 = relative_l2(r.predicted.data, truth.data, t, truth.channels, valid, cfg.eps);
    }
    if (!std::isfinite(e.rel_l2)) e.rel_l2 = std::numeric_limits<double>::infinity();
  });
  aggregate(report);
  report.metadata["eval"] = eval_config_to_json(cfg);
  report.metadata["trajectories"] = items.size();
  return report;
}

/// Manifests in `dir` itself or in its immediate subdirectories, by path.
inline std::vector<Manifest> find_manifests(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::vector<fs::path> found;
  if (fs::exists(dir / "manifest.json")) found.push_back(dir / "manifest.json");
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) found.push_back(entry.path() / "manifest.json");
  if (found.empty()) throw DataError(dir.string() + ": no manifest.json found");
  std::sort(found.begin(), found.end());
  std::vector<Manifest> out;
  for (const auto& p : found) out.push_back(read_manifest(p));
  return out;
}

inline std::vector<EvalItem> load_items(const std::vector<Manifest>& manifests) {
  std::vector<EvalItem> items;
  for (const auto& m : manifests)
    for (std::size_t i = 0; i < m.files.size(); ++i)
      items.push_back({m.family, (m.directory.filename() / m.files[i].path).string(), m.load(i)});
  return items;
}

inline EvalReport evaluate(const ModelParams<float>& params, const std::vector<Manifest>& manifests,
                           const EvalConfig& cfg) {
  const auto& mc = params.config;
  if (mc.variant == Variant::kVitDirect && mc.input_frames != cfg.input_frames)
    throw ConfigError("eval.input_frames: vit_direct model was built for " + std::to_string(mc.input_frames));
  EvalReport r = evaluate(model_predictor(params, cfg.use_cache), load_items(manifests), mc.resolution, mc.channels, cfg);
  r.metadata["model"] = model_config_to_json(mc);
  return r;
}

/// Rejects a checkpoint whose geometry differs from the requested model.
inline void check_checkpoint_matches(const ModelConfig& requested, const ModelConfig& checkpoint) {
  auto check = [](const char* field, std::size_t want, std::size_t got) {
    if (want != got)
      throw ConfigError(std::string("model.") + field + ": config says " + std::to_string(want) +
                        ", checkpoint has " + std::to_string(got));
  };
  check("patch_size", requested.patch, checkpoint.patch);
  check("resolution", requested.resolution, checkpoint.resolution);
  check("channels", requested.channels, checkpoint.channels);
  check("dim", requested.dim, checkpoint.dim);
  check("n_layers", requested.n_layers, checkpoint.n_layers);
  check("n_heads", requested.n_heads, checkpoint.n_heads);
  if (requested.variant != checkpoint.variant)
    throw ConfigError("model.variant: config says " + to_string(requested.variant) + ", checkpoint has " +
                      to_string(checkpoint.variant));
}

inline void write_report_csv(const EvalReport& r, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "family,trajectory_id,rel_l2\n";
  char buf[64];
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof(buf), "%.9g", e.rel_l2);
    out << e.family << ',' << e.id << ',' << buf << '\n';
  }
}

inline nlohmann::json report_summary_json(const EvalReport& r) {
  nlohmann::json families = nlohmann::json::object();
  for (const auto& [f, m] : r.family_means) families[f] = m;
  return {{"family_means", families}, {"grand_mean", r.grand_mean}, {"metadata", r.metadata}};
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { kAlignment, kMask, kActivation, kQkNorm, kPatch, kVariant };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "alignment") return AblationAxis::kAlignment;
  if (s == "mask") return AblationAxis::kMask;
  if (s == "activation") return AblationAxis::kActivation;
  if (s == "qk_norm") return AblationAxis::kQkNorm;
  if (s == "patch" || s == "patch_size") return AblationAxis::kPatch;
  if (s == "variant") return AblationAxis::kVariant;
  throw ConfigError("suite: unknown axis \"" + s + "\" (alignment, mask, activation, qk_norm, patch, variant)");
}

struct AblationSpec {
  AblationAxis axis = AblationAxis::kMask;
  std::vector<std::string> values;
  ModelConfig base;
  TrainConfig train;
  EvalConfig eval;
};

/// Patch sizes that would leave fewer than 2x2 patches per frame are halved,
/// all together, until they fit; the ratios between sizes are kept.
inline std::vector<std::size_t> rescale_patches(std::vector<std::size_t> patches, std::size_t resolution) {
  if (patches.empty()) throw ConfigError("suite.values: empty patch list");
  for (std::size_t p : patches)
    if (p == 0) throw ConfigError("suite.values: patch size 0");
  while (*std::max_element(patches.begin(), patches.end()) > resolution / 2) {
    for (auto& p : patches) {
      if (p % 2 != 0) throw ConfigError("suite.values: patch sizes cannot be rescaled to resolution " +
                                        std::to_string(resolution));
      p /= 2;
    }
  }
  for (std::size_t p : patches)
    if (resolution % p != 0)
      throw ConfigError("suite.values: patch " + std::to_string(p) + " does not divide " + std::to_string(resolution));
  return patches;
}

/// Model configuration of every row, validated before anything is trained.
inline std::vector<std::pair<std::string, ModelConfig>> ablation_rows(const AblationSpec& spec) {
  if (spec.values.empty()) throw ConfigError("suite.values: empty");
  std::vector<std::pair<std::string, ModelConfig>> rows;
  std::vector<std::size_t> patches;
  if (spec.axis == AblationAxis::kPatch) {
    for (const auto& v : spec.values) {
      try {
        patches.push_back(std::stoul(v));
      } catch (const std::exception&) {
        throw ConfigError("suite.values: \"" + v + "\" is not a patch size");
      }
    }
    patches = rescale_patches(patches, spec.base.resolution);
  }
  const Variant base = spec.base.variant;
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    const std::string& v = spec.values[i];
    ModelConfig c = spec.base;
    std::string label = v;
    switch (spec.axis) {
      case AblationAxis::kAlignment:
        if (base != Variant::kBcat && base != Variant::kNextToken)
          throw ConfigError("suite: alignment axis is incompatible with variant " + to_string(base));
        if (v == "frame") {
          c.variant = Variant::kBcat;
          if (spec.base.variant == Variant::kNextToken) c.mask = MaskKind::kBlockCausal;
        } else if (v == "token") {
          c.variant = Variant::kNextToken;
          c.mask = MaskKind::kCausal;
        } else {
          throw ConfigError("suite.values: alignment must be frame or token, got \"" + v + "\"");
        }
        break;
      case AblationAxis::kMask:
        if (base != Variant::kBcat) throw ConfigError("suite: mask axis needs variant bcat, got " + to_string(base));
        c.mask = parse_mask_kind(v);
        break;
      case AblationAxis::kActivation:
        c.activation = parse_activation(v);
        break;
      case AblationAxis::kQkNorm:
        if (v != "on" && v != "off") throw ConfigError("suite.values: qk_norm must be on or off, got \"" + v + "\"");
        c.qk_norm = v == "on";
        label = std::string("qk_norm_") + v;
        break;
      case AblationAxis::kPatch:
        c.patch = patches[i];
        label = "P" + std::to_string(patches[i]);
        break;
      case AblationAxis::kVariant:
        if (base == Variant::kNextToken) throw ConfigError("suite: variant axis is incompatible with token alignment");
        c.variant = parse_variant(v);
        if (c.variant == Variant::kNextToken) throw ConfigError("suite: use the alignment axis for next_token");
        if (c.variant == Variant::kVitDirect) c.input_frames = spec.train.input_frames;
        break;
    }
    c.validate();
    rows.emplace_back(label, c);
  }
  return rows;
}

struct AblationRow {
  std::string variant;
  ModelConfig config;
  std::size_t params = 0;
  double train_loss = 0.0;  // mean over the last 5% of steps
  double test_rel_l2 = 0.0;
  std::vector<double> losses;
};

inline double tail_mean(const std::vector<double>& v, double fraction = 0.05) {
  if (v.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(v.size()) * fraction));
  double acc = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) acc += v[i];
  return acc / static_cast<double>(n);
}

/// Trains and scores every row under the same seed and budget. Each row's
/// loss curve goes to loss_<variant>.dat ("step loss") when out_dir is set.
inline std::vector<AblationRow> ablate(const AblationSpec& spec, const std::vector<Trajectory>& train_set,
                                       const std::vector<EvalItem>& test_set, const fs::path& out_dir = {}) {
  const auto rows = ablation_rows(spec);
  std::vector<AblationRow> out;
  for (const auto& [label, mc] : rows) {
    TrainResult tr = train(mc, spec.train, train_set);
    EvalConfig ec = spec.eval;
    const EvalReport rep = evaluate(model_predictor(tr.params, ec.use_cache), test_set, mc.resolution, mc.channels, ec);
    AblationRow row{label, mc, count_params(mc), tail_mean(tr.losses), rep.grand_mean, tr.losses};
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      std::ofstream dat(out_dir / ("loss_" + label + ".dat"), std::ios::trunc);
      for (std::size_t s = 0; s < row.losses.size(); ++s) dat << s << ' ' << row.losses[s] << '\n';
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "variant,params,train_loss,test_rel_l2\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g", r.params, r.train_loss, r.test_rel_l2);
    out << r.variant << ',' << buf << '\n';
  }
}

}  // namespace bcat
