#pragma once

// Command-line front end. Precedence: built-in defaults, then --config,
// then flags. The effective config and its hash go next to every output.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bcat/config.hpp"
#include "bcat/datagen.hpp"
#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/eval.hpp"
#include "bcat/model.hpp"
#include "bcat/rollout.hpp"
#include "bcat/training.hpp"

namespace bcat::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Flag values; unset optionals leave the config untouched.
struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> family, variant, data, test_data, checkpoint, input, suite;
  std::optional<std::size_t> n, steps, patch_size, repeats, warmup, frames, resolution, batch_size;
  std::vector<std::string> values;
  bool no_cache = false;
};

template <typename Fn>
void with_flag(const char* flag, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(flag) + ": " + e.what());
  }
}

/// Builds the effective config. `model_explicit` reports whether any model
/// field was set by the config file or a flag.
inline RunConfig effective_config(const Flags& f, bool& model_explicit) {
  RunConfig c;
  model_explicit = false;
  if (!f.config_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(f.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("--config: " + f.config_path + ": " + e.what());
    } catch (const DataError& e) {
      throw ConfigError(std::string("--config: ") + e.what());
    }
    c = run_config_from_json(j);
    model_explicit = j.is_object() && j.contains("model");
  }
  if (f.seed) {
    c.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (f.family) with_flag("--family", [&] { c.data.gen.family = parse_family(*f.family); });
  if (f.n) c.data.n = *f.n;
  if (f.resolution) c.data.gen.resolution = *f.resolution;
  if (f.steps) c.train.steps = *f.steps;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.patch_size) {
    c.model.patch = *f.patch_size;
    model_explicit = true;
  }
  if (f.variant) {
    with_flag("--variant", [&] { c.model.variant = parse_variant(*f.variant); });
    if (c.model.variant == Variant::kNextToken) c.model.mask = MaskKind::kCausal;
    if (c.model.variant == Variant::kVitDirect) c.model.input_frames = c.train.input_frames;
    model_explicit = true;
  }
  if (f.data) c.paths.data = *f.data;
  if (f.test_data) c.paths.test_data = *f.test_data;
  if (f.checkpoint) c.paths.checkpoint = *f.checkpoint;
  if (f.repeats) c.bench.repeats = *f.repeats;
  if (f.warmup) c.bench.warmup = *f.warmup;
  if (f.frames) {
    c.eval.output_frames = *f.frames;
    c.bench.output_frames = *f.frames;
  }
  if (f.no_cache) c.eval.use_cache = false;
  if (f.suite) c.ablate.axis = *f.suite;
  if (!f.values.empty()) c.ablate.values = f.values;
  c.validate();
  return c;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

/// config.json (re-runnable with --config) and config.sha256.
inline std::string dump_config(const RunConfig& c, const fs::path& out) {
  fs::create_directories(out);
  const std::string hash = config_hash(c);
  write_text(out / "config.json", run_config_to_json(c).dump(2) + "\n");
  write_text(out / "config.sha256", hash + "\n");
  return hash;
}

inline std::vector<Trajectory> load_dataset(const std::string& dir, const char* flag) {
  if (dir.empty()) throw ConfigError(std::string(flag) + ": dataset directory required");
  std::vector<Trajectory> out;
  for (const auto& m : find_manifests(dir)) {
    auto all = m.load_all();
    out.insert(out.end(), std::make_move_iterator(all.begin()), std::make_move_iterator(all.end()));
  }
  return out;
}

inline ModelParams<float> load_model(const RunConfig& c, bool model_explicit) {
  if (c.paths.checkpoint.empty()) throw ConfigError("--checkpoint: required");
  auto p = load_checkpoint(c.paths.checkpoint);
  if (model_explicit) check_checkpoint_matches(c.model, p.config);
  return p;
}

inline int cmd_datagen(const RunConfig& c, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  Manifest m = make_dataset(c.data.gen, c.data.n, c.seed, out);
  m.generator["config_hash"] = hash;
  write_manifest(m, out / "manifest.json");
  std::printf("wrote %zu %s trajectories to %s\n", m.files.size(), m.family.c_str(), out.string().c_str());
  return kOk;
}

inline int cmd_train(const RunConfig& c, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  const auto data = load_dataset(c.paths.data, "--data");
  TrainOptions opts;
  opts.out_dir = out;
  const std::size_t every = std::max<std::size_t>(1, c.train.steps / 20);
  opts.on_step = [&](std::size_t step, double lr, double loss) {
    if (step % every == 0 || step + 1 == c.train.steps) std::printf("step %zu lr %.3g loss %.6g\n", step, lr, loss);
  };
  const TrainResult r = train(c.model, c.train, data, opts);
  const nlohmann::json summary = {{"config_hash", hash},
                                  {"steps", r.losses.size()},
                                  {"final_loss", r.losses.back()},
                                  {"tail_loss", tail_mean(r.losses)},
                                  {"params", r.params.count()}};
  write_text(out / "train_summary.json", summary.dump(2) + "\n");
  std::printf("trained %zu steps in %.1f s, final loss %.6g\n", r.losses.size(), r.seconds, r.losses.back());
  return kOk;
}

inline int cmd_eval(const RunConfig& c, bool model_explicit, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  const auto params = load_model(c, model_explicit);
  if (c.paths.data.empty()) throw ConfigError("--data: dataset directory required");
  EvalReport r = evaluate(params, find_manifests(c.paths.data), c.eval);
  r.metadata["config_hash"] = hash;
  write_report_csv(r, out / "report.csv");
  write_text(out / "summary.json", report_summary_json(r).dump(2) + "\n");
  for (const auto& [family, mean] : r.family_means) std::printf("%s %.6g\n", family.c_str(), mean);
  std::printf("average %.6g\n", r.grand_mean);
  return kOk;
}

inline int cmd_rollout(const RunConfig& c, bool model_explicit, const std::string& input, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  const auto params = load_model(c, model_explicit);
  if (input.empty()) throw ConfigError("--input: trajectory file required");
  const Trajectory traj = read_trajectory(input);
  const std::size_t t0 = c.eval.input_frames, t = c.eval.output_frames;
  if (traj.frames < t0) throw DataError(input + ": has " + std::to_string(traj.frames) + " frames, needs " +
                                        std::to_string(t0) + " input frames");
  const RolloutReport r = rollout(params, traj.slice_frames(0, t0), t, c.eval.use_cache);
  write_trajectory(r.predicted, out / "rollout.btrj");
  nlohmann::json side = {{"model_calls", r.model_calls},
                         {"wall_time_ms", r.wall_time_ms},
                         {"config_hash", hash},
                         {"frames", r.predicted.frames},
                         {"truncated", r.truncated},
                         {"peak_scratch_bytes", r.peak_scratch_bytes}};
  if (r.truncated) side["diagnostic"] = r.diagnostic;
  if (traj.frames >= t0 + t && r.predicted.frames == t)
    side["rel_l2"] = relative_l2(r.predicted, target_frames(params.config, traj, t0, t), c.eval.eps);
  write_text(out / "rollout.json", side.dump(2) + "\n");
  std::printf("%zu frames in %zu model calls, %.1f ms\n", r.predicted.frames, r.model_calls, r.wall_time_ms);
  return r.truncated ? kNumeric : kOk;
}

inline std::vector<EvalItem> as_items(std::vector<Trajectory> trajs) {
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    std::string family = trajs[i].family.empty() ? "data" : trajs[i].family;
    items.push_back({family, std::to_string(i), std::move(trajs[i])});
  }
  return items;
}

inline std::vector<Trajectory> generate_set(const RunConfig& c, std::size_t n, std::uint64_t seed) {
  std::vector<Trajectory> out(n);
  parallel_for(n, [&](std::size_t i) {
    GenSpec s = c.data.gen;
    s.seed = derive_seed(seed, i);
    out[i] = generate(s);
    out[i].family = family_name(s.family);
  });
  return out;
}

inline int cmd_ablate(const RunConfig& c, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  AblationSpec spec;
  spec.axis = parse_axis(c.ablate.axis);
  spec.values = c.ablate.values;
  spec.base = c.model;
  spec.train = c.train;
  spec.eval = c.eval;
  ablation_rows(spec);  // reject bad suites before generating anything
  auto train_set = c.paths.data.empty() ? generate_set(c, c.data.n, c.seed) : load_dataset(c.paths.data, "--data");
  auto test_set = c.paths.test_data.empty() ? as_items(generate_set(c, c.data.n_test, derive_seed(c.seed, 1ULL << 32)))
                                            : load_items(find_manifests(c.paths.test_data));
  const auto rows = ablate(spec, train_set, test_set, out);
  write_ablation_csv(rows, out / "summary.csv");
  write_text(out / "ablation.json", nlohmann::json({{"config_hash", hash}, {"axis", c.ablate.axis}}).dump(2) + "\n");
  for (const auto& r : rows)
    std::printf("%-16s params %zu train_loss %.4g test_rel_l2 %.4g\n", r.variant.c_str(), r.params, r.train_loss,
                r.test_rel_l2);
  return kOk;
}

inline nlohmann::json stats_json(const ResourceStats& s) {
  return {{"median_ms", s.median_ms},     {"mean_ms", s.mean_ms},
          {"model_calls", s.model_calls}, {"runs_ms", s.runs_ms},
          {"peak_scratch_bytes", s.peak_scratch_bytes}, {"deterministic", s.deterministic}};
}

inline int cmd_bench(const RunConfig& c, bool model_explicit, const fs::path& out) {
  const std::string hash = dump_config(c, out);
  const ModelParams<float> params =
      c.paths.checkpoint.empty() ? init_params<float>(c.model, c.seed) : load_model(c, model_explicit);
  const auto& mc = params.config;
  GenSpec s = c.data.gen;
  s.seed = c.seed;
  s.n_frames = std::max<std::size_t>(s.n_frames, c.eval.input_frames);
  const Trajectory traj = generate(s).slice_frames(0, c.eval.input_frames);
  const std::size_t t = c.bench.output_frames;
  nlohmann::json report = {{"config_hash", hash}, {"repeats", c.bench.repeats}, {"warmup", c.bench.warmup},
                           {"output_frames", t}};
  const ResourceStats main = measure_resources(params, traj, t, c.bench.repeats, c.bench.warmup, c.eval.use_cache);
  report[to_string(mc.variant)] = stats_json(main);
  std::printf("%s: median %.2f ms mean %.2f ms, %zu calls\n", to_string(mc.variant).c_str(), main.median_ms,
              main.mean_ms, main.model_calls);
  if (mc.variant == Variant::kBcat) {
    // Same architecture under token alignment, for the call-count comparison.
    ModelConfig tc = mc;
    tc.variant = Variant::kNextToken;
    tc.mask = MaskKind::kCausal;
    const auto token_params = init_params<float>(tc, c.seed);
    const ResourceStats tok = measure_resources(token_params, traj, t, c.bench.repeats, c.bench.warmup, true);
    report["next_token"] = stats_json(tok);
    report["time_ratio"] = tok.median_ms / std::max(main.median_ms, 1e-9);
    std::printf("next_token: median %.2f ms mean %.2f ms, %zu calls (ratio %.1fx)\n", tok.median_ms, tok.mean_ms,
                tok.model_calls, tok.median_ms / std::max(main.median_ms, 1e-9));
  }
  write_text(out / "bench.json", report.dump(2) + "\n");
  return kOk;
}

/// Entry point; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Block-causal transformer for next-frame prediction of 2D fields"};
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_value, "Random seed (U64)");
    sub->add_option("--out", f.out, "Output directory")->required();
  };
  auto opt = [](CLI::App* sub, const char* name, auto& target, const char* help) {
    return sub->add_option_function<typename std::decay_t<decltype(target)>::value_type>(
        name, [&target](const auto& v) { target = v; }, help);
  };

  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic trajectory dataset");
  add_common(datagen);
  opt(datagen, "--family", f.family, "adv_diff | linear_swe | ins_vorticity");
  opt(datagen, "--n", f.n, "Number of trajectories");
  opt(datagen, "--resolution", f.resolution, "Grid size R");

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd);
  opt(train_cmd, "--data", f.data, "Dataset directory");
  opt(train_cmd, "--steps", f.steps, "Optimizer steps");
  opt(train_cmd, "--batch-size", f.batch_size, "Trajectories per step");
  opt(train_cmd, "--patch-size", f.patch_size, "Patch size P");
  opt(train_cmd, "--variant", f.variant, "bcat | next_token | time_then_space | vit_direct");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  add_common(eval_cmd);
  opt(eval_cmd, "--data", f.data, "Dataset directory");
  opt(eval_cmd, "--checkpoint", f.checkpoint, "Model checkpoint");
  opt(eval_cmd, "--frames", f.frames, "Output frames T");
  opt(eval_cmd, "--patch-size", f.patch_size, "Expected patch size");
  eval_cmd->add_flag("--no-cache", f.no_cache, "Recompute the full sequence every call");

  auto* rollout_cmd = app.add_subcommand("rollout", "Autoregressive rollout of one trajectory");
  add_common(rollout_cmd);
  opt(rollout_cmd, "--checkpoint", f.checkpoint, "Model checkpoint");
  opt(rollout_cmd, "--input", f.input, "Trajectory file (.btrj); its first T0 frames are the input");
  opt(rollout_cmd, "--frames", f.frames, "Output frames T");
  rollout_cmd->add_flag("--no-cache", f.no_cache, "Recompute the full sequence every call");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare variants along one axis");
  add_common(ablate_cmd);
  opt(ablate_cmd, "--suite", f.suite, "alignment | mask | activation | qk_norm | patch | variant");
  ablate_cmd->add_option("--values", f.values, "Values along the axis");
  opt(ablate_cmd, "--data", f.data, "Training dataset directory (generated when absent)");
  opt(ablate_cmd, "--test-data", f.test_data, "Held-out dataset directory (generated when absent)");
  opt(ablate_cmd, "--steps", f.steps, "Optimizer steps per variant");
  opt(ablate_cmd, "--patch-size", f.patch_size, "Base patch size P");
  opt(ablate_cmd, "--variant", f.variant, "Base variant");

  auto* bench_cmd = app.add_subcommand("bench", "Time rollouts (median and mean over repeats)");
  add_common(bench_cmd);
  opt(bench_cmd, "--checkpoint", f.checkpoint, "Model checkpoint (random weights when absent)");
  opt(bench_cmd, "--repeats", f.repeats, "Timed repeats");
  opt(bench_cmd, "--warmup", f.warmup, "Untimed warmup runs");
  opt(bench_cmd, "--frames", f.frames, "Output frames T");
  opt(bench_cmd, "--patch-size", f.patch_size, "Patch size P");
  opt(bench_cmd, "--variant", f.variant, "Model variant");
  bench_cmd->add_flag("--no-cache", f.no_cache, "Recompute the full sequence every call");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    for (auto* sub : app.get_subcommands())
      if (sub->count("--seed")) f.seed = seed_value;
    bool model_explicit = false;
    const RunConfig c = effective_config(f, model_explicit);
    const fs::path out = f.out;
    if (datagen->parsed()) return cmd_datagen(c, out);
    if (train_cmd->parsed()) return cmd_train(c, out);
    if (eval_cmd->parsed()) return cmd_eval(c, model_explicit, out);
    if (rollout_cmd->parsed()) return cmd_rollout(c, model_explicit, f.input.value_or(""), out);
    if (ablate_cmd->parsed()) return cmd_ablate(c, out);
    if (bench_cmd->parsed()) return cmd_bench(c, model_explicit, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace bcat::cli
