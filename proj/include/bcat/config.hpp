#pragma once

// Run configuration: one JSON document with model, train, eval, data,
// ablate, bench and paths sections. Every field has a default and unknown
// keys are errors that name the offending field.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/datagen.hpp"
#include "bcat/dataio.hpp"
#include "bcat/error.hpp"
#include "bcat/eval.hpp"
#include "bcat/model.hpp"
#include "bcat/training.hpp"

namespace bcat {

struct DataConfig {
  GenSpec gen;             // template; per-trajectory seeds are derived
  std::size_t n = 64;      // training trajectories
  std::size_t n_test = 8;  // held-out trajectories (ablate)
};

struct AblateConfig {
  std::string axis = "mask";
  std::vector<std::string> values = {"block_causal", "causal"};
};

struct BenchConfig {
  std::size_t repeats = 50;
  std::size_t warmup = 5;
  std::size_t output_frames = 10;
};

struct PathsConfig {
  std::string data;        // dataset directory (train/eval)
  std::string test_data;   // held-out directory (ablate); generated when empty
  std::string checkpoint;  // eval/rollout/bench
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;
  AblateConfig ablate;
  BenchConfig bench;
  PathsConfig paths;

  void validate() const {
    model.validate();
    train.validate();
    eval.validate();
    data.gen.validate();
    if (data.n < 1) throw ConfigError("data.n: must be >= 1");
    if (bench.repeats < 1) throw ConfigError("bench.repeats: must be >= 1");
    if (model.variant == Variant::kVitDirect && model.input_frames != train.input_frames)
      throw ConfigError("model.input_frames: vit_direct needs it equal to train.input_frames");
    parse_axis(ablate.axis);
  }
};

namespace detail {

template <typename Fn>
void for_each_key(const nlohmann::json& j, const std::string& where, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, v] : j.items()) {
    const std::string field = where + "." + key;
    try {
      if (!fn(key, v)) throw ConfigError(field + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field + ": " + e.what());
    }
  }
}

}  // namespace detail

inline GenSpec gen_spec_from_json(const nlohmann::json& j, const std::string& where, GenSpec s = {}) {
  detail::for_each_key(j, where, [&](const std::string& key, const nlohmann::json& v) {
    if (key == "family") {
      try {
        s.family = parse_family(v.get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(where + "." + e.what());
      }
    }
    else if (key == "resolution") s.resolution = v.get<std::size_t>();
    else if (key == "frames") s.n_frames = v.get<std::size_t>();
    else if (key == "dt") s.dt = v.get<double>();
    else if (key == "viscosity") s.viscosity = v.get<double>();
    else if (key == "velocity") {
      const auto a = v.get<std::vector<double>>();
      if (a.size() != 2) throw ConfigError(where + ".velocity: expected [vx, vy]");
      s.velocity_x = a[0];
      s.velocity_y = a[1];
    } else if (key == "gh0") s.gh0 = v.get<double>();
    else if (key == "depth") s.depth = v.get<double>();
    else if (key == "max_modes") s.max_modes = v.get<std::size_t>();
    else if (key == "max_wavenumber") s.max_wavenumber = v.get<int>();
    else if (key == "rms_range") {
      const auto a = v.get<std::vector<double>>();
      if (a.size() != 2) throw ConfigError(where + ".rms_range: expected [min, max]");
      s.rms_min = a[0];
      s.rms_max = a[1];
    } else if (key == "init") {
      try {
        s.init = parse_vorticity_init(v.get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(where + "." + e.what());
      }
    }
    else if (key == "max_substeps") s.max_substeps = v.get<std::size_t>();
    else if (key == "modes") s.modes = modes_from_json(v);
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
  return s;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json data = gen_spec_to_json(c.data.gen);
  data.erase("seed");
  data["n"] = c.data.n;
  data["n_test"] = c.data.n_test;
  return {{"seed", c.seed},
          {"model", model_config_to_json(c.model)},
          {"train", train_config_to_json(c.train)},
          {"eval", eval_config_to_json(c.eval)},
          {"data", data},
          {"ablate", {{"axis", c.ablate.axis}, {"values", c.ablate.values}}},
          {"bench", {{"repeats", c.bench.repeats}, {"warmup", c.bench.warmup}, {"output_frames", c.bench.output_frames}}},
          {"paths", {{"data", c.paths.data}, {"test_data", c.paths.test_data}, {"checkpoint", c.paths.checkpoint}}}};
}

/// Parses a (possibly partial) document on top of `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  detail::for_each_key(j, "config", [&](const std::string& key, const nlohmann::json& v) {
    if (key == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else if (key == "model") {
      nlohmann::json merged = model_config_to_json(c.model);
      if (!v.is_object()) throw ConfigError("model: expected an object");
      for (const auto& [k, x] : v.items()) merged[k] = x;
      c.model = model_config_from_json(merged, "model");
    } else if (key == "train") {
      nlohmann::json merged = train_config_to_json(c.train);
      if (!v.is_object()) throw ConfigError("train: expected an object");
      for (const auto& [k, x] : v.items()) merged[k] = x;
      c.train = train_config_from_json(merged, "train");
    } else if (key == "eval") {
      nlohmann::json merged = eval_config_to_json(c.eval);
      if (!v.is_object()) throw ConfigError("eval: expected an object");
      for (const auto& [k, x] : v.items()) merged[k] = x;
      c.eval = eval_config_from_json(merged, "eval");
    } else if (key == "data") {
      nlohmann::json gen = v;
      if (!gen.is_object()) throw ConfigError("data: expected an object");
      if (gen.contains("n")) c.data.n = gen["n"].get<std::size_t>(), gen.erase("n");
      if (gen.contains("n_test")) c.data.n_test = gen["n_test"].get<std::size_t>(), gen.erase("n_test");
      if (gen.contains("seed")) throw ConfigError("data.seed: use the top-level seed");
      c.data.gen = gen_spec_from_json(gen, "data", c.data.gen);
    } else if (key == "ablate") {
      detail::for_each_key(v, "ablate", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "axis") c.ablate.axis = x.get<std::string>();
        else if (k == "values") {
          c.ablate.values.clear();
          for (const auto& e : x) c.ablate.values.push_back(e.is_string() ? e.get<std::string>() : e.dump());
        } else return false;
        return true;
      });
    } else if (key == "bench") {
      detail::for_each_key(v, "bench", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "repeats") c.bench.repeats = x.get<std::size_t>();
        else if (k == "warmup") c.bench.warmup = x.get<std::size_t>();
        else if (k == "output_frames") c.bench.output_frames = x.get<std::size_t>();
        else return false;
        return true;
      });
    } else if (key == "paths") {
      detail::for_each_key(v, "paths", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "data") c.paths.data = x.get<std::string>();
        else if (k == "test_data") c.paths.test_data = x.get<std::string>();
        else if (k == "checkpoint") c.paths.checkpoint = x.get<std::string>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("--config: ") + e.what());
  }
  return run_config_from_json(j);
}

/// Canonical text: keys sorted, no whitespace.
inline std::string canonical_config(const RunConfig& c) { return run_config_to_json(c).dump(); }

inline std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline std::string config_hash(const RunConfig& c) { return sha256_hex(canonical_config(c)); }

}  // namespace bcat
