#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "p3d/data.hpp"
#include "p3d/eval.hpp"
#include "p3d/model.hpp"
#include "p3d/pose.hpp"
#include "p3d/rotation.hpp"
#include "p3d/train.hpp"

namespace p3d {

// ---- run configuration (INI-style sections) ----

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec synth;
  std::string data_manifest;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

inline double parse_f64(const std::string& v, const std::string& key) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline long long parse_i64(const std::string& v, const std::string& key) {
  size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  const long long x = parse_i64(v, key);
  if (x < 0) throw std::invalid_argument("config: key '" + key + "' expects a non-negative integer");
  return static_cast<std::uint64_t>(x);
}

inline std::vector<Part> parse_parts(const std::string& v, const std::string& key) {
  std::vector<Part> parts;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      parts.push_back(part_from_name(item));
    } catch (const std::exception&) {
      throw std::invalid_argument("config: key '" + key + "' has unknown part '" + item + "'");
    }
  }
  if (parts.empty()) throw std::invalid_argument("config: key '" + key + "' lists no parts");
  return parts;
}

inline std::string parts_to_string(const PartLayout& layout) {
  std::string out;
  for (Part p : layout.parts) {
    if (!out.empty()) out += ",";
    out += part_name(p);
  }
  return out;
}

inline void apply_model_key(ModelConfig& m, const std::string& key, const std::string& v) {
  if (key == "frames") m.frames = parse_i64(v, key);
  else if (key == "joint_dim") m.joint_dim = parse_i64(v, key);
  else if (key == "expr_multiplier") m.expr_multiplier = parse_i64(v, key);
  else if (key == "pairs") m.pairs = parse_i64(v, key);
  else if (key == "heads") m.heads = parse_i64(v, key);
  else if (key == "ffn_dim") m.ffn_dim = parse_i64(v, key);
  else if (key == "dropout") m.dropout = parse_f64(v, key);
  else if (key == "composition") m.composition = composition_from_name(v);
  else if (key == "ensemble") m.ensemble = ensemble_from_name(v);
  else if (key == "num_classes") m.num_classes = parse_i64(v, key);
  else if (key == "positional_encoding") m.positional_encoding = parse_bool(v, key);
  else if (key == "pre_norm") m.pre_norm = parse_bool(v, key);
  else if (key == "parts") m.layout.parts = parse_parts(v, key);
  else if (key == "body_joints") m.layout.body_joints = parse_i64(v, key);
  else if (key == "hand_joints") m.layout.hand_joints = parse_i64(v, key);
  else if (key == "expression_width") m.layout.expression_width = parse_i64(v, key);
  else if (key == "pos2d") m.reps.pos2d = parse_bool(v, key);
  else if (key == "pos3d") m.reps.pos3d = parse_bool(v, key);
  else if (key == "rot6d") m.reps.rot6d = parse_bool(v, key);
  else throw std::invalid_argument("config: unknown key '" + key + "' in [model]");
}

inline void apply_train_key(TrainConfig& t, const std::string& key, const std::string& v) {
  if (key == "lr") t.lr = parse_f64(v, key);
  else if (key == "weight_decay") t.weight_decay = parse_f64(v, key);
  else if (key == "beta1") t.beta1 = parse_f64(v, key);
  else if (key == "beta2") t.beta2 = parse_f64(v, key);
  else if (key == "eps") t.eps = parse_f64(v, key);
  else if (key == "decay_norm_and_bias") t.decay_norm_and_bias = parse_bool(v, key);
  else if (key == "batch_size") t.batch_size = parse_i64(v, key);
  else if (key == "epochs") t.epochs = parse_i64(v, key);
  else if (key == "seed") t.seed = parse_u64(v, key);
  else throw std::invalid_argument("config: unknown key '" + key + "' in [train]");
}

inline void apply_data_key(RunConfig& cfg, const std::string& key, const std::string& v) {
  SyntheticSpec& s = cfg.synth;
  if (key == "manifest") cfg.data_manifest = v;
  else if (key == "num_classes") s.num_classes = parse_i64(v, key);
  else if (key == "samples_per_class") s.samples_per_class = parse_i64(v, key);
  else if (key == "test_samples_per_class") s.test_samples_per_class = parse_i64(v, key);
  else if (key == "frames_per_video") s.frames_per_video = parse_i64(v, key);
  else if (key == "noise_sigma") s.noise_sigma = parse_f64(v, key);
  else if (key == "discriminative_part") s.discriminative_part = part_from_name(v);
  else if (key == "seed") s.seed = parse_u64(v, key);
  else throw std::invalid_argument("config: unknown key '" + key + "' in [data]");
}

inline std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Sections [model], [train], [data]; '#' and ';' start comments; unknown
// sections and keys are errors. Omitted keys keep their defaults.
inline RunConfig parse_run_config(std::istream& is, const std::string& source) {
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line = line.substr(0, cut);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: malformed section at " + source + ":" +
                                    std::to_string(lineno));
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data")
        throw std::invalid_argument("config: unknown section '[" + section + "]' at " + source +
                                    ":" + std::to_string(lineno));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key=value at " + source + ":" +
                                  std::to_string(lineno));
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: empty key at " + source + ":" + std::to_string(lineno));
    if (section == "model") detail::apply_model_key(cfg.model, key, value);
    else if (section == "train") detail::apply_train_key(cfg.train, key, value);
    else if (section == "data") detail::apply_data_key(cfg, key, value);
    else
      throw std::invalid_argument("config: key '" + key + "' outside any section at " + source +
                                  ":" + std::to_string(lineno));
  }
  // the expression block follows the face part
  cfg.model.reps.expression = cfg.model.layout.has(Part::face);
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  return parse_run_config(is, path);
}

// every effective value, defaults included; reloading reproduces the run
inline void dump_run_config(const RunConfig& cfg, std::ostream& os) {
  using detail::fmt_f64;
  os << "[model]\n";
  os << "frames = " << cfg.model.frames << "\n";
  os << "parts = " << detail::parts_to_string(cfg.model.layout) << "\n";
  os << "body_joints = " << cfg.model.layout.body_joints << "\n";
  os << "hand_joints = " << cfg.model.layout.hand_joints << "\n";
  os << "expression_width = " << cfg.model.layout.expression_width << "\n";
  os << "pos2d = " << (cfg.model.reps.pos2d ? "true" : "false") << "\n";
  os << "pos3d = " << (cfg.model.reps.pos3d ? "true" : "false") << "\n";
  os << "rot6d = " << (cfg.model.reps.rot6d ? "true" : "false") << "\n";
  os << "joint_dim = " << cfg.model.joint_dim << "\n";
  os << "expr_multiplier = " << cfg.model.expr_multiplier << "\n";
  os << "pairs = " << cfg.model.pairs << "\n";
  os << "heads = " << cfg.model.heads << "\n";
  os << "ffn_dim = " << cfg.model.ffn_dim << "\n";
  os << "dropout = " << fmt_f64(cfg.model.dropout) << "\n";
  os << "composition = " << composition_name(cfg.model.composition) << "\n";
  os << "ensemble = " << ensemble_name(cfg.model.ensemble) << "\n";
  os << "num_classes = " << cfg.model.num_classes << "\n";
  os << "positional_encoding = " << (cfg.model.positional_encoding ? "true" : "false") << "\n";
  os << "pre_norm = " << (cfg.model.pre_norm ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "lr = " << fmt_f64(cfg.train.lr) << "\n";
  os << "weight_decay = " << fmt_f64(cfg.train.weight_decay) << "\n";
  os << "beta1 = " << fmt_f64(cfg.train.beta1) << "\n";
  os << "beta2 = " << fmt_f64(cfg.train.beta2) << "\n";
  os << "eps = " << fmt_f64(cfg.train.eps) << "\n";
  os << "decay_norm_and_bias = " << (cfg.train.decay_norm_and_bias ? "true" : "false") << "\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "epochs = " << cfg.train.epochs << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "\n[data]\n";
  if (!cfg.data_manifest.empty()) os << "manifest = " << cfg.data_manifest << "\n";
  os << "num_classes = " << cfg.synth.num_classes << "\n";
  os << "samples_per_class = " << cfg.synth.samples_per_class << "\n";
  os << "test_samples_per_class = " << cfg.synth.test_samples_per_class << "\n";
  os << "frames_per_video = " << cfg.synth.frames_per_video << "\n";
  os << "noise_sigma = " << fmt_f64(cfg.synth.noise_sigma) << "\n";
  os << "discriminative_part = " << part_name(cfg.synth.discriminative_part) << "\n";
  os << "seed = " << cfg.synth.seed << "\n";
}

// ---- raw channel ingestion ----
//
// Raw pose file: a key-value document with "gloss" (string), "split"
// (train/val/test), optional "root" ([x,y,z], frame-0 pelvis), and "frames",
// each frame holding "pos2d" (40x2), "pos3d" (40x3), "axis_angle" (40x3)
// and "expression" (E floats). Preprocessing maps 2D points to the unit
// square, shifts 3D points to the pelvis origin, and re-encodes rotations
// as the first two matrix columns.

struct RawImportResult {
  PoseSequence sequence;
  std::string gloss;
  std::string split;
};

inline RawImportResult import_raw_sequence(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("preprocess: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("preprocess: " + path + " is not valid: " + e.what());
  }
  auto require = [&](const char* key) {
    if (!j.contains(key))
      throw std::invalid_argument("preprocess: " + path + " lacks key '" + key + "'");
  };
  require("gloss");
  require("split");
  require("frames");

  RawImportResult out;
  out.gloss = j.at("gloss").get<std::string>();
  out.split = j.at("split").get<std::string>();
  if (!known_split(out.split))
    throw std::invalid_argument("preprocess: " + path + " has unknown split '" + out.split + "'");

  PoseSequence& seq = out.sequence;
  seq.id = std::filesystem::path(path).stem().string();
  seq.layout = PartLayout::full();
  if (j.contains("root")) {
    const auto r = j.at("root");
    if (!r.is_array() || r.size() != 3)
      throw std::invalid_argument("preprocess: " + path + " root must be [x,y,z]");
    for (size_t k = 0; k < 3; ++k) seq.root0[k] = r[k].get<float>();
  }
  const auto& frames = j.at("frames");
  if (!frames.is_array() || frames.empty())
    throw std::invalid_argument("preprocess: " + path + " has no frames");
  const Index J = seq.layout.joint_count();
  bool width_set = false;
  for (const auto& fj : frames) {
    PoseFrame f;
    auto read_block = [&](const char* key, size_t dims, auto push) {
      if (!fj.contains(key))
        throw std::invalid_argument("preprocess: " + path + " frame lacks '" + key + "'");
      const auto& arr = fj.at(key);
      if (!arr.is_array() || static_cast<Index>(arr.size()) != J)
        throw std::invalid_argument("preprocess: " + path + " '" + key + "' must list " +
                                    std::to_string(J) + " joints");
      for (const auto& row : arr) {
        if (!row.is_array() || row.size() != dims)
          throw std::invalid_argument("preprocess: " + path + " '" + key + "' rows need " +
                                      std::to_string(dims) + " numbers");
        push(row);
      }
    };
    read_block("pos2d", 2, [&](const nlohmann::json& r) {
      f.pos2d.push_back({r[0].get<float>(), r[1].get<float>()});
    });
    read_block("pos3d", 3, [&](const nlohmann::json& r) {
      f.pos3d.push_back({r[0].get<float>(), r[1].get<float>(), r[2].get<float>()});
    });
    read_block("axis_angle", 3, [&](const nlohmann::json& r) {
      const Mat3 R = axis_angle_to_matrix({r[0].get<double>(), r[1].get<double>(),
                                           r[2].get<double>()});
      const Rot6 six = matrix_to_6d(R);
      std::array<float, 6> enc;
      for (size_t k = 0; k < 6; ++k) enc[k] = static_cast<float>(six[k]);
      f.rot6d.push_back(enc);
    });
    if (!fj.contains("expression"))
      throw std::invalid_argument("preprocess: " + path + " frame lacks 'expression'");
    for (const auto& v : fj.at("expression")) f.expression.push_back(v.get<float>());
    if (!width_set) {
      if (f.expression.empty())
        throw std::invalid_argument("preprocess: " + path + " expression block is empty");
      seq.layout.expression_width = static_cast<Index>(f.expression.size());
      width_set = true;
    }
    seq.frames.push_back(std::move(f));
  }
  seq.validate();
  align_2d(seq);
  align_3d_root(seq);
  return out;
}

// ---- report formatting ----

namespace detail {

inline std::string format_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> widths;
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size(); ++c) {
      if (widths.size() <= c) widths.resize(c + 1, 0);
      widths[c] = std::max(widths[c], row[c].size());
    }
  std::string out;
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out += std::string(widths[c] - row[c].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

inline std::string fmt_millions(long long params) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(params) / 1e6);
  return buf;
}

inline std::string fmt_gflops(double flops) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3fG", flops / 1e9);
  return buf;
}

inline std::string fmt_pct(double frac) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * frac);
  return buf;
}

}  // namespace detail

// parameter/FLOP table across ensemble modes for one class count
inline std::string format_cost_table(const ModelConfig& base, Index num_classes) {
  ModelConfig cfg = base;
  cfg.num_classes = num_classes;
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"ensemble", "params", "flops/clip"});
  std::vector<Ensemble> modes = {Ensemble::early};
  if (cfg.pose_rep_count() >= 2) {
    modes.push_back(Ensemble::middle);
    modes.push_back(Ensemble::late);
  }
  for (Ensemble e : modes) {
    ModelConfig c = cfg;
    c.ensemble = e;
    const CostReport rep = count_costs(c);
    rows.push_back({ensemble_name(e), detail::fmt_millions(rep.params_total),
                    detail::fmt_gflops(rep.flops_total)});
  }
  std::string out = "classes = " + std::to_string(num_classes) + "\n";
  out += detail::format_table(rows);
  return out;
}

inline nlohmann::json costs_json(const ModelConfig& base, const std::vector<Index>& class_counts) {
  nlohmann::json j;
  j["note"] =
      "the reference cost table does not state its class count; counts are "
      "reported for both plausible values and comparisons should use ratios";
  j["tables"] = nlohmann::json::array();
  for (Index C : class_counts) {
    nlohmann::json table;
    table["classes"] = C;
    table["rows"] = nlohmann::json::array();
    ModelConfig cfg = base;
    cfg.num_classes = C;
    std::vector<Ensemble> modes = {Ensemble::early};
    if (cfg.pose_rep_count() >= 2) {
      modes.push_back(Ensemble::middle);
      modes.push_back(Ensemble::late);
    }
    for (Ensemble e : modes) {
      ModelConfig c = cfg;
      c.ensemble = e;
      const CostReport rep = count_costs(c);
      nlohmann::json row;
      row["ensemble"] = ensemble_name(e);
      row["params"] = rep.params_total;
      row["flops_per_clip"] = rep.flops_total;
      row["params_embed"] = rep.params_embed;
      row["params_blocks"] = rep.params_blocks;
      row["params_heads"] = rep.params_heads;
      table["rows"].push_back(row);
    }
    j["tables"].push_back(table);
  }
  return j;
}

inline std::string format_metrics(const MetricsReport& m) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"accuracy"};
  for (const auto& [k, _] : m.per_instance) header.push_back("top-" + std::to_string(k));
  rows.push_back(header);
  std::vector<std::string> inst = {"per-instance"};
  for (const auto& [_, v] : m.per_instance) inst.push_back(detail::fmt_pct(v));
  rows.push_back(inst);
  std::vector<std::string> cls = {"per-class"};
  for (const auto& [_, v] : m.per_class) cls.push_back(detail::fmt_pct(v));
  rows.push_back(cls);
  return detail::format_table(rows);
}

inline nlohmann::json metrics_json(const MetricsReport& m) {
  nlohmann::json j;
  j["samples"] = m.samples;
  j["classes_evaluated"] = m.classes_evaluated;
  for (const auto& [k, v] : m.per_instance) j["per_instance"]["top" + std::to_string(k)] = v;
  for (const auto& [k, v] : m.per_class) j["per_class"]["top" + std::to_string(k)] = v;
  return j;
}

inline std::string format_ablation_table(const std::vector<AblationEntry>& grid,
                                         const std::string& family) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"variant", "params", "flops/clip", "top-1", "top-5", "train-loss"});
  for (const AblationEntry& e : grid) {
    if (e.family != family) continue;
    rows.push_back({e.variant, detail::fmt_millions(e.params), detail::fmt_gflops(e.flops),
                    e.trained ? detail::fmt_pct(e.test_top1) : "-",
                    e.trained ? detail::fmt_pct(e.test_top5) : "-",
                    e.trained ? detail::fmt_f64(e.final_train_loss).substr(0, 7) : "-"});
  }
  return "[" + family + "]\n" + detail::format_table(rows);
}

// ---- subcommand context ----

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::string split = "test";
  std::string checkpoint;
  std::string input;
  std::string precision = "single";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

namespace detail {

inline RunConfig resolve_config(const CliOptions& opt) {
  RunConfig cfg;
  if (!opt.config_path.empty()) cfg = load_run_config(opt.config_path);
  if (opt.seed_set) {
    cfg.train.seed = opt.seed;
    cfg.synth.seed = opt.seed;
  }
  return cfg;
}

inline void ensure_out_dir(const CliOptions& opt) {
  std::filesystem::create_directories(opt.out_dir);
}

inline Dataset open_dataset(const RunConfig& cfg) {
  if (cfg.data_manifest.empty())
    throw std::invalid_argument("config: [data] manifest is required for this command");
  return Dataset::load(cfg.data_manifest);
}

inline void check_class_match(const RunConfig& cfg, const Dataset& data) {
  if (cfg.model.num_classes != data.num_classes())
    throw std::invalid_argument(
        "config: [model] num_classes = " + std::to_string(cfg.model.num_classes) +
        " but the dataset manifest lists " + std::to_string(data.num_classes()) + " classes");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
}

}  // namespace detail

// ---- subcommands ----

inline int run_synth(const CliOptions& opt, std::ostream& out) {
  RunConfig cfg = detail::resolve_config(opt);
  detail::ensure_out_dir(opt);
  const DatasetManifest manifest = generate_synthetic_dataset(cfg.synth, opt.out_dir);
  out << "wrote " << manifest.samples.size() << " sequences across "
      << manifest.classes.size() << " classes to " << opt.out_dir << "\n";
  return 0;
}

inline int run_preprocess(const CliOptions& opt, std::ostream& out) {
  if (opt.input.empty()) throw std::invalid_argument("preprocess: --input is required");
  std::vector<std::string> files;
  if (std::filesystem::is_directory(opt.input)) {
    for (const auto& e : std::filesystem::directory_iterator(opt.input))
      if (e.path().extension() == ".json") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(opt.input);
  }
  if (files.empty()) throw std::invalid_argument("preprocess: no .json files under " + opt.input);
  detail::ensure_out_dir(opt);

  std::vector<RawImportResult> imported;
  for (const std::string& f : files) imported.push_back(import_raw_sequence(f));

  std::vector<std::string> glosses;
  for (const auto& r : imported) glosses.push_back(r.gloss);
  std::sort(glosses.begin(), glosses.end());
  glosses.erase(std::unique(glosses.begin(), glosses.end()), glosses.end());

  DatasetManifest manifest;
  manifest.classes = glosses;
  for (auto& r : imported) {
    const std::string file = r.sequence.id + ".p3ds";
    save_sequence(r.sequence, (std::filesystem::path(opt.out_dir) / file).string());
    SampleInfo info;
    info.id = r.sequence.id;
    info.file = file;
    info.label = static_cast<int>(
        std::lower_bound(glosses.begin(), glosses.end(), r.gloss) - glosses.begin());
    info.split = r.split;
    info.num_frames = r.sequence.num_frames();
    manifest.samples.push_back(std::move(info));
  }
  save_manifest(manifest, (std::filesystem::path(opt.out_dir) / "manifest.json").string());
  out << "converted " << imported.size() << " raw sequences (" << glosses.size()
      << " glosses) into " << opt.out_dir << "\n";
  return 0;
}

template <class S>
int run_train_cmd(const CliOptions& opt, std::ostream& out) {
  RunConfig cfg = detail::resolve_config(opt);
  Dataset data = detail::open_dataset(cfg);
  detail::check_class_match(cfg, data);
  cfg.model.validate();
  cfg.train.validate();
  detail::ensure_out_dir(opt);

  auto model = build_model<S>(cfg.model, RngState(cfg.train.seed));
  Adam<S> adam(cfg.train.adam());
  Index start_epoch = 0;
  if (!opt.checkpoint.empty()) {
    const CheckpointInfo info = load_checkpoint(opt.checkpoint, model, &adam);
    start_epoch = info.next_epoch;
    cfg.train.seed = info.train_seed;  // resume must replay the original stream
    out << "resuming from epoch " << start_epoch << "\n";
  }

  std::ostringstream history;
  auto on_epoch = [&](const EpochStats& s) {
    char line[160];
    std::snprintf(line, sizeof(line), "epoch %lld loss %.17g top1 %.17g\n",
                  static_cast<long long>(s.epoch), s.mean_loss, s.train_top1);
    history << line;
    out << line;
  };
  train_model(model, adam, data, cfg.train, start_epoch, on_epoch);

  const auto dir = std::filesystem::path(opt.out_dir);
  detail::write_text_file(dir / "history.txt", history.str());
  std::ostringstream eff;
  dump_run_config(cfg, eff);
  detail::write_text_file(dir / "effective.cfg", eff.str());
  save_checkpoint((dir / "model.ckpt").string(), model, &adam, cfg.train.seed, cfg.train.epochs);
  out << "saved " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

template <class S>
int run_eval_cmd(const CliOptions& opt, std::ostream& out) {
  if (opt.checkpoint.empty()) throw std::invalid_argument("eval: --checkpoint is required");
  RunConfig cfg = detail::resolve_config(opt);
  Dataset data = detail::open_dataset(cfg);
  detail::check_class_match(cfg, data);
  auto model = build_model<S>(cfg.model, RngState(0));
  load_checkpoint(opt.checkpoint, model, static_cast<Adam<S>*>(nullptr));
  auto ev = evaluate_split(model, data, opt.split);
  out << "split " << opt.split << ": " << ev.metrics.samples << " samples, "
      << ev.metrics.classes_evaluated << " classes\n";
  out << format_metrics(ev.metrics);
  detail::ensure_out_dir(opt);
  nlohmann::json j = metrics_json(ev.metrics);
  j["split"] = opt.split;
  detail::write_text_file(std::filesystem::path(opt.out_dir) / "metrics.json", j.dump(2) + "\n");
  return 0;
}

inline int run_costs(const CliOptions& opt, std::ostream& out) {
  RunConfig cfg = detail::resolve_config(opt);
  cfg.model.validate();
  std::vector<Index> class_counts = {100, 2000};
  if (cfg.model.num_classes != 100 && cfg.model.num_classes != 2000)
    class_counts.insert(class_counts.begin(), cfg.model.num_classes);
  out << "note: the reference cost table does not state its class count; both\n"
      << "plausible values are reported and comparisons should use ratios.\n\n";
  for (Index C : class_counts) out << format_cost_table(cfg.model, C) << "\n";
  detail::ensure_out_dir(opt);
  detail::write_text_file(std::filesystem::path(opt.out_dir) / "costs.json",
                          costs_json(cfg.model, class_counts).dump(2) + "\n");
  return 0;
}

template <class S>
int run_ablate(const CliOptions& opt, std::ostream& out) {
  RunConfig cfg = detail::resolve_config(opt);
  Dataset data = detail::open_dataset(cfg);
  detail::check_class_match(cfg, data);
  auto grid = ablation_grid(cfg.model);
  RngState rng(cfg.train.seed);
  for (size_t i = 0; i < grid.size(); ++i) {
    out << "[" << (i + 1) << "/" << grid.size() << "] " << grid[i].family << " / "
        << grid[i].variant << "\n";
    run_ablation_entry<S>(grid[i], data, cfg.train, rng.split(static_cast<std::uint64_t>(i)));
  }
  nlohmann::json j = nlohmann::json::array();
  for (const std::string family : {"parts", "encodings", "representations", "ensembles"}) {
    out << "\n" << format_ablation_table(grid, family);
    for (const AblationEntry& e : grid) {
      if (e.family != family) continue;
      j.push_back({{"family", e.family},
                   {"variant", e.variant},
                   {"params", e.params},
                   {"flops_per_clip", e.flops},
                   {"test_top1", e.test_top1},
                   {"test_top5", e.test_top5},
                   {"final_train_loss", e.final_train_loss}});
    }
  }
  detail::ensure_out_dir(opt);
  detail::write_text_file(std::filesystem::path(opt.out_dir) / "ablation.json",
                          j.dump(2) + "\n");
  return 0;
}

// the geometry every gradient audit uses: two joints per part, two channels
// per joint, one block pair, three classes
inline ModelConfig gradcheck_config() {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.layout.body_joints = 2;
  cfg.layout.hand_joints = 2;
  cfg.layout.expression_width = 2;
  cfg.joint_dim = 2;
  cfg.expr_multiplier = 1;
  cfg.pairs = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.dropout = 0.0;
  cfg.num_classes = 3;
  return cfg;
}

inline int run_gradcheck(const CliOptions& opt, std::ostream& out) {
  const ModelConfig cfg = gradcheck_config();
  const std::uint64_t seed = opt.seed_set ? opt.seed : 0;
  auto model = build_model<double>(cfg, RngState(seed));
  RngState data_rng = RngState(seed).split("gradcheck-input");
  std::vector<double> v(static_cast<size_t>(2 * cfg.frames * cfg.input_width()));
  for (auto& x : v) x = data_rng.uniform(-1.0, 1.0);
  auto input = Tensor<double>::from_data({2, cfg.frames, cfg.input_width()}, std::move(v), false);
  const std::vector<int> labels = {1, 2};

  auto params = model.parameters();
  auto loss_fn = [&]() {
    ForwardMode mode;
    mode.training = true;
    mode.update_batchnorm = false;
    RngState fwd(0);
    auto fo = model_forward(model, {input}, mode, fwd);
    return cross_entropy_with_logits(fo.logits, labels);
  };
  auto report = grad_check<double>(loss_fn, params, 1e-5, 1e-4, 2, RngState(seed + 1));
  out << "checked " << report.entries.size() << " coordinates across " << params.size()
      << " parameter tensors\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max relative error %.3e (tolerance %.0e)\n",
                report.max_rel_err, report.tol);
  out << buf;
  out << (report.passed ? "PASS" : "FAIL") << "\n";
  return report.passed ? 0 : 1;
}

}  // namespace p3d
