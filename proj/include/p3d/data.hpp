#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "p3d/pose.hpp"
#include "p3d/rng.hpp"
#include "p3d/rotation.hpp"

namespace p3d {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("sequence file: truncated payload (") + what + ")");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is, const char* what) {
  const std::uint32_t u = read_u32(is, what);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
  const std::uint64_t lo = read_u32(is, what);
  const std::uint64_t hi = read_u32(is, what);
  return lo | (hi << 32);
}

}  // namespace detail

// ---- sequence files ----
// little-endian: "P3DS", u32 version, u32 num_frames, u32 num_joints,
// u32 flags (bit0 pos2d, bit1 pos3d, bit2 rot6d, bit3 expression),
// u32 expression_width, 3*f32 frame-0 pelvis, then frame-major payload:
// per frame, per joint in part order the present blocks (pos2d/pos3d/rot6d),
// then the expression block.

inline constexpr std::uint32_t kSequenceFileVersion = 1;

inline void save_sequence(const PoseSequence& seq, const std::string& path) {
  seq.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_sequence: cannot open " + path);
  os.write("P3DS", 4);
  detail::write_u32(os, kSequenceFileVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(seq.num_frames()));
  detail::write_u32(os, static_cast<std::uint32_t>(seq.layout.joint_count()));
  std::uint32_t flags = 0;
  if (seq.reps.pos2d) flags |= 1u;
  if (seq.reps.pos3d) flags |= 2u;
  if (seq.reps.rot6d) flags |= 4u;
  if (seq.reps.expression) flags |= 8u;
  detail::write_u32(os, flags);
  detail::write_u32(os, seq.reps.expression
                            ? static_cast<std::uint32_t>(seq.layout.expression_width)
                            : 0u);
  for (float v : seq.root0) detail::write_f32(os, v);
  for (const PoseFrame& f : seq.frames) {
    const size_t j = static_cast<size_t>(seq.layout.joint_count());
    for (size_t i = 0; i < j; ++i) {
      if (seq.reps.pos2d)
        for (float v : f.pos2d[i]) detail::write_f32(os, v);
      if (seq.reps.pos3d)
        for (float v : f.pos3d[i]) detail::write_f32(os, v);
      if (seq.reps.rot6d)
        for (float v : f.rot6d[i]) detail::write_f32(os, v);
    }
    if (seq.reps.expression)
      for (float v : f.expression) detail::write_f32(os, v);
  }
  if (!os) throw std::runtime_error("save_sequence: write failed for " + path);
}

// layout_hint supplies the part split for the flat joint list; its joint
// count must match the file header
inline PoseSequence load_sequence(const std::string& path,
                                  const PartLayout& layout_hint = PartLayout::full()) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_sequence: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "P3DS", 4) != 0)
    throw std::runtime_error("load_sequence: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(is, "version");
  if (version != kSequenceFileVersion)
    throw std::runtime_error("load_sequence: unsupported version " + std::to_string(version));
  const std::uint32_t num_frames = detail::read_u32(is, "num_frames");
  const std::uint32_t num_joints = detail::read_u32(is, "num_joints");
  const std::uint32_t flags = detail::read_u32(is, "flags");
  const std::uint32_t expr_width = detail::read_u32(is, "expression_width");
  if (num_frames == 0) throw std::runtime_error("load_sequence: empty sequence");
  if (flags == 0 || (flags & ~15u) != 0)
    throw std::runtime_error("load_sequence: flag/width inconsistency (bad flags)");
  const bool has_expr = (flags & 8u) != 0;
  if (has_expr != (expr_width > 0))
    throw std::runtime_error("load_sequence: flag/width inconsistency (expression)");
  if ((flags & 7u) == 0)
    throw std::runtime_error("load_sequence: flag/width inconsistency (no joint blocks)");

  PoseSequence seq;
  seq.layout = layout_hint;
  if (has_expr) {
    if (!seq.layout.has(Part::face))
      throw std::runtime_error("load_sequence: file carries expression but layout lacks face");
    seq.layout.expression_width = static_cast<Index>(expr_width);
  } else {
    std::vector<Part> pose_only = seq.layout.pose_parts();
    seq.layout.parts = pose_only;
  }
  if (seq.layout.joint_count() != static_cast<Index>(num_joints))
    throw std::runtime_error("load_sequence: joint count mismatch (file " +
                             std::to_string(num_joints) + ", layout " +
                             std::to_string(seq.layout.joint_count()) + ")");
  seq.reps.pos2d = (flags & 1u) != 0;
  seq.reps.pos3d = (flags & 2u) != 0;
  seq.reps.rot6d = (flags & 4u) != 0;
  seq.reps.expression = has_expr;
  for (float& v : seq.root0) v = detail::read_f32(is, "root");

  seq.frames.resize(num_frames);
  for (PoseFrame& f : seq.frames) {
    if (seq.reps.pos2d) f.pos2d.resize(num_joints);
    if (seq.reps.pos3d) f.pos3d.resize(num_joints);
    if (seq.reps.rot6d) f.rot6d.resize(num_joints);
    for (std::uint32_t i = 0; i < num_joints; ++i) {
      if (seq.reps.pos2d)
        for (float& v : f.pos2d[i]) v = detail::read_f32(is, "pos2d");
      if (seq.reps.pos3d)
        for (float& v : f.pos3d[i]) v = detail::read_f32(is, "pos3d");
      if (seq.reps.rot6d)
        for (float& v : f.rot6d[i]) v = detail::read_f32(is, "rot6d");
    }
    if (has_expr) {
      f.expression.resize(expr_width);
      for (float& v : f.expression) v = detail::read_f32(is, "expression");
    }
  }
  is.peek();
  if (!is.eof()) throw std::runtime_error("load_sequence: trailing bytes in " + path);
  seq.validate();
  return seq;
}

// ---- manifest ----

struct SampleInfo {
  std::string id;
  std::string file;  // relative to the manifest directory
  int label = -1;
  std::string split;
  Index num_frames = 0;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<SampleInfo> samples;
};

inline bool known_split(const std::string& s) {
  return s == "train" || s == "val" || s == "test";
}

inline void validate_manifest(const DatasetManifest& m) {
  if (m.classes.empty()) throw std::invalid_argument("manifest: no classes");
  const int c = static_cast<int>(m.classes.size());
  std::unordered_set<std::string> ids;
  for (const SampleInfo& s : m.samples) {
    if (s.label < 0 || s.label >= c)
      throw std::invalid_argument("manifest: label " + std::to_string(s.label) +
                                  " outside [0," + std::to_string(c) + ") for id " + s.id);
    if (!known_split(s.split))
      throw std::invalid_argument("manifest: unknown split tag '" + s.split + "' for id " + s.id);
    if (!ids.insert(s.id).second)
      throw std::invalid_argument("manifest: duplicate id " + s.id);
    if (s.num_frames <= 0)
      throw std::invalid_argument("manifest: non-positive num_frames for id " + s.id);
  }
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  validate_manifest(m);
  nlohmann::json j;
  j["classes"] = m.classes;
  j["samples"] = nlohmann::json::array();
  for (const SampleInfo& s : m.samples)
    j["samples"].push_back({{"id", s.id},
                            {"file", s.file},
                            {"label", s.label},
                            {"split", s.split},
                            {"num_frames", s.num_frames}});
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_manifest: cannot open " + path);
  os << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("load_manifest: parse error in " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& js : j.at("samples")) {
      SampleInfo s;
      s.id = js.at("id").get<std::string>();
      s.file = js.at("file").get<std::string>();
      s.label = js.at("label").get<int>();
      s.split = js.at("split").get<std::string>();
      s.num_frames = js.at("num_frames").get<Index>();
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("load_manifest: bad schema in " + path + ": " + e.what());
  }
  validate_manifest(m);
  return m;
}

// Split-filtered access over a manifest plus lazy, cached sequence loading.
class Dataset {
 public:
  Dataset() = default;

  static Dataset load(const std::string& manifest_path) {
    Dataset d;
    d.manifest_ = load_manifest(manifest_path);
    d.base_dir_ = std::filesystem::path(manifest_path).parent_path().string();
    for (const SampleInfo& s : d.manifest_.samples) {
      const auto p = std::filesystem::path(d.base_dir_) / s.file;
      if (!std::filesystem::exists(p))
        throw std::runtime_error("dataset: dangling file reference " + p.string() + " for id " +
                                 s.id);
    }
    return d;
  }

  const DatasetManifest& manifest() const { return manifest_; }
  const std::string& base_dir() const { return base_dir_; }
  Index num_classes() const { return static_cast<Index>(manifest_.classes.size()); }

  std::vector<const SampleInfo*> split(const std::string& tag) const {
    if (!known_split(tag)) throw std::invalid_argument("dataset: unknown split tag '" + tag + "'");
    std::vector<const SampleInfo*> out;
    for (const SampleInfo& s : manifest_.samples)
      if (s.split == tag) out.push_back(&s);
    return out;
  }

  std::map<int, Index> class_counts(const std::string& tag) const {
    std::map<int, Index> counts;
    for (const SampleInfo* s : split(tag)) counts[s->label]++;
    return counts;
  }

  const PoseSequence& sequence(const SampleInfo& info) const {
    auto it = cache_.find(info.id);
    if (it != cache_.end()) return it->second;
    const auto p = std::filesystem::path(base_dir_) / info.file;
    PoseSequence seq = load_sequence(p.string());
    seq.id = info.id;
    seq.label = info.label;
    if (seq.num_frames() != info.num_frames)
      throw std::runtime_error("dataset: num_frames mismatch for id " + info.id);
    return cache_.emplace(info.id, std::move(seq)).first->second;
  }

 private:
  DatasetManifest manifest_;
  std::string base_dir_;
  mutable std::unordered_map<std::string, PoseSequence> cache_;
};

// ---- synthetic data ----

struct SyntheticSpec {
  Index num_classes = 8;
  Index samples_per_class = 16;
  Index test_samples_per_class = 0;
  Index frames_per_video = 48;
  double noise_sigma = 0.05;
  Part discriminative_part = Part::left_hand;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("SyntheticSpec: num_classes >= 2");
    if (samples_per_class < 1) throw std::invalid_argument("SyntheticSpec: samples_per_class >= 1");
    if (test_samples_per_class < 0)
      throw std::invalid_argument("SyntheticSpec: test_samples_per_class >= 0");
    if (frames_per_video < 1) throw std::invalid_argument("SyntheticSpec: frames_per_video >= 1");
    if (noise_sigma < 0) throw std::invalid_argument("SyntheticSpec: noise_sigma >= 0");
  }
};

namespace detail {

inline Part canonical_part_of(Index joint) {
  if (joint < 10) return Part::body;
  if (joint < 25) return Part::left_hand;
  return Part::right_hand;
}

struct SynthMotion {
  double freq;
  double phase;
  double amp;
};

// class identity flows only through the discriminative part's channels
inline SynthMotion synth_motion(const SyntheticSpec& spec, Part part, Index local_joint,
                                Index cls) {
  SynthMotion m;
  const double joint_phase = 0.35 * static_cast<double>(local_joint) +
                             0.9 * static_cast<double>(static_cast<int>(part));
  if (part == spec.discriminative_part) {
    m.freq = 0.9 + 0.23 * static_cast<double>(cls);
    m.phase = joint_phase + 0.61 * static_cast<double>(cls);
    m.amp = 0.12;
  } else {
    m.freq = 0.7;
    m.phase = joint_phase;
    m.amp = 0.08;
  }
  return m;
}

}  // namespace detail

// builds one raw (pre-alignment) sequence; exposed for tests
inline PoseSequence synthesize_raw_sequence(const SyntheticSpec& spec, Index cls, RngState noise) {
  const Index V = spec.frames_per_video;
  const double two_pi = 6.283185307179586476925286766559;
  PoseSequence seq;
  seq.layout = PartLayout::full();
  seq.label = static_cast<int>(cls);
  const Index J = seq.layout.joint_count();
  const std::array<double, 3> root{0.31, -0.12, 0.24};
  seq.root0 = {static_cast<float>(root[0]), static_cast<float>(root[1]),
               static_cast<float>(root[2])};
  seq.frames.resize(static_cast<size_t>(V));
  for (Index t = 0; t < V; ++t) {
    PoseFrame& f = seq.frames[static_cast<size_t>(t)];
    f.pos2d.resize(static_cast<size_t>(J));
    f.pos3d.resize(static_cast<size_t>(J));
    f.rot6d.resize(static_cast<size_t>(J));
    const double u = static_cast<double>(t) / static_cast<double>(V);
    for (Index j = 0; j < J; ++j) {
      const Part part = detail::canonical_part_of(j);
      const Index local = j - seq.layout.joint_offset(part);
      const auto m = detail::synth_motion(spec, part, local, cls);

      std::array<double, 3> center{0, 0.5, 0};
      if (part == Part::left_hand) center = {-0.4, 0.65, 0.12};
      if (part == Part::right_hand) center = {0.4, 0.65, 0.12};
      std::array<double, 3> base{center[0] + 0.02 * static_cast<double>(local),
                                 center[1] + 0.03 * static_cast<double>((local * 7) % 5),
                                 center[2] + 0.015 * static_cast<double>((local * 3) % 4)};
      const double arg = two_pi * m.freq * u + m.phase;
      std::array<double, 3> p{base[0] + m.amp * std::sin(arg) + root[0] +
                                  spec.noise_sigma * noise.normal(),
                              base[1] + m.amp * 0.8 * std::sin(arg + 2.1) + root[1] +
                                  spec.noise_sigma * noise.normal(),
                              base[2] + m.amp * 0.6 * std::cos(arg + 4.2) + root[2] +
                                  spec.noise_sigma * noise.normal()};
      f.pos3d[static_cast<size_t>(j)] = {static_cast<float>(p[0]), static_cast<float>(p[1]),
                                         static_cast<float>(p[2])};
      // pixel-style projection of the (already noisy) 3D point
      f.pos2d[static_cast<size_t>(j)] = {static_cast<float>(320.0 + 400.0 * p[0]),
                                         static_cast<float>(240.0 - 400.0 * p[1])};
      const Vec3 aa{0.4 * std::sin(arg) + spec.noise_sigma * noise.normal(),
                    0.4 * std::cos(arg * 1.3) + spec.noise_sigma * noise.normal(),
                    0.3 * std::sin(2.0 * arg) + spec.noise_sigma * noise.normal()};
      const Rot6 six = matrix_to_6d(axis_angle_to_matrix(aa));
      for (int k = 0; k < 6; ++k)
        f.rot6d[static_cast<size_t>(j)][static_cast<size_t>(k)] =
            static_cast<float>(six[static_cast<size_t>(k)]);
    }
    f.expression.resize(static_cast<size_t>(seq.layout.expression_width));
    const auto em = detail::synth_motion(spec, Part::face, 0, cls);
    for (Index i = 0; i < seq.layout.expression_width; ++i)
      f.expression[static_cast<size_t>(i)] = static_cast<float>(
          0.5 * std::sin(two_pi * em.freq * u + em.phase + 0.4 * static_cast<double>(i)) +
          spec.noise_sigma * noise.normal());
  }
  return seq;
}

// writes <out_dir>/manifest.json plus one sequence file per sample; data is
// aligned (2D in the unit square, frame-0 pelvis at the origin)
inline DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec,
                                                  const std::string& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  for (Index k = 0; k < spec.num_classes; ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "gloss_%03lld", static_cast<long long>(k));
    m.classes.push_back(name);
  }
  const RngState root(spec.seed);
  for (const char* split : {"train", "test"}) {
    const bool is_test = std::string(split) == "test";
    const Index per_class = is_test ? spec.test_samples_per_class : spec.samples_per_class;
    for (Index k = 0; k < spec.num_classes; ++k)
      for (Index s = 0; s < per_class; ++s) {
        RngState noise = root.split("synth-noise")
                             .split(is_test ? 1u : 0u)
                             .split(static_cast<std::uint64_t>(k))
                             .split(static_cast<std::uint64_t>(s));
        PoseSequence seq = synthesize_raw_sequence(spec, k, noise);
        align_2d(seq);
        align_3d_root(seq);
        char id[64];
        std::snprintf(id, sizeof(id), "c%03lld_s%03lld_%s", static_cast<long long>(k),
                      static_cast<long long>(s), split);
        seq.id = id;
        save_sequence(seq, (std::filesystem::path(out_dir) / (std::string(id) + ".p3ds")).string());
        SampleInfo info;
        info.id = id;
        info.file = std::string(id) + ".p3ds";
        info.label = static_cast<int>(k);
        info.split = split;
        info.num_frames = spec.frames_per_video;
        m.samples.push_back(std::move(info));
      }
  }
  save_manifest(m, (std::filesystem::path(out_dir) / "manifest.json").string());
  return m;
}

}  // namespace p3d
