#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

enum class Part { body = 0, left_hand = 1, right_hand = 2, face = 3 };

inline const char* part_name(Part p) {
  switch (p) {
    case Part::body: return "body";
    case Part::left_hand: return "left_hand";
    case Part::right_hand: return "right_hand";
    case Part::face: return "face";
  }
  throw std::logic_error("part_name: bad enum");
}

inline Part part_from_name(const std::string& s) {
  for (Part p : {Part::body, Part::left_hand, Part::right_hand, Part::face})
    if (s == part_name(p)) return p;
  throw std::invalid_argument("unknown part name: " + s);
}

// Which joint blocks are present and how wide they are. Part order is fixed
// (body, left_hand, right_hand, face); face is the expression block, not a
// joint set.
struct PartLayout {
  std::vector<Part> parts;
  Index body_joints = 10;
  Index hand_joints = 15;
  Index expression_width = 10;

  static PartLayout full() {
    PartLayout l;
    l.parts = {Part::body, Part::left_hand, Part::right_hand, Part::face};
    return l;
  }

  static PartLayout of(std::vector<Part> selected) {
    PartLayout l = full();
    l.parts = std::move(selected);
    l.validate();
    return l;
  }

  bool has(Part p) const { return std::find(parts.begin(), parts.end(), p) != parts.end(); }

  Index joints(Part p) const {
    switch (p) {
      case Part::body: return body_joints;
      case Part::left_hand: return hand_joints;
      case Part::right_hand: return hand_joints;
      case Part::face: return 0;
    }
    throw std::logic_error("joints: bad enum");
  }

  std::vector<Part> pose_parts() const {
    std::vector<Part> out;
    for (Part p : parts)
      if (p != Part::face) out.push_back(p);
    return out;
  }

  Index joint_count() const {
    Index n = 0;
    for (Part p : pose_parts()) n += joints(p);
    return n;
  }

  Index expression_dims() const { return has(Part::face) ? expression_width : 0; }

  // joint index where a part's block starts within this layout
  Index joint_offset(Part p) const {
    Index off = 0;
    for (Part q : pose_parts()) {
      if (q == p) return off;
      off += joints(q);
    }
    throw std::invalid_argument(std::string("joint_offset: part not in layout: ") + part_name(p));
  }

  void validate() const {
    if (parts.empty()) throw std::invalid_argument("PartLayout: no parts selected");
    int last = -1;
    for (Part p : parts) {
      if (static_cast<int>(p) <= last)
        throw std::invalid_argument("PartLayout: parts must be unique and in canonical order");
      last = static_cast<int>(p);
    }
    if (pose_parts().empty())
      throw std::invalid_argument("PartLayout: needs at least one joint part");
    if (body_joints <= 0 || hand_joints <= 0 || expression_width <= 0)
      throw std::invalid_argument("PartLayout: widths must be positive");
  }
};

struct RepresentationSet {
  bool pos2d = true;
  bool pos3d = true;
  bool rot6d = true;
  bool expression = true;

  Index per_joint_width() const {
    return (pos2d ? 2 : 0) + (pos3d ? 3 : 0) + (rot6d ? 6 : 0);
  }

  void validate() const {
    if (per_joint_width() == 0)
      throw std::invalid_argument("RepresentationSet: at least one joint representation");
  }

  std::string str() const {
    std::string s;
    if (pos2d) s += "pos2d,";
    if (pos3d) s += "pos3d,";
    if (rot6d) s += "rot6d,";
    if (expression) s += "expression,";
    if (!s.empty()) s.pop_back();
    return s;
  }
};

// One frame of pose data; per-joint blocks plus the expression vector.
// Unselected representations are simply empty.
struct PoseFrame {
  std::vector<std::array<float, 2>> pos2d;
  std::vector<std::array<float, 3>> pos3d;
  std::vector<std::array<float, 6>> rot6d;
  std::vector<float> expression;
};

struct PoseSequence {
  std::string id;
  int label = -1;
  PartLayout layout = PartLayout::full();
  RepresentationSet reps;
  std::array<float, 3> root0{0, 0, 0};  // frame-0 pelvis, pre-alignment
  std::vector<PoseFrame> frames;

  Index num_frames() const { return static_cast<Index>(frames.size()); }

  void validate() const {
    layout.validate();
    reps.validate();
    if (frames.empty()) throw std::invalid_argument("PoseSequence: no frames");
    const size_t j = static_cast<size_t>(layout.joint_count());
    const size_t e = static_cast<size_t>(layout.expression_dims());
    for (const PoseFrame& f : frames) {
      if (reps.pos2d && f.pos2d.size() != j)
        throw std::invalid_argument("PoseSequence: pos2d block size mismatch");
      if (reps.pos3d && f.pos3d.size() != j)
        throw std::invalid_argument("PoseSequence: pos3d block size mismatch");
      if (reps.rot6d && f.rot6d.size() != j)
        throw std::invalid_argument("PoseSequence: rot6d block size mismatch");
      if (reps.expression && f.expression.size() != e)
        throw std::invalid_argument("PoseSequence: expression block size mismatch");
    }
  }
};

// Tight bbox over every finite 2D point across all frames, then a per-axis
// affine map onto the unit square. Non-finite points are excluded from the
// box and written out as 0.
inline void align_2d(PoseSequence& seq) {
  if (!seq.reps.pos2d) return;
  float xmin = std::numeric_limits<float>::infinity(), xmax = -xmin;
  float ymin = xmin, ymax = -xmin;
  bool any = false;
  for (const PoseFrame& f : seq.frames)
    for (const auto& p : f.pos2d) {
      if (!std::isfinite(p[0]) || !std::isfinite(p[1])) continue;
      any = true;
      xmin = std::min(xmin, p[0]);
      xmax = std::max(xmax, p[0]);
      ymin = std::min(ymin, p[1]);
      ymax = std::max(ymax, p[1]);
    }
  if (!any) throw std::domain_error("align_2d: no finite 2D keypoints");
  if (xmax - xmin <= 0 || ymax - ymin <= 0)
    throw std::domain_error("align_2d: zero-area bounding box");
  const float sx = 1.0f / (xmax - xmin), sy = 1.0f / (ymax - ymin);
  for (PoseFrame& f : seq.frames)
    for (auto& p : f.pos2d) {
      if (std::isfinite(p[0]) && std::isfinite(p[1])) {
        p[0] = (p[0] - xmin) * sx;
        p[1] = (p[1] - ymin) * sy;
      } else {
        p[0] = 0;
        p[1] = 0;
      }
    }
}

// Shift every 3D joint of every frame so the frame-0 pelvis sits at the
// origin. No scaling.
inline void align_3d_root(PoseSequence& seq) {
  if (!seq.reps.pos3d) return;
  const std::array<float, 3> r = seq.root0;
  for (PoseFrame& f : seq.frames)
    for (auto& p : f.pos3d) {
      p[0] -= r[0];
      p[1] -= r[1];
      p[2] -= r[2];
    }
}

// Flat per-frame feature vector: for each joint in part order the selected
// blocks in (pos2d, pos3d, rot6d) order, then the expression block.
// frame_layout describes how the frame's joints are laid out; layout selects
// what the model consumes.
template <class S>
std::vector<S> assemble_frame_features(const PoseFrame& frame, const RepresentationSet& reps,
                                       const PartLayout& layout, const PartLayout& frame_layout) {
  reps.validate();
  layout.validate();
  std::vector<S> out;
  out.reserve(static_cast<size_t>(layout.joint_count() * reps.per_joint_width() +
                                  (reps.expression ? layout.expression_dims() : 0)));
  for (Part p : layout.pose_parts()) {
    if (!frame_layout.has(p))
      throw std::invalid_argument(std::string("assemble_frame_features: frame lacks part ") +
                                  part_name(p));
    if (layout.joints(p) != frame_layout.joints(p))
      throw std::invalid_argument("assemble_frame_features: joint count mismatch for part");
    const Index off = frame_layout.joint_offset(p);
    for (Index j = 0; j < layout.joints(p); ++j) {
      const size_t src = static_cast<size_t>(off + j);
      if (reps.pos2d) {
        if (src >= frame.pos2d.size())
          throw std::invalid_argument("assemble_frame_features: missing pos2d block");
        out.push_back(static_cast<S>(frame.pos2d[src][0]));
        out.push_back(static_cast<S>(frame.pos2d[src][1]));
      }
      if (reps.pos3d) {
        if (src >= frame.pos3d.size())
          throw std::invalid_argument("assemble_frame_features: missing pos3d block");
        for (int k = 0; k < 3; ++k) out.push_back(static_cast<S>(frame.pos3d[src][static_cast<size_t>(k)]));
      }
      if (reps.rot6d) {
        if (src >= frame.rot6d.size())
          throw std::invalid_argument("assemble_frame_features: missing rot6d block");
        for (int k = 0; k < 6; ++k) out.push_back(static_cast<S>(frame.rot6d[src][static_cast<size_t>(k)]));
      }
    }
  }
  if (reps.expression && layout.has(Part::face)) {
    if (frame.expression.size() != static_cast<size_t>(frame_layout.expression_width) ||
        !frame_layout.has(Part::face))
      throw std::invalid_argument("assemble_frame_features: missing expression block");
    if (layout.expression_width != frame_layout.expression_width)
      throw std::invalid_argument("assemble_frame_features: expression width mismatch");
    for (float v : frame.expression) out.push_back(static_cast<S>(v));
  }
  return out;
}

template <class S>
std::vector<S> assemble_frame_features(const PoseFrame& frame, const RepresentationSet& reps,
                                       const PartLayout& layout) {
  return assemble_frame_features<S>(frame, reps, layout, layout);
}

// T frame indices: uniform random start when the video is long enough,
// cyclic repetition from frame 0 otherwise.
inline std::vector<Index> sample_train_chunk(Index num_frames, Index T, RngState& rng) {
  if (num_frames <= 0) throw std::invalid_argument("sample_train_chunk: empty sequence");
  if (T < 1) throw std::invalid_argument("sample_train_chunk: T must be >= 1");
  std::vector<Index> idx(static_cast<size_t>(T));
  if (num_frames >= T) {
    const Index start =
        static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(num_frames - T + 1)));
    for (Index t = 0; t < T; ++t) idx[static_cast<size_t>(t)] = start + t;
  } else {
    for (Index t = 0; t < T; ++t) idx[static_cast<size_t>(t)] = t % num_frames;
  }
  return idx;
}

// four deterministic chunks: starts floor(i·(len−T)/3), cyclic padding for
// short videos
inline std::array<std::vector<Index>, 4> sample_eval_chunks(Index num_frames, Index T) {
  if (num_frames <= 0) throw std::invalid_argument("sample_eval_chunks: empty sequence");
  if (T < 1) throw std::invalid_argument("sample_eval_chunks: T must be >= 1");
  std::array<std::vector<Index>, 4> chunks;
  for (int i = 0; i < 4; ++i) {
    const Index start = num_frames > T ? (static_cast<Index>(i) * (num_frames - T)) / 3 : 0;
    auto& c = chunks[static_cast<size_t>(i)];
    c.resize(static_cast<size_t>(T));
    for (Index t = 0; t < T; ++t) c[static_cast<size_t>(t)] = (start + t) % num_frames;
  }
  return chunks;
}

}  // namespace p3d
