#pragma once

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "p3d/pose.hpp"
#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

enum class Composition { pet_wet, pet_pet, wet_wet, mlp_wet, mlp_pet };
enum class Ensemble { early, middle, late };
enum class BlockKind { pet, wet, mlp };

inline const char* composition_name(Composition c) {
  switch (c) {
    case Composition::pet_wet: return "PET-WET";
    case Composition::pet_pet: return "PET-PET";
    case Composition::wet_wet: return "WET-WET";
    case Composition::mlp_wet: return "MLP-WET";
    case Composition::mlp_pet: return "MLP-PET";
  }
  throw std::logic_error("composition_name: bad enum");
}

inline Composition composition_from_name(const std::string& s) {
  for (Composition c : {Composition::pet_wet, Composition::pet_pet, Composition::wet_wet,
                        Composition::mlp_wet, Composition::mlp_pet})
    if (s == composition_name(c)) return c;
  throw std::invalid_argument("unknown block composition: " + s);
}

inline const char* ensemble_name(Ensemble e) {
  switch (e) {
    case Ensemble::early: return "early";
    case Ensemble::middle: return "middle";
    case Ensemble::late: return "late";
  }
  throw std::logic_error("ensemble_name: bad enum");
}

inline Ensemble ensemble_from_name(const std::string& s) {
  for (Ensemble e : {Ensemble::early, Ensemble::middle, Ensemble::late})
    if (s == ensemble_name(e)) return e;
  throw std::invalid_argument("unknown ensemble mode: " + s);
}

struct PartSlice {
  Part part;
  Index offset;
  Index width;
};

struct ModelConfig {
  Index frames = 32;  // T
  PartLayout layout = PartLayout::full();
  RepresentationSet reps;
  Index joint_dim = 8;        // D
  Index expr_multiplier = 10;  // alpha
  Index pairs = 3;             // N
  Index heads = 4;
  Index ffn_dim = 256;
  double dropout = 0.3;
  Composition composition = Composition::pet_wet;
  Ensemble ensemble = Ensemble::early;
  Index num_classes = 100;  // C
  bool positional_encoding = true;
  bool pre_norm = false;

  Index joint_count() const { return layout.joint_count(); }

  Index pose_rep_count() const {
    return (reps.pos2d ? 1 : 0) + (reps.pos3d ? 1 : 0) + (reps.rot6d ? 1 : 0);
  }

  // per-frame input width J*F (+ expression block)
  Index input_width() const {
    return joint_count() * reps.per_joint_width() +
           (reps.expression ? layout.expression_dims() : 0);
  }

  Index model_width() const {
    return joint_count() * joint_dim +
           (layout.has(Part::face) ? expr_multiplier * joint_dim : 0);
  }

  // contiguous per-part channel ranges within model_width, in part order
  std::vector<PartSlice> part_slices() const {
    std::vector<PartSlice> out;
    Index off = 0;
    for (Part p : layout.pose_parts()) {
      const Index w = layout.joints(p) * joint_dim;
      out.push_back({p, off, w});
      off += w;
    }
    if (layout.has(Part::face)) out.push_back({Part::face, off, expr_multiplier * joint_dim});
    return out;
  }

  void validate() const {
    layout.validate();
    reps.validate();
    if (reps.expression != layout.has(Part::face))
      throw std::invalid_argument(
          "ModelConfig: expression representation and face part must be enabled together");
    if (frames < 1) throw std::invalid_argument("ModelConfig: frames >= 1");
    if (joint_dim < 1) throw std::invalid_argument("ModelConfig: joint_dim >= 1");
    if (expr_multiplier < 1) throw std::invalid_argument("ModelConfig: expr_multiplier >= 1");
    if (pairs < 1) throw std::invalid_argument("ModelConfig: pairs >= 1");
    if (heads < 1) throw std::invalid_argument("ModelConfig: heads >= 1");
    if (ffn_dim < 1) throw std::invalid_argument("ModelConfig: ffn_dim >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout in [0,1)");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes >= 2");
    for (const PartSlice& s : part_slices())
      if (s.width % heads != 0)
        throw std::invalid_argument(std::string("ModelConfig: ") + part_name(s.part) +
                                    " slice width " + std::to_string(s.width) +
                                    " not divisible by heads " + std::to_string(heads));
    if (ensemble != Ensemble::early && pose_rep_count() < 2)
      throw std::invalid_argument(
          "ModelConfig: middle/late ensembles need at least two joint representations");
  }
};

// Middle/late ensembles run one stream per selected joint representation.
// Streams carry only their own representation over the joint parts (no
// expression block), which reproduces the reference cost ratios between the
// ensembles.
inline std::vector<ModelConfig> stream_configs(const ModelConfig& cfg) {
  cfg.validate();
  if (cfg.ensemble == Ensemble::early) return {cfg};
  std::vector<ModelConfig> out;
  for (int r = 0; r < 3; ++r) {
    const bool selected = r == 0 ? cfg.reps.pos2d : r == 1 ? cfg.reps.pos3d : cfg.reps.rot6d;
    if (!selected) continue;
    ModelConfig s = cfg;
    s.ensemble = Ensemble::early;  // a stream is structurally a single-stream model
    s.reps.pos2d = r == 0;
    s.reps.pos3d = r == 1;
    s.reps.rot6d = r == 2;
    s.reps.expression = false;
    s.layout = cfg.layout;
    s.layout.parts = cfg.layout.pose_parts();
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

// ---- parameter containers ----

template <class S>
struct EncoderLayerParams {
  AttentionWeights<S> attn;
  Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <class S>
struct MlpBlockParams {
  Tensor<S> w1, b1, bn_g, bn_b, w2, b2;
  BatchNormState<S> bn;
};

template <class S>
struct BlockParams {
  BlockKind kind = BlockKind::wet;
  std::vector<EncoderLayerParams<S>> enc;  // one per part for PET, exactly one for WET
  MlpBlockParams<S> mlp;
};

template <class S>
struct JointEmbed {
  Tensor<S> w, b;
};

template <class S>
struct HeadParams {
  Tensor<S> bn_g, bn_b;
  BatchNormState<S> bn;
  Tensor<S> fc_w, fc_b;
};

template <class S>
struct StreamParams {
  ModelConfig cfg;
  std::vector<JointEmbed<S>> joints;
  JointEmbed<S> expr;  // only when the face part is present
  Tensor<S> pe;        // [T, d_model] buffer, not trained
  std::vector<std::pair<BlockParams<S>, BlockParams<S>>> blocks;
};

template <class S>
struct NamedBuffer {
  std::string name;
  std::vector<S>* data;
};

template <class S>
struct P3DModel {
  ModelConfig cfg;
  std::vector<StreamParams<S>> streams;
  std::vector<HeadParams<S>> heads;

  std::vector<Parameter<S>> parameters();
  std::vector<NamedBuffer<S>> buffers();
  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

// ---- construction ----

namespace detail {

template <class S>
Tensor<S> init_linear_weight(Index fan_in, Index fan_out, RngState& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<S> v(static_cast<size_t>(fan_in * fan_out));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>::from_data({fan_in, fan_out}, std::move(v), true);
}

template <class S>
EncoderLayerParams<S> build_encoder_layer(Index d, Index ffn, RngState& rng) {
  EncoderLayerParams<S> p;
  p.attn.wq = init_linear_weight<S>(d, d, rng);
  p.attn.bq = Tensor<S>::zeros({d}, true);
  p.attn.wk = init_linear_weight<S>(d, d, rng);
  p.attn.bk = Tensor<S>::zeros({d}, true);
  p.attn.wv = init_linear_weight<S>(d, d, rng);
  p.attn.bv = Tensor<S>::zeros({d}, true);
  p.attn.wo = init_linear_weight<S>(d, d, rng);
  p.attn.bo = Tensor<S>::zeros({d}, true);
  p.ln1_g = Tensor<S>::filled({d}, S(1), true);
  p.ln1_b = Tensor<S>::zeros({d}, true);
  p.ln2_g = Tensor<S>::filled({d}, S(1), true);
  p.ln2_b = Tensor<S>::zeros({d}, true);
  p.ffn_w1 = init_linear_weight<S>(d, ffn, rng);
  p.ffn_b1 = Tensor<S>::zeros({ffn}, true);
  p.ffn_w2 = init_linear_weight<S>(ffn, d, rng);
  p.ffn_b2 = Tensor<S>::zeros({d}, true);
  return p;
}

template <class S>
BlockParams<S> build_block(BlockKind kind, const ModelConfig& scfg, RngState& rng) {
  BlockParams<S> b;
  b.kind = kind;
  const Index d = scfg.model_width();
  switch (kind) {
    case BlockKind::pet:
      for (const PartSlice& s : scfg.part_slices())
        b.enc.push_back(build_encoder_layer<S>(s.width, scfg.ffn_dim, rng));
      break;
    case BlockKind::wet:
      b.enc.push_back(build_encoder_layer<S>(d, scfg.ffn_dim, rng));
      break;
    case BlockKind::mlp:
      b.mlp.w1 = init_linear_weight<S>(d, scfg.ffn_dim, rng);
      b.mlp.b1 = Tensor<S>::zeros({scfg.ffn_dim}, true);
      b.mlp.bn_g = Tensor<S>::filled({scfg.ffn_dim}, S(1), true);
      b.mlp.bn_b = Tensor<S>::zeros({scfg.ffn_dim}, true);
      b.mlp.bn = BatchNormState<S>(scfg.ffn_dim);
      b.mlp.w2 = init_linear_weight<S>(scfg.ffn_dim, d, rng);
      b.mlp.b2 = Tensor<S>::zeros({d}, true);
      break;
  }
  return b;
}

inline std::pair<BlockKind, BlockKind> block_kinds(Composition c) {
  switch (c) {
    case Composition::pet_wet: return {BlockKind::pet, BlockKind::wet};
    case Composition::pet_pet: return {BlockKind::pet, BlockKind::pet};
    case Composition::wet_wet: return {BlockKind::wet, BlockKind::wet};
    case Composition::mlp_wet: return {BlockKind::mlp, BlockKind::wet};
    case Composition::mlp_pet: return {BlockKind::mlp, BlockKind::pet};
  }
  throw std::logic_error("block_kinds: bad enum");
}

// Vaswani sin/cos interleaving over the time index; row 0 is (0,1,0,1,...)
template <class S>
Tensor<S> positional_table(Index T, Index d) {
  std::vector<S> v(static_cast<size_t>(T * d));
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < d; ++j) {
      const double exponent = 2.0 * static_cast<double>(j / 2) / static_cast<double>(d);
      const double omega = std::pow(10000.0, -exponent);
      const double arg = static_cast<double>(t) * omega;
      v[static_cast<size_t>(t * d + j)] =
          static_cast<S>((j % 2 == 0) ? std::sin(arg) : std::cos(arg));
    }
  return Tensor<S>::from_data({T, d}, std::move(v), false);
}

template <class S>
StreamParams<S> build_stream(const ModelConfig& scfg, RngState& rng) {
  StreamParams<S> st;
  st.cfg = scfg;
  const Index f = scfg.reps.per_joint_width();
  for (Index j = 0; j < scfg.joint_count(); ++j) {
    JointEmbed<S> e;
    e.w = init_linear_weight<S>(f, scfg.joint_dim, rng);
    e.b = Tensor<S>::zeros({scfg.joint_dim}, true);
    st.joints.push_back(std::move(e));
  }
  if (scfg.layout.has(Part::face)) {
    st.expr.w = init_linear_weight<S>(scfg.layout.expression_width,
                                      scfg.expr_multiplier * scfg.joint_dim, rng);
    st.expr.b = Tensor<S>::zeros({scfg.expr_multiplier * scfg.joint_dim}, true);
  }
  st.pe = positional_table<S>(scfg.frames, scfg.model_width());
  const auto kinds = block_kinds(scfg.composition);
  for (Index n = 0; n < scfg.pairs; ++n)
    st.blocks.emplace_back(build_block<S>(kinds.first, scfg, rng),
                           build_block<S>(kinds.second, scfg, rng));
  return st;
}

template <class S>
HeadParams<S> build_head(const ModelConfig& scfg, RngState& rng) {
  HeadParams<S> h;
  const Index d = scfg.model_width();
  h.bn_g = Tensor<S>::filled({d}, S(1), true);
  h.bn_b = Tensor<S>::zeros({d}, true);
  h.bn = BatchNormState<S>(d);
  h.fc_w = init_linear_weight<S>(d, scfg.num_classes, rng);
  h.fc_b = Tensor<S>::zeros({scfg.num_classes}, true);
  return h;
}

}  // namespace detail

template <class S>
P3DModel<S> build_model(const ModelConfig& cfg, RngState rng) {
  cfg.validate();
  P3DModel<S> m;
  m.cfg = cfg;
  RngState init = rng.split("model-init");
  const std::vector<ModelConfig> scfgs = stream_configs(cfg);
  for (const ModelConfig& scfg : scfgs) m.streams.push_back(detail::build_stream<S>(scfg, init));
  if (cfg.ensemble == Ensemble::late) {
    for (const ModelConfig& scfg : scfgs) m.heads.push_back(detail::build_head<S>(scfg, init));
  } else {
    // the middle ensemble averages stream features; widths agree by
    // construction, so one head over the first stream's width serves all
    m.heads.push_back(detail::build_head<S>(scfgs[0], init));
  }
  return m;
}

// ---- parameter enumeration (canonical order and names) ----

namespace detail {

template <class S>
void collect_encoder(const std::string& prefix, EncoderLayerParams<S>& e,
                     std::vector<Parameter<S>>& out) {
  out.push_back({prefix + ".attn.wq", e.attn.wq, false});
  out.push_back({prefix + ".attn.bq", e.attn.bq, true});
  out.push_back({prefix + ".attn.wk", e.attn.wk, false});
  out.push_back({prefix + ".attn.bk", e.attn.bk, true});
  out.push_back({prefix + ".attn.wv", e.attn.wv, false});
  out.push_back({prefix + ".attn.bv", e.attn.bv, true});
  out.push_back({prefix + ".attn.wo", e.attn.wo, false});
  out.push_back({prefix + ".attn.bo", e.attn.bo, true});
  out.push_back({prefix + ".ln1.g", e.ln1_g, true});
  out.push_back({prefix + ".ln1.b", e.ln1_b, true});
  out.push_back({prefix + ".ln2.g", e.ln2_g, true});
  out.push_back({prefix + ".ln2.b", e.ln2_b, true});
  out.push_back({prefix + ".ffn.w1", e.ffn_w1, false});
  out.push_back({prefix + ".ffn.b1", e.ffn_b1, true});
  out.push_back({prefix + ".ffn.w2", e.ffn_w2, false});
  out.push_back({prefix + ".ffn.b2", e.ffn_b2, true});
}

template <class S>
void collect_block(const std::string& prefix, BlockParams<S>& b, const ModelConfig& scfg,
                   std::vector<Parameter<S>>& out) {
  switch (b.kind) {
    case BlockKind::pet: {
      const auto slices = scfg.part_slices();
      for (size_t i = 0; i < slices.size(); ++i)
        collect_encoder(prefix + ".pet." + part_name(slices[i].part), b.enc[i], out);
      break;
    }
    case BlockKind::wet:
      collect_encoder(prefix + ".wet", b.enc[0], out);
      break;
    case BlockKind::mlp:
      out.push_back({prefix + ".mlp.w1", b.mlp.w1, false});
      out.push_back({prefix + ".mlp.b1", b.mlp.b1, true});
      out.push_back({prefix + ".mlp.bn.g", b.mlp.bn_g, true});
      out.push_back({prefix + ".mlp.bn.b", b.mlp.bn_b, true});
      out.push_back({prefix + ".mlp.w2", b.mlp.w2, false});
      out.push_back({prefix + ".mlp.b2", b.mlp.b2, true});
      break;
  }
}

}  // namespace detail

template <class S>
std::vector<Parameter<S>> P3DModel<S>::parameters() {
  std::vector<Parameter<S>> out;
  const bool multi = streams.size() > 1;
  for (size_t si = 0; si < streams.size(); ++si) {
    StreamParams<S>& st = streams[si];
    const std::string sp = multi ? "stream" + std::to_string(si) + "." : "";
    for (size_t j = 0; j < st.joints.size(); ++j) {
      char name[32];
      std::snprintf(name, sizeof(name), "embed.joint%03zu", j);
      out.push_back({sp + name + std::string(".w"), st.joints[j].w, false});
      out.push_back({sp + name + std::string(".b"), st.joints[j].b, true});
    }
    if (st.cfg.layout.has(Part::face)) {
      out.push_back({sp + "embed.expr.w", st.expr.w, false});
      out.push_back({sp + "embed.expr.b", st.expr.b, true});
    }
    for (size_t n = 0; n < st.blocks.size(); ++n) {
      const std::string bp = sp + "pair" + std::to_string(n);
      detail::collect_block(bp + ".first", st.blocks[n].first, st.cfg, out);
      detail::collect_block(bp + ".second", st.blocks[n].second, st.cfg, out);
    }
  }
  const bool multi_head = heads.size() > 1;
  for (size_t hi = 0; hi < heads.size(); ++hi) {
    const std::string hp = multi_head ? "head" + std::to_string(hi) : "head";
    out.push_back({hp + ".bn.g", heads[hi].bn_g, true});
    out.push_back({hp + ".bn.b", heads[hi].bn_b, true});
    out.push_back({hp + ".fc.w", heads[hi].fc_w, false});
    out.push_back({hp + ".fc.b", heads[hi].fc_b, true});
  }
  return out;
}

template <class S>
std::vector<NamedBuffer<S>> P3DModel<S>::buffers() {
  std::vector<NamedBuffer<S>> out;
  const bool multi = streams.size() > 1;
  for (size_t si = 0; si < streams.size(); ++si) {
    StreamParams<S>& st = streams[si];
    const std::string sp = multi ? "stream" + std::to_string(si) + "." : "";
    for (size_t n = 0; n < st.blocks.size(); ++n)
      for (const char* which : {"first", "second"}) {
        BlockParams<S>& b =
            std::string(which) == "first" ? st.blocks[n].first : st.blocks[n].second;
        if (b.kind == BlockKind::mlp) {
          const std::string bp = sp + "pair" + std::to_string(n) + "." + which + ".mlp.bn";
          out.push_back({bp + ".running_mean", &b.mlp.bn.running_mean});
          out.push_back({bp + ".running_var", &b.mlp.bn.running_var});
        }
      }
  }
  const bool multi_head = heads.size() > 1;
  for (size_t hi = 0; hi < heads.size(); ++hi) {
    const std::string hp = multi_head ? "head" + std::to_string(hi) : "head";
    out.push_back({hp + ".bn.running_mean", &heads[hi].bn.running_mean});
    out.push_back({hp + ".bn.running_var", &heads[hi].bn.running_var});
  }
  return out;
}

// ---- forward ----

struct ForwardMode {
  bool training = false;
  bool update_batchnorm = true;
};

// x: [B, T, J*F (+E)] -> [B, T, d_model]; per-joint linears, expression
// linear, concatenation in part order, plus the positional table
template <class S>
Tensor<S> embed_frames(StreamParams<S>& st, const Tensor<S>& x) {
  const ModelConfig& cfg = st.cfg;
  if (x.ndim() != 3 || x.dim(2) != cfg.input_width())
    throw std::invalid_argument("embed_frames: input width " +
                                std::to_string(x.ndim() == 3 ? x.dim(2) : -1) + " expected " +
                                std::to_string(cfg.input_width()));
  const Index f = cfg.reps.per_joint_width();
  std::vector<Tensor<S>> parts;
  for (Index j = 0; j < cfg.joint_count(); ++j) {
    Tensor<S> xj = slice_lastdim(x, j * f, f);
    parts.push_back(bias_add(matmul(xj, st.joints[static_cast<size_t>(j)].w),
                             st.joints[static_cast<size_t>(j)].b));
  }
  if (cfg.layout.has(Part::face)) {
    Tensor<S> xe = slice_lastdim(x, cfg.joint_count() * f, cfg.layout.expression_width);
    parts.push_back(bias_add(matmul(xe, st.expr.w), st.expr.b));
  }
  Tensor<S> out = concat_lastdim(parts);
  if (cfg.positional_encoding) out = add_time_table(out, st.pe);
  return out;
}

// one encoder layer over time; post-norm by default
template <class S>
Tensor<S> transformer_layer_forward(EncoderLayerParams<S>& p, const Tensor<S>& x,
                                    const ModelConfig& cfg, const ForwardMode& mode,
                                    RngState& rng) {
  const double dp = cfg.dropout;
  auto ffn = [&](const Tensor<S>& u) {
    Tensor<S> h = bias_add(matmul(u, p.ffn_w1), p.ffn_b1);
    h = gelu(h);
    h = dropout(h, dp, mode.training, rng);
    h = bias_add(matmul(h, p.ffn_w2), p.ffn_b2);
    return h;
  };
  if (cfg.pre_norm) {
    Tensor<S> a = multi_head_self_attention(layer_norm(x, p.ln1_g, p.ln1_b), p.attn,
                                            static_cast<int>(cfg.heads), dp, mode.training, rng);
    Tensor<S> u = add(x, dropout(a, dp, mode.training, rng));
    Tensor<S> f = ffn(layer_norm(u, p.ln2_g, p.ln2_b));
    return add(u, dropout(f, dp, mode.training, rng));
  }
  Tensor<S> a =
      multi_head_self_attention(x, p.attn, static_cast<int>(cfg.heads), dp, mode.training, rng);
  Tensor<S> u = layer_norm(add(x, dropout(a, dp, mode.training, rng)), p.ln1_g, p.ln1_b);
  Tensor<S> f = ffn(u);
  return layer_norm(add(u, dropout(f, dp, mode.training, rng)), p.ln2_g, p.ln2_b);
}

// slice per part, dedicated encoder layer per slice, concatenate back
template <class S>
Tensor<S> pet_forward(BlockParams<S>& b, const Tensor<S>& x, const ModelConfig& cfg,
                      const ForwardMode& mode, RngState& rng) {
  if (b.kind != BlockKind::pet) throw std::logic_error("pet_forward: wrong block kind");
  const auto slices = cfg.part_slices();
  if (b.enc.size() != slices.size()) throw std::invalid_argument("pet_forward: slice mismatch");
  std::vector<Tensor<S>> outs;
  for (size_t i = 0; i < slices.size(); ++i) {
    Tensor<S> xi = slice_lastdim(x, slices[i].offset, slices[i].width);
    outs.push_back(transformer_layer_forward(b.enc[i], xi, cfg, mode, rng));
  }
  return concat_lastdim(outs);
}

// one encoder layer over all channels jointly
template <class S>
Tensor<S> wet_forward(BlockParams<S>& b, const Tensor<S>& x, const ModelConfig& cfg,
                      const ForwardMode& mode, RngState& rng) {
  if (b.kind != BlockKind::wet) throw std::logic_error("wet_forward: wrong block kind");
  return transformer_layer_forward(b.enc[0], x, cfg, mode, rng);
}

// FC -> batchnorm over the batch-of-frames axis -> GELU -> dropout -> FC
template <class S>
Tensor<S> mlp_block_forward(BlockParams<S>& b, const Tensor<S>& x, const ModelConfig& cfg,
                            const ForwardMode& mode, RngState& rng) {
  if (b.kind != BlockKind::mlp) throw std::logic_error("mlp_block_forward: wrong block kind");
  Tensor<S> h = bias_add(matmul(x, b.mlp.w1), b.mlp.b1);
  h = batch_norm(h, b.mlp.bn_g, b.mlp.bn_b, b.mlp.bn, mode.training, mode.update_batchnorm);
  h = gelu(h);
  h = dropout(h, cfg.dropout, mode.training, rng);
  return bias_add(matmul(h, b.mlp.w2), b.mlp.b2);
}

template <class S>
Tensor<S> block_forward(BlockParams<S>& b, const Tensor<S>& x, const ModelConfig& cfg,
                        const ForwardMode& mode, RngState& rng) {
  switch (b.kind) {
    case BlockKind::pet: return pet_forward(b, x, cfg, mode, rng);
    case BlockKind::wet: return wet_forward(b, x, cfg, mode, rng);
    case BlockKind::mlp: return mlp_block_forward(b, x, cfg, mode, rng);
  }
  throw std::logic_error("block_forward: bad kind");
}

// embeddings plus the 2N alternating blocks for one stream
template <class S>
Tensor<S> stream_forward(StreamParams<S>& st, const Tensor<S>& x, const ForwardMode& mode,
                         RngState& rng) {
  Tensor<S> h = embed_frames(st, x);
  for (auto& pair : st.blocks) {
    h = block_forward(pair.first, h, st.cfg, mode, rng);
    h = block_forward(pair.second, h, st.cfg, mode, rng);
  }
  return h;
}

template <class S>
struct HeadOutput {
  Tensor<S> logits;
  Tensor<S> probs;
};

// time-mean -> batchnorm -> FC -> softmax
template <class S>
HeadOutput<S> head_forward(HeadParams<S>& h, const Tensor<S>& x, const ForwardMode& mode) {
  Tensor<S> feat = time_mean(x);
  feat = batch_norm(feat, h.bn_g, h.bn_b, h.bn, mode.training, mode.update_batchnorm);
  HeadOutput<S> out;
  out.logits = bias_add(matmul(feat, h.fc_w), h.fc_b);
  out.probs = softmax(out.logits, -1);
  return out;
}

template <class S>
struct ForwardOutput {
  Tensor<S> probs;                       // [B, C], the model prediction
  Tensor<S> logits;                      // [B, C] for early/middle; undefined for late
  std::vector<Tensor<S>> stream_logits;  // late: one per stream
};

// stream_inputs: early -> one tensor [B,T,input_width]; middle/late -> one
// tensor per selected representation, in (pos2d, pos3d, rot6d) order
template <class S>
ForwardOutput<S> model_forward(P3DModel<S>& model, const std::vector<Tensor<S>>& stream_inputs,
                               const ForwardMode& mode, RngState& rng) {
  if (stream_inputs.size() != model.streams.size())
    throw std::invalid_argument("model_forward: expected " +
                                std::to_string(model.streams.size()) + " input streams, got " +
                                std::to_string(stream_inputs.size()));
  ForwardOutput<S> out;
  switch (model.cfg.ensemble) {
    case Ensemble::early: {
      Tensor<S> h = stream_forward(model.streams[0], stream_inputs[0], mode, rng);
      HeadOutput<S> ho = head_forward(model.heads[0], h, mode);
      out.logits = ho.logits;
      out.probs = ho.probs;
      break;
    }
    case Ensemble::middle: {
      Tensor<S> acc;
      for (size_t i = 0; i < model.streams.size(); ++i) {
        Tensor<S> h = stream_forward(model.streams[i], stream_inputs[i], mode, rng);
        acc = i == 0 ? h : add(acc, h);
      }
      acc = scale(acc, S(1) / static_cast<S>(model.streams.size()));
      HeadOutput<S> ho = head_forward(model.heads[0], acc, mode);
      out.logits = ho.logits;
      out.probs = ho.probs;
      break;
    }
    case Ensemble::late: {
      Tensor<S> acc;
      for (size_t i = 0; i < model.streams.size(); ++i) {
        Tensor<S> h = stream_forward(model.streams[i], stream_inputs[i], mode, rng);
        HeadOutput<S> ho = head_forward(model.heads[i], h, mode);
        out.stream_logits.push_back(ho.logits);
        acc = i == 0 ? ho.probs : add(acc, ho.probs);
      }
      out.probs = scale(acc, S(1) / static_cast<S>(model.streams.size()));
      break;
    }
  }
  return out;
}

}  // namespace p3d
