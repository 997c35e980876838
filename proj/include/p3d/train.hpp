#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "p3d/data.hpp"
#include "p3d/model.hpp"
#include "p3d/pose.hpp"
#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

// ---- optimizer ----

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-3;  // coupled L2: folded into the gradient
  bool decay_norm_and_bias = true;

  void validate() const {
    if (lr < 0) throw std::invalid_argument("AdamConfig: lr >= 0");
    if (beta1 < 0 || beta1 >= 1) throw std::invalid_argument("AdamConfig: beta1 in [0,1)");
    if (beta2 < 0 || beta2 >= 1) throw std::invalid_argument("AdamConfig: beta2 in [0,1)");
    if (eps <= 0) throw std::invalid_argument("AdamConfig: eps > 0");
    if (weight_decay < 0) throw std::invalid_argument("AdamConfig: weight_decay >= 0");
  }
};

template <class S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return t_; }

  // one update over the enumerated parameters; aborts on non-finite grads
  void step(std::vector<Parameter<S>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(static_cast<size_t>(p.tensor.numel()), S(0));
        v_.emplace_back(static_cast<size_t>(p.tensor.numel()), S(0));
      }
    } else if (m_.size() != params.size()) {
      throw std::invalid_argument("Adam: parameter count changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = params[i];
      auto grads = p.tensor.grad();
      auto vals = p.tensor.values_mut();
      if (grads.size() != vals.size())
        throw std::invalid_argument("Adam: no gradient for " + p.name + "; run backward first");
      if (m_[i].size() != vals.size())
        throw std::invalid_argument("Adam: parameter shape changed between steps");
      const bool decay = cfg_.weight_decay > 0 && (cfg_.decay_norm_and_bias || !p.norm_or_bias);
      for (size_t k = 0; k < vals.size(); ++k) {
        double g = static_cast<double>(grads[k]);
        if (!std::isfinite(g))
          throw std::runtime_error("Adam: non-finite gradient in " + p.name);
        if (decay) g += cfg_.weight_decay * static_cast<double>(vals[k]);
        const double m = cfg_.beta1 * static_cast<double>(m_[i][k]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(v_[i][k]) + (1.0 - cfg_.beta2) * g * g;
        m_[i][k] = static_cast<S>(m);
        v_[i][k] = static_cast<S>(v);
        const double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        vals[k] = static_cast<S>(static_cast<double>(vals[k]) - update);
      }
    }
  }

  // checkpoint access
  std::vector<std::vector<S>>& moments_m() { return m_; }
  std::vector<std::vector<S>>& moments_v() { return v_; }
  const std::vector<std::vector<S>>& moments_m() const { return m_; }
  const std::vector<std::vector<S>>& moments_v() const { return v_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

// ---- batch assembly ----

// one tensor per stream: [B, T, input_width], frames picked by the chunk
// index lists (one list of length T per sample)
template <class S>
std::vector<Tensor<S>> assemble_chunk_batch(const std::vector<ModelConfig>& stream_cfgs,
                                            const std::vector<const PoseSequence*>& seqs,
                                            const std::vector<std::vector<Index>>& chunks) {
  if (seqs.empty()) throw std::invalid_argument("assemble_chunk_batch: empty batch");
  if (seqs.size() != chunks.size())
    throw std::invalid_argument("assemble_chunk_batch: one chunk per sequence required");
  const Index B = static_cast<Index>(seqs.size());
  std::vector<Tensor<S>> out;
  for (const ModelConfig& scfg : stream_cfgs) {
    const Index T = scfg.frames;
    const Index W = scfg.input_width();
    std::vector<S> buf(static_cast<size_t>(B * T * W));
    for (Index b = 0; b < B; ++b) {
      const PoseSequence& seq = *seqs[static_cast<size_t>(b)];
      const auto& chunk = chunks[static_cast<size_t>(b)];
      if (static_cast<Index>(chunk.size()) != T)
        throw std::invalid_argument("assemble_chunk_batch: chunk length must equal frame count");
      for (Index t = 0; t < T; ++t) {
        const Index fi = chunk[static_cast<size_t>(t)];
        if (fi < 0 || fi >= seq.num_frames())
          throw std::invalid_argument("assemble_chunk_batch: frame index out of range");
        const std::vector<S> feats = assemble_frame_features<S>(
            seq.frames[static_cast<size_t>(fi)], scfg.reps, scfg.layout, seq.layout);
        if (static_cast<Index>(feats.size()) != W)
          throw std::invalid_argument("assemble_chunk_batch: feature width mismatch");
        std::memcpy(buf.data() + (b * T + t) * W, feats.data(), sizeof(S) * feats.size());
      }
    }
    out.push_back(Tensor<S>::from_data({B, T, W}, std::move(buf), false));
  }
  return out;
}

// ---- training loop ----

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decay_norm_and_bias = true;
  Index batch_size = 512;
  Index epochs = 500;
  std::uint64_t seed = 0;

  AdamConfig adam() const {
    AdamConfig a;
    a.lr = lr;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = eps;
    a.weight_decay = weight_decay;
    a.decay_norm_and_bias = decay_norm_and_bias;
    return a;
  }

  void validate() const {
    adam().validate();
    // batch statistics in the norms need at least two rows
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size >= 2");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs >= 1");
  }
};

struct EpochStats {
  Index epoch = 0;
  double mean_loss = 0;
  double train_top1 = 0;
  Index batches = 0;
  Index samples = 0;
};

namespace detail {

template <class S>
Index argmax_row(std::span<const S> vals, Index row, Index width) {
  Index best = 0;
  S best_v = vals[static_cast<size_t>(row * width)];
  for (Index c = 1; c < width; ++c) {
    const S v = vals[static_cast<size_t>(row * width + c)];
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

}  // namespace detail

// loss for one forward result: plain cross-entropy for a single set of
// logits, mean of the per-stream cross-entropies for the late ensemble
template <class S>
Tensor<S> training_loss(const ForwardOutput<S>& out, const std::vector<int>& labels,
                        Ensemble ensemble) {
  if (ensemble != Ensemble::late) return cross_entropy_with_logits(out.logits, labels);
  Tensor<S> total;
  for (size_t s = 0; s < out.stream_logits.size(); ++s) {
    Tensor<S> ls = cross_entropy_with_logits(out.stream_logits[s], labels);
    total = s == 0 ? ls : add(total, ls);
  }
  return scale(total, S(1) / static_cast<S>(out.stream_logits.size()));
}

// One pass over the shuffled train split. All randomness (shuffle order,
// chunk starts, dropout masks) derives from (seed, epoch), so any epoch is
// reproducible in isolation and training can resume bit-exactly.
template <class S>
EpochStats run_train_epoch(P3DModel<S>& model, Adam<S>& opt, const Dataset& data,
                           const TrainConfig& cfg, Index epoch) {
  cfg.validate();
  std::vector<const SampleInfo*> order = data.split("train");
  if (order.size() < 2) throw std::invalid_argument("run_train_epoch: need >= 2 train samples");
  if (data.num_classes() != model.cfg.num_classes)
    throw std::invalid_argument("run_train_epoch: dataset classes do not match the model");

  RngState epoch_rng = RngState(cfg.seed).split("epoch").split(static_cast<std::uint64_t>(epoch));
  RngState shuffle_rng = epoch_rng.split("shuffle");
  RngState chunk_rng = epoch_rng.split("chunks");
  RngState dropout_rng = epoch_rng.split("dropout");

  for (size_t i = order.size() - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }

  std::vector<ModelConfig> scfgs;
  for (const auto& st : model.streams) scfgs.push_back(st.cfg);
  auto params = model.parameters();

  EpochStats stats;
  stats.epoch = epoch;
  double loss_sum = 0;
  Index hits = 0;
  ForwardMode mode;
  mode.training = true;

  for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
    const size_t bsz = std::min(static_cast<size_t>(cfg.batch_size), order.size() - off);
    if (bsz < 2) continue;  // a trailing single sample cannot feed batch norms
    std::vector<const PoseSequence*> seqs;
    std::vector<std::vector<Index>> chunks;
    std::vector<int> labels;
    for (size_t b = 0; b < bsz; ++b) {
      const SampleInfo& info = *order[off + b];
      const PoseSequence& seq = data.sequence(info);
      seqs.push_back(&seq);
      chunks.push_back(sample_train_chunk(seq.num_frames(), model.cfg.frames, chunk_rng));
      labels.push_back(info.label);
    }
    auto inputs = assemble_chunk_batch<S>(scfgs, seqs, chunks);

    model.zero_grad();
    auto out = model_forward(model, inputs, mode, dropout_rng);
    Tensor<S> loss = training_loss(out, labels, model.cfg.ensemble);
    loss.backward();
    opt.step(params);

    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(bsz);
    auto probs = out.probs.values();
    for (size_t b = 0; b < bsz; ++b)
      if (detail::argmax_row<S>(probs, static_cast<Index>(b), model.cfg.num_classes) == labels[b])
        ++hits;
    stats.batches += 1;
    stats.samples += static_cast<Index>(bsz);
  }
  if (stats.samples == 0) throw std::invalid_argument("run_train_epoch: no usable batches");
  stats.mean_loss = loss_sum / static_cast<double>(stats.samples);
  stats.train_top1 = static_cast<double>(hits) / static_cast<double>(stats.samples);
  return stats;
}

template <class S>
std::vector<EpochStats> train_model(
    P3DModel<S>& model, Adam<S>& opt, const Dataset& data, const TrainConfig& cfg,
    Index start_epoch = 0, const std::function<void(const EpochStats&)>& on_epoch = nullptr,
    const std::function<bool(const EpochStats&)>& should_stop = nullptr) {
  cfg.validate();
  std::vector<EpochStats> history;
  for (Index epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    EpochStats stats = run_train_epoch(model, opt, data, cfg, epoch);
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (should_stop && should_stop(stats)) break;
  }
  return history;
}

// ---- checkpointing ----
//
// "P3DC" | u32 version | u32 scalar kind (0 = f32, 1 = f64)
// u64 train seed | u64 next epoch
// u32 tensor count, then per tensor:
//   u32 name length, name bytes, u32 ndim, u64 dims..., payload scalars
// u8 optimizer flag; when set: u64 step count, u32 entry count, then per
//   entry: name record, u64 numel, first-moment payload, second-moment payload

inline constexpr char kCheckpointMagic[4] = {'P', '3', 'D', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class S>
void write_scalar(std::ostream& os, S v);
template <>
inline void write_scalar<float>(std::ostream& os, float v) {
  write_f32(os, v);
}
template <>
inline void write_scalar<double>(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(os, bits);
}

template <class S>
S read_scalar(std::istream& is, const char* what);
template <>
inline float read_scalar<float>(std::istream& is, const char* what) {
  return read_f32(is, what);
}
template <>
inline double read_scalar<double>(std::istream& is, const char* what) {
  const std::uint64_t bits = read_u64(is, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

inline void write_name(std::ostream& os, const std::string& name) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

inline std::string read_name(std::istream& is, const char* what) {
  const std::uint32_t n = read_u32(is, what);
  if (n > 4096) throw std::runtime_error(std::string("checkpoint: unreasonable name length in ") + what);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated name in ") + what);
  return s;
}

template <class S>
constexpr std::uint32_t scalar_kind() {
  return std::is_same_v<S, float> ? 0u : 1u;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, P3DModel<S>& model, const Adam<S>* opt,
                     std::uint64_t train_seed, Index next_epoch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kCheckpointMagic, 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, detail::scalar_kind<S>());
  detail::write_u64(os, train_seed);
  detail::write_u64(os, static_cast<std::uint64_t>(next_epoch));

  auto params = model.parameters();
  auto bufs = model.buffers();
  detail::write_u32(os, static_cast<std::uint32_t>(params.size() + bufs.size()));
  for (auto& p : params) {
    detail::write_name(os, p.name);
    detail::write_u32(os, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (Index d : p.tensor.shape()) detail::write_u64(os, static_cast<std::uint64_t>(d));
    for (S v : p.tensor.values()) detail::write_scalar<S>(os, v);
  }
  for (auto& b : bufs) {
    detail::write_name(os, b.name);
    detail::write_u32(os, 1);
    detail::write_u64(os, static_cast<std::uint64_t>(b.data->size()));
    for (S v : *b.data) detail::write_scalar<S>(os, v);
  }

  if (opt == nullptr) {
    os.put(static_cast<char>(0));
  } else {
    const auto& m = opt->moments_m();
    const auto& v = opt->moments_v();
    if (!m.empty() && m.size() != params.size())
      throw std::runtime_error("checkpoint: optimizer does not match the model");
    os.put(static_cast<char>(1));
    detail::write_u64(os, opt->step_count());
    detail::write_u32(os, static_cast<std::uint32_t>(m.size()));
    for (size_t i = 0; i < m.size(); ++i) {
      detail::write_name(os, params[i].name);
      detail::write_u64(os, static_cast<std::uint64_t>(m[i].size()));
      for (S x : m[i]) detail::write_scalar<S>(os, x);
      for (S x : v[i]) detail::write_scalar<S>(os, x);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

struct CheckpointInfo {
  std::uint64_t train_seed = 0;
  Index next_epoch = 0;
  bool has_optimizer = false;
};

template <class S>
CheckpointInfo load_checkpoint(const std::string& path, P3DModel<S>& model, Adam<S>* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(is, "version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t kind = detail::read_u32(is, "scalar kind");
  if (kind != detail::scalar_kind<S>())
    throw std::runtime_error("checkpoint: scalar precision does not match the model");

  CheckpointInfo info;
  info.train_seed = detail::read_u64(is, "train seed");
  info.next_epoch = static_cast<Index>(detail::read_u64(is, "next epoch"));

  const std::uint32_t count = detail::read_u32(is, "tensor count");
  std::map<std::string, std::pair<Shape, std::vector<S>>> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::read_name(is, "tensor record");
    const std::uint32_t ndim = detail::read_u32(is, "tensor ndim");
    if (ndim > 8) throw std::runtime_error("checkpoint: unreasonable rank for " + name);
    Shape shape;
    Index numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<Index>(detail::read_u64(is, "tensor dim")));
      numel *= shape.back();
    }
    std::vector<S> payload(static_cast<size_t>(numel));
    for (auto& x : payload) x = detail::read_scalar<S>(is, "tensor payload");
    if (!records.emplace(name, std::make_pair(std::move(shape), std::move(payload))).second)
      throw std::runtime_error("checkpoint: duplicate record " + name);
  }

  auto params = model.parameters();
  auto bufs = model.buffers();
  auto take = [&](const std::string& name, const Shape& want) -> std::vector<S> {
    auto it = records.find(name);
    if (it == records.end()) throw std::runtime_error("checkpoint: missing record " + name);
    if (it->second.first != want)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    std::vector<S> payload = std::move(it->second.second);
    records.erase(it);
    return payload;
  };
  // stage everything before touching the model so a bad file leaves it intact
  std::vector<std::vector<S>> staged_params;
  for (auto& p : params) staged_params.push_back(take(p.name, p.tensor.shape()));
  std::vector<std::vector<S>> staged_bufs;
  for (auto& b : bufs)
    staged_bufs.push_back(take(b.name, Shape{static_cast<Index>(b.data->size())}));
  if (!records.empty())
    throw std::runtime_error("checkpoint: unknown record " + records.begin()->first);

  char opt_flag = 0;
  is.get(opt_flag);
  if (!is) throw std::runtime_error("checkpoint: truncated optimizer flag");
  info.has_optimizer = opt_flag != 0;
  std::uint64_t step_count = 0;
  std::vector<std::vector<S>> staged_m, staged_v;
  if (info.has_optimizer) {
    step_count = detail::read_u64(is, "optimizer step");
    const std::uint32_t n = detail::read_u32(is, "optimizer entries");
    if (n != 0 && n != params.size())
      throw std::runtime_error("checkpoint: optimizer entries do not match the model");
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string name = detail::read_name(is, "optimizer record");
      if (name != params[i].name)
        throw std::runtime_error("checkpoint: optimizer record order mismatch at " + name);
      const std::uint64_t numel = detail::read_u64(is, "optimizer numel");
      if (numel != static_cast<std::uint64_t>(params[i].tensor.numel()))
        throw std::runtime_error("checkpoint: optimizer size mismatch for " + name);
      std::vector<S> m(numel), v(numel);
      for (auto& x : m) x = detail::read_scalar<S>(is, "optimizer m");
      for (auto& x : v) x = detail::read_scalar<S>(is, "optimizer v");
      staged_m.push_back(std::move(m));
      staged_v.push_back(std::move(v));
    }
  } else if (opt != nullptr) {
    throw std::runtime_error("checkpoint: no optimizer state in " + path);
  }
  is.peek();
  if (!is.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path);

  for (size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.values_mut();
    std::memcpy(dst.data(), staged_params[i].data(), sizeof(S) * staged_params[i].size());
  }
  for (size_t i = 0; i < bufs.size(); ++i) *bufs[i].data = std::move(staged_bufs[i]);
  if (opt != nullptr) {
    opt->set_step_count(step_count);
    opt->moments_m() = std::move(staged_m);
    opt->moments_v() = std::move(staged_v);
  }
  return info;
}

}  // namespace p3d
