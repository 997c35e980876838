#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "p3d/data.hpp"
#include "p3d/model.hpp"
#include "p3d/train.hpp"

namespace p3d {

// ---- inference ----

// class scores for one video: four deterministic chunks, forwarded together
// in evaluation mode, softmax outputs averaged
template <class S>
std::vector<S> predict_video(P3DModel<S>& model, const PoseSequence& seq) {
  const auto chunk_arr = sample_eval_chunks(seq.num_frames(), model.cfg.frames);
  std::vector<const PoseSequence*> seqs(chunk_arr.size(), &seq);
  std::vector<std::vector<Index>> chunks(chunk_arr.begin(), chunk_arr.end());
  std::vector<ModelConfig> scfgs;
  for (const auto& st : model.streams) scfgs.push_back(st.cfg);
  auto inputs = assemble_chunk_batch<S>(scfgs, seqs, chunks);
  ForwardMode mode;  // evaluation: no dropout, running batch-norm stats
  RngState rng(0);
  auto out = model_forward(model, inputs, mode, rng);
  const Index C = model.cfg.num_classes;
  const Index n = static_cast<Index>(chunks.size());
  std::vector<S> scores(static_cast<size_t>(C), S(0));
  auto probs = out.probs.values();
  for (Index b = 0; b < n; ++b)
    for (Index c = 0; c < C; ++c)
      scores[static_cast<size_t>(c)] += probs[static_cast<size_t>(b * C + c)] / static_cast<S>(n);
  return scores;
}

// ---- metrics ----

struct MetricsReport {
  Index samples = 0;
  Index classes_evaluated = 0;          // classes with at least one instance
  std::map<int, double> per_instance;   // k -> hit rate over samples
  std::map<int, double> per_class;      // k -> unweighted mean of per-class hit rates
};

// rank of the true label under descending score order; ties resolve toward
// the lower class index, so rank = #strictly_greater + #equal_with_lower_index
template <class S>
Index label_rank(const std::vector<S>& scores, int label) {
  const S target = scores[static_cast<size_t>(label)];
  Index rank = 0;
  for (size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] > target) ++rank;
    else if (scores[c] == target && static_cast<int>(c) < label) ++rank;
  }
  return rank;
}

template <class S>
MetricsReport compute_metrics(const std::vector<std::vector<S>>& scores,
                              const std::vector<int>& labels, Index num_classes,
                              const std::vector<int>& ks = {1, 5}) {
  if (scores.empty()) throw std::invalid_argument("compute_metrics: no samples");
  if (scores.size() != labels.size())
    throw std::invalid_argument("compute_metrics: one label per score row required");
  if (ks.empty()) throw std::invalid_argument("compute_metrics: no k values");
  for (int k : ks)
    if (k < 1) throw std::invalid_argument("compute_metrics: k >= 1");

  MetricsReport rep;
  rep.samples = static_cast<Index>(scores.size());
  std::map<int, Index> class_counts;
  std::map<int, std::map<int, Index>> class_hits;  // label -> k -> hits
  std::map<int, Index> instance_hits;              // k -> hits

  for (size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<Index>(scores[i].size()) != num_classes)
      throw std::invalid_argument("compute_metrics: score row width mismatch");
    const int label = labels[i];
    if (label < 0 || label >= num_classes)
      throw std::invalid_argument("compute_metrics: label out of range");
    const Index rank = label_rank(scores[i], label);
    class_counts[label]++;
    for (int k : ks) {
      const bool hit = rank < static_cast<Index>(k);
      if (hit) {
        instance_hits[k]++;
        class_hits[label][k]++;
      }
    }
  }

  rep.classes_evaluated = static_cast<Index>(class_counts.size());
  for (int k : ks) {
    rep.per_instance[k] =
        static_cast<double>(instance_hits[k]) / static_cast<double>(rep.samples);
    double macro = 0;
    for (const auto& [label, count] : class_counts)
      macro += static_cast<double>(class_hits[label][k]) / static_cast<double>(count);
    rep.per_class[k] = macro / static_cast<double>(rep.classes_evaluated);
  }
  return rep;
}

template <class S>
struct SplitEvaluation {
  MetricsReport metrics;
  std::vector<std::vector<S>> scores;
  std::vector<int> labels;
  std::vector<int> predicted;  // argmax with the same tie rule as the ranks
};

template <class S>
SplitEvaluation<S> evaluate_split(P3DModel<S>& model, const Dataset& data,
                                  const std::string& split, const std::vector<int>& ks = {1, 5}) {
  if (data.num_classes() != model.cfg.num_classes)
    throw std::invalid_argument("evaluate_split: dataset classes do not match the model");
  const auto samples = data.split(split);
  if (samples.empty()) throw std::invalid_argument("evaluate_split: split '" + split + "' is empty");
  SplitEvaluation<S> ev;
  for (const SampleInfo* info : samples) {
    ev.scores.push_back(predict_video(model, data.sequence(*info)));
    ev.labels.push_back(info->label);
    const auto& row = ev.scores.back();
    ev.predicted.push_back(static_cast<int>(
        std::max_element(row.begin(), row.end()) - row.begin()));
  }
  ev.metrics = compute_metrics(ev.scores, ev.labels, model.cfg.num_classes, ks);
  return ev;
}

// ---- cost accounting ----
//
// Closed-form counts for one clip of T frames through a single forward pass.
// One multiply-accumulate counts as two floating point operations; element
// wise work (norms, softmax, activations, bias adds) is excluded, as is the
// final averaging across chunks or streams.

inline constexpr double kFlopsPerMac = 2.0;

struct CostLine {
  std::string label;
  long long params = 0;
  double flops = 0;
};

struct CostReport {
  long long params_embed = 0;
  long long params_blocks = 0;
  long long params_heads = 0;
  long long params_total = 0;
  double flops_embed = 0;
  double flops_blocks = 0;
  double flops_heads = 0;
  double flops_total = 0;
  std::vector<CostLine> lines;  // per-stream and per-head breakdown
};

namespace detail {

inline long long encoder_layer_param_count(long long d, long long ffn) {
  const long long attn = 4 * (d * d + d);
  const long long norms = 4 * d;
  const long long ffn_p = (d * ffn + ffn) + (ffn * d + d);
  return attn + norms + ffn_p;
}

inline long long mlp_block_param_count(long long d, long long ffn) {
  return (d * ffn + ffn) + 2 * ffn + (ffn * d + d);
}

inline double encoder_layer_flops(double T, double d, double ffn) {
  const double proj = 4.0 * T * d * d;       // Q, K, V, output projections
  const double attn = 2.0 * T * T * d;       // score matrix and weighted sum
  const double ffn_m = 2.0 * T * d * ffn;    // two dense layers
  return kFlopsPerMac * (proj + attn + ffn_m);
}

inline double mlp_block_flops(double T, double d, double ffn) {
  return kFlopsPerMac * (2.0 * T * d * ffn);
}

inline long long block_param_count(BlockKind kind, const ModelConfig& scfg) {
  switch (kind) {
    case BlockKind::pet: {
      long long sum = 0;
      for (const PartSlice& s : scfg.part_slices())
        sum += encoder_layer_param_count(s.width, scfg.ffn_dim);
      return sum;
    }
    case BlockKind::wet:
      return encoder_layer_param_count(scfg.model_width(), scfg.ffn_dim);
    case BlockKind::mlp:
      return mlp_block_param_count(scfg.model_width(), scfg.ffn_dim);
  }
  throw std::logic_error("block_param_count: bad kind");
}

inline double block_flops(BlockKind kind, const ModelConfig& scfg) {
  const double T = static_cast<double>(scfg.frames);
  switch (kind) {
    case BlockKind::pet: {
      double sum = 0;
      for (const PartSlice& s : scfg.part_slices())
        sum += encoder_layer_flops(T, static_cast<double>(s.width),
                                   static_cast<double>(scfg.ffn_dim));
      return sum;
    }
    case BlockKind::wet:
      return encoder_layer_flops(T, static_cast<double>(scfg.model_width()),
                                 static_cast<double>(scfg.ffn_dim));
    case BlockKind::mlp:
      return mlp_block_flops(T, static_cast<double>(scfg.model_width()),
                             static_cast<double>(scfg.ffn_dim));
  }
  throw std::logic_error("block_flops: bad kind");
}

inline long long embed_param_count(const ModelConfig& scfg) {
  const long long f = scfg.reps.per_joint_width();
  long long sum = scfg.joint_count() * (f * scfg.joint_dim + scfg.joint_dim);
  if (scfg.layout.has(Part::face)) {
    const long long e = scfg.layout.expression_width;
    const long long w = scfg.expr_multiplier * scfg.joint_dim;
    sum += e * w + w;
  }
  return sum;
}

inline double embed_flops(const ModelConfig& scfg) {
  const double T = static_cast<double>(scfg.frames);
  const double f = static_cast<double>(scfg.reps.per_joint_width());
  double macs = T * static_cast<double>(scfg.joint_count()) * f *
                static_cast<double>(scfg.joint_dim);
  if (scfg.layout.has(Part::face))
    macs += T * static_cast<double>(scfg.layout.expression_width) *
            static_cast<double>(scfg.expr_multiplier * scfg.joint_dim);
  return kFlopsPerMac * macs;
}

inline long long head_param_count(const ModelConfig& scfg) {
  const long long d = scfg.model_width();
  return 2 * d + (d * scfg.num_classes + scfg.num_classes);
}

inline double head_flops(const ModelConfig& scfg) {
  return kFlopsPerMac * static_cast<double>(scfg.model_width()) *
         static_cast<double>(scfg.num_classes);
}

}  // namespace detail

inline CostReport count_costs(const ModelConfig& cfg) {
  cfg.validate();
  CostReport rep;
  const std::vector<ModelConfig> scfgs = stream_configs(cfg);
  const auto kinds = detail::block_kinds(cfg.composition);
  for (size_t si = 0; si < scfgs.size(); ++si) {
    const ModelConfig& scfg = scfgs[si];
    const long long pe = detail::embed_param_count(scfg);
    const long long pb = scfg.pairs * (detail::block_param_count(kinds.first, scfg) +
                                       detail::block_param_count(kinds.second, scfg));
    const double fe = detail::embed_flops(scfg);
    const double fb = static_cast<double>(scfg.pairs) *
                      (detail::block_flops(kinds.first, scfg) +
                       detail::block_flops(kinds.second, scfg));
    rep.params_embed += pe;
    rep.params_blocks += pb;
    rep.flops_embed += fe;
    rep.flops_blocks += fb;
    rep.lines.push_back({scfgs.size() > 1 ? "stream" + std::to_string(si) : "stream", pe + pb,
                         fe + fb});
  }
  const Index num_heads = cfg.ensemble == Ensemble::late ? static_cast<Index>(scfgs.size()) : 1;
  for (Index h = 0; h < num_heads; ++h) {
    const long long ph = detail::head_param_count(scfgs[static_cast<size_t>(h)]);
    const double fh = detail::head_flops(scfgs[static_cast<size_t>(h)]);
    rep.params_heads += ph;
    rep.flops_heads += fh;
    rep.lines.push_back({num_heads > 1 ? "head" + std::to_string(h) : "head", ph, fh});
  }
  rep.params_total = rep.params_embed + rep.params_blocks + rep.params_heads;
  rep.flops_total = rep.flops_embed + rep.flops_blocks + rep.flops_heads;
  return rep;
}

inline long long count_params(const ModelConfig& cfg) { return count_costs(cfg).params_total; }
inline double count_flops(const ModelConfig& cfg) { return count_costs(cfg).flops_total; }

// ---- ablation harness ----

struct AblationEntry {
  std::string family;   // parts | encodings | representations | ensembles
  std::string variant;
  ModelConfig config;
  bool trained = false;
  double test_top1 = 0;
  double test_top5 = 0;
  double final_train_loss = 0;
  long long params = 0;
  double flops = 0;
};

namespace detail {

inline ModelConfig with_parts(const ModelConfig& base, std::vector<Part> parts) {
  ModelConfig cfg = base;
  cfg.layout = base.layout;
  cfg.layout.parts = std::move(parts);
  cfg.reps.expression = cfg.layout.has(Part::face);
  cfg.validate();
  return cfg;
}

}  // namespace detail

// every studied variant, grouped into four families; the base config
// supplies dataset-independent settings (widths, depth, classes, frames)
inline std::vector<AblationEntry> ablation_grid(const ModelConfig& base) {
  base.validate();
  if (!base.layout.has(Part::face) || base.pose_rep_count() != 3)
    throw std::invalid_argument("ablation_grid: base config must enable all parts and representations");
  std::vector<AblationEntry> out;

  // the first three families study the single-stream model
  ModelConfig single = base;
  single.ensemble = Ensemble::early;

  const std::vector<std::pair<std::string, std::vector<Part>>> part_sets = {
      {"B", {Part::body}},
      {"B,E", {Part::body, Part::face}},
      {"H", {Part::left_hand, Part::right_hand}},
      {"B,H", {Part::body, Part::left_hand, Part::right_hand}},
      {"B,H,E", {Part::body, Part::left_hand, Part::right_hand, Part::face}},
  };
  for (const auto& [name, parts] : part_sets)
    out.push_back({"parts", name, detail::with_parts(single, parts)});

  for (Composition c : {Composition::mlp_wet, Composition::mlp_pet, Composition::wet_wet,
                        Composition::pet_pet, Composition::pet_wet}) {
    ModelConfig cfg = single;
    cfg.composition = c;
    out.push_back({"encodings", composition_name(c), cfg});
  }

  for (int mask = 1; mask < 8; ++mask) {
    ModelConfig cfg = single;
    cfg.reps.pos2d = mask & 1;
    cfg.reps.pos3d = mask & 2;
    cfg.reps.rot6d = mask & 4;
    std::string name;
    if (cfg.reps.pos2d) name += "pos2d";
    if (cfg.reps.pos3d) name += (name.empty() ? "" : "+") + std::string("pos3d");
    if (cfg.reps.rot6d) name += (name.empty() ? "" : "+") + std::string("rot6d");
    out.push_back({"representations", name, cfg});
  }

  for (Ensemble e : {Ensemble::early, Ensemble::middle, Ensemble::late}) {
    ModelConfig cfg = base;
    cfg.ensemble = e;
    out.push_back({"ensembles", ensemble_name(e), cfg});
  }

  for (auto& entry : out) {
    entry.config.validate();
    entry.params = count_params(entry.config);
    entry.flops = count_flops(entry.config);
  }
  return out;
}

// train and score one variant; the dataset must provide train and test splits
template <class S>
void run_ablation_entry(AblationEntry& entry, const Dataset& data, const TrainConfig& tcfg,
                        RngState model_rng) {
  auto model = build_model<S>(entry.config, model_rng);
  Adam<S> opt(tcfg.adam());
  auto history = train_model(model, opt, data, tcfg);
  auto ev = evaluate_split(model, data, "test");
  entry.trained = true;
  entry.final_train_loss = history.empty() ? 0 : history.back().mean_loss;
  entry.test_top1 = ev.metrics.per_instance.at(1);
  entry.test_top5 = ev.metrics.per_instance.at(5);
}

}  // namespace p3d
