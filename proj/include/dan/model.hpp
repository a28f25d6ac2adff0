#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dan/losses.hpp"
#include "dan/ops.hpp"
#include "dan/rng.hpp"
#include "dan/tensor.hpp"

namespace dan {

struct ModelConfig {
  int input_size = 64;  // full-scale runs use 224
  int channels = 3;
  int num_heads = 4;
  int num_classes = 8;
  std::vector<int> backbone_widths = {16, 32, 64};
  int blocks_per_stage = 2;
  int attention_reduction = 4;
  Task task = Task::EXPR;
  std::uint64_t seed = 0;

  int stages() const { return static_cast<int>(backbone_widths.size()); }
  int feature_dim() const { return backbone_widths.back(); }
  int output_dim() const { return task == Task::EXPR ? num_classes : 2; }

  void validate() const {
    if (num_heads < 1) throw ConfigError("model: num_heads must be >= 1");
    if (task == Task::EXPR && num_classes != 8)
      throw ConfigError("model: EXPR task requires 8 classes");
    if (backbone_widths.empty()) throw ConfigError("model: backbone_widths empty");
    if (blocks_per_stage < 1) throw ConfigError("model: blocks_per_stage must be >= 1");
    int div = 1 << stages();
    if (input_size % div != 0)
      throw ConfigError("model: input_size " + std::to_string(input_size) +
                        " not divisible by 2^stages = " + std::to_string(div));
    if (feature_dim() < attention_reduction)
      throw ConfigError("model: feature_dim " + std::to_string(feature_dim()) +
                        " smaller than attention reduction ratio " +
                        std::to_string(attention_reduction));
  }
};

// Ordered named parameter collection; order is the checkpoint and optimizer
// iteration order.
template <typename S>
class ParamSet {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    t.set_requires_grad();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  Tensor<S>& get(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw ConfigError("param not found: " + name);
  }

  const Tensor<S>& get(const std::string& name) const {
    return const_cast<ParamSet*>(this)->get(name);
  }

  std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }

  void zero_grads() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

  std::int64_t total_size() const {
    std::int64_t acc = 0;
    for (const auto& [n, t] : items_) acc += t.size();
    return acc;
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
};

template <typename S>
struct HeadOutput {
  Tensor<S> features;      // [N, feature_dim]
  Tensor<S> spatial_map;   // [N,1,H',W'], entries in (0,1)
  Tensor<S> channel_gate;  // [N, feature_dim], entries in (0,1)
};

template <typename S>
struct ModelOutput {
  Tensor<S> output;           // EXPR: probs [N,8]; VA: [N,2] in (-1,1)
  Tensor<S> fused;            // [N, feature_dim]
  std::vector<HeadOutput<S>> heads;
  Tensor<S> backbone_pooled;  // [N, feature_dim], feeds the affinity loss
  Tensor<S> feature_map;      // [N, feature_dim, H', W']
};

namespace detail {

template <typename S>
void kaiming_init(Tensor<S>& t, std::int64_t fan_in, KeyedRng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace detail

// The full network: residual CNN backbone, H parallel attention heads, a
// softmax fusion over heads, and one task head.
template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : config_(cfg), task_bn_stats_(cfg.feature_dim()) {
    cfg.validate();
    KeyedRng rng(cfg.seed, /*stream=*/0x6d6f64656cULL);
    auto conv_param = [&](const std::string& name, int cout, int cin, int k) {
      Tensor<S> w(Shape{cout, cin, k, k});
      detail::kaiming_init(w, static_cast<std::int64_t>(cin) * k * k, rng);
      params_.add(name + ".w", std::move(w));
      params_.add(name + ".b", Tensor<S>(Shape{cout}));
    };
    auto dense_param = [&](const std::string& name, int fin, int fout) {
      Tensor<S> w(Shape{fin, fout});
      detail::kaiming_init(w, fin, rng);
      params_.add(name + ".w", std::move(w));
      params_.add(name + ".b", Tensor<S>(Shape{fout}));
    };

    conv_param("stem.conv", cfg.backbone_widths[0], cfg.channels, 3);
    int cin = cfg.backbone_widths[0];
    for (int s = 0; s < cfg.stages(); ++s) {
      int cout = cfg.backbone_widths[static_cast<std::size_t>(s)];
      for (int b = 0; b < cfg.blocks_per_stage; ++b) {
        std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
        int stride = b == 0 ? 2 : 1;
        conv_param(base + ".conv1", cout, cin, 3);
        conv_param(base + ".conv2", cout, cout, 3);
        if (stride != 1 || cin != cout) conv_param(base + ".proj", cout, cin, 1);
        cin = cout;
      }
    }
    int c = cfg.feature_dim();
    int cr = c / cfg.attention_reduction;
    for (int h = 0; h < cfg.num_heads; ++h) {
      std::string base = "head" + std::to_string(h);
      conv_param(base + ".spatial.conv1", cr, c, 1);
      conv_param(base + ".spatial.conv2", cr, cr, 3);
      conv_param(base + ".spatial.conv3", 1, cr, 1);
      dense_param(base + ".channel.fc1", c, cr);
      dense_param(base + ".channel.fc2", cr, c);
    }
    dense_param("task.fc", c, c);
    Tensor<S> gamma(Shape{c});
    std::fill(gamma.data(), gamma.data() + c, S(1));
    params_.add("task.bn.gamma", std::move(gamma));
    params_.add("task.bn.beta", Tensor<S>(Shape{c}));
    dense_param("task.out", c, cfg.output_dim());
  }

  const ModelConfig& config() const { return config_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }
  RunningStats<S>& task_bn_stats() { return task_bn_stats_; }
  const RunningStats<S>& task_bn_stats() const { return task_bn_stats_; }

 private:
  ModelConfig config_;
  ParamSet<S> params_;
  RunningStats<S> task_bn_stats_;
};

// Analytic parameter count for a config; guards architecture drift.
inline std::int64_t model_param_count(const ModelConfig& cfg) {
  auto conv = [](std::int64_t cout, std::int64_t cin, std::int64_t k) { return cout * cin * k * k + cout; };
  auto fc = [](std::int64_t fin, std::int64_t fout) { return fin * fout + fout; };
  std::int64_t total = conv(cfg.backbone_widths[0], cfg.channels, 3);
  std::int64_t cin = cfg.backbone_widths[0];
  for (int s = 0; s < cfg.stages(); ++s) {
    std::int64_t cout = cfg.backbone_widths[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      int stride = b == 0 ? 2 : 1;
      total += conv(cout, cin, 3) + conv(cout, cout, 3);
      if (stride != 1 || cin != cout) total += conv(cout, cin, 1);
      cin = cout;
    }
  }
  std::int64_t c = cfg.feature_dim();
  std::int64_t cr = c / cfg.attention_reduction;
  total += cfg.num_heads * (conv(cr, c, 1) + conv(cr, cr, 3) + conv(1, cr, 1) + fc(c, cr) + fc(cr, c));
  total += fc(c, c) + 2 * c + fc(c, cfg.output_dim());
  return total;
}

// Stem conv and residual stages; each stage opens with a stride-2 block.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> backbone_forward(Tape<S>* tape, Model<S>& model,
                                                 const Tensor<S>& images) {
  const ModelConfig& cfg = model.config();
  if (images.rank() != 4 || images.extent(1) != cfg.channels ||
      images.extent(2) != cfg.input_size || images.extent(3) != cfg.input_size)
    throw GeometryError("backbone: expected input [N," + std::to_string(cfg.channels) + "," +
                        std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                        "], got " + shape_str(images.shape()));
  auto& p = model.params();
  Tensor<S> x = relu(tape, conv2d(tape, images, p.get("stem.conv.w"), p.get("stem.conv.b"), 1, 1));
  int cin = cfg.backbone_widths[0];
  for (int s = 0; s < cfg.stages(); ++s) {
    int cout = cfg.backbone_widths[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      int stride = b == 0 ? 2 : 1;
      Tensor<S> y = relu(tape, conv2d(tape, x, p.get(base + ".conv1.w"), p.get(base + ".conv1.b"),
                                      stride, 1));
      y = conv2d(tape, y, p.get(base + ".conv2.w"), p.get(base + ".conv2.b"), 1, 1);
      Tensor<S> shortcut = (stride != 1 || cin != cout)
                               ? conv2d(tape, x, p.get(base + ".proj.w"), p.get(base + ".proj.b"),
                                        stride, 0)
                               : x;
      x = relu(tape, add(tape, y, shortcut));
      cin = cout;
    }
  }
  Tensor<S> pooled = global_avg_pool(tape, x);
  return {x, pooled};
}

// 1x1 reduce -> relu -> 3x3 -> relu -> 1x1 to one plane -> sigmoid
template <typename S>
Tensor<S> spatial_attention_unit(Tape<S>* tape, Model<S>& model, int head,
                                 const Tensor<S>& feature_map) {
  auto& p = model.params();
  std::string base = "head" + std::to_string(head) + ".spatial";
  Tensor<S> x = relu(tape, conv2d(tape, feature_map, p.get(base + ".conv1.w"),
                                  p.get(base + ".conv1.b"), 1, 0));
  x = relu(tape, conv2d(tape, x, p.get(base + ".conv2.w"), p.get(base + ".conv2.b"), 1, 1));
  x = conv2d(tape, x, p.get(base + ".conv3.w"), p.get(base + ".conv3.b"), 1, 0);
  return sigmoid(tape, x);
}

// global pool -> squeeze -> relu -> expand -> sigmoid
template <typename S>
Tensor<S> channel_attention_unit(Tape<S>* tape, Model<S>& model, int head,
                                 const Tensor<S>& feature_map) {
  auto& p = model.params();
  std::string base = "head" + std::to_string(head) + ".channel";
  Tensor<S> x = global_avg_pool(tape, feature_map);
  x = relu(tape, dense(tape, x, p.get(base + ".fc1.w"), p.get(base + ".fc1.b")));
  x = dense(tape, x, p.get(base + ".fc2.w"), p.get(base + ".fc2.b"));
  return sigmoid(tape, x);
}

template <typename S>
HeadOutput<S> attention_head(Tape<S>* tape, Model<S>& model, int head, const Tensor<S>& feature_map) {
  HeadOutput<S> out;
  out.spatial_map = spatial_attention_unit(tape, model, head, feature_map);
  out.channel_gate = channel_attention_unit(tape, model, head, feature_map);
  Tensor<S> attended = mul_channel(tape, mul_spatial(tape, feature_map, out.spatial_map),
                                   out.channel_gate);
  out.features = global_avg_pool(tape, attended);
  return out;
}

// Per-feature softmax weighting across heads, then a weighted sum. The head
// features themselves serve as the weighting logits, so the combination is a
// convex one and permuting heads leaves the result unchanged.
template <typename S>
Tensor<S> attention_fusion(Tape<S>* tape, const std::vector<HeadOutput<S>>& heads) {
  if (heads.empty()) throw ConfigError("attention_fusion: empty head list");
  std::vector<Tensor<S>> feats;
  feats.reserve(heads.size());
  for (const auto& h : heads) feats.push_back(h.features);
  Tensor<S> stacked = stack_last(tape, feats);             // [N,F,H]
  Tensor<S> weights = softmax(tape, stacked, 2);
  return sum_axis(tape, mul(tape, stacked, weights), 2);   // [N,F]
}

// dense -> batchnorm -> output layer (softmax over 8 logits, or tanh pair)
template <typename S>
Tensor<S> task_head(Tape<S>* tape, Model<S>& model, const Tensor<S>& fused, bool train) {
  auto& p = model.params();
  Tensor<S> x = dense(tape, fused, p.get("task.fc.w"), p.get("task.fc.b"));
  x = batchnorm(tape, x, p.get("task.bn.gamma"), p.get("task.bn.beta"), train,
                model.task_bn_stats());
  x = dense(tape, x, p.get("task.out.w"), p.get("task.out.b"));
  return model.config().task == Task::EXPR ? softmax(tape, x, 1) : tanh_op(tape, x);
}

template <typename S>
ModelOutput<S> model_forward(Tape<S>* tape, Model<S>& model, const Tensor<S>& images, bool train) {
  ModelOutput<S> out;
  auto [fm, pooled] = backbone_forward(tape, model, images);
  out.feature_map = fm;
  out.backbone_pooled = pooled;
  for (int h = 0; h < model.config().num_heads; ++h)
    out.heads.push_back(attention_head(tape, model, h, fm));
  out.fused = attention_fusion(tape, out.heads);
  out.output = task_head(tape, model, out.fused, train);
  return out;
}

}  // namespace dan
