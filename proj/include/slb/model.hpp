#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slb/quant.hpp"
#include "slb/sbn.hpp"
#include "slb/search.hpp"
#include "slb/tensor.hpp"

namespace slb {

enum class WeightMode { Fp32, Slb, Ste };
WeightMode weight_mode_from_string(const std::string& s);
std::string to_string(WeightMode mode);

enum class NetState { Continuous, Discrete };

struct ForwardCtx {
  NetState state = NetState::Continuous;
  bool training = false;
  double tau = 1.0;
  // Evaluation-time statistics override, e.g. discrete weights with
  // continuous-track statistics for the SBN ablation.
  std::optional<SbnLayer::Track> stats_override;

  SbnLayer::Track stats_track() const {
    if (stats_override) return *stats_override;
    return state == NetState::Discrete ? SbnLayer::Track::Discrete
                                       : SbnLayer::Track::Continuous;
  }
};

enum class ParamKind { FullPrecision, SlbLogits, SteLatent };

struct Param {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};

// Every trainable tensor appears exactly once.
class ParamRegistry {
 public:
  void add(const std::string& name, Tensor tensor, ParamKind kind);
  std::vector<Param>& items() { return params_; }
  const std::vector<Param>& items() const { return params_; }
  Param* find(const std::string& name);

 private:
  std::vector<Param> params_;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, const ForwardCtx& ctx) = 0;
  virtual std::string kind() const = 0;
  virtual void register_params(const std::string& prefix, ParamRegistry& reg) { (void)prefix, (void)reg; }
  // Visits this layer and any nested layers with their hierarchical names.
  virtual void visit(const std::string& prefix,
                     const std::function<void(const std::string&, Layer&)>& fn) {
    fn(prefix, *this);
  }
};

class ConvLayer : public Layer {
 public:
  ConvLayer(std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride, int padding,
            WeightMode mode, int q_w, bool bias, std::uint64_t seed);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) override;
  std::string kind() const override { return "conv"; }
  void register_params(const std::string& prefix, ParamRegistry& reg) override;

  bool quantized() const { return mode_ != WeightMode::Fp32; }
  WeightMode mode() const { return mode_; }
  SearchableWeight* searchable() { return mode_ == WeightMode::Slb ? &sw_ : nullptr; }
  SteWeight* ste() { return mode_ == WeightMode::Ste ? &ste_ : nullptr; }
  const QuantGrid& grid() const { return grid_; }
  // Weights used for the given state (continuous vs discrete).
  Tensor weights_for(const ForwardCtx& ctx) const;

  std::int64_t in_channels, out_channels;
  int kernel, stride, padding;
  bool has_bias;
  Tensor bias;

 private:
  WeightMode mode_;
  QuantGrid grid_;
  Tensor weight_;      // fp32 mode
  SearchableWeight sw_;  // slb mode
  SteWeight ste_;        // ste mode
};

class SbnWrap : public Layer {
 public:
  explicit SbnWrap(std::int64_t channels) : layer_(channels) {}
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) override {
    return layer_.forward(x, ctx.stats_track(), ctx.training);
  }
  std::string kind() const override { return "sbn"; }
  void register_params(const std::string& prefix, ParamRegistry& reg) override;
  SbnLayer& sbn() { return layer_; }

 private:
  SbnLayer layer_;
};

class ActQuantLayer : public Layer {
 public:
  explicit ActQuantLayer(int q_a) : q_({q_a}) {}
  Tensor forward(const Tensor& x, const ForwardCtx&) override { return q_.forward(x); }
  std::string kind() const override { return "act_quant"; }
  int bits() const { return q_.q_a; }

 private:
  ActQuantizer q_;
};

class MaxPoolLayer : public Layer {
 public:
  MaxPoolLayer(int kernel, int stride) : kernel_(kernel), stride_(stride) {}
  Tensor forward(const Tensor& x, const ForwardCtx&) override;
  std::string kind() const override { return "pool"; }

 private:
  int kernel_, stride_;
};

class FlattenLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, const ForwardCtx&) override;
  std::string kind() const override { return "flatten"; }
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, const ForwardCtx&) override;
  std::string kind() const override { return "relu"; }
};

class GlobalAvgPoolLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, const ForwardCtx&) override;
  std::string kind() const override { return "global_avg_pool"; }
};

class LinearLayer : public Layer {
 public:
  LinearLayer(std::int64_t in_features, std::int64_t out_features, std::uint64_t seed);
  Tensor forward(const Tensor& x, const ForwardCtx&) override;
  std::string kind() const override { return "fc"; }
  void register_params(const std::string& prefix, ParamRegistry& reg) override;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

// Basic residual block with a parameter-free (subsample + zero-pad)
// shortcut; the shortcut bypasses activation quantization.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(std::int64_t in_ch, std::int64_t out_ch, int stride, WeightMode mode, int q_w,
                int q_a, std::uint64_t seed);
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) override;
  std::string kind() const override { return "residual"; }
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Layer&)>& fn) override;

 private:
  std::int64_t in_ch_, out_ch_;
  int stride_;
  bool relu_;  // explicit nonlinearity when activations are full precision
  std::unique_ptr<ActQuantLayer> aq1_, aq2_;
  std::unique_ptr<ConvLayer> conv1_, conv2_;
  std::unique_ptr<SbnWrap> sbn1_, sbn2_;
};

class Network {
 public:
  std::string arch;
  int q_w = 32;
  int q_a = 32;
  WeightMode mode = WeightMode::Fp32;
  std::vector<std::unique_ptr<Layer>> layers;

  Tensor forward(const Tensor& x, const ForwardCtx& ctx);

  void finalize();  // builds the parameter registry
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  void for_each_layer(const std::function<void(const std::string&, Layer&)>& fn);
  std::vector<std::pair<std::string, SearchableWeight*>> searchable_weights();
  std::vector<std::pair<std::string, SteWeight*>> ste_weights();
  std::vector<std::pair<std::string, SbnLayer*>> sbn_layers();
  bool has_searchable();

 private:
  ParamRegistry params_;
};

// arch in {mnist_cnn, vgg_small, resnet20}; q_w, q_a in {1,2,4,8,32}.
// q_w == 32 degenerates every mode to the full-precision baseline.
Network build_network(const std::string& arch, int q_w, int q_a, WeightMode mode,
                      std::uint64_t seed);

struct ArchInfo {
  std::int64_t input_channels;
  std::int64_t input_hw;
  std::int64_t classes;
};
ArchInfo arch_info(const std::string& arch);

}  // namespace slb
