#include "slb/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "slb/ops.hpp"
#include "slb/rng.hpp"

namespace slb {

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "fp32") return WeightMode::Fp32;
  if (s == "slb") return WeightMode::Slb;
  if (s == "ste") return WeightMode::Ste;
  throw std::invalid_argument("weight_mode: unknown mode '" + s + "' (expected fp32|slb|ste)");
}

std::string to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::Fp32: return "fp32";
    case WeightMode::Slb: return "slb";
    case WeightMode::Ste: return "ste";
  }
  return "?";
}

void ParamRegistry::add(const std::string& name, Tensor tensor, ParamKind kind) {
  for (const Param& p : params_) {
    if (p.name == name) throw std::logic_error("params: duplicate name " + name);
    if (p.tensor.impl() == tensor.impl()) {
      throw std::logic_error("params: tensor registered twice (" + p.name + ", " + name + ")");
    }
  }
  params_.push_back({name, std::move(tensor), kind});
}

Param* ParamRegistry::find(const std::string& name) {
  for (Param& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

namespace {

Tensor kaiming_tensor(const Shape& shape, std::int64_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from_data(shape, std::move(data), true);
}

}  // namespace

ConvLayer::ConvLayer(std::int64_t in_ch, std::int64_t out_ch, int k, int stride, int padding,
                     WeightMode mode, int q_w, bool with_bias, std::uint64_t seed)
    : in_channels(in_ch),
      out_channels(out_ch),
      kernel(k),
      stride(stride),
      padding(padding),
      has_bias(with_bias),
      mode_(q_w == 32 ? WeightMode::Fp32 : mode) {
  const Shape wshape{out_ch, in_ch, k, k};
  if (mode_ == WeightMode::Fp32) {
    weight_ = kaiming_tensor(wshape, in_ch * k * k, seed);
  } else {
    grid_ = uniform_grid(q_w);
    if (mode_ == WeightMode::Slb) {
      sw_ = SearchableWeight::create(wshape, grid_, seed);
    } else {
      ste_ = SteWeight::create(wshape, grid_, seed);
    }
  }
  if (has_bias) bias = Tensor::zeros({out_ch}, true);
}

Tensor ConvLayer::weights_for(const ForwardCtx& ctx) const {
  switch (mode_) {
    case WeightMode::Fp32:
      return weight_;
    case WeightMode::Slb:
      if (ctx.state == NetState::Continuous) return continuous_weights(sw_, ctx.tau);
      return discrete_weights(sw_);
    case WeightMode::Ste:
    default:
      // Training and inference both see Q(latent); the states coincide.
      if (ctx.state == NetState::Continuous) return ste_quantize(ste_.latent, ste_.grid);
      return quantize(ste_.latent, ste_.grid);
  }
}

Tensor ConvLayer::forward(const Tensor& x, const ForwardCtx& ctx) {
  Tensor y = conv2d(x, weights_for(ctx), stride, padding);
  if (has_bias) y = add(y, reshape(bias, {1, out_channels, 1, 1}));
  return y;
}

void ConvLayer::register_params(const std::string& prefix, ParamRegistry& reg) {
  switch (mode_) {
    case WeightMode::Fp32: reg.add(prefix + ".w", weight_, ParamKind::FullPrecision); break;
    case WeightMode::Slb: reg.add(prefix + ".A", sw_.logits, ParamKind::SlbLogits); break;
    case WeightMode::Ste: reg.add(prefix + ".lat", ste_.latent, ParamKind::SteLatent); break;
  }
  if (has_bias) reg.add(prefix + ".b", bias, ParamKind::FullPrecision);
}

void SbnWrap::register_params(const std::string& prefix, ParamRegistry& reg) {
  reg.add(prefix + ".gamma", layer_.gamma, ParamKind::FullPrecision);
  reg.add(prefix + ".beta", layer_.beta, ParamKind::FullPrecision);
}

Tensor MaxPoolLayer::forward(const Tensor& x, const ForwardCtx&) {
  return maxpool2d(x, kernel_, stride_);
}

Tensor FlattenLayer::forward(const Tensor& x, const ForwardCtx&) { return flatten2d(x); }

Tensor ReluLayer::forward(const Tensor& x, const ForwardCtx&) { return relu(x); }

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, const ForwardCtx&) {
  return global_avg_pool(x);
}

LinearLayer::LinearLayer(std::int64_t in_features, std::int64_t out_features, std::uint64_t seed) {
  weight = kaiming_tensor({in_features, out_features}, in_features, seed);
  bias = Tensor::zeros({out_features}, true);
}

Tensor LinearLayer::forward(const Tensor& x, const ForwardCtx&) {
  return linear(x, weight, bias);
}

void LinearLayer::register_params(const std::string& prefix, ParamRegistry& reg) {
  reg.add(prefix + ".w", weight, ParamKind::FullPrecision);
  reg.add(prefix + ".b", bias, ParamKind::FullPrecision);
}

ResidualBlock::ResidualBlock(std::int64_t in_ch, std::int64_t out_ch, int stride,
                             WeightMode mode, int q_w, int q_a, std::uint64_t seed)
    : in_ch_(in_ch), out_ch_(out_ch), stride_(stride), relu_(q_a == 32) {
  aq1_ = std::make_unique<ActQuantLayer>(q_a);
  aq2_ = std::make_unique<ActQuantLayer>(q_a);
  conv1_ = std::make_unique<ConvLayer>(in_ch, out_ch, 3, stride, 1, mode, q_w, false,
                                       Rng::mix(seed ^ 0x11));
  conv2_ = std::make_unique<ConvLayer>(out_ch, out_ch, 3, 1, 1, mode, q_w, false,
                                       Rng::mix(seed ^ 0x22));
  sbn1_ = std::make_unique<SbnWrap>(out_ch);
  sbn2_ = std::make_unique<SbnWrap>(out_ch);
}

Tensor ResidualBlock::forward(const Tensor& x, const ForwardCtx& ctx) {
  // The shortcut carries the unquantized activation.
  Tensor shortcut = (stride_ != 1 || in_ch_ != out_ch_)
                        ? subsample_pad_channels(x, stride_, out_ch_)
                        : x;
  Tensor h = aq1_->forward(x, ctx);
  h = conv1_->forward(h, ctx);
  h = sbn1_->forward(h, ctx);
  if (relu_) h = relu(h);
  h = aq2_->forward(h, ctx);
  h = conv2_->forward(h, ctx);
  h = sbn2_->forward(h, ctx);
  h = add(h, shortcut);
  if (relu_) h = relu(h);
  return h;
}

void ResidualBlock::visit(const std::string& prefix,
                          const std::function<void(const std::string&, Layer&)>& fn) {
  fn(prefix, *this);
  aq1_->visit(prefix + ".aq1", fn);
  conv1_->visit(prefix + ".conv1", fn);
  sbn1_->visit(prefix + ".sbn1", fn);
  aq2_->visit(prefix + ".aq2", fn);
  conv2_->visit(prefix + ".conv2", fn);
  sbn2_->visit(prefix + ".sbn2", fn);
}

Tensor Network::forward(const Tensor& x, const ForwardCtx& ctx) {
  Tensor h = x;
  for (auto& layer : layers) h = layer->forward(h, ctx);
  return h;
}

void Network::for_each_layer(const std::function<void(const std::string&, Layer&)>& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i]->visit("l" + std::to_string(i), fn);
  }
}

void Network::finalize() {
  params_ = ParamRegistry{};
  for_each_layer([this](const std::string& name, Layer& layer) {
    layer.register_params(name, params_);
  });
}

std::vector<std::pair<std::string, SearchableWeight*>> Network::searchable_weights() {
  std::vector<std::pair<std::string, SearchableWeight*>> out;
  for_each_layer([&out](const std::string& name, Layer& layer) {
    if (auto* conv = dynamic_cast<ConvLayer*>(&layer)) {
      if (SearchableWeight* sw = conv->searchable()) out.emplace_back(name, sw);
    }
  });
  return out;
}

std::vector<std::pair<std::string, SteWeight*>> Network::ste_weights() {
  std::vector<std::pair<std::string, SteWeight*>> out;
  for_each_layer([&out](const std::string& name, Layer& layer) {
    if (auto* conv = dynamic_cast<ConvLayer*>(&layer)) {
      if (SteWeight* w = conv->ste()) out.emplace_back(name, w);
    }
  });
  return out;
}

std::vector<std::pair<std::string, SbnLayer*>> Network::sbn_layers() {
  std::vector<std::pair<std::string, SbnLayer*>> out;
  for_each_layer([&out](const std::string& name, Layer& layer) {
    if (auto* wrap = dynamic_cast<SbnWrap*>(&layer)) out.emplace_back(name, &wrap->sbn());
  });
  return out;
}

bool Network::has_searchable() { return !searchable_weights().empty(); }

ArchInfo arch_info(const std::string& arch) {
  if (arch == "mnist_cnn") return {1, 28, 10};
  if (arch == "vgg_small") return {3, 32, 10};
  if (arch == "resnet20") return {3, 32, 10};
  throw std::invalid_argument("arch: unknown architecture '" + arch + "'");
}

namespace {

void check_bits(int q, const char* what) {
  if (!valid_bitwidth(q)) {
    throw std::invalid_argument(std::string(what) + " bitwidth must be one of {1,2,4,8,32}, got " +
                                std::to_string(q));
  }
}

std::uint64_t lseed(std::uint64_t seed, int i) {
  return Rng::mix(seed ^ (0x5151ull + 977ull * static_cast<std::uint64_t>(i)));
}

Network build_mnist_cnn(int q_w, int q_a, WeightMode mode, std::uint64_t seed) {
  Network net;
  int s = 0;
  // First conv stays full precision; no activation quantizer ahead of it.
  net.layers.push_back(std::make_unique<ConvLayer>(1, 16, 3, 1, 1, WeightMode::Fp32, 32, true,
                                                   lseed(seed, s++)));
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  net.layers.push_back(std::make_unique<ConvLayer>(16, 32, 3, 1, 1, mode, q_w, false,
                                                   lseed(seed, s++)));
  net.layers.push_back(std::make_unique<SbnWrap>(32));
  net.layers.push_back(std::make_unique<MaxPoolLayer>(2, 2));
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  net.layers.push_back(std::make_unique<ConvLayer>(32, 32, 3, 1, 1, mode, q_w, false,
                                                   lseed(seed, s++)));
  net.layers.push_back(std::make_unique<SbnWrap>(32));
  net.layers.push_back(std::make_unique<MaxPoolLayer>(2, 2));
  net.layers.push_back(std::make_unique<FlattenLayer>());
  net.layers.push_back(std::make_unique<LinearLayer>(32 * 7 * 7, 10, lseed(seed, s++)));
  return net;
}

Network build_vgg_small(int q_w, int q_a, WeightMode mode, std::uint64_t seed) {
  Network net;
  const bool relu = q_a == 32;
  int s = 0;
  auto conv = [&](std::int64_t in, std::int64_t out, WeightMode m, int q) {
    net.layers.push_back(std::make_unique<ConvLayer>(in, out, 3, 1, 1, m, q, false,
                                                     lseed(seed, s++)));
  };
  auto block_tail = [&](std::int64_t ch, bool pool) {
    net.layers.push_back(std::make_unique<SbnWrap>(ch));
    if (relu) net.layers.push_back(std::make_unique<ReluLayer>());
    if (pool) net.layers.push_back(std::make_unique<MaxPoolLayer>(2, 2));
  };
  conv(3, 128, WeightMode::Fp32, 32);
  block_tail(128, false);
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  conv(128, 128, mode, q_w);
  block_tail(128, true);
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  conv(128, 256, mode, q_w);
  block_tail(256, false);
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  conv(256, 256, mode, q_w);
  block_tail(256, true);
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  conv(256, 512, mode, q_w);
  block_tail(512, false);
  net.layers.push_back(std::make_unique<ActQuantLayer>(q_a));
  conv(512, 512, mode, q_w);
  block_tail(512, true);
  net.layers.push_back(std::make_unique<FlattenLayer>());
  net.layers.push_back(std::make_unique<LinearLayer>(512 * 4 * 4, 10, lseed(seed, s++)));
  return net;
}

Network build_resnet20(int q_w, int q_a, WeightMode mode, std::uint64_t seed) {
  Network net;
  int s = 0;
  net.layers.push_back(std::make_unique<ConvLayer>(3, 16, 3, 1, 1, WeightMode::Fp32, 32, false,
                                                   lseed(seed, s++)));
  net.layers.push_back(std::make_unique<SbnWrap>(16));
  if (q_a == 32) net.layers.push_back(std::make_unique<ReluLayer>());
  const std::int64_t widths[3] = {16, 32, 64};
  std::int64_t in_ch = 16;
  for (int stage = 0; stage < 3; ++stage) {
    for (int block = 0; block < 3; ++block) {
      const int stride = (stage > 0 && block == 0) ? 2 : 1;
      net.layers.push_back(std::make_unique<ResidualBlock>(in_ch, widths[stage], stride, mode,
                                                           q_w, q_a, lseed(seed, s++)));
      in_ch = widths[stage];
    }
  }
  net.layers.push_back(std::make_unique<GlobalAvgPoolLayer>());
  net.layers.push_back(std::make_unique<LinearLayer>(64, 10, lseed(seed, s++)));
  return net;
}

}  // namespace

Network build_network(const std::string& arch, int q_w, int q_a, WeightMode mode,
                      std::uint64_t seed) {
  check_bits(q_w, "weight");
  check_bits(q_a, "activation");
  Network net;
  if (arch == "mnist_cnn") {
    net = build_mnist_cnn(q_w, q_a, mode, seed);
  } else if (arch == "vgg_small") {
    net = build_vgg_small(q_w, q_a, mode, seed);
  } else if (arch == "resnet20") {
    net = build_resnet20(q_w, q_a, mode, seed);
  } else {
    throw std::invalid_argument("arch: unknown architecture '" + arch + "'");
  }
  net.arch = arch;
  net.q_w = q_w;
  net.q_a = q_a;
  net.mode = q_w == 32 ? WeightMode::Fp32 : mode;
  net.finalize();
  return net;
}

}  // namespace slb
