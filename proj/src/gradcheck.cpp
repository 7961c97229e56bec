#include "slb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "slb/model.hpp"
#include "slb/ops.hpp"
#include "slb/rng.hpp"
#include "slb/sbn.hpp"
#include "slb/search.hpp"

namespace slb {

namespace {

double rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0,
                     bool requires_grad = false) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.normal(0.0, scale);
  return Tensor::from_data(shape, std::move(data), requires_grad);
}

std::vector<std::int64_t> probe_indices(std::int64_t n, std::int64_t cap, Rng& rng) {
  std::vector<std::int64_t> idx;
  if (cap <= 0 || n <= cap) {
    idx.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
  }
  std::unordered_set<std::int64_t> seen;
  while (static_cast<std::int64_t>(idx.size()) < cap) {
    const std::int64_t i = rng.below(n);
    if (seen.insert(i).second) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

double gradcheck_max_rel(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double step, std::int64_t sample_cap, std::uint64_t seed) {
  for (Tensor& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("gradcheck: parameter without grad");
    p.mutable_grad();
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
  }

  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    auto data = p.mutable_data();
    for (std::int64_t i : probe_indices(p.numel(), sample_cap, rng)) {
      const double keep = data[static_cast<std::size_t>(i)];
      double fp, fm;
      {
        NoGradGuard ng;
        data[static_cast<std::size_t>(i)] = keep + step;
        fp = loss_fn().item();
        data[static_cast<std::size_t>(i)] = keep - step;
        fm = loss_fn().item();
        data[static_cast<std::size_t>(i)] = keep;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      worst = std::max(worst, rel_error(analytic[pi][static_cast<std::size_t>(i)], numeric));
    }
  }
  return worst;
}

namespace {

GradCheckResult check_binary_broadcast(std::uint64_t seed) {
  Rng rng(seed);
  // Rank-5 broadcast through a mix of elementwise ops.
  Tensor a = random_tensor({2, 3, 1, 4, 2}, rng, 1.0, true);
  Tensor b = random_tensor({1, 3, 2, 1, 2}, rng, 1.0, true);
  Tensor c = random_tensor({4, 2}, rng, 0.5, true);
  auto loss_fn = [&]() {
    Tensor t = mul(add(a, b), add_scalar(square(c), 1.0));
    Tensor u = div(t, add_scalar(exp(mul_scalar(b, 0.1)), 0.5));
    return sum(u);
  };
  return {"elementwise_broadcast", gradcheck_max_rel(loss_fn, {a, b, c})};
}

GradCheckResult check_matmul(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({5, 7}, rng, 1.0, true);
  Tensor w = random_tensor({7, 4}, rng, 1.0, true);
  Tensor b = random_tensor({4}, rng, 1.0, true);
  auto loss_fn = [&]() { return sum(square(linear(x, w, b))); };
  return {"matmul_linear", gradcheck_max_rel(loss_fn, {x, w, b})};
}

GradCheckResult check_conv2d(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({2, 3, 6, 6}, rng, 1.0, true);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.5, true);
  auto loss_fn = [&]() { return sum(square(conv2d(x, w, 1, 1))); };
  double e1 = gradcheck_max_rel(loss_fn, {x, w});
  Tensor x2 = random_tensor({1, 2, 7, 7}, rng, 1.0, true);
  Tensor w2 = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
  auto loss_fn2 = [&]() { return sum(square(conv2d(x2, w2, 2, 0))); };
  return {"conv2d", std::max(e1, gradcheck_max_rel(loss_fn2, {x2, w2}))};
}

GradCheckResult check_pool_and_reductions(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = random_tensor({2, 3, 6, 6}, rng, 1.0, true);
  auto loss_fn = [&]() {
    Tensor p = maxpool2d(x, 2, 2);
    Tensor m = mean(p, 1, true);
    return add(sum(square(m)), mean(global_avg_pool(x)));
  };
  return {"pool_reduce", gradcheck_max_rel(loss_fn, {x})};
}

GradCheckResult check_softmax_ce(std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = random_tensor({4, 6}, rng, 2.0, true);
  std::vector<int> labels{1, 0, 5, 3};
  auto loss_fn = [&]() {
    Tensor s = softmax(z, 1);
    return add(cross_entropy(z, labels), sum(square(s)));
  };
  return {"softmax_cross_entropy", gradcheck_max_rel(loss_fn, {z})};
}

GradCheckResult check_slb_chain(std::uint64_t seed) {
  Rng rng(seed);
  // A -> P -> Wc -> conv -> loss, the full differentiable relaxation path.
  const QuantGrid grid = uniform_grid(2);
  SearchableWeight sw;
  sw.grid = grid;
  sw.logits = random_tensor({grid.size(), 4, 3, 3, 3}, rng, 1.0, true);
  Tensor x = random_tensor({2, 3, 6, 6}, rng, 1.0, true);
  const double tau = 0.7;
  auto loss_fn = [&]() {
    Tensor wc = continuous_weights(sw, tau);
    return sum(square(conv2d(x, wc, 1, 1)));
  };
  return {"slb_logits_to_conv", gradcheck_max_rel(loss_fn, {sw.logits})};
}

GradCheckResult check_sbn(std::uint64_t seed) {
  Rng rng(seed);
  SbnLayer sbn(5);
  Tensor x = random_tensor({4, 5, 3, 3}, rng, 1.5, true);
  // Batch-stat path; running-stat updates are value-level side effects and
  // do not disturb the recorded graph.
  auto loss_fn = [&]() { return sum(square(sbn.forward_continuous(x, true))); };
  return {"sbn_training_path", gradcheck_max_rel(loss_fn, {x, sbn.gamma, sbn.beta})};
}

GradCheckResult check_act_quant(std::uint64_t seed) {
  Rng rng(seed);
  // Probe away from the rounding discontinuities: the STE surrogate is
  // exact for the pass-through mask, which is what we verify.
  std::vector<double> vals(24);
  for (double& v : vals) {
    v = rng.uniform(-0.5, 1.5);
  }
  Tensor a = Tensor::from_data({4, 6}, vals, true);
  auto loss_fn = [&]() { return sum(mul(act_quantize(a, 32), a)); };
  return {"act_quant_passthrough", gradcheck_max_rel(loss_fn, {a})};
}

GradCheckResult check_full_model(std::uint64_t seed) {
  Rng rng(seed);
  Network net = build_network("mnist_cnn", 1, 32, WeightMode::Slb, seed);
  Tensor x = random_tensor({2, 1, 28, 28}, rng, 1.0, false);
  std::vector<int> labels{3, 7};
  ForwardCtx ctx;
  ctx.state = NetState::Continuous;
  ctx.training = true;
  ctx.tau = 2.0;
  std::vector<Tensor> params;
  for (Param& p : net.params().items()) params.push_back(p.tensor);
  auto loss_fn = [&]() { return cross_entropy(net.forward(x, ctx), labels); };
  return {"mnist_cnn_full_loss", gradcheck_max_rel(loss_fn, params, 1e-5, 24, seed)};
}

}  // namespace

std::vector<GradCheckResult> run_gradchecks(const std::string& scope, std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  const bool all = scope == "all";
  if (all || scope == "tensor") {
    out.push_back(check_binary_broadcast(seed + 1));
    out.push_back(check_matmul(seed + 2));
    out.push_back(check_conv2d(seed + 3));
    out.push_back(check_pool_and_reductions(seed + 4));
    out.push_back(check_softmax_ce(seed + 5));
    out.push_back(check_act_quant(seed + 8));
  }
  if (all || scope == "slb_search") {
    out.push_back(check_slb_chain(seed + 6));
  }
  if (all || scope == "sbn") {
    out.push_back(check_sbn(seed + 7));
  }
  if (all || scope == "model") {
    out.push_back(check_full_model(seed + 9));
  }
  if (out.empty()) {
    throw std::invalid_argument("gradcheck: unknown scope '" + scope +
                                "' (expected tensor|slb_search|sbn|model|all)");
  }
  return out;
}

}  // namespace slb
