// Central finite-difference verification of analytic gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deepbirads/model.hpp"
#include "deepbirads/train.hpp"
#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct GradCheckGroup {
  std::string name;
  std::size_t count = 0;
  double max_abs_error = 0.0;
  double scale = 0.0;  // largest |gradient| in the group, analytic or numeric
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst_rel_error = 0.0;
  std::string worst_group;

  bool passed(double tolerance) const { return worst_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Groups whose gradients are all below this are compared absolutely.
  double scale_floor = 1e-6;
};

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
/// every tensor. Relative error of a group is the worst absolute discrepancy
/// divided by the group's gradient scale.
inline GradCheckReport gradient_check(std::vector<NamedTensor> params, const std::function<Tensor()>& loss_fn,
                                      const GradCheckOptions& opt = {}) {
  for (auto& p : params) p.tensor.zero_grad();
  backward(loss_fn());
  GradCheckReport report;
  for (auto& p : params) {
    GradCheckGroup g{p.name, p.tensor.numel()};
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    if (analytic.size() != p.tensor.numel()) analytic.assign(p.tensor.numel(), 0.0);
    auto w = p.tensor.mutable_data();
    std::vector<double> numeric(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      auto at = [&](double offset) {
        w[i] = orig + offset;
        return loss_fn().item();
      };
      numeric[i] = (at(opt.step) - at(-opt.step)) / (2.0 * opt.step);
      w[i] = orig;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      g.max_abs_error = std::max(g.max_abs_error, std::abs(analytic[i] - numeric[i]));
      g.scale = std::max({g.scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    g.rel_error = g.max_abs_error / std::max(g.scale, opt.scale_floor);
    if (g.rel_error >= report.worst_rel_error) {
      report.worst_rel_error = g.rel_error;
      report.worst_group = g.name;
    }
    report.groups.push_back(std::move(g));
  }
  return report;
}

/// The smallest configuration the end-to-end check runs on: N=2, L=8,
/// N_Q=2, d0=2, 32x32 views and the seven mass descriptor classes.
inline ModelConfig minimal_config() {
  ModelConfig c;
  c.layers = 2;
  c.latent = 8;
  c.queries = 2;
  c.base_channels = 2;
  c.n_bands = 2;
  c.image_height = c.image_width = 32;
  c.vocab_size = 7;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

/// End-to-end check of every model parameter on one random two-lesion case.
inline GradCheckReport model_gradient_check(const ModelConfig& cfg, std::uint64_t input_seed = 11,
                                            const GradCheckOptions& opt = {}) {
  DeepBiradsModel model(cfg);
  Rng rng(input_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto image = [&] {
    std::vector<double> v(cfg.image_height * cfg.image_width);
    for (auto& x : v) x = unif(rng);
    return Tensor::from({1, cfg.image_height, cfg.image_width}, std::move(v));
  };
  const Tensor cc = image(), mlo = image();
  LesionDescriptorSet attrs;
  for (std::size_t l = 0; l < 2; ++l) {
    DescriptorVector d{std::vector<double>(cfg.latent, 0.0)};
    d.values[rng() % cfg.vocab_size] = 1.0;
    d.values[rng() % cfg.vocab_size] = 1.0;
    attrs.lesions.push_back(std::move(d));
  }
  const int label = 1;
  return gradient_check(model.parameters(),
                        [&] { return cross_entropy(model.forward(cc, mlo, attrs, false), label); }, opt);
}

}  // namespace deepbirads
