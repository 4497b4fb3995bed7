// SPDX-License-Identifier: Apache-2.0
//
// Central-difference check of the fusion loss gradient with respect to every
// model parameter. Shared by the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ctquant/fusion.hpp"
#include "ctquant/rng.hpp"

namespace ctquant::testing {

inline FusionConfig ToyConfig(std::uint64_t seed) {
  FusionConfig c;
  c.n_biomarkers = 3;
  c.embed = 4;
  c.deep_dim = 6;
  c.heads = 2;
  c.head_dim = 2;
  c.encoder_hidden = 5;
  c.dropout = 0.25;
  c.seed = seed;
  return c;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |numeric - analytic| / max(|numeric|, |analytic|), with both gradients
/// below `floor` counted as agreement.
inline GradCheck CheckFusionGradient(const FusionConfig& config, int batch, std::uint64_t seed, double eps = 1e-5,
                                     double floor = 1e-7) {
  FusionModel model = init_model(config);
  Rng rng(mix_seed(seed, 1));
  std::vector<FusionInput> inputs(static_cast<std::size_t>(batch));
  Tensor2 targets(batch, 1);
  for (int b = 0; b < batch; ++b) {
    for (int d = 0; d < config.deep_dim; ++d) inputs[b].x1.push_back(rng.normal());
    for (int i = 0; i < config.n_biomarkers; ++i) inputs[b].biomarkers.push_back(rng.normal());
    targets.v[b] = b % 2;
  }
  const FusionBatch fb = make_batch(inputs);
  const auto masks = draw_dropout_masks(config, batch, mix_seed(seed, 2));

  auto loss_of = [&](const FusionModel& m) {
    Tape t;
    const FusionVars fv = forward(t, m, fb, &masks, false);
    return t.value(t.bce_with_logits(fv.logits, targets)).v[0];
  };

  Tape tape;
  const FusionVars fv = forward(tape, model, fb, &masks, true);
  tape.backward(tape.bce_with_logits(fv.logits, targets));

  GradCheck out;
  for (std::size_t k = 0; k < model.params.size(); ++k) {
    const Tensor2 analytic = tape.grad(fv.params[k]);
    for (std::size_t i = 0; i < model.params[k].size(); ++i) {
      const double saved = model.params[k].v[i];
      model.params[k].v[i] = saved + eps;
      const double fp = loss_of(model);
      model.params[k].v[i] = saved - eps;
      const double fm = loss_of(model);
      model.params[k].v[i] = saved;
      const double numeric = (fp - fm) / (2 * eps);
      const double scale = std::max(std::abs(numeric), std::abs(analytic.v[i]));
      const double err = scale < floor ? 0.0 : std::abs(numeric - analytic.v[i]) / scale;
      out.max_rel_error = std::max(out.max_rel_error, err);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace ctquant::testing
