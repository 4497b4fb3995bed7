// SPDX-License-Identifier: Apache-2.0
#include "ctquant/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/log.hpp"
#include "ctquant/metrics.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

constexpr int kScoreChunk = 256;

std::vector<FusionInput> inputs_of(const FusionModel& model, const std::vector<FeatureRecord>& records,
                                   std::size_t begin, std::size_t end) {
  std::vector<FusionInput> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const FeatureRecord& r = records[i];
    out.push_back(to_fusion_input(model.normalizer ? apply_normalizer(*model.normalizer, r) : r,
                                  model.config.n_biomarkers));
  }
  return out;
}

std::vector<double> logits_of(const FusionModel& model, const std::vector<FeatureRecord>& records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (std::size_t b = 0; b < records.size(); b += kScoreChunk) {
    const std::size_t e = std::min(records.size(), b + kScoreChunk);
    Tape t;
    const FusionVars fv = forward(t, model, make_batch(inputs_of(model, records, b, e)), nullptr, false);
    const auto& v = t.value(fv.logits).v;
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Mean BCE from logits, same formulation as the tape loss.
double mean_bce(const std::vector<double>& logits, const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    s += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<double>(logits.size());
}

void require_classes(const std::vector<int>& labels, const char* split) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size())) {
    throw Error(ErrorCode::NoPositives, std::string(split) + " split needs both classes");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || batch_size < 1 || epochs < 0 || patience < 1 || !(beta1 >= 0 && beta1 < 1) ||
      !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0)) {
    throw Error(ErrorCode::InvalidArgument, "training hyperparameters must be positive");
  }
}

std::vector<int> labels_of(const std::vector<FeatureRecord>& records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.label) throw Error(ErrorCode::InvalidArgument, "record " + r.scan_id + " has no label");
    out.push_back(*r.label);
  }
  return out;
}

std::vector<double> score_records(const FusionModel& model, const std::vector<FeatureRecord>& records) {
  std::vector<double> p = logits_of(model, records);
  for (double& x : p) x = sigmoid(x);
  return p;
}

TrainResult train(const FusionModel& initial, const std::vector<FeatureRecord>& train_records,
                  const std::vector<FeatureRecord>& val_records, const TrainConfig& cfg) {
  cfg.validate();
  const std::vector<int> y_train = labels_of(train_records), y_val = labels_of(val_records);
  require_classes(y_train, "training");
  require_classes(y_val, "validation");

  FusionModel model = initial;
  if (!model.normalizer) model.normalizer = fit_normalizer(train_records);
  const std::vector<FusionInput> inputs = inputs_of(model, train_records, 0, train_records.size());

  auto validate_model = [&](int epoch, double train_loss) {
    const std::vector<double> logits = logits_of(model, val_records);
    std::vector<double> p(logits.size());
    std::transform(logits.begin(), logits.end(), p.begin(), sigmoid);
    return EpochStats{epoch, train_loss, mean_bce(logits, y_val), roc_auc(p, y_val)};
  };

  TrainResult result;
  result.history.push_back(validate_model(0, mean_bce(logits_of(model, train_records), y_train)));
  result.model = model;
  result.best_val_auc = result.history.back().val_auc;

  std::vector<Tensor2> m1, m2;
  for (const auto& p : model.params) {
    m1.emplace_back(p.rows, p.cols);
    m2.emplace_back(p.rows, p.cols);
  }
  long step = 0;
  std::vector<std::size_t> order(train_records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    int batch_index = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<FusionInput> batch_inputs;
      Tensor2 targets(static_cast<int>(e - b), 1);
      for (std::size_t i = b; i < e; ++i) {
        batch_inputs.push_back(inputs[order[i]]);
        targets.v[i - b] = y_train[order[i]];
      }
      const auto masks = draw_dropout_masks(
          model.config, targets.rows,
          mix_seed(mix_seed(cfg.seed ^ 0x64726f70ULL, static_cast<std::uint64_t>(epoch)),
                   static_cast<std::uint64_t>(batch_index)));
      Tape tape;
      const FusionVars fv = forward(tape, model, make_batch(batch_inputs), &masks, true);
      const Var loss = tape.bce_with_logits(fv.logits, targets);
      tape.backward(loss);
      loss_sum += tape.value(loss).v[0] * targets.rows;

      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < model.params.size(); ++k) {
        const Tensor2& g = tape.grad(fv.params[k]);
        auto& p = model.params[k].v;
        auto& a = m1[k].v;
        auto& s = m2[k].v;
        for (std::size_t i = 0; i < p.size(); ++i) {
          a[i] = cfg.beta1 * a[i] + (1 - cfg.beta1) * g.v[i];
          s[i] = cfg.beta2 * s[i] + (1 - cfg.beta2) * g.v[i] * g.v[i];
          p[i] -= cfg.learning_rate * (a[i] / c1) / (std::sqrt(s[i] / c2) + cfg.adam_eps);
        }
      }
    }

    const EpochStats stats = validate_model(epoch, loss_sum / static_cast<double>(order.size()));
    result.history.push_back(stats);
    logger().debug("epoch {} train_loss {:.6f} val_auc {:.6f}", epoch, stats.train_loss, stats.val_auc);
    if (stats.val_auc > result.best_val_auc) {
      result.best_val_auc = stats.val_auc;
      result.best_epoch = epoch;
      result.model = model;
    } else if (epoch - result.best_epoch >= cfg.patience) {
      logger().info("early stop at epoch {} (best {})", epoch, result.best_epoch);
      break;
    }
  }
  return result;
}

std::string history_to_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,val_loss,val_auc\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch) + "," + format_double(h.train_loss) + "," + format_double(h.val_loss) + "," +
           format_double(h.val_auc) + "\n";
  }
  return out;
}

}  // namespace ctquant
