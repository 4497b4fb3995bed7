// SPDX-License-Identifier: Apache-2.0
//
// Minibatch Adam training of the fusion model on binary cross-entropy with
// best-validation-AUC checkpointing.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctquant/features.hpp"
#include "ctquant/fusion.hpp"

namespace ctquant {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 50;
  int patience = 10;  // epochs without a validation-AUC gain before stopping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument.
  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_auc = 0.0;
};

struct TrainResult {
  FusionModel model;  // best-validation checkpoint
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_auc = 0.0;
};

/// Fits the normalizer on `train_records` when the model has none. Records
/// must be labelled. Errors: NoPositives when either split lacks a class,
/// InvalidArgument for unlabelled records.
TrainResult train(const FusionModel& initial, const std::vector<FeatureRecord>& train_records,
                  const std::vector<FeatureRecord>& val_records, const TrainConfig& cfg);

/// Predicted probabilities with dropout off, normalizer applied.
std::vector<double> score_records(const FusionModel& model, const std::vector<FeatureRecord>& records);

std::vector<int> labels_of(const std::vector<FeatureRecord>& records);
std::string history_to_csv(const std::vector<EpochStats>& history);

}  // namespace ctquant
