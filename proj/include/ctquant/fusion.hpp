// SPDX-License-Identifier: Apache-2.0
//
// Joint representation network: per-feature encoders and gated residual
// networks, two-head self-attention over the feature embeddings, softmax
// contribution scores and a logistic head on the score-weighted embedding.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctquant/features.hpp"
#include "ctquant/tensor.hpp"

namespace ctquant {

struct FusionConfig {
  int n_biomarkers = 18;  // N
  int embed = 32;         // L
  int deep_dim = 512;     // D
  int heads = 2;
  int head_dim = 16;      // per-head key/value width
  int encoder_hidden = 64;
  double dropout = 0.5;
  std::uint64_t seed = 0;

  int tokens() const { return n_biomarkers + 1; }
  /// Throws InvalidArgument on non-positive widths or dropout outside [0, 1).
  void validate() const;
};

/// One fusion input: x1 plus N scalar biomarkers, already normalized.
struct FusionInput {
  std::vector<double> x1;
  std::vector<double> biomarkers;
};

/// Takes the first N biomarker values of a normalized record (non-ok fields
/// are already 0 after normalization).
FusionInput to_fusion_input(const FeatureRecord& normalized, int n_biomarkers);

struct FusionModel {
  FusionConfig config;
  /// Parameters in a fixed order; names like "enc3.W1", "grn0.Wg", "attn.Wq1".
  std::vector<std::string> names;
  std::vector<Tensor2> params;
  std::optional<NormalizationStats> normalizer;

  const Tensor2& param(const std::string& name) const;
  Tensor2& param(const std::string& name);
  std::size_t parameter_count() const;
  /// sha256 of the parameter bytes and config; identifies the model version.
  std::string version_hash() const;
};

/// Fan-in uniform initialization, seeded by config.seed.
FusionModel init_model(const FusionConfig& config);

/// Names of the N+1 inputs: "deep_features" then the biomarker names.
std::vector<std::string> attribution_names(const FusionConfig& config);

/// Per-record view of an inference pass.
struct FusionTrace {
  Tensor2 E;                       // (N+1) x L
  Tensor2 G;                       // (N+1) x L
  std::vector<Tensor2> attention;  // per head, (N+1) x (N+1), rows sum to 1
  Tensor2 m;                       // 1 x (N+1)L
  Tensor2 s;                       // 1 x (N+1)
  Tensor2 c;                       // 1 x L
  double logit = 0.0;
  double probability = 0.0;
};

Tensor2 encode(const FusionModel& model, const FusionInput& input);
Tensor2 grn_apply(const FusionModel& model, const Tensor2& E);
struct Interaction {
  Tensor2 m, s;
  std::vector<Tensor2> attention;
};
Interaction interact(const FusionModel& model, const Tensor2& G);
double combine_and_classify(const FusionModel& model, const Tensor2& s, const Tensor2& G);
FusionTrace trace(const FusionModel& model, const FusionInput& input);

struct PredictionReport {
  std::string scan_id;
  double probability = 0.0;
  std::vector<double> contributions;  // N+1, same order as attribution_names
  std::vector<std::string> names;
  std::string model_hash;
};

/// Normalizes with the embedded normalizer when present, then runs the net
/// with dropout off.
PredictionReport predict(const FusionModel& model, const FeatureRecord& record);
std::vector<PredictionReport> predict_batch(const FusionModel& model, const std::vector<FeatureRecord>& records);
std::string predictions_to_json(const std::vector<PredictionReport>& reports);

// ---- tape-level forward, shared by training and gradient checks ----

/// Inputs for a batch of B records.
struct FusionBatch {
  Tensor2 x1;                       // B x D
  std::vector<Tensor2> biomarkers;  // N entries, each B x 1
  int size() const { return x1.rows; }
};
FusionBatch make_batch(const std::vector<FusionInput>& inputs);

/// Inverted-dropout masks for the N+1 GRNs, each B x L.
std::vector<Tensor2> draw_dropout_masks(const FusionConfig& config, int batch, std::uint64_t seed);

struct FusionVars {
  std::vector<Var> params;
  Var logits;         // B x 1
  Var scores;         // B x (N+1)
};

/// Records the forward pass on `tape`. Parameters become leaves that track
/// gradients when `track_grad`. Pass masks to train with dropout.
FusionVars forward(Tape& tape, const FusionModel& model, const FusionBatch& batch,
                   const std::vector<Tensor2>* dropout_masks, bool track_grad);

// ---- model files ----

inline constexpr int kModelFormatVersion = 1;

/// JSON with format_version, config, normalizer, params and a trailing
/// sha256 over every byte that precedes it.
std::string model_to_json(const FusionModel& model);
/// Errors: MalformedHeader, VersionMismatch, HashMismatch.
FusionModel model_from_json(const std::string& text);
void save_model(const FusionModel& model, const std::filesystem::path& path);
FusionModel load_model(const std::filesystem::path& path);

}  // namespace ctquant
