// SPDX-License-Identifier: Apache-2.0
#include "ctquant/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

using ojson = nlohmann::ordered_json;

// Positions of each parameter group in FusionModel::params.
struct Layout {
  int tokens, heads;
  int enc(int i, int k) const { return 4 * i + k; }  // W1 b1 W2 b2
  int grn(int i, int k) const { return 4 * tokens + 8 * i + k; }  // W1 b1 W2 b2 Wg bg gain bias
  int attn(int h, int k) const { return 12 * tokens + 3 * h + k; }  // Wq Wk Wv
  int wo() const { return 12 * tokens + 3 * heads; }
  int contrib_w() const { return wo() + 1; }
  int contrib_b() const { return wo() + 2; }
  int cls_w() const { return wo() + 3; }
  int cls_b() const { return wo() + 4; }
};

Layout layout_of(const FusionConfig& c) { return {c.tokens(), c.heads}; }

std::vector<Var> bind(Tape& tape, const FusionModel& model, bool track_grad) {
  std::vector<Var> p;
  p.reserve(model.params.size());
  for (const auto& t : model.params) p.push_back(tape.leaf(t, track_grad));
  return p;
}

Var affine(Tape& t, Var x, Var w, Var b) { return t.add_row(t.matmul(x, w), b); }

// Encoders: x_i (B x in_i) -> e_i (B x L).
std::vector<Var> encode_vars(Tape& t, const Layout& lay, const std::vector<Var>& p, const std::vector<Var>& xs) {
  std::vector<Var> e;
  for (int i = 0; i < lay.tokens; ++i) {
    const Var h = t.elu(affine(t, xs[i], p[lay.enc(i, 0)], p[lay.enc(i, 1)]));
    e.push_back(affine(t, h, p[lay.enc(i, 2)], p[lay.enc(i, 3)]));
  }
  return e;
}

// GRN_i(e) = LayerNorm(GLU(eta) + e), eta = Dropout(FC(ELU(FC(e)))).
std::vector<Var> grn_vars(Tape& t, const Layout& lay, const std::vector<Var>& p, const std::vector<Var>& e,
                          const std::vector<Tensor2>* masks) {
  std::vector<Var> g;
  for (int i = 0; i < lay.tokens; ++i) {
    const Var a = t.elu(affine(t, e[i], p[lay.grn(i, 0)], p[lay.grn(i, 1)]));
    Var eta = affine(t, a, p[lay.grn(i, 2)], p[lay.grn(i, 3)]);
    if (masks != nullptr) eta = t.dropout(eta, (*masks)[i]);
    const Var gated = t.glu(affine(t, eta, p[lay.grn(i, 4)], p[lay.grn(i, 5)]));
    const Var norm = t.layer_norm_rows(t.add(gated, e[i]));
    g.push_back(t.add_row(t.mul_row(norm, p[lay.grn(i, 6)]), p[lay.grn(i, 7)]));
  }
  return g;
}

struct InteractVars {
  std::vector<Var> G;                       // per record, (N+1) x L
  std::vector<std::vector<Var>> attention;  // per record, per head
  Var m, s;
};

// Rows of the N+1 GRN outputs regrouped per record, attended over as tokens.
InteractVars interact_vars(Tape& t, const Layout& lay, const FusionConfig& cfg, const std::vector<Var>& p,
                           const std::vector<Var>& g) {
  const int B = t.value(g[0]).rows;
  const int T = lay.tokens;
  InteractVars out;
  for (int b = 0; b < B; ++b) {
    std::vector<Var> rows;
    for (int i = 0; i < T; ++i) rows.push_back(B == 1 ? g[i] : t.slice_rows(g[i], b, b + 1));
    out.G.push_back(t.concat_rows(rows));
  }
  const Var stacked = B == 1 ? out.G[0] : t.concat_rows(out.G);  // B(N+1) x L
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  std::vector<Var> q, k, v;
  for (int h = 0; h < cfg.heads; ++h) {
    q.push_back(t.matmul(stacked, p[lay.attn(h, 0)]));
    k.push_back(t.matmul(stacked, p[lay.attn(h, 1)]));
    v.push_back(t.matmul(stacked, p[lay.attn(h, 2)]));
  }
  std::vector<Var> heads_out;  // per record, (N+1) x heads*dk
  out.attention.resize(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    std::vector<Var> per_head;
    for (int h = 0; h < cfg.heads; ++h) {
      const Var qb = B == 1 ? q[h] : t.slice_rows(q[h], b * T, (b + 1) * T);
      const Var kb = B == 1 ? k[h] : t.slice_rows(k[h], b * T, (b + 1) * T);
      const Var vb = B == 1 ? v[h] : t.slice_rows(v[h], b * T, (b + 1) * T);
      const Var w = t.softmax_rows(t.scale(t.matmul(qb, t.transpose(kb)), inv_sqrt_dk));
      out.attention[b].push_back(w);
      per_head.push_back(t.matmul(w, vb));
    }
    heads_out.push_back(cfg.heads == 1 ? per_head[0] : t.concat_cols(per_head));
  }
  const Var all_heads = B == 1 ? heads_out[0] : t.concat_rows(heads_out);  // B(N+1) x heads*dk
  const Var projected = t.matmul(all_heads, p[lay.wo()]);                  // B(N+1) x L
  out.m = t.reshape(projected, B, T * cfg.embed);
  out.s = t.softmax_rows(affine(t, out.m, p[lay.contrib_w()], p[lay.contrib_b()]));
  return out;
}

// c_b = s_b G_b, logit = c Wy + by.
std::pair<Var, Var> classify_vars(Tape& t, const Layout& lay, const std::vector<Var>& p, Var s,
                                  const std::vector<Var>& G) {
  const int B = static_cast<int>(G.size());
  std::vector<Var> cs;
  for (int b = 0; b < B; ++b) cs.push_back(t.matmul(B == 1 ? s : t.slice_rows(s, b, b + 1), G[b]));
  const Var c = B == 1 ? cs[0] : t.concat_rows(cs);
  return {c, affine(t, c, p[lay.cls_w()], p[lay.cls_b()])};
}

std::vector<Var> input_vars(Tape& t, const FusionBatch& batch) {
  std::vector<Var> xs = {t.leaf(batch.x1)};
  for (const auto& b : batch.biomarkers) xs.push_back(t.leaf(b));
  return xs;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

ojson tensor_json(const Tensor2& t) {
  ojson o;
  o["rows"] = t.rows;
  o["cols"] = t.cols;
  o["data"] = t.v;
  return o;
}

Tensor2 tensor_from_json(const nlohmann::json& o) {
  return Tensor2(o.at("rows").get<int>(), o.at("cols").get<int>(), o.at("data").get<std::vector<double>>());
}

constexpr std::string_view kHashKey = ",\n  \"sha256\": \"";

}  // namespace

void FusionConfig::validate() const {
  if (n_biomarkers < 1 || n_biomarkers > static_cast<int>(kBiomarkerCount) || embed < 1 || deep_dim < 1 ||
      heads < 1 || head_dim < 1 || encoder_hidden < 1) {
    throw Error(ErrorCode::InvalidArgument, "fusion widths must be positive and N <= 18");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorCode::InvalidArgument, "dropout must lie in [0, 1)");
}

FusionInput to_fusion_input(const FeatureRecord& normalized, int n_biomarkers) {
  FusionInput in;
  in.x1 = normalized.x1;
  for (int i = 0; i < n_biomarkers; ++i) {
    const auto& f = normalized.biomarkers.fields[static_cast<std::size_t>(i)];
    in.biomarkers.push_back(f.is_ok() ? f.value : 0.0);
  }
  return in;
}

const Tensor2& FusionModel::param(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw Error(ErrorCode::InvalidArgument, "no parameter " + name);
  return params[static_cast<std::size_t>(it - names.begin())];
}

Tensor2& FusionModel::param(const std::string& name) {
  return const_cast<Tensor2&>(static_cast<const FusionModel&>(*this).param(name));
}

std::size_t FusionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : params) n += t.size();
  return n;
}

std::string FusionModel::version_hash() const {
  std::string bytes;
  const FusionConfig& c = config;
  for (long long x : {static_cast<long long>(c.n_biomarkers), static_cast<long long>(c.embed),
                      static_cast<long long>(c.deep_dim), static_cast<long long>(c.heads),
                      static_cast<long long>(c.head_dim), static_cast<long long>(c.encoder_hidden)}) {
    bytes += std::to_string(x) + ";";
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    bytes += names[i] + ":";
    for (double x : params[i].v) {
      std::uint64_t u;
      std::memcpy(&u, &x, sizeof u);
      for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
    }
  }
  return sha256_hex(bytes);
}

FusionModel init_model(const FusionConfig& config) {
  config.validate();
  FusionModel m;
  m.config = config;
  const int L = config.embed, H = config.encoder_hidden, T = config.tokens(), dk = config.head_dim;
  auto add = [&](std::string name, int rows, int cols, int fan_in) {
    Rng rng(mix_seed(config.seed, m.params.size()));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor2 t(rows, cols);
    for (double& x : t.v) x = rng.uniform(-bound, bound);
    m.names.push_back(std::move(name));
    m.params.push_back(std::move(t));
  };
  auto add_const = [&](std::string name, int cols, double value) {
    m.names.push_back(std::move(name));
    m.params.emplace_back(1, cols, value);
  };
  for (int i = 0; i < T; ++i) {
    const int in = i == 0 ? config.deep_dim : 1;
    const std::string p = "enc" + std::to_string(i) + ".";
    add(p + "W1", in, H, in);
    add(p + "b1", 1, H, in);
    add(p + "W2", H, L, H);
    add(p + "b2", 1, L, H);
  }
  for (int i = 0; i < T; ++i) {
    const std::string p = "grn" + std::to_string(i) + ".";
    add(p + "W1", L, L, L);
    add(p + "b1", 1, L, L);
    add(p + "W2", L, L, L);
    add(p + "b2", 1, L, L);
    add(p + "Wg", L, 2 * L, L);
    add(p + "bg", 1, 2 * L, L);
    add_const(p + "gain", L, 1.0);
    add_const(p + "bias", L, 0.0);
  }
  for (int h = 0; h < config.heads; ++h) {
    add("attn.Wq" + std::to_string(h), L, dk, L);
    add("attn.Wk" + std::to_string(h), L, dk, L);
    add("attn.Wv" + std::to_string(h), L, dk, L);
  }
  add("attn.Wo", config.heads * dk, L, config.heads * dk);
  add("contrib.W", T * L, T, T * L);
  add("contrib.b", 1, T, T * L);
  add("cls.W", L, 1, L);
  add("cls.b", 1, 1, L);
  return m;
}

std::vector<std::string> attribution_names(const FusionConfig& config) {
  std::vector<std::string> names = {"deep_features"};
  for (int i = 0; i < config.n_biomarkers; ++i) names.emplace_back(kBiomarkerNames[static_cast<std::size_t>(i)]);
  return names;
}

FusionBatch make_batch(const std::vector<FusionInput>& inputs) {
  if (inputs.empty()) throw Error(ErrorCode::ShapeMismatch, "empty batch");
  const int B = static_cast<int>(inputs.size());
  const int D = static_cast<int>(inputs[0].x1.size());
  const int N = static_cast<int>(inputs[0].biomarkers.size());
  FusionBatch batch;
  batch.x1 = Tensor2(B, D);
  batch.biomarkers.assign(static_cast<std::size_t>(N), Tensor2(B, 1));
  for (int b = 0; b < B; ++b) {
    const auto& in = inputs[static_cast<std::size_t>(b)];
    if (static_cast<int>(in.x1.size()) != D || static_cast<int>(in.biomarkers.size()) != N) {
      throw Error(ErrorCode::ShapeMismatch, "batch records differ in width");
    }
    std::copy(in.x1.begin(), in.x1.end(), batch.x1.v.begin() + static_cast<std::ptrdiff_t>(b) * D);
    for (int i = 0; i < N; ++i) batch.biomarkers[static_cast<std::size_t>(i)].v[b] = in.biomarkers[i];
  }
  return batch;
}

std::vector<Tensor2> draw_dropout_masks(const FusionConfig& config, int batch, std::uint64_t seed) {
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - config.dropout);
  std::vector<Tensor2> masks;
  for (int i = 0; i < config.tokens(); ++i) {
    Tensor2 m(batch, config.embed);
    for (double& x : m.v) x = rng.uniform() < config.dropout ? 0.0 : keep_scale;
    masks.push_back(std::move(m));
  }
  return masks;
}

FusionVars forward(Tape& tape, const FusionModel& model, const FusionBatch& batch,
                   const std::vector<Tensor2>* dropout_masks, bool track_grad) {
  const auto& cfg = model.config;
  if (batch.x1.cols != cfg.deep_dim || static_cast<int>(batch.biomarkers.size()) != cfg.n_biomarkers) {
    throw Error(ErrorCode::ShapeMismatch, "batch widths do not match the model");
  }
  const Layout lay = layout_of(cfg);
  FusionVars out;
  out.params = bind(tape, model, track_grad);
  const auto e = encode_vars(tape, lay, out.params, input_vars(tape, batch));
  const auto g = grn_vars(tape, lay, out.params, e, dropout_masks);
  const auto inter = interact_vars(tape, lay, cfg, out.params, g);
  out.scores = inter.s;
  out.logits = classify_vars(tape, lay, out.params, inter.s, inter.G).second;
  return out;
}

Tensor2 encode(const FusionModel& model, const FusionInput& input) {
  Tape t;
  const Layout lay = layout_of(model.config);
  const auto p = bind(t, model, false);
  const FusionBatch batch = make_batch({input});
  if (batch.x1.cols != model.config.deep_dim || static_cast<int>(batch.biomarkers.size()) != model.config.n_biomarkers) {
    throw Error(ErrorCode::ShapeMismatch, "input widths do not match the model");
  }
  return t.value(t.concat_rows(encode_vars(t, lay, p, input_vars(t, batch))));
}

Tensor2 grn_apply(const FusionModel& model, const Tensor2& E) {
  const Layout lay = layout_of(model.config);
  if (E.rows != lay.tokens || E.cols != model.config.embed) throw Error(ErrorCode::ShapeMismatch, "E has wrong shape");
  Tape t;
  const auto p = bind(t, model, false);
  const Var all = t.leaf(E);
  std::vector<Var> rows;
  for (int i = 0; i < lay.tokens; ++i) rows.push_back(t.slice_rows(all, i, i + 1));
  return t.value(t.concat_rows(grn_vars(t, lay, p, rows, nullptr)));
}

Interaction interact(const FusionModel& model, const Tensor2& G) {
  const Layout lay = layout_of(model.config);
  if (G.rows != lay.tokens || G.cols != model.config.embed) throw Error(ErrorCode::ShapeMismatch, "G has wrong shape");
  Tape t;
  const auto p = bind(t, model, false);
  const Var all = t.leaf(G);
  std::vector<Var> rows;
  for (int i = 0; i < lay.tokens; ++i) rows.push_back(t.slice_rows(all, i, i + 1));
  const auto iv = interact_vars(t, lay, model.config, p, rows);
  Interaction out{t.value(iv.m), t.value(iv.s), {}};
  for (Var a : iv.attention[0]) out.attention.push_back(t.value(a));
  return out;
}

double combine_and_classify(const FusionModel& model, const Tensor2& s, const Tensor2& G) {
  const Layout lay = layout_of(model.config);
  if (s.rows != 1 || s.cols != lay.tokens || G.rows != lay.tokens || G.cols != model.config.embed) {
    throw Error(ErrorCode::ShapeMismatch, "s or G has wrong shape");
  }
  Tape t;
  const auto p = bind(t, model, false);
  return sigmoid(t.value(classify_vars(t, lay, p, t.leaf(s), {t.leaf(G)}).second).v[0]);
}

FusionTrace trace(const FusionModel& model, const FusionInput& input) {
  const auto& cfg = model.config;
  const Layout lay = layout_of(cfg);
  const FusionBatch batch = make_batch({input});
  if (batch.x1.cols != cfg.deep_dim || static_cast<int>(batch.biomarkers.size()) != cfg.n_biomarkers) {
    throw Error(ErrorCode::ShapeMismatch, "input widths do not match the model");
  }
  Tape t;
  const auto p = bind(t, model, false);
  const auto e = encode_vars(t, lay, p, input_vars(t, batch));
  const auto g = grn_vars(t, lay, p, e, nullptr);
  const auto iv = interact_vars(t, lay, cfg, p, g);
  const auto [c, logit] = classify_vars(t, lay, p, iv.s, iv.G);
  FusionTrace tr;
  tr.E = t.value(t.concat_rows(e));
  tr.G = t.value(iv.G[0]);
  for (Var a : iv.attention[0]) tr.attention.push_back(t.value(a));
  tr.m = t.value(iv.m);
  tr.s = t.value(iv.s);
  tr.c = t.value(c);
  tr.logit = t.value(logit).v[0];
  tr.probability = sigmoid(tr.logit);
  return tr;
}

PredictionReport predict(const FusionModel& model, const FeatureRecord& record) {
  const FeatureRecord normalized = model.normalizer ? apply_normalizer(*model.normalizer, record) : record;
  const FusionTrace tr = trace(model, to_fusion_input(normalized, model.config.n_biomarkers));
  PredictionReport r;
  r.scan_id = record.scan_id;
  r.probability = tr.probability;
  r.contributions = tr.s.v;
  r.names = attribution_names(model.config);
  r.model_hash = model.version_hash();
  return r;
}

std::vector<PredictionReport> predict_batch(const FusionModel& model, const std::vector<FeatureRecord>& records) {
  std::vector<PredictionReport> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(predict(model, r));
  return out;
}

std::string predictions_to_json(const std::vector<PredictionReport>& reports) {
  ojson arr = ojson::array();
  for (const auto& r : reports) {
    ojson o;
    o["scan_id"] = r.scan_id;
    o["probability"] = r.probability;
    ojson contrib;
    for (std::size_t i = 0; i < r.names.size(); ++i) contrib[r.names[i]] = r.contributions[i];
    o["contributions"] = std::move(contrib);
    o["model_hash"] = r.model_hash;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

std::string model_to_json(const FusionModel& model) {
  const auto& c = model.config;
  ojson doc;
  doc["format_version"] = kModelFormatVersion;
  doc["config"] = {{"n_biomarkers", c.n_biomarkers}, {"embed", c.embed}, {"deep_dim", c.deep_dim},
                   {"heads", c.heads}, {"head_dim", c.head_dim}, {"encoder_hidden", c.encoder_hidden},
                   {"dropout", c.dropout}, {"seed", c.seed}};
  if (model.normalizer) {
    const auto& n = *model.normalizer;
    doc["normalizer"] = {{"x1_mean", n.x1_mean}, {"x1_std", n.x1_std},
                         {"bio_mean", n.bio_mean}, {"bio_std", n.bio_std}};
  } else {
    doc["normalizer"] = nullptr;
  }
  ojson params;
  for (std::size_t i = 0; i < model.params.size(); ++i) params[model.names[i]] = tensor_json(model.params[i]);
  doc["params"] = std::move(params);
  std::string body = doc.dump(2);
  body.pop_back();  // closing brace
  while (!body.empty() && body.back() == '\n') body.pop_back();
  const std::string digest = sha256_hex(body);
  return body + std::string(kHashKey) + digest + "\"\n}\n";
}

FusionModel model_from_json(const std::string& text) {
  const auto pos = text.rfind(kHashKey);
  if (pos == std::string::npos) throw Error(ErrorCode::HashMismatch, "model file carries no sha256");
  const std::string prefix = text.substr(0, pos);
  const std::string expected_tail = std::string(kHashKey) + sha256_hex(prefix) + "\"\n}\n";
  if (text.compare(pos, std::string::npos, expected_tail) != 0) {
    throw Error(ErrorCode::HashMismatch, "model file content does not match its sha256");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, std::string("model JSON: ") + e.what());
  }
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw Error(ErrorCode::VersionMismatch, "model format_version " + std::to_string(version) + " is not supported");
    }
    const auto& jc = doc.at("config");
    FusionConfig c;
    c.n_biomarkers = jc.at("n_biomarkers").get<int>();
    c.embed = jc.at("embed").get<int>();
    c.deep_dim = jc.at("deep_dim").get<int>();
    c.heads = jc.at("heads").get<int>();
    c.head_dim = jc.at("head_dim").get<int>();
    c.encoder_hidden = jc.at("encoder_hidden").get<int>();
    c.dropout = jc.at("dropout").get<double>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    FusionModel m = init_model(c);
    const auto& jp = doc.at("params");
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      Tensor2 t = tensor_from_json(jp.at(m.names[i]));
      if (!t.same_shape(m.params[i])) throw Error(ErrorCode::MalformedHeader, "parameter " + m.names[i] + " has wrong shape");
      m.params[i] = std::move(t);
    }
    if (jp.size() != m.params.size()) throw Error(ErrorCode::MalformedHeader, "unexpected parameters in model file");
    if (!doc.at("normalizer").is_null()) {
      const auto& jn = doc["normalizer"];
      NormalizationStats n;
      n.x1_mean = jn.at("x1_mean").get<std::vector<double>>();
      n.x1_std = jn.at("x1_std").get<std::vector<double>>();
      n.bio_mean = jn.at("bio_mean").get<std::array<double, kBiomarkerCount>>();
      n.bio_std = jn.at("bio_std").get<std::array<double, kBiomarkerCount>>();
      m.normalizer = std::move(n);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, std::string("model JSON: ") + e.what());
  }
}

void save_model(const FusionModel& model, const std::filesystem::path& path) { write_file(path, model_to_json(model)); }

FusionModel load_model(const std::filesystem::path& path) { return model_from_json(read_file(path)); }

}  // namespace ctquant
