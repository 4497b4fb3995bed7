// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "ctquant/biomarkers.hpp"
#include "ctquant/digest.hpp"
#include "ctquant/features.hpp"
#include "ctquant/fusion.hpp"
#include "ctquant/log.hpp"
#include "ctquant/metrics.hpp"
#include "ctquant/phantom.hpp"
#include "ctquant/rng.hpp"
#include "ctquant/train.hpp"
#include "ctquant/volume.hpp"

namespace ctquant::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile:
    case ErrorCode::IoFailure:
      return kIo;
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::MalformedHeader:
    case ErrorCode::SizeMismatch:
    case ErrorCode::VersionMismatch:
    case ErrorCode::HashMismatch:
      return kCorrupt;
    case ErrorCode::IllegalLabel:
    case ErrorCode::SchemaMismatch:
    case ErrorCode::DimsMismatch:
      return kMaskMismatch;
    case ErrorCode::EmptyMask:
    case ErrorCode::MultipleComponents:
    case ErrorCode::DegenerateShape:
    case ErrorCode::TooFewPoints:
    case ErrorCode::DegenerateConic:
    case ErrorCode::OutOfBounds:
      return kGeometry;
    case ErrorCode::ArityMismatch:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::DuplicateScanId:
    case ErrorCode::TooFewRecords:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::NonFinite:
    case ErrorCode::NotScalarLoss:
    case ErrorCode::NoPositives:
    case ErrorCode::InvalidArgument:
      return kData;
  }
  return kUnexpected;
}

const std::vector<ContributionGroup>& contribution_groups() {
  static const std::vector<ContributionGroup> groups = {
      {"deep features", {"deep_features"}},
      {"aorta shape", {"AMD", "AMDSTD", "ATI"}},
      {"heart morphology", {"CHR", "CLD", "CSD"}},
      {"pericardial fat", {"PFATV", "PFATM", "PFATSTD"}},
      {"calcification", {"CACS", "CACV"}},
      {"lung texture", {"LLR", "RLR", "LHR", "RHR"}},
      {"aortic calcification", {"ACS", "ACV"}},
      {"cardiothoracic ratio", {"CTR"}},
  };
  return groups;
}

namespace {

ojson default_config() {
  return ojson{
      {"seed", 0},
      {"jobs", 1},
      {"format", nullptr},
      {"model",
       {{"embed", 32}, {"deep_dim", 512}, {"heads", 2}, {"head_dim", 16}, {"encoder_hidden", 64}, {"dropout", 0.5}}},
      {"train", {{"learning_rate", 1e-3}, {"batch_size", 32}, {"epochs", 50}, {"patience", 10}}},
      {"split", {{"train", 0.7}, {"val", 0.15}, {"test", 0.15}}},
      {"evaluate", {{"replicates", 1000}}},
  };
}

template <typename T>
T config_value(const ojson& cfg, std::initializer_list<const char*> keys) {
  const ojson* node = &cfg;
  std::string where;
  for (const char* k : keys) {
    where += where.empty() ? k : std::string(".") + k;
    if (!node->is_object() || !node->contains(k)) throw Error(ErrorCode::MalformedHeader, "config lacks " + where);
    node = &(*node)[k];
  }
  try {
    return node->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::MalformedHeader, "config value " + where + " has the wrong type");
  }
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
  std::string format;
  std::string manifest;
};

/// Effective configuration plus the RunManifest being collected.
class Session {
 public:
  Session(std::string command, const Globals& g)
      : command_(std::move(command)), globals_(g), start_(std::chrono::steady_clock::now()) {
    config_ = default_config();
    if (!g.config_path.empty()) {
      const auto text = read_file(g.config_path);
      ojson file;
      try {
        file = ojson::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::MalformedHeader, "config " + g.config_path + ": " + e.what());
      }
      if (!file.is_object()) throw Error(ErrorCode::MalformedHeader, "config must be a JSON object");
      for (const auto& [key, _] : file.items())
        if (!config_.contains(key)) logger().warn("config key '{}' is not used", key);
      config_.merge_patch(file);
      add_input(g.config_path);
    }
    if (g.seed) config_["seed"] = *g.seed;
    if (g.jobs) config_["jobs"] = *g.jobs;
    if (!g.format.empty()) config_["format"] = g.format;
    seed_ = config_value<std::uint64_t>(config_, {"seed"});
    jobs_ = config_value<int>(config_, {"jobs"});
    if (jobs_ < 1) throw Error(ErrorCode::InvalidArgument, "jobs must be at least 1");
    if (!config_["format"].is_null()) {
      const auto f = config_value<std::string>(config_, {"format"});
      if (f != "csv" && f != "json") throw Error(ErrorCode::InvalidArgument, "format must be csv or json");
    }
  }

  const ojson& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  int jobs() const { return jobs_; }
  const std::string& out() const { return globals_.out; }

  /// Explicit format, else the --out extension, else `fallback`.
  std::string format(std::string_view fallback) const {
    if (!config_["format"].is_null()) return config_["format"].get<std::string>();
    if (!globals_.out.empty()) {
      const auto ext = fs::path(globals_.out).extension().string();
      if (ext == ".json") return "json";
      if (ext == ".csv") return "csv";
    }
    return std::string(fallback);
  }

  fs::path require_out() const {
    if (globals_.out.empty()) throw Error(ErrorCode::InvalidArgument, command_ + " needs --out");
    return globals_.out;
  }

  void add_input(const fs::path& p) {
    inputs_.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  }

  /// Writes `bytes` to `path` and records it as an output.
  void write_output(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, bytes);
    outputs_.push_back({{"path", path.string()}, {"sha256", sha256_hex(bytes)}});
  }

  /// Records a file some other writer produced.
  void record_output(const fs::path& path) {
    outputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
  }

  /// Writes to --out when set, else to `stream`.
  void emit(std::string_view bytes, std::ostream& stream) {
    if (globals_.out.empty()) {
      stream << bytes;
    } else {
      write_output(globals_.out, bytes);
    }
  }

  void set_manifest_default(fs::path p) { manifest_default_ = std::move(p); }

  void finish(std::string_view status, const ojson& failures) {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    ojson m;
    m["command"] = command_;
    m["tool_version"] = kToolVersion;
    m["seed"] = seed_;
    m["config"] = config_;
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    m["status"] = status;
    if (!failures.empty()) m["failures"] = failures;
    m["wall_clock_seconds"] = seconds;
    fs::path path = globals_.manifest;
    if (path.empty()) path = manifest_default_;
    if (path.empty() && !globals_.out.empty()) path = globals_.out + ".manifest.json";
    if (path.empty()) {
      logger().info("run manifest: {}", m.dump());
      return;
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, m.dump(2) + "\n");
  }

 private:
  std::string command_;
  Globals globals_;
  std::chrono::steady_clock::time_point start_;
  ojson config_;
  std::uint64_t seed_ = 0;
  int jobs_ = 1;
  ojson inputs_ = ojson::array();
  ojson outputs_ = ojson::array();
  fs::path manifest_default_;
};

template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

// ---- scan inputs ---------------------------------------------------------------

struct ScanInput {
  std::string scan_id;
  fs::path volume;
  std::optional<fs::path> pericardium, calcium, aorta, lungs;
  std::optional<int> label;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

/// Header `scan_id,volume[,pericardium,calcium,aorta,lungs,label]`; empty
/// cells mean absent. Paths are relative to the list's directory.
std::vector<ScanInput> read_scan_list(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MalformedHeader, path.string() + ": empty scan list");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const auto& h : header) {
    if (h != "scan_id" && h != "volume" && h != "pericardium" && h != "calcium" && h != "aorta" && h != "lungs" &&
        h != "label")
      throw Error(ErrorCode::MalformedHeader, path.string() + ": unknown column " + h);
  }
  if (!col.count("scan_id") || !col.count("volume"))
    throw Error(ErrorCode::MalformedHeader, path.string() + ": needs scan_id and volume columns");
  const auto base = path.parent_path();
  std::vector<ScanInput> scans;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorCode::ArityMismatch, path.string() + ":" + std::to_string(lineno) + ": wrong cell count");
    auto cell = [&](const char* name) -> std::optional<std::string> {
      auto it = col.find(name);
      if (it == col.end() || cells[it->second].empty()) return std::nullopt;
      return cells[it->second];
    };
    auto file = [&](const char* name) -> std::optional<fs::path> {
      auto c = cell(name);
      if (!c) return std::nullopt;
      return base / *c;
    };
    ScanInput s;
    s.scan_id = cell("scan_id").value_or("");
    if (s.scan_id.empty()) throw Error(ErrorCode::MalformedHeader, path.string() + ": empty scan_id");
    auto v = file("volume");
    if (!v) throw Error(ErrorCode::MalformedHeader, path.string() + ": scan " + s.scan_id + " has no volume");
    s.volume = *v;
    s.pericardium = file("pericardium");
    s.calcium = file("calcium");
    s.aorta = file("aorta");
    s.lungs = file("lungs");
    if (auto l = cell("label")) {
      if (*l != "0" && *l != "1") throw Error(ErrorCode::InvalidArgument, "label must be 0 or 1: " + *l);
      s.label = *l == "1" ? 1 : 0;
    }
    scans.push_back(std::move(s));
  }
  std::vector<std::string> ids;
  for (const auto& s : scans) ids.push_back(s.scan_id);
  std::sort(ids.begin(), ids.end());
  if (auto it = std::adjacent_find(ids.begin(), ids.end()); it != ids.end())
    throw Error(ErrorCode::DuplicateScanId, *it);
  return scans;
}

struct ScanFlags {
  std::string scans, volume, pericardium, calcium, aorta, lungs, scan_id;
  std::optional<int> label;
};

void add_scan_flags(CLI::App* cmd, ScanFlags& f) {
  auto* list = cmd->add_option("--scans", f.scans, "CSV scan list for batch mode");
  auto* vol = cmd->add_option("--volume", f.volume, "volume header (single-scan mode)");
  list->excludes(vol);
  cmd->add_option("--pericardium", f.pericardium, "pericardium/heart mask header")->excludes(list);
  cmd->add_option("--calcium", f.calcium, "calcium mask header")->excludes(list);
  cmd->add_option("--aorta", f.aorta, "aorta mask header")->excludes(list);
  cmd->add_option("--lungs", f.lungs, "lung mask header")->excludes(list);
  cmd->add_option("--scan-id", f.scan_id, "scan id (default: volume file stem)")->excludes(list);
}

std::vector<ScanInput> resolve_scans(const ScanFlags& f, Session& session) {
  if (!f.scans.empty()) {
    session.add_input(f.scans);
    return read_scan_list(f.scans);
  }
  if (f.volume.empty()) throw Error(ErrorCode::InvalidArgument, "give --scans or --volume");
  ScanInput s;
  s.volume = f.volume;
  s.scan_id = f.scan_id.empty() ? fs::path(f.volume).stem().string() : f.scan_id;
  auto opt = [](const std::string& p) -> std::optional<fs::path> {
    if (p.empty()) return std::nullopt;
    return fs::path(p);
  };
  s.pericardium = opt(f.pericardium);
  s.calcium = opt(f.calcium);
  s.aorta = opt(f.aorta);
  s.lungs = opt(f.lungs);
  s.label = f.label;
  return {s};
}

std::vector<fs::path> scan_files(const ScanInput& s) {
  std::vector<fs::path> files = {s.volume};
  for (const auto* p : {&s.pericardium, &s.calcium, &s.aorta, &s.lungs})
    if (*p) files.push_back(**p);
  return files;
}

struct LoadedScan {
  CtVolume volume;
  MaskSet masks;
};

LoadedScan load_scan(const ScanInput& s) {
  LoadedScan l;
  l.volume = load_volume(s.volume);
  if (s.pericardium) l.masks.pericardium = load_mask(*s.pericardium, MaskSchema::Pericardium);
  if (s.calcium) l.masks.calcium = load_mask(*s.calcium, MaskSchema::Calcium);
  if (s.aorta) l.masks.aorta = load_mask(*s.aorta, MaskSchema::Aorta);
  if (s.lungs) l.masks.lungs = load_mask(*s.lungs, MaskSchema::Lungs);
  return l;
}

struct BatchFailure {
  std::string scan_id;
  std::string message;
  int code;
};

/// Runs `fn` per scan on `jobs` threads; results keep input order.
template <typename T, typename Fn>
std::vector<std::optional<T>> run_batch(const std::vector<ScanInput>& scans, int jobs, Fn&& fn,
                                        std::vector<BatchFailure>& failures) {
  std::vector<std::optional<T>> results(scans.size());
  std::vector<std::optional<BatchFailure>> errors(scans.size());
  parallel_for(scans.size(), jobs, [&](std::size_t i) {
    try {
      results[i] = fn(scans[i]);
    } catch (const Error& e) {
      errors[i] = BatchFailure{scans[i].scan_id, e.what(), exit_code_for(e.code())};
    } catch (const std::exception& e) {
      errors[i] = BatchFailure{scans[i].scan_id, e.what(), kUnexpected};
    }
  });
  for (auto& e : errors)
    if (e) failures.push_back(std::move(*e));
  return results;
}

/// Reports batch failures and picks the exit code: the error's own class
/// for a single-scan run, kPartial when only part of a batch failed.
int finish_batch(Session& session, const std::vector<BatchFailure>& failures, std::size_t total, std::ostream& err) {
  ojson list = ojson::array();
  for (const auto& f : failures) {
    err << "scan " << f.scan_id << ": " << f.message << "\n";
    list.push_back({{"scan_id", f.scan_id}, {"error", f.message}});
  }
  session.finish(failures.empty() ? "ok" : "failed", list);
  if (failures.empty()) return kOk;
  if (failures.size() == total) return total == 1 ? failures.front().code : kPartial;
  return kPartial;
}

// ---- commands ------------------------------------------------------------------

int cmd_extract(const Globals& g, const ScanFlags& f, std::ostream& out, std::ostream& err) {
  Session session("extract", g);
  const auto scans = resolve_scans(f, session);
  for (const auto& s : scans)
    for (const auto& p : scan_files(s))
      if (fs::exists(p)) session.add_input(p);
  std::vector<BatchFailure> failures;
  const auto results = run_batch<BiomarkerVector>(
      scans, session.jobs(),
      [](const ScanInput& s) {
        const auto l = load_scan(s);
        return extract_all(l.volume, l.masks);
      },
      failures);
  std::vector<ScanBiomarkers> rows;
  for (std::size_t i = 0; i < scans.size(); ++i)
    if (results[i]) rows.push_back({scans[i].scan_id, *results[i]});
  const auto fmt = session.format("csv");
  session.emit(fmt == "json" ? biomarkers_to_json(rows) : biomarkers_to_csv(rows), out);
  return finish_batch(session, failures, scans.size(), err);
}

int cmd_featurize(const Globals& g, const ScanFlags& f, std::ostream& out, std::ostream& err) {
  Session session("featurize", g);
  const auto scans = resolve_scans(f, session);
  for (const auto& s : scans)
    for (const auto& p : scan_files(s))
      if (fs::exists(p)) session.add_input(p);
  std::vector<BatchFailure> failures;
  const auto results = run_batch<FeatureRecord>(
      scans, session.jobs(),
      [](const ScanInput& s) {
        if (!s.pericardium) throw Error(ErrorCode::InvalidArgument, "featurize needs a pericardium mask");
        const auto l = load_scan(s);
        FeatureRecord r;
        r.scan_id = s.scan_id;
        r.x1 = stub_featurize(l.volume, *l.masks.pericardium);
        r.biomarkers = extract_all(l.volume, l.masks);
        r.label = s.label;
        return r;
      },
      failures);
  std::vector<FeatureRecord> records;
  for (const auto& r : results)
    if (r) records.push_back(*r);
  const auto fmt = session.format("csv");
  session.emit(fmt == "json" ? features_to_json(records) : features_to_csv(records), out);
  return finish_batch(session, failures, scans.size(), err);
}

FusionConfig model_config(const Session& s) {
  const auto& c = s.config();
  FusionConfig m;
  m.embed = config_value<int>(c, {"model", "embed"});
  m.deep_dim = config_value<int>(c, {"model", "deep_dim"});
  m.heads = config_value<int>(c, {"model", "heads"});
  m.head_dim = config_value<int>(c, {"model", "head_dim"});
  m.encoder_hidden = config_value<int>(c, {"model", "encoder_hidden"});
  m.dropout = config_value<double>(c, {"model", "dropout"});
  m.seed = s.seed();
  m.validate();
  return m;
}

TrainConfig train_config(const Session& s) {
  const auto& c = s.config();
  TrainConfig t;
  t.learning_rate = config_value<double>(c, {"train", "learning_rate"});
  t.batch_size = config_value<int>(c, {"train", "batch_size"});
  t.epochs = config_value<int>(c, {"train", "epochs"});
  t.patience = config_value<int>(c, {"train", "patience"});
  t.seed = s.seed();
  t.validate();
  return t;
}

struct Split {
  std::vector<FeatureRecord> train, val, test;
};

/// Stratified by label: each class is shuffled and cut by the fractions.
Split split_by_fractions(const std::vector<FeatureRecord>& records, const Session& s) {
  const double ft = config_value<double>(s.config(), {"split", "train"});
  const double fv = config_value<double>(s.config(), {"split", "val"});
  const double fe = config_value<double>(s.config(), {"split", "test"});
  if (ft <= 0 || fv <= 0 || fe < 0 || std::abs(ft + fv + fe - 1.0) > 1e-9)
    throw Error(ErrorCode::InvalidArgument, "split fractions must be positive (test may be 0) and sum to 1");
  std::vector<int> which(records.size(), 0);
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].label == cls) idx.push_back(i);
    Rng rng(mix_seed(s.seed(), 0x73706c6974ULL + static_cast<std::uint64_t>(cls)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ft * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(fv * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) which[idx[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }
  Split out;
  for (std::size_t i = 0; i < records.size(); ++i)
    (which[i] == 0 ? out.train : which[i] == 1 ? out.val : out.test).push_back(records[i]);
  return out;
}

/// CSV `scan_id,split` with split in train|val|test.
Split split_from_file(const std::vector<FeatureRecord>& records, const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (split_csv_line(line) != std::vector<std::string>{"scan_id", "split"})
    throw Error(ErrorCode::MalformedHeader, path.string() + ": header must be scan_id,split");
  std::map<std::string, std::string> assign;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 2) throw Error(ErrorCode::ArityMismatch, path.string() + ": " + line);
    if (c[1] != "train" && c[1] != "val" && c[1] != "test")
      throw Error(ErrorCode::InvalidArgument, "unknown split " + c[1]);
    if (!assign.emplace(c[0], c[1]).second) throw Error(ErrorCode::DuplicateScanId, c[0]);
  }
  Split out;
  for (const auto& r : records) {
    auto it = assign.find(r.scan_id);
    if (it == assign.end()) throw Error(ErrorCode::InvalidArgument, "scan " + r.scan_id + " has no split");
    (it->second == "train" ? out.train : it->second == "val" ? out.val : out.test).push_back(r);
  }
  return out;
}

int cmd_train(const Globals& g, const std::string& features, const std::string& split_path, std::ostream& out) {
  Session session("train", g);
  const auto model_path = session.require_out();
  const auto mc = model_config(session);
  const auto tc = train_config(session);
  session.add_input(features);
  const auto records = import_features(features, static_cast<std::size_t>(mc.deep_dim));
  labels_of(records);
  Split split;
  if (!split_path.empty()) {
    session.add_input(split_path);
    split = split_from_file(records, split_path);
  } else {
    split = split_by_fractions(records, session);
  }
  logger().info("train: {} train, {} val, {} test records", split.train.size(), split.val.size(), split.test.size());
  const auto result = train(init_model(mc), split.train, split.val, tc);

  session.write_output(model_path, model_to_json(result.model));
  session.write_output(model_path.string() + ".history.csv", history_to_csv(result.history));

  const int replicates = config_value<int>(session.config(), {"evaluate", "replicates"});
  const auto val_scores = score_records(result.model, split.val);
  const auto val_labels = labels_of(split.val);
  const auto choice = select_threshold(val_scores, val_labels);
  ojson report;
  report["best_epoch"] = result.best_epoch;
  report["threshold_source"] = "validation";
  report["validation"] = ojson::parse(
      metrics_to_json(evaluate(val_scores, val_labels, choice.threshold, replicates, session.seed(), session.jobs())));
  if (!split.test.empty()) {
    const auto ts = score_records(result.model, split.test);
    report["test"] = ojson::parse(metrics_to_json(
        evaluate(ts, labels_of(split.test), choice.threshold, replicates, session.seed(), session.jobs())));
  }
  session.write_output(model_path.string() + ".metrics.json", report.dump(2) + "\n");
  out << "best_epoch " << result.best_epoch << " val_auc " << format_double(result.best_val_auc) << "\n";
  session.finish("ok", ojson::array());
  return kOk;
}

std::string predictions_to_csv(const std::vector<PredictionReport>& reports) {
  std::ostringstream os;
  os << "scan_id,probability,model_hash";
  if (!reports.empty())
    for (const auto& n : reports.front().names) os << "," << n;
  os << "\n";
  for (const auto& r : reports) {
    os << r.scan_id << "," << format_double(r.probability) << "," << r.model_hash;
    for (double c : r.contributions) os << "," << format_double(c);
    os << "\n";
  }
  return os.str();
}

int cmd_predict(const Globals& g, const std::string& model_path, const std::string& features, std::ostream& out) {
  Session session("predict", g);
  session.add_input(model_path);
  session.add_input(features);
  const auto model = load_model(model_path);
  const auto records = import_features(features, static_cast<std::size_t>(model.config.deep_dim));
  const auto reports = predict_batch(model, records);
  session.emit(session.format("json") == "csv" ? predictions_to_csv(reports) : predictions_to_json(reports), out);
  session.finish("ok", ojson::array());
  return kOk;
}

int cmd_explain(const Globals& g, const std::string& model_path, const std::string& features,
                const std::string& scan_id, std::ostream& out) {
  Session session("explain", g);
  session.add_input(model_path);
  session.add_input(features);
  const auto model = load_model(model_path);
  const auto records = import_features(features, static_cast<std::size_t>(model.config.deep_dim));
  auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.scan_id == scan_id; });
  if (it == records.end()) throw Error(ErrorCode::InvalidArgument, "no record with scan_id " + scan_id);
  const auto rep = predict(model, *it);

  std::vector<std::size_t> order(rep.names.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rep.contributions[a] > rep.contributions[b]; });
  std::vector<std::pair<std::string, double>> subtotals;
  for (const auto& grp : contribution_groups()) {
    double sum = 0.0;
    for (auto name : grp.members) {
      auto pos = std::find(rep.names.begin(), rep.names.end(), name);
      if (pos != rep.names.end()) sum += rep.contributions[static_cast<std::size_t>(pos - rep.names.begin())];
    }
    subtotals.emplace_back(std::string(grp.name), sum);
  }

  std::ostringstream os;
  const auto fmt = g.format.empty() && session.config()["format"].is_null() ? std::string("table") : session.format("");
  if (fmt == "json") {
    ojson j;
    j["scan_id"] = rep.scan_id;
    j["probability"] = rep.probability;
    j["model_hash"] = rep.model_hash;
    ojson feats = ojson::array();
    for (auto i : order) feats.push_back({{"feature", rep.names[i]}, {"score", rep.contributions[i]}});
    j["contributions"] = feats;
    ojson groups = ojson::array();
    for (const auto& [name, sum] : subtotals) groups.push_back({{"group", name}, {"subtotal", sum}});
    j["groups"] = groups;
    os << j.dump(2) << "\n";
  } else if (fmt == "csv") {
    os << "kind,name,score\n";
    for (auto i : order) os << "feature," << rep.names[i] << "," << format_double(rep.contributions[i]) << "\n";
    for (const auto& [name, sum] : subtotals) os << "group," << name << "," << format_double(sum) << "\n";
  } else {
    os << "scan_id      " << rep.scan_id << "\n";
    os << "probability  " << std::fixed << std::setprecision(6) << rep.probability << "\n\n";
    os << std::left << std::setw(24) << "feature" << "score\n";
    for (auto i : order) os << std::setw(24) << rep.names[i] << rep.contributions[i] << "\n";
    os << "\n" << std::setw(24) << "group" << "subtotal\n";
    for (const auto& [name, sum] : subtotals) os << std::setw(24) << name << sum << "\n";
  }
  session.emit(os.str(), out);
  session.finish("ok", ojson::array());
  return kOk;
}

/// scan_id -> probability from a `predict` output (JSON or CSV).
std::map<std::string, double> read_predictions(const fs::path& path) {
  const auto text = read_file(path);
  std::map<std::string, double> out;
  if (path.extension() == ".json") {
    ojson j;
    try {
      j = ojson::parse(text);
      for (const auto& r : j) out[r.at("scan_id").get<std::string>()] = r.at("probability").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
    return out;
  }
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "scan_id" || header[1] != "probability")
    throw Error(ErrorCode::MalformedHeader, path.string() + ": header must start with scan_id,probability");
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto c = split_csv_line(line);
    double p = 0.0;
    if (c.size() < 2 || !parse_double(c[1], p)) throw Error(ErrorCode::MalformedHeader, path.string() + ": " + line);
    out[c[0]] = p;
  }
  return out;
}

struct EvaluateFlags {
  std::string model, features, threshold_features, compare, roc;
  std::optional<double> threshold;
};

int cmd_evaluate(const Globals& g, const EvaluateFlags& f, std::ostream& out) {
  Session session("evaluate", g);
  session.add_input(f.model);
  session.add_input(f.features);
  const auto model = load_model(f.model);
  const auto dim = static_cast<std::size_t>(model.config.deep_dim);
  const auto records = import_features(f.features, dim);
  const auto labels = labels_of(records);
  const auto scores = score_records(model, records);

  double threshold = 0.0;
  std::string source;
  if (f.threshold) {
    threshold = *f.threshold;
    source = "flag";
  } else if (!f.threshold_features.empty()) {
    session.add_input(f.threshold_features);
    const auto ref = import_features(f.threshold_features, dim);
    threshold = select_threshold(score_records(model, ref), labels_of(ref)).threshold;
    source = "youden:" + f.threshold_features;
  } else {
    threshold = select_threshold(scores, labels).threshold;
    source = "youden:self";
  }

  const int replicates = config_value<int>(session.config(), {"evaluate", "replicates"});
  auto report = ojson::parse(metrics_to_json(evaluate(scores, labels, threshold, replicates, session.seed(), session.jobs())));
  report["threshold_source"] = source;

  if (!f.compare.empty()) {
    session.add_input(f.compare);
    const auto other = read_predictions(f.compare);
    std::vector<int> pa, pb;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto it = other.find(records[i].scan_id);
      if (it == other.end()) throw Error(ErrorCode::InvalidArgument, "comparison lacks scan " + records[i].scan_id);
      pa.push_back(scores[i] >= threshold ? 1 : 0);
      pb.push_back(it->second >= threshold ? 1 : 0);
    }
    const auto m = mcnemar_test(pa, pb, labels);
    report["mcnemar"] = {{"b", m.b}, {"c", m.c}, {"exact", m.exact}, {"p_value", m.p_value}};
  }

  std::string roc_path = f.roc;
  if (roc_path.empty() && !g.out.empty()) roc_path = g.out + ".roc.csv";
  if (!roc_path.empty()) session.write_output(roc_path, roc_to_csv(roc_curve(scores, labels)));
  session.emit(report.dump(2) + "\n", out);
  session.finish("ok", ojson::array());
  return kOk;
}

int cmd_phantom(const Globals& g, const std::string& spec_path, std::ostream& out) {
  Session session("phantom", g);
  const fs::path dir = session.require_out();
  session.set_manifest_default(dir / "manifest.json");
  session.add_input(spec_path);
  auto spec = load_phantom_spec(spec_path);
  if (g.seed) spec.seed = *g.seed;
  const auto ph = generate(spec);
  fs::create_directories(dir);

  save_volume(ph.volume, dir / "volume.ctqh");
  save_mask(*ph.masks.pericardium, dir / "pericardium.ctqh");
  save_mask(*ph.masks.calcium, dir / "calcium.ctqh");
  save_mask(*ph.masks.aorta, dir / "aorta.ctqh");
  save_mask(*ph.masks.lungs, dir / "lungs.ctqh");
  for (const char* name : {"volume", "pericardium", "calcium", "aorta", "lungs"}) {
    session.record_output(dir / (std::string(name) + ".ctqh"));
    session.record_output(dir / (std::string(name) + ".raw"));
  }
  session.write_output(dir / "truth.json", truth_to_json(ph.truth));
  session.write_output(dir / "scans.csv", "scan_id,volume,pericardium,calcium,aorta,lungs\n" + spec.name +
                                              ",volume.ctqh,pericardium.ctqh,calcium.ctqh,aorta.ctqh,lungs.ctqh\n");
  out << "wrote phantom " << spec.name << " to " << dir.string() << "\n";
  session.finish("ok", ojson::array());
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantitative CT biomarkers and CVD risk fusion", "ctquant"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "JSON config file (flags override it)");
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output path");
  app.add_option("--format", g.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--manifest", g.manifest, "run manifest path (default: <out>.manifest.json)");

  ScanFlags extract_flags, featurize_flags;
  auto* extract = app.add_subcommand("extract", "compute the 18 biomarkers per scan");
  add_scan_flags(extract, extract_flags);
  auto* featurize = app.add_subcommand("featurize", "stub deep features plus biomarkers per scan");
  add_scan_flags(featurize, featurize_flags);
  featurize->add_option("--label", featurize_flags.label, "label for single-scan mode")
      ->check(CLI::IsMember({0, 1}));

  std::string train_features, train_split;
  auto* train_cmd = app.add_subcommand("train", "fit the fusion model");
  train_cmd->add_option("--features", train_features, "labelled feature table")->required();
  train_cmd->add_option("--split", train_split, "CSV scan_id,split (default: stratified fractions)");

  std::string model_path, features_path, scan_id;
  auto* predict_cmd = app.add_subcommand("predict", "risk probabilities and contribution scores");
  predict_cmd->add_option("--model", model_path, "model file")->required();
  predict_cmd->add_option("--features", features_path, "feature table")->required();

  auto* explain = app.add_subcommand("explain", "contribution table for one scan");
  explain->add_option("--model", model_path, "model file")->required();
  explain->add_option("--features", features_path, "feature table")->required();
  explain->add_option("--scan-id", scan_id, "scan to explain")->required();

  EvaluateFlags eval_flags;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "metrics with bootstrap intervals and ROC points");
  evaluate_cmd->add_option("--model", eval_flags.model, "model file")->required();
  evaluate_cmd->add_option("--features", eval_flags.features, "labelled feature table")->required();
  auto* thr = evaluate_cmd->add_option("--threshold", eval_flags.threshold, "fixed decision threshold");
  evaluate_cmd->add_option("--threshold-features", eval_flags.threshold_features,
                           "pick the Youden threshold on this labelled table")
      ->excludes(thr);
  evaluate_cmd->add_option("--compare", eval_flags.compare, "second predictions file for McNemar");
  evaluate_cmd->add_option("--roc", eval_flags.roc, "ROC CSV path (default: <out>.roc.csv)");

  std::string spec_path;
  auto* phantom = app.add_subcommand("phantom", "generate a phantom and its ground truth");
  phantom->add_option("--spec", spec_path, "phantom spec JSON")->required();

  std::vector<const char*> argv = {"ctquant"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (extract->parsed()) return cmd_extract(g, extract_flags, out, err);
    if (featurize->parsed()) return cmd_featurize(g, featurize_flags, out, err);
    if (train_cmd->parsed()) return cmd_train(g, train_features, train_split, out);
    if (predict_cmd->parsed()) return cmd_predict(g, model_path, features_path, out);
    if (explain->parsed()) return cmd_explain(g, model_path, features_path, scan_id, out);
    if (evaluate_cmd->parsed()) return cmd_evaluate(g, eval_flags, out);
    if (phantom->parsed()) return cmd_phantom(g, spec_path, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUsage;
}

}  // namespace ctquant::cli
