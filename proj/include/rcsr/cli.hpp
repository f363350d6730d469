#pragma once

// Command implementations behind the rcsr tool. Argument parsing lives in
// tools/rcsr.cpp; everything here takes plain option structs and streams so
// tests can drive the commands in-process.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rcsr/config.hpp"
#include "rcsr/gradcheck.hpp"
#include "rcsr/io.hpp"
#include "rcsr/server.hpp"

namespace rcsr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr const char* kMetricsCsvHeader =
    "round,mode,mean_loss,router_loss,weight_entropy,q_entropy,"
    "i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,mean_r1,fair_std,worst_r1";

inline constexpr const char* kOutputDirEnv = "RCSR_OUTPUT_DIR";

inline std::string default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? env : "rcsr_out";
}

// --- configuration assembly --------------------------------------------------------

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a bare string otherwise.
inline void apply_assignment(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set " + assignment + ": expected key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set " + assignment + ": empty key in path");
    if (!node->is_object()) throw ConfigError("--set " + assignment + ": '" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct ConfigOptions {
  std::string config_path;  // empty means built-in defaults
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> warmup_rounds;
  std::vector<std::string> assignments;
};

/// File (or defaults) plus command-line overrides, validated. Throws ConfigError.
inline TrainingConfig resolve_config(const ConfigOptions& o) {
  json doc = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError(o.config_path + ": cannot open config file");
    try {
      in >> doc;
    } catch (const json::parse_error& e) {
      throw ConfigError(o.config_path + ": invalid JSON (" + e.what() + ")");
    }
  }
  if (o.seed) doc["seed"] = *o.seed;
  if (o.mode) doc["mode"] = *o.mode;
  if (o.workers) doc["workers"] = *o.workers;
  if (o.rounds) doc["federation"]["rounds"] = *o.rounds;
  if (o.warmup_rounds) doc["federation"]["warmup_rounds"] = *o.warmup_rounds;
  for (const auto& a : o.assignments) apply_assignment(doc, a);
  try {
    return config_from_json(doc);
  } catch (const ConfigError& e) {
    throw ConfigError((o.config_path.empty() ? std::string("config") : o.config_path) + ": " + e.what());
  }
}

// --- metrics formatting ------------------------------------------------------------

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_csv_row(const RoundRecord& r) {
  std::ostringstream os;
  os << r.round << ',' << r.mode << ',' << fmt(r.mean_loss) << ',';
  if (r.router_loss) os << fmt(*r.router_loss);
  os << ',' << fmt(r.weight_entropy) << ',' << fmt(r.q_entropy);
  if (r.metrics) {
    const RetrievalMetrics& m = *r.metrics;
    for (double v : m.global.i2t) os << ',' << fmt(v);
    for (double v : m.global.t2i) os << ',' << fmt(v);
    os << ',' << fmt(m.global.mean[0]) << ',' << fmt(m.fair_std) << ',' << fmt(m.worst_r1);
  } else {
    os << ",,,,,,,,,";
  }
  return os.str();
}

inline json weights_json(const RoundRecord& r) {
  return {{"round", r.round},      {"mode", r.mode},
          {"selected", r.selected}, {"active", r.active},
          {"router_weights", r.router_weights}, {"fused_weights", r.fused_weights},
          {"q", r.q},              {"events", r.events}};
}

inline json metrics_json(const RetrievalMetrics& m) {
  json per_client = json::object();
  for (const auto& [id, r1] : m.per_client_r1) per_client[std::to_string(id)] = r1;
  return {{"i2t", m.global.i2t},   {"t2i", m.global.t2i},   {"mean", m.global.mean},
          {"mean_r1", m.global.mean[0]},
          {"fair_std", m.fair_std}, {"worst_r1", m.worst_r1}, {"best_r1", m.best_r1},
          {"gap", m.gap},           {"per_client_r1", per_client},
          {"excluded_clients", m.excluded_clients}};
}

// --- run ---------------------------------------------------------------------------

struct RunOptions {
  ConfigOptions config;
  std::string output_dir;
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint.bin
  std::string resume;                // checkpoint to continue from
  bool quiet = false;
};

namespace detail {

/// Keeps the header plus every line whose leading round field is <= round.
inline void truncate_csv(const std::filesystem::path& path, std::size_t round) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot resume, metrics file missing");
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      if (line != kMetricsCsvHeader) throw IoError(path.string() + ": unexpected metrics header");
      header = false;
    } else if (std::stoull(line.substr(0, line.find(','))) > round) {
      break;
    }
    kept += line + '\n';
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

inline void truncate_jsonl(const std::filesystem::path& path, std::size_t round) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  while (std::getline(in, line)) {
    if (json::parse(line).at("round").get<std::size_t>() > round) break;
    kept += line + '\n';
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

inline void print_summary(std::ostream& out, const TrainingConfig& cfg, const TrainingResult& r) {
  const RetrievalMetrics& m = r.final_metrics;
  out << "\nfinal (" << to_string(cfg.mode) << ", seed " << cfg.seed << ", " << cfg.rounds << " rounds)\n";
  out << std::fixed << std::setprecision(2);
  out << "  direction   R@1     R@5     R@10\n";
  out << "  i2t       " << std::setw(6) << m.global.i2t[0] << "  " << std::setw(6) << m.global.i2t[1] << "  "
      << std::setw(6) << m.global.i2t[2] << '\n';
  out << "  t2i       " << std::setw(6) << m.global.t2i[0] << "  " << std::setw(6) << m.global.t2i[1] << "  "
      << std::setw(6) << m.global.t2i[2] << '\n';
  out << "  mean      " << std::setw(6) << m.global.mean[0] << "  " << std::setw(6) << m.global.mean[1] << "  "
      << std::setw(6) << m.global.mean[2] << '\n';
  out << "  client R@1: std " << m.fair_std << ", worst " << m.worst_r1 << ", best " << m.best_r1 << '\n';
  out.unsetf(std::ios::floatfield);
}

}  // namespace detail

/// Trains one configuration and writes metrics.csv, router_weights.jsonl,
/// final_metrics.json and checkpoint.bin under the output directory, plus
/// checkpoint_r<round>.bin at each checkpoint interval.
inline int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
  TrainingConfig cfg;
  try {
    cfg = resolve_config(o.config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    namespace fs = std::filesystem;
    const fs::path dir = o.output_dir.empty() ? default_output_dir() : o.output_dir;
    fs::create_directories(dir);
    const fs::path csv_path = dir / "metrics.csv";
    const fs::path weights_path = dir / "router_weights.jsonl";
    const fs::path ckpt_path = dir / "checkpoint.bin";

    const Federation fed = build_federation(cfg);
    ServerState state;
    if (!o.resume.empty()) {
      state = load_checkpoint(o.resume, cfg);
      detail::truncate_csv(csv_path, state.round);
      detail::truncate_jsonl(weights_path, state.round);
      if (!o.quiet) out << "resuming from round " << state.round << '\n';
    } else {
      state = initial_state(fed);
      std::ofstream(csv_path, std::ios::trunc) << kMetricsCsvHeader << '\n';
      std::ofstream(weights_path, std::ios::trunc);
    }

    std::ofstream csv(csv_path, std::ios::app);
    std::ofstream weights(weights_path, std::ios::app);
    if (!csv || !weights) throw IoError(dir.string() + ": cannot write metrics");

    const TrainingResult result = continue_training(fed, std::move(state), [&](const RoundRecord& r, const ServerState& s) {
      csv << metrics_csv_row(r) << '\n' << std::flush;
      weights << weights_json(r).dump() << '\n' << std::flush;
      if (o.checkpoint_every > 0 && r.round % o.checkpoint_every == 0) {
        save_checkpoint((dir / ("checkpoint_r" + std::to_string(r.round) + ".bin")).string(), cfg, s);
      }
      if (!o.quiet && r.metrics) {
        out << "round " << r.round << " [" << r.mode << "] loss " << fmt(r.mean_loss) << "  R@1 "
            << fmt(r.metrics->global.mean[0]) << "  client std " << fmt(r.metrics->fair_std) << '\n';
      }
      for (const auto& e : r.events) err << "round " << r.round << ": " << e << '\n';
    });
    save_checkpoint(ckpt_path.string(), cfg, result.state);

    json final = {{"schema_version", kMetricsSchemaVersion},
                  {"config", config_to_json(cfg)},
                  {"rounds_completed", result.state.round},
                  {"metrics", metrics_json(result.final_metrics)}};
    std::ofstream(dir / "final_metrics.json", std::ios::trunc) << final.dump(2) << '\n';
    if (!o.quiet) {
      detail::print_summary(out, cfg, result);
      out << "outputs written to " << dir.string() << '\n';
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

// --- compare -----------------------------------------------------------------------

struct CompareOptions {
  ConfigOptions config;
  std::vector<std::string> modes;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
};

struct CompareRow {
  std::string mode;
  std::size_t seed_count = 0;
  double r1_mean = 0.0;
  double r1_std = 0.0;
  double fair_std = 0.0;   // mean over seeds of the across-client R@1 std
  double worst_r1 = 0.0;   // mean over seeds of the worst client's R@1
};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

inline int cmd_compare(const CompareOptions& o, std::ostream& out, std::ostream& err) {
  if (o.modes.empty() || o.seeds.empty()) {
    err << "config error: compare needs at least one mode and one seed\n";
    return kExitConfig;
  }
  // Validate every cell's config before any training starts.
  std::vector<TrainingConfig> configs;
  try {
    for (const auto& mode : o.modes) {
      ConfigOptions co = o.config;
      co.mode = mode;
      co.seed = o.seeds.front();
      configs.push_back(resolve_config(co));
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  namespace fs = std::filesystem;
  const fs::path dir = o.output_dir.empty() ? default_output_dir() : o.output_dir;
  json runs = json::array();
  std::vector<CompareRow> rows;
  bool any_failed = false;
  for (std::size_t mi = 0; mi < o.modes.size(); ++mi) {
    std::vector<double> r1, fair, worst;
    for (std::uint64_t seed : o.seeds) {
      TrainingConfig cfg = configs[mi];
      cfg.seed = seed;
      json run = {{"mode", o.modes[mi]}, {"seed", seed}};
      try {
        const TrainingResult res = run_training(cfg);
        const RetrievalMetrics& m = res.final_metrics;
        r1.push_back(m.global.mean[0]);
        fair.push_back(m.fair_std);
        worst.push_back(m.worst_r1);
        run["metrics"] = metrics_json(m);
        out << o.modes[mi] << " seed " << seed << ": R@1 " << fmt(m.global.mean[0]) << '\n';
      } catch (const std::exception& e) {
        any_failed = true;
        run["error"] = e.what();
        err << o.modes[mi] << " seed " << seed << " failed: " << e.what() << '\n';
      }
      runs.push_back(run);
    }
    CompareRow row;
    row.mode = o.modes[mi];
    row.seed_count = r1.size();
    std::tie(row.r1_mean, row.r1_std) = mean_std(r1);
    row.fair_std = mean_std(fair).first;
    row.worst_r1 = mean_std(worst).first;
    rows.push_back(row);
  }

  try {
    fs::create_directories(dir);
    std::ofstream csv(dir / "compare.csv", std::ios::trunc);
    csv << "mode,seed_count,r1_mean,r1_std,fair_std,worst_r1\n";
    json table = json::array();
    for (const auto& r : rows) {
      csv << r.mode << ',' << r.seed_count << ',' << fmt(r.r1_mean) << ',' << fmt(r.r1_std) << ','
          << fmt(r.fair_std) << ',' << fmt(r.worst_r1) << '\n';
      auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
      table.push_back({{"mode", r.mode}, {"seed_count", r.seed_count}, {"r1_mean", num(r.r1_mean)},
                       {"r1_std", num(r.r1_std)}, {"fair_std", num(r.fair_std)}, {"worst_r1", num(r.worst_r1)}});
    }
    std::ofstream(dir / "compare.json", std::ios::trunc)
        << json{{"schema_version", kMetricsSchemaVersion}, {"seeds", o.seeds}, {"rows", table}, {"runs", runs}}.dump(2)
        << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }

  out << "\nmode        seeds  R@1 mean  R@1 std  client std  worst R@1\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s  %5zu  %8.2f  %7.2f  %10.2f  %9.2f\n", r.mode.c_str(), r.seed_count,
                  r.r1_mean, r.r1_std, r.fair_std, r.worst_r1);
    out << line;
  }
  return any_failed ? kExitRuntime : kExitOk;
}

// --- gradcheck ---------------------------------------------------------------------

struct GradcheckOptions {
  std::size_t seeds = 20;
  bool inject_gelu_fault = false;
};

inline int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  struct FaultGuard {
    explicit FaultGuard(bool on) { ad::testing::corrupt_gelu_backward() = on; }
    ~FaultGuard() { ad::testing::corrupt_gelu_backward() = false; }
  } guard(o.inject_gelu_fault);

  const GradcheckReport report = run_gradcheck(o.seeds);
  for (const auto& l : report.lines) {
    char line[200];
    if (!l.error.empty()) {
      std::snprintf(line, sizeof line, "%-28s  FAIL  error: %s\n", l.name.c_str(), l.error.c_str());
    } else {
      std::snprintf(line, sizeof line, "%-28s  %s  max rel err %.3e (seed %llu)\n", l.name.c_str(),
                    l.passed ? "ok  " : "FAIL", l.worst, static_cast<unsigned long long>(l.worst_seed));
    }
    out << line;
  }
  out << (report.passed() ? "all" : "some") << " gradient checks " << (report.passed() ? "passed" : "FAILED")
      << " over " << o.seeds << " seeds in " << fmt(report.seconds) << " s\n";
  return report.passed() ? kExitOk : kExitRuntime;
}

// --- partition-stats ---------------------------------------------------------------

inline int cmd_partition_stats(const ConfigOptions& o, std::ostream& out, std::ostream& err) {
  TrainingConfig cfg;
  try {
    cfg = resolve_config(o);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    const Federation fed = build_federation(cfg);
    const std::size_t C = cfg.data.num_classes;
    out << "client  type        train  test  entropy  class histogram (train)\n";
    double mean_entropy = 0.0;
    for (const auto& c : fed.clients) {
      std::vector<std::size_t> all(c.train.size());
      std::iota(all.begin(), all.end(), 0);
      const auto hist = class_histogram(c.train.labels, all, C);
      const double h = label_entropy(hist);
      mean_entropy += h / static_cast<double>(fed.clients.size());
      char head[96];
      std::snprintf(head, sizeof head, "%6zu  %-10s  %5zu  %4zu  %7.3f  ", c.id, to_string(c.type), c.train.size(),
                    c.test.size(), h);
      out << head;
      for (std::size_t k = 0; k < C; ++k) out << (k ? " " : "") << hist[k];
      out << '\n';
    }
    out << "mean label entropy " << fmt(mean_entropy) << " (uniform " << fmt(std::log(static_cast<double>(C)))
        << ")\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

// --- describe ----------------------------------------------------------------------

/// Full-size encoder shape: CLIP ViT-B/32 image and text transformer widths.
inline EncoderConfig paper_scale_encoder() {
  EncoderConfig c;
  c.backbone_width_image = 768;
  c.backbone_width_text = 512;
  c.num_blocks = 12;
  c.bottleneck_dim = 64;
  c.embed_dim = 512;
  c.include_bias = false;
  return c;
}

inline std::size_t router_param_count(const RouterConfig& cfg) {
  std::size_t n = 0;
  init_router(cfg, 0).for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

inline std::string millions(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

inline int cmd_describe(const ConfigOptions& o, bool full_scale, std::ostream& out, std::ostream& err) {
  TrainingConfig cfg;
  try {
    cfg = resolve_config(o);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  EncoderConfig enc = cfg.model;
  RouterConfig router = cfg.router;
  if (full_scale) {
    const EncoderConfig p = paper_scale_encoder();
    enc.backbone_width_image = p.backbone_width_image;
    enc.backbone_width_text = p.backbone_width_text;
    enc.num_blocks = p.num_blocks;
    enc.bottleneck_dim = p.bottleneck_dim;
    enc.embed_dim = p.embed_dim;
    enc.include_bias = p.include_bias;
    router.embed_dim = p.embed_dim;
  }
  const ParamCount pc = param_count(enc);
  char line[160];
  out << "encoder: widths " << enc.backbone_width_image << "/" << enc.backbone_width_text << ", " << enc.num_blocks
      << " blocks, bottleneck " << enc.bottleneck_dim << ", embed " << enc.embed_dim
      << (enc.include_bias ? ", with bias" : ", no bias") << '\n';
  std::snprintf(line, sizeof line, "  adapters          %10zu  (%s)\n", pc.adapters, millions(pc.adapters).c_str());
  out << line;
  std::snprintf(line, sizeof line, "  projection heads  %10zu  (%s)\n", pc.heads, millions(pc.heads).c_str());
  out << line;
  std::snprintf(line, sizeof line, "  total trainable   %10zu  (%s)\n", pc.total, millions(pc.total).c_str());
  out << line;
  const std::size_t rn = router_param_count(router);
  std::snprintf(line, sizeof line, "router (server only) %7zu  (%s)\n", rn, millions(rn).c_str());
  out << line;
  return kExitOk;
}

// --- print-config -----------------------------------------------------------------

inline int cmd_print_config(const ConfigOptions& o, std::ostream& out, std::ostream& err) {
  try {
    out << config_to_json(resolve_config(o)).dump(2) << '\n';
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
}

// --- dataset export ----------------------------------------------------------------

inline int cmd_export_dataset(const ConfigOptions& o, const std::string& path, std::ostream& out,
                              std::ostream& err) {
  TrainingConfig cfg;
  try {
    cfg = resolve_config(o);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    const Federation fed = build_federation(cfg);
    export_dataset(path + ".train.bin", fed.train, cfg.seed);
    export_dataset(path + ".test.bin", fed.test, cfg.seed);
    out << "wrote " << path << ".train.bin (" << fed.train.size() << " items) and " << path << ".test.bin ("
        << fed.test.size() << " items)\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace rcsr::cli
