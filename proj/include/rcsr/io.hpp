#pragma once

// Binary container used for checkpoints and dataset exchange.
//
// Layout: the 8-byte magic "RCSRPARM", a little-endian uint32 header length,
// a UTF-8 JSON header, then the raw little-endian doubles of every section in
// header order. The header lists sections as {name, rows, cols} and may carry
// arbitrary metadata under "meta".

#include <array>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rcsr/config.hpp"
#include "rcsr/server.hpp"

namespace rcsr {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'R', 'C', 'S', 'R', 'P', 'A', 'R', 'M'};
inline constexpr int kCheckpointVersion = 1;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Container {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor>> sections;

  void add(std::string name, Tensor t) { sections.emplace_back(std::move(name), std::move(t)); }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : sections) {
      if (n == name) return t;
    }
    throw IoError("container: missing section '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : sections) {
      if (n == name) return true;
    }
    return false;
  }
};

inline void write_container(const std::string& path, const Container& c) {
  json header;
  header["meta"] = c.meta;
  header["sections"] = json::array();
  for (const auto& [name, t] : c.sections) {
    header["sections"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  const std::string text = header.dump();
  if (text.size() > UINT32_MAX) throw IoError(path + ": header too large");
  const auto len = static_cast<std::uint32_t>(text.size());

  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp + ": cannot open for writing");
    out.write(kContainerMagic, sizeof kContainerMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : c.sections) {
      out.write(reinterpret_cast<const char*>(t.values().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw IoError(tmp + ": write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError(path + ": cannot replace file");
}

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  char magic[sizeof kContainerMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kContainerMagic, sizeof magic) != 0) throw IoError(path + ": not an RCSR container");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw IoError(path + ": truncated header");

  Container c;
  json header;
  try {
    header = json::parse(text);
    c.meta = header.at("meta");
    for (const auto& s : header.at("sections")) {
      const auto rows = s.at("rows").get<std::size_t>();
      const auto cols = s.at("cols").get<std::size_t>();
      std::vector<double> values(rows * cols);
      in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
      if (!in) throw IoError(path + ": truncated section '" + s.at("name").get<std::string>() + "'");
      c.add(s.at("name").get<std::string>(), Tensor(rows, cols, std::move(values)));
    }
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed header (" + e.what() + ")");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path + ": trailing bytes after last section");
  return c;
}

// --- checkpoints ------------------------------------------------------------------

namespace detail {

/// Config JSON minus fields that may change across a resume.
inline json resumable_config(const TrainingConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("workers");
  return j;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TrainingConfig& cfg, const ServerState& s) {
  Container c;
  c.meta = {
      {"kind", "checkpoint"},
      {"version", kCheckpointVersion},
      {"config", detail::resumable_config(cfg)},
      {"round", s.round},
      {"loss_sum", s.loss_sum},
      {"loss_count", s.loss_count},
      {"proto_momentum", s.protos.momentum},
      {"group_mean", s.fairness.group_mean},
      {"group_seen", s.fairness.group_seen},
  };
  s.theta.for_each([&](const std::string& n, const Tensor& t) { c.add("theta/" + n, t); });
  s.router.for_each([&](const std::string& n, const Tensor& t) { c.add("router/" + n, t); });
  c.add("fairness/q", Tensor::row_vector(s.fairness.q));
  c.add("protos/image", Tensor::row_vector(s.protos.image));
  c.add("protos/text", Tensor::row_vector(s.protos.text));
  c.add("prev_update", Tensor::row_vector(s.prev_update));
  json adapters = json::array();
  for (const auto& [id, a] : s.adapters) {
    adapters.push_back({{"id", id}, {"strength", s.strengths.at(id)}});
    a.for_each([&](const std::string& n, const Tensor& t) { c.add("adapter/" + std::to_string(id) + "/" + n, t); });
  }
  c.meta["adapters"] = adapters;
  write_container(path, c);
}

namespace detail {

template <typename Params>
void fill_from(Params& p, const Container& c, const std::string& prefix) {
  p.for_each([&](const std::string& n, Tensor& t) {
    const Tensor& src = c.get(prefix + n);
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw IoError("checkpoint: section '" + prefix + n + "' has the wrong shape");
    }
    t = src;
  });
}

inline std::vector<double> row_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace detail

/// Restores a ServerState saved under the same configuration (worker count aside).
inline ServerState load_checkpoint(const std::string& path, const TrainingConfig& cfg) {
  const Container c = read_container(path);
  try {
    if (c.meta.at("kind") != "checkpoint") throw IoError(path + ": not a checkpoint");
    if (c.meta.at("version") != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
    if (c.meta.at("config") != detail::resumable_config(cfg)) {
      throw IoError(path + ": checkpoint was written with a different configuration");
    }
    ServerState s;
    s.round = c.meta.at("round").get<std::size_t>();
    if (s.round > cfg.rounds) throw IoError(path + ": checkpoint round exceeds configured rounds");
    s.loss_sum = c.meta.at("loss_sum").get<double>();
    s.loss_count = c.meta.at("loss_count").get<std::size_t>();

    s.theta = init_params(cfg.model, 0);
    detail::fill_from(s.theta, c, "theta/");
    s.router = init_router(cfg.router, 0);
    detail::fill_from(s.router, c, "router/");

    s.fairness = FairnessState::uniform(cfg.num_clients, cfg.fairness);
    s.fairness.q = detail::row_values(c.get("fairness/q"));
    if (s.fairness.q.size() != cfg.num_clients) throw IoError(path + ": q has the wrong length");
    s.fairness.group_mean = c.meta.at("group_mean").get<std::array<double, 3>>();
    s.fairness.group_seen = c.meta.at("group_seen").get<std::array<bool, 3>>();

    s.protos.momentum = c.meta.at("proto_momentum").get<double>();
    s.protos.image = detail::row_values(c.get("protos/image"));
    s.protos.text = detail::row_values(c.get("protos/text"));
    s.prev_update = detail::row_values(c.get("prev_update"));

    for (const auto& entry : c.meta.at("adapters")) {
      const auto id = entry.at("id").get<std::size_t>();
      PersonalAdapter a = init_personal_adapter(cfg.model.embed_dim, 0);
      detail::fill_from(a, c, "adapter/" + std::to_string(id) + "/");
      s.adapters.emplace(id, std::move(a));
      s.strengths[id] = entry.at("strength").get<double>();
    }
    return s;
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed checkpoint (" + e.what() + ")");
  }
}

// --- dataset exchange -------------------------------------------------------------

inline void export_dataset(const std::string& path, const SyntheticDataset& d, std::uint64_t seed) {
  Container c;
  c.meta = {
      {"kind", "dataset"},
      {"seed", seed},
      {"num_classes", d.num_classes},
      {"num_items", d.size()},
      {"latent_dim", d.latents.cols()},
      {"raw_dim_image", d.image.cols()},
      {"raw_dim_text", d.text.cols()},
  };
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  c.add("labels", Tensor::row_vector(labels));
  c.add("latents", d.latents);
  c.add("image", d.image);
  c.add("text", d.text);
  write_container(path, c);
}

struct ImportedDataset {
  SyntheticDataset data;
  std::uint64_t seed = 0;
};

inline ImportedDataset import_dataset(const std::string& path) {
  const Container c = read_container(path);
  ImportedDataset out;
  try {
    if (c.meta.at("kind") != "dataset") throw IoError(path + ": not a dataset file");
    out.seed = c.meta.at("seed").get<std::uint64_t>();
    out.data.num_classes = c.meta.at("num_classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed dataset header (" + e.what() + ")");
  }
  const Tensor& labels = c.get("labels");
  for (double v : labels.values()) {
    if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(out.data.num_classes)) {
      throw IoError(path + ": label out of range");
    }
    out.data.labels.push_back(static_cast<std::size_t>(v));
  }
  out.data.latents = c.get("latents");
  out.data.image = c.get("image");
  out.data.text = c.get("text");
  const std::size_t n = out.data.labels.size();
  if (out.data.latents.rows() != n || out.data.image.rows() != n || out.data.text.rows() != n) {
    throw IoError(path + ": section row counts disagree");
  }
  return out;
}

}  // namespace rcsr
