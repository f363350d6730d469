#pragma once

// JSON form of TrainingConfig. Every key is optional; missing keys keep their
// defaults. Unknown keys and type errors raise ConfigError naming the path.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "rcsr/server.hpp"

namespace rcsr {

using json = nlohmann::json;

inline json config_to_json(const TrainingConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["workers"] = c.workers;
  j["federation"] = {
      {"num_clients", c.num_clients},
      {"rounds", c.rounds},
      {"warmup_rounds", c.warmup_rounds},
      {"personalize_from", c.personalize_from ? json(*c.personalize_from) : json(nullptr)},
      {"participation", c.participation},
      {"missing_rate", c.missing_rate},
      {"dirichlet_alpha", c.dirichlet_alpha},
      {"holdout_fraction", c.holdout_fraction},
      {"eval_every", c.eval_every},
  };
  j["data"] = {
      {"num_classes", c.data.num_classes},
      {"per_class", c.data.per_class},
      {"test_per_class", c.data.test_per_class},
      {"latent_dim", c.data.latent_dim},
      {"raw_dim_image", c.data.raw_dim_image},
      {"raw_dim_text", c.data.raw_dim_text},
      {"noise", c.data.noise},
      {"raw_noise", c.data.raw_noise},
  };
  j["model"] = {
      {"backbone_width_image", c.model.backbone_width_image},
      {"backbone_width_text", c.model.backbone_width_text},
      {"num_blocks", c.model.num_blocks},
      {"bottleneck_dim", c.model.bottleneck_dim},
      {"embed_dim", c.model.embed_dim},
      {"include_bias", c.model.include_bias},
  };
  j["training"] = {
      {"lr", c.lr},
      {"lr_warmup", c.lr_warmup},
      {"batch_size", c.batch_size},
      {"local_epochs", c.local_epochs},
      {"tau_nce", c.loss.tau_nce},
      {"lambda_align", c.loss.lambda_align},
      {"lambda_prox", c.loss.lambda_prox},
      {"lambda_anchor", c.loss.lambda_anchor},
  };
  j["router"] = {
      {"hidden", c.router.hidden},
      {"heads", c.router.heads},
      {"layers", c.router.layers},
      {"init_scale", c.router.init_scale},
      {"lr", c.router_lr},
      {"beta_image", c.router_loss.beta_image},
      {"beta_text", c.router_loss.beta_text},
      {"beta_entropy", c.router_loss.beta_entropy},
      {"beta_align", c.router_loss.beta_align},
      {"mask_filled", c.router_loss.mask_filled},
  };
  j["fairness"] = {
      {"enabled", c.fairness_enabled},
      {"eta_q", c.fairness.eta_q},
      {"tau_fair", c.fairness.tau_fair},
      {"group_momentum", c.fairness.group_momentum},
      {"entropy_regularized", c.fairness.entropy_regularized},
      {"zscore", c.fairness.zscore},
  };
  j["prototypes"] = {{"momentum", c.proto_momentum}, {"probe_samples", c.probe_samples}};
  j["personalization"] = {{"lambda_p", c.lambda_p}, {"lr_scale", c.personal_lr_scale}};
  return j;
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = take(key)) out = unsigned_value(key, *v);
  }
  void read(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(at(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      out = unsigned_value(key, *v);
    }
  }
  void read(const std::string& key, AggregationMode& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(at(key), "expected a string");
      try {
        out = aggregation_mode_from_string(v->get<std::string>());
      } catch (const std::invalid_argument& e) {
        fail(at(key), e.what());
      }
    }
  }
  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    if (const json* v = take(key)) {
      ConfigReader sub(*v, at(key));
      fn(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(at(key), "unknown key");
    }
  }

 private:
  std::size_t unsigned_value(const std::string& key, const json& v) const {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(at(key), "expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }
  const json* take(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[noreturn]] static void fail(const std::string& where, const std::string& why) {
    throw ConfigError(where + ": " + why);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Overlays `j` onto `base` and validates the result.
inline TrainingConfig config_from_json(const json& j, TrainingConfig c = {}) {
  detail::ConfigReader r(j, "");
  std::size_t seed = c.seed;
  r.read("seed", seed);
  c.seed = seed;
  r.read("mode", c.mode);
  r.read("workers", c.workers);
  r.section("federation", [&](detail::ConfigReader& s) {
    s.read("num_clients", c.num_clients);
    s.read("rounds", c.rounds);
    s.read("warmup_rounds", c.warmup_rounds);
    s.read("personalize_from", c.personalize_from);
    s.read("participation", c.participation);
    s.read("missing_rate", c.missing_rate);
    s.read("dirichlet_alpha", c.dirichlet_alpha);
    s.read("holdout_fraction", c.holdout_fraction);
    s.read("eval_every", c.eval_every);
  });
  r.section("data", [&](detail::ConfigReader& s) {
    s.read("num_classes", c.data.num_classes);
    s.read("per_class", c.data.per_class);
    s.read("test_per_class", c.data.test_per_class);
    s.read("latent_dim", c.data.latent_dim);
    s.read("raw_dim_image", c.data.raw_dim_image);
    s.read("raw_dim_text", c.data.raw_dim_text);
    s.read("noise", c.data.noise);
    s.read("raw_noise", c.data.raw_noise);
  });
  r.section("model", [&](detail::ConfigReader& s) {
    s.read("backbone_width_image", c.model.backbone_width_image);
    s.read("backbone_width_text", c.model.backbone_width_text);
    s.read("num_blocks", c.model.num_blocks);
    s.read("bottleneck_dim", c.model.bottleneck_dim);
    s.read("embed_dim", c.model.embed_dim);
    s.read("include_bias", c.model.include_bias);
  });
  r.section("training", [&](detail::ConfigReader& s) {
    s.read("lr", c.lr);
    s.read("lr_warmup", c.lr_warmup);
    s.read("batch_size", c.batch_size);
    s.read("local_epochs", c.local_epochs);
    s.read("tau_nce", c.loss.tau_nce);
    s.read("lambda_align", c.loss.lambda_align);
    s.read("lambda_prox", c.loss.lambda_prox);
    s.read("lambda_anchor", c.loss.lambda_anchor);
  });
  r.section("router", [&](detail::ConfigReader& s) {
    s.read("hidden", c.router.hidden);
    s.read("heads", c.router.heads);
    s.read("layers", c.router.layers);
    s.read("init_scale", c.router.init_scale);
    s.read("lr", c.router_lr);
    s.read("beta_image", c.router_loss.beta_image);
    s.read("beta_text", c.router_loss.beta_text);
    s.read("beta_entropy", c.router_loss.beta_entropy);
    s.read("beta_align", c.router_loss.beta_align);
    s.read("mask_filled", c.router_loss.mask_filled);
  });
  r.section("fairness", [&](detail::ConfigReader& s) {
    s.read("enabled", c.fairness_enabled);
    s.read("eta_q", c.fairness.eta_q);
    s.read("tau_fair", c.fairness.tau_fair);
    s.read("group_momentum", c.fairness.group_momentum);
    s.read("entropy_regularized", c.fairness.entropy_regularized);
    s.read("zscore", c.fairness.zscore);
  });
  r.section("prototypes", [&](detail::ConfigReader& s) {
    s.read("momentum", c.proto_momentum);
    s.read("probe_samples", c.probe_samples);
  });
  r.section("personalization", [&](detail::ConfigReader& s) {
    s.read("lambda_p", c.lambda_p);
    s.read("lr_scale", c.personal_lr_scale);
  });
  r.finish();

  // The raw input sizes and router width follow the data and encoder.
  c.model.raw_dim_image = c.data.raw_dim_image;
  c.model.raw_dim_text = c.data.raw_dim_text;
  c.router.embed_dim = c.model.embed_dim;
  c.validate();
  return c;
}

inline TrainingConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON (" + e.what() + ")");
  }
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace rcsr
