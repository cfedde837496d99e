#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>
#include <filesystem>

#include <json.hpp>

#include "errors.hpp"
#include "estimators.hpp"
#include "expfam.hpp"
#include "jacobian.hpp"
#include "lasso.hpp"
#include "linalg.hpp"
#include "oracles.hpp"
#include "parallel.hpp"
#include "predictors.hpp"
#include "random.hpp"

namespace klrisk {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------- signals

// Radially chirped texture from the top-left corner, shaded along the
// orientation axis into a flat region at μ_max. contrast = 0 gives μ_max
// everywhere; contrast = 1 spans [μ_min, μ_max].
inline Vec generate_chirp(Grid2D shape, double contrast = 1.0, double orientation = 0.0, double mu_min = 1.0,
                          double mu_max = 100.0) {
  if (shape.size() == 0) throw DomainError("chirp: empty shape");
  if (!(mu_min > 0) || !(mu_max >= mu_min)) throw DomainError("chirp: need 0 < mu_min <= mu_max");
  if (!(contrast >= 0 && contrast <= 1)) throw DomainError("chirp: contrast must be in [0,1]");
  const double h = static_cast<double>(shape.height), w = static_cast<double>(shape.width);
  const double cs = std::cos(orientation), sn = std::sin(orientation);
  // Shading coordinate normalized to [0,1] over the image.
  double umin = INFINITY, umax = -INFINITY;
  for (double y : {0.0, h - 1})
    for (double x : {0.0, w - 1}) {
      double u = x * cs + y * sn;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
    }
  const double span = umax > umin ? umax - umin : 1.0;
  const double ratio = std::log(mu_min / mu_max);
  Vec mu(shape.size());
  for (std::size_t r = 0; r < shape.height; ++r)
    for (std::size_t c = 0; c < shape.width; ++c) {
      double x = static_cast<double>(c), y = static_cast<double>(r);
      double u = (x * cs + y * sn - umin) / span;
      double s = std::clamp((u - 0.6) / 0.1, 0.0, 1.0);
      double rad = std::hypot(x, y);
      double t = 0.5 + 0.5 * std::cos(M_PI * 0.5 * rad * rad / w);
      mu[r * shape.width + c] = mu_max * std::exp(ratio * contrast * (1 - s) * (0.5 + 0.5 * t));
    }
  return mu;
}

// Curved dark stripes of the given period inside a soft disc, on a bright
// background: a high-frequency stand-in for a fingerprint.
inline Vec generate_stripe_texture(Grid2D shape, double period = 8.0, double mu_min = 0.05, double mu_max = 1.0,
                                   double radius_frac = 0.375) {
  if (shape.size() == 0) throw DomainError("stripe: empty shape");
  if (!(mu_min > 0) || !(mu_max >= mu_min)) throw DomainError("stripe: need 0 < mu_min <= mu_max");
  const double h = static_cast<double>(shape.height), w = static_cast<double>(shape.width);
  const double R = radius_frac * std::min(h, w);
  Vec mu(shape.size());
  for (std::size_t r = 0; r < shape.height; ++r)
    for (std::size_t c = 0; c < shape.width; ++c) {
      double x = static_cast<double>(c), y = static_cast<double>(r);
      double u = x * std::cos(0.6) + y * std::sin(0.6) + 3 * std::sin(2 * M_PI * y / h);
      double frac = u / period + 0.5;
      double dist = std::abs(frac - std::floor(frac) - 0.5) * period;
      double valley = std::exp(-dist * dist / 2.0);
      double mask = 1.0 / (1.0 + std::exp((std::hypot(x - w / 2, y - h / 2) - R) / 1.5));
      mu[r * shape.width + c] = mu_max - (mu_max - mu_min) * valley * mask;
    }
  return mu;
}

// Equal-length constant segments.
inline Vec generate_piecewise(std::size_t d, const Vec& levels) {
  if (d == 0 || levels.empty()) throw DomainError("piecewise: need d > 0 and at least one level");
  Vec mu(d);
  for (std::size_t i = 0; i < d; ++i) mu[i] = levels[i * levels.size() / d];
  return mu;
}

// Exactly round(sparsity·q) nonzeros with magnitudes in [low·amplitude,
// amplitude] and random signs, placed among indices ≥ first.
inline Vec generate_sparse_beta(std::size_t q, double sparsity, double amplitude, std::uint64_t seed,
                                double low = 0.2, std::size_t first = 0) {
  if (q == 0) throw DomainError("sparse_beta: q must be > 0");
  if (!(sparsity > 0 && sparsity <= 1)) throw DomainError("sparse_beta: sparsity must be in (0,1]");
  if (!(amplitude > 0) || !(low > 0 && low <= 1)) throw DomainError("sparse_beta: amplitude must be > 0");
  if (first >= q) throw DomainError("sparse_beta: no free coordinates");
  std::size_t k = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(q)));
  k = std::min(k, q - first);
  std::vector<std::size_t> idx(q - first);
  std::iota(idx.begin(), idx.end(), first);
  Rng rng(derive_seed(seed, SeedStream::Beta, 0));
  // Partial Fisher-Yates with our own index draws keeps the result portable.
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  Vec beta(q, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    double mag = amplitude * (low + (1 - low) * u);
    beta[idx[i]] = (rng() >> 63) ? mag : -mag;
  }
  return beta;
}

struct LassoProblem {
  Vec beta;
  Vec mu;
  LassoOptions options;
};

// Sparse β under an orthonormal design. With an offset μ₀ (identity design
// only) the nonzero entries are relative contrasts μᵢ = μ₀(1 ± aᵢ). Otherwise
// an intercept sets min μ = mu_min when μ = Xβ, and max μ = mu_max when
// θ = Xβ.
inline LassoProblem make_lasso_problem(const FamilyModel& m, std::size_t q, double sparsity, double amplitude,
                                       double mu_min, double mu_max, std::uint64_t seed, LassoOptions opt,
                                       double low = 0.2) {
  LassoProblem p;
  p.options = opt;
  LassoOrthogonal x(m, 0.0, opt);
  const bool natural = opt.scale == LassoScale::Natural;
  if (opt.offset) {
    if (opt.design != LassoDesign::Identity) throw DomainError("lasso signal: an offset needs the identity design");
    const double mu0 = *opt.offset;
    const double eta0 = natural ? m.link1(mu0) : mu0;
    Vec a = generate_sparse_beta(q, sparsity, amplitude, seed, low);
    p.mu.assign(q, mu0);
    p.beta.assign(q, 0.0);
    for (std::size_t i = 0; i < q; ++i) {
      if (a[i] == 0) continue;
      p.mu[i] = mu0 * (1 + a[i]);
      if (!m.mu_in_domain(p.mu[i])) throw DomainError("lasso signal: contrast leaves the mean domain (amplitude < 1)");
      p.beta[i] = (natural ? m.link1(p.mu[i]) : p.mu[i]) - eta0;
    }
    return p;
  }
  p.beta = generate_sparse_beta(q, sparsity, amplitude, seed, low, opt.intercept ? 1 : 0);
  if (opt.intercept) {
    Vec rest = x.apply_x(p.beta);
    double anchor = natural ? m.link1(mu_max) - *std::max_element(rest.begin(), rest.end())
                            : mu_min - *std::min_element(rest.begin(), rest.end());
    p.beta[0] = std::sqrt(static_cast<double>(q)) * anchor;
  }
  Vec eta = x.eta_of(p.beta);
  for (double v : eta)
    if (natural ? !m.theta_in_domain(v) : !m.mu_in_domain(v))
      throw DomainError("lasso signal: Xβ outside the parameter domain");
  p.mu = x.mean_of(eta);
  return p;
}

// ---------------------------------------------------------------- PGM

struct PgmScale {
  double offset = 0;
  double scale = 1;  // value = offset + scale · pixel
};

inline PgmScale write_pgm16(const std::string& path, const Vec& img, Grid2D shape) {
  if (img.size() != shape.size()) throw DomainError("pgm: image size does not match shape");
  double lo = *std::min_element(img.begin(), img.end());
  double hi = *std::max_element(img.begin(), img.end());
  PgmScale s{lo, hi > lo ? (hi - lo) / 65535.0 : 1.0};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P5\n" << shape.width << " " << shape.height << "\n65535\n";
  for (double v : img) {
    long p = std::lround((v - s.offset) / s.scale);
    p = std::clamp(p, 0L, 65535L);
    unsigned char b[2] = {static_cast<unsigned char>(p >> 8), static_cast<unsigned char>(p & 0xff)};
    f.write(reinterpret_cast<char*>(b), 2);
  }
  if (!f) throw IoError("write failed: " + path);
  return s;
}

inline Vec read_pgm16(const std::string& path, Grid2D* shape, PgmScale s = {}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0;
  long maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w == 0 || h == 0 || maxval <= 0 || maxval > 65535) throw IoError("not a P5 PGM: " + path);
  f.get();
  Vec img(w * h);
  for (double& v : img) {
    unsigned char b[2] = {0, 0};
    if (maxval > 255) {
      f.read(reinterpret_cast<char*>(b), 2);
      v = s.offset + s.scale * static_cast<double>((b[0] << 8) | b[1]);
    } else {
      f.read(reinterpret_cast<char*>(b), 1);
      v = s.offset + s.scale * static_cast<double>(b[0]);
    }
  }
  if (!f) throw IoError("truncated PGM: " + path);
  if (shape) *shape = {h, w};
  return img;
}

// ---------------------------------------------------------------- config

inline json default_experiment_json() {
  return json{
      {"model", {{"family", "gamma"}, {"nuisance", 3.0}, {"estimator_nuisance", nullptr}}},
      {"signal",
       {{"kind", "stripe"},
        {"height", 64},
        {"width", 64},
        {"length", 64},
        {"contrast", 1.0},
        {"orientation", 0.0},
        {"mu_min", 0.05},
        {"mu_max", 1.0},
        {"period", 8.0},
        {"levels", json::array({2.0, 10.0, 5.0, 8.0})},
        {"sparsity", 0.28},
        {"amplitude", 0.9},
        {"amplitude_low", 0.2},
        {"path", ""},
        {"offset", 0.0},
        {"scale", 1.0}}},
      {"predictor",
       {{"kind", "linear_filter"},
        {"patch", 5},
        {"search", 11},
        {"normalized", true},
        {"design", "identity"},
        {"scale", "natural"},
        {"intercept", false},
        {"offset", 1.0}}},
      {"grid",
       {{"spacing", "geometric"}, {"min", 0.2}, {"max", 10.0}, {"count", 24}, {"relative_to_lambda_max", false}}},
      {"realizations", 50},
      {"probes", {{"count", 0}, {"kind", "gaussian"}}},
      {"downshift", "auto"},
      {"estimators", json::array({"sukls", "dkla", "gsure"})},
      {"oracles", json::array({"mkls", "mkla", "mse_theta"})},
      {"primary", {{"estimator", "sukls"}, {"oracle", "mkls"}}},
      {"diagnose", {{"draws", 20000}}},
      {"seed", 1},
      {"threads", 0},
      {"output", {{"dir", "out"}}},
  };
}

namespace detail {

// Keys that may be switched off with null.
inline bool nullable(const std::string& key) { return key == "model.estimator_nuisance" || key == "predictor.offset"; }

inline bool compatible(const json& def, const json& v, const std::string& key = "") {
  if (def.is_null() || nullable(key)) return v.is_null() || v.is_number();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

inline void merge_strict(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " at " + prefix) + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    json& dst = base[it.key()];
    if (!compatible(dst, it.value(), key)) throw ConfigError("config key " + key + ": wrong type");
    if (dst.is_object())
      merge_strict(dst, it.value(), key);
    else
      dst = it.value();
  }
}

}  // namespace detail

// Merges a user tree over the defaults, rejecting unknown keys and type
// mismatches.
inline json resolve_config(const json& user, json defaults = default_experiment_json()) {
  detail::merge_strict(defaults, user, "");
  return defaults;
}

// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must be key=value: " + assignment);
  std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &cfg;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown config key: " + key);
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ConfigError("config key " + key + " is a section, not a value");
  if (!detail::compatible(*node, value, key)) throw ConfigError("config key " + key + ": wrong type for " + raw);
  *node = value;
}

inline FamilyModel model_from_json(const std::string& family, double nuisance) {
  if (family == "gaussian") return FamilyModel::gaussian(nuisance);
  if (family == "gamma") return FamilyModel::gamma(nuisance);
  if (family == "poisson") return FamilyModel::poisson();
  if (family == "binomial") return FamilyModel::binomial(nuisance);
  if (family == "negbinomial") return FamilyModel::negbinomial(nuisance);
  throw ConfigError("unknown family: " + family);
}

inline EstimatorId estimator_from_string(const std::string& s) {
  for (auto e : {EstimatorId::Sure, EstimatorId::Gsure, EstimatorId::Pure, EstimatorId::GpureNegbin,
                 EstimatorId::Sukls, EstimatorId::Pukla, EstimatorId::Dkla})
    if (s == to_string(e)) return e;
  throw ConfigError("unknown estimator: " + s);
}

inline LossId loss_from_string(const std::string& s) {
  for (auto l : {LossId::MSE_mu, LossId::MSE_theta, LossId::MSE_eta, LossId::MKLA, LossId::MKLS})
    if (s == to_string(l)) return l;
  throw ConfigError("unknown oracle loss: " + s);
}

inline DownshiftMode downshift_from_string(const std::string& s) {
  if (s == "auto") return DownshiftMode::Auto;
  if (s == "exact") return DownshiftMode::Exact;
  if (s == "bernoulli") return DownshiftMode::Bernoulli;
  throw ConfigError("unknown downshift mode: " + s);
}

struct ExperimentConfig {
  json tree = default_experiment_json();

  static ExperimentConfig from_json(const json& user) {
    ExperimentConfig c;
    c.tree = resolve_config(user);
    c.validate();
    return c;
  }

  FamilyModel noise_model() const {
    return model_from_json(tree["model"]["family"].get<std::string>(), tree["model"]["nuisance"].get<double>());
  }
  // Model assumed by the estimators and the LASSO likelihood.
  FamilyModel working_model() const {
    const json& en = tree["model"]["estimator_nuisance"];
    if (en.is_null()) return noise_model();
    return model_from_json(tree["model"]["family"].get<std::string>(), en.get<double>());
  }
  std::size_t realizations() const { return tree["realizations"].get<std::size_t>(); }
  std::uint64_t seed() const { return tree["seed"].get<std::uint64_t>(); }
  std::string predictor_kind() const { return tree["predictor"]["kind"].get<std::string>(); }
  std::string signal_kind() const { return tree["signal"]["kind"].get<std::string>(); }
  bool is_lasso() const { return predictor_kind() == "lasso"; }

  std::vector<EstimatorId> estimators() const {
    std::vector<EstimatorId> r;
    for (const auto& s : tree["estimators"]) r.push_back(estimator_from_string(s.get<std::string>()));
    return r;
  }
  std::vector<LossId> oracles() const {
    std::vector<LossId> r;
    for (const auto& s : tree["oracles"]) r.push_back(loss_from_string(s.get<std::string>()));
    return r;
  }

  Grid2D grid2d() const {
    const json& s = tree["signal"];
    std::string k = signal_kind();
    if (k == "piecewise" || k == "constant" || k == "lasso") return {1, s["length"].get<std::size_t>()};
    return {s["height"].get<std::size_t>(), s["width"].get<std::size_t>()};
  }

  LassoOptions lasso_options() const {
    LassoOptions o;
    std::string d = tree["predictor"]["design"].get<std::string>();
    if (d == "identity") o.design = LassoDesign::Identity;
    else if (d == "hadamard") o.design = LassoDesign::Hadamard;
    else if (d == "haar") o.design = LassoDesign::Haar;
    else throw ConfigError("unknown LASSO design: " + d);
    std::string sc = tree["predictor"]["scale"].get<std::string>();
    if (sc == "mean") o.scale = LassoScale::Mean;
    else if (sc == "natural") o.scale = LassoScale::Natural;
    else throw ConfigError("unknown LASSO scale: " + sc);
    const json& off = tree["predictor"]["offset"];
    if (!off.is_null()) o.offset = off.get<double>();
    o.intercept = tree["predictor"]["intercept"].get<bool>();
    return o;
  }

  // Tuning grid; relative grids are multiplied by λ_max later.
  Vec grid_values() const {
    const json& g = tree["grid"];
    double lo = g["min"].get<double>(), hi = g["max"].get<double>();
    std::size_t n = g["count"].get<std::size_t>();
    std::string sp = g["spacing"].get<std::string>();
    Vec v(n);
    for (std::size_t i = 0; i < n; ++i) {
      double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
      v[i] = sp == "geometric" ? lo * std::pow(hi / lo, t) : lo + (hi - lo) * t;
    }
    if (n == 1) v[0] = lo;
    return v;
  }

  void validate() const {
    try {
      (void)noise_model();
      (void)working_model();
      (void)estimators();
      (void)oracles();
      (void)downshift_from_string(tree["downshift"].get<std::string>());
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    const json& g = tree["grid"];
    std::string sp = g["spacing"].get<std::string>();
    if (sp != "geometric" && sp != "linear") throw ConfigError("grid.spacing must be geometric or linear");
    if (g["count"].get<long>() < 1) throw ConfigError("grid.count must be >= 1");
    double lo = g["min"].get<double>(), hi = g["max"].get<double>();
    if (g["count"].get<long>() > 1 && !(hi > lo)) throw ConfigError("grid must be strictly increasing (max > min)");
    if (sp == "geometric" && !(lo > 0)) throw ConfigError("geometric grid needs min > 0");
    if (tree["realizations"].get<long>() < 1) throw ConfigError("realizations must be >= 1");
    if (tree["probes"]["count"].get<long>() < 0) throw ConfigError("probes.count must be >= 0");
    std::string pk = tree["probes"]["kind"].get<std::string>();
    if (pk != "gaussian" && pk != "rademacher") throw ConfigError("probes.kind must be gaussian or rademacher");
    std::string k = predictor_kind();
    if (k != "linear_filter" && k != "nlm" && k != "lasso" && k != "identity" && k != "constant_mean")
      throw ConfigError("unknown predictor kind: " + k);
    std::string s = signal_kind();
    if (s != "stripe" && s != "chirp" && s != "piecewise" && s != "constant" && s != "lasso" && s != "pgm")
      throw ConfigError("unknown signal kind: " + s);
    if ((s == "lasso") != (k == "lasso")) throw ConfigError("the lasso predictor and the lasso signal go together");
    if (k == "lasso") (void)lasso_options();
    auto has = [&](const char* name) {
      for (const auto& e : tree["estimators"])
        if (e == name) return true;
      return false;
    };
    auto has_oracle = [&](const char* name) {
      for (const auto& e : tree["oracles"])
        if (e == name) return true;
      return false;
    };
    std::string pe = tree["primary"]["estimator"].get<std::string>();
    std::string po = tree["primary"]["oracle"].get<std::string>();
    if (!pe.empty() && !has(pe.c_str())) throw ConfigError("primary.estimator must be listed in estimators");
    if (!po.empty() && !has_oracle(po.c_str())) throw ConfigError("primary.oracle must be listed in oracles");
  }
};

struct Signal {
  Vec mu;
  Grid2D shape;
  Vec beta;  // LASSO ground truth
};

inline Signal make_signal(const ExperimentConfig& cfg) {
  const json& s = cfg.tree["signal"];
  Signal sig;
  sig.shape = cfg.grid2d();
  std::string k = cfg.signal_kind();
  double mu_min = s["mu_min"].get<double>(), mu_max = s["mu_max"].get<double>();
  try {
    if (k == "stripe") {
      sig.mu = generate_stripe_texture(sig.shape, s["period"].get<double>(), mu_min, mu_max);
    } else if (k == "chirp") {
      sig.mu = generate_chirp(sig.shape, s["contrast"].get<double>(), s["orientation"].get<double>(), mu_min, mu_max);
    } else if (k == "piecewise") {
      sig.mu = generate_piecewise(sig.shape.size(), s["levels"].get<Vec>());
    } else if (k == "constant") {
      sig.mu.assign(sig.shape.size(), mu_max);
    } else if (k == "lasso") {
      auto p = make_lasso_problem(cfg.noise_model(), sig.shape.size(), s["sparsity"].get<double>(),
                                  s["amplitude"].get<double>(), mu_min, mu_max, cfg.seed(), cfg.lasso_options(),
                                  s["amplitude_low"].get<double>());
      sig.mu = p.mu;
      sig.beta = p.beta;
    } else if (k == "pgm") {
      Grid2D g;
      sig.mu = read_pgm16(s["path"].get<std::string>(), &g, {s["offset"].get<double>(), s["scale"].get<double>()});
      sig.shape = g;
    }
  } catch (const DomainError& e) {
    throw ConfigError(std::string("signal: ") + e.what());
  }
  FamilyModel m = cfg.noise_model();
  for (double v : sig.mu)
    if (!m.mu_in_domain(v)) throw ConfigError("signal: mean " + std::to_string(v) + " outside the " + m.name() + " domain");
  return sig;
}

inline std::unique_ptr<Predictor> make_predictor(const ExperimentConfig& cfg, double param, Grid2D shape) {
  const json& p = cfg.tree["predictor"];
  std::string k = cfg.predictor_kind();
  if (k == "linear_filter") return std::make_unique<LinearFilter>(shape, param);
  if (k == "nlm") {
    NlmOptions o;
    o.patch = p["patch"].get<std::size_t>();
    o.search = p["search"].get<std::size_t>();
    o.normalized = p["normalized"].get<bool>();
    return std::make_unique<NonLocalMeans>(shape, param, cfg.working_model(), o);
  }
  if (k == "lasso") return std::make_unique<LassoOrthogonal>(cfg.working_model(), param, cfg.lasso_options());
  if (k == "identity") return std::make_unique<Identity>();
  if (k == "constant_mean") return std::make_unique<ConstantMean>();
  throw ConfigError("unknown predictor kind: " + k);
}

// Wraps lin.jvp so repeated probe directions (shared between estimators)
// are computed once.
inline void memoize_jvp(Linearization& lin) {
  struct Cache {
    std::mutex mu;
    std::map<Vec, Vec> store;
  };
  auto cache = std::make_shared<Cache>();
  VecFn inner = lin.jvp;
  lin.jvp = [cache, inner](const Vec& z) {
    {
      std::lock_guard<std::mutex> lock(cache->mu);
      auto it = cache->store.find(z);
      if (it != cache->store.end()) return it->second;
    }
    Vec r = inner(z);
    std::lock_guard<std::mutex> lock(cache->mu);
    cache->store.emplace(z, r);
    return r;
  };
}

// ---------------------------------------------------------------- sweep

using Matrix = std::vector<Vec>;  // realizations × grid points

struct Curve {
  std::string name;
  bool estimator = false;
  std::string loss;
  std::string constant_convention;
  Vec mean, se;
  std::vector<std::size_t> missing;
  Matrix values;

  // Argmin of the mean curve, skipping missing points.
  std::size_t argmin() const {
    std::size_t best = 0;
    double bv = INFINITY;
    for (std::size_t k = 0; k < mean.size(); ++k)
      if (std::isfinite(mean[k]) && mean[k] < bv) {
        bv = mean[k];
        best = k;
      }
    return best;
  }
  std::size_t argmin(std::size_t r) const {
    std::size_t best = 0;
    double bv = INFINITY;
    for (std::size_t k = 0; k < values[r].size(); ++k)
      if (std::isfinite(values[r][k]) && values[r][k] < bv) {
        bv = values[r][k];
        best = k;
      }
    return best;
  }
};

struct SweepResult {
  int schema_version = kSchemaVersion;
  json config;
  Vec grid;
  double lambda_max = 0;  // LASSO only
  std::vector<std::uint64_t> noise_seeds;
  std::vector<std::uint64_t> probe_seeds;
  std::vector<Curve> curves;
  Matrix mnae;
  Vec mnae_mean, mnae_se;
  Vec jacobian_ratio;  // mean over realizations of maxᵢ (∂μ̂ᵢ/∂yᵢ)/μ̂ᵢ, NaN if unknown
  std::vector<std::size_t> floor_count;
  std::string primary_estimator, primary_oracle;
  std::size_t est_argmin = 0, oracle_argmin = 0;
  double mnae_at_est_argmin = NAN, mnae_at_oracle_argmin = NAN;
  Matrix errors, fn, fp;  // LASSO selection metrics per realization and point

  const Curve& curve(const std::string& name) const {
    for (const auto& c : curves)
      if (c.name == name) return c;
    throw Error("no curve named " + name);
  }
  bool has_curve(const std::string& name) const {
    for (const auto& c : curves)
      if (c.name == name) return true;
    return false;
  }
};

inline MeanSe mean_se_finite(const Vec& v, std::size_t* missing = nullptr) {
  Vec ok;
  for (double x : v)
    if (std::isfinite(x)) ok.push_back(x);
  if (missing) *missing = v.size() - ok.size();
  if (ok.empty()) return {NAN, NAN, 0};
  MeanSe m = mean_se(ok);
  if (ok.size() < 2) m.se = NAN;
  return m;
}

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

// Estimators applied to a mean predictor; GPURE works on p̂ = m̂/(r + m̂).
inline RiskEstimate estimate_for_mean(EstimatorId id, const FamilyModel& m, const Linearization& lin,
                                      const EstimatorOptions& opt) {
  if (id == EstimatorId::GpureNegbin && m.kind() == FamilyKind::NegBinomial)
    return estimate(id, m, probability_linearization(lin, m.nuisance()), opt);
  return estimate(id, m, lin, opt);
}

inline SweepResult run_sweep(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  SweepResult res;
  res.config = cfg.tree;
  const FamilyModel truth = cfg.noise_model();
  const FamilyModel work = cfg.working_model();
  const Signal sig = make_signal(cfg);
  const std::size_t d = sig.mu.size();
  const std::size_t R = cfg.realizations();
  const std::uint64_t seed = cfg.seed();
  const auto ests = cfg.estimators();
  const auto oras = cfg.oracles();

  res.noise_seeds.resize(R);
  res.probe_seeds.resize(R);
  for (std::size_t r = 0; r < R; ++r) {
    res.noise_seeds[r] = noise_seed(seed, r);
    res.probe_seeds[r] = derive_seed(seed, SeedStream::Probe, r);
  }

  res.grid = cfg.grid_values();
  if (cfg.is_lasso() && cfg.tree["grid"]["relative_to_lambda_max"].get<bool>()) {
    LassoOrthogonal probe(work, 1.0, cfg.lasso_options());
    res.lambda_max = probe.lambda_max(sample(truth, sig.mu, res.noise_seeds[0]));
    for (double& g : res.grid) g *= res.lambda_max;
  }
  const std::size_t K = res.grid.size();

  EstimatorOptions eopt;
  std::size_t np = cfg.tree["probes"]["count"].get<std::size_t>();
  eopt.plan.n_probes = np == 0 ? default_probe_count(d) : np;
  eopt.plan.kind = cfg.tree["probes"]["kind"].get<std::string>() == "rademacher" ? ProbeKind::Rademacher
                                                                                  : ProbeKind::Gaussian;
  eopt.downshift = downshift_from_string(cfg.tree["downshift"].get<std::string>());

  const std::size_t nc = ests.size() + oras.size();
  std::vector<Matrix> vals(nc, Matrix(R, Vec(K, NAN)));
  Matrix mn(R, Vec(K, NAN)), ratio(R, Vec(K, NAN));
  std::vector<std::vector<std::size_t>> floors(R, std::vector<std::size_t>(K, 0));
  const bool lasso = cfg.is_lasso();
  if (lasso) {
    res.errors.assign(R, Vec(K, NAN));
    res.fn.assign(R, Vec(K, NAN));
    res.fp.assign(R, Vec(K, NAN));
  }
  std::vector<std::unique_ptr<Predictor>> preds;
  for (double g : res.grid) preds.push_back(make_predictor(cfg, g, sig.shape));

  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  parallel_for(R, [&](std::size_t r) {
    const Vec y = sample(truth, sig.mu, res.noise_seeds[r]);
    EstimatorOptions o = eopt;
    o.plan.seed = res.probe_seeds[r];
    WarmStart warm;
    // LASSO paths are solved from large to small λ with warm starts.
    for (std::size_t step = 0; step < K; ++step) {
      std::size_t k = lasso ? K - 1 - step : step;
      try {
        Linearization lin = preds[k]->linearize(y, lasso ? &warm : nullptr);
        if (!lin.diagonal) memoize_jvp(lin);
        std::size_t fc = 0;
        Vec muh = floored_prediction(truth, y, lin.value, &fc);
        for (std::size_t e = 0; e < ests.size(); ++e) {
          try {
            RiskEstimate est = estimate_for_mean(ests[e], work, lin, o);
            vals[e][r][k] = est.value;
            fc = std::max(fc, est.floor_count);
          } catch (const DomainError&) {
          } catch (const NonConvergence&) {
          }
        }
        for (std::size_t q = 0; q < oras.size(); ++q) vals[ests.size() + q][r][k] = loss_value(oras[q], truth, sig.mu, muh);
        floors[r][k] = fc;
        mn[r][k] = mnae(truth, sig.mu, muh);
        if (lin.diagonal) {
          double mx = 0;
          for (std::size_t i = 0; i < d; ++i) mx = std::max(mx, (*lin.diagonal)[i] / muh[i]);
          ratio[r][k] = mx;
        }
        if (lasso) {
          SelectionMetrics sm = selection_metrics(sig.beta, warm.state, 1e-9 * norm_inf(warm.state));
          res.errors[r][k] = sm.errors;
          res.fn[r][k] = sm.fn;
          res.fp[r][k] = sm.fp;
        }
      } catch (const DomainError&) {
      } catch (const NonConvergence&) {
        warm.state.clear();
      }
    }
    std::size_t n = ++done;
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mu);
      progress(n, R);
    }
  });

  for (std::size_t c = 0; c < nc; ++c) {
    Curve cv;
    if (c < ests.size()) {
      cv.name = to_string(ests[c]);
      cv.estimator = true;
      switch (ests[c]) {
        case EstimatorId::Sure:
        case EstimatorId::Pure: cv.loss = "mse_mu"; break;
        case EstimatorId::Gsure: cv.loss = "mse_theta"; break;
        case EstimatorId::GpureNegbin: cv.loss = "mse_eta"; break;
        case EstimatorId::Sukls: cv.loss = "mkls"; break;
        default: cv.loss = "mkla";
      }
    } else {
      cv.name = to_string(oras[c - ests.size()]);
      cv.loss = cv.name;
    }
    cv.values = vals[c];
    cv.mean.resize(K);
    cv.se.resize(K);
    cv.missing.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      Vec col(R);
      for (std::size_t r = 0; r < R; ++r) col[r] = vals[c][r][k];
      MeanSe m = mean_se_finite(col, &cv.missing[k]);
      cv.mean[k] = m.mean;
      cv.se[k] = m.se;
    }
    res.curves.push_back(std::move(cv));
  }
  for (auto& cv : res.curves) {
    if (!cv.estimator) continue;
    EstimatorId id = estimator_from_string(cv.name);
    switch (id) {
      case EstimatorId::Gsure:
        cv.constant_convention = to_string(default_last_term(work) ? Convention::None : Convention::MinusThetaNorm);
        break;
      case EstimatorId::Sukls: cv.constant_convention = to_string(Convention::MinusLogPartition); break;
      case EstimatorId::Pukla: cv.constant_convention = to_string(Convention::PlusMeanTerms); break;
      case EstimatorId::Dkla: cv.constant_convention = to_string(Convention::DeltaMethod); break;
      default: cv.constant_convention = to_string(Convention::None);
    }
  }

  res.mnae = mn;
  res.mnae_mean.resize(K);
  res.mnae_se.resize(K);
  res.jacobian_ratio.resize(K);
  res.floor_count.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    Vec col(R), rc(R);
    std::size_t f = 0;
    for (std::size_t r = 0; r < R; ++r) {
      col[r] = mn[r][k];
      rc[r] = ratio[r][k];
      f += floors[r][k];
    }
    MeanSe m = mean_se_finite(col);
    res.mnae_mean[k] = m.mean;
    res.mnae_se[k] = m.se;
    res.jacobian_ratio[k] = mean_se_finite(rc).mean;
    res.floor_count[k] = f;
  }

  res.primary_estimator = cfg.tree["primary"]["estimator"].get<std::string>();
  res.primary_oracle = cfg.tree["primary"]["oracle"].get<std::string>();
  if (res.primary_estimator.empty() && !ests.empty()) res.primary_estimator = to_string(ests[0]);
  if (res.primary_oracle.empty() && !oras.empty()) res.primary_oracle = to_string(oras[0]);
  if (res.has_curve(res.primary_estimator)) {
    res.est_argmin = res.curve(res.primary_estimator).argmin();
    res.mnae_at_est_argmin = res.mnae_mean[res.est_argmin];
  }
  if (res.has_curve(res.primary_oracle)) {
    res.oracle_argmin = res.curve(res.primary_oracle).argmin();
    res.mnae_at_oracle_argmin = res.mnae_mean[res.oracle_argmin];
  }
  return res;
}

// Per-objective LASSO selection: each realization's own argmin, then the
// selection metrics at that λ averaged over realizations.
struct SelectionSummary {
  std::string objective;
  bool estimator = false;
  std::vector<std::size_t> argmins;
  double mean_index = 0, mean_param = 0;
  double errors = 0, errors_sd = 0, fn = 0, fn_sd = 0, fp = 0, fp_sd = 0;
};

inline std::vector<SelectionSummary> selection_summary(const SweepResult& res) {
  if (res.errors.empty()) throw ConfigError("selection summary needs a LASSO sweep");
  const std::size_t R = res.errors.size();
  auto sd = [](const Vec& v) {
    MeanSe m = mean_se(v);
    return v.size() > 1 ? m.se * std::sqrt(static_cast<double>(v.size())) : 0.0;
  };
  std::vector<SelectionSummary> out;
  for (const auto& c : res.curves) {
    SelectionSummary s;
    s.objective = c.name;
    s.estimator = c.estimator;
    Vec idx(R), par(R), e(R), fn(R), fp(R);
    for (std::size_t r = 0; r < R; ++r) {
      std::size_t k = c.argmin(r);
      s.argmins.push_back(k);
      idx[r] = static_cast<double>(k);
      par[r] = res.grid[k];
      e[r] = res.errors[r][k];
      fn[r] = res.fn[r][k];
      fp[r] = res.fp[r][k];
    }
    s.mean_index = mean(idx);
    s.mean_param = mean(par);
    s.errors = mean(e);
    s.errors_sd = sd(e);
    s.fn = mean(fn);
    s.fn_sd = sd(fn);
    s.fp = mean(fp);
    s.fp_sd = sd(fp);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- persistence

namespace detail {

inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double unnum(const json& j) { return j.is_null() ? NAN : j.get<double>(); }

inline json vec_json(const Vec& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline Vec json_vec(const json& j) {
  Vec v;
  for (const auto& x : j) v.push_back(unnum(x));
  return v;
}

inline json mat_json(const Matrix& m) {
  json a = json::array();
  for (const auto& row : m) a.push_back(vec_json(row));
  return a;
}

inline Matrix json_mat(const json& j) {
  Matrix m;
  for (const auto& row : j) m.push_back(json_vec(row));
  return m;
}

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline json to_json(const SweepResult& r) {
  json j;
  j["schema_version"] = r.schema_version;
  j["config"] = r.config;
  j["grid"] = detail::vec_json(r.grid);
  j["lambda_max"] = detail::num(r.lambda_max);
  j["noise_seeds"] = r.noise_seeds;
  j["probe_seeds"] = r.probe_seeds;
  json cs = json::array();
  for (const auto& c : r.curves) {
    cs.push_back({{"name", c.name},
                  {"estimator", c.estimator},
                  {"loss", c.loss},
                  {"constant_convention", c.constant_convention},
                  {"mean", detail::vec_json(c.mean)},
                  {"se", detail::vec_json(c.se)},
                  {"missing", c.missing},
                  {"values", detail::mat_json(c.values)}});
  }
  j["curves"] = cs;
  j["mnae"] = detail::mat_json(r.mnae);
  j["mnae_mean"] = detail::vec_json(r.mnae_mean);
  j["mnae_se"] = detail::vec_json(r.mnae_se);
  j["jacobian_ratio"] = detail::vec_json(r.jacobian_ratio);
  j["floor_count"] = r.floor_count;
  j["primary_estimator"] = r.primary_estimator;
  j["primary_oracle"] = r.primary_oracle;
  j["est_argmin"] = r.est_argmin;
  j["oracle_argmin"] = r.oracle_argmin;
  j["mnae_at_est_argmin"] = detail::num(r.mnae_at_est_argmin);
  j["mnae_at_oracle_argmin"] = detail::num(r.mnae_at_oracle_argmin);
  j["errors"] = detail::mat_json(r.errors);
  j["fn"] = detail::mat_json(r.fn);
  j["fp"] = detail::mat_json(r.fp);
  return j;
}

inline SweepResult from_json(const json& j) {
  if (!j.contains("schema_version")) throw IoError("sweep sidecar has no schema_version");
  int v = j["schema_version"].get<int>();
  if (v != kSchemaVersion)
    throw IoError("unsupported schema_version " + std::to_string(v) + " (expected " + std::to_string(kSchemaVersion) +
                  ")");
  SweepResult r;
  r.schema_version = v;
  r.config = j["config"];
  r.grid = detail::json_vec(j["grid"]);
  r.lambda_max = detail::unnum(j["lambda_max"]);
  if (std::isnan(r.lambda_max)) r.lambda_max = 0;
  r.noise_seeds = j["noise_seeds"].get<std::vector<std::uint64_t>>();
  r.probe_seeds = j["probe_seeds"].get<std::vector<std::uint64_t>>();
  for (const auto& c : j["curves"]) {
    Curve cv;
    cv.name = c["name"].get<std::string>();
    cv.estimator = c["estimator"].get<bool>();
    cv.loss = c["loss"].get<std::string>();
    cv.constant_convention = c["constant_convention"].get<std::string>();
    cv.mean = detail::json_vec(c["mean"]);
    cv.se = detail::json_vec(c["se"]);
    cv.missing = c["missing"].get<std::vector<std::size_t>>();
    cv.values = detail::json_mat(c["values"]);
    r.curves.push_back(std::move(cv));
  }
  r.mnae = detail::json_mat(j["mnae"]);
  r.mnae_mean = detail::json_vec(j["mnae_mean"]);
  r.mnae_se = detail::json_vec(j["mnae_se"]);
  r.jacobian_ratio = detail::json_vec(j["jacobian_ratio"]);
  r.floor_count = j["floor_count"].get<std::vector<std::size_t>>();
  r.primary_estimator = j["primary_estimator"].get<std::string>();
  r.primary_oracle = j["primary_oracle"].get<std::string>();
  r.est_argmin = j["est_argmin"].get<std::size_t>();
  r.oracle_argmin = j["oracle_argmin"].get<std::size_t>();
  r.mnae_at_est_argmin = detail::unnum(j["mnae_at_est_argmin"]);
  r.mnae_at_oracle_argmin = detail::unnum(j["mnae_at_oracle_argmin"]);
  r.errors = detail::json_mat(j["errors"]);
  r.fn = detail::json_mat(j["fn"]);
  r.fp = detail::json_mat(j["fp"]);
  return r;
}

struct SweepPaths {
  std::string csv, curves_csv, json;
  static SweepPaths in(const std::string& dir) {
    namespace fs = std::filesystem;
    return {(fs::path(dir) / "sweep.csv").string(), (fs::path(dir) / "curves.csv").string(),
            (fs::path(dir) / "sweep.json").string()};
  }
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline void persist(const SweepResult& r, const SweepPaths& paths) {
  std::ostringstream csv;
  csv << "param,est_mean,est_se,oracle_mean,oracle_se,mnae_at_est_argmin,floor_count\n";
  const Curve* e = r.has_curve(r.primary_estimator) ? &r.curve(r.primary_estimator) : nullptr;
  const Curve* o = r.has_curve(r.primary_oracle) ? &r.curve(r.primary_oracle) : nullptr;
  for (std::size_t k = 0; k < r.grid.size(); ++k) {
    csv << detail::fmt(r.grid[k]) << ',' << detail::fmt(e ? e->mean[k] : NAN) << ','
        << detail::fmt(e ? e->se[k] : NAN) << ',' << detail::fmt(o ? o->mean[k] : NAN) << ','
        << detail::fmt(o ? o->se[k] : NAN) << ',' << detail::fmt(r.mnae_at_est_argmin) << ',' << r.floor_count[k]
        << '\n';
  }
  write_text(paths.csv, csv.str());

  std::ostringstream cc;
  cc << "param";
  for (const auto& c : r.curves) cc << ',' << c.name << "_mean," << c.name << "_se";
  cc << ",mnae_mean,mnae_se\n";
  for (std::size_t k = 0; k < r.grid.size(); ++k) {
    cc << detail::fmt(r.grid[k]);
    for (const auto& c : r.curves) cc << ',' << detail::fmt(c.mean[k]) << ',' << detail::fmt(c.se[k]);
    cc << ',' << detail::fmt(r.mnae_mean[k]) << ',' << detail::fmt(r.mnae_se[k]) << '\n';
  }
  write_text(paths.curves_csv, cc.str());
  write_text(paths.json, to_json(r).dump(1) + "\n");
}

inline SweepResult load(const SweepPaths& paths) {
  std::string text = read_text(paths.json);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError("malformed sweep sidecar " + paths.json + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace klrisk
