#include "diffcast/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace diffcast {

using nlohmann::json;

std::string to_string(Sampler s) { return s == Sampler::DDPM ? "ddpm" : "ddim"; }
std::string to_string(SigmaKind s) { return s == SigmaKind::SqrtBeta ? "sqrt_beta" : "posterior"; }
std::string to_string(BackboneKind b) { return b == BackboneKind::ConvGRU ? "convgru" : "simvp"; }

std::vector<std::string> validate_config(const ModelConfig& cfg) {
  std::vector<std::string> v;
  if (cfg.L_in < 1) v.push_back("L_in must be >= 1");
  if (cfg.L_out < 1) v.push_back("L_out must be >= 1");
  if (cfg.K < 1) v.push_back("K must be >= 1");
  if (cfg.K >= 1 && cfg.L_out >= 1 && cfg.L_out % cfg.K != 0) v.push_back("K must divide L_out");
  if (cfg.T < 1) v.push_back("T must be >= 1");
  if (cfg.sample_steps < 1) v.push_back("sample_steps must be >= 1");
  if (cfg.sample_steps > cfg.T) v.push_back("sample_steps must be <= T");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0) v.push_back("alpha out of [0,1]");
  if (cfg.hidden_size < 1) v.push_back("hidden_size must be >= 1");
  if (cfg.channel_mults.empty()) v.push_back("channel_mults must be non-empty");
  for (int64_t m : cfg.channel_mults)
    if (m < 1) {
      v.push_back("channel_mults entries must be >= 1");
      break;
    }
  if (cfg.depth != static_cast<int64_t>(cfg.channel_mults.size()))
    v.push_back("depth must equal length of channel_mults");
  if (!(cfg.beta_start > 0.0) || !(cfg.beta_start <= cfg.beta_end) || !(cfg.beta_end < 1.0))
    v.push_back("beta endpoints must satisfy 0 < beta_start <= beta_end < 1");
  if (!(cfg.lr > 0.0)) v.push_back("lr must be > 0");
  if (cfg.ddim_eta < 0.0 || cfg.ddim_eta > 1.0) v.push_back("ddim_eta out of [0,1]");
  return v;
}

namespace {

const std::set<std::string> kKnownKeys = {
    "L_in",       "L_out",      "K",          "T",        "sample_steps", "alpha",
    "hidden_size", "channel_mults", "depth",  "sampler",  "frozen_backbone", "use_globalnet",
    "seed",       "beta_start", "beta_end",   "sigma_kind", "lr",         "backbone",
    "ddim_eta",   "per_segment_t"};

Sampler sampler_from_string(const std::string& s) {
  if (s == "ddpm") return Sampler::DDPM;
  if (s == "ddim") return Sampler::DDIM;
  throw std::invalid_argument("unknown sampler '" + s + "' (expected ddpm or ddim)");
}

SigmaKind sigma_from_string(const std::string& s) {
  if (s == "sqrt_beta") return SigmaKind::SqrtBeta;
  if (s == "posterior") return SigmaKind::Posterior;
  throw std::invalid_argument("unknown sigma_kind '" + s + "' (expected sqrt_beta or posterior)");
}

BackboneKind backbone_from_string(const std::string& s) {
  if (s == "convgru") return BackboneKind::ConvGRU;
  if (s == "simvp") return BackboneKind::SimVP;
  throw std::invalid_argument("unknown backbone '" + s + "' (expected convgru or simvp)");
}

}  // namespace

ModelConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKnownKeys.count(it.key())) throw std::invalid_argument("unknown config key '" + it.key() + "'");

  ModelConfig cfg;
  auto get_int = [&](const char* k, int64_t& dst) {
    if (j.contains(k)) dst = j.at(k).get<int64_t>();
  };
  auto get_real = [&](const char* k, real& dst) {
    if (j.contains(k)) dst = j.at(k).get<real>();
  };
  auto get_bool = [&](const char* k, bool& dst) {
    if (j.contains(k)) dst = j.at(k).get<bool>();
  };
  get_int("L_in", cfg.L_in);
  get_int("L_out", cfg.L_out);
  get_int("K", cfg.K);
  get_int("T", cfg.T);
  get_int("sample_steps", cfg.sample_steps);
  get_real("alpha", cfg.alpha);
  get_int("hidden_size", cfg.hidden_size);
  if (j.contains("channel_mults")) cfg.channel_mults = j.at("channel_mults").get<std::vector<int64_t>>();
  if (j.contains("depth")) cfg.depth = j.at("depth").get<int64_t>();
  else cfg.depth = static_cast<int64_t>(cfg.channel_mults.size());
  if (j.contains("sampler")) cfg.sampler = sampler_from_string(j.at("sampler").get<std::string>());
  get_bool("frozen_backbone", cfg.frozen_backbone);
  get_bool("use_globalnet", cfg.use_globalnet);
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  get_real("beta_start", cfg.beta_start);
  get_real("beta_end", cfg.beta_end);
  if (j.contains("sigma_kind")) cfg.sigma_kind = sigma_from_string(j.at("sigma_kind").get<std::string>());
  get_real("lr", cfg.lr);
  if (j.contains("backbone")) cfg.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  get_real("ddim_eta", cfg.ddim_eta);
  get_bool("per_segment_t", cfg.per_segment_t);
  return cfg;
}

std::string config_to_json_text(const ModelConfig& cfg) {
  json j;
  j["L_in"] = cfg.L_in;
  j["L_out"] = cfg.L_out;
  j["K"] = cfg.K;
  j["T"] = cfg.T;
  j["sample_steps"] = cfg.sample_steps;
  j["alpha"] = cfg.alpha;
  j["hidden_size"] = cfg.hidden_size;
  j["channel_mults"] = cfg.channel_mults;
  j["depth"] = cfg.depth;
  j["sampler"] = to_string(cfg.sampler);
  j["frozen_backbone"] = cfg.frozen_backbone;
  j["use_globalnet"] = cfg.use_globalnet;
  j["seed"] = cfg.seed;
  j["beta_start"] = cfg.beta_start;
  j["beta_end"] = cfg.beta_end;
  j["sigma_kind"] = to_string(cfg.sigma_kind);
  j["lr"] = cfg.lr;
  j["backbone"] = to_string(cfg.backbone);
  j["ddim_eta"] = cfg.ddim_eta;
  j["per_segment_t"] = cfg.per_segment_t;
  return j.dump(2);
}

namespace {

uint64_t fnv1a(const std::string& text) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

uint64_t config_hash(const ModelConfig& cfg) { return fnv1a(config_to_json_text(cfg)); }

uint64_t config_arch_hash(const ModelConfig& cfg) {
  json j;
  j["L_in"] = cfg.L_in;
  j["L_out"] = cfg.L_out;
  j["K"] = cfg.K;
  j["T"] = cfg.T;
  j["hidden_size"] = cfg.hidden_size;
  j["channel_mults"] = cfg.channel_mults;
  j["depth"] = cfg.depth;
  j["use_globalnet"] = cfg.use_globalnet;
  j["backbone"] = to_string(cfg.backbone);
  j["beta_start"] = cfg.beta_start;
  j["beta_end"] = cfg.beta_end;
  j["sigma_kind"] = to_string(cfg.sigma_kind);
  return fnv1a(j.dump());
}

Prediction make_prediction(Tensor mu, Tensor residual_hat) {
  check_same_shape(mu, residual_hat, "make_prediction");
  Tensor y_hat = mu;
  y_hat.add_(residual_hat);
  Tensor clamped = y_hat;
  real* d = clamped.data();
  for (int64_t i = 0; i < clamped.numel(); ++i) d[i] = std::clamp(d[i], 0.0, 1.0);
  return Prediction{std::move(mu), std::move(residual_hat), std::move(y_hat), std::move(clamped)};
}

RadarSequence normalize(const Tensor& raw, DataRange range) {
  if (!(range.hi > range.lo)) throw std::invalid_argument("normalize: degenerate data_range (max <= min)");
  Tensor out = raw;
  const real span = range.hi - range.lo;
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const real clipped = std::clamp(d[i], range.lo, range.hi);
    d[i] = (clipped - range.lo) / span;
  }
  return RadarSequence{std::move(out), range};
}

real denormalize_value(real v01, DataRange range) { return v01 * (range.hi - range.lo) + range.lo; }

Tensor denormalize(const RadarSequence& seq) {
  Tensor out = seq.frames;
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) d[i] = denormalize_value(d[i], seq.data_range);
  return out;
}

Tensor to_nchw(const Tensor& lhwc) {
  if (lhwc.ndim() != 4) throw std::invalid_argument("to_nchw expects [L,H,W,C]");
  return lhwc.permuted({0, 3, 1, 2});
}

Tensor from_nchw(const Tensor& nchw) {
  if (nchw.ndim() != 4) throw std::invalid_argument("from_nchw expects [L,C,H,W]");
  return nchw.permuted({0, 2, 3, 1});
}

}  // namespace diffcast
