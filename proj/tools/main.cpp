// diffcast: synthetic benchmark generation, training, forecasting,
// verification metrics, and forecast panels from one binary.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "diffcast/checkpoint.hpp"
#include "diffcast/data.hpp"
#include "diffcast/framework.hpp"
#include "diffcast/metrics.hpp"
#include "diffcast/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace diffcast;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

// Flag > file > default precedence for the training/forecast config.
struct ConfigOverrides {
  std::optional<std::string> backbone;
  std::optional<real> alpha;
  std::optional<bool> frozen;
  std::optional<bool> no_globalnet;
  std::optional<uint64_t> seed;
  std::optional<std::string> sampler;
  std::optional<int64_t> sample_steps;

  void apply(ModelConfig& cfg) const {
    if (backbone) cfg.backbone = (*backbone == "simvp") ? BackboneKind::SimVP : BackboneKind::ConvGRU;
    if (alpha) cfg.alpha = *alpha;
    if (frozen) cfg.frozen_backbone = *frozen;
    if (no_globalnet && *no_globalnet) cfg.use_globalnet = false;
    if (seed) cfg.seed = *seed;
    if (sampler) cfg.sampler = (*sampler == "ddpm") ? Sampler::DDPM : Sampler::DDIM;
    if (sample_steps) cfg.sample_steps = *sample_steps;
  }
};

ModelConfig load_model_config(const fs::path& path, const ConfigOverrides& overrides) {
  ModelConfig cfg = config_from_json_text(read_file(path));
  overrides.apply(cfg);
  const auto violations = validate_config(cfg);
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid config " << path.string() << ":";
    for (const auto& v : violations) os << "\n  - " << v;
    throw std::invalid_argument(os.str());
  }
  return cfg;
}

void write_run_manifest(const fs::path& out_dir, const json& extra) {
  json j = extra;
  std::ofstream os(out_dir / "run_manifest.json");
  os << j.dump(2) << "\n";
}

// ---------------- synth ----------------

int cmd_synth(const fs::path& config_path, const fs::path& out_dir, std::optional<uint64_t> seed_flag) {
  json j = json::parse(read_file(config_path));
  data::BenchmarkParams params;
  if (j.contains("synthetic")) params.synth = data::synthetic_config_from_json_text(j.at("synthetic").dump());
  if (j.contains("counts")) {
    params.counts.train = j.at("counts").value("train", int64_t(0));
    params.counts.val = j.at("counts").value("val", int64_t(0));
    params.counts.test = j.at("counts").value("test", int64_t(0));
  }
  params.T_pixel = j.value("T_pixel", params.T_pixel);
  params.L_in = j.value("L_in", params.L_in);
  params.L_out = j.value("L_out", params.L_out);
  params.seed = j.value("seed", params.seed);
  if (seed_flag) params.seed = *seed_flag;

  Timer timer;
  data::EventStore store = data::make_benchmark(params, out_dir);
  int64_t train = 0, val = 0, test = 0;
  for (const auto& e : store.entries) {
    if (e.split == "train") ++train;
    if (e.split == "val") ++val;
    if (e.split == "test") ++test;
  }
  std::cout << "store " << out_dir.string() << ": train=" << train << " val=" << val << " test=" << test
            << " (" << timer.seconds() << " s)\n";
  return kExitOk;
}

// ---------------- train ----------------

int cmd_train(const fs::path& config_path, const fs::path& store_dir, const fs::path& out_dir,
              const ConfigOverrides& overrides, int64_t iters, int64_t batch_size, int64_t save_every,
              const std::optional<fs::path>& init_from) {
  ModelConfig cfg = load_model_config(config_path, overrides);
  if (cfg.frozen_backbone && !init_from)
    throw std::invalid_argument("--frozen requires --init-from <checkpoint> (a frozen backbone must come "
                                "from a previous run)");

  data::EventStore store = data::open_store(store_dir);
  if (store.L_in != cfg.L_in || store.L_out != cfg.L_out)
    throw std::invalid_argument("store split (" + std::to_string(store.L_in) + "->" +
                                std::to_string(store.L_out) + ") does not match config (" +
                                std::to_string(cfg.L_in) + "->" + std::to_string(cfg.L_out) + ")");
  std::vector<EventSample> train_events = data::load_events(store, "train");
  if (train_events.empty()) throw std::invalid_argument("store has no train events");

  fs::create_directories(out_dir);
  write_file(out_dir / "config.json", read_file(config_path));  // byte-equal snapshot

  DiffCastModel model(cfg, train_events[0].x.channels());
  if (init_from) model.load_checkpoint(init_from->string());

  Rng rng(cfg.seed);
  Rng batch_rng = rng.fork(1);
  Rng step_rng = rng.fork(2);

  std::ofstream log(out_dir / "train_log.jsonl");
  const fs::path ckpt_path = out_dir / "checkpoint.bin";
  const fs::path last_good = out_dir / "checkpoint_last_good.bin";

  Timer timer;
  if (save_every <= 0) save_every = std::max<int64_t>(iters / 5, 1);
  try {
    for (int64_t it = 1; it <= iters; ++it) {
      std::vector<EventSample> batch;
      batch.reserve(static_cast<size_t>(batch_size));
      for (int64_t b = 0; b < batch_size; ++b)
        batch.push_back(train_events[static_cast<size_t>(
            batch_rng.uniform_int(0, static_cast<int64_t>(train_events.size()) - 1))]);
      TrainStepReport rep = model.training_step(batch, step_rng);
      log << rep.to_json_line() << "\n";
      if (it % save_every == 0 || it == iters) {
        model.save_checkpoint(ckpt_path.string());
        fs::copy_file(ckpt_path, last_good, fs::copy_options::overwrite_existing);
        log.flush();
      }
    }
  } catch (const TrainingDiverged& e) {
    log.flush();
    std::cerr << "error: " << e.what() << "\n";
    if (fs::exists(last_good))
      std::cerr << "last good checkpoint retained at " << last_good.string() << "\n";
    return kExitRuntime;
  }

  json manifest;
  manifest["command"] = "train";
  manifest["config_path"] = (out_dir / "config.json").string();
  manifest["config_hash"] = config_hash(cfg);
  manifest["seed"] = cfg.seed;
  manifest["iters"] = iters;
  manifest["batch"] = batch_size;
  manifest["checkpoint"] = ckpt_path.string();
  manifest["train_log"] = (out_dir / "train_log.jsonl").string();
  manifest["wall_time_s"] = timer.seconds();
  write_run_manifest(out_dir, manifest);
  std::cout << "trained " << iters << " steps in " << timer.seconds() << " s; checkpoint at "
            << ckpt_path.string() << "\n";
  return kExitOk;
}

// ---------------- forecast ----------------

int cmd_forecast(const fs::path& ckpt_path, const fs::path& store_dir, const std::string& split,
                 const fs::path& out_dir, int64_t samples, const ConfigOverrides& overrides) {
  ModelConfig cfg = config_from_json_text(checkpoint::read_config_text(ckpt_path.string()));
  overrides.apply(cfg);
  const auto violations = validate_config(cfg);
  if (!violations.empty()) throw std::invalid_argument("invalid effective config: " + violations[0]);

  data::EventStore store = data::open_store(store_dir);
  std::vector<EventSample> events = data::load_events(store, split);
  if (events.empty()) throw std::invalid_argument("split '" + split + "' has no events");

  DiffCastModel model(cfg, events[0].x.channels());
  model.load_checkpoint(ckpt_path.string());

  fs::create_directories(out_dir / "events");
  json manifest;
  manifest["type"] = "diffcast-forecast-v1";
  manifest["config_hash"] = config_hash(cfg);
  manifest["arch_hash"] = config_arch_hash(cfg);
  manifest["seed"] = cfg.seed;
  manifest["sampler"] = to_string(cfg.sampler);
  manifest["sample_steps"] = cfg.sample_steps;
  manifest["split"] = split;
  json entries = json::array();

  Rng rng(cfg.seed);
  Timer total;
  for (const EventSample& ev : events) {
    for (int64_t s = 0; s < samples; ++s) {
      Rng sample_rng = rng.fork(static_cast<uint64_t>(std::hash<std::string>{}(ev.id)) ^
                                static_cast<uint64_t>(s));
      Timer timer;
      Prediction pred = model.forecast(ev.x, sample_rng);
      const double wall = timer.seconds();

      const std::string stem = ev.id + "_s" + std::to_string(s);
      data::write_f32_payload(out_dir / "events" / (stem + "_mu.bin"), pred.mu);
      data::write_f32_payload(out_dir / "events" / (stem + "_residual.bin"), pred.residual_hat);
      data::write_f32_payload(out_dir / "events" / (stem + "_yhat.bin"), pred.y_hat);

      json je;
      je["id"] = ev.id;
      je["sample"] = s;
      je["L"] = cfg.L_out;
      je["H"] = ev.y.height();
      je["W"] = ev.y.width();
      je["C"] = ev.y.channels();
      je["data_range"] = {ev.y.data_range.lo, ev.y.data_range.hi};
      je["files"] = {{"mu", "events/" + stem + "_mu.bin"},
                     {"residual", "events/" + stem + "_residual.bin"},
                     {"y_hat", "events/" + stem + "_yhat.bin"}};
      je["wall_time_s"] = wall;
      entries.push_back(je);
    }
  }
  manifest["entries"] = entries;
  manifest["wall_time_s"] = total.seconds();
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "forecast " << entries.size() << " samples over " << events.size() << " events in "
            << total.seconds() << " s\n";
  return kExitOk;
}

// ---------------- eval ----------------

struct ForecastEntry {
  std::string id;
  int64_t sample = 0;
  int64_t L = 0, H = 0, W = 0, C = 0;
  DataRange data_range;
  std::string mu_file, residual_file, yhat_file;
};

std::vector<ForecastEntry> read_forecast_manifest(const fs::path& forecast_dir) {
  json j = json::parse(read_file(forecast_dir / "manifest.json"));
  std::vector<ForecastEntry> out;
  for (const auto& je : j.at("entries")) {
    ForecastEntry e;
    e.id = je.at("id").get<std::string>();
    e.sample = je.at("sample").get<int64_t>();
    e.L = je.at("L").get<int64_t>();
    e.H = je.at("H").get<int64_t>();
    e.W = je.at("W").get<int64_t>();
    e.C = je.at("C").get<int64_t>();
    e.data_range.lo = je.at("data_range")[0].get<real>();
    e.data_range.hi = je.at("data_range")[1].get<real>();
    e.mu_file = je.at("files").at("mu").get<std::string>();
    e.residual_file = je.at("files").at("residual").get<std::string>();
    e.yhat_file = je.at("files").at("y_hat").get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

Prediction load_forecast_prediction(const fs::path& forecast_dir, const ForecastEntry& e) {
  const Shape shape = {e.L, e.H, e.W, e.C};
  Tensor mu = data::read_f32_payload(forecast_dir / e.mu_file, shape);
  Tensor residual = data::read_f32_payload(forecast_dir / e.residual_file, shape);
  Tensor y_hat = data::read_f32_payload(forecast_dir / e.yhat_file, shape);
  Prediction pred = make_prediction(std::move(mu), std::move(residual));
  // Payloads are float32-quantized; trust the stored y_hat if it differs.
  pred.y_hat = std::move(y_hat);
  return pred;
}

int cmd_eval(const fs::path& forecast_dir, const fs::path& store_dir, std::vector<real> thresholds,
             std::vector<int64_t> pools, int64_t ssim_window) {
  data::EventStore store = data::open_store(store_dir);
  const auto entries = read_forecast_manifest(forecast_dir);
  if (entries.empty()) throw std::invalid_argument("forecast manifest has no entries");

  std::vector<Prediction> preds;
  std::vector<RadarSequence> targets;
  for (const auto& e : entries) {
    EventSample ev = data::load_event(store, e.id);  // throws on id mismatch
    preds.push_back(load_forecast_prediction(forecast_dir, e));
    targets.push_back(ev.y);
  }

  metrics::MetricReport report = metrics::evaluate(preds, targets, thresholds, pools, ssim_window);
  write_file(forecast_dir / "metrics.json", report.to_json_text() + "\n");
  write_file(forecast_dir / "framewise.csv", report.framewise_csv());
  std::cout << "mean_csi=" << report.mean_csi << " mean_hss=" << report.mean_hss
            << " ssim=" << report.ssim << "\n";
  std::cout << "wrote " << (forecast_dir / "metrics.json").string() << " and "
            << (forecast_dir / "framewise.csv").string() << "\n";
  return kExitOk;
}

// ---------------- plot ----------------

int cmd_plot(const fs::path& forecast_dir, const fs::path& store_dir, const std::string& event_id,
             const fs::path& out_png) {
  data::EventStore store = data::open_store(store_dir);
  EventSample ev = data::load_event(store, event_id);
  const auto entries = read_forecast_manifest(forecast_dir);
  const ForecastEntry* entry = nullptr;
  for (const auto& e : entries)
    if (e.id == event_id && e.sample == 0) entry = &e;
  if (!entry) throw std::invalid_argument("event '" + event_id + "' not present in forecast manifest");

  Prediction pred = load_forecast_prediction(forecast_dir, *entry);
  plot::render_forecast_grid(out_png, ev.x.frames, ev.y.frames, pred);
  std::cout << "wrote " << out_png.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiffCast: residual-diffusion precipitation nowcasting at desk scale"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic event store");
  std::string synth_config, synth_out;
  std::optional<uint64_t> synth_seed;
  synth->add_option("--config", synth_config, "Benchmark config JSON")->required();
  synth->add_option("--out", synth_out, "Output store directory")->required();
  synth->add_option("--seed", synth_seed, "Override the config seed");

  // shared model overrides
  auto add_override_flags = [](CLI::App* cmd, ConfigOverrides& o) {
    cmd->add_option("--backbone", o.backbone, "Deterministic backbone")
        ->check(CLI::IsMember({"convgru", "simvp"}));
    cmd->add_option("--alpha", o.alpha, "Loss weight in [0,1]");
    cmd->add_flag_callback("--frozen", [&o] { o.frozen = true; }, "Freeze the backbone parameters");
    cmd->add_flag_callback("--no-globalnet", [&o] { o.no_globalnet = true; }, "Drop the GlobalNet condition");
    cmd->add_option("--seed", o.seed, "Override the config seed");
  };

  // train
  auto* train = app.add_subcommand("train", "Train the framework on a store");
  std::string train_config, train_store, train_out;
  std::optional<fs::path> train_init;
  int64_t train_iters = 200, train_batch = 2, train_save_every = 0;
  ConfigOverrides train_ov;
  train->add_option("--config", train_config, "Model config JSON")->required();
  train->add_option("--store", train_store, "Event store directory")->required();
  train->add_option("--out", train_out, "Run output directory")->required();
  train->add_option("--iters", train_iters, "Training steps");
  train->add_option("--batch", train_batch, "Events per step");
  train->add_option("--save-every", train_save_every, "Checkpoint interval (default iters/5)");
  train->add_option("--init-from", train_init, "Warm-start checkpoint");
  add_override_flags(train, train_ov);

  // forecast
  auto* forecast = app.add_subcommand("forecast", "Sample forecasts from a checkpoint");
  std::string fc_ckpt, fc_store, fc_split = "test", fc_out;
  int64_t fc_samples = 1;
  ConfigOverrides fc_ov;
  forecast->add_option("--checkpoint", fc_ckpt, "Model checkpoint")->required();
  forecast->add_option("--store", fc_store, "Event store directory")->required();
  forecast->add_option("--split", fc_split, "Store split to forecast");
  forecast->add_option("--out", fc_out, "Forecast output directory")->required();
  forecast->add_option("--samples", fc_samples, "Samples per event (0 writes manifest only)");
  forecast->add_option("--sampler", fc_ov.sampler, "Sampler")->check(CLI::IsMember({"ddpm", "ddim"}));
  forecast->add_option("--steps", fc_ov.sample_steps, "Denoising steps");
  forecast->add_option("--seed", fc_ov.seed, "Override the config seed");

  // eval
  auto* eval = app.add_subcommand("eval", "Verification metrics for a forecast directory");
  std::string ev_forecast, ev_store;
  std::vector<real> ev_thresholds = {0.2, 0.4, 0.6, 0.8};
  std::vector<int64_t> ev_pools = {4, 16};
  int64_t ev_ssim_window = 11;
  eval->add_option("--forecast", ev_forecast, "Forecast directory")->required();
  eval->add_option("--store", ev_store, "Event store directory")->required();
  eval->add_option("--thresholds", ev_thresholds, "Physical-unit thresholds");
  eval->add_option("--pools", ev_pools, "Pooling scales");
  eval->add_option("--ssim-window", ev_ssim_window, "SSIM window size");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "Render a forecast comparison panel");
  std::string pl_forecast, pl_store, pl_event, pl_out;
  plot_cmd->add_option("--forecast", pl_forecast, "Forecast directory")->required();
  plot_cmd->add_option("--store", pl_store, "Event store directory")->required();
  plot_cmd->add_option("--event", pl_event, "Event id")->required();
  plot_cmd->add_option("--out", pl_out, "Output PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_config, synth_out, synth_seed);
    if (train->parsed())
      return cmd_train(train_config, train_store, train_out, train_ov, train_iters, train_batch,
                       train_save_every, train_init);
    if (forecast->parsed()) return cmd_forecast(fc_ckpt, fc_store, fc_split, fc_out, fc_samples, fc_ov);
    if (eval->parsed()) return cmd_eval(ev_forecast, ev_store, ev_thresholds, ev_pools, ev_ssim_window);
    if (plot_cmd->parsed()) return cmd_plot(pl_forecast, pl_store, pl_event, pl_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
