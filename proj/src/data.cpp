#include "diffcast/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace diffcast::data {

using nlohmann::json;

std::vector<std::string> SyntheticConfig::validate() const {
  std::vector<std::string> v;
  if (H < 16 || W < 16) v.push_back("H and W must be >= 16");
  if (n_cells_min < 0 || n_cells_max < n_cells_min) v.push_back("n_cells range invalid");
  if (birth_rate < 0.0 || birth_rate > 1.0) v.push_back("birth_rate out of [0,1]");
  if (death_rate < 0.0 || death_rate > 1.0) v.push_back("death_rate out of [0,1]");
  if (!(cell_sigma_min > 0.0) || cell_sigma_max < cell_sigma_min) v.push_back("cell_sigma range invalid");
  if (jitter < 0.0) v.push_back("jitter must be >= 0");
  if (growth_decay < 0.0) v.push_back("growth_decay must be >= 0");
  if (length < 1) v.push_back("length must be >= 1");
  return v;
}

SyntheticConfig synthetic_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  SyntheticConfig c;
  if (j.contains("H")) c.H = j.at("H").get<int64_t>();
  if (j.contains("W")) c.W = j.at("W").get<int64_t>();
  if (j.contains("n_cells_min")) c.n_cells_min = j.at("n_cells_min").get<int64_t>();
  if (j.contains("n_cells_max")) c.n_cells_max = j.at("n_cells_max").get<int64_t>();
  if (j.contains("velocity_x")) c.velocity_x = j.at("velocity_x").get<real>();
  if (j.contains("velocity_y")) c.velocity_y = j.at("velocity_y").get<real>();
  if (j.contains("jitter")) c.jitter = j.at("jitter").get<real>();
  if (j.contains("growth_decay")) c.growth_decay = j.at("growth_decay").get<real>();
  if (j.contains("birth_rate")) c.birth_rate = j.at("birth_rate").get<real>();
  if (j.contains("death_rate")) c.death_rate = j.at("death_rate").get<real>();
  if (j.contains("cell_sigma_min")) c.cell_sigma_min = j.at("cell_sigma_min").get<real>();
  if (j.contains("cell_sigma_max")) c.cell_sigma_max = j.at("cell_sigma_max").get<real>();
  if (j.contains("length")) c.length = j.at("length").get<int64_t>();
  const auto violations = c.validate();
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid synthetic config:";
    for (const auto& v : violations) os << " [" << v << "]";
    throw std::invalid_argument(os.str());
  }
  return c;
}

std::string synthetic_config_to_json_text(const SyntheticConfig& c) {
  json j;
  j["H"] = c.H;
  j["W"] = c.W;
  j["n_cells_min"] = c.n_cells_min;
  j["n_cells_max"] = c.n_cells_max;
  j["velocity_x"] = c.velocity_x;
  j["velocity_y"] = c.velocity_y;
  j["jitter"] = c.jitter;
  j["growth_decay"] = c.growth_decay;
  j["birth_rate"] = c.birth_rate;
  j["death_rate"] = c.death_rate;
  j["cell_sigma_min"] = c.cell_sigma_min;
  j["cell_sigma_max"] = c.cell_sigma_max;
  j["length"] = c.length;
  return j.dump(2);
}

namespace {

struct Cell {
  real x, y, intensity, sigma;
};

Cell spawn_cell(const SyntheticConfig& cfg, Rng& rng) {
  Cell c;
  c.x = rng.uniform(0.0, static_cast<real>(cfg.W));
  c.y = rng.uniform(0.0, static_cast<real>(cfg.H));
  c.intensity = rng.uniform(0.45, 1.0);
  c.sigma = rng.uniform(cfg.cell_sigma_min, cfg.cell_sigma_max);
  return c;
}

void render_cells(const std::vector<Cell>& cells, int64_t H, int64_t W, real* frame) {
  std::fill_n(frame, H * W, 0.0);
  for (const Cell& c : cells) {
    const real inv2s2 = 1.0 / (2.0 * c.sigma * c.sigma);
    // Cells contribute negligibly beyond ~4 sigma.
    const int64_t r = static_cast<int64_t>(std::ceil(4.0 * c.sigma));
    const int64_t i0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c.y)) - r);
    const int64_t i1 = std::min<int64_t>(H - 1, static_cast<int64_t>(std::ceil(c.y)) + r);
    const int64_t j0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c.x)) - r);
    const int64_t j1 = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(c.x)) + r);
    for (int64_t i = i0; i <= i1; ++i)
      for (int64_t j = j0; j <= j1; ++j) {
        const real dy = static_cast<real>(i) - c.y;
        const real dx = static_cast<real>(j) - c.x;
        frame[i * W + j] += c.intensity * std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
  }
}

}  // namespace

RadarSequence generate_sequence(const SyntheticConfig& cfg, Rng& rng) {
  const auto violations = cfg.validate();
  if (!violations.empty()) throw std::invalid_argument("generate_sequence: invalid config: " + violations[0]);

  std::vector<Cell> cells;
  const int64_t n0 = rng.uniform_int(cfg.n_cells_min, cfg.n_cells_max);
  for (int64_t i = 0; i < n0; ++i) cells.push_back(spawn_cell(cfg, rng));

  Tensor frames({cfg.length, cfg.H, cfg.W, 1});
  std::vector<real> scratch(static_cast<size_t>(cfg.H * cfg.W));

  for (int64_t t = 0; t < cfg.length; ++t) {
    render_cells(cells, cfg.H, cfg.W, scratch.data());
    real* dst = frames.data() + t * cfg.H * cfg.W;
    for (int64_t i = 0; i < cfg.H * cfg.W; ++i) {
      const real clipped = std::clamp(scratch[static_cast<size_t>(i)], 0.0, 1.0);
      dst[i] = static_cast<real>(static_cast<float>(clipped));
    }

    // Advance dynamics for the next frame.
    const real vx = cfg.velocity_x + (cfg.jitter > 0.0 ? cfg.jitter * rng.normal() : 0.0);
    const real vy = cfg.velocity_y + (cfg.jitter > 0.0 ? cfg.jitter * rng.normal() : 0.0);
    for (Cell& c : cells) {
      c.x += vx;
      c.y += vy;
      if (cfg.growth_decay > 0.0) c.intensity = std::clamp(c.intensity + cfg.growth_decay * rng.normal(), 0.0, 1.0);
    }
    if (cfg.death_rate > 0.0)
      std::erase_if(cells, [&](const Cell&) { return rng.bernoulli(cfg.death_rate); });
    if (cfg.birth_rate > 0.0 && rng.bernoulli(cfg.birth_rate)) cells.push_back(spawn_cell(cfg, rng));
  }
  return RadarSequence{std::move(frames), DataRange{0.0, 1.0}};
}

std::vector<EventSample> filter_events(const RadarSequence& s, real T_pixel, int64_t L_in, int64_t L_out,
                                       const FilterParams& params) {
  const int64_t len = s.length();
  if (len <= L_in + L_out) throw std::invalid_argument("filter_events: sequence shorter than L_in + L_out + 1");

  auto frame_mean = [&](int64_t i) {
    const int64_t fsize = s.frames.numel() / len;
    const real* d = s.frames.data() + i * fsize;
    real m = 0.0;
    for (int64_t k = 0; k < fsize; ++k) m += d[k];
    return m / static_cast<real>(fsize);
  };

  std::vector<EventSample> events;
  int64_t i = params.start_index;
  while (i + L_out < len) {
    if (i >= L_in && frame_mean(i) > T_pixel) {
      real event_pixel = 0.0;
      for (int64_t f = i - L_in; f < i + L_out; ++f) event_pixel += frame_mean(f);
      if (event_pixel >= static_cast<real>(L_in + L_out) * T_pixel * params.acceptance_factor) {
        EventSample ev;
        ev.x = RadarSequence{s.frames.slice_axis0(i - L_in, L_in), s.data_range};
        ev.y = RadarSequence{s.frames.slice_axis0(i, L_out), s.data_range};
        ev.id = "event-" + std::to_string(events.size());
        events.push_back(std::move(ev));
        i += L_out;
        continue;
      }
    }
    i += 1;
  }
  return events;
}

// ---------------- event store ----------------

namespace {

constexpr const char* kManifestName = "manifest.json";

void write_manifest(const EventStore& store) {
  json j;
  j["format"] = "diffcast-event-store-v1";
  j["L_in"] = store.L_in;
  j["L_out"] = store.L_out;
  json events = json::array();
  for (const auto& e : store.entries) {
    json je;
    je["id"] = e.id;
    je["split"] = e.split;
    je["L"] = e.L;
    je["H"] = e.H;
    je["W"] = e.W;
    je["C"] = e.C;
    je["data_range"] = {e.data_range.lo, e.data_range.hi};
    events.push_back(je);
  }
  j["events"] = events;
  std::ofstream os(store.root / kManifestName, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest in " + store.root.string());
  os << j.dump(2) << "\n";
}

}  // namespace

void write_f32_payload(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write payload " + path.string());
  std::vector<float> buf(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw std::runtime_error("payload write failed " + path.string());
}

Tensor read_f32_payload(const std::filesystem::path& path, const Shape& expected_shape) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open payload " + path.string());
  const auto bytes = static_cast<int64_t>(is.tellg());
  const int64_t expected = shape_numel(expected_shape);
  if (bytes != expected * static_cast<int64_t>(sizeof(float)))
    throw std::runtime_error("payload " + path.string() + " has " + std::to_string(bytes) +
                             " bytes, expected " + std::to_string(expected * sizeof(float)));
  is.seekg(0);
  std::vector<float> buf(static_cast<size_t>(expected));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw std::runtime_error("payload read failed " + path.string());
  Tensor t(expected_shape);
  for (int64_t i = 0; i < expected; ++i) {
    t[i] = static_cast<real>(buf[static_cast<size_t>(i)]);
    if (!std::isfinite(t[i])) throw std::runtime_error("payload " + path.string() + " contains non-finite values");
  }
  return t;
}

EventStore create_store(const std::filesystem::path& root, int64_t L_in, int64_t L_out) {
  std::filesystem::create_directories(root / "events");
  EventStore store{root, L_in, L_out, {}};
  write_manifest(store);
  return store;
}

EventStore open_store(const std::filesystem::path& root) {
  std::ifstream is(root / kManifestName);
  if (!is) throw std::runtime_error("no manifest at " + (root / kManifestName).string());
  json j = json::parse(is);
  EventStore store;
  store.root = root;
  store.L_in = j.at("L_in").get<int64_t>();
  store.L_out = j.at("L_out").get<int64_t>();
  for (const auto& je : j.at("events")) {
    ManifestEntry e;
    e.id = je.at("id").get<std::string>();
    e.split = je.at("split").get<std::string>();
    e.L = je.at("L").get<int64_t>();
    e.H = je.at("H").get<int64_t>();
    e.W = je.at("W").get<int64_t>();
    e.C = je.at("C").get<int64_t>();
    e.data_range.lo = je.at("data_range")[0].get<real>();
    e.data_range.hi = je.at("data_range")[1].get<real>();
    if (e.L != store.L_in + store.L_out)
      throw std::runtime_error("manifest entry " + e.id + " length inconsistent with L_in+L_out");
    store.entries.push_back(std::move(e));
  }
  return store;
}

std::vector<ManifestEntry> EventStore::split_entries(const std::string& split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

void save_events(EventStore& store, const std::vector<EventSample>& events, const std::string& split) {
  for (const EventSample& ev : events) {
    if (ev.x.channels() != ev.y.channels() || ev.x.height() != ev.y.height() || ev.x.width() != ev.y.width())
      throw std::invalid_argument("save_events: event " + ev.id + " has mismatched x/y shapes");
    if (ev.x.length() != store.L_in || ev.y.length() != store.L_out)
      throw std::invalid_argument("save_events: event " + ev.id + " lengths do not match the store split");
    ManifestEntry e;
    e.id = ev.id;
    e.split = split;
    e.L = ev.x.length() + ev.y.length();
    e.H = ev.x.height();
    e.W = ev.x.width();
    e.C = ev.x.channels();
    e.data_range = ev.x.data_range;

    Tensor full({e.L, e.H, e.W, e.C});
    std::copy_n(ev.x.frames.data(), ev.x.frames.numel(), full.data());
    std::copy_n(ev.y.frames.data(), ev.y.frames.numel(), full.data() + ev.x.frames.numel());
    write_f32_payload(store.root / "events" / (e.id + ".bin"), full);
    store.entries.push_back(std::move(e));
  }
  write_manifest(store);
}

static EventSample load_event_entry(const EventStore& store, const ManifestEntry& e) {
  Tensor full = read_f32_payload(store.root / "events" / (e.id + ".bin"), {e.L, e.H, e.W, e.C});
  EventSample ev;
  ev.id = e.id;
  ev.x = RadarSequence{full.slice_axis0(0, store.L_in), e.data_range};
  ev.y = RadarSequence{full.slice_axis0(store.L_in, store.L_out), e.data_range};
  return ev;
}

std::vector<EventSample> load_events(const EventStore& store, const std::string& split) {
  std::vector<EventSample> out;
  for (const auto& e : store.entries)
    if (e.split == split) out.push_back(load_event_entry(store, e));
  return out;
}

EventSample load_event(const EventStore& store, const std::string& id) {
  for (const auto& e : store.entries)
    if (e.id == id) return load_event_entry(store, e);
  throw std::runtime_error("event '" + id + "' not found in store " + store.root.string());
}

EventStore make_benchmark(const BenchmarkParams& params, const std::filesystem::path& root) {
  EventStore store = create_store(root, params.L_in, params.L_out);
  Rng master(params.seed);
  const std::pair<std::string, int64_t> splits[] = {
      {"train", params.counts.train}, {"val", params.counts.val}, {"test", params.counts.test}};
  uint64_t split_tag = 100;
  for (const auto& [split, want] : splits) {
    Rng split_rng = master.fork(split_tag++);
    int64_t got = 0;
    int64_t seq_index = 0;
    while (got < want && seq_index < params.max_sequences_per_split) {
      Rng seq_rng = split_rng.fork(static_cast<uint64_t>(seq_index));
      RadarSequence seq = generate_sequence(params.synth, seq_rng);
      std::vector<EventSample> events = filter_events(seq, params.T_pixel, params.L_in, params.L_out);
      for (auto& ev : events) {
        if (got >= want) break;
        std::ostringstream id;
        id << split << "-" << std::setw(5) << std::setfill('0') << got;
        ev.id = id.str();
        save_events(store, {ev}, split);
        ++got;
      }
      ++seq_index;
    }
    if (got < want)
      throw std::runtime_error("make_benchmark: split '" + split + "' produced only " + std::to_string(got) +
                               " of " + std::to_string(want) + " events after " + std::to_string(seq_index) +
                               " sequences; relax T_pixel or the synthetic config");
  }
  return store;
}

}  // namespace diffcast::data
