#include "diffcast/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

#include "diffcast/framework.hpp"

namespace diffcast::checkpoint {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'K', 'P', '0', '0', '0', '1'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<uint32_t>(t.ndim()));
  for (int64_t d : t.shape()) write_i64(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
}

Tensor read_tensor(std::istream& is) {
  const uint32_t nd = read_u32(is);
  Shape shape;
  for (uint32_t i = 0; i < nd; ++i) shape.push_back(read_i64(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
  return t;
}

std::vector<std::pair<std::string, nn::Param*>> grouped_params(const DiffCastModel& model) {
  std::vector<std::pair<std::string, nn::Param*>> out;
  for (auto& [name, p] : model.backbone().named_parameters()) out.emplace_back("backbone." + name, p);
  for (auto& [name, p] : model.denoiser().named_parameters()) out.emplace_back("denoiser." + name, p);
  if (model.globalnet())
    for (auto& [name, p] : model.globalnet()->named_parameters()) out.emplace_back("globalnet." + name, p);
  return out;
}

}  // namespace

void save(const std::string& path, const DiffCastModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, config_arch_hash(model.config()));
  write_i64(os, model.steps_taken());
  write_string(os, config_to_json_text(model.config()));

  const auto params = grouped_params(model);
  write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    write_string(os, name);
    write_tensor(os, p->value());
    write_tensor(os, p->adam_m);
    write_tensor(os, p->adam_v);
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

void load_into(const std::string& path, DiffCastModel& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a diffcast checkpoint: " + path);
  const uint64_t arch_hash = read_u64(is);
  if (arch_hash != config_arch_hash(model.config()))
    throw std::runtime_error("checkpoint/config mismatch: stored architecture hash differs (checkpoint " +
                             path + ")");
  const int64_t steps = read_i64(is);
  (void)read_string(is);  // embedded config text; arch hash already validated

  std::map<std::string, std::array<Tensor, 3>> entries;
  const uint32_t n = read_u32(is);
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = read_string(is);
    Tensor value = read_tensor(is);
    Tensor m = read_tensor(is);
    Tensor v = read_tensor(is);
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    entries[name] = {std::move(value), std::move(m), std::move(v)};
  }

  for (auto& [name, p] : grouped_params(model)) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint missing parameter '" + name + "'");
    auto& [value, m, v] = it->second;
    if (!same_shape(value, p->value()))
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + value.shape_str() +
                               ", expected " + p->value().shape_str());
    p->var.value_mut() = value;
    p->adam_m = m;
    p->adam_v = v;
    entries.erase(it);
  }
  if (!entries.empty())
    throw std::runtime_error("checkpoint contains unknown parameter '" + entries.begin()->first + "'");
  model.optimizer().set_steps_taken(steps);
}

std::string read_config_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a diffcast checkpoint: " + path);
  (void)read_u64(is);
  (void)read_i64(is);
  return read_string(is);
}

}  // namespace diffcast::checkpoint
