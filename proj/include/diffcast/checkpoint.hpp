#pragma once

#include <string>

namespace diffcast {

class DiffCastModel;

namespace checkpoint {

// Single binary archive: config snapshot, architecture hash, optimizer step
// counter, and per parameter (keyed by module path) the value plus Adam
// moment tensors.
void save(const std::string& path, const DiffCastModel& model);

// Loads into an already constructed model; the stored architecture hash must
// match the model's. Throws std::runtime_error on mismatch or corruption.
void load_into(const std::string& path, DiffCastModel& model);

// Reads only the embedded config JSON text (for reconstructing the model).
std::string read_config_text(const std::string& path);

}  // namespace checkpoint
}  // namespace diffcast
