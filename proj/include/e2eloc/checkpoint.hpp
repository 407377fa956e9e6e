#pragma once

#include <string>

#include "e2eloc/harness.hpp"

namespace e2eloc {

// Versioned binary container: magic "E2LC", u32 version, u64 header length,
// JSON header (full experiment config plus named tensor shapes), then the
// raw float32 little-endian arrays in header order. Class centers are stored
// as the tensor named "centers".
void save_checkpoint(const std::string& path, E2EModel& model, const ExperimentConfig& cfg);

// Rebuilds the model from the stored config and overwrites every parameter
// array. Returns the restored model; the stored config is written to cfg_out.
E2EModel load_checkpoint(const std::string& path, ExperimentConfig* cfg_out = nullptr);

}  // namespace e2eloc
