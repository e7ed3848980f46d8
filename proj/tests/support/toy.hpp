#pragma once

#include <filesystem>
#include <string>

#include "feds/codec_model.hpp"
#include "feds/training_pipeline.hpp"

namespace feds::testing {

inline std::filesystem::path source_dir() { return FEDS_SOURCE_DIR; }

inline std::filesystem::path toy_config_path(Role role) {
  return source_dir() / "configs" / (role == Role::teacher ? "toy_teacher.cfg" : "toy_student.cfg");
}

inline Settings toy_settings(Role role) { return resolve_settings(role, read_config_file(toy_config_path(role))); }

inline NetworkConfig toy_config(Role role) { return toy_settings(role).network; }

// smaller still, for finite-difference checks
inline NetworkConfig tiny_config(Role role) {
  NetworkConfig c = build_network_config(role);
  c.N = 8;
  c.hyper_channels = 8;
  c.window_size = 2;
  c.num_heads = 2;
  if (role == Role::teacher) {
    c.M = 16;
    c.num_slices = 4;
    c.res_blocks_per_group = 1;
  } else {
    c.M = 8;
    c.num_slices = 2;
  }
  return c;
}

}  // namespace feds::testing
