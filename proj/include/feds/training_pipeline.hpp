#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "feds/codec_model.hpp"
#include "feds/feds_distillation.hpp"

namespace feds {

// --- data ------------------------------------------------------------------

struct Augmentations {
  bool rotation = true;         // multiples of 90 degrees
  bool scaling = true;          // integer box downscale by 1 or 2
  bool horizontal_flip = true;
};

struct DatasetSpec {
  std::vector<std::filesystem::path> image_paths;
  int crop_size = 384;
  Augmentations augmentations;
  std::optional<int> rescale_target = 2000;  // longer side bound, integer box downscale
};

// Smooth random RGB images (oriented gradients, sinusoids, discs, mild noise).
std::vector<Tensor> synthetic_images(int count, int height, int width, std::uint64_t seed);

// Integer-factor box downscale of a [3, H, W] image.
Tensor downscale(const Tensor& img, int factor);
// k quarter turns counter-clockwise.
Tensor rotate90(const Tensor& img, int k);
Tensor flip_horizontal(const Tensor& img);

// Random-access patch source. Patch i of step s depends only on (seed, s, i).
class PatchStream {
 public:
  // Loads and pre-rescales the images; unreadable files are skipped with a
  // warning on `warn`. Throws when no usable image remains.
  PatchStream(const DatasetSpec& spec, std::ostream* warn = nullptr);
  PatchStream(std::vector<Tensor> images, int crop_size, Augmentations aug);

  // [batch, 3, crop, crop]
  Tensor batch(int batch_size, Rng& rng) const;
  Tensor patch(Rng& rng) const;

  std::size_t size() const { return images_.size(); }
  int crop_size() const { return crop_; }

 private:
  std::vector<Tensor> images_;
  int crop_;
  Augmentations aug_;
};

// --- optimizer ---------------------------------------------------------------

struct OptimizerSpec {
  int batch_size = 8;
  double base_lr = kBaseLearningRate;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::optional<double> clip_norm;
};

struct AdamState {
  long step = 0;
  std::vector<Tensor> m;  // parameter order
  std::vector<Tensor> v;
};

// One Adam update of every parameter that requires grad and has a gradient.
void adam_step(ParameterStore& params, AdamState& state, const OptimizerSpec& spec, double lr);

// --- checkpoints -------------------------------------------------------------

struct Checkpoint {
  NetworkConfig cfg;
  int lambda_index = 2;
  FEDSWeights weights;
  Stage stage = Stage::teacher;
  bool stage_complete = false;
  long iteration = 0;  // iterations finished in `stage`
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  AdamState adam;
};

inline constexpr const char* kCheckpointMagic = "FEDSCKPT";
inline constexpr int kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);
void checkpoint_save(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint checkpoint_load(const std::filesystem::path& path);

Checkpoint make_checkpoint(const CodecModel& model, const AdamState& adam, Stage stage, bool complete, long iteration,
                           std::uint64_t seed, const FEDSWeights& weights);
// Copies weights into an existing model; every name and shape must match.
void load_weights(CodecModel& model, const Checkpoint& c);
CodecModel model_from_checkpoint(const Checkpoint& c);

// --- training ----------------------------------------------------------------

enum : std::uint64_t { kStreamInit = 1, kStreamBatch = 2, kStreamNoise = 3, kStreamTeacherNoise = 4 };

struct TrainOptions {
  FEDSWeights weights;
  int lambda_index = 2;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  double scale = 1.0;
  long log_every = 1;          // 0 disables JSON-lines records
  std::ostream* log = nullptr;
  long checkpoint_every = 0;   // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_path;
  long stop_after = -1;        // stop early (for resume tests); -1 runs the whole plan
};

struct StageInputs {
  Stage stage = Stage::teacher;
  NetworkConfig fresh_config;           // used when starting a stage from scratch
  const Checkpoint* start = nullptr;    // previous stage (finetune) or same-stage resume
  const Checkpoint* teacher = nullptr;  // completed teacher, required for distill
};

// Runs (or resumes) one stage and returns its final checkpoint. Enforces the
// teacher -> distill -> finetune order. Throws std::runtime_error on a
// non-finite loss, naming the iteration, batch seed and term breakdown.
Checkpoint run_stage(const StageInputs& in, const PatchStream& data, const TrainOptions& opt);

// Global step of iteration `it` of a stage (finetune continues after distill).
long stage_step_offset(Stage stage, double scale);

// Eval-mode D + lambda R averaged over images ([3, H, W], any size).
double validation_loss(const CodecModel& model, const std::vector<Tensor>& images, const FEDSWeights& w);

std::string log_record(long iter, Stage stage, const LossBreakdown& b, double lr);

// --- configuration -------------------------------------------------------------

// Flat key=value file, '#' comments. Keys: network.*, train.*, feds.*, data.*.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

struct Settings {
  NetworkConfig network;
  FEDSWeights weights;
  int lambda_index = 2;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  double scale = 1.0;
  long log_every = 1;
  long checkpoint_every = 0;
  std::filesystem::path data_dir;
  int crop_size = 384;
  Augmentations augmentations;
  std::optional<int> rescale_target = 2000;
  int synthetic_count = 0;  // > 0 uses generated images when no data dir is given
  int synthetic_size = 64;
};

// Presets for `role`, then config keys, then the FEDS_SEED environment
// variable. Command-line flags are applied by the caller afterwards.
Settings resolve_settings(Role role, const std::map<std::string, std::string>& config);

}  // namespace feds
