#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feds/codec_model.hpp"

namespace feds {

enum class Distortion { mse, ms_ssim };

std::string to_string(Distortion d);
Distortion distortion_from_string(const std::string& s);

inline constexpr std::array<double, 7> kLambdaPresets = {0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06};

struct FEDSWeights {
  double lambda = 0.0075;
  double alpha = 1.0;
  double beta = 0.5;
  double gamma = 0.5;
  Distortion distortion = Distortion::mse;

  void validate() const;
};

// Defaults with lambda taken from the preset table.
FEDSWeights feds_weights_for(int lambda_index);

// D(x, x_hat): MSE on the [0, 1] scale, or 1 - MS-SSIM.
Var distortion(const Var& x, const Var& x_hat, Distortion d);

// D + lambda * (R_y + R_z), rates in bpp. Throws on negative rates.
Var teacher_loss(const Var& x, const Var& x_hat, const Var& rate_y, const Var& rate_z, const FEDSWeights& w);

Var output_loss(const Var& x_hat_teacher, const Var& x_hat_student);
// Mean over tap pairs of the per-pair MSE.
Var feature_loss(std::span<const FeatureTap> teacher, std::span<const FeatureTap> student);
// Teacher channels ranking.order[0..C_s), in ranking order.
Var select_teacher_channels(const Var& y_hat_teacher, const ChannelEntropyRanking& ranking, int student_channels);
Var latent_loss(const Var& teacher_selected, const Var& y_hat_student);

struct TeacherOutputs {
  Var x_hat;
  Var y_hat;
  std::vector<FeatureTap> taps;
  ChannelEntropyRanking ranking;
};

struct StudentOutputs {
  Var x_hat;
  Var y_hat;
  std::vector<FeatureTap> taps;
  Var rate_y;
  Var rate_z;
};

struct DistillationBatchOutputs {
  TeacherOutputs teacher;
  StudentOutputs student;
};

TeacherOutputs teacher_outputs(const ForwardOutput& f);
StudentOutputs student_outputs(const ForwardOutput& f);

struct LossBreakdown {
  double D = 0.0;
  double R_y = 0.0;
  double R_z = 0.0;
  double L_out = 0.0;
  double L_feat = 0.0;
  double L_lat = 0.0;
  double L_KD = 0.0;
  double total = 0.0;
};

struct LossResult {
  Var total;
  LossBreakdown terms;
};

// D + lambda R + alpha L_out + beta L_feat + gamma L_lat. Terms with a zero
// weight are evaluated for logging only and stay out of the graph.
LossResult student_total_loss(const DistillationBatchOutputs& batch, const Var& x, const FEDSWeights& w);
// D + lambda R for a single codec (teacher stage and fine-tuning).
LossResult rd_loss(const ForwardOutput& f, const Var& x, const FEDSWeights& w);

enum class Stage { teacher, distill, finetune };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct LossTerms {
  bool distortion = true;
  bool rate = true;
  bool kd = false;
};

struct StagePlan {
  Stage stage = Stage::teacher;
  long total_iterations = 0;
  std::vector<std::pair<long, double>> lr_schedule;  // (first iteration, lr), ascending
  LossTerms loss_terms;

  double lr_at(long iteration) const;
};

inline constexpr double kBaseLearningRate = 1e-4;

// Iteration counts and drop points are multiplied by `scale` (rounded).
StagePlan stage_plan(Stage stage, double scale = 1.0);

}  // namespace feds
