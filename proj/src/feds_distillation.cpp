#include "feds/feds_distillation.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "feds/eval_metrics.hpp"

namespace feds {

std::string to_string(Distortion d) { return d == Distortion::mse ? "mse" : "ms-ssim"; }

Distortion distortion_from_string(const std::string& s) {
  if (s == "mse") return Distortion::mse;
  if (s == "ms-ssim" || s == "msssim") return Distortion::ms_ssim;
  throw std::invalid_argument("unknown distortion '" + s + "' (expected mse or ms-ssim)");
}

void FEDSWeights::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0)) {
    throw std::invalid_argument("alpha, beta and gamma must be nonnegative");
  }
}

FEDSWeights feds_weights_for(int lambda_index) {
  if (lambda_index < 0 || lambda_index >= static_cast<int>(kLambdaPresets.size())) {
    throw std::invalid_argument("lambda index " + std::to_string(lambda_index) + " outside [0, " +
                                std::to_string(kLambdaPresets.size() - 1) + "]");
  }
  FEDSWeights w;
  w.lambda = kLambdaPresets[static_cast<std::size_t>(lambda_index)];
  return w;
}

Var distortion(const Var& x, const Var& x_hat, Distortion d) {
  if (d == Distortion::mse) return ops::mse(x, x_hat);
  return ops::add_scalar(ops::scale(ms_ssim(x, x_hat), -1.0), 1.0);
}

namespace {

void require_nonnegative_rate(const Var& r, const char* name) {
  if (r.numel() != 1) throw std::invalid_argument(std::string(name) + " must be a scalar");
  if (r.item() < 0.0) throw std::invalid_argument(std::string(name) + " is negative (" + std::to_string(r.item()) + ")");
}

Var rd_combine(const Var& d, const Var& rate_y, const Var& rate_z, double lambda) {
  require_nonnegative_rate(rate_y, "R_y");
  require_nonnegative_rate(rate_z, "R_z");
  return ops::add(d, ops::scale(ops::add(rate_y, rate_z), lambda));
}

}  // namespace

Var teacher_loss(const Var& x, const Var& x_hat, const Var& rate_y, const Var& rate_z, const FEDSWeights& w) {
  return rd_combine(distortion(x, x_hat, w.distortion), rate_y, rate_z, w.lambda);
}

Var output_loss(const Var& x_hat_teacher, const Var& x_hat_student) { return ops::mse(x_hat_teacher, x_hat_student); }

Var feature_loss(std::span<const FeatureTap> teacher, std::span<const FeatureTap> student) {
  if (teacher.empty() || teacher.size() != student.size()) {
    throw std::invalid_argument("feature_loss: tap counts differ (" + std::to_string(teacher.size()) + " vs " +
                                std::to_string(student.size()) + ")");
  }
  Var acc;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].stage_index != student[i].stage_index) throw std::invalid_argument("feature_loss: stage mismatch");
    if (teacher[i].values.shape() != student[i].values.shape()) {
      throw std::invalid_argument("feature_loss: tap " + std::to_string(teacher[i].stage_index) + " shapes " +
                                  shape_str(teacher[i].values.shape()) + " vs " + shape_str(student[i].values.shape()));
    }
    const Var m = ops::mse(teacher[i].values, student[i].values);
    acc = acc.defined() ? ops::add(acc, m) : m;
  }
  return ops::scale(acc, 1.0 / static_cast<double>(teacher.size()));
}

Var select_teacher_channels(const Var& y_hat_teacher, const ChannelEntropyRanking& ranking, int student_channels) {
  const int ct = y_hat_teacher.shape().size() == 4 ? y_hat_teacher.shape()[1] : 0;
  if (static_cast<int>(ranking.order.size()) != ct) {
    throw std::invalid_argument("select_teacher_channels: ranking covers " + std::to_string(ranking.order.size()) +
                                " channels, latent has " + std::to_string(ct));
  }
  if (student_channels < 1 || student_channels > ct) {
    throw std::invalid_argument("select_teacher_channels: C_s=" + std::to_string(student_channels) + " outside [1, " +
                                std::to_string(ct) + "]");
  }
  return ops::select_channels(y_hat_teacher,
                              std::span<const int>(ranking.order.data(), static_cast<std::size_t>(student_channels)));
}

Var latent_loss(const Var& teacher_selected, const Var& y_hat_student) {
  return ops::mse(teacher_selected, y_hat_student);
}

TeacherOutputs teacher_outputs(const ForwardOutput& f) {
  TeacherOutputs t;
  t.x_hat = f.x_hat.detach();
  t.y_hat = f.y_hat.detach();
  for (const auto& tap : f.analysis.taps) t.taps.push_back({tap.stage_index, tap.values.detach()});
  t.ranking = channel_entropy_profile(f.y_hat.value(), f.y_params.mu.value(), f.y_params.sigma.value()).ranking;
  return t;
}

StudentOutputs student_outputs(const ForwardOutput& f) {
  return {f.x_hat, f.y_hat, f.analysis.taps, f.rate_y, f.rate_z};
}

namespace {

Var rd_part(const Var& x, const Var& x_hat, const Var& rate_y, const Var& rate_z, const FEDSWeights& w,
            LossBreakdown& b) {
  const Var d = distortion(x, x_hat, w.distortion);
  b.D = d.item();
  b.R_y = rate_y.item();
  b.R_z = rate_z.item();
  return rd_combine(d, rate_y, rate_z, w.lambda);
}

}  // namespace

LossResult student_total_loss(const DistillationBatchOutputs& batch, const Var& x, const FEDSWeights& w) {
  w.validate();
  LossResult r;
  const auto& s = batch.student;
  const auto& t = batch.teacher;
  r.total = rd_part(x, s.x_hat, s.rate_y, s.rate_z, w, r.terms);

  auto term = [&](double weight, auto&& compute, double& out) {
    if (weight == 0.0) {
      NoGradGuard guard;
      out = compute().item();
      return;
    }
    const Var v = compute();
    out = v.item();
    r.total = ops::add(r.total, ops::scale(v, weight));
  };
  term(w.alpha, [&] { return output_loss(t.x_hat, s.x_hat); }, r.terms.L_out);
  term(w.beta, [&] { return feature_loss(t.taps, s.taps); }, r.terms.L_feat);
  term(w.gamma,
       [&] { return latent_loss(select_teacher_channels(t.y_hat, t.ranking, s.y_hat.shape()[1]), s.y_hat); },
       r.terms.L_lat);
  r.terms.L_KD = w.alpha * r.terms.L_out + w.beta * r.terms.L_feat + w.gamma * r.terms.L_lat;
  r.terms.total = r.total.item();
  return r;
}

LossResult rd_loss(const ForwardOutput& f, const Var& x, const FEDSWeights& w) {
  w.validate();
  LossResult r;
  r.total = rd_part(x, f.x_hat, f.rate_y, f.rate_z, w, r.terms);
  r.terms.total = r.total.item();
  return r;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::teacher: return "teacher";
    case Stage::distill: return "distill";
    case Stage::finetune: return "finetune";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  if (s == "teacher" || s == "train-teacher") return Stage::teacher;
  if (s == "distill") return Stage::distill;
  if (s == "finetune") return Stage::finetune;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

double StagePlan::lr_at(long iteration) const {
  if (lr_schedule.empty()) throw std::logic_error("stage plan has no learning-rate schedule");
  if (iteration < 0) throw std::invalid_argument("negative iteration");
  double lr = lr_schedule.front().second;
  for (const auto& [start, value] : lr_schedule) {
    if (iteration >= start) lr = value;
  }
  return lr;
}

namespace {

long scaled(long iterations, double scale) { return std::lround(static_cast<double>(iterations) * scale); }

// base / 10^k, as literals so the values compare equal to 1e-5 etc
double dropped(int k) {
  static constexpr std::array<double, 5> table{1e-4, 1e-5, 1e-6, 1e-7, 1e-8};
  static_assert(table[0] == kBaseLearningRate);
  return table.at(static_cast<std::size_t>(k));
}

}  // namespace

StagePlan stage_plan(Stage stage, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("stage_plan: scale must be positive");
  StagePlan p;
  p.stage = stage;
  if (stage == Stage::finetune) {
    // continues from the final stage-2 rate (two drops)
    p.total_iterations = scaled(150000, scale);
    p.lr_schedule = {{0, dropped(2)}, {scaled(50000, scale), dropped(3)}, {scaled(100000, scale), dropped(4)}};
    p.loss_terms = {true, true, false};
  } else {
    p.total_iterations = scaled(180000, scale);
    p.lr_schedule = {{0, dropped(0)}, {scaled(130000, scale), dropped(1)}, {scaled(160000, scale), dropped(2)}};
    p.loss_terms = {true, true, stage == Stage::distill};
  }
  if (p.total_iterations < 1) throw std::invalid_argument("stage_plan: scale leaves no iterations");
  return p;
}

}  // namespace feds
