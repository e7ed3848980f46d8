#include <cmath>

#include "doctest.h"
#include "feds/feds_distillation.hpp"
#include "helpers.hpp"
#include "../support/toy.hpp"

using namespace feds;
using feds::testing::random_tensor;

namespace {

Var scalar(double v) { return Var(Tensor::scalar(v)); }
Var cell(double v) { return Var(Tensor(Shape{1, 1, 1, 1}, v)); }

FeatureTap tap(int stage, Var v) { return {stage, std::move(v)}; }

}  // namespace

TEST_SUITE("feds_distillation") {

TEST_CASE("weights") {
  const FEDSWeights w;
  CHECK(w.alpha == 1.0);
  CHECK(w.beta == 0.5);
  CHECK(w.gamma == 0.5);
  CHECK(w.distortion == Distortion::mse);
  CHECK(kLambdaPresets == std::array<double, 7>{0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06});
  CHECK(feds_weights_for(3).lambda == 0.015);
  CHECK_THROWS_AS(feds_weights_for(7), std::invalid_argument);
  CHECK_THROWS_AS(feds_weights_for(-1), std::invalid_argument);
  FEDSWeights bad;
  bad.beta = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = FEDSWeights{};
  bad.lambda = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(distortion_from_string("ms-ssim") == Distortion::ms_ssim);
  CHECK_THROWS_AS(distortion_from_string("l1"), std::invalid_argument);
}

TEST_CASE("teacher loss") {
  FEDSWeights w;
  w.lambda = 0.015;
  const Var x(Tensor(Shape{1, 3, 4, 4}, 0.5));
  CHECK(teacher_loss(x, x, scalar(0.0), scalar(0.0), w).item() == 0.0);

  const Var off(Tensor(Shape{1, 3, 4, 4}, 0.6));  // D = 0.01
  CHECK(teacher_loss(x, off, scalar(0.7), scalar(0.3), w).item() == doctest::Approx(0.025).epsilon(1e-12));
  CHECK(teacher_loss(x, x, scalar(0.7), scalar(0.3), w).item() == 0.015 * (0.7 + 0.3));
  CHECK_THROWS_AS(teacher_loss(x, x, scalar(-0.1), scalar(0.3), w), std::invalid_argument);
  CHECK_THROWS_AS(teacher_loss(x, x, scalar(0.1), scalar(-0.3), w), std::invalid_argument);
}

TEST_CASE("output loss") {
  Rng rng(1);
  const Var a(random_tensor({2, 3, 4, 4}, rng, 0, 1)), b(random_tensor({2, 3, 4, 4}, rng, 0, 1));
  CHECK(output_loss(a, a).item() == 0.0);
  CHECK(output_loss(a, b).item() == output_loss(b, a).item());
  CHECK(output_loss(Var(Tensor(Shape{1, 3, 4, 4}, 0.2)), Var(Tensor(Shape{1, 3, 4, 4}, 0.3))).item() ==
        doctest::Approx(0.01).epsilon(1e-12));
  CHECK_THROWS_AS(output_loss(a, Var(Tensor(Shape{1, 3, 4, 4}))), std::invalid_argument);
}

TEST_CASE("feature loss") {
  std::vector<FeatureTap> t{tap(1, cell(0.0)), tap(2, cell(0.0))};
  std::vector<FeatureTap> s{tap(1, cell(1.0)), tap(2, cell(std::sqrt(3.0)))};
  CHECK(feature_loss(t, t).item() == 0.0);
  CHECK(feature_loss(t, s).item() == doctest::Approx(2.0).epsilon(1e-12));
  std::vector<FeatureTap> one_t{tap(1, cell(5.0))}, one_s{tap(1, cell(3.0))};
  CHECK(feature_loss(one_t, one_s).item() == 4.0);
  CHECK_THROWS_AS(feature_loss(t, one_s), std::invalid_argument);
  std::vector<FeatureTap> wide{tap(1, Var(Tensor(Shape{1, 2, 1, 1}))), tap(2, cell(0.0))};
  CHECK_THROWS_AS(feature_loss(t, wide), std::invalid_argument);
}

TEST_CASE("teacher channel selection") {
  // C_t = 3 with entropies [3, 1, 2]: channel c holds the value c everywhere
  Tensor y(Shape{1, 3, 2, 2});
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 4; ++i) y.data[static_cast<std::size_t>(c * 4 + i)] = c;
  }
  const ChannelEntropyRanking r = rank_from_means({3.0, 1.0, 2.0});
  const Var sel = select_teacher_channels(Var(y), r, 2);
  CHECK(sel.shape() == Shape{1, 2, 2, 2});
  CHECK(sel.value().data == std::vector<double>{0, 0, 0, 0, 2, 2, 2, 2});

  const Var all = select_teacher_channels(Var(y), r, 3);
  CHECK(all.value().data == std::vector<double>{0, 0, 0, 0, 2, 2, 2, 2, 1, 1, 1, 1});
  CHECK_THROWS_AS(select_teacher_channels(Var(y), r, 4), std::invalid_argument);

  // values of the unselected channel do not matter
  Tensor y2 = y;
  for (int i = 0; i < 4; ++i) y2.data[static_cast<std::size_t>(4 + i)] = 100.0 + i;
  CHECK(select_teacher_channels(Var(y2), r, 2).value().data == sel.value().data);
}

TEST_CASE("latent loss") {
  Rng rng(2);
  const Var a(random_tensor({1, 4, 3, 3}, rng));
  CHECK(latent_loss(a, a).item() == 0.0);
  const Var b1(Tensor(Shape{1, 4, 3, 3}, 0.0)), gap(Tensor(Shape{1, 4, 3, 3}, 0.25)), gap2(Tensor(Shape{1, 4, 3, 3}, 0.5));
  CHECK(latent_loss(b1, gap2).item() == 4.0 * latent_loss(b1, gap).item());
  CHECK_THROWS_AS(latent_loss(a, Var(Tensor(Shape{1, 4, 3, 2}))), std::invalid_argument);
}

TEST_CASE("student total loss") {
  DistillationBatchOutputs b;
  b.teacher.x_hat = cell(0.0);
  b.teacher.y_hat = cell(0.0);
  b.teacher.taps = {tap(1, cell(0.0))};
  b.teacher.ranking = rank_from_means({1.0});
  b.student.x_hat = cell(std::sqrt(0.1));
  b.student.y_hat = cell(std::sqrt(0.4));
  b.student.taps = {tap(1, cell(std::sqrt(0.2)))};
  b.student.rate_y = scalar(0.3);
  b.student.rate_z = scalar(0.2);
  const Var x = cell(0.0);

  FEDSWeights w;
  w.lambda = 0.015;
  const LossResult r = student_total_loss(b, x, w);
  CHECK(r.terms.L_out == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.terms.L_feat == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(r.terms.L_lat == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(r.terms.L_KD == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(r.terms.D == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.terms.total == doctest::Approx(0.1 + 0.015 * 0.5 + 0.4).epsilon(1e-12));
  CHECK(r.total.item() == r.terms.total);
  CHECK(r.terms.L_KD >= 0.0);

  w.alpha = w.beta = w.gamma = 0.0;
  const LossResult direct = student_total_loss(b, x, w);
  CHECK(direct.terms.L_KD == 0.0);
  CHECK(direct.terms.L_out == r.terms.L_out);  // still reported
  CHECK(direct.total.item() == doctest::Approx(0.1 + 0.015 * 0.5).epsilon(1e-12));
}

TEST_CASE("distillation gradients stop at the teacher") {
  const NetworkConfig tcfg = testing::tiny_config(Role::teacher), scfg = testing::tiny_config(Role::student);
  CodecModel teacher = CodecModel::create(tcfg, 3), student = CodecModel::create(scfg, 4);
  teacher.params.set_trainable(true);
  Rng rng(5);
  const Var x(random_tensor({1, 3, 64, 64}, rng, 0, 1));
  DistillationBatchOutputs b;
  b.teacher = teacher_outputs(forward(teacher, x, QuantMode::train, nullptr));
  b.student = student_outputs(forward(student, x, QuantMode::train, nullptr));
  const LossResult r = student_total_loss(b, x, feds_weights_for(2));
  backward(r.total);
  int student_grads = 0;
  for (const auto& v : student.params.all()) student_grads += v.has_grad() ? 1 : 0;
  CHECK(student_grads > 0);
  for (const auto& v : teacher.params.all()) CHECK_FALSE(v.has_grad());
}

TEST_CASE("stage plans") {
  const StagePlan t = stage_plan(Stage::teacher);
  CHECK(t.total_iterations == 180000);
  CHECK(t.lr_at(0) == 1e-4);
  CHECK(t.lr_at(129999) == 1e-4);
  CHECK(t.lr_at(130000) == 1e-5);
  CHECK(t.lr_at(140000) == 1e-5);
  CHECK(t.lr_at(159999) == 1e-5);
  CHECK(t.lr_at(160000) == 1e-6);
  CHECK(t.lr_at(179999) == 1e-6);
  CHECK_FALSE(t.loss_terms.kd);

  const StagePlan d = stage_plan(Stage::distill);
  CHECK(d.total_iterations == 180000);
  CHECK(d.lr_schedule == t.lr_schedule);
  CHECK(d.loss_terms.kd);
  CHECK(d.loss_terms.distortion);
  CHECK(d.loss_terms.rate);

  const StagePlan f = stage_plan(Stage::finetune);
  CHECK(f.total_iterations == 150000);
  CHECK(f.lr_at(0) == 1e-6);
  CHECK(f.lr_at(49999) == 1e-6);
  CHECK(f.lr_at(50000) == 1e-7);
  CHECK(f.lr_at(99999) == 1e-7);
  CHECK(f.lr_at(100000) == 1e-8);
  CHECK_FALSE(f.loss_terms.kd);

  const StagePlan s = stage_plan(Stage::teacher, 0.001);
  CHECK(s.total_iterations == 180);
  CHECK(s.lr_at(129) == 1e-4);
  CHECK(s.lr_at(130) == 1e-5);
  CHECK(s.lr_at(159) == 1e-5);
  CHECK(s.lr_at(160) == 1e-6);
  CHECK(stage_plan(Stage::finetune, 0.001).total_iterations == 150);

  CHECK_THROWS_AS(stage_plan(Stage::teacher, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(stage_plan(Stage::teacher, 1e-9), std::invalid_argument);
  CHECK_THROWS_AS(t.lr_at(-1), std::invalid_argument);
  CHECK(stage_from_string("finetune") == Stage::finetune);
  CHECK_THROWS_AS(stage_from_string("stage4"), std::invalid_argument);
}

TEST_CASE("loss terms against central differences") {
  Rng rng(6);
  ParameterStore p;
  p.create("xs", random_tensor({1, 2, 3, 3}, rng));
  p.create("f1", random_tensor({1, 2, 4, 4}, rng));
  p.create("f2", random_tensor({1, 2, 2, 2}, rng));
  p.create("ys", random_tensor({1, 2, 3, 3}, rng));
  p.set_trainable(true);
  const Var xt(random_tensor({1, 2, 3, 3}, rng)), t1(random_tensor({1, 2, 4, 4}, rng)), t2(random_tensor({1, 2, 2, 2}, rng));
  const Var yt(random_tensor({1, 4, 3, 3}, rng));
  const ChannelEntropyRanking r = rank_from_means({0.2, 1.5, 0.7, 1.1});
  auto loss = [&] {
    const Var a = output_loss(xt, p.at("xs"));
    std::vector<FeatureTap> ts{tap(1, t1), tap(2, t2)}, ss{tap(1, p.at("f1")), tap(2, p.at("f2"))};
    const Var b = feature_loss(ts, ss);
    const Var c = latent_loss(select_teacher_channels(yt, r, 2), p.at("ys"));
    const std::vector<Var> terms{a, b, c};
    const std::vector<double> weights{1.0, 0.5, 0.5};
    return ops::weighted_sum(terms, weights);
  };
  backward(loss());
  for (const auto& name : p.names()) {
    Var& w = p.at(name);
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const double numeric = testing::central_difference(w, k, 1e-6, [&] { return loss().item(); });
      CHECK(testing::rel_error(w.grad().data[k], numeric) <= 1e-3);
    }
  }
}

}  // TEST_SUITE
