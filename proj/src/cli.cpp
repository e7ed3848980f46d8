#include "feds/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "feds/bitstream_codec.hpp"
#include "feds/eval_metrics.hpp"
#include "feds/image_io.hpp"
#include "feds/training_pipeline.hpp"

namespace feds {

namespace {

// Flags shared by every verb. Anything left unset falls back to env/config/presets.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  double scale = 1.0;
  int lambda_index = 2;
  std::string out;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* scale_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
};

void add_common(CLI::App& cmd, Common& c, const std::string& out_help) {
  cmd.add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  c.seed_opt = cmd.add_option("--seed", c.seed, "master seed (overrides FEDS_SEED and config)");
  c.scale_opt = cmd.add_option("--scale", c.scale, "toy factor for iteration counts and LR drops")
                    ->check(CLI::PositiveNumber);
  c.lambda_opt = cmd.add_option("--lambda-index", c.lambda_index, "rate point 0..6")->check(CLI::Range(0, 6));
  cmd.add_option("--out", c.out, out_help);
}

struct TrainFlags {
  Common common;
  std::string data;
  std::string resume;
  std::string teacher;
  std::string from;
  std::string log;
  int batch_size = 0;
  long checkpoint_every = -1;
  long stop_after = -1;
};

Settings settings_for(Role role, const Common& c) {
  const auto kv = c.config.empty() ? std::map<std::string, std::string>{} : read_config_file(c.config);
  Settings s = resolve_settings(role, kv);
  if (c.seed_opt->count()) s.seed = c.seed;
  if (c.scale_opt->count()) s.scale = c.scale;
  if (c.lambda_opt->count()) {
    s.lambda_index = c.lambda_index;
    s.weights.lambda = kLambdaPresets[static_cast<std::size_t>(c.lambda_index)];
  }
  return s;
}

std::unique_ptr<PatchStream> training_data(const Settings& s, const std::string& data_flag, std::ostream& err) {
  const std::filesystem::path dir = data_flag.empty() ? s.data_dir : std::filesystem::path(data_flag);
  if (!dir.empty()) {
    DatasetSpec spec;
    spec.image_paths = list_images(dir);
    spec.crop_size = s.crop_size;
    spec.augmentations = s.augmentations;
    spec.rescale_target = s.rescale_target;
    return std::make_unique<PatchStream>(spec, &err);
  }
  if (s.synthetic_count > 0) {
    return std::make_unique<PatchStream>(
        synthetic_images(s.synthetic_count, s.synthetic_size, s.synthetic_size, derive_seed(s.seed, 0xda7a)), s.crop_size,
        s.augmentations);
  }
  throw std::invalid_argument("no training data: pass --data DIR or set data.dir / data.synthetic_count");
}

int run_train(Stage stage, TrainFlags& f, std::ostream& out, std::ostream& err) {
  if (f.common.out.empty()) throw std::invalid_argument("--out CHECKPOINT is required");
  Settings s = settings_for(stage == Stage::teacher ? Role::teacher : Role::student, f.common);
  if (f.batch_size > 0) s.optimizer.batch_size = f.batch_size;
  if (f.checkpoint_every >= 0) s.checkpoint_every = f.checkpoint_every;

  std::optional<Checkpoint> start, teacher;
  if (!f.resume.empty()) start = checkpoint_load(f.resume);
  if (stage == Stage::distill) {
    if (f.teacher.empty()) throw std::invalid_argument("distill requires --teacher-ckpt");
    teacher = checkpoint_load(f.teacher);
  }
  if (stage == Stage::finetune) {
    if (f.from.empty() && !start) throw std::invalid_argument("finetune requires --from DISTILL_CHECKPOINT");
    if (!f.from.empty()) {
      if (start) throw std::invalid_argument("pass either --from or --resume, not both");
      start = checkpoint_load(f.from);
    }
  }

  TrainOptions opt;
  opt.weights = s.weights;
  opt.lambda_index = s.lambda_index;
  opt.optimizer = s.optimizer;
  opt.seed = s.seed;
  opt.scale = s.scale;
  opt.log_every = s.log_every;
  opt.checkpoint_every = s.checkpoint_every;
  opt.checkpoint_path = f.common.out;
  opt.stop_after = f.stop_after;
  // a checkpoint being continued carries its own rate point and seed
  if (start) {
    if (f.common.lambda_opt->count() && f.common.lambda_index != start->lambda_index) {
      throw std::invalid_argument("--lambda-index " + std::to_string(f.common.lambda_index) +
                                  " does not match the checkpoint (" + std::to_string(start->lambda_index) + ")");
    }
    opt.weights = start->weights;
    opt.lambda_index = start->lambda_index;
    if (!f.common.seed_opt->count() && !std::getenv("FEDS_SEED")) opt.seed = start->seed;
  }
  if (teacher && teacher->lambda_index != opt.lambda_index) {
    throw std::invalid_argument("teacher checkpoint is for lambda index " + std::to_string(teacher->lambda_index) +
                                ", student for " + std::to_string(opt.lambda_index));
  }

  const auto data = training_data(s, f.data, err);
  std::ofstream log_file;
  if (!f.log.empty()) {
    log_file.open(f.log);
    if (!log_file) throw std::runtime_error("cannot write " + f.log);
    opt.log = &log_file;
  } else {
    opt.log = &out;
  }

  StageInputs in;
  in.stage = stage;
  in.fresh_config = s.network;
  in.start = start ? &*start : nullptr;
  in.teacher = teacher ? &*teacher : nullptr;
  const Checkpoint result = run_stage(in, *data, opt);
  checkpoint_save(result, f.common.out);
  err << to_string(stage) << ": " << result.iteration << "/" << stage_plan(stage, opt.scale).total_iterations
      << " iterations" << (result.stage_complete ? "" : " (partial)") << ", saved " << f.common.out << '\n';
  return kExitOk;
}

CodecModel load_model(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("--model CHECKPOINT is required");
  return model_from_checkpoint(checkpoint_load(path));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"FEDS learned image codec"};
  app.name("feds");
  app.require_subcommand(1);

  std::array<TrainFlags, 3> train;
  const std::array<std::pair<const char*, const char*>, 3> train_verbs = {{
      {"train-teacher", "stage 1: rate-distortion training of the teacher"},
      {"distill", "stage 2: distill a student from a frozen teacher"},
      {"finetune", "stage 3: rate-distortion fine-tuning of the distilled student"},
  }};
  std::array<CLI::App*, 3> train_cmds{};
  for (std::size_t i = 0; i < 3; ++i) {
    auto& f = train[i];
    auto* cmd = app.add_subcommand(train_verbs[i].first, train_verbs[i].second);
    add_common(*cmd, f.common, "checkpoint to write");
    cmd->add_option("--data", f.data, "directory of training images")->check(CLI::ExistingDirectory);
    cmd->add_option("--resume", f.resume, "continue an unfinished checkpoint of this stage")->check(CLI::ExistingFile);
    cmd->add_option("--log", f.log, "JSON-lines log file (default stdout)");
    cmd->add_option("--batch-size", f.batch_size, "override train.batch_size")->check(CLI::PositiveNumber);
    cmd->add_option("--checkpoint-every", f.checkpoint_every, "periodic checkpoint interval (0 = off)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--stop-after", f.stop_after, "stop after this many iterations of the stage")
        ->check(CLI::NonNegativeNumber);
    train_cmds[i] = cmd;
  }
  train_cmds[1]->add_option("--teacher-ckpt", train[1].teacher, "completed teacher checkpoint")
      ->check(CLI::ExistingFile);
  train_cmds[2]->add_option("--from", train[2].from, "completed distill checkpoint")->check(CLI::ExistingFile);

  Common cc;
  std::string c_model, c_in;
  auto* compress = app.add_subcommand("compress", "encode one image to a .feds file");
  add_common(*compress, cc, ".feds file to write");
  compress->add_option("--model", c_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  compress->add_option("--in", c_in, "input image")->required()->check(CLI::ExistingFile);

  Common dc;
  std::string d_model, d_in, d_ref;
  auto* decompress = app.add_subcommand("decompress", "decode a .feds file to an image");
  add_common(*decompress, dc, "reconstruction image to write (png)");
  decompress->add_option("--model", d_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  decompress->add_option("--in", d_in, ".feds file")->required()->check(CLI::ExistingFile);
  decompress->add_option("--ref", d_ref, "original image, for PSNR")->check(CLI::ExistingFile);

  Common ec;
  std::string e_model, e_data;
  bool e_json = false;
  auto* eval = app.add_subcommand("eval", "round-trip a directory and report rate-distortion metrics");
  add_common(*eval, ec, "report directory (metrics.csv, aggregate.json)");
  eval->add_option("--model", e_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", e_data, "directory of test images")->required()->check(CLI::ExistingDirectory);
  eval->add_flag("--json", e_json, "print the report as JSON");

  Common mc;
  std::string m_model, m_in;
  std::vector<int> m_ranks;
  auto* emap = app.add_subcommand("entropy-map", "per-channel entropy heatmaps and channel ranking");
  add_common(*emap, mc, "output directory");
  emap->add_option("--model", m_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  emap->add_option("--in", m_in, "image or directory of images")->required()->check(CLI::ExistingPath);
  emap->add_option("--ranks", m_ranks, "1-based ranks to render (default 1,40,80,120,160 up to M)")->delimiter(',');

  Common bc;
  std::string b_anchor, b_test, b_quality = "psnr";
  bool b_json = false;
  auto* bdrate = app.add_subcommand("bdrate", "Bjontegaard delta rate between two RD curves");
  add_common(*bdrate, bc, "unused");
  bdrate->add_option("--anchor", b_anchor, "anchor curve CSV")->required()->check(CLI::ExistingFile);
  bdrate->add_option("--test", b_test, "test curve CSV")->required()->check(CLI::ExistingFile);
  bdrate->add_option("--quality", b_quality, "psnr or msssim_db")->check(CLI::IsMember({"psnr", "msssim_db"}));
  bdrate->add_flag("--json", b_json, "print the result as JSON");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUser;
  }

  try {
    for (std::size_t i = 0; i < 3; ++i) {
      if (train_cmds[i]->parsed()) {
        const Stage stage = i == 0 ? Stage::teacher : (i == 1 ? Stage::distill : Stage::finetune);
        return run_train(stage, train[i], out, err);
      }
    }
    if (compress->parsed()) {
      if (cc.out.empty()) throw std::invalid_argument("--out FILE is required");
      const CodecModel model = load_model(c_model);
      const Tensor img = load_image(c_in);
      const auto t0 = std::chrono::steady_clock::now();
      const CompressResult r = compress_image(pad_image(img), model);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto bytes = r.container.serialize();
      std::ofstream f(cc.out, std::ios::binary);
      if (!f) throw std::runtime_error("cannot write " + cc.out);
      f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw std::runtime_error("write failed for " + cc.out);
      out << "bytes " << bytes.size() << "  bpp " << fixed(r.container.bpp(), 4) << "  estimate "
          << fixed(r.estimated_bpp, 4) << "  psnr " << fixed(psnr(img, r.x_hat), 2) << " dB  enc " << fixed(secs, 3)
          << " s\n";
      return kExitOk;
    }
    if (decompress->parsed()) {
      if (dc.out.empty()) throw std::invalid_argument("--out IMAGE is required");
      const CodecModel model = load_model(d_model);
      const auto bytes = read_bytes(d_in);
      const auto t0 = std::chrono::steady_clock::now();
      const auto container = BitstreamContainer::parse(bytes, model.cfg.num_slices);
      const DecompressResult r = decompress_image(container, model);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_image(dc.out, r.x_hat);
      out << "bpp " << fixed(container.bpp(), 4);
      if (!d_ref.empty()) out << "  psnr " << fixed(psnr(load_image(d_ref), r.x_hat), 2) << " dB";
      out << "  dec " << fixed(secs, 3) << " s\n";
      return kExitOk;
    }
    if (eval->parsed()) {
      const CodecModel model = load_model(e_model);
      const EvaluationReport report = evaluate_model(model, e_data);
      if (!ec.out.empty()) emit_reports(ec.out, &report, {}, {});
      if (e_json) {
        out << report_json(report) << '\n';
      } else {
        out << "image,bpp,psnr_db,msssim_db\n";
        for (const auto& p : report.points) {
          out << p.image << ',' << fixed(p.bpp, 4) << ',' << fixed(p.psnr_db, 2) << ',' << fixed(p.msssim_db, 2)
              << '\n';
        }
        out << "mean," << fixed(report.aggregate.bpp, 4) << ',' << fixed(report.aggregate.psnr_db, 2) << ','
            << fixed(report.aggregate.msssim_db, 2) << '\n';
      }
      return kExitOk;
    }
    if (emap->parsed()) {
      if (mc.out.empty()) throw std::invalid_argument("--out DIR is required");
      const CodecModel model = load_model(m_model);
      std::vector<std::filesystem::path> paths;
      if (std::filesystem::is_directory(m_in)) paths = list_images(m_in);
      else paths.push_back(m_in);
      if (paths.empty()) throw std::invalid_argument("no images in " + m_in);
      if (m_ranks.empty()) {
        for (int r : {1, 40, 80, 120, 160}) {
          if (r <= model.cfg.M) m_ranks.push_back(r);
        }
      }
      std::vector<EntropyMapReport> maps;
      for (const auto& p : paths) maps.push_back(entropy_map_for(model, p.filename().string(), load_image(p)));
      emit_reports(mc.out, nullptr, maps, m_ranks);
      for (const auto& m : maps) {
        out << m.image << ": top channels";
        for (std::size_t i = 0; i < std::min<std::size_t>(5, m.ranking.order.size()); ++i) out << ' ' << m.ranking.order[i];
        out << '\n';
      }
      return kExitOk;
    }
    if (bdrate->parsed()) {
      const QualityMetric q = quality_from_string(b_quality);
      const RDCurve anchor = load_rd_curve(b_anchor), test = load_rd_curve(b_test);
      const BDRateResult r = bd_rate(anchor, test, q);
      if (b_json) {
        nlohmann::ordered_json j;
        j["anchor"] = anchor.label;
        j["test"] = test.label;
        j["quality"] = b_quality;
        j["bd_rate_percent"] = r.percent;
        j["quality_low"] = r.quality_low;
        j["quality_high"] = r.quality_high;
        out << j.dump(2) << '\n';
      } else {
        out << "BD-rate (" << b_quality << "): " << (r.percent > 0.0 ? "+" : "") << fixed(r.percent, 3) << "%\n";
      }
      return kExitOk;
    }
    throw std::logic_error("no verb handled");
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace feds
