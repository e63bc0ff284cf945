// dropsynth: command-line entry point for the whole pipeline.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "dropsynth/detection.hpp"
#include "dropsynth/error.hpp"
#include "dropsynth/experiment.hpp"
#include "dropsynth/fid.hpp"
#include "dropsynth/imaging.hpp"
#include "dropsynth/plot.hpp"
#include "dropsynth/procedural.hpp"
#include "dropsynth/training.hpp"

namespace fs = std::filesystem;
using namespace dropsynth;
using nlohmann::json;

namespace {

fs::path g_data_root;

// Relative inputs are looked up under the data root when one is set.
fs::path input(const fs::path& p) {
  if (p.empty() || p.is_absolute() || g_data_root.empty()) return p;
  return g_data_root / p;
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw IoError(fmt::format("{}: {}", path.string(), ex.what()));
  }
}

// Resolved options of a subcommand, written as <dir>/<name>.config.json.
void snapshot(const CLI::App& sub, const fs::path& dir) {
  json doc = {{"command", sub.get_name()}, {"data_root", g_data_root.string()}};
  json opts = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_lnames().empty()) continue;
    const std::string key = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      opts[key] = res.size() == 1 ? json(res.front()) : json(res);
    } else if (!opt->get_default_str().empty()) {
      opts[key] = opt->get_default_str();
    }
  }
  doc["options"] = opts;
  write_json(dir / (sub.get_name() + ".config.json"), doc);
}

fs::path dir_of(const fs::path& file) { return file.has_parent_path() ? file.parent_path() : fs::path("."); }

std::vector<fs::path> list_images(const fs::path& dir) {
  static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && exts.count(ext)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw InvalidArgument(fmt::format("no images in {}", dir.string()));
  return out;
}

std::vector<fs::path> manifest_images(const imaging::DatasetManifest& m, const std::string& split) {
  std::vector<fs::path> out;
  for (const auto& e : m.entries) {
    if (split == "all" || imaging::to_string(e.split) == split) out.push_back(e.image);
  }
  if (out.empty()) throw InvalidArgument(fmt::format("manifest has no '{}' images", split));
  return out;
}

// ---------------------------------------------------------------------------

struct BackendOptions {
  std::string kind = "stub";
  std::string train_cmd, predict_cmd;
  std::string config;  // JSON file with backend settings

  void add(CLI::App* sub) {
    sub->add_option("--backend", kind, "Detector backend")->check(CLI::IsMember({"stub", "command"}))
        ->capture_default_str();
    sub->add_option("--train-cmd", train_cmd, "Command backend: train command ({manifest} {config} {out})");
    sub->add_option("--predict-cmd", predict_cmd, "Command backend: predict command ({model} {images} {out})");
    sub->add_option("--detector-config", config, "JSON file passed to the backend's train step");
  }

  std::unique_ptr<experiment::DetectorBackend> make() const {
    if (kind == "stub") return std::make_unique<experiment::StubDetector>();
    if (train_cmd.empty() || predict_cmd.empty()) {
      throw InvalidArgument("--backend command needs --train-cmd and --predict-cmd");
    }
    return std::make_unique<experiment::CommandBackend>(train_cmd, predict_cmd);
  }

  json settings() const { return config.empty() ? json::object() : read_json(input(config)); }
};

struct ExtractorOptions {
  std::string kind = "tiny_embedder";
  std::string weights;
  std::size_t channels = 1;
  std::string split = "all";

  void add(CLI::App* sub) {
    sub->add_option("--extractor", kind, "tiny_embedder or inception_v3")->capture_default_str();
    sub->add_option("--inception-weights", weights, "Inception weight archive (else $DROPSYNTH_INCEPTION_WEIGHTS)");
    sub->add_option("--channels", channels, "Channels used when decoding images")->capture_default_str();
    sub->add_option("--split", split, "Manifest split to embed: train, val, test or all")->capture_default_str();
  }

  std::unique_ptr<fid::FeatureExtractor> make() const {
    std::optional<fs::path> w;
    if (!weights.empty()) w = input(weights);
    return fid::make_extractor(fid::parse_extractor(kind), w);
  }

  // A feature cache, a manifest (.json) or a directory of images.
  fid::FeatureSet features(const fs::path& source, const fid::FeatureExtractor* extractor) const {
    const fs::path p = input(source);
    if (fs::is_directory(p)) return fid::extract_features(list_images(p), *extractor, channels);
    if (p.extension() == ".json") {
      return fid::extract_features(manifest_images(imaging::DatasetManifest::load(p), split), *extractor, channels);
    }
    return fid::load_features(p);
  }
};

bool is_cache(const fs::path& p) { return fs::is_regular_file(p) && p.extension() != ".json"; }

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"dropsynth: synthetic droplet images for detector training"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string data_root;
  app.add_option("--data-root", data_root, "Base directory for relative input paths")->envname("DROPSYNTH_DATA_ROOT");
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error")->capture_default_str();

  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Seed for all randomness")->capture_default_str(); };

  std::function<void()> action;

  // prepare --------------------------------------------------------------
  auto* prepare = app.add_subcommand("prepare", "Crop, resize and split a folder of images into a manifest");
  std::string source, out;
  imaging::PrepareOptions popt;
  std::vector<double> ratios{0.653, 0.174, 0.173};
  prepare->add_option("--source", source, "Folder of images (labels as <stem>.txt or labels/<stem>.txt)")->required();
  prepare->add_option("--out", out, "Output dataset directory")->required();
  prepare->add_option("--resolution", popt.target_resolution, "Target side length")->capture_default_str();
  prepare->add_option("--ratios", ratios, "train,val,test fractions")->delimiter(',')->expected(3);
  prepare->add_option("--channels", popt.channels, "1 (gray) or 3 (RGB)")->capture_default_str();
  add_seed(prepare);
  prepare->callback([&] {
    action = [&] {
      popt.seed = seed;
      popt.split_ratios = {ratios[0], ratios[1], ratios[2]};
      const auto m = imaging::prepare_dataset(input(source), out, popt);
      snapshot(*prepare, out);
      fmt::print("{} images: train {} val {} test {}\n", m.entries.size(), m.count(imaging::Split::train),
                 m.count(imaging::Split::val), m.count(imaging::Split::test));
    };
  });

  // scenes ---------------------------------------------------------------
  auto* scenes = app.add_subcommand("scenes", "Write procedural droplet scenes with box labels");
  procedural::SceneOptions sopt;
  std::size_t count = 100;
  scenes->add_option("--out", out, "Output folder")->required();
  scenes->add_option("--count", count, "Number of scenes")->capture_default_str();
  scenes->add_option("--resolution", sopt.resolution, "Side length")->capture_default_str();
  scenes->add_option("--channels", sopt.channels, "1 or 3")->capture_default_str();
  scenes->add_option("--max-droplets", sopt.max_droplets, "Droplets per scene at most")->capture_default_str();
  add_seed(scenes);
  scenes->callback([&] {
    action = [&] {
      procedural::write_corpus(out, count, sopt, seed);
      snapshot(*scenes, out);
      fmt::print("wrote {} scenes to {}\n", count, out);
    };
  });

  // train-gan ------------------------------------------------------------
  auto* train_gan = app.add_subcommand("train-gan", "Progressively train the generator and critic");
  std::string manifest, schedule_path, resume;
  int max_stage = 3;
  std::uint64_t images_per_phase = 250;
  std::uint64_t final_images = 16000;
  std::optional<std::uint64_t> max_steps;
  std::size_t log_every = 50;
  train_gan->add_option("--manifest", manifest, "Dataset manifest (train split is used)")->required();
  train_gan->add_option("--out", out, "Checkpoint directory")->required();
  train_gan->add_option("--schedule", schedule_path, "Schedule JSON; without it a desk-scale schedule is built");
  train_gan->add_option("--max-stage", max_stage, "Desk-scale schedule: last stage")->capture_default_str();
  train_gan->add_option("--images-per-phase", images_per_phase, "Desk-scale schedule: images per fade/stabilize phase")
      ->capture_default_str();
  train_gan->add_option("--final-images", final_images, "Desk-scale schedule: images in the last stabilize phase")
      ->capture_default_str();
  train_gan->add_option("--resume", resume, "Continue from this checkpoint");
  train_gan->add_option("--max-steps", max_steps, "Stop after this many steps");
  train_gan->add_option("--log-every", log_every, "Log every N steps")->capture_default_str();
  add_seed(train_gan);
  train_gan->callback([&] {
    action = [&] {
      const auto m = imaging::DatasetManifest::load(input(manifest));
      auto sched = schedule_path.empty() ? gan::TrainSchedule::desk_scale(max_stage, images_per_phase, final_images)
                                         : gan::TrainSchedule::load(input(schedule_path));
      sched.network.image_channels = m.channels;
      fs::create_directories(out);
      sched.save(fs::path(out) / "schedule.json");
      snapshot(*train_gan, out);
      gan::TrainOptions topt;
      topt.out_dir = out;
      topt.seed = seed;
      topt.max_steps = max_steps;
      if (!resume.empty()) topt.resume = input(resume);
      topt.on_step = [&](const gan::StepRecord& r) {
        if (log_every && r.step % log_every == 0) {
          spdlog::info("step {} stage {} {} alpha {:.3f} images {} d {:.4f} g {:.4f} gp {:.4f}", r.step, r.stage,
                       r.phase, r.alpha, r.images_seen, r.d_loss, r.g_loss, r.penalty);
        }
      };
      const auto res = gan::train(m, sched, topt);
      fmt::print("{} steps, {} images, final checkpoint {}\n", res.steps, res.images_seen,
                 res.final_checkpoint.string());
    };
  });

  // generate -------------------------------------------------------------
  auto* generate = app.add_subcommand("generate", "Write images from a checkpoint");
  std::string checkpoint, manifest_out;
  gan::GenerateOptions gopt;
  gopt.keep_pixels = false;
  count = 100;
  generate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  generate->add_option("--count", count, "Number of images")->capture_default_str();
  generate->add_option("--out", out, "Output folder")->required();
  generate->add_option("--batch", gopt.batch_size, "Generator batch size")->capture_default_str();
  generate->add_option("--prefix", gopt.prefix, "File name prefix")->capture_default_str();
  generate->add_option("--manifest", manifest_out, "Also write a synthetic manifest here");
  add_seed(generate);
  generate->callback([&] {
    action = [&] {
      const auto ck = gan::GanCheckpoint::load(input(checkpoint));
      const auto recs = gan::generate(ck, count, seed, out, gopt);
      snapshot(*generate, out);
      if (!manifest_out.empty()) {
        std::vector<fs::path> paths;
        for (const auto& r : recs) paths.push_back(r.path);
        auto m = experiment::synthetic_manifest(paths, ck.id(), imaging::ResolutionLadder::resolution_of(ck.stage),
                                                ck.network.image_channels);
        m.seed = seed;
        m.save(manifest_out);
      }
      fmt::print("wrote {} images from {} (stage {})\n", recs.size(), ck.id(), ck.stage);
    };
  });

  // fid ------------------------------------------------------------------
  auto* fidcmd = app.add_subcommand("fid", "Frechet distance between two image sets");
  std::string real, fake, variant = "standard", save_real, save_fake;
  ExtractorOptions xopt;
  fidcmd->add_option("--real", real, "Feature cache, image folder or manifest")->required();
  fidcmd->add_option("--fake", fake, "Feature cache, image folder or manifest")->required();
  fidcmd->add_option("--variant", variant, "standard or paper_literal")->capture_default_str();
  fidcmd->add_option("--out", out, "Report path (JSON)");
  fidcmd->add_option("--save-real-features", save_real, "Cache the real features here");
  fidcmd->add_option("--save-fake-features", save_fake, "Cache the generated features here");
  xopt.add(fidcmd);
  add_seed(fidcmd);
  fidcmd->callback([&] {
    action = [&] {
      // Only build the network when something has to be embedded.
      std::unique_ptr<fid::FeatureExtractor> ex;
      if (!is_cache(input(real)) || !is_cache(input(fake))) ex = xopt.make();
      const auto fr = xopt.features(real, ex.get());
      const auto ff = xopt.features(fake, ex.get());
      if (!save_real.empty()) fid::save_features(save_real, fr);
      if (!save_fake.empty()) fid::save_features(save_fake, ff);
      const auto rep = fid::compute_fid(fr, ff, fid::parse_variant(variant));
      fmt::print("FID {:.6f} ({} real, {} generated, {})\n", rep.fid, rep.n_real, rep.n_fake, rep.extractor_id);
      if (!out.empty()) {
        write_json(out, rep.to_json());
        snapshot(*fidcmd, dir_of(out));
      }
    };
  });

  // eval-detect ----------------------------------------------------------
  auto* eval = app.add_subcommand("eval-detect", "Score predictions against a manifest split");
  std::string predictions, split = "test", interpolation = "all_point";
  eval->add_option("--predictions", predictions, "Prediction file")->required();
  eval->add_option("--manifest", manifest, "Dataset manifest with labels")->required();
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_option("--interpolation", interpolation, "all_point or coco_101")->capture_default_str();
  eval->add_option("--out", out, "Report path (JSON)");
  add_seed(eval);
  eval->callback([&] {
    action = [&] {
      const auto m = imaging::DatasetManifest::load(input(manifest));
      const auto preds = detect::read_predictions(input(predictions));
      const auto rep = detect::map_suite(preds, detect::ground_truth(m, imaging::parse_split(split)),
                                         detect::parse_interpolation(interpolation));
      fmt::print("mAP50 {:.4f}  mAP50-95 {:.4f}  P {:.4f}  R {:.4f}  F1 {:.4f}\n", rep.map50, rep.map50_95,
                 rep.precision, rep.recall, rep.f1);
      if (!out.empty()) {
        rep.save(out);
        snapshot(*eval, dir_of(out));
      }
    };
  });

  // train-detector -------------------------------------------------------
  auto* train_det = app.add_subcommand("train-detector", "Train a detector backend on a manifest");
  BackendOptions bopt;
  train_det->add_option("--manifest", manifest, "Dataset manifest")->required();
  train_det->add_option("--out", out, "Work directory")->required();
  bopt.add(train_det);
  add_seed(train_det);
  train_det->callback([&] {
    action = [&] {
      auto backend = bopt.make();
      json cfg = bopt.settings();
      cfg["seed"] = seed;
      fs::create_directories(out);
      const auto model = backend->train(input(manifest), cfg, out);
      snapshot(*train_det, out);
      fmt::print("{}\n", model.string());
    };
  });

  // predict --------------------------------------------------------------
  auto* predict = app.add_subcommand("predict", "Run a trained detector over images");
  std::string model, images;
  predict->add_option("--model", model, "Model file from train-detector")->required();
  predict->add_option("--images", images, "Image folder or manifest")->required();
  predict->add_option("--split", split, "Manifest split (train, val, test or all)")->capture_default_str();
  predict->add_option("--out", out, "Prediction file")->required();
  bopt.add(predict);
  add_seed(predict);
  predict->callback([&] {
    action = [&] {
      auto backend = bopt.make();
      const fs::path src = input(images);
      const auto paths = fs::is_directory(src) ? list_images(src)
                                               : manifest_images(imaging::DatasetManifest::load(src), split);
      const fs::path work = dir_of(out) / "predict_work";
      const auto dets = backend->predict(input(model), paths, work);
      detect::write_predictions(out, dets);
      snapshot(*predict, dir_of(out));
      fmt::print("{} detections on {} images\n", dets.size(), paths.size());
    };
  });

  // pseudo-label ---------------------------------------------------------
  auto* pseudo = app.add_subcommand("pseudo-label", "Label synthetic images with a detector trained on real data");
  std::string synthetic, label_dir, refine_cmd;
  double floor = 0.25;
  pseudo->add_option("--model", model, "Model file from train-detector")->required();
  pseudo->add_option("--synthetic", synthetic, "Synthetic manifest (from generate --manifest)")->required();
  pseudo->add_option("--out", out, "Labeled manifest path")->required();
  pseudo->add_option("--label-dir", label_dir, "Where label files go (default: <out dir>/labels)");
  pseudo->add_option("--floor", floor, "Confidence floor")->capture_default_str();
  pseudo->add_option("--refine-cmd", refine_cmd, "Command run afterwards ({labels} {manifest})");
  bopt.add(pseudo);
  add_seed(pseudo);
  pseudo->callback([&] {
    action = [&] {
      auto backend = bopt.make();
      experiment::PseudoLabelOptions o;
      o.confidence_floor = floor;
      o.label_dir = label_dir.empty() ? dir_of(out) / "labels" : fs::path(label_dir);
      if (!refine_cmd.empty()) o.refine_command = refine_cmd;
      const auto syn = imaging::DatasetManifest::load(input(synthetic));
      auto res = experiment::pseudo_label(*backend, input(model), syn, o, dir_of(out) / "pseudo_work");
      res.manifest.save(out);
      snapshot(*pseudo, dir_of(out));
      std::size_t boxes = 0;
      for (auto c : res.box_counts) boxes += c;
      fmt::print("{} images, {} boxes kept of {} predicted, {} flagged for review\n", res.box_counts.size(), boxes,
                 res.raw_predictions, res.flagged);
    };
  });

  // quality-rank ---------------------------------------------------------
  auto* rank = app.add_subcommand("quality-rank", "Score synthetic images by windowed FID to a reference set");
  std::string reference;
  std::size_t window = 32;
  std::optional<std::size_t> top;
  rank->add_option("--synthetic", synthetic, "Synthetic manifest")->required();
  rank->add_option("--reference", reference, "Feature cache, image folder or manifest")->required();
  rank->add_option("--window", window, "Candidates per scoring window")->capture_default_str();
  rank->add_option("--top", top, "Keep only the best K entries");
  rank->add_option("--out", out, "Scored manifest path")->required();
  xopt.add(rank);
  add_seed(rank);
  rank->callback([&] {
    action = [&] {
      auto syn = imaging::DatasetManifest::load(input(synthetic));
      std::unique_ptr<fid::FeatureExtractor> ex = xopt.make();
      const auto ref = xopt.features(reference, ex.get());
      std::vector<fs::path> paths;
      for (const auto& e : syn.entries) paths.push_back(e.image);
      const auto cand = fid::extract_features(paths, *ex, xopt.channels);
      const auto scores = experiment::quality_rank(cand, fid::fit_gaussian(ref), window);
      for (std::size_t i = 0; i < scores.size(); ++i) syn.entries[i].quality_score = scores[i];
      if (top) {
        std::vector<imaging::ManifestEntry> kept;
        for (auto i : experiment::select_top(scores, *top)) kept.push_back(syn.entries[i]);
        syn.entries = std::move(kept);
      }
      syn.metadata["quality_rank"] = {{"window", window}, {"extractor", ex->id()}, {"kept", syn.entries.size()}};
      syn.save(out);
      snapshot(*rank, dir_of(out));
      fmt::print("scored {} candidates, kept {}\n", scores.size(), syn.entries.size());
    };
  });

  // experiment -----------------------------------------------------------
  auto* exp = app.add_subcommand("experiment", "Run the real+synthetic mixing ladder");
  std::vector<std::size_t> rungs;
  exp->add_option("--real", real, "Real dataset manifest")->required();
  exp->add_option("--synthetic", synthetic, "Pseudo-labeled synthetic manifest")->required();
  exp->add_option("--rungs", rungs, "Training-set sizes, first = real train count")->delimiter(',')->required();
  exp->add_option("--out", out, "Work directory (report.json goes here)")->required();
  exp->add_option("--interpolation", interpolation, "all_point or coco_101")->capture_default_str();
  bopt.add(exp);
  add_seed(exp);
  exp->callback([&] {
    action = [&] {
      auto backend = bopt.make();
      experiment::LadderOptions lo;
      lo.rungs = rungs;
      lo.seed = seed;
      lo.work_dir = out;
      lo.backend_config = bopt.settings();
      lo.interpolation = detect::parse_interpolation(interpolation);
      const auto r = experiment::run_ladder(*backend, imaging::DatasetManifest::load(input(real)),
                                            imaging::DatasetManifest::load(input(synthetic)), lo);
      r.save(fs::path(out) / "report.json");
      snapshot(*exp, out);
      fmt::print("{}", r.render_table());
      for (const auto& p : r.hygiene.problems) spdlog::error("split hygiene: {}", p);
      if (!r.complete()) throw Error("experiment incomplete; see failed rungs above");
      if (!r.hygiene.ok()) throw Error("split hygiene check failed");
    };
  });

  // plot -----------------------------------------------------------------
  auto* plotcmd = app.add_subcommand("plot", "Render charts from reports");
  plotcmd->require_subcommand(1);
  std::vector<std::string> reports, labels;
  auto add_plot = [&](const char* name, const char* help) {
    auto* sub = plotcmd->add_subcommand(name, help);
    sub->add_option("--report", reports, "Report file(s)")->required();
    sub->add_option("--label", labels, "Legend label per report (default: file stem)");
    sub->add_option("--out", out, "PNG path")->required();
    add_seed(sub);
    return sub;
  };
  auto label_of = [&](std::size_t i) {
    return i < labels.size() ? labels[i] : fs::path(reports[i]).stem().string();
  };
  auto* plot_pr = add_plot("pr", "Precision-recall curves from detection reports");
  plot_pr->callback([&] {
    action = [&] {
      std::vector<std::pair<std::string, detect::DetectionReport>> rs;
      for (std::size_t i = 0; i < reports.size(); ++i) {
        rs.emplace_back(label_of(i), detect::DetectionReport::load(input(reports[i])));
      }
      plot::pr_curves(out, rs);
    };
  });
  auto* plot_fid = add_plot("fid", "FID bars from fid reports");
  plot_fid->callback([&] {
    action = [&] {
      std::vector<std::pair<std::string, fid::FidReport>> rs;
      for (std::size_t i = 0; i < reports.size(); ++i) {
        const json j = read_json(input(reports[i]));
        fid::FidReport r;
        try {
          r.fid = j.at("fid").get<double>();
          r.n_real = j.value("n_real", std::size_t{0});
          r.n_fake = j.value("n_fake", std::size_t{0});
          r.extractor_id = j.value("extractor", "");
        } catch (const json::exception& ex) {
          throw IoError(fmt::format("{}: {}", reports[i], ex.what()));
        }
        rs.emplace_back(label_of(i), r);
      }
      plot::fid_bars(out, rs);
    };
  });
  auto* plot_ladder = add_plot("ladder", "Per-rung mAP bars from an experiment report");
  plot_ladder->callback([&] {
    action = [&] { plot::ladder(out, experiment::ExperimentReport::load(input(reports.at(0)))); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  spdlog::set_level(spdlog::level::from_str(log_level));
  g_data_root = data_root;
  try {
    if (action) action();
    if (plot_pr->parsed() || plot_fid->parsed() || plot_ladder->parsed()) fmt::print("wrote {}\n", out);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
