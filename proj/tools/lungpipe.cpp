// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lungpipe/error.hpp"
#include "lungpipe/pipeline.hpp"

namespace {

struct Args {
  std::string config;
  std::string run_dir = "run";
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  std::string profile;
  bool force = false;
  bool quiet = false;
  std::string detector = "nodule";
  std::string predictions;
  std::string output;
};

lungpipe::PipelineConfig build_config(const Args& a) {
  using lungpipe::PipelineConfig;
  PipelineConfig cfg = a.config.empty() ? PipelineConfig::defaults() : PipelineConfig::from_file(a.config);
  // flags override the file
  if (!a.profile.empty()) cfg.set("profile", a.profile);
  if (a.seed) cfg.set("seed", std::to_string(*a.seed));
  for (const auto& s : a.sets) cfg.set_assignment(s);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lungpipe: lung-cancer risk pipeline over CT volumes"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Args a;
  app.add_option("--config", a.config, "JSON config file (flat key/value object)");
  app.add_option("--run-dir", a.run_dir, "directory holding all artifacts of a run");
  app.add_option("--set", a.sets, "override a config entry, key=value (repeatable)");
  app.add_option("--seed", a.seed, "master seed");
  app.add_option("--profile", a.profile, "desk or paper");
  app.add_flag("--force", a.force, "continue when upstream artifacts were produced with another config");
  app.add_flag("-q,--quiet", a.quiet, "no progress output");

  using lungpipe::Stage;
  struct Cmd {
    const char* name;
    const char* help;
    std::optional<Stage> stage;
  };
  const std::vector<Cmd> cmds = {
      {"synth", "generate synthetic phantom patients", Stage::kSynth},
      {"preprocess", "canonicalize volumes", Stage::kPreprocess},
      {"train-detector", "train the nodule detector", Stage::kTrainDetector},
      {"finetune-malignancy", "fine-tune the malignancy detector", Stage::kFinetuneMalignancy},
      {"detect", "run a detector over every volume", std::nullopt},
      {"extract", "stitch candidates and extract nodule volumes", Stage::kExtract},
      {"train-classifier", "train the nodule classifier", Stage::kTrainClassifier},
      {"classify", "score every extracted nodule", Stage::kClassify},
      {"pool-features", "build patient feature tables", Stage::kPoolFeatures},
      {"train-patient", "train the patient classifier", Stage::kTrainPatient},
      {"predict", "write the submission CSV", Stage::kPredict},
      {"evaluate", "score a predictions CSV", Stage::kEvaluate},
      {"run-all", "run every stage in order", std::nullopt},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : cmds) subs.push_back(app.add_subcommand(c.name, c.help));
  subs[4]->add_option("--detector", a.detector, "nodule or malignancy")
      ->check(CLI::IsMember({"nodule", "malignancy"}));
  subs[11]->add_option("--predictions", a.predictions, "CSV with header patient_id,cancer_probability");
  subs[11]->add_option("--output", a.output, "report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    lungpipe::RunOptions opts;
    opts.force = a.force;
    opts.log = a.quiet ? nullptr : &std::cerr;
    lungpipe::Pipeline p(build_config(a), a.run_dir, opts);
    for (std::size_t i = 0; i < cmds.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      const std::string name = cmds[i].name;
      if (name == "run-all") {
        p.run_all();
      } else if (name == "detect") {
        p.detect(a.detector == "nodule" ? Stage::kDetectNodule : Stage::kDetectMalignancy);
      } else if (name == "evaluate") {
        std::optional<std::filesystem::path> pred, out;
        if (!a.predictions.empty()) pred = a.predictions;
        if (!a.output.empty()) out = a.output;
        p.evaluate(pred, out);
      } else {
        p.run(*cmds[i].stage);
      }
    }
  } catch (const lungpipe::NumericalError& e) {
    std::cerr << "lungpipe: numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const lungpipe::ValidationError& e) {
    std::cerr << "lungpipe: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "lungpipe: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
