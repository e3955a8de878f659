// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lungpipe {

enum class Profile { kDesk, kPaper };

/// Flat key/value run configuration. Values are kept as canonical JSON text;
/// unknown keys are rejected.
class PipelineConfig {
 public:
  static PipelineConfig defaults(Profile profile = Profile::kDesk);
  /// Reads a flat JSON object; a "profile" entry selects the base defaults.
  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig from_file(const std::filesystem::path& path);

  /// `value` is parsed as JSON, falling back to a plain string.
  void set(const std::string& key, const std::string& value);
  /// Applies "key=value".
  void set_assignment(const std::string& assignment);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Sorted flat JSON object.
  std::string to_json() const;
  /// SHA-256 over the entries whose key starts with one of `prefixes`.
  std::string hash(std::span<const std::string> prefixes) const;
  void validate() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

Profile parse_profile(const std::string& s);

enum class Stage {
  kSynth,
  kPreprocess,
  kTrainDetector,
  kFinetuneMalignancy,
  kDetectNodule,
  kDetectMalignancy,
  kExtract,
  kTrainClassifier,
  kClassify,
  kPoolFeatures,
  kTrainPatient,
  kPredict,
  kEvaluate,
};

const char* stage_name(Stage s);
/// CLI command that produces the stage's artifacts.
std::string stage_command(Stage s);
std::vector<Stage> stage_dependencies(Stage s);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Artifacts of a run directory with content hashes and the config hash of
/// the stage that produced them.
class RunManifest {
 public:
  struct Artifact {
    std::string path;  // relative to the run directory
    std::string sha256;
    std::string stage;
    std::string config_hash;
  };

  static RunManifest load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;

  /// Replaces every artifact previously recorded for `stage`.
  void record_stage(const std::string& stage, const std::string& config_hash, std::vector<Artifact> artifacts);
  std::optional<std::string> stage_hash(const std::string& stage) const;
  std::vector<Artifact> artifacts_of(const std::string& stage) const;
  const std::map<std::string, Artifact>& artifacts() const { return artifacts_; }

 private:
  std::map<std::string, std::string> stages_;
  std::map<std::string, Artifact> artifacts_;
};

struct RunOptions {
  /// proceed (with a warning) when upstream config hashes differ
  bool force = false;
  /// progress messages; null = silent
  std::ostream* log = nullptr;
};

/// Stage runner over one run directory.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::filesystem::path run_dir, RunOptions opts = {});

  void synth();
  void preprocess();
  void train_detector();
  void finetune_malignancy();
  void detect(Stage which);
  void extract();
  void train_classifier();
  void classify();
  void pool_features();
  void train_patient();
  void predict();
  /// Scores a predictions CSV (default: this run's submission) against the
  /// manifest labels of the test split and writes a JSON report.
  void evaluate(const std::optional<std::filesystem::path>& predictions = std::nullopt,
                const std::optional<std::filesystem::path>& report = std::nullopt);
  void run_all();

  void run(Stage s);

  const PipelineConfig& config() const { return cfg_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  std::string stage_config_hash(Stage s) const;

 private:
  void check_upstream(Stage s) const;
  void finish(Stage s, const std::vector<std::filesystem::path>& produced);
  void say(const std::string& msg) const;

  PipelineConfig cfg_;
  std::filesystem::path run_dir_;
  RunOptions opts_;
};

}  // namespace lungpipe
