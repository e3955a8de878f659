// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>

#include "lungpipe/error.hpp"
#include "lungpipe/volume_io.hpp"

namespace lungpipe {

using nlohmann::json;

namespace {

json desk_defaults() {
  return {
      {"profile", "desk"},
      {"seed", 20170401},
      {"synth.patients", 200},
      {"synth.test_fraction", 0.25},
      {"phantom.volume_side", 64},
      {"phantom.nodule_min", 1},
      {"phantom.nodule_max", 6},
      {"phantom.radius_min", 1.0},
      {"phantom.radius_max", 4.75},
      {"phantom.malignancy_rule", -1.0},
      {"phantom.malignant_fraction", 0.125},
      {"phantom.distractor_density", 3.0},
      {"phantom.noise_sigma", 20.0},
      {"volume.side", 64},
      {"volume.crop", 32},
      {"volume.stride", 16},
      {"detector.depth", "desk"},
      {"detector.width_divisor", 4},
      {"detector.iterations", 2000},
      {"detector.batch", 8},
      {"detector.lr", 0.01},
      {"detector.weight_decay", 1e-4},
      {"detector.crops_per_patient", 32},
      {"detector.loss", "balanced"},
      {"detector.flip_augment", true},
      {"malignancy.phase1_iterations", 400},
      {"malignancy.phase1_lr", 0.01},
      {"malignancy.phase2_iterations", 600},
      {"malignancy.phase2_lr", 0.001},
      {"malignancy.batch", 8},
      {"malignancy.weight_decay", 1e-4},
      {"malignancy.crops_per_patient", 16},
      {"malignancy.cell_source", "annotations"},
      {"extract.threshold", 0.5},
      {"classifier.iterations", 1000},
      {"classifier.batch", 16},
      {"classifier.lr", 0.001},
      {"classifier.weight_decay", 1e-4},
      {"classifier.validation_fraction", 0.1},
      {"classifier.labelling", "largest"},
      {"classifier.w", 0.7},
      {"classifier.source", "detector"},
      {"classifier.size_metric", "tissue"},
      {"classifier.width_divisor", 4},
      {"classifier.strides", "modified"},
      {"patient.iterations", 2000},
      {"patient.lr", 0.001},
      {"patient.weight_decay", 1e-4},
      {"patient.hidden", 256},
      {"patient.dropout", 0.5},
      {"patient.transposes", 5},
      {"patient.feature_set", "full"},
      {"patient.weight_malignancy", 1.0},
      {"patient.weight_classifier", 1.0},
      {"evaluate.threshold", 0.25},
  };
}

json paper_overrides() {
  return {
      {"profile", "paper"},
      {"phantom.volume_side", 512},
      {"phantom.radius_min", 4.63},
      {"phantom.radius_max", 38.0},
      {"volume.side", 512},
      {"volume.crop", 128},
      {"volume.stride", 64},
      {"detector.depth", "paper-101"},
      {"detector.width_divisor", 1},
      {"detector.iterations", 100000},
      {"detector.batch", 24},
      {"detector.crops_per_patient", 128},
      {"malignancy.phase1_iterations", 20000},
      {"malignancy.phase2_iterations", 30000},
      {"malignancy.batch", 24},
      {"malignancy.crops_per_patient", 128},
      {"classifier.iterations", 6000},
      {"classifier.batch", 32},
      {"classifier.width_divisor", 1},
      {"patient.hidden", 1024},
  };
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

const json& lookup(const std::map<std::string, std::string>& values, const std::string& key, json& holder) {
  auto it = values.find(key);
  if (it == values.end()) throw ValidationError("unknown config key '" + key + "'");
  holder = json::parse(it->second);
  return holder;
}

}  // namespace

Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  throw ValidationError("unknown profile '" + s + "' (expected desk or paper)");
}

PipelineConfig PipelineConfig::defaults(Profile profile) {
  PipelineConfig c;
  const json base = desk_defaults();
  for (const auto& [k, v] : base.items()) c.values_[k] = v.dump();
  if (profile == Profile::kPaper) {
    const json over = paper_overrides();
    for (const auto& [k, v] : over.items()) c.values_[k] = v.dump();
  }
  return c;
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a flat JSON object");
  if (j.contains("profile") && !j["profile"].is_string()) throw ValidationError("config 'profile' must be a string");
  PipelineConfig c = defaults(j.contains("profile") ? parse_profile(j["profile"].get<std::string>()) : Profile::kDesk);
  for (const auto& [k, v] : j.items()) {
    if (k == "profile") continue;  // already the base; re-setting it would wipe earlier keys
    if (v.is_object() || v.is_array()) throw ValidationError("config value for '" + k + "' must be a scalar");
    c.set(k, v.dump());
  }
  return c;
}

PipelineConfig PipelineConfig::from_file(const std::filesystem::path& path) {
  return from_json_text(read_text_file(path));
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  const json old = json::parse(it->second);
  json v = parse_value(value);
  if (old.is_number() && !v.is_number()) throw ValidationError("config key '" + key + "' expects a number");
  if (old.is_boolean() && !v.is_boolean()) throw ValidationError("config key '" + key + "' expects true or false");
  if (old.is_string() && !v.is_string()) v = json(value);
  if (key == "profile") {
    // switching profile resets the profile-dependent defaults
    const Profile p = parse_profile(v.get<std::string>());
    const PipelineConfig base = defaults(p);
    for (const auto& [k, val] : base.values_) values_[k] = val;
  }
  values_[key] = v.dump();
}

void PipelineConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("expected key=value, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string PipelineConfig::get_string(const std::string& key) const {
  json h;
  const json& v = lookup(values_, key, h);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

double PipelineConfig::get_double(const std::string& key) const {
  json h;
  const json& v = lookup(values_, key, h);
  if (!v.is_number()) throw ValidationError("config key '" + key + "' is not a number");
  return v.get<double>();
}

std::int64_t PipelineConfig::get_int(const std::string& key) const {
  const double d = get_double(key);
  if (d != static_cast<double>(static_cast<std::int64_t>(d))) {
    throw ValidationError("config key '" + key + "' must be an integer");
  }
  return static_cast<std::int64_t>(d);
}

bool PipelineConfig::get_bool(const std::string& key) const {
  json h;
  const json& v = lookup(values_, key, h);
  if (!v.is_boolean()) throw ValidationError("config key '" + key + "' is not a boolean");
  return v.get<bool>();
}

std::string PipelineConfig::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : values_) j[k] = json::parse(v);
  return j.dump(2);
}

std::string PipelineConfig::hash(std::span<const std::string> prefixes) const {
  json j = json::object();
  for (const auto& [k, v] : values_) {
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        j[k] = json::parse(v);
        break;
      }
    }
  }
  return sha256_hex(j.dump());
}

void PipelineConfig::validate() const {
  const auto side = get_int("volume.side");
  const auto crop = get_int("volume.crop");
  const auto stride = get_int("volume.stride");
  if (crop < 16 || crop % 16 != 0) throw ValidationError("volume.crop must be a positive multiple of 16");
  if (side < crop) throw ValidationError("volume.side must be >= volume.crop");
  if (stride < 16 || stride % 16 != 0 || stride > crop) {
    throw ValidationError("volume.stride must be a multiple of 16 in [16, volume.crop]");
  }
  if (get_int("synth.patients") < 2) throw ValidationError("synth.patients must be >= 2");
  const double tf = get_double("synth.test_fraction");
  if (!(tf > 0.0 && tf < 1.0)) throw ValidationError("synth.test_fraction must lie in (0, 1)");
  const auto t = get_int("patient.transposes");
  if (t < 0 || t > 5) throw ValidationError("patient.transposes must lie in [0, 5]");
  const std::string lab = get_string("classifier.labelling");
  if (lab != "largest" && lab != "patient" && lab != "truth") {
    throw ValidationError("classifier.labelling must be largest, patient or truth");
  }
  const std::string src = get_string("classifier.source");
  if (src != "detector" && src != "annotations") throw ValidationError("classifier.source must be detector or annotations");
  const std::string sm = get_string("classifier.size_metric");
  if (sm != "tissue" && sm != "bbox") throw ValidationError("classifier.size_metric must be tissue or bbox");
  const std::string cs = get_string("malignancy.cell_source");
  if (cs != "detector" && cs != "annotations") throw ValidationError("malignancy.cell_source must be detector or annotations");
  const std::string loss = get_string("detector.loss");
  if (loss != "balanced" && loss != "inverse_freq") throw ValidationError("detector.loss must be balanced or inverse_freq");
  const std::string st = get_string("classifier.strides");
  if (st != "modified" && st != "original") throw ValidationError("classifier.strides must be modified or original");
  const std::string fs = get_string("patient.feature_set");
  if (fs != "full" && fs != "competition") throw ValidationError("patient.feature_set must be full or competition");
  const double th = get_double("evaluate.threshold");
  if (!(th > 0.0 && th < 1.0)) throw ValidationError("evaluate.threshold must lie in (0, 1)");
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kSynth: return "synth";
    case Stage::kPreprocess: return "preprocess";
    case Stage::kTrainDetector: return "train-detector";
    case Stage::kFinetuneMalignancy: return "finetune-malignancy";
    case Stage::kDetectNodule: return "detect-nodule";
    case Stage::kDetectMalignancy: return "detect-malignancy";
    case Stage::kExtract: return "extract";
    case Stage::kTrainClassifier: return "train-classifier";
    case Stage::kClassify: return "classify";
    case Stage::kPoolFeatures: return "pool-features";
    case Stage::kTrainPatient: return "train-patient";
    case Stage::kPredict: return "predict";
    case Stage::kEvaluate: return "evaluate";
  }
  return "unknown";
}

std::string stage_command(Stage s) {
  if (s == Stage::kDetectNodule) return "detect --detector nodule";
  if (s == Stage::kDetectMalignancy) return "detect --detector malignancy";
  return stage_name(s);
}

std::vector<Stage> stage_dependencies(Stage s) {
  switch (s) {
    case Stage::kSynth: return {};
    case Stage::kPreprocess: return {Stage::kSynth};
    case Stage::kTrainDetector: return {Stage::kPreprocess};
    case Stage::kFinetuneMalignancy: return {Stage::kTrainDetector};
    case Stage::kDetectNodule: return {Stage::kTrainDetector};
    case Stage::kDetectMalignancy: return {Stage::kFinetuneMalignancy};
    case Stage::kExtract: return {Stage::kDetectNodule};
    case Stage::kTrainClassifier: return {Stage::kExtract};
    case Stage::kClassify: return {Stage::kTrainClassifier};
    case Stage::kPoolFeatures: return {Stage::kClassify, Stage::kDetectMalignancy};
    case Stage::kTrainPatient: return {Stage::kPoolFeatures};
    case Stage::kPredict: return {Stage::kTrainPatient};
    case Stage::kEvaluate: return {Stage::kPredict};
  }
  return {};
}

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw ValidationError("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

RunManifest RunManifest::load(const std::filesystem::path& run_dir) {
  RunManifest m;
  const auto path = run_dir / "run_manifest.json";
  if (!std::filesystem::exists(path)) return m;
  try {
    const json j = json::parse(read_text_file(path));
    for (const auto& [stage, h] : j.at("stages").items()) m.stages_[stage] = h.get<std::string>();
    for (const auto& [p, a] : j.at("artifacts").items()) {
      m.artifacts_[p] = {p, a.at("sha256").get<std::string>(), a.at("stage").get<std::string>(),
                         a.at("config_hash").get<std::string>()};
    }
  } catch (const json::exception& e) {
    throw ValidationError("corrupt run manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void RunManifest::save(const std::filesystem::path& run_dir) const {
  json j = {{"stages", json::object()}, {"artifacts", json::object()}};
  for (const auto& [s, h] : stages_) j["stages"][s] = h;
  for (const auto& [p, a] : artifacts_) {
    j["artifacts"][p] = {{"sha256", a.sha256}, {"stage", a.stage}, {"config_hash", a.config_hash}};
  }
  write_text_file(run_dir / "run_manifest.json", j.dump(2) + "\n");
}

void RunManifest::record_stage(const std::string& stage, const std::string& config_hash,
                               std::vector<Artifact> artifacts) {
  for (auto it = artifacts_.begin(); it != artifacts_.end();) {
    it = it->second.stage == stage ? artifacts_.erase(it) : std::next(it);
  }
  stages_[stage] = config_hash;
  for (auto& a : artifacts) artifacts_[a.path] = std::move(a);
}

std::optional<std::string> RunManifest::stage_hash(const std::string& stage) const {
  auto it = stages_.find(stage);
  if (it == stages_.end()) return std::nullopt;
  return it->second;
}

std::vector<RunManifest::Artifact> RunManifest::artifacts_of(const std::string& stage) const {
  std::vector<Artifact> out;
  for (const auto& [p, a] : artifacts_) {
    if (a.stage == stage) out.push_back(a);
  }
  return out;
}

namespace {

std::vector<std::string> own_prefixes(Stage s) {
  switch (s) {
    case Stage::kSynth: return {"seed", "synth.", "phantom."};
    case Stage::kPreprocess: return {"volume.side"};
    case Stage::kTrainDetector: return {"volume.", "detector."};
    case Stage::kFinetuneMalignancy: return {"malignancy."};
    case Stage::kDetectNodule:
    case Stage::kDetectMalignancy: return {"patient.transposes"};
    case Stage::kExtract: return {"extract."};
    case Stage::kTrainClassifier: return {"classifier."};
    case Stage::kClassify: return {};
    case Stage::kPoolFeatures: return {"patient.feature_set", "patient.weight_"};
    case Stage::kTrainPatient: return {"patient."};
    case Stage::kPredict: return {};
    case Stage::kEvaluate: return {"evaluate."};
  }
  return {};
}

void collect_prefixes(Stage s, std::set<std::string>& out) {
  for (auto& p : own_prefixes(s)) out.insert(p);
  for (Stage d : stage_dependencies(s)) collect_prefixes(d, out);
}

}  // namespace

Pipeline::Pipeline(PipelineConfig cfg, std::filesystem::path run_dir, RunOptions opts)
    : cfg_(std::move(cfg)), run_dir_(std::move(run_dir)), opts_(opts) {
  cfg_.validate();
}

std::string Pipeline::stage_config_hash(Stage s) const {
  std::set<std::string> prefixes;
  collect_prefixes(s, prefixes);
  const std::vector<std::string> list(prefixes.begin(), prefixes.end());
  return cfg_.hash(list);
}

void Pipeline::say(const std::string& msg) const {
  if (opts_.log != nullptr) *opts_.log << "[lungpipe] " << msg << std::endl;
}

void Pipeline::check_upstream(Stage s) const {
  const RunManifest m = RunManifest::load(run_dir_);
  for (Stage d : stage_dependencies(s)) {
    const auto recorded = m.stage_hash(stage_name(d));
    if (!recorded) {
      throw ValidationError(std::string(stage_name(s)) + " needs the output of `lungpipe " + stage_command(d) +
                            "`; run it first");
    }
    for (const auto& a : m.artifacts_of(stage_name(d))) {
      if (!std::filesystem::exists(run_dir_ / a.path)) {
        throw ValidationError("missing artifact " + a.path + "; rerun `lungpipe " + stage_command(d) + "`");
      }
    }
    if (*recorded != stage_config_hash(d)) {
      const std::string msg = "config hash mismatch: artifacts of " + std::string(stage_name(d)) +
                              " were produced with a different configuration";
      if (!opts_.force) throw ValidationError(msg + "; rerun `lungpipe " + stage_command(d) + "` or pass --force");
      say("warning: " + msg + " (continuing because of --force)");
    }
  }
}

void Pipeline::finish(Stage s, const std::vector<std::filesystem::path>& produced) {
  RunManifest m = RunManifest::load(run_dir_);
  const std::string hash = stage_config_hash(s);
  std::vector<RunManifest::Artifact> arts;
  for (const auto& p : produced) {
    arts.push_back({std::filesystem::relative(p, run_dir_).generic_string(), sha256_file(p), stage_name(s), hash});
  }
  m.record_stage(stage_name(s), hash, std::move(arts));
  m.save(run_dir_);
}

void Pipeline::run(Stage s) {
  switch (s) {
    case Stage::kSynth: synth(); break;
    case Stage::kPreprocess: preprocess(); break;
    case Stage::kTrainDetector: train_detector(); break;
    case Stage::kFinetuneMalignancy: finetune_malignancy(); break;
    case Stage::kDetectNodule:
    case Stage::kDetectMalignancy: detect(s); break;
    case Stage::kExtract: extract(); break;
    case Stage::kTrainClassifier: train_classifier(); break;
    case Stage::kClassify: classify(); break;
    case Stage::kPoolFeatures: pool_features(); break;
    case Stage::kTrainPatient: train_patient(); break;
    case Stage::kPredict: predict(); break;
    case Stage::kEvaluate: evaluate(); break;
  }
}

void Pipeline::run_all() {
  for (Stage s : {Stage::kSynth, Stage::kPreprocess, Stage::kTrainDetector, Stage::kFinetuneMalignancy,
                  Stage::kDetectNodule, Stage::kDetectMalignancy, Stage::kExtract, Stage::kTrainClassifier,
                  Stage::kClassify, Stage::kPoolFeatures, Stage::kTrainPatient, Stage::kPredict, Stage::kEvaluate}) {
    run(s);
  }
}

}  // namespace lungpipe
