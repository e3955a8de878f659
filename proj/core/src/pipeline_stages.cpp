// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "lungpipe/classifier.hpp"
#include "lungpipe/detector.hpp"
#include "lungpipe/error.hpp"
#include "lungpipe/extract.hpp"
#include "lungpipe/grid_labels.hpp"
#include "lungpipe/metrics.hpp"
#include "lungpipe/nn/checkpoint.hpp"
#include "lungpipe/patient.hpp"
#include "lungpipe/phantom.hpp"
#include "lungpipe/pipeline.hpp"
#include "lungpipe/preprocess.hpp"
#include "lungpipe/volume_io.hpp"

namespace lungpipe {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<std::array<int, 3>, 6> kTransposes{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

// density above which a voxel counts as nodule tissue when sizing candidates
constexpr double kTissueHu = -500.0;

struct Split {
  std::vector<std::string> train, test;
};

// one detector input: a patient volume under axis transpose t (t = 0 is the original)
struct View {
  std::string id;
  std::string patient;
  int t = 0;
  bool train = false;
};

std::string view_id(const std::string& patient, int t) {
  return t == 0 ? patient : patient + "/t" + std::to_string(t);
}

Split load_split(const fs::path& run) {
  const json j = json::parse(read_text_file(run / "data" / "split.json"));
  return {j.at("train").get<std::vector<std::string>>(), j.at("test").get<std::vector<std::string>>()};
}

std::map<std::string, ManifestRecord> load_index(const fs::path& path) {
  std::map<std::string, ManifestRecord> out;
  for (auto& r : read_manifest(path)) out.emplace(r.patient_id, std::move(r));
  return out;
}

std::vector<View> make_views(const Split& split, int transposes) {
  std::vector<View> v;
  for (const auto& p : split.train)
    for (int t = 0; t <= transposes; ++t) v.push_back({view_id(p, t), p, t, true});
  for (const auto& p : split.test) v.push_back({p, p, 0, false});
  return v;
}

Grid3<float> transpose_volume(const Grid3<float>& g, int t) {
  if (t == 0) return g;
  return apply_orientation(g, Orientation{kTransposes[static_cast<std::size_t>(t)], 0});
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream is(read_text_file(path));
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text_file(path, text);
}

json maps_to_json(const std::string& view, int side, const std::vector<PlacedMap>& maps) {
  json crops = json::array();
  for (const auto& m : maps) {
    crops.push_back({{"origin", {m.origin.x, m.origin.y, m.origin.z}},
                     {"side", m.map.side},
                     {"classes", m.map.classes},
                     {"probs", m.map.probs}});
  }
  return {{"view", view}, {"volume_side", side}, {"crops", crops}};
}

std::vector<PlacedMap> maps_from_json(const json& j) {
  std::vector<PlacedMap> out;
  for (const auto& c : j.at("crops")) {
    PlacedMap m;
    const auto& o = c.at("origin");
    m.origin = {o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<int>()};
    m.map.side = c.at("side").get<int>();
    m.map.classes = c.at("classes").get<int>();
    m.map.probs = c.at("probs").get<std::vector<float>>();
    if (m.map.probs.size() != m.map.cell_count() * static_cast<std::size_t>(m.map.classes)) {
      throw ValidationError("detection record has a malformed probability map");
    }
    out.push_back(std::move(m));
  }
  return out;
}

// view id -> placed maps
std::map<std::string, std::vector<PlacedMap>> load_detections(const fs::path& path) {
  std::map<std::string, std::vector<PlacedMap>> out;
  for (const auto& line : read_lines(path)) {
    const json j = json::parse(line);
    out[j.at("view").get<std::string>()] = maps_from_json(j);
  }
  return out;
}

struct StoredCandidate {
  std::string view;
  NoduleCandidate cand;
  double tissue_voxels = 0.0;
};

std::vector<StoredCandidate> load_candidates(const fs::path& path) {
  std::vector<StoredCandidate> out;
  for (const auto& line : read_lines(path)) {
    StoredCandidate s;
    s.cand = candidate_from_json_line(line, &s.view);
    s.tissue_voxels = json::parse(line).at("tissue_voxels").get<double>();
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Grid3<float>> load_nodule_cubes(const fs::path& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + path.string());
  constexpr std::size_t n = static_cast<std::size_t>(kNoduleSide) * kNoduleSide * kNoduleSide;
  std::vector<Grid3<float>> out;
  for (std::size_t i = 0; i < expected; ++i) {
    Grid3<float> g({kNoduleSide, kNoduleSide, kNoduleSide});
    if (!is.read(reinterpret_cast<char*>(g.storage().data()), static_cast<std::streamsize>(n * sizeof(float)))) {
      throw ValidationError(path.string() + " holds fewer nodule volumes than the candidate list");
    }
    out.push_back(std::move(g));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw ValidationError(path.string() + " holds more nodule volumes than the candidate list");
  }
  return out;
}

double tissue_voxels(const Grid3<float>& vol, const NoduleCandidate& c) {
  const float cut = static_cast<float>(normalize_hu(kTissueHu));
  double n = 0.0;
  const Dims3 d = vol.dims();
  for (int z = std::max(0, c.bbox_lo.z); z < std::min(d.z, c.bbox_hi.z); ++z)
    for (int y = std::max(0, c.bbox_lo.y); y < std::min(d.y, c.bbox_hi.y); ++y)
      for (int x = std::max(0, c.bbox_lo.x); x < std::min(d.x, c.bbox_hi.x); ++x)
        if (vol(x, y, z) > cut) n += 1.0;
  return n;
}

bool truly_malignant(const NoduleCandidate& c, const std::vector<NoduleAnnotation>& nodules) {
  for (const auto& n : nodules) {
    if (n.label == NoduleLabel::kMalignant && candidate_intersects(c, n)) return true;
  }
  return false;
}

DetectorConfig detector_config(const PipelineConfig& cfg, int classes) {
  DetectorConfig d;
  d.class_count = classes;
  d.depth = parse_depth_variant(cfg.get_string("detector.depth"));
  d.crop_size = static_cast<int>(cfg.get_int("volume.crop"));
  d.width_divisor = static_cast<int>(cfg.get_int("detector.width_divisor"));
  d.validate();
  return d;
}

ClassifierConfig classifier_config(const PipelineConfig& cfg) {
  ClassifierConfig c = cfg.get_string("classifier.strides") == "original" ? ClassifierConfig::original_strides()
                                                                           : ClassifierConfig{};
  c.width_divisor = static_cast<int>(cfg.get_int("classifier.width_divisor"));
  c.validate();
  return c;
}

PatientNetConfig patient_config(const PipelineConfig& cfg) {
  PatientNetConfig p;
  p.input_features = cfg.get_string("patient.feature_set") == "competition"
                         ? kMalignancyFeatures + kCompetitionClassifierFeatures
                         : kPatientFeatures;
  p.hidden = static_cast<int>(cfg.get_int("patient.hidden"));
  p.dropout = cfg.get_double("patient.dropout");
  p.validate();
  return p;
}

template <typename Net>
void load_into(const fs::path& path, Net& net) {
  nn::load_parameters(nn::read_checkpoint(path), net);
}

std::vector<TrainingPatient> load_training_patients(const fs::path& run, const Split& split) {
  const auto index = load_index(run / "canonical" / "index.jsonl");
  std::vector<TrainingPatient> out;
  for (const auto& id : split.train) {
    const auto it = index.find(id);
    if (it == index.end()) throw ValidationError("canonical index lacks patient " + id);
    const ManifestRecord& r = it->second;
    if (!r.cancer) throw ValidationError("training patient " + id + " has no cancer label");
    out.push_back({id, read_f32_volume(run / r.volume_path), r.nodules, *r.cancer});
  }
  return out;
}

std::uint64_t seed_of(const PipelineConfig& cfg, std::uint64_t stage) {
  return derive_seed(static_cast<std::uint64_t>(cfg.get_int("seed")), stage);
}

std::string ckpt_meta(const std::string& hash) { return json{{"config_hash", hash}}.dump(); }

std::string json_opt(const std::optional<double>& v) { return v ? fmt(*v) : "null"; }

}  // namespace

void Pipeline::synth() {
  say("synth: generating phantom patients");
  const int patients = static_cast<int>(cfg_.get_int("synth.patients"));
  PhantomConfig pc;
  pc.volume_side = static_cast<int>(cfg_.get_int("phantom.volume_side"));
  pc.nodule_count_range = {static_cast<int>(cfg_.get_int("phantom.nodule_min")),
                           static_cast<int>(cfg_.get_int("phantom.nodule_max"))};
  pc.radius_range = {cfg_.get_double("phantom.radius_min"), cfg_.get_double("phantom.radius_max")};
  pc.malignancy_rule = cfg_.get_double("phantom.malignancy_rule");
  pc.malignant_fraction = cfg_.get_double("phantom.malignant_fraction");
  pc.distractor_density = cfg_.get_double("phantom.distractor_density");
  pc.noise_sigma = cfg_.get_double("phantom.noise_sigma");
  pc.seed = seed_of(cfg_, 0);
  pc.validate();

  std::vector<fs::path> produced;
  std::vector<ManifestRecord> records;
  for (int i = 0; i < patients; ++i) {
    PhantomConfig c = pc;
    c.seed = derive_seed(pc.seed, static_cast<std::uint64_t>(i));
    PhantomCase p = generate_phantom(c);
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%04d", i);
    p.volume.patient_id = id;
    const std::string rel = std::string("data/volumes/") + id + ".i16";
    write_volume(run_dir_ / rel, p.volume);
    produced.push_back(run_dir_ / rel);
    produced.push_back(sidecar_path(run_dir_ / rel));
    records.push_back({id, rel, p.cancer, p.nodules});
  }
  write_manifest(run_dir_ / "data" / "manifest.jsonl", records);
  produced.push_back(run_dir_ / "data" / "manifest.jsonl");

  const double tf = cfg_.get_double("synth.test_fraction");
  const int n_test = std::clamp(static_cast<int>(std::lround(patients * tf)), 1, patients - 1);
  json split = {{"train", json::array()}, {"test", json::array()}};
  for (int i = 0; i < patients; ++i) {
    split[i < patients - n_test ? "train" : "test"].push_back(records[static_cast<std::size_t>(i)].patient_id);
  }
  write_text_file(run_dir_ / "data" / "split.json", split.dump(2) + "\n");
  produced.push_back(run_dir_ / "data" / "split.json");
  finish(Stage::kSynth, produced);
  say("synth: " + std::to_string(patients) + " patients, " + std::to_string(n_test) + " held out");
}

void Pipeline::preprocess() {
  check_upstream(Stage::kPreprocess);
  const int side = static_cast<int>(cfg_.get_int("volume.side"));
  say("preprocess: canonical side " + std::to_string(side));
  std::vector<fs::path> produced;
  std::vector<ManifestRecord> out;
  for (const ManifestRecord& r : read_manifest(run_dir_ / "data" / "manifest.jsonl")) {
    const HUVolume hu = read_hu_volume(run_dir_ / r.volume_path);
    const NormVolume nv = canonicalize(hu, side);
    ManifestRecord c = r;
    c.volume_path = "canonical/" + r.patient_id + ".f32";
    const double mean_spacing = (hu.spacing_mm[0] + hu.spacing_mm[1] + hu.spacing_mm[2]) / 3.0;
    for (auto& n : c.nodules) {
      n.center = to_canonical(n.center, hu.spacing_mm, nv.scale_factor, nv.pad_offset);
      n.radius *= mean_spacing * nv.scale_factor;
    }
    write_volume(run_dir_ / c.volume_path, nv.voxels, {1.0, 1.0, 1.0}, r.patient_id);
    produced.push_back(run_dir_ / c.volume_path);
    produced.push_back(sidecar_path(run_dir_ / c.volume_path));
    out.push_back(std::move(c));
  }
  write_manifest(run_dir_ / "canonical" / "index.jsonl", out);
  produced.push_back(run_dir_ / "canonical" / "index.jsonl");
  finish(Stage::kPreprocess, produced);
}

void Pipeline::train_detector() {
  check_upstream(Stage::kTrainDetector);
  const Split split = load_split(run_dir_);
  const auto patients = load_training_patients(run_dir_, split);
  const DetectorConfig dc = detector_config(cfg_, 2);
  DetectorHyper h;
  h.iterations = static_cast<int>(cfg_.get_int("detector.iterations"));
  h.batch_size = static_cast<int>(cfg_.get_int("detector.batch"));
  h.learning_rate = cfg_.get_double("detector.lr");
  h.weight_decay = cfg_.get_double("detector.weight_decay");
  h.crops_per_patient = static_cast<int>(cfg_.get_int("detector.crops_per_patient"));
  h.loss = cfg_.get_string("detector.loss") == "balanced" ? DetectorLoss::kBalancedBinary
                                                          : DetectorLoss::kInverseFrequency;
  h.flip_augment = cfg_.get_bool("detector.flip_augment");
  h.seed = seed_of(cfg_, 1);
  h.checkpoint_path = run_dir_ / "models" / "nodule_detector.ckpt";
  h.checkpoint_every = 0;
  h.config_json = ckpt_meta(stage_config_hash(Stage::kTrainDetector));
  say("train-detector: " + std::to_string(h.iterations) + " iterations on " + std::to_string(patients.size()) +
      " patients");
  const TrainedNetwork t = train_nodule_detector(patients, dc, h);
  write_training_log(run_dir_ / "logs" / "nodule_detector.csv", t.log);
  if (!t.log.empty()) say("train-detector: final loss " + fmt(t.log.back().loss));
  finish(Stage::kTrainDetector, {h.checkpoint_path, run_dir_ / "logs" / "nodule_detector.csv"});
}

void Pipeline::finetune_malignancy() {
  check_upstream(Stage::kFinetuneMalignancy);
  const Split split = load_split(run_dir_);
  const auto patients = load_training_patients(run_dir_, split);
  const DetectorConfig dc = detector_config(cfg_, 2);
  nn::Network<float> base = build_detector(dc);
  load_into(run_dir_ / "models" / "nodule_detector.ckpt", base);

  FinetuneHyper h;
  h.phases = {{static_cast<int>(cfg_.get_int("malignancy.phase1_iterations")), cfg_.get_double("malignancy.phase1_lr")},
              {static_cast<int>(cfg_.get_int("malignancy.phase2_iterations")), cfg_.get_double("malignancy.phase2_lr")}};
  h.batch_size = static_cast<int>(cfg_.get_int("malignancy.batch"));
  h.weight_decay = cfg_.get_double("malignancy.weight_decay");
  h.crops_per_patient = static_cast<int>(cfg_.get_int("malignancy.crops_per_patient"));
  h.flip_augment = cfg_.get_bool("detector.flip_augment");
  h.seed = seed_of(cfg_, 2);
  h.checkpoint_path = run_dir_ / "models" / "malignancy_detector.ckpt";
  h.checkpoint_every = 0;
  h.config_json = ckpt_meta(stage_config_hash(Stage::kFinetuneMalignancy));
  const bool from_detector = cfg_.get_string("malignancy.cell_source") == "detector";
  say("finetune-malignancy: " + std::to_string(h.phases[0].first + h.phases[1].first) + " iterations");
  const TrainedNetwork t = lungpipe::finetune_malignancy(base, dc, patients, h, from_detector ? &base : nullptr);
  write_training_log(run_dir_ / "logs" / "malignancy_detector.csv", t.log);
  finish(Stage::kFinetuneMalignancy, {h.checkpoint_path, run_dir_ / "logs" / "malignancy_detector.csv"});
}

void Pipeline::detect(Stage which) {
  if (which != Stage::kDetectNodule && which != Stage::kDetectMalignancy) {
    throw ValidationError("detect: stage must be detect-nodule or detect-malignancy");
  }
  check_upstream(which);
  const bool nodule = which == Stage::kDetectNodule;
  const DetectorConfig dc = detector_config(cfg_, nodule ? 2 : 3);
  nn::Network<float> net = build_detector(dc);
  load_into(run_dir_ / "models" / (nodule ? "nodule_detector.ckpt" : "malignancy_detector.ckpt"), net);

  const Split split = load_split(run_dir_);
  const auto index = load_index(run_dir_ / "canonical" / "index.jsonl");
  const int transposes = static_cast<int>(cfg_.get_int("patient.transposes"));
  const int crop = dc.crop_size;
  const int stride = static_cast<int>(cfg_.get_int("volume.stride"));
  const int side = static_cast<int>(cfg_.get_int("volume.side"));
  const int batch = static_cast<int>(cfg_.get_int(nodule ? "detector.batch" : "malignancy.batch"));
  const std::vector<View> views = make_views(split, transposes);
  say(std::string("detect: ") + (nodule ? "nodule" : "malignancy") + " detector over " + std::to_string(views.size()) +
      " volumes");

  const fs::path out = run_dir_ / "detections" / (nodule ? "nodule.jsonl" : "malignancy.jsonl");
  fs::create_directories(out.parent_path());
  std::ofstream os(out, std::ios::trunc | std::ios::binary);
  if (!os) throw ValidationError("cannot write " + out.string());

  Confusion cells;
  std::string current;
  Grid3<float> base;
  for (const View& v : views) {
    const ManifestRecord& rec = index.at(v.patient);
    if (v.patient != current) {
      base = read_f32_volume(run_dir_ / rec.volume_path);
      current = v.patient;
    }
    NormVolume nv;
    nv.voxels = transpose_volume(base, v.t);
    nv.side = side;
    nv.patient_id = v.id;
    const CropSet cs = tile_crops(nv, crop, stride);
    const std::vector<ClassProbMap> probs = predict_crops(net, cs.crops, batch);
    std::vector<PlacedMap> maps;
    for (std::size_t i = 0; i < probs.size(); ++i) maps.push_back({cs.origins[i], probs[i]});
    os << maps_to_json(v.id, side, maps).dump() << "\n";

    if (!v.train) {
      // held-out cell scoring against the annotations
      const DetectionVolume dv = fuse_overlapping(maps, side);
      const CellLabelGrid truth = label_cells({0, 0, 0}, side, rec.nodules);
      std::vector<double> p;
      std::vector<int> y;
      if (nodule) {
        for (std::size_t c = 0; c < dv.cell_count(); ++c) {
          p.push_back(dv.nodule_probability(c));
          y.push_back(truth.cells.values()[c] == binary_class::kHasNodule ? 1 : 0);
        }
      } else {
        const CellLabelGrid tern = malignancy_cell_labels(truth, rec.cancer.value_or(false));
        for (std::size_t c = 0; c < dv.cell_count(); ++c) {
          p.push_back(dv.at(c, ternary_class::kMalignant));
          y.push_back(tern.cells.values()[c] == ternary_class::kMalignant ? 1 : 0);
        }
      }
      cells += confusion(p, y, kCellThreshold);
    }
  }
  os.close();
  if (!os) throw ValidationError("failed writing " + out.string());

  const ClassRates r = sensitivity_specificity_f1(cells);
  const fs::path report = run_dir_ / "reports" / (nodule ? "detector_metrics.json" : "malignancy_metrics.json");
  std::ostringstream js;
  js << "{\n  \"cells\": " << cells.n() << ",\n  \"tp\": " << cells.tp << ",\n  \"fp\": " << cells.fp
     << ",\n  \"tn\": " << cells.tn << ",\n  \"fn\": " << cells.fn << ",\n  \"sensitivity\": " << json_opt(r.sensitivity)
     << ",\n  \"specificity\": " << json_opt(r.specificity) << ",\n  \"f1\": " << json_opt(r.f1)
     << ",\n  \"threshold\": " << fmt(kCellThreshold) << "\n}\n";
  write_text_file(report, js.str());
  say(std::string("detect: held-out ") + (nodule ? "nodule" : "malignant") + " cell F1 " + json_opt(r.f1));
  finish(which, {out, report});
}

void Pipeline::extract() {
  check_upstream(Stage::kExtract);
  const double threshold = cfg_.get_double("extract.threshold");
  const int side = static_cast<int>(cfg_.get_int("volume.side"));
  const Split split = load_split(run_dir_);
  const auto index = load_index(run_dir_ / "canonical" / "index.jsonl");
  const auto detections = load_detections(run_dir_ / "detections" / "nodule.jsonl");
  const std::vector<View> views = make_views(split, static_cast<int>(cfg_.get_int("patient.transposes")));

  const fs::path cand_path = run_dir_ / "candidates" / "candidates.jsonl";
  const fs::path cube_path = run_dir_ / "candidates" / "nodules.f32";
  fs::create_directories(cand_path.parent_path());
  std::ofstream cubes(cube_path, std::ios::trunc | std::ios::binary);
  if (!cubes) throw ValidationError("cannot write " + cube_path.string());
  std::vector<std::string> lines;
  std::string current;
  Grid3<float> base;
  for (const View& v : views) {
    const auto it = detections.find(v.id);
    if (it == detections.end()) {
      throw ValidationError("no nodule detections for " + v.id + "; rerun `lungpipe detect --detector nodule`");
    }
    if (v.patient != current) {
      base = read_f32_volume(run_dir_ / index.at(v.patient).volume_path);
      current = v.patient;
    }
    const Grid3<float> vol = transpose_volume(base, v.t);
    const DetectionVolume dv = fuse_overlapping(it->second, side);
    const auto cands = find_candidates(dv, threshold);
    for (std::size_t k = 0; k < cands.size(); ++k) {
      json j = json::parse(candidate_to_json_line(v.id, cands[k]));
      j["candidate_index"] = k;
      j["tissue_voxels"] = tissue_voxels(vol, cands[k]);
      lines.push_back(j.dump());
      const NoduleVolume32 nv = extract_resize(vol, cands[k]);
      cubes.write(reinterpret_cast<const char*>(nv.voxels.storage().data()),
                  static_cast<std::streamsize>(nv.voxels.size() * sizeof(float)));
    }
  }
  cubes.close();
  if (!cubes) throw ValidationError("failed writing " + cube_path.string());
  write_lines(cand_path, lines);
  say("extract: " + std::to_string(lines.size()) + " candidates");
  finish(Stage::kExtract, {cand_path, cube_path});
}

void Pipeline::train_classifier() {
  check_upstream(Stage::kTrainClassifier);
  const Split split = load_split(run_dir_);
  const auto index = load_index(run_dir_ / "canonical" / "index.jsonl");
  const auto cands = load_candidates(run_dir_ / "candidates" / "candidates.jsonl");
  const auto cubes = load_nodule_cubes(run_dir_ / "candidates" / "nodules.f32", cands.size());
  const std::set<std::string> train(split.train.begin(), split.train.end());

  const std::string labelling = cfg_.get_string("classifier.labelling");
  const LabellingStrategy strategy = labelling == "patient" ? LabellingStrategy::patient_label()
                                                            : LabellingStrategy::largest_nodule(cfg_.get_double("classifier.w"));
  strategy.validate();

  // training nodules: detector candidates in the original orientation, or annotation boxes
  struct Item {
    NoduleCandidate cand;
    double tissue = 0.0;
    Grid3<float> cube;
  };
  std::map<std::string, std::vector<Item>> by_patient;
  if (cfg_.get_string("classifier.source") == "annotations") {
    const int g = static_cast<int>(cfg_.get_int("volume.side")) / kCellSize;
    for (const auto& pid : split.train) {
      const ManifestRecord& rec = index.at(pid);
      const Grid3<float> vol = read_f32_volume(run_dir_ / rec.volume_path);
      auto& items = by_patient[pid];
      for (const auto& n : rec.nodules) {
        const auto box = nodule_cells(n, {0, 0, 0}, g);
        if (!box) continue;
        NoduleCandidate c;
        for (int z = box->lo.z; z <= box->hi.z; ++z)
          for (int y = box->lo.y; y <= box->hi.y; ++y)
            for (int x = box->lo.x; x <= box->hi.x; ++x) c.cells.push_back({x, y, z});
        for (int a = 0; a < 3; ++a) {
          c.bbox_lo[a] = box->lo[a] * kCellSize;
          c.bbox_hi[a] = (box->hi[a] + 1) * kCellSize;
        }
        c.confidence = 1.0;
        items.push_back({c, tissue_voxels(vol, c), extract_resize(vol, c).voxels});
      }
    }
  } else {
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (train.count(cands[i].view)) {
        by_patient[cands[i].view].push_back({cands[i].cand, cands[i].tissue_voxels, cubes[i]});
      }
    }
  }
  const bool bbox_size = cfg_.get_string("classifier.size_metric") == "bbox";

  std::vector<LabelledNodule> data;
  std::int64_t mislabelled = 0, truth_malignant = 0, label_malignant = 0;
  for (auto& [pid, items] : by_patient) {
    const ManifestRecord& rec = index.at(pid);
    std::vector<NoduleLabel> labels;
    if (labelling == "truth") {
      for (const auto& it : items) {
        labels.push_back(truly_malignant(it.cand, rec.nodules) ? NoduleLabel::kMalignant : NoduleLabel::kBenign);
      }
    } else {
      std::vector<double> sizes;
      for (const auto& it : items) sizes.push_back(bbox_size ? it.cand.size() : std::max(1.0, it.tissue));
      labels = assign_nodule_labels(strategy, rec.cancer.value_or(false), sizes);
    }
    for (std::size_t k = 0; k < items.size(); ++k) {
      const bool truth = truly_malignant(items[k].cand, rec.nodules);
      const bool mal = labels[k] == NoduleLabel::kMalignant;
      truth_malignant += truth;
      label_malignant += mal;
      mislabelled += truth != mal;
      NoduleVolume32 nv;
      nv.voxels = std::move(items[k].cube);
      nv.patient_id = pid;
      nv.candidate_index = static_cast<int>(k);
      data.push_back({std::move(nv), labels[k]});
    }
  }

  ClassifierHyper h;
  h.iterations = static_cast<int>(cfg_.get_int("classifier.iterations"));
  h.batch_size = static_cast<int>(cfg_.get_int("classifier.batch"));
  h.learning_rate = cfg_.get_double("classifier.lr");
  h.weight_decay = cfg_.get_double("classifier.weight_decay");
  h.validation_fraction = cfg_.get_double("classifier.validation_fraction");
  h.seed = seed_of(cfg_, 3);
  h.checkpoint_path = run_dir_ / "models" / "classifier.ckpt";
  h.config_json = ckpt_meta(stage_config_hash(Stage::kTrainClassifier));
  say("train-classifier: " + std::to_string(data.size()) + " nodules, " + std::to_string(mislabelled) +
      " mislabelled under '" + labelling + "'");
  const ClassifierTrainResult res = lungpipe::train_classifier(data, classifier_config(cfg_), h);

  std::string log = "step,train_loss,validation_loss\n";
  for (const auto& r : res.log) {
    log += std::to_string(r.step) + "," + fmt(r.train_loss) + "," + fmt(r.validation_loss) + "\n";
  }
  write_text_file(run_dir_ / "logs" / "classifier.csv", log);
  const json meta = {{"labelling", labelling},
                     {"threshold", res.threshold},
                     {"nodules", data.size()},
                     {"mislabelled", mislabelled},
                     {"label_malignant", label_malignant},
                     {"truth_malignant", truth_malignant},
                     {"train_patients", res.split.train},
                     {"validation_patients", res.split.validation}};
  write_text_file(run_dir_ / "models" / "classifier.json", meta.dump(2) + "\n");
  finish(Stage::kTrainClassifier,
         {h.checkpoint_path, run_dir_ / "models" / "classifier.json", run_dir_ / "logs" / "classifier.csv"});
}

void Pipeline::classify() {
  check_upstream(Stage::kClassify);
  const ClassifierConfig cc = classifier_config(cfg_);
  nn::Network<float> net = build_classifier(cc);
  load_into(run_dir_ / "models" / "classifier.ckpt", net);
  const json meta = json::parse(read_text_file(run_dir_ / "models" / "classifier.json"));
  const double threshold = meta.at("threshold").get<double>();

  const auto cands = load_candidates(run_dir_ / "candidates" / "candidates.jsonl");
  const auto cubes = load_nodule_cubes(run_dir_ / "candidates" / "nodules.f32", cands.size());
  std::vector<NoduleVolume32> nodules;
  for (std::size_t i = 0; i < cands.size(); ++i) nodules.push_back({cubes[i], cands[i].view, 0, 1.0});
  say("classify: " + std::to_string(nodules.size()) + " nodules");
  const std::vector<double> probs =
      nodules.empty() ? std::vector<double>{}
                      : classify_nodules(net, nodules, static_cast<int>(cfg_.get_int("classifier.batch")));

  const Split split = load_split(run_dir_);
  const std::set<std::string> test(split.test.begin(), split.test.end());
  const auto index = load_index(run_dir_ / "canonical" / "index.jsonl");
  std::vector<std::string> lines;
  std::map<std::string, int> counter;
  std::vector<double> test_p;
  std::vector<int> test_y;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    lines.push_back(prediction_to_json_line(cands[i].view, counter[cands[i].view]++, probs[i]));
    if (test.count(cands[i].view)) {
      test_p.push_back(probs[i]);
      test_y.push_back(truly_malignant(cands[i].cand, index.at(cands[i].view).nodules) ? 1 : 0);
    }
  }
  const fs::path out = run_dir_ / "predictions" / "nodules.jsonl";
  write_lines(out, lines);

  Confusion c;
  if (!test_p.empty()) c = confusion(test_p, test_y, threshold);
  const ClassRates r = sensitivity_specificity_f1(c);
  const double accuracy = c.n() > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.n()) : 0.0;
  std::ostringstream js;
  js << "{\n  \"nodules\": " << c.n() << ",\n  \"accuracy\": " << (c.n() > 0 ? fmt(accuracy) : "null")
     << ",\n  \"f1\": " << json_opt(r.f1) << ",\n  \"sensitivity\": " << json_opt(r.sensitivity)
     << ",\n  \"specificity\": " << json_opt(r.specificity) << ",\n  \"tp\": " << c.tp << ",\n  \"fp\": " << c.fp
     << ",\n  \"tn\": " << c.tn << ",\n  \"fn\": " << c.fn << ",\n  \"threshold\": " << fmt(threshold)
     << ",\n  \"labelling\": " << meta.at("labelling").dump() << ",\n  \"mislabelled\": " << meta.at("mislabelled").dump()
     << "\n}\n";
  const fs::path report = run_dir_ / "reports" / "classifier_metrics.json";
  write_text_file(report, js.str());
  say("classify: held-out accuracy " + (c.n() > 0 ? fmt(accuracy) : std::string("n/a")) + ", F1 " + json_opt(r.f1));
  finish(Stage::kClassify, {out, report});
}

void Pipeline::pool_features() {
  check_upstream(Stage::kPoolFeatures);
  const int side = static_cast<int>(cfg_.get_int("volume.side"));
  const double threshold = cfg_.get_double("extract.threshold");
  const Split split = load_split(run_dir_);
  const auto index = load_index(run_dir_ / "canonical" / "index.jsonl");
  const auto mal = load_detections(run_dir_ / "detections" / "malignancy.jsonl");
  const ClassifierFeatureSet set = cfg_.get_string("patient.feature_set") == "competition"
                                       ? ClassifierFeatureSet::kCompetition
                                       : ClassifierFeatureSet::kFull;
  const FeatureWeights w{cfg_.get_double("patient.weight_malignancy"), cfg_.get_double("patient.weight_classifier")};

  std::map<std::string, std::vector<double>> nodule_probs;
  for (const auto& line : read_lines(run_dir_ / "predictions" / "nodules.jsonl")) {
    const json j = json::parse(line);
    nodule_probs[j.at("patient_id").get<std::string>()].push_back(j.at("p_malignant").get<double>());
  }

  std::vector<FeatureRow> train_rows, test_rows;
  for (const View& v : make_views(split, static_cast<int>(cfg_.get_int("patient.transposes")))) {
    const auto it = mal.find(v.id);
    if (it == mal.end()) {
      throw ValidationError("no malignancy detections for " + v.id + "; rerun `lungpipe detect --detector malignancy`");
    }
    const MalignancyFeatures m = pool_malignancy(it->second, side, threshold);
    const auto np = nodule_probs.find(v.id);
    const ClassifierFeatures c =
        pool_classifier(np == nodule_probs.end() ? std::span<const double>{} : std::span<const double>(np->second), set);
    FeatureRow row{v.id, std::nullopt, assemble_features(m, c, w)};
    if (v.train) {
      row.label = index.at(v.patient).cancer.value_or(false) ? patient_class::kCancer : patient_class::kNoCancer;
      train_rows.push_back(std::move(row));
    } else {
      test_rows.push_back(std::move(row));
    }
  }
  const fs::path train_path = run_dir_ / "features" / "train.csv";
  const fs::path test_path = run_dir_ / "features" / "test.csv";
  write_feature_table(train_path, train_rows);
  write_feature_table(test_path, test_rows);
  say("pool-features: " + std::to_string(train_rows.size()) + " training rows, " + std::to_string(test_rows.size()) +
      " test rows");
  finish(Stage::kPoolFeatures, {train_path, test_path});
}

void Pipeline::train_patient() {
  check_upstream(Stage::kTrainPatient);
  const auto rows = read_feature_table(run_dir_ / "features" / "train.csv");
  std::vector<PatientFeatureVector> x;
  std::vector<int> y;
  for (const auto& r : rows) {
    if (!r.label) throw ValidationError("training feature row " + r.patient_id + " has no label");
    x.push_back(r.features);
    y.push_back(*r.label);
  }
  PatientHyper h;
  h.iterations = static_cast<int>(cfg_.get_int("patient.iterations"));
  h.learning_rate = cfg_.get_double("patient.lr");
  h.weight_decay = cfg_.get_double("patient.weight_decay");
  h.seed = seed_of(cfg_, 4);
  say("train-patient: " + std::to_string(x.size()) + " rows, " + std::to_string(h.iterations) + " full-batch steps");
  PatientTrainResult res = lungpipe::train_patient(x, y, patient_config(cfg_), h);
  const fs::path ckpt = run_dir_ / "models" / "patient.ckpt";
  nn::write_checkpoint(ckpt, nn::make_checkpoint(res.net, {res.net.architecture_id(), h.iterations, h.seed,
                                                           ckpt_meta(stage_config_hash(Stage::kTrainPatient))}));
  std::string log = "step,loss\n";
  for (const auto& [step, loss] : res.log) log += std::to_string(step) + "," + fmt(loss) + "\n";
  write_text_file(run_dir_ / "logs" / "patient.csv", log);
  finish(Stage::kTrainPatient, {ckpt, run_dir_ / "logs" / "patient.csv"});
}

void Pipeline::predict() {
  check_upstream(Stage::kPredict);
  nn::Network<float> net = build_patient_net(patient_config(cfg_));
  load_into(run_dir_ / "models" / "patient.ckpt", net);
  const auto rows = read_feature_table(run_dir_ / "features" / "test.csv");
  std::vector<PatientFeatureVector> x;
  for (const auto& r : rows) x.push_back(r.features);
  const std::vector<double> p = x.empty() ? std::vector<double>{} : predict_patients(net, x);
  std::string csv = "patient_id,cancer_probability\n";
  for (std::size_t i = 0; i < rows.size(); ++i) csv += rows[i].patient_id + "," + fmt(p[i]) + "\n";
  const fs::path out = run_dir_ / "predictions" / "submission.csv";
  write_text_file(out, csv);
  say("predict: " + std::to_string(rows.size()) + " patients");
  finish(Stage::kPredict, {out});
}

void Pipeline::evaluate(const std::optional<fs::path>& predictions, const std::optional<fs::path>& report) {
  const bool own = !predictions && !report;
  if (predictions) {
    if (!RunManifest::load(run_dir_).stage_hash(stage_name(Stage::kSynth))) {
      throw ValidationError("evaluate needs the labels written by `lungpipe synth`; run it first");
    }
  } else {
    check_upstream(Stage::kEvaluate);
  }
  const fs::path pred_path = predictions.value_or(run_dir_ / "predictions" / "submission.csv");
  const fs::path out = report.value_or(run_dir_ / "reports" / "patient_metrics.json");

  std::map<std::string, bool> labels;
  for (const auto& r : read_manifest(run_dir_ / "data" / "manifest.jsonl")) {
    if (r.cancer) labels[r.patient_id] = *r.cancer;
  }
  std::istringstream is(read_text_file(pred_path));
  std::string line;
  if (!std::getline(is, line) || line != "patient_id,cancer_probability") {
    throw ValidationError(pred_path.string() + ": expected header patient_id,cancer_probability");
  }
  std::vector<double> p;
  std::vector<int> y;
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ValidationError(pred_path.string() + ": malformed row '" + line + "'");
    const std::string id = line.substr(0, comma);
    const auto lab = labels.find(id);
    if (lab == labels.end()) throw ValidationError(pred_path.string() + ": no label for patient " + id);
    if (!seen.insert(id).second) throw ValidationError(pred_path.string() + ": duplicate patient " + id);
    char* end = nullptr;
    const std::string num = line.substr(comma + 1);
    const double v = std::strtod(num.c_str(), &end);
    if (end == num.c_str() || *end != '\0' || !(v >= 0.0 && v <= 1.0)) {
      throw ValidationError(pred_path.string() + ": invalid probability for " + id);
    }
    p.push_back(v);
    y.push_back(lab->second ? 1 : 0);
  }
  const MetricReport r = evaluate_scores(p, y, cfg_.get_double("evaluate.threshold"));
  write_text_file(out, report_to_json(r) + "\n");
  say("evaluate: log-loss " + fmt(r.log_loss) + " over " + std::to_string(r.n) + " patients");
  if (own) finish(Stage::kEvaluate, {out});
}

}  // namespace lungpipe
