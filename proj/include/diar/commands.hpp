#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diar/aggregator.hpp"
#include "diar/baselines.hpp"
#include "diar/datagen.hpp"
#include "diar/descriptors.hpp"
#include "diar/error.hpp"
#include "diar/matching.hpp"
#include "diar/metrics.hpp"

namespace diar {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RpcaConfig, lambda, tol, max_iters)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MleConfig, tol, max_iters, log_floor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RansacConfig, threshold_px, max_iters, seed)

// ---------------------------------------------------------------------------
// Run configurations. Every field has a default.

struct GenerateConfig {
  std::string out = "data";
  std::string mode = "aligned";  // aligned | misaligned | both
  std::string preset = "default";  // default | mild
  std::size_t sequences = 5;
  std::size_t frames = 10;
  std::size_t size = 128;
  std::uint64_t seed = 7;
  std::string base_images;  // directory of PPMs; empty = procedural
  std::optional<SceneParams> scene;  // replaces the preset when present

  void validate() const {
    if (mode != "aligned" && mode != "misaligned" && mode != "both") {
      throw ConfigError("generate: mode must be aligned, misaligned or both");
    }
    if (preset != "default" && preset != "mild") throw ConfigError("generate: preset must be default or mild");
    if (sequences < 1) throw ConfigError("generate: sequences must be >= 1");
    if (frames < 1) throw ConfigError("generate: frames must be >= 1");
    if (size < 16) throw ConfigError("generate: size must be >= 16");
    if (out.empty()) throw ConfigError("generate: output directory is empty");
  }

  SceneParams scene_params(bool aligned) const {
    SceneParams p = scene ? *scene : (preset == "mild" ? SceneParams::mild() : SceneParams{});
    p.frame_count = frames;
    p.height = p.width = size;
    p.aligned = aligned;
    return p;
  }
};

inline void to_json(nlohmann::json& j, const GenerateConfig& c) {
  j = {{"out", c.out},   {"mode", c.mode}, {"preset", c.preset}, {"sequences", c.sequences}, {"frames", c.frames},
       {"size", c.size}, {"seed", c.seed}, {"base_images", c.base_images}};
  if (c.scene) j["scene"] = *c.scene;
}

inline void from_json(const nlohmann::json& j, GenerateConfig& c) {
  const GenerateConfig d;
  c.out = j.value("out", d.out);
  c.mode = j.value("mode", d.mode);
  c.preset = j.value("preset", d.preset);
  c.sequences = j.value("sequences", d.sequences);
  c.frames = j.value("frames", d.frames);
  c.size = j.value("size", d.size);
  c.seed = j.value("seed", d.seed);
  c.base_images = j.value("base_images", d.base_images);
  if (j.contains("scene") && !j["scene"].is_null()) c.scene = j["scene"].get<SceneParams>();
}

struct TrainRunConfig {
  std::string data = "data";
  std::string out = "run";
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
    if (out.empty()) throw ConfigError("train: output directory is empty");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainRunConfig, data, out, model, train)

inline const std::vector<std::string>& valid_methods() {
  static const std::vector<std::string> m{"diar", "deep_sets", "median", "mean", "rpca", "mle"};
  return m;
}

inline void validate_methods(const std::vector<std::string>& methods, const std::string& diar_model,
                             const std::string& deep_sets_model) {
  if (methods.empty()) throw ConfigError("no reconstruction methods requested");
  for (const auto& m : methods) {
    if (std::find(valid_methods().begin(), valid_methods().end(), m) == valid_methods().end()) {
      std::string list;
      for (const auto& v : valid_methods()) list += (list.empty() ? "" : ", ") + v;
      throw ConfigError("unknown method '" + m + "' (valid: " + list + ")");
    }
    if (m == "diar" && diar_model.empty()) throw ConfigError("method diar needs --diar-model");
    if (m == "deep_sets" && deep_sets_model.empty()) throw ConfigError("method deep_sets needs --deep-sets-model");
  }
}

struct ReconstructConfig {
  std::string data = "data";
  std::string out = "recon";
  std::vector<std::string> methods{"median", "mean", "rpca", "mle"};
  std::vector<std::size_t> lengths{1, 2, 5, 10, 20, 50};
  std::string diar_model;  // directory holding checkpoint.bin + model.json
  std::string deep_sets_model;
  bool save_images = false;
  RpcaConfig rpca;
  MleConfig mle;

  void validate() const {
    validate_methods(methods, diar_model, deep_sets_model);
    if (lengths.empty()) throw ConfigError("reconstruct: no evaluation lengths");
    for (auto l : lengths)
      if (l < 1) throw ConfigError("reconstruct: lengths must be >= 1");
    if (out.empty()) throw ConfigError("reconstruct: output directory is empty");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ReconstructConfig, data, out, methods, lengths, diar_model,
                                                deep_sets_model, save_images, rpca, mle)

struct DescriptorConfig {
  std::string provider = "patch";  // patch | cnn
  std::size_t patch_size = 7;
  std::size_t patch_step = 2;
  std::string cnn_weights;  // checkpoint path; empty = seeded random weights
  std::uint64_t cnn_seed = 0;
  std::vector<double> scales{1.0, 0.75, 0.5};

  void validate() const {
    if (provider != "patch" && provider != "cnn") throw ConfigError("descriptor provider must be patch or cnn");
    if (patch_size % 2 == 0) throw ConfigError("patch size must be odd");
    if (patch_step < 1) throw ConfigError("patch step must be >= 1");
    if (scales.empty()) throw ConfigError("descriptor scales are empty");
    for (double s : scales)
      if (!(s > 0.0)) throw ConfigError("descriptor scales must be positive");
  }

  DescriptorProvider make(std::size_t channels) const {
    if (provider == "patch") return patch_provider(patch_size, patch_step);
    return cnn_provider(cnn_weights.empty() ? cnn_descriptor_params(channels, cnn_seed)
                                            : load_checkpoint<float>(cnn_weights));
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DescriptorConfig, provider, patch_size, patch_step, cnn_weights,
                                                cnn_seed, scales)

struct AlignEvalConfig {
  std::string data = "data";
  std::string out = "align";
  std::string alignment = "estimated";  // estimated | ground-truth
  std::size_t reference = 0;
  DescriptorConfig descriptor;
  RansacConfig ransac;
  float min_score = 0.0f;
  std::vector<std::string> methods{"median", "mean", "rpca", "mle"};
  std::string diar_model;
  std::string deep_sets_model;
  RpcaConfig rpca;
  MleConfig mle;

  void validate() const {
    if (alignment != "estimated" && alignment != "ground-truth") {
      throw ConfigError("align-eval: alignment must be estimated or ground-truth");
    }
    descriptor.validate();
    if (ransac.threshold_px <= 0.0 || ransac.max_iters < 1) throw ConfigError("align-eval: invalid RANSAC settings");
    validate_methods(methods, diar_model, deep_sets_model);
    if (out.empty()) throw ConfigError("align-eval: output directory is empty");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AlignEvalConfig, data, out, alignment, reference, descriptor, ransac,
                                                min_score, methods, diar_model, deep_sets_model, rpca, mle)

struct ReportConfig {
  std::vector<std::string> inputs;
  std::string out = "report";

  void validate() const {
    if (inputs.empty()) throw ConfigError("report: no input CSV files");
    if (out.empty()) throw ConfigError("report: output directory is empty");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ReportConfig, inputs, out)

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

template <typename Config>
void write_config(const Config& cfg, const std::string& dir) {
  ensure_dir(dir);
  nlohmann::json j = cfg;
  write_text(std::filesystem::path(dir) / "config.json", j.dump(2) + "\n");
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return format_double(v);
}

}  // namespace detail

template <typename Config>
Config load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(path));
    return j.get<Config>();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

inline void save_model(const DiarModel& m, const ParamStore<float>& params, const std::string& dir) {
  detail::ensure_dir(dir);
  save_checkpoint(params, (std::filesystem::path(dir) / "checkpoint.bin").string());
  nlohmann::json j = m.config;
  detail::write_text(std::filesystem::path(dir) / "model.json", j.dump(2) + "\n");
}

inline DiarModel load_model(const std::string& dir) {
  const auto cfg = load_config<ModelConfig>((std::filesystem::path(dir) / "model.json").string());
  DiarModel m = DiarModel::create(cfg);
  assign_parameters(m.params, load_checkpoint<float>((std::filesystem::path(dir) / "checkpoint.bin").string()));
  return m;
}

struct Reconstructors {
  std::optional<DiarModel> diar, deep_sets;
  RpcaConfig rpca;
  MleConfig mle;
};

/// Reconstruction of one masked stack by a named method.
inline Image reconstruct_with(const std::string& method, std::span<const Image> frames, std::span<const Mask> masks,
                              const Reconstructors& r) {
  if (method == "median") return median_stack(frames, masks);
  if (method == "mean") return mean_stack(frames, masks);
  if (method == "rpca") return rpca_reconstruct(frames, masks, r.rpca).image;
  if (method == "mle") return weiss_mle(frames, masks, r.mle).image;
  const std::vector<Image> filled = impute_masked(frames, masks);
  if (method == "diar") return diar_forward(filled, *r.diar);
  if (method == "deep_sets") return deep_sets_forward(filled, *r.deep_sets);
  throw ConfigError("unknown method '" + method + "'");
}

inline Reconstructors make_reconstructors(const std::vector<std::string>& methods, const std::string& diar_model,
                                          const std::string& deep_sets_model, const RpcaConfig& rpca,
                                          const MleConfig& mle) {
  Reconstructors r;
  r.rpca = rpca;
  r.mle = mle;
  if (std::count(methods.begin(), methods.end(), "diar")) r.diar = load_model(diar_model);
  if (std::count(methods.begin(), methods.end(), "deep_sets")) {
    r.deep_sets = load_model(deep_sets_model);
    if (r.deep_sets->kind() != ModelKind::deep_sets) throw ConfigError("--deep-sets-model does not hold a deep_sets model");
  }
  return r;
}

inline std::string metrics_csv_header() { return "seq_id,method,T,rmse,psnr,ssim"; }

inline std::string metrics_csv_row(std::size_t seq, const std::string& method, std::size_t t, const MetricReport& m) {
  return std::to_string(seq) + "," + method + "," + std::to_string(t) + "," + detail::csv_number(m.rmse) + "," +
         detail::csv_number(m.psnr) + "," + detail::csv_number(m.ssim);
}

// ---------------------------------------------------------------------------
// generate

struct GenerateSummary {
  std::size_t sequences = 0;
  std::vector<std::string> directories;
};

inline GenerateSummary cmd_generate(const GenerateConfig& cfg) {
  cfg.validate();
  std::vector<Image> bases;
  if (!cfg.base_images.empty()) bases = load_base_images(cfg.base_images);
  GenerateSummary s;
  auto emit = [&](bool aligned, const std::string& dir) {
    const auto seqs = generate_dataset(cfg.scene_params(aligned), cfg.sequences, cfg.seed, bases);
    write_dataset(seqs, dir);
    s.sequences += seqs.size();
    s.directories.push_back(dir);
  };
  if (cfg.mode == "both") {
    emit(true, (std::filesystem::path(cfg.out) / "aligned").string());
    emit(false, (std::filesystem::path(cfg.out) / "misaligned").string());
  } else {
    emit(cfg.mode == "aligned", cfg.out);
  }
  detail::write_config(cfg, cfg.out);
  return s;
}

// ---------------------------------------------------------------------------
// train

inline TrainResult cmd_train(const TrainRunConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto data = read_dataset(cfg.data);
  if (data.empty()) throw IoError("train: dataset '" + cfg.data + "' holds no sequences");
  ModelConfig mc = cfg.model;
  mc.image_channels = data[0].frames.at(0).channels();
  DiarModel model = DiarModel::create(mc);
  TrainResult res = train(model, data, cfg.train, on_epoch);
  TrainRunConfig resolved = cfg;
  resolved.model = mc;
  detail::write_config(resolved, cfg.out);
  save_model(model, res.best, cfg.out);
  detail::write_text(std::filesystem::path(cfg.out) / "history.csv", history_csv(res.history));
  std::string val = "seq_id,val_loss\n";
  for (std::size_t i = 0; i < res.final_val_losses.size(); ++i)
    val += std::to_string(res.split.val[i]) + "," + detail::csv_number(res.final_val_losses[i]) + "\n";
  detail::write_text(std::filesystem::path(cfg.out) / "val_losses.csv", val);
  return res;
}

// ---------------------------------------------------------------------------
// reconstruct

inline std::string cmd_reconstruct(const ReconstructConfig& cfg) {
  cfg.validate();
  const auto data = read_dataset(cfg.data);
  const Reconstructors r = make_reconstructors(cfg.methods, cfg.diar_model, cfg.deep_sets_model, cfg.rpca, cfg.mle);
  detail::ensure_dir(cfg.out);
  std::string csv = metrics_csv_header() + "\n";
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& seq = data[s];
    for (std::size_t len : cfg.lengths) {
      if (len > seq.frames.size()) continue;
      const std::span<const Image> frames(seq.frames.data(), len);
      const std::vector<Mask> masks(len, Mask(seq.label.height(), seq.label.width(), true));
      for (const auto& m : cfg.methods) {
        const Image est = reconstruct_with(m, frames, masks, r);
        csv += metrics_csv_row(s, m, len, evaluate(est, seq.label)) + "\n";
        if (cfg.save_images) {
          char name[96];
          std::snprintf(name, sizeof name, "seq_%05zu_%s_T%03zu.ppm", s, m.c_str(), len);
          detail::ensure_dir((std::filesystem::path(cfg.out) / "images").string());
          write_ppm(est, (std::filesystem::path(cfg.out) / "images" / name).string());
        }
      }
    }
  }
  detail::write_text(std::filesystem::path(cfg.out) / "metrics.csv", csv);
  detail::write_config(cfg, cfg.out);
  return csv;
}

// ---------------------------------------------------------------------------
// align-eval

struct FrameError {
  std::size_t seq = 0, frame = 0;
  bool failed = false;
  double homography_error = 0.0, projection_error = 0.0, corner_error_px = 0.0;
};

struct AlignEvalSummary {
  std::vector<FrameError> errors;  // non-reference frames
  std::size_t failures = 0;
  std::string metrics_csv;
};

inline AlignEvalSummary cmd_align_eval(const AlignEvalConfig& cfg) {
  cfg.validate();
  const auto data = read_dataset(cfg.data);
  const Reconstructors r = make_reconstructors(cfg.methods, cfg.diar_model, cfg.deep_sets_model, cfg.rpca, cfg.mle);
  detail::ensure_dir(cfg.out);
  AlignEvalSummary sum;
  std::string diag = alignment_csv_header() + ",homography_error,projection_error,corner_error_px\n";
  std::string lng = "seq_id,frame,metric,value\n";
  std::string csv = metrics_csv_header() + "\n";
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& seq = data[s];
    if (cfg.reference >= seq.frames.size()) throw ConfigError("align-eval: reference index outside a sequence");
    AlignedSequence al;
    if (cfg.alignment == "estimated") {
      AlignConfig ac;
      ac.scales = cfg.descriptor.scales;
      ac.min_score = cfg.min_score;
      ac.ransac = cfg.ransac;
      ac.ransac.seed = derive_seed(cfg.ransac.seed, s);
      al = align_sequence(seq.frames, cfg.reference, cfg.descriptor.make(seq.label.channels()), ac);
    } else {
      // Ground-truth homographies relative to the chosen reference frame.
      const Homography to_ref_inv = seq.homographies[cfg.reference].inverse();
      for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        const Homography h = seq.homographies[t] * to_ref_inv;
        WarpResult w = warp(seq.frames[t], h, seq.label.height(), seq.label.width());
        al.frames.push_back(std::move(w.image));
        al.masks.push_back(std::move(w.mask));
        al.usable.push_back(1);
        al.homographies.push_back(h);
        if (t != cfg.reference) al.diagnostics.push_back(FrameAlignment{t, 0, 0, h, false, ""});
      }
    }
    const Homography ref_inv = seq.homographies[cfg.reference].inverse();
    for (const auto& d : al.diagnostics) {
      FrameError fe;
      fe.seq = s;
      fe.frame = d.frame;
      fe.failed = d.failed;
      const Homography truth = seq.homographies[d.frame] * ref_inv;
      const double inf = std::numeric_limits<double>::infinity();
      if (d.failed) {
        fe.homography_error = fe.projection_error = fe.corner_error_px = inf;
        ++sum.failures;
      } else {
        const std::size_t w = seq.label.width(), h = seq.label.height();
        const Homography nt = to_normalized_frame(truth, w, h), ne = to_normalized_frame(d.homography, w, h);
        fe.homography_error = homography_error(nt, ne);
        fe.projection_error = projection_error(nt, ne);
        fe.corner_error_px = corner_error_px(truth, d.homography, seq.label.width(), seq.label.height());
      }
      diag += alignment_csv_row(s, d) + "," + detail::csv_number(fe.homography_error) + "," +
              detail::csv_number(fe.projection_error) + "," + detail::csv_number(fe.corner_error_px) + "\n";
      for (const auto& [metric, v] : {std::pair<const char*, double>{"homography_error", fe.homography_error},
                                      {"projection_error", fe.projection_error},
                                      {"corner_error_px", fe.corner_error_px}}) {
        lng += std::to_string(s) + "," + std::to_string(d.frame) + "," + metric + "," + detail::csv_number(v) + "\n";
      }
      sum.errors.push_back(fe);
    }
    const auto frames = al.usable_frames();
    const auto masks = al.usable_masks();
    for (const auto& m : cfg.methods) {
      const Image est = reconstruct_with(m, frames, masks, r);
      csv += metrics_csv_row(s, m, frames.size(), evaluate(est, seq.label)) + "\n";
    }
  }
  detail::write_text(std::filesystem::path(cfg.out) / "alignment.csv", diag);
  detail::write_text(std::filesystem::path(cfg.out) / "alignment_long.csv", lng);
  detail::write_text(std::filesystem::path(cfg.out) / "metrics.csv", csv);
  detail::write_config(cfg, cfg.out);
  sum.metrics_csv = csv;
  return sum;
}

// ---------------------------------------------------------------------------
// report

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable parse_csv(const std::string& text, const std::string& origin) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ParseError(origin + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                       " fields, expected " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw ParseError(origin + ": empty CSV");
  if (t.rows.empty()) throw ParseError(origin + ": CSV has a header but no data rows");
  return t;
}

inline double parse_number(const std::string& s, const std::string& origin, std::size_t line) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(origin + ": line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
}

namespace svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* color(std::size_t i) {
  static const char* c[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return c[i % 8];
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;

  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline Frame fit(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  return Frame{x0, x1, y0 - pad, y1 + pad};
}

inline std::string axes(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" font-family=\"sans-serif\" "
                  "font-size=\"12\">\n<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) + "</text>\n";
  s += "<line x1=\"" + num(Frame::L) + "\" y1=\"" + num(Frame::H - Frame::B) + "\" x2=\"" + num(Frame::W - Frame::R) +
       "\" y2=\"" + num(Frame::H - Frame::B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(Frame::L) + "\" y1=\"" + num(Frame::T) + "\" x2=\"" + num(Frame::L) + "\" y2=\"" +
       num(Frame::H - Frame::B) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s += "<text x=\"" + num(Frame::L - 6) + "\" y=\"" + num(f.py(yv) + 4) + "\" text-anchor=\"end\">" +
         format_double(std::round(yv * 1e4) / 1e4).substr(0, 8) + "</text>\n";
  }
  s += "<text x=\"" + num((Frame::L + Frame::W - Frame::R) / 2) + "\" y=\"" + num(Frame::H - 12) +
       "\" text-anchor=\"middle\">" + escape(xl) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num(Frame::H / 2) + "\" transform=\"rotate(-90 16 " + num(Frame::H / 2) +
       ")\" text-anchor=\"middle\">" + escape(yl) + "</text>\n";
  return s;
}

inline std::string line_plot(const std::vector<Series>& series, const std::string& title, const std::string& xl,
                             const std::string& yl) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const Frame f = fit(x0, x1, y0, y1);
  std::string out = axes(f, title, xl, yl);
  std::set<double> ticks;
  for (const auto& s : series)
    for (const auto& p : s.points) ticks.insert(p.first);
  for (double x : ticks) {
    out += "<text x=\"" + num(f.px(x)) + "\" y=\"" + num(Frame::H - Frame::B + 16) + "\" text-anchor=\"middle\">" +
           format_double(x) + "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (auto [x, y] : series[i].points)
      if (std::isfinite(y)) pts += (pts.empty() ? "" : " ") + num(f.px(x)) + "," + num(f.py(y));
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color(i)) + "\" stroke-width=\"2\" points=\"" + pts +
           "\"/>\n";
    const double ly = Frame::T + 18.0 * static_cast<double>(i);
    out += "<line x1=\"" + num(Frame::W - Frame::R + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" +
           num(Frame::W - Frame::R + 32) + "\" y2=\"" + num(ly) + "\" stroke=\"" + color(i) + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + num(Frame::W - Frame::R + 38) + "\" y=\"" + num(ly + 4) + "\">" + escape(series[i].name) +
           "</text>\n";
  }
  return out + "</svg>\n";
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::string box_plot(const std::vector<Series>& groups, const std::string& title, const std::string& yl) {
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto& g : groups)
    for (auto p : g.points)
      if (std::isfinite(p.second)) y0 = std::min(y0, p.second), y1 = std::max(y1, p.second);
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  const Frame f = fit(0.0, static_cast<double>(groups.size()), y0, y1);
  std::string out = axes(f, title, "", yl);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::vector<double> v;
    for (auto p : groups[i].points)
      if (std::isfinite(p.second)) v.push_back(p.second);
    const double cx = f.px(static_cast<double>(i) + 0.5);
    out += "<text x=\"" + num(cx) + "\" y=\"" + num(Frame::H - Frame::B + 16) + "\" text-anchor=\"middle\">" +
           escape(groups[i].name) + "</text>\n";
    if (v.empty()) continue;
    const double q1 = quantile(v, 0.25), q2 = quantile(v, 0.5), q3 = quantile(v, 0.75);
    const double iqr = q3 - q1;
    double lo = q1, hi = q3;
    for (double x : v) {
      if (x >= q1 - 1.5 * iqr) lo = std::min(lo, x);
      if (x <= q3 + 1.5 * iqr) hi = std::max(hi, x);
    }
    const double hw = 0.3 * (f.px(1.0) - f.px(0.0));
    const char* c = color(i);
    out += "<line x1=\"" + num(cx) + "\" y1=\"" + num(f.py(lo)) + "\" x2=\"" + num(cx) + "\" y2=\"" + num(f.py(hi)) +
           "\" stroke=\"" + c + "\"/>\n";
    out += "<rect x=\"" + num(cx - hw) + "\" y=\"" + num(f.py(q3)) + "\" width=\"" + num(2 * hw) + "\" height=\"" +
           num(f.py(q1) - f.py(q3)) + "\" fill=\"white\" stroke=\"" + c + "\"/>\n";
    out += "<line x1=\"" + num(cx - hw) + "\" y1=\"" + num(f.py(q2)) + "\" x2=\"" + num(cx + hw) + "\" y2=\"" +
           num(f.py(q2)) + "\" stroke=\"" + c + "\" stroke-width=\"2\"/>\n";
    for (double x : v)
      if (x < lo || x > hi)
        out += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(f.py(x)) + "\" r=\"2\" fill=\"" + c + "\"/>\n";
  }
  return out + "</svg>\n";
}

}  // namespace svg

struct ReportOutput {
  std::vector<std::string> files;
  std::string summary;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  std::vector<double> f;
  for (double x : v)
    if (std::isfinite(x)) f.push_back(x);
  if (f.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double m = exact_sum(f) / static_cast<double>(f.size());
  double ss = 0.0;
  for (double x : f) ss += (x - m) * (x - m);
  return {m, f.size() > 1 ? std::sqrt(ss / static_cast<double>(f.size() - 1)) : 0.0};
}

}  // namespace detail

/// SVG plots and a text summary for metrics, history and long-format CSVs.
/// Nothing is written unless every input parses.
inline ReportOutput cmd_report(const ReportConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, CsvTable>> tables;
  for (const auto& in : cfg.inputs) tables.emplace_back(in, parse_csv(detail::read_text(in), in));
  std::vector<std::pair<std::string, std::string>> files;
  std::ostringstream summary;
  char buf[256];
  for (const auto& [path, t] : tables) {
    const std::string stem = std::filesystem::path(path).stem().string();
    const auto& h = t.header;
    auto has = [&](const char* c) { return std::find(h.begin(), h.end(), c) != h.end(); };
    if (has("method") && has("T") && has("rmse")) {
      const std::size_t cm = t.column("method"), ct = t.column("T");
      std::vector<std::string> methods;
      for (const auto& r : t.rows)
        if (std::find(methods.begin(), methods.end(), r[cm]) == methods.end()) methods.push_back(r[cm]);
      summary << path << "\n";
      for (const char* metric : {"rmse", "psnr", "ssim"}) {
        const std::size_t cv = t.column(metric);
        std::vector<svg::Series> series;
        for (const auto& m : methods) {
          std::map<double, std::vector<double>> by_t;
          for (std::size_t i = 0; i < t.rows.size(); ++i) {
            const auto& r = t.rows[i];
            if (r[cm] != m) continue;
            by_t[parse_number(r[ct], path, i + 2)].push_back(parse_number(r[cv], path, i + 2));
          }
          svg::Series s{m, {}};
          for (const auto& [len, vals] : by_t) {
            const auto [mu, sd] = detail::mean_std(vals);
            s.points.emplace_back(len, mu);
            std::snprintf(buf, sizeof buf, "  %-10s %-5s T=%-4g %.6g +- %.6g\n", m.c_str(), metric, len, mu, sd);
            summary << buf;
          }
          series.push_back(std::move(s));
        }
        files.emplace_back(stem + "_" + metric + ".svg", svg::line_plot(series, std::string(metric) + " vs sequence length",
                                                                        "T", metric));
      }
    } else if (has("epoch") && has("train_loss") && has("val_loss")) {
      const std::size_t ce = t.column("epoch"), ctr = t.column("train_loss"), cv = t.column("val_loss");
      svg::Series tr{"train", {}}, va{"validation", {}};
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const double e = parse_number(t.rows[i][ce], path, i + 2);
        tr.points.emplace_back(e, parse_number(t.rows[i][ctr], path, i + 2));
        va.points.emplace_back(e, parse_number(t.rows[i][cv], path, i + 2));
      }
      std::snprintf(buf, sizeof buf, "%s\n  final train_loss %.6g, val_loss %.6g\n", path.c_str(),
                    tr.points.back().second, va.points.back().second);
      summary << buf;
      files.emplace_back(stem + "_loss.svg", svg::line_plot({tr, va}, "L1 loss per epoch", "epoch", "L1"));
    } else if (has("metric") && has("value")) {
      const std::size_t cm = t.column("metric"), cv = t.column("value");
      std::vector<svg::Series> groups;
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& r = t.rows[i];
        auto it = std::find_if(groups.begin(), groups.end(), [&](const svg::Series& g) { return g.name == r[cm]; });
        if (it == groups.end()) {
          groups.push_back({r[cm], {}});
          it = groups.end() - 1;
        }
        it->points.emplace_back(0.0, parse_number(r[cv], path, i + 2));
      }
      summary << path << "\n";
      for (const auto& g : groups) {
        std::vector<double> v;
        for (auto p : g.points) v.push_back(p.second);
        const auto [mu, sd] = detail::mean_std(v);
        std::vector<double> finite;
        for (double x : v)
          if (std::isfinite(x)) finite.push_back(x);
        const double med = finite.empty() ? std::numeric_limits<double>::quiet_NaN() : svg::quantile(finite, 0.5);
        std::snprintf(buf, sizeof buf, "  %-18s n=%zu median %.6g mean %.6g +- %.6g\n", g.name.c_str(), v.size(), med,
                      mu, sd);
        summary << buf;
        files.emplace_back(stem + "_" + g.name + ".svg", svg::box_plot({g}, g.name, g.name));
      }
    } else {
      throw ParseError(path + ": line 1: unrecognized CSV schema");
    }
  }
  detail::ensure_dir(cfg.out);
  ReportOutput out;
  for (const auto& [name, content] : files) {
    const auto p = (std::filesystem::path(cfg.out) / name).string();
    detail::write_text(p, content);
    out.files.push_back(p);
  }
  out.summary = summary.str();
  detail::write_text(std::filesystem::path(cfg.out) / "summary.txt", out.summary);
  return out;
}

}  // namespace diar
