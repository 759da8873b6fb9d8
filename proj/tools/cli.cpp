#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "cvloc/cvloc.hpp"

namespace cvloc::cli {
namespace {

using json = nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Folds -0.0 into 0.0 so printed results do not depend on sign of zero.
double z(double v) { return v + 0.0; }

json vec_json(const Vec2& v) { return json::array({z(v.x()), z(v.y())}); }

// ---------------------------------------------------------------- file input

json read_json(const std::string& path) {
  const std::string text = detail::read_file(path);
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw FormatError(path + ": expected a JSON object", 0);
    return j;
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": invalid JSON: " + e.what(), e.byte);
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& path) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw FormatError(path + ": unknown field '" + key + "'", 0);
  }
}

template <class T>
T field(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) throw FormatError(path + ": missing field '" + key + "'", 0);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(path + ": field '" + key + "': " + e.what(), 0);
  }
}

template <class T>
T field_or(const json& j, const std::string& key, const std::string& path, T fallback) {
  return j.contains(key) ? field<T>(j, key, path) : fallback;
}

template <class Fn>
auto with_path(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const GeometryError& e) {
    throw GeometryError(path + ": " + e.what());
  }
}

CameraModel load_camera(const std::string& path) {
  const json j = read_json(path);
  check_keys(j, {"fx", "fy", "cx", "cy", "image_h", "image_w", "R", "t"}, path);
  CameraModel cam;
  cam.fx = field<double>(j, "fx", path);
  cam.fy = field<double>(j, "fy", path);
  cam.cx = field<double>(j, "cx", path);
  cam.cy = field<double>(j, "cy", path);
  cam.image_h = field<std::size_t>(j, "image_h", path);
  cam.image_w = field<std::size_t>(j, "image_w", path);
  if (j.contains("R")) {
    const auto r = field<std::vector<double>>(j, "R", path);
    if (r.size() != 9) throw FormatError(path + ": field 'R' must hold 9 numbers (row-major)", 0);
    for (int i = 0; i < 9; ++i) cam.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
  }
  if (j.contains("t")) {
    const auto t = field<std::vector<double>>(j, "t", path);
    if (t.size() != 3) throw FormatError(path + ": field 't' must hold 3 numbers", 0);
    cam.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  }
  with_path(path, [&] { cam.validate(); });
  return cam;
}

BevGrid load_grid(const std::string& path) {
  const json j = read_json(path);
  check_keys(j, {"preset", "size", "meters_per_pixel", "height_m", "anchor"}, path);
  BevGrid g;
  std::optional<DatasetPreset> preset;
  if (j.contains("preset")) {
    const auto name = field<std::string>(j, "preset", path);
    preset = find_preset(name);
    if (!preset) throw FormatError(path + ": unknown preset '" + name + "'", 0);
  }
  g.size = field_or<std::size_t>(j, "size", path, g.size);
  if (preset) {
    g.meters_per_pixel = preset->meters_per_pixel;
    if (preset->camera_height_m) g.height_m = *preset->camera_height_m;
    if (!preset->camera_height_m && !j.contains("height_m")) {
      throw FormatError(path + ": preset '" + std::string(preset->name) +
                            "' has no camera height; set 'height_m'",
                        0);
    }
  }
  g.meters_per_pixel = field_or<double>(j, "meters_per_pixel", path, g.meters_per_pixel);
  g.height_m = field_or<double>(j, "height_m", path, g.height_m);
  g.anchor = Vec2::Constant(static_cast<double>(g.size) / 2.0);
  if (j.contains("anchor")) {
    const auto a = field<std::vector<double>>(j, "anchor", path);
    if (a.size() != 2) throw FormatError(path + ": field 'anchor' must hold [x, y]", 0);
    g.anchor = Vec2(a[0], a[1]);
  }
  with_path(path, [&] { g.validate(); });
  return g;
}

json grid_json(const BevGrid& g) {
  return {{"size", g.size},
          {"meters_per_pixel", g.meters_per_pixel},
          {"height_m", g.height_m},
          {"anchor", vec_json(g.anchor)}};
}

Se2Pose load_pose(const std::string& path) {
  const json j = read_json(path);
  return Se2Pose(field<double>(j, "theta_rad", path), field<double>(j, "tu_px", path),
                 field<double>(j, "tv_px", path));
}

SynthConfig load_synth_config(const std::string& path) {
  const json j = read_json(path);
  check_keys(j,
             {"n", "patch_size", "noise_sigma", "outlier_fraction", "outlier_weight_max",
              "rot_range_deg", "trans_range_px", "grid_size", "sat_size", "channels",
              "texture_sigma", "mpp"},
             path);
  SynthConfig c;
  c.n = field_or(j, "n", path, c.n);
  c.patch_size = field_or(j, "patch_size", path, c.patch_size);
  c.noise_sigma = field_or(j, "noise_sigma", path, c.noise_sigma);
  c.outlier_fraction = field_or(j, "outlier_fraction", path, c.outlier_fraction);
  c.outlier_weight_max = field_or(j, "outlier_weight_max", path, c.outlier_weight_max);
  c.rot_range_deg = field_or(j, "rot_range_deg", path, c.rot_range_deg);
  c.trans_range_px = field_or(j, "trans_range_px", path, c.trans_range_px);
  c.grid_size = field_or(j, "grid_size", path, c.grid_size);
  c.sat_size = field_or(j, "sat_size", path, c.sat_size);
  c.channels = field_or(j, "channels", path, c.channels);
  c.texture_sigma = field_or(j, "texture_sigma", path, c.texture_sigma);
  c.mpp = field_or(j, "mpp", path, c.mpp);
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
  return c;
}

json synth_config_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"n", c.n},
          {"patch_size", c.patch_size},
          {"noise_sigma", c.noise_sigma},
          {"outlier_fraction", c.outlier_fraction},
          {"outlier_weight_max", c.outlier_weight_max},
          {"rot_range_deg", c.rot_range_deg},
          {"trans_range_px", c.trans_range_px},
          {"grid_size", c.grid_size},
          {"sat_size", c.sat_size},
          {"channels", c.channels},
          {"texture_sigma", c.texture_sigma},
          {"mpp", c.mpp}};
}

// Comma-separated rows; '#' lines and blank lines are skipped. A first row
// whose leading field is not numeric is taken as the header.
struct CsvRow {
  std::size_t line;
  std::vector<std::string> fields;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::optional<double> to_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

std::vector<CsvRow> read_csv(const std::string& path, const std::vector<std::string>& header) {
  std::istringstream in(detail::read_file(path));
  std::vector<CsvRow> rows;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    CsvRow row{lineno, {}};
    std::stringstream ss(t);
    std::string f;
    while (std::getline(ss, f, ',')) row.fields.push_back(trim(f));
    if (t.back() == ',') row.fields.emplace_back();
    if (row.fields.size() != header.size()) {
      throw FormatError(path + ": line " + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " fields, got " +
                            std::to_string(row.fields.size()),
                        lineno);
    }
    if (first) {
      first = false;
      if (row.fields == header) continue;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double csv_number(const CsvRow& row, std::size_t k, const std::string& path) {
  const auto v = to_double(row.fields[k]);
  if (!v || !std::isfinite(*v)) {
    throw FormatError(path + ": line " + std::to_string(row.line) + ": '" + row.fields[k] +
                          "' is not a finite number",
                      row.line);
  }
  return *v;
}

MatchSet load_matches_csv(const std::string& path) {
  MatchSet m;
  for (const CsvRow& row : read_csv(path, {"px", "py", "qx", "qy", "s"})) {
    const double s = csv_number(row, 4, path);
    if (s < 0.0) {
      throw FormatError(path + ": line " + std::to_string(row.line) + ": negative weight",
                        row.line);
    }
    m.add(Vec2(csv_number(row, 0, path), csv_number(row, 1, path)),
          Vec2(csv_number(row, 2, path), csv_number(row, 3, path)), s);
  }
  if (m.size() == 0) throw FormatError(path + ": no matches", 0);
  return m;
}

std::vector<std::pair<std::string, Se2Pose>> load_poses_csv(const std::string& path) {
  std::vector<std::pair<std::string, Se2Pose>> out;
  std::set<std::string> seen;
  for (const CsvRow& row : read_csv(path, {"id", "theta_rad", "tu_px", "tv_px"})) {
    const std::string& id = row.fields[0];
    if (!seen.insert(id).second) {
      throw FormatError(path + ": line " + std::to_string(row.line) + ": duplicate id '" + id + "'",
                        row.line);
    }
    out.emplace_back(id, Se2Pose(csv_number(row, 1, path), csv_number(row, 2, path),
                                 csv_number(row, 3, path)));
  }
  if (out.empty()) throw FormatError(path + ": no poses", 0);
  return out;
}

Mask load_mask(const std::string& path) {
  try {
    return map_to_mask(load_feature_map(path));
  } catch (const ShapeError& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
}

// --------------------------------------------------------------- file output

void write_json(const std::string& path, const json& j) { detail::write_file(path, j.dump(2) + "\n"); }

json pose_json(const LocalizationResult& r, double mpp) {
  const SolverDiagnostics& d = r.diagnostics;
  return {{"theta_rad", z(r.pose.theta)},
          {"tu_px", z(r.pose.t.x())},
          {"tv_px", z(r.pose.t.y())},
          {"mpp", mpp},
          {"azimuth_deg", z(r.camera.azimuth_deg)},
          {"pos_px", vec_json(r.camera.position_px)},
          {"pos_m", vec_json(r.camera.position_m)},
          {"residual", z(d.residual)},
          {"singular_values", vec_json(d.singular_values)},
          {"det_correction", d.det_correction}};
}

json metrics_json(const MetricsTable& t, const std::string& unit) {
  auto pair = [](const std::array<double, 2>& a) { return json::array({a[0], a[1]}); };
  return {{"count", t.count},
          {"unit", unit},
          {"thresholds",
           {{"distance", pair(t.thresholds.distance)}, {"angle_deg", pair(t.thresholds.angle)}}},
          {"location",
           {{"mean", t.mean_location}, {"median", t.median_location}, {"recall_pct", pair(t.recall_location)}}},
          {"lateral", {{"recall_pct", pair(t.recall_lateral)}}},
          {"longitudinal", {{"recall_pct", pair(t.recall_longitudinal)}}},
          {"azimuth",
           {{"mean_deg", t.mean_azimuth}, {"median_deg", t.median_azimuth}, {"recall_pct", pair(t.recall_azimuth)}}}};
}

json record_json(const ErrorRecord& r) {
  return {{"id", r.id},
          {"location", r.location},
          {"lateral", r.lateral},
          {"longitudinal", r.longitudinal},
          {"azimuth_deg", r.azimuth}};
}

// ------------------------------------------------------------------ manifest

struct Run {
  Run(std::ostream& o, std::ostream& e) : out(o), err(e) {}

  std::ostream& out;
  std::ostream& err;
  const CLI::App* command = nullptr;
  std::vector<std::string> args;
  json inputs = json::object();
  json outputs = json::object();
  json resolved = json::object();
  std::optional<std::uint64_t> seed;

  void input(const std::string& name, const std::string& path) {
    if (!path.empty()) inputs[name] = path;
  }
  void output(const std::string& name, const std::string& path) {
    if (!path.empty()) outputs[name] = path;
  }

  json option_config() const {
    json cfg = json::object();
    for (const CLI::Option* opt : command->get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (name == "help") continue;
      if (opt->get_expected_max() == 0) {
        cfg[name] = opt->count() > 0;
      } else if (opt->count() > 0) {
        const auto& res = opt->results();
        cfg[name] = opt->get_expected_max() > 1 ? json(res) : json(res.back());
      } else if (!opt->get_default_str().empty()) {
        cfg[name] = opt->get_default_str();
      } else {
        cfg[name] = nullptr;
      }
    }
    return cfg;
  }

  /// Writes `<primary>.manifest.json` next to the primary output.
  void write_manifest(const std::string& primary) const {
    json m;
    m["command"] = command->get_name();
    m["version"] = kVersion;
    m["args"] = args;
    m["config"] = option_config();
    if (!resolved.empty()) m["resolved"] = resolved;
    m["seed"] = seed ? json(*seed) : json(nullptr);
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    write_json(primary + ".manifest.json", m);
  }
};

// ------------------------------------------------------------------ commands

struct ProjectOpts {
  std::string features, camera, grid, out, mask_out;
  std::size_t stride = 8;
};

int cmd_project(Run& run, const ProjectOpts& o) {
  const FeatureMap f_g = load_feature_map(o.features);
  const CameraModel cam = load_camera(o.camera);
  const BevGrid grid = load_grid(o.grid);
  const BevProjection p = project_ground_features(f_g, cam, grid, o.stride);
  const std::string mask_out =
      o.mask_out.empty() ? std::filesystem::path(o.out).replace_extension(".mask.cvfm").string() : o.mask_out;
  save_feature_map(p.features, o.out);
  save_feature_map(mask_to_map(p.visible), mask_out);
  run.input("features", o.features);
  run.input("camera", o.camera);
  run.input("grid", o.grid);
  run.output("features", o.out);
  run.output("mask", mask_out);
  run.resolved["grid"] = grid_json(grid);
  run.write_manifest(o.out);
  run.out << "projected " << p.visible.count() << " of " << grid.size * grid.size
          << " cells -> " << o.out << "\n";
  return kExitOk;
}

struct RefineOpts {
  std::string bev, weights, out;
};

int cmd_refine(Run& run, const RefineOpts& o) {
  const FeatureMap bev = load_feature_map(o.bev);
  const RefineWeights w = RefineWeights::from_store(load_weights(o.weights));
  save_feature_map(refine_block(bev, w), o.out);
  run.input("bev", o.bev);
  run.input("weights", o.weights);
  run.output("features", o.out);
  run.write_manifest(o.out);
  run.out << "refined " << bev.shape_string() << " -> " << o.out << "\n";
  return kExitOk;
}

struct FlowOpts {
  std::string source, target, visibility, op = "argmax", weights, context, out, trace_prefix;
  std::size_t iters = kDefaultFlowIterations;
  std::size_t levels = kDefaultPyramidLevels;
  std::size_t radius = kDefaultLookupRadius;
  double temperature = 1.0;
};

std::string trace_path(const std::string& prefix, std::size_t k, std::size_t total) {
  const std::size_t width = std::max<std::size_t>(2, std::to_string(total).size());
  std::ostringstream os;
  os << prefix << "_" << std::setw(static_cast<int>(width)) << std::setfill('0') << k << ".cvfl";
  return os.str();
}

int cmd_flow(Run& run, const FlowOpts& o) {
  const FeatureMap src = load_feature_map(o.source);
  const FeatureMap dst = load_feature_map(o.target);
  const Mask vis = o.visibility.empty() ? Mask(src.height(), src.width(), 1) : load_mask(o.visibility);
  std::optional<WeightStore> store;
  std::optional<FeatureMap> context;
  FlowOperator op = ArgmaxOperator{o.temperature};
  if (o.op == "gru") {
    if (o.weights.empty()) throw UsageError("--weights is required with --operator gru");
    store = load_weights(o.weights);
    if (!o.context.empty()) context = load_feature_map(o.context);
    op = GruOperator{&*store, context ? &*context : nullptr, o.radius};
  } else if (!o.weights.empty() || !o.context.empty()) {
    throw UsageError("--weights and --context apply only to --operator gru");
  }
  const FlowTrace trace = estimate_flow(src, dst, op, o.iters, vis, o.levels);
  save_flow(trace.final(), o.out);
  run.input("source", o.source);
  run.input("target", o.target);
  run.input("visibility", o.visibility);
  run.input("weights", o.weights);
  run.input("context", o.context);
  run.output("flow", o.out);
  if (!o.trace_prefix.empty()) {
    json files = json::array();
    for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
      const std::string p = trace_path(o.trace_prefix, k + 1, trace.iterations.size());
      save_flow(trace.iterations[k], p);
      files.push_back(p);
    }
    run.outputs["trace"] = files;
  }
  run.write_manifest(o.out);
  run.out << o.op << " flow, " << trace.iterations.size() << " iterations, "
          << trace.final().visibility().count() << " visible cells -> " << o.out << "\n";
  return kExitOk;
}

struct GtFlowOpts {
  std::string pose, grid, visibility, out;
  std::size_t sat_height = 0, sat_width = 0;
};

int cmd_gtflow(Run& run, const GtFlowOpts& o) {
  const Se2Pose pose = load_pose(o.pose);
  const BevGrid grid = load_grid(o.grid);
  const Mask vis = o.visibility.empty() ? Mask(grid.size, grid.size, 1) : load_mask(o.visibility);
  const FlowField f = gt_flow(pose, grid, vis, o.sat_height, o.sat_width);
  save_flow(f, o.out);
  run.input("pose", o.pose);
  run.input("grid", o.grid);
  run.input("visibility", o.visibility);
  run.output("flow", o.out);
  run.resolved["grid"] = grid_json(grid);
  run.write_manifest(o.out);
  run.out << "ground-truth flow, " << f.visibility().count() << " visible cells -> " << o.out << "\n";
  return kExitOk;
}

struct SolveOpts {
  std::string matches, flow, grid, method = "svd", out;
};

int cmd_solve(Run& run, const SolveOpts& o) {
  MatchSet m;
  Vec2 anchor = Vec2::Zero();
  double mpp = 1.0;
  std::optional<BevGrid> grid;
  if (!o.grid.empty()) {
    grid = load_grid(o.grid);
    anchor = grid->anchor;
    mpp = grid->meters_per_pixel;
  }
  if (!o.matches.empty()) {
    m = load_matches_csv(o.matches);
  } else {
    m = flow_to_matches(load_flow(o.flow), *grid);
  }
  const LocalizationResult r =
      o.method == "closed-form" ? solve_pose_closed_form(m, anchor, mpp) : solve_pose(m, anchor, mpp);
  const json j = pose_json(r, mpp);
  if (o.out.empty()) {
    run.out << j.dump(2) << "\n";
  } else {
    write_json(o.out, j);
    run.input("matches", o.matches);
    run.input("flow", o.flow);
    run.input("grid", o.grid);
    run.output("pose", o.out);
    run.write_manifest(o.out);
    run.out << "theta " << r.pose.theta << " rad, t (" << z(r.pose.t.x()) << ", " << z(r.pose.t.y())
            << ") px -> " << o.out << "\n";
  }
  return kExitOk;
}

struct LossOpts {
  std::vector<std::string> trace;
  std::string gt_flow, pred_pose, gt_pose, out;
  std::size_t epoch = 0;
  double alpha = TrainSchedule{}.alpha;
};

int cmd_loss(Run& run, const LossOpts& o) {
  FlowTrace trace;
  for (const std::string& p : o.trace) trace.iterations.push_back(load_flow(p));
  const FlowField gt = load_flow(o.gt_flow);
  const Se2Pose pred = load_pose(o.pred_pose);
  const Se2Pose truth = load_pose(o.gt_pose);
  TrainSchedule sched;
  sched.alpha = o.alpha;
  const LossReport rep = total_loss(trace, gt, pred, truth, sched, o.epoch);
  json iters = json::array();
  for (const IterationLoss& l : rep.iterations) iters.push_back({{"matching", l.matching}, {"confidence", l.confidence}});
  const json j = {{"total", rep.total},
                  {"position", rep.position},
                  {"alpha", rep.alpha},
                  {"beta", rep.beta},
                  {"kappa", rep.kappa},
                  {"epoch", o.epoch},
                  {"iterations", iters}};
  if (o.out.empty()) {
    run.out << j.dump(2) << "\n";
  } else {
    write_json(o.out, j);
    run.inputs["trace"] = o.trace;
    run.input("gt-flow", o.gt_flow);
    run.input("pred-pose", o.pred_pose);
    run.input("gt-pose", o.gt_pose);
    run.output("loss", o.out);
    run.write_manifest(o.out);
    run.out << "total loss " << rep.total << " -> " << o.out << "\n";
  }
  return kExitOk;
}

struct BenchOpts {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  std::string config, unit = "m", out;
  std::size_t iters = kDefaultFlowIterations;
  std::size_t levels = kDefaultPyramidLevels;
};

int cmd_synth_bench(Run& run, const BenchOpts& o) {
  SynthConfig cfg = o.config.empty() ? SynthConfig{} : load_synth_config(o.config);
  cfg.seed = o.seed;
  PipelineConfig pc;
  pc.iters = o.iters;
  pc.levels = o.levels;
  const double unit_per_px = o.unit == "m" ? cfg.mpp : 1.0;
  const BenchResult res = run_synth_bench(cfg, o.trials, unit_per_px, pc);
  run.out << format_table(res.table, o.unit);
  if (o.out.empty()) return kExitOk;

  json trials = json::array();
  for (const BenchTrial& t : res.trials) {
    json r = record_json(t.error);
    r["gt"] = {{"theta_rad", z(t.gt.theta)}, {"tu_px", z(t.gt.t.x())}, {"tv_px", z(t.gt.t.y())}};
    r["pred"] = {{"theta_rad", z(t.pred.pose.theta)},
                 {"tu_px", z(t.pred.pose.t.x())},
                 {"tv_px", z(t.pred.pose.t.y())}};
    trials.push_back(r);
  }
  const json j = {{"synth", synth_config_json(cfg)},
                  {"trials", o.trials},
                  {"metrics", metrics_json(res.table, o.unit)},
                  {"records", trials}};
  write_json(o.out, j);
  run.seed = o.seed;
  run.resolved["synth"] = synth_config_json(cfg);
  run.input("config", o.config);
  run.output("metrics", o.out);
  run.write_manifest(o.out);
  return kExitOk;
}

struct EvalOpts {
  std::string pred, gt, grid, unit = "m", out;
};

int cmd_eval(Run& run, const EvalOpts& o) {
  const auto pred = load_poses_csv(o.pred);
  const auto gt = load_poses_csv(o.gt);
  const BevGrid grid = o.grid.empty() ? BevGrid{} : load_grid(o.grid);
  const double unit_per_px = o.unit == "m" ? grid.meters_per_pixel : 1.0;
  std::map<std::string, Se2Pose> by_id(pred.begin(), pred.end());
  if (by_id.size() != gt.size()) {
    throw FormatError(o.pred + ": holds " + std::to_string(by_id.size()) + " poses but " + o.gt +
                          " holds " + std::to_string(gt.size()),
                      0);
  }
  std::vector<ErrorRecord> recs;
  for (const auto& [id, g] : gt) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError(o.pred + ": no prediction for id '" + id + "'", 0);
    recs.push_back(localization_errors(it->second, g, heading_deg(g), grid.anchor, unit_per_px, id));
  }
  const MetricsTable t = aggregate(recs);
  run.out << format_table(t, o.unit);
  if (o.out.empty()) return kExitOk;
  json records = json::array();
  for (const ErrorRecord& r : recs) records.push_back(record_json(r));
  write_json(o.out, {{"metrics", metrics_json(t, o.unit)}, {"records", records}});
  run.input("pred", o.pred);
  run.input("gt", o.gt);
  run.input("grid", o.grid);
  run.output("metrics", o.out);
  run.resolved["grid"] = grid_json(grid);
  run.write_manifest(o.out);
  return kExitOk;
}

struct GradcheckOpts {
  std::uint64_t seed = 0;
  std::size_t n = 50;
  std::size_t sets = 100;
  double step = 1e-6;
  double tolerance = 1e-5;
  std::string out;
};

// Closed-form alignment in extended precision; the audit compares the
// analytic gradients against central differences of this reference.
struct PoseLd {
  long double theta, tx, ty;
};

PoseLd solve_ld(const MatchSet& m) {
  long double w = 0, sx = 0, sy = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const long double s = m.weights[i];
    w += s;
    sx += s * m.src[i].x();
    sy += s * m.src[i].y();
    dx += s * m.dst[i].x();
    dy += s * m.dst[i].y();
  }
  sx /= w;
  sy /= w;
  dx /= w;
  dy /= w;
  long double cross = 0, dot = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const long double s = m.weights[i];
    const long double ax = m.src[i].x() - sx, ay = m.src[i].y() - sy;
    const long double bx = m.dst[i].x() - dx, by = m.dst[i].y() - dy;
    cross += s * (ax * by - ay * bx);
    dot += s * (ax * bx + ay * by);
  }
  const long double th = std::atan2(cross, dot);
  const long double c = std::cos(th), sn = std::sin(th);
  return {th, dx - (c * sx - sn * sy), dy - (sn * sx + c * sy)};
}

int cmd_gradcheck(Run& run, const GradcheckOpts& o) {
  SynthConfig cfg;
  cfg.seed = o.seed;
  cfg.n = o.n;
  cfg.noise_sigma = 1.0;
  cfg.rot_range_deg = 180.0;
  cfg.trans_range_px = 200.0;
  cfg.outlier_weight_max = 1.0;

  // Relative error with the absolute floor folded in: |a - fd| / max(|a|, |fd|, floor).
  const double floor = 1e-8 / o.tolerance;
  auto rel = [&](double a, double fd) {
    return std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
  };
  const char* names[] = {"dtheta/dsrc", "dtheta/ddst", "dtheta/dweight", "dt/dsrc", "dt/ddst", "dt/dweight"};
  double worst[6] = {0, 0, 0, 0, 0, 0};
  std::size_t checks = 0;
  auto diff = [](const PoseLd& a, const PoseLd& b, long double h2) {
    long double d = a.theta - b.theta;
    const long double pi = 3.141592653589793238462643383279502884L;
    if (d > pi) d -= 2 * pi;
    if (d < -pi) d += 2 * pi;
    return std::array<double, 3>{double(d / h2), double((a.tx - b.tx) / h2), double((a.ty - b.ty) / h2)};
  };

  for (std::size_t k = 0; k < o.sets; ++k) {
    SplitMix64 rng = trial_rng(o.seed, k);
    const MatchSet m = gen_matches(cfg, rng).matches;
    const PoseGradients g = pose_gradients(m);
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (int which = 0; which < 2; ++which) {
        for (int axis = 0; axis < 2; ++axis) {
          MatchSet a = m, b = m;
          double& pa = (which ? a.dst : a.src)[i](axis);
          double& pb = (which ? b.dst : b.src)[i](axis);
          pa += o.step;
          pb -= o.step;
          const auto fd = diff(solve_ld(a), solve_ld(b), static_cast<long double>(pa) - pb);
          const double ath = which ? g.dtheta_ddst[i](axis) : g.dtheta_dsrc[i](axis);
          const Mat2& at = which ? g.dt_ddst[i] : g.dt_dsrc[i];
          worst[which] = std::max(worst[which], rel(ath, fd[0]));
          worst[3 + which] = std::max({worst[3 + which], rel(at(0, axis), fd[1]), rel(at(1, axis), fd[2])});
          checks += 3;
        }
      }
      MatchSet a = m, b = m;
      a.weights[i] += o.step;
      b.weights[i] -= o.step;
      const auto fd = diff(solve_ld(a), solve_ld(b), static_cast<long double>(a.weights[i]) - b.weights[i]);
      worst[2] = std::max(worst[2], rel(g.dtheta_dweight[i], fd[0]));
      worst[5] = std::max({worst[5], rel(g.dt_dweight[i].x(), fd[1]), rel(g.dt_dweight[i].y(), fd[2])});
      checks += 3;
    }
  }
  const double max_rel = *std::max_element(std::begin(worst), std::end(worst));
  const bool pass = max_rel <= o.tolerance;

  std::ostringstream os;
  os << "gradcheck: " << o.sets << " sets x " << o.n << " matches, step " << o.step
     << ", tolerance " << o.tolerance << "\n";
  os << std::scientific << std::setprecision(3);
  for (int f = 0; f < 6; ++f) os << "  " << std::left << std::setw(16) << names[f] << worst[f] << "\n";
  os << "max relative error " << max_rel << " over " << checks << " partials: " << (pass ? "PASS" : "FAIL") << "\n";
  run.out << os.str();

  if (!o.out.empty()) {
    json fam = json::object();
    for (int f = 0; f < 6; ++f) fam[names[f]] = worst[f];
    write_json(o.out, {{"sets", o.sets},
                       {"n", o.n},
                       {"step", o.step},
                       {"tolerance", o.tolerance},
                       {"checks", checks},
                       {"max_relative_error", max_rel},
                       {"families", fam},
                       {"pass", pass}});
    run.seed = o.seed;
    run.output("report", o.out);
    run.write_manifest(o.out);
  }
  if (!pass) run.err << "error: analytic gradients disagree with finite differences\n";
  return pass ? kExitOk : kExitDegenerate;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-view localization: BEV projection, correlation flow, weighted pose solving "
               "and evaluation.",
               "cvloc"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);
  app.footer("Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 numerical degeneracy.");

  ProjectOpts po;
  auto* project = app.add_subcommand("project", "Project ground-view features onto the BEV grid");
  project->add_option("--features", po.features, "Ground feature map (CVFM) at the feature stride")->required();
  project->add_option("--camera", po.camera, "Camera JSON: fx, fy, cx, cy, image_h, image_w, R[9], t[3]")->required();
  project->add_option("--grid", po.grid, "Grid JSON: size, meters_per_pixel, height_m, anchor[2], preset")->required();
  project->add_option("--stride", po.stride, "Feature stride in image pixels")->capture_default_str()->check(CLI::PositiveNumber);
  project->add_option("--out", po.out, "Projected BEV features (CVFM)")->required();
  project->add_option("--mask-out", po.mask_out, "Visibility mask (CVFM); default <out>.mask.cvfm");

  RefineOpts ro;
  auto* refine = app.add_subcommand("refine", "Apply the BEV refinement block");
  refine->add_option("--bev", ro.bev, "Projected BEV features (CVFM)")->required();
  refine->add_option("--weights", ro.weights, "Refinement weights (CVWT)")->required();
  refine->add_option("--out", ro.out, "Refined BEV features (CVFM)")->required();

  FlowOpts fo;
  auto* flow = app.add_subcommand("flow", "Estimate BEV-to-satellite flow");
  flow->add_option("--source", fo.source, "BEV feature map (CVFM)")->required();
  flow->add_option("--target", fo.target, "Satellite feature map (CVFM)")->required();
  flow->add_option("--visibility", fo.visibility, "BEV visibility mask (CVFM); default all visible");
  flow->add_option("--operator", fo.op, "Update operator")->capture_default_str()->check(CLI::IsMember({"argmax", "gru"}));
  flow->add_option("--iters", fo.iters, "Update iterations")->capture_default_str()->check(CLI::PositiveNumber);
  flow->add_option("--levels", fo.levels, "Correlation pyramid levels")->capture_default_str()->check(CLI::PositiveNumber);
  flow->add_option("--temperature", fo.temperature, "Softmax temperature of the argmax score")->capture_default_str()->check(CLI::PositiveNumber);
  flow->add_option("--weights", fo.weights, "GRU weights (CVWT), required with --operator gru");
  flow->add_option("--context", fo.context, "GRU context features (CVFM)");
  flow->add_option("--radius", fo.radius, "GRU correlation lookup radius")->capture_default_str();
  flow->add_option("--out", fo.out, "Final flow field (CVFL)")->required();
  flow->add_option("--trace-prefix", fo.trace_prefix, "Also write every iterate as <prefix>_NN.cvfl");

  GtFlowOpts go;
  auto* gtflow = app.add_subcommand("gtflow", "Ground-truth flow of a known pose");
  gtflow->add_option("--pose", go.pose, "Pose JSON: theta_rad, tu_px, tv_px")->required();
  gtflow->add_option("--grid", go.grid, "Grid JSON")->required();
  gtflow->add_option("--sat-height", go.sat_height, "Satellite map height (px)")->required()->check(CLI::PositiveNumber);
  gtflow->add_option("--sat-width", go.sat_width, "Satellite map width (px)")->required()->check(CLI::PositiveNumber);
  gtflow->add_option("--visibility", go.visibility, "BEV visibility mask (CVFM); default all visible");
  gtflow->add_option("--out", go.out, "Ground-truth flow (CVFL)")->required();

  SolveOpts so;
  auto* solve = app.add_subcommand("solve", "Weighted rigid alignment of BEV and satellite points");
  auto* m_opt = solve->add_option("--matches", so.matches, "Matches CSV with columns px,py,qx,qy,s");
  auto* f_opt = solve->add_option("--flow", so.flow, "Flow field (CVFL); requires --grid");
  m_opt->excludes(f_opt);
  f_opt->excludes(m_opt);
  solve->add_option("--grid", so.grid, "Grid JSON giving the camera anchor and meters per pixel");
  solve->add_option("--method", so.method, "Solver")->capture_default_str()->check(CLI::IsMember({"svd", "closed-form"}));
  solve->add_option("--out", so.out, "Pose JSON; printed to stdout when omitted");

  LossOpts lo;
  auto* loss = app.add_subcommand("loss", "Training loss of a flow trace");
  loss->add_option("--trace", lo.trace, "Flow iterates (CVFL), in order")->required()->expected(1, -1);
  loss->add_option("--gt-flow", lo.gt_flow, "Ground-truth flow (CVFL)")->required();
  loss->add_option("--pred-pose", lo.pred_pose, "Predicted pose JSON")->required();
  loss->add_option("--gt-pose", lo.gt_pose, "Ground-truth pose JSON")->required();
  loss->add_option("--epoch", lo.epoch, "Training epoch (0-based); selects kappa and beta")->capture_default_str();
  loss->add_option("--alpha", lo.alpha, "Confidence loss weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  loss->add_option("--out", lo.out, "Loss JSON; printed to stdout when omitted");

  BenchOpts bo;
  auto* bench = app.add_subcommand("synth-bench", "Seeded synthetic localization benchmark");
  bench->add_option("--trials", bo.trials, "Number of scenes")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--seed", bo.seed, "Base seed")->capture_default_str();
  bench->add_option("--config", bo.config, "Synthetic generator JSON overriding the defaults");
  bench->add_option("--iters", bo.iters, "Flow iterations")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--levels", bo.levels, "Correlation pyramid levels")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--unit", bo.unit, "Distance unit of errors and recalls")->capture_default_str()->check(CLI::IsMember({"m", "px"}));
  bench->add_option("--out", bo.out, "Metrics JSON");

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "Metrics table from predicted and ground-truth poses");
  eval->add_option("--pred", eo.pred, "Predicted poses CSV: id,theta_rad,tu_px,tv_px")->required();
  eval->add_option("--gt", eo.gt, "Ground-truth poses CSV: id,theta_rad,tu_px,tv_px")->required();
  eval->add_option("--grid", eo.grid, "Grid JSON (anchor, meters per pixel); default 64 px at 0.2 m");
  eval->add_option("--unit", eo.unit, "Distance unit")->capture_default_str()->check(CLI::IsMember({"m", "px"}));
  eval->add_option("--out", eo.out, "Metrics JSON");

  GradcheckOpts gco;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference audit of the solver gradients");
  grad->add_option("--seed", gco.seed, "Base seed")->capture_default_str();
  grad->add_option("--n", gco.n, "Matches per set")->capture_default_str()->check(CLI::Range(std::size_t{3}, std::size_t{100000}));
  grad->add_option("--sets", gco.sets, "Number of match sets")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--step", gco.step, "Central difference step")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", gco.tolerance, "Relative tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--out", gco.out, "Report JSON");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Run run(out, err);
  run.args = args;
  try {
    if (*solve && so.matches.empty() && so.flow.empty()) throw UsageError("solve: one of --matches or --flow is required");
    if (*solve && !so.flow.empty() && so.grid.empty()) throw UsageError("solve: --flow requires --grid");
    for (CLI::App* sub : app.get_subcommands()) run.command = sub;
    if (*project) return cmd_project(run, po);
    if (*refine) return cmd_refine(run, ro);
    if (*flow) return cmd_flow(run, fo);
    if (*gtflow) return cmd_gtflow(run, go);
    if (*solve) return cmd_solve(run, so);
    if (*loss) return cmd_loss(run, lo);
    if (*bench) return cmd_synth_bench(run, bo);
    if (*eval) return cmd_eval(run, eo);
    if (*grad) return cmd_gradcheck(run, gco);
    err << "error: no subcommand\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DegenerateError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace cvloc::cli
