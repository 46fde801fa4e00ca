#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "woundnerf/camera.hpp"
#include "woundnerf/common.hpp"
#include "woundnerf/evalx.hpp"
#include "woundnerf/field.hpp"
#include "woundnerf/fusion.hpp"
#include "woundnerf/io.hpp"
#include "woundnerf/mesh.hpp"
#include "woundnerf/perturb.hpp"
#include "woundnerf/render.hpp"
#include "woundnerf/scene.hpp"
#include "woundnerf/train.hpp"

namespace wnf {

using nlohmann::json;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- configuration

struct ExperimentConfig {
    uint64_t seed = 7;
    std::string out_dir = "out";
    std::vector<std::string> scenes;  // empty = full shipped suite

    CameraRigConfig rig{50, 2.5, 25.0, 70.0, 128, 128, 52.0};
    int eval_count = 5;
    double eval_elevation_lo = 32.0, eval_elevation_hi = 62.0;

    NoiseConfig noise;
    TrainConfig train;
    FieldConfig field;
    FusionConfig fusion;

    int oracle_mesh_resolution = 96;
    int learned_mesh_resolution = 128;
    int perturb_radius = 3;        // erosion-dilation radius and jitter band
    double perturb_flip_prob = 0.5;

    std::vector<std::string> methods = {"2d", "3d2d", "ours", "ours-no-dropout"};
    std::vector<std::string> perturbations = {"erosion-dilation", "jitter", "half-frames"};

    void validate() const {
        if (methods.empty()) throw ConfigError("method list must not be empty");
        if (rig.count < 2 || eval_count < 1) throw ConfigError("need >= 2 train and >= 1 eval views");
        train.validate();
    }
};

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig cfg;
    try {
        cfg.seed = j.value("seed", cfg.seed);
        cfg.out_dir = j.value("out", cfg.out_dir);
        if (j.contains("scenes")) cfg.scenes = j.at("scenes").get<std::vector<std::string>>();
        if (j.contains("cameras")) {
            const json& c = j.at("cameras");
            cfg.rig.count = c.value("train_count", cfg.rig.count);
            cfg.eval_count = c.value("eval_count", cfg.eval_count);
            cfg.rig.orbit_radius = c.value("orbit_radius", cfg.rig.orbit_radius);
            if (c.contains("elevation_deg")) {
                cfg.rig.elevation_lo_deg = c.at("elevation_deg").at(0).get<double>();
                cfg.rig.elevation_hi_deg = c.at("elevation_deg").at(1).get<double>();
            }
            if (c.contains("eval_elevation_deg")) {
                cfg.eval_elevation_lo = c.at("eval_elevation_deg").at(0).get<double>();
                cfg.eval_elevation_hi = c.at("eval_elevation_deg").at(1).get<double>();
            }
            cfg.rig.width = c.value("width", cfg.rig.width);
            cfg.rig.height = c.value("height", cfg.rig.height);
            cfg.rig.fov_deg = c.value("fov_deg", cfg.rig.fov_deg);
        }
        if (j.contains("noise")) {
            const json& n = j.at("noise");
            cfg.noise.morph_radius_max = n.value("morph_radius_max", cfg.noise.morph_radius_max);
            cfg.noise.jitter_band = n.value("jitter_band", cfg.noise.jitter_band);
            cfg.noise.jitter_flip_prob = n.value("jitter_flip_prob", cfg.noise.jitter_flip_prob);
            cfg.noise.blob_flip_prob = n.value("blob_flip_prob", cfg.noise.blob_flip_prob);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            cfg.train.stage1_iters = t.value("stage1_iters", cfg.train.stage1_iters);
            cfg.train.stage2_iters = t.value("stage2_iters", cfg.train.stage2_iters);
            cfg.train.rays_per_batch = t.value("rays_per_batch", cfg.train.rays_per_batch);
            cfg.train.n_samples = t.value("n_samples", cfg.train.n_samples);
            cfg.train.eikonal_points = t.value("eikonal_points", cfg.train.eikonal_points);
            cfg.train.lr_stage1 = t.value("lr_stage1", cfg.train.lr_stage1);
            cfg.train.lr_stage2 = t.value("lr_stage2", cfg.train.lr_stage2);
            cfg.train.lambda_eik = t.value("lambda_eik", cfg.train.lambda_eik);
            cfg.train.rgb_weight = t.value("rgb_weight", cfg.train.rgb_weight);
            cfg.train.semantic_weight = t.value("semantic_weight", cfg.train.semantic_weight);
            std::string space = t.value("semantic_space", std::string("probability"));
            if (space == "probability")
                cfg.train.semantic_space = SemanticSpace::probability;
            else if (space == "logit")
                cfg.train.semantic_space = SemanticSpace::logit;
            else
                throw ConfigError("semantic_space must be 'probability' or 'logit'");
        }
        if (j.contains("field")) {
            const json& f = j.at("field");
            cfg.field.width = f.value("width", cfg.field.width);
            cfg.field.feat_dim = f.value("feat_dim", cfg.field.feat_dim);
            cfg.field.pe_levels_geo = f.value("pe_levels_geo", cfg.field.pe_levels_geo);
            cfg.field.pe_levels_dir = f.value("pe_levels_dir", cfg.field.pe_levels_dir);
            cfg.field.dropout_rate = f.value("dropout_rate", cfg.field.dropout_rate);
            cfg.field.init_inv_std = f.value("init_inv_std", cfg.field.init_inv_std);
        }
        if (j.contains("fusion")) {
            cfg.fusion.cutoff_deg = j.at("fusion").value("cutoff_deg", cfg.fusion.cutoff_deg);
            cfg.fusion.depth_tol = j.at("fusion").value("depth_tol", cfg.fusion.depth_tol);
        }
        cfg.oracle_mesh_resolution = j.value("oracle_mesh_resolution", cfg.oracle_mesh_resolution);
        cfg.learned_mesh_resolution =
            j.value("learned_mesh_resolution", cfg.learned_mesh_resolution);
        cfg.perturb_radius = j.value("perturb_radius", cfg.perturb_radius);
        cfg.perturb_flip_prob = j.value("perturb_flip_prob", cfg.perturb_flip_prob);
        if (j.contains("methods")) cfg.methods = j.at("methods").get<std::vector<std::string>>();
        if (j.contains("perturbations"))
            cfg.perturbations = j.at("perturbations").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad experiment config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

// Reduced configuration for smoke runs and end-to-end determinism checks.
inline ExperimentConfig ci_experiment_config() {
    ExperimentConfig cfg;
    cfg.scenes = {"sphere-single"};
    cfg.rig = {12, 2.5, 25.0, 70.0, 48, 48, 52.0};
    cfg.eval_count = 2;
    cfg.train.stage1_iters = 300;
    cfg.train.stage2_iters = 200;
    cfg.train.rays_per_batch = 256;
    cfg.train.n_samples = 32;
    cfg.train.eikonal_points = 128;
    cfg.oracle_mesh_resolution = 48;
    cfg.learned_mesh_resolution = 48;
    return cfg;
}

// ---------------------------------------------------------------- suite

struct SuiteScene {
    SceneConfig scene;
    NoiseConfig noise;
};

inline std::vector<std::string> suite_scene_names(const ExperimentConfig& cfg) {
    if (!cfg.scenes.empty()) return cfg.scenes;
    return {"sphere-single", "sphere-concentric", "sphere-three", "crater", "sphere-sparse"};
}

// The shipped 5-scene benchmark: single tissue, concentric pair, three+ tissue,
// high-curvature crater, and a sparse/inconsistent-noise variant.
inline SuiteScene suite_scene(const std::string& name, const ExperimentConfig& cfg) {
    SuiteScene s;
    s.noise = cfg.noise;
    SceneConfig& sc = s.scene;
    sc.name = name;
    auto on_sphere = [](double x, double y, double z) {
        Vec3 v = normalized({x, y, z});
        return v;
    };
    if (name == "sphere-single") {
        sc.regions = {{0, kGranulation, on_sphere(0, 0, 1), 0.45}};
    } else if (name == "sphere-concentric" || name == "sphere-sparse") {
        Vec3 c = on_sphere(0.30, 0.20, 0.93);
        sc.regions = {{0, kGranulation, c, 0.55}, {1, kSlough, c, 0.28}};
        if (name == "sphere-sparse") {
            s.noise.blob_flip_prob = 0.35;
            s.noise.morph_radius_max = std::max(s.noise.morph_radius_max, 3);
        }
    } else if (name == "sphere-three") {
        Vec3 a = on_sphere(0, 0, 1);
        Vec3 b = on_sphere(std::sin(1.25), 0, std::cos(1.25));
        Vec3 c = on_sphere(-std::sin(1.25), 0.1, std::cos(1.25));
        sc.regions = {{0, kGranulation, a, 0.55},
                      {1, kSlough, a, 0.28},
                      {2, kNecrotic, b, 0.25},
                      {3, kEpithelia, c, 0.20}};
    } else if (name == "crater") {
        sc.kind = SurfaceKind::plane_crater;
        sc.crater_center = {0, 0, 0.15};
        sc.crater_radius = 0.55;
        sc.smooth_k = 0.1;
        sc.bounds = {{-1.1, -1.1, -0.75}, {1.1, 1.1, 0.45}};
        Vec3 bottom{0, 0, 0.15 - 0.55};
        sc.regions = {{0, kGranulation, bottom, 0.50}, {1, kSlough, bottom, 0.22}};
    } else {
        throw ConfigError("unknown scene: " + name);
    }
    return s;
}

// ---------------------------------------------------------------- paths

inline std::string zero_pad(int v, int digits = 3) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%0*d", digits, v);
    return buf;
}

struct ScenePaths {
    std::string root;

    explicit ScenePaths(const ExperimentConfig& cfg, const std::string& scene)
        : root(cfg.out_dir + "/scenes/" + scene) {}

    std::string scene_json() const { return root + "/scene.json"; }
    std::string cameras_json() const { return root + "/cameras.json"; }
    std::string gt_rgb(const std::string& split, int i) const {
        return root + "/gt/rgb_" + split + "_" + zero_pad(i) + ".png";
    }
    std::string gt_label(const std::string& split, int i) const {
        return root + "/gt/label_" + split + "_" + zero_pad(i) + ".png";
    }
    std::string gt_depth(const std::string& split, int i) const {
        return root + "/gt/depth_" + split + "_" + zero_pad(i) + ".wndf";
    }
    std::string mask(const std::string& variant, const std::string& split, int i) const {
        return root + "/masks/" + variant + "_" + split + "_" + zero_pad(i) + ".png";
    }
    std::string mask_manifest(const std::string& variant) const {
        return root + "/masks/" + variant + "_manifest.json";
    }
    std::string oracle_mesh() const { return root + "/mesh/oracle.ply"; }
    std::string labeled_mesh(const std::string& variant) const {
        return root + "/mesh/ours_" + variant + ".ply";
    }
    std::string checkpoint_stage1() const { return root + "/ckpt/stage1.wnck"; }
    std::string checkpoint_stage2(const std::string& variant, bool dropout) const {
        return root + "/ckpt/stage2_" + variant + (dropout ? "" : "_nodropout") + ".wnck";
    }
    std::string loss_csv(const std::string& which) const {
        return root + "/loss/" + which + ".csv";
    }
    std::string pred(const std::string& method, const std::string& variant,
                     const std::string& split, int i) const {
        return root + "/pred/" + method + "_" + variant + "_" + split + "_" + zero_pad(i) +
               ".png";
    }
    std::string prob(const std::string& variant, int i) const {
        return root + "/prob/ours_" + variant + "_eval_" + zero_pad(i) + ".wndf";
    }
    std::string fusion_report(const std::string& variant) const {
        return root + "/pred/3d2d_" + variant + "_report.json";
    }
};

inline std::string reports_dir(const ExperimentConfig& cfg) { return cfg.out_dir + "/reports"; }

// Mask-supervision variants trained and evaluated per scene.
inline std::vector<std::string> mask_variants(const ExperimentConfig& cfg) {
    std::vector<std::string> v = {"clean", "corrupted"};
    for (const auto& p : cfg.perturbations) v.push_back(p);
    return v;
}

inline bool has_method(const ExperimentConfig& cfg, const std::string& m) {
    for (const auto& x : cfg.methods)
        if (x == m) return true;
    return false;
}

// ---------------------------------------------------------------- serialization helpers

inline json camera_to_json(const Camera& c) {
    json j;
    j["rotation"] = {c.rotation.m[0][0], c.rotation.m[0][1], c.rotation.m[0][2],
                     c.rotation.m[1][0], c.rotation.m[1][1], c.rotation.m[1][2],
                     c.rotation.m[2][0], c.rotation.m[2][1], c.rotation.m[2][2]};
    j["position"] = {c.position.x, c.position.y, c.position.z};
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["width"] = c.width;
    j["height"] = c.height;
    return j;
}

inline Camera camera_from_json(const json& j) {
    Camera c;
    auto r = j.at("rotation");
    for (int i = 0; i < 3; i++)
        for (int k = 0; k < 3; k++) c.rotation.m[i][k] = r.at(i * 3 + k).get<double>();
    c.position = {j.at("position").at(0), j.at("position").at(1), j.at("position").at(2)};
    c.fx = j.at("fx");
    c.fy = j.at("fy");
    c.cx = j.at("cx");
    c.cy = j.at("cy");
    c.width = j.at("width");
    c.height = j.at("height");
    return c;
}

inline json scene_to_json(const SuiteScene& s) {
    json j;
    j["name"] = s.scene.name;
    j["surface"]["kind"] = s.scene.kind == SurfaceKind::sphere ? "sphere" : "plane-crater";
    j["surface"]["sphere_radius"] = s.scene.sphere_radius;
    j["surface"]["crater_center"] = {s.scene.crater_center.x, s.scene.crater_center.y,
                                     s.scene.crater_center.z};
    j["surface"]["crater_radius"] = s.scene.crater_radius;
    j["surface"]["smooth_k"] = s.scene.smooth_k;
    j["bounds"]["lo"] = {s.scene.bounds.lo.x, s.scene.bounds.lo.y, s.scene.bounds.lo.z};
    j["bounds"]["hi"] = {s.scene.bounds.hi.x, s.scene.bounds.hi.y, s.scene.bounds.hi.z};
    for (const auto& r : s.scene.regions)
        j["regions"].push_back({{"id", r.id},
                                {"class", r.class_id},
                                {"center", {r.center.x, r.center.y, r.center.z}},
                                {"radius", r.radius}});
    j["noise"] = {{"morph_radius_max", s.noise.morph_radius_max},
                  {"jitter_band", s.noise.jitter_band},
                  {"jitter_flip_prob", s.noise.jitter_flip_prob},
                  {"blob_flip_prob", s.noise.blob_flip_prob}};
    return j;
}

inline SuiteScene scene_from_json(const json& j) {
    SuiteScene s;
    s.scene.name = j.at("name").get<std::string>();
    std::string kind = j.at("surface").at("kind").get<std::string>();
    s.scene.kind = kind == "sphere" ? SurfaceKind::sphere : SurfaceKind::plane_crater;
    s.scene.sphere_radius = j.at("surface").value("sphere_radius", 1.0);
    if (j.at("surface").contains("crater_center")) {
        auto c = j.at("surface").at("crater_center");
        s.scene.crater_center = {c.at(0), c.at(1), c.at(2)};
    }
    s.scene.crater_radius = j.at("surface").value("crater_radius", 0.55);
    s.scene.smooth_k = j.at("surface").value("smooth_k", 0.1);
    auto lo = j.at("bounds").at("lo");
    auto hi = j.at("bounds").at("hi");
    s.scene.bounds = {{lo.at(0), lo.at(1), lo.at(2)}, {hi.at(0), hi.at(1), hi.at(2)}};
    if (j.contains("regions"))
        for (const auto& r : j.at("regions")) {
            TissueRegion reg;
            reg.id = r.at("id");
            reg.class_id = r.at("class");
            reg.center = {r.at("center").at(0), r.at("center").at(1), r.at("center").at(2)};
            reg.radius = r.at("radius");
            s.scene.regions.push_back(reg);
        }
    s.noise.morph_radius_max = j.at("noise").at("morph_radius_max");
    s.noise.jitter_band = j.at("noise").at("jitter_band");
    s.noise.jitter_flip_prob = j.at("noise").at("jitter_flip_prob");
    s.noise.blob_flip_prob = j.at("noise").at("blob_flip_prob");
    return s;
}

inline void write_json_file(const std::string& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline json read_json_file(const std::string& path) {
    if (!std::filesystem::exists(path)) throw MissingArtifact("missing " + path);
    return json::parse(read_text_file(path));
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows,
                           bool stage1) {
    std::ostringstream out;
    out << (stage1 ? "iteration,total,rgb,eikonal\n" : "iteration,wce\n");
    char buf[128];
    for (const auto& r : rows) {
        if (stage1)
            std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g\n", r.iteration, r.total, r.rgb,
                          r.eikonal);
        else
            std::snprintf(buf, sizeof buf, "%d,%.10g\n", r.iteration, r.wce);
        out << buf;
    }
    write_text_file(path, out.str());
}

// ---------------------------------------------------------------- asset access

struct SceneAssets {
    SuiteScene suite;
    std::vector<Camera> train_cams, eval_cams;

    int n_train() const { return int(train_cams.size()); }
    int n_eval() const { return int(eval_cams.size()); }
};

inline uint64_t scene_seed(const ExperimentConfig& cfg, const std::string& scene) {
    return mix_seed({cfg.seed, hash_str(scene)});
}

// Eval views carry ids >= 10000 so their noise streams never collide with
// training views.
inline int eval_view_id(int i) { return 10000 + i; }

inline SceneAssets load_scene_assets(const ExperimentConfig& cfg, const std::string& scene) {
    ScenePaths paths(cfg, scene);
    SceneAssets a;
    a.suite = scene_from_json(read_json_file(paths.scene_json()));
    json cams = read_json_file(paths.cameras_json());
    for (const auto& c : cams.at("train")) a.train_cams.push_back(camera_from_json(c));
    for (const auto& c : cams.at("eval")) a.eval_cams.push_back(camera_from_json(c));
    return a;
}

inline RgbImage load_rgb(const std::string& path) {
    if (!std::filesystem::exists(path)) throw MissingArtifact("missing " + path);
    auto q = read_rgb_png(path);
    RgbImage img(q.width, q.height);
    for (size_t i = 0; i < q.size(); i++)
        img.data[i] = {q.data[i][0] / 255.0, q.data[i][1] / 255.0, q.data[i][2] / 255.0};
    return img;
}

inline LabeledImage load_mask(const std::string& path, int view_id) {
    if (!std::filesystem::exists(path)) throw MissingArtifact("missing " + path);
    LabeledImage m = read_mask_png(path);
    m.view_id = view_id;
    return m;
}

// Half-frames keeps the evenly strided half of the training views.
inline std::vector<int> half_frame_ids(int n_train) {
    return subsample_indices(n_train, {KeepSpec::Mode::count, (n_train + 1) / 2});
}

// Training mask set for a variant: (view ids, file paths). The clean variant
// reads the ground-truth label images directly.
inline std::vector<std::pair<int, std::string>> train_mask_files(const ExperimentConfig& cfg,
                                                                 const std::string& scene,
                                                                 const std::string& variant,
                                                                 int n_train) {
    ScenePaths paths(cfg, scene);
    std::vector<std::pair<int, std::string>> out;
    if (variant == "half-frames") {
        for (int i : half_frame_ids(n_train)) out.emplace_back(i, paths.mask("corrupted", "train", i));
    } else if (variant == "clean") {
        for (int i = 0; i < n_train; i++) out.emplace_back(i, paths.gt_label("train", i));
    } else {
        for (int i = 0; i < n_train; i++) out.emplace_back(i, paths.mask(variant, "train", i));
    }
    return out;
}

// The "2D" method is the per-view mask itself; half-frames has no 2D row
// because frame count does not change per-frame predictions.
inline std::optional<std::string> eval_mask_variant(const std::string& variant) {
    if (variant == "half-frames") return std::nullopt;
    return variant;
}

// ---------------------------------------------------------------- pipeline commands

inline void cmd_gen(const ExperimentConfig& cfg) {
    for (const auto& name : suite_scene_names(cfg)) {
        SuiteScene suite = suite_scene(name, cfg);
        SyntheticScene scene = make_scene(suite.scene);
        ScenePaths paths(cfg, name);
        for (const char* sub : {"", "/gt", "/masks", "/mesh", "/ckpt", "/loss", "/pred", "/prob"})
            ensure_dir(paths.root + sub);
        uint64_t sseed = scene_seed(cfg, name);

        CameraRigConfig train_rig = cfg.rig;
        CameraRigConfig eval_rig = cfg.rig;
        eval_rig.count = cfg.eval_count;
        eval_rig.elevation_lo_deg = cfg.eval_elevation_lo;
        eval_rig.elevation_hi_deg = cfg.eval_elevation_hi;
        auto train_cams = make_cameras(train_rig, mix_seed({sseed, hash_str("train-cams")}));
        auto eval_cams = make_cameras(eval_rig, mix_seed({sseed, hash_str("eval-cams")}));

        json cams;
        for (const auto& c : train_cams) cams["train"].push_back(camera_to_json(c));
        for (const auto& c : eval_cams) cams["eval"].push_back(camera_to_json(c));
        write_json_file(paths.cameras_json(), cams);
        write_json_file(paths.scene_json(), scene_to_json(suite));

        auto emit_split = [&](const std::string& split, const std::vector<Camera>& list,
                              auto view_id_of) {
            for (size_t i = 0; i < list.size(); i++) {
                int vid = view_id_of(int(i));
                GroundTruthView gt = render_ground_truth(scene, list[i], vid);
                write_rgb_png(paths.gt_rgb(split, int(i)), gt.rgb);
                write_mask_png(paths.gt_label(split, int(i)), gt.label);
                write_depth_wndf(paths.gt_depth(split, int(i)), gt.depth);
                LabeledImage corrupted = corrupt_mask(gt.label, suite.noise, sseed);
                write_mask_png(paths.mask("corrupted", split, int(i)), corrupted);
            }
        };
        emit_split("train", train_cams, [](int i) { return i; });
        emit_split("eval", eval_cams, [](int i) { return eval_view_id(i); });

        TriMesh oracle = marching_cubes([&](const Vec3& p) { return scene.sdf(p); },
                                        scene.bounds(), cfg.oracle_mesh_resolution);
        export_ply(oracle, paths.oracle_mesh());
    }
}

inline void cmd_perturb(const ExperimentConfig& cfg) {
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        uint64_t sseed = scene_seed(cfg, name);
        for (const auto& kind : cfg.perturbations) {
            json manifest;
            manifest["perturbation"] = kind;
            if (kind == "half-frames") {
                manifest["kept_train_views"] = half_frame_ids(assets.n_train());
                write_json_file(paths.mask_manifest(kind), manifest);
                continue;
            }
            uint64_t pseed = mix_seed({sseed, hash_str("perturb-" + kind)});
            manifest["radius"] = cfg.perturb_radius;
            auto apply = [&](const std::string& split, int i, int vid) {
                LabeledImage in = load_mask(paths.mask("corrupted", split, i), vid);
                LabeledImage out;
                json entry = {{"view", vid}, {"seed", pseed}};
                if (kind == "erosion-dilation") {
                    out = erode_dilate(in, cfg.perturb_radius, pseed);
                    entry["branch"] = erode_dilate_is_erosion(vid, pseed) ? "erosion" : "dilation";
                } else if (kind == "jitter") {
                    out = boundary_jitter(in, cfg.perturb_radius, cfg.perturb_flip_prob, pseed);
                    entry["flip_prob"] = cfg.perturb_flip_prob;
                } else {
                    throw ConfigError("unknown perturbation: " + kind);
                }
                write_mask_png(paths.mask(kind, split, i), out);
                manifest["views"].push_back(entry);
            };
            for (int i = 0; i < assets.n_train(); i++) apply("train", i, i);
            for (int i = 0; i < assets.n_eval(); i++) apply("eval", i, eval_view_id(i));
            write_json_file(paths.mask_manifest(kind), manifest);
        }
    }
}

enum class TrainStages { both, stage1_only, stage2_only };

inline void cmd_train(const ExperimentConfig& cfg, TrainStages stages = TrainStages::both) {
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        uint64_t sseed = scene_seed(cfg, name);
        const Aabb& bounds = assets.suite.scene.bounds;

        if (stages != TrainStages::stage2_only) {
            Stage1Data data;
            data.cameras = assets.train_cams;
            for (int i = 0; i < assets.n_train(); i++)
                data.images.push_back(load_rgb(paths.gt_rgb("train", i)));
            data.bounds = bounds;
            data.background = assets.suite.scene.void_color;
            FieldModel model = init_field(cfg.field, mix_seed({sseed, hash_str("init")}));
            TrainConfig tc = cfg.train;
            tc.seed = mix_seed({sseed, hash_str("stage1")});
            auto curve = train_stage1(model, data, tc);
            diff::save_checkpoint(model.store, paths.checkpoint_stage1());
            write_loss_csv(paths.loss_csv("stage1"), curve, true);
        }
        if (stages == TrainStages::stage1_only) continue;
        if (!std::filesystem::exists(paths.checkpoint_stage1()))
            throw MissingArtifact("missing " + paths.checkpoint_stage1() + "; run stage 1 first");

        auto run_stage2 = [&](const std::string& variant, bool dropout) {
            Stage2Data data;
            data.bounds = bounds;
            for (auto [vid, file] : train_mask_files(cfg, name, variant, assets.n_train())) {
                data.cameras.push_back(assets.train_cams[vid]);
                data.masks.push_back(load_mask(file, vid));
            }
            FieldModel model;
            model.cfg = cfg.field;
            model.store = diff::load_checkpoint(paths.checkpoint_stage1());
            TrainConfig tc = cfg.train;
            tc.dropout = dropout;
            tc.seed = mix_seed({sseed, hash_str("stage2-" + variant), dropout ? 1ull : 0ull});
            auto curve = train_stage2(model, data, tc);
            diff::save_checkpoint(model.store, paths.checkpoint_stage2(variant, dropout));
            write_loss_csv(paths.loss_csv("stage2_" + variant + (dropout ? "" : "_nodropout")),
                           curve, false);
        };
        for (const auto& variant : mask_variants(cfg)) run_stage2(variant, true);
        if (has_method(cfg, "ours-no-dropout")) run_stage2("corrupted", false);
    }
}

inline FieldModel load_field(const ExperimentConfig& cfg, const std::string& ckpt) {
    if (!std::filesystem::exists(ckpt)) throw MissingArtifact("missing " + ckpt);
    FieldModel model;
    model.cfg = cfg.field;
    model.store = diff::load_checkpoint(ckpt);
    return model;
}

inline void cmd_render(const ExperimentConfig& cfg) {
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        RenderOptions opt;
        opt.n_samples = cfg.train.n_samples;
        opt.semantic_space = cfg.train.semantic_space;
        opt.background = assets.suite.scene.void_color;
        const Aabb& bounds = assets.suite.scene.bounds;

        auto render_views = [&](FieldModel& model, const std::string& method,
                                const std::string& variant, const std::string& split,
                                const std::vector<Camera>& cams, bool with_prob) {
            for (size_t i = 0; i < cams.size(); i++) {
                RenderedView view = render_image(model, cams[i], bounds, opt);
                view.label.view_id = split == "train" ? int(i) : eval_view_id(int(i));
                write_mask_png(paths.pred(method, variant, split, int(i)), view.label);
                if (with_prob) write_prob_wndf(paths.prob(variant, int(i)), view.prob);
            }
        };
        for (const auto& variant : mask_variants(cfg)) {
            FieldModel model = load_field(cfg, paths.checkpoint_stage2(variant, true));
            render_views(model, "ours", variant, "eval", assets.eval_cams, true);
            if (variant == "corrupted")
                render_views(model, "ours", variant, "train", assets.train_cams, false);
        }
        if (has_method(cfg, "ours-no-dropout")) {
            FieldModel model = load_field(cfg, paths.checkpoint_stage2("corrupted", false));
            render_views(model, "ours-no-dropout", "corrupted", "eval", assets.eval_cams, false);
        }
    }
}

inline void cmd_fuse(const ExperimentConfig& cfg) {
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        if (!std::filesystem::exists(paths.oracle_mesh()))
            throw MissingArtifact("missing " + paths.oracle_mesh());
        TriMesh mesh = import_ply(paths.oracle_mesh());
        std::vector<std::string> variants = {"corrupted"};
        for (const auto& p : cfg.perturbations) variants.push_back(p);
        for (const auto& variant : variants) {
            std::vector<Camera> cams;
            std::vector<LabeledImage> masks;
            for (auto [vid, file] : train_mask_files(cfg, name, variant, assets.n_train())) {
                cams.push_back(assets.train_cams[vid]);
                masks.push_back(load_mask(file, vid));
            }
            auto votes = accumulate_votes(mesh, cams, masks, cfg.fusion);
            TriMesh labeled = mesh;
            labeled.labels.resize(votes.size());
            std::array<int64_t, kNumClasses> histogram{};
            int64_t orphan = 0, view_total = 0;
            for (size_t i = 0; i < votes.size(); i++) {
                labeled.labels[i] = votes[i].winner();
                histogram[labeled.labels[i]]++;
                view_total += votes[i].contributing_views;
                if (votes[i].contributing_views == 0) orphan++;
            }
            for (size_t i = 0; i < assets.eval_cams.size(); i++) {
                LabeledImage bp = backproject(labeled, assets.eval_cams[i], eval_view_id(int(i)));
                write_mask_png(paths.pred("3d2d", variant, "eval", int(i)), bp);
            }
            json report;
            report["variant"] = variant;
            report["vertex_count"] = labeled.labels.size();
            for (int c = 0; c < kNumClasses; c++) report["label_histogram"][class_name(c)] = histogram[c];
            report["vertices_without_admissible_view"] = orphan;
            report["mean_admissible_views_per_vertex"] =
                double(view_total) / double(votes.size());
            write_json_file(paths.fusion_report(variant), report);
        }
    }
}

inline void cmd_mesh(const ExperimentConfig& cfg) {
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        for (const std::string variant : {"clean", "corrupted"}) {
            FieldModel model = load_field(cfg, paths.checkpoint_stage2(variant, true));
            TriMesh mesh = marching_cubes(field_sdf(model), assets.suite.scene.bounds,
                                          cfg.learned_mesh_resolution);
            label_mesh(model, mesh);
            export_ply(mesh, paths.labeled_mesh(variant));
        }
    }
}

// ---------------------------------------------------------------- evaluation

struct SceneEval {
    std::vector<LabeledImage> gt_eval;
    std::set<int> classes_present;  // tissue classes in the eval ground truth
};

inline SceneEval load_scene_eval(const ExperimentConfig& cfg, const std::string& name,
                                 int n_eval) {
    ScenePaths paths(cfg, name);
    SceneEval ev;
    for (int i = 0; i < n_eval; i++) {
        ev.gt_eval.push_back(load_mask(paths.gt_label("eval", i), eval_view_id(i)));
        for (uint8_t v : ev.gt_eval.back().labels)
            if (v >= 1) ev.classes_present.insert(v);
    }
    return ev;
}

// Mean per-view metric over the eval views; recall skips views whose GT lacks
// the class.
inline std::optional<MetricSample> eval_method_class(
    const std::vector<LabeledImage>& preds, const std::vector<LabeledImage>& gts, int class_id,
    const std::string& method, const std::string& scene) {
    double dsc_acc = 0, rec_acc = 0;
    int dsc_n = 0, rec_n = 0;
    for (size_t i = 0; i < preds.size(); i++) {
        auto pred_bin = class_binarize(preds[i], class_id);
        auto gt_bin = class_binarize(gts[i], class_id);
        dsc_acc += dsc_binary(pred_bin, gt_bin);
        dsc_n++;
        int64_t g = 0;
        for (uint8_t v : gt_bin.data) g += v;
        if (g > 0) {
            rec_acc += recall_binary(pred_bin, gt_bin);
            rec_n++;
        }
    }
    if (rec_n == 0) return std::nullopt;  // class absent in this scene's GT
    MetricSample s;
    s.method = method;
    s.scene = scene;
    s.class_id = class_id;
    s.dsc = dsc_acc / dsc_n;
    s.recall = rec_acc / rec_n;
    return s;
}

inline std::vector<LabeledImage> load_predictions(const ExperimentConfig& cfg,
                                                  const std::string& scene,
                                                  const std::string& method,
                                                  const std::string& variant, int n_eval) {
    ScenePaths paths(cfg, scene);
    std::vector<LabeledImage> preds;
    for (int i = 0; i < n_eval; i++) {
        std::string file = method == "2d" ? paths.mask(variant, "eval", i)
                                          : paths.pred(method, variant, "eval", i);
        if (!std::filesystem::exists(file))
            throw MissingArtifact("missing prediction for method " + method + " view " +
                                  std::to_string(i) + ": " + file);
        preds.push_back(load_mask(file, eval_view_id(i)));
    }
    return preds;
}

inline json metric_rows_json(const std::vector<MetricRow>& rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"method", r.method},
                       {"class", r.class_label},
                       {"dsc", r.dsc},
                       {"recall", r.recall},
                       {"population", r.population}});
    return out;
}

inline void cmd_eval(const ExperimentConfig& cfg) {
    ensure_dir(reports_dir(cfg));
    std::vector<MetricSample> accuracy, clean_rows;
    std::map<std::string, std::vector<MetricSample>> robustness;  // perturbation -> samples
    json consistency = json::array();

    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        SceneAssets assets = load_scene_assets(cfg, name);
        SceneEval ev = load_scene_eval(cfg, name, assets.n_eval());
        std::vector<int> class_ids = {kWoundBedClass};
        for (int c : ev.classes_present) class_ids.push_back(c);

        auto add_samples = [&](std::vector<MetricSample>& sink, const std::string& method,
                               const std::string& variant, bool all_classes) {
            auto preds = load_predictions(cfg, name, method, variant, assets.n_eval());
            for (int cls : class_ids) {
                if (!all_classes && cls != kWoundBedClass) continue;
                auto s = eval_method_class(preds, ev.gt_eval, cls, method, name);
                if (s) sink.push_back(*s);
            }
        };

        // Table-1-style accuracy on the default corrupted masks.
        for (const auto& method : cfg.methods)
            add_samples(accuracy, method, "corrupted", true);
        // Clean-supervision ceiling.
        if (has_method(cfg, "ours")) add_samples(clean_rows, "ours", "clean", true);
        // Table-2-style robustness, wound bed only.
        for (const auto& kind : cfg.perturbations) {
            auto& sink = robustness[kind];
            if (eval_mask_variant(kind) && has_method(cfg, "2d"))
                add_samples(sink, "2d", kind, false);
            if (has_method(cfg, "3d2d")) add_samples(sink, "3d2d", kind, false);
            if (has_method(cfg, "ours")) add_samples(sink, "ours", kind, false);
        }

        // Fig. 1-style view consistency on training views (corrupted variant).
        if (has_method(cfg, "ours")) {
            TriMesh mesh = import_ply(paths.oracle_mesh());
            std::vector<LabeledImage> corrupted, ours;
            for (int i = 0; i < assets.n_train(); i++) {
                corrupted.push_back(load_mask(paths.mask("corrupted", "train", i), i));
                ours.push_back(load_mask(paths.pred("ours", "corrupted", "train", i), i));
            }
            double c_masks = view_consistency(corrupted, assets.train_cams, mesh, cfg.fusion);
            double c_ours = view_consistency(ours, assets.train_cams, mesh, cfg.fusion);
            consistency.push_back({{"scene", name},
                                   {"corrupted_masks", c_masks},
                                   {"ours_renderings", c_ours}});
        }
    }

    auto dump_table = [&](const std::string& base, const std::vector<MetricSample>& samples,
                          const std::vector<std::string>& order) {
        auto rows = metrics_table(samples, order);
        write_text_file(reports_dir(cfg) + "/" + base + ".csv", metrics_csv(rows));
        write_json_file(reports_dir(cfg) + "/" + base + ".json", metric_rows_json(rows));
    };
    dump_table("accuracy", accuracy, cfg.methods);
    if (!clean_rows.empty()) dump_table("clean", clean_rows, {"ours"});

    json robust_json = json::array();
    std::ostringstream robust_csv;
    robust_csv << "perturbation,method,class,dsc,recall,population\n";
    for (const auto& kind : cfg.perturbations) {
        auto rows = metrics_table(robustness[kind], cfg.methods);
        for (const auto& r : rows) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.dsc, r.recall);
            robust_csv << kind << ',' << r.method << ',' << r.class_label << ',' << buf << ','
                       << r.population << '\n';
            robust_json.push_back({{"perturbation", kind},
                                   {"method", r.method},
                                   {"class", r.class_label},
                                   {"dsc", r.dsc},
                                   {"recall", r.recall},
                                   {"population", r.population}});
        }
    }
    write_text_file(reports_dir(cfg) + "/robustness.csv", robust_csv.str());
    write_json_file(reports_dir(cfg) + "/robustness.json", robust_json);
    write_json_file(reports_dir(cfg) + "/consistency.json", consistency);
    std::ostringstream ccsv;
    ccsv << "scene,corrupted_masks,ours_renderings\n";
    for (const auto& row : consistency) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f,%.6f",
                      row.at("corrupted_masks").get<double>(),
                      row.at("ours_renderings").get<double>());
        ccsv << row.at("scene").get<std::string>() << ',' << buf << '\n';
    }
    write_text_file(reports_dir(cfg) + "/consistency.csv", ccsv.str());
}

// GT | 2D | 3D/2D | Ours panels for the first eval view of each scene.
inline void cmd_report(const ExperimentConfig& cfg) {
    ensure_dir(reports_dir(cfg));
    auto palette = label_palette();
    for (const auto& name : suite_scene_names(cfg)) {
        ScenePaths paths(cfg, name);
        std::vector<std::string> files = {
            paths.gt_label("eval", 0), paths.mask("corrupted", "eval", 0),
            paths.pred("3d2d", "corrupted", "eval", 0), paths.pred("ours", "corrupted", "eval", 0)};
        std::vector<LabeledImage> panels;
        for (const auto& f : files) panels.push_back(load_mask(f, 0));
        int w = panels[0].width, h = panels[0].height;
        Grid<std::array<uint8_t, 3>> montage(w * int(panels.size()), h);
        for (size_t p = 0; p < panels.size(); p++)
            for (int r = 0; r < h; r++)
                for (int c = 0; c < w; c++)
                    montage.at(r, int(p) * w + c) = palette[panels[p].at(r, c)];
        write_rgb_png(reports_dir(cfg) + "/montage_" + name + ".png", montage);
    }
    // Plain-text summary of the report tables.
    std::ostringstream text;
    for (const std::string base : {"accuracy", "clean", "robustness", "consistency"}) {
        std::string file = reports_dir(cfg) + "/" + base + ".csv";
        if (!std::filesystem::exists(file)) continue;
        text << "== " << base << " ==\n" << read_text_file(file) << "\n";
    }
    write_text_file(reports_dir(cfg) + "/summary.txt", text.str());
}

inline void cmd_all(const ExperimentConfig& cfg) {
    cmd_gen(cfg);
    cmd_perturb(cfg);
    cmd_train(cfg);
    cmd_render(cfg);
    cmd_fuse(cfg);
    cmd_mesh(cfg);
    cmd_eval(cfg);
    cmd_report(cfg);
}

}  // namespace wnf
