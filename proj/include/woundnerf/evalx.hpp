#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "woundnerf/camera.hpp"
#include "woundnerf/fusion.hpp"
#include "woundnerf/image.hpp"
#include "woundnerf/mesh.hpp"

namespace wnf {

// Pseudo class id for the aggregated wound-bed region (labels 1..5).
constexpr int kWoundBedClass = -1;

inline Grid<uint8_t> wound_bed_binarize(const LabeledImage& mask) {
    Grid<uint8_t> out(mask.width, mask.height, 0);
    for (size_t i = 0; i < mask.size(); i++) out.data[i] = mask.labels[i] >= 1 ? 1 : 0;
    return out;
}

inline Grid<uint8_t> class_binarize(const LabeledImage& mask, int class_id) {
    if (class_id == kWoundBedClass) return wound_bed_binarize(mask);
    if (class_id < 0 || class_id >= kNumClasses) throw std::invalid_argument("bad class id");
    Grid<uint8_t> out(mask.width, mask.height, 0);
    for (size_t i = 0; i < mask.size(); i++) out.data[i] = mask.labels[i] == class_id ? 1 : 0;
    return out;
}

// 2|P∩G| / (|P|+|G|); both-empty convention defaults to 1.
inline double dsc_binary(const Grid<uint8_t>& pred, const Grid<uint8_t>& gt,
                         double both_empty = 1.0) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("dsc size mismatch");
    int64_t inter = 0, p = 0, g = 0;
    for (size_t i = 0; i < pred.size(); i++) {
        p += pred.data[i] != 0;
        g += gt.data[i] != 0;
        inter += (pred.data[i] != 0) && (gt.data[i] != 0);
    }
    if (p + g == 0) return both_empty;
    return 2.0 * double(inter) / double(p + g);
}

inline double dsc(const LabeledImage& pred, const LabeledImage& gt, int class_id,
                  double both_empty = 1.0) {
    return dsc_binary(class_binarize(pred, class_id), class_binarize(gt, class_id), both_empty);
}

inline double recall_binary(const Grid<uint8_t>& pred, const Grid<uint8_t>& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("recall size mismatch");
    int64_t inter = 0, g = 0;
    for (size_t i = 0; i < pred.size(); i++) {
        g += gt.data[i] != 0;
        inter += (pred.data[i] != 0) && (gt.data[i] != 0);
    }
    if (g == 0) throw std::invalid_argument("recall undefined for empty ground truth");
    return double(inter) / double(g);
}

inline double recall(const LabeledImage& pred, const LabeledImage& gt, int class_id) {
    return recall_binary(class_binarize(pred, class_id), class_binarize(gt, class_id));
}

// ---------------------------------------------------------------- view consistency

// Lifts each view's wound-bed mask onto the mesh using the fusion module's
// per-view admissibility (projection, z-buffer visibility, viewing-angle
// cutoff) but no voting. Over vertices covered by >= 2 views, returns
// |wound in every covering view| / |wound in at least one|; 1 when the union
// is empty (no disagreement possible).
inline double view_consistency(const std::vector<LabeledImage>& masks,
                               const std::vector<Camera>& cameras, const TriMesh& mesh,
                               const FusionConfig& cfg = {}) {
    if (masks.size() < 2 || masks.size() != cameras.size())
        throw std::invalid_argument("view_consistency needs >= 2 views with cameras");
    double depth_tol = cfg.depth_tol >= 0 ? cfg.depth_tol : 2.0 * mesh.mean_edge_length();
    double cos_cutoff = std::cos(deg2rad(cfg.cutoff_deg));
    std::vector<int> covered(mesh.vertices.size(), 0);
    std::vector<int> wound(mesh.vertices.size(), 0);
    for (size_t v = 0; v < cameras.size(); v++) {
        const Camera& cam = cameras[v];
        DepthImage depth = rasterize_depth(mesh, cam);
        parallel_for(int64_t(mesh.vertices.size()), [&](int64_t a, int64_t b) {
            for (int64_t i = a; i < b; i++) {
                auto proj = cam.project(mesh.vertices[i]);
                if (!proj) continue;
                int row = int(std::lround(proj->row));
                int col = int(std::lround(proj->col));
                if (!depth.in_bounds(row, col)) continue;
                if (proj->depth > depth.at(row, col) + depth_tol) continue;
                double cos_theta =
                    dot(mesh.normals[i], normalized(cam.position - mesh.vertices[i]));
                if (cos_theta < cos_cutoff || cos_theta <= 0) continue;
                covered[i]++;
                if (masks[v].at(row, col) >= 1) wound[i]++;
            }
        });
    }
    int64_t all = 0, any = 0;
    for (size_t i = 0; i < mesh.vertices.size(); i++) {
        if (covered[i] < 2 || wound[i] == 0) continue;
        any++;
        if (wound[i] == covered[i]) all++;
    }
    return any == 0 ? 1.0 : double(all) / double(any);
}

// ---------------------------------------------------------------- aggregation

struct MetricSample {
    std::string method;
    std::string scene;
    int class_id = kWoundBedClass;
    double dsc = 0, recall = 0;
};

struct MetricRow {
    std::string method;
    std::string class_label;
    double dsc = 0, recall = 0;
    int population = 0;  // scenes where the class is present in GT
};

inline std::string metric_class_label(int class_id) {
    return class_id == kWoundBedClass ? "wound_bed" : class_name(class_id);
}

// Unweighted per-class means over the scenes that contain the class; rows are
// method-major in the given order, classes ordered wound-bed first.
inline std::vector<MetricRow> metrics_table(const std::vector<MetricSample>& samples,
                                            const std::vector<std::string>& method_order) {
    std::vector<int> class_order = {kWoundBedClass, 1, 2, 3, 4, 5};
    std::vector<MetricRow> rows;
    for (const auto& method : method_order)
        for (int cls : class_order) {
            MetricRow row;
            row.method = method;
            row.class_label = metric_class_label(cls);
            for (const auto& s : samples) {
                if (s.method != method || s.class_id != cls) continue;
                row.dsc += s.dsc;
                row.recall += s.recall;
                row.population++;
            }
            if (row.population == 0) continue;  // class absent everywhere: omit
            row.dsc /= row.population;
            row.recall /= row.population;
            rows.push_back(row);
        }
    return rows;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream out;
    out << "method,class,dsc,recall,population\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.dsc, r.recall);
        out << r.method << ',' << r.class_label << ',' << buf << ',' << r.population << '\n';
    }
    return out.str();
}

}  // namespace wnf
