#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "woundnerf/camera.hpp"
#include "woundnerf/common.hpp"
#include "woundnerf/image.hpp"
#include "woundnerf/mesh.hpp"

namespace wnf {

// Pinhole projection of a mesh vertex; nullopt marks behind-camera points.
inline std::optional<Camera::Projection> project_vertex(const Camera& cam, const Vec3& v) {
    return cam.project(v);
}

// Per-pixel nearest-triangle camera-space depth via barycentric scanline
// rasterization (screen-space affine interpolation). Misses hold the far
// sentinel. Triangles with any vertex behind the camera are skipped.
struct RasterHit {
    float depth = kDepthMiss;
    int triangle = -1;
    double bary[3] = {0, 0, 0};
};

inline Grid<RasterHit> rasterize(const TriMesh& mesh, const Camera& cam) {
    if (mesh.triangles.empty()) throw std::invalid_argument("cannot rasterize an empty mesh");
    Grid<RasterHit> buf(cam.width, cam.height);
    std::vector<std::optional<Camera::Projection>> proj(mesh.vertices.size());
    for (size_t i = 0; i < mesh.vertices.size(); i++) proj[i] = cam.project(mesh.vertices[i]);
    for (size_t t = 0; t < mesh.triangles.size(); t++) {
        const auto& tri = mesh.triangles[t];
        if (!proj[tri[0]] || !proj[tri[1]] || !proj[tri[2]]) continue;
        const auto& a = *proj[tri[0]];
        const auto& b = *proj[tri[1]];
        const auto& c = *proj[tri[2]];
        double area = (b.col - a.col) * (c.row - a.row) - (b.row - a.row) * (c.col - a.col);
        if (std::abs(area) < 1e-12) continue;
        int r0 = std::max(0, int(std::ceil(std::min({a.row, b.row, c.row}))));
        int r1 = std::min(cam.height - 1, int(std::floor(std::max({a.row, b.row, c.row}))));
        int c0 = std::max(0, int(std::ceil(std::min({a.col, b.col, c.col}))));
        int c1 = std::min(cam.width - 1, int(std::floor(std::max({a.col, b.col, c.col}))));
        for (int r = r0; r <= r1; r++)
            for (int col = c0; col <= c1; col++) {
                double l0 = ((b.col - col) * (c.row - r) - (b.row - r) * (c.col - col)) / area;
                double l1 = ((c.col - col) * (a.row - r) - (c.row - r) * (a.col - col)) / area;
                double l2 = 1.0 - l0 - l1;
                if (l0 < 0 || l1 < 0 || l2 < 0) continue;
                double z = l0 * a.depth + l1 * b.depth + l2 * c.depth;
                RasterHit& hit = buf.at(r, col);
                if (z < hit.depth) {
                    hit.depth = float(z);
                    hit.triangle = int(t);
                    hit.bary[0] = l0;
                    hit.bary[1] = l1;
                    hit.bary[2] = l2;
                }
            }
    }
    return buf;
}

inline DepthImage rasterize_depth(const TriMesh& mesh, const Camera& cam) {
    Grid<RasterHit> buf = rasterize(mesh, cam);
    DepthImage depth(cam.width, cam.height, kDepthMiss);
    for (size_t i = 0; i < buf.size(); i++) depth.data[i] = buf.data[i].depth;
    return depth;
}

struct VertexVote {
    std::array<double, kNumClasses> weight{};
    int contributing_views = 0;

    // Maximal weight, ties toward the lowest class index; no votes => 0.
    uint8_t winner() const {
        if (contributing_views == 0) return 0;
        int best = 0;
        for (int c = 1; c < kNumClasses; c++)
            if (weight[c] > weight[best]) best = c;
        return uint8_t(best);
    }
};

struct FusionConfig {
    double cutoff_deg = 60.0;  // max angle between vertex normal and view direction
    double depth_tol = -1.0;   // <0 => 2 x mean edge length
};

// A view is admissible for a vertex when the vertex projects in front of the
// camera and inside the image, passes the z-buffer occlusion test, and the
// viewing angle is within the cutoff. Its vote is cos(theta) for the class
// read from the mask at the nearest pixel.
inline std::vector<VertexVote> accumulate_votes(const TriMesh& mesh,
                                                const std::vector<Camera>& cameras,
                                                const std::vector<LabeledImage>& masks,
                                                const FusionConfig& cfg) {
    if (cameras.size() != masks.size())
        throw std::invalid_argument("fusion needs one mask per camera");
    if (mesh.normals.size() != mesh.vertices.size())
        throw std::invalid_argument("fusion needs per-vertex normals");
    double depth_tol = cfg.depth_tol >= 0 ? cfg.depth_tol : 2.0 * mesh.mean_edge_length();
    double cos_cutoff = std::cos(deg2rad(cfg.cutoff_deg));
    std::vector<VertexVote> votes(mesh.vertices.size());
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
                if (proj->depth > depth.at(row, col) + depth_tol) continue;  // occluded
                Vec3 to_cam = normalized(cam.position - mesh.vertices[i]);
                double cos_theta = dot(mesh.normals[i], to_cam);
                if (cos_theta < cos_cutoff || cos_theta <= 0) continue;
                votes[i].weight[masks[v].at(row, col)] += cos_theta;
                votes[i].contributing_views++;
            }
        });
    }
    return votes;
}

// Visibility-tested, angle-weighted majority vote per vertex.
inline std::vector<uint8_t> fuse_labels(const TriMesh& mesh, const std::vector<Camera>& cameras,
                                        const std::vector<LabeledImage>& masks,
                                        const FusionConfig& cfg = {}) {
    auto votes = accumulate_votes(mesh, cameras, masks, cfg);
    std::vector<uint8_t> labels(votes.size());
    for (size_t i = 0; i < votes.size(); i++) labels[i] = votes[i].winner();
    return labels;
}

// Renders per-vertex labels into a view: each covered pixel takes the label of
// the hit triangle's nearest vertex by barycentric weight.
inline LabeledImage backproject(const TriMesh& mesh, const Camera& cam, int view_id = -1) {
    if (!mesh.has_labels()) throw std::invalid_argument("backproject needs fused labels");
    Grid<RasterHit> buf = rasterize(mesh, cam);
    LabeledImage out(cam.width, cam.height, 0);
    out.view_id = view_id;
    for (int r = 0; r < cam.height; r++)
        for (int c = 0; c < cam.width; c++) {
            const RasterHit& hit = buf.at(r, c);
            if (hit.triangle < 0) continue;
            const auto& tri = mesh.triangles[hit.triangle];
            int pick = 0;
            if (hit.bary[1] > hit.bary[pick]) pick = 1;
            if (hit.bary[2] > hit.bary[pick]) pick = 2;
            out.at(r, c) = mesh.labels[tri[pick]];
        }
    return out;
}

}  // namespace wnf
