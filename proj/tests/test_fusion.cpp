#include <catch2/catch_amalgamated.hpp>

#include "woundnerf/evalx.hpp"
#include "woundnerf/fusion.hpp"
#include "woundnerf/scene.hpp"

using namespace wnf;

namespace {

double sphere_sdf(const Vec3& p) { return norm(p) - 1.0; }
const Aabb kBounds{{-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2}};

Camera top_camera(double dist = 2.5, int res = 64) {
    CameraRigConfig rig{1, dist, 90.0, 90.0, res, res, 52.0};
    return make_cameras(rig, 1)[0];
}

// Literal restatement of the admissibility and voting rules, kept separate
// from the implementation it cross-checks.
std::vector<uint8_t> fuse_reference(const TriMesh& mesh, const std::vector<Camera>& cams,
                                    const std::vector<LabeledImage>& masks, double cutoff_deg,
                                    double depth_tol) {
    std::vector<uint8_t> out(mesh.vertices.size(), 0);
    for (size_t i = 0; i < mesh.vertices.size(); i++) {
        double weight[kNumClasses] = {0, 0, 0, 0, 0, 0};
        int views = 0;
        for (size_t v = 0; v < cams.size(); v++) {
            const Camera& cam = cams[v];
            DepthImage depth = rasterize_depth(mesh, cam);
            Vec3 rel = mesh.vertices[i] - cam.position;
            Vec3 pc = cam.rotation.transposed() * rel;
            if (pc.z <= 0) continue;
            double col = cam.fx * pc.x / pc.z + cam.cx - 0.5;
            double row = cam.fy * pc.y / pc.z + cam.cy - 0.5;
            int pr = int(std::lround(row)), pcx = int(std::lround(col));
            if (pr < 0 || pr >= cam.height || pcx < 0 || pcx >= cam.width) continue;
            if (pc.z > depth.at(pr, pcx) + depth_tol) continue;
            Vec3 to_cam = normalized(cam.position - mesh.vertices[i]);
            double cos_theta = dot(mesh.normals[i], to_cam);
            if (cos_theta <= 0 || std::acos(std::clamp(cos_theta, -1.0, 1.0)) >
                                      deg2rad(cutoff_deg))
                continue;
            weight[masks[v].at(pr, pcx)] += cos_theta;
            views++;
        }
        if (views == 0) {
            out[i] = 0;
            continue;
        }
        int best = 0;
        for (int c = 1; c < kNumClasses; c++)
            if (weight[c] > weight[best]) best = c;
        out[i] = uint8_t(best);
    }
    return out;
}

}  // namespace

TEST_CASE("project_vertex") {
    Camera cam = top_camera();
    SECTION("look-at target lands on the principal point") {
        auto proj = project_vertex(cam, {0, 0, 0});
        REQUIRE(proj.has_value());
        REQUIRE(std::abs(proj->row - (cam.cy - 0.5)) < 1e-6);
        REQUIRE(std::abs(proj->col - (cam.cx - 0.5)) < 1e-6);
        REQUIRE(proj->depth == Catch::Approx(2.5));
    }
    SECTION("points behind the camera are marked") {
        REQUIRE_FALSE(project_vertex(cam, {0, 0, 5}).has_value());
        REQUIRE_FALSE(project_vertex(cam, cam.position).has_value());
    }
    SECTION("walking the depth along the pixel ray recovers the vertex") {
        Rng rng(5);
        for (int i = 0; i < 50; i++) {
            Vec3 v{rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
            auto proj = project_vertex(cam, v);
            REQUIRE(proj.has_value());
            Vec3 dir_cam{(proj->col + 0.5 - cam.cx) / cam.fx,
                         (proj->row + 0.5 - cam.cy) / cam.fy, 1.0};
            Vec3 rec = cam.position + cam.rotation * (dir_cam * proj->depth);
            REQUIRE(norm(rec - v) < 1e-6);
        }
    }
}

TEST_CASE("rasterize_depth") {
    Camera cam = top_camera();
    SECTION("single full-frame triangle leaves no sentinel") {
        TriMesh tri;
        tri.vertices = {{-5, -5, 0.5}, {5, -5, 0.5}, {0, 8, 0.5}};
        tri.triangles = {{0, 1, 2}};
        tri.normals = {{0, 0, 1}, {0, 0, 1}, {0, 0, 1}};
        DepthImage depth = rasterize_depth(tri, cam);
        for (float d : depth.data) REQUIRE(d == Catch::Approx(2.0).margin(1e-6));
    }
    SECTION("uncovered pixels keep the sentinel; sphere center depth is d - r") {
        TriMesh mesh = marching_cubes(sphere_sdf, kBounds, 64);
        DepthImage depth = rasterize_depth(mesh, cam);
        REQUIRE(depth.at(0, 0) == kDepthMiss);
        REQUIRE(std::abs(depth.at(32, 32) - 1.5) < 2.0 / 64);
    }
    SECTION("empty mesh is rejected") {
        TriMesh empty;
        REQUIRE_THROWS_AS(rasterize_depth(empty, cam), std::invalid_argument);
    }
}

TEST_CASE("vertex votes and winners") {
    VertexVote vote;
    REQUIRE(vote.winner() == 0);  // no admissible views
    vote.contributing_views = 3;
    vote.weight[1] = 0.9;
    vote.weight[2] = 0.5 + 0.5;
    REQUIRE(vote.winner() == 2);  // 1.0 beats 0.9
    vote.weight[1] = 1.0;
    REQUIRE(vote.winner() == 1);  // exact tie breaks to the lower index
}

TEST_CASE("fuse_labels") {
    SceneConfig scfg;
    scfg.regions = {{0, kGranulation, {0, 0, 1}, 0.5}};
    SyntheticScene scene(scfg);
    TriMesh mesh = marching_cubes([&](const Vec3& p) { return scene.sdf(p); }, kBounds, 48);
    Camera cam = top_camera(2.5, 128);
    LabeledImage mask = render_ground_truth(scene, cam, 0).label;

    SECTION("single view: visible vertices take the mask label under them") {
        auto labels = fuse_labels(mesh, {cam}, {mask}, {60.0, -1.0});
        int checked = 0;
        for (size_t i = 0; i < mesh.vertices.size(); i++) {
            const Vec3& v = mesh.vertices[i];
            if (v.z < 0.75) continue;  // stay where the view is fully frontal
            auto proj = cam.project(v);
            REQUIRE(proj.has_value());
            uint8_t want = mask.at(int(std::lround(proj->row)), int(std::lround(proj->col)));
            REQUIRE(labels[i] == want);
            checked++;
        }
        REQUIRE(checked > 50);
    }
    SECTION("zero angular cutoff admits nothing") {
        // Off-axis camera so no vertex normal aligns with the view exactly.
        CameraRigConfig rig{1, 2.5, 53.0, 53.0, 128, 128, 52.0};
        Camera off_axis = make_cameras(rig, 11)[0];
        LabeledImage off_mask = render_ground_truth(scene, off_axis, 0).label;
        auto labels = fuse_labels(mesh, {off_axis}, {off_mask}, {0.0, -1.0});
        for (uint8_t l : labels) REQUIRE(l == 0);
    }
    SECTION("occlusion: far-side vertices get no votes from a near-side camera") {
        auto votes = accumulate_votes(mesh, {cam}, {mask}, {89.0, -1.0});
        for (size_t i = 0; i < mesh.vertices.size(); i++)
            if (mesh.vertices[i].z < -0.2) REQUIRE(votes[i].contributing_views == 0);
    }
    SECTION("mask/camera count mismatch is an error") {
        REQUIRE_THROWS_AS(fuse_labels(mesh, {cam}, {}, {}), std::invalid_argument);
    }
}

TEST_CASE("fuse_labels matches the exhaustive reference on tiny instances") {
    Rng rng(17);
    const Aabb coarse{{-1.35, -1.35, -1.35}, {1.35, 1.35, 1.35}};
    for (int instance = 0; instance < 25; instance++) {
        TriMesh mesh = marching_cubes(sphere_sdf, coarse, 8);
        REQUIRE(mesh.vertices.size() <= 200);
        int n_views = 1 + int(rng.uniform_int(0, 2));
        CameraRigConfig rig{n_views, 2.5, 15.0, 85.0, 8, 8, 52.0};
        auto cams = make_cameras(rig, rng.next_u64());
        std::vector<LabeledImage> masks;
        for (int v = 0; v < n_views; v++) {
            LabeledImage m(8, 8);
            m.view_id = v;
            for (auto& px : m.labels) px = uint8_t(rng.uniform_int(0, 5));
            masks.push_back(m);
        }
        double cutoff = rng.uniform(20, 85);
        double tol = rng.uniform(0.01, 0.2);
        auto got = fuse_labels(mesh, cams, masks, {cutoff, tol});
        auto want = fuse_reference(mesh, cams, masks, cutoff, tol);
        REQUIRE(got == want);
    }
}

TEST_CASE("vote weight grows as the viewing angle shrinks") {
    TriMesh patch;
    patch.vertices = {{0, 0, 0}, {0.2, 0, 0}, {0, 0.2, 0}};
    patch.triangles = {{0, 1, 2}};
    patch.normals = {{0, 0, 1}, {0, 0, 1}, {0, 0, 1}};
    LabeledImage mask(64, 64, kSlough);
    mask.view_id = 0;
    double prev = -1;
    for (double elev : {40.0, 60.0, 80.0, 90.0}) {
        CameraRigConfig rig{1, 2.5, elev, elev, 64, 64, 52.0};
        Camera cam = make_cameras(rig, 2)[0];
        auto votes = accumulate_votes(patch, {cam}, {mask}, {89.9, 1.0});
        REQUIRE(votes[0].weight[kSlough] > prev);
        prev = votes[0].weight[kSlough];
    }
}

TEST_CASE("backproject") {
    TriMesh mesh = marching_cubes(sphere_sdf, kBounds, 48);
    Camera cam = top_camera(2.5, 128);

    SECTION("uniform labels cover exactly the silhouette, radius as projected") {
        mesh.labels.assign(mesh.vertices.size(), kSlough);
        LabeledImage bp = backproject(mesh, cam, 0);
        // silhouette radius in pixels: f * r / sqrt(d^2 - r^2)
        double want_radius = cam.fx * 1.0 / std::sqrt(2.5 * 2.5 - 1.0);
        double cx = cam.cx - 0.5, cy = cam.cy - 0.5;
        for (int r = 0; r < bp.height; r++)
            for (int c = 0; c < bp.width; c++) {
                double dist = std::hypot(r - cy, c - cx);
                if (dist < want_radius - 1.5) REQUIRE(bp.at(r, c) == kSlough);
                if (dist > want_radius + 1.5) REQUIRE(bp.at(r, c) == 0);
            }
    }
    SECTION("fuse then backproject nearly recovers a clean mask") {
        SceneConfig scfg;
        scfg.regions = {{0, kGranulation, {0, 0, 1}, 0.5}};
        SyntheticScene scene(scfg);
        TriMesh smesh =
            marching_cubes([&](const Vec3& p) { return scene.sdf(p); }, kBounds, 96);
        LabeledImage mask = render_ground_truth(scene, cam, 0).label;
        smesh.labels = fuse_labels(smesh, {cam}, {mask}, {75.0, -1.0});
        LabeledImage rec = backproject(smesh, cam, 0);
        int64_t inter = 0, p = 0, g = 0;
        for (size_t i = 0; i < rec.size(); i++) {
            if (rec.labels[i] == 0 && mask.labels[i] == 0) continue;
            bool pw = rec.labels[i] >= 1, gw = mask.labels[i] >= 1;
            p += pw;
            g += gw;
            inter += pw && gw;
        }
        double dsc_val = 2.0 * double(inter) / double(p + g);
        REQUIRE(dsc_val >= 0.98);
    }
    SECTION("labels are required") {
        TriMesh unlabeled = marching_cubes(sphere_sdf, kBounds, 16);
        REQUIRE_THROWS_AS(backproject(unlabeled, cam, 0), std::invalid_argument);
    }
}
