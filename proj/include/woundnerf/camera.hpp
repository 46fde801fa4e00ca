#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "woundnerf/common.hpp"

namespace wnf {

// Pinhole camera. Pose is world-from-camera: x_world = R * x_cam + t.
// Camera frame: +x right, +y down, +z forward (optical axis).
// Continuous pixel coordinates equal pixel indices: pixel (row, col) has its
// center at continuous (row, col); the principal point (cx, cy) is expressed
// on the half-sample lattice (u = col + 0.5).
struct Camera {
    Mat3 rotation;   // R
    Vec3 position;   // t (camera center in world coordinates)
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate(double tol = 1e-9) const {
        for (int i = 0; i < 3; i++)
            for (int j = 0; j < 3; j++) {
                double v = 0;
                for (int k = 0; k < 3; k++) v += rotation.m[i][k] * rotation.m[j][k];
                double want = (i == j) ? 1.0 : 0.0;
                if (std::abs(v - want) > tol) throw std::runtime_error("rotation not orthonormal");
            }
        if (std::abs(rotation.det() - 1.0) > tol) throw std::runtime_error("rotation det != +1");
        if (!(fx > 0) || !(fy > 0)) throw std::runtime_error("focal lengths must be positive");
        if (cx < 0 || cx > width || cy < 0 || cy > height)
            throw std::runtime_error("principal point outside image");
    }

    // World-space unit direction through the continuous pixel coordinate.
    Vec3 pixel_direction(double row, double col) const {
        Vec3 d_cam{(col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1.0};
        return normalized(rotation * d_cam);
    }

    Vec3 optical_axis() const { return rotation.col(2); }

    struct Projection {
        double row, col;  // continuous, pixel-index convention
        double depth;     // camera-space z
    };

    // nullopt marks a point at or behind the camera plane.
    std::optional<Projection> project(const Vec3& p_world) const {
        Vec3 rel = p_world - position;
        Vec3 pc = rotation.transposed() * rel;
        if (pc.z <= 0) return std::nullopt;
        double col = fx * pc.x / pc.z + cx - 0.5;
        double row = fy * pc.y / pc.z + cy - 0.5;
        return Projection{row, col, pc.z};
    }
};

// Right-handed look-at with +z forward, rows growing downward in world "down".
inline Camera look_at(const Vec3& eye, const Vec3& target, double fx, double fy,
                      int width, int height) {
    Vec3 fwd = normalized(target - eye);
    Vec3 up{0, 0, 1};
    if (std::abs(dot(fwd, up)) > 0.999) up = {0, 1, 0};
    Vec3 right = normalized(cross(up, fwd));
    Vec3 down = cross(fwd, right);
    Camera cam;
    cam.rotation = Mat3::from_columns(right, down, fwd);
    cam.position = eye;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.width = width;
    cam.height = height;
    return cam;
}

struct CameraRigConfig {
    int count = 50;
    double orbit_radius = 2.5;
    double elevation_lo_deg = 25.0;
    double elevation_hi_deg = 70.0;
    int width = 128, height = 128;
    double fov_deg = 52.0;  // horizontal
};

// Cameras on a spherical cap, all looking at the origin. Deterministic per seed.
inline std::vector<Camera> make_cameras(const CameraRigConfig& cfg, uint64_t seed) {
    if (cfg.count < 1) throw std::invalid_argument("camera count must be >= 1");
    if (!(cfg.orbit_radius > 0)) throw std::invalid_argument("orbit radius must be positive");
    double f = 0.5 * cfg.width / std::tan(0.5 * deg2rad(cfg.fov_deg));
    Rng rng(mix_seed({seed, hash_str("cameras")}));
    std::vector<Camera> cams;
    cams.reserve(cfg.count);
    for (int i = 0; i < cfg.count; i++) {
        double az = rng.uniform(0.0, 2.0 * kPi);
        double el = deg2rad(rng.uniform(cfg.elevation_lo_deg, cfg.elevation_hi_deg));
        Vec3 eye{cfg.orbit_radius * std::cos(el) * std::cos(az),
                 cfg.orbit_radius * std::cos(el) * std::sin(az),
                 cfg.orbit_radius * std::sin(el)};
        cams.push_back(look_at(eye, {0, 0, 0}, f, f, cfg.width, cfg.height));
    }
    return cams;
}

}  // namespace wnf
