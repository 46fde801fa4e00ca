#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "woundnerf/io.hpp"

using namespace wnf;

namespace {
std::string tmp(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("indexed mask png round trip is exact") {
    LabeledImage mask(33, 17, 0);
    Rng rng(2);
    for (auto& v : mask.labels) v = uint8_t(rng.uniform_int(0, 5));
    std::string path = tmp("mask.png");
    write_mask_png(path, mask);
    LabeledImage loaded = read_mask_png(path);
    REQUIRE(loaded.width == mask.width);
    REQUIRE(loaded.height == mask.height);
    REQUIRE(loaded.labels == mask.labels);
    std::filesystem::remove(path);
}

TEST_CASE("mask png writes are byte-identical across runs") {
    LabeledImage mask(16, 16, 0);
    Rng rng(5);
    for (auto& v : mask.labels) v = uint8_t(rng.uniform_int(0, 5));
    std::string p1 = tmp("mask_a.png"), p2 = tmp("mask_b.png");
    write_mask_png(p1, mask);
    write_mask_png(p2, mask);
    REQUIRE(read_text_file(p1) == read_text_file(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("rgb png round trip is exact at 8 bits") {
    Grid<std::array<uint8_t, 3>> img(12, 9);
    Rng rng(3);
    for (auto& px : img.data)
        px = {uint8_t(rng.uniform_int(0, 255)), uint8_t(rng.uniform_int(0, 255)),
              uint8_t(rng.uniform_int(0, 255))};
    std::string path = tmp("rgb.png");
    write_rgb_png(path, img);
    auto loaded = read_rgb_png(path);
    REQUIRE(loaded.data == img.data);
    std::filesystem::remove(path);
}

TEST_CASE("reading an rgb png as a mask is rejected") {
    RgbImage img(8, 8, Rgb{0.5, 0.2, 0.1});
    std::string path = tmp("notamask.png");
    write_rgb_png(path, img);
    REQUIRE_THROWS_WITH(read_mask_png(path), Catch::Matchers::ContainsSubstring("indexed"));
    std::filesystem::remove(path);
}

TEST_CASE("wndf grids") {
    SECTION("depth round trip with the miss sentinel") {
        DepthImage depth(7, 5, kDepthMiss);
        depth.at(2, 3) = 1.25f;
        depth.at(4, 6) = 0.0f;
        std::string path = tmp("depth.wndf");
        write_depth_wndf(path, depth);
        DepthImage loaded = read_depth_wndf(path);
        REQUIRE(loaded.width == 7);
        REQUIRE(loaded.height == 5);
        REQUIRE(loaded.data == depth.data);
        // 16-byte header: magic + width + height + channels
        REQUIRE(std::filesystem::file_size(path) == 16 + 7 * 5 * 4);
        std::filesystem::remove(path);
    }
    SECTION("six-channel probability grids") {
        ProbImage prob(3, 2);
        Rng rng(4);
        for (auto& px : prob.data) {
            double sum = 0;
            for (auto& v : px) {
                v = rng.uniform();
                sum += v;
            }
            for (auto& v : px) v /= sum;
        }
        std::string path = tmp("prob.wndf");
        write_prob_wndf(path, prob);
        int w, h, c;
        auto samples = read_wndf(path, w, h, c);
        REQUIRE(w == 3);
        REQUIRE(h == 2);
        REQUIRE(c == 6);
        REQUIRE(samples.size() == 36);
        REQUIRE(samples[0] == Catch::Approx(prob.data[0][0]).margin(1e-7));
        std::filesystem::remove(path);
    }
    SECTION("bad magic is rejected") {
        std::string path = tmp("bad.wndf");
        write_text_file(path, "XXXX0000000000000000");
        int w, h, c;
        REQUIRE_THROWS_WITH(read_wndf(path, w, h, c),
                            Catch::Matchers::ContainsSubstring("WNDF"));
        std::filesystem::remove(path);
    }
}
