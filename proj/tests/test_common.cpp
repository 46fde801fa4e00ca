#include <catch2/catch_amalgamated.hpp>

#include "woundnerf/common.hpp"

using namespace wnf;

TEST_CASE("rng streams are deterministic per seed") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; i++) {
        double x = a.uniform();
        REQUIRE(x == b.uniform());
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
    }
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 10; i++) differs |= a2.uniform() != c.uniform();
    REQUIRE(differs);
}

TEST_CASE("mix_seed is order sensitive") {
    REQUIRE(mix_seed({1, 2}) != mix_seed({2, 1}));
    REQUIRE(mix_seed({1, 2}) == mix_seed({1, 2}));
}

TEST_CASE("uniform_int covers inclusive range") {
    Rng rng(7);
    bool lo = false, hi = false;
    for (int i = 0; i < 1000; i++) {
        int64_t v = rng.uniform_int(3, 5);
        REQUIRE(v >= 3);
        REQUIRE(v <= 5);
        lo |= v == 3;
        hi |= v == 5;
    }
    REQUIRE(lo);
    REQUIRE(hi);
}

TEST_CASE("parallel_chunks decomposition is independent of worker count") {
    std::vector<int> marks(100, 0);
    parallel_chunks(100, 7, [&](int, int64_t b, int64_t e) {
        for (int64_t i = b; i < e; i++) marks[i]++;
    });
    for (int m : marks) REQUIRE(m == 1);
}

TEST_CASE("aabb slab intersection") {
    Aabb box{{-1, -1, -1}, {1, 1, 1}};
    double tn, tf;
    REQUIRE(intersect_aabb(box, {0, 0, -5}, {0, 0, 1}, tn, tf));
    REQUIRE(tn == Catch::Approx(4.0));
    REQUIRE(tf == Catch::Approx(6.0));
    REQUIRE_FALSE(intersect_aabb(box, {0, 5, -5}, {0, 0, 1}, tn, tf));
}

TEST_CASE("vector helpers") {
    Vec3 a{1, 0, 0}, b{0, 1, 0};
    REQUIRE(dot(a, b) == 0.0);
    Vec3 c = cross(a, b);
    REQUIRE(c.z == Catch::Approx(1.0));
    REQUIRE(norm(normalized({3, 4, 0})) == Catch::Approx(1.0));
}
