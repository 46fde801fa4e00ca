#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "woundnerf/diffcore.hpp"
#include "woundnerf/field.hpp"
#include "woundnerf/io.hpp"
#include "woundnerf/render.hpp"

using namespace wnf;
using diff::Mat;

namespace {

Mat random_mat(int r, int c, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Mat m(r, c);
    for (int i = 0; i < r; i++)
        for (int j = 0; j < c; j++) m(i, j) = scale * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("softmax basics") {
    auto p = diff::softmax({0, 0, 0, 0, 0, 0});
    for (double v : p) REQUIRE(v == Catch::Approx(1.0 / 6).margin(1e-15));

    auto q = diff::softmax({1, 2, 3});
    REQUIRE(q[0] == Catch::Approx(0.09003).margin(1e-5));
    REQUIRE(q[1] == Catch::Approx(0.24473).margin(1e-5));
    REQUIRE(q[2] == Catch::Approx(0.66524).margin(1e-5));
}

TEST_CASE("softmax shift invariance and normalization") {
    Rng rng(11);
    for (int trial = 0; trial < 200; trial++) {
        std::vector<double> z(6);
        for (auto& v : z) v = rng.uniform(-8, 8);
        double c = rng.uniform(-50, 50);
        auto a = diff::softmax(z);
        std::vector<double> zc = z;
        for (auto& v : zc) v += c;
        auto b = diff::softmax(zc);
        double sum = 0;
        int argmax_a = 0, argmax_b = 0;
        for (int i = 0; i < 6; i++) {
            sum += a[i];
            REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
            if (a[i] > a[argmax_a]) argmax_a = i;
            if (b[i] > b[argmax_b]) argmax_b = i;
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-12);
        REQUIRE(argmax_a == argmax_b);
    }
}

TEST_CASE("logsumexp") {
    REQUIRE(diff::logsumexp({0, 0, 0, 0, 0}) == Catch::Approx(std::log(5.0)).margin(1e-12));
    REQUIRE(diff::logsumexp({-3.7}) == Catch::Approx(-3.7).margin(1e-15));
    REQUIRE(diff::logsumexp({1000.0, 0.0}) == Catch::Approx(1000.0).margin(1e-12));
    REQUIRE_THROWS_AS(diff::logsumexp(std::vector<double>{}), std::invalid_argument);

    Rng rng(5);
    for (int trial = 0; trial < 100; trial++) {
        int n = int(rng.uniform_int(1, 9));
        std::vector<double> z(n);
        double mx = -1e18;
        for (auto& v : z) {
            v = rng.uniform(-30, 30);
            mx = std::max(mx, v);
        }
        double l = diff::logsumexp(z);
        REQUIRE(l >= mx - 1e-12);
        REQUIRE(l <= mx + std::log(double(n)) + 1e-12);
    }
}

TEST_CASE("dropout mask") {
    auto all = diff::dropout_mask(16, 0.0, 1);
    REQUIRE(all.scale == 1.0);
    for (auto k : all.keep) REQUIRE(k == 1);

    auto eval = diff::dropout_mask(16, 0.9, 1, /*train=*/false);
    REQUIRE(eval.scale == 1.0);
    for (auto k : eval.keep) REQUIRE(k == 1);

    auto m = diff::dropout_mask(100000, 0.5, 123);
    REQUIRE(m.scale == Catch::Approx(2.0));
    int64_t kept = 0;
    for (auto k : m.keep) kept += k;
    REQUIRE(std::abs(kept / 1e5 - 0.5) < 0.01);

    auto m2 = diff::dropout_mask(100000, 0.5, 123);
    REQUIRE(m.keep == m2.keep);
    REQUIRE_THROWS_AS(diff::dropout_mask(10, 1.0, 0), std::invalid_argument);
}

TEST_CASE("mlp forward matches a straight-line reimplementation") {
    diff::ParamStore store;
    diff::MlpArch arch{"net", 4, {5, 3}, diff::Act::relu, 0};
    diff::init_mlp(store, arch, 99);
    Mat x = random_mat(1, 4, 7);
    auto res = diff::mlp_forward(store, arch, x);

    // Independent evaluation, scalar loops only.
    const Mat& w0 = store.at("net.w0").value;
    const Mat& b0 = store.at("net.b0").value;
    const Mat& w1 = store.at("net.w1").value;
    const Mat& b1 = store.at("net.b1").value;
    double h[5], y[3];
    for (int j = 0; j < 5; j++) {
        double s = b0(0, j);
        for (int k = 0; k < 4; k++) s += w0(j, k) * x(0, k);
        h[j] = s > 0 ? s : 0;
    }
    for (int j = 0; j < 3; j++) {
        double s = b1(0, j);
        for (int k = 0; k < 5; k++) s += w1(j, k) * h[k];
        y[j] = s;
    }
    for (int j = 0; j < 3; j++) REQUIRE(std::abs(res.output(0, j) - y[j]) < 1e-12);
}

TEST_CASE("mlp degenerate cases") {
    diff::ParamStore store;
    store.add("z.w0", Mat::Zero(3, 2));
    store.add("z.b0", Mat::Zero(1, 3));
    diff::MlpArch zero_arch{"z", 2, {3}, diff::Act::relu, 0};
    auto res = diff::mlp_forward(store, zero_arch, random_mat(1, 2, 3));
    REQUIRE(res.output.cwiseAbs().maxCoeff() == 0.0);

    diff::ParamStore id_store;
    id_store.add("i.w0", Mat::Identity(4, 4));
    id_store.add("i.b0", Mat::Zero(1, 4));
    diff::MlpArch id_arch{"i", 4, {4}, diff::Act::relu, 0};
    Mat x = random_mat(1, 4, 8);
    auto idres = diff::mlp_forward(id_store, id_arch, x);
    REQUIRE((idres.output - x).cwiseAbs().maxCoeff() < 1e-15);

    Mat bad = random_mat(1, 3, 1);
    REQUIRE_THROWS_WITH(diff::mlp_forward(id_store, id_arch, bad),
                        Catch::Matchers::ContainsSubstring("i"));
}

TEST_CASE("linear layer backward equals closed form") {
    diff::ParamStore store;
    diff::MlpArch arch{"lin", 3, {2}, diff::Act::relu, 0};
    diff::init_mlp(store, arch, 4);
    Mat x = random_mat(1, 3, 5);
    auto res = diff::mlp_forward(store, arch, x);
    Mat upstream = random_mat(1, 2, 6);
    auto grads = diff::backward(*res.tape, res.output_node, upstream);
    int wi = store.require("lin.w0");
    int bi = store.require("lin.b0");
    for (int r = 0; r < 2; r++) {
        REQUIRE(grads.of(bi)(0, r) == Catch::Approx(upstream(0, r)).margin(1e-15));
        for (int c = 0; c < 3; c++)
            REQUIRE(grads.of(wi)(r, c) ==
                    Catch::Approx(upstream(0, r) * x(0, c)).margin(1e-15));
    }
}

TEST_CASE("frozen parameters receive zero gradients") {
    diff::ParamStore store;
    diff::MlpArch arch{"f", 3, {4, 2}, diff::Act::softplus100, 0};
    diff::init_mlp(store, arch, 12);
    store.set_frozen("f.w0", true);
    auto res = diff::mlp_forward(store, arch, random_mat(1, 3, 2));
    auto grads = diff::backward(*res.tape, res.output_node, Mat::Ones(1, 2));
    REQUIRE(grads.of(store.require("f.w0")).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(grads.of(store.require("f.w1")).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("mlp gradients match central differences") {
    diff::ParamStore store;
    diff::MlpArch arch{"g", 3, {8, 8, 2}, diff::Act::softplus100, 2};
    diff::init_mlp(store, arch, 21);
    Mat x = random_mat(4, 3, 22);
    Mat u = random_mat(4, 2, 23);
    auto loss = [&](diff::GradStore* grads) {
        auto res = diff::mlp_forward(store, arch, x);
        if (grads) res.tape->backward(res.output_node, u, *grads);
        return (res.output.array() * u.array()).sum();
    };
    REQUIRE(diff::grad_check(loss, store, 1e-5, 100, 3) < 1e-6);
}

TEST_CASE("positional encoding values") {
    Mat x(1, 1);
    x << 0.5;
    Mat y = diff::Tape::pe_forward(x, 2);
    REQUIRE(y.cols() == 5);
    REQUIRE(y(0, 0) == 0.5);
    REQUIRE(y(0, 1) == Catch::Approx(1.0).margin(1e-12));   // sin(pi/2)
    REQUIRE(y(0, 2) == Catch::Approx(0.0).margin(1e-12));   // cos(pi/2)
    REQUIRE(y(0, 3) == Catch::Approx(0.0).margin(1e-12));   // sin(pi)
    REQUIRE(y(0, 4) == Catch::Approx(-1.0).margin(1e-12));  // cos(pi)

    Mat z = Mat::Zero(1, 3);
    Mat yz = diff::Tape::pe_forward(z, 3);
    REQUIRE(yz.cols() == 3 + 18);
    for (int k = 0; k < 3; k++) {
        for (int d = 0; d < 3; d++) {
            REQUIRE(yz(0, 3 + 2 * k * 3 + d) == 0.0);        // sines
            REQUIRE(yz(0, 3 + (2 * k + 1) * 3 + d) == 1.0);  // cosines
        }
    }

    Mat l0 = diff::Tape::pe_forward(x, 0);
    REQUIRE(l0.cols() == 1);
    REQUIRE(l0(0, 0) == 0.5);
}

TEST_CASE("adam") {
    diff::ParamStore store;
    store.add("theta", Mat::Zero(1, 1));
    diff::GradStore grads(store);

    SECTION("zero gradient leaves parameters unchanged") {
        diff::Adam opt({0.01});
        opt.step(store, grads);
        REQUIRE(store.at("theta").value(0, 0) == 0.0);
    }

    SECTION("first step magnitude is about lr") {
        diff::Adam opt({0.01});
        grads.of(0)(0, 0) = 1.0;
        opt.step(store, grads);
        REQUIRE(store.at("theta").value(0, 0) == Catch::Approx(-0.01).margin(1e-6));
    }

    SECTION("quadratic toy optimization converges") {
        diff::Adam opt({0.01});
        for (int it = 0; it < 2000; it++) {
            grads.of(0)(0, 0) = 2.0 * (store.at("theta").value(0, 0) - 3.0);
            opt.step(store, grads);
        }
        REQUIRE(std::abs(store.at("theta").value(0, 0) - 3.0) < 1e-3);
    }

    SECTION("frozen entries are untouched bitwise") {
        store.add("frozen", Mat::Constant(1, 1, 0.125), true);
        diff::GradStore g2(store);
        g2.of(1)(0, 0) = 5.0;
        diff::Adam opt({0.01});
        opt.step(store, g2);
        REQUIRE(store.at("frozen").value(0, 0) == 0.125);
    }
}

TEST_CASE("grad_check on a linear loss is tiny") {
    diff::ParamStore store;
    store.add("w", random_mat(2, 3, 31));
    auto loss = [&](diff::GradStore* grads) {
        if (grads) grads->of(0) = Mat::Ones(2, 3);
        return store.at("w").value.sum();
    };
    REQUIRE(diff::grad_check(loss, store, 1e-5, 50, 1) < 1e-9);
}

TEST_CASE("grad_check frozen sample: analytic zero vs numeric zero") {
    diff::ParamStore store;
    store.add("used", random_mat(1, 2, 8));
    store.add("unused", random_mat(1, 2, 9), /*frozen=*/true);
    auto loss = [&](diff::GradStore* grads) {
        if (grads) grads->of(0) = 2.0 * store.at("used").value;
        return store.at("used").value.squaredNorm();
    };
    REQUIRE(diff::grad_check(loss, store, 1e-5, 50, 2, /*include_frozen=*/true) < 1e-9);
}

TEST_CASE("tape replay reproduces recorded values bit-exactly") {
    diff::ParamStore store;
    diff::MlpArch arch{"r", 3, {6, 4}, diff::Act::softplus100, 1};
    diff::init_mlp(store, arch, 44);
    diff::Tape tape(store);
    int x = tape.input(random_mat(5, 3, 45));
    int out = diff::mlp_nodes(tape, arch, x);
    int act = tape.act(out, diff::Act::sigmoid);
    int loss = tape.mean_all(act);
    Mat v_out = tape.value(out);
    Mat v_loss = tape.value(loss);
    tape.forward();
    REQUIRE((tape.value(out).array() == v_out.array()).all());
    REQUIRE((tape.value(loss).array() == v_loss.array()).all());
}

TEST_CASE("checkpoint round trip preserves values, shapes, frozen flags") {
    diff::ParamStore store;
    store.add("a.w", random_mat(3, 4, 50));
    store.add("a.b", random_mat(1, 4, 51), true);
    store.add("s", Mat::Constant(1, 1, 1.25));
    std::string path = std::filesystem::temp_directory_path() / "wnck_test.wnck";
    diff::save_checkpoint(store, path);
    diff::ParamStore loaded = diff::load_checkpoint(path);
    REQUIRE(loaded.count() == 3);
    for (int i = 0; i < 3; i++) {
        REQUIRE(loaded.at(i).name == store.at(i).name);
        REQUIRE(loaded.at(i).frozen == store.at(i).frozen);
        REQUIRE((loaded.at(i).value.array() == store.at(i).value.array()).all());
    }
    std::filesystem::remove(path);
}

TEST_CASE("bad checkpoint header is rejected") {
    std::string path = std::filesystem::temp_directory_path() / "bad.wnck";
    write_text_file(path, "NOTAHEADER");
    REQUIRE_THROWS_WITH(diff::load_checkpoint(path),
                        Catch::Matchers::ContainsSubstring("header"));
    std::filesystem::remove(path);
}

// The full rendering graph exercises every tape op; its gradient against
// central differences is the backbone correctness check for the tape.
TEST_CASE("full ray-graph gradients match central differences") {
    FieldConfig fc;
    fc.width = 12;
    fc.feat_dim = 6;
    fc.pe_levels_geo = 2;
    fc.pe_levels_dir = 1;
    FieldModel model = init_field(fc, 77);

    std::vector<Ray> rays;
    Rng rng(78);
    for (int i = 0; i < 6; i++) {
        Ray r;
        r.origin = {rng.uniform(-2, 2), rng.uniform(-2, 2), 2.5};
        r.direction = normalized({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0});
        r.near = 0.8;
        r.far = 3.5;
        rays.push_back(r);
    }
    RayBatch batch = make_ray_batch(rays, 5);
    Mat targets = random_mat(6, 3, 79).array().abs().min(1.0);
    std::vector<int> labels = {0, 1, 2, 3, 4, 5};
    std::vector<double> ray_weights = {0.1, 1.0, 0.4, 0.2, 0.9, 0.3};
    Mat eik_pts = random_mat(8, 3, 80);

    auto loss_for = [&](SemanticSpace space) {
        return [&, space](diff::GradStore* grads) {
            diff::Tape tape(model.store);
            RayGraphOptions opt;
            opt.semantic_space = space;
            opt.with_grad_x = false;
            opt.background = {0.3, 0.2, 0.1};
            auto nodes = build_ray_graph(tape, model, batch, opt);
            int rgb_term = tape.l1_loss(nodes.rgb_px, targets);
            int wce_term = tape.mean_all(tape.wce_rows(nodes.sem_px, labels, ray_weights));
            int eik_in = tape.input(eik_pts);
            auto eg = geometry_nodes(tape, model.cfg, eik_in, true);
            int eik_term = tape.eikonal(eg.grad_x);
            int total = tape.add(tape.add(rgb_term, wce_term), tape.scale(eik_term, 0.1));
            if (grads) tape.backward(total, Mat::Constant(1, 1, 1.0), *grads);
            return tape.value(total)(0, 0);
        };
    };

    // All parameters trainable. Near-dead softplus paths carry true gradients
    // around 1e-9 where central differences at eps=1e-5 bottom out against
    // double rounding (worst measured noise ~4e-3 with a correct backward),
    // so the bound here is coarse; real backward defects land at 0.1 or more.
    for (SemanticSpace space : {SemanticSpace::probability, SemanticSpace::logit})
        REQUIRE(diff::grad_check(loss_for(space), model.store, 1e-5, 150, 81) < 1e-2);

    // The stage-2 trainable set (geometry and sharpness frozen) at the full
    // rendering-loss tolerance.
    model.store.set_frozen("geo.", true);
    model.store.set_frozen("app.", true);
    model.store.set_frozen("s_log", true);
    REQUIRE(diff::grad_check(loss_for(SemanticSpace::probability), model.store, 1e-5, 150, 82) <
            1e-4);
}

TEST_CASE("compact (floored) ray graph matches the dense one") {
    FieldConfig fc;
    fc.width = 12;
    fc.feat_dim = 6;
    fc.pe_levels_geo = 2;
    fc.pe_levels_dir = 1;
    FieldModel model = init_field(fc, 91);
    std::vector<Ray> rays;
    Rng rng(92);
    for (int i = 0; i < 8; i++) {
        Ray r;
        r.origin = {rng.uniform(-1, 1), rng.uniform(-1, 1), 2.5};
        r.direction = normalized({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0});
        r.near = 0.8;
        r.far = 3.6;
        rays.push_back(r);
    }
    RayBatch batch = make_ray_batch(rays, 12);

    diff::Tape dense_tape(model.store);
    RayGraphOptions dense_opt;
    dense_opt.background = {0.2, 0.3, 0.4};
    auto dense = build_ray_graph(dense_tape, model, batch, dense_opt);

    diff::Tape compact_tape(model.store);
    RayGraphOptions compact_opt = dense_opt;
    compact_opt.weight_floor = 1e-8;
    auto compact = build_ray_graph(compact_tape, model, batch, compact_opt);

    REQUIRE((dense_tape.value(dense.rgb_px) - compact_tape.value(compact.rgb_px))
                .cwiseAbs()
                .maxCoeff() < 1e-7);
    REQUIRE((dense_tape.value(dense.sem_px) - compact_tape.value(compact.sem_px))
                .cwiseAbs()
                .maxCoeff() < 1e-7);

    // Gradient correctness of the compact path.
    Mat targets = random_mat(8, 3, 93).array().abs().min(1.0);
    std::vector<int> labels = {0, 1, 2, 3, 4, 5, 1, 2};
    std::vector<double> rw(8, 0.5);
    auto loss = [&](diff::GradStore* grads) {
        diff::Tape tape(model.store);
        auto nodes = build_ray_graph(tape, model, batch, compact_opt);
        int total = tape.add(tape.l1_loss(nodes.rgb_px, targets),
                             tape.mean_all(tape.wce_rows(nodes.sem_px, labels, rw)));
        if (grads) tape.backward(total, Mat::Constant(1, 1, 1.0), *grads);
        return tape.value(total)(0, 0);
    };
    REQUIRE(diff::grad_check(loss, model.store, 1e-5, 150, 94) < 1e-2);

    // Dropout rows are a pure function of (seed, flat sample id).
    Mat d1 = dropout_rows({3, 11, 40}, 8, 0.5, 5);
    Mat d2 = dropout_rows({11}, 8, 0.5, 5);
    REQUIRE((d1.row(1).array() == d2.row(0).array()).all());
}

TEST_CASE("compositing ops match hand-computed values") {
    diff::ParamStore store;
    diff::Tape tape(store);

    // alphas (0.5, 0.5) on one ray: weights (0.5, 0.25), residual 0.25.
    Mat alpha(1, 2);
    alpha << 0.5, 0.5;
    int a = tape.input(alpha);
    int w = tape.weights_from_alpha(a);
    REQUIRE(tape.value(w)(0, 0) == Catch::Approx(0.5).margin(1e-10));
    REQUIRE(tape.value(w)(0, 1) == Catch::Approx(0.25).margin(1e-10));

    Mat logits(2, 6);
    logits << 1, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0;
    int l = tape.input(logits);
    int p = tape.softmax_rows(l);
    int sem = tape.sem_composite(w, p, true);
    const Mat& P = tape.value(p);
    const Mat& S = tape.value(sem);
    for (int c = 0; c < 6; c++) {
        double want = 0.5 * P(0, c) + 0.25 * P(1, c) + (c == 0 ? 0.25 : 0.0);
        REQUIRE(S(0, c) == Catch::Approx(want).margin(1e-12));
    }
    double sum = S.row(0).sum();
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));

    // Single fully opaque sample: the pixel distribution is that sample's.
    diff::Tape tape2(store);
    Mat alpha1 = Mat::Constant(1, 1, 1.0);
    int a1 = tape2.input(alpha1);
    int w1 = tape2.weights_from_alpha(a1);
    Mat one_logit(1, 6);
    one_logit << 0.3, -1, 2, 0.5, 0, -2;
    int p1 = tape2.softmax_rows(tape2.input(one_logit));
    int sem1 = tape2.sem_composite(w1, p1, true);
    for (int c = 0; c < 6; c++)
        REQUIRE(tape2.value(sem1)(0, c) ==
                Catch::Approx(tape2.value(p1)(0, c)).margin(1e-9));
}

TEST_CASE("alpha_from_sdf matches the scalar helper") {
    diff::ParamStore store;
    store.add("s_log", Mat::Constant(1, 1, std::log(10.0)));
    diff::Tape tape(store);
    Mat sdf(2, 3);
    sdf << 0.1, -0.1, -0.3, 0.2, 0.2, 0.1;
    int d = tape.input(sdf);
    int s = tape.exp_op(tape.param_val("s_log"));
    int alpha = tape.alpha_from_sdf(d, s);
    REQUIRE(tape.value(alpha)(0, 0) == Catch::Approx(sdf_to_alpha(0.1, -0.1, 10.0)).margin(1e-12));
    REQUIRE(tape.value(alpha)(0, 0) == Catch::Approx(0.6321206).margin(1e-4));
    REQUIRE(tape.value(alpha)(0, 1) == Catch::Approx(sdf_to_alpha(-0.1, -0.3, 10.0)).margin(1e-12));
    REQUIRE(tape.value(alpha)(1, 0) == 0.0);  // flat sdf
}
