#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "woundnerf/common.hpp"

namespace wnf::diff {

using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------- param store

// Named dense parameter blocks. Weights are (out x in), vectors are (1 x n).
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat value;
        bool frozen = false;
    };

    int add(const std::string& name, Mat value, bool frozen = false) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        index_[name] = int(entries_.size());
        entries_.push_back({name, std::move(value), frozen});
        return int(entries_.size()) - 1;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    int require(const std::string& name) const {
        int i = find(name);
        if (i < 0) throw std::invalid_argument("unknown parameter: " + name);
        return i;
    }

    Entry& at(int i) { return entries_[i]; }
    const Entry& at(int i) const { return entries_[i]; }
    Entry& at(const std::string& name) { return entries_[require(name)]; }
    const Entry& at(const std::string& name) const { return entries_[require(name)]; }

    int count() const { return int(entries_.size()); }

    void set_frozen(const std::string& prefix, bool frozen) {
        for (auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) e.frozen = frozen;
    }

    int64_t scalar_count(bool trainable_only = false) const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (!trainable_only || !e.frozen) n += e.value.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Gradient buffers aligned with a ParamStore.
class GradStore {
public:
    explicit GradStore(const ParamStore& store) {
        grads_.reserve(store.count());
        for (int i = 0; i < store.count(); i++)
            grads_.push_back(Mat::Zero(store.at(i).value.rows(), store.at(i).value.cols()));
    }

    Mat& of(int i) { return grads_[i]; }
    const Mat& of(int i) const { return grads_[i]; }

    void set_zero() {
        for (auto& g : grads_) g.setZero();
    }

    void accumulate(const GradStore& other) {
        for (size_t i = 0; i < grads_.size(); i++) grads_[i] += other.grads_[i];
    }

    int count() const { return int(grads_.size()); }

private:
    std::vector<Mat> grads_;
};

// ---------------------------------------------------------------- checkpoint io

// Binary container of named arrays with shapes and frozen flags, header "WNCK1".
inline void save_checkpoint(const ParamStore& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write("WNCK1", 5);
    uint32_t n = uint32_t(store.count());
    out.write(reinterpret_cast<const char*>(&n), 4);
    for (int i = 0; i < store.count(); i++) {
        const auto& e = store.at(i);
        uint32_t len = uint32_t(e.name.size());
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(e.name.data(), len);
        uint8_t frozen = e.frozen ? 1 : 0;
        out.write(reinterpret_cast<const char*>(&frozen), 1);
        uint32_t rows = uint32_t(e.value.rows()), cols = uint32_t(e.value.cols());
        out.write(reinterpret_cast<const char*>(&rows), 4);
        out.write(reinterpret_cast<const char*>(&cols), 4);
        for (uint32_t r = 0; r < rows; r++)
            for (uint32_t c = 0; c < cols; c++) {
                double v = e.value(r, c);
                out.write(reinterpret_cast<const char*>(&v), 8);
            }
    }
    if (!out) throw std::runtime_error("short checkpoint write: " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, "WNCK1", 5) != 0)
        throw std::runtime_error("bad checkpoint header: " + path);
    uint32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    ParamStore store;
    for (uint32_t i = 0; i < n; i++) {
        uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 4);
        std::string name(len, '\0');
        in.read(name.data(), len);
        uint8_t frozen = 0;
        in.read(reinterpret_cast<char*>(&frozen), 1);
        uint32_t rows = 0, cols = 0;
        in.read(reinterpret_cast<char*>(&rows), 4);
        in.read(reinterpret_cast<char*>(&cols), 4);
        Mat v(rows, cols);
        for (uint32_t r = 0; r < rows; r++)
            for (uint32_t c = 0; c < cols; c++) {
                double x;
                in.read(reinterpret_cast<char*>(&x), 8);
                v(r, c) = x;
            }
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        store.add(name, std::move(v), frozen != 0);
    }
    return store;
}

// ---------------------------------------------------------------- activations

enum class Act { softplus100, relu, sigmoid };

inline double sigmoid_stable(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus100(double x) {
    // (1/100) log(1 + e^{100 x}), overflow-safe
    if (x > 0) return x + std::log1p(std::exp(-100.0 * x)) / 100.0;
    return std::log1p(std::exp(100.0 * x)) / 100.0;
}

inline double act_eval(Act a, double x) {
    switch (a) {
        case Act::softplus100: return softplus100(x);
        case Act::relu: return x > 0 ? x : 0.0;
        case Act::sigmoid: return sigmoid_stable(x);
    }
    return 0;
}

// phi'(x)
inline double act_deriv(Act a, double x) {
    switch (a) {
        case Act::softplus100: return sigmoid_stable(100.0 * x);
        case Act::relu: return x > 0 ? 1.0 : 0.0;
        case Act::sigmoid: {
            double s = sigmoid_stable(x);
            return s * (1.0 - s);
        }
    }
    return 0;
}

// Batched activation kernels, written as whole-array expressions so Eigen's
// packet exp/log kick in. softplus(beta=100) = max(x,0) + log(1+e^{-100|x|})/100
// is overflow-free and matches the scalar form within 1 ulp.
inline Mat act_eval_mat(Act a, const Mat& x) {
    Mat y;
    switch (a) {
        case Act::softplus100:
            y = x.cwiseMax(0.0);
            y.array() += ((x.array().abs() * -100.0).exp() + 1.0).log() / 100.0;
            break;
        case Act::relu:
            y = x.cwiseMax(0.0);
            break;
        case Act::sigmoid:
            y = (1.0 / (1.0 + (-x.array()).exp())).matrix();
            break;
    }
    return y;
}

inline Mat act_deriv_mat(Act a, const Mat& x) {
    Mat y;
    switch (a) {
        case Act::softplus100:
            y = (1.0 / (1.0 + (x.array() * -100.0).exp())).matrix();
            break;
        case Act::relu:
            y = (x.array() > 0.0).cast<double>().matrix();
            break;
        case Act::sigmoid: {
            Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
            y = (s * (1.0 - s)).matrix();
            break;
        }
    }
    return y;
}

// ---------------------------------------------------------------- scalar kernels

inline double logsumexp(const double* z, int n) {
    if (n <= 0) throw std::invalid_argument("logsumexp of empty input");
    double m = z[0];
    for (int i = 1; i < n; i++) m = std::max(m, z[i]);
    double s = 0;
    for (int i = 0; i < n; i++) s += std::exp(z[i] - m);
    return m + std::log(s);
}

inline double logsumexp(const std::vector<double>& z) { return logsumexp(z.data(), int(z.size())); }

inline void softmax_inplace(double* z, int n) {
    double m = z[0];
    for (int i = 1; i < n; i++) m = std::max(m, z[i]);
    double s = 0;
    for (int i = 0; i < n; i++) {
        z[i] = std::exp(z[i] - m);
        s += z[i];
    }
    for (int i = 0; i < n; i++) z[i] /= s;
}

inline std::vector<double> softmax(std::vector<double> z) {
    if (z.empty()) throw std::invalid_argument("softmax of empty input");
    softmax_inplace(z.data(), int(z.size()));
    return z;
}

inline Mat softmax_rows_eval(const Mat& x) {
    Mat y = x;
    Eigen::VectorXd m = y.rowwise().maxCoeff();
    y.colwise() -= m;
    y.array() = y.array().exp();
    Eigen::VectorXd s = y.rowwise().sum();
    y.array().colwise() /= s.array();
    return y;
}

// Inverted dropout: kept entries carry 1/(1-rate), evaluation is a pass-through.
struct DropoutMask {
    std::vector<uint8_t> keep;
    double scale = 1.0;
};

inline DropoutMask dropout_mask(int length, double rate, uint64_t seed, bool train = true) {
    if (rate < 0 || rate >= 1) throw std::invalid_argument("dropout rate must be in [0,1)");
    DropoutMask m;
    m.keep.assign(length, 1);
    m.scale = 1.0;
    if (!train || rate == 0) return m;
    m.scale = 1.0 / (1.0 - rate);
    Rng rng(seed);
    for (int i = 0; i < length; i++) m.keep[i] = rng.bernoulli(rate) ? 0 : 1;
    return m;
}

inline Mat dropout_matrix(int rows, int cols, double rate, uint64_t seed) {
    if (rate < 0 || rate >= 1) throw std::invalid_argument("dropout rate must be in [0,1)");
    Mat m(rows, cols);
    double scale = rate == 0 ? 1.0 : 1.0 / (1.0 - rate);
    Rng rng(seed);
    for (int r = 0; r < rows; r++)
        for (int c = 0; c < cols; c++) m(r, c) = rng.bernoulli(rate) ? 0.0 : scale;
    return m;
}

// ---------------------------------------------------------------- tape

enum class Op {
    input,
    param_val,
    param_row,
    pe,
    pe_jac_vec,
    affine,
    linmap,
    act,
    act_grad,
    mul,
    mul_rowvec,
    add,
    sub,
    scale,
    exp_op,
    clamp_op,
    floor_zero,
    slice_cols,
    concat_cols,
    col_to_rs,
    drop_last_sample,
    alpha_from_sdf,
    weights_from_alpha,
    gather_rows,
    scatter_wsum,
    wsum,
    rowsum,
    sem_composite,
    softmax_rows,
    wce_rows,
    stack3,
    l1_loss,
    eikonal,
    mean_all,
};

struct Node {
    Op op{};
    int a = -1, b = -1;   // operand node ids
    int p = -1, p2 = -1;  // parameter entry ids
    Act act{};
    int i0 = 0, i1 = 0, i2 = 0;
    double c0 = 0, c1 = 0;
    Mat value;
    Mat grad;
    std::shared_ptr<std::vector<int>> ints;      // labels etc.
    std::shared_ptr<std::vector<double>> reals;  // per-row weights etc.
    std::shared_ptr<Mat> aux;                    // cached forward intermediates / targets
};

// Reverse-mode tape over dense batched values (rows = batch). Nodes are
// appended in topological order; creating a node runs its forward op.
class Tape {
public:
    explicit Tape(ParamStore& store) : store_(&store) { nodes_.reserve(128); }

    ParamStore& store() { return *store_; }

    const Mat& value(int id) const { return nodes_[id].value; }
    int node_count() const { return int(nodes_.size()); }

    int input(Mat v) {
        Node n;
        n.op = Op::input;
        n.value = std::move(v);
        return push(std::move(n));
    }

    int param_val(const std::string& name) {
        Node n;
        n.op = Op::param_val;
        n.p = store_->require(name);
        n.value = store_->at(n.p).value;
        return push(std::move(n));
    }

    int param_row(const std::string& name, int row) {
        Node n;
        n.op = Op::param_row;
        n.p = store_->require(name);
        n.i0 = row;
        n.value = store_->at(n.p).value.row(row);
        return push(std::move(n));
    }

    int pe(int x, int levels) {
        Node n;
        n.op = Op::pe;
        n.a = x;
        n.i0 = levels;
        n.value = pe_forward(nodes_[x].value, levels);
        return push(std::move(n));
    }

    // J_pe(x)^T v, with the encoding node supplying sin/cos buffers. Gradients
    // do not flow into the encoded point (training points are constants).
    int pe_jac_vec(int pe_node, int v) {
        const Node& penode = nodes_[pe_node];
        if (penode.op != Op::pe) throw std::invalid_argument("pe_jac_vec needs a pe node");
        Node n;
        n.op = Op::pe_jac_vec;
        n.a = pe_node;
        n.b = v;
        n.i0 = penode.i0;                              // levels
        n.i1 = int(nodes_[penode.a].value.cols());     // raw dim
        n.value = pe_jac_apply(penode.value, nodes_[v].value, n.i1, n.i0);
        return push(std::move(n));
    }

    int affine(int x, const std::string& w_name, const std::string& b_name) {
        Node n;
        n.op = Op::affine;
        n.a = x;
        n.p = store_->require(w_name);
        n.p2 = store_->require(b_name);
        const Mat& W = store_->at(n.p).value;
        const Mat& b = store_->at(n.p2).value;
        if (nodes_[x].value.cols() != W.cols())
            throw std::invalid_argument("affine shape mismatch at " + w_name);
        n.value.noalias() = nodes_[x].value * W.transpose();
        for (int c = 0; c < n.value.cols(); c++) n.value.col(c).array() += b(0, c);
        return push(std::move(n));
    }

    // y = x * W for a parameter W of shape (rows x cols); x is (N x rows).
    int linmap(int x, const std::string& w_name) {
        Node n;
        n.op = Op::linmap;
        n.a = x;
        n.p = store_->require(w_name);
        n.value.noalias() = nodes_[x].value * store_->at(n.p).value;
        return push(std::move(n));
    }

    int act(int x, Act kind) {
        Node n;
        n.op = Op::act;
        n.a = x;
        n.act = kind;
        n.value = act_eval_mat(kind, nodes_[x].value);
        return push(std::move(n));
    }

    int act_grad(int x, Act kind) {
        Node n;
        n.op = Op::act_grad;
        n.a = x;
        n.act = kind;
        n.value = act_deriv_mat(kind, nodes_[x].value);
        return push(std::move(n));
    }

    int mul(int a, int b) { return binary(Op::mul, a, b, nodes_[a].value.cwiseProduct(nodes_[b].value)); }

    int mul_rowvec(int x, int v) {
        Node n;
        n.op = Op::mul_rowvec;
        n.a = x;
        n.b = v;
        n.value = nodes_[x].value.array().rowwise() * nodes_[v].value.row(0).array();
        return push(std::move(n));
    }

    int add(int a, int b) { return binary(Op::add, a, b, nodes_[a].value + nodes_[b].value); }
    int sub(int a, int b) { return binary(Op::sub, a, b, nodes_[a].value - nodes_[b].value); }

    int scale(int x, double c) {
        Node n;
        n.op = Op::scale;
        n.a = x;
        n.c0 = c;
        n.value = nodes_[x].value * c;
        return push(std::move(n));
    }

    int exp_op(int x) {
        Node n;
        n.op = Op::exp_op;
        n.a = x;
        n.value = nodes_[x].value.array().exp();
        return push(std::move(n));
    }

    int clamp_op(int x, double lo, double hi) {
        Node n;
        n.op = Op::clamp_op;
        n.a = x;
        n.c0 = lo;
        n.c1 = hi;
        n.value = nodes_[x].value.cwiseMax(lo).cwiseMin(hi);
        return push(std::move(n));
    }

    // Entries below the cutoff become exactly zero (value and gradient), so
    // negligible quadrature terms leave the graph entirely.
    int floor_zero(int x, double cutoff) {
        Node n;
        n.op = Op::floor_zero;
        n.a = x;
        n.c0 = cutoff;
        n.value = (nodes_[x].value.array() >= cutoff)
                      .select(nodes_[x].value, Mat::Zero(nodes_[x].value.rows(),
                                                         nodes_[x].value.cols()));
        return push(std::move(n));
    }

    int slice_cols(int x, int c0, int len) {
        Node n;
        n.op = Op::slice_cols;
        n.a = x;
        n.i0 = c0;
        n.i1 = len;
        n.value = nodes_[x].value.middleCols(c0, len);
        return push(std::move(n));
    }

    int concat_cols(int a, int b) {
        Node n;
        n.op = Op::concat_cols;
        n.a = a;
        n.b = b;
        const Mat& A = nodes_[a].value;
        const Mat& B = nodes_[b].value;
        n.value.resize(A.rows(), A.cols() + B.cols());
        n.value << A, B;
        return push(std::move(n));
    }

    // Column `col` of an (R*S x K) sample-major matrix viewed as (R x S).
    int col_to_rs(int x, int col, int rays, int samples) {
        Node n;
        n.op = Op::col_to_rs;
        n.a = x;
        n.i0 = col;
        n.i1 = rays;
        n.i2 = samples;
        n.value.resize(rays, samples);
        const Mat& X = nodes_[x].value;
        for (int r = 0; r < rays; r++)
            for (int j = 0; j < samples; j++) n.value(r, j) = X(int64_t(r) * samples + j, col);
        return push(std::move(n));
    }

    // (R*(S+1) x K) -> (R*S x K), removing each ray's trailing probe sample.
    int drop_last_sample(int x, int rays, int samples_plus1) {
        Node n;
        n.op = Op::drop_last_sample;
        n.a = x;
        n.i1 = rays;
        n.i2 = samples_plus1;
        const Mat& X = nodes_[x].value;
        int s = samples_plus1 - 1;
        n.value.resize(int64_t(rays) * s, X.cols());
        for (int r = 0; r < rays; r++)
            n.value.middleRows(int64_t(r) * s, s) = X.middleRows(int64_t(r) * samples_plus1, s);
        return push(std::move(n));
    }

    // NeuS-style opacity from consecutive SDF samples (R x (S+1)) and the
    // sharpness scalar node (1x1).
    int alpha_from_sdf(int sdf_rs, int s_node) {
        Node n;
        n.op = Op::alpha_from_sdf;
        n.a = sdf_rs;
        n.b = s_node;
        const Mat& D = nodes_[sdf_rs].value;
        double s = nodes_[s_node].value(0, 0);
        int R = int(D.rows()), S = int(D.cols()) - 1;
        n.value.resize(R, S);
        for (int r = 0; r < R; r++)
            for (int j = 0; j < S; j++) {
                double pi = sigmoid_stable(s * D(r, j));
                double pn = sigmoid_stable(s * D(r, j + 1));
                double m = std::max(pi, 1e-7);
                n.value(r, j) = std::clamp((pi - pn) / m, 0.0, 1.0);
            }
        return push(std::move(n));
    }

    // w_i = T_i alpha_i with T_i = prod_{j<i} (1 - alpha_j + 1e-10).
    int weights_from_alpha(int alpha) {
        Node n;
        n.op = Op::weights_from_alpha;
        n.a = alpha;
        const Mat& A = nodes_[alpha].value;
        int R = int(A.rows()), S = int(A.cols());
        n.value.resize(R, S);
        n.aux = std::make_shared<Mat>(R, S);  // transmittance
        for (int r = 0; r < R; r++) {
            double T = 1.0;
            for (int j = 0; j < S; j++) {
                (*n.aux)(r, j) = T;
                n.value(r, j) = T * A(r, j);
                T *= 1.0 - A(r, j) + 1e-10;
            }
        }
        return push(std::move(n));
    }

    // Row subset by index list; used to evaluate attribute heads only at the
    // samples whose rendering weight survived the floor.
    int gather_rows(int x, std::vector<int> rows) {
        Node n;
        n.op = Op::gather_rows;
        n.a = x;
        n.ints = std::make_shared<std::vector<int>>(std::move(rows));
        const Mat& X = nodes_[x].value;
        n.value.resize(int64_t(n.ints->size()), X.cols());
        for (size_t m = 0; m < n.ints->size(); m++) n.value.row(m) = X.row((*n.ints)[m]);
        return push(std::move(n));
    }

    // Per-ray weighted accumulation of compact attribute rows. `samples[m]` is
    // the flat (ray*S + j) index of compact row m. With residual_to_col0 the
    // escaped transmittance mass lands in column 0.
    int scatter_wsum(int w, int attr, std::vector<int> samples, bool residual_to_col0) {
        Node n;
        n.op = Op::scatter_wsum;
        n.a = w;
        n.b = attr;
        n.i0 = residual_to_col0 ? 1 : 0;
        n.ints = std::make_shared<std::vector<int>>(std::move(samples));
        const Mat& W = nodes_[w].value;
        const Mat& A = nodes_[attr].value;
        int R = int(W.rows()), S = int(W.cols()), C = int(A.cols());
        n.value = Mat::Zero(R, C);
        if (n.i0)
            n.value.col(0) = Eigen::VectorXd::Ones(R) - W.rowwise().sum();
        for (size_t m = 0; m < n.ints->size(); m++) {
            int flat = (*n.ints)[m];
            int r = flat / S, j = flat % S;
            n.value.row(r) += W(r, j) * A.row(int64_t(m));
        }
        return push(std::move(n));
    }

    // Row-wise weighted sum: (R x S, R x S) -> (R x 1).
    int wsum(int w, int attr) {
        Node n;
        n.op = Op::wsum;
        n.a = w;
        n.b = attr;
        n.value = nodes_[w].value.cwiseProduct(nodes_[attr].value).rowwise().sum();
        return push(std::move(n));
    }

    int rowsum(int x) {
        Node n;
        n.op = Op::rowsum;
        n.a = x;
        n.value = nodes_[x].value.rowwise().sum();
        return push(std::move(n));
    }

    // Per-ray class distribution from per-sample distributions (R*S x C) and
    // weights (R x S). Residual transmittance goes to the background column
    // when add_residual is set (probability-space rendering).
    int sem_composite(int w, int per_sample, bool add_residual) {
        Node n;
        n.op = Op::sem_composite;
        n.a = w;
        n.b = per_sample;
        n.i0 = add_residual ? 1 : 0;
        const Mat& W = nodes_[w].value;
        const Mat& P = nodes_[per_sample].value;
        int R = int(W.rows()), S = int(W.cols()), C = int(P.cols());
        n.value = Mat::Zero(R, C);
        for (int r = 0; r < R; r++) {
            double wsum_r = 0;
            for (int j = 0; j < S; j++) {
                double wj = W(r, j);
                wsum_r += wj;
                for (int c = 0; c < C; c++) n.value(r, c) += wj * P(int64_t(r) * S + j, c);
            }
            if (add_residual) n.value(r, 0) += 1.0 - wsum_r;
        }
        return push(std::move(n));
    }

    int softmax_rows(int x) {
        Node n;
        n.op = Op::softmax_rows;
        n.a = x;
        n.value = softmax_rows_eval(nodes_[x].value);
        return push(std::move(n));
    }

    // Per-ray weighted cross-entropy: -cw_r log(max(p[r, label_r], 1e-12)).
    int wce_rows(int probs, std::vector<int> labels, std::vector<double> class_weights) {
        Node n;
        n.op = Op::wce_rows;
        n.a = probs;
        n.ints = std::make_shared<std::vector<int>>(std::move(labels));
        n.reals = std::make_shared<std::vector<double>>(std::move(class_weights));
        const Mat& P = nodes_[probs].value;
        int R = int(P.rows());
        n.value.resize(R, 1);
        for (int r = 0; r < R; r++) {
            double p = std::max(P(r, (*n.ints)[r]), 1e-12);
            n.value(r, 0) = -(*n.reals)[r] * std::log(p);
        }
        return push(std::move(n));
    }

    int stack3(int a, int b, int c) {
        Node n;
        n.op = Op::stack3;
        n.a = a;
        n.b = b;
        n.i0 = c;  // third operand id kept in payload
        n.value.resize(nodes_[a].value.rows(), 3);
        n.value.col(0) = nodes_[a].value.col(0);
        n.value.col(1) = nodes_[b].value.col(0);
        n.value.col(2) = nodes_[c].value.col(0);
        return push(std::move(n));
    }

    // Mean over rays of the channel-mean L1 distance to a fixed target.
    int l1_loss(int pred, Mat target) {
        Node n;
        n.op = Op::l1_loss;
        n.a = pred;
        n.aux = std::make_shared<Mat>(std::move(target));
        const Mat& P = nodes_[pred].value;
        n.value = Mat::Constant(1, 1, (P - *n.aux).cwiseAbs().sum() / double(P.size()));
        return push(std::move(n));
    }

    // Mean (|grad| - 1)^2 over rows of an (N x 3) gradient block.
    int eikonal(int g) {
        Node n;
        n.op = Op::eikonal;
        n.a = g;
        const Mat& G = nodes_[g].value;
        double acc = 0;
        for (int r = 0; r < G.rows(); r++) {
            double nrm = G.row(r).norm();
            acc += (nrm - 1.0) * (nrm - 1.0);
        }
        n.value = Mat::Constant(1, 1, acc / double(G.rows()));
        return push(std::move(n));
    }

    int mean_all(int x) {
        Node n;
        n.op = Op::mean_all;
        n.a = x;
        n.value = Mat::Constant(1, 1, nodes_[x].value.mean());
        return push(std::move(n));
    }

    // Recomputes every node value in creation order; used by the replay test
    // and by loss closures after parameter updates.
    void forward() {
        for (auto& n : nodes_) recompute(n);
    }

    // Reverse accumulation of <upstream, output>; parameter gradients land in
    // `grads`, frozen entries stay zero. Subgraphs that cannot reach a
    // trainable parameter are skipped entirely.
    void backward(int out_node, const Mat& upstream, GradStore& grads) {
        for (auto& n : nodes_) n.grad.resize(0, 0);
        if (upstream.rows() != nodes_[out_node].value.rows() ||
            upstream.cols() != nodes_[out_node].value.cols())
            throw std::invalid_argument("upstream shape mismatch");
        std::vector<uint8_t> needs(nodes_.size(), 0);
        for (size_t i = 0; i < nodes_.size(); i++) {
            const Node& n = nodes_[i];
            bool v = false;
            if (n.p >= 0 && !store_->at(n.p).frozen) v = true;
            if (n.p2 >= 0 && !store_->at(n.p2).frozen) v = true;
            int ops[3];
            operand_nodes(n, ops);
            for (int k = 0; k < 3 && !v; k++)
                if (ops[k] >= 0 && needs[ops[k]]) v = true;
            needs[i] = v;
        }
        nodes_[out_node].grad = upstream;
        for (int i = out_node; i >= 0; i--) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0 || !needs[i]) continue;
            backprop(n, grads);
        }
    }

    // Level 0 pays for real sin/cos; higher octaves come from the doubling
    // identities (error growth ~2^levels ulp, harmless at the 6 levels used).
    static Mat pe_forward(const Mat& x, int levels) {
        int d = int(x.cols());
        Mat y(x.rows(), d + 2 * d * levels);
        y.leftCols(d) = x;
        if (levels == 0) return y;
        auto sin_blk = [&](int k) { return y.middleCols(d + 2 * k * d, d); };
        auto cos_blk = [&](int k) { return y.middleCols(d + (2 * k + 1) * d, d); };
        sin_blk(0) = (x * kPi).array().sin();
        cos_blk(0) = (x * kPi).array().cos();
        for (int k = 1; k < levels; k++) {
            sin_blk(k) = 2.0 * sin_blk(k - 1).cwiseProduct(cos_blk(k - 1));
            cos_blk(k) = 1.0 - 2.0 * sin_blk(k - 1).cwiseProduct(sin_blk(k - 1)).array();
        }
        return y;
    }

private:
    int binary(Op op, int a, int b, Mat value) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = std::move(value);
        return push(std::move(n));
    }

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    static Mat pe_jac_apply(const Mat& pe_val, const Mat& v, int d, int levels) {
        Mat out = v.leftCols(d);
        for (int k = 0; k < levels; k++) {
            double f = std::pow(2.0, k) * kPi;
            const auto sin_blk = pe_val.middleCols(d + 2 * k * d, d).array();
            const auto cos_blk = pe_val.middleCols(d + (2 * k + 1) * d, d).array();
            out.array() += f * (cos_blk * v.middleCols(d + 2 * k * d, d).array() -
                                sin_blk * v.middleCols(d + (2 * k + 1) * d, d).array());
        }
        return out;
    }

    // Node ids a given node reads from (stack3 keeps its third operand in i0).
    static void operand_nodes(const Node& n, int out[3]) {
        out[0] = n.a;
        out[1] = n.b;
        out[2] = n.op == Op::stack3 ? n.i0 : -1;
    }

    Mat& gslot(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void pgrad(int entry, const Mat& g, GradStore& grads) {
        if (store_->at(entry).frozen) return;
        grads.of(entry) += g;
    }

    void recompute(Node& n) {
        switch (n.op) {
            case Op::input: break;
            case Op::param_val: n.value = store_->at(n.p).value; break;
            case Op::param_row: n.value = store_->at(n.p).value.row(n.i0); break;
            case Op::pe: n.value = pe_forward(nodes_[n.a].value, n.i0); break;
            case Op::pe_jac_vec:
                n.value = pe_jac_apply(nodes_[n.a].value, nodes_[n.b].value, n.i1, n.i0);
                break;
            case Op::affine: {
                n.value.noalias() = nodes_[n.a].value * store_->at(n.p).value.transpose();
                const Mat& b = store_->at(n.p2).value;
                for (int c = 0; c < n.value.cols(); c++) n.value.col(c).array() += b(0, c);
                break;
            }
            case Op::linmap:
                n.value.noalias() = nodes_[n.a].value * store_->at(n.p).value;
                break;
            case Op::act: n.value = act_eval_mat(n.act, nodes_[n.a].value); break;
            case Op::act_grad: n.value = act_deriv_mat(n.act, nodes_[n.a].value); break;
            case Op::mul: n.value = nodes_[n.a].value.cwiseProduct(nodes_[n.b].value); break;
            case Op::mul_rowvec:
                n.value = nodes_[n.a].value.array().rowwise() * nodes_[n.b].value.row(0).array();
                break;
            case Op::add: n.value = nodes_[n.a].value + nodes_[n.b].value; break;
            case Op::sub: n.value = nodes_[n.a].value - nodes_[n.b].value; break;
            case Op::scale: n.value = nodes_[n.a].value * n.c0; break;
            case Op::exp_op: n.value = nodes_[n.a].value.array().exp(); break;
            case Op::clamp_op: n.value = nodes_[n.a].value.cwiseMax(n.c0).cwiseMin(n.c1); break;
            case Op::floor_zero:
                n.value = (nodes_[n.a].value.array() >= n.c0)
                              .select(nodes_[n.a].value,
                                      Mat::Zero(n.value.rows(), n.value.cols()));
                break;
            case Op::slice_cols: n.value = nodes_[n.a].value.middleCols(n.i0, n.i1); break;
            case Op::concat_cols: {
                const Mat& A = nodes_[n.a].value;
                const Mat& B = nodes_[n.b].value;
                n.value.resize(A.rows(), A.cols() + B.cols());
                n.value << A, B;
                break;
            }
            case Op::col_to_rs: {
                const Mat& X = nodes_[n.a].value;
                for (int r = 0; r < n.i1; r++)
                    for (int j = 0; j < n.i2; j++)
                        n.value(r, j) = X(int64_t(r) * n.i2 + j, n.i0);
                break;
            }
            case Op::drop_last_sample: {
                const Mat& X = nodes_[n.a].value;
                int s = n.i2 - 1;
                for (int r = 0; r < n.i1; r++)
                    n.value.middleRows(int64_t(r) * s, s) =
                        X.middleRows(int64_t(r) * n.i2, s);
                break;
            }
            case Op::alpha_from_sdf: {
                const Mat& D = nodes_[n.a].value;
                double s = nodes_[n.b].value(0, 0);
                for (int r = 0; r < n.value.rows(); r++)
                    for (int j = 0; j < n.value.cols(); j++) {
                        double pi = sigmoid_stable(s * D(r, j));
                        double pn = sigmoid_stable(s * D(r, j + 1));
                        n.value(r, j) = std::clamp((pi - pn) / std::max(pi, 1e-7), 0.0, 1.0);
                    }
                break;
            }
            case Op::weights_from_alpha: {
                const Mat& A = nodes_[n.a].value;
                for (int r = 0; r < A.rows(); r++) {
                    double T = 1.0;
                    for (int j = 0; j < A.cols(); j++) {
                        (*n.aux)(r, j) = T;
                        n.value(r, j) = T * A(r, j);
                        T *= 1.0 - A(r, j) + 1e-10;
                    }
                }
                break;
            }
            case Op::gather_rows: {
                const Mat& X = nodes_[n.a].value;
                for (size_t m = 0; m < n.ints->size(); m++) n.value.row(m) = X.row((*n.ints)[m]);
                break;
            }
            case Op::scatter_wsum: {
                const Mat& W = nodes_[n.a].value;
                const Mat& A = nodes_[n.b].value;
                int S = int(W.cols());
                n.value.setZero();
                if (n.i0)
                    n.value.col(0) = Eigen::VectorXd::Ones(W.rows()) - W.rowwise().sum();
                for (size_t m = 0; m < n.ints->size(); m++) {
                    int flat = (*n.ints)[m];
                    n.value.row(flat / S) += W(flat / S, flat % S) * A.row(int64_t(m));
                }
                break;
            }
            case Op::wsum:
                n.value = nodes_[n.a].value.cwiseProduct(nodes_[n.b].value).rowwise().sum();
                break;
            case Op::rowsum: n.value = nodes_[n.a].value.rowwise().sum(); break;
            case Op::sem_composite: {
                const Mat& W = nodes_[n.a].value;
                const Mat& P = nodes_[n.b].value;
                int R = int(W.rows()), S = int(W.cols()), C = int(P.cols());
                n.value.setZero();
                for (int r = 0; r < R; r++) {
                    double wsum_r = 0;
                    for (int j = 0; j < S; j++) {
                        double wj = W(r, j);
                        wsum_r += wj;
                        for (int c = 0; c < C; c++)
                            n.value(r, c) += wj * P(int64_t(r) * S + j, c);
                    }
                    if (n.i0) n.value(r, 0) += 1.0 - wsum_r;
                }
                break;
            }
            case Op::softmax_rows: n.value = softmax_rows_eval(nodes_[n.a].value); break;
            case Op::wce_rows: {
                const Mat& P = nodes_[n.a].value;
                for (int r = 0; r < P.rows(); r++) {
                    double p = std::max(P(r, (*n.ints)[r]), 1e-12);
                    n.value(r, 0) = -(*n.reals)[r] * std::log(p);
                }
                break;
            }
            case Op::stack3:
                n.value.col(0) = nodes_[n.a].value.col(0);
                n.value.col(1) = nodes_[n.b].value.col(0);
                n.value.col(2) = nodes_[n.i0].value.col(0);
                break;
            case Op::l1_loss: {
                const Mat& P = nodes_[n.a].value;
                n.value(0, 0) = (P - *n.aux).cwiseAbs().sum() / double(P.size());
                break;
            }
            case Op::eikonal: {
                const Mat& G = nodes_[n.a].value;
                double acc = 0;
                for (int r = 0; r < G.rows(); r++) {
                    double nrm = G.row(r).norm();
                    acc += (nrm - 1.0) * (nrm - 1.0);
                }
                n.value(0, 0) = acc / double(G.rows());
                break;
            }
            case Op::mean_all: n.value(0, 0) = nodes_[n.a].value.mean(); break;
        }
    }

    void backprop(Node& n, GradStore& grads) {
        const Mat& U = n.grad;
        switch (n.op) {
            case Op::input: break;
            case Op::param_val: pgrad(n.p, U, grads); break;
            case Op::param_row:
                if (!store_->at(n.p).frozen) grads.of(n.p).row(n.i0) += U.row(0);
                break;
            case Op::pe: {
                int d = int(nodes_[n.a].value.cols());
                gslot(n.a) += pe_jac_apply(n.value, U, d, n.i0);
                break;
            }
            case Op::pe_jac_vec: {
                // d/dv of J^T v: route U back through the (constant) jacobian.
                const Mat& pe_val = nodes_[n.a].value;
                Mat& gv = gslot(n.b);
                int d = n.i1;
                gv.leftCols(d) += U;
                for (int k = 0; k < n.i0; k++) {
                    double f = std::pow(2.0, k) * kPi;
                    gv.middleCols(d + 2 * k * d, d).array() +=
                        f * pe_val.middleCols(d + (2 * k + 1) * d, d).array() * U.array();
                    gv.middleCols(d + (2 * k + 1) * d, d).array() -=
                        f * pe_val.middleCols(d + 2 * k * d, d).array() * U.array();
                }
                break;
            }
            case Op::affine: {
                const Mat& W = store_->at(n.p).value;
                gslot(n.a).noalias() += U * W;
                if (!store_->at(n.p).frozen)
                    grads.of(n.p).noalias() += U.transpose() * nodes_[n.a].value;
                if (!store_->at(n.p2).frozen) grads.of(n.p2).row(0) += U.colwise().sum();
                break;
            }
            case Op::linmap: {
                const Mat& W = store_->at(n.p).value;
                gslot(n.a).noalias() += U * W.transpose();
                if (!store_->at(n.p).frozen)
                    grads.of(n.p).noalias() += nodes_[n.a].value.transpose() * U;
                break;
            }
            case Op::act:
                gslot(n.a).array() += U.array() * act_deriv_mat(n.act, nodes_[n.a].value).array();
                break;
            case Op::act_grad: {
                // phi''(x) for softplus100: 100 y (1 - y) from own value.
                if (n.act != Act::softplus100)
                    throw std::logic_error("act_grad backward only defined for softplus");
                gslot(n.a).array() +=
                    U.array() * (100.0 * n.value.array() * (1.0 - n.value.array()));
                break;
            }
            case Op::mul:
                gslot(n.a).array() += U.array() * nodes_[n.b].value.array();
                gslot(n.b).array() += U.array() * nodes_[n.a].value.array();
                break;
            case Op::mul_rowvec: {
                gslot(n.a).array() += U.array().rowwise() * nodes_[n.b].value.row(0).array();
                gslot(n.b).row(0) +=
                    (U.array() * nodes_[n.a].value.array()).colwise().sum().matrix();
                break;
            }
            case Op::add:
                gslot(n.a) += U;
                gslot(n.b) += U;
                break;
            case Op::sub:
                gslot(n.a) += U;
                gslot(n.b) -= U;
                break;
            case Op::scale: gslot(n.a) += U * n.c0; break;
            case Op::exp_op: gslot(n.a).array() += U.array() * n.value.array(); break;
            case Op::clamp_op: {
                const Mat& X = nodes_[n.a].value;
                gslot(n.a).array() +=
                    U.array() * ((X.array() > n.c0) && (X.array() < n.c1)).cast<double>();
                break;
            }
            case Op::floor_zero: {
                const Mat& X = nodes_[n.a].value;
                gslot(n.a).array() += U.array() * (X.array() >= n.c0).cast<double>();
                break;
            }
            case Op::slice_cols: gslot(n.a).middleCols(n.i0, n.i1) += U; break;
            case Op::concat_cols: {
                int ca = int(nodes_[n.a].value.cols());
                gslot(n.a) += U.leftCols(ca);
                gslot(n.b) += U.rightCols(U.cols() - ca);
                break;
            }
            case Op::col_to_rs: {
                Mat& g = gslot(n.a);
                for (int r = 0; r < n.i1; r++)
                    for (int j = 0; j < n.i2; j++)
                        g(int64_t(r) * n.i2 + j, n.i0) += U(r, j);
                break;
            }
            case Op::drop_last_sample: {
                Mat& g = gslot(n.a);
                int s = n.i2 - 1;
                for (int r = 0; r < n.i1; r++)
                    g.middleRows(int64_t(r) * n.i2, s) += U.middleRows(int64_t(r) * s, s);
                break;
            }
            case Op::alpha_from_sdf: {
                const Mat& D = nodes_[n.a].value;
                double s = nodes_[n.b].value(0, 0);
                Mat& gD = gslot(n.a);
                double gs = 0;
                for (int r = 0; r < n.value.rows(); r++)
                    for (int j = 0; j < n.value.cols(); j++) {
                        double u = U(r, j);
                        if (u == 0) continue;
                        double pi = sigmoid_stable(s * D(r, j));
                        double pn = sigmoid_stable(s * D(r, j + 1));
                        double m = std::max(pi, 1e-7);
                        double pre = (pi - pn) / m;
                        if (pre <= 0.0 || pre >= 1.0) continue;  // clamped
                        double da_dpi = 1.0 / m - (pi > 1e-7 ? (pi - pn) / (m * m) : 0.0);
                        double da_dpn = -1.0 / m;
                        double dpi = pi * (1.0 - pi);
                        double dpn = pn * (1.0 - pn);
                        gD(r, j) += u * da_dpi * s * dpi;
                        gD(r, j + 1) += u * da_dpn * s * dpn;
                        gs += u * (da_dpi * D(r, j) * dpi + da_dpn * D(r, j + 1) * dpn);
                    }
                gslot(n.b)(0, 0) += gs;
                break;
            }
            case Op::weights_from_alpha: {
                const Mat& A = nodes_[n.a].value;
                const Mat& T = *n.aux;
                Mat& gA = gslot(n.a);
                int S = int(A.cols());
                for (int r = 0; r < A.rows(); r++) {
                    double suffix = 0;  // sum_{i>j} U_i w_i
                    for (int j = S - 1; j >= 0; j--) {
                        double Aj = 1.0 - A(r, j) + 1e-10;
                        gA(r, j) += U(r, j) * T(r, j) - suffix / Aj;
                        suffix += U(r, j) * n.value(r, j);
                    }
                }
                break;
            }
            case Op::gather_rows: {
                Mat& g = gslot(n.a);
                for (size_t m = 0; m < n.ints->size(); m++)
                    g.row((*n.ints)[m]) += U.row(int64_t(m));
                break;
            }
            case Op::scatter_wsum: {
                const Mat& W = nodes_[n.a].value;
                const Mat& A = nodes_[n.b].value;
                Mat& gW = gslot(n.a);
                Mat& gA = gslot(n.b);
                int S = int(W.cols());
                for (size_t m = 0; m < n.ints->size(); m++) {
                    int flat = (*n.ints)[m];
                    int r = flat / S, j = flat % S;
                    gA.row(int64_t(m)) += W(r, j) * U.row(r);
                    gW(r, j) += U.row(r).dot(A.row(int64_t(m)));
                }
                if (n.i0) gW.array().colwise() -= U.col(0).array();
                break;
            }
            case Op::wsum: {
                gslot(n.a).array() +=
                    nodes_[n.b].value.array().colwise() * U.col(0).array();
                gslot(n.b).array() +=
                    nodes_[n.a].value.array().colwise() * U.col(0).array();
                break;
            }
            case Op::rowsum:
                gslot(n.a).array().colwise() += U.col(0).array();
                break;
            case Op::sem_composite: {
                const Mat& W = nodes_[n.a].value;
                const Mat& P = nodes_[n.b].value;
                Mat& gW = gslot(n.a);
                Mat& gP = gslot(n.b);
                int R = int(W.rows()), S = int(W.cols()), C = int(P.cols());
                for (int r = 0; r < R; r++)
                    for (int j = 0; j < S; j++) {
                        int64_t row = int64_t(r) * S + j;
                        double acc = 0;
                        for (int c = 0; c < C; c++) {
                            gP(row, c) += U(r, c) * W(r, j);
                            acc += U(r, c) * P(row, c);
                        }
                        if (n.i0) acc -= U(r, 0);
                        gW(r, j) += acc;
                    }
                break;
            }
            case Op::softmax_rows: {
                Mat& g = gslot(n.a);
                for (int r = 0; r < n.value.rows(); r++) {
                    double dotv = n.value.row(r).dot(U.row(r));
                    g.row(r).array() +=
                        n.value.row(r).array() * (U.row(r).array() - dotv);
                }
                break;
            }
            case Op::wce_rows: {
                const Mat& P = nodes_[n.a].value;
                Mat& g = gslot(n.a);
                for (int r = 0; r < P.rows(); r++) {
                    double p = P(r, (*n.ints)[r]);
                    if (p > 1e-12)
                        g(r, (*n.ints)[r]) += U(r, 0) * (-(*n.reals)[r] / p);
                }
                break;
            }
            case Op::stack3:
                gslot(n.a).col(0) += U.col(0);
                gslot(n.b).col(0) += U.col(1);
                gslot(n.i0).col(0) += U.col(2);
                break;
            case Op::l1_loss: {
                const Mat& P = nodes_[n.a].value;
                double scale = U(0, 0) / double(P.size());
                gslot(n.a).array() +=
                    scale * (P - *n.aux).array().sign();
                break;
            }
            case Op::eikonal: {
                const Mat& G = nodes_[n.a].value;
                Mat& g = gslot(n.a);
                double scale = U(0, 0) / double(G.rows());
                for (int r = 0; r < G.rows(); r++) {
                    double nrm = std::max(G.row(r).norm(), 1e-12);
                    g.row(r) += scale * 2.0 * (nrm - 1.0) / nrm * G.row(r);
                }
                break;
            }
            case Op::mean_all:
                gslot(n.a).array() += U(0, 0) / double(nodes_[n.a].value.size());
                break;
        }
    }

    ParamStore* store_;
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------- mlp

struct MlpArch {
    std::string prefix;
    int input_dim = 0;
    std::vector<int> widths;  // hidden..., output
    Act hidden_act = Act::relu;
    int pe_levels = 0;
};

inline std::string layer_w(const MlpArch& a, int l) { return a.prefix + ".w" + std::to_string(l); }
inline std::string layer_b(const MlpArch& a, int l) { return a.prefix + ".b" + std::to_string(l); }

// He-style init for all layers of an MLP arch.
inline void init_mlp(ParamStore& store, const MlpArch& arch, uint64_t seed) {
    Rng rng(seed);
    int in = arch.input_dim + 2 * arch.input_dim * arch.pe_levels;
    for (size_t l = 0; l < arch.widths.size(); l++) {
        int out = arch.widths[l];
        double s = std::sqrt(2.0 / in);
        Mat w(out, in);
        for (int r = 0; r < out; r++)
            for (int c = 0; c < in; c++) w(r, c) = s * rng.normal();
        store.add(layer_w(arch, int(l)), std::move(w));
        store.add(layer_b(arch, int(l)), Mat::Zero(1, out));
        in = out;
    }
}

// Forward through an arch on an existing tape; returns the output node id and
// (optionally) the pre-activation node ids per layer.
inline int mlp_nodes(Tape& tape, const MlpArch& arch, int x,
                     std::vector<int>* preacts = nullptr, int* pe_node = nullptr) {
    int h = x;
    if (arch.pe_levels > 0) {
        h = tape.pe(x, arch.pe_levels);
        if (pe_node) *pe_node = h;
    } else if (pe_node) {
        *pe_node = -1;
    }
    for (size_t l = 0; l < arch.widths.size(); l++) {
        int z = tape.affine(h, layer_w(arch, int(l)), layer_b(arch, int(l)));
        if (preacts) preacts->push_back(z);
        h = (l + 1 < arch.widths.size()) ? tape.act(z, arch.hidden_act) : z;
    }
    return h;
}

struct MlpResult {
    Mat output;
    std::unique_ptr<Tape> tape;
    int output_node = -1;
};

// Single forward pass that records a tape; `input` rows form the batch.
inline MlpResult mlp_forward(ParamStore& store, const MlpArch& arch, const Mat& input) {
    if (input.cols() != arch.input_dim)
        throw std::invalid_argument("mlp input width mismatch for " + arch.prefix);
    MlpResult res;
    res.tape = std::make_unique<Tape>(store);
    int x = res.tape->input(input);
    res.output_node = mlp_nodes(*res.tape, arch, x);
    res.output = res.tape->value(res.output_node);
    return res;
}

inline GradStore backward(Tape& tape, int output_node, const Mat& upstream) {
    GradStore grads(tape.store());
    tape.backward(output_node, upstream, grads);
    return grads;
}

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected adaptive-moment update; frozen entries are untouched.
inline void adam_step(ParamStore& store, const GradStore& grads, std::vector<Mat>& m,
                      std::vector<Mat>& v, const AdamConfig& cfg, int64_t step) {
    if (m.empty()) {
        for (int i = 0; i < store.count(); i++) {
            m.push_back(Mat::Zero(store.at(i).value.rows(), store.at(i).value.cols()));
            v.push_back(Mat::Zero(store.at(i).value.rows(), store.at(i).value.cols()));
        }
    }
    double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
    for (int i = 0; i < store.count(); i++) {
        auto& e = store.at(i);
        if (e.frozen) continue;
        const Mat& g = grads.of(i);
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        e.value.array() -= cfg.lr * (m[i].array() / bc1) /
                           ((v[i].array() / bc2).sqrt() + cfg.eps);
    }
}

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& store, const GradStore& grads) {
        adam_step(store, grads, m_, v_, cfg_, ++t_);
    }

    const AdamConfig& config() const { return cfg_; }
    int64_t steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Mat> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------- gradient check

// Central differences against analytic gradients on randomly sampled trainable
// parameters. `loss` must be deterministic (dropout in evaluation mode) and
// fill `grads` when the pointer is non-null.
inline double grad_check(const std::function<double(GradStore*)>& loss, ParamStore& store,
                         double eps = 1e-5, int sample_count = 100, uint64_t seed = 0,
                         bool include_frozen = false) {
    GradStore analytic(store);
    loss(&analytic);
    std::vector<std::pair<int, int64_t>> candidates;
    for (int i = 0; i < store.count(); i++) {
        if (store.at(i).frozen && !include_frozen) continue;
        for (int64_t k = 0; k < store.at(i).value.size(); k++) candidates.emplace_back(i, k);
    }
    if (candidates.empty()) return 0.0;
    Rng rng(mix_seed({seed, hash_str("grad-check")}));
    double worst = 0.0;
    for (int s = 0; s < sample_count; s++) {
        auto [entry, flat] = candidates[size_t(rng.uniform_int(0, int64_t(candidates.size()) - 1))];
        double* slot = store.at(entry).value.data() + flat;
        double saved = *slot;
        *slot = saved + eps;
        double up = loss(nullptr);
        *slot = saved - eps;
        double down = loss(nullptr);
        *slot = saved;
        double numeric = (up - down) / (2.0 * eps);
        double a = analytic.of(entry).data()[flat];
        double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace wnf::diff
