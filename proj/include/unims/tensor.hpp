#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unims/errors.hpp"

namespace unims {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got " + std::to_string(d));
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
};

// Dense row-major double tensor with value semantics over a shared node.
// Gradients accumulate into `grad` when a Tape is active during op calls.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), 0.0);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        int n = shape_numel(shape);
        if (static_cast<size_t>(n) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int numel() const { return static_cast<int>(node_->value.size()); }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    // 2D accessors; a rank-1 tensor behaves as a single row.
    int rows() const { return rank() == 2 ? node_->shape[0] : 1; }
    int cols() const { return rank() == 2 ? node_->shape[1] : node_->shape[0]; }

    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (rg && node_->grad.size() != node_->value.size()) {
            node_->grad.assign(node_->value.size(), 0.0);
        }
        if (!rg) node_->grad.clear();
    }

    double* grad() { return node_->grad.data(); }
    const double* grad() const { return node_->grad.data(); }
    std::vector<double>& grads() { return node_->grad; }
    const std::vector<double>& grads() const { return node_->grad; }
    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    double at(int r, int c) const { return node_->value[static_cast<size_t>(r) * cols() + c]; }
    double& at(int r, int c) { return node_->value[static_cast<size_t>(r) * cols() + c]; }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Reverse-mode tape. Ops append their backward rules in execution order,
// which is a topological order of the graph by construction; backward()
// replays them in reverse. One tape per training step, single-threaded.
class Tape {
public:
    void record(std::function<void()> backward_rule) {
        entries_.push_back(std::move(backward_rule));
    }

    void backward(Tensor& root) {
        if (root.numel() != 1) throw ShapeError("backward() root must be scalar");
        if (!root.requires_grad()) {
            throw InputError("backward() root does not require grad");
        }
        root.grads()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

    // RAII activation; ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    std::vector<std::function<void()>> entries_;
};

// Box-Muller gaussian over mt19937_64. The engine's sequence is pinned by
// the standard, unlike std::normal_distribution, so streams reproduce across
// standard libraries.
class GaussianRng {
public:
    explicit GaussianRng(uint64_t seed) : rng_(seed) {}

    double uniform() {  // in (0, 1]
        return (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    uint64_t raw() { return rng_(); }

private:
    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Truncated normal init (resample beyond two standard deviations).
inline void fill_trunc_normal(Tensor& t, double stddev, GaussianRng& rng) {
    for (auto& v : t.values()) {
        double x = rng.gaussian() * stddev;
        while (std::abs(x) > 2.0 * stddev) x = rng.gaussian() * stddev;
        v = x;
    }
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 step keeps derived streams decorrelated.
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace unims
