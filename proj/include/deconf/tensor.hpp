#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "deconf/errors.hpp"
#include "deconf/rng.hpp"

namespace deconf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Negative slope of leaky_relu.
inline constexpr double kLeakySlope = 0.1;

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/**
 * Dense row-major double tensor with an optional reverse-mode gradient.
 *
 * A Tensor is a shared handle: copies alias the same node. Operations record
 * their inputs and a backward rule only when some input requires a gradient and
 * recording is enabled.
 */
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->id = detail::node_counter().fetch_add(1);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double v) {
        const std::size_t n = numel(shape);
        return from(std::move(shape), std::vector<double>(n, v));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    /// Uniform(-scale, scale) entries.
    static Tensor uniform(Shape shape, Rng& rng, double scale, bool requires_grad = false) {
        std::vector<double> d(numel(shape));
        for (double& x : d) x = rng.uniform(-scale, scale);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor normal(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        std::vector<double> d(numel(shape));
        for (double& x : d) x = rng.normal() * stddev;
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    /// Gradient buffer; empty until backward reaches this tensor.
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& grad() { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    double item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t i, std::size_t j) const { return node_->value.at(i * node_->shape.at(1) + j); }

    /// Copy detached from the graph.
    Tensor detach() const { return from(shape(), node_->value); }

    const char* op() const { return node_->op; }
    std::uint64_t id() const { return node_->id; }

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates the output node of an op. The backward rule is attached only if needed.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    Node* n = out.node();
    n->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        n->requires_grad = true;
        for (auto& t : inputs) n->inputs.push_back(t.node_ptr());
        n->backward = std::move(backward);
    }
    return out;
}

inline void accumulate(Node& target, std::span<const double> g) {
    if (!target.requires_grad) return;
    target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) target.grad[i] += g[i];
}

inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

/**
 * Reverse-mode pass from a scalar. Nodes are visited once each, in decreasing
 * creation order, which is a reverse topological order of the graph.
 */
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    std::vector<detail::Node*> nodes;
    std::vector<detail::Node*> stack{loss.node()};
    std::vector<const detail::Node*> seen_list;
    // Node ids are unique, so a sorted id list doubles as the visited set.
    std::vector<std::uint64_t> seen;
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        auto it = std::lower_bound(seen.begin(), seen.end(), n->id);
        if (it != seen.end() && *it == n->id) continue;
        seen.insert(it, n->id);
        nodes.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->requires_grad) stack.push_back(in.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(), [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (detail::Node* n : nodes) {
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive operations.

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) detail::shape_fail("reshape", a.shape(), shape);
    return detail::make_result("reshape", std::move(shape), a.values(), {a}, [](detail::Node& self) {
        detail::accumulate(*self.inputs[0], self.grad);
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_fail("add", a.shape(), b.shape());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
    return detail::make_result("add", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
        detail::accumulate(*self.inputs[0], self.grad);
        detail::accumulate(*self.inputs[1], self.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_fail("sub", a.shape(), b.shape());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
    return detail::make_result("sub", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
        detail::accumulate(*self.inputs[0], self.grad);
        std::vector<double> neg(self.grad.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
        detail::accumulate(*self.inputs[1], neg);
    });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
    return detail::make_result("mul", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        std::vector<double> g(self.grad.size());
        if (A.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * B.value[i];
            detail::accumulate(A, g);
        }
        if (B.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * A.value[i];
            detail::accumulate(B, g);
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
    return detail::make_result("scale", a.shape(), std::move(v), {a}, [c](detail::Node& self) {
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
        detail::accumulate(*self.inputs[0], g);
    });
}

/// a[..., m] + bias[m]; the only broadcasting the library supports.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rank() != 1 || a.shape().back() != bias.dim(0)) detail::shape_fail("add_bias", a.shape(), bias.shape());
    const std::size_t m = bias.dim(0);
    std::vector<double> v(a.values());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += bias.at(i % m);
    return detail::make_result("add_bias", a.shape(), std::move(v), {a, bias}, [m](detail::Node& self) {
        detail::accumulate(*self.inputs[0], self.grad);
        if (self.inputs[1]->requires_grad) {
            std::vector<double> g(m, 0.0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % m] += self.grad[i];
            detail::accumulate(*self.inputs[1], g);
        }
    });
}

namespace detail {

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D dfdx_from_y) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.at(i));
    return make_result(op, a.shape(), std::move(v), {a}, [dfdx_from_y](Node& self) {
        const Node& in = *self.inputs[0];
        std::vector<double> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * dfdx_from_y(in.value[i], self.value[i]);
        accumulate(*self.inputs[0], g);
    });
}

}  // namespace detail

inline Tensor tanh(const Tensor& a) {
    return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor leaky_relu(const Tensor& a) {
    return detail::unary("leaky_relu", a, [](double x) { return x > 0 ? x : kLeakySlope * x; },
                         [](double x, double) { return x > 0 ? 1.0 : kLeakySlope; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// [n,k] x [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) detail::shape_fail("matmul", a.shape(), b.shape());
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> v(n * m);
    detail::MapMat(v.data(), n, m).noalias() =
        detail::ConstMapMat(a.data().data(), n, k) * detail::ConstMapMat(b.data().data(), k, m);
    return detail::make_result("matmul", {n, m}, std::move(v), {a, b}, [n, k, m](detail::Node& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        detail::ConstMapMat G(self.grad.data(), n, m);
        if (A.requires_grad) {
            A.ensure_grad();
            detail::MapMat(A.grad.data(), n, k).noalias() += G * detail::ConstMapMat(B.value.data(), k, m).transpose();
        }
        if (B.requires_grad) {
            B.ensure_grad();
            detail::MapMat(B.grad.data(), k, m).noalias() += detail::ConstMapMat(A.value.data(), n, k).transpose() * G;
        }
    });
}

/// [B,n,k] x [B,k,m] -> [B,n,m]
inline Tensor batch_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        detail::shape_fail("batch_matmul", a.shape(), b.shape());
    }
    const std::size_t bs = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
    std::vector<double> v(bs * n * m);
    for (std::size_t i = 0; i < bs; ++i) {
        detail::MapMat(v.data() + i * n * m, n, m).noalias() =
            detail::ConstMapMat(a.data().data() + i * n * k, n, k) * detail::ConstMapMat(b.data().data() + i * k * m, k, m);
    }
    return detail::make_result("batch_matmul", {bs, n, m}, std::move(v), {a, b}, [bs, n, k, m](detail::Node& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        if (A.requires_grad) A.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        for (std::size_t i = 0; i < bs; ++i) {
            detail::ConstMapMat G(self.grad.data() + i * n * m, n, m);
            if (A.requires_grad) {
                detail::MapMat(A.grad.data() + i * n * k, n, k).noalias() +=
                    G * detail::ConstMapMat(B.value.data() + i * k * m, k, m).transpose();
            }
            if (B.requires_grad) {
                detail::MapMat(B.grad.data() + i * k * m, k, m).noalias() +=
                    detail::ConstMapMat(A.value.data() + i * n * k, n, k).transpose() * G;
            }
        }
    });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose: rank must be 2 or 3, got " + shape_str(a.shape()));
    const std::size_t bs = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t r = a.shape()[a.rank() - 2], c = a.shape()[a.rank() - 1];
    Shape out_shape = a.shape();
    std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
    std::vector<double> v(a.size());
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) v[b * r * c + j * r + i] = a.at(b * r * c + i * c + j);
        }
    }
    return detail::make_result("transpose", out_shape, std::move(v), {a}, [bs, r, c](detail::Node& self) {
        std::vector<double> g(self.grad.size());
        for (std::size_t b = 0; b < bs; ++b) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] = self.grad[b * r * c + j * r + i];
            }
        }
        detail::accumulate(*self.inputs[0], g);
    });
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape l(p.shape().begin(), p.shape().end() - 1);
        if (l != lead) detail::shape_fail("concat", parts[0].shape(), p.shape());
        widths.push_back(p.shape().back());
        total += widths.back();
    }
    const std::size_t rows = numel(lead);
    std::vector<double> v(rows * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(parts[k].data().data() + r * widths[k], widths[k], v.data() + r * total + off);
        }
        off += widths[k];
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    return detail::make_result("concat", out_shape, std::move(v), parts, [rows, total, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& in = *self.inputs[k];
            if (in.requires_grad) {
                in.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < widths[k]; ++j) in.grad[r * widths[k] + j] += self.grad[r * total + off + j];
                }
            }
            off += widths[k];
        }
    });
}

/// Columns [begin, end) of the last axis.
inline Tensor slice_last(const Tensor& a, std::size_t begin, std::size_t end) {
    const std::size_t w = a.shape().back();
    if (begin >= end || end > w) throw ShapeError("slice_last: range out of bounds for " + shape_str(a.shape()));
    const std::size_t rows = a.size() / w, sw = end - begin;
    std::vector<double> v(rows * sw);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data().data() + r * w + begin, sw, v.data() + r * sw);
    Shape out_shape = a.shape();
    out_shape.back() = sw;
    return detail::make_result("slice_last", out_shape, std::move(v), {a}, [rows, w, sw, begin](detail::Node& self) {
        auto& in = *self.inputs[0];
        in.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < sw; ++j) in.grad[r * w + begin + j] += self.grad[r * sw + j];
        }
    });
}

/// [B,M,d] -> [B,d], mean over the set axis.
inline Tensor mean_pool(const Tensor& a) {
    if (a.rank() != 3 || a.dim(1) == 0) throw ShapeError("mean_pool: expected [B,M,d] with M >= 1, got " + shape_str(a.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), d = a.dim(2);
    std::vector<double> v(bs * d, 0.0);
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) v[b * d + j] += a.at((b * m + i) * d + j);
        }
        for (std::size_t j = 0; j < d; ++j) v[b * d + j] /= static_cast<double>(m);
    }
    return detail::make_result("mean_pool", {bs, d}, std::move(v), {a}, [bs, m, d](detail::Node& self) {
        std::vector<double> g(bs * m * d);
        for (std::size_t b = 0; b < bs; ++b) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < d; ++j) g[(b * m + i) * d + j] = self.grad[b * d + j] / static_cast<double>(m);
            }
        }
        detail::accumulate(*self.inputs[0], g);
    });
}

/// [B,d] -> [B,M,d] by repeating each row M times.
inline Tensor expand_set(const Tensor& a, std::size_t m) {
    if (a.rank() != 2) throw ShapeError("expand_set: expected [B,d], got " + shape_str(a.shape()));
    const std::size_t bs = a.dim(0), d = a.dim(1);
    std::vector<double> v(bs * m * d);
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t i = 0; i < m; ++i) std::copy_n(a.data().data() + b * d, d, v.data() + (b * m + i) * d);
    }
    return detail::make_result("expand_set", {bs, m, d}, std::move(v), {a}, [bs, m, d](detail::Node& self) {
        std::vector<double> g(bs * d, 0.0);
        for (std::size_t b = 0; b < bs; ++b) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < d; ++j) g[b * d + j] += self.grad[(b * m + i) * d + j];
            }
        }
        detail::accumulate(*self.inputs[0], g);
    });
}

/// Exp-normalization along `axis` with max subtraction.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
    const std::size_t len = a.shape()[axis];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const std::size_t outer = a.size() / (len * inner);
    std::vector<double> v(a.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -INFINITY;
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a.at(base + k * inner));
            double s = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                v[base + k * inner] = std::exp(a.at(base + k * inner) - mx);
                s += v[base + k * inner];
            }
            for (std::size_t k = 0; k < len; ++k) v[base + k * inner] /= s;
        }
    }
    return detail::make_result("softmax", a.shape(), std::move(v), {a}, [outer, inner, len](detail::Node& self) {
        std::vector<double> g(self.grad.size());
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    const std::size_t idx = base + k * inner;
                    g[idx] = self.value[idx] * (self.grad[idx] - dot);
                }
            }
        }
        detail::accumulate(*self.inputs[0], g);
    });
}

inline Tensor softmax(const Tensor& a) { return softmax(a, a.rank() - 1); }

/// Log-softmax along the last axis.
inline Tensor log_softmax(const Tensor& a) {
    const std::size_t len = a.shape().back();
    const std::size_t rows = a.size() / len;
    std::vector<double> v(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a.at(r * len + k));
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) s += std::exp(a.at(r * len + k) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t k = 0; k < len; ++k) v[r * len + k] = a.at(r * len + k) - lse;
    }
    return detail::make_result("log_softmax", a.shape(), std::move(v), {a}, [rows, len](detail::Node& self) {
        std::vector<double> g(self.grad.size());
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t k = 0; k < len; ++k) gs += self.grad[r * len + k];
            for (std::size_t k = 0; k < len; ++k) {
                g[r * len + k] = self.grad[r * len + k] - std::exp(self.value[r * len + k]) * gs;
            }
        }
        detail::accumulate(*self.inputs[0], g);
    });
}

/// Sum of all entries, as a [1] tensor.
inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
        std::vector<double> g(self.inputs[0]->value.size(), self.grad[0]);
        detail::accumulate(*self.inputs[0], g);
    });
}

/// Inner product of two same-shape tensors, as a [1] tensor.
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

/// Rows of an embedding matrix [V,d] selected by ids -> [B,d].
inline Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be [V,d], got " + shape_str(table.shape()));
    const std::size_t vsz = table.dim(0), d = table.dim(1);
    std::vector<double> v(ids.size() * d);
    for (std::size_t b = 0; b < ids.size(); ++b) {
        if (ids[b] >= vsz) throw ShapeError("embedding: id " + std::to_string(ids[b]) + " out of range");
        std::copy_n(table.data().data() + ids[b] * d, d, v.data() + b * d);
    }
    return detail::make_result("embedding", {ids.size(), d}, std::move(v), {table}, [ids, d](detail::Node& self) {
        auto& t = *self.inputs[0];
        t.ensure_grad();
        for (std::size_t b = 0; b < ids.size(); ++b) {
            for (std::size_t j = 0; j < d; ++j) t.grad[ids[b] * d + j] += self.grad[b * d + j];
        }
    });
}

/// Rows of a [B,...] tensor reordered/duplicated by `rows` along axis 0.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
    const std::size_t stride = a.size() / a.dim(0);
    std::vector<double> v(rows.size() * stride);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.dim(0)) throw ShapeError("gather_rows: row index out of range");
        std::copy_n(a.data().data() + rows[i] * stride, stride, v.data() + i * stride);
    }
    Shape s = a.shape();
    s[0] = rows.size();
    return detail::make_result("gather_rows", s, std::move(v), {a}, [rows, stride](detail::Node& self) {
        auto& in = *self.inputs[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < stride; ++j) in.grad[rows[i] * stride + j] += self.grad[i * stride + j];
        }
    });
}

/// sum_b weights[b] * a[b, ids[b]] for a [B,V] tensor, as a [1] tensor.
inline Tensor pick(const Tensor& a, const std::vector<std::size_t>& ids, const std::vector<double>& weights) {
    if (a.rank() != 2 || ids.size() != a.dim(0) || weights.size() != ids.size()) {
        throw ShapeError("pick: expected [B,V] with B ids and weights, got " + shape_str(a.shape()));
    }
    const std::size_t v = a.dim(1);
    double s = 0.0;
    for (std::size_t b = 0; b < ids.size(); ++b) {
        if (weights[b] != 0.0) s += weights[b] * a.at(b * v + ids[b]);
    }
    return detail::make_result("pick", {1}, {s}, {a}, [ids, weights, v](detail::Node& self) {
        auto& in = *self.inputs[0];
        in.ensure_grad();
        for (std::size_t b = 0; b < ids.size(); ++b) in.grad[b * v + ids[b]] += self.grad[0] * weights[b];
    });
}

// ---------------------------------------------------------------------------
// Layers.

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t out_dim() const { return weight.dim(1); }

    Tensor operator()(const Tensor& x) const {
        if (x.shape().back() != in_dim()) {
            throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
        }
        if (x.rank() == 2) return add_bias(matmul(x, weight), bias);
        const std::size_t rows = x.size() / in_dim();
        Shape out = x.shape();
        out.back() = out_dim();
        return reshape(add_bias(matmul(reshape(x, {rows, in_dim()}), weight), bias), out);
    }
};

inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng, double scale = -1.0) {
    const double s = scale > 0 ? scale : 1.0 / std::sqrt(static_cast<double>(in));
    return Linear{Tensor::uniform({in, out}, rng, s, true), Tensor::zeros({out}, true)};
}

/// LSTM cell; gate column blocks are ordered input, forget, candidate, output.
struct LstmCell {
    Tensor weight;  // [in + hidden, 4 * hidden]
    Tensor bias;    // [4 * hidden]

    std::size_t hidden() const { return bias.dim(0) / 4; }
    std::size_t in_dim() const { return weight.dim(0) - hidden(); }
};

inline LstmCell make_lstm(std::size_t in, std::size_t hidden, Rng& rng, double scale = -1.0) {
    const double s = scale > 0 ? scale : 1.0 / std::sqrt(static_cast<double>(hidden));
    return LstmCell{Tensor::uniform({in + hidden, 4 * hidden}, rng, s, true), Tensor::zeros({4 * hidden}, true)};
}

struct LstmState {
    Tensor h;
    Tensor c;
};

/// One step of the standard LSTM update. Returns the new (h, c).
inline LstmState lstm_step(const Tensor& input, const LstmState& state, const LstmCell& cell) {
    const std::size_t hd = cell.hidden();
    if (input.rank() != 2 || input.dim(1) != cell.in_dim() || state.h.shape() != Shape{input.dim(0), hd} ||
        state.c.shape() != state.h.shape()) {
        throw ShapeError("lstm_step: input " + shape_str(input.shape()) + ", state " + shape_str(state.h.shape()) +
                         " incompatible with cell " + shape_str(cell.weight.shape()));
    }
    const Tensor z = add_bias(matmul(concat({input, state.h}), cell.weight), cell.bias);
    const Tensor i = sigmoid(slice_last(z, 0, hd));
    const Tensor f = sigmoid(slice_last(z, hd, 2 * hd));
    const Tensor g = tanh(slice_last(z, 2 * hd, 3 * hd));
    const Tensor o = sigmoid(slice_last(z, 3 * hd, 4 * hd));
    const Tensor c = add(mul(f, state.c), mul(i, g));
    const Tensor h = mul(o, tanh(c));
    return LstmState{h, c};
}

struct GluCell {
    Linear value;
    Linear gate;
};

inline GluCell make_glu(std::size_t in, std::size_t out, Rng& rng) {
    GluCell g{make_linear(in, out, rng), make_linear(in, out, rng)};
    return g;
}

/// value(x) * sigmoid(gate(x))
inline Tensor glu(const Tensor& x, const GluCell& cell) {
    if (x.shape().back() != cell.value.in_dim() || x.shape().back() != cell.gate.in_dim()) {
        throw ShapeError("glu: input " + shape_str(x.shape()) + " does not match cell input " +
                         std::to_string(cell.value.in_dim()));
    }
    return mul(cell.value(x), sigmoid(cell.gate(x)));
}

}  // namespace deconf
