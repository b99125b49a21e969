#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node holding the forward value, the
// accumulated gradient and the rule that pushes the node's gradient into its
// parents. Graphs are built implicitly by the ops below and released when the
// last handle to the root goes away.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lseg/kernels.hpp"
#include "lseg/tensor.hpp"

namespace lseg {

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::uint64_t*& branch_signature_slot() {
    thread_local std::uint64_t* slot = nullptr;
    return slot;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// While alive, ops on this thread record no graph (inference path).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// While alive, piecewise-smooth ops (relu, max pooling) fold every branch
// they take into a signature. Two evaluations with equal signatures lie on the
// same smooth piece; finite-difference checks use this to detect probes that
// straddle a kink.
class BranchRecorder {
public:
    BranchRecorder() : previous_(detail::branch_signature_slot()) { detail::branch_signature_slot() = &signature_; }
    ~BranchRecorder() { detail::branch_signature_slot() = previous_; }
    BranchRecorder(const BranchRecorder&) = delete;
    BranchRecorder& operator=(const BranchRecorder&) = delete;

    std::uint64_t signature() const { return signature_; }

    static bool active() { return detail::branch_signature_slot() != nullptr; }
    static void record(std::uint64_t branch) {
        std::uint64_t& h = *detail::branch_signature_slot();
        h = (h ^ (branch + 1)) * 0x100000001b3ULL;
    }

private:
    std::uint64_t signature_ = 0xcbf29ce484222325ULL;
    std::uint64_t* previous_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated (zero) iff requires_grad
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Tensor<T>& g) {
        if (!requires_grad) return;
        auto dst = grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
};

template <typename T>
class Var {
public:
    Var() : node_(std::make_shared<Node<T>>()) {}

    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        set_requires_grad(requires_grad);
    }

    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    void set_requires_grad(bool flag) {
        node_->requires_grad = flag;
        node_->grad = flag ? zeros_like(node_->value) : Tensor<T>{};
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.fill(T{0});
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Creates the result of an op. The backward rule is recorded only when grad
// mode is on and some parent requires a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
                   std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->grad = zeros_like(node->value);
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

// Seeds d(root)/d(root) = 1 and propagates through the graph in reverse
// topological order; every node's rule runs exactly once.
template <typename T>
void backward(const Var<T>& root) {
    if (root.value().size() != 1) {
        throw ShapeError("backward: root must be scalar, got shape " + to_string(root.shape()));
    }
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.
//
// Broadcast rule: b is aligned to the trailing axes of a; missing leading axes
// of b count as size 1 and every b extent must equal a's extent or be 1. The
// result has a's shape. a itself is never broadcast.

enum class BinaryOp { add, sub, mul, max };

namespace detail {

inline bool broadcastable(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    const std::size_t lead = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b[i] != a[lead + i] && b[i] != 1) return false;
    }
    return true;
}

// For each flat index of a, the flat index of the broadcast b element.
inline std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
    const std::size_t rank = a.size();
    const std::size_t lead = rank - b.size();
    std::vector<std::size_t> b_stride(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = b.size(); i-- > 0;) {
        b_stride[lead + i] = b[i] == 1 ? 0 : stride;
        stride *= b[i];
    }
    std::vector<std::size_t> map(numel(a));
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        map[flat] = off;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            off += b_stride[ax];
            if (idx[ax] < a[ax]) break;
            off -= b_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    return map;
}

inline const char* binary_name(BinaryOp op) {
    switch (op) {
        case BinaryOp::add: return "add";
        case BinaryOp::sub: return "sub";
        case BinaryOp::mul: return "mul";
        case BinaryOp::max: return "max";
    }
    return "?";
}

}  // namespace detail

template <typename T>
Var<T> binary(BinaryOp op, const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (!detail::broadcastable(sa, sb)) {
        throw ShapeError(std::string(detail::binary_name(op)) + ": shape mismatch " + to_string(sa) + " vs " +
                         to_string(sb));
    }
    const bool same = sa == sb;
    auto map = same ? std::vector<std::size_t>{} : detail::broadcast_map(sa, sb);
    auto bi = [&map, same](std::size_t i) { return same ? i : map[i]; };

    Tensor<T> out(sa);
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = av[i], y = bv[bi(i)];
        switch (op) {
            case BinaryOp::add: out[i] = x + y; break;
            case BinaryOp::sub: out[i] = x - y; break;
            case BinaryOp::mul: out[i] = x * y; break;
            case BinaryOp::max: out[i] = x >= y ? x : y; break;
        }
    }

    return make_result<T>(std::move(out), {a, b}, detail::binary_name(op),
                          [op, same, map = std::move(map)](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const auto& a_val = pa.value;
                              const auto& b_val = pb.value;
                              const auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const std::size_t j = same ? i : map[i];
                                  T ga{0}, gb{0};
                                  switch (op) {
                                      case BinaryOp::add: ga = g[i]; gb = g[i]; break;
                                      case BinaryOp::sub: ga = g[i]; gb = -g[i]; break;
                                      case BinaryOp::mul: ga = g[i] * b_val[j]; gb = g[i] * a_val[i]; break;
                                      case BinaryOp::max:
                                          if (a_val[i] >= b_val[j]) ga = g[i]; else gb = g[i];
                                          break;
                                  }
                                  if (pa.requires_grad) pa.grad[i] += ga;
                                  if (pb.requires_grad) pb.grad[j] += gb;
                              }
                          });
}

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b) { return binary(BinaryOp::add, a, b); }
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary(BinaryOp::sub, a, b); }
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary(BinaryOp::mul, a, b); }
template <typename T> Var<T> maximum(const Var<T>& a, const Var<T>& b) { return binary(BinaryOp::max, a, b); }

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    return make_result<T>(std::move(out), {x}, "scale", [factor](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += factor * self.grad[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T total{0};
    for (T v : x.value().data()) total += v;
    return make_result<T>(Tensor<T>({1}, std::vector<T>{total}), {x}, "sum", [](Node<T>& self) {
        auto& p = *self.parents[0];
        const T g = self.grad[0];
        for (auto& v : p.grad.data()) v += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x}, "reshape", [](Node<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

// [M x K] * [K x N] -> [M x N]; backward dA = dC * B^T, dB = A^T * dC.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw ShapeError("matmul: dimension mismatch " + to_string(sa) + " x " + to_string(sb));
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out({m, n});
    kernels::gemm<T>(kernels::Trans::no, kernels::Trans::no, m, n, k, a.value().data(), b.value().data(),
                     out.data());
    return make_result<T>(std::move(out), {a, b}, "matmul", [m, n, k](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            kernels::gemm<T>(kernels::Trans::no, kernels::Trans::yes, m, k, n, self.grad.data(), pb.value.data(),
                             pa.grad.data(), true);
        }
        if (pb.requires_grad) {
            kernels::gemm<T>(kernels::Trans::yes, kernels::Trans::no, k, n, m, pa.value.data(), self.grad.data(),
                             pb.grad.data(), true);
        }
    });
}

// Builds an op from an explicit forward value and backward rule. Used for
// test fixtures and one-off ops outside the library.
template <typename T>
Var<T> custom_op(const Var<T>& x, Tensor<T> value, const char* name,
                 std::function<void(const Tensor<T>& grad_out, const Tensor<T>& input, Tensor<T>& grad_in)> rule) {
    return make_result<T>(std::move(value), {x}, name, [rule = std::move(rule)](Node<T>& self) {
        auto& p = *self.parents[0];
        rule(self.grad, p.value, p.grad);
    });
}

}  // namespace lseg
