#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfd/tensor.hpp"

namespace dfd {

// Minimal reverse-mode autodiff over Tensor. Graphs are built per forward
// pass; backward() walks them once in reverse topological order. Nodes whose
// ancestors contain no parameters are constant folded out of the backward
// sweep via requires_grad.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad; // allocated on demand, same shape as value
    bool requires_grad = false;
    bool is_param = false;
    std::string name;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop; // accumulate this->grad into parents

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(value.dims);
    }
};

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var make_param(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->is_param = true;
    n->name = std::move(name);
    return n;
}

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

/// Cuts the graph: returns a constant with the same value.
inline Var detach(const Var& x) { return constant(x->value); }

/// Reverse sweep from a scalar root. Seeds d(root)/d(root) = 1.
inline void backward(const Var& root) {
    if (root->value.numel() != 1) throw shape_error("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next == 0 && !seen.insert(n).second) {
            stack.pop_back();
            continue;
        }
        bool descended = false;
        while (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && next >= n->parents.size()) {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
    }
}

inline void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) p->grad = Tensor();
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

inline Var mul_scalar(const Var& a, float c) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= c;
    return make_op(std::move(out), {a}, [a, c](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * c;
    });
}

inline Var add_scalar(const Var& a, float c) {
    Tensor out = a->value;
    for (auto& v : out.data) v += c;
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            if (a->value[i] > 0.0f) a->grad[i] += n.grad[i];
    });
}

inline Var leaky_relu(const Var& a, float slope = 0.2f) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v > 0.0f ? v : slope * v;
    return make_op(std::move(out), {a}, [a, slope](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += n.grad[i] * (a->value[i] > 0.0f ? 1.0f : slope);
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    // backprop reads its own node's value: n.value is the activation output
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += n.grad[i] * n.value[i] * (1.0f - n.value[i]);
    });
}

inline Var tanh_op(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::tanh(v);
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += n.grad[i] * (1.0f - n.value[i] * n.value[i]);
    });
}

// ---------------------------------------------------------------------------
// Reductions (double accumulation)
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    Tensor out({1});
    out[0] = static_cast<float>(a->value.sum());
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->ensure_grad();
        const float g = n.grad[0];
        for (auto& v : a->grad.data) v += g;
    });
}

inline Var mean_all(const Var& a) {
    const auto count = static_cast<double>(a->value.numel());
    Tensor out({1});
    out[0] = static_cast<float>(a->value.sum() / count);
    return make_op(std::move(out), {a}, [a, count](Node& n) {
        a->ensure_grad();
        const float g = static_cast<float>(n.grad[0] / count);
        for (auto& v : a->grad.data) v += g;
    });
}

/// Mean squared error between a graph value and a fixed target.
inline Var mse_against(const Var& a, const Tensor& target) {
    require_same_shape(a->value, target, "mse_against");
    const auto count = static_cast<double>(a->value.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < a->value.numel(); ++i) {
        const double d = static_cast<double>(a->value[i]) - target[i];
        acc += d * d;
    }
    Tensor out({1});
    out[0] = static_cast<float>(acc / count);
    Tensor tgt = target;
    return make_op(std::move(out), {a}, [a, tgt = std::move(tgt), count](Node& n) {
        a->ensure_grad();
        const float g = static_cast<float>(2.0 / count) * n.grad[0];
        for (std::int64_t i = 0; i < a->grad.numel(); ++i)
            a->grad[i] += g * (a->value[i] - tgt[i]);
    });
}

/// Sum of squared error (unnormalized) against a fixed target.
inline Var sse_against(const Var& a, const Tensor& target) {
    require_same_shape(a->value, target, "sse_against");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a->value.numel(); ++i) {
        const double d = static_cast<double>(a->value[i]) - target[i];
        acc += d * d;
    }
    Tensor out({1});
    out[0] = static_cast<float>(acc);
    Tensor tgt = target;
    return make_op(std::move(out), {a}, [a, tgt = std::move(tgt)](Node& n) {
        a->ensure_grad();
        const float g = 2.0f * n.grad[0];
        for (std::int64_t i = 0; i < a->grad.numel(); ++i)
            a->grad[i] += g * (a->value[i] - tgt[i]);
    });
}

} // namespace dfd
