#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "ctt/util.hpp"

namespace ctt {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

// A dense row-major array participating in an implicit reverse-mode graph.
// Tensor is a cheap handle (shared node); values are immutable once an op has
// consumed them. Each recorded op stores its parents and a backward closure;
// backward() walks the graph once in reverse topological order.
class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // allocated on demand, same shape as value
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

        long numel() const { return long(value.size()); }
        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return full(shape, 0.0, requires_grad);
    }

    static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = shape;
        n->value.assign(size_t(shape_numel(shape)), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (long(data.size()) != shape_numel(shape)) {
            throw std::invalid_argument("Tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->shape = shape;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from_data({}, {v}); }

    static Tensor randn(const Shape& shape, Rng& rng, double std = 1.0,
                        bool requires_grad = false) {
        Tensor t = zeros(shape, requires_grad);
        for (auto& x : t.data()) x = rng.normal(0.0, std);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return int(node_->shape.size()); }
    long dim(int i) const { return node_->shape[size_t(i)]; }
    long numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const { return node_->grad; }

    double value() const {
        if (numel() != 1) {
            throw std::logic_error("Tensor::value: tensor " + shape_str(shape()) +
                                   " is not a scalar");
        }
        return node_->value[0];
    }

    double at(std::initializer_list<long> idx) const {
        return node_->value[size_t(offset_of(idx))];
    }
    double& at(std::initializer_list<long> idx) {
        return node_->value[size_t(offset_of(idx))];
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Reverse-mode accumulation from a scalar output. Visits each node exactly
    // once in reverse topological order.
    void backward() {
        if (numel() != 1) {
            throw std::logic_error("backward: output must be scalar, got " +
                                   shape_str(shape()));
        }
        std::vector<Node*> order;
        topo_sort(node_.get(), order);
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            n->ensure_grad();  // a node may have received no pushes at all
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

  private:
    long offset_of(std::initializer_list<long> idx) const {
        const Shape& s = node_->shape;
        if (idx.size() != s.size()) {
            throw std::logic_error("Tensor::at: index rank mismatch for " + shape_str(s));
        }
        long off = 0;
        size_t k = 0;
        for (long i : idx) {
            off = off * s[k] + i;
            ++k;
        }
        return off;
    }

    // Iterative post-order DFS; graphs can be deep (per-frame chains), so no
    // recursion.
    static void topo_sort(Node* root, std::vector<Node*>& order) {
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(root, 0);
        visited.insert(root);
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                Node* child = node->parents[next_child].get();
                ++next_child;
                if (child->requires_grad && visited.insert(child).second) {
                    stack.emplace_back(child, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

// Result node builder: requires_grad and graph recording propagate from
// parents; inference-only subgraphs record nothing.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(Tensor::Node&)> backward_fn) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace ctt
