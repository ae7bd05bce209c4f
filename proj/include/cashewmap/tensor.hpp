#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cashewmap/common.hpp"

namespace cashewmap {

// Reverse-mode tape node. Values are float32 and may be shared with a
// ParameterSet (leaves); gradient buffers always belong to the node, so
// independent graphs over the same parameters can run backward concurrently.
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<float>> values;
    std::vector<float> grad;
    bool requires_grad = false;
    bool has_scalar64 = false;
    double scalar64 = 0.0;  // double-precision value of scalar reductions
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    float* data() { return values->data(); }
    const float* data() const { return values->data(); }
    std::size_t size() const { return values->size(); }

    void ensure_grad() {
        if (grad.size() != values->size()) grad.assign(values->size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        auto node = std::make_shared<TensorNode>();
        node->shape = shape;
        node->values = std::make_shared<std::vector<float>>(static_cast<std::size_t>(numel(shape)), 0.0f);
        node->requires_grad = requires_grad;
        return Tensor(node);
    }

    static Tensor from_values(const Shape& shape, std::vector<float> values, bool requires_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != numel(shape))
            throw Error("Tensor::from_values: size mismatch for shape " + shape_str(shape));
        auto node = std::make_shared<TensorNode>();
        node->shape = shape;
        node->values = std::make_shared<std::vector<float>>(std::move(values));
        node->requires_grad = requires_grad;
        return Tensor(node);
    }

    // Leaf over shared storage; the tape never copies parameter values.
    static Tensor leaf(const Shape& shape, std::shared_ptr<std::vector<float>> storage, bool requires_grad) {
        if (static_cast<std::int64_t>(storage->size()) != numel(shape))
            throw Error("Tensor::leaf: storage size mismatch for shape " + shape_str(shape));
        auto node = std::make_shared<TensorNode>();
        node->shape = shape;
        node->values = std::move(storage);
        node->requires_grad = requires_grad;
        return Tensor(node);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->size(); }
    float* data() { return node_->data(); }
    const float* data() const { return node_->data(); }
    const std::vector<float>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& handle() const { return node_; }

    float item() const {
        if (size() != 1) throw Error("Tensor::item: not a scalar");
        return data()[0];
    }

    // Scalar reductions keep a float64 copy; finite-difference checks need
    // the extra digits.
    double item_f64() const {
        if (node_->has_scalar64) return node_->scalar64;
        return static_cast<double>(item());
    }

    // Reverse-mode sweep from a scalar root.
    void backward() const {
        if (size() != 1) throw Error("Tensor::backward: root must be scalar");
        if (!node_->requires_grad) return;

        // Iterative topological order (graphs are deep enough to overflow a
        // recursive DFS for long sequences).
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<std::pair<TensorNode*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [cur, idx] = stack.back();
            if (idx < cur->parents.size()) {
                TensorNode* parent = cur->parents[idx++].get();
                if (parent->requires_grad && seen.insert(parent).second)
                    stack.emplace_back(parent, 0);
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
        }
    }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_op(const Shape& shape, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    Tensor out = Tensor::zeros(shape, needs);
    if (needs) {
        auto* node = out.node();
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.handle());
        node->backward_fn = std::move(backward_fn);
    }
    return out;
}

inline void accumulate(TensorNode& parent, const float* g, std::size_t n) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    float* dst = parent.grad.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

}  // namespace cashewmap
