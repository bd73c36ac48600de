#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vitkd/error.hpp"

namespace vitkd {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One value in the recorded computation graph. Parents and the backward
// closure are kept only while gradients are still needed; backward() releases
// them as it walks the tape.
struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;  // set once backward() has run through this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    // Zero-filled grad buffer, allocated on first use.
    std::vector<float>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
        return grad;
    }
};

}  // namespace detail

// Dense f32 tensor handle with reverse-mode autodiff. Copying a Tensor copies
// the handle, not the storage (two copies see the same buffer).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float v);
    static Tensor from_data(Shape shape, std::vector<float> data);
    static Tensor scalar(float v);
    // Leaf with requires_grad set; the unit optimizers update these in place.
    static Tensor param(Shape shape, std::vector<float> data);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t size(int64_t d) const;
    int64_t numel() const { return node_->numel(); }

    std::vector<float>& data() { return node_->value; }
    const std::vector<float>& data() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<float>& grad() const;
    void zero_grad();

    float item() const;

    // Same values, detached from any recorded graph.
    Tensor detach() const;
    // Deep copy of the value buffer (detached leaf).
    Tensor clone() const;

    bool all_finite() const;

    std::shared_ptr<detail::Node> node_;

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    friend Tensor make_node(Shape, std::vector<float>, bool);
};

// Internal: wrap a freshly computed buffer in a Tensor.
Tensor make_node(Shape shape, std::vector<float> value, bool requires_grad);

// Runs reverse-mode accumulation from a scalar loss. Visits each recorded
// node exactly once in reverse topological order and releases the tape as it
// goes; calling it twice on the same graph is a contract error.
void backward(const Tensor& loss);

// While alive, newly created ops record no graph (teacher / evaluation passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

}  // namespace vitkd
