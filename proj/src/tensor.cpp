#include "vitkd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vitkd {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

Tensor make_node(Shape shape, std::vector<float> value, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(value.size()))
        throw ShapeError("tensor data size " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    auto n = shape_numel(shape);
    return make_node(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f), false);
}

Tensor Tensor::full(Shape shape, float v) {
    auto n = shape_numel(shape);
    return make_node(std::move(shape), std::vector<float>(static_cast<size_t>(n), v), false);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
    return make_node(std::move(shape), std::move(data), false);
}

Tensor Tensor::scalar(float v) { return make_node({1}, {v}, false); }

Tensor Tensor::param(Shape shape, std::vector<float> data) {
    return make_node(std::move(shape), std::move(data), true);
}

int64_t Tensor::size(int64_t d) const {
    if (d < 0) d += dim();
    if (d < 0 || d >= dim())
        throw ShapeError("axis " + std::to_string(d) + " out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<size_t>(d)];
}

void Tensor::set_requires_grad(bool v) {
    if (node_->backward_fn)
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = v;
}

const std::vector<float>& Tensor::grad() const {
    if (node_->grad.empty()) throw ContractError("tensor has no gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

Tensor Tensor::detach() const { return make_node(node_->shape, node_->value, false); }

Tensor Tensor::clone() const { return make_node(node_->shape, node_->value, false); }

bool Tensor::all_finite() const {
    for (float v : node_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward on undefined tensor");
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    auto root = loss.node_;
    if (!root->requires_grad)
        throw ContractError("backward on a tensor with no recorded graph");
    if (root->consumed)
        throw ContractError("backward called twice on the same graph; rerun the forward pass first");

    // Reverse topological order via iterative post-order DFS over grad-requiring
    // parents. `order` holds strong references: releasing an earlier node's tape
    // must not free a node that is still waiting for its own backward call.
    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<std::shared_ptr<detail::Node>, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            std::shared_ptr<detail::Node> p = node->parents[idx];
            ++idx;
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = it->get();
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
            // Release the tape eagerly; keeps peak memory flat over a run.
            n->backward_fn = nullptr;
            n->parents.clear();
            n->consumed = true;
        }
    }
    root->consumed = true;
}

}  // namespace vitkd
