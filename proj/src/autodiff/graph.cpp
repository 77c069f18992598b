#include "idinvert/autodiff.hpp"

#include <algorithm>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace idinvert::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("access to undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() {
  if (!node_) throw std::logic_error("access to undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return value()[0];
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var constant(Shape shape, double fill) { return constant(Tensor(std::move(shape), fill)); }

Var scalar(double value) { return constant(Tensor({1}, value)); }

Var leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var detach(const Var& x) { return constant(x.value()); }

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  std::vector<Var> result(inputs.size());
  std::unordered_set<Node*> targets;
  for (const auto& in : inputs) {
    if (!in.defined()) throw std::invalid_argument("grad: undefined input");
    if (in.requires_grad()) targets.insert(in.node());
  }

  // Post-order DFS over the recorded graph; also marks nodes that lead to a target.
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> leads;
  if (output.requires_grad()) {
    struct Frame {
      Node* node;
      std::size_t next;
    };
    std::vector<Frame> stack{{output.node(), 0}};
    leads.emplace(output.node(), false);
    while (!stack.empty()) {
      Frame& top = stack.back();
      if (top.next < top.node->inputs.size()) {
        Node* child = top.node->inputs[top.next++].node();
        if (child->requires_grad && !leads.contains(child)) {
          leads.emplace(child, false);
          stack.push_back({child, 0});
        }
        continue;
      }
      Node* done = top.node;
      bool reach = targets.contains(done);
      for (const auto& in : done->inputs) {
        auto it = leads.find(in.node());
        if (it != leads.end() && it->second) reach = true;
      }
      leads[done] = reach;
      order.push_back(done);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> grads;
  std::unordered_map<Node*, Var> handles;
  {
    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace();

    if (output.requires_grad() && leads[output.node()]) {
      grads[output.node()] = constant(Tensor(output.shape(), 1.0));
      handles[output.node()] = output;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      auto git = grads.find(node);
      if (git == grads.end() || !node->backward) continue;
      std::vector<bool> need(node->inputs.size(), false);
      bool any = false;
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        Node* in = node->inputs[i].node();
        auto lit = leads.find(in);
        need[i] = in->requires_grad && lit != leads.end() && lit->second;
        any = any || need[i];
      }
      if (!any) continue;
      Var self = handles.at(node);
      std::vector<Var> in_grads = node->backward(git->second, self, need);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        if (!need[i] || !in_grads[i].defined()) continue;
        Node* in = node->inputs[i].node();
        auto existing = grads.find(in);
        if (existing == grads.end()) {
          grads.emplace(in, in_grads[i]);
          handles.emplace(in, node->inputs[i]);
        } else {
          existing->second = add(existing->second, in_grads[i]);
        }
      }
      // Interior gradients are no longer needed once propagated.
      if (!targets.contains(node)) grads.erase(node);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto it = grads.find(inputs[i].node());
    if (it != grads.end()) {
      result[i] = create_graph ? it->second : detach(it->second);
    } else {
      result[i] = constant(Tensor(inputs[i].shape(), 0.0));
    }
  }
  return result;
}

}  // namespace idinvert::ad
