#include "fluorotask/tensor.hpp"

#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace fluorotask {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {
std::atomic<std::uint64_t> g_next_id{1};
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad) {
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data.assign(static_cast<std::size_t>(shape_numel(node_->shape)), 0.0);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  Tensor t(std::move(shape), requires_grad);
  t.node_->data = std::move(values);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  t.node_->data.assign(t.node_->data.size(), value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(node_->data.size());
}

double Tensor::item() const {
  if (node_->data.size() != 1) {
    throw std::logic_error("item() on tensor of shape " + shape_str(node_->shape));
  }
  return node_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->grad.size(), 0.0);
}

void accumulate_grad(detail::Node* node, const double* src, std::int64_t n) {
  if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  double* dst = node->grad.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<std::uint64_t> input_ids,
                  const Tensor& output, std::function<void()> backward) {
  entries_.push_back(Entry{op, std::move(input_ids), output.node_ptr(), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw std::logic_error("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  root.node()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Entries whose output never received a gradient are off every path to
    // the root; their contribution is identically zero.
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

void Tape::clear() { entries_.clear(); }

bool Tape::topologically_ordered() const {
  std::unordered_set<std::uint64_t> produced;
  for (const auto& e : entries_) {
    for (std::uint64_t in : e.inputs) {
      // An input is fine if some earlier entry produced it; otherwise it must
      // be a leaf, i.e. not produced by any entry at all (including later ones).
      if (produced.count(in)) continue;
      bool produced_later = false;
      for (const auto& other : entries_) {
        if (other.output->id == in) {
          produced_later = true;
          break;
        }
      }
      if (produced_later) return false;
    }
    produced.insert(e.output->id);
  }
  return true;
}

}  // namespace fluorotask
