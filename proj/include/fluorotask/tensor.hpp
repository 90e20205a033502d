#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fluorotask {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Storage node shared by tensor handles. Values and gradients are row-major
// doubles; the gradient buffer stays empty until something accumulates into
// it, which lets the backward pass skip branches nothing flowed through.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const;
  int dim(int axis) const { return node_->shape[axis]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  // Gradient buffer, allocated (zero-filled) on first use.
  std::vector<double>& grad();
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  std::uint64_t id() const { return node_->id; }
  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Execution-ordered record of differentiable operations. While a Tape is
// alive it is the active tape for the thread; every op that involves a
// grad-requiring tensor appends one entry. Replaying entries back-to-front is
// a valid topological order of the data-flow graph, because an operation can
// only ever consume tensors that already existed when it ran.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const char* op, std::vector<std::uint64_t> input_ids,
              const Tensor& output, std::function<void()> backward);

  // Seeds d(root)/d(root) = 1 and walks the tape in reverse, accumulating
  // into .grad of every tensor on a path to the root. `root` must be scalar.
  void backward(const Tensor& root);

  void clear();
  std::size_t size() const { return entries_.size(); }

  // Structural check that the recorded order is topological: every entry may
  // only consume leaves or outputs of earlier entries.
  bool topologically_ordered() const;

  struct Entry {
    const char* op;
    std::vector<std::uint64_t> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Accumulates `src` into the node's gradient buffer, allocating on demand.
void accumulate_grad(detail::Node* node, const double* src, std::int64_t n);

}  // namespace fluorotask
