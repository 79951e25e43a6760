#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace faxbev {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

const char* dtype_name(Dtype dt);
Dtype promote(Dtype a, Dtype b);

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// When enabled, every op result is scanned for NaN/Inf and a NumericError is
// thrown on the first hit. Defaults to on in debug builds.
void set_debug_checks(bool on);
bool debug_checks();

// Deterministic RNG. All randomness in the library flows through this type so
// that fixed seeds reproduce bit-identical runs regardless of platform
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t bits() { return gen_(); }
  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * canonical(); }
  // uniform integer in [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi);
  double canonical() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 gen_;
};

class Tensor;

namespace detail {

// Values are stored as doubles regardless of dtype; tensors tagged F32 are
// kept rounded to f32 precision after every op, so serialization to f32 is
// lossless and fixed-seed runs stay bit-identical across dtypes.
struct Node {
  Shape shape;
  Dtype dtype = Dtype::F32;
  bool requires_grad = false;
  std::vector<double> values;
  std::vector<double> grad;  // non-empty only after backward()
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
};

std::shared_ptr<Node> make_node(Shape shape, Dtype dt, bool requires_grad,
                                std::vector<std::shared_ptr<Node>> parents);
// Quantize + optional finite check. Call after filling node->values.
void finalize(Node& n);
void quantize(std::vector<double>& v, Dtype dt);
// Allocates a zero grad buffer if absent.
std::vector<double>& ensure_grad(Node& n);

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, Dtype dt = Dtype::F32, bool requires_grad = false);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32,
                     bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          Dtype dt = Dtype::F32, bool requires_grad = false);
  // init ~ uniform(lo, hi)
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        Dtype dt = Dtype::F32, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }
  Dtype dtype() const { return node_->dtype; }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->values; }
  // Direct mutation for initialization and optimizer steps only. Never call
  // on a tensor that participates in a live tape.
  std::vector<double>& mutable_values() { return node_->values; }

  // nullptr until backward() has reached this tensor
  const std::vector<double>* grad() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Convenience accessor for tests; row-major indexing.
  double at(const std::vector<int64_t>& idx) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar loss. Grad buffers are accumulated, so a
// second call without zeroing grads adds to the first.
void backward(const Tensor& loss);

// A named trainable tensor. Names are unique within a ParamStore and are the
// keys of the checkpoint format.
struct Parameter {
  std::string name;
  Tensor tensor;
};

class ParamStore {
 public:
  // Registers and returns the tensor; throws ConfigError on duplicate names.
  Tensor add(const std::string& name, Tensor t);
  Parameter* find(const std::string& name);
  // Sorted by name.
  std::vector<Parameter> sorted() const;
  const std::vector<Parameter>& items() const { return params_; }
  std::vector<Parameter>& items() { return params_; }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<Parameter> params_;
};

}  // namespace faxbev
