#include "faxbev/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace faxbev {

const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

Dtype promote(Dtype a, Dtype b) {
  return (a == Dtype::F64 || b == Dtype::F64) ? Dtype::F64 : Dtype::F32;
}

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ", ";
  }
  out += ")";
  return out;
}

namespace {
std::atomic<bool> g_debug_checks{
#ifdef NDEBUG
    false
#else
    true
#endif
};
}  // namespace

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  // rejection-free modulo is fine at desk scale
  uint64_t span = static_cast<uint64_t>(hi - lo + 1);
  return lo + static_cast<int64_t>(gen_() % span);
}

namespace detail {

std::shared_ptr<Node> make_node(Shape shape, Dtype dt, bool requires_grad,
                                std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->dtype = dt;
  n->requires_grad = requires_grad;
  n->values.resize(static_cast<size_t>(numel_of(n->shape)), 0.0);
  n->parents = std::move(parents);
  return n;
}

void quantize(std::vector<double>& v, Dtype dt) {
  if (dt == Dtype::F64) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void finalize(Node& n) {
  quantize(n.values, n.dtype);
  if (debug_checks()) {
    for (size_t i = 0; i < n.values.size(); ++i) {
      if (!std::isfinite(n.values[i])) {
        throw NumericError("non-finite value at flat index " + std::to_string(i) +
                           " in tensor of shape " + shape_str(n.shape));
      }
    }
  }
}

std::vector<double>& ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, Dtype dt, bool requires_grad) {
  return Tensor(detail::make_node(std::move(shape), dt, requires_grad, {}));
}

Tensor Tensor::full(Shape shape, double value, Dtype dt, bool requires_grad) {
  auto n = detail::make_node(std::move(shape), dt, requires_grad, {});
  std::fill(n->values.begin(), n->values.end(), value);
  detail::finalize(*n);
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, Dtype dt,
                         bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != numel_of(shape)) {
    throw ShapeError("from_data: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  auto n = detail::make_node(std::move(shape), dt, requires_grad, {});
  n->values = std::move(values);
  detail::finalize(*n);
  return Tensor(std::move(n));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dt,
                       bool requires_grad) {
  auto n = detail::make_node(std::move(shape), dt, requires_grad, {});
  for (double& v : n->values) v = rng.uniform(lo, hi);
  detail::finalize(*n);
  return Tensor(std::move(n));
}

double Tensor::at(const std::vector<int64_t>& idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) {
    throw ShapeError("at: index rank " + std::to_string(idx.size()) +
                     " for tensor of rank " + std::to_string(s.size()));
  }
  int64_t flat = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    flat = flat * s[i] + idx[i];
  }
  return node_->values[static_cast<size_t>(flat)];
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward: loss must be a defined scalar tensor");
  }
  detail::Node* root = loss.node().get();
  if (!root->requires_grad) return;  // nothing reachable to differentiate

  // Iterative post-order DFS over requires_grad subgraph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      detail::Node* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Leaf grads accumulate across sweeps; interior grads are per-sweep
  // scratch and start from zero, otherwise a second backward() over the same
  // graph would compound stale interior contributions.
  for (detail::Node* n : order) {
    if (n->backprop) {
      n->grad.assign(n->values.size(), 0.0);
    } else {
      detail::ensure_grad(*n);
    }
  }
  detail::ensure_grad(*root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

Tensor ParamStore::add(const std::string& name, Tensor t) {
  for (const Parameter& p : params_) {
    if (p.name == name) {
      throw ConfigError("duplicate parameter name: " + name);
    }
  }
  params_.push_back(Parameter{name, t});
  return t;
}

Parameter* ParamStore::find(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<Parameter> ParamStore::sorted() const {
  std::vector<Parameter> out = params_;
  std::sort(out.begin(), out.end(),
            [](const Parameter& a, const Parameter& b) { return a.name < b.name; });
  return out;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

}  // namespace faxbev
