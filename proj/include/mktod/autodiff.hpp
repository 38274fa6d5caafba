#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

// Reverse-mode automatic differentiation over dense f64 arrays.
//
// Graphs are define-by-run: every op call records a node holding the forward
// values and a backward closure, and the whole graph is rebuilt each training
// step. Tensors are cheap handles sharing a node. backward() walks the graph
// in reverse topological order and accumulates (+=) into leaf gradients, so
// calling it twice without zero_grads() doubles every leaf grad.
namespace mktod::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily, only for nodes that need it
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void()> backward_fn;  // empty for leaves

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return node_->size(); }
    bool is_scalar() const { return size() == 1; }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool requires_grad() const { return node_->requires_grad; }

    // Scalar accessors.
    double item() const;

    // Value copy with no graph attachment and no gradient requirement.
    Tensor detach() const;

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]

Tensor add(const Tensor& a, const Tensor& b);       // same shape
Tensor sub(const Tensor& a, const Tensor& b);       // same shape
Tensor mul(const Tensor& a, const Tensor& b);       // elementwise, same shape
Tensor add_rowwise(const Tensor& m, const Tensor& v);  // [n,d] + [d] per row
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor rsqrt(const Tensor& a);  // elementwise 1/sqrt(x), x > 0

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);  // [V,d] -> [n,d]
Tensor mean_rows(const Tensor& m);                                     // [n,d] -> [d]
Tensor slice_row(const Tensor& m, int row);                            // [n,d] -> [d]
Tensor stack_rows(const std::vector<Tensor>& rows);                    // n x [d] -> [n,d]
Tensor concat(const std::vector<Tensor>& parts);                       // rank-1 concat
Tensor reshape(const Tensor& a, std::vector<int> shape);

Tensor softmax(const Tensor& x);      // rank-1, max-subtracted
Tensor log_softmax(const Tensor& x);  // rank-1
Tensor logsumexp(const Tensor& x);    // rank-1 -> scalar
Tensor sum(const Tensor& x);          // -> scalar
Tensor dot(const Tensor& a, const Tensor& b);  // rank-1 . rank-1 -> scalar
Tensor pick(const Tensor& x, int i);           // rank-1 -> scalar

// Mean over rows of -log softmax(logits_row)[target_row].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);  // [n,V] -> scalar

// Reverse topological traversal from a scalar loss. Interior grads are reset
// per call; leaf grads accumulate until zeroed.
void backward(const Tensor& loss);

// ---- parameters -----------------------------------------------------------

// Named parameter tensors with deterministic seeded initialization.
// Iteration over names is lexicographic (std::map order).
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), seeded per (store seed, name).
    Tensor add(const std::string& name, std::vector<int> shape, int fan_in);
    Tensor add_zeros(const std::string& name, std::vector<int> shape);
    Tensor add_values(const std::string& name, std::vector<int> shape, std::vector<double> values);

    bool has(const std::string& name) const { return params_.count(name) > 0; }
    Tensor get(const std::string& name) const;
    std::vector<std::string> names() const;
    std::size_t count() const { return params_.size(); }
    std::uint64_t seed() const { return seed_; }

    void zero_grads();
    double grad_norm() const;

    std::map<std::string, std::vector<double>> snapshot() const;
    void restore(const std::map<std::string, std::vector<double>>& snap);

    std::map<std::string, Tensor>::iterator begin() { return params_.begin(); }
    std::map<std::string, Tensor>::iterator end() { return params_.end(); }
    std::map<std::string, Tensor>::const_iterator begin() const { return params_.begin(); }
    std::map<std::string, Tensor>::const_iterator end() const { return params_.end(); }

private:
    std::map<std::string, Tensor> params_;
    std::uint64_t seed_ = 0;
};

// ---- checkpoints ----------------------------------------------------------

// Two files: <prefix>.json manifest with {name, shape, offset} per parameter,
// and <prefix>.bin holding one little-endian f32 blob. Training math is f64;
// checkpoints store f32, and save/load/save round-trips bit-exactly.
void save_checkpoint(const ParameterStore& store, const std::string& prefix);
void load_checkpoint(ParameterStore& store, const std::string& prefix);

// Deterministic uniform doubles/ints independent of libstdc++ distribution
// internals; used for init, data generation and batching.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}
    std::uint64_t next_u64();
    double next_double();                       // [0,1)
    double uniform(double lo, double hi);       // [lo,hi)
    std::int64_t next_int(std::int64_t n);      // [0,n)
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(next_int(i + 1))]);
        }
    }

private:
    std::uint64_t state_;
};

std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag);

}  // namespace mktod::ad
