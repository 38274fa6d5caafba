#include "mktod/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "mktod/kernels.hpp"

namespace mktod::ad {

namespace {

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

NodePtr make_node(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

// Records parents and a backward closure only when gradients can flow.
Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs, std::function<void(Node* self)> backward) {
    bool needs_grad = false;
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
    auto node = make_node(std::move(shape), std::move(values), needs_grad);
    if (needs_grad) {
        node->parents.reserve(inputs.size());
        for (auto& t : inputs) node->parents.push_back(t.node());
        Node* self = node.get();
        node->backward_fn = [self, backward = std::move(backward)]() { backward(self); };
    }
    return Tensor(node);
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            throw std::domain_error(std::string(op) + ": non-finite input value");
        }
    }
}

}  // namespace

void Node::ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
    }
    node_ = make_node(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    kernels::matmul_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node* self) {
        Node* pa = self->parents[0].get();
        Node* pb = self->parents[1].get();
        if (pa->requires_grad) {
            pa->ensure_grad();  // dA += dC * B^T
            kernels::matmul_nt(self->grad.data(), pb->values.data(), pa->grad.data(), m, n, k, true);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();  // dB += A^T * dC
            kernels::matmul_tn(pa->values.data(), self->grad.data(), pb->grad.data(), k, m, n, true);
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
        throw std::invalid_argument("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    kernels::matmul_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node* self) {
        Node* pa = self->parents[0].get();
        Node* pb = self->parents[1].get();
        if (pa->requires_grad) {
            pa->ensure_grad();  // dA += dC * B
            kernels::matmul_nn(self->grad.data(), pb->values.data(), pa->grad.data(), m, n, k, true);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();  // dB += dC^T * A
            kernels::matmul_tn(self->grad.data(), pa->values.data(), pb->grad.data(), n, m, k, true);
        }
    });
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
        for (auto& p : self->parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
        Node* pa = self->parents[0].get();
        Node* pb = self->parents[1].get();
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] -= self->grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
        Node* pa = self->parents[0].get();
        Node* pb = self->parents[1].get();
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                pa->grad[i] += self->grad[i] * pb->values[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                pb->grad[i] += self->grad[i] * pa->values[i];
        }
    });
}

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0]) {
        throw std::invalid_argument("add_rowwise shape mismatch: " + shape_str(m.shape()) + " + " +
                                    shape_str(v.shape()));
    }
    const int rows = m.shape()[0], d = m.shape()[1];
    std::vector<double> out(m.values().size());
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
            out[static_cast<std::size_t>(r) * d + j] = m.values()[static_cast<std::size_t>(r) * d + j] + v.values()[j];
    return make_op(m.shape(), std::move(out), {m, v}, [rows, d](Node* self) {
        Node* pm = self->parents[0].get();
        Node* pv = self->parents[1].get();
        if (pm->requires_grad) {
            pm->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) pm->grad[i] += self->grad[i];
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j)
                    pv->grad[j] += self->grad[static_cast<std::size_t>(r) * d + j];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return make_op(a.shape(), std::move(out), {a}, [c](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i] * c;
    });
}

Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
    return make_op(a.shape(), std::move(out), {a}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i];
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor tanh_op(const Tensor& a) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
    return make_op(a.shape(), std::move(out), {a}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) {
            const double y = self->values[i];
            p->grad[i] += self->grad[i] * (1.0 - y * y);
        }
    });
}

Tensor rsqrt(const Tensor& a) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(a.values()[i] > 0.0)) {
            throw std::domain_error("rsqrt of non-positive value " +
                                    std::to_string(a.values()[i]));
        }
        out[i] = 1.0 / std::sqrt(a.values()[i]);
    }
    return make_op(a.shape(), std::move(out), {a}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) {
            const double y = self->values[i];
            p->grad[i] += self->grad[i] * (-0.5 * y * y * y);
        }
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return make_op(a.shape(), std::move(out), {a}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) {
            if (p->values[i] > 0.0) p->grad[i] += self->grad[i];
        }
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw std::invalid_argument("gather_rows expects a matrix, got " + shape_str(table.shape()));
    }
    const int v = table.shape()[0], d = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range("gather_rows: row " + std::to_string(id) + " out of range [0," +
                                    std::to_string(v) + ")");
        }
    }
    const int n = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * d,
                    table.values().data() + static_cast<std::size_t>(ids[i]) * d,
                    sizeof(double) * static_cast<std::size_t>(d));
    }
    return make_op({n, d}, std::move(out), {table}, [ids, d](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* dst = p->grad.data() + static_cast<std::size_t>(ids[i]) * d;
            const double* src = self->grad.data() + i * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Tensor mean_rows(const Tensor& m) {
    if (m.rank() != 2 || m.shape()[0] < 1) {
        throw std::invalid_argument("mean_rows expects a non-empty matrix, got " + shape_str(m.shape()));
    }
    const int n = m.shape()[0], d = m.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < d; ++j) out[j] += m.values()[static_cast<std::size_t>(r) * d + j];
    for (int j = 0; j < d; ++j) out[j] /= n;
    return make_op({d}, std::move(out), {m}, [n, d](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double inv = 1.0 / n;
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < d; ++j)
                p->grad[static_cast<std::size_t>(r) * d + j] += self->grad[j] * inv;
    });
}

Tensor slice_row(const Tensor& m, int row) {
    if (m.rank() != 2 || row < 0 || row >= m.shape()[0]) {
        throw std::out_of_range("slice_row: row " + std::to_string(row) + " of " + shape_str(m.shape()));
    }
    const int d = m.shape()[1];
    std::vector<double> out(m.values().begin() + static_cast<std::size_t>(row) * d,
                            m.values().begin() + static_cast<std::size_t>(row + 1) * d);
    return make_op({d}, std::move(out), {m}, [row, d](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int j = 0; j < d; ++j) p->grad[static_cast<std::size_t>(row) * d + j] += self->grad[j];
    });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    const int d = static_cast<int>(rows[0].size());
    const int n = static_cast<int>(rows.size());
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * d);
    for (const auto& r : rows) {
        if (r.rank() != 1 || static_cast<int>(r.size()) != d) {
            throw std::invalid_argument("stack_rows: inconsistent row shape " + shape_str(r.shape()));
        }
        out.insert(out.end(), r.values().begin(), r.values().end());
    }
    return make_op({n, d}, std::move(out), rows, [d](Node* self) {
        for (std::size_t i = 0; i < self->parents.size(); ++i) {
            Node* p = self->parents[i].get();
            if (!p->requires_grad) continue;
            p->ensure_grad();
            const double* src = self->grad.data() + i * static_cast<std::size_t>(d);
            for (int j = 0; j < d; ++j) p->grad[j] += src[j];
        }
    });
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input");
    std::vector<double> out;
    std::vector<int> sizes;
    for (const auto& p : parts) {
        if (p.rank() != 1) throw std::invalid_argument("concat expects rank-1 parts");
        sizes.push_back(static_cast<int>(p.size()));
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    const int total = static_cast<int>(out.size());
    return make_op({total}, std::move(out), parts, [sizes](Node* self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self->parents.size(); ++i) {
            Node* p = self->parents[i].get();
            const std::size_t sz = static_cast<std::size_t>(sizes[i]);
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t j = 0; j < sz; ++j) p->grad[j] += self->grad[off + j];
            }
            off += sz;
        }
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_size(shape) != a.size()) {
        throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                    " changes element count");
    }
    return make_op(std::move(shape), a.values(), {a}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i];
    });
}

namespace {

// Shared softmax forward with max subtraction; x must be finite.
std::vector<double> softmax_values(const std::vector<double>& x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
}

}  // namespace

Tensor softmax(const Tensor& x) {
    if (x.rank() != 1 || x.size() < 1) {
        throw std::invalid_argument("softmax expects a non-empty vector, got " + shape_str(x.shape()));
    }
    check_finite(x, "softmax");
    auto out = softmax_values(x.values());
    return make_op(x.shape(), std::move(out), {x}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        double inner = 0.0;
        for (std::size_t i = 0; i < self->grad.size(); ++i) inner += self->grad[i] * self->values[i];
        for (std::size_t i = 0; i < self->grad.size(); ++i)
            p->grad[i] += self->values[i] * (self->grad[i] - inner);
    });
}

Tensor log_softmax(const Tensor& x) {
    if (x.rank() != 1 || x.size() < 1) {
        throw std::invalid_argument("log_softmax expects a non-empty vector, got " + shape_str(x.shape()));
    }
    check_finite(x, "log_softmax");
    double m = x.values()[0];
    for (double v : x.values()) m = std::max(m, v);
    double z = 0.0;
    for (double v : x.values()) z += std::exp(v - m);
    const double lz = m + std::log(z);
    std::vector<double> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] - lz;
    return make_op(x.shape(), std::move(out), {x}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        double gsum = 0.0;
        for (double g : self->grad) gsum += g;
        for (std::size_t i = 0; i < self->grad.size(); ++i)
            p->grad[i] += self->grad[i] - std::exp(self->values[i]) * gsum;
    });
}

Tensor logsumexp(const Tensor& x) {
    if (x.rank() != 1 || x.size() < 1) {
        throw std::invalid_argument("logsumexp expects a non-empty vector, got " + shape_str(x.shape()));
    }
    check_finite(x, "logsumexp");
    double m = x.values()[0];
    for (double v : x.values()) m = std::max(m, v);
    double z = 0.0;
    for (double v : x.values()) z += std::exp(v - m);
    const double out = m + std::log(z);
    return make_op({1}, {out}, {x}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = self->grad[0];
        const double lse = self->values[0];
        for (std::size_t i = 0; i < p->grad.size(); ++i)
            p->grad[i] += g * std::exp(p->values[i] - lse);
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({1}, {s}, {x}, [](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (auto& g : p->grad) g += self->grad[0];
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) {
        throw std::invalid_argument("dot shape mismatch: " + shape_str(a.shape()) + " . " +
                                    shape_str(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) s += a.values()[i] * b.values()[i];
    return make_op({1}, {s}, {a, b}, [](Node* self) {
        Node* pa = self->parents[0].get();
        Node* pb = self->parents[1].get();
        const double g = self->grad[0];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g * pb->values[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += g * pa->values[i];
        }
    });
}

Tensor pick(const Tensor& x, int i) {
    if (x.rank() != 1 || i < 0 || i >= static_cast<int>(x.size())) {
        throw std::out_of_range("pick: index " + std::to_string(i) + " of " + shape_str(x.shape()));
    }
    return make_op({1}, {x.values()[static_cast<std::size_t>(i)]}, {x}, [i](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad[static_cast<std::size_t>(i)] += self->grad[0];
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2 || logits.shape()[0] != static_cast<int>(targets.size())) {
        throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
    }
    const int n = logits.shape()[0], v = logits.shape()[1];
    for (int t : targets) {
        if (t < 0 || t >= v) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                                    std::to_string(v) + ")");
        }
    }
    check_finite(logits, "cross_entropy");
    // Keep row softmaxes for the backward rule.
    std::vector<double> probs(static_cast<std::size_t>(n) * v);
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
        const double* row = logits.values().data() + static_cast<std::size_t>(r) * v;
        double m = row[0];
        for (int j = 0; j < v; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            probs[static_cast<std::size_t>(r) * v + j] = std::exp(row[j] - m);
            z += probs[static_cast<std::size_t>(r) * v + j];
        }
        for (int j = 0; j < v; ++j) probs[static_cast<std::size_t>(r) * v + j] /= z;
        loss -= std::log(probs[static_cast<std::size_t>(r) * v + targets[static_cast<std::size_t>(r)]]);
    }
    loss /= n;
    return make_op({1}, {loss}, {logits}, [n, v, targets, probs = std::move(probs)](Node* self) {
        Node* p = self->parents[0].get();
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = self->grad[0] / n;
        for (int r = 0; r < n; ++r) {
            for (int j = 0; j < v; ++j) {
                const std::size_t idx = static_cast<std::size_t>(r) * v + j;
                double delta = probs[idx];
                if (j == targets[static_cast<std::size_t>(r)]) delta -= 1.0;
                p->grad[idx] += g * delta;
            }
        }
    });
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward expects a scalar loss");
    }
    Node* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS; recursion would overflow on long decode chains.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads restart at zero each call; leaves keep accumulating.
    for (Node* n : topo) {
        if (!n->parents.empty()) n->grad.assign(n->values.size(), 0.0);
        else n->ensure_grad();
    }
    root->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---- parameters -----------------------------------------------------------

std::uint64_t Rng::next_u64() {
    // splitmix64
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

std::int64_t Rng::next_int(std::int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::next_int: n must be positive");
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return seed ^ h;
}

Tensor ParameterStore::add(const std::string& name, std::vector<int> shape, int fan_in) {
    if (params_.count(name)) throw std::invalid_argument("parameter already exists: " + name);
    if (fan_in < 1) throw std::invalid_argument("fan_in must be >= 1 for " + name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Rng rng(mix_seed(seed_, name));
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    Tensor t(std::move(shape), std::move(v), true);
    params_.emplace(name, t);
    return t;
}

Tensor ParameterStore::add_zeros(const std::string& name, std::vector<int> shape) {
    if (params_.count(name)) throw std::invalid_argument("parameter already exists: " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    params_.emplace(name, t);
    return t;
}

Tensor ParameterStore::add_values(const std::string& name, std::vector<int> shape,
                                  std::vector<double> values) {
    if (params_.count(name)) throw std::invalid_argument("parameter already exists: " + name);
    Tensor t(std::move(shape), std::move(values), true);
    params_.emplace(name, t);
    return t;
}

Tensor ParameterStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
}

void ParameterStore::zero_grads() {
    for (auto& [_, t] : params_) {
        auto& g = t.grad();
        std::fill(g.begin(), g.end(), 0.0);
    }
}

double ParameterStore::grad_norm() const {
    double s = 0.0;
    for (const auto& [_, t] : params_) {
        for (double g : t.grad()) s += g * g;
    }
    return std::sqrt(s);
}

std::map<std::string, std::vector<double>> ParameterStore::snapshot() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [k, t] : params_) out.emplace(k, t.values());
    return out;
}

void ParameterStore::restore(const std::map<std::string, std::vector<double>>& snap) {
    for (auto& [k, t] : params_) {
        auto it = snap.find(k);
        if (it == snap.end()) throw std::invalid_argument("snapshot missing parameter: " + k);
        if (it->second.size() != t.values().size()) {
            throw std::invalid_argument("snapshot size mismatch for " + k);
        }
        t.values() = it->second;
    }
}

// ---- checkpoints ----------------------------------------------------------

namespace {

void write_f32_le(std::ofstream& os, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    const unsigned char b[4] = {
        static_cast<unsigned char>(bits & 0xff),
        static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff),
    };
    os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                               (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) |
                               (static_cast<std::uint32_t>(p[3]) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& prefix) {
    nlohmann::json manifest;
    manifest["format"] = "mktod-checkpoint-v1";
    manifest["dtype"] = "f32le";
    manifest["seed"] = store.seed();
    auto params = nlohmann::json::array();

    std::ofstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write checkpoint blob: " + prefix + ".bin");
    std::uint64_t offset = 0;
    for (const auto& [name, t] : store) {
        nlohmann::json p;
        p["name"] = name;
        p["shape"] = t.shape();
        p["offset"] = offset;
        params.push_back(p);
        for (double v : t.values()) write_f32_le(blob, static_cast<float>(v));
        offset += 4 * t.values().size();
    }
    manifest["params"] = params;
    blob.close();

    std::ofstream mf(prefix + ".json");
    if (!mf) throw std::runtime_error("cannot write checkpoint manifest: " + prefix + ".json");
    mf << manifest.dump(2) << "\n";
}

void load_checkpoint(ParameterStore& store, const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw std::runtime_error("cannot read checkpoint manifest: " + prefix + ".json");
    nlohmann::json manifest;
    mf >> manifest;
    if (manifest.value("format", "") != "mktod-checkpoint-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + prefix + ".json");
    }

    std::ifstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot read checkpoint blob: " + prefix + ".bin");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)),
                                     std::istreambuf_iterator<char>());

    for (const auto& p : manifest.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
        const std::uint64_t offset = p.at("offset").get<std::uint64_t>();
        const std::size_t n = static_cast<std::size_t>(shape_size(shape));
        if (offset + 4 * n > bytes.size()) {
            throw std::runtime_error("checkpoint blob truncated at parameter " + name);
        }
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            values[i] = static_cast<double>(read_f32_le(bytes.data() + offset + 4 * i));
        }
        if (store.has(name)) {
            Tensor t = store.get(name);
            if (t.shape() != shape) throw std::runtime_error("checkpoint shape mismatch for " + name);
            t.values() = std::move(values);
        } else {
            store.add_values(name, shape, std::move(values));
        }
    }
}

}  // namespace mktod::ad
