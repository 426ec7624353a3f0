#include "lisa/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace lisa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::atomic<int64_t> g_next_id{1};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void check_shape(const std::string& op, bool ok, const Shape& a, const Shape& b) {
    if (!ok) fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Rows/cols view of the trailing axis: an [d0,...,dk] tensor is treated as
// (numel/dk) rows of dk columns.
std::pair<int64_t, int64_t> rows_cols(const Shape& s) {
    int64_t cols = s.empty() ? 1 : s.back();
    return {numel(s) / cols, cols};
}

}  // namespace

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
}

std::shared_ptr<Node> make_node(std::string op, Shape shape,
                                std::vector<std::shared_ptr<Node>> parents) {
    for (int d : shape) {
        if (d <= 0) fail(op, "non-positive dimension in " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->op = std::move(op);
    n->shape = std::move(shape);
    n->values.resize(static_cast<size_t>(numel(n->shape)));
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    for (const auto& p : parents) {
        if (p->requires_grad) n->requires_grad = true;
    }
    n->parents = std::move(parents);
    return n;
}

}  // namespace detail

using detail::Node;
using detail::make_node;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = make_node("leaf", std::move(shape), {});
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    auto n = make_node("leaf", std::move(shape), {});
    if (static_cast<int64_t>(values.size()) != numel(n->shape))
        fail("from_values", "got " + std::to_string(values.size()) + " values for shape " +
                                shape_str(n->shape));
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double v) { return from_values({1}, {v}); }

const std::vector<double>& Tensor::grad() const {
    if (node->grad.empty())
        throw std::runtime_error("grad: absent (tensor not reached by backward, or requires_grad unset)");
    return node->grad;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != node->values.size())
        fail("accumulate_grad", "size mismatch");
    node->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
}

double Tensor::item() const {
    if (size() != 1) fail("item", "tensor has shape " + shape_str(shape()));
    return node->values[0];
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        check_shape("matmul", false, a.shape(), b.shape());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_node("matmul", {m, n}, {a.node, b.node});
    MutMap(out->values.data(), m, n).noalias() =
        ConstMap(a.node->values.data(), m, k) * ConstMap(b.node->values.data(), k, n);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        Node* pb = b.node.get();
        out->backward_fn = [o, pa, pb, m, k, n]() {
            ConstMap g(o->grad.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MutMap(pa->grad.data(), m, k).noalias() +=
                    g * ConstMap(pb->values.data(), k, n).transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MutMap(pb->grad.data(), k, n).noalias() +=
                    ConstMap(pa->values.data(), m, k).transpose() * g;
            }
        };
    }
    return Tensor(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
    const bool rowwise = a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0);
    if (!rowwise && a.shape() != b.shape())
        check_shape("add", false, a.shape(), b.shape());
    auto out = make_node("add", a.shape(), {a.node, b.node});
    const auto& av = a.node->values;
    const auto& bv = b.node->values;
    if (rowwise) {
        const size_t cols = bv.size();
        for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + bv[i % cols];
    } else {
        for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + bv[i];
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        Node* pb = b.node.get();
        out->backward_fn = [o, pa, pb, rowwise]() {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (rowwise) {
                    const size_t cols = pb->grad.size();
                    for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i % cols] += o->grad[i];
                } else {
                    for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i];
                }
            }
        };
    }
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) check_shape("sub", false, a.shape(), b.shape());
    auto out = make_node("sub", a.shape(), {a.node, b.node});
    for (size_t i = 0; i < out->values.size(); ++i)
        out->values[i] = a.node->values[i] - b.node->values[i];
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        Node* pb = b.node.get();
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] -= o->grad[i];
            }
        };
    }
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) check_shape("mul", false, a.shape(), b.shape());
    auto out = make_node("mul", a.shape(), {a.node, b.node});
    for (size_t i = 0; i < out->values.size(); ++i)
        out->values[i] = a.node->values[i] * b.node->values[i];
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        Node* pb = b.node.get();
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i)
                    pa->grad[i] += o->grad[i] * pb->values[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i)
                    pb->grad[i] += o->grad[i] * pa->values[i];
            }
        };
    }
    return Tensor(out);
}

Tensor scalar_mul(const Tensor& a, double c) {
    auto out = make_node("scalar_mul", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i) out->values[i] = a.node->values[i] * c;
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, c]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] * c;
        };
    }
    return Tensor(out);
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) fail("transpose", "needs a 2-D tensor, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = make_node("transpose", {n, m}, {a.node});
    MutMap(out->values.data(), n, m) = ConstMap(a.node->values.data(), m, n).transpose();
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, m, n]() {
            pa->ensure_grad();
            MutMap(pa->grad.data(), m, n).noalias() +=
                ConstMap(o->grad.data(), n, m).transpose();
        };
    }
    return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto out = make_node("reshape", std::move(shape), {a.node});
    out->values = a.node->values;
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
        };
    }
    return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail("concat", "empty input list");
    const int nd = parts[0].ndim();
    if (nd == 1) {
        if (axis != 0) fail("concat", "axis out of range for 1-D input");
        int total = 0;
        std::vector<std::shared_ptr<Node>> ps;
        for (const auto& t : parts) {
            if (t.ndim() != 1) check_shape("concat", false, parts[0].shape(), t.shape());
            total += t.dim(0);
            ps.push_back(t.node);
        }
        auto out = make_node("concat", {total}, ps);
        size_t off = 0;
        for (const auto& t : parts) {
            std::copy(t.values().begin(), t.values().end(), out->values.begin() + off);
            off += t.values().size();
        }
        if (out->requires_grad) {
            Node* o = out.get();
            out->backward_fn = [o]() {
                size_t off = 0;
                for (auto& p : o->parents) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (size_t i = 0; i < p->values.size(); ++i)
                            p->grad[i] += o->grad[off + i];
                    }
                    off += p->values.size();
                }
            };
        }
        return Tensor(out);
    }
    if (nd != 2 || (axis != 0 && axis != 1))
        fail("concat", "supports 1-D and 2-D inputs, axis 0/1");
    int rows = 0, cols = 0;
    std::vector<std::shared_ptr<Node>> ps;
    for (const auto& t : parts) {
        if (t.ndim() != 2) check_shape("concat", false, parts[0].shape(), t.shape());
        if (axis == 0) {
            if (cols && t.dim(1) != cols) check_shape("concat", false, parts[0].shape(), t.shape());
            cols = t.dim(1);
            rows += t.dim(0);
        } else {
            if (rows && t.dim(0) != rows) check_shape("concat", false, parts[0].shape(), t.shape());
            rows = t.dim(0);
            cols += t.dim(1);
        }
        ps.push_back(t.node);
    }
    auto out = make_node("concat", {rows, cols}, ps);
    if (axis == 0) {
        size_t off = 0;
        for (const auto& t : parts) {
            std::copy(t.values().begin(), t.values().end(), out->values.begin() + off);
            off += t.values().size();
        }
    } else {
        int coff = 0;
        for (const auto& t : parts) {
            const int tc = t.dim(1);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < tc; ++c)
                    out->values[static_cast<size_t>(r) * cols + coff + c] =
                        t.values()[static_cast<size_t>(r) * tc + c];
            coff += tc;
        }
    }
    if (out->requires_grad) {
        Node* o = out.get();
        out->backward_fn = [o, axis, rows, cols]() {
            if (axis == 0) {
                size_t off = 0;
                for (auto& p : o->parents) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (size_t i = 0; i < p->values.size(); ++i)
                            p->grad[i] += o->grad[off + i];
                    }
                    off += p->values.size();
                }
            } else {
                int coff = 0;
                for (auto& p : o->parents) {
                    const int tc = p->shape[1];
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (int r = 0; r < rows; ++r)
                            for (int c = 0; c < tc; ++c)
                                p->grad[static_cast<size_t>(r) * tc + c] +=
                                    o->grad[static_cast<size_t>(r) * cols + coff + c];
                    }
                    coff += tc;
                }
            }
        };
    }
    return Tensor(out);
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    if (a.ndim() == 1) {
        if (axis != 0 || start < 0 || len <= 0 || start + len > a.dim(0))
            fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                              ") out of bounds for " + shape_str(a.shape()));
        auto out = make_node("slice", {len}, {a.node});
        std::copy(a.values().begin() + start, a.values().begin() + start + len,
                  out->values.begin());
        if (out->requires_grad) {
            Node* o = out.get();
            Node* pa = a.node.get();
            out->backward_fn = [o, pa, start, len]() {
                pa->ensure_grad();
                for (int i = 0; i < len; ++i) pa->grad[start + i] += o->grad[i];
            };
        }
        return Tensor(out);
    }
    if (a.ndim() != 2 || (axis != 0 && axis != 1))
        fail("slice", "supports 1-D and 2-D inputs, axis 0/1");
    const int m = a.dim(0), n = a.dim(1);
    const int lim = axis == 0 ? m : n;
    if (start < 0 || len <= 0 || start + len > lim)
        fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") out of bounds for " + shape_str(a.shape()));
    Shape os = axis == 0 ? Shape{len, n} : Shape{m, len};
    auto out = make_node("slice", os, {a.node});
    if (axis == 0) {
        std::copy(a.values().begin() + static_cast<size_t>(start) * n,
                  a.values().begin() + static_cast<size_t>(start + len) * n,
                  out->values.begin());
    } else {
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < len; ++c)
                out->values[static_cast<size_t>(r) * len + c] =
                    a.values()[static_cast<size_t>(r) * n + start + c];
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, axis, start, len, m, n]() {
            pa->ensure_grad();
            if (axis == 0) {
                for (size_t i = 0; i < o->grad.size(); ++i)
                    pa->grad[static_cast<size_t>(start) * n + i] += o->grad[i];
            } else {
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < len; ++c)
                        pa->grad[static_cast<size_t>(r) * n + start + c] +=
                            o->grad[static_cast<size_t>(r) * len + c];
            }
        };
    }
    return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) fail("embedding_lookup", "table must be 2-D");
    if (ids.empty()) fail("embedding_lookup", "empty id list");
    const int v = table.dim(0), e = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            fail("embedding_lookup", "index " + std::to_string(ids[i]) + " at position " +
                                         std::to_string(i) + " out of range [0," +
                                         std::to_string(v) + ")");
    }
    auto out = make_node("embedding_lookup", {static_cast<int>(ids.size()), e}, {table.node});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.values().begin() + static_cast<size_t>(ids[i]) * e,
                  table.values().begin() + static_cast<size_t>(ids[i] + 1) * e,
                  out->values.begin() + i * e);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pt = table.node.get();
        out->backward_fn = [o, pt, ids, e]() {
            pt->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int c = 0; c < e; ++c)
                    pt->grad[static_cast<size_t>(ids[i]) * e + c] += o->grad[i * e + c];
        };
    }
    return Tensor(out);
}

Tensor rows_sum_lookup(const Tensor& table, const std::vector<std::vector<int>>& index_rows) {
    if (table.ndim() != 2) fail("rows_sum_lookup", "table must be 2-D");
    if (index_rows.empty()) fail("rows_sum_lookup", "empty row list");
    const int v = table.dim(0), e = table.dim(1);
    for (const auto& row : index_rows)
        for (int id : row)
            if (id < 0 || id >= v)
                fail("rows_sum_lookup", "index " + std::to_string(id) + " out of range [0," +
                                            std::to_string(v) + ")");
    auto out =
        make_node("rows_sum_lookup", {static_cast<int>(index_rows.size()), e}, {table.node});
    for (size_t i = 0; i < index_rows.size(); ++i) {
        double* dst = out->values.data() + i * e;
        for (int id : index_rows[i]) {
            const double* src = table.values().data() + static_cast<size_t>(id) * e;
            for (int c = 0; c < e; ++c) dst[c] += src[c];
        }
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pt = table.node.get();
        out->backward_fn = [o, pt, index_rows, e]() {
            pt->ensure_grad();
            for (size_t i = 0; i < index_rows.size(); ++i)
                for (int id : index_rows[i])
                    for (int c = 0; c < e; ++c)
                        pt->grad[static_cast<size_t>(id) * e + c] += o->grad[i * e + c];
        };
    }
    return Tensor(out);
}

Tensor softmax(const Tensor& a) {
    auto [rows, cols] = rows_cols(a.shape());
    auto out = make_node("softmax", a.shape(), {a.node});
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out->values.data() + r * cols;
        double m = kNegInf;
        for (int64_t c = 0; c < cols; ++c) m = std::max(m, x[c]);
        if (m == kNegInf)
            throw std::runtime_error("softmax: row " + std::to_string(r) + " is fully masked");
        double z = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - m);
            z += y[c];
        }
        for (int64_t c = 0; c < cols; ++c) y[c] /= z;
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, rows = rows, cols = cols]() {
            pa->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = o->values.data() + r * cols;
                const double* g = o->grad.data() + r * cols;
                double dot = 0.0;
                for (int64_t c = 0; c < cols; ++c) dot += y[c] * g[c];
                double* gx = pa->grad.data() + r * cols;
                for (int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
            }
        };
    }
    return Tensor(out);
}

Tensor log(const Tensor& a) {
    auto out = make_node("log", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i) out->values[i] = std::log(a.values()[i]);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i)
                pa->grad[i] += o->grad[i] / pa->values[i];
        };
    }
    return Tensor(out);
}

Tensor exp(const Tensor& a) {
    auto out = make_node("exp", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i) out->values[i] = std::exp(a.values()[i]);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i] * o->values[i];
        };
    }
    return Tensor(out);
}

Tensor square(const Tensor& a) {
    auto out = make_node("square", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i) {
        const double x = a.values()[i];
        out->values[i] = x * x;
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i)
                pa->grad[i] += o->grad[i] * 2.0 * pa->values[i];
        };
    }
    return Tensor(out);
}

Tensor sum_all(const Tensor& a) {
    auto out = make_node("sum_all", {1}, {a.node});
    double s = 0.0;
    for (double v : a.values()) s += v;
    out->values[0] = s;
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += o->grad[0];
        };
    }
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    return scalar_mul(sum_all(a), inv);
}

Tensor sum_axis(const Tensor& a, int axis) {
    if (a.ndim() != 2 || (axis != 0 && axis != 1)) fail("sum_axis", "needs 2-D input, axis 0/1");
    const int m = a.dim(0), n = a.dim(1);
    auto out = make_node("sum_axis", {axis == 0 ? n : m}, {a.node});
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c)
            out->values[axis == 0 ? c : r] += a.values()[static_cast<size_t>(r) * n + c];
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, axis, m, n]() {
            pa->ensure_grad();
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c)
                    pa->grad[static_cast<size_t>(r) * n + c] += o->grad[axis == 0 ? c : r];
        };
    }
    return Tensor(out);
}

Tensor mean_axis(const Tensor& a, int axis) {
    if (a.ndim() != 2 || (axis != 0 && axis != 1)) fail("mean_axis", "needs 2-D input, axis 0/1");
    const double inv = 1.0 / static_cast<double>(axis == 0 ? a.dim(0) : a.dim(1));
    return scalar_mul(sum_axis(a, axis), inv);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    auto [rows, cols] = rows_cols(x.shape());
    if (gain.ndim() != 1 || gain.dim(0) != cols)
        check_shape("layer_norm", false, x.shape(), gain.shape());
    if (bias.ndim() != 1 || bias.dim(0) != cols)
        check_shape("layer_norm", false, x.shape(), bias.shape());
    auto out = make_node("layer_norm", x.shape(), {x.node, gain.node, bias.node});
    // Saved activations for backward.
    auto xhat = std::make_shared<std::vector<double>>(x.values().size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + r * cols;
        double mean = 0.0;
        for (int64_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* xh = xhat->data() + r * cols;
        double* y = out->values.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) {
            xh[c] = (xr[c] - mean) * is;
            y[c] = xh[c] * gain.values()[c] + bias.values()[c];
        }
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* px = x.node.get();
        Node* pg = gain.node.get();
        Node* pb = bias.node.get();
        out->backward_fn = [o, px, pg, pb, xhat, inv_std, rows = rows, cols = cols]() {
            const double invn = 1.0 / static_cast<double>(cols);
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = o->grad.data() + r * cols;
                const double* xh = xhat->data() + r * cols;
                if (pg->requires_grad) {
                    pg->ensure_grad();
                    for (int64_t c = 0; c < cols; ++c) pg->grad[c] += g[c] * xh[c];
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (int64_t c = 0; c < cols; ++c) pb->grad[c] += g[c];
                }
                if (px->requires_grad) {
                    px->ensure_grad();
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int64_t c = 0; c < cols; ++c) {
                        const double dxh = g[c] * pg->values[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                    }
                    mean_dxh *= invn;
                    mean_dxh_xh *= invn;
                    double* gx = px->grad.data() + r * cols;
                    for (int64_t c = 0; c < cols; ++c) {
                        const double dxh = g[c] * pg->values[c];
                        gx[c] += (*inv_std)[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    auto out = make_node("gelu", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i) {
        const double x = a.values()[i];
        out->values[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) {
                const double x = pa->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                pa->grad[i] += o->grad[i] * (cdf + x * pdf);
            }
        };
    }
    return Tensor(out);
}

Tensor dropout(const Tensor& a, double rate, bool train, uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) fail("dropout", "rate must be in [0,1)");
    if (!train || rate == 0.0) {
        // Eval mode is the identity but still a graph node, so causality and
        // reachability audits see a uniform structure.
        auto out = make_node("dropout", a.shape(), {a.node});
        out->values = a.values();
        if (out->requires_grad) {
            Node* o = out.get();
            Node* pa = a.node.get();
            out->backward_fn = [o, pa]() {
                pa->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
            };
        }
        return Tensor(out);
    }
    auto out = make_node("dropout", a.shape(), {a.node});
    auto scale = std::make_shared<std::vector<double>>(a.values().size());
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double keep = 1.0 - rate;
    for (size_t i = 0; i < scale->size(); ++i) {
        (*scale)[i] = uni(rng) < keep ? 1.0 / keep : 0.0;
        out->values[i] = a.values()[i] * (*scale)[i];
    }
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, scale]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i)
                pa->grad[i] += o->grad[i] * (*scale)[i];
        };
    }
    return Tensor(out);
}

Tensor masked_fill_neg_inf(const Tensor& a, const std::vector<uint8_t>& mask) {
    if (mask.size() != a.values().size())
        fail("masked_fill", "mask size " + std::to_string(mask.size()) + " vs tensor " +
                                shape_str(a.shape()));
    auto out = make_node("masked_fill", a.shape(), {a.node});
    for (size_t i = 0; i < out->values.size(); ++i)
        out->values[i] = mask[i] ? kNegInf : a.values()[i];
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        out->backward_fn = [o, pa, mask]() {
            pa->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i)
                if (!mask[i]) pa->grad[i] += o->grad[i];
        };
    }
    return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) fail("cross_entropy", "logits must be 2-D");
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                  std::to_string(n) + " rows");
    for (int t : targets)
        if (t < 0 || t >= c)
            fail("cross_entropy", "target " + std::to_string(t) + " out of range [0," +
                                      std::to_string(c) + ")");
    auto out = make_node("cross_entropy", {1}, {logits.node});
    auto probs = std::make_shared<std::vector<double>>(logits.values().size());
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
        const double* x = logits.values().data() + static_cast<size_t>(r) * c;
        double m = x[0];
        for (int j = 1; j < c; ++j) m = std::max(m, x[j]);
        double z = 0.0;
        double* p = probs->data() + static_cast<size_t>(r) * c;
        for (int j = 0; j < c; ++j) {
            p[j] = std::exp(x[j] - m);
            z += p[j];
        }
        for (int j = 0; j < c; ++j) p[j] /= z;
        loss += std::log(z) + m - x[targets[r]];
    }
    out->values[0] = loss / n;
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pl = logits.node.get();
        out->backward_fn = [o, pl, probs, targets, n, c]() {
            pl->ensure_grad();
            const double g = o->grad[0] / n;
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < c; ++j)
                    pl->grad[static_cast<size_t>(r) * c + j] +=
                        g * ((*probs)[static_cast<size_t>(r) * c + j] -
                             (j == targets[r] ? 1.0 : 0.0));
        };
    }
    return Tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) check_shape("mse", false, a.shape(), b.shape());
    auto out = make_node("mse", {1}, {a.node, b.node});
    double s = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        s += d * d;
    }
    const int64_t n = a.size();
    out->values[0] = s / static_cast<double>(n);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pa = a.node.get();
        Node* pb = b.node.get();
        out->backward_fn = [o, pa, pb, n]() {
            const double g = o->grad[0] * 2.0 / static_cast<double>(n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < pa->grad.size(); ++i)
                    pa->grad[i] += g * (pa->values[i] - pb->values[i]);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < pb->grad.size(); ++i)
                    pb->grad[i] -= g * (pa->values[i] - pb->values[i]);
            }
        };
    }
    return Tensor(out);
}

Tensor stop_gradient(const Tensor& a) {
    // Keeps the parent edge so the input stays reachable (its grad is
    // populated with exact zeros), but contributes nothing.
    auto out = make_node("stop_gradient", a.shape(), {a.node});
    out->values = a.values();
    if (out->requires_grad) {
        Node* pa = a.node.get();
        out->backward_fn = [pa]() {
            if (pa->requires_grad) pa->ensure_grad();
        };
    }
    return Tensor(out);
}

Tensor straight_through(const Tensor& z, Shape shape, std::vector<double> forward_values) {
    if (static_cast<int64_t>(forward_values.size()) != z.size())
        fail("straight_through", "forward values size " + std::to_string(forward_values.size()) +
                                     " vs input " + shape_str(z.shape()));
    if (numel(shape) != z.size())
        check_shape("straight_through", false, shape, z.shape());
    auto out = make_node("straight_through", std::move(shape), {z.node});
    out->values = std::move(forward_values);
    if (out->requires_grad) {
        Node* o = out.get();
        Node* pz = z.node.get();
        out->backward_fn = [o, pz]() {
            pz->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) pz->grad[i] += o->grad[i];
        };
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// backward + grad_check
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) fail("backward", "undefined tensor");
    if (loss.size() != 1)
        fail("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    Node* root = loss.node.get();
    if (root->backward_done)
        throw std::runtime_error("backward: already ran on this loss; rebuild the graph");
    root->backward_done = true;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (Node* n : order) {
        if (!n->requires_grad || n->grad.empty()) continue;
        if (n->backward_fn) n->backward_fn();
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step) {
    if (step <= 0.0) fail("grad_check", "step must be positive");
    Tensor x = Tensor::from_values(point.shape(), point.values(), /*requires_grad=*/true);
    Tensor loss = f(x);
    if (loss.size() != 1) fail("grad_check", "f must be scalar-valued");
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("grad_check: non-finite loss at the evaluation point");
    backward(loss);
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) analytic = x.node->grad;

    double max_err = 0.0;
    for (int64_t i = 0; i < point.size(); ++i) {
        auto vplus = point.values();
        auto vminus = point.values();
        vplus[i] += step;
        vminus[i] -= step;
        const double fp = f(Tensor::from_values(point.shape(), vplus)).item();
        const double fm = f(Tensor::from_values(point.shape(), vminus)).item();
        const double numeric = (fp - fm) / (2.0 * step);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw std::runtime_error("grad_check: non-finite value at coordinate " +
                                     std::to_string(i));
        const double err = std::abs(analytic[i] - numeric) /
                           (std::abs(analytic[i]) + std::abs(numeric) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace lisa
