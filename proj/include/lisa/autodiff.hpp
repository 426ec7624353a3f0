#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace lisa {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One value in a dynamically built computation graph. Graphs are rebuilt per
// step; ids are globally monotonic, so within any graph every input precedes
// its consumers and descending-id order is a reverse topological order.
struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated on first accumulation during backward
    bool requires_grad = false;
    bool backward_done = false;  // set on a loss node once backward() ran on it
    int64_t id = 0;
    std::string op;   // op kind, used in error messages and graph audits
    std::string tag;  // optional audit label (e.g. "lang", "st_barrier")
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // scatters this->grad into parents

    void ensure_grad();
};

std::shared_ptr<Node> make_node(std::string op, Shape shape,
                                std::vector<std::shared_ptr<Node>> parents);

}  // namespace detail

// Value-semantics handle to a graph node. Copies alias the same node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> n) : node(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    int ndim() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape.at(i); }
    int64_t size() const { return static_cast<int64_t>(node->values.size()); }
    const std::vector<double>& values() const { return node->values; }
    // In-place mutation is for parameters/optimizers only, never for graph
    // intermediates (their saved activations would go stale).
    std::vector<double>& mutable_values() { return node->values; }
    bool requires_grad() const { return node->requires_grad; }
    bool has_grad() const { return !node->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() { node->grad.clear(); }
    void accumulate_grad(const std::vector<double>& g);
    double item() const;
    int64_t node_id() const { return node->id; }
    void set_tag(std::string tag) { node->tag = std::move(tag); }
    const std::string& tag() const { return node->tag; }

    std::shared_ptr<detail::Node> node;
};

// ---------------------------------------------------------------------------
// Differentiable primitives.
// Shapes are checked and mismatches raise std::invalid_argument naming the op
// and both shapes.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
// Elementwise add; also accepts b of shape [n] broadcast across the rows of a
// 2-D a (the only broadcast the networks need).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scalar_mul(const Tensor& a, double c);
Tensor transpose(const Tensor& a);            // 2-D, swaps the two dims
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 1-D or 2-D
Tensor slice(const Tensor& a, int axis, int start, int len);
// Integer gather of rows from a [V,E] table -> [ids.size(), E].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// Row i of the output is the sum of table rows listed in index_rows[i] (the
// sparse form of one_hot_matrix x table). -> [index_rows.size(), E]
Tensor rows_sum_lookup(const Tensor& table,
                       const std::vector<std::vector<int>>& index_rows);
Tensor softmax(const Tensor& a);  // last axis; tolerates -inf entries
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum_all(const Tensor& a);   // -> scalar
Tensor mean_all(const Tensor& a);  // -> scalar
Tensor sum_axis(const Tensor& a, int axis);   // 2-D -> 1-D
Tensor mean_axis(const Tensor& a, int axis);  // 2-D -> 1-D
// Normalizes the last axis; gain/bias shape [last_dim].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor gelu(const Tensor& a);  // exact erf form
// Train mode: inverted-dropout mask drawn from an explicit seed; eval mode:
// identity.
Tensor dropout(const Tensor& a, double rate, bool train, uint64_t seed);
// mask[i] != 0 sets element i to -inf (applied before softmax).
Tensor masked_fill_neg_inf(const Tensor& a, const std::vector<uint8_t>& mask);
// logits [n,C], targets n integers in [0,C) -> scalar mean negative
// log-likelihood.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor mse(const Tensor& a, const Tensor& b);  // scalar mean squared error
// Forward is a bitwise copy; backward contributes exactly zero (the parent
// edge is kept so reachable grads are populated with zeros).
Tensor stop_gradient(const Tensor& a);
// Forward takes the given values verbatim; backward copies the incoming
// gradient to z unchanged. This is the quantization estimator's backbone.
Tensor straight_through(const Tensor& z, Shape shape,
                        std::vector<double> forward_values);

// Reverse-mode sweep from a scalar loss. Visits the reachable subgraph once
// in reverse topological order. Calling it twice on the same loss throws.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-8) for a scalar-valued f. Throws if any value
// involved is non-finite, naming the coordinate.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double step);

}  // namespace lisa
