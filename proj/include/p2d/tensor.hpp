#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "p2d/errors.hpp"

namespace p2d {

using Shape = std::vector<int64_t>;

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover everything the
// transformer needs; reductions accumulate left-to-right so repeated runs are
// bit-identical.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor row(std::initializer_list<double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    int64_t numel() const;
    int64_t rows() const;
    int64_t cols() const;
    bool is_matrix() const { return shape.size() == 2; }
    bool is_vector() const { return shape.size() == 1; }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }
    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }
};

std::string shape_str(const Shape& s);

// Plain (non-autograd) helpers used by scoring code paths.
Tensor matmul_plain(const Tensor& a, const Tensor& b);
// Row-major flatten followed by one global softmax at temperature tau.
Tensor global_softmax_flat(const Tensor& m, double tau);

// Reverse-mode tape. Nodes are appended in execution order; backward walks the
// record once in reverse, accumulating gradients additively. Tensors held by
// nodes are immutable after creation. One tape is single-threaded; independent
// tapes may run concurrently.
class GradTape {
public:
    using Node = int32_t;

    // track_gradients=false skips closure recording for inference-only passes.
    explicit GradTape(bool track_gradients = true) : track_(track_gradients) {}

    Node leaf(Tensor value, bool requires_grad = false);

    // c = a @ b with shapes (m,k)x(k,n).
    Node matmul(Node a, Node b);
    // c = a @ b^T with shapes (m,k)x(n,k) -> (m,n).
    Node matmul_nt(Node a, Node b);
    Node add(Node a, Node b);
    // (m,n) plus a length-n row vector broadcast over rows.
    Node add_row_broadcast(Node a, Node bias);
    // Adds a constant tensor (no gradient path through the constant).
    Node add_const(Node a, const Tensor& c);
    Node scale(Node a, double c);
    // Row-wise softmax of a matrix at the given temperature (> 0).
    Node softmax_rows(Node x, double temperature);
    // Row-wise layer normalization with learned gain/bias (length = cols).
    Node layer_norm(Node x, Node gain, Node bias);
    Node gelu(Node x);
    // Gathers rows of `table` by id; ids must be < table rows.
    Node embed_rows(Node table, const std::vector<int>& ids);
    // Contiguous row slice [begin, begin+count).
    Node slice_rows(Node x, int64_t begin, int64_t count);
    // Concatenates matrices with equal row counts along columns.
    Node concat_cols(const std::vector<Node>& parts);
    // Mean of -log softmax(logits)[target] over positions with target >= 0.
    // targets.size() must equal logits rows; -1 marks ignored positions.
    Node cross_entropy(Node logits, const std::vector<int>& targets);
    Node sum(Node x);
    Node mean_scalars(const std::vector<Node>& xs);

    void backward(Node root);

    const Tensor& value(Node n) const { return nodes_[static_cast<size_t>(n)].value; }
    // Allocates a zero buffer on first access so untouched leaves read as zero.
    const Tensor& grad(Node n);
    bool requires_grad(Node n) const { return nodes_[static_cast<size_t>(n)].requires_grad; }
    size_t size() const { return nodes_.size(); }

private:
    struct Record {
        Tensor value;
        Tensor grad;              // lazily allocated
        bool requires_grad = false;
        bool grad_ready = false;
        std::function<void()> pull;  // propagates grad into inputs
    };

    Node push(Tensor value, bool requires_grad);
    Tensor& grad_buf(Node n);
    Record& rec(Node n) { return nodes_[static_cast<size_t>(n)]; }
    const Record& rec(Node n) const { return nodes_[static_cast<size_t>(n)]; }

    std::deque<Record> nodes_;
    bool track_;
};

}  // namespace p2d
