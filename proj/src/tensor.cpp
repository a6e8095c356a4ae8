#include "p2d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace p2d {

namespace {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

void require_matrix(const Tensor& t, const char* who) {
    if (!t.is_matrix())
        throw ShapeError(std::string(who) + ": expected rank-2 tensor, got shape " +
                         shape_str(t.shape));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

Tensor::Tensor(Shape s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
    Tensor t({static_cast<int64_t>(values.size())});
    std::copy(values.begin(), values.end(), t.data.begin());
    return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const int64_t r = static_cast<int64_t>(rows.size());
    const int64_t c = r ? static_cast<int64_t>(rows.begin()->size()) : 0;
    Tensor t({r, c});
    size_t i = 0;
    for (const auto& row : rows) {
        if (static_cast<int64_t>(row.size()) != c)
            throw ShapeError("ragged initializer for matrix");
        for (double v : row) t.data[i++] = v;
    }
    return t;
}

int64_t Tensor::numel() const { return shape_numel(shape); }

int64_t Tensor::rows() const {
    require_matrix(*this, "rows");
    return shape[0];
}

int64_t Tensor::cols() const {
    require_matrix(*this, "cols");
    return shape[1];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) +
                         " x " + shape_str(b.shape));
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Tensor global_softmax_flat(const Tensor& m, double tau) {
    if (tau <= 0.0) throw ParamError("softmax temperature must be > 0, got " + std::to_string(tau));
    Tensor out({m.numel()});
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : m.data) mx = std::max(mx, v);
    double denom = 0.0;
    for (size_t i = 0; i < m.data.size(); ++i) {
        out.data[i] = std::exp((m.data[i] - mx) / tau);
        denom += out.data[i];
    }
    for (double& v : out.data) v /= denom;
    return out;
}

// ---------------------------------------------------------------------------
// GradTape

GradTape::Node GradTape::push(Tensor value, bool requires_grad) {
    Record r;
    r.value = std::move(value);
    r.requires_grad = requires_grad && track_;
    nodes_.push_back(std::move(r));
    return static_cast<Node>(nodes_.size() - 1);
}

Tensor& GradTape::grad_buf(Node n) {
    Record& r = rec(n);
    if (!r.grad_ready) {
        r.grad = Tensor(r.value.shape);
        r.grad_ready = true;
    }
    return r.grad;
}

const Tensor& GradTape::grad(Node n) { return grad_buf(n); }

GradTape::Node GradTape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad);
}

GradTape::Node GradTape::matmul(Node a, Node b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    Node out = push(matmul_plain(va, vb), requires_grad(a) || requires_grad(b));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, b, out]() {
            const Tensor& g = grad(out);
            const Tensor& va = value(a);
            const Tensor& vb = value(b);
            const int64_t m = va.rows(), k = va.cols(), n = vb.cols();
            if (requires_grad(a)) {
                Tensor& ga = grad_buf(a);
                // dA += g @ B^T
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < n; ++j)
                            acc += g.data[i * n + j] * vb.data[kk * n + j];
                        ga.data[i * k + kk] += acc;
                    }
            }
            if (requires_grad(b)) {
                Tensor& gb = grad_buf(b);
                // dB += A^T @ g
                for (int64_t kk = 0; kk < k; ++kk)
                    for (int64_t i = 0; i < m; ++i) {
                        const double aik = va.data[i * k + kk];
                        for (int64_t j = 0; j < n; ++j)
                            gb.data[kk * n + j] += aik * g.data[i * n + j];
                    }
            }
        };
    }
    return out;
}

GradTape::Node GradTape::matmul_nt(Node a, Node b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    require_matrix(va, "matmul_nt");
    require_matrix(vb, "matmul_nt");
    if (va.cols() != vb.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(va.shape) +
                         " x " + shape_str(vb.shape) + "^T");
    const int64_t m = va.rows(), k = va.cols(), n = vb.rows();
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk)
                acc += va.data[i * k + kk] * vb.data[j * k + kk];
            c.data[i * n + j] = acc;
        }
    Node out = push(std::move(c), requires_grad(a) || requires_grad(b));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, b, out]() {
            const Tensor& g = grad(out);
            const Tensor& va = value(a);
            const Tensor& vb = value(b);
            const int64_t m = va.rows(), k = va.cols(), n = vb.rows();
            if (requires_grad(a)) {
                Tensor& ga = grad_buf(a);
                // dA += g @ B
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) {
                        const double gij = g.data[i * n + j];
                        for (int64_t kk = 0; kk < k; ++kk)
                            ga.data[i * k + kk] += gij * vb.data[j * k + kk];
                    }
            }
            if (requires_grad(b)) {
                Tensor& gb = grad_buf(b);
                // dB += g^T @ A
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < m; ++i) {
                        const double gij = g.data[i * n + j];
                        for (int64_t kk = 0; kk < k; ++kk)
                            gb.data[j * k + kk] += gij * va.data[i * k + kk];
                    }
            }
        };
    }
    return out;
}

GradTape::Node GradTape::add(Node a, Node b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb))
        throw ShapeError("add: shape mismatch " + shape_str(va.shape) + " vs " +
                         shape_str(vb.shape));
    Tensor c(va.shape);
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] = va.data[i] + vb.data[i];
    Node out = push(std::move(c), requires_grad(a) || requires_grad(b));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, b, out]() {
            const Tensor& g = grad(out);
            if (requires_grad(a)) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad_buf(b);
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
            }
        };
    }
    return out;
}

GradTape::Node GradTape::add_row_broadcast(Node a, Node bias) {
    const Tensor& va = value(a);
    const Tensor& vb = value(bias);
    require_matrix(va, "add_row_broadcast");
    if (!vb.is_vector() || vb.numel() != va.cols())
        throw ShapeError("add_row_broadcast: bias shape " + shape_str(vb.shape) +
                         " does not match matrix " + shape_str(va.shape));
    Tensor c(va.shape);
    const int64_t m = va.rows(), n = va.cols();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            c.data[i * n + j] = va.data[i * n + j] + vb.data[static_cast<size_t>(j)];
    Node out = push(std::move(c), requires_grad(a) || requires_grad(bias));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, bias, out]() {
            const Tensor& g = grad(out);
            const int64_t m = g.rows(), n = g.cols();
            if (requires_grad(a)) {
                Tensor& ga = grad_buf(a);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (requires_grad(bias)) {
                Tensor& gb = grad_buf(bias);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j)
                        gb.data[static_cast<size_t>(j)] += g.data[i * n + j];
            }
        };
    }
    return out;
}

GradTape::Node GradTape::add_const(Node a, const Tensor& cst) {
    const Tensor& va = value(a);
    if (!va.same_shape(cst))
        throw ShapeError("add_const: shape mismatch " + shape_str(va.shape) + " vs " +
                         shape_str(cst.shape));
    Tensor c(va.shape);
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] = va.data[i] + cst.data[i];
    Node out = push(std::move(c), requires_grad(a));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, out]() {
            const Tensor& g = grad(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        };
    }
    return out;
}

GradTape::Node GradTape::scale(Node a, double c) {
    const Tensor& va = value(a);
    Tensor out_v(va.shape);
    for (size_t i = 0; i < out_v.data.size(); ++i) out_v.data[i] = va.data[i] * c;
    Node out = push(std::move(out_v), requires_grad(a));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, a, out, c]() {
            const Tensor& g = grad(out);
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
        };
    }
    return out;
}

GradTape::Node GradTape::softmax_rows(Node x, double temperature) {
    if (temperature <= 0.0)
        throw ParamError("softmax_rows: temperature must be > 0, got " +
                         std::to_string(temperature));
    const Tensor& vx = value(x);
    require_matrix(vx, "softmax_rows");
    const int64_t m = vx.rows(), n = vx.cols();
    Tensor y(vx.shape);
    for (int64_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, vx.data[i * n + j]);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            y.data[i * n + j] = std::exp((vx.data[i * n + j] - mx) / temperature);
            denom += y.data[i * n + j];
        }
        for (int64_t j = 0; j < n; ++j) y.data[i * n + j] /= denom;
    }
    Node out = push(std::move(y), requires_grad(x));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, x, out, temperature]() {
            const Tensor& g = grad(out);
            const Tensor& y = value(out);
            Tensor& gx = grad_buf(x);
            const int64_t m = y.rows(), n = y.cols();
            for (int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += g.data[i * n + j] * y.data[i * n + j];
                for (int64_t j = 0; j < n; ++j)
                    gx.data[i * n + j] +=
                        y.data[i * n + j] * (g.data[i * n + j] - dot) / temperature;
            }
        };
    }
    return out;
}

GradTape::Node GradTape::layer_norm(Node x, Node gain, Node bias) {
    constexpr double kEps = 1e-5;
    const Tensor& vx = value(x);
    require_matrix(vx, "layer_norm");
    const int64_t m = vx.rows(), n = vx.cols();
    if (value(gain).numel() != n || value(bias).numel() != n)
        throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(n));
    Tensor y(vx.shape);
    std::vector<double> means(static_cast<size_t>(m)), rstds(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < n; ++j) mean += vx.data[i * n + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            const double d = vx.data[i * n + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + kEps);
        means[static_cast<size_t>(i)] = mean;
        rstds[static_cast<size_t>(i)] = rstd;
        for (int64_t j = 0; j < n; ++j) {
            const double xhat = (vx.data[i * n + j] - mean) * rstd;
            y.data[i * n + j] = xhat * value(gain).data[static_cast<size_t>(j)] +
                                value(bias).data[static_cast<size_t>(j)];
        }
    }
    const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    Node out = push(std::move(y), rg);
    if (rec(out).requires_grad) {
        rec(out).pull = [this, x, gain, bias, out, means, rstds]() {
            const Tensor& g = grad(out);
            const Tensor& vx = value(x);
            const Tensor& vg = value(gain);
            const int64_t m = vx.rows(), n = vx.cols();
            for (int64_t i = 0; i < m; ++i) {
                const double mean = means[static_cast<size_t>(i)];
                const double rstd = rstds[static_cast<size_t>(i)];
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    const double xhat = (vx.data[i * n + j] - mean) * rstd;
                    const double gy = g.data[i * n + j] * vg.data[static_cast<size_t>(j)];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
                if (requires_grad(x)) {
                    Tensor& gx = grad_buf(x);
                    for (int64_t j = 0; j < n; ++j) {
                        const double xhat = (vx.data[i * n + j] - mean) * rstd;
                        const double gy = g.data[i * n + j] * vg.data[static_cast<size_t>(j)];
                        gx.data[i * n + j] +=
                            rstd * (gy - (sum_gy + xhat * sum_gy_xhat) / static_cast<double>(n));
                    }
                }
                if (requires_grad(gain)) {
                    Tensor& gg = grad_buf(gain);
                    for (int64_t j = 0; j < n; ++j) {
                        const double xhat = (vx.data[i * n + j] - mean) * rstd;
                        gg.data[static_cast<size_t>(j)] += g.data[i * n + j] * xhat;
                    }
                }
                if (requires_grad(bias)) {
                    Tensor& gb = grad_buf(bias);
                    for (int64_t j = 0; j < n; ++j)
                        gb.data[static_cast<size_t>(j)] += g.data[i * n + j];
                }
            }
        };
    }
    return out;
}

GradTape::Node GradTape::gelu(Node x) {
    // tanh approximation, matching the usual GPT formulation
    const Tensor& vx = value(x);
    Tensor y(vx.shape);
    for (size_t i = 0; i < y.data.size(); ++i) {
        const double v = vx.data[i];
        y.data[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
    }
    Node out = push(std::move(y), requires_grad(x));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, x, out]() {
            const Tensor& g = grad(out);
            const Tensor& vx = value(x);
            Tensor& gx = grad_buf(x);
            for (size_t i = 0; i < g.data.size(); ++i) {
                const double v = vx.data[i];
                const double u = kGeluC * (v + 0.044715 * v * v * v);
                const double t = std::tanh(u);
                const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                gx.data[i] += g.data[i] * d;
            }
        };
    }
    return out;
}

GradTape::Node GradTape::embed_rows(Node table, const std::vector<int>& ids) {
    const Tensor& vt = value(table);
    require_matrix(vt, "embed_rows");
    const int64_t n = vt.cols();
    for (int id : ids)
        if (id < 0 || id >= vt.rows())
            throw IndexError("embed_rows: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(vt.rows()) + ")");
    Tensor y({static_cast<int64_t>(ids.size()), n});
    for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t j = 0; j < n; ++j)
            y.data[static_cast<int64_t>(i) * n + j] = vt.data[ids[i] * n + j];
    Node out = push(std::move(y), requires_grad(table));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, table, out, ids]() {
            const Tensor& g = grad(out);
            Tensor& gt = grad_buf(table);
            const int64_t n = g.cols();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < n; ++j)
                    gt.data[ids[i] * n + j] += g.data[static_cast<int64_t>(i) * n + j];
        };
    }
    return out;
}

GradTape::Node GradTape::slice_rows(Node x, int64_t begin, int64_t count) {
    const Tensor& vx = value(x);
    require_matrix(vx, "slice_rows");
    if (begin < 0 || count < 0 || begin + count > vx.rows())
        throw IndexError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of " +
                         std::to_string(vx.rows()) + " rows");
    const int64_t n = vx.cols();
    Tensor y({count, n});
    std::copy(vx.data.begin() + begin * n, vx.data.begin() + (begin + count) * n,
              y.data.begin());
    Node out = push(std::move(y), requires_grad(x));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, x, out, begin]() {
            const Tensor& g = grad(out);
            Tensor& gx = grad_buf(x);
            const int64_t n = g.cols();
            for (int64_t i = 0; i < g.rows(); ++i)
                for (int64_t j = 0; j < n; ++j)
                    gx.data[(begin + i) * n + j] += g.data[i * n + j];
        };
    }
    return out;
}

GradTape::Node GradTape::concat_cols(const std::vector<Node>& parts) {
    if (parts.empty()) throw ParamError("concat_cols: no inputs");
    const int64_t m = value(parts[0]).rows();
    int64_t total = 0;
    bool rg = false;
    for (Node p : parts) {
        const Tensor& v = value(p);
        require_matrix(v, "concat_cols");
        if (v.rows() != m)
            throw ShapeError("concat_cols: row count mismatch " + std::to_string(v.rows()) +
                             " vs " + std::to_string(m));
        total += v.cols();
        rg = rg || requires_grad(p);
    }
    Tensor y({m, total});
    int64_t off = 0;
    for (Node p : parts) {
        const Tensor& v = value(p);
        const int64_t n = v.cols();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                y.data[i * total + off + j] = v.data[i * n + j];
        off += n;
    }
    Node out = push(std::move(y), rg);
    if (rec(out).requires_grad) {
        rec(out).pull = [this, parts, out]() {
            const Tensor& g = grad(out);
            const int64_t m = g.rows(), total = g.cols();
            int64_t off = 0;
            for (Node p : parts) {
                const int64_t n = value(p).cols();
                if (requires_grad(p)) {
                    Tensor& gp = grad_buf(p);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j)
                            gp.data[i * n + j] += g.data[i * total + off + j];
                }
                off += n;
            }
        };
    }
    return out;
}

GradTape::Node GradTape::cross_entropy(Node logits, const std::vector<int>& targets) {
    const Tensor& vl = value(logits);
    require_matrix(vl, "cross_entropy");
    const int64_t m = vl.rows(), n = vl.cols();
    if (static_cast<int64_t>(targets.size()) != m)
        throw ShapeError("cross_entropy: targets length " + std::to_string(targets.size()) +
                         " vs " + std::to_string(m) + " logit rows");
    int64_t counted = 0;
    for (int t : targets) {
        if (t >= static_cast<int>(n))
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " out of vocabulary " + std::to_string(n));
        if (t >= 0) ++counted;
    }
    if (counted == 0) throw ParamError("cross_entropy: no scored positions");
    Tensor loss({1});
    double total = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, vl.data[i * n + j]);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) denom += std::exp(vl.data[i * n + j] - mx);
        total += std::log(denom) + mx - vl.data[i * n + t];
    }
    loss.data[0] = total / static_cast<double>(counted);
    Node out = push(std::move(loss), requires_grad(logits));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, logits, out, targets, counted]() {
            const double g = grad(out).data[0];
            const Tensor& vl = value(logits);
            Tensor& gl = grad_buf(logits);
            const int64_t m = vl.rows(), n = vl.cols();
            const double inv = g / static_cast<double>(counted);
            for (int64_t i = 0; i < m; ++i) {
                const int t = targets[static_cast<size_t>(i)];
                if (t < 0) continue;
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < n; ++j) mx = std::max(mx, vl.data[i * n + j]);
                double denom = 0.0;
                for (int64_t j = 0; j < n; ++j) denom += std::exp(vl.data[i * n + j] - mx);
                for (int64_t j = 0; j < n; ++j) {
                    const double p = std::exp(vl.data[i * n + j] - mx) / denom;
                    gl.data[i * n + j] += inv * (p - (j == t ? 1.0 : 0.0));
                }
            }
        };
    }
    return out;
}

GradTape::Node GradTape::sum(Node x) {
    const Tensor& vx = value(x);
    Tensor s({1});
    double acc = 0.0;
    for (double v : vx.data) acc += v;
    s.data[0] = acc;
    Node out = push(std::move(s), requires_grad(x));
    if (rec(out).requires_grad) {
        rec(out).pull = [this, x, out]() {
            const double g = grad(out).data[0];
            Tensor& gx = grad_buf(x);
            for (double& v : gx.data) v += g;
        };
    }
    return out;
}

GradTape::Node GradTape::mean_scalars(const std::vector<Node>& xs) {
    if (xs.empty()) throw ParamError("mean_scalars: no inputs");
    Tensor s({1});
    double acc = 0.0;
    bool rg = false;
    for (Node x : xs) {
        if (value(x).numel() != 1) throw ShapeError("mean_scalars: inputs must be scalars");
        acc += value(x).data[0];
        rg = rg || requires_grad(x);
    }
    s.data[0] = acc / static_cast<double>(xs.size());
    Node out = push(std::move(s), rg);
    if (rec(out).requires_grad) {
        rec(out).pull = [this, xs, out]() {
            const double g = grad(out).data[0] / static_cast<double>(xs.size());
            for (Node x : xs)
                if (requires_grad(x)) grad_buf(x).data[0] += g;
        };
    }
    return out;
}

void GradTape::backward(Node root) {
    if (value(root).numel() != 1)
        throw ShapeError("backward: root must be scalar, got shape " +
                         shape_str(value(root).shape));
    if (!track_) throw ParamError("backward: tape was created without gradient tracking");
    grad_buf(root).data[0] = 1.0;
    for (Node n = root; n >= 0; --n) {
        Record& r = rec(n);
        if (r.requires_grad && r.grad_ready && r.pull) r.pull();
    }
}

}  // namespace p2d
