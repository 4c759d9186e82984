#include "comigs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace comigs {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)) {
    if (shape_size(shape) != values.size())
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    data = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(const Shape& s) {
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(shape_size(s), 0.0);
    return t;
}

Tensor Tensor::full(const Shape& s, double v) {
    Tensor t = zeros(s);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::rows() const {
    if (shape.size() != 2) throw ShapeError("rows() on non-matrix " + shape_str(shape));
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.size() != 2) throw ShapeError("cols() on non-matrix " + shape_str(shape));
    return shape[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return (*data)[i * cols() + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return (*data)[i * cols() + j]; }

double Tensor::value() const {
    if (size() != 1) throw ShapeError("value() on tensor of shape " + shape_str(shape));
    return (*data)[0];
}

bool Tensor::all_finite() const {
    for (double v : *data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
}

// ---------------------------------------------------------------------------
// GradientMap

Tensor GradientMap::grad(const Tensor& t) const {
    if (t.node < 0 || static_cast<std::size_t>(t.node) >= grads_.size())
        throw std::invalid_argument("gradient requested for tensor not on this tape");
    Tensor g;
    g.shape = shapes_[t.node];
    if (grads_[t.node]) {
        g.data = grads_[t.node];
    } else {
        g.data = std::make_shared<std::vector<double>>(shape_size(g.shape), 0.0);
    }
    return g;
}

bool GradientMap::has(const Tensor& t) const {
    return t.node >= 0 && static_cast<std::size_t>(t.node) < grads_.size() &&
           grads_[t.node] != nullptr;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::reset() {
    nodes_.clear();
    grads_.clear();
    node_shapes_.clear();
}

int Tape::push(Tensor& out, std::function<void(Tape&, int)> back) {
    if (!recording_) return -1;
    nodes_.push_back(Node{std::move(back)});
    node_shapes_.push_back(out.shape);
    out.node = static_cast<int>(nodes_.size()) - 1;
    return out.node;
}

int Tape::watch(Tensor& t) {
    if (!t.defined()) throw std::invalid_argument("watch() on undefined tensor");
    if (!recording_) {
        t.node = -1;
        return -1;
    }
    nodes_.push_back(Node{});
    node_shapes_.push_back(t.shape);
    t.node = static_cast<int>(nodes_.size()) - 1;
    return t.node;
}

std::vector<double>* Tape::grad_of(int node) {
    if (node < 0) return nullptr;
    return grads_[node] ? grads_[node].get() : nullptr;
}

std::vector<double>& Tape::grad_accum(int node, std::size_t size) {
    if (!grads_[node]) grads_[node] = std::make_shared<std::vector<double>>(size, 0.0);
    return *grads_[node];
}

namespace {

void check_matrix(const Tensor& t, const char* who) {
    if (t.shape.size() != 2)
        throw ShapeError(std::string(who) + ": expected matrix, got " + shape_str(t.shape));
}

// C += A(m x k) * B(k x n), row-major. ikj order keeps the inner loop
// contiguous in both B and C.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T(m x k -> k x m) * B(m x n)
void matmul_at_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A(m x k) * B^T(n x k -> k x n)
void matmul_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul lhs");
    check_matrix(b, "matmul rhs");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " * " +
                         shape_str(b.shape));
    Tensor out = Tensor::zeros({m, n});
    matmul_acc(a.data->data(), b.data->data(), out.data->data(), m, k, n);

    auto ad = a.data, bd = b.data;
    const int an = a.node, bn = b.node;
    push(out, [ad, bd, an, bn, m, k, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go) return;
        if (an >= 0) {  // dA = dC * B^T
            auto& ga = t.grad_accum(an, m * k);
            matmul_bt_acc(go->data(), bd->data(), ga.data(), m, n, k);
        }
        if (bn >= 0) {  // dB = A^T * dC
            auto& gb = t.grad_accum(bn, k * n);
            matmul_at_acc(ad->data(), go->data(), gb.data(), m, k, n);
        }
    });
    return out;
}

Tensor Tape::transpose(const Tensor& a) {
    check_matrix(a, "transpose");
    const std::size_t m = a.shape[0], n = a.shape[1];
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*out.data)[j * m + i] = (*a.data)[i * n + j];
    push(out, [an = a.node, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& ga = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (*go)[j * m + i];
    });
    return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    push(out, [an = a.node, bn = b.node, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go) return;
        if (an >= 0) {
            auto& g = t.grad_accum(an, n);
            for (std::size_t i = 0; i < n; ++i) g[i] += (*go)[i];
        }
        if (bn >= 0) {
            auto& g = t.grad_accum(bn, n);
            for (std::size_t i = 0; i < n; ++i) g[i] += (*go)[i];
        }
    });
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    auto ad = a.data, bd = b.data;
    push(out, [ad, bd, an = a.node, bn = b.node, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go) return;
        if (an >= 0) {
            auto& g = t.grad_accum(an, n);
            for (std::size_t i = 0; i < n; ++i) g[i] += (*go)[i] * (*bd)[i];
        }
        if (bn >= 0) {
            auto& g = t.grad_accum(bn, n);
            for (std::size_t i = 0; i < n; ++i) g[i] += (*go)[i] * (*ad)[i];
        }
    });
    return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = c * (*a.data)[i];
    push(out, [an = a.node, c, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, n);
        for (std::size_t i = 0; i < n; ++i) g[i] += c * (*go)[i];
    });
    return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor Tape::gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = (*a.data)[i];
        const double u = kGeluC * (x + kGeluA * x * x * x);
        (*out.data)[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
    auto ad = a.data;
    push(out, [ad, an = a.node, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, n);
        for (std::size_t i = 0; i < n; ++i) {
            const double x = (*ad)[i];
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            g[i] += (*go)[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
        }
    });
    return out;
}

Tensor Tape::softmax_rows(const Tensor& a) {
    check_matrix(a, "softmax_rows");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (n < 1) throw ShapeError("softmax_rows: empty rows");
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data->data() + i * n;
        double* y = out.data->data() + i * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    auto od = out.data;
    push(out, [od, an = a.node, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = od->data() + i * n;
            const double* dy = go->data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
        }
    });
    return out;
}

Tensor Tape::log_sum_exp(const Tensor& a) {
    if (a.shape.size() != 1 || a.shape[0] < 1)
        throw ShapeError("log_sum_exp: expected non-empty vector, got " + shape_str(a.shape));
    const std::size_t n = a.shape[0];
    double mx = (*a.data)[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, (*a.data)[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp((*a.data)[j] - mx);
    Tensor out = Tensor::scalar(mx + std::log(s));
    auto ad = a.data;
    push(out, [ad, an = a.node, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, n);
        double mx = (*ad)[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, (*ad)[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp((*ad)[j] - mx);
        for (std::size_t j = 0; j < n; ++j) g[j] += (*go)[0] * std::exp((*ad)[j] - mx) / s;
    });
    return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const int> targets) {
    check_matrix(logits, "cross_entropy");
    const std::size_t m = logits.shape[0], v = logits.shape[1];
    if (targets.size() != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
    for (int y : targets)
        if (y < 0 || static_cast<std::size_t>(y) >= v)
            throw std::out_of_range("cross_entropy: target " + std::to_string(y) +
                                    " outside vocabulary of size " + std::to_string(v));
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = logits.data->data() + i * v;
        double mx = x[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
        total += (mx + std::log(s)) - x[targets[i]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(m));
    auto ld = logits.data;
    std::vector<int> tg(targets.begin(), targets.end());
    push(out, [ld, tg = std::move(tg), an = logits.node, m, v](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * v);
        const double c = (*go)[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* x = ld->data() + i * v;
            double mx = x[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
            for (std::size_t j = 0; j < v; ++j)
                g[i * v + j] += c * (std::exp(x[j] - mx) / s - (tg[i] == static_cast<int>(j)));
        }
    });
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int> ids) {
    check_matrix(table, "embedding_lookup");
    const std::size_t v = table.shape[0], d = table.shape[1], m = ids.size();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                    " outside table of size " + std::to_string(v));
    Tensor out = Tensor::zeros({m, d});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(table.data->data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data->data() + i * d);
    std::vector<int> idv(ids.begin(), ids.end());
    push(out, [idv = std::move(idv), an = table.node, v, d, m](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, v * d);
        for (std::size_t i = 0; i < m; ++i) {
            double* row = g.data() + static_cast<std::size_t>(idv[i]) * d;
            const double* src = go->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
        }
    });
    return out;
}

Tensor Tape::concat_last_axis(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_last_axis: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != m)
            throw ShapeError("concat_last_axis: row count mismatch " + shape_str(p.shape));
        total += p.cols();
    }
    Tensor out = Tensor::zeros({m, total});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t n = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(p.data->data() + i * n, n, out.data->data() + i * total + off);
        off += n;
    }
    std::vector<int> in_nodes;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        in_nodes.push_back(p.node);
        widths.push_back(p.cols());
    }
    push(out, [in_nodes = std::move(in_nodes), widths = std::move(widths), m, total](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go) return;
        std::size_t off = 0;
        for (std::size_t p = 0; p < in_nodes.size(); ++p) {
            const std::size_t n = widths[p];
            if (in_nodes[p] >= 0) {
                auto& g = t.grad_accum(in_nodes[p], m * n);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (*go)[i * total + off + j];
            }
            off += n;
        }
    });
    return out;
}

Tensor Tape::mean(const Tensor& a) {
    const std::size_t n = a.size();
    if (n == 0) throw ShapeError("mean of empty tensor");
    double s = 0.0;
    for (double v : *a.data) s += v;
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    push(out, [an = a.node, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, n);
        const double c = (*go)[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) g[i] += c;
    });
    return out;
}

Tensor Tape::shift_rows(const Tensor& a, std::size_t shift, std::size_t window) {
    check_matrix(a, "shift_rows");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (window == 0 || m % window != 0)
        throw ShapeError("shift_rows: rows " + std::to_string(m) + " not divisible by window " +
                         std::to_string(window));
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        if (i % window < shift) continue;  // crosses a window boundary
        std::copy_n(a.data->data() + (i - shift) * n, n, out.data->data() + i * n);
    }
    push(out, [an = a.node, shift, window, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i) {
            if (i % window < shift) continue;
            const double* src = go->data() + i * n;
            double* dst = g.data() + (i - shift) * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
    return out;
}

Tensor Tape::scale_rows(const Tensor& a, const Tensor& w) {
    check_matrix(a, "scale_rows");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (w.shape.size() != 1 || w.shape[0] != m)
        throw ShapeError("scale_rows: weight shape " + shape_str(w.shape) + " for " +
                         std::to_string(m) + " rows");
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double c = (*w.data)[i];
        for (std::size_t j = 0; j < n; ++j) (*out.data)[i * n + j] = c * (*a.data)[i * n + j];
    }
    auto ad = a.data, wd = w.data;
    push(out, [ad, wd, an = a.node, wn = w.node, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go) return;
        if (an >= 0) {
            auto& g = t.grad_accum(an, m * n);
            for (std::size_t i = 0; i < m; ++i) {
                const double c = (*wd)[i];
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += c * (*go)[i * n + j];
            }
        }
        if (wn >= 0) {
            auto& g = t.grad_accum(wn, m);
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += (*go)[i * n + j] * (*ad)[i * n + j];
                g[i] += acc;
            }
        }
    });
    return out;
}

Tensor Tape::col(const Tensor& a, std::size_t j) {
    check_matrix(a, "col");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (j >= n) throw std::out_of_range("col: index " + std::to_string(j) + " of " + std::to_string(n));
    Tensor out = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) (*out.data)[i] = (*a.data)[i * n + j];
    push(out, [an = a.node, j, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i) g[i * n + j] += (*go)[i];
    });
    return out;
}

Tensor Tape::topk_renorm(const Tensor& probs, const std::vector<std::vector<int>>& selected) {
    check_matrix(probs, "topk_renorm");
    const std::size_t m = probs.shape[0], n = probs.shape[1];
    if (selected.size() != m)
        throw ShapeError("topk_renorm: selection rows " + std::to_string(selected.size()) +
                         " for " + std::to_string(m) + " tokens");
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> sums(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j : selected[i]) s += probs.at(i, j);
        sums[i] = s;
        for (int j : selected[i]) out.at(i, j) = probs.at(i, j) / s;
    }
    auto od = out.data;
    push(out, [od, sel = selected, sums = std::move(sums), an = probs.node, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j : sel[i]) dot += (*go)[i * n + j] * (*od)[i * n + j];
            for (int j : sel[i]) g[i * n + j] += ((*go)[i * n + j] - dot) / sums[i];
        }
    });
    return out;
}

Tensor Tape::colmean_dot(const Tensor& a, const std::vector<double>& w) {
    check_matrix(a, "colmean_dot");
    const std::size_t m = a.shape[0], n = a.shape[1];
    if (w.size() != n)
        throw ShapeError("colmean_dot: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(n) + " columns");
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += (*a.data)[i * n + j];
        acc += w[j] * s / static_cast<double>(m);
    }
    Tensor out = Tensor::scalar(acc);
    push(out, [w, an = a.node, m, n](Tape& t, int on) {
        const std::vector<double>* go = t.grad_of(on);
        if (!go || an < 0) return;
        auto& g = t.grad_accum(an, m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += (*go)[0] * w[j] / static_cast<double>(m);
    });
    return out;
}

GradientMap Tape::backward(const Tensor& loss) {
    if (!recording_) throw std::logic_error("backward() on a non-recording tape");
    if (loss.node < 0 || static_cast<std::size_t>(loss.node) >= nodes_.size())
        throw std::invalid_argument("backward(): loss is not on this tape");
    if (loss.size() != 1)
        throw std::invalid_argument("backward(): loss must be scalar, got shape " +
                                    shape_str(loss.shape));
    grads_.assign(nodes_.size(), nullptr);
    grads_[loss.node] = std::make_shared<std::vector<double>>(1, 1.0);
    for (int i = loss.node; i >= 0; --i) {
        if (!grads_[i]) continue;  // node does not influence the loss
        if (nodes_[i].back) nodes_[i].back(*this, i);
    }
    GradientMap map;
    map.grads_ = std::move(grads_);
    map.shapes_ = node_shapes_;
    grads_.clear();
    return map;
}

}  // namespace comigs
