#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "comigs/errors.hpp"

namespace comigs {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major array of 64-bit floats. Copies are shallow (shared
/// storage); ops always allocate fresh storage for their outputs. `node`
/// is the handle of the tape node that produced (or watches) this value,
/// or -1 for untracked constants.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> values);

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor scalar(double v);

    std::size_t size() const { return data ? data->size() : 0; }
    bool defined() const { return static_cast<bool>(data); }

    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
    double& operator[](std::size_t i) { return (*data)[i]; }
    double operator[](std::size_t i) const { return (*data)[i]; }

    /// Value of a single-element tensor.
    double value() const;

    bool all_finite() const;
    /// Deep copy with detached storage and no tape handle.
    Tensor clone() const;
};

class Tape;

/// Gradients produced by one backward pass, keyed by tape node.
/// Parameters that do not influence the loss report zero gradients.
class GradientMap {
public:
    /// Gradient of the loss w.r.t. the tensor `t` (which must have been
    /// watched or produced on the originating tape).
    Tensor grad(const Tensor& t) const;
    bool has(const Tensor& t) const;

private:
    friend class Tape;
    std::vector<std::shared_ptr<std::vector<double>>> grads_;
    std::vector<Shape> shapes_;
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order,
/// which is a topological order by construction; backward walks the list
/// once in reverse. A tape constructed with recording=false evaluates ops
/// without building a graph (used for inference).
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t node_count() const { return nodes_.size(); }
    void reset();

    /// Registers a leaf (parameter or constant input) and stamps its node id.
    int watch(Tensor& t);

    // --- registered operations ---
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double c);
    Tensor gelu(const Tensor& a);
    Tensor softmax_rows(const Tensor& a);
    Tensor log_sum_exp(const Tensor& a);
    Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
    Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
    Tensor concat_last_axis(const std::vector<Tensor>& parts);
    Tensor mean(const Tensor& a);
    /// Rows shifted down by `shift` inside consecutive blocks of
    /// `window` rows; vacated rows are zero. Used to assemble causal
    /// context windows without crossing sequence boundaries.
    Tensor shift_rows(const Tensor& a, std::size_t shift, std::size_t window);
    /// y[i,:] = a[i,:] * w[i] for a column-vector of per-row weights.
    Tensor scale_rows(const Tensor& a, const Tensor& w);
    /// Column j of a matrix as a length-rows vector.
    Tensor col(const Tensor& a, std::size_t j);
    /// Dense top-k mixture weights: for each row, the selected entries of
    /// `probs` renormalized to sum to one, zeros elsewhere.
    Tensor topk_renorm(const Tensor& probs, const std::vector<std::vector<int>>& selected);
    /// sum_j w[j] * mean_i a[i,j]  (scalar).
    Tensor colmean_dot(const Tensor& a, const std::vector<double>& w);

    /// Reverse pass from a scalar loss. Throws if the loss is not a
    /// tracked scalar. Deterministic: identical tapes produce bitwise
    /// identical gradients.
    GradientMap backward(const Tensor& loss);

private:
    struct Node {
        // Invoked with the node's own id during the reverse pass; empty for
        // leaves.
        std::function<void(Tape&, int)> back;
    };

    int push(Tensor& out, std::function<void(Tape&, int)> back);
    std::vector<double>* grad_of(int node);
    std::vector<double>& grad_accum(int node, std::size_t size);

    bool recording_ = true;
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<std::vector<double>>> grads_;
    std::vector<Shape> node_shapes_;
};

}  // namespace comigs
