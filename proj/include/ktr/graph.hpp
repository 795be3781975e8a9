#pragma once

// Append-only reverse-mode tape.
//
// Ops evaluate eagerly when appended; the tape keeps every intermediate value
// so a single forward pass can feed any number of scalar loss heads. Nodes
// only ever reference earlier nodes, so reverse insertion order is a valid
// topological order for backward.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ktr/tensor.hpp"

namespace ktr::diff {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
    Parameter,
    Constant,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Relu,
    Exp,
    Clamp,
    Minimum,
    RmsNormRows,
    CausalSoftmaxRows,
    LogSoftmaxRows,
    GatherRows,
    PickPerRow,
    Element,
    SliceRows,
    SliceCols,
    ConcatCols,
    Sum,
    Dot,
};

std::string_view op_name(OpKind kind);

/// Gradients for every registered parameter, in registration order.
struct GradientVector {
    std::vector<std::vector<double>> per_parameter;

    std::size_t total_size() const;
    double norm() const;
    std::vector<double> flatten() const;
    GradientVector& operator+=(const GradientVector& other);
    void scale(double factor);
};

class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = default;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(const Graph&) = default;
    Graph& operator=(Graph&&) noexcept = default;

    /// Registers a parameter owned by the graph.
    NodeId parameter(Tensor value);
    /// Registers a parameter that aliases caller storage. The referenced
    /// tensor must outlive the graph and must not change while it is in use.
    NodeId parameter_view(const Tensor& value);
    NodeId constant(Tensor value);

    NodeId matmul(NodeId a, NodeId b);     // [m,k]x[k,n]
    NodeId matmul_nt(NodeId a, NodeId b);  // [m,k]x[n,k]^T
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId add_row(NodeId a, NodeId row);  // a[m,n] + row[n] broadcast over rows
    NodeId mul_row(NodeId a, NodeId row);
    NodeId scale(NodeId a, double factor);
    NodeId add_scalar(NodeId a, double offset);
    NodeId relu(NodeId a);
    NodeId exp(NodeId a);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId minimum(NodeId a, NodeId b);
    NodeId rms_norm_rows(NodeId a, double eps);
    NodeId causal_softmax_rows(NodeId a);  // square input, entries above the diagonal masked
    NodeId log_softmax_rows(NodeId a);
    NodeId gather_rows(NodeId table, std::vector<std::size_t> rows);
    NodeId pick_per_row(NodeId a, std::vector<std::size_t> cols);  // -> [m]
    NodeId element(NodeId a, std::size_t index);                   // -> scalar
    NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end);
    NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end);
    NodeId concat_cols(std::vector<NodeId> parts);
    NodeId sum(NodeId a);
    NodeId dot(NodeId a, NodeId b);

    const Tensor& value(NodeId id) const;
    OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
    const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
    std::size_t size() const { return nodes_.size(); }

    std::size_t parameter_count() const { return parameter_nodes_.size(); }
    NodeId parameter_node(std::size_t index) const { return parameter_nodes_.at(index); }

    /// d(loss)/d(parameter) for every registered parameter. When
    /// `restrict_to` is non-empty only those parameter indices are
    /// differentiated; the others come back as zeros.
    GradientVector backward(NodeId loss, std::span<const std::size_t> restrict_to = {}) const;

    /// Overwrites one element of a parameter (materializing a view if
    /// needed). Call recompute() afterwards to refresh dependent nodes.
    void set_parameter_element(std::size_t parameter, std::size_t index, double value);
    double parameter_element(std::size_t parameter, std::size_t index) const;
    /// Re-evaluates every non-leaf node in insertion order.
    void recompute();

  private:
    struct Node {
        OpKind kind{};
        std::vector<NodeId> inputs;
        Tensor value;
        const Tensor* external = nullptr;
        double a = 0.0;
        double b = 0.0;
        std::vector<std::size_t> indices;
    };

    NodeId append(Node node);
    void evaluate(Node& node) const;
    void accumulate_inputs(const Node& node, const Tensor& out_grad,
                           std::vector<Tensor>& grads, const std::vector<char>& needs) const;
    const Tensor& input_value(const Node& node, std::size_t slot) const {
        return value(node.inputs[slot]);
    }

    std::vector<Node> nodes_;
    std::vector<NodeId> parameter_nodes_;
};

/// Central finite-difference check of `backward` for the given scalar loss.
/// Returns max over all parameter entries of |analytic - numeric| / max(1, |numeric|).
/// The graph is restored to its original parameter values on return.
/// `gradient_fault` is added to the first analytic entry (fault injection for self-tests).
double finite_difference_check(Graph& graph, NodeId loss, double step,
                               double gradient_fault = 0.0);

}  // namespace ktr::diff
