#include "ktr/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ktr/kernels.hpp"

namespace ktr::diff {

namespace kp = kernels::parallel;

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Parameter: return "parameter";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::MatMulNT: return "matmul_nt";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::AddRow: return "add_row";
        case OpKind::MulRow: return "mul_row";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Clamp: return "clamp";
        case OpKind::Minimum: return "minimum";
        case OpKind::RmsNormRows: return "rms_norm_rows";
        case OpKind::CausalSoftmaxRows: return "causal_softmax_rows";
        case OpKind::LogSoftmaxRows: return "log_softmax_rows";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::PickPerRow: return "pick_per_row";
        case OpKind::Element: return "element";
        case OpKind::SliceRows: return "slice_rows";
        case OpKind::SliceCols: return "slice_cols";
        case OpKind::ConcatCols: return "concat_cols";
        case OpKind::Sum: return "sum";
        case OpKind::Dot: return "dot";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// GradientVector

std::size_t GradientVector::total_size() const {
    std::size_t n = 0;
    for (const auto& g : per_parameter) {
        n += g.size();
    }
    return n;
}

double GradientVector::norm() const {
    double acc = 0.0;
    for (const auto& g : per_parameter) {
        for (const double v : g) {
            acc += v * v;
        }
    }
    return std::sqrt(acc);
}

std::vector<double> GradientVector::flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& g : per_parameter) {
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

GradientVector& GradientVector::operator+=(const GradientVector& other) {
    if (per_parameter.empty()) {
        per_parameter = other.per_parameter;
        return *this;
    }
    if (other.per_parameter.size() != per_parameter.size()) {
        throw std::invalid_argument("gradient vectors have different parameter counts");
    }
    for (std::size_t p = 0; p < per_parameter.size(); ++p) {
        auto& dst = per_parameter[p];
        const auto& src = other.per_parameter[p];
        if (dst.size() != src.size()) {
            throw std::invalid_argument("gradient vectors have mismatched parameter sizes");
        }
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += src[i];
        }
    }
    return *this;
}

void GradientVector::scale(double factor) {
    for (auto& g : per_parameter) {
        for (auto& v : g) {
            v *= factor;
        }
    }
}

// ---------------------------------------------------------------------------
// Graph construction

namespace {

void require(bool ok, const char* op, const std::string& what) {
    if (!ok) {
        throw std::invalid_argument(std::string(op) + ": " + what);
    }
}

bool is_matrix(const Tensor& t) { return t.rank() == 2; }

void add_into(Tensor& dst, const Tensor& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

}  // namespace

NodeId Graph::append(Node node) {
    evaluate(node);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

const Tensor& Graph::value(NodeId id) const {
    const auto& node = nodes_.at(id);
    return node.external != nullptr ? *node.external : node.value;
}

NodeId Graph::parameter(Tensor value) {
    if (!value.all_finite()) {
        throw std::domain_error("parameter: non-finite value");
    }
    Node node;
    node.kind = OpKind::Parameter;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    parameter_nodes_.push_back(nodes_.size() - 1);
    return nodes_.size() - 1;
}

NodeId Graph::parameter_view(const Tensor& value) {
    if (!value.all_finite()) {
        throw std::domain_error("parameter: non-finite value");
    }
    Node node;
    node.kind = OpKind::Parameter;
    node.external = &value;
    nodes_.push_back(std::move(node));
    parameter_nodes_.push_back(nodes_.size() - 1);
    return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) {
    if (!value.all_finite()) {
        throw std::domain_error("constant: non-finite value");
    }
    Node node;
    node.kind = OpKind::Constant;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    require(is_matrix(va) && is_matrix(vb), "matmul", "operands must be matrices");
    require(va.cols() == vb.rows(), "matmul",
            "inner extents differ: " + va.shape_string() + " x " + vb.shape_string());
    return append({.kind = OpKind::MatMul, .inputs = {a, b}});
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    require(is_matrix(va) && is_matrix(vb), "matmul_nt", "operands must be matrices");
    require(va.cols() == vb.cols(), "matmul_nt",
            "inner extents differ: " + va.shape_string() + " x " + vb.shape_string() + "^T");
    return append({.kind = OpKind::MatMulNT, .inputs = {a, b}});
}

NodeId Graph::add(NodeId a, NodeId b) {
    require(value(a).shape() == value(b).shape(), "add", "shape mismatch");
    return append({.kind = OpKind::Add, .inputs = {a, b}});
}

NodeId Graph::sub(NodeId a, NodeId b) {
    require(value(a).shape() == value(b).shape(), "sub", "shape mismatch");
    return append({.kind = OpKind::Sub, .inputs = {a, b}});
}

NodeId Graph::mul(NodeId a, NodeId b) {
    require(value(a).shape() == value(b).shape(), "mul", "shape mismatch");
    return append({.kind = OpKind::Mul, .inputs = {a, b}});
}

NodeId Graph::add_row(NodeId a, NodeId row) {
    require(is_matrix(value(a)), "add_row", "first operand must be a matrix");
    require(value(row).size() == value(a).cols(), "add_row", "row length mismatch");
    return append({.kind = OpKind::AddRow, .inputs = {a, row}});
}

NodeId Graph::mul_row(NodeId a, NodeId row) {
    require(is_matrix(value(a)), "mul_row", "first operand must be a matrix");
    require(value(row).size() == value(a).cols(), "mul_row", "row length mismatch");
    return append({.kind = OpKind::MulRow, .inputs = {a, row}});
}

NodeId Graph::scale(NodeId a, double factor) {
    return append({.kind = OpKind::Scale, .inputs = {a}, .a = factor});
}

NodeId Graph::add_scalar(NodeId a, double offset) {
    return append({.kind = OpKind::AddScalar, .inputs = {a}, .a = offset});
}

NodeId Graph::relu(NodeId a) { return append({.kind = OpKind::Relu, .inputs = {a}}); }

NodeId Graph::exp(NodeId a) { return append({.kind = OpKind::Exp, .inputs = {a}}); }

NodeId Graph::clamp(NodeId a, double lo, double hi) {
    require(lo <= hi, "clamp", "lower bound exceeds upper bound");
    return append({.kind = OpKind::Clamp, .inputs = {a}, .a = lo, .b = hi});
}

NodeId Graph::minimum(NodeId a, NodeId b) {
    require(value(a).shape() == value(b).shape(), "minimum", "shape mismatch");
    return append({.kind = OpKind::Minimum, .inputs = {a, b}});
}

NodeId Graph::rms_norm_rows(NodeId a, double eps) {
    require(eps > 0.0, "rms_norm_rows", "eps must be positive");
    return append({.kind = OpKind::RmsNormRows, .inputs = {a}, .a = eps});
}

NodeId Graph::causal_softmax_rows(NodeId a) {
    const auto& va = value(a);
    require(is_matrix(va) && va.rows() == va.cols(), "causal_softmax_rows",
            "input must be square, got " + va.shape_string());
    return append({.kind = OpKind::CausalSoftmaxRows, .inputs = {a}});
}

NodeId Graph::log_softmax_rows(NodeId a) {
    require(value(a).cols() >= 2, "log_softmax_rows", "rows need at least two entries");
    return append({.kind = OpKind::LogSoftmaxRows, .inputs = {a}});
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> rows) {
    const auto& vt = value(table);
    require(is_matrix(vt), "gather_rows", "table must be a matrix");
    require(!rows.empty(), "gather_rows", "no rows requested");
    for (const auto r : rows) {
        require(r < vt.rows(), "gather_rows", "row index " + std::to_string(r) + " out of range");
    }
    return append({.kind = OpKind::GatherRows, .inputs = {table}, .indices = std::move(rows)});
}

NodeId Graph::pick_per_row(NodeId a, std::vector<std::size_t> cols) {
    const auto& va = value(a);
    require(cols.size() == va.rows(), "pick_per_row", "one column index per row required");
    for (const auto c : cols) {
        require(c < va.cols(), "pick_per_row", "column index " + std::to_string(c) + " out of range");
    }
    return append({.kind = OpKind::PickPerRow, .inputs = {a}, .indices = std::move(cols)});
}

NodeId Graph::element(NodeId a, std::size_t index) {
    require(index < value(a).size(), "element", "index out of range");
    return append({.kind = OpKind::Element, .inputs = {a}, .indices = {index}});
}

NodeId Graph::slice_rows(NodeId a, std::size_t begin, std::size_t end) {
    require(is_matrix(value(a)), "slice_rows", "input must be a matrix");
    require(begin < end && end <= value(a).rows(), "slice_rows", "bad row range");
    return append({.kind = OpKind::SliceRows, .inputs = {a}, .indices = {begin, end}});
}

NodeId Graph::slice_cols(NodeId a, std::size_t begin, std::size_t end) {
    require(is_matrix(value(a)), "slice_cols", "input must be a matrix");
    require(begin < end && end <= value(a).cols(), "slice_cols", "bad column range");
    return append({.kind = OpKind::SliceCols, .inputs = {a}, .indices = {begin, end}});
}

NodeId Graph::concat_cols(std::vector<NodeId> parts) {
    require(!parts.empty(), "concat_cols", "nothing to concatenate");
    const auto rows = value(parts.front()).rows();
    for (const auto p : parts) {
        require(is_matrix(value(p)) && value(p).rows() == rows, "concat_cols",
                "parts must be matrices with equal row counts");
    }
    return append({.kind = OpKind::ConcatCols, .inputs = std::move(parts)});
}

NodeId Graph::sum(NodeId a) { return append({.kind = OpKind::Sum, .inputs = {a}}); }

NodeId Graph::dot(NodeId a, NodeId b) {
    require(value(a).size() == value(b).size(), "dot", "length mismatch");
    return append({.kind = OpKind::Dot, .inputs = {a, b}});
}

// ---------------------------------------------------------------------------
// Forward evaluation

void Graph::evaluate(Node& node) const {
    switch (node.kind) {
        case OpKind::Parameter:
        case OpKind::Constant:
            return;
        case OpKind::MatMul: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            Tensor out({a.rows(), b.cols()});
            kp::matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
            node.value = std::move(out);
            break;
        }
        case OpKind::MatMulNT: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            Tensor out({a.rows(), b.rows()});
            kp::matmul_nt(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.rows());
            node.value = std::move(out);
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Minimum: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            Tensor out(a.shape());
            for (std::size_t i = 0; i < out.size(); ++i) {
                switch (node.kind) {
                    case OpKind::Add: out[i] = a[i] + b[i]; break;
                    case OpKind::Sub: out[i] = a[i] - b[i]; break;
                    case OpKind::Mul: out[i] = a[i] * b[i]; break;
                    default: out[i] = std::min(a[i], b[i]); break;
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::AddRow:
        case OpKind::MulRow: {
            const auto& a = input_value(node, 0);
            const auto& row = input_value(node, 1);
            Tensor out(a.shape());
            const auto n = a.cols();
            for (std::size_t i = 0; i < a.rows(); ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    out.at(i, j) = node.kind == OpKind::AddRow ? a.at(i, j) + row[j]
                                                                : a.at(i, j) * row[j];
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::Scale:
        case OpKind::AddScalar:
        case OpKind::Relu:
        case OpKind::Exp:
        case OpKind::Clamp: {
            const auto& a = input_value(node, 0);
            Tensor out(a.shape());
            for (std::size_t i = 0; i < out.size(); ++i) {
                switch (node.kind) {
                    case OpKind::Scale: out[i] = a[i] * node.a; break;
                    case OpKind::AddScalar: out[i] = a[i] + node.a; break;
                    case OpKind::Relu: out[i] = a[i] > 0.0 ? a[i] : 0.0; break;
                    case OpKind::Exp: out[i] = std::exp(a[i]); break;
                    default: out[i] = std::clamp(a[i], node.a, node.b); break;
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::RmsNormRows: {
            const auto& a = input_value(node, 0);
            Tensor out(a.shape());
            const auto n = a.cols();
            for (std::size_t i = 0; i < a.rows(); ++i) {
                double ms = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    ms += a.at(i, j) * a.at(i, j);
                }
                const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + node.a);
                for (std::size_t j = 0; j < n; ++j) {
                    out.at(i, j) = a.at(i, j) * inv;
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::CausalSoftmaxRows: {
            const auto& a = input_value(node, 0);
            Tensor out(a.shape());
            const auto n = a.cols();
            for (std::size_t i = 0; i < n; ++i) {
                double mx = a.at(i, 0);
                for (std::size_t j = 1; j <= i; ++j) {
                    mx = std::max(mx, a.at(i, j));
                }
                double total = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double e = std::exp(a.at(i, j) - mx);
                    out.at(i, j) = e;
                    total += e;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    out.at(i, j) /= total;
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::LogSoftmaxRows: {
            const auto& a = input_value(node, 0);
            Tensor out(a.shape());
            kp::log_softmax_rows(a.data(), out.data(), a.rows(), a.cols());
            node.value = std::move(out);
            break;
        }
        case OpKind::GatherRows: {
            const auto& t = input_value(node, 0);
            const auto d = t.cols();
            Tensor out({node.indices.size(), d});
            for (std::size_t i = 0; i < node.indices.size(); ++i) {
                const auto src = t.data().subspan(node.indices[i] * d, d);
                std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::PickPerRow: {
            const auto& a = input_value(node, 0);
            Tensor out({node.indices.size()});
            for (std::size_t i = 0; i < node.indices.size(); ++i) {
                out[i] = a.at(i, node.indices[i]);
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::Element:
            node.value = Tensor::scalar(input_value(node, 0)[node.indices[0]]);
            break;
        case OpKind::SliceRows: {
            const auto& a = input_value(node, 0);
            const auto n = a.cols();
            const auto b = node.indices[0];
            const auto e = node.indices[1];
            Tensor out({e - b, n});
            std::copy(a.data().begin() + static_cast<std::ptrdiff_t>(b * n),
                      a.data().begin() + static_cast<std::ptrdiff_t>(e * n), out.data().begin());
            node.value = std::move(out);
            break;
        }
        case OpKind::SliceCols: {
            const auto& a = input_value(node, 0);
            const auto b = node.indices[0];
            const auto e = node.indices[1];
            Tensor out({a.rows(), e - b});
            for (std::size_t i = 0; i < a.rows(); ++i) {
                for (std::size_t j = b; j < e; ++j) {
                    out.at(i, j - b) = a.at(i, j);
                }
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::ConcatCols: {
            std::size_t total = 0;
            for (std::size_t s = 0; s < node.inputs.size(); ++s) {
                total += input_value(node, s).cols();
            }
            const auto rows = input_value(node, 0).rows();
            Tensor out({rows, total});
            std::size_t offset = 0;
            for (std::size_t s = 0; s < node.inputs.size(); ++s) {
                const auto& part = input_value(node, s);
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < part.cols(); ++j) {
                        out.at(i, offset + j) = part.at(i, j);
                    }
                }
                offset += part.cols();
            }
            node.value = std::move(out);
            break;
        }
        case OpKind::Sum: {
            double acc = 0.0;
            for (const double v : input_value(node, 0).data()) {
                acc += v;
            }
            node.value = Tensor::scalar(acc);
            break;
        }
        case OpKind::Dot: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            double acc = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                acc += a[i] * b[i];
            }
            node.value = Tensor::scalar(acc);
            break;
        }
    }
    if (!node.value.all_finite()) {
        throw std::domain_error(std::string("non-finite value produced by ") +
                                std::string(op_name(node.kind)));
    }
}

// ---------------------------------------------------------------------------
// Backward

void Graph::accumulate_inputs(const Node& node, const Tensor& g, std::vector<Tensor>& grads,
                              const std::vector<char>& needs) const {
    auto slot = [&](std::size_t s) -> Tensor* {
        const auto id = node.inputs[s];
        if (!needs[id]) {
            return nullptr;
        }
        if (grads[id].size() != value(id).size() || grads[id].shape() != value(id).shape()) {
            grads[id] = Tensor(value(id).shape());
        }
        return &grads[id];
    };
    const Tensor& out = node.value;

    switch (node.kind) {
        case OpKind::Parameter:
        case OpKind::Constant:
            return;
        case OpKind::MatMul: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            const auto m = a.rows();
            const auto k = a.cols();
            const auto n = b.cols();
            if (auto* da = slot(0)) {
                Tensor tmp({m, k});
                kp::matmul_nt(g.data(), b.data(), tmp.data(), m, n, k);
                add_into(*da, tmp);
            }
            if (auto* db = slot(1)) {
                kp::matmul_tn_accumulate(a.data(), g.data(), db->data(), m, k, n);
            }
            return;
        }
        case OpKind::MatMulNT: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            const auto m = a.rows();
            const auto k = a.cols();
            const auto n = b.rows();
            if (auto* da = slot(0)) {
                Tensor tmp({m, k});
                kp::matmul(g.data(), b.data(), tmp.data(), m, n, k);
                add_into(*da, tmp);
            }
            if (auto* db = slot(1)) {
                kp::matmul_tn_accumulate(g.data(), a.data(), db->data(), m, n, k);
            }
            return;
        }
        case OpKind::Add:
            if (auto* da = slot(0)) add_into(*da, g);
            if (auto* db = slot(1)) add_into(*db, g);
            return;
        case OpKind::Sub:
            if (auto* da = slot(0)) add_into(*da, g);
            if (auto* db = slot(1)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
            }
            return;
        case OpKind::Mul: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
            }
            if (auto* db = slot(1)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
            }
            return;
        }
        case OpKind::Minimum: {
            // Ties route the gradient to the first operand.
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            auto* da = slot(0);
            auto* db = slot(1);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (a[i] <= b[i]) {
                    if (da) (*da)[i] += g[i];
                } else if (db) {
                    (*db)[i] += g[i];
                }
            }
            return;
        }
        case OpKind::AddRow:
        case OpKind::MulRow: {
            const auto& a = input_value(node, 0);
            const auto& row = input_value(node, 1);
            const auto n = a.cols();
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        da->at(i, j) += node.kind == OpKind::AddRow ? g.at(i, j) : g.at(i, j) * row[j];
                    }
                }
            }
            if (auto* dr = slot(1)) {
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*dr)[j] += node.kind == OpKind::AddRow ? g.at(i, j) : g.at(i, j) * a.at(i, j);
                    }
                }
            }
            return;
        }
        case OpKind::Scale:
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * node.a;
            }
            return;
        case OpKind::AddScalar:
            if (auto* da = slot(0)) add_into(*da, g);
            return;
        case OpKind::Relu:
            if (auto* da = slot(0)) {
                const auto& a = input_value(node, 0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (a[i] > 0.0) (*da)[i] += g[i];
                }
            }
            return;
        case OpKind::Exp:
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * out[i];
            }
            return;
        case OpKind::Clamp:
            if (auto* da = slot(0)) {
                const auto& a = input_value(node, 0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (a[i] >= node.a && a[i] <= node.b) (*da)[i] += g[i];
                }
            }
            return;
        case OpKind::RmsNormRows:
            if (auto* da = slot(0)) {
                const auto& a = input_value(node, 0);
                const auto n = a.cols();
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    double ms = 0.0;
                    double gy = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        ms += a.at(i, j) * a.at(i, j);
                        gy += g.at(i, j) * out.at(i, j);
                    }
                    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + node.a);
                    gy /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        da->at(i, j) += (g.at(i, j) - out.at(i, j) * gy) * inv;
                    }
                }
            }
            return;
        case OpKind::CausalSoftmaxRows:
            if (auto* da = slot(0)) {
                const auto n = out.cols();
                for (std::size_t i = 0; i < n; ++i) {
                    double inner = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        inner += out.at(i, j) * g.at(i, j);
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        da->at(i, j) += out.at(i, j) * (g.at(i, j) - inner);
                    }
                }
            }
            return;
        case OpKind::LogSoftmaxRows:
            if (auto* da = slot(0)) {
                const auto n = out.cols();
                for (std::size_t i = 0; i < out.rows(); ++i) {
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        gsum += g.at(i, j);
                    }
                    if (gsum == 0.0) {
                        for (std::size_t j = 0; j < n; ++j) {
                            da->at(i, j) += g.at(i, j);
                        }
                        continue;
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        da->at(i, j) += g.at(i, j) - std::exp(out.at(i, j)) * gsum;
                    }
                }
            }
            return;
        case OpKind::GatherRows:
            if (auto* dt = slot(0)) {
                const auto d = dt->cols();
                for (std::size_t i = 0; i < node.indices.size(); ++i) {
                    const auto r = node.indices[i];
                    for (std::size_t j = 0; j < d; ++j) {
                        dt->at(r, j) += g.at(i, j);
                    }
                }
            }
            return;
        case OpKind::PickPerRow:
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < node.indices.size(); ++i) {
                    da->at(i, node.indices[i]) += g[i];
                }
            }
            return;
        case OpKind::Element:
            if (auto* da = slot(0)) {
                (*da)[node.indices[0]] += g[0];
            }
            return;
        case OpKind::SliceRows:
            if (auto* da = slot(0)) {
                const auto n = da->cols();
                const auto b = node.indices[0];
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        da->at(b + i, j) += g.at(i, j);
                    }
                }
            }
            return;
        case OpKind::SliceCols:
            if (auto* da = slot(0)) {
                const auto b = node.indices[0];
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                        da->at(i, b + j) += g.at(i, j);
                    }
                }
            }
            return;
        case OpKind::ConcatCols: {
            std::size_t offset = 0;
            for (std::size_t s = 0; s < node.inputs.size(); ++s) {
                const auto width = input_value(node, s).cols();
                if (auto* dp = slot(s)) {
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                        for (std::size_t j = 0; j < width; ++j) {
                            dp->at(i, j) += g.at(i, offset + j);
                        }
                    }
                }
                offset += width;
            }
            return;
        }
        case OpKind::Sum:
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[0];
            }
            return;
        case OpKind::Dot: {
            const auto& a = input_value(node, 0);
            const auto& b = input_value(node, 1);
            if (auto* da = slot(0)) {
                for (std::size_t i = 0; i < a.size(); ++i) (*da)[i] += g[0] * b[i];
            }
            if (auto* db = slot(1)) {
                for (std::size_t i = 0; i < a.size(); ++i) (*db)[i] += g[0] * a[i];
            }
            return;
        }
    }
}

GradientVector Graph::backward(NodeId loss, std::span<const std::size_t> restrict_to) const {
    if (loss >= nodes_.size()) {
        throw std::out_of_range("backward: unknown loss node");
    }
    if (!value(loss).is_scalar()) {
        throw std::invalid_argument("backward: loss node must be scalar, got shape " +
                                    value(loss).shape_string());
    }

    // A node needs a gradient only if some differentiated parameter feeds it.
    std::vector<char> wanted(parameter_nodes_.size(), restrict_to.empty() ? 1 : 0);
    for (const auto p : restrict_to) {
        wanted.at(p) = 1;
    }
    std::vector<char> needs(loss + 1, 0);
    std::size_t next_param = 0;
    for (NodeId id = 0; id <= loss; ++id) {
        const auto& node = nodes_[id];
        if (node.kind == OpKind::Parameter) {
            while (parameter_nodes_[next_param] != id) {
                ++next_param;
            }
            needs[id] = wanted[next_param];
            continue;
        }
        for (const auto in : node.inputs) {
            if (needs[in]) {
                needs[id] = 1;
                break;
            }
        }
    }

    std::vector<Tensor> grads(loss + 1, Tensor());
    std::vector<char> touched(loss + 1, 0);
    if (needs[loss]) {
        grads[loss] = Tensor::scalar(1.0);
        touched[loss] = 1;
    }
    for (NodeId id = loss + 1; id-- > 0;) {
        if (!touched[id] || !needs[id]) {
            continue;
        }
        const auto& node = nodes_[id];
        accumulate_inputs(node, grads[id], grads, needs);
        for (const auto in : node.inputs) {
            if (needs[in]) {
                touched[in] = 1;
            }
        }
    }

    GradientVector out;
    out.per_parameter.reserve(parameter_nodes_.size());
    for (const auto pid : parameter_nodes_) {
        const auto n = value(pid).size();
        if (pid <= loss && touched[pid] && grads[pid].size() == n && grads[pid].shape() == value(pid).shape()) {
            out.per_parameter.push_back(grads[pid].storage());
        } else {
            out.per_parameter.emplace_back(n, 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Replay support

void Graph::set_parameter_element(std::size_t parameter, std::size_t index, double v) {
    auto& node = nodes_.at(parameter_nodes_.at(parameter));
    if (node.external != nullptr) {
        node.value = *node.external;
        node.external = nullptr;
    }
    node.value.data()[index] = v;
}

double Graph::parameter_element(std::size_t parameter, std::size_t index) const {
    return value(parameter_nodes_.at(parameter)).data()[index];
}

void Graph::recompute() {
    for (auto& node : nodes_) {
        evaluate(node);
    }
}

double finite_difference_check(Graph& graph, NodeId loss, double step, double gradient_fault) {
    if (!(step > 1e-8 && step < 1e-2)) {
        throw std::invalid_argument("finite_difference_check: step must lie in (1e-8, 1e-2)");
    }
    auto analytic = graph.backward(loss);
    if (gradient_fault != 0.0) {
        for (auto& g : analytic.per_parameter) {
            if (!g.empty()) {
                g[0] += gradient_fault;
                break;
            }
        }
    }

    double worst = 0.0;
    for (std::size_t p = 0; p < graph.parameter_count(); ++p) {
        const auto n = graph.value(graph.parameter_node(p)).size();
        for (std::size_t i = 0; i < n; ++i) {
            const double original = graph.parameter_element(p, i);
            graph.set_parameter_element(p, i, original + step);
            graph.recompute();
            const double plus = graph.value(loss).item();
            graph.set_parameter_element(p, i, original - step);
            graph.recompute();
            const double minus = graph.value(loss).item();
            graph.set_parameter_element(p, i, original);
            const double numeric = (plus - minus) / (2.0 * step);
            const double err =
                std::abs(analytic.per_parameter[p][i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    graph.recompute();
    return worst;
}

}  // namespace ktr::diff
