#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "panolab/common.hpp"

namespace panolab::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("shape dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out + "]";
}

inline void check_finite(const std::vector<double>& v, const char* where) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + where);
}

/// Named trainable leaf. Gradients accumulate across backward passes until
/// zeroed by the caller, so summed losses compose.
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;

    Param() = default;
    Param(std::string name_, Shape shape_, std::vector<double> value_)
        : name(std::move(name_)), shape(std::move(shape_)), value(std::move(value_)) {
        if (value.size() != numel(shape)) throw ShapeError("param data does not match shape: " + name);
        grad.assign(value.size(), 0.0);
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

/// Immutable dense f64 array, row-major. Carries a tape node id when it was
/// produced on a tape and participates in backward; otherwise it is a
/// constant and ops treat it as having zero gradient.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> data) {
        if (data.size() != numel(shape)) throw ShapeError("tensor data does not match shape");
        check_finite(data, "constant");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
        return t;
    }

    static Tensor scalar(double v) { return constant({1}, {v}); }
    static Tensor zeros(Shape shape) { return constant(shape, std::vector<double>(numel(shape), 0.0)); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    const std::vector<double>& data() const { return *data_; }
    std::shared_ptr<const std::vector<double>> data_ptr() const { return data_; }
    double at(std::size_t i) const { return (*data_)[i]; }

    double item() const {
        if (size() != 1) throw ShapeError("item() requires a scalar tensor");
        return (*data_)[0];
    }

    int rows() const {
        if (shape_.size() != 2) throw ShapeError("rows() requires a 2-d tensor");
        return shape_[0];
    }
    int cols() const {
        if (shape_.size() != 2) throw ShapeError("cols() requires a 2-d tensor");
        return shape_[1];
    }

    bool defined() const { return static_cast<bool>(data_); }
    bool requires_grad() const { return node_ >= 0; }
    int node() const { return node_; }
    Tape* tape() const { return tape_; }

private:
    friend class Tape;
    std::shared_ptr<const std::vector<double>> data_;
    Shape shape_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Gradients of tracked leaves from one backward pass, keyed by node id.
using GradMap = std::unordered_map<int, Tensor>;

/// Record of one forward pass. Nodes are appended in execution order, which
/// is a topological order by construction; backward visits each node exactly
/// once in reverse. A tape is single-use: backward consumes it.
class Tape {
public:
    /// Receives the node's accumulated upstream gradient.
    using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked leaf bound to a parameter: backward adds into param.grad.
    Tensor leaf(Param& p) {
        Tensor t = emit(p.shape, std::vector<double>(p.value), {}, nullptr);
        nodes_[static_cast<std::size_t>(t.node())].bound = &p;
        return t;
    }

    /// Tracked leaf without persistent storage (input-gradient probes).
    Tensor watch(Shape shape, std::vector<double> data) {
        return emit(std::move(shape), std::move(data), {}, nullptr);
    }

    Tensor watch(const Tensor& t) { return watch(t.shape(), t.data()); }

    /// Record an op result on the tape.
    Tensor emit(Shape shape, std::vector<double> value, std::vector<int> inputs, BackwardFn backward) {
        check_finite(value, "op output");
        if (value.size() != numel(shape)) throw ShapeError("op output does not match declared shape");
        Node node;
        node.inputs = std::move(inputs);
        node.backward = std::move(backward);
        node.size = value.size();
        nodes_.push_back(std::move(node));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<const std::vector<double>>(std::move(value));
        t.tape_ = this;
        t.node_ = static_cast<int>(nodes_.size()) - 1;
        return t;
    }

    /// Upstream gradient buffer of a node, zero-allocated on first touch.
    /// Backward functions add into the buffers of their input nodes.
    std::vector<double>& grad_buffer(int node) {
        Node& nd = nodes_.at(static_cast<std::size_t>(node));
        if (nd.grad.empty()) nd.grad.assign(nd.size, 0.0);
        return nd.grad;
    }

    /// Reverse pass from a scalar loss. Gradients of bound leaves accumulate
    /// into Param::grad; the returned map holds every tracked leaf's
    /// gradient. The tape is consumed afterwards.
    GradMap backward(const Tensor& loss) {
        if (consumed_) throw ValueError("tape already consumed by backward");
        if (loss.tape() != this || loss.node() < 0)
            throw ValueError("loss is not a tracked tensor of this tape");
        if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");

        grad_buffer(loss.node())[0] = 1.0;
        for (int i = loss.node(); i >= 0; --i) {
            Node& nd = nodes_[static_cast<std::size_t>(i)];
            if (nd.grad.empty()) continue; // unreachable from the loss
            if (nd.backward) nd.backward(*this, nd.grad);
        }

        GradMap grads;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& nd = nodes_[i];
            if (nd.backward || !nd.inputs.empty()) continue; // op node
            std::vector<double> g = nd.grad.empty() ? std::vector<double>(nd.size, 0.0)
                                                    : std::move(nd.grad);
            if (nd.bound)
                for (std::size_t k = 0; k < g.size(); ++k) nd.bound->grad[k] += g[k];
            Tensor t;
            t.shape_ = nd.bound ? nd.bound->shape : Shape{static_cast<int>(nd.size)};
            t.data_ = std::make_shared<const std::vector<double>>(std::move(g));
            grads.emplace(static_cast<int>(i), std::move(t));
        }
        consumed_ = true;
        for (auto& nd : nodes_) nd.backward = nullptr;
        return grads;
    }

    std::size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        std::vector<int> inputs; // tracked input node ids (-1 for constants)
        BackwardFn backward;     // null for leaves
        std::size_t size = 0;
        Param* bound = nullptr;
        std::vector<double> grad;
    };

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

inline Tape* resolve_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->defined()) throw ValueError("undefined tensor passed to op");
        if (t->tape() == nullptr || t->node() < 0) continue;
        if (tape && t->tape() != tape) throw ValueError("tensors belong to different tapes");
        tape = t->tape();
    }
    return tape;
}

/// Route an op result: constant fold when no input is tracked, otherwise
/// record a tape node with the given backward function.
inline Tensor finish(Tape* tape, Shape shape, std::vector<double> value, std::vector<int> inputs,
                     Tape::BackwardFn backward) {
    if (!tape) return Tensor::constant(std::move(shape), std::move(value));
    return tape->emit(std::move(shape), std::move(value), std::move(inputs), std::move(backward));
}

using DataPtr = std::shared_ptr<const std::vector<double>>;

enum class Broadcast { equal, a_scalar, b_scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::equal;
    if (a.size() == 1) return Broadcast::a_scalar;
    if (b.size() == 1) return Broadcast::b_scalar;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void add_into(Tape& tape, int node, const std::vector<double>& g) {
    if (node < 0) return;
    auto& buf = tape.grad_buffer(node);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

inline void add_scalar_into(Tape& tape, int node, double g) {
    if (node < 0) return;
    tape.grad_buffer(node)[0] += g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Broadcasting covers equal shapes and scalar-vs-tensor only.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    const Shape& out_shape = (kind == detail::Broadcast::a_scalar) ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (kind == detail::Broadcast::a_scalar ? a.at(0) : a.at(i)) +
                 (kind == detail::Broadcast::b_scalar ? b.at(0) : b.at(i));
    Tape* tape = detail::resolve_tape({&a, &b});
    const int an = a.node(), bn = b.node();
    return detail::finish(tape, out_shape, std::move(out), {an, bn},
                          [an, bn, kind](Tape& tp, const std::vector<double>& up) {
                              if (an >= 0) {
                                  if (kind == detail::Broadcast::a_scalar) {
                                      double s = std::accumulate(up.begin(), up.end(), 0.0);
                                      detail::add_scalar_into(tp, an, s);
                                  } else {
                                      detail::add_into(tp, an, up);
                                  }
                              }
                              if (bn >= 0) {
                                  if (kind == detail::Broadcast::b_scalar) {
                                      double s = std::accumulate(up.begin(), up.end(), 0.0);
                                      detail::add_scalar_into(tp, bn, s);
                                  } else {
                                      detail::add_into(tp, bn, up);
                                  }
                              }
                          });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "mul");
    const Shape& out_shape = (kind == detail::Broadcast::a_scalar) ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (kind == detail::Broadcast::a_scalar ? a.at(0) : a.at(i)) *
                 (kind == detail::Broadcast::b_scalar ? b.at(0) : b.at(i));
    Tape* tape = detail::resolve_tape({&a, &b});
    const int an = a.node(), bn = b.node();
    auto ad_ = a.data_ptr();
    auto bd_ = b.data_ptr();
    return detail::finish(
        tape, out_shape, std::move(out), {an, bn},
        [an, bn, kind, ad_, bd_](Tape& tp, const std::vector<double>& up) {
            const auto& av = *ad_;
            const auto& bv = *bd_;
            if (an >= 0) {
                if (kind == detail::Broadcast::a_scalar) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < up.size(); ++i) s += up[i] * bv[i];
                    detail::add_scalar_into(tp, an, s);
                } else {
                    auto& buf = tp.grad_buffer(an);
                    for (std::size_t i = 0; i < up.size(); ++i)
                        buf[i] += up[i] * (kind == detail::Broadcast::b_scalar ? bv[0] : bv[i]);
                }
            }
            if (bn >= 0) {
                if (kind == detail::Broadcast::b_scalar) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < up.size(); ++i) s += up[i] * av[i];
                    detail::add_scalar_into(tp, bn, s);
                } else {
                    auto& buf = tp.grad_buffer(bn);
                    for (std::size_t i = 0; i < up.size(); ++i)
                        buf[i] += up[i] * (kind == detail::Broadcast::a_scalar ? av[0] : av[i]);
                }
            }
        });
}

inline Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("scale factor must be finite");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    return detail::finish(tape, a.shape(), std::move(out), {an},
                          [an, c](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              for (std::size_t i = 0; i < up.size(); ++i) buf[i] += up[i] * c;
                          });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    auto ad_ = a.data_ptr();
    return detail::finish(tape, a.shape(), std::move(out), {an},
                          [an, ad_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              const auto& av = *ad_;
                              for (std::size_t i = 0; i < up.size(); ++i)
                                  if (av[i] > 0.0) buf[i] += up[i];
                          });
}

namespace detail {
constexpr double kGeluC = 0.7978845608028653558798921198687; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace detail

/// tanh-approximated GELU; the approximation has a closed-form derivative.
inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.at(i);
        const double t = std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x));
        out[i] = 0.5 * x * (1.0 + t);
    }
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    auto ad_ = a.data_ptr();
    return detail::finish(tape, a.shape(), std::move(out), {an},
                          [an, ad_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              const auto& av = *ad_;
                              for (std::size_t i = 0; i < up.size(); ++i) {
                                  const double x = av[i];
                                  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
                                  const double t = std::tanh(u);
                                  const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
                                  buf[i] += up[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                              }
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul requires 2-d tensors");
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    {
        const auto& av = a.data();
        const auto& bv = b.data();
        for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
                const double ail = av[static_cast<std::size_t>(i) * k + l];
                if (ail == 0.0) continue;
                const double* brow = &bv[static_cast<std::size_t>(l) * n];
                double* orow = &out[static_cast<std::size_t>(i) * n];
                for (int j = 0; j < n; ++j) orow[j] += ail * brow[j];
            }
    }
    Tape* tape = detail::resolve_tape({&a, &b});
    const int an = a.node(), bn = b.node();
    auto ad_ = a.data_ptr();
    auto bd_ = b.data_ptr();
    return detail::finish(
        tape, {m, n}, std::move(out), {an, bn},
        [an, bn, m, k, n, ad_, bd_](Tape& tp, const std::vector<double>& up) {
            const auto& av = *ad_;
            const auto& bv = *bd_;
            if (an >= 0) {
                auto& ga = tp.grad_buffer(an);
                // dA = dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double s = 0.0;
                        const double* urow = &up[static_cast<std::size_t>(i) * n];
                        const double* brow = &bv[static_cast<std::size_t>(l) * n];
                        for (int j = 0; j < n; ++j) s += urow[j] * brow[j];
                        ga[static_cast<std::size_t>(i) * k + l] += s;
                    }
            }
            if (bn >= 0) {
                auto& gb = tp.grad_buffer(bn);
                // dB = A^T * dC
                for (int l = 0; l < k; ++l)
                    for (int i = 0; i < m; ++i) {
                        const double ail = av[static_cast<std::size_t>(i) * k + l];
                        if (ail == 0.0) continue;
                        const double* urow = &up[static_cast<std::size_t>(i) * n];
                        double* grow = &gb[static_cast<std::size_t>(l) * n];
                        for (int j = 0; j < n; ++j) grow[j] += ail * urow[j];
                    }
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = a.at(static_cast<std::size_t>(i) * n + j);
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    return detail::finish(tape, {n, m}, std::move(out), {an},
                          [an, m, n](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              for (int j = 0; j < n; ++j)
                                  for (int i = 0; i < m; ++i)
                                      buf[static_cast<std::size_t>(i) * n + j] +=
                                          up[static_cast<std::size_t>(j) * m + i];
                          });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) throw ShapeError("reshape changes element count");
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    std::vector<double> out(a.data());
    return detail::finish(tape, std::move(shape), std::move(out), {an},
                          [an](Tape& tp, const std::vector<double>& up) {
                              detail::add_into(tp, an, up);
                          });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    const std::size_t n = a.size();
    return detail::finish(tape, {1}, {s}, {an},
                          [an, n](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              for (std::size_t i = 0; i < n; ++i) buf[i] += up[0];
                          });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse: shapes differ");
    const std::size_t n = a.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.at(i) - b.at(i);
        s += d * d;
    }
    Tape* tape = detail::resolve_tape({&a, &b});
    const int an = a.node(), bn = b.node();
    auto ad_ = a.data_ptr();
    auto bd_ = b.data_ptr();
    return detail::finish(tape, {1}, {s / static_cast<double>(n)}, {an, bn},
                          [an, bn, n, ad_, bd_](Tape& tp, const std::vector<double>& up) {
                              const double c = 2.0 * up[0] / static_cast<double>(n);
                              const auto& av = *ad_;
                              const auto& bv = *bd_;
                              if (an >= 0) {
                                  auto& buf = tp.grad_buffer(an);
                                  for (std::size_t i = 0; i < n; ++i) buf[i] += c * (av[i] - bv[i]);
                              }
                              if (bn >= 0) {
                                  auto& buf = tp.grad_buffer(bn);
                                  for (std::size_t i = 0; i < n; ++i) buf[i] -= c * (av[i] - bv[i]);
                              }
                          });
}

namespace detail {

inline void softmax_row(const double* x, double* y, int c) {
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= z;
}

} // namespace detail

/// Row-wise softmax with max-shift stabilization.
inline Tensor softmax_rows(const Tensor& a) {
    const int n = a.rows(), c = a.cols();
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i)
        detail::softmax_row(&a.data()[static_cast<std::size_t>(i) * c],
                            &out[static_cast<std::size_t>(i) * c], c);
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    auto y_ = std::make_shared<const std::vector<double>>(out);
    return detail::finish(tape, a.shape(), std::move(out), {an},
                          [an, n, c, y_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              const auto& y = *y_;
                              for (int i = 0; i < n; ++i) {
                                  const std::size_t off = static_cast<std::size_t>(i) * c;
                                  double dot = 0.0;
                                  for (int j = 0; j < c; ++j) dot += up[off + j] * y[off + j];
                                  for (int j = 0; j < c; ++j)
                                      buf[off + j] += y[off + j] * (up[off + j] - dot);
                              }
                          });
}

/// Row-wise log-softmax with max-shift stabilization.
inline Tensor log_softmax_rows(const Tensor& a) {
    const int n = a.rows(), c = a.cols();
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i) {
        const double* x = &a.data()[static_cast<std::size_t>(i) * c];
        double* y = &out[static_cast<std::size_t>(i) * c];
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
        const double lse = mx + std::log(z);
        for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
    }
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    auto y_ = std::make_shared<const std::vector<double>>(out);
    return detail::finish(tape, a.shape(), std::move(out), {an},
                          [an, n, c, y_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              const auto& y = *y_;
                              for (int i = 0; i < n; ++i) {
                                  const std::size_t off = static_cast<std::size_t>(i) * c;
                                  double s = 0.0;
                                  for (int j = 0; j < c; ++j) s += up[off + j];
                                  for (int j = 0; j < c; ++j)
                                      buf[off + j] += up[off + j] - std::exp(y[off + j]) * s;
                              }
                          });
}

/// Mean over rows of -log softmax(logits)[target].
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    const int n = logits.rows(), c = logits.cols();
    if (c < 2) throw ShapeError("softmax_cross_entropy requires at least 2 classes");
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("softmax_cross_entropy: one target per row required");
    for (int t : targets)
        if (t < 0 || t >= c) throw ValueError("softmax_cross_entropy: target out of range");

    std::vector<double> probs(logits.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* x = &logits.data()[static_cast<std::size_t>(i) * c];
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - x[targets[static_cast<std::size_t>(i)]];
        for (int j = 0; j < c; ++j)
            probs[static_cast<std::size_t>(i) * c + j] = std::exp(x[j] - lse);
    }
    loss /= n;
    Tape* tape = detail::resolve_tape({&logits});
    const int ln = logits.node();
    auto p_ = std::make_shared<const std::vector<double>>(std::move(probs));
    auto t_ = std::make_shared<const std::vector<int>>(targets);
    return detail::finish(tape, {1}, {loss}, {ln},
                          [ln, n, c, p_, t_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(ln);
                              const double g = up[0] / n;
                              const auto& p = *p_;
                              const auto& tv = *t_;
                              for (int i = 0; i < n; ++i) {
                                  const std::size_t off = static_cast<std::size_t>(i) * c;
                                  for (int j = 0; j < c; ++j) buf[off + j] += g * p[off + j];
                                  buf[off + tv[static_cast<std::size_t>(i)]] -= g;
                              }
                          });
}

/// Mean over rows of sum_j P_j (log P_j - logQ_j). Targets are probabilities
/// and are treated as constants; gradient flows to the predicted
/// log-probabilities only. Zero-probability target entries contribute zero.
inline Tensor kl_divergence(const Tensor& target_probs, const Tensor& predicted_log_probs) {
    if (target_probs.shape() != predicted_log_probs.shape())
        throw ShapeError("kl_divergence: shapes differ");
    const int n = target_probs.rows(), c = target_probs.cols();
    for (int i = 0; i < n; ++i) {
        double rowsum = 0.0;
        for (int j = 0; j < c; ++j) {
            const double p = target_probs.at(static_cast<std::size_t>(i) * c + j);
            if (p < 0.0) throw ValueError("kl_divergence: negative target probability");
            rowsum += p;
        }
        if (std::abs(rowsum - 1.0) > 1e-6)
            throw ValueError("kl_divergence: target row does not sum to 1");
    }
    double loss = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const double p = target_probs.at(static_cast<std::size_t>(i) * c + j);
            if (p == 0.0) continue;
            loss += p * (std::log(p) - predicted_log_probs.at(static_cast<std::size_t>(i) * c + j));
        }
    loss /= n;
    Tape* tape = detail::resolve_tape({&predicted_log_probs});
    const int qn = predicted_log_probs.node();
    auto p_ = target_probs.data_ptr();
    return detail::finish(tape, {1}, {loss}, {qn},
                          [qn, n, p_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(qn);
                              const auto& p = *p_;
                              const double g = up[0] / n;
                              for (std::size_t i = 0; i < p.size(); ++i) buf[i] -= g * p[i];
                          });
}

// ---------------------------------------------------------------------------
// Row gather / pooling / stacking
// ---------------------------------------------------------------------------

/// Select rows of a [V x d] table; backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v) throw ValueError("gather_rows: index out of range");
    const int n = static_cast<int>(ids.size());
    if (n == 0) throw ShapeError("gather_rows: empty index list");
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        std::copy_n(&table.data()[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d], d,
                    &out[static_cast<std::size_t>(i) * d]);
    Tape* tape = detail::resolve_tape({&table});
    const int tn = table.node();
    auto ids_ = std::make_shared<const std::vector<int>>(ids);
    return detail::finish(tape, {n, d}, std::move(out), {tn},
                          [tn, d, ids_](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(tn);
                              const auto& idv = *ids_;
                              for (std::size_t i = 0; i < idv.size(); ++i)
                                  for (int j = 0; j < d; ++j)
                                      buf[static_cast<std::size_t>(idv[i]) * d + j] += up[i * d + j];
                          });
}

/// Mean over rows: [n x d] -> [1 x d].
inline Tensor mean_rows(const Tensor& a) {
    const int n = a.rows(), d = a.cols();
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += a.at(static_cast<std::size_t>(i) * d + j);
    for (auto& x : out) x /= n;
    Tape* tape = detail::resolve_tape({&a});
    const int an = a.node();
    return detail::finish(tape, {1, d}, std::move(out), {an},
                          [an, n, d](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(an);
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < d; ++j)
                                      buf[static_cast<std::size_t>(i) * d + j] += up[static_cast<std::size_t>(j)] / n;
                          });
}

/// Repeat a [1 x d] row n times -> [n x d]; backward sums over rows.
inline Tensor broadcast_rows(const Tensor& row, int n) {
    if (n <= 0) throw ShapeError("broadcast_rows: row count must be positive");
    const int d = (row.shape().size() == 2) ? row.cols() : static_cast<int>(row.size());
    if (row.shape().size() == 2 && row.rows() != 1)
        throw ShapeError("broadcast_rows expects a single row");
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) std::copy_n(row.data().data(), d, &out[static_cast<std::size_t>(i) * d]);
    Tape* tape = detail::resolve_tape({&row});
    const int rn = row.node();
    return detail::finish(tape, {n, d}, std::move(out), {rn},
                          [rn, n, d](Tape& tp, const std::vector<double>& up) {
                              auto& buf = tp.grad_buffer(rn);
                              for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < d; ++j)
                                      buf[static_cast<std::size_t>(j)] += up[static_cast<std::size_t>(i) * d + j];
                          });
}

/// Stack single-row tensors [1 x d] into [k x d]; backward slices.
inline Tensor concat_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("concat_rows: empty input");
    const int d = (rows[0].shape().size() == 2) ? rows[0].cols() : static_cast<int>(rows[0].size());
    Tape* tape = nullptr;
    for (const auto& r : rows) {
        const int rd = (r.shape().size() == 2) ? r.cols() : static_cast<int>(r.size());
        if (rd != d || (r.shape().size() == 2 && r.rows() != 1))
            throw ShapeError("concat_rows: all inputs must be single rows of equal width");
        Tape* t = detail::resolve_tape({&r});
        if (t) {
            if (tape && t != tape) throw ValueError("concat_rows: tensors from different tapes");
            tape = t;
        }
    }
    const int k = static_cast<int>(rows.size());
    std::vector<double> out(static_cast<std::size_t>(k) * d);
    std::vector<int> ids(rows.size());
    for (int i = 0; i < k; ++i) {
        std::copy_n(rows[static_cast<std::size_t>(i)].data().data(), d,
                    &out[static_cast<std::size_t>(i) * d]);
        ids[static_cast<std::size_t>(i)] = rows[static_cast<std::size_t>(i)].node();
    }
    auto ids_ = std::make_shared<const std::vector<int>>(std::move(ids));
    return detail::finish(tape, {k, d}, std::move(out), *ids_,
                          [ids_, d](Tape& tp, const std::vector<double>& up) {
                              const auto& idv = *ids_;
                              for (std::size_t i = 0; i < idv.size(); ++i) {
                                  if (idv[i] < 0) continue;
                                  auto& buf = tp.grad_buffer(idv[i]);
                                  for (int j = 0; j < d; ++j)
                                      buf[static_cast<std::size_t>(j)] += up[i * d + j];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Optimizer step
// ---------------------------------------------------------------------------

/// p <- p - lr * g, elementwise. lr may be zero (no-op) but not negative.
inline void sgd_step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("sgd_step: shapes differ");
    if (lr < 0.0 || !std::isfinite(lr)) throw ValueError("sgd_step: learning rate must be >= 0");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

inline void sgd_step(Param& p, double lr) { sgd_step(p.value, p.grad, lr); }

} // namespace panolab::ad
