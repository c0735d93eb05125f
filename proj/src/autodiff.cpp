#include "mtreg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mtreg::ad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (values.size() != numel(shape_)) {
        throw std::invalid_argument("tensor of shape " + shape_str(shape_) + " given " +
                                    std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw std::invalid_argument("rows() on non-matrix " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw std::invalid_argument("cols() on non-matrix " + shape_str(shape_));
    return shape_[1];
}

double Tensor::at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

double Tensor::item() const {
    if (data_->size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

std::optional<NodeId> Tensor::node() const {
    if (!tape_) return std::nullopt;
    return node_;
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
}

Tensor Gradients::of(const Tensor& t) const {
    if (reached(t)) return Tensor(t.shape(), *grads_[*t.node()]);
    return Tensor::zeros(t.shape());
}

bool Gradients::reached(const Tensor& t) const {
    return t.tape() == tape_ && t.attached() && *t.node() < grads_.size() && grads_[*t.node()].has_value();
}

Tensor Tape::watch(const Tensor& value) {
    Tensor t = value.detached();
    t.tape_ = this;
    t.node_ = records_.size();
    records_.push_back(Record{"leaf", value.shape(), {}, nullptr});
    return t;
}

Tensor Tape::record(std::string op, Tensor value, std::span<const Tensor* const> inputs, BackwardFn backward) {
    std::vector<std::optional<NodeId>> parents;
    parents.reserve(inputs.size());
    bool any = false;
    for (const Tensor* in : inputs) {
        if (in->attached() && in->tape() != this) {
            throw std::logic_error("op '" + op + "' mixes tensors from different tapes");
        }
        parents.push_back(in->node());
        any = any || in->attached();
    }
    if (!any) return value.detached();
    value.tape_ = this;
    value.node_ = records_.size();
    records_.push_back(Record{std::move(op), value.shape(), std::move(parents), std::move(backward)});
    return value;
}

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (loss.tape() != this) throw std::invalid_argument("backward() on a tensor not recorded on this tape");

    Gradients out;
    out.tape_ = this;
    out.grads_.resize(records_.size());
    const NodeId root = *loss.node();
    out.grads_[root] = std::vector<double>{1.0};

    std::vector<std::vector<double>*> sinks;
    for (NodeId id = root + 1; id-- > 0;) {
        const Record& rec = records_[id];
        if (!out.grads_[id] || !rec.backward) continue;
        sinks.assign(rec.parents.size(), nullptr);
        for (std::size_t p = 0; p < rec.parents.size(); ++p) {
            if (!rec.parents[p]) continue;
            auto& g = out.grads_[*rec.parents[p]];
            if (!g) g = std::vector<double>(numel(records_[*rec.parents[p]].shape), 0.0);
            sinks[p] = &*g;
        }
        rec.backward(*out.grads_[id], sinks);
    }
    return out;
}

Tensor record_op(std::string op, Tensor value, std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
        if (in->attached()) {
            tape = in->tape();
            break;
        }
    }
    if (!tape) return value;
    std::vector<const Tensor*> ins(inputs);
    return tape->record(std::move(op), std::move(value), ins, std::move(backward));
}

namespace {

enum class Bcast { same, left_scalar, right_scalar };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::right_scalar;
    if (a.size() == 1) return Bcast::left_scalar;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// Accumulates g into a sink that may be a broadcast scalar.
void accumulate(std::vector<double>* sink, std::size_t i, double g) {
    if (!sink) return;
    if (sink->size() == 1) (*sink)[0] += g;
    else (*sink)[i] += g;
}

template <class F>
std::vector<double> elementwise(const Tensor& a, const Tensor& b, Bcast kind, F f) {
    const std::size_t n = kind == Bcast::left_scalar ? b.size() : a.size();
    std::vector<double> out(n);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(kind == Bcast::left_scalar ? av[0] : av[i], kind == Bcast::right_scalar ? bv[0] : bv[i]);
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Bcast kind = broadcast_kind("add", a, b);
    const Shape shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
    Tensor value(shape, elementwise(a, b, kind, [](double x, double y) { return x + y; }));
    return record_op("add", std::move(value), {&a, &b}, [](std::span<const double> g, GradSinks s) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            accumulate(s[0], i, g[i]);
            accumulate(s[1], i, g[i]);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const Bcast kind = broadcast_kind("sub", a, b);
    const Shape shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
    Tensor value(shape, elementwise(a, b, kind, [](double x, double y) { return x - y; }));
    return record_op("sub", std::move(value), {&a, &b}, [](std::span<const double> g, GradSinks s) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            accumulate(s[0], i, g[i]);
            accumulate(s[1], i, -g[i]);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Bcast kind = broadcast_kind("mul", a, b);
    const Shape shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
    Tensor value(shape, elementwise(a, b, kind, [](double x, double y) { return x * y; }));
    return record_op("mul", std::move(value), {&a, &b},
                     [a = a.detached(), b = b.detached(), kind](std::span<const double> g, GradSinks s) {
                         const auto av = a.values();
                         const auto bv = b.values();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             const double x = kind == Bcast::left_scalar ? av[0] : av[i];
                             const double y = kind == Bcast::right_scalar ? bv[0] : bv[i];
                             accumulate(s[0], i, g[i] * y);
                             accumulate(s[1], i, g[i] * x);
                         }
                     });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v *= factor;
    return record_op("scale", Tensor(a.shape(), std::move(out)), {&a},
                     [factor](std::span<const double> g, GradSinks s) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += factor * g[i];
                     });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double& v : out) v += value;
    return record_op("add_scalar", Tensor(a.shape(), std::move(out)), {&a},
                     [](std::span<const double> g, GradSinks s) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
        }
    }
    return record_op("matmul", Tensor({m, n}, std::move(out)), {&a, &b},
                     [a = a.detached(), b = b.detached(), m, k, n](std::span<const double> g, GradSinks s) {
                         const auto av = a.values();
                         const auto bv = b.values();
                         if (s[0]) {
                             // dA = dC * B^T
                             auto& ga = *s[0];
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t p = 0; p < k; ++p) {
                                     double acc = 0.0;
                                     for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                                     ga[i * k + p] += acc;
                                 }
                             }
                         }
                         if (s[1]) {
                             // dB = A^T * dC
                             auto& gb = *s[1];
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t p = 0; p < k; ++p) {
                                     const double x = av[i * k + p];
                                     for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
                                 }
                             }
                         }
                     });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v = v >= 0.0 ? v : slope * v;
    return record_op("leaky_relu", Tensor(x.shape(), std::move(out)), {&x},
                     [x = x.detached(), slope](std::span<const double> g, GradSinks s) {
                         const auto xv = x.values();
                         for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += xv[i] >= 0.0 ? g[i] : slope * g[i];
                     });
}

Tensor segment_max(const Tensor& values, std::span<const std::size_t> segments, std::size_t n_segments) {
    if (values.rank() != 2 || values.rows() != segments.size()) {
        throw std::invalid_argument("segment_max: " + std::to_string(segments.size()) + " segment ids for values " +
                                    shape_str(values.shape()));
    }
    const std::size_t e = values.rows(), c = values.cols();
    constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> argmax(n_segments * c, none);
    std::vector<double> out(n_segments * c, 0.0);
    const auto v = values.values();
    for (std::size_t r = 0; r < e; ++r) {
        const std::size_t seg = segments[r];
        if (seg >= n_segments) {
            throw std::invalid_argument("segment_max: segment id " + std::to_string(seg) + " >= " +
                                        std::to_string(n_segments));
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t o = seg * c + ch;
            if (argmax[o] == none || v[r * c + ch] > out[o]) {
                out[o] = v[r * c + ch];
                argmax[o] = r;
            }
        }
    }
    for (std::size_t seg = 0; seg < n_segments; ++seg) {
        if (c > 0 && argmax[seg * c] == none) {
            throw std::invalid_argument("segment_max: segment " + std::to_string(seg) + " is empty");
        }
    }
    return record_op("segment_max", Tensor({n_segments, c}, std::move(out)), {&values},
                     [argmax = std::move(argmax), c](std::span<const double> g, GradSinks s) {
                         for (std::size_t o = 0; o < g.size(); ++o) (*s[0])[argmax[o] * c + o % c] += g[o];
                     });
}

namespace {

struct AxisView {
    std::size_t outer, len, inner;
};

AxisView axis_view(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    AxisView v{1, x.shape()[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) v.outer *= x.shape()[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) v.inner *= x.shape()[d];
    return v;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisView av = axis_view(x, axis);
    const auto xv = x.values();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < av.outer; ++o) {
        for (std::size_t in = 0; in < av.inner; ++in) {
            const std::size_t base = o * av.len * av.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < av.len; ++l) mx = std::max(mx, xv[base + l * av.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < av.len; ++l) {
                const double e = std::exp(xv[base + l * av.inner] - mx);
                out[base + l * av.inner] = e;
                z += e;
            }
            for (std::size_t l = 0; l < av.len; ++l) out[base + l * av.inner] /= z;
        }
    }
    Tensor y(x.shape(), std::move(out));
    return record_op("softmax", y, {&x}, [y = y.detached(), av](std::span<const double> g, GradSinks s) {
        const auto yv = y.values();
        for (std::size_t o = 0; o < av.outer; ++o) {
            for (std::size_t in = 0; in < av.inner; ++in) {
                const std::size_t base = o * av.len * av.inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < av.len; ++l) dot += g[base + l * av.inner] * yv[base + l * av.inner];
                for (std::size_t l = 0; l < av.len; ++l) {
                    const std::size_t i = base + l * av.inner;
                    (*s[0])[i] += yv[i] * (g[i] - dot);
                }
            }
        }
    });
}

Tensor logsumexp(const Tensor& x, std::size_t axis) {
    const AxisView av = axis_view(x, axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    const auto xv = x.values();
    std::vector<double> out(av.outer * av.inner);
    for (std::size_t o = 0; o < av.outer; ++o) {
        for (std::size_t in = 0; in < av.inner; ++in) {
            const std::size_t base = o * av.len * av.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < av.len; ++l) mx = std::max(mx, xv[base + l * av.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < av.len; ++l) z += std::exp(xv[base + l * av.inner] - mx);
            out[o * av.inner + in] = mx + std::log(z);
        }
    }
    Tensor y(shape, std::move(out));
    return record_op("logsumexp", y, {&x},
                     [x = x.detached(), y = y.detached(), av](std::span<const double> g, GradSinks s) {
                         const auto xv = x.values();
                         const auto yv = y.values();
                         for (std::size_t o = 0; o < av.outer; ++o) {
                             for (std::size_t in = 0; in < av.inner; ++in) {
                                 const std::size_t r = o * av.inner + in;
                                 const std::size_t base = o * av.len * av.inner + in;
                                 for (std::size_t l = 0; l < av.len; ++l) {
                                     const std::size_t i = base + l * av.inner;
                                     (*s[0])[i] += g[r] * std::exp(xv[i] - yv[r]);
                                 }
                             }
                         }
                     });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.rank() == 0 ? 1 : a.shape()[0];
    if (n == 0) throw std::invalid_argument("l1_loss: empty input");
    const auto av = a.values();
    const auto bv = b.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
    return record_op("l1_loss", Tensor::scalar(acc / static_cast<double>(n)), {&a, &b},
                     [a = a.detached(), b = b.detached(), n](std::span<const double> g, GradSinks s) {
                         const auto av = a.values();
                         const auto bv = b.values();
                         const double w = g[0] / static_cast<double>(n);
                         for (std::size_t i = 0; i < av.size(); ++i) {
                             const double d = av[i] - bv[i];
                             const double sg = d > 0.0 ? w : (d < 0.0 ? -w : 0.0);
                             if (s[0]) (*s[0])[i] += sg;
                             if (s[1]) (*s[1])[i] -= sg;
                         }
                     });
}

Tensor sum(const Tensor& x) {
    const auto xv = x.values();
    const double acc = std::accumulate(xv.begin(), xv.end(), 0.0);
    return record_op("sum", Tensor::scalar(acc), {&x}, [](std::span<const double> g, GradSinks s) {
        for (double& v : *s[0]) v += g[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor row_sum(const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    const auto xv = x.values();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i] += xv[i * c + j];
    }
    return record_op("row_sum", Tensor({r}, std::move(out)), {&x}, [c](std::span<const double> g, GradSinks s) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            for (std::size_t j = 0; j < c; ++j) (*s[0])[i * c + j] += g[i];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return record_op("reshape", Tensor(std::move(shape), std::move(out)), {&x},
                     [](std::span<const double> g, GradSinks s) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
    const std::size_t r = x.rows(), c = x.cols();
    const auto xv = x.values();
    std::vector<double> out(indices.size() * c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= r) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                                        shape_str(x.shape()));
        }
        std::copy_n(xv.data() + indices[i] * c, c, out.data() + i * c);
    }
    return record_op("gather_rows", Tensor({indices.size(), c}, std::move(out)), {&x},
                     [idx = std::vector<std::size_t>(indices.begin(), indices.end()), c](std::span<const double> g,
                                                                                         GradSinks s) {
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                             double* dst = s[0]->data() + idx[i] * c;
                             for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
                         }
                     });
}

}  // namespace mtreg::ad
