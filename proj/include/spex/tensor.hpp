// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Tensors are shared_ptr nodes; every differentiable op records its parents
// and a backward closure. backward() topo-sorts the graph from a scalar loss
// and runs the closures in reverse order, accumulating into leaf .grad.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace spex {

using Shape = std::vector<int>;

inline long long numel_of(const Shape& shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

// Epsilon guard applied wherever a probability is logged.
inline constexpr double kLogEps = 1e-12;

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Thread-local switch: when off, ops do not record the graph (inference mode).
inline bool& autograd_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(autograd_enabled()) { autograd_enabled() = false; }
    ~NoGradGuard() { autograd_enabled() = prev; }
};

class Tensor : public std::enable_shared_from_this<Tensor> {
  public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same size as data

    // graph record
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;  // empty for leaves
    bool backward_done = false;

    Tensor(Shape s, std::vector<double> d, bool req)
        : shape(std::move(s)), data(std::move(d)), requires_grad(req) {
        if (numel_of(shape) != static_cast<long long>(data.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
    }

    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    long long numel() const { return static_cast<long long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    double item() const {
        if (data.size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    void accumulate_grad(const std::vector<double>& g) {
        ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

inline TensorPtr tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

inline TensorPtr zeros(const Shape& shape, bool requires_grad = false) {
    return tensor(shape, std::vector<double>(numel_of(shape), 0.0), requires_grad);
}

inline TensorPtr full(const Shape& shape, double v, bool requires_grad = false) {
    return tensor(shape, std::vector<double>(numel_of(shape), v), requires_grad);
}

inline TensorPtr scalar(double v, bool requires_grad = false) {
    return tensor(Shape{}, {v}, requires_grad);
}

inline TensorPtr randn(const Shape& shape, std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0,
                       bool requires_grad = false) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> d(numel_of(shape));
    for (auto& v : d) v = dist(rng);
    return tensor(shape, std::move(d), requires_grad);
}

inline TensorPtr rand_uniform(const Shape& shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0,
                              bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> d(numel_of(shape));
    for (auto& v : d) v = dist(rng);
    return tensor(shape, std::move(d), requires_grad);
}

// Builds a graph node. parents/backward are dropped when grad is not needed,
// so inference passes carry no graph.
inline TensorPtr make_node(Shape shape, std::vector<double> data, std::vector<TensorPtr> parents,
                           std::function<void(Tensor&)> backward) {
    bool req = false;
    if (autograd_enabled())
        for (const auto& p : parents)
            if (p && p->requires_grad) req = true;
    auto out = tensor(std::move(shape), std::move(data), req);
    if (req) {
        out->parents = std::move(parents);
        Tensor* raw = out.get();
        out->backward_fn = [raw, fn = std::move(backward)]() { fn(*raw); };
    }
    return out;
}

inline TensorPtr detach(const TensorPtr& x) {
    return tensor(x->shape, x->data, false);
}

// ---------------------------------------------------------------------------
// Broadcasting: shapes are right-aligned; each axis must match or be 1.
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (int i = 0; i < static_cast<int>(out.size()); ++i) {
        int da = i < static_cast<int>(out.size() - a.size()) ? 1 : a[i - (out.size() - a.size())];
        int db = i < static_cast<int>(out.size() - b.size()) ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<long long> row_major_strides(const Shape& s) {
    std::vector<long long> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `in` viewed under broadcast shape `out` (0 on expanded axes).
inline std::vector<long long> broadcast_strides(const Shape& in, const Shape& out) {
    auto in_st = row_major_strides(in);
    std::vector<long long> st(out.size(), 0);
    int off = static_cast<int>(out.size() - in.size());
    for (int i = 0; i < static_cast<int>(in.size()); ++i)
        st[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : in_st[i];
    return st;
}

// Reduce a gradient of broadcast shape `from` back onto shape `to`.
inline std::vector<double> reduce_grad_to_shape(const std::vector<double>& g, const Shape& from, const Shape& to) {
    if (from == to) return g;
    std::vector<double> out(numel_of(to), 0.0);
    auto bst = broadcast_strides(to, from);
    auto fst = row_major_strides(from);
    long long n = numel_of(from);
    std::vector<long long> idx(from.size(), 0);
    for (long long flat = 0; flat < n; ++flat) {
        long long rem = flat, tgt = 0;
        for (size_t ax = 0; ax < from.size(); ++ax) {
            long long i = rem / fst[ax];
            rem %= fst[ax];
            tgt += i * bst[ax];
        }
        out[tgt] += g[flat];
    }
    return out;
}

namespace detail {

inline constexpr long long kParallelCutoff = 16384;

template <typename Fwd, typename Bwd>
TensorPtr binary_broadcast_op(const TensorPtr& a, const TensorPtr& b, Fwd fwd, Bwd bwd_pair,
                              const char* /*name*/) {
    // contiguous fast path
    if (a->shape == b->shape) {
        long long n = a->numel();
        std::vector<double> out(n);
        const double* ad = a->data.data();
        const double* bd = b->data.data();
#pragma omp parallel for schedule(static) if (n >= kParallelCutoff)
        for (long long i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
        return make_node(a->shape, std::move(out), {a, b}, [a, b, bwd_pair](Tensor& o) {
            long long n = o.numel();
            if (a->requires_grad) {
                a->ensure_grad();
                double* ga = a->grad.data();
#pragma omp parallel for schedule(static) if (n >= kParallelCutoff)
                for (long long i = 0; i < n; ++i)
                    ga[i] += bwd_pair(a->data[i], b->data[i], o.data[i]).first * o.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                double* gb = b->grad.data();
#pragma omp parallel for schedule(static) if (n >= kParallelCutoff)
                for (long long i = 0; i < n; ++i)
                    gb[i] += bwd_pair(a->data[i], b->data[i], o.data[i]).second * o.grad[i];
            }
        });
    }

    Shape os = broadcast_shape(a->shape, b->shape);
    long long n = numel_of(os);
    auto ast = broadcast_strides(a->shape, os);
    auto bst = broadcast_strides(b->shape, os);
    auto ost = row_major_strides(os);
    std::vector<double> out(n);
    for (long long flat = 0; flat < n; ++flat) {
        long long rem = flat, ia = 0, ib = 0;
        for (size_t ax = 0; ax < os.size(); ++ax) {
            long long i = rem / ost[ax];
            rem %= ost[ax];
            ia += i * ast[ax];
            ib += i * bst[ax];
        }
        out[flat] = fwd(a->data[ia], b->data[ib]);
    }
    return make_node(os, std::move(out), {a, b}, [a, b, os, ast, bst, ost, bwd_pair](Tensor& o) {
        long long n = o.numel();
        std::vector<double> ga(a->requires_grad ? numel_of(a->shape) : 0, 0.0);
        std::vector<double> gb(b->requires_grad ? numel_of(b->shape) : 0, 0.0);
        for (long long flat = 0; flat < n; ++flat) {
            long long rem = flat, ia = 0, ib = 0;
            for (size_t ax = 0; ax < os.size(); ++ax) {
                long long i = rem / ost[ax];
                rem %= ost[ax];
                ia += i * ast[ax];
                ib += i * bst[ax];
            }
            auto [da, db] = bwd_pair(a->data[ia], b->data[ib], o.data[flat]);
            if (a->requires_grad) ga[ia] += da * o.grad[flat];
            if (b->requires_grad) gb[ib] += db * o.grad[flat];
        }
        if (a->requires_grad) a->accumulate_grad(ga);
        if (b->requires_grad) b->accumulate_grad(gb);
    });
}

template <typename Fwd, typename Bwd>
TensorPtr unary_op(const TensorPtr& a, Fwd fwd, Bwd bwd) {
    long long n = a->numel();
    std::vector<double> out(n);
    const double* ad = a->data.data();
#pragma omp parallel for schedule(static) if (n >= kParallelCutoff)
    for (long long i = 0; i < n; ++i) out[i] = fwd(ad[i]);
    return make_node(a->shape, std::move(out), {a}, [a, bwd](Tensor& o) {
        if (!a->requires_grad) return;
        long long n = a->numel();
        a->ensure_grad();
        double* g = a->grad.data();
#pragma omp parallel for schedule(static) if (n >= kParallelCutoff)
        for (long long i = 0; i < n; ++i) g[i] += bwd(a->data[i], o.data[i]) * o.grad[i];
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_broadcast_op(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; }, "add");
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_broadcast_op(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; }, "sub");
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_broadcast_op(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double) { return std::pair<double, double>{y, x}; }, "mul");
}

inline TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_broadcast_op(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double) { return std::pair<double, double>{1.0 / y, -x / (y * y)}; }, "div");
}

inline TensorPtr neg(const TensorPtr& a) {
    return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

// ln(max(x, kLogEps)); derivative is 0 where the guard is active.
inline TensorPtr vlog(const TensorPtr& a) {
    return detail::unary_op(a, [](double x) { return std::log(std::max(x, kLogEps)); },
                            [](double x, double) { return x > kLogEps ? 1.0 / x : 0.0; });
}

inline TensorPtr vexp(const TensorPtr& a) {
    return detail::unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline TensorPtr vabs(const TensorPtr& a) {
    return detail::unary_op(a, [](double x) { return std::fabs(x); },
                            [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline TensorPtr sigmoid(const TensorPtr& a) {
    return detail::unary_op(
        a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

// Subgradient 0 at x = 0.
inline TensorPtr vsqrt(const TensorPtr& a) {
    return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                            [](double x, double y) { return x > 0 ? 0.5 / y : 0.0; });
}

inline TensorPtr clamp(const TensorPtr& a, double lo, double hi) {
    return detail::unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                            [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline TensorPtr relu(const TensorPtr& a) {
    return clamp(a, 0.0, std::numeric_limits<double>::infinity());
}

// Quadratic inside |x| < 1, linear outside.
inline TensorPtr smooth_l1(const TensorPtr& a) {
    return detail::unary_op(a,
                            [](double x) {
                                double ax = std::fabs(x);
                                return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
                            },
                            [](double x, double) {
                                double ax = std::fabs(x);
                                return ax < 1.0 ? x : (x > 0 ? 1.0 : -1.0);
                            });
}

inline TensorPtr add_scalar(const TensorPtr& a, double c) {
    return detail::unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline TensorPtr mul_scalar(const TensorPtr& a, double c) {
    return detail::unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Softmax along an axis, stabilized by max subtraction.
// ---------------------------------------------------------------------------

inline TensorPtr softmax_axis(const TensorPtr& x, int axis) {
    if (axis < 0 || axis >= x->rank())
        throw std::invalid_argument("softmax_axis: axis " + std::to_string(axis) + " out of range for rank " +
                                    std::to_string(x->rank()));
    int n = x->shape[axis];
    if (n == 0) throw std::invalid_argument("softmax_axis: empty axis");
    long long inner = 1, outer = 1;
    for (int i = axis + 1; i < x->rank(); ++i) inner *= x->shape[i];
    for (int i = 0; i < axis; ++i) outer *= x->shape[i];

    std::vector<double> out(x->data.size());
    const double* xd = x->data.data();
#pragma omp parallel for collapse(2) schedule(static) if (outer * inner >= 1024)
    for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
            long long base = o * n * inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i) m = std::max(m, xd[base + i * inner]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                double e = std::exp(xd[base + i * inner] - m);
                out[base + i * inner] = e;
                s += e;
            }
            for (int i = 0; i < n; ++i) out[base + i * inner] /= s;
        }
    }
    return make_node(x->shape, std::move(out), {x}, [x, n, inner, outer](Tensor& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        double* g = x->grad.data();
#pragma omp parallel for collapse(2) schedule(static) if (outer * inner >= 1024)
        for (long long ot = 0; ot < outer; ++ot) {
            for (long long in = 0; in < inner; ++in) {
                long long base = ot * n * inner + in;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += o.grad[base + i * inner] * o.data[base + i * inner];
                for (int i = 0; i < n; ++i)
                    g[base + i * inner] += o.data[base + i * inner] * (o.grad[base + i * inner] - dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum_all(const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    return make_node(Shape{}, {s}, {x}, [x](Tensor& o) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        double g = o.grad[0];
        for (auto& gv : x->grad) gv += g;
    });
}

inline TensorPtr mean_all(const TensorPtr& x) {
    if (x->data.empty()) throw std::invalid_argument("mean_all: empty tensor");
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x->numel()));
}

namespace detail {
inline Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
    Shape out = s;
    if (keepdim)
        out[axis] = 1;
    else
        out.erase(out.begin() + axis);
    return out;
}
}  // namespace detail

inline TensorPtr reduce_sum(const TensorPtr& x, int axis, bool keepdim = false) {
    if (axis < 0 || axis >= x->rank()) throw std::invalid_argument("reduce_sum: axis out of range");
    int n = x->shape[axis];
    long long inner = 1, outer = 1;
    for (int i = axis + 1; i < x->rank(); ++i) inner *= x->shape[i];
    for (int i = 0; i < axis; ++i) outer *= x->shape[i];
    std::vector<double> out(outer * inner, 0.0);
    for (long long o = 0; o < outer; ++o)
        for (int i = 0; i < n; ++i)
            for (long long in = 0; in < inner; ++in) out[o * inner + in] += x->data[(o * n + i) * inner + in];
    return make_node(detail::reduced_shape(x->shape, axis, keepdim), std::move(out), {x},
                     [x, n, inner, outer](Tensor& o) {
                         if (!x->requires_grad) return;
                         std::vector<double> g(x->data.size());
                         for (long long ot = 0; ot < outer; ++ot)
                             for (int i = 0; i < n; ++i)
                                 for (long long in = 0; in < inner; ++in)
                                     g[(ot * n + i) * inner + in] = o.grad[ot * inner + in];
                         x->accumulate_grad(g);
                     });
}

inline TensorPtr reduce_mean(const TensorPtr& x, int axis, bool keepdim = false) {
    return mul_scalar(reduce_sum(x, axis, keepdim), 1.0 / x->shape[axis]);
}

// Max/min along an axis. Non-differentiable path: values are detached and the
// flat arg indices (into the reduced layout) are returned alongside.
struct ReduceExtreme {
    TensorPtr values;          // reduced shape, no grad
    std::vector<int> argidx;   // index along `axis` per reduced element, ties -> lowest index
};

inline ReduceExtreme reduce_max(const TensorPtr& x, int axis, bool keepdim = false) {
    if (axis < 0 || axis >= x->rank()) throw std::invalid_argument("reduce_max: axis out of range");
    int n = x->shape[axis];
    long long inner = 1, outer = 1;
    for (int i = axis + 1; i < x->rank(); ++i) inner *= x->shape[i];
    for (int i = 0; i < axis; ++i) outer *= x->shape[i];
    std::vector<double> vals(outer * inner);
    std::vector<int> arg(outer * inner);
    for (long long o = 0; o < outer; ++o)
        for (long long in = 0; in < inner; ++in) {
            double best = x->data[(o * n) * inner + in];
            int bi = 0;
            for (int i = 1; i < n; ++i) {
                double v = x->data[(o * n + i) * inner + in];
                if (v > best) {
                    best = v;
                    bi = i;
                }
            }
            vals[o * inner + in] = best;
            arg[o * inner + in] = bi;
        }
    return {tensor(detail::reduced_shape(x->shape, axis, keepdim), std::move(vals), false), std::move(arg)};
}

inline ReduceExtreme reduce_min(const TensorPtr& x, int axis, bool keepdim = false) {
    auto r = reduce_max(neg(detach(x)), axis, keepdim);
    for (auto& v : r.values->data) v = -v;
    return r;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline TensorPtr reshape(const TensorPtr& x, Shape shape) {
    if (numel_of(shape) != x->numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
    return make_node(std::move(shape), x->data, {x}, [x](Tensor& o) {
        if (x->requires_grad) x->accumulate_grad(o.grad);
    });
}

// Concatenate along `axis`; all other dims must match.
inline TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape os = parts[0]->shape;
    if (axis < 0 || axis >= static_cast<int>(os.size())) throw std::invalid_argument("concat: axis out of range");
    int total = 0;
    for (const auto& p : parts) {
        if (p->rank() != static_cast<int>(os.size()))
            throw std::invalid_argument("concat: rank mismatch");
        for (int i = 0; i < p->rank(); ++i)
            if (i != axis && p->shape[i] != os[i]) throw std::invalid_argument("concat: shape mismatch");
        total += p->shape[axis];
    }
    os[axis] = total;
    long long inner = 1, outer = 1;
    for (int i = axis + 1; i < static_cast<int>(os.size()); ++i) inner *= os[i];
    for (int i = 0; i < axis; ++i) outer *= os[i];
    std::vector<double> out(numel_of(os));
    long long off = 0;
    for (const auto& p : parts) {
        int n = p->shape[axis];
        for (long long o = 0; o < outer; ++o)
            std::copy(p->data.begin() + o * n * inner, p->data.begin() + (o + 1) * n * inner,
                      out.begin() + (o * total + off) * inner);
        off += n;
    }
    return make_node(os, std::move(out), parts, [parts, axis, total, inner, outer](Tensor& o) {
        long long off = 0;
        for (const auto& p : parts) {
            int n = p->shape[axis];
            if (p->requires_grad) {
                std::vector<double> g(p->data.size());
                for (long long ot = 0; ot < outer; ++ot)
                    std::copy(o.grad.begin() + (ot * total + off) * inner,
                              o.grad.begin() + (ot * total + off + n) * inner, g.begin() + ot * n * inner);
                p->accumulate_grad(g);
            }
            off += n;
        }
    });
}

// ---------------------------------------------------------------------------
// Superpixel log-mean pooling kernel: out[s][d] = mean over pixels p with
// label s of ln(P[d][p]). Empty segments yield zero rows plus an empty flag.
// ---------------------------------------------------------------------------

struct SegmentLogMean {
    TensorPtr rows;                // (S, D)
    std::vector<uint8_t> empty;    // per segment
    std::vector<int> counts;       // pixels per segment (mask-aware)
};

inline SegmentLogMean segment_log_mean(const TensorPtr& prob, const std::vector<int>& labels, int num_segments,
                                       const std::vector<uint8_t>* pixel_mask = nullptr) {
    if (prob->rank() != 3) throw std::invalid_argument("segment_log_mean: expected (D,H,W) volume");
    int D = prob->shape[0];
    long long hw = static_cast<long long>(prob->shape[1]) * prob->shape[2];
    if (static_cast<long long>(labels.size()) != hw)
        throw std::invalid_argument("segment_log_mean: label map size mismatch");
    if (pixel_mask && static_cast<long long>(pixel_mask->size()) != hw)
        throw std::invalid_argument("segment_log_mean: mask size mismatch");

    std::vector<int> counts(num_segments, 0);
    for (long long p = 0; p < hw; ++p) {
        int s = labels[p];
        if (s < 0 || s >= num_segments)
            throw std::invalid_argument("segment_log_mean: label " + std::to_string(s) + " out of range [0," +
                                        std::to_string(num_segments) + ")");
        if (pixel_mask && !(*pixel_mask)[p]) continue;
        counts[s]++;
    }

    std::vector<double> rows(static_cast<size_t>(num_segments) * D, 0.0);
    const double* pd = prob->data.data();
    for (long long p = 0; p < hw; ++p) {
        if (pixel_mask && !(*pixel_mask)[p]) continue;
        int s = labels[p];
        for (int d = 0; d < D; ++d) rows[static_cast<size_t>(s) * D + d] += std::log(std::max(pd[d * hw + p], kLogEps));
    }
    std::vector<uint8_t> empty(num_segments, 0);
    for (int s = 0; s < num_segments; ++s) {
        if (counts[s] == 0) {
            empty[s] = 1;
            continue;
        }
        for (int d = 0; d < D; ++d) rows[static_cast<size_t>(s) * D + d] /= counts[s];
    }

    auto mask_copy = pixel_mask ? *pixel_mask : std::vector<uint8_t>();
    bool has_mask = pixel_mask != nullptr;
    auto node = make_node(Shape{num_segments, D}, std::move(rows), {prob},
                          [prob, labels, counts, D, hw, mask_copy, has_mask](Tensor& o) {
                              if (!prob->requires_grad) return;
                              std::vector<double> g(prob->data.size(), 0.0);
                              const double* pd = prob->data.data();
                              for (long long p = 0; p < hw; ++p) {
                                  if (has_mask && !mask_copy[p]) continue;
                                  int s = labels[p];
                                  if (counts[s] == 0) continue;
                                  for (int d = 0; d < D; ++d) {
                                      double v = pd[d * hw + p];
                                      if (v > kLogEps)
                                          g[d * hw + p] += o.grad[static_cast<size_t>(s) * D + d] / (counts[s] * v);
                                  }
                              }
                              prob->accumulate_grad(g);
                          });
    return {node, std::move(empty), std::move(counts)};
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

inline void backward(const TensorPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null tensor");
    if (loss->numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss->shape));
    if (!loss->requires_grad) throw std::invalid_argument("backward: loss does not require grad");
    if (loss->backward_done) throw std::invalid_argument("backward: graph already consumed");

    // Iterative DFS topo sort (graphs can be deep).
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor* p = node->parents[next++].get();
            if (p && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Tensor* t = *it;
        if (t->backward_fn) {
            t->ensure_grad();
            t->backward_fn();
            t->backward_done = true;
        }
    }
    loss->backward_done = true;
}

}  // namespace spex
