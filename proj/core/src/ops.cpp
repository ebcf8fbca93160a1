#include <algorithm>
#include <cmath>
#include <numbers>

#include "infosteer/error.hpp"
#include "infosteer/tensor.hpp"

namespace infosteer {

namespace {

template <typename T>
using StoragePtr = std::shared_ptr<detail::Storage<T>>;

// Output-element -> input-element index maps for a broadcast binary op.
struct Broadcast {
    Shape out_shape;
    std::vector<std::size_t> a_index;  // empty when a has the output shape
    std::vector<std::size_t> b_index;  // empty when b has the output shape
};

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t n = shape_numel(out);
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    // Strides of `in` viewed in the output's rank; broadcast axes get stride 0.
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        stride[k + offset] = in[k] == 1 ? 0 : s;
        s *= in[k];
    }
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> coord(rank, 0);
    std::size_t flat = 0;
    for (std::size_t i = 0; i < n; ++i) {
        index[i] = flat;
        for (std::size_t k = rank; k-- > 0;) {
            ++coord[k];
            flat += stride[k];
            if (coord[k] < out[k]) {
                break;
            }
            flat -= stride[k] * coord[k];
            coord[k] = 0;
        }
    }
    return index;
}

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
    Broadcast plan;
    const std::size_t rank = std::max(a.size(), b.size());
    plan.out_shape.assign(rank, 1);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k + a.size() >= rank ? a[k + a.size() - rank] : 1;
        const std::size_t db = k + b.size() >= rank ? b[k + b.size() - rank] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_to_string(a) + " and " +
                             shape_to_string(b));
        }
        plan.out_shape[k] = std::max(da, db);
    }
    if (a != plan.out_shape) {
        plan.a_index = broadcast_index(a, plan.out_shape);
    }
    if (b != plan.out_shape) {
        plan.b_index = broadcast_index(b, plan.out_shape);
    }
    return plan;
}

inline std::size_t pick(const std::vector<std::size_t>& index, std::size_t i) {
    return index.empty() ? i : index[i];
}

// Shared driver for broadcast binary ops. `fwd(x, y)` gives the value,
// `da(x, y, out)` / `db(x, y, out)` the local partial derivatives.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
    auto plan = std::make_shared<Broadcast>(plan_broadcast(name, a.shape(), b.shape()));
    Tensor<T> out = Tensor<T>::zeros(plan->out_shape);
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) {
        od[i] = fwd(ad[pick(plan->a_index, i)], bd[pick(plan->b_index, i)]);
    }
    if (auto* tape = detail::recording_tape<T>({&a, &b})) {
        tape->record({a, b}, out,
                     [as = a.storage(), bs = b.storage(), os = out.storage(), plan, da, db](std::span<const T> g) {
                         const auto& o = os->data;
                         if (as->requires_grad) {
                             auto ga = as->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                                 const std::size_t ia = pick(plan->a_index, i);
                                 ga[ia] += g[i] * da(as->data[ia], bs->data[pick(plan->b_index, i)], o[i]);
                             }
                         }
                         if (bs->requires_grad) {
                             auto gb = bs->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                                 const std::size_t ib = pick(plan->b_index, i);
                                 gb[ib] += g[i] * db(as->data[pick(plan->a_index, i)], bs->data[ib], o[i]);
                             }
                         }
                     });
    }
    return out;
}

// Shared driver for unary elementwise ops; `deriv(x, y)` is dy/dx.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) {
        od[i] = fwd(ad[i]);
    }
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage(), os = out.storage(), deriv](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * deriv(as->data[i], os->data[i]);
            }
        });
    }
    return out;
}

template <typename T>
void require_matrix(const char* op, const Tensor<T>& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_to_string(t.shape()));
    }
}

}  // namespace

// ----------------------------- binary -----------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    for (T y : b.data()) {
        if (y == T(0)) {
            throw DomainError("div: division by zero");
        }
    }
    return binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    // Ties send the gradient to `a`.
    return binary_op<T>(
        "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
        [](T x, T y, T) { return x >= y ? T(1) : T(0); }, [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

// ----------------------------- scalar -----------------------------

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    return unary_op<T>(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
    return unary_op<T>(a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

// ----------------------------- linear algebra -----------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ for shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            const T* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    if (auto* tape = detail::recording_tape<T>({&a, &b})) {
        tape->record({a, b}, out, [as = a.storage(), bs = b.storage(), m, k, n](std::span<const T> g) {
            const T* A = as->data.data();
            const T* B = bs->data.data();
            if (as->requires_grad) {
                // dA = G B^T
                T* GA = as->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const T* brow = B + p * n;
                        T acc = 0;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += grow[j] * brow[j];
                        }
                        GA[i * k + p] += acc;
                    }
                }
            }
            if (bs->requires_grad) {
                // dB = A^T G
                T* GB = bs->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = A[i * k + p];
                        T* gbrow = GB + p * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_matrix("transpose", a);
    const std::size_t r = a.dim(0);
    const std::size_t c = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c, r});
    auto ad = a.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            od[j * r + i] = ad[i * c + j];
        }
    }
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage(), r, c](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
    }
    Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage()](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        });
    }
    return out;
}

// ----------------------------- unary -----------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary_op<T>(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    return unary_op<T>(
        a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [](T x, T) {
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    return unary_op<T>(
        a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary_op<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    return unary_op<T>(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a, std::optional<T> floor) {
    if (!floor) {
        auto ad = a.data();
        for (std::size_t i = 0; i < ad.size(); ++i) {
            if (!(ad[i] > T(0))) {
                throw DomainError("log: non-positive value " + std::to_string(ad[i]) + " at index " +
                                  std::to_string(i) + " (enable an epsilon floor to clamp)");
            }
        }
        return unary_op<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
    }
    const T f = *floor;
    if (!(f > T(0))) {
        throw DomainError("log: epsilon floor must be positive");
    }
    return unary_op<T>(
        a, [f](T x) { return std::log(std::max(x, f)); }, [f](T x, T) { return x > f ? T(1) / x : T(0); });
}

// ----------------------------- reductions -----------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t k = 0; k < axis; ++k) {
        outer *= s[k];
    }
    for (std::size_t k = axis + 1; k < s.size(); ++k) {
        inner *= s[k];
    }
    const std::size_t len = s[axis];
    Shape out_shape;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (k != axis) {
            out_shape.push_back(s[k]);
        }
    }
    if (out_shape.empty()) {
        out_shape.push_back(1);
    }
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto ad = a.data();
    auto od = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t i = 0; i < inner; ++i) {
                od[o * inner + i] += ad[(o * len + l) * inner + i];
            }
        }
    }
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage(), outer, len, inner](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t l = 0; l < len; ++l) {
                    for (std::size_t i = 0; i < inner; ++i) {
                        ga[(o * len + l) * inner + i] += g[o * inner + i];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
    const std::size_t len = a.dim(axis);
    return scale(sum(a, axis), T(1) / static_cast<T>(len));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = 0;
    for (T x : a.data()) {
        acc += x;
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage()](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (auto& x : ga) {
                x += g[0];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ----------------------------- softmax -----------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / cols;
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = ad.data() + r * cols;
        T* y = od.data() + r * cols;
        const T mx = *std::max_element(x, x + cols);
        T z = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] /= z;
        }
    }
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage(), os = out.storage(), rows, cols](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = os->data.data() + r * cols;
                const T* gy = g.data() + r * cols;
                T dot = 0;
                for (std::size_t j = 0; j < cols; ++j) {
                    dot += gy[j] * y[j];
                }
                for (std::size_t j = 0; j < cols; ++j) {
                    ga[r * cols + j] += y[j] * (gy[j] - dot);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / cols;
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = ad.data() + r * cols;
        T* y = od.data() + r * cols;
        const T mx = *std::max_element(x, x + cols);
        T z = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            z += std::exp(x[j] - mx);
        }
        const T lse = mx + std::log(z);
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = x[j] - lse;
        }
    }
    if (auto* tape = detail::recording_tape<T>({&a})) {
        tape->record({a}, out, [as = a.storage(), os = out.storage(), rows, cols](std::span<const T> g) {
            auto ga = as->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = os->data.data() + r * cols;
                const T* gy = g.data() + r * cols;
                T gsum = 0;
                for (std::size_t j = 0; j < cols; ++j) {
                    gsum += gy[j];
                }
                for (std::size_t j = 0; j < cols; ++j) {
                    ga[r * cols + j] += gy[j] - std::exp(y[j]) * gsum;
                }
            }
        });
    }
    return out;
}

// ----------------------------- indexing -----------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
    require_matrix("gather_rows", table);
    const std::size_t n_rows = table.dim(0);
    const std::size_t d = table.dim(1);
    if (ids.empty()) {
        throw ShapeError("gather_rows: empty index list");
    }
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= n_rows) {
            throw ShapeError("gather_rows: index " + std::to_string(id) + " out of range for table " +
                             shape_to_string(table.shape()));
        }
    }
    Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
    auto td = table.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, od.data() + i * d);
    }
    if (auto* tape = detail::recording_tape<T>({&table})) {
        tape->record({table}, out,
                     [ts = table.storage(), idx = std::vector<int>(ids.begin(), ids.end()), d](std::span<const T> g) {
                         auto gt = ts->grad_buffer();
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                             T* row = gt.data() + static_cast<std::size_t>(idx[i]) * d;
                             for (std::size_t j = 0; j < d; ++j) {
                                 row[j] += g[i * d + j];
                             }
                         }
                     });
    }
    return out;
}

#define INFOSTEER_INSTANTIATE_OPS(T)                                                   \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> maximum<T>(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                  \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                             \
    template Tensor<T> neg<T>(const Tensor<T>&);                                       \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                  \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                 \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                            \
    template Tensor<T> relu<T>(const Tensor<T>&);                                      \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                      \
    template Tensor<T> silu<T>(const Tensor<T>&);                                      \
    template Tensor<T> exp<T>(const Tensor<T>&);                                       \
    template Tensor<T> abs<T>(const Tensor<T>&);                                       \
    template Tensor<T> log<T>(const Tensor<T>&, std::optional<T>);                     \
    template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                          \
    template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                         \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                   \
    template Tensor<T> mean_all<T>(const Tensor<T>&);                                  \
    template Tensor<T> softmax<T>(const Tensor<T>&);                                   \
    template Tensor<T> log_softmax<T>(const Tensor<T>&);                               \
    template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const int>);

INFOSTEER_INSTANTIATE_OPS(float)
INFOSTEER_INSTANTIATE_OPS(double)

}  // namespace infosteer
