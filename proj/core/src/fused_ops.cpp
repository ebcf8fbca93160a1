#include <algorithm>
#include <cmath>
#include <limits>

#include "infosteer/error.hpp"
#include "infosteer/tensor.hpp"

namespace infosteer {

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (x.rank() != 2) {
        throw ShapeError("layer_norm: expected [n, d] input, got " + shape_to_string(x.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t d = x.dim(1);
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias shapes " + shape_to_string(gain.shape()) + " and " +
                         shape_to_string(bias.shape()) + " do not match width " + std::to_string(d));
    }
    Tensor<T> out = Tensor<T>::zeros({n, d});
    // Cache normalized rows and inverse std for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(n * d);
    auto inv_std = std::make_shared<std::vector<T>>(n);
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = xd.data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            od[r * d + j] = h * gd[j] + bd[j];
        }
    }
    if (auto* tape = detail::recording_tape<T>({&x, &gain, &bias})) {
        tape->record({x, gain, bias}, out,
                     [xs = x.storage(), gs = gain.storage(), bs = bias.storage(), xhat, inv_std, n,
                      d](std::span<const T> g) {
                         const auto& gv = gs->data;
                         if (gs->requires_grad) {
                             auto gg = gs->grad_buffer();
                             for (std::size_t r = 0; r < n; ++r) {
                                 for (std::size_t j = 0; j < d; ++j) {
                                     gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                                 }
                             }
                         }
                         if (bs->requires_grad) {
                             auto gb = bs->grad_buffer();
                             for (std::size_t r = 0; r < n; ++r) {
                                 for (std::size_t j = 0; j < d; ++j) {
                                     gb[j] += g[r * d + j];
                                 }
                             }
                         }
                         if (xs->requires_grad) {
                             auto gx = xs->grad_buffer();
                             const T inv_d = T(1) / static_cast<T>(d);
                             for (std::size_t r = 0; r < n; ++r) {
                                 T sum_dh = 0;
                                 T sum_dh_h = 0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                     const T dh = g[r * d + j] * gv[j];
                                     sum_dh += dh;
                                     sum_dh_h += dh * (*xhat)[r * d + j];
                                 }
                                 const T is = (*inv_std)[r];
                                 for (std::size_t j = 0; j < d; ++j) {
                                     const T dh = g[r * d + j] * gv[j];
                                     gx[r * d + j] +=
                                         is * (dh - inv_d * sum_dh - (*xhat)[r * d + j] * inv_d * sum_dh_h);
                                 }
                             }
                         }
                     });
    }
    return out;
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> offsets, std::size_t n_heads) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("causal_attention: q/k/v shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()) + " must be equal [n, d]");
    }
    const std::size_t n = q.dim(0);
    const std::size_t d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    }
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n ||
        !std::is_sorted(offsets.begin(), offsets.end())) {
        throw ShapeError("causal_attention: segment offsets must run from 0 to " + std::to_string(n));
    }
    const std::size_t hd = d / n_heads;
    const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));

    // Attention probabilities per (head, row): row t of segment [s0, s1) keeps
    // t - s0 + 1 weights. Stored flat with a per-row start index.
    auto seg = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
    auto row_start = std::make_shared<std::vector<std::size_t>>(n);
    std::size_t total = 0;
    for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
        for (std::size_t t = (*seg)[s]; t < (*seg)[s + 1]; ++t) {
            (*row_start)[t] = total;
            total += t - (*seg)[s] + 1;
        }
    }
    auto probs = std::make_shared<std::vector<T>>(total * n_heads);

    Tensor<T> out = Tensor<T>::zeros({n, d});
    const T* Q = q.data().data();
    const T* K = k.data().data();
    const T* V = v.data().data();
    T* O = out.mutable_data().data();
    for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
        const std::size_t s0 = (*seg)[s];
        const std::size_t s1 = (*seg)[s + 1];
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * hd;
            for (std::size_t t = s0; t < s1; ++t) {
                T* p = probs->data() + h * total + (*row_start)[t];
                const std::size_t len = t - s0 + 1;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < len; ++j) {
                    T dot = 0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dot += Q[t * d + c0 + c] * K[(s0 + j) * d + c0 + c];
                    }
                    p[j] = dot * scale_factor;
                    mx = std::max(mx, p[j]);
                }
                T z = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    p[j] /= z;
                    const T w = p[j];
                    for (std::size_t c = 0; c < hd; ++c) {
                        O[t * d + c0 + c] += w * V[(s0 + j) * d + c0 + c];
                    }
                }
            }
        }
    }
    if (auto* tape = detail::recording_tape<T>({&q, &k, &v})) {
        tape->record(
            {q, k, v}, out,
            [qs = q.storage(), ks = k.storage(), vs = v.storage(), seg, row_start, probs, total, n, d, hd, n_heads,
             scale_factor](std::span<const T> g) {
                const T* Q = qs->data.data();
                const T* K = ks->data.data();
                const T* V = vs->data.data();
                std::vector<T> gq(n * d, T(0));
                std::vector<T> gk(n * d, T(0));
                std::vector<T> gv(n * d, T(0));
                std::vector<T> dp;
                for (std::size_t s = 0; s + 1 < seg->size(); ++s) {
                    const std::size_t s0 = (*seg)[s];
                    const std::size_t s1 = (*seg)[s + 1];
                    for (std::size_t h = 0; h < n_heads; ++h) {
                        const std::size_t c0 = h * hd;
                        for (std::size_t t = s0; t < s1; ++t) {
                            const T* p = probs->data() + h * total + (*row_start)[t];
                            const std::size_t len = t - s0 + 1;
                            const T* gout = g.data() + t * d + c0;
                            dp.assign(len, T(0));
                            T weighted = 0;
                            for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t src = (s0 + j) * d + c0;
                                T acc = 0;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    acc += gout[c] * V[src + c];
                                    gv[src + c] += p[j] * gout[c];
                                }
                                dp[j] = acc;
                                weighted += p[j] * acc;
                            }
                            for (std::size_t j = 0; j < len; ++j) {
                                const T ds = p[j] * (dp[j] - weighted) * scale_factor;
                                const std::size_t src = (s0 + j) * d + c0;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gq[t * d + c0 + c] += ds * K[src + c];
                                    gk[src + c] += ds * Q[t * d + c0 + c];
                                }
                            }
                        }
                    }
                }
                auto accumulate = [](detail::Storage<T>& st, const std::vector<T>& src) {
                    if (!st.requires_grad) {
                        return;
                    }
                    auto dst = st.grad_buffer();
                    for (std::size_t i = 0; i < src.size(); ++i) {
                        dst[i] += src[i];
                    }
                };
                accumulate(*qs, gq);
                accumulate(*ks, gk);
                accumulate(*vs, gv);
            });
    }
    return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: expected [n, vocab] logits, got " + shape_to_string(logits.shape()));
    }
    const std::size_t n = logits.dim(0);
    const std::size_t vocab = logits.dim(1);
    if (targets.size() != n || mask.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(n) + " logit rows");
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] == 0) {
            continue;
        }
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
            throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " out of vocabulary range " +
                             std::to_string(vocab));
        }
        ++count;
    }
    if (count == 0) {
        throw DataError("cross_entropy: every target position is masked");
    }
    auto probs = std::make_shared<std::vector<T>>(n * vocab, T(0));
    const T* X = logits.data().data();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] == 0) {
            continue;
        }
        const T* x = X + i * vocab;
        T* p = probs->data() + i * vocab;
        const T mx = *std::max_element(x, x + vocab);
        T z = 0;
        for (std::size_t j = 0; j < vocab; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            p[j] /= z;
        }
        total += -(x[targets[i]] - mx - std::log(z));
    }
    const T inv_count = T(1) / static_cast<T>(count);
    Tensor<T> out = Tensor<T>::scalar(total * inv_count);
    if (auto* tape = detail::recording_tape<T>({&logits})) {
        tape->record({logits}, out,
                     [ls = logits.storage(), probs, tgt = std::vector<int>(targets.begin(), targets.end()),
                      msk = std::vector<std::uint8_t>(mask.begin(), mask.end()), n, vocab,
                      inv_count](std::span<const T> g) {
                         auto gl = ls->grad_buffer();
                         const T coef = g[0] * inv_count;
                         for (std::size_t i = 0; i < n; ++i) {
                             if (msk[i] == 0) {
                                 continue;
                             }
                             const T* p = probs->data() + i * vocab;
                             T* row = gl.data() + i * vocab;
                             for (std::size_t j = 0; j < vocab; ++j) {
                                 row[j] += coef * p[j];
                             }
                             row[tgt[i]] -= coef;
                         }
                     });
    }
    return out;
}

#define INFOSTEER_INSTANTIATE_FUSED(T)                                                                       \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
    template Tensor<T> causal_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                           std::span<const std::size_t>, std::size_t);                       \
    template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>, std::span<const std::uint8_t>);

INFOSTEER_INSTANTIATE_FUSED(float)
INFOSTEER_INSTANTIATE_FUSED(double)

}  // namespace infosteer
