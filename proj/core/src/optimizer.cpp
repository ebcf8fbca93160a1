#include <algorithm>
#include <cmath>

#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"

namespace infosteer {

double learning_rate_at(double base, std::size_t warmup, std::size_t step) {
    if (warmup == 0) {
        return base;
    }
    return base * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), T(0));
        v_.emplace_back(p.tensor.numel(), T(0));
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

template <typename T>
void AdamW<T>::step(double learning_rate) {
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(options_.beta1);
    const T b2 = static_cast<T>(options_.beta2);
    const T step_size = static_cast<T>(learning_rate / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(options_.eps);
    const T decay = static_cast<T>(1.0 - learning_rate * options_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<T>& p = params_[i].tensor;
        if (!p.has_grad()) {
            continue;
        }
        auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool decays = p.rank() == 2;
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            if (decays) {
                w[j] *= decay;
            }
            w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
}

template <typename T>
std::vector<NamedTensor<T>> AdamW<T>::state() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Shape& shape = params_[i].tensor.shape();
        out.push_back({"adam.m." + params_[i].name, Tensor<T>(shape, m_[i])});
        out.push_back({"adam.v." + params_[i].name, Tensor<T>(shape, v_[i])});
    }
    out.push_back({"adam.t", Tensor<T>::scalar(static_cast<T>(t_))});
    return out;
}

template <typename T>
void AdamW<T>::load_state(const std::vector<NamedTensor<T>>& state) {
    std::size_t matched = 0;
    for (const auto& entry : state) {
        if (entry.name == "adam.t") {
            t_ = static_cast<std::uint64_t>(entry.tensor.item());
            continue;
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const bool is_m = entry.name == "adam.m." + params_[i].name;
            const bool is_v = entry.name == "adam.v." + params_[i].name;
            if (!is_m && !is_v) {
                continue;
            }
            if (entry.tensor.numel() != params_[i].tensor.numel()) {
                throw DataError("optimizer state " + entry.name + " does not match its parameter");
            }
            auto d = entry.tensor.data();
            (is_m ? m_[i] : v_[i]).assign(d.begin(), d.end());
            ++matched;
        }
    }
    if (matched != 0 && matched != 2 * params_.size()) {
        throw DataError("optimizer state is incomplete (" + std::to_string(matched) + " of " +
                        std::to_string(2 * params_.size()) + " buffers)");
    }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace infosteer
