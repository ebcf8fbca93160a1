#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "infosteer/model.hpp"
#include "infosteer/rng.hpp"
#include "infosteer/tensor.hpp"

namespace testing {

inline std::filesystem::path data_path(const std::string& name) {
    return std::filesystem::path(INFOSTEER_DATA_DIR) / name;
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("infosteer_test_" + tag + "_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()) + "_" +
                 std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
}

inline std::vector<double> uniform_values(infosteer::Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return v;
}

template <typename T>
infosteer::Tensor<T> random_tensor(infosteer::Rng& rng, infosteer::Shape shape, double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = false) {
    const std::size_t n = infosteer::shape_numel(shape);
    std::vector<T> v(n);
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform(lo, hi));
    }
    return infosteer::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Relative difference with an absolute floor on the denominator.
inline double rel_error(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename A, typename B>
bool bitwise_equal(std::span<const A> a, std::span<const B> b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i] == b[i]) && !(std::isnan(a[i]) && std::isnan(b[i]))) {
            return false;
        }
    }
    return true;
}

// Embeddings start at std 0.02, where layer norm is so curved that central
// differences at eps 1e-4 carry ~1e-4 truncation error. Gradient checks probe
// at embeddings of unit scale instead.
template <typename T>
void widen_embeddings(const infosteer::Transformer<T>& model, T factor = T(25)) {
    for (const auto& nt : model.named_parameters()) {
        if (nt.name.find("embedding") != std::string::npos) {
            auto t = nt.tensor;
            for (auto& x : t.mutable_data()) {
                x *= factor;
            }
        }
    }
}

}  // namespace testing
