#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace infosteer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class Precision { f32, f64 };

std::string to_string(Precision precision);
Precision parse_precision(const std::string& text);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // nonzero only for op outputs
    std::size_t node_id = 0;

    std::span<T> grad_buffer() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

}  // namespace detail

/// Dense row-major tensor. A Tensor is a shared handle: copies alias the same
/// buffer so that graph nodes and parameters can be referenced from several
/// places. Use clone() for an independent deep copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor vector(std::vector<T> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                         bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(storage_); }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const T> data() const;
    std::span<T> mutable_data();
    T item() const;
    T at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const T> grad() const;
    void zero_grad();

    Tensor detach() const;
    Tensor clone() const;

    bool same_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }
    std::uint64_t tape_id() const;
    std::size_t node_id() const;

    const std::shared_ptr<detail::Storage<T>>& storage() const noexcept { return storage_; }

private:
    explicit Tensor(std::shared_ptr<detail::Storage<T>> storage) : storage_(std::move(storage)) {}

    std::shared_ptr<detail::Storage<T>> storage_;
};

/// Records differentiable operations for one forward pass. Activate it on the
/// current thread with Tape::Scope; ops record only while a tape is active and
/// at least one input requires gradients. backward() consumes the tape.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const T> output_grad)>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* active();

    std::uint64_t id() const noexcept { return id_; }
    std::size_t size() const noexcept { return records_.size(); }

    /// Populates grads of every parameter reachable from `loss`, then discards
    /// the recorded operations.
    void backward(const Tensor<T>& loss);

    void record(std::initializer_list<Tensor<T>> inputs, const Tensor<T>& output, BackwardFn fn);

private:
    struct Record {
        std::vector<std::shared_ptr<detail::Storage<T>>> inputs;
        std::shared_ptr<detail::Storage<T>> output;
        BackwardFn backward;
    };

    std::uint64_t id_;
    std::size_t next_node_ = 1;
    std::vector<Record> records_;
};

namespace detail {

// Active tape when any of `inputs` requires gradients, otherwise null.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs);

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Binary elementwise ops broadcast numpy-style
// (right-aligned, size-1 or missing axes repeat); the backward pass reduces
// gradients back onto each input's own shape.
// ---------------------------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T> Tensor<T> neg(const Tensor<T>& a);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);

/// Natural log. Non-positive entries raise DomainError unless `floor` is given,
/// in which case inputs are clamped to at least *floor (gradient is zero where
/// the clamp is active).
template <typename T> Tensor<T> log(const Tensor<T>& a, std::optional<T> floor = std::nullopt);

template <typename T> Tensor<T> sum(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);

template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);

/// rows[i] = table[ids[i]]; table is [n, d].
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Fused transformer ops with hand-written backward passes.
// ---------------------------------------------------------------------------

/// Row-wise layer normalization of x [n, d] with affine gain/bias [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

/// Multi-head causal self-attention over packed sequences. q, k, v are [n, d];
/// `offsets` holds segment boundaries (size segments+1, offsets.back() == n).
/// Position t attends to positions of its own segment that are <= t.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> offsets, std::size_t n_heads);

/// Mean negative log-likelihood of targets under softmax(logits) over rows with
/// mask != 0. logits is [n, vocab].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                        std::span<const std::uint8_t> mask);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

}  // namespace infosteer
