#include "infosteer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

#include "infosteer/error.hpp"

namespace infosteer {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            out << ", ";
        }
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::string to_string(Precision precision) {
    return precision == Precision::f32 ? "f32" : "f64";
}

Precision parse_precision(const std::string& text) {
    if (text == "f32" || text == "float32" || text == "32") {
        return Precision::f32;
    }
    if (text == "f64" || text == "float64" || text == "64") {
        return Precision::f64;
    }
    throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

namespace {

void check_shape(const Shape& shape) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
        }
    }
}

std::atomic<std::uint64_t> g_next_tape_id{1};

template <typename T>
Tape<T>*& active_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

}  // namespace

// ----------------------------- Tensor -----------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
    }
    storage_ = std::make_shared<detail::Storage<T>>();
    storage_->shape = std::move(shape);
    storage_->data = std::move(data);
    storage_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::vector<T> values, bool requires_grad) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    if (!storage_) {
        throw GraphError("use of an undefined tensor");
    }
    return storage_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
    }
    return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
    return shape_numel(shape());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
    shape();
    return storage_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
    shape();
    return storage_->data;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape()));
    }
    return storage_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
    const Shape& s = shape();
    if (s.size() != 2 || row >= s[0] || col >= s[1]) {
        throw ShapeError("at(" + std::to_string(row) + ", " + std::to_string(col) + ") invalid for shape " +
                         shape_to_string(s));
    }
    return storage_->data[row * s[1] + col];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
    return storage_ && storage_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    shape();
    storage_->requires_grad = on;
}

template <typename T>
bool Tensor<T>::has_grad() const {
    return storage_ && storage_->grad.size() == storage_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    if (!has_grad()) {
        throw GraphError("tensor " + shape_to_string(shape()) + " has no gradient");
    }
    return storage_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    shape();
    storage_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(shape(), storage_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor copy(shape(), storage_->data, storage_->requires_grad);
    copy.storage_->grad = storage_->grad;
    return copy;
}

template <typename T>
std::uint64_t Tensor<T>::tape_id() const {
    return storage_ ? storage_->tape_id : 0;
}

template <typename T>
std::size_t Tensor<T>::node_id() const {
    return storage_ ? storage_->node_id : 0;
}

// ----------------------------- Tape -----------------------------

template <typename T>
Tape<T>::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

template <typename T>
Tape<T>::~Tape() {
    if (active_slot<T>() == this) {
        active_slot<T>() = nullptr;
    }
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_slot<T>()) {
    active_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
    active_slot<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return active_slot<T>();
}

template <typename T>
void Tape<T>::record(std::initializer_list<Tensor<T>> inputs, const Tensor<T>& output, BackwardFn fn) {
    Record rec;
    rec.inputs.reserve(inputs.size());
    for (const Tensor<T>& in : inputs) {
        rec.inputs.push_back(in.storage());
    }
    rec.output = output.storage();
    rec.output->requires_grad = true;
    rec.output->tape_id = id_;
    rec.output->node_id = next_node_++;
    rec.backward = std::move(fn);
    records_.push_back(std::move(rec));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined()) {
        throw GraphError("backward on an undefined tensor");
    }
    if (loss.numel() != 1) {
        throw GraphError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
    }
    if (loss.tape_id() != id_ || records_.empty()) {
        throw GraphError("backward through a tensor that is not on this tape");
    }
    const auto& root = loss.storage();
    auto it = std::find_if(records_.rbegin(), records_.rend(),
                           [&](const Record& r) { return r.output == root; });
    if (it == records_.rend()) {
        throw GraphError("backward through a tensor that is not on this tape");
    }

    root->grad_buffer()[0] += T(1);
    // Records are in creation order, so walking backwards visits every consumer
    // before its producer. An output without a gradient is unreachable from loss.
    for (; it != records_.rend(); ++it) {
        const detail::Storage<T>& out = *it->output;
        if (out.grad.size() != out.data.size()) {
            continue;
        }
        it->backward(out.grad);
    }
    records_.clear();
}

namespace detail {

template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = Tape<T>::active();
    if (tape == nullptr) {
        return nullptr;
    }
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) {
            return tape;
        }
    }
    return nullptr;
}

template Tape<float>* recording_tape<float>(std::initializer_list<const Tensor<float>*>);
template Tape<double>* recording_tape<double>(std::initializer_list<const Tensor<double>*>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace infosteer
