#include "explora/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace explora {

DType dtype_from_name(const std::string& name) {
    if (name == "f32") return DType::f32;
    if (name == "f64") return DType::f64;
    throw DataError("unknown dtype name: " + name);
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::make(Shape shape, DType dt) {
    for (int64_t d : shape)
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->dtype = dt;
    const int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.resize(static_cast<size_t>(n) * dtype_size(dt));
    return Tensor(std::move(impl));
}

Tensor make_tensor(Shape shape, DType dt) { return Tensor::make(std::move(shape), dt); }

Tensor Tensor::zeros(Shape shape, DType dt) { return make(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
    Tensor t = make(std::move(shape), dt);
    const int64_t n = t.numel();
    if (dt == DType::f32) {
        auto d = t.data<float>();
        for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = static_cast<float>(value);
    } else {
        auto d = t.data<double>();
        for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i)] = value;
    }
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dt) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    Tensor t = make(std::move(shape), dt);
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dt) {
    Tensor t = make(std::move(shape), dt);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, stddev * rng.normal());
    return t;
}

int64_t Tensor::dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r)
        throw ShapeError("dim index " + std::to_string(i) + " out of range for rank " + std::to_string(r));
    return impl_->shape[static_cast<size_t>(i)];
}

void Tensor::ensure_grad() {
    if (!impl_->grad)
        impl_->grad = std::make_unique<std::vector<std::byte>>(impl_->data.size(), std::byte{0});
}

double Tensor::at(int64_t flat_index) const {
    if (flat_index < 0 || flat_index >= numel())
        throw ShapeError("flat index out of range");
    if (impl_->dtype == DType::f32)
        return reinterpret_cast<const float*>(impl_->data.data())[flat_index];
    return reinterpret_cast<const double*>(impl_->data.data())[flat_index];
}

void Tensor::set(int64_t flat_index, double value) {
    if (flat_index < 0 || flat_index >= numel())
        throw ShapeError("flat index out of range");
    if (impl_->dtype == DType::f32)
        reinterpret_cast<float*>(impl_->data.data())[flat_index] = static_cast<float>(value);
    else
        reinterpret_cast<double*>(impl_->data.data())[flat_index] = value;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return at(0);
}

Tensor Tensor::clone() const {
    if (!impl_) return {};
    Tensor t = make(impl_->shape, impl_->dtype);
    std::memcpy(t.impl_->data.data(), impl_->data.data(), impl_->data.size());
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype()) return clone();
    Tensor t = make(impl_->shape, dt);
    const int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, at(i));
    return t;
}

bool Tensor::all_finite() const {
    const int64_t n = numel();
    if (impl_->dtype == DType::f32) {
        const float* p = reinterpret_cast<const float*>(impl_->data.data());
        for (int64_t i = 0; i < n; ++i)
            if (!std::isfinite(p[i])) return false;
    } else {
        const double* p = reinterpret_cast<const double*>(impl_->data.data());
        for (int64_t i = 0; i < n; ++i)
            if (!std::isfinite(p[i])) return false;
    }
    return true;
}

namespace {
thread_local std::vector<Tape*> g_tape_stack;
thread_local int g_no_grad_depth = 0;
} // namespace

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::backward(Tensor loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw StateError("backward: loss does not require grad (nothing recorded)");
    if (loss.dtype() == DType::f32)
        loss.grad<float>()[0] = 1.0f;
    else
        loss.grad<double>()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

NoGrad::NoGrad() : saved_(true) { ++g_no_grad_depth; }
NoGrad::~NoGrad() {
    (void)saved_;
    --g_no_grad_depth;
}

bool grad_enabled() { return g_no_grad_depth == 0; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled() || Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

} // namespace explora
