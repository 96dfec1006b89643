// Dense row-major tensor of real values. The building block for the
// autodiff graph in autodiff.hpp; shape checks throw std::invalid_argument
// with the offending operation and shapes spelled out.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace atrc {

using Shape = std::vector<std::size_t>;

// 64-byte-aligned storage for every numeric buffer. With vectorized kernels
// the rounding of a reduction can depend on the base alignment of its
// operands; pinning the alignment makes results independent of heap layout,
// which the bit-exactness guarantees rely on.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;
    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlign)); }
    bool operator==(const AlignedAlloc&) const { return true; }
    bool operator!=(const AlignedAlloc&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

[[noreturn]] inline void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)), data_(numel(shape_), T(0)) {
        check_extents();
    }

    TensorT(Shape shape, AlignedVec<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != numel(shape_))
            fail("Tensor", "data length " + std::to_string(data_.size()) +
                               " does not match shape " + shape_str(shape_));
    }

    TensorT(Shape shape, const std::vector<T>& data)
        : TensorT(std::move(shape), AlignedVec<T>(data.begin(), data.end())) {}

    TensorT(Shape shape, std::initializer_list<T> data)
        : TensorT(std::move(shape), AlignedVec<T>(data.begin(), data.end())) {}

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t extent(std::size_t axis) const {
        if (axis >= shape_.size()) fail("Tensor::extent", "axis out of range");
        return shape_[axis];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    AlignedVec<T>& values() { return data_; }
    const AlignedVec<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // Flat index of a 4-d coordinate; used by the NCHW kernels.
    std::size_t index4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    T& at(std::initializer_list<std::size_t> idx) {
        return data_[flat(idx)];
    }
    const T& at(std::initializer_list<std::size_t> idx) const {
        return data_[flat(idx)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    TensorT<U> cast() const {
        AlignedVec<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

private:
    void check_extents() const {
        for (std::size_t e : shape_)
            if (e == 0) fail("Tensor", "zero extent in shape " + shape_str(shape_));
    }

    std::size_t flat(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) fail("Tensor::at", "index rank mismatch");
        std::size_t off = 0, d = 0;
        for (std::size_t i : idx) {
            off = off * shape_[d] + i;
            ++d;
        }
        return off;
    }

    Shape shape_;
    AlignedVec<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
bool same_shape(const TensorT<T>& a, const TensorT<T>& b) {
    return a.shape() == b.shape();
}

}  // namespace atrc
