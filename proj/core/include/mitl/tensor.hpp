#ifndef MITL_TENSOR_HPP
#define MITL_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mitl/errors.hpp"

namespace mitl {

// Dense NCHW tensor. Vectors and matrices are carried with trailing
// singleton dimensions, e.g. a bias of length C is {C,1,1,1} and a batch of
// logits is {N,1,1,1}.
template <class T>
struct TensorT {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    TensorT() = default;
    TensorT(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<size_t>(n_) * c_ * h_ * w_, T(0)) {}

    static TensorT zeros_like(const TensorT& o) { return TensorT(o.n, o.c, o.h, o.w); }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](size_t i) { return v[i]; }
    const T& operator[](size_t i) const { return v[i]; }

    T& at(int i, int j, int y, int x) {
        return v[((static_cast<size_t>(i) * c + j) * h + y) * w + x];
    }
    const T& at(int i, int j, int y, int x) const {
        return v[((static_cast<size_t>(i) * c + j) * h + y) * w + x];
    }

    T* plane(int i, int j) { return v.data() + (static_cast<size_t>(i) * c + j) * h * w; }
    const T* plane(int i, int j) const {
        return v.data() + (static_cast<size_t>(i) * c + j) * h * w;
    }

    bool same_shape(const TensorT& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    void fill(T value) { v.assign(v.size(), value); }

    void require_shape(int n_, int c_, int h_, int w_, const char* what) const {
        if (n != n_ || c != c_ || h != h_ || w != w_)
            throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": got " + shape_str() +
                                                      ", expected " + shape_str(n_, c_, h_, w_));
    }

    std::string shape_str() const { return shape_str(n, c, h, w); }

    static std::string shape_str(int n_, int c_, int h_, int w_) {
        return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) +
               "," + std::to_string(w_) + "]";
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out(n, c, h, w);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    bool operator==(const TensorT& o) const {
        return same_shape(o) && v == o.v;
    }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

} // namespace mitl

#endif
