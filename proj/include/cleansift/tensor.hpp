#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleansift {

// Dense row-major tensor. Value type is a template parameter so the same
// kernels can run in float (pipeline) or double (gradient checks).
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel(shape)), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape/data size mismatch: " + shape_str() +
                                        " vs " + std::to_string(data.size()) + " values");
    }

    static std::int64_t numel(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D accessors (row-major)
    T& at(int r, int c) { return data[static_cast<size_t>(r) * dim(1) + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * dim(1) + c]; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!all_finite(t)) throw std::runtime_error(std::string("non-finite values in ") + what);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace cleansift
