#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cleansift {

// Labeled image collection. Features are [N, C, H, W] with values in [0,1].
template <typename T = float>
struct ImageDataset {
    int n_samples = 0;
    int n_channels = 0;
    int height = 0;
    int width = 0;
    int n_classes = 0;
    Tensor<T> features;
    std::vector<int> labels;

    std::int64_t sample_dim() const {
        return static_cast<std::int64_t>(n_channels) * height * width;
    }
    T* sample(int i) { return &features.data[static_cast<size_t>(i) * sample_dim()]; }
    const T* sample(int i) const { return &features.data[static_cast<size_t>(i) * sample_dim()]; }
};

template <typename T>
void validate_dataset(const ImageDataset<T>& ds) {
    require(ds.n_samples >= 1 && ds.n_classes >= 2, "dataset: empty or single-class");
    require(ds.features.size() == static_cast<std::int64_t>(ds.n_samples) * ds.sample_dim(),
            "dataset: feature size mismatch");
    require(static_cast<int>(ds.labels.size()) == ds.n_samples, "dataset: label count mismatch");
    std::vector<int> count(static_cast<size_t>(ds.n_classes), 0);
    for (int y : ds.labels) {
        require(y >= 0 && y < ds.n_classes, "dataset: label out of range");
        ++count[static_cast<size_t>(y)];
    }
    for (int k = 0; k < ds.n_classes; ++k)
        require(count[static_cast<size_t>(k)] >= 1,
                "dataset: class " + std::to_string(k) + " has no samples");
}

// Per-class index lists. Union of the lists is 0..N-1, lists are disjoint.
struct ClassIndex {
    std::vector<std::vector<int>> by_class;

    template <typename T>
    static ClassIndex build(const ImageDataset<T>& ds) {
        ClassIndex ci;
        ci.by_class.assign(static_cast<size_t>(ds.n_classes), {});
        for (int i = 0; i < ds.n_samples; ++i)
            ci.by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
        return ci;
    }
    int class_count() const { return static_cast<int>(by_class.size()); }
    int class_size(int k) const { return static_cast<int>(by_class[static_cast<size_t>(k)].size()); }
};

// Per-class selection counts b_k, summing to the total budget.
struct BudgetPlan {
    std::vector<int> per_class;

    int total() const {
        int t = 0;
        for (int b : per_class) t += b;
        return t;
    }
};

template <typename T>
BudgetPlan make_budget(const ImageDataset<T>& ds, int total_budget, bool balanced) {
    require(total_budget >= 1 && total_budget <= ds.n_samples,
            "budget: must be in [1, N=" + std::to_string(ds.n_samples) + "]");
    ClassIndex ci = ClassIndex::build(ds);
    BudgetPlan plan;
    plan.per_class.assign(static_cast<size_t>(ds.n_classes), 0);
    if (balanced) {
        require(total_budget % ds.n_classes == 0,
                "budget: balanced budget " + std::to_string(total_budget) +
                    " not divisible by K=" + std::to_string(ds.n_classes));
        const int bk = total_budget / ds.n_classes;
        for (int k = 0; k < ds.n_classes; ++k) {
            require(bk <= ci.class_size(k), "budget: class " + std::to_string(k) + " has only " +
                                                std::to_string(ci.class_size(k)) + " samples");
            plan.per_class[static_cast<size_t>(k)] = bk;
        }
        return plan;
    }
    // proportional with largest-remainder correction
    std::vector<double> frac(static_cast<size_t>(ds.n_classes));
    int assigned = 0;
    for (int k = 0; k < ds.n_classes; ++k) {
        double exact = static_cast<double>(total_budget) * ci.class_size(k) / ds.n_samples;
        int fl = static_cast<int>(exact);
        plan.per_class[static_cast<size_t>(k)] = fl;
        frac[static_cast<size_t>(k)] = exact - fl;
        assigned += fl;
    }
    std::vector<int> order(static_cast<size_t>(ds.n_classes));
    for (int k = 0; k < ds.n_classes; ++k) order[static_cast<size_t>(k)] = k;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return frac[static_cast<size_t>(a)] > frac[static_cast<size_t>(b)];
    });
    for (int r = 0; assigned < total_budget; ++r) {
        int k = order[static_cast<size_t>(r % ds.n_classes)];
        if (plan.per_class[static_cast<size_t>(k)] < ci.class_size(k)) {
            ++plan.per_class[static_cast<size_t>(k)];
            ++assigned;
        }
    }
    return plan;
}

namespace detail {

// Geometric class templates on a side x side canvas: value in [0,1].
// All templates are mirror-symmetric about the vertical axis and low
// frequency, so class identity survives small crops, rotations, flips and
// blur the way natural image classes do.
inline double shape_template(int tmpl, int r, int c, int side) {
    const double bg = 0.1, fg = 0.9;
    const int s = side;
    const double t = s / 6.0;  // stroke half-thickness
    const double mid = (s - 1) / 2.0;
    const double dr = r - mid, dc = c - mid;
    const double rad = std::sqrt(dr * dr + dc * dc);
    switch (tmpl) {
        case 0:  // upper horizontal bar
            return std::abs(r - s / 4.0) <= t ? fg : bg;
        case 1:  // lower horizontal bar
            return std::abs(r - 3.0 * s / 4.0) <= t ? fg : bg;
        case 2:  // centered vertical bar
            return std::abs(dc) <= t ? fg : bg;
        case 3:  // centered disc
            return rad <= s / 3.0 ? fg : bg;
        case 4:  // diagonal cross
            return (std::abs(dr - dc) <= t || std::abs(dr + dc) <= t) ? fg : bg;
        case 5:  // ring
            return std::abs(rad - s / 2.8) <= t * 0.75 ? fg : bg;
        case 6: {  // two stacked discs
            double d1 = std::hypot(r - s / 4.0, dc);
            double d2 = std::hypot(r - 3.0 * s / 4.0, dc);
            return (d1 <= s / 5.0 || d2 <= s / 5.0) ? fg : bg;
        }
        case 7:  // frame
            return (r < t || c < t || r >= s - t || c >= s - t) ? fg : bg;
        case 8: {  // checker, mirrored about the vertical axis
            int cell = std::max(2, s / 4);
            int rc = r / cell;
            int cc2 = static_cast<int>(std::abs(dc)) / cell;
            return ((rc + cc2) % 2 == 0) ? fg : bg;
        }
        case 9:  // center square block
            return (std::abs(dr) <= s / 6.0 && std::abs(dc) <= s / 6.0) ? fg : bg;
        default:
            return bg;
    }
}

constexpr int kShapeTemplateCount = 10;

}  // namespace detail

// Synthetic desk-scale dataset: one fixed geometric template per class plus
// Gaussian pixel noise, clamped to [0,1]. Single channel.
template <typename T = float>
ImageDataset<T> synth_shapes(int n_classes, int per_class, int side, double noise_sigma,
                             std::uint64_t seed) {
    require(n_classes >= 2, "synth_shapes: need K >= 2");
    require(side >= 8, "synth_shapes: need side >= 8");
    require(per_class >= 1, "synth_shapes: need per_class >= 1");
    require(n_classes <= detail::kShapeTemplateCount,
            "synth_shapes: only " + std::to_string(detail::kShapeTemplateCount) +
                " templates available, requested K=" + std::to_string(n_classes));
    ImageDataset<T> ds;
    ds.n_samples = n_classes * per_class;
    ds.n_channels = 1;
    ds.height = side;
    ds.width = side;
    ds.n_classes = n_classes;
    ds.features = Tensor<T>({ds.n_samples, 1, side, side});
    ds.labels.resize(static_cast<size_t>(ds.n_samples));
    for (int k = 0; k < n_classes; ++k) {
        for (int j = 0; j < per_class; ++j) {
            const int i = k * per_class + j;
            ds.labels[static_cast<size_t>(i)] = k;
            SeededRng rng(derive_seed(seed, "synth", i));
            T* px = ds.sample(i);
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) {
                    double v = detail::shape_template(k, r, c, side);
                    if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
                    px[r * side + c] = static_cast<T>(std::clamp(v, 0.0, 1.0));
                }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Binary dataset file, magic "SFT1":
//   "SFT1" | u32 N,C,H,W,K | N x u16 labels | N*C*H*W x f32 features
// All integers and floats little-endian; features row-major, sample-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("dataset file: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename T>
void save_dataset(const ImageDataset<T>& ds, const std::string& path) {
    validate_dataset(ds);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("dataset file: cannot open for write: " + path);
    os.write("SFT1", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(ds.n_samples));
    detail::put_u32(os, static_cast<std::uint32_t>(ds.n_channels));
    detail::put_u32(os, static_cast<std::uint32_t>(ds.height));
    detail::put_u32(os, static_cast<std::uint32_t>(ds.width));
    detail::put_u32(os, static_cast<std::uint32_t>(ds.n_classes));
    for (int y : ds.labels) {
        unsigned char b[2] = {static_cast<unsigned char>(y), static_cast<unsigned char>(y >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    static_assert(sizeof(float) == 4);
    for (std::int64_t i = 0; i < ds.features.size(); ++i) {
        float f = static_cast<float>(ds.features[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(os, bits);
    }
    if (!os) throw std::runtime_error("dataset file: write failed: " + path);
}

template <typename T = float>
ImageDataset<T> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset file: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SFT1", 4) != 0)
        throw std::runtime_error("dataset file: bad magic in " + path);
    ImageDataset<T> ds;
    ds.n_samples = static_cast<int>(detail::get_u32(is));
    ds.n_channels = static_cast<int>(detail::get_u32(is));
    ds.height = static_cast<int>(detail::get_u32(is));
    ds.width = static_cast<int>(detail::get_u32(is));
    ds.n_classes = static_cast<int>(detail::get_u32(is));
    if (ds.n_samples < 1 || ds.n_channels < 1 || ds.height < 1 || ds.width < 1 ||
        ds.n_classes < 2)
        throw std::runtime_error("dataset file: implausible header in " + path);
    ds.labels.resize(static_cast<size_t>(ds.n_samples));
    for (int i = 0; i < ds.n_samples; ++i) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        if (!is) throw std::runtime_error("dataset file: truncated labels in " + path);
        int y = static_cast<int>(b[0]) | (static_cast<int>(b[1]) << 8);
        if (y >= ds.n_classes)
            throw std::runtime_error("dataset file: label " + std::to_string(y) +
                                     " out of range [0," + std::to_string(ds.n_classes) + ") in " +
                                     path);
        ds.labels[static_cast<size_t>(i)] = y;
    }
    const std::int64_t count = static_cast<std::int64_t>(ds.n_samples) * ds.sample_dim();
    ds.features = Tensor<T>({ds.n_samples, ds.n_channels, ds.height, ds.width});
    for (std::int64_t i = 0; i < count; ++i) {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        if (!is) throw std::runtime_error("dataset file: truncated features in " + path);
        std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        ds.features[i] = static_cast<T>(f);
    }
    validate_dataset(ds);
    return ds;
}

// Flattened [N, C*H*W] view of a subset of samples, for classifier input.
template <typename T>
Tensor<T> gather_batch(const ImageDataset<T>& ds, std::span<const int> idx) {
    const std::int64_t d = ds.sample_dim();
    Tensor<T> out({static_cast<int>(idx.size()), static_cast<int>(d)});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(ds.sample(idx[i]), d, &out.data[i * static_cast<size_t>(d)]);
    return out;
}

template <typename T>
std::vector<int> gather_labels(const ImageDataset<T>& ds, std::span<const int> idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[static_cast<size_t>(idx[i])];
    return out;
}

}  // namespace cleansift
