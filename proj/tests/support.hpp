#pragma once

// Shared helpers for the test suites: finite-difference drivers, independent
// numeric oracles, and small dataset utilities. Everything here stays
// independent of the implementation paths it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include "cleansift/dataset.hpp"
#include "cleansift/nn.hpp"

namespace testsupport {

// Central finite difference of a scalar function along one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x0, double h) {
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h);
}

// Max relative error between an analytic gradient and its FD estimate,
// guarding tiny denominators with the overall gradient scale.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& fd) {
    double scale = 1e-8;
    for (double a : analytic) scale = std::max(scale, std::abs(a));
    for (double a : fd) scale = std::max(scale, std::abs(a));
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), 1e-6 * scale});
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
    }
    return worst;
}

// Independent scalar-loop softmax cross-entropy, one sample at a time.
inline double scalar_xent(const std::vector<double>& logits, int label) {
    double zmax = logits[0];
    for (double z : logits) zmax = std::max(zmax, z);
    double denom = 0.0;
    for (double z : logits) denom += std::exp(z - zmax);
    return std::log(denom) - (logits[static_cast<size_t>(label)] - zmax);
}

// Jacobi eigensolver for small symmetric matrices; returns the eigenvector
// of the largest eigenvalue. Independent oracle for power iteration.
inline std::vector<double> jacobi_top_eigenvector(std::vector<double> a, int n) {
    std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a[static_cast<size_t>(p) * n + q];
                if (std::abs(apq) < 1e-18) continue;
                double app = a[static_cast<size_t>(p) * n + p];
                double aqq = a[static_cast<size_t>(q) * n + q];
                double phi = 0.5 * std::atan2(2.0 * apq, aqq - app);
                double c = std::cos(phi), s = std::sin(phi);
                for (int k = 0; k < n; ++k) {
                    double akp = a[static_cast<size_t>(k) * n + p];
                    double akq = a[static_cast<size_t>(k) * n + q];
                    a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a[static_cast<size_t>(p) * n + k];
                    double aqk = a[static_cast<size_t>(q) * n + k];
                    a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = v[static_cast<size_t>(k) * n + p];
                    double vkq = v[static_cast<size_t>(k) * n + q];
                    v[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (a[static_cast<size_t>(i) * n + i] > a[static_cast<size_t>(best) * n + best]) best = i;
    std::vector<double> top(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) top[static_cast<size_t>(k)] = v[static_cast<size_t>(k) * n + best];
    return top;
}

// One-sided Wilcoxon rank-sum (Mann-Whitney) p-value via the normal
// approximation: P(group A stochastically greater than group B).
inline double rank_sum_p_greater(std::vector<double> a, std::vector<double> b) {
    const size_t na = a.size(), nb = b.size();
    std::vector<std::pair<double, int>> all;
    for (double x : a) all.push_back({x, 0});
    for (double x : b) all.push_back({x, 1});
    std::sort(all.begin(), all.end());
    std::vector<double> rank(all.size());
    size_t i = 0;
    while (i < all.size()) {
        size_t j = i;
        while (j + 1 < all.size() && all[j + 1].first == all[i].first) ++j;
        double r = 0.5 * (i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) rank[k] = r;
        i = j + 1;
    }
    double ra = 0.0;
    for (size_t k = 0; k < all.size(); ++k)
        if (all[k].second == 0) ra += rank[k];
    const double u = ra - static_cast<double>(na) * (na + 1) / 2.0;
    const double mu = static_cast<double>(na) * nb / 2.0;
    const double sigma = std::sqrt(static_cast<double>(na) * nb * (na + nb + 1) / 12.0);
    const double z = (u - mu) / sigma;
    return 0.5 * std::erfc(z / std::sqrt(2.0));  // P(U >= observed)
}

// Dataset restricted to the given sample indices.
template <typename T>
cleansift::ImageDataset<T> subset_dataset(const cleansift::ImageDataset<T>& ds,
                                          const std::vector<int>& idx) {
    cleansift::ImageDataset<T> out;
    out.n_samples = static_cast<int>(idx.size());
    out.n_channels = ds.n_channels;
    out.height = ds.height;
    out.width = ds.width;
    out.n_classes = ds.n_classes;
    out.features = cleansift::Tensor<T>({out.n_samples, ds.n_channels, ds.height, ds.width});
    out.labels.resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(ds.sample(idx[i]), ds.sample_dim(), out.sample(static_cast<int>(i)));
        out.labels[i] = ds.labels[static_cast<size_t>(idx[i])];
    }
    return out;
}

template <typename T>
cleansift::ImageDataset<T> drop_indices(const cleansift::ImageDataset<T>& ds,
                                        const std::vector<int>& removed) {
    std::set<int> rm(removed.begin(), removed.end());
    std::vector<int> keep;
    for (int i = 0; i < ds.n_samples; ++i)
        if (!rm.count(i)) keep.push_back(i);
    return subset_dataset(ds, keep);
}

// Mean per-sample loss of a classifier over a dataset subset.
template <typename T>
double mean_loss_over(const cleansift::ClassifierParams<T>& net,
                      const cleansift::ImageDataset<T>& ds, const std::vector<int>& idx) {
    auto batch = cleansift::gather_batch(ds, idx);
    auto labels = cleansift::gather_labels(ds, idx);
    auto res = cleansift::classifier_forward(net, batch, labels);
    double acc = 0.0;
    for (T l : res.loss) acc += static_cast<double>(l);
    return acc / static_cast<double>(idx.size());
}

template <typename T>
double train_accuracy(const cleansift::ClassifierParams<T>& net,
                      const cleansift::ImageDataset<T>& ds) {
    std::vector<int> all(static_cast<size_t>(ds.n_samples));
    std::iota(all.begin(), all.end(), 0);
    auto batch = cleansift::gather_batch(ds, all);
    auto labels = cleansift::gather_labels(ds, all);
    auto res = cleansift::classifier_forward(net, batch, labels);
    int hits = 0;
    for (int i = 0; i < ds.n_samples; ++i) {
        int arg = 0;
        for (int k = 1; k < ds.n_classes; ++k)
            if (res.logits.at(i, k) > res.logits.at(i, arg)) arg = k;
        hits += (arg == ds.labels[static_cast<size_t>(i)]);
    }
    return static_cast<double>(hits) / ds.n_samples;
}

}  // namespace testsupport
