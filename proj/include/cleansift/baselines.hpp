#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "engine.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace cleansift {

// Per-sample outlier scores; higher means more suspicious.
struct ScoreTable {
    std::vector<double> score;
    std::string method;
};

// Distance to the per-class pixel mean.
template <typename T>
ScoreTable dcm_scores(const ImageDataset<T>& ds) {
    validate_dataset(ds);
    ClassIndex ci = ClassIndex::build(ds);
    const std::int64_t d = ds.sample_dim();
    ScoreTable out;
    out.method = "dcm";
    out.score.assign(static_cast<size_t>(ds.n_samples), 0.0);
    for (int k = 0; k < ds.n_classes; ++k) {
        const auto& idx = ci.by_class[static_cast<size_t>(k)];
        std::vector<double> mean(static_cast<size_t>(d), 0.0);
        for (int i : idx) {
            const T* px = ds.sample(i);
            for (std::int64_t p = 0; p < d; ++p) mean[static_cast<size_t>(p)] += px[p];
        }
        for (auto& v : mean) v /= static_cast<double>(idx.size());
        for (int i : idx) {
            const T* px = ds.sample(i);
            double acc = 0.0;
            for (std::int64_t p = 0; p < d; ++p) {
                double diff = static_cast<double>(px[p]) - mean[static_cast<size_t>(p)];
                acc += diff * diff;
            }
            out.score[static_cast<size_t>(i)] = std::sqrt(acc);
        }
    }
    return out;
}

// Top eigenvector of a symmetric matrix by power iteration.
inline std::vector<double> power_iteration(const std::vector<double>& mat, int d,
                                           double tol = 1e-6, int max_iters = 1000) {
    std::vector<double> v(static_cast<size_t>(d), 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> next(static_cast<size_t>(d));
    for (int it = 1; it <= max_iters; ++it) {
        for (int r = 0; r < d; ++r) {
            double acc = 0.0;
            const double* row = &mat[static_cast<size_t>(r) * d];
            for (int c = 0; c < d; ++c) acc += row[c] * v[static_cast<size_t>(c)];
            next[static_cast<size_t>(r)] = acc;
        }
        double norm = 0.0;
        for (double x : next) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-300) return v;  // zero matrix: any unit vector works
        double diff = 0.0;
        for (int r = 0; r < d; ++r) {
            next[static_cast<size_t>(r)] /= norm;
            diff += std::abs(std::abs(next[static_cast<size_t>(r)]) -
                             std::abs(v[static_cast<size_t>(r)]));
        }
        v.swap(next);
        if (diff < tol) return v;
    }
    throw std::runtime_error("power iteration: no convergence after " +
                             std::to_string(max_iters) + " iterations");
}

// Spectral-filtering scores: per class, center the penultimate-layer
// features, take the top eigenvector of the sample covariance by power
// iteration, score = |<feature, v>|.
template <typename T>
ScoreTable sf_least_scores(const ImageDataset<T>& ds, const ClassifierParams<T>& trained) {
    validate_dataset(ds);
    ClassIndex ci = ClassIndex::build(ds);
    ScoreTable out;
    out.method = "sf_least";
    out.score.assign(static_cast<size_t>(ds.n_samples), 0.0);
    for (int k = 0; k < ds.n_classes; ++k) {
        const auto& idx = ci.by_class[static_cast<size_t>(k)];
        Tensor<T> batch = gather_batch(ds, idx);
        Tensor<T> feats = forward_features(trained, batch);
        const int nk = feats.dim(0), d = feats.dim(1);
        std::vector<double> mean(static_cast<size_t>(d), 0.0);
        for (int i = 0; i < nk; ++i)
            for (int p = 0; p < d; ++p) mean[static_cast<size_t>(p)] += feats.at(i, p);
        for (auto& v : mean) v /= nk;
        std::vector<double> centered(static_cast<size_t>(nk) * d);
        for (int i = 0; i < nk; ++i)
            for (int p = 0; p < d; ++p)
                centered[static_cast<size_t>(i) * d + p] =
                    static_cast<double>(feats.at(i, p)) - mean[static_cast<size_t>(p)];
        std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < nk; ++i)
            for (int r = 0; r < d; ++r) {
                const double xr = centered[static_cast<size_t>(i) * d + r];
                if (xr == 0.0) continue;
                for (int c = r; c < d; ++c)
                    cov[static_cast<size_t>(r) * d + c] +=
                        xr * centered[static_cast<size_t>(i) * d + c];
            }
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < r; ++c)
                cov[static_cast<size_t>(r) * d + c] = cov[static_cast<size_t>(c) * d + r];
        for (auto& v : cov) v /= nk;
        auto top = power_iteration(cov, d);
        for (int i = 0; i < nk; ++i) {
            double dot = 0.0;
            for (int p = 0; p < d; ++p)
                dot += centered[static_cast<size_t>(i) * d + p] * top[static_cast<size_t>(p)];
            out.score[static_cast<size_t>(idx[static_cast<size_t>(i)])] = std::abs(dot);
        }
    }
    return out;
}

// Trains a classifier with plain SGD for a fixed number of epochs and
// returns it; used by SF-Least and Loss-Scan.
template <typename T>
ClassifierParams<T> train_plain_classifier(const ImageDataset<T>& ds, const HyperParams& hp,
                                           int epochs, std::uint64_t seed) {
    std::vector<int> hiddens(static_cast<size_t>(hp.hidden_depth), hp.hidden_width);
    auto theta = make_classifier<T>(static_cast<int>(ds.sample_dim()), hiddens, ds.n_classes,
                                    derive_seed(seed, "plain.theta"));
    HyperParams local = hp;
    local.warmup_epochs = epochs;
    return warmup(std::move(theta), ds, local, derive_seed(seed, "plain.order"));
}

// Early-loss scan: train exactly 5 epochs, score = -(final per-sample loss);
// backdoored samples tend to be learned early and end up suspicious.
template <typename T>
ScoreTable loss_scan_scores(const ImageDataset<T>& ds, const HyperParams& hp) {
    constexpr int kLossScanEpochs = 5;
    auto theta = train_plain_classifier(ds, hp, kLossScanEpochs,
                                        derive_seed(hp.master_seed, "loss_scan"));
    ScoreTable out;
    out.method = "loss_scan";
    auto losses = detail::dataset_losses(theta, ds);
    out.score.resize(static_cast<size_t>(ds.n_samples));
    for (int i = 0; i < ds.n_samples; ++i)
        out.score[static_cast<size_t>(i)] = -static_cast<double>(losses[static_cast<size_t>(i)]);
    return out;
}

// Per-class bottom-b_k by outlier score, ties toward the lower index.
template <typename T>
SiftResult select_lowest(const ScoreTable& scores, const BudgetPlan& plan,
                         const ImageDataset<T>& ds) {
    require(static_cast<int>(scores.score.size()) == ds.n_samples,
            "select_lowest: score table size mismatch");
    for (double s : scores.score)
        require(std::isfinite(s), "select_lowest: non-finite score");
    ClassIndex ci = ClassIndex::build(ds);
    SiftResult res;
    res.plan = plan;
    res.selected_per_class.resize(static_cast<size_t>(ds.n_classes));
    for (int k = 0; k < ds.n_classes; ++k) {
        std::vector<int> idx = ci.by_class[static_cast<size_t>(k)];
        const int bk = plan.per_class[static_cast<size_t>(k)];
        require(bk <= static_cast<int>(idx.size()), "select_lowest: budget exceeds class size");
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            double sa = scores.score[static_cast<size_t>(a)];
            double sb = scores.score[static_cast<size_t>(b)];
            if (sa != sb) return sa < sb;
            return a < b;
        });
        idx.resize(static_cast<size_t>(bk));
        std::sort(idx.begin(), idx.end());
        res.selected_per_class[static_cast<size_t>(k)] = std::move(idx);
    }
    return res;
}

inline void write_scores_csv(const std::string& path, const ScoreTable& scores) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "index,score\n";
    char buf[64];
    for (size_t i = 0; i < scores.score.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", scores.score[i]);
        os << i << ',' << buf << '\n';
    }
}

}  // namespace cleansift
