#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cleansift {

enum class Activation { kRelu, kIdentity };

template <typename T>
struct DenseLayer {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]
    Activation act = Activation::kRelu;

    int in_dim() const { return weight.dim(1); }
    int out_dim() const { return weight.dim(0); }
    std::int64_t param_count() const { return weight.size() + bias.size(); }
};

// Feed-forward classifier: flatten -> (dense+relu)* -> dense(K).
template <typename T>
struct ClassifierParams {
    std::vector<DenseLayer<T>> layers;
    int n_classes = 0;

    int layer_count() const { return static_cast<int>(layers.size()); }
    int input_dim() const { return layers.front().in_dim(); }
    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& l : layers) n += l.param_count();
        return n;
    }
};

template <typename T>
void validate_classifier(const ClassifierParams<T>& p) {
    require(!p.layers.empty(), "classifier: no layers");
    for (size_t l = 0; l + 1 < p.layers.size(); ++l)
        require(p.layers[l].out_dim() == p.layers[l + 1].in_dim(),
                "classifier: layer " + std::to_string(l) + " out-dim " +
                    std::to_string(p.layers[l].out_dim()) + " != layer " +
                    std::to_string(l + 1) + " in-dim " +
                    std::to_string(p.layers[l + 1].in_dim()));
    require(p.layers.back().out_dim() == p.n_classes,
            "classifier: final out-dim " + std::to_string(p.layers.back().out_dim()) +
                " != n_classes " + std::to_string(p.n_classes));
}

// He-uniform init; hidden layers ReLU, final layer identity.
template <typename T>
ClassifierParams<T> make_classifier(int input_dim, const std::vector<int>& hidden, int n_classes,
                                    std::uint64_t seed) {
    require(input_dim >= 1 && n_classes >= 2, "classifier: need input_dim>=1, n_classes>=2");
    ClassifierParams<T> p;
    p.n_classes = n_classes;
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : hidden) dims.push_back(h);
    dims.push_back(n_classes);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer<T> layer;
        layer.weight = Tensor<T>({dims[l + 1], dims[l]});
        layer.bias = Tensor<T>({dims[l + 1]});
        layer.act = (l + 2 == dims.size()) ? Activation::kIdentity : Activation::kRelu;
        SeededRng rng(derive_seed(seed, "layer", static_cast<int>(l)));
        double bound = std::sqrt(6.0 / dims[l]);
        for (auto& w : layer.weight.data) w = static_cast<T>(rng.uniform(-bound, bound));
        p.layers.push_back(std::move(layer));
    }
    return p;
}

// Activations kept from the last forward pass; needed for backward passes.
template <typename T>
struct ForwardCache {
    std::vector<Tensor<T>> inputs;   // input to layer l, [n, in_l]
    std::vector<Tensor<T>> preacts;  // pre-activation of layer l, [n, out_l]
    Tensor<T> probs;                 // softmax outputs, [n, K]
    std::vector<T> loss;             // per-sample cross-entropy
    std::vector<int> labels;
    int batch() const { return probs.dim(0); }
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;
    std::vector<T> loss;
};

namespace detail {

// y = W x + b for a whole batch; 64-bit accumulation.
template <typename T>
void dense_forward(const DenseLayer<T>& layer, const Tensor<T>& in, Tensor<T>& out) {
    const int n = in.dim(0), d = layer.in_dim(), m = layer.out_dim();
    out = Tensor<T>({n, m});
    for (int i = 0; i < n; ++i) {
        const T* x = &in.data[static_cast<size_t>(i) * d];
        T* y = &out.data[static_cast<size_t>(i) * m];
        for (int o = 0; o < m; ++o) {
            const T* w = &layer.weight.data[static_cast<size_t>(o) * d];
            double acc = static_cast<double>(layer.bias[o]);
            for (int j = 0; j < d; ++j) acc += static_cast<double>(w[j]) * x[j];
            y[o] = static_cast<T>(acc);
        }
    }
}

template <typename T>
void apply_activation(Activation act, Tensor<T>& t) {
    if (act == Activation::kRelu)
        for (auto& v : t.data) v = v > T(0) ? v : T(0);
}

}  // namespace detail

// Forward pass with softmax cross-entropy. `batch` has leading dimension n;
// remaining dimensions are flattened into the input vector.
template <typename T>
ForwardResult<T> classifier_forward(const ClassifierParams<T>& params, const Tensor<T>& batch,
                                    std::span<const int> labels, ForwardCache<T>* cache = nullptr) {
    validate_classifier(params);
    require(!batch.shape.empty() && batch.dim(0) >= 1, "forward: empty batch");
    const int n = batch.dim(0);
    const std::int64_t feat = batch.size() / n;
    require(feat == params.input_dim(),
            "forward: sample dim " + std::to_string(feat) + " != classifier input dim " +
                std::to_string(params.input_dim()));
    require(static_cast<int>(labels.size()) == n,
            "forward: " + std::to_string(labels.size()) + " labels for batch of " +
                std::to_string(n));
    for (int i = 0; i < n; ++i)
        require(labels[i] >= 0 && labels[i] < params.n_classes,
                "forward: label " + std::to_string(labels[i]) + " out of range [0," +
                    std::to_string(params.n_classes) + ")");

    Tensor<T> cur({n, static_cast<int>(feat)}, batch.data);
    if (cache) {
        cache->inputs.clear();
        cache->preacts.clear();
        cache->labels.assign(labels.begin(), labels.end());
    }
    for (const auto& layer : params.layers) {
        if (cache) cache->inputs.push_back(cur);
        Tensor<T> next;
        detail::dense_forward(layer, cur, next);
        if (cache) cache->preacts.push_back(next);
        detail::apply_activation(layer.act, next);
        cur = std::move(next);
    }

    const int k = params.n_classes;
    ForwardResult<T> res;
    res.logits = cur;
    res.loss.resize(static_cast<size_t>(n));
    Tensor<T> probs({n, k});
    for (int i = 0; i < n; ++i) {
        const T* z = &cur.data[static_cast<size_t>(i) * k];
        T* p = &probs.data[static_cast<size_t>(i) * k];
        double zmax = static_cast<double>(z[0]);
        for (int c = 1; c < k; ++c) zmax = std::max(zmax, static_cast<double>(z[c]));
        double denom = 0.0;
        for (int c = 0; c < k; ++c) denom += std::exp(static_cast<double>(z[c]) - zmax);
        for (int c = 0; c < k; ++c)
            p[c] = static_cast<T>(std::exp(static_cast<double>(z[c]) - zmax) / denom);
        double li = std::log(denom) - (static_cast<double>(z[labels[i]]) - zmax);
        res.loss[static_cast<size_t>(i)] = static_cast<T>(std::max(li, 0.0));
    }
    require_finite(res.logits, "classifier logits");
    if (cache) {
        cache->probs = std::move(probs);
        cache->loss = res.loss;
    }
    return res;
}

template <typename T>
struct LayerGrads {
    std::vector<Tensor<T>> weight;  // same shapes as the layers
    std::vector<Tensor<T>> bias;
};

// Per-sample unreduced gradients for a set of layers, flattened per layer as
// weight row-major followed by bias: [n, out*in + out].
template <typename T>
struct PerSampleGrads {
    std::vector<int> layer_ids;
    std::vector<Tensor<T>> grads;
};

namespace detail {

// Backprop deltas for every layer: delta[l] is dL_i/d(preact_l), [n, out_l],
// for the plain (unweighted, unreduced) per-sample loss.
template <typename T>
std::vector<Tensor<T>> backprop_deltas(const ClassifierParams<T>& params,
                                       const ForwardCache<T>& cache) {
    const int n = cache.batch();
    const int nl = params.layer_count();
    std::vector<Tensor<T>> delta(static_cast<size_t>(nl));
    const int k = params.n_classes;
    delta[static_cast<size_t>(nl - 1)] = Tensor<T>({n, k});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c)
            delta[static_cast<size_t>(nl - 1)].at(i, c) =
                cache.probs.at(i, c) - (c == cache.labels[static_cast<size_t>(i)] ? T(1) : T(0));

    for (int l = nl - 1; l > 0; --l) {
        const auto& layer = params.layers[static_cast<size_t>(l)];
        const int d = layer.in_dim(), m = layer.out_dim();
        Tensor<T> prev({n, d});
        for (int i = 0; i < n; ++i) {
            const T* dl = &delta[static_cast<size_t>(l)].data[static_cast<size_t>(i) * m];
            T* dp = &prev.data[static_cast<size_t>(i) * d];
            for (int j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int o = 0; o < m; ++o)
                    acc += static_cast<double>(layer.weight.data[static_cast<size_t>(o) * d + j]) *
                           dl[o];
                dp[j] = static_cast<T>(acc);
            }
            // activation derivative of the producing layer
            const auto& below = params.layers[static_cast<size_t>(l - 1)];
            if (below.act == Activation::kRelu) {
                const T* pre =
                    &cache.preacts[static_cast<size_t>(l - 1)].data[static_cast<size_t>(i) * d];
                for (int j = 0; j < d; ++j)
                    if (pre[j] <= T(0)) dp[j] = T(0);
            }
        }
        delta[static_cast<size_t>(l - 1)] = std::move(prev);
    }
    return delta;
}

}  // namespace detail

// Gradient of (1/n) * sum_i weights[i] * L_i over all parameters.
template <typename T>
LayerGrads<T> weighted_mean_grads(const ClassifierParams<T>& params, const ForwardCache<T>& cache,
                                  std::span<const T> weights) {
    const int n = cache.batch();
    require(static_cast<int>(weights.size()) == n, "grads: weight/batch size mismatch");
    auto delta = detail::backprop_deltas(params, cache);
    LayerGrads<T> out;
    const double inv_n = 1.0 / n;
    for (int l = 0; l < params.layer_count(); ++l) {
        const auto& layer = params.layers[static_cast<size_t>(l)];
        const int d = layer.in_dim(), m = layer.out_dim();
        Tensor<T> dw({m, d});
        Tensor<T> db({m});
        std::vector<double> acc_w(static_cast<size_t>(m) * d, 0.0);
        std::vector<double> acc_b(static_cast<size_t>(m), 0.0);
        for (int i = 0; i < n; ++i) {
            const double wi = static_cast<double>(weights[static_cast<size_t>(i)]) * inv_n;
            const T* dl = &delta[static_cast<size_t>(l)].data[static_cast<size_t>(i) * m];
            const T* x = &cache.inputs[static_cast<size_t>(l)].data[static_cast<size_t>(i) * d];
            for (int o = 0; o < m; ++o) {
                const double s = wi * static_cast<double>(dl[o]);
                double* row = &acc_w[static_cast<size_t>(o) * d];
                for (int j = 0; j < d; ++j) row[j] += s * x[j];
                acc_b[static_cast<size_t>(o)] += s;
            }
        }
        for (std::int64_t idx = 0; idx < dw.size(); ++idx)
            dw[idx] = static_cast<T>(acc_w[static_cast<size_t>(idx)]);
        for (int o = 0; o < m; ++o) db[o] = static_cast<T>(acc_b[static_cast<size_t>(o)]);
        out.weight.push_back(std::move(dw));
        out.bias.push_back(std::move(db));
    }
    return out;
}

template <typename T>
PerSampleGrads<T> per_sample_layer_grads(const ClassifierParams<T>& params,
                                         const ForwardCache<T>& cache,
                                         std::span<const int> layer_set) {
    require(!layer_set.empty(), "per-sample grads: empty layer set");
    for (int l : layer_set)
        require(l >= 0 && l < params.layer_count(),
                "per-sample grads: layer " + std::to_string(l) + " out of range");
    const int n = cache.batch();
    auto delta = detail::backprop_deltas(params, cache);
    PerSampleGrads<T> out;
    for (int l : layer_set) {
        const auto& layer = params.layers[static_cast<size_t>(l)];
        const int d = layer.in_dim(), m = layer.out_dim();
        const int pc = m * d + m;
        Tensor<T> g({n, pc});
        for (int i = 0; i < n; ++i) {
            const T* dl = &delta[static_cast<size_t>(l)].data[static_cast<size_t>(i) * m];
            const T* x = &cache.inputs[static_cast<size_t>(l)].data[static_cast<size_t>(i) * d];
            T* dst = &g.data[static_cast<size_t>(i) * pc];
            for (int o = 0; o < m; ++o) {
                T* row = dst + static_cast<std::int64_t>(o) * d;
                for (int j = 0; j < d; ++j) row[j] = dl[o] * x[j];
            }
            for (int o = 0; o < m; ++o) dst[static_cast<std::int64_t>(m) * d + o] = dl[o];
        }
        out.layer_ids.push_back(l);
        out.grads.push_back(std::move(g));
    }
    return out;
}

// Convenience overload running its own forward pass.
template <typename T>
PerSampleGrads<T> per_sample_layer_grads(const ClassifierParams<T>& params, const Tensor<T>& batch,
                                         std::span<const int> labels,
                                         std::span<const int> layer_set) {
    ForwardCache<T> cache;
    classifier_forward(params, batch, labels, &cache);
    return per_sample_layer_grads(params, cache, layer_set);
}

// Per-sample gradient of the loss w.r.t. the input features, [n, input_dim].
template <typename T>
Tensor<T> per_sample_input_grads(const ClassifierParams<T>& params, const ForwardCache<T>& cache) {
    const int n = cache.batch();
    auto delta = detail::backprop_deltas(params, cache);
    const auto& first = params.layers.front();
    const int d = first.in_dim(), m = first.out_dim();
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i) {
        const T* dl = &delta[0].data[static_cast<size_t>(i) * m];
        T* dst = &out.data[static_cast<size_t>(i) * d];
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int o = 0; o < m; ++o)
                acc += static_cast<double>(first.weight.data[static_cast<size_t>(o) * d + j]) *
                       dl[o];
            dst[j] = static_cast<T>(acc);
        }
    }
    return out;
}

// Penultimate-layer activations, [n, width of last hidden layer].
template <typename T>
Tensor<T> forward_features(const ClassifierParams<T>& params, const Tensor<T>& batch) {
    validate_classifier(params);
    require(params.layer_count() >= 2, "features: classifier has no hidden layer");
    const int n = batch.dim(0);
    Tensor<T> cur({n, static_cast<int>(batch.size() / n)}, batch.data);
    for (int l = 0; l + 1 < params.layer_count(); ++l) {
        Tensor<T> next;
        detail::dense_forward(params.layers[static_cast<size_t>(l)], cur, next);
        detail::apply_activation(params.layers[static_cast<size_t>(l)].act, next);
        cur = std::move(next);
    }
    return cur;
}

template <typename T>
void sgd_step(ClassifierParams<T>& params, const LayerGrads<T>& grads, T lr) {
    for (int l = 0; l < params.layer_count(); ++l) {
        auto& layer = params.layers[static_cast<size_t>(l)];
        for (std::int64_t i = 0; i < layer.weight.size(); ++i)
            layer.weight[i] -= lr * grads.weight[static_cast<size_t>(l)][i];
        for (std::int64_t i = 0; i < layer.bias.size(); ++i)
            layer.bias[i] -= lr * grads.bias[static_cast<size_t>(l)][i];
    }
}

// Flat parameter views, used by finite-difference checks and adaptive attacks.
template <typename T>
std::vector<T> flatten_params(const ClassifierParams<T>& p) {
    std::vector<T> out;
    out.reserve(static_cast<size_t>(p.param_count()));
    for (const auto& l : p.layers) {
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.data.begin(), l.bias.data.end());
    }
    return out;
}

template <typename T>
void unflatten_params(ClassifierParams<T>& p, std::span<const T> flat) {
    require(static_cast<std::int64_t>(flat.size()) == p.param_count(),
            "unflatten: parameter count mismatch");
    size_t pos = 0;
    for (auto& l : p.layers) {
        std::copy(flat.begin() + pos, flat.begin() + pos + l.weight.data.size(),
                  l.weight.data.begin());
        pos += l.weight.data.size();
        std::copy(flat.begin() + pos, flat.begin() + pos + l.bias.data.size(),
                  l.bias.data.begin());
        pos += l.bias.data.size();
    }
}

}  // namespace cleansift
