#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cleansift {

// One gradient sampler: flattened layer gradient -> fc1 -> PReLU -> fc2 -> 2
// logits, decided by a Gumbel-softmax draw ("select" vs "skip").
template <typename T>
struct SamplerNet {
    Tensor<T> fc1;  // [hidden, grad_dim]
    T prelu_a = T(0.25);
    Tensor<T> fc2;  // [2, hidden]

    int grad_dim() const { return fc1.dim(1); }
    int hidden() const { return fc1.dim(0); }
};

template <typename T>
struct SamplerParams {
    std::vector<SamplerNet<T>> nets;  // one per sampled layer, shallowest first
    T tau = T(1);

    int count() const { return static_cast<int>(nets.size()); }
};

template <typename T>
SamplerParams<T> make_samplers(const std::vector<int>& grad_dims, std::uint64_t seed, T tau = T(1),
                               int hidden = 16) {
    require(tau > T(0), "sampler: tau must be positive");
    SamplerParams<T> p;
    p.tau = tau;
    for (size_t l = 0; l < grad_dims.size(); ++l) {
        SamplerNet<T> net;
        net.fc1 = Tensor<T>({hidden, grad_dims[l]});
        net.fc2 = Tensor<T>({2, hidden});
        SeededRng rng(derive_seed(seed, "sampler", static_cast<int>(l)));
        double b1 = std::sqrt(6.0 / (grad_dims[l] + hidden));
        for (auto& w : net.fc1.data) w = static_cast<T>(rng.uniform(-b1, b1));
        double b2 = std::sqrt(6.0 / (hidden + 2));
        for (auto& w : net.fc2.data) w = static_cast<T>(rng.uniform(-b2, b2));
        p.nets.push_back(std::move(net));
    }
    return p;
}

template <typename T>
struct SamplerLogitCache {
    std::vector<T> pre;  // fc1 pre-activations
    std::vector<T> hid;  // after PReLU
};

template <typename T>
std::pair<T, T> sampler_logits(const SamplerNet<T>& net, std::span<const T> grad,
                               SamplerLogitCache<T>* cache = nullptr) {
    require(static_cast<int>(grad.size()) == net.grad_dim(),
            "sampler: gradient dim " + std::to_string(grad.size()) + " != expected " +
                std::to_string(net.grad_dim()));
    const int h = net.hidden(), d = net.grad_dim();
    std::vector<T> hid(static_cast<size_t>(h));
    std::vector<T> pre(static_cast<size_t>(h));
    for (int j = 0; j < h; ++j) {
        double acc = 0.0;
        const T* w = &net.fc1.data[static_cast<size_t>(j) * d];
        for (int i = 0; i < d; ++i) acc += static_cast<double>(w[i]) * grad[static_cast<size_t>(i)];
        pre[static_cast<size_t>(j)] = static_cast<T>(acc);
        hid[static_cast<size_t>(j)] =
            acc > 0.0 ? static_cast<T>(acc) : static_cast<T>(net.prelu_a) * static_cast<T>(acc);
    }
    double z0 = 0.0, z1 = 0.0;
    for (int j = 0; j < h; ++j) {
        z0 += static_cast<double>(net.fc2.data[static_cast<size_t>(j)]) * hid[static_cast<size_t>(j)];
        z1 += static_cast<double>(net.fc2.data[static_cast<size_t>(h + j)]) *
              hid[static_cast<size_t>(j)];
    }
    if (cache) {
        cache->pre = std::move(pre);
        cache->hid = std::move(hid);
    }
    return {static_cast<T>(z0), static_cast<T>(z1)};
}

// Gumbel-softmax "select" probability for a pair of logits.
template <typename T>
double gumbel_select_prob(T z0, T z1, double g0, double g1, T tau) {
    const double a = (static_cast<double>(z0) + g0) / static_cast<double>(tau);
    const double b = (static_cast<double>(z1) + g1) / static_cast<double>(tau);
    return 1.0 / (1.0 + std::exp(b - a));
}

// Hard layer selection. Each sampler sees the batch-mean gradient of its
// layer; a layer is selected when the Gumbel-softmax "select" coordinate
// exceeds 0.5. If every sampler rejects, the deepest layer is forced on so
// the meta-gradient never runs over an empty set.
template <typename T>
std::vector<bool> sampler_forward(const SamplerParams<T>& params,
                                  const std::vector<Tensor<T>>& mean_grads, SeededRng& rng) {
    require(static_cast<int>(mean_grads.size()) == params.count(),
            "sampler: expected " + std::to_string(params.count()) + " gradient tensors, got " +
                std::to_string(mean_grads.size()));
    std::vector<bool> selected(mean_grads.size(), false);
    bool any = false;
    for (size_t l = 0; l < mean_grads.size(); ++l) {
        auto [z0, z1] = sampler_logits(params.nets[l],
                                       std::span<const T>(mean_grads[l].data),
                                       static_cast<SamplerLogitCache<T>*>(nullptr));
        double g0 = rng.gumbel();
        double g1 = rng.gumbel();
        bool sel = gumbel_select_prob(z0, z1, g0, g1, params.tau) > 0.5;
        selected[l] = sel;
        any = any || sel;
    }
    if (!any) selected.back() = true;
    return selected;
}

// Gradients of a scalar objective J w.r.t. one sampler's parameters, given
// dJ/dz0 and dJ/dz1.
template <typename T>
struct SamplerNetGrads {
    Tensor<T> fc1;
    T prelu_a = T(0);
    Tensor<T> fc2;
};

template <typename T>
SamplerNetGrads<T> sampler_logit_grads(const SamplerNet<T>& net, std::span<const T> grad,
                                       const SamplerLogitCache<T>& cache, T dz0, T dz1) {
    const int h = net.hidden(), d = net.grad_dim();
    SamplerNetGrads<T> g;
    g.fc1 = Tensor<T>({h, d});
    g.fc2 = Tensor<T>({2, h});
    double da = 0.0;
    for (int j = 0; j < h; ++j) {
        g.fc2.data[static_cast<size_t>(j)] = dz0 * cache.hid[static_cast<size_t>(j)];
        g.fc2.data[static_cast<size_t>(h + j)] = dz1 * cache.hid[static_cast<size_t>(j)];
        const double dh = static_cast<double>(dz0) *
                              static_cast<double>(net.fc2.data[static_cast<size_t>(j)]) +
                          static_cast<double>(dz1) *
                              static_cast<double>(net.fc2.data[static_cast<size_t>(h + j)]);
        const double pre = static_cast<double>(cache.pre[static_cast<size_t>(j)]);
        const double dpre = pre > 0.0 ? dh : dh * static_cast<double>(net.prelu_a);
        if (pre <= 0.0) da += dh * pre;
        T* row = &g.fc1.data[static_cast<size_t>(j) * d];
        for (int i = 0; i < d; ++i)
            row[i] = static_cast<T>(dpre * static_cast<double>(grad[static_cast<size_t>(i)]));
    }
    g.prelu_a = static_cast<T>(da);
    return g;
}

}  // namespace cleansift
