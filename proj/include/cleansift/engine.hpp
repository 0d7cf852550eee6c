#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "tensor.hpp"
#include "weightnet.hpp"

namespace cleansift {

struct HyperParams {
    double alpha = 0.1;        // classifier step size
    double beta = 0.2;         // meta step size (weight net and samplers)
    int batch = 32;            // mini-batch size n
    int u = 2;                 // number of deepest layers with gradient samplers
    int m = 5;                 // number of sifters
    int warmup_epochs = 1;
    int meta_epochs = 1;
    double tau = 1.0;          // Gumbel-softmax temperature
    double epsilon = 0.5;      // assumed upper bound on the poison fraction
    int hidden_width = 64;     // classifier architecture
    int hidden_depth = 2;
    std::uint64_t master_seed = 0;
};

inline void validate_hyperparams(const HyperParams& hp) {
    require(hp.alpha >= 0 && hp.beta >= 0, "hyperparams: need alpha >= 0, beta >= 0");
    require(hp.batch >= 1, "hyperparams: batch must be >= 1");
    require(hp.u >= 1, "hyperparams: u must be >= 1");
    require(hp.m >= 1, "hyperparams: m must be >= 1");
    require(hp.warmup_epochs >= 0 && hp.meta_epochs >= 1, "hyperparams: bad epoch counts");
    require(hp.tau > 0, "hyperparams: tau must be positive");
    require(hp.epsilon > 0 && hp.epsilon <= 0.5, "hyperparams: epsilon must be in (0, 0.5]");
    require(hp.hidden_width >= 1 && hp.hidden_depth >= 1, "hyperparams: bad architecture");
}

// One trained sifter: classifier plus weight-assigning network.
template <typename T>
struct Sifter {
    ClassifierParams<T> theta_star;
    WeightNetParams<T> psi_star;
    std::uint64_t seed = 0;
};

struct DilutionConfig {
    int crop_padding = 4;
    double rotation_max_deg = 15.0;
    double hflip_prob = 0.5;
    int blur_kernel = 3;
    bool enable_crop = true;
    bool enable_rotation = true;
    bool enable_hflip = true;
    bool enable_blur = true;
};

template <typename T>
void validate_dilution(const DilutionConfig& cfg, const ImageDataset<T>& ds) {
    require(cfg.crop_padding >= 0 && cfg.crop_padding < std::min(ds.height, ds.width),
            "dilution: crop padding must be < min(H,W)");
    require(cfg.blur_kernel >= 1 && cfg.blur_kernel % 2 == 1, "dilution: blur kernel must be odd");
    require(cfg.hflip_prob >= 0 && cfg.hflip_prob <= 1, "dilution: hflip_prob in [0,1]");
    require(cfg.rotation_max_deg >= 0, "dilution: rotation_max_deg must be >= 0");
}

// Per-sample weights aggregated over m sifters.
template <typename T>
struct WeightTable {
    Tensor<T> raw;        // [m, N]
    std::vector<T> mean;  // length N

    int sifters() const { return raw.dim(0); }
    int samples() const { return raw.dim(1); }

    void recompute_mean() {
        const int m = sifters(), n = samples();
        mean.assign(static_cast<size_t>(n), T(0));
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int s = 0; s < m; ++s) acc += static_cast<double>(raw.at(s, i));
            mean[static_cast<size_t>(i)] = static_cast<T>(acc / m);
        }
    }
};

struct SiftResult {
    std::vector<std::vector<int>> selected_per_class;  // ascending index per class
    BudgetPlan plan;

    int total() const {
        int t = 0;
        for (const auto& v : selected_per_class) t += static_cast<int>(v.size());
        return t;
    }
    std::vector<int> all() const {
        std::vector<int> out;
        for (const auto& v : selected_per_class) out.insert(out.end(), v.begin(), v.end());
        std::sort(out.begin(), out.end());
        return out;
    }
};

// Observer over the training batch schedule (used by the one-pass tests).
struct TrainObserver {
    virtual void on_batch(const char* phase, std::span<const int> indices) = 0;
    virtual ~TrainObserver() = default;
};

// ---------------------------------------------------------------------------
// Image dilution
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void crop_jitter_plane(const T* in, T* out, int h, int w, int pad, int off_r, int off_c) {
    // zero-pad by `pad`, then take an h x w window at (off_r, off_c)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            int sr = r + off_r - pad;
            int sc = c + off_c - pad;
            out[r * w + c] =
                (sr >= 0 && sr < h && sc >= 0 && sc < w) ? in[sr * w + sc] : T(0);
        }
}

template <typename T>
void rotate_plane(const T* in, T* out, int h, int w, double angle_rad) {
    const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
    const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            // inverse mapping; exposed corners fill with zero
            double dr = r - cr, dc = c - cc;
            double sr = ca * dr + sa * dc + cr;
            double sc = -sa * dr + ca * dc + cc;
            int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
            double fr = sr - r0, fc = sc - c0;
            double acc = 0.0;
            for (int dr2 = 0; dr2 <= 1; ++dr2)
                for (int dc2 = 0; dc2 <= 1; ++dc2) {
                    int rr = r0 + dr2, cc2 = c0 + dc2;
                    if (rr < 0 || rr >= h || cc2 < 0 || cc2 >= w) continue;
                    double wgt = (dr2 ? fr : 1.0 - fr) * (dc2 ? fc : 1.0 - fc);
                    acc += wgt * static_cast<double>(in[rr * w + cc2]);
                }
            out[r * w + c] = static_cast<T>(acc);
        }
}

template <typename T>
void hflip_plane(T* img, int h, int w) {
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w / 2; ++c) std::swap(img[r * w + c], img[r * w + (w - 1 - c)]);
}

inline int reflect_index(int i, int n) {
    if (i < 0) return -i - 1;
    if (i >= n) return 2 * n - 1 - i;
    return i;
}

// Separable Gaussian blur with symmetric reflection padding (preserves the
// image sum for any symmetric normalized kernel).
template <typename T>
void blur_plane(T* img, int h, int w, int k, double sigma, std::vector<T>& scratch) {
    const int half = k / 2;
    std::vector<double> kern(static_cast<size_t>(k));
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        double x = i - half;
        kern[static_cast<size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        total += kern[static_cast<size_t>(i)];
    }
    for (auto& v : kern) v /= total;
    scratch.resize(static_cast<size_t>(h) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i)
                acc += kern[static_cast<size_t>(i)] *
                       static_cast<double>(img[r * w + reflect_index(c + i - half, w)]);
            scratch[static_cast<size_t>(r) * w + c] = static_cast<T>(acc);
        }
    for (int c = 0; c < w; ++c)
        for (int r = 0; r < h; ++r) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i)
                acc += kern[static_cast<size_t>(i)] *
                       static_cast<double>(
                           scratch[static_cast<size_t>(reflect_index(r + i - half, h)) * w + c]);
            img[r * w + c] = static_cast<T>(acc);
        }
}

}  // namespace detail

// Randomized sample dilution: crop, rotation, horizontal flip and Gaussian
// blur, each drawn independently per sample. Labels are untouched; outputs
// are clamped to [0,1].
template <typename T>
ImageDataset<T> dilute(const ImageDataset<T>& ds, const DilutionConfig& cfg, std::uint64_t seed) {
    validate_dataset(ds);
    validate_dilution(cfg, ds);
    ImageDataset<T> out = ds;
    const int h = ds.height, w = ds.width, ch = ds.n_channels;
    std::vector<T> plane(static_cast<size_t>(h) * w);
    std::vector<T> scratch;
    for (int i = 0; i < ds.n_samples; ++i) {
        SeededRng rng(derive_seed(seed, "dilute.img", i));
        int off_r = 0, off_c = 0;
        double angle = 0.0, sigma = 1.0;
        bool flip = false;
        if (cfg.enable_crop && cfg.crop_padding > 0) {
            off_r = rng.uniform_int(2 * cfg.crop_padding + 1);
            off_c = rng.uniform_int(2 * cfg.crop_padding + 1);
        }
        if (cfg.enable_rotation && cfg.rotation_max_deg > 0)
            angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) *
                    (3.14159265358979323846 / 180.0);
        if (cfg.enable_hflip) flip = rng.next_double() < cfg.hflip_prob;
        if (cfg.enable_blur && cfg.blur_kernel > 1) sigma = rng.uniform(0.1, 2.0);

        for (int c = 0; c < ch; ++c) {
            T* img = out.sample(i) + static_cast<std::int64_t>(c) * h * w;
            if (cfg.enable_crop && cfg.crop_padding > 0) {
                std::copy_n(img, static_cast<size_t>(h) * w, plane.begin());
                detail::crop_jitter_plane(plane.data(), img, h, w, cfg.crop_padding, off_r, off_c);
            }
            if (cfg.enable_rotation && cfg.rotation_max_deg > 0) {
                std::copy_n(img, static_cast<size_t>(h) * w, plane.begin());
                detail::rotate_plane(plane.data(), img, h, w, angle);
            }
            if (flip) detail::hflip_plane(img, h, w);
            if (cfg.enable_blur && cfg.blur_kernel > 1)
                detail::blur_plane(img, h, w, cfg.blur_kernel, sigma, scratch);
            for (int p = 0; p < h * w; ++p) img[p] = std::clamp(img[p], T(0), T(1));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training stage
// ---------------------------------------------------------------------------

// One epoch of plain SGD with every sample weight fixed at 1.
template <typename T>
ClassifierParams<T> warmup(ClassifierParams<T> theta, const ImageDataset<T>& ds,
                           const HyperParams& hp, std::uint64_t seed,
                           TrainObserver* obs = nullptr) {
    validate_hyperparams(hp);
    for (int epoch = 0; epoch < hp.warmup_epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(ds.n_samples));
        for (int i = 0; i < ds.n_samples; ++i) order[static_cast<size_t>(i)] = i;
        SeededRng perm(derive_seed(seed, "warmup.order", epoch));
        perm.shuffle(order);
        for (int start = 0; start < ds.n_samples; start += hp.batch) {
            const int n = std::min(hp.batch, ds.n_samples - start);
            std::span<const int> idx(order.data() + start, static_cast<size_t>(n));
            if (obs) obs->on_batch("warmup", idx);
            Tensor<T> batch = gather_batch(ds, idx);
            std::vector<int> labels = gather_labels(ds, idx);
            ForwardCache<T> cache;
            try {
                classifier_forward(theta, batch, labels, &cache);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("warmup: non-finite loss in batch " +
                                         std::to_string(start / hp.batch) + ": " + e.what());
            }
            std::vector<T> ones(static_cast<size_t>(n), T(1));
            auto grads = weighted_mean_grads(theta, cache, std::span<const T>(ones));
            sgd_step(theta, grads, static_cast<T>(hp.alpha));
        }
    }
    return theta;
}

template <typename T>
ClassifierParams<T> warmup(ClassifierParams<T> theta, const ImageDataset<T>& ds,
                           const HyperParams& hp) {
    return warmup(std::move(theta), ds, hp, derive_seed(hp.master_seed, "warmup"));
}

// Gradient of the one-step outer objective
//   (1/n) sum_i (1 - S(L_i(theta');psi)) * L_i(theta')
// with respect to psi, where theta' is the virtual update
//   theta' = theta - alpha * (1/n) sum_j S(L_j(theta);psi) dL_j/dtheta.
// The indirect path through theta' is restricted to `selected_layers`.
template <typename T>
std::vector<T> meta_gradient(const ClassifierParams<T>& theta, const WeightNetParams<T>& psi,
                             const Tensor<T>& batch, std::span<const int> labels, T alpha,
                             std::span<const int> selected_layers) {
    require(!selected_layers.empty(), "meta gradient: empty layer selection");
    const int n = batch.dim(0);
    const int pcount = psi.param_count();

    ForwardCache<T> cache0;
    classifier_forward(theta, batch, labels, &cache0);
    auto wg0 = weightnet_grads(psi, std::span<const T>(cache0.loss));

    auto virt_grads = weighted_mean_grads(theta, cache0, std::span<const T>(wg0.weight));
    ClassifierParams<T> theta_v = theta;
    sgd_step(theta_v, virt_grads, alpha);

    auto g0 = per_sample_layer_grads(theta, cache0, selected_layers);

    ForwardCache<T> cache1;
    classifier_forward(theta_v, batch, labels, &cache1);
    auto wg1 = weightnet_grads(psi, std::span<const T>(cache1.loss));
    auto g1 = per_sample_layer_grads(theta_v, cache1, selected_layers);

    // q_j = sum_i kappa_i * c_ij with c_ij = <grad_i(theta'), grad_j(theta)>
    std::vector<double> kappa(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        kappa[static_cast<size_t>(i)] =
            (1.0 - static_cast<double>(wg1.weight[static_cast<size_t>(i)])) -
            static_cast<double>(wg1.d_input[static_cast<size_t>(i)]) *
                static_cast<double>(cache1.loss[static_cast<size_t>(i)]);
    std::vector<double> q(static_cast<size_t>(n), 0.0);
    for (size_t l = 0; l < g0.grads.size(); ++l) {
        const int pc = g0.grads[l].dim(1);
        for (int i = 0; i < n; ++i) {
            const T* gi = &g1.grads[l].data[static_cast<size_t>(i) * pc];
            for (int j = 0; j < n; ++j) {
                const T* gj = &g0.grads[l].data[static_cast<size_t>(j) * pc];
                double dot = 0.0;
                for (int p = 0; p < pc; ++p) dot += static_cast<double>(gi[p]) * gj[p];
                q[static_cast<size_t>(j)] += kappa[static_cast<size_t>(i)] * dot;
            }
        }
    }

    std::vector<double> g(static_cast<size_t>(pcount), 0.0);
    for (int i = 0; i < n; ++i) {  // direct term
        const double li = static_cast<double>(cache1.loss[static_cast<size_t>(i)]);
        const auto& dp = wg1.d_params[static_cast<size_t>(i)];
        for (int p = 0; p < pcount; ++p) g[static_cast<size_t>(p)] -= li * dp[static_cast<size_t>(p)];
    }
    const double scale = -static_cast<double>(alpha) / n;
    for (int j = 0; j < n; ++j) {  // indirect term
        const double qj = q[static_cast<size_t>(j)] * scale;
        const auto& dp = wg0.d_params[static_cast<size_t>(j)];
        for (int p = 0; p < pcount; ++p) g[static_cast<size_t>(p)] += qj * dp[static_cast<size_t>(p)];
    }
    std::vector<T> out(static_cast<size_t>(pcount));
    for (int p = 0; p < pcount; ++p) out[static_cast<size_t>(p)] = static_cast<T>(g[static_cast<size_t>(p)] / n);
    return out;
}

// Trains one sifter: warm-up epoch(s), then one pass of the four-step online
// round per meta epoch (virtual update, gradient sampling, meta-update,
// actual update). The weight net is moved up the outer splitting objective so
// high-loss samples are pushed toward low weights.
template <typename T>
Sifter<T> train_sifter(const ImageDataset<T>& ds, const HyperParams& hp, std::uint64_t sifter_seed,
                       TrainObserver* obs = nullptr) {
    validate_dataset(ds);
    validate_hyperparams(hp);
    std::vector<int> hidden(static_cast<size_t>(hp.hidden_depth), hp.hidden_width);
    auto theta = make_classifier<T>(static_cast<int>(ds.sample_dim()), hidden, ds.n_classes,
                                    derive_seed(sifter_seed, "theta"));
    auto psi = make_weightnet<T>(derive_seed(sifter_seed, "psi"));
    const int n_layers = theta.layer_count();
    require(hp.u <= n_layers, "train_sifter: u = " + std::to_string(hp.u) + " exceeds the " +
                                  std::to_string(n_layers) + " classifier layers");
    const int u = hp.u;
    std::vector<int> candidates;  // the last u layers, shallowest first
    for (int l = n_layers - u; l < n_layers; ++l) candidates.push_back(l);
    std::vector<int> grad_dims;
    for (int l : candidates)
        grad_dims.push_back(static_cast<int>(theta.layers[static_cast<size_t>(l)].param_count()));
    auto samplers = make_samplers<T>(grad_dims, derive_seed(sifter_seed, "gamma"),
                                     static_cast<T>(hp.tau));
    SeededRng gumbel_rng(derive_seed(sifter_seed, "gumbel"));

    theta = warmup(std::move(theta), ds, hp, derive_seed(sifter_seed, "warmup"), obs);

    const T alpha = static_cast<T>(hp.alpha);
    const T beta = static_cast<T>(hp.beta);
    const int pcount = psi.param_count();
    int batch_counter = 0;

    for (int epoch = 0; epoch < hp.meta_epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(ds.n_samples));
        for (int i = 0; i < ds.n_samples; ++i) order[static_cast<size_t>(i)] = i;
        SeededRng perm(derive_seed(sifter_seed, "meta.order", epoch));
        perm.shuffle(order);
        for (int start = 0; start < ds.n_samples; start += hp.batch, ++batch_counter) {
            const int n = std::min(hp.batch, ds.n_samples - start);
            std::span<const int> idx(order.data() + start, static_cast<size_t>(n));
            if (obs) obs->on_batch("meta", idx);
            Tensor<T> batch = gather_batch(ds, idx);
            std::vector<int> labels = gather_labels(ds, idx);

            // --- step 1: virtual update ---
            ForwardCache<T> cache0;
            try {
                classifier_forward(theta, batch, labels, &cache0);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("train_sifter: non-finite loss in batch " +
                                         std::to_string(batch_counter) + ": " + e.what());
            }
            for (T l : cache0.loss)
                if (!std::isfinite(static_cast<double>(l)))
                    throw std::runtime_error("train_sifter: non-finite loss in batch " +
                                             std::to_string(batch_counter));
            auto wg0 = weightnet_grads(psi, std::span<const T>(cache0.loss));
            auto virt = weighted_mean_grads(theta, cache0, std::span<const T>(wg0.weight));
            ClassifierParams<T> theta_v = theta;
            sgd_step(theta_v, virt, alpha);

            auto g0 = per_sample_layer_grads(theta, cache0, candidates);

            ForwardCache<T> cache1;
            classifier_forward(theta_v, batch, labels, &cache1);
            auto wg1 = weightnet_grads(psi, std::span<const T>(cache1.loss));
            auto g1 = per_sample_layer_grads(theta_v, cache1, candidates);

            // shared meta-gradient pieces
            std::vector<double> kappa(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i)
                kappa[static_cast<size_t>(i)] =
                    (1.0 - static_cast<double>(wg1.weight[static_cast<size_t>(i)])) -
                    static_cast<double>(wg1.d_input[static_cast<size_t>(i)]) *
                        static_cast<double>(cache1.loss[static_cast<size_t>(i)]);

            std::vector<std::vector<double>> q_per_layer(candidates.size());
            for (size_t l = 0; l < candidates.size(); ++l) {
                auto& q = q_per_layer[l];
                q.assign(static_cast<size_t>(n), 0.0);
                const int pc = g0.grads[l].dim(1);
                for (int i = 0; i < n; ++i) {
                    const T* gi = &g1.grads[l].data[static_cast<size_t>(i) * pc];
                    for (int j = 0; j < n; ++j) {
                        const T* gj = &g0.grads[l].data[static_cast<size_t>(j) * pc];
                        double dot = 0.0;
                        for (int p = 0; p < pc; ++p) dot += static_cast<double>(gi[p]) * gj[p];
                        q[static_cast<size_t>(j)] += kappa[static_cast<size_t>(i)] * dot;
                    }
                }
            }

            std::vector<double> direct(static_cast<size_t>(pcount), 0.0);
            for (int i = 0; i < n; ++i) {
                const double li = static_cast<double>(cache1.loss[static_cast<size_t>(i)]);
                const auto& dp = wg1.d_params[static_cast<size_t>(i)];
                for (int p = 0; p < pcount; ++p)
                    direct[static_cast<size_t>(p)] -= li * dp[static_cast<size_t>(p)] / n;
            }
            std::vector<std::vector<double>> e_layers(candidates.size());
            const double iscale = -static_cast<double>(alpha) / (static_cast<double>(n) * n);
            for (size_t l = 0; l < candidates.size(); ++l) {
                auto& e = e_layers[l];
                e.assign(static_cast<size_t>(pcount), 0.0);
                for (int j = 0; j < n; ++j) {
                    const double qj = q_per_layer[l][static_cast<size_t>(j)] * iscale;
                    const auto& dp = wg0.d_params[static_cast<size_t>(j)];
                    for (int p = 0; p < pcount; ++p)
                        e[static_cast<size_t>(p)] += qj * dp[static_cast<size_t>(p)];
                }
            }
            std::vector<double> g_ref = direct;
            for (const auto& e : e_layers)
                for (int p = 0; p < pcount; ++p) g_ref[static_cast<size_t>(p)] += e[static_cast<size_t>(p)];

            // --- step 2: gradient sampling ---
            // Sampler input is the batch-mean per-layer gradient. Each
            // sampler gets a first-order Gumbel-softmax update on the outer
            // objective before the selection draw.
            std::vector<Tensor<T>> mean_grads;
            for (size_t l = 0; l < candidates.size(); ++l) {
                const int pc = g0.grads[l].dim(1);
                Tensor<T> mg({pc});
                for (int p = 0; p < pc; ++p) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i)
                        acc += static_cast<double>(g0.grads[l].data[static_cast<size_t>(i) * pc + p]);
                    mg[p] = static_cast<T>(acc / n);
                }
                mean_grads.push_back(std::move(mg));
            }
            if (hp.beta > 0) {
                for (size_t l = 0; l < candidates.size(); ++l) {
                    double edotref = 0.0;
                    for (int p = 0; p < pcount; ++p)
                        edotref += e_layers[l][static_cast<size_t>(p)] * g_ref[static_cast<size_t>(p)];
                    SamplerLogitCache<T> lc;
                    auto [z0, z1] = sampler_logits(samplers.nets[l],
                                                   std::span<const T>(mean_grads[l].data), &lc);
                    double gu0 = gumbel_rng.gumbel();
                    double gu1 = gumbel_rng.gumbel();
                    double y = gumbel_select_prob(z0, z1, gu0, gu1, samplers.tau);
                    // dJ/dz for J = <stop_grad(g_ref), soft meta-gradient>
                    double dJdy = edotref;
                    double dydz = y * (1.0 - y) / static_cast<double>(samplers.tau);
                    T dz0 = static_cast<T>(dJdy * dydz);
                    T dz1 = static_cast<T>(-dJdy * dydz);
                    auto sg = sampler_logit_grads(samplers.nets[l],
                                                  std::span<const T>(mean_grads[l].data), lc, dz0,
                                                  dz1);
                    auto& net = samplers.nets[l];
                    for (std::int64_t p = 0; p < net.fc1.size(); ++p)
                        net.fc1[p] += beta * sg.fc1[p];
                    for (std::int64_t p = 0; p < net.fc2.size(); ++p)
                        net.fc2[p] += beta * sg.fc2[p];
                    net.prelu_a += beta * sg.prelu_a;
                }
            }
            std::vector<bool> selected = sampler_forward(samplers, mean_grads, gumbel_rng);

            // --- step 3: meta-update of psi ---
            if (hp.beta > 0) {
                std::vector<double> gpsi = direct;
                for (size_t l = 0; l < candidates.size(); ++l)
                    if (selected[l])
                        for (int p = 0; p < pcount; ++p)
                            gpsi[static_cast<size_t>(p)] += e_layers[l][static_cast<size_t>(p)];
                // ascend the outer splitting objective
                auto flat = flatten_weightnet(psi);
                for (int p = 0; p < pcount; ++p)
                    flat[static_cast<size_t>(p)] += beta * static_cast<T>(gpsi[static_cast<size_t>(p)]);
                unflatten_weightnet(psi, std::span<const T>(flat));
            }

            // --- step 4: actual update with the refreshed weights ---
            auto new_weights = weightnet_forward(psi, std::span<const T>(cache0.loss));
            auto actual = weighted_mean_grads(theta, cache0, std::span<const T>(new_weights));
            sgd_step(theta, actual, alpha);
        }
    }
    Sifter<T> out;
    out.theta_star = std::move(theta);
    out.psi_star = std::move(psi);
    out.seed = sifter_seed;
    return out;
}

// ---------------------------------------------------------------------------
// Identification stage
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<T> dataset_losses(const ClassifierParams<T>& theta, const ImageDataset<T>& ds) {
    std::vector<T> losses(static_cast<size_t>(ds.n_samples));
    const int chunk = 256;
    for (int start = 0; start < ds.n_samples; start += chunk) {
        const int n = std::min(chunk, ds.n_samples - start);
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = start + i;
        Tensor<T> batch = gather_batch(ds, idx);
        std::vector<int> labels = gather_labels(ds, idx);
        auto res = classifier_forward(theta, batch, labels);
        for (int i = 0; i < n; ++i) losses[static_cast<size_t>(start + i)] = res.loss[static_cast<size_t>(i)];
    }
    return losses;
}

}  // namespace detail

// Each sifter scores its own diluted copy of the dataset; the table mean is
// the arithmetic mean across sifters.
template <typename T>
WeightTable<T> identify_with_seeds(const ImageDataset<T>& ds, const std::vector<Sifter<T>>& sifters,
                                   const DilutionConfig& cfg,
                                   std::span<const std::uint64_t> dilution_seeds) {
    require(!sifters.empty(), "identify: need at least one sifter");
    require(dilution_seeds.size() == sifters.size(), "identify: one dilution seed per sifter");
    WeightTable<T> table;
    table.raw = Tensor<T>({static_cast<int>(sifters.size()), ds.n_samples});
    for (size_t s = 0; s < sifters.size(); ++s) {
        ImageDataset<T> perturbed = dilute(ds, cfg, dilution_seeds[s]);
        auto losses = detail::dataset_losses(sifters[s].theta_star, perturbed);
        auto weights = weightnet_forward(sifters[s].psi_star, std::span<const T>(losses));
        for (int i = 0; i < ds.n_samples; ++i) table.raw.at(static_cast<int>(s), i) = weights[static_cast<size_t>(i)];
    }
    table.recompute_mean();
    return table;
}

template <typename T>
WeightTable<T> identify(const ImageDataset<T>& ds, const std::vector<Sifter<T>>& sifters,
                        const DilutionConfig& cfg, std::uint64_t seed) {
    std::vector<std::uint64_t> seeds;
    for (size_t s = 0; s < sifters.size(); ++s)
        seeds.push_back(derive_seed(seed, "dilute", static_cast<int>(s)));
    return identify_with_seeds(ds, sifters, cfg, std::span<const std::uint64_t>(seeds));
}

// Per-class top-b_k selection by mean weight; ties break toward the lower
// index. Selection depends on the weights only through per-class rank order.
template <typename T>
SiftResult select_top_weights(const ImageDataset<T>& ds, const std::vector<T>& mean_weights,
                              const BudgetPlan& plan) {
    require(static_cast<int>(mean_weights.size()) == ds.n_samples,
            "select: weight table size mismatch");
    ClassIndex ci = ClassIndex::build(ds);
    require(static_cast<int>(plan.per_class.size()) == ds.n_classes,
            "select: budget plan class count mismatch");
    SiftResult res;
    res.plan = plan;
    res.selected_per_class.resize(static_cast<size_t>(ds.n_classes));
    for (int k = 0; k < ds.n_classes; ++k) {
        std::vector<int> idx = ci.by_class[static_cast<size_t>(k)];
        const int bk = plan.per_class[static_cast<size_t>(k)];
        require(bk <= static_cast<int>(idx.size()),
                "select: budget " + std::to_string(bk) + " exceeds class " + std::to_string(k) +
                    " size " + std::to_string(idx.size()));
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            T wa = mean_weights[static_cast<size_t>(a)], wb = mean_weights[static_cast<size_t>(b)];
            if (wa != wb) return wa > wb;
            return a < b;
        });
        idx.resize(static_cast<size_t>(bk));
        std::sort(idx.begin(), idx.end());
        res.selected_per_class[static_cast<size_t>(k)] = std::move(idx);
    }
    return res;
}

template <typename T>
struct SiftOutput {
    SiftResult result;
    WeightTable<T> table;
    std::vector<Sifter<T>> sifters;
};

// End-to-end pipeline: train m sifters from seeds derived from the master
// seed, identify, then select the per-class top-weight samples.
template <typename T>
SiftOutput<T> sift(const ImageDataset<T>& ds, const HyperParams& hp, const BudgetPlan& budget,
                   const DilutionConfig& cfg, TrainObserver* obs = nullptr) {
    validate_hyperparams(hp);
    SiftOutput<T> out;
    for (int s = 0; s < hp.m; ++s)
        out.sifters.push_back(train_sifter(ds, hp, derive_seed(hp.master_seed, "sifter", s), obs));
    out.table = identify(ds, out.sifters, cfg, derive_seed(hp.master_seed, "identify"));
    out.result = select_top_weights(ds, out.table.mean, budget);
    return out;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

template <typename T>
void write_weights_csv(const std::string& path, const ImageDataset<T>& ds,
                       const WeightTable<T>& table, const SiftResult* selection = nullptr) {
    std::vector<char> sel(static_cast<size_t>(ds.n_samples), 0);
    if (selection)
        for (const auto& cls : selection->selected_per_class)
            for (int i : cls) sel[static_cast<size_t>(i)] = 1;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "index,class,weight,selected\n";
    char buf[64];
    for (int i = 0; i < ds.n_samples; ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(table.mean[static_cast<size_t>(i)]));
        os << i << ',' << ds.labels[static_cast<size_t>(i)] << ',' << buf << ','
           << static_cast<int>(sel[static_cast<size_t>(i)]) << '\n';
    }
}

inline void write_selection_csv(const std::string& path, const SiftResult& res) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "class,index\n";
    for (size_t k = 0; k < res.selected_per_class.size(); ++k)
        for (int i : res.selected_per_class[k]) os << k << ',' << i << '\n';
}

}  // namespace cleansift
