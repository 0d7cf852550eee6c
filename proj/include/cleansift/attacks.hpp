#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "engine.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace cleansift {

// Ground-truth record of what was poisoned. Evaluation-only; the sifter
// never sees it.
struct ManifestEntry {
    int index = 0;
    std::string attack;
    int original_label = 0;
    int final_label = 0;
};

struct PoisonManifest {
    std::vector<ManifestEntry> entries;

    bool contains(int index) const {
        for (const auto& e : entries)
            if (e.index == index) return true;
        return false;
    }
    std::vector<int> indices() const {
        std::vector<int> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.index);
        std::sort(out.begin(), out.end());
        return out;
    }
    std::set<int> index_set() const {
        std::set<int> out;
        for (const auto& e : entries) out.insert(e.index);
        return out;
    }
    // Poison fraction per class of the poisoned dataset (by final label).
    template <typename T>
    std::vector<double> per_class_ratio(const ImageDataset<T>& ds) const {
        ClassIndex ci = ClassIndex::build(ds);
        std::vector<int> poi(static_cast<size_t>(ds.n_classes), 0);
        for (const auto& e : entries) ++poi[static_cast<size_t>(ds.labels[static_cast<size_t>(e.index)])];
        std::vector<double> out(static_cast<size_t>(ds.n_classes));
        for (int k = 0; k < ds.n_classes; ++k)
            out[static_cast<size_t>(k)] = static_cast<double>(poi[static_cast<size_t>(k)]) /
                                          std::max(1, ci.class_size(k));
        return out;
    }
    double overall_ratio(int n_samples) const {
        return static_cast<double>(entries.size()) / n_samples;
    }
};

enum class TriggerKind { kPatch, kBlend, kAdditive };

template <typename T = float>
struct TriggerSpec {
    TriggerKind kind = TriggerKind::kPatch;
    Tensor<T> pattern;       // patch: [C,ph,pw]; blend/additive: [C,H,W]
    int row = 0, col = 0;    // patch position
    double blend_alpha = 0.2;
    double linf_bound = 16.0 / 255.0;
};

// Uniform white square patch of the given size.
template <typename T = float>
TriggerSpec<T> white_patch(int channels, int size, int row, int col) {
    TriggerSpec<T> t;
    t.kind = TriggerKind::kPatch;
    t.pattern = Tensor<T>({channels, size, size});
    for (auto& v : t.pattern.data) v = T(1);
    t.row = row;
    t.col = col;
    return t;
}

namespace detail {

inline int count_from_ratio(double ratio, int pool, const char* what) {
    require(ratio > 0.0 && ratio < 1.0, std::string(what) + ": ratio must be in (0,1)");
    int n = static_cast<int>(std::lround(ratio * pool));
    require(n >= 1, std::string(what) + ": ratio " + std::to_string(ratio) + " of " +
                        std::to_string(pool) + " samples selects nothing");
    return n;
}

inline std::vector<int> sample_without_replacement(std::vector<int> pool, int count,
                                                   SeededRng& rng) {
    rng.shuffle(pool);
    pool.resize(static_cast<size_t>(count));
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace detail

// Relabels a fraction of one class into a target class; features untouched.
template <typename T>
std::pair<ImageDataset<T>, PoisonManifest> flip_labels_targeted(const ImageDataset<T>& ds,
                                                                int source_class, int target_class,
                                                                double ratio, std::uint64_t seed) {
    validate_dataset(ds);
    require(source_class != target_class, "targeted flip: source == target");
    require(source_class >= 0 && source_class < ds.n_classes && target_class >= 0 &&
                target_class < ds.n_classes,
            "targeted flip: class out of range");
    ClassIndex ci = ClassIndex::build(ds);
    const int count =
        detail::count_from_ratio(ratio, ci.class_size(source_class), "targeted flip");
    require(count < ci.class_size(source_class),
            "targeted flip: would empty class " + std::to_string(source_class));
    SeededRng rng(derive_seed(seed, "flip_targeted"));
    auto chosen =
        detail::sample_without_replacement(ci.by_class[static_cast<size_t>(source_class)], count, rng);
    ImageDataset<T> out = ds;
    PoisonManifest man;
    for (int i : chosen) {
        out.labels[static_cast<size_t>(i)] = target_class;
        man.entries.push_back({i, "flip_targeted", source_class, target_class});
    }
    return {std::move(out), std::move(man)};
}

// Gives round(ratio*N) samples a uniformly drawn different label.
template <typename T>
std::pair<ImageDataset<T>, PoisonManifest> flip_labels_random(const ImageDataset<T>& ds,
                                                              double ratio, std::uint64_t seed) {
    validate_dataset(ds);
    const int count = detail::count_from_ratio(ratio, ds.n_samples, "random flip");
    SeededRng rng(derive_seed(seed, "flip_random"));
    std::vector<int> all(static_cast<size_t>(ds.n_samples));
    for (int i = 0; i < ds.n_samples; ++i) all[static_cast<size_t>(i)] = i;
    auto chosen = detail::sample_without_replacement(std::move(all), count, rng);
    ImageDataset<T> out = ds;
    PoisonManifest man;
    for (int i : chosen) {
        const int orig = ds.labels[static_cast<size_t>(i)];
        int wrong = rng.uniform_int(ds.n_classes - 1);
        if (wrong >= orig) ++wrong;  // uniform over the K-1 other classes
        out.labels[static_cast<size_t>(i)] = wrong;
        man.entries.push_back({i, "flip_random", orig, wrong});
    }
    validate_dataset(out);
    return {std::move(out), std::move(man)};
}

enum class PatchMode { kDirtyLabel, kCleanLabel };

// Stamps a patch trigger. Dirty mode draws from non-target classes and
// relabels to the target (`ratio` = poison fraction of the target class after
// the attack); clean mode stamps within the target class, labels untouched.
template <typename T>
std::pair<ImageDataset<T>, PoisonManifest> apply_patch_trigger(const ImageDataset<T>& ds,
                                                               const TriggerSpec<T>& trig,
                                                               int target_class, double ratio,
                                                               PatchMode mode, std::uint64_t seed) {
    validate_dataset(ds);
    require(trig.kind == TriggerKind::kPatch, "patch attack: trigger kind must be patch");
    require(trig.pattern.shape.size() == 3 && trig.pattern.dim(0) == ds.n_channels,
            "patch attack: pattern must be [C,ph,pw] with matching channels");
    const int ph = trig.pattern.dim(1), pw = trig.pattern.dim(2);
    require(trig.row >= 0 && trig.col >= 0 && trig.row + ph <= ds.height &&
                trig.col + pw <= ds.width,
            "patch attack: patch " + std::to_string(ph) + "x" + std::to_string(pw) + " at (" +
                std::to_string(trig.row) + "," + std::to_string(trig.col) +
                ") out of image bounds");
    require(target_class >= 0 && target_class < ds.n_classes, "patch attack: bad target class");

    ClassIndex ci = ClassIndex::build(ds);
    SeededRng rng(derive_seed(seed, "patch"));
    std::vector<int> chosen;
    if (mode == PatchMode::kDirtyLabel) {
        std::vector<int> pool;
        for (int k = 0; k < ds.n_classes; ++k)
            if (k != target_class)
                pool.insert(pool.end(), ci.by_class[static_cast<size_t>(k)].begin(),
                            ci.by_class[static_cast<size_t>(k)].end());
        require(ratio > 0.0 && ratio < 1.0, "patch attack: ratio must be in (0,1)");
        // poison count q with q / (|D_t| + q) = ratio
        int q = static_cast<int>(
            std::lround(ratio * ci.class_size(target_class) / (1.0 - ratio)));
        require(q >= 1, "patch attack: ratio selects nothing");
        require(q <= static_cast<int>(pool.size()), "patch attack: not enough non-target samples");
        chosen = detail::sample_without_replacement(std::move(pool), q, rng);
    } else {
        const int q = detail::count_from_ratio(ratio, ci.class_size(target_class), "patch attack");
        chosen = detail::sample_without_replacement(ci.by_class[static_cast<size_t>(target_class)],
                                                    q, rng);
    }
    ImageDataset<T> out = ds;
    PoisonManifest man;
    const int hw = ds.height * ds.width;
    for (int i : chosen) {
        T* img = out.sample(i);
        for (int c = 0; c < ds.n_channels; ++c)
            for (int r = 0; r < ph; ++r)
                for (int cc = 0; cc < pw; ++cc)
                    img[c * hw + (trig.row + r) * ds.width + (trig.col + cc)] = std::clamp(
                        trig.pattern.data[static_cast<size_t>((c * ph + r) * pw + cc)], T(0), T(1));
        const int orig = ds.labels[static_cast<size_t>(i)];
        if (mode == PatchMode::kDirtyLabel) out.labels[static_cast<size_t>(i)] = target_class;
        man.entries.push_back({i, mode == PatchMode::kDirtyLabel ? "patch_dirty" : "patch_clean",
                               orig, out.labels[static_cast<size_t>(i)]});
    }
    validate_dataset(out);
    return {std::move(out), std::move(man)};
}

// Blends a full-image pattern: x' = (1-alpha) x + alpha pattern, then
// relabels to the target class (dirty-label).
template <typename T>
std::pair<ImageDataset<T>, PoisonManifest> apply_blended_trigger(const ImageDataset<T>& ds,
                                                                 const TriggerSpec<T>& trig,
                                                                 int target_class, double ratio,
                                                                 std::uint64_t seed) {
    validate_dataset(ds);
    require(trig.kind == TriggerKind::kBlend, "blended attack: trigger kind must be blend");
    require(trig.pattern.size() == ds.sample_dim(),
            "blended attack: pattern must be a full image");
    require(trig.blend_alpha >= 0.0 && trig.blend_alpha <= 1.0,
            "blended attack: alpha must be in [0,1]");
    require(target_class >= 0 && target_class < ds.n_classes, "blended attack: bad target class");
    ClassIndex ci = ClassIndex::build(ds);
    std::vector<int> pool;
    for (int k = 0; k < ds.n_classes; ++k)
        if (k != target_class)
            pool.insert(pool.end(), ci.by_class[static_cast<size_t>(k)].begin(),
                        ci.by_class[static_cast<size_t>(k)].end());
    require(ratio > 0.0 && ratio < 1.0, "blended attack: ratio must be in (0,1)");
    int q = static_cast<int>(std::lround(ratio * ci.class_size(target_class) / (1.0 - ratio)));
    require(q >= 1, "blended attack: ratio selects nothing");
    require(q <= static_cast<int>(pool.size()), "blended attack: not enough non-target samples");
    SeededRng rng(derive_seed(seed, "blend"));
    auto chosen = detail::sample_without_replacement(std::move(pool), q, rng);
    ImageDataset<T> out = ds;
    PoisonManifest man;
    const T a = static_cast<T>(trig.blend_alpha);
    for (int i : chosen) {
        T* img = out.sample(i);
        for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
            img[p] = std::clamp(static_cast<T>((T(1) - a) * img[p] + a * trig.pattern[p]), T(0),
                                T(1));
        man.entries.push_back({i, "blended", ds.labels[static_cast<size_t>(i)], target_class});
        out.labels[static_cast<size_t>(i)] = target_class;
    }
    validate_dataset(out);
    return {std::move(out), std::move(man)};
}

// Clean-label additive trigger: x' = clamp(x + pattern) within the target
// class only; labels untouched. The pattern must satisfy the L-inf bound.
template <typename T>
std::pair<ImageDataset<T>, PoisonManifest> apply_additive_trigger(const ImageDataset<T>& ds,
                                                                  const TriggerSpec<T>& trig,
                                                                  int target_class, double ratio,
                                                                  std::uint64_t seed) {
    validate_dataset(ds);
    require(trig.kind == TriggerKind::kAdditive, "additive attack: trigger kind must be additive");
    require(trig.pattern.size() == ds.sample_dim(),
            "additive attack: pattern must be a full image");
    for (T v : trig.pattern.data)
        require(std::abs(static_cast<double>(v)) <= trig.linf_bound * (1.0 + 1e-5) + 1e-7,
                "additive attack: pattern exceeds L-inf bound " + std::to_string(trig.linf_bound));
    require(target_class >= 0 && target_class < ds.n_classes, "additive attack: bad target class");
    ClassIndex ci = ClassIndex::build(ds);
    const int q = detail::count_from_ratio(ratio, ci.class_size(target_class), "additive attack");
    SeededRng rng(derive_seed(seed, "additive"));
    auto chosen =
        detail::sample_without_replacement(ci.by_class[static_cast<size_t>(target_class)], q, rng);
    ImageDataset<T> out = ds;
    PoisonManifest man;
    for (int i : chosen) {
        T* img = out.sample(i);
        for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
            img[p] = std::clamp(static_cast<T>(img[p] + trig.pattern[p]), T(0), T(1));
        man.entries.push_back(
            {i, "additive", ds.labels[static_cast<size_t>(i)], ds.labels[static_cast<size_t>(i)]});
    }
    return {std::move(out), std::move(man)};
}

// ---------------------------------------------------------------------------
// Adaptive attacks (adversarial noise on the poisoned samples)
// ---------------------------------------------------------------------------

struct AdaptiveAttackReport {
    double objective_before = 0.0;
    double objective_after = 0.0;
    std::vector<double> checkpoints;  // objective every ~10% of the steps
    bool non_converging = false;      // loss increased over the run (warning)
};

namespace detail {

// Adam over per-sample pixel perturbations (the optimizer the adaptive
// attacks are defined with; raw-gradient steps would be unbounded on a
// confident model).
struct AdamState {
    std::vector<double> m, v;
    int t = 0;

    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}

    // returns the update to *subtract* for descent on the objective
    double step(size_t i, double grad, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m[i] = b1 * m[i] + (1.0 - b1) * grad;
        v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
        const double mh = m[i] / (1.0 - std::pow(b1, t));
        const double vh = v[i] / (1.0 - std::pow(b2, t));
        return lr * mh / (std::sqrt(vh) + eps);
    }
    void advance() { ++t; }
};

}  // namespace detail

// Perturbs each poisoned sample by plain gradient descent on its own loss
// under a frozen model trained on the clean portion. Features stay in [0,1].
template <typename T>
std::pair<ImageDataset<T>, AdaptiveAttackReport> adv_noise_clean_model(
    const ImageDataset<T>& ds, const PoisonManifest& manifest,
    const ClassifierParams<T>& clean_classifier, int steps, double lr) {
    validate_dataset(ds);
    require(steps >= 0 && lr > 0, "adv noise: need steps >= 0 and lr > 0");
    ImageDataset<T> out = ds;
    AdaptiveAttackReport rep;
    std::vector<int> idx = manifest.indices();
    if (idx.empty()) return {std::move(out), rep};
    const int checkpoint_every = std::max(1, steps / 10);

    auto mean_loss = [&]() {
        Tensor<T> batch = gather_batch(out, idx);
        std::vector<int> labels = gather_labels(out, idx);
        auto res = classifier_forward(clean_classifier, batch, labels);
        double acc = 0.0;
        for (T l : res.loss) acc += static_cast<double>(l);
        return acc / static_cast<double>(idx.size());
    };
    rep.objective_before = mean_loss();
    rep.checkpoints.push_back(rep.objective_before);
    std::vector<int> labels = gather_labels(out, idx);
    const std::int64_t d = out.sample_dim();
    detail::AdamState adam(idx.size() * static_cast<size_t>(d));
    for (int step = 0; step < steps; ++step) {
        adam.advance();
        Tensor<T> batch = gather_batch(out, idx);
        ForwardCache<T> cache;
        classifier_forward(clean_classifier, batch, labels, &cache);
        Tensor<T> gin = per_sample_input_grads(clean_classifier, cache);
        for (size_t i = 0; i < idx.size(); ++i) {
            T* img = out.sample(idx[i]);
            const T* g = &gin.data[i * static_cast<size_t>(d)];
            for (std::int64_t p = 0; p < d; ++p) {
                const double upd = adam.step(i * static_cast<size_t>(d) + static_cast<size_t>(p),
                                             static_cast<double>(g[p]), lr);
                img[p] = std::clamp(static_cast<T>(img[p] - static_cast<T>(upd)), T(0), T(1));
            }
        }
        if ((step + 1) % checkpoint_every == 0 || step + 1 == steps)
            rep.checkpoints.push_back(mean_loss());
    }
    rep.objective_after = rep.checkpoints.back();
    rep.non_converging = rep.objective_after > rep.objective_before;
    return {std::move(out), rep};
}

// Perturbs each poisoned sample by gradient ascent on its mean sifter-
// assigned weight. Reports the mean aggregated weight before/after.
template <typename T>
std::pair<ImageDataset<T>, AdaptiveAttackReport> adv_noise_sifters(
    const ImageDataset<T>& ds, const PoisonManifest& manifest,
    const std::vector<Sifter<T>>& sifters, int steps, double lr) {
    validate_dataset(ds);
    require(!sifters.empty(), "adv noise: need at least one sifter");
    require(steps >= 0 && lr > 0, "adv noise: need steps >= 0 and lr > 0");
    ImageDataset<T> out = ds;
    AdaptiveAttackReport rep;
    std::vector<int> idx = manifest.indices();
    if (idx.empty()) return {std::move(out), rep};
    const int checkpoint_every = std::max(1, steps / 10);
    std::vector<int> labels = gather_labels(out, idx);
    const std::int64_t d = out.sample_dim();

    auto mean_weight = [&]() {
        Tensor<T> batch = gather_batch(out, idx);
        double acc = 0.0;
        for (const auto& s : sifters) {
            auto res = classifier_forward(s.theta_star, batch, labels);
            auto w = weightnet_forward(s.psi_star, std::span<const T>(res.loss));
            for (T v : w) acc += static_cast<double>(v);
        }
        return acc / (static_cast<double>(idx.size()) * sifters.size());
    };
    rep.objective_before = mean_weight();
    rep.checkpoints.push_back(rep.objective_before);
    detail::AdamState adam(idx.size() * static_cast<size_t>(d));
    for (int step = 0; step < steps; ++step) {
        adam.advance();
        Tensor<T> batch = gather_batch(out, idx);
        std::vector<double> ascent(static_cast<size_t>(idx.size() * static_cast<size_t>(d)), 0.0);
        for (const auto& s : sifters) {
            ForwardCache<T> cache;
            classifier_forward(s.theta_star, batch, labels, &cache);
            auto wg = weightnet_grads(s.psi_star, std::span<const T>(cache.loss));
            Tensor<T> gin = per_sample_input_grads(s.theta_star, cache);
            for (size_t i = 0; i < idx.size(); ++i) {
                const double chain = static_cast<double>(wg.d_input[i]) / sifters.size();
                const T* g = &gin.data[i * static_cast<size_t>(d)];
                for (std::int64_t p = 0; p < d; ++p)
                    ascent[i * static_cast<size_t>(d) + static_cast<size_t>(p)] +=
                        chain * static_cast<double>(g[p]);
            }
        }
        for (size_t i = 0; i < idx.size(); ++i) {
            T* img = out.sample(idx[i]);
            for (std::int64_t p = 0; p < d; ++p) {
                const size_t flat = i * static_cast<size_t>(d) + static_cast<size_t>(p);
                const double upd = adam.step(flat, -ascent[flat], lr);  // ascend
                img[p] = std::clamp(static_cast<T>(img[p] - static_cast<T>(upd)), T(0), T(1));
            }
        }
        if ((step + 1) % checkpoint_every == 0 || step + 1 == steps)
            rep.checkpoints.push_back(mean_weight());
    }
    rep.objective_after = rep.checkpoints.back();
    rep.non_converging = rep.objective_after < rep.objective_before;
    return {std::move(out), rep};
}

// ---------------------------------------------------------------------------
// Manifest CSV: header `index,attack,original_label,final_label`, LF endings
// ---------------------------------------------------------------------------

inline void save_manifest(const PoisonManifest& man, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("manifest: cannot open for write: " + path);
    os << "index,attack,original_label,final_label\n";
    for (const auto& e : man.entries)
        os << e.index << ',' << e.attack << ',' << e.original_label << ',' << e.final_label
           << '\n';
}

inline PoisonManifest load_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("manifest: cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line.rfind("index,attack,original_label,final_label", 0) != 0)
        throw std::runtime_error("manifest: bad header in " + path);
    PoisonManifest man;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string field;
        if (!std::getline(ss, field, ',')) throw std::runtime_error("manifest: short row");
        e.index = std::stoi(field);
        if (!std::getline(ss, e.attack, ','))
            throw std::runtime_error("manifest: missing attack at line " + std::to_string(lineno));
        if (!std::getline(ss, field, ','))
            throw std::runtime_error("manifest: missing original label at line " +
                                     std::to_string(lineno));
        e.original_label = std::stoi(field);
        if (!std::getline(ss, field))
            throw std::runtime_error("manifest: missing final label at line " +
                                     std::to_string(lineno));
        e.final_label = std::stoi(field);
        man.entries.push_back(std::move(e));
    }
    return man;
}

}  // namespace cleansift
