#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "cleansift/attacks.hpp"
#include "cleansift/baselines.hpp"
#include "cleansift/dataset.hpp"
#include "support.hpp"

using namespace cleansift;
namespace ts = testsupport;
namespace fs = std::filesystem;

namespace {

// Indices where features or label changed between two datasets.
std::vector<int> changed_indices(const ImageDataset<float>& a, const ImageDataset<float>& b) {
    std::vector<int> out;
    for (int i = 0; i < a.n_samples; ++i) {
        bool diff = a.labels[static_cast<size_t>(i)] != b.labels[static_cast<size_t>(i)];
        if (!diff)
            for (std::int64_t p = 0; p < a.sample_dim(); ++p)
                if (a.sample(i)[p] != b.sample(i)[p]) {
                    diff = true;
                    break;
                }
        if (diff) out.push_back(i);
    }
    return out;
}

}  // namespace

TEST_CASE("targeted flips hit the documented target-class ratio") {
    // equal class sizes with flip ratio 0.2 of the source class put the
    // target class at a 1/6 = 16.67% poison fraction
    auto ds = synth_shapes<float>(10, 50, 8, 0.05, 1);
    auto [poisoned, man] = flip_labels_targeted(ds, 3, 5, 0.2, 2);
    CHECK(man.entries.size() == 10);
    for (const auto& e : man.entries) {
        CHECK(e.original_label == 3);
        CHECK(e.final_label == 5);
    }
    auto ratios = man.per_class_ratio(poisoned);
    CHECK(ratios[5] == doctest::Approx(1.0 / 6.0).epsilon(1e-9));
    // features untouched
    for (const auto& e : man.entries)
        for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
            CHECK(poisoned.sample(e.index)[p] == ds.sample(e.index)[p]);
}

TEST_CASE("a ratio selecting one sample produces exactly one manifest entry") {
    auto ds = synth_shapes<float>(2, 10, 8, 0.05, 3);
    auto [poisoned, man] = flip_labels_targeted(ds, 0, 1, 0.1, 4);
    CHECK(man.entries.size() == 1);
    CHECK_THROWS_AS(flip_labels_targeted(ds, 0, 1, 0.01, 4), std::invalid_argument);
}

TEST_CASE("training on the unflipped split makes flipped samples high loss") {
    auto ds = synth_shapes<float>(3, 120, 12, 0.05, 5);
    auto [poisoned, man] = flip_labels_targeted(ds, 0, 2, 0.3, 6);
    auto clean = ts::drop_indices(poisoned, man.indices());
    HyperParams hp;
    hp.master_seed = 9;
    auto net = train_plain_classifier(clean, hp, 5, 10);
    double flipped = ts::mean_loss_over(net, poisoned, man.indices());
    std::vector<int> rest;
    std::set<int> poi = man.index_set();
    for (int i = 0; i < poisoned.n_samples; ++i)
        if (!poi.count(i)) rest.push_back(i);
    double unflipped = ts::mean_loss_over(net, poisoned, rest);
    CHECK(flipped > unflipped);
    CHECK(flipped > 2.0 * unflipped);  // the separation is large, not marginal
}

TEST_CASE("random flips always pick a different class and hit the count") {
    auto ds = synth_shapes<float>(5, 200, 8, 0.05, 7);
    auto [poisoned, man] = flip_labels_random(ds, 0.2, 8);
    CHECK(man.entries.size() == 200);
    for (const auto& e : man.entries) {
        CHECK(e.final_label != e.original_label);
        CHECK(poisoned.labels[static_cast<size_t>(e.index)] == e.final_label);
    }
}

TEST_CASE("random flip targets are uniform over the wrong classes") {
    // chi-squared over the K-1 alternative slots at N=10,000; dof=3,
    // critical value 11.345 for p=0.01
    auto ds = synth_shapes<float>(5, 2000, 8, 0.0, 9);
    auto [poisoned, man] = flip_labels_random(ds, 0.2, 10);
    REQUIRE(man.entries.size() == 2000);
    std::vector<int> slot_count(4, 0);
    for (const auto& e : man.entries) {
        int slot = e.final_label - (e.final_label > e.original_label ? 1 : 0);
        ++slot_count[static_cast<size_t>(slot % 4)];
    }
    const double expected = 2000.0 / 4.0;
    double chi2 = 0.0;
    for (int c : slot_count) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 11.345);
}

TEST_CASE("dirty patch relabels everything to the target and writes the patch") {
    auto ds = synth_shapes<float>(5, 40, 16, 0.05, 11);
    auto trig = white_patch<float>(1, 4, 0, 0);
    auto [poisoned, man] = apply_patch_trigger(ds, trig, 2, 0.25, PatchMode::kDirtyLabel, 12);
    CHECK(!man.entries.empty());
    for (const auto& e : man.entries) {
        CHECK(e.final_label == 2);
        CHECK(e.original_label != 2);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) CHECK(poisoned.sample(e.index)[r * 16 + c] == 1.0f);
    }
    // requested ratio achieved within rounding
    auto ratios = man.per_class_ratio(poisoned);
    CHECK(ratios[2] == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("clean-label patch stays within the target class and keeps labels") {
    auto ds = synth_shapes<float>(4, 30, 12, 0.05, 13);
    auto trig = white_patch<float>(1, 3, 2, 2);
    auto [poisoned, man] = apply_patch_trigger(ds, trig, 1, 0.2, PatchMode::kCleanLabel, 14);
    CHECK(man.entries.size() == 6);
    for (const auto& e : man.entries) {
        CHECK(e.original_label == 1);
        CHECK(e.final_label == 1);
    }
    CHECK(poisoned.labels == ds.labels);
}

TEST_CASE("out-of-bounds patches are rejected") {
    auto ds = synth_shapes<float>(3, 10, 10, 0.0, 15);
    auto trig = white_patch<float>(1, 4, 8, 8);
    CHECK_THROWS_WITH_AS(
        apply_patch_trigger(ds, trig, 0, 0.2, PatchMode::kDirtyLabel, 16),
        doctest::Contains("out of image bounds"), std::invalid_argument);
}

TEST_CASE("a patched model reaches high attack success on triggered holdout data") {
    auto ds = synth_shapes<float>(5, 400, 16, 0.05, 42);
    auto trig = white_patch<float>(1, 4, 0, 0);
    auto [poisoned, man] = apply_patch_trigger(ds, trig, 2, 1.0 / 3.0, PatchMode::kDirtyLabel, 7);
    HyperParams hp;
    hp.master_seed = 99;
    auto net = train_plain_classifier(poisoned, hp, 5, 123);
    auto holdout = synth_shapes<float>(5, 50, 16, 0.05, 777);
    int hits = 0, total = 0;
    for (int i = 0; i < holdout.n_samples; ++i) {
        if (holdout.labels[static_cast<size_t>(i)] == 2) continue;
        float* img = holdout.sample(i);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) img[r * 16 + c] = 1.0f;
        std::vector<int> one{i};
        auto res = classifier_forward(net, gather_batch(holdout, one), gather_labels(holdout, one));
        int arg = 0;
        for (int k = 1; k < 5; ++k)
            if (res.logits.at(0, k) > res.logits.at(0, arg)) arg = k;
        hits += (arg == 2);
        ++total;
    }
    CHECK(static_cast<double>(hits) / total >= 0.90);
}

TEST_CASE("blended trigger interpolates between image and pattern") {
    auto ds = synth_shapes<float>(3, 20, 10, 0.05, 17);
    TriggerSpec<float> trig;
    trig.kind = TriggerKind::kBlend;
    trig.pattern = Tensor<float>({1, 10, 10});
    for (std::int64_t p = 0; p < trig.pattern.size(); ++p)
        trig.pattern[p] = (p % 3 == 0) ? 1.0f : 0.25f;

    SUBCASE("alpha = 0 changes labels only") {
        trig.blend_alpha = 0.0;
        auto [poisoned, man] = apply_blended_trigger(ds, trig, 0, 0.2, 18);
        for (const auto& e : man.entries) {
            CHECK(e.final_label == 0);
            for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
                CHECK(poisoned.sample(e.index)[p] == ds.sample(e.index)[p]);
        }
    }
    SUBCASE("alpha = 1 replaces features with the pattern") {
        trig.blend_alpha = 1.0;
        auto [poisoned, man] = apply_blended_trigger(ds, trig, 0, 0.2, 18);
        for (const auto& e : man.entries)
            for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
                CHECK(poisoned.sample(e.index)[p] == trig.pattern[p]);
    }
    SUBCASE("alpha = 0.2 bounds the per-pixel deviation by 0.2") {
        trig.blend_alpha = 0.2;
        auto [poisoned, man] = apply_blended_trigger(ds, trig, 0, 0.2, 18);
        for (const auto& e : man.entries)
            for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
                CHECK(std::abs(poisoned.sample(e.index)[p] - ds.sample(e.index)[p]) <=
                      0.2f + 1e-6f);
    }
}

TEST_CASE("additive trigger is clean-label and L-inf bounded") {
    auto ds = synth_shapes<float>(4, 100, 12, 0.05, 19);
    TriggerSpec<float> trig;
    trig.kind = TriggerKind::kAdditive;
    trig.linf_bound = 16.0 / 255.0;
    trig.pattern = Tensor<float>({1, 12, 12});
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c)
            trig.pattern.data[static_cast<size_t>(r * 12 + c)] =
                ((r + c) % 2 == 0 ? 1.0f : -1.0f) * 16.0f / 255.0f;
    auto [poisoned, man] = apply_additive_trigger(ds, trig, 1, 0.4, 20);
    CHECK(man.entries.size() == 40);
    for (const auto& e : man.entries) {
        CHECK(e.original_label == e.final_label);
        for (std::int64_t p = 0; p < ds.sample_dim(); ++p)
            CHECK(std::abs(poisoned.sample(e.index)[p] - ds.sample(e.index)[p]) <=
                  16.0f / 255.0f + 1e-5f);
    }
    // oversized patterns are rejected
    trig.pattern[0] = 0.5f;
    CHECK_THROWS_WITH_AS(apply_additive_trigger(ds, trig, 1, 0.4, 20),
                         doctest::Contains("L-inf bound"), std::invalid_argument);
}

TEST_CASE("additive poisons shift the loss under a clean-trained classifier") {
    // one-sided rank test, p < 0.05
    auto ds = synth_shapes<float>(4, 150, 12, 0.05, 21);
    TriggerSpec<float> trig;
    trig.kind = TriggerKind::kAdditive;
    trig.linf_bound = 16.0 / 255.0;
    trig.pattern = Tensor<float>({1, 12, 12});
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c)
            trig.pattern.data[static_cast<size_t>(r * 12 + c)] =
                ((r / 2 + c / 2) % 2 == 0 ? 1.0f : -1.0f) * 16.0f / 255.0f;
    auto [poisoned, man] = apply_additive_trigger(ds, trig, 2, 0.3, 22);
    auto clean = ts::drop_indices(poisoned, man.indices());
    HyperParams hp;
    hp.master_seed = 23;
    auto net = train_plain_classifier(clean, hp, 10, 24);

    std::vector<double> poisoned_losses, clean_losses;
    std::set<int> poi = man.index_set();
    for (int i = 0; i < poisoned.n_samples; ++i) {
        if (poisoned.labels[static_cast<size_t>(i)] != 2) continue;
        std::vector<int> one{i};
        auto res = classifier_forward(net, gather_batch(poisoned, one),
                                      gather_labels(poisoned, one));
        if (poi.count(i))
            poisoned_losses.push_back(res.loss[0]);
        else
            clean_losses.push_back(res.loss[0]);
    }
    double p = ts::rank_sum_p_greater(poisoned_losses, clean_losses);
    CHECK(p < 0.05);
}

TEST_CASE("manifests exactly list where the dataset changed") {
    auto ds = synth_shapes<float>(4, 30, 12, 0.05, 25);

    auto check_exact = [&](const ImageDataset<float>& poisoned, const PoisonManifest& man) {
        auto changed = changed_indices(ds, poisoned);
        auto listed = man.indices();
        CHECK(changed == listed);
    };
    {
        auto [p, m] = flip_labels_targeted(ds, 0, 1, 0.5, 1);
        check_exact(p, m);
    }
    {
        auto [p, m] = flip_labels_random(ds, 0.25, 2);
        check_exact(p, m);
    }
    {
        auto trig = white_patch<float>(1, 3, 1, 1);
        auto [p, m] = apply_patch_trigger(ds, trig, 2, 0.3, PatchMode::kDirtyLabel, 3);
        check_exact(p, m);
    }
    {
        TriggerSpec<float> trig;
        trig.kind = TriggerKind::kBlend;
        trig.blend_alpha = 0.5;
        trig.pattern = Tensor<float>({1, 12, 12});
        for (auto& v : trig.pattern.data) v = 0.7f;
        auto [p, m] = apply_blended_trigger(ds, trig, 3, 0.25, 4);
        check_exact(p, m);
    }
    {
        TriggerSpec<float> trig;
        trig.kind = TriggerKind::kAdditive;
        trig.linf_bound = 16.0 / 255.0;
        trig.pattern = Tensor<float>({1, 12, 12});
        for (auto& v : trig.pattern.data) v = 16.0f / 255.0f;
        auto [p, m] = apply_additive_trigger(ds, trig, 1, 0.5, 5);
        check_exact(p, m);
    }
}

TEST_CASE("manifest CSV round-trips and rejects bad headers") {
    auto dir = fs::temp_directory_path() / "cleansift_attack_tests";
    fs::create_directories(dir);
    PoisonManifest man;
    man.entries = {{3, "flip_random", 0, 2}, {9, "patch_dirty", 1, 4}};
    auto p = dir / "man.csv";
    save_manifest(man, p.string());
    auto loaded = load_manifest(p.string());
    REQUIRE(loaded.entries.size() == 2);
    CHECK(loaded.entries[1].index == 9);
    CHECK(loaded.entries[1].attack == "patch_dirty");
    CHECK(loaded.entries[1].original_label == 1);
    CHECK(loaded.entries[1].final_label == 4);

    std::ofstream(p) << "wrong,header\n";
    CHECK_THROWS_WITH_AS(load_manifest(p.string()), doctest::Contains("bad header"),
                         std::runtime_error);
}

TEST_CASE("adaptive noise with zero steps leaves the dataset unchanged") {
    auto ds = synth_shapes<float>(3, 20, 10, 0.05, 26);
    auto [poisoned, man] = flip_labels_targeted(ds, 0, 1, 0.3, 27);
    HyperParams hp;
    hp.master_seed = 28;
    auto net = train_plain_classifier(ts::drop_indices(poisoned, man.indices()), hp, 3, 29);
    auto [after, rep] = adv_noise_clean_model(poisoned, man, net, 0, 0.01);
    CHECK(after.features.data == poisoned.features.data);
    CHECK(rep.objective_before == rep.objective_after);

    auto sifter = train_sifter(poisoned, hp, 30);
    auto [after2, rep2] = adv_noise_sifters(poisoned, man, {sifter}, 0, 0.01);
    CHECK(after2.features.data == poisoned.features.data);
}

TEST_CASE("clean-model noise strictly decreases the monitored poison loss") {
    auto ds = synth_shapes<float>(3, 60, 12, 0.05, 31);
    auto trig = white_patch<float>(1, 3, 0, 0);
    auto [poisoned, man] = apply_patch_trigger(ds, trig, 1, 0.25, PatchMode::kDirtyLabel, 32);
    HyperParams hp;
    hp.master_seed = 33;
    auto net = train_plain_classifier(ts::drop_indices(poisoned, man.indices()), hp, 10, 34);
    auto [after, rep] = adv_noise_clean_model(poisoned, man, net, 100, 0.01);
    CHECK(rep.objective_after < rep.objective_before);
    CHECK_FALSE(rep.non_converging);
    for (float v : after.features.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("sifter-based noise raises the aggregated weight monotonically") {
    auto ds = synth_shapes<float>(3, 60, 12, 0.05, 35);
    auto [poisoned, man] = flip_labels_random(ds, 0.2, 36);
    HyperParams hp;
    hp.master_seed = 37;
    hp.m = 2;
    std::vector<Sifter<float>> sifters;
    for (int s = 0; s < hp.m; ++s)
        sifters.push_back(train_sifter(poisoned, hp, derive_seed(hp.master_seed, "sifter", s)));
    auto [after, rep] = adv_noise_sifters(poisoned, man, sifters, 50, 0.01);
    CHECK(rep.objective_after > rep.objective_before);
    for (size_t i = 1; i < rep.checkpoints.size(); ++i)
        CHECK(rep.checkpoints[i] >= rep.checkpoints[i - 1] - 1e-9);
}
