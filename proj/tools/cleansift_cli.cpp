// Command-line harness: dataset generation, poisoning, sifting, baseline
// scoring and report building, driven by flat key=value config files.
//
// Exit codes: 0 success, 1 runtime failure, 2 config error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cleansift/attacks.hpp"
#include "cleansift/baselines.hpp"
#include "cleansift/config.hpp"
#include "cleansift/dataset.hpp"
#include "cleansift/engine.hpp"
#include "cleansift/metrics.hpp"

namespace fs = std::filesystem;
using namespace cleansift;

namespace {

using Scalar = float;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed_override;
    std::string method;  // baseline only
};

std::uint64_t effective_seed(const ExperimentConfig& cfg, const CommonArgs& args) {
    if (args.seed_override) return *args.seed_override;
    return cfg.get_u64("seed", 0);
}

HyperParams hyper_from_config(const ExperimentConfig& cfg, std::uint64_t seed) {
    HyperParams hp;
    hp.alpha = cfg.get_double("hyper.alpha", hp.alpha);
    hp.beta = cfg.get_double("hyper.beta", hp.beta);
    hp.batch = static_cast<int>(cfg.get_int("hyper.batch", hp.batch));
    hp.u = static_cast<int>(cfg.get_int("hyper.u", hp.u));
    hp.m = static_cast<int>(cfg.get_int("hyper.m", hp.m));
    hp.warmup_epochs = static_cast<int>(cfg.get_int("hyper.warmup_epochs", hp.warmup_epochs));
    hp.meta_epochs = static_cast<int>(cfg.get_int("hyper.meta_epochs", hp.meta_epochs));
    hp.tau = cfg.get_double("hyper.tau", hp.tau);
    hp.epsilon = cfg.get_double("hyper.epsilon", hp.epsilon);
    hp.hidden_width = static_cast<int>(cfg.get_int("hyper.hidden_width", hp.hidden_width));
    hp.hidden_depth = static_cast<int>(cfg.get_int("hyper.hidden_depth", hp.hidden_depth));
    hp.master_seed = seed;
    try {
        validate_hyperparams(hp);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return hp;
}

DilutionConfig dilution_from_config(const ExperimentConfig& cfg) {
    DilutionConfig d;
    d.crop_padding = static_cast<int>(cfg.get_int("dilute.crop_padding", d.crop_padding));
    d.rotation_max_deg = cfg.get_double("dilute.rotation_max_deg", d.rotation_max_deg);
    d.hflip_prob = cfg.get_double("dilute.hflip_prob", d.hflip_prob);
    d.blur_kernel = static_cast<int>(cfg.get_int("dilute.blur_kernel", d.blur_kernel));
    auto enabled = cfg.get_list("dilute.enable", {"crop", "rotate", "hflip", "blur"});
    d.enable_crop = d.enable_rotation = d.enable_hflip = d.enable_blur = false;
    for (const auto& e : enabled) {
        if (e == "crop") d.enable_crop = true;
        else if (e == "rotate") d.enable_rotation = true;
        else if (e == "hflip") d.enable_hflip = true;
        else if (e == "blur") d.enable_blur = true;
        else throw ConfigError("config: dilute.enable has unknown strategy `" + e + "`");
    }
    return d;
}

const std::set<std::string> kHyperKeys = {
    "hyper.alpha", "hyper.beta",         "hyper.batch",       "hyper.u",
    "hyper.m",     "hyper.warmup_epochs", "hyper.meta_epochs", "hyper.tau",
    "hyper.epsilon", "hyper.hidden_width", "hyper.hidden_depth"};
const std::set<std::string> kDiluteKeys = {"dilute.crop_padding", "dilute.rotation_max_deg",
                                           "dilute.hflip_prob", "dilute.blur_kernel",
                                           "dilute.enable"};

void merge(std::set<std::string>& dst, const std::set<std::string>& src) {
    dst.insert(src.begin(), src.end());
}

BudgetPlan budget_from_config(const ExperimentConfig& cfg, const ImageDataset<Scalar>& ds) {
    const int budget = static_cast<int>(cfg.get_int("sift.budget"));
    const bool balanced = cfg.get_bool("sift.balanced", true);
    try {
        return make_budget(ds, budget, balanced);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

void print_per_class_ratios(const ImageDataset<Scalar>& ds, const PoisonManifest& man) {
    auto ratios = man.per_class_ratio(ds);
    std::printf("poisoned %zu of %d samples (%.4f overall)\n", man.entries.size(), ds.n_samples,
                man.overall_ratio(ds.n_samples));
    for (int k = 0; k < ds.n_classes; ++k)
        std::printf("  class %d: ratio %.4f\n", k, ratios[static_cast<size_t>(k)]);
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const CommonArgs& args) {
    auto cfg = ExperimentConfig::parse_file(args.config_path);
    std::set<std::string> keys = {
        "seed", "out",
        "dataset.classes", "dataset.per_class", "dataset.side", "dataset.noise_sigma",
        "attack.kind", "attack.ratio", "attack.source_class", "attack.target_class",
        "attack.patch_size", "attack.patch_row", "attack.patch_col", "attack.blend_alpha",
        "attack.additive_bound", "attack.adv", "attack.adv_steps", "attack.adv_lr",
        "attack.adv_epochs"};
    merge(keys, kHyperKeys);
    cfg.reject_unknown(keys);

    const std::uint64_t seed = effective_seed(cfg, args);
    const int k = static_cast<int>(cfg.get_int("dataset.classes"));
    const int per_class = static_cast<int>(cfg.get_int("dataset.per_class"));
    const int side = static_cast<int>(cfg.get_int("dataset.side"));
    const double sigma = cfg.get_double("dataset.noise_sigma", 0.05);
    ImageDataset<Scalar> ds;
    try {
        ds = synth_shapes<Scalar>(k, per_class, side, sigma, derive_seed(seed, "dataset"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    const std::string kind = cfg.get_str("attack.kind");
    PoisonManifest man;
    const std::uint64_t attack_seed = derive_seed(seed, "attack");
    if (kind == "none") {
        // leave the dataset clean; empty manifest
    } else if (kind == "flip_targeted") {
        auto [d2, m2] = flip_labels_targeted(
            ds, static_cast<int>(cfg.get_int("attack.source_class")),
            static_cast<int>(cfg.get_int("attack.target_class")), cfg.get_double("attack.ratio"),
            attack_seed);
        ds = std::move(d2);
        man = std::move(m2);
    } else if (kind == "flip_random") {
        auto [d2, m2] = flip_labels_random(ds, cfg.get_double("attack.ratio"), attack_seed);
        ds = std::move(d2);
        man = std::move(m2);
    } else if (kind == "patch_dirty" || kind == "patch_clean") {
        auto trig = white_patch<Scalar>(ds.n_channels,
                                        static_cast<int>(cfg.get_int("attack.patch_size", 3)),
                                        static_cast<int>(cfg.get_int("attack.patch_row", 0)),
                                        static_cast<int>(cfg.get_int("attack.patch_col", 0)));
        auto [d2, m2] = apply_patch_trigger(
            ds, trig, static_cast<int>(cfg.get_int("attack.target_class")),
            cfg.get_double("attack.ratio"),
            kind == "patch_dirty" ? PatchMode::kDirtyLabel : PatchMode::kCleanLabel, attack_seed);
        ds = std::move(d2);
        man = std::move(m2);
    } else if (kind == "blended") {
        TriggerSpec<Scalar> trig;
        trig.kind = TriggerKind::kBlend;
        trig.blend_alpha = cfg.get_double("attack.blend_alpha", 0.2);
        trig.pattern = Tensor<Scalar>({ds.n_channels, ds.height, ds.width});
        for (int c = 0; c < ds.n_channels; ++c)
            for (int r = 0; r < ds.height; ++r)
                for (int cc = 0; cc < ds.width; ++cc)
                    trig.pattern.data[static_cast<size_t>((c * ds.height + r) * ds.width + cc)] =
                        ((r / 2 + cc / 2) % 2 == 0) ? Scalar(1) : Scalar(0);
        auto [d2, m2] =
            apply_blended_trigger(ds, trig, static_cast<int>(cfg.get_int("attack.target_class")),
                                  cfg.get_double("attack.ratio"), attack_seed);
        ds = std::move(d2);
        man = std::move(m2);
    } else if (kind == "additive") {
        TriggerSpec<Scalar> trig;
        trig.kind = TriggerKind::kAdditive;
        trig.linf_bound = cfg.get_double("attack.additive_bound", 16.0 / 255.0);
        trig.pattern = Tensor<Scalar>({ds.n_channels, ds.height, ds.width});
        SeededRng rng(derive_seed(seed, "trigger"));
        for (auto& v : trig.pattern.data)
            v = static_cast<Scalar>(rng.uniform(-trig.linf_bound, trig.linf_bound));
        auto [d2, m2] =
            apply_additive_trigger(ds, trig, static_cast<int>(cfg.get_int("attack.target_class")),
                                   cfg.get_double("attack.ratio"), attack_seed);
        ds = std::move(d2);
        man = std::move(m2);
    } else {
        throw ConfigError("config: attack.kind `" + kind + "` is not a known attack");
    }

    const std::string adv = cfg.get_str("attack.adv", "none");
    if (adv == "clean_model") {
        auto poi = man.indices();
        std::set<int> poiset(poi.begin(), poi.end());
        std::vector<int> keep;
        for (int i = 0; i < ds.n_samples; ++i)
            if (!poiset.count(i)) keep.push_back(i);
        ImageDataset<Scalar> clean;
        clean.n_samples = static_cast<int>(keep.size());
        clean.n_channels = ds.n_channels;
        clean.height = ds.height;
        clean.width = ds.width;
        clean.n_classes = ds.n_classes;
        clean.features = Tensor<Scalar>({clean.n_samples, ds.n_channels, ds.height, ds.width});
        clean.labels.resize(keep.size());
        for (size_t i = 0; i < keep.size(); ++i) {
            std::copy_n(ds.sample(keep[i]), ds.sample_dim(), clean.sample(static_cast<int>(i)));
            clean.labels[i] = ds.labels[static_cast<size_t>(keep[i])];
        }
        HyperParams hp = hyper_from_config(cfg, derive_seed(seed, "cleanmodel"));
        auto net = train_plain_classifier(clean, hp,
                                          static_cast<int>(cfg.get_int("attack.adv_epochs", 10)),
                                          derive_seed(seed, "cleanmodel"));
        auto [d2, rep] = adv_noise_clean_model(
            ds, man, net, static_cast<int>(cfg.get_int("attack.adv_steps", 100)),
            cfg.get_double("attack.adv_lr", 0.01));
        ds = std::move(d2);
        std::printf("adaptive noise (clean model): poison mean loss %.6g -> %.6g%s\n",
                    rep.objective_before, rep.objective_after,
                    rep.non_converging ? "  WARNING: objective increased" : "");
    } else if (adv == "sifters") {
        HyperParams hp = hyper_from_config(cfg, derive_seed(seed, "advsifters"));
        std::vector<Sifter<Scalar>> sifters;
        for (int s = 0; s < hp.m; ++s)
            sifters.push_back(train_sifter(ds, hp, derive_seed(hp.master_seed, "sifter", s)));
        auto [d2, rep] = adv_noise_sifters(ds, man, sifters,
                                           static_cast<int>(cfg.get_int("attack.adv_steps", 100)),
                                           cfg.get_double("attack.adv_lr", 0.01));
        ds = std::move(d2);
        std::printf("adaptive noise (sifters): poison mean weight %.6g -> %.6g%s\n",
                    rep.objective_before, rep.objective_after,
                    rep.non_converging ? "  WARNING: objective decreased" : "");
    } else if (adv != "none") {
        throw ConfigError("config: attack.adv `" + adv + "` must be none|clean_model|sifters");
    }

    fs::create_directories(args.out_dir);
    save_dataset(ds, (fs::path(args.out_dir) / "dataset.sft1").string());
    save_manifest(man, (fs::path(args.out_dir) / "manifest.csv").string());
    print_per_class_ratios(ds, man);
    return 0;
}

// ---------------------------------------------------------------------------
// sift
// ---------------------------------------------------------------------------

int cmd_sift(const CommonArgs& args) {
    auto cfg = ExperimentConfig::parse_file(args.config_path);
    std::set<std::string> keys = {"seed",        "out",          "data.dataset",
                                  "data.manifest", "sift.budget", "sift.balanced",
                                  "data.attack_label"};
    merge(keys, kHyperKeys);
    merge(keys, kDiluteKeys);
    cfg.reject_unknown(keys);

    const std::uint64_t seed = effective_seed(cfg, args);
    auto ds = load_dataset<Scalar>(cfg.get_str("data.dataset"));
    HyperParams hp = hyper_from_config(cfg, seed);
    DilutionConfig dil = dilution_from_config(cfg);
    BudgetPlan plan = budget_from_config(cfg, ds);

    const auto t0 = std::chrono::steady_clock::now();
    auto out = sift(ds, hp, plan, dil);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(args.out_dir);
    write_weights_csv((fs::path(args.out_dir) / "weights.csv").string(), ds, out.table,
                      &out.result);
    write_selection_csv((fs::path(args.out_dir) / "selection.csv").string(), out.result);

    EvalReport rep;
    rep.method = "sift";
    rep.attack = cfg.get_str("data.attack_label", "unknown");
    rep.budget = out.result.total();
    rep.seconds = secs;
    if (cfg.has("data.manifest")) {
        auto man = load_manifest(cfg.get_str("data.manifest"));
        rep = evaluate_selection(ds, out.result.all(), man, plan, "sift", rep.attack);
        rep.seconds = secs;
        std::printf("sift: m=%d budget=%d CR=%.6g NCR=%.6g (%.2f s)\n", hp.m, rep.budget, rep.cr,
                    rep.ncr, secs);
    } else {
        rep.has_manifest = false;
        std::printf("sift: m=%d budget=%d (no manifest; CR/NCR omitted) (%.2f s)\n", hp.m,
                    rep.budget, secs);
    }
    write_reports((fs::path(args.out_dir) / "report.csv").string(),
                  (fs::path(args.out_dir) / "report.txt").string(), {rep});
    return 0;
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

int cmd_baseline(const CommonArgs& args) {
    auto cfg = ExperimentConfig::parse_file(args.config_path);
    std::set<std::string> keys = {"seed",          "out",          "data.dataset",
                                  "data.manifest", "sift.budget",  "sift.balanced",
                                  "data.attack_label", "baseline.epochs"};
    merge(keys, kHyperKeys);
    merge(keys, kDiluteKeys);  // sift configs are reusable as-is
    cfg.reject_unknown(keys);
    if (args.method != "dcm" && args.method != "sf_least" && args.method != "loss_scan")
        throw ConfigError("baseline: --method must be dcm|sf_least|loss_scan, got `" +
                          args.method + "`");

    const std::uint64_t seed = effective_seed(cfg, args);
    auto ds = load_dataset<Scalar>(cfg.get_str("data.dataset"));
    HyperParams hp = hyper_from_config(cfg, seed);
    BudgetPlan plan = budget_from_config(cfg, ds);

    const auto t0 = std::chrono::steady_clock::now();
    ScoreTable scores;
    if (args.method == "dcm") {
        scores = dcm_scores(ds);
    } else if (args.method == "sf_least") {
        auto net = train_plain_classifier(ds, hp,
                                          static_cast<int>(cfg.get_int("baseline.epochs", 5)),
                                          derive_seed(seed, "sf_least"));
        scores = sf_least_scores(ds, net);
    } else {
        scores = loss_scan_scores(ds, hp);
    }
    auto sel = select_lowest(scores, plan, ds);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(args.out_dir);
    write_scores_csv((fs::path(args.out_dir) / "scores.csv").string(), scores);
    write_selection_csv((fs::path(args.out_dir) / "selection.csv").string(), sel);

    EvalReport rep;
    rep.method = args.method;
    rep.attack = cfg.get_str("data.attack_label", "unknown");
    rep.budget = sel.total();
    rep.seconds = secs;
    if (cfg.has("data.manifest")) {
        auto man = load_manifest(cfg.get_str("data.manifest"));
        rep = evaluate_selection(ds, sel.all(), man, plan, args.method, rep.attack);
        rep.seconds = secs;
        std::printf("baseline %s: budget=%d CR=%.6g NCR=%.6g (%.2f s)\n", args.method.c_str(),
                    rep.budget, rep.cr, rep.ncr, secs);
    } else {
        rep.has_manifest = false;
        std::printf("baseline %s: budget=%d (no manifest) (%.2f s)\n", args.method.c_str(),
                    rep.budget, secs);
    }
    write_reports((fs::path(args.out_dir) / "report.csv").string(),
                  (fs::path(args.out_dir) / "report.txt").string(), {rep});
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

std::vector<int> load_selection_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("selection: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line.rfind("class,index", 0) != 0)
        throw std::runtime_error("selection: bad header in " + path);
    std::vector<int> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("selection: malformed row in " + path);
        out.push_back(std::stoi(line.substr(comma + 1)));
    }
    return out;
}

int cmd_report(const CommonArgs& args) {
    auto cfg = ExperimentConfig::parse_file(args.config_path);
    std::set<std::string> keys = {"seed",           "out",           "report.dataset",
                                  "report.manifest", "report.selection", "report.budget",
                                  "report.balanced", "report.methods", "report.attack_label"};
    cfg.reject_unknown(keys);

    auto ds = load_dataset<Scalar>(cfg.get_str("report.dataset"));
    auto man = load_manifest(cfg.get_str("report.manifest"));
    auto paths = cfg.get_list("report.selection", {});
    if (paths.empty()) throw ConfigError("config: missing required key `report.selection`");
    auto labels = cfg.get_list("report.methods", {});
    BudgetPlan plan;
    try {
        plan = make_budget(ds, static_cast<int>(cfg.get_int("report.budget")),
                           cfg.get_bool("report.balanced", true));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const std::string attack = cfg.get_str("report.attack_label", "unknown");

    std::vector<EvalReport> reports;
    for (size_t i = 0; i < paths.size(); ++i) {
        auto selected = load_selection_csv(paths[i]);
        if (selected.empty()) throw std::runtime_error("report: selected set empty in " + paths[i]);
        std::string label =
            i < labels.size() ? labels[i] : fs::path(paths[i]).stem().string() + std::to_string(i);
        reports.push_back(evaluate_selection(ds, selected, man, plan, label, attack));
    }
    fs::create_directories(args.out_dir);
    write_reports((fs::path(args.out_dir) / "report.csv").string(),
                  (fs::path(args.out_dir) / "report.txt").string(), reports);
    for (const auto& r : reports)
        std::printf("%s: budget=%d CR=%.6g NCR=%.6g\n", r.method.c_str(), r.budget, r.cr, r.ncr);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"clean-subset sifting pipeline"};
    app.require_subcommand(1);
    CommonArgs args;

    auto add_common = [&](CLI::App* sub, bool with_method) {
        sub->add_option("--config", args.config_path, "flat key=value config file")->required();
        sub->add_option("--out", args.out_dir, "output directory (default: out)");
        sub->add_option("--seed", args.seed_override, "master seed, overrides the config");
        if (with_method)
            sub->add_option("--method", args.method, "dcm|sf_least|loss_scan")->required();
    };
    auto* gen = app.add_subcommand("generate", "build a (poisoned) dataset and manifest");
    add_common(gen, false);
    auto* sft = app.add_subcommand("sift", "train sifters and select a base set");
    add_common(sft, false);
    auto* base = app.add_subcommand("baseline", "run an outlier-score baseline sifter");
    add_common(base, true);
    auto* rep = app.add_subcommand("report", "evaluate selection CSVs against a manifest");
    add_common(rep, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // bad usage is a config error
    }

    try {
        if (gen->parsed()) return cmd_generate(args);
        if (sft->parsed()) return cmd_sift(args);
        if (base->parsed()) return cmd_baseline(args);
        if (rep->parsed()) return cmd_report(args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
