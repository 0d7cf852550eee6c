#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "dataset.hpp"

namespace cleansift {

// Fraction of the selected subset that is poisoned.
inline double corruption_ratio(const std::vector<int>& selected, const PoisonManifest& manifest) {
    require(!selected.empty(), "corruption ratio: selected set empty");
    std::set<int> poisoned = manifest.index_set();
    int hits = 0;
    for (int i : selected) hits += poisoned.count(i) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(selected.size());
}

// NCR = CR / CR_rand * 100. Zero is perfect, 100 matches random selection.
inline double ncr(double cr, double cr_rand) {
    if (cr_rand <= 0.0)
        throw std::invalid_argument("ncr: attack has zero poisons; NCR undefined");
    return cr / cr_rand * 100.0;
}

// Analytic corruption ratio of a random per-class selection:
// sum_k b_k * (poisons in class k / |D_k|) / sum_k b_k. No sampling.
template <typename T>
double random_cr(const ImageDataset<T>& ds, const PoisonManifest& manifest,
                 const BudgetPlan& plan) {
    ClassIndex ci = ClassIndex::build(ds);
    require(static_cast<int>(plan.per_class.size()) == ds.n_classes,
            "random_cr: budget plan class count mismatch");
    std::vector<int> poi(static_cast<size_t>(ds.n_classes), 0);
    for (const auto& e : manifest.entries)
        ++poi[static_cast<size_t>(ds.labels[static_cast<size_t>(e.index)])];
    double num = 0.0, den = 0.0;
    for (int k = 0; k < ds.n_classes; ++k) {
        const int bk = plan.per_class[static_cast<size_t>(k)];
        num += bk * static_cast<double>(poi[static_cast<size_t>(k)]) / ci.class_size(k);
        den += bk;
    }
    require(den > 0, "random_cr: empty budget");
    return num / den;
}

// FPR = clean samples flagged as poisoned / total clean;
// FNR = poisoned samples marked clean / total poisoned.
inline std::pair<double, double> fpr_fnr(const std::vector<int>& flagged_poisoned,
                                         const PoisonManifest& manifest, int n_samples) {
    std::set<int> poisoned = manifest.index_set();
    std::set<int> flagged(flagged_poisoned.begin(), flagged_poisoned.end());
    const int n_poi = static_cast<int>(poisoned.size());
    const int n_clean = n_samples - n_poi;
    require(n_poi >= 1 && n_clean >= 1, "fpr/fnr: need both clean and poisoned samples");
    int false_pos = 0;
    for (int i : flagged)
        if (!poisoned.count(i)) ++false_pos;
    int false_neg = 0;
    for (int i : poisoned)
        if (!flagged.count(i)) ++false_neg;
    return {static_cast<double>(false_pos) / n_clean, static_cast<double>(false_neg) / n_poi};
}

struct EvalReport {
    std::string method;
    std::string attack;
    int budget = 0;
    double cr = 0.0;
    double cr_rand = 0.0;
    double ncr = 0.0;
    double fpr = 0.0;
    double fnr = 0.0;
    double precision = 0.0;  // clean fraction of the selection, 1 - CR
    double seconds = 0.0;
    bool has_manifest = true;
};

// Builds the full report for one selection. Samples outside the selection
// count as flagged-poisoned for FPR/FNR purposes.
template <typename T>
EvalReport evaluate_selection(const ImageDataset<T>& ds, const std::vector<int>& selected,
                              const PoisonManifest& manifest, const BudgetPlan& plan,
                              const std::string& method, const std::string& attack) {
    EvalReport rep;
    rep.method = method;
    rep.attack = attack;
    rep.budget = static_cast<int>(selected.size());
    rep.cr = corruption_ratio(selected, manifest);
    rep.cr_rand = random_cr(ds, manifest, plan);
    rep.ncr = ncr(rep.cr, rep.cr_rand);
    std::set<int> sel(selected.begin(), selected.end());
    std::vector<int> flagged;
    for (int i = 0; i < ds.n_samples; ++i)
        if (!sel.count(i)) flagged.push_back(i);
    auto [fpr, fnr] = fpr_fnr(flagged, manifest, ds.n_samples);
    rep.fpr = fpr;
    rep.fnr = fnr;
    rep.precision = 1.0 - rep.cr;
    return rep;
}

// Wall-clock timing is reported on stdout only so repeated runs with the
// same config and seed stay byte-identical on disk.
inline std::string report_text(const EvalReport& r) {
    char buf[512];
    if (r.has_manifest)
        std::snprintf(buf, sizeof(buf),
                      "method=%s\nattack=%s\nbudget=%d\ncr=%.9g\ncr_rand=%.9g\nncr=%.9g\n"
                      "fpr=%.9g\nfnr=%.9g\nprecision=%.9g\n",
                      r.method.c_str(), r.attack.c_str(), r.budget, r.cr, r.cr_rand, r.ncr, r.fpr,
                      r.fnr, r.precision);
    else
        std::snprintf(buf, sizeof(buf), "method=%s\nattack=%s\nbudget=%d\n", r.method.c_str(),
                      r.attack.c_str(), r.budget);
    return buf;
}

inline std::string report_csv_header() {
    return "method,attack,budget,cr,cr_rand,ncr,fpr,fnr,precision";
}

inline std::string report_csv_row(const EvalReport& r) {
    char buf[512];
    if (r.has_manifest)
        std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                      r.method.c_str(), r.attack.c_str(), r.budget, r.cr, r.cr_rand, r.ncr, r.fpr,
                      r.fnr, r.precision);
    else
        std::snprintf(buf, sizeof(buf), "%s,%s,%d,,,,,,", r.method.c_str(), r.attack.c_str(),
                      r.budget);
    return buf;
}

inline void write_reports(const std::string& csv_path, const std::string& txt_path,
                          std::vector<EvalReport> reports) {
    // cross-method tables are sorted by NCR ascending
    std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
        if (a.has_manifest != b.has_manifest) return a.has_manifest;
        return a.ncr < b.ncr;
    });
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot open for write: " + csv_path);
    csv << report_csv_header() << '\n';
    for (const auto& r : reports) csv << report_csv_row(r) << '\n';
    std::ofstream txt(txt_path, std::ios::binary);
    if (!txt) throw std::runtime_error("cannot open for write: " + txt_path);
    for (size_t i = 0; i < reports.size(); ++i) {
        if (i) txt << '\n';
        txt << report_text(reports[i]);
    }
}

}  // namespace cleansift
