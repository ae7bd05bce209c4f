#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cashewmap/common.hpp"
#include "cashewmap/rng.hpp"
#include "cashewmap/rstk.hpp"

namespace cashewmap {

// ---------------------------------------------------------------------------
// Sampling design
// ---------------------------------------------------------------------------

struct StratumDef {
    std::uint8_t from = 0;
    std::uint8_t to = 0;
    std::string name;
    bool stable() const { return from == to; }
};

// Three stable classes plus the four change classes between two epochs.
inline std::vector<StratumDef> default_strata() {
    return {{kMixedTrees, kMixedTrees, "stable_mixed_trees"},
            {kCashew, kCashew, "stable_cashew"},
            {kCropland, kCropland, "stable_cropland"},
            {kMixedTrees, kCashew, "mixed_trees_to_cashew"},
            {kCropland, kCashew, "cropland_to_cashew"},
            {kMixedTrees, kCropland, "mixed_trees_to_cropland"},
            {kCropland, kMixedTrees, "cropland_to_mixed_trees"}};
}

inline std::vector<int> default_allocation() { return {300, 200, 400, 100, 100, 100, 200}; }

inline int stratum_of(std::uint8_t from, std::uint8_t to, const std::vector<StratumDef>& strata) {
    for (std::size_t i = 0; i < strata.size(); ++i)
        if (strata[i].from == from && strata[i].to == to) return static_cast<int>(i);
    return -1;
}

struct SamplePoint {
    long long point_id = 0;
    int row = 0;
    int col = 0;
    int stratum = -1;
    std::uint8_t reference = kNoData;
    std::uint8_t predicted = kNoData;
};

struct StratifiedDesign {
    std::vector<StratumDef> strata = default_strata();
    std::vector<int> allocation = default_allocation();
    int cluster_grid = 32;  // cluster cell extent in pixels
    int n_clusters = 120;
    std::vector<long long> stratum_pixels;  // population counts over the full region
    std::uint64_t seed = 0;

    void validate() const {
        if (strata.empty() || strata.size() != allocation.size())
            throw ConfigError("design: strata and allocation sizes differ");
        for (int a : allocation)
            if (a < 1) throw ConfigError("design: allocations must be positive");
        if (cluster_grid < 1 || n_clusters < 1) throw ConfigError("design: invalid cluster settings");
    }
};

// Two-phase draw: simple random sample of grid clusters, then per-stratum
// simple random samples of pixels inside the selected clusters.
inline std::vector<SamplePoint> draw_design(const LabelMask& early, const LabelMask& late,
                                            StratifiedDesign& design, std::uint64_t seed) {
    design.validate();
    early.validate();
    late.validate();
    if (early.height != late.height || early.width != late.width)
        throw InputError("draw_design: epoch extent mismatch");
    const int h = early.height, w = early.width;
    const std::size_t n_strata = design.strata.size();

    std::vector<int> plane(static_cast<std::size_t>(h) * w, -1);
    design.stratum_pixels.assign(n_strata, 0);
    for (std::size_t i = 0; i < plane.size(); ++i) {
        const int s = stratum_of(early.codes[i], late.codes[i], design.strata);
        plane[i] = s;
        if (s >= 0) ++design.stratum_pixels[s];
    }

    Rng root(seed);
    design.seed = seed;
    const int gh = (h + design.cluster_grid - 1) / design.cluster_grid;
    const int gw = (w + design.cluster_grid - 1) / design.cluster_grid;
    const std::size_t total_cells = static_cast<std::size_t>(gh) * gw;
    const std::size_t pick = std::min<std::size_t>(design.n_clusters, total_cells);
    std::vector<std::size_t> clusters =
        Rng(root.substream("clusters").next_u64()).sample_without_replacement(total_cells, pick);
    std::sort(clusters.begin(), clusters.end());

    std::vector<std::vector<std::size_t>> pool(n_strata);
    for (std::size_t cell : clusters) {
        const int gy = static_cast<int>(cell) / gw, gx = static_cast<int>(cell) % gw;
        const int y1 = std::min(h, (gy + 1) * design.cluster_grid);
        const int x1 = std::min(w, (gx + 1) * design.cluster_grid);
        for (int y = gy * design.cluster_grid; y < y1; ++y)
            for (int x = gx * design.cluster_grid; x < x1; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                if (plane[i] >= 0) pool[plane[i]].push_back(i);
            }
    }

    std::vector<SamplePoint> points;
    long long next_id = 1;
    for (std::size_t s = 0; s < n_strata; ++s) {
        const std::size_t want = static_cast<std::size_t>(design.allocation[s]);
        if (pool[s].size() < want)
            throw InputError("stratum smaller than its allocation: " + design.strata[s].name);
        std::vector<std::size_t> sel =
            Rng(root.substream("stratum", s).next_u64()).sample_without_replacement(pool[s].size(), want);
        std::sort(sel.begin(), sel.end());
        for (std::size_t k : sel) {
            const std::size_t i = pool[s][k];
            SamplePoint p;
            p.point_id = next_id++;
            p.row = static_cast<int>(i / w);
            p.col = static_cast<int>(i % w);
            p.stratum = static_cast<int>(s);
            points.push_back(p);
        }
    }
    return points;
}

// ---------------------------------------------------------------------------
// Confusion matrix and stratified estimators
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
    std::vector<StratumDef> strata;
    std::vector<long long> stratum_pixels;
    // joint counts per stratum: [stratum][predicted][reference]
    std::vector<std::array<std::array<long long, kNumClasses>, kNumClasses>> joint;

    long long samples_in(std::size_t s) const {
        long long n = 0;
        for (int p = 0; p < kNumClasses; ++p)
            for (int r = 0; r < kNumClasses; ++r) n += joint[s][p][r];
        return n;
    }
    long long ref_count(std::size_t s, int r) const {
        long long n = 0;
        for (int p = 0; p < kNumClasses; ++p) n += joint[s][p][r];
        return n;
    }
    long long pred_count(std::size_t s, int p) const {
        long long n = 0;
        for (int r = 0; r < kNumClasses; ++r) n += joint[s][p][r];
        return n;
    }
    long long correct_count(std::size_t s) const {
        long long n = 0;
        for (int c = 0; c < kNumClasses; ++c) n += joint[s][c][c];
        return n;
    }
    std::array<std::array<long long, kNumClasses>, kNumClasses> pooled() const {
        std::array<std::array<long long, kNumClasses>, kNumClasses> m{};
        for (std::size_t s = 0; s < joint.size(); ++s)
            for (int p = 0; p < kNumClasses; ++p)
                for (int r = 0; r < kNumClasses; ++r) m[p][r] += joint[s][p][r];
        return m;
    }
};

inline ConfusionMatrix confusion(const std::vector<SamplePoint>& points,
                                 const std::vector<StratumDef>& strata,
                                 const std::vector<long long>& stratum_pixels) {
    if (strata.size() != stratum_pixels.size()) throw InputError("confusion: strata/areas mismatch");
    ConfusionMatrix cm;
    cm.strata = strata;
    cm.stratum_pixels = stratum_pixels;
    cm.joint.assign(strata.size(), {});
    for (const auto& p : points) {
        if (p.stratum < 0 || p.stratum >= static_cast<int>(strata.size()))
            throw InputError("confusion: point stratum out of range");
        if (p.reference >= kNumClasses || p.predicted >= kNumClasses)
            throw InputError("confusion: label outside class set");
        ++cm.joint[p.stratum][p.predicted][p.reference];
    }
    return cm;
}

struct Accuracy {
    double value = 0.0;
    double se = 0.0;
    double ci95 = 0.0;
    bool defined = false;
};

struct ClassEstimate {
    double area = 0.0;
    double se = 0.0;
    double ci95 = 0.0;
};

struct AreaEstimate {
    double total_area = 0.0;
    double unit_area = 1.0;
    std::array<ClassEstimate, kNumClasses> per_class{};
    Accuracy oa;
    std::array<Accuracy, kNumClasses> ua{};
    std::array<Accuracy, kNumClasses> pa{};
    // exact pixel-count areas as rationals over a common denominator
    std::array<__int128, kNumClasses> area_num{};
    __int128 area_den = 1;
};

namespace detail {

inline __int128 gcd128(__int128 a, __int128 b) {
    while (b != 0) {
        const __int128 t = a % b;
        a = b;
        b = t;
    }
    return a < 0 ? -a : a;
}

}  // namespace detail

// Stratified estimators: cell proportions W_i * n_ij / n_i, areas scaled by
// the full region, standard errors from within-stratum binomial variance,
// ratio-estimator accuracies with linearized variances. 95% CIs use 1.96.
inline AreaEstimate stratified_estimates(const ConfusionMatrix& cm, double unit_area = 1.0) {
    const std::size_t ns = cm.strata.size();
    if (ns == 0) throw InputError("stratified_estimates: empty matrix");
    long long total_pixels = 0;
    for (long long a : cm.stratum_pixels) total_pixels += a;
    if (total_pixels <= 0) throw InputError("stratified_estimates: empty region");

    std::vector<long long> n(ns);
    for (std::size_t s = 0; s < ns; ++s) {
        n[s] = cm.samples_in(s);
        if (n[s] == 0) throw InputError("stratified_estimates: zero-sample stratum " + cm.strata[s].name);
        if (n[s] < 2) throw InputError("stratified_estimates: stratum needs at least 2 samples");
    }

    AreaEstimate est;
    est.unit_area = unit_area;
    est.total_area = static_cast<double>(total_pixels) * unit_area;

    // exact rational pixel areas over the lcm of the per-stratum sample sizes
    __int128 lcm = 1;
    for (std::size_t s = 0; s < ns; ++s) {
        const __int128 g = detail::gcd128(lcm, n[s]);
        lcm = lcm / g * n[s];
        if (lcm > (__int128(1) << 100)) throw NumericError("stratified_estimates: denominator overflow");
    }
    est.area_den = lcm;

    const double w_denom = static_cast<double>(total_pixels);
    for (int j = 0; j < kNumClasses; ++j) {
        __int128 num = 0;
        double var = 0.0;
        for (std::size_t s = 0; s < ns; ++s) {
            const long long nij = cm.ref_count(s, j);
            num += static_cast<__int128>(cm.stratum_pixels[s]) * nij * (lcm / n[s]);
            const double wi = static_cast<double>(cm.stratum_pixels[s]) / w_denom;
            const double r = static_cast<double>(nij) / static_cast<double>(n[s]);
            var += wi * wi * r * (1.0 - r) / static_cast<double>(n[s] - 1);
        }
        est.area_num[j] = num;
        est.per_class[j].area = static_cast<double>(num) / static_cast<double>(lcm) * unit_area;
        est.per_class[j].se = est.total_area * std::sqrt(var);
        est.per_class[j].ci95 = 1.96 * est.per_class[j].se;
    }

    // overall accuracy
    {
        double val = 0.0, var = 0.0;
        for (std::size_t s = 0; s < ns; ++s) {
            const double wi = static_cast<double>(cm.stratum_pixels[s]) / w_denom;
            const double r = static_cast<double>(cm.correct_count(s)) / static_cast<double>(n[s]);
            val += wi * r;
            var += wi * wi * r * (1.0 - r) / static_cast<double>(n[s] - 1);
        }
        est.oa.value = val;
        est.oa.se = std::sqrt(var);
        est.oa.ci95 = 1.96 * est.oa.se;
        est.oa.defined = true;
    }

    // user's and producer's accuracy as ratio estimators
    auto ratio_accuracy = [&](int c, bool users) {
        Accuracy acc;
        double xhat = 0.0, yhat = 0.0;
        for (std::size_t s = 0; s < ns; ++s) {
            const double wi = static_cast<double>(cm.stratum_pixels[s]) / w_denom;
            const double xs = static_cast<double>(cm.joint[s][c][c]);
            const double ys = static_cast<double>(users ? cm.pred_count(s, c) : cm.ref_count(s, c));
            xhat += wi * xs / static_cast<double>(n[s]);
            yhat += wi * ys / static_cast<double>(n[s]);
        }
        if (yhat <= 0.0) return acc;  // class absent; undefined
        const double r = xhat / yhat;
        double var = 0.0;
        for (std::size_t s = 0; s < ns; ++s) {
            const double wi = static_cast<double>(cm.stratum_pixels[s]) / w_denom;
            const double xs = static_cast<double>(cm.joint[s][c][c]);
            const double ys = static_cast<double>(users ? cm.pred_count(s, c) : cm.ref_count(s, c));
            // per-point deviations d = x - r*y take only three values; use the
            // closed-form sums (x^2 = x, y^2 = y, xy = x for indicator data)
            const double sum_d = xs - r * ys;
            const double sum_d2 = xs * (1.0 - 2.0 * r) + r * r * ys;
            const double nn = static_cast<double>(n[s]);
            const double sample_var = (sum_d2 - sum_d * sum_d / nn) / (nn - 1.0);
            var += wi * wi * sample_var / nn;
        }
        acc.value = r;
        acc.se = std::sqrt(std::max(0.0, var)) / yhat;
        acc.ci95 = 1.96 * acc.se;
        acc.defined = true;
        return acc;
    };
    for (int c = 0; c < kNumClasses; ++c) {
        est.ua[c] = ratio_accuracy(c, true);
        est.pa[c] = ratio_accuracy(c, false);
    }
    return est;
}

// F1 from pooled counts, ignoring stratum weights.
inline double f1_score(const ConfusionMatrix& cm, int c) {
    if (c < 0 || c >= kNumClasses) throw InputError("f1_score: class out of range");
    const auto m = cm.pooled();
    long long pred = 0, ref = 0;
    for (int r = 0; r < kNumClasses; ++r) pred += m[c][r];
    for (int p = 0; p < kNumClasses; ++p) ref += m[p][c];
    if (pred == 0 || ref == 0) throw InputError("f1_score: empty class " + std::to_string(c));
    const double precision = static_cast<double>(m[c][c]) / static_cast<double>(pred);
    const double recall = static_cast<double>(m[c][c]) / static_cast<double>(ref);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

inline std::map<int, double> f1_scores(const ConfusionMatrix& cm) {
    const auto m = cm.pooled();
    std::map<int, double> out;
    for (int c = 0; c < kNumClasses; ++c) {
        long long pred = 0, ref = 0;
        for (int r = 0; r < kNumClasses; ++r) pred += m[c][r];
        for (int p = 0; p < kNumClasses; ++p) ref += m[p][c];
        if (pred == 0 && ref == 0) continue;
        if (pred == 0 || ref == 0) {
            out[c] = 0.0;
            continue;
        }
        out[c] = f1_score(cm, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-quality metrics
// ---------------------------------------------------------------------------

namespace detail {

struct ClusterMoments {
    std::vector<double> mean;
    double sigma = 0.0;  // sqrt of mean per-dimension variance
};

inline ClusterMoments cluster_moments(const float* pts, std::size_t n, int d) {
    ClusterMoments m;
    m.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k) m.mean[k] += pts[i * d + k];
    for (int k = 0; k < d; ++k) m.mean[k] /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k) {
            const double diff = pts[i * d + k] - m.mean[k];
            var += diff * diff;
        }
    m.sigma = std::sqrt(var / (static_cast<double>(n) * d));
    return m;
}

}  // namespace detail

// SI = |mu_i - mu_j| / (sigma_i + sigma_j), Euclidean mean distance over RMS
// per-dimension spread.
inline double separability_index(const std::vector<float>& a, std::size_t na,
                                 const std::vector<float>& b, std::size_t nb, int d) {
    if (na < 2 || nb < 2) throw InputError("separability_index: degenerate single-point cluster");
    if (a.size() != na * static_cast<std::size_t>(d) || b.size() != nb * static_cast<std::size_t>(d))
        throw InputError("separability_index: size mismatch");
    const auto ma = detail::cluster_moments(a.data(), na, d);
    const auto mb = detail::cluster_moments(b.data(), nb, d);
    double dist2 = 0.0;
    for (int k = 0; k < d; ++k) {
        const double diff = ma.mean[k] - mb.mean[k];
        dist2 += diff * diff;
    }
    const double dist = std::sqrt(dist2);
    if (dist == 0.0) return 0.0;
    const double denom = ma.sigma + mb.sigma;
    if (denom == 0.0) return std::numeric_limits<double>::infinity();
    return dist / denom;
}

inline double coefficient_of_variation(const std::vector<float>& a, std::size_t n, int d) {
    if (n < 1) throw InputError("coefficient_of_variation: empty cluster");
    if (a.size() != n * static_cast<std::size_t>(d))
        throw InputError("coefficient_of_variation: size mismatch");
    const auto m = detail::cluster_moments(a.data(), n, d);
    double norm2 = 0.0;
    for (int k = 0; k < d; ++k) norm2 += m.mean[k] * m.mean[k];
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) throw InputError("undefined CV: zero-mean cluster");
    return m.sigma / norm;
}

// Mean SI over all cluster pairs with at least 2 members each.
inline double mean_pairwise_si(const std::vector<float>& points, std::size_t n, int d,
                               const std::vector<int>& assignment, int k) {
    if (assignment.size() != n) throw InputError("mean_pairwise_si: assignment size mismatch");
    std::vector<std::vector<float>> groups(k);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = assignment[i];
        if (c < 0 || c >= k) throw InputError("mean_pairwise_si: cluster out of range");
        groups[c].insert(groups[c].end(), points.begin() + i * d, points.begin() + (i + 1) * d);
    }
    double total = 0.0;
    int pairs = 0;
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            const std::size_t ni = groups[i].size() / d, nj = groups[j].size() / d;
            if (ni < 2 || nj < 2) continue;
            total += separability_index(groups[i], ni, groups[j], nj, d);
            ++pairs;
        }
    if (pairs == 0) throw InputError("mean_pairwise_si: no comparable cluster pairs");
    return total / pairs;
}

// ---------------------------------------------------------------------------
// Temporal consistency
// ---------------------------------------------------------------------------

inline double temporal_consistency(const std::vector<LabelMask>& maps,
                                   const std::vector<std::pair<int, int>>& points) {
    if (maps.empty()) throw InputError("temporal_consistency: no maps");
    if (points.empty()) throw InputError("temporal_consistency: no points");
    for (const auto& m : maps) {
        m.validate();
        if (m.height != maps[0].height || m.width != maps[0].width)
            throw InputError("temporal_consistency: extent mismatch");
    }
    long long consistent = 0;
    for (const auto& [row, col] : points) {
        if (row < 0 || row >= maps[0].height || col < 0 || col >= maps[0].width)
            throw InputError("temporal_consistency: point outside extent");
        bool all = true;
        for (const auto& m : maps)
            if (m.codes[static_cast<std::size_t>(row) * m.width + col] != kCashew) {
                all = false;
                break;
            }
        if (all) ++consistent;
    }
    return static_cast<double>(consistent) / static_cast<double>(points.size());
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void write_sample_csv(const std::string& path, const std::vector<SamplePoint>& points) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write samples: " + path);
    out << "point_id,row,col,stratum,reference,predicted\n";
    for (const auto& p : points)
        out << p.point_id << ',' << p.row << ',' << p.col << ',' << p.stratum << ','
            << static_cast<int>(p.reference) << ',' << static_cast<int>(p.predicted) << '\n';
    if (!out) throw InputError("short write on samples: " + path);
}

inline std::vector<SamplePoint> read_sample_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open samples: " + path);
    std::string line;
    if (!std::getline(in, line)) throw InputError("empty sample file: " + path);
    if (line.rfind("point_id,row,col,stratum,reference,predicted", 0) != 0)
        throw InputError("bad sample csv header: " + path);
    std::vector<SamplePoint> points;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        SamplePoint p;
        char c1, c2, c3, c4, c5;
        int ref = 0, pred = 0;
        if (!(ss >> p.point_id >> c1 >> p.row >> c2 >> p.col >> c3 >> p.stratum >> c4 >> ref >> c5 >>
              pred) ||
            c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',')
            throw InputError("bad sample row at line " + std::to_string(lineno) + " in " + path);
        p.reference = static_cast<std::uint8_t>(ref);
        p.predicted = static_cast<std::uint8_t>(pred);
        points.push_back(p);
    }
    return points;
}

inline nlohmann::json estimate_to_json(const AreaEstimate& est,
                                       const std::vector<std::string>& class_names = {
                                           "mixed_trees", "cashew", "builtup", "cropland_others"}) {
    nlohmann::json j;
    j["total_area"] = est.total_area;
    j["unit_area"] = est.unit_area;
    auto acc_json = [](const Accuracy& a) -> nlohmann::json {
        if (!a.defined) return nullptr;
        return {{"value", a.value}, {"se", a.se}, {"ci95", a.ci95}};
    };
    auto& classes = j["classes"] = nlohmann::json::array();
    for (int c = 0; c < kNumClasses; ++c) {
        nlohmann::json e;
        e["class"] = c;
        e["name"] = c < static_cast<int>(class_names.size()) ? class_names[c] : "";
        e["area"] = est.per_class[c].area;
        e["se"] = est.per_class[c].se;
        e["ci95"] = est.per_class[c].ci95;
        e["users_accuracy"] = acc_json(est.ua[c]);
        e["producers_accuracy"] = acc_json(est.pa[c]);
        classes.push_back(std::move(e));
    }
    j["overall_accuracy"] = acc_json(est.oa);
    return j;
}

}  // namespace cashewmap
