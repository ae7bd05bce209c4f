#pragma once

// Shared helpers for the test suites: a central finite-difference gradient
// checker, small random-vector builders, and process/file utilities used by
// the CLI round-trip tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cashewmap/core.hpp"

namespace testutil {

using namespace cashewmap;

struct FdReport {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// Central finite differences over sampled coordinates of every parameter.
// `build` must reconstruct the same scalar graph from the current parameter
// values. The relative error uses a floor so near-zero gradients compare on
// an absolute scale commensurate with float32 forward noise.
//
// Coordinates whose error exceeds `refine_below` are retried at h/4 down to
// h/256 and the best agreement wins. In deep graphs a step of h can straddle
// a relu kink or flip a pool argmax (a bias shifts a whole channel at once),
// which corrupts the difference quotient even though the gradient is right; a
// real backward bug disagrees at every step size, so shrinking h only rescues
// measurement artifacts.
inline FdReport fd_check(ParameterSet& ps, const std::function<Tensor(TapeCtx&)>& build,
                         Rng pick, double h = 1e-2, double floor = 1e-2,
                         std::size_t per_param = 20, double refine_below = 1e-3) {
    TapeCtx ctx(ps);
    Tensor loss = build(ctx);
    loss.backward();

    FdReport rep;
    for (auto& [name, p] : ps.all_mutable()) {
        const std::vector<float>& grad = ctx.param(name).node()->grad;
        const std::size_t n = p.values->size();
        std::vector<std::size_t> chosen;
        if (n <= per_param) {
            chosen.resize(n);
            std::iota(chosen.begin(), chosen.end(), std::size_t{0});
        } else {
            chosen = pick.sample_without_replacement(n, per_param);
        }
        for (std::size_t i : chosen) {
            const float keep = (*p.values)[i];
            const double an = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            double best = 0.0;
            for (int level = 0; level < 5; ++level) {
                const double hh = h / std::pow(4.0, level);
                const float up = keep + static_cast<float>(hh);
                const float dn = keep - static_cast<float>(hh);
                (*p.values)[i] = up;
                TapeCtx cp(ps);
                const double lp = build(cp).item_f64();
                (*p.values)[i] = dn;
                TapeCtx cm(ps);
                const double lm = build(cm).item_f64();
                (*p.values)[i] = keep;
                const double fd = (lp - lm) / (static_cast<double>(up) - dn);
                const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
                best = level == 0 ? rel : std::min(best, rel);
                if (best <= refine_below) break;
            }
            if (best > rep.max_rel) {
                rep.max_rel = best;
                rep.worst = name + "[" + std::to_string(i) + "]";
            }
            ++rep.checked;
        }
    }
    return rep;
}

inline std::vector<float> rand_vec(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

// Magnitudes in [0.5, 1.5] with random signs; keeps reductions well scaled
// while avoiding near-zero weights.
inline std::vector<float> rand_signed(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v)
        x = static_cast<float>(rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
    return v;
}

inline Param& add_input(ParameterSet& ps, const std::string& name, Shape shape, Rng& rng,
                        double lo = -1.0, double hi = 1.0) {
    Param& p = ps.add_zeros(name, std::move(shape));
    for (auto& x : *p.values) x = static_cast<float>(rng.uniform(lo, hi));
    return p;
}

struct CmdResult {
    int status = -1;
    std::string output;
};

inline CmdResult run_cmd(const std::string& cmd) {
    CmdResult res;
    FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
    if (!pipe) return res;
    char buf[4096];
    while (std::size_t got = std::fread(buf, 1, sizeof(buf), pipe)) res.output.append(buf, got);
    const int rc = pclose(pipe);
    res.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return res;
}

inline std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testutil
