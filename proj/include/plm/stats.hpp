#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "plm/common.hpp"

namespace plm {

struct SummaryStats {
    double mean = 0.0;
    double std = 0.0;  // unbiased, n-1
    double q05 = 0.0;
    double q50 = 0.0;
    double q95 = 0.0;
};

// Quantile by linear interpolation of order statistics (sorted input).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double h = q * (static_cast<double>(n) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, n - 1);
    return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
}

inline SummaryStats summary_stats(const std::vector<double>& samples) {
    if (samples.empty()) throw ValidationError("summary_stats: empty input");
    SummaryStats s;
    const double n = static_cast<double>(samples.size());
    for (double x : samples) s.mean += x;
    s.mean /= n;
    if (samples.size() > 1) {
        double ss = 0.0;
        for (double x : samples) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / (n - 1.0));
    }
    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    s.q05 = quantile_sorted(sorted, 0.05);
    s.q50 = quantile_sorted(sorted, 0.50);
    s.q95 = quantile_sorted(sorted, 0.95);
    return s;
}

struct PdfPoint {
    double x = 0.0;
    double density = 0.0;
};

// Gaussian-kernel density on a 512-point grid over [min-3h, max+3h];
// default bandwidth is Silverman's rule. Degenerate samples collapse to a
// numerically narrow spike (bandwidth floored relative to the location).
inline std::vector<PdfPoint> kde(const std::vector<double>& samples,
                                 double bandwidth = 0.0) {
    if (samples.size() < 30) throw ValidationError("kde: need at least 30 samples");
    const SummaryStats s = summary_stats(samples);
    double h = bandwidth;
    if (h <= 0.0)
        h = 1.06 * s.std * std::pow(static_cast<double>(samples.size()), -0.2);
    if (h <= 0.0) h = std::max(std::abs(s.mean), 1.0) * 1e-9;  // spike path

    const double lo = *std::min_element(samples.begin(), samples.end()) - 3.0 * h;
    const double hi = *std::max_element(samples.begin(), samples.end()) + 3.0 * h;
    const int grid = 512;
    std::vector<PdfPoint> pdf(grid);
    const double inv_nh = 1.0 / (static_cast<double>(samples.size()) * h);
    for (int g = 0; g < grid; ++g) {
        const double x = lo + (hi - lo) * g / (grid - 1);
        double acc = 0.0;
        for (double xi : samples) acc += normal_pdf((x - xi) / h);
        pdf[g] = {x, acc * inv_nh};
    }
    return pdf;
}

inline double pdf_integral(const std::vector<PdfPoint>& pdf) {
    double acc = 0.0;
    for (std::size_t i = 1; i < pdf.size(); ++i)
        acc += 0.5 * (pdf[i].density + pdf[i - 1].density) * (pdf[i].x - pdf[i - 1].x);
    return acc;
}

// One-sample Kolmogorov-Smirnov statistic against Uniform(0,1).
inline double ks_uniform(std::vector<double> samples) {
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        d = std::max(d, std::abs((i + 1) / n - samples[i]));
        d = std::max(d, std::abs(samples[i] - i / n));
    }
    return d;
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(i / na - j / nb));
    }
    return d;
}

// Kendall's tau by Knight's O(n log n) inversion count (no-ties data).
namespace detail {
inline long long merge_count(std::vector<double>& v, std::vector<double>& buf,
                             std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    long long cnt = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[i] <= v[j]) buf[k++] = v[i++];
        else {
            cnt += static_cast<long long>(mid - i);
            buf[k++] = v[j++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + lo, buf.begin() + hi, v.begin() + lo);
    return cnt;
}
}  // namespace detail

inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n != y.size() || n < 2) throw ValidationError("kendall_tau: bad input sizes");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ys(n), buf(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
    const long long inv = detail::merge_count(ys, buf, 0, n);
    const long long total = static_cast<long long>(n) * (n - 1) / 2;
    return 1.0 - 2.0 * static_cast<double>(inv) / static_cast<double>(total);
}

}  // namespace plm
