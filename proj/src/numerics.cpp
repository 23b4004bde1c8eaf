#include "dq/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

namespace dq {

GridFunction finite_diff(const GridFunction& f, int order) {
    if (order != 1 && order != 2) throw std::invalid_argument("finite_diff: order must be 1 or 2");
    std::size_t n = f.size(), m = f.dim();
    if (order == 2 && n < 4) throw std::invalid_argument("finite_diff: need >= 4 nodes for order 2");
    double h = f.step();
    GridFunction g(f.start(), h, n, m);
    for (std::size_t c = 0; c < m; ++c) {
        if (order == 1) {
            g(0, c) = (-3.0 * f(0, c) + 4.0 * f(1, c) - f(2, c)) / (2.0 * h);
            for (std::size_t i = 1; i + 1 < n; ++i)
                g(i, c) = (f(i + 1, c) - f(i - 1, c)) / (2.0 * h);
            g(n - 1, c) = (3.0 * f(n - 1, c) - 4.0 * f(n - 2, c) + f(n - 3, c)) / (2.0 * h);
        } else {
            double h2 = h * h;
            g(0, c) = (2.0 * f(0, c) - 5.0 * f(1, c) + 4.0 * f(2, c) - f(3, c)) / h2;
            for (std::size_t i = 1; i + 1 < n; ++i)
                g(i, c) = (f(i + 1, c) - 2.0 * f(i, c) + f(i - 1, c)) / h2;
            g(n - 1, c) = (2.0 * f(n - 1, c) - 5.0 * f(n - 2, c) + 4.0 * f(n - 3, c) - f(n - 4, c)) / h2;
        }
    }
    return g;
}

GridFunction cumulative_integral(const GridFunction& f) {
    std::size_t n = f.size(), m = f.dim();
    double h = f.step();
    GridFunction g(f.start(), h, n, m);
    for (std::size_t c = 0; c < m; ++c) {
        double acc = 0.0;
        g(0, c) = 0.0;
        for (std::size_t i = 1; i < n; ++i) {
            acc += 0.5 * h * (f(i - 1, c) + f(i, c));
            g(i, c) = acc;
        }
    }
    return g;
}

namespace {

// Fritsch-Carlson slopes on a uniform grid.
std::vector<double> pchip_slopes(const std::vector<double>& y, double h) {
    std::size_t n = y.size();
    std::vector<double> delta(n - 1), d(n);
    for (std::size_t i = 0; i + 1 < n; ++i) delta[i] = (y[i + 1] - y[i]) / h;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (delta[i - 1] * delta[i] <= 0.0)
            d[i] = 0.0;
        else
            d[i] = 2.0 * delta[i - 1] * delta[i] / (delta[i - 1] + delta[i]);
    }
    auto end_slope = [](double del0, double del1) {
        double s = 1.5 * del0 - 0.5 * del1;
        if (s * del0 <= 0.0) return 0.0;
        if (del0 * del1 < 0.0 && std::abs(s) > 3.0 * std::abs(del0)) return 3.0 * del0;
        return s;
    };
    if (n == 2) {
        d[0] = d[1] = delta[0];
    } else {
        d[0] = end_slope(delta[0], delta[1]);
        d[n - 1] = end_slope(delta[n - 2], delta[n - 3]);
    }
    return d;
}

double hermite_eval(double y0, double y1, double d0, double d1, double h, double s) {
    // s in [0,1] across the segment
    double s2 = s * s, s3 = s2 * s;
    double h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    double h10 = s3 - 2.0 * s2 + s;
    double h01 = -2.0 * s3 + 3.0 * s2;
    double h11 = s3 - s2;
    return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
}

double hermite_deriv(double y0, double y1, double d0, double d1, double h, double s) {
    double s2 = s * s;
    double g00 = (6.0 * s2 - 6.0 * s) / h;
    double g10 = 3.0 * s2 - 4.0 * s + 1.0;
    double g01 = (-6.0 * s2 + 6.0 * s) / h;
    double g11 = 3.0 * s2 - 2.0 * s;
    return g00 * y0 + g10 * d0 + g01 * y1 + g11 * d1;
}

} // namespace

MonotoneInterpolant::MonotoneInterpolant(const GridFunction& f, std::size_t comp)
    : start_(f.start()), h_(f.step()) {
    std::size_t n = f.size();
    y_.resize(n);
    for (std::size_t i = 0; i < n; ++i) y_[i] = f(i, comp);
    d_ = pchip_slopes(y_, h_);
}

std::size_t MonotoneInterpolant::segment(double p) const {
    double s = (p - start_) / h_;
    auto i = static_cast<long>(std::floor(s));
    long imax = static_cast<long>(y_.size()) - 2;
    return static_cast<std::size_t>(std::clamp(i, 0L, imax));
}

double MonotoneInterpolant::operator()(double p) const {
    std::size_t i = segment(p);
    double s = (p - (start_ + h_ * static_cast<double>(i))) / h_;
    s = std::clamp(s, 0.0, 1.0);
    return hermite_eval(y_[i], y_[i + 1], d_[i], d_[i + 1], h_, s);
}

double MonotoneInterpolant::derivative(double p) const {
    std::size_t i = segment(p);
    double s = (p - (start_ + h_ * static_cast<double>(i))) / h_;
    s = std::clamp(s, 0.0, 1.0);
    return hermite_deriv(y_[i], y_[i + 1], d_[i], d_[i + 1], h_, s);
}

double MonotoneInterpolant::invert(double y) const {
    std::size_t n = y_.size();
    bool increasing = y_[n - 1] > y_[0];
    double lo = y_[0], hi = y_[n - 1];
    if (!increasing) std::swap(lo, hi);
    if (y <= lo) return increasing ? start_ : start_ + h_ * static_cast<double>(n - 1);
    if (y >= hi) return increasing ? start_ + h_ * static_cast<double>(n - 1) : start_;
    // locate segment by bisection over node values
    std::size_t a = 0, b = n - 1;
    while (b - a > 1) {
        std::size_t mid = (a + b) / 2;
        if ((y_[mid] < y) == increasing)
            a = mid;
        else
            b = mid;
    }
    double pl = start_ + h_ * static_cast<double>(a);
    double pr = pl + h_;
    double p = 0.5 * (pl + pr);
    for (int it = 0; it < 60; ++it) {
        double v = (*this)(p) - y;
        if (std::abs(v) < 1e-15 * std::max(1.0, std::abs(y))) break;
        if ((v > 0.0) == increasing)
            pr = p;
        else
            pl = p;
        double dv = derivative(p);
        double pn = (dv != 0.0) ? p - v / dv : 0.5 * (pl + pr);
        p = (pn > pl && pn < pr) ? pn : 0.5 * (pl + pr);
    }
    return p;
}

Vec interp(const GridFunction& f, double p, InterpKind kind) {
    if (p < f.start() - 1e-9 * f.step() || p > f.end() + 1e-9 * f.step())
        throw std::domain_error("interp: point outside grid domain");
    std::size_t m = f.dim();
    Vec out(m);
    if (kind == InterpKind::Linear) {
        double s = (p - f.start()) / f.step();
        auto i = static_cast<long>(std::floor(s));
        long imax = static_cast<long>(f.size()) - 2;
        std::size_t i0 = static_cast<std::size_t>(std::clamp(i, 0L, imax));
        double u = std::clamp(s - static_cast<double>(i0), 0.0, 1.0);
        for (std::size_t c = 0; c < m; ++c) out[c] = (1.0 - u) * f(i0, c) + u * f(i0 + 1, c);
        return out;
    }
    for (std::size_t c = 0; c < m; ++c) out[c] = MonotoneInterpolant(f, c)(p);
    return out;
}

double interp_scalar(const GridFunction& f, double p, InterpKind kind) {
    return interp(f, p, kind)[0];
}

namespace {
double simpson_rec(const std::function<double(double)>& f, double a, double b,
                   double fa, double fm, double fb, double whole, double tol, int depth) {
    double m = 0.5 * (a + b);
    double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    double flm = f(lm), frm = f(rm);
    double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
        return left + right + delta / 15.0;
    return simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}
} // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol, int max_depth) {
    if (a == b) return 0.0;
    double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned nthreads) {
    if (n == 0) return;
    if (nthreads <= 1 || n < 4) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    unsigned k = std::min<std::size_t>(nthreads, n);
    std::vector<std::thread> pool;
    pool.reserve(k);
    for (unsigned t = 0; t < k; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += k) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

unsigned resolve_thread_count(unsigned requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("DIFFQUOT_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
    if (!(lo > 0.0) || !(hi > lo)) throw std::invalid_argument("log_spaced: need 0 < lo < hi");
    if (n < 2) throw std::invalid_argument("log_spaced: need n >= 2");
    std::vector<double> xs(n);
    double r = std::log(lo / hi) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) xs[i] = hi * std::exp(r * static_cast<double>(i));
    xs.front() = hi;
    xs.back() = lo;
    return xs;
}

} // namespace dq
