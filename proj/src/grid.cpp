#include "dq/grid.hpp"
#include "dq/numerics.hpp"

#include <cmath>
#include <stdexcept>

namespace dq {

GridFunction::GridFunction(double start, double h, std::size_t n, std::size_t dim)
    : start_(start), h_(h), n_(n), dim_(dim), data_(n * dim, 0.0) {
    if (n < 2) throw std::invalid_argument("GridFunction: need at least 2 nodes");
    if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("GridFunction: step must be positive");
    if (dim < 1) throw std::invalid_argument("GridFunction: dim must be >= 1");
}

GridFunction GridFunction::sample(double start, double h, std::size_t n,
                                  const std::function<double(double)>& f) {
    GridFunction g(start, h, n, 1);
    for (std::size_t i = 0; i < n; ++i) g(i) = f(g.coord(i));
    return g;
}

GridFunction GridFunction::sample_vec(double start, double h, std::size_t n, std::size_t dim,
                                      const std::function<Vec(double)>& f) {
    GridFunction g(start, h, n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        Vec v = f(g.coord(i));
        if (v.size() != dim) throw std::invalid_argument("sample_vec: callback dim mismatch");
        g.set_node(i, v);
    }
    return g;
}

Vec GridFunction::node(std::size_t i) const {
    Vec v(dim_);
    for (std::size_t c = 0; c < dim_; ++c) v[c] = data_[i * dim_ + c];
    return v;
}

void GridFunction::set_node(std::size_t i, const Vec& v) {
    for (std::size_t c = 0; c < dim_; ++c) data_[i * dim_ + c] = v[c];
}

GridFunction GridFunction::component(std::size_t c) const {
    GridFunction g(start_, h_, n_, 1);
    for (std::size_t i = 0; i < n_; ++i) g(i) = data_[i * dim_ + c];
    return g;
}

bool GridFunction::same_axis(const GridFunction& o) const {
    double scale = std::max(std::abs(h_), std::abs(o.h_));
    return n_ == o.n_ && std::abs(start_ - o.start_) <= 1e-12 * std::max(1.0, std::abs(start_)) &&
           std::abs(h_ - o.h_) <= 1e-12 * scale;
}

double GridFunction::sup_norm() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

GridFunction WField::row(std::size_t it) const {
    GridFunction g(0.0, hw, nw, dim);
    for (std::size_t iw = 0; iw < nw; ++iw)
        for (std::size_t c = 0; c < dim; ++c) g(iw, c) = at(it, iw, c);
    return g;
}

void WField::set_row(std::size_t it, const GridFunction& g) {
    if (g.size() != nw || g.dim() != dim) throw std::invalid_argument("WField::set_row: shape mismatch");
    for (std::size_t iw = 0; iw < nw; ++iw)
        for (std::size_t c = 0; c < dim; ++c) at(it, iw, c) = g(iw, c);
}

GridFunction WField::trace() const {
    GridFunction g(0.0, ht, nt, dim);
    for (std::size_t it = 0; it < nt; ++it)
        for (std::size_t c = 0; c < dim; ++c) g(it, c) = at(it, 0, c);
    return g;
}

double WField::sup_diff(const WField& o) const {
    if (data.size() != o.data.size()) throw std::invalid_argument("WField::sup_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) m = std::max(m, std::abs(data[i] - o.data[i]));
    return m;
}

TraceData TraceData::from_callables(double h, std::size_t n, std::size_t dim,
                                    const std::function<Vec(double)>& f,
                                    const std::function<Vec(double)>& fdot,
                                    const std::function<Vec(double)>& fddot) {
    TraceData td;
    td.value = GridFunction::sample_vec(0.0, h, n, dim, f);
    td.dot = GridFunction::sample_vec(0.0, h, n, dim, fdot);
    td.ddot = GridFunction::sample_vec(0.0, h, n, dim, fddot);
    return td;
}

TraceData TraceData::from_values(const GridFunction& v) {
    TraceData td;
    td.value = v;
    td.dot = finite_diff(v, 1);
    td.ddot = finite_diff(v, 2);
    return td;
}

} // namespace dq
