#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace dq {

using Vec = std::vector<double>;

// Function sampled on a uniform 1-D grid, m components per node.
// Node i sits at start + i*h; data is node-major.
class GridFunction {
public:
    GridFunction() = default;
    GridFunction(double start, double h, std::size_t n, std::size_t dim = 1);

    static GridFunction sample(double start, double h, std::size_t n,
                               const std::function<double(double)>& f);
    static GridFunction sample_vec(double start, double h, std::size_t n, std::size_t dim,
                                   const std::function<Vec(double)>& f);

    double start() const { return start_; }
    double step() const { return h_; }
    double end() const { return start_ + h_ * static_cast<double>(n_ - 1); }
    std::size_t size() const { return n_; }
    std::size_t dim() const { return dim_; }
    double coord(std::size_t i) const { return start_ + h_ * static_cast<double>(i); }

    double& operator()(std::size_t i, std::size_t c = 0) { return data_[i * dim_ + c]; }
    double operator()(std::size_t i, std::size_t c = 0) const { return data_[i * dim_ + c]; }
    Vec node(std::size_t i) const;
    void set_node(std::size_t i, const Vec& v);

    GridFunction component(std::size_t c) const;
    bool same_axis(const GridFunction& o) const;
    double sup_norm() const;

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

private:
    double start_ = 0.0;
    double h_ = 1.0;
    std::size_t n_ = 0;
    std::size_t dim_ = 1;
    std::vector<double> data_;
};

// Field on the (t,w) box [0,t_end] x [0,w_end]; uniform in both axes, m components.
struct WField {
    double ht = 1.0, hw = 1.0;
    std::size_t nt = 0, nw = 0, dim = 1;
    std::vector<double> data; // index: (it*nw + iw)*dim + c

    WField() = default;
    WField(double ht_, double hw_, std::size_t nt_, std::size_t nw_, std::size_t dim_ = 1)
        : ht(ht_), hw(hw_), nt(nt_), nw(nw_), dim(dim_),
          data(nt_ * nw_ * dim_, 0.0) {}

    double t(std::size_t it) const { return ht * static_cast<double>(it); }
    double w(std::size_t iw) const { return hw * static_cast<double>(iw); }
    double& at(std::size_t it, std::size_t iw, std::size_t c = 0) {
        return data[(it * nw + iw) * dim + c];
    }
    double at(std::size_t it, std::size_t iw, std::size_t c = 0) const {
        return data[(it * nw + iw) * dim + c];
    }
    GridFunction row(std::size_t it) const;           // w-slice at fixed t
    void set_row(std::size_t it, const GridFunction& g);
    GridFunction trace() const;                       // w = 0 values over t
    double sup_diff(const WField& o) const;
};

// Solution sampled at fixed positive x nodes over a t-grid, plus the x=0 trace.
struct XField {
    double ht = 1.0;
    std::size_t nt = 0, dim = 1;
    std::vector<double> x_nodes;                       // positive, descending
    std::vector<double> data;                          // (it*nx + n)*dim + c
    GridFunction zero_trace;                           // over t, may be empty

    XField() = default;
    XField(double ht_, std::size_t nt_, std::vector<double> xs, std::size_t dim_ = 1)
        : ht(ht_), nt(nt_), dim(dim_), x_nodes(std::move(xs)),
          data(nt_ * x_nodes.size() * dim_, 0.0) {}

    std::size_t nx() const { return x_nodes.size(); }
    double t(std::size_t it) const { return ht * static_cast<double>(it); }
    double& at(std::size_t it, std::size_t n, std::size_t c = 0) {
        return data[(it * nx() + n) * dim + c];
    }
    double at(std::size_t it, std::size_t n, std::size_t c = 0) const {
        return data[(it * nx() + n) * dim + c];
    }
};

// C^2 boundary data on a t-grid: value and its first two t-derivatives.
struct TraceData {
    GridFunction value, dot, ddot;

    static TraceData from_callables(double h, std::size_t n, std::size_t dim,
                                    const std::function<Vec(double)>& f,
                                    const std::function<Vec(double)>& fdot,
                                    const std::function<Vec(double)>& fddot);
    // Derivatives by second-order finite differences of the sampled values.
    static TraceData from_values(const GridFunction& v);
};

} // namespace dq
