#include "dq/output.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dq {
namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("output: cannot write '" + path + "'");
    return out;
}

void component_header(std::ofstream& out, const std::string& prefix, std::size_t dim) {
    for (std::size_t c = 0; c < dim; ++c) out << ',' << prefix << '_' << (c + 1);
    out << '\n';
}

} // namespace

void write_wfield_csv(const std::string& path, const WField& A, const std::string& prefix) {
    std::ofstream out = open_out(path);
    out << "t,w";
    component_header(out, prefix, A.dim);
    for (std::size_t it = 0; it < A.nt; ++it)
        for (std::size_t iw = 0; iw < A.nw; ++iw) {
            out << fmt(A.t(it)) << ',' << fmt(A.w(iw));
            for (std::size_t c = 0; c < A.dim; ++c) out << ',' << fmt(A.at(it, iw, c));
            out << '\n';
        }
}

void write_xfield_csv(const std::string& path, const XField& f, const std::string& prefix) {
    std::ofstream out = open_out(path);
    out << "t,x";
    component_header(out, prefix, f.dim);
    for (std::size_t it = 0; it < f.nt; ++it)
        for (std::size_t n = 0; n < f.nx(); ++n) {
            out << fmt(f.t(it)) << ',' << fmt(f.x_nodes[n]);
            for (std::size_t c = 0; c < f.dim; ++c) out << ',' << fmt(f.at(it, n, c));
            out << '\n';
        }
}

void write_profile_csv(const std::string& path, const std::vector<double>& x,
                       const std::vector<Vec>& rows, const std::string& prefix) {
    if (x.size() != rows.size())
        throw std::invalid_argument("write_profile_csv: one row per x node required");
    std::ofstream out = open_out(path);
    out << 'x';
    component_header(out, prefix, rows.empty() ? 1 : rows.front().size());
    for (std::size_t n = 0; n < x.size(); ++n) {
        out << fmt(x[n]);
        for (double v : rows[n]) out << ',' << fmt(v);
        out << '\n';
    }
}

void write_table_csv(const std::string& path, const std::vector<std::string>& headers,
                     const std::vector<Vec>& rows) {
    std::ofstream out = open_out(path);
    for (std::size_t i = 0; i < headers.size(); ++i) {
        if (i) out << ',';
        out << headers[i];
    }
    out << '\n';
    for (const Vec& r : rows) {
        if (r.size() != headers.size())
            throw std::invalid_argument("write_table_csv: row width must match the header");
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i) out << ',';
            out << fmt(r[i]);
        }
        out << '\n';
    }
}

void write_log_decay_svg(const std::string& path, const std::vector<double>& x,
                         const std::vector<double>& values, const std::string& title) {
    if (x.size() != values.size() || x.size() < 2)
        throw std::invalid_argument("write_log_decay_svg: matching x/value lists required");

    const double W = 640.0, H = 420.0, ml = 70.0, mr = 20.0, mt = 40.0, mb = 50.0;
    std::vector<double> u(x.size()), y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        u[i] = 1.0 / x[i];
        y[i] = std::log10(std::max(std::abs(values[i]), 1e-300));
    }
    double ulo = *std::min_element(u.begin(), u.end());
    double uhi = *std::max_element(u.begin(), u.end());
    double ylo = *std::min_element(y.begin(), y.end());
    double yhi = *std::max_element(y.begin(), y.end());
    if (uhi <= ulo) uhi = ulo + 1.0;
    if (yhi <= ylo) yhi = ylo + 1.0;
    auto px = [&](double v) { return ml + (v - ulo) / (uhi - ulo) * (W - ml - mr); };
    auto py = [&](double v) { return H - mb - (v - ylo) / (yhi - ylo) * (H - mt - mb); };

    std::ofstream out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt2(W) << "\" height=\""
        << fmt2(H) << "\" viewBox=\"0 0 " << fmt2(W) << ' ' << fmt2(H) << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << fmt2(W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";
    out << "<line x1=\"" << fmt2(ml) << "\" y1=\"" << fmt2(H - mb) << "\" x2=\"" << fmt2(W - mr)
        << "\" y2=\"" << fmt2(H - mb) << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << fmt2(ml) << "\" y1=\"" << fmt2(mt) << "\" x2=\"" << fmt2(ml)
        << "\" y2=\"" << fmt2(H - mb) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << fmt2((ml + W - mr) / 2) << "\" y=\"" << fmt2(H - 14)
        << "\" text-anchor=\"middle\" font-size=\"13\">1/x</text>\n";
    out << "<text x=\"18\" y=\"" << fmt2((mt + H - mb) / 2)
        << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
        << fmt2((mt + H - mb) / 2) << ")\">log10 |value|</text>\n";
    out << "<text x=\"" << fmt2(ml) << "\" y=\"" << fmt2(H - mb + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt2(ulo) << "</text>\n";
    out << "<text x=\"" << fmt2(W - mr) << "\" y=\"" << fmt2(H - mb + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt2(uhi) << "</text>\n";
    out << "<text x=\"" << fmt2(ml - 8) << "\" y=\"" << fmt2(py(ylo))
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt2(ylo) << "</text>\n";
    out << "<text x=\"" << fmt2(ml - 8) << "\" y=\"" << fmt2(py(yhi))
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt2(yhi) << "</text>\n";
    out << "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (i) out << ' ';
        out << fmt2(px(u[i])) << ',' << fmt2(py(y[i]));
    }
    out << "\"/>\n</svg>\n";
}

} // namespace dq
