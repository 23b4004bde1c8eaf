#include "dq/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dq/numerics.hpp"

namespace dq {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
}

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) fail("unknown field '" + it.key() + "' in '" + where + "'");
    }
}

const json& block(const json& root, const std::string& name) {
    const json& b = root.at(name);
    if (!b.is_object()) fail("'" + name + "' must be an object");
    return b;
}

double number_field(const json& obj, const std::string& where, const char* key) {
    const json& v = obj.at(key);
    if (!v.is_number()) fail("'" + where + "." + key + "' must be a number");
    return v.get<double>();
}

std::size_t index_field(const json& obj, const std::string& where, const char* key,
                        std::size_t lo) {
    const json& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(lo))
        fail("'" + std::string(where) + "." + key + "' must be an integer >= " +
             std::to_string(lo));
    return v.get<std::size_t>();
}

std::vector<double> number_list(const json& v, const std::string& where) {
    if (!v.is_array() || v.empty()) fail("'" + where + "' must be a non-empty array of numbers");
    std::vector<double> out;
    out.reserve(v.size());
    for (const json& e : v) {
        if (!e.is_number()) fail("'" + where + "' must contain numbers only");
        out.push_back(e.get<double>());
    }
    return out;
}

double poly_val(const std::vector<double>& c, double s) {
    double acc = 0.0;
    for (std::size_t k = c.size(); k-- > 0;) acc = acc * s + c[k];
    return acc;
}

std::vector<double> poly_derive(const std::vector<double>& c) {
    std::vector<double> d;
    for (std::size_t k = 1; k < c.size(); ++k) d.push_back(static_cast<double>(k) * c[k]);
    if (d.empty()) d.push_back(0.0);
    return d;
}

ScenarioConfig build_custom(const json& cb, double eps1, double eps2) {
    check_keys(cb, "custom",
               {"regime", "terms", "trace_coefs", "f0_coefs", "density_coefs", "u_box", "v_box"});
    if (cb.contains("regime")) {
        const json& r = cb.at("regime");
        if (!r.is_string() || r.get<std::string>() != "existence")
            fail("custom scenarios support regime \"existence\" only");
    }
    if (!cb.contains("terms")) fail("missing field 'terms' in 'custom'");
    if (!cb.contains("trace_coefs")) fail("missing field 'trace_coefs' in 'custom'");

    const json& tj = cb.at("terms");
    if (!tj.is_array() || tj.empty()) fail("'custom.terms' must be a non-empty array");
    std::vector<PolyTerm> terms;
    for (const json& e : tj) {
        if (!e.is_object()) fail("'custom.terms' entries must be objects");
        check_keys(e, "custom.terms[]", {"power", "xcoefs"});
        if (!e.contains("power")) fail("missing field 'power' in 'custom.terms[]'");
        if (!e.contains("xcoefs")) fail("missing field 'xcoefs' in 'custom.terms[]'");
        std::size_t p = index_field(e, "custom.terms[]", "power", 0);
        std::vector<double> xc = number_list(e.at("xcoefs"), "custom.terms[].xcoefs");
        terms.push_back(make_xpoly_term(MultiIndex{static_cast<int>(p)}, 0, xc));
    }

    std::vector<double> ac = number_list(cb.at("trace_coefs"), "custom.trace_coefs");
    std::vector<double> ad = poly_derive(ac), add = poly_derive(ad);
    std::vector<double> f0c = cb.contains("f0_coefs")
                                  ? number_list(cb.at("f0_coefs"), "custom.f0_coefs")
                                  : std::vector<double>{ac.front()};
    if (std::abs(poly_val(f0c, 0.0) - ac.front()) > 1e-9)
        fail("'custom.f0_coefs' must match 'custom.trace_coefs' at zero (corner condition)");

    ScenarioConfig cfg;
    cfg.tag = "custom";
    cfg.title = "user-defined scalar flow from a config file";
    cfg.regime = Regime::Existence;
    cfg.a_trace = [ac](double t) { return Vec{poly_val(ac, t)}; };
    cfg.a_dot = [ad](double t) { return Vec{poly_val(ad, t)}; };
    cfg.a_ddot = [add](double t) { return Vec{poly_val(add, t)}; };
    cfg.f0 = [f0c](double x) { return Vec{poly_val(f0c, x)}; };
    if (cb.contains("density_coefs")) {
        std::vector<double> dc = number_list(cb.at("density_coefs"), "custom.density_coefs");
        cfg.density0 = [dc](double w) { return Vec{poly_val(dc, w)}; };
    }
    cfg.eps1 = eps1;
    cfg.x_nodes = log_spaced(0.05, 1.5, 40);

    // Default boxes pad the sampled range of the boundary and initial data.
    double lo = ac.front(), hi = lo;
    for (int i = 0; i <= 64; ++i) {
        double t = eps1 * static_cast<double>(i) / 64.0;
        double a = poly_val(ac, t);
        double f = poly_val(f0c, cfg.x_nodes.front() * static_cast<double>(i) / 64.0);
        lo = std::min({lo, a, f});
        hi = std::max({hi, a, f});
    }
    double scale = std::max(std::abs(lo), std::abs(hi));
    double padU = 0.35 * std::max(1.0, scale), padV = 0.9 * std::max(1.0, scale);
    Box U{{lo - padU}, {hi + padU}};
    Box V{{lo - padV}, {hi + padV}};
    auto read_box = [&](const char* key) {
        std::vector<double> b2 = number_list(cb.at(key), std::string("custom.") + key);
        if (b2.size() != 2 || !(b2[0] < b2[1]))
            fail(std::string("'custom.") + key + "' must be [lo, hi] with lo < hi");
        return Box{{b2[0]}, {b2[1]}};
    };
    if (cb.contains("u_box")) U = read_box("u_box");
    if (cb.contains("v_box")) V = read_box("v_box");

    cfg.spec = make_spec(1, std::move(terms), U, V, eps2, eps1);
    return cfg;
}

void apply_borg(const json& b, RunConfig& rc) {
    check_keys(b, "borg", {"q", "level", "amplitude"});
    std::string kind = "zero";
    if (b.contains("q")) {
        const json& q = b.at("q");
        if (!q.is_string()) fail("'borg.q' must be a string");
        kind = q.get<std::string>();
    }
    double level = 0.5, amplitude = 0.1;
    if (b.contains("level")) level = number_field(b, "borg", "level");
    if (b.contains("amplitude")) amplitude = number_field(b, "borg", "amplitude");
    rc.borg_kind = kind;
    if (kind == "zero") {
        rc.scenario.borg_q = [](double) { return 0.0; };
        rc.borg_tol = 1e-6;
    } else if (kind == "const") {
        rc.scenario.borg_q = [level](double) { return level; };
        rc.borg_tol = 1e-4;
    } else if (kind == "cosine") {
        rc.scenario.borg_q = [amplitude](double t) { return amplitude * std::cos(t); };
        rc.borg_tol = 5e-4;
    } else {
        fail("'borg.q' must be one of \"zero\", \"const\", \"cosine\"");
    }
}

void apply_constants(const json& b, ScenarioConfig& cfg, bool custom) {
    check_keys(b, "constants", {"eps1", "eps2", "delta_cap", "r", "gammas"});
    if (b.contains("eps1")) {
        double v = number_field(b, "constants", "eps1");
        if (!(v > 0.0)) fail("'constants.eps1' must be positive");
        if (v > cfg.spec.t_max + 1e-12) fail("'constants.eps1' exceeds the scenario time horizon");
        cfg.eps1 = v;
    }
    if (b.contains("eps2")) {
        double v = number_field(b, "constants", "eps2");
        if (!(v > 0.0)) fail("'constants.eps2' must be positive");
        cfg.spec.eps2 = v;
    }
    if (b.contains("delta_cap")) {
        double v = number_field(b, "constants", "delta_cap");
        if (v < 0.0) fail("'constants.delta_cap' must be >= 0");
        cfg.delta_cap = v;
    }
    if (b.contains("r")) {
        double v = number_field(b, "constants", "r");
        if (!(v > 0.0)) fail("'constants.r' must be positive");
        cfg.r_default = v;
    }
    if (b.contains("gammas")) {
        std::vector<double> gs = number_list(b.at("gammas"), "constants.gammas");
        for (double g : gs)
            if (!(g > 0.0 && g <= 1.0)) fail("'constants.gammas' entries must lie in (0, 1]");
        cfg.gammas = gs;
    }
    (void)custom;
}

void apply_grids(const json& b, ScenarioConfig& cfg) {
    check_keys(b, "grids", {"nt", "nw", "nx", "x_min", "x_max"});
    if (b.contains("nt")) cfg.nt = index_field(b, "grids", "nt", 9);
    if (b.contains("nw")) cfg.nw = index_field(b, "grids", "nw", 9);
    if (b.contains("nx") || b.contains("x_min") || b.contains("x_max")) {
        std::size_t nx = cfg.x_nodes.size();
        double xmax = cfg.x_nodes.front(), xmin = cfg.x_nodes.back();
        if (b.contains("nx")) nx = index_field(b, "grids", "nx", 3);
        if (b.contains("x_min")) xmin = number_field(b, "grids", "x_min");
        if (b.contains("x_max")) xmax = number_field(b, "grids", "x_max");
        if (!(xmin > 0.0 && xmax > xmin)) fail("'grids' needs 0 < x_min < x_max");
        cfg.x_nodes = log_spaced(xmin, xmax, nx);
    }
}

void apply_tolerances(const json& b, ScenarioConfig& cfg) {
    check_keys(b, "tolerances", {"picard", "ode"});
    if (b.contains("picard")) {
        double v = number_field(b, "tolerances", "picard");
        if (!(v > 0.0 && v <= 1e-2)) fail("'tolerances.picard' must lie in (0, 1e-2]");
        cfg.tol_picard = v;
    }
    if (b.contains("ode")) {
        double v = number_field(b, "tolerances", "ode");
        if (!(v > 0.0 && v <= 1e-2)) fail("'tolerances.ode' must lie in (0, 1e-2]");
        cfg.tol_ode = v;
    }
}

} // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        fail(std::string("not valid JSON (") + e.what() + ")");
    }
    if (!root.is_object()) fail("top level must be an object");
    check_keys(root, "top level",
               {"scenario", "seed", "out", "constants", "grids", "tolerances", "borg", "custom"});
    if (!root.contains("scenario")) fail("missing field 'scenario' at top level");
    const json& sc = root.at("scenario");
    if (!sc.is_string()) fail("'scenario' must be a string");
    std::string tag = sc.get<std::string>();

    RunConfig rc;
    if (tag == "custom") {
        if (!root.contains("custom"))
            fail("missing field 'custom' at top level (required for custom scenarios)");
        if (!root.contains("constants"))
            fail("missing field 'eps1' in 'constants' (required for custom scenarios)");
        const json& cb = block(root, "constants");
        if (!cb.contains("eps1"))
            fail("missing field 'eps1' in 'constants' (required for custom scenarios)");
        if (!cb.contains("eps2"))
            fail("missing field 'eps2' in 'constants' (required for custom scenarios)");
        double e1 = number_field(cb, "constants", "eps1");
        double e2 = number_field(cb, "constants", "eps2");
        if (!(e1 > 0.0)) fail("'constants.eps1' must be positive");
        if (!(e2 > 0.0)) fail("'constants.eps2' must be positive");
        rc.scenario = build_custom(block(root, "custom"), e1, e2);
    } else {
        try {
            rc.scenario = builtin_scenario(tag);
        } catch (const std::invalid_argument&) {
            fail("unknown scenario '" + tag + "'");
        }
        if (root.contains("custom")) fail("'custom' block requires scenario \"custom\"");
    }
    if (root.contains("borg")) {
        if (tag != "borg") fail("'borg' block requires scenario \"borg\"");
        apply_borg(block(root, "borg"), rc);
    }
    if (root.contains("constants"))
        apply_constants(block(root, "constants"), rc.scenario, tag == "custom");
    if (root.contains("grids")) apply_grids(block(root, "grids"), rc.scenario);
    if (root.contains("tolerances")) apply_tolerances(block(root, "tolerances"), rc.scenario);
    if (root.contains("seed")) {
        const json& s = root.at("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
            fail("'seed' must be a non-negative integer");
        rc.scenario.seed = s.get<std::uint64_t>();
    }
    if (root.contains("out")) {
        const json& o = root.at("out");
        if (!o.is_string()) fail("'out' must be a string");
        rc.out_dir = o.get<std::string>();
    }
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

} // namespace dq
