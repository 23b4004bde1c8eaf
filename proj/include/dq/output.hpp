#pragma once

#include <string>
#include <vector>

#include "dq/grid.hpp"

namespace dq {

// CSV writers for the run artifacts. Numbers are printed with %.17g so equal
// inputs always produce byte-identical files.
void write_wfield_csv(const std::string& path, const WField& A, const std::string& prefix = "A");
void write_xfield_csv(const std::string& path, const XField& f, const std::string& prefix = "f");
void write_profile_csv(const std::string& path, const std::vector<double>& x,
                       const std::vector<Vec>& rows, const std::string& prefix = "f");
void write_table_csv(const std::string& path, const std::vector<std::string>& headers,
                     const std::vector<Vec>& rows);

// Minimal self-contained SVG: log10|values| against 1/x as one polyline.
void write_log_decay_svg(const std::string& path, const std::vector<double>& x,
                         const std::vector<double>& values, const std::string& title);

} // namespace dq
