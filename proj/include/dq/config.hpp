#pragma once

#include <string>

#include "dq/scenarios.hpp"

namespace dq {

// A validated run description assembled from a JSON document: the scenario to
// execute plus artifact options. CLI flags may override out_dir and seed.
struct RunConfig {
    ScenarioConfig scenario;
    std::string out_dir;            // optional "out" field; --out takes precedence
    std::string borg_kind = "zero"; // potential family for the m-function run
    double borg_tol = 1e-6;         // residual verdict threshold for that family
};

// Parses and validates a config document. The schema is strict: unknown
// fields anywhere are rejected. All diagnostics are std::invalid_argument
// with messages of the form "config: ..." naming the offending field.
RunConfig parse_run_config(const std::string& json_text);

// Reads path and parses its contents; std::runtime_error when unreadable.
RunConfig load_run_config(const std::string& path);

} // namespace dq
