#pragma once

// Flat key-value run configuration. Parsing rejects unknown and duplicate
// keys; canonical_config_text() emits every key in a fixed order with
// shortest-round-trip number formatting, so canonicalization is idempotent.

#include <string>

#include "hybridlm/data.hpp"
#include "hybridlm/distill.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/plan.hpp"

namespace hybridlm {

struct RunConfig {
    TaskSpec task;
    ModelConfig model;
    double ratio = 0.25;
    Placement strategy = Placement::evenly;
    std::string init = "transfer";
    DistillConfig distill;
    std::string out_dir = "runs/out";

    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
std::string canonical_config_text(const RunConfig& cfg);
void write_config_file(const std::string& path, const RunConfig& cfg);

// shortest round-trip decimal formatting used across config and reports
std::string format_double(double v);

}  // namespace hybridlm
