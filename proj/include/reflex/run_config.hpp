#pragma once

#include "reflex/dataset.hpp"
#include "reflex/evaluator.hpp"
#include "reflex/planner.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace reflex {

/// Everything a command needs, serialisable to JSON. Missing keys keep the
/// value of the base config; unknown keys are rejected.
struct RunConfig {
    TrainConfig train;
    SamplerConfig sampler;
    ReflectionConfig reflection;
    bool reflection_enabled = true;
    ConfidenceConstants confidence;
    RolloutConfig rollout;
    SuiteSpec data_suite;  ///< training data composition
    SuiteSpec eval_suite;  ///< evaluation composition
    std::uint64_t seed = 1;  ///< master seed; sub-seeds derive from it unless set explicitly
    int workers = 1;
    std::string out_dir = "out";

    void validate() const;
};

/// Defaults: 1000-scenario training mix, 50 u_turn/sharp_curve evaluation scenarios.
RunConfig default_run_config();

std::string to_json_string(const RunConfig& cfg, int indent = 2);
RunConfig parse_run_config(const std::string& text, const RunConfig& base = default_run_config());
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = default_run_config());

/// Overrides every derived seed when REFLEX_SEED is set. Returns the value used, if any.
std::optional<std::uint64_t> apply_env_seed(RunConfig& cfg);

/// Reseeds the sub-configs from the master seed.
void derive_seeds(RunConfig& cfg);

std::string suite_to_string(const SuiteSpec& suite);

/// Planner settings for the diffusion planner, reflection per `cfg` unless forced.
PlannerConfig planner_config(const RunConfig& cfg, std::optional<bool> reflection = std::nullopt);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace reflex
