#pragma once

#include "reflex/denoiser.hpp"
#include "reflex/scenario.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace reflex {

/// One manifest line. Offsets are in bytes into payload.f32.
struct DatasetRecord {
    ScenarioKind kind = ScenarioKind::straight;
    std::uint64_t seed = 0;
    RoadSpec road;
    bool high_lat = false;
    int agents = 1;
    std::uint64_t trajectory_offset = 0;
    std::uint64_t conditions_offset = 0;
};

struct DatasetEntry {
    DatasetRecord record;
    Trajectory future;  ///< ego frame, (M+1) x 80 x 4
    ConditionSet conditions;
};

/// Scenario counts per kind; seeds are derived from `seed` and the running index.
struct SuiteSpec {
    std::map<ScenarioKind, int> counts;
    std::uint64_t seed = 0;

    int total() const;
    /// Parses "u_turn:40,straight:60" style lists.
    static SuiteSpec parse(const std::string& text, std::uint64_t seed);
};

std::vector<Scenario> generate_suite(const SuiteSpec& suite);

/// Splits `total` by integer fractions per kind (largest remainder).
SuiteSpec split_suite(const std::map<ScenarioKind, double>& fractions, int total, std::uint64_t seed);

std::string road_to_json(const RoadSpec& road);
RoadSpec road_from_json(const std::string& text);

/// Writes manifest.jsonl and payload.f32 into `dir`. Refuses to overwrite
/// existing files unless `force`.
void write_dataset(const std::filesystem::path& dir, const std::vector<Scenario>& scenarios, bool force = false);
std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir);

/// Training examples with exactly `agents` rows (extra rows dropped, missing rows zero).
std::vector<TrainingExample> to_examples(const std::vector<DatasetEntry>& entries, int agents);

/// Fraction of high-lat scenarios.
double high_lat_fraction(const std::vector<DatasetEntry>& entries);

}  // namespace reflex
